//! Link-time call and return path instrumentation for relocatable objects.
//!
//! The pipeline: [`object`] parses ELF objects and `ar` archives,
//! [`rewriter`] renames selected functions and points every reference at
//! an undefined import of the original name, [`stubgen`] generates the
//! wrapper object that defines those names again, and [`toolchain`] links
//! everything into a flat image for the [`vm`]. [`harness`] runs images,
//! parses trace and crash output, fuzzes inputs and accounts for size.

pub mod cli;
pub mod harness;
pub mod isa;
pub mod object;
pub mod rewriter;
pub mod samples;
pub mod stubgen;
pub mod toolchain;
pub mod vm;
