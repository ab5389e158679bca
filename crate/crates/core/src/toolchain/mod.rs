//! Assembler, printer and linker for the toy ISA.

pub mod asm;
pub mod image;
pub mod layout;
pub mod link;
pub mod print;

pub use asm::{assemble, AsmError};
pub use layout::{MemoryLayout, Region, RegionFlags};
pub use link::{link, FirmwareImage, LinkError, Segment};
pub use print::print_object;
