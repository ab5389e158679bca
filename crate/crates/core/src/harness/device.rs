//! Supervisor around one VM: pulls reset, feeds input and keeps the UART
//! capture across resets.

use crate::toolchain::FirmwareImage;
use crate::vm::{ExitStatus, Vm, VmConfig, VmError};

pub struct DeviceController {
    vm: Vm,
    capture: Vec<u8>,
    resets: u64,
}

impl DeviceController {
    pub fn new(image: &FirmwareImage, config: VmConfig) -> Result<DeviceController, VmError> {
        Ok(DeviceController { vm: Vm::create(image, config)?, capture: Vec::new(), resets: 0 })
    }

    pub fn reset(&mut self) {
        self.capture.extend(self.vm.read_uart());
        self.vm.pull_reset();
        self.resets += 1;
    }

    /// Resets, feeds `input` and runs to completion.
    pub fn exchange(&mut self, input: &[u8]) -> ExitStatus {
        self.reset();
        self.vm.feed_input(input);
        let exit = self.vm.run(None);
        self.capture.extend(self.vm.read_uart());
        exit
    }

    pub fn resets(&self) -> u64 {
        self.resets
    }

    /// Everything the device has printed since the controller was created.
    pub fn capture(&self) -> &[u8] {
        &self.capture
    }

    pub fn vm(&self) -> &Vm {
        &self.vm
    }
}
