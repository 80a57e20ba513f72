//! Guest execution on the calling host thread, shared by the null and
//! emulated-SFI backends.

use std::sync::{Arc, Mutex};

use super::{HostServices, InvokeOutcome, Symbol};
use crate::abi::{GuestEnv, GuestLibrary, GuestMemory, GuestResult, GuestTrap};
use crate::error::Error;
use crate::memory::RESERVED_PREFIX;
use crate::runtime::heap::HeapAllocator;

pub(crate) struct InProcessGuest {
    pub library: Arc<GuestLibrary>,
    pub memory: GuestMemory,
    pub heap: Mutex<HeapAllocator>,
}

impl InProcessGuest {
    pub fn new(library: Arc<GuestLibrary>, memory: GuestMemory) -> Self {
        let heap = HeapAllocator::new(RESERVED_PREFIX as u64, memory.size());
        InProcessGuest {
            library,
            memory,
            heap: Mutex::new(heap),
        }
    }

    pub fn resolve(&self, name: &str, exported_only: bool) -> Result<Symbol, Error> {
        let (index, e) = self
            .library
            .find(name, exported_only)
            .ok_or_else(|| Error::Resolution(format!("`{name}` is not exported by {}", self.library.name)))?;
        Ok(Symbol {
            index,
            params: e.params.to_vec(),
            ret: e.ret,
        })
    }

    pub fn run(&self, host: &dyn HostServices, index: u32, args: &[u64]) -> Result<InvokeOutcome, Error> {
        let export = self
            .library
            .get(index)
            .ok_or_else(|| Error::Resolution(format!("no guest function at index {index}")))?;
        let mut env = InProcessEnv { guest: self, host };
        match (export.func)(&mut env, args) {
            Ok(v) => Ok(InvokeOutcome::Returned(v)),
            Err(GuestTrap::Unwind) => Ok(InvokeOutcome::Unwound),
            Err(GuestTrap::Fault(msg)) => Err(Error::GuestFault(msg)),
        }
    }

    pub fn malloc(&self, size: u32, align: u32) -> Result<u32, Error> {
        self.heap
            .lock()
            .unwrap()
            .alloc(size as u64, align as u64)
            .map(|o| o as u32)
            .ok_or(Error::Alloc(size as u64))
    }

    pub fn free(&self, offset: u32) -> Result<(), Error> {
        if self.heap.lock().unwrap().free(offset as u64) {
            Ok(())
        } else {
            Err(Error::InvalidFree(offset))
        }
    }

    pub fn high_water(&self) -> u64 {
        self.heap.lock().unwrap().high_water()
    }
}

struct InProcessEnv<'a> {
    guest: &'a InProcessGuest,
    host: &'a dyn HostServices,
}

impl GuestEnv for InProcessEnv<'_> {
    fn mem(&self) -> &GuestMemory {
        &self.guest.memory
    }

    fn malloc(&mut self, size: u32, align: u32) -> GuestResult<u32> {
        Ok(self.guest.malloc(size, align).unwrap_or(0))
    }

    fn free(&mut self, offset: u32) -> GuestResult<()> {
        self.guest
            .free(offset)
            .map_err(|e| GuestTrap::Fault(e.to_string()))
    }

    fn callback(&mut self, slot: u32, args: &[u64]) -> GuestResult<u64> {
        if self.host.unwinding() {
            return Err(GuestTrap::Unwind);
        }
        self.host.dispatch(slot, args).map_err(|_| GuestTrap::Unwind)
    }

    fn exit(&mut self, code: i32) -> GuestTrap {
        self.host.request_exit(code);
        GuestTrap::Unwind
    }
}
