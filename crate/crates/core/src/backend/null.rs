//! Zero-isolation backends used while migrating a library.
//!
//! `Direct` calls straight into the linked library and can reach any of its
//! symbols. `Indirect` only resolves symbols through the export table, so a
//! call that was not routed through `invoke` fails at lookup. Both still use
//! a size-aligned region so the taint and swizzling paths are the same as in
//! the isolating backends.

use std::sync::Arc;

use super::inproc::InProcessGuest;
use super::{Backend, BackendKind, HostServices, InvokeOutcome, Symbol};
use crate::abi::{GuestLibrary, GuestMemory};
use crate::error::Error;
use crate::memory::{Region, RegionHandle};
use crate::taint::SandboxId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullVariant {
    Direct,
    Indirect,
}

pub struct NullBackendConfig {
    pub variant: NullVariant,
    pub library: Arc<GuestLibrary>,
}

pub struct NullBackend {
    variant: NullVariant,
    region: RegionHandle,
    guest: InProcessGuest,
}

impl NullBackend {
    pub fn new(id: SandboxId, size: usize, config: NullBackendConfig) -> Result<Self, Error> {
        let region = Region::anonymous(id, size).map_err(|e| Error::Creation(e.to_string()))?;
        let guest = InProcessGuest::new(config.library, GuestMemory::checked(region.clone()));
        Ok(NullBackend {
            variant: config.variant,
            region,
            guest,
        })
    }
}

impl Backend for NullBackend {
    fn kind(&self) -> BackendKind {
        match self.variant {
            NullVariant::Direct => BackendKind::NullDirect,
            NullVariant::Indirect => BackendKind::NullIndirect,
        }
    }

    fn region(&self) -> &RegionHandle {
        &self.region
    }

    fn resolve(&self, name: &str) -> Result<Symbol, Error> {
        self.guest.resolve(name, self.variant == NullVariant::Indirect)
    }

    fn invoke(&self, host: &dyn HostServices, index: u32, args: &[u64]) -> Result<InvokeOutcome, Error> {
        self.guest.run(host, index, args)
    }

    fn malloc(&self, _host: &dyn HostServices, size: u32, align: u32) -> Result<u32, Error> {
        self.guest.malloc(size, align)
    }

    fn free(&self, _host: &dyn HostServices, offset: u32) -> Result<(), Error> {
        self.guest.free(offset)
    }

    fn heap_high_water(&self) -> u64 {
        self.guest.high_water()
    }

    fn shutdown(&self) {}
}
