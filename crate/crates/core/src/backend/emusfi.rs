//! In-process SFI emulation.
//!
//! Guest code is host-compiled but only touches memory through masking
//! accessors: every effective address is `base | (offset & mask)`, so wild
//! guest arithmetic wraps harmlessly inside the region instead of trapping.

use std::cell::Cell;
use std::sync::Arc;

use super::inproc::InProcessGuest;
use super::{Backend, BackendKind, HostServices, InvokeOutcome, Symbol};
use crate::abi::{GuestLibrary, GuestMemory};
use crate::error::Error;
use crate::memory::{Region, RegionHandle};
use crate::taint::SandboxId;

/// A size-aligned region seen through masking accessors.
#[derive(Clone)]
pub struct MaskedRegion {
    region: RegionHandle,
}

impl MaskedRegion {
    pub fn new(region: RegionHandle) -> Self {
        MaskedRegion { region }
    }

    pub fn base(&self) -> usize {
        self.region.base()
    }

    pub fn size(&self) -> usize {
        self.region.size()
    }

    pub fn mask(&self) -> usize {
        self.region.mask()
    }

    /// Loads `bytes.len()` (≤ 8) bytes; the address is masked, never checked.
    pub fn masked_load(&self, offset: u64, width: usize) -> Vec<u8> {
        let v = self.region.masked_load(offset, width.min(8));
        v.to_le_bytes()[..width.min(8)].to_vec()
    }

    pub fn masked_store(&self, offset: u64, bytes: &[u8]) {
        let mut b = [0u8; 8];
        let n = bytes.len().min(8);
        b[..n].copy_from_slice(&bytes[..n]);
        self.region.masked_store(offset, n, u64::from_le_bytes(b));
    }

    pub fn memory(&self) -> GuestMemory {
        GuestMemory::masked(self.region.clone())
    }
}

thread_local! {
    // Sandbox currently executing on this thread; saved and restored across
    // every transition so nested invocations unwind correctly.
    static ACTIVE: Cell<u32> = const { Cell::new(0) };
}

pub struct EmuSfiBackend {
    region: MaskedRegion,
    guest: InProcessGuest,
}

impl EmuSfiBackend {
    pub fn new(id: SandboxId, size: usize, library: Arc<GuestLibrary>) -> Result<Self, Error> {
        let region = Region::anonymous(id, size).map_err(|e| Error::Creation(e.to_string()))?;
        let masked = MaskedRegion::new(region);
        let guest = InProcessGuest::new(library, masked.memory());
        Ok(EmuSfiBackend { region: masked, guest })
    }

    pub fn masked_region(&self) -> &MaskedRegion {
        &self.region
    }

    /// Sandbox id executing guest code on this thread, if any.
    pub fn active_sandbox() -> Option<SandboxId> {
        match ACTIVE.with(Cell::get) {
            0 => None,
            id => Some(SandboxId(id)),
        }
    }
}

impl Backend for EmuSfiBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::EmuSfi
    }

    fn region(&self) -> &RegionHandle {
        &self.region.region
    }

    fn resolve(&self, name: &str) -> Result<Symbol, Error> {
        self.guest.resolve(name, true)
    }

    fn invoke(&self, host: &dyn HostServices, index: u32, args: &[u64]) -> Result<InvokeOutcome, Error> {
        let id = self.region.region.id().0;
        let saved = ACTIVE.with(|a| a.replace(id));
        let out = self.guest.run(host, index, args);
        ACTIVE.with(|a| a.set(saved));
        out
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
