//! What guest code sees: a memory view, a heap, callback trampolines and
//! the host-mediated exit.
//!
//! Guest libraries are ordinary host-compiled functions written against
//! [`GuestEnv`]. They never see host addresses, only 32-bit region offsets.

use crate::error::TaintError;
use crate::memory::RegionHandle;
use crate::taint::ValueKind;

/// Abnormal end of a guest function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuestTrap {
    /// The host asked the guest to unwind (non-local exit, violation or a
    /// failed callback). Whatever the guest returns afterwards is ignored.
    Unwind,
    /// Memory fault in an unmasked (null backend) access.
    Fault(String),
}

pub type GuestResult<T> = Result<T, GuestTrap>;

/// The guest's view of its region.
///
/// Masked views (SFI emulation, process worker) wrap every address into the
/// region; checked views (null backend) fault on out-of-range offsets.
#[derive(Clone)]
pub struct GuestMemory {
    region: RegionHandle,
    masked: bool,
}

impl GuestMemory {
    pub fn masked(region: RegionHandle) -> Self {
        GuestMemory { region, masked: true }
    }

    pub fn checked(region: RegionHandle) -> Self {
        GuestMemory {
            region,
            masked: false,
        }
    }

    pub fn size(&self) -> u64 {
        self.region.size() as u64
    }

    fn fault(e: TaintError) -> GuestTrap {
        GuestTrap::Fault(e.to_string())
    }

    #[inline]
    pub fn load(&self, offset: u32, width: usize) -> GuestResult<u64> {
        if self.masked {
            Ok(self.region.masked_load(offset as u64, width))
        } else {
            let addr = self
                .region
                .check_range(offset as u64, width as u64)
                .map_err(Self::fault)?;
            self.region.load_at(addr, width).map_err(Self::fault)
        }
    }

    #[inline]
    pub fn store(&self, offset: u32, width: usize, value: u64) -> GuestResult<()> {
        if self.masked {
            self.region.masked_store(offset as u64, width, value);
            Ok(())
        } else {
            let addr = self
                .region
                .check_range(offset as u64, width as u64)
                .map_err(Self::fault)?;
            self.region.store_at(addr, width, value).map_err(Self::fault)
        }
    }

    pub fn read(&self, offset: u32, out: &mut [u8]) -> GuestResult<()> {
        if self.masked {
            self.region.masked_read(offset as u64, out);
            Ok(())
        } else {
            self.region.read_bytes(offset as u64, out).map_err(Self::fault)
        }
    }

    pub fn write(&self, offset: u32, data: &[u8]) -> GuestResult<()> {
        if self.masked {
            self.region.masked_write(offset as u64, data);
            Ok(())
        } else {
            self.region.write_bytes(offset as u64, data).map_err(Self::fault)
        }
    }

    pub fn load_u8(&self, offset: u32) -> GuestResult<u8> {
        self.load(offset, 1).map(|v| v as u8)
    }

    pub fn load_u32(&self, offset: u32) -> GuestResult<u32> {
        self.load(offset, 4).map(|v| v as u32)
    }

    pub fn store_u8(&self, offset: u32, v: u8) -> GuestResult<()> {
        self.store(offset, 1, v as u64)
    }

    pub fn store_u32(&self, offset: u32, v: u32) -> GuestResult<()> {
        self.store(offset, 4, v as u64)
    }

    /// Atomic 32-bit store at an aligned in-region offset (used by guest
    /// threads racing the host).
    pub fn store_u32_atomic(&self, offset: u32, v: u32) {
        let addr = self.region.masked_addr(offset as u64 & !3);
        self.region.atomic_store(addr, 4, v as u64);
    }

    pub fn load_u32_atomic(&self, offset: u32) -> u32 {
        let addr = self.region.masked_addr(offset as u64 & !3);
        self.region.atomic_load(addr, 4) as u32
    }
}

/// Services available to a running guest function.
pub trait GuestEnv {
    fn mem(&self) -> &GuestMemory;

    /// Guest heap allocation; returns 0 when exhausted.
    fn malloc(&mut self, size: u32, align: u32) -> GuestResult<u32>;

    fn free(&mut self, offset: u32) -> GuestResult<()>;

    /// Calls the host through trampoline `slot`.
    fn callback(&mut self, slot: u32, args: &[u64]) -> GuestResult<u64>;

    /// Requests a non-local exit; the returned trap must be propagated.
    fn exit(&mut self, code: i32) -> GuestTrap;
}

pub type GuestFn = fn(&mut dyn GuestEnv, &[u64]) -> GuestResult<u64>;

#[derive(Clone)]
pub struct GuestExport {
    pub name: &'static str,
    pub params: &'static [ValueKind],
    pub ret: ValueKind,
    pub func: GuestFn,
    /// Visible through dynamic (table) lookup. Internal helpers are only
    /// reachable by direct static linkage.
    pub exported: bool,
}

#[derive(Clone)]
pub struct GuestLibrary {
    pub name: &'static str,
    pub exports: Vec<GuestExport>,
}

impl GuestLibrary {
    pub fn find(&self, name: &str, exported_only: bool) -> Option<(u32, &GuestExport)> {
        self.exports
            .iter()
            .enumerate()
            .find(|(_, e)| e.name == name && (e.exported || !exported_only))
            .map(|(i, e)| (i as u32, e))
    }

    pub fn get(&self, index: u32) -> Option<&GuestExport> {
        self.exports.get(index as usize)
    }
}
