//! Isolation backends.
//!
//! A backend owns the region and knows how to transfer control into the
//! guest. Everything above it (taint rules, argument translation, callback
//! trampolines, non-local exit) is shared and lives in [`crate::runtime`].

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::memory::RegionHandle;
use crate::taint::ValueKind;

pub mod emusfi;
mod inproc;
pub mod null;
pub mod process;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendKind {
    /// No isolation; calls go straight to the linked library.
    NullDirect,
    /// No isolation, but every call must resolve through the export table.
    NullIndirect,
    /// In-process SFI emulation with masked guest memory.
    EmuSfi,
    /// Guest runs in a worker process over shared memory.
    Process,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::NullDirect => "null",
            BackendKind::NullIndirect => "null-indirect",
            BackendKind::EmuSfi => "emusfi",
            BackendKind::Process => "process",
        }
    }

    pub fn is_isolating(self) -> bool {
        matches!(self, BackendKind::EmuSfi | BackendKind::Process)
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "null" | "null-direct" => BackendKind::NullDirect,
            "null-indirect" => BackendKind::NullIndirect,
            "emusfi" | "sfi" => BackendKind::EmuSfi,
            "process" => BackendKind::Process,
            other => return Err(Error::Config(format!("unknown backend `{other}`"))),
        })
    }
}

/// Process-backend synchronization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum SyncMode {
    /// Bounded busy-wait on the turn flag.
    Spin = 0,
    /// Blocking wait on an OS wait object.
    Event = 1,
}

impl FromStr for SyncMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "spin" => Ok(SyncMode::Spin),
            "event" => Ok(SyncMode::Event),
            other => Err(Error::Config(format!("unknown sync mode `{other}`"))),
        }
    }
}

/// A resolved guest export.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub index: u32,
    pub params: Vec<ValueKind>,
    pub ret: ValueKind,
}

/// How a guest call ended, as seen by the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvokeOutcome {
    Returned(u64),
    /// The guest unwound at the host's request.
    Unwound,
}

/// Why a trampoline dispatch did not produce a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchError {
    /// The host wants the guest to unwind (non-local exit or a failed
    /// callback).
    Unwind,
    /// The guest misused the trampoline (inactive slot, wrong arity).
    Violation,
}

/// Host entry points a backend calls while a guest function runs.
pub trait HostServices {
    /// Trampoline dispatch. Either error means the guest must unwind.
    fn dispatch(&self, slot: u32, raw_args: &[u64]) -> Result<u64, DispatchError>;

    /// Guest-requested non-local exit.
    fn request_exit(&self, code: i32);

    /// True once an unwind is pending for the current invocation.
    fn unwinding(&self) -> bool;

    /// Records a protocol-level violation committed by the guest.
    fn record_violation(&self, detail: String);
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn region(&self) -> &RegionHandle;

    fn resolve(&self, name: &str) -> Result<Symbol, Error>;

    fn invoke(&self, host: &dyn HostServices, index: u32, args: &[u64]) -> Result<InvokeOutcome, Error>;

    /// Guest heap allocation; returns the raw (untrusted) offset.
    fn malloc(&self, host: &dyn HostServices, size: u32, align: u32) -> Result<u32, Error>;

    fn free(&self, host: &dyn HostServices, offset: u32) -> Result<(), Error>;

    fn set_sync_mode(&self, _mode: SyncMode) -> Result<(), Error> {
        Ok(())
    }

    fn pin(&self, _core: usize) -> Result<(), Error> {
        Err(Error::Unsupported(format!("{} backend has no worker to pin", self.kind())))
    }

    fn process_id(&self) -> Option<u32> {
        None
    }

    /// Offset range of the guest heap, for diagnostics.
    fn heap_high_water(&self) -> u64;

    fn shutdown(&self);
}
