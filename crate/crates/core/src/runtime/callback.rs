use std::sync::{Arc, Weak};

use super::{Sandbox, SandboxInner};
use crate::error::Error;
use crate::memory::RegionHandle;
use crate::taint::{GuestLayout, GuestScalar, SandboxId, Tainted, TaintedGuestRef, ValueKind};

/// Fixed size of every sandbox's trampoline table.
pub const CALLBACK_SLOTS: usize = 64;

/// A callback parameter as the host receives it: always tainted.
pub trait CallbackParam: Sized {
    const KIND: ValueKind;
    fn from_guest(region: &RegionHandle, raw: u64) -> Result<Self, Error>;
}

impl<S: GuestScalar> CallbackParam for Tainted<S> {
    const KIND: ValueKind = S::KIND;
    fn from_guest(region: &RegionHandle, raw: u64) -> Result<Self, Error> {
        Ok(Tainted::with_origin(S::from_raw(raw), region.id()))
    }
}

impl<T: GuestLayout> CallbackParam for TaintedGuestRef<T> {
    const KIND: ValueKind = ValueKind::Ptr;
    fn from_guest(region: &RegionHandle, raw: u64) -> Result<Self, Error> {
        Ok(TaintedGuestRef::resolve(region, raw & 0xFFFF_FFFF)?)
    }
}

/// Parameter lists of registered callbacks: tuples of [`CallbackParam`].
pub trait CallbackParams: Sized {
    fn kinds() -> Vec<ValueKind>;
    fn from_guest(region: &RegionHandle, raw: &[u64]) -> Result<Self, Error>;
}

macro_rules! callback_params {
    ($($name:ident : $idx:tt),*) => {
        impl<$($name: CallbackParam),*> CallbackParams for ($($name,)*) {
            fn kinds() -> Vec<ValueKind> {
                vec![$($name::KIND),*]
            }
            #[allow(unused_variables)]
            fn from_guest(region: &RegionHandle, raw: &[u64]) -> Result<Self, Error> {
                Ok(($($name::from_guest(region, raw[$idx])?,)*))
            }
        }
    };
}

callback_params!();
callback_params!(A: 0);
callback_params!(A: 0, B: 1);
callback_params!(A: 0, B: 1, C: 2);
callback_params!(A: 0, B: 1, C: 2, D: 3);
callback_params!(A: 0, B: 1, C: 2, D: 3, E: 4);

pub(crate) type ErasedCallback = dyn Fn(&Sandbox, &[u64]) -> Result<u64, Error> + Send + Sync;

pub(crate) struct Registration {
    pub generation: u64,
    pub params: Vec<ValueKind>,
    pub func: Arc<ErasedCallback>,
    /// Address of the host closure, kept so leak scans can look for it.
    pub host_addr: usize,
}

pub(crate) struct CallbackTable {
    pub slots: Vec<Option<Registration>>,
    pub next_generation: u64,
}

impl CallbackTable {
    pub fn new() -> Self {
        CallbackTable {
            slots: (0..CALLBACK_SLOTS).map(|_| None).collect(),
            next_generation: 1,
        }
    }

    pub fn active(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// A live callback registration.
///
/// The guest only ever sees its slot index. Dropping the handle deactivates
/// the slot, so a registration cannot outlive the scope that created it.
pub struct Callback {
    sandbox: Weak<SandboxInner>,
    origin: SandboxId,
    slot: u32,
    generation: u64,
}

impl Callback {
    pub(crate) fn new(sandbox: Weak<SandboxInner>, origin: SandboxId, slot: u32, generation: u64) -> Self {
        Callback {
            sandbox,
            origin,
            slot,
            generation,
        }
    }

    pub fn slot(&self) -> u32 {
        self.slot
    }

    pub fn origin(&self) -> SandboxId {
        self.origin
    }

    /// Deactivates the slot. Idempotent.
    pub fn unregister(&self) {
        if let Some(inner) = self.sandbox.upgrade() {
            let mut table = inner.callbacks.lock().unwrap();
            let slot = &mut table.slots[self.slot as usize];
            if slot.as_ref().is_some_and(|r| r.generation == self.generation) {
                *slot = None;
            }
        }
    }
}

impl Drop for Callback {
    fn drop(&mut self) {
        self.unregister();
    }
}

impl std::fmt::Debug for Callback {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Callback({} slot {})", self.origin, self.slot)
    }
}
