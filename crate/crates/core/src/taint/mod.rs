//! Tainted-data discipline for values crossing out of a sandbox.
//!
//! Everything the guest produces arrives wrapped: scalars as [`Tainted`],
//! pointers as [`TaintedGuestRef`], in-place guest data as
//! [`TaintedVolatile`]. The only ways back to plain host values are the
//! validators (`verify`, `copy_and_verify*`) and the audited
//! `unsafe_unverified` escape hatch.

pub mod audit;
mod freeze;
mod guest_ref;
mod record;
mod scalar;
mod tainted;

pub use freeze::FreezableCell;
pub use guest_ref::{
    GuestLayout, IndexOperand, IntoGuestValue, ResolveIn, TaintedGuestRef, TaintedVolatile,
};
pub use record::{
    record_layout, register_record, FieldDescriptor, GuestRecord, RecordBuilder,
    RecordLayoutDescriptor,
};
pub use scalar::{CallbackSlot, GuestInt, GuestPtr, GuestScalar, HostCopyable, ValueKind};
pub use tainted::{
    set_validation_policy, validation_policy, SandboxId, Tainted, TaintedOperand, ValidationPolicy,
};

pub(crate) use tainted::reject;

/// Marker for views that must stay on the thread that made them.
pub(crate) type ThreadBound<V> = std::marker::PhantomData<(fn() -> V, *const ())>;
