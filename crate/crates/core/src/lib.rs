//! Library sandboxing for untrusted guest code.
//!
//! A [`Sandbox`] confines a guest library to a size-aligned memory region
//! behind one of several backends (none, emulated SFI, a worker process).
//! Everything coming back across the boundary is [`Tainted`] until a host
//! validator releases it.

pub mod abi;
pub mod attacks;
pub mod backend;
pub mod error;
pub mod guest;
pub mod measure;
pub mod memory;
pub mod pool;
pub mod runtime;
pub mod taint;

pub use backend::{BackendKind, SyncMode};
pub use error::{Error, Result, TaintError};
pub use pool::{Lease, PoolConfig, SandboxKey, SandboxPool, SyncHint};
pub use runtime::{BusyPolicy, Callback, FunctionRef, Sandbox, SandboxConfig};
pub use taint::{
    FreezableCell, GuestPtr, SandboxId, Tainted, TaintedGuestRef, TaintedVolatile, ValidationPolicy,
};
