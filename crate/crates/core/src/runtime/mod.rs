//! Sandbox lifecycle, invocation, callbacks and host-mediated exit.

pub mod callback;
pub mod heap;
pub mod invoke;
pub mod machine;
pub mod swizzle;

use std::any::Any;
use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::thread::{self, ThreadId};

use crate::backend::emusfi::EmuSfiBackend;
use crate::backend::null::{NullBackend, NullBackendConfig, NullVariant};
use crate::backend::process::{ProcessBackend, ProcessOptions};
use crate::backend::{Backend, BackendKind, DispatchError, HostServices, InvokeOutcome, SyncMode};
use crate::error::{Error, TaintError};
use crate::guest::GuestVariant;
use crate::memory::{validate_region_size, RegionHandle, DEFAULT_REGION_SIZE};
use crate::taint::{GuestLayout, GuestScalar, SandboxId, Tainted, TaintedGuestRef, ValueKind};

pub use callback::{Callback, CallbackParam, CallbackParams, CALLBACK_SLOTS};
pub use invoke::{FunctionRef, InvokeArg, InvokeArgs};
pub use machine::{ArgValue, MachineModel};
pub use swizzle::{swizzle_to_guest, swizzle_to_guest_checked, swizzle_to_host};

use callback::{CallbackTable, ErasedCallback, Registration};

/// Number of per-invocation context keys.
pub const CONTEXT_KEYS: u8 = 16;

/// Maximum nesting of invocations on one sandbox from the same host thread
/// (guest → callback → guest → ...).
pub const MAX_INVOKE_DEPTH: u32 = 8;

/// What a second host thread sees when the sandbox is already in a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BusyPolicy {
    #[default]
    Block,
    Error,
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    pub backend: BackendKind,
    pub region_size: usize,
    pub guest: GuestVariant,
    pub busy: BusyPolicy,
    pub process: ProcessOptions,
}

impl SandboxConfig {
    pub fn new(backend: BackendKind) -> Self {
        SandboxConfig {
            backend,
            region_size: DEFAULT_REGION_SIZE,
            guest: GuestVariant::Clean,
            busy: BusyPolicy::Block,
            process: ProcessOptions::default(),
        }
    }

    pub fn region_size(mut self, size: usize) -> Self {
        self.region_size = size;
        self
    }

    pub fn guest(mut self, variant: GuestVariant) -> Self {
        self.guest = variant;
        self
    }

    pub fn busy(mut self, policy: BusyPolicy) -> Self {
        self.busy = policy;
        self
    }

    pub fn sync(mut self, mode: SyncMode) -> Self {
        self.process.sync = mode;
        self
    }
}

/// Return types a host callback can hand back to the guest.
pub trait CallbackReturn {
    const KIND: ValueKind;
    fn into_raw(self) -> u64;
}

impl<S: GuestScalar> CallbackReturn for S {
    const KIND: ValueKind = S::KIND;
    fn into_raw(self) -> u64 {
        self.to_raw()
    }
}

impl CallbackReturn for () {
    const KIND: ValueKind = ValueKind::Void;
    fn into_raw(self) -> u64 {
        0
    }
}

/// Why the current invocation is unwinding.
#[derive(Debug, Clone)]
enum Unwind {
    Exit(i32),
    Error(Error),
}

impl Unwind {
    fn to_error(&self) -> Error {
        match self {
            Unwind::Exit(code) => Error::GuestAbort(*code),
            Unwind::Error(e) => e.clone(),
        }
    }
}

#[derive(Default)]
struct FlightState {
    owner: Option<ThreadId>,
    depth: u32,
}

type ContextValue = Arc<dyn Any + Send + Sync>;
type ContextSlots = [Option<ContextValue>; CONTEXT_KEYS as usize];

thread_local! {
    // Context values staged by this thread for its next invocation of each sandbox.
    static STAGED: RefCell<HashMap<u32, ContextSlots>> = RefCell::new(HashMap::new());
}

static NEXT_ID: AtomicU32 = AtomicU32::new(1);

pub(crate) struct SandboxInner {
    id: SandboxId,
    me: Weak<SandboxInner>,
    backend: Box<dyn Backend>,
    region: RegionHandle,
    model: MachineModel,
    busy: BusyPolicy,
    pub(crate) callbacks: Mutex<CallbackTable>,
    flight: Mutex<FlightState>,
    flight_done: Condvar,
    pending: Mutex<Option<Unwind>>,
    context: Mutex<ContextSlots>,
    violations: Mutex<Vec<String>>,
}

/// A live sandbox. Cloning shares the same instance.
#[derive(Clone)]
pub struct Sandbox {
    inner: Arc<SandboxInner>,
}

impl fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sandbox")
            .field("id", &self.inner.id)
            .field("backend", &self.inner.backend.kind())
            .field("size", &self.inner.region.size())
            .field("alive", &self.is_alive())
            .finish()
    }
}

impl Sandbox {
    pub fn create(config: SandboxConfig) -> Result<Sandbox, Error> {
        validate_region_size(config.region_size).map_err(Error::Creation)?;
        let id = SandboxId(NEXT_ID.fetch_add(1, Ordering::Relaxed));
        let library = crate::guest::library(config.guest);
        let backend: Box<dyn Backend> = match config.backend {
            BackendKind::NullDirect | BackendKind::NullIndirect => {
                let variant = if config.backend == BackendKind::NullDirect {
                    NullVariant::Direct
                } else {
                    NullVariant::Indirect
                };
                Box::new(NullBackend::new(id, config.region_size, NullBackendConfig { variant, library })?)
            }
            BackendKind::EmuSfi => Box::new(EmuSfiBackend::new(id, config.region_size, library)?),
            BackendKind::Process => Box::new(ProcessBackend::spawn(
                id,
                config.region_size,
                config.guest,
                &config.process,
            )?),
        };
        let region = backend.region().clone();
        debug_assert_eq!(region.base() % region.size(), 0);
        let inner = Arc::new_cyclic(|me| SandboxInner {
            id,
            me: me.clone(),
            backend,
            region,
            model: MachineModel::ILP32,
            busy: config.busy,
            callbacks: Mutex::new(CallbackTable::new()),
            flight: Mutex::new(FlightState::default()),
            flight_done: Condvar::new(),
            pending: Mutex::new(None),
            context: Mutex::new(Default::default()),
            violations: Mutex::new(Vec::new()),
        });
        log::debug!("created {id} ({}, {} bytes)", config.backend, config.region_size);
        Ok(Sandbox { inner })
    }

    pub fn id(&self) -> SandboxId {
        self.inner.id
    }

    pub fn kind(&self) -> BackendKind {
        self.inner.backend.kind()
    }

    pub fn region(&self) -> &RegionHandle {
        &self.inner.region
    }

    pub fn machine_model(&self) -> MachineModel {
        self.inner.model
    }

    pub fn is_alive(&self) -> bool {
        self.inner.region.is_alive()
    }

    /// True if both handles refer to the same instance.
    pub fn same_instance(&self, other: &Sandbox) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Tears the sandbox down. Outstanding references error on use.
    pub fn destroy(&self) {
        if !self.is_alive() {
            return;
        }
        self.inner.kill();
        log::debug!("destroyed {}", self.inner.id);
    }

    fn check_alive(&self) -> Result<(), Error> {
        if self.is_alive() {
            Ok(())
        } else {
            Err(Error::SandboxDead(self.inner.id))
        }
    }

    /// Violations the guest committed so far (callback abuse, malformed
    /// messages).
    pub fn violations(&self) -> Vec<String> {
        self.inner.violations.lock().unwrap().clone()
    }

    pub fn active_callbacks(&self) -> usize {
        self.inner.callbacks.lock().unwrap().active()
    }

    /// Host addresses of live callback closures, for leak scanning.
    pub fn callback_host_addrs(&self) -> Vec<usize> {
        let table = self.inner.callbacks.lock().unwrap();
        table.slots.iter().flatten().map(|r| r.host_addr).collect()
    }

    pub fn heap_high_water(&self) -> u64 {
        self.inner.backend.heap_high_water()
    }

    pub fn set_sync_mode(&self, mode: SyncMode) -> Result<(), Error> {
        self.check_alive()?;
        self.inner.backend.set_sync_mode(mode)
    }

    pub fn pin_worker(&self, core: usize) -> Result<(), Error> {
        self.check_alive()?;
        self.inner.backend.pin(core)
    }

    pub fn process_id(&self) -> Option<u32> {
        self.inner.backend.process_id()
    }

    // ---- heap -----------------------------------------------------------

    /// Allocates one `T` in guest memory.
    pub fn malloc<T: GuestLayout>(&self) -> Result<TaintedGuestRef<T>, Error> {
        let (size, align) = T::guest_layout()?;
        self.alloc_raw(size as u32, align as u32)
    }

    pub fn malloc_array<T: GuestLayout>(&self, count: u32) -> Result<TaintedGuestRef<T>, Error> {
        let (size, align) = T::guest_layout()?;
        let total = (size as u64) * count as u64;
        let total = u32::try_from(total).map_err(|_| Error::Alloc(total))?;
        self.alloc_raw(total.max(1), align as u32)
    }

    pub fn malloc_bytes(&self, len: u32) -> Result<TaintedGuestRef<u8>, Error> {
        self.alloc_raw(len.max(1), 1)
    }

    fn alloc_raw<T: GuestLayout>(&self, size: u32, align: u32) -> Result<TaintedGuestRef<T>, Error> {
        self.check_alive()?;
        let _flight = self.enter()?;
        let off = self.inner.backend.malloc(&*self.inner, size, align)?;
        // The offset comes from guest-controlled allocator state.
        if off == 0 {
            return Err(Error::Alloc(size as u64));
        }
        if !(off as u64).is_multiple_of(align.max(1) as u64) {
            return Err(TaintError::Misaligned {
                offset: off as u64,
                align: align as usize,
            }
            .into());
        }
        self.inner.region.check_range(off as u64, size as u64)?;
        Ok(TaintedGuestRef::resolve(&self.inner.region, off as u64)?)
    }

    pub fn free<T>(&self, r: &TaintedGuestRef<T>) -> Result<(), Error> {
        self.check_alive()?;
        if r.origin() != self.inner.id {
            return Err(TaintError::OriginMismatch {
                expected: self.inner.id,
                actual: r.origin(),
            }
            .into());
        }
        let _flight = self.enter()?;
        self.inner.backend.free(&*self.inner, r.raw_offset())
    }

    // ---- invocation -----------------------------------------------------

    /// Resolves an exported guest function. Fails here, not at call time.
    pub fn lookup(&self, name: &str) -> Result<FunctionRef, Error> {
        self.check_alive()?;
        let sym = self.inner.backend.resolve(name)?;
        Ok(FunctionRef {
            sandbox: self.inner.id,
            name: name.to_string(),
            index: sym.index,
            params: sym.params,
            ret: sym.ret,
        })
    }

    /// Calls a guest function; the result is tainted.
    pub fn invoke<R: GuestScalar, A: InvokeArgs>(&self, f: &FunctionRef, args: A) -> Result<Tainted<R>, Error> {
        if !R::KIND.compatible(f.ret) {
            return Err(Error::ArgMismatch(format!(
                "`{}` returns {}, requested as {}",
                f.name,
                f.ret,
                R::KIND
            )));
        }
        let raw = self.invoke_raw(f, args.to_args())?;
        Ok(Tainted::with_origin(R::from_raw(raw), self.inner.id))
    }

    /// Calls a guest function and discards its result.
    pub fn invoke_void<A: InvokeArgs>(&self, f: &FunctionRef, args: A) -> Result<(), Error> {
        self.invoke_raw(f, args.to_args()).map(|_| ())
    }

    fn invoke_raw(&self, f: &FunctionRef, args: Vec<ArgValue>) -> Result<u64, Error> {
        self.check_alive()?;
        if f.sandbox != self.inner.id {
            return Err(Error::ArgMismatch(format!(
                "`{}` was resolved in {}, invoked on {}",
                f.name, f.sandbox, self.inner.id
            )));
        }
        if args.len() != f.params.len() {
            return Err(Error::ArgMismatch(format!(
                "`{}` takes {} arguments, {} given",
                f.name,
                f.params.len(),
                args.len()
            )));
        }
        let raw = args
            .into_iter()
            .zip(&f.params)
            .enumerate()
            .map(|(i, (a, &p))| self.inner.model.narrow(i, p, a, self.inner.id))
            .collect::<Result<Vec<u64>, Error>>()?;

        let flight = self.enter()?;
        if flight.depth == 1 {
            *self.inner.pending.lock().unwrap() = None;
            let staged = STAGED.with(|s| s.borrow_mut().remove(&self.inner.id.0));
            if let Some(staged) = staged {
                *self.inner.context.lock().unwrap() = staged;
            }
        }
        let out = self.inner.backend.invoke(&*self.inner, f.index, &raw);
        if let Err(Error::Transport(_)) = &out {
            self.inner.kill();
        }
        let pending = if flight.depth == 1 {
            self.inner.pending.lock().unwrap().take()
        } else {
            // Leave it in place so every frame up to the outermost unwinds.
            self.inner.pending.lock().unwrap().clone()
        };
        drop(flight);
        if let Some(unwind) = pending {
            return Err(unwind.to_error());
        }
        match out? {
            InvokeOutcome::Returned(v) => Ok(v),
            InvokeOutcome::Unwound => Err(Error::GuestFault(format!(
                "`{}` unwound with no pending exit",
                f.name
            ))),
        }
    }

    fn enter(&self) -> Result<FlightGuard<'_>, Error> {
        let me = thread::current().id();
        let mut st = self.inner.flight.lock().unwrap();
        loop {
            match st.owner {
                None => {
                    st.owner = Some(me);
                    st.depth = 1;
                    break;
                }
                Some(owner) if owner == me => {
                    if st.depth >= MAX_INVOKE_DEPTH {
                        return Err(Error::ReentrancyLimit(st.depth + 1));
                    }
                    st.depth += 1;
                    break;
                }
                Some(_) => match self.inner.busy {
                    BusyPolicy::Error => return Err(Error::Busy),
                    BusyPolicy::Block => st = self.inner.flight_done.wait(st).unwrap(),
                },
            }
        }
        Ok(FlightGuard {
            inner: &self.inner,
            depth: st.depth,
        })
    }

    /// True if the calling thread is inside an invocation of this sandbox.
    pub fn in_invocation(&self) -> bool {
        self.inner.flight.lock().unwrap().owner == Some(thread::current().id())
    }

    /// Host-mediated non-local exit: the outermost in-flight invocation
    /// returns `GuestAbort(code)`.
    pub fn nonlocal_exit(&self, code: i32) -> Result<(), Error> {
        if !self.in_invocation() {
            return Err(Error::ProtocolViolation(format!(
                "non-local exit({code}) on {} with no invocation in flight",
                self.inner.id
            )));
        }
        self.inner.set_pending(Unwind::Exit(code));
        Ok(())
    }

    // ---- callbacks ------------------------------------------------------

    /// Registers a host callback. Its parameters arrive tainted; the guest
    /// only ever sees the returned slot index.
    pub fn register_callback<P, R, F>(&self, f: F) -> Result<Callback, Error>
    where
        P: CallbackParams + 'static,
        R: CallbackReturn + 'static,
        F: Fn(&Sandbox, P) -> Result<R, Error> + Send + Sync + 'static,
    {
        self.check_alive()?;
        let params = P::kinds();
        let arity = params.len();
        let func: Arc<ErasedCallback> = Arc::new(move |sb: &Sandbox, raw: &[u64]| {
            if raw.len() != arity {
                return Err(Error::ArgMismatch(format!("callback takes {arity} arguments, guest passed {}", raw.len())));
            }
            let p = P::from_guest(sb.region(), raw)?;
            f(sb, p).map(CallbackReturn::into_raw)
        });
        let host_addr = Arc::as_ptr(&func) as *const () as usize;
        let mut table = self.inner.callbacks.lock().unwrap();
        let slot = table
            .slots
            .iter()
            .position(Option::is_none)
            .ok_or(Error::SlotsExhausted)?;
        let generation = table.next_generation;
        table.next_generation += 1;
        table.slots[slot] = Some(Registration {
            generation,
            params,
            func,
            host_addr,
        });
        Ok(Callback::new(Arc::downgrade(&self.inner), self.inner.id, slot as u32, generation))
    }

    // ---- invocation context ---------------------------------------------

    /// Stores a host value for the current (or, outside an invocation, the
    /// next) invocation of this sandbox made by this thread.
    pub fn set_invoke_context<T: Any + Send + Sync>(&self, key: u8, value: T) -> Result<(), Error> {
        if key >= CONTEXT_KEYS {
            return Err(Error::InvalidContextKey(key));
        }
        let value: ContextValue = Arc::new(value);
        if self.in_invocation() {
            self.inner.context.lock().unwrap()[key as usize] = Some(value);
        } else {
            STAGED.with(|s| {
                s.borrow_mut().entry(self.inner.id.0).or_default()[key as usize] = Some(value);
            });
        }
        Ok(())
    }

    /// Reads a context value of the invocation the calling thread is in.
    /// Absent outside an invocation.
    pub fn get_invoke_context<T: Any + Send + Sync>(&self, key: u8) -> Result<Option<Arc<T>>, Error> {
        if key >= CONTEXT_KEYS {
            return Err(Error::InvalidContextKey(key));
        }
        if !self.in_invocation() {
            return Ok(None);
        }
        let v = self.inner.context.lock().unwrap()[key as usize].clone();
        Ok(v.and_then(|v| v.downcast::<T>().ok()))
    }
}

struct FlightGuard<'a> {
    inner: &'a SandboxInner,
    depth: u32,
}

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.inner.flight.lock().unwrap();
        st.depth -= 1;
        if st.depth == 0 {
            *self.inner.context.lock().unwrap() = Default::default();
            *self.inner.pending.lock().unwrap() = None;
            st.owner = None;
            drop(st);
            self.inner.flight_done.notify_one();
        }
    }
}

impl SandboxInner {
    fn kill(&self) {
        self.region.mark_dead();
        self.backend.shutdown();
        let mut table = self.callbacks.lock().unwrap();
        table.slots.iter_mut().for_each(|s| *s = None);
    }

    fn set_pending(&self, unwind: Unwind) {
        let mut p = self.pending.lock().unwrap();
        // The first reason wins; later ones are consequences of unwinding.
        if p.is_none() {
            *p = Some(unwind);
        }
    }

    fn violation(&self, slot: u32, reason: String) -> Result<u64, DispatchError> {
        let err = Error::CallbackViolation { slot, reason };
        log::warn!("{}: {err}", self.id);
        self.violations.lock().unwrap().push(err.to_string());
        self.set_pending(Unwind::Error(err));
        Err(DispatchError::Violation)
    }
}

impl HostServices for SandboxInner {
    fn dispatch(&self, slot: u32, raw_args: &[u64]) -> Result<u64, DispatchError> {
        if self.unwinding() {
            return Err(DispatchError::Unwind);
        }
        let func = {
            let table = self.callbacks.lock().unwrap();
            match table.slots.get(slot as usize) {
                None => None,
                Some(None) => None,
                Some(Some(reg)) if reg.params.len() != raw_args.len() => {
                    let n = reg.params.len();
                    drop(table);
                    return self.violation(slot, format!("expected {n} arguments, guest passed {}", raw_args.len()));
                }
                Some(Some(reg)) => Some(reg.func.clone()),
            }
        };
        let Some(func) = func else {
            let reason = if (slot as usize) < CALLBACK_SLOTS {
                "slot is not active"
            } else {
                "slot out of range"
            };
            return self.violation(slot, reason.to_string());
        };
        let Some(inner) = self.me.upgrade() else {
            return Err(DispatchError::Unwind);
        };
        let sb = Sandbox { inner };
        match func(&sb, raw_args) {
            Ok(v) if !self.unwinding() => Ok(v),
            Ok(_) => Err(DispatchError::Unwind),
            Err(e) => {
                self.set_pending(Unwind::Error(e));
                Err(DispatchError::Unwind)
            }
        }
    }

    fn request_exit(&self, code: i32) {
        if self.flight.lock().unwrap().owner.is_none() {
            self.record_violation(format!("exit({code}) with no invocation in flight"));
            return;
        }
        self.set_pending(Unwind::Exit(code));
    }

    fn unwinding(&self) -> bool {
        self.pending.lock().unwrap().is_some()
    }

    fn record_violation(&self, detail: String) {
        log::warn!("{}: {detail}", self.id);
        self.violations.lock().unwrap().push(detail.clone());
        if self.flight.lock().unwrap().owner.is_some() {
            self.set_pending(Unwind::Error(Error::ProtocolViolation(detail)));
        }
    }
}

impl Drop for SandboxInner {
    fn drop(&mut self) {
        self.region.mark_dead();
        self.backend.shutdown();
    }
}
