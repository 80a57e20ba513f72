//! Guest execution in a separate worker process.
//!
//! The region is a POSIX shared-memory object mapped by both processes at
//! unrelated bases; everything that crosses is a 32-bit offset. Control
//! moves over the channel in the region's reserved prefix.

mod channel;
pub mod wire;
pub mod worker;

use std::ffi::CString;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub use channel::{Channel, Received, Side};
use wire::*;

use super::{Backend, BackendKind, DispatchError, HostServices, InvokeOutcome, Symbol, SyncMode};
use crate::abi::GuestLibrary;
use crate::error::Error;
use crate::guest::GuestVariant;
use crate::memory::{Mapping, Region, RegionHandle};
use crate::taint::{SandboxId, ValueKind};

pub const DEFAULT_SPIN_LIMIT: u64 = 100_000_000;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone)]
pub struct ProcessOptions {
    /// Worker executable; defaults to `$SANDCAGE_WORKER`, then a `worker`
    /// binary next to the current executable.
    pub worker_path: Option<PathBuf>,
    pub sync: SyncMode,
    /// Relax iterations before a SPIN wait falls back to blocking.
    pub spin_limit: u64,
    /// How long the host waits for any single reply from the worker.
    pub timeout: Duration,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        ProcessOptions {
            worker_path: None,
            sync: SyncMode::Event,
            spin_limit: DEFAULT_SPIN_LIMIT,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// Locates the worker executable.
pub fn find_worker() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("SANDCAGE_WORKER") {
        return Some(PathBuf::from(p));
    }
    let exe = std::env::current_exe().ok()?;
    let mut dir = exe.parent();
    // Test binaries live in target/<profile>/deps, the worker one level up.
    for _ in 0..2 {
        let d = dir?;
        let cand = d.join("worker");
        if cand.is_file() {
            return Some(cand);
        }
        dir = d.parent();
    }
    None
}

struct SharedObject(CString);

impl SharedObject {
    fn create(name: String, size: usize) -> Result<(Self, i32), Error> {
        let cname = CString::new(name).map_err(|e| Error::Creation(e.to_string()))?;
        // SAFETY: valid NUL-terminated name.
        let fd = unsafe { libc::shm_open(cname.as_ptr(), libc::O_CREAT | libc::O_EXCL | libc::O_RDWR, 0o600) };
        if fd < 0 {
            return Err(Error::Creation(format!("shm_open: {}", std::io::Error::last_os_error())));
        }
        let obj = SharedObject(cname);
        // SAFETY: fd is ours.
        if unsafe { libc::ftruncate(fd, size as libc::off_t) } != 0 {
            let e = std::io::Error::last_os_error();
            unsafe { libc::close(fd) };
            return Err(Error::Creation(format!("ftruncate: {e}")));
        }
        Ok((obj, fd))
    }

    fn name(&self) -> &str {
        self.0.to_str().unwrap_or_default()
    }
}

impl Drop for SharedObject {
    fn drop(&mut self) {
        // SAFETY: valid name; unlinking only removes the directory entry,
        // existing mappings stay valid.
        unsafe { libc::shm_unlink(self.0.as_ptr()) };
    }
}

pub struct ProcessBackend {
    region: RegionHandle,
    library: Arc<GuestLibrary>,
    channel: Mutex<Channel>,
    child: Mutex<Child>,
    pid: u32,
    timeout: Duration,
    down: AtomicBool,
}

impl ProcessBackend {
    pub fn spawn(id: SandboxId, size: usize, guest: GuestVariant, opts: &ProcessOptions) -> Result<Self, Error> {
        let worker = opts
            .worker_path
            .clone()
            .or_else(find_worker)
            .ok_or_else(|| Error::Creation("worker executable not found (set SANDCAGE_WORKER)".into()))?;
        let name = format!("/sandcage-{}-{}-{:08x}", std::process::id(), id.0, rand::random::<u32>());
        let (shm, fd) = SharedObject::create(name, size)?;
        let mapping = Mapping::shared(fd, size);
        // SAFETY: fd is ours; the mapping keeps the object alive.
        unsafe { libc::close(fd) };
        let region = Region::new(id, mapping.map_err(|e| Error::Creation(format!("mmap: {e}")))?);
        let mut channel = Channel::new(region.clone(), Side::Host, opts.spin_limit);
        channel.init(opts.sync);

        let mut child = Command::new(&worker)
            .arg("--shm")
            .arg(shm.name())
            .arg("--size")
            .arg(size.to_string())
            .arg("--guest")
            .arg(guest.name())
            .arg("--spin-limit")
            .arg(opts.spin_limit.to_string())
            .stdin(Stdio::null())
            .spawn()
            .map_err(|e| Error::Creation(format!("spawning {}: {e}", worker.display())))?;
        let deadline = Instant::now() + opts.timeout.max(Duration::from_secs(2));
        let ready = channel.wait_ready(|| {
            if let Ok(Some(st)) = child.try_wait() {
                return Err(format!("worker exited during startup: {st}"));
            }
            if Instant::now() > deadline {
                return Err("worker startup timed out".into());
            }
            Ok(())
        });
        drop(shm);
        if let Err(e) = ready {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::Creation(e));
        }
        let pid = child.id();
        Ok(ProcessBackend {
            region,
            library: crate::guest::library(guest),
            channel: Mutex::new(channel),
            child: Mutex::new(child),
            pid,
            timeout: opts.timeout,
            down: AtomicBool::new(false),
        })
    }

    fn transport(&self, what: String) -> Error {
        self.down.store(true, Ordering::SeqCst);
        Error::Transport(what)
    }

    fn liveness(&self, deadline: Instant) -> Result<(), Error> {
        if let Ok(mut child) = self.child.try_lock() {
            match child.try_wait() {
                Ok(Some(st)) => return Err(self.transport(format!("worker exited: {st}"))),
                Ok(None) => {}
                Err(e) => return Err(self.transport(format!("waiting on worker: {e}"))),
            }
        }
        if Instant::now() > deadline {
            self.kill_worker();
            return Err(self.transport(format!("no reply from worker within {:?}", self.timeout)));
        }
        Ok(())
    }

    fn kill_worker(&self) {
        // SAFETY: plain signal to our own child.
        unsafe { libc::kill(self.pid as libc::pid_t, libc::SIGKILL) };
    }

    /// Sends `msg` and services the worker until it answers with RETURN.
    fn call(&self, host: &dyn HostServices, msg: RpcMessage) -> Result<RpcMessage, Error> {
        if self.down.load(Ordering::SeqCst) {
            return Err(Error::Transport("worker is gone".into()));
        }
        self.channel.lock().unwrap().send(&msg);
        loop {
            let deadline = Instant::now() + self.timeout;
            let r = self.channel.lock().unwrap().recv(|| self.liveness(deadline))?;
            if !r.seq_ok {
                host.record_violation(format!("channel sequence jumped to {}", r.seq));
            }
            let reply = match r.msg.op() {
                Some(Opcode::Return) => return Ok(r.msg),
                Some(Opcode::Callback) => match r.msg.values() {
                    Some(args) => match host.dispatch(r.msg.fn_or_slot, &args) {
                        Ok(v) => RpcMessage::new(Opcode::CbReturn, r.msg.fn_or_slot).with_args([(ValueKind::U64 as u32, v)]),
                        Err(DispatchError::Unwind) => {
                            RpcMessage::new(Opcode::CbReturn, r.msg.fn_or_slot).with_status(STATUS_UNWIND)
                        }
                        Err(DispatchError::Violation) => RpcMessage::new(Opcode::Abort, 0),
                    },
                    None => {
                        host.record_violation(format!("CALLBACK with argc {}", r.msg.argc));
                        RpcMessage::new(Opcode::Abort, 0)
                    }
                },
                _ => {
                    host.record_violation(format!("unexpected message opcode {} from worker", r.msg.opcode));
                    RpcMessage::new(Opcode::Abort, 0)
                }
            };
            self.channel.lock().unwrap().send(&reply);
        }
    }

    /// Raw channel access for protocol tests: sends one message as the host
    /// and returns the worker's next RETURN.
    pub fn raw_call(&self, host: &dyn HostServices, msg: RpcMessage) -> Result<RpcMessage, Error> {
        self.call(host, msg)
    }
}

impl Backend for ProcessBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Process
    }

    fn region(&self) -> &RegionHandle {
        &self.region
    }

    fn resolve(&self, name: &str) -> Result<Symbol, Error> {
        let (index, e) = self
            .library
            .find(name, true)
            .ok_or_else(|| Error::Resolution(format!("`{name}` is not exported by {}", self.library.name)))?;
        Ok(Symbol {
            index,
            params: e.params.to_vec(),
            ret: e.ret,
        })
    }

    fn invoke(&self, host: &dyn HostServices, index: u32, args: &[u64]) -> Result<InvokeOutcome, Error> {
        let export = self
            .library
            .get(index)
            .ok_or_else(|| Error::Resolution(format!("no guest function at index {index}")))?;
        if args.len() > MAX_ARGS {
            return Err(Error::ArgMismatch(format!("at most {MAX_ARGS} arguments cross the channel")));
        }
        let msg = RpcMessage::new(Opcode::Invoke, index)
            .with_args(export.params.iter().zip(args).map(|(k, &v)| (*k as u32, v)));
        let ret = self.call(host, msg)?;
        Ok(match ret.status {
            STATUS_OK => InvokeOutcome::Returned(ret.first_value()),
            STATUS_UNWOUND => InvokeOutcome::Unwound,
            STATUS_EXIT => {
                host.request_exit(ret.first_value() as u32 as i32);
                InvokeOutcome::Unwound
            }
            STATUS_FAULT => return Err(Error::GuestFault(format!("worker reported a fault in `{}`", export.name))),
            other => {
                host.record_violation(format!("RETURN with unknown status {other}"));
                InvokeOutcome::Unwound
            }
        })
    }

    fn malloc(&self, host: &dyn HostServices, size: u32, align: u32) -> Result<u32, Error> {
        let msg = RpcMessage::new(Opcode::Malloc, 0).with_args([
            (ValueKind::U32 as u32, size as u64),
            (ValueKind::U32 as u32, align as u64),
        ]);
        let ret = self.call(host, msg)?;
        match ret.status {
            STATUS_OK => Ok(ret.first_value() as u32),
            _ => Err(Error::Alloc(size as u64)),
        }
    }

    fn free(&self, host: &dyn HostServices, offset: u32) -> Result<(), Error> {
        let msg = RpcMessage::new(Opcode::MFree, 0).with_args([(ValueKind::Ptr as u32, offset as u64)]);
        let ret = self.call(host, msg)?;
        match ret.status {
            STATUS_OK => Ok(()),
            _ => Err(Error::InvalidFree(offset)),
        }
    }

    fn set_sync_mode(&self, mode: SyncMode) -> Result<(), Error> {
        // A header word, so this needs no channel ownership.
        Channel::new(self.region.clone(), Side::Host, 0).set_sync_mode(mode);
        Ok(())
    }

    fn pin(&self, core: usize) -> Result<(), Error> {
        if core >= libc::CPU_SETSIZE as usize {
            return Err(Error::Unsupported(format!("core {core} out of range")));
        }
        // SAFETY: cpu_set_t is plain data; sched_setaffinity reads it.
        let rc = unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(core, &mut set);
            libc::sched_setaffinity(self.pid as libc::pid_t, std::mem::size_of::<libc::cpu_set_t>(), &set)
        };
        if rc != 0 {
            return Err(Error::Unsupported(format!(
                "pinning worker to core {core}: {}",
                std::io::Error::last_os_error()
            )));
        }
        Ok(())
    }

    fn process_id(&self) -> Option<u32> {
        Some(self.pid)
    }

    fn heap_high_water(&self) -> u64 {
        // The allocator lives in the worker; report the mapped size.
        self.region.size() as u64
    }

    fn shutdown(&self) {
        if self.down.swap(true, Ordering::SeqCst) {
            self.reap();
            return;
        }
        // Ask politely if the channel is idle; otherwise the worker is
        // mid-call on another thread and gets killed.
        let polite = match self.channel.try_lock() {
            Ok(mut ch) if ch.turn() == TURN_HOST => {
                ch.send(&RpcMessage::new(Opcode::Shutdown, 0));
                true
            }
            _ => false,
        };
        if polite {
            let deadline = Instant::now() + Duration::from_millis(200);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = self.child.lock().unwrap().try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_micros(200));
            }
        }
        self.kill_worker();
        self.reap();
    }
}

impl ProcessBackend {
    fn reap(&self) {
        if let Ok(mut c) = self.child.lock() {
            if let Ok(None) = c.try_wait() {
                self.kill_worker();
                let _ = c.wait();
            }
        }
    }

    /// Exit status of the worker, once it has exited.
    pub fn exit_status(&self) -> Option<std::process::ExitStatus> {
        self.child.lock().unwrap().try_wait().ok().flatten()
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Path of the worker used by default, for diagnostics.
pub fn default_worker_path() -> Option<PathBuf> {
    find_worker().filter(|p| Path::new(p).is_file())
}
