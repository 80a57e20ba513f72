//! The worker side of the process backend.
//!
//! Runs the guest library against its own mapping of the shared region and
//! answers host messages. It trusts nothing the host did not also validate:
//! any protocol breach ends the process with exit code 2.

use std::ffi::CString;
use std::sync::Arc;

use super::channel::{Channel, Side};
use super::wire::*;
use crate::abi::{GuestEnv, GuestLibrary, GuestMemory, GuestResult, GuestTrap};
use crate::guest::GuestVariant;
use crate::memory::{Mapping, Region, RESERVED_PREFIX};
use crate::runtime::heap::HeapAllocator;
use crate::taint::{SandboxId, ValueKind};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_PROTOCOL: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug, Clone)]
pub struct WorkerArgs {
    pub shm: String,
    pub size: usize,
    pub guest: GuestVariant,
    pub spin_limit: u64,
}

/// How the dispatcher loop ended.
enum Stop {
    Exit(i32),
}

struct Worker {
    channel: Channel,
    library: Arc<GuestLibrary>,
    memory: GuestMemory,
    heap: HeapAllocator,
    exit_code: Option<i32>,
}

fn restrict_self() {
    // SAFETY: prctl with constant arguments.
    unsafe {
        libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
        libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0);
    }
}

fn parent_alive() -> Result<(), Stop> {
    // Reparented means the host is gone.
    // SAFETY: getppid has no preconditions.
    if unsafe { libc::getppid() } == 1 {
        Err(Stop::Exit(EXIT_ABORT))
    } else {
        Ok(())
    }
}

/// Worker entry point; returns the process exit code.
pub fn run(args: &WorkerArgs) -> i32 {
    restrict_self();
    if parent_alive().is_err() {
        return EXIT_ABORT;
    }
    let Ok(name) = CString::new(args.shm.clone()) else {
        return EXIT_PROTOCOL;
    };
    // SAFETY: valid NUL-terminated name.
    let fd = unsafe { libc::shm_open(name.as_ptr(), libc::O_RDWR, 0) };
    if fd < 0 {
        eprintln!("worker: shm_open {}: {}", args.shm, std::io::Error::last_os_error());
        return EXIT_PROTOCOL;
    }
    let mapping = Mapping::shared(fd, args.size);
    // SAFETY: fd is ours.
    unsafe { libc::close(fd) };
    let mapping = match mapping {
        Ok(m) => m,
        Err(e) => {
            eprintln!("worker: mmap: {e}");
            return EXIT_PROTOCOL;
        }
    };
    let region = Region::new(SandboxId::HOST, mapping);
    let channel = Channel::new(region.clone(), Side::Guest, args.spin_limit);
    if !channel.header_valid() {
        eprintln!("worker: bad channel header");
        return EXIT_PROTOCOL;
    }
    channel.mark_ready();
    let mut w = Worker {
        channel,
        library: crate::guest::library(args.guest),
        memory: GuestMemory::masked(region.clone()),
        heap: HeapAllocator::new(RESERVED_PREFIX as u64, region.size() as u64),
        exit_code: None,
    };
    match w.serve(false) {
        Ok(_) => EXIT_PROTOCOL,
        Err(Stop::Exit(code)) => code,
    }
}

impl Worker {
    fn reply(&mut self, msg: RpcMessage) {
        self.channel.send(&msg);
    }

    /// Dispatcher loop. At top level it runs until SHUTDOWN/ABORT; inside a
    /// callback it returns the CBRETURN (or ABORT) that ends the wait.
    fn serve(&mut self, in_callback: bool) -> Result<RpcMessage, Stop> {
        loop {
            let r = self.channel.recv(parent_alive)?;
            if !r.seq_ok {
                eprintln!("worker: channel sequence jumped to {}", r.seq);
                return Err(Stop::Exit(EXIT_PROTOCOL));
            }
            match r.msg.op() {
                Some(Opcode::Invoke) => self.run_invoke(&r.msg)?,
                Some(Opcode::Malloc) => {
                    let size = r.msg.args[0].1;
                    let align = r.msg.args[1].1;
                    let reply = match self.heap.alloc(size, align.max(1)) {
                        Some(off) => RpcMessage::new(Opcode::Return, 0).with_args([(ValueKind::Ptr as u32, off)]),
                        None => RpcMessage::new(Opcode::Return, 0).with_status(STATUS_FAILED),
                    };
                    self.reply(reply);
                }
                Some(Opcode::MFree) => {
                    let status = if self.heap.free(r.msg.args[0].1) {
                        STATUS_OK
                    } else {
                        STATUS_FAILED
                    };
                    self.reply(RpcMessage::new(Opcode::Return, 0).with_status(status));
                }
                Some(Opcode::Shutdown) => return Err(Stop::Exit(EXIT_CLEAN)),
                Some(Opcode::CbReturn) if in_callback => return Ok(r.msg),
                Some(Opcode::Abort) if in_callback => return Ok(r.msg),
                Some(Opcode::Abort) => return Err(Stop::Exit(EXIT_ABORT)),
                _ => {
                    eprintln!("worker: unexpected opcode {} from host", r.msg.opcode);
                    return Err(Stop::Exit(EXIT_PROTOCOL));
                }
            }
        }
    }

    fn run_invoke(&mut self, msg: &RpcMessage) -> Result<(), Stop> {
        let Some(func) = self.library.get(msg.fn_or_slot).map(|e| e.func) else {
            self.reply(RpcMessage::new(Opcode::Return, msg.fn_or_slot).with_status(STATUS_FAULT));
            return Ok(());
        };
        let Some(args) = msg.values() else {
            return Err(Stop::Exit(EXIT_PROTOCOL));
        };
        let saved = self.exit_code.take();
        let result = func(self, &args);
        let exit = std::mem::replace(&mut self.exit_code, saved);
        let reply = match result {
            Ok(v) => RpcMessage::new(Opcode::Return, msg.fn_or_slot).with_args([(ValueKind::U64 as u32, v)]),
            Err(GuestTrap::Unwind) => match exit {
                Some(code) => RpcMessage::new(Opcode::Return, msg.fn_or_slot)
                    .with_args([(ValueKind::I32 as u32, code as u32 as u64)])
                    .with_status(STATUS_EXIT),
                None => RpcMessage::new(Opcode::Return, msg.fn_or_slot).with_status(STATUS_UNWOUND),
            },
            Err(GuestTrap::Fault(m)) => {
                eprintln!("worker: guest fault: {m}");
                RpcMessage::new(Opcode::Return, msg.fn_or_slot).with_status(STATUS_FAULT)
            }
        };
        self.reply(reply);
        Ok(())
    }
}

impl GuestEnv for Worker {
    fn mem(&self) -> &GuestMemory {
        &self.memory
    }

    fn malloc(&mut self, size: u32, align: u32) -> GuestResult<u32> {
        Ok(self.heap.alloc(size as u64, align.max(1) as u64).unwrap_or(0) as u32)
    }

    fn free(&mut self, offset: u32) -> GuestResult<()> {
        if self.heap.free(offset as u64) {
            Ok(())
        } else {
            Err(GuestTrap::Fault(format!("invalid free of {offset:#x}")))
        }
    }

    fn callback(&mut self, slot: u32, args: &[u64]) -> GuestResult<u64> {
        if args.len() > MAX_ARGS {
            return Err(GuestTrap::Fault("too many callback arguments".into()));
        }
        let msg = RpcMessage::new(Opcode::Callback, slot).with_args(args.iter().map(|&v| (ValueKind::U64 as u32, v)));
        self.reply(msg);
        match self.serve(true) {
            Ok(r) if r.op() == Some(Opcode::CbReturn) && r.status == STATUS_OK => Ok(r.first_value()),
            Ok(_) => Err(GuestTrap::Unwind),
            Err(Stop::Exit(code)) => std::process::exit(code),
        }
    }

    fn exit(&mut self, code: i32) -> GuestTrap {
        self.exit_code = Some(code);
        GuestTrap::Unwind
    }
}
