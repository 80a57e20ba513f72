//! Turn-based handoff over the shared channel.
//!
//! Exactly one side owns the turn word at a time. The owner writes a
//! message, bumps `seq`, and flips the turn. The waiting side either
//! busy-waits on the turn word (SPIN, bounded, then falls back) or blocks
//! on it with a futex (EVENT).

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::OnceLock;
use std::time::Duration;

use super::wire::*;
use crate::backend::SyncMode;
use crate::memory::RegionHandle;

/// Which end of the channel this is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Host,
    Guest,
}

impl Side {
    fn turn(self) -> u32 {
        match self {
            Side::Host => TURN_HOST,
            Side::Guest => TURN_GUEST,
        }
    }

    fn peer(self) -> Side {
        match self {
            Side::Host => Side::Guest,
            Side::Guest => Side::Host,
        }
    }

    fn sleeping_word(self) -> u32 {
        match self {
            Side::Host => HDR_HOST_SLEEPING,
            Side::Guest => HDR_GUEST_SLEEPING,
        }
    }
}

/// A message as received, with the sequence-number audit result.
#[derive(Debug, Clone, Copy)]
pub struct Received {
    pub msg: RpcMessage,
    pub seq: u64,
    /// False if `seq` did not advance by exactly one since the last message
    /// this side saw or sent.
    pub seq_ok: bool,
}

/// How long one blocking wait lasts before liveness is rechecked.
const WAIT_SLICE: Duration = Duration::from_millis(20);
/// Spin iterations between liveness checks.
const SPIN_CHECK_EVERY: u64 = 1 << 14;

fn single_core() -> bool {
    static ONE: OnceLock<bool> = OnceLock::new();
    *ONE.get_or_init(|| std::thread::available_parallelism().map(|n| n.get() == 1).unwrap_or(false))
}

#[inline]
fn relax() {
    if single_core() {
        // Busy-waiting cannot make progress without the peer running.
        std::thread::yield_now();
    } else {
        std::hint::spin_loop();
    }
}

pub struct Channel {
    region: RegionHandle,
    side: Side,
    last_seq: u64,
    spin_limit: u64,
}

impl Channel {
    pub fn new(region: RegionHandle, side: Side, spin_limit: u64) -> Self {
        Channel {
            region,
            side,
            last_seq: 0,
            spin_limit,
        }
    }

    fn word(&self, field: u32) -> &AtomicU32 {
        let addr = self.region.base() + (CHANNEL_OFFSET + field) as usize;
        // SAFETY: the header lies inside the mapped, aligned region, which
        // outlives `self`.
        unsafe { AtomicU32::from_ptr(addr as *mut u32) }
    }

    fn seq_word(&self) -> &std::sync::atomic::AtomicU64 {
        let addr = self.region.base() + (CHANNEL_OFFSET + HDR_SEQ) as usize;
        // SAFETY: as in `word`; the field is 8-byte aligned.
        unsafe { std::sync::atomic::AtomicU64::from_ptr(addr as *mut u64) }
    }

    /// Host: writes a fresh header.
    pub fn init(&mut self, mode: SyncMode) {
        self.word(HDR_MAGIC).store(u32::from_le_bytes(MAGIC), Ordering::SeqCst);
        self.word(HDR_VERSION).store(VERSION, Ordering::SeqCst);
        self.word(HDR_SYNC_MODE).store(mode as u32, Ordering::SeqCst);
        self.word(HDR_TURN).store(TURN_HOST, Ordering::SeqCst);
        self.seq_word().store(0, Ordering::SeqCst);
        self.word(HDR_HOST_SLEEPING).store(0, Ordering::SeqCst);
        self.word(HDR_GUEST_SLEEPING).store(0, Ordering::SeqCst);
        self.word(HDR_READY).store(0, Ordering::SeqCst);
        self.last_seq = 0;
    }

    pub fn header_valid(&self) -> bool {
        self.word(HDR_MAGIC).load(Ordering::SeqCst) == u32::from_le_bytes(MAGIC)
            && self.word(HDR_VERSION).load(Ordering::SeqCst) == VERSION
    }

    pub fn mark_ready(&self) {
        self.word(HDR_READY).store(1, Ordering::SeqCst);
        futex_wake(self.word(HDR_READY));
    }

    /// Host: blocks until the worker marks the channel ready.
    pub fn wait_ready(&self, mut check: impl FnMut() -> Result<(), String>) -> Result<(), String> {
        let w = self.word(HDR_READY);
        while w.load(Ordering::SeqCst) == 0 {
            check()?;
            futex_wait(w, 0, Duration::from_millis(5));
        }
        Ok(())
    }

    pub fn sync_mode(&self) -> SyncMode {
        match self.word(HDR_SYNC_MODE).load(Ordering::SeqCst) {
            0 => SyncMode::Spin,
            _ => SyncMode::Event,
        }
    }

    pub fn set_sync_mode(&self, mode: SyncMode) {
        self.word(HDR_SYNC_MODE).store(mode as u32, Ordering::SeqCst);
    }

    pub fn set_spin_limit(&mut self, limit: u64) {
        self.spin_limit = limit;
    }

    pub fn turn(&self) -> u32 {
        self.word(HDR_TURN).load(Ordering::SeqCst)
    }

    pub fn seq(&self) -> u64 {
        self.seq_word().load(Ordering::SeqCst)
    }

    /// Writes `msg` and hands the turn to the peer.
    pub fn send(&mut self, msg: &RpcMessage) {
        let bytes = msg.encode();
        // The message area is guest-writable, so plain byte copies suffice:
        // the receiver snapshots it before interpreting anything.
        self.region.masked_write(MSG_OFFSET as u64, &bytes);
        let seq = self.last_seq.wrapping_add(1);
        self.seq_word().store(seq, Ordering::SeqCst);
        self.last_seq = seq;
        let turn = self.word(HDR_TURN);
        turn.store(self.side.peer().turn(), Ordering::SeqCst);
        if self.word(self.side.peer().sleeping_word()).load(Ordering::SeqCst) != 0 {
            futex_wake(turn);
        }
    }

    /// Waits for the turn, then snapshots the message. `check` runs
    /// periodically and aborts the wait by returning `Err`.
    pub fn recv<E>(&mut self, mut check: impl FnMut() -> Result<(), E>) -> Result<Received, E> {
        self.wait_turn(&mut check)?;
        let mut bytes = [0u8; MSG_SIZE];
        self.region.masked_read(MSG_OFFSET as u64, &mut bytes);
        let seq = self.seq();
        let seq_ok = seq == self.last_seq.wrapping_add(1);
        self.last_seq = seq;
        Ok(Received {
            msg: RpcMessage::decode(&bytes),
            seq,
            seq_ok,
        })
    }

    fn wait_turn<E>(&self, check: &mut impl FnMut() -> Result<(), E>) -> Result<(), E> {
        let me = self.side.turn();
        let turn = self.word(HDR_TURN);
        if turn.load(Ordering::SeqCst) == me {
            return Ok(());
        }
        if self.sync_mode() == SyncMode::Spin {
            let mut i = 0u64;
            while i < self.spin_limit {
                if turn.load(Ordering::Acquire) == me {
                    return Ok(());
                }
                relax();
                i += 1;
                if i.is_multiple_of(SPIN_CHECK_EVERY) {
                    check()?;
                }
            }
            // Spin budget exhausted: fall back to blocking.
        }
        let sleeping = self.word(self.side.sleeping_word());
        loop {
            sleeping.store(1, Ordering::SeqCst);
            let t = turn.load(Ordering::SeqCst);
            if t == me {
                sleeping.store(0, Ordering::SeqCst);
                return Ok(());
            }
            futex_wait(turn, t, WAIT_SLICE);
            sleeping.store(0, Ordering::SeqCst);
            if turn.load(Ordering::SeqCst) == me {
                return Ok(());
            }
            check()?;
        }
    }
}

fn futex_wait(word: &AtomicU32, expected: u32, timeout: Duration) {
    let ts = libc::timespec {
        tv_sec: timeout.as_secs() as libc::time_t,
        tv_nsec: timeout.subsec_nanos() as libc::c_long,
    };
    // SAFETY: `word` is a valid, aligned u32 in shared memory; the kernel
    // only reads it. Shared (non-private) futex since the peer is another
    // process.
    unsafe {
        libc::syscall(
            libc::SYS_futex,
            word.as_ptr(),
            libc::FUTEX_WAIT,
            expected,
            &ts as *const libc::timespec,
            std::ptr::null::<u32>(),
            0,
        );
    }
}

fn futex_wake(word: &AtomicU32) {
    // SAFETY: as above.
    unsafe {
        libc::syscall(
            libc::SYS_futex,
            word.as_ptr(),
            libc::FUTEX_WAKE,
            i32::MAX,
            std::ptr::null::<libc::timespec>(),
            std::ptr::null::<u32>(),
            0,
        );
    }
}
