//! Bit-exact layout of the shared-memory channel.
//!
//! All multi-byte fields are little-endian. The channel lives in the
//! reserved prefix of the region, so both sides address it by offset.

use crate::memory::RESERVED_PREFIX;

pub const MAGIC: [u8; 4] = *b"SCG1";
pub const VERSION: u32 = 1;

/// Offset of the channel header inside the region. Page 0 stays unused so
/// a guest write through a null pointer cannot land on it.
pub const CHANNEL_OFFSET: u32 = 0x1000;

pub const HDR_MAGIC: u32 = 0;
pub const HDR_VERSION: u32 = 4;
pub const HDR_SYNC_MODE: u32 = 8;
pub const HDR_TURN: u32 = 12;
pub const HDR_SEQ: u32 = 16;
/// Set by a side before it blocks on the turn word, so the other side
/// knows a wake is needed.
pub const HDR_HOST_SLEEPING: u32 = 24;
pub const HDR_GUEST_SLEEPING: u32 = 28;
/// Written by the worker once it has mapped the region.
pub const HDR_READY: u32 = 32;
pub const HEADER_SIZE: u32 = 64;

pub const MSG_OFFSET: u32 = CHANNEL_OFFSET + HEADER_SIZE;
pub const MAX_ARGS: usize = 16;
pub const MSG_SIZE: usize = 12 + MAX_ARGS * 12 + 4;

const _: () = assert!(MSG_OFFSET as usize + MSG_SIZE <= RESERVED_PREFIX as usize);

pub const TURN_HOST: u32 = 0;
pub const TURN_GUEST: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Opcode {
    Invoke = 1,
    Return = 2,
    Callback = 3,
    CbReturn = 4,
    Malloc = 5,
    MFree = 6,
    Shutdown = 7,
    Abort = 8,
}

impl Opcode {
    pub fn from_u32(v: u32) -> Option<Opcode> {
        Some(match v {
            1 => Opcode::Invoke,
            2 => Opcode::Return,
            3 => Opcode::Callback,
            4 => Opcode::CbReturn,
            5 => Opcode::Malloc,
            6 => Opcode::MFree,
            7 => Opcode::Shutdown,
            8 => Opcode::Abort,
            _ => return None,
        })
    }
}

/// `status` values.
pub const STATUS_OK: u32 = 0;
/// RETURN: the guest unwound at the host's request.
pub const STATUS_UNWOUND: u32 = 1;
/// RETURN: the guest requested a non-local exit; `args[0]` holds the code.
pub const STATUS_EXIT: u32 = 2;
/// RETURN: the guest faulted.
pub const STATUS_FAULT: u32 = 3;
/// CBRETURN: the callback failed, unwind.
pub const STATUS_UNWIND: u32 = 4;
/// RETURN to MALLOC/MFREE: the request failed.
pub const STATUS_FAILED: u32 = 5;

/// One channel message. `args` beyond `argc` are zero on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RpcMessage {
    pub opcode: u32,
    pub fn_or_slot: u32,
    pub argc: u32,
    pub args: [(u32, u64); MAX_ARGS],
    pub status: u32,
}

impl Default for RpcMessage {
    fn default() -> Self {
        RpcMessage {
            opcode: 0,
            fn_or_slot: 0,
            argc: 0,
            args: [(0, 0); MAX_ARGS],
            status: 0,
        }
    }
}

impl RpcMessage {
    pub fn new(op: Opcode, fn_or_slot: u32) -> Self {
        RpcMessage {
            opcode: op as u32,
            fn_or_slot,
            ..Default::default()
        }
    }

    /// Appends arguments; at most [`MAX_ARGS`].
    pub fn with_args(mut self, args: impl IntoIterator<Item = (u32, u64)>) -> Self {
        for a in args {
            assert!((self.argc as usize) < MAX_ARGS, "too many message arguments");
            self.args[self.argc as usize] = a;
            self.argc += 1;
        }
        self
    }

    pub fn with_status(mut self, status: u32) -> Self {
        self.status = status;
        self
    }

    pub fn op(&self) -> Option<Opcode> {
        Opcode::from_u32(self.opcode)
    }

    /// Argument values, or `None` if `argc` is out of range.
    pub fn values(&self) -> Option<Vec<u64>> {
        let n = self.argc as usize;
        (n <= MAX_ARGS).then(|| self.args[..n].iter().map(|a| a.1).collect())
    }

    pub fn first_value(&self) -> u64 {
        self.args[0].1
    }

    pub fn encode(&self) -> [u8; MSG_SIZE] {
        let mut b = [0u8; MSG_SIZE];
        b[0..4].copy_from_slice(&self.opcode.to_le_bytes());
        b[4..8].copy_from_slice(&self.fn_or_slot.to_le_bytes());
        b[8..12].copy_from_slice(&self.argc.to_le_bytes());
        let live = (self.argc as usize).min(MAX_ARGS);
        for (i, (k, v)) in self.args.iter().enumerate().take(live) {
            let at = 12 + i * 12;
            b[at..at + 4].copy_from_slice(&k.to_le_bytes());
            b[at + 4..at + 12].copy_from_slice(&v.to_le_bytes());
        }
        b[MSG_SIZE - 4..].copy_from_slice(&self.status.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; MSG_SIZE]) -> Self {
        let u32_at = |at: usize| u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
        let mut m = RpcMessage {
            opcode: u32_at(0),
            fn_or_slot: u32_at(4),
            argc: u32_at(8),
            status: u32_at(MSG_SIZE - 4),
            ..Default::default()
        };
        for i in 0..MAX_ARGS {
            let at = 12 + i * 12;
            m.args[i] = (u32_at(at), u64::from_le_bytes(b[at + 4..at + 12].try_into().unwrap()));
        }
        m
    }
}
