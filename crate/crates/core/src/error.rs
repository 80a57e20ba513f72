use thiserror::Error;

use crate::taint::{SandboxId, ValueKind};

/// Failures raised by the tainted-data layer.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaintError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("bounds violation: offset {offset:#x} + {len} bytes outside region of {size:#x} bytes")]
    Bounds { offset: u64, len: u64, size: u64 },
    #[error("string not terminated within {0} bytes")]
    UnterminatedString(usize),
    #[error("freezable value read while unfrozen")]
    ReadWhileUnfrozen,
    #[error("value is already frozen")]
    AlreadyFrozen,
    #[error("tamper violation: guest modified a frozen value")]
    Tamper,
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("record `{record}` has no field `{field}`")]
    UnknownField { record: String, field: String },
    #[error("field `{field}` has kind {actual}, accessed as {requested}")]
    KindMismatch {
        field: String,
        actual: ValueKind,
        requested: ValueKind,
    },
    #[error("field `{0}` is freezable and must be accessed through freeze")]
    FreezableField(String),
    #[error("field `{0}` is not freezable")]
    NotFreezable(String),
    #[error("invalid record layout: {0}")]
    Layout(String),
    #[error("null guest pointer")]
    NullPointer,
    #[error("guest address {offset:#x} is not aligned to {align}")]
    Misaligned { offset: u64, align: usize },
    #[error("sandbox {0} is no longer alive")]
    SandboxDead(SandboxId),
    #[error("reference belongs to sandbox {actual}, expected {expected}")]
    OriginMismatch {
        expected: SandboxId,
        actual: SandboxId,
    },
}

/// Errors surfaced by the sandbox runtime, its backends and the pool.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error(transparent)]
    Taint(#[from] TaintError),
    #[error("sandbox creation failed: {0}")]
    Creation(String),
    #[error("guest heap exhausted allocating {0} bytes")]
    Alloc(u64),
    #[error("invalid free of guest offset {0:#x}")]
    InvalidFree(u32),
    #[error("argument {index}: value {value} does not fit guest {kind}")]
    WidthOverflow {
        index: usize,
        value: i128,
        kind: ValueKind,
    },
    #[error("argument mismatch: {0}")]
    ArgMismatch(String),
    #[error("sandbox {0} is dead")]
    SandboxDead(SandboxId),
    #[error("guest aborted with code {0}")]
    GuestAbort(i32),
    #[error("guest fault: {0}")]
    GuestFault(String),
    #[error("callback violation on slot {slot}: {reason}")]
    CallbackViolation { slot: u32, reason: String },
    #[error("all callback slots are in use")]
    SlotsExhausted,
    #[error("symbol resolution failed: {0}")]
    Resolution(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("sandbox busy: another host thread is invoking it")]
    Busy,
    #[error("re-entrant invocation depth {0} exceeds limit")]
    ReentrancyLimit(u32),
    #[error("invocation context key {0} out of range")]
    InvalidContextKey(u8),
    #[error("context violation: {0}")]
    ContextViolation(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// Short stable label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            Error::Taint(t) => match t {
                TaintError::Validation(_) => "validation-error",
                TaintError::Bounds { .. } => "bounds-violation",
                TaintError::Tamper => "tamper-violation",
                TaintError::UnterminatedString(_) => "unterminated-string",
                TaintError::ReadWhileUnfrozen => "read-while-unfrozen",
                TaintError::NullPointer => "null-pointer",
                TaintError::SandboxDead(_) => "sandbox-dead",
                _ => "taint-error",
            },
            Error::Creation(_) => "creation-error",
            Error::Alloc(_) => "alloc-error",
            Error::InvalidFree(_) => "invalid-free",
            Error::WidthOverflow { .. } => "width-overflow",
            Error::ArgMismatch(_) => "arg-mismatch",
            Error::SandboxDead(_) => "sandbox-dead",
            Error::GuestAbort(_) => "guest-abort",
            Error::GuestFault(_) => "guest-fault",
            Error::CallbackViolation { .. } => "callback-violation",
            Error::SlotsExhausted => "slots-exhausted",
            Error::Resolution(_) => "resolution-error",
            Error::ProtocolViolation(_) => "protocol-violation",
            Error::Transport(_) => "transport-error",
            Error::Busy => "busy",
            Error::ReentrancyLimit(_) => "reentrancy-limit",
            Error::InvalidContextKey(_) => "invalid-context-key",
            Error::ContextViolation(_) => "context-violation",
            Error::Unsupported(_) => "unsupported",
            Error::Config(_) => "config-error",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
