//! The guest-side RLI decoder and its fault-injection variants.
//!
//! Written against [`GuestEnv`] only: every address is a 32-bit region
//! offset and every host interaction is a trampoline call. The variant is a
//! const parameter so each library instance is plain function pointers.

use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use crate::abi::{GuestEnv, GuestExport, GuestLibrary, GuestResult, GuestTrap};
use crate::taint::ValueKind;

use super::format::MAGIC;

// Public record (see `RliInfo`).
pub const INFO_WIDTH: u32 = 0;
pub const INFO_HEIGHT: u32 = 4;
pub const INFO_SCANLINE: u32 = 8;
pub const INFO_BYTES_IN_BUFFER: u32 = 12;
pub const INFO_NEXT_INPUT: u32 = 16;
pub const INFO_STATUS: u32 = 20;
pub const INFO_CLIENT: u32 = 24;
pub const INFO_SIZE: u32 = 28;
// Decoder-private state after the public record.
const P_FILL: u32 = 28;
const P_SKIP: u32 = 32;
const P_MUTATOR: u32 = 36;
const P_PROBE: u32 = 40;
const BLOCK_SIZE: u32 = 64;

pub const STATUS_SUSPENDED: u32 = 0;
pub const STATUS_HEADER_TABLES_ONLY: u32 = 1;
pub const STATUS_HEADER_OK: u32 = 2;
pub const STATUS_ROW_OK: u32 = 3;
pub const STATUS_DONE: u32 = 4;

/// Non-local exit codes of the error path.
pub const ERR_BAD_MAGIC: i32 = 10;
pub const ERR_TRUNCATED: i32 = 11;
pub const ERR_BAD_ROW: i32 = 12;
pub const ERR_NO_IMAGE: i32 = 13;

/// Value the double-fetch mutator plants in `output_scanline`.
pub const M5_ATTACK_SCANLINE: u32 = 0x7FFF_0000;
/// Offset M2 plants in `next_input_offset`.
pub const M2_WILD_OFFSET: u32 = 0xFFFF_FFF0;
/// Slot M3 forges.
pub const M3_FORGED_SLOT: u32 = 63;
const MUTATOR_MAX_ITERS: u32 = 2_000_000;

const CLEAN: u8 = 0;
const M1: u8 = 1;
const M2: u8 = 2;
const M3: u8 = 3;
const M4: u8 = 4;
const M5: u8 = 5;
const M6: u8 = 6;
const M7: u8 = 7;

// M7 remembers the last client tag it saw, across invocations and, in a
// shared process, across sandboxes.
static LAST_CLIENT: AtomicU32 = AtomicU32::new(0);

fn arg(args: &[u64], i: usize) -> GuestResult<u32> {
    args.get(i)
        .map(|&v| v as u32)
        .ok_or_else(|| GuestTrap::Fault(format!("missing argument {i}")))
}

fn get_byte<const V: u8>(env: &mut dyn GuestEnv, info: u32) -> GuestResult<u8> {
    loop {
        let n = env.mem().load_u32(info + INFO_BYTES_IN_BUFFER)?;
        if n > 0 {
            let p = env.mem().load_u32(info + INFO_NEXT_INPUT)?;
            let b = env.mem().load_u8(p)?;
            env.mem().store_u32(info + INFO_NEXT_INPUT, p.wrapping_add(1))?;
            env.mem().store_u32(info + INFO_BYTES_IN_BUFFER, n - 1)?;
            return Ok(b);
        }
        let mut fill = env.mem().load_u32(info + P_FILL)?;
        if V == M2 {
            env.mem().store_u32(info + INFO_NEXT_INPUT, M2_WILD_OFFSET)?;
        }
        if V == M3 {
            fill = M3_FORGED_SLOT;
        }
        if env.callback(fill, &[info as u64])? == 0 {
            return Err(env.exit(ERR_TRUNCATED));
        }
    }
}

fn get_u32<const V: u8>(env: &mut dyn GuestEnv, info: u32) -> GuestResult<u32> {
    let mut b = [0u8; 4];
    for x in &mut b {
        *x = get_byte::<V>(env, info)?;
    }
    Ok(u32::from_le_bytes(b))
}

fn rli_create<const V: u8>(env: &mut dyn GuestEnv, _args: &[u64]) -> GuestResult<u64> {
    let info = env.malloc(BLOCK_SIZE, 8)?;
    if info == 0 {
        return Ok(0);
    }
    env.mem().write(info, &[0u8; BLOCK_SIZE as usize])?;
    env.mem().store_u32(info + INFO_STATUS, STATUS_SUSPENDED)?;
    if V == M4 {
        // Call into the host before it has set up any decode state.
        env.callback(0, &[info as u64])?;
    }
    Ok(info as u64)
}

fn rli_set_source<const V: u8>(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    let info = arg(args, 0)?;
    env.mem().store_u32(info + P_FILL, arg(args, 1)?)?;
    env.mem().store_u32(info + P_SKIP, arg(args, 2)?)?;
    Ok(0)
}

fn rli_read_header<const V: u8>(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    let info = arg(args, 0)?;
    let require_image = arg(args, 1)? != 0;
    if V == M7 {
        let mine = env.mem().load_u32(info + INFO_CLIENT)?;
        let prev = LAST_CLIENT.swap(mine, Ordering::SeqCst);
        if prev != 0 && prev != mine {
            env.mem().store_u32(info + INFO_CLIENT, prev)?;
        }
    }
    if V == M6 {
        // Plant guessed host addresses and hope the host dereferences or
        // echoes one back.
        let guesses = [0x0000_7f00_0000_0000u64, 0x0000_5555_5555_0000, 0x0000_7ffc_0000_0000];
        for (i, g) in guesses.iter().enumerate() {
            env.mem().store(info + P_PROBE + 8 * i as u32, 8, *g)?;
        }
        env.mem().store_u32(info + INFO_NEXT_INPUT, guesses[0] as u32 | 0x10)?;
    }
    let mut magic = [0u8; 4];
    for m in &mut magic {
        *m = get_byte::<V>(env, info)?;
    }
    if &magic != MAGIC {
        return Err(env.exit(ERR_BAD_MAGIC));
    }
    let width = get_u32::<V>(env, info)?;
    let height = get_u32::<V>(env, info)?;
    env.mem().store_u32(info + INFO_WIDTH, width)?;
    env.mem().store_u32(info + INFO_HEIGHT, height)?;
    env.mem().store_u32_atomic(info + INFO_SCANLINE, 0);
    let status = if height == 0 || width == 0 {
        if require_image {
            return Err(env.exit(ERR_NO_IMAGE));
        }
        STATUS_HEADER_TABLES_ONLY
    } else {
        STATUS_HEADER_OK
    };
    env.mem().store_u32(info + INFO_STATUS, status)?;
    Ok(status as u64)
}

fn rli_decode_row<const V: u8>(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    let info = arg(args, 0)?;
    let row = arg(args, 1)?;
    let width = env.mem().load_u32(info + INFO_WIDTH)?;
    let height = env.mem().load_u32(info + INFO_HEIGHT)?;
    let y = env.mem().load_u32_atomic(info + INFO_SCANLINE);
    if y >= height {
        env.mem().store_u32(info + INFO_STATUS, STATUS_DONE)?;
        return Ok(STATUS_DONE as u64);
    }
    let mut x: u32 = 0;
    loop {
        let n = get_byte::<V>(env, info)? as u32;
        if n == 0 {
            break;
        }
        let v = get_byte::<V>(env, info)?;
        if x + n > width {
            return Err(env.exit(ERR_BAD_ROW));
        }
        env.mem().write(row.wrapping_add(x), &[v; 255][..n as usize])?;
        x += n;
    }
    if x != width {
        return Err(env.exit(ERR_BAD_ROW));
    }
    let next = if V == M1 { height + 1000 } else { y + 1 };
    env.mem().store_u32_atomic(info + INFO_SCANLINE, next);
    if V == M5 && env.mem().load_u32(info + P_MUTATOR)? == 0 {
        env.mem().store_u32_atomic(info + P_MUTATOR, 1);
        spawn_mutator(env, info);
    }
    env.mem().store_u32(info + INFO_STATUS, STATUS_ROW_OK)?;
    Ok(STATUS_ROW_OK as u64)
}

/// A guest-internal thread that keeps flipping `output_scanline` to an
/// attacker value and back, racing every host read.
fn spawn_mutator(env: &mut dyn GuestEnv, info: u32) {
    let mem = env.mem().clone();
    std::thread::spawn(move || {
        for i in 0..MUTATOR_MAX_ITERS {
            if mem.load_u32_atomic(info + P_MUTATOR) != 1 {
                break;
            }
            let legit = mem.load_u32_atomic(info + INFO_SCANLINE);
            mem.store_u32_atomic(info + INFO_SCANLINE, M5_ATTACK_SCANLINE);
            // Give up the CPU with the attacker value in place, so even a
            // single core sees the host run against it.
            if i % 16 == 0 {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
            mem.store_u32_atomic(info + INFO_SCANLINE, legit);
        }
    });
}

fn rli_finish<const V: u8>(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    let info = arg(args, 0)?;
    env.mem().store_u32(info + INFO_BYTES_IN_BUFFER, 0)?;
    let skip = env.mem().load_u32(info + P_SKIP)?;
    env.callback(skip, &[info as u64, u32::MAX as u64])?;
    env.mem().store_u32(info + INFO_STATUS, STATUS_DONE)?;
    Ok(STATUS_DONE as u64)
}

fn rli_destroy<const V: u8>(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    let info = arg(args, 0)?;
    if info == 0 {
        return Ok(0);
    }
    // Stops the M5 mutator, if any.
    env.mem().store_u32_atomic(info + P_MUTATOR, 2);
    env.free(info)?;
    Ok(0)
}

fn noop(_env: &mut dyn GuestEnv, _args: &[u64]) -> GuestResult<u64> {
    Ok(0)
}

fn sleep_ms(_env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    std::thread::sleep(Duration::from_millis(arg(args, 0)? as u64));
    Ok(0)
}

fn test_call_slot(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    let slot = arg(args, 0)?;
    env.callback(slot, &args[1..])
}

fn test_exit(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    Err(env.exit(arg(args, 0)? as i32))
}

fn test_store_u32(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    env.mem().store_u32(arg(args, 0)?, arg(args, 1)?)?;
    Ok(0)
}

fn test_load_u32(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    env.mem().load_u32(arg(args, 0)?).map(u64::from)
}

fn test_store_u64(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    env.mem().store(arg(args, 0)?, 8, args.get(1).copied().unwrap_or(0))?;
    Ok(0)
}

fn test_add_long(_env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    let a = arg(args, 0)? as i32;
    let b = arg(args, 1)? as i32;
    Ok(a.wrapping_add(b) as u32 as u64)
}

fn test_echo_u64(_env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    Ok(args.first().copied().unwrap_or(0))
}

fn test_malloc(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    env.malloc(arg(args, 0)?, 8).map(u64::from)
}

fn test_sum_bytes(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    let (p, n) = (arg(args, 0)?, arg(args, 1)?);
    let mut buf = vec![0u8; n as usize];
    env.mem().read(p, &mut buf)?;
    Ok(buf.iter().map(|&b| b as u64).sum())
}

fn rli_internal_reset(env: &mut dyn GuestEnv, args: &[u64]) -> GuestResult<u64> {
    let info = arg(args, 0)?;
    env.mem().store_u32(info + INFO_SCANLINE, 0)?;
    Ok(0)
}

macro_rules! export {
    ($name:literal, [$($p:ident),*], $ret:ident, $f:expr) => {
        export!($name, [$($p),*], $ret, $f, true)
    };
    ($name:literal, [$($p:ident),*], $ret:ident, $f:expr, $exported:expr) => {
        GuestExport {
            name: $name,
            params: &[$(ValueKind::$p),*],
            ret: ValueKind::$ret,
            func: $f,
            exported: $exported,
        }
    };
}

fn build<const V: u8>() -> GuestLibrary {
    GuestLibrary {
        name: "librli",
        exports: vec![
            export!("rli_create", [], Ptr, rli_create::<V>),
            export!("rli_set_source", [Ptr, Callback, Callback], I32, rli_set_source::<V>),
            export!("rli_read_header", [Ptr, I32], U32, rli_read_header::<V>),
            export!("rli_decode_row", [Ptr, Ptr], U32, rli_decode_row::<V>),
            export!("rli_finish", [Ptr], U32, rli_finish::<V>),
            export!("rli_destroy", [Ptr], Void, rli_destroy::<V>),
            export!("noop", [], I32, noop),
            export!("sleep_ms", [U32], I32, sleep_ms),
            export!("test_call_slot", [U32, U32], U32, test_call_slot),
            export!("test_call_slot2", [U32, U32, U32], U32, test_call_slot),
            export!("test_exit", [I32], I32, test_exit),
            export!("test_store_u32", [U32, U32], I32, test_store_u32),
            export!("test_load_u32", [U32], U32, test_load_u32),
            export!("test_store_u64", [U32, U64], I32, test_store_u64),
            export!("test_add_long", [Long, Long], Long, test_add_long),
            export!("test_echo_u64", [U64], U64, test_echo_u64),
            export!("test_malloc", [U32], Ptr, test_malloc),
            export!("test_sum_bytes", [Ptr, U32], U64, test_sum_bytes),
            export!("rli_internal_reset", [Ptr], I32, rli_internal_reset, false),
        ],
    }
}

pub(crate) fn build_variant(variant: u8) -> GuestLibrary {
    match variant {
        CLEAN => build::<CLEAN>(),
        M1 => build::<M1>(),
        M2 => build::<M2>(),
        M3 => build::<M3>(),
        M4 => build::<M4>(),
        M5 => build::<M5>(),
        M6 => build::<M6>(),
        M7 => build::<M7>(),
        _ => unreachable!("unknown guest variant {variant}"),
    }
}
