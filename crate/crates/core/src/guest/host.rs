//! The migrated host-side consumer of the RLI decoder.
//!
//! Everything the guest hands back is tainted: the header fields go through
//! range checks, `output_scanline` is frozen before it is trusted, row bytes
//! are copied out before use, and the input callbacks cross-check the
//! guest's view of the input buffer against the host's own bookkeeping.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use super::codec::{STATUS_DONE, STATUS_HEADER_OK, STATUS_ROW_OK};
use super::{register_layouts, RliInfo};
use crate::error::{Error, TaintError};
use crate::pool::{SandboxKey, SandboxPool, SyncHint};
use crate::runtime::Sandbox;
use crate::taint::{reject, GuestPtr, ResolveIn, Tainted, TaintedGuestRef};

/// Context key under which each decode step finds its decoder state.
pub const CTX_DECODER: u8 = 0;
/// Bytes handed to the guest per `fill_input_buffer`.
pub const INPUT_CHUNK: u32 = 4096;
pub const MAX_DIMENSION: u32 = 1 << 14;
pub const MAX_PIXELS: u64 = 1 << 26;
const CANARY_LEN: usize = 32;
const CANARY: u8 = 0xA5;

/// How row pixels leave guest memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelPath {
    /// `copy_and_verify_array` per row.
    #[default]
    Verified,
    /// Raw copy through `unsafe_unverified_bytes` (audited).
    Unchecked,
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOptions {
    pub pixels: PixelPath,
    /// Tag written into `client_slot`; a fresh one is drawn if `None`.
    pub client: Option<u32>,
    /// Sleep this long between each check and the matching use. Race
    /// harnesses set it to hand a concurrent guest writer the window.
    pub race_pause: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

/// Result of one decode plus what the harnesses need to judge it.
#[derive(Debug)]
pub struct DecodeOutcome {
    pub result: Result<DecodedImage, Error>,
    /// Guard bytes around the host pixel buffer were untouched.
    pub canaries_intact: bool,
    /// (frozen copy, value the host consumed) for every row.
    pub scanlines: Vec<(u32, u32)>,
}

struct Cursor {
    pos: usize,
    filled: u32,
}

struct DecodeState {
    data: Vec<u8>,
    client: u32,
    buf: TaintedGuestRef<u8>,
    cursor: Mutex<Cursor>,
}

fn next_client() -> u32 {
    static NEXT: AtomicU32 = AtomicU32::new(1);
    loop {
        let c = NEXT.fetch_add(1, Ordering::Relaxed);
        if c != 0 {
            return c;
        }
    }
}

fn validation(msg: String) -> Error {
    Error::Taint(reject(msg))
}

/// Decoder state for the invocation in progress; a callback arriving
/// outside a decode step has none.
fn current_state(sb: &Sandbox, slot: &OnceLock<u32>) -> Result<Arc<DecodeState>, Error> {
    sb.get_invoke_context::<Arc<DecodeState>>(CTX_DECODER)?
        .map(|s| (*s).clone())
        .ok_or_else(|| Error::CallbackViolation {
            slot: slot.get().copied().unwrap_or(u32::MAX),
            reason: "input callback outside a decode step".into(),
        })
}

fn check_client(info: &TaintedGuestRef<RliInfo>, st: &DecodeState) -> Result<(), Error> {
    let tag = info.field::<u32>("client_slot")?.read()?;
    match tag.verify(|c| if c == st.client { Ok(()) } else { Err(format!("client tag {c}")) }) {
        Ok(()) => Ok(()),
        Err(TaintError::Validation(m)) => Err(Error::ContextViolation(format!(
            "decoder record carries another invocation's {m}, expected {}",
            st.client
        ))),
        Err(e) => Err(e.into()),
    }
}

fn fill_input(sb: &Sandbox, info: &TaintedGuestRef<RliInfo>, slot: &OnceLock<u32>) -> Result<u32, Error> {
    let st = current_state(sb, slot)?;
    check_client(info, &st)?;
    let mut cur = st.cursor.lock().unwrap();
    let filled = cur.filled;
    let remaining = info
        .field::<u32>("bytes_in_buffer")?
        .read()?
        .verify(|r| if r <= filled { Ok(r) } else { Err(format!("bytes_in_buffer {r} > {filled} supplied")) })?;
    // Resolving the guest's cursor rejects anything outside the region.
    let next = info.field::<GuestPtr<u8>>("next_input_offset")?.read_ref()?;
    if filled > 0 {
        let expected = st.buf.offset() + (filled - remaining);
        let next = next.ok_or(TaintError::NullPointer)?;
        next.offset()
            .eq(expected)
            .verify(|ok| if ok { Ok(()) } else { Err("input cursor moved outside the supplied buffer") })?;
    }
    cur.pos -= remaining as usize;
    let n = (st.data.len() - cur.pos).min(INPUT_CHUNK as usize);
    st.buf.write_slice(&st.data[cur.pos..cur.pos + n])?;
    cur.pos += n;
    cur.filled = n as u32;
    info.field::<u32>("bytes_in_buffer")?.write(n as u32)?;
    info.field::<GuestPtr<u8>>("next_input_offset")?.write(&st.buf)?;
    Ok((n > 0) as u32)
}

fn skip_input(sb: &Sandbox, info: &TaintedGuestRef<RliInfo>, n: Tainted<u32>, slot: &OnceLock<u32>) -> Result<(), Error> {
    let st = current_state(sb, slot)?;
    check_client(info, &st)?;
    // Any count is acceptable; it only moves our own cursor, clamped.
    let n = n.verify(Ok::<u32, String>)?;
    let mut cur = st.cursor.lock().unwrap();
    cur.pos = cur.pos.saturating_add(n as usize).min(st.data.len());
    cur.filled = 0;
    info.field::<u32>("bytes_in_buffer")?.write(0u32)?;
    Ok(())
}

/// Decodes `data` inside `sb`.
pub fn decode_in(sb: &Sandbox, data: &[u8], opts: &DecodeOptions) -> DecodeOutcome {
    register_layouts();
    let mut pixels = Vec::new();
    let mut scanlines = Vec::new();
    let result = run_decode(sb, data, opts, &mut pixels, &mut scanlines);
    let canaries_intact = pixels.is_empty()
        || (pixels[..CANARY_LEN].iter().all(|&b| b == CANARY)
            && pixels[pixels.len() - CANARY_LEN..].iter().all(|&b| b == CANARY));
    assert!(canaries_intact, "host pixel buffer overrun");
    let result = result.map(|(width, height)| DecodedImage {
        width,
        height,
        pixels: pixels[CANARY_LEN..pixels.len() - CANARY_LEN].to_vec(),
    });
    DecodeOutcome {
        result,
        canaries_intact,
        scanlines,
    }
}

/// Guest allocations released when a decode ends, however it ends.
struct Cleanup<'a> {
    sb: &'a Sandbox,
    info: Option<TaintedGuestRef<RliInfo>>,
    bufs: Vec<TaintedGuestRef<u8>>,
}

impl Drop for Cleanup<'_> {
    fn drop(&mut self) {
        if !self.sb.is_alive() {
            return;
        }
        if let Some(info) = self.info.take() {
            if let Ok(f) = self.sb.lookup("rli_destroy") {
                let _ = self.sb.invoke_void(&f, (&info,));
            }
        }
        for b in self.bufs.drain(..) {
            let _ = self.sb.free(&b);
        }
    }
}

fn run_decode(
    sb: &Sandbox,
    data: &[u8],
    opts: &DecodeOptions,
    pixels: &mut Vec<u8>,
    scanlines: &mut Vec<(u32, u32)>,
) -> Result<(u32, u32), Error> {
    let create = sb.lookup("rli_create")?;
    let set_source = sb.lookup("rli_set_source")?;
    let read_header = sb.lookup("rli_read_header")?;
    let decode_row = sb.lookup("rli_decode_row")?;
    let finish = sb.lookup("rli_finish")?;

    // Callbacks exist before the decoder does; they refuse to run until a
    // decode step supplies its state.
    let fill_slot = Arc::new(OnceLock::new());
    let skip_slot = Arc::new(OnceLock::new());
    let fs = fill_slot.clone();
    let fill_cb = sb.register_callback(move |sb, (info,): (TaintedGuestRef<RliInfo>,)| fill_input(sb, &info, &fs))?;
    let _ = fill_slot.set(fill_cb.slot());
    let ss = skip_slot.clone();
    let skip_cb = sb.register_callback(move |sb, (info, n): (TaintedGuestRef<RliInfo>, Tainted<u32>)| {
        skip_input(sb, &info, n, &ss)
    })?;
    let _ = skip_slot.set(skip_cb.slot());

    let mut cleanup = Cleanup {
        sb,
        info: None,
        bufs: Vec::new(),
    };
    let info = sb
        .invoke::<GuestPtr<RliInfo>, _>(&create, ())?
        .resolve_in(sb.region())?;
    cleanup.info = Some(info.clone());
    let buf = sb.malloc_bytes(INPUT_CHUNK)?;
    cleanup.bufs.push(buf.clone());

    let client = opts.client.unwrap_or_else(next_client);
    info.field::<u32>("client_slot")?.write(client)?;
    sb.invoke::<i32, _>(&set_source, (&info, &fill_cb, &skip_cb))?;

    let state = Arc::new(DecodeState {
        data: data.to_vec(),
        client,
        buf,
        cursor: Mutex::new(Cursor { pos: 0, filled: 0 }),
    });

    sb.set_invoke_context(CTX_DECODER, state.clone())?;
    sb.invoke::<u32, _>(&read_header, (&info, 1i32))?.verify(|s| {
        if s == STATUS_HEADER_OK {
            Ok(())
        } else {
            Err(format!("header status {s}"))
        }
    })?;
    let width = info
        .field::<u32>("width")?
        .read()?
        .verify(|w| if (1..=MAX_DIMENSION).contains(&w) { Ok(w) } else { Err(format!("width {w}")) })?;
    let height = info
        .field::<u32>("height")?
        .read()?
        .verify(|h| if (1..=MAX_DIMENSION).contains(&h) { Ok(h) } else { Err(format!("height {h}")) })?;
    if width as u64 * height as u64 > MAX_PIXELS {
        return Err(validation(format!("{width}x{height} exceeds the pixel budget")));
    }

    let row = sb.malloc_array::<u8>(width)?;
    cleanup.bufs.push(row.clone());
    let w = width as usize;
    pixels.resize(CANARY_LEN + w * height as usize + CANARY_LEN, CANARY);
    let mut scan = info.freezable::<u32>("output_scanline")?;

    for y in 0..height {
        if scan.is_frozen() {
            scan.unfreeze();
        }
        sb.set_invoke_context(CTX_DECODER, state.clone())?;
        sb.invoke::<u32, _>(&decode_row, (&info, &row))?
            .verify(|s| if s == STATUS_ROW_OK { Ok(()) } else { Err(format!("row status {s}")) })?;
        scan.freeze()?;
        if let Some(p) = opts.race_pause {
            std::thread::sleep(p);
        }
        let frozen = scan.frozen_read()?;
        // Library invariant: the decoder never claims more rows than exist.
        let line = frozen.verify(|s| {
            if (1..=height).contains(&s) {
                Ok(s)
            } else {
                Err(format!("output_scanline {s} outside 1..={height}"))
            }
        })?;
        // Application invariant: rows arrive in order.
        if line != y + 1 {
            return Err(validation(format!("row {line} delivered, {} expected", y + 1)));
        }
        let bytes = match opts.pixels {
            PixelPath::Verified => row.copy_and_verify_array(w, |v| {
                if v.len() == w {
                    Ok(v)
                } else {
                    Err("short row")
                }
            })?,
            PixelPath::Unchecked => row.unsafe_unverified_bytes(w, "rli-row-handoff")?,
        };
        if let Some(p) = opts.race_pause {
            std::thread::sleep(p);
        }
        // Use: the destination row comes from the frozen value, re-checked
        // against the live one right here.
        let used = scan.frozen_read()?.verify(Ok::<u32, String>)?;
        scanlines.push((line, used));
        let start = CANARY_LEN + (used as usize - 1) * w;
        pixels[start..start + w].copy_from_slice(&bytes);
    }
    if scan.is_frozen() {
        scan.unfreeze();
    }

    sb.set_invoke_context(CTX_DECODER, state)?;
    sb.invoke::<u32, _>(&finish, (&info,))?
        .verify(|s| if s == STATUS_DONE { Ok(()) } else { Err(format!("finish status {s}")) })?;
    drop(cleanup);
    Ok((width, height))
}

/// Errors after which a sandbox is not worth keeping.
pub fn is_violation(e: &Error) -> bool {
    !matches!(e, Error::GuestAbort(_) | Error::Busy)
}

/// Decodes through a pooled sandbox keyed by `origin`.
pub fn decode_image(pool: &SandboxPool, origin: &str, data: &[u8]) -> Result<DecodedImage, Error> {
    let key = SandboxKey::new("librli", origin, "image/x-rli");
    let mut lease = pool.acquire(&key)?;
    lease.sync_hint(SyncHint::Bulk)?;
    let out = decode_in(lease.sandbox(), data, &DecodeOptions::default());
    if let Err(e) = &out.result {
        if is_violation(e) {
            lease.discard();
        }
    }
    out.result
}
