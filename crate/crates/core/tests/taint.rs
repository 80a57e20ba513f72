use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use sandcage::guest::{register_layouts, RliInfo};
use sandcage::memory::{Region, RegionHandle, DEFAULT_REGION_SIZE, MIN_REGION_SIZE};
use sandcage::runtime::{swizzle_to_guest, swizzle_to_guest_checked, swizzle_to_host};
use sandcage::taint::{audit, record_layout, register_record, GuestPtr, RecordLayoutDescriptor, ValueKind};
use sandcage::{FreezableCell, SandboxId, TaintError, Tainted, TaintedGuestRef};

fn open<V: sandcage::taint::HostCopyable>(t: Tainted<V>) -> V {
    t.verify(Ok::<V, &str>).unwrap()
}

fn region(id: u32, size: usize) -> RegionHandle {
    Region::anonymous(SandboxId(id), size).unwrap()
}

#[test]
fn membership_check() {
    let allowed = |v: u32| if v <= 2 { Ok(v) } else { Err(format!("{v} not in {{0,1,2}}")) };
    assert_eq!(Tainted::new(1u32).verify(allowed), Ok(1));
    assert!(matches!(Tainted::new(7u32).verify(allowed), Err(TaintError::Validation(_))));
    assert_eq!(Tainted::new(2u32).verify(|v| (v == 2).then_some(true).ok_or("bad")), Ok(true));
}

#[test]
fn copy_and_verify_scalar() {
    let r = region(1, DEFAULT_REGION_SIZE);
    r.write_scalar(0x100, 42u32).unwrap();
    let p = TaintedGuestRef::<u32>::at(&r, 0x100).unwrap();
    assert_eq!(p.copy_and_verify(|v| if v < 100 { Ok(v) } else { Err("too big") }), Ok(42));
    assert!(matches!(
        TaintedGuestRef::<u32>::at(&r, 1 << 26),
        Err(TaintError::Bounds { .. })
    ));
    assert_eq!(TaintedGuestRef::<u32>::at(&r, 0).unwrap_err(), TaintError::NullPointer);
}

#[test]
fn copy_is_a_snapshot() {
    // The check sees the copy: a concurrent writer cannot change what was
    // validated into something else.
    let r = region(2, MIN_REGION_SIZE);
    let p = TaintedGuestRef::<u32>::at(&r, 0x40).unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let writer = {
        let (r, stop) = (r.clone(), stop.clone());
        std::thread::spawn(move || {
            let mut v = 0u32;
            while !stop.load(Ordering::Relaxed) {
                v = v.wrapping_add(1);
                r.write_scalar(0x40, v % 2 * 1000).unwrap();
            }
        })
    };
    for _ in 0..10_000 {
        let got = p.copy_and_verify(|v| if v < 100 { Ok(v) } else { Err("big") });
        if let Ok(v) = got {
            assert!(v < 100);
        }
    }
    stop.store(true, Ordering::Relaxed);
    writer.join().unwrap();
}

#[test]
fn array_copies() {
    let r = region(3, DEFAULT_REGION_SIZE);
    // Offset 0 is the null pointer; the first usable offset carries the data.
    r.write_bytes(0x10, &[1, 2, 3, 4]).unwrap();
    let p = TaintedGuestRef::<u8>::at(&r, 0x10).unwrap();
    assert_eq!(p.copy_and_verify_array(4, Ok::<_, &str>), Ok(vec![1, 2, 3, 4]));
    let end = TaintedGuestRef::<u8>::at(&r, (1 << 26) - 2).unwrap();
    assert!(matches!(
        end.copy_and_verify_array(4, Ok::<_, &str>),
        Err(TaintError::Bounds { .. })
    ));
    assert_eq!(end.copy_and_verify_array(0, Ok::<_, &str>), Ok(vec![]));
    let words = TaintedGuestRef::<u32>::at(&r, 0x10).unwrap();
    assert_eq!(words.copy_and_verify_array(1, Ok::<_, &str>), Ok(vec![0x0403_0201]));
}

#[test]
fn string_copies() {
    let r = region(4, MIN_REGION_SIZE);
    r.write_bytes(8, b"abc\0").unwrap();
    let p = TaintedGuestRef::<u8>::at(&r, 8).unwrap();
    assert_eq!(p.copy_and_verify_string(16, |s| Ok::<_, &str>(s.to_string())), Ok("abc".into()));

    r.write_bytes(0x100, &[b'x'; 16]).unwrap();
    let q = TaintedGuestRef::<u8>::at(&r, 0x100).unwrap();
    assert_eq!(
        q.copy_and_verify_string(16, |s| Ok::<_, &str>(s.len())),
        Err(TaintError::UnterminatedString(16))
    );
    // Terminator in the last allowed byte.
    r.write_bytes(0x200, &[b'y'; 15]).unwrap();
    r.write_bytes(0x20F, &[0]).unwrap();
    let t = TaintedGuestRef::<u8>::at(&r, 0x200).unwrap();
    assert_eq!(t.copy_and_verify_string(16, |s| Ok::<_, &str>(s.len())), Ok(15));

    // A string running into the end of the region is a bounds error.
    let size = r.size() as u32;
    r.write_bytes((size - 4) as u64, b"zzzz").unwrap();
    let e = TaintedGuestRef::<u8>::at(&r, size - 4).unwrap();
    assert!(matches!(e.copy_and_verify_string(16, |s| Ok::<_, &str>(s.len())), Err(TaintError::Bounds { .. })));
}

#[derive(Clone)]
struct Shared(Arc<Mutex<Vec<u8>>>);

impl Write for Shared {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[test]
fn unverified_escape_is_audited() {
    let buf = Shared(Arc::new(Mutex::new(Vec::new())));
    audit::set_sink(Some(Box::new(buf.clone())));
    audit::set_enabled(true);
    let before = audit::record_count();
    let v = Tainted::with_origin(5u32, SandboxId(42)).unsafe_unverified("taint-test-site");
    assert_eq!(v, 5);
    assert!(audit::record_count() > before);
    audit::set_enabled(false);
    audit::set_sink(None);
    let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
    assert!(text.lines().any(|l| l == "UNSAFE sb42 taint-test-site"), "{text}");
}

#[test]
fn arithmetic_stays_tainted() {
    assert_eq!(open(Tainted::new(2u32) + 3), 5);
    assert_eq!(open(Tainted::new(0xFFFF_FFFFu32) + 1), 0);
    assert_eq!(open(Tainted::new(4u32) * Tainted::new(5u32)), 20);
    assert!(open(Tainted::new(3u32).lt(5)));
    let mixed = Tainted::with_origin(1u32, SandboxId(9)) + Tainted::new(1u32);
    assert_eq!(mixed.origin(), SandboxId(9));
    let div = Tainted::new(1u32) / Tainted::new(0u32);
    assert!(open(div.faulted()));
    assert!(matches!(div.verify(Ok::<u32, &str>), Err(TaintError::Validation(_))));
}

#[test]
fn element_indexing() {
    let r = region(5, MIN_REGION_SIZE);
    let base = TaintedGuestRef::<u32>::at(&r, 0x1000).unwrap();
    let e = base.element(3u32).unwrap();
    assert_eq!(open(e.offset()), 0x1000 + 12);
    assert!(matches!(base.element(u64::MAX), Err(TaintError::Bounds { .. })));
    assert!(matches!(base.element(1u64 << 20), Err(TaintError::Bounds { .. })));
    let i = Tainted::with_origin(2u32, SandboxId(5));
    assert_eq!(open(base.element(i).unwrap().offset()), 0x1008);
}

fn info_at(r: &RegionHandle, off: u32) -> TaintedGuestRef<RliInfo> {
    register_layouts();
    TaintedGuestRef::<RliInfo>::at(r, off).unwrap()
}

#[test]
fn fields_read_and_write() {
    let r = region(6, MIN_REGION_SIZE);
    let info = info_at(&r, 0x100);
    info.field::<u32>("width").unwrap().write(640u32).unwrap();
    assert_eq!(open(info.field::<u32>("width").unwrap().read().unwrap()), 640);

    // A reference field stores the 32-bit guest offset, never a host address.
    let buf = TaintedGuestRef::<u8>::at(&r, 0x2000).unwrap();
    let next = info.field::<GuestPtr<u8>>("next_input_offset").unwrap();
    next.write(&buf).unwrap();
    let desc = record_layout("RliInfo").unwrap();
    let at = 0x100 + desc.field("next_input_offset").unwrap().offset as u64;
    let mut raw = [0u8; 8];
    r.read_bytes(at, &mut raw).unwrap();
    assert_eq!(u32::from_le_bytes(raw[..4].try_into().unwrap()), 0x2000);
    assert_eq!(open(next.read_ref().unwrap().unwrap().offset()), 0x2000);

    // References into another sandbox are refused.
    let other = region(60, MIN_REGION_SIZE);
    let foreign = TaintedGuestRef::<u8>::at(&other, 0x10).unwrap();
    assert!(matches!(next.write(&foreign), Err(TaintError::OriginMismatch { .. })));

    assert!(matches!(info.field::<u32>("nope"), Err(TaintError::UnknownField { .. })));
    assert!(matches!(info.field::<u16>("width"), Err(TaintError::KindMismatch { .. })));
}

#[test]
fn descriptor_access() {
    let r = region(7, MIN_REGION_SIZE);
    let info = info_at(&r, 0x100);
    assert!(matches!(info.field::<u32>("output_scanline"), Err(TaintError::FreezableField(_))));
    let mut cell = info.freezable::<u32>("output_scanline").unwrap();
    cell.write(4u32).unwrap();
    cell.freeze().unwrap();
    assert_eq!(open(cell.frozen_read().unwrap()), 4);

    sandcage::guest_record!(Unregistered);
    let u = TaintedGuestRef::<Unregistered>::at(&r, 0x100);
    assert!(matches!(u, Err(TaintError::UnknownRecord(_))));

    // A record placed so that its last field runs off the region.
    let size = record_layout("RliInfo").unwrap().size();
    let past = TaintedGuestRef::<RliInfo>::at(&r, r.size() as u32 - size + 4);
    assert!(matches!(past, Err(TaintError::Bounds { .. })));

    // A descriptor that disagrees with the registered one is refused.
    let fake = RecordLayoutDescriptor::builder("RliInfo").field("width", ValueKind::U32).build().unwrap();
    assert!(matches!(info.field_in::<u32>(&fake, "width"), Err(TaintError::UnknownRecord(_))));
    assert!(register_record(fake).is_err());
}

#[test]
fn freeze_semantics() {
    let r = region(8, MIN_REGION_SIZE);
    r.write_scalar(0x100, 7u32).unwrap();
    let p = TaintedGuestRef::<u32>::at(&r, 0x100).unwrap();
    let mut cell = FreezableCell::from_ref(&p).unwrap();
    assert_eq!(cell.frozen_read().unwrap_err(), TaintError::ReadWhileUnfrozen);
    cell.freeze().unwrap();
    assert_eq!(open(cell.frozen_read().unwrap()), 7);
    r.write_scalar(0x100, 9u32).unwrap();
    assert_eq!(cell.frozen_read().unwrap_err(), TaintError::Tamper);
    cell.unfreeze();
    cell.freeze().unwrap();
    assert_eq!(open(cell.frozen_read().unwrap()), 9);
}

#[test]
fn freeze_race_never_yields_the_new_value() {
    let r = region(9, MIN_REGION_SIZE);
    r.write_scalar(0x100, 7u32).unwrap();
    let p = TaintedGuestRef::<u32>::at(&r, 0x100).unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let flipper = {
        let (r, stop) = (r.clone(), stop.clone());
        std::thread::spawn(move || {
            let mut n = 0u32;
            while !stop.load(Ordering::Relaxed) {
                n += 1;
                r.write_scalar(0x100, if n.is_multiple_of(2) { 7u32 } else { 9 }).unwrap();
                if n.is_multiple_of(64) {
                    std::thread::yield_now();
                }
            }
            r.write_scalar(0x100, 7u32).unwrap();
        })
    };
    let (mut ok, mut tamper) = (0, 0);
    for _ in 0..5_000 {
        let mut cell = FreezableCell::from_ref(&p).unwrap();
        if cell.freeze().is_err() {
            continue;
        }
        let frozen_then = cell.frozen_read();
        std::hint::spin_loop();
        match (frozen_then, cell.frozen_read()) {
            (Ok(a), Ok(b)) => {
                let (a, b) = (open(a), open(b));
                assert_eq!(a, b, "frozen copy changed between reads");
                ok += 1;
            }
            (_, Err(TaintError::Tamper)) | (Err(TaintError::Tamper), _) => tamper += 1,
            (a, b) => panic!("unexpected {a:?} / {b:?}"),
        }
    }
    stop.store(true, Ordering::Relaxed);
    flipper.join().unwrap();
    assert_eq!(ok + tamper, 5_000);
}

#[test]
fn validation_policy_defaults_to_errors() {
    assert_eq!(sandcage::taint::validation_policy(), sandcage::ValidationPolicy::ReturnError);
}

proptest! {
    #[test]
    fn swizzle_round_trips(log in 20u32..=32, off in any::<u32>(), example in any::<u32>()) {
        let size = 1usize << log;
        let base = 0x5a00_0000_0000usize & !(size - 1);
        let off = (off as usize & (size - 1)) as u32;
        let ex = base + (example as usize & (size - 1));
        let host = swizzle_to_host(off, ex, size);
        prop_assert_eq!(host, base + off as usize);
        prop_assert_eq!(swizzle_to_guest(host, size), off);
        prop_assert_eq!(swizzle_to_guest_checked(host, base, size), Ok(off));
        prop_assert!(swizzle_to_guest_checked(base + size, base, size).is_err());
    }

    #[test]
    fn tainted_arithmetic_wraps_like_u32(a in any::<u32>(), b in any::<u32>()) {
        prop_assert_eq!(open(Tainted::new(a) + b), a.wrapping_add(b));
        prop_assert_eq!(open(Tainted::new(a) - b), a.wrapping_sub(b));
        prop_assert_eq!(open(Tainted::new(a) * Tainted::new(b)), a.wrapping_mul(b));
        prop_assert_eq!(open(Tainted::new(a).lt(b)), a < b);
    }

    #[test]
    fn guest_written_pointers_resolve_in_region(raw in any::<u32>()) {
        let r = region(10, MIN_REGION_SIZE);
        let info = info_at(&r, 0x100);
        let desc = record_layout("RliInfo").unwrap();
        let at = 0x100 + desc.field("next_input_offset").unwrap().offset as u64;
        r.write_scalar(at, raw).unwrap();
        let v = info.field::<GuestPtr<u8>>("next_input_offset").unwrap();
        match v.read_ref() {
            Ok(Some(p)) => prop_assert!((open(p.offset()) as usize) < r.size()),
            Ok(None) => prop_assert_eq!(raw, 0),
            Err(e) => prop_assert!(matches!(e, TaintError::Bounds { .. }), "{:?}", e),
        }
    }
}
