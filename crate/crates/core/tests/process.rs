use std::time::{Duration, Instant};

use sandcage::backend::process::wire::{Opcode, RpcMessage};
use sandcage::backend::process::{ProcessBackend, ProcessOptions};
use sandcage::backend::{Backend, DispatchError, HostServices};
use sandcage::guest::GuestVariant;
use sandcage::memory::MIN_REGION_SIZE;
use sandcage::{BackendKind, Error, Sandbox, SandboxConfig, SandboxId, SyncMode, Tainted};

fn sandbox(sync: SyncMode) -> Sandbox {
    Sandbox::create(SandboxConfig::new(BackendKind::Process).region_size(MIN_REGION_SIZE).sync(sync)).unwrap()
}

fn open<V: sandcage::taint::HostCopyable>(t: Tainted<V>) -> V {
    t.verify(Ok::<V, &str>).unwrap()
}

fn thread_cpu() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: valid out pointer.
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// Host side that answers nothing; enough for raw protocol exchanges.
struct NoHost;

impl HostServices for NoHost {
    fn dispatch(&self, _slot: u32, _raw_args: &[u64]) -> Result<u64, DispatchError> {
        Err(DispatchError::Violation)
    }
    fn request_exit(&self, _code: i32) {}
    fn unwinding(&self) -> bool {
        false
    }
    fn record_violation(&self, _detail: String) {}
}

#[test]
fn callbacks_stream_across_the_boundary() {
    for sync in [SyncMode::Spin, SyncMode::Event] {
        let sb = sandbox(sync);
        let call = sb.lookup("test_call_slot").unwrap();
        let cb = sb
            .register_callback(|_, (x,): (Tainted<u32>,)| Ok(open(x).wrapping_mul(3)))
            .unwrap();
        for i in 0..2_000u32 {
            assert_eq!(open(sb.invoke::<u32, _>(&call, (cb.slot(), i)).unwrap()), i.wrapping_mul(3));
        }
        sb.destroy();
    }
}

#[test]
fn sync_mode_switches_mid_session() {
    let sb = sandbox(SyncMode::Event);
    let echo = sb.lookup("test_echo_u64").unwrap();
    for (round, mode) in [SyncMode::Spin, SyncMode::Event, SyncMode::Spin, SyncMode::Event].into_iter().enumerate() {
        sb.set_sync_mode(mode).unwrap();
        for i in 0..500u64 {
            let v = (round as u64) << 32 | i;
            assert_eq!(open(sb.invoke::<u64, _>(&echo, (v,)).unwrap()), v);
        }
    }
    sb.destroy();
}

#[test]
fn killed_worker_is_a_transport_error() {
    let sb = sandbox(SyncMode::Event);
    let pid = sb.process_id().unwrap();
    let sleep = sb.lookup("sleep_ms").unwrap();
    let start = Instant::now();
    let r = std::thread::scope(|s| {
        let h = s.spawn(|| sb.invoke_void(&sleep, (5_000u32,)));
        std::thread::sleep(Duration::from_millis(100));
        // SAFETY: signal to our own child.
        unsafe { libc::kill(pid as libc::pid_t, libc::SIGKILL) };
        h.join().unwrap()
    });
    assert!(matches!(r, Err(Error::Transport(_))), "{r:?}");
    assert!(start.elapsed() < Duration::from_millis(100) + Duration::from_secs(2));
    assert!(!sb.is_alive());
    let noop = sb.lookup("noop");
    assert!(noop.is_err());
}

#[test]
fn shutdown_exits_cleanly() {
    let be = ProcessBackend::spawn(SandboxId(90_001), MIN_REGION_SIZE, GuestVariant::Clean, &ProcessOptions::default())
        .unwrap();
    let noop = be.resolve("noop").unwrap();
    be.invoke(&NoHost, noop.index, &[]).unwrap();
    be.shutdown();
    let status = be.exit_status().expect("worker reaped");
    assert_eq!(status.code(), Some(0));
}

#[test]
fn malformed_host_message_stops_the_worker() {
    let be = ProcessBackend::spawn(SandboxId(90_002), MIN_REGION_SIZE, GuestVariant::Clean, &ProcessOptions::default())
        .unwrap();
    // An unknown function index is answered with a fault, not obeyed.
    let r = be.raw_call(&NoHost, RpcMessage::new(Opcode::Invoke, 9_999)).unwrap();
    assert_ne!(r.status, 0);
    // A RETURN sent to the worker is a protocol violation: it exits.
    let r = be.raw_call(&NoHost, RpcMessage::new(Opcode::Return, 0));
    assert!(matches!(r, Err(Error::Transport(_))), "{r:?}");
    let deadline = Instant::now() + Duration::from_secs(2);
    while be.exit_status().is_none() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(be.exit_status().and_then(|s| s.code()), Some(2));
}

#[test]
fn event_mode_host_idles_during_a_long_guest_call() {
    let sb = sandbox(SyncMode::Event);
    let sleep = sb.lookup("sleep_ms").unwrap();
    sb.invoke_void(&sleep, (1u32,)).unwrap();
    let cpu0 = thread_cpu();
    let t0 = Instant::now();
    sb.invoke_void(&sleep, (1_000u32,)).unwrap();
    let wall = t0.elapsed();
    let cpu = thread_cpu() - cpu0;
    assert!(wall >= Duration::from_millis(1_000));
    assert!(
        cpu.as_secs_f64() < 0.05 * wall.as_secs_f64(),
        "host thread used {cpu:?} of CPU over {wall:?}"
    );
    sb.destroy();
}

#[test]
fn worker_is_a_separate_process_with_shared_memory() {
    let sb = sandbox(SyncMode::Event);
    let pid = sb.process_id().unwrap();
    assert_ne!(pid, std::process::id());
    let p = sb.malloc_bytes(8).unwrap();
    let store = sb.lookup("test_store_u32").unwrap();
    sb.invoke_void(&store, (open(p.offset()), 0xCAFE_F00Du32)).unwrap();
    assert_eq!(p.cast::<u32>().unwrap().copy_and_verify(Ok::<u32, &str>).unwrap(), 0xCAFE_F00D);
    sb.destroy();
}
