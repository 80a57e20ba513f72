//! Audit trail for `unsafe_unverified` escapes.
//!
//! Off by default. Setting `SANDCAGE_AUDIT=1` turns it on at first use; tests
//! and CI flip it with [`set_enabled`]. Each escape writes one line
//! `UNSAFE <sandbox-id> <call-site-label>` to the configured sink.

use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Mutex, Once};

use super::SandboxId;

static ENABLED: AtomicBool = AtomicBool::new(false);
static ENV_INIT: Once = Once::new();
static RECORDS: AtomicU64 = AtomicU64::new(0);
static SINK: Mutex<Option<Box<dyn Write + Send>>> = Mutex::new(None);

fn init_from_env() {
    ENV_INIT.call_once(|| {
        if std::env::var("SANDCAGE_AUDIT").is_ok_and(|v| v == "1" || v == "true") {
            ENABLED.store(true, Ordering::SeqCst);
        }
    });
}

pub fn set_enabled(on: bool) {
    init_from_env();
    ENABLED.store(on, Ordering::SeqCst);
}

pub fn is_enabled() -> bool {
    init_from_env();
    ENABLED.load(Ordering::Relaxed)
}

/// Replaces the sink; `None` restores stderr.
pub fn set_sink(sink: Option<Box<dyn Write + Send>>) {
    *SINK.lock().unwrap_or_else(|p| p.into_inner()) = sink;
}

/// Number of audit records emitted since process start.
pub fn record_count() -> u64 {
    RECORDS.load(Ordering::SeqCst)
}

pub(crate) fn record(origin: SandboxId, label: &str) {
    if !is_enabled() {
        return;
    }
    RECORDS.fetch_add(1, Ordering::SeqCst);
    let line = format!("UNSAFE {} {}\n", origin, label);
    let mut guard = SINK.lock().unwrap_or_else(|p| p.into_inner());
    let _ = match guard.as_mut() {
        Some(w) => w.write_all(line.as_bytes()),
        None => io::stderr().write_all(line.as_bytes()),
    };
}
