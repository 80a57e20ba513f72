//! Keyed sandbox pool: one isolation unit per (library, origin, content
//! type), idle instances kept up to a per-class threshold and evicted LRU.

use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use crate::backend::{BackendKind, SyncMode};
use crate::error::Error;
use crate::guest::GuestVariant;
use crate::memory::{validate_region_size, DEFAULT_REGION_SIZE};
use crate::runtime::{Sandbox, SandboxConfig};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SandboxKey {
    pub library: String,
    pub origin: String,
    pub content_type: String,
}

impl SandboxKey {
    pub fn new(library: impl Into<String>, origin: impl Into<String>, content_type: impl Into<String>) -> Self {
        SandboxKey {
            library: library.into(),
            origin: origin.into(),
            content_type: content_type.into(),
        }
    }

    pub fn class(&self) -> ContentClass {
        ContentClass::of(&self.content_type)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContentClass {
    Image,
    Decompression,
    /// Audio, video and anything unrecognised: never kept idle.
    Media,
}

impl ContentClass {
    pub fn of(content_type: &str) -> ContentClass {
        let major = content_type.split('/').next().unwrap_or("").trim().to_ascii_lowercase();
        match major.as_str() {
            "image" => ContentClass::Image,
            "application" => ContentClass::Decompression,
            _ => ContentClass::Media,
        }
    }
}

/// What the caller is about to do with a lease.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncHint {
    /// Many short calls: spin.
    Latency,
    /// Few long calls: block.
    Bulk,
}

impl SyncHint {
    pub fn mode(self) -> SyncMode {
        match self {
            SyncHint::Latency => SyncMode::Spin,
            SyncHint::Bulk => SyncMode::Event,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub image_threshold: usize,
    pub decompression_threshold: usize,
    pub media_threshold: usize,
    pub backend: BackendKind,
    pub region_size: usize,
    pub guest: GuestVariant,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            image_threshold: 10,
            decompression_threshold: 50,
            media_threshold: 0,
            backend: BackendKind::EmuSfi,
            region_size: DEFAULT_REGION_SIZE,
            guest: GuestVariant::Clean,
        }
    }
}

impl PoolConfig {
    pub fn threshold(&self, class: ContentClass) -> usize {
        match class {
            ContentClass::Image => self.image_threshold,
            ContentClass::Decompression => self.decompression_threshold,
            ContentClass::Media => self.media_threshold,
        }
    }

    /// Flat `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<PoolConfig, Error> {
        let mut cfg = PoolConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("line {}: `{k}` wants a number, got `{v}`", n + 1)))
            };
            match k {
                "threshold.image" => cfg.image_threshold = num(v)?,
                "threshold.decompression" => cfg.decompression_threshold = num(v)?,
                "backend" => cfg.backend = BackendKind::from_str(v)?,
                "region_size" => {
                    let size = num(v)?;
                    validate_region_size(size).map_err(Error::Config)?;
                    cfg.region_size = size;
                }
                other => return Err(Error::Config(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PoolConfig, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        PoolConfig::parse(&text)
    }

    fn sandbox_config(&self) -> SandboxConfig {
        SandboxConfig::new(self.backend)
            .region_size(self.region_size)
            .guest(self.guest)
    }
}

struct Idle {
    key: SandboxKey,
    sandbox: Sandbox,
    last_used: u64,
}

#[derive(Default)]
struct PoolState {
    idle: Vec<Idle>,
    outstanding: usize,
    tick: u64,
    created: u64,
    destroyed: u64,
}

/// Thread-safe keyed pool.
pub struct SandboxPool {
    config: PoolConfig,
    state: Mutex<PoolState>,
}

impl SandboxPool {
    pub fn new(config: PoolConfig) -> Self {
        SandboxPool {
            config,
            state: Mutex::new(PoolState::default()),
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    /// Leases an idle instance for `key`, creating one on a miss.
    pub fn acquire(&self, key: &SandboxKey) -> Result<Lease<'_>, Error> {
        {
            let mut st = self.state.lock().unwrap();
            // Most recently used first: it is the warmest.
            let hit = st
                .idle
                .iter()
                .enumerate()
                .filter(|(_, i)| &i.key == key)
                .max_by_key(|(_, i)| i.last_used)
                .map(|(n, _)| n);
            if let Some(n) = hit {
                let idle = st.idle.swap_remove(n);
                st.outstanding += 1;
                return Ok(Lease::new(self, idle.key, idle.sandbox));
            }
            // Reserve the slot so live_count stays honest while we build.
            st.outstanding += 1;
        }
        match Sandbox::create(self.config.sandbox_config()) {
            Ok(sb) => {
                self.state.lock().unwrap().created += 1;
                Ok(Lease::new(self, key.clone(), sb))
            }
            Err(e) => {
                self.state.lock().unwrap().outstanding -= 1;
                Err(e)
            }
        }
    }

    /// Returns a lease; same as dropping it.
    pub fn release(&self, lease: Lease<'_>) {
        drop(lease)
    }

    fn give_back(&self, key: SandboxKey, sandbox: Sandbox, discard: bool) {
        let threshold = self.config.threshold(key.class());
        let mut doomed = Vec::new();
        {
            let mut st = self.state.lock().unwrap();
            st.outstanding -= 1;
            if discard || threshold == 0 || !sandbox.is_alive() {
                doomed.push(sandbox);
            } else {
                st.tick += 1;
                let tick = st.tick;
                let class = key.class();
                st.idle.push(Idle {
                    key,
                    sandbox,
                    last_used: tick,
                });
                loop {
                    let in_class: Vec<usize> = (0..st.idle.len()).filter(|&n| st.idle[n].key.class() == class).collect();
                    if in_class.len() <= threshold {
                        break;
                    }
                    let lru = *in_class.iter().min_by_key(|&&n| st.idle[n].last_used).unwrap();
                    doomed.push(st.idle.swap_remove(lru).sandbox);
                }
            }
            st.destroyed += doomed.len() as u64;
        }
        // Teardown can block on a worker; keep it out of the lock.
        for sb in doomed {
            sb.destroy();
        }
    }

    /// Idle plus leased instances.
    pub fn live_count(&self) -> usize {
        let st = self.state.lock().unwrap();
        st.idle.len() + st.outstanding
    }

    pub fn idle_count(&self) -> usize {
        self.state.lock().unwrap().idle.len()
    }

    pub fn outstanding(&self) -> usize {
        self.state.lock().unwrap().outstanding
    }

    /// (created, destroyed) totals.
    pub fn churn(&self) -> (u64, u64) {
        let st = self.state.lock().unwrap();
        (st.created, st.destroyed)
    }

    /// Destroys every idle instance.
    pub fn clear(&self) {
        let idle = std::mem::take(&mut self.state.lock().unwrap().idle);
        self.state.lock().unwrap().destroyed += idle.len() as u64;
        for i in idle {
            i.sandbox.destroy();
        }
    }
}

impl Drop for SandboxPool {
    fn drop(&mut self) {
        self.clear();
    }
}

/// Exclusive use of one pooled instance; returned to the pool on drop.
pub struct Lease<'p> {
    pool: &'p SandboxPool,
    key: SandboxKey,
    sandbox: Option<Sandbox>,
    discard: bool,
}

impl<'p> Lease<'p> {
    fn new(pool: &'p SandboxPool, key: SandboxKey, sandbox: Sandbox) -> Self {
        Lease {
            pool,
            key,
            sandbox: Some(sandbox),
            discard: false,
        }
    }

    pub fn sandbox(&self) -> &Sandbox {
        self.sandbox.as_ref().expect("lease already released")
    }

    pub fn key(&self) -> &SandboxKey {
        &self.key
    }

    /// Picks the process backend's sync mode; a no-op elsewhere.
    pub fn sync_hint(&self, hint: SyncHint) -> Result<(), Error> {
        self.sandbox().set_sync_mode(hint.mode())
    }

    /// Destroy instead of pooling on release (e.g. after a violation).
    pub fn discard(&mut self) {
        self.discard = true;
    }
}

impl Drop for Lease<'_> {
    fn drop(&mut self) {
        if let Some(sb) = self.sandbox.take() {
            self.pool.give_back(self.key.clone(), sb, self.discard);
        }
    }
}
