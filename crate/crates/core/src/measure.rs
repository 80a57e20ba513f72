//! Timing and memory helpers shared by the benchmarks and the acceptance
//! suite. All durations are nanoseconds.

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use crate::backend::{BackendKind, SyncMode};
use crate::error::Error;
use crate::guest::{decode_in, format, DecodeOptions};
use crate::memory::{page_size, validate_region_size, DEFAULT_REGION_SIZE};
use crate::runtime::{Sandbox, SandboxConfig};

pub const DEFAULT_WARMUP: usize = 1000;
pub const REGION_SIZE_ENV: &str = "SANDCAGE_REGION_SIZE";
/// Consecutive sandbox additions averaged per linearity sample. Single
/// additions differ by a page or so (12 vs 16 KiB); a group smooths that.
pub const LINEARITY_GROUP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub samples: usize,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn stats(samples: &[f64]) -> Stats {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    Stats {
        samples: s.len(),
        p50: percentile(&s, 50.0),
        p90: percentile(&s, 90.0),
        p99: percentile(&s, 99.0),
        mean: s.iter().sum::<f64>() / s.len().max(1) as f64,
        min: s.first().copied().unwrap_or(f64::NAN),
        max: s.last().copied().unwrap_or(f64::NAN),
    }
}

/// Region size from `SANDCAGE_REGION_SIZE`, else the default.
pub fn region_size_from_env() -> Result<usize, Error> {
    match std::env::var(REGION_SIZE_ENV) {
        Ok(v) => {
            let size: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{REGION_SIZE_ENV}=`{v}` is not a number")))?;
            validate_region_size(size).map_err(|e| Error::Config(format!("{REGION_SIZE_ENV}: {e}")))?;
            Ok(size)
        }
        Err(_) => Ok(DEFAULT_REGION_SIZE),
    }
}

/// Resident set size of this process.
pub fn rss_bytes() -> u64 {
    std::fs::read_to_string("/proc/self/statm")
        .ok()
        .and_then(|s| s.split_whitespace().nth(1)?.parse::<u64>().ok())
        .map_or(0, |pages| pages * page_size() as u64)
}

/// Resident set size of another process (a worker).
pub fn rss_of(pid: u32) -> u64 {
    std::fs::read_to_string(format!("/proc/{pid}/statm"))
        .ok()
        .and_then(|s| s.split_whitespace().nth(1)?.parse::<u64>().ok())
        .map_or(0, |pages| pages * page_size() as u64)
}

/// Hands freed heap memory back to the OS so resident size reflects live
/// allocations only, not pixel buffers a decode just dropped.
fn release_free_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: no preconditions.
    unsafe {
        libc::malloc_trim(0);
    }
}

/// Per-call latency of an empty guest call; `warmup` calls are discarded.
pub fn empty_call_latency(
    kind: BackendKind,
    sync: SyncMode,
    region_size: usize,
    iters: usize,
    warmup: usize,
) -> Result<Vec<f64>, Error> {
    let sb = Sandbox::create(SandboxConfig::new(kind).region_size(region_size).sync(sync))?;
    let f = sb.lookup("noop")?;
    for _ in 0..warmup {
        sb.invoke_void(&f, ())?;
    }
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        sb.invoke_void(&f, ())?;
        out.push(t.elapsed().as_nanos() as f64);
    }
    sb.destroy();
    Ok(out)
}

/// Time to create a sandbox that is ready to take calls. Teardown is not
/// counted.
pub fn creation_times(kind: BackendKind, region_size: usize, count: usize, warmup: usize) -> Result<Vec<f64>, Error> {
    let mut out = Vec::with_capacity(count);
    for i in 0..warmup + count {
        let t = Instant::now();
        let sb = Sandbox::create(SandboxConfig::new(kind).region_size(region_size))?;
        let dt = t.elapsed().as_nanos() as f64;
        sb.destroy();
        if i >= warmup {
            out.push(dt);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ScalingResult {
    pub sandboxes: usize,
    pub threads: usize,
    /// Decode time per sandbox.
    pub decode_ns: Vec<f64>,
    pub all_correct: bool,
    /// Resident memory after each added sandbox (index 0: before any).
    pub rss_steps: Vec<u64>,
    pub mem_bytes_per_sandbox: f64,
    /// Largest relative deviation of a per-sandbox increment from the mean.
    pub max_increment_deviation: f64,
}

/// Creates `k` sandboxes one at a time, each decoding `image` once so its
/// working set is populated, recording resident memory after each; then
/// decodes `image` in all of them concurrently.
pub fn scaling_run(kind: BackendKind, region_size: usize, k: usize, image: &[u8]) -> Result<ScalingResult, Error> {
    let (_, _, want) = format::decode_reference(image).map_err(|e| Error::Config(format!("scaling image: {e}")))?;
    let opts = DecodeOptions::default();
    let mut sandboxes = Vec::with_capacity(k);
    let footprint = |sbs: &[Sandbox]| -> u64 {
        release_free_heap();
        rss_bytes() + sbs.iter().filter_map(|s| s.process_id()).map(rss_of).sum::<u64>()
    };
    // Warm the allocator and lazily built statics before the baseline.
    {
        let sb = Sandbox::create(SandboxConfig::new(kind).region_size(region_size))?;
        let _ = decode_in(&sb, image, &opts);
        sb.destroy();
    }
    let mut rss_steps = vec![footprint(&sandboxes)];
    let mut all_correct = true;
    for _ in 0..k {
        let sb = Sandbox::create(SandboxConfig::new(kind).region_size(region_size))?;
        all_correct &= decode_in(&sb, image, &opts).result.is_ok_and(|img| img.pixels == want);
        sandboxes.push(sb);
        rss_steps.push(footprint(&sandboxes));
    }

    let threads = k.min(std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    let times = Mutex::new(vec![0f64; k]);
    let correct = Mutex::new(true);
    std::thread::scope(|s| {
        for t in 0..threads {
            let (sandboxes, times, correct, want, opts) = (&sandboxes, &times, &correct, &want, &opts);
            s.spawn(move || {
                for i in (t..sandboxes.len()).step_by(threads) {
                    let start = Instant::now();
                    let ok = decode_in(&sandboxes[i], image, opts).result.is_ok_and(|img| &img.pixels == want);
                    times.lock().unwrap()[i] = start.elapsed().as_nanos() as f64;
                    if !ok {
                        *correct.lock().unwrap() = false;
                    }
                }
            });
        }
    });
    all_correct &= *correct.lock().unwrap();
    for sb in &sandboxes {
        sb.destroy();
    }

    let (mean, dev) = increment_linearity(&rss_steps, LINEARITY_GROUP);
    Ok(ScalingResult {
        sandboxes: k,
        threads,
        decode_ns: times.into_inner().unwrap(),
        all_correct,
        rss_steps,
        mem_bytes_per_sandbox: mean,
        max_increment_deviation: dev,
    })
}

/// Mean per-sandbox increment over the whole run, and the largest relative
/// deviation from it among per-sandbox increments averaged over groups of
/// `group` consecutive additions (single-page noise averages out).
pub fn increment_linearity(steps: &[u64], group: usize) -> (f64, f64) {
    let n = steps.len().saturating_sub(1);
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = (steps[n] as f64 - steps[0] as f64) / n as f64;
    let group = group.clamp(1, n);
    let mut dev: f64 = 0.0;
    let mut i = 0;
    while i + group <= n {
        let inc = (steps[i + group] as f64 - steps[i] as f64) / group as f64;
        if mean != 0.0 {
            dev = dev.max(((inc - mean) / mean).abs());
        }
        i += group;
    }
    (mean, dev)
}

#[derive(Debug, Clone)]
pub struct CorpusTiming {
    pub files: usize,
    pub decode_ns: Vec<f64>,
    pub null_total_ns: f64,
    pub total_ns: f64,
    pub all_correct: bool,
}

/// Decodes every `*.rli` under `dir` with `kind` and with the null backend.
pub fn decode_corpus(kind: BackendKind, region_size: usize, dir: &Path, rounds: usize) -> Result<CorpusTiming, Error> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rli"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .rli files in {}", dir.display())));
    }
    let mut images = Vec::new();
    for f in &files {
        let data = std::fs::read(f).map_err(|e| Error::Config(format!("{}: {e}", f.display())))?;
        let want = format::decode_reference(&data)
            .map_err(|e| Error::Config(format!("{}: {e}", f.display())))?
            .2;
        images.push((data, want));
    }
    let run = |kind: BackendKind| -> Result<(Vec<f64>, bool), Error> {
        let sb = Sandbox::create(SandboxConfig::new(kind).region_size(region_size))?;
        let mut times = Vec::new();
        let mut ok = true;
        for round in 0..rounds.max(1) + 1 {
            for (data, want) in &images {
                let t = Instant::now();
                let good = decode_in(&sb, data, &DecodeOptions::default())
                    .result
                    .is_ok_and(|img| &img.pixels == want);
                // Round 0 is warmup.
                if round > 0 {
                    times.push(t.elapsed().as_nanos() as f64);
                }
                ok &= good;
            }
        }
        sb.destroy();
        Ok((times, ok))
    };
    let (null_times, null_ok) = run(BackendKind::NullDirect)?;
    let (times, ok) = run(kind)?;
    Ok(CorpusTiming {
        files: files.len(),
        total_ns: times.iter().sum(),
        null_total_ns: null_times.iter().sum(),
        decode_ns: times,
        all_correct: ok && null_ok,
    })
}
