//! `bench`: microbenchmarks for sandcage backends.
//!
//! Every subcommand prints one report, JSON by default:
//! `{bench, backend, params, samples, p50, p90, p99, mem_bytes_per_sandbox?}`
//! with times in nanoseconds. `--csv` prints the same fields as a header
//! line and a row. Exit status: 0 ok, 2 usage, 3 `--assert` failure, 1 any
//! other error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use sandcage::measure::{self, Stats, DEFAULT_WARMUP};
use sandcage::{BackendKind, SyncMode};

#[derive(Parser)]
#[command(name = "bench", about = "sandcage microbenchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Emit CSV instead of JSON.
    #[arg(long, global = true)]
    csv: bool,
    /// Check the benchmark's expected property; exit 3 if it fails.
    #[arg(long, global = true)]
    assert: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Null,
    Emusfi,
    Process,
}

impl Backend {
    fn kind(self) -> BackendKind {
        match self {
            Backend::Null => BackendKind::NullDirect,
            Backend::Emusfi => BackendKind::EmuSfi,
            Backend::Process => BackendKind::Process,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Sync {
    Spin,
    Event,
}

impl Sync {
    fn mode(self) -> SyncMode {
        match self {
            Sync::Spin => SyncMode::Spin,
            Sync::Event => SyncMode::Event,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Empty-call round trip latency.
    TransferLatency {
        #[arg(long, value_enum)]
        backend: Backend,
        #[arg(long, value_enum, default_value = "event")]
        sync: Sync,
        #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
        iters: u64,
        #[arg(long, default_value_t = DEFAULT_WARMUP as u64)]
        warmup: u64,
    },
    /// Sandbox creation time.
    Creation {
        #[arg(long, value_enum)]
        backend: Backend,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
    },
    /// K sandboxes decoding one image concurrently.
    Scaling {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=1024))]
        sandboxes: u64,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value = "emusfi")]
        backend: Backend,
    },
    /// Decode throughput over a directory of .rli files, relative to null.
    Decode {
        #[arg(long, value_enum)]
        backend: Backend,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        rounds: u64,
    },
}

#[derive(Serialize)]
struct Report {
    bench: &'static str,
    backend: String,
    params: Map<String, Value>,
    samples: usize,
    p50: f64,
    p90: f64,
    p99: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mem_bytes_per_sandbox: Option<f64>,
    /// Decode only: total time relative to the null backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_to_null: Option<f64>,
}

impl Report {
    fn new(bench: &'static str, backend: BackendKind, params: Value, st: Stats) -> Self {
        Report {
            bench,
            backend: backend.name().into(),
            params: match params {
                Value::Object(m) => m,
                _ => Map::new(),
            },
            samples: st.samples,
            p50: st.p50,
            p90: st.p90,
            p99: st.p99,
            mem_bytes_per_sandbox: None,
            relative_to_null: None,
        }
    }

    fn csv(&self) -> String {
        let params: Vec<String> = self
            .params
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}"),
                v => format!("{k}={v}"),
            })
            .collect();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "bench,backend,params,samples,p50,p90,p99,mem_bytes_per_sandbox,relative_to_null\n{},{},\"{}\",{},{},{},{},{},{}",
            self.bench,
            self.backend,
            params.join(";"),
            self.samples,
            self.p50,
            self.p90,
            self.p99,
            opt(self.mem_bytes_per_sandbox),
            opt(self.relative_to_null)
        )
    }
}

/// Outcome of a run: the report and the failed assertions, if checked.
type Outcome = Result<(Report, Vec<String>), sandcage::Error>;

fn transfer_latency(backend: Backend, sync: Sync, iters: usize, warmup: usize, check: bool, region: usize) -> Outcome {
    let kind = backend.kind();
    let st = measure::stats(&measure::empty_call_latency(kind, sync.mode(), region, iters, warmup)?);
    let sync_name = match sync {
        Sync::Spin => "spin",
        Sync::Event => "event",
    };
    let report = Report::new(
        "transfer-latency",
        kind,
        json!({"sync": sync_name, "iters": iters, "warmup": warmup, "region_size": region}),
        st,
    );
    let mut failed = Vec::new();
    if check {
        // Compare against the configurations this one is ordered against.
        let p50 = |k, s| -> Result<f64, sandcage::Error> {
            Ok(measure::stats(&measure::empty_call_latency(k, s, region, iters, warmup)?).p50)
        };
        let null = p50(BackendKind::NullDirect, SyncMode::Event)?;
        match (backend, sync) {
            (Backend::Null, _) => {}
            (Backend::Emusfi, _) => {
                if st.p50 > 20.0 * null {
                    failed.push(format!("emusfi p50 {:.0} > 20 x null p50 {null:.0}", st.p50));
                }
            }
            (Backend::Process, Sync::Spin) => {
                if st.p50 <= null {
                    failed.push(format!("process-spin p50 {:.0} <= null p50 {null:.0}", st.p50));
                }
            }
            (Backend::Process, Sync::Event) => {
                let spin = p50(BackendKind::Process, SyncMode::Spin)?;
                if st.p50 <= spin || spin <= null {
                    failed.push(format!("ordering null {null:.0} < spin {spin:.0} < event {:.0} violated", st.p50));
                }
                if st.p50 < 3.0 * spin {
                    failed.push(format!("event/spin = {:.2} < 3", st.p50 / spin));
                }
            }
        }
    }
    Ok((report, failed))
}

fn creation(backend: Backend, count: usize, check: bool, region: usize) -> Outcome {
    let kind = backend.kind();
    let st = measure::stats(&measure::creation_times(kind, region, count, 3)?);
    let report = Report::new("creation", kind, json!({"count": count, "region_size": region}), st);
    let mut failed = Vec::new();
    let bound_ms = match backend {
        Backend::Process => Some(50.0),
        Backend::Emusfi => Some(5.0),
        Backend::Null => None,
    };
    if let (true, Some(ms)) = (check, bound_ms) {
        if st.p50 > ms * 1e6 {
            failed.push(format!("median creation {:.3} ms > {ms} ms", st.p50 / 1e6));
        }
    }
    Ok((report, failed))
}

fn scaling(backend: Backend, k: usize, image: &Path, check: bool, region: usize) -> Outcome {
    let data =
        std::fs::read(image).map_err(|e| sandcage::Error::Config(format!("{}: {e}", image.display())))?;
    let r = measure::scaling_run(backend.kind(), region, k, &data)?;
    let mut report = Report::new(
        "scaling",
        backend.kind(),
        json!({"sandboxes": k, "threads": r.threads, "image": image.display().to_string(), "region_size": region}),
        measure::stats(&r.decode_ns),
    );
    report.mem_bytes_per_sandbox = Some(r.mem_bytes_per_sandbox);
    let mut failed = Vec::new();
    if check {
        if !r.all_correct {
            failed.push("a decode differed from the reference".into());
        }
        if r.max_increment_deviation > 0.25 {
            failed.push(format!(
                "memory increment deviates {:.0}% from the per-sandbox mean",
                r.max_increment_deviation * 100.0
            ));
        }
    }
    Ok((report, failed))
}

fn decode(backend: Backend, corpus: &Path, rounds: usize, check: bool, region: usize) -> Outcome {
    let t = measure::decode_corpus(backend.kind(), region, corpus, rounds)?;
    let mut report = Report::new(
        "decode",
        backend.kind(),
        json!({"corpus": corpus.display().to_string(), "files": t.files, "rounds": rounds, "region_size": region}),
        measure::stats(&t.decode_ns),
    );
    report.relative_to_null = Some(t.total_ns / t.null_total_ns);
    let mut failed = Vec::new();
    if check && !t.all_correct {
        failed.push("a decode differed from the reference".into());
    }
    Ok((report, failed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let region = match measure::region_size_from_env() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = match &cli.cmd {
        Cmd::TransferLatency {
            backend,
            sync,
            iters,
            warmup,
        } => transfer_latency(*backend, *sync, *iters as usize, *warmup as usize, cli.assert, region),
        Cmd::Creation { backend, count } => creation(*backend, *count as usize, cli.assert, region),
        Cmd::Scaling {
            sandboxes,
            image,
            backend,
        } => scaling(*backend, *sandboxes as usize, image, cli.assert, region),
        Cmd::Decode {
            backend,
            corpus,
            rounds,
        } => decode(*backend, corpus, *rounds as usize, cli.assert, region),
    };
    match outcome {
        Ok((report, failed)) => {
            if cli.csv {
                println!("{}", report.csv());
            } else {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            }
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &failed {
                    eprintln!("bench: assertion failed: {f}");
                }
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}
