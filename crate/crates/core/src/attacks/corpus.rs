//! Compile-failure harness. Each `reject/*.rs` program breaks the taint
//! discipline and must fail to build with the error code named in its
//! `//! expect: E....` line; each `accept/*.rs` twin applies the fix and
//! must build.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use super::{CaseResult, Report};

#[derive(Debug, Clone)]
pub struct CorpusOptions {
    /// Directory holding `reject/` and `accept/`.
    pub corpus: PathBuf,
    /// The sandcage crate the programs build against.
    pub crate_dir: PathBuf,
    /// Lock file to pin dependency versions (builds run offline).
    pub lockfile: Option<PathBuf>,
    /// Scratch project location; its `target/` is reused between runs.
    pub work_dir: PathBuf,
}

impl CorpusOptions {
    /// Layout of this repository.
    pub fn for_crate(crate_dir: &Path, work_dir: &Path) -> Self {
        let lock = crate_dir.join("../../Cargo.lock");
        CorpusOptions {
            corpus: crate_dir.join("corpus"),
            crate_dir: crate_dir.to_path_buf(),
            lockfile: lock.exists().then_some(lock),
            work_dir: work_dir.to_path_buf(),
        }
    }
}

struct Entry {
    bin: String,
    name: String,
    expect: Option<String>,
}

fn expected_code(src: &str) -> Option<String> {
    src.lines()
        .find_map(|l| l.trim().strip_prefix("//! expect:"))
        .map(|c| c.trim().to_string())
}

fn collect(dir: &Path, prefix: &str, bin_dir: &Path) -> std::io::Result<Vec<Entry>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rs"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let stem = f.file_stem().unwrap().to_string_lossy().to_string();
        let src = fs::read_to_string(&f)?;
        let bin = format!("{prefix}_{}", stem.replace('-', "_"));
        fs::write(bin_dir.join(format!("{bin}.rs")), &src)?;
        out.push(Entry {
            bin,
            name: format!("{prefix}/{stem}"),
            expect: expected_code(&src),
        });
    }
    Ok(out)
}

fn setup(opts: &CorpusOptions) -> std::io::Result<(Vec<Entry>, Vec<Entry>)> {
    let bin_dir = opts.work_dir.join("src/bin");
    if bin_dir.exists() {
        fs::remove_dir_all(&bin_dir)?;
    }
    fs::create_dir_all(&bin_dir)?;
    let manifest = format!(
        "[package]\nname = \"sandcage-corpus\"\nversion = \"0.0.0\"\nedition = \"2021\"\npublish = false\n\n\
         [dependencies]\nsandcage = {{ path = {:?} }}\n\n[workspace]\n",
        fs::canonicalize(&opts.crate_dir)?
    );
    fs::write(opts.work_dir.join("Cargo.toml"), manifest)?;
    if let Some(lock) = &opts.lockfile {
        fs::copy(lock, opts.work_dir.join("Cargo.lock"))?;
    }
    let reject = collect(&opts.corpus.join("reject"), "reject", &bin_dir)?;
    let accept = collect(&opts.corpus.join("accept"), "accept", &bin_dir)?;
    Ok((reject, accept))
}

fn check(opts: &CorpusOptions, bin: &str) -> std::io::Result<(bool, String)> {
    let cargo = std::env::var_os("CARGO").unwrap_or_else(|| "cargo".into());
    let out = Command::new(cargo)
        .current_dir(&opts.work_dir)
        .args(["check", "--offline", "--quiet", "--message-format=short", "--bin", bin])
        .env_remove("RUSTFLAGS")
        .env("CARGO_TARGET_DIR", opts.work_dir.join("target"))
        .output()?;
    Ok((out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned()))
}

fn first_error(stderr: &str) -> String {
    stderr
        .lines()
        .find(|l| l.contains("error"))
        .unwrap_or("")
        .trim()
        .to_string()
}

/// Builds every corpus program and judges the result.
pub fn run_static_rejections(opts: &CorpusOptions) -> Report {
    let mut report = Report::new("static-rejections");
    let (reject, accept) = match setup(opts) {
        Ok(e) => e,
        Err(e) => {
            report.cases.push(CaseResult {
                name: "setup".into(),
                passed: false,
                outcome: "io-error".into(),
                detail: e.to_string(),
                duration: Default::default(),
            });
            return report;
        }
    };
    for (entry, must_fail) in reject.iter().map(|e| (e, true)).chain(accept.iter().map(|e| (e, false))) {
        let start = Instant::now();
        let (passed, outcome, detail) = match check(opts, &entry.bin) {
            Err(e) => (false, "io-error".to_string(), e.to_string()),
            Ok((ok, stderr)) if must_fail => match (&entry.expect, ok) {
                (_, true) => (false, "compiled".into(), "expected a compile error".into()),
                (None, false) => (false, "no-expectation".into(), "missing `//! expect:` line".into()),
                (Some(code), false) => {
                    let tagged = format!("error[{code}]");
                    if stderr.contains(&tagged) {
                        (true, format!("rejected {code}"), first_error(&stderr))
                    } else {
                        (false, "wrong-error".into(), first_error(&stderr))
                    }
                }
            },
            Ok((true, _)) => (true, "compiled".into(), String::new()),
            Ok((false, stderr)) => (false, "rejected".into(), first_error(&stderr)),
        };
        report.cases.push(CaseResult {
            name: entry.name.clone(),
            passed,
            outcome,
            detail,
            duration: start.elapsed(),
        });
    }
    report
}
