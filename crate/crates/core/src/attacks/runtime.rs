//! Runtime attack cases: each malicious guest variant against each
//! isolating backend, with the outcome it must produce.

use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::SeedableRng;

use super::leak::{leak_targets, scan_region};
use super::{CaseResult, Report};
use crate::backend::BackendKind;
use crate::error::Error;
use crate::guest::codec::M5_ATTACK_SCANLINE;
use crate::guest::{decode_in, format, DecodeOptions, DecodeOutcome, GuestVariant};
use crate::memory::MIN_REGION_SIZE;
use crate::runtime::{Sandbox, SandboxConfig};

#[derive(Debug, Clone)]
pub struct AttackOptions {
    pub backends: Vec<BackendKind>,
    pub region_size: usize,
    /// Decodes per double-fetch case.
    pub freeze_runs: usize,
    pub seed: u64,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            backends: vec![BackendKind::EmuSfi, BackendKind::Process],
            region_size: MIN_REGION_SIZE,
            freeze_runs: 50,
            seed: 0x5eed,
        }
    }
}

/// One verdict: `Ok(outcome)` if blocked as expected.
type Verdict = Result<String, String>;

fn label(r: &Result<impl Sized, Error>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => e.label().into(),
    }
}

fn expect_error(out: &DecodeOutcome, allowed: &[&str]) -> Verdict {
    if !out.canaries_intact {
        return Err("host pixel canaries overwritten".into());
    }
    match &out.result {
        Err(e) if allowed.contains(&e.label()) => Ok(e.label().into()),
        Err(e) => Err(format!("unexpected {}: {e}", e.label())),
        Ok(_) => Err("decode succeeded".into()),
    }
}

fn test_image(rng: &mut StdRng) -> (u32, u32, Vec<u8>, Vec<u8>) {
    let (w, h, px) = format::random_image(rng, 48, 24);
    let data = format::encode(&px, w, h).expect("well-formed image");
    (w, h, px, data)
}

/// Checks one double-fetch run; `Ok` carries the outcome label.
pub(crate) fn judge_freeze_run(out: &DecodeOutcome, height: u32, px: &[u8]) -> Verdict {
    if !out.canaries_intact {
        return Err("host pixel canaries overwritten".into());
    }
    for &(frozen, used) in &out.scanlines {
        if used != frozen {
            return Err(format!("consumed {used}, frozen copy {frozen}"));
        }
        if used == M5_ATTACK_SCANLINE || used == 0 || used > height {
            return Err(format!("consumed attacker-influenced scanline {used:#x}"));
        }
    }
    match &out.result {
        Ok(img) if img.pixels == px => Ok("safe-frozen-value".into()),
        Ok(_) => Err("decoded pixels differ from the reference".into()),
        Err(e) if matches!(e.label(), "tamper-violation" | "validation-error") => Ok(e.label().into()),
        Err(e) => Err(format!("unexpected {}: {e}", e.label())),
    }
}

fn run_variant(kind: BackendKind, variant: GuestVariant, opts: &AttackOptions, rng: &mut StdRng) -> Verdict {
    let sb = Sandbox::create(SandboxConfig::new(kind).region_size(opts.region_size).guest(variant))
        .map_err(|e| format!("sandbox creation: {e}"))?;
    let dflt = DecodeOptions::default();
    let verdict = match variant {
        GuestVariant::Clean => {
            for _ in 0..3 {
                let (_, _, px, data) = test_image(rng);
                let out = decode_in(&sb, &data, &dflt);
                match out.result {
                    Ok(img) if img.pixels == px => {}
                    Ok(_) => return Err("clean decode differs from the reference".into()),
                    Err(e) => return Err(format!("clean decode failed: {e}")),
                }
            }
            let v = sb.violations();
            if v.is_empty() {
                Ok("ok".into())
            } else {
                Err(format!("violations on a clean guest: {v:?}"))
            }
        }
        GuestVariant::M1 => expect_error(&decode_in(&sb, &test_image(rng).3, &dflt), &["validation-error"]),
        GuestVariant::M2 => expect_error(&decode_in(&sb, &test_image(rng).3, &dflt), &["bounds-violation"]),
        GuestVariant::M3 => expect_error(&decode_in(&sb, &test_image(rng).3, &dflt), &["callback-violation"]),
        GuestVariant::M4 => expect_error(
            &decode_in(&sb, &test_image(rng).3, &dflt),
            &["callback-violation", "guest-abort"],
        ),
        GuestVariant::M5 => {
            let mut seen = Vec::new();
            for _ in 0..opts.freeze_runs.max(1) {
                let (_, h, px, data) = test_image(rng);
                let racy = DecodeOptions {
                    race_pause: Some(FREEZE_RACE_PAUSE),
                    ..DecodeOptions::default()
                };
                let o = judge_freeze_run(&decode_in(&sb, &data, &racy), h, &px)?;
                if !seen.contains(&o) {
                    seen.push(o);
                }
            }
            Ok(seen.join("|"))
        }
        GuestVariant::M6 => {
            let (_, _, px, data) = test_image(rng);
            let _probe = sb
                .register_callback(|_, (): ()| Ok(()))
                .map_err(|e| format!("probe callback: {e}"))?;
            let out = decode_in(&sb, &data, &dflt);
            match &out.result {
                Ok(img) if img.pixels != px => return Err("decoded pixels differ from the reference".into()),
                Ok(_) => {}
                Err(e) => return Err(format!("decode failed: {e}")),
            }
            let (_, hits) = scan_region(sb.region(), &leak_targets(&[&sb])).map_err(|e| e.to_string())?;
            if hits.is_empty() {
                Ok("no-host-address".into())
            } else {
                Err(format!("{} host-address windows, first at {:#x}", hits.len(), hits[0].0))
            }
        }
        GuestVariant::M7 => {
            // Two decodes with distinct client tags; the guest replays the
            // first tag into the second.
            let mut confused = 0;
            for client in [0x1000_0001u32, 0x1000_0002, 0x1000_0003] {
                let (_, _, px, data) = test_image(rng);
                let opts = DecodeOptions {
                    client: Some(client),
                    ..DecodeOptions::default()
                };
                let out = decode_in(&sb, &data, &opts);
                match &out.result {
                    Ok(img) if img.pixels == px => {}
                    Ok(_) => return Err("decode under a foreign client tag produced output".into()),
                    Err(Error::ContextViolation(_)) => confused += 1,
                    Err(e) => return Err(format!("unexpected {}: {e}", e.label())),
                }
            }
            if confused > 0 {
                Ok("context-violation".into())
            } else {
                Err("the tag swap was never detected".into())
            }
        }
    };
    // Whatever the guest did, the host process is still here to check
    // that teardown works.
    sb.destroy();
    verdict
}

/// Every variant (the clean control included) on every configured backend.
pub fn run_runtime_attacks(opts: &AttackOptions) -> Report {
    let mut report = Report::new("runtime-attacks");
    let mut rng = StdRng::seed_from_u64(opts.seed);
    for &kind in &opts.backends {
        for variant in GuestVariant::ALL {
            let start = Instant::now();
            let verdict = run_variant(kind, variant, opts, &mut rng);
            let (passed, outcome, detail) = match verdict {
                Ok(o) => (true, o, String::new()),
                Err(d) => (false, "not-blocked".to_string(), d),
            };
            report.cases.push(CaseResult {
                name: format!("{}/{}", kind, variant),
                passed,
                outcome,
                detail,
                duration: start.elapsed(),
            });
        }
    }
    report
}

/// Host pause inside each check/use window during the freeze race.
pub const FREEZE_RACE_PAUSE: Duration = Duration::from_micros(100);

#[derive(Debug, Clone, Default)]
pub struct FreezeReport {
    pub runs: usize,
    pub safe: usize,
    pub tamper: usize,
    pub validation: usize,
    /// Runs where the host consumed something other than the frozen copy.
    pub unsafe_runs: Vec<String>,
}

impl FreezeReport {
    pub fn all_safe(&self) -> bool {
        self.unsafe_runs.is_empty() && self.safe + self.tamper + self.validation == self.runs
    }
}

/// `runs` decodes against the double-fetch mutator in one sandbox.
pub fn run_freeze_race(kind: BackendKind, runs: usize, seed: u64) -> Result<FreezeReport, Error> {
    let sb = Sandbox::create(SandboxConfig::new(kind).region_size(MIN_REGION_SIZE).guest(GuestVariant::M5))?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut rep = FreezeReport {
        runs,
        ..FreezeReport::default()
    };
    for n in 0..runs {
        let (w, h, px) = format::random_image(&mut rng, 16, 12);
        let data = format::encode(&px, w, h).expect("well-formed image");
        let opts = DecodeOptions {
            race_pause: Some(FREEZE_RACE_PAUSE),
            ..DecodeOptions::default()
        };
        let out = decode_in(&sb, &data, &opts);
        match judge_freeze_run(&out, h, &px) {
            Ok(o) => match o.as_str() {
                "tamper-violation" => rep.tamper += 1,
                "validation-error" => rep.validation += 1,
                _ => rep.safe += 1,
            },
            Err(d) => rep.unsafe_runs.push(format!("run {n}: {d} ({})", label(&out.result))),
        }
    }
    sb.destroy();
    Ok(rep)
}
