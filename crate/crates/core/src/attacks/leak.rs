//! Scans guest memory for host addresses the guest should never learn.

use std::collections::HashSet;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::backend::BackendKind;
use crate::error::Error;
use crate::guest::{decode_in, format, DecodeOptions, GuestVariant};
use crate::memory::{Region, MIN_REGION_SIZE};
use crate::runtime::{Sandbox, SandboxConfig};
use crate::taint::Tainted;

#[derive(Debug, Clone, Default)]
pub struct LeakReport {
    pub sessions: usize,
    pub windows_scanned: u64,
    /// (session, guest offset, value) for every window that matched.
    pub hits: Vec<(usize, u32, u64)>,
}

/// Host addresses worth hiding: region bases and callback closures.
pub fn leak_targets(sandboxes: &[&Sandbox]) -> HashSet<u64> {
    let mut t = HashSet::new();
    for sb in sandboxes {
        t.insert(sb.region().base() as u64);
        t.extend(sb.callback_host_addrs().into_iter().map(|a| a as u64));
    }
    t.remove(&0);
    t
}

/// Every 8-byte window (any alignment) of the region equal to a target.
pub fn scan_region(region: &Region, targets: &HashSet<u64>) -> Result<(u64, Vec<(u32, u64)>), Error> {
    let mut bytes = vec![0u8; region.size()];
    region.read_bytes(0, &mut bytes)?;
    let mut hits = Vec::new();
    let mut windows = 0u64;
    for (off, w) in bytes.windows(8).enumerate() {
        windows += 1;
        let v = u64::from_le_bytes(w.try_into().unwrap());
        if targets.contains(&v) {
            hits.push((off as u32, v));
        }
    }
    Ok((windows, hits))
}

/// `sessions` randomized decode sessions, each followed by a full scan of
/// the guest region. Half the sessions run the address-probing guest.
pub fn run_leak_sessions(kind: BackendKind, sessions: usize, seed: u64) -> Result<LeakReport, Error> {
    let mut rng = StdRng::seed_from_u64(seed);
    // A second live sandbox whose base must not leak either.
    let neighbour = Sandbox::create(SandboxConfig::new(kind).region_size(MIN_REGION_SIZE))?;
    let mut report = LeakReport {
        sessions,
        ..LeakReport::default()
    };
    for s in 0..sessions {
        let variant = if rng.gen_bool(0.5) { GuestVariant::M6 } else { GuestVariant::Clean };
        let sb = Sandbox::create(SandboxConfig::new(kind).region_size(MIN_REGION_SIZE).guest(variant))?;
        // A live callback whose closure address is a target.
        let _probe = sb.register_callback(|_, (x,): (Tainted<u32>,)| Ok(x.verify(Ok::<u32, String>)?))?;
        for _ in 0..rng.gen_range(1..=3) {
            let (w, h, px) = format::random_image(&mut rng, 64, 64);
            let data = format::encode(&px, w, h).expect("well-formed image");
            let out = decode_in(&sb, &data, &DecodeOptions::default());
            if let Ok(img) = out.result {
                assert_eq!(img.pixels, px, "decode mismatch in leak session {s}");
            }
        }
        let targets = leak_targets(&[&sb, &neighbour]);
        let (windows, hits) = scan_region(sb.region(), &targets)?;
        report.windows_scanned += windows;
        report.hits.extend(hits.into_iter().map(|(o, v)| (s, o, v)));
        sb.destroy();
    }
    Ok(report)
}
