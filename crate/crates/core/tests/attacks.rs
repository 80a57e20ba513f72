use std::path::Path;

use sandcage::attacks::{
    run_freeze_race, run_leak_sessions, run_runtime_attacks, run_static_rejections, AttackOptions, CorpusOptions,
};
use sandcage::BackendKind;

#[test]
fn every_runtime_attack_is_blocked() {
    let report = run_runtime_attacks(&AttackOptions::default());
    println!("{}", report.to_text());
    assert_eq!(report.cases.len(), 16);
    assert!(report.all_passed());
    for kind in ["emusfi", "process"] {
        assert_eq!(report.case(&format!("{kind}/m1")).unwrap().outcome, "validation-error");
        assert_eq!(report.case(&format!("{kind}/m2")).unwrap().outcome, "bounds-violation");
        assert_eq!(report.case(&format!("{kind}/m3")).unwrap().outcome, "callback-violation");
        assert_eq!(report.case(&format!("{kind}/clean")).unwrap().outcome, "ok");
    }
    assert!(report.to_junit_xml().contains("failures=\"0\""));
}

#[test]
fn freeze_race_never_consumes_the_attacker_value() {
    for kind in [BackendKind::EmuSfi, BackendKind::Process] {
        let rep = run_freeze_race(kind, 300, 3).unwrap();
        assert!(rep.all_safe(), "{kind}: {:?}", rep.unsafe_runs);
    }
}

#[test]
fn no_host_addresses_in_guest_memory() {
    for kind in [BackendKind::EmuSfi, BackendKind::Process] {
        let rep = run_leak_sessions(kind, 6, 9).unwrap();
        assert!(rep.windows_scanned > 6 * ((1 << 20) - 8));
        assert!(rep.hits.is_empty(), "{kind}: {:?}", rep.hits);
    }
}

#[test]
fn static_corpus_rejects_breaches_and_accepts_fixes() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let work = crate_dir.join("../../target/corpus-check");
    std::fs::create_dir_all(&work).unwrap();
    let report = run_static_rejections(&CorpusOptions::for_crate(crate_dir, &work));
    println!("{}", report.to_text());
    assert_eq!(report.cases.len(), 20);
    assert!(report.all_passed());
}
