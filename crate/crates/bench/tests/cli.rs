use std::path::Path;
use std::process::{Command, Output};

use sandcage::guest::format;
use serde_json::Value;

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .env_remove("SANDCAGE_REGION_SIZE")
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_image(path: &Path, w: u32, h: u32) {
    let px: Vec<u8> = (0..w * h).map(|i| (i * 7 % 251) as u8).collect();
    std::fs::write(path, format::encode(&px, w, h).unwrap()).unwrap();
}

#[test]
fn latency_report_schema() {
    let v = json(&bench(&["transfer-latency", "--backend", "emusfi", "--iters", "200", "--warmup", "10"]));
    assert_eq!(v["bench"], "transfer-latency");
    assert_eq!(v["backend"], "emusfi");
    assert_eq!(v["samples"], 200);
    assert_eq!(v["params"]["sync"], "event");
    assert_eq!(v["params"]["iters"], 200);
    let (p50, p90, p99) = (v["p50"].as_f64().unwrap(), v["p90"].as_f64().unwrap(), v["p99"].as_f64().unwrap());
    assert!(p50 > 0.0 && p50 <= p90 && p90 <= p99);
    assert!(v.get("mem_bytes_per_sandbox").is_none());
}

#[test]
fn every_backend_reports_the_same_sample_count() {
    for (backend, sync) in [("null", "event"), ("emusfi", "event"), ("process", "spin"), ("process", "event")] {
        let v = json(&bench(&[
            "transfer-latency", "--backend", backend, "--sync", sync, "--iters", "300", "--warmup", "20",
        ]));
        assert_eq!(v["samples"], 300, "{backend}/{sync}");
    }
}

#[test]
fn csv_output() {
    let out = bench(&["--csv", "creation", "--backend", "emusfi", "--count", "5"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("bench,backend,params,samples,p50,p90,p99"));
    assert!(lines[1].starts_with("creation,emusfi,\""));
    assert!(lines[1].contains("count=5"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bench(&["transfer-latency", "--backend", "emusfi", "--iters", "0"]).status.code(), Some(2));
    assert_eq!(bench(&["transfer-latency", "--backend", "wasm"]).status.code(), Some(2));
    assert_eq!(bench(&["scaling", "--sandboxes", "0", "--image", "x"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["creation", "--backend", "null", "--count", "1"])
        .env("SANDCAGE_REGION_SIZE", "12345")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SANDCAGE_REGION_SIZE"));
}

#[test]
fn region_size_comes_from_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["creation", "--backend", "emusfi", "--count", "2"])
        .env("SANDCAGE_REGION_SIZE", "1048576")
        .output()
        .unwrap();
    assert_eq!(json(&out)["params"]["region_size"], 1_048_576);
}

#[test]
fn runtime_errors_exit_1() {
    let out = bench(&["decode", "--backend", "emusfi", "--corpus", "/nonexistent/corpus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn scaling_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.rli");
    write_image(&img, 40, 30);
    write_image(&dir.path().join("b.rli"), 7, 3);
    let v = json(&bench(&["--assert", "scaling", "--sandboxes", "4", "--image", img.to_str().unwrap()]));
    assert_eq!(v["bench"], "scaling");
    assert_eq!(v["samples"], 4);
    assert!(v["mem_bytes_per_sandbox"].as_f64().unwrap() >= 0.0);

    let v = json(&bench(&[
        "--assert", "decode", "--backend", "process", "--corpus", dir.path().to_str().unwrap(), "--rounds", "2",
    ]));
    assert_eq!(v["params"]["files"], 2);
    assert_eq!(v["samples"], 4);
    assert!(v["relative_to_null"].as_f64().unwrap() > 0.0);
}
