//! Shared helpers for CLI-level tests: binary invocation and fixture files.

use std::path::Path;
use std::process::{Command, Output};

pub fn perfsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_perfsim"))
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn perfsim");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Registry JSON whose collectives cost `bytes / bytes_per_us` µs.
pub fn linear_registry_json(bytes_per_us: f64) -> serde_json::Value {
    let params = serde_json::json!({
        "t_s": 0.0, "m1": 1e-6, "m2": 1e-3,
        "sig_L": 0.0, "sig_x0": 0.0, "sig_k": 1.0, "sig_b": 0.0,
        "bw_max": bytes_per_us,
    });
    serde_json::json!({
        "comm": { "all_to_all": params, "all_reduce": params },
        "mlps": {},
    })
}

pub fn zero_overheads_json() -> serde_json::Value {
    serde_json::json!({
        "default": { "T1": 0.0, "T2": 0.0, "T3": 0.0, "T4": 0.0, "T5": 0.0 },
        "ops": {},
    })
}

pub fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}
