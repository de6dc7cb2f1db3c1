#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparseiv::data::Dataset;
use sparseiv::montecarlo::{gen_dgp, DgpSpec};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sparseiv"));
    cmd.env_remove("SPARSEIV_THREADS").env("RUST_LOG", "error");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "failed: {}", stderr(o));
    serde_json::from_slice(&o.stdout).expect("valid JSON")
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes `y, d, z1..zp` to `dir/name` and returns its path.
pub fn write_dataset(dir: &Path, name: &str, data: &Dataset<f64>) -> PathBuf {
    let mut out = String::from("y,d");
    for j in 0..data.p() {
        out.push_str(&format!(",z{}", j + 1));
    }
    out.push('\n');
    for i in 0..data.n() {
        out.push_str(&format!("{:e},{:e}", data.y()[i], data.d_endog()[[i, 0]]));
        for j in 0..data.p() {
            out.push_str(&format!(",{:e}", data.f()[[i, j]]));
        }
        out.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, out).unwrap();
    path
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub const ROLES: &str = r#"{"outcome": "y", "endogenous": ["d"], "instruments": {"pattern": "^z[0-9]+$"}}"#;

/// Simulated sample from the cut-off design.
pub fn design_sample(n: usize, p: usize, s: usize, mu2: f64, seed: u64) -> Dataset<f64> {
    let mut spec = DgpSpec::cutoff(n, s, mu2);
    spec.p = p;
    gen_dgp(&spec, seed).unwrap().data
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
