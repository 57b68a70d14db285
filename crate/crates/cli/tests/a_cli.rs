use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rankfold::{CalibSet, CompressedEncoder, TensorArchive};
use tempfile::TempDir;

fn rankfold(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankfold")).args(args).output().expect("binary runs")
}

fn rankfold_env(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankfold"))
        .args(args)
        .env("RANKFOLD_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let o = rankfold(args);
    assert_eq!(code(&o), 0, "{args:?}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: TempDir::new().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    /// Small model, calibration clips, held-out clips and statistics.
    fn prepared(noise: &str) -> Self {
        let w = Self::new();
        let shape = ["--layers", "2", "--dmodel", "16", "--heads", "2", "--dff", "64", "--seqlen", "24"];
        ok(&[&["synth"], &shape[..], &["--seed", "3", "-o", &w.s("model.lrta")]].concat());
        let calib = ["--model", &w.s("model.lrta"), "--rank", "3", "--noise", noise, "--seed", "4"];
        ok(&[&["gen-calib"], &calib[..], &["--n", "16", "-o", &w.s("calib.lrta")]].concat());
        ok(&[&["gen-calib"], &calib[..], &["--n", "4", "--offset", "16", "-o", &w.s("heldout.lrta")]].concat());
        ok(&["calibrate", "--model", &w.s("model.lrta"), "--calib", &w.s("calib.lrta"), "-o", &w.s("stats.lrta")]);
        w
    }

    fn compress(&self, policy: &[&str], out: &str) -> String {
        let base = ["compress", "--model", &self.s("model.lrta"), "--stats", &self.s("stats.lrta"), "-o", &self.s(out)];
        ok(&[&base[..], policy].concat())
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let w = Workspace::new();
    let args = |out: &str| {
        vec!["synth", "--layers", "4", "--dmodel", "32", "--heads", "4", "--dff", "128", "--seqlen", "64", "--seed", "7", "-o"]
            .into_iter()
            .map(String::from)
            .chain([w.s(out)])
            .collect::<Vec<_>>()
    };
    let a = args("a.lrta");
    let b = args("b.lrta");
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(read(&w.path("a.lrta")), read(&w.path("b.lrta")));
}

#[test]
fn gen_calib_writes_the_requested_clips() {
    let w = Workspace::new();
    ok(&["gen-calib", "--n", "100", "--rank", "4", "--noise", "0", "-o", &w.s("c.lrta")]);
    let calib = CalibSet::<f64>::from_archive(&TensorArchive::read_file(w.path("c.lrta")).unwrap()).unwrap();
    assert_eq!(calib.n_calib(), 100);
    assert_eq!(calib.clip_shape(), (64, 32));
}

#[test]
fn calibrate_prints_spectra() {
    let w = Workspace::prepared("0.05");
    let out = ok(&["calibrate", "--model", &w.s("model.lrta"), "--calib", &w.s("calib.lrta"), "-o", &w.s("again.lrta")]);
    assert_eq!(out.lines().count(), 1 + 12);
    assert!(out.contains("1.fc2"));
    assert_eq!(read(&w.path("stats.lrta")), read(&w.path("again.lrta")));
}

#[test]
fn thread_count_does_not_change_statistics() {
    let w = Workspace::prepared("0.05");
    let args = |out: String| vec!["calibrate".into(), "--model".into(), w.s("model.lrta"), "--calib".into(), w.s("calib.lrta"), "-o".into(), out];
    for threads in ["1", "4"] {
        let a: Vec<String> = args(w.s(&format!("t{threads}.lrta")));
        let o = rankfold_env(&a.iter().map(String::as_str).collect::<Vec<_>>(), threads);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(read(&w.path("t1.lrta")), read(&w.path("t4.lrta")));
    let a: Vec<String> = args(w.s("bad.lrta"));
    assert_eq!(code(&rankfold_env(&a.iter().map(String::as_str).collect::<Vec<_>>(), "zero")), 2);
}

#[test]
fn mismatched_calibration_is_a_runtime_error() {
    let w = Workspace::prepared("0.05");
    ok(&["gen-calib", "--n", "2", "-o", &w.s("toy_calib.lrta")]);
    let o = rankfold(&["calibrate", "--model", &w.s("model.lrta"), "--calib", &w.s("toy_calib.lrta"), "-o", &w.s("x.lrta")]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("model input"));
}

#[test]
fn preset_b_equals_explicit_thresholds() {
    let w = Workspace::prepared("0.05");
    let a = w.compress(&["--preset", "b", "--granularity", "2"], "a.lrta");
    let b = w.compress(&["--theta-attn", "0.99", "--theta-mlp", "0.999", "--granularity", "2"], "b.lrta");
    assert_eq!(a, b);
    assert_eq!(read(&w.path("a.lrta")), read(&w.path("b.lrta")));
}

#[test]
fn policy_flags_are_validated() {
    let w = Workspace::prepared("0.05");
    let base = ["compress", "--model", &w.s("model.lrta"), "--stats", &w.s("stats.lrta"), "-o", &w.s("x.lrta")];
    for extra in [
        &["--preset", "b", "--theta-attn", "0.9", "--theta-mlp", "0.9"][..],
        &["--theta-attn", "0.9"],
        &[],
        &["--preset", "z"],
        &["--theta-attn", "1.5", "--theta-mlp", "0.9"],
        &["--preset", "a", "--granularity", "0"],
    ] {
        assert_eq!(code(&rankfold(&[&base[..], extra].concat())), 2, "{extra:?}");
    }
    assert_eq!(code(&rankfold(&["frobnicate"])), 2);
}

#[test]
fn theta_one_is_exact() {
    let w = Workspace::prepared("0.05");
    let table = w.compress(&["--theta-attn", "1", "--theta-mlp", "1"], "dense.lrta");
    assert_eq!(table.matches("dense").count(), 12);
    let out = ok(&[
        "verify", "--original", &w.s("model.lrta"), "--compressed", &w.s("dense.lrta"), "--tolerance", "1e-12", "--json",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["max_rel_err"], 0.0);
    assert_eq!(v["pass"], true);
}

#[test]
fn structured_pipeline_verifies() {
    let w = Workspace::prepared("0.05");
    w.compress(&["--preset", "a", "--granularity", "2"], "c.lrta");
    let out = ok(&[
        "verify", "--original", &w.s("model.lrta"), "--compressed", &w.s("c.lrta"), "--inputs", &w.s("heldout.lrta"),
        "--tolerance", "0.05",
    ]);
    assert!(out.contains("PASS"));
    assert_eq!(out.matches("path ").count(), 4);
}

#[test]
fn corrupted_factor_fails_verification() {
    let w = Workspace::prepared("0.05");
    w.compress(&["--theta-attn", "0.9", "--theta-mlp", "0.9", "--granularity", "2"], "c.lrta");
    let archive = TensorArchive::read_file(w.path("c.lrta")).unwrap();
    let compressed = CompressedEncoder::<f64>::from_archive(&archive).unwrap();
    let tap = compressed.decisions.iter().find(|d| d.rank().is_some()).expect("some layer is factorized").tap;
    let name = format!("layers.{}.{}.w_down", tap.layer, tap.site.name());
    let index = archive.tensors().iter().position(|t| t.name == name).unwrap();

    let bytes = read(&w.path("c.lrta"));
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload = (16 + manifest_len).div_ceil(64) * 64;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + manifest_len]).unwrap();
    let offset = manifest["tensors"][index]["offset"].as_u64().unwrap() as usize;
    let mut corrupt = bytes.clone();
    // high exponent byte of the first f64: scales the entry by 2^±256
    corrupt[payload + offset + 7] ^= 0x10;
    std::fs::write(w.path("bad.lrta"), corrupt).unwrap();

    let o = rankfold(&[
        "verify", "--original", &w.s("model.lrta"), "--compressed", &w.s("bad.lrta"), "--inputs", &w.s("heldout.lrta"),
        "--tolerance", "0.05",
    ]);
    assert_ne!(code(&o), 0);
}

#[test]
fn sweep_writes_csv_and_checks_monotonicity() {
    let w = Workspace::prepared("0.05");
    let base = ["sweep", "--model", &w.s("model.lrta"), "--stats", &w.s("stats.lrta"), "--granularity", "2"];
    let single = ok(&[&base[..], &["--theta-attn", "0.99", "--theta-mlp", "0.999"]].concat());
    let lines: Vec<&str> = single.lines().collect();
    assert_eq!(lines[0], "theta_attn,theta_mlp,params,macs,rel_err");
    assert_eq!(lines.len(), 2);

    let grid = ["--theta-attn", "0.99", "--theta-mlp", "0.995,0.996,0.997,0.998,0.999", "-o", &w.s("s.csv")];
    let o = rankfold(&[&base[..], &grid[..]].concat());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("params non-decreasing on 4/4"));
    let csv = std::fs::read_to_string(w.path("s.csv")).unwrap();
    let params: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(params.len(), 5);
    assert!(params.windows(2).all(|p| p[0] <= p[1]));

    assert_eq!(code(&rankfold(&[&base[..], &["--theta-attn", "--theta-mlp", "0.9"]].concat())), 2);
}

#[test]
fn report_emits_json_and_text() {
    let w = Workspace::prepared("0.05");
    w.compress(&["--preset", "c", "--granularity", "2"], "c.lrta");
    let text = ok(&["report", "--compressed", &w.s("c.lrta")]);
    assert!(text.contains("0.q_proj") && text.contains("params"));
    let json = ok(&["report", "--compressed", &w.s("c.lrta"), "--json"]);
    let r = rankfold::FlopsReport::from_json(&json).unwrap();
    assert_eq!(r.taps.len(), 12);
    assert_eq!(r.total_compressed_macs, r.linear_compressed_macs + r.attention_compressed_macs);
}

#[test]
fn pipeline_runs_end_to_end() {
    let w = Workspace::new();
    let out = ok(&[
        "pipeline", "--layers", "2", "--dmodel", "16", "--heads", "2", "--dff", "64", "--seqlen", "24", "--n", "12",
        "--rank", "3", "--noise", "0.05", "--preset", "a", "--granularity", "2", "--dir", &w.s("run"),
    ]);
    assert!(out.contains("PASS"));
    for f in ["model", "calib", "stats", "compressed", "heldout"] {
        assert!(w.path("run").join(format!("{f}.lrta")).exists());
    }
}
