//! Drives the `ditmem` binary end to end on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ditmem"))
            .current_dir(self.dir.path())
            .env("DITMEM_DATA_DIR", self.path("data"))
            .env("SOURCE_DATE_EPOCH", "0")
            .arg("--config")
            .arg(fixture())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }

    fn bytes(&self, rel: &str) -> Vec<u8> {
        fs::read(self.path(rel)).unwrap()
    }

    fn with_bank(n: usize) -> Self {
        let s = Self::new();
        s.ok(&["bank", "build", "--synthetic", &n.to_string()]);
        s
    }
}

fn assert_run_manifest(v: &Value) {
    assert!(v["config_hash"].as_str().is_some_and(|h| h.len() == 16));
    assert_eq!(v["seed"], 42);
    assert_eq!(v["code_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn bank_build_stats_and_default_data_dir() {
    let s = Sandbox::with_bank(400);
    assert!(s.path("data/bank/manifest").exists());
    let stats: Value = serde_json::from_str(&s.ok(&["bank", "stats"])).unwrap();
    assert_eq!(stats["entries"], 400);
}

#[test]
fn bank_subset_replays_and_precompute_is_idempotent() {
    let s = Sandbox::with_bank(40);
    s.ok(&["bank", "subset", "--fraction", "0.05", "--seed", "42", "--out", "a.json"]);
    s.ok(&["bank", "subset", "--fraction", "0.05", "--seed", "42", "--out", "b.json"]);
    assert_eq!(s.bytes("a.json"), s.bytes("b.json"));
    assert_eq!(s.json("a.json")["ids"].as_array().unwrap().len(), 2);

    assert!(s.ok(&["bank", "precompute"]).contains(" 40 entries updated"));
    assert!(s.ok(&["bank", "precompute"]).contains(" 0 entries updated"));
    assert_eq!(serde_json::from_str::<Value>(&s.ok(&["bank", "stats"])).unwrap()["cached_tokens"], 40 * 4);
}

#[test]
fn training_writes_log_checkpoint_and_resumes_exactly() {
    let s = Sandbox::with_bank(20);
    s.ok(&["train", "--steps", "8", "--out", "straight"]);
    s.ok(&["train", "--steps", "4", "--out", "split"]);
    s.ok(&["train", "--steps", "8", "--resume", "--out", "split"]);

    let log = fs::read_to_string(s.path("straight/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 8);
    assert_eq!(s.bytes("straight/loss.csv"), s.bytes("split/loss.csv"));
    for entry in fs::read_dir(s.path("straight/checkpoint/blobs")).unwrap() {
        let name = entry.unwrap().file_name();
        let rel = format!("checkpoint/blobs/{}", name.to_string_lossy());
        assert_eq!(s.bytes(&format!("straight/{rel}")), s.bytes(&format!("split/{rel}")), "{rel}");
    }
    let m = s.json("straight/manifest.json");
    assert_run_manifest(&m);
    assert_eq!(m["details"]["steps"], 8);
}

#[test]
fn ablated_training_uses_the_lpf_only_encoder() {
    let s = Sandbox::with_bank(20);
    s.ok(&["train", "--ablate", "no-hpf", "--steps", "2", "--out", "run"]);
    let m = s.json("run/manifest.json");
    assert_eq!(m["details"]["variant"], "w/o HPF (LPF only)");
    let cfg = fs::read_to_string(s.path("run/config.toml")).unwrap();
    assert!(cfg.contains("enable_hpf = false") && cfg.contains("enable_lpf = true"));
}

#[test]
fn generation_is_replayable_and_records_retrieval() {
    let s = Sandbox::with_bank(20);
    let prompt = "a red ball moves left on a dark background";
    s.ok(&["generate", "--prompt", prompt, "--seed", "5", "--out", "a"]);
    s.ok(&["generate", "--prompt", prompt, "--seed", "5", "--out", "b"]);
    assert_eq!(s.bytes("a/latent.dmem"), s.bytes("b/latent.dmem"));
    assert_eq!(s.bytes("a/frames/frame_000.png"), s.bytes("b/frames/frame_000.png"));
    let m = s.json("a/manifest.json");
    assert_run_manifest(&m);
    let ids = m["details"]["retrieved_ids"].as_array().unwrap();
    assert_eq!(ids.len(), 3);
    let scores: Vec<f64> = m["details"]["retrieval_scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(m["details"]["frames"], 8);

    s.ok(&["generate", "--prompt", prompt, "--seed", "5", "--no-memory", "--out", "plain"]);
    assert_ne!(s.bytes("a/latent.dmem"), s.bytes("plain/latent.dmem"));
    assert_eq!(s.json("plain/manifest.json")["details"]["memory_tokens"], 0);
}

#[test]
fn steering_commands() {
    let s = Sandbox::new();
    fs::write(s.path("pos.txt"), "a ball falls down under gravity\na ball bounces off the floor\n").unwrap();
    fs::write(s.path("neg.txt"), "a ball\na ball\n").unwrap();
    s.ok(&["steer", "extract", "--pos", "pos.txt", "--neg", "neg.txt", "--out", "table"]);
    assert_run_manifest(&s.json("table/manifest.json"));

    let out = s.run(&["steer", "extract", "--pos", "neg.txt", "--neg", "neg.txt", "--out", "zero"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(s.json("zero/manifest.json")["details"]["zero"], true);

    let base = ["--prompt", "a ball", "--seed", "1", "--no-memory"];
    s.ok(&[&["generate"], &base[..], &["--out", "base"]].concat());
    for (band, alpha) in [("low", "0"), ("low", "1"), ("high", "1")] {
        let out = format!("{band}-{alpha}");
        s.ok(&[&["steer", "generate", "--table", "table", "--band", band, "--alpha", alpha], &base[..], &["--out", &out]].concat());
    }
    assert_eq!(s.bytes("low-0/latent.dmem"), s.bytes("base/latent.dmem"));
    assert_ne!(s.bytes("low-1/latent.dmem"), s.bytes("high-1/latent.dmem"));
    assert_ne!(s.bytes("low-1/latent.dmem"), s.bytes("base/latent.dmem"));
    assert_eq!(s.json("low-1/manifest.json")["details"]["injected_steps"].as_array().unwrap().len(), 4);
}

#[test]
fn ablation_emits_five_rows_in_order() {
    let s = Sandbox::with_bank(20);
    s.ok(&["ablate", "--steps", "2", "--out", "abl"]);
    let table = fs::read_to_string(s.path("abl/ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["3D", "+3D+HPF", "+3D+HPF+LPF", "+SPA", "+SA"]);
    assert_ne!(rows[3][1], rows[4][1]);
    assert_run_manifest(&s.json("abl/manifest.json"));
}

#[test]
fn report_plots_are_deterministic() {
    let s = Sandbox::with_bank(20);
    s.ok(&["train", "--steps", "5", "--out", "run"]);
    s.ok(&["report", "run"]);
    let first = s.bytes("run/plots/loss.svg");
    assert_eq!(s.json("run/plots/report.json")["loss_points"], 5);
    s.ok(&["report", "run"]);
    assert_eq!(first, s.bytes("run/plots/loss.svg"));
    assert!(s.path("run/plots/token_budget.svg").exists());

    fs::create_dir(s.path("empty")).unwrap();
    let out = s.run(&["report", "empty"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("loss.csv") && err.contains("ablation.csv") && err.contains("table/manifest.json"));
}

#[test]
fn exit_codes() {
    let s = Sandbox::new();
    assert_eq!(s.run(&["generate"]).status.code(), Some(1));
    assert_eq!(s.run(&["--set", "training.nope=1", "bank", "stats"]).status.code(), Some(1));
    assert_eq!(s.run(&["bank", "stats"]).status.code(), Some(2));
    assert_eq!(s.run(&["generate", "--prompt", "x"]).status.code(), Some(2));
    assert_eq!(s.run(&["--help"]).status.code(), Some(0));

    let s = Sandbox::with_bank(10);
    let out = s.run(&["--set", "training.lr=1e300", "train", "--steps", "4"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
