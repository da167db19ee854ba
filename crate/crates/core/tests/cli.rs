//! End-to-end runs of the `slotcomp` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slotcomp::config::RunConfig;
use slotcomp::scenegen::Dataset;
use slotcomp::trainer::{evaluate, load_checkpoint, MetricsReport};

const TINY: &str = r#"
seed = 3

[data]
n = 12

[data.gen]
height = 16
width = 16

[train]
batch_size = 4
steps = 4
lr = 1e-3
checkpoint_every = 2

[train.model.encoder]
arch = "cnn"
image_size = [16, 16]
width = 8
feature_dim = 16
slot_dim = 16
n_slots = 3
n_iters = 2

[train.model.denoiser]
width = 8
heads = 2
res_blocks = 1
patch = 2

[train.model.surrogate]
layers = 1
heads = 2
hidden = 16
patch = 2

[train.model.schedule]
t_steps = 100

[eval]
batch_size = 4

[probe]
hidden = 8
layers = 1
steps = 10
batch = 4

[ablation]
n_seeds = 1
rows = [
    { name = "baseline", prior = false, reg = false, shared_init = false },
    { name = "full", prior = true, reg = true, shared_init = true },
]
"#;

fn slotcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotcomp")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Self { _dir: dir, config: config.to_str().unwrap().to_string(), root }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_str().unwrap().to_string()
    }

    /// Run with `--config` prepended and assert success.
    fn ok(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", self.config.as_str()];
        all.extend_from_slice(args);
        let out = slotcomp(&all);
        assert_eq!(code(&out), 0, "{args:?} failed: {}", stderr(&out));
        out
    }

    fn status(&self, args: &[&str]) -> i32 {
        let mut all = vec!["--config", self.config.as_str()];
        all.extend_from_slice(args);
        code(&slotcomp(&all))
    }

    fn data(&self) -> String {
        let d = self.path("data");
        if !Path::new(&d).exists() {
            self.ok(&["generate-data", "--out", &d]);
        }
        d
    }
}

fn dir_bytes(dir: &str) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn exit_codes_follow_error_kind() {
    let ws = Workspace::new();
    assert_eq!(code(&slotcomp(&[])), 2);
    assert_eq!(code(&slotcomp(&["frobnicate"])), 2);
    assert_eq!(ws.status(&["generate-data", "--n", "0", "--out", &ws.path("x")]), 2);
    assert_eq!(code(&slotcomp(&["generate-data", "--n", "2"])), 2, "missing --out");
    let data = ws.data();
    assert_eq!(ws.status(&["train", "--data", &data, "--batch-size", "3", "--out", &ws.path("t")]), 2);
    assert_eq!(ws.status(&["train", "--data", &data, "--reg-variant", "both", "--out", &ws.path("t")]), 2);
    let bad = ws.path("bad.toml");
    fs::write(&bad, "[train]\nstep = 3\n").unwrap();
    assert_eq!(code(&slotcomp(&["--config", &bad, "generate-data", "--out", &ws.path("y")])), 2);
    // runtime failures
    assert_eq!(ws.status(&["train", "--data", &ws.path("missing"), "--out", &ws.path("t")]), 1);
    let junk = ws.path("junk.scck");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = slotcomp(&["eval", "--checkpoint", &junk, "--data", &data, "--out", &ws.path("e")]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("error"));
}

#[test]
fn generate_data_is_deterministic_and_logs_its_seed() {
    let ws = Workspace::new();
    let (a, b, c) = (ws.path("a"), ws.path("b"), ws.path("c"));
    let out = ws.ok(&["generate-data", "--n", "5", "--out", &a]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("seed = 3\n"));
    ws.ok(&["generate-data", "--n", "5", "--out", &b]);
    ws.ok(&["generate-data", "--n", "5", "--seed", "4", "--out", &c]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
    let resolved = RunConfig::load(&Path::new(&c).join("config.resolved.toml")).unwrap();
    assert_eq!(resolved.seed, 4);
    assert_eq!(Dataset::open(Path::new(&a)).unwrap().len(), 5);
}

#[test]
fn train_resumes_exactly_and_eval_matches_the_library() {
    let ws = Workspace::new();
    let data = ws.data();
    let (full, split) = (ws.path("full"), ws.path("split"));
    ws.ok(&["train", "--data", &data, "--out", &full]);
    ws.ok(&["train", "--data", &data, "--steps", "2", "--out", &split]);
    let out = ws.ok(&["train", "--data", &data, "--out", &split]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("resuming"));
    let read = |d: &str, f: &str| fs::read(Path::new(d).join(f)).unwrap();
    assert_eq!(read(&full, "losses.jsonl"), read(&split, "losses.jsonl"));
    assert_eq!(read(&full, "checkpoint.scck"), read(&split, "checkpoint.scck"));
    assert_eq!(String::from_utf8(read(&full, "losses.jsonl")).unwrap().lines().count(), 4);

    // a changed objective must not silently continue the old run
    assert_eq!(ws.status(&["train", "--data", &data, "--lr", "0.5", "--out", &split]), 2);
    ws.ok(&["train", "--data", &data, "--lr", "0.5", "--steps", "1", "--fresh", "--out", &split]);

    let ckpt = Path::new(&full).join("checkpoint.scck");
    let eval = ws.path("eval");
    ws.ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--overlays", "0,2", "--probe", "shape", "--out", &eval]);
    let cli: MetricsReport = serde_json::from_slice(&read(&eval, "metrics.json")).unwrap();
    let cfg = RunConfig::load(&Path::new(&eval).join("config.resolved.toml")).unwrap();
    let state = load_checkpoint(&ckpt).unwrap();
    let lib = evaluate(&state.model, &state.config, &Dataset::open(Path::new(&data)).unwrap(), &cfg.eval).unwrap();
    assert_eq!(cli.fg_ari, lib.fg_ari);
    assert_eq!(cli.miou, lib.miou);
    assert_eq!(cli.mbo, lib.mbo);
    assert_eq!(cli.losses, lib.losses);
    assert_eq!(cli.probes.len(), 1);
    for f in ["overlay_00000.png", "overlay_00002.png"] {
        assert!(Path::new(&eval).join(f).exists(), "{f}");
    }
    assert_eq!(ws.status(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--overlays", "99", "--out", &eval]), 2);
}

#[test]
fn compose_identity_is_the_reconstruction_and_is_deterministic() {
    let ws = Workspace::new();
    let data = ws.data();
    let run = ws.path("run");
    ws.ok(&["train", "--data", &data, "--steps", "1", "--out", &run]);
    let ckpt = Path::new(&run).join("checkpoint.scck").to_str().unwrap().to_string();
    let compose = |out: &str, swap: &str| {
        ws.status(&["compose", "--checkpoint", &ckpt, "--data", &data, "--a", "1", "--b", "2", "--swap", swap, "--sample-steps", "5", "--out", out])
    };
    let (x, y) = (ws.path("x"), ws.path("y"));
    assert_eq!(compose(&x, "a:*"), 0);
    assert_eq!(compose(&y, "a:*"), 0);
    let record: serde_json::Value = serde_json::from_slice(&fs::read(Path::new(&x).join("compose_1_2.json")).unwrap()).unwrap();
    assert_eq!(record["changed_pixels_vs_a"], 0);
    assert_eq!(record["from_a"], serde_json::json!([0, 1, 2]));
    assert_eq!(fs::read(Path::new(&x).join("compose_1_2.png")).unwrap(), fs::read(Path::new(&y).join("compose_1_2.png")).unwrap());
    assert_eq!(compose(&ws.path("z"), "a:0,2;b:1"), 0);
    assert_eq!(compose(&ws.path("z"), "a:3"), 2);
    assert_eq!(compose(&ws.path("z"), "c:0"), 2);
    assert_eq!(
        ws.status(&["compose", "--checkpoint", &ckpt, "--data", &data, "--a", "0", "--b", "50", "--out", &ws.path("z")]),
        2
    );
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let ws = Workspace::new();
    let data = ws.data();
    let val = ws.path("val");
    ws.ok(&["generate-data", "--n", "4", "--split", "val", "--seed", "9", "--out", &val]);
    let out = ws.path("ablate");
    ws.ok(&["ablate", "--data", &data, "--val", &val, "--steps", "2", "--out", &out]);
    let table = fs::read_to_string(Path::new(&out).join("ablation.md")).unwrap();
    assert!(table.contains("baseline") && table.contains("full"));
    let results: serde_json::Value = serde_json::from_slice(&fs::read(Path::new(&out).join("ablation.json")).unwrap()).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 2);
}
