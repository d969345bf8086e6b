use dctev::config::RunConfig;
use dctev_cli::{artifact_config, run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use std::path::{Path, PathBuf};
use std::process::Command;

const SMALL: [&str; 20] = [
    "--n_homes", "2",
    "--days", "2",
    "--history_len", "60",
    "--patch_len", "20",
    "--patch_stride", "10",
    "--d_model", "8",
    "--n_heads", "2",
    "--d_ffn", "16",
    "--n_layers", "1",
    "--horizon", "5",
];

fn dctev(args: &[&str]) -> i32 {
    run(std::iter::once("dctev").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL).chain(["--epochs", "1"]).collect()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Synthesizes data and trains a checkpoint on it.
    fn trained(&self) -> (PathBuf, PathBuf) {
        let data = self.path("meter.csv");
        let ckpt = self.path("model.ckpt");
        assert_eq!(dctev(&with_small(&["synth", "--out", p(&data)])), EXIT_OK);
        assert_eq!(
            dctev(&with_small(&["train", "--data", p(&data), "--out", p(&ckpt)])),
            EXIT_OK
        );
        (data, ckpt)
    }
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let ws = Workspace::new();
    let (a, b) = (ws.path("a.csv"), ws.path("b.csv"));
    assert_eq!(dctev(&with_small(&["synth", "--seed", "7", "--out", p(&a)])), EXIT_OK);
    assert_eq!(dctev(&with_small(&["synth", "--seed", "7", "--out", p(&b)])), EXIT_OK);
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let config = artifact_config(&a).unwrap();
    assert_eq!(config.seed, 7);
    assert_eq!(config.n_homes, 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dctev(&["train", "--out", "x.ckpt"]), EXIT_USAGE);
    assert_eq!(dctev(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(dctev(&["synth", "--out", "x.csv", "--no-such-flag", "1"]), EXIT_USAGE);
    assert_eq!(dctev(&[]), EXIT_USAGE);
}

#[test]
fn invalid_config_exits_2_before_writing() {
    let ws = Workspace::new();
    let out = ws.path("never.csv");
    assert_eq!(dctev(&["synth", "--out", p(&out), "--train_fraction", "1.5"]), EXIT_USAGE);
    assert_eq!(dctev(&["synth", "--out", p(&out), "--seed", "abc"]), EXIT_USAGE);
    assert_eq!(dctev(&["gradcheck", "--patch_stride", "7"]), EXIT_USAGE);
    assert!(!out.exists());
}

#[test]
fn missing_input_exits_1_naming_the_path() {
    let bin = env!("CARGO_BIN_EXE_dctev");
    let missing = "/nonexistent/meter-data.csv";
    let out = Command::new(bin)
        .args(["train", "--data", missing, "--out", "/tmp/unused.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing));
}

#[test]
fn config_file_with_overrides() {
    let ws = Workspace::new();
    let cfg = ws.path("run.toml");
    let base = RunConfig {
        seed: 11,
        n_homes: 1,
        days: 1,
        ..RunConfig::default()
    };
    std::fs::write(&cfg, base.to_toml_string()).unwrap();
    let out = ws.path("m.csv");
    assert_eq!(
        dctev(&["synth", "--config", p(&cfg), "--days", "2", "--out", p(&out)]),
        EXIT_OK
    );
    let got = artifact_config(&out).unwrap();
    assert_eq!(got, RunConfig { days: 2, ..base });
    assert_eq!(
        dctev(&["synth", "--config", p(&ws.path("missing.toml")), "--out", p(&out)]),
        EXIT_RUNTIME
    );
}

#[test]
fn train_evaluate_predict_and_sweep() {
    let ws = Workspace::new();
    let (data, ckpt) = ws.trained();
    let history = PathBuf::from(format!("{}.history.json", ckpt.display()));
    let trained_config = artifact_config(&ckpt).unwrap();
    assert_eq!(artifact_config(&history).unwrap(), trained_config);
    assert_eq!(artifact_config(&data).unwrap().horizon, 5);

    let report = ws.path("report.json");
    let table = ws.path("horizons.csv");
    assert_eq!(
        dctev(&[
            "evaluate", "--data", p(&data), "--checkpoint", p(&ckpt),
            "--out", p(&report), "--horizon-table", p(&table),
        ]),
        EXIT_OK
    );
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["f1", "auc", "ap", "acc", "mse", "precision", "recall"] {
        assert!(doc["report"].get(key).is_some(), "missing {key}");
    }
    assert_eq!(artifact_config(&report).unwrap(), trained_config);
    let rows = std::fs::read_to_string(&table).unwrap();
    assert_eq!(rows.lines().filter(|l| !l.starts_with('#')).count(), 1 + 5);
    assert_eq!(artifact_config(&table).unwrap(), trained_config);

    let preds = ws.path("preds.csv");
    assert_eq!(
        dctev(&["predict", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&preds)]),
        EXIT_OK
    );
    let text = std::fs::read_to_string(&preds).unwrap();
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "home_id,window_start,horizon_min,probability,label");
    // 2 homes × (2880 − 65 + 1) windows × 5 horizons
    assert_eq!(body.len() - 1, 2 * 2816 * 5);
    let first: Vec<&str> = body[1].split(',').collect();
    assert_eq!(first[2], "1");
    let prob: f64 = first[3].parse().unwrap();
    assert!(prob > 0.0 && prob < 1.0);

    let sweep = ws.path("sweep.csv");
    assert_eq!(
        dctev(&["sweep-threshold", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&sweep)]),
        EXIT_OK
    );
    let text = std::fs::read_to_string(&sweep).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 19);
    assert_eq!(artifact_config(&sweep).unwrap(), trained_config);

    // the network shape is fixed by the checkpoint
    assert_eq!(
        dctev(&["evaluate", "--data", p(&data), "--checkpoint", p(&ckpt), "--d_model", "16"]),
        EXIT_USAGE
    );
}

#[test]
fn predict_without_ev_column_omits_labels() {
    let ws = Workspace::new();
    let (data, ckpt) = ws.trained();
    let text = std::fs::read_to_string(&data).unwrap();
    let stripped: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let cut = l.rfind(',').unwrap();
            if l.starts_with("home_id") {
                format!("{l}\n")
            } else {
                format!("{},\n", &l[..cut])
            }
        })
        .collect();
    let bare = ws.path("bare.csv");
    std::fs::write(&bare, stripped).unwrap();
    let preds = ws.path("preds.csv");
    assert_eq!(
        dctev(&["predict", "--data", p(&bare), "--checkpoint", p(&ckpt), "--out", p(&preds)]),
        EXIT_OK
    );
    let text = std::fs::read_to_string(&preds).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "home_id,window_start,horizon_min,probability");
}

#[test]
fn sweep_history_writes_one_row_per_length() {
    let ws = Workspace::new();
    let data = ws.path("meter.csv");
    assert_eq!(dctev(&with_small(&["synth", "--out", p(&data)])), EXIT_OK);
    let out = ws.path("history.csv");
    let mut args = with_small(&["sweep-history", "--data", p(&data), "--out", p(&out)]);
    args.extend(["--sweep_history_lens", "60,120", "--train_window_stride", "20"]);
    assert_eq!(dctev(&args), EXIT_OK);
    let text = std::fs::read_to_string(&out).unwrap();
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "history_len,n_patches,f1,acc,auc,ap");
    assert!(body[1].starts_with("60,5,"));
    assert!(body[2].starts_with("120,11,"));
    assert_eq!(artifact_config(&out).unwrap().sweep_history_lens, vec![60, 120]);

    let mut bad = with_small(&["sweep-history", "--data", p(&data), "--out", p(&out)]);
    bad.extend(["--sweep_history_lens", "60,65"]);
    assert_eq!(dctev(&bad), EXIT_USAGE);
}

#[test]
fn gradcheck_and_bench_attention() {
    let ws = Workspace::new();
    let out = ws.path("grad.json");
    let mut args = with_small(&["gradcheck", "--out", p(&out)]);
    args.extend(["--gradcheck_max_coords", "100"]);
    assert_eq!(dctev(&args), EXIT_OK);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["pass"], true);
    assert!(doc["checks"].as_array().unwrap().len() > 20);

    let bench = ws.path("bench.json");
    assert_eq!(
        dctev(&["bench-attention", "--bench_repeats", "3", "--out", p(&bench)]),
        EXIT_OK
    );
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(doc["report"]["tokens_unpatched"], 180);
    assert_eq!(doc["report"]["tokens_patched"], 17);
    assert_eq!(artifact_config(&bench).unwrap(), RunConfig { bench_repeats: 3, ..RunConfig::default() });
}
