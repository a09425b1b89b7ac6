use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
d_model = 8
n_heads = 2
n_text_layers = 1
n_image_layers = 1
n_decoder_layers = 1
d_ff = 16
max_len = 96
patch_dim = 4

[synth]
corpus_size = 16
n_anatomies = 3
grid_rows = 1
grid_cols = 3
tile = 2

[train]
epochs = 1
batch_size = 4
max_gen_len = 6

[data]
val_fraction = 0.25
test_fraction = 0.25
lambdas = [0.5]
"#;

fn anatomist(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anatomist"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_train_generate_evaluate_round_trip() {
    let (dir, _) = setup();
    let d = dir.path();
    ok(&anatomist(d, &["--config", "run.toml", "synth", "--out", "corpus.jsonl"]));
    assert_eq!(std::fs::read_to_string(d.join("corpus.jsonl")).unwrap().lines().count(), 16);

    ok(&anatomist(d, &["--config", "run.toml", "train", "--corpus", "corpus.jsonl", "--out", "ckpt.bin", "--ablation", "base_ap_dca"]));
    for f in ["ckpt.bin", "ckpt.bin.json", "ckpt.bin.metrics.jsonl", "ckpt.bin.manifest.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(d.join("ckpt.bin.metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for k in ["epoch", "gen", "con", "total", "val_r1"] {
        assert!(first.get(k).is_some(), "{k}");
    }
    let manifest = json(&d.join("ckpt.bin.manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);

    ok(&anatomist(d, &["--config", "run.toml", "generate", "--model", "ckpt.bin", "--in", "corpus.jsonl", "--out", "preds.jsonl", "--mode", "beam", "--beam-width", "2"]));
    let preds = std::fs::read_to_string(d.join("preds.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 16);

    let out = anatomist(d, &["evaluate", "--pred", "preds.jsonl", "--ref", "corpus.jsonl", "--out", "report.json"]);
    ok(&out);
    let report = json(&d.join("report.json"));
    assert_eq!(report["count"], 16);
    let r1 = report["mean"]["rouge1"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert!(d.join("report.json.manifest.json").exists());
}

#[test]
fn same_seed_same_corpus_bytes() {
    let (dir, _) = setup();
    let d = dir.path();
    for name in ["a.jsonl", "b.jsonl"] {
        ok(&anatomist(d, &["--config", "run.toml", "--seed", "5", "synth", "--out", name]));
    }
    ok(&anatomist(d, &["--config", "run.toml", "--seed", "6", "synth", "--out", "c.jsonl"]));
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    assert_eq!(json(&d.join("a.jsonl.manifest.json"))["seed"], 5);
}

#[test]
fn prompt_labels_sentences() {
    let (dir, _) = setup();
    let d = dir.path();
    std::fs::write(
        d.join("findings.jsonl"),
        "{\"id\": \"r1\", \"findings\": \"The heart is enlarged. There are no pleural effusions.\"}\n",
    )
    .unwrap();
    ok(&anatomist(d, &["prompt", "--in", "findings.jsonl", "--out", "prompted.jsonl"]));
    let line = std::fs::read_to_string(d.join("prompted.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    let labels: Vec<&str> = v["sentences"].as_array().unwrap().iter().map(|s| s["anatomy"].as_str().unwrap()).collect();
    assert_eq!(labels, ["heart", "normal observations"]);
    assert!(v["prompted"].as_str().unwrap().starts_with("heart: The heart is enlarged."));
}

#[test]
fn ablate_writes_six_rows() {
    let (dir, _) = setup();
    let d = dir.path();
    let out = anatomist(d, &["--config", "run.toml", "ablate", "--out", "table.json"]);
    ok(&out);
    let table = json(&d.join("table.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 6);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 7);
}

#[test]
fn exit_codes_distinguish_failures() {
    let (dir, _) = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = anatomist(d, &["--config", "bad.toml", "synth", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(d.join("broken.jsonl"), "not json\n").unwrap();
    let out = anatomist(d, &["train", "--corpus", "broken.jsonl", "--out", "m.bin"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    std::fs::write(d.join("diverge.toml"), TINY.replace("epochs = 1", "epochs = 1\nlr = 1e300")).unwrap();
    ok(&anatomist(d, &["--config", "run.toml", "synth", "--out", "corpus.jsonl"]));
    let out = anatomist(d, &["--config", "diverge.toml", "train", "--corpus", "corpus.jsonl", "--out", "m.bin"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = anatomist(d, &["gradcheck", "--seeds", "1", "--fault", "softmax"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("softmax"));
}

#[test]
fn gradcheck_passes_on_stock_build() {
    let (dir, _) = setup();
    let out = anatomist(dir.path(), &["gradcheck", "--seeds", "1", "--out", "grad.txt"]);
    ok(&out);
    assert!(dir.path().join("grad.txt.manifest.json").exists());
}
