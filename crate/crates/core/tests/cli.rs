use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seed = 3
out_dir = "unused"
normalize = true
contact_sheets = true

[synthetic]
n_styles = 10
variants_per_style = 4
canvas = 64
seed = 1
eval_styles = 5

[train]
method = "pbcnet"
epochs = 30
batch_size = 4
queue_size = 8
temperature = 0.1
ema_momentum = 0.99

[train.optimizer]
lr = 0.02
momentum = 0.9
weight_decay = 1e-6

[encoder]
backbone = "tiny_cnn"
input_side = 16
embed_dim = 16
head = "none"
tiny_widths = [4, 8]

[clustering]
algorithm = "agglomerative_ward"
thresholds = [0.1, 0.3, 0.6, 1.0]
"#;

fn colorvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colorvar")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn jsonl_labels(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn run_writes_a_complete_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("run");
    let o = colorvar(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report = read_json(&out.join("report.json"));
    assert_eq!(report["seed"], 3);
    let eval = &report["report"];
    for key in ["cgacc", "ari", "fms", "cscore"] {
        assert!(eval[key].is_number(), "{key} missing");
    }
    // every eval image gets exactly one label
    let n_eval = report["n_eval"].as_u64().unwrap() as usize;
    assert_eq!(n_eval, 20);
    let truth = jsonl_labels(&out.join("truth.jsonl"));
    assert_eq!(truth.len(), n_eval);
    let sweep = read_json(&out.join("sweep.json"));
    let best = sweep["best_index"].as_u64().unwrap();
    let assignments = out.join("sweep").join(format!("{best:03}.assignments.jsonl"));
    assert_eq!(jsonl_labels(&assignments).len(), n_eval);
    assert!(out.join("contact_sheets").read_dir().unwrap().next().is_some());

    let manifest = read_json(&out.join("run_manifest.json"));
    let losses: Vec<f64> = manifest["epoch_losses"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(losses.len(), 30);
    assert!(losses.iter().all(|l| l.is_finite()));

    // the stored artifacts reproduce the selected report offline
    let scored = dir.path().join("offline.json");
    let o = colorvar(&[
        "evaluate",
        "--truth",
        out.join("truth.jsonl").to_str().unwrap(),
        "--assignments",
        assignments.to_str().unwrap(),
        "--out",
        scored.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&read_json(&scored), eval);
}

#[test]
fn stage_verbs_chain_into_a_clustering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", &SMALL.replace("epochs = 30", "epochs = 2"));
    let train_dir = dir.path().join("train");
    let o = colorvar(&["train", "--config", &cfg, "--out", train_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = train_dir.join("encoder.ckpt");
    assert!(ckpt.exists());

    let embed_dir = dir.path().join("embed");
    let o = colorvar(&["embed", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", embed_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let clustered = dir.path().join("labels.jsonl");
    let o = colorvar(&[
        "cluster",
        "--embeddings",
        embed_dir.join("embeddings").to_str().unwrap(),
        "--algorithm",
        "dbscan",
        "--eps",
        "0.5",
        "--out",
        clustered.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(jsonl_labels(&clustered).len(), 20);
}

#[test]
fn generate_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = colorvar(&["generate", "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = jsonl_labels(&out.join("manifest.jsonl"));
    assert!(!rows.is_empty());
    for row in &rows {
        let path = row["path"].as_str().expect("path field");
        assert!(out.join(path).exists() || Path::new(path).exists(), "{path}");
    }
}

#[test]
fn compare_of_identical_configs_gives_identical_columns() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("epochs = 30", "epochs = 2");
    let with_out = |name: &str| text.replace("out_dir = \"unused\"", &format!("out_dir = {:?}", dir.path().join(name)));
    let a = write_config(dir.path(), "a.toml", &with_out("run_a"));
    let b = write_config(dir.path(), "b.toml", &with_out("run_b"));
    let out = dir.path().join("cmp");
    let o = colorvar(&["compare", &a, &b, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("comparison.png").exists());
    let cmp = read_json(&out.join("comparison.json"));
    let cols = cmp["columns"].as_array().unwrap();
    assert_eq!(cols.len(), 2);
    assert_eq!(cols[0]["report"], cols[1]["report"]);
    assert!(dir.path().join("run_a").join("report.json").exists());
    assert!(dir.path().join("run_b").join("report.json").exists());
}

#[test]
fn ablation_grid_reports_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("epochs = 30", "epochs = 2")
        .replace("normalize = true", "normalize = true\nablation = [\"pbcnet\", \"pbcnet_horiz\", \"pbcnet_vert\"]");
    let cfg = write_config(dir.path(), "grid.toml", &text);
    let out = dir.path().join("grid");
    let o = colorvar(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("comparison.txt")).unwrap();
    for m in ["pbcnet", "pbcnet_horiz", "pbcnet_vert"] {
        assert!(table.contains(m), "{m} missing from\n{table}");
    }
}

#[test]
fn failures_exit_nonzero_with_stage_tag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &SMALL.replace("thresholds = [0.1, 0.3, 0.6, 1.0]", "thresholds = []"));
    let o = colorvar(&["run", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"), "{}", String::from_utf8_lossy(&o.stderr));

    let missing = dir.path().join("nope.toml");
    let o = colorvar(&["run", "--config", missing.to_str().unwrap()]);
    assert!(!o.status.success());
}
