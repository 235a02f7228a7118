use std::path::Path;
use std::process::{Command, Output};

use amrlab::attribution::{attribute, AttributedLogit};
use amrlab::data::load_feature_file;
use amrlab::harness::evaluate;
use amrlab::model::MultimodalModel;

const CONFIG: &str = r#"
[data.synthetic]
num_classes = 3
train_samples = 120
val_samples = 45
modality_dims = [4, 3]
signal_scales = [3.0, 1.0]
noise_stds = [1.0, 1.0]
seed = 2

[model]
encoding_dim = 4
encoder_hidden = [6]
classifier_hidden = [6]

[train]
strategy = "naive"
epochs = 2
batch_size = 32
seed = 2

[amr]
enabled = true
ratios = [1.0, 1.0]

[matrix]
strategies = ["naive", "unimodal"]
amr = [false, true]

[output]
dir = "out"
attribution_dump = true
"#;

fn amrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amrlab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("c.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_then_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("gen");
    let o = amrlab(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train = load_feature_file(&out.join("train.amrdata")).unwrap();
    let val = load_feature_file(&out.join("val.amrdata")).unwrap();
    assert_eq!((train.len(), val.len()), (120, 45));
    assert_eq!(train.modality_dims(), vec![4, 3]);
    assert!(train.labels().iter().all(|&l| l < 3));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_classes"], 3);
}

#[test]
fn dry_run_validates_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("never");
    for cmd in ["train", "matrix", "generate"] {
        let o = amrlab(&[cmd, "--dry-run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("malformed", CONFIG.replace("epochs = 2", "epochs = two")),
        ("missing seed", CONFIG.replace("batch_size = 32\nseed = 2", "batch_size = 32")),
        ("unknown key", CONFIG.replace("[amr]", "[amr]\nlamda = 2.0")),
        (
            "amr on unimodal data",
            CONFIG
                .replace("modality_dims = [4, 3]", "modality_dims = [4]")
                .replace("signal_scales = [3.0, 1.0]", "signal_scales = [3.0]")
                .replace("noise_stds = [1.0, 1.0]", "noise_stds = [1.0]")
                .replace("ratios = [1.0, 1.0]", "ratios = [1.0]"),
        ),
        ("bad strategy", CONFIG.replace("\"naive\", \"unimodal\"", "\"naive\", \"magic\"")),
    ];
    for (name, text) in cases {
        let cfg = write_config(dir.path(), &text);
        let o = amrlab(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        if name == "missing seed" {
            assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
        }
        if name == "malformed" {
            assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));
        }
    }
    let o = amrlab(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    let o = amrlab(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG.replace(
        "[data.synthetic]",
        "[data.files]\ntrain = \"missing.amrdata\"\nval = \"missing.amrdata\"\n\n[unused]",
    );
    let start = text.find("[unused]").unwrap();
    let end = text.find("[model]").unwrap();
    let text = format!("{}{}", &text[..start], &text[end..]);
    let cfg = write_config(dir.path(), &text);
    let o = amrlab(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn matrix_with_seeds_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("m");
    let o = amrlab(&["matrix", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "3", "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    // Cells: naive off, naive on, unimodal m0, unimodal m1; three seeds each
    // plus one aggregate row per cell.
    let runs = rows.iter().filter(|r| &r[5] != "aggregate").count();
    let aggregates = rows.iter().filter(|r| &r[5] == "aggregate").count();
    assert_eq!((runs, aggregates), (12, 4));
    assert!(rows.iter().all(|r| &r[6] == "ok"));
    let seeds: std::collections::BTreeSet<String> =
        rows.iter().filter(|r| &r[5] != "aggregate").map(|r| r[5].to_string()).collect();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), vec!["2", "3", "4"]);
}

#[test]
fn train_outputs_and_attribution_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let gen = dir.path().join("gen");
    let run = dir.path().join("run");
    assert!(amrlab(&["generate", "--config", &cfg, "--out", gen.to_str().unwrap()]).status.success());
    let o = amrlab(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["attribution_split"], "val");
    assert_eq!(metrics["amr_enabled"], true);

    let dump = dir.path().join("attr.csv");
    let val_path = gen.join("val.amrdata");
    let o = amrlab(&[
        "attribution",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--data",
        val_path.to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&dump).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 45 * 2);
    for sample in rows.chunks(2) {
        let s: f64 = sample.iter().map(|r| r[3].parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() <= 1e-9);
    }
    let model = MultimodalModel::load(&run.join("model.ckpt")).unwrap();
    let val = load_feature_file(&val_path).unwrap();
    let report = evaluate(&model, &val, None).unwrap();
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains(&format!("dominance {}", report.dominance)), "{stdout}");
    // The in-run dump covers the same validation split.
    let inrun = std::fs::read_to_string(run.join("attribution.csv")).unwrap();
    let direct = attribute(&model, val.features(), AttributedLogit::Predicted, Some(val.labels())).unwrap();
    assert_eq!(inrun.lines().count(), 1 + direct.per_sample.numel());
    assert_eq!(inrun, text);
}

#[test]
fn attribution_rejects_mismatched_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let run = dir.path().join("run");
    assert!(amrlab(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]).status.success());
    let other = write_config(dir.path(), &CONFIG.replace("modality_dims = [4, 3]", "modality_dims = [4, 5]"));
    let gen = dir.path().join("gen");
    assert!(amrlab(&["generate", "--config", &other, "--out", gen.to_str().unwrap()]).status.success());
    let dump = dir.path().join("x.csv");
    let o = amrlab(&[
        "attribution",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--data",
        gen.join("val.amrdata").to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!dump.exists());
}

#[test]
fn seed_flag_changes_results_and_inputs_are_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let before = std::fs::read(&cfg).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(amrlab(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(amrlab(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "99"]).status.success());
    assert_ne!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(std::fs::read(&cfg).unwrap(), before);
}
