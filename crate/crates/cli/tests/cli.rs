use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use stepwise_cli::ExperimentConfig;
use stepwise_core::datapipe::{load_dataset, DatasetPaths};
use stepwise_core::encoders::EncoderKind;
use stepwise_core::model::Embedding;
use stepwise_core::trainer::Checkpoint;
use tempfile::TempDir;

fn stepwise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepwise")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn smoke_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
[data]
dir = "{data}"

[data.synthetic]
n_stays = 50
t = 16
k = 2
feats_per_group = 3

[model]
embed_dim = 8
embed_hidden = 8
token_dim = 8
agg_depth = 1
agg_dim = 8
backbone = "gru"
hidden_dim = 8
dropout = 0.0
attention_dropout = 0.0

[train]
learning_rate = 1e-3
batch_size = 16
max_epochs = 3
seed = 7

[output]
dir = "{out}"
{extra}
"#,
        data = dir.join("data").display(),
        out = dir.join("run").display(),
    );
    let path = dir.join("smoke.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generated() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke_config(tmp.path(), "");
    ok(stepwise(&["generate", "--config", s(&cfg)]));
    (tmp, cfg)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(str::to_string).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()));
    rows
}

#[test]
fn generate_is_seeded_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = ok(stepwise(&["generate", "--config", s(&cfg), "--out", s(&a)]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("prevalence"));
    ok(stepwise(&["generate", "--config", s(&cfg), "--out", s(&b)]));
    for f in ["data.csv", "labels.csv", "splits.csv", "groups.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ds = load_dataset(&DatasetPaths::in_dir(&a, true), 1.0).unwrap();
    assert_eq!(ds.stays.len(), 50);
    assert_eq!(ds.grouping.unwrap().len(), 2);

    let c = tmp.path().join("c");
    ok(stepwise(&["generate", "--config", s(&cfg), "--out", s(&c), "--seed", "3"]));
    assert_ne!(std::fs::read(a.join("data.csv")).unwrap(), std::fs::read(c.join("data.csv")).unwrap());
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("c.toml");
    std::fs::write(&path, "[train]\nseed = 1\n").unwrap();
    let out = stepwise(&["generate", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data"), "{}", stderr(&out));

    std::fs::write(&path, "[data]\ndir = \"x\"\n[model]\nheads_count = 3\n").unwrap();
    let out = stepwise(&["train", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("heads_count"), "{}", stderr(&out));

    assert_eq!(stepwise(&["train", "--config", s(&tmp.path().join("absent.toml"))]).status.code(), Some(2));
    assert_eq!(stepwise(&["evaluate", "--checkpoint", "x", "--split", "dev"]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke_config(tmp.path(), "");
    let out = stepwise(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    // grouping defaults to the data directory's groups.csv, which is absent too
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let cfg = smoke_config(tmp.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("[model]", "[model]\ngrouping = \"none\"");
    std::fs::write(&cfg, text).unwrap();
    let out = stepwise(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn invalid_grouping_is_a_partition_error_before_training() {
    let (tmp, cfg) = generated();
    let groups = tmp.path().join("bad_groups.csv");
    // covers only two of six features
    std::fs::write(&groups, "feature,group\ng0_f0,a\ng0_f1,b\n").unwrap();
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("[model]", &format!("[model]\ngrouping = \"{}\"", groups.display()));
    std::fs::write(&cfg, text).unwrap();
    let start = Instant::now();
    let out = stepwise(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("partition"), "{}", stderr(&out));
    assert!(!tmp.path().join("run").exists());
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn smoke_train_evaluate_explain() {
    let (tmp, cfg) = generated();
    let start = Instant::now();
    let out = ok(stepwise(&["train", "--config", s(&cfg)]));
    assert!(start.elapsed() < Duration::from_secs(60));
    assert!(String::from_utf8_lossy(&out.stdout).contains("best epoch"));
    let run = tmp.path().join("run");
    let ckpt = run.join("checkpoint.bin");
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.train.seed, 7);
    let history = csv_rows(&run.join("history.csv"));
    assert_eq!(history[0], ["epoch", "train_loss", "val_loss", "val_metric"]);
    assert_eq!(history.len(), 4);
    // the resolved config reproduces the run
    ExperimentConfig::load(&run.join("config.toml")).unwrap();

    let eval_dir = tmp.path().join("eval");
    let args = ["evaluate", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--split", "val", "--out", s(&eval_dir)];
    ok(stepwise(&args));
    let metrics = csv_rows(&eval_dir.join("metrics_val.csv"));
    assert_eq!(metrics[0], ["split", "metric", "value", "n", "seed"]);
    let names: Vec<&str> = metrics[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(names, ["loss", "auprc", "auroc"]);
    assert!(metrics[1..].iter().all(|r| r[4] == "7"));
    let first = std::fs::read(eval_dir.join("metrics_val.csv")).unwrap();
    ok(stepwise(&args));
    assert_eq!(std::fs::read(eval_dir.join("metrics_val.csv")).unwrap(), first);

    let explain_dir = tmp.path().join("explain");
    let ds = load_dataset(&DatasetPaths::in_dir(&tmp.path().join("data"), false), 1.0).unwrap();
    let stay = ds.stays.iter().find(|st| st.split == stepwise_core::datapipe::Split::Test).unwrap().id.clone();
    ok(stepwise(&[
        "explain",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&tmp.path().join("data")),
        "--stays",
        &stay,
        "--heads",
        "max",
        "--out",
        s(&explain_dir),
    ]));
    let between = csv_rows(&explain_dir.join("between.csv"));
    assert_eq!(between.len(), 1 + 2);
    let weights: f64 = between[1..].iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
    assert!(weights > 0.0 && weights <= 1.0 + 1e-9);
    assert!(explain_dir.join(format!("over_time_{stay}.csv")).exists());
    for svg in ["between.svg", &format!("over_time_{stay}.svg")] {
        let text = std::fs::read_to_string(explain_dir.join(svg)).unwrap();
        roxmltree::Document::parse(&text).unwrap();
    }
}

#[test]
fn identical_seeds_write_identical_checkpoints() {
    let (tmp, cfg) = generated();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(stepwise(&["train", "--config", s(&cfg), "--out", s(&a), "--seed", "5"]));
    ok(stepwise(&["train", "--config", s(&cfg), "--out", s(&b), "--seed", "5"]));
    let bytes = std::fs::read(a.join("checkpoint.bin")).unwrap();
    assert_eq!(bytes, std::fs::read(b.join("checkpoint.bin")).unwrap());
    assert_eq!(Checkpoint::load(&a.join("checkpoint.bin")).unwrap().train.seed, 5);
}

#[test]
fn linear_encoder_without_grouping_is_a_direct_embedding() {
    let (tmp, cfg) = generated();
    let text =
        std::fs::read_to_string(&cfg).unwrap().replace("[model]", "[model]\nencoder = \"linear\"\ngrouping = \"none\"");
    std::fs::write(&cfg, text).unwrap();
    ok(stepwise(&["train", "--config", s(&cfg)]));
    let ckpt = Checkpoint::load(&tmp.path().join("run/checkpoint.bin")).unwrap();
    assert!(matches!(&ckpt.model.embedding, Embedding::Direct(e) if e.kind == EncoderKind::Linear));
    assert!(ckpt.grouping.is_none());
}

#[test]
fn divergence_exits_with_4() {
    let (tmp, cfg) = generated();
    let text = std::fs::read_to_string(&cfg).unwrap().replace("learning_rate = 1e-3", "learning_rate = 1e300");
    std::fs::write(&cfg, text).unwrap();
    let out = stepwise(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(!tmp.path().join("run/checkpoint.bin").exists());
}

#[test]
fn sweep_rows_and_statistics() {
    let (tmp, cfg) = generated();
    let text = std::fs::read_to_string(&cfg).unwrap().replace("max_epochs = 3", "max_epochs = 1");
    std::fs::write(&cfg, text).unwrap();

    let one = tmp.path().join("one.toml");
    std::fs::write(&one, "\"model.encoder\" = [\"mlp\"]\n").unwrap();
    let out_one = tmp.path().join("sweep_one");
    ok(stepwise(&["sweep", "--config", s(&cfg), "--grid", s(&one), "--seeds", "0,1,2", "--out", s(&out_one)]));
    let rows = csv_rows(&out_one.join("sweep.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][..4], ["model.encoder", "runs", "loss_mean", "loss_std"]);
    assert_eq!(rows[1][1], "3");
    assert!(rows[1][3].parse::<f64>().unwrap() > 0.0);
    assert_eq!(csv_rows(&out_one.join("runs.csv")).len(), 4);

    let dup = tmp.path().join("sweep_dup");
    ok(stepwise(&["sweep", "--config", s(&cfg), "--grid", s(&one), "--seeds", "4,4,4", "--out", s(&dup)]));
    let rows = csv_rows(&dup.join("sweep.csv"));
    for col in (3..rows[0].len()).step_by(2) {
        assert_eq!(rows[1][col].parse::<f64>().unwrap(), 0.0, "{}", rows[0][col]);
    }

    let grid = tmp.path().join("grid.toml");
    std::fs::write(&grid, "\"model.encoder\" = [\"linear\", \"ftt\"]\n\"model.grouping\" = [\"none\", \"dataset\"]\n")
        .unwrap();
    let (seq, par) = (tmp.path().join("seq"), tmp.path().join("par"));
    ok(stepwise(&["sweep", "--config", s(&cfg), "--grid", s(&grid), "--seeds", "0", "--out", s(&seq)]));
    ok(stepwise(&["sweep", "--config", s(&cfg), "--grid", s(&grid), "--seeds", "0", "--out", s(&par), "--parallel"]));
    assert_eq!(csv_rows(&seq.join("sweep.csv")).len(), 5);
    assert_eq!(std::fs::read(seq.join("sweep.csv")).unwrap(), std::fs::read(par.join("sweep.csv")).unwrap());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["smoke.toml", "synthetic.toml"] {
        ExperimentConfig::load(&root.join(name)).unwrap();
    }
    stepwise_cli::sweep::Grid::load(&root.join("grid_embeddings.toml")).unwrap();
}
