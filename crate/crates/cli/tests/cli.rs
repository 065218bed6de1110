use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use iern_core::evalkit::EvalReport;
use iern_core::experiment::ExperimentConfig;

const TINY: &str = r#"
method = "iern"
[optimizer]
epochs = 3
lr = 0.002
[data]
kind = "toy"
train_per_cell = 4
test_per_cell = 2
"#;

// Per-epoch totals of the tiny run above, seed 0.
const GOLDEN_TOTALS: [f64; 3] = [5.983767004960224, 5.534048655454643, 5.239119946147673];

fn iern(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iern")).current_dir(dir).args(args).output().expect("spawn iern")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn print_config_fills_defaults_and_round_trips() {
    let dir = setup();
    let o = iern(dir.path(), &["--config", "c.toml", "--seed", "9", "--print-config"]);
    assert!(o.status.success());
    let cfg = ExperimentConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.optimizer.epochs, 3);
    assert_eq!(cfg.optimizer.batch_size, ExperimentConfig::default().optimizer.batch_size);
    assert_eq!(cfg.weights, ExperimentConfig::default().weights);
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = setup();
    let p = dir.path();
    assert!(iern(p, &["--config", "c.toml", "--out", "o", "gen"]).status.success());
    let o = iern(p, &["--config", "c.toml", "--out", "o", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint/manifest.json", "train_log.jsonl", "config.toml"] {
        assert!(p.join("o").join(f).exists(), "{f}");
    }
    let o = iern(p, &["eval", "--checkpoint", "o/checkpoint", "--dataset", "o/test", "--out", "o"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(p.join("o/report.json")).unwrap()).unwrap();
    report.validate().unwrap();
    assert_eq!(report.total(), 24);
    assert!((0.0..=1.0).contains(&report.mean_acc));
}

#[test]
fn training_log_matches_golden_trajectory() {
    let dir = setup();
    let o = iern(dir.path(), &["--config", "c.toml", "--out", "o", "train"]);
    assert!(o.status.success());
    let log = fs::read_to_string(dir.path().join("o/train_log.jsonl")).unwrap();
    let totals: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["total"].as_f64().unwrap())
        .collect();
    assert_eq!(totals.len(), GOLDEN_TOTALS.len());
    for (got, want) in totals.iter().zip(GOLDEN_TOTALS) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn gen_is_deterministic() {
    let dir = setup();
    let p = dir.path();
    assert!(iern(p, &["--config", "c.toml", "--out", "a", "gen"]).status.success());
    assert!(iern(p, &["--config", "c.toml", "--out", "b", "gen"]).status.success());
    for split in ["train", "test"] {
        let a = fs::read(p.join("a").join(split).join("data.bin")).unwrap();
        let b = fs::read(p.join("b").join(split).join("data.bin")).unwrap();
        assert_eq!(a, b);
    }
    assert!(iern(p, &["--config", "c.toml", "--out", "c", "--seed", "1", "gen"]).status.success());
    assert_ne!(fs::read(p.join("a/train/data.bin")).unwrap(), fs::read(p.join("c/train/data.bin")).unwrap());
}

#[test]
fn user_errors_exit_nonzero() {
    let dir = setup();
    let p = dir.path();
    fs::write(p.join("bad.toml"), "[optimizer]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(iern(p, &["--config", "bad.toml", "gen"]).status.code(), Some(2));
    fs::write(p.join("neg.toml"), "[optimizer]\nlr = -1.0\n").unwrap();
    assert_eq!(iern(p, &["--config", "neg.toml", "train"]).status.code(), Some(2));
    assert_eq!(iern(p, &["--config", "missing.toml", "gen"]).status.code(), Some(2));
    assert_eq!(iern(p, &["eval", "--checkpoint", "nowhere", "--dataset", "nowhere"]).status.code(), Some(2));
}

#[test]
fn eval_rejects_incompatible_dataset() {
    let dir = setup();
    let p = dir.path();
    assert!(iern(p, &["--config", "c.toml", "--out", "o", "train"]).status.success());
    let specs = "[data]\nkind = \"specs\"\n".to_string()
        + "[data.train]\nimage = { height = 16, width = 16, channels = 1 }\nn_emotions = 2\nn_confounders = 2\ncooccurrence = [[2, 2], [2, 2]]\ndegradations = [{ kind = \"identity\" }, { kind = \"noise\", sigma = 0.5 }]\npattern_seed = 1\nnoise_seed = 0\n"
        + "[data.test]\nimage = { height = 16, width = 16, channels = 1 }\nn_emotions = 2\nn_confounders = 2\ncooccurrence = [[2, 2], [2, 2]]\ndegradations = [{ kind = \"identity\" }, { kind = \"noise\", sigma = 0.5 }]\npattern_seed = 1\nnoise_seed = 1\n";
    fs::write(p.join("two.toml"), specs).unwrap();
    let g = iern(p, &["--config", "two.toml", "--out", "d", "gen"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let o = iern(p, &["eval", "--checkpoint", "o/checkpoint", "--dataset", "d/test", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incompatible"));
}

#[test]
fn gradcheck_reports_every_term() {
    let dir = setup();
    let o = iern(dir.path(), &["gradcheck"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for term in ["l_e", "l_c", "l_r", "l_cb", "l_cls"] {
        assert!(out.lines().any(|l| l.starts_with(term)), "{term}");
    }
}

#[test]
fn oracle_passes() {
    let dir = setup();
    let o = iern(dir.path(), &["--out", "o", "oracle"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(dir.path().join("o/oracle.json").exists());
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        n += 1;
    }
    assert!(n >= 3);
}
