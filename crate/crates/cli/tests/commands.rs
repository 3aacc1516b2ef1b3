use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sloshnet::config::ModelConfig;
use sloshnet::data::decode_dataset;
use sloshnet::model::Model;
use sloshnet::trainer::encode_checkpoint;

const TINY: &str = r#"
height = 16
width = 16
frames = 4
channels = [4, 8]
heads = 2
ffn_mult = 2
fold = 2
embed_dim = 16
radius = 2
way = 2
queries = 2
episodes = 3
eval_tasks = 4
"#;

fn sloshnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sloshnet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        let d = Dir(tempfile::tempdir().unwrap());
        std::fs::write(d.path("tiny.toml"), TINY).unwrap();
        d
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_owned()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig { height: 16, width: 16, frames: 4, channels: vec![4, 8], heads: 2, ffn_mult: 2, fold: 2, embed_dim: 16, ..ModelConfig::default() }
}

fn train(d: &Dir, extra: &[&str]) -> Output {
    let (config, checkpoint) = (d.arg("tiny.toml"), d.arg("model.ckpt"));
    let mut args = vec!["train", "--config", &config, "--out-checkpoint", &checkpoint];
    args.extend_from_slice(extra);
    sloshnet(&args)
}

#[test]
fn gen_data_writes_requested_records() {
    let d = Dir::new();
    let o = sloshnet(&["gen-data", "--count", "100", "--seed", "3", "--out", &d.arg("a.bin")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("100 videos"));
    let videos = decode_dataset(&std::fs::read(d.path("a.bin")).unwrap()).unwrap();
    assert_eq!(videos.len(), 100);

    sloshnet(&["gen-data", "--count", "100", "--seed", "3", "--out", &d.arg("b.bin")]);
    assert_eq!(std::fs::read(d.path("a.bin")).unwrap(), std::fs::read(d.path("b.bin")).unwrap());

    let o = sloshnet(&["gen-data", "--count", "0", "--out", &d.arg("empty.bin")]);
    assert_eq!(code(&o), 0);
    assert!(decode_dataset(&std::fs::read(d.path("empty.bin")).unwrap()).unwrap().is_empty());
}

#[test]
fn gen_data_to_unwritable_path_is_usage_error() {
    let d = Dir::new();
    let o = sloshnet(&["gen-data", "--count", "1", "--out", &d.arg("missing/dir/a.bin")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let d = Dir::new();
    let o = train(&d, &["--metrics", &d.arg("m.csv")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.path("model.ckpt").exists());
    let csv = std::fs::read_to_string(d.path("m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let acc: f64 = stdout(&o).trim().strip_prefix("train accuracy ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn unknown_config_key_is_named() {
    let d = Dir::new();
    std::fs::write(d.path("bad.toml"), "moementum = 0.9\n").unwrap();
    let o = sloshnet(&["train", "--config", &d.arg("bad.toml"), "--out-checkpoint", &d.arg("x.ckpt")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("moementum"), "{}", stderr(&o));
}

#[test]
fn invalid_dimensions_are_config_errors() {
    let d = Dir::new();
    std::fs::write(d.path("bad.toml"), format!("{TINY}fold = 3\n").replace("fold = 2\n", "")).unwrap();
    let o = sloshnet(&["train", "--config", &d.arg("bad.toml"), "--out-checkpoint", &d.arg("x.ckpt")]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!d.path("x.ckpt").exists());
}

#[test]
fn zero_episodes_checkpoint_is_initialization() {
    let d = Dir::new();
    let o = train(&d, &["--episodes", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let init = encode_checkpoint(&Model::new(tiny_model()).unwrap()).unwrap();
    assert_eq!(std::fs::read(d.path("model.ckpt")).unwrap(), init);

    let o = sloshnet(&["inspect-alpha", "--config", &d.arg("tiny.toml"), "--checkpoint", &d.arg("model.ckpt")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("i,j,w_sum,w_gp_low,w_gp_high"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 1);
    for row in rows {
        for w in row.split(',').skip(2) {
            assert!((w.parse::<f64>().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn divergence_exits_with_three() {
    let d = Dir::new();
    let o = train(&d, &["--lr", "1e300"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

fn eval(d: &Dir, checkpoint: &Path) -> Output {
    sloshnet(&["eval", "--config", &d.arg("tiny.toml"), "--checkpoint", checkpoint.to_str().unwrap(), "--tasks", "5", "--seed", "4"])
}

#[test]
fn eval_prints_one_parseable_line() {
    let d = Dir::new();
    assert_eq!(code(&train(&d, &[])), 0);
    let a = eval(&d, &d.path("model.ckpt"));
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let line = stdout(&a);
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!((fields.len(), fields[0], fields[2]), (4, "accuracy", "stderr"));
    let acc: f64 = fields[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    fields[3].parse::<f64>().unwrap();
    assert_eq!(stdout(&eval(&d, &d.path("model.ckpt"))), line);
}

#[test]
fn bad_checkpoints_are_usage_errors() {
    let d = Dir::new();
    assert_eq!(code(&eval(&d, &d.path("nope.ckpt"))), 2);
    assert_eq!(code(&train(&d, &["--episodes", "0"])), 0);
    let mut bytes = std::fs::read(d.path("model.ckpt")).unwrap();
    bytes.truncate(bytes.len() - 5);
    std::fs::write(d.path("cut.ckpt"), &bytes).unwrap();
    let o = eval(&d, &d.path("cut.ckpt"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("format error"), "{}", stderr(&o));
    // The default configuration does not match the tiny checkpoint.
    let o = sloshnet(&["eval", "--checkpoint", &d.arg("model.ckpt"), "--tasks", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("version error"), "{}", stderr(&o));
}

#[test]
fn training_from_a_stored_dataset() {
    let d = Dir::new();
    let o = sloshnet(&["gen-data", "--count", "30", "--out", &d.arg("data.bin"), "--config", &d.arg("tiny.toml")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = train(&d, &["--dataset", &d.arg("data.bin")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let full = sloshnet(&["gen-data", "--count", "5", "--out", &d.arg("big.bin")]);
    assert_eq!(code(&full), 0);
    let o = train(&d, &["--dataset", &d.arg("big.bin")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_fails_by_tolerance() {
    let o = sloshnet(&["gradcheck", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.ends_with("PASS")));
    assert!(stdout(&o).contains("end_to_end"));
    let o = sloshnet(&["gradcheck", "--seed", "2", "--tolerance", "1e-12"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).contains("gradient check failed"));
}

#[test]
fn ablation_tables_have_their_rows() {
    let d = Dir::new();
    std::fs::write(d.path("abl.toml"), TINY.replace("episodes = 3", "episodes = 1").replace("eval_tasks = 4", "eval_tasks = 1")).unwrap();
    for (suite, rows) in [("tab3", 4), ("tab6", 7)] {
        let o = sloshnet(&["ablate", "--config", &d.arg("abl.toml"), "--suite", suite]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = stdout(&o);
        assert_eq!(text.lines().next(), Some("variant,accuracy,stderr"));
        assert_eq!(text.lines().count(), rows + 1, "{suite}");
    }
    let o = sloshnet(&["ablate", "--suite", "tab9"]);
    assert_eq!(code(&o), 2);
}
