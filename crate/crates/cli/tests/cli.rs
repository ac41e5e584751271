use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use osr_core::network::load_checkpoint;
use osr_core::{init_params, Arch, DiscInput, Params};

fn osr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osr")).args(args).output().expect("run osr")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# small enough for a unit test
n_classes = 4
per_class_train = 12
per_class_test = 6
image_size = 16
input_size = 16
conv_channels = 4,8
n_closed = 2
n_support = 3
n_query = 3
n_open = 4
episodes = 3
n_evaluations = 2
sweep_steps = 4
";

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    let text = format!(
        "{TINY}report_dir = {}\ncheckpoint = {}\ngen_out = {}\n",
        dir.join("reports").display(),
        dir.join("model.ckpt").display(),
        dir.join("data").display()
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn self_test_passes_on_default_arch() {
    let o = osr(&["self-test"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let err: f64 = out
        .split("max relative error ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .expect("error figure in output");
    assert!(err <= 1e-6, "{out}");
}

#[test]
fn eval_without_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = osr(&["eval", "--checkpoint", missing.to_str().unwrap(), "--report_dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("ERROR 3: checkpoint not found"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    for args in [
        vec!["frobnicate"],
        vec!["train", "--no_such_key", "1"],
        vec!["train", "--episodes", "many"],
        vec!["train", "--tau", "0"],
        vec!["train", "--config", "/definitely/not/here.cfg"],
        vec!["train", "--workers", "0"],
    ] {
        let o = osr(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("ERROR 2: "), "{args:?}");
    }
}

#[test]
fn zero_episode_training_saves_init_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = osr(&["train", "--config", &cfg, "--episodes", "0", "--seed", "17"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let saved: Params<f64> = load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    let arch = Arch {
        input_size: 16,
        conv_channels: vec![4, 8],
        kernel_size: 3,
        disc_input: DiscInput::Distances,
        n_closed: 2,
    };
    assert_eq!(saved, init_params::<f64>(&arch, 17).unwrap());
    let csv = fs::read_to_string(dir.path().join("reports/loss.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1);
    assert!(csv.contains("# seed=17\n"));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = osr(&["train", "--config", &cfg, "--lr0", "1e200"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).lines().last().unwrap().starts_with("ERROR 4: non-finite"), "{}", stderr(&o));
}

#[test]
fn pipeline_on_generated_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = |args: &[&str]| {
        let o = osr(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    };
    run(&["gen-data", "--config", &cfg]);
    assert!(data.join("train/manifest.csv").exists());
    assert!(data.join("test/manifest.csv").exists());

    let data_arg = data.to_str().unwrap();
    let commands: [&[&str]; 4] = [&["train"], &["eval"], &["sweep"], &["dump-features"]];
    let reports = ["loss.csv", "metrics.json", "sweep.csv", "features.csv"];
    for c in commands {
        let mut a = c.to_vec();
        a.extend(["--config", &cfg, "--data_dir", data_arg, "--workers", "1"]);
        run(&a);
    }
    let first: Vec<Vec<u8>> = reports.iter().map(|r| fs::read(dir.path().join("reports").join(r)).unwrap()).collect();

    // refuses to overwrite without --force
    let o = osr(&["train", "--config", &cfg, "--data_dir", data_arg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));

    for c in commands {
        let mut a = c.to_vec();
        a.extend(["--config", &cfg, "--data_dir", data_arg, "--force"]);
        run(&a);
    }
    for (r, before) in reports.iter().zip(&first) {
        assert_eq!(&fs::read(dir.path().join("reports").join(r)).unwrap(), before, "{r} differs");
    }

    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("reports/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 0);
    assert_eq!(metrics["config"]["data_dir"], data_arg);
    assert_eq!(metrics["evaluations"].as_array().unwrap().len(), 2);
    let tp = metrics["tp"].as_u64().unwrap() + metrics["fn"].as_u64().unwrap();
    assert_eq!(tp, 2 * 2 * 6);

    let sweep = String::from_utf8(first[2].clone()).unwrap();
    assert_eq!(sweep.lines().filter(|l| !l.starts_with('#')).count(), 1 + 5);
}

#[test]
fn ablate_writes_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = osr(&["ablate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let js: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("reports/ablation.json")).unwrap()).unwrap();
    assert!(js["full"]["fpr"].is_number());
    assert!(js["without_entropy"]["fpr"].is_number());
    assert_eq!(js["config"]["command"], "ablate");
}

#[test]
fn help_lists_every_command() {
    let o = osr(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for c in osr_cli::COMMANDS {
        assert!(stdout(&o).contains(c));
    }
}
