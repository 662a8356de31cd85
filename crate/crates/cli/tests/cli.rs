use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[data]\nusers = 12\neval_users = 4\n[train]\nepochs = 1\n[eval]\nseeds = 0\n";

fn stmask(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmask"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn with_config(text: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.ini"), text).unwrap();
    dir
}

#[test]
fn missing_config_exits_with_2_and_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = stmask(&["run", "--config", "absent.ini"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent.ini"), "{}", stderr(&out));
}

#[test]
fn malformed_config_exits_with_2() {
    let dir = with_config("[train]\nepochs = many\n");
    let out = stmask(&["train", "--config", "run.ini"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epochs"));
}

#[test]
fn unsupported_precision_is_rejected() {
    let dir = with_config(TINY);
    let out = stmask(&["train", "--config", "run.ini", "--precision", "16"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_with_3_naming_an_array() {
    let dir = with_config(
        "[data]\nusers = 12\neval_users = 4\n[train]\nepochs = 2\nlearning_rate = 1e300\noptimizer = sgd\n",
    );
    let out = stmask(&["train", "--config", "run.ini", "--out", "run"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
    assert!(stderr(&out).contains('`'));
}

#[test]
fn unreadable_checkpoint_exits_with_2() {
    let dir = with_config(TINY);
    fs::write(dir.path().join("bad.stck"), b"STCK").unwrap();
    let out = stmask(&["eval", "--config", "run.ini", "--checkpoint", "bad.stck"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_epoch_pipeline_succeeds_and_fills_the_run_directory() {
    let dir = with_config(&TINY.replace("epochs = 1", "epochs = 0"));
    let out = stmask(&["run", "--config", "run.ini", "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = dir.path().join("run");
    for f in [
        "config.ini",
        "metrics.csv",
        "checkpoint.stck",
        "comparison.csv",
        "eval_users.csv",
        "ranking.csv",
        "loss.svg",
        "relevance_short.svg",
        "data/events.csv",
        "data/embeddings.csv",
        "data/user_0000.stbt",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(run.join("config.ini")).unwrap(), TINY.replace("epochs = 1", "epochs = 0"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn same_config_and_seed_give_identical_training_outputs() {
    let dir = with_config(TINY);
    for out_dir in ["a", "b"] {
        let out = stmask(&["train", "--config", "run.ini", "--seed", "5", "--out", out_dir], dir.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for f in ["metrics.csv", "checkpoint.stck"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn checkpoint_subcommands_write_their_outputs() {
    let dir = with_config(TINY);
    let p = dir.path();
    assert_eq!(code(&stmask(&["train", "--config", "run.ini", "--out", "t"], p)), 0);
    let ck = ["--config", "run.ini", "--checkpoint", "t/checkpoint.stck", "--out", "t"];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&ck);
        args.extend_from_slice(extra);
        stmask(&args, p)
    };

    let out = with("compare", &["--regime", "short"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(p.join("t/comparison.csv")).unwrap();
    assert!(csv.lines().count() >= 3);

    let out = with("eval", &["--regime", "cold"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(p.join("t/ranking.csv").exists());

    let out = with("sample", &["--regime", "long", "--trajectory"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let steps = fs::read_dir(p.join("t/trajectory")).unwrap().count();
    assert_eq!(steps, 51);
    let sample = fs::read_dir(p.join("t"))
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("sample_long_"))
        .expect("sample written");
    assert!(stmask_core::io::read_tensor(sample.path()).is_ok());

    let out = with("export-masks", &["--regime", "short"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_dir(p.join("t/masks")).unwrap().count(), 8);
}

#[test]
fn gen_writes_one_tensor_per_user() {
    let dir = with_config(TINY);
    let out = stmask(&["gen", "--config", "run.ini", "--out", "data"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let tensors = fs::read_dir(dir.path().join("data"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "stbt"))
        .count();
    assert_eq!(tensors, 12);
}
