use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "n_tx = 4\nn_sub = 8\ngamma = 4\nvariant = llm\nn_layers = 1\nn_heads = 2\nd_em = 16\n\
d_ff = 32\nsmall_hidden = 32\nsamples_per_scenario = 40\nsample_sweep = 10,full\ngammas = 2,4\n\
sweep_variants = identical,llm\ntrain_scenarios = 1-2\neval_scenarios = 3-3\nbatch_size = 8\n\
micro_batch = 4\nepochs = 2\n";

fn csi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csi"))
        .args(args)
        .output()
        .expect("spawn csi")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let o = csi(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in [
        "generate",
        "train",
        "evaluate",
        "sweep-cr",
        "sweep-samples",
        "generalize",
        "gradcheck",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn unknown_config_key_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate = 0.1\n");
    let o = csi(&["generate", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));
}

#[test]
fn training_before_generation_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = csi(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("run generate first"), "{}", stderr(&o));
}

#[test]
fn evaluate_rejects_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert!(csi(&["generate", "--config", &cfg, "--out", out]).status.success());
    let missing = dir.path().join("nope.csiw");
    let o = csi(&[
        "evaluate",
        "--config",
        &cfg,
        "--out",
        out,
        "--checkpoint",
        missing.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

fn run_pipeline(dir: &Path, seed: &str) -> Vec<(String, Vec<u8>)> {
    let cfg = write_config(dir, "");
    let out = dir.join("out");
    let out_s = out.to_str().unwrap();
    for cmd in ["generate", "train", "sweep-cr"] {
        let o = csi(&[cmd, "--config", &cfg, "--out", out_s, "--seed", seed]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let mut files = Vec::new();
    for rel in [
        "train/results.csv",
        "train/runs/llm-g4-nfull-s1-2/train_log.csv",
        "train/runs/llm-g4-nfull-s1-2/checkpoint.csiw",
        "sweep_cr/results.csv",
        "sweep_cr/nmse_vs_gamma.svg",
        "data/scenario_001.csid",
        "data/split_1-2.txt",
    ] {
        files.push((
            rel.to_string(),
            std::fs::read(out.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}")),
        ));
    }
    files
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let first = run_pipeline(a.path(), "3");
    let second = run_pipeline(b.path(), "3");
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{name} differs between identical runs");
    }
    let other = run_pipeline(c.path(), "4");
    assert_ne!(first[2].1, other[2].1, "a different seed should change the checkpoint");
}

#[test]
fn evaluate_reproduces_training_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), "1");
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let ckpt = out.join("train/runs/llm-g4-nfull-s1-2/checkpoint.csiw");
    let o = csi(&[
        "evaluate",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let field = |csv: &str, col: usize| -> String {
        let line = csv
            .lines()
            .find(|l| l.contains(",llm,") && l.contains(",test,"))
            .unwrap();
        line.split(',').nth(col).unwrap().to_string()
    };
    let trained = std::fs::read_to_string(out.join("train/results.csv")).unwrap();
    let evaluated = std::fs::read_to_string(out.join("evaluate/results.csv")).unwrap();
    for col in [5, 6, 7] {
        assert_eq!(field(&trained, col), field(&evaluated, col));
    }
}
