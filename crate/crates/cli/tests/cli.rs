use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 7] = [
    "num_classes=6",
    "samples_per_class=20",
    "tasks=3",
    "d1=16",
    "d2=4",
    "num_layers=2",
    "buffer_size=128",
];

fn mixnoise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixnoise"))
        .args(args)
        .output()
        .unwrap()
}

fn with_tiny<'a>(cmd: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = cmd.to_vec();
    for s in TINY.iter().chain(extra) {
        v.push("--set");
        v.push(s);
    }
    v
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let d = dir.to_str().unwrap();
    mixnoise(&with_tiny(&["train", "--out", d], extra))
}

#[test]
fn train_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "accuracy.csv",
        "summary.json",
        "accuracy.svg",
        "train_log.csv",
        "config.toml",
        "checkpoint.bin",
    ] {
        assert!(tmp.path().join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(tmp.path().join("accuracy.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("task,accuracy_pct"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&train(&a, &[])), 0);
    assert_eq!(code(&train(&b, &[])), 0);
    // the checkpoint embeds the output directory, so it is not compared
    for f in ["accuracy.csv", "train_log.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn stop_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    assert_eq!(code(&train(&full, &[])), 0);
    let p = part.to_str().unwrap();
    assert_eq!(
        code(&mixnoise(&with_tiny(
            &["train", "--out", p, "--stop-after", "1"],
            &[]
        ))),
        0
    );
    let ckpt = part.join("checkpoint.bin");
    let c = ckpt.to_str().unwrap();
    let o = mixnoise(&with_tiny(&["train", "--out", p, "--resume", c], &[]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(full.join("accuracy.csv")).unwrap(),
        std::fs::read(part.join("accuracy.csv")).unwrap()
    );
}

#[test]
fn eval_and_snapshot_read_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(tmp.path(), &[])), 0);
    let d = tmp.path().to_str().unwrap();
    let o = mixnoise(&with_tiny(&["eval", "--out", d], &[]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("eval.json").exists());

    let c = tmp.path().join("checkpoint.bin");
    let o = mixnoise(&with_tiny(
        &["snapshot", "--checkpoint", c.to_str().unwrap()],
        &[],
    ));
    assert_eq!(code(&o), 0);
    let snap: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(snap["sessions_completed"], 3);

    // a checkpoint from one config does not evaluate under another
    let o = mixnoise(&with_tiny(&["eval", "--out", d], &["tau=1.0"]));
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(tmp.path(), &[])), 0);
    let path = tmp.path().join("checkpoint.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    let o = mixnoise(&with_tiny(
        &["eval", "--out", tmp.path().to_str().unwrap()],
        &[],
    ));
    assert_eq!(code(&o), 1);
}

#[test]
fn print_config_shows_resolved_values() {
    let o = mixnoise(&[
        "train",
        "--print-config",
        "--set",
        "tau=1.5",
        "--profile",
        "paper-dims",
    ]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("# config hash "));
    assert!(text.contains("tau = 1.5"));
    assert!(text.contains("d2 = 192"));
    assert!(text.contains("buffer_size = 16384"));
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.toml");
    std::fs::write(&path, "tau = 0.5\nepochs = 2\n").unwrap();
    let p = path.to_str().unwrap();
    let o = mixnoise(&["train", "-c", p, "--set", "epochs=4", "--print-config"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(
        text.contains("tau = 0.5") && text.contains("epochs = 4"),
        "{text}"
    );

    std::fs::write(&path, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&mixnoise(&["train", "-c", p, "--print-config"])), 1);
}

#[test]
fn validation_errors_exit_one() {
    assert_eq!(
        code(&mixnoise(&["train", "--set", "tau=-1", "--print-config"])),
        1
    );
    assert_eq!(code(&mixnoise(&["train", "--set", "tau=0"])), 1);
    assert_eq!(code(&mixnoise(&["train", "--set", "bogus=3"])), 1);
    assert_eq!(code(&mixnoise(&["train", "--set", "tasks=0"])), 1);
    assert_eq!(code(&mixnoise(&["train", "--profile", "nope"])), 1);
    assert_eq!(code(&mixnoise(&["frobnicate"])), 1);
    assert_eq!(
        code(&mixnoise(&["sweep", "--param", "gain", "--values", "1"])),
        1
    );
    assert_eq!(code(&mixnoise(&["ablate", "--variants", "min"])), 1);
    assert_eq!(code(&mixnoise(&["gradcheck", "--d1", "64"])), 1);
    assert_eq!(
        code(&mixnoise(&[
            "eval",
            "--checkpoint",
            "/nonexistent/ckpt.bin"
        ])),
        1
    );
    assert_eq!(code(&mixnoise(&["--help"])), 0);
}

#[test]
fn gradcheck_exit_codes() {
    let o = mixnoise(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().last().unwrap().starts_with("PASS"), "{text}");

    let o = mixnoise(&["gradcheck", "--corrupt", "omega"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn diverging_training_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), &["lr_init=1e200", "clip=0"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablate_and_sweep_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    let o = mixnoise(&with_tiny(
        &[
            "ablate",
            "--out",
            d,
            "--variants",
            "baseline,min",
            "--num-seeds",
            "2",
        ],
        &["epochs=1"],
    ));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,seeds,avg_acc_pct"));
    assert_eq!(csv.lines().count(), 3);
    assert!(tmp.path().join("ablation_runs.csv").exists());

    let o = mixnoise(&with_tiny(
        &["sweep", "--out", d, "--param", "tau", "--values", "1,2"],
        &["epochs=1"],
    ));
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(tmp.path().join("sweep_tau.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_to_string(tmp.path().join("sweep_tau.svg"))
        .unwrap()
        .contains("<svg"));
}
