//! Exit codes and the file-producing subcommands, run through the binary.

use std::path::Path;
use std::process::{Command, Output};

fn simplr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simplr"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.conf");
    std::fs::write(
        &path,
        "train_scenes = 4\neval_scenes = 3\nbatch_size = 2\nwarmup = 1\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn bad_usage_exits_with_two() {
    assert_eq!(code(&simplr(&[])), 2);
    assert_eq!(code(&simplr(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&simplr(&["gradcheck", "everything"])), 2);
    assert_eq!(code(&simplr(&["ablate", "--grid", "colour"])), 2);
}

#[test]
fn op_gradcheck_passes() {
    let out = simplr(&["gradcheck", "ops"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.lines().count() > 5);
}

#[test]
fn train_export_eval_profile() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let out_dir = dir.path().join("run");
    let o = out_dir.to_str().unwrap();

    let t = simplr(&["train", "--config", &conf, "--steps", "3", "--out", o]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    let ckpt = out_dir.join("model.ckpt");
    assert!(ckpt.exists() && out_dir.join("metrics.csv").exists());

    let e = simplr(&["export-data", "--config", &conf, "--out", o]);
    assert_eq!(code(&e), 0);
    let data = out_dir.join("eval.splr");
    let c = ckpt.to_str().unwrap();
    let d = data.to_str().unwrap();

    // the exported file and regenerated scenes give the same report
    let from_file = simplr(&[
        "eval",
        "--config",
        &conf,
        "--out",
        o,
        "--checkpoint",
        c,
        "--data",
        d,
    ]);
    let regenerated = simplr(&["eval", "--config", &conf, "--out", o, "--checkpoint", c]);
    assert_eq!(
        code(&from_file),
        0,
        "{}",
        String::from_utf8_lossy(&from_file.stderr)
    );
    assert_eq!(from_file.stdout, regenerated.stdout);

    let wrong_task = simplr(&[
        "eval",
        "--config",
        &conf,
        "--out",
        o,
        "--checkpoint",
        c,
        "--task",
        "panoptic",
    ]);
    assert_eq!(code(&wrong_task), 1);

    let p = simplr(&[
        "scale-profile",
        "--config",
        &conf,
        "--out",
        o,
        "--checkpoint",
        c,
    ]);
    assert_eq!(code(&p), 0, "{}", String::from_utf8_lossy(&p.stderr));
    assert!(
        out_dir.join("scale_profile.csv").exists()
            && out_dir.join("plot_scale_profile.py").exists()
    );

    let missing = simplr(&[
        "eval",
        "--config",
        &conf,
        "--checkpoint",
        dir.path().join("nope.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 1);
}
