//! End-to-end tests of the `twohead` binary: exit codes, artifact layout,
//! byte-level reproducibility, and cross-command consistency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twohead"))
}

/// A config small enough that every subcommand finishes in well under a
/// second, while still exercising the contrastive path (bank >= batch).
const TINY_CFG: &str = "\
[data]
classes = 3
dim = 8
n_per_class = 12
noise_sigma = 0.09

[model]
trunk = mlp
widths = 16
d_feat = 8

[attack]
epsilon = 8
alpha = 2
steps = 2

[train]
mode = that
epochs = 2
batch = 8
lr = 0.01
milestones =
clean_epochs = 2
eval_steps = 2
bank_capacity = 32

[eval]
defense = softmax
k = 5

[surface]
resolution = 5
";

fn write_cfg(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY_CFG).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary spawns")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

// ── exit codes ──────────────────────────────────────────────────────────────

#[test]
fn help_exits_zero_and_usage_errors_exit_two() {
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let bad_flag = run(&["train", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    let no_cmd = run(&[]);
    assert_eq!(no_cmd.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_diagnostic() {
    let missing = run(&["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.contains("error:"), "stderr was: {err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    // contrastive mode without a clean encoder is a configuration error
    let out = run(&["--config", s(&cfg), "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("clean encoder"));

    let bad_set = run(&["--set", "train.no_such_key=1", "train-clean"]);
    assert_eq!(bad_set.status.code(), Some(1));
}

// ── artifact layout and reproducibility ─────────────────────────────────────

fn train_that(dir: &Path, cfg: &Path, seed: &str, threads: &str, name: &str) -> PathBuf {
    let clean_dir = dir.join(format!("{name}-clean"));
    let out = run(&[
        "--config",
        s(cfg),
        "--seed",
        seed,
        "--threads",
        threads,
        "--out",
        s(&clean_dir),
        "train-clean",
    ]);
    assert_ok(&out);
    let run_dir = dir.join(name);
    let out = run(&[
        "--config",
        s(cfg),
        "--seed",
        seed,
        "--threads",
        threads,
        "--out",
        s(&run_dir),
        "train",
        "--clean",
        s(&clean_dir.join("clean.ckpt")),
    ]);
    assert_ok(&out);
    run_dir
}

#[test]
fn same_seed_reproduces_artifacts_byte_for_byte_and_threads_do_not_matter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let a = train_that(dir.path(), &cfg, "7", "1", "a");
    let b = train_that(dir.path(), &cfg, "7", "2", "b");
    let c = train_that(dir.path(), &cfg, "8", "1", "c");

    for f in ["final.ckpt", "best.ckpt", "epoch-001.ckpt", "metrics.csv"] {
        let fa = std::fs::read(a.join(f)).unwrap();
        let fb = std::fs::read(b.join(f)).unwrap();
        assert_eq!(fa, fb, "{f} differs between identical runs");
    }
    let fa = std::fs::read(a.join("final.ckpt")).unwrap();
    let fc = std::fs::read(c.join("final.ckpt")).unwrap();
    assert_ne!(fa, fc, "different seeds must differ");

    // metrics.csv carries the documented seven columns
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,lr,loss_cl,loss_nce,clean_acc,robust_acc@2,passes"
    );
    assert_eq!(lines.clone().count(), 2, "one row per epoch");
    for row in lines {
        assert_eq!(row.split(',').count(), 7, "row: {row}");
    }
}

#[test]
fn effective_cfg_round_trips_through_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(&[
        "--config",
        s(&cfg),
        "--seed",
        "3",
        "--set",
        "train.lr=0.02",
        "--out",
        s(&out_dir),
        "train-clean",
    ]);
    assert_ok(&out);
    let text = std::fs::read_to_string(out_dir.join("effective.cfg")).unwrap();
    assert!(text.contains("lr = 0.02"), "--set override recorded");
    assert!(text.contains("seed = 3"), "--seed override recorded");
    // the dump parses back to the exact same dump
    let reparsed = twohead::config::RunConfig::from_text(&text).unwrap();
    assert_eq!(reparsed.dump(), text);
}

// ── attack emission ─────────────────────────────────────────────────────────

#[test]
fn attack_emits_idx_pair_within_byte_ball_and_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let run_dir = train_that(dir.path(), &cfg, "5", "1", "m");
    let ckpt = run_dir.join("final.ckpt");

    let adv1 = dir.path().join("adv1");
    let adv2 = dir.path().join("adv2");
    for d in [&adv1, &adv2] {
        let out = run(&[
            "--config",
            s(&cfg),
            "--seed",
            "5",
            "--out",
            s(d),
            "attack",
            "--checkpoint",
            s(&ckpt),
        ]);
        assert_ok(&out);
    }
    let img1 = std::fs::read(adv1.join("adv-images.idx")).unwrap();
    let img2 = std::fs::read(adv2.join("adv-images.idx")).unwrap();
    assert_eq!(img1, img2, "same seed, same bytes");

    // quantized perturbations stay within round(epsilon) byte steps of the
    // quantized clean test set
    let (clean_tr, clean_te) = {
        let cfg = twohead::config::RunConfig::from_text(TINY_CFG).unwrap();
        cfg.load_datasets().unwrap()
    };
    assert!(clean_tr.len() > 0);
    let clean_bytes = twohead::data::quantize(clean_te.images.data());
    // IDX header: magic(4) dims n(4) rows(4) cols(4)
    let payload = &img1[16..];
    assert_eq!(payload.len(), clean_bytes.len());
    for (i, (&a, &c)) in payload.iter().zip(&clean_bytes).enumerate() {
        let d = (a as i32 - c as i32).abs();
        assert!(d <= 8, "pixel {i}: |{a} - {c}| = {d} > 8");
    }

    let labels = std::fs::read(adv1.join("adv-labels.idx")).unwrap();
    assert_eq!(labels.len(), 8 + clean_te.len());
}

// ── cross-command consistency ───────────────────────────────────────────────

#[test]
fn surface_center_equals_per_sample_eval_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let run_dir = train_that(dir.path(), &cfg, "9", "1", "m");
    let ckpt = run_dir.join("final.ckpt");

    let surf_dir = dir.path().join("surf");
    let out = run(&[
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "--out",
        s(&surf_dir),
        "surface",
        "--checkpoint",
        s(&ckpt),
        "--sample",
        "2",
    ]);
    assert_ok(&out);
    let grid = std::fs::read_to_string(surf_dir.join("surface.csv")).unwrap();
    let center: f64 = grid
        .lines()
        .find_map(|l| l.strip_prefix("# center_loss = "))
        .expect("center_loss comment")
        .parse()
        .unwrap();

    let per_sample = dir.path().join("per-sample.csv");
    let out = run(&[
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--attack",
        "none",
        "--per-sample",
        s(&per_sample),
    ]);
    assert_ok(&out);
    let rows = std::fs::read_to_string(&per_sample).unwrap();
    let loss: f64 = rows
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[0] == "2")
        .expect("row for sample 2")[3]
        .parse()
        .unwrap();
    assert_eq!(center, loss, "same sample, same loss code path");
}

#[test]
fn eval_prints_csv_and_knn_uses_saved_gallery() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let run_dir = train_that(dir.path(), &cfg, "4", "1", "m");
    let ckpt = run_dir.join("final.ckpt");

    let gal_dir = dir.path().join("gal");
    let out = run(&[
        "--config",
        s(&cfg),
        "--out",
        s(&gal_dir),
        "gallery",
        "--checkpoint",
        s(&ckpt),
    ]);
    assert_ok(&out);

    let run_eval = |extra: &[&str]| -> String {
        let mut args = vec!["--config", s(&cfg), "--seed", "4", "eval", "--checkpoint", s(&ckpt)];
        args.extend_from_slice(extra);
        let out = run(&args);
        assert_ok(&out);
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    let softmax = run_eval(&["--defense", "softmax", "--attack", "fgsm"]);
    assert!(softmax.lines().next().unwrap().starts_with("defense_mode,attack,K,eps,top1,n_samples"));
    assert!(softmax.contains("softmax,fgsm,1,"));

    let gal_file = gal_dir.join("gallery.rec");
    let from_file = run_eval(&[
        "--defense",
        "knn",
        "--attack",
        "none",
        "--gallery",
        s(&gal_file),
    ]);
    let rebuilt = run_eval(&["--defense", "knn", "--attack", "none"]);
    assert_eq!(
        from_file, rebuilt,
        "saved gallery and freshly built gallery agree"
    );
    assert!(from_file.contains("knn5,none,"), "row: {from_file}");
}
