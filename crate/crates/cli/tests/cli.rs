use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scar_core::training::CONFIG_KEYS;
use scar_core::Grid;

fn scar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scar"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = scar(dir, args);
    assert!(
        out.status.success(),
        "scar {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--input_size", "32x32", "--synth_scenes", "5", "--synth_max_heads", "12"];
const TINY_TRAIN: &[&str] = &[
    "--input_size",
    "32x32",
    "--epochs",
    "2",
    "--width_divisor",
    "32",
    "--init",
    "he",
    "--lr_initial",
    "1e-3",
    "--quiet",
];

fn with(base: &[&str], extra: &[&'static str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: &[String]) -> String {
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn synth_splits_80_20_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--data_root", "a", "--manifest", "a/m.tsv", "--input_size", "32x48"]);
    ok(dir.path(), &["synth", "--data_root", "b", "--manifest", "b/m.tsv", "--input_size", "32x48"]);
    let a = fs::read_to_string(dir.path().join("a/m.tsv")).unwrap();
    let b = fs::read_to_string(dir.path().join("b/m.tsv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().filter(|l| l.starts_with("train\t")).count(), 16);
    assert_eq!(a.lines().filter(|l| l.starts_with("test\t")).count(), 4);
    for name in fs::read_dir(dir.path().join("a/images")).unwrap() {
        let name = name.unwrap().file_name();
        let x = fs::read(dir.path().join("a/images").join(&name)).unwrap();
        let y = fs::read(dir.path().join("b/images").join(&name)).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn gt_maps_sum_to_counts() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &with(&["synth", "--data_root", "d", "--manifest", "d/m.tsv"], SMALL));
    let out = ok(dir.path(), &["gt", "--data_root", "d", "--manifest", "d/m.tsv", "--out", "gt", "--sigma", "3"]);
    assert_eq!(out.lines().count(), 5);
    for line in out.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        let map = Grid::read(dir.path().join(fields[0])).unwrap();
        let count: f64 = fields[1].parse().unwrap();
        assert!((map.sum() - count).abs() <= 1e-4 * count.max(1.0));
        assert_eq!(map.resolution(), (32, 32));
    }
}

#[test]
fn train_eval_round_trip_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &with(&["synth", "--data_root", "d", "--manifest", "d/m.tsv"], SMALL));
    for run_dir in ["r1", "r2"] {
        run(
            dir.path(),
            &with(&["train", "--data_root", "d", "--manifest", "d/m.tsv", "--output_dir", run_dir], TINY_TRAIN),
        );
        let ckpt = format!("{run_dir}/checkpoint_final");
        ok(
            dir.path(),
            &["eval", "--checkpoint", &ckpt, "--data_root", "d", "--manifest", "d/m.tsv", "--output_dir", run_dir],
        );
    }
    let r1 = fs::read_to_string(dir.path().join("r1/metrics.txt")).unwrap();
    let r2 = fs::read_to_string(dir.path().join("r2/metrics.txt")).unwrap();
    assert_eq!(r1, r2);
    assert!(r1.starts_with("# scar metrics report\nmae\t"));
    assert_eq!(
        fs::read_to_string(dir.path().join("r1/train_log.txt")).unwrap().lines().count(),
        2
    );

    let vis = ok(
        dir.path(),
        &["visualize", "--checkpoint", "r1/checkpoint_final", "--image", "d/images/synth_0.png", "--channels", "0,1"],
    );
    assert_eq!(vis.lines().count(), 5);
    assert!(dir.path().join("runs/attention/synth_0_cam_ch1.png").exists());
}

#[test]
fn eval_rejects_foreign_checkpoint_format() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("ckpt")).unwrap();
    fs::write(dir.path().join("ckpt/meta.txt"), "format=OTHERFMT\nvariant=SCAR\n").unwrap();
    let out = scar(dir.path(), &["eval", "--checkpoint", "ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("SCARCKPT1"), "{err}");
}

#[test]
fn visualize_rejects_fcn() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &with(&["synth", "--data_root", "d", "--manifest", "d/m.tsv"], SMALL));
    run(
        dir.path(),
        &with(
            &["train", "--data_root", "d", "--manifest", "d/m.tsv", "--output_dir", "r", "--variant", "FCN"],
            TINY_TRAIN,
        ),
    );
    let out = scar(
        dir.path(),
        &["visualize", "--checkpoint", "r/checkpoint_final", "--image", "d/images/synth_0.png"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("FCN"));
}

#[test]
fn ablate_emits_four_row_table() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &with(&["synth", "--data_root", "d", "--manifest", "d/m.tsv"], SMALL));
    let out = run(
        dir.path(),
        &with(&["ablate", "--data_root", "d", "--manifest", "d/m.tsv", "--output_dir", "abl"], TINY_TRAIN),
    );
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "| Method | MAE | MSE | PSNR | SSIM |");
    let methods: Vec<&str> = lines[2..].iter().map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(methods, ["FCN", "FCN+SAM", "FCN+CAM", "SCAR"]);
    assert_eq!(fs::read_to_string(dir.path().join("abl/ablation.md")).unwrap(), out);
    assert!(dir.path().join("abl/scar/checkpoint_final/meta.txt").exists());
}

#[test]
fn config_errors_abort_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "epochs = 3\nlearning_rate = 1\n").unwrap();
    let out = scar(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!dir.path().join("runs").exists());

    let out = scar(dir.path(), &["train", "--no_such_flag", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_then_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &with(&["synth", "--data_root", "d", "--manifest", "d/m.tsv"], SMALL));
    fs::write(
        dir.path().join("exp.cfg"),
        "# tiny run\ndata_root = d\nmanifest = d/m.tsv\nepochs = 5\ninput_size = 32x32\nwidth_divisor = 32\n",
    )
    .unwrap();
    ok(dir.path(), &["train", "--config", "exp.cfg", "--epochs", "1", "--output_dir", "r", "--quiet"]);
    let record = fs::read_to_string(dir.path().join("r/config.txt")).unwrap();
    assert!(record.contains("epochs = 1\n"));
    assert!(record.contains("width_divisor = 32\n"));
}

#[test]
fn train_help_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["train", "--help"]);
    for (key, _) in CONFIG_KEYS.iter().filter(|(k, _)| !k.starts_with("synth_")) {
        assert!(help.contains(&format!("--{key} ")), "missing {key}");
    }
    let help = ok(dir.path(), &["synth", "--help"]);
    assert!(help.contains("--synth_gradient"));
}
