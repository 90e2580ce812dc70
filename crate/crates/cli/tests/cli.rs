use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use endodepth_core::io;
use endodepth_core::nmf::cluster_purity;
use endodepth_core::synth::two_texture_image;
use tempfile::TempDir;

fn endodepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endodepth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_into(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", path_str(dir)];
    args.extend_from_slice(extra);
    let out = endodepth(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| (p.file_name().unwrap().into(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn synth_is_bitwise_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_into(&a, &["--seed", "5", "--kind", "tube"]);
    synth_into(&b, &["--seed", "5", "--kind", "tube"]);
    let fa = files(&a);
    assert_eq!(fa.len(), 7);
    assert_eq!(fa, files(&b));
}

#[test]
fn warp_reconstructs_the_target() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("s");
    synth_into(&s, &["--source-offset", "2,-1,1"]);
    let w = tmp.path().join("w");
    let out = endodepth(&[
        "warp",
        "--out",
        path_str(&w),
        "--depth",
        path_str(&s.join("target_depth.pfm")),
        "--source",
        path_str(&s.join("source.png")),
        "--pose",
        path_str(&s.join("pose_t_to_s.json")),
        "--intrinsics",
        path_str(&s.join("intrinsics.json")),
        "--target",
        path_str(&s.join("target.png")),
        "--source-depth",
        path_str(&s.join("source_depth.pfm")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let err: f64 = stdout(&out)
        .lines()
        .find_map(|l| l.strip_prefix("mean abs photometric error: "))
        .unwrap()
        .parse()
        .unwrap();
    // PNG quantisation adds up to half a grey level on top of interpolation error.
    assert!(err < 0.02, "photometric error {err}");

    let label = io::read_pfm(&w.join("pseudo_label.pfm")).unwrap();
    let gt = io::read_pfm(&s.join("target_depth.pfm")).unwrap();
    let (mut rel, mut n) = (0.0, 0);
    for (l, g) in label.data().iter().zip(gt.data()) {
        if *l > 0.0 {
            rel += (l - g).abs() / g;
            n += 1;
        }
    }
    assert!(n > 2000);
    assert!(rel / (n as f64) < 0.01);
}

#[test]
fn augment_blanks_a_quarter_sized_rectangle() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("s");
    synth_into(&s, &[]);
    let a = tmp.path().join("a");
    let out = endodepth(&[
        "augment",
        "--out",
        path_str(&a),
        "--image",
        path_str(&s.join("target.png")),
        "--seed",
        "9",
    ]);
    assert_eq!(code(&out), 0);
    let mask = io::read_png(&a.join("mask.png")).unwrap();
    assert_eq!(mask.data().iter().filter(|v| **v > 0.5).count(), 16 * 16);
    let augmented = io::read_png(&a.join("augmented.png")).unwrap();
    for p in 0..mask.len_pixels() {
        if mask.data()[p] > 0.5 {
            assert!(augmented.pixel(p).iter().all(|v| *v == 0.0));
        }
    }
    let bad = endodepth(&[
        "augment",
        "--out",
        path_str(&a),
        "--image",
        path_str(&s.join("target.png")),
        "--fill",
        "bright",
    ]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn identical_images_get_identical_segmentations() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("s");
    synth_into(&s, &[]);
    let n = tmp.path().join("n");
    let img = s.join("target.png");
    let out = endodepth(&[
        "nmf-seg",
        "--out",
        path_str(&n),
        "--k",
        "4",
        path_str(&img),
        path_str(&img),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("frobenius error"));
    assert!(stdout(&out).contains("orthogonality defect"));
    assert_eq!(
        fs::read(n.join("seg_0.png")).unwrap(),
        fs::read(n.join("seg_1.png")).unwrap()
    );
}

#[test]
fn two_texture_image_is_segmented_by_region() {
    let tmp = TempDir::new().unwrap();
    let (image, truth) = two_texture_image(64, 64, 2).unwrap();
    let img = tmp.path().join("two.png");
    io::write_png(&img, &image).unwrap();
    let n = tmp.path().join("n");
    let out = endodepth(&[
        "nmf-seg",
        "--out",
        path_str(&n),
        "--k",
        "2",
        "--max-iters",
        "300",
        path_str(&img),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let seg = io::read_png(&n.join("seg_0.png")).unwrap();
    let labels: Vec<usize> = seg.data().iter().map(|v| usize::from(*v > 0.0)).collect();
    let purity = cluster_purity(&labels, &truth);
    assert!(purity >= 0.95, "purity {purity}");
}

#[test]
fn too_many_clusters_is_a_domain_error() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("s");
    synth_into(&s, &[]);
    let out = endodepth(&[
        "nmf-seg",
        "--out",
        path_str(tmp.path()),
        "--k",
        "17",
        path_str(&s.join("target.png")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("s");
    synth_into(&s, &[]);
    let gt = s.join("target_depth.pfm");
    let out = endodepth(&[
        "eval",
        "--out",
        path_str(tmp.path()),
        "--pred",
        path_str(&gt),
        "--gt",
        path_str(&gt),
    ]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "frame,abs_rel,sq_rel,rmse,rmse_log,delta,scale_ratio,n_pixels"
    );
    assert!(lines[1].starts_with("target_depth,0,0,0,0,1,"), "{}", lines[1]);
    assert!(lines[2].starts_with("mean,"));
}

#[test]
fn io_failures_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.pfm");
    let out = endodepth(&[
        "eval",
        "--out",
        path_str(tmp.path()),
        "--pred",
        path_str(&missing),
        "--gt",
        path_str(&missing),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.pfm"));

    let config = tmp.path().join("bad.json");
    fs::write(&config, "{\"steps\": 10, \"bogus\": 1}").unwrap();
    let out = endodepth(&[
        "train-toy",
        "--out",
        path_str(tmp.path()),
        "--config",
        path_str(&config),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn validation_failures_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = endodepth(&["train-toy", "--out", path_str(tmp.path()), "--steps", "0"]);
    assert_eq!(code(&out), 1);
    let out = endodepth(&["grad-check", "--out", path_str(tmp.path()), "--target", "no_such_op"]);
    assert_eq!(code(&out), 1);
    let out = endodepth(&["no-such-command"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn train_toy_is_deterministic_with_augmentation() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.json");
    fs::write(&config, "{\"width\": 24, \"height\": 24, \"steps\": 40}").unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = endodepth(&[
            "train-toy",
            "--out",
            path_str(&dir),
            "--config",
            path_str(&config),
            "--augmentation",
            "--seed",
            "3",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        files(&dir)
    };
    let a = run("a");
    let names: Vec<_> = a.iter().map(|(n, _)| n.to_str().unwrap().to_owned()).collect();
    assert_eq!(
        names,
        [
            "config.json",
            "depth.pfm",
            "gt_depth.pfm",
            "loss_curve.csv",
            "metrics.csv"
        ]
    );
    assert_eq!(a, run("b"));
}

#[test]
fn zero_learning_rate_keeps_the_initial_depth() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.json");
    fs::write(
        &config,
        "{\"width\": 16, \"height\": 16, \"steps\": 5, \"learning_rate\": 0.0}",
    )
    .unwrap();
    let out = endodepth(&[
        "train-toy",
        "--out",
        path_str(tmp.path()),
        "--config",
        path_str(&config),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let depth = io::read_pfm(&tmp.path().join("depth.pfm")).unwrap();
    // Sigmoid round trip of the midpoint, then f32 storage.
    assert!(depth.data().iter().all(|d| (d - 75.5).abs() < 1e-4));
}

#[test]
fn grad_check_reports_every_target() {
    let tmp = TempDir::new().unwrap();
    let out = endodepth(&["grad-check", "--out", path_str(tmp.path()), "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for target in endodepth_core::gradcheck::TARGETS {
        assert!(text.contains(target), "{target} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("grad_check.json")).unwrap()).unwrap();
    assert!(report.as_array().unwrap().iter().all(|r| r["passed"] == true));
}
