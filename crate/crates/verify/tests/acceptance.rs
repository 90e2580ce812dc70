//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.

use std::time::{Duration, Instant};

use endodepth_core::augment::{depth_loss_support, depth_pseudo_label, make_occlusion_mask};
use endodepth_core::geometry::{warp_field, CameraIntrinsics, PoseSE3};
use endodepth_core::gradcheck::{grad_check_all, PASS_THRESHOLD, TARGETS};
use endodepth_core::losses::depth_loss;
use endodepth_core::metrics::{compute_metrics, EvalOptions, CAP_ABDOMINAL_MM, CAP_CT_MM};
use endodepth_core::nmf::{
    build_segmentations, cluster_purity, extract_features, nmf_factorize, FilterBank, NmfOptions,
};
use endodepth_core::sampler::synthesize_view;
use endodepth_core::synth::{make_pair, render_view, two_texture_image, Scene, SceneGeometry, SceneSpec};
use endodepth_core::train::{non_increasing_by_window, train_toy, CorruptInit, RunConfig};
use endodepth_core::{Grid, Mask};
use endodepth_verify::Check;
use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_k() -> CameraIntrinsics {
    CameraIntrinsics::centered(64, 64).unwrap()
}

fn fronto(z: f64) -> Scene {
    Scene::from_spec(&SceneSpec {
        geometry: SceneGeometry::Plane {
            normal: [0.0, 0.0, 1.0],
            offset: z,
        },
        texture_seed: 0,
        weak_texture: false,
    })
    .unwrap()
}

#[test]
fn criterion_1_identity_warp() {
    let mut check = Check::new();
    let k = desk_k();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let maps: Vec<Grid> = (0..100)
        .map(|_| Grid::from_fn(64, 64, 1, |_, _, _| rng.gen_range(1.0..150.0)))
        .collect();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for depth in &maps {
        let warp = warp_field(depth, &k, &PoseSE3::identity()).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                worst = worst.max((warp.coords.get(r, c, 0) - c as f64).abs());
                worst = worst.max((warp.coords.get(r, c, 1) - r as f64).abs());
            }
        }
        check.expect(warp.valid.count() == 64 * 64, "identity warp marked pixels invalid");
    }
    let elapsed = start.elapsed();
    check.expect(worst < 1e-6, format!("max deviation {worst:e} ≥ 1e-6"));
    check.expect(elapsed < Duration::from_secs(1), format!("runtime {elapsed:?} ≥ 1 s"));
    check.finish(
        1,
        &format!("identity warp max deviation {worst:.1e} px over 100 maps"),
        elapsed,
    );
}

#[test]
fn criterion_2_analytic_warp() {
    let mut check = Check::new();
    let start = Instant::now();
    let k = desk_k();
    let z = 50.0;
    let depth = Grid::filled(64, 64, 1, z);

    // Camera moved +5 mm along x: points shift by −fx·t/z in the source image.
    let pose = PoseSE3::from_translation(Vector3::new(-5.0, 0.0, 0.0));
    let warp = warp_field(&depth, &k, &pose).unwrap();
    let mut shift_err = 0.0f64;
    for r in 0..64 {
        for c in 0..64 {
            if warp.valid.get(r, c) {
                shift_err = shift_err.max((c as f64 - warp.coords.get(r, c, 0) - 6.4).abs());
                shift_err = shift_err.max((warp.coords.get(r, c, 1) - r as f64).abs());
            }
        }
    }
    check.expect(shift_err < 1e-5, format!("shift error {shift_err:e} ≥ 1e-5"));
    check.expect(warp.valid.count() > 0, "no valid pixels after the shift");

    let t_z = 10.0;
    let pose = PoseSE3::from_translation(Vector3::new(0.0, 0.0, -t_z));
    let warp = warp_field(&depth, &k, &pose).unwrap();
    let depth_err = warp
        .src_depth
        .data()
        .iter()
        .map(|d| (d - (z - t_z)).abs())
        .fold(0.0, f64::max);
    check.expect(depth_err < 1e-9, format!("t_z depth error {depth_err:e} ≥ 1e-9"));

    // The renderer agrees with the same closed form.
    let (_, rendered) = render_view(&fronto(z), &k, &pose).unwrap();
    let render_err = rendered
        .data()
        .iter()
        .map(|d| (d - (z - t_z)).abs())
        .fold(0.0, f64::max);
    check.expect(render_err < 1e-9, format!("rendered depth error {render_err:e} ≥ 1e-9"));

    check.finish(
        2,
        &format!("uniform 6.4 px shift err {shift_err:.1e}, t_z depth err {depth_err:.1e}"),
        start.elapsed(),
    );
}

#[test]
fn criterion_3_gradient_suite() {
    let mut check = Check::new();
    let start = Instant::now();
    let reports = grad_check_all(0).unwrap();
    let elapsed = start.elapsed();
    check.expect(reports.len() == TARGETS.len(), "not every target was checked");
    let mut worst = 0.0f64;
    for r in &reports {
        worst = worst.max(r.max_rel_error);
        check.note(format!(
            "{:<28} max rel err {:.2e} over {} instances",
            r.target, r.max_rel_error, r.instances
        ));
        check.expect(
            r.instances >= 20,
            format!("{} ran only {} instances", r.target, r.instances),
        );
        check.expect(
            r.passed && r.max_rel_error < PASS_THRESHOLD,
            format!("{} max rel err {:e}", r.target, r.max_rel_error),
        );
        if let Some(m) = r.masked_grad_max {
            check.expect(
                m == 0.0,
                format!("{} masked gradient {m:e} is not exactly zero", r.target),
            );
        }
    }
    check.expect(elapsed < Duration::from_secs(30), format!("runtime {elapsed:?} ≥ 30 s"));
    check.finish(
        3,
        &format!("{} targets, worst rel err {worst:.1e}", reports.len()),
        elapsed,
    );
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
}

/// Purity of K = m NMF on `m` disjoint column blocks of 3 columns and 40 rows
/// each, uniform entries on the block and exact zeros elsewhere.
fn block_purity(m: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<usize> = (0..40 * m).map(|r| r / 40).collect();
    let v = DMatrix::from_fn(40 * m, 3 * m, |r, c| {
        if c / 3 == truth[r] {
            rng.gen_range(0.5..1.5)
        } else {
            0.0
        }
    });
    let res = nmf_factorize(
        &v,
        &NmfOptions {
            k: m,
            max_iters: 500,
            tol: 1e-9,
            seed,
        },
    )
    .unwrap();
    cluster_purity(&res.row_labels(), &truth)
}

#[test]
fn criterion_4_nmf_descent_and_recovery() {
    let mut check = Check::new();
    let start = Instant::now();

    // (a) monotone error traces.
    let mut worst_rise = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = uniform_matrix(&mut rng, 128, 16);
        for k in 2..=4 {
            let res = nmf_factorize(
                &v,
                &NmfOptions {
                    k,
                    max_iters: 200,
                    tol: 0.0,
                    seed,
                },
            )
            .unwrap();
            for w in res.error_trace.windows(2) {
                worst_rise = worst_rise.max(w[1] - w[0]);
            }
        }
    }
    let a_ok = worst_rise <= 1e-12;
    check.expect(a_ok, format!("(a) error trace rose by {worst_rise:e}"));

    // (b) exact-rank recovery from dense uniform factors.
    let mut worst_rel = 0.0f64;
    let mut recovered = 0;
    let trials = 20;
    for seed in 0..trials as u64 {
        let k = 2 + (seed as usize % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let v = uniform_matrix(&mut rng, 128, k) * uniform_matrix(&mut rng, k, 16);
        let res = nmf_factorize(
            &v,
            &NmfOptions {
                k,
                max_iters: 500,
                tol: 0.0,
                seed,
            },
        )
        .unwrap();
        let rel = res.relative_error(&v);
        worst_rel = worst_rel.max(rel);
        if rel < 1e-3 {
            recovered += 1;
        }
    }
    check.expect(
        recovered == trials,
        format!("(b) {recovered}/{trials} exact-rank instances below 1e-3, worst {worst_rel:.2e}"),
    );

    // (c) three disjoint column blocks, each row supported on one block.
    let purity = block_purity(3, 7);
    check.expect(purity == 1.0, format!("(c) block purity {purity}"));

    // The same construction over a seeded sweep of m ∈ {2, 3, 4}.
    let sweep = 100;
    let mut misses = Vec::new();
    for m in 2..=4 {
        let missed = (0..sweep).filter(|&seed| block_purity(m, seed) < 1.0).count();
        misses.push(format!("m={m}: {missed}/{sweep}"));
        check.expect(
            missed == 0,
            format!("(c) sweep m={m}: {missed}/{sweep} instances below 100% purity"),
        );
    }

    let elapsed = start.elapsed();
    check.expect(elapsed < Duration::from_secs(10), format!("runtime {elapsed:?} ≥ 10 s"));
    check.finish(
        4,
        &format!(
            "(a) max rise {worst_rise:.1e}; (b) {recovered}/{trials} recovered, worst rel err {worst_rel:.1e}; (c) purity {purity}, sweep misses {}",
            misses.join(", ")
        ),
        elapsed,
    );
}

fn row(values: &[f64]) -> Grid {
    Grid::from_vec(1, values.len(), 1, values.to_vec()).unwrap()
}

#[test]
fn criterion_5_metrics_oracle() {
    let mut check = Check::new();
    let start = Instant::now();
    let plain = EvalOptions {
        median_scale: false,
        ..EvalOptions::default()
    };
    let m = compute_metrics(&row(&[1.0, 5.0]), &row(&[2.0, 4.0]), &plain).unwrap();
    for (name, got, want) in [
        ("abs_rel", m.abs_rel, 0.375),
        ("sq_rel", m.sq_rel, 0.375),
        ("rmse", m.rmse, 1.0),
        ("rmse_log", m.rmse_log, 0.5149),
        ("delta", m.delta, 0.0),
    ] {
        check.expect((got - want).abs() <= 1e-4, format!("{name} = {got}, expected {want}"));
    }

    let gt = row(&[3.0, 7.0, 11.0]);
    let same = compute_metrics(&gt, &gt, &plain).unwrap();
    check.expect(
        same.abs_rel == 0.0 && same.sq_rel == 0.0 && same.rmse == 0.0 && same.rmse_log == 0.0 && same.delta == 1.0,
        format!("identity case gave {same:?}"),
    );

    // Predictions are clamped to the cap; ground truth beyond it is excluded.
    for (cap, want) in [(CAP_ABDOMINAL_MM, 0.5), (CAP_CT_MM, 0.8)] {
        let opts = EvalOptions { cap_mm: cap, ..plain };
        let capped = compute_metrics(&row(&[190.0, 500.0]), &row(&[100.0, 200.0]), &opts).unwrap();
        check.expect(
            capped.n_pixels == 1,
            format!("cap {cap}: counted {} pixels", capped.n_pixels),
        );
        check.expect(
            (capped.abs_rel - want).abs() < 1e-12,
            format!("cap {cap}: abs_rel {}", capped.abs_rel),
        );
    }
    check.finish(5, "table oracle, identity and 150/180 mm caps", start.elapsed());
}

struct SynthesisResult {
    photo: f64,
    depth_rel: f64,
    valid: usize,
}

fn synthesis_errors(spec: &SceneSpec, pose_s: &PoseSE3) -> SynthesisResult {
    let k = desk_k();
    let scene = Scene::from_spec(spec).unwrap();
    let pair = make_pair(&scene, &k, &PoseSE3::identity(), pose_s).unwrap();
    let warp = warp_field(&pair.target_depth, &k, &pair.pose_t_to_s).unwrap();
    let recon = synthesize_view(&pair.source, &warp).unwrap();
    let label = depth_pseudo_label(&warp, &pair.source_depth, &pair.pose_t_to_s).unwrap();
    let (mut photo, mut n_photo) = (0.0, 0usize);
    let (mut depth_rel, mut n_depth) = (0.0, 0usize);
    for p in 0..64 * 64 {
        if recon.valid.at(p) {
            let (a, b) = (recon.values.pixel(p), pair.target.pixel(p));
            photo += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            n_photo += 1;
        }
        if label.valid.at(p) {
            let gt = pair.target_depth.data()[p];
            depth_rel += (label.depth.data()[p] - gt).abs() / gt;
            n_depth += 1;
        }
    }
    SynthesisResult {
        photo: photo / n_photo as f64,
        depth_rel: depth_rel / n_depth as f64,
        valid: n_photo.min(n_depth),
    }
}

#[test]
fn criterion_6_view_synthesis() {
    let mut check = Check::new();
    let start = Instant::now();
    let cases = [
        (
            "plane",
            SceneSpec::desk_plane(3),
            PoseSE3::from_axis_angle(Vector3::new(0.01, -0.02, 0.005), Vector3::new(2.0, -1.0, 1.5)),
        ),
        (
            "tube",
            SceneSpec::desk_tube(5),
            PoseSE3::from_axis_angle(Vector3::new(-0.01, 0.015, 0.0), Vector3::new(0.8, 0.5, -1.0)),
        ),
    ];
    let mut summary = Vec::new();
    for (name, spec, pose) in cases {
        let r = synthesis_errors(&spec, &pose);
        check.expect(r.valid > 64 * 64 / 2, format!("{name}: only {} valid pixels", r.valid));
        check.expect(r.photo < 0.02, format!("{name}: photometric error {}", r.photo));
        check.expect(
            r.depth_rel < 0.01,
            format!("{name}: depth relative error {}", r.depth_rel),
        );
        summary.push(format!("{name} photo {:.4} depth {:.2e}", r.photo, r.depth_rel));
    }
    let elapsed = start.elapsed();
    check.expect(elapsed < Duration::from_secs(5), format!("runtime {elapsed:?} ≥ 5 s"));
    check.finish(6, &summary.join(", "), elapsed);
}

#[test]
fn criterion_7_toy_training() {
    let mut check = Check::new();
    let start = Instant::now();
    let config = RunConfig::default();
    let report = train_toy(&config).unwrap();
    let elapsed = start.elapsed();
    check.expect(config.steps <= 2000, "more than 2000 steps");
    check.expect(
        report.metrics.abs_rel < 0.05,
        format!("Abs-Rel {}", report.metrics.abs_rel),
    );
    check.expect(
        non_increasing_by_window(&report.losses, 50),
        "loss curve rises between 50-step windows",
    );
    check.expect(elapsed < Duration::from_secs(60), format!("runtime {elapsed:?} ≥ 60 s"));
    check.finish(
        7,
        &format!(
            "Abs-Rel {:.4}, loss {:.3e} -> {:.3e}",
            report.metrics.abs_rel,
            report.losses[0],
            report.losses.last().unwrap()
        ),
        elapsed,
    );
}

#[test]
fn criterion_8_occlusion_masks() {
    let mut check = Check::new();
    let start = Instant::now();

    for (h, w) in [(64, 64), (48, 80), (7, 13), (4, 4), (100, 37)] {
        for seed in 0..25 {
            let m = make_occlusion_mask(h, w, seed).unwrap();
            check.expect(
                m.rect.height == h / 4 && m.rect.width == w / 4 && m.occluded.count() == (h / 4) * (w / 4),
                format!("{h}x{w} seed {seed}: rect {:?}", m.rect),
            );
            check.expect(m.rect.fits(h, w), format!("{h}x{w} seed {seed}: rect out of frame"));
        }
    }

    // Perturbing predictions off the support leaves the loss and the
    // on-support gradients bit-identical.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..20 {
        let occ = make_occlusion_mask(32, 32, seed).unwrap();
        let valid = Mask::from_fn(32, 32, |r, c| !(r * 7 + c * 3 + seed as usize).is_multiple_of(11));
        let support = depth_loss_support(&occ, &valid).unwrap();
        let target = Grid::from_fn(32, 32, 1, |_, _, _| rng.gen_range(5.0..100.0));
        let source = Grid::from_fn(32, 32, 1, |_, _, _| rng.gen_range(5.0..100.0));
        let (mut t2, mut s2) = (target.clone(), source.clone());
        for p in 0..32 * 32 {
            if !support.at(p) {
                t2.data_mut()[p] += rng.gen_range(-50.0..50.0);
                s2.data_mut()[p] = rng.gen_range(1.0..1e6);
            }
        }
        let a = depth_loss(&target, &source, &support).unwrap();
        let b = depth_loss(&t2, &s2, &support).unwrap();
        check.expect(
            a.value.to_bits() == b.value.to_bits(),
            format!("seed {seed}: loss changed"),
        );
        for (name, ga) in &a.grads {
            let gb = b.grad(name).unwrap();
            let same = ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            check.expect(same, format!("seed {seed}: gradient {name} changed"));
        }
    }

    // DA robustness smoke test on an adversarially corrupted rectangle.
    let corrupt = CorruptInit { seed: 7, depth: 140.0 };
    let base = RunConfig {
        corrupt_init: Some(corrupt),
        ..RunConfig::default()
    };
    let off = train_toy(&base).unwrap().corrupt_region_metrics.unwrap();
    let on = train_toy(&RunConfig {
        augmentation: true,
        ..base.clone()
    })
    .unwrap()
    .corrupt_region_metrics
    .unwrap();
    check.expect(
        on.abs_rel <= 1.5 * off.abs_rel,
        format!("DA-on region Abs-Rel {} > 1.5 × DA-off {}", on.abs_rel, off.abs_rel),
    );
    check.finish(
        8,
        &format!(
            "quarter masks, bitwise off-support invariance, region Abs-Rel DA-on {:.4} vs DA-off {:.4}",
            on.abs_rel, off.abs_rel
        ),
        start.elapsed(),
    );
}

#[test]
fn criterion_9_segmentation_pseudo_labels() {
    let mut check = Check::new();
    let start = Instant::now();
    let mut worst_purity = 1.0f64;
    let mut worst_row = 0.0f64;
    for seed in 0..4 {
        let (image, truth) = two_texture_image(64, 64, seed).unwrap();
        let features = extract_features(&[image], &FilterBank::default_with_seed(seed)).unwrap();
        let res = nmf_factorize(
            features.matrix(),
            &NmfOptions {
                k: 2,
                max_iters: 300,
                tol: 1e-6,
                seed,
            },
        )
        .unwrap();
        let purity = cluster_purity(&res.row_labels(), &truth);
        worst_purity = worst_purity.min(purity);
        check.expect(purity >= 0.95, format!("seed {seed}: purity {purity}"));

        for s in build_segmentations(&res.p, 1, 64, 64, 1.0).unwrap() {
            for p in 0..64 * 64 {
                let sum: f64 = s.probs().pixel(p).iter().sum();
                worst_row = worst_row.max((sum - 1.0).abs());
            }
        }
    }
    check.expect(worst_row <= 1e-9, format!("row sum off by {worst_row:e}"));
    check.finish(
        9,
        &format!("two-texture purity ≥ {worst_purity:.4}, row sums within {worst_row:.1e}"),
        start.elapsed(),
    );
}

#[test]
fn criterion_10_out_of_scope_declared() {
    let start = Instant::now();
    Check::new().finish(
        10,
        "declared out of scope: benchmark tables from full CNN training on clinical datasets are not \
         reproduced; criteria 1-9 are the property-based substitute",
        start.elapsed(),
    );
}
