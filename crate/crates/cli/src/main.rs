//! `endodepth` command-line front end.
//!
//! Every subcommand writes its artefacts into `--out` (created if missing) and
//! exits with 0 on success, 1 on domain or validation errors and 2 on IO or
//! file-format errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use endodepth_core::augment::{apply_mask, depth_pseudo_label, make_occlusion_mask, MaskFill};
use endodepth_core::geometry::{warp_field, CameraIntrinsics, PoseSE3};
use endodepth_core::gradcheck::{grad_check, grad_check_all, GradCheckReport};
use endodepth_core::io;
use endodepth_core::metrics::{evaluate_batch, EvalOptions, Frame};
use endodepth_core::nmf::{build_segmentations, extract_features, nmf_factorize, FilterBank, NmfOptions};
use endodepth_core::sampler::synthesize_view;
use endodepth_core::synth::{make_pair, Scene, SceneSpec};
use endodepth_core::train::{train_toy, RunConfig};
use endodepth_core::{Error, Result};
use nalgebra::Vector3;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "endodepth", version, about = "Self-supervised endoscopic depth toolkit")]
struct Cli {
    /// Seed for textures, masks, NMF initialisation and gradient checks.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Subcommand-specific JSON configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SceneKind {
    Plane,
    Tube,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a target/source pair of a synthetic scene. `--config` takes a scene spec.
    Synth {
        #[arg(long, value_enum, default_value_t = SceneKind::Plane)]
        kind: SceneKind,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Source camera centre relative to the target camera, mm.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [5.0, 0.0, 0.0])]
        source_offset: Vec<f64>,
        /// Low-contrast texture.
        #[arg(long)]
        weak: bool,
    },
    /// Reconstruct the target view from a source image through a depth map and pose.
    Warp {
        /// Target depth, PFM.
        #[arg(long)]
        depth: PathBuf,
        /// Source image, PNG.
        #[arg(long)]
        source: PathBuf,
        /// Target-to-source pose, JSON 4x4 matrix.
        #[arg(long)]
        pose: PathBuf,
        /// Intrinsics JSON; centred default when absent.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        /// Target image, PNG; reports the photometric error when given.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Source depth, PFM; also writes the warped depth pseudo-label.
        #[arg(long)]
        source_depth: Option<PathBuf>,
    },
    /// Blank a seeded quarter-size rectangle of an image.
    Augment {
        #[arg(long)]
        image: PathBuf,
        /// `mean` or a numeric intensity.
        #[arg(long, default_value = "0")]
        fill: String,
    },
    /// Segment images by NMF of filter-bank features. `--config` takes NMF options.
    NmfSeg {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Depth metrics of predictions against ground truth. `--config` takes evaluation options.
    Eval {
        /// Predicted depth maps, PFM.
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        /// Ground-truth depth maps, PFM, in the same order.
        #[arg(long, required = true, num_args = 1..)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        cap: Option<f64>,
        #[arg(long)]
        no_median_scale: bool,
    },
    /// Train the per-pixel toy model on a synthetic scene. `--config` takes a run configuration.
    TrainToy {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        augmentation: bool,
        #[arg(long)]
        segmentation: bool,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        /// Target name or `all`.
        #[arg(long, default_value = "all")]
        target: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    create_dir(&cli.out)?;
    match cli.command {
        Command::Synth {
            kind,
            width,
            height,
            ref source_offset,
            weak,
        } => synth(&cli, kind, width, height, source_offset, weak),
        Command::Warp {
            ref depth,
            ref source,
            ref pose,
            ref intrinsics,
            ref target,
            ref source_depth,
        } => warp(
            &cli,
            depth,
            source,
            pose,
            intrinsics.as_deref(),
            target.as_deref(),
            source_depth.as_deref(),
        ),
        Command::Augment { ref image, ref fill } => augment(&cli, image, fill),
        Command::NmfSeg {
            ref images,
            k,
            max_iters,
            temperature,
        } => nmf_seg(&cli, images, k, max_iters, temperature),
        Command::Eval {
            ref pred,
            ref gt,
            cap,
            no_median_scale,
        } => eval(&cli, pred, gt, cap, no_median_scale),
        Command::TrainToy {
            steps,
            augmentation,
            segmentation,
            learning_rate,
        } => train(&cli, steps, augmentation, segmentation, learning_rate),
        Command::GradCheck { ref target } => gradcheck(&cli, target),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn load_config<T: serde::de::DeserializeOwned + Default>(cli: &Cli) -> Result<T> {
    match &cli.config {
        Some(path) => io::read_json(path),
        None => Ok(T::default()),
    }
}

fn synth(cli: &Cli, kind: SceneKind, width: usize, height: usize, offset: &[f64], weak: bool) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    let mut spec = match &cli.config {
        Some(path) => io::read_json::<SceneSpec>(path)?,
        None => {
            let mut spec = match kind {
                SceneKind::Plane => SceneSpec::desk_plane(seed),
                SceneKind::Tube => SceneSpec::desk_tube(seed),
            };
            spec.weak_texture = weak;
            spec
        }
    };
    if let Some(seed) = cli.seed {
        spec.texture_seed = seed;
    }
    if offset.len() != 3 {
        return Err(Error::Domain(format!(
            "--source-offset needs x,y,z, got {} values",
            offset.len()
        )));
    }
    let scene = Scene::from_spec(&spec)?;
    let k = CameraIntrinsics::centered(width, height)?;
    let centre = Vector3::new(offset[0], offset[1], offset[2]);
    let pair = make_pair(&scene, &k, &PoseSE3::identity(), &PoseSE3::from_translation(-centre))?;
    let out = &cli.out;
    io::write_png(&out.join("target.png"), &pair.target)?;
    io::write_pfm(&out.join("target_depth.pfm"), &pair.target_depth)?;
    io::write_png(&out.join("source.png"), &pair.source)?;
    io::write_pfm(&out.join("source_depth.pfm"), &pair.source_depth)?;
    io::write_json(&out.join("pose_t_to_s.json"), &pair.pose_t_to_s)?;
    io::write_json(&out.join("intrinsics.json"), &k)?;
    io::write_json(&out.join("scene.json"), &spec)?;
    println!(
        "rendered {width}x{height} pair, target depth {:.3}..{:.3} mm",
        pair.target_depth.min_value(),
        pair.target_depth.max_value()
    );
    Ok(ExitCode::SUCCESS)
}

fn warp(
    cli: &Cli,
    depth: &Path,
    source: &Path,
    pose: &Path,
    intrinsics: Option<&Path>,
    target: Option<&Path>,
    source_depth: Option<&Path>,
) -> Result<ExitCode> {
    let depth = io::read_pfm(depth)?;
    let source = io::read_png(source)?;
    let pose: PoseSE3 = io::read_json(pose)?;
    let k = match intrinsics {
        Some(path) => io::read_json(path)?,
        None => CameraIntrinsics::centered(depth.width(), depth.height())?,
    };
    let field = warp_field(&depth, &k, &pose)?;
    let recon = synthesize_view(&source, &field)?;
    let out = &cli.out;
    io::write_png(&out.join("recon.png"), &recon.values)?;
    io::write_mask_png(&out.join("valid.png"), &recon.valid)?;
    io::write_pfm(&out.join("src_depth.pfm"), &field.src_depth)?;
    println!("valid pixels: {}/{}", recon.valid.count(), depth.len_pixels());
    if let Some(path) = target {
        let target = io::read_png(path)?;
        if !target.same_shape(&recon.values) {
            return Err(Error::Shape(format!(
                "target {}x{}x{} does not match reconstruction {}x{}x{}",
                target.height(),
                target.width(),
                target.channels(),
                recon.values.height(),
                recon.values.width(),
                recon.values.channels()
            )));
        }
        let (mut sum, mut n) = (0.0, 0usize);
        for p in 0..target.len_pixels() {
            if recon.valid.at(p) {
                for (a, b) in recon.values.pixel(p).iter().zip(target.pixel(p)) {
                    sum += (a - b).abs();
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::EmptySupport("no valid reconstructed pixels"));
        }
        println!("mean abs photometric error: {:.6}", sum / n as f64);
    }
    if let Some(path) = source_depth {
        let label = depth_pseudo_label(&field, &io::read_pfm(path)?, &pose)?;
        io::write_pfm(&out.join("pseudo_label.pfm"), &label.depth)?;
        io::write_mask_png(&out.join("pseudo_label_valid.png"), &label.valid)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_fill(fill: &str) -> Result<MaskFill> {
    if fill == "mean" {
        return Ok(MaskFill::Mean);
    }
    fill.parse::<f64>()
        .ok()
        .filter(|v| (0.0..=1.0).contains(v))
        .map(MaskFill::Value)
        .ok_or_else(|| Error::Domain(format!("fill must be `mean` or a number in [0, 1], got `{fill}`")))
}

fn augment(cli: &Cli, image: &Path, fill: &str) -> Result<ExitCode> {
    let fill = parse_fill(fill)?;
    let image = io::read_png(image)?;
    let seed = cli.seed.unwrap_or(0);
    let mask = make_occlusion_mask(image.height(), image.width(), seed)?;
    let augmented = apply_mask(&image, &mask, fill.resolve(&image))?;
    let out = &cli.out;
    io::write_png(&out.join("augmented.png"), &augmented)?;
    io::write_mask_png(&out.join("mask.png"), &mask.occluded)?;
    io::write_json(&out.join("mask.json"), &json!({ "rect": mask.rect, "seed": seed }))?;
    let r = mask.rect;
    println!(
        "occluded rows {}..{} cols {}..{}",
        r.top,
        r.top + r.height,
        r.left,
        r.left + r.width
    );
    Ok(ExitCode::SUCCESS)
}

fn nmf_seg(
    cli: &Cli,
    paths: &[PathBuf],
    k: Option<usize>,
    max_iters: Option<usize>,
    temperature: f64,
) -> Result<ExitCode> {
    let mut opts: NmfOptions = load_config(cli)?;
    if let Some(k) = k {
        opts.k = k;
    }
    if let Some(iters) = max_iters {
        opts.max_iters = iters;
    }
    if let Some(seed) = cli.seed {
        opts.seed = seed;
    }
    let images = paths.iter().map(|p| io::read_png(p)).collect::<Result<Vec<_>>>()?;
    let features = extract_features(&images, &FilterBank::default_with_seed(opts.seed))?;
    let result = nmf_factorize(features.matrix(), &opts)?;
    let (h, w) = (features.height(), features.width());
    let maps = build_segmentations(&result.p, images.len(), h, w, temperature)?;
    for (i, map) in maps.iter().enumerate() {
        io::write_label_png(&cli.out.join(format!("seg_{i}.png")), &map.argmax_labels(), h, w)?;
        for class in 0..map.classes() {
            io::write_pfm(
                &cli.out.join(format!("probs_{i}_{class}.pfm")),
                &map.probs().channel(class),
            )?;
        }
    }
    let diagnostics = json!({
        "k": opts.k,
        "iterations": result.iterations_run,
        "frobenius_error": result.final_error(),
        "relative_error": result.relative_error(features.matrix()),
        "orthogonality_defect": result.orthogonality_defect(),
    });
    io::write_json(&cli.out.join("nmf.json"), &diagnostics)?;
    println!("frobenius error: {:.6e}", result.final_error());
    println!("orthogonality defect: {:.6e}", result.orthogonality_defect());
    Ok(ExitCode::SUCCESS)
}

fn eval(cli: &Cli, pred: &[PathBuf], gt: &[PathBuf], cap: Option<f64>, no_median_scale: bool) -> Result<ExitCode> {
    if pred.len() != gt.len() {
        return Err(Error::Domain(format!(
            "{} predictions but {} ground-truth maps",
            pred.len(),
            gt.len()
        )));
    }
    let mut opts: EvalOptions = load_config(cli)?;
    if let Some(cap) = cap {
        opts.cap_mm = cap;
    }
    if no_median_scale {
        opts.median_scale = false;
    }
    let preds = pred.iter().map(|p| io::read_pfm(p)).collect::<Result<Vec<_>>>()?;
    let gts = gt.iter().map(|p| io::read_pfm(p)).collect::<Result<Vec<_>>>()?;
    let frames: Vec<Frame> = pred
        .iter()
        .zip(preds.iter().zip(&gts))
        .map(|(path, (p, g))| Frame {
            name: path
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
            pred: p,
            gt: g,
        })
        .collect();
    let rows = evaluate_batch(&frames, &opts)?;
    let csv = cli.out.join("metrics.csv");
    io::write_metrics_csv(&csv, &rows)?;
    print!(
        "{}",
        fs::read_to_string(&csv).map_err(|source| Error::Io {
            path: csv.clone(),
            source
        })?
    );
    Ok(ExitCode::SUCCESS)
}

fn train(
    cli: &Cli,
    steps: Option<usize>,
    augmentation: bool,
    segmentation: bool,
    learning_rate: Option<f64>,
) -> Result<ExitCode> {
    let mut config: RunConfig = load_config(cli)?;
    if let Some(steps) = steps {
        config.steps = steps;
    }
    if let Some(lr) = learning_rate {
        config.learning_rate = lr;
    }
    config.augmentation |= augmentation;
    config.segmentation |= segmentation;
    if let Some(seed) = cli.seed {
        config.mask_seed = seed;
    }
    config.output_dir = None;
    config.validate()?;
    // Saved without the output directory so reruns elsewhere are byte-identical.
    io::write_json(&cli.out.join("config.json"), &config)?;
    config.output_dir = Some(cli.out.clone());
    let report = train_toy(&config)?;
    let m = &report.metrics;
    println!(
        "steps {} loss {:.6e} -> {:.6e}",
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("abs_rel {:.6} rmse {:.6} delta {:.6}", m.abs_rel, m.rmse, m.delta);
    if let Some(r) = &report.corrupt_region_metrics {
        println!("corrupt region abs_rel {:.6}", r.abs_rel);
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(cli: &Cli, target: &str) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    let reports: Vec<GradCheckReport> = if target == "all" {
        grad_check_all(seed)?
    } else {
        vec![grad_check(target, seed)?]
    };
    for r in &reports {
        println!(
            "{:<28} max rel err {:.3e} ({} instances) {}",
            r.target,
            r.max_rel_error,
            r.instances,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    io::write_json(&cli.out.join("grad_check.json"), &reports)?;
    Ok(if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
