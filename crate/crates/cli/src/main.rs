//! `fcss` command-line front end.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or IO error.

mod imageio;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fcss::css::ShiftMode;
use fcss::descriptor::extract_dense;
use fcss::evalkit::{flow_accuracy, format_report, pck, synth_pair_seeded, synthetic_texture, GroundTruthFlow, WarpBounds, FLOW_THRESHOLD, PCK_ALPHAS};
use fcss::gradcheck::GRAD_TOL;
use fcss::io::{format_keypoints, load_flow, load_model, parse_keypoints, save_flow, save_model, save_tensor};
use fcss::learning::{train_epoch, BBox, ImagePairSample, OptimizerState, TrainConfig, DEFAULT_LEARNING_RATE};
use fcss::matching::{flow_to_rgb, nn_flow, smooth_flow, warp_image, SearchRegion, SMOOTH_ITERATIONS, SMOOTH_THRESHOLD};
use fcss::model::{Model, ModelConfig, DEFAULT_PATTERNS_PER_LEVEL};
use fcss::selftest::{gradient_report, run_selftest, SelftestOptions};
use fcss::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageio::{load_image, save_image, save_rgb};
use crate::manifest::{format_bbox, parse_bbox, parse_manifest};

#[derive(Parser)]
#[command(name = "fcss", version, about = "Dense self-similarity descriptors: extraction, training and matching")]
struct Cli {
    /// Worker threads; 1 gives fully deterministic runs.
    #[arg(long, global = true, env = "FCSS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Bilinear,
    IntegerNearest,
}

impl From<Mode> for ShiftMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Bilinear => ShiftMode::Bilinear,
            Mode::IntegerNearest => ShiftMode::Nearest,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly initialized model.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampling patterns per pyramid level.
        #[arg(long, default_value_t = DEFAULT_PATTERNS_PER_LEVEL)]
        patterns: usize,
        #[arg(long, value_enum, default_value_t = Mode::Bilinear)]
        mode: Mode,
    },
    /// Extract the dense descriptor field of an image.
    Extract {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Bilinear)]
        mode: Mode,
    },
    /// Train sampling patterns on a manifest of image pairs.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model_in: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
        lr: Real,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        freeze_backbone: bool,
    },
    /// Dense nearest-neighbour flow from source to target.
    Match {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Source object box x,y,w,h; pixels outside are marked invalid.
        #[arg(long, value_parser = parse_bbox)]
        bbox_a: Option<BBox>,
        /// Target object box x,y,w,h; matches are restricted to it.
        #[arg(long, value_parser = parse_bbox)]
        bbox_b: Option<BBox>,
        /// Search window half-width in pixels.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        out_flow: PathBuf,
        /// Colour-coded flow; defaults to the flow path with a .png extension.
        #[arg(long)]
        out_vis: Option<PathBuf>,
        #[arg(long)]
        out_warp: PathBuf,
        #[arg(long, default_value_t = SMOOTH_ITERATIONS)]
        smooth_iters: usize,
    },
    /// Score a flow against ground-truth flow or keypoints.
    Eval {
        #[arg(long)]
        flow: PathBuf,
        /// Ground-truth flow file; its valid bitmap is the foreground mask.
        #[arg(long, conflicts_with = "keypoints")]
        gt_flow: Option<PathBuf>,
        #[arg(long, default_value_t = FLOW_THRESHOLD)]
        threshold: Real,
        /// Source keypoints, one `x y` per line.
        #[arg(long, requires_all = ["target_keypoints", "bbox"])]
        keypoints: Option<PathBuf>,
        #[arg(long)]
        target_keypoints: Option<PathBuf>,
        /// Target object box x,y,w,h; PCK tolerance is alpha * max(w, h).
        #[arg(long, value_parser = parse_bbox)]
        bbox: Option<BBox>,
        #[arg(long)]
        alpha: Vec<Real>,
    },
    /// Run the built-in consistency suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        oracle_configs: usize,
        #[arg(long, default_value_t = 3)]
        gradient_seeds: usize,
        #[arg(long, hide = true)]
        force_fail: bool,
    },
    /// Generate synthetic warped pairs with ground truth and a manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_model(path: &Path) -> Result<Model> {
    load_model(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn init(out: &Path, seed: u64, patterns: usize, mode: Mode) -> Result<bool> {
    let mut config = ModelConfig::default();
    config.patterns_per_level = vec![patterns; config.levels()];
    config.css.shift_mode = mode.into();
    let model = Model::init(config, seed)?;
    save_model(out, &model).with_context(|| format!("cannot write {}", out.display()))?;
    println!(
        "{}",
        format_report(&[
            ("seed", seed.to_string()),
            ("K", model.levels().to_string()),
            ("L", model.descriptor_dim().to_string()),
            ("out", out.display().to_string()),
        ])
    );
    Ok(true)
}

fn extract(image: &Path, model: &Path, out: &Path) -> Result<bool> {
    let model = read_model(model)?;
    let img = load_image(image)?;
    let field = extract_dense(&img, &model)?;
    save_tensor(out, &field.values).with_context(|| format!("cannot write {}", out.display()))?;
    println!(
        "{}",
        format_report(&[
            ("L", field.dim().to_string()),
            ("H", field.height().to_string()),
            ("W", field.width().to_string()),
        ])
    );
    Ok(true)
}

fn gradcheck(seed: u64, mode: Mode) -> Result<bool> {
    let report = gradient_report(seed, mode.into())?;
    println!("{}", format_report(&[("seed", seed.to_string()), ("mode", format!("{mode:?}")), ("tol", format!("{GRAD_TOL:e}"))]));
    for g in &report.groups {
        let status = if g.approximate {
            "approximate"
        } else if g.passes() {
            "ok"
        } else {
            "FAIL"
        };
        println!(
            "{}",
            format_report(&[
                ("group", g.name.to_string()),
                ("max_rel", format!("{:.3e}", g.report.max_rel)),
                ("checked", g.report.checked.to_string()),
                ("skipped", g.report.skipped.to_string()),
                ("status", status.to_string()),
            ])
        );
    }
    if !report.passes() {
        eprintln!("gradient check failed: {}", report.failing().join(", "));
    }
    Ok(report.passes())
}

#[allow(clippy::too_many_arguments)]
fn train(
    manifest: &Path,
    model_in: &Path,
    model_out: &Path,
    epochs: usize,
    lr: Real,
    seed: u64,
    freeze_backbone: bool,
) -> Result<bool> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("cannot read manifest {}", manifest.display()))?;
    let entries = parse_manifest(&text, manifest.parent().unwrap_or(Path::new(".")))?;
    let mut model = read_model(model_in)?;
    let mut pairs = Vec::with_capacity(entries.len());
    for e in &entries {
        pairs.push(ImagePairSample::new(
            load_image(&e.source)?,
            load_image(&e.target)?,
            e.source_bbox,
            e.target_bbox,
        )?);
    }
    let config = TrainConfig {
        learning_rate: lr,
        freeze_backbone,
        ..TrainConfig::default()
    };
    println!(
        "{}",
        format_report(&[
            ("seed", seed.to_string()),
            ("pairs", pairs.len().to_string()),
            ("epochs", epochs.to_string()),
            ("lr", lr.to_string()),
            ("margin", config.loss.margin.to_string()),
            ("batch_cap", config.batch_cap.to_string()),
            ("tau", config.mining.tau.to_string()),
            ("momentum", config.momentum.to_string()),
            ("freeze_backbone", freeze_backbone.to_string()),
        ])
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OptimizerState::default();
    for epoch in 1..=epochs {
        let stats = train_epoch(&pairs, &mut model, &mut state, &config, &mut rng)?;
        println!(
            "{}",
            format_report(&[
                ("epoch", epoch.to_string()),
                ("mean_loss", format!("{:.6}", stats.mean_loss())),
                ("positives", stats.total_positives().to_string()),
                ("negatives", stats.total_negatives().to_string()),
                ("mean_positive_distance", format!("{:.6}", stats.mean_positive_distance())),
            ])
        );
    }
    save_model(model_out, &model).with_context(|| format!("cannot write {}", model_out.display()))?;
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn run_match(
    source: &Path,
    target: &Path,
    model: &Path,
    bbox_a: Option<BBox>,
    bbox_b: Option<BBox>,
    window: Option<usize>,
    out_flow: &Path,
    out_vis: Option<&Path>,
    out_warp: &Path,
    smooth_iters: usize,
) -> Result<bool> {
    let model = read_model(model)?;
    let src = load_image(source)?;
    let tgt = load_image(target)?;
    let fa = extract_dense(&src, &model)?;
    let fb = extract_dense(&tgt, &model)?;
    let mut flow = nn_flow(&fa, &fb, SearchRegion { bbox: bbox_b, window })?;
    if smooth_iters > 0 {
        flow = smooth_flow(&flow, smooth_iters, SMOOTH_THRESHOLD);
    }
    if let Some(b) = bbox_a {
        b.check(fa.width(), fa.height())?;
        let w = fa.width();
        for (i, v) in flow.valid.iter_mut().enumerate() {
            *v &= b.contains(i % w, i / w);
        }
    }
    save_flow(out_flow, &flow).with_context(|| format!("cannot write {}", out_flow.display()))?;
    let vis = out_vis.map(Path::to_path_buf).unwrap_or_else(|| out_flow.with_extension("png"));
    save_rgb(&vis, flow.width(), flow.height(), flow_to_rgb(&flow, None))?;
    save_image(out_warp, &warp_image(&tgt, &flow))?;
    println!(
        "{}",
        format_report(&[
            ("H", flow.height().to_string()),
            ("W", flow.width().to_string()),
            ("valid", flow.valid_count().to_string()),
            ("smooth_iters", smooth_iters.to_string()),
        ])
    );
    Ok(true)
}

fn read_points(path: &Path) -> Result<Vec<(Real, Real)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read keypoints {}", path.display()))?;
    parse_keypoints(&text).with_context(|| format!("in {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn eval(
    flow: &Path,
    gt_flow: Option<&Path>,
    threshold: Real,
    keypoints: Option<&Path>,
    target_keypoints: Option<&Path>,
    bbox: Option<BBox>,
    alphas: &[Real],
) -> Result<bool> {
    let pred = load_flow(flow).with_context(|| format!("cannot load flow {}", flow.display()))?;
    if let Some(gt) = gt_flow {
        let gt = load_flow(gt).with_context(|| format!("cannot load flow {}", gt.display()))?;
        let acc = flow_accuracy(
            &pred,
            &GroundTruthFlow {
                flow: gt.flow,
                mask: gt.valid,
            },
            threshold,
        )?;
        println!("{}", format_report(&[("acc", format!("{acc:.6}")), ("threshold", threshold.to_string())]));
        return Ok(true);
    }
    let (Some(src), Some(tgt), Some(bbox)) = (keypoints, target_keypoints, bbox) else {
        bail!("eval needs --gt-flow, or --keypoints with --target-keypoints and --bbox");
    };
    let src = read_points(src)?;
    let tgt = read_points(tgt)?;
    let alphas = if alphas.is_empty() { PCK_ALPHAS.to_vec() } else { alphas.to_vec() };
    for alpha in alphas {
        let v = pck(&pred, &src, &tgt, (bbox.h, bbox.w), alpha)?;
        println!("{}", format_report(&[("pck", format!("{v:.6}")), ("alpha", alpha.to_string())]));
    }
    Ok(true)
}

fn selftest(opts: SelftestOptions) -> Result<bool> {
    let report = run_selftest(&opts);
    println!("{}", format_report(&[("seed", opts.seed.to_string())]));
    for s in &report.suites {
        let status = if s.passed { "pass" } else { "FAIL" };
        println!("suite={} status={status} {}", s.name, s.detail);
    }
    println!("speedup={:.1}", report.timing.speedup());
    if !report.passed() {
        eprintln!("failing suites: {}", report.failing().join(", "));
    }
    Ok(report.passed())
}

fn synth(out_dir: &Path, count: usize, size: usize, seed: u64) -> Result<bool> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    for k in 0..count {
        let image = synthetic_texture(size, size, &mut rng);
        let pair = synth_pair_seeded(&image, &WarpBounds::default(), rng.gen())?;
        let name = |stem: &str, ext: &str| format!("{stem}_{k:03}.{ext}");
        let (src, tgt) = (name("source", "png"), name("target", "png"));
        save_image(&out_dir.join(&src), &pair.sample.source)?;
        save_image(&out_dir.join(&tgt), &pair.sample.target)?;
        let gt = fcss::matching::FlowField::new(pair.gt.flow.clone(), pair.gt.mask.clone())?;
        save_flow(out_dir.join(name("gt", "fcfl")), &gt)?;
        std::fs::write(out_dir.join(name("kp_source", "txt")), format_keypoints(&pair.source_keypoints.points))?;
        std::fs::write(out_dir.join(name("kp_target", "txt")), format_keypoints(&pair.target_keypoints.points))?;
        manifest.push_str(&format!(
            "{src} {tgt} {} {}\n",
            format_bbox(&pair.sample.source_bbox),
            format_bbox(&pair.sample.target_bbox)
        ));
    }
    let path = out_dir.join("manifest.txt");
    std::fs::write(&path, manifest).with_context(|| format!("cannot write {}", path.display()))?;
    println!(
        "{}",
        format_report(&[
            ("seed", seed.to_string()),
            ("pairs", count.to_string()),
            ("size", size.to_string()),
            ("manifest", path.display().to_string()),
        ])
    );
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot build thread pool")?;
    }
    match cli.command {
        Command::Init { out, seed, patterns, mode } => init(&out, seed, patterns, mode),
        Command::Extract { image, model, out } => extract(&image, &model, &out),
        Command::Gradcheck { seed, mode } => gradcheck(seed, mode),
        Command::Train {
            manifest,
            model_in,
            model_out,
            epochs,
            lr,
            seed,
            freeze_backbone,
        } => train(&manifest, &model_in, &model_out, epochs, lr, seed, freeze_backbone),
        Command::Match {
            source,
            target,
            model,
            bbox_a,
            bbox_b,
            window,
            out_flow,
            out_vis,
            out_warp,
            smooth_iters,
        } => run_match(
            &source,
            &target,
            &model,
            bbox_a,
            bbox_b,
            window,
            &out_flow,
            out_vis.as_deref(),
            &out_warp,
            smooth_iters,
        ),
        Command::Eval {
            flow,
            gt_flow,
            threshold,
            keypoints,
            target_keypoints,
            bbox,
            alpha,
        } => eval(
            &flow,
            gt_flow.as_deref(),
            threshold,
            keypoints.as_deref(),
            target_keypoints.as_deref(),
            bbox,
            &alpha,
        ),
        Command::Selftest {
            seed,
            oracle_configs,
            gradient_seeds,
            force_fail,
        } => selftest(SelftestOptions {
            seed,
            oracle_configs,
            gradient_seeds,
            force_fail,
        }),
        Command::Synth {
            out_dir,
            count,
            size,
            seed,
        } => synth(&out_dir, count, size, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
