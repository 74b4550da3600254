//! Command-line orchestration. The binary is a thin wrapper around [`run`]:
//! exit 0 on success (including `--help`), 1 on usage errors, 2 on runtime
//! failures (unreadable files, diverged training, gradient-check breaches).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use ciaosr_core::data::io::{list_images, load_image, save_image};
use ciaosr_core::gradcheck;
use ciaosr_core::metrics::{psnr, MetricConfig};
use ciaosr_core::model::{scaled_size, ModelConfig, SrModel, Variant};
use ciaosr_core::tensor::Tensor;
use ciaosr_core::trainer::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ciaosr_core::trainer::{evaluate, loss_csv, train, EvalRow, TrainConfig};
use ciaosr_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "ciaosr",
    version,
    about = "Arbitrary-scale image super-resolution toolkit",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a directory of PNG/PPM images
    Train(TrainArgs),
    /// Super-resolve one image to an arbitrary size
    Sr(SrArgs),
    /// Score a checkpoint over a list of scales against ground truth
    Eval(EvalArgs),
    /// Train and compare model variants under one seed
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Report parameter counts and render timing
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of training images
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path; the loss log lands next to it as <out>.loss.csv
    #[arg(long)]
    out: PathBuf,
    /// Built-in preset: "desk" (minutes, narrow model) or "paper" (full schedule)
    #[arg(long, default_value = "desk")]
    preset: String,
    /// JSON file with optional "model" and "train" sections replacing the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for init, sampling, and shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (PNG or PPM)
    #[arg(long = "in")]
    input: PathBuf,
    /// Output image; format follows the extension (.png or .ppm)
    #[arg(long)]
    out: PathBuf,
    /// Magnification factor (>= 1); target size is round(s·H) × round(s·W)
    #[arg(long, conflicts_with = "size", required_unless_present = "size")]
    scale: Option<f64>,
    /// Explicit target size as HxW, e.g. 108x162
    #[arg(long)]
    size: Option<String>,
    /// Comma-separated per-step factors; the chain lands exactly on the target
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<f64>>,
    /// Ground-truth image: prints PSNR of the output (and of the single-step
    /// render when --steps is used, side by side)
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of ground-truth images
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated scale factors, e.g. 2,3,4,6
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
    /// Channel the summary lines quote: "rgb" or "y" (the CSV always has both)
    #[arg(long, default_value = "rgb")]
    metric: String,
    /// Second baseline column: "bicubic" (built in) or "liif" (needs --baseline-ckpt)
    #[arg(long, default_value = "bicubic")]
    baseline: String,
    /// Checkpoint for the liif baseline
    #[arg(long)]
    baseline_ckpt: Option<PathBuf>,
    /// Also write the CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory of training images (also used for scoring)
    #[arg(long)]
    data: PathBuf,
    /// Variants to train, comma separated
    #[arg(long, value_delimiter = ',', default_value = "full,no_nonlocal,mlp_weights,liif")]
    variants: Vec<String>,
    /// Extra local-ensemble sizes to sweep on the full variant
    #[arg(long = "local-size", value_delimiter = ',')]
    local_size: Option<Vec<usize>>,
    /// JSON file with optional "model"/"train" sections (same format as train --config)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the comparison table is scored at
    #[arg(long, default_value_t = 2.0)]
    eval_scale: f64,
    /// Also write the table here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// What to verify: all, tensor, head, or nonlocal
    #[arg(long, default_value = "all")]
    module: String,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 0x5EED)]
    seed: u64,
    /// Sign-flip one analytic gradient to prove the checker catches it
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    /// Number of timed renders; the median is reported
    #[arg(long, default_value_t = 3)]
    repeat: usize,
}

/// Anything that should terminate with exit code 2.
#[derive(Debug)]
enum Failure {
    Core(CoreError),
    Msg(String),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::Core(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Msg(m) => write!(f, "{m}"),
        }
    }
}

fn fail(msg: impl Into<String>) -> Failure {
    Failure::Msg(msg.into())
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("CIAOSR_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        } else {
            eprintln!("warning: CIAOSR_THREADS={v} is not a number; ignored");
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sr(a) => cmd_sr(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

// ---------------------------------------------------------------- presets

#[derive(serde::Deserialize)]
struct FileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn resolve_configs(
    preset: &str,
    config: Option<&Path>,
    seed: u64,
) -> Result<(ModelConfig, TrainConfig), Failure> {
    let (mut model, mut train_cfg) = match preset {
        "desk" => (ModelConfig::desk(), TrainConfig::desk()),
        "paper" => (ModelConfig::default(), TrainConfig::paper()),
        other => return Err(fail(format!("unknown preset `{other}` (expected desk or paper)"))),
    };
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| fail(format!("cannot read config {}: {e}", path.display())))?;
        let file: FileConfig = serde_json::from_str(&text)
            .map_err(|e| fail(format!("bad config {}: {e}", path.display())))?;
        if let Some(m) = file.model {
            model = m;
        }
        if let Some(t) = file.train {
            train_cfg = t;
        }
    }
    train_cfg.seed = seed;
    Ok((model, train_cfg))
}

fn load_dataset(dir: &Path) -> Result<Vec<Tensor<f32>>, Failure> {
    let mut images = Vec::new();
    for path in list_images(dir)? {
        images.push(load_image(&path)?);
    }
    Ok(images)
}

fn load_model(path: &Path) -> Result<SrModel<f32>, Failure> {
    Ok(load_checkpoint(path)?.into_model()?)
}

// ------------------------------------------------------------------ train

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let (model_cfg, train_cfg) = resolve_configs(&a.preset, a.config.as_deref(), a.seed)?;
    let images = load_dataset(&a.data)?;
    let mut model: SrModel<f32> = SrModel::build(model_cfg, a.seed);
    println!(
        "training: {} images, {} epochs x {} iters, batch {}, {} params",
        images.len(),
        train_cfg.epochs,
        train_cfg.iters_per_epoch,
        train_cfg.batch_size,
        model.param_count()
    );
    let report = train(&mut model, &images, &train_cfg, Some(&a.out))?;
    let csv_path = loss_csv_path(&a.out);
    std::fs::write(&csv_path, loss_csv(&report.loss_log))
        .map_err(|e| CoreError::io(&csv_path, e))?;
    println!("checkpoint: {}", a.out.display());
    println!("loss_csv: {}", csv_path.display());
    println!("final_loss={}", report.final_loss);
    Ok(())
}

fn loss_csv_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    ckpt.with_file_name(name)
}

// -------------------------------------------------------------------- sr

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| fail(format!("bad --size `{s}` (expected HxW, e.g. 108x162)")))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| fail(format!("bad --size `{s}`: `{t}` is not a positive integer")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn cmd_sr(a: SrArgs) -> Result<(), Failure> {
    let model = load_model(&a.ckpt)?;
    let input = load_image(&a.input)?;
    let (h, w) = (input.shape()[1], input.shape()[2]);

    let (out_h, out_w) = match (a.scale, a.size.as_deref()) {
        (Some(s), None) => {
            if !(s.is_finite() && s >= 1.0) {
                return Err(fail(format!("bad scale {s}: must be a finite factor >= 1")));
            }
            (scaled_size(h, s), scaled_size(w, s))
        }
        (None, Some(sz)) => parse_size(sz)?,
        _ => unreachable!("clap enforces exactly one of --scale/--size"),
    };

    let identity = (out_h, out_w) == (h, w);
    let sr = match (&a.steps, identity) {
        (_, true) => input.clone(),
        (None, false) => model.render_image(&input, out_h, out_w),
        (Some(steps), false) => {
            if steps.is_empty() || steps.iter().any(|&f| !(f.is_finite() && f > 1.0)) {
                return Err(fail("each --steps factor must be a finite value > 1"));
            }
            model.chain_render(&input, steps, out_h, out_w)
        }
    };
    save_image(&sr, &a.out)?;
    println!("wrote {} ({out_h}x{out_w})", a.out.display());

    if let Some(ref_path) = &a.reference {
        let gt = load_image(ref_path)?;
        if gt.shape() != &[3, out_h, out_w] {
            return Err(fail(format!(
                "--ref is {}x{} but the output is {out_h}x{out_w}",
                gt.shape()[1],
                gt.shape()[2]
            )));
        }
        let rgb = MetricConfig::rgb();
        println!("psnr_rgb={}", psnr(&sr, &gt, &rgb));
        if a.steps.is_some() && !identity {
            // Side-by-side: the same target rendered in a single step.
            let direct = model.render_image(&input, out_h, out_w);
            println!("psnr_rgb_single_step={}", psnr(&direct, &gt, &rgb));
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ eval

fn eval_csv_with_baseline(rows: &[EvalRow], extra: Option<(&str, &[EvalRow])>) -> String {
    let mut out = String::from(
        "scale,images,psnr_rgb,psnr_y,ssim,bicubic_psnr_rgb,bicubic_psnr_y,bicubic_ssim",
    );
    if let Some((name, _)) = extra {
        let _ = write!(out, ",{name}_psnr_rgb,{name}_psnr_y,{name}_ssim");
    }
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scale,
            r.images,
            r.psnr_rgb,
            r.psnr_y,
            r.ssim,
            r.bicubic_psnr_rgb,
            r.bicubic_psnr_y,
            r.bicubic_ssim
        );
        if let Some((_, b)) = extra {
            let _ = write!(out, ",{},{},{}", b[i].psnr_rgb, b[i].psnr_y, b[i].ssim);
        }
        out.push('\n');
    }
    out
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    if a.scales.is_empty() {
        return Err(fail("--scales needs at least one factor"));
    }
    if !matches!(a.metric.as_str(), "rgb" | "y") {
        return Err(fail(format!("bad --metric `{}` (expected rgb or y)", a.metric)));
    }
    let model = load_model(&a.ckpt)?;
    let images = load_dataset(&a.data)?;
    let rows = evaluate(&model, &images, &a.scales)?;

    let baseline_rows;
    let extra = match a.baseline.as_str() {
        "bicubic" => None,
        "liif" => {
            let path = a
                .baseline_ckpt
                .as_deref()
                .ok_or_else(|| fail("--baseline liif needs --baseline-ckpt"))?;
            let liif = load_model(path)?;
            if liif.cfg.variant != Variant::Liif {
                return Err(fail(format!(
                    "--baseline-ckpt holds a `{}` model, not `liif`",
                    liif.cfg.variant
                )));
            }
            baseline_rows = evaluate(&liif, &images, &a.scales)?;
            if baseline_rows.len() != rows.len() {
                return Err(fail("baseline evaluation skipped different scales"));
            }
            Some(("liif", baseline_rows.as_slice()))
        }
        other => return Err(fail(format!("bad --baseline `{other}` (expected bicubic or liif)"))),
    };

    let csv = eval_csv_with_baseline(&rows, extra);
    print!("{csv}");
    for r in &rows {
        let (ours, base) = match a.metric.as_str() {
            "y" => (r.psnr_y, r.bicubic_psnr_y),
            _ => (r.psnr_rgb, r.bicubic_psnr_rgb),
        };
        println!("# scale {}: psnr_{}={} bicubic={}", r.scale, a.metric, ours, base);
    }
    if let Some(path) = &a.out {
        std::fs::write(path, &csv).map_err(|e| CoreError::io(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- ablate

fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    let (base_model_cfg, train_cfg) = resolve_configs(&a.preset, a.config.as_deref(), a.seed)?;
    let variants: Vec<Variant> = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>().map_err(fail))
        .collect::<Result<_, _>>()?;
    if variants.is_empty() {
        return Err(fail("--variants needs at least one name"));
    }
    let images = load_dataset(&a.data)?;

    wiring_check(&base_model_cfg, a.seed)?;

    // (label, local_size, variant) rows: every requested variant at the base
    // local size, then the full variant swept over extra local sizes.
    let base_ls = base_model_cfg.head.local_size;
    let mut jobs: Vec<(String, usize, Variant)> =
        variants.iter().map(|&v| (v.to_string(), base_ls, v)).collect();
    for &ls in a.local_size.iter().flatten() {
        if !(1..=3).contains(&ls) {
            return Err(fail(format!("--local-size {ls} out of range (1, 2 or 3)")));
        }
        if ls != base_ls || !variants.contains(&Variant::Full) {
            jobs.push((format!("full_ls{ls}"), ls, Variant::Full));
        }
    }

    let mut csv = String::from("variant,local_size,params,final_loss,psnr_rgb,bicubic_psnr_rgb\n");
    let mut scored: Vec<(Variant, f64)> = Vec::new();
    for (label, ls, variant) in &jobs {
        let mut cfg = base_model_cfg.clone();
        cfg.variant = *variant;
        cfg.head.local_size = *ls;
        let mut model: SrModel<f32> = SrModel::build(cfg, a.seed);
        println!("# training {label} ({} params)", model.param_count());
        let report = train(&mut model, &images, &train_cfg, None)?;
        let rows = evaluate(&model, &images, &[a.eval_scale])?;
        let row = rows
            .first()
            .ok_or_else(|| fail(format!("eval scale {} skipped every image", a.eval_scale)))?;
        let _ = writeln!(
            csv,
            "{label},{ls},{},{},{},{}",
            model.param_count(),
            report.final_loss,
            row.psnr_rgb,
            row.bicubic_psnr_rgb
        );
        if *ls == base_ls {
            scored.push((*variant, row.psnr_rgb));
        }
    }
    print!("{csv}");
    if let Some(path) = &a.out {
        std::fs::write(path, &csv).map_err(|e| CoreError::io(path, e))?;
    }

    ordering_smoke(&scored);
    Ok(())
}

/// With the non-local projections forced to zero, the full variant must
/// render bit-identically to no_nonlocal — proof the ablation differs only
/// by the cross-scale branch.
fn wiring_check(cfg: &ModelConfig, seed: u64) -> Result<(), Failure> {
    let mut full_cfg = cfg.clone();
    full_cfg.variant = Variant::Full;
    let mut full: SrModel<f32> = SrModel::build(full_cfg, seed);
    for name in ["nonlocal.q.w", "nonlocal.q.b", "nonlocal.k.w", "nonlocal.k.b", "nonlocal.v.w", "nonlocal.v.b"]
    {
        let id = full.params.id_of(name).expect("full variant registers non-local params");
        full.params.get_mut(id).data_mut().fill(0.0);
    }
    let mut ablated_cfg = cfg.clone();
    ablated_cfg.variant = Variant::NoNonlocal;
    let ablated: SrModel<f32> = SrModel::build(ablated_cfg, seed);

    let probe = Tensor::new(
        vec![3, 12, 12],
        (0..3 * 12 * 12).map(|i| ((i * 37) % 101) as f32 / 100.0).collect(),
    );
    let a = full.render_image(&probe, 18, 18);
    let b = ablated.render_image(&probe, 18, 18);
    let identical = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    if identical {
        println!("# wiring check: full with zeroed non-local == no_nonlocal (bit-identical) PASS");
        Ok(())
    } else {
        Err(fail("wiring check failed: zeroed-non-local full differs from no_nonlocal"))
    }
}

fn ordering_smoke(scored: &[(Variant, f64)]) {
    let get = |v: Variant| scored.iter().find(|(x, _)| *x == v).map(|&(_, p)| p);
    if let (Some(full), Some(mlp), Some(liif)) =
        (get(Variant::Full), get(Variant::MlpWeights), get(Variant::Liif))
    {
        if full >= mlp && mlp >= liif {
            println!("# smoke: psnr ordering full >= mlp_weights >= liif holds");
        } else {
            println!(
                "# smoke: psnr ordering full >= mlp_weights >= liif NOT met \
                 (full={full} mlp_weights={mlp} liif={liif}) — training noise at this scale, not fatal"
            );
        }
    }
}

// -------------------------------------------------------------- gradcheck

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if !(a.eps.is_finite() && a.eps > 0.0) {
        return Err(fail(format!("bad --eps {}: must be a positive step", a.eps)));
    }
    let mut reports = Vec::new();
    match a.module.as_str() {
        "tensor" => {
            reports.extend(gradcheck::run_suite(a.seed, a.eps, a.inject_fault.then_some("matmul")))
        }
        "head" => reports.push(gradcheck::run_model_check("head", a.seed, a.eps, a.inject_fault)),
        "nonlocal" => {
            reports.push(gradcheck::run_model_check("nonlocal", a.seed, a.eps, a.inject_fault))
        }
        "all" => {
            reports.extend(gradcheck::run_suite(a.seed, a.eps, a.inject_fault.then_some("matmul")));
            reports.push(gradcheck::run_model_check("head", a.seed, a.eps, false));
            reports.push(gradcheck::run_model_check("nonlocal", a.seed, a.eps, false));
        }
        other => {
            return Err(fail(format!(
                "bad --module `{other}` (expected all, tensor, head or nonlocal)"
            )))
        }
    }
    let mut worst = 0usize;
    for r in &reports {
        println!(
            "{:<28} max_rel_err={:.3e} tol={:.1e} {}",
            r.name,
            r.max_rel_err,
            r.tol,
            if r.pass { "PASS" } else { "FAIL" }
        );
        worst += usize::from(!r.pass);
    }
    if worst > 0 {
        return Err(fail(format!("{worst} gradient check(s) exceeded tolerance")));
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

// ------------------------------------------------------------------ bench

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    if a.repeat == 0 {
        return Err(fail("--repeat must be at least 1"));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let header_params = ckpt.header.total_scalars();
    let model = ckpt.into_model()?;
    let input = load_image(&a.input)?;
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (out_h, out_w) = (scaled_size(h, a.scale), scaled_size(w, a.scale));

    println!("params_total={}", model.param_count());
    println!("params_header={header_params}");
    println!("params_head={}", model.params.scalars_with_prefix("head."));

    let mut times_ms: Vec<f64> = (0..a.repeat)
        .map(|_| {
            let t0 = Instant::now();
            let img = model.render_image(&input, out_h, out_w);
            assert!(img.is_finite());
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times_ms.sort_by(|x, y| x.total_cmp(y));
    let median = times_ms[times_ms.len() / 2];
    println!("renders={} target={out_h}x{out_w}", a.repeat);
    println!("median_ms={median:.3}");
    println!("queries_per_sec={:.1}", (out_h * out_w) as f64 / (median / 1e3));
    Ok(())
}

// ---------------------------------------------------------------- helpers

/// Round-trip a freshly built (untrained) model through a checkpoint file.
/// Exposed for integration tests that need a valid checkpoint without the
/// cost of training.
pub fn write_init_checkpoint(
    path: &Path,
    cfg: ModelConfig,
    seed: u64,
) -> Result<(), CoreError> {
    let model: SrModel<f32> = SrModel::build(cfg, seed);
    save_checkpoint(path, &Checkpoint::from_model(&model, 0, seed))
}
