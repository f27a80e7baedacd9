use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use sgglc_core::checkpoint;
use sgglc_core::imaging::{self, ImageBuffer};
use sgglc_core::metrics::{self, MetricReport};
use sgglc_core::model;
use sgglc_core::prior::{self, PriorMap, VggSlice, VGG19_WIDTHS};
use sgglc_core::train::{self, Corpus, TrainConfig, Trainer};
use sgglc_core::{ModelConfig, ParameterStore};

/// Reference complexity of the default models at 1280x720: scale, params,
/// multiply-adds.
const REFERENCE: [(usize, f64, f64); 3] = [(2, 490e3, 45e9), (3, 497e3, 48.5e9), (4, 506e3, 42e9)];

#[derive(Parser)]
#[command(name = "sgglc", version, about = "Semantic-guided global-local super-resolution")]
struct Cli {
    /// Emit one JSON object instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for initialization, sampling and random extractors.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Super-resolve one image.
    Sr(SrArgs),
    /// PSNR/SSIM of a test image against a reference.
    Metrics(MetricsArgs),
    /// Parameter count and multiply-adds of a configuration.
    Stats(StatsArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
    /// Train on a directory of HR images.
    Train(TrainArgs),
    /// Degrade, super-resolve and score every image of a directory.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ExtractorArgs {
    /// Compute priors with the feature extractor instead of reading them.
    #[arg(long)]
    extract: bool,
    /// Extractor weight bundle; a fixed-seed random extractor otherwise.
    #[arg(long)]
    vgg: Option<PathBuf>,
}

#[derive(Args)]
struct SrArgs {
    /// Model configuration JSON; defaults to the one stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// SGT1 prior tensor aligned with (or coarser than) the input.
    #[arg(long, conflicts_with = "extract")]
    prior: Option<PathBuf>,
    #[command(flatten)]
    extractor: ExtractorArgs,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    scale: usize,
}

#[derive(Args)]
struct StatsArgs {
    /// Model configuration JSON; the default x2 model otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output resolution as WIDTHxHEIGHT.
    #[arg(long, default_value = "1280x720", value_parser = parse_res)]
    out_res: (usize, usize),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model configuration JSON; the tiny x2 model otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training settings JSON; defaults otherwise.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Directory of HR training images.
    #[arg(long)]
    data: PathBuf,
    /// Starting weights; fresh initialization otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    vgg: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of HR images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vgg: Option<PathBuf>,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var("SGGLC_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    let threads = if cli.deterministic { Some(1) } else { threads };
    if let Some(n) = threads {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let name = match &cli.command {
        Command::Sr(_) => "sr",
        Command::Metrics(_) => "metrics",
        Command::Stats(_) => "stats",
        Command::Gradcheck(_) => "gradcheck",
        Command::Train(_) => "train",
        Command::Bench(_) => "bench",
    };
    let outcome = match &cli.command {
        Command::Sr(a) => sr(&cli, a),
        Command::Metrics(a) => run_metrics(a),
        Command::Stats(a) => stats(a),
        Command::Gradcheck(a) => gradcheck(&cli, a),
        Command::Train(a) => run_train(&cli, a),
        Command::Bench(a) => bench(&cli, a),
    };
    match outcome {
        Ok(out) => {
            if cli.json {
                println!("{}", json!({"command": name, "ok": out.ok, "result": out.data}));
            } else {
                print!("{}", out.text);
            }
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({"command": name, "ok": false, "error": format!("{e:#}")}));
            } else {
                eprintln!("error: {e:#}");
            }
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

/// Misuse detected after parsing; exits like a clap usage error.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

struct Output {
    ok: bool,
    data: Value,
    text: String,
}

impl Output {
    fn ok(data: Value, text: String) -> Self {
        Output { ok: true, data, text }
    }
}

// -- shared loading -------------------------------------------------------------

fn load_config(path: Option<&Path>, fallback: impl FnOnce() -> Result<ModelConfig>) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => ModelConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => fallback()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves the configuration against a checkpoint and loads its weights.
fn load_model(config: Option<&Path>, dir: &Path) -> Result<(ModelConfig, ParameterStore<f32>)> {
    let manifest = checkpoint::read_manifest(dir).with_context(|| format!("checkpoint {}", dir.display()))?;
    let stored = manifest.config.clone();
    let cfg = load_config(config, || {
        stored.clone().context("the checkpoint stores no configuration; pass --config")
    })?;
    if let Some(s) = &stored {
        if s.scale != cfg.scale {
            bail!("checkpoint was trained for x{} but the configuration asks for x{}", s.scale, cfg.scale);
        }
    }
    let params = model::load_checkpoint_for(dir, &cfg)?;
    Ok((cfg, params))
}

fn extractor(path: Option<&Path>, cfg: &ModelConfig, seed: u64) -> Result<VggSlice> {
    let vgg = match path {
        Some(p) => VggSlice::load(p).with_context(|| format!("extractor {}", p.display()))?,
        None => {
            let mut widths = VGG19_WIDTHS;
            widths[3] = cfg.prior_channels;
            VggSlice::random(widths, seed)?
        }
    };
    if vgg.output_channels() != cfg.prior_channels {
        bail!(
            "extractor emits {} channels, configuration expects {}",
            vgg.output_channels(),
            cfg.prior_channels
        );
    }
    Ok(vgg)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["png", "ppm", "pgm"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG/PPM/PGM images in {}", dir.display());
    }
    Ok(paths)
}

fn to_rgb(img: ImageBuffer) -> ImageBuffer {
    if img.channels == 3 {
        return img;
    }
    ImageBuffer::from_fn(img.width, img.height, 3, |x, y, _| img.get(x, y, 0))
}

// -- subcommands -----------------------------------------------------------------

fn sr(cli: &Cli, a: &SrArgs) -> Result<Output> {
    let (cfg, params) = load_model(a.config.as_deref(), &a.checkpoint)?;
    let img = to_rgb(imaging::load_image(&a.input)?);
    let start = Instant::now();
    let prior: Option<PriorMap> = match (cfg.uses_prior(), &a.prior, a.extractor.extract) {
        (false, _, _) => None,
        (true, Some(p), _) => Some(prior::load_prior(p, (img.height, img.width), cfg.prior_channels)?),
        (true, None, true) => {
            let vgg = extractor(a.extractor.vgg.as_deref(), &cfg, cli.seed)?;
            Some(prior::extract_prior(&img, &vgg)?)
        }
        (true, None, false) => {
            return Err(Usage("this configuration needs a prior: pass --prior FILE or --extract".into()).into())
        }
    };
    let out = model::super_resolve(&img, prior.as_ref(), &params, &cfg)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    imaging::save_image(&out, &a.output)?;
    let data = json!({
        "input": a.input, "output": a.output, "scale": cfg.scale,
        "width": out.width, "height": out.height, "elapsed_ms": ms,
    });
    let text = format!(
        "{}x{} -> {}x{} (x{}) in {ms:.1} ms, wrote {}\n",
        img.width,
        img.height,
        out.width,
        out.height,
        cfg.scale,
        a.output.display()
    );
    Ok(Output::ok(data, text))
}

fn report_json(file: &Path, scale: usize, r: &MetricReport) -> Value {
    json!({"file": file, "scale": scale, "psnr_db": r.psnr, "ssim": r.ssim})
}

fn run_metrics(a: &MetricsArgs) -> Result<Output> {
    let (reference, test) = (imaging::load_image(&a.reference)?, imaging::load_image(&a.test)?);
    let r = metrics::evaluate(&reference, &test, a.scale)?;
    let text = format!("PSNR {:.4} dB, SSIM {:.6} (border {})\n", r.psnr, r.ssim, a.scale);
    Ok(Output::ok(report_json(&a.test, a.scale, &r), text))
}

fn stats(a: &StatsArgs) -> Result<Output> {
    let cfg = load_config(a.config.as_deref(), || Ok(ModelConfig::base(2)))?;
    let (w, h) = a.out_res;
    let s = model::stats(&cfg, h, w)?;
    let total = s.multiply_adds.total;
    let mut text = format!(
        "{:.1}K params, {:.2}G multiply-adds at {w}x{h} (x{})\n",
        s.param_count as f64 / 1e3,
        total / 1e9,
        cfg.scale
    );
    text.push_str("params by module:\n");
    for (k, v) in &s.param_breakdown {
        text.push_str(&format!("  {k:<16} {:>9.2}K\n", *v as f64 / 1e3));
    }
    text.push_str("multiply-adds by module:\n");
    for (k, v) in &s.multiply_adds.breakdown {
        text.push_str(&format!("  {k:<16} {:>9.3}G\n", v / 1e9));
    }
    let reference = REFERENCE
        .iter()
        .find(|(r, _, _)| *r == cfg.scale && cfg == ModelConfig::base(*r) && (w, h) == (1280, 720));
    let comparison = reference.map(|&(_, p, m)| {
        let dp = 100.0 * (s.param_count as f64 / p - 1.0);
        let dm = 100.0 * (total / m - 1.0);
        text.push_str(&format!(
            "reference: {:.0}K params ({dp:+.1}%), {:.1}G multiply-adds ({dm:+.1}%)\n",
            p / 1e3,
            m / 1e9
        ));
        json!({"params": p, "multiply_adds": m, "params_deviation_pct": dp, "multiply_adds_deviation_pct": dm})
    });
    let data = json!({
        "scale": cfg.scale,
        "out_res": [w, h],
        "params": s.param_count,
        "params_k": s.param_count as f64 / 1e3,
        "multiply_adds": total,
        "multiply_adds_g": total / 1e9,
        "param_breakdown": s.param_breakdown,
        "multiply_add_breakdown": s.multiply_adds.breakdown,
        "reference": comparison,
    });
    Ok(Output::ok(data, text))
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<Output> {
    let cfg = load_config(a.config.as_deref(), || Ok(ModelConfig::tiny(2)))?;
    let start = Instant::now();
    let report = train::grad_check(&cfg, a.size, cli.seed, a.tolerance)?;
    let secs = start.elapsed().as_secs_f64();
    let mut text = format!(
        "{} tensors, max relative error {:.3e} (tolerance {:.1e}), {secs:.1} s: {}\n",
        report.entries.len(),
        report.max_rel_error(),
        a.tolerance,
        if report.passed() { "ok" } else { "FAILED" }
    );
    for e in report.failures() {
        text.push_str(&format!("  {} ({} elements): {:.3e}\n", e.name, e.elements, e.max_rel_error));
    }
    let data = json!({
        "passed": report.passed(),
        "max_rel_error": report.max_rel_error(),
        "tolerance": a.tolerance,
        "elapsed_s": secs,
        "entries": report.entries,
    });
    Ok(Output {
        ok: report.passed(),
        data,
        text,
    })
}

fn run_train(cli: &Cli, a: &TrainArgs) -> Result<Output> {
    let (cfg, params) = match &a.checkpoint {
        Some(dir) => load_model(a.config.as_deref(), dir)?,
        None => {
            let cfg = load_config(a.config.as_deref(), || Ok(ModelConfig::base(2)))?;
            let params = model::build(&cfg, cli.seed)?;
            (cfg, params)
        }
    };
    let mut tc = match &a.train_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig {
            seed: cli.seed,
            ..Default::default()
        },
    };
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(p) = a.patch {
        tc.patch = p;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if tc.steps == 0 {
        model::save_checkpoint(&params, Some(&cfg), &a.output)?;
        let text = format!("0 steps, copied weights to {}\n", a.output.display());
        return Ok(Output::ok(json!({"steps": 0, "output": a.output, "records": []}), text));
    }
    let vgg = if cfg.uses_prior() {
        Some(extractor(a.vgg.as_deref(), &cfg, cli.seed)?)
    } else {
        None
    };
    let corpus = Corpus::load_dir(&a.data, cfg.scale)?;
    let mut trainer = Trainer::new(cfg.clone(), tc, params, vgg)?;
    let quiet = cli.json;
    let summary = trainer.run(&corpus, |r| {
        if !quiet {
            println!("{r}");
        }
    })?;
    model::save_checkpoint(&trainer.params, Some(&cfg), &a.output)?;
    let text = format!(
        "{} steps, L1 {:.6} -> {:.6}, wrote {}\n",
        summary.steps,
        summary.initial_loss.unwrap_or(f64::NAN),
        summary.final_loss.unwrap_or(f64::NAN),
        a.output.display()
    );
    let data = json!({
        "steps": summary.steps,
        "initial_loss": summary.initial_loss,
        "final_loss": summary.final_loss,
        "output": a.output,
        "records": summary.records,
    });
    Ok(Output::ok(data, text))
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<Output> {
    let (cfg, params) = load_model(a.config.as_deref(), &a.checkpoint)?;
    let vgg = if cfg.uses_prior() {
        Some(extractor(a.vgg.as_deref(), &cfg, cli.seed)?)
    } else {
        None
    };
    let r = cfg.scale;
    let paths = list_images(&a.data)?;
    let results: Vec<Result<MetricReport>> = paths
        .par_iter()
        .map(|p| -> Result<MetricReport> {
            let hr = to_rgb(imaging::load_image(p)?).crop_to_multiple(r);
            let lr = imaging::degrade_bicubic(&hr, r)?;
            let prior = vgg.as_ref().map(|v| prior::extract_prior(&lr, v)).transpose()?;
            let sr = model::super_resolve(&lr, prior.as_ref(), &params, &cfg)?;
            Ok(metrics::evaluate(&hr, &sr, r)?)
        })
        .collect();
    let mut rows = Vec::with_capacity(paths.len());
    let mut text = format!("{:<32} {:>10} {:>8}\n", "image", "PSNR (dB)", "SSIM");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (p, res) in paths.iter().zip(results) {
        let m = res.with_context(|| format!("{}", p.display()))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        text.push_str(&format!("{name:<32} {:>10.4} {:>8.6}\n", m.psnr, m.ssim));
        psnr_sum += m.psnr;
        ssim_sum += m.ssim;
        rows.push(report_json(p, r, &m));
    }
    let n = rows.len() as f64;
    let (mp, ms) = (psnr_sum / n, ssim_sum / n);
    text.push_str(&format!("{:<32} {mp:>10.4} {ms:>8.6}\n", "mean"));
    let data = json!({"scale": r, "images": rows, "mean": {"psnr_db": mp, "ssim": ms}});
    Ok(Output::ok(data, text))
}
