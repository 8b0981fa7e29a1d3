//! `fitdit` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Errors are
//! written to stderr as one JSON object.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbImage;
use serde::Serialize;
use sha2::{Digest, Sha256};

use fitdit::analysis::{attention_param_ratio, spectrum_pair, spectrum_report, ArchDescription, COUNTING_RULE};
use fitdit::conditioning::PoseKeypoints;
use fitdit::dit::{init_denoiser_params, init_garment_params, ModelConfig};
use fitdit::maskgen::{build_agnostic_mask, BinaryGrid, Category, DilationRange, ParsingMap};
use fitdit::pipeline::{
    eval_metrics, infer_tryon, load_checkpoint, save_checkpoint, train_garment_prior, train_tryon, validate_tryon,
    FreqNorm, InferenceOptions, LossLog, LossRecord, PreparedSample, TrainConfig,
};
use fitdit::rflow::TimestepDistribution;
use fitdit::synthdata::{generate_dataset, image_to_latent, Dataset};

#[derive(Parser, Serialize)]
#[command(name = "fitdit", version, about = "Garment-conditioned rectified-flow try-on at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
enum Command {
    /// Generate a synthetic try-on dataset.
    GenData(GenData),
    /// Stage 1: train the garment branch on flat garments.
    TrainGarment(TrainGarment),
    /// Stage 2: train the denoiser with the garment branch frozen.
    TrainTryon(TrainTryon),
    /// Run try-on inference for one person and garment.
    Tryon(Tryon),
    /// Build an agnostic mask.
    Maskgen(Maskgen),
    /// Rank images by masked spectral distance to a real image.
    Spectrum(Spectrum),
    /// Attention parameter share per resolution of an architecture.
    AnalyzeArch(AnalyzeArch),
    /// SSIM and spectral metrics of predictions against ground truth.
    Eval(Eval),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainGarment(_) => "train-garment",
            Command::TrainTryon(_) => "train-tryon",
            Command::Tryon(_) => "tryon",
            Command::Maskgen(_) => "maskgen",
            Command::Spectrum(_) => "spectrum",
            Command::AnalyzeArch(_) => "analyze-arch",
            Command::Eval(_) => "eval",
        }
    }
}

/// Height and width written as `HxW`.
#[derive(Clone, Copy, Debug, Serialize)]
struct Res {
    h: usize,
    w: usize,
}

fn parse_res(s: &str) -> std::result::Result<Res, String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not HxW"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{v}` is not a positive integer"));
    let r = Res { h: p(h)?, w: p(w)? };
    if r.h == 0 || r.w == 0 {
        return Err("resolution must be positive".into());
    }
    Ok(r)
}

fn parse_category(s: &str) -> std::result::Result<Category, String> {
    s.parse::<Category>().map_err(|e| e.to_string())
}

fn parse_dilation(s: &str) -> std::result::Result<DilationRange, String> {
    s.parse::<DilationRange>().map_err(|e| e.to_string())
}

fn parse_steps(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("`{s}` is not an integer >= 1")),
    }
}

fn parse_nonneg(s: &str) -> std::result::Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a finite number >= 0")),
    }
}

fn parse_pos(s: &str) -> std::result::Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a finite number > 0")),
    }
}

fn parse_unit(s: &str) -> std::result::Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("`{s}` is not in (0, 1)")),
    }
}

#[derive(Args, Serialize)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(3..))]
    count: u64,
    /// Canvas as HxW; both multiples of 16.
    #[arg(long, default_value = "64x64", value_parser = parse_res)]
    size: Res,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    /// Model config JSON; overrides the architecture flags below.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    patch: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    d_emb: usize,
    #[arg(long, default_value_t = 4)]
    mlp_ratio: usize,
    #[arg(long, default_value_t = 0.125, value_parser = parse_pos)]
    channel_factor: f32,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TDist {
    Uniform,
    LogitNormal,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Norm {
    Mean,
    Sum,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 3e-5, value_parser = parse_pos)]
    lr: f32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = TDist::Uniform)]
    t_dist: TDist,
    /// Logit-normal location.
    #[arg(long, default_value_t = 0.0)]
    t_mean: f32,
    /// Logit-normal scale.
    #[arg(long, default_value_t = 1.0, value_parser = parse_pos)]
    t_std: f32,
    #[arg(long, default_value_t = 0.999, value_parser = parse_unit)]
    t_max: f32,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0, value_parser = parse_nonneg)]
    grad_clip: f32,
    #[arg(long, default_value_t = 0.01, value_parser = parse_nonneg)]
    weight_decay: f32,
    /// Print a loss line to stderr every N steps; 0 is silent.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch: self.batch as usize,
            steps: self.steps,
            seed: self.seed,
            t_dist: match self.t_dist {
                TDist::Uniform => TimestepDistribution::Uniform,
                TDist::LogitNormal => TimestepDistribution::LogitNormal { mean: self.t_mean, std: self.t_std },
            },
            t_max: self.t_max,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            weight_decay: self.weight_decay,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Serialize)]
struct TrainGarment {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint (FDTK); the config is written to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Serialize)]
struct TrainTryon {
    #[arg(long)]
    data: PathBuf,
    /// Frozen garment-branch checkpoint from train-garment.
    #[arg(long)]
    garment_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frequency-loss weight.
    #[arg(long, default_value_t = fitdit::pipeline::DEFAULT_LAMBDA_FREQ, value_parser = parse_nonneg)]
    lambda_freq: f32,
    #[arg(long, value_enum, default_value_t = Norm::Mean)]
    freq_norm: Norm,
    /// Frequency loss is skipped for sampled t above this.
    #[arg(long, default_value_t = 0.9, value_parser = parse_nonneg)]
    freq_t_gate: f32,
    /// Mask dilation range MIN:MAX in pixels; defaults to the canvas scale.
    #[arg(long, alias = "dilate", value_parser = parse_dilation)]
    dilation: Option<DilationRange>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Serialize)]
struct Tryon {
    #[arg(long)]
    person: PathBuf,
    /// Garment image.
    #[arg(long)]
    garment: PathBuf,
    /// Keypoints JSON.
    #[arg(long)]
    pose: PathBuf,
    /// Parsing map PNG.
    #[arg(long)]
    parsing: PathBuf,
    #[arg(long, value_parser = parse_category)]
    category: Category,
    #[arg(long)]
    denoiser_ckpt: PathBuf,
    #[arg(long)]
    garment_ckpt: PathBuf,
    #[arg(long, default_value_t = fitdit::rflow::DEFAULT_STEPS, value_parser = parse_steps)]
    steps: usize,
    /// Sampler start time.
    #[arg(long, default_value_t = fitdit::rflow::DEFAULT_T_MAX, value_parser = parse_unit)]
    t_max: f32,
    #[arg(long, alias = "dilate", value_parser = parse_dilation)]
    dilation: Option<DilationRange>,
    /// Output image; the mask and raw sample are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct Maskgen {
    #[arg(long)]
    parsing: PathBuf,
    #[arg(long)]
    pose: PathBuf,
    #[arg(long, value_parser = parse_category)]
    category: Category,
    #[arg(long, alias = "dilate", value_parser = parse_dilation)]
    dilation: Option<DilationRange>,
    /// Output mask PNG; provenance goes to `<out>.provenance.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Compares `--a` with `--b`, or ranks every `--generated` image against
/// `--real`.
#[derive(Args, Serialize)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["a", "real"])))]
struct Spectrum {
    #[arg(long, requires = "b", conflicts_with_all = ["real", "generated"])]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    #[arg(long, requires = "generated")]
    real: Option<PathBuf>,
    /// Images to rank; repeat the flag for each.
    #[arg(long, num_args = 1.., requires = "real")]
    generated: Vec<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct AnalyzeArch {
    /// Architecture JSON.
    #[arg(long)]
    config: PathBuf,
    /// Latent input resolution HxW, replacing the one in the file.
    #[arg(long, value_parser = parse_res)]
    input_res: Option<Res>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Mask PNGs named like the predictions; full image when absent.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A flag value that parsed but is unusable.
#[derive(Debug)]
struct UsageError {
    flag: String,
    message: String,
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.flag, self.message)
    }
}

impl std::error::Error for UsageError {}

fn usage(flag: &str, message: impl Into<String>) -> anyhow::Error {
    UsageError { flag: flag.into(), message: message.into() }.into()
}

#[derive(Serialize)]
struct Artifact {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    argv: Vec<String>,
    flags: &'a Command,
    seed: u64,
    version: &'static str,
    artifacts: Vec<Artifact>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).with_context(|| format!("reading image {}", path.display()))?.to_rgb8())
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn progress(every: usize) -> impl FnMut(&LossRecord) {
    move |r: &LossRecord| {
        if every > 0 && r.step % every == 0 {
            eprintln!(
                "step {} total {:.5} l_noise {:.5} l_f {:.5} grad_norm {:.4}",
                r.step, r.total, r.l_noise, r.l_f, r.grad_norm
            );
        }
    }
}

fn model_config(m: &ModelArgs, h: usize, w: usize) -> Result<ModelConfig> {
    let cfg = match &m.model_config {
        Some(p) => {
            let c = ModelConfig::read(p)?;
            if (c.h, c.w) != (h, w) {
                return Err(usage("--model-config", format!("config is {}x{} but the data is {h}x{w}", c.h, c.w)));
            }
            c
        }
        None => ModelConfig {
            h,
            w,
            patch: m.patch,
            width: m.width,
            depth: m.depth,
            heads: m.heads,
            d_emb: m.d_emb,
            channel_factor: m.channel_factor,
            mlp_ratio: m.mlp_ratio,
        },
    };
    cfg.validate().map_err(|e| usage("--model-config", e.to_string()))?;
    Ok(cfg)
}

fn write_log(log: &LossLog, out: &Path) -> Result<PathBuf> {
    let p = with_suffix(out, ".loss.csv");
    log.write_csv(&p)?;
    Ok(p)
}

fn run(cmd: &Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::GenData(a) => {
            let ds = generate_dataset(a.seed, a.count as usize, a.size.h, a.size.w)
                .map_err(|e| usage("--size", e.to_string()))?;
            ensure_dir(&a.out)?;
            ds.write(&a.out)?;
            Ok(vec![a.out.join("manifest.json")])
        }
        Command::TrainGarment(a) => {
            let ds = Dataset::read(&a.data)?;
            let cfg = model_config(&a.model, ds.manifest.height, ds.manifest.width)?;
            let garments: Vec<_> = ds.train().iter().map(|s| image_to_latent(&s.garment)).collect();
            let mut store = init_garment_params(&cfg, a.train.seed)?;
            let tcfg = a.train.config();
            let log = train_garment_prior(&cfg, &garments, &mut store, &tcfg, progress(a.train.log_every))?;
            ensure_parent(&a.out)?;
            save_checkpoint(&a.out, &cfg, &store)?;
            let csv = write_log(&log, &a.out)?;
            Ok(vec![a.out.clone(), with_suffix(&a.out, ".json"), csv])
        }
        Command::TrainTryon(a) => {
            let ds = Dataset::read(&a.data)?;
            let (cfg, gstore) = load_checkpoint(&a.garment_ckpt)?;
            if (cfg.h, cfg.w) != (ds.manifest.height, ds.manifest.width) {
                return Err(usage(
                    "--garment-ckpt",
                    format!("checkpoint is {}x{} but the data is {}x{}", cfg.h, cfg.w, ds.manifest.height, ds.manifest.width),
                ));
            }
            let prep = |v: Vec<&fitdit::synthdata::TryOnSample>| -> Result<Vec<PreparedSample>> {
                Ok(v.into_iter().map(|s| PreparedSample::new(&cfg, s)).collect::<fitdit::Result<_>>()?)
            };
            let train = prep(ds.train())?;
            let val = prep(ds.val())?;
            let tcfg = TrainConfig {
                lambda_freq: a.lambda_freq,
                freq_norm: match a.freq_norm {
                    Norm::Mean => FreqNorm::Mean,
                    Norm::Sum => FreqNorm::Sum,
                },
                freq_t_gate: a.freq_t_gate,
                dilation: a.dilation,
                ..a.train.config()
            };
            let mut store = init_denoiser_params(&cfg, a.train.seed)?;
            let log = train_tryon(&cfg, &train, &gstore, &mut store, &tcfg, progress(a.train.log_every))?;
            ensure_parent(&a.out)?;
            save_checkpoint(&a.out, &cfg, &store)?;
            let csv = write_log(&log, &a.out)?;
            let metrics = validate_tryon(&cfg, &val, &gstore, &store, a.train.seed)?;
            let vpath = with_suffix(&a.out, ".val.json");
            write_json(&metrics, &vpath)?;
            Ok(vec![a.out.clone(), with_suffix(&a.out, ".json"), csv, vpath])
        }
        Command::Tryon(a) => {
            let (cfg, den) = load_checkpoint(&a.denoiser_ckpt)?;
            let (gcfg, gstore) = load_checkpoint(&a.garment_ckpt)?;
            if gcfg != cfg {
                return Err(usage("--garment-ckpt", "garment and denoiser checkpoints have different configs"));
            }
            let person = read_rgb(&a.person)?;
            let garment = read_rgb(&a.garment)?;
            let kp = PoseKeypoints::read(&a.pose)?;
            let parsing = ParsingMap::read(&a.parsing)?;
            let opts = InferenceOptions { steps: a.steps, t_max: a.t_max, seed: a.seed, dilation: a.dilation };
            let r = infer_tryon(&cfg, &den, &gstore, &person, &garment, &kp, &parsing, a.category, &opts)?;
            ensure_parent(&a.out)?;
            let mask_path = with_suffix(&a.out, ".mask.png");
            let raw_path = with_suffix(&a.out, ".raw.png");
            save_png(&r.image, &a.out)?;
            save_png(&r.generated, &raw_path)?;
            r.mask.grid.to_image().save(&mask_path).with_context(|| format!("writing {}", mask_path.display()))?;
            Ok(vec![a.out.clone(), raw_path, mask_path])
        }
        Command::Maskgen(a) => {
            let kp = PoseKeypoints::read(&a.pose)?;
            let parsing = ParsingMap::read(&a.parsing)?;
            let range = a.dilation.unwrap_or_else(|| DilationRange::default_for(parsing.height));
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
            let mask = build_agnostic_mask(a.category, &kp, &parsing, &mut rng, range)?;
            ensure_parent(&a.out)?;
            mask.grid.to_image().save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
            let prov = with_suffix(&a.out, ".provenance.json");
            write_json(&mask.provenance, &prov)?;
            Ok(vec![a.out.clone(), prov])
        }
        Command::Spectrum(a) => {
            let mask = match &a.mask {
                Some(p) => Some(BinaryGrid::from_image(
                    &image::open(p).with_context(|| format!("reading {}", p.display()))?.to_luma8(),
                )),
                None => None,
            };
            ensure_dir(&a.out)?;
            if let (Some(pa), Some(pb)) = (&a.a, &a.b) {
                let report = spectrum_pair(&read_rgb(pa)?, &read_rgb(pb)?, mask.as_ref())?;
                return Ok(report.write(&a.out)?);
            }
            let real = read_rgb(a.real.as_ref().expect("clap enforces the mode group"))?;
            let gens = a
                .generated
                .iter()
                .map(|p| {
                    let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
                    Ok((name, read_rgb(p)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let report = spectrum_report(&real, &gens, mask.as_ref())?;
            Ok(report.write(&a.out)?)
        }
        Command::AnalyzeArch(a) => {
            let mut arch = ArchDescription::read(&a.config)?;
            if let Some(r) = a.input_res {
                arch = arch.with_input(r.h, r.w);
            }
            let table = attention_param_ratio(&arch)?;
            ensure_parent(&a.out)?;
            write_json(&table, &a.out)?;
            println!("{COUNTING_RULE}");
            for r in &table.rows {
                println!("{}x{} (/{}) {:.4}", r.height, r.width, r.divisor, r.share);
            }
            Ok(vec![a.out.clone()])
        }
        Command::Eval(a) => {
            let report = eval_metrics(&a.pred, &a.gt, a.masks.as_deref())?;
            ensure_dir(&a.out)?;
            let json = a.out.join("report.json");
            let csv = a.out.join("report.csv");
            write_json(&report, &json)?;
            fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
            Ok(vec![json, csv])
        }
    }
}

fn seed_of(cmd: &Command) -> u64 {
    match cmd {
        Command::GenData(a) => a.seed,
        Command::TrainGarment(a) => a.train.seed,
        Command::TrainTryon(a) => a.train.seed,
        Command::Tryon(a) => a.seed,
        Command::Maskgen(a) => a.seed,
        Command::Spectrum(a) => a.seed,
        Command::AnalyzeArch(a) => a.seed,
        Command::Eval(a) => a.seed,
    }
}

/// Where the run manifest goes: inside output directories, beside files.
fn manifest_path(cmd: &Command) -> PathBuf {
    match cmd {
        Command::GenData(a) => a.out.join("run.json"),
        Command::Spectrum(a) => a.out.join("run.json"),
        Command::Eval(a) => a.out.join("run.json"),
        Command::TrainGarment(a) => with_suffix(&a.out, ".run.json"),
        Command::TrainTryon(a) => with_suffix(&a.out, ".run.json"),
        Command::Tryon(a) => with_suffix(&a.out, ".run.json"),
        Command::Maskgen(a) => with_suffix(&a.out, ".run.json"),
        Command::AnalyzeArch(a) => with_suffix(&a.out, ".run.json"),
    }
}

fn emit_error(kind: &str, flag: Option<&str>, message: &str) {
    let v = serde_json::json!({ "error": kind, "flag": flag, "message": message });
    eprintln!("{v}");
}

/// The flag named by a clap error, as `--name`.
fn clap_flag(e: &clap::Error) -> Option<String> {
    use clap::error::{ContextKind, ContextValue};
    match e.get(ContextKind::InvalidArg)? {
        ContextValue::String(s) => Some(s.clone()),
        ContextValue::Strings(v) => Some(v.join(", ")),
        _ => None,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let flag = clap_flag(&e);
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            emit_error("usage", flag.as_deref(), &first);
            eprintln!("{}", e.render());
            return ExitCode::from(2);
        }
    };
    let cmd = &cli.command;
    match run(cmd) {
        Ok(paths) => {
            let artifacts = match paths
                .iter()
                .map(|p| Ok(Artifact { path: p.clone(), sha256: sha256_file(p)? }))
                .collect::<Result<Vec<_>>>()
            {
                Ok(a) => a,
                Err(e) => {
                    emit_error("runtime", None, &format!("{e:#}"));
                    return ExitCode::from(1);
                }
            };
            let manifest = RunManifest {
                command: cmd.name(),
                argv: argv[1..].to_vec(),
                flags: cmd,
                seed: seed_of(cmd),
                version: env!("CARGO_PKG_VERSION"),
                artifacts,
            };
            let path = manifest_path(cmd);
            if let Err(e) = write_json(&manifest, &path) {
                emit_error("runtime", None, &format!("{e:#}"));
                return ExitCode::from(1);
            }
            println!("{}", serde_json::to_string(&manifest).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                emit_error("usage", Some(&u.flag), &u.message);
                return ExitCode::from(2);
            }
            emit_error("runtime", None, &format!("{e:#}"));
            ExitCode::from(1)
        }
    }
}
