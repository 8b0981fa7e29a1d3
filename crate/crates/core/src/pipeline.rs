//! Two-stage training, try-on inference with paste-back, and evaluation
//! metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{garment_embed, garment_embedding, GarmentEmbedding, PoseKeypoints};
use crate::dit::{
    denoising_forward, extract_garment_kv, garment_forward, init_denoiser_params, init_garment_params, patchify,
    unpatchify, unpatchify_var, DenoiserInput, GarmentKVCache, ModelConfig,
};
use crate::error::{shape_err, Error, Result};
use crate::maskgen::{build_agnostic_mask, AgnosticMask, BinaryGrid, Category, DilationRange, ParsingMap};
use crate::nn::ParamSource;
use crate::rflow::{
    estimate_clean, forward_interpolate, sample, sample_timestep, LossWeighting, TimeSchedule, TimestepDistribution,
    DEFAULT_T_MAX,
};
use crate::spectral::{fft2d, image_spectral_distance, spectral_loss, FrequencyWeighting, RealGrid};
use crate::synthdata::{image_to_latent, latent_to_image, TryOnSample};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamW, ParameterStore, Scalar, Tape, Tensor, Var};

/// How the frequency loss is scaled before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqNorm {
    /// Divided by `C·(M·N)²`, i.e. the mean squared masked pixel error
    /// under a uniform weighting.
    #[default]
    Mean,
    /// The raw spectral sum.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    pub lambda_freq: f32,
    pub seed: u64,
    pub t_dist: TimestepDistribution,
    pub weighting: LossWeighting,
    pub t_max: f32,
    /// Frequency loss is skipped for sampled `t` above this.
    pub freq_t_gate: f32,
    pub freq_norm: FreqNorm,
    pub freq_weighting: FrequencyWeighting,
    /// Agnostic mask dilation; `None` scales the default to the canvas.
    pub dilation: Option<DilationRange>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f32>,
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            batch: 4,
            steps: 1000,
            lambda_freq: DEFAULT_LAMBDA_FREQ,
            seed: 0,
            t_dist: TimestepDistribution::Uniform,
            weighting: LossWeighting::Constant,
            t_max: DEFAULT_T_MAX,
            freq_t_gate: 0.9,
            freq_norm: FreqNorm::Mean,
            freq_weighting: FrequencyWeighting::Uniform,
            dilation: None,
            grad_clip: Some(1.0),
            weight_decay: 0.01,
        }
    }
}

/// Default frequency-loss weight for the mean normalization: at
/// initialisation the two losses are then of the same order.
pub const DEFAULT_LAMBDA_FREQ: f32 = 1.0;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_freq >= 0.0) || !self.lambda_freq.is_finite() {
            return Err(Error::Config(format!("lambda_freq {} must be >= 0", self.lambda_freq)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        self.t_dist.validate()
    }

    fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, weight_decay: self.weight_decay, ..AdamW::default() }
    }

    fn dilation_for(&self, height: usize) -> DilationRange {
        self.dilation.unwrap_or_else(|| DilationRange::default_for(height))
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_noise: f64,
    /// Frequency loss after normalization, averaged over the batch
    /// (gated samples count as 0).
    pub l_f: f64,
    pub total: f64,
    /// Raw spectral sum, averaged like `l_f`.
    pub l_f_raw: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l_noise,l_f,total,l_f_raw,grad_norm\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.l_noise, r.l_f, r.total, r.l_f_raw, r.grad_norm);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean total loss over the first and last `window` records.
    pub fn head_tail(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |r: &[LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
        Some((mean(&self.records[..w]), mean(&self.records[n - w..])))
    }
}

/// Writes an FDTK checkpoint and its JSON config sidecar (`<path>.json`).
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParameterStore) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), &store.to_named()).map_err(|e| Error::io(path, e))?;
    cfg.write(&sidecar(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterStore)> {
    let cfg = ModelConfig::read(&sidecar(path))?;
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let store = ParameterStore::from_named(read_checkpoint(std::io::BufReader::new(f))?)?;
    Ok((cfg, store))
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Errors unless `store` has exactly the names and shapes of `reference`.
pub fn check_compatible(store: &ParameterStore, reference: &ParameterStore, what: &str) -> Result<()> {
    if store.len() != reference.len() {
        return Err(Error::Checkpoint(format!(
            "{what} checkpoint has {} tensors, architecture expects {}",
            store.len(),
            reference.len()
        )));
    }
    for (name, t) in reference.iter() {
        match store.get(name) {
            None => return Err(Error::Checkpoint(format!("{what} checkpoint lacks `{name}`"))),
            Some(s) if s.dims() != t.dims() => {
                return Err(Error::Checkpoint(format!(
                    "{what} checkpoint `{name}` is {:?}, architecture expects {:?}",
                    s.dims(),
                    t.dims()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn check_loss(step: usize, loss: f64, lr: f32, store: &ParameterStore) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss, lr, grad_norm: store.grad_norm() });
    }
    Ok(())
}

fn optimize(store: &mut ParameterStore, cfg: &TrainConfig, step: usize, loss: f64) -> Result<f64> {
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Diverged { step, loss, lr: cfg.lr, grad_norm: norm });
    }
    if let Some(c) = cfg.grad_clip {
        if norm > c as f64 {
            store.scale_grads((c as f64 / norm) as f32);
        }
    }
    cfg.optimizer().step(store)?;
    store.zero_grad();
    Ok(norm)
}

/// `w·mean((pred − eps)²)`.
pub fn noise_loss<S: Scalar>(tape: &mut Tape<S>, pred: Var, eps: &Tensor, weight: f32) -> Result<Var> {
    let e = tape.constant(eps);
    let d = tape.sub(pred, e)?;
    let sq = tape.square(d);
    let m = tape.mean(sq);
    Ok(tape.scale(m, weight as f64))
}

/// Stage 1: denoising objective on flat garment latents, each
/// conditioned on its own embedding. Trains `store` in place.
pub fn train_garment_prior(
    cfg: &ModelConfig,
    garments: &[Tensor],
    store: &mut ParameterStore,
    tcfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<LossLog> {
    tcfg.validate()?;
    if garments.is_empty() {
        return Err(Error::Config("no garments to train on".into()));
    }
    check_compatible(store, &init_garment_params(cfg, 0)?, "garment")?;
    let tokens: Vec<Tensor> = garments.iter().map(|g| patchify(g, cfg.patch)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut log = LossLog::default();
    store.zero_grad();
    let inv_b = 1.0 / tcfg.batch as f64;
    for step in 0..tcfg.steps {
        let mut total = 0.0;
        for _ in 0..tcfg.batch {
            let i = rng.random_range(0..garments.len());
            let (t, w) = sample_timestep(&mut rng, tcfg.t_dist, tcfg.weighting, tcfg.t_max);
            let eps = Tensor::randn(tokens[i].dims(), 1.0, &mut rng);
            let z_t = forward_interpolate(&tokens[i], &eps, t)?;
            let mut tape: Tape<f32> = Tape::new();
            let ps = ParamSource::trainable(store);
            let g = garment_embed(&mut tape, cfg, ps, &garments[i])?;
            let z = tape.constant(&z_t);
            let out = garment_forward(&mut tape, cfg, ps, z, t, g)?;
            let l = noise_loss(&mut tape, out.eps, &eps, w)?;
            let l = tape.scale(l, inv_b);
            total += tape.scalar_value(l);
            check_loss(step, total, tcfg.lr, store)?;
            tape.backward_into(l, store)?;
        }
        let grad_norm = optimize(store, tcfg, step, total)?;
        let rec = LossRecord { step, l_noise: total, l_f: 0.0, total, l_f_raw: 0.0, grad_norm };
        on_step(&rec);
        log.records.push(rec);
    }
    Ok(log)
}

/// A training or evaluation record converted to model inputs.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub category: Category,
    /// `[3, H, W]` person latent in `[-1, 1]`.
    pub person: Tensor,
    /// Person pixels in `[0, 1]`.
    pub person_pixels: Vec<f32>,
    pub garment: Tensor,
    pub keypoints: PoseKeypoints,
    pub parsing: ParsingMap,
    /// Parsing region of the worn garment as `{0, 1}` values.
    pub garment_mask: Vec<f32>,
}

impl PreparedSample {
    pub fn new(cfg: &ModelConfig, s: &TryOnSample) -> Result<Self> {
        if s.width() != cfg.w || s.height() != cfg.h {
            return Err(shape_err!("sample {}x{} for a {}x{} model", s.height(), s.width(), cfg.h, cfg.w));
        }
        let person = image_to_latent(&s.person);
        let person_pixels = person.data().iter().map(|v| (v + 1.0) * 0.5).collect();
        Ok(PreparedSample {
            category: s.category,
            person,
            person_pixels,
            garment: image_to_latent(&s.garment),
            keypoints: s.keypoints,
            parsing: s.parsing.clone(),
            garment_mask: s.garment_region().to_f32(),
        })
    }

    /// Same person wearing (as conditioning) another sample's garment.
    pub fn with_garment(&self, garment: &Tensor) -> Self {
        PreparedSample { garment: garment.clone(), ..self.clone() }
    }
}

/// Frozen garment-branch outputs for one garment.
#[derive(Clone, Debug)]
pub struct GarmentFeatures {
    pub embedding: GarmentEmbedding,
    pub cache: GarmentKVCache,
}

impl GarmentFeatures {
    pub fn compute(cfg: &ModelConfig, garment_store: &ParameterStore, garment: &Tensor) -> Result<Self> {
        Ok(GarmentFeatures {
            embedding: garment_embedding(cfg, garment_store, garment)?,
            cache: extract_garment_kv(cfg, garment_store, garment)?,
        })
    }
}

/// Frequency loss of the single-step clean estimate
/// `ẑ0 = (z_t − t·ε̂)/(1 − t)` against `target_pixels`, masked by `mask`.
/// Returns `(normalized, raw)`.
pub fn frequency_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    z_t: &Tensor,
    eps_pred: Var,
    t: f32,
    target_pixels: &[f32],
    mask: &[f32],
    tcfg: &TrainConfig,
) -> Result<(Var, Var)> {
    let z = tape.constant(z_t);
    let te = tape.scale(eps_pred, t as f64);
    let d = tape.sub(z, te)?;
    let z0 = tape.scale(d, 1.0 / (1.0 - t as f64));
    let img = unpatchify_var(tape, z0, 3, cfg.h, cfg.w, cfg.patch)?;
    let half = tape.scale(img, 0.5);
    let c = tape.constant_raw(&[1], vec![S::of(0.5)])?;
    let pix = tape.add(half, c)?;
    let raw = spectral_loss(tape, pix, target_pixels, mask, tcfg.freq_weighting, 1.0)?;
    let norm = match tcfg.freq_norm {
        FreqNorm::Sum => raw,
        FreqNorm::Mean => {
            let mn = (cfg.h * cfg.w) as f64;
            tape.scale(raw, 1.0 / (3.0 * mn * mn))
        }
    };
    Ok((norm, raw))
}

/// Draws the agnostic mask for a sample.
pub fn sample_mask<R: Rng + ?Sized>(s: &PreparedSample, rng: &mut R, range: DilationRange) -> Result<AgnosticMask> {
    build_agnostic_mask(s.category, &s.keypoints, &s.parsing, rng, range)
}

/// Losses of one try-on training example on its own tape.
struct ExampleLoss {
    total: Var,
    l_noise: f64,
    l_f: f64,
    l_f_raw: f64,
}

#[allow(clippy::too_many_arguments)]
fn tryon_example<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    ps: ParamSource,
    s: &PreparedSample,
    feats: Option<&GarmentFeatures>,
    mask: &AgnosticMask,
    t: f32,
    w: f32,
    eps: &Tensor,
    tcfg: &TrainConfig,
) -> Result<ExampleLoss> {
    let z0 = patchify(&s.person, cfg.patch)?;
    let z_t = forward_interpolate(&z0, eps, t)?;
    let inp = DenoiserInput::new(cfg, z_t.clone(), &s.person, &mask.to_f32(), &s.keypoints)?;
    let g = match feats {
        Some(f) => tape.constant(&Tensor::new(&[1, cfg.d_emb], f.embedding.0.clone())?),
        None => tape.constant(&Tensor::zeros(&[1, cfg.d_emb])),
    };
    let pred = denoising_forward(tape, cfg, ps, &inp, t, g, feats.map(|f| &f.cache))?;
    let ln = noise_loss(tape, pred, eps, w)?;
    let l_noise = tape.scalar_value(ln);
    if tcfg.lambda_freq > 0.0 && t <= tcfg.freq_t_gate {
        let (lf, raw) = frequency_loss(tape, cfg, &z_t, pred, t, &s.person_pixels, &s.garment_mask, tcfg)?;
        let (l_f, l_f_raw) = (tape.scalar_value(lf), tape.scalar_value(raw));
        let weighted = tape.scale(lf, tcfg.lambda_freq as f64);
        let total = tape.add(ln, weighted)?;
        Ok(ExampleLoss { total, l_noise, l_f, l_f_raw })
    } else {
        Ok(ExampleLoss { total: ln, l_noise, l_f: 0.0, l_f_raw: 0.0 })
    }
}

/// Stage 2: trains the denoiser with the garment branch frozen.
///
/// `garment_store` is checked against the architecture of `cfg`; its
/// embeddings and caches are computed once per training garment.
pub fn train_tryon(
    cfg: &ModelConfig,
    samples: &[PreparedSample],
    garment_store: &ParameterStore,
    store: &mut ParameterStore,
    tcfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<LossLog> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no samples to train on".into()));
    }
    check_compatible(garment_store, &init_garment_params(cfg, 0)?, "garment")?;
    check_compatible(store, &init_denoiser_params(cfg, 0)?, "denoiser")?;
    let feats: Vec<GarmentFeatures> =
        samples.iter().map(|s| GarmentFeatures::compute(cfg, garment_store, &s.garment)).collect::<Result<_>>()?;
    let range = tcfg.dilation_for(cfg.h);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut log = LossLog::default();
    store.zero_grad();
    let inv_b = 1.0 / tcfg.batch as f64;
    for step in 0..tcfg.steps {
        let mut rec = LossRecord { step, l_noise: 0.0, l_f: 0.0, total: 0.0, l_f_raw: 0.0, grad_norm: 0.0 };
        for _ in 0..tcfg.batch {
            let i = rng.random_range(0..samples.len());
            let mask = sample_mask(&samples[i], &mut rng, range)?;
            let (t, w) = sample_timestep(&mut rng, tcfg.t_dist, tcfg.weighting, tcfg.t_max);
            let eps = Tensor::randn(&[cfg.tokens(), cfg.latent_channels()], 1.0, &mut rng);
            let mut tape: Tape<f32> = Tape::new();
            let ps = ParamSource::trainable(store);
            let ex = tryon_example(&mut tape, cfg, ps, &samples[i], Some(&feats[i]), &mask, t, w, &eps, tcfg)?;
            let l = tape.scale(ex.total, inv_b);
            rec.total += tape.scalar_value(l);
            rec.l_noise += ex.l_noise * inv_b;
            rec.l_f += ex.l_f * inv_b;
            rec.l_f_raw += ex.l_f_raw * inv_b;
            check_loss(step, rec.total, tcfg.lr, store)?;
            tape.backward_into(l, store)?;
        }
        rec.grad_norm = optimize(store, tcfg, step, rec.total)?;
        on_step(&rec);
        log.records.push(rec);
    }
    Ok(log)
}

/// Fixed-noise validation metrics of a try-on model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub l_noise: f64,
    /// Mean-normalized spectral distance of the single-step clean estimate
    /// inside the agnostic mask.
    pub spectral: f64,
}

pub const VALIDATION_TIMES: [f32; 3] = [0.25, 0.5, 0.75];

/// Evaluates at `t ∈ {0.25, 0.5, 0.75}` with noise and masks seeded by
/// `seed` and the sample index, so different models see identical inputs.
pub fn validate_tryon(
    cfg: &ModelConfig,
    samples: &[PreparedSample],
    garment_store: &ParameterStore,
    store: &ParameterStore,
    seed: u64,
) -> Result<ValidationMetrics> {
    if samples.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let range = DilationRange::default_for(cfg.h);
    let (mut ln, mut sp, mut n) = (0.0, 0.0, 0usize);
    let mn = (cfg.h * cfg.w) as f64;
    for (i, s) in samples.iter().enumerate() {
        let feats = GarmentFeatures::compute(cfg, garment_store, &s.garment)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
        let mask = sample_mask(s, &mut rng, range)?;
        let mf = mask.to_f32();
        let z0 = patchify(&s.person, cfg.patch)?;
        for &t in &VALIDATION_TIMES {
            let eps = Tensor::randn(z0.dims(), 1.0, &mut rng);
            let z_t = forward_interpolate(&z0, &eps, t)?;
            let inp = DenoiserInput::new(cfg, z_t.clone(), &s.person, &mf, &s.keypoints)?;
            let pred = predict_eps(cfg, store, &inp, t, &feats)?;
            let d: f64 = pred.data().iter().zip(eps.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            ln += d / pred.len() as f64;
            let z0_hat = estimate_clean(&z_t, &pred, t)?;
            let img = unpatchify(&z0_hat, 3, cfg.h, cfg.w, cfg.patch)?;
            let pix: Vec<f32> = img.data().iter().map(|v| (v + 1.0) * 0.5).collect();
            let dist = image_spectral_distance(
                &pix,
                &s.person_pixels,
                &mf,
                3,
                cfg.h,
                cfg.w,
                FrequencyWeighting::Uniform,
            )?;
            sp += dist / (3.0 * mn * mn);
            n += 1;
        }
    }
    Ok(ValidationMetrics { l_noise: ln / n as f64, spectral: sp / n as f64 })
}

/// One noise prediction with frozen parameters.
pub fn predict_eps(
    cfg: &ModelConfig,
    store: &ParameterStore,
    inp: &DenoiserInput,
    t: f32,
    feats: &GarmentFeatures,
) -> Result<Tensor> {
    let mut tape: Tape<f32> = Tape::new();
    let g = tape.constant(&Tensor::new(&[1, cfg.d_emb], feats.embedding.0.clone())?);
    let out = denoising_forward(&mut tape, cfg, ParamSource::frozen(store), inp, t, g, Some(&feats.cache))?;
    Ok(tape.tensor(out))
}

/// Try-on output.
#[derive(Clone, Debug)]
pub struct TryOnResult {
    /// Composited image: person outside the mask, generated inside.
    pub image: RgbImage,
    /// Raw sampler output before paste-back.
    pub generated: RgbImage,
    pub mask: AgnosticMask,
}

#[derive(Clone, Copy, Debug)]
pub struct InferenceOptions {
    pub steps: usize,
    /// Start time of the uniform schedule.
    pub t_max: f32,
    pub seed: u64,
    pub dilation: Option<DilationRange>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions { steps: crate::rflow::DEFAULT_STEPS, t_max: DEFAULT_T_MAX, seed: 0, dilation: None }
    }
}

/// `person ⊙ (1 − m) + generated ⊙ m` on 8-bit pixels.
pub fn paste_back(person: &RgbImage, generated: &RgbImage, mask: &BinaryGrid) -> Result<RgbImage> {
    if person.dimensions() != generated.dimensions()
        || (person.width() as usize, person.height() as usize) != (mask.width, mask.height)
    {
        return Err(shape_err!("paste-back over mismatched images"));
    }
    Ok(RgbImage::from_fn(person.width(), person.height(), |x, y| {
        if mask.get(x as usize, y as usize) {
            *generated.get_pixel(x, y)
        } else {
            *person.get_pixel(x, y)
        }
    }))
}

/// Runs the full try-on: garment cache once, agnostic mask, sampler from
/// pure noise, paste-back.
#[allow(clippy::too_many_arguments)]
pub fn infer_tryon(
    cfg: &ModelConfig,
    denoiser: &ParameterStore,
    garment_store: &ParameterStore,
    person: &RgbImage,
    garment: &RgbImage,
    keypoints: &PoseKeypoints,
    parsing: &ParsingMap,
    category: Category,
    opts: &InferenceOptions,
) -> Result<TryOnResult> {
    if (person.width() as usize, person.height() as usize) != (cfg.w, cfg.h) || person.dimensions() != garment.dimensions()
    {
        return Err(shape_err!(
            "inputs {:?}/{:?} for a {}x{} model",
            person.dimensions(),
            garment.dimensions(),
            cfg.w,
            cfg.h
        ));
    }
    keypoints.validate(cfg.w, cfg.h)?;
    let feats = GarmentFeatures::compute(cfg, garment_store, &image_to_latent(garment))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let range = opts.dilation.unwrap_or_else(|| DilationRange::default_for(cfg.h));
    let mask = build_agnostic_mask(category, keypoints, parsing, &mut rng, range)?;
    let person_latent = image_to_latent(person);
    let noise = Tensor::randn(&[cfg.tokens(), cfg.latent_channels()], 1.0, &mut rng);
    let base = DenoiserInput::new(cfg, noise.clone(), &person_latent, &mask.to_f32(), keypoints)?;
    let schedule = TimeSchedule::uniform(opts.steps, opts.t_max)?;
    let z0 = sample(&noise, &schedule, |z, t| predict_eps(cfg, denoiser, &base.with_z_t(z.clone())?, t, &feats))?;
    let generated = latent_to_image(&unpatchify(&z0, 3, cfg.h, cfg.w, cfg.patch)?)?;
    let image = paste_back(person, &generated, &mask.grid)?;
    Ok(TryOnResult { image, generated, mask })
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// SSIM map over valid 11×11 windows of two single-channel images in
/// `[0, 1]`; entry `(y, x)` belongs to the window centred at
/// `(x + 5, y + 5)`.
fn ssim_map(a: &[f64], b: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let g = gaussian_window();
    let (ow, oh) = (w + 1 - SSIM_WIN, h + 1 - SSIM_WIN);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WIN {
                for i in 0..SSIM_WIN {
                    let wt = g[j] * g[i];
                    let idx = (y + j) * w + x + i;
                    let (va, vb) = (a[idx], b[idx]);
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * (va * va);
                    sbb += wt * (vb * vb);
                    sab += wt * (va * vb);
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
            let den = ((ma * ma) + (mb * mb) + c1) * (va + vb + c2);
            out.push(num / den);
        }
    }
    (out, ow, oh)
}

fn channels_f64(img: &RgbImage) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for p in img.pixels() {
        for c in 0..3 {
            out[c].push(p.0[c] as f64 / 255.0);
        }
    }
    out
}

/// Mean SSIM over channels and window centres; with a mask only centres
/// inside it count.
pub fn ssim(a: &RgbImage, b: &RgbImage, mask: Option<&BinaryGrid>) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(shape_err!("ssim over {:?} and {:?}", a.dimensions(), b.dimensions()));
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WIN || h < SSIM_WIN {
        return Err(shape_err!("ssim needs at least {SSIM_WIN}x{SSIM_WIN} images"));
    }
    if let Some(m) = mask {
        if (m.width, m.height) != (w, h) {
            return Err(shape_err!("ssim mask size differs from image"));
        }
    }
    let (ca, cb) = (channels_f64(a), channels_f64(b));
    let r = SSIM_WIN / 2;
    let (mut total, mut count) = (0.0, 0usize);
    for c in 0..3 {
        let (map, ow, oh) = ssim_map(&ca[c], &cb[c], w, h);
        for y in 0..oh {
            for x in 0..ow {
                if mask.is_none_or(|m| m.get(x + r, y + r)) {
                    total += map[y * ow + x];
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Domain("ssim mask covers no window centre".into()));
    }
    Ok(total / count as f64)
}

fn pixels_f32(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * w * h + i] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

/// `Σ m·(a − b)²` over channels, pixels in `[0, 1]`.
pub fn masked_l2(a: &RgbImage, b: &RgbImage, mask: &BinaryGrid) -> Result<f64> {
    if a.dimensions() != b.dimensions() || (a.width() as usize, a.height() as usize) != (mask.width, mask.height) {
        return Err(shape_err!("masked l2 over mismatched images"));
    }
    let (pa, pb) = (pixels_f32(a), pixels_f32(b));
    let plane = mask.width * mask.height;
    Ok(pa
        .iter()
        .zip(&pb)
        .enumerate()
        .filter(|(i, _)| mask.data[i % plane])
        .map(|(_, (&x, &y))| (x as f64 - y as f64).powi(2))
        .sum())
}

/// `Σ (log(1+|F_{a⊙m}|) − log(1+|F_{b⊙m}|))² / (M·N)` summed over channels.
pub fn masked_log_spectral_distance(a: &RgbImage, b: &RgbImage, mask: &BinaryGrid) -> Result<f64> {
    if a.dimensions() != b.dimensions() || (a.width() as usize, a.height() as usize) != (mask.width, mask.height) {
        return Err(shape_err!("log-spectral distance over mismatched images"));
    }
    let (w, h) = (mask.width, mask.height);
    let plane = w * h;
    let (pa, pb) = (pixels_f32(a), pixels_f32(b));
    let mut total = 0.0;
    for c in 0..3 {
        let grid = |p: &[f32]| {
            RealGrid::from_fn(w, h, |x, y| {
                let i = y * w + x;
                if mask.data[i] { p[c * plane + i] as f64 } else { 0.0 }
            })
        };
        let (fa, fb) = (fft2d(&grid(&pa)), fft2d(&grid(&pb)));
        total += fa
            .values
            .iter()
            .zip(&fb.values)
            .map(|(x, y)| (x.norm().ln_1p() - y.norm().ln_1p()).powi(2))
            .sum::<f64>()
            / plane as f64;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub ssim: f64,
    pub masked_ssim: f64,
    pub masked_l2: f64,
    pub spectral: f64,
    pub log_spectral: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean: ImageMetrics,
    pub images: Vec<ImageMetrics>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,ssim,masked_ssim,masked_l2,spectral,log_spectral\n");
        for m in self.images.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.name, m.ssim, m.masked_ssim, m.masked_l2, m.spectral, m.log_spectral
            );
        }
        s
    }
}

/// Metrics of one prediction against its ground truth within `mask`.
pub fn image_metrics(name: &str, pred: &RgbImage, gt: &RgbImage, mask: &BinaryGrid) -> Result<ImageMetrics> {
    let (w, h) = (mask.width, mask.height);
    let spectral = image_spectral_distance(
        &pixels_f32(pred),
        &pixels_f32(gt),
        &mask.to_f32(),
        3,
        h,
        w,
        FrequencyWeighting::Uniform,
    )?;
    Ok(ImageMetrics {
        name: name.to_string(),
        ssim: ssim(pred, gt, None)?,
        masked_ssim: ssim(pred, gt, Some(mask)).unwrap_or(f64::NAN),
        masked_l2: masked_l2(pred, gt, mask)?,
        spectral,
        log_spectral: masked_log_spectral_distance(pred, gt, mask)?,
    })
}

/// Aggregates per-image metrics (NaN entries are skipped per column).
pub fn aggregate(images: Vec<ImageMetrics>) -> EvalReport {
    let mean_of = |f: &dyn Fn(&ImageMetrics) -> f64| {
        let v: Vec<f64> = images.iter().map(f).filter(|x| x.is_finite()).collect();
        if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    let mean = ImageMetrics {
        name: "mean".into(),
        ssim: mean_of(&|m| m.ssim),
        masked_ssim: mean_of(&|m| m.masked_ssim),
        masked_l2: mean_of(&|m| m.masked_l2),
        spectral: mean_of(&|m| m.spectral),
        log_spectral: mean_of(&|m| m.log_spectral),
    };
    EvalReport { count: images.len(), mean, images }
}

fn png_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    v.sort();
    Ok(v)
}

/// Compares same-named PNGs in `pred_dir` and `gt_dir`; masks are grayscale
/// PNGs (nonzero = inside) in `mask_dir`, or the full image when absent.
pub fn eval_metrics(pred_dir: &Path, gt_dir: &Path, mask_dir: Option<&Path>) -> Result<EvalReport> {
    let preds = png_files(pred_dir)?;
    let gts = png_files(gt_dir)?;
    if preds.len() != gts.len() {
        return Err(Error::Config(format!("{} predictions but {} ground-truth images", preds.len(), gts.len())));
    }
    let mut images = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(&gts) {
        if p.file_name() != g.file_name() {
            return Err(Error::Config(format!("unaligned files {} and {}", p.display(), g.display())));
        }
        let load = |path: &Path| -> Result<RgbImage> {
            Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
        };
        let (pi, gi) = (load(p)?, load(g)?);
        let mask = match mask_dir {
            Some(d) => {
                let mp = d.join(p.file_name().expect("file"));
                BinaryGrid::from_image(&image::open(&mp).map_err(|e| Error::image(&mp, e))?.to_luma8())
            }
            None => BinaryGrid { width: pi.width() as usize, height: pi.height() as usize, data: vec![true; (pi.width() * pi.height()) as usize] },
        };
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        images.push(image_metrics(&name, &pi, &gi, &mask)?);
    }
    Ok(aggregate(images))
}

/// Non-garment reference colors for the garment pixel classifier.
fn non_garment_colors() -> Vec<[u8; 3]> {
    let mut v = vec![crate::synthdata::BACKGROUND, [0, 0, 0]];
    v.extend(crate::synthdata::reference_colors());
    v
}

fn dist2(a: [u8; 3], b: [u8; 3]) -> i32 {
    (0..3).map(|c| (a[c] as i32 - b[c] as i32).pow(2)).sum()
}

/// A pixel is garment when it is nearer to one of the garment's texture
/// colors than to every background, skin and neutral color.
pub fn is_garment_pixel(p: [u8; 3], palette: &[[u8; 3]]) -> bool {
    let g = palette.iter().map(|&c| dist2(p, c)).min().unwrap_or(i32::MAX);
    let o = non_garment_colors().into_iter().map(|c| dist2(p, c)).min().unwrap_or(i32::MAX);
    g < o
}

/// Fraction of garment-classified pixels in the bottom `band` fraction of
/// the mask's rows.
pub fn bottom_band_garment_fraction(img: &RgbImage, mask: &BinaryGrid, palette: &[[u8; 3]], band: f64) -> Result<f64> {
    let bb = mask.bbox().ok_or_else(|| Error::Domain("empty mask".into()))?;
    let rows = ((bb.height() as f64 * band).ceil() as i64).max(1);
    let (mut hit, mut total) = (0usize, 0usize);
    for y in (bb.y1 - rows + 1)..=bb.y1 {
        for x in bb.x0..=bb.x1 {
            if mask.get(x as usize, y as usize) {
                total += 1;
                if is_garment_pixel(img.get_pixel(x as u32, y as u32).0, palette) {
                    hit += 1;
                }
            }
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Bottom share of the mask rows inspected by the cross-category check.
pub const FIT_BAND: f64 = 0.2;
/// A band whose garment fraction reaches this counts as filled.
pub const FIT_FILL_THRESHOLD: f64 = 0.5;

/// Whether the garment in `img` fills the bottom band of `mask`.
pub fn fills_bottom_band(img: &RgbImage, mask: &BinaryGrid, palette: &[[u8; 3]]) -> Result<bool> {
    Ok(bottom_band_garment_fraction(img, mask, palette, FIT_BAND)? >= FIT_FILL_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::gen_sample;

    fn small() -> ModelConfig {
        ModelConfig { h: 32, w: 32, patch: 4, width: 16, depth: 1, heads: 2, d_emb: 8, channel_factor: 0.125, mlp_ratio: 2 }
    }

    fn sample(seed: u64, cat: Category) -> TryOnSample {
        gen_sample(&mut ChaCha8Rng::seed_from_u64(seed), cat, 32, 32).unwrap()
    }

    #[test]
    fn noise_loss_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let eps = Tensor::new(&[2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let p = tape.constant(&eps);
        let l = noise_loss(&mut tape, p, &eps, 1.0).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
        let shifted = Tensor::new(&[2, 2], eps.data().iter().map(|v| v + 0.5).collect()).unwrap();
        let p = tape.constant(&shifted);
        let l = noise_loss(&mut tape, p, &eps, 1.0).unwrap();
        assert!((tape.scalar_value(l) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn true_noise_gives_zero_frequency_loss() {
        let cfg = small();
        let s = PreparedSample::new(&cfg, &sample(1, Category::Upper)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &t in &[0.1f32, 0.5, 0.85] {
            let z0 = patchify(&s.person, cfg.patch).unwrap();
            let eps = Tensor::randn(z0.dims(), 1.0, &mut rng);
            let z_t = forward_interpolate(&z0, &eps, t).unwrap();
            let mut tape: Tape<f64> = Tape::new();
            let e = tape.constant(&eps);
            let (lf, _) = frequency_loss(&mut tape, &cfg, &z_t, e, t, &s.person_pixels, &s.garment_mask, &TrainConfig::default()).unwrap();
            assert!(tape.scalar_value(lf).abs() < 1e-6, "t={t}: {}", tape.scalar_value(lf));
        }
    }

    #[test]
    fn zero_lambda_matches_plain_training() {
        let cfg = small();
        let samples: Vec<_> = (0..3).map(|i| PreparedSample::new(&cfg, &sample(i, Category::ALL[i as usize])).unwrap()).collect();
        let gs = init_garment_params(&cfg, 0).unwrap();
        let run = |lambda: f32, gate: f32| {
            let mut ds = init_denoiser_params(&cfg, 0).unwrap();
            let tc = TrainConfig { lr: 1e-3, batch: 2, steps: 3, lambda_freq: lambda, freq_t_gate: gate, ..Default::default() };
            train_tryon(&cfg, &samples, &gs, &mut ds, &tc, |_| {}).unwrap()
        };
        let a = run(0.0, 0.9);
        let b = run(0.0, 0.0);
        assert_eq!(a, b);
        assert!(a.records.iter().all(|r| r.l_f == 0.0 && r.total == r.l_noise));
    }

    #[test]
    fn garment_checkpoint_mismatch_is_rejected() {
        let cfg = small();
        let other = ModelConfig { width: 8, ..small() };
        let samples = vec![PreparedSample::new(&cfg, &sample(0, Category::Dress)).unwrap()];
        let gs = init_garment_params(&other, 0).unwrap();
        let mut ds = init_denoiser_params(&cfg, 0).unwrap();
        let tc = TrainConfig { steps: 1, ..Default::default() };
        assert!(matches!(train_tryon(&cfg, &samples, &gs, &mut ds, &tc, |_| {}), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn inference_pastes_back_and_is_deterministic() {
        let cfg = small();
        let s = sample(4, Category::Upper);
        let gs = init_garment_params(&cfg, 0).unwrap();
        let ds = init_denoiser_params(&cfg, 0).unwrap();
        let opts = InferenceOptions { steps: 3, seed: 7, ..Default::default() };
        let run = || infer_tryon(&cfg, &ds, &gs, &s.person, &s.garment, &s.keypoints, &s.parsing, s.category, &opts).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.image, b.image);
        for (x, y, p) in a.image.enumerate_pixels() {
            if !a.mask.grid.get(x as usize, y as usize) {
                assert_eq!(p, s.person.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = sample(2, Category::Lower).person;
        let b = sample(3, Category::Lower).person;
        assert_eq!(ssim(&a, &a, None).unwrap(), 1.0);
        let ab = ssim(&a, &b, None).unwrap();
        assert!((ab - ssim(&b, &a, None).unwrap()).abs() < 1e-9);
        assert!(ab < 1.0);
    }

    #[test]
    fn full_mask_spectral_is_mn_times_l2() {
        let a = sample(5, Category::Dress).person;
        let b = sample(6, Category::Dress).person;
        let full = BinaryGrid { width: 32, height: 32, data: vec![true; 1024] };
        let m = image_metrics("x", &a, &b, &full).unwrap();
        assert!((m.spectral - 1024.0 * m.masked_l2).abs() <= 1e-9 * m.spectral.max(1.0));
    }

    #[test]
    fn loss_csv_header() {
        let log = LossLog { records: vec![LossRecord { step: 0, l_noise: 1.0, l_f: 0.5, total: 1.5, l_f_raw: 3.0, grad_norm: 0.1 }] };
        assert!(log.to_csv().starts_with("step,l_noise,l_f,total"));
    }
}
