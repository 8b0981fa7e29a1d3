//! Central finite-difference checks shared by the gradient tests and the
//! acceptance harness.

#![allow(dead_code)]

use std::sync::Arc;

use fitdit::conditioning::garment_embed;
use fitdit::dit::{
    extract_garment_kv, garment_forward, init_denoiser_params, init_garment_params, patchify, DenoiserInput,
    ModelConfig, DENOISER_PREFIX,
};
use fitdit::nn::{attention_hybrid, block_forward, init_block, ModulationParams, ParamSource};
use fitdit::pipeline::{frequency_loss, noise_loss, FreqNorm, TrainConfig};
use fitdit::rflow::forward_interpolate;
use fitdit::spectral::{spectral_loss, FrequencyWeighting};
use fitdit::synthdata::{gen_sample, image_to_latent};
use fitdit::maskgen::Category;
use fitdit::tensor::{ParameterStore, Tape, Tensor, Var};
use fitdit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL: f64 = 1e-3;
pub const FD_ABS: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error among entries above the absolute floor.
    pub max_rel: f64,
    pub max_abs: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

struct Acc {
    checked: usize,
    failures: usize,
    max_rel: f64,
    max_abs: f64,
}

impl Acc {
    fn new() -> Self {
        Acc { checked: 0, failures: 0, max_rel: 0.0, max_abs: 0.0 }
    }

    fn push(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        self.max_abs = self.max_abs.max(diff);
        if diff <= FD_ABS {
            return;
        }
        let rel = diff / analytic.abs().max(numeric.abs());
        self.max_rel = self.max_rel.max(rel);
        if rel >= FD_REL || !rel.is_finite() {
            self.failures += 1;
        }
    }

    fn report(self, name: &str) -> FdReport {
        FdReport {
            name: name.to_string(),
            checked: self.checked,
            failures: self.failures,
            max_rel: self.max_rel,
            max_abs: self.max_abs,
        }
    }
}

/// Checks every entry of every input of `f`.
pub fn check_inputs(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<FdReport> {
    let eval = |vals: &[Vec<f64>], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape: Tape<f64> = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|((d, _), v)| tape.leaf_raw(d, v.clone(), true))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &vars)?;
        let value = tape.scalar_value(loss);
        if !grad {
            return Ok((value, None));
        }
        let g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, x)| g.get(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
            .collect();
        Ok((value, Some(grads)))
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (_, grads) = eval(&base, true)?;
    let grads = grads.expect("requested");
    let mut acc = Acc::new();
    for i in 0..base.len() {
        for j in 0..base[i].len() {
            let mut vals = base.clone();
            vals[i][j] = base[i][j] + FD_STEP;
            let (lp, _) = eval(&vals, false)?;
            vals[i][j] = base[i][j] - FD_STEP;
            let (lm, _) = eval(&vals, false)?;
            acc.push(grads[i][j], (lp - lm) / (2.0 * FD_STEP));
        }
    }
    Ok(acc.report(name))
}

/// Checks up to `per_tensor` random entries of every parameter.
///
/// Parameters are stored in `f32`, so the numeric derivative divides by the
/// perturbation actually applied after rounding.
pub fn check_params(
    name: &str,
    store: &mut ParameterStore,
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, ParamSource) -> Result<Var>,
) -> Result<FdReport> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let analytic: Vec<(String, Vec<f64>)> = {
        let mut tape: Tape<f64> = Tape::new();
        let loss = f(&mut tape, ParamSource::trainable(store))?;
        let g = tape.backward(loss)?;
        names
            .iter()
            .map(|n| {
                let len = store.get(n).expect("listed").len();
                let v = tape.param(store, n).expect("listed");
                (n.clone(), g.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec))
            })
            .collect()
    };
    let loss_at = |s: &ParameterStore| -> Result<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let l = f(&mut tape, ParamSource::trainable(s))?;
        Ok(tape.scalar_value(l))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new();
    for (n, g) in &analytic {
        let len = g.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for j in picks {
            let orig = store.get(n).expect("listed").data()[j];
            let plus = (orig as f64 + FD_STEP) as f32;
            let minus = (orig as f64 - FD_STEP) as f32;
            store.get_mut(n).expect("listed").data_mut()[j] = plus;
            let lp = loss_at(store)?;
            store.get_mut(n).expect("listed").data_mut()[j] = minus;
            let lm = loss_at(store)?;
            store.get_mut(n).expect("listed").data_mut()[j] = orig;
            acc.push(g[j], (lp - lm) / (plus as f64 - minus as f64));
        }
    }
    Ok(acc.report(name))
}

pub fn randv(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("std > 0");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Adds `N(0, std)` noise to every parameter so zero-initialised layers
/// carry gradient.
pub fn perturb(store: &mut ParameterStore, seed: u64, std: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0f32, std).expect("std > 0");
    store.map_values(|_, _, v| v + d.sample(&mut rng));
}

/// `Σ out ⊙ r` for a fixed random `r`, which keeps gradients of
/// symmetric ops from cancelling.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let dims = tape.dims(out).to_vec();
    let n = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let r = tape.constant_raw(&dims, randv(&mut rng, n, 1.0))?;
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn inp(rng: &mut ChaCha8Rng, dims: &[usize]) -> (Vec<usize>, Vec<f64>) {
    (dims.to_vec(), randv(rng, dims.iter().product(), 1.0))
}

/// One check per differentiable tape op and the spectral loss.
pub fn op_checks() -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let r = &mut rng;
    out.push(check_inputs("add", &[inp(r, &[3, 4]), inp(r, &[3, 4])], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 1)
    })?);
    out.push(check_inputs("add broadcast", &[inp(r, &[3, 4]), inp(r, &[1])], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 2)
    })?);
    out.push(check_inputs("sub", &[inp(r, &[2, 5]), inp(r, &[2, 5])], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 3)
    })?);
    out.push(check_inputs("mul", &[inp(r, &[2, 5]), inp(r, &[2, 5])], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 4)
    })?);
    out.push(check_inputs("scale", &[inp(r, &[6])], |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, 5)
    })?);
    out.push(check_inputs("silu", &[inp(r, &[7])], |t, v| {
        let y = t.silu(v[0]);
        project(t, y, 6)
    })?);
    out.push(check_inputs("square+mean", &[inp(r, &[2, 3])], |t, v| {
        let y = t.square(v[0]);
        Ok(t.mean(y))
    })?);
    out.push(check_inputs("sum", &[inp(r, &[2, 3])], |t, v| {
        let y = t.silu(v[0]);
        Ok(t.sum(y))
    })?);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { inp(r, &[4, 3]) } else { inp(r, &[3, 4]) };
        let b = if tb { inp(r, &[5, 4]) } else { inp(r, &[4, 5]) };
        out.push(check_inputs(&format!("matmul ta={ta} tb={tb}"), &[a, b], |t, v| {
            let y = t.matmul_t(v[0], v[1], ta, tb)?;
            project(t, y, 7)
        })?);
    }
    out.push(check_inputs("add_row", &[inp(r, &[3, 4]), inp(r, &[4])], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, 8)
    })?);
    out.push(check_inputs("linear", &[inp(r, &[3, 4]), inp(r, &[4, 2]), inp(r, &[2])], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, 9)
    })?);
    for axis in [0, 1] {
        out.push(check_inputs(&format!("softmax axis {axis}"), &[inp(r, &[3, 4])], |t, v| {
            let y = t.softmax(v[0], axis)?;
            project(t, y, 10)
        })?);
    }
    out.push(check_inputs("layernorm", &[inp(r, &[3, 6])], |t, v| {
        let y = t.layernorm_modulated(v[0], None, None)?;
        project(t, y, 11)
    })?);
    out.push(check_inputs("layernorm modulated", &[inp(r, &[3, 6]), inp(r, &[1, 6]), inp(r, &[1, 6])], |t, v| {
        let y = t.layernorm_modulated(v[0], Some(v[1]), Some(v[2]))?;
        project(t, y, 12)
    })?);
    for axis in [0, 1] {
        out.push(check_inputs(&format!("concat axis {axis}"), &[inp(r, &[2, 3]), inp(r, &[2, 3])], |t, v| {
            let y = t.concat(&[v[0], v[1]], axis)?;
            project(t, y, 13)
        })?);
    }
    out.push(check_inputs("slice+split", &[inp(r, &[3, 6])], |t, v| {
        let s = t.slice(v[0], 1, 1, 3)?;
        let parts = t.split(v[0], 0, &[1, 2])?;
        let a = project(t, s, 14)?;
        let b = project(t, parts[1], 15)?;
        t.add(a, b)
    })?);
    out.push(check_inputs("reshape", &[inp(r, &[2, 6])], |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        let y = t.silu(y);
        project(t, y, 16)
    })?);
    let idx: Arc<[usize]> = (0..10).map(|i| (i * 7) % 6).collect::<Vec<_>>().into();
    out.push(check_inputs("gather", &[inp(r, &[6])], move |t, v| {
        let y = t.gather(v[0], idx.clone(), &[2, 5])?;
        project(t, y, 17)
    })?);
    for heads in [1, 2] {
        out.push(check_inputs(
            &format!("attention heads={heads}"),
            &[inp(r, &[3, 4]), inp(r, &[5, 4]), inp(r, &[5, 4])],
            |t, v| {
                let y = t.attention(v[0], v[1], v[2], heads)?;
                project(t, y, 18)
            },
        )?);
    }
    out.push(check_inputs("conv2d k4 s2 p1", &[inp(r, &[2, 6, 6]), inp(r, &[3, 2, 4, 4]), inp(r, &[3])], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
        project(t, y, 19)
    })?);
    out.push(check_inputs("conv2d k3 s1 p0", &[inp(r, &[1, 5, 5]), inp(r, &[2, 1, 3, 3]), inp(r, &[2])], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
        project(t, y, 20)
    })?);
    let target: Vec<f32> = randv(r, 2 * 4 * 8, 1.0).into_iter().map(|x| x as f32).collect();
    let mask: Vec<f32> = (0..32).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    for (label, w) in [("uniform", FrequencyWeighting::Uniform), ("radial", FrequencyWeighting::Radial { alpha: 2.0 })] {
        let (tg, mk) = (target.clone(), mask.clone());
        out.push(check_inputs(&format!("spectral loss {label}"), &[inp(r, &[2, 4, 8])], move |t, v| {
            spectral_loss(t, v[0], &tg, &mk, w, 0.1)
        })?);
    }
    Ok(out)
}

/// Smallest model the end-to-end checks run on.
pub fn tiny_config() -> ModelConfig {
    ModelConfig { h: 32, w: 32, patch: 4, width: 16, depth: 2, heads: 2, d_emb: 8, channel_factor: 0.125, mlp_ratio: 2 }
}

/// Hybrid attention, one block and the conditioning encoders.
pub fn module_checks() -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let r = &mut rng;
    let mut out = Vec::new();
    for heads in [1, 2, 4] {
        out.push(check_inputs(
            &format!("attention_hybrid heads={heads}"),
            &[inp(r, &[3, 8]), inp(r, &[3, 8]), inp(r, &[3, 8]), inp(r, &[4, 8]), inp(r, &[4, 8])],
            |t, v| {
                let y = attention_hybrid(t, v[0], v[1], v[2], Some((v[3], v[4])), heads)?;
                project(t, y, 30)
            },
        )?);
    }

    // block at C=16, T=24 with modulation and cache, w.r.t. inputs and params
    let mut store = ParameterStore::new();
    init_block(&mut store, r, "blk", 16, 2)?;
    perturb(&mut store, 31, 0.2);
    let x = inp(r, &[24, 16]);
    let mods: Vec<_> = (0..4).map(|_| inp(r, &[1, 16])).collect();
    let cache = (inp(r, &[10, 16]), inp(r, &[10, 16]));
    let block = |t: &mut Tape<f64>, ps: ParamSource, v: &[Var]| -> Result<Var> {
        let m = ModulationParams { scale1: v[1], shift1: v[2], scale2: v[3], shift2: v[4] };
        let y = block_forward(t, ps, "blk", v[0], Some(&m), Some((v[5], v[6])), 2)?;
        project(t, y.out, 32)
    };
    let mut inputs = vec![x.clone()];
    inputs.extend(mods.iter().cloned());
    inputs.push(cache.0.clone());
    inputs.push(cache.1.clone());
    {
        let s = store.clone();
        out.push(check_inputs("block inputs", &inputs, |t, v| block(t, ParamSource::frozen(&s), v))?);
    }
    let cons = inputs.clone();
    out.push(check_params("block params", &mut store, 6, 33, |t, ps| {
        let v: Vec<Var> = cons.iter().map(|(d, x)| t.constant_raw(d, x.clone())).collect::<Result<_>>()?;
        block(t, ps, &v)
    })?);

    let cfg = tiny_config();
    let mut srng = ChaCha8Rng::seed_from_u64(34);
    let sample = gen_sample(&mut srng, Category::Upper, cfg.h, cfg.w)?;
    let garment = image_to_latent(&sample.garment);
    let mut gstore = init_garment_params(&cfg, 35)?;
    perturb(&mut gstore, 36, 0.1);
    let mut emb_store = ParameterStore::new();
    for (n, t) in gstore.iter().filter(|(n, _)| n.starts_with("embed.")) {
        emb_store.insert(n.clone(), t.clone())?;
    }
    out.push(check_params("garment embedder", &mut emb_store, 4, 37, |t, ps| {
        let e = garment_embed(t, &cfg, ps, &garment)?;
        project(t, e, 38)
    })?);

    let mut dstore = init_denoiser_params(&cfg, 39)?;
    perturb(&mut dstore, 40, 0.1);
    let mut pose_store = ParameterStore::new();
    for (n, t) in dstore.iter().filter(|(n, _)| n.starts_with(&format!("{DENOISER_PREFIX}.pose."))) {
        pose_store.insert(n.clone(), t.clone())?;
    }
    let heat = DenoiserInput::new(&cfg, Tensor::zeros(&[cfg.tokens(), cfg.latent_channels()]), &garment, &vec![0.0; cfg.h * cfg.w], &sample.keypoints)?.pose;
    out.push(check_params("pose guider", &mut pose_store, 4, 41, |t, ps| {
        let h = t.constant(&heat);
        let p = fitdit::conditioning::pose_guider(t, &cfg, ps, DENOISER_PREFIX, h)?;
        let a = project(t, p.tokens, 42)?;
        let b = project(t, p.map, 43)?;
        t.add(a, b)
    })?);
    Ok(out)
}

/// Full 2-block 32×32 model: stage-1 loss over the garment branch and the
/// stage-2 total loss (noise + frequency) over the denoiser.
pub fn model_checks() -> Result<Vec<FdReport>> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let sample = gen_sample(&mut rng, Category::Dress, cfg.h, cfg.w)?;
    let person = image_to_latent(&sample.person);
    let garment = image_to_latent(&sample.garment);
    let mut out = Vec::new();

    let mut gstore = init_garment_params(&cfg, 51)?;
    perturb(&mut gstore, 52, 0.1);
    let t_g = 0.4f32;
    let z0g = patchify(&garment, cfg.patch)?;
    let eps_g = Tensor::randn(z0g.dims(), 1.0, &mut rng);
    let zg = forward_interpolate(&z0g, &eps_g, t_g)?;
    out.push(check_params("garment branch stage-1 loss", &mut gstore, 3, 53, |t, ps| {
        let g = garment_embed(t, &cfg, ps, &garment)?;
        let z = t.constant(&zg);
        let o = garment_forward(t, &cfg, ps, z, t_g, g)?;
        noise_loss(t, o.eps, &eps_g, 1.0)
    })?);

    let gemb = fitdit::conditioning::garment_embedding(&cfg, &gstore, &garment)?;
    let cache = extract_garment_kv(&cfg, &gstore, &garment)?;
    let mut dstore = init_denoiser_params(&cfg, 54)?;
    perturb(&mut dstore, 55, 0.1);
    let mask: Vec<f32> = sample.garment_region().to_f32();
    let agn: Vec<f32> = {
        let bb = sample.garment_region().bbox().expect("garment present");
        let g = bb.fill(cfg.w, cfg.h);
        g.to_f32()
    };
    let t_d = 0.35f32;
    let z0 = patchify(&person, cfg.patch)?;
    let eps = Tensor::randn(z0.dims(), 1.0, &mut rng);
    let z_t = forward_interpolate(&z0, &eps, t_d)?;
    let dinp = DenoiserInput::new(&cfg, z_t.clone(), &person, &agn, &sample.keypoints)?;
    let pixels: Vec<f32> = person.data().iter().map(|v| (v + 1.0) * 0.5).collect();
    let tcfg = TrainConfig { freq_norm: FreqNorm::Mean, ..TrainConfig::default() };
    out.push(check_params("denoiser total loss", &mut dstore, 3, 56, |t, ps| {
        let g = t.constant(&Tensor::new(&[1, cfg.d_emb], gemb.0.clone())?);
        let pred = fitdit::dit::denoising_forward(t, &cfg, ps, &dinp, t_d, g, Some(&cache))?;
        let ln = noise_loss(t, pred, &eps, 1.0)?;
        let (lf, _) = frequency_loss(t, &cfg, &z_t, pred, t_d, &pixels, &mask, &tcfg)?;
        let lf = t.scale(lf, 10.0);
        t.add(ln, lf)
    })?);
    Ok(out)
}

/// Outcome of the agnostic-mask property suite.
#[derive(Debug, Default, Clone)]
pub struct MaskSuite {
    pub checked: usize,
    pub not_containing_region: usize,
    pub missing_keypoint: usize,
    pub not_rectangle: usize,
    pub not_monotone: usize,
}

impl MaskSuite {
    pub fn violations(&self) -> usize {
        self.not_containing_region + self.missing_keypoint + self.not_rectangle + self.not_monotone
    }
}

/// Builds masks for `per_category` generated samples of every category and
/// checks containment, rectangularity and monotonicity in the dilation
/// range (same draws, wider range gives a superset).
pub fn mask_suite(per_category: usize, seed: u64, size: usize) -> Result<MaskSuite> {
    use fitdit::maskgen::{build_agnostic_mask, DilationRange};
    let mut out = MaskSuite::default();
    for (ci, &cat) in Category::ALL.iter().enumerate() {
        for i in 0..per_category {
            let s = fitdit::synthdata::sample_seed(seed, (ci * per_category + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let sample = gen_sample(&mut rng, cat, size, size)?;
            let narrow = DilationRange::default_for(size);
            let wide = DilationRange::new(narrow.min, narrow.max * 2)?;
            let m = build_agnostic_mask(cat, &sample.keypoints, &sample.parsing, &mut ChaCha8Rng::seed_from_u64(s ^ 1), narrow)?;
            let mw = build_agnostic_mask(cat, &sample.keypoints, &sample.parsing, &mut ChaCha8Rng::seed_from_u64(s ^ 1), wide)?;
            let zero = DilationRange::new(0, 0)?;
            let m0 = build_agnostic_mask(cat, &sample.keypoints, &sample.parsing, &mut ChaCha8Rng::seed_from_u64(s ^ 1), zero)?;
            out.checked += 1;
            if !m.grid.contains(&sample.parsing.region(cat.parsing_label())) {
                out.not_containing_region += 1;
            }
            if cat
                .required_keypoints(&sample.keypoints)
                .iter()
                .any(|(_, k)| {
                    let (x, y) = k.pixel();
                    x < 0 || y < 0 || !m.grid.get(x as usize, y as usize)
                })
            {
                out.missing_keypoint += 1;
            }
            let filled = m.grid.bbox().map(|b| b.fill(size, size));
            if filled.as_ref() != Some(&m.grid) || m.grid.count() as i64 != m.provenance.rect.area() {
                out.not_rectangle += 1;
            }
            if !(mw.grid.contains(&m.grid) && m.grid.contains(&m0.grid)) {
                out.not_monotone += 1;
            }
        }
    }
    Ok(out)
}

/// Largest absolute gap between plain self-attention and attention whose
/// cache duplicates the query's own keys and values.
pub fn duplication_gap(seed: u64, tokens: usize, width: usize, heads: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tokens * width;
    let (qv, kv, vv) = (randv(&mut rng, n, 1.0), randv(&mut rng, n, 1.0), randv(&mut rng, n, 1.0));
    let mut t = Tape::<f64>::new();
    let q = t.constant_raw(&[tokens, width], qv)?;
    let k = t.constant_raw(&[tokens, width], kv)?;
    let v = t.constant_raw(&[tokens, width], vv)?;
    let plain = attention_hybrid(&mut t, q, k, v, None, heads)?;
    let dup = attention_hybrid(&mut t, q, k, v, Some((k, v)), heads)?;
    Ok(t.value(plain).iter().zip(t.value(dup)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}
