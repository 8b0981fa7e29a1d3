//! Conditioning signals: timestep and garment embeddings, modulation and
//! the pose guider.

mod pose;

use std::sync::Arc;

use rand::Rng;

pub use pose::{rasterize_skeleton, Keypoint, PoseKeypoints};

use crate::dit::{patchify_var, ModelConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{block_forward, init_block, init_linear, linear, token_mean, xavier_uniform, ModulationParams, ParamSource};
use crate::tensor::{ParameterStore, Scalar, Tape, Tensor, Var};

pub const EMBED_PREFIX: &str = "embed";
const EMBED_BLOCKS: usize = 2;
const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal embedding: `out[2i] = sin(t·f_i)`, `out[2i+1] = cos(t·f_i)`
/// with `f_i = 10⁴^(−i/(dim/2))`.
pub fn timestep_embed(t: f64, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("timestep embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        out.push((t * f).sin() as f32);
        out.push((t * f).cos() as f32);
    }
    Ok(out)
}

/// Output of the garment encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct GarmentEmbedding(pub Vec<f32>);

impl GarmentEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn init_embedder<R: Rng + ?Sized>(store: &mut ParameterStore, rng: &mut R, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.width;
    init_linear(store, rng, &format!("{EMBED_PREFIX}.in"), cfg.latent_channels(), c, false)?;
    store.insert(format!("{EMBED_PREFIX}.pos"), Tensor::randn(&[cfg.tokens(), c], 0.02, rng))?;
    for b in 0..EMBED_BLOCKS {
        init_block(store, rng, &format!("{EMBED_PREFIX}.blocks.{b}"), c, cfg.mlp_ratio)?;
    }
    init_linear(store, rng, &format!("{EMBED_PREFIX}.out"), c, cfg.d_emb, false)
}

/// Patch encoder: patchify, two unmodulated blocks, token mean, linear.
/// Returns a `[1, d_emb]` row.
pub fn garment_embed<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    ps: ParamSource,
    garment: &Tensor,
) -> Result<Var> {
    if garment.dims() != [3, cfg.h, cfg.w] {
        return Err(shape_err!("garment {:?} is not [3, {}, {}]", garment.dims(), cfg.h, cfg.w));
    }
    let g = tape.constant(garment);
    let tok = patchify_var(tape, g, cfg.patch)?;
    let x = linear(tape, ps, tok, &format!("{EMBED_PREFIX}.in"))?;
    let pos = ps.load(tape, &format!("{EMBED_PREFIX}.pos"))?;
    let mut x = tape.add(x, pos)?;
    for b in 0..EMBED_BLOCKS {
        x = block_forward(tape, ps, &format!("{EMBED_PREFIX}.blocks.{b}"), x, None, None, cfg.heads)?.out;
    }
    let m = token_mean(tape, x)?;
    linear(tape, ps, m, &format!("{EMBED_PREFIX}.out"))
}

/// Embedding of one garment image outside any training graph.
pub fn garment_embedding(cfg: &ModelConfig, store: &ParameterStore, garment: &Tensor) -> Result<GarmentEmbedding> {
    let mut tape: Tape<f32> = Tape::new();
    let v = garment_embed(&mut tape, cfg, ParamSource::frozen(store), garment)?;
    Ok(GarmentEmbedding(tape.value(v).to_vec()))
}

pub(crate) fn init_modulation<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    rng: &mut R,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<()> {
    let c = cfg.width;
    init_linear(store, rng, &format!("{prefix}.t"), c, c, false)?;
    init_linear(store, rng, &format!("{prefix}.g"), cfg.d_emb, c, false)?;
    for b in 0..cfg.depth {
        init_linear(store, rng, &format!("{prefix}.blocks.{b}.mod"), c, 4 * c, true)?;
    }
    init_linear(store, rng, &format!("{prefix}.final.mod"), c, 2 * c, true)
}

/// Modulation for every block plus the output norm.
#[derive(Clone, Debug)]
pub struct Modulation {
    pub blocks: Vec<ModulationParams>,
    pub final_scale: Var,
    pub final_shift: Var,
}

/// `c = silu(W_t·t_emb + W_g·g_emb)`; each block splits `W_b·c` into two
/// `(scale, shift)` pairs.
pub fn modulation_params<S: Scalar>(
    tape: &mut Tape<S>,
    ps: ParamSource,
    prefix: &str,
    cfg: &ModelConfig,
    t_emb: Var,
    g_emb: Var,
) -> Result<Modulation> {
    let c = cfg.width;
    if tape.dims(t_emb) != [1, c] || tape.dims(g_emb) != [1, cfg.d_emb] {
        return Err(shape_err!(
            "modulation inputs {:?}, {:?} for width {c}, d_emb {}",
            tape.dims(t_emb),
            tape.dims(g_emb),
            cfg.d_emb
        ));
    }
    let a = linear(tape, ps, t_emb, &format!("{prefix}.t"))?;
    let b = linear(tape, ps, g_emb, &format!("{prefix}.g"))?;
    let s = tape.add(a, b)?;
    let cond = tape.silu(s);
    let mut blocks = Vec::with_capacity(cfg.depth);
    for blk in 0..cfg.depth {
        let m = linear(tape, ps, cond, &format!("{prefix}.blocks.{blk}.mod"))?;
        let p = tape.split(m, 1, &[c, c, c, c])?;
        blocks.push(ModulationParams { scale1: p[0], shift1: p[1], scale2: p[2], shift2: p[3] });
    }
    let f = linear(tape, ps, cond, &format!("{prefix}.final.mod"))?;
    let p = tape.split(f, 1, &[c, c])?;
    Ok(Modulation { blocks, final_scale: p[0], final_shift: p[1] })
}

pub(crate) fn init_pose_guider<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    rng: &mut R,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<()> {
    let mut cin = 1;
    for (i, &cout) in cfg.pose_channels().iter().enumerate() {
        let w = xavier_uniform(&[cout, cin, 4, 4], cin * 16, cout * 16, rng);
        store.insert(format!("{prefix}.pose.conv{i}.w"), w)?;
        store.insert(format!("{prefix}.pose.conv{i}.b"), Tensor::zeros(&[cout]))?;
        cin = cout;
    }
    init_linear(store, rng, &format!("{prefix}.pose.out"), cin, cfg.width, true)
}

/// Pose guider features: the conv map at `1/16` resolution and its
/// projection onto the token grid.
#[derive(Clone, Copy, Debug)]
pub struct PoseFeatures {
    /// `[c4, H/16, W/16]`.
    pub map: Var,
    /// `[T, C]`, nearest-upsampled to the token grid.
    pub tokens: Var,
}

/// Four stride-2 4×4 convolutions over a `[1, H, W]` skeleton heatmap.
pub fn pose_guider<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    ps: ParamSource,
    prefix: &str,
    heatmap: Var,
) -> Result<PoseFeatures> {
    if tape.dims(heatmap) != [1, cfg.h, cfg.w] {
        return Err(shape_err!("heatmap {:?} for a {}x{} canvas", tape.dims(heatmap), cfg.h, cfg.w));
    }
    let mut x = heatmap;
    for i in 0..4 {
        let w = ps.load(tape, &format!("{prefix}.pose.conv{i}.w"))?;
        let b = ps.load(tape, &format!("{prefix}.pose.conv{i}.b"))?;
        let y = tape.conv2d(x, w, b, 2, 1)?;
        x = tape.silu(y);
    }
    let c4 = tape.dims(x)[0];
    let (h16, w16) = (cfg.h / 16, cfg.w / 16);
    let (gh, gw) = cfg.grid();
    let f = 16 / cfg.patch;
    let mut idx = Vec::with_capacity(gh * gw * c4);
    for ty in 0..gh {
        for tx in 0..gw {
            for c in 0..c4 {
                idx.push(c * h16 * w16 + (ty / f) * w16 + tx / f);
            }
        }
    }
    let idx: Arc<[usize]> = idx.into();
    let up = tape.gather(x, idx, &[gh * gw, c4])?;
    let tokens = linear(tape, ps, up, &format!("{prefix}.pose.out"))?;
    Ok(PoseFeatures { map: x, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{init_denoiser_params, init_garment_params};

    fn small() -> ModelConfig {
        ModelConfig { h: 32, w: 32, patch: 4, width: 16, depth: 2, heads: 2, d_emb: 8, channel_factor: 0.125, mlp_ratio: 2 }
    }

    #[test]
    fn timestep_embedding_examples() {
        let e = timestep_embed(0.0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        let a = timestep_embed(250.0, 16).unwrap();
        let b = timestep_embed(500.0, 16).unwrap();
        let gap: f32 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(gap > 0.0);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(timestep_embed(0.0, 7).is_err());
    }

    #[test]
    fn embedding_deterministic_and_zero_with_zero_head() {
        let cfg = small();
        let mut gs = init_garment_params(&cfg, 3).unwrap();
        let g = Tensor::full(&[3, 32, 32], 0.3);
        let a = garment_embedding(&cfg, &gs, &g).unwrap();
        assert_eq!(a, garment_embedding(&cfg, &gs, &g).unwrap());
        assert_eq!(a.dim(), 8);
        gs.get_mut("embed.out.w").unwrap().data_mut().fill(0.0);
        let z = garment_embedding(&cfg, &gs, &Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(z.0.iter().all(|&v| v == 0.0));
        assert!(garment_embedding(&cfg, &gs, &Tensor::zeros(&[3, 16, 32])).is_err());
    }

    #[test]
    fn zero_init_modulation_is_identity() {
        let cfg = small();
        let ds = init_denoiser_params(&cfg, 0).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let t = tape.constant(&Tensor::new(&[1, 16], timestep_embed(300.0, 16).unwrap()).unwrap());
        let g = tape.constant(&Tensor::full(&[1, 8], 0.5));
        let m = modulation_params(&mut tape, ParamSource::frozen(&ds), "denoiser", &cfg, t, g).unwrap();
        assert_eq!(m.blocks.len(), 2);
        for b in &m.blocks {
            for v in [b.scale1, b.shift1, b.scale2, b.shift2] {
                assert!(tape.value(v).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn pose_guider_shapes_and_zero_projection() {
        let cfg = small();
        let ds = init_denoiser_params(&cfg, 0).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let h = tape.constant(&Tensor::zeros(&[1, 32, 32]));
        let f = pose_guider(&mut tape, &cfg, ParamSource::frozen(&ds), "denoiser", h).unwrap();
        assert_eq!(tape.dims(f.map), &[64, 2, 2]);
        assert_eq!(tape.dims(f.tokens), &[cfg.tokens(), 16]);
        assert!(tape.value(f.tokens).iter().all(|&x| x == 0.0));
    }
}
