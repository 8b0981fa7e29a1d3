//! Patch codec, model configuration, the garment branch with its key/value
//! cache, and the denoiser.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    garment_embed, init_embedder, init_modulation, init_pose_guider, modulation_params, pose_guider,
    rasterize_skeleton, timestep_embed, PoseKeypoints,
};
use crate::error::{shape_err, Error, Result};
use crate::nn::{block_forward, init_block, init_linear, linear, ModulationParams, ParamSource};
use crate::tensor::{read_checkpoint, write_checkpoint, ParameterStore, Scalar, Tape, Tensor, Var};

pub const GARMENT_PREFIX: &str = "garment";
pub const DENOISER_PREFIX: &str = "denoiser";

fn default_mlp_ratio() -> usize {
    4
}

/// Model hyperparameters; serialized as the checkpoint's JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_emb: usize,
    /// Multiplier on the pose guider's base channels (32, 64, 256, 512).
    pub channel_factor: f32,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h: 64,
            w: 64,
            patch: 2,
            width: 128,
            depth: 6,
            heads: 4,
            d_emb: 256,
            channel_factor: 0.125,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.h == 0 || self.w == 0 || self.h % 16 != 0 || self.w % 16 != 0 {
            return bad(format!("image {}x{} must be positive multiples of 16", self.h, self.w));
        }
        if self.patch == 0 || 16 % self.patch != 0 {
            return bad(format!("patch {} must divide 16", self.patch));
        }
        if self.width == 0 || self.width % 2 != 0 {
            return bad(format!("width {} must be even and positive", self.width));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.depth == 0 || self.d_emb == 0 || self.mlp_ratio == 0 {
            return bad("depth, d_emb and mlp_ratio must be positive".into());
        }
        if !(self.channel_factor > 0.0) {
            return bad(format!("channel_factor {} must be positive", self.channel_factor));
        }
        Ok(())
    }

    /// Token grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.patch, self.w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Channels per token of an RGB image.
    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn pose_channels(&self) -> [usize; 4] {
        [32.0f32, 64.0, 256.0, 512.0].map(|c| ((c * self.channel_factor).round() as usize).max(1))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    fn check_image(&self, dims: &[usize], channels: usize) -> Result<()> {
        if dims != [channels, self.h, self.w] {
            return Err(shape_err!("expected [{channels}, {}, {}], got {dims:?}", self.h, self.w));
        }
        Ok(())
    }
}

/// Index map taking a `[C, H, W]` image to `[T, C·p²]` tokens: token
/// `gy·(W/p) + gx`, channel `c·p² + dy·p + dx`.
pub fn patchify_index(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!("{h}x{w} not divisible by patch {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(c * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(ch * h * w + (gy * p + dy) * w + gx * p + dx);
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (i, &j) in idx.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

pub fn unpatchify_index(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    Ok(invert(&patchify_index(c, h, w, p)?))
}

/// Space-to-depth of a `[C, H, W]` tensor.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let d = image.dims();
    if d.len() != 3 {
        return Err(shape_err!("patchify expects [C, H, W], got {d:?}"));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let idx = patchify_index(c, h, w, p)?;
    let v = image.data();
    Tensor::new(&[(h / p) * (w / p), c * p * p], idx.iter().map(|&i| v[i]).collect())
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!("{h}x{w} not divisible by patch {p}"));
    }
    if tokens.dims() != [(h / p) * (w / p), c * p * p] {
        return Err(shape_err!("tokens {:?} do not tile a {c}x{h}x{w} image", tokens.dims()));
    }
    let idx = unpatchify_index(c, h, w, p)?;
    let v = tokens.data();
    Tensor::new(&[c, h, w], idx.iter().map(|&i| v[i]).collect())
}

pub(crate) fn patchify_var<S: Scalar>(tape: &mut Tape<S>, x: Var, p: usize) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    if d.len() != 3 {
        return Err(shape_err!("patchify expects [C, H, W], got {d:?}"));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let idx: Arc<[usize]> = patchify_index(c, h, w, p)?.into();
    tape.gather(x, idx, &[(h / p) * (w / p), c * p * p])
}

pub(crate) fn unpatchify_var<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: Var,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Var> {
    let idx: Arc<[usize]> = unpatchify_index(c, h, w, p)?.into();
    tape.gather(tokens, idx, &[c, h, w])
}

/// One denoiser or garment-branch block with its modulation and optional
/// cached garment keys/values.
pub fn dit_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    ps: ParamSource,
    prefix: &str,
    x: Var,
    modulation: &ModulationParams,
    cache: Option<(Var, Var)>,
    heads: usize,
) -> Result<Var> {
    Ok(block_forward(tape, ps, prefix, x, Some(modulation), cache, heads)?.out)
}

/// Keys and values of every garment-branch block, recorded at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GarmentKVCache {
    blocks: Vec<(Tensor, Tensor)>,
}

impl GarmentKVCache {
    pub fn new(blocks: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("a garment cache needs at least one block".into()));
        }
        let d = blocks[0].0.dims().to_vec();
        for (i, (k, v)) in blocks.iter().enumerate() {
            if k.dims().len() != 2 || k.dims() != d.as_slice() || v.dims() != d.as_slice() {
                return Err(shape_err!("cache block {i} has k {:?}, v {:?}", k.dims(), v.dims()));
            }
        }
        Ok(GarmentKVCache { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn tokens(&self) -> usize {
        self.blocks[0].0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.blocks[0].0.dims()[1]
    }

    pub fn block(&self, i: usize) -> Option<(&Tensor, &Tensor)> {
        self.blocks.get(i).map(|(k, v)| (k, v))
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.blocks.len());
        for (i, (k, v)) in self.blocks.iter().enumerate() {
            out.push((format!("kv.{i:03}.k"), k.clone()));
            out.push((format!("kv.{i:03}.v"), v.clone()));
        }
        out
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        if named.len() % 2 != 0 {
            return Err(Error::Checkpoint("cache needs k/v pairs".into()));
        }
        let mut blocks = Vec::new();
        let mut it = named.into_iter();
        let mut i = 0;
        while let (Some((kn, k)), Some((vn, v))) = (it.next(), it.next()) {
            if kn != format!("kv.{i:03}.k") || vn != format!("kv.{i:03}.v") {
                return Err(Error::Checkpoint(format!("unexpected cache entries {kn}, {vn}")));
            }
            blocks.push((k, v));
            i += 1;
        }
        Self::new(blocks)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(std::io::BufWriter::new(f), &self.to_named()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_named(read_checkpoint(std::io::BufReader::new(f))?)
    }
}

fn init_trunk<R: rand::Rng>(
    store: &mut ParameterStore,
    rng: &mut R,
    cfg: &ModelConfig,
    prefix: &str,
    in_channels: usize,
) -> Result<()> {
    let c = cfg.width;
    init_linear(store, rng, &format!("{prefix}.in"), in_channels, c, false)?;
    store.insert(format!("{prefix}.pos"), Tensor::randn(&[cfg.tokens(), c], 0.02, rng))?;
    init_modulation(store, rng, cfg, prefix)?;
    for b in 0..cfg.depth {
        init_block(store, rng, &format!("{prefix}.blocks.{b}"), c, cfg.mlp_ratio)?;
    }
    init_linear(store, rng, &format!("{prefix}.head"), c, cfg.latent_channels(), true)
}

/// Garment branch plus the garment encoder (`garment.*`, `embed.*`).
pub fn init_garment_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    init_embedder(&mut store, &mut rng, cfg)?;
    init_trunk(&mut store, &mut rng, cfg, GARMENT_PREFIX, cfg.latent_channels())?;
    Ok(store)
}

/// Denoiser parameters (`denoiser.*`).
pub fn init_denoiser_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD3_0153);
    let mut store = ParameterStore::new();
    let p2 = cfg.patch * cfg.patch;
    init_trunk(&mut store, &mut rng, cfg, DENOISER_PREFIX, 7 * p2)?;
    init_pose_guider(&mut store, &mut rng, cfg, DENOISER_PREFIX)?;
    Ok(store)
}

fn time_row<S: Scalar>(tape: &mut Tape<S>, cfg: &ModelConfig, t: f32) -> Result<Var> {
    let e = timestep_embed(1000.0 * t as f64, cfg.width)?;
    tape.constant_raw(&[1, cfg.width], e.into_iter().map(|v| S::of(v as f64)).collect())
}

/// Output of a trunk pass: predicted noise tokens and each block's keys and
/// values.
#[derive(Clone, Debug)]
pub struct TrunkOutput {
    pub eps: Var,
    pub kv: Vec<(Var, Var)>,
}

fn trunk_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    ps: ParamSource,
    prefix: &str,
    x: Var,
    t: f32,
    g_emb: Var,
    cache: Option<&[(Var, Var)]>,
) -> Result<TrunkOutput> {
    let temb = time_row(tape, cfg, t)?;
    let m = modulation_params(tape, ps, prefix, cfg, temb, g_emb)?;
    let mut x = x;
    let mut kv = Vec::with_capacity(cfg.depth);
    for b in 0..cfg.depth {
        let entry = cache.map(|c| c[b]);
        let o = block_forward(tape, ps, &format!("{prefix}.blocks.{b}"), x, Some(&m.blocks[b]), entry, cfg.heads)?;
        kv.push((o.k, o.v));
        x = o.out;
    }
    let h = tape.layernorm_modulated(x, Some(m.final_scale), Some(m.final_shift))?;
    let eps = linear(tape, ps, h, &format!("{prefix}.head"))?;
    Ok(TrunkOutput { eps, kv })
}

/// Garment-branch pass on noisy garment tokens `z_t: [T, 3p²]`.
pub fn garment_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    ps: ParamSource,
    z_t: Var,
    t: f32,
    g_emb: Var,
) -> Result<TrunkOutput> {
    let x = linear(tape, ps, z_t, &format!("{GARMENT_PREFIX}.in"))?;
    let pos = ps.load(tape, &format!("{GARMENT_PREFIX}.pos"))?;
    let x = tape.add(x, pos)?;
    trunk_forward(tape, cfg, ps, GARMENT_PREFIX, x, t, g_emb, None)
}

/// Runs the garment branch once at `t = 0` on the clean garment and records
/// every block's keys and values.
pub fn extract_garment_kv(cfg: &ModelConfig, garment_store: &ParameterStore, garment: &Tensor) -> Result<GarmentKVCache> {
    cfg.check_image(garment.dims(), 3)?;
    let ps = ParamSource::frozen(garment_store);
    let mut tape: Tape<f32> = Tape::new();
    let g = garment_embed(&mut tape, cfg, ps, garment)?;
    let x = tape.constant(&patchify(garment, cfg.patch)?);
    let out = garment_forward(&mut tape, cfg, ps, x, 0.0, g)?;
    GarmentKVCache::new(out.kv.iter().map(|&(k, v)| (tape.tensor(k), tape.tensor(v))).collect())
}

/// Everything the denoiser sees besides the garment.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserInput {
    /// Noisy latent tokens `[T, 3p²]`.
    pub z_t: Tensor,
    /// Inpainting mask tokens `[T, p²]`, 1 inside the mask.
    pub mask: Tensor,
    /// Person latent with the mask region zeroed, as tokens `[T, 3p²]`.
    pub masked_person: Tensor,
    /// Skeleton heatmap `[1, H, W]`.
    pub pose: Tensor,
}

impl DenoiserInput {
    /// Builds the input from pixel-space pieces. `person` is a `[3, H, W]`
    /// latent, `mask` is `H·W` values in `{0, 1}`.
    pub fn new(cfg: &ModelConfig, z_t: Tensor, person: &Tensor, mask: &[f32], keypoints: &PoseKeypoints) -> Result<Self> {
        cfg.check_image(person.dims(), 3)?;
        let plane = cfg.h * cfg.w;
        if mask.len() != plane {
            return Err(shape_err!("mask of {} values for a {}x{} image", mask.len(), cfg.h, cfg.w));
        }
        if z_t.dims() != [cfg.tokens(), cfg.latent_channels()] {
            return Err(shape_err!("z_t tokens {:?}", z_t.dims()));
        }
        let mut masked = person.clone();
        for (i, v) in masked.data_mut().iter_mut().enumerate() {
            *v *= 1.0 - mask[i % plane];
        }
        let mask_img = Tensor::new(&[1, cfg.h, cfg.w], mask.to_vec())?;
        let pose = Tensor::new(&[1, cfg.h, cfg.w], rasterize_skeleton(keypoints, cfg.w, cfg.h))?;
        Ok(DenoiserInput {
            z_t,
            mask: patchify(&mask_img, cfg.patch)?,
            masked_person: patchify(&masked, cfg.patch)?,
            pose,
        })
    }

    /// Same conditioning, different noisy latent.
    pub fn with_z_t(&self, z_t: Tensor) -> Result<Self> {
        if z_t.dims() != self.z_t.dims() {
            return Err(shape_err!("z_t {:?} vs {:?}", z_t.dims(), self.z_t.dims()));
        }
        Ok(DenoiserInput { z_t, ..self.clone() })
    }
}

/// Denoiser pass; returns predicted noise tokens `[T, 3p²]`.
///
/// Without a cache the blocks run plain self-attention.
pub fn denoising_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    ps: ParamSource,
    inp: &DenoiserInput,
    t: f32,
    g_emb: Var,
    cache: Option<&GarmentKVCache>,
) -> Result<Var> {
    let z = tape.constant(&inp.z_t);
    denoising_forward_var(tape, cfg, ps, inp, z, t, g_emb, cache)
}

/// [`denoising_forward`] with the noisy latent already on the tape.
pub fn denoising_forward_var<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    ps: ParamSource,
    inp: &DenoiserInput,
    z_t: Var,
    t: f32,
    g_emb: Var,
    cache: Option<&GarmentKVCache>,
) -> Result<Var> {
    if let Some(c) = cache {
        if c.depth() != cfg.depth || c.width() != cfg.width {
            return Err(shape_err!(
                "cache of depth {} width {} for model depth {} width {}",
                c.depth(),
                c.width(),
                cfg.depth,
                cfg.width
            ));
        }
    }
    let m = tape.constant(&inp.mask);
    let mp = tape.constant(&inp.masked_person);
    let x = tape.concat(&[z_t, m, mp], 1)?;
    let x = linear(tape, ps, x, &format!("{DENOISER_PREFIX}.in"))?;
    let pos = ps.load(tape, &format!("{DENOISER_PREFIX}.pos"))?;
    let x = tape.add(x, pos)?;
    let heat = tape.constant(&inp.pose);
    let pose = pose_guider(tape, cfg, ps, DENOISER_PREFIX, heat)?;
    let x = tape.add(x, pose.tokens)?;
    let cached: Option<Vec<(Var, Var)>> = cache.map(|c| {
        c.blocks.iter().map(|(k, v)| (tape.constant(k), tape.constant(v))).collect()
    });
    Ok(trunk_forward(tape, cfg, ps, DENOISER_PREFIX, x, t, g_emb, cached.as_deref())?.eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> ModelConfig {
        ModelConfig { h: 32, w: 32, patch: 4, width: 16, depth: 2, heads: 2, d_emb: 8, channel_factor: 0.125, mlp_ratio: 2 }
    }

    #[test]
    fn patch_round_trip_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::randn(&[3, 64, 48], 1.0, &mut rng);
        let tok = patchify(&img, 2).unwrap();
        assert_eq!(tok.dims(), &[768, 12]);
        assert_eq!(unpatchify(&tok, 3, 64, 48, 2).unwrap(), img);
        assert!(patchify(&Tensor::zeros(&[3, 10, 10]), 4).is_err());
    }

    #[test]
    fn config_sidecar_round_trip() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.pose_channels(), [4, 8, 32, 64]);
        let bad = ModelConfig { heads: 3, ..small() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { h: 40, ..small() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cache_shape_and_determinism() {
        let cfg = small();
        let gs = init_garment_params(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Tensor::uniform(&[3, 32, 32], 1.0, &mut rng);
        let a = extract_garment_kv(&cfg, &gs, &g).unwrap();
        let b = extract_garment_kv(&cfg, &gs, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.depth(), cfg.depth);
        assert_eq!(a.tokens(), cfg.tokens());
        let back = GarmentKVCache::from_named(a.to_named()).unwrap();
        assert_eq!(back, a);
        assert!(extract_garment_kv(&cfg, &gs, &Tensor::zeros(&[3, 16, 16])).is_err());
    }

    #[test]
    fn denoiser_at_init_is_zero_and_deterministic() {
        let cfg = small();
        let gs = init_garment_params(&cfg, 1).unwrap();
        let ds = init_denoiser_params(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Tensor::uniform(&[3, 32, 32], 1.0, &mut rng);
        let person = Tensor::uniform(&[3, 32, 32], 1.0, &mut rng);
        let z = Tensor::randn(&[cfg.tokens(), cfg.latent_channels()], 1.0, &mut rng);
        let cache = extract_garment_kv(&cfg, &gs, &g).unwrap();
        let mask = vec![1.0; 32 * 32];
        let inp = DenoiserInput::new(&cfg, z, &person, &mask, &PoseKeypoints::default()).unwrap();
        let run = || {
            let mut tape: Tape<f32> = Tape::new();
            let e = garment_embed(&mut tape, &cfg, ParamSource::frozen(&gs), &g).unwrap();
            let out = denoising_forward(&mut tape, &cfg, ParamSource::trainable(&ds), &inp, 0.5, e, Some(&cache)).unwrap();
            tape.tensor(out)
        };
        let a = run();
        assert_eq!(a.dims(), &[cfg.tokens(), cfg.latent_channels()]);
        assert!(a.data().iter().all(|&v| v == 0.0));
        assert_eq!(a, run());
    }
}
