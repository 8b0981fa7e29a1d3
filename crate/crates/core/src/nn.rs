//! Parameter initialisation and the transformer block shared by the
//! garment encoder, the garment branch and the denoiser.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParameterStore, Scalar, Tape, Tensor, Var};

/// A parameter store viewed as trainable or frozen for one tape.
#[derive(Clone, Copy)]
pub struct ParamSource<'a> {
    pub store: &'a ParameterStore,
    pub trainable: bool,
}

impl<'a> ParamSource<'a> {
    pub fn trainable(store: &'a ParameterStore) -> Self {
        ParamSource { store, trainable: true }
    }

    pub fn frozen(store: &'a ParameterStore) -> Self {
        ParamSource { store, trainable: false }
    }

    pub fn load<S: Scalar>(&self, tape: &mut Tape<S>, name: &str) -> Result<Var> {
        if self.trainable {
            tape.param(self.store, name)
        } else {
            tape.frozen(self.store, name)
        }
    }
}

pub fn xavier_uniform<R: Rng + ?Sized>(dims: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::uniform(dims, bound, rng)
}

/// Adds `name.w: [fan_in, fan_out]` and `name.b: [fan_out]`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
) -> Result<()> {
    let w = if zero {
        Tensor::zeros(&[fan_in, fan_out])
    } else {
        xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng)
    };
    store.insert(format!("{name}.w"), w)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

pub fn linear<S: Scalar>(tape: &mut Tape<S>, ps: ParamSource, x: Var, name: &str) -> Result<Var> {
    let w = ps.load(tape, &format!("{name}.w"))?;
    let b = ps.load(tape, &format!("{name}.b"))?;
    tape.linear(x, w, b)
}

/// Parameters of one pre-norm attention + MLP block.
pub fn init_block<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    rng: &mut R,
    prefix: &str,
    width: usize,
    mlp_ratio: usize,
) -> Result<()> {
    init_linear(store, rng, &format!("{prefix}.qkv"), width, 3 * width, false)?;
    init_linear(store, rng, &format!("{prefix}.proj"), width, width, true)?;
    init_linear(store, rng, &format!("{prefix}.mlp1"), width, mlp_ratio * width, false)?;
    init_linear(store, rng, &format!("{prefix}.mlp2"), mlp_ratio * width, width, true)
}

/// Per-block modulation: `(scale, shift)` before attention and before the
/// MLP. Each entry is a `[1, C]` row.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams {
    pub scale1: Var,
    pub shift1: Var,
    pub scale2: Var,
    pub shift2: Var,
}

/// Block output with the keys and values its attention used for the
/// block's own tokens.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub k: Var,
    pub v: Var,
}

/// Multi-head attention whose keys and values are extended along the
/// token axis by an optional cached pair.
pub fn attention_hybrid<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    cache: Option<(Var, Var)>,
    heads: usize,
) -> Result<Var> {
    match cache {
        None => tape.attention(q, k, v, heads),
        Some((kr, vr)) => {
            let c = tape.dims(k)[1];
            let (ck, cv) = (tape.dims(kr), tape.dims(vr));
            if ck.len() != 2 || cv.len() != 2 || ck[1] != c || cv[1] != c || ck[0] != cv[0] {
                return Err(crate::error::shape_err!(
                    "cache entry {:?}/{:?} does not fit block width {c}",
                    tape.dims(kr),
                    tape.dims(vr)
                ));
            }
            let kk = tape.concat(&[k, kr], 0)?;
            let vv = tape.concat(&[v, vr], 0)?;
            tape.attention(q, kk, vv, heads)
        }
    }
}

/// `x + attn(norm(x))` then `x + mlp(norm(x))`, each norm optionally
/// modulated.
pub fn block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    ps: ParamSource,
    prefix: &str,
    x: Var,
    modulation: Option<&ModulationParams>,
    cache: Option<(Var, Var)>,
    heads: usize,
) -> Result<BlockOutput> {
    let c = *tape.dims(x).last().unwrap_or(&0);
    let (s1, b1, s2, b2) = match modulation {
        Some(m) => (Some(m.scale1), Some(m.shift1), Some(m.scale2), Some(m.shift2)),
        None => (None, None, None, None),
    };
    let h = tape.layernorm_modulated(x, s1, b1)?;
    let qkv = linear(tape, ps, h, &format!("{prefix}.qkv"))?;
    let parts = tape.split(qkv, 1, &[c, c, c])?;
    let (q, k, v) = (parts[0], parts[1], parts[2]);
    let a = attention_hybrid(tape, q, k, v, cache, heads)?;
    let a = linear(tape, ps, a, &format!("{prefix}.proj"))?;
    let x = tape.add(x, a)?;
    let h = tape.layernorm_modulated(x, s2, b2)?;
    let h = linear(tape, ps, h, &format!("{prefix}.mlp1"))?;
    let h = tape.silu(h);
    let h = linear(tape, ps, h, &format!("{prefix}.mlp2"))?;
    let out = tape.add(x, h)?;
    Ok(BlockOutput { out, k, v })
}

/// `[1, C]` token mean of a `[T, C]` matrix.
pub(crate) fn token_mean<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let t = tape.dims(x)[0];
    let row = tape.constant_raw(&[1, t], vec![S::of(1.0 / t as f64); t])?;
    tape.matmul(row, x)
}
