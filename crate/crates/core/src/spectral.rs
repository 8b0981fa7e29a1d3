//! Unnormalized 2D DFT, the masked frequency-spectra distance and spectrum
//! visualisation.
//!
//! Grids are `width × height` (`M × N`) with `x` indexing columns and `y`
//! indexing rows; `F(u, v)` follows the same convention, so `v` is the
//! vertical frequency.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Real-valued `width × height` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RealGrid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(shape_err!("empty grid {width}x{height}"));
        }
        if data.len() != width * height {
            return Err(shape_err!("{}x{} grid with {} values", width, height, data.len()));
        }
        Ok(RealGrid { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        RealGrid { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        RealGrid { width, height, data }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn same_shape(&self, other: &RealGrid) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(shape_err!(
                "grid {}x{} vs {}x{}",
                self.width,
                self.height,
                other.width,
                other.height
            ));
        }
        Ok(())
    }
}

/// Complex `M × N` frequency grid, stored as interleaved `(re, im)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub width: usize,
    pub height: usize,
    pub values: Vec<Complex64>,
}

impl Spectrum {
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.values[v * self.width + u]
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Literal evaluation of the double sum, `O((MN)^2)`.
pub fn dft2d_bruteforce(image: &RealGrid) -> Result<Spectrum> {
    let complex: Vec<Complex64> = image.data.iter().map(|&r| Complex64::new(r, 0.0)).collect();
    let values = dft2d_complex_bruteforce(&complex, image.width, image.height, -1.0)?;
    Ok(Spectrum { width: image.width, height: image.height, values })
}

fn dft2d_complex_bruteforce(
    input: &[Complex64],
    m: usize,
    n: usize,
    sign: f64,
) -> Result<Vec<Complex64>> {
    if m == 0 || n == 0 {
        return Err(shape_err!("empty grid {m}x{n}"));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); m * n];
    for v in 0..n {
        for u in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..n {
                for x in 0..m {
                    // reduce the phase index exactly before converting to an angle
                    let ph_u = (u * x) % m;
                    let ph_v = (v * y) % n;
                    let angle = sign * 2.0 * PI * (ph_u as f64 / m as f64 + ph_v as f64 / n as f64);
                    acc += input[y * m + x] * Complex64::from_polar(1.0, angle);
                }
            }
            out[v * m + u] = acc;
        }
    }
    Ok(out)
}

/// Fast transform: radix-2 along each axis when both extents are powers of
/// two, the brute-force sum otherwise.
pub fn fft2d(image: &RealGrid) -> Spectrum {
    let mut values: Vec<Complex64> =
        image.data.iter().map(|&r| Complex64::new(r, 0.0)).collect();
    fft2d_complex_in_place(&mut values, image.width, image.height, -1.0);
    Spectrum { width: image.width, height: image.height, values }
}

/// In-place complex 2D transform with kernel `exp(sign · 2πi(ux/M + vy/N))`.
fn fft2d_complex_in_place(values: &mut [Complex64], m: usize, n: usize, sign: f64) {
    if !(m.is_power_of_two() && n.is_power_of_two()) {
        let out = dft2d_complex_bruteforce(values, m, n, sign).expect("nonempty grid");
        values.copy_from_slice(&out);
        return;
    }
    let tw_m = twiddles(m, sign);
    for row in values.chunks_mut(m) {
        fft1d(row, &tw_m);
    }
    let tw_n = twiddles(n, sign);
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for x in 0..m {
        for y in 0..n {
            col[y] = values[y * m + x];
        }
        fft1d(&mut col, &tw_n);
        for y in 0..n {
            values[y * m + x] = col[y];
        }
    }
}

fn twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

/// Iterative Cooley–Tukey on a power-of-two buffer.
fn fft1d(buf: &mut [Complex64], tw: &[Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let w = tw[k * stride];
                let a = buf[start + k];
                let b = buf[start + k + len / 2] * w;
                buf[start + k] = a + b;
                buf[start + k + len / 2] = a - b;
            }
        }
        len <<= 1;
    }
}

/// `Σ_{u,v} Z(u,v) exp(+2πi(ux/M + vy/N))` via the conjugate-transform
/// identity `conj(F(conj(Z)))`.
fn adjoint_transform(z: &[Complex64], m: usize, n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = z.iter().map(|c| c.conj()).collect();
    fft2d_complex_in_place(&mut buf, m, n, -1.0);
    buf.iter_mut().for_each(|c| *c = c.conj());
    buf
}

/// Per-bin weighting of the spectral distance.
///
/// `Uniform` is the plain sum over bins. `Radial` is an optional extension
/// that emphasises high frequencies with `w = 1 + alpha · r / r_max`, where
/// `r` is the wrapped distance of `(u, v)` from DC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrequencyWeighting {
    #[default]
    Uniform,
    Radial { alpha: f64 },
}

impl FrequencyWeighting {
    fn weights(&self, m: usize, n: usize) -> Option<Vec<f64>> {
        match *self {
            FrequencyWeighting::Uniform => None,
            FrequencyWeighting::Radial { alpha } => {
                let wrap = |k: usize, len: usize| k.min(len - k) as f64;
                let r_max = ((m / 2) as f64).hypot((n / 2) as f64).max(1.0);
                let mut w = Vec::with_capacity(m * n);
                for v in 0..n {
                    for u in 0..m {
                        let r = wrap(u, m).hypot(wrap(v, n));
                        w.push(1.0 + alpha * r / r_max);
                    }
                }
                Some(w)
            }
        }
    }
}

pub(crate) fn masked_residual_spectrum(a: &RealGrid, b: &RealGrid, mask: &RealGrid) -> Result<Vec<Complex64>> {
    a.same_shape(b)?;
    a.same_shape(mask)?;
    let diff: Vec<f64> = a
        .data
        .iter()
        .zip(&b.data)
        .zip(&mask.data)
        .map(|((x, y), mk)| mk * x - mk * y)
        .collect();
    // F(a⊙m) − F(b⊙m) = F((a−b)⊙m) by linearity
    Ok(fft2d(&RealGrid { width: a.width, height: a.height, data: diff }).values)
}

/// `Σ_{u,v} |F_{a⊙m}(u,v) − F_{b⊙m}(u,v)|²`.
pub fn spectral_distance(a: &RealGrid, b: &RealGrid, mask: &RealGrid) -> Result<f64> {
    spectral_distance_weighted(a, b, mask, FrequencyWeighting::Uniform)
}

pub fn spectral_distance_weighted(
    a: &RealGrid,
    b: &RealGrid,
    mask: &RealGrid,
    weighting: FrequencyWeighting,
) -> Result<f64> {
    Ok(spectral_distance_with_grad(a, b, mask, weighting)?.0)
}

/// Distance together with its gradient with respect to `a`.
///
/// The gradient is `2 · m ⊙ Re(Fᴴ(w ⊙ R))` where `R` is the masked residual
/// spectrum; `Fᴴ` is evaluated with [`adjoint_transform`].
pub fn spectral_distance_with_grad(
    a: &RealGrid,
    b: &RealGrid,
    mask: &RealGrid,
    weighting: FrequencyWeighting,
) -> Result<(f64, RealGrid)> {
    let (m, n) = (a.width, a.height);
    let mut r = masked_residual_spectrum(a, b, mask)?;
    let weights = weighting.weights(m, n);
    let value = match &weights {
        None => r.iter().map(|c| c.norm_sqr()).sum(),
        Some(w) => r.iter().zip(w).map(|(c, w)| w * c.norm_sqr()).sum(),
    };
    if let Some(w) = &weights {
        r.iter_mut().zip(w).for_each(|(c, w)| *c *= *w);
    }
    let back = adjoint_transform(&r, m, n);
    let grad = back.iter().zip(&mask.data).map(|(c, mk)| 2.0 * mk * c.re).collect();
    Ok((value, RealGrid { width: m, height: n, data: grad }))
}

/// Sum of `spectral_distance` over the channels of two `[C, H, W]` images
/// sharing an `H × W` mask.
pub fn image_spectral_distance(
    a: &[f32],
    b: &[f32],
    mask: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    weighting: FrequencyWeighting,
) -> Result<f64> {
    let plane = height * width;
    if a.len() != channels * plane || b.len() != a.len() || mask.len() != plane {
        return Err(shape_err!("image spectral distance over mismatched buffers"));
    }
    let mk = RealGrid::new(width, height, mask.iter().map(|&v| v as f64).collect())?;
    let mut total = 0.0;
    for c in 0..channels {
        let ga = grid_of(&a[c * plane..(c + 1) * plane], width, height);
        let gb = grid_of(&b[c * plane..(c + 1) * plane], width, height);
        total += spectral_distance_weighted(&ga, &gb, &mk, weighting)?;
    }
    Ok(total)
}

fn grid_of<T: Copy + Into<f64>>(v: &[T], width: usize, height: usize) -> RealGrid {
    RealGrid { width, height, data: v.iter().map(|&x| x.into()).collect() }
}

/// Records the masked spectral distance of a `[C, H, W]` prediction against
/// a fixed target on the tape, multiplied by `factor`.
pub fn spectral_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &[f32],
    mask: &[f32],
    weighting: FrequencyWeighting,
    factor: f64,
) -> Result<Var> {
    let dims = tape.dims(pred).to_vec();
    if dims.len() != 3 {
        return Err(shape_err!("spectral loss expects [C, H, W], got {dims:?}"));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let plane = h * w;
    if target.len() != c * plane || mask.len() != plane {
        return Err(shape_err!("spectral loss target/mask do not match {dims:?}"));
    }
    let mk = RealGrid::new(w, h, mask.iter().map(|&v| v as f64).collect())?;
    let pv = tape.value(pred);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let a = RealGrid {
            width: w,
            height: h,
            data: pv[ch * plane..(ch + 1) * plane].iter().map(|x| x.f64()).collect(),
        };
        let b = grid_of(&target[ch * plane..(ch + 1) * plane], w, h);
        let (val, g) = spectral_distance_with_grad(&a, &b, &mk, weighting)?;
        total += val;
        grad.extend(g.data.into_iter().map(|v| S::of(v * factor)));
    }
    tape.custom(
        &[pred],
        vec![S::of(total * factor)],
        &[1],
        Box::new(move |g: &[S]| vec![Some(grad.iter().map(|&v| v * g[0]).collect())]),
    )
}

/// `log(1 + |F|)` with DC moved to the centre, min-max scaled to `[0, 1]`.
pub fn magnitude_spectrum_image(image: &RealGrid) -> RealGrid {
    let spec = fft2d(image);
    let (m, n) = (image.width, image.height);
    let mut out = RealGrid::zeros(m, n);
    for y in 0..n {
        for x in 0..m {
            let u = (x + m - m / 2) % m;
            let v = (y + n - n / 2) % n;
            out.data[y * m + x] = spec.at(u, v).norm().ln_1p();
        }
    }
    normalize_unit(&mut out.data);
    out
}

/// Min-max scaling in place; a flat input maps to zeros.
pub(crate) fn normalize_unit(data: &mut [f64]) {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in data.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Relative gap between both sides of Parseval's identity,
/// `Σ|F|² = M·N·Σf²`.
pub fn parseval_rel_err(image: &RealGrid) -> f64 {
    let spec = fft2d(image);
    let lhs = spec.energy();
    let rhs = (image.width * image.height) as f64 * image.data.iter().map(|v| v * v).sum::<f64>();
    if rhs == 0.0 {
        return lhs.abs();
    }
    (lhs - rhs).abs() / rhs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_dc_only() {
        let g = RealGrid::new(2, 2, vec![1.0; 4]).unwrap();
        for spec in [dft2d_bruteforce(&g).unwrap(), fft2d(&g)] {
            assert!((spec.at(0, 0) - Complex64::new(4.0, 0.0)).norm() < 1e-12);
            for i in 1..4 {
                assert!(spec.values[i].norm() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_is_flat() {
        let mut g = RealGrid::zeros(4, 4);
        g.data[0] = 1.0;
        for spec in [dft2d_bruteforce(&g).unwrap(), fft2d(&g)] {
            for c in &spec.values {
                assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_grid_is_error() {
        assert!(RealGrid::new(0, 3, vec![]).is_err());
        assert!(dft2d_complex_bruteforce(&[], 0, 0, -1.0).is_err());
    }

    #[test]
    fn non_power_of_two_falls_back() {
        let g = RealGrid::from_fn(3, 5, |x, y| (x * 7 + y * 3) as f64 % 4.0 - 1.5);
        let fast = fft2d(&g);
        let slow = dft2d_bruteforce(&g).unwrap();
        for (a, b) in fast.values.iter().zip(&slow.values) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn single_pixel_difference() {
        let (m, n) = (8, 4);
        let a = RealGrid::zeros(m, n);
        let mut b = RealGrid::zeros(m, n);
        b.data[13] = 0.5;
        let full = RealGrid::new(m, n, vec![1.0; m * n]).unwrap();
        let d = spectral_distance(&a, &b, &full).unwrap();
        assert!((d - (m * n) as f64 * 0.25).abs() < 1e-9);
        assert_eq!(spectral_distance(&a, &a, &full).unwrap(), 0.0);
        assert!(spectral_distance(&a, &RealGrid::zeros(4, 4), &full).is_err());
    }

    #[test]
    fn uniform_weighting_matches_plain() {
        let a = RealGrid::from_fn(8, 8, |x, y| ((x * 3 + y) % 5) as f64);
        let b = RealGrid::from_fn(8, 8, |x, y| ((x + y * 2) % 3) as f64);
        let mask = RealGrid::from_fn(8, 8, |x, _| if x < 5 { 1.0 } else { 0.0 });
        let plain = spectral_distance(&a, &b, &mask).unwrap();
        let w = spectral_distance_weighted(&a, &b, &mask, FrequencyWeighting::Radial { alpha: 0.0 })
            .unwrap();
        assert!((plain - w).abs() < 1e-9 * plain);
        let emph =
            spectral_distance_weighted(&a, &b, &mask, FrequencyWeighting::Radial { alpha: 2.0 })
                .unwrap();
        assert!(emph > plain);
    }

    #[test]
    fn constant_spectrum_image_has_bright_centre() {
        let g = RealGrid::new(8, 8, vec![0.7; 64]).unwrap();
        let img = magnitude_spectrum_image(&g);
        for y in 0..8 {
            for x in 0..8 {
                let expected = if (x, y) == (4, 4) { 1.0 } else { 0.0 };
                assert_eq!(img.at(x, y), expected);
            }
        }
    }
}
