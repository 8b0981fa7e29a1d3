//! Dense tensors, a reverse-mode tape, parameter storage and the AdamW
//! optimizer.
//!
//! Parameters are always stored as `f32`. The tape is generic over
//! [`Scalar`] so the same model code can be evaluated in `f64` when
//! gradients are checked against finite differences.

mod checkpoint;
mod store;
mod tape;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use store::{AdamW, ParameterStore};
pub use tape::{CustomBackward, Tape, Var};

use crate::error::{shape_err, Result};

/// Floating point type the tape can evaluate in.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + std::iter::Sum + 'static
{
    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping (for `c`)
    /// matrices of the given extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// View of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn dense(rows: usize, cols: usize) -> Self {
        MatView { rows, cols, offset: 0, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatView { rows: self.cols, cols: self.rows, offset: self.offset, rs: self.cs, cs: self.rs }
    }

    pub fn at(self, offset: usize) -> Self {
        MatView { offset, ..self }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = alpha * a * b + beta * c` over strided views.
pub(crate) fn gemm<S: Scalar>(
    alpha: S,
    a: &[S],
    av: MatView,
    b: &[S],
    bv: MatView,
    beta: S,
    c: &mut [S],
    cv: MatView,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dims");
    assert_eq!(av.rows, cv.rows, "gemm rows");
    assert_eq!(bv.cols, cv.cols, "gemm cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        // zero inner extent: only the beta scaling applies
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = if beta == S::zero() { S::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(av.max_index() < a.len() && bv.max_index() < b.len() && cv.max_index() < c.len());
    // SAFETY: extents checked against the slice lengths above; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        S::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err!("dims must be positive, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!("dims {dims:?} hold {n} values but data has {}", data.len()));
        }
        Ok(Tensor { dims: dims.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(dims);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { dims: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f32, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { dims: dims.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], bound: f32, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor { dims: dims.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Splits `t` along `axis` into pieces of the given extents.
pub fn split(t: &Tensor, axis: usize, extents: &[usize]) -> Result<Vec<Tensor>> {
    let dims = t.dims();
    if axis >= dims.len() {
        return Err(shape_err!("axis {axis} out of range for {:?}", dims));
    }
    if extents.iter().sum::<usize>() != dims[axis] {
        return Err(shape_err!("extents {extents:?} do not cover axis of size {}", dims[axis]));
    }
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(extents.len());
    let mut start = 0;
    for &e in extents {
        let mut d = dims.to_vec();
        d[axis] = e;
        let mut data = Vec::with_capacity(outer * e * inner);
        for o in 0..outer {
            let base = (o * dims[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + e * inner]);
        }
        out.push(Tensor::new(&d, data)?);
        start += e;
    }
    Ok(out)
}

/// Concatenates plain tensors along `axis` (no tape).
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let dims = first.dims();
    if axis >= dims.len() {
        return Err(shape_err!("axis {axis} out of range for {:?}", dims));
    }
    for p in parts {
        let pd = p.dims();
        if pd.len() != dims.len()
            || pd.iter().zip(dims).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err!("concat: incompatible shapes {:?} and {:?}", dims, pd));
        }
    }
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.dims()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let e = p.dims()[axis] * inner;
            data.extend_from_slice(&p.data()[o * e..(o + 1) * e]);
        }
    }
    let mut d = dims.to_vec();
    d[axis] = total;
    Tensor::new(&d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_dims() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::new(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let b = Tensor::new(&[2, 1], vec![10.0, 11.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.dims(), &[2, 4]);
        assert_eq!(c.data(), &[0.0, 1.0, 2.0, 10.0, 3.0, 4.0, 5.0, 11.0]);
        let parts = split(&c, 1, &[3, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn gemm_strided_transpose() {
        // [[1,2],[3,4]] * [[5,6],[7,8]]^T
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(
            1.0,
            &a,
            MatView::dense(2, 2),
            &b,
            MatView::dense(2, 2).t(),
            0.0,
            &mut c,
            MatView::dense(2, 2),
        );
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
