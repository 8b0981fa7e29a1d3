use std::collections::HashMap;
use std::sync::Arc;

use super::{gemm, MatView, ParameterStore, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule of a custom op: maps the output gradient to one optional
/// gradient per input, in input order.
pub type CustomBackward<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Silu(Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRow { x: Var, b: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, scale: Option<Var>, shift: Option<Var>, xhat: Vec<S>, inv_std: Vec<S> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Gather { x: Var, index: Arc<[usize]> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<S> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<S> },
    Custom { inputs: Vec<Var>, backward: CustomBackward<S> },
}

struct Node<S> {
    value: Vec<S>,
    dims: Vec<usize>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a forward pass for reverse-mode differentiation.
///
/// A tape lives for one forward/backward pass. Parameters pulled from a
/// [`ParameterStore`] with [`Tape::param`] receive gradients through
/// [`Tape::backward_into`]; [`Tape::frozen`] loads them as constants.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: Vec<(Var, String)>,
    loaded: HashMap<(bool, String), Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn broadcast_len(la: usize, lb: usize) -> Result<usize> {
    if la == lb || lb == 1 {
        Ok(la)
    } else if la == 1 {
        Ok(lb)
    } else {
        Err(shape_err!("elementwise operands of {la} and {lb} values"))
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new(), loaded: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<S>, dims: Vec<usize>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), dims.iter().product::<usize>());
        self.nodes.push(Node { value, dims, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    /// Copies a value out as an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let data = n.value.iter().map(|x| x.f64() as f32).collect();
        Tensor::new(&n.dims, data).expect("tape values are well formed")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].f64()
    }

    /// Records an input tensor; `requires_grad` makes it a gradient leaf.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let value = t.data().iter().map(|&x| S::of(x as f64)).collect();
        self.push(value, t.dims().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_raw(&mut self, dims: &[usize], value: Vec<S>) -> Result<Var> {
        self.leaf_raw(dims, value, false)
    }

    /// Like [`Tape::leaf`] but takes values at full tape precision.
    pub fn leaf_raw(&mut self, dims: &[usize], value: Vec<S>, requires_grad: bool) -> Result<Var> {
        if value.len() != dims.iter().product::<usize>() {
            return Err(shape_err!("leaf of {} values for dims {dims:?}", value.len()));
        }
        Ok(self.push(value, dims.to_vec(), Op::Leaf, requires_grad))
    }

    /// Loads a trainable parameter; repeated loads return the same handle.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        self.load(store, name, true)
    }

    /// Loads a parameter as a constant (no gradient flows back to it).
    pub fn frozen(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        self.load(store, name, false)
    }

    fn load(&mut self, store: &ParameterStore, name: &str, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.loaded.get(&(trainable, name.to_string())) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = self.leaf(t, trainable);
        if trainable {
            self.params.push((v, name.to_string()));
        }
        self.loaded.insert((trainable, name.to_string()), v);
        Ok(v)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Vec<S>, Vec<usize>)> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = broadcast_len(av.len(), bv.len())?;
        if av.len() == bv.len() && self.dims(a) != self.dims(b) {
            return Err(shape_err!("elementwise dims {:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        let dims = if av.len() == n { self.dims(a).to_vec() } else { self.dims(b).to_vec() };
        let (la, lb) = (av.len(), bv.len());
        let out = (0..n).map(|i| f(av[i % la], bv[i % lb])).collect();
        Ok((out, dims))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, d) = self.binary(a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, d, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, d) = self.binary(a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, d, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, d) = self.binary(a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, d, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = S::of(s);
        let v = self.value(a).iter().map(|&x| x * s).collect();
        let d = self.dims(a).to_vec();
        let ng = self.needs(a);
        self.push(v, d, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let d = self.dims(a).to_vec();
        let ng = self.needs(a);
        self.push(v, d, Op::Silu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x * x).collect();
        let d = self.dims(a).to_vec();
        let ng = self.needs(a);
        self.push(v, d, Op::Square(a), ng)
    }

    /// Mean over all elements, accumulated in `f64`.
    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let m = vals.iter().map(|x| x.f64()).sum::<f64>() / vals.len() as f64;
        let ng = self.needs(a);
        self.push(vec![S::of(m)], vec![1], Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x.f64()).sum::<f64>();
        let ng = self.needs(a);
        self.push(vec![S::of(s)], vec![1], Op::Sum(a), ng)
    }

    fn mat_dims(&self, v: Var, transposed: bool) -> Result<(usize, usize)> {
        let d = self.dims(v);
        if d.len() != 2 {
            return Err(shape_err!("matmul operand must be rank 2, got {d:?}"));
        }
        Ok(if transposed { (d[1], d[0]) } else { (d[0], d[1]) })
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, k) = self.mat_dims(a, ta)?;
        let (k2, n) = self.mat_dims(b, tb)?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dims differ: {:?} x {:?}",
                self.dims(a),
                self.dims(b)
            ));
        }
        let av = view(self.dims(a), ta);
        let bv = view(self.dims(b), tb);
        let mut out = vec![S::zero(); m * n];
        gemm(S::one(), self.value(a), av, self.value(b), bv, S::zero(), &mut out, MatView::dense(m, n));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Adds a length-`C` bias to every row of an `[R, C]` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        let c = *d.last().ok_or_else(|| shape_err!("add_row on scalar"))?;
        if self.value(b).len() != c {
            return Err(shape_err!("bias of {} values for rows of width {c}", self.value(b).len()));
        }
        let bv = self.value(b);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + bv[i % c]).collect();
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, d, Op::AddRow { x, b }, ng))
    }

    /// `x · w + b` for `x: [T, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if axis >= d.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {d:?}"));
        }
        let outer: usize = d[..axis].iter().product();
        let len = d[axis];
        let inner: usize = d[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![S::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xv[idx(j)]).fold(S::neg_infinity(), S::max);
                let mut total = 0.0f64;
                for j in 0..len {
                    let e = (xv[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    total += e.f64();
                }
                let inv = S::of(1.0 / total);
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] * inv;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, d, Op::Softmax { x, outer, len, inner }, ng))
    }

    /// Per-row normalization over the last axis, then `y·(1+scale)+shift`.
    ///
    /// Statistics use population variance with `eps = 1e-6`. Passing `None`
    /// for both modulation inputs gives an affine-free layer norm.
    pub fn layernorm_modulated(
        &mut self,
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
    ) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let d = self.dims(x).to_vec();
        let c = *d.last().ok_or_else(|| shape_err!("layernorm on scalar"))?;
        for m in [scale, shift].into_iter().flatten() {
            if self.value(m).len() != c {
                return Err(shape_err!(
                    "modulation of {} values for width {c}",
                    self.value(m).len()
                ));
            }
        }
        let rows = self.value(x).len() / c;
        let xv = self.value(x);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[r] = S::of(inv);
            for j in 0..c {
                xhat[r * c + j] = S::of((row[j].f64() - mean) * inv);
            }
        }
        let sc = scale.map(|s| self.value(s).to_vec());
        let sh = shift.map(|s| self.value(s).to_vec());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % c;
                let g = sc.as_ref().map_or(S::one(), |s| S::one() + s[j]);
                let b = sh.as_ref().map_or(S::zero(), |s| s[j]);
                h * g + b
            })
            .collect();
        let ng = self.needs(x)
            || scale.is_some_and(|s| self.needs(s))
            || shift.is_some_and(|s| self.needs(s));
        Ok(self.push(out, d, Op::LayerNorm { x, scale, shift, xhat, inv_std }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let d0 = self.dims(first).to_vec();
        if axis >= d0.len() {
            return Err(shape_err!("concat axis {axis} out of range for {d0:?}"));
        }
        for &p in parts {
            let pd = self.dims(p);
            if pd.len() != d0.len()
                || pd.iter().zip(&d0).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat: incompatible shapes {d0:?} and {pd:?}"));
            }
        }
        let outer: usize = d0[..axis].iter().product();
        let inner: usize = d0[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|&p| self.dims(p)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let e = self.dims(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * e..(o + 1) * e]);
            }
        }
        let mut d = d0;
        d[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, d, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if axis >= d.len() || start + len > d[axis] || len == 0 {
            return Err(shape_err!("slice {start}..{} of axis {axis} in {d:?}", start + len));
        }
        let outer: usize = d[..axis].iter().product();
        let inner: usize = d[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut nd = d;
        nd[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(out, nd, Op::Slice { x, axis, start }, ng))
    }

    /// Splits along `axis` into pieces of the given extents.
    pub fn split(&mut self, x: Var, axis: usize, extents: &[usize]) -> Result<Vec<Var>> {
        let d = self.dims(x);
        if axis >= d.len() || extents.iter().sum::<usize>() != d[axis] {
            return Err(shape_err!("split {extents:?} does not cover axis {axis} of {d:?}"));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(extents.len());
        for &e in extents {
            out.push(self.slice(x, axis, start, e)?);
            start += e;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        if dims.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims(x)));
        }
        let v = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(v, dims.to_vec(), Op::Reshape(x), ng))
    }

    /// `out[i] = x[index[i]]`, shaped as `dims`. Covers permutations,
    /// transposes and nearest-neighbour replication.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, dims: &[usize]) -> Result<Var> {
        if dims.iter().product::<usize>() != index.len() {
            return Err(shape_err!("gather of {} indices into dims {dims:?}", index.len()));
        }
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(shape_err!("gather index {bad} out of range {}", xv.len()));
        }
        let out = index.iter().map(|&i| xv[i]).collect();
        let ng = self.needs(x);
        Ok(self.push(out, dims.to_vec(), Op::Gather { x, index }, ng))
    }

    /// Multi-head scaled dot-product attention over `[T, C]` token matrices.
    ///
    /// Heads partition the channel axis; keys and values may have a
    /// different token count from the queries.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, c) = self.mat_dims(q, false)?;
        let (tk, ck) = self.mat_dims(k, false)?;
        let (tv, cv) = self.mat_dims(v, false)?;
        if ck != c || cv != c || tv != tk {
            return Err(shape_err!(
                "attention shapes q {:?}, k {:?}, v {:?}",
                self.dims(q),
                self.dims(k),
                self.dims(v)
            ));
        }
        if heads == 0 || c % heads != 0 {
            return Err(shape_err!("width {c} not divisible into {heads} heads"));
        }
        let dh = c / heads;
        let alpha = S::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![S::zero(); heads * tq * tk];
        let mut out = vec![S::zero(); tq * c];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let qh = head_view(tq, dh, c, h);
            let kh = head_view(tk, dh, c, h);
            let pv = MatView::dense(tq, tk).at(h * tq * tk);
            gemm(alpha, qv, qh, kv, kh.t(), S::zero(), &mut probs, pv);
            softmax_rows(&mut probs[h * tq * tk..(h + 1) * tq * tk], tk);
            gemm(S::one(), &probs, pv, vv, kh, S::zero(), &mut out, qh);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, vec![tq, c], Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// 2D convolution of a `[Cin, H, W]` map with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 3 || wd.len() != 4 || wd[1] != xd[0] || wd[2] != wd[3] {
            return Err(shape_err!("conv2d input {xd:?} with kernel {wd:?}"));
        }
        let (cin, h, wi) = (xd[0], xd[1], xd[2]);
        let (cout, k) = (wd[0], wd[2]);
        if self.value(b).len() != cout {
            return Err(shape_err!("conv2d bias of {} for {cout} channels", self.value(b).len()));
        }
        if h + 2 * pad < k || wi + 2 * pad < k || stride == 0 {
            return Err(shape_err!("conv2d kernel {k} larger than padded input {xd:?}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wi + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { cin, h, w: wi, cout, k, stride, pad, ho, wo };
        let cols = im2col(self.value(x), &geom);
        let kk = cin * k * k;
        let mut out = vec![S::zero(); cout * ho * wo];
        gemm(
            S::one(),
            self.value(w),
            MatView::dense(cout, kk),
            &cols,
            MatView::dense(kk, ho * wo),
            S::zero(),
            &mut out,
            MatView::dense(cout, ho * wo),
        );
        let bv = self.value(b);
        for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
            for v in chunk {
                *v = *v + bv[o];
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, vec![cout, ho, wo], Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Vec<S>,
        dims: &[usize],
        backward: CustomBackward<S>,
    ) -> Result<Var> {
        if value.len() != dims.iter().product::<usize>() {
            return Err(shape_err!("custom op value of {} for dims {dims:?}", value.len()));
        }
        let ng = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(value, dims.to_vec(), Op::Custom { inputs: inputs.to_vec(), backward }, ng))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.dims(loss)));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    ///
    /// Every parameter in the store ends up with a gradient buffer; those
    /// not reached from `loss` keep whatever they held (zero after
    /// [`ParameterStore::zero_grad`]).
    pub fn backward_into(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.ensure_grads();
        for (v, name) in &self.params {
            let Some(g) = grads.get(*v) else { continue };
            let t = store.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let buf = t.grad.as_mut().expect("ensured");
            for (d, s) in buf.iter_mut().zip(g) {
                *d += s.f64() as f32;
            }
        }
        Ok(())
    }

    fn backprop(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf =
                grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                acc(*a, &mut |buf| reduce_into(buf, g, |gi, _| gi));
                acc(*b, &mut |buf| reduce_into(buf, g, |gi, _| sign * gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| reduce_into(buf, g, |gi, i| gi * bv[i % bv.len()]));
                acc(*b, &mut |buf| reduce_into(buf, g, |gi, i| gi * av[i % av.len()]));
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d = *d + gi * *s;
                }
            }),
            Op::Silu(a) => {
                let xv = &nodes[a.0].value;
                acc(*a, &mut |buf| {
                    for ((d, &gi), &x) in buf.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(x);
                        *d = *d + gi * (s + x * s * (S::one() - s));
                    }
                })
            }
            Op::Square(a) => {
                let xv = &nodes[a.0].value;
                acc(*a, &mut |buf| {
                    for ((d, &gi), &x) in buf.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi * (x + x);
                    }
                })
            }
            Op::Mean(a) | Op::Sum(a) => {
                let n = nodes[a.0].value.len();
                let coef = if matches!(node.op, Op::Mean(_)) { g[0] / S::of(n as f64) } else { g[0] };
                acc(*a, &mut |buf| {
                    for d in buf.iter_mut() {
                        *d = *d + coef;
                    }
                })
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ad, bd) = (&nodes[a.0].dims, &nodes[b.0].dims);
                let av = view(ad, *ta);
                let bv = view(bd, *tb);
                let gv = MatView::dense(av.rows, bv.cols);
                let (aval, bval) = (&nodes[a.0].value, &nodes[b.0].value);
                // d op(a) = g · op(b)^T ; d op(b) = op(a)^T · g
                acc(*a, &mut |buf| {
                    let dv = view(ad, *ta);
                    gemm(S::one(), g, gv, bval, bv.t(), S::one(), buf, dv);
                });
                acc(*b, &mut |buf| {
                    let dv = view(bd, *tb);
                    gemm(S::one(), aval, av.t(), g, gv, S::one(), buf, dv);
                });
            }
            Op::AddRow { x, b } => {
                acc(*x, &mut |buf| reduce_into(buf, g, |gi, _| gi));
                acc(*b, &mut |buf| reduce_into(buf, g, |gi, _| gi));
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: S = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                buf[idx(j)] = buf[idx(j)] + y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm { x, scale, shift, xhat, inv_std } => {
                let c = *node.dims.last().expect("rank >= 1");
                let rows = xhat.len() / c;
                if let Some(s) = scale {
                    acc(*s, &mut |buf| {
                        for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                            buf[i % c] = buf[i % c] + gi * h;
                        }
                    });
                }
                if let Some(s) = shift {
                    acc(*s, &mut |buf| reduce_into(buf, g, |gi, _| gi));
                }
                let sc = scale.map(|s| &nodes[s.0].value);
                acc(*x, &mut |buf| {
                    let mut dxhat = vec![S::zero(); c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..c {
                            let gain = sc.map_or(S::one(), |s| S::one() + s[j]);
                            dxhat[j] = gr[j] * gain;
                            m1 += dxhat[j].f64();
                            m2 += (dxhat[j] * hr[j]).f64();
                        }
                        let m1 = S::of(m1 / c as f64);
                        let m2 = S::of(m2 / c as f64);
                        for j in 0..c {
                            let idx = r * c + j;
                            buf[idx] = buf[idx] + inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let d = &node.dims;
                let outer: usize = d[..*axis].iter().product();
                let inner: usize = d[*axis + 1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let e = nodes[p.0].dims[*axis] * inner;
                    let total = d[*axis] * inner;
                    acc(p, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + e];
                            for (dst, &s) in buf[o * e..(o + 1) * e].iter_mut().zip(src) {
                                *dst = *dst + s;
                            }
                        }
                    });
                    offset += e;
                }
            }
            Op::Slice { x, axis, start } => {
                let xd = &nodes[x.0].dims;
                let outer: usize = xd[..*axis].iter().product();
                let inner: usize = xd[*axis + 1..].iter().product();
                let len = node.dims[*axis];
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        let base = (o * xd[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (dst, &s) in buf[base..base + len * inner].iter_mut().zip(src) {
                            *dst = *dst + s;
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |buf| reduce_into(buf, g, |gi, _| gi)),
            Op::Gather { x, index } => acc(*x, &mut |buf| {
                for (&i, &gi) in index.iter().zip(g) {
                    buf[i] = buf[i] + gi;
                }
            }),
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, c) = (nodes[q.0].dims[0], nodes[q.0].dims[1]);
                let tk = nodes[k.0].dims[0];
                let dh = c / heads;
                let alpha = S::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut ds = vec![S::zero(); tq * tk];
                for h in 0..*heads {
                    let qh = head_view(tq, dh, c, h);
                    let kh = head_view(tk, dh, c, h);
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    let pv = MatView::dense(tq, tk);
                    acc(*v, &mut |buf| gemm(S::one(), p, pv.t(), g, qh, S::one(), buf, kh));
                    // dP = dO · V^T, then the softmax jacobian in place
                    gemm(S::one(), g, qh, vv, kh.t(), S::zero(), &mut ds, pv);
                    for r in 0..tq {
                        let pr = &p[r * tk..(r + 1) * tk];
                        let dr = &mut ds[r * tk..(r + 1) * tk];
                        let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (d, &pi) in dr.iter_mut().zip(pr) {
                            *d = pi * (*d - dot);
                        }
                    }
                    acc(*q, &mut |buf| gemm(alpha, &ds, pv, kv, kh, S::one(), buf, qh));
                    acc(*k, &mut |buf| gemm(alpha, &ds, pv.t(), qv, qh, S::one(), buf, kh));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let kk = geom.cin * geom.k * geom.k;
                let n = geom.ho * geom.wo;
                let gv = MatView::dense(geom.cout, n);
                acc(*w, &mut |buf| {
                    gemm(S::one(), g, gv, cols, MatView::dense(kk, n).t(), S::one(), buf, MatView::dense(geom.cout, kk))
                });
                acc(*b, &mut |buf| {
                    for (o, chunk) in g.chunks(n).enumerate() {
                        buf[o] = buf[o] + chunk.iter().copied().sum::<S>();
                    }
                });
                let wv = &nodes[w.0].value;
                acc(*x, &mut |buf| {
                    let mut dcols = vec![S::zero(); kk * n];
                    gemm(
                        S::one(),
                        wv,
                        MatView::dense(geom.cout, kk).t(),
                        g,
                        gv,
                        S::zero(),
                        &mut dcols,
                        MatView::dense(kk, n),
                    );
                    col2im_add(&dcols, geom, buf);
                });
            }
            Op::Custom { inputs, backward } => {
                let gs = backward(g);
                for (&inp, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        acc(inp, &mut |buf| {
                            for (d, &s) in buf.iter_mut().zip(&gi) {
                                *d = *d + s;
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Adds `f(g[i], i)` into `buf`, folding indices modulo `buf.len()` so a
/// broadcast operand collects the sum over its repeats.
fn reduce_into<S: Scalar>(buf: &mut [S], g: &[S], f: impl Fn(S, usize) -> S) {
    let n = buf.len();
    if n == g.len() {
        for (i, (d, &gi)) in buf.iter_mut().zip(g).enumerate() {
            *d = *d + f(gi, i);
        }
    } else {
        for (i, &gi) in g.iter().enumerate() {
            buf[i % n] = buf[i % n] + f(gi, i);
        }
    }
}

fn view(dims: &[usize], transposed: bool) -> MatView {
    let v = MatView::dense(dims[0], dims[1]);
    if transposed {
        v.t()
    } else {
        v
    }
}

fn head_view(rows: usize, dh: usize, c: usize, h: usize) -> MatView {
    MatView { rows, cols: dh, offset: h * dh, rs: c, cs: 1 }
}

fn softmax_rows<S: Scalar>(buf: &mut [S], width: usize) {
    for row in buf.chunks_mut(width) {
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total = total + *v;
        }
        let inv = S::one() / total;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let n = g.ho * g.wo;
    let mut cols = vec![S::zero(); g.cin * g.k * g.k * n];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        cols[row * n + oy * g.wo + ox] =
                            x[(c * g.h + iy as usize) * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let n = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = (c * g.h + iy as usize) * g.w + ix as usize;
                        dx[idx] = dx[idx] + cols[row * n + oy * g.wo + ox];
                    }
                }
            }
        }
    }
}
