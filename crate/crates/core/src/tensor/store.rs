use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Named trainable tensors with AdamW moment buffers, iterated in
/// lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        t.requires_grad = true;
        t.grad = None;
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.values_mut() {
            match &mut t.grad {
                Some(g) => g.fill(0.0),
                None => t.grad = Some(vec![0.0; t.len()]),
            }
        }
    }

    pub(crate) fn ensure_grads(&mut self) {
        for t in self.params.values_mut() {
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.len()]);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }

    /// L2 norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every gradient buffer in place.
    pub fn scale_grads(&mut self, factor: f32) {
        for g in self.params.values_mut().filter_map(|t| t.grad.as_mut()) {
            for v in g {
                *v *= factor;
            }
        }
    }

    /// Replaces every value with one drawn from `f(name, index)`. Used to
    /// move away from zero-initialized projections in tests.
    pub fn map_values(&mut self, mut f: impl FnMut(&str, usize, f32) -> f32) {
        for (name, t) in self.params.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = f(name, i, *v);
            }
        }
    }

    /// Copies the values of every shared parameter from `other`.
    pub fn load_values(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let src = other.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if src.dims() != t.dims() {
                return Err(shape_err!(
                    "parameter `{name}`: {:?} vs {:?}",
                    src.dims(),
                    t.dims()
                ));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Tensors keyed by name, values only.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(k, t)| {
                let mut t = t.clone();
                t.grad = None;
                (k.clone(), t)
            })
            .collect()
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut s = Self::new();
        for (k, t) in named {
            s.insert(k, t)?;
        }
        Ok(s)
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 3e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    /// Applies one update to every parameter currently in `store`.
    ///
    /// Fails before touching anything if some parameter has no gradient.
    pub fn step(&self, store: &mut ParameterStore) -> Result<()> {
        if let Some((name, _)) = store.params.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        for (name, p) in store.params.iter_mut() {
            let n = p.len();
            let mom = store
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let grad = p.grad.take().expect("checked above");
            let data = p.data_mut();
            for i in 0..n {
                let g = grad[i];
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = mom.m[i] as f64 / bc1;
                let v_hat = mom.v[i] as f64 / bc2;
                let w = data[i] as f64;
                let update = m_hat / (v_hat.sqrt() + self.eps as f64);
                data[i] = (w - self.lr as f64 * (update + self.weight_decay as f64 * w)) as f32;
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f32, g: f32) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s.get_mut("w").unwrap().grad = Some(vec![g]);
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = scalar_store(1.0, 1.0);
        let opt = AdamW { lr: 0.1, weight_decay: 0.0, ..AdamW::default() };
        opt.step(&mut s).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = scalar_store(0.37, 0.0);
        let opt = AdamW { lr: 0.1, weight_decay: 0.0, ..AdamW::default() };
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 0.37);
    }

    #[test]
    fn weight_decay_shrinks_magnitude() {
        for w in [2.0f32, -2.0] {
            let mut s = scalar_store(w, 0.0);
            let opt = AdamW { lr: 0.1, weight_decay: 0.5, ..AdamW::default() };
            opt.step(&mut s).unwrap();
            let after = s.get("w").unwrap().data()[0];
            assert!(after.abs() < w.abs());
            assert_eq!(after.signum(), w.signum());
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = ParameterStore::new();
        s.insert("a.weight", Tensor::scalar(1.0)).unwrap();
        let err = AdamW::default().step(&mut s).unwrap_err();
        assert!(err.to_string().contains("a.weight"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("x", Tensor::scalar(2.0)).is_err());
    }
}
