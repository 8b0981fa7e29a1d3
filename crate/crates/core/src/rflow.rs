//! Rectified-flow forward process, single-step clean estimate, timestep
//! sampling and the deterministic sampler.
//!
//! The network predicts noise. `t = 0` is data and `t → 1` is pure noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Largest admissible timestep; the clean estimate divides by `1 − t`.
pub const T_MAX_LIMIT: f32 = 1.0 - 1e-4;
pub const DEFAULT_T_MAX: f32 = 0.999;
pub const DEFAULT_STEPS: usize = 25;

fn check_t(t: f32) -> Result<()> {
    if !(0.0..=T_MAX_LIMIT).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} outside [0, {T_MAX_LIMIT}]")));
    }
    Ok(())
}

fn same_dims(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `(1 − t)·z0 + t·eps`.
pub fn forward_interpolate(z0: &Tensor, eps: &Tensor, t: f32) -> Result<Tensor> {
    same_dims(z0, eps)?;
    check_t(t)?;
    let t = t as f64;
    let data = z0.data().iter().zip(eps.data()).map(|(&x, &e)| ((1.0 - t) * x as f64 + t * e as f64) as f32).collect();
    Tensor::new(z0.dims(), data)
}

/// `(zt − t·eps_pred) / (1 − t)`.
pub fn estimate_clean(zt: &Tensor, eps_pred: &Tensor, t: f32) -> Result<Tensor> {
    same_dims(zt, eps_pred)?;
    if t >= 1.0 {
        return Err(Error::Domain(format!("clean estimate undefined at t = {t}")));
    }
    check_t(t)?;
    let inv = 1.0 / (1.0 - t as f64);
    let data = zt
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&z, &e)| ((z as f64 - t as f64 * e as f64) * inv) as f32)
        .collect();
    Tensor::new(zt.dims(), data)
}

/// Moves from `t` to `t_next` by re-interpolating the clean estimate with
/// the predicted noise.
pub fn sampler_step(zt: &Tensor, eps_pred: &Tensor, t: f32, t_next: f32) -> Result<Tensor> {
    if !(t_next < t) || t_next < 0.0 {
        return Err(Error::Domain(format!("non-decreasing schedule step {t} -> {t_next}")));
    }
    let z0 = estimate_clean(zt, eps_pred, t)?;
    if t_next == 0.0 {
        return Ok(z0);
    }
    let data = z0
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&x, &e)| (1.0 - t_next) * x + t_next * e)
        .collect();
    Tensor::new(zt.dims(), data)
}

/// Descending timesteps from `t_max` to `0`; `steps` updates use
/// `steps + 1` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSchedule {
    times: Vec<f32>,
}

impl TimeSchedule {
    pub fn uniform(steps: usize, t_max: f32) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(t_max > 0.0 && t_max <= T_MAX_LIMIT) {
            return Err(Error::Config(format!("t_max {t_max} outside (0, {T_MAX_LIMIT}]")));
        }
        let times = (0..=steps)
            .map(|i| {
                if i == steps {
                    0.0
                } else {
                    (t_max as f64 * (1.0 - i as f64 / steps as f64)) as f32
                }
            })
            .collect();
        Self::from_times(times)
    }

    pub fn from_times(times: Vec<f32>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config("schedule needs at least two times".into()));
        }
        if times.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Domain("schedule must be strictly decreasing".into()));
        }
        if times[0] > T_MAX_LIMIT || *times.last().expect("nonempty") < 0.0 {
            return Err(Error::Domain(format!("schedule times must lie in [0, {T_MAX_LIMIT}]")));
        }
        Ok(TimeSchedule { times })
    }

    pub fn times(&self) -> &[f32] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t_max(&self) -> f32 {
        self.times[0]
    }
}

impl Default for TimeSchedule {
    fn default() -> Self {
        Self::uniform(DEFAULT_STEPS, DEFAULT_T_MAX).expect("valid default schedule")
    }
}

/// Runs the deterministic sampler from `z_start` at `schedule.t_max()`.
pub fn sample<F>(z_start: &Tensor, schedule: &TimeSchedule, mut predict_eps: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f32) -> Result<Tensor>,
{
    let mut z = z_start.clone();
    for w in schedule.times().windows(2) {
        let eps = predict_eps(&z, w[0])?;
        z = sampler_step(&z, &eps, w[0], w[1])?;
    }
    Ok(z)
}

/// Training-time timestep distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimestepDistribution {
    #[default]
    Uniform,
    LogitNormal { mean: f32, std: f32 },
}

impl TimestepDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TimestepDistribution::Uniform => Ok(()),
            TimestepDistribution::LogitNormal { mean, std } => {
                if !mean.is_finite() || !(std > 0.0) {
                    return Err(Error::Config(format!("logit-normal({mean}, {std})")));
                }
                Ok(())
            }
        }
    }
}

/// Loss weighting `w(t)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeighting {
    #[default]
    Constant,
}

impl LossWeighting {
    pub fn weight(&self, _t: f32) -> f32 {
        match self {
            LossWeighting::Constant => 1.0,
        }
    }
}

/// Draws `t ∈ (0, t_max]` and returns it with its loss weight.
pub fn sample_timestep<R: Rng + ?Sized>(
    rng: &mut R,
    dist: TimestepDistribution,
    weighting: LossWeighting,
    t_max: f32,
) -> (f32, f32) {
    let t_max = t_max.min(T_MAX_LIMIT);
    let t = loop {
        let raw: f64 = match dist {
            TimestepDistribution::Uniform => 1.0 - rng.random::<f64>(),
            TimestepDistribution::LogitNormal { mean, std } => {
                let n = Normal::new(mean as f64, std as f64).expect("validated parameters");
                let x: f64 = n.sample(rng);
                1.0 / (1.0 + (-x).exp())
            }
        };
        // uniform maps (0, 1] onto (0, t_max]
        let t = (raw * t_max as f64) as f32;
        if t > 0.0 {
            break t.min(t_max);
        }
    };
    (t, weighting.weight(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: f32) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn forward_examples() {
        let z0 = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let e = Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(forward_interpolate(&z0, &e, 0.0).unwrap(), z0);
        let r = forward_interpolate(&s(1.0), &s(0.0), 0.3).unwrap();
        assert!((r.data()[0] - 0.7).abs() < 1e-7);
        let r = forward_interpolate(&s(2.0), &s(0.0), DEFAULT_T_MAX).unwrap();
        assert!((r.data()[0] - 2.0 * (1.0 - DEFAULT_T_MAX)).abs() < 1e-7);
        assert!(forward_interpolate(&z0, &s(0.0), 0.5).is_err());
        assert!(forward_interpolate(&z0, &e, 1.0).is_err());
    }

    #[test]
    fn clean_estimate_examples() {
        let r = estimate_clean(&s(0.7), &s(0.0), 0.3).unwrap();
        assert!((r.data()[0] - 1.0).abs() < 1e-6);
        let zt = Tensor::new(&[2], vec![0.25, -3.0]).unwrap();
        assert_eq!(estimate_clean(&zt, &zt, 0.0).unwrap(), zt);
        assert!(matches!(estimate_clean(&zt, &zt, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn sampler_step_endpoint_and_order() {
        let zt = Tensor::new(&[2], vec![0.4, 0.9]).unwrap();
        let e = Tensor::new(&[2], vec![0.3, -0.2]).unwrap();
        assert_eq!(
            sampler_step(&zt, &e, 0.5, 0.0).unwrap(),
            estimate_clean(&zt, &e, 0.5).unwrap()
        );
        assert!(sampler_step(&zt, &e, 0.5, 0.5).is_err());
        assert!(sampler_step(&zt, &e, 0.5, 0.7).is_err());
    }

    #[test]
    fn default_schedule_shape() {
        let sch = TimeSchedule::default();
        assert_eq!(sch.steps(), 25);
        assert_eq!(sch.t_max(), 0.999);
        assert_eq!(*sch.times().last().unwrap(), 0.0);
        assert!(TimeSchedule::from_times(vec![0.5, 0.5, 0.0]).is_err());
        assert!(TimeSchedule::from_times(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn timestep_sampling_is_seeded_and_bounded() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64)
                .map(|_| {
                    sample_timestep(&mut rng, TimestepDistribution::Uniform, LossWeighting::Constant, 0.999)
                })
                .collect::<Vec<_>>()
        };
        let a = draw(0);
        assert_eq!(a, draw(0));
        assert_ne!(a, draw(1));
        for (t, w) in a {
            assert!(t > 0.0 && t <= 0.999);
            assert_eq!(w, 1.0);
        }
    }
}
