//! Conditional flow matching along `x_t = (1 - t)·x0 + t·ε`, whose velocity
//! is `ε - x0`; sampling integrates from noise at `t = 1` to data at `t = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
}

impl FlowSample {
    pub fn new(x0: Vec<f64>, eps: Vec<f64>, t: f64) -> Result<Self> {
        if x0.len() != eps.len() {
            return Err(Error::invalid(format!(
                "data has {} coordinates but noise has {}",
                x0.len(),
                eps.len()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
        }
        let xt = x0.iter().zip(&eps).map(|(a, e)| (1.0 - t) * a + t * e).collect();
        Ok(FlowSample { x0, eps, t, xt })
    }

    /// Regression target `ε - x0`.
    pub fn target(&self) -> Vec<f64> {
        self.eps.iter().zip(&self.x0).map(|(e, a)| e - a).collect()
    }
}

/// Training tuples for `data`, with `t ~ U[0, 1]` and standard normal noise
/// drawn from a per-element stream.
pub fn sample_batch(data: &[Vec<f64>], seed: u64) -> Vec<FlowSample> {
    data.iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let t = rng.random::<f64>();
            let eps = (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            FlowSample::new(x0.clone(), eps, t).expect("matching lengths and t in range")
        })
        .collect()
}

/// Per-element flags marking which conditions are dropped for guidance training.
pub fn condition_dropout(seed: u64, n: usize, rate: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("drop rate {rate} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.random::<f64>() < rate).collect())
}

/// Batch mean of `‖v - (ε - x0)‖²`.
pub fn cfm_loss(predicted: &[Vec<f64>], samples: &[FlowSample]) -> Result<f64> {
    if predicted.len() != samples.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            predicted.len(),
            samples.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (i, (v, s)) in predicted.iter().zip(samples).enumerate() {
        if v.len() != s.x0.len() {
            return Err(Error::invalid(format!("prediction {i} has the wrong length")));
        }
        total += v
            .iter()
            .zip(s.eps.iter().zip(&s.x0))
            .map(|(v, (e, a))| (v - (e - a)).powi(2))
            .sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

pub fn total_loss(cfm: f64, sim: f64, lambda_s: f64) -> Result<f64> {
    if !(cfm.is_finite() && sim.is_finite() && lambda_s.is_finite()) {
        return Err(Error::invalid("loss terms must be finite"));
    }
    if lambda_s < 0.0 {
        return Err(Error::invalid("lambda_s must be non-negative"));
    }
    Ok(cfm + lambda_s * sim)
}

/// `v_uncond + w·(v_cond - v_uncond)`.
pub fn cfg_velocity(v_cond: &[f64], v_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if v_cond.len() != v_uncond.len() {
        return Err(Error::invalid("conditional and unconditional velocities differ in length"));
    }
    Ok(v_cond.iter().zip(v_uncond).map(|(c, u)| u + w * (c - u)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::invalid("cfg scale must be finite"));
        }
        Ok(())
    }
}

/// `n` standard normal vectors of length `dim`, one RNG stream per vector.
pub fn gaussian_noise(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect()
}

/// Uniform explicit Euler from `t = 1` to `t = 0` with step `-1/steps`.
pub fn euler_sample<F>(field: F, config: &SamplerConfig, init_noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    config.validate()?;
    let h = 1.0 / config.steps as f64;
    init_noise
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut x = x0.clone();
            for k in 0..config.steps {
                let t = 1.0 - k as f64 * h;
                let v = field(&x, t);
                if v.len() != x.len() {
                    return Err(Error::invalid(format!(
                        "velocity field returned {} values for {}",
                        v.len(),
                        x.len()
                    )));
                }
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "velocity field is non-finite for sample {i} at t = {t}"
                    )));
                }
                for (xj, vj) in x.iter_mut().zip(&v) {
                    *xj -= h * vj;
                }
            }
            Ok(x)
        })
        .collect()
}

/// Exact flow-matching velocity `E[ε - x0 | x_t = x]` for data `N(mean, std²)`
/// per coordinate and standard normal noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTarget {
    pub mean: f64,
    pub std: f64,
}

impl GaussianTarget {
    pub const STANDARD: GaussianTarget = GaussianTarget { mean: 0.0, std: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.mean.is_finite() && self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::invalid("target needs finite mean and positive std"));
        }
        Ok(())
    }

    /// Field `a(t) + b(t)·x`, returned as `(a, b)`.
    pub fn affine(&self, t: f64) -> (f64, f64) {
        let (m, s2) = (self.mean, self.std * self.std);
        let u = 1.0 - t;
        let b = (t - u * s2) / (u * u * s2 + t * t);
        (-m - b * u * m, b)
    }

    pub fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let (a, b) = self.affine(t);
        x.iter().map(|v| a + b * v).collect()
    }
}

/// Guided field built from a conditional target and a standard normal
/// unconditional model.
pub fn guided_affine(target: &GaussianTarget, w: f64, t: f64) -> (f64, f64) {
    let (ac, bc) = target.affine(t);
    let (au, bu) = GaussianTarget::STANDARD.affine(t);
    (au + w * (ac - au), bu + w * (bc - bu))
}

/// Mean and std reached by the continuous guided flow from `N(0, 1)`,
/// integrated with classical RK4 on the moment equations.
pub fn guided_moments(target: &GaussianTarget, w: f64, substeps: usize) -> (f64, f64) {
    // dμ/dt = a + bμ and d(ln σ)/dt = b, integrated backwards in t.
    let rhs = |t: f64, y: [f64; 2]| {
        let (a, b) = guided_affine(target, w, t);
        [a + b * y[0], b]
    };
    let h = -1.0 / substeps as f64;
    let mut y = [0.0, 0.0];
    for k in 0..substeps {
        let t = 1.0 + k as f64 * h;
        let k1 = rhs(t, y);
        let k2 = rhs(t + h / 2.0, [y[0] + h / 2.0 * k1[0], y[1] + h / 2.0 * k1[1]]);
        let k3 = rhs(t + h / 2.0, [y[0] + h / 2.0 * k2[0], y[1] + h / 2.0 * k2[1]]);
        let k4 = rhs(t + h, [y[0] + h * k3[0], y[1] + h * k3[1]]);
        for j in 0..2 {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    (y[0], y[1].exp())
}

/// Mean and std of one-dimensional samples.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowDemoReport {
    pub furnset_schema: u32,
    pub steps: usize,
    pub cfg_scale: f64,
    pub samples: usize,
    pub seed: u64,
    pub target_mean: f64,
    pub target_std: f64,
    /// Moments of the exact continuous guided flow.
    pub flow_mean: f64,
    pub flow_std: f64,
    pub empirical_mean: f64,
    pub empirical_std: f64,
}

/// Samples the guided Gaussian flow and compares moments.
pub fn flow_demo(target: &GaussianTarget, config: &SamplerConfig, samples: usize) -> Result<FlowDemoReport> {
    target.validate()?;
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let noise = gaussian_noise(config.seed, samples, 1);
    let w = config.cfg_scale;
    let out = euler_sample(
        |x, t| {
            let (a, b) = guided_affine(target, w, t);
            x.iter().map(|v| a + b * v).collect()
        },
        config,
        &noise,
    )?;
    let values: Vec<f64> = out.into_iter().map(|v| v[0]).collect();
    let (empirical_mean, empirical_std) = moments(&values);
    let (flow_mean, flow_std) = guided_moments(target, w, 4096);
    Ok(FlowDemoReport {
        furnset_schema: crate::metrics::SCHEMA_VERSION,
        steps: config.steps,
        cfg_scale: w,
        samples,
        seed: config.seed,
        target_mean: target.mean,
        target_std: target.std,
        flow_mean,
        flow_std,
        empirical_mean,
        empirical_std,
    })
}
