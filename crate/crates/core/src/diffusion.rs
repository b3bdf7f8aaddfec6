//! Variance schedule and forward/reverse diffusion arithmetic.
//!
//! Timesteps are 1-indexed: `t ∈ [1, T]`. Index 0 of every table holds the
//! noise-free state (`alpha_bar[0] = 1`).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_S_OFFSET: f64 = 0.008;
const ALPHA_CLIP: (f64, f64) = (0.001, 0.9999);

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    steps: usize,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    sigma: Vec<f64>,
}

/// Cosine schedule: `ᾱ(t) = f(t)/f(0)`, `f(u) = cos²(((u/T + s)/(1 + s))·π/2)`.
///
/// Per-step retentions are clipped to `[0.001, 0.9999]` and `ᾱ` is then
/// rebuilt as their running product, so the product identity is exact.
pub fn cosine_schedule(steps: usize, s_offset: f64) -> Result<ScheduleTable> {
    if steps < 1 {
        return Err(Error::Config("diffusion needs T >= 1".into()));
    }
    if !(s_offset > 0.0 && s_offset.is_finite()) {
        return Err(Error::Config(format!("cosine offset must be > 0, got {s_offset}")));
    }
    let f = |u: f64| {
        let c = ((u / steps as f64 + s_offset) / (1.0 + s_offset) * std::f64::consts::FRAC_PI_2).cos();
        c * c
    };
    let f0 = f(0.0);
    let raw: Vec<f64> = (0..=steps).map(|t| f(t as f64) / f0).collect();
    let mut alpha = vec![1.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    let mut beta = vec![0.0; steps + 1];
    let mut sigma = vec![0.0; steps + 1];
    for t in 1..=steps {
        alpha[t] = (raw[t] / raw[t - 1]).clamp(ALPHA_CLIP.0, ALPHA_CLIP.1);
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        beta[t] = 1.0 - alpha[t];
    }
    for t in 2..=steps {
        sigma[t] = (beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt();
    }
    Ok(ScheduleTable { steps, alpha, alpha_bar, beta, sigma })
}

impl ScheduleTable {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::Config(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }
}

/// Serializable diffusion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub s_offset: f64,
    pub suv_cutoff: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { steps: 250, s_offset: DEFAULT_S_OFFSET, suv_cutoff: 20.0 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.suv_cutoff > 0.0 && self.suv_cutoff.is_finite()) {
            return Err(Error::Config(format!("suv_cutoff must be > 0, got {}", self.suv_cutoff)));
        }
        cosine_schedule(self.steps, self.s_offset).map(|_| ())
    }

    pub fn schedule(&self) -> Result<ScheduleTable> {
        cosine_schedule(self.steps, self.s_offset)
    }

    pub fn norm(&self) -> DiffusionNorm {
        DiffusionNorm { suv_cutoff: self.suv_cutoff }
    }
}

/// Linear map between SUV `[0, cutoff]` and diffusion space `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionNorm {
    pub suv_cutoff: f64,
}

impl Default for DiffusionNorm {
    fn default() -> Self {
        DiffusionNorm { suv_cutoff: 20.0 }
    }
}

impl DiffusionNorm {
    /// SUV → diffusion space; values above the cutoff saturate at 1.
    pub fn to_diffusion(&self, suv: f64) -> f64 {
        suv.clamp(0.0, self.suv_cutoff) / (self.suv_cutoff / 2.0) - 1.0
    }

    /// Diffusion space → SUV, clamped to `[0, cutoff]`.
    pub fn to_suv(&self, x: f64) -> f64 {
        ((x + 1.0) * self.suv_cutoff / 2.0).clamp(0.0, self.suv_cutoff)
    }

    pub fn map(&self, suv: &[f64]) -> Vec<f64> {
        suv.iter().map(|&v| self.to_diffusion(v)).collect()
    }

    pub fn unmap(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.to_suv(v)).collect()
    }

    /// Differentiable [`DiffusionNorm::to_suv`].
    pub fn unmap_graph(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.offset(x, 1.0);
        let s = g.scale(s, self.suv_cutoff / 2.0);
        g.clamp(s, 0.0, self.suv_cutoff)
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Geometry(format!("array lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·eps`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], sched: &ScheduleTable) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    same_len(x0, eps)?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Algebraic inverse of [`forward_diffuse`] without the final clamp.
pub fn predict_x0_unclamped(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &ScheduleTable) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    same_len(x_t, eps_hat)?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect())
}

/// One-step clean estimate, clamped to `[-1, 1]`.
pub fn predict_x0(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &ScheduleTable) -> Result<Vec<f64>> {
    Ok(predict_x0_unclamped(x_t, eps_hat, t, sched)?.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// Differentiable [`predict_x0`]; `x_t` is typically a constant node.
pub fn predict_x0_graph(g: &mut Graph, x_t: Var, eps_hat: Var, t: usize, sched: &ScheduleTable) -> Result<Var> {
    sched.check_t(t)?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    let noise = g.scale(eps_hat, b);
    let diff = g.sub(x_t, noise);
    let x0 = g.scale(diff, 1.0 / a);
    Ok(g.clamp(x0, -1.0, 1.0))
}

/// `x_{t-1} = (x_t − (1−α_t)/√(1−ᾱ_t)·eps_hat)/√α_t + σ_t·z`.
pub fn reverse_step(x_t: &[f64], eps_hat: &[f64], t: usize, z: &[f64], sched: &ScheduleTable) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    same_len(x_t, eps_hat)?;
    let alpha = sched.alpha(t);
    let k = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = sched.sigma(t);
    if sigma > 0.0 {
        same_len(x_t, z)?;
        Ok(x_t.iter().zip(eps_hat).zip(z).map(|((x, e), n)| inv * (x - k * e) + sigma * n).collect())
    } else {
        Ok(x_t.iter().zip(eps_hat).map(|(x, e)| inv * (x - k * e)).collect())
    }
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Full ancestral sampling chain from `x_T ~ N(0, I)` down to `x_0`.
///
/// `denoiser(x_t, condition, t)` returns the noise estimate. Noise `z` is
/// drawn only for steps with `σ_t > 0`.
pub fn sample_chain<F>(condition: &[f64], mut denoiser: F, sched: &ScheduleTable, rng: &mut Rng) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[f64], usize) -> Result<Vec<f64>>,
{
    let n = condition.len();
    let mut x = standard_normal(rng, n);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = denoiser(&x, condition, t)?;
        if eps_hat.len() != n {
            return Err(Error::Geometry(format!("denoiser returned {} values for {n}", eps_hat.len())));
        }
        let z = if sched.sigma(t) > 0.0 { standard_normal(rng, n) } else { Vec::new() };
        x = reverse_step(&x, &eps_hat, t, &z, sched)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn schedule_invariants() {
        for steps in [1, 10, 50, 250] {
            let s = cosine_schedule(steps, DEFAULT_S_OFFSET).unwrap();
            let mut prod = 1.0;
            for t in 1..=steps {
                assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                prod *= s.alpha(t);
                assert!((prod - s.alpha_bar(t)).abs() < 1e-12);
                assert!(s.sigma(t) >= 0.0);
            }
            assert_eq!(s.sigma(1), 0.0);
        }
        assert!(cosine_schedule(0, 0.008).is_err());
    }

    #[test]
    fn norm_round_trip() {
        let n = DiffusionNorm::default();
        for v in [0.0, 0.5, 7.25, 20.0] {
            assert!((n.to_suv(n.to_diffusion(v)) - v).abs() < 1e-12);
        }
        assert_eq!(n.to_suv(3.0), 20.0);
        assert_eq!(n.to_suv(-3.0), 0.0);
        assert_eq!(n.to_diffusion(35.0), 1.0);
    }

    #[test]
    fn forward_special_cases() {
        let s = cosine_schedule(50, DEFAULT_S_OFFSET).unwrap();
        let x0 = vec![0.3, -0.7, 0.1];
        let eps = vec![1.0, -2.0, 0.5];
        let t = 17;
        let a = forward_diffuse(&x0, t, &[0.0; 3], &s).unwrap();
        for (o, x) in a.iter().zip(&x0) {
            assert!((o - s.alpha_bar(t).sqrt() * x).abs() < 1e-15);
        }
        let b = forward_diffuse(&[0.0; 3], t, &eps, &s).unwrap();
        for (o, e) in b.iter().zip(&eps) {
            assert!((o - (1.0 - s.alpha_bar(t)).sqrt() * e).abs() < 1e-15);
        }
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 51, &eps, &s).is_err());
    }

    #[test]
    fn predict_inverts_forward() {
        let s = cosine_schedule(50, DEFAULT_S_OFFSET).unwrap();
        let mut rng = crate::rng::from_seed(2);
        let x0: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = standard_normal(&mut rng, 32);
        for t in [1, 10, 49] {
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let back = predict_x0_unclamped(&xt, &eps, t, &s).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-12);
            }
            let zero_noise = forward_diffuse(&x0, t, &[0.0; 32], &s).unwrap();
            let back = predict_x0(&zero_noise, &[0.0; 32], t, &s).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let clamped = predict_x0(&[5.0], &[0.0], 3, &s).unwrap();
        assert_eq!(clamped, vec![1.0]);
    }

    #[test]
    fn reverse_special_cases() {
        let s = cosine_schedule(20, DEFAULT_S_OFFSET).unwrap();
        let xt = vec![0.4, -1.2];
        let out = reverse_step(&xt, &[0.0, 0.0], 7, &[0.0, 0.0], &s).unwrap();
        for (o, x) in out.iter().zip(&xt) {
            assert!((o - x / s.alpha(7).sqrt()).abs() < 1e-15);
        }
        // t = 1 ignores z entirely
        let a = reverse_step(&xt, &[0.1, 0.2], 1, &[9.0, 9.0], &s).unwrap();
        let b = reverse_step(&xt, &[0.1, 0.2], 1, &[], &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chain_is_deterministic_and_t1_is_one_step() {
        let s = cosine_schedule(1, DEFAULT_S_OFFSET).unwrap();
        let cond = vec![0.0; 8];
        let mut calls = 0;
        let mut rng = crate::rng::from_seed(5);
        let out = sample_chain(
            &cond,
            |x, _, t| {
                calls += 1;
                assert_eq!(t, 1);
                Ok(x.to_vec())
            },
            &s,
            &mut rng,
        )
        .unwrap();
        assert_eq!(calls, 1);
        let mut rng = crate::rng::from_seed(5);
        let x_t = standard_normal(&mut rng, 8);
        let expected = reverse_step(&x_t, &x_t, 1, &[], &s).unwrap();
        assert_eq!(out, expected);
    }
}
