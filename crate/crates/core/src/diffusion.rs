//! Noise schedules, the forward marginal and single reverse steps.
//!
//! Tensors passed to the step functions may hold one sample per row; all
//! updates are elementwise, so a batch behaves exactly like its rows run
//! one at a time.
//!
//! Classifier-free guidance uses the `(1 + w) * eps(x, y) - w * eps(x)`
//! convention. The `eps_null + g * (eps_cond - eps_null)` form found
//! elsewhere corresponds to `g = 1 + w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TargetClassifier;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Diffusion constants indexed by timestep `1..=T`; index 0 carries
/// `alpha_bar = 1` so deterministic steps can land on `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {b}")));
        }
        let n = betas.len();
        let mut beta = Vec::with_capacity(n + 1);
        let mut alpha = Vec::with_capacity(n + 1);
        let mut alpha_bar = Vec::with_capacity(n + 1);
        let mut sigma = Vec::with_capacity(n + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        sigma.push(0.0);
        for b in betas {
            let a = 1.0 - b;
            let prev = *alpha_bar.last().unwrap();
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(prev * a);
            sigma.push(b.sqrt());
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Defined for `0..=T` with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Reverse-step standard deviation, fixed to `sqrt(beta_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// `1 - alpha_bar(T)`: variance of `x_T` given `x_0`.
    pub fn sigma_bar_sq(&self) -> f64 {
        1.0 - self.alpha_bar[self.steps()]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`
pub fn forward_marginal(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    x0.zip_map(eps, "forward_marginal", |x, e| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
}

/// One forward transition `q(x_t | x_{t-1})`.
pub fn forward_step(x_prev: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let b = sched.beta(t);
    x_prev.zip_map(eps, "forward_step", |x, e| (1.0 - b).sqrt() * x + b.sqrt() * e)
}

/// `(1 + w) eps_cond - w eps_uncond`
pub fn cfg_epsilon(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    eps_cond.zip_map(eps_uncond, "cfg_epsilon", |c, u| (1.0 + w) * c - w * u)
}

/// Mean of the DDPM reverse transition for predicted noise `eps_hat`.
pub fn ddpm_mean(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    x_t.zip_map(eps_hat, "ddpm_step", |x, e| (x - coef * e) * inv)
}

/// `mean + sigma_t z`; pass `z = 0` at `t = 1`.
pub fn ddpm_step(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule, z: &Tensor) -> Result<Tensor> {
    let mean = ddpm_mean(x_t, t, eps_hat, sched)?;
    let s = sched.sigma(t);
    mean.zip_map(z, "ddpm_step", |m, z| m + s * z)
}

/// Deterministic DDIM update from `t` to `t_prev < t`.
pub fn ddim_step(x_t: &Tensor, t: usize, t_prev: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::Config(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    x_t.zip_map(eps_hat, "ddim_step", |x, e| {
        let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
        ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e
    })
}

/// Strided DDIM timesteps, descending, e.g. `T=500, steps=50` gives
/// `500, 490, ..., 10`. The final step goes to `t = 0`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total || total % steps != 0 {
        return Err(Error::Config(format!(
            "ddim steps must divide the schedule length: {steps} vs {total}"
        )));
    }
    let stride = total / steps;
    Ok((1..=steps).rev().map(|i| i * stride).collect())
}

/// Classifier guidance folded into the noise prediction:
/// `eps_hat - sqrt(1 - alpha_bar_t) * scale * grad log p(y | x_t)`.
pub fn classifier_guided_epsilon(
    eps_hat: &Tensor,
    x_t: &Tensor,
    classifier: &dyn TargetClassifier,
    labels: &[usize],
    t: usize,
    sched: &NoiseSchedule,
    scale: f64,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    if scale == 0.0 {
        return Ok(eps_hat.clone());
    }
    let g = classifier.log_prob_grad(x_t, labels)?;
    eps_hat.add_scaled(&g, -(1.0 - sched.alpha_bar(t)).sqrt() * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QuadraticClassifier;
    use crate::rng::{normal_tensor, stream};

    fn two_step() -> NoiseSchedule {
        make_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap()
    }

    #[test]
    fn two_step_schedule_constants() {
        let s = two_step();
        assert!((s.alpha(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha(2) - 0.8).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!((s.sigma_bar_sq() - 0.28).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn long_schedule_nearly_destroys_signal() {
        let s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        // direct product of (1 - beta_i)
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert_eq!(s.alpha_bar(1000), prod);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!((s.alpha_bar(1000) - 4.035829765e-5).abs() < 1e-13);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(make_schedule(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.2).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.3, 0.2).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_marginal_examples() {
        let s = two_step();
        let x0 = Tensor::vector(vec![1.0]);
        let zero = Tensor::vector(vec![0.0]);
        let out = forward_marginal(&x0, 2, &zero, &s).unwrap();
        assert!((out.item() - 0.72f64.sqrt()).abs() < 1e-15);
        let out = forward_marginal(&x0, 2, &Tensor::vector(vec![0.5]), &s).unwrap();
        assert!((out.item() - 1.1131).abs() < 1e-4);
        assert!(forward_marginal(&x0, 2, &Tensor::vector(vec![0.5, 0.5]), &s).is_err());
        assert!(forward_marginal(&x0, 0, &zero, &s).is_err());
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::vector(vec![1.0, 0.0]);
        let u = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(cfg_epsilon(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_epsilon(&c, &u, -1.0).unwrap(), u);
        assert_eq!(cfg_epsilon(&c, &u, 2.0).unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn ddpm_step_examples() {
        let s = two_step();
        let x = Tensor::vector(vec![1.0]);
        let zero = Tensor::vector(vec![0.0]);
        let out = ddpm_step(&x, 2, &zero, &s, &zero).unwrap();
        assert!((out.item() - 1.0 / 0.8f64.sqrt()).abs() < 1e-15);
        let out = ddpm_step(&x, 2, &Tensor::vector(vec![0.2]), &s, &zero).unwrap();
        let expected = (1.0 - (0.2 / 0.28f64.sqrt()) * 0.2) / 0.8f64.sqrt();
        assert!((out.item() - expected).abs() < 1e-15);
        assert!(ddpm_step(&x, 0, &zero, &s, &zero).is_err());
    }

    #[test]
    fn ddim_step_examples() {
        let s = two_step();
        let x = Tensor::vector(vec![1.0]);
        let zero = Tensor::vector(vec![0.0]);
        let out = ddim_step(&x, 2, 1, &zero, &s).unwrap();
        assert!((out.item() - (0.9f64 / 0.72).sqrt()).abs() < 1e-15);
        // substitute alpha_bar_2 = 0.72, alpha_bar_1 = 0.9
        let e = 0.3;
        let expected = 0.9f64.sqrt() * ((1.0 - 0.28f64.sqrt() * e) / 0.72f64.sqrt()) + 0.1f64.sqrt() * e;
        let out = ddim_step(&x, 2, 1, &Tensor::vector(vec![e]), &s).unwrap();
        assert!((out.item() - expected).abs() < 1e-15);
        assert!((out.item() - 1.035420).abs() < 1e-6);
        assert!(ddim_step(&x, 1, 1, &zero, &s).is_err());
        assert!(ddim_step(&x, 1, 2, &zero, &s).is_err());
    }

    #[test]
    fn ddim_identity_for_equal_alpha_bar() {
        // tiny beta makes alpha_bar(t-1) and alpha_bar(t) equal to rounding
        let s = NoiseSchedule::from_betas(vec![1e-18, 1e-18]).unwrap();
        assert_eq!(s.alpha_bar(1), s.alpha_bar(2));
        let x = Tensor::vector(vec![0.7, -1.3]);
        let out = ddim_step(&x, 2, 1, &Tensor::vector(vec![0.0, 0.0]), &s).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn ddim_timestep_layout() {
        let ts = ddim_timesteps(500, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 500);
        assert_eq!(*ts.last().unwrap(), 10);
        assert!(ddim_timesteps(500, 0).is_err());
        assert!(ddim_timesteps(500, 30).is_err());
    }

    #[test]
    fn classifier_guidance_examples() {
        let s = two_step();
        let eps = Tensor::matrix(1, 2, vec![0.1, -0.2]);
        let x = Tensor::matrix(1, 2, vec![0.5, 0.25]);
        let q = QuadraticClassifier::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], 0.25).unwrap();
        let out = classifier_guided_epsilon(&eps, &x, &q, &[0], 2, &s, 0.0).unwrap();
        assert_eq!(out, eps);

        // single class: log p = 0 identically
        let uniform = QuadraticClassifier::new(vec![vec![0.3, 0.1]], 1.0).unwrap();
        let out = classifier_guided_epsilon(&eps, &x, &uniform, &[0], 2, &s, 3.0).unwrap();
        assert_eq!(out, eps);

        // x deep in class 0: log p(1 | x) is linear, gradient (c1 - c0)/tau
        let far = QuadraticClassifier::new(vec![vec![1.0, 0.0], vec![-40.0, 0.0]], 1.0).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.2, 0.1]);
        let out = classifier_guided_epsilon(&eps, &x, &far, &[1], 2, &s, 2.0).unwrap();
        let k = 0.28f64.sqrt() * 2.0;
        let expected = [0.1 + k * 41.0, -0.2];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn composed_forward_steps_match_marginal() {
        let s = make_schedule(ScheduleKind::Linear, 10, 0.05, 0.3).unwrap();
        let n = 100_000;
        let x0 = Tensor::matrix(n, 1, vec![1.5; n]);
        let mut rng = stream(11, 0);
        let x1 = forward_step(&x0, 1, &normal_tensor(&mut rng, &[n, 1]), &s).unwrap();
        let x2 = forward_step(&x1, 2, &normal_tensor(&mut rng, &[n, 1]), &s).unwrap();
        let mean = x2.sum() / n as f64;
        let var = x2.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target_mean = s.alpha_bar(2).sqrt() * 1.5;
        let target_var = 1.0 - s.alpha_bar(2);
        let se_mean = (target_var / n as f64).sqrt();
        let se_var = target_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - target_mean).abs() < 3.0 * se_mean);
        assert!((var - target_var).abs() < 3.0 * se_var);
    }
}
