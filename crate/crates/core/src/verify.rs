//! Self-contained property checks against the analytic oracles.
//!
//! Each check reports a measured error next to its tolerance. Exact checks
//! compare deterministic quantities; Monte-Carlo checks compare sample
//! statistics in units of their standard error and are expected to fail
//! when the tolerance is tightened far enough.

use std::fmt;

use serde::Serialize;

use crate::advdiff::{
    adversarial_guidance_step, advdiff_ddim_batch, advdiff_ddpm_batch, attack_stream, AttackSpec, GuidanceConfig,
    GuidanceTarget,
};
use crate::data::{ring_centers, AnalyticDenoiser, QuadraticClassifier};
use crate::diffusion::{ddpm_mean, forward_marginal, make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::Result;
use crate::models::{ClassifierArch, ClassifierParams, Label, NoisePredictor, TargetClassifier};
use crate::numerics::{finite_diff_grad, grad, relative_error, Activation, Tensor};
use crate::rng::{normal_vec, stream, StreamRng};
use crate::sampling::{sample_ddim, sample_ddpm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            CheckKind::Exact => "exact",
            CheckKind::MonteCarlo => "monte-carlo",
        };
        write!(
            f,
            "{} {:<34} {:<11} measured {:.3e}  tolerance {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            kind,
            self.measured,
            self.tolerance
        )
    }
}

/// Deliberate defects for testing that the suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Apply adversarial guidance with the wrong sign.
    FlipGuidanceSign,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Multiplies every tolerance.
    pub tolerance_scale: f64,
    pub seed: u64,
    pub mutation: Option<Mutation>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            tolerance_scale: 1.0,
            seed: 0,
            mutation: None,
        }
    }
}

fn check(name: &str, kind: CheckKind, measured: f64, tolerance: f64, opts: &VerifyOptions) -> Check {
    let tolerance = tolerance * opts.tolerance_scale;
    Check {
        name: name.to_string(),
        kind,
        measured,
        tolerance,
        passed: measured.is_finite() && measured <= tolerance,
    }
}

/// Runs every check in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = vec![
        gradient_vs_finite_differences(opts)?,
        quadratic_gradient_two_paths(opts)?,
        two_class_gradient_identity(opts)?,
    ];
    out.extend(forward_marginal_law(opts)?);
    out.extend(one_step_guidance_law(opts)?);
    out.extend(benign_sampling_moments(opts)?);
    out.push(guidance_off_equivalence(opts)?);
    out.push(t_star_zero_disables_guidance(opts)?);
    Ok(out)
}

fn random_classifier(dim: usize, classes: usize, hidden: usize, rng: &mut StreamRng) -> Result<ClassifierParams> {
    ClassifierParams::random(
        ClassifierArch {
            data_dim: dim,
            classes,
            hidden: vec![hidden],
            activation: Activation::Tanh,
        },
        rng,
    )
}

/// Reverse-mode input gradients of random perceptrons against central
/// differences; worst relative error over 100 instances.
pub fn gradient_vs_finite_differences(opts: &VerifyOptions) -> Result<Check> {
    let mut rng = stream(opts.seed, 101);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let dim = 1 + (i * 7) % 64;
        let classes = 2 + i % 5;
        let f = random_classifier(dim, classes, 16, &mut rng)?;
        let x = Tensor::matrix(1, dim, normal_vec(&mut rng, dim));
        let y = i % classes;
        let g = f.log_prob_grad(&x, &[y])?;
        let fd = finite_diff_grad(|p| Ok(f.log_probs(p)?.row(0)[y]), &x, 1e-5)?;
        worst = worst.max(relative_error(&g, &fd, 1e-6));
    }
    Ok(check("gradient-vs-finite-differences", CheckKind::Exact, worst, 1e-4, opts))
}

/// Closed-form oracle gradient against the tape gradient of the same
/// logits.
pub fn quadratic_gradient_two_paths(opts: &VerifyOptions) -> Result<Check> {
    let centers = ring_centers(8, 2.0);
    let tau = 0.25;
    let q = QuadraticClassifier::new(centers.clone(), tau)?;
    let c = Tensor::from_rows(&centers)?;
    let mut rng = stream(opts.seed, 102);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let x = Tensor::matrix(1, 2, normal_vec(&mut rng, 2));
        let y = i % 8;
        let analytic = Tensor::vector(q.logprob_grad_row(x.data(), y));
        let tape_grad = grad(
            |t, xv| {
                // logits_k = -(|x|^2 - 2 x.c_k + |c_k|^2) / (2 tau)
                let ct = t.leaf(c.transpose());
                let xc = t.matmul(xv, ct);
                let sq = t.square(xv);
                let ones = t.leaf(Tensor::full(&[2, 8], 1.0));
                let xx = t.matmul(sq, ones);
                let cc = t.leaf(Tensor::vector(centers.iter().map(|r| r[0] * r[0] + r[1] * r[1]).collect()));
                let two_xc = t.scale(xc, 2.0);
                let diff = t.sub(two_xc, xx);
                let neg_c = t.scale(cc, -1.0);
                let pre = t.add_row_bias(diff, neg_c);
                let logits = t.scale(pre, 1.0 / (2.0 * tau));
                let lp = t.log_softmax(logits);
                let picked = t.pick_per_row(lp, vec![y]);
                t.sum(picked)
            },
            &x,
        )?;
        let tape_grad = tape_grad.reshape(vec![2])?;
        worst = worst.max(relative_error(&analytic, &tape_grad, 1.0));
    }
    Ok(check("quadratic-gradient-two-paths", CheckKind::Exact, worst, 1e-10, opts))
}

/// Worst violation of the two-class relations between the targeted
/// gradient on `y_a` and the untargeted gradient on `y`, over random
/// classifiers and inputs.
///
/// With two classes `grad p(y_a | x) = -grad p(y | x)`, so the log-gradients
/// are antiparallel: `grad log p(y_a | x) = -(p(y|x) / p(y_a|x)) grad log p(y | x)`.
/// Both the probability-gradient identity and the equality of the unit
/// directions are measured.
pub fn two_class_gradient_gap(seed: u64, instances: usize) -> Result<TwoClassGap> {
    let mut rng = stream(seed, 103);
    let mut gap = TwoClassGap::default();
    for _ in 0..instances {
        let f = random_classifier(2, 2, 32, &mut rng)?;
        let x = Tensor::matrix(4, 2, normal_vec(&mut rng, 8));
        let ya = [1, 0, 1, 0];
        let y = [0, 1, 0, 1];
        let targeted = f.log_prob_grad(&x, &ya)?;
        let untargeted = f.log_prob_grad(&x, &y)?;
        let p = f.log_probs(&x)?.map(f64::exp);
        for i in 0..4 {
            let gt = targeted.row(i);
            let gu = untargeted.row(i);
            let (pa, py) = (p.row(i)[ya[i]], p.row(i)[y[i]]);
            let nt = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nu = gu.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..2 {
                gap.probability = gap.probability.max((pa * gt[j] + py * gu[j]).abs());
                gap.direction = gap.direction.max((gt[j] / nt + gu[j] / nu).abs());
                gap.raw = gap.raw.max((gt[j] + gu[j]).abs());
            }
        }
    }
    Ok(gap)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TwoClassGap {
    /// `max |p(y_a) grad log p(y_a) + p(y) grad log p(y)|`.
    pub probability: f64,
    /// `max |unit(grad log p(y_a)) + unit(grad log p(y))|`.
    pub direction: f64,
    /// `max |grad log p(y_a) + grad log p(y)|`; zero only where `p = 1/2`.
    pub raw: f64,
}

pub fn two_class_gradient_identity(opts: &VerifyOptions) -> Result<Check> {
    let gap = two_class_gradient_gap(opts.seed, 50)?;
    Ok(check(
        "two-class-gradient-identity",
        CheckKind::Exact,
        gap.probability.max(gap.direction),
        1e-10,
        opts,
    ))
}

fn mean_and_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Sample mean and variance of `1e5` reparameterized draws at five
/// timesteps, in units of their standard errors.
pub fn forward_marginal_law(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let sched = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02)?;
    let n = 100_000;
    let x0 = 1.3;
    let mut rng = stream(opts.seed, 104);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for &t in &[1usize, 10, 100, 500, 1000] {
        let eps = Tensor::matrix(n, 1, normal_vec(&mut rng, n));
        let x = forward_marginal(&Tensor::matrix(n, 1, vec![x0; n]), t, &eps, &sched)?;
        let (m, v) = mean_and_var(x.data());
        let ab = sched.alpha_bar(t);
        let var = 1.0 - ab;
        worst_mean = worst_mean.max((m - ab.sqrt() * x0).abs() / (var / n as f64).sqrt());
        // Var of the sample variance of a normal: 2 sigma^4 / (n - 1).
        worst_var = worst_var.max((v - var).abs() / (2.0 * var * var / (n as f64 - 1.0)).sqrt());
    }
    Ok(vec![
        check("forward-marginal-mean", CheckKind::MonteCarlo, worst_mean, 3.0, opts),
        check("forward-marginal-variance", CheckKind::MonteCarlo, worst_var, 3.0, opts),
    ])
}

/// Result of sampling the guided one-step transition at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepLaw {
    pub s: f64,
    pub empirical: Vec<f64>,
    pub predicted: Vec<f64>,
    pub standard_error: Vec<f64>,
}

impl OneStepLaw {
    /// Largest coordinate deviation in standard errors.
    pub fn z_score(&self) -> f64 {
        self.empirical
            .iter()
            .zip(&self.predicted)
            .zip(&self.standard_error)
            .map(|((e, p), se)| (e - p).abs() / se)
            .fold(0.0, f64::max)
    }
}

/// Samples `x*_{t-1} = x_{t-1} + sigma_t^2 s grad log p(y_a | x_{t-1})` from
/// a fixed `x_t` and compares the sample mean with
/// `mu + sigma_t^2 s grad log p(y_a | mu)`.
pub fn sample_one_step_law(
    draws: usize,
    s: f64,
    mutation: Option<Mutation>,
    rng: &mut StreamRng,
) -> Result<OneStepLaw> {
    let sched = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02)?;
    let centers = ring_centers(8, 2.0);
    let den = AnalyticDenoiser::new(centers.clone(), 0.2, sched.clone())?;
    let q = QuadraticClassifier::new(centers.clone(), 0.25)?;
    let (y, y_a, t) = (0, 1, 20);
    // Midway between the two class centers, scaled to the noise level.
    let mid: Vec<f64> = (0..2).map(|i| 0.5 * (centers[y][i] + centers[y_a][i])).collect();
    let x_t = Tensor::matrix(1, 2, mid.iter().map(|v| v * sched.alpha_bar(t).sqrt()).collect());
    let eps = den.predict(&x_t, t, &[Label::Class(y)])?;
    let mu = ddpm_mean(&x_t, t, &eps, &sched)?;

    let mut x_prev = Vec::with_capacity(draws * 2);
    let sigma = sched.sigma(t);
    for _ in 0..draws {
        let z = normal_vec(rng, 2);
        x_prev.push(mu.data()[0] + sigma * z[0]);
        x_prev.push(mu.data()[1] + sigma * z[1]);
    }
    let x_prev = Tensor::matrix(draws, 2, x_prev);
    let sign = match mutation {
        Some(Mutation::FlipGuidanceSign) => -1.0,
        None => 1.0,
    };
    let target = GuidanceTarget {
        labels: vec![y_a; draws],
        sign,
    };
    let guided = adversarial_guidance_step(&q, &x_prev, t, &target, s, 1.0, &sched)?;

    let g_mu = q.logprob_grad_row(mu.data(), y_a);
    let mut empirical = Vec::with_capacity(2);
    let mut standard_error = Vec::with_capacity(2);
    let mut predicted = Vec::with_capacity(2);
    for j in 0..2 {
        let col: Vec<f64> = (0..draws).map(|i| guided.row(i)[j]).collect();
        let (m, v) = mean_and_var(&col);
        empirical.push(m);
        standard_error.push((v / draws as f64).sqrt());
        predicted.push(mu.data()[j] + sigma * sigma * s * g_mu[j]);
    }
    Ok(OneStepLaw {
        s,
        empirical,
        predicted,
        standard_error,
    })
}

pub fn one_step_guidance_law(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = stream(opts.seed, 105);
    [0.1, 0.5, 1.0]
        .iter()
        .map(|&s| {
            let law = sample_one_step_law(100_000, s, opts.mutation, &mut rng)?;
            Ok(check(
                &format!("one-step-guidance-law s={s}"),
                CheckKind::MonteCarlo,
                law.z_score(),
                3.0,
                opts,
            ))
        })
        .collect()
}

/// Benign conditional DDPM sampling with the oracle denoiser reproduces the
/// class Gaussian: mean offset (absolute) and variance ratio error.
pub fn benign_sampling_moments(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let sched = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.05)?;
    let centers = ring_centers(8, 2.0);
    let gamma = 0.2;
    let den = AnalyticDenoiser::new(centers.clone(), gamma, sched.clone())?;
    let n = 10_000;
    let y = 3;
    let mut rngs: Vec<StreamRng> = (0..n as u64).map(|i| stream(opts.seed, 106 << 32 | i)).collect();
    let x = sample_ddpm(&den, &vec![y; n], 0.0, &sched, &mut rngs)?;
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for j in 0..2 {
        let col: Vec<f64> = (0..n).map(|i| x.row(i)[j]).collect();
        let (m, v) = mean_and_var(&col);
        worst_mean = worst_mean.max((m - centers[y][j]).abs());
        worst_var = worst_var.max((v / (gamma * gamma) - 1.0).abs());
    }
    Ok(vec![
        check("benign-sampling-mean", CheckKind::MonteCarlo, worst_mean, 0.05, opts),
        check("benign-sampling-variance", CheckKind::MonteCarlo, worst_var, 0.15, opts),
    ])
}

fn oracle_setup() -> Result<(NoiseSchedule, AnalyticDenoiser, QuadraticClassifier)> {
    let sched = make_schedule(ScheduleKind::Linear, 100, 1e-4, 0.1)?;
    let centers = ring_centers(8, 2.0);
    Ok((
        sched.clone(),
        AnalyticDenoiser::new(centers.clone(), 0.2, sched)?,
        QuadraticClassifier::new(centers, 0.25)?,
    ))
}

/// Largest absolute difference between attack samples with guidance off
/// and benign samples on the same streams, for both samplers.
pub fn guidance_off_equivalence(opts: &VerifyOptions) -> Result<Check> {
    let (sched, den, q) = oracle_setup()?;
    let specs: Vec<AttackSpec> = (0..16).map(|i| AttackSpec::new(i % 8, (i + 3) % 8)).collect();
    let labels: Vec<usize> = specs.iter().map(|s| s.y).collect();
    let cfg = GuidanceConfig::benign(1.0);
    let streams = || -> Vec<StreamRng> { (0..16).map(|i| attack_stream(opts.seed, i)).collect() };
    let mut worst: f64 = 0.0;

    let attacked = advdiff_ddpm_batch(&den, &q, &specs, &cfg, &sched, &mut streams())?;
    let benign = sample_ddpm(&den, &labels, cfg.w, &sched, &mut streams())?;
    for (i, r) in attacked.iter().enumerate() {
        for (a, b) in r.x0.iter().zip(benign.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    let attacked = advdiff_ddim_batch(&den, &q, &specs, &cfg, &sched, 20, &mut streams())?;
    let benign = sample_ddim(&den, &labels, cfg.w, &sched, 20, &mut streams())?;
    for (i, r) in attacked.iter().enumerate() {
        for (a, b) in r.x0.iter().zip(benign.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(check("guidance-off-equivalence", CheckKind::Exact, worst, 0.0, opts))
}

/// `t_star = 0` with a large `s` must leave the chain benign.
pub fn t_star_zero_disables_guidance(opts: &VerifyOptions) -> Result<Check> {
    let (sched, den, q) = oracle_setup()?;
    let specs: Vec<AttackSpec> = (0..8).map(|i| AttackSpec::new(i, (i + 1) % 8)).collect();
    let labels: Vec<usize> = specs.iter().map(|s| s.y).collect();
    let cfg = GuidanceConfig {
        s: 5.0,
        t_star: 0.0,
        ..GuidanceConfig::benign(1.0)
    };
    let streams = || -> Vec<StreamRng> { (0..8).map(|i| attack_stream(opts.seed, 100 + i)).collect() };
    let attacked = advdiff_ddpm_batch(&den, &q, &specs, &cfg, &sched, &mut streams())?;
    let benign = sample_ddpm(&den, &labels, cfg.w, &sched, &mut streams())?;
    let mut worst: f64 = 0.0;
    for (i, r) in attacked.iter().enumerate() {
        for (a, b) in r.x0.iter().zip(benign.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(check("t-star-zero-disables-guidance", CheckKind::Exact, worst, 0.0, opts))
}
