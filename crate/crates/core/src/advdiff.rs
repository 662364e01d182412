//! Adversarial diffusion sampling.
//!
//! Two guidance mechanisms are layered on a benign classifier-free sampler:
//!
//! * adversarial guidance shifts each low-noise reverse iterate along
//!   `grad log p_f(y_a | x)` scaled by `sigma_t^2 * s`;
//! * noise sampling guidance moves the initial noise `x_T` along
//!   `grad_{x_0} log p_f(y_a | x_0)` between restarts, so each restart starts
//!   from a point that the previous one found more adversarial.
//!
//! Untargeted attacks descend `log p_f(y | x)` on the generation label
//! instead of ascending the target label.
//!
//! Attacks in a batch run in lock step but never interact: each row owns its
//! random stream and every per-row computation is independent of the other
//! rows, so a batch reproduces the same attacks run one at a time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{classifier_guided_epsilon, ddim_step, ddim_timesteps, ddpm_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{NoisePredictor, TargetClassifier};
use crate::numerics::Tensor;
use crate::rng::{self, StreamRng};
use crate::sampling::{guided_noise, initial_noise, step_noise};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Targeted,
    Untargeted,
}

/// Whether the noise sampling update carries the `1 - alpha_bar_T` factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseGuidanceScaling {
    /// With the factor for DDPM, without it for DDIM.
    Auto,
    SigmaBar,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SamplerKind {
    Ddpm,
    Ddim { steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Classifier-free guidance weight.
    pub w: f64,
    /// Adversarial guidance scale.
    pub s: f64,
    /// Noise sampling guidance scale.
    pub a: f64,
    /// Number of restarts `N`.
    pub restarts: usize,
    /// Adversarial guidance is active for `t <= t_star * T`.
    pub t_star: f64,
    pub mode: AttackMode,
    pub noise_scaling: NoiseGuidanceScaling,
    /// Keep the iterates of the final restart.
    #[serde(default)]
    pub record_trajectory: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::mnist_paper()
    }
}

impl GuidanceConfig {
    /// `N = 10, s = 0.5, a = 1.0`, guidance over the final half of the chain.
    pub fn mnist_paper() -> Self {
        Self {
            w: 1.0,
            s: 0.5,
            a: 1.0,
            restarts: 10,
            t_star: 0.5,
            mode: AttackMode::Targeted,
            noise_scaling: NoiseGuidanceScaling::Auto,
            record_trajectory: false,
        }
    }

    /// `N = 5, s = 0.7, a = 0.5`, guidance over the final fifth of the chain.
    pub fn imagenet_paper() -> Self {
        Self {
            s: 0.7,
            a: 0.5,
            restarts: 5,
            t_star: 0.2,
            ..Self::mnist_paper()
        }
    }

    /// Guidance switched off: a single benign pass.
    pub fn benign(w: f64) -> Self {
        Self {
            w,
            s: 0.0,
            a: 0.0,
            restarts: 1,
            ..Self::mnist_paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 0.0) || !(self.a >= 0.0) {
            return Err(Error::Config(format!(
                "guidance scales must be non-negative, got s={}, a={}",
                self.s, self.a
            )));
        }
        if self.restarts < 1 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.t_star) {
            return Err(Error::Config(format!("t_star must lie in [0, 1], got {}", self.t_star)));
        }
        if !self.w.is_finite() {
            return Err(Error::Config("w must be finite".into()));
        }
        Ok(())
    }

    fn noise_factor(&self, sampler: SamplerKind, sched: &NoiseSchedule) -> f64 {
        match (self.noise_scaling, sampler) {
            (NoiseGuidanceScaling::SigmaBar, _) | (NoiseGuidanceScaling::Auto, SamplerKind::Ddpm) => {
                sched.sigma_bar_sq()
            }
            (NoiseGuidanceScaling::Plain, _) | (NoiseGuidanceScaling::Auto, SamplerKind::Ddim { .. }) => 1.0,
        }
    }
}

/// Generation label `y` and, for targeted attacks, the target label `y_a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackSpec {
    pub y: usize,
    pub target: usize,
}

impl AttackSpec {
    pub fn new(y: usize, target: usize) -> Self {
        Self { y, target }
    }

    pub fn validate(&self, mode: AttackMode, classes: usize) -> Result<()> {
        for l in [self.y, self.target] {
            if l >= classes {
                return Err(Error::Label { label: l, classes });
            }
        }
        if mode == AttackMode::Targeted && self.y == self.target {
            return Err(Error::Config(format!(
                "targeted attack needs y != y_a, both are {}",
                self.y
            )));
        }
        Ok(())
    }

    /// Label whose log-probability is followed, and the direction.
    fn guidance(&self, mode: AttackMode) -> (usize, f64) {
        match mode {
            AttackMode::Targeted => (self.target, 1.0),
            AttackMode::Untargeted => (self.y, -1.0),
        }
    }

    /// Whether classifier verdict `pred` satisfies the objective.
    pub fn is_success(&self, mode: AttackMode, pred: usize) -> bool {
        match mode {
            AttackMode::Targeted => pred == self.target,
            AttackMode::Untargeted => pred != self.y,
        }
    }
}

/// Per-row guidance labels and direction for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTarget {
    pub labels: Vec<usize>,
    pub sign: f64,
}

impl GuidanceTarget {
    pub fn new(specs: &[AttackSpec], mode: AttackMode) -> Self {
        let sign = match mode {
            AttackMode::Targeted => 1.0,
            AttackMode::Untargeted => -1.0,
        };
        Self {
            labels: specs.iter().map(|s| s.guidance(mode).0).collect(),
            sign,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub spec: AttackSpec,
    /// Last successful sample, or the final restart's sample when no
    /// restart succeeded.
    pub x0: Vec<f64>,
    pub success: bool,
    pub first_success: Option<usize>,
    /// Target-classifier top-1 verdict after each restart.
    pub verdicts: Vec<usize>,
    /// Iterates `x_T, ..., x_0` of the final restart, when recorded.
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// `x_prev + sign * sigma_t^2 * s * grad log p_f(label | x_prev)` for
/// `t <= t_star * T`; `x_prev` unchanged otherwise.
pub fn adversarial_guidance_step(
    classifier: &dyn TargetClassifier,
    x_prev: &Tensor,
    t: usize,
    target: &GuidanceTarget,
    s: f64,
    t_star: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    if s == 0.0 || !guidance_active(t, t_star, sched.steps()) {
        return Ok(x_prev.clone());
    }
    let g = classifier.log_prob_grad(x_prev, &target.labels)?;
    let var = sched.sigma(t) * sched.sigma(t);
    x_prev.add_scaled(&g, target.sign * var * s)
}

/// `x_T + sign * factor * a * grad_{x_0} log p_f(label | x_0)`.
pub fn noise_guidance_update(
    classifier: &dyn TargetClassifier,
    x_t: &Tensor,
    x0: &Tensor,
    target: &GuidanceTarget,
    a: f64,
    factor: f64,
) -> Result<Tensor> {
    if a == 0.0 {
        return Ok(x_t.clone());
    }
    let g = classifier.log_prob_grad(x0, &target.labels)?;
    x_t.add_scaled(&g, target.sign * factor * a)
}

pub fn guidance_active(t: usize, t_star: f64, steps: usize) -> bool {
    t as f64 <= t_star * steps as f64
}

struct Tracker {
    x_adv: Vec<Option<Vec<f64>>>,
    first: Vec<Option<usize>>,
    verdicts: Vec<Vec<usize>>,
    trajectory: Option<Vec<Vec<Vec<f64>>>>,
}

impl Tracker {
    fn new(b: usize, record: bool) -> Self {
        Self {
            x_adv: vec![None; b],
            first: vec![None; b],
            verdicts: vec![Vec::new(); b],
            trajectory: record.then(|| vec![Vec::new(); b]),
        }
    }

    fn record_step(&mut self, x: &Tensor) {
        if let Some(tr) = &mut self.trajectory {
            for (i, rows) in tr.iter_mut().enumerate() {
                rows.push(x.row(i).to_vec());
            }
        }
    }

    fn restart(&mut self) {
        if let Some(tr) = &mut self.trajectory {
            tr.iter_mut().for_each(Vec::clear);
        }
    }

    fn finish(self, specs: &[AttackSpec], last: &Tensor) -> Vec<AttackResult> {
        let mut trajectories = self.trajectory.map(|t| t.into_iter().map(Some).collect::<Vec<_>>());
        specs
            .iter()
            .enumerate()
            .zip(self.x_adv.into_iter().zip(self.first).zip(self.verdicts))
            .map(|((i, spec), ((adv, first), verdicts))| AttackResult {
                spec: *spec,
                success: adv.is_some(),
                x0: adv.unwrap_or_else(|| last.row(i).to_vec()),
                first_success: first,
                verdicts,
                trajectory: trajectories.as_mut().and_then(|t| t[i].take()),
            })
            .collect()
    }
}

fn check_attack_inputs(
    denoiser: &dyn NoisePredictor,
    classifier: &dyn TargetClassifier,
    specs: &[AttackSpec],
    cfg: &GuidanceConfig,
    rngs: &[StreamRng],
) -> Result<()> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(Error::Empty("attack batch"));
    }
    if specs.len() != rngs.len() {
        return Err(Error::InvalidTensor(format!(
            "{} attack specs but {} random streams",
            specs.len(),
            rngs.len()
        )));
    }
    if denoiser.data_dim() != classifier.data_dim() {
        return Err(Error::Architecture(format!(
            "denoiser dimension {} vs classifier dimension {}",
            denoiser.data_dim(),
            classifier.data_dim()
        )));
    }
    for s in specs {
        s.validate(cfg.mode, classifier.num_classes())?;
        if s.y >= denoiser.num_classes() {
            return Err(Error::Label {
                label: s.y,
                classes: denoiser.num_classes(),
            });
        }
    }
    Ok(())
}

fn finite_or(x: &Tensor, restart: usize, t: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::AttackNonFinite { restart, t })
    }
}

/// Shared restart loop; `chain` runs one reverse pass from `x_T` to `x_0`.
fn restart_loop<F>(
    classifier: &dyn TargetClassifier,
    specs: &[AttackSpec],
    cfg: &GuidanceConfig,
    factor: f64,
    mut x_t: Tensor,
    mut chain: F,
) -> Result<Vec<AttackResult>>
where
    F: FnMut(usize, &Tensor, &mut Tracker) -> Result<Tensor>,
{
    let target = GuidanceTarget::new(specs, cfg.mode);
    let mut tracker = Tracker::new(specs.len(), cfg.record_trajectory);
    let mut last = x_t.clone();
    for restart in 0..cfg.restarts {
        tracker.restart();
        let x0 = chain(restart, &x_t, &mut tracker)?;
        let verdicts = classifier.predict(&x0)?;
        x_t = noise_guidance_update(classifier, &x_t, &x0, &target, cfg.a, factor)?;
        finite_or(&x_t, restart, 0)?;
        for (i, (spec, &v)) in specs.iter().zip(&verdicts).enumerate() {
            tracker.verdicts[i].push(v);
            if spec.is_success(cfg.mode, v) {
                tracker.x_adv[i] = Some(x0.row(i).to_vec());
                tracker.first[i].get_or_insert(restart);
            }
        }
        last = x0;
    }
    Ok(tracker.finish(specs, &last))
}

/// DDPM adversarial sampling for a batch of attacks, one stream per attack.
pub fn advdiff_ddpm_batch(
    denoiser: &dyn NoisePredictor,
    classifier: &dyn TargetClassifier,
    specs: &[AttackSpec],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    rngs: &mut [StreamRng],
) -> Result<Vec<AttackResult>> {
    check_attack_inputs(denoiser, classifier, specs, cfg, rngs)?;
    let d = denoiser.data_dim();
    let labels: Vec<usize> = specs.iter().map(|s| s.y).collect();
    let target = GuidanceTarget::new(specs, cfg.mode);
    let factor = cfg.noise_factor(SamplerKind::Ddpm, sched);
    let x_t = initial_noise(rngs, d);
    restart_loop(classifier, specs, cfg, factor, x_t, |restart, x_start, tracker| {
        let mut x = x_start.clone();
        tracker.record_step(&x);
        for t in (1..=sched.steps()).rev() {
            let eps = guided_noise(denoiser, &x, t, &labels, cfg.w)?;
            let z = step_noise(rngs, d, t);
            x = ddpm_step(&x, t, &eps, sched, &z)?;
            x = adversarial_guidance_step(classifier, &x, t, &target, cfg.s, cfg.t_star, sched)?;
            finite_or(&x, restart, t)?;
            tracker.record_step(&x);
        }
        Ok(x)
    })
}

/// DDIM adversarial sampling: the adversarial gradient enters through the
/// noise prediction, `eps - sign * s * sqrt(1 - alpha_bar_t) * grad`.
pub fn advdiff_ddim_batch(
    denoiser: &dyn NoisePredictor,
    classifier: &dyn TargetClassifier,
    specs: &[AttackSpec],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    steps: usize,
    rngs: &mut [StreamRng],
) -> Result<Vec<AttackResult>> {
    check_attack_inputs(denoiser, classifier, specs, cfg, rngs)?;
    let ts = ddim_timesteps(sched.steps(), steps)?;
    let labels: Vec<usize> = specs.iter().map(|s| s.y).collect();
    let target = GuidanceTarget::new(specs, cfg.mode);
    let factor = cfg.noise_factor(SamplerKind::Ddim { steps }, sched);
    let x_t = initial_noise(rngs, denoiser.data_dim());
    restart_loop(classifier, specs, cfg, factor, x_t, |restart, x_start, tracker| {
        let mut x = x_start.clone();
        tracker.record_step(&x);
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let mut eps = guided_noise(denoiser, &x, t, &labels, cfg.w)?;
            if guidance_active(t, cfg.t_star, sched.steps()) {
                eps = classifier_guided_epsilon(&eps, &x, classifier, &target.labels, t, sched, target.sign * cfg.s)?;
            }
            x = ddim_step(&x, t, t_prev, &eps, sched)?;
            finite_or(&x, restart, t)?;
            tracker.record_step(&x);
        }
        Ok(x)
    })
}

/// Single DDPM attack.
pub fn advdiff_ddpm(
    denoiser: &dyn NoisePredictor,
    classifier: &dyn TargetClassifier,
    spec: AttackSpec,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<AttackResult> {
    let mut rngs = [rng.clone()];
    let out = advdiff_ddpm_batch(denoiser, classifier, &[spec], cfg, sched, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one result"))
}

/// Single DDIM attack.
pub fn advdiff_ddim(
    denoiser: &dyn NoisePredictor,
    classifier: &dyn TargetClassifier,
    spec: AttackSpec,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut StreamRng,
) -> Result<AttackResult> {
    let mut rngs = [rng.clone()];
    let out = advdiff_ddim_batch(denoiser, classifier, &[spec], cfg, sched, steps, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one result"))
}

/// Runs attack `i` on stream `(master_seed, ATTACK + first_index + i)`,
/// in batches of `chunk` attacks spread over the rayon pool. Output order
/// follows `specs`, and the results do not depend on `chunk`.
#[allow(clippy::too_many_arguments)]
pub fn run_attacks(
    denoiser: &dyn NoisePredictor,
    classifier: &dyn TargetClassifier,
    specs: &[AttackSpec],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    sampler: SamplerKind,
    master_seed: u64,
    chunk: usize,
) -> Result<Vec<AttackResult>> {
    if specs.is_empty() {
        return Err(Error::Empty("attack list"));
    }
    let chunk = chunk.max(1);
    let batches: Vec<Result<Vec<AttackResult>>> = specs
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, batch)| {
            let mut rngs: Vec<StreamRng> = (0..batch.len())
                .map(|j| attack_stream(master_seed, (c * chunk + j) as u64))
                .collect();
            match sampler {
                SamplerKind::Ddpm => advdiff_ddpm_batch(denoiser, classifier, batch, cfg, sched, &mut rngs),
                SamplerKind::Ddim { steps } => {
                    advdiff_ddim_batch(denoiser, classifier, batch, cfg, sched, steps, &mut rngs)
                }
            }
        })
        .collect();
    let mut out = Vec::with_capacity(specs.len());
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}

/// Random stream of attack `index` under `master_seed`.
pub fn attack_stream(master_seed: u64, index: u64) -> StreamRng {
    rng::stream(master_seed, rng::domain::ATTACK + index)
}
