//! Benign reverse samplers: classifier-free DDPM and DDIM, plus a
//! classifier-guided DDPM baseline.
//!
//! Every sampler takes one random stream per row and draws from row `i`'s
//! stream in a fixed order (`x_T` first, then one `z` per step with `t > 1`),
//! so batching does not change any individual sample.

use crate::diffusion::{cfg_epsilon, classifier_guided_epsilon, ddim_step, ddim_timesteps, ddpm_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{Label, NoisePredictor, TargetClassifier};
use crate::numerics::Tensor;
use crate::rng::{normal_vec, StreamRng};

/// Current iterate of a batch of reverse chains.
#[derive(Debug, Clone)]
pub struct SampleState {
    pub x: Tensor,
    pub t: usize,
    pub labels: Vec<usize>,
}

/// Draws `x_T ~ N(0, I)`, one row per stream.
pub fn initial_noise(rngs: &mut [StreamRng], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rngs.len() * dim);
    for rng in rngs.iter_mut() {
        data.extend(normal_vec(rng, dim));
    }
    Tensor::matrix(rngs.len(), dim, data)
}

/// Per-row step noise; zeros at `t = 1` without consuming randomness.
pub fn step_noise(rngs: &mut [StreamRng], dim: usize, t: usize) -> Tensor {
    if t <= 1 {
        return Tensor::zeros(&[rngs.len(), dim]);
    }
    initial_noise(rngs, dim)
}

/// `(1 + w) eps(x, y) - w eps(x, null)`, evaluated as one stacked batch.
pub fn guided_noise(denoiser: &dyn NoisePredictor, x: &Tensor, t: usize, labels: &[usize], w: f64) -> Result<Tensor> {
    let b = x.rows();
    let d = x.cols();
    let mut stacked = Vec::with_capacity(2 * x.len());
    stacked.extend_from_slice(x.data());
    stacked.extend_from_slice(x.data());
    let mut conds: Vec<Label> = labels.iter().map(|&y| Label::Class(y)).collect();
    conds.extend(std::iter::repeat(Label::Null).take(b));
    let both = denoiser.predict(&Tensor::matrix(2 * b, d, stacked), t, &conds)?;
    let (c, u) = both.data().split_at(b * d);
    let cond = Tensor::matrix(b, d, c.to_vec());
    let uncond = Tensor::matrix(b, d, u.to_vec());
    cfg_epsilon(&cond, &uncond, w)
}

fn check_batch(denoiser: &dyn NoisePredictor, labels: &[usize], rngs: &[StreamRng]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Empty("sampler batch"));
    }
    if labels.len() != rngs.len() {
        return Err(Error::InvalidTensor(format!(
            "{} labels but {} random streams",
            labels.len(),
            rngs.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= denoiser.num_classes()) {
        return Err(Error::Label {
            label: bad,
            classes: denoiser.num_classes(),
        });
    }
    Ok(())
}

/// Ancestral classifier-free DDPM sampling over all `T` steps.
pub fn sample_ddpm(
    denoiser: &dyn NoisePredictor,
    labels: &[usize],
    w: f64,
    sched: &NoiseSchedule,
    rngs: &mut [StreamRng],
) -> Result<Tensor> {
    check_batch(denoiser, labels, rngs)?;
    let d = denoiser.data_dim();
    let x_t = initial_noise(rngs, d);
    sample_ddpm_from(denoiser, labels, w, sched, rngs, x_t)
}

pub fn sample_ddpm_from(
    denoiser: &dyn NoisePredictor,
    labels: &[usize],
    w: f64,
    sched: &NoiseSchedule,
    rngs: &mut [StreamRng],
    x_t: Tensor,
) -> Result<Tensor> {
    let d = denoiser.data_dim();
    let mut state = SampleState {
        x: x_t,
        t: sched.steps(),
        labels: labels.to_vec(),
    };
    while state.t >= 1 {
        let eps = guided_noise(denoiser, &state.x, state.t, &state.labels, w)?;
        let z = step_noise(rngs, d, state.t);
        state.x = ddpm_step(&state.x, state.t, &eps, sched, &z)?;
        state.t -= 1;
    }
    Ok(state.x)
}

/// Deterministic classifier-free DDIM sampling over `steps` strided
/// timesteps.
pub fn sample_ddim(
    denoiser: &dyn NoisePredictor,
    labels: &[usize],
    w: f64,
    sched: &NoiseSchedule,
    steps: usize,
    rngs: &mut [StreamRng],
) -> Result<Tensor> {
    check_batch(denoiser, labels, rngs)?;
    let x_t = initial_noise(rngs, denoiser.data_dim());
    sample_ddim_from(denoiser, labels, w, sched, steps, x_t)
}

pub fn sample_ddim_from(
    denoiser: &dyn NoisePredictor,
    labels: &[usize],
    w: f64,
    sched: &NoiseSchedule,
    steps: usize,
    x_t: Tensor,
) -> Result<Tensor> {
    let ts = ddim_timesteps(sched.steps(), steps)?;
    let mut x = x_t;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = guided_noise(denoiser, &x, t, labels, w)?;
        x = ddim_step(&x, t, t_prev, &eps, sched)?;
    }
    Ok(x)
}

/// DDPM with classifier guidance toward `labels` at strength `scale`
/// (the noise-conditional baseline; no classifier-free term when `w = 0`).
pub fn sample_classifier_guided(
    denoiser: &dyn NoisePredictor,
    classifier: &dyn TargetClassifier,
    labels: &[usize],
    w: f64,
    scale: f64,
    sched: &NoiseSchedule,
    rngs: &mut [StreamRng],
) -> Result<Tensor> {
    check_batch(denoiser, labels, rngs)?;
    let d = denoiser.data_dim();
    let mut x = initial_noise(rngs, d);
    for t in (1..=sched.steps()).rev() {
        let eps = guided_noise(denoiser, &x, t, labels, w)?;
        let eps = classifier_guided_epsilon(&eps, &x, classifier, labels, t, sched, scale)?;
        let z = step_noise(rngs, d, t);
        x = ddpm_step(&x, t, &eps, sched, &z)?;
    }
    Ok(x)
}
