//! Training loops: the denoiser under the noise-prediction loss with label
//! dropout, the classifier under cross-entropy, and PGD attacks and
//! PGD adversarial training.
//!
//! All loops use plain SGD with a fixed learning rate and draw every random
//! quantity from one stream seeded by the config, so a run is reproducible
//! bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffusion::{forward_marginal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{
    ClassifierArch, ClassifierParams, DenoiserArch, DenoiserParams, Label, NoisePredictor, TargetClassifier,
};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::rng::{domain, normal_vec, stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a label with the null token.
    #[serde(default = "default_p_uncond")]
    pub p_uncond: f64,
    pub seed: u64,
    /// Fail when the last epoch's mean loss is not below this bound.
    #[serde(default)]
    pub max_final_loss: Option<f64>,
}

fn default_p_uncond() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond must lie in [0, 1], got {}", self.p_uncond)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    /// L-infinity budget.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) || self.step_size > self.epsilon {
            return Err(Error::Config(format!(
                "PGD needs 0 <= step_size <= epsilon, got step_size={}, epsilon={}",
                self.step_size, self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("PGD steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of a training curve; `accuracy` is only set for classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained<P> {
    pub params: P,
    pub curve: Vec<CurvePoint>,
}

impl<P> Trained<P> {
    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |c| c.loss)
    }
}

pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in curve {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Inputs of one noise-prediction loss evaluation.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub x_t: Tensor,
    pub eps: Tensor,
    pub ts: Vec<usize>,
    pub labels: Vec<Label>,
}

impl NoisyBatch {
    /// Per row: `t ~ U{1..T}`, `eps ~ N(0, I)`, then the dropout coin.
    pub fn draw<R: Rng + ?Sized>(
        x0: &Tensor,
        labels: &[usize],
        sched: &NoiseSchedule,
        p_uncond: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if x0.rows() == 0 || labels.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        if labels.len() != x0.rows() {
            return Err(Error::InvalidTensor(format!("{} labels for {} rows", labels.len(), x0.rows())));
        }
        let d = x0.cols();
        let mut x_t = Vec::with_capacity(x0.len());
        let mut eps = Vec::with_capacity(x0.len());
        let mut ts = Vec::with_capacity(labels.len());
        let mut conds = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            let t = rng.random_range(1..=sched.steps());
            let e = normal_vec(rng, d);
            let drop = rng.random::<f64>() < p_uncond;
            let row = Tensor::matrix(1, d, x0.row(i).to_vec());
            let noisy = forward_marginal(&row, t, &Tensor::matrix(1, d, e.clone()), sched)?;
            x_t.extend(noisy.into_data());
            eps.extend(e);
            ts.push(t);
            conds.push(if drop { Label::Null } else { Label::Class(y) });
        }
        Ok(Self {
            x_t: Tensor::matrix(labels.len(), d, x_t),
            eps: Tensor::matrix(labels.len(), d, eps),
            ts,
            labels: conds,
        })
    }
}

/// Monte-Carlo estimate of `mean_i |eps_i - eps_theta(x_t, t, y')|^2` on a
/// freshly drawn noisy batch.
pub fn ddpm_loss<R: Rng + ?Sized>(
    denoiser: &dyn NoisePredictor,
    x0: &Tensor,
    labels: &[usize],
    sched: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Result<f64> {
    let batch = NoisyBatch::draw(x0, labels, sched, p_uncond, rng)?;
    let pred = denoiser.predict_rows(&batch.x_t, &batch.ts, &batch.labels)?;
    let diff = pred.sub(&batch.eps)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / batch.ts.len() as f64)
}

/// Gradients of a denoiser loss, aligned with [`DenoiserParams`].
#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub embedding: Tensor,
    pub mlp: Vec<Tensor>,
}

fn collect(grads: &mut Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn mlp_var_list(vars: &crate::models::MlpVars) -> Vec<Var> {
    vars.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
}

/// Loss and parameter gradients on a fixed noisy batch.
pub fn denoiser_loss_and_grad(p: &DenoiserParams, batch: &NoisyBatch) -> Result<(f64, DenoiserGrads)> {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let x = tape.leaf(batch.x_t.clone());
    let pred = p.forward_on_tape(&mut tape, &vars, x, &batch.ts, &batch.labels)?;
    let target = tape.leaf(batch.eps.clone());
    let diff = tape.sub(pred, target);
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / batch.ts.len() as f64);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((
        value,
        DenoiserGrads {
            embedding: grads.take(vars.embedding),
            mlp: collect(&mut grads, &mlp_var_list(&vars.mlp)),
        },
    ))
}

/// Mean cross-entropy and parameter gradients, plus the number of correct
/// top-1 predictions.
pub fn classifier_loss_and_grad(p: &ClassifierParams, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>, usize)> {
    let mut tape = Tape::new();
    let vars = p.mlp.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let logits = p.mlp.forward_on_tape(&mut tape, &vars, xv);
    let correct = tape
        .value(logits)
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    let lp = tape.log_softmax(logits);
    let picked = tape.pick_per_row(lp, labels.to_vec());
    let mean = tape.mean(picked);
    let loss = tape.scale(mean, -1.0);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((value, collect(&mut grads, &mlp_var_list(&vars)), correct))
}

fn sgd(params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
    for (p, g) in params.into_iter().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
}

fn check_dataset(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(())
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

fn finish<P>(params: P, curve: Vec<CurvePoint>, config: &TrainConfig) -> Result<Trained<P>> {
    let out = Trained { params, curve };
    if let Some(bound) = config.max_final_loss {
        let loss = out.final_loss();
        if !(loss < bound) {
            return Err(Error::NotConverged { loss, bound });
        }
    }
    Ok(out)
}

/// Shuffled minibatches of row indices for one epoch.
fn epoch_batches(n: usize, batch: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Trains a fresh denoiser; initialization, shuffling and noise all come
/// from the `TRAIN` stream of `config.seed`.
pub fn train_denoiser(
    config: &TrainConfig,
    arch: DenoiserArch,
    data: &Dataset,
    sched: &NoiseSchedule,
) -> Result<Trained<DenoiserParams>> {
    config.validate()?;
    check_dataset(data)?;
    if arch.steps != sched.steps() || arch.data_dim != data.dim() || arch.classes != data.classes() {
        return Err(Error::Architecture(format!(
            "denoiser expects D={}, K={}, T={} but data has D={}, K={} and schedule T={}",
            arch.data_dim,
            arch.classes,
            arch.steps,
            data.dim(),
            data.classes(),
            sched.steps()
        )));
    }
    let mut rng = stream(config.seed, domain::TRAIN);
    let mut p = DenoiserParams::random(arch, &mut rng)?;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut count = 0;
        for idx in epoch_batches(data.len(), config.batch_size, &mut rng) {
            let (x0, labels) = data.gather(&idx);
            let batch = NoisyBatch::draw(&x0, &labels, sched, config.p_uncond, &mut rng)?;
            let (loss, g) = denoiser_loss_and_grad(&p, &batch).map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let mut params = vec![&mut p.embedding];
            params.extend(p.mlp.params_mut());
            let mut grads = vec![g.embedding];
            grads.extend(g.mlp);
            sgd(params, &grads, config.lr);
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        curve.push(CurvePoint {
            epoch,
            loss: total / count as f64,
            accuracy: None,
        });
    }
    finish(p, curve, config)
}

/// Supervised cross-entropy training on clean data.
pub fn train_classifier(config: &TrainConfig, arch: ClassifierArch, data: &Dataset) -> Result<Trained<ClassifierParams>> {
    fit_classifier(config, arch, data, None)
}

/// PGD adversarial training: every minibatch is replaced by PGD examples
/// against the current weights before the gradient step.
pub fn adversarial_train(
    config: &TrainConfig,
    pgd: &PgdConfig,
    arch: ClassifierArch,
    data: &Dataset,
) -> Result<Trained<ClassifierParams>> {
    pgd.validate()?;
    fit_classifier(config, arch, data, Some(pgd))
}

fn fit_classifier(
    config: &TrainConfig,
    arch: ClassifierArch,
    data: &Dataset,
    pgd: Option<&PgdConfig>,
) -> Result<Trained<ClassifierParams>> {
    config.validate()?;
    check_dataset(data)?;
    if arch.data_dim != data.dim() || arch.classes != data.classes() {
        return Err(Error::Architecture(format!(
            "classifier expects D={}, K={} but data has D={}, K={}",
            arch.data_dim,
            arch.classes,
            data.dim(),
            data.classes()
        )));
    }
    let mut rng = stream(config.seed, domain::TRAIN);
    let mut attack_rng = stream(config.seed, domain::TRAIN + 1);
    let mut p = ClassifierParams::random(arch, &mut rng)?;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut correct = 0;
        let mut count = 0;
        for idx in epoch_batches(data.len(), config.batch_size, &mut rng) {
            let (mut x, labels) = data.gather(&idx);
            if let Some(pgd) = pgd {
                x = pgd_attack(&p, &x, &labels, pgd, &mut attack_rng)?;
            }
            let (loss, grads, ok) = classifier_loss_and_grad(&p, &x, &labels).map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            sgd(p.mlp.params_mut(), &grads, config.lr);
            total += loss * idx.len() as f64;
            correct += ok;
            count += idx.len();
        }
        curve.push(CurvePoint {
            epoch,
            loss: total / count as f64,
            accuracy: Some(correct as f64 / count as f64),
        });
    }
    finish(p, curve, config)
}

/// Untargeted L-infinity PGD: ascend the sign of the cross-entropy gradient
/// and project back onto the `epsilon` box around `x` after every step.
pub fn pgd_attack<R: Rng + ?Sized>(
    f: &dyn TargetClassifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut adv = x.clone();
    if cfg.random_start && eps > 0.0 {
        let data: Vec<f64> = x.data().iter().map(|&v| v + rng.random_range(-eps..=eps)).collect();
        adv = Tensor::new(x.shape().to_vec(), data)?;
    }
    for _ in 0..cfg.steps {
        let g = f.log_prob_grad(&adv, labels)?;
        let data: Vec<f64> = adv
            .data()
            .iter()
            .zip(g.data())
            .zip(x.data())
            .map(|((&a, &gi), &x0)| {
                let stepped = a - cfg.step_size * sign(gi);
                stepped.clamp(x0 - eps, x0 + eps)
            })
            .collect();
        adv = Tensor::new(x.shape().to_vec(), data)?;
    }
    Ok(adv)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Top-1 accuracy of `f` on `(x, labels)`.
pub fn accuracy(f: &dyn TargetClassifier, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy batch"));
    }
    let pred = f.predict(x)?;
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}
