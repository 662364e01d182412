//! Run configuration: one TOML file with a section per concern.
//!
//! Every field has a default, so an empty file is a valid configuration of
//! the 8-class ring task. Unknown keys anywhere are rejected. Values are
//! resolved in the order defaults, file, `--preset`, `--seed`, and the
//! resolved configuration is written next to each command's outputs, so
//! passing it back with `--config` reproduces the run.

use std::fs;
use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::advdiff::{GuidanceConfig, SamplerKind};
use crate::data::{make_ring_split, Dataset};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::models::{ClassifierArch, DenoiserArch};
use crate::numerics::Activation;
use crate::training::{PgdConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    MnistPaper,
    ImagenetPaper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream of the run derives from it.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub models: ModelsSection,
    pub denoiser: DenoiserSection,
    pub classifier: ClassifierSection,
    pub train_denoiser: TrainSection,
    pub train_classifier: ClassifierTrainSection,
    pub pgd: PgdSection,
    pub guidance: GuidanceConfig,
    pub attack: AttackSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection::default(),
            schedule: ScheduleSection::default(),
            models: ModelsSection::default(),
            denoiser: DenoiserSection::default(),
            classifier: ClassifierSection::default(),
            train_denoiser: TrainSection::default(),
            train_classifier: ClassifierTrainSection::default(),
            pgd: PgdSection::default(),
            guidance: GuidanceConfig::mnist_paper(),
            attack: AttackSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            verify: VerifySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub classes: usize,
    pub per_class: usize,
    /// Per-class size of the held-out split used for test accuracy.
    pub held_out_per_class: usize,
    pub radius: f64,
    pub gamma: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 250,
            held_out_per_class: 100,
            radius: 2.0,
            gamma: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    /// Checkpoints written by the training commands.
    Trained,
    /// Closed-form denoiser and quadratic classifier for the dataset.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    pub source: ModelSource,
    /// Temperature of the quadratic classifier.
    pub tau: f64,
}

impl Default for ModelsSection {
    fn default() -> Self {
        Self {
            source: ModelSource::Trained,
            tau: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    /// Relative to the output directory.
    pub checkpoint: String,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub time_freqs: usize,
    pub activation: Activation,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let a = DenoiserArch::ring_default(8, 500);
        Self {
            checkpoint: "denoiser.ckpt".into(),
            hidden: a.hidden,
            embed_dim: a.embed_dim,
            time_freqs: a.time_freqs,
            activation: a.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    /// Relative to the output directory.
    pub checkpoint: String,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let a = ClassifierArch::ring_default(8);
        Self {
            checkpoint: "classifier.ckpt".into(),
            hidden: a.hidden,
            activation: a.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub max_final_loss: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.05,
            p_uncond: 0.1,
            max_final_loss: Some(0.4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_final_loss: Option<f64>,
    /// Replace every minibatch by PGD examples (see `[pgd]`).
    pub adversarial: bool,
}

impl Default for ClassifierTrainSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 0.1,
            max_final_loss: None,
            adversarial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdSection {
    /// L-infinity budget; defaults to 0.3 times the data spread.
    pub epsilon: Option<f64>,
    /// Defaults to `epsilon / 4`.
    pub step_size: Option<f64>,
    pub steps: usize,
    /// Random start during adversarial training; evaluation never uses one.
    pub random_start: bool,
}

impl Default for PgdSection {
    fn default() -> Self {
        Self {
            epsilon: None,
            step_size: None,
            steps: 10,
            random_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerName {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetPolicy {
    /// Uniform over the other classes.
    Random,
    /// `y + 1 mod K`.
    Next,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub sampler: SamplerName,
    pub ddim_steps: usize,
    /// Attack `i` generates class `i mod K`.
    pub count: usize,
    pub targets: TargetPolicy,
    /// Attacks per lock-step batch.
    pub chunk: usize,
    /// Worker threads; 0 picks one per core.
    pub threads: usize,
    /// Exit with status 1 when the success rate falls below this.
    pub min_asr: Option<f64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            sampler: SamplerName::Ddpm,
            ddim_steps: 50,
            count: 500,
            targets: TargetPolicy::Random,
            chunk: 16,
            threads: 0,
            min_asr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub sampler: SamplerName,
    pub ddim_steps: usize,
    pub per_class: usize,
    pub w: f64,
    pub chunk: usize,
    pub threads: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            sampler: SamplerName::Ddpm,
            ddim_steps: 50,
            per_class: 100,
            w: 1.0,
            chunk: 16,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Independently trained classifier used as a second label oracle,
    /// relative to the output directory.
    pub oracle_classifier: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub tolerance_scale: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { tolerance_scale: 1.0 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let g = match preset {
            Preset::MnistPaper => GuidanceConfig::mnist_paper(),
            Preset::ImagenetPaper => GuidanceConfig::imagenet_paper(),
        };
        self.guidance.w = g.w;
        self.guidance.s = g.s;
        self.guidance.a = g.a;
        self.guidance.restarts = g.restarts;
        self.guidance.t_star = g.t_star;
        if preset == Preset::MnistPaper {
            self.schedule.steps = 500;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.guidance.validate()?;
        self.denoiser_arch().validate()?;
        self.classifier_arch().validate()?;
        self.train_denoiser_config().validate()?;
        self.train_classifier_config().validate()?;
        if self.dataset.held_out_per_class == 0 {
            return Err(Error::Config("dataset.held_out_per_class must be >= 1".into()));
        }
        if self.attack.count == 0 {
            return Err(Error::Config("attack.count must be >= 1".into()));
        }
        if self.attack.ddim_steps == 0 || self.sample.ddim_steps == 0 {
            return Err(Error::Config("ddim_steps must be >= 1".into()));
        }
        if self.sample.per_class == 0 {
            return Err(Error::Config("sample.per_class must be >= 1".into()));
        }
        if !(self.models.tau > 0.0) {
            return Err(Error::Config(format!("models.tau must be positive, got {}", self.models.tau)));
        }
        if !(self.verify.tolerance_scale > 0.0) {
            return Err(Error::Config("verify.tolerance_scale must be positive".into()));
        }
        if let Some(eps) = self.pgd.epsilon {
            self.pgd_config(eps).validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        make_schedule(s.kind, s.steps, s.beta_start, s.beta_end)
    }

    /// Training split.
    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        make_ring_split(d.classes, d.per_class, d.radius, d.gamma, self.seed, 0)
    }

    pub fn held_out(&self) -> Result<Dataset> {
        let d = &self.dataset;
        make_ring_split(d.classes, d.held_out_per_class, d.radius, d.gamma, self.seed, 1)
    }

    pub fn denoiser_arch(&self) -> DenoiserArch {
        DenoiserArch {
            data_dim: 2,
            classes: self.dataset.classes,
            hidden: self.denoiser.hidden.clone(),
            embed_dim: self.denoiser.embed_dim,
            time_freqs: self.denoiser.time_freqs,
            steps: self.schedule.steps,
            activation: self.denoiser.activation,
        }
    }

    pub fn classifier_arch(&self) -> ClassifierArch {
        ClassifierArch {
            data_dim: 2,
            classes: self.dataset.classes,
            hidden: self.classifier.hidden.clone(),
            activation: self.classifier.activation,
        }
    }

    pub fn train_denoiser_config(&self) -> TrainConfig {
        let t = &self.train_denoiser;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            p_uncond: t.p_uncond,
            seed: self.seed,
            max_final_loss: t.max_final_loss,
        }
    }

    pub fn train_classifier_config(&self) -> TrainConfig {
        let t = &self.train_classifier;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            p_uncond: 0.0,
            seed: self.seed,
            max_final_loss: t.max_final_loss,
        }
    }

    /// Fills in the PGD budget from the training data when unset.
    pub fn resolve_pgd(&mut self, data: &Dataset) {
        if self.pgd.epsilon.is_none() {
            self.pgd.epsilon = Some(0.3 * data_spread(data));
        }
        if self.pgd.step_size.is_none() {
            self.pgd.step_size = self.pgd.epsilon.map(|e| e / 4.0);
        }
    }

    pub fn pgd_config(&self, epsilon: f64) -> PgdConfig {
        PgdConfig {
            epsilon,
            step_size: self.pgd.step_size.unwrap_or(epsilon / 4.0),
            steps: self.pgd.steps,
            random_start: self.pgd.random_start,
        }
    }

    pub fn attack_sampler(&self) -> SamplerKind {
        match self.attack.sampler {
            SamplerName::Ddpm => SamplerKind::Ddpm,
            SamplerName::Ddim => SamplerKind::Ddim {
                steps: self.attack.ddim_steps,
            },
        }
    }
}

/// Root mean per-coordinate variance of the samples.
pub fn data_spread(data: &Dataset) -> f64 {
    let n = data.len() as f64;
    let d = data.dim();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..data.len()).map(|i| data.x.row(i)[j]).sum::<f64>() / n;
        total += (0..data.len()).map(|i| (data.x.row(i)[j] - mean).powi(2)).sum::<f64>() / n;
    }
    (total / d as f64).sqrt()
}
