use std::f64::consts::PI;

use rand::Rng;

use super::mlp::{Mlp, MlpVars};
use super::{Label, NoisePredictor};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Tensor, Var};
use crate::rng::normal_vec;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserArch {
    pub data_dim: usize,
    pub classes: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Number of sinusoid frequencies; the time encoding has twice as many
    /// features.
    pub time_freqs: usize,
    /// Schedule length `T` used to normalize timesteps.
    pub steps: usize,
    pub activation: Activation,
}

impl DenoiserArch {
    pub fn ring_default(classes: usize, steps: usize) -> Self {
        Self {
            data_dim: 2,
            classes,
            hidden: vec![128, 128, 128],
            embed_dim: 16,
            time_freqs: 6,
            steps,
            activation: Activation::Silu,
        }
    }

    pub fn input_width(&self) -> usize {
        self.data_dim + self.embed_dim + 2 * self.time_freqs
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.classes == 0 || self.embed_dim == 0 || self.steps == 0 {
            return Err(Error::Config(format!("degenerate denoiser architecture {self:?}")));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// `[sin(pi 2^k t/T), cos(pi 2^k t/T)]` for `k < freqs`.
pub fn time_features(t: usize, steps: usize, freqs: usize) -> Vec<f64> {
    let u = t as f64 / steps as f64;
    let mut out = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let w = PI * f64::from(1u32 << k) * u;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

/// Conditional noise predictor `eps(x_t, t, y)`.
///
/// Labels are looked up in an embedding table with `K + 1` rows; the last
/// row is the null token used for unconditional prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    pub embedding: Tensor,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct DenoiserVars {
    pub embedding: Var,
    pub mlp: MlpVars,
}

impl DenoiserParams {
    pub fn zeros(arch: DenoiserArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            embedding: Tensor::zeros(&[arch.classes + 1, arch.embed_dim]),
            mlp: Mlp::zeros(arch.input_width(), &arch.hidden, arch.data_dim, arch.activation),
            arch,
        })
    }

    pub fn random<R: Rng + ?Sized>(arch: DenoiserArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let embedding = Tensor::matrix(
            arch.classes + 1,
            arch.embed_dim,
            normal_vec(rng, (arch.classes + 1) * arch.embed_dim),
        );
        let mlp = Mlp::random(arch.input_width(), &arch.hidden, arch.data_dim, arch.activation, rng);
        Ok(Self { arch, embedding, mlp })
    }

    pub fn label_row(&self, label: Label) -> Result<usize> {
        match label {
            Label::Class(k) if k < self.arch.classes => Ok(k),
            Label::Class(k) => Err(Error::Label {
                label: k,
                classes: self.arch.classes,
            }),
            Label::Null => Ok(self.arch.classes),
        }
    }

    fn check_inputs(&self, x: &Tensor, ts: &[usize], labels: &[Label]) -> Result<Vec<usize>> {
        if x.cols() != self.arch.data_dim {
            return Err(Error::ShapeMismatch {
                op: "denoiser_forward",
                left: x.shape().to_vec(),
                right: vec![self.arch.data_dim],
            });
        }
        if labels.len() != x.rows() || ts.len() != x.rows() {
            return Err(Error::InvalidTensor(format!(
                "denoiser got {} rows, {} labels, {} timesteps",
                x.rows(),
                labels.len(),
                ts.len()
            )));
        }
        for &t in ts {
            if t < 1 || t > self.arch.steps {
                return Err(Error::Timestep {
                    t,
                    lo: 1,
                    hi: self.arch.steps,
                });
            }
        }
        labels.iter().map(|&l| self.label_row(l)).collect()
    }

    fn time_block(&self, ts: &[usize]) -> Tensor {
        let f = 2 * self.arch.time_freqs;
        let mut data = Vec::with_capacity(ts.len() * f);
        for &t in ts {
            data.extend(time_features(t, self.arch.steps, self.arch.time_freqs));
        }
        Tensor::matrix(ts.len(), f, data)
    }

    /// Batched prediction with a per-row timestep.
    pub fn forward_rows(&self, x: &Tensor, ts: &[usize], labels: &[Label]) -> Result<Tensor> {
        let rows = self.check_inputs(x, ts, labels)?;
        let width = self.arch.input_width();
        let freqs = self.arch.time_freqs;
        let mut input = Vec::with_capacity(x.rows() * width);
        for (i, (&r, &t)) in rows.iter().zip(ts).enumerate() {
            input.extend_from_slice(x.row(i));
            input.extend_from_slice(self.embedding.row(r));
            input.extend(time_features(t, self.arch.steps, freqs));
        }
        self.mlp.forward(&Tensor::matrix(x.rows(), width, input))
    }

    pub fn register(&self, tape: &mut Tape) -> DenoiserVars {
        DenoiserVars {
            embedding: tape.leaf(self.embedding.clone()),
            mlp: self.mlp.register(tape),
        }
    }

    /// Recorded forward pass for training.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &DenoiserVars,
        x: Var,
        ts: &[usize],
        labels: &[Label],
    ) -> Result<Var> {
        let rows = self.check_inputs(tape.value(x), ts, labels)?;
        let emb = tape.gather_rows(vars.embedding, rows);
        let time = tape.leaf(self.time_block(ts));
        let input = tape.concat_cols(vec![x, emb, time]);
        Ok(self.mlp.forward_on_tape(tape, &vars.mlp, input))
    }
}

impl NoisePredictor for DenoiserParams {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn predict(&self, x: &Tensor, t: usize, labels: &[Label]) -> Result<Tensor> {
        let ts = vec![t; x.rows()];
        self.forward_rows(x, &ts, labels)
    }

    fn predict_rows(&self, x: &Tensor, ts: &[usize], labels: &[Label]) -> Result<Tensor> {
        self.forward_rows(x, ts, labels)
    }
}
