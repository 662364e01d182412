//! Conditional noise predictor, target classifier and checkpoint files.

mod checkpoint;
mod classifier;
mod denoiser;
mod mlp;

pub use checkpoint::{
    load_checkpoint, load_classifier, load_denoiser, save_checkpoint, save_classifier, save_denoiser, Checkpoint,
    ModelKind, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use classifier::{ClassifierArch, ClassifierParams};
pub use denoiser::{time_features, DenoiserArch, DenoiserParams, DenoiserVars};
pub use mlp::{Dense, Mlp, MlpVars};

use crate::error::Result;
use crate::numerics::Tensor;

/// Conditioning input of the noise predictor: a class or the null token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    Null,
}

/// Anything that predicts the injected noise `eps(x_t, t, y)`.
///
/// `x` holds one sample per row; `labels` has one entry per row.
pub trait NoisePredictor: Sync {
    fn data_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn predict(&self, x: &Tensor, t: usize, labels: &[Label]) -> Result<Tensor>;

    /// Prediction with a separate timestep per row.
    fn predict_rows(&self, x: &Tensor, ts: &[usize], labels: &[Label]) -> Result<Tensor> {
        if ts.len() != x.rows() || labels.len() != x.rows() {
            return Err(crate::Error::InvalidTensor(format!(
                "{} rows with {} timesteps and {} labels",
                x.rows(),
                ts.len(),
                labels.len()
            )));
        }
        let d = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for (i, (&t, &label)) in ts.iter().zip(labels).enumerate() {
            let row = Tensor::matrix(1, d, x.row(i).to_vec());
            out.extend(self.predict(&row, t, &[label])?.into_data());
        }
        Ok(Tensor::matrix(x.rows(), self.data_dim(), out))
    }
}

/// A classifier `p_f(y | x)` with input gradients.
pub trait TargetClassifier: Sync {
    fn data_dim(&self) -> usize;
    fn num_classes(&self) -> usize;

    /// Row-wise log-probabilities, `B x K`.
    fn log_probs(&self, x: &Tensor) -> Result<Tensor>;

    /// `grad_x log p(labels[i] | x_i)` for each row, `B x D`.
    fn log_prob_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor>;

    /// Top-1 class per row.
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.log_probs(x)?.argmax_rows())
    }
}

impl<T: NoisePredictor + ?Sized> NoisePredictor for &T {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn predict(&self, x: &Tensor, t: usize, labels: &[Label]) -> Result<Tensor> {
        (**self).predict(x, t, labels)
    }
    fn predict_rows(&self, x: &Tensor, ts: &[usize], labels: &[Label]) -> Result<Tensor> {
        (**self).predict_rows(x, ts, labels)
    }
}
