use rand::Rng;

use super::mlp::Mlp;
use super::TargetClassifier;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierArch {
    pub data_dim: usize,
    pub classes: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl ClassifierArch {
    pub fn ring_default(classes: usize) -> Self {
        Self {
            data_dim: 2,
            classes,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.classes == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config(format!("degenerate classifier architecture {self:?}")));
        }
        Ok(())
    }
}

/// MLP classifier producing `K` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub arch: ClassifierArch,
    pub mlp: Mlp,
}

impl ClassifierParams {
    pub fn zeros(arch: ClassifierArch) -> Result<Self> {
        arch.validate()?;
        let mlp = Mlp::zeros(arch.data_dim, &arch.hidden, arch.classes, arch.activation);
        Ok(Self { arch, mlp })
    }

    pub fn random<R: Rng + ?Sized>(arch: ClassifierArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mlp = Mlp::random(arch.data_dim, &arch.hidden, arch.classes, arch.activation, rng);
        Ok(Self { arch, mlp })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward(x)
    }

    fn check_labels(&self, x: &Tensor, labels: &[usize]) -> Result<()> {
        if labels.len() != x.rows() {
            return Err(Error::InvalidTensor(format!(
                "{} labels for {} rows",
                labels.len(),
                x.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.arch.classes) {
            return Err(Error::Label {
                label: bad,
                classes: self.arch.classes,
            });
        }
        Ok(())
    }

    /// Input gradient of the summed cross-entropy `-sum_i log p(labels[i] | x_i)`.
    pub fn cross_entropy_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        Ok(self.log_prob_grad(x, labels)?.scale(-1.0))
    }
}

impl TargetClassifier for ClassifierParams {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn log_probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logits(x)?.log_softmax_rows())
    }

    /// Rows do not interact, so the gradient of the summed selected
    /// log-probabilities is the per-row gradient.
    fn log_prob_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.check_labels(x, labels)?;
        if x.cols() != self.arch.data_dim {
            return Err(Error::ShapeMismatch {
                op: "classifier_input_grad",
                left: x.shape().to_vec(),
                right: vec![self.arch.data_dim],
            });
        }
        let mut tape = Tape::new();
        let vars = self.mlp.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let logits = self.mlp.forward_on_tape(&mut tape, &vars, xv);
        let lp = tape.log_softmax(logits);
        let picked = tape.pick_per_row(lp, labels.to_vec());
        let total = tape.sum(picked);
        let grads = tape.backward(total)?;
        Ok(grads.get(xv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use crate::rng::stream;

    fn small() -> ClassifierArch {
        ClassifierArch {
            data_dim: 3,
            classes: 4,
            hidden: vec![12, 12],
            activation: Activation::Silu,
        }
    }

    #[test]
    fn zero_weights_uniform_and_flat() {
        let c = ClassifierParams::zeros(small()).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.3, -2.0, 1.0]);
        let lp = c.log_probs(&x).unwrap();
        for v in lp.data() {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
        let g = c.log_prob_grad(&x, &[2]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probabilities_normalized() {
        let c = ClassifierParams::random(small(), &mut stream(9, 0)).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.3, -2.0, 1.0, 4.0, 0.0, -1.0]);
        let lp = c.log_probs(&x).unwrap();
        for i in 0..2 {
            let total: f64 = lp.row(i).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shifting_output_bias_leaves_log_probs() {
        let mut c = ClassifierParams::random(small(), &mut stream(9, 1)).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.3, -2.0, 1.0]);
        let before = c.log_probs(&x).unwrap();
        let last = c.mlp.layers.last_mut().unwrap();
        last.bias = last.bias.map(|b| b + 17.5);
        let after = c.log_probs(&x).unwrap();
        assert!(relative_error(&after, &before, 1.0) < 1e-12);
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let c = ClassifierParams::random(small(), &mut stream(9, 2)).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.3, -0.7, 1.1]);
        let g = c.log_prob_grad(&x, &[1]).unwrap();
        let fd = finite_diff_grad(|p| Ok(c.log_probs(p)?.data()[1]), &x, 1e-5).unwrap();
        assert!(relative_error(&g, &fd, 1e-8) < 1e-4);
    }

    #[test]
    fn label_out_of_range() {
        let c = ClassifierParams::zeros(small()).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.0; 3]);
        assert!(c.log_prob_grad(&x, &[4]).is_err());
    }
}
