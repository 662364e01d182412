use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{matmul_into, Activation, Tape, Tensor, Var};
use crate::rng::normal_vec;

/// Fully connected layer; `weight` is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Multilayer perceptron with a shared hidden activation and a linear
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Tape handles for every weight and bias, in layer order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl Mlp {
    fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(input);
        w.extend_from_slice(hidden);
        w.push(output);
        w
    }

    pub fn zeros(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let widths = Self::widths(input, hidden, output);
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self { layers, activation }
    }

    /// LeCun-normal weights, zero biases.
    pub fn random<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let widths = Self::widths(input, hidden, output);
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = (1.0 / w[0] as f64).sqrt();
                let data = normal_vec(rng, w[0] * w[1]).into_iter().map(|v| v * std).collect();
                Dense {
                    weight: Tensor::matrix(w[0], w[1], data),
                    bias: Tensor::zeros(&[w[1]]),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.cols())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Batched forward pass without recording; `x` is `B x in`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                left: x.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let rows = x.rows();
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, n) = (layer.weight.rows(), layer.weight.cols());
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                out.extend_from_slice(layer.bias.data());
            }
            matmul_into(&h, layer.weight.data(), &mut out, rows, k, n);
            if i != last {
                let act = self.activation;
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = out;
        }
        Tensor::new(vec![rows, self.output_dim()], h)
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Recorded forward pass using parameter handles from [`Mlp::register`].
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Var {
        let last = vars.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(h, w);
            h = tape.add_row_bias(z, b);
            if i != last {
                h = tape.activate(h, self.activation);
            }
        }
        h
    }

    /// Flattened parameter list in layer order (weight, bias, ...).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
