//! Dense tensors and tape-based reverse-mode gradients.

mod tape;
mod tensor;

pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::{log_softmax_in_place, matmul_into};

use crate::error::{Error, Result};

/// Value and exact gradient of the scalar function `f` at `x`.
///
/// `f` builds its computation on the supplied tape starting from the leaf
/// holding `x` and returns the scalar output node.
pub fn value_and_grad<F>(f: F, x: &Tensor) -> Result<(f64, Tensor)>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, input);
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidTensor(format!(
            "grad needs a scalar output, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;
    Ok((tape.value(out).item(), grads.get(input)))
}

pub fn grad<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    value_and_grad(f, x).map(|(_, g)| g)
}

/// Central-difference gradient estimate, one coordinate at a time.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite difference step must be > 0, got {h}")));
    }
    let mut out = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Max-norm relative error `|a - b|_inf / max(|b|_inf, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    diff / b.max_abs().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let g = grad(|t, x| t.sum(x), &Tensor::vector(vec![1., 2., 3.])).unwrap();
        assert_eq!(g.data(), &[1., 1., 1.]);
    }

    #[test]
    fn grad_of_half_squared_norm_is_identity() {
        let g = grad(
            |t, x| {
                let sq = t.square(x);
                let s = t.sum(sq);
                t.scale(s, 0.5)
            },
            &Tensor::vector(vec![3., -4.]),
        )
        .unwrap();
        assert_eq!(g.data(), &[3., -4.]);
    }

    #[test]
    fn finite_diff_linear_and_quadratic() {
        let g = finite_diff_grad(|x| Ok(x.sum()), &Tensor::vector(vec![1., 2.]), 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let g = finite_diff_grad(|x| Ok(x.data()[0].powi(2)), &Tensor::vector(vec![2.]), 1e-4).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-7);
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        assert!(finite_diff_grad(|x| Ok(x.sum()), &Tensor::vector(vec![1.]), 0.0).is_err());
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let err = grad(
            |t, x| {
                let big = t.scale(x, 1e300);
                let sq = t.square(big);
                t.sum(sq)
            },
            &Tensor::vector(vec![1.0]),
        )
        .unwrap_err();
        match err {
            Error::NonFinite { op } => assert_eq!(op, "square"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_scalar_output_rejected() {
        assert!(grad(|_, x| x, &Tensor::vector(vec![1., 2.])).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x * x) via mul of the same node
        let g = grad(
            |t, x| {
                let m = t.mul(x, x);
                t.sum(m)
            },
            &Tensor::vector(vec![1.5, -2.0]),
        )
        .unwrap();
        assert_eq!(g.data(), &[3.0, -4.0]);
    }
}
