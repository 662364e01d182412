//! Seeded random streams.
//!
//! Every run has one master seed. Independent consumers (attack `i`, the
//! dataset generator, a training run) get their own ChaCha8 stream keyed by
//! the master seed with the consumer's index as the stream id, so results do
//! not depend on the order in which consumers run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Tensor;

pub type StreamRng = ChaCha8Rng;

/// Stream-id namespaces so different subsystems never share a stream.
pub mod domain {
    pub const DATASET: u64 = 1 << 60;
    pub const TRAIN: u64 = 2 << 60;
    pub const ATTACK: u64 = 3 << 60;
    pub const SAMPLE: u64 = 4 << 60;
    pub const EVAL: u64 = 5 << 60;
}

/// Stream `index` under `master_seed`.
pub fn stream(master_seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n)).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_same_values() {
        let a = normal_vec(&mut stream(7, 3), 8);
        let b = normal_vec(&mut stream(7, 3), 8);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let a = normal_vec(&mut stream(7, 3), 4);
        let b = normal_vec(&mut stream(7, 4), 4);
        let c = normal_vec(&mut stream(8, 3), 4);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
