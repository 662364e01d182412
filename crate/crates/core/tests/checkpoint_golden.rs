use std::path::{Path, PathBuf};

use advdiff::models::{load_classifier, save_classifier, ClassifierParams, TargetClassifier};
use advdiff::numerics::Tensor;

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/classifier_tiny.ckpt")
}

const W0: [[f64; 3]; 2] = [[0.5, -1.0, 0.25], [2.0, 0.0, -0.125]];
const B0: [f64; 3] = [0.1, 0.2, -0.3];
const W1: [[f64; 2]; 3] = [[1.0, -1.0], [0.5, 0.5], [-2.0, 3.0]];
const B1: [f64; 2] = [0.0, 1.5];

fn logits_by_hand(x: [f64; 2]) -> [f64; 2] {
    let mut h = [0.0; 3];
    for j in 0..3 {
        h[j] = (x[0] * W0[0][j] + x[1] * W0[1][j] + B0[j]).tanh();
    }
    let mut out = [0.0; 2];
    for k in 0..2 {
        out[k] = h[0] * W1[0][k] + h[1] * W1[1][k] + h[2] * W1[2][k] + B1[k];
    }
    out
}

#[test]
fn golden_classifier_loads_with_expected_weights() {
    let (p, meta) = load_classifier(&golden()).unwrap();
    assert_eq!(p.arch.hidden, vec![3]);
    assert_eq!(p.arch.classes, 2);
    assert_eq!(meta.seed, 7);
    assert_eq!(meta.epochs, 3);
    assert_eq!(meta.final_loss.to_bits(), (0.1f64 + 0.2).to_bits());

    let x = Tensor::matrix(2, 2, vec![0.3, -0.7, 1.5, 2.0]);
    let lp = p.log_probs(&x).unwrap();
    for (i, row) in [[0.3, -0.7], [1.5, 2.0]].into_iter().enumerate() {
        let l = logits_by_hand(row);
        let lse = (l[0].exp() + l[1].exp()).ln();
        for k in 0..2 {
            assert!((lp.row(i)[k] - (l[k] - lse)).abs() < 1e-12);
        }
    }
}

#[test]
fn saving_reproduces_golden_bytes() {
    let (p, meta): (ClassifierParams, _) = load_classifier(&golden()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("again.ckpt");
    save_classifier(&p, meta, &path).unwrap();
    assert_eq!(std::fs::read(path).unwrap(), std::fs::read(golden()).unwrap());
}
