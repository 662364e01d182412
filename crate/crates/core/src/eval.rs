//! Attack metrics: success rate, flipped-label rate and per-class moment
//! statistics of generated samples against the known class Gaussians.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advdiff::{AttackMode, AttackResult, GuidanceConfig, SamplerKind};
use crate::data::{nearest_center, DatasetMeta};
use crate::error::{Error, Result};
use crate::models::TargetClassifier;
use crate::numerics::Tensor;

/// Fewest samples per class accepted by [`class_stats_distance`].
pub const MIN_CLASS_SAMPLES: usize = 30;

/// Judge of what class a sample "really" shows, independent of the attacked
/// classifier.
#[derive(Clone, Copy)]
pub enum LabelOracle<'a> {
    NearestCenter(&'a [Vec<f64>]),
    Classifier(&'a dyn TargetClassifier),
}

impl LabelOracle<'_> {
    pub fn verdicts(&self, x: &Tensor) -> Result<Vec<usize>> {
        match self {
            LabelOracle::NearestCenter(c) => Ok(nearest_center(x, c)),
            LabelOracle::Classifier(f) => f.predict(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlippedRate {
    pub rate: f64,
    /// Set when there were no successful attacks to judge.
    pub no_successes: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    /// Distance from the sample mean to the class center.
    pub mean_shift: f64,
    /// Trace of the sample covariance over `gamma^2 * D`.
    pub cov_ratio: f64,
}

pub fn attack_success_rate(results: &[AttackResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("attack results"));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Success rate recomputed from the stored samples.
pub fn recomputed_success_rate(results: &[AttackResult], f: &dyn TargetClassifier, mode: AttackMode) -> Result<f64> {
    let x = samples_tensor(results)?;
    let pred = f.predict(&x)?;
    let hits = results
        .iter()
        .zip(&pred)
        .filter(|(r, &p)| r.spec.is_success(mode, p))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

fn samples_tensor(results: &[AttackResult]) -> Result<Tensor> {
    if results.is_empty() {
        return Err(Error::Empty("attack results"));
    }
    Tensor::from_rows(&results.iter().map(|r| r.x0.clone()).collect::<Vec<_>>())
}

/// Fraction of successful attacks whose sample the oracle assigns to a
/// class other than the generation label.
pub fn flipped_label_rate(results: &[AttackResult], oracle: LabelOracle<'_>) -> Result<FlippedRate> {
    let succ: Vec<AttackResult> = results.iter().filter(|r| r.success).cloned().collect();
    if succ.is_empty() {
        return Ok(FlippedRate {
            rate: 0.0,
            no_successes: true,
        });
    }
    Ok(FlippedRate {
        rate: oracle_error_rate(&succ, oracle)?,
        no_successes: false,
    })
}

/// Fraction of all samples the oracle assigns to a class other than the
/// generation label.
pub fn oracle_error_rate(results: &[AttackResult], oracle: LabelOracle<'_>) -> Result<f64> {
    let x = samples_tensor(results)?;
    let v = oracle.verdicts(&x)?;
    let wrong = results.iter().zip(&v).filter(|(r, &c)| c != r.spec.y).count();
    Ok(wrong as f64 / results.len() as f64)
}

/// Per-class mean shift and covariance ratio of `samples` (rows) grouped by
/// `labels`, for every class that occurs.
pub fn class_stats_distance(samples: &Tensor, labels: &[usize], meta: &DatasetMeta) -> Result<Vec<ClassStats>> {
    if samples.rows() != labels.len() {
        return Err(Error::InvalidTensor(format!(
            "{} samples with {} labels",
            samples.rows(),
            labels.len()
        )));
    }
    if samples.cols() != meta.dim() {
        return Err(Error::ShapeMismatch {
            op: "class_stats_distance",
            left: samples.shape().to_vec(),
            right: vec![meta.dim()],
        });
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        if y >= meta.classes() {
            return Err(Error::Label {
                label: y,
                classes: meta.classes(),
            });
        }
        groups.entry(y).or_default().push(i);
    }
    if groups.is_empty() {
        return Err(Error::Empty("class samples"));
    }
    let d = meta.dim();
    groups
        .into_iter()
        .map(|(class, rows)| {
            let n = rows.len();
            if n < MIN_CLASS_SAMPLES {
                return Err(Error::InsufficientSamples {
                    class,
                    count: n,
                    required: MIN_CLASS_SAMPLES,
                });
            }
            let mut mean = vec![0.0; d];
            for &i in &rows {
                for (m, v) in mean.iter_mut().zip(samples.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let trace: f64 = rows
                .iter()
                .map(|&i| samples.row(i).iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
                .sum::<f64>()
                / (n - 1) as f64;
            let shift = mean
                .iter()
                .zip(&meta.centers[class])
                .map(|(m, c)| (m - c).powi(2))
                .sum::<f64>()
                .sqrt();
            Ok(ClassStats {
                class,
                count: n,
                mean_shift: shift,
                cov_ratio: trace / (meta.gamma * meta.gamma * d as f64),
            })
        })
        .collect()
}

/// Average of the per-class mean shifts; NaN for no classes.
pub fn mean_class_shift(stats: &[ClassStats]) -> f64 {
    stats.iter().map(|s| s.mean_shift).sum::<f64>() / stats.len() as f64
}

/// `hist[i]` counts attacks whose first success came at restart `i`; the
/// final entry counts attacks that never succeeded.
pub fn restart_histogram(results: &[AttackResult], restarts: usize) -> Vec<usize> {
    let mut hist = vec![0; restarts + 1];
    for r in results {
        match r.first_success {
            Some(i) if i < restarts => hist[i] += 1,
            _ => hist[restarts] += 1,
        }
    }
    hist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub guidance: GuidanceConfig,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub attacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub asr: f64,
    /// Success rate recomputed from the samples; equals `asr` unless the
    /// classifier changed since the attack ran.
    pub asr_recomputed: f64,
    pub flipped_label_rate: f64,
    pub flipped_no_successes: bool,
    /// Same rate judged by an independently trained classifier, if given.
    pub flipped_label_rate_classifier: Option<f64>,
    /// Nearest-center error rate over all samples, successful or not.
    pub oracle_error_rate: f64,
    /// Average per-class mean shift over classes with at least
    /// [`MIN_CLASS_SAMPLES`] attacks; NaN when there are none.
    pub mean_shift: f64,
    pub restart_histogram: Vec<usize>,
    pub class_stats: Vec<ClassStats>,
    pub config: ConfigEcho,
}

impl EvalReport {
    pub fn build(
        results: &[AttackResult],
        attacked: &dyn TargetClassifier,
        second_oracle: Option<&dyn TargetClassifier>,
        meta: &DatasetMeta,
        config: ConfigEcho,
    ) -> Result<Self> {
        let asr = attack_success_rate(results)?;
        let asr_recomputed = recomputed_success_rate(results, attacked, config.guidance.mode)?;
        let centers = LabelOracle::NearestCenter(&meta.centers);
        let flipped = flipped_label_rate(results, centers)?;
        let flipped_clf = second_oracle
            .map(|f| flipped_label_rate(results, LabelOracle::Classifier(f)).map(|r| r.rate))
            .transpose()?;
        let mut counts = vec![0; meta.classes()];
        for r in results {
            if let Some(c) = counts.get_mut(r.spec.y) {
                *c += 1;
            }
        }
        let kept: Vec<&AttackResult> = results
            .iter()
            .filter(|r| counts.get(r.spec.y).is_some_and(|&c| c >= MIN_CLASS_SAMPLES))
            .collect();
        let class_stats = if kept.is_empty() {
            Vec::new()
        } else {
            let x = Tensor::from_rows(&kept.iter().map(|r| r.x0.clone()).collect::<Vec<_>>())?;
            let labels: Vec<usize> = kept.iter().map(|r| r.spec.y).collect();
            class_stats_distance(&x, &labels, meta)?
        };
        Ok(Self {
            asr,
            asr_recomputed,
            flipped_label_rate: flipped.rate,
            flipped_no_successes: flipped.no_successes,
            flipped_label_rate_classifier: flipped_clf,
            oracle_error_rate: oracle_error_rate(results, centers)?,
            mean_shift: mean_class_shift(&class_stats),
            restart_histogram: restart_histogram(results, config.guidance.restarts),
            class_stats,
            config,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize report: {e}")))
    }

    /// Flat `metric,class,value` rows; `class` is empty for global metrics.
    pub fn csv_rows(&self) -> Vec<(String, Option<usize>, f64)> {
        let mut rows = vec![
            ("asr".to_string(), None, self.asr),
            ("asr_recomputed".to_string(), None, self.asr_recomputed),
            ("flipped_label_rate".to_string(), None, self.flipped_label_rate),
            ("oracle_error_rate".to_string(), None, self.oracle_error_rate),
            ("mean_shift".to_string(), None, self.mean_shift),
        ];
        if let Some(r) = self.flipped_label_rate_classifier {
            rows.push(("flipped_label_rate_classifier".to_string(), None, r));
        }
        for (i, &c) in self.restart_histogram.iter().enumerate() {
            rows.push((format!("first_success_restart_{i}"), None, c as f64));
        }
        for s in &self.class_stats {
            rows.push(("class_mean_shift".to_string(), Some(s.class), s.mean_shift));
            rows.push(("class_cov_ratio".to_string(), Some(s.class), s.cov_ratio));
            rows.push(("class_count".to_string(), Some(s.class), s.count as f64));
        }
        rows
    }

    pub fn write(&self, toml_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(toml_path, self.to_toml()?).map_err(|e| Error::io(toml_path, e))?;
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(["metric", "class", "value"])?;
        for (metric, class, value) in self.csv_rows() {
            let class = class.map(|c| c.to_string()).unwrap_or_default();
            w.write_record([metric, class, value.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advdiff::AttackSpec;
    use crate::data::{make_ring_mixture, ring_centers};

    fn result(y: usize, target: usize, x0: Vec<f64>, success: bool) -> AttackResult {
        AttackResult {
            spec: AttackSpec::new(y, target),
            x0,
            success,
            first_success: success.then_some(0),
            verdicts: vec![],
            trajectory: None,
        }
    }

    #[test]
    fn success_rate_counts() {
        assert!(attack_success_rate(&[]).is_err());
        let fails: Vec<_> = (0..3).map(|_| result(0, 1, vec![0.0, 0.0], false)).collect();
        assert_eq!(attack_success_rate(&fails).unwrap(), 0.0);
        let mut mixed: Vec<_> = (0..3).map(|_| result(0, 1, vec![0.0, 0.0], true)).collect();
        assert_eq!(attack_success_rate(&mixed).unwrap(), 1.0);
        mixed.push(result(0, 1, vec![0.0, 0.0], false));
        assert_eq!(attack_success_rate(&mixed).unwrap(), 0.75);
    }

    #[test]
    fn flipped_rate_at_centers() {
        let c = ring_centers(4, 2.0);
        let own: Vec<_> = (0..4).map(|k| result(k, (k + 1) % 4, c[k].clone(), true)).collect();
        let r = flipped_label_rate(&own, LabelOracle::NearestCenter(&c)).unwrap();
        assert_eq!(r.rate, 0.0);
        let flipped: Vec<_> = (0..4).map(|k| result(k, (k + 1) % 4, c[(k + 1) % 4].clone(), true)).collect();
        assert_eq!(flipped_label_rate(&flipped, LabelOracle::NearestCenter(&c)).unwrap().rate, 1.0);
        let none = vec![result(0, 1, c[1].clone(), false)];
        let r = flipped_label_rate(&none, LabelOracle::NearestCenter(&c)).unwrap();
        assert!(r.no_successes);
        assert_eq!(r.rate, 0.0);
    }

    #[test]
    fn stats_of_reference_draws() {
        let data = make_ring_mixture(2, 1000, 2.0, 0.2, 3).unwrap();
        let stats = class_stats_distance(&data.x, &data.labels, &data.meta).unwrap();
        for s in &stats {
            assert!(s.mean_shift <= 4.0 * 0.2 / (1000f64).sqrt(), "{s:?}");
            assert!((0.8..=1.2).contains(&s.cov_ratio), "{s:?}");
        }
    }

    #[test]
    fn stats_degenerate_and_insufficient() {
        let data = make_ring_mixture(2, 40, 2.0, 0.2, 3).unwrap();
        let at_center = Tensor::from_rows(&vec![data.meta.centers[1].clone(); 40]).unwrap();
        let stats = class_stats_distance(&at_center, &[1; 40], &data.meta).unwrap();
        assert!(stats[0].cov_ratio < 1e-12);
        assert!(stats[0].mean_shift < 1e-12);
        let few = Tensor::from_rows(&vec![data.meta.centers[1].clone(); 29]).unwrap();
        assert!(matches!(
            class_stats_distance(&few, &[1; 29], &data.meta),
            Err(Error::InsufficientSamples { count: 29, .. })
        ));
    }

    #[test]
    fn histogram_has_failure_bucket() {
        let mut rs = vec![result(0, 1, vec![0.0, 0.0], false)];
        let mut r = result(0, 1, vec![0.0, 0.0], true);
        r.first_success = Some(2);
        rs.push(r);
        assert_eq!(restart_histogram(&rs, 3), vec![0, 0, 1, 1]);
    }
}
