//! Synthetic class-conditional data and closed-form oracles.
//!
//! With Gaussian class conditionals `N(c_k, gamma^2 I)` the optimal noise
//! predictor is available in closed form ([`AnalyticDenoiser`]), and a
//! classifier with quadratic logits ([`QuadraticClassifier`]) has an exact
//! input gradient. Together they make the guidance laws checkable without
//! any training.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::models::{Label, NoisePredictor, TargetClassifier};
use crate::numerics::{log_softmax_in_place, Tensor};
use crate::rng::{domain, normal_vec, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub centers: Vec<Vec<f64>>,
    pub gamma: f64,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }
}

/// Labeled samples, one per row of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

/// Centers `radius * (cos 2 pi k/K, sin 2 pi k/K)`.
pub fn ring_centers(classes: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / classes as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// `per_class` isotropic normal draws around each ring center, grouped by
/// class.
pub fn make_ring_mixture(classes: usize, per_class: usize, radius: f64, gamma: f64, seed: u64) -> Result<Dataset> {
    make_ring_split(classes, per_class, radius, gamma, seed, 0)
}

/// Independent draw `split` of the same mixture; split 0 is
/// [`make_ring_mixture`].
pub fn make_ring_split(
    classes: usize,
    per_class: usize,
    radius: f64,
    gamma: f64,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class < 1 {
        return Err(Error::Config(format!(
            "ring mixture needs K >= 2 and n >= 1, got K={classes}, n={per_class}"
        )));
    }
    if !(gamma > 0.0) || !(radius > 0.0) {
        return Err(Error::Config("ring radius and spread must be positive".into()));
    }
    let centers = ring_centers(classes, radius);
    let mut rng = stream(seed, domain::DATASET + split);
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let z = normal_vec(&mut rng, 2);
            data.push(c[0] + gamma * z[0]);
            data.push(c[1] + gamma * z[1]);
            labels.push(k);
        }
    }
    Ok(Dataset {
        x: Tensor::matrix(classes * per_class, 2, data),
        labels,
        meta: DatasetMeta { centers, gamma, seed },
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn classes(&self) -> usize {
        self.meta.classes()
    }

    /// Rows `indices` as a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
            labels.push(self.labels[i]);
        }
        (Tensor::matrix(indices.len(), d, data), labels)
    }

    pub fn class_count(&self, k: usize) -> usize {
        self.labels.iter().filter(|&&l| l == k).count()
    }

    /// Writes metadata as `#` comment lines, then a `x0,..,label` table.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# gamma {}\n", self.meta.gamma));
        out.push_str(&format!("# seed {}\n", self.meta.seed));
        for (k, c) in self.meta.centers.iter().enumerate() {
            let coords: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("# center {k} {}\n", coords.join(" ")));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is UTF-8"));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Config(format!("{}: {m}", path.display()));
        let mut gamma = None;
        let mut seed = 0;
        let mut centers: Vec<Vec<f64>> = Vec::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                match parts.as_slice() {
                    ["gamma", v] => gamma = Some(v.parse().map_err(|_| bad(format!("bad gamma `{v}`")))?),
                    ["seed", v] => seed = v.parse().map_err(|_| bad(format!("bad seed `{v}`")))?,
                    ["center", k, coords @ ..] => {
                        let k: usize = k.parse().map_err(|_| bad(format!("bad center index `{k}`")))?;
                        if k != centers.len() {
                            return Err(bad(format!("center {k} out of order")));
                        }
                        let c = coords
                            .iter()
                            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad coordinate `{v}`"))))
                            .collect::<Result<Vec<_>>>()?;
                        centers.push(c);
                    }
                    _ => return Err(bad(format!("unknown metadata line `{line}`"))),
                }
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let gamma = gamma.ok_or_else(|| bad("missing gamma".into()))?;
        if centers.is_empty() {
            return Err(bad("no class centers".into()));
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let dim = r.headers()?.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| bad("no coordinate columns".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..dim {
                data.push(rec[j].parse::<f64>().map_err(|_| bad(format!("bad value `{}`", &rec[j])))?);
            }
            let label: usize = rec[dim].parse().map_err(|_| bad(format!("bad label `{}`", &rec[dim])))?;
            if label >= centers.len() {
                return Err(Error::Label {
                    label,
                    classes: centers.len(),
                });
            }
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset csv"));
        }
        Ok(Self {
            x: Tensor::matrix(labels.len(), dim, data),
            labels,
            meta: DatasetMeta { centers, gamma, seed },
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest center for each row.
pub fn nearest_center(x: &Tensor, centers: &[Vec<f64>]) -> Vec<usize> {
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d = sq_dist(row, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Optimal noise predictor for Gaussian class conditionals with equal
/// class priors.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    pub centers: Vec<Vec<f64>>,
    pub gamma: f64,
    pub schedule: NoiseSchedule,
}

impl AnalyticDenoiser {
    pub fn new(centers: Vec<Vec<f64>>, gamma: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("oracle spread must be positive, got {gamma}")));
        }
        if centers.is_empty() {
            return Err(Error::Empty("oracle centers"));
        }
        Ok(Self {
            centers,
            gamma,
            schedule,
        })
    }

    pub fn from_meta(meta: &DatasetMeta, schedule: NoiseSchedule) -> Result<Self> {
        Self::new(meta.centers.clone(), meta.gamma, schedule)
    }

    /// `E[eps | x_t, y]` for a single row.
    fn class_epsilon(&self, x: &[f64], k: usize, t: usize, out: &mut [f64]) {
        let ab = self.schedule.alpha_bar(t);
        let var = ab * self.gamma * self.gamma + 1.0 - ab;
        let coef = (1.0 - ab).sqrt() / var;
        for ((o, xv), c) in out.iter_mut().zip(x).zip(&self.centers[k]) {
            *o = coef * (xv - ab.sqrt() * c);
        }
    }

    /// Posterior class weights of `x_t` under the noised mixture.
    pub fn class_posterior(&self, x: &[f64], t: usize) -> Vec<f64> {
        let ab = self.schedule.alpha_bar(t);
        let var = ab * self.gamma * self.gamma + 1.0 - ab;
        let mut w: Vec<f64> = self
            .centers
            .iter()
            .map(|c| {
                let d: f64 = x.iter().zip(c).map(|(xv, cv)| (xv - ab.sqrt() * cv).powi(2)).sum();
                -d / (2.0 * var)
            })
            .collect();
        log_softmax_in_place(&mut w);
        w.iter_mut().for_each(|v| *v = v.exp());
        w
    }

    pub fn epsilon_row(&self, x: &[f64], t: usize, label: Label, out: &mut [f64]) -> Result<()> {
        self.schedule.check_timestep(t)?;
        match label {
            Label::Class(k) if k < self.centers.len() => self.class_epsilon(x, k, t, out),
            Label::Class(k) => {
                return Err(Error::Label {
                    label: k,
                    classes: self.centers.len(),
                })
            }
            Label::Null => {
                let w = self.class_posterior(x, t);
                let mut tmp = vec![0.0; x.len()];
                out.iter_mut().for_each(|v| *v = 0.0);
                for (k, wk) in w.iter().enumerate() {
                    self.class_epsilon(x, k, t, &mut tmp);
                    for (o, v) in out.iter_mut().zip(&tmp) {
                        *o += wk * v;
                    }
                }
            }
        }
        Ok(())
    }
}

impl NoisePredictor for AnalyticDenoiser {
    fn data_dim(&self) -> usize {
        self.centers[0].len()
    }

    fn num_classes(&self) -> usize {
        self.centers.len()
    }

    fn predict(&self, x: &Tensor, t: usize, labels: &[Label]) -> Result<Tensor> {
        if labels.len() != x.rows() || x.cols() != self.data_dim() {
            return Err(Error::InvalidTensor(format!(
                "oracle denoiser got shape {:?} with {} labels",
                x.shape(),
                labels.len()
            )));
        }
        let d = x.cols();
        let mut out = vec![0.0; x.len()];
        for (i, &label) in labels.iter().enumerate() {
            self.epsilon_row(x.row(i), t, label, &mut out[i * d..(i + 1) * d])?;
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// Classifier with logits `-|x - c_k|^2 / (2 tau)`.
#[derive(Debug, Clone)]
pub struct QuadraticClassifier {
    pub centers: Vec<Vec<f64>>,
    pub tau: f64,
}

impl QuadraticClassifier {
    pub fn new(centers: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        if centers.is_empty() {
            return Err(Error::Empty("classifier centers"));
        }
        Ok(Self { centers, tau })
    }

    pub fn logits_row(&self, x: &[f64]) -> Vec<f64> {
        self.centers.iter().map(|c| -sq_dist(x, c) / (2.0 * self.tau)).collect()
    }

    pub fn softmax_row(&self, x: &[f64]) -> Vec<f64> {
        let mut l = self.logits_row(x);
        log_softmax_in_place(&mut l);
        l.iter_mut().for_each(|v| *v = v.exp());
        l
    }

    /// `(-(x - c_y) + sum_k softmax_k (x - c_k)) / tau`
    pub fn logprob_grad_row(&self, x: &[f64], y: usize) -> Vec<f64> {
        let p = self.softmax_row(x);
        let mut g: Vec<f64> = x.iter().zip(&self.centers[y]).map(|(xv, c)| -(xv - c)).collect();
        for (pk, c) in p.iter().zip(&self.centers) {
            for ((gv, xv), cv) in g.iter_mut().zip(x).zip(c) {
                *gv += pk * (xv - cv);
            }
        }
        g.iter_mut().for_each(|v| *v /= self.tau);
        g
    }
}

/// Functional form of [`QuadraticClassifier::logprob_grad_row`].
pub fn quadratic_logprob_grad(q: &QuadraticClassifier, x: &Tensor, y: usize) -> Result<Tensor> {
    q.log_prob_grad(x, &vec![y; x.rows()])
}

impl TargetClassifier for QuadraticClassifier {
    fn data_dim(&self) -> usize {
        self.centers[0].len()
    }

    fn num_classes(&self) -> usize {
        self.centers.len()
    }

    fn log_probs(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.centers.len();
        let mut out = Vec::with_capacity(x.rows() * k);
        for i in 0..x.rows() {
            let mut l = self.logits_row(x.row(i));
            log_softmax_in_place(&mut l);
            out.extend(l);
        }
        Tensor::new(vec![x.rows(), k], out)
    }

    fn log_prob_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if labels.len() != x.rows() {
            return Err(Error::InvalidTensor(format!("{} labels for {} rows", labels.len(), x.rows())));
        }
        let mut out = Vec::with_capacity(x.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.centers.len() {
                return Err(Error::Label {
                    label: y,
                    classes: self.centers.len(),
                });
            }
            out.extend(self.logprob_grad_row(x.row(i), y));
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::numerics::{finite_diff_grad, relative_error};

    fn sched() -> NoiseSchedule {
        make_schedule(ScheduleKind::Linear, 100, 1e-4, 0.05).unwrap()
    }

    #[test]
    fn two_class_centers() {
        let c = ring_centers(2, 1.0);
        assert_eq!(c[0], vec![1.0, 0.0]);
        assert!((c[1][0] + 1.0).abs() < 1e-15 && c[1][1].abs() < 1e-15);
    }

    #[test]
    fn ring_is_deterministic_and_centered() {
        let a = make_ring_mixture(8, 400, 2.0, 0.2, 3).unwrap();
        let b = make_ring_mixture(8, 400, 2.0, 0.2, 3).unwrap();
        assert_eq!(a, b);
        for k in 0..8 {
            assert_eq!(a.class_count(k), 400);
            let idx: Vec<usize> = (0..a.len()).filter(|&i| a.labels[i] == k).collect();
            let (x, _) = a.gather(&idx);
            for d in 0..2 {
                let mean = (0..x.rows()).map(|i| x.row(i)[d]).sum::<f64>() / 400.0;
                assert!((mean - a.meta.centers[k][d]).abs() <= 4.0 * 0.2 / 20.0);
            }
        }
        assert!(make_ring_mixture(1, 4, 2.0, 0.2, 3).is_err());
        assert!(make_ring_mixture(2, 0, 2.0, 0.2, 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ring.csv");
        let a = make_ring_mixture(3, 5, 2.0, 0.2, 9).unwrap();
        a.write_csv(&path).unwrap();
        let b = Dataset::read_csv(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn analytic_epsilon_zero_at_scaled_center() {
        let s = sched();
        let d = AnalyticDenoiser::new(ring_centers(4, 2.0), 0.2, s.clone()).unwrap();
        let t = 37;
        let c = &d.centers[2];
        let x = Tensor::matrix(1, 2, c.iter().map(|v| v * s.alpha_bar(t).sqrt()).collect());
        let out = d.predict(&x, t, &[Label::Class(2)]).unwrap();
        assert!(out.max_abs() < 1e-15);
    }

    #[test]
    fn analytic_epsilon_point_mass_limit() {
        let s = sched();
        let d = AnalyticDenoiser::new(ring_centers(4, 2.0), 1e-9, s.clone()).unwrap();
        let t = 60;
        let x = Tensor::matrix(1, 2, vec![0.4, -1.1]);
        let out = d.predict(&x, t, &[Label::Class(1)]).unwrap();
        let ab = s.alpha_bar(t);
        for (j, o) in out.data().iter().enumerate() {
            let expected = (x.data()[j] - ab.sqrt() * d.centers[1][j]) / (1.0 - ab).sqrt();
            assert!((o - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn null_epsilon_is_posterior_average() {
        let s = sched();
        let d = AnalyticDenoiser::new(ring_centers(3, 2.0), 0.3, s).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.2, 0.9]);
        let t = 50;
        let null = d.predict(&x, t, &[Label::Null]).unwrap();
        let w = d.class_posterior(x.row(0), t);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut expected = [0.0; 2];
        for k in 0..3 {
            let e = d.predict(&x, t, &[Label::Class(k)]).unwrap();
            expected[0] += w[k] * e.data()[0];
            expected[1] += w[k] * e.data()[1];
        }
        assert!((null.data()[0] - expected[0]).abs() < 1e-12);
        assert!((null.data()[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn quadratic_single_class_has_zero_gradient() {
        let q = QuadraticClassifier::new(vec![vec![1.0, 2.0]], 0.25).unwrap();
        let g = quadratic_logprob_grad(&q, &Tensor::matrix(1, 2, vec![5.0, -3.0]), 0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_saturated_gradient_vanishes() {
        let q = QuadraticClassifier::new(ring_centers(8, 2.0), 0.25).unwrap();
        // far out along c_0 the class-0 logit leads every other by >= 40
        let x = vec![20.0, 0.0];
        let logits = q.logits_row(&x);
        let gap = (1..8).map(|k| logits[0] - logits[k]).fold(f64::INFINITY, f64::min);
        assert!(gap >= 40.0);
        let g = q.logprob_grad_row(&x, 0);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-6);
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let q = QuadraticClassifier::new(ring_centers(5, 2.0), 0.25).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.7, 0.4]);
        for y in 0..5 {
            let g = quadratic_logprob_grad(&q, &x, y).unwrap();
            let fd = finite_diff_grad(|p| Ok(q.log_probs(p)?.data()[y]), &x, 1e-5).unwrap();
            assert!(relative_error(&g, &fd, 1e-3) < 1e-6, "class {y}");
        }
    }

    #[test]
    fn nearest_center_oracle() {
        let c = ring_centers(4, 2.0);
        let x = Tensor::from_rows(&c).unwrap();
        assert_eq!(nearest_center(&x, &c), vec![0, 1, 2, 3]);
    }
}
