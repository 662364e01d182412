//! Checkpoint files: a line-oriented UTF-8 header followed by raw weights.
//!
//! ```text
//! advdiff-checkpoint
//! version 1
//! kind classifier
//! arch data_dim 2
//! arch classes 8
//! arch hidden 128,128,128
//! arch activation silu
//! meta seed 7
//! meta epochs 200
//! meta final_loss 0.0123
//! tensor mlp.0.weight 2,128
//! tensor mlp.0.bias 128
//! ...
//! end
//! <tensor data>
//! ```
//!
//! After the `end\n` line, the values of every listed tensor follow in
//! header order, row-major, each as an 8-byte little-endian IEEE-754 double.
//! Nothing follows the last tensor. `final_loss` is written in the shortest
//! form that parses back to the same bits.

use std::fs;
use std::path::Path;

use super::classifier::{ClassifierArch, ClassifierParams};
use super::denoiser::{DenoiserArch, DenoiserParams};
use super::mlp::{Dense, Mlp};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tensor};

pub const CHECKPOINT_MAGIC: &str = "advdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Denoiser,
    Classifier,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Denoiser => "denoiser",
            ModelKind::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub arch: Vec<(String, String)>,
    pub meta: TrainingMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    fn arch_value(&self, key: &str) -> Result<&str> {
        self.arch
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Architecture(format!("missing arch field `{key}`")))
    }

    fn arch_usize(&self, key: &str) -> Result<usize> {
        let v = self.arch_value(key)?;
        v.parse()
            .map_err(|_| Error::Architecture(format!("arch field `{key}` is not an integer: `{v}`")))
    }

    fn arch_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.arch_value(key)?;
        if v == "-" {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Architecture(format!("bad width `{s}` in `{key}`")))
            })
            .collect()
    }

    fn arch_activation(&self) -> Result<Activation> {
        let v = self.arch_value("activation")?;
        Activation::from_name(v).ok_or_else(|| Error::Architecture(format!("unknown activation `{v}`")))
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Architecture(format!("missing tensor `{name}`")))
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind.as_str() {
            return Err(Error::CheckpointKind {
                found: self.kind.clone(),
                expected: kind.as_str().to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(CHECKPOINT_MAGIC);
        head.push('\n');
        head.push_str(&format!("version {}\n", self.version));
        head.push_str(&format!("kind {}\n", self.kind));
        for (k, v) in &self.arch {
            head.push_str(&format!("arch {k} {v}\n"));
        }
        head.push_str(&format!("meta seed {}\n", self.meta.seed));
        head.push_str(&format!("meta epochs {}\n", self.meta.epochs));
        head.push_str(&format!("meta final_loss {}\n", self.meta.final_loss));
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {name} {}\n", dims.join(",")));
        }
        head.push_str("end\n");
        let mut bytes = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let end = find_header_end(bytes).ok_or_else(|| corrupt("header terminator not found".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(corrupt("missing magic line".into()));
        }

        let mut version = None;
        let mut kind = None;
        let mut arch = Vec::new();
        let mut meta = TrainingMeta::default();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let bad = || corrupt(format!("malformed header line {}: `{line}`", lineno + 2));
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("version"), Some(v), None) => version = Some(v.parse::<u32>().map_err(|_| bad())?),
                (Some("kind"), Some(k), None) => kind = Some(k.to_string()),
                (Some("arch"), Some(k), Some(v)) => arch.push((k.to_string(), v.to_string())),
                (Some("meta"), Some("seed"), Some(v)) => meta.seed = v.parse().map_err(|_| bad())?,
                (Some("meta"), Some("epochs"), Some(v)) => meta.epochs = v.parse().map_err(|_| bad())?,
                (Some("meta"), Some("final_loss"), Some(v)) => meta.final_loss = v.parse().map_err(|_| bad())?,
                (Some("tensor"), Some(name), Some(dims)) => {
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?;
                    specs.push((name.to_string(), shape));
                }
                _ => return Err(bad()),
            }
        }
        let version = version.ok_or_else(|| corrupt("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let kind = kind.ok_or_else(|| corrupt("missing kind".into()))?;

        let mut offset = end + "end\n".len();
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let stop = offset + 8 * n;
            if stop > bytes.len() {
                return Err(corrupt(format!("tensor `{name}` truncated")));
            }
            let data = bytes[offset..stop]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset = stop;
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if offset != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            version,
            kind,
            arch,
            meta,
            tensors,
        })
    }
}

/// Byte offset of the `end\n` header line.
fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let mut start = 0;
    while start < bytes.len() {
        let nl = bytes[start..].iter().position(|&b| b == b'\n')? + start;
        if &bytes[start..nl] == b"end" {
            return Some(start);
        }
        start = nl + 1;
    }
    None
}

fn hidden_string(h: &[usize]) -> String {
    if h.is_empty() {
        return "-".into();
    }
    h.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn mlp_tensors(mlp: &Mlp, out: &mut Vec<(String, Tensor)>) {
    for (i, l) in mlp.layers.iter().enumerate() {
        out.push((format!("mlp.{i}.weight"), l.weight.clone()));
        out.push((format!("mlp.{i}.bias"), l.bias.clone()));
    }
}

fn mlp_from(ck: &Checkpoint, input: usize, hidden: &[usize], output: usize, act: Activation) -> Result<Mlp> {
    let mut mlp = Mlp::zeros(input, hidden, output, act);
    for (i, layer) in mlp.layers.iter_mut().enumerate() {
        let w = ck.tensor(&format!("mlp.{i}.weight"))?;
        let b = ck.tensor(&format!("mlp.{i}.bias"))?;
        if w.shape() != layer.weight.shape() || b.shape() != layer.bias.shape() {
            return Err(Error::Architecture(format!(
                "layer {i} has shapes {:?}/{:?}, architecture needs {:?}/{:?}",
                w.shape(),
                b.shape(),
                layer.weight.shape(),
                layer.bias.shape()
            )));
        }
        *layer = Dense {
            weight: w.clone(),
            bias: b.clone(),
        };
    }
    let expected = 2 * mlp.layers.len() + usize::from(ck.kind == "denoiser");
    if ck.tensors.len() != expected {
        return Err(Error::Architecture(format!(
            "{} tensors stored, architecture has {expected}",
            ck.tensors.len()
        )));
    }
    Ok(mlp)
}

impl DenoiserParams {
    pub fn to_checkpoint(&self, meta: TrainingMeta) -> Checkpoint {
        let a = &self.arch;
        let arch = vec![
            ("data_dim".into(), a.data_dim.to_string()),
            ("classes".into(), a.classes.to_string()),
            ("hidden".into(), hidden_string(&a.hidden)),
            ("embed_dim".into(), a.embed_dim.to_string()),
            ("time_freqs".into(), a.time_freqs.to_string()),
            ("steps".into(), a.steps.to_string()),
            ("activation".into(), a.activation.name().to_string()),
        ];
        let mut tensors = vec![("embedding".to_string(), self.embedding.clone())];
        mlp_tensors(&self.mlp, &mut tensors);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: ModelKind::Denoiser.as_str().into(),
            arch,
            meta,
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Denoiser)?;
        let arch = DenoiserArch {
            data_dim: ck.arch_usize("data_dim")?,
            classes: ck.arch_usize("classes")?,
            hidden: ck.arch_list("hidden")?,
            embed_dim: ck.arch_usize("embed_dim")?,
            time_freqs: ck.arch_usize("time_freqs")?,
            steps: ck.arch_usize("steps")?,
            activation: ck.arch_activation()?,
        };
        arch.validate()?;
        let embedding = ck.tensor("embedding")?;
        if embedding.shape() != [arch.classes + 1, arch.embed_dim] {
            return Err(Error::Architecture(format!(
                "embedding shape {:?}, expected [{}, {}]",
                embedding.shape(),
                arch.classes + 1,
                arch.embed_dim
            )));
        }
        let mlp = mlp_from(ck, arch.input_width(), &arch.hidden, arch.data_dim, arch.activation)?;
        Ok(Self {
            embedding: embedding.clone(),
            mlp,
            arch,
        })
    }
}

impl ClassifierParams {
    pub fn to_checkpoint(&self, meta: TrainingMeta) -> Checkpoint {
        let a = &self.arch;
        let arch = vec![
            ("data_dim".into(), a.data_dim.to_string()),
            ("classes".into(), a.classes.to_string()),
            ("hidden".into(), hidden_string(&a.hidden)),
            ("activation".into(), a.activation.name().to_string()),
        ];
        let mut tensors = Vec::new();
        mlp_tensors(&self.mlp, &mut tensors);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: ModelKind::Classifier.as_str().into(),
            arch,
            meta,
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Classifier)?;
        let arch = ClassifierArch {
            data_dim: ck.arch_usize("data_dim")?,
            classes: ck.arch_usize("classes")?,
            hidden: ck.arch_list("hidden")?,
            activation: ck.arch_activation()?,
        };
        arch.validate()?;
        let mlp = mlp_from(ck, arch.data_dim, &arch.hidden, arch.classes, arch.activation)?;
        Ok(Self { arch, mlp })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

pub fn save_denoiser(p: &DenoiserParams, meta: TrainingMeta, path: &Path) -> Result<()> {
    save_checkpoint(&p.to_checkpoint(meta), path)
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserParams, TrainingMeta)> {
    let ck = load_checkpoint(path)?;
    Ok((DenoiserParams::from_checkpoint(&ck)?, ck.meta))
}

pub fn save_classifier(p: &ClassifierParams, meta: TrainingMeta, path: &Path) -> Result<()> {
    save_checkpoint(&p.to_checkpoint(meta), path)
}

pub fn load_classifier(path: &Path) -> Result<(ClassifierParams, TrainingMeta)> {
    let ck = load_checkpoint(path)?;
    Ok((ClassifierParams::from_checkpoint(&ck)?, ck.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn denoiser() -> DenoiserParams {
        let arch = DenoiserArch {
            data_dim: 2,
            classes: 3,
            hidden: vec![8, 8],
            embed_dim: 4,
            time_freqs: 2,
            steps: 20,
            activation: Activation::Silu,
        };
        DenoiserParams::random(arch, &mut stream(21, 0)).unwrap()
    }

    fn meta() -> TrainingMeta {
        TrainingMeta {
            seed: 5,
            epochs: 3,
            final_loss: 0.1 + 0.2,
        }
    }

    #[test]
    fn denoiser_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let p = denoiser();
        save_denoiser(&p, meta(), &path).unwrap();
        let (q, m) = load_denoiser(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(m.final_loss.to_bits(), meta().final_loss.to_bits());
    }

    #[test]
    fn version_bump_rejected() {
        let bytes = denoiser().to_checkpoint(meta()).to_bytes();
        let text = String::from_utf8_lossy(&bytes[..40]).to_string();
        assert!(text.contains("version 1"));
        let mut bumped = bytes.clone();
        let pos = bytes.windows(9).position(|w| w == b"version 1").unwrap();
        bumped[pos + 8] = b'2';
        let err = Checkpoint::from_bytes(&bumped, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 2, expected: 1 }));
    }

    #[test]
    fn classifier_checkpoint_is_not_a_denoiser() {
        let c = ClassifierParams::random(ClassifierArch::ring_default(8), &mut stream(1, 1)).unwrap();
        let ck = c.to_checkpoint(meta());
        let err = DenoiserParams::from_checkpoint(&ck).unwrap_err();
        assert!(matches!(err, Error::CheckpointKind { .. }));
    }

    #[test]
    fn truncated_and_trailing_bytes_rejected() {
        let bytes = denoiser().to_checkpoint(meta()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"garbage", Path::new("x")).is_err());
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let mut ck = denoiser().to_checkpoint(meta());
        for (k, v) in ck.arch.iter_mut() {
            if k == "hidden" {
                *v = "8,9".into();
            }
        }
        assert!(matches!(
            DenoiserParams::from_checkpoint(&ck),
            Err(Error::Architecture(_))
        ));
    }
}
