//! CSV outputs of the CLI.
//!
//! `attack_results.csv`, one row per attack in index order:
//!
//! | column          | meaning                                                     |
//! |-----------------|-------------------------------------------------------------|
//! | `index`         | attack index `i`                                            |
//! | `seed`          | master seed; attack `i` draws from its stream `ATTACK + i`  |
//! | `y`             | generation label                                            |
//! | `y_a`           | target label; empty for untargeted attacks                  |
//! | `success`       | 1 if any restart met the objective, else 0                  |
//! | `first_success` | 0-based restart of the first success; empty if none         |
//! | `restarts`      | restarts run                                                |
//! | `verdicts`      | classifier verdict after each restart, `;`-separated        |
//!
//! `attack_samples.csv`: `index,y,y_a,x0,x1,..` with the returned sample.
//! `attack_trajectory.csv` (only with `record_trajectory`):
//! `index,step,x0,x1,..`, step 0 being `x_T` of the final restart.
//! `samples.csv`: `index,label,x0,x1,..` from the benign sampler.
//!
//! Reals are written in the shortest form that parses back to the same
//! bits.

use std::path::Path;

use crate::advdiff::{AttackMode, AttackResult, AttackSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const ATTACK_RESULTS_HEADER: [&str; 8] =
    ["index", "seed", "y", "y_a", "success", "first_success", "restarts", "verdicts"];

fn coord_header(prefix: &[&str], dim: usize) -> Vec<String> {
    let mut h: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    h.extend((0..dim).map(|j| format!("x{j}")));
    h
}

fn target_cell(spec: &AttackSpec, mode: AttackMode) -> String {
    match mode {
        AttackMode::Targeted => spec.target.to_string(),
        AttackMode::Untargeted => String::new(),
    }
}

pub fn write_attack_results(path: &Path, results: &[AttackResult], mode: AttackMode, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ATTACK_RESULTS_HEADER)?;
    for (i, r) in results.iter().enumerate() {
        let verdicts: Vec<String> = r.verdicts.iter().map(usize::to_string).collect();
        w.write_record([
            i.to_string(),
            seed.to_string(),
            r.spec.y.to_string(),
            target_cell(&r.spec, mode),
            u8::from(r.success).to_string(),
            r.first_success.map(|k| k.to_string()).unwrap_or_default(),
            r.verdicts.len().to_string(),
            verdicts.join(";"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_attack_samples(path: &Path, results: &[AttackResult], mode: AttackMode) -> Result<()> {
    let dim = results.first().map_or(0, |r| r.x0.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(coord_header(&["index", "y", "y_a"], dim))?;
    for (i, r) in results.iter().enumerate() {
        let mut rec = vec![i.to_string(), r.spec.y.to_string(), target_cell(&r.spec, mode)];
        rec.extend(r.x0.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_attack_trajectories(path: &Path, results: &[AttackResult]) -> Result<()> {
    let dim = results.first().map_or(0, |r| r.x0.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(coord_header(&["index", "step"], dim))?;
    for (i, r) in results.iter().enumerate() {
        for (k, x) in r.trajectory.iter().flatten().enumerate() {
            let mut rec = vec![i.to_string(), k.to_string()];
            rec.extend(x.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_samples(path: &Path, x: &Tensor, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(coord_header(&["index", "label"], x.cols()))?;
    for (i, &y) in labels.iter().enumerate() {
        let mut rec = vec![i.to_string(), y.to_string()];
        rec.extend(x.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn field<'a>(rec: &'a csv::StringRecord, j: usize, path: &Path) -> Result<&'a str> {
    rec.get(j)
        .ok_or_else(|| Error::Config(format!("{}: row has only {} fields", path.display(), rec.len())))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Config(format!("{}: bad {what} `{s}`", path.display())))
}

/// Rebuilds attack results from the results and samples tables.
pub fn read_attack_results(results_path: &Path, samples_path: &Path) -> Result<Vec<AttackResult>> {
    let mut r = csv::Reader::from_path(results_path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != ATTACK_RESULTS_HEADER {
        return Err(Error::Config(format!(
            "{}: unexpected header, expected {}",
            results_path.display(),
            ATTACK_RESULTS_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let p = results_path;
        if parse::<usize>(field(&rec, 0, p)?, "index", p)? != i {
            return Err(Error::Config(format!("{}: rows out of order at {i}", p.display())));
        }
        let y: usize = parse(field(&rec, 2, p)?, "label", p)?;
        let ya = field(&rec, 3, p)?;
        let target = if ya.is_empty() { y } else { parse(ya, "target", p)? };
        let first = field(&rec, 5, p)?;
        let verdicts = field(&rec, 7, p)?;
        out.push(AttackResult {
            spec: AttackSpec::new(y, target),
            x0: Vec::new(),
            success: parse::<u8>(field(&rec, 4, p)?, "success flag", p)? == 1,
            first_success: if first.is_empty() { None } else { Some(parse(first, "restart", p)?) },
            verdicts: if verdicts.is_empty() {
                Vec::new()
            } else {
                verdicts.split(';').map(|v| parse(v, "verdict", p)).collect::<Result<_>>()?
            },
            trajectory: None,
        });
    }
    let mut s = csv::Reader::from_path(samples_path)?;
    let dim = s.headers()?.len().saturating_sub(3);
    let mut n = 0;
    for rec in s.records() {
        let rec = rec?;
        let p = samples_path;
        let i: usize = parse(field(&rec, 0, p)?, "index", p)?;
        let row = out
            .get_mut(i)
            .ok_or_else(|| Error::Config(format!("{}: index {i} has no result row", p.display())))?;
        row.x0 = (0..dim)
            .map(|j| parse(field(&rec, 3 + j, p)?, "coordinate", p))
            .collect::<Result<_>>()?;
        n += 1;
    }
    if n != out.len() || dim == 0 {
        return Err(Error::Config(format!(
            "{} has {n} samples for {} results",
            samples_path.display(),
            out.len()
        )));
    }
    Ok(out)
}
