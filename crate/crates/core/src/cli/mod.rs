//! Command-line front end.
//!
//! Exit status: 0 on success, 1 when a check, a training bound or an
//! attack-suite bound fails, 2 for configuration errors (including missing
//! or incompatible checkpoints).

pub mod config;
pub mod tables;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rayon::prelude::*;

use crate::advdiff::{run_attacks, AttackMode, AttackResult, AttackSpec};
use crate::data::{AnalyticDenoiser, Dataset, QuadraticClassifier};
use crate::error::{Error, Result};
use crate::eval::{ConfigEcho, EvalReport};
use crate::models::{
    load_checkpoint, save_classifier, save_denoiser, ClassifierParams, DenoiserParams, NoisePredictor, TargetClassifier,
    TrainingMeta,
};
use crate::rng::{domain, stream, StreamRng};
use crate::sampling::{sample_ddim, sample_ddpm};
use crate::training::{accuracy, adversarial_train, pgd_attack, train_classifier, train_denoiser, write_curve_csv};
use crate::verify::{run_all, VerifyOptions};

pub use config::{Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "advdiff", version, about = "Adversarial guidance for conditional diffusion samplers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for all outputs and checkpoints.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Published guidance settings for the MNIST or ImageNet experiments.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the conditional noise predictor on the ring dataset.
    TrainDenoiser(Common),
    /// Train the target classifier, optionally with PGD adversarial training.
    TrainClassifier(Common),
    /// Run the attack suite and write results, samples and a report.
    Attack(Common),
    /// Rebuild the report from an earlier attack's CSV files.
    Eval(Common),
    /// Run the analytic-oracle property checks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Multiply every tolerance by this factor.
        #[arg(long)]
        tolerance_scale: Option<f64>,
    },
    /// Draw benign class-conditional samples.
    Sample(Common),
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// A check or suite bound failed.
    Failed,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. }
        | Error::NotConverged { .. }
        | Error::AttackNonFinite { .. }
        | Error::NonFinite { .. }
        | Error::InsufficientSamples { .. } => 1,
        _ => 2,
    }
}

/// Parses the arguments, runs the command, and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(Status::Success) => 0,
        Ok(Status::Failed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<Status> {
    match command {
        Command::TrainDenoiser(c) => cmd_train_denoiser(&c),
        Command::TrainClassifier(c) => cmd_train_classifier(&c),
        Command::Attack(c) => cmd_attack(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Verify { common, tolerance_scale } => cmd_verify(&common, tolerance_scale),
        Command::Sample(c) => cmd_sample(&c),
    }
}

/// Defaults, then the file, then `--preset`, then `--seed`.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = common.preset {
        cfg.apply_preset(p);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(&common.out)
}

fn write_resolved(cfg: &RunConfig, out: &Path, command: &str) -> Result<()> {
    let path = out.join(format!("{command}.resolved.toml"));
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

pub fn cmd_train_denoiser(common: &Common) -> Result<Status> {
    let cfg = resolve(common)?;
    let out = prepare_out(common)?;
    write_resolved(&cfg, out, "train-denoiser")?;
    let data = cfg.dataset()?;
    data.write_csv(&out.join("dataset.csv"))?;
    let sched = cfg.schedule()?;
    let tc = cfg.train_denoiser_config();
    let trained = match train_denoiser(&tc, cfg.denoiser_arch(), &data, &sched) {
        Err(Error::NotConverged { loss, bound }) => {
            eprintln!("final loss {loss} is not below {bound}");
            return Ok(Status::Failed);
        }
        other => other?,
    };
    write_curve_csv(&trained.curve, &out.join("denoiser_curve.csv"))?;
    let meta = TrainingMeta {
        seed: tc.seed,
        epochs: tc.epochs,
        final_loss: trained.final_loss(),
    };
    save_denoiser(&trained.params, meta, &out.join(&cfg.denoiser.checkpoint))?;
    println!("final loss {}", trained.final_loss());
    Ok(Status::Success)
}

pub fn cmd_train_classifier(common: &Common) -> Result<Status> {
    let mut cfg = resolve(common)?;
    let out = prepare_out(common)?;
    let data = cfg.dataset()?;
    cfg.resolve_pgd(&data);
    cfg.validate()?;
    write_resolved(&cfg, out, "train-classifier")?;
    let tc = cfg.train_classifier_config();
    let eps = cfg.pgd.epsilon.expect("resolved above");
    let result = if cfg.train_classifier.adversarial {
        adversarial_train(&tc, &cfg.pgd_config(eps), cfg.classifier_arch(), &data)
    } else {
        train_classifier(&tc, cfg.classifier_arch(), &data)
    };
    let trained = match result {
        Err(Error::NotConverged { loss, bound }) => {
            eprintln!("final loss {loss} is not below {bound}");
            return Ok(Status::Failed);
        }
        other => other?,
    };
    write_curve_csv(&trained.curve, &out.join("classifier_curve.csv"))?;
    let meta = TrainingMeta {
        seed: tc.seed,
        epochs: tc.epochs,
        final_loss: trained.final_loss(),
    };
    save_classifier(&trained.params, meta, &out.join(&cfg.classifier.checkpoint))?;

    let test = cfg.held_out()?;
    let clean = accuracy(&trained.params, &test.x, &test.labels)?;
    let pgd_eval = crate::training::PgdConfig {
        random_start: false,
        ..cfg.pgd_config(eps)
    };
    let mut rng = stream(cfg.seed, domain::EVAL);
    let adv = pgd_attack(&trained.params, &test.x, &test.labels, &pgd_eval, &mut rng)?;
    let robust = accuracy(&trained.params, &adv, &test.labels)?;
    let path = out.join("classifier_metrics.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["metric", "value"])?;
    w.write_record(["held_out_accuracy".to_string(), clean.to_string()])?;
    w.write_record(["pgd_misclassification".to_string(), (1.0 - robust).to_string()])?;
    w.write_record(["pgd_epsilon".to_string(), eps.to_string()])?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("held-out accuracy {clean}, PGD misclassification {}", 1.0 - robust);
    Ok(Status::Success)
}

/// Denoiser and classifier selected by `[models]`.
pub struct Models {
    pub denoiser: Box<dyn NoisePredictor>,
    pub classifier: Box<dyn TargetClassifier>,
    pub data: Dataset,
}

fn load_denoiser_checked(cfg: &RunConfig, path: &Path) -> Result<DenoiserParams> {
    let p = DenoiserParams::from_checkpoint(&load_checkpoint(path)?)?;
    let want = cfg.denoiser_arch();
    if p.arch != want {
        return Err(Error::Architecture(format!(
            "{} holds {:?}, configuration expects {:?}",
            path.display(),
            p.arch,
            want
        )));
    }
    Ok(p)
}

fn load_classifier_checked(cfg: &RunConfig, path: &Path) -> Result<ClassifierParams> {
    let p = ClassifierParams::from_checkpoint(&load_checkpoint(path)?)?;
    if p.arch.data_dim != 2 || p.arch.classes != cfg.dataset.classes {
        return Err(Error::Architecture(format!(
            "{} classifies {} classes in {} dimensions, configuration has {} classes in 2",
            path.display(),
            p.arch.classes,
            p.arch.data_dim,
            cfg.dataset.classes
        )));
    }
    Ok(p)
}

pub fn load_models(cfg: &RunConfig, out: &Path) -> Result<Models> {
    let data = cfg.dataset()?;
    let sched = cfg.schedule()?;
    Ok(match cfg.models.source {
        config::ModelSource::Trained => Models {
            denoiser: Box::new(load_denoiser_checked(cfg, &out.join(&cfg.denoiser.checkpoint))?),
            classifier: Box::new(load_classifier_checked(cfg, &out.join(&cfg.classifier.checkpoint))?),
            data,
        },
        config::ModelSource::Analytic => Models {
            denoiser: Box::new(AnalyticDenoiser::from_meta(&data.meta, sched)?),
            classifier: Box::new(QuadraticClassifier::new(data.meta.centers.clone(), cfg.models.tau)?),
            data,
        },
    })
}

/// Attack `i` generates class `i mod K`; targets follow the configured
/// policy, random ones drawn from stream `EVAL + i`.
pub fn attack_specs(cfg: &RunConfig) -> Vec<AttackSpec> {
    let k = cfg.dataset.classes;
    (0..cfg.attack.count)
        .map(|i| {
            let y = i % k;
            let target = match (cfg.guidance.mode, cfg.attack.targets) {
                (AttackMode::Untargeted, _) => y,
                (AttackMode::Targeted, config::TargetPolicy::Next) => (y + 1) % k,
                (AttackMode::Targeted, config::TargetPolicy::Random) => {
                    let mut rng = stream(cfg.seed, domain::EVAL + i as u64);
                    let j = rng.random_range(0..k - 1);
                    if j >= y {
                        j + 1
                    } else {
                        j
                    }
                }
            };
            AttackSpec::new(y, target)
        })
        .collect()
}

fn config_echo(cfg: &RunConfig) -> ConfigEcho {
    ConfigEcho {
        guidance: cfg.guidance.clone(),
        sampler: cfg.attack_sampler(),
        seed: cfg.seed,
        attacks: cfg.attack.count,
    }
}

fn report(cfg: &RunConfig, out: &Path, models: &Models, results: &[AttackResult], stem: &str) -> Result<Status> {
    let second = match &cfg.eval.oracle_classifier {
        Some(p) => Some(load_classifier_checked(cfg, &out.join(p))?),
        None => None,
    };
    let report = EvalReport::build(
        results,
        models.classifier.as_ref(),
        second.as_ref().map(|c| c as &dyn TargetClassifier),
        &models.data.meta,
        config_echo(cfg),
    )?;
    report.write(&out.join(format!("{stem}.toml")), &out.join(format!("{stem}.csv")))?;
    println!(
        "ASR {}  flipped-label rate {}  mean shift {}",
        report.asr, report.flipped_label_rate, report.mean_shift
    );
    match cfg.attack.min_asr {
        Some(min) if report.asr < min => {
            eprintln!("ASR {} is below the required {min}", report.asr);
            Ok(Status::Failed)
        }
        _ => Ok(Status::Success),
    }
}

pub fn cmd_attack(common: &Common) -> Result<Status> {
    let cfg = resolve(common)?;
    let out = prepare_out(common)?;
    let models = load_models(&cfg, out)?;
    write_resolved(&cfg, out, "attack")?;
    let sched = cfg.schedule()?;
    let specs = attack_specs(&cfg);
    let results = with_threads(cfg.attack.threads, || {
        run_attacks(
            models.denoiser.as_ref(),
            models.classifier.as_ref(),
            &specs,
            &cfg.guidance,
            &sched,
            cfg.attack_sampler(),
            cfg.seed,
            cfg.attack.chunk,
        )
    })??;
    let mode = cfg.guidance.mode;
    tables::write_attack_results(&out.join("attack_results.csv"), &results, mode, cfg.seed)?;
    tables::write_attack_samples(&out.join("attack_samples.csv"), &results, mode)?;
    if cfg.guidance.record_trajectory {
        tables::write_attack_trajectories(&out.join("attack_trajectory.csv"), &results)?;
    }
    report(&cfg, out, &models, &results, "attack_report")
}

pub fn cmd_eval(common: &Common) -> Result<Status> {
    let cfg = resolve(common)?;
    let out = prepare_out(common)?;
    let models = load_models(&cfg, out)?;
    let results = tables::read_attack_results(&out.join("attack_results.csv"), &out.join("attack_samples.csv"))?;
    write_resolved(&cfg, out, "eval")?;
    report(&cfg, out, &models, &results, "eval_report")
}

pub fn cmd_verify(common: &Common, tolerance_scale: Option<f64>) -> Result<Status> {
    let mut cfg = resolve(common)?;
    if let Some(t) = tolerance_scale {
        cfg.verify.tolerance_scale = t;
        cfg.validate()?;
    }
    let out = prepare_out(common)?;
    write_resolved(&cfg, out, "verify")?;
    let opts = VerifyOptions {
        tolerance_scale: cfg.verify.tolerance_scale,
        seed: cfg.seed,
        mutation: None,
    };
    let checks = run_all(&opts)?;
    let path = out.join("verify.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for c in &checks {
        println!("{c}");
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(if failed == 0 { Status::Success } else { Status::Failed })
}

pub fn cmd_sample(common: &Common) -> Result<Status> {
    let cfg = resolve(common)?;
    let out = prepare_out(common)?;
    let models = load_models(&cfg, out)?;
    write_resolved(&cfg, out, "sample")?;
    let sched = cfg.schedule()?;
    let s = &cfg.sample;
    let k = cfg.dataset.classes;
    let labels: Vec<usize> = (0..s.per_class * k).map(|i| i % k).collect();
    let chunk = s.chunk.max(1);
    let den = models.denoiser.as_ref();
    let batches = with_threads(s.threads, || {
        labels
            .par_chunks(chunk)
            .enumerate()
            .map(|(c, batch)| {
                let mut rngs: Vec<StreamRng> = (0..batch.len())
                    .map(|j| stream(cfg.seed, domain::SAMPLE + (c * chunk + j) as u64))
                    .collect();
                match s.sampler {
                    config::SamplerName::Ddpm => sample_ddpm(den, batch, s.w, &sched, &mut rngs),
                    config::SamplerName::Ddim => sample_ddim(den, batch, s.w, &sched, s.ddim_steps, &mut rngs),
                }
            })
            .collect::<Vec<_>>()
    })?;
    let mut rows = Vec::with_capacity(labels.len());
    for b in batches {
        let b = b?;
        rows.extend((0..b.rows()).map(|i| b.row(i).to_vec()));
    }
    let x = crate::numerics::Tensor::from_rows(&rows)?;
    tables::write_samples(&out.join("samples.csv"), &x, &labels)?;
    Ok(Status::Success)
}
