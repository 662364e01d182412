//! Acceptance suite: one line per criterion on stderr, then a failing
//! assertion if any criterion failed.
//!
//! Lines tagged `info` are supporting measurements, not criteria.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advdiff::advdiff::{
    advdiff_ddim_batch, advdiff_ddpm_batch, attack_stream, run_attacks, AttackSpec, GuidanceConfig, SamplerKind,
};
use advdiff::cli::{self, Common, Preset, Status};
use advdiff::data::{ring_centers, AnalyticDenoiser, QuadraticClassifier};
use advdiff::diffusion::{make_schedule, ScheduleKind};
use advdiff::eval::EvalReport;
use advdiff::models::{load_classifier, load_denoiser};
use advdiff::rng::StreamRng;
use advdiff::sampling::{sample_ddim, sample_ddpm};
use advdiff::verify::{self, VerifyOptions};

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn record(outcomes: &mut Vec<Outcome>, id: u32, name: &'static str, passed: bool, detail: String) {
    say(&format!(
        "criterion {id:>2} {} {name}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    ));
    outcomes.push(Outcome {
        id,
        name,
        passed,
        detail,
    });
}

fn info(line: String) {
    say(&format!("info         {line}"));
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn common(out: &Path, config: &Path, preset: Option<Preset>) -> Common {
    Common {
        config: Some(config.to_path_buf()),
        seed: None,
        out: out.to_path_buf(),
        preset,
    }
}

fn run_cmd(command: cli::Command) -> Status {
    cli::run(command).unwrap_or_else(|e| panic!("command failed: {e}"))
}

fn attack(out: &Path, config_text: &str, preset: Option<Preset>) -> EvalReport {
    fs::create_dir_all(out).unwrap();
    let cfg = out.join("run.toml");
    fs::write(&cfg, config_text).unwrap();
    run_cmd(cli::Command::Attack(common(out, &cfg, preset)));
    toml::from_str(&fs::read_to_string(out.join("attack_report.toml")).unwrap()).unwrap()
}

/// Default ring configuration with checkpoints at absolute paths.
fn models_config(dir: &Path, classifier: &str, extra: &str) -> String {
    format!(
        "[denoiser]\ncheckpoint = \"{}\"\n[classifier]\ncheckpoint = \"{}\"\n[attack]\nthreads = 1\n{extra}",
        dir.join("denoiser.ckpt").display(),
        dir.join(classifier).display()
    )
}

fn metric(path: &Path, name: &str) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .unwrap()
        .parse()
        .unwrap()
}

fn all_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn acceptance_criteria() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let outcomes = pool.install(run_criteria);
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{} ({}: {})", o.id, o.name, o.detail))
        .collect();
    say(&format!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    ));
    assert!(failed.is_empty(), "failed criteria: {}", failed.join("; "));
}

fn run_criteria() -> Vec<Outcome> {
    let mut out = Vec::new();
    let opts = VerifyOptions::default();

    let t = Instant::now();
    let c = verify::gradient_vs_finite_differences(&opts).unwrap();
    let el = t.elapsed();
    record(
        &mut out,
        1,
        "gradient correctness",
        c.passed && el < Duration::from_secs(10),
        format!("max relative error {:.2e} (< 1e-4), {}", c.measured, secs(el)),
    );

    let t = Instant::now();
    let cs = verify::forward_marginal_law(&opts).unwrap();
    let el = t.elapsed();
    let worst = cs.iter().map(|c| c.measured).fold(0.0, f64::max);
    record(
        &mut out,
        2,
        "forward-marginal law",
        cs.iter().all(|c| c.passed) && el < Duration::from_secs(10),
        format!("worst deviation {worst:.2} standard errors (<= 3), {}", secs(el)),
    );

    let t = Instant::now();
    let cs = verify::one_step_guidance_law(&opts).unwrap();
    let el = t.elapsed();
    let zs: Vec<String> = cs.iter().map(|c| format!("{:.2}", c.measured)).collect();
    record(
        &mut out,
        3,
        "one-step guidance law",
        cs.iter().all(|c| c.passed) && el < Duration::from_secs(30),
        format!("z at s = 0.1, 0.5, 1.0: {} (<= 3), {}", zs.join(", "), secs(el)),
    );

    let analytic = verify::guidance_off_equivalence(&opts).unwrap();
    let gap = verify::two_class_gradient_gap(opts.seed, 50).unwrap();
    let two_class_ok = gap.probability <= 1e-10 && gap.direction <= 1e-10;

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let trained = root.join("trained");
    fs::create_dir_all(&trained).unwrap();
    let base_cfg = root.join("base.toml");
    fs::write(&base_cfg, "").unwrap();

    let t = Instant::now();
    let s = run_cmd(cli::Command::TrainDenoiser(common(&trained, &base_cfg, None)));
    let denoiser_time = t.elapsed();
    let t = Instant::now();
    run_cmd(cli::Command::TrainClassifier(common(&trained, &base_cfg, None)));
    let classifier_time = t.elapsed();
    let final_loss = load_denoiser(&trained.join("denoiser.ckpt")).unwrap().1.final_loss;
    info(format!(
        "denoiser final loss {final_loss:.4} ({}, bound met: {}), classifier held-out accuracy {:.3} ({})",
        secs(denoiser_time),
        s == Status::Success,
        metric(&trained.join("classifier_metrics.csv"), "held_out_accuracy"),
        secs(classifier_time)
    ));

    let trained_equiv = trained_guidance_off(&trained);
    record(
        &mut out,
        4,
        "guidance-off equivalence",
        analytic.passed && trained_equiv,
        format!(
            "DDPM and DDIM bitwise equal to benign sampling: analytic oracles {}, trained models {}",
            analytic.passed, trained_equiv
        ),
    );

    record(
        &mut out,
        5,
        "two-class gradient identity",
        two_class_ok,
        format!(
            "max |p(y_a) grad log p(y_a) + p(y) grad log p(y)| {:.1e}, max unit-direction gap {:.1e} (<= 1e-10); \
             unscaled |grad log p(y_a) + grad log p(y)| is {:.2}",
            gap.probability, gap.direction, gap.raw
        ),
    );

    let preset_cfg = models_config(&trained, "classifier.ckpt", "count = 500\n");
    let t = Instant::now();
    let ddpm = attack(&root.join("ddpm"), &preset_cfg, Some(Preset::MnistPaper));
    let ddpm_time = t.elapsed();
    let benign = attack(
        &root.join("benign"),
        &format!("{preset_cfg}[guidance]\ns = 0.0\na = 0.0\nrestarts = 1\n"),
        None,
    );
    let total = denoiser_time + classifier_time + ddpm_time;
    let shift_ok = ddpm.mean_shift <= 3.0 * benign.mean_shift;
    record(
        &mut out,
        6,
        "end-to-end toy attack",
        ddpm.asr >= 0.70 && ddpm.flipped_label_rate <= 0.10 && shift_ok && total < Duration::from_secs(600),
        format!(
            "ASR {:.3} (>= 0.70), flipped-label rate {:.3}{} (<= 0.10), mean shift {:.3} vs benign {:.3} (<= 3x), \
             train + attack {}",
            ddpm.asr,
            ddpm.flipped_label_rate,
            if ddpm.flipped_no_successes { " [no successes]" } else { "" },
            ddpm.mean_shift,
            benign.mean_shift,
            secs(total)
        ),
    );
    info(format!("benign DDPM misclassification by the attacked classifier: {:.3}", benign.asr));

    let ddim_cfg = format!("{preset_cfg}sampler = \"ddim\"\nddim_steps = 50\n");
    let ddim = attack(&root.join("ddim_a"), &ddim_cfg, Some(Preset::MnistPaper));
    attack(&root.join("ddim_b"), &ddim_cfg, Some(Preset::MnistPaper));
    let identical = ["attack_results.csv", "attack_samples.csv", "attack_report.toml"]
        .iter()
        .all(|f| fs::read(root.join("ddim_a").join(f)).unwrap() == fs::read(root.join("ddim_b").join(f)).unwrap());
    let diff = (ddim.asr - ddpm.asr).abs();
    record(
        &mut out,
        7,
        "DDPM/DDIM consistency",
        diff <= 0.10 && identical,
        format!(
            "DDIM ASR {:.3} vs DDPM {:.3}, gap {:.1} points (<= 10); DDIM repeat bitwise identical: {identical}",
            ddim.asr,
            ddpm.asr,
            100.0 * diff
        ),
    );
    info(format!(
        "DDIM flipped-label rate {:.3}, mean shift {:.3}",
        ddim.flipped_label_rate, ddim.mean_shift
    ));

    let strong = "count = 200\n[guidance]\ns = 8.0\n";
    let strong_ddpm = attack(
        &root.join("strong_ddpm"),
        &models_config(&trained, "classifier.ckpt", strong),
        None,
    );
    let strong_ddim = attack(
        &root.join("strong_ddim"),
        &models_config(&trained, "classifier.ckpt", &format!("sampler = \"ddim\"\n{strong}")),
        None,
    );
    info(format!(
        "s = 8 (200 attacks): DDPM ASR {:.3} flipped {:.3} shift {:.3}; DDIM ASR {:.3} flipped {:.3} shift {:.3}",
        strong_ddpm.asr,
        strong_ddpm.flipped_label_rate,
        strong_ddpm.mean_shift,
        strong_ddim.asr,
        strong_ddim.flipped_label_rate,
        strong_ddim.mean_shift
    ));

    let t = Instant::now();
    let at_cfg = root.join("at.toml");
    fs::write(
        &at_cfg,
        "[classifier]\ncheckpoint = \"classifier_at.ckpt\"\n[train_classifier]\nadversarial = true\n",
    )
    .unwrap();
    let at_dir = root.join("at");
    fs::create_dir_all(&at_dir).unwrap();
    run_cmd(cli::Command::TrainClassifier(common(&at_dir, &at_cfg, None)));
    fs::copy(at_dir.join("classifier_at.ckpt"), trained.join("classifier_at.ckpt")).unwrap();
    let ddpm_at = attack(
        &root.join("ddpm_at"),
        &models_config(&trained, "classifier_at.ckpt", "count = 500\n"),
        Some(Preset::MnistPaper),
    );
    let at_time = t.elapsed();
    let pgd_clean = metric(&trained.join("classifier_metrics.csv"), "pgd_misclassification");
    let pgd_at = metric(&at_dir.join("classifier_metrics.csv"), "pgd_misclassification");
    let eps = metric(&at_dir.join("classifier_metrics.csv"), "pgd_epsilon");
    let pgd_drop = pgd_clean - pgd_at;
    let adv_drop = ddpm.asr - ddpm_at.asr;
    record(
        &mut out,
        8,
        "adversarial-training trend",
        pgd_drop >= 0.30 && adv_drop <= 0.15 && at_time < Duration::from_secs(900),
        format!(
            "PGD (eps {eps:.3}) misclassification {pgd_clean:.3} -> {pgd_at:.3}, drop {:.1} points (>= 30); \
             AdvDiff ASR {:.3} -> {:.3}, drop {:.1} points (<= 15); {}",
            100.0 * pgd_drop,
            ddpm.asr,
            ddpm_at.asr,
            100.0 * adv_drop,
            secs(at_time)
        ),
    );
    info(format!(
        "AT classifier held-out accuracy {:.3}",
        metric(&at_dir.join("classifier_metrics.csv"), "held_out_accuracy")
    ));
    let strong_at = attack(
        &root.join("strong_at"),
        &models_config(&trained, "classifier_at.ckpt", strong),
        None,
    );
    info(format!(
        "s = 8 (200 attacks): AdvDiff ASR {:.3} against the clean classifier, {:.3} after PGD-AT",
        strong_ddpm.asr, strong_at.asr
    ));

    let (s_curve, n_curve) = ablation(&[0.0, 0.1, 0.25, 0.5], &[1, 5, 10], 500);
    let monotone = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", ");
    record(
        &mut out,
        9,
        "ablation monotonicity",
        monotone(&s_curve) && monotone(&n_curve),
        format!(
            "analytic oracles, DDPM, 500 runs per point: ASR over s = 0, 0.1, 0.25, 0.5: [{}]; over N = 1, 5, 10: [{}]",
            fmt(&s_curve),
            fmt(&n_curve)
        ),
    );
    let (wide, _) = ablation(&[1.0, 2.0, 4.0, 8.0], &[], 500);
    info(format!("analytic DDPM ASR over s = 1, 2, 4, 8: [{}]", fmt(&wide)));

    let (reproducible, detail) = reproducibility(root);
    record(&mut out, 10, "reproducibility", reproducible, detail);

    out
}

/// Attack with guidance switched off against benign sampling on shared
/// streams, with the trained checkpoints.
fn trained_guidance_off(dir: &Path) -> bool {
    let (den, _) = load_denoiser(&dir.join("denoiser.ckpt")).unwrap();
    let (clf, _) = load_classifier(&dir.join("classifier.ckpt")).unwrap();
    let sched = make_schedule(ScheduleKind::Linear, 500, 1e-4, 0.02).unwrap();
    let cfg = GuidanceConfig::benign(1.0);
    let specs: Vec<AttackSpec> = (0..16).map(|i| AttackSpec::new(i % 8, (i + 3) % 8)).collect();
    let labels: Vec<usize> = specs.iter().map(|s| s.y).collect();
    let streams = || -> Vec<StreamRng> { (0..16).map(|i| attack_stream(17, i)).collect() };
    let a = advdiff_ddpm_batch(&den, &clf, &specs, &cfg, &sched, &mut streams()).unwrap();
    let b = sample_ddpm(&den, &labels, 1.0, &sched, &mut streams()).unwrap();
    let ddpm_ok = (0..16).all(|i| a[i].x0 == b.row(i));
    let a = advdiff_ddim_batch(&den, &clf, &specs, &cfg, &sched, 50, &mut streams()).unwrap();
    let b = sample_ddim(&den, &labels, 1.0, &sched, 50, &mut streams()).unwrap();
    ddpm_ok && (0..16).all(|i| a[i].x0 == b.row(i))
}

/// Targeted ASR with the analytic oracles at the MNIST preset, varying `s`
/// at `N = 10` and `N` at `s = 0.5`. Every point shares the same seeds.
fn ablation(scales: &[f64], restarts: &[usize], runs: usize) -> (Vec<f64>, Vec<f64>) {
    let sched = make_schedule(ScheduleKind::Linear, 500, 1e-4, 0.02).unwrap();
    let den = AnalyticDenoiser::new(ring_centers(8, 2.0), 0.2, sched.clone()).unwrap();
    let q = QuadraticClassifier::new(ring_centers(8, 2.0), 0.25).unwrap();
    let specs: Vec<AttackSpec> = (0..runs).map(|i| AttackSpec::new(i % 8, (i % 8 + 1 + (i / 8) % 7) % 8)).collect();
    let asr = |cfg: GuidanceConfig| {
        let r = run_attacks(&den, &q, &specs, &cfg, &sched, SamplerKind::Ddpm, 0, 16).unwrap();
        r.iter().filter(|r| r.success).count() as f64 / runs as f64
    };
    let preset = GuidanceConfig::mnist_paper();
    let s_curve = scales.iter().map(|&s| asr(GuidanceConfig { s, ..preset.clone() })).collect();
    let n_curve = restarts
        .iter()
        .map(|&n| asr(GuidanceConfig { restarts: n, ..preset.clone() }))
        .collect();
    (s_curve, n_curve)
}

/// Every command twice serially and once in parallel; all outputs must
/// match bitwise (resolved configs only between the serial runs, since they
/// record the thread count).
fn reproducibility(root: &Path) -> (bool, String) {
    let small = "[dataset]\nper_class = 60\nheld_out_per_class = 30\n[schedule]\nsteps = 100\n\
                 [train_denoiser]\nepochs = 5\nmax_final_loss = 10.0\n[train_classifier]\nepochs = 5\n\
                 [sample]\nper_class = 4\n[guidance]\nrestarts = 3\n";
    let run_all = |name: &str, threads: usize, chunk: usize| -> PathBuf {
        let out = root.join(name);
        fs::create_dir_all(&out).unwrap();
        let body = format!(
            "{small}[attack]\ncount = 40\nthreads = {threads}\nchunk = {chunk}\n",
        );
        let cfg = out.join("run.toml");
        fs::write(&cfg, body.replace("[sample]\n", &format!("[sample]\nthreads = {threads}\nchunk = {chunk}\n")))
            .unwrap();
        let at = out.join("at.toml");
        fs::write(
            &at,
            format!(
                "{}\n",
                fs::read_to_string(&cfg)
                    .unwrap()
                    .replace("[train_classifier]\n", "[train_classifier]\nadversarial = true\n")
                    + "[classifier]\ncheckpoint = \"classifier_at.ckpt\"\n"
            ),
        )
        .unwrap();
        let c = common(&out, &cfg, None);
        run_cmd(cli::Command::TrainDenoiser(c.clone()));
        run_cmd(cli::Command::TrainClassifier(common(&out, &at, None)));
        fs::rename(out.join("classifier_metrics.csv"), out.join("classifier_at_metrics.csv")).unwrap();
        fs::rename(out.join("classifier_curve.csv"), out.join("classifier_at_curve.csv")).unwrap();
        fs::rename(out.join("train-classifier.resolved.toml"), out.join("train-classifier-at.resolved.toml")).unwrap();
        run_cmd(cli::Command::TrainClassifier(c.clone()));
        run_cmd(cli::Command::Sample(c.clone()));
        run_cmd(cli::Command::Attack(c.clone()));
        for f in ["attack_results.csv", "attack_samples.csv", "attack_report.toml", "attack_report.csv"] {
            fs::rename(out.join(f), out.join(format!("ddpm_{f}"))).unwrap();
        }
        let ddim = out.join("ddim.toml");
        fs::write(&ddim, fs::read_to_string(&cfg).unwrap().replace("[attack]\n", "[attack]\nsampler = \"ddim\"\nddim_steps = 20\n"))
            .unwrap();
        run_cmd(cli::Command::Attack(common(&out, &ddim, None)));
        run_cmd(cli::Command::Eval(common(&out, &ddim, None)));
        run_cmd(cli::Command::Verify {
            common: c,
            tolerance_scale: None,
        });
        out
    };
    let a = run_all("serial_a", 1, 1);
    let b = run_all("serial_b", 1, 1);
    let p = run_all("parallel", 4, 7);
    let files = all_files(&a);
    let mut mismatches = Vec::new();
    for f in &files {
        let name = f.file_name().unwrap().to_str().unwrap();
        let bytes = fs::read(f).unwrap();
        if fs::read(b.join(name)).ok().as_ref() != Some(&bytes) {
            mismatches.push(format!("{name} (serial repeat)"));
        }
        let is_config = name.ends_with(".toml") && !name.contains("report");
        if !is_config && fs::read(p.join(name)).ok().as_ref() != Some(&bytes) {
            mismatches.push(format!("{name} (parallel)"));
        }
    }
    let commands = "train-denoiser, train-classifier (plain and PGD-AT), sample, attack (DDPM and DDIM), eval, verify";
    if mismatches.is_empty() {
        (
            true,
            format!("{} output files identical across two serial runs and a 4-thread run; {commands}", files.len()),
        )
    } else {
        (false, format!("differing outputs: {}", mismatches.join(", ")))
    }
}
