use proptest::prelude::*;

use advdiff::advdiff::{
    noise_guidance_update, run_attacks, AttackMode, AttackSpec, GuidanceConfig, SamplerKind,
};
use advdiff::data::{make_ring_mixture, ring_centers, AnalyticDenoiser, Dataset, QuadraticClassifier};
use advdiff::diffusion::{cfg_epsilon, ddim_timesteps, forward_marginal, make_schedule, ScheduleKind};
use advdiff::models::{ClassifierArch, ClassifierParams, TargetClassifier};
use advdiff::numerics::{Activation, Tensor};
use advdiff::rng::{normal_vec, stream};
use advdiff::training::{pgd_attack, PgdConfig};

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.row(i)[l] * b.row(l)[j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn alpha_bar_decreases_in_unit_interval(steps in 1usize..400, lo in 1e-5f64..0.01, span in 0.0f64..0.05) {
        let s = make_schedule(ScheduleKind::Linear, steps, lo, lo + span).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        prop_assert!((s.sigma_bar_sq() - (1.0 - s.alpha_bar(steps))).abs() < 1e-15);
    }

    #[test]
    fn noiseless_forward_marginal_scales(seed in any::<u64>(), t in 1usize..100) {
        let s = make_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::matrix(3, 2, normal_vec(&mut stream(seed, 0), 6));
        let xt = forward_marginal(&x0, t, &Tensor::zeros(&[3, 2]), &s).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            prop_assert!((a - s.alpha_bar(t).sqrt() * b).abs() < 1e-15);
        }
    }

    #[test]
    fn cfg_is_affine_in_w(seed in any::<u64>(), w in -2.0f64..5.0) {
        let mut r = stream(seed, 0);
        let c = Tensor::vector(normal_vec(&mut r, 5));
        let u = Tensor::vector(normal_vec(&mut r, 5));
        prop_assert_eq!(cfg_epsilon(&c, &u, 0.0).unwrap(), c.clone());
        let e = cfg_epsilon(&c, &u, w).unwrap();
        for i in 0..5 {
            let want = c.data()[i] + w * (c.data()[i] - u.data()[i]);
            prop_assert!((e.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_grid_is_strictly_decreasing(stride in 1usize..40, steps in 1usize..60) {
        let total = stride * steps;
        let ts = ddim_timesteps(total, steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(ts[0], total);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
        prop_assert_eq!(*ts.last().unwrap(), stride);
    }

    #[test]
    fn ddim_grid_rejects_non_divisors(total in 2usize..500, steps in 2usize..500) {
        prop_assume!(steps <= total && total % steps != 0);
        prop_assert!(ddim_timesteps(total, steps).is_err());
    }

    #[test]
    fn blocked_matmul_matches_naive_bitwise(seed in any::<u64>(), n in 1usize..11, k in 1usize..9, m in 1usize..7) {
        let mut r = stream(seed, 1);
        let a = Tensor::matrix(n, k, normal_vec(&mut r, n * k));
        let b = Tensor::matrix(k, m, normal_vec(&mut r, k * m));
        prop_assert_eq!(a.matmul(&b).unwrap().into_data(), naive_matmul(&a, &b));
    }

    #[test]
    fn log_probs_normalize(seed in any::<u64>(), classes in 2usize..6) {
        let mut r = stream(seed, 2);
        let arch = ClassifierArch { data_dim: 3, classes, hidden: vec![5], activation: Activation::Tanh };
        let f = ClassifierParams::random(arch, &mut r).unwrap();
        let x = Tensor::matrix(4, 3, normal_vec(&mut r, 12).into_iter().map(|v| 10.0 * v).collect());
        let lp = f.log_probs(&x).unwrap();
        for i in 0..4 {
            let total: f64 = lp.row(i).iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pgd_stays_in_the_box(seed in any::<u64>(), eps in 0.0f64..1.0, steps in 1usize..6, random_start in any::<bool>()) {
        let q = QuadraticClassifier::new(ring_centers(4, 2.0), 0.25).unwrap();
        let mut r = stream(seed, 3);
        let x = Tensor::matrix(5, 2, normal_vec(&mut r, 10));
        let cfg = PgdConfig { epsilon: eps, step_size: eps / 3.0, steps, random_start };
        let adv = pgd_attack(&q, &x, &[0, 1, 2, 3, 0], &cfg, &mut r).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= eps + 1e-15);
        }
    }

    #[test]
    fn zero_noise_guidance_is_identity(seed in any::<u64>()) {
        let q = QuadraticClassifier::new(ring_centers(4, 2.0), 0.25).unwrap();
        let mut r = stream(seed, 4);
        let xt = Tensor::matrix(2, 2, normal_vec(&mut r, 4));
        let x0 = Tensor::matrix(2, 2, normal_vec(&mut r, 4));
        let target = advdiff::advdiff::GuidanceTarget::new(&[AttackSpec::new(0, 1), AttackSpec::new(2, 3)], AttackMode::Targeted);
        prop_assert_eq!(noise_guidance_update(&q, &xt, &x0, &target, 0.0, 0.7).unwrap(), xt);
    }

    #[test]
    fn dataset_csv_round_trips(seed in any::<u64>(), classes in 2usize..5, n in 1usize..6) {
        let d = make_ring_mixture(classes, n, 1.5, 0.3, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p).unwrap();
        prop_assert_eq!(Dataset::read_csv(&p).unwrap(), d);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn attacks_are_independent_of_chunking(seed in any::<u64>(), chunk in 1usize..9, ddim in any::<bool>(), untargeted in any::<bool>()) {
        let s = make_schedule(ScheduleKind::Linear, 30, 1e-3, 0.05).unwrap();
        let den = AnalyticDenoiser::new(ring_centers(4, 2.0), 0.2, s.clone()).unwrap();
        let q = QuadraticClassifier::new(ring_centers(4, 2.0), 0.25).unwrap();
        let mode = if untargeted { AttackMode::Untargeted } else { AttackMode::Targeted };
        let cfg = GuidanceConfig { s: 3.0, restarts: 3, mode, ..GuidanceConfig::mnist_paper() };
        let specs: Vec<AttackSpec> = (0..9).map(|i| AttackSpec::new(i % 4, (i + 1) % 4)).collect();
        let sampler = if ddim { SamplerKind::Ddim { steps: 10 } } else { SamplerKind::Ddpm };
        let whole = run_attacks(&den, &q, &specs, &cfg, &s, sampler, seed, 9).unwrap();
        let split = run_attacks(&den, &q, &specs, &cfg, &s, sampler, seed, chunk).unwrap();
        prop_assert_eq!(&whole, &split);
        for r in &whole {
            prop_assert_eq!(r.verdicts.len(), 3);
            let hits: Vec<usize> = (0..3).filter(|&k| r.spec.is_success(mode, r.verdicts[k])).collect();
            prop_assert_eq!(r.success, !hits.is_empty());
            prop_assert_eq!(r.first_success, hits.first().copied());
            let pred = q.predict(&Tensor::matrix(1, 2, r.x0.clone())).unwrap()[0];
            let expected = *hits.last().unwrap_or(&2);
            prop_assert_eq!(pred, r.verdicts[expected]);
        }
    }
}
