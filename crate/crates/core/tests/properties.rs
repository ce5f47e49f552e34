use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskweigh::bench::RunConfig;
use taskweigh::evo::{
    min_pairwise_distance, mutate, run_search, EsConfig, FnEvaluator, History, SearchSpace, Value, Variable,
};
use taskweigh::grad::ParamSet;
use taskweigh::schedule::AsyncSchedule;
use taskweigh::tasks::Preset;
use taskweigh::weighting::{dynamic_weights, normalize_weights, StepContext, StrategyConfig, StrategyId};
use taskweigh::{PerTask, Task};

fn positive() -> impl Strategy<Value = f64> {
    (-6.0f64..6.0).prop_map(|e| 10f64.powf(e))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn normalized_weights_sum_to_one(a in positive(), b in positive()) {
        let w = normalize_weights(PerTask::new(a, b)).unwrap();
        prop_assert!((w.seg + w.det - 1.0).abs() <= 1e-12);
        let (r, r0) = (w.seg / w.det, a / b);
        prop_assert!(((r - r0) / r0).abs() <= 1e-12, "{r} vs {r0}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn linear_round_trip(lo in -100.0f64..100.0, span in 1e-3f64..1e3, u in 0.0f64..=1.0) {
        let v = Variable::linear("x", lo, lo + span);
        let x = v.denormalize(u).unwrap();
        let back = v.normalize(&x).unwrap();
        prop_assert!((back - u).abs() <= 1e-12 * (1.0 + lo.abs() / span));
        let again = v.denormalize(back).unwrap().as_f64().unwrap();
        let x = x.as_f64().unwrap();
        prop_assert!((again - x).abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn exponential_round_trip(lo in -3.0f64..2.0, decades in 0.5f64..5.0, u in 0.0f64..=1.0) {
        let v = Variable::exponential("w", 10f64.powf(lo), 10f64.powf(lo + decades));
        let x = v.denormalize(u).unwrap().as_f64().unwrap();
        let back = v.normalize(&Value::Number(x)).unwrap();
        prop_assert!((back - u).abs() <= 1e-12);
        let again = v.denormalize(back).unwrap().as_f64().unwrap();
        prop_assert!(((again - x) / x).abs() <= 1e-12);
    }

    #[test]
    fn categorical_round_trip(n in 2usize..8, pick in 0usize..8) {
        let names: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let v = Variable::categorical("k", &refs);
        let i = pick % n;
        let val = Value::Category(names[i].clone());
        let u = v.normalize(&val).unwrap();
        prop_assert_eq!(v.denormalize(u).unwrap(), val);
    }

    #[test]
    fn strategy_weights_are_finite_and_nonnegative(
        id in prop::sample::select(StrategyId::ALL.to_vec()),
        seg in positive(),
        det in positive(),
        prev in prop::option::of((positive(), positive())),
    ) {
        let mut cfg = StrategyConfig::new(id);
        if id.is_meta() {
            cfg.weights = Some([0.7, 0.3]);
        }
        let mut s = cfg.build().unwrap();
        let mut params = ParamSet::new();
        s.register(&mut params).unwrap();
        let ctx = StepContext {
            epoch: 1,
            batch: 0,
            losses: PerTask::new(Some(seg), Some(det)),
            prev_epoch_means: prev.map(|(a, b)| PerTask::new(a, b)),
        };
        if let Some((a, b)) = prev {
            s.end_epoch(PerTask::new(Some(a), Some(b))).unwrap();
        }
        s.observe(&ctx).unwrap();
        let w = s.weights(&ctx, &params).unwrap();
        for t in Task::ALL {
            let x = *w.get(t);
            prop_assert!(x.is_finite() && x >= 0.0, "{id} {t:?} {x}");
        }
    }

    #[test]
    fn dynamic_weighted_seg_term_ignores_seg_scale(seg in positive(), det in positive(), cur in positive(), c in positive()) {
        let a = dynamic_weights(PerTask::new(seg, det)).unwrap().seg * cur;
        let b = dynamic_weights(PerTask::new(c * seg, det)).unwrap().seg * c * cur;
        prop_assert!(((a - b) / a).abs() <= 1e-12);
    }

    #[test]
    fn geometric_contributions_balance(seg in positive(), det in positive()) {
        let s = StrategyConfig::new(StrategyId::Geometric).build().unwrap();
        let ctx = StepContext { losses: PerTask::new(Some(seg), Some(det)), ..Default::default() };
        let w = s.weights(&ctx, &ParamSet::new()).unwrap();
        let (a, b) = (w.seg * seg, w.det * det);
        prop_assert!(((a - b) / a).abs() <= 1e-12, "{a} {b}");
    }

    #[test]
    fn schedule_window_counts(nu_seg in 1u32..=10, nu_det in 1u32..=10, offset in 0u64..1000) {
        let s = AsyncSchedule::new(nu_seg, nu_det).unwrap();
        let lcm = num_lcm(nu_seg as u64, nu_det as u64);
        let mut counts = PerTask::splat(0u64);
        for t in offset..offset + lcm {
            let m = s.mask(t);
            prop_assert_eq!(m, s.mask(t));
            for task in Task::ALL {
                if *m.get(task) {
                    *counts.get_mut(task) += 1;
                }
            }
        }
        prop_assert_eq!(counts.seg, lcm / nu_seg as u64);
        prop_assert_eq!(counts.det, lcm / nu_det as u64);
    }

    #[test]
    fn run_config_round_trip(
        preset in prop::sample::select(Preset::ALL.to_vec()),
        id in prop::sample::select(StrategyId::ALL.to_vec()),
        seed in 0..=i64::MAX as u64,
        epochs in prop::option::of(0usize..100),
        lr in 1e-6f64..1.0,
        nu in prop::option::of((1u32..=10, 1u32..=10)),
        n_val in prop::option::of(1usize..200),
        w in (positive(), positive()),
    ) {
        let mut c = RunConfig::new(preset, id, seed);
        c.epochs = epochs;
        c.lr = lr;
        c.schedule = nu.map(|(a, b)| AsyncSchedule::new(a, b).unwrap());
        c.benchmark.n_val = n_val;
        if id.is_meta() {
            c.strategy.weights = Some([w.0, w.1]);
        }
        let text = c.to_toml().unwrap();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }
}

fn num_lcm(a: u64, b: u64) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    a / gcd(a, b) * b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Random objectives: the history never holds two candidates closer
    /// than the Tabu threshold and the incumbent curve never drops.
    #[test]
    fn search_invariants(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0, freq in 1.0f64..20.0) {
        let space = SearchSpace::new(vec![
            Variable::exponential("w_seg", 0.1, 1000.0),
            Variable::linear("nu", 1.0, 10.0),
        ]).unwrap();
        let cfg = EsConfig { max_evaluations: 40, seed, ..EsConfig::default() };
        let f = move |p: &[f64]| 0.5 + 0.5 * ((p[0] - a) * freq).sin() * ((p[1] - b) * freq).cos();
        let mut h = History::in_memory();
        let out = run_search(&space, &cfg, &FnEvaluator(f), &mut h, 1).unwrap();
        let pts: Vec<Vec<f64>> = out.history.iter().map(|r| r.point.clone()).collect();
        prop_assert!(min_pairwise_distance(&space, &pts) >= cfg.tabu_threshold);
        let curve = h.incumbent_curve();
        prop_assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(out.best.fitness, *curve.last().unwrap());
    }
}

#[test]
fn unbiased_mutation_has_zero_mean_displacement() {
    let space = SearchSpace::new(vec![Variable::linear("x", 0.0, 1.0), Variable::linear("y", 0.0, 1.0)]).unwrap();
    let cfg = EsConfig { bias_coef: 0.0, ..EsConfig::default() };
    let (p1, p2) = ([0.4, 0.5], [0.6, 0.5]);
    let grad = [1.0, -1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let c = mutate(&space, &[&p1, &p2], &grad, &cfg, cfg.sigma, &[], &mut rng).unwrap();
        sum[0] += c[0] - 0.5;
        sum[1] += c[1] - 0.5;
    }
    // Standard error of the mean is sigma / sqrt(n) = 1e-3.
    for s in sum {
        assert!((s / n as f64).abs() < 4e-3, "{}", s / n as f64);
    }
}
