//! Analytic gradients against central finite differences.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::*;
use taskweigh::grad::{Graph, Partition, Tensor, Var};
use taskweigh::weighting::StrategyId;
use taskweigh::{PerTask, Task};

fn check(name: &str, case: impl FnMut(&mut ChaCha8Rng, u64) -> (Box<Build<'static>>, Vec<Tensor>)) {
    let worst = worst_error(name, case);
    assert!(worst <= TOL, "{name}: worst relative error {worst:e}");
}

fn check_strategy(id: StrategyId) {
    let worst = strategy_worst_error(id);
    assert!(worst <= TOL, "{id}: worst relative error {worst:e}");
}

macro_rules! unary {
    ($test:ident, $op:ident, $gen:expr) => {
        #[test]
        fn $test() {
            check(stringify!($test), |rng, seed| {
                let shape = dims(rng);
                let x = $gen(rng, &shape);
                (Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = g.$op(v[0])?;
                    project(g, y, seed)
                }), vec![x])
            });
        }
    };
}

unary!(relu, relu, |r: &mut ChaCha8Rng, s: &[usize]| away_from_zero(r, s, 1e-3));
unary!(sigmoid, sigmoid, |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s));
unary!(exp, exp, |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s));
unary!(log, log, |r: &mut ChaCha8Rng, s: &[usize]| positive(r, s, 0.1, 5.0));
unary!(abs, abs, |r: &mut ChaCha8Rng, s: &[usize]| away_from_zero(r, s, 1e-3));
unary!(neg, neg, |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s));
unary!(softmax, softmax, |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s));
unary!(sum, sum, |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s));
unary!(mean, mean, |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s));

macro_rules! binary {
    ($test:ident, $op:ident) => {
        #[test]
        fn $test() {
            check(stringify!($test), |rng, seed| {
                let shape = dims(rng);
                let (a, b) = (rand_tensor(rng, &shape), rand_tensor(rng, &shape));
                (Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = g.$op(v[0], v[1])?;
                    project(g, y, seed)
                }), vec![a, b])
            });
        }
    };
}

binary!(add, add);
binary!(sub, sub);
binary!(mul, mul);

#[test]
fn scale_and_shift() {
    check("scale_and_shift", |rng, seed| {
        let shape = dims(rng);
        let (c, k) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        (
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.scale(v[0], c)?;
                let y = g.add_scalar(y, k)?;
                project(g, y, seed)
            }),
            vec![rand_tensor(rng, &shape)],
        )
    });
}

#[test]
fn pow() {
    check("pow", |rng, seed| {
        let shape = dims(rng);
        let p = rng.random_range(-2.0..3.0);
        (
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.pow(v[0], p)?;
                project(g, y, seed)
            }),
            vec![positive(rng, &shape, 0.2, 3.0)],
        )
    });
}

#[test]
fn clamp_min() {
    check("clamp_min", |rng, seed| {
        let shape = dims(rng);
        let x = away_from_zero(rng, &shape, 1e-3);
        (
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.clamp_min(v[0], 0.0)?;
                project(g, y, seed)
            }),
            vec![x],
        )
    });
}

#[test]
fn reshape_and_select_cols() {
    check("reshape_and_select_cols", |rng, seed| {
        let (r, c) = (rng.random_range(1..4), rng.random_range(2..5));
        let start = rng.random_range(0..c - 1);
        let len = rng.random_range(1..=c - start);
        (
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.reshape(v[0], &[r, c])?;
                let y = g.select_cols(y, start, len)?;
                let y = g.exp(y)?;
                project(g, y, seed)
            }),
            vec![rand_tensor(rng, &[r * c])],
        )
    });
}

#[test]
fn matmul_and_bias() {
    check("matmul_and_bias", |rng, seed| {
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        (
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.add_bias(y, v[2])?;
                project(g, y, seed)
            }),
            vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n]), rand_tensor(rng, &[n])],
        )
    });
}

#[test]
fn conv2d_and_channels_last() {
    check("conv2d_and_channels_last", |rng, seed| {
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
        let (h, w) = (rng.random_range(2..5), rng.random_range(2..5));
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        (
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                let y = g.channels_last(y)?;
                project(g, y, seed)
            }),
            vec![
                rand_tensor(rng, &[n, c, h, w]),
                rand_tensor(rng, &[o, c, k, k]),
                rand_tensor(rng, &[o]),
            ],
        )
    });
}

fn maybe_weights(rng: &mut ChaCha8Rng, n: usize) -> Option<Vec<f64>> {
    rng.random_bool(0.5).then(|| (0..n).map(|_| rng.random_range(0.0..2.0)).collect())
}

#[test]
fn squared_error() {
    check("squared_error", |rng, _| {
        let n = rng.random_range(1..8);
        let target: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let w = maybe_weights(rng, n);
        (
            Box::new(move |g: &mut Graph, v: &[Var]| g.squared_error(v[0], &target, w.as_deref())),
            vec![rand_tensor(rng, &[n])],
        )
    });
}

#[test]
fn cross_entropy() {
    check("cross_entropy", |rng, _| {
        let (r, c) = (rng.random_range(1..5), rng.random_range(2..5));
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        let w = maybe_weights(rng, r);
        (
            Box::new(move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &targets, w.as_deref())),
            vec![rand_tensor(rng, &[r, c])],
        )
    });
}

#[test]
fn bce_with_logits() {
    check("bce_with_logits", |rng, _| {
        let n = rng.random_range(1..8);
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let w = maybe_weights(rng, n);
        (
            Box::new(move |g: &mut Graph, v: &[Var]| g.bce_with_logits(v[0], &targets, w.as_deref())),
            vec![rand_tensor(rng, &[n])],
        )
    });
}

#[test]
fn random_three_layer_network() {
    check("random_three_layer_network", |rng, _| network_case(rng));
}

#[test]
fn uncertainty_total_loss() {
    check_strategy(StrategyId::Uncertainty);
}

#[test]
fn learned_total_loss() {
    check_strategy(StrategyId::Learned);
}

#[test]
fn geometric_total_loss() {
    check_strategy(StrategyId::Geometric);
}

#[test]
fn learned_logit_gradient_sign() {
    // d L / d w = a (1 - a) (L_seg - L_det): positive when seg is the larger loss,
    // so descent lowers the seg weight.
    let (s, mut p) = strategy_params(StrategyId::Learned);
    let name = p.names_in(Partition::Weighting).next().unwrap().to_string();
    strategy_total(s.as_ref(), &mut p, PerTask::new(3.0, 1.0), true);
    let d = p.tensor(&name).unwrap().grad().unwrap()[0];
    assert!((d - 0.25 * 2.0).abs() < 1e-12, "{d}");
}

#[test]
fn gradnorm_objective() {
    let worst = gradnorm_worst_error();
    assert!(worst <= TOL, "gradnorm: worst relative error {worst:e}");
}

#[test]
fn full_model_losses() {
    use taskweigh::net::{ArchConfig, MtlModel};
    use taskweigh::tasks::{det_loss, render_scene, seg_loss, BenchmarkConfig, Preset, Scene};

    let cfg = BenchmarkConfig::preset(Preset::ImbalancedSeg, 5);
    let scenes: Vec<Scene> = (0..2).map(|i| render_scene(&cfg, i)).collect();
    let refs: Vec<&Scene> = scenes.iter().collect();
    let mut model = MtlModel::build(ArchConfig::for_benchmark(&cfg), 5).unwrap();
    let total = |m: &MtlModel, into: Option<&mut taskweigh::grad::ParamSet>| {
        let mut g = Graph::new();
        let out = m.forward_scenes(&mut g, &refs, &Task::ALL).unwrap();
        let ls = seg_loss(&mut g, out.seg.unwrap(), &refs).unwrap();
        let ld = det_loss(&mut g, out.det.unwrap(), &refs, &cfg).unwrap();
        let t = g.add(ls, ld).unwrap();
        if let Some(p) = into {
            g.backward_into(t, p).unwrap();
        }
        g.item(t)
    };
    let mut params = model.params.clone();
    total(&model, Some(&mut params));

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let names: Vec<String> = model.params.iter().map(|e| e.name.clone()).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for name in &names {
        let grad = params.tensor(name).unwrap().grad().unwrap().to_vec();
        for _ in 0..5 {
            let i = rng.random_range(0..grad.len());
            let x = model.params.tensor(name).unwrap().data()[i];
            model.params.get_mut(name).unwrap().tensor.data_mut()[i] = x + H;
            let up = total(&model, None);
            model.params.get_mut(name).unwrap().tensor.data_mut()[i] = x - H;
            let down = total(&model, None);
            model.params.get_mut(name).unwrap().tensor.data_mut()[i] = x;
            analytic.push(grad[i]);
            numeric.push((up - down) / (2.0 * H));
        }
    }
    let e = vec_rel_error(&analytic, &numeric);
    assert!(e <= TOL, "model: relative error {e:e}");
}
