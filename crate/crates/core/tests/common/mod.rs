//! Finite-difference helpers shared by the gradient checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use taskweigh::grad::{Graph, ParamSet, Partition, Tensor, Var};
use taskweigh::weighting::{gradnorm_loss, StepContext, StrategyConfig, StrategyId, Weighting};
use taskweigh::{PerTask, Result, Task};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CASES: usize = 100;

pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Reduces any output to a scalar through a fixed random projection.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = g.constant(Tensor::new(shape, c)?);
    let m = g.mul(out, c)?;
    g.sum(m)
}

pub fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    g.item(out)
}

/// `||analytic - numeric|| / (||analytic|| + ||numeric||)` over every input element.
pub fn rel_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
    }
    let denom = na.sqrt() + nn.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

/// Entries with magnitude at least `gap`, so kinks sit outside the stencil.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } * 2.0;
        }
    }
    t
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(1..5)]
}

/// Worst relative error over `CASES` random cases.
pub fn worst_error(name: &str, mut case: impl FnMut(&mut ChaCha8Rng, u64) -> (Box<Build<'static>>, Vec<Tensor>)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    for i in 0..CASES {
        let (build, inputs) = case(&mut rng, i as u64);
        let e = rel_error(build.as_ref(), &inputs);
        if !e.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(e);
    }
    worst
}

pub fn strategy_params(id: StrategyId) -> (Box<dyn Weighting>, ParamSet) {
    let mut s = StrategyConfig::new(id).build().unwrap();
    let mut p = ParamSet::new();
    s.register(&mut p).unwrap();
    (s, p)
}

pub fn strategy_total(s: &dyn Weighting, p: &mut ParamSet, losses: PerTask<f64>, into: bool) -> (f64, PerTask<f64>) {
    let mut g = Graph::new();
    let ls = g.variable(Tensor::scalar(losses.seg));
    let ld = g.variable(Tensor::scalar(losses.det));
    let ctx = StepContext {
        losses: PerTask::new(Some(losses.seg), Some(losses.det)),
        ..StepContext::default()
    };
    let total = s.total_loss(&mut g, &ctx, p, PerTask::new(Some(ls), Some(ld))).unwrap();
    let mut dl = PerTask::splat(0.0);
    if into {
        let grads = g.backward_into(total, p).unwrap();
        dl = PerTask::new(grads.get(ls).unwrap()[0], grads.get(ld).unwrap()[0]);
    }
    (g.item(total), dl)
}

/// Checks the total loss against finite differences in both the strategy's
/// parameters and the two task losses.
pub fn strategy_worst_error(id: StrategyId) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(id.as_str().len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (s, mut p) = strategy_params(id);
        let names: Vec<String> = p.names_in(Partition::Weighting).map(str::to_string).collect();
        for n in &names {
            p.get_mut(n).unwrap().tensor.data_mut()[0] = rng.random_range(-2.0..2.0);
        }
        let losses = PerTask::new(rng.random_range(0.05..5.0), rng.random_range(0.05..5.0));
        let (_, dl) = strategy_total(s.as_ref(), &mut p, losses, true);
        let mut analytic: Vec<f64> = names.iter().map(|n| p.tensor(n).unwrap().grad().unwrap()[0]).collect();
        analytic.extend([dl.seg, dl.det]);
        p.zero_grads();

        let mut numeric = Vec::new();
        for n in &names {
            let x = p.tensor(n).unwrap().item();
            let mut at = |v: f64| {
                p.get_mut(n).unwrap().tensor.data_mut()[0] = v;
                strategy_total(s.as_ref(), &mut p, losses, false).0
            };
            let d = (at(x + H) - at(x - H)) / (2.0 * H);
            at(x);
            numeric.push(d);
        }
        for task in Task::ALL {
            let mut at = |v: f64| {
                let mut l = losses;
                *l.get_mut(task) = v;
                strategy_total(s.as_ref(), &mut p, l, false).0
            };
            let x = *losses.get(task);
            numeric.push((at(x + H) - at(x - H)) / (2.0 * H));
        }
        worst = worst.max(vec_rel_error(&analytic, &numeric));
    }
    worst
}

pub fn vec_rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let denom = norm(a) + norm(n);
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// Analytic GradNorm weight gradient against differences of the frozen-target objective.
pub fn gradnorm_worst_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let w = PerTask::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
        let n = PerTask::new(rng.random_range(0.1..5.0), rng.random_range(0.1..5.0));
        let r = PerTask::new(rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
        let alpha = rng.random_range(0.0..2.0);
        let o = gradnorm_loss(w, n, r, alpha).unwrap();
        // The targets are constants, so freeze them at the unperturbed point.
        let l = |w: PerTask<f64>| {
            (w.seg * n.seg - o.targets.seg).abs() + (w.det * n.det - o.targets.det).abs()
        };
        let mut numeric = Vec::new();
        for task in Task::ALL {
            let (mut p, mut m) = (w, w);
            *p.get_mut(task) += H;
            *m.get_mut(task) -= H;
            numeric.push((l(p) - l(m)) / (2.0 * H));
        }
        worst = worst.max(vec_rel_error(&[o.grad.seg, o.grad.det], &numeric));
    }
    worst
}

/// Dense sigmoid/relu stack under a cross-entropy head.
pub fn network_case(rng: &mut ChaCha8Rng) -> (Box<Build<'static>>, Vec<Tensor>) {
    let (b, d0, d1, d2, d3) = (
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(2..4),
    );
    let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..d3)).collect();
    let inputs = vec![
        rand_tensor(rng, &[b, d0]),
        rand_tensor(rng, &[d0, d1]),
        rand_tensor(rng, &[d1]),
        rand_tensor(rng, &[d1, d2]),
        rand_tensor(rng, &[d2]),
        rand_tensor(rng, &[d2, d3]),
        rand_tensor(rng, &[d3]),
    ];
    (
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_bias(h, v[2])?;
            let h = g.sigmoid(h)?;
            let h = g.matmul(h, v[3])?;
            let h = g.add_bias(h, v[4])?;
            let h = g.relu(h)?;
            let h = g.matmul(h, v[5])?;
            let h = g.add_bias(h, v[6])?;
            g.cross_entropy(h, &targets, None)
        }),
        inputs,
    )
}
