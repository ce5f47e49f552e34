//! Closed-form pieces shared by the strategies. Kept free of strategy
//! state so they can be checked in isolation.

use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor, Var};
use crate::task::PerTask;

/// Lower bound applied to each loss before the geometric product.
pub const GEOMETRIC_FLOOR: f64 = 1e-12;
/// GradNorm weights never drop below this before renormalization.
pub const GRADNORM_MIN_WEIGHT: f64 = 1e-4;

/// Scales `w` so its entries sum to one.
pub fn normalize_weights(w: PerTask<f64>) -> Result<PerTask<f64>> {
    let s = w.sum();
    if !(s > 0.0 && s.is_finite()) || w.seg < 0.0 || w.det < 0.0 {
        return Err(Error::Weighting(format!("cannot normalize weights {w:?}")));
    }
    Ok(PerTask::new(w.seg / s, w.det / s))
}

/// Scales `w` so its entries sum to `target`.
pub fn renormalize(w: PerTask<f64>, target: f64) -> Result<PerTask<f64>> {
    let n = normalize_weights(w)?;
    let det = n.det * target;
    // seg is derived from det so the rounding error of the sum stays at one ulp.
    Ok(PerTask::new(target - det, det))
}

/// `(L_det(0) / L_seg(0), 1)`.
pub fn handcrafted_weights(initial: PerTask<f64>) -> Result<PerTask<f64>> {
    ratio_weights(initial, "initial")
}

/// `(L~_det(t-1) / L~_seg(t-1), 1)`.
pub fn dynamic_weights(prev_means: PerTask<f64>) -> Result<PerTask<f64>> {
    ratio_weights(prev_means, "previous-epoch mean")
}

fn ratio_weights(l: PerTask<f64>, what: &str) -> Result<PerTask<f64>> {
    if !l.is_finite() || l.det < 0.0 {
        return Err(Error::Weighting(format!("non-finite {what} losses {l:?}")));
    }
    if l.seg <= 0.0 {
        return Err(Error::Weighting(format!(
            "{what} segmentation loss is {}; the ratio is undefined",
            l.seg
        )));
    }
    Ok(PerTask::new(l.det / l.seg, 1.0))
}

/// `(sigmoid(w), 1 - sigmoid(w))`.
pub fn learned_weights(w: f64) -> PerTask<f64> {
    let a = 1.0 / (1.0 + (-w).exp());
    PerTask::new(a, 1.0 - a)
}

/// `sum_t exp(-s_t) L_t / 2 + s_t / 2` over the tasks present in `losses`.
pub fn uncertainty_total(graph: &mut Graph, s: PerTask<Var>, losses: PerTask<Option<Var>>) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (task, l) in losses.iter() {
        let Some(l) = *l else { continue };
        let s_t = *s.get(task);
        let neg = graph.neg(s_t)?;
        let prec = graph.exp(neg)?;
        let weighted = graph.mul(prec, l)?;
        let sum = graph.add(weighted, s_t)?;
        let term = graph.scale(sum, 0.5)?;
        total = Some(match total {
            Some(t) => graph.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Weighting("no active task losses".into()))
}

/// `(prod_t max(L_t, floor))^(1/T)` over the tasks present in `losses`.
pub fn geometric_total(graph: &mut Graph, losses: PerTask<Option<Var>>) -> Result<Var> {
    let active: Vec<Var> = losses.iter().filter_map(|(_, l)| *l).collect();
    if active.is_empty() {
        return Err(Error::Weighting("no active task losses".into()));
    }
    let mut prod: Option<Var> = None;
    for l in &active {
        let c = graph.clamp_min(*l, GEOMETRIC_FLOOR)?;
        prod = Some(match prod {
            Some(p) => graph.mul(p, c)?,
            None => c,
        });
    }
    graph.pow(prod.unwrap(), 1.0 / active.len() as f64)
}

/// `r_t = (L_t / L_t(0)) / mean_j (L_j / L_j(0))`.
pub fn gradnorm_ratios(losses: PerTask<f64>, initial: PerTask<f64>) -> Result<PerTask<f64>> {
    if initial.seg <= 0.0 || initial.det <= 0.0 || !initial.is_finite() || !losses.is_finite() {
        return Err(Error::Weighting(format!(
            "inverse training rates need positive initial losses, got {initial:?}"
        )));
    }
    let rel = PerTask::new(losses.seg / initial.seg, losses.det / initial.det);
    let mean = rel.sum() / 2.0;
    if mean <= 0.0 {
        return Ok(PerTask::splat(1.0));
    }
    Ok(PerTask::new(rel.seg / mean, rel.det / mean))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradNormObjective {
    /// `L_grad`.
    pub value: f64,
    /// `d L_grad / d w_t`.
    pub grad: PerTask<f64>,
    /// Constant targets `G_bar * r_t^alpha`.
    pub targets: PerTask<f64>,
}

/// `L_grad = sum_t |w_t n_t - G_bar r_t^alpha|`, where `n_t` is the
/// unweighted gradient norm and the targets are held constant.
pub fn gradnorm_loss(
    weights: PerTask<f64>,
    norms: PerTask<f64>,
    ratios: PerTask<f64>,
    alpha: f64,
) -> Result<GradNormObjective> {
    let mut g = Graph::new();
    let w = g.variable(Tensor::new(vec![2], vec![weights.seg, weights.det])?);
    let n = g.constant(Tensor::new(vec![2], vec![norms.seg, norms.det])?);
    let gw = g.mul(w, n)?;
    let gv = g.value(gw).to_vec();
    let gbar = (gv[0] + gv[1]) / 2.0;
    let targets = ratios.map(|_, r| gbar * r.powf(alpha));
    let tv = g.constant(Tensor::new(vec![2], vec![targets.seg, targets.det])?);
    let diff = g.sub(gw, tv)?;
    let abs = g.abs(diff)?;
    let total = g.sum(abs)?;
    let grads = g.backward(total)?;
    let dw = grads.get(w).map(|d| d.to_vec()).unwrap_or_else(|| vec![0.0, 0.0]);
    Ok(GradNormObjective {
        value: g.item(total),
        grad: PerTask::new(dw[0], dw[1]),
        targets,
    })
}
