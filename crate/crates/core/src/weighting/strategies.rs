use super::formulas::{
    dynamic_weights, geometric_total, gradnorm_loss, gradnorm_ratios, handcrafted_weights, learned_weights,
    renormalize, uncertainty_total, GEOMETRIC_FLOOR, GRADNORM_MIN_WEIGHT,
};
use super::{StepContext, StrategyId, Weighting};
use crate::error::{Error, Result};
use crate::grad::{Graph, ParamSet, Partition, Tensor, Var};
use crate::task::{PerTask, Task};

/// All weights fixed at one.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoWeighting;

impl Weighting for NoWeighting {
    fn id(&self) -> StrategyId {
        StrategyId::None
    }

    fn weights(&self, _ctx: &StepContext, _params: &ParamSet) -> Result<PerTask<f64>> {
        Ok(PerTask::splat(1.0))
    }
}

/// Loss ratio averaged over the first `k` batches, then frozen.
#[derive(Debug, Clone)]
pub struct Handcrafted {
    k: usize,
    sums: PerTask<f64>,
    counts: PerTask<usize>,
    frozen: Option<PerTask<f64>>,
}

impl Handcrafted {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            sums: PerTask::splat(0.0),
            counts: PerTask::splat(0),
            frozen: None,
        }
    }

    pub fn frozen(&self) -> Option<PerTask<f64>> {
        self.frozen
    }
}

impl Weighting for Handcrafted {
    fn id(&self) -> StrategyId {
        StrategyId::Handcrafted
    }

    fn weights(&self, _ctx: &StepContext, _params: &ParamSet) -> Result<PerTask<f64>> {
        Ok(self.frozen.unwrap_or(PerTask::splat(1.0)))
    }

    fn observe(&mut self, ctx: &StepContext) -> Result<()> {
        if self.frozen.is_some() {
            return Ok(());
        }
        for task in Task::ALL {
            if let Some(l) = *ctx.losses.get(task) {
                if *self.counts.get(task) < self.k {
                    *self.sums.get_mut(task) += l;
                    *self.counts.get_mut(task) += 1;
                }
            }
        }
        if self.counts.seg >= self.k && self.counts.det >= self.k {
            let k = self.k as f64;
            self.frozen = Some(handcrafted_weights(self.sums.map(|_, s| s / k))?);
        }
        Ok(())
    }
}

/// Ratio of the previous epoch's mean losses.
#[derive(Debug, Clone)]
pub struct DynamicScaling {
    last_means: PerTask<Option<f64>>,
    current: PerTask<f64>,
}

impl DynamicScaling {
    pub fn new() -> Self {
        Self {
            last_means: PerTask::splat(None),
            current: PerTask::splat(1.0),
        }
    }
}

impl Default for DynamicScaling {
    fn default() -> Self {
        Self::new()
    }
}

impl Weighting for DynamicScaling {
    fn id(&self) -> StrategyId {
        StrategyId::Dynamic
    }

    fn weights(&self, _ctx: &StepContext, _params: &ParamSet) -> Result<PerTask<f64>> {
        Ok(self.current)
    }

    fn end_epoch(&mut self, means: PerTask<Option<f64>>) -> Result<()> {
        // A task masked for the whole epoch keeps its most recent mean.
        for task in Task::ALL {
            if let Some(m) = *means.get(task) {
                *self.last_means.get_mut(task) = Some(m);
            }
        }
        if let PerTask {
            seg: Some(seg),
            det: Some(det),
        } = self.last_means
        {
            self.current = dynamic_weights(PerTask::new(seg, det))?;
        }
        Ok(())
    }
}

/// Homoscedastic-uncertainty weighting with trainable `s = log sigma^2`.
#[derive(Debug, Clone)]
pub struct Uncertainty {
    names: PerTask<String>,
}

impl Uncertainty {
    pub fn new() -> Self {
        Self {
            names: PerTask::new("weighting.log_var.seg".into(), "weighting.log_var.det".into()),
        }
    }

    pub fn log_vars(&self, params: &ParamSet) -> Result<PerTask<f64>> {
        let s = params.tensor(&self.names.seg)?.item();
        let d = params.tensor(&self.names.det)?.item();
        let out = PerTask::new(s, d);
        if !out.is_finite() {
            return Err(Error::Numeric(format!("log variance became non-finite: {out:?}")));
        }
        Ok(out)
    }
}

impl Default for Uncertainty {
    fn default() -> Self {
        Self::new()
    }
}

impl Weighting for Uncertainty {
    fn id(&self) -> StrategyId {
        StrategyId::Uncertainty
    }

    fn register(&mut self, params: &mut ParamSet) -> Result<()> {
        for (_, name) in self.names.iter() {
            if !params.contains(name) {
                params.insert(name.clone(), Partition::Weighting, Tensor::scalar(0.0))?;
            }
        }
        Ok(())
    }

    fn trainable(&self, active: PerTask<bool>) -> Vec<String> {
        Task::ALL
            .into_iter()
            .filter(|t| *active.get(*t))
            .map(|t| self.names.get(t).clone())
            .collect()
    }

    fn weights(&self, _ctx: &StepContext, params: &ParamSet) -> Result<PerTask<f64>> {
        Ok(self.log_vars(params)?.map(|_, s| (-s).exp() / 2.0))
    }

    fn total_loss(
        &self,
        graph: &mut Graph,
        _ctx: &StepContext,
        params: &ParamSet,
        losses: PerTask<Option<Var>>,
    ) -> Result<Var> {
        self.log_vars(params)?;
        let s = PerTask::new(graph.param(params, &self.names.seg)?, graph.param(params, &self.names.det)?);
        uncertainty_total(graph, s, losses)
    }
}

/// Gradient normalization of task weights at the last shared layer.
#[derive(Debug, Clone)]
pub struct GradNorm {
    alpha: f64,
    lr: f64,
    weights: PerTask<f64>,
    initial: Option<PerTask<f64>>,
}

impl GradNorm {
    pub fn new(alpha: f64, lr: f64) -> Self {
        Self {
            alpha,
            lr,
            weights: PerTask::splat(1.0),
            initial: None,
        }
    }

    pub fn current(&self) -> PerTask<f64> {
        self.weights
    }
}

impl Weighting for GradNorm {
    fn id(&self) -> StrategyId {
        StrategyId::Gradnorm
    }

    fn weights(&self, _ctx: &StepContext, _params: &ParamSet) -> Result<PerTask<f64>> {
        Ok(self.weights)
    }

    fn wants_grad_norms(&self) -> bool {
        true
    }

    fn update_from_grad_norms(&mut self, norms: PerTask<f64>, losses: PerTask<f64>) -> Result<Option<f64>> {
        if !norms.is_finite() || !losses.is_finite() {
            return Err(Error::Numeric(format!(
                "gradnorm inputs non-finite: norms {norms:?}, losses {losses:?}"
            )));
        }
        let initial = *self.initial.get_or_insert(losses);
        if norms.seg == 0.0 && norms.det == 0.0 {
            return Ok(None);
        }
        if initial.seg <= 0.0 || initial.det <= 0.0 {
            return Ok(None);
        }
        let ratios = gradnorm_ratios(losses, initial)?;
        let obj = gradnorm_loss(self.weights, norms, ratios, self.alpha)?;
        let stepped = self
            .weights
            .map(|t, w| (w - self.lr * obj.grad.get(t)).max(GRADNORM_MIN_WEIGHT));
        self.weights = renormalize(stepped, Task::ALL.len() as f64)?;
        Ok(Some(obj.value))
    }
}

/// Geometric mean of the task losses.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeometricLoss;

impl Weighting for GeometricLoss {
    fn id(&self) -> StrategyId {
        StrategyId::Geometric
    }

    /// Effective weight `d L_total / d L_t = L_total / (T L_t)` on the current batch.
    fn weights(&self, ctx: &StepContext, _params: &ParamSet) -> Result<PerTask<f64>> {
        let active: Vec<(Task, f64)> = ctx
            .losses
            .iter()
            .filter_map(|(t, l)| l.map(|l| (t, l.max(GEOMETRIC_FLOOR))))
            .collect();
        if active.is_empty() {
            return Ok(PerTask::splat(1.0));
        }
        let n = active.len() as f64;
        let log_total = active.iter().map(|(_, l)| l.ln()).sum::<f64>() / n;
        let mut w = PerTask::splat(0.0);
        for (t, l) in active {
            *w.get_mut(t) = (log_total - l.ln()).exp() / n;
        }
        Ok(w)
    }

    fn total_loss(
        &self,
        graph: &mut Graph,
        _ctx: &StepContext,
        _params: &ParamSet,
        losses: PerTask<Option<Var>>,
    ) -> Result<Var> {
        geometric_total(graph, losses)
    }
}

/// One trainable logit `w` with weights `(sigmoid(w), 1 - sigmoid(w))`.
#[derive(Debug, Clone)]
pub struct WeightLearning {
    name: String,
}

impl WeightLearning {
    pub fn new() -> Self {
        Self {
            name: "weighting.learned_logit".into(),
        }
    }

    pub fn param_name(&self) -> &str {
        &self.name
    }
}

impl Default for WeightLearning {
    fn default() -> Self {
        Self::new()
    }
}

impl Weighting for WeightLearning {
    fn id(&self) -> StrategyId {
        StrategyId::Learned
    }

    fn register(&mut self, params: &mut ParamSet) -> Result<()> {
        if !params.contains(&self.name) {
            params.insert(self.name.clone(), Partition::Weighting, Tensor::scalar(0.0))?;
        }
        Ok(())
    }

    /// With one task masked the logit would only learn to silence the other.
    fn trainable(&self, active: PerTask<bool>) -> Vec<String> {
        if active.seg && active.det {
            vec![self.name.clone()]
        } else {
            Vec::new()
        }
    }

    fn weights(&self, _ctx: &StepContext, params: &ParamSet) -> Result<PerTask<f64>> {
        let w = params.tensor(&self.name)?.item();
        if !w.is_finite() {
            return Err(Error::Numeric("learned weight logit became non-finite".into()));
        }
        Ok(learned_weights(w))
    }

    fn total_loss(
        &self,
        graph: &mut Graph,
        _ctx: &StepContext,
        params: &ParamSet,
        losses: PerTask<Option<Var>>,
    ) -> Result<Var> {
        let w = graph.param(params, &self.name)?;
        let alpha = graph.sigmoid(w)?;
        let mut total: Option<Var> = None;
        if let Some(seg) = losses.seg {
            total = Some(graph.mul(alpha, seg)?);
        }
        if let Some(det) = losses.det {
            let neg = graph.neg(alpha)?;
            let beta = graph.add_scalar(neg, 1.0)?;
            let term = graph.mul(beta, det)?;
            total = Some(match total {
                Some(t) => graph.add(t, term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::Weighting("no active task losses".into()))
    }
}

/// Fixed weights, typically found by the outer search.
#[derive(Debug, Clone)]
pub struct StaticWeights {
    id: StrategyId,
    weights: PerTask<f64>,
}

impl StaticWeights {
    pub fn new(id: StrategyId, weights: PerTask<f64>) -> Result<Self> {
        if !weights.is_finite() || weights.seg < 0.0 || weights.det < 0.0 {
            return Err(Error::Weighting(format!("static weights must be finite and >= 0, got {weights:?}")));
        }
        Ok(Self { id, weights })
    }
}

impl Weighting for StaticWeights {
    fn id(&self) -> StrategyId {
        self.id
    }

    fn weights(&self, _ctx: &StepContext, _params: &ParamSet) -> Result<PerTask<f64>> {
        Ok(self.weights)
    }
}
