//! Task weighting strategies behind one interface.
//!
//! A strategy sees the raw task losses of every batch, may own trainable
//! parameters in the `weighting` partition, and builds the total loss that
//! is backpropagated. The trainer calls the hooks in this order per batch:
//! [`Weighting::observe`], [`Weighting::total_loss`], optionally
//! [`Weighting::update_from_grad_norms`], and [`Weighting::end_epoch`] once
//! per epoch.

mod formulas;
mod strategies;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use formulas::{
    dynamic_weights, geometric_total, gradnorm_loss, gradnorm_ratios, handcrafted_weights, learned_weights,
    normalize_weights, renormalize, uncertainty_total, GradNormObjective, GEOMETRIC_FLOOR, GRADNORM_MIN_WEIGHT,
};
pub use strategies::{
    DynamicScaling, GeometricLoss, GradNorm, Handcrafted, NoWeighting, StaticWeights, Uncertainty, WeightLearning,
};

use crate::error::{Error, Result};
use crate::grad::{Graph, ParamSet, Var};
use crate::task::PerTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyId {
    None,
    Handcrafted,
    Dynamic,
    Uncertainty,
    Gradnorm,
    Geometric,
    Learned,
    MetaStatic,
    MetaAsync,
}

impl StrategyId {
    pub const ALL: [StrategyId; 9] = [
        StrategyId::None,
        StrategyId::Handcrafted,
        StrategyId::Dynamic,
        StrategyId::Uncertainty,
        StrategyId::Gradnorm,
        StrategyId::Geometric,
        StrategyId::Learned,
        StrategyId::MetaStatic,
        StrategyId::MetaAsync,
    ];

    /// Strategies that need no outer search.
    pub const BASELINES: [StrategyId; 7] = [
        StrategyId::None,
        StrategyId::Handcrafted,
        StrategyId::Dynamic,
        StrategyId::Uncertainty,
        StrategyId::Gradnorm,
        StrategyId::Geometric,
        StrategyId::Learned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::None => "none",
            StrategyId::Handcrafted => "handcrafted",
            StrategyId::Dynamic => "dynamic",
            StrategyId::Uncertainty => "uncertainty",
            StrategyId::Gradnorm => "gradnorm",
            StrategyId::Geometric => "geometric",
            StrategyId::Learned => "learned",
            StrategyId::MetaStatic => "meta-static",
            StrategyId::MetaAsync => "meta-async",
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, StrategyId::MetaStatic | StrategyId::MetaAsync)
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

/// Strategy selection and hyperparameters as they appear in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub id: StrategyId,
    /// Batches averaged for the handcrafted initial loss ratio.
    pub handcrafted_batches: usize,
    pub gradnorm_alpha: f64,
    pub gradnorm_lr: f64,
    /// Static `[seg, det]` weights for `meta-static` and `meta-async`.
    pub weights: Option<[f64; 2]>,
    /// Learning rate for `weighting`-partition parameters; the run's rate when absent.
    pub weighting_lr: Option<f64>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            id: StrategyId::None,
            handcrafted_batches: 10,
            gradnorm_alpha: 1.0,
            gradnorm_lr: 0.025,
            weights: None,
            weighting_lr: None,
        }
    }
}

impl StrategyConfig {
    pub fn new(id: StrategyId) -> Self {
        Self { id, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.handcrafted_batches == 0 {
            v.push("handcrafted_batches must be positive".to_string());
        }
        if !(self.gradnorm_alpha >= 0.0 && self.gradnorm_alpha.is_finite()) {
            v.push("gradnorm_alpha must be finite and >= 0".into());
        }
        if !(self.gradnorm_lr > 0.0 && self.gradnorm_lr.is_finite()) {
            v.push("gradnorm_lr must be positive".into());
        }
        if let Some(lr) = self.weighting_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                v.push("weighting_lr must be positive".into());
            }
        }
        match (self.id.is_meta(), self.weights) {
            (true, None) => v.push(format!("strategy `{}` needs `weights = [seg, det]`", self.id)),
            (true, Some(w)) if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) => {
                v.push("static weights must be finite and >= 0".into())
            }
            (false, Some(_)) => v.push(format!("strategy `{}` does not take static weights", self.id)),
            _ => {}
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn build(&self) -> Result<Box<dyn Weighting>> {
        self.validate()?;
        Ok(match self.id {
            StrategyId::None => Box::new(NoWeighting),
            StrategyId::Handcrafted => Box::new(Handcrafted::new(self.handcrafted_batches)),
            StrategyId::Dynamic => Box::new(DynamicScaling::new()),
            StrategyId::Uncertainty => Box::new(Uncertainty::new()),
            StrategyId::Gradnorm => Box::new(GradNorm::new(self.gradnorm_alpha, self.gradnorm_lr)),
            StrategyId::Geometric => Box::new(GeometricLoss),
            StrategyId::Learned => Box::new(WeightLearning::new()),
            StrategyId::MetaStatic | StrategyId::MetaAsync => {
                let w = self.weights.expect("validated");
                Box::new(StaticWeights::new(self.id, PerTask::new(w[0], w[1]))?)
            }
        })
    }
}

/// What the strategy may look at when asked for weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepContext {
    pub epoch: u64,
    /// Batch index within the epoch.
    pub batch: usize,
    /// Raw losses of the current batch; `None` for a masked task.
    pub losses: PerTask<Option<f64>>,
    /// Mean raw losses of the previous epoch, when one exists.
    pub prev_epoch_means: Option<PerTask<f64>>,
}

pub trait Weighting: Send {
    fn id(&self) -> StrategyId;

    /// Adds the strategy's trainable parameters to `params`.
    fn register(&mut self, _params: &mut ParamSet) -> Result<()> {
        Ok(())
    }

    /// Names of `weighting`-partition parameters that receive gradients when
    /// the given tasks are active.
    fn trainable(&self, _active: PerTask<bool>) -> Vec<String> {
        Vec::new()
    }

    /// Weights currently in effect, before any schedule mask.
    fn weights(&self, ctx: &StepContext, params: &ParamSet) -> Result<PerTask<f64>>;

    /// Records the batch losses. Runs before `total_loss`.
    fn observe(&mut self, _ctx: &StepContext) -> Result<()> {
        Ok(())
    }

    /// Total loss over the active tasks (`None` entries are masked).
    fn total_loss(
        &self,
        graph: &mut Graph,
        ctx: &StepContext,
        params: &ParamSet,
        losses: PerTask<Option<Var>>,
    ) -> Result<Var> {
        let w = self.weights(ctx, params)?;
        linear_total(graph, w, losses)
    }

    fn wants_grad_norms(&self) -> bool {
        false
    }

    /// Receives `||d L_task / d W||` at the last shared layer plus the raw
    /// losses. Returns the auxiliary objective value when an update happened.
    fn update_from_grad_norms(&mut self, _norms: PerTask<f64>, _losses: PerTask<f64>) -> Result<Option<f64>> {
        Ok(None)
    }

    /// `means` are the raw per-task losses averaged over the finished epoch.
    fn end_epoch(&mut self, _means: PerTask<Option<f64>>) -> Result<()> {
        Ok(())
    }
}

/// `sum_t w_t L_t` over the tasks present in `losses`.
pub fn linear_total(graph: &mut Graph, w: PerTask<f64>, losses: PerTask<Option<Var>>) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (task, l) in losses.iter() {
        let Some(l) = *l else { continue };
        let term = graph.scale(l, *w.get(task))?;
        total = Some(match total {
            Some(t) => graph.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Weighting("no active task losses".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip_through_strings() {
        for id in StrategyId::ALL {
            assert_eq!(id.as_str().parse::<StrategyId>().unwrap(), id);
        }
        assert!("softmax".parse::<StrategyId>().is_err());
    }

    #[test]
    fn meta_strategies_need_weights() {
        assert!(StrategyConfig::new(StrategyId::MetaAsync).validate().is_err());
        let mut c = StrategyConfig::new(StrategyId::MetaAsync);
        c.weights = Some([0.8490, 0.1510]);
        assert!(c.validate().is_ok());
        let mut c = StrategyConfig::new(StrategyId::None);
        c.weights = Some([1.0, 1.0]);
        assert!(c.validate().is_err());
    }
}
