use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evo::{EsConfig, SearchSpace, Value};
use crate::grad::DEFAULT_LR;
use crate::net::ArchConfig;
use crate::schedule::{round_frequency, AsyncSchedule};
use crate::task::PerTask;
use crate::tasks::{loss_scale_preset, BenchmarkConfig, DetLossCoefs, Preset};
use crate::weighting::{normalize_weights, StrategyConfig, StrategyId};

pub const DEFAULT_BATCH_SIZE: usize = 8;

/// Benchmark fields that replace the preset's values when present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_objects: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train_det: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train_seg: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_val: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_scale_factor: Option<f64>,
    /// Named scale factor (`kitti`, `cityscapes`, `woodscape`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_scale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_box_area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_coefs: Option<DetLossCoefs>,
    /// Dataset seed; the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trunk_channels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_hidden: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    #[serde(default)]
    pub es: EsConfig,
    /// Defaults to the two task weights, plus both update periods for `meta-async`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SearchSpace>,
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default)]
    pub seed: u64,
    /// Preset default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<AsyncSchedule>,
    #[serde(default)]
    pub benchmark: BenchOverrides,
    #[serde(default)]
    pub arch: ArchOverrides,
    #[serde(default)]
    pub meta: MetaConfig,
}

fn default_preset() -> Preset {
    Preset::ImbalancedSeg
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new(Preset::ImbalancedSeg, StrategyId::None, 0)
    }
}

impl RunConfig {
    pub fn new(preset: Preset, strategy: StrategyId, seed: u64) -> Self {
        Self {
            preset,
            seed,
            epochs: None,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            out: None,
            strategy: StrategyConfig::new(strategy),
            schedule: None,
            benchmark: BenchOverrides::default(),
            arch: ArchOverrides::default(),
            meta: MetaConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn epoch_budget(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.preset.default_epochs())
    }

    pub fn benchmark_config(&self) -> Result<BenchmarkConfig> {
        let o = &self.benchmark;
        let mut b = BenchmarkConfig::preset(self.preset, o.data_seed.unwrap_or(self.seed));
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { b.$f = v; } )* };
        }
        set!(grid, shape_classes, max_objects, n_train_det, n_train_seg, n_val, loss_scale_factor, min_box_area, noise, det_coefs);
        if let Some(name) = &o.loss_scale {
            if o.loss_scale_factor.is_some() {
                return Err(Error::config("give either loss_scale or loss_scale_factor, not both"));
            }
            b.loss_scale_factor =
                loss_scale_preset(name).ok_or_else(|| Error::config(format!("unknown loss scale `{name}`")))?;
        }
        Ok(b)
    }

    pub fn arch_config(&self, bench: &BenchmarkConfig) -> ArchConfig {
        let mut a = ArchConfig::for_benchmark(bench);
        if let Some(t) = &self.arch.trunk_channels {
            a.trunk_channels = t.clone();
        }
        if let Some(k) = self.arch.kernel {
            a.kernel = k;
        }
        if let Some(h) = self.arch.det_hidden {
            a.det_hidden = h;
        }
        a
    }

    /// Search space for the outer loop.
    pub fn meta_space(&self) -> SearchSpace {
        self.meta
            .space
            .clone()
            .unwrap_or_else(|| SearchSpace::task_weights(self.strategy.id == StrategyId::MetaAsync))
    }

    /// Evaluation budgets for the outer loop, filled from the run when unset.
    pub fn meta_es(&self) -> EsConfig {
        let mut es = self.meta.es.clone();
        let full = self.epoch_budget().max(1);
        es.full_epochs.get_or_insert(full);
        if es.warm_epochs.is_none() {
            es.warm_epochs = Some(match self.preset {
                Preset::BalancedLarge => (full / 2).max(1),
                Preset::BalancedSmall => (full * 4 / 25).max(1),
                Preset::ImbalancedSeg => (full / 4).max(1),
            });
        }
        es.seed = self.seed;
        es
    }

    /// Checks everything and reports every violation at once. Meta strategies
    /// without weights are accepted here; the search fills them in.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                match e {
                    Error::Config(msgs) => v.extend(msgs),
                    other => v.push(other.to_string()),
                }
            }
        };
        if self.seed > i64::MAX as u64 {
            push(Err(Error::config(format!("seed {} does not fit the config format (max {})", self.seed, i64::MAX))));
        }
        if self.batch_size == 0 {
            push(Err(Error::config("batch_size must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            push(Err(Error::config(format!("lr must be positive, got {}", self.lr))));
        }
        let mut strategy = self.strategy.clone();
        if strategy.id.is_meta() && strategy.weights.is_none() {
            strategy.weights = Some([1.0, 1.0]);
        }
        push(strategy.validate());
        if let Some(s) = &self.schedule {
            push(s.validate().map_err(|e| Error::config(e.to_string())));
            if !s.is_identity() && self.strategy.id == StrategyId::MetaStatic {
                push(Err(Error::config("meta-static takes no schedule; use meta-async")));
            }
        }
        match self.benchmark_config() {
            Ok(b) => {
                push(b.validate());
                push(self.arch_config(&b).validate_for(&b));
            }
            Err(e) => push(Err(e)),
        }
        if self.strategy.id.is_meta() {
            push(self.meta.es.validate());
            let space = self.meta_space();
            push(space.validate());
            push(check_meta_space(&space));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Copy of this config with the candidate's weights and periods applied.
    pub fn with_candidate(&self, space: &SearchSpace, values: &[Value]) -> Result<RunConfig> {
        let get = |name: &str| -> Result<Option<f64>> {
            match space.index_of(name) {
                Some(i) => values[i]
                    .as_f64()
                    .map(Some)
                    .ok_or_else(|| Error::Search(format!("`{name}` must be numeric"))),
                None => Ok(None),
            }
        };
        let raw = PerTask::new(
            get("w_seg")?.ok_or_else(|| Error::Search("space lacks w_seg".into()))?,
            get("w_det")?.ok_or_else(|| Error::Search("space lacks w_det".into()))?,
        );
        let w = normalize_weights(raw)?;
        let mut cfg = self.clone();
        cfg.strategy.weights = Some([w.seg, w.det]);
        let nu_seg = get("nu_seg")?.map(round_frequency).transpose()?;
        let nu_det = get("nu_det")?.map(round_frequency).transpose()?;
        if nu_seg.is_some() || nu_det.is_some() {
            cfg.schedule = Some(AsyncSchedule::new(nu_seg.unwrap_or(1), nu_det.unwrap_or(1))?);
        }
        Ok(cfg)
    }
}

fn check_meta_space(space: &SearchSpace) -> Result<()> {
    let mut v = Vec::new();
    for name in ["w_seg", "w_det"] {
        if space.index_of(name).is_none() {
            v.push(format!("search space needs a `{name}` variable"));
        }
    }
    for var in &space.variables {
        if !["w_seg", "w_det", "nu_seg", "nu_det"].contains(&var.name.as_str()) {
            v.push(format!("search variable `{}` is not a run setting", var.name));
        }
        if var.is_categorical() {
            v.push(format!("search variable `{}` must be numeric", var.name));
        }
        if var.name.starts_with("w_") {
            if let crate::evo::VarKind::Linear { min, .. } | crate::evo::VarKind::Exponential { min, .. } = var.kind {
                if min <= 0.0 {
                    v.push(format!("`{}` must stay positive", var.name));
                }
            }
        }
        if var.name.starts_with("nu_") {
            if let crate::evo::VarKind::Linear { min, max } | crate::evo::VarKind::Exponential { min, max } = var.kind {
                if min < 1.0 || max > 10.0 {
                    v.push(format!("`{}` must lie within [1, 10]", var.name));
                }
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::new(Preset::BalancedSmall, StrategyId::MetaAsync, 7);
        c.epochs = Some(3);
        c.schedule = Some(AsyncSchedule::new(1, 2).unwrap());
        c.strategy.weights = Some([0.9, 0.1]);
        c.benchmark.n_val = Some(12);
        c.meta.space = Some(SearchSpace::task_weights(true));
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("epochz = 3").is_err());
        assert!(RunConfig::from_toml("[strategy]\nid = \"none\"\nalpha = 1").is_err());
        assert!(RunConfig::from_toml("[benchmark]\ngird = 8").is_err());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_toml("preset = \"balanced-large\"").unwrap();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.epoch_budget(), 60);
        assert_eq!(c.strategy.id, StrategyId::None);
    }

    #[test]
    fn validation_lists_all_problems() {
        let mut c = RunConfig::default();
        c.batch_size = 0;
        c.lr = -1.0;
        c.benchmark.n_val = Some(0);
        let Err(Error::Config(v)) = c.validate() else { panic!() };
        assert!(v.len() >= 3, "{v:?}");
    }

    #[test]
    fn candidate_weights_are_normalized() {
        let c = RunConfig::new(Preset::ImbalancedSeg, StrategyId::MetaAsync, 0);
        let space = c.meta_space();
        let vals = vec![Value::Number(90.0), Value::Number(10.0), Value::Number(6.5), Value::Number(1.2)];
        let r = c.with_candidate(&space, &vals).unwrap();
        let w = r.strategy.weights.unwrap();
        assert!((w[0] - 0.9).abs() < 1e-12 && (w[0] + w[1] - 1.0).abs() < 1e-12);
        assert_eq!(r.schedule, Some(AsyncSchedule::new(7, 1).unwrap()));
        r.validate().unwrap();
    }

    #[test]
    fn named_loss_scale() {
        let mut c = RunConfig::default();
        c.benchmark.loss_scale = Some("woodscape".into());
        assert_eq!(c.benchmark_config().unwrap().loss_scale_factor, 100.0);
        c.benchmark.loss_scale_factor = Some(3.0);
        assert!(c.benchmark_config().is_err());
    }
}
