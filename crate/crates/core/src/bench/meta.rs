use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{to_json, train_on, write_file, RunResult};
use crate::error::{Error, Result};
use crate::evo::{run_search, EvalMetrics, EvalOutcome, EvalRequest, Evaluator, History, RunRecord, SearchSpace};
use crate::net::ModelSnapshot;
use crate::tasks::{generate_dataset, Dataset};

pub const META_CURVES_HEADER: &str = "evaluation,generation,fitness,incumbent,map,miou,w_seg,w_det,nu_seg,nu_det";

/// Trains one candidate per request, warm-starting from earlier candidates'
/// final models.
pub struct MetaEvaluator<'a> {
    base: &'a RunConfig,
    space: &'a SearchSpace,
    data: &'a Dataset,
    dir: Option<PathBuf>,
    snapshots: Mutex<BTreeMap<usize, ModelSnapshot>>,
    results: Mutex<BTreeMap<usize, RunResult>>,
}

impl<'a> MetaEvaluator<'a> {
    /// With `dir` set, every candidate's final model and result are also
    /// written under it so a later process can warm-start from them.
    pub fn new(base: &'a RunConfig, space: &'a SearchSpace, data: &'a Dataset, dir: Option<PathBuf>) -> Self {
        Self {
            base,
            space,
            data,
            dir,
            snapshots: Mutex::new(BTreeMap::new()),
            results: Mutex::new(BTreeMap::new()),
        }
    }

    fn snapshot_path(dir: &Path, id: usize) -> PathBuf {
        dir.join("snapshots").join(format!("candidate_{id:04}.snap"))
    }

    fn result_path(dir: &Path, id: usize) -> PathBuf {
        dir.join("candidates").join(format!("candidate_{id:04}.json"))
    }

    fn snapshot(&self, id: usize) -> Result<ModelSnapshot> {
        if let Some(s) = self.snapshots.lock().expect("snapshot lock").get(&id) {
            return Ok(s.clone());
        }
        match &self.dir {
            Some(dir) => ModelSnapshot::load(&Self::snapshot_path(dir, id)),
            None => Err(Error::Search(format!("no snapshot for candidate {id}"))),
        }
    }

    /// Result of candidate `id`, from memory or from disk.
    pub fn result(&self, id: usize) -> Result<RunResult> {
        if let Some(r) = self.results.lock().expect("result lock").get(&id) {
            return Ok(r.clone());
        }
        let dir = self
            .dir
            .as_ref()
            .ok_or_else(|| Error::Search(format!("no result for candidate {id}")))?;
        let path = Self::result_path(dir, id);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

impl Evaluator for MetaEvaluator<'_> {
    fn evaluate(&self, req: &EvalRequest<'_>) -> Result<EvalOutcome> {
        let cfg = self.base.with_candidate(self.space, req.values)?;
        let warm = req.warm_from.map(|id| self.snapshot(id)).transpose()?;
        let (result, session) = train_on(&cfg, self.data, warm.as_ref(), req.epochs)?;
        let snap = session.model.snapshot();
        if let Some(dir) = &self.dir {
            write_file(&Self::snapshot_path(dir, req.id), &snap.to_bytes())?;
            write_file(&Self::result_path(dir, req.id), to_json(&result)?.as_bytes())?;
        }
        let outcome = EvalOutcome {
            fitness: result.metrics.combined,
            metrics: Some(EvalMetrics {
                map: result.metrics.map,
                miou: result.metrics.miou,
            }),
        };
        self.snapshots.lock().expect("snapshot lock").insert(req.id, snap);
        self.results.lock().expect("result lock").insert(req.id, result);
        Ok(outcome)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    pub best: RunRecord,
    /// Settings of the best candidate, ready to rerun.
    pub best_config: RunConfig,
    pub result: RunResult,
    /// Evaluations performed by this call.
    pub evaluated: usize,
    #[serde(skip)]
    pub history: Vec<RunRecord>,
}

/// Outer search over the config's meta space. Resumes from
/// `out/history.ndjson` when it exists.
pub fn run_meta(cfg: &RunConfig, jobs: usize) -> Result<MetaResult> {
    cfg.validate()?;
    if !cfg.strategy.id.is_meta() {
        return Err(Error::config(format!(
            "strategy `{}` has no search; use meta-static or meta-async",
            cfg.strategy.id
        )));
    }
    let data = generate_dataset(&cfg.benchmark_config()?)?;
    run_meta_on(cfg, &data, jobs)
}

pub fn run_meta_on(cfg: &RunConfig, data: &Dataset, jobs: usize) -> Result<MetaResult> {
    let space = cfg.meta_space();
    let es = cfg.meta_es();
    let mut history = match &cfg.out {
        Some(out) => History::open(&out.join("history.ndjson"))?,
        None => History::in_memory(),
    };
    let evaluator = MetaEvaluator::new(cfg, &space, data, cfg.out.clone());
    let outcome = run_search(&space, &es, &evaluator, &mut history, jobs)?;
    let result = evaluator.result(outcome.best.id)?;
    let mut best_config = cfg.with_candidate(&space, &outcome.best.values)?;
    best_config.out = None;
    let meta = MetaResult {
        best: outcome.best,
        best_config,
        result,
        evaluated: outcome.evaluated,
        history: outcome.history,
    };
    if let Some(out) = &cfg.out {
        write_file(&out.join("result.json"), to_json(&meta)?.as_bytes())?;
        write_file(&out.join("curves.csv"), meta_curves_csv(cfg, &space, &meta.history)?.as_bytes())?;
    }
    Ok(meta)
}

/// One row per evaluation: fitness, incumbent, task metrics and the tested
/// normalized weights and periods.
pub fn meta_curves_csv(cfg: &RunConfig, space: &SearchSpace, history: &[RunRecord]) -> Result<String> {
    let mut s = String::from(META_CURVES_HEADER);
    s.push('\n');
    let mut incumbent = f64::NEG_INFINITY;
    for r in history {
        incumbent = incumbent.max(r.fitness);
        let c = cfg.with_candidate(space, &r.values)?;
        let w = c.strategy.weights.expect("candidate weights");
        let nu = c.schedule.unwrap_or_default();
        let (map, miou) = r.metrics.map_or((String::new(), String::new()), |m| (m.map.to_string(), m.miou.to_string()));
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.id, r.generation, r.fitness, incumbent, map, miou, w[0], w[1], nu.nu_seg, nu.nu_det
        ));
    }
    Ok(s)
}
