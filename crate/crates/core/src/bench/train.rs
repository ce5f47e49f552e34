use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::grad::{Graph, Partition, Selector, Var};
use crate::net::{ModelSnapshot, MtlModel};
use crate::schedule::AsyncSchedule;
use crate::task::{PerTask, Task};
use crate::tasks::{
    decode_detections, decode_segmentation, det_loss, eval_map, eval_miou, generate_dataset, non_max_suppression,
    seg_loss, BenchmarkConfig, Dataset, MetricReport, Scene,
};
use crate::weighting::{StepContext, Weighting};

/// Validation scenes per forward pass.
pub const EVAL_CHUNK: usize = 32;
/// Minimum detection score kept for AP ranking.
pub const DECODE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;

pub const CURVES_HEADER: &str = "epoch,active_seg,active_det,loss_seg,loss_det,w_seg,w_det,map,miou,g";

/// Per-epoch training summary and validation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Model epoch counter at the start of this epoch.
    pub epoch: u64,
    /// Index within this run, which drives the schedule.
    pub run_epoch: u64,
    pub active: PerTask<bool>,
    /// Mean raw loss per task; `None` when masked.
    pub train_loss: PerTask<Option<f64>>,
    pub total_loss: Option<f64>,
    /// Mean effective weights; zero for a masked task.
    pub weights: PerTask<f64>,
    pub map: f64,
    pub miou: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    /// Epoch counter of the model before training (non-zero after a warm start).
    pub start_epoch: u64,
    pub epochs: Vec<EpochRecord>,
    pub metrics: MetricReport,
    /// Mean effective weights of the last trained epoch.
    pub final_weights: Option<PerTask<f64>>,
    pub arch_hash: String,
    #[serde(skip)]
    pub wall_secs: f64,
}

/// A model, its weighting strategy and the schedule, ready to train.
pub struct Session {
    pub model: MtlModel,
    pub weighting: Box<dyn Weighting>,
    pub schedule: AsyncSchedule,
    bench: BenchmarkConfig,
    batch_size: usize,
    lr: f64,
    weighting_lr: f64,
    prev_means: Option<PerTask<f64>>,
    /// Epochs trained by this session; the schedule phase starts at zero
    /// for every run, warm-started or not.
    run_epoch: u64,
}

impl Session {
    pub fn new(cfg: &RunConfig, bench: &BenchmarkConfig) -> Result<Self> {
        let mut model = MtlModel::build(cfg.arch_config(bench), cfg.seed)?;
        let mut weighting = cfg.strategy.build()?;
        weighting.register(&mut model.params)?;
        let schedule = cfg.schedule.unwrap_or_default();
        schedule.validate()?;
        Ok(Self {
            model,
            weighting,
            schedule,
            bench: bench.clone(),
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            weighting_lr: cfg.strategy.weighting_lr.unwrap_or(cfg.lr),
            prev_means: None,
            run_epoch: 0,
        })
    }

    pub fn restore(&mut self, snap: &ModelSnapshot) -> Result<()> {
        self.model.restore(snap)
    }

    fn optimizer_selector(active: PerTask<bool>) -> Selector {
        let mut s = Selector::only(Partition::Shared);
        for t in Task::ALL {
            if *active.get(t) {
                s = s.with(Partition::Task(t));
            }
        }
        s
    }

    fn weighting_selector(&self, active: PerTask<bool>) -> Option<Selector> {
        let trainable = self.weighting.trainable(active);
        if trainable.is_empty() {
            return None;
        }
        let mut s = Selector::only(Partition::Weighting);
        for name in self.model.params.names_in(Partition::Weighting) {
            if !trainable.iter().any(|t| t == name) {
                s = s.skipping(name);
            }
        }
        Some(s)
    }

    /// Trains one epoch, then evaluates on `data.val`.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        let epoch = self.model.epoch;
        let active = self.schedule.mask(self.run_epoch);
        let det_set = data.train_det();
        let seg_set = data.train_seg();
        let b = self.batch_size;
        let steps = det_set.len().div_ceil(b);
        let shared_batches = seg_set.len() == det_set.len();

        let mut det_order: Vec<usize> = (0..det_set.len()).collect();
        det_order.shuffle(&mut self.model.rng);
        let seg_order = if shared_batches {
            Vec::new()
        } else {
            // The smaller set is recycled: concatenated fresh permutations.
            let mut order = Vec::with_capacity(steps * b);
            while order.len() < steps * b.min(seg_set.len()) {
                let mut p: Vec<usize> = (0..seg_set.len()).collect();
                p.shuffle(&mut self.model.rng);
                order.extend(p);
            }
            order
        };

        let mut sums = PerTask::splat(0.0);
        let mut weight_sums = PerTask::splat(0.0);
        let mut total_sum = 0.0;
        if active.seg || active.det {
            for step in 0..steps {
                let det_idx = &det_order[step * b..((step + 1) * b).min(det_set.len())];
                let seg_idx: &[usize] = if shared_batches {
                    &[]
                } else {
                    let k = b.min(seg_set.len());
                    &seg_order[step * k..(step + 1) * k]
                };
                let (raw, total, w) = self.train_step(epoch, step, active, det_set, det_idx, seg_set, seg_idx)?;
                for t in Task::ALL {
                    if let Some(v) = raw.get(t) {
                        *sums.get_mut(t) += v;
                    }
                    *weight_sums.get_mut(t) += w.get(t);
                }
                total_sum += total;
            }
        }
        let trained = active.seg || active.det;
        let n = steps as f64;
        let means = active.map(|t, &a| if a && trained { Some(sums.get(t) / n) } else { None });
        self.weighting.end_epoch(means)?;
        if let Some(prev) = &mut self.prev_means {
            for t in Task::ALL {
                if let Some(m) = means.get(t) {
                    *prev.get_mut(t) = *m;
                }
            }
        } else if let (Some(s), Some(d)) = (means.seg, means.det) {
            self.prev_means = Some(PerTask::new(s, d));
        }
        if !self.model.params.is_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}")));
        }
        self.model.epoch += 1;
        self.run_epoch += 1;

        let report = evaluate(&self.model, &self.bench, &data.val)?;
        Ok(EpochRecord {
            epoch,
            run_epoch: self.run_epoch - 1,
            active,
            train_loss: means,
            total_loss: trained.then(|| total_sum / n),
            weights: if trained { weight_sums.map(|_, w| w / n) } else { PerTask::splat(0.0) },
            map: report.map,
            miou: report.miou,
            combined: report.combined,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &mut self,
        epoch: u64,
        step: usize,
        active: PerTask<bool>,
        det_set: &[Scene],
        det_idx: &[usize],
        seg_set: &[Scene],
        seg_idx: &[usize],
    ) -> Result<(PerTask<Option<f64>>, f64, PerTask<f64>)> {
        let mut g = Graph::new();
        let mut losses: PerTask<Option<Var>> = PerTask::default();
        let mut anchors: PerTask<Option<Var>> = PerTask::default();
        let det_batch: Vec<&Scene> = det_idx.iter().map(|&i| &det_set[i]).collect();
        // An empty seg index means both heads share the detection batch.
        if seg_idx.is_empty() {
            let heads: Vec<Task> = Task::ALL.into_iter().filter(|t| *active.get(*t)).collect();
            let out = self.model.forward_scenes(&mut g, &det_batch, &heads)?;
            if let Some(raw) = out.det {
                losses.det = Some(det_loss(&mut g, raw, &det_batch, &self.bench)?);
            }
            if let Some(logits) = out.seg {
                losses.seg = Some(seg_loss(&mut g, logits, &det_batch)?);
            }
            anchors = PerTask::splat(Some(out.last_shared_weight));
        } else {
            if active.det {
                let out = self.model.forward_scenes(&mut g, &det_batch, &[Task::Det])?;
                losses.det = Some(det_loss(&mut g, out.det.expect("det head"), &det_batch, &self.bench)?);
                anchors.det = Some(out.last_shared_weight);
            }
            if active.seg {
                let seg_batch: Vec<&Scene> = seg_idx.iter().map(|&i| &seg_set[i]).collect();
                let out = self.model.forward_scenes(&mut g, &seg_batch, &[Task::Seg])?;
                losses.seg = Some(seg_loss(&mut g, out.seg.expect("seg head"), &seg_batch)?);
                anchors.seg = Some(out.last_shared_weight);
            }
        }
        let raw = losses.map(|_, l| l.map(|v| g.item(v)));
        if raw.iter().any(|(_, v)| v.is_some_and(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {step}")));
        }
        let ctx = StepContext {
            epoch,
            batch: step,
            losses: raw,
            prev_epoch_means: self.prev_means,
        };
        self.weighting.observe(&ctx)?;
        let w = self.weighting.weights(&ctx, &self.model.params)?;
        let total = self.weighting.total_loss(&mut g, &ctx, &self.model.params, losses)?;
        let total_value = g.item(total);
        if !total_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite total loss at epoch {epoch}, batch {step}")));
        }
        g.backward_into(total, &mut self.model.params)?;
        if self.weighting.wants_grad_norms() {
            if let (Some(ls), Some(ld), Some(ws), Some(wd)) = (losses.seg, losses.det, anchors.seg, anchors.det) {
                let norms = PerTask::new(g.backward(ls)?.norm(ws), g.backward(ld)?.norm(wd));
                let values = PerTask::new(g.item(ls), g.item(ld));
                self.weighting.update_from_grad_norms(norms, values)?;
            }
        }
        self.model
            .adam
            .step_with_lr(&mut self.model.params, &Self::optimizer_selector(active), self.lr)?;
        if let Some(sel) = self.weighting_selector(active) {
            self.model.adam.step_with_lr(&mut self.model.params, &sel, self.weighting_lr)?;
        }
        self.model.params.zero_grads();
        let effective = active.map(|t, &a| if a { *w.get(t) } else { 0.0 });
        Ok((raw, total_value, effective))
    }
}

/// Validation metrics of `model` on `scenes`.
pub fn evaluate(model: &MtlModel, bench: &BenchmarkConfig, scenes: &[Scene]) -> Result<MetricReport> {
    if scenes.is_empty() {
        return Err(Error::Metric("empty validation set".into()));
    }
    let arch = model.arch();
    let mut dets = Vec::with_capacity(scenes.len());
    let mut segs = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(EVAL_CHUNK) {
        let batch: Vec<&Scene> = chunk.iter().collect();
        let mut g = Graph::new();
        let out = model.forward_scenes(&mut g, &batch, &Task::ALL)?;
        let det = g.value(out.det.expect("det head"));
        let seg = g.value(out.seg.expect("seg head"));
        dets.extend(
            decode_detections(det, batch.len(), arch.det_channels(), arch.grid, DECODE_THRESHOLD)
                .into_iter()
                .map(|d| non_max_suppression(d, NMS_IOU)),
        );
        segs.extend(decode_segmentation(seg, batch.len(), arch.seg_classes, arch.grid));
    }
    let truth_boxes: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let truth_seg: Vec<_> = scenes.iter().map(|s| s.seg_labels.clone()).collect();
    let (map, ap) = eval_map(&dets, &truth_boxes, bench.shape_classes, bench.min_box_area)?;
    let (miou, iou) = eval_miou(&segs, &truth_seg, bench.seg_classes())?;
    MetricReport::new(map, miou, ap, iou)
}

/// Trains `epochs` epochs on `data`, from scratch or from `warm_start`.
pub fn train_on(
    cfg: &RunConfig,
    data: &Dataset,
    warm_start: Option<&ModelSnapshot>,
    epochs: usize,
) -> Result<(RunResult, Session)> {
    let clock = Instant::now();
    let mut session = Session::new(cfg, &data.config)?;
    if let Some(snap) = warm_start {
        session.restore(snap)?;
    }
    let start_epoch = session.model.epoch;
    let mut records = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let r = session.train_epoch(data)?;
        log::debug!(
            "{} seed {} epoch {}: loss {:?} map {:.4} miou {:.4}",
            cfg.strategy.id,
            cfg.seed,
            r.epoch,
            r.total_loss,
            r.map,
            r.miou
        );
        records.push(r);
    }
    let metrics = evaluate(&session.model, &data.config, &data.val)?;
    let final_weights = records.iter().rev().find(|r| r.total_loss.is_some()).map(|r| r.weights);
    let mut config = cfg.clone();
    config.out = None;
    let result = RunResult {
        config,
        start_epoch,
        epochs: records,
        metrics,
        final_weights,
        arch_hash: format!("{:016x}", session.model.arch_hash()),
        wall_secs: clock.elapsed().as_secs_f64(),
    };
    Ok((result, session))
}

/// Full run from the config alone: data generation, training and, when
/// `cfg.out` is set, output files.
pub fn train(cfg: &RunConfig, warm_start: Option<&ModelSnapshot>) -> Result<RunResult> {
    cfg.validate()?;
    cfg.strategy.validate()?;
    let data = generate_dataset(&cfg.benchmark_config()?)?;
    let (result, session) = train_on(cfg, &data, warm_start, cfg.epoch_budget())?;
    if let Some(out) = &cfg.out {
        write_run(out, &result, Some(&session.model.snapshot()))?;
    }
    Ok(result)
}

pub fn curves_csv(records: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from(CURVES_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.active.seg as u8,
            r.active.det as u8,
            opt(r.train_loss.seg),
            opt(r.train_loss.det),
            r.weights.seg,
            r.weights.det,
            r.map,
            r.miou,
            r.combined
        ));
    }
    s
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Serde(e.to_string()))
}

/// Writes `result.json`, `curves.csv` and `snapshots/final.snap` under `out`.
pub fn write_run(out: &Path, result: &RunResult, snapshot: Option<&ModelSnapshot>) -> Result<()> {
    write_file(&out.join("result.json"), to_json(result)?.as_bytes())?;
    write_file(&out.join("curves.csv"), curves_csv(&result.epochs).as_bytes())?;
    if let Some(snap) = snapshot {
        let path = out.join("snapshots").join("final.snap");
        write_file(&path, &snap.to_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::tests_support::tiny;
    use crate::weighting::StrategyId;

    #[test]
    fn every_strategy_trains() {
        for id in StrategyId::ALL {
            let r = train(&tiny(id), None).unwrap();
            assert_eq!(r.epochs.len(), 2, "{id}");
            assert!((0.0..=1.0).contains(&r.metrics.combined), "{id}");
        }
    }

    #[test]
    fn zero_epochs_leaves_parameters_alone() {
        let mut c = tiny(StrategyId::None);
        c.epochs = Some(0);
        let data = generate_dataset(&c.benchmark_config().unwrap()).unwrap();
        let (r, s) = train_on(&c, &data, None, 0).unwrap();
        let fresh = Session::new(&c, &data.config).unwrap();
        assert_eq!(s.model.params, fresh.model.params);
        assert!(r.epochs.is_empty() && r.final_weights.is_none());
        assert_eq!(r.metrics, evaluate(&fresh.model, &data.config, &data.val).unwrap());
    }

    #[test]
    fn masked_head_is_frozen() {
        let mut c = tiny(StrategyId::MetaAsync);
        c.schedule = Some(AsyncSchedule::new(1, 2).unwrap());
        let data = generate_dataset(&c.benchmark_config().unwrap()).unwrap();
        let mut s = Session::new(&c, &data.config).unwrap();
        s.train_epoch(&data).unwrap();
        let det_before: Vec<_> = s.model.params.iter().filter(|e| e.partition == Partition::Task(Task::Det)).cloned().collect();
        let shared_before = s.model.params.tensor(&s.model.last_shared_weight_name()).unwrap().clone();
        let r = s.train_epoch(&data).unwrap();
        assert!(!r.active.det && r.active.seg);
        assert_eq!(r.weights.det, 0.0);
        for e in &det_before {
            assert_eq!(s.model.params.tensor(&e.name).unwrap().data(), e.tensor.data(), "{}", e.name);
        }
        assert_ne!(s.model.params.tensor(&s.model.last_shared_weight_name()).unwrap().data(), shared_before.data());
    }

    #[test]
    fn warm_start_phase_begins_at_zero() {
        let mut c = tiny(StrategyId::MetaAsync);
        let data = generate_dataset(&c.benchmark_config().unwrap()).unwrap();
        let (_, first) = train_on(&c, &data, None, 3).unwrap();
        let snap = first.model.snapshot();
        assert_eq!(snap.epoch, 3);
        // Global epoch 3 is odd, but the warm run's first epoch still trains det.
        c.schedule = Some(AsyncSchedule::new(1, 2).unwrap());
        let (r, _) = train_on(&c, &data, Some(&snap), 2).unwrap();
        assert_eq!(r.start_epoch, 3);
        assert_eq!(r.epochs[0].epoch, 3);
        assert_eq!(r.epochs[0].run_epoch, 0);
        assert!(r.epochs[0].active.det);
        assert!(!r.epochs[1].active.det);
    }

    #[test]
    fn fully_masked_epoch_only_evaluates() {
        let mut c = tiny(StrategyId::MetaAsync);
        c.schedule = Some(AsyncSchedule::new(2, 2).unwrap());
        let data = generate_dataset(&c.benchmark_config().unwrap()).unwrap();
        let mut s = Session::new(&c, &data.config).unwrap();
        s.train_epoch(&data).unwrap();
        let before = s.model.params.clone();
        let r = s.train_epoch(&data).unwrap();
        assert_eq!(r.total_loss, None);
        assert_eq!(s.model.params, before);
        assert_eq!(s.model.epoch, 2);
    }

    #[test]
    fn imbalanced_sets_use_separate_batches() {
        let mut c = tiny(StrategyId::Gradnorm);
        c.benchmark.n_train_det = Some(20);
        c.benchmark.n_train_seg = Some(4);
        let r = train(&c, None).unwrap();
        let w = r.final_weights.unwrap();
        assert!((w.seg + w.det - 2.0).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn curves_have_fixed_header() {
        let r = train(&tiny(StrategyId::Dynamic), None).unwrap();
        let csv = curves_csv(&r.epochs);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CURVES_HEADER));
        assert_eq!(lines.count(), 2);
    }
}
