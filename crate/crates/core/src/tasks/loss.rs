//! Task losses on top of the network's raw head outputs.
//!
//! Detection head channel layout per cell: `[objectness, ox, oy, w, h, class logits...]`
//! where `(ox, oy)` is the box center offset inside the cell and `(w, h)` are
//! the sides divided by [`BOX_SCALE`].

use super::scene::{BBox, BenchmarkConfig, DetLossCoefs, Scene, BOX_SCALE};
use crate::error::{Error, Result};
use crate::grad::{Graph, Var};

pub const DET_BOX_CHANNELS: usize = 4;
/// Channels ahead of the class logits.
pub const DET_FIXED_CHANNELS: usize = 1 + DET_BOX_CHANNELS;

/// Mean per-cell categorical cross-entropy. `logits: [n, classes, g, g]`.
pub fn seg_loss(graph: &mut Graph, logits: Var, scenes: &[&Scene]) -> Result<Var> {
    let rows = graph.channels_last(logits)?;
    let targets: Vec<usize> = scenes.iter().flat_map(|s| s.seg_labels.iter().copied()).collect();
    graph.cross_entropy(rows, &targets, None)
}

/// Per-cell detection targets for a batch, flattened as `(scene, row, col)`.
#[derive(Debug, Clone)]
pub struct DetTargets {
    pub objectness: Vec<f64>,
    pub obj_weights: Vec<f64>,
    pub boxes: Vec<f64>,
    pub box_weights: Vec<f64>,
    pub classes: Vec<usize>,
    pub class_weights: Vec<f64>,
}

impl DetTargets {
    pub fn build(scenes: &[&Scene], coefs: &DetLossCoefs) -> Self {
        let grid = scenes.first().map(|s| s.grid).unwrap_or(0);
        let cells = grid * grid;
        let n = scenes.len() * cells;
        let mut objectness = vec![0.0; n];
        let mut boxes = vec![0.0; n * DET_BOX_CHANNELS];
        let mut classes = vec![0; n];
        let mut positive = vec![false; n];
        for (si, s) in scenes.iter().enumerate() {
            for b in &s.boxes {
                let (row, col) = b.center_cell(grid);
                let r = si * cells + row * grid + col;
                objectness[r] = 1.0;
                positive[r] = true;
                classes[r] = b.class;
                let off = &mut boxes[r * DET_BOX_CHANNELS..(r + 1) * DET_BOX_CHANNELS];
                off[0] = b.x + b.w / 2.0 - col as f64;
                off[1] = b.y + b.h / 2.0 - row as f64;
                off[2] = b.w / BOX_SCALE;
                off[3] = b.h / BOX_SCALE;
            }
        }
        let n_pos = positive.iter().filter(|&&p| p).count();
        let n_neg = n - n_pos;
        // Positive and negative cells are averaged separately so the few
        // object cells are not drowned out by background.
        let pos_w = 1.0 / n_pos.max(1) as f64;
        let neg_w = coefs.noobj / n_neg.max(1) as f64;
        let obj_weights = positive.iter().map(|&p| if p { pos_w } else { neg_w }).collect();
        let class_weights: Vec<f64> = positive.iter().map(|&p| if p { pos_w } else { 0.0 }).collect();
        let box_weights = class_weights
            .iter()
            .flat_map(|&w| std::iter::repeat_n(w, DET_BOX_CHANNELS))
            .collect();
        Self {
            objectness,
            obj_weights,
            boxes,
            box_weights,
            classes,
            class_weights,
        }
    }
}

/// Detection loss before the benchmark's scale factor.
pub fn det_loss_unscaled(graph: &mut Graph, raw: Var, scenes: &[&Scene], coefs: &DetLossCoefs) -> Result<Var> {
    let rows = graph.channels_last(raw)?;
    let channels = graph.shape(rows)[1];
    if channels <= DET_FIXED_CHANNELS {
        return Err(Error::Graph(format!("detection head has {channels} channels, need > {DET_FIXED_CHANNELS}")));
    }
    let t = DetTargets::build(scenes, coefs);
    let obj = graph.select_cols(rows, 0, 1)?;
    let obj = graph.bce_with_logits(obj, &t.objectness, Some(&t.obj_weights))?;
    let bx = graph.select_cols(rows, 1, DET_BOX_CHANNELS)?;
    let bx = graph.squared_error(bx, &t.boxes, Some(&t.box_weights))?;
    let cls = graph.select_cols(rows, DET_FIXED_CHANNELS, channels - DET_FIXED_CHANNELS)?;
    let cls = graph.cross_entropy(cls, &t.classes, Some(&t.class_weights))?;

    let bx = graph.scale(bx, coefs.coord)?;
    let obj = graph.scale(obj, coefs.obj)?;
    let cls = graph.scale(cls, coefs.cls)?;
    let s = graph.add(bx, obj)?;
    graph.add(s, cls)
}

/// `loss_scale_factor * det_loss_unscaled`.
pub fn det_loss(graph: &mut Graph, raw: Var, scenes: &[&Scene], cfg: &BenchmarkConfig) -> Result<Var> {
    let l = det_loss_unscaled(graph, raw, scenes, &cfg.det_coefs)?;
    graph.scale(l, cfg.loss_scale_factor)
}

/// Scored detection decoded from the head output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Objectness threshold, then box readout from the responsible cell.
pub fn decode_detections(raw: &[f64], n: usize, channels: usize, grid: usize, threshold: f64) -> Vec<Vec<Detection>> {
    let cells = grid * grid;
    let k = channels - DET_FIXED_CHANNELS;
    (0..n)
        .map(|ni| {
            let at = |c: usize, p: usize| raw[(ni * channels + c) * cells + p];
            let mut out = Vec::new();
            for p in 0..cells {
                let obj = sigmoid(at(0, p));
                if obj < threshold {
                    continue;
                }
                let logits: Vec<f64> = (0..k).map(|c| at(DET_FIXED_CHANNELS + c, p)).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                let (class, best) = logits
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
                let prob = (best - max).exp() / z;
                let (row, col) = ((p / grid) as f64, (p % grid) as f64);
                let cx = col + at(1, p).clamp(0.0, 1.0);
                let cy = row + at(2, p).clamp(0.0, 1.0);
                let w = (at(3, p) * BOX_SCALE).clamp(0.0, grid as f64);
                let h = (at(4, p) * BOX_SCALE).clamp(0.0, grid as f64);
                out.push(Detection {
                    bbox: BBox {
                        class,
                        x: cx - w / 2.0,
                        y: cy - h / 2.0,
                        w,
                        h,
                    },
                    score: obj * prob,
                });
            }
            out
        })
        .collect()
}

/// Greedy per-class suppression: keeps the highest-scoring box and drops
/// same-class boxes overlapping it by more than `iou`.
pub fn non_max_suppression(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.bbox.class != d.bbox.class || k.bbox.iou(&d.bbox) <= iou) {
            kept.push(d);
        }
    }
    kept
}

/// Per-cell argmax of segmentation logits `[n, classes, g, g]`.
pub fn decode_segmentation(raw: &[f64], n: usize, classes: usize, grid: usize) -> Vec<Vec<usize>> {
    let cells = grid * grid;
    (0..n)
        .map(|ni| {
            (0..cells)
                .map(|p| {
                    (0..classes)
                        .map(|c| raw[(ni * classes + c) * cells + p])
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (c, v)| if v > acc.1 { (c, v) } else { acc })
                        .0
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suppression_keeps_best_per_class() {
        let b = |class, x: f64, score| Detection {
            bbox: BBox { class, x, y: 0.0, w: 2.0, h: 2.0 },
            score,
        };
        let kept = non_max_suppression(vec![b(0, 0.0, 0.5), b(0, 0.1, 0.9), b(1, 0.1, 0.4), b(0, 5.0, 0.3)], 0.5);
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.4, 0.3]);
    }
    use crate::grad::Tensor;
    use crate::tasks::scene::{render_scene, Preset};

    fn seg_logits_for(scene: &Scene, classes: usize, hot: f64) -> Tensor {
        let cells = scene.grid * scene.grid;
        let mut data = vec![0.0; classes * cells];
        for (p, &l) in scene.seg_labels.iter().enumerate() {
            data[l * cells + p] = hot;
        }
        Tensor::new(vec![1, classes, scene.grid, scene.grid], data).unwrap()
    }

    #[test]
    fn uniform_segmentation_costs_ln_classes() {
        let cfg = BenchmarkConfig::preset(Preset::BalancedSmall, 1);
        let s = render_scene(&cfg, 0);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4, s.grid, s.grid]));
        let l = seg_loss(&mut g, z, &[&s]).unwrap();
        assert!((g.item(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_segmentation_costs_nothing() {
        let cfg = BenchmarkConfig::preset(Preset::BalancedSmall, 1);
        let s = render_scene(&cfg, 0);
        let mut g = Graph::new();
        let z = g.constant(seg_logits_for(&s, 4, 800.0));
        let l = seg_loss(&mut g, z, &[&s]).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn det_loss_scales_exactly() {
        let mut cfg = BenchmarkConfig::preset(Preset::BalancedSmall, 2);
        let s = render_scene(&cfg, 4);
        let raw = Tensor::new(
            vec![1, 7, s.grid, s.grid],
            (0..7 * s.grid * s.grid).map(|i| ((i * 37) % 11) as f64 / 10.0 - 0.5).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let z = g.constant(raw);
        let base = det_loss_unscaled(&mut g, z, &[&s], &cfg.det_coefs).unwrap();
        cfg.loss_scale_factor = 70.0;
        let scaled = det_loss(&mut g, z, &[&s], &cfg).unwrap();
        assert_eq!(g.item(scaled), 70.0 * g.item(base));
        assert!(g.item(base) > 0.0);
    }

    #[test]
    fn decoding_recovers_encoded_boxes() {
        let cfg = BenchmarkConfig::preset(Preset::BalancedSmall, 5);
        let s = render_scene(&cfg, 9);
        let grid = s.grid;
        let cells = grid * grid;
        let t = DetTargets::build(&[&s], &cfg.det_coefs);
        let ch = 7;
        let mut raw = vec![-20.0; ch * cells];
        for p in 0..cells {
            if t.objectness[p] == 1.0 {
                raw[p] = 20.0;
                for c in 0..4 {
                    raw[(1 + c) * cells + p] = t.boxes[p * 4 + c];
                }
                raw[(5 + t.classes[p]) * cells + p] = 20.0;
            }
        }
        let dets = decode_detections(&raw, 1, ch, grid, 0.5);
        assert_eq!(dets[0].len(), s.boxes.len());
        for b in &s.boxes {
            assert!(dets[0].iter().any(|d| d.bbox.class == b.class && d.bbox.iou(b) > 1.0 - 1e-9));
        }
    }
}
