//! Procedural two-task scenes: a noisy intensity grid with a road band and
//! rectangular objects, annotated both per cell (segmentation) and per
//! object (detection).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: usize = 0;
pub const ROAD: usize = 1;
/// Segmentation id of the first object class; object class `k` maps to `FIRST_OBJECT + k`.
pub const FIRST_OBJECT: usize = 2;
/// Box sides are regressed as `side / BOX_SCALE`.
pub const BOX_SCALE: f64 = 4.0;

/// Axis-aligned box in cell units, `(x, y)` being the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Grid cell `(row, col)` that holds the box center.
    pub fn center_cell(&self, grid: usize) -> (usize, usize) {
        let cx = (self.x + self.w / 2.0).floor().clamp(0.0, (grid - 1) as f64);
        let cy = (self.y + self.h / 2.0).floor().clamp(0.0, (grid - 1) as f64);
        (cy as usize, cx as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: usize,
    /// Row-major `grid x grid` intensities.
    pub pixels: Vec<f64>,
    /// Row-major `grid x grid` segmentation class ids.
    pub seg_labels: Vec<usize>,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetLossCoefs {
    pub coord: f64,
    pub obj: f64,
    pub cls: f64,
    /// Relative weight of objectness on cells without an object.
    pub noobj: f64,
}

impl Default for DetLossCoefs {
    fn default() -> Self {
        Self {
            coord: 5.0,
            obj: 1.0,
            cls: 1.0,
            noobj: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Few segmentation labels relative to detection labels (17:1).
    ImbalancedSeg,
    BalancedLarge,
    BalancedSmall,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::ImbalancedSeg, Preset::BalancedLarge, Preset::BalancedSmall];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::ImbalancedSeg => "imbalanced-seg",
            Preset::BalancedLarge => "balanced-large",
            Preset::BalancedSmall => "balanced-small",
        }
    }

    /// Full-length epoch budget used by the benchmark for this preset.
    pub fn default_epochs(self) -> usize {
        match self {
            Preset::BalancedSmall => 50,
            _ => 60,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown preset `{s}`")))
    }
}

/// Named detection-loss scale factors.
pub fn loss_scale_preset(name: &str) -> Option<f64> {
    match name {
        "kitti" => Some(70.0),
        "cityscapes" => Some(40.0),
        "woodscape" => Some(100.0),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub grid: usize,
    /// Number of object classes; segmentation has `2 + shape_classes` classes.
    pub shape_classes: usize,
    pub max_objects: usize,
    pub n_train_det: usize,
    pub n_train_seg: usize,
    pub n_val: usize,
    pub loss_scale_factor: f64,
    pub min_box_area: f64,
    pub noise: f64,
    pub det_coefs: DetLossCoefs,
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let base = Self {
            grid: 16,
            shape_classes: 2,
            max_objects: 3,
            n_train_det: 256,
            n_train_seg: 256,
            n_val: 64,
            loss_scale_factor: 40.0,
            min_box_area: 3.0,
            noise: 0.2,
            det_coefs: DetLossCoefs::default(),
            seed,
        };
        match preset {
            Preset::ImbalancedSeg => Self {
                n_train_det: 272,
                n_train_seg: 16,
                loss_scale_factor: 70.0,
                ..base
            },
            Preset::BalancedLarge => base,
            Preset::BalancedSmall => Self {
                n_train_det: 64,
                n_train_seg: 64,
                loss_scale_factor: 100.0,
                ..base
            },
        }
    }

    pub fn seg_classes(&self) -> usize {
        FIRST_OBJECT + self.shape_classes
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.grid < 4 {
            v.push(format!("grid must be >= 4, got {}", self.grid));
        }
        if self.shape_classes == 0 {
            v.push("shape_classes must be positive".into());
        }
        if self.max_objects == 0 {
            v.push("max_objects must be positive".into());
        }
        for (name, n) in [
            ("n_train_det", self.n_train_det),
            ("n_train_seg", self.n_train_seg),
            ("n_val", self.n_val),
        ] {
            if n == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.n_train_seg > self.n_train_det {
            v.push("n_train_seg must not exceed n_train_det (seg labels annotate a subset)".into());
        }
        if !(self.loss_scale_factor > 0.0 && self.loss_scale_factor.is_finite()) {
            v.push(format!("loss_scale_factor must be > 0, got {}", self.loss_scale_factor));
        }
        if !(self.min_box_area >= 0.0) {
            v.push("min_box_area must be >= 0".into());
        }
        if !(self.noise >= 0.0) {
            v.push("noise must be >= 0".into());
        }
        let c = self.det_coefs;
        if [c.coord, c.obj, c.cls, c.noobj].iter().any(|x| !(*x >= 0.0)) {
            v.push("detection loss coefficients must be >= 0".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Training scenes carry detection labels; the first `n_train_seg` of them
/// also carry segmentation labels. Validation scenes carry both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: BenchmarkConfig,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn train_det(&self) -> &[Scene] {
        &self.train
    }

    pub fn train_seg(&self) -> &[Scene] {
        &self.train[..self.config.n_train_seg]
    }
}

const VAL_STREAM: u64 = 1 << 32;

pub fn generate_dataset(cfg: &BenchmarkConfig) -> Result<Dataset> {
    cfg.validate()?;
    let train = (0..cfg.n_train_det as u64).map(|i| render_scene(cfg, i)).collect();
    let val = (0..cfg.n_val as u64).map(|i| render_scene(cfg, VAL_STREAM + i)).collect();
    Ok(Dataset {
        config: cfg.clone(),
        train,
        val,
    })
}

fn class_intensity(class: usize, n_classes: usize) -> f64 {
    // Object classes spread over [0.55, 0.95]; road sits at 0.3.
    if n_classes == 1 {
        0.8
    } else {
        0.55 + 0.4 * class as f64 / (n_classes - 1) as f64
    }
}

/// Scene `index` depends only on `(cfg, index)`.
pub fn render_scene(cfg: &BenchmarkConfig, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let g = cfg.grid;
    let mut labels = vec![BACKGROUND; g * g];
    let mut clean = vec![0.0; g * g];

    if rng.random_bool(0.8) {
        let height = rng.random_range(2..=4).min(g);
        let top = rng.random_range(g / 2..=g - height);
        for y in top..top + height {
            for x in 0..g {
                labels[y * g + x] = ROAD;
                clean[y * g + x] = 0.3;
            }
        }
    }

    let n_obj = rng.random_range(1..=cfg.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        for _attempt in 0..20 {
            let w = rng.random_range(1..=4usize).min(g);
            let h = rng.random_range(1..=4usize).min(g);
            let x = rng.random_range(0..=g - w);
            let y = rng.random_range(0..=g - h);
            let cand = BBox {
                class: rng.random_range(0..cfg.shape_classes),
                x: x as f64,
                y: y as f64,
                w: w as f64,
                h: h as f64,
            };
            // Keep objects one cell apart so each owns a distinct center cell.
            let grown = BBox {
                x: cand.x - 1.0,
                y: cand.y - 1.0,
                w: cand.w + 2.0,
                h: cand.h + 2.0,
                ..cand
            };
            if boxes.iter().any(|b| grown.iou(b) > 0.0) {
                continue;
            }
            let level = class_intensity(cand.class, cfg.shape_classes);
            for yy in y..y + h {
                for xx in x..x + w {
                    labels[yy * g + xx] = FIRST_OBJECT + cand.class;
                    clean[yy * g + xx] = level;
                }
            }
            boxes.push(cand);
            break;
        }
    }

    let pixels = if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("valid noise");
        clean.iter().map(|v| v + normal.sample(&mut rng)).collect()
    } else {
        clean
    };
    Scene {
        grid: g,
        pixels,
        seg_labels: labels,
        boxes,
    }
}
