//! Published reference results: per-method mAP / mIoU pairs with their
//! printed combined metric, and the meta-learned task weights and periods.

use serde::Serialize;

use crate::error::Result;
use crate::task::PerTask;
use crate::tasks::combined_metric;
use crate::weighting::{normalize_weights, StrategyId};

/// Printed values carry four decimals.
pub const PRINT_TOLERANCE: f64 = 5e-4;

pub const DATASETS: [&str; 3] = ["KITTI", "Cityscapes", "WoodScape"];

/// `(map, miou, printed G)` per dataset, in `StrategyId::ALL` order.
pub const REFERENCE: [[(f64, f64, f64); 9]; 3] = [
    [
        (0.6535, 0.8114, 0.7282),
        (0.6289, 0.8408, 0.7272),
        (0.1736, 0.8079, 0.3745),
        (0.6589, 0.7974, 0.7248),
        (0.6653, 0.8080, 0.7332),
        (0.5677, 0.8176, 0.6813),
        (0.6727, 0.8040, 0.7354),
        (0.6974, 0.8301, 0.7609),
        (0.7260, 0.8408, 0.7813),
    ],
    [
        (0.2572, 0.6356, 0.4043),
        (0.2970, 0.5780, 0.4143),
        (0.2824, 0.5796, 0.4045),
        (0.2968, 0.5646, 0.4094),
        (0.2870, 0.5492, 0.3970),
        (0.2900, 0.5819, 0.4108),
        (0.2972, 0.5573, 0.4070),
        (0.3091, 0.5812, 0.4239),
        (0.3177, 0.5815, 0.4298),
    ],
    [
        (0.4643, 0.7180, 0.5774),
        (0.4438, 0.8107, 0.5998),
        (0.4557, 0.8118, 0.6082),
        (0.4525, 0.7806, 0.5943),
        (0.4511, 0.8155, 0.6065),
        (0.4193, 0.8227, 0.5874),
        (0.4419, 0.8227, 0.6030),
        (0.4677, 0.8006, 0.6119),
        (0.4862, 0.7838, 0.6173),
    ],
];

/// Printed cross-dataset average of G per method.
pub const REFERENCE_AVERAGE: [f64; 9] = [0.5700, 0.5804, 0.4624, 0.5762, 0.5789, 0.5598, 0.5818, 0.5989, 0.6095];

/// Meta-learned `(w_seg, w_det)` per dataset: static, then asynchronous.
pub const META_WEIGHTS: [[[f64; 2]; 2]; 3] = [
    [[0.8490, 0.1510], [0.9776, 0.0224]],
    [[0.9478, 0.0522], [0.8692, 0.1308]],
    [[0.9743, 0.0257], [0.8550, 0.1450]],
];

/// Meta-learned `(nu_seg, nu_det)` per dataset.
pub const META_PERIODS: [[u32; 2]; 3] = [[7, 1], [1, 5], [1, 2]];

/// Handcrafted loss scale per dataset.
pub const LOSS_SCALES: [f64; 3] = [70.0, 40.0, 100.0];

#[derive(Debug, Clone, Serialize)]
pub struct FixtureRow {
    pub dataset: &'static str,
    pub method: StrategyId,
    pub map: f64,
    pub miou: f64,
    pub printed: f64,
    pub computed: f64,
}

impl FixtureRow {
    pub fn error(&self) -> f64 {
        (self.computed - self.printed).abs()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FixtureReport {
    pub rows: Vec<FixtureRow>,
    /// `(method, printed, computed)` for the average row.
    pub averages: Vec<(StrategyId, f64, f64)>,
    /// `(printed pair, normalized pair)` for every meta-learned weight pair.
    pub weights: Vec<([f64; 2], [f64; 2])>,
}

impl FixtureReport {
    pub fn max_row_error(&self) -> f64 {
        self.rows.iter().map(FixtureRow::error).fold(0.0, f64::max)
    }

    pub fn max_average_error(&self) -> f64 {
        self.averages.iter().map(|(_, p, c)| (p - c).abs()).fold(0.0, f64::max)
    }

    /// Largest deviation of a printed pair's sum from one.
    pub fn max_weight_sum_error(&self) -> f64 {
        self.weights.iter().map(|(p, _)| (p[0] + p[1] - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.max_row_error() <= PRINT_TOLERANCE
            && self.max_average_error() <= PRINT_TOLERANCE
            && self.max_weight_sum_error() <= 1e-3
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<11} {:<12} {:>7} {:>7} {:>8} {:>8} {:>8}\n", "dataset", "method", "mAP", "mIoU", "G", "printed", "error");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<11} {:<12} {:>7.4} {:>7.4} {:>8.4} {:>8.4} {:>8.1e}\n",
                r.dataset,
                r.method.as_str(),
                r.map,
                r.miou,
                r.computed,
                r.printed,
                r.error()
            ));
        }
        for (m, p, c) in &self.averages {
            s.push_str(&format!(
                "{:<11} {:<12} {:>7} {:>7} {:>8.4} {:>8.4} {:>8.1e}\n",
                "average",
                m.as_str(),
                "",
                "",
                c,
                p,
                (p - c).abs()
            ));
        }
        for (p, n) in &self.weights {
            s.push_str(&format!(
                "weights ({:.4}, {:.4}) -> ({:.6}, {:.6}) sum {:.4}\n",
                p[0],
                p[1],
                n[0],
                n[1],
                p[0] + p[1]
            ));
        }
        s
    }
}

/// Recomputes every combined metric and the average row from the pairs.
pub fn check_fixtures() -> Result<FixtureReport> {
    let mut rows = Vec::new();
    let mut sums = [0.0; 9];
    for (d, dataset) in DATASETS.iter().enumerate() {
        for (m, &(map, miou, printed)) in REFERENCE[d].iter().enumerate() {
            let computed = combined_metric(map, miou)?;
            sums[m] += computed;
            rows.push(FixtureRow {
                dataset,
                method: StrategyId::ALL[m],
                map,
                miou,
                printed,
                computed,
            });
        }
    }
    let averages = StrategyId::ALL
        .iter()
        .zip(REFERENCE_AVERAGE)
        .zip(sums)
        .map(|((&m, p), s)| (m, p, s / DATASETS.len() as f64))
        .collect();
    let mut weights = Vec::new();
    for pair in META_WEIGHTS.iter().flatten() {
        let n = normalize_weights(PerTask::new(pair[0], pair[1]))?;
        weights.push((*pair, [n.seg, n.det]));
    }
    Ok(FixtureReport { rows, averages, weights })
}
