use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::meta::run_meta_on;
use super::train::{to_json, train_on, write_file};
use crate::error::{Error, Result};
use crate::tasks::{combined_metric, generate_dataset, Preset};
use crate::weighting::StrategyId;

pub const ROWS_HEADER: &str = "preset,method,seed,map,miou,g,w_seg,w_det,nu_seg,nu_det,error";
pub const TABLE_HEADER: &str = "preset,method,runs,map,miou,g,median_g";

/// A preset x method x seed matrix sharing one base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "all_presets")]
    pub presets: Vec<Preset>,
    #[serde(default = "all_methods")]
    pub methods: Vec<StrategyId>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: RunConfig,
}

fn all_presets() -> Vec<Preset> {
    Preset::ALL.to_vec()
}

fn all_methods() -> Vec<StrategyId> {
    StrategyId::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            presets: all_presets(),
            methods: all_methods(),
            seeds: default_seeds(),
            base: RunConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// One config per cell, presets outermost. Meta methods get no weights
    /// so the search runs.
    pub fn matrix(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &preset in &self.presets {
            for &method in &self.methods {
                for &seed in &self.seeds {
                    let mut c = self.base.clone();
                    c.preset = preset;
                    c.seed = seed;
                    c.out = None;
                    c.strategy.id = method;
                    c.strategy.weights = None;
                    if !method.is_meta() {
                        c.schedule = None;
                    }
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.presets.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("bench needs at least one preset, method and seed"));
        }
        let mut v = Vec::new();
        for c in self.matrix() {
            if let Err(e) = c.validate() {
                match e {
                    Error::Config(m) => v.extend(m.into_iter().map(|m| format!("{} {}: {m}", c.preset.as_str(), c.strategy.id))),
                    other => v.push(other.to_string()),
                }
            }
        }
        v.dedup();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub preset: Preset,
    pub method: StrategyId,
    pub seed: u64,
    pub map: Option<f64>,
    pub miou: Option<f64>,
    pub g: Option<f64>,
    /// Normalized weights a meta method selected.
    pub weights: Option<[f64; 2]>,
    pub periods: Option<[u32; 2]>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub preset: Preset,
    pub method: StrategyId,
    /// Successful runs.
    pub runs: usize,
    pub map: f64,
    pub miou: f64,
    /// Combined metric of the mean mAP and mean mIoU.
    pub g: f64,
    /// Median of the per-seed combined metrics.
    pub median_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub summary: Vec<SummaryRow>,
    /// Mean G over presets, for methods that have every preset.
    pub average: Vec<(StrategyId, f64)>,
}

fn run_row(cfg: &RunConfig) -> Result<BenchRow> {
    let data = generate_dataset(&cfg.benchmark_config()?)?;
    let (metrics, weights, periods) = if cfg.strategy.id.is_meta() {
        let m = run_meta_on(cfg, &data, 1)?;
        let nu = m.best_config.schedule.unwrap_or_default();
        (m.result.metrics, m.best_config.strategy.weights, Some([nu.nu_seg, nu.nu_det]))
    } else {
        let (r, _) = train_on(cfg, &data, None, cfg.epoch_budget())?;
        (r.metrics, None, None)
    };
    Ok(BenchRow {
        preset: cfg.preset,
        method: cfg.strategy.id,
        seed: cfg.seed,
        map: Some(metrics.map),
        miou: Some(metrics.miou),
        g: Some(combined_metric(metrics.map, metrics.miou)?),
        weights,
        periods,
        error: None,
    })
}

/// Runs every config on up to `jobs` threads; a failed row is reported in
/// the table instead of aborting the matrix.
pub fn run_benchmark(matrix: &[RunConfig], jobs: usize) -> Result<BenchTable> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Search(e.to_string()))?;
    let rows: Vec<BenchRow> = pool.install(|| {
        matrix
            .par_iter()
            .map(|cfg| {
                let row = run_row(cfg).unwrap_or_else(|e| {
                    log::warn!("{} {} seed {} failed: {e}", cfg.preset.as_str(), cfg.strategy.id, cfg.seed);
                    BenchRow {
                        preset: cfg.preset,
                        method: cfg.strategy.id,
                        seed: cfg.seed,
                        map: None,
                        miou: None,
                        g: None,
                        weights: None,
                        periods: None,
                        error: Some(e.to_string()),
                    }
                });
                log::info!("{} {} seed {}: G {:?}", cfg.preset.as_str(), cfg.strategy.id, cfg.seed, row.g);
                row
            })
            .collect()
    });
    summarize(rows)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Aggregates rows per (preset, method) and across presets. G is always
/// recomputed from mAP and mIoU.
pub fn summarize(rows: Vec<BenchRow>) -> Result<BenchTable> {
    let mut keys: Vec<(Preset, StrategyId)> = Vec::new();
    for r in &rows {
        if !keys.contains(&(r.preset, r.method)) {
            keys.push((r.preset, r.method));
        }
    }
    let mut summary = Vec::new();
    for (preset, method) in keys {
        let ok: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.preset == preset && r.method == method)
            .filter_map(|r| Some((r.map?, r.miou?)))
            .collect();
        if ok.is_empty() {
            continue;
        }
        let n = ok.len() as f64;
        let map = ok.iter().map(|p| p.0).sum::<f64>() / n;
        let miou = ok.iter().map(|p| p.1).sum::<f64>() / n;
        let per_seed = ok
            .iter()
            .map(|&(a, b)| combined_metric(a, b))
            .collect::<Result<Vec<_>>>()?;
        summary.push(SummaryRow {
            preset,
            method,
            runs: ok.len(),
            map,
            miou,
            g: combined_metric(map, miou)?,
            median_g: median(per_seed),
        });
    }
    let presets: Vec<Preset> = Preset::ALL.into_iter().filter(|p| summary.iter().any(|s| s.preset == *p)).collect();
    let mut average = Vec::new();
    for method in StrategyId::ALL {
        let gs: Vec<f64> = presets
            .iter()
            .filter_map(|p| summary.iter().find(|s| s.preset == *p && s.method == method).map(|s| s.g))
            .collect();
        if !gs.is_empty() && gs.len() == presets.len() {
            average.push((method, gs.iter().sum::<f64>() / gs.len() as f64));
        }
    }
    Ok(BenchTable { rows, summary, average })
}

impl BenchTable {
    pub fn summary_for(&self, preset: Preset, method: StrategyId) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.preset == preset && s.method == method)
    }

    pub fn rows_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = format!("{ROWS_HEADER}\n");
        for r in &self.rows {
            let (ws, wd) = r.weights.map_or((String::new(), String::new()), |w| (w[0].to_string(), w[1].to_string()));
            let (ns, nd) = r.periods.map_or((String::new(), String::new()), |p| (p[0].to_string(), p[1].to_string()));
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            s.push_str(&format!(
                "{},{},{},{},{},{},{ws},{wd},{ns},{nd},{err}\n",
                r.preset.as_str(),
                r.method,
                r.seed,
                f(r.map),
                f(r.miou),
                f(r.g)
            ));
        }
        s
    }

    pub fn table_csv(&self) -> String {
        let mut s = format!("{TABLE_HEADER}\n");
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.preset.as_str(),
                r.method,
                r.runs,
                r.map,
                r.miou,
                r.g,
                r.median_g
            ));
        }
        for (m, g) in &self.average {
            s.push_str(&format!("average,{m},,,,{g},\n"));
        }
        s
    }

    /// Console table, one block per preset.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for preset in Preset::ALL {
            let rows: Vec<&SummaryRow> = self.summary.iter().filter(|r| r.preset == preset).collect();
            if rows.is_empty() {
                continue;
            }
            s.push_str(&format!("{}\n", preset.as_str()));
            s.push_str(&format!("  {:<12} {:>4} {:>7} {:>7} {:>7} {:>8}\n", "method", "runs", "mAP", "mIoU", "G", "median G"));
            for r in rows {
                s.push_str(&format!(
                    "  {:<12} {:>4} {:>7.4} {:>7.4} {:>7.4} {:>8.4}\n",
                    r.method.as_str(),
                    r.runs,
                    r.map,
                    r.miou,
                    r.g,
                    r.median_g
                ));
            }
        }
        if !self.average.is_empty() {
            s.push_str("average G\n");
            for (m, g) in &self.average {
                s.push_str(&format!("  {:<12} {:>7.4}\n", m.as_str(), g));
            }
        }
        let failed = self.rows.iter().filter(|r| r.error.is_some()).count();
        if failed > 0 {
            s.push_str(&format!("{failed} run(s) failed; see rows.csv\n"));
        }
        s
    }

    /// `result.json`, `table.csv` and `rows.csv` under `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        write_file(&out.join("result.json"), to_json(self)?.as_bytes())?;
        write_file(&out.join("table.csv"), self.table_csv().as_bytes())?;
        write_file(&out.join("rows.csv"), self.rows_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::fixtures::{DATASETS, REFERENCE, REFERENCE_AVERAGE};
    use crate::bench::tests_support::tiny;

    fn row(preset: Preset, method: StrategyId, seed: u64, map: f64, miou: f64) -> BenchRow {
        BenchRow {
            preset,
            method,
            seed,
            map: Some(map),
            miou: Some(miou),
            g: None,
            weights: None,
            periods: None,
            error: None,
        }
    }

    #[test]
    fn reference_rows_through_the_table() {
        let mut rows = Vec::new();
        for (d, preset) in Preset::ALL.into_iter().enumerate() {
            for (m, &(map, miou, _)) in REFERENCE[d].iter().enumerate() {
                rows.push(row(preset, StrategyId::ALL[m], 0, map, miou));
            }
        }
        let t = summarize(rows).unwrap();
        for s in &t.summary {
            assert!((s.g - combined_metric(s.map, s.miou).unwrap()).abs() < 1e-12);
            let d = Preset::ALL.iter().position(|p| *p == s.preset).unwrap();
            let m = StrategyId::ALL.iter().position(|x| *x == s.method).unwrap();
            assert!((s.g - REFERENCE[d][m].2).abs() <= 5e-4, "{} {}", DATASETS[d], s.method);
        }
        assert_eq!(t.average.len(), 9);
        let meta_async = t.average.iter().find(|(m, _)| *m == StrategyId::MetaAsync).unwrap().1;
        assert!((meta_async - REFERENCE_AVERAGE[8]).abs() <= 5e-4, "{meta_async}");
    }

    #[test]
    fn mean_then_combine_and_median() {
        let p = Preset::BalancedLarge;
        let rows = vec![
            row(p, StrategyId::None, 0, 0.25, 1.0),
            row(p, StrategyId::None, 1, 1.0, 0.25),
            row(p, StrategyId::None, 2, 0.64, 0.64),
        ];
        let t = summarize(rows).unwrap();
        let s = &t.summary[0];
        assert!((s.map - 0.63).abs() < 1e-12);
        assert!((s.g - 0.63).abs() < 1e-12);
        assert!((s.median_g - 0.5).abs() < 1e-12);
        assert!(t.average.len() == 1);
    }

    #[test]
    fn failed_rows_are_reported() {
        let mut bad = tiny(StrategyId::None);
        bad.benchmark.n_val = Some(0);
        let t = run_benchmark(&[tiny(StrategyId::Dynamic), bad], 2).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows[0].error.is_none());
        assert!(t.rows[1].error.is_some(), "{:?}", t.rows[1]);
        assert!(t.rows_csv().lines().count() == 3);
    }

    #[test]
    fn matrix_expands_and_parses() {
        let b = BenchConfig::from_toml("presets = [\"balanced-small\"]\nmethods = [\"none\", \"meta-async\"]\nseeds = [1, 2]\n").unwrap();
        let m = b.matrix();
        assert_eq!(m.len(), 4);
        assert!(m.iter().all(|c| c.strategy.weights.is_none()));
        b.validate().unwrap();
    }
}
