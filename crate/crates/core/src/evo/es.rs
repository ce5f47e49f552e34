use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::history::{Budget, EvalMetrics, History, RunRecord};
use super::space::{SearchSpace, Value};
use crate::error::{Error, Result};

/// Draws per noise level before the noise is widened.
pub const TABU_DRAWS: usize = 100;
/// Noise doublings before the search gives up on a candidate.
pub const TABU_EXPANSIONS: u32 = 3;
/// Step-size factor of the success rule.
const SIGMA_FACTOR: f64 = 0.82;
const SIGMA_MAX: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    pub initial_population: usize,
    pub offspring: usize,
    pub parents: usize,
    /// Initial mutation standard deviation in the normalized domain.
    pub sigma: f64,
    /// Coefficient on the best-vs-previous-best direction, in units of sigma.
    pub bias_coef: f64,
    pub tabu_threshold: f64,
    pub max_evaluations: usize,
    /// Epochs for evaluations trained from scratch.
    pub full_epochs: Option<usize>,
    /// Epochs for warm-started evaluations; a quarter of the full budget when absent.
    pub warm_epochs: Option<usize>,
    /// One-fifth success rule on sigma.
    pub adapt_sigma: bool,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            initial_population: 4,
            offspring: 4,
            parents: 2,
            sigma: 0.1,
            bias_coef: 0.5,
            tabu_threshold: 0.001,
            max_evaluations: 64,
            full_epochs: None,
            warm_epochs: None,
            adapt_sigma: true,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.initial_population == 0 || self.offspring == 0 || self.parents == 0 {
            v.push("population sizes must be positive".to_string());
        }
        if self.parents > self.initial_population {
            v.push("parents per offspring exceed the population".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            v.push("sigma must be finite and >= 0".into());
        }
        if !(self.bias_coef >= 0.0 && self.bias_coef.is_finite()) {
            v.push("bias_coef must be finite and >= 0".into());
        }
        if !(self.tabu_threshold > 0.0 && self.tabu_threshold < 0.1) {
            v.push("tabu_threshold must lie in (0, 0.1)".into());
        }
        if self.max_evaluations < self.initial_population {
            v.push("max_evaluations must cover the initial population".into());
        }
        if self.full_epochs == Some(0) || self.warm_epochs == Some(0) {
            v.push("epoch budgets must be positive".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn full_budget(&self) -> usize {
        self.full_epochs.unwrap_or(1)
    }

    pub fn warm_budget(&self) -> usize {
        self.warm_epochs.unwrap_or((self.full_budget() / 4).max(1))
    }

    fn sigma_floor(&self) -> f64 {
        (5.0 * self.tabu_threshold).min(self.sigma)
    }
}

pub struct EvalRequest<'a> {
    pub id: usize,
    pub point: &'a [f64],
    pub values: &'a [Value],
    pub warm_from: Option<usize>,
    pub budget: Budget,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// Target metric in `[0, 1]`.
    pub fitness: f64,
    pub metrics: Option<EvalMetrics>,
}

/// Maps a candidate to its fitness. Must be safe to call from several
/// threads at once, each call owning its own model state.
pub trait Evaluator: Sync {
    fn evaluate(&self, req: &EvalRequest<'_>) -> Result<EvalOutcome>;
}

/// Evaluator from a plain function of the normalized point.
pub struct FnEvaluator<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Evaluator for FnEvaluator<F> {
    fn evaluate(&self, req: &EvalRequest<'_>) -> Result<EvalOutcome> {
        Ok(EvalOutcome {
            fitness: (self.0)(req.point),
            metrics: None,
        })
    }
}

pub fn min_pairwise_distance(space: &SearchSpace, points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.min(space.tabu_distance(a, b));
        }
    }
    best
}

fn passes_tabu(space: &SearchSpace, p: &[f64], tabu: &[Vec<f64>], threshold: f64) -> bool {
    tabu.iter().all(|t| space.tabu_distance(p, t) >= threshold)
}

/// Numeric mean and uniform categorical pick over the parents.
pub fn recombine(space: &SearchSpace, parents: &[&[f64]], rng: &mut impl Rng) -> Vec<f64> {
    (0..space.dim())
        .map(|i| {
            if space.variables[i].is_categorical() {
                parents[rng.random_range(0..parents.len())][i]
            } else {
                parents.iter().map(|p| p[i]).sum::<f64>() / parents.len() as f64
            }
        })
        .collect()
}

/// Child of `parents`: recombination, plus `bias_coef * sigma * grad`, plus
/// Gaussian noise, clipped to `[0, 1]`. Draws are retried until the child is at
/// least `tabu_threshold` from every point in `tabu`, widening the noise when
/// the retries run out.
pub fn mutate(
    space: &SearchSpace,
    parents: &[&[f64]],
    grad: &[f64],
    cfg: &EsConfig,
    sigma: f64,
    tabu: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let base = recombine(space, parents, rng);
    for expansion in 0..=TABU_EXPANSIONS {
        let noise = sigma * f64::from(1u32 << expansion);
        for _ in 0..TABU_DRAWS {
            let child: Vec<f64> = space
                .variables
                .iter()
                .enumerate()
                .map(|(i, var)| match var.n_categories() {
                    Some(n) => {
                        if rng.random_bool(noise.min(1.0)) {
                            let other = rng.random_range(0..n - 1) as f64;
                            if other >= base[i] {
                                other + 1.0
                            } else {
                                other
                            }
                        } else {
                            base[i]
                        }
                    }
                    None => {
                        let z: f64 = StandardNormal.sample(rng);
                        (base[i] + cfg.bias_coef * sigma * grad[i] + noise * z).clamp(0.0, 1.0)
                    }
                })
                .collect();
            if passes_tabu(space, &child, tabu, cfg.tabu_threshold) {
                return Ok(child);
            }
        }
    }
    Err(Error::Search(format!(
        "no candidate at distance >= {} from the history after {} draws; \
         lower tabu_threshold or max_evaluations",
        cfg.tabu_threshold,
        TABU_DRAWS * (TABU_EXPANSIONS as usize + 1)
    )))
}

/// Difference `best - previous` on numeric variables, scaled to unit max-norm.
pub fn gradient_between(space: &SearchSpace, best: &[f64], previous: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = space
        .variables
        .iter()
        .enumerate()
        .map(|(i, v)| if v.is_categorical() { 0.0 } else { best[i] - previous[i] })
        .collect();
    let m = d.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if m == 0.0 {
        d
    } else {
        d.into_iter().map(|x| x / m).collect()
    }
}

/// Direction from the previous incumbent to the current one; zero with
/// fewer than two improvements on record.
pub fn estimate_gradient(space: &SearchSpace, history: &History) -> Vec<f64> {
    let imp = history.improvements();
    match imp.as_slice() {
        [.., prev, best] => gradient_between(space, &best.point, &prev.point),
        _ => vec![0.0; space.dim()],
    }
}

/// Best `mu` records, fitness descending, earlier ids first on ties.
pub fn select_population(history: &History, mu: usize) -> Vec<&RunRecord> {
    let mut all: Vec<&RunRecord> = history.records().iter().collect();
    all.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.id.cmp(&b.id)));
    all.truncate(mu);
    all
}

fn adapt_sigma(cfg: &EsConfig, sigma: f64, successes: usize, trials: usize) -> f64 {
    if !cfg.adapt_sigma || trials == 0 {
        return sigma;
    }
    let rate = successes as f64 / trials as f64;
    let next = if rate > 0.2 {
        sigma / SIGMA_FACTOR
    } else if rate < 0.2 {
        sigma * SIGMA_FACTOR
    } else {
        sigma
    };
    next.clamp(cfg.sigma_floor(), SIGMA_MAX.max(cfg.sigma))
}

/// Step size for the next generation, replayed from the records.
fn next_sigma(cfg: &EsConfig, history: &History) -> f64 {
    let Some(last) = history.records().last() else {
        return cfg.sigma;
    };
    let gen = last.generation;
    if gen == 0 {
        return cfg.sigma;
    }
    let before = history
        .records()
        .iter()
        .filter(|r| r.generation < gen)
        .map(|r| r.fitness)
        .fold(f64::NEG_INFINITY, f64::max);
    let current: Vec<&RunRecord> = history.records().iter().filter(|r| r.generation == gen).collect();
    let wins = current.iter().filter(|r| r.fitness > before).count();
    adapt_sigma(cfg, current[0].sigma, wins, current.len())
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct Pending {
    id: usize,
    point: Vec<f64>,
    values: Vec<Value>,
    parents: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: RunRecord,
    pub history: Vec<RunRecord>,
    /// Evaluations performed by this call (excludes resumed records).
    pub evaluated: usize,
}

/// `(mu + lambda)` search. Records already in `history` count towards the
/// budget and seed the Tabu set, the population and the incumbent, so a
/// search can resume from its log. Offspring are drawn serially, evaluated on
/// up to `jobs` threads and appended in id order, so the result does not
/// depend on `jobs` as long as the evaluator is deterministic.
pub fn run_search(
    space: &SearchSpace,
    cfg: &EsConfig,
    evaluator: &dyn Evaluator,
    history: &mut History,
    jobs: usize,
) -> Result<SearchOutcome> {
    space.validate()?;
    cfg.validate()?;
    for r in history.records() {
        if r.point.len() != space.dim() {
            return Err(Error::Search(format!(
                "history record {} has {} coordinates, the space has {}",
                r.id,
                r.point.len(),
                space.dim()
            )));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Search(e.to_string()))?;
    let start_len = history.len();

    while history.len() < cfg.max_evaluations {
        let generation = history.records().last().map_or(0, |r| {
            if r.generation == 0 && history.len() < cfg.initial_population {
                0
            } else {
                r.generation + 1
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(generation as u64);
        let mut tabu: Vec<Vec<f64>> = history.records().iter().map(|r| r.point.clone()).collect();
        let next_id = history.len();
        let mut batch = Vec::new();

        let (sigma, warm_from, budget) = if generation == 0 {
            let n = cfg.initial_population - history.len();
            for k in 0..n {
                let point = sample_uniform(space, cfg, &tabu, &mut rng)?;
                tabu.push(point.clone());
                batch.push(Pending {
                    id: next_id + k,
                    values: space.denormalize(&point)?,
                    point,
                    parents: Vec::new(),
                });
            }
            (cfg.sigma, None, Budget::Full)
        } else {
            let sigma = next_sigma(cfg, history);
            let grad = estimate_gradient(space, history);
            let pop = select_population(history, cfg.initial_population);
            let incumbent = history.best().map(|r| r.id);
            let n = cfg.offspring.min(cfg.max_evaluations - history.len());
            let k = cfg.parents.min(pop.len());
            for j in 0..n {
                let picks = sample(&mut rng, pop.len(), k).into_vec();
                let parents: Vec<&[f64]> = picks.iter().map(|&i| pop[i].point.as_slice()).collect();
                let point = mutate(space, &parents, &grad, cfg, sigma, &tabu, &mut rng)?;
                tabu.push(point.clone());
                batch.push(Pending {
                    id: next_id + j,
                    values: space.denormalize(&point)?,
                    point,
                    parents: picks.iter().map(|&i| pop[i].id).collect(),
                });
            }
            (sigma, incumbent, Budget::Warm)
        };

        let epochs = match budget {
            Budget::Full => cfg.full_budget(),
            Budget::Warm => cfg.warm_budget(),
        };
        let run = |p: &Pending| {
            let t0 = Instant::now();
            let req = EvalRequest {
                id: p.id,
                point: &p.point,
                values: &p.values,
                warm_from,
                budget,
                epochs,
            };
            let res = evaluator.evaluate(&req).and_then(|o| {
                if (0.0..=1.0).contains(&o.fitness) {
                    Ok(o)
                } else {
                    Err(Error::Search(format!("fitness {} outside [0, 1]", o.fitness)))
                }
            });
            (res, t0.elapsed().as_secs_f64())
        };
        let results: Vec<_> = if jobs > 1 {
            pool.install(|| batch.par_iter().map(run).collect())
        } else {
            batch.iter().map(run).collect()
        };

        for (p, (res, wall)) in batch.into_iter().zip(results) {
            let (fitness, metrics, error) = match res {
                Ok(o) => (o.fitness, o.metrics, None),
                Err(e) => {
                    log::warn!("candidate {} failed, recording fitness 0: {e}", p.id);
                    (0.0, None, Some(e.to_string()))
                }
            };
            log::info!("candidate {} (generation {generation}) fitness {fitness:.4}", p.id);
            history.append(RunRecord {
                id: p.id,
                generation,
                point: p.point,
                values: p.values,
                fitness,
                parents: p.parents,
                warm_from,
                budget,
                epochs,
                sigma,
                metrics,
                error,
                wall_secs: wall,
                timestamp: now_secs(),
            })?;
        }
    }

    let best = history
        .best()
        .cloned()
        .ok_or_else(|| Error::Search("no evaluations".into()))?;
    Ok(SearchOutcome {
        best,
        history: history.records().to_vec(),
        evaluated: history.len() - start_len,
    })
}

fn sample_uniform(space: &SearchSpace, cfg: &EsConfig, tabu: &[Vec<f64>], rng: &mut impl Rng) -> Result<Vec<f64>> {
    for _ in 0..TABU_DRAWS {
        let p: Vec<f64> = space
            .variables
            .iter()
            .map(|v| match v.n_categories() {
                Some(n) => rng.random_range(0..n) as f64,
                None => rng.random_range(0.0..=1.0),
            })
            .collect();
        if passes_tabu(space, &p, tabu, cfg.tabu_threshold) {
            return Ok(p);
        }
    }
    Err(Error::Search("could not place an initial candidate outside the Tabu set".into()))
}
