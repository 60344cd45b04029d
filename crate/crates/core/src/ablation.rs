//! Named training configurations run over shared seed triples.

use std::collections::HashSet;
use std::fmt::Write as _;

use log::{info, warn};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::train::{run_seminar_cached, StageCache, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTriple {
    pub ancillary: u64,
    pub primary: u64,
    pub augment: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub configs: Vec<(String, TrainConfig)>,
    pub seeds: Vec<SeedTriple>,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() {
            return Err(Error::Config("ablation grid has no configurations".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation grid needs at least one seed triple".into()));
        }
        let mut names = HashSet::new();
        for (name, _) in &self.configs {
            if name.is_empty() || name.contains([',', '"', '\n', '/', '\\']) {
                return Err(Error::Config(format!("invalid configuration name {name:?}")));
            }
            if !names.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate configuration name {name:?}")));
            }
        }
        Ok(())
    }

    fn with_seeds(config: &TrainConfig, s: SeedTriple) -> TrainConfig {
        TrainConfig {
            ancillary_seed: s.ancillary,
            primary_seed: s.primary,
            augment_seed: s.augment,
            ..config.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: String,
    pub seeds: SeedTriple,
    /// Final-model validation mIoU, or the failure message.
    pub outcome: std::result::Result<f64, String>,
    pub log: Option<TrainLog>,
    pub model: Option<crate::net::ParameterVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSummary {
    pub config: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub stddev: f64,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<RunRecord>,
}

pub const ABLATION_HEADER: &str = "row,config,ancillary_seed,primary_seed,augment_seed,miou,stddev,status";

impl AblationReport {
    pub fn all_succeeded(&self) -> bool {
        self.runs.iter().all(|r| r.outcome.is_ok())
    }

    /// Per-configuration aggregates in grid order.
    pub fn summaries(&self) -> Vec<ConfigSummary> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !order.contains(&r.config.as_str()) {
                order.push(&r.config);
            }
        }
        order
            .into_iter()
            .map(|name| {
                let runs: Vec<&RunRecord> = self.runs.iter().filter(|r| r.config == name).collect();
                let ok: Vec<f64> = runs.iter().filter_map(|r| r.outcome.as_ref().ok().copied()).collect();
                let mean = if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().sum::<f64>() / ok.len() as f64
                };
                let stddev = if ok.len() < 2 {
                    0.0
                } else {
                    (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ok.len() - 1) as f64).sqrt()
                };
                ConfigSummary {
                    config: name.to_string(),
                    mean,
                    stddev,
                    succeeded: ok.len(),
                    failed: runs.len() - ok.len(),
                }
            })
            .collect()
    }

    pub fn mean(&self, config: &str) -> Option<f64> {
        self.summaries()
            .into_iter()
            .find(|s| s.config == config && s.succeeded > 0)
            .map(|s| s.mean)
    }

    /// One row per run, then one `mean` row per configuration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(ABLATION_HEADER);
        s.push('\n');
        for (i, r) in self.runs.iter().enumerate() {
            let (miou, status) = match &r.outcome {
                Ok(m) => (m.to_string(), "ok".to_string()),
                Err(e) => (String::new(), format!("error: {}", e.replace([',', '\n', '\r'], ";"))),
            };
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{miou},,{status}",
                r.config, r.seeds.ancillary, r.seeds.primary, r.seeds.augment
            );
        }
        for m in self.summaries() {
            let status = if m.failed == 0 {
                "ok".to_string()
            } else {
                format!("{} of {} failed", m.failed, m.failed + m.succeeded)
            };
            let mean = if m.succeeded > 0 { m.mean.to_string() } else { String::new() };
            let _ = writeln!(s, "mean,{},,,,{mean},{},{status}", m.config, m.stddev);
        }
        s
    }
}

fn run_one_seed(grid: &AblationGrid, seeds: SeedTriple, train: &Dataset, val: &Dataset) -> Vec<RunRecord> {
    let mut cache = StageCache::default();
    grid.configs
        .iter()
        .map(|(name, base)| {
            let config = AblationGrid::with_seeds(base, seeds);
            let result = run_seminar_cached(&config, train, Some(val), &mut cache).and_then(|out| {
                let miou = evaluate(out.model(), val)?.mean_iou();
                Ok((miou, out))
            });
            match result {
                Ok((miou, out)) => {
                    info!("{name} {seeds:?}: mIoU {miou:.4}");
                    RunRecord {
                        config: name.clone(),
                        seeds,
                        outcome: Ok(miou),
                        model: Some(out.model().clone()),
                        log: Some(out.log),
                    }
                }
                Err(e) => {
                    warn!("{name} {seeds:?} failed: {e}");
                    RunRecord {
                        config: name.clone(),
                        seeds,
                        outcome: Err(e.to_string()),
                        log: None,
                        model: None,
                    }
                }
            }
        })
        .collect()
}

/// Runs every configuration for every seed triple and scores the final model
/// on `val`. Stages shared between configurations of the same seed triple are
/// trained once. Seed triples are spread over `jobs` threads; the report is
/// identical for any `jobs`. Failed runs are recorded and the grid continues.
pub fn run_ablation(grid: &AblationGrid, train: &Dataset, val: &Dataset, jobs: usize) -> Result<AblationReport> {
    grid.validate()?;
    if val.is_empty() {
        return Err(Error::InvalidInput("ablation needs a non-empty validation set".into()));
    }
    let jobs = jobs.clamp(1, grid.seeds.len());
    let mut per_seed: Vec<Vec<RunRecord>> = Vec::with_capacity(grid.seeds.len());
    if jobs == 1 {
        for &s in &grid.seeds {
            per_seed.push(run_one_seed(grid, s, train, val));
        }
    } else {
        let chunks: Vec<Vec<(usize, SeedTriple)>> = (0..jobs)
            .map(|j| grid.seeds.iter().copied().enumerate().skip(j).step_by(jobs).collect())
            .collect();
        let mut slots: Vec<Option<Vec<RunRecord>>> = vec![None; grid.seeds.len()];
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|(i, s)| (i, run_one_seed(grid, s, train, val)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, runs) in h.join().expect("ablation worker panicked") {
                    slots[i] = Some(runs);
                }
            }
        });
        per_seed = slots.into_iter().map(|s| s.expect("every seed ran")).collect();
    }
    // config-major row order
    let mut runs = Vec::with_capacity(grid.configs.len() * grid.seeds.len());
    for c in 0..grid.configs.len() {
        for seed_runs in &per_seed {
            runs.push(seed_runs[c].clone());
        }
    }
    Ok(AblationReport { runs })
}
