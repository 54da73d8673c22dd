use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ssg_core::attacker::{nonmanipulative_baseline, optimize_plan, DefenderSetup, PlannerConfig};
use ssg_core::defender::PatrolSolver;
use ssg_core::game::{generate_covariance_game, GameInstance};
use ssg_core::seeds::{self, Stream};

use crate::scenario::ScenarioSpec;

/// Environment variable bounding the worker pool.
pub const WORKERS_ENV: &str = "SSG_WORKERS";

/// A batch of games crossed with the scenario matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target_counts: Vec<usize>,
    pub horizons: Vec<usize>,
    pub covariance_values: Vec<f64>,
    pub games_per_r: usize,
    pub max_attacks: usize,
    /// Defender resources as a fraction of the target count, rounded up.
    pub resource_ratio: f64,
    pub base_seed: u64,
    pub scenarios: Vec<ScenarioSpec>,
    /// Patrol solver of the actual defender in the manipulation scenarios.
    pub defender_solver: PatrolSolver,
    pub planner: PlannerConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            target_counts: vec![4, 8, 12],
            horizons: vec![2, 4],
            covariance_values: vec![-1.0, -0.5, 0.0],
            games_per_r: 3,
            max_attacks: 50,
            resource_ratio: 0.5,
            base_seed: 0,
            scenarios: ScenarioSpec::all(),
            defender_solver: PatrolSolver::InteriorAlt,
            planner: PlannerConfig::default(),
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.target_counts.is_empty()
            || self.horizons.is_empty()
            || self.covariance_values.is_empty()
            || self.scenarios.is_empty()
        {
            bail!("target_counts, horizons, covariance_values and scenarios must be non-empty");
        }
        if self.games_per_r == 0 {
            bail!("games_per_r must be positive");
        }
        if let Some(r) = self.covariance_values.iter().find(|r| !(-1.0..=0.0).contains(*r)) {
            bail!("covariance value {r} outside [-1, 0]");
        }
        if self.target_counts.contains(&0) || self.horizons.contains(&0) {
            bail!("target counts and horizons must be positive");
        }
        if !(self.resource_ratio > 0.0 && self.resource_ratio <= 1.0) {
            bail!("resource_ratio {} outside (0, 1]", self.resource_ratio);
        }
        self.planner.validate()?;
        Ok(())
    }

    /// Seed of the `index`-th game drawn for `(n, r)`. Shared by every
    /// horizon and scenario so comparisons across them are paired.
    pub fn game_seed(&self, n_targets: usize, r_index: usize, index: usize) -> u64 {
        let s = seeds::derive(self.base_seed, Stream::Game, n_targets as u64);
        let s = seeds::derive(s, Stream::Game, r_index as u64);
        seeds::derive(s, Stream::Game, index as u64)
    }

    /// Every run in enumeration order: N, T, r, game, scenario.
    pub fn jobs(&self) -> Vec<Job> {
        let mut out = Vec::new();
        for &n in &self.target_counts {
            for &t in &self.horizons {
                for (ri, &r) in self.covariance_values.iter().enumerate() {
                    for g in 0..self.games_per_r {
                        for s in &self.scenarios {
                            out.push(Job {
                                n_targets: n,
                                horizon: t,
                                covariance_r: r,
                                seed: self.game_seed(n, ri, g),
                                scenario: s.clone(),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub n_targets: usize,
    pub horizon: usize,
    pub covariance_r: f64,
    pub seed: u64,
    pub scenario: ScenarioSpec,
}

impl Job {
    pub fn game(&self, cfg: &ExperimentConfig) -> anyhow::Result<GameInstance> {
        Ok(generate_covariance_game(self.n_targets, self.covariance_r, self.seed, cfg.resource_ratio)?
            .with_horizon(self.horizon)?
            .with_max_attacks(cfg.max_attacks))
    }
}

/// One row of the run-level CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n_targets: usize,
    pub horizon: usize,
    pub covariance_r: f64,
    pub seed: u64,
    pub scenario: String,
    pub att_util_per_step: f64,
    pub def_util_per_step: f64,
    pub runtime_sec: f64,
    pub converged: bool,
    /// Empty unless the run failed.
    pub error: String,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

struct Outcome {
    att: f64,
    def: f64,
    converged: bool,
}

fn execute(job: &Job, cfg: &ExperimentConfig) -> anyhow::Result<Outcome> {
    let game = job.game(cfg)?;
    match (job.scenario.attacker_assumed, job.scenario.defender_actual) {
        (Some(assumed), Some(actual)) => {
            let planner = PlannerConfig {
                seed: job.seed,
                sim: ssg_core::attacker::SimConfig { seed: job.seed, ..cfg.planner.sim },
                ..cfg.planner
            };
            let setup = DefenderSetup::new(actual, cfg.defender_solver);
            let res = optimize_plan(&game, assumed, &setup, &planner)?;
            let converged = res.actual.converged && res.runs.iter().all(|r| r.converged);
            Ok(Outcome {
                att: res.actual.att_per_step(),
                def: res.actual.def_per_step(),
                converged,
            })
        }
        _ => {
            let (_, traj) = nonmanipulative_baseline(&game, job.horizon)?;
            Ok(Outcome {
                att: traj.att_per_step(),
                def: traj.def_per_step(),
                converged: traj.converged,
            })
        }
    }
}

/// Runs one job, turning errors and panics into a tagged row.
pub fn run_job(job: &Job, cfg: &ExperimentConfig) -> RunRecord {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(|| execute(job, cfg)));
    let runtime_sec = start.elapsed().as_secs_f64();
    let mut rec = RunRecord {
        n_targets: job.n_targets,
        horizon: job.horizon,
        covariance_r: job.covariance_r,
        seed: job.seed,
        scenario: job.scenario.label.clone(),
        att_util_per_step: f64::NAN,
        def_util_per_step: f64::NAN,
        runtime_sec,
        converged: false,
        error: String::new(),
    };
    match result {
        Ok(Ok(o)) => {
            rec.att_util_per_step = o.att;
            rec.def_util_per_step = o.def;
            rec.converged = o.converged;
        }
        Ok(Err(e)) => rec.error = format!("{e:#}"),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            rec.error = format!("panic: {msg}");
        }
    }
    rec
}

/// Worker count from `SSG_WORKERS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run-level results in enumeration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub records: Vec<RunRecord>,
}

impl ResultsTable {
    pub fn n_failed(&self) -> usize {
        self.records.iter().filter(|r| r.failed()).count()
    }
}

/// Runs every job of the batch on a bounded pool. Rows come back in
/// enumeration order whatever order the workers finish in.
pub fn run_matrix(cfg: &ExperimentConfig) -> anyhow::Result<ResultsTable> {
    cfg.validate()?;
    let jobs = cfg.jobs();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .context("building worker pool")?;
    let records = pool.install(|| jobs.par_iter().map(|j| run_job(j, cfg)).collect());
    Ok(ResultsTable { records })
}
