//! The attacker's manipulation planner.
//!
//! A plan fixes relaxed attack counts `z_t` for every step of the horizon.
//! Simulating a plan replays the defender loop: the equilibrium strategy at
//! the first step, then learn-then-patrol on the growing history. The
//! attacker optimizes the accumulated utility `F = Σ_t Σ_n z_{t,n} U^a_n(x_{t,n})`
//! by projected gradient ascent, differentiating through its own model of
//! the defender's computation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::{History, ModelKind, ParamSpace, ParamVector};
use crate::defender::{
    learn_theta, learn_theta_replay, mean_loss, patrol_alt, patrol_pgd_replay, patrol_pgd_with_grad, LearnOutcome,
    LearningTrace, PGDConfig, PatrolOutcome, PatrolSolver, SolveSchedule,
};
use crate::diffopt::{project_capped_simplex, projection_jacobian};
use crate::error::{Error, Result};
use crate::game::{solve_sse, GameInstance};
use crate::seeds::{self, Stream};

/// Slack allowed on a plan row's attack budget.
pub const PLAN_TOL: f64 = 1e-8;

/// Relaxed attack counts, one row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPlan {
    z: DMatrix<f64>,
}

impl AttackPlan {
    /// Validates `z ≥ 0` and row sums `≤ max_attacks`.
    pub fn new(z: DMatrix<f64>, max_attacks: usize) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("attack counts must be finite and non-negative".into()));
        }
        for (t, row) in z.row_iter().enumerate() {
            if row.sum() > max_attacks as f64 + PLAN_TOL {
                return Err(Error::Parameter(format!(
                    "step {t} uses {} attacks, more than the cap {max_attacks}",
                    row.sum()
                )));
            }
        }
        Ok(AttackPlan { z })
    }

    pub fn zeros(horizon: usize, n_targets: usize) -> Self {
        AttackPlan {
            z: DMatrix::zeros(horizon, n_targets),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], max_attacks: usize) -> Result<Self> {
        let n = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::dim("plan row", n, bad.len()));
        }
        AttackPlan::new(DMatrix::from_fn(rows.len(), n, |t, i| rows[t][i]), max_attacks)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.z.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn horizon(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_targets(&self) -> usize {
        self.z.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn step(&self, t: usize) -> DVector<f64> {
        self.z.row(t).transpose()
    }

    fn steps(&self) -> Vec<DVector<f64>> {
        (0..self.horizon()).map(|t| self.step(t)).collect()
    }

    /// Unvalidated plan, used for finite-difference probes.
    pub(crate) fn raw(z: DMatrix<f64>) -> Self {
        AttackPlan { z }
    }
}

impl Serialize for AttackPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AttackPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("ragged attack plan"));
        }
        let z = DMatrix::from_fn(rows.len(), n, |t, i| rows[t][i]);
        if z.iter().any(|v| *v < 0.0) {
            return Err(serde::de::Error::custom("negative attack count"));
        }
        Ok(AttackPlan { z })
    }
}

/// How the defender learns and patrols.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenderSetup {
    pub model: ModelKind,
    pub solver: PatrolSolver,
    pub space: ParamSpace,
}

impl DefenderSetup {
    pub fn new(model: ModelKind, solver: PatrolSolver) -> Self {
        DefenderSetup {
            model,
            solver,
            space: ParamSpace::default_for(model),
        }
    }

    /// The attacker's picture of a defender: its assumed model and the
    /// projected-gradient computation.
    pub fn assumed(model: ModelKind) -> Self {
        DefenderSetup::new(model, PatrolSolver::Pgd)
    }
}

/// Inner-solver settings of one simulated horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub learn: PGDConfig,
    pub patrol: PGDConfig,
    /// Base seed; every inner seed derives from it and the step index.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            learn: PGDConfig::learn_default(),
            patrol: PGDConfig::patrol_default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    fn learn_at(&self, t: usize) -> PGDConfig {
        self.learn
            .with_seed(seeds::derive(self.seed, Stream::Step, 2 * t as u64))
    }

    fn patrol_at(&self, t: usize) -> PGDConfig {
        self.patrol
            .with_seed(seeds::derive(self.seed, Stream::Step, 2 * t as u64 + 1))
    }
}

/// Gradient blocks of one step `t ≥ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrads {
    /// `dx_t/dθ_t`, `N × m`.
    pub dx_dtheta: DMatrix<f64>,
    /// `dθ_t/dz_{t'}` for `t' < t`, each `m × N`.
    pub dtheta_dz: Vec<DMatrix<f64>>,
}

/// Frozen control flow of one simulated step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub learn: SolveSchedule,
    pub patrol: SolveSchedule,
}

/// Everything observed along one simulated horizon.
///
/// Steps are 0-based here; step 0 uses the equilibrium strategy and has no
/// learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub strategies: Vec<DVector<f64>>,
    pub params: Vec<Option<ParamVector>>,
    pub att_utilities: Vec<f64>,
    pub def_utilities: Vec<f64>,
    pub total_utility: f64,
    pub schedules: Vec<Option<StepSchedule>>,
    /// Present when simulated with gradients; entry 0 is empty.
    pub grads: Option<Vec<StepGrads>>,
    /// Fingerprint of every active set met by the inner projections.
    pub fingerprint: u64,
    pub degenerate: bool,
    pub converged: bool,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.strategies.len()
    }

    pub fn att_per_step(&self) -> f64 {
        self.total_utility / self.horizon() as f64
    }

    pub fn def_per_step(&self) -> f64 {
        self.def_utilities.iter().sum::<f64>() / self.horizon() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TrajectoryDocument {
            strategies: self.strategies.iter().map(|x| x.iter().copied().collect()).collect(),
            params: self.params.iter().map(|p| p.as_ref().map(|p| p.theta.clone())).collect(),
            att_utilities: self.att_utilities.clone(),
            def_utilities: self.def_utilities.clone(),
            total_utility: self.total_utility,
            schedules: self.schedules.clone(),
            degenerate: self.degenerate,
            converged: self.converged,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Parameter(e.to_string()))
    }
}

#[derive(Serialize)]
struct TrajectoryDocument {
    strategies: Vec<Vec<f64>>,
    params: Vec<Option<Vec<f64>>>,
    att_utilities: Vec<f64>,
    def_utilities: Vec<f64>,
    total_utility: f64,
    schedules: Vec<Option<StepSchedule>>,
    degenerate: bool,
    converged: bool,
}

fn step_utilities(game: &GameInstance, x: &DVector<f64>, z: &DVector<f64>) -> (f64, f64) {
    let att = z.dot(&game.att_utilities(x));
    let def = z.dot(&game.def_utilities(x));
    (att, def)
}

/// Runs the defender loop under `plan` against `defender`.
///
/// With `with_grads`, also builds `dx_t/dθ_t` and every `dθ_t/dz_{t'}`;
/// this needs the projected-gradient patrol solver. Pass the attacker's
/// assumed setup to get the attacker's believed trajectory.
pub fn simulate_horizon(
    game: &GameInstance,
    plan: &AttackPlan,
    defender: &DefenderSetup,
    cfg: &SimConfig,
    with_grads: bool,
) -> Result<Trajectory> {
    if plan.n_targets() != game.n_targets() {
        return Err(Error::dim("plan targets", game.n_targets(), plan.n_targets()));
    }
    AttackPlan::new(plan.z.clone(), game.max_attacks())?;
    simulate_inner(game, plan, defender, cfg, with_grads, None)
}

/// Re-simulates with the inner solvers' control flow frozen to `schedules`.
pub fn simulate_replay(
    game: &GameInstance,
    plan: &AttackPlan,
    defender: &DefenderSetup,
    cfg: &SimConfig,
    with_grads: bool,
    schedules: &[Option<StepSchedule>],
) -> Result<Trajectory> {
    if plan.n_targets() != game.n_targets() {
        return Err(Error::dim("plan targets", game.n_targets(), plan.n_targets()));
    }
    if schedules.len() != plan.horizon() {
        return Err(Error::dim("step schedules", plan.horizon(), schedules.len()));
    }
    simulate_inner(game, plan, defender, cfg, with_grads, Some(schedules))
}

pub(crate) fn simulate_inner(
    game: &GameInstance,
    plan: &AttackPlan,
    defender: &DefenderSetup,
    cfg: &SimConfig,
    with_grads: bool,
    replay: Option<&[Option<StepSchedule>]>,
) -> Result<Trajectory> {
    let horizon = plan.horizon();
    if horizon == 0 {
        return Err(Error::Parameter("plan has no steps".into()));
    }
    if defender.space.kind() != defender.model {
        return Err(Error::Parameter("defender parameter space does not match its model".into()));
    }
    if with_grads && defender.solver != PatrolSolver::Pgd {
        return Err(Error::Parameter("gradients need the projected-gradient patrol solver".into()));
    }
    let zs = plan.steps();
    let sse = solve_sse(game).map_err(|e| e.at_step(0))?;
    let mut strategies = vec![sse.strategy.into_vector()];
    let mut params = vec![None];
    let mut schedules = vec![None];
    let mut grads = with_grads.then(|| {
        vec![StepGrads {
            dx_dtheta: DMatrix::zeros(game.n_targets(), defender.model.dim()),
            dtheta_dz: Vec::new(),
        }]
    });
    let mut fingerprint = 0u64;
    let mut degenerate = false;
    let mut converged = true;

    for t in 1..horizon {
        let step = || -> Result<(LearnOutcome, PatrolOutcome)> {
            let history = History::new(&strategies[..t], &zs[..t])?;
            let learn_cfg = cfg.learn_at(t);
            let patrol_cfg = cfg.patrol_at(t);
            let frozen = replay.and_then(|s| s[t]);
            let learned = match frozen {
                Some(s) => learn_theta_replay(&history, game, defender.model, &defender.space, &learn_cfg, None, s.learn)?,
                None => learn_theta(&history, game, defender.model, &defender.space, &learn_cfg)?,
            };
            let patrol = match (defender.solver, frozen) {
                (PatrolSolver::Pgd, Some(s)) => patrol_pgd_replay(game, &learned.theta, &patrol_cfg, s.patrol)?,
                (PatrolSolver::Pgd, None) => patrol_pgd_with_grad(game, &learned.theta, &patrol_cfg)?,
                (PatrolSolver::InteriorAlt, _) => patrol_alt(game, &learned.theta, &patrol_cfg)?,
            };
            Ok((learned, patrol))
        };
        let (learned, patrol) = step().map_err(|e| e.at_step(t))?;

        if let Some(g) = grads.as_mut() {
            let history = History::new(&strategies[..t], &zs[..t])?;
            let dtheta_dz = grad_theta_wrt_z(&learned.trace, &history, game, defender.model, &defender.space, g)
                .map_err(|e| e.at_step(t))?;
            g.push(StepGrads {
                dx_dtheta: patrol.dx_dtheta.clone(),
                dtheta_dz,
            });
        }
        fingerprint = mix(mix(fingerprint, learned.fingerprint), patrol.fingerprint);
        degenerate |= learned.degenerate || patrol.degenerate;
        converged &= learned.converged && patrol.converged;
        schedules.push(Some(StepSchedule {
            learn: learned.schedule,
            patrol: patrol.schedule,
        }));
        params.push(Some(learned.theta));
        strategies.push(patrol.x.into_vector());
    }

    let (att_utilities, def_utilities): (Vec<f64>, Vec<f64>) =
        strategies.iter().zip(&zs).map(|(x, z)| step_utilities(game, x, z)).unzip();
    let total_utility = att_utilities.iter().sum();
    Ok(Trajectory {
        strategies,
        params,
        att_utilities,
        def_utilities,
        total_utility,
        schedules,
        grads,
        fingerprint,
        degenerate,
        converged,
    })
}

fn mix(a: u64, b: u64) -> u64 {
    seeds::derive(a, Stream::Step, b)
}

/// `dx_s/dz_{t'}` for an earlier step `s > t'`; zero for the first step.
fn dx_dz(prior: &[StepGrads], s: usize, t_prime: usize) -> Option<DMatrix<f64>> {
    (s > t_prime && s >= 1).then(|| &prior[s].dx_dtheta * &prior[s].dtheta_dz[t_prime])
}

/// Differentiates the learned parameters of step `t = history.len()` with
/// respect to every earlier attack vector by replaying the learning trace.
///
/// `prior` holds the gradient blocks of steps `0..t`. Each inner iterate
/// composes the gradient step with the Jacobian of the projection onto the
/// parameter space; the history's strategies themselves depend on earlier
/// attacks through `dx_s/dθ_s · dθ_s/dz_{t'}`.
pub fn grad_theta_wrt_z(
    trace: &LearningTrace,
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    space: &ParamSpace,
    prior: &[StepGrads],
) -> Result<Vec<DMatrix<f64>>> {
    let t = history.len();
    let m = kind.dim();
    let n = game.n_targets();
    if trace.iterates.is_empty() || trace.projections.len() + 1 != trace.iterates.len() {
        return Err(Error::MissingGradients);
    }
    if prior.len() < t {
        return Err(Error::MissingGradients);
    }
    let coupling: Vec<Vec<Option<DMatrix<f64>>>> = (0..t)
        .map(|tp| (0..t).map(|s| dx_dz(prior, s, tp)).collect())
        .collect();

    let alpha = trace.step_alpha;
    let mut d: Vec<DMatrix<f64>> = vec![DMatrix::zeros(m, n); t];
    for (i, proj) in trace.projections.iter().enumerate() {
        let theta = ParamVector::from_vector(kind, &trace.iterates[i])?;
        let (_, _, blocks) = mean_loss(history, game, kind, &theta, true)?;
        let blocks = blocks.ok_or(Error::MissingGradients)?;
        let jac = projection_jacobian(proj, space.polytope());
        for tp in 0..t {
            let mut inner = &blocks.z[tp] + &blocks.theta * &d[tp];
            for s in tp + 1..t {
                if let Some(c) = &coupling[tp][s] {
                    inner += &blocks.x[s] * c;
                }
            }
            d[tp] = &jac.matrix * (&d[tp] - inner * alpha);
        }
    }
    Ok(d)
}

/// `dF/dz`, `T × N`.
///
/// `dF/dz_{t',n'} = U^a_{n'}(x_{t',n'}) + Σ_{t>t'} Σ_n z_{t,n} (P^a_n − R^a_n) [dx_t/dz_{t'}]_{n,n'}`.
pub fn total_gradient(traj: &Trajectory, game: &GameInstance, plan: &AttackPlan) -> Result<DMatrix<f64>> {
    let grads = traj.grads.as_ref().ok_or(Error::MissingGradients)?;
    let horizon = plan.horizon();
    let n = game.n_targets();
    if traj.horizon() != horizon || grads.len() != horizon {
        return Err(Error::dim("trajectory steps", horizon, traj.horizon()));
    }
    let slopes = DVector::from_fn(n, |i, _| game.att_slope(i));
    let mut out = DMatrix::zeros(horizon, n);
    for tp in 0..horizon {
        let mut row = game.att_utilities(&traj.strategies[tp]);
        for t in tp + 1..horizon {
            let weights = plan.step(t).component_mul(&slopes);
            let dx = &grads[t].dx_dtheta * &grads[t].dtheta_dz[tp];
            row += dx.transpose() * weights;
        }
        out.set_row(tp, &row.transpose());
    }
    Ok(out)
}

/// Outer projected-gradient-ascent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub sim: SimConfig,
    /// Attacks moved per unit of gradient.
    pub outer_alpha: f64,
    pub outer_max_iters: usize,
    /// Stop once an accepted step gains at most this much `F`.
    pub outer_tol: f64,
    pub max_halvings: usize,
    pub n_outer_restarts: usize,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            sim: SimConfig::default(),
            outer_alpha: 0.5,
            outer_max_iters: 100,
            outer_tol: 1e-4,
            max_halvings: 20,
            n_outer_restarts: 5,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.learn.validate()?;
        self.sim.patrol.validate()?;
        if !(self.outer_alpha > 0.0) || self.n_outer_restarts == 0 || self.outer_tol < 0.0 {
            return Err(Error::Parameter(format!("invalid planner configuration {self:?}")));
        }
        Ok(())
    }
}

/// One restart of the outer ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentRun {
    pub restart: usize,
    pub plan: AttackPlan,
    pub trajectory: Trajectory,
    /// `F` after each accepted iterate, starting with the initial plan.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Outcome of planning against one defender.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// Best relaxed plan over restarts.
    pub plan: AttackPlan,
    /// The attacker's believed trajectory under the relaxed plan.
    pub believed: Trajectory,
    /// Integer plan actually played.
    pub rounded: AttackPlan,
    /// The actual defender's trajectory under the rounded plan.
    pub actual: Trajectory,
    pub runs: Vec<AscentRun>,
    pub best_restart: usize,
}

/// Plan putting all attacks on the attacker's best response at each step,
/// given the strategies the assumed defender plays in response to it.
pub fn myopic_plan(game: &GameInstance, defender: &DefenderSetup, cfg: &SimConfig) -> Result<AttackPlan> {
    let horizon = game.horizon();
    let n = game.n_targets();
    let k = game.max_attacks() as f64;
    let mut z = DMatrix::zeros(horizon, n);
    for t in 0..horizon {
        let prefix = AttackPlan::raw(z.rows(0, t + 1).into_owned());
        let traj = simulate_inner(game, &prefix, defender, cfg, false, None)?;
        let u = game.att_utilities(&traj.strategies[t]);
        z[(t, argmax(&u))] = k;
    }
    Ok(AttackPlan { z })
}

fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn project_rows(z: &DMatrix<f64>, cap: f64) -> DMatrix<f64> {
    let mut out = z.clone();
    for t in 0..z.nrows() {
        let row = project_capped_simplex(&z.row(t).transpose(), cap);
        out.set_row(t, &row.transpose());
    }
    out
}

/// Uniform draws in `[0, K]` projected row-wise onto the capped simplex.
pub fn random_plan<R: Rng>(horizon: usize, n_targets: usize, max_attacks: usize, rng: &mut R) -> AttackPlan {
    let k = max_attacks as f64;
    let raw = DMatrix::from_fn(horizon, n_targets, |_, _| rng.gen_range(0.0..=k));
    AttackPlan {
        z: project_rows(&raw, k),
    }
}

/// Projected gradient ascent on the believed `F` from `start`.
///
/// Each iteration tries twice the last accepted step (first `outer_alpha`,
/// at most `1024·outer_alpha`) and halves it up to `max_halvings` times
/// until `F` rises; the run stops when no halving helps or the gain drops
/// to `outer_tol`.
pub fn ascend(
    game: &GameInstance,
    assumed: &DefenderSetup,
    cfg: &PlannerConfig,
    start: AttackPlan,
    restart: usize,
) -> Result<AscentRun> {
    let cap = game.max_attacks() as f64;
    let mut plan = start;
    let mut traj = simulate_inner(game, &plan, assumed, &cfg.sim, true, None)?;
    let mut history = vec![traj.total_utility];
    let mut converged = false;
    let max_step = cfg.outer_alpha * 1024.0;
    let mut trial = cfg.outer_alpha;
    for _ in 0..cfg.outer_max_iters {
        let grad = total_gradient(&traj, game, &plan)?;
        let mut step = trial;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let cand = AttackPlan {
                z: project_rows(&(&plan.z + &grad * step), cap),
            };
            if cand.z != plan.z {
                let ct = simulate_inner(game, &cand, assumed, &cfg.sim, true, None)?;
                if ct.total_utility > traj.total_utility {
                    accepted = Some((cand, ct));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, ct)) = accepted else {
            converged = true;
            break;
        };
        trial = (2.0 * step).min(max_step);
        let gain = ct.total_utility - traj.total_utility;
        plan = cand;
        traj = ct;
        history.push(traj.total_utility);
        if gain <= cfg.outer_tol {
            converged = true;
            break;
        }
    }
    Ok(AscentRun {
        restart,
        plan,
        trajectory: traj,
        history,
        converged,
    })
}

/// Plans manipulative attacks assuming `attacker_model`, then plays the
/// rounded plan against the actual `defender`.
///
/// Restart 0 starts from the myopic plan; the others from random feasible
/// plans. The restart with the highest believed `F` wins, lowest index on
/// ties.
pub fn optimize_plan(
    game: &GameInstance,
    attacker_model: ModelKind,
    defender: &DefenderSetup,
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    cfg.validate()?;
    let assumed = DefenderSetup::assumed(attacker_model);
    let horizon = game.horizon();
    let n = game.n_targets();

    let starts: Vec<AttackPlan> = (0..cfg.n_outer_restarts)
        .map(|r| {
            if r == 0 {
                myopic_plan(game, &assumed, &cfg.sim)
            } else {
                let mut rng = seeds::rng(seeds::derive(cfg.seed, Stream::Outer, r as u64));
                Ok(random_plan(horizon, n, game.max_attacks(), &mut rng))
            }
        })
        .collect::<Result<_>>()?;
    let runs: Vec<AscentRun> = starts
        .into_par_iter()
        .enumerate()
        .map(|(r, start)| ascend(game, &assumed, cfg, start, r))
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.trajectory.total_utility > runs[best].trajectory.total_utility {
            best = i;
        }
    }
    let plan = runs[best].plan.clone();
    let believed = runs[best].trajectory.clone();
    let rounded = round_plan(&plan, game.max_attacks());
    let actual = simulate_inner(game, &rounded, defender, &cfg.sim, false, None)?;
    Ok(PlanResult {
        plan,
        believed,
        rounded,
        actual,
        runs,
        best_restart: best,
    })
}

/// Rounds each row to integers summing to `min(⌊Σz⌋, K)`.
///
/// Entries are floored and the remaining units go to the largest fractional
/// parts, lowest index first on ties.
pub fn round_plan(plan: &AttackPlan, max_attacks: usize) -> AttackPlan {
    let mut out = plan.z.clone();
    for t in 0..plan.horizon() {
        let row = plan.z.row(t);
        let target = ((row.sum() + 1e-9).floor() as usize).min(max_attacks);
        let floors: Vec<f64> = row.iter().map(|v| v.floor()).collect();
        let base = floors.iter().sum::<f64>() as usize;
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = row[a] - floors[a];
            let fb = row[b] - floors[b];
            fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut values = floors;
        if target >= base {
            for &i in order.iter().take(target - base) {
                values[i] += 1.0;
            }
        } else {
            // Floors alone exceed the cap: drop units from the smallest fractions.
            let mut excess = base - target;
            for &i in order.iter().rev() {
                while excess > 0 && values[i] > 0.0 {
                    values[i] -= 1.0;
                    excess -= 1;
                }
            }
        }
        for (i, v) in values.into_iter().enumerate() {
            out[(t, i)] = v;
        }
    }
    AttackPlan { z: out }
}

/// Both players repeat the equilibrium: the defender plays the SSE
/// strategy every step and the attacker puts all `K` attacks on the SSE
/// target.
pub fn nonmanipulative_baseline(game: &GameInstance, horizon: usize) -> Result<(AttackPlan, Trajectory)> {
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be positive".into()));
    }
    let sse = solve_sse(game)?;
    let n = game.n_targets();
    let k = game.max_attacks() as f64;
    let mut z = DMatrix::zeros(horizon, n);
    z.column_mut(sse.target).fill(k);
    let x = sse.strategy.into_vector();
    let zt = DVector::from_fn(n, |i, _| if i == sse.target { k } else { 0.0 });
    let (att, def) = step_utilities(game, &x, &zt);
    let traj = Trajectory {
        strategies: vec![x; horizon],
        params: vec![None; horizon],
        att_utilities: vec![att; horizon],
        def_utilities: vec![def; horizon],
        total_utility: att * horizon as f64,
        schedules: vec![None; horizon],
        grads: None,
        fingerprint: 0,
        degenerate: false,
        converged: true,
    };
    Ok((AttackPlan { z }, traj))
}
