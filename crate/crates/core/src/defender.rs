//! The defender's learn-then-patrol step.
//!
//! Learning fits `θ` by projected gradient descent on the per-attack mean
//! negative log-likelihood and records every iterate so the attacker can
//! differentiate through it later. Patrolling maximizes
//! `U^d(x, θ) = Σ_n q_n(x, θ) U^d_n(x_n)` by projected gradient ascent while
//! carrying `dx/dθ` forward through each step and projection. A log-barrier
//! interior-point solver is available as a non-differentiated alternative.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{evaluate_loss, softmax, History, LossBlocks, ModelKind, ParamSpace, ParamVector, ScoreField};
use crate::diffopt::{project_polytope, projection_jacobian, Polytope, ProjectionResult};
use crate::error::{Error, Result};
use crate::game::{CoverageStrategy, GameInstance};
use crate::seeds::{self, Stream};

/// Step size, restarts and stopping rule of one projected-gradient loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PGDConfig {
    pub step_alpha: f64,
    pub n_rounds: usize,
    pub max_iters: usize,
    /// Stop once the utility gain of an iteration is at most this.
    pub utility_tol: f64,
    /// Stop once the loss decrease of an iteration is at most this.
    pub loss_tol: f64,
    pub seed: u64,
}

impl PGDConfig {
    pub fn patrol_default() -> Self {
        PGDConfig {
            step_alpha: 0.01,
            n_rounds: 5,
            max_iters: 500,
            utility_tol: 1e-7,
            loss_tol: 1e-7,
            seed: 0,
        }
    }

    pub fn learn_default() -> Self {
        PGDConfig {
            step_alpha: 0.05,
            ..PGDConfig::patrol_default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        PGDConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_alpha > 0.0) || self.n_rounds == 0 || self.utility_tol < 0.0 || self.loss_tol < 0.0 {
            return Err(Error::Parameter(format!("invalid PGD configuration {self:?}")));
        }
        Ok(())
    }
}

/// Which restart was kept and how many accepted iterations it ran.
///
/// Replaying a schedule reruns exactly that restart for exactly that many
/// iterations, freezing the solver's control flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveSchedule {
    pub round: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatrolSolver {
    #[serde(rename = "PGD")]
    Pgd,
    #[serde(rename = "InteriorAlt")]
    InteriorAlt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatrolOutcome {
    pub x: CoverageStrategy,
    pub utility: f64,
    /// `dx/dθ`, `N × m`. Zero for the interior-point solver.
    pub dx_dtheta: DMatrix<f64>,
    pub solver_tag: PatrolSolver,
    pub schedule: SolveSchedule,
    /// Fingerprint of the strict active sets met along the kept restart.
    pub fingerprint: u64,
    pub degenerate: bool,
    pub converged: bool,
}

fn check_inputs(game: &GameInstance, x: &DVector<f64>, theta: &ParamVector, kind: ModelKind) -> Result<()> {
    if theta.kind != kind || theta.dim() != kind.dim() {
        return Err(Error::Parameter(format!("{kind} parameters expected")));
    }
    if x.len() != game.n_targets() {
        return Err(Error::dim("coverage vector", game.n_targets(), x.len()));
    }
    Ok(())
}

/// `U^d(x, θ)`.
pub fn defender_utility(game: &GameInstance, x: &DVector<f64>, theta: &ParamVector, kind: ModelKind) -> Result<f64> {
    check_inputs(game, x, theta, kind)?;
    Ok(utility_value(game, kind, x, &theta.theta))
}

fn utility_value(game: &GameInstance, kind: ModelKind, x: &DVector<f64>, theta: &[f64]) -> f64 {
    let field = ScoreField::new(kind, game, x, theta, false);
    softmax(&field.f).dot(&game.def_utilities(x))
}

/// Gradient of `U^d` in `x` and its Jacobian blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityGrad {
    pub utility: f64,
    /// `G = ∂U^d/∂x`.
    pub g: DVector<f64>,
    /// `∂G/∂x`, `N × N`.
    pub j_x: DMatrix<f64>,
    /// `∂G/∂θ`, `N × m`.
    pub j_theta: DMatrix<f64>,
}

pub fn defender_utility_grad(
    game: &GameInstance,
    x: &DVector<f64>,
    theta: &ParamVector,
    kind: ModelKind,
) -> Result<UtilityGrad> {
    check_inputs(game, x, theta, kind)?;
    Ok(utility_grad(game, kind, x, &theta.theta))
}

fn utility_grad(game: &GameInstance, kind: ModelKind, x: &DVector<f64>, theta: &[f64]) -> UtilityGrad {
    let n = game.n_targets();
    let m = kind.dim();
    let field = ScoreField::new(kind, game, x, theta, false);
    let q = softmax(&field.f);
    let u = game.def_utilities(x);
    let ubar = q.dot(&u);
    let a = &field.fx;
    // inner_k = ∂U/∂x_k divided by q_k
    let inner = DVector::from_fn(n, |k, _| game.def_slope(k) + (u[k] - ubar) * a[k]);
    let g = DVector::from_fn(n, |k, _| q[k] * inner[k]);

    let j_x = DMatrix::from_fn(n, n, |k, j| {
        let kd = if k == j { 1.0 } else { 0.0 };
        q[k] * (kd - q[j]) * a[j] * inner[k]
            + q[k] * ((kd * game.def_slope(k) - g[j]) * a[k] + (u[k] - ubar) * kd * field.fxx[k])
    });

    let bbar = field.ft.transpose() * &q;
    let dubar = DVector::from_fn(m, |l, _| (0..n).map(|i| u[i] * q[i] * (field.ft[(i, l)] - bbar[l])).sum::<f64>());
    let j_theta = DMatrix::from_fn(n, m, |k, l| {
        q[k] * (field.ft[(k, l)] - bbar[l]) * inner[k] + q[k] * (-dubar[l] * a[k] + (u[k] - ubar) * field.fxt[(k, l)])
    });

    UtilityGrad {
        utility: ubar,
        g,
        j_x,
        j_theta,
    }
}

enum Stopping {
    Tolerance,
    Exact(usize),
}

struct PatrolRound {
    x: DVector<f64>,
    utility: f64,
    dx: DMatrix<f64>,
    iterations: usize,
    fingerprint: u64,
    degenerate: bool,
    converged: bool,
}

fn random_start(poly: &Polytope, seed: u64) -> Result<DVector<f64>> {
    let mut rng = seeds::rng(seed);
    let raw = DVector::from_fn(poly.dim(), |_, _| rng.gen_range(0.0..1.0));
    Ok(project_polytope(&raw, poly)?.point)
}

fn patrol_round(
    game: &GameInstance,
    kind: ModelKind,
    theta: &[f64],
    cfg: &PGDConfig,
    round: usize,
    stopping: Stopping,
) -> Result<PatrolRound> {
    let poly = game.strategy_space().polytope();
    let n = game.n_targets();
    let m = kind.dim();
    let alpha = cfg.step_alpha;
    let mut x = random_start(poly, seeds::derive(cfg.seed, Stream::Patrol, round as u64))?;
    let mut dx = DMatrix::zeros(n, m);
    let mut utility = utility_value(game, kind, &x, theta);
    let mut fingerprint = 0u64;
    let mut degenerate = false;
    let (limit, exact) = match stopping {
        Stopping::Tolerance => (cfg.max_iters, false),
        Stopping::Exact(k) => (k, true),
    };
    let mut iterations = 0;
    let mut converged = exact;

    for _ in 0..limit {
        let grad = utility_grad(game, kind, &x, theta);
        let raw = &x + &grad.g * alpha;
        // dx^i/dθ = α J_{G,θ} + (α J_{G,x} + I) dx^{i−1,proj}/dθ
        let raw_dx = &grad.j_theta * alpha + (&grad.j_x * alpha) * &dx + &dx;
        let proj = project_polytope(&raw, poly)?;
        let jac = projection_jacobian(&proj, poly);
        let next_utility = utility_value(game, kind, &proj.point, theta);
        if !next_utility.is_finite() {
            return Err(Error::solver("patrol utility became non-finite", f64::NAN));
        }
        let gain = next_utility - utility;
        if !exact && gain < 0.0 {
            converged = true;
            break;
        }
        x = proj.point.clone();
        dx = &jac.matrix * raw_dx;
        utility = next_utility;
        fingerprint = proj.fingerprint(fingerprint);
        degenerate |= jac.degenerate;
        iterations += 1;
        if !exact && gain <= cfg.utility_tol {
            converged = true;
            break;
        }
    }
    Ok(PatrolRound {
        x,
        utility,
        dx,
        iterations,
        fingerprint,
        degenerate,
        converged,
    })
}

fn finish_patrol(game: &GameInstance, best: PatrolRound, round: usize, tag: PatrolSolver) -> Result<PatrolOutcome> {
    let x = CoverageStrategy::new(best.x, game.strategy_space())
        .map_err(|_| Error::solver("patrol returned an infeasible strategy", f64::NAN))?;
    Ok(PatrolOutcome {
        x,
        utility: best.utility,
        dx_dtheta: best.dx,
        solver_tag: tag,
        schedule: SolveSchedule {
            round,
            iterations: best.iterations,
        },
        fingerprint: best.fingerprint,
        degenerate: best.degenerate,
        converged: best.converged,
    })
}

/// Multi-restart projected gradient ascent on `U^d(·, θ)` with the unrolled
/// hypergradient `dx/dθ` of the best restart.
pub fn patrol_pgd_with_grad(game: &GameInstance, theta: &ParamVector, cfg: &PGDConfig) -> Result<PatrolOutcome> {
    cfg.validate()?;
    let kind = theta.kind;
    let mut best: Option<(usize, PatrolRound)> = None;
    let mut all_converged = true;
    for round in 0..cfg.n_rounds {
        let r = match patrol_round(game, kind, &theta.theta, cfg, round, Stopping::Tolerance) {
            Ok(r) => r,
            Err(Error::Solver { .. }) => continue,
            Err(e) => return Err(e),
        };
        all_converged &= r.converged;
        if best.as_ref().is_none_or(|(_, b)| r.utility > b.utility) {
            best = Some((round, r));
        }
    }
    let (round, mut best) = best.ok_or_else(|| Error::solver("all patrol restarts diverged", f64::NAN))?;
    best.converged = all_converged;
    finish_patrol(game, best, round, PatrolSolver::Pgd)
}

/// Reruns one patrol restart for exactly `schedule.iterations` iterations.
pub fn patrol_pgd_replay(
    game: &GameInstance,
    theta: &ParamVector,
    cfg: &PGDConfig,
    schedule: SolveSchedule,
) -> Result<PatrolOutcome> {
    cfg.validate()?;
    let r = patrol_round(
        game,
        theta.kind,
        &theta.theta,
        cfg,
        schedule.round,
        Stopping::Exact(schedule.iterations),
    )?;
    finish_patrol(game, r, schedule.round, PatrolSolver::Pgd)
}

/// Log-barrier interior-point maximizer of `U^d(·, θ)`.
///
/// Newton steps on `U^d(x) + μ Σ_j ln(b − Ax)_j` with the barrier weight cut
/// by 0.2 per outer round; restarts mix the polytope's interior point with
/// random feasible points. Returns `dx/dθ = 0`.
pub fn patrol_alt(game: &GameInstance, theta: &ParamVector, cfg: &PGDConfig) -> Result<PatrolOutcome> {
    cfg.validate()?;
    let kind = theta.kind;
    let poly = game.strategy_space().polytope();
    let n = game.n_targets();
    let Some(center) = poly.interior_point() else {
        // Flat polytope: no barrier exists, fall back to the projected solver.
        let mut out = patrol_pgd_with_grad(game, theta, cfg)?;
        out.dx_dtheta = DMatrix::zeros(n, kind.dim());
        out.solver_tag = PatrolSolver::InteriorAlt;
        return Ok(out);
    };

    let mut best: Option<(usize, DVector<f64>, f64)> = None;
    for round in 0..cfg.n_rounds {
        let start = if round == 0 {
            center.clone()
        } else {
            let p = random_start(poly, seeds::derive(cfg.seed, Stream::Patrol, round as u64))?;
            (&center + p) * 0.5
        };
        let x = barrier_ascent(game, kind, &theta.theta, poly, start);
        let u = utility_value(game, kind, &x, &theta.theta);
        if u.is_finite() && best.as_ref().is_none_or(|(_, _, b)| u > *b) {
            best = Some((round, x, u));
        }
    }
    let (round, x, utility) = best.ok_or_else(|| Error::solver("all interior-point restarts diverged", f64::NAN))?;
    let x = CoverageStrategy::new(x, game.strategy_space())
        .map_err(|_| Error::solver("interior point left the polytope", f64::NAN))?;
    Ok(PatrolOutcome {
        x,
        utility,
        dx_dtheta: DMatrix::zeros(n, kind.dim()),
        solver_tag: PatrolSolver::InteriorAlt,
        schedule: SolveSchedule { round, iterations: 0 },
        fingerprint: 0,
        degenerate: false,
        converged: true,
    })
}

fn barrier_ascent(game: &GameInstance, kind: ModelKind, theta: &[f64], poly: &Polytope, start: DVector<f64>) -> DVector<f64> {
    let a = poly.a();
    let b = poly.b();
    let n = poly.dim();
    let barrier = |x: &DVector<f64>, mu: f64| -> f64 {
        let slack = b - a * x;
        if slack.iter().any(|s| *s <= 0.0) {
            return f64::NEG_INFINITY;
        }
        utility_value(game, kind, x, theta) + mu * slack.iter().map(|s| s.ln()).sum::<f64>()
    };

    let mut x = start;
    let mut mu = 1.0;
    while mu > 1e-11 {
        for _ in 0..60 {
            let slack = b - a * &x;
            let inv = slack.map(|s| 1.0 / s);
            let grad_u = utility_grad(game, kind, &x, theta);
            let grad = &grad_u.g - a.transpose() * &inv * mu;
            let weights = DMatrix::from_diagonal(&inv.map(|v| v * v * mu));
            let hess_u = (&grad_u.j_x + grad_u.j_x.transpose()) * 0.5;
            let neg_hess = -hess_u + a.transpose() * weights * a;
            let mut shift = 0.0;
            let dir = loop {
                let shifted = &neg_hess + DMatrix::identity(n, n) * shift;
                if let Some(ch) = shifted.cholesky() {
                    break ch.solve(&grad);
                }
                shift = if shift == 0.0 { 1e-8 * (1.0 + neg_hess.norm()) } else { shift * 4.0 };
            };
            let decrement = grad.dot(&dir);
            if !(decrement > 1e-14) {
                break;
            }
            let ad = a * &dir;
            let mut step: f64 = 1.0;
            for j in 0..ad.len() {
                if ad[j] > 0.0 {
                    step = step.min(0.99 * slack[j] / ad[j]);
                }
            }
            let base = barrier(&x, mu);
            let mut accepted = false;
            while step > 1e-14 {
                let cand = &x + &dir * step;
                if barrier(&cand, mu) >= base + 1e-4 * step * decrement {
                    x = cand;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        mu *= 0.2;
    }
    x
}

/// Record of the kept learning restart, used to differentiate `θ_t` with
/// respect to the attack history.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningTrace {
    /// `θ^{0,proj}, θ^{1,proj}, …, θ^{k,proj}`.
    pub iterates: Vec<DVector<f64>>,
    /// Projection of `θ^i` for `i = 1..k`.
    pub projections: Vec<ProjectionResult>,
    pub step_alpha: f64,
    /// The round started from the previous step's parameters.
    pub warm_started: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub theta: ParamVector,
    /// Mean negative log-likelihood per observed attack at `theta`.
    pub loss: f64,
    pub trace: LearningTrace,
    pub schedule: SolveSchedule,
    pub fingerprint: u64,
    pub degenerate: bool,
    pub converged: bool,
}

/// Mean per-attack loss `L / S` with `S = Σ z`, its gradient and blocks.
///
/// The normalization makes the step size independent of the number of
/// observed attacks. Since `S` depends on `z`, the `z` block picks up
/// `−H / S²` in every column. An empty attack record gives `L ≡ 0`.
pub fn mean_loss(
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    theta: &ParamVector,
    with_blocks: bool,
) -> Result<(f64, DVector<f64>, Option<LossBlocks>)> {
    let eval = evaluate_loss(history, game, kind, theta, with_blocks)?;
    let total = history.total_attacks();
    let m = kind.dim();
    if total <= 0.0 {
        let blocks = eval.blocks.map(|b| LossBlocks {
            theta: DMatrix::zeros(m, m),
            x: b.x.iter().map(|j| j * 0.0).collect(),
            z: b.z.iter().map(|j| j * 0.0).collect(),
        });
        return Ok((0.0, DVector::zeros(m), blocks));
    }
    let grad = &eval.grad / total;
    let blocks = eval.blocks.map(|b| {
        let shift = &grad / total;
        LossBlocks {
            theta: b.theta / total,
            x: b.x.into_iter().map(|j| j / total).collect(),
            z: b
                .z
                .into_iter()
                .map(|j| {
                    let mut j = j / total;
                    for mut col in j.column_iter_mut() {
                        col -= &shift;
                    }
                    j
                })
                .collect(),
        }
    });
    Ok((eval.loss / total, grad, blocks))
}

struct LearnRound {
    trace: LearningTrace,
    loss: f64,
    fingerprint: u64,
    degenerate: bool,
    converged: bool,
}

fn learn_round(
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    space: &ParamSpace,
    cfg: &PGDConfig,
    round: usize,
    warm: Option<&DVector<f64>>,
    stopping: Stopping,
) -> Result<LearnRound> {
    let poly = space.polytope();
    let start = match (round, warm) {
        (0, Some(w)) => project_polytope(w, poly)?.point,
        _ => space.sample(&mut seeds::rng(seeds::derive(cfg.seed, Stream::Learn, round as u64)))?,
    };
    let alpha = cfg.step_alpha;
    let eval = |th: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let p = ParamVector::from_vector(kind, th)?;
        let (l, g, _) = mean_loss(history, game, kind, &p, false)?;
        Ok((l, g))
    };
    let (mut loss, mut grad) = eval(&start)?;
    let mut trace = LearningTrace {
        iterates: vec![start],
        projections: Vec::new(),
        step_alpha: alpha,
        warm_started: round == 0 && warm.is_some(),
    };
    let (limit, exact) = match stopping {
        Stopping::Tolerance => (cfg.max_iters, false),
        Stopping::Exact(k) => (k, true),
    };
    let mut fingerprint = 0u64;
    let mut degenerate = false;
    let mut converged = exact;

    for _ in 0..limit {
        let current = trace.iterates.last().unwrap();
        let raw = current - &grad * alpha;
        let proj = project_polytope(&raw, poly)?;
        let (next_loss, next_grad) = eval(&proj.point)?;
        if !next_loss.is_finite() {
            return Err(Error::solver("learning loss became non-finite", f64::NAN));
        }
        let decrease = loss - next_loss;
        if !exact && decrease < 0.0 {
            converged = true;
            break;
        }
        fingerprint = proj.fingerprint(fingerprint);
        degenerate |= proj.weakly_active;
        trace.iterates.push(proj.point.clone());
        trace.projections.push(proj);
        loss = next_loss;
        grad = next_grad;
        if !exact && decrease <= cfg.loss_tol {
            converged = true;
            break;
        }
    }
    Ok(LearnRound {
        trace,
        loss,
        fingerprint,
        degenerate,
        converged,
    })
}

fn finish_learn(kind: ModelKind, r: LearnRound, round: usize) -> Result<LearnOutcome> {
    let theta = ParamVector::from_vector(kind, r.trace.iterates.last().unwrap())?;
    Ok(LearnOutcome {
        theta,
        loss: r.loss,
        schedule: SolveSchedule {
            round,
            iterations: r.trace.projections.len(),
        },
        trace: r.trace,
        fingerprint: r.fingerprint,
        degenerate: r.degenerate,
        converged: r.converged,
    })
}

fn check_space(kind: ModelKind, space: &ParamSpace) -> Result<()> {
    if space.kind() != kind {
        return Err(Error::Parameter(format!("parameter space is for {}, not {kind}", space.kind())));
    }
    Ok(())
}

/// Fits `θ` to the history by multi-restart projected gradient descent.
pub fn learn_theta(
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    space: &ParamSpace,
    cfg: &PGDConfig,
) -> Result<LearnOutcome> {
    learn_theta_from(history, game, kind, space, cfg, None)
}

/// As [`learn_theta`], with round 0 optionally warm-started at `warm`.
pub fn learn_theta_from(
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    space: &ParamSpace,
    cfg: &PGDConfig,
    warm: Option<&DVector<f64>>,
) -> Result<LearnOutcome> {
    cfg.validate()?;
    check_space(kind, space)?;
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut best: Option<(usize, LearnRound)> = None;
    let mut all_converged = true;
    for round in 0..cfg.n_rounds {
        let r = match learn_round(history, game, kind, space, cfg, round, warm, Stopping::Tolerance) {
            Ok(r) => r,
            Err(Error::Solver { .. }) => continue,
            Err(e) => return Err(e),
        };
        all_converged &= r.converged;
        if best.as_ref().is_none_or(|(_, b)| r.loss < b.loss) {
            best = Some((round, r));
        }
    }
    let (round, mut r) = best.ok_or_else(|| Error::solver("all learning restarts diverged", f64::NAN))?;
    r.converged = all_converged;
    finish_learn(kind, r, round)
}

/// Reruns one learning restart for exactly `schedule.iterations` iterations.
pub fn learn_theta_replay(
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    space: &ParamSpace,
    cfg: &PGDConfig,
    warm: Option<&DVector<f64>>,
    schedule: SolveSchedule,
) -> Result<LearnOutcome> {
    cfg.validate()?;
    check_space(kind, space)?;
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let r = learn_round(
        history,
        game,
        kind,
        space,
        cfg,
        schedule.round,
        warm,
        Stopping::Exact(schedule.iterations),
    )?;
    finish_learn(kind, r, schedule.round)
}
