//! Finite-difference checks of analytic derivatives and hypergradients.
//!
//! Every probe replays the base run's inner-solver schedules, so the
//! perturbed pipelines take exactly the same restarts and iteration counts.
//! A probe whose projections hit a different active set than the base run
//! measures a kink rather than a derivative; such checks are reported as
//! unstable and left out of pass/fail decisions.

use nalgebra::{DMatrix, DVector};

use crate::attacker::{simulate_inner, simulate_replay, total_gradient, AttackPlan, DefenderSetup, SimConfig, Trajectory};
use crate::behavior::{evaluate_loss, loss_grad_theta, nll_loss, score, score_grads, History, ModelKind, ParamVector};
use crate::defender::{
    defender_utility, defender_utility_grad, patrol_pgd_replay, patrol_pgd_with_grad, PGDConfig,
};
use crate::diffopt::{project_polytope, projection_jacobian, Polytope};
use crate::error::{Error, Result};
use crate::game::GameInstance;

/// Analytic and numeric derivative blocks side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub analytic: DMatrix<f64>,
    pub numeric: DMatrix<f64>,
    pub rel_err: f64,
    /// Every probe reproduced the base run's active sets.
    pub stable: bool,
}

impl FdReport {
    /// `value_scale` is the size of the differenced function at the base
    /// point; see [`rel_err`].
    fn new(analytic: DMatrix<f64>, numeric: DMatrix<f64>, stable: bool, value_scale: f64) -> Self {
        let rel_err = rel_err(&analytic, &numeric, value_scale);
        FdReport {
            analytic,
            numeric,
            rel_err,
            stable,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-4 · max(1, value_scale))`, Frobenius norms.
///
/// Central differences carry rounding noise of order `ε·|f|/h`, so a block
/// that is tiny next to the differenced function `f` cannot be judged
/// relative to itself; the floor measures such blocks against `|f|`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, value_scale: f64) -> f64 {
    let scale = a.norm().max(b.norm()).max(1e-4 * value_scale.max(1.0));
    (a - b).norm() / scale
}

/// `dx/dθ` of the patrol solver against central differences in each `θ_j`.
pub fn check_patrol_hypergradient(game: &GameInstance, theta: &ParamVector, cfg: &PGDConfig, h: f64) -> Result<FdReport> {
    let base = patrol_pgd_with_grad(game, theta, cfg)?;
    let n = game.n_targets();
    let m = theta.dim();
    let mut numeric = DMatrix::zeros(n, m);
    let mut stable = !base.degenerate;
    for j in 0..m {
        let mut probe = |sign: f64| -> Result<_> {
            let mut th = theta.clone();
            th.theta[j] += sign * h;
            let out = patrol_pgd_replay(game, &th, cfg, base.schedule)?;
            stable &= out.fingerprint == base.fingerprint;
            Ok(out.x.into_vector())
        };
        let plus = probe(1.0)?;
        let minus = probe(-1.0)?;
        numeric.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    let scale = base.x.as_vector().norm();
    Ok(FdReport::new(base.dx_dtheta, numeric, stable, scale))
}

fn base_trajectory(game: &GameInstance, plan: &AttackPlan, setup: &DefenderSetup, cfg: &SimConfig) -> Result<Trajectory> {
    if plan.n_targets() != game.n_targets() {
        return Err(Error::dim("plan targets", game.n_targets(), plan.n_targets()));
    }
    simulate_inner(game, plan, setup, cfg, true, None)
}

/// Derivative of `read` in one plan entry. Entries closer than `h` to zero
/// use the one-sided second-order formula so counts stay non-negative.
fn probe(
    game: &GameInstance,
    plan: &AttackPlan,
    setup: &DefenderSetup,
    cfg: &SimConfig,
    base: &Trajectory,
    entry: (usize, usize),
    h: f64,
    read: impl Fn(&Trajectory) -> Option<DVector<f64>>,
) -> Result<(DVector<f64>, bool)> {
    let run = |step: f64| -> Result<Trajectory> {
        let mut z = plan.as_matrix().clone();
        z[entry] += step;
        simulate_replay(game, &AttackPlan::raw(z), setup, cfg, false, &base.schedules)
    };
    let value = |tr: &Trajectory| read(tr).ok_or(Error::MissingGradients);
    if plan.as_matrix()[entry] >= h {
        let (plus, minus) = (run(h)?, run(-h)?);
        let stable = plus.fingerprint == base.fingerprint && minus.fingerprint == base.fingerprint;
        Ok(((value(&plus)? - value(&minus)?) / (2.0 * h), stable))
    } else {
        let (one, two) = (run(h)?, run(2.0 * h)?);
        let stable = one.fingerprint == base.fingerprint && two.fingerprint == base.fingerprint;
        let d = (value(&one)? * 4.0 - value(base)? * 3.0 - value(&two)?) / (2.0 * h);
        Ok((d, stable))
    }
}

/// `dθ_t/dz_{t'}` (0-based steps, `t' < t`) against finite differences of
/// the learn-patrol pipeline in each entry of `z_{t'}`.
pub fn check_theta_wrt_z(
    game: &GameInstance,
    plan: &AttackPlan,
    setup: &DefenderSetup,
    cfg: &SimConfig,
    t: usize,
    t_prime: usize,
    h: f64,
) -> Result<FdReport> {
    if t_prime >= t || t >= plan.horizon() {
        return Err(Error::Parameter(format!("need t' < t < T, got t'={t_prime}, t={t}")));
    }
    let base = base_trajectory(game, plan, setup, cfg)?;
    let grads = base.grads.as_ref().ok_or(Error::MissingGradients)?;
    let analytic = grads[t].dtheta_dz[t_prime].clone();
    let scale = base.params[t].as_ref().map_or(0.0, |p| p.as_vector().norm());
    let m = setup.model.dim();
    let mut numeric = DMatrix::zeros(m, game.n_targets());
    let mut stable = !base.degenerate;
    for n in 0..game.n_targets() {
        let read = |tr: &Trajectory| tr.params[t].as_ref().map(|p| p.as_vector());
        let (d, ok) = probe(game, plan, setup, cfg, &base, (t_prime, n), h, read)?;
        stable &= ok;
        numeric.set_column(n, &d);
    }
    Ok(FdReport::new(analytic, numeric, stable, scale))
}

/// `dF/dz` against finite differences of the simulated total utility.
pub fn check_total_gradient(
    game: &GameInstance,
    plan: &AttackPlan,
    setup: &DefenderSetup,
    cfg: &SimConfig,
    h: f64,
) -> Result<FdReport> {
    let base = base_trajectory(game, plan, setup, cfg)?;
    let analytic = total_gradient(&base, game, plan)?;
    let mut numeric = DMatrix::zeros(plan.horizon(), game.n_targets());
    let mut stable = !base.degenerate;
    for t in 0..plan.horizon() {
        for n in 0..game.n_targets() {
            let read = |tr: &Trajectory| Some(DVector::from_element(1, tr.total_utility));
            let (d, ok) = probe(game, plan, setup, cfg, &base, (t, n), h, read)?;
            stable &= ok;
            numeric[(t, n)] = d[0];
        }
    }
    Ok(FdReport::new(analytic, numeric, stable, base.total_utility.abs()))
}

fn central<F: FnMut(f64) -> Result<DVector<f64>>>(mut f: F, h: f64) -> Result<DVector<f64>> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

/// Named derivative blocks of one first-order check.
pub type BlockReports = Vec<(&'static str, FdReport)>;

/// `∂f/∂x_n` and `∂f/∂θ` of one target's score.
pub fn check_score_grads(
    kind: ModelKind,
    game: &GameInstance,
    n: usize,
    x_n: f64,
    theta: &ParamVector,
    h: f64,
) -> Result<BlockReports> {
    let (fx, ft) = score_grads(kind, game, n, x_n, theta)?;
    let scale = score(kind, game, n, x_n, theta)?.abs();
    let num_x = central(|d| Ok(DVector::from_element(1, score(kind, game, n, x_n + d, theta)?)), h)?;
    let mut num_t = DVector::zeros(theta.dim());
    for l in 0..theta.dim() {
        num_t[l] = central(
            |d| {
                let mut th = theta.clone();
                th.theta[l] += d;
                Ok(DVector::from_element(1, score(kind, game, n, x_n, &th)?))
            },
            h,
        )?[0];
    }
    Ok(vec![
        ("f_x", FdReport::new(DMatrix::from_element(1, 1, fx), DMatrix::from_element(1, 1, num_x[0]), true, scale)),
        ("f_theta", FdReport::new(DMatrix::from_column_slice(ft.len(), 1, ft.as_slice()), DMatrix::from_column_slice(ft.len(), 1, num_t.as_slice()), true, scale)),
    ])
}

/// `H`, `J_{H,θ}`, and every `J_{H,x_s}`, `J_{H,z_s}` of the loss.
pub fn check_loss_blocks(
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    theta: &ParamVector,
    h: f64,
) -> Result<BlockReports> {
    let eval = evaluate_loss(history, game, kind, theta, true)?;
    let blocks = eval.blocks.ok_or(Error::MissingGradients)?;
    let m = theta.dim();
    let n = game.n_targets();
    let h_scale = eval.grad.norm();
    let shifted = |l: usize, d: f64| {
        let mut th = theta.clone();
        th.theta[l] += d;
        th
    };

    let mut num_h = DVector::zeros(m);
    let mut num_ht = DMatrix::zeros(m, m);
    for l in 0..m {
        num_h[l] = central(|d| Ok(DVector::from_element(1, nll_loss(history, game, kind, &shifted(l, d))?)), h)?[0];
        let col = central(|d| loss_grad_theta(history, game, kind, &shifted(l, d)), h)?;
        num_ht.set_column(l, &col);
    }
    let mut out = vec![
        ("H", FdReport::new(DMatrix::from_column_slice(m, 1, eval.grad.as_slice()), DMatrix::from_column_slice(m, 1, num_h.as_slice()), true, eval.loss.abs())),
        ("J_H_theta", FdReport::new(blocks.theta.clone(), num_ht, true, h_scale)),
    ];
    for s in 0..history.len() {
        let mut num_x = DMatrix::zeros(m, n);
        let mut num_z = DMatrix::zeros(m, n);
        for k in 0..n {
            let col = central(
                |d| {
                    let mut xs = history.strategies.to_vec();
                    xs[s][k] += d;
                    loss_grad_theta(&History::new(&xs, history.attacks)?, game, kind, theta)
                },
                h,
            )?;
            num_x.set_column(k, &col);
            let at = |d: f64| {
                let mut zs = history.attacks.to_vec();
                zs[s][k] += d;
                loss_grad_theta(&History::new(history.strategies, &zs)?, game, kind, theta)
            };
            // The gradient is linear in the counts, so a forward difference
            // is exact where a backward probe would go negative.
            let col = if history.attacks[s][k] < h { (at(h)? - at(0.0)?) / h } else { central(at, h)? };
            num_z.set_column(k, &col);
        }
        out.push(("J_H_x", FdReport::new(blocks.x[s].clone(), num_x, true, h_scale)));
        out.push(("J_H_z", FdReport::new(blocks.z[s].clone(), num_z, true, h_scale)));
    }
    Ok(out)
}

/// `G = ∂U^d/∂x`, `J_{G,x}` and `J_{G,θ}` of the defender's utility.
pub fn check_utility_grad(game: &GameInstance, x: &DVector<f64>, theta: &ParamVector, h: f64) -> Result<BlockReports> {
    let kind = theta.kind;
    let grad = defender_utility_grad(game, x, theta, kind)?;
    let g_scale = grad.g.norm();
    let n = game.n_targets();
    let m = theta.dim();
    let mut num_g = DVector::zeros(n);
    let mut num_gx = DMatrix::zeros(n, n);
    for k in 0..n {
        let at = |d: f64| {
            let mut xx = x.clone();
            xx[k] += d;
            xx
        };
        num_g[k] = central(|d| Ok(DVector::from_element(1, defender_utility(game, &at(d), theta, kind)?)), h)?[0];
        let col = central(|d| Ok(defender_utility_grad(game, &at(d), theta, kind)?.g), h)?;
        num_gx.set_column(k, &col);
    }
    let mut num_gt = DMatrix::zeros(n, m);
    for l in 0..m {
        let col = central(
            |d| {
                let mut th = theta.clone();
                th.theta[l] += d;
                Ok(defender_utility_grad(game, x, &th, kind)?.g)
            },
            h,
        )?;
        num_gt.set_column(l, &col);
    }
    Ok(vec![
        ("G", FdReport::new(DMatrix::from_column_slice(n, 1, grad.g.as_slice()), DMatrix::from_column_slice(n, 1, num_g.as_slice()), true, grad.utility.abs())),
        ("J_G_x", FdReport::new(grad.j_x, num_gx, true, g_scale)),
        ("J_G_theta", FdReport::new(grad.j_theta, num_gt, true, g_scale)),
    ])
}

/// Jacobian of the Euclidean projection onto `poly` at `v` against central
/// differences of the projection itself.
pub fn check_projection_jacobian(v: &DVector<f64>, poly: &Polytope, h: f64) -> Result<FdReport> {
    let base = project_polytope(v, poly)?;
    let jac = projection_jacobian(&base, poly);
    let n = v.len();
    let key = base.fingerprint(0);
    let mut numeric = DMatrix::zeros(n, n);
    let mut stable = !jac.degenerate && !base.weakly_active;
    for k in 0..n {
        let mut at = |d: f64| -> Result<DVector<f64>> {
            let mut w = v.clone();
            w[k] += d;
            let p = project_polytope(&w, poly)?;
            stable &= p.fingerprint(0) == key;
            Ok(p.point)
        };
        let col = central(&mut at, h)?;
        numeric.set_column(k, &col);
    }
    Ok(FdReport::new(jac.matrix, numeric, stable, base.point.norm()))
}
