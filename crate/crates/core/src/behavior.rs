//! Parametric attacker behavior models and the defender's learning loss.
//!
//! Every model scores a target by `f(x_n, θ)` and the attack distribution is
//! the softmax of those scores. The loss is the attack-count weighted negative
//! log-likelihood of the observed history; first and second derivatives are
//! computed analytically from the softmax structure.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffopt::{project_polytope, Polytope, TOL_FEAS};
use crate::error::{Error, Result};
use crate::game::GameInstance;

/// Coverage probabilities are clamped into `[SHARP_CLAMP, 1 − SHARP_CLAMP]`
/// wherever a derivative of the weighting function would blow up at 0 or 1.
pub const SHARP_CLAMP: f64 = 1e-6;

const MAX_PARAMS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "QR")]
    Qr,
    #[serde(rename = "SUQR")]
    Suqr,
    #[serde(rename = "SHARP")]
    Sharp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Qr, ModelKind::Suqr, ModelKind::Sharp];

    /// Parameter dimension `m`.
    pub fn dim(self) -> usize {
        match self {
            ModelKind::Qr => 1,
            ModelKind::Suqr => 3,
            ModelKind::Sharp => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Qr => "QR",
            ModelKind::Suqr => "SUQR",
            ModelKind::Sharp => "SHARP",
        }
    }

    /// Default parameter box `(lower, upper)`.
    pub fn default_box(self) -> (Vec<f64>, Vec<f64>) {
        match self {
            ModelKind::Qr => (vec![0.0], vec![5.0]),
            ModelKind::Suqr => (vec![-15.0, 0.0, -2.0], vec![0.0, 2.0, 0.0]),
            ModelKind::Sharp => (vec![-15.0, 0.0, -2.0, 0.3, 0.3], vec![0.0, 2.0, 0.0, 3.0, 3.0]),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "QR" => Ok(ModelKind::Qr),
            "SUQR" => Ok(ModelKind::Suqr),
            "SHARP" => Ok(ModelKind::Sharp),
            other => Err(Error::Parameter(format!("unknown behavior model '{other}'"))),
        }
    }
}

/// Model parameters `θ` tagged with their model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub kind: ModelKind,
    pub theta: Vec<f64>,
}

impl ParamVector {
    pub fn new(kind: ModelKind, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != kind.dim() {
            return Err(Error::dim("parameter vector", kind.dim(), theta.len()));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Parameter("parameters must be finite".into()));
        }
        Ok(ParamVector { kind, theta })
    }

    pub fn from_vector(kind: ModelKind, theta: &DVector<f64>) -> Result<Self> {
        ParamVector::new(kind, theta.iter().copied().collect())
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Feasible parameters `Θ = {θ : Cθ ≤ D}`, always contained in a box.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpace {
    kind: ModelKind,
    polytope: Polytope,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl ParamSpace {
    pub fn default_for(kind: ModelKind) -> Self {
        let (lo, hi) = kind.default_box();
        ParamSpace::boxed(kind, lo, hi).expect("default parameter box is valid")
    }

    pub fn boxed(kind: ModelKind, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != kind.dim() {
            return Err(Error::dim("parameter box", kind.dim(), lower.len()));
        }
        let lower = DVector::from_vec(lower);
        let upper = DVector::from_vec(upper);
        let polytope = Polytope::boxed(lower.clone(), upper.clone())?;
        Ok(ParamSpace {
            kind,
            polytope,
            lower,
            upper,
        })
    }

    /// Box intersected with extra rows `Cθ ≤ D`.
    pub fn with_constraints(
        kind: ModelKind,
        c: DMatrix<f64>,
        d: DVector<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self> {
        let m = kind.dim();
        if c.ncols() != m {
            return Err(Error::dim("constraint columns", m, c.ncols()));
        }
        let bx = Polytope::boxed(DVector::from_column_slice(&lower), DVector::from_column_slice(&upper))?;
        let rows = c.nrows() + bx.rows();
        let a = DMatrix::from_fn(rows, m, |i, j| if i < c.nrows() { c[(i, j)] } else { bx.a()[(i - c.nrows(), j)] });
        let b = DVector::from_fn(rows, |i, _| if i < c.nrows() { d[i] } else { bx.b()[i - c.nrows()] });
        Ok(ParamSpace {
            kind,
            polytope: Polytope::general(a, b)?,
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn polytope(&self) -> &Polytope {
        &self.polytope
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        self.polytope.contains(theta, TOL_FEAS)
    }

    /// Uniform draw in the box, projected onto `Θ`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let raw = DVector::from_fn(self.lower.len(), |i, _| {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        });
        Ok(project_polytope(&raw, &self.polytope)?.point)
    }
}

/// Softmax attack probabilities over targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackDistribution(DVector<f64>);

impl AttackDistribution {
    pub fn probs(&self) -> &DVector<f64> {
        &self.0
    }
}

pub(crate) fn softmax(scores: &DVector<f64>) -> DVector<f64> {
    let max = scores.max();
    let e = scores.map(|s| (s - max).exp());
    let total = e.sum();
    e / total
}

fn log_sum_exp(scores: &DVector<f64>) -> f64 {
    let max = scores.max();
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Score of one target and its partial derivatives up to second order.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct TargetDerivs {
    pub f: f64,
    pub fx: f64,
    pub fxx: f64,
    pub ft: [f64; MAX_PARAMS],
    pub fxt: [f64; MAX_PARAMS],
    pub ftt: [[f64; MAX_PARAMS]; MAX_PARAMS],
}

/// Two-parameter probability weighting `π(p) = δp^γ / (δp^γ + (1−p)^γ)`,
/// written as `σ(ln δ + γ·logit p)`. Returns `π` and its partials in
/// `(p, γ, δ)`: `[π, π_p, π_γ, π_δ, π_pp, π_pγ, π_pδ, π_γγ, π_γδ, π_δδ]`.
fn weighting(p: f64, gamma: f64, delta: f64) -> [f64; 10] {
    let logit = p.ln() - (1.0 - p).ln();
    let l_p = 1.0 / (p * (1.0 - p));
    let l_pp = -1.0 / (p * p) + 1.0 / ((1.0 - p) * (1.0 - p));
    let s = delta.ln() + gamma * logit;
    let pi = 1.0 / (1.0 + (-s).exp());
    let d1 = pi * (1.0 - pi);
    let d2 = d1 * (1.0 - 2.0 * pi);
    // partials of s
    let (s_p, s_g, s_d) = (gamma * l_p, logit, 1.0 / delta);
    let (s_pp, s_pg, s_dd) = (gamma * l_pp, l_p, -1.0 / (delta * delta));
    [
        pi,
        d1 * s_p,
        d1 * s_g,
        d1 * s_d,
        d2 * s_p * s_p + d1 * s_pp,
        d2 * s_p * s_g + d1 * s_pg,
        d2 * s_p * s_d,
        d2 * s_g * s_g,
        d2 * s_g * s_d,
        d2 * s_d * s_d + d1 * s_dd,
    ]
}

pub(crate) fn target_derivs(kind: ModelKind, reward: f64, penalty: f64, x: f64, theta: &[f64]) -> TargetDerivs {
    let mut d = TargetDerivs::default();
    match kind {
        ModelKind::Qr => {
            let lambda = theta[0];
            let slope = penalty - reward;
            let u = x * slope + reward;
            d.f = lambda * u;
            d.fx = lambda * slope;
            d.ft[0] = u;
            d.fxt[0] = slope;
        }
        ModelKind::Suqr => {
            d.f = theta[0] * x + theta[1] * reward + theta[2] * penalty;
            d.fx = theta[0];
            d.ft[..3].copy_from_slice(&[x, reward, penalty]);
            d.fxt[0] = 1.0;
        }
        ModelKind::Sharp => {
            let (gamma, delta) = (theta[3], theta[4]);
            let xc = x.clamp(0.0, 1.0);
            let p = x.clamp(SHARP_CLAMP, 1.0 - SHARP_CLAMP);
            let w1 = theta[0];
            let [_, _, mut pi_g, mut pi_d, pi_pp, pi_pg, pi_pd, mut pi_gg, mut pi_gd, mut pi_dd] = weighting(p, gamma, delta);
            // π and π_p straight from δp^γ / (δp^γ + (1−p)^γ): exact at the
            // ends, and exactly p and 1 when γ = δ = 1.
            let (num, rest) = (delta * xc.powf(gamma), (1.0 - xc).powf(gamma));
            let pi = num / (num + rest);
            let den = delta * p.powf(gamma) + (1.0 - p).powf(gamma);
            let pi_p = gamma * delta * p.powf(gamma - 1.0) * (1.0 - p).powf(gamma - 1.0) / (den * den);
            if xc == 0.0 || xc == 1.0 {
                // π is pinned at 0 or 1 for every γ, δ.
                (pi_g, pi_d, pi_gg, pi_gd, pi_dd) = (0.0, 0.0, 0.0, 0.0, 0.0);
            }
            d.f = w1 * pi + theta[1] * reward + theta[2] * penalty;
            d.ft = [pi, reward, penalty, w1 * pi_g, w1 * pi_d];
            d.ftt[0][3] = pi_g;
            d.ftt[3][0] = pi_g;
            d.ftt[0][4] = pi_d;
            d.ftt[4][0] = pi_d;
            d.ftt[3][3] = w1 * pi_gg;
            d.ftt[3][4] = w1 * pi_gd;
            d.ftt[4][3] = w1 * pi_gd;
            d.ftt[4][4] = w1 * pi_dd;
            d.fx = w1 * pi_p;
            d.fxx = w1 * pi_pp;
            d.fxt = [pi_p, 0.0, 0.0, w1 * pi_pg, w1 * pi_pd];
        }
    }
    d
}

fn check_theta(kind: ModelKind, theta: &ParamVector) -> Result<()> {
    if theta.kind != kind || theta.dim() != kind.dim() {
        return Err(Error::Parameter(format!(
            "{kind} expects {} parameters, got {} for {}",
            kind.dim(),
            theta.dim(),
            theta.kind
        )));
    }
    Ok(())
}

/// `f(x_n, θ)` for target `n`.
pub fn score(kind: ModelKind, game: &GameInstance, n: usize, x_n: f64, theta: &ParamVector) -> Result<f64> {
    Ok(score_grads_full(kind, game, n, x_n, theta)?.f)
}

/// `(∂f/∂x_n, ∂f/∂θ)` for target `n`.
pub fn score_grads(
    kind: ModelKind,
    game: &GameInstance,
    n: usize,
    x_n: f64,
    theta: &ParamVector,
) -> Result<(f64, DVector<f64>)> {
    let d = score_grads_full(kind, game, n, x_n, theta)?;
    Ok((d.fx, DVector::from_column_slice(&d.ft[..kind.dim()])))
}

fn score_grads_full(kind: ModelKind, game: &GameInstance, n: usize, x_n: f64, theta: &ParamVector) -> Result<TargetDerivs> {
    check_theta(kind, theta)?;
    if n >= game.n_targets() {
        return Err(Error::Index {
            index: n,
            n_targets: game.n_targets(),
        });
    }
    Ok(target_derivs(kind, game.att_reward()[n], game.att_penalty()[n], x_n, &theta.theta))
}

/// Scores of all targets at coverage `x`, with derivatives laid out as
/// matrices (`ft`, `fxt` are `N × m`).
pub(crate) struct ScoreField {
    pub f: DVector<f64>,
    pub fx: DVector<f64>,
    pub fxx: DVector<f64>,
    pub ft: DMatrix<f64>,
    pub fxt: DMatrix<f64>,
    /// Per-target `m × m` Hessians in `θ`, only filled on request.
    pub ftt: Vec<DMatrix<f64>>,
}

impl ScoreField {
    pub fn new(kind: ModelKind, game: &GameInstance, x: &DVector<f64>, theta: &[f64], with_ftt: bool) -> Self {
        let n = game.n_targets();
        let m = kind.dim();
        let mut field = ScoreField {
            f: DVector::zeros(n),
            fx: DVector::zeros(n),
            fxx: DVector::zeros(n),
            ft: DMatrix::zeros(n, m),
            fxt: DMatrix::zeros(n, m),
            ftt: Vec::new(),
        };
        for i in 0..n {
            let d = target_derivs(kind, game.att_reward()[i], game.att_penalty()[i], x[i], theta);
            field.f[i] = d.f;
            field.fx[i] = d.fx;
            field.fxx[i] = d.fxx;
            for l in 0..m {
                field.ft[(i, l)] = d.ft[l];
                field.fxt[(i, l)] = d.fxt[l];
            }
            if with_ftt {
                field.ftt.push(DMatrix::from_fn(m, m, |a, b| d.ftt[a][b]));
            }
        }
        field
    }
}

pub fn attack_distribution(
    kind: ModelKind,
    game: &GameInstance,
    x: &DVector<f64>,
    theta: &ParamVector,
) -> Result<AttackDistribution> {
    check_theta(kind, theta)?;
    if x.len() != game.n_targets() {
        return Err(Error::dim("coverage vector", game.n_targets(), x.len()));
    }
    let field = ScoreField::new(kind, game, x, &theta.theta, false);
    Ok(AttackDistribution(softmax(&field.f)))
}

/// Observed strategies and attack counts of steps `1..t−1`.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    pub strategies: &'a [DVector<f64>],
    pub attacks: &'a [DVector<f64>],
}

impl<'a> History<'a> {
    pub fn new(strategies: &'a [DVector<f64>], attacks: &'a [DVector<f64>]) -> Result<Self> {
        if strategies.len() != attacks.len() {
            return Err(Error::dim("history steps", strategies.len(), attacks.len()));
        }
        Ok(History { strategies, attacks })
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    /// Total number of observed attacks.
    pub fn total_attacks(&self) -> f64 {
        self.attacks.iter().map(|z| z.sum()).sum()
    }

    fn validate(&self, game: &GameInstance) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyHistory);
        }
        let n = game.n_targets();
        for (x, z) in self.strategies.iter().zip(self.attacks) {
            if x.len() != n {
                return Err(Error::dim("history coverage", n, x.len()));
            }
            if z.len() != n {
                return Err(Error::dim("history attacks", n, z.len()));
            }
            if z.iter().any(|c| *c < 0.0) {
                return Err(Error::Parameter("attack counts must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Second-derivative blocks of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBlocks {
    /// `∂²L/∂θ∂θ`, `m × m`.
    pub theta: DMatrix<f64>,
    /// `∂²L/∂θ∂x_s` for each history step, `m × N`.
    pub x: Vec<DMatrix<f64>>,
    /// `∂²L/∂θ∂z_s` for each history step, `m × N`.
    pub z: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad: DVector<f64>,
    pub blocks: Option<LossBlocks>,
}

/// Loss `L = −Σ_s Σ_n z_{s,n} ln q_n(x_s, θ)`, its gradient in `θ` and
/// optionally the second-derivative blocks, in one pass over the history.
pub fn evaluate_loss(
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    theta: &ParamVector,
    with_blocks: bool,
) -> Result<LossEval> {
    check_theta(kind, theta)?;
    history.validate(game)?;
    let n = game.n_targets();
    let m = kind.dim();
    let mut loss = 0.0;
    let mut grad = DVector::zeros(m);
    let mut blocks = with_blocks.then(|| LossBlocks {
        theta: DMatrix::zeros(m, m),
        x: Vec::with_capacity(history.len()),
        z: Vec::with_capacity(history.len()),
    });

    for (x, z) in history.strategies.iter().zip(history.attacks) {
        let field = ScoreField::new(kind, game, x, &theta.theta, with_blocks);
        let q = softmax(&field.f);
        let total = z.sum();
        loss += -z.dot(&field.f) + total * log_sum_exp(&field.f);
        let mean_ft = field.ft.transpose() * &q;
        grad -= field.ft.transpose() * z - &mean_ft * total;

        if let Some(bl) = blocks.as_mut() {
            let mut weighted_ftt = DMatrix::zeros(m, m);
            let mut mean_ftt = DMatrix::zeros(m, m);
            let mut second_moment = DMatrix::zeros(m, m);
            for i in 0..n {
                weighted_ftt += &field.ftt[i] * z[i];
                mean_ftt += &field.ftt[i] * q[i];
                let row = field.ft.row(i).transpose();
                second_moment += &row * row.transpose() * q[i];
            }
            let cov = second_moment - &mean_ft * mean_ft.transpose();
            bl.theta -= weighted_ftt - (mean_ftt + cov) * total;

            let jz = DMatrix::from_fn(m, n, |l, i| -(field.ft[(i, l)] - mean_ft[l]));
            let jx = DMatrix::from_fn(m, n, |l, k| {
                let dmean = q[k] * (field.ft[(k, l)] - mean_ft[l]) * field.fx[k] + q[k] * field.fxt[(k, l)];
                -(z[k] * field.fxt[(k, l)] - total * dmean)
            });
            bl.x.push(jx);
            bl.z.push(jz);
        }
    }
    Ok(LossEval { loss, grad, blocks })
}

pub fn nll_loss(history: &History<'_>, game: &GameInstance, kind: ModelKind, theta: &ParamVector) -> Result<f64> {
    Ok(evaluate_loss(history, game, kind, theta, false)?.loss)
}

/// `H = dL/dθ`.
pub fn loss_grad_theta(
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    theta: &ParamVector,
) -> Result<DVector<f64>> {
    Ok(evaluate_loss(history, game, kind, theta, false)?.grad)
}

pub fn loss_jacobian_blocks(
    history: &History<'_>,
    game: &GameInstance,
    kind: ModelKind,
    theta: &ParamVector,
) -> Result<LossBlocks> {
    Ok(evaluate_loss(history, game, kind, theta, true)?
        .blocks
        .expect("blocks were requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{generate_covariance_game, Payoffs, StrategyPolytope};
    use approx::assert_relative_eq;

    fn game3() -> GameInstance {
        generate_covariance_game(3, -0.3, 5, 0.5).unwrap()
    }

    fn pv(kind: ModelKind, t: &[f64]) -> ParamVector {
        ParamVector::new(kind, t.to_vec()).unwrap()
    }

    #[test]
    fn score_examples() {
        let g = game3();
        assert_eq!(score(ModelKind::Qr, &g, 1, 0.3, &pv(ModelKind::Qr, &[0.0])).unwrap(), 0.0);
        let payoffs = Payoffs {
            att_reward: vec![0.0],
            att_penalty: vec![-1.0],
            def_reward: vec![1.0],
            def_penalty: vec![0.0],
        };
        let g0 = GameInstance::new(payoffs, StrategyPolytope::budget_box(1, 1.0).unwrap(), 1, 1).unwrap();
        let s = score(ModelKind::Suqr, &g0, 0, 0.4, &pv(ModelKind::Suqr, &[-1.0, 0.0, 0.0])).unwrap();
        assert_eq!(s, -0.4);
        for x in [0.1, 0.37, 0.8] {
            let suqr = score(ModelKind::Suqr, &g, 2, x, &pv(ModelKind::Suqr, &[-3.0, 0.7, -0.4])).unwrap();
            let sharp = score(ModelKind::Sharp, &g, 2, x, &pv(ModelKind::Sharp, &[-3.0, 0.7, -0.4, 1.0, 1.0])).unwrap();
            assert_relative_eq!(suqr, sharp, epsilon = 1e-12);
        }
    }

    #[test]
    fn score_grads_examples() {
        let payoffs = Payoffs {
            att_reward: vec![6.0],
            att_penalty: vec![-3.0],
            def_reward: vec![1.0],
            def_penalty: vec![0.0],
        };
        let g = GameInstance::new(payoffs, StrategyPolytope::budget_box(1, 1.0).unwrap(), 1, 1).unwrap();
        let (dx, dt) = score_grads(ModelKind::Qr, &g, 0, 0.25, &pv(ModelKind::Qr, &[1.0])).unwrap();
        assert_eq!(dx, -9.0);
        assert_eq!(dt[0], g.att_utility(0, 0.25));
        let (dx, _) = score_grads(ModelKind::Suqr, &g, 0, 0.25, &pv(ModelKind::Suqr, &[-4.5, 1.0, -1.0])).unwrap();
        assert_eq!(dx, -4.5);
    }

    #[test]
    fn theta_dimension_mismatch_is_rejected() {
        let g = game3();
        let bad = ParamVector {
            kind: ModelKind::Suqr,
            theta: vec![1.0],
        };
        assert!(matches!(score(ModelKind::Suqr, &g, 0, 0.2, &bad), Err(Error::Parameter(_))));
        assert!(ParamVector::new(ModelKind::Sharp, vec![0.0; 3]).is_err());
    }

    #[test]
    fn sharp_boundary_uses_limits() {
        let (pi0, pi1) = (weighting(SHARP_CLAMP, 0.5, 2.0)[0], weighting(1.0 - SHARP_CLAMP, 0.5, 2.0)[0]);
        assert!(pi0 < 1e-2 && pi1 > 1.0 - 1e-2);
        let g = game3();
        let th = pv(ModelKind::Sharp, &[-2.0, 0.5, -0.5, 0.6, 1.5]);
        let base = 0.5 * g.att_reward()[0] - 0.5 * g.att_penalty()[0];
        assert_eq!(score(ModelKind::Sharp, &g, 0, 0.0, &th).unwrap(), base);
        assert_relative_eq!(score(ModelKind::Sharp, &g, 0, 1.0, &th).unwrap(), base - 2.0, epsilon = 1e-14);
        let (dx, dt) = score_grads(ModelKind::Sharp, &g, 0, 0.0, &th).unwrap();
        assert!(dx.is_finite() && dx < 0.0);
        assert_eq!((dt[3], dt[4]), (0.0, 0.0));
    }

    #[test]
    fn sharp_identity_weighting_is_exact_suqr() {
        let g = game3();
        let w = [-4.0, 0.7, -0.3];
        let sharp = pv(ModelKind::Sharp, &[w[0], w[1], w[2], 1.0, 1.0]);
        let suqr = pv(ModelKind::Suqr, &w);
        for x in [0.0, 1e-9, 0.1, 0.37, 0.5, 0.999_999_9, 1.0] {
            for n in 0..3 {
                let a = score_grads(ModelKind::Sharp, &g, n, x, &sharp).unwrap();
                let b = score_grads(ModelKind::Suqr, &g, n, x, &suqr).unwrap();
                assert_eq!(score(ModelKind::Sharp, &g, n, x, &sharp).unwrap(), score(ModelKind::Suqr, &g, n, x, &suqr).unwrap());
                assert_eq!(a.0, b.0);
                assert_eq!(a.1.rows(0, 3), b.1);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let g = game3();
        let x = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        let q = attack_distribution(ModelKind::Qr, &g, &x, &pv(ModelKind::Qr, &[0.0])).unwrap();
        for qi in q.probs().iter() {
            assert_relative_eq!(*qi, 1.0 / 3.0, epsilon = 1e-15);
        }
        let q2 = softmax(&DVector::from_vec(vec![3f64.ln(), 0.0]));
        assert_relative_eq!(q2[0], 0.75, epsilon = 1e-15);
        assert_relative_eq!(q2[1], 0.25, epsilon = 1e-15);
        let big = softmax(&DVector::from_vec(vec![800.0, 799.0]));
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uniform_loss_is_k_log_n() {
        let g = game3();
        let xs = vec![DVector::from_vec(vec![0.2, 0.5, 0.3])];
        let zs = vec![DVector::from_vec(vec![10.0, 25.0, 15.0])];
        let h = History::new(&xs, &zs).unwrap();
        let l = nll_loss(&h, &g, ModelKind::Qr, &pv(ModelKind::Qr, &[0.0])).unwrap();
        assert_relative_eq!(l, 50.0 * 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn empty_history_is_an_error() {
        let g = game3();
        let h = History::new(&[], &[]).unwrap();
        assert_eq!(nll_loss(&h, &g, ModelKind::Qr, &pv(ModelKind::Qr, &[1.0])), Err(Error::EmptyHistory));
    }

    #[test]
    fn single_target_gradient_vanishes() {
        let payoffs = Payoffs {
            att_reward: vec![4.0],
            att_penalty: vec![-2.0],
            def_reward: vec![3.0],
            def_penalty: vec![-1.0],
        };
        let g = GameInstance::new(payoffs, StrategyPolytope::budget_box(1, 1.0).unwrap(), 9, 2).unwrap();
        let xs = vec![DVector::from_vec(vec![0.4])];
        let zs = vec![DVector::from_vec(vec![9.0])];
        let h = History::new(&xs, &zs).unwrap();
        let grad = loss_grad_theta(&h, &g, ModelKind::Qr, &pv(ModelKind::Qr, &[2.0])).unwrap();
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn zero_attacks_give_zero_blocks() {
        let g = game3();
        let xs = vec![DVector::from_vec(vec![0.2, 0.5, 0.3])];
        let zs = vec![DVector::zeros(3)];
        let h = History::new(&xs, &zs).unwrap();
        let th = pv(ModelKind::Sharp, &[-2.0, 0.5, -0.5, 0.6, 1.5]);
        let b = loss_jacobian_blocks(&h, &g, ModelKind::Sharp, &th).unwrap();
        assert_eq!(b.theta.norm(), 0.0);
        assert_eq!(b.x[0].norm(), 0.0);
        // J_H_z does not vanish: it is the derivative with respect to z itself.
        let qr = loss_jacobian_blocks(&h, &g, ModelKind::Qr, &pv(ModelKind::Qr, &[1.5])).unwrap();
        let x = &xs[0];
        let q = attack_distribution(ModelKind::Qr, &g, x, &pv(ModelKind::Qr, &[1.5])).unwrap();
        let u = g.att_utilities(x);
        let ubar = u.dot(q.probs());
        for n in 0..3 {
            assert_relative_eq!(qr.z[0][(0, n)], -(u[n] - ubar), epsilon = 1e-12);
        }
    }
}
