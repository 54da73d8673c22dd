//! Game data model: payoffs, the defender's coverage polytope, per-target
//! expected utilities, random covariance games and the Strong Stackelberg
//! Equilibrium used as the first-step strategy and as the baseline.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffopt::{Polytope, PolytopeForm, TOL_FEAS};
use crate::error::{Error, Result};
use crate::seeds::{self, Stream};

pub const DEFAULT_MAX_ATTACKS: usize = 50;
pub const DEFAULT_HORIZON: usize = 4;

/// Canonical description of a strategy polytope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CanonicalForm {
    BudgetBox(f64),
    General,
}

/// The defender's feasible marginal coverage vectors `{x : Ax ≤ b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyPolytope(Polytope);

impl StrategyPolytope {
    /// `{0 ≤ x_n ≤ 1, Σ x_n ≤ budget}`.
    pub fn budget_box(n: usize, budget: f64) -> Result<Self> {
        Polytope::budget_box(n, budget).map(StrategyPolytope)
    }

    pub fn general(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if b.iter().any(|bj| *bj < -TOL_FEAS) {
            return Err(Error::Construction("x = 0 must be a feasible coverage".into()));
        }
        Polytope::general(a, b).map(StrategyPolytope)
    }

    pub fn canonical_form(&self) -> CanonicalForm {
        match self.0.form() {
            PolytopeForm::BudgetBox { budget } => CanonicalForm::BudgetBox(*budget),
            _ => CanonicalForm::General,
        }
    }

    pub fn polytope(&self) -> &Polytope {
        &self.0
    }

    pub fn n_targets(&self) -> usize {
        self.0.dim()
    }
}

impl AsRef<Polytope> for StrategyPolytope {
    fn as_ref(&self) -> &Polytope {
        &self.0
    }
}

/// A feasible marginal coverage vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageStrategy(DVector<f64>);

impl CoverageStrategy {
    pub fn new(x: DVector<f64>, space: &StrategyPolytope) -> Result<Self> {
        if x.len() != space.n_targets() {
            return Err(Error::dim("coverage vector", space.n_targets(), x.len()));
        }
        let in_unit = x.iter().all(|xi| *xi >= -TOL_FEAS && *xi <= 1.0 + TOL_FEAS);
        if !in_unit || !space.polytope().contains(&x, TOL_FEAS) {
            return Err(Error::Parameter("coverage vector is outside the strategy polytope".into()));
        }
        Ok(CoverageStrategy(x))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// Payoffs for a game over `N` targets. Rewards lie in `[0, 10]` and
/// penalties in `[−10, 0]` for generated games; any `P < R` is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct Payoffs {
    pub att_reward: Vec<f64>,
    pub att_penalty: Vec<f64>,
    pub def_reward: Vec<f64>,
    pub def_penalty: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameInstance {
    att_reward: DVector<f64>,
    att_penalty: DVector<f64>,
    def_reward: DVector<f64>,
    def_penalty: DVector<f64>,
    strategy_space: StrategyPolytope,
    max_attacks: usize,
    horizon: usize,
    covariance_r: Option<f64>,
    seed: Option<u64>,
}

impl GameInstance {
    pub fn new(payoffs: Payoffs, strategy_space: StrategyPolytope, max_attacks: usize, horizon: usize) -> Result<Self> {
        let n = payoffs.att_reward.len();
        if n == 0 {
            return Err(Error::Construction("a game needs at least one target".into()));
        }
        for (what, v) in [
            ("attacker penalties", &payoffs.att_penalty),
            ("defender rewards", &payoffs.def_reward),
            ("defender penalties", &payoffs.def_penalty),
        ] {
            if v.len() != n {
                return Err(Error::dim(what, n, v.len()));
            }
        }
        if strategy_space.n_targets() != n {
            return Err(Error::dim("strategy polytope", n, strategy_space.n_targets()));
        }
        if horizon == 0 {
            return Err(Error::Construction("horizon must be positive".into()));
        }
        let all = [&payoffs.att_reward, &payoffs.att_penalty, &payoffs.def_reward, &payoffs.def_penalty];
        if all.iter().any(|v| v.iter().any(|p| !p.is_finite())) {
            return Err(Error::Construction("payoffs must be finite".into()));
        }
        for i in 0..n {
            if payoffs.att_penalty[i] >= payoffs.att_reward[i] || payoffs.def_penalty[i] >= payoffs.def_reward[i] {
                return Err(Error::Construction(format!("target {i}: penalties must be below rewards")));
            }
        }
        Ok(GameInstance {
            att_reward: DVector::from_vec(payoffs.att_reward),
            att_penalty: DVector::from_vec(payoffs.att_penalty),
            def_reward: DVector::from_vec(payoffs.def_reward),
            def_penalty: DVector::from_vec(payoffs.def_penalty),
            strategy_space,
            max_attacks,
            horizon,
            covariance_r: None,
            seed: None,
        })
    }

    pub fn n_targets(&self) -> usize {
        self.att_reward.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn max_attacks(&self) -> usize {
        self.max_attacks
    }

    pub fn att_reward(&self) -> &DVector<f64> {
        &self.att_reward
    }

    pub fn att_penalty(&self) -> &DVector<f64> {
        &self.att_penalty
    }

    pub fn def_reward(&self) -> &DVector<f64> {
        &self.def_reward
    }

    pub fn def_penalty(&self) -> &DVector<f64> {
        &self.def_penalty
    }

    pub fn strategy_space(&self) -> &StrategyPolytope {
        &self.strategy_space
    }

    pub fn covariance_r(&self) -> Option<f64> {
        self.covariance_r
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Construction("horizon must be positive".into()));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_max_attacks(mut self, max_attacks: usize) -> Self {
        self.max_attacks = max_attacks;
        self
    }

    fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.n_targets() {
            return Err(Error::Index {
                index: n,
                n_targets: self.n_targets(),
            });
        }
        Ok(())
    }

    /// Slope of the attacker's expected utility in coverage, `P^a_n − R^a_n`.
    pub fn att_slope(&self, n: usize) -> f64 {
        self.att_penalty[n] - self.att_reward[n]
    }

    /// Slope of the defender's expected utility in coverage, `R^d_n − P^d_n`.
    pub fn def_slope(&self, n: usize) -> f64 {
        self.def_reward[n] - self.def_penalty[n]
    }

    /// `x_n (P^a_n − R^a_n) + R^a_n`, without index checks.
    pub fn att_utility(&self, n: usize, x_n: f64) -> f64 {
        x_n * self.att_slope(n) + self.att_reward[n]
    }

    /// `x_n (R^d_n − P^d_n) + P^d_n`, without index checks.
    pub fn def_utility(&self, n: usize, x_n: f64) -> f64 {
        x_n * self.def_slope(n) + self.def_penalty[n]
    }

    /// Per-target attacker utilities at coverage `x`.
    pub fn att_utilities(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_targets(), |n, _| self.att_utility(n, x[n]))
    }

    pub fn def_utilities(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_targets(), |n, _| self.def_utility(n, x[n]))
    }
}

pub fn def_utility_at(game: &GameInstance, n: usize, x_n: f64) -> Result<f64> {
    game.check_index(n)?;
    Ok(game.def_utility(n, x_n))
}

pub fn att_utility_at(game: &GameInstance, n: usize, x_n: f64) -> Result<f64> {
    game.check_index(n)?;
    Ok(game.att_utility(n, x_n))
}

/// Attacker's utility of one step: `Σ_n z_n U^a_n(x_n)`.
pub fn att_step_utility(game: &GameInstance, x: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
    let n = game.n_targets();
    if x.len() != n {
        return Err(Error::dim("coverage vector", n, x.len()));
    }
    if z.len() != n {
        return Err(Error::dim("attack vector", n, z.len()));
    }
    Ok((0..n).map(|i| z[i] * game.att_utility(i, x[i])).sum())
}

/// Defender's realized utility of one step: `Σ_n z_n U^d_n(x_n)`.
pub fn def_step_utility(game: &GameInstance, x: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
    let n = game.n_targets();
    if x.len() != n || z.len() != n {
        return Err(Error::dim("step vectors", n, x.len().min(z.len())));
    }
    Ok((0..n).map(|i| z[i] * game.def_utility(i, x[i])).sum())
}

/// Random covariance game.
///
/// Attacker payoffs are uniform (`R^a ∈ [0, 10)`, `P^a ∈ [−10, 0)`). With
/// `ρ = −r`, the defender's payoffs mix the negated attacker payoffs with
/// fresh uniforms of matching mean and spread:
///
/// ```text
/// R^d = clamp(ρ·(−P^a) + (1 − ρ)·5    + √(1 − ρ²)·(u₁ − 5),  0, 10)
/// P^d = clamp(ρ·(−R^a) + (1 − ρ)·(−5) + √(1 − ρ²)·(u₂ + 5), −10, 0)
/// ```
///
/// Before clamping the correlation of `(R^d, −P^a)` is exactly `ρ`; `r = −1`
/// gives a zero-sum game bit for bit and `r = 0` independent payoffs. The
/// budget is `⌈ratio · N⌉`.
pub fn generate_covariance_game(n: usize, r: f64, seed: u64, ratio: f64) -> Result<GameInstance> {
    if !(-1.0..=0.0).contains(&r) {
        return Err(Error::Parameter(format!("covariance r must lie in [-1, 0], got {r}")));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Parameter(format!("resource ratio must lie in (0, 1], got {ratio}")));
    }
    if n == 0 {
        return Err(Error::Parameter("need at least one target".into()));
    }
    let rho = -r;
    let spread = (1.0 - rho * rho).max(0.0).sqrt();
    let mut rng = seeds::rng(seeds::derive(seed, Stream::Game, 0));
    let mut p = Payoffs {
        att_reward: Vec::with_capacity(n),
        att_penalty: Vec::with_capacity(n),
        def_reward: Vec::with_capacity(n),
        def_penalty: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let ra: f64 = rng.gen_range(0.0..10.0);
        let pa: f64 = rng.gen_range(-10.0..0.0);
        let (rd, pd) = loop {
            let u1: f64 = rng.gen_range(0.0..10.0);
            let u2: f64 = rng.gen_range(-10.0..0.0);
            let rd = (rho * -pa + (1.0 - rho) * 5.0 + spread * (u1 - 5.0)).clamp(0.0, 10.0);
            let pd = (rho * -ra + (1.0 - rho) * -5.0 + spread * (u2 + 5.0)).clamp(-10.0, 0.0);
            if pd < rd {
                break (rd, pd);
            }
        };
        p.att_reward.push(ra);
        p.att_penalty.push(pa);
        p.def_reward.push(rd);
        p.def_penalty.push(pd);
    }
    let budget = (ratio * n as f64).ceil();
    let space = StrategyPolytope::budget_box(n, budget)?;
    let mut game = GameInstance::new(p, space, DEFAULT_MAX_ATTACKS, DEFAULT_HORIZON)?;
    game.covariance_r = Some(r);
    game.seed = Some(seed);
    Ok(game)
}

/// Strong Stackelberg Equilibrium against a perfectly rational attacker.
#[derive(Debug, Clone, PartialEq)]
pub struct SseSolution {
    pub strategy: CoverageStrategy,
    pub target: usize,
    pub def_utility: f64,
    pub att_utility: f64,
}

/// Multiple-LP method: for every candidate target `n`, maximize `U^d_n(x_n)`
/// over `x ∈ X` subject to `n` being an attacker best response; keep the
/// best feasible candidate (lowest index on ties).
pub fn solve_sse(game: &GameInstance) -> Result<SseSolution> {
    let n_t = game.n_targets();
    let poly = game.strategy_space().polytope();
    let mut best: Option<(f64, usize, DVector<f64>)> = None;

    for cand in 0..n_t {
        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let vars: Vec<_> = (0..n_t)
            .map(|i| lp.add_var(if i == cand { game.def_slope(i) } else { 0.0 }, (0.0, 1.0)))
            .collect();
        for r in 0..poly.rows() {
            let terms: Vec<_> = (0..n_t)
                .filter(|&j| poly.a()[(r, j)] != 0.0)
                .map(|j| (vars[j], poly.a()[(r, j)]))
                .collect();
            lp.add_constraint(&terms[..], ComparisonOp::Le, poly.b()[r]);
        }
        // U^a_other(x_other) − U^a_cand(x_cand) ≤ 0
        for other in (0..n_t).filter(|o| *o != cand) {
            lp.add_constraint(
                [(vars[other], game.att_slope(other)), (vars[cand], -game.att_slope(cand))],
                ComparisonOp::Le,
                game.att_reward[cand] - game.att_reward[other],
            );
        }
        let Ok(sol) = lp.solve() else { continue };
        let x = DVector::from_iterator(n_t, vars.iter().map(|v| sol[*v].clamp(0.0, 1.0)));
        let value = game.def_utility(cand, x[cand]);
        if best.as_ref().is_none_or(|(b, _, _)| value > *b + 1e-12) {
            best = Some((value, cand, x));
        }
    }

    let (def_utility, target, x) =
        best.ok_or_else(|| Error::solver("every candidate best-response LP was infeasible", f64::NAN))?;
    let att_utility = game.att_utility(target, x[target]);
    let strategy = CoverageStrategy::new(x, game.strategy_space())
        .map_err(|_| Error::solver("equilibrium LP returned an infeasible coverage", f64::NAN))?;
    Ok(SseSolution {
        strategy,
        target,
        def_utility,
        att_utility,
    })
}

/// JSON document for games over a budget-box strategy space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameDocument {
    pub n_targets: usize,
    pub horizon: usize,
    pub max_attacks: usize,
    pub att_reward: Vec<f64>,
    pub att_penalty: Vec<f64>,
    pub def_reward: Vec<f64>,
    pub def_penalty: Vec<f64>,
    pub budget: f64,
    #[serde(default)]
    pub covariance_r: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TryFrom<&GameInstance> for GameDocument {
    type Error = Error;

    fn try_from(game: &GameInstance) -> Result<Self> {
        let CanonicalForm::BudgetBox(budget) = game.strategy_space().canonical_form() else {
            return Err(Error::Parameter("only budget-box games have a JSON form".into()));
        };
        Ok(GameDocument {
            n_targets: game.n_targets(),
            horizon: game.horizon,
            max_attacks: game.max_attacks,
            att_reward: game.att_reward.iter().copied().collect(),
            att_penalty: game.att_penalty.iter().copied().collect(),
            def_reward: game.def_reward.iter().copied().collect(),
            def_penalty: game.def_penalty.iter().copied().collect(),
            budget,
            covariance_r: game.covariance_r,
            seed: game.seed,
        })
    }
}

impl TryFrom<GameDocument> for GameInstance {
    type Error = Error;

    fn try_from(doc: GameDocument) -> Result<Self> {
        if doc.att_reward.len() != doc.n_targets {
            return Err(Error::dim("attacker rewards", doc.n_targets, doc.att_reward.len()));
        }
        let space = StrategyPolytope::budget_box(doc.n_targets, doc.budget)?;
        let payoffs = Payoffs {
            att_reward: doc.att_reward,
            att_penalty: doc.att_penalty,
            def_reward: doc.def_reward,
            def_penalty: doc.def_penalty,
        };
        let mut game = GameInstance::new(payoffs, space, doc.max_attacks, doc.horizon)?;
        game.covariance_r = doc.covariance_r;
        game.seed = doc.seed;
        Ok(game)
    }
}

impl GameInstance {
    pub fn to_json(&self) -> Result<String> {
        let doc = GameDocument::try_from(self)?;
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Parameter(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GameDocument = serde_json::from_str(text).map_err(|e| Error::Parameter(e.to_string()))?;
        GameInstance::try_from(doc)
    }
}
