//! Euclidean projections onto polyhedral sets and their derivatives.
//!
//! Three feasible sets show up in the planner: the defender's coverage
//! polytope, the behavior-parameter box and the per-step attack capped
//! simplex. Each projection solves `min ½‖x − v‖² s.t. Ax ≤ b`; the squared
//! objective has identity Hessian, which keeps the implicit-function system
//! for `dx/dv` well posed.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Slack below which a constraint row counts as active.
pub const TOL_ACTIVE: f64 = 1e-7;
/// Dual value below which an active row is only weakly active.
pub const TOL_DUAL: f64 = 1e-9;
/// Polytope membership tolerance.
pub const TOL_FEAS: f64 = 1e-8;
/// Tikhonov shift applied to singular KKT systems.
pub const KKT_REGULARIZATION: f64 = 1e-10;

const TOL_VIOLATION: f64 = 1e-11;

/// Structural shape of a polytope, used to select closed-form projections.
#[derive(Debug, Clone, PartialEq)]
pub enum PolytopeForm {
    /// `{0 ≤ x_n ≤ 1, Σ x_n ≤ budget}`. Rows: `N` upper bounds, `N` lower
    /// bounds, then the budget row.
    BudgetBox { budget: f64 },
    /// `{lower ≤ x ≤ upper}`. Rows: upper bounds then lower bounds.
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    General,
}

/// A nonempty bounded polytope `{x : Ax ≤ b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
    form: PolytopeForm,
}

impl Polytope {
    /// Unit box intersected with a coverage budget.
    pub fn budget_box(n: usize, budget: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Construction("polytope needs at least one coordinate".into()));
        }
        if !(budget.is_finite() && budget >= 0.0) {
            return Err(Error::Construction(format!("budget must be finite and ≥ 0, got {budget}")));
        }
        let mut a = DMatrix::zeros(2 * n + 1, n);
        let mut b = DVector::zeros(2 * n + 1);
        for i in 0..n {
            a[(i, i)] = 1.0;
            b[i] = 1.0;
            a[(n + i, i)] = -1.0;
            a[(2 * n, i)] = 1.0;
        }
        b[2 * n] = budget;
        Ok(Polytope {
            a,
            b,
            form: PolytopeForm::BudgetBox { budget },
        })
    }

    /// Axis-aligned box. `lower == upper` in a coordinate pins it.
    pub fn boxed(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        let n = lower.len();
        if n == 0 || upper.len() != n {
            return Err(Error::dim("box bounds", n, upper.len()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(Error::Construction("box bounds must be finite with lower ≤ upper".into()));
        }
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(i, i)] = 1.0;
            b[i] = upper[i];
            a[(n + i, i)] = -1.0;
            b[n + i] = -lower[i];
        }
        Ok(Polytope {
            a,
            b,
            form: PolytopeForm::Box { lower, upper },
        })
    }

    /// `{z ≥ 0, Σz ≤ cap}` as a general polytope (rows: `−z_n ≤ 0`, then the cap).
    pub fn capped_simplex(n: usize, cap: f64) -> Result<Self> {
        let mut a = DMatrix::zeros(n + 1, n);
        let mut b = DVector::zeros(n + 1);
        for i in 0..n {
            a[(i, i)] = -1.0;
            a[(n, i)] = 1.0;
        }
        b[n] = cap;
        Polytope::general(a, b)
    }

    /// Arbitrary `{Ax ≤ b}`; checked for nonemptiness and boundedness.
    pub fn general(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::dim("constraint rows", a.nrows(), b.len()));
        }
        if a.ncols() == 0 {
            return Err(Error::Construction("polytope needs at least one coordinate".into()));
        }
        let poly = Polytope {
            a,
            b,
            form: PolytopeForm::General,
        };
        poly.check_nonempty_bounded()?;
        Ok(poly)
    }

    fn check_nonempty_bounded(&self) -> Result<()> {
        let n = self.dim();
        for i in 0..n {
            for dir in [OptimizationDirection::Maximize, OptimizationDirection::Minimize] {
                let mut lp = Problem::new(dir);
                let vars: Vec<_> = (0..n)
                    .map(|j| lp.add_var(if j == i { 1.0 } else { 0.0 }, (f64::NEG_INFINITY, f64::INFINITY)))
                    .collect();
                for r in 0..self.rows() {
                    let terms: Vec<_> = (0..n)
                        .filter(|&j| self.a[(r, j)] != 0.0)
                        .map(|j| (vars[j], self.a[(r, j)]))
                        .collect();
                    lp.add_constraint(&terms[..], ComparisonOp::Le, self.b[r]);
                }
                match lp.solve() {
                    // Free variables can come back with an infinite optimum instead of an error.
                    Ok(sol) if !sol.objective().is_finite() || sol.objective().abs() > 1e12 => {
                        return Err(Error::Construction(format!("polytope is unbounded along coordinate {i}")))
                    }
                    Ok(_) => {}
                    Err(minilp::Error::Infeasible) => {
                        return Err(Error::Construction("polytope is empty".into()))
                    }
                    Err(minilp::Error::Unbounded) => {
                        return Err(Error::Construction(format!("polytope is unbounded along coordinate {i}")))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn form(&self) -> &PolytopeForm {
        &self.form
    }

    /// `Ax − b`.
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim() && self.residual(x).iter().all(|r| *r <= tol)
    }

    /// A strictly interior point, if the polytope has nonempty interior.
    pub fn interior_point(&self) -> Option<DVector<f64>> {
        let n = self.dim();
        match &self.form {
            PolytopeForm::BudgetBox { budget } => {
                (*budget > 0.0).then(|| DVector::from_element(n, (budget / (2.0 * n as f64)).min(0.5)))
            }
            PolytopeForm::Box { lower, upper } => lower
                .iter()
                .zip(upper.iter())
                .all(|(l, u)| l < u)
                .then(|| (lower + upper) * 0.5),
            PolytopeForm::General => {
                // Maximize a common slack s: Ax + s·1 ≤ b, s ≤ 1.
                let mut lp = Problem::new(OptimizationDirection::Maximize);
                let vars: Vec<_> = (0..n)
                    .map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
                    .collect();
                let s = lp.add_var(1.0, (f64::NEG_INFINITY, 1.0));
                for r in 0..self.rows() {
                    let norm = self.a.row(r).norm().max(1e-300);
                    let mut terms: Vec<_> = (0..n).map(|j| (vars[j], self.a[(r, j)])).collect();
                    terms.push((s, norm));
                    lp.add_constraint(&terms[..], ComparisonOp::Le, self.b[r]);
                }
                let sol = lp.solve().ok()?;
                (sol[s] > 1e-9).then(|| DVector::from_iterator(n, vars.iter().map(|v| sol[*v])))
            }
        }
    }
}

/// Output of a Euclidean projection with its KKT certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub point: DVector<f64>,
    /// One multiplier per constraint row, all ≥ 0.
    pub duals: DVector<f64>,
    /// Rows with `|A·point − b| ≤ TOL_ACTIVE`.
    pub active: Vec<bool>,
    /// Some active row has a (numerically) zero multiplier.
    pub weakly_active: bool,
}

impl ProjectionResult {
    fn build(poly: &Polytope, point: DVector<f64>, duals: DVector<f64>) -> Self {
        let slack = poly.residual(&point);
        let active: Vec<bool> = slack.iter().map(|s| s.abs() <= TOL_ACTIVE).collect();
        let weakly_active = active.iter().zip(duals.iter()).any(|(a, d)| *a && *d <= TOL_DUAL);
        ProjectionResult {
            point,
            duals,
            active,
            weakly_active,
        }
    }

    /// Rows that are active with a strictly positive multiplier.
    pub fn strictly_active(&self) -> Vec<usize> {
        self.active
            .iter()
            .zip(self.duals.iter())
            .enumerate()
            .filter(|(_, (a, d))| **a && **d > TOL_DUAL)
            .map(|(j, _)| j)
            .collect()
    }

    /// Folds the strict active set into a running fingerprint.
    pub fn fingerprint(&self, seed: u64) -> u64 {
        let mut h = seed ^ 0xcbf2_9ce4_8422_2325;
        for j in self.strictly_active() {
            h = (h ^ (j as u64 + 1)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h ^ self.active.len() as u64).wrapping_mul(0x0000_0100_0000_01b3)
    }
}

/// Euclidean projection onto `{z ≥ 0, Σz ≤ cap}`.
pub fn project_capped_simplex(v: &DVector<f64>, cap: f64) -> DVector<f64> {
    let (x, _) = water_fill(v, f64::INFINITY, cap.max(0.0));
    x
}

/// Solves `Σ clamp(v_n − τ, 0, upper) = budget` for `τ ≥ 0` (τ = 0 when the
/// clamped point already fits) and returns the clamped point with `τ`.
fn water_fill(v: &DVector<f64>, upper: f64, budget: f64) -> (DVector<f64>, f64) {
    let fill = |tau: f64| -> f64 { v.iter().map(|vi| (vi - tau).clamp(0.0, upper)).sum() };
    if fill(0.0) <= budget {
        return (v.map(|vi| vi.clamp(0.0, upper)), 0.0);
    }
    let mut breaks: Vec<f64> = v
        .iter()
        .flat_map(|vi| [*vi, vi - upper])
        .filter(|t| t.is_finite() && *t > 0.0)
        .collect();
    breaks.push(0.0);
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();

    let mut tau = *breaks.last().unwrap();
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let g_lo = fill(lo);
        if fill(hi) <= budget {
            let mid = 0.5 * (lo + hi);
            let free = v.iter().filter(|vi| **vi - mid > 0.0 && **vi - mid < upper).count();
            tau = if free == 0 { hi } else { lo + (g_lo - budget) / free as f64 };
            tau = tau.clamp(lo, hi);
            break;
        }
    }
    (v.map(|vi| (vi - tau).clamp(0.0, upper)), tau)
}

/// Projects `v` onto `poly`, returning the point and KKT multipliers.
///
/// Budget boxes and plain boxes use closed forms; general polytopes go
/// through a dual active-set method specialized to identity Hessian.
pub fn project_polytope(v: &DVector<f64>, poly: &Polytope) -> Result<ProjectionResult> {
    let n = poly.dim();
    if v.len() != n {
        return Err(Error::dim("projection input", n, v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::solver("non-finite projection input", f64::NAN));
    }
    match poly.form() {
        PolytopeForm::BudgetBox { budget } => {
            let (x, tau) = water_fill(v, 1.0, *budget);
            let mut duals = DVector::zeros(2 * n + 1);
            for i in 0..n {
                let shifted = v[i] - tau;
                if shifted > 1.0 {
                    duals[i] = shifted - 1.0;
                } else if shifted < 0.0 {
                    duals[n + i] = -shifted;
                }
            }
            duals[2 * n] = tau;
            Ok(ProjectionResult::build(poly, x, duals))
        }
        PolytopeForm::Box { lower, upper } => {
            let mut duals = DVector::zeros(2 * n);
            let mut x = v.clone();
            for i in 0..n {
                if v[i] > upper[i] {
                    duals[i] = v[i] - upper[i];
                    x[i] = upper[i];
                } else if v[i] < lower[i] {
                    duals[n + i] = lower[i] - v[i];
                    x[i] = lower[i];
                }
            }
            Ok(ProjectionResult::build(poly, x, duals))
        }
        PolytopeForm::General => project_active_set(v, poly),
    }
}

/// Dual active-set (Goldfarb–Idnani) projection for arbitrary polytopes.
///
/// Starts from the unconstrained minimizer `v`, repeatedly adds the most
/// violated row and drops rows whose multipliers would turn negative. The
/// working set stays linearly independent throughout.
pub fn project_active_set(v: &DVector<f64>, poly: &Polytope) -> Result<ProjectionResult> {
    let n = poly.dim();
    let rows = poly.rows();
    let a = poly.a();
    let b = poly.b();
    let max_iter = 100 * rows.max(1);

    let mut x = v.clone();
    let mut working: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut iter = 0usize;

    loop {
        let slack = poly.residual(&x);
        let (p, viol) = slack
            .iter()
            .enumerate()
            .filter(|(j, _)| !working.contains(j))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (j, s)| if *s > acc.1 { (j, *s) } else { acc });
        if p == usize::MAX || viol <= TOL_VIOLATION * (1.0 + b[p].abs()) {
            break;
        }
        let a_p = a.row(p).transpose();
        let mut mult_plus = mult.clone();
        mult_plus.push(0.0);

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::solver("active-set projection did not converge", viol));
            }
            let q = working.len();
            // r = (A_W A_Wᵀ)⁻¹ A_W a_p ;  step z = −a_p + A_Wᵀ r
            let (r, z) = if q == 0 {
                (DVector::zeros(0), -&a_p)
            } else {
                let aw = DMatrix::from_fn(q, n, |i, j| a[(working[i], j)]);
                let gram = &aw * aw.transpose();
                let rhs = &aw * &a_p;
                let r = gram
                    .cholesky()
                    .map(|c| c.solve(&rhs))
                    .ok_or_else(|| Error::solver("working set lost independence", viol))?;
                let z = aw.transpose() * &r - &a_p;
                (r, z)
            };

            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > 1e-14 {
                    let ratio = mult_plus[j] / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(j);
                    }
                }
            }
            let s_p = b[p] - a_p.dot(&x);
            let t2 = if z.norm() > 1e-12 * (1.0 + a_p.norm()) {
                -s_p / z.dot(&(-&a_p))
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(Error::solver("projection target set is empty", viol));
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                x += &z * t;
            }
            for j in 0..q {
                mult_plus[j] -= t * r[j];
            }
            mult_plus[q] += t;

            if t2 <= t1 {
                working.push(p);
                mult = mult_plus;
                break;
            }
            let k = drop_at.expect("partial step implies a blocking multiplier");
            working.remove(k);
            mult_plus.remove(k);
        }
    }

    let mut duals = DVector::zeros(rows);
    for (j, m) in working.iter().zip(mult.iter()) {
        duals[*j] = m.max(0.0);
    }
    Ok(ProjectionResult::build(poly, x, duals))
}

/// `d point / d input` of a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionJacobian {
    pub matrix: DMatrix<f64>,
    /// Weakly active rows were dropped, or the active rows were rank
    /// deficient and the KKT system was regularized.
    pub degenerate: bool,
}

/// Jacobian of the projection map at `result`.
///
/// Weakly active rows are treated as inactive. Boxes and budget boxes use
/// the null-space closed form; general polytopes solve the KKT system.
pub fn projection_jacobian(result: &ProjectionResult, poly: &Polytope) -> ProjectionJacobian {
    let n = poly.dim();
    let strict = result.strictly_active();
    match poly.form() {
        PolytopeForm::Box { .. } => {
            let mut m = DMatrix::identity(n, n);
            for j in &strict {
                let i = j % n;
                m[(i, i)] = 0.0;
            }
            ProjectionJacobian {
                matrix: m,
                degenerate: result.weakly_active,
            }
        }
        PolytopeForm::BudgetBox { .. } => {
            let mut free = vec![true; n];
            let mut budget_active = false;
            for j in &strict {
                if *j == 2 * n {
                    budget_active = true;
                } else {
                    free[j % n] = false;
                }
            }
            let n_free = free.iter().filter(|f| **f).count();
            let mut m = DMatrix::zeros(n, n);
            for i in (0..n).filter(|i| free[*i]) {
                m[(i, i)] = 1.0;
                if budget_active {
                    for k in (0..n).filter(|k| free[*k]) {
                        m[(i, k)] -= 1.0 / n_free as f64;
                    }
                }
            }
            ProjectionJacobian {
                matrix: m,
                degenerate: result.weakly_active || (budget_active && n_free == 0),
            }
        }
        PolytopeForm::General => kkt_jacobian(result, poly),
    }
}

/// Implicit differentiation of the projection's KKT conditions.
///
/// Differentiating `x − v + Aᵀη = 0` and `η_j (A x − b)_j = 0` gives
/// `[[I, Aᵀ], [diag(η)A, diag(Ax − b)]] · [dx; dη] = [I; 0]`. Strictly active
/// rows are divided by `η_j` and inactive rows by their slack, which leaves
/// `A_j dx = 0` and `dη_j = 0` respectively.
pub fn kkt_jacobian(result: &ProjectionResult, poly: &Polytope) -> ProjectionJacobian {
    let n = poly.dim();
    let rows = poly.rows();
    let strict = result.strictly_active();
    let a_s = DMatrix::from_fn(strict.len(), n, |i, j| poly.a()[(strict[i], j)]);
    let rank_deficient = !strict.is_empty() && {
        let sv = a_s.clone().singular_values();
        let max = sv.max();
        sv.min() <= 1e-9 * max.max(1.0)
    };
    let reg = if rank_deficient { KKT_REGULARIZATION } else { 0.0 };

    let size = n + rows;
    let mut kkt = DMatrix::zeros(size, size);
    for i in 0..n {
        kkt[(i, i)] = 1.0;
    }
    for j in 0..rows {
        for i in 0..n {
            kkt[(i, n + j)] = poly.a()[(j, i)];
        }
        if strict.contains(&j) {
            for i in 0..n {
                kkt[(n + j, i)] = poly.a()[(j, i)];
            }
            kkt[(n + j, n + j)] = -reg;
        } else {
            kkt[(n + j, n + j)] = 1.0;
        }
    }
    let mut rhs = DMatrix::zeros(size, n);
    for i in 0..n {
        rhs[(i, i)] = 1.0;
    }
    let solved = kkt.lu().solve(&rhs);
    match solved {
        Some(sol) if sol.iter().all(|x| x.is_finite()) => ProjectionJacobian {
            matrix: sol.rows(0, n).into_owned(),
            degenerate: result.weakly_active || rank_deficient,
        },
        _ => null_space_jacobian(&a_s, n, true),
    }
}

/// `I − A_Sᵀ (A_S A_Sᵀ)⁺ A_S`.
pub fn null_space_jacobian(a_s: &DMatrix<f64>, n: usize, degenerate: bool) -> ProjectionJacobian {
    if a_s.nrows() == 0 {
        return ProjectionJacobian {
            matrix: DMatrix::identity(n, n),
            degenerate,
        };
    }
    let gram = a_s * a_s.transpose();
    let pinv = gram
        .pseudo_inverse(1e-12)
        .unwrap_or_else(|_| DMatrix::zeros(a_s.nrows(), a_s.nrows()));
    ProjectionJacobian {
        matrix: DMatrix::identity(n, n) - a_s.transpose() * pinv * a_s,
        degenerate,
    }
}
