//! Acceptance gate: one pass/fail line per criterion.
//!
//! Criteria 7 and 8 are reported without failing the gate.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use ssg_bench::experiment::{ExperimentConfig, RunRecord};
use ssg_bench::{run_matrix, ScenarioSpec};
use ssg_core::attacker::{
    nonmanipulative_baseline, optimize_plan, random_plan, simulate_horizon, AttackPlan, DefenderSetup, PlannerConfig,
    SimConfig,
};
use ssg_core::behavior::{History, ModelKind, ParamSpace, ParamVector};
use ssg_core::defender::{PGDConfig, PatrolSolver};
use ssg_core::diffopt::{project_active_set, project_capped_simplex, project_polytope, Polytope};
use ssg_core::game::{generate_covariance_game, solve_sse};
use ssg_core::gradcheck::{
    check_loss_blocks, check_patrol_hypergradient, check_projection_jacobian, check_score_grads, check_theta_wrt_z,
    check_total_gradient, check_utility_grad,
};
use ssg_core::seeds;
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    /// Reported only.
    Info(bool),
}

struct Gate {
    failed: usize,
}

impl Gate {
    fn line(&mut self, id: u32, name: &str, verdict: Verdict, detail: String, start: Instant) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failed += 1;
                "FAIL"
            }
            Verdict::Info(true) => "PASS (reported)",
            Verdict::Info(false) => "FAIL (reported)",
        };
        println!("criterion {id} [{tag}] {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
    }
}

fn hard(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn interior_theta<R: Rng>(kind: ModelKind, rng: &mut R) -> ParamVector {
    let mut th = ParamSpace::default_for(kind).sample(rng).unwrap();
    if kind == ModelKind::Sharp {
        // Keep the weighting's exponent away from the clamp of its domain.
        th[3] = rng.gen_range(0.5..2.5);
        th[4] = rng.gen_range(0.5..2.5);
    }
    ParamVector::from_vector(kind, &th).unwrap()
}

fn gradient_suite(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = seeds::rng(1001);
    let mut worst = 0.0f64;
    let mut points = [0usize; 3];
    for (ki, kind) in ModelKind::ALL.into_iter().enumerate() {
        for i in 0..100 {
            let n = 2 + i % 4;
            let g = generate_covariance_game(n, rng.gen_range(-1.0..0.0), i as u64, 0.5).unwrap();
            let th = interior_theta(kind, &mut rng);
            let x = DVector::from_fn(n, |_, _| rng.gen_range(0.05..0.95));
            let xs = vec![x.clone(), DVector::from_fn(n, |_, _| rng.gen_range(0.05..0.95))];
            let zs: Vec<DVector<f64>> = (0..2).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(0.0..20.0))).collect();
            let h = History::new(&xs, &zs).unwrap();
            let mut reports = check_score_grads(kind, &g, i % n, x[i % n], &th, 1e-5).unwrap();
            reports.extend(check_utility_grad(&g, &x, &th, 1e-5).unwrap());
            reports.extend(check_loss_blocks(&h, &g, kind, &th, 1e-5).unwrap());
            for (_, r) in reports {
                worst = worst.max(r.rel_err);
            }
            points[ki] += 1;
        }
    }
    let ok = worst <= 1e-5 && points.iter().all(|&p| p >= 100) && start.elapsed().as_secs() < 60;
    gate.line(
        1,
        "gradient oracles",
        hard(ok),
        format!("{points:?} points per model (QR, SUQR, SHARP), max rel err {worst:.2e} (tol 1e-5)"),
        start,
    );
}

fn hypergradient_suite(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = seeds::rng(2002);
    let (mut stable, mut unstable, mut worst) = (0usize, Vec::new(), 0.0f64);
    let mut seed = 0u64;
    while stable < 20 && seed < 200 {
        let kind = ModelKind::ALL[(seed % 3) as usize];
        let n = 2 + (seed % 2) as usize;
        let horizon = 2 + ((seed / 2) % 2) as usize;
        let g = generate_covariance_game(n, -0.5, seed, 0.5).unwrap().with_horizon(horizon).unwrap();
        let plan = random_plan(horizon, n, 50, &mut rng);
        let sim = SimConfig { seed, ..SimConfig::default() };
        let setup = DefenderSetup::assumed(kind);
        let mut reports = vec![(
            "dx/dtheta",
            check_patrol_hypergradient(&g, &interior_theta(kind, &mut rng), &PGDConfig::patrol_default().with_seed(seed), 1e-4)
                .unwrap(),
        )];
        for tp in 0..horizon - 1 {
            reports.push(("dtheta/dz", check_theta_wrt_z(&g, &plan, &setup, &sim, horizon - 1, tp, 1e-3).unwrap()));
        }
        if reports.iter().all(|(_, r)| r.stable) {
            stable += 1;
            for (_, r) in &reports {
                worst = worst.max(r.rel_err);
            }
        } else {
            let which: Vec<&str> = reports.iter().filter(|(_, r)| !r.stable).map(|(w, _)| *w).collect();
            unstable.push(format!("seed {seed} {kind} N={n} T={horizon} {}", which.join("+")));
        }
        seed += 1;
    }
    for u in &unstable {
        println!("  excluded (active set changed under the probe): {u}");
    }
    let ok = stable >= 20 && worst <= 1e-3 && start.elapsed().as_secs() < 600;
    gate.line(
        2,
        "hypergradients",
        hard(ok),
        format!("{stable} stable instances, {} excluded, max rel err {worst:.2e} (tol 1e-3)", unstable.len()),
        start,
    );
}

fn total_gradient_suite(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = seeds::rng(3003);
    let (mut stable, mut excluded, mut worst) = (0usize, 0usize, 0.0f64);
    let mut seed = 0u64;
    while stable < 10 && seed < 100 {
        let kind = ModelKind::ALL[(seed % 3) as usize];
        let g = generate_covariance_game(3, -0.5, 100 + seed, 0.5).unwrap().with_horizon(2).unwrap();
        let plan = random_plan(2, 3, 50, &mut rng);
        let sim = SimConfig { seed, ..SimConfig::default() };
        let r = check_total_gradient(&g, &plan, &DefenderSetup::assumed(kind), &sim, 1e-3).unwrap();
        if r.stable {
            stable += 1;
            worst = worst.max(r.rel_err);
        } else {
            excluded += 1;
            println!("  excluded (active set changed under the probe): seed {seed} {kind}");
        }
        seed += 1;
    }
    let ok = stable >= 10 && worst <= 1e-3 && start.elapsed().as_secs() < 600;
    gate.line(
        3,
        "end-to-end dF/dz",
        hard(ok),
        format!("{stable} stable instances (N=3, T=2), {excluded} excluded, max rel err {worst:.2e} (tol 1e-3)"),
        start,
    );
}

fn projection_suite(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = seeds::rng(4004);
    let mut closed_form = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..8);
        let cap = rng.gen_range(0.0..10.0);
        let v = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..12.0));
        let qp = project_active_set(&v, &Polytope::capped_simplex(n, cap).unwrap()).unwrap();
        closed_form = closed_form.max((project_capped_simplex(&v, cap) - qp.point).amax());
    }
    let (mut idem, mut expand) = (0.0f64, 0.0f64);
    let (mut jac_worst, mut jac_points) = (0.0f64, 0usize);
    for i in 0..500 {
        let n = rng.gen_range(2..6);
        let poly = match i % 2 {
            0 => Polytope::budget_box(n, rng.gen_range(0.5..n as f64)).unwrap(),
            _ => Polytope::capped_simplex(n, rng.gen_range(0.5..5.0)).unwrap(),
        };
        let u = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..3.0));
        let w = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..3.0));
        let pu = project_polytope(&u, &poly).unwrap().point;
        let pw = project_polytope(&w, &poly).unwrap().point;
        idem = idem.max((project_polytope(&pu, &poly).unwrap().point - &pu).amax());
        expand = expand.max((&pu - &pw).norm() - (&u - &w).norm());
        let r = check_projection_jacobian(&u, &poly, 1e-6).unwrap();
        if r.stable {
            jac_points += 1;
            jac_worst = jac_worst.max(r.rel_err);
        }
    }
    let ok = closed_form <= 1e-8 && idem <= 1e-9 && expand <= 1e-9 && jac_worst <= 1e-4 && start.elapsed().as_secs() < 60;
    gate.line(
        4,
        "projections",
        hard(ok),
        format!(
            "closed form vs QP {closed_form:.1e} (tol 1e-8), idempotence {idem:.1e}, max expansion {expand:.1e}, \
             Jacobian rel err {jac_worst:.1e} at {jac_points} stable points (tol 1e-4)"
        ),
        start,
    );
}

/// One-sided paired t-test of `mean(d) > 0`; returns (mean, t, p).
fn paired_t(d: &[f64]) -> (f64, f64, f64) {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return (mean, f64::INFINITY.copysign(mean), if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
    (mean, t, p)
}

fn pick<'a>(rows: &'a [RunRecord], horizon: usize, scenario: &str) -> Vec<&'a RunRecord> {
    rows.iter().filter(|r| r.horizon == horizon && r.scenario == scenario).collect()
}

fn trend_suite(gate: &mut Gate) {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        target_counts: vec![8],
        horizons: vec![2, 4],
        covariance_values: vec![-1.0, -0.75, -0.5, -0.25, 0.0],
        games_per_r: 4,
        max_attacks: 50,
        resource_ratio: 0.5,
        base_seed: 5005,
        scenarios: vec![
            ScenarioSpec::manipulate(ModelKind::Qr, ModelKind::Qr),
            ScenarioSpec::non_manipulate(),
        ],
        defender_solver: PatrolSolver::InteriorAlt,
        ..ExperimentConfig::default()
    };
    let table = run_matrix(&cfg).unwrap();
    let failed = table.n_failed();
    for r in table.records.iter().filter(|r| r.failed()) {
        println!("  run failed: seed {} {} T={}: {}", r.seed, r.scenario, r.horizon, r.error);
    }
    let manip = pick(&table.records, 2, "QRvsQR");
    let base = pick(&table.records, 2, "nonManipulate");
    assert!(manip.iter().zip(&base).all(|(m, b)| m.seed == b.seed));
    let att_gap: Vec<f64> = manip.iter().zip(&base).map(|(m, b)| m.att_util_per_step - b.att_util_per_step).collect();
    let def_gap: Vec<f64> = manip.iter().zip(&base).map(|(m, b)| b.def_util_per_step - m.def_util_per_step).collect();
    let mean = |v: &[&RunRecord], att: bool| {
        v.iter().map(|r| if att { r.att_util_per_step } else { r.def_util_per_step }).sum::<f64>() / v.len() as f64
    };
    let elapsed_batch = start;

    let (gap, t, p) = paired_t(&att_gap);
    gate.line(
        5,
        "manipulation gain (N=8, T=2, QRvsQR)",
        hard(failed == 0 && att_gap.len() == 20 && gap > 0.0 && p < 0.05),
        format!(
            "attacker/step {:.3} vs nonManipulate {:.3}, paired gap {gap:.3}, t = {t:.2}, one-sided p = {p:.2e} over {} games",
            mean(&manip, true),
            mean(&base, true),
            att_gap.len()
        ),
        elapsed_batch,
    );

    // Diagnostic: the baseline attacker must spend all K attacks while a
    // planned attacker may hold back. Compare against a baseline that
    // abstains whenever its equilibrium payoff is negative.
    let empty = manip.iter().filter(|r| r.att_util_per_step == 0.0).count();
    let abstain_gap: Vec<f64> =
        manip.iter().zip(&base).map(|(m, b)| m.att_util_per_step - b.att_util_per_step.max(0.0)).collect();
    let (ag, at, ap) = paired_t(&abstain_gap);
    println!(
        "  note: {empty} of {} optimized plans earn exactly 0; gap over an abstaining baseline {ag:.3}, t = {at:.2}, p = {ap:.2e}",
        manip.len()
    );

    let (dgap, dt, dp) = paired_t(&def_gap);
    gate.line(
        6,
        "defender loss (same batch)",
        hard(failed == 0 && dgap > 0.0 && dp < 0.05),
        format!(
            "defender/step {:.3} vs nonManipulate {:.3}, paired loss {dgap:.3}, t = {dt:.2}, one-sided p = {dp:.2e}",
            mean(&manip, false),
            mean(&base, false)
        ),
        elapsed_batch,
    );

    let long = pick(&table.records, 4, "QRvsQR");
    let (m2, m4) = (mean(&manip, true), mean(&long, true));
    gate.line(
        7,
        "horizon dilution",
        Verdict::Info(m4 <= m2),
        format!("attacker/step T=4 {m4:.3} vs T=2 {m2:.3}"),
        elapsed_batch,
    );
}

fn runtime_suite(gate: &mut Gate) {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        target_counts: vec![4, 8, 12],
        horizons: vec![2],
        covariance_values: vec![-1.0, -0.75, -0.5, -0.25, 0.0],
        games_per_r: 1,
        base_seed: 6006,
        scenarios: vec![ScenarioSpec::manipulate(ModelKind::Qr, ModelKind::Qr)],
        ..ExperimentConfig::default()
    };
    let table = run_matrix(&cfg).unwrap();
    let totals: Vec<(f64, f64)> = cfg
        .target_counts
        .iter()
        .map(|&n| {
            let t: f64 = table.records.iter().filter(|r| r.n_targets == n).map(|r| r.runtime_sec).sum();
            (n as f64, t)
        })
        .collect();
    let k = totals.len() as f64;
    let mx = totals.iter().map(|p| p.0).sum::<f64>() / k;
    let my = totals.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = totals.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = totals.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let syy: f64 = totals.iter().map(|(_, y)| (y - my).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    let shown: Vec<String> = totals.iter().map(|(n, t)| format!("N={n}: {t:.1}s")).collect();
    gate.line(
        8,
        "runtime scaling",
        Verdict::Info(r2 >= 0.8),
        format!("total planner time {}, linear fit R^2 = {r2:.3} (target 0.8)", shown.join(", ")),
        start,
    );
}

fn baseline_identities(gate: &mut Gate) {
    let start = Instant::now();
    let mut problems = Vec::new();

    // Zero-sum games, for the baseline and for a planned trajectory.
    for seed in 0..5 {
        let g = generate_covariance_game(5, -1.0, seed, 0.5).unwrap().with_horizon(2).unwrap();
        let (_, base) = nonmanipulative_baseline(&g, 2).unwrap();
        let planner = PlannerConfig { n_outer_restarts: 2, outer_max_iters: 20, ..PlannerConfig::default() };
        let res = optimize_plan(&g, ModelKind::Qr, &DefenderSetup::new(ModelKind::Qr, PatrolSolver::InteriorAlt), &planner)
            .unwrap();
        for traj in [&base, &res.actual] {
            if traj.att_utilities.iter().zip(&traj.def_utilities).any(|(a, d)| *a != -*d) {
                problems.push(format!("zero-sum identity broken on seed {seed}"));
            }
        }
    }

    // One step: all attacks on the best response to the equilibrium.
    for seed in 0..5 {
        let g = generate_covariance_game(6, -0.3, seed, 0.5).unwrap().with_horizon(1).unwrap();
        let planner = PlannerConfig { n_outer_restarts: 2, ..PlannerConfig::default() };
        let res = optimize_plan(&g, ModelKind::Suqr, &DefenderSetup::assumed(ModelKind::Suqr), &planner).unwrap();
        let u = g.att_utilities(solve_sse(&g).unwrap().strategy.as_vector());
        let best = u.max();
        let expected = if best > 0.0 { 50.0 * best } else { 0.0 };
        if (res.believed.total_utility - expected).abs() > 1e-9 * expected.abs().max(1.0) {
            problems.push(format!("T=1 plan misses the myopic optimum on seed {seed}"));
        }
    }

    // SHARP with identity weighting against SUQR on the same seeds.
    let (lo, hi) = ModelKind::Suqr.default_box();
    let pinned = DefenderSetup {
        model: ModelKind::Sharp,
        solver: PatrolSolver::Pgd,
        space: ParamSpace::boxed(ModelKind::Sharp, [lo.clone(), vec![1.0, 1.0]].concat(), [hi, vec![1.0, 1.0]].concat())
            .unwrap(),
    };
    let mut rng = seeds::rng(9009);
    for seed in 0..5 {
        let g = generate_covariance_game(4, -0.5, seed, 0.5).unwrap().with_horizon(3).unwrap();
        let plan: AttackPlan = random_plan(3, 4, 50, &mut rng);
        let sim = SimConfig { seed, ..SimConfig::default() };
        let a = simulate_horizon(&g, &plan, &DefenderSetup::assumed(ModelKind::Suqr), &sim, false).unwrap();
        let b = simulate_horizon(&g, &plan, &pinned, &sim, false).unwrap();
        if a.strategies != b.strategies || a.total_utility != b.total_utility {
            problems.push(format!("SHARP(1,1) differs from SUQR on seed {seed}"));
        }
    }
    let detail = if problems.is_empty() {
        "zero-sum att = -def (baseline and planned), T=1 myopic optimum, SHARP(1,1) = SUQR on 5 games each".to_string()
    } else {
        problems.join("; ")
    };
    gate.line(9, "baseline identities", hard(problems.is_empty()), detail, start);
}

fn main() -> ExitCode {
    // The test harness passes its own flags; this target takes none.
    let mut gate = Gate { failed: 0 };
    gradient_suite(&mut gate);
    hypergradient_suite(&mut gate);
    total_gradient_suite(&mut gate);
    projection_suite(&mut gate);
    trend_suite(&mut gate);
    runtime_suite(&mut gate);
    baseline_identities(&mut gate);
    if gate.failed == 0 {
        println!("acceptance: all hard criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} hard criteria failed", gate.failed);
        ExitCode::FAILURE
    }
}
