use ssg_bench::experiment::{run_job, ExperimentConfig, Job, RunRecord, WORKERS_ENV};
use ssg_bench::report::{aggregate, emit_plotdata, mean_stderr, write_outputs, RUN_HEADER};
use ssg_bench::{run_matrix, ScenarioSpec};
use ssg_core::attacker::{nonmanipulative_baseline, PlannerConfig};
use ssg_core::behavior::ModelKind;
use ssg_core::defender::PatrolSolver;

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        target_counts: vec![3],
        horizons: vec![2],
        covariance_values: vec![-1.0, 0.0],
        games_per_r: 2,
        scenarios: vec![
            ScenarioSpec::manipulate(ModelKind::Qr, ModelKind::Qr),
            ScenarioSpec::manipulate(ModelKind::Suqr, ModelKind::Qr),
            ScenarioSpec::non_manipulate(),
        ],
        planner: PlannerConfig { n_outer_restarts: 2, outer_max_iters: 15, ..PlannerConfig::default() },
        ..ExperimentConfig::default()
    }
}

fn masked(records: &[RunRecord]) -> Vec<RunRecord> {
    records.iter().cloned().map(|r| RunRecord { runtime_sec: 0.0, ..r }).collect()
}

#[test]
fn batch_is_deterministic_and_ordered() {
    let cfg = small_config();
    std::env::set_var(WORKERS_ENV, "1");
    let a = run_matrix(&cfg).unwrap();
    std::env::set_var(WORKERS_ENV, "3");
    let b = run_matrix(&cfg).unwrap();
    assert_eq!(a.n_failed(), 0);
    // NaN-free, so plain equality is bitwise on every non-timing column.
    assert_eq!(masked(&a.records), masked(&b.records));
    let jobs = cfg.jobs();
    assert_eq!(a.records.len(), jobs.len());
    for (r, j) in a.records.iter().zip(&jobs) {
        assert_eq!((r.seed, r.scenario.as_str()), (j.seed, j.scenario.label.as_str()));
    }
}

#[test]
fn baseline_rows_match_the_library_and_zero_sum_rows_cancel() {
    let cfg = small_config();
    let table = run_matrix(&cfg).unwrap();
    for (r, job) in table.records.iter().zip(cfg.jobs()) {
        if job.scenario.is_baseline() {
            let (_, traj) = nonmanipulative_baseline(&job.game(&cfg).unwrap(), job.horizon).unwrap();
            assert_eq!(r.att_util_per_step, traj.att_per_step());
        }
        if r.covariance_r == -1.0 {
            assert_eq!(r.att_util_per_step, -r.def_util_per_step, "{r:?}");
        }
    }
}

#[test]
fn aggregate_counts_every_game_once() {
    let cfg = small_config();
    let table = run_matrix(&cfg).unwrap();
    let agg = aggregate(&table);
    assert_eq!(agg.len(), cfg.scenarios.len());
    for row in &agg {
        assert_eq!(row.count, cfg.games_per_r * cfg.covariance_values.len());
        let values: Vec<f64> = table
            .records
            .iter()
            .filter(|r| r.scenario == row.scenario)
            .map(|r| r.att_util_per_step)
            .collect();
        let (m, s) = mean_stderr(&values);
        assert_eq!((row.att_mean, row.att_stderr), (m, s));
    }

    let dir = tempfile::tempdir().unwrap();
    let files = write_outputs(&table, dir.path()).unwrap();
    let runs = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(runs.lines().next().unwrap(), RUN_HEADER.join(","));
    assert_eq!(runs.lines().count(), table.records.len() + 1);
}

#[test]
fn plot_means_match_hand_computation() {
    let rows: Vec<RunRecord> = [1.0, 2.0, 4.0, 8.0, 10.0]
        .iter()
        .enumerate()
        .map(|(i, &v)| RunRecord {
            n_targets: 4,
            horizon: 2,
            covariance_r: -0.5,
            seed: i as u64,
            scenario: "QRvsQR".into(),
            att_util_per_step: v,
            def_util_per_step: -v,
            runtime_sec: 60.0 * v,
            converged: true,
            error: String::new(),
        })
        .collect();
    let table = ssg_bench::ResultsTable { records: rows };
    let dir = tempfile::tempdir().unwrap();
    let scen = vec![ScenarioSpec::manipulate(ModelKind::Qr, ModelKind::Qr)];
    emit_plotdata(&table, &scen, dir.path()).unwrap();

    let att = std::fs::read_to_string(dir.path().join("attacker_utility_T2.csv")).unwrap();
    let fields: Vec<&str> = att.lines().nth(1).unwrap().split(',').collect();
    // mean 5, sample variance 60 / 4 = 15, stderr sqrt(15 / 5)
    assert_eq!(fields[..2], ["4", "QRvsQR"]);
    assert_eq!(fields[2].parse::<f64>().unwrap(), 5.0);
    assert!((fields[3].parse::<f64>().unwrap() - 3f64.sqrt()).abs() < 1e-12);
    let rt = std::fs::read_to_string(dir.path().join("runtime.csv")).unwrap();
    assert_eq!(rt.lines().nth(1).unwrap(), "4,2,5.0");

    let other = tempfile::tempdir().unwrap();
    emit_plotdata(&table, &[ScenarioSpec::non_manipulate()], other.path()).unwrap();
    let empty = std::fs::read_to_string(other.path().join("attacker_utility_T2.csv")).unwrap();
    assert_eq!(empty, "n_targets,scenario,mean,stderr\n");
}

#[test]
fn failed_runs_are_tagged_and_excluded_from_means() {
    let cfg = small_config();
    let bad = Job {
        n_targets: 3,
        horizon: 2,
        covariance_r: 3.0,
        seed: 1,
        scenario: ScenarioSpec::non_manipulate(),
    };
    let rec = run_job(&bad, &cfg);
    assert!(rec.failed() && rec.att_util_per_step.is_nan());
    let ok = run_job(&Job { covariance_r: -0.5, ..bad.clone() }, &cfg);
    assert!(!ok.failed());
    let table = ssg_bench::ResultsTable { records: vec![rec, ok.clone()] };
    let agg = aggregate(&table);
    assert_eq!((agg[0].count, agg[0].n_failed, agg[0].att_mean), (2, 1, ok.att_util_per_step));
}

#[test]
fn pgd_actual_defender_runs() {
    let cfg = ExperimentConfig {
        defender_solver: PatrolSolver::Pgd,
        covariance_values: vec![-0.5],
        games_per_r: 1,
        scenarios: vec![ScenarioSpec::manipulate(ModelKind::Sharp, ModelKind::Suqr)],
        ..small_config()
    };
    let table = run_matrix(&cfg).unwrap();
    assert_eq!(table.n_failed(), 0);
    assert!(table.records[0].att_util_per_step.is_finite());
}
