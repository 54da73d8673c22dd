use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;
use ssg_bench::report::{aggregate, emit_plotdata, summarize, write_outputs};
use ssg_bench::{run_matrix, ExperimentConfig};
use ssg_core::attacker::{nonmanipulative_baseline, optimize_plan, random_plan, DefenderSetup, PlannerConfig, SimConfig};
use ssg_core::behavior::{ModelKind, ParamSpace, ParamVector};
use ssg_core::defender::{PGDConfig, PatrolSolver};
use ssg_core::game::{generate_covariance_game, GameInstance};
use ssg_core::gradcheck::{check_patrol_hypergradient, check_total_gradient};
use ssg_core::seeds;

#[derive(Parser)]
#[command(version, about = "Manipulative attack planning experiments for repeated security games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment batch and write CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Equilibrium baseline of one game.
    Baseline {
        #[arg(long)]
        game: PathBuf,
        /// Defaults to the game's horizon.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Finite-difference checks of the hypergradients on one game.
    Gradcheck {
        #[arg(long)]
        game: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plan attacks against one defender.
    Plan {
        #[arg(long)]
        game: PathBuf,
        /// Model the attacker assumes (QR, SUQR, SHARP).
        #[arg(long)]
        attacker: ModelKind,
        /// Model the defender actually learns.
        #[arg(long)]
        defender: ModelKind,
        /// Patrol solver of the actual defender (PGD or InteriorAlt).
        #[arg(long, default_value = "InteriorAlt")]
        solver: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a random covariance game as JSON.
    Generate {
        #[arg(long)]
        targets: usize,
        #[arg(long, allow_negative_numbers = true)]
        covariance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 2)]
        horizon: usize,
        #[arg(long, default_value_t = 50)]
        attacks: usize,
    },
}

fn load_game(path: &PathBuf) -> anyhow::Result<GameInstance> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(GameInstance::from_json(&text)?)
}

fn parse_solver(s: &str) -> anyhow::Result<PatrolSolver> {
    match s.to_ascii_lowercase().as_str() {
        "pgd" => Ok(PatrolSolver::Pgd),
        "interioralt" | "interior" => Ok(PatrolSolver::InteriorAlt),
        _ => anyhow::bail!("unknown patrol solver '{s}'"),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, output_dir } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = ExperimentConfig::from_json(&text)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let table = run_matrix(&cfg)?;
            let mut files = write_outputs(&table, &cfg.output_dir)?;
            files.extend(emit_plotdata(&table, &cfg.scenarios, &cfg.output_dir.join("plotdata"))?);
            summarize(&aggregate(&table), &mut std::io::stdout())?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            for r in table.records.iter().filter(|r| r.failed()) {
                eprintln!("run failed: N={} T={} r={} seed={} {}: {}", r.n_targets, r.horizon, r.covariance_r, r.seed, r.scenario, r.error);
            }
            Ok(table.n_failed() == 0)
        }
        Command::Baseline { game, horizon } => {
            let game = load_game(&game)?;
            let (plan, traj) = nonmanipulative_baseline(&game, horizon.unwrap_or(game.horizon()))?;
            let out = json!({
                "plan": plan,
                "strategy": traj.strategies[0].iter().collect::<Vec<_>>(),
                "att_util_per_step": traj.att_per_step(),
                "def_util_per_step": traj.def_per_step(),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(true)
        }
        Command::Gradcheck { game, eps, tol, seed } => {
            let game = load_game(&game)?;
            let mut ok = true;
            let mut rng = seeds::rng(seed);
            let plan = random_plan(game.horizon(), game.n_targets(), game.max_attacks(), &mut rng);
            let sim = SimConfig { seed, ..SimConfig::default() };
            for kind in ModelKind::ALL {
                let theta = ParamVector::from_vector(kind, &ParamSpace::default_for(kind).sample(&mut rng)?)?;
                let patrol = check_patrol_hypergradient(&game, &theta, &PGDConfig::patrol_default().with_seed(seed), eps.min(1e-4))?;
                let total = check_total_gradient(&game, &plan, &DefenderSetup::assumed(kind), &sim, eps)?;
                for (name, r) in [("dx/dtheta", patrol), ("dF/dz", total)] {
                    let verdict = match (r.stable, r.passes(tol)) {
                        (false, _) => "unstable",
                        (true, true) => "ok",
                        (true, false) => {
                            ok = false;
                            "FAIL"
                        }
                    };
                    println!("{kind:<5} {name:<9} rel_err {:.3e} {verdict}", r.rel_err);
                }
            }
            Ok(ok)
        }
        Command::Plan { game, attacker, defender, solver, seed } => {
            let game = load_game(&game)?;
            let cfg = PlannerConfig {
                seed,
                sim: SimConfig { seed, ..SimConfig::default() },
                ..PlannerConfig::default()
            };
            let setup = DefenderSetup::new(defender, parse_solver(&solver)?);
            let res = optimize_plan(&game, attacker, &setup, &cfg)?;
            let (_, base) = nonmanipulative_baseline(&game, game.horizon())?;
            let out = json!({
                "scenario": format!("{attacker}vs{defender}"),
                "plan": res.rounded,
                "believed_att_util_per_step": res.believed.att_per_step(),
                "att_util_per_step": res.actual.att_per_step(),
                "def_util_per_step": res.actual.def_per_step(),
                "baseline_att_util_per_step": base.att_per_step(),
                "baseline_def_util_per_step": base.def_per_step(),
                "best_restart": res.best_restart,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(true)
        }
        Command::Generate { targets, covariance, seed, ratio, horizon, attacks } => {
            let game = generate_covariance_game(targets, covariance, seed, ratio)?
                .with_horizon(horizon)?
                .with_max_attacks(attacks);
            println!("{}", game.to_json()?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
