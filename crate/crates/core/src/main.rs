use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use safe_lsoc::harness::{self, export, export_sweep, margin_sweep, run_component, run_generalization, run_scenario, validate, RunMode, RunResult};
use safe_lsoc::scenarios::{bundled_names, load_scenario, Scenario};

#[derive(Parser)]
#[command(name = "safe-lsoc", version, about = "Safe path-integral control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Filtered,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<RunMode> {
        match self {
            ModeArg::Baseline => vec![RunMode::Baseline],
            ModeArg::Filtered => vec![RunMode::Filtered],
            ModeArg::Both => vec![RunMode::Baseline, RunMode::Filtered],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// List the bundled scenarios.
    List,
    /// Run a scenario according to its task mode.
    Run {
        /// Bundled scenario name or path to a scenario file.
        scenario: String,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        /// Comma-separated seeds; defaults to the scenario's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run each component task and then the composite task.
    Compose {
        scenario: String,
        #[arg(long, value_enum, default_value = "filtered")]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Minimum obstacle distance as a function of the safety margin.
    Sweep {
        scenario: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2")]
        margins: Vec<f64>,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check the estimators and the filter against brute-force oracles.
    Validate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

fn load(name: &str) -> Result<Scenario, String> {
    if bundled_names().contains(&name) {
        Scenario::bundled(name).map_err(|e| e.to_string())
    } else {
        load_scenario(name).map_err(|e| format!("{name}: {e}"))
    }
}

fn seeds_or_default(seeds: Vec<u64>, scenario: &Scenario) -> Vec<u64> {
    if seeds.is_empty() {
        scenario.file.sim.seeds.clone()
    } else {
        seeds
    }
}

fn report(r: &RunResult, out: &std::path::Path) -> Result<bool, String> {
    let files = export(r, out).map_err(|e| e.to_string())?;
    let errors: Vec<String> = r.metrics.terminal_error.iter().map(|e| format!("{e:.2}")).collect();
    let dmin: Vec<String> = r.metrics.min_center_distance.iter().flatten().map(|d| format!("{d:.2}")).collect();
    println!(
        "{} {} {} seed {}: steps {} terminal error [{}] min obstacle distance [{}] violations {} filter activations {} degenerate {} wall {:.1}s",
        r.scenario,
        r.task,
        r.mode.as_str(),
        r.seed,
        r.metrics.steps,
        errors.join(", "),
        dmin.join(", "),
        r.metrics.safety_violations,
        r.metrics.filter_activations,
        r.degenerate_steps,
        r.wall_time
    );
    if let Some(h) = &r.halted {
        eprintln!("halted: {h}");
    }
    eprintln!("wrote {}", files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>().join(", "));
    Ok(r.is_halted())
}

fn run(cli: Cli) -> Result<u8, String> {
    harness::configure_threads();
    let mut infeasible = false;
    match cli.command {
        Command::List => {
            for name in bundled_names() {
                println!("{name}");
            }
        }
        Command::Run { scenario, mode, seeds, out } => {
            let s = load(&scenario)?;
            for seed in seeds_or_default(seeds, &s) {
                for m in mode.modes() {
                    for r in run_scenario(&s, m, seed).map_err(|e| e.to_string())? {
                        infeasible |= report(&r, &out)?;
                    }
                }
            }
        }
        Command::Compose { scenario, mode, seeds, out } => {
            let s = load(&scenario)?;
            for seed in seeds_or_default(seeds, &s) {
                for m in mode.modes() {
                    for f in 0..s.file.task.components.len() {
                        infeasible |= report(&run_component(&s, f, m, seed).map_err(|e| e.to_string())?, &out)?;
                    }
                    infeasible |= report(&run_generalization(&s, m, seed).map_err(|e| e.to_string())?, &out)?;
                }
            }
        }
        Command::Sweep { scenario, margins, mode, seeds, out } => {
            let s = load(&scenario)?;
            let seeds = seeds_or_default(seeds, &s);
            let rows = margin_sweep(&s, &margins, &seeds, &mode.modes()).map_err(|e| e.to_string())?;
            for r in &rows {
                println!(
                    "margin {} {} obstacle {}: min {:.3} mean {:.3} max {:.3} threshold {:.3} below {} of {}",
                    r.margin,
                    r.mode.as_str(),
                    r.obstacle,
                    r.min,
                    r.mean,
                    r.max,
                    r.threshold,
                    r.below_threshold,
                    r.runs
                );
                infeasible |= r.halted > 0;
            }
            let path = export_sweep(&rows, s.name(), &out).map_err(|e| e.to_string())?;
            eprintln!("wrote {}", path.display());
        }
        Command::Validate { seed } => {
            let outcomes = validate::run_all(seed);
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(EXIT_VALIDATION);
            }
        }
    }
    Ok(if infeasible { EXIT_INFEASIBLE } else { 0 })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
