use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use turnpike::harness::{self, ExperimentConfig, Mode};
use turnpike::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_CERTIFICATE: u8 = 3;

#[derive(Parser)]
#[command(name = "turnpike", version, about = "Run ensemble control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured mode once (uncontrolled, cheap or optimal).
    Simulate(RunArgs),
    /// Solve the optimal control problem and certify it.
    Solve(RunArgs),
    /// Run every value of the `[sweep]` section.
    Sweep(RunArgs),
    /// Solve and run all certificate checks; exit 3 if any fails.
    Verify(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep worker threads; overrides `run.workers`.
    #[arg(long)]
    workers: Option<usize>,
    /// `section.key=value`, may be repeated.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self, forced_mode: Option<Mode>) -> Result<ExperimentConfig, Error> {
        let mut overrides = Vec::new();
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                field: o.clone(),
                message: "override must be KEY=VALUE".into(),
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(mode) = forced_mode {
            let name = match mode {
                Mode::Uncontrolled => "uncontrolled",
                Mode::Cheap => "cheap",
                Mode::Optimal => "optimal",
            };
            overrides.push(("run.mode".into(), format!("\"{name}\"")));
        }
        if let Some(seed) = self.seed {
            overrides.push(("run.seed".into(), seed.to_string()));
        }
        if let Some(w) = self.workers {
            overrides.push(("run.workers".into(), w.to_string()));
        }
        if let Some(out) = &self.out {
            overrides.push((
                "run.output_dir".into(),
                toml::Value::String(out.display().to_string()).to_string(),
            ));
        }
        harness::load_config_with_overrides(&self.config, &overrides)
    }
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } | Error::NotConverged(_) => EXIT_SOLVER,
        _ => EXIT_VALIDATION,
    }
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    if let Error::Divergence { controls, .. } = &err {
        eprintln!("last control iterate has {} entries", controls.len());
    }
    ExitCode::from(exit_for(&err))
}

fn report_exit(report: &harness::RunReport) -> ExitCode {
    let s = &report.summary;
    println!(
        "mode={:?} N={} M={} h={} J={:.12e} L_N(final)={:.6e}",
        s.mode, s.n_agents, s.m_steps, s.h, s.cost, s.final_lyapunov
    );
    if let Some(fit) = &s.decay_fit {
        println!("decay ratio {:.12} (R^2 {:.6})", fit.ratio, fit.r_squared);
    }
    if let Some(sol) = &s.solver {
        println!(
            "solver: {} iterations, |grad|/h = {:.3e}, converged = {}",
            sol.iterations, sol.gradient_norm, sol.converged
        );
        if !sol.converged {
            eprintln!("error: solver did not reach the gradient tolerance");
            return ExitCode::from(EXIT_SOLVER);
        }
    }
    if let Some(checks) = &report.checks {
        println!(
            "cheap-control bound: v={:.6e} <= {:.6e}: {}",
            checks.cheap_control.value, checks.cheap_control.bound, checks.cheap_control.passed
        );
        if let Some(c) = &checks.certificate {
            println!(
                "turnpike tail sum {:.6e} <= {:.6e}, dissipativity violations {}: {}",
                c.tail_sum, c.bound, c.dissipativity_violations, c.passed
            );
        }
        if let Some(u) = &checks.uniformity {
            println!("constant uniformity in h: {}", u.passed);
        }
        if !checks.passed() {
            return ExitCode::from(EXIT_CERTIFICATE);
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(args) => match args
            .load(None)
            .and_then(|c| harness::run_experiment(&c, false))
        {
            Ok(r) => report_exit(&r),
            Err(e) => fail(e),
        },
        Command::Solve(args) => match args
            .load(Some(Mode::Optimal))
            .and_then(|c| harness::run_experiment(&c, false))
        {
            Ok(r) => report_exit(&r),
            Err(e) => fail(e),
        },
        Command::Verify(args) => match args
            .load(Some(Mode::Optimal))
            .and_then(|c| harness::run_experiment(&c, true))
        {
            Ok(r) => report_exit(&r),
            Err(e) => fail(e),
        },
        Command::Sweep(args) => {
            let outcome = match args.load(None).and_then(|c| harness::run_sweep(&c, false)) {
                Ok(o) => o,
                Err(e) => return fail(e),
            };
            for row in &outcome.rows {
                match &row.error {
                    None => println!(
                        "{}={} J={:.6e} ok",
                        row.parameter.name(),
                        row.value,
                        row.cost.unwrap_or(f64::NAN)
                    ),
                    Some(e) => println!("{}={} failed: {e}", row.parameter.name(), row.value),
                }
            }
            if outcome.failures() > 0 {
                ExitCode::from(EXIT_SOLVER)
            } else if outcome.rows.iter().any(|r| r.passed == Some(false)) {
                ExitCode::from(EXIT_CERTIFICATE)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
