use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vmpt::experiment::{
    format_table, run_experiment, run_single, write_nodal_csv, write_results_csv, write_run_outputs, write_vtk,
    ExperimentSpec, RunSpec,
};
use vmpt::metrics::MetricKind;
use vmpt::phasefield::InitialGuess;
use vmpt::solver::{trace_violations, SolverTrace};

/// Variable-metric projection-type solver for two-phase mean-compliance
/// topology optimization.
#[derive(Parser)]
#[command(name = "vmpt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one cantilever problem and write trace and fields.
    Solve(Overrides),
    /// Run every job of a config file and write `results.csv`.
    Sweep(Overrides),
    /// Check the invariants of a written `trace.csv`.
    VerifyTrace {
        trace: PathBuf,
        /// Step scale the run started with; bounds are 10⁻⁶λ₀ and 10⁶λ₀.
        #[arg(long)]
        lambda0: Option<f64>,
        #[arg(long)]
        lambda_min: Option<f64>,
        #[arg(long)]
        lambda_max: Option<f64>,
    },
    /// Solve and export only `final.vtk` and `final.csv`.
    ExportFields(Overrides),
}

/// Flags override values from `--config`.
#[derive(Args, Clone)]
struct Overrides {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// l2 | h1 | scaled_h1 | second_order | lbfgs
    #[arg(long)]
    metric: Option<MetricKind>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// uniform | random
    #[arg(long, value_parser = parse_init)]
    init: Option<InitialGuess>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Abort on the first invariant violation.
    #[arg(long)]
    strict_invariants: bool,
    /// Write zero seconds so output files are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
    /// Run sweep jobs one after another.
    #[arg(long)]
    serial: bool,
}

fn parse_init(s: &str) -> std::result::Result<InitialGuess, String> {
    match s {
        "uniform" => Ok(InitialGuess::Uniform),
        "random" => Ok(InitialGuess::Random),
        _ => Err(format!("unknown initial guess `{s}` (expected uniform|random)")),
    }
}

impl Overrides {
    fn experiment(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::default(),
        };
        apply(&mut spec.defaults, self);
        if let Some(out) = &self.out {
            spec.out = out.clone();
        }
        if self.no_timing {
            spec.timing = false;
        }
        if self.serial {
            spec.parallel = false;
        }
        Ok(spec)
    }

    /// The single run described by the config defaults plus flags.
    fn single(&self) -> Result<(RunSpec, PathBuf, bool)> {
        let spec = self.experiment()?;
        let mut run = match spec.expand()?.into_iter().next() {
            Some(r) if self.config.is_some() => r,
            _ => spec.defaults.clone(),
        };
        apply(&mut run, self);
        Ok((run, spec.out, spec.timing))
    }
}

fn apply(run: &mut RunSpec, o: &Overrides) {
    if let Some(v) = o.metric {
        run.metric = v;
    }
    if let Some(v) = o.h {
        run.h = v;
    }
    if let Some(v) = o.eps {
        run.epsilon = v;
    }
    if let Some(v) = o.gamma {
        run.gamma = v;
    }
    if let Some(v) = o.tol {
        run.tol = v;
    }
    if let Some(v) = o.seed {
        run.seed = v;
    }
    if let Some(v) = o.init {
        run.init = v;
    }
    if let Some(v) = o.k_max {
        run.k_max = v;
    }
    if o.strict_invariants {
        run.strict_invariants = true;
    }
}

fn main() -> Result<()> {
    faer::set_global_parallelism(faer::Par::Seq);
    let cli = Cli::parse();
    match cli.command {
        Command::Solve(o) => {
            let (run, out, timing) = o.single()?;
            let outcome = run_single(&run, timing).context("solve failed")?;
            write_run_outputs(&out, &outcome)?;
            let rows = vec![outcome.row];
            write_results_csv(&rows, BufWriter::new(fs::File::create(out.join("results.csv"))?))?;
            print!("{}", format_table(&rows));
            if outcome.trace.descent_violations > 0 {
                eprintln!("warning: {} descent-inequality violations", outcome.trace.descent_violations);
            }
        }
        Command::Sweep(o) => {
            let spec = o.experiment()?;
            if o.config.is_none() {
                bail!("sweep needs --config");
            }
            let rows = run_experiment(&spec)?;
            print!("{}", format_table(&rows));
        }
        Command::VerifyTrace { trace, lambda0, lambda_min, lambda_max } => {
            let file = fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
            let rows = SolverTrace::read_csv_rows(BufReader::new(file))?;
            let l0 = lambda0.or_else(|| rows.first().map(|r| r.lambda)).unwrap_or(1.0);
            let lo = lambda_min.unwrap_or(1e-6 * l0);
            let hi = lambda_max.unwrap_or(1e6 * l0);
            let problems = trace_violations(&rows, lo, hi);
            if problems.is_empty() {
                println!("ok: {} rows, no invariant violations", rows.len());
            } else {
                for p in &problems {
                    println!("{p}");
                }
                bail!("{} invariant violations", problems.len());
            }
        }
        Command::ExportFields(o) => {
            let (run, out, timing) = o.single()?;
            let outcome = run_single(&run, timing).context("solve failed")?;
            fs::create_dir_all(&out)?;
            let c = outcome.problem.concentration(&outcome.phi);
            let mesh = outcome.problem.mesh();
            write_vtk(mesh, &c, &outcome.displacement, BufWriter::new(fs::File::create(out.join("final.vtk"))?))?;
            write_nodal_csv(mesh, &c, &outcome.displacement, BufWriter::new(fs::File::create(out.join("final.csv"))?))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
