use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dlr_core::bench::{
    generate_batch, run_experiment, summarize_file, trace_run, ExperimentConfig, Regime, RegimeName,
};
use dlr_core::inference::{Algorithm, RunConfig, Schedule};
use dlr_core::phase::{phase_table, write_phase_csv, CriticalSearchConfig, PHASE_ALGORITHMS};
use dlr_core::sampling::ChainConfig;
use dlr_core::ExecMode;

#[derive(Parser)]
#[command(name = "dlr", version, about = "Reduced-DLR approximate inference experiments")]
struct Cli {
    /// Run work items one at a time instead of in parallel.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a batch of random torus instances and a manifest.
    Gen(GenArgs),
    /// Run algorithms over a manifest and append result rows to a CSV.
    Run(RunArgs),
    /// Summarize a result CSV into JSON plus BP scatter files.
    Summarize(SummarizeArgs),
    /// Record the per-iteration WSKL and residual of one run.
    Trace(TraceArgs),
    /// Critical temperatures of the homogeneous Ising model.
    Phase(PhaseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Easy,
    Hard,
    Custom,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    regime: RegimeArg,
    #[arg(long, default_value_t = Regime::DEFAULT_INSTANCES)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Custom regime only.
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    #[arg(long)]
    var_theta: Option<f64>,
    #[arg(long)]
    var_phi: Option<f64>,
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0.0)]
    damping: f64,
    /// Gauss–Seidel updates (FN, MF and MF2 only).
    #[arg(long)]
    gauss_seidel: bool,
}

impl SolverArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            tolerance: self.tol,
            max_iterations: self.max_iter,
            damping: self.damping,
            schedule: if self.gauss_seidel {
                Schedule::Sequential
            } else {
                Schedule::Parallel
            },
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated algorithm names.
    #[arg(long, value_delimiter = ',', default_value = "fn,fn2,cp,mf,mf2,bp")]
    algs: Vec<Algorithm>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Score every run against exact marginals.
    #[arg(long)]
    exact: bool,
    /// Also run a Gibbs sampler with this many sweeps per chain.
    #[arg(long)]
    gibbs_sweeps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    gibbs_chains: usize,
    /// Record wall time per row (breaks byte-level reproducibility).
    #[arg(long)]
    wall_time: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    alg: Algorithm,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PhaseArgs {
    /// Comma-separated algorithm names, or `all`.
    #[arg(long, default_value = "all")]
    alg: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.5)]
    t_low: f64,
    #[arg(long, default_value_t = 5.0)]
    t_high: f64,
    #[arg(long, default_value_t = 1e-3)]
    t_tol: f64,
}

fn gen(args: GenArgs) -> Result<u8> {
    let regime = match args.regime {
        RegimeArg::Easy => Regime::easy(args.instances, args.seed),
        RegimeArg::Hard => Regime::hard(args.instances, args.seed),
        RegimeArg::Custom => Regime {
            name: RegimeName::Custom,
            rows: args.rows,
            cols: args.cols,
            var_theta: args.var_theta.context("--var-theta is required for a custom regime")?,
            var_phi: args.var_phi.context("--var-phi is required for a custom regime")?,
            instances: args.instances,
            base_seed: args.seed,
        },
    };
    let custom_flags = args.var_theta.is_some() || args.var_phi.is_some() || args.rows != 4 || args.cols != 4;
    if custom_flags && !matches!(args.regime, RegimeArg::Custom) {
        bail!("grid and variance flags apply to --regime custom only");
    }
    let manifest = generate_batch(&regime, &args.out)?;
    println!("wrote {} instances to {}", manifest.instances.len(), args.out.display());
    Ok(0)
}

fn run(args: RunArgs, mode: ExecMode) -> Result<u8> {
    let cfg = ExperimentConfig {
        algorithms: args.algs,
        run: args.solver.config(),
        with_exact: args.exact,
        gibbs: args.gibbs_sweeps.map(|s| ChainConfig::new(s, args.gibbs_chains, 0)),
        record_wall_time: args.wall_time,
        mode,
    };
    let outcome = run_experiment(&args.manifest, &cfg, &args.out)?;
    println!(
        "{} rows computed, {} already present, {} failed -> {}",
        outcome.computed,
        outcome.skipped,
        outcome.failed,
        args.out.display()
    );
    Ok(outcome.exit_code() as u8)
}

fn summarize(args: SummarizeArgs) -> Result<u8> {
    let (summary, scatter) = summarize_file(&args.input, &args.out)?;
    for a in &summary.algorithms {
        let stat = match (a.mean_l1, a.std_l1) {
            (Some(m), Some(s)) => format!("{m:.3e} ± {s:.3e}"),
            _ => "n/a".to_string(),
        };
        println!(
            "{:>6}  L1 {stat}  converged {}/{}  failed {}",
            a.algorithm, a.converged, a.runs, a.failed
        );
    }
    for path in scatter {
        println!("scatter: {}", path.display());
    }
    Ok(0)
}

fn trace(args: TraceArgs) -> Result<u8> {
    let s = trace_run(&args.instance, args.alg, &args.solver.config(), &args.out)?;
    println!(
        "{}: converged={} iterations={} final WSKL {:.3e} (tail band {:.3e}..{:.3e})",
        s.algorithm, s.converged, s.iterations, s.final_wskl, s.tail_band.0, s.tail_band.1
    );
    Ok(0)
}

fn phase(args: PhaseArgs, mode: ExecMode) -> Result<u8> {
    let algorithms: Vec<Algorithm> = if args.alg == "all" {
        PHASE_ALGORITHMS.to_vec()
    } else {
        args.alg
            .split(',')
            .map(|s| s.parse().map_err(anyhow::Error::msg))
            .collect::<Result<_>>()?
    };
    let cfg = CriticalSearchConfig {
        t_low: args.t_low,
        t_high: args.t_high,
        t_tolerance: args.t_tol,
        ..Default::default()
    };
    let rows = phase_table(&algorithms, &cfg, mode)?;
    write_phase_csv(&rows, &args.out)?;
    for r in &rows {
        match r.reference {
            Some(reference) => println!("{:>4}  t_c = {:.4}  (reference {reference})", r.algorithm.name(), r.t_c),
            None => println!("{:>4}  t_c = {:.4}", r.algorithm.name(), r.t_c),
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    // usage errors are fatal (1); 2 is reserved for partial batch failures
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let mode = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a, mode),
        Command::Summarize(a) => summarize(a),
        Command::Trace(a) => trace(a),
        Command::Phase(a) => phase(a, mode),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
