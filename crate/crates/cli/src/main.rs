//! `softquant`: generate synthetic data, train factorizations, check
//! gradients, evaluate reports and benchmark the implicit VJP.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage error, 3 data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use softquant::check::{bench_vjp, gradcheck};
use softquant::factor::{kl_div, reconstruct, row_ranges, train, Method, OptimizerKind, TrainConfig};
use softquant::io::{read_matrix, write_matrix, QuantileTable, RunReport};
use softquant::synth::{synth_generate, SynthConfig};

#[derive(Parser)]
#[command(name = "softquant", version, about = "Differentiable quantile normalization and quantile-normalized factorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data matrix and its ground truth.
    Generate(GenerateArgs),
    /// Train a factorization model and write a JSON report.
    Factorize(FactorizeArgs),
    /// Check every VJP against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Score a report on data and export its quantile tables.
    Eval(EvalArgs),
    /// Time the implicit VJP against the unrolled reverse pass.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 160)]
    d: usize,
    #[arg(long, default_value_t = 80)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Ground-truth quantiles per feature; defaults to n.
    #[arg(long)]
    m_star: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Standard deviation of the truncated Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for X.csv, U_star.csv, V_star.csv and Q_star.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FactorizeArgs {
    #[arg(long, default_value = "qmf")]
    method: Method,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 16)]
    quantiles: usize,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Features per step; all of them if omitted.
    #[arg(long)]
    batch: Option<usize>,
    /// Epochs, or iterations for nmf.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    inner_iters: usize,
    /// Backpropagate through only the last this-many inner iterations.
    #[arg(long)]
    unroll_depth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    /// Keep the quantile weights uniform.
    #[arg(long)]
    freeze_weights: bool,
    #[arg(long, default_value_t = 1e-4)]
    sinkhorn_tolerance: f64,
    #[arg(long, default_value_t = 2000)]
    sinkhorn_max_iter: usize,
    #[arg(long, default_value = "X.csv")]
    input: PathBuf,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
    #[arg(long, default_value = "X.csv")]
    input: PathBuf,
    /// Directory for the exported CSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One JSON object per line instead of a table.
    #[arg(long)]
    json: bool,
}

enum Failure {
    Check(String),
    Data(String),
}

impl From<softquant::Error> for Failure {
    fn from(e: softquant::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn threads_from_env() -> Result<usize, Failure> {
    match std::env::var("SOFTQUANT_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Data(format!("SOFTQUANT_THREADS must be a number, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn load(path: &Path) -> Result<Array2<f64>, Failure> {
    read_matrix(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn generate(args: GenerateArgs) -> Outcome {
    let data = synth_generate(&SynthConfig {
        d: args.d,
        n: args.n,
        k: args.k,
        m_star: args.m_star.unwrap_or(args.n),
        poisson_lambda: args.lambda,
        dirichlet_alpha: args.alpha,
        noise_sigma: args.sigma,
        seed: args.seed,
    })?;
    std::fs::create_dir_all(&args.out).map_err(softquant::Error::from)?;
    for (name, m) in [("X", &data.x), ("U_star", &data.u_star), ("V_star", &data.v_star), ("Q_star", &data.q_star)] {
        write_matrix(args.out.join(format!("{name}.csv")), m.view())?;
    }
    println!("wrote {}x{} data to {}", args.d, args.n, args.out.display());
    Ok(())
}

fn factorize(args: FactorizeArgs) -> Outcome {
    let x = load(&args.input)?;
    let config = TrainConfig {
        rank: args.rank,
        quantiles: args.quantiles,
        epsilon: args.epsilon,
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        inner_iters: args.inner_iters,
        unroll_depth: args.unroll_depth,
        seed: args.seed,
        optimizer: args.optimizer,
        train_weights: !args.freeze_weights,
        sinkhorn_tolerance: args.sinkhorn_tolerance,
        sinkhorn_max_iter: args.sinkhorn_max_iter,
        ..Default::default()
    };
    let start = Instant::now();
    let (model, curve) = train(args.method, x.view(), &config)?;
    let seconds = start.elapsed().as_secs_f64();
    let table = |set: Option<&softquant::params::PrecursorSet>| set.map(QuantileTable::from_set).transpose();
    let report = RunReport {
        method: args.method,
        config,
        rows: x.nrows(),
        cols: x.ncols(),
        final_kl: curve.last(),
        inflate: table(model.inflate.as_ref())?,
        deflate: table(model.deflate.as_ref())?,
        seconds,
        threads: rayon::current_num_threads(),
        curve,
        model,
    };
    report.write(&args.out)?;
    if let Some(epoch) = report.curve.diverged_at {
        eprintln!("warning: training diverged at epoch {epoch}; kept the last finite state");
    }
    println!("{:?} KL {:.6} in {seconds:.2}s -> {}", args.method, report.final_kl, args.out.display());
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Outcome {
    let report = gradcheck(args.seed, args.instances, args.tolerance)?;
    for c in &report.checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<22} {:>4} instances  max rel err {:.3e}  {status}", c.name, c.instances, c.max_rel_err);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradients off by more than {:e}", args.tolerance)))
    }
}

fn export(dir: &Path, prefix: &str, table: &QuantileTable) -> Outcome {
    write_matrix(dir.join(format!("{prefix}_weights.csv")), table.weights.view())?;
    write_matrix(dir.join(format!("{prefix}_levels.csv")), table.levels().view())?;
    write_matrix(dir.join(format!("{prefix}_quantiles.csv")), table.quantiles.view())?;
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    let report = RunReport::read(&args.report).map_err(|e| Failure::Data(format!("{}: {e}", args.report.display())))?;
    let x = load(&args.input)?;
    if x.dim() != (report.rows, report.cols) {
        return Err(Failure::Data(format!(
            "report was trained on {}x{} data, input is {}x{}",
            report.rows,
            report.cols,
            x.nrows(),
            x.ncols()
        )));
    }
    let z: Array2<f64> = reconstruct(&report.model, x.view())?;
    let kl = kl_div(x.view(), z.view())?;
    println!("{:?} KL {kl:.6} (reported {:.6})", report.method, report.final_kl);
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir).map_err(softquant::Error::from)?;
        write_matrix(dir.join("reconstruction.csv"), z.view())?;
        let (s, t) = row_ranges(x.view());
        let ranges = ndarray::stack![ndarray::Axis(1), s, t];
        write_matrix(dir.join("row_ranges.csv"), ranges.view())?;
        for (prefix, table) in [("inflate", &report.inflate), ("deflate", &report.deflate)] {
            if let Some(table) = table {
                export(&dir, prefix, table)?;
            }
        }
        println!("tables written to {}", dir.display());
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Outcome {
    if !args.json {
        println!("{:>6} {:>4} {:>6} {:>12} {:>12} {:>8}", "n", "m", "iters", "implicit s", "unrolled s", "speedup");
    }
    for &n in &args.n {
        let row = bench_vjp(n, args.m, args.epsilon, args.tolerance, args.reps, args.seed)?;
        if args.json {
            println!("{}", serde_json::to_string(&row).map_err(softquant::Error::from)?);
        } else {
            println!(
                "{:>6} {:>4} {:>6} {:>12.6} {:>12.6} {:>8.2}",
                row.n,
                row.m,
                row.iterations,
                row.implicit_secs,
                row.unrolled_secs,
                row.speedup()
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let threads = threads_from_env()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Data(e.to_string()))?;
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Factorize(a) => factorize(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
