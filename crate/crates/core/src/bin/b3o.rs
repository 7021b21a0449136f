use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use b3o::benchfns::{self, Sense};
use b3o::harness::{
    points_csv, run_experiment, write_outputs, HarnessError, RunOptions, Session, WallTime,
};
use b3o::{SearchDomain, Strategy};

#[derive(Parser)]
#[command(name = "b3o", version, about = "Budgeted batch Bayesian optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicated runs of one strategy on one benchmark.
    Run(RunArgs),
    /// Every benchmark with every strategy.
    BenchAll(BenchAllArgs),
    /// Start an ask/tell session.
    Init(InitArgs),
    /// Print the next batch of a session as CSV rows.
    Ask(AskArgs),
    /// Record outcomes for the pending batch of a session.
    Tell(TellArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    function: Option<String>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    init: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    beta_sqrt: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Fit the GP on the unit box.
    #[arg(long)]
    normalize: bool,
    /// Standardize outcomes before each GP fit.
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    weight_threshold: Option<f64>,
    #[arg(long)]
    merge_fraction: Option<f64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    chain_length: Option<usize>,
    /// Write measured wall times instead of zeros.
    #[arg(long)]
    record_wall_time: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            function: self.function.clone(),
            strategy: self.strategy,
            iters: self.iters,
            init: self.init,
            batch: self.batch,
            beta_sqrt: self.beta_sqrt,
            gamma: self.gamma,
            replicates: self.replicates,
            seed: self.seed,
            jobs: self.jobs,
            normalize: self.normalize.then_some(true),
            standardize: self.standardize.then_some(true),
            weight_threshold: self.weight_threshold,
            merge_fraction: self.merge_fraction,
            chains: self.chains,
            chain_length: self.chain_length,
            out: self.out.as_ref().map(|p| p.display().to_string()),
            record_wall_time: self.record_wall_time.then_some(true),
        }
    }
}

#[derive(Args)]
struct BenchAllArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    strategy: Strategy,
    /// Registered benchmark supplying the domain and default settings.
    #[arg(long, conflicts_with_all = ["lower", "upper"])]
    function: Option<String>,
    /// Comma-separated lower bounds of a custom domain.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "upper")]
    lower: Option<Vec<f64>>,
    /// Comma-separated upper bounds of a custom domain.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "lower")]
    upper: Option<Vec<f64>>,
    /// Outcomes told to the session are to be minimized.
    #[arg(long)]
    minimize: bool,
    #[arg(long)]
    init: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    beta_sqrt: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AskArgs {
    #[arg(long)]
    session: PathBuf,
}

#[derive(Args)]
struct TellArgs {
    #[arg(long)]
    session: PathBuf,
    /// Comma-separated outcomes, in the order the points were asked.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Vec<f64>,
}

fn run(args: RunArgs) -> Result<(), HarnessError> {
    let base = match &args.config {
        Some(p) => RunOptions::from_kv(&fs::read_to_string(p)?)?,
        None => RunOptions::default(),
    };
    let opts = base.overridden_by(args.options());
    let config = opts.to_config()?;
    let out = opts
        .out
        .clone()
        .ok_or_else(|| HarnessError::Usage("missing --out".into()))?;
    let wall = if opts.record_wall_time == Some(true) {
        WallTime::Measured
    } else {
        WallTime::Zero
    };
    let result = run_experiment(&config, opts.jobs)?;
    write_outputs(&result, &PathBuf::from(out), wall)?;
    println!(
        "{} {}: median best {} (optimum {}), mean evaluations {}",
        config.function,
        config.strategy,
        result.final_median_native(),
        result.benchmark.optimum,
        result.mean_total_evaluations
    );
    Ok(())
}

fn bench_all(args: BenchAllArgs) -> Result<(), HarnessError> {
    for key in benchfns::KEYS {
        for strategy in Strategy::ALL {
            let opts = RunOptions {
                function: Some(key.to_string()),
                strategy: Some(strategy),
                replicates: args.replicates,
                seed: args.seed,
                ..Default::default()
            };
            let config = opts.to_config()?;
            let result = run_experiment(&config, args.jobs)?;
            write_outputs(&result, &args.out, WallTime::Zero)?;
            println!(
                "{key} {strategy}: median best {}, mean evaluations {}",
                result.final_median_native(),
                result.mean_total_evaluations
            );
        }
    }
    Ok(())
}

fn init(args: InitArgs) -> Result<(), HarnessError> {
    let (mut config, domain, sense) = match (&args.function, &args.lower, &args.upper) {
        (Some(key), _, _) => {
            let b = benchfns::lookup(key)?;
            let c = b3o::harness::default_config(key, args.strategy)?;
            (c, b.domain.clone(), b.sense)
        }
        (None, Some(lo), Some(hi)) => {
            let domain = SearchDomain::new(lo.clone(), hi.clone())
                .map_err(|e| HarnessError::Usage(e.to_string()))?;
            let c = b3o::RunConfig::new("external", domain.dim(), args.strategy);
            let sense = if args.minimize { Sense::Min } else { Sense::Max };
            (c, domain, sense)
        }
        _ => {
            return Err(HarnessError::Usage(
                "give either --function or both --lower and --upper".into(),
            ))
        }
    };
    if args.function.is_some() && args.minimize {
        return Err(HarnessError::Usage("--minimize only applies to custom domains".into()));
    }
    if let Some(v) = args.init {
        config.initial_points = v;
    }
    if let Some(v) = args.batch {
        config.batch_size = v;
    }
    if let Some(v) = args.beta_sqrt {
        config.beta_sqrt = v;
    }
    if let Some(v) = args.gamma {
        config.kernel_gamma = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    Session::new(config, domain, sense)?.save(&args.session)
}

fn ask(args: AskArgs) -> Result<(), HarnessError> {
    let mut s = Session::load(&args.session)?;
    let points = s.ask()?;
    s.save(&args.session)?;
    print!("{}", points_csv(&points));
    Ok(())
}

fn tell(args: TellArgs) -> Result<(), HarnessError> {
    let mut s = Session::load(&args.session)?;
    s.tell(&args.values)?;
    s.save(&args.session)?;
    println!("iteration {}", s.iteration);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::BenchAll(a) => bench_all(a),
        Command::Init(a) => init(a),
        Command::Ask(a) => ask(a),
        Command::Tell(a) => tell(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
