use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rand::Rng;

use ldp_pairwise::harness::{first_trial_transcript, run_reduction_experiment, run_trials, ExperimentConfig};
use ldp_pairwise::kernels::build_workload;
use ldp_pairwise::randomizers::vrand;
use ldp_pairwise::rng::SeedPath;
use ldp_pairwise::workload::factorization_residual;

#[derive(Parser)]
#[command(
    name = "ldp-pairwise",
    version,
    about = "Locally private quadratic forms, linear queries and pairwise statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a named workload factorization and write it as a text bundle.
    Factorize {
        workload: String,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte-Carlo grid and write the MSE report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; overrides the config and $LDP_PAIRWISE_THREADS.
        #[arg(long)]
        threads: Option<usize>,
        /// Write the per-round aggregates of trial 0 of the first cell.
        #[arg(long)]
        dump_transcript: Option<PathBuf>,
    },
    /// Compare linear queries through the reduction with the underlying quadratic-form error.
    Reduce {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Vector randomizer throughput.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        draws: usize,
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, threads: Option<usize>) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if threads.is_some() {
        cfg.parallelism = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn factorize(workload: &str, k: usize, out: Option<PathBuf>) -> anyhow::Result<()> {
    let built = build_workload(workload, k)?;
    let f = &built.factorization;
    let residual = factorization_residual(f, &built.target)?;
    println!("workload    {}", built.name);
    println!("k           {}", f.k());
    println!("rank        {}", f.rank());
    println!("|L|_1->2    {}", f.l().one_to_two_norm());
    println!("|R|_1->2    {}", f.r().one_to_two_norm());
    println!("product     {}", f.norm_product());
    println!("alpha       {}", f.alpha());
    println!("residual    {residual:e}");
    if built.offset != 0.0 {
        println!("offset      {}", built.offset);
    }
    if let Some(path) = out {
        let bundle = format!(
            "alpha {}\n\n{}\n{}\n{}",
            f.alpha(),
            f.l().to_text(),
            f.r().to_text(),
            built.target.entries().to_text()
        );
        std::fs::write(&path, bundle).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote       {}", path.display());
    }
    Ok(())
}

fn simulate(cfg: ExperimentConfig, dump: Option<PathBuf>) -> anyhow::Result<()> {
    let report = run_trials(&cfg)?;
    for s in &report.summaries {
        eprintln!(
            "n={} eps={} mse={:e} bias={:e} std={:e}\n{}",
            s.n, s.epsilon, s.mse, s.bias, s.std, s.ledger
        );
    }
    for (eps, slope) in &report.slopes {
        eprintln!("eps={eps}: log-log slope of mse against n = {slope:.4}");
    }
    match &cfg.output {
        Some(path) => std::fs::write(path, &report.csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", report.csv),
    }
    if let Some(path) = &cfg.trial_output {
        std::fs::write(path, report.trial_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = dump {
        first_trial_transcript(&cfg)?.dump_transcript(&path)?;
    }
    Ok(())
}

fn reduce(cfg: ExperimentConfig) -> anyhow::Result<()> {
    let rows = run_reduction_experiment(&cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let text = String::from_utf8(w.into_inner()?)?;
    match &cfg.output {
        Some(path) => std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn bench(dims: &[usize], draws: usize, epsilon: f64) -> anyhow::Result<()> {
    let mut rng = SeedPath::root(0).rng();
    for &d in dims {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let start = Instant::now();
        let mut sink = 0.0;
        for _ in 0..draws {
            sink += vrand(&x, norm, epsilon, &mut rng)?.vector[0];
        }
        let secs = start.elapsed().as_secs_f64();
        println!(
            "d={d:<6} {draws} draws in {secs:.3}s  {:.0} msgs/s  ({:.0} coords/s)  [{sink:.1e}]",
            draws as f64 / secs,
            (draws * d) as f64 / secs
        );
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Factorize { workload, k, out } => factorize(&workload, k, out),
        Command::Simulate {
            config,
            seed,
            threads,
            dump_transcript,
        } => simulate(load_config(&config, seed, threads)?, dump_transcript),
        Command::Reduce { config, seed, threads } => reduce(load_config(&config, seed, threads)?),
        Command::Bench { dims, draws, epsilon } => bench(&dims, draws, epsilon),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<ldp_pairwise::Error>()
                .map_or("other", |inner| inner.kind());
            let line = serde_json::json!({ "error": format!("{e:#}"), "kind": kind });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
