//! Command-line experiment runner: execute configured runs, build pilot
//! tempering schedules, summarise result files, and export subspace
//! spectra.

use assmc::harness::{
    compare, resolve_schedule, run_experiment_to_dir, write_compare_csv, RunConfig, RunResult,
};
use assmc::model::Tempering;
use assmc::smc::TemperingSchedule;
use assmc::subspace::GradientSample;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "assmc", version, about = "Subspace SMC experiment runner")]
struct Cli {
    /// Worker threads (default: ASSMC_THREADS env var, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for result files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Resample with independent categorical ancestor draws, as the
    /// algorithm listings are written, instead of stratified resampling.
    #[arg(long, global = true)]
    paper_faithful: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Run the adaptive pilot and emit the tempering schedule as JSON.
    Pilot { config: PathBuf },
    /// Summarise result files into a comparison table (CSV).
    Compare {
        results: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the subspace spectrum from prior draws and export it.
    Spectrum { config: PathBuf },
}

fn load_config(path: &PathBuf, cli: &Cli) -> assmc::Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = RunConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.paper_faithful {
        config.resample.mode = assmc::assmc::ResampleMode::Multinomial;
    }
    Ok(config)
}

fn main() {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("ASSMC_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cli: &Cli) -> assmc::Result<()> {
    match &cli.command {
        Command::Run { config } => {
            let config = load_config(config, cli)?;
            let path = run_experiment_to_dir(&config, &cli.out_dir)?;
            println!("{}", path.display());
        }
        Command::Pilot { config } => {
            let config = load_config(config, cli)?;
            let (schedule, evals) = resolve_schedule(&config)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let path = cli.out_dir.join("schedule.json");
            std::fs::write(&path, serde_json::to_string_pretty(&schedule)?)?;
            println!("{}", path.display());
            eprintln!(
                "pilot: {} stages, {} likelihood evaluations",
                schedule.stages(),
                evals
            );
        }
        Command::Compare { results, out } => {
            let mut loaded: Vec<RunResult> = Vec::new();
            for path in results {
                let text = std::fs::read_to_string(path)?;
                loaded.push(serde_json::from_str(&text)?);
            }
            let rows = compare(&loaded)?;
            match out {
                Some(path) => {
                    let mut file = std::fs::File::create(path)?;
                    write_compare_csv(&rows, &mut file)?;
                    println!("{}", path.display());
                }
                None => {
                    let mut stdout = std::io::stdout();
                    write_compare_csv(&rows, &mut stdout)?;
                }
            }
        }
        Command::Spectrum { config } => {
            let config = load_config(config, cli)?;
            let model = config
                .model
                .build(Tempering::Annealed(TemperingSchedule::uniform(1)?))?;
            let samples: Vec<GradientSample> = (0..config.n_active)
                .map(|m| {
                    let mut rng = assmc::rng::derive_stream(
                        config.seed,
                        assmc::rng::StreamPath::new(
                            0,
                            0,
                            m as u64,
                            assmc::rng::Purpose::PriorInit,
                        ),
                    );
                    let theta = model.sample_prior(&mut rng);
                    let gradient = model.score(&theta);
                    GradientSample::new(theta, gradient, 1.0 / config.n_active as f64)
                })
                .collect();
            let spectrum =
                assmc::subspace::eigendecompose(&assmc::subspace::estimate_matrix(&samples)?)?;
            let basis = assmc::subspace::split_basis(&spectrum, config.gap_rule)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let path = cli.out_dir.join("spectrum.csv");
            let mut file = std::fs::File::create(&path)?;
            spectrum.write_csv(&mut file)?;
            println!("{}", path.display());
            eprintln!(
                "active dimension {} of {}",
                basis.active_dim(),
                basis.dim()
            );
        }
    }
    Ok(())
}
