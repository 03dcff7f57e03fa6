use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlsvgd::harness::{
    compute_reference, run_experiment, run_rates, summarize, write_reference, ExperimentConfig, RatesConfig,
    RunOptions, Summary,
};
use mlsvgd::problems::{build_problem, CostMode};
use mlsvgd::Error;

#[derive(Parser)]
#[command(name = "mlsvgd", version, about = "Multilevel SVGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Added to every seed in the config.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the config's cost weights.
    #[arg(long, global = true, value_parser = ["measured", "analytic"])]
    cost_mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every schedule and the single-level baseline for every seed.
    Run {
        config: PathBuf,
        /// Skip the MCMC reference and the error-vs-cost tables.
        #[arg(long)]
        no_reference: bool,
    },
    /// Aggregate an artifact directory into summary.json.
    Summarize { dir: PathBuf },
    /// Compute the DRAM reference on the finest level and cache it.
    McmcRef {
        config: PathBuf,
        /// Also write the retained samples.
        #[arg(long)]
        samples_csv: Option<PathBuf>,
    },
    /// Empirical rate study.
    Rates { config: PathBuf },
}

enum Failure {
    Config(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn cost_mode(common: &Common) -> Result<Option<CostMode>, Failure> {
    common.cost_mode.as_deref().map(|m| m.parse().map_err(Failure::from)).transpose()
}

fn load_experiment(path: &Path, common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?;
    if common.seed_offset > 0 {
        for s in &mut cfg.seeds {
            *s = s
                .checked_add(common.seed_offset)
                .ok_or_else(|| Failure::Config("seed offset overflows".into()))?;
        }
    }
    if let Some(m) = cost_mode(common)? {
        cfg.cost_mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(s: &Summary) {
    println!("config {} ({:?} cost)", s.config_hash, s.cost_mode);
    if let Some(r) = &s.reference_mean {
        println!("reference mean {r:?}");
    }
    for g in &s.groups {
        let cost = g.cost.as_ref().map_or("-".into(), |c| format!("{:.4e}", c.median));
        let speed = g.speedup.as_ref().map_or("-".into(), |c| format!("{:.2}", c.median));
        let err = g.mean_error.map_or("-".into(), |e| format!("{e:.3e}"));
        println!(
            "tol {:.1e}  {:<14} n={:<3} flagged={:<2} cost={cost:<11} speedup={speed:<6} error={err}",
            g.tolerance, g.schedule, g.replicates, g.flagged
        );
    }
    for gap in &s.gaps {
        println!("gap: {gap}");
    }
}

fn flagged_exit(flagged: &[String]) -> ExitCode {
    if flagged.is_empty() {
        ExitCode::SUCCESS
    } else {
        for f in flagged {
            eprintln!("flagged: {f} stopped at the iteration cap");
        }
        ExitCode::from(3)
    }
}

fn execute(cli: &Cli) -> Result<ExitCode, Failure> {
    let common = &cli.common;
    match &cli.command {
        Command::Run { config, no_reference } => {
            let cfg = load_experiment(config, common)?;
            let out = run_experiment(
                &cfg,
                &RunOptions {
                    jobs: common.jobs,
                    skip_reference: *no_reference,
                },
            )?;
            print_summary(&out.summary);
            println!("artifacts in {}", out.output_dir.display());
            Ok(flagged_exit(&out.flagged))
        }
        Command::Summarize { dir } => {
            if !dir.join("config.json").is_file() {
                return Err(Failure::Config(format!("{}: no config.json", dir.display())));
            }
            let s = summarize(dir)?;
            print_summary(&s);
            Ok(flagged_exit(&s.flagged_runs))
        }
        Command::McmcRef { config, samples_csv } => {
            let cfg = load_experiment(config, common)?;
            let problem = build_problem(&cfg.problem, cfg.cost_mode, Some(&cfg.init_mean))?;
            let (reference, chain) = compute_reference(&cfg, &problem)?;
            let path = cfg.reference_path();
            write_reference(&path, &reference)?;
            if let Some(p) = samples_csv {
                chain.write_samples_csv(p)?;
            }
            let c = &reference.chain;
            println!("level {} reference mean {:?}", reference.level, c.mean);
            println!(
                "acceptance {:.3} / {:.3}, {} samples, {:.1} s",
                c.acceptance_stage1, c.acceptance_stage2, c.retained, reference.wall_seconds
            );
            println!("written to {}", path.display());
            if c.stuck {
                eprintln!("chain flagged stuck");
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Rates { config } => {
            let mut cfg = RatesConfig::load(config).map_err(|e| Failure::Config(e.to_string()))?;
            cfg.seed = cfg
                .seed
                .checked_add(common.seed_offset)
                .ok_or_else(|| Failure::Config("seed offset overflows".into()))?;
            if let Some(m) = cost_mode(common)? {
                cfg.cost_mode = m;
            }
            let report = mlsvgd::par::with_workers(common.jobs, || run_rates(&cfg))?;
            for l in &report.levels {
                println!("level {}  cost {:.4e}  KL {:.4e} ± {:.1e}", l.level, l.cost, l.kl, l.std_error);
            }
            let f = &report.fit;
            println!("gamma {:.4} (R² {:.3})", f.gamma, f.cost_fit.r_squared);
            println!("alpha {:.4} (R² {:.3})", f.alpha, f.kl_fit.r_squared);
            if let (Some(l), Some(fit)) = (f.lambda, &f.decay_fit) {
                println!("lambda {l:.4} (R² {:.3})", fit.r_squared);
            }
            println!("written to {}", cfg.output_dir.join("rates.json").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}
