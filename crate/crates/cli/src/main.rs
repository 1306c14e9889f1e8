use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use csmud_cli::commands::{self, Suite};
use csmud_cli::{check, CliError, RunConfig};
use csmud_core::Architecture;
use log::{info, LevelFilter};

#[derive(Parser, Debug)]
#[command(name = "csmud", version, about = "Sparse multiuser detection: data, training, benchmarks")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; the desk preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// `key=value` override, by dotted path or unique leaf name.
    #[arg(long = "override", short = 'o', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (replaces `out` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed for pilots, data, initialisation and benchmarks.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data generation and sweeps.
    #[arg(long, global = true, env = "CSMUD_THREADS")]
    threads: Option<usize>,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train, val and test datasets.
    Generate,
    /// Train the configured network.
    Train {
        /// Architecture to train instead of `model.arch`.
        #[arg(long, value_parser = parse_arch)]
        arch: Option<Architecture>,
    },
    /// Score a stored network on the test split.
    Eval {
        #[arg(long, value_parser = parse_arch)]
        arch: Option<Architecture>,
    },
    /// Run benchmark suites and write CSV reports.
    Bench {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
    /// Run the embedded self-tests.
    Check,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    match s.to_ascii_lowercase().as_str() {
        "brnn" => Ok(Architecture::Brnn),
        "dnn" => Ok(Architecture::Dnn),
        _ => Err(format!("unknown architecture `{s}` (brnn or dnn)")),
    }
}

fn effective_config(global: &Global) -> Result<RunConfig, CliError> {
    let base = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(),
    };
    let mut config = base.with_overrides(&global.overrides)?;
    if let Some(seed) = global.seed {
        config.set_seed(seed);
    }
    if let Some(out) = &global.out {
        config.out = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = effective_config(&cli.global)?;
    if cli.global.dump_config {
        println!("{}", config.to_json());
        return Ok(());
    }
    if let Some(threads) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }

    let Some(command) = cli.command else {
        return Err(CliError::Config("a subcommand is required (see --help)".into()));
    };
    match command {
        Command::Generate => {
            config.validate()?;
            for path in commands::generate(&config)? {
                println!("{}", path.display());
            }
        }
        Command::Train { arch } => {
            if let Some(arch) = arch {
                config.model.arch = arch;
            }
            config.validate()?;
            let stop = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&stop);
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                .map_err(|e| CliError::Failed(format!("cannot install Ctrl-C handler: {e}")))?;
            let summary = commands::train_model(&config, Some(&stop))?;
            info!("{} batches, {} checkpoints", summary.batches_seen, summary.checkpoints);
            println!("{}", summary.model.display());
            println!("{}", summary.trace.display());
        }
        Command::Eval { arch } => {
            config.validate()?;
            let (row, path) = commands::eval(&config, arch.unwrap_or(config.model.arch))?;
            println!(
                "{}: exact-set {:.4} ± {:.4}, user hit {:.4} over {} samples (chance: {:.2e} / {:.4})",
                row.arch,
                row.exact_set_success_rate,
                row.ci_halfwidth,
                row.user_hit_ratio,
                row.samples,
                row.chance_exact_set_rate,
                row.chance_user_hit_ratio
            );
            println!("{}", path.display());
        }
        Command::Bench { suite } => {
            config.validate()?;
            for path in commands::bench(&config, suite)? {
                println!("{}", path.display());
            }
        }
        Command::Check => {
            let seed = cli.global.seed.unwrap_or(config.system.seed);
            let results = check::run_all(seed, &config.models_dir());
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} of {} self-tests failed", results.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { LevelFilter::Warn } else { LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
