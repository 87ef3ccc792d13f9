use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvlstm::data::ModeList;
use mvlstm::model::TauPolicy;
use mvlstm::Variant;
use mvlstm_cli::commands::{self, Subset};
use mvlstm_cli::{CliError, CliResult, ExperimentConfig, Overrides, Selector};

/// Mode variational LSTM experiments.
#[derive(Parser)]
#[command(name = "mvlstm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// lstm, modevar or modevar_crosscell.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Dataset stem (without .manifest / .frames).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// first, random or a frame index.
    #[arg(long, global = true)]
    tau: Option<TauPolicy>,
    #[arg(long = "n-static", visible_alias = "n", global = true)]
    n_static: Option<usize>,
    #[arg(long = "first-k", global = true)]
    first_k: Option<usize>,
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    /// Mode groups, e.g. additive:2,gain:2.
    #[arg(long, global = true)]
    modes: Option<ModeList>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train on the seen modes.
    Train,
    /// Recognition rate per mode and the seen/unseen gap.
    Eval {
        /// Parameter archive; repeat to compare models.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Evaluate on the training partition instead of the held-out one.
        #[arg(long)]
        on_train: bool,
    },
    /// Analytic against numerical gradients over a seed sweep.
    Gradcheck {
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Static-sequence feature traces and pair divergence.
    Probe {
        #[arg(long)]
        model: Option<PathBuf>,
        /// same-class-diff-mode or same-class-same-mode.
        #[arg(long)]
        pair: Option<Selector>,
        /// Probe a single sample by dataset index.
        #[arg(long, conflicts_with = "pair")]
        sample: Option<usize>,
        #[arg(long)]
        pairs: Option<usize>,
    },
}

fn configure(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        variant: c.variant,
        dataset: c.dataset.clone(),
        out: c.out.clone(),
        epochs: c.epochs,
        lr: c.lr,
        tau: c.tau,
        n_static: c.n_static,
        first_k: c.first_k,
        tolerance: c.tolerance,
        modes: c.modes.clone(),
        ..Default::default()
    });
    Ok(cfg)
}

fn set_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("MVLSTM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("MVLSTM_THREADS must be a count, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    set_threads()?;
    let mut cfg = configure(&cli.common)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, out).map(drop),
        Command::Train => commands::train(&cfg, out).map(drop),
        Command::Eval { models, on_train } => {
            let subset = if on_train { Subset::Train } else { Subset::Test };
            commands::eval(&cfg, &models, cli.common.variant, subset, out).map(drop)
        }
        Command::Gradcheck { seeds } => {
            if let Some(s) = seeds {
                cfg.gradcheck.seeds = s;
            }
            let variants: Vec<Variant> = cli.common.variant.into_iter().collect();
            commands::gradcheck(&cfg, &variants, out).map(drop)
        }
        Command::Probe { model, pair, sample, pairs } => {
            if let Some(s) = pair.or(sample.map(Selector::Sample)) {
                cfg.probe.selector = s;
            }
            if let Some(n) = pairs {
                cfg.probe.pairs = n;
            }
            commands::probe(&cfg, model.as_deref(), out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(&e)
        }
    }
}
