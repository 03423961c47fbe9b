mod commands;
mod error;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;
use crate::settings::Settings;

#[derive(Parser)]
#[command(name = "ipweval", version, about = "Missingness-aware evaluation of screening models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra KEY=VALUE setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bootstrap rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Propensity truncation `lo,hi`, or `off`.
    #[arg(long, allow_hyphen_values = true)]
    truncate: Option<String>,
    /// Baseline levels, `1..7` or a comma list.
    #[arg(long)]
    levels: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with its truth sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Fit the probability-of-measurement model and export weights.
    FitPropensity {
        #[command(flatten)]
        common: Common,
        /// Cohort CSV.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Weighted ROC/PRC metrics, matched thresholds and bootstrap inference.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArgs,
        /// Models to evaluate, comma separated; defaults to every score column.
        #[arg(long)]
        models: Option<String>,
        /// Ordinal baseline model.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Worst-case reweighting of the focal-versus-baseline F1 comparison.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        focal: Option<String>,
        #[arg(long)]
        baseline: Option<String>,
        /// Comma-separated gamma values.
        #[arg(long)]
        gamma_grid: Option<String>,
    },
    /// Kaplan-Meier onset curves of predicted risk groups among negatives.
    Survival {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        /// Score threshold defining the high-risk group.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        /// Evaluate report whose matched threshold is reused.
        #[arg(long)]
        threshold_from: Option<PathBuf>,
        /// Follow-up horizon in days.
        #[arg(long)]
        horizon: Option<f64>,
    },
}

#[derive(Args)]
struct SourceArgs {
    /// Cohort CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// `fit`, `column` or `truth`.
    #[arg(long)]
    propensity: Option<String>,
    /// CSV holding the propensity column, keyed by encounter_id.
    #[arg(long)]
    propensity_file: Option<PathBuf>,
    #[arg(long)]
    propensity_column: Option<String>,
}

fn display_path(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

impl Common {
    fn into_settings(self) -> Result<Settings, CliError> {
        let mut s = match &self.config {
            Some(path) => Settings::from_file(path)?,
            None => Settings::default(),
        };
        for pair in &self.set {
            s.set_pair(pair)?;
        }
        s.set("seed", self.seed);
        s.set("rounds", self.rounds);
        s.set("truncate", self.truncate);
        s.set("levels", self.levels);
        s.set("out", display_path(self.out));
        s.set("threads", self.threads);
        Ok(s)
    }
}

impl SourceArgs {
    fn apply(self, s: &mut Settings) {
        s.set("input", display_path(self.input));
        s.set("propensity", self.propensity);
        s.set("propensity_file", display_path(self.propensity_file));
        s.set("propensity_column", self.propensity_column);
    }
}

fn configure_threads(s: &mut Settings) -> Result<(), CliError> {
    if let Some(n) = s.optional::<usize>("threads")? {
        if n == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("cannot start worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, mut s) = match cli.command {
        Command::Simulate { common, n_patients } => {
            let mut s = common.into_settings()?;
            s.set("n_patients", n_patients);
            ("simulate", s)
        }
        Command::FitPropensity { common, input } => {
            let mut s = common.into_settings()?;
            s.set("input", display_path(input));
            ("fit-propensity", s)
        }
        Command::Evaluate { common, source, models, baseline } => {
            let mut s = common.into_settings()?;
            source.apply(&mut s);
            s.set("models", models);
            s.set("baseline", baseline);
            ("evaluate", s)
        }
        Command::Sensitivity { common, source, focal, baseline, gamma_grid } => {
            let mut s = common.into_settings()?;
            source.apply(&mut s);
            s.set("focal", focal);
            s.set("baseline", baseline);
            s.set("gamma_grid", gamma_grid);
            ("sensitivity", s)
        }
        Command::Survival { common, input, model, threshold, threshold_from, horizon } => {
            let mut s = common.into_settings()?;
            s.set("input", display_path(input));
            s.set("model", model);
            s.set("threshold", threshold);
            s.set("threshold_from", display_path(threshold_from));
            s.set("horizon", horizon);
            ("survival", s)
        }
    };
    configure_threads(&mut s)?;
    let out: PathBuf = s.get("out", ".".to_string())?.into();
    match name {
        "simulate" => commands::simulate(s, &out),
        "fit-propensity" => commands::fit_propensity(s, &out),
        "evaluate" => commands::evaluate(s, &out),
        "sensitivity" => commands::sensitivity(s, &out),
        _ => commands::survival(s, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::panic::set_hook(Box::new(|info| {
        eprintln!("ipweval: internal error: {info}");
        std::process::exit(4);
    }));
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ipweval: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
