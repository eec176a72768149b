use clap::{Parser, Subcommand};
use mimic_cli::commands;

/// Frequency-domain multi-view contrastive learning for 2D lesion
/// segmentation: preprocessing, training, evaluation, and analysis tools.
#[derive(Parser)]
#[command(name = "mimic", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion dataset directory.
    Synth(commands::synth::SynthArgs),
    /// Build the preprocessed slice/cube cache from a dataset directory.
    Preprocess(commands::preprocess::PreprocessArgs),
    /// Train on a preprocessed cache.
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint on a cached dataset split.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Verify the MI estimators against closed-form targets.
    #[command(name = "mi-probe")]
    MiProbe(commands::mi_probe::MiProbeArgs),
    /// Grid sweep over patch size and selection fraction.
    Sweep(commands::sweep::SweepArgs),
    /// Train and compare the baseline/+MI/+CL/+MIMIC variants.
    Ablate(commands::ablate::AblateArgs),
    /// Regenerate plots from result CSVs.
    Plot(commands::plot::PlotArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Preprocess(args) => commands::preprocess::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Evaluate(args) => commands::evaluate::run(args),
        Command::MiProbe(args) => commands::mi_probe::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
        Command::Ablate(args) => commands::ablate::run(args),
        Command::Plot(args) => commands::plot::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
