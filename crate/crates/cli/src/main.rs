//! Command-line driver: split inspection, synthetic data generation, full
//! training runs, and checkpoint evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use increc::config::parse_config;
use increc::data::{ingest_interactions, split_blocks, SplitMode};
use increc::experiment::{evaluate_checkpoint, rows_to_tsv, run_experiment, EvalRange};
use increc::synth::{synth_drift_dataset, write_dataset, SynthParams};

#[derive(Parser)]
#[command(
    name = "increc",
    about = "Incremental implicit-feedback recommender with an interest-shift-aware negative reservoir",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    Tuning,
}

#[derive(Clone, Copy, ValueEnum)]
enum RangeArg {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Partition an event file chronologically and print the block summary.
    Split {
        /// Delimited event file (user, item, timestamp per line).
        #[arg(long)]
        events: PathBuf,
        /// Field delimiter.
        #[arg(long, default_value = ",")]
        delimiter: char,
        /// Fraction of events in the base block.
        #[arg(long, default_value_t = 0.6)]
        base_fraction: f64,
        /// Number of incremental blocks.
        #[arg(long, default_value_t = 4)]
        n_incremental: usize,
        /// Fraction of each block held out as validation (standard mode).
        #[arg(long, default_value_t = 0.05)]
        val_fraction: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Standard)]
        mode: ModeArg,
    },
    /// Generate a synthetic interaction log with planted interest drift.
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        /// Number of planted item categories.
        #[arg(long, default_value_t = 4)]
        categories: usize,
        /// Fraction of users whose dominant category flips.
        #[arg(long, default_value_t = 0.3)]
        drift_fraction: f64,
        /// Block index at which drifting users flip.
        #[arg(long, default_value_t = 2)]
        flip_block: usize,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 20)]
        events_per_user: usize,
        /// Probability mass on each user's dominant category.
        #[arg(long, default_value_t = 0.8)]
        dominant_mass: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output event file.
        #[arg(long)]
        out: PathBuf,
        /// Output two-column item-category map.
        #[arg(long)]
        categories_out: PathBuf,
        #[arg(long, default_value = ",")]
        delimiter: char,
    },
    /// Run a full experiment (split, base training, incremental loop,
    /// evaluation) from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved checkpoint on one block's held-out range.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        block: usize,
        #[arg(long, value_enum, default_value_t = RangeArg::Val)]
        range: RangeArg,
    },
}

fn run(cli: Cli) -> increc::Result<()> {
    match cli.command {
        Command::Split {
            events,
            delimiter,
            base_fraction,
            n_incremental,
            val_fraction,
            mode,
        } => {
            let text = std::fs::read_to_string(&events)?;
            let log = ingest_interactions(text.as_bytes(), delimiter)?;
            let mode = match mode {
                ModeArg::Standard => SplitMode::Standard,
                ModeArg::Tuning => SplitMode::Tuning,
            };
            let schedule = split_blocks(&log, base_fraction, n_incremental, val_fraction, mode)?;
            println!(
                "{} events, {} users, {} items",
                log.events.len(),
                log.n_users,
                log.n_items
            );
            print!("{}", schedule.summary());
        }
        Command::Synth {
            users,
            items,
            categories,
            drift_fraction,
            flip_block,
            blocks,
            events_per_user,
            dominant_mass,
            seed,
            out,
            categories_out,
            delimiter,
        } => {
            let params = SynthParams {
                n_users: users,
                n_items: items,
                k_true: categories,
                drift_fraction,
                flip_block,
                n_blocks: blocks,
                events_per_user_block: events_per_user,
                dominant_mass,
                seed,
            };
            let ds = synth_drift_dataset(&params)?;
            write_dataset(&ds, &out, &categories_out, delimiter)?;
            let drifted = ds.drifted.iter().filter(|&&d| d).count();
            println!(
                "wrote {} events ({} users, {} items, {} drifting) to {}",
                ds.log.events.len(),
                ds.log.n_users,
                ds.log.n_items,
                drifted,
                out.display()
            );
            println!("wrote categories to {}", categories_out.display());
        }
        Command::Train { config } => {
            let report = run_experiment(&config)?;
            println!(
                "run complete: seed {}, digest {}, blocks evaluated: {:?}",
                report.seed, report.config_digest, report.blocks_evaluated
            );
            if let Some(mean) = report.incremental_mean("recall", 20) {
                println!("incremental mean recall@20: {mean:.6}");
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            block,
            range,
        } => {
            let cfg = parse_config(&config)?;
            let range = match range {
                RangeArg::Val => EvalRange::Validation,
                RangeArg::Test => EvalRange::Test,
            };
            let rows = evaluate_checkpoint(&cfg, &checkpoint, block, range)?;
            if rows.is_empty() {
                eprintln!("block {block} has no held-out range to evaluate");
            } else {
                print!("{}", rows_to_tsv(&rows));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
