//! Command-line entry points. The binary is a thin wrapper around
//! [`run`] so the whole surface is testable in-process.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::domain::{build_client_tuple, Dataset};
use crate::error::{CrnError, Result};
use crate::io::{
    load_checkpoint, read_dataset, read_first_record, save_checkpoint, write_dataset, AnyModel,
    RunConfig,
};
use crate::model::{full_gradcheck, CrnModel};
use crate::recommend::recommend_top_k;
use crate::synthworld::baselines::{run_baseline, BaselineKind, TrainedBaseline};
use crate::synthworld::{generate_dataset, profile_by_name};
use crate::training::{test_mse, train};

#[derive(Parser)]
#[command(name = "crn", version, about = "Coupled recurrent network next-best-action toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction dataset from a named profile.
    Simulate {
        /// Profile: default (lag-3 world), lag0, lag3, table1, skewed.
        #[arg(long, default_value = "default")]
        profile: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        clients: usize,
        /// Output dataset path (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model; writes a checkpoint and a history CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat JSON config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write per-epoch loss history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        /// none | all | comma list of action,interaction,reward,effectiveness.
        #[arg(long)]
        imbalance: Option<String>,
    },
    /// Score every labeled step of a dataset with a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the report as JSON instead of a table.
        #[arg(long, default_value_t = false)]
        json: bool,
    },
    /// Rank the candidate actions of each record's latest step.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose records are queried (candidates come from each
        /// record's final step).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Only the first record.
        #[arg(long, default_value_t = false)]
        first_only: bool,
    },
    /// Finite-difference check of the full network's hand-derived
    /// gradients.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train a reduced baseline and report its held-out metrics.
    Baseline {
        /// markov_mlp | gru
        #[arg(long)]
        kind: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        #[arg(long)]
        imbalance: Option<String>,
    },
}

/// Runs the CLI; returns the process exit code. 0 on success, 1 on data
/// or runtime errors, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/usage; version/help requests are
            // successes.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_overrides(
    config: &mut RunConfig,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    imbalance: &Option<String>,
) -> Result<()> {
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(b) = batch_size {
        config.batch_size = b;
    }
    if let Some(flag) = imbalance {
        config.apply_imbalance_flag(flag)?;
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Simulate { profile, seed, clients, out } => {
            let profile = profile_by_name(&profile, clients, seed)?;
            let dataset = generate_dataset(&profile)?;
            write_dataset(&out, &dataset)?;
            println!(
                "wrote {} clients ({} labeled steps) to {}",
                dataset.records.len(),
                dataset.labeled_step_count(),
                out.display()
            );
            Ok(0)
        }
        Command::Train { data, config, out, history, seed, epochs, batch_size, imbalance } => {
            let mut run_config = load_config(&config)?;
            apply_overrides(&mut run_config, seed, epochs, batch_size, &imbalance)?;
            let dataset = read_dataset(&data)?;
            let (model, outcome) = train_crn(&dataset, &run_config)?;
            save_checkpoint(&out, &AnyModel::Crn(Box::new(model)), run_config.seed, Some(&run_config))?;
            if let Some(h) = history {
                std::fs::write(&h, outcome.history.to_csv())?;
            }
            let last = outcome.history.val_loss.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs; final val loss {:.6}; checkpoint {}",
                outcome.history.val_loss.len(),
                last,
                out.display()
            );
            Ok(0)
        }
        Command::Evaluate { checkpoint, data, out, json } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let dataset = read_dataset(&data)?;
            let report = model.evaluate(&dataset.records)?;
            if let Some(path) = &out {
                std::fs::write(path, report.to_csv())?;
            }
            if json {
                println!("{}", serde_json::to_string(&report)?);
            } else {
                print!("{}", report.render_table());
            }
            Ok(0)
        }
        Command::Recommend { checkpoint, data, k, first_only } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            if k < 1 {
                return Err(CrnError::Range("k must be >= 1".into()));
            }
            println!("client_id,rank,action,predicted_reward");
            if first_only {
                let (_, record) = read_first_record(&data)?;
                recommend_for_record(&model, &record, k)?;
            } else {
                let dataset = read_dataset(&data)?;
                for record in &dataset.records {
                    recommend_for_record(&model, record, k)?;
                }
            }
            Ok(0)
        }
        Command::Gradcheck { seed, h, tolerance } => {
            let dims = crate::encoder::ModelDims {
                n_a: 4,
                n_o: 4,
                n_imp: 4,
                n_exp: 4,
                n_s: 8,
                dem_hidden: 6,
                fusion_hidden: 8,
            };
            let report = full_gradcheck(&dims, 5, 4, seed, h, tolerance)?;
            print!("{}", report.render());
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::Baseline { kind, data, config, out, seed, epochs, batch_size, imbalance } => {
            let mut run_config = load_config(&config)?;
            apply_overrides(&mut run_config, seed, epochs, batch_size, &imbalance)?;
            let kind: BaselineKind = kind.parse()?;
            let dataset = read_dataset(&data)?;
            let dims = run_config.dims();
            let (trained, outcome, mse) =
                run_baseline(kind, &dataset, &dims, &run_config.train_config(), &run_config.imbalance())?;
            let model = match trained {
                TrainedBaseline::Markov(m) => AnyModel::Markov(Box::new(m)),
                TrainedBaseline::Gru(m) => AnyModel::Gru(Box::new(m)),
            };
            let test_records: Vec<_> =
                outcome.test_clients.iter().map(|i| dataset.records[*i].clone()).collect();
            let report = model.evaluate(&test_records)?;
            if let Some(path) = &out {
                save_checkpoint(path, &model, run_config.seed, Some(&run_config))?;
            }
            println!("kind,{}", model.kind());
            println!("test_mse,{mse}");
            print!("{}", report.to_csv());
            Ok(0)
        }
    }
}

fn recommend_for_record(model: &AnyModel, record: &crate::domain::ClientRecord, k: usize) -> Result<()> {
    let t = record.steps.len();
    let tuple = build_client_tuple(record, t)?;
    let candidates = &record.steps[t - 1].candidates;
    let rec = match model {
        AnyModel::Crn(m) => recommend_top_k(m.as_ref(), &tuple, candidates, k)?,
        AnyModel::Markov(m) => recommend_top_k(m.as_ref(), &tuple, candidates, k)?,
        AnyModel::Gru(m) => recommend_top_k(m.as_ref(), &tuple, candidates, k)?,
    };
    for (rank, (action, reward)) in rec.ranked.iter().enumerate() {
        println!("{},{},{},{}", record.client_id, rank + 1, action, reward);
    }
    Ok(())
}

/// Trains the full model on a dataset with the given configuration.
pub fn train_crn(dataset: &Dataset, config: &RunConfig) -> Result<(CrnModel, crate::training::TrainOutcome)> {
    let mut model = CrnModel::new(
        config.dims(),
        dataset.header.action_count,
        dataset.header.response_vocab,
        dataset.header.explicit_width,
        dataset.header.schema.clone(),
        config.seed,
    );
    let outcome = train(
        &mut model,
        &dataset.records,
        dataset.header.action_count,
        &config.train_config(),
        &config.imbalance(),
    )?;
    Ok((model, outcome))
}

/// Trains, then reports the held-out test MSE (library-level helper used
/// by the comparison tests).
pub fn train_and_test_crn(dataset: &Dataset, config: &RunConfig) -> Result<(CrnModel, crate::training::TrainOutcome, f64)> {
    let (model, outcome) = train_crn(dataset, config)?;
    let mse = test_mse(&model, &dataset.records, &outcome.test_clients)?;
    Ok((model, outcome, mse))
}
