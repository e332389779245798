use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use overprune::bench::{prepare_split, run_benchmark, run_synthetic_suite, BenchmarkConfig, PosteriorSnapshot};
use overprune::data::{apply_scaler, load_csv, TeacherSpec};
use overprune::diagnostics::{mean_predictive_ll, unit_report, PruneThresholds};
use overprune::training::{train, TrainConfig};
use overprune::{Error, Family, NetworkShape, Prior, Result, RngState};

#[derive(Parser)]
#[command(name = "overprune", version, about = "Variational Bayesian neural network pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on one train/test split of a CSV dataset.
    Train {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        data: PathBuf,
        /// Target column, negative values count from the end.
        #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
        target: i64,
        #[arg(long, default_value_t = 1.0)]
        prior_std: f64,
        #[arg(long, default_value_t = 50)]
        hidden_units: usize,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Grid search and multi-split benchmark from a TOML config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
    },
    /// Pruned-unit counts versus dataset size on teacher-generated data.
    Synthetic {
        #[arg(long, value_delimiter = ',', default_value = "5,25,100")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value = "synthetic_out")]
        out: PathBuf,
    },
    /// Per-unit pruning report for a saved posterior.
    PruneReport {
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
        target: i64,
        #[arg(long, default_value_t = 25)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            family,
            data,
            target,
            prior_std,
            hidden_units,
            iterations,
            test_fraction,
            seed,
            out,
        } => {
            let raw = load_csv(&data, target)?;
            let (tr, te) = prepare_split(&raw, test_fraction, seed)?;
            let mut cfg = TrainConfig::for_family(family);
            cfg.seed = seed;
            if let Some(it) = iterations {
                cfg.iterations = it;
            }
            let prior = Prior::new(prior_std)?;
            let shape = NetworkShape::new(tr.input_dim(), hidden_units)?;
            let outcome = train(family, &tr, Some(&te), shape, &prior, &cfg)?;
            let eval = RngState::new(seed).split("final-eval", 0);
            let test_ll = mean_predictive_ll(&outcome.posterior, &te, cfg.eval_mc_samples, &eval)?;
            mkdir(&out)?;
            outcome.trace.write_csv(out.join("trace.csv"))?;
            PosteriorSnapshot {
                prior_std,
                scaler: tr.scaler.clone(),
                posterior: outcome.posterior.clone(),
            }
            .write_json(out.join("posterior.json"))?;
            let mut summary = json!({
                "family": family,
                "prior_std": prior_std,
                "test_ll": test_ll,
                "n_train": tr.len(),
                "n_test": te.len(),
            });
            if family.is_variational() {
                let report = unit_report(
                    &outcome.posterior,
                    &prior,
                    &tr,
                    25,
                    PruneThresholds::for_prior(&prior),
                    &RngState::new(seed).split("report", 0),
                )?;
                report.write_json(out.join("pruning.json"))?;
                summary["pruned"] = json!(report.pruned_count);
            }
            write(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
            println!("{summary}");
        }
        Command::Bench { config, out } => {
            let cfg = BenchmarkConfig::load(&config)?;
            let table = run_benchmark(&cfg, Some(&out))?;
            print!("{}", table.to_csv());
        }
        Command::Synthetic {
            n_list,
            seeds,
            iterations,
            out,
        } => {
            let spec = TeacherSpec::default_synthetic();
            let mut cfg = TrainConfig::default();
            if let Some(it) = iterations {
                cfg.iterations = it;
            }
            let seeds: Vec<u64> = (0..seeds).collect();
            let thresholds = PruneThresholds::for_prior(&spec.prior);
            mkdir(&out)?;
            let (table, _) = run_synthetic_suite(&n_list, &seeds, &spec, &cfg, thresholds, Some(&out))?;
            print!("{}", table.to_csv());
        }
        Command::PruneReport {
            posterior,
            data,
            target,
            samples,
            seed,
            out,
        } => {
            let snap = PosteriorSnapshot::read_json(&posterior)?;
            let raw = load_csv(&data, target)?;
            let ds = match &snap.scaler {
                Some(s) => apply_scaler(s, &raw),
                None => raw,
            };
            let prior = Prior::new(snap.prior_std)?;
            let report = unit_report(
                &snap.posterior,
                &prior,
                &ds,
                samples,
                PruneThresholds::for_prior(&prior),
                &RngState::new(seed).split("report", 0),
            )?;
            report.write_json(&out)?;
            println!("{}", json!({"pruned": report.pruned_count, "hidden_units": report.units.len()}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
