//! Experiment orchestration: grid search, multi-split benchmarks and the
//! synthetic pruning-versus-N suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_scaler, generate_teacher, init_at_truth, load_csv, split, standardize, Dataset, Scaler, TeacherSpec};
use crate::diagnostics::{mean_predictive_ll, sample_functions, unit_report, FunctionTable, PruneThresholds, PruningReport};
use crate::error::{Error, Result};
use crate::network::NetworkShape;
use crate::numerics::{mean, sample_variance, RngState};
use crate::posterior::{Family, Prior, VariationalPosterior, WnScales};
use crate::training::{train, train_posterior, TrainConfig, TrainOutcome};

/// Benchmark description, read from a TOML key-value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// CSV paths; relative paths resolve against the config file.
    pub datasets: Vec<PathBuf>,
    pub target: i64,
    pub families: Vec<Family>,
    pub n_splits: usize,
    pub test_fraction: f64,
    pub hidden_units: usize,
    pub seed: u64,
    pub tuning_split: usize,
    pub prior_std_grid: Vec<f64>,
    pub wn_weight_std_grid: Vec<f64>,
    pub wn_bias_std_grid: Vec<f64>,
    pub es_learning_rate_grid: Vec<f64>,
    pub es_iterations: usize,
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            target: -1,
            families: vec![Family::Es, Family::Map, Family::Wn, Family::Mf, Family::Fc],
            n_splits: 20,
            test_fraction: 0.1,
            hidden_units: 50,
            seed: 0,
            tuning_split: 0,
            prior_std_grid: vec![0.3, 1.0, 3.0, 10.0],
            wn_weight_std_grid: vec![0.01, 0.03, 0.1, 0.3],
            wn_bias_std_grid: vec![0.01, 0.03, 0.1, 0.3],
            es_learning_rate_grid: vec![0.001, 0.005, 0.01],
            es_iterations: 2000,
            train: TrainConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_splits == 0 {
            return bad("n_splits must be >= 1");
        }
        if self.tuning_split >= self.n_splits {
            return bad("tuning_split must be < n_splits");
        }
        if self.families.is_empty() {
            return bad("families must be non-empty");
        }
        for f in &self.families {
            if grid_points(*f, self).is_empty() {
                return Err(Error::InvalidConfig(format!("empty hyperparameter grid for {f}")));
            }
        }
        self.train.validate()
    }

    fn train_config(&self, family: Family, hyper: &Hyper) -> TrainConfig {
        let mut c = self.train.clone();
        if family == Family::Es {
            c.iterations = self.es_iterations;
        }
        c.learning_rate = hyper.learning_rate;
        if let Some(wn) = hyper.wn_scales {
            c.wn_scales = wn;
        }
        c
    }
}

/// One hyperparameter setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub prior_std: f64,
    pub wn_scales: Option<WnScales>,
    pub learning_rate: f64,
}

/// The grid searched for `family`.
pub fn grid_points(family: Family, cfg: &BenchmarkConfig) -> Vec<Hyper> {
    let lr = cfg.train.learning_rate;
    match family {
        Family::Es => cfg
            .es_learning_rate_grid
            .iter()
            .map(|&learning_rate| Hyper {
                prior_std: 1.0,
                wn_scales: None,
                learning_rate,
            })
            .collect(),
        Family::Map | Family::Mf | Family::Fc => cfg
            .prior_std_grid
            .iter()
            .map(|&prior_std| Hyper {
                prior_std,
                wn_scales: None,
                learning_rate: lr,
            })
            .collect(),
        Family::Wn => {
            let mut out = Vec::new();
            for &prior_std in &cfg.prior_std_grid {
                for &weight_std in &cfg.wn_weight_std_grid {
                    for &bias_std in &cfg.wn_bias_std_grid {
                        out.push(Hyper {
                            prior_std,
                            wn_scales: Some(WnScales { weight_std, bias_std }),
                            learning_rate: lr,
                        });
                    }
                }
            }
            out
        }
    }
}

/// Train/test split `k`, standardized with train statistics.
pub fn prepare_split(raw: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split(raw, test_fraction, seed)?;
    let (scaler, train) = standardize(&train);
    let test = apply_scaler(&scaler, &test);
    Ok((train, test))
}

fn split_seed(base: u64, split: usize) -> u64 {
    base.wrapping_add(split as u64)
}

fn run_seed(base: u64, family: Family, split: usize, grid_index: usize) -> u64 {
    RngState::new(base)
        .split(family.as_str(), ((split as u64) << 32) | grid_index as u64)
        .seed()
}

/// A finished training run with its held-out score.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub test_ll: f64,
    pub outcome: TrainOutcome,
}

/// Trains once and scores mean held-out predictive log likelihood (original units).
pub fn run_single(
    family: Family,
    train_data: &Dataset,
    test_data: &Dataset,
    hyper: &Hyper,
    config: &TrainConfig,
    hidden_units: usize,
) -> Result<RunResult> {
    let shape = NetworkShape::new(train_data.input_dim(), hidden_units)?;
    let prior = Prior::new(hyper.prior_std)?;
    let outcome = train(family, train_data, Some(test_data), shape, &prior, config)?;
    let eval = RngState::new(config.seed).split("final-eval", 0);
    let test_ll = mean_predictive_ll(&outcome.posterior, test_data, config.eval_mc_samples, &eval)?;
    if !test_ll.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: config.iterations,
            kl: f64::NAN,
            expected_nll: f64::NAN,
        });
    }
    Ok(RunResult { test_ll, outcome })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub hyper: Hyper,
    /// `None` when the run failed.
    pub test_ll: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridChoice {
    pub index: usize,
    pub hyper: Hyper,
    pub scores: Vec<GridScore>,
    /// Run of the chosen point on the tuning split.
    pub run: RunResult,
}

/// Trains every grid point on one split and keeps the best held-out score.
/// Ties go to the larger prior std.
pub fn grid_search(
    family: Family,
    train_data: &Dataset,
    test_data: &Dataset,
    grid: &[Hyper],
    config: &BenchmarkConfig,
    tuning_split: usize,
    trace_every: usize,
) -> Result<GridChoice> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig(format!("empty grid for {family}")));
    }
    let runs: Vec<Result<RunResult>> = grid
        .par_iter()
        .enumerate()
        .map(|(g, hyper)| {
            let mut tc = config.train_config(family, hyper);
            tc.seed = run_seed(config.seed, family, tuning_split, g);
            tc.trace_every = trace_every;
            run_single(family, train_data, test_data, hyper, &tc, config.hidden_units)
        })
        .collect();
    let mut best: Option<usize> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for (g, (hyper, run)) in grid.iter().zip(&runs).enumerate() {
        let score = match run {
            Ok(r) => Some(r.test_ll),
            Err(e) => {
                log::warn!("{family} grid point {g} failed: {e}");
                None
            }
        };
        if let Some(s) = score {
            let better = match best {
                None => true,
                Some(b) => {
                    let bs = runs[b].as_ref().map(|r| r.test_ll).unwrap_or(f64::NEG_INFINITY);
                    s > bs || (s == bs && hyper.prior_std > grid[b].prior_std)
                }
            };
            if better {
                best = Some(g);
            }
        }
        scores.push(GridScore {
            hyper: *hyper,
            test_ll: score,
        });
    }
    let index = best.ok_or(Error::AllRunsDiverged)?;
    let run = runs.into_iter().nth(index).expect("index in range")?;
    Ok(GridChoice {
        index,
        hyper: grid[index],
        scores,
        run,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub family: Family,
    pub n: usize,
    pub d: usize,
    pub mean_ll: f64,
    /// Sample std / √n over successful splits; 0 with `sem_defined = false`
    /// for a single split.
    pub sem: f64,
    pub sem_defined: bool,
    pub hyper: Hyper,
    pub per_split: Vec<f64>,
    pub failed_splits: Vec<usize>,
    pub grid: Vec<GridScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

/// `(mean, SEM, defined)` of per-split scores.
pub fn aggregate(values: &[f64]) -> (f64, f64, bool) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, false);
    }
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0, false);
    }
    (m, (sample_variance(values) / values.len() as f64).sqrt(), true)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultsTable {
    pub const CSV_HEADER: &'static str =
        "dataset,family,mean_ll,sem,prior_std,weight_std,bias_std,learning_rate,n,d,n_splits_ok,n_failed";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let variational_prior = r.family != Family::Es;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.dataset,
                r.family,
                r.mean_ll,
                r.sem,
                fmt_opt(variational_prior.then_some(r.hyper.prior_std)),
                fmt_opt(r.hyper.wn_scales.map(|w| w.weight_std)),
                fmt_opt(r.hyper.wn_scales.map(|w| w.bias_std)),
                r.hyper.learning_rate,
                r.n,
                r.d,
                r.per_split.len(),
                r.failed_splits.len()
            );
        }
        out
    }

    pub fn row(&self, dataset: &str, family: Family) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.dataset == dataset && r.family == family)
    }
}

/// Posterior plus what is needed to evaluate it on raw data later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSnapshot {
    pub prior_std: f64,
    pub scaler: Option<Scaler>,
    pub posterior: VariationalPosterior,
}

impl PosteriorSnapshot {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Everything one (dataset, family) benchmark cell produced.
#[derive(Debug, Clone)]
pub struct FamilyRuns {
    pub row: ResultRow,
    /// Successful runs indexed by split.
    pub runs: Vec<Option<RunResult>>,
}

/// Grid search on the tuning split, then every split with the chosen
/// hyperparameters. The tuning split's grid run is reused.
pub fn run_family(name: &str, raw: &Dataset, family: Family, cfg: &BenchmarkConfig) -> Result<FamilyRuns> {
    let splits: Vec<(Dataset, Dataset)> = (0..cfg.n_splits)
        .map(|k| prepare_split(raw, cfg.test_fraction, split_seed(cfg.seed, k)))
        .collect::<Result<_>>()?;
    let grid = grid_points(family, cfg);
    let (tr, te) = &splits[cfg.tuning_split];
    let choice = grid_search(family, tr, te, &grid, cfg, cfg.tuning_split, cfg.train.trace_every)?;
    log::info!("{name}/{family}: chose {:?}", choice.hyper);
    let hyper = choice.hyper;
    let mut tuned = Some(choice.run);
    let results: Vec<(usize, Result<RunResult>)> = splits
        .par_iter()
        .enumerate()
        .filter(|(k, _)| *k != cfg.tuning_split)
        .map(|(k, (tr, te))| {
            let mut tc = cfg.train_config(family, &hyper);
            tc.seed = run_seed(cfg.seed, family, k, choice.index);
            (k, run_single(family, tr, te, &hyper, &tc, cfg.hidden_units))
        })
        .collect();
    let mut runs: Vec<Option<RunResult>> = vec![None; cfg.n_splits];
    runs[cfg.tuning_split] = tuned.take();
    let mut failed = Vec::new();
    for (k, r) in results {
        match r {
            Ok(run) => runs[k] = Some(run),
            Err(e) => {
                log::warn!("{name}/{family} split {k} failed and is excluded: {e}");
                failed.push(k);
            }
        }
    }
    let per_split: Vec<f64> = runs.iter().flatten().map(|r| r.test_ll).collect();
    let (mean_ll, sem, sem_defined) = aggregate(&per_split);
    Ok(FamilyRuns {
        row: ResultRow {
            dataset: name.to_string(),
            family,
            n: raw.len(),
            d: raw.input_dim(),
            mean_ll,
            sem,
            sem_defined,
            hyper,
            per_split,
            failed_splits: failed,
            grid: choice.scores,
        },
        runs,
    })
}

/// Runs every (dataset, family) cell and optionally writes the results table,
/// per-run traces, tuning-split posteriors and pruning reports under `out`.
pub fn run_benchmark(cfg: &BenchmarkConfig, out: Option<&Path>) -> Result<ResultsTable> {
    cfg.validate()?;
    if let Some(dir) = out {
        create_dir(&dir.join("traces"))?;
        create_dir(&dir.join("posteriors"))?;
        create_dir(&dir.join("reports"))?;
    }
    let mut rows = Vec::new();
    for path in &cfg.datasets {
        let raw = load_csv(path, cfg.target)?;
        let name = dataset_name(path);
        for &family in &cfg.families {
            let fr = run_family(&name, &raw, family, cfg)?;
            if let Some(dir) = out {
                write_family_outputs(dir, &name, &fr, cfg)?;
            }
            rows.push(fr.row);
        }
    }
    let table = ResultsTable { rows };
    if let Some(dir) = out {
        write_text(&dir.join("results.csv"), &table.to_csv())?;
        write_text(&dir.join("results.json"), &serde_json::to_string_pretty(&table)?)?;
    }
    Ok(table)
}

fn write_family_outputs(dir: &Path, name: &str, fr: &FamilyRuns, cfg: &BenchmarkConfig) -> Result<()> {
    let family = fr.row.family;
    for (k, run) in fr.runs.iter().enumerate() {
        if let Some(run) = run {
            run.outcome
                .trace
                .write_csv(dir.join("traces").join(format!("{name}_{family}_split{k}.csv")))?;
        }
    }
    if let Some(Some(run)) = fr.runs.get(cfg.tuning_split) {
        let k = cfg.tuning_split;
        let path = cfg.datasets.iter().find(|p| dataset_name(p) == name).expect("known dataset");
        let (train, _) = prepare_split(&load_csv(path, cfg.target)?, cfg.test_fraction, split_seed(cfg.seed, k))?;
        let snapshot = PosteriorSnapshot {
            prior_std: fr.row.hyper.prior_std,
            scaler: train.scaler.clone(),
            posterior: run.outcome.posterior.clone(),
        };
        snapshot.write_json(dir.join("posteriors").join(format!("{name}_{family}_split{k}.json")))?;
        if family.is_variational() {
            let prior = Prior::new(fr.row.hyper.prior_std)?;
            let report = unit_report(
                &run.outcome.posterior,
                &prior,
                &train,
                25,
                PruneThresholds::for_prior(&prior),
                &RngState::new(cfg.seed).split("report", 0),
            )?;
            report.write_json(dir.join("reports").join(format!("{name}_{family}_split{k}_pruning.json")))?;
        }
    }
    Ok(())
}

/// One (N, seed) cell of the synthetic suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCell {
    pub n: usize,
    pub seed: u64,
    pub pruned: usize,
    pub hidden_units: usize,
    /// Pruned units whose incoming weights all satisfy |μ| < 0.05 and
    /// |σ − s|/s < 0.05.
    pub pruned_at_prior: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTable {
    pub cells: Vec<SyntheticCell>,
    /// `(N, mean pruned count)` in input order.
    pub mean_pruned: Vec<(usize, f64)>,
}

impl SyntheticTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,seed,pruned,hidden_units,pruned_at_prior\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{},{}", c.n, c.seed, c.pruned, c.hidden_units, c.pruned_at_prior);
        }
        out
    }

    pub fn mean_for(&self, n: usize) -> Option<f64> {
        self.mean_pruned.iter().find(|(m, _)| *m == n).map(|(_, v)| *v)
    }
}

/// Everything produced for one synthetic cell.
#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub cell: SyntheticCell,
    pub data: Dataset,
    pub teacher: TeacherSpec,
    pub posterior: VariationalPosterior,
    pub report: PruningReport,
    pub functions: FunctionTable,
}

/// Unit incoming marginals within 0.05 of the prior.
pub fn incoming_at_prior(u: &crate::diagnostics::UnitRecord, prior_std: f64) -> bool {
    u.incoming_means.iter().all(|m| m.abs() < 0.05)
        && u.incoming_stds.iter().all(|s| ((s - prior_std) / prior_std).abs() < 0.05)
}

/// Teacher data for `(n, seed)`, MF initialized at the teacher weights with
/// the noise parameter fixed at its true value, then trained.
pub fn run_synthetic_cell(
    n: usize,
    seed: u64,
    spec: &TeacherSpec,
    config: &TrainConfig,
    thresholds: PruneThresholds,
) -> Result<SyntheticRun> {
    let root = RngState::new(seed);
    let mut teacher = spec.clone();
    if teacher.true_params.is_none() {
        teacher.true_params = Some(crate::network::ParamPoint::sample_gaussian(
            spec.shape,
            spec.prior.std,
            &mut root.split("teacher-weights", 0),
        ));
    }
    let (data, truth) = generate_teacher(&teacher, n, &mut root.split("teacher-data", n as u64))?;
    teacher.true_params = Some(truth.clone());
    let q0 = init_at_truth(&truth, config.sigma_init)?;
    let mut tc = config.clone();
    tc.learn_noise = false;
    tc.seed = root.split("train", n as u64).seed();
    let outcome = train_posterior(q0, &data, None, &teacher.prior, &tc)?;
    let report = unit_report(
        &outcome.posterior,
        &teacher.prior,
        &data,
        25,
        thresholds,
        &root.split("report", n as u64),
    )?;
    let grid: Vec<f64> = (0..201)
        .map(|i| spec.input_low + (spec.input_high - spec.input_low) * i as f64 / 200.0)
        .collect();
    let functions = sample_functions(&outcome.posterior, &grid, 20, &root.split("functions", n as u64))?;
    let pruned_at_prior = report
        .units
        .iter()
        .filter(|u| u.pruned && incoming_at_prior(u, teacher.prior.std))
        .count();
    Ok(SyntheticRun {
        cell: SyntheticCell {
            n,
            seed,
            pruned: report.pruned_count,
            hidden_units: spec.shape.hidden_units,
            pruned_at_prior,
        },
        data,
        teacher,
        posterior: outcome.posterior,
        report,
        functions,
    })
}

/// Runs every `(N, seed)` cell; writes counts, datasets with teacher
/// sidecars and function samples under `out` when given.
pub fn run_synthetic_suite(
    ns: &[usize],
    seeds: &[u64],
    spec: &TeacherSpec,
    config: &TrainConfig,
    thresholds: PruneThresholds,
    out: Option<&Path>,
) -> Result<(SyntheticTable, Vec<SyntheticRun>)> {
    if ns.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("synthetic suite needs at least one N and one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = ns.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let runs: Vec<SyntheticRun> = jobs
        .par_iter()
        .map(|&(n, s)| run_synthetic_cell(n, s, spec, config, thresholds))
        .collect::<Result<_>>()?;
    let cells: Vec<SyntheticCell> = runs.iter().map(|r| r.cell.clone()).collect();
    let mean_pruned = ns
        .iter()
        .map(|&n| {
            let counts: Vec<f64> = cells.iter().filter(|c| c.n == n).map(|c| c.pruned as f64).collect();
            (n, mean(&counts))
        })
        .collect();
    let table = SyntheticTable { cells, mean_pruned };
    if let Some(dir) = out {
        create_dir(&dir.join("functions"))?;
        create_dir(&dir.join("data"))?;
        write_text(&dir.join("pruning_counts.csv"), &table.to_csv())?;
        write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&table)?)?;
        for r in &runs {
            let stem = format!("N{}_seed{}", r.cell.n, r.cell.seed);
            r.functions.write_csv(dir.join("functions").join(format!("{stem}.csv")))?;
            r.data.write_csv(dir.join("data").join(format!("{stem}.csv")))?;
            write_text(
                &dir.join("data").join(format!("{stem}.json")),
                &serde_json::to_string_pretty(&r.teacher)?,
            )?;
        }
    }
    Ok((table, runs))
}
