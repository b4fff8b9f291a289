//! Monte Carlo comparison of summary strategies over simulated scenarios and
//! repeated cross-validation on a single dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_landmark_dataset, fmt_f64, LandmarkDataset, LongitudinalDataset, SubjectTable};
use crate::error::{Error, Result};
use crate::metrics::{default_grid, evaluate, EvaluationInput, MetricReport};
use crate::metrics::weighted_auc_inc;
use crate::prediction::{LandmarkModel, ModelOptions, PredictionResult, SummaryKind};
use crate::simulation::{calibrated_parameters, generate_dataset, ScenarioSpec, SubjectTruth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenarios: Vec<u32>,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub strategies: Vec<SummaryKind>,
    /// Post-landmark grid; derived from the first validation set when absent.
    pub grid: Option<Vec<f64>>,
    pub grid_points: usize,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    /// Abort when more than this fraction of replicates fails.
    pub max_failure_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenarios: (1..=12).collect(),
            sample_sizes: vec![300],
            replicates: 100,
            seed: 1,
            strategies: vec![SummaryKind::Locf, SummaryKind::ModelBased],
            grid: None,
            grid_points: 10,
            out_dir: None,
            jobs: None,
            max_failure_rate: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidInput("replicate count must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidInput("at least one summary strategy is required".into()));
        }
        if self.scenarios.is_empty() || self.sample_sizes.is_empty() {
            return Err(Error::InvalidInput("no scenarios or sample sizes given".into()));
        }
        if self.sample_sizes.contains(&0) || self.grid_points == 0 {
            return Err(Error::InvalidInput("sample sizes and grid size must be positive".into()));
        }
        if let Some(g) = &self.grid {
            if g.is_empty() || g.iter().any(|t| !(*t > 0.0)) || g.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidInput("grid must be positive and strictly increasing".into()));
            }
        }
        for &s in &self.scenarios {
            ScenarioSpec::from_id(s, 1, 1, 0)?;
        }
        Ok(())
    }
}

/// Predict `test` at `grid` and score the predictions.
pub fn evaluate_model(model: &LandmarkModel, test: &LandmarkDataset, grid: &[f64]) -> Result<MetricReport> {
    let pred = model.predict(test, grid)?;
    score_predictions(model, &pred, grid)
}

fn score_predictions(model: &LandmarkModel, pred: &PredictionResult, grid: &[f64]) -> Result<MetricReport> {
    let q = pred.posterior_q(&model.cure);
    let surv: Vec<Vec<f64>> = (0..grid.len()).map(|k| pred.survival_at(k)).collect();
    evaluate(EvaluationInput {
        times: &pred.times(),
        events: &pred.events(),
        eta_inc: &pred.eta_inc(),
        q: &q,
        pi: &pred.pi_hat(),
        eta_lat: &pred.eta_lat(),
        surv: &surv,
        grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub scenario: u32,
    pub m: usize,
    pub replicate: usize,
    pub reports: BTreeMap<SummaryKind, MetricReport>,
    pub true_status: BTreeMap<SummaryKind, TrueStatusScores>,
}

/// Incidence scores against the simulated cure status, which observed data
/// never reveal. Diagnostic only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrueStatusScores {
    pub auc_inc: Option<f64>,
    /// Unweighted mean of `(pi_hat - G)^2`.
    pub brier_inc: Option<f64>,
}

/// Score `pi_hat` against the true cure status of each predicted subject.
pub fn true_status_scores(pred: &PredictionResult, truth: &[SubjectTruth]) -> Result<TrueStatusScores> {
    let status: BTreeMap<&str, f64> = truth
        .iter()
        .map(|t| (t.subject_id.as_str(), if t.uncured { 1.0 } else { 0.0 }))
        .collect();
    let g = pred
        .subjects
        .iter()
        .map(|s| {
            status
                .get(s.subject_id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("no truth for subject {}", s.subject_id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = g.len();
    let brier_inc = (n > 0).then(|| {
        pred.pi_hat().iter().zip(&g).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n as f64
    });
    Ok(TrueStatusScores {
        auc_inc: weighted_auc_inc(&pred.eta_inc(), &g),
        brier_inc,
    })
}

/// Generate, fit every strategy and evaluate on the validation set.
pub fn run_replicate(
    spec: &ScenarioSpec,
    replicate: usize,
    strategies: &[SummaryKind],
    grid: &[f64],
    opts: &ModelOptions,
) -> Result<ReplicateOutcome> {
    let (train, valid) = generate_dataset(spec, replicate)?;
    let train = build_landmark_dataset(&train.longitudinal, &train.subjects, spec.landmark)?;
    let valid_truth = valid.truth;
    let valid = build_landmark_dataset(&valid.longitudinal, &valid.subjects, spec.landmark)?;
    let mut reports = BTreeMap::new();
    let mut true_status = BTreeMap::new();
    for &kind in strategies {
        let model = LandmarkModel::fit(&train, kind, opts)?;
        let pred = model.predict(&valid, grid)?;
        reports.insert(kind, score_predictions(&model, &pred, grid)?);
        true_status.insert(kind, true_status_scores(&pred, &valid_truth)?);
    }
    Ok(ReplicateOutcome {
        scenario: spec.scenario_id,
        m: spec.m,
        replicate,
        reports,
        true_status,
    })
}

/// Default grid of a scenario: from the validation set of replicate 0.
pub fn scenario_grid(spec: &ScenarioSpec, n: usize) -> Result<Vec<f64>> {
    let (_, valid) = generate_dataset(spec, 0)?;
    let times: Vec<f64> = valid
        .subjects
        .rows()
        .iter()
        .map(|s| s.time - spec.landmark)
        .collect();
    Ok(default_grid(&times, n))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, sd, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceRow {
    pub scenario: u32,
    pub m: usize,
    pub strategy: SummaryKind,
    pub auc: MeanSd,
    pub brier: MeanSd,
    pub c_index: MeanSd,
    /// AUC and Brier of `pi_hat` against the simulated cure status.
    pub true_auc: MeanSd,
    pub true_brier: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub scenario: u32,
    pub m: usize,
    pub strategy: SummaryKind,
    /// Post-landmark time.
    pub time: f64,
    pub auc: MeanSd,
    pub brier: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub scenario: u32,
    pub m: usize,
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub incidence: Vec<IncidenceRow>,
    pub curves: Vec<CurveRow>,
    pub grids: BTreeMap<String, Vec<f64>>,
    pub failures: Vec<Failure>,
    pub completed: usize,
}

impl ExperimentResult {
    pub fn incidence_row(&self, scenario: u32, m: usize, strategy: SummaryKind) -> Option<&IncidenceRow> {
        self.incidence
            .iter()
            .find(|r| r.scenario == scenario && r.m == m && r.strategy == strategy)
    }

    pub fn curve(&self, scenario: u32, m: usize, strategy: SummaryKind) -> Vec<&CurveRow> {
        self.curves
            .iter()
            .filter(|r| r.scenario == scenario && r.m == m && r.strategy == strategy)
            .collect()
    }
}

fn grid_key(scenario: u32, m: usize) -> String {
    format!("scenario-{scenario}-m{m}")
}

/// Run the whole grid. Replicates run on a pool of `config.jobs` threads;
/// aggregation happens afterwards in a fixed order, so the result depends
/// only on the configuration.
pub fn run_experiment(config: &ExperimentConfig, opts: &ModelOptions) -> Result<ExperimentResult> {
    config.validate()?;
    let mut cells = Vec::new();
    let mut grids = BTreeMap::new();
    for &scenario in &config.scenarios {
        for &m in &config.sample_sizes {
            let spec = ScenarioSpec::from_id(scenario, m, config.replicates, config.seed)?;
            let grid = match &config.grid {
                Some(g) => g.clone(),
                None => scenario_grid(&spec, config.grid_points)?,
            };
            grids.insert(grid_key(scenario, m), grid);
            cells.push(spec);
        }
    }
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.replicates).map(move |r| (c, r)))
        .collect();
    let work = || {
        tasks
            .par_iter()
            .map(|&(c, r)| {
                let spec = &cells[c];
                let grid = &grids[&grid_key(spec.scenario_id, spec.m)];
                let out = run_replicate(spec, r, &config.strategies, grid, opts);
                if let Err(e) = &out {
                    log::warn!("scenario {} m={} replicate {r} failed: {e}", spec.scenario_id, spec.m);
                }
                out
            })
            .collect::<Vec<_>>()
    };
    let outcomes = match config.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut failures = Vec::new();
    let mut ok: Vec<ReplicateOutcome> = Vec::new();
    for (&(c, r), out) in tasks.iter().zip(outcomes) {
        match out {
            Ok(o) => ok.push(o),
            Err(e) => failures.push(Failure {
                scenario: cells[c].scenario_id,
                m: cells[c].m,
                replicate: r,
                error: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > config.max_failure_rate * tasks.len() as f64 {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: tasks.len(),
        });
    }

    let mut incidence = Vec::new();
    let mut curves = Vec::new();
    for spec in &cells {
        let grid = &grids[&grid_key(spec.scenario_id, spec.m)];
        for &kind in &config.strategies {
            let cell: Vec<&ReplicateOutcome> = ok
                .iter()
                .filter(|o| o.scenario == spec.scenario_id && o.m == spec.m)
                .collect();
            let reps: Vec<&MetricReport> = cell.iter().filter_map(|o| o.reports.get(&kind)).collect();
            let truth: Vec<&TrueStatusScores> = cell.iter().filter_map(|o| o.true_status.get(&kind)).collect();
            incidence.push(IncidenceRow {
                scenario: spec.scenario_id,
                m: spec.m,
                strategy: kind,
                auc: MeanSd::of(reps.iter().map(|r| r.auc_inc)),
                brier: MeanSd::of(reps.iter().map(|r| r.brier_inc)),
                c_index: MeanSd::of(reps.iter().map(|r| r.c_index)),
                true_auc: MeanSd::of(truth.iter().map(|r| r.auc_inc)),
                true_brier: MeanSd::of(truth.iter().map(|r| r.brier_inc)),
            });
            for (k, &t) in grid.iter().enumerate() {
                curves.push(CurveRow {
                    scenario: spec.scenario_id,
                    m: spec.m,
                    strategy: kind,
                    time: t,
                    auc: MeanSd::of(reps.iter().map(|r| r.auc_lat[k])),
                    brier: MeanSd::of(reps.iter().map(|r| r.brier_lat[k])),
                });
            }
        }
    }
    let result = ExperimentResult {
        incidence,
        curves,
        grids,
        failures,
        completed: ok.len(),
    };
    if let Some(dir) = &config.out_dir {
        write_experiment(dir, config, &result)?;
    }
    Ok(result)
}

fn na(v: f64) -> String {
    fmt_f64(v)
}

/// `incidence_table.csv`, `latency_curves.csv`, `summary.json` and
/// `manifest.json`.
pub fn write_experiment(dir: &Path, config: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("incidence_table.csv"))?;
    w.write_record([
        "scenario", "m", "strategy", "n", "auc_mean", "auc_sd", "brier_mean", "brier_sd", "c_index_mean",
        "c_index_sd",
        "true_auc_mean",
        "true_brier_mean",
    ])?;
    for r in &result.incidence {
        w.write_record([
            r.scenario.to_string(),
            r.m.to_string(),
            r.strategy.label().to_owned(),
            r.auc.n.to_string(),
            na(r.auc.mean),
            na(r.auc.sd),
            na(r.brier.mean),
            na(r.brier.sd),
            na(r.c_index.mean),
            na(r.c_index.sd),
            na(r.true_auc.mean),
            na(r.true_brier.mean),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let landmark = crate::simulation::LANDMARK;
    let mut w = csv::Writer::from_path(dir.join("latency_curves.csv"))?;
    w.write_record([
        "scenario", "m", "strategy", "time", "n", "auc_mean", "auc_sd", "brier_mean", "brier_sd",
    ])?;
    for r in &result.curves {
        w.write_record([
            r.scenario.to_string(),
            r.m.to_string(),
            r.strategy.label().to_owned(),
            fmt_f64(r.time + landmark),
            r.auc.n.to_string(),
            na(r.auc.mean),
            na(r.auc.sd),
            na(r.brier.mean),
            na(r.brier.sd),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let summary = serde_json::to_string_pretty(result)?;
    fs::write(dir.join("summary.json"), summary).map_err(|e| Error::io(dir, e))?;

    let calibration: BTreeMap<u32, (f64, f64)> = config
        .scenarios
        .iter()
        .map(|&s| {
            let spec = ScenarioSpec::from_id(s, 1, 1, config.seed).expect("validated scenario");
            (s, calibrated_parameters(spec.mechanism))
        })
        .collect();
    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "seed": config.seed,
        "calibration_scale_rate": calibration,
        "grids_post_landmark": result.grids,
        "replicates_completed": result.completed,
        "replicates_failed": result.failures.len(),
        "failures": result.failures,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Aggregated metrics of repeated k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub strategy: SummaryKind,
    pub folds: usize,
    pub repeats: usize,
    pub grid: Vec<f64>,
    pub auc_inc: MeanSd,
    pub brier_inc: MeanSd,
    pub c_index: MeanSd,
    pub auc_lat: Vec<MeanSd>,
    pub brier_lat: Vec<MeanSd>,
    pub failed_folds: usize,
}

/// Repeated k-fold cross-validation of each strategy on one dataset. Folds
/// partition the at-risk subjects; `grid` is post-landmark.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    long: &LongitudinalDataset,
    subjects: &SubjectTable,
    landmark: f64,
    strategies: &[SummaryKind],
    folds: usize,
    repeats: usize,
    seed: u64,
    grid: &[f64],
    opts: &ModelOptions,
) -> Result<Vec<CvSummary>> {
    if folds < 2 || repeats == 0 {
        return Err(Error::InvalidInput("cross-validation needs at least 2 folds and 1 repeat".into()));
    }
    let full = build_landmark_dataset(long, subjects, landmark)?;
    let at_risk = full.subjects();
    if at_risk.len() < folds {
        return Err(Error::InvalidInput(format!(
            "{} at-risk subjects cannot fill {folds} folds",
            at_risk.len()
        )));
    }
    let tasks: Vec<(usize, usize)> = (0..repeats).flat_map(|r| (0..folds).map(move |f| (r, f))).collect();
    let assignments: Vec<Vec<usize>> = (0..repeats)
        .map(|r| {
            let mut idx: Vec<usize> = (0..at_risk.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            idx.shuffle(&mut rng);
            let mut fold = vec![0; idx.len()];
            for (pos, &i) in idx.iter().enumerate() {
                fold[i] = pos % folds;
            }
            fold
        })
        .collect();
    let outcomes: Vec<Result<BTreeMap<SummaryKind, MetricReport>>> = tasks
        .par_iter()
        .map(|&(r, f)| {
            let train_idx: Vec<usize> = (0..at_risk.len()).filter(|&i| assignments[r][i] != f).collect();
            let test_idx: Vec<usize> = (0..at_risk.len()).filter(|&i| assignments[r][i] == f).collect();
            let (train, test) = (at_risk.take(&train_idx), at_risk.take(&test_idx));
            let train = build_landmark_dataset(&full.history().for_subjects(&train), &train, landmark)?;
            let test = build_landmark_dataset(&full.history().for_subjects(&test), &test, landmark)?;
            strategies
                .iter()
                .map(|&k| {
                    let model = LandmarkModel::fit(&train, k, opts)?;
                    Ok((k, evaluate_model(&model, &test, grid)?))
                })
                .collect()
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    for e in outcomes.iter().filter_map(|o| o.as_ref().err()) {
        log::warn!("cross-validation fold failed: {e}");
    }
    if failed == tasks.len() {
        return Err(outcomes.into_iter().find_map(|o| o.err()).expect("at least one failure"));
    }
    let ok: Vec<&BTreeMap<SummaryKind, MetricReport>> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    Ok(strategies
        .iter()
        .map(|k| {
            let reps: Vec<&MetricReport> = ok.iter().filter_map(|m| m.get(k)).collect();
            CvSummary {
                strategy: *k,
                folds,
                repeats,
                grid: grid.to_vec(),
                auc_inc: MeanSd::of(reps.iter().map(|r| r.auc_inc)),
                brier_inc: MeanSd::of(reps.iter().map(|r| r.brier_inc)),
                c_index: MeanSd::of(reps.iter().map(|r| r.c_index)),
                auc_lat: (0..grid.len()).map(|j| MeanSd::of(reps.iter().map(|r| r.auc_lat[j]))).collect(),
                brier_lat: (0..grid.len()).map(|j| MeanSd::of(reps.iter().map(|r| r.brier_lat[j]))).collect(),
                failed_folds: failed,
            }
        })
        .collect())
}
