use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use curemark::data::{
    build_landmark_dataset, load_datasets, read_subjects, subject_columns, ColumnRoles, LandmarkConfig,
    LandmarkDataset, LongitudinalDataset, SubjectTable,
};
use curemark::experiment::{cross_validate, evaluate_model, run_experiment, ExperimentConfig, MeanSd};
use curemark::metrics::{
    default_grid, determinable_status, weighted_auc_inc, write_metrics_csv, EvaluationInput, MetricReport,
};
use curemark::metrics;
use curemark::prediction::{read_prediction_rows, LandmarkModel, ModelOptions};
use curemark::simulation::{generate_dataset, write_dataset, ScenarioSpec};
use curemark::Error;

use crate::args::{DataArgs, EvaluateArgs, ExperimentArgs, FitArgs, PredictArgs, SimulateArgs};
use crate::output::Outputs;
use crate::CliError;

type CmdResult = Result<(), CliError>;

const DEFAULT_CV: [usize; 2] = [4, 10];
const DEFAULT_GRID_POINTS: usize = 10;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Column roles from explicit flags, falling back to `fallback` or, when
/// that is absent, to the `x*`/`z*` naming convention.
fn roles(
    subjects: &Path,
    incidence: &Option<Vec<String>>,
    latency: &Option<Vec<String>>,
    fallback: Option<ColumnRoles>,
) -> Result<ColumnRoles, CliError> {
    let base = match fallback {
        Some(r) => r,
        None => {
            let extra: Vec<String> = subject_columns(subjects)?
                .into_iter()
                .filter(|h| !matches!(h.as_str(), "subject_id" | "time" | "event"))
                .collect();
            ColumnRoles::infer(&extra)
        }
    };
    Ok(ColumnRoles {
        incidence: incidence.clone().unwrap_or(base.incidence),
        latency: latency.clone().unwrap_or(base.latency),
    })
}

fn load(
    longitudinal: &Path,
    subjects: &Path,
    roles: &ColumnRoles,
    covariates: Option<&[String]>,
) -> Result<(LongitudinalDataset, SubjectTable), CliError> {
    let (long, subj) = load_datasets(longitudinal, subjects, Some(roles))?;
    let long = match covariates {
        Some(c) => long.select_covariates(c)?,
        None => long,
    };
    Ok((long, subj))
}

fn load_data(d: &DataArgs, fallback: Option<ColumnRoles>) -> Result<(LongitudinalDataset, SubjectTable), CliError> {
    let r = roles(&d.subjects, &d.incidence_cols, &d.latency_cols, fallback)?;
    load(&d.longitudinal, &d.subjects, &r, d.longitudinal_cols.as_deref())
}

fn read_model(path: &Path) -> Result<LandmarkModel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::Schema {
            file: path.display().to_string(),
            message: e.to_string(),
        })
    })
}

fn model_roles(model: &LandmarkModel) -> ColumnRoles {
    ColumnRoles {
        incidence: model.x_names.clone(),
        latency: model.z_names.clone(),
    }
}

/// Post-landmark grid from study-time `grid`, or the default grid of `ld`.
fn post_grid(grid: &Option<Vec<f64>>, landmark: f64, ld: Option<&LandmarkDataset>) -> Result<Vec<f64>, CliError> {
    match grid {
        Some(g) => Ok(LandmarkConfig::new(landmark, g.clone())?.post_landmark_horizons()),
        None => {
            let ld = ld.ok_or_else(|| CliError::Usage("--grid is required here".into()))?;
            Ok(default_grid(&ld.post_landmark_times(), DEFAULT_GRID_POINTS))
        }
    }
}

pub fn simulate(a: SimulateArgs) -> CmdResult {
    let spec = ScenarioSpec::from_id(a.scenario, a.m, a.replicates as usize, a.seed)?;
    let mut outputs = Outputs::default();
    outputs.track(&a.out);
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let scenario_path = a.out.join("scenario.json");
    outputs.track(&scenario_path);
    write_json(&scenario_path, &spec)?;
    for rep in 0..spec.replicates {
        let dir = a.out.join(format!("rep-{rep}"));
        outputs.track(&dir);
        let (train, valid) = generate_dataset(&spec, rep)?;
        write_dataset(&dir, &train)?;
        if a.with_validation {
            write_dataset(&dir.join("validation"), &valid)?;
        }
    }
    log::info!("wrote {} replicate(s) to {}", spec.replicates, a.out.display());
    outputs.commit();
    Ok(())
}

pub fn fit(a: FitArgs) -> CmdResult {
    let (long, subj) = load_data(&a.data, None)?;
    let ld = build_landmark_dataset(&long, &subj, a.landmark)?;
    let mut opts = ModelOptions::default();
    opts.em.max_iter = a.max_iter;
    opts.em.tol = a.tol;
    let model = LandmarkModel::fit(&ld, a.summary, &opts)?;
    if !model.cure.converged {
        log::warn!("EM stopped after {} iterations without converging", model.cure.iterations);
    }
    let mut outputs = Outputs::default();
    outputs.track(&a.out);
    write_json(&a.out, &model)?;
    outputs.commit();
    println!(
        "{} subjects at risk, {} events, {} EM iterations, psi has {} entries",
        ld.subjects().len(),
        ld.events().iter().filter(|&&e| e).count(),
        model.cure.iterations,
        model.cure.psi.len()
    );
    Ok(())
}

pub fn predict(a: PredictArgs) -> CmdResult {
    let model = read_model(&a.fit)?;
    let horizons = LandmarkConfig::new(model.landmark, a.horizons.clone())?.post_landmark_horizons();
    let (long, subj) = load_data(&a.data, Some(model_roles(&model)))?;
    let ld = build_landmark_dataset(&long, &subj, model.landmark)?;
    let pred = model.predict(&ld, &horizons)?;
    let mut outputs = Outputs::default();
    outputs.track(&a.out);
    pred.write_csv(&a.out)?;
    outputs.commit();
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    if a.cv.is_some() {
        return evaluate_cv(&a);
    }
    let (landmark, reports) = match &a.predictions {
        Some(p) => evaluate_predictions(&a, p)?,
        None => evaluate_fits(&a)?,
    };
    for (label, r) in &reports {
        for w in &r.warnings {
            log::warn!("{label}: {w}");
        }
        println!(
            "{label}: auc_inc {} brier_inc {} c_index {}",
            show(r.auc_inc),
            show(r.brier_inc),
            show(r.c_index)
        );
    }
    let mut outputs = Outputs::default();
    outputs.track(&a.out);
    write_metrics_csv(&a.out, landmark, &reports)?;
    if let Some(j) = &a.json {
        outputs.track(j);
        let blocks: BTreeMap<&str, &MetricReport> = reports.iter().map(|(l, r)| (l.as_str(), r)).collect();
        write_json(j, &serde_json::json!({ "landmark": landmark, "reports": blocks }))?;
    }
    outputs.commit();
    Ok(())
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

fn evaluate_fits(a: &EvaluateArgs) -> Result<(f64, Vec<(String, MetricReport)>), CliError> {
    let longitudinal = a
        .longitudinal
        .as_ref()
        .ok_or_else(|| CliError::Usage("--longitudinal is required with --fit".into()))?;
    let models = a.fit.iter().map(|p| read_model(p)).collect::<Result<Vec<_>, _>>()?;
    let landmark = models[0].landmark;
    if models.iter().any(|m| m.landmark != landmark) {
        return Err(CliError::Usage("all fits must share one landmark".into()));
    }
    let mut reports: Vec<(String, MetricReport)> = Vec::new();
    let mut grid: Option<Vec<f64>> = None;
    for model in &models {
        let r = roles(&a.subjects, &a.incidence_cols, &a.latency_cols, Some(model_roles(model)))?;
        let (long, subj) = load(longitudinal, &a.subjects, &r, Some(&model.covariates))?;
        let ld = build_landmark_dataset(&long, &subj, landmark)?;
        let g = match &grid {
            Some(g) => g.clone(),
            None => post_grid(&a.grid, landmark, Some(&ld))?,
        };
        grid = Some(g.clone());
        let report = evaluate_model(model, &ld, &g)?;
        let base = model.kind().label().to_owned();
        let n_same = reports.iter().filter(|(l, _)| l == &base || l.starts_with(&format!("{base}#"))).count();
        let label = if n_same == 0 { base } else { format!("{base}#{}", n_same + 1) };
        reports.push((label, report));
    }
    Ok((landmark, reports))
}

/// Score a stored prediction CSV. Without a `q` column the incidence AUC is
/// computed on subjects whose cure status the data determine.
fn evaluate_predictions(a: &EvaluateArgs, path: &Path) -> Result<(f64, Vec<(String, MetricReport)>), CliError> {
    let landmark = a
        .landmark
        .ok_or_else(|| CliError::Usage("--landmark is required with --predictions".into()))?;
    let rows = read_prediction_rows(path)?;
    let subj = read_subjects(&a.subjects, Some(&ColumnRoles::default()))?;
    let mut horizons: Vec<f64> = rows.iter().map(|r| r.horizon).collect();
    horizons.sort_by(f64::total_cmp);
    horizons.dedup();
    let grid = LandmarkConfig::new(landmark, horizons.clone())?.post_landmark_horizons();

    let mut order: Vec<&str> = Vec::new();
    let mut by_subject: BTreeMap<&str, Vec<&curemark::prediction::PredictionRow>> = BTreeMap::new();
    for r in &rows {
        let e = by_subject.entry(r.subject_id.as_str()).or_default();
        if e.is_empty() {
            order.push(r.subject_id.as_str());
        }
        e.push(r);
    }
    let n = order.len();
    let (mut times, mut events, mut eta_inc, mut eta_lat, mut pi, mut q) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut surv = vec![vec![0.0; n]; horizons.len()];
    for (i, id) in order.iter().enumerate() {
        let s = subj
            .get(id)
            .ok_or_else(|| Error::Referential(format!("prediction for unknown subject '{id}'")))?;
        if s.time <= landmark {
            return Err(Error::Referential(format!("subject '{id}' is not at risk at the landmark {landmark}")).into());
        }
        let rs = &by_subject[id];
        for (k, h) in horizons.iter().enumerate() {
            let r = rs.iter().find(|r| r.horizon == *h).ok_or_else(|| Error::Schema {
                file: path.display().to_string(),
                message: format!("subject '{id}' has no prediction at horizon {h}"),
            })?;
            surv[k][i] = r.s_hat;
        }
        times.push(s.time - landmark);
        events.push(s.event);
        eta_inc.push(rs[0].eta_inc);
        eta_lat.push(rs[0].eta_lat);
        pi.push(rs[0].pi_hat);
        q.push(rs[0].q);
    }
    let q_given: Option<Vec<f64>> = q.iter().copied().collect();
    let mut report = metrics::evaluate(EvaluationInput {
        times: &times,
        events: &events,
        eta_inc: &eta_inc,
        q: q_given.as_deref().unwrap_or(&pi),
        pi: &pi,
        eta_lat: &eta_lat,
        surv: &surv,
        grid: &grid,
    })?;
    if q_given.is_none() {
        let status = determinable_status(&times, &events);
        let (eta, g): (Vec<f64>, Vec<f64>) = status
            .iter()
            .zip(&eta_inc)
            .filter_map(|(s, e)| s.map(|g| (*e, g)))
            .unzip();
        report.auc_inc = weighted_auc_inc(&eta, &g);
        report
            .warnings
            .push("no q column; incidence AUC uses subjects with determinable cure status".into());
    }
    let label = path.file_stem().map_or_else(|| "predictions".into(), |s| s.to_string_lossy().into_owned());
    Ok((landmark, vec![(label, report)]))
}

fn evaluate_cv(a: &EvaluateArgs) -> CmdResult {
    let cv = a.cv.as_deref().unwrap_or(&[]);
    let folds = cv.first().copied().unwrap_or(DEFAULT_CV[0]);
    let repeats = cv.get(1).copied().unwrap_or(DEFAULT_CV[1]);
    let landmark = a
        .landmark
        .ok_or_else(|| CliError::Usage("--landmark is required with --cv".into()))?;
    let longitudinal = a
        .longitudinal
        .as_ref()
        .ok_or_else(|| CliError::Usage("--longitudinal is required with --cv".into()))?;
    let r = roles(&a.subjects, &a.incidence_cols, &a.latency_cols, None)?;
    let (long, subj) = load(longitudinal, &a.subjects, &r, a.longitudinal_cols.as_deref())?;
    let ld = build_landmark_dataset(&long, &subj, landmark)?;
    let grid = post_grid(&a.grid, landmark, Some(&ld))?;
    let summaries = cross_validate(
        &long,
        &subj,
        landmark,
        &a.strategies,
        folds,
        repeats,
        a.seed,
        &grid,
        &ModelOptions::default(),
    )?;
    let mean = |m: &MeanSd| (m.n > 0).then_some(m.mean);
    let reports: Vec<(String, MetricReport)> = summaries
        .iter()
        .map(|s| {
            let mut warnings = Vec::new();
            if s.failed_folds > 0 {
                warnings.push(format!("{} of {} folds failed", s.failed_folds, folds * repeats));
            }
            (
                s.strategy.label().to_owned(),
                MetricReport {
                    auc_inc: mean(&s.auc_inc),
                    brier_inc: mean(&s.brier_inc),
                    grid: s.grid.clone(),
                    auc_lat: s.auc_lat.iter().map(mean).collect(),
                    brier_lat: s.brier_lat.iter().map(mean).collect(),
                    c_index: mean(&s.c_index),
                    warnings,
                },
            )
        })
        .collect();
    for (label, r) in &reports {
        println!(
            "{label} ({folds}x{repeats} CV): auc_inc {} brier_inc {} c_index {}",
            show(r.auc_inc),
            show(r.brier_inc),
            show(r.c_index)
        );
    }
    let mut outputs = Outputs::default();
    outputs.track(&a.out);
    write_metrics_csv(&a.out, landmark, &reports)?;
    if let Some(j) = &a.json {
        outputs.track(j);
        write_json(j, &serde_json::json!({ "landmark": landmark, "cross_validation": summaries }))?;
    }
    outputs.commit();
    Ok(())
}

pub fn experiment(a: ExperimentArgs) -> CmdResult {
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| {
                CliError::Core(Error::Schema {
                    file: p.display().to_string(),
                    message: e.to_string(),
                })
            })?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(v) = a.scenarios {
        config.scenarios = v;
    }
    if let Some(v) = a.sample_sizes {
        config.sample_sizes = v;
    }
    if let Some(v) = a.replicates {
        config.replicates = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.strategies {
        config.strategies = v;
    }
    if let Some(v) = a.grid {
        config.grid = Some(v);
    }
    if let Some(v) = a.grid_points {
        config.grid_points = v;
    }
    if let Some(v) = a.out {
        config.out_dir = Some(v);
    }
    if let Some(v) = a.jobs {
        if v == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        config.jobs = Some(v);
    }
    if config.out_dir.is_none() {
        config.out_dir = Some("experiment-out".into());
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = config.out_dir.clone().expect("set above");
    let mut outputs = Outputs::default();
    outputs.track(&out);
    let result = run_experiment(&config, &ModelOptions::default())?;
    outputs.commit();
    println!("scenario  m  strategy  auc_inc  brier_inc  c_index");
    for r in &result.incidence {
        println!(
            "{}  {}  {}  {:.3} ({:.3})  {:.3} ({:.3})  {:.3}",
            r.scenario,
            r.m,
            r.strategy.label(),
            r.auc.mean,
            r.auc.sd,
            r.brier.mean,
            r.brier.sd,
            r.c_index.mean
        );
    }
    if !result.failures.is_empty() {
        log::warn!("{} replicate(s) failed; see manifest.json", result.failures.len());
    }
    Ok(())
}
