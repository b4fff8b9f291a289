//! Landmark models: summarize pre-landmark histories, fit the cure model and
//! produce post-landmark predictions for in-sample or new subjects.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cure::{fit_cure_em, CureData, CureModelFit, EmOptions};
use crate::data::{fmt_f64, LandmarkDataset, LongitudinalDataset, Subject, SubjectTable};
use crate::error::{Error, Result};
use crate::mixed::{
    fit_glmm_pql, predict_subject_random_effects, CovariateSlice, MixedModelFit, MixedModelSpec,
    SubjectSeries,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    #[serde(alias = "blup")]
    ModelBased,
    Locf,
}

impl SummaryKind {
    pub fn label(self) -> &'static str {
        match self {
            SummaryKind::ModelBased => "model_based",
            SummaryKind::Locf => "locf",
        }
    }
}

impl std::str::FromStr for SummaryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blup" | "model_based" | "model-based" => Ok(SummaryKind::ModelBased),
            "locf" => Ok(SummaryKind::Locf),
            other => Err(Error::InvalidInput(format!("unknown summary strategy '{other}'"))),
        }
    }
}

/// How longitudinal histories are reduced to latency covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummaryStrategy {
    /// Predicted random effects from one mixed model per covariate.
    ModelBased { fits: Vec<MixedModelFit> },
    /// Last observation at or before the landmark.
    Locf,
}

impl SummaryStrategy {
    pub fn kind(&self) -> SummaryKind {
        match self {
            SummaryStrategy::ModelBased { .. } => SummaryKind::ModelBased,
            SummaryStrategy::Locf => SummaryKind::Locf,
        }
    }
}

/// Last observed value of each covariate at or before `landmark`, one row
/// per subject in table order.
pub fn locf_summary(
    history: &LongitudinalDataset,
    subjects: &SubjectTable,
    covariates: &[String],
    landmark: f64,
) -> Result<Vec<Vec<f64>>> {
    subjects
        .rows()
        .iter()
        .map(|s| locf_subject(history, &s.id, covariates, landmark))
        .collect()
}

fn locf_subject(history: &LongitudinalDataset, id: &str, covariates: &[String], landmark: f64) -> Result<Vec<f64>> {
    covariates
        .iter()
        .map(|c| {
            history
                .series(id, c)
                .iter()
                .rev()
                .find(|m| m.time <= landmark)
                .map(|m| m.value)
                .ok_or_else(|| Error::MissingHistory {
                    subject: id.to_owned(),
                    covariate: c.clone(),
                })
        })
        .collect()
}

/// Modelling choices shared by every fit of a landmark model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelOptions {
    /// Mixed-model design per covariate; covariates not listed use the default.
    pub mixed_specs: BTreeMap<String, MixedModelSpec>,
    pub em: EmOptions,
}

impl ModelOptions {
    fn spec_for(&self, covariate: &str) -> MixedModelSpec {
        self.mixed_specs.get(covariate).cloned().unwrap_or_default()
    }
}

/// Fitted landmark cure model: summary strategy plus cure model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkModel {
    pub landmark: f64,
    pub covariates: Vec<String>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub summary_names: Vec<String>,
    pub strategy: SummaryStrategy,
    pub cure: CureModelFit,
}

impl LandmarkModel {
    pub fn fit(ld: &LandmarkDataset, kind: SummaryKind, opts: &ModelOptions) -> Result<Self> {
        let covariates = ld.covariates().to_vec();
        let subjects = ld.subjects();
        let strategy = match kind {
            SummaryKind::Locf => SummaryStrategy::Locf,
            SummaryKind::ModelBased => {
                let fits = covariates
                    .par_iter()
                    .map(|c| {
                        let spec = opts.spec_for(c);
                        let slice = CovariateSlice::from_history(ld.history(), subjects, c, &spec.baseline)?;
                        fit_glmm_pql(&slice, &spec)
                    })
                    .collect::<Result<Vec<_>>>()?;
                SummaryStrategy::ModelBased { fits }
            }
        };
        let summary_names = summary_names(&strategy, &covariates);
        let mut model = Self {
            landmark: ld.landmark(),
            covariates,
            x_names: subjects.x_names().to_vec(),
            z_names: subjects.z_names().to_vec(),
            summary_names,
            strategy,
            cure: CureModelFit::default(),
        };
        let summaries = model.summaries(ld.history(), subjects)?;
        let data = model.cure_data(subjects, &summaries)?;
        model.cure = fit_cure_em(&data, model.z_names.len(), &opts.em)?;
        Ok(model)
    }

    pub fn kind(&self) -> SummaryKind {
        self.strategy.kind()
    }

    /// Latency summaries for each subject of `subjects` from `history`.
    pub fn summaries(&self, history: &LongitudinalDataset, subjects: &SubjectTable) -> Result<Vec<Vec<f64>>> {
        subjects
            .rows()
            .iter()
            .map(|s| self.subject_summary(history, s))
            .collect()
    }

    fn subject_summary(&self, history: &LongitudinalDataset, subject: &Subject) -> Result<Vec<f64>> {
        match &self.strategy {
            SummaryStrategy::Locf => locf_subject(history, &subject.id, &self.covariates, self.landmark),
            SummaryStrategy::ModelBased { fits } => {
                let mut out = Vec::new();
                for fit in fits {
                    let obs: Vec<_> = history
                        .series(&subject.id, &fit.covariate)
                        .iter()
                        .filter(|m| m.time <= self.landmark)
                        .collect();
                    let baseline = fit
                        .spec
                        .baseline
                        .iter()
                        .map(|name| self.baseline_value(subject, name))
                        .collect::<Result<Vec<f64>>>()?;
                    let series = SubjectSeries {
                        subject_id: subject.id.clone(),
                        times: obs.iter().map(|m| m.time).collect(),
                        values: obs.iter().map(|m| m.value).collect(),
                        baseline,
                    };
                    let (b, singular) = predict_subject_random_effects(fit, &series)?;
                    if singular {
                        log::warn!("singular marginal covariance for subject {} ({})", subject.id, fit.covariate);
                    }
                    out.extend(b);
                }
                Ok(out)
            }
        }
    }

    fn baseline_value(&self, subject: &Subject, name: &str) -> Result<f64> {
        if let Some(k) = self.x_names.iter().position(|n| n == name) {
            Ok(subject.x[k])
        } else if let Some(k) = self.z_names.iter().position(|n| n == name) {
            Ok(subject.z[k])
        } else {
            Err(Error::InvalidInput(format!("unknown baseline covariate '{name}'")))
        }
    }

    fn check_columns(&self, subjects: &SubjectTable) -> Result<()> {
        if subjects.x_names() != self.x_names.as_slice() || subjects.z_names() != self.z_names.as_slice() {
            return Err(Error::InvalidInput(format!(
                "subject columns ({:?}; {:?}) differ from the fitted model ({:?}; {:?})",
                subjects.x_names(),
                subjects.z_names(),
                self.x_names,
                self.z_names
            )));
        }
        Ok(())
    }

    fn cure_data(&self, subjects: &SubjectTable, summaries: &[Vec<f64>]) -> Result<CureData> {
        self.check_columns(subjects)?;
        let rows = subjects.rows();
        let m = rows.len();
        let px = self.x_names.len();
        let pz = self.z_names.len() + self.summary_names.len();
        let x = DMatrix::from_fn(m, px, |i, k| rows[i].x[k]);
        let z = DMatrix::from_fn(m, pz, |i, k| {
            if k < self.z_names.len() {
                rows[i].z[k]
            } else {
                summaries[i][k - self.z_names.len()]
            }
        });
        CureData::new(
            rows.iter().map(|s| s.time - self.landmark).collect(),
            rows.iter().map(|s| s.event).collect(),
            x,
            z,
        )
    }

    /// Predictions at post-landmark `horizons` for every subject of `ld`.
    pub fn predict(&self, ld: &LandmarkDataset, horizons: &[f64]) -> Result<PredictionResult> {
        self.predict_subjects(ld.history(), ld.subjects(), horizons)
    }

    pub fn predict_subjects(
        &self,
        history: &LongitudinalDataset,
        subjects: &SubjectTable,
        horizons: &[f64],
    ) -> Result<PredictionResult> {
        self.check_columns(subjects)?;
        if let Some(h) = horizons.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "horizon {} is not after the landmark {}",
                h + self.landmark,
                self.landmark
            )));
        }
        let rows = subjects
            .rows()
            .iter()
            .map(|s| {
                let summary = self.subject_summary(history, s)?;
                Ok(self.predict_subject(s, &summary, horizons))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionResult {
            landmark: self.landmark,
            horizons: horizons.to_vec(),
            subjects: rows,
        })
    }

    /// Plug-in prediction for one subject given its latency summary.
    pub fn predict_subject(&self, subject: &Subject, summary: &[f64], horizons: &[f64]) -> SubjectPrediction {
        let eta_inc = self.cure.eta_inc(&subject.x);
        let eta_lat = self.cure.eta_lat(&subject.z, summary);
        let pi_hat = self.cure.pi(&subject.x);
        let s_u: Vec<f64> = horizons
            .iter()
            .map(|&t| self.cure.uncured_survival(t, eta_lat))
            .collect();
        let s = s_u.iter().map(|su| (1.0 - pi_hat) + pi_hat * su).collect();
        SubjectPrediction {
            subject_id: subject.id.clone(),
            time: subject.time - self.landmark,
            event: subject.event,
            pi_hat,
            eta_inc,
            eta_lat,
            s_u,
            s,
        }
    }
}

fn summary_names(strategy: &SummaryStrategy, covariates: &[String]) -> Vec<String> {
    match strategy {
        SummaryStrategy::Locf => covariates.iter().map(|c| format!("{c}:locf")).collect(),
        SummaryStrategy::ModelBased { fits } => fits
            .iter()
            .flat_map(|f| (0..f.spec.n_random()).map(move |k| format!("{}:b{k}", f.covariate)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    /// Observed post-landmark time and event indicator, carried for evaluation.
    pub time: f64,
    pub event: bool,
    pub pi_hat: f64,
    pub eta_inc: f64,
    pub eta_lat: f64,
    /// Uncured and overall survival at each horizon.
    pub s_u: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub landmark: f64,
    /// Post-landmark horizons.
    pub horizons: Vec<f64>,
    pub subjects: Vec<SubjectPrediction>,
}

impl PredictionResult {
    pub fn times(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.event).collect()
    }

    pub fn eta_inc(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.eta_inc).collect()
    }

    pub fn eta_lat(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.eta_lat).collect()
    }

    pub fn pi_hat(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.pi_hat).collect()
    }

    /// Overall survival of every subject at horizon index `k`.
    pub fn survival_at(&self, k: usize) -> Vec<f64> {
        self.subjects.iter().map(|s| s.s[k]).collect()
    }

    /// Posterior uncured probabilities under `fit` given the observed outcomes.
    pub fn posterior_q(&self, fit: &CureModelFit) -> Vec<f64> {
        fit.posterior(&self.times(), &self.events(), &self.eta_inc(), &self.eta_lat())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["subject_id", "horizon", "pi_hat", "S_u_hat", "S_hat", "eta_inc", "eta_lat"])?;
        for s in &self.subjects {
            for (k, h) in self.horizons.iter().enumerate() {
                w.write_record([
                    s.subject_id.clone(),
                    fmt_f64(h + self.landmark),
                    fmt_f64(s.pi_hat),
                    fmt_f64(s.s_u[k]),
                    fmt_f64(s.s[k]),
                    fmt_f64(s.eta_inc),
                    fmt_f64(s.eta_lat),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema {
            file: path.display().to_string(),
            message: format!("{other:?}"),
        },
    }
}

/// Rows of a prediction CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub horizon: f64,
    pub pi_hat: f64,
    #[serde(rename = "S_u_hat")]
    pub s_u_hat: f64,
    #[serde(rename = "S_hat")]
    pub s_hat: f64,
    pub eta_inc: f64,
    pub eta_lat: f64,
    /// Optional posterior uncured probability, used to weight the
    /// incidence AUC when predictions are scored without the fit.
    #[serde(default)]
    pub q: Option<f64>,
}

pub fn read_prediction_rows(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Schema {
                file: path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cure::BaselineHazard;
    use crate::data::Measurement;

    fn meas(id: &str, cov: &str, t: f64, v: f64) -> Measurement {
        Measurement {
            subject_id: id.into(),
            covariate: cov.into(),
            time: t,
            value: v,
        }
    }

    fn subjects(ids: &[&str]) -> SubjectTable {
        SubjectTable::new(
            ids.iter()
                .map(|id| Subject {
                    id: (*id).into(),
                    time: 5.0,
                    event: false,
                    x: vec![],
                    z: vec![],
                })
                .collect(),
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn locf_takes_last_value_per_covariate() {
        let long = LongitudinalDataset::new(vec![
            meas("a", "y1", 1.0, 5.0),
            meas("a", "y1", 2.0, 6.0),
            meas("a", "y1", 3.0, 7.0),
            meas("a", "y2", 0.5, 4.0),
            meas("a", "y2", 3.5, 9.0),
        ])
        .unwrap();
        let covs = vec!["y1".to_string(), "y2".to_string()];
        let out = locf_summary(&long, &subjects(&["a"]), &covs, 3.0).unwrap();
        assert_eq!(out, vec![vec![7.0, 4.0]]);
        let err = locf_summary(&long, &subjects(&["a", "b"]), &covs, 3.0).unwrap_err();
        assert!(matches!(err, Error::MissingHistory { .. }));
    }

    fn micro_model() -> LandmarkModel {
        let cure = CureModelFit {
            alpha0: 0.5,
            alpha: vec![1.0],
            beta: vec![0.3],
            psi: vec![-0.5],
            baseline: BaselineHazard::from_increments(vec![1.0, 2.0], &[0.2, 0.3], true),
            ..Default::default()
        };
        LandmarkModel {
            landmark: 3.0,
            covariates: vec!["y".into()],
            x_names: vec!["x1".into()],
            z_names: vec!["z1".into()],
            summary_names: vec!["y:locf".into()],
            strategy: SummaryStrategy::Locf,
            cure,
        }
    }

    #[test]
    fn plug_in_prediction_by_hand() {
        let model = micro_model();
        let s = Subject {
            id: "a".into(),
            time: 4.0,
            event: true,
            x: vec![0.2],
            z: vec![1.0],
        };
        let p = model.predict_subject(&s, &[2.0], &[0.5, 1.5, 2.0, 2.5]);
        let pi: f64 = 1.0 / (1.0 + (-0.7f64).exp());
        let r = (0.3f64 - 1.0).exp();
        assert!((p.pi_hat - pi).abs() < 1e-15);
        assert!((p.eta_lat - (-0.7)).abs() < 1e-15);
        assert_eq!(p.s_u[0], 1.0);
        assert_eq!(p.s[0], 1.0);
        assert!((p.s_u[1] - (-0.2 * r).exp()).abs() < 1e-15);
        assert!((p.s[2] - (1.0 - pi + pi * (-0.5 * r).exp())).abs() < 1e-15);
        assert_eq!(p.s_u[3], 0.0);
        assert!((p.s[3] - (1.0 - pi)).abs() < 1e-15);
        assert!(p.s.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(p.time, 1.0);
    }

    #[test]
    fn summary_kind_parsing() {
        assert_eq!("blup".parse::<SummaryKind>().unwrap(), SummaryKind::ModelBased);
        assert_eq!("locf".parse::<SummaryKind>().unwrap(), SummaryKind::Locf);
        assert!("mean".parse::<SummaryKind>().is_err());
    }
}
