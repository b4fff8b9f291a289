//! Core data types, CSV ingestion and landmark-dataset construction.
//!
//! Longitudinal measurements are stored in long format, one record per
//! `(subject, covariate, time)`. Survival outcomes and baseline covariates
//! live in a [`SubjectTable`]. Both are validated on construction and are
//! immutable afterwards.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One longitudinal measurement `y_il(t_ij)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub subject_id: String,
    pub covariate: String,
    pub time: f64,
    pub value: f64,
}

/// Long-format repeated measurements, sorted by `(subject, covariate, time)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LongitudinalDataset {
    records: Vec<Measurement>,
    covariates: Vec<String>,
}

impl LongitudinalDataset {
    pub fn new(mut records: Vec<Measurement>) -> Result<Self> {
        for r in &records {
            if !r.time.is_finite() || r.time < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "measurement time {} for subject {} is not a nonnegative finite number",
                    r.time, r.subject_id
                )));
            }
            if !r.value.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "measurement value for subject {} covariate {} at time {} is not finite",
                    r.subject_id, r.covariate, r.time
                )));
            }
        }
        records.sort_by(|a, b| {
            a.subject_id
                .cmp(&b.subject_id)
                .then_with(|| a.covariate.cmp(&b.covariate))
                .then_with(|| a.time.total_cmp(&b.time))
        });
        for w in records.windows(2) {
            if w[0].subject_id == w[1].subject_id
                && w[0].covariate == w[1].covariate
                && w[0].time == w[1].time
            {
                return Err(Error::DuplicateMeasurement {
                    subject: w[0].subject_id.clone(),
                    covariate: w[0].covariate.clone(),
                    time: w[0].time,
                });
            }
        }
        let covariates: BTreeSet<&str> = records.iter().map(|r| r.covariate.as_str()).collect();
        let covariates = covariates.into_iter().map(str::to_owned).collect();
        Ok(Self {
            records,
            covariates,
        })
    }

    pub fn records(&self) -> &[Measurement] {
        &self.records
    }

    /// Sorted distinct covariate names.
    pub fn covariates(&self) -> &[String] {
        &self.covariates
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one subject and covariate, in time order.
    pub fn series(&self, subject_id: &str, covariate: &str) -> &[Measurement] {
        let start = self.records.partition_point(|r| {
            (r.subject_id.as_str(), r.covariate.as_str()) < (subject_id, covariate)
        });
        let end = start
            + self.records[start..]
                .iter()
                .take_while(|r| r.subject_id == subject_id && r.covariate == covariate)
                .count();
        &self.records[start..end]
    }

    /// Keep only the named covariates. Unknown names are an error.
    pub fn select_covariates(&self, names: &[String]) -> Result<Self> {
        for n in names {
            if !self.covariates.contains(n) {
                return Err(Error::InvalidInput(format!(
                    "longitudinal covariate '{n}' not present in data"
                )));
            }
        }
        let keep: BTreeSet<&String> = names.iter().collect();
        Self::new(
            self.records
                .iter()
                .filter(|r| keep.contains(&r.covariate))
                .cloned()
                .collect(),
        )
    }

    /// Keep only measurements of subjects in `subjects`.
    pub fn for_subjects(&self, subjects: &SubjectTable) -> Self {
        let ids: BTreeSet<&str> = subjects.rows().iter().map(|s| s.id.as_str()).collect();
        self.filter(|r| ids.contains(r.subject_id.as_str()))
    }

    fn filter(&self, pred: impl Fn(&Measurement) -> bool) -> Self {
        let records: Vec<_> = self.records.iter().filter(|r| pred(r)).cloned().collect();
        // Filtering a valid sorted set keeps it valid and sorted.
        Self {
            records,
            covariates: self.covariates.clone(),
        }
    }
}

/// Survival outcome and baseline covariates of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Observed time `t_i = min(event, censoring)`.
    pub time: f64,
    pub event: bool,
    /// Incidence covariates `X_i`.
    pub x: Vec<f64>,
    /// Latency covariates `Z_i`.
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubjectTable {
    rows: Vec<Subject>,
    x_names: Vec<String>,
    z_names: Vec<String>,
}

impl SubjectTable {
    pub fn new(rows: Vec<Subject>, x_names: Vec<String>, z_names: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate subject id '{}'", r.id)));
            }
            if !(r.time.is_finite() && r.time > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "subject {} has non-positive or non-finite time {}",
                    r.id, r.time
                )));
            }
            if r.x.len() != x_names.len() || r.z.len() != z_names.len() {
                return Err(Error::InvalidInput(format!(
                    "subject {} has covariate vectors of inconsistent length",
                    r.id
                )));
            }
            if r.x.iter().chain(&r.z).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "subject {} has a missing or non-finite baseline covariate",
                    r.id
                )));
            }
        }
        Ok(Self {
            rows,
            x_names,
            z_names,
        })
    }

    pub fn rows(&self) -> &[Subject] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn get(&self, id: &str) -> Option<&Subject> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Subset of rows, keeping column names.
    pub fn subset(&self, keep: impl Fn(&Subject) -> bool) -> Self {
        Self {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
        }
    }

    /// Rows at the given positions, in that order.
    pub fn take(&self, idx: &[usize]) -> Self {
        Self {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
        }
    }
}

/// Which subject-table columns feed the incidence (`X`) and latency (`Z`)
/// components.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub incidence: Vec<String>,
    pub latency: Vec<String>,
}

impl ColumnRoles {
    /// Default roles: columns named `x*` are incidence covariates, `z*` latency.
    pub fn infer(extra_columns: &[String]) -> Self {
        let incidence = extra_columns
            .iter()
            .filter(|c| c.starts_with('x'))
            .cloned()
            .collect();
        let latency = extra_columns
            .iter()
            .filter(|c| c.starts_with('z'))
            .cloned()
            .collect();
        Self { incidence, latency }
    }
}

fn schema(file: &Path, message: impl Into<String>) -> Error {
    Error::Schema {
        file: file.display().to_string(),
        message: message.into(),
    }
}

fn parse_f64(file: &Path, line: usize, col: &str, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| schema(file, format!("line {line}: column '{col}' is not numeric: '{raw}'")))
}

/// Parse a longitudinal CSV with header `subject_id,covariate,time,value`.
pub fn read_longitudinal(path: &Path) -> Result<LongitudinalDataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let headers = rdr.headers()?.clone();
    let want = ["subject_id", "covariate", "time", "value"];
    let pos: Vec<usize> = want
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h.trim() == *w)
                .ok_or_else(|| schema(path, format!("missing column '{w}'")))
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let line = k + 2;
        let field = |i: usize| row.get(pos[i]).unwrap_or("");
        records.push(Measurement {
            subject_id: field(0).trim().to_owned(),
            covariate: field(1).trim().to_owned(),
            time: parse_f64(path, line, "time", field(2))?,
            value: parse_f64(path, line, "value", field(3))?,
        });
    }
    LongitudinalDataset::new(records)
}

/// Header of a subjects CSV.
pub fn subject_columns(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    Ok(rdr.headers()?.iter().map(|h| h.trim().to_owned()).collect())
}

/// Parse a subjects CSV with header `subject_id,time,event,...`. Extra
/// columns are assigned by `roles`; `None` infers roles from column names.
pub fn read_subjects(path: &Path, roles: Option<&ColumnRoles>) -> Result<SubjectTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema(path, format!("missing column '{name}'")))
    };
    let (id_c, t_c, e_c) = (col("subject_id")?, col("time")?, col("event")?);
    let extra: Vec<String> = headers
        .iter()
        .filter(|h| !matches!(h.as_str(), "subject_id" | "time" | "event"))
        .cloned()
        .collect();
    let roles = roles.cloned().unwrap_or_else(|| ColumnRoles::infer(&extra));
    let x_cols = roles
        .incidence
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>>>()?;
    let z_cols = roles
        .latency
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let event = match get(e_c).trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(schema(
                    path,
                    format!("line {line}: event must be 0 or 1, got '{other}'"),
                ))
            }
        };
        let x = x_cols
            .iter()
            .map(|&c| parse_f64(path, line, &headers[c], get(c)))
            .collect::<Result<_>>()?;
        let z = z_cols
            .iter()
            .map(|&c| parse_f64(path, line, &headers[c], get(c)))
            .collect::<Result<_>>()?;
        rows.push(Subject {
            id: get(id_c).trim().to_owned(),
            time: parse_f64(path, line, "time", get(t_c))?,
            event,
            x,
            z,
        });
    }
    SubjectTable::new(rows, roles.incidence, roles.latency)
}

fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => schema(path, format!("{other:?}")),
    }
}

fn check_references(long: &LongitudinalDataset, subj: &SubjectTable) -> Result<()> {
    let ids: BTreeSet<&str> = subj.rows().iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = long
        .records()
        .iter()
        .find(|r| !ids.contains(r.subject_id.as_str()))
    {
        return Err(Error::Referential(format!(
            "longitudinal record references unknown subject '{}'",
            r.subject_id
        )));
    }
    Ok(())
}

/// Load and cross-validate a longitudinal/subjects file pair.
pub fn load_datasets(
    longitudinal_path: &Path,
    subjects_path: &Path,
    roles: Option<&ColumnRoles>,
) -> Result<(LongitudinalDataset, SubjectTable)> {
    let long = read_longitudinal(longitudinal_path)?;
    let subj = read_subjects(subjects_path, roles)?;
    check_references(&long, &subj)?;
    Ok((long, subj))
}

/// Write a longitudinal CSV. Floats use shortest round-trip formatting,
/// which always carries at least 15 significant digits of precision.
pub fn write_longitudinal(path: &Path, long: &LongitudinalDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    w.write_record(["subject_id", "covariate", "time", "value"])?;
    for r in long.records() {
        w.write_record([
            r.subject_id.as_str(),
            r.covariate.as_str(),
            &fmt_f64(r.time),
            &fmt_f64(r.value),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_subjects(path: &Path, subj: &SubjectTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let mut header = vec!["subject_id".to_owned(), "time".into(), "event".into()];
    header.extend(subj.x_names().iter().cloned());
    header.extend(subj.z_names().iter().cloned());
    w.write_record(&header)?;
    for r in subj.rows() {
        let mut rec = vec![
            r.id.clone(),
            fmt_f64(r.time),
            if r.event { "1" } else { "0" }.to_owned(),
        ];
        rec.extend(r.x.iter().chain(&r.z).map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Shortest representation that round-trips to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NA".to_owned()
    } else {
        format!("{v:?}")
    }
}

/// Landmark time and prediction horizons, both in study time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkConfig {
    landmark: f64,
    horizons: Vec<f64>,
}

impl LandmarkConfig {
    pub fn new(landmark: f64, horizons: Vec<f64>) -> Result<Self> {
        if !(landmark.is_finite() && landmark > 0.0) {
            return Err(Error::InvalidInput(format!(
                "landmark time must be positive, got {landmark}"
            )));
        }
        if let Some(h) = horizons.iter().find(|h| !(**h > landmark && h.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "horizon {h} is not after the landmark {landmark}"
            )));
        }
        if horizons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "horizons must be strictly increasing".into(),
            ));
        }
        Ok(Self { landmark, horizons })
    }

    pub fn landmark(&self) -> f64 {
        self.landmark
    }

    pub fn horizons(&self) -> &[f64] {
        &self.horizons
    }

    /// Horizons on the post-landmark clock.
    pub fn post_landmark_horizons(&self) -> Vec<f64> {
        self.horizons.iter().map(|h| h - self.landmark).collect()
    }
}

/// At-risk cohort at the landmark together with its truncated history.
///
/// Subject times are kept in study time so that rebuilding from a landmark
/// dataset is the identity; [`LandmarkDataset::post_landmark_time`] applies
/// the clock reset `t' = t - t_l` used by all downstream models.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkDataset {
    landmark: f64,
    subjects: SubjectTable,
    history: LongitudinalDataset,
    /// `counts[i][l]` = measurements of covariate `l` for subject `i`.
    counts: Vec<Vec<usize>>,
}

impl LandmarkDataset {
    pub fn landmark(&self) -> f64 {
        self.landmark
    }

    pub fn subjects(&self) -> &SubjectTable {
        &self.subjects
    }

    pub fn history(&self) -> &LongitudinalDataset {
        &self.history
    }

    pub fn covariates(&self) -> &[String] {
        self.history.covariates()
    }

    pub fn pre_landmark_counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn post_landmark_time(&self, i: usize) -> f64 {
        self.subjects.rows()[i].time - self.landmark
    }

    pub fn post_landmark_times(&self) -> Vec<f64> {
        (0..self.subjects.len())
            .map(|i| self.post_landmark_time(i))
            .collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.subjects.rows().iter().map(|s| s.event).collect()
    }
}

/// Restrict to subjects at risk (`t_i > t_l`) and measurements at or before
/// the landmark. Every retained subject must keep at least one measurement
/// of every longitudinal covariate present in `long`.
pub fn build_landmark_dataset(
    long: &LongitudinalDataset,
    subj: &SubjectTable,
    landmark: f64,
) -> Result<LandmarkDataset> {
    if !(landmark.is_finite() && landmark > 0.0) {
        return Err(Error::InvalidInput(format!(
            "landmark time must be positive, got {landmark}"
        )));
    }
    check_references(long, subj)?;
    let subjects = subj.subset(|s| s.time > landmark);
    if subjects.is_empty() {
        return Err(Error::EmptyRiskSet(landmark));
    }
    let at_risk: BTreeSet<&str> = subjects.rows().iter().map(|s| s.id.as_str()).collect();
    let history = long.filter(|r| r.time <= landmark && at_risk.contains(r.subject_id.as_str()));

    let cov_index: HashMap<&str, usize> = long
        .covariates()
        .iter()
        .enumerate()
        .map(|(k, c)| (c.as_str(), k))
        .collect();
    let mut by_subject: BTreeMap<&str, Vec<usize>> = at_risk
        .iter()
        .map(|id| (*id, vec![0; cov_index.len()]))
        .collect();
    for r in history.records() {
        if let Some(c) = by_subject.get_mut(r.subject_id.as_str()) {
            c[cov_index[r.covariate.as_str()]] += 1;
        }
    }
    let mut counts = Vec::with_capacity(subjects.len());
    for s in subjects.rows() {
        let c = by_subject.remove(s.id.as_str()).unwrap_or_default();
        if let Some(l) = c.iter().position(|&n| n == 0) {
            return Err(Error::MissingHistory {
                subject: s.id.clone(),
                covariate: long.covariates()[l].clone(),
            });
        }
        counts.push(c);
    }
    // Covariate names are those of the full data, even if history lost none.
    let history = LongitudinalDataset {
        records: history.records,
        covariates: long.covariates().to_vec(),
    };
    Ok(LandmarkDataset {
        landmark,
        subjects,
        history,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meas(id: &str, cov: &str, t: f64, v: f64) -> Measurement {
        Measurement {
            subject_id: id.into(),
            covariate: cov.into(),
            time: t,
            value: v,
        }
    }

    fn subject(id: &str, t: f64, e: bool) -> Subject {
        Subject {
            id: id.into(),
            time: t,
            event: e,
            x: vec![],
            z: vec![],
        }
    }

    #[test]
    fn duplicate_triple_rejected() {
        let err = LongitudinalDataset::new(vec![meas("a", "y", 1.0, 2.0), meas("a", "y", 1.0, 3.0)])
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateMeasurement { .. }));
    }

    #[test]
    fn negative_time_rejected() {
        assert!(LongitudinalDataset::new(vec![meas("a", "y", -1.0, 2.0)]).is_err());
    }

    #[test]
    fn series_lookup() {
        let long = LongitudinalDataset::new(vec![
            meas("b", "y", 2.0, 1.0),
            meas("a", "y", 1.0, 1.0),
            meas("a", "w", 0.0, 5.0),
            meas("a", "y", 0.5, 1.0),
        ])
        .unwrap();
        let s = long.series("a", "y");
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].time, 0.5);
        assert!(long.series("c", "y").is_empty());
        assert_eq!(long.covariates(), ["w", "y"]);
    }

    #[test]
    fn subject_table_invariants() {
        assert!(SubjectTable::new(vec![subject("a", 0.0, true)], vec![], vec![]).is_err());
        assert!(SubjectTable::new(
            vec![subject("a", 1.0, true), subject("a", 2.0, false)],
            vec![],
            vec![]
        )
        .is_err());
    }

    #[test]
    fn landmark_filters_subjects_and_history() {
        let long = LongitudinalDataset::new(vec![
            meas("a", "y", 1.0, 1.0),
            meas("a", "y", 3.5, 2.0),
            meas("b", "y", 1.0, 3.0),
        ])
        .unwrap();
        let subj = SubjectTable::new(
            vec![subject("a", 5.0, true), subject("b", 2.5, true)],
            vec![],
            vec![],
        )
        .unwrap();
        let lm = build_landmark_dataset(&long, &subj, 3.0).unwrap();
        assert_eq!(lm.subjects().len(), 1);
        assert_eq!(lm.subjects().rows()[0].id, "a");
        assert_eq!(lm.history().len(), 1);
        assert_eq!(lm.pre_landmark_counts(), &[vec![1]]);
        assert_eq!(lm.post_landmark_time(0), 2.0);
    }

    #[test]
    fn landmark_errors() {
        let long = LongitudinalDataset::new(vec![meas("a", "y", 4.0, 1.0)]).unwrap();
        let subj = SubjectTable::new(vec![subject("a", 5.0, true)], vec![], vec![]).unwrap();
        assert!(matches!(
            build_landmark_dataset(&long, &subj, 3.0),
            Err(Error::MissingHistory { .. })
        ));
        assert!(matches!(
            build_landmark_dataset(&long, &subj, 6.0),
            Err(Error::EmptyRiskSet(_))
        ));
    }

    #[test]
    fn landmark_config_validation() {
        assert!(LandmarkConfig::new(3.0, vec![4.0, 5.0]).is_ok());
        assert!(LandmarkConfig::new(3.0, vec![2.0]).is_err());
        assert!(LandmarkConfig::new(3.0, vec![5.0, 4.0]).is_err());
        assert!(LandmarkConfig::new(0.0, vec![]).is_err());
    }
}
