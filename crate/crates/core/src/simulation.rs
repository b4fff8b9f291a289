//! Simulated landmark studies with a cure fraction, four baseline and four
//! longitudinal covariates, in twelve scenarios crossing cure fraction,
//! measurement design and the way the longitudinal process drives the
//! hazard of uncured subjects.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, write_longitudinal, write_subjects, LongitudinalDataset, Measurement, Subject, SubjectTable};
use crate::error::{Error, Result};

pub const LANDMARK: f64 = 3.0;
pub const N_BALANCED: usize = 10;
pub const N_COVARIATES: usize = 4;
pub const INCIDENCE_COEF: [f64; 4] = [-1.0, 0.0, 1.0, 0.0];
pub const LATENCY_COEF: [f64; 4] = [1.0, 0.0, -1.0, 0.0];
pub const WEIBULL_SHAPE: f64 = 1.5;
/// Administrative end of follow-up after the landmark.
pub const FOLLOW_UP: f64 = 10.0;
pub const INTERCEPT_SD: f64 = 1.0;
pub const SLOPE_VAR: f64 = 0.7;
pub const NOISE_SD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Balanced,
    Unbalanced,
}

/// How the latency hazard depends on the longitudinal covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Noisy measurement at the landmark, taken before any deletion.
    StrongLocf,
    /// Noiseless trajectory value at the landmark.
    MildCurrentValue,
    /// Sum of the random intercept and slope.
    TrueRandomEffects,
}

/// Weibull scale and exponential censoring rate per mechanism, calibrated by
/// [`calibrate`] so that 70% of uncured subjects have an observed event and
/// 25% are censored before the end of follow-up. The cure fraction does not
/// enter: latency covariates are independent of the incidence covariates.
pub fn calibrated_parameters(mechanism: Mechanism) -> (f64, f64) {
    match mechanism {
        Mechanism::StrongLocf => (1.153_541_364_870_508_8, 0.128_626_700_978_063_7),
        Mechanism::MildCurrentValue => (1.277_175_579_999_737, 0.125_680_347_610_868_85),
        Mechanism::TrueRandomEffects => (2.859_194_225_131_989, 0.096_544_452_285_419_41),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario_id: u32,
    pub alpha0: f64,
    pub design: Design,
    pub mechanism: Mechanism,
    pub m: usize,
    pub landmark: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Scenario `id` (1 to 12): mechanisms in blocks of four, then cure
    /// fraction 20% / 40% in pairs, then balanced / unbalanced.
    pub fn from_id(id: u32, m: usize, replicates: usize, seed: u64) -> Result<Self> {
        if !(1..=12).contains(&id) {
            return Err(Error::InvalidInput(format!("scenario must be between 1 and 12, got {id}")));
        }
        let k = id - 1;
        let mechanism = match k / 4 {
            0 => Mechanism::StrongLocf,
            1 => Mechanism::MildCurrentValue,
            _ => Mechanism::TrueRandomEffects,
        };
        let alpha0 = if k % 4 < 2 { 2.0 } else { 0.65 };
        let design = if k % 2 == 0 { Design::Balanced } else { Design::Unbalanced };
        Ok(Self {
            scenario_id: id,
            alpha0,
            design,
            mechanism,
            m,
            landmark: LANDMARK,
            replicates,
            seed,
        })
    }

    /// Nominal cure fraction of the scenario.
    pub fn cure_fraction(&self) -> f64 {
        if self.alpha0 > 1.0 {
            0.20
        } else {
            0.40
        }
    }
}

/// Latent quantities of one simulated subject, never used for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub uncured: bool,
    /// Random intercepts and slopes per covariate.
    pub b0: [f64; 4],
    pub b1: [f64; 4],
    /// Latency summary of the generating mechanism.
    pub summary: [f64; 4],
    /// Post-landmark event time (infinite for cured subjects).
    pub event_time: f64,
    pub censor_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub longitudinal: LongitudinalDataset,
    pub subjects: SubjectTable,
    pub truth: Vec<SubjectTruth>,
}

/// Balanced measurement times `0, 1/3, ..., 3`.
pub fn balanced_times() -> [f64; N_BALANCED] {
    std::array::from_fn(|j| LANDMARK * j as f64 / (N_BALANCED - 1) as f64)
}

pub fn covariate_names() -> Vec<String> {
    (1..=N_COVARIATES).map(|l| format!("y{l}")).collect()
}

/// Latent state used by [`latency_summary_for_mechanism`].
#[derive(Debug, Clone, Copy)]
pub struct LatentState<'a> {
    pub b0: &'a [f64; 4],
    pub b1: &'a [f64; 4],
    /// Noisy value at the landmark for each covariate, before deletion.
    pub landmark_measurement: &'a [f64; 4],
    pub landmark: f64,
}

pub fn latency_summary_for_mechanism(mechanism: Mechanism, s: LatentState<'_>) -> [f64; 4] {
    std::array::from_fn(|l| match mechanism {
        Mechanism::StrongLocf => s.landmark_measurement[l],
        Mechanism::MildCurrentValue => s.b0[l] + s.b1[l] * s.landmark,
        Mechanism::TrueRandomEffects => s.b0[l] + s.b1[l],
    })
}

/// Inverse-transform draw from the PH Weibull with cumulative hazard
/// `(t / scale)^shape exp(eta)`.
pub fn sample_event_time<R: Rng + ?Sized>(eta: f64, shape: f64, scale: f64, rng: &mut R) -> f64 {
    let u: f64 = 1.0 - rng.random::<f64>();
    scale * (-u.ln() / eta.exp()).powf(1.0 / shape)
}

/// Closed-form survival of [`sample_event_time`].
pub fn weibull_survival(t: f64, eta: f64, shape: f64, scale: f64) -> f64 {
    (-(t / scale).powf(shape) * eta.exp()).exp()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Independent stream for (scenario, replicate, split).
pub fn stream_rng(seed: u64, scenario_id: u32, replicate: usize, validation: bool) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((scenario_id as u64) << 40) | ((replicate as u64) << 1) | u64::from(validation));
    rng
}

struct DrawnSubject {
    x: [f64; 4],
    uncured: bool,
    b0: [f64; 4],
    b1: [f64; 4],
    values: [[f64; N_BALANCED]; 4],
    kept: Vec<usize>,
    summary: [f64; 4],
}

fn draw_subject<R: Rng>(spec: &ScenarioSpec, rng: &mut R) -> DrawnSubject {
    let times = balanced_times();
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let x: [f64; 4] = std::array::from_fn(|_| normal());
    let b0: [f64; 4] = std::array::from_fn(|_| INTERCEPT_SD * normal());
    let b1: [f64; 4] = std::array::from_fn(|_| SLOPE_VAR.sqrt() * normal());
    let values: [[f64; N_BALANCED]; 4] =
        std::array::from_fn(|l| std::array::from_fn(|j| b0[l] + b1[l] * times[j] + NOISE_SD * normal()));
    let eta_inc = spec.alpha0 + INCIDENCE_COEF.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>();
    let uncured = rng.random::<f64>() < logistic(eta_inc);
    let kept = match spec.design {
        Design::Balanced => (0..N_BALANCED).collect(),
        Design::Unbalanced => {
            let m_i = rng.random_range(5..=N_BALANCED);
            let mut rest: Vec<usize> = (1..N_BALANCED).collect();
            // Partial Fisher-Yates: the first m_i - 1 entries are a uniform subset.
            for k in 0..m_i - 1 {
                let j = rng.random_range(k..rest.len());
                rest.swap(k, j);
            }
            let mut kept = vec![0];
            kept.extend_from_slice(&rest[..m_i - 1]);
            kept.sort_unstable();
            kept
        }
    };
    let last: [f64; 4] = std::array::from_fn(|l| values[l][N_BALANCED - 1]);
    let summary = latency_summary_for_mechanism(
        spec.mechanism,
        LatentState {
            b0: &b0,
            b1: &b1,
            landmark_measurement: &last,
            landmark: spec.landmark,
        },
    );
    DrawnSubject {
        x,
        uncured,
        b0,
        b1,
        values,
        kept,
        summary,
    }
}

fn latency_eta(summary: &[f64; 4]) -> f64 {
    LATENCY_COEF.iter().zip(summary).map(|(b, v)| b * v).sum()
}

fn generate_split(spec: &ScenarioSpec, replicate: usize, validation: bool) -> Result<GeneratedDataset> {
    let mut rng = stream_rng(spec.seed, spec.scenario_id, replicate, validation);
    let (scale, rate) = calibrated_parameters(spec.mechanism);
    let times = balanced_times();
    let names = covariate_names();
    let prefix = if validation { "v" } else { "s" };
    let mut records = Vec::with_capacity(spec.m * N_COVARIATES * N_BALANCED);
    let mut rows = Vec::with_capacity(spec.m);
    let mut truth = Vec::with_capacity(spec.m);
    for i in 0..spec.m {
        let id = format!("{prefix}{:05}", i + 1);
        let d = draw_subject(spec, &mut rng);
        let event_time = if d.uncured {
            sample_event_time(latency_eta(&d.summary), WEIBULL_SHAPE, scale, &mut rng)
        } else {
            f64::INFINITY
        };
        let censor_time: f64 = Exp1.sample(&mut rng);
        let censor_time = censor_time / rate;
        let observed = event_time.min(censor_time).min(FOLLOW_UP);
        for (l, name) in names.iter().enumerate() {
            for &j in &d.kept {
                records.push(Measurement {
                    subject_id: id.clone(),
                    covariate: name.clone(),
                    time: times[j],
                    value: d.values[l][j],
                });
            }
        }
        rows.push(Subject {
            id: id.clone(),
            time: spec.landmark + observed,
            event: event_time <= censor_time.min(FOLLOW_UP),
            x: d.x.to_vec(),
            z: vec![],
        });
        truth.push(SubjectTruth {
            subject_id: id,
            uncured: d.uncured,
            b0: d.b0,
            b1: d.b1,
            summary: d.summary,
            event_time,
            censor_time,
        });
    }
    let x_names = (1..=4).map(|k| format!("x{k}")).collect();
    Ok(GeneratedDataset {
        longitudinal: LongitudinalDataset::new(records)?,
        subjects: SubjectTable::new(rows, x_names, vec![])?,
        truth,
    })
}

/// Training and independent validation datasets of one replicate.
pub fn generate_dataset(spec: &ScenarioSpec, replicate: usize) -> Result<(GeneratedDataset, GeneratedDataset)> {
    if !(1..=12).contains(&spec.scenario_id) {
        return Err(Error::InvalidInput(format!("invalid scenario {}", spec.scenario_id)));
    }
    if spec.m == 0 {
        return Err(Error::InvalidInput("sample size must be positive".into()));
    }
    Ok((generate_split(spec, replicate, false)?, generate_split(spec, replicate, true)?))
}

/// Fraction of cured subjects among `spec.m` draws of the training stream,
/// without assembling the dataset.
pub fn empirical_cure_fraction(spec: &ScenarioSpec, replicate: usize) -> f64 {
    let mut rng = stream_rng(spec.seed, spec.scenario_id, replicate, false);
    let cured = (0..spec.m).filter(|_| !draw_subject(spec, &mut rng).uncured).count();
    cured as f64 / spec.m as f64
}

/// Joint calibration of the Weibull scale and censoring rate on a pilot of
/// uncured subjects with common random numbers. Returns `(scale, rate)`.
pub const CALIBRATION_PILOT: usize = 100_000;
pub const CALIBRATION_SEED: u64 = 20_240_501;

pub fn calibrate(mechanism: Mechanism, pilot: usize, seed: u64, p_event: f64, p_censor: f64) -> (f64, f64) {
    let spec = ScenarioSpec {
        scenario_id: 1,
        alpha0: 0.0,
        design: Design::Balanced,
        mechanism,
        m: pilot,
        landmark: LANDMARK,
        replicates: 1,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(f64, f64)> = (0..pilot)
        .map(|_| {
            let d = draw_subject(&spec, &mut rng);
            let e: f64 = Exp1.sample(&mut rng);
            let c: f64 = Exp1.sample(&mut rng);
            // Event time is `scale` times this factor.
            ((e / latency_eta(&d.summary).exp()).powf(1.0 / WEIBULL_SHAPE), c)
        })
        .collect();
    let outcome = |scale: f64, rate: f64| {
        let (mut ev, mut cens) = (0usize, 0usize);
        for &(a, c) in &draws {
            let t = scale * a;
            let c = c / rate;
            if t <= c.min(FOLLOW_UP) {
                ev += 1;
            } else if c < FOLLOW_UP {
                cens += 1;
            }
        }
        (ev as f64 / pilot as f64, cens as f64 / pilot as f64)
    };
    let scale_for = |rate: f64| bisect(|s| outcome(s, rate).0 - p_event, 1e-3, 1e3, true);
    let rate = bisect(|r| outcome(scale_for(r), r).1 - p_censor, 1e-4, 10.0, false);
    (scale_for(rate), rate)
}

/// Root of a monotone function on a log-scale bracket.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, decreasing: bool) -> f64 {
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        let v = f(mid);
        if (v > 0.0) == decreasing {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-13 {
            break;
        }
    }
    (lo * hi).sqrt()
}

/// Write `longitudinal.csv`, `subjects.csv` and `truth.csv` into `dir`.
pub fn write_dataset(dir: &Path, ds: &GeneratedDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_longitudinal(&dir.join("longitudinal.csv"), &ds.longitudinal)?;
    write_subjects(&dir.join("subjects.csv"), &ds.subjects)?;
    let path = dir.join("truth.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["subject_id".to_owned(), "G".to_owned()];
    for l in 1..=N_COVARIATES {
        header.push(format!("b0_y{l}"));
        header.push(format!("b1_y{l}"));
    }
    header.extend(["summary_eta".to_owned(), "event_time".to_owned(), "censor_time".to_owned()]);
    w.write_record(&header)?;
    for t in &ds.truth {
        let mut row = vec![t.subject_id.clone(), u8::from(t.uncured).to_string()];
        for l in 0..N_COVARIATES {
            row.push(fmt_f64(t.b0[l]));
            row.push(fmt_f64(t.b1[l]));
        }
        row.push(fmt_f64(latency_eta(&t.summary)));
        row.push(fmt_f64(t.event_time));
        row.push(fmt_f64(t.censor_time));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
