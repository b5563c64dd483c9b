//! Synthetic cohorts from known intensities, and the naive comparator.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CogStatus, RawExamRow};
use crate::error::{Error, Result};
use crate::estimation::FittedModel;
use crate::hazard::Transition;
use crate::model::IntensityModel;
use crate::probabilities::{point_curve, point_curve_of, CurveMetadata, CurveRequest, CurveTable, Quantity};
use crate::record::{SubjectRecord, COVARIATE_PREFIX};

/// A true baseline intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthHazard {
    Constant {
        rate: f64,
    },
    Weibull {
        shape: f64,
        scale: f64,
        #[serde(default)]
        origin: f64,
    },
    /// `rates[0]` applies below `breaks[0]`, `rates[i]` on
    /// `[breaks[i-1], breaks[i])`, the last rate beyond the last break.
    PiecewiseConstant {
        breaks: Vec<f64>,
        rates: Vec<f64>,
    },
}

impl TruthHazard {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            TruthHazard::Constant { rate } if !(rate.is_finite() && *rate >= 0.0) => bad(format!("rate {rate} must be nonnegative")),
            TruthHazard::Weibull { shape, scale, origin } => {
                if !(shape.is_finite() && *shape > 0.0 && scale.is_finite() && *scale > 0.0 && origin.is_finite()) {
                    return bad("weibull shape and scale must be positive".into());
                }
                Ok(())
            }
            TruthHazard::PiecewiseConstant { breaks, rates } => {
                if rates.len() != breaks.len() + 1 {
                    return bad("piecewise-constant hazards need one more rate than breaks".into());
                }
                if breaks.windows(2).any(|w| !(w[0] < w[1])) || breaks.iter().any(|b| !b.is_finite()) {
                    return bad("breaks must be finite and strictly increasing".into());
                }
                if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                    return bad("rates must be nonnegative".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn hazard(&self, t: f64) -> f64 {
        match self {
            TruthHazard::Constant { rate } => *rate,
            TruthHazard::Weibull { shape, scale, origin } => {
                let r = (t - origin) / scale;
                if r <= 0.0 {
                    0.0
                } else {
                    shape / scale * r.powf(shape - 1.0)
                }
            }
            TruthHazard::PiecewiseConstant { breaks, rates } => rates[breaks.partition_point(|&b| b <= t)],
        }
    }

    /// Cumulative intensity from age 0 (or the Weibull origin).
    pub fn cumulative(&self, t: f64) -> f64 {
        match self {
            TruthHazard::Constant { rate } => rate * t,
            TruthHazard::Weibull { shape, scale, origin } => {
                let r = (t - origin) / scale;
                if r <= 0.0 {
                    0.0
                } else {
                    r.powf(*shape)
                }
            }
            TruthHazard::PiecewiseConstant { breaks, rates } => {
                let mut total = 0.0;
                let mut lo = 0.0;
                for (i, &b) in breaks.iter().enumerate() {
                    if t <= b {
                        return total + rates[i] * (t - lo);
                    }
                    total += rates[i] * (b - lo);
                    lo = b;
                }
                total + rates[breaks.len()] * (t - lo)
            }
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        match self {
            TruthHazard::Constant { .. } => vec![],
            TruthHazard::Weibull { origin, .. } => vec![*origin],
            TruthHazard::PiecewiseConstant { breaks, .. } => breaks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthHazards {
    pub h01: TruthHazard,
    pub h02: TruthHazard,
    pub h12: TruthHazard,
}

impl TruthHazards {
    pub fn get(&self, tr: Transition) -> &TruthHazard {
        match tr {
            Transition::HealthyToIll => &self.h01,
            Transition::HealthyToDead => &self.h02,
            Transition::IllToDead => &self.h12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateDistribution {
    Normal {
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        sd: f64,
    },
    Bernoulli {
        p: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateGenerator {
    pub name: String,
    pub distribution: CovariateDistribution,
    /// True hazard ratios on 0->1, 0->2 and 1->2.
    #[serde(default = "unit_hr")]
    pub hr: [f64; 3],
}

fn unit_hr() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExamScheme {
    /// Assessments every `interval` years, each gap scaled by a uniform
    /// factor in `1 ± jitter`; exams after the first are missed with
    /// probability `miss_prob`.
    Scheduled {
        interval: f64,
        #[serde(default)]
        jitter: f64,
        #[serde(default)]
        miss_prob: f64,
    },
    /// Continuous monitoring: onset ages are observed exactly and every
    /// death is reviewed.
    Exact,
}

impl Default for ExamScheme {
    fn default() -> Self {
        ExamScheme::Scheduled {
            interval: 2.0,
            jitter: 0.25,
            miss_prob: 0.1,
        }
    }
}

fn default_base_age() -> f64 {
    60.0
}
fn default_entry_spread() -> f64 {
    4.0
}
fn default_admin_end_age() -> f64 {
    100.0
}
fn default_birth_years() -> [i32; 2] {
    [1915, 1944]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n: usize,
    /// Required before sampling; the CLI may supply it.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_base_age")]
    pub base_age: f64,
    /// Entry ages are uniform on `[base_age, base_age + entry_spread]`.
    #[serde(default = "default_entry_spread")]
    pub entry_spread: f64,
    pub hazards: TruthHazards,
    #[serde(default)]
    pub covariates: Vec<CovariateGenerator>,
    #[serde(default)]
    pub exams: ExamScheme,
    #[serde(default = "default_admin_end_age")]
    pub admin_end_age: f64,
    /// Calendar year ending follow-up.
    #[serde(default)]
    pub admin_end_year: Option<f64>,
    /// Inclusive range of birth years, drawn uniformly.
    #[serde(default = "default_birth_years")]
    pub birth_years: [i32; 2],
    /// Probability that an undiagnosed death is reviewed conclusively.
    #[serde(default)]
    pub conclusive_at_death: f64,
    /// Rate of permanent loss to cognitive follow-up (vital status stays
    /// known).
    #[serde(default)]
    pub dropout_rate: f64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.seed.is_none() {
            return bad("a seed is required");
        }
        for h in [&self.hazards.h01, &self.hazards.h02, &self.hazards.h12] {
            h.validate()?;
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.conclusive_at_death) {
            return bad("conclusive_at_death must be a probability");
        }
        if !(self.dropout_rate.is_finite() && self.dropout_rate >= 0.0) {
            return bad("dropout_rate must be nonnegative");
        }
        if !(self.entry_spread >= 0.0 && self.base_age.is_finite()) {
            return bad("entry_spread must be nonnegative");
        }
        if !(self.admin_end_age > self.base_age) {
            return bad("admin_end_age must exceed base_age");
        }
        if self.birth_years[0] > self.birth_years[1] {
            return bad("birth_years must be an increasing pair");
        }
        if let ExamScheme::Scheduled { interval, jitter, miss_prob } = self.exams {
            if !(interval > 0.0 && interval.is_finite()) {
                return bad("exam interval must be positive");
            }
            if !(0.0..1.0).contains(&jitter) {
                return bad("exam jitter must be in [0, 1)");
            }
            if !prob(miss_prob) {
                return bad("miss_prob must be a probability");
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.covariates {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate covariate `{}`", c.name)));
            }
            if c.hr.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
                return Err(Error::Config(format!("hazard ratios of `{}` must be positive", c.name)));
            }
            match c.distribution {
                CovariateDistribution::Normal { sd, .. } if !(sd >= 0.0) => return bad("normal sd must be nonnegative"),
                CovariateDistribution::Bernoulli { p } if !prob(p) => return bad("bernoulli p must be a probability"),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    /// The true intensities at covariate values `z` (in config order).
    pub fn truth_at(&self, z: &[f64]) -> Result<TruthProfile<'_>> {
        if z.len() != self.covariates.len() {
            return Err(Error::DimensionMismatch {
                what: "covariate profile",
                expected: self.covariates.len(),
                actual: z.len(),
            });
        }
        let rr = std::array::from_fn(|h| self.covariates.iter().zip(z).map(|(c, x)| c.hr[h].ln() * x).sum::<f64>().exp());
        Ok(TruthProfile { hazards: &self.hazards, rr })
    }

    pub fn truth_baseline(&self) -> TruthProfile<'_> {
        TruthProfile {
            hazards: &self.hazards,
            rr: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TruthProfile<'a> {
    hazards: &'a TruthHazards,
    rr: [f64; 3],
}

impl IntensityModel for TruthProfile<'_> {
    fn hazard(&self, tr: Transition, t: f64) -> f64 {
        self.hazards.get(tr).hazard(t) * self.rr[tr.index()]
    }

    fn cumulative(&self, tr: Transition, s: f64, t: f64) -> f64 {
        if t <= s {
            return 0.0;
        }
        let h = self.hazards.get(tr);
        (h.cumulative(t) - h.cumulative(s)).max(0.0) * self.rr[tr.index()]
    }

    fn breakpoints(&self) -> Vec<f64> {
        crate::quadrature::sorted_breakpoints(Transition::ALL.iter().flat_map(|t| self.hazards.get(*t).breakpoints()))
    }

    fn domain_lo(&self) -> f64 {
        f64::NEG_INFINITY
    }
}

/// Latent times of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub subject_id: String,
    pub birth_year: i32,
    pub entry_age: f64,
    /// Onset age if the subject falls ill before dying.
    pub onset_age: Option<f64>,
    /// Latent death age, possibly after the end of follow-up.
    pub death_age: Option<f64>,
    pub admin_end_age: f64,
    pub covariates: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct SimulatedCohort {
    pub rows: Vec<RawExamRow>,
    pub truth: Vec<TruthRow>,
}

const AGE_CAP: f64 = 250.0;

/// Smallest `t > from` with `H(from, t) = target`, or infinity if the
/// cumulative intensity stays below `target` up to the age cap.
fn invert(from: f64, target: f64, cum: impl Fn(f64) -> f64) -> f64 {
    let mut lo = from;
    let mut step = 1.0;
    let mut hi = from + step;
    while cum(hi) < target {
        lo = hi;
        if hi >= AGE_CAP {
            return f64::INFINITY;
        }
        step *= 2.0;
        hi = (hi + step).min(AGE_CAP);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cum(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws latent histories and the exam rows that observe them.
pub fn simulate_cohort(config: &SimulationConfig) -> Result<SimulatedCohort> {
    config.validate()?;
    let seed = config.seed.expect("validated");
    let per_subject: Vec<(Vec<RawExamRow>, TruthRow)> =
        (0..config.n).into_par_iter().map(|i| simulate_subject(config, seed, i)).collect();
    let mut rows = Vec::new();
    let mut truth = Vec::with_capacity(config.n);
    for (r, t) in per_subject {
        rows.extend(r);
        truth.push(t);
    }
    for (k, r) in rows.iter_mut().enumerate() {
        r.line = k + 2;
    }
    Ok(SimulatedCohort { rows, truth })
}

fn simulate_subject(cfg: &SimulationConfig, seed: u64, index: usize) -> (Vec<RawExamRow>, TruthRow) {
    let mut rng = subject_rng(seed, index);
    let id = format!("S{:06}", index + 1);
    let birth_year = rng.gen_range(cfg.birth_years[0]..=cfg.birth_years[1]);
    let z: Vec<f64> = cfg
        .covariates
        .iter()
        .map(|c| match c.distribution {
            CovariateDistribution::Normal { mean, sd } => {
                let x: f64 = StandardNormal.sample(&mut rng);
                mean + sd * x
            }
            CovariateDistribution::Bernoulli { p } => f64::from(u8::from(rng.gen::<f64>() < p)),
        })
        .collect();
    let truth = cfg.truth_at(&z).expect("dimension checked");
    let entry = cfg.base_age + cfg.entry_spread * rng.gen::<f64>();
    let mut admin_end = cfg.admin_end_age;
    if let Some(y) = cfg.admin_end_year {
        admin_end = admin_end.min(y - birth_year as f64);
    }

    // Latent process, Markov in age, healthy at entry.
    let e0: f64 = Exp1.sample(&mut rng);
    let exit0 = invert(entry, e0, |t| {
        truth.cumulative(Transition::HealthyToIll, entry, t) + truth.cumulative(Transition::HealthyToDead, entry, t)
    });
    let u: f64 = rng.gen();
    let e1: f64 = Exp1.sample(&mut rng);
    let (onset, death) = if exit0.is_finite() {
        let a01 = truth.hazard(Transition::HealthyToIll, exit0);
        let a02 = truth.hazard(Transition::HealthyToDead, exit0);
        let to_ill = a01 + a02 > 0.0 && u * (a01 + a02) < a01;
        if to_ill {
            let d = invert(exit0, e1, |t| truth.cumulative(Transition::IllToDead, exit0, t));
            (Some(exit0), d)
        } else {
            (None, exit0)
        }
    } else {
        (None, f64::INFINITY)
    };
    let dropout = if cfg.dropout_rate > 0.0 {
        let x: f64 = Exp1.sample(&mut rng);
        entry + x / cfg.dropout_rate
    } else {
        f64::INFINITY
    };
    let review: f64 = rng.gen();

    let covariates: Vec<(String, f64)> = cfg.covariates.iter().map(|c| c.name.clone()).zip(z.iter().copied()).collect();
    let truth_row = TruthRow {
        subject_id: id.clone(),
        birth_year,
        entry_age: entry,
        onset_age: onset,
        death_age: death.is_finite().then_some(death),
        admin_end_age: admin_end,
        covariates: covariates.clone(),
    };

    let dead = death <= admin_end;
    let exit = death.min(admin_end);
    let base = RawExamRow {
        subject_id: id,
        birth_year: Some(birth_year),
        death_age: dead.then_some(death),
        last_contact_age: Some(exit.max(entry)),
        covariates: covariates.into_iter().collect(),
        ..Default::default()
    };
    let exam = |age: f64, status: CogStatus| RawExamRow {
        exam_age: Some(age),
        cog_status: Some(status),
        ..base.clone()
    };
    if entry > exit {
        // Follow-up ended before the first assessment.
        return (vec![base], truth_row);
    }
    let mut rows = vec![exam(entry, CogStatus::Normal)];
    match cfg.exams {
        ExamScheme::Exact => {
            match onset {
                Some(o) if o <= exit => rows.push(RawExamRow {
                    onset_age: Some(o),
                    ..exam(o, CogStatus::Dementia)
                }),
                _ if exit > entry => rows.push(exam(exit, CogStatus::Normal)),
                _ => {}
            }
            if dead {
                for r in &mut rows {
                    r.conclusive_at_death = Some(true);
                }
            }
        }
        ExamScheme::Scheduled { interval, jitter, miss_prob } => {
            let stop = exit.min(dropout);
            let mut age = entry;
            let mut diagnosed = false;
            loop {
                let gap = interval * (1.0 + jitter * (2.0 * rng.gen::<f64>() - 1.0));
                let missed = rng.gen::<f64>() < miss_prob;
                age += gap;
                if age >= stop {
                    break;
                }
                if missed {
                    continue;
                }
                if onset.is_some_and(|o| o <= age) {
                    rows.push(exam(age, CogStatus::Dementia));
                    diagnosed = true;
                    break;
                }
                rows.push(exam(age, CogStatus::Normal));
            }
            if dead && !diagnosed && review < cfg.conclusive_at_death {
                if onset.is_some_and(|o| o <= death) {
                    rows.push(exam(death, CogStatus::Dementia));
                }
                for r in &mut rows {
                    r.conclusive_at_death = Some(true);
                }
            }
        }
    }
    (rows, truth_row)
}

pub fn write_truth_csv<W: Write>(w: W, truth: &[TruthRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let names: Vec<&str> = truth.first().map(|t| t.covariates.iter().map(|c| c.0.as_str()).collect()).unwrap_or_default();
    let mut header: Vec<String> = ["subject_id", "birth_year", "entry_age", "onset_age", "death_age", "admin_end_age"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(names.iter().map(|n| format!("{COVARIATE_PREFIX}{n}")));
    out.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in truth {
        let mut row = vec![
            t.subject_id.clone(),
            t.birth_year.to_string(),
            t.entry_age.to_string(),
            opt(t.onset_age),
            opt(t.death_age),
            t.admin_end_age.to_string(),
        ];
        row.extend(t.covariates.iter().map(|c| c.1.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// One minus the left-truncated product-limit estimate of onset: onset at
/// the interval midpoint, deaths and alive subjects censored (at death and
/// at the last dementia-free assessment). Bounds use Greenwood's variance.
pub fn naive_risk_estimate(records: &[SubjectRecord], base_age: f64, ages: &[f64]) -> Result<CurveTable> {
    for w in ages.windows(2) {
        if w[1] < w[0] {
            return Err(Error::InvalidGrid("evaluation ages must be nondecreasing".into()));
        }
    }
    // (entry, time, event)
    let mut obs: Vec<(f64, f64, bool)> = records
        .iter()
        .map(|r| match (r.onset, r.death_age) {
            (Some(o), _) => (r.entry_age, o.midpoint(), true),
            (None, Some(d)) => (r.entry_age, d, false),
            (None, None) => (r.entry_age, r.last_healthy_age, false),
        })
        .collect();
    obs.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)));
    let mut times: Vec<f64> = obs.iter().filter(|o| o.2).map(|o| o.1).collect();
    times.dedup();
    let mut entries: Vec<f64> = obs.iter().map(|o| o.0).collect();
    entries.sort_by(f64::total_cmp);
    let mut exits: Vec<f64> = obs.iter().map(|o| o.1).collect();
    exits.sort_by(f64::total_cmp);

    // Survival and Greenwood sum after each event time.
    let mut steps: Vec<(f64, f64, f64)> = Vec::with_capacity(times.len());
    let (mut surv, mut gw) = (1.0, 0.0);
    let mut k = 0;
    for &t in &times {
        if t <= base_age {
            continue;
        }
        let mut d = 0usize;
        while k < obs.len() && obs[k].1 < t {
            k += 1;
        }
        let mut j = k;
        while j < obs.len() && obs[j].1 == t {
            if obs[j].2 && obs[j].0 < t {
                d += 1;
            }
            j += 1;
        }
        // At risk: entered before t and not exited before t.
        let entered = entries.partition_point(|&e| e < t);
        let gone = exits.partition_point(|&x| x < t);
        let n = entered.saturating_sub(gone);
        if d == 0 || n == 0 {
            continue;
        }
        let (df, nf) = (d as f64, n as f64);
        surv *= 1.0 - df / nf;
        if n > d {
            gw += df / (nf * (nf - df));
        }
        steps.push((t, surv, gw));
    }
    let mut estimate = Vec::with_capacity(ages.len());
    let mut lo = Vec::with_capacity(ages.len());
    let mut hi = Vec::with_capacity(ages.len());
    for &a in ages {
        let i = steps.partition_point(|s| s.0 <= a);
        let (s, g) = if i == 0 { (1.0, 0.0) } else { (steps[i - 1].1, steps[i - 1].2) };
        let se = s * g.sqrt();
        estimate.push(1.0 - s);
        lo.push((1.0 - s - 1.96 * se).clamp(0.0, 1.0));
        hi.push((1.0 - s + 1.96 * se).clamp(0.0, 1.0));
    }
    Ok(CurveTable {
        quantity: Quantity::Risk,
        conditioning_age: base_age,
        ages: ages.to_vec(),
        estimate,
        lo95: lo,
        hi95: hi,
        profile: Vec::new(),
        stratum: None,
        metadata: CurveMetadata {
            band_method: Some("greenwood".into()),
            ..Default::default()
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveError {
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Mean of estimate minus truth.
    pub mean_signed: f64,
}

/// Pointwise comparison of two curves on the same age grid.
pub fn compare_curves(estimate: &CurveTable, truth: &CurveTable) -> Result<CurveError> {
    if estimate.ages.len() != truth.ages.len() || estimate.ages.iter().zip(&truth.ages).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(Error::GridMismatch(format!(
            "{} ages vs {} ages",
            estimate.ages.len(),
            truth.ages.len()
        )));
    }
    if estimate.ages.is_empty() {
        return Err(Error::GridMismatch("empty age grid".into()));
    }
    let diffs: Vec<f64> = estimate.estimate.iter().zip(&truth.estimate).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    Ok(CurveError {
        max_abs: diffs.iter().fold(0.0f64, |m, d| m.max(d.abs())),
        mean_abs: diffs.iter().map(|d| d.abs()).sum::<f64>() / n,
        mean_signed: diffs.iter().sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRatioError {
    pub transition: Transition,
    pub covariate: String,
    pub true_hr: f64,
    pub estimated_hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub ages: Vec<f64>,
    pub risk: CurveError,
    pub prevalence: CurveError,
    pub hazard_ratios: Vec<HazardRatioError>,
}

/// Errors of the fitted baseline risk and prevalence curves against the
/// truth on `ages` (conditioning at `base_age`), plus hazard-ratio
/// estimates for covariates present in both.
pub fn evaluate_recovery(fitted: &FittedModel, truth: &SimulationConfig, base_age: f64, ages: &[f64]) -> Result<RecoveryReport> {
    let t = truth.truth_baseline();
    let mut errs = Vec::new();
    for q in [Quantity::Risk, Quantity::Prevalence] {
        let req = CurveRequest::new(q, base_age, ages.to_vec());
        errs.push(compare_curves(&point_curve(&fitted.model, &req)?, &point_curve_of(&t, &req)?)?);
    }
    let mut hazard_ratios = Vec::new();
    for tr in Transition::ALL {
        for (j, name) in fitted.model.covariates.iter().enumerate() {
            if let Some(g) = truth.covariates.iter().find(|c| &c.name == name) {
                hazard_ratios.push(HazardRatioError {
                    transition: tr,
                    covariate: name.clone(),
                    true_hr: g.hr[tr.index()],
                    estimated_hr: fitted.model.spec(tr).beta[j].exp(),
                });
            }
        }
    }
    let prevalence = errs.pop().expect("two curves");
    let risk = errs.pop().expect("two curves");
    Ok(RecoveryReport {
        ages: ages.to_vec(),
        risk,
        prevalence,
        hazard_ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_config(a: f64, b: f64, c: f64, n: usize) -> SimulationConfig {
        SimulationConfig {
            n,
            seed: Some(7),
            base_age: 60.0,
            entry_spread: 0.0,
            hazards: TruthHazards {
                h01: TruthHazard::Constant { rate: a },
                h02: TruthHazard::Constant { rate: b },
                h12: TruthHazard::Constant { rate: c },
            },
            covariates: vec![],
            exams: ExamScheme::default(),
            admin_end_age: 110.0,
            admin_end_year: None,
            birth_years: [1915, 1944],
            conclusive_at_death: 0.0,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn piecewise_cumulative() {
        let h = TruthHazard::PiecewiseConstant {
            breaks: vec![70.0, 80.0],
            rates: vec![0.01, 0.02, 0.05],
        };
        assert!((h.cumulative(75.0) - (0.7 + 0.1)).abs() < 1e-12);
        assert!((h.cumulative(90.0) - (0.7 + 0.2 + 0.5)).abs() < 1e-12);
        assert_eq!(h.hazard(70.0), 0.02);
    }

    #[test]
    fn inversion_hits_target() {
        let t = invert(60.0, 0.3, |t| 0.05 * (t - 60.0));
        assert!((t - 66.0).abs() < 1e-8);
        assert!(invert(60.0, 1.0, |_| 0.0).is_infinite());
    }

    #[test]
    fn seed_is_mandatory() {
        let mut c = constant_config(0.04, 0.02, 0.1, 10);
        c.seed = None;
        assert!(matches!(simulate_cohort(&c), Err(Error::Config(_))));
    }

    #[test]
    fn no_onset_without_illness_intensity() {
        let c = constant_config(0.0, 0.05, 0.1, 300);
        let sim = simulate_cohort(&c).unwrap();
        assert!(sim.truth.iter().all(|t| t.onset_age.is_none()));
        assert!(sim.rows.iter().all(|r| r.cog_status != Some(CogStatus::Dementia)));
    }

    #[test]
    fn ever_onset_matches_competing_risk_limit() {
        let c = constant_config(0.04, 0.02, 0.0, 10_000);
        let sim = simulate_cohort(&c).unwrap();
        let ill = sim.truth.iter().filter(|t| t.onset_age.is_some_and(|o| o <= 110.0)).count() as f64 / 1e4;
        // P(onset before 110) = 2/3 (1 - e^{-3}).
        let expect = 2.0 / 3.0 * (1.0 - (-0.06f64 * 50.0).exp());
        assert!((ill - expect).abs() < 0.02, "{ill} vs {expect}");
    }

    #[test]
    fn intervals_contain_latent_onset() {
        let mut c = constant_config(0.04, 0.02, 0.1, 500);
        c.conclusive_at_death = 0.5;
        let sim = simulate_cohort(&c).unwrap();
        let build = crate::cohort::build_cohorts(&sim.rows, &crate::cohort::CohortRules::default()).unwrap();
        assert!(build.conflicts.is_empty(), "{:?}", build.conflicts);
        for r in &build.records {
            let t = sim.truth.iter().find(|t| t.subject_id == r.id).unwrap();
            if let Some(crate::record::Onset::Interval { lo, hi }) = r.onset {
                let o = t.onset_age.unwrap();
                assert!(lo < o && o <= hi, "{} not in ({lo}, {hi}]", o);
            }
        }
    }

    #[test]
    fn naive_matches_empirical_cdf_without_censoring() {
        let recs: Vec<SubjectRecord> = [62.0, 65.0, 65.0, 71.0]
            .iter()
            .enumerate()
            .map(|(i, &o)| SubjectRecord::healthy(format!("s{i}"), 60.0, 60.0).with_exact_onset(o))
            .collect();
        let c = naive_risk_estimate(&recs, 60.0, &[61.0, 62.0, 65.0, 70.0, 71.0]).unwrap();
        assert_eq!(c.estimate, vec![0.0, 0.25, 0.75, 0.75, 1.0]);
        let none: Vec<SubjectRecord> = (0..3).map(|i| SubjectRecord::healthy(format!("h{i}"), 60.0, 70.0)).collect();
        let c = naive_risk_estimate(&none, 60.0, &[65.0, 80.0]).unwrap();
        assert!(c.estimate.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn curve_comparison_rejects_grid_mismatch() {
        let mk = |ages: Vec<f64>| CurveTable {
            quantity: Quantity::Risk,
            conditioning_age: 60.0,
            estimate: vec![0.0; ages.len()],
            lo95: vec![0.0; ages.len()],
            hi95: vec![0.0; ages.len()],
            ages,
            profile: vec![],
            stratum: None,
            metadata: Default::default(),
        };
        assert!(matches!(compare_curves(&mk(vec![60.0, 70.0]), &mk(vec![60.0, 71.0])), Err(Error::GridMismatch(_))));
        let e = compare_curves(&mk(vec![60.0, 70.0]), &mk(vec![60.0, 70.0])).unwrap();
        assert_eq!(e.max_abs, 0.0);
    }
}
