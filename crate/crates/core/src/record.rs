//! Per-subject observations of the illness-death process.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How disease onset was observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Onset {
    /// Onset somewhere in `(lo, hi]`; `lo` is the last disease-free age.
    Interval { lo: f64, hi: f64 },
    Exact { age: f64 },
}

impl Onset {
    /// Latest age the onset could have happened.
    pub fn upper(&self) -> f64 {
        match *self {
            Onset::Interval { hi, .. } => hi,
            Onset::Exact { age } => age,
        }
    }

    /// Midpoint of the interval, or the exact age.
    pub fn midpoint(&self) -> f64 {
        match *self {
            Onset::Interval { lo, hi } => 0.5 * (lo + hi),
            Onset::Exact { age } => age,
        }
    }
}

/// One participant's longitudinal observation, all ages in years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    #[serde(default)]
    pub birth_year: Option<i32>,
    /// Birth cohort label assigned by the cohort pipeline.
    #[serde(default)]
    pub cohort: Option<String>,
    /// Age at the first disease-free assessment; the likelihood conditions
    /// on being alive and healthy here.
    pub entry_age: f64,
    pub last_healthy_age: f64,
    #[serde(default)]
    pub onset: Option<Onset>,
    #[serde(default)]
    pub death_age: Option<f64>,
    /// Last age known alive; equals `death_age` for dead subjects.
    pub last_alive_age: f64,
    /// Last cognitive assessment of any outcome.
    pub last_assessment_age: f64,
    /// Post-mortem review settled disease status for a subject who died
    /// without a prior diagnosis.
    #[serde(default)]
    pub conclusive_at_death: bool,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
}

impl SubjectRecord {
    /// A subject alive and disease-free at every assessment in
    /// `[entry, last_healthy]`; refine with the builder-style setters.
    pub fn healthy(id: impl Into<String>, entry_age: f64, last_healthy_age: f64) -> Self {
        Self {
            id: id.into(),
            birth_year: None,
            cohort: None,
            entry_age,
            last_healthy_age,
            onset: None,
            death_age: None,
            last_alive_age: last_healthy_age,
            last_assessment_age: last_healthy_age,
            conclusive_at_death: false,
            covariates: BTreeMap::new(),
        }
    }

    pub fn with_interval_onset(mut self, hi: f64) -> Self {
        self.onset = Some(Onset::Interval {
            lo: self.last_healthy_age,
            hi,
        });
        self.last_assessment_age = self.last_assessment_age.max(hi);
        self.last_alive_age = self.last_alive_age.max(hi);
        self
    }

    pub fn with_exact_onset(mut self, age: f64) -> Self {
        self.onset = Some(Onset::Exact { age });
        self.last_assessment_age = self.last_assessment_age.max(age);
        self.last_alive_age = self.last_alive_age.max(age);
        self
    }

    pub fn with_death(mut self, age: f64, conclusive: bool) -> Self {
        self.death_age = Some(age);
        self.last_alive_age = age;
        self.conclusive_at_death = conclusive;
        self
    }

    pub fn with_last_alive(mut self, age: f64) -> Self {
        self.last_alive_age = age;
        self
    }

    pub fn with_covariate(mut self, name: impl Into<String>, value: f64) -> Self {
        self.covariates.insert(name.into(), value);
        self
    }

    pub fn is_dead(&self) -> bool {
        self.death_age.is_some()
    }

    /// Age the subject leaves observation: death, or last known alive.
    pub fn exit_age(&self) -> f64 {
        self.death_age.unwrap_or(self.last_alive_age)
    }

    pub fn pattern(&self) -> ObservationPattern {
        classify_pattern(self, self.conclusive_at_death)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidRecord {
                id: self.id.clone(),
                reason,
            })
        };
        let ages = [self.entry_age, self.last_healthy_age, self.last_alive_age, self.last_assessment_age];
        if ages.iter().any(|a| !a.is_finite()) {
            return fail("ages must be finite".into());
        }
        if self.entry_age > self.last_healthy_age {
            return fail(format!(
                "entry age {} after last healthy age {}",
                self.entry_age, self.last_healthy_age
            ));
        }
        if self.last_alive_age < self.last_healthy_age {
            return fail("last alive age precedes last healthy age".into());
        }
        if self.last_assessment_age < self.last_healthy_age {
            return fail("last assessment precedes last healthy age".into());
        }
        if let Some(d) = self.death_age {
            if !d.is_finite() || d < self.last_healthy_age {
                return fail(format!("death age {d} precedes last healthy age"));
            }
            if self.last_alive_age > d {
                return fail("alive after death".into());
            }
        }
        match self.onset {
            Some(Onset::Interval { lo, hi }) => {
                if (lo - self.last_healthy_age).abs() > 1e-9 {
                    return fail("diagnosis interval must start at the last healthy age".into());
                }
                if !(hi > lo) {
                    return fail(format!("empty diagnosis interval ({lo}, {hi}]"));
                }
                if hi > self.exit_age() + 1e-9 {
                    return fail("diagnosis after last observation".into());
                }
            }
            Some(Onset::Exact { age }) => {
                if !(age >= self.last_healthy_age) || age > self.exit_age() + 1e-9 {
                    return fail(format!("exact onset {age} outside observation window"));
                }
            }
            None => {}
        }
        if self.covariates.values().any(|v| !v.is_finite()) {
            return fail("non-finite covariate".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationPattern {
    HealthyCensored,
    IllCensored,
    IllThenDead,
    /// Died undiagnosed without a conclusive review: onset may have
    /// happened unseen between the last assessment and death.
    DeadInconclusive,
    HealthyThenDeadConclusive,
}

impl fmt::Display for ObservationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObservationPattern::HealthyCensored => "healthy-censored",
            ObservationPattern::IllCensored => "ill-censored",
            ObservationPattern::IllThenDead => "ill-then-dead",
            ObservationPattern::DeadInconclusive => "dead-inconclusive",
            ObservationPattern::HealthyThenDeadConclusive => "healthy-then-dead-conclusive",
        })
    }
}

pub fn classify_pattern(rec: &SubjectRecord, dementia_conclusive_at_death: bool) -> ObservationPattern {
    match (rec.onset.is_some(), rec.is_dead()) {
        (true, true) => ObservationPattern::IllThenDead,
        (true, false) => ObservationPattern::IllCensored,
        (false, false) => ObservationPattern::HealthyCensored,
        (false, true) if dementia_conclusive_at_death => ObservationPattern::HealthyThenDeadConclusive,
        (false, true) => ObservationPattern::DeadInconclusive,
    }
}

const RECORD_COLUMNS: [&str; 12] = [
    "id",
    "birth_year",
    "cohort",
    "entry_age",
    "last_healthy_age",
    "onset",
    "onset_lo",
    "onset_hi",
    "death_age",
    "last_alive_age",
    "last_assessment_age",
    "conclusive_at_death",
];

/// Covariate columns carry this prefix in record and exam files.
pub const COVARIATE_PREFIX: &str = "cov_";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes records as CSV; covariates become `cov_<name>` columns in
/// sorted name order, empty when a record lacks one.
pub fn write_records_csv<W: std::io::Write>(w: W, records: &[SubjectRecord]) -> Result<()> {
    let names: std::collections::BTreeSet<&str> =
        records.iter().flat_map(|r| r.covariates.keys().map(String::as_str)).collect();
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = RECORD_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(names.iter().map(|n| format!("{COVARIATE_PREFIX}{n}")));
    out.write_record(&header)?;
    for r in records {
        let (kind, lo, hi) = match r.onset {
            None => ("none", None, None),
            Some(Onset::Interval { lo, hi }) => ("interval", Some(lo), Some(hi)),
            Some(Onset::Exact { age }) => ("exact", Some(age), Some(age)),
        };
        let mut row = vec![
            r.id.clone(),
            opt(r.birth_year),
            r.cohort.clone().unwrap_or_default(),
            r.entry_age.to_string(),
            r.last_healthy_age.to_string(),
            kind.to_string(),
            opt(lo),
            opt(hi),
            opt(r.death_age),
            r.last_alive_age.to_string(),
            r.last_assessment_age.to_string(),
            r.conclusive_at_death.to_string(),
        ];
        row.extend(names.iter().map(|n| opt(r.covariates.get(*n))));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(r: R) -> Result<Vec<SubjectRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let mut idx = [0usize; 12];
    for (k, name) in RECORD_COLUMNS.iter().enumerate() {
        idx[k] = col(name).ok_or_else(|| Error::Schema {
            row: 1,
            reason: format!("missing column `{name}`"),
        })?;
    }
    let covs: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(COVARIATE_PREFIX).map(|n| (i, n.to_string())))
        .collect();
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("").trim();
        let num = |k: usize| -> Result<Option<f64>> {
            let s = field(k);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| Error::Schema {
                row,
                reason: format!("`{}` is not a number: {s:?}", RECORD_COLUMNS[k]),
            })
        };
        let req = |k: usize| -> Result<f64> {
            num(k)?.ok_or_else(|| Error::Schema {
                row,
                reason: format!("`{}` is required", RECORD_COLUMNS[k]),
            })
        };
        let onset = match field(5) {
            "none" | "" => None,
            "interval" => Some(Onset::Interval { lo: req(6)?, hi: req(7)? }),
            "exact" => Some(Onset::Exact { age: req(7)? }),
            other => {
                return Err(Error::Schema {
                    row,
                    reason: format!("unknown onset kind {other:?}"),
                })
            }
        };
        let birth_year = match field(1) {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Schema {
                row,
                reason: format!("birth_year is not an integer: {s:?}"),
            })?),
        };
        let conclusive = match field(11) {
            "true" | "1" => true,
            "false" | "0" | "" => false,
            s => {
                return Err(Error::Schema {
                    row,
                    reason: format!("conclusive_at_death must be true/false: {s:?}"),
                })
            }
        };
        let mut covariates = BTreeMap::new();
        for (i, name) in &covs {
            let s = rec.get(*i).unwrap_or("").trim();
            if !s.is_empty() {
                let v = s.parse().map_err(|_| Error::Schema {
                    row,
                    reason: format!("covariate `{name}` is not a number: {s:?}"),
                })?;
                covariates.insert(name.clone(), v);
            }
        }
        let cohort = Some(field(2).to_string()).filter(|s| !s.is_empty());
        let record = SubjectRecord {
            id: field(0).to_string(),
            birth_year,
            cohort,
            entry_age: req(3)?,
            last_healthy_age: req(4)?,
            onset,
            death_age: num(8)?,
            last_alive_age: req(9)?,
            last_assessment_age: req(10)?,
            conclusive_at_death: conclusive,
            covariates,
        };
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}
