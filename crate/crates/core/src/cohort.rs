//! From longitudinal exam rows to analysis records: birth cohorts, the
//! inclusion flowchart, per-subject derivation and the status census.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{Onset, SubjectRecord, COVARIATE_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CogStatus {
    Normal,
    Inconclusive,
    Dementia,
}

impl CogStatus {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "dementia-free" => Some(CogStatus::Normal),
            "inconclusive" | "impaired-inconclusive" | "impaired" => Some(CogStatus::Inconclusive),
            "dementia" | "dementia-diagnosed" | "diagnosed" => Some(CogStatus::Dementia),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CogStatus::Normal => "normal",
            CogStatus::Inconclusive => "inconclusive",
            CogStatus::Dementia => "dementia",
        }
    }
}

/// Highest completed education.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Education {
    Low,
    High,
}

/// One subject-exam row. Vital and demographic fields may repeat on every
/// row of a subject; they must agree.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawExamRow {
    /// 1-based line number in the source file (header is line 1).
    pub line: usize,
    pub subject_id: String,
    pub birth_year: Option<i32>,
    pub exam1_year: Option<f64>,
    pub exam1_age: Option<f64>,
    pub exam_age: Option<f64>,
    pub cog_status: Option<CogStatus>,
    pub onset_age: Option<f64>,
    pub death_age: Option<f64>,
    pub last_contact_age: Option<f64>,
    pub conclusive_at_death: Option<bool>,
    pub sex: Option<String>,
    pub education: Option<Education>,
    pub covariates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
    pub raw: String,
}

/// Column names of the exam file, in output order.
pub const EXAM_COLUMNS: [&str; 16] = [
    "subject_id",
    "birth_year",
    "birth_date",
    "exam1_year",
    "exam1_age",
    "exam_age",
    "exam_date",
    "cog_status",
    "onset_age",
    "death_age",
    "death_date",
    "last_contact_age",
    "last_contact_date",
    "conclusive_at_death",
    "sex",
    "education",
];

fn parse_education(s: &str, threshold_years: f64) -> Option<Education> {
    if let Ok(years) = s.parse::<f64>() {
        return years.is_finite().then_some(if years <= threshold_years { Education::Low } else { Education::High });
    }
    match s.to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
        "low" | "none" | "primary" | "secondary" | "high_school" | "highschool" => Some(Education::Low),
        "high" | "college" | "tertiary" | "university" | "graduate" | "postgraduate" => Some(Education::High),
        _ => None,
    }
}

fn years_between(from: NaiveDate, to: NaiveDate) -> f64 {
    (to - from).num_days() as f64 / 365.25
}

/// Parses an exam CSV. Rows that violate the schema are returned as
/// rejects, never dropped silently. Header problems are errors.
pub fn read_exam_rows<R: Read>(input: R, rules: &CohortRules) -> Result<(Vec<RawExamRow>, Vec<RejectedRow>)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    if col("subject_id").is_none() {
        return Err(Error::Schema {
            row: 1,
            reason: "missing column `subject_id`".into(),
        });
    }
    for h in header.iter() {
        let h = h.trim();
        if !EXAM_COLUMNS.contains(&h) && !h.starts_with(COVARIATE_PREFIX) {
            return Err(Error::Schema {
                row: 1,
                reason: format!("unknown column `{h}`"),
            });
        }
    }
    let idx: BTreeMap<&str, usize> = EXAM_COLUMNS.iter().filter_map(|c| col(c).map(|i| (*c, i))).collect();
    let covs: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.trim().strip_prefix(COVARIATE_PREFIX).map(|n| (i, n.to_string())))
        .collect();

    let mut rows = Vec::new();
    let mut rejects = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let raw = rec.iter().collect::<Vec<_>>().join(",");
        match parse_exam_row(&rec, line, &idx, &covs, header.len(), rules) {
            Ok(row) => rows.push(row),
            Err(reason) => rejects.push(RejectedRow { line, reason, raw }),
        }
    }
    Ok((rows, rejects))
}

fn parse_exam_row(
    rec: &csv::StringRecord,
    line: usize,
    idx: &BTreeMap<&str, usize>,
    covs: &[(usize, String)],
    width: usize,
    rules: &CohortRules,
) -> std::result::Result<RawExamRow, String> {
    if rec.len() != width {
        return Err(format!("expected {width} fields, found {}", rec.len()));
    }
    let get = |name: &str| idx.get(name).and_then(|&i| rec.get(i)).map(str::trim).filter(|s| !s.is_empty());
    let num = |name: &str| -> std::result::Result<Option<f64>, String> {
        match get(name) {
            None => Ok(None),
            Some(s) => match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(format!("`{name}` is not a finite number: {s:?}")),
            },
        }
    };
    let date = |name: &str| -> std::result::Result<Option<NaiveDate>, String> {
        get(name)
            .map(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| format!("`{name}` is not an ISO date: {s:?}")))
            .transpose()
    };
    let subject_id = get("subject_id").ok_or("empty subject_id")?.to_string();
    let birth_date = date("birth_date")?;
    let birth_year = match get("birth_year") {
        Some(s) => Some(s.parse::<i32>().map_err(|_| format!("`birth_year` is not an integer: {s:?}"))?),
        None => birth_date.map(|d| d.year()),
    };
    let age = |age_col: &str, date_col: &str| -> std::result::Result<Option<f64>, String> {
        match (num(age_col)?, date(date_col)?) {
            (Some(a), _) => Ok(Some(a)),
            (None, Some(d)) => match birth_date {
                Some(b) => Ok(Some(years_between(b, d))),
                None => Err(format!("`{date_col}` given without `birth_date`")),
            },
            (None, None) => Ok(None),
        }
    };
    let exam_age = age("exam_age", "exam_date")?;
    let cog_status = match get("cog_status") {
        Some(s) => Some(CogStatus::parse(s).ok_or_else(|| format!("unknown cog_status {s:?}"))?),
        None => None,
    };
    if cog_status.is_some() && exam_age.is_none() {
        return Err("cognitive status without exam age or date".into());
    }
    let conclusive_at_death = match get("conclusive_at_death") {
        None => None,
        Some(s) => Some(match s.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            _ => return Err(format!("`conclusive_at_death` must be boolean: {s:?}")),
        }),
    };
    let education = match get("education") {
        None => None,
        Some(s) => Some(
            parse_education(s, rules.education_threshold_years).ok_or_else(|| format!("unrecognized education {s:?}"))?,
        ),
    };
    let sex = match get("sex") {
        None => None,
        Some(s) => Some(match s.to_ascii_lowercase().as_str() {
            "m" | "male" => "male".to_string(),
            "f" | "female" => "female".to_string(),
            _ => return Err(format!("unrecognized sex {s:?}")),
        }),
    };
    let mut covariates = BTreeMap::new();
    for (i, name) in covs {
        if let Some(s) = rec.get(*i).map(str::trim).filter(|s| !s.is_empty()) {
            let v: f64 = s.parse().map_err(|_| format!("covariate `{name}` is not a number: {s:?}"))?;
            if !v.is_finite() {
                return Err(format!("covariate `{name}` is not finite"));
            }
            covariates.insert(name.clone(), v);
        }
    }
    let row = RawExamRow {
        line,
        subject_id,
        birth_year,
        exam1_year: num("exam1_year")?,
        exam1_age: num("exam1_age")?,
        exam_age,
        cog_status,
        onset_age: num("onset_age")?,
        death_age: age("death_age", "death_date")?,
        last_contact_age: age("last_contact_age", "last_contact_date")?,
        conclusive_at_death,
        sex,
        education,
        covariates,
    };
    if let (Some(e), Some(d)) = (row.exam_age, row.death_age) {
        if e > d + 1e-9 {
            return Err(format!("exam at {e} after death at {d}"));
        }
    }
    if let (Some(e), Some(c)) = (row.exam_age, row.last_contact_age) {
        if e > c + 1e-9 {
            return Err(format!("exam at {e} after last contact at {c}"));
        }
    }
    if let (Some(c), Some(d)) = (row.last_contact_age, row.death_age) {
        if c > d + 1e-9 {
            return Err(format!("last contact at {c} after death at {d}"));
        }
    }
    Ok(row)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes rows in the age-based form of the exam schema.
pub fn write_exam_rows<W: Write>(w: W, rows: &[RawExamRow]) -> Result<()> {
    let names: std::collections::BTreeSet<&str> = rows.iter().flat_map(|r| r.covariates.keys().map(String::as_str)).collect();
    let cols = [
        "subject_id",
        "birth_year",
        "exam1_year",
        "exam1_age",
        "exam_age",
        "cog_status",
        "onset_age",
        "death_age",
        "last_contact_age",
        "conclusive_at_death",
        "sex",
        "education",
    ];
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = cols.iter().map(|s| s.to_string()).collect();
    header.extend(names.iter().map(|n| format!("{COVARIATE_PREFIX}{n}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.subject_id.clone(),
            opt(r.birth_year),
            opt(r.exam1_year),
            opt(r.exam1_age),
            opt(r.exam_age),
            r.cog_status.map(|c| c.as_str().to_string()).unwrap_or_default(),
            opt(r.onset_age),
            opt(r.death_age),
            opt(r.last_contact_age),
            opt(r.conclusive_at_death),
            r.sex.clone().unwrap_or_default(),
            r.education
                .map(|e| match e {
                    Education::Low => "low",
                    Education::High => "high",
                })
                .unwrap_or_default()
                .to_string(),
        ];
        rec.extend(names.iter().map(|n| opt(r.covariates.get(*n))));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_rejects<W: Write>(w: W, rejects: &[RejectedRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["line", "reason", "raw"])?;
    for r in rejects {
        out.write_record([r.line.to_string(), r.reason.clone(), r.raw.clone()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BirthCohort {
    pub name: String,
    pub first_year: i32,
    pub last_year: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetHandling {
    /// Exact when an onset age is recorded, otherwise the interval between
    /// the last dementia-free assessment and diagnosis.
    Auto,
    /// Recorded onset age, or the diagnosis age when none is recorded.
    Exact,
    Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortRules {
    pub cohorts: Vec<BirthCohort>,
    /// Calendar year of the first cognitive assessment; deaths before it
    /// are excluded.
    pub first_assessment_year: f64,
    pub min_age: f64,
    /// Years without assessment before the horizon after which an alive
    /// subject's status counts as inconclusive.
    pub inconclusive_window: f64,
    /// Calendar year the census refers to; defaults to the latest calendar
    /// year of last contact in the data.
    pub horizon_year: Option<f64>,
    pub onset_handling: OnsetHandling,
    /// School years at or below which education counts as low.
    pub education_threshold_years: f64,
}

impl Default for CohortRules {
    fn default() -> Self {
        let cohort = |a: i32| BirthCohort {
            name: format!("{a}-{}", a + 9),
            first_year: a,
            last_year: a + 9,
        };
        Self {
            cohorts: vec![cohort(1915), cohort(1925), cohort(1935)],
            first_assessment_year: 1975.0,
            min_age: 60.0,
            inconclusive_window: 4.0,
            horizon_year: None,
            onset_handling: OnsetHandling::Auto,
            education_threshold_years: 12.0,
        }
    }
}

impl CohortRules {
    pub fn validate(&self) -> Result<()> {
        if self.cohorts.is_empty() {
            return Err(Error::Config("at least one birth cohort is required".into()));
        }
        for (i, c) in self.cohorts.iter().enumerate() {
            if c.first_year > c.last_year {
                return Err(Error::Config(format!("cohort `{}` has first year after last year", c.name)));
            }
            if i > 0 && c.first_year != self.cohorts[i - 1].last_year + 1 {
                return Err(Error::Config(format!(
                    "cohort `{}` must start the year after `{}` ends",
                    c.name,
                    self.cohorts[i - 1].name
                )));
            }
        }
        if !(self.inconclusive_window >= 0.0) {
            return Err(Error::Config("inconclusive_window must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Flowchart exclusion steps in the order they are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionStep {
    NoExam1Linkage,
    BornBeforeCohorts,
    BornAfterCohorts,
    DiedBeforeFirstAssessment,
    DiedBeforeMinAge,
    NoDementiaInformation,
    DementiaBeforeMinAge,
    NoAssessmentAfterMinAge,
}

impl ExclusionStep {
    pub const ALL: [ExclusionStep; 8] = [
        ExclusionStep::NoExam1Linkage,
        ExclusionStep::BornBeforeCohorts,
        ExclusionStep::BornAfterCohorts,
        ExclusionStep::DiedBeforeFirstAssessment,
        ExclusionStep::DiedBeforeMinAge,
        ExclusionStep::NoDementiaInformation,
        ExclusionStep::DementiaBeforeMinAge,
        ExclusionStep::NoAssessmentAfterMinAge,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ExclusionStep::NoExam1Linkage => "no Exam-1 linkage",
            ExclusionStep::BornBeforeCohorts => "born before first cohort",
            ExclusionStep::BornAfterCohorts => "born after last cohort",
            ExclusionStep::DiedBeforeFirstAssessment => "died before first-assessment year",
            ExclusionStep::DiedBeforeMinAge => "died before minimum age",
            ExclusionStep::NoDementiaInformation => "no dementia information",
            ExclusionStep::DementiaBeforeMinAge => "dementia before minimum age",
            ExclusionStep::NoAssessmentAfterMinAge => "no dementia-free assessment at or after minimum age",
        }
    }
}

impl fmt::Display for ExclusionStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Index into `rules.cohorts`, or the exclusion step that applies.
pub fn assign_birth_cohort(birth_year: Option<i32>, rules: &CohortRules) -> std::result::Result<usize, ExclusionStep> {
    let y = birth_year.ok_or(ExclusionStep::NoExam1Linkage)?;
    if let Some(i) = rules.cohorts.iter().position(|c| (c.first_year..=c.last_year).contains(&y)) {
        return Ok(i);
    }
    if rules.cohorts.first().is_some_and(|c| y < c.first_year) {
        Err(ExclusionStep::BornBeforeCohorts)
    } else {
        Err(ExclusionStep::BornAfterCohorts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowchartReport {
    pub initial: usize,
    pub exclusions: Vec<(ExclusionStep, usize)>,
    pub cohorts: Vec<(String, usize)>,
}

impl FlowchartReport {
    pub fn excluded(&self) -> usize {
        self.exclusions.iter().map(|e| e.1).sum()
    }

    pub fn included(&self) -> usize {
        self.cohorts.iter().map(|c| c.1).sum()
    }

    pub fn count(&self, step: ExclusionStep) -> usize {
        self.exclusions.iter().find(|e| e.0 == step).map_or(0, |e| e.1)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "label", "count"])?;
        out.write_record(["initial", "subjects in input", &self.initial.to_string()])?;
        for (step, n) in &self.exclusions {
            let key = serde_json::to_value(step)?.as_str().unwrap_or_default().to_string();
            out.write_record([key.as_str(), step.label(), &n.to_string()])?;
        }
        for (name, n) in &self.cohorts {
            out.write_record(["cohort", name.as_str(), &n.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut s = format!("Subjects in input: {}\n", self.initial);
        let mut remaining = self.initial;
        for (step, n) in &self.exclusions {
            remaining -= n;
            s.push_str(&format!("  excluded, {}: {} (remaining {})\n", step.label(), n, remaining));
        }
        for (name, n) in &self.cohorts {
            s.push_str(&format!("Birth cohort {name}: {n}\n"));
        }
        s
    }
}

/// Rows of one subject, in input order.
#[derive(Debug, Clone)]
pub struct SubjectRows {
    pub id: String,
    pub rows: Vec<RawExamRow>,
}

impl SubjectRows {
    fn birth_year(&self) -> Option<i32> {
        self.rows
            .iter()
            .find_map(|r| r.birth_year)
            .or_else(|| self.rows.iter().find_map(|r| Some((r.exam1_year? - r.exam1_age?).floor() as i32)))
    }

    fn death_age(&self) -> Option<f64> {
        self.rows.iter().find_map(|r| r.death_age)
    }

    fn assessments(&self) -> impl Iterator<Item = (f64, CogStatus, &RawExamRow)> {
        self.rows.iter().filter_map(|r| Some((r.exam_age?, r.cog_status?, r)))
    }
}

/// Groups rows by subject, ordered by first appearance.
pub fn group_by_subject(rows: &[RawExamRow]) -> Vec<SubjectRows> {
    let mut order: Vec<SubjectRows> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for r in rows {
        match index.get(r.subject_id.as_str()) {
            Some(&i) => order[i].rows.push(r.clone()),
            None => {
                index.insert(&r.subject_id, order.len());
                order.push(SubjectRows {
                    id: r.subject_id.clone(),
                    rows: vec![r.clone()],
                });
            }
        }
    }
    order
}

fn flowchart_step(s: &SubjectRows, rules: &CohortRules) -> std::result::Result<usize, ExclusionStep> {
    let by = s.birth_year();
    let cohort = assign_birth_cohort(by, rules)?;
    let death = s.death_age();
    if let (Some(d), Some(y)) = (death, by) {
        if (y as f64) + d < rules.first_assessment_year {
            return Err(ExclusionStep::DiedBeforeFirstAssessment);
        }
    }
    if death.is_some_and(|d| d < rules.min_age) {
        return Err(ExclusionStep::DiedBeforeMinAge);
    }
    if s.assessments().next().is_none() {
        return Err(ExclusionStep::NoDementiaInformation);
    }
    let early_dementia = s.assessments().any(|(a, st, _)| st == CogStatus::Dementia && a < rules.min_age)
        || s.rows.iter().any(|r| r.onset_age.is_some_and(|o| o < rules.min_age));
    if early_dementia {
        return Err(ExclusionStep::DementiaBeforeMinAge);
    }
    if !s.assessments().any(|(a, st, _)| st == CogStatus::Normal && a >= rules.min_age) {
        return Err(ExclusionStep::NoAssessmentAfterMinAge);
    }
    Ok(cohort)
}

/// A subject that passed the flowchart.
#[derive(Debug, Clone)]
pub struct EligibleSubject {
    pub cohort: usize,
    pub rows: SubjectRows,
}

/// Applies the exclusion steps in order; each subject is counted at the
/// first step it fails.
pub fn apply_flowchart(rows: &[RawExamRow], rules: &CohortRules) -> Result<(FlowchartReport, Vec<EligibleSubject>)> {
    rules.validate()?;
    let subjects = group_by_subject(rows);
    let mut excluded: BTreeMap<ExclusionStep, usize> = BTreeMap::new();
    let mut cohort_counts = vec![0usize; rules.cohorts.len()];
    let mut eligible = Vec::new();
    for s in &subjects {
        match flowchart_step(s, rules) {
            Ok(c) => {
                cohort_counts[c] += 1;
                eligible.push(EligibleSubject {
                    cohort: c,
                    rows: s.clone(),
                });
            }
            Err(step) => *excluded.entry(step).or_default() += 1,
        }
    }
    let report = FlowchartReport {
        initial: subjects.len(),
        exclusions: ExclusionStep::ALL.iter().map(|s| (*s, excluded.get(s).copied().unwrap_or(0))).collect(),
        cohorts: rules.cohorts.iter().map(|c| c.name.clone()).zip(cohort_counts).collect(),
    };
    assert_eq!(report.initial, report.excluded() + report.included(), "flowchart conservation");
    Ok((report, eligible))
}

fn agree(id: &str, what: &str, vals: impl Iterator<Item = (f64, usize)>) -> Result<Option<f64>> {
    let vals: Vec<(f64, usize)> = vals.collect();
    if let Some(&(first, _)) = vals.first() {
        if vals.iter().any(|(v, _)| (v - first).abs() > 1e-6) {
            return Err(Error::Conflict {
                id: id.to_string(),
                rows: vals.iter().map(|v| v.1).collect(),
                reason: format!("rows disagree on {what}"),
            });
        }
        return Ok(Some(first));
    }
    Ok(None)
}

/// Builds the analysis record of a subject that passed the flowchart.
pub fn derive_subject_record(subject: &SubjectRows, rules: &CohortRules) -> Result<SubjectRecord> {
    let id = subject.id.as_str();
    let rows = &subject.rows;
    let death = agree(id, "death age", rows.iter().filter_map(|r| Some((r.death_age?, r.line))))?;
    let onset_age = agree(id, "onset age", rows.iter().filter_map(|r| Some((r.onset_age?, r.line))))?;
    let mut assessments: Vec<(f64, CogStatus, usize)> = subject.assessments().map(|(a, s, r)| (a, s, r.line)).collect();
    assessments.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));

    let normal_from_min: Vec<&(f64, CogStatus, usize)> =
        assessments.iter().filter(|a| a.1 == CogStatus::Normal && a.0 >= rules.min_age).collect();
    let entry = normal_from_min.first().ok_or_else(|| Error::InvalidRecord {
        id: id.to_string(),
        reason: "no dementia-free assessment at or after the minimum age".into(),
    })?;
    let last_normal = normal_from_min.last().expect("nonempty");
    let diagnosis = assessments.iter().find(|a| a.1 == CogStatus::Dementia);
    if let Some(dx) = diagnosis {
        if let Some(later) = assessments.iter().find(|a| a.1 == CogStatus::Normal && a.0 > dx.0) {
            return Err(Error::Conflict {
                id: id.to_string(),
                rows: vec![dx.2, later.2],
                reason: format!("dementia diagnosed at {} before a normal assessment at {}", dx.0, later.0),
            });
        }
    }
    let last_assessment = assessments.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
    let last_contact = rows
        .iter()
        .filter_map(|r| r.last_contact_age)
        .chain(std::iter::once(last_assessment))
        .fold(f64::NEG_INFINITY, f64::max);

    let l = last_normal.0;
    let onset = match (diagnosis, rules.onset_handling, onset_age) {
        (None, _, None) => None,
        (None, _, Some(o)) => {
            return Err(Error::Conflict {
                id: id.to_string(),
                rows: rows.iter().filter(|r| r.onset_age.is_some()).map(|r| r.line).collect(),
                reason: format!("onset age {o} recorded without a dementia diagnosis"),
            })
        }
        (Some(dx), OnsetHandling::Interval, _) | (Some(dx), OnsetHandling::Auto, None) => Some(Onset::Interval { lo: l, hi: dx.0 }),
        (Some(dx), OnsetHandling::Exact | OnsetHandling::Auto, o) => Some(Onset::Exact { age: o.unwrap_or(dx.0) }),
    };
    if let Some(Onset::Exact { age }) = onset {
        if age < l {
            return Err(Error::Conflict {
                id: id.to_string(),
                rows: vec![last_normal.2],
                reason: format!("onset at {age} precedes the dementia-free assessment at {l}"),
            });
        }
    }
    let conclusive = rows.iter().any(|r| r.conclusive_at_death == Some(true));
    let mut covariates = BTreeMap::new();
    for r in rows {
        for (k, v) in &r.covariates {
            if let Some(prev) = covariates.insert(k.clone(), *v) {
                if prev != *v {
                    return Err(Error::Conflict {
                        id: id.to_string(),
                        rows: rows.iter().filter(|x| x.covariates.contains_key(k)).map(|x| x.line).collect(),
                        reason: format!("rows disagree on covariate `{k}`"),
                    });
                }
            }
        }
    }
    if let Some(sex) = rows.iter().find_map(|r| r.sex.as_deref()) {
        covariates.insert("male".into(), if sex == "male" { 1.0 } else { 0.0 });
    }
    if let Some(ed) = rows.iter().find_map(|r| r.education) {
        covariates.insert("high_education".into(), if ed == Education::High { 1.0 } else { 0.0 });
    }
    let last_alive = death.unwrap_or(last_contact);
    let rec = SubjectRecord {
        id: id.to_string(),
        birth_year: subject.birth_year(),
        cohort: None,
        entry_age: entry.0,
        last_healthy_age: l,
        onset,
        death_age: death,
        last_alive_age: last_alive.max(onset.map_or(l, |o| o.upper())),
        last_assessment_age: last_assessment,
        conclusive_at_death: conclusive && death.is_some(),
        covariates,
    };
    rec.validate()?;
    Ok(rec)
}

/// Everything produced from an exam file.
#[derive(Debug, Clone)]
pub struct CohortBuild {
    pub report: FlowchartReport,
    pub records: Vec<SubjectRecord>,
    /// Eligible subjects whose rows could not be reconciled.
    pub conflicts: Vec<(String, String)>,
}

pub fn build_cohorts(rows: &[RawExamRow], rules: &CohortRules) -> Result<CohortBuild> {
    let (report, eligible) = apply_flowchart(rows, rules)?;
    let mut records = Vec::new();
    let mut conflicts = Vec::new();
    for s in eligible {
        match derive_subject_record(&s.rows, rules) {
            Ok(mut r) => {
                r.cohort = Some(rules.cohorts[s.cohort].name.clone());
                records.push(r);
            }
            Err(e) => conflicts.push((s.rows.id.clone(), e.to_string())),
        }
    }
    Ok(CohortBuild {
        report,
        records,
        conflicts,
    })
}

/// Table-1 categories; the first five partition a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensusCategory {
    AliveDementiaFree,
    AliveInconclusive,
    DiagnosedDementia,
    DeathWithoutDementia,
    DeathInconclusive,
    /// Subgroup of diagnosed dementia.
    DeathAfterDiagnosis,
}

impl CensusCategory {
    pub const ALL: [CensusCategory; 6] = [
        CensusCategory::AliveDementiaFree,
        CensusCategory::AliveInconclusive,
        CensusCategory::DiagnosedDementia,
        CensusCategory::DeathWithoutDementia,
        CensusCategory::DeathInconclusive,
        CensusCategory::DeathAfterDiagnosis,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CensusCategory::AliveDementiaFree => "Alive and dementia-free",
            CensusCategory::AliveInconclusive => "Alive and dementia inconclusive",
            CensusCategory::DiagnosedDementia => "Diagnosed dementia",
            CensusCategory::DeathWithoutDementia => "Death without dementia",
            CensusCategory::DeathInconclusive => "Death and dementia inconclusive",
            CensusCategory::DeathAfterDiagnosis => "Death after dementia diagnosis*",
        }
    }

    pub fn is_subgroup(self) -> bool {
        self == CensusCategory::DeathAfterDiagnosis
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortCounts {
    pub cohort: String,
    pub size: usize,
    /// Counts in [`CensusCategory::ALL`] order.
    pub counts: [usize; 6],
}

impl CohortCounts {
    pub fn count(&self, cat: CensusCategory) -> usize {
        self.counts[CensusCategory::ALL.iter().position(|c| *c == cat).expect("category")]
    }

    /// Percentage of the cohort, or of diagnosed cases for the subgroup.
    pub fn percent(&self, cat: CensusCategory) -> Option<f64> {
        let denom = if cat.is_subgroup() {
            self.count(CensusCategory::DiagnosedDementia)
        } else {
            self.size
        };
        (denom > 0).then(|| 100.0 * self.count(cat) as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortCensus {
    pub horizon_year: f64,
    pub inconclusive_window: f64,
    pub cohorts: Vec<CohortCounts>,
}

fn census_category(r: &SubjectRecord, horizon_age: f64, window: f64) -> CensusCategory {
    match (r.onset.is_some(), r.is_dead()) {
        (true, _) => CensusCategory::DiagnosedDementia,
        (false, true) if r.conclusive_at_death => CensusCategory::DeathWithoutDementia,
        (false, true) => CensusCategory::DeathInconclusive,
        (false, false) if r.last_assessment_age >= horizon_age - window - 1e-9 => CensusCategory::AliveDementiaFree,
        (false, false) => CensusCategory::AliveInconclusive,
    }
}

/// Counts subjects per cohort (`record.cohort`, or "all" when unset) and
/// status at the horizon year.
pub fn status_census(records: &[SubjectRecord], horizon_year: f64, window: f64) -> CohortCensus {
    let mut cohorts: Vec<CohortCounts> = Vec::new();
    for r in records {
        let name = r.cohort.clone().unwrap_or_else(|| "all".into());
        let i = match cohorts.iter().position(|c| c.cohort == name) {
            Some(i) => i,
            None => {
                cohorts.push(CohortCounts {
                    cohort: name,
                    size: 0,
                    counts: [0; 6],
                });
                cohorts.len() - 1
            }
        };
        let horizon_age = r.birth_year.map_or(f64::INFINITY, |y| horizon_year - y as f64);
        let cat = census_category(r, horizon_age, window);
        let c = &mut cohorts[i];
        c.size += 1;
        c.counts[CensusCategory::ALL.iter().position(|x| *x == cat).expect("category")] += 1;
        if r.onset.is_some() && r.is_dead() {
            c.counts[5] += 1;
        }
    }
    CohortCensus {
        horizon_year,
        inconclusive_window: window,
        cohorts,
    }
}

/// Latest calendar year of last contact among the records.
pub fn default_horizon_year(records: &[SubjectRecord]) -> Option<f64> {
    records
        .iter()
        .filter_map(|r| Some(r.birth_year? as f64 + r.last_alive_age))
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

pub fn format_percent(p: Option<f64>) -> String {
    p.map(|v| format!("{v:.1}")).unwrap_or_default()
}

impl CohortCensus {
    /// Table-1 layout: one row per category, a count and a percent column
    /// per cohort.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["category".to_string()];
        for c in &self.cohorts {
            header.push(format!("{}_n", c.cohort));
            header.push(format!("{}_pct", c.cohort));
        }
        out.write_record(&header)?;
        let mut size = vec!["N".to_string()];
        for c in &self.cohorts {
            size.push(c.size.to_string());
            size.push(String::new());
        }
        out.write_record(&size)?;
        for cat in CensusCategory::ALL {
            let mut row = vec![cat.label().to_string()];
            for c in &self.cohorts {
                row.push(c.count(cat).to_string());
                row.push(format_percent(c.percent(cat)));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "Status at {} (inconclusive after {} years without assessment)\n",
            self.horizon_year, self.inconclusive_window
        );
        for c in &self.cohorts {
            s.push_str(&format!("Birth cohort {} (N = {})\n", c.cohort, c.size));
            for cat in CensusCategory::ALL {
                s.push_str(&format!("  {:<36} {:>6} ({}%)\n", cat.label(), c.count(cat), format_percent(c.percent(cat))));
            }
        }
        s.push_str("* subgroup of diagnosed dementia; percent of diagnosed cases\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohort_boundaries() {
        let rules = CohortRules::default();
        assert_eq!(assign_birth_cohort(Some(1915), &rules), Ok(0));
        assert_eq!(assign_birth_cohort(Some(1924), &rules), Ok(0));
        assert_eq!(assign_birth_cohort(Some(1925), &rules), Ok(1));
        assert_eq!(assign_birth_cohort(Some(1944), &rules), Ok(2));
        assert_eq!(assign_birth_cohort(Some(1945), &rules), Err(ExclusionStep::BornAfterCohorts));
        assert_eq!(assign_birth_cohort(Some(1914), &rules), Err(ExclusionStep::BornBeforeCohorts));
        assert_eq!(assign_birth_cohort(None, &rules), Err(ExclusionStep::NoExam1Linkage));
    }

    #[test]
    fn education_dichotomy() {
        assert_eq!(parse_education("12", 12.0), Some(Education::Low));
        assert_eq!(parse_education("13", 12.0), Some(Education::High));
        assert_eq!(parse_education("college", 12.0), Some(Education::High));
        assert_eq!(parse_education("high school", 12.0), Some(Education::Low));
        assert_eq!(parse_education("maybe", 12.0), None);
    }

    fn row(id: &str, line: usize, age: f64, st: CogStatus) -> RawExamRow {
        RawExamRow {
            line,
            subject_id: id.into(),
            birth_year: Some(1920),
            exam_age: Some(age),
            cog_status: Some(st),
            ..Default::default()
        }
    }

    #[test]
    fn derivation_maps_fields() {
        let mut rows = vec![
            row("s", 2, 62.0, CogStatus::Normal),
            row("s", 3, 66.0, CogStatus::Normal),
            row("s", 4, 70.0, CogStatus::Normal),
            row("s", 5, 73.0, CogStatus::Dementia),
        ];
        for r in &mut rows {
            r.death_age = Some(80.0);
        }
        let s = SubjectRows { id: "s".into(), rows };
        let mut rules = CohortRules::default();
        rules.onset_handling = OnsetHandling::Interval;
        let rec = derive_subject_record(&s, &rules).unwrap();
        assert_eq!((rec.entry_age, rec.last_healthy_age, rec.death_age), (62.0, 70.0, Some(80.0)));
        assert_eq!(rec.onset, Some(Onset::Interval { lo: 70.0, hi: 73.0 }));
        rules.onset_handling = OnsetHandling::Exact;
        let rec = derive_subject_record(&s, &rules).unwrap();
        assert_eq!(rec.onset, Some(Onset::Exact { age: 73.0 }));
    }

    #[test]
    fn alive_subject_keeps_last_contact() {
        let mut rows = vec![row("a", 2, 70.0, CogStatus::Normal), row("a", 3, 75.0, CogStatus::Normal)];
        rows[1].last_contact_age = Some(81.0);
        let rec = derive_subject_record(&SubjectRows { id: "a".into(), rows }, &CohortRules::default()).unwrap();
        assert_eq!(rec.last_healthy_age, 75.0);
        assert_eq!(rec.last_alive_age, 81.0);
        assert_eq!(rec.pattern(), crate::record::ObservationPattern::HealthyCensored);
    }

    #[test]
    fn normal_after_diagnosis_is_conflict() {
        let rows = vec![
            row("c", 2, 65.0, CogStatus::Normal),
            row("c", 3, 70.0, CogStatus::Dementia),
            row("c", 4, 72.0, CogStatus::Normal),
        ];
        match derive_subject_record(&SubjectRows { id: "c".into(), rows }, &CohortRules::default()) {
            Err(Error::Conflict { rows, .. }) => assert_eq!(rows, vec![3, 4]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn subgroup_percentage_relative_to_diagnosed() {
        let c = CohortCounts {
            cohort: "x".into(),
            size: 2000,
            counts: [0, 0, 731, 0, 0, 662],
        };
        assert_eq!(format_percent(c.percent(CensusCategory::DeathAfterDiagnosis)), "90.6");
    }

    #[test]
    fn empty_input() {
        let (report, eligible) = apply_flowchart(&[], &CohortRules::default()).unwrap();
        assert_eq!(report.initial, 0);
        assert!(report.exclusions.iter().all(|e| e.1 == 0));
        assert!(report.cohorts.iter().all(|c| c.1 == 0));
        assert!(eligible.is_empty());
    }
}
