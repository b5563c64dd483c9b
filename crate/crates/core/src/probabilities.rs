//! State-occupation and onset probabilities from intensities.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::FittedModel;
use crate::hazard::Transition;
use crate::model::{IllnessDeathModel, IntensityModel};
use crate::quadrature;

/// Gauss-Legendre nodes per integration segment.
pub const NODES_PER_SPAN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionProbabilities {
    pub p00: f64,
    pub p01: f64,
    pub p02: f64,
}

fn check_interval<M: IntensityModel + ?Sized>(m: &M, s: f64, t: f64) -> Result<()> {
    if !(s.is_finite() && t.is_finite()) || s > t {
        return Err(Error::Ordering { start: s, end: t });
    }
    let lo = m.domain_lo();
    if s < lo {
        return Err(Error::Domain {
            value: s,
            lo,
            hi: f64::INFINITY,
        });
    }
    Ok(())
}

fn survival00<M: IntensityModel + ?Sized>(m: &M, s: f64, t: f64) -> f64 {
    (-m.cumulative(Transition::HealthyToIll, s, t) - m.cumulative(Transition::HealthyToDead, s, t)).exp()
}

/// `∫_a^b f(u) du` by composite Gauss-Legendre over the model breakpoints.
fn integrate<F: FnMut(f64) -> f64>(bps: &[f64], a: f64, b: f64, f: F) -> f64 {
    quadrature::integrate_composite(a, b, bps, NODES_PER_SPAN, f)
}

/// `P01(s,t) = ∫_s^t P00(s,u) a01(u) exp(-A12(u,t)) du`.
fn p01<M: IntensityModel + ?Sized>(m: &M, bps: &[f64], s: f64, t: f64) -> f64 {
    if t <= s {
        return 0.0;
    }
    integrate(bps, s, t, |u| {
        survival00(m, s, u) * m.hazard(Transition::HealthyToIll, u) * (-m.cumulative(Transition::IllToDead, u, t)).exp()
    })
}

pub fn transition_probabilities<M: IntensityModel + ?Sized>(m: &M, s: f64, t: f64) -> Result<TransitionProbabilities> {
    check_interval(m, s, t)?;
    if s == t {
        return Ok(TransitionProbabilities {
            p00: 1.0,
            p01: 0.0,
            p02: 0.0,
        });
    }
    let bps = m.breakpoints();
    let p00 = survival00(m, s, t);
    let p01 = p01(m, &bps, s, t).clamp(0.0, 1.0 - p00);
    Ok(TransitionProbabilities {
        p00,
        p01,
        p02: (1.0 - p00 - p01).max(0.0),
    })
}

/// `P11(s,t) = exp(-A12(s,t))`.
pub fn stay_ill<M: IntensityModel + ?Sized>(m: &M, s: f64, t: f64) -> Result<f64> {
    check_interval(m, s, t)?;
    Ok((-m.cumulative(Transition::IllToDead, s, t)).exp())
}

fn check_ages(base: f64, ages: &[f64]) -> Result<()> {
    for w in ages.windows(2) {
        if w[1] < w[0] {
            return Err(Error::InvalidGrid("evaluation ages must be nondecreasing".into()));
        }
    }
    if let Some(&a) = ages.first() {
        if a < base {
            return Err(Error::Ordering { start: base, end: a });
        }
    }
    Ok(())
}

/// `P(onset in (base, t])` for each `t`, conditional on healthy at `base`.
pub fn risk_values<M: IntensityModel + ?Sized>(m: &M, base: f64, ages: &[f64]) -> Result<Vec<f64>> {
    check_interval(m, base, base)?;
    check_ages(base, ages)?;
    let bps = m.breakpoints();
    let mut out = Vec::with_capacity(ages.len());
    let mut acc = 0.0;
    let mut prev = base;
    for &t in ages {
        acc += integrate(&bps, prev, t, |u| survival00(m, base, u) * m.hazard(Transition::HealthyToIll, u));
        prev = t;
        out.push(acc.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// `(P00(base,t), P01(base,t))` for each `t`, by stepping the ill-state
/// occupancy forward between consecutive ages.
pub fn occupancy_values<M: IntensityModel + ?Sized>(m: &M, base: f64, ages: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_interval(m, base, base)?;
    check_ages(base, ages)?;
    let bps = m.breakpoints();
    let mut out = Vec::with_capacity(ages.len());
    let mut ill = 0.0;
    let mut prev = base;
    for &t in ages {
        if t > prev {
            let carry = ill * (-m.cumulative(Transition::IllToDead, prev, t)).exp();
            let fresh = integrate(&bps, prev, t, |u| {
                survival00(m, base, u) * m.hazard(Transition::HealthyToIll, u) * (-m.cumulative(Transition::IllToDead, u, t)).exp()
            });
            ill = carry + fresh;
        }
        prev = t;
        out.push((survival00(m, base, t), ill.max(0.0)));
    }
    Ok(out)
}

/// Onset probability within `horizon` years of `s` given healthy at `s`.
pub fn conditional_probability<M: IntensityModel + ?Sized>(m: &M, s: f64, horizon: f64) -> Result<f64> {
    if !(horizon >= 0.0) {
        return Err(Error::Ordering { start: s, end: s + horizon });
    }
    Ok(risk_values(m, s, &[s + horizon])?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Horizon {
    Years { years: f64 },
    /// Up to the configured lifetime age.
    Ever,
}

impl Horizon {
    pub fn label(&self) -> String {
        match self {
            Horizon::Years { years } => format!("{years}y"),
            Horizon::Ever => "ever".into(),
        }
    }

    pub fn end_age(&self, s: f64, lifetime_age: f64) -> f64 {
        match self {
            Horizon::Years { years } => s + years,
            Horizon::Ever => lifetime_age.max(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "quantity")]
pub enum Quantity {
    Prevalence,
    Risk,
    /// Curve over conditioning ages of the onset probability within the
    /// horizon.
    Conditional { horizon: Horizon },
}

impl Quantity {
    pub fn label(&self) -> String {
        match self {
            Quantity::Prevalence => "prevalence".into(),
            Quantity::Risk => "risk".into(),
            Quantity::Conditional { horizon } => format!("conditional-{}", horizon.label()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRequest {
    pub quantity: Quantity,
    pub base_age: f64,
    pub ages: Vec<f64>,
    /// Named covariate values; unnamed covariates are 0.
    pub profile: Vec<(String, f64)>,
    pub lifetime_age: f64,
}

impl CurveRequest {
    pub fn new(quantity: Quantity, base_age: f64, ages: Vec<f64>) -> Self {
        Self {
            quantity,
            base_age,
            ages,
            profile: Vec::new(),
            lifetime_age: 110.0,
        }
    }

    pub fn with_profile(mut self, profile: Vec<(String, f64)>) -> Self {
        self.profile = profile;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurveMetadata {
    /// Some evaluation relied on intensities beyond the spline boundary.
    pub extrapolated: bool,
    pub band_method: Option<String>,
    pub draws: usize,
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub quantity: Quantity,
    pub conditioning_age: f64,
    pub ages: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
    pub profile: Vec<(String, f64)>,
    /// Label of the subgroup the model was fitted on, if stratified.
    #[serde(default)]
    pub stratum: Option<String>,
    pub metadata: CurveMetadata,
}

pub fn profile_label(profile: &[(String, f64)]) -> String {
    if profile.is_empty() {
        return "baseline".into();
    }
    profile.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

pub fn stratum_label(stratum: Option<&str>) -> String {
    stratum.unwrap_or("all").to_string()
}

impl CurveTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_curves_csv(w, std::slice::from_ref(self))
    }
}

/// Several curves in one long-format CSV.
pub fn write_curves_csv<W: Write>(w: W, curves: &[CurveTable]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["age", "estimate", "lo95", "hi95", "quantity", "stratum", "profile", "conditioning_age", "extrapolated"])?;
    for c in curves {
        let label = c.quantity.label();
        let stratum = stratum_label(c.stratum.as_deref());
        let profile = profile_label(&c.profile);
        for i in 0..c.ages.len() {
            out.write_record([
                c.ages[i].to_string(),
                format!("{:.6}", c.estimate[i]),
                format!("{:.6}", c.lo95[i]),
                format!("{:.6}", c.hi95[i]),
                label.clone(),
                stratum.clone(),
                profile.clone(),
                c.conditioning_age.to_string(),
                c.metadata.extrapolated.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses the long-format curve CSV back into `(quantity label, profile,
/// age, estimate, lo95, hi95)` rows, for plotting.
pub fn read_curves_csv<R: std::io::Read>(r: R) -> Result<Vec<CurveRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<CurveRow>().enumerate() {
        out.push(rec.map_err(|e| Error::Schema {
            row: i + 2,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub age: f64,
    pub estimate: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub quantity: String,
    pub stratum: String,
    pub profile: String,
    pub conditioning_age: f64,
    pub extrapolated: bool,
}

/// Point values of the requested curve under `m`.
pub fn curve_values<M: IntensityModel + ?Sized>(m: &M, req: &CurveRequest) -> Result<Vec<f64>> {
    match req.quantity {
        Quantity::Risk => risk_values(m, req.base_age, &req.ages),
        Quantity::Prevalence => {
            let occ = occupancy_values(m, req.base_age, &req.ages)?;
            Ok(occ
                .iter()
                .map(|&(p00, p01)| {
                    let d = p00 + p01;
                    if d > f64::MIN_POSITIVE {
                        (p01 / d).clamp(0.0, 1.0)
                    } else {
                        f64::NAN
                    }
                })
                .collect())
        }
        Quantity::Conditional { horizon } => req
            .ages
            .iter()
            .map(|&s| {
                let end = horizon.end_age(s, req.lifetime_age);
                conditional_probability(m, s, end - s)
            })
            .collect(),
    }
}

fn curve_extrapolated<M: IntensityModel + ?Sized>(m: &M, req: &CurveRequest) -> bool {
    req.ages.iter().any(|&a| {
        let end = match req.quantity {
            Quantity::Conditional { horizon } => horizon.end_age(a, req.lifetime_age),
            _ => a,
        };
        m.extrapolated(end)
    })
}

/// The requested curve from a model, without bands (bounds equal the
/// estimate). Trailing ages where the prevalence denominator underflows
/// are dropped with a warning.
pub fn point_curve(model: &IllnessDeathModel, req: &CurveRequest) -> Result<CurveTable> {
    let z = model.profile_vector(&req.profile)?;
    let m = model.at(&z)?;
    point_curve_of(&m, req)
}

pub fn point_curve_of<M: IntensityModel + ?Sized>(m: &M, req: &CurveRequest) -> Result<CurveTable> {
    let mut est = curve_values(m, req)?;
    let mut ages = req.ages.clone();
    let mut metadata = CurveMetadata {
        extrapolated: curve_extrapolated(m, req),
        ..Default::default()
    };
    if let Some(cut) = est.iter().position(|v| !v.is_finite()) {
        let msg = format!("curve truncated at age {}: survival underflow", ages[cut]);
        warn!("{msg}");
        metadata.warnings.push(msg);
        est.truncate(cut);
        ages.truncate(cut);
    }
    Ok(CurveTable {
        quantity: req.quantity,
        conditioning_age: req.base_age,
        lo95: est.clone(),
        hi95: est.clone(),
        estimate: est,
        ages,
        profile: req.profile.clone(),
        stratum: None,
        metadata,
    })
}

/// Factor `L` with `L L' = cov` after clipping negative eigenvalues.
/// Returns whether a repair was needed.
pub fn psd_factor(cov: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut repaired = false;
    let sqrt: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < -1e-12 * max.max(f64::MIN_POSITIVE) {
                repaired = true;
            }
            v.max(0.0).sqrt()
        })
        .collect();
    let l = &eig.eigenvectors * DMatrix::from_diagonal(&DVector::from_vec(sqrt));
    (l, repaired)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

pub const MIN_DRAWS: usize = 200;

/// Pointwise 95% bands by resampling parameters from the normal
/// approximation at the optimum. Draw `d` uses stream `d` of a ChaCha8
/// generator seeded with `seed`, so results do not depend on threading.
/// The point estimate is included among the draws and bounds are widened
/// to contain it.
pub fn confidence_bands(fitted: &FittedModel, req: &CurveRequest, draws: usize, seed: u64) -> Result<CurveTable> {
    if draws < MIN_DRAWS {
        return Err(Error::Config(format!("at least {MIN_DRAWS} draws are required, got {draws}")));
    }
    let cov = fitted.covariance_matrix().ok_or(Error::NoCovariance)?;
    let mut table = point_curve(&fitted.model, req)?;
    let req = CurveRequest {
        ages: table.ages.clone(),
        ..req.clone()
    };
    let (factor, repaired) = psd_factor(&cov);
    if repaired {
        let msg = "covariance was not positive semi-definite; negative eigenvalues clipped".to_string();
        warn!("{msg}");
        table.metadata.warnings.push(msg);
    }
    let center = DVector::from_vec(fitted.model.params());
    let z = fitted.model.profile_vector(&req.profile)?;
    let p = center.len();
    let samples: Vec<Option<Vec<f64>>> = (0..draws as u64)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d);
            let eps = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut rng)));
            let x = &center + &factor * eps;
            let model = fitted.model.with_params(x.as_slice()).ok()?;
            let m = model.at(&z).ok()?;
            let v = curve_values(&m, &req).ok()?;
            v.iter().all(|x| x.is_finite()).then_some(v)
        })
        .collect();
    let valid: Vec<&Vec<f64>> = samples.iter().flatten().collect();
    let failed = draws - valid.len();
    if failed > 0 {
        let msg = format!("{failed} of {draws} draws produced invalid curves and were skipped");
        warn!("{msg}");
        table.metadata.warnings.push(msg);
    }
    let mut col = Vec::with_capacity(valid.len() + 1);
    for i in 0..table.ages.len() {
        col.clear();
        col.push(table.estimate[i]);
        col.extend(valid.iter().map(|v| v[i]));
        col.sort_by(f64::total_cmp);
        let est = table.estimate[i];
        table.lo95[i] = quantile(&col, 0.025).min(est).clamp(0.0, 1.0);
        table.hi95[i] = quantile(&col, 0.975).max(est).clamp(0.0, 1.0);
    }
    table.metadata.band_method = Some("parameter-resampling".into());
    table.metadata.draws = draws;
    table.metadata.seed = Some(seed);
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalCell {
    pub estimate: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Onset probabilities by conditioning age (rows) and horizon (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTable {
    #[serde(default)]
    pub stratum: Option<String>,
    pub profile: Vec<(String, f64)>,
    pub ages: Vec<f64>,
    pub horizons: Vec<Horizon>,
    /// `cells[row][col]`; `None` where the horizon end exceeds the limit.
    pub cells: Vec<Vec<Option<ConditionalCell>>>,
    pub lifetime_age: f64,
    pub limit_age: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionalTableSpec {
    pub ages: Vec<f64>,
    pub horizons: Vec<Horizon>,
    pub lifetime_age: f64,
    /// Fixed-length horizons ending after this age are left blank.
    pub limit_age: f64,
}

impl Default for ConditionalTableSpec {
    fn default() -> Self {
        Self {
            ages: vec![60.0, 65.0, 70.0, 75.0, 80.0],
            horizons: vec![Horizon::Years { years: 10.0 }, Horizon::Years { years: 20.0 }, Horizon::Ever],
            lifetime_age: 110.0,
            limit_age: 99.0,
        }
    }
}

/// Builds the table; with `bands = Some((draws, seed))` each column gets
/// resampling intervals, otherwise bounds equal the estimate.
pub fn conditional_table(
    fitted: &FittedModel,
    profile: &[(String, f64)],
    spec: &ConditionalTableSpec,
    bands: Option<(usize, u64)>,
) -> Result<ConditionalTable> {
    let mut cells = vec![vec![None; spec.horizons.len()]; spec.ages.len()];
    for (j, h) in spec.horizons.iter().enumerate() {
        let rows: Vec<usize> = (0..spec.ages.len())
            .filter(|&i| matches!(h, Horizon::Ever) || h.end_age(spec.ages[i], spec.lifetime_age) <= spec.limit_age + 1e-9)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let req = CurveRequest {
            quantity: Quantity::Conditional { horizon: *h },
            base_age: spec.ages[rows[0]],
            ages: rows.iter().map(|&i| spec.ages[i]).collect(),
            profile: profile.to_vec(),
            lifetime_age: spec.lifetime_age,
        };
        let curve = match bands {
            Some((draws, seed)) => confidence_bands(fitted, &req, draws, seed)?,
            None => point_curve(&fitted.model, &req)?,
        };
        for (k, &i) in rows.iter().enumerate() {
            cells[i][j] = Some(ConditionalCell {
                estimate: curve.estimate[k],
                lo95: curve.lo95[k],
                hi95: curve.hi95[k],
            });
        }
    }
    Ok(ConditionalTable {
        stratum: None,
        profile: profile.to_vec(),
        ages: spec.ages.clone(),
        horizons: spec.horizons.clone(),
        cells,
        lifetime_age: spec.lifetime_age,
        limit_age: spec.limit_age,
    })
}

impl ConditionalTable {
    /// One row per conditioning age; estimate, lo95, hi95 per horizon.
    /// Blank cells are empty strings.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_conditional_tables_csv(w, std::slice::from_ref(self))
    }
}

pub fn write_conditional_tables_csv<W: Write>(w: W, tables: &[ConditionalTable]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let Some(first) = tables.first() else {
        out.flush()?;
        return Ok(());
    };
    let mut header = vec!["stratum".to_string(), "profile".to_string(), "age".to_string()];
    for h in &first.horizons {
        let l = h.label();
        header.push(l.clone());
        header.push(format!("{l}_lo95"));
        header.push(format!("{l}_hi95"));
    }
    out.write_record(&header)?;
    for t in tables {
        let stratum = stratum_label(t.stratum.as_deref());
        let profile = profile_label(&t.profile);
        for (i, age) in t.ages.iter().enumerate() {
            let mut row = vec![stratum.clone(), profile.clone(), age.to_string()];
            for cell in &t.cells[i] {
                match cell {
                    Some(c) => {
                        row.push(format!("{:.6}", c.estimate));
                        row.push(format!("{:.6}", c.lo95));
                        row.push(format!("{:.6}", c.hi95));
                    }
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
            }
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hazard::HazardSpec;

    const A: f64 = 0.04;
    const B: f64 = 0.02;
    const C: f64 = 0.10;

    fn constant(a: f64, b: f64, c: f64) -> IllnessDeathModel {
        IllnessDeathModel::new(
            vec![],
            HazardSpec::constant(Transition::HealthyToIll, a, vec![]).unwrap(),
            HazardSpec::constant(Transition::HealthyToDead, b, vec![]).unwrap(),
            HazardSpec::constant(Transition::IllToDead, c, vec![]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn constant_hazard_closed_forms() {
        let m = constant(A, B, C);
        let p = transition_probabilities(&m.baseline(), 60.0, 70.0).unwrap();
        let p00 = (-(A + B) * 10.0).exp();
        let p01 = A / (A + B - C) * ((-C * 10.0).exp() - (-(A + B) * 10.0).exp());
        assert!(((p.p00 - p00) / p00).abs() < 1e-12);
        assert!(((p.p01 - p01) / p01).abs() < 1e-10);
        assert!((p.p00 + p.p01 + p.p02 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_at_equal_ages() {
        let m = constant(A, B, C);
        let p = transition_probabilities(&m.baseline(), 65.0, 65.0).unwrap();
        assert_eq!((p.p00, p.p01, p.p02), (1.0, 0.0, 0.0));
        assert!(transition_probabilities(&m.baseline(), 66.0, 65.0).is_err());
    }

    #[test]
    fn prevalence_vanishes_with_instant_death() {
        let m = constant(A, B, 100.0);
        let req = CurveRequest::new(Quantity::Prevalence, 60.0, vec![60.0, 70.0, 80.0, 90.0]);
        let c = point_curve(&m, &req).unwrap();
        assert_eq!(c.estimate[0], 0.0);
        assert!(c.estimate.iter().all(|v| *v < 0.01));
    }

    #[test]
    fn risk_tends_to_competing_limit() {
        let m = constant(A, B, C);
        let r = risk_values(&m.baseline(), 60.0, &[60.0, 70.0, 400.0]).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - A / (A + B) * (1.0 - (-0.6f64).exp())).abs() < 1e-12);
        assert!((r[2] - 2.0 / 3.0).abs() < 1e-9);
        let w = conditional_probability(&m.baseline(), 75.0, 10.0).unwrap();
        assert!((w - r[1]).abs() < 1e-12);
        assert_eq!(conditional_probability(&m.baseline(), 75.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn occupancy_recursion_matches_direct_integral() {
        let m = constant(0.03, 0.01, 0.2);
        let ages = [61.0, 64.5, 70.0, 83.0];
        let occ = occupancy_values(&m.baseline(), 60.0, &ages).unwrap();
        for (i, &t) in ages.iter().enumerate() {
            let p = transition_probabilities(&m.baseline(), 60.0, t).unwrap();
            assert!((occ[i].1 - p.p01).abs() < 1e-12);
        }
    }

    #[test]
    fn quantiles() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.0);
        assert_eq!(quantile(&v, 0.0), 0.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.125) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn psd_repair_flags_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (l, repaired) = psd_factor(&m);
        assert!(repaired);
        let back = &l * l.transpose();
        assert!(back.symmetric_eigen().eigenvalues.iter().all(|v| *v > -1e-12));
        let (_, repaired) = psd_factor(&DMatrix::identity(3, 3));
        assert!(!repaired);
    }
}
