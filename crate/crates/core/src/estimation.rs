//! Penalized maximum likelihood for the illness-death model.

use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::KnotGrid;
use crate::error::{Error, Result};
use crate::hazard::{Baseline, HazardSpec, Transition};
use crate::likelihood::{self, LikelihoodOptions, PreparedData, Want};
use crate::model::IllnessDeathModel;
use crate::optimize::{self, Objective, Status, Tolerances, TraceRecord};
use crate::record::SubjectRecord;

/// Per-transition roughness weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub kappa01: f64,
    pub kappa02: f64,
    pub kappa12: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self::uniform(0.0)
    }
}

impl PenaltyWeights {
    pub fn new(kappa01: f64, kappa02: f64, kappa12: f64) -> Result<Self> {
        let w = Self { kappa01, kappa02, kappa12 };
        w.validate()?;
        Ok(w)
    }

    pub fn uniform(kappa: f64) -> Self {
        Self {
            kappa01: kappa,
            kappa02: kappa,
            kappa12: kappa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in self.as_array() {
            if !(k.is_finite() && k >= 0.0) {
                return Err(Error::Config(format!("smoothing weight {k} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn get(&self, tr: Transition) -> f64 {
        self.as_array()[tr.index()]
    }

    pub fn set(&mut self, tr: Transition, kappa: f64) {
        match tr {
            Transition::HealthyToIll => self.kappa01 = kappa,
            Transition::HealthyToDead => self.kappa02 = kappa,
            Transition::IllToDead => self.kappa12 = kappa,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.kappa01, self.kappa02, self.kappa12]
    }
}

/// Baseline family used for all three transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineConfig {
    Spline {
        #[serde(default = "default_interior_knots")]
        interior_knots: usize,
        #[serde(default = "default_order")]
        order: usize,
        /// Defaults to the youngest entry and oldest exit in the data,
        /// rounded outward to whole years.
        #[serde(default)]
        boundary: Option<[f64; 2]>,
        /// Explicit interior knots; overrides `interior_knots`.
        #[serde(default)]
        knots: Option<Vec<f64>>,
    },
    Weibull {
        /// Age at which the Weibull clock starts; defaults to the youngest
        /// entry age in the data.
        #[serde(default)]
        origin: Option<f64>,
    },
}

fn default_interior_knots() -> usize {
    5
}

fn default_order() -> usize {
    4
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig::Spline {
            interior_knots: default_interior_knots(),
            order: default_order(),
            boundary: None,
            knots: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Smoothing {
    Fixed(PenaltyWeights),
    /// Approximate cross-validation over a grid.
    Lcv(SmoothingSearch),
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Lcv(SmoothingSearch::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingSearch {
    pub grid: Vec<f64>,
    /// Evaluate every combination instead of coordinate-wise sweeps.
    pub full_grid: bool,
    pub sweeps: usize,
    /// Scores within this many log-likelihood units of the best count as
    /// tied; ties go to the largest weight.
    pub tie_tolerance: f64,
}

impl Default for SmoothingSearch {
    fn default() -> Self {
        Self {
            grid: (-2..=6).map(|e| 10f64.powi(e)).collect(),
            full_grid: false,
            sweeps: 3,
            tie_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub covariates: Vec<String>,
    pub baseline: BaselineConfig,
    pub smoothing: Smoothing,
    pub likelihood: LikelihoodOptions,
    pub tolerances: Tolerances,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            covariates: Vec::new(),
            baseline: BaselineConfig::default(),
            smoothing: Smoothing::default(),
            likelihood: LikelihoodOptions::default(),
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceStatus {
    Inverse,
    /// The penalized Hessian was singular; a pseudo-inverse was used.
    PseudoInverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub status: Status,
    /// Directional finite-difference check of the analytic gradient at the
    /// optimum: absolute discrepancy and whether it met tolerance.
    pub gradient_check_error: f64,
    pub gradient_check_passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub model: IllnessDeathModel,
    pub weights: PenaltyWeights,
    pub logpl: f64,
    pub loglik: f64,
    /// Approximate cross-validation score `loglik - effective_df`.
    pub lcv: f64,
    pub effective_df: f64,
    pub param_names: Vec<String>,
    /// Covariance of the optimizer parameters, row-major.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub covariance_status: Option<CovarianceStatus>,
    pub convergence: Convergence,
    pub n_subjects: usize,
    pub observed_transitions: [usize; 3],
    /// Transitions with no observed event; their baselines rest on the
    /// penalty and initial values alone.
    pub weakly_identified: Vec<Transition>,
}

impl FittedModel {
    pub fn covariance_matrix(&self) -> Option<DMatrix<f64>> {
        let rows = self.covariance.as_ref()?;
        let n = rows.len();
        Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// Copy with the covariance removed or replaced.
    pub fn with_covariance(&self, cov: Option<&DMatrix<f64>>) -> Self {
        let mut out = self.clone();
        out.covariance = cov.map(matrix_rows);
        out.covariance_status = cov.map(|_| CovarianceStatus::Inverse);
        out
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// `c' P c` for a spline baseline with realized coefficients `c`.
pub fn roughness(baseline: &Baseline) -> Result<f64> {
    match baseline {
        Baseline::Spline { grid, .. } => {
            let c = DVector::from_vec(baseline.coefficients().expect("spline coefficients"));
            let p = grid.penalty_matrix()?;
            Ok(c.dot(&(p * &c)))
        }
        Baseline::Weibull { .. } => Ok(0.0),
    }
}

/// Total log-likelihood minus `sum_h kappa_h c_h' P_h c_h`.
pub fn penalized_loglik(records: &[SubjectRecord], model: &IllnessDeathModel, weights: &PenaltyWeights) -> Result<f64> {
    weights.validate()?;
    let mut v = likelihood::total_log_likelihood(records, model)?;
    for tr in Transition::ALL {
        let k = weights.get(tr);
        if k > 0.0 {
            v -= k * roughness(&model.spec(tr).baseline)?;
        }
    }
    Ok(v)
}

/// The penalized objective over the flat parameter vector of `template`.
pub struct PenalizedObjective<'a> {
    data: &'a PreparedData,
    template: IllnessDeathModel,
    kappa: [f64; 3],
    penalties: [Option<DMatrix<f64>>; 3],
    opts: LikelihoodOptions,
}

impl<'a> PenalizedObjective<'a> {
    pub fn new(data: &'a PreparedData, template: IllnessDeathModel, weights: &PenaltyWeights, opts: LikelihoodOptions) -> Result<Self> {
        weights.validate()?;
        let mut penalties: [Option<DMatrix<f64>>; 3] = [None, None, None];
        for tr in Transition::ALL {
            if let Baseline::Spline { grid, .. } = &template.spec(tr).baseline {
                if weights.get(tr) > 0.0 {
                    penalties[tr.index()] = Some(grid.penalty_matrix()?);
                }
            }
        }
        Ok(Self {
            data,
            template,
            kappa: weights.as_array(),
            penalties,
            opts,
        })
    }

    pub fn model_at(&self, x: &[f64]) -> Result<IllnessDeathModel> {
        self.template.with_params(x)
    }

    fn penalty_value(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for tr in Transition::ALL {
            if let Some(p) = &self.penalties[tr.index()] {
                let block = self.template.baseline_block(tr);
                let c = DVector::from_iterator(block.len(), x[block].iter().map(|t| t * t));
                total += self.kappa[tr.index()] * c.dot(&(p * &c));
            }
        }
        total
    }

    /// Adds the penalty's gradient (negated) into `g` and, if given, its
    /// Hessian into the curvature matrix `b` (negative Hessian).
    fn penalty_derivatives(&self, x: &[f64], g: &mut [f64], b: Option<&mut DMatrix<f64>>) {
        let mut b = b;
        for tr in Transition::ALL {
            let Some(p) = &self.penalties[tr.index()] else { continue };
            let k = self.kappa[tr.index()];
            let block = self.template.baseline_block(tr);
            let theta = &x[block.clone()];
            let c = DVector::from_iterator(theta.len(), theta.iter().map(|t| t * t));
            let pc = p * &c;
            for (i, idx) in block.clone().enumerate() {
                g[idx] -= 4.0 * k * theta[i] * pc[i];
            }
            if let Some(b) = b.as_deref_mut() {
                for (i, ii) in block.clone().enumerate() {
                    b[(ii, ii)] += 4.0 * k * pc[i];
                    for (j, jj) in block.clone().enumerate() {
                        b[(ii, jj)] += 8.0 * k * theta[i] * theta[j] * p[(i, j)];
                    }
                }
            }
        }
    }

    /// Negative Hessian of the penalty term alone.
    pub fn penalty_curvature(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let mut b = DMatrix::zeros(n, n);
        let mut g = vec![0.0; n];
        self.penalty_derivatives(x, &mut g, Some(&mut b));
        b
    }

    fn loglik_gradient(&self, x: &[f64], want: Want) -> Result<(f64, Vec<f64>, Vec<f64>, Option<DMatrix<f64>>)> {
        let model = self.model_at(x)?;
        let ev = likelihood::evaluate(self.data, &model, self.opts, want)?;
        let natural = ev.gradient.expect("gradient requested");
        let jac = likelihood::param_jacobian(&model);
        let g = natural.iter().zip(&jac).map(|(a, b)| a * b).collect();
        Ok((ev.loglik, g, natural, ev.outer))
    }

    pub fn loglik(&self, x: &[f64]) -> Result<f64> {
        let model = self.model_at(x)?;
        Ok(likelihood::evaluate(self.data, &model, self.opts, Want::Value)?.loglik)
    }
}

impl Objective for PenalizedObjective<'_> {
    fn dim(&self) -> usize {
        self.template.num_params()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.loglik(x)? - self.penalty_value(x))
    }

    fn gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ll, mut g, _, _) = self.loglik_gradient(x, Want::Gradient)?;
        self.penalty_derivatives(x, &mut g, None);
        Ok((ll - self.penalty_value(x), g))
    }

    /// Outer-product information plus the exact second-order term of the
    /// squared parameterization and the exact penalty Hessian.
    fn curvature(&self, x: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        let (ll, mut g, natural, outer) = self.loglik_gradient(x, Want::GradientAndOuter)?;
        let mut b = outer.expect("outer product requested");
        for tr in Transition::ALL {
            if self.template.spec(tr).baseline.is_squared(0) {
                for idx in self.template.baseline_block(tr) {
                    b[(idx, idx)] -= 2.0 * natural[idx];
                }
            }
        }
        self.penalty_derivatives(x, &mut g, Some(&mut b));
        Ok((ll - self.penalty_value(x), g, b))
    }
}

/// Left-truncated event-time triples `(entry, exit, event)` per transition
/// with onset imputed at the interval midpoint.
fn crude_episodes(data: &PreparedData) -> [Vec<(f64, f64, bool)>; 3] {
    let mut out: [Vec<(f64, f64, bool)>; 3] = Default::default();
    for r in data.records() {
        let dead = r.death.is_some();
        match r.onset {
            Some(onset) => {
                let m = onset.midpoint();
                out[0].push((r.entry, m, true));
                out[1].push((r.entry, m, false));
                let exit = r.death.unwrap_or(r.last_alive);
                if exit > m {
                    out[2].push((m, exit, dead));
                }
            }
            None => {
                let exit = r.death.unwrap_or(r.last_healthy);
                out[0].push((r.entry, exit, false));
                out[1].push((r.entry, exit, dead));
            }
        }
    }
    out
}

struct WeibullPrefit<'a> {
    episodes: &'a [(f64, f64, bool)],
    origin: f64,
}

impl WeibullPrefit<'_> {
    fn eval(&self, x: &[f64], grad: bool) -> Result<(f64, Vec<f64>)> {
        let (k, lam) = (x[0].exp(), x[1].exp());
        if !(k.is_finite() && lam.is_finite() && k > 0.0 && lam > 0.0) {
            return Err(Error::InvalidHazard("prefit parameters out of range".into()));
        }
        let mut f = 0.0;
        let mut g = vec![0.0; 2];
        for &(a, b, event) in self.episodes {
            for (t, sign) in [(a, 1.0), (b, -1.0)] {
                let r = (t - self.origin) / lam;
                if r > 0.0 {
                    let h = r.powf(k);
                    f += sign * h;
                    if grad {
                        g[0] += sign * k * h * r.ln();
                        g[1] -= sign * k * h;
                    }
                }
            }
            if event {
                let r = (b - self.origin) / lam;
                if r <= 0.0 {
                    return Err(Error::Numeric {
                        id: "prefit".into(),
                        detail: "event at or before the Weibull origin".into(),
                    });
                }
                f += k.ln() - lam.ln() + (k - 1.0) * r.ln();
                if grad {
                    g[0] += 1.0 + k * r.ln();
                    g[1] -= k;
                }
            }
        }
        Ok((f, g))
    }
}

impl Objective for WeibullPrefit<'_> {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(x, false)?.0)
    }
    fn gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(x, true)
    }
}

/// Weibull `(shape, scale)` fitted to crude episodes, or an exponential
/// fallback when there are too few events.
fn prefit_weibull(episodes: &[(f64, f64, bool)], origin: f64) -> (f64, f64) {
    let events = episodes.iter().filter(|e| e.2).count();
    let exposure: f64 = episodes.iter().map(|(a, b, _)| (b - a).max(0.0)).sum();
    let rate = (events.max(1) as f64 * if events == 0 { 0.5 } else { 1.0 }) / exposure.max(1.0);
    let exponential = (1.0, 1.0 / rate);
    if events < 3 {
        return exponential;
    }
    let obj = WeibullPrefit { episodes, origin };
    // Start from the exponential fit with the clock at `origin`.
    let x0 = [0.0, (1.0 / rate).ln()];
    let tol = Tolerances {
        objective: 1e-9,
        gradient: 1e-6,
        max_iterations: 200,
        newton_switch: f64::INFINITY,
    };
    match optimize::maximize(&obj, &x0, &tol, &mut |_| {}) {
        Ok(opt) => (opt.x[0].exp(), opt.x[1].exp()),
        Err(e) => {
            debug!("weibull prefit failed ({e}); using exponential start");
            exponential
        }
    }
}

/// Least-squares spline coefficients `theta` approximating `target`.
fn project_onto_splines(grid: &KnotGrid, target: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = grid.num_basis();
    let m = 20 * n;
    let (lo, hi) = (grid.boundary_lo(), grid.boundary_hi());
    let mut x = DMatrix::zeros(m, n);
    let mut y = DVector::zeros(m);
    let mut row = vec![0.0; n];
    for r in 0..m {
        let t = lo + (hi - lo) * (r as f64 + 0.5) / m as f64;
        grid.mspline_into(t, &mut row);
        for j in 0..n {
            x[(r, j)] = row[j];
        }
        y[r] = target(t);
    }
    let c = x
        .svd(true, true)
        .solve(&y, 1e-12)
        .unwrap_or_else(|_| DVector::from_element(n, y.mean()));
    let max = c.iter().fold(0.0f64, |a, v| a.max(*v));
    let floor = (max * 1e-3).max(1e-10);
    c.iter().map(|v| v.max(floor).sqrt()).collect()
}

fn data_bounds(records: &[SubjectRecord]) -> Result<(f64, f64)> {
    let lo = records.iter().map(|r| r.entry_age).fold(f64::INFINITY, f64::min);
    let hi = records
        .iter()
        .map(|r| r.exit_age().max(r.last_alive_age).max(r.onset.map_or(0.0, |o| o.upper())))
        .fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::Config("cannot derive an age range from the records".into()));
    }
    Ok((lo, hi))
}

/// Starting model: Weibull pre-fits per transition, projected onto the
/// spline basis when the configured form is a spline.
pub fn initial_model(records: &[SubjectRecord], config: &FitConfig) -> Result<IllnessDeathModel> {
    if records.is_empty() {
        return Err(Error::Config("no records to fit".into()));
    }
    let data = PreparedData::new(records, &config.covariates)?;
    let episodes = crude_episodes(&data);
    let (lo, hi) = data_bounds(records)?;
    let zero = vec![0.0; config.covariates.len()];
    let specs = match &config.baseline {
        BaselineConfig::Weibull { origin } => {
            let origin = origin.unwrap_or(lo);
            if origin > lo {
                return Err(Error::Config(format!("weibull origin {origin} exceeds youngest entry age {lo}")));
            }
            Transition::ALL
                .iter()
                .map(|&tr| {
                    let (k, s) = prefit_weibull(&episodes[tr.index()], origin);
                    HazardSpec::weibull_from(tr, k, s, origin, zero.clone())
                })
                .collect::<Result<Vec<_>>>()?
        }
        BaselineConfig::Spline {
            interior_knots,
            order,
            boundary,
            knots,
        } => {
            let (blo, bhi) = boundary.map(|b| (b[0], b[1])).unwrap_or((lo.floor(), hi.ceil()));
            if blo > lo {
                return Err(Error::Config(format!("spline boundary {blo} exceeds youngest entry age {lo}")));
            }
            let grid = match knots {
                Some(k) => KnotGrid::new(blo, bhi, k.clone(), *order)?,
                None => KnotGrid::equidistant(blo, bhi, *interior_knots, *order)?,
            };
            Transition::ALL
                .iter()
                .map(|&tr| {
                    let (k, s) = prefit_weibull(&episodes[tr.index()], 0.0);
                    let w = Baseline::Weibull {
                        shape: k,
                        scale: s,
                        origin: 0.0,
                    };
                    let theta = project_onto_splines(&grid, |t| w.hazard_at(t));
                    HazardSpec::spline(tr, grid.clone(), theta, zero.clone())
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let [h01, h02, h12]: [HazardSpec; 3] = specs.try_into().expect("three transitions");
    IllnessDeathModel::new(config.covariates.clone(), h01, h02, h12)
}

/// Fits with the configured smoothing: fixed weights, or cross-validated
/// selection.
pub fn fit(records: &[SubjectRecord], config: &FitConfig) -> Result<FittedModel> {
    fit_traced(records, config, &mut |_| {})
}

pub fn fit_traced(records: &[SubjectRecord], config: &FitConfig, trace: &mut dyn FnMut(&TraceRecord)) -> Result<FittedModel> {
    let has_spline = matches!(config.baseline, BaselineConfig::Spline { .. });
    match &config.smoothing {
        Smoothing::Lcv(search) if has_spline => Ok(select_smoothing(records, config, search)?.fitted),
        Smoothing::Lcv(_) => fit_with_weights(records, config, &PenaltyWeights::default(), None, trace),
        Smoothing::Fixed(w) => fit_with_weights(records, config, w, None, trace),
    }
}

/// Fits at fixed smoothing weights, optionally warm-started from `start`.
pub fn fit_with_weights(
    records: &[SubjectRecord],
    config: &FitConfig,
    weights: &PenaltyWeights,
    start: Option<&IllnessDeathModel>,
    trace: &mut dyn FnMut(&TraceRecord),
) -> Result<FittedModel> {
    let template = match start {
        Some(m) => m.clone(),
        None => initial_model(records, config)?,
    };
    let data = PreparedData::new(records, &config.covariates)?;
    fit_prepared(&data, template, weights, config, trace)
}

fn fit_prepared(
    data: &PreparedData,
    template: IllnessDeathModel,
    weights: &PenaltyWeights,
    config: &FitConfig,
    trace: &mut dyn FnMut(&TraceRecord),
) -> Result<FittedModel> {
    let observed = data.observed_transitions();
    let weakly_identified: Vec<Transition> = Transition::ALL.into_iter().filter(|t| observed[t.index()] == 0).collect();
    for t in &weakly_identified {
        warn!("no observed {t} transitions; that baseline is weakly identified");
    }
    let obj = PenalizedObjective::new(data, template.clone(), weights, config.likelihood)?;
    let x0 = template.params();
    let opt = optimize::maximize(&obj, &x0, &config.tolerances, trace)?;

    let (gradient_check_error, gradient_check_passed) = directional_gradient_check(&obj, &opt.x, &opt.gradient)?;
    if !gradient_check_passed {
        warn!("analytic gradient disagrees with finite differences at the optimum (error {gradient_check_error:.3e})");
    }

    let hessian = optimize::numeric_hessian(&obj, &opt.x, &opt.gradient, true)?;
    let info = -hessian;
    let (cov, pseudo) = optimize::symmetric_inverse(&info);
    if pseudo {
        warn!("penalized Hessian is singular; covariance uses a pseudo-inverse");
    }
    let loglik = obj.loglik(&opt.x)?;
    // tr(H_pl^-1 H_l) with H_l = H_pl - H_pen.
    let pen = obj.penalty_curvature(&opt.x);
    let effective_df = (&cov * (&info - pen)).trace();
    let model = obj.model_at(&opt.x)?;
    Ok(FittedModel {
        param_names: model.param_names(),
        model,
        weights: *weights,
        logpl: opt.value,
        loglik,
        lcv: loglik - effective_df,
        effective_df,
        covariance: Some(matrix_rows(&cov)),
        covariance_status: Some(if pseudo { CovarianceStatus::PseudoInverse } else { CovarianceStatus::Inverse }),
        convergence: Convergence {
            iterations: opt.iterations,
            gradient_norm: optimize::norm(&opt.gradient),
            status: opt.status,
            gradient_check_error,
            gradient_check_passed,
        },
        n_subjects: data.len(),
        observed_transitions: observed,
        weakly_identified,
    })
}

/// Central difference of the objective along a fixed pseudo-random unit
/// direction, compared with the analytic directional derivative.
fn directional_gradient_check(obj: &PenalizedObjective, x: &[f64], g: &[f64]) -> Result<(f64, bool)> {
    let n = x.len();
    let mut d: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5).collect();
    let dn = optimize::norm(&d);
    d.iter_mut().for_each(|v| *v /= dn);
    let h = 1e-5;
    let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
    let xm: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - h * b).collect();
    let fd = (obj.value(&xp)? - obj.value(&xm)?) / (2.0 * h);
    let an: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
    let err = (fd - an).abs();
    Ok((err, err <= 1e-4 * an.abs().max(1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub weights: PenaltyWeights,
    pub lcv: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SmoothingSelection {
    pub weights: PenaltyWeights,
    pub score: f64,
    /// Every evaluated grid point in evaluation order.
    pub evaluated: Vec<GridPoint>,
    pub fitted: FittedModel,
}

type Key = [u64; 3];

fn key(w: &PenaltyWeights) -> Key {
    w.as_array().map(f64::to_bits)
}

/// Chooses smoothing weights maximizing `loglik - tr(H_pl^-1 H_l)`.
pub fn select_smoothing(records: &[SubjectRecord], config: &FitConfig, search: &SmoothingSearch) -> Result<SmoothingSelection> {
    if search.grid.is_empty() {
        return Err(Error::Config("smoothing grid is empty".into()));
    }
    let mut grid = search.grid.clone();
    for k in &grid {
        PenaltyWeights::uniform(*k).validate()?;
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let data = PreparedData::new(records, &config.covariates)?;
    let init = initial_model(records, config)?;
    let searched: Vec<Transition> = Transition::ALL
        .into_iter()
        .filter(|t| matches!(init.spec(*t).baseline, Baseline::Spline { .. }))
        .collect();

    let mut cache: BTreeMap<Key, std::result::Result<FittedModel, String>> = BTreeMap::new();
    let mut evaluated = Vec::new();
    // Every grid point starts from the same initial model: starting from a
    // heavily penalized neighbour can leave coefficients near zero, where the
    // optimizer crawls.
    let mut eval = |w: PenaltyWeights| -> Option<FittedModel> {
        let k = key(&w);
        if !cache.contains_key(&k) {
            let res = fit_prepared(&data, init.clone(), &w, config, &mut |_| {}).map_err(|e| e.to_string());
            debug!("smoothing {:?}: {:?}", w.as_array(), res.as_ref().map(|f| f.lcv));
            evaluated.push(GridPoint {
                weights: w,
                lcv: res.as_ref().ok().map(|f| f.lcv),
                error: res.as_ref().err().cloned(),
            });
            cache.insert(k, res);
        }
        cache[&k].as_ref().ok().cloned()
    };

    let better = |cand: &FittedModel, best: &Option<FittedModel>, tr: Option<Transition>| -> bool {
        match best {
            None => true,
            Some(b) => {
                if cand.lcv > b.lcv + search.tie_tolerance {
                    return true;
                }
                if cand.lcv < b.lcv - search.tie_tolerance {
                    return false;
                }
                // Tie: prefer the smoother fit.
                let (cw, bw) = match tr {
                    Some(t) => (cand.weights.get(t), b.weights.get(t)),
                    None => (cand.weights.as_array().iter().sum(), b.weights.as_array().iter().sum()),
                };
                cw > bw
            }
        }
    };

    let mut best: Option<FittedModel> = None;
    if search.full_grid || searched.len() <= 1 {
        let mut combos = vec![PenaltyWeights::default()];
        for &t in &searched {
            combos = combos
                .into_iter()
                .flat_map(|w| {
                    grid.iter().map(move |&k| {
                        let mut w2 = w;
                        w2.set(t, k);
                        w2
                    })
                })
                .collect();
        }
        for w in combos {
            if let Some(f) = eval(w) {
                if better(&f, &best, None) {
                    best = Some(f);
                }
            }
        }
    } else {
        let mid = grid[grid.len() / 2];
        let mut current = PenaltyWeights::default();
        for &t in &searched {
            current.set(t, mid);
        }
        if let Some(f) = eval(current) {
            best = Some(f);
        }
        for _ in 0..search.sweeps.max(1) {
            let before = current;
            for &t in &searched {
                let mut sweep_best: Option<FittedModel> = None;
                for &k in &grid {
                    let mut w = current;
                    w.set(t, k);
                    if let Some(f) = eval(w) {
                        if better(&f, &sweep_best, Some(t)) {
                            sweep_best = Some(f);
                        }
                    }
                }
                if let Some(f) = sweep_best {
                    current = f.weights;
                    best = Some(f);
                }
            }
            if key(&before) == key(&current) {
                break;
            }
        }
    }
    match best {
        Some(fitted) => Ok(SmoothingSelection {
            weights: fitted.weights,
            score: fitted.lcv,
            evaluated,
            fitted,
        }),
        None => Err(Error::SmoothingFailed(
            evaluated
                .iter()
                .filter_map(|g| g.error.as_ref().map(|e| format!("{:?}: {e}", g.weights.as_array())))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRatio {
    pub transition: Transition,
    pub covariate: String,
    pub beta: f64,
    pub se: Option<f64>,
    pub hr: f64,
    pub lo95: Option<f64>,
    pub hi95: Option<f64>,
}

impl HazardRatio {
    pub fn from_beta(transition: Transition, covariate: impl Into<String>, beta: f64, se: Option<f64>) -> Self {
        let se = se.filter(|s| s.is_finite() && *s >= 0.0);
        Self {
            transition,
            covariate: covariate.into(),
            beta,
            se,
            hr: beta.exp(),
            lo95: se.map(|s| (beta - 1.96 * s).exp()),
            hi95: se.map(|s| (beta + 1.96 * s).exp()),
        }
    }

    /// `"0.85 [0.73, 0.98]"`, or `"0.85 [NA]"` without a standard error.
    pub fn display(&self) -> String {
        match (self.lo95, self.hi95) {
            (Some(lo), Some(hi)) => format!("{:.2} [{:.2}, {:.2}]", self.hr, lo, hi),
            _ => format!("{:.2} [NA]", self.hr),
        }
    }
}

/// One row per (transition, covariate).
pub fn hazard_ratios(fitted: &FittedModel) -> Vec<HazardRatio> {
    let model = &fitted.model;
    let cov = fitted.covariance_matrix();
    let mut rows = Vec::new();
    for tr in Transition::ALL {
        for (j, idx) in model.beta_block(tr).enumerate() {
            let beta = model.spec(tr).beta[j];
            let se = cov.as_ref().map(|c| c[(idx, idx)].max(0.0).sqrt());
            rows.push(HazardRatio::from_beta(tr, model.covariates[j].clone(), beta, se));
        }
    }
    rows
}
