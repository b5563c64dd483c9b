//! Transition intensities of the illness-death model.
//!
//! A [`HazardSpec`] pairs a baseline intensity (an M-spline combination with
//! squared coefficients, or a Weibull curve) with proportional-hazards
//! covariate effects: `alpha(t | z) = alpha_0(t) * exp(beta . z)`.
//!
//! Baselines expose their cumulative intensity as a point function `H(t)`
//! with `A_0(s, t) = H(t) - H(s)`, together with gradients in *natural*
//! coordinates: the realized coefficients `c_i = theta_i^2` for splines and
//! `(ln shape, ln scale)` for Weibull curves. Spline intensities beyond the
//! upper boundary are held at their boundary value.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::basis::KnotGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transition {
    #[serde(rename = "0->1")]
    HealthyToIll,
    #[serde(rename = "0->2")]
    HealthyToDead,
    #[serde(rename = "1->2")]
    IllToDead,
}

impl Transition {
    pub const ALL: [Transition; 3] = [
        Transition::HealthyToIll,
        Transition::HealthyToDead,
        Transition::IllToDead,
    ];

    pub fn index(self) -> usize {
        match self {
            Transition::HealthyToIll => 0,
            Transition::HealthyToDead => 1,
            Transition::IllToDead => 2,
        }
    }

    /// Compact label such as `01`.
    pub fn code(self) -> &'static str {
        match self {
            Transition::HealthyToIll => "01",
            Transition::HealthyToDead => "02",
            Transition::IllToDead => "12",
        }
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transition::HealthyToIll => "0->1",
            Transition::HealthyToDead => "0->2",
            Transition::IllToDead => "1->2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Baseline {
    /// `alpha_0(t) = sum_i theta_i^2 M_i(t)`.
    Spline { grid: KnotGrid, theta: Vec<f64> },
    /// `alpha_0(t) = (shape/scale) ((t - origin)/scale)^(shape-1)` for `t > origin`.
    Weibull {
        shape: f64,
        scale: f64,
        #[serde(default)]
        origin: f64,
    },
}

const STACK_BASIS: usize = 48;

fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    if n <= STACK_BASIS {
        let mut buf = [0.0; STACK_BASIS];
        f(&mut buf[..n])
    } else {
        let mut buf = vec![0.0; n];
        f(&mut buf)
    }
}

impl Baseline {
    pub fn num_params(&self) -> usize {
        match self {
            Baseline::Spline { grid, .. } => grid.num_basis(),
            Baseline::Weibull { .. } => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Baseline::Spline { grid, theta } => {
                if theta.len() != grid.num_basis() {
                    return Err(Error::DimensionMismatch {
                        what: "spline coefficients",
                        expected: grid.num_basis(),
                        actual: theta.len(),
                    });
                }
                if theta.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidHazard("non-finite spline coefficient".into()));
                }
            }
            Baseline::Weibull { shape, scale, origin } => {
                if !(shape.is_finite() && *shape > 0.0 && scale.is_finite() && *scale > 0.0) {
                    return Err(Error::InvalidHazard(format!(
                        "weibull shape and scale must be positive (got {shape}, {scale})"
                    )));
                }
                if !origin.is_finite() {
                    return Err(Error::InvalidHazard("weibull origin must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Lowest age at which the intensity is defined.
    pub fn domain_lo(&self) -> f64 {
        match self {
            Baseline::Spline { grid, .. } => grid.boundary_lo(),
            Baseline::Weibull { origin, .. } => *origin,
        }
    }

    pub fn is_extrapolated(&self, t: f64) -> bool {
        match self {
            Baseline::Spline { grid, .. } => t > grid.boundary_hi(),
            Baseline::Weibull { .. } => false,
        }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            Baseline::Spline { grid, .. } => grid.breakpoints(),
            Baseline::Weibull { origin, .. } => vec![*origin],
        }
    }

    /// Optimizer coordinates: raw spline coefficients, or log shape and log
    /// scale.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Baseline::Spline { theta, .. } => theta.clone(),
            Baseline::Weibull { shape, scale, .. } => vec![shape.ln(), scale.ln()],
        }
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "baseline parameters",
                expected: self.num_params(),
                actual: p.len(),
            });
        }
        let b = match self {
            Baseline::Spline { grid, .. } => Baseline::Spline {
                grid: grid.clone(),
                theta: p.to_vec(),
            },
            Baseline::Weibull { origin, .. } => Baseline::Weibull {
                shape: p[0].exp(),
                scale: p[1].exp(),
                origin: *origin,
            },
        };
        b.validate()?;
        Ok(b)
    }

    /// Whether optimizer coordinate `i` enters the intensity squared.
    pub fn is_squared(&self, _i: usize) -> bool {
        matches!(self, Baseline::Spline { .. })
    }

    /// `d natural_i / d param_i` (natural and optimizer coordinates are
    /// related coordinate-wise).
    pub fn natural_jacobian(&self, i: usize) -> f64 {
        match self {
            Baseline::Spline { theta, .. } => 2.0 * theta[i],
            Baseline::Weibull { .. } => 1.0,
        }
    }

    /// Realized spline coefficients `theta_i^2`.
    pub fn coefficients(&self) -> Option<Vec<f64>> {
        match self {
            Baseline::Spline { theta, .. } => Some(theta.iter().map(|t| t * t).collect()),
            Baseline::Weibull { .. } => None,
        }
    }

    /// Baseline intensity at `t` and its natural-coordinate gradient,
    /// written to `grad` (length `num_params`).
    pub fn hazard_point(&self, t: f64, grad: &mut [f64]) -> f64 {
        match self {
            Baseline::Spline { grid, theta } => {
                grid.mspline_into(t.min(grid.boundary_hi()), grad);
                theta.iter().zip(grad.iter()).map(|(th, m)| th * th * m).sum()
            }
            Baseline::Weibull { shape, scale, origin } => {
                let h = weibull_hazard(*shape, *scale, *origin, t);
                let r = (t - origin) / scale;
                grad[0] = if r > 0.0 { h * (1.0 + shape * r.ln()) } else { 0.0 };
                grad[1] = -shape * h;
                h
            }
        }
    }

    /// Point cumulative intensity `H(t)` and its natural gradient.
    pub fn cumulative_point(&self, t: f64, grad: &mut [f64]) -> f64 {
        match self {
            Baseline::Spline { grid, theta } => {
                let hi = grid.boundary_hi();
                grid.ispline_into(t, grad);
                if t > hi {
                    with_scratch(grad.len(), |m| {
                        grid.mspline_into(hi, m);
                        for (g, mi) in grad.iter_mut().zip(m.iter()) {
                            *g += mi * (t - hi);
                        }
                    });
                }
                theta.iter().zip(grad.iter()).map(|(th, v)| th * th * v).sum()
            }
            Baseline::Weibull { shape, scale, origin } => {
                let r = (t - origin) / scale;
                if r <= 0.0 {
                    grad[0] = 0.0;
                    grad[1] = 0.0;
                    return 0.0;
                }
                let h = r.powf(*shape);
                grad[0] = shape * h * r.ln();
                grad[1] = -shape * h;
                h
            }
        }
    }

    pub fn hazard_at(&self, t: f64) -> f64 {
        match self {
            Baseline::Weibull { shape, scale, origin } => weibull_hazard(*shape, *scale, *origin, t),
            _ => with_scratch(self.num_params(), |g| self.hazard_point(t, g)),
        }
    }

    pub fn cumulative_at(&self, t: f64) -> f64 {
        match self {
            Baseline::Weibull { shape, scale, origin } => {
                let r = (t - origin) / scale;
                if r <= 0.0 {
                    0.0
                } else {
                    r.powf(*shape)
                }
            }
            _ => with_scratch(self.num_params(), |g| self.cumulative_point(t, g)),
        }
    }
}

fn weibull_hazard(shape: f64, scale: f64, origin: f64, t: f64) -> f64 {
    let r = (t - origin) / scale;
    if r <= 0.0 {
        return if shape == 1.0 {
            1.0 / scale
        } else if shape > 1.0 {
            0.0
        } else {
            f64::INFINITY
        };
    }
    shape / scale * r.powf(shape - 1.0)
}

/// One transition intensity with its covariate log-hazard ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardSpec {
    pub transition: Transition,
    #[serde(flatten)]
    pub baseline: Baseline,
    #[serde(default)]
    pub beta: Vec<f64>,
}

impl HazardSpec {
    pub fn new(transition: Transition, baseline: Baseline, beta: Vec<f64>) -> Result<Self> {
        baseline.validate()?;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidHazard("non-finite log hazard ratio".into()));
        }
        Ok(Self {
            transition,
            baseline,
            beta,
        })
    }

    pub fn spline(transition: Transition, grid: KnotGrid, theta: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        Self::new(transition, Baseline::Spline { grid, theta }, beta)
    }

    pub fn weibull(transition: Transition, shape: f64, scale: f64, beta: Vec<f64>) -> Result<Self> {
        Self::weibull_from(transition, shape, scale, 0.0, beta)
    }

    pub fn weibull_from(
        transition: Transition,
        shape: f64,
        scale: f64,
        origin: f64,
        beta: Vec<f64>,
    ) -> Result<Self> {
        Self::new(transition, Baseline::Weibull { shape, scale, origin }, beta)
    }

    /// Constant intensity `rate` (a unit-shape Weibull).
    pub fn constant(transition: Transition, rate: f64, beta: Vec<f64>) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidHazard(format!("constant rate must be positive, got {rate}")));
        }
        Self::weibull(transition, 1.0, 1.0 / rate, beta)
    }

    pub fn num_covariates(&self) -> usize {
        self.beta.len()
    }

    pub fn num_params(&self) -> usize {
        self.baseline.num_params() + self.beta.len()
    }

    /// `exp(beta . z)`.
    pub fn relative_risk(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        Ok(self.linear_predictor(z).exp())
    }

    pub(crate) fn linear_predictor(&self, z: &[f64]) -> f64 {
        self.beta.iter().zip(z).map(|(b, x)| b * x).sum()
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.beta.len() {
            return Err(Error::DimensionMismatch {
                what: "covariate vector",
                expected: self.beta.len(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    fn check_age(&self, t: f64) -> Result<()> {
        let lo = self.baseline.domain_lo();
        let ok = match self.baseline {
            Baseline::Spline { .. } => t >= lo,
            Baseline::Weibull { shape, .. } => t > lo || (t == lo && shape >= 1.0),
        };
        if ok && t.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain {
                value: t,
                lo,
                hi: f64::INFINITY,
            })
        }
    }

    /// `alpha(t | z)`. Spline intensities above the upper boundary are
    /// extrapolated as constants (see [`Baseline::is_extrapolated`]).
    pub fn intensity(&self, t: f64, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        self.check_age(t)?;
        Ok(self.baseline.hazard_at(t) * self.linear_predictor(z).exp())
    }

    /// `A(s, t | z) = ∫_s^t alpha(u | z) du`.
    pub fn cumulative_intensity(&self, s: f64, t: f64, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        if s > t {
            return Err(Error::Ordering { start: s, end: t });
        }
        self.check_age(s)?;
        self.check_age(t)?;
        if s == t {
            return Ok(0.0);
        }
        let a = self.baseline.cumulative_at(t) - self.baseline.cumulative_at(s);
        Ok(a.max(0.0) * self.linear_predictor(z).exp())
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.baseline.params();
        p.extend_from_slice(&self.beta);
        p
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "hazard parameters",
                expected: self.num_params(),
                actual: p.len(),
            });
        }
        let nb = self.baseline.num_params();
        Self::new(self.transition, self.baseline.with_params(&p[..nb])?, p[nb..].to_vec())
    }
}
