//! The three-intensity illness-death model and its flat parameter layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::{HazardSpec, Transition};
use crate::quadrature;

/// Intensities evaluated for one fixed covariate profile. This is all the
/// probability code needs, so fitted models and simulation truths both
/// implement it.
pub trait IntensityModel: Sync {
    fn hazard(&self, tr: Transition, t: f64) -> f64;

    fn cumulative(&self, tr: Transition, s: f64, t: f64) -> f64;

    /// Ages where any intensity may be non-smooth.
    fn breakpoints(&self) -> Vec<f64>;

    /// Lowest age at which all intensities are defined.
    fn domain_lo(&self) -> f64;

    /// True when evaluating at `t` relies on tail extrapolation.
    fn extrapolated(&self, _t: f64) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllnessDeathModel {
    #[serde(default)]
    pub covariates: Vec<String>,
    pub h01: HazardSpec,
    pub h02: HazardSpec,
    pub h12: HazardSpec,
}

impl IllnessDeathModel {
    pub fn new(covariates: Vec<String>, h01: HazardSpec, h02: HazardSpec, h12: HazardSpec) -> Result<Self> {
        let m = Self {
            covariates,
            h01,
            h02,
            h12,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for tr in Transition::ALL {
            let spec = self.spec(tr);
            if spec.transition != tr {
                return Err(Error::InvalidHazard(format!(
                    "slot {tr} holds a {} intensity",
                    spec.transition
                )));
            }
            if spec.beta.len() != self.covariates.len() {
                return Err(Error::DimensionMismatch {
                    what: "log hazard ratios",
                    expected: self.covariates.len(),
                    actual: spec.beta.len(),
                });
            }
        }
        Ok(())
    }

    pub fn spec(&self, tr: Transition) -> &HazardSpec {
        match tr {
            Transition::HealthyToIll => &self.h01,
            Transition::HealthyToDead => &self.h02,
            Transition::IllToDead => &self.h12,
        }
    }

    pub fn specs(&self) -> [&HazardSpec; 3] {
        [&self.h01, &self.h02, &self.h12]
    }

    pub fn num_params(&self) -> usize {
        self.specs().iter().map(|s| s.num_params()).sum()
    }

    /// Range of `tr`'s parameters (baseline then log hazard ratios) in the
    /// flat vector.
    pub fn block(&self, tr: Transition) -> Range<usize> {
        let mut start = 0;
        for t in Transition::ALL {
            let n = self.spec(t).num_params();
            if t == tr {
                return start..start + n;
            }
            start += n;
        }
        unreachable!()
    }

    pub fn baseline_block(&self, tr: Transition) -> Range<usize> {
        let b = self.block(tr);
        b.start..b.start + self.spec(tr).baseline.num_params()
    }

    pub fn beta_block(&self, tr: Transition) -> Range<usize> {
        let b = self.block(tr);
        b.start + self.spec(tr).baseline.num_params()..b.end
    }

    pub fn params(&self) -> Vec<f64> {
        self.specs().iter().flat_map(|s| s.params()).collect()
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "model parameters",
                expected: self.num_params(),
                actual: p.len(),
            });
        }
        let r01 = self.block(Transition::HealthyToIll);
        let r02 = self.block(Transition::HealthyToDead);
        let r12 = self.block(Transition::IllToDead);
        Ok(Self {
            covariates: self.covariates.clone(),
            h01: self.h01.with_params(&p[r01])?,
            h02: self.h02.with_params(&p[r02])?,
            h12: self.h12.with_params(&p[r12])?,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_params());
        for tr in Transition::ALL {
            let spec = self.spec(tr);
            match &spec.baseline {
                crate::hazard::Baseline::Spline { theta, .. } => {
                    names.extend((0..theta.len()).map(|i| format!("theta{}[{i}]", tr.code())));
                }
                crate::hazard::Baseline::Weibull { .. } => {
                    names.push(format!("log_shape{}", tr.code()));
                    names.push(format!("log_scale{}", tr.code()));
                }
            }
            names.extend(self.covariates.iter().map(|c| format!("beta{}[{c}]", tr.code())));
        }
        names
    }

    /// Intensities at covariate profile `z`.
    pub fn at(&self, z: &[f64]) -> Result<Profiled<'_>> {
        if z.len() != self.covariates.len() {
            return Err(Error::DimensionMismatch {
                what: "covariate profile",
                expected: self.covariates.len(),
                actual: z.len(),
            });
        }
        let rr = [
            self.h01.linear_predictor(z).exp(),
            self.h02.linear_predictor(z).exp(),
            self.h12.linear_predictor(z).exp(),
        ];
        Ok(Profiled { model: self, rr })
    }

    /// Intensities at the all-zero covariate profile.
    pub fn baseline(&self) -> Profiled<'_> {
        Profiled {
            model: self,
            rr: [1.0; 3],
        }
    }

    /// Resolves a named profile; unnamed covariates default to 0.
    pub fn profile_vector(&self, named: &[(String, f64)]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.covariates.len()];
        for (name, v) in named {
            let idx = self
                .covariates
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("model has no covariate `{name}`")))?;
            z[idx] = *v;
        }
        Ok(z)
    }
}

/// An [`IllnessDeathModel`] evaluated at a fixed covariate profile.
#[derive(Debug, Clone, Copy)]
pub struct Profiled<'a> {
    model: &'a IllnessDeathModel,
    rr: [f64; 3],
}

impl Profiled<'_> {
    pub fn model(&self) -> &IllnessDeathModel {
        self.model
    }
}

impl IntensityModel for Profiled<'_> {
    fn hazard(&self, tr: Transition, t: f64) -> f64 {
        self.model.spec(tr).baseline.hazard_at(t) * self.rr[tr.index()]
    }

    fn cumulative(&self, tr: Transition, s: f64, t: f64) -> f64 {
        if t <= s {
            return 0.0;
        }
        let b = &self.model.spec(tr).baseline;
        (b.cumulative_at(t) - b.cumulative_at(s)).max(0.0) * self.rr[tr.index()]
    }

    fn breakpoints(&self) -> Vec<f64> {
        quadrature::sorted_breakpoints(
            self.model
                .specs()
                .iter()
                .flat_map(|s| s.baseline.breakpoints()),
        )
    }

    fn domain_lo(&self) -> f64 {
        self.model
            .specs()
            .iter()
            .map(|s| s.baseline.domain_lo())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn extrapolated(&self, t: f64) -> bool {
        self.model.specs().iter().any(|s| s.baseline.is_extrapolated(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_model() -> IllnessDeathModel {
        IllnessDeathModel::new(
            vec!["x".into()],
            HazardSpec::constant(Transition::HealthyToIll, 0.04, vec![0.5]).unwrap(),
            HazardSpec::constant(Transition::HealthyToDead, 0.02, vec![0.0]).unwrap(),
            HazardSpec::constant(Transition::IllToDead, 0.10, vec![-0.2]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn param_roundtrip_and_blocks() {
        let m = constant_model();
        assert_eq!(m.num_params(), 9);
        assert_eq!(m.block(Transition::HealthyToDead), 3..6);
        assert_eq!(m.beta_block(Transition::IllToDead), 8..9);
        let back = m.with_params(&m.params()).unwrap();
        for tr in Transition::ALL {
            let (a, b) = (m.spec(tr), back.spec(tr));
            assert!((a.intensity(70.0, &[1.0]).unwrap() - b.intensity(70.0, &[1.0]).unwrap()).abs() < 1e-15);
        }
        assert_eq!(m.param_names()[2], "beta01[x]");
    }

    #[test]
    fn profile_applies_relative_risk() {
        let m = constant_model();
        let p = m.at(&[1.0]).unwrap();
        assert!((p.hazard(Transition::HealthyToIll, 65.0) - 0.04 * 0.5f64.exp()).abs() < 1e-15);
        assert!((p.cumulative(Transition::IllToDead, 60.0, 70.0) - 1.0 * (-0.2f64).exp()).abs() < 1e-12);
        assert!(m.at(&[]).is_err());
    }

    #[test]
    fn mismatched_slot_is_rejected() {
        let h = HazardSpec::constant(Transition::HealthyToIll, 0.04, vec![]).unwrap();
        let err = IllnessDeathModel::new(vec![], h.clone(), h.clone(), h).unwrap_err();
        assert!(matches!(err, Error::InvalidHazard(_)));
    }
}
