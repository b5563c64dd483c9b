//! Levenberg-Marquardt damped Newton maximization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Maximum change in the objective between accepted iterations.
    pub objective: f64,
    /// Maximum Euclidean norm of the gradient.
    pub gradient: f64,
    pub max_iterations: usize,
    /// Switch from the approximate curvature to a finite-difference Hessian
    /// once accepted steps improve the objective by less than this.
    pub newton_switch: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            objective: 1e-6,
            gradient: 1e-4,
            max_iterations: 500,
            newton_switch: 1e-2,
        }
    }
}

/// One optimizer iteration, for line-delimited tracing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub logpl: f64,
    pub gradient_norm: f64,
    pub damping: f64,
}

pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    fn gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Value, gradient and a symmetric approximation to the negative
    /// Hessian. The default uses finite differences of the gradient.
    fn curvature(&self, x: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        let (f, g) = self.gradient(x)?;
        let h = numeric_hessian(self, x, &g, false)?;
        Ok((f, g, -h))
    }
}

/// Hessian by differencing the analytic gradient, symmetrized.
pub fn numeric_hessian<O: Objective + ?Sized>(obj: &O, x: &[f64], g0: &[f64], central: bool) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let step = if central { 1e-5 } else { 1e-6 } * (1.0 + x[j].abs());
        xp[j] = x[j] + step;
        let (_, gp) = obj.gradient(&xp)?;
        let col: Vec<f64> = if central {
            xp[j] = x[j] - step;
            let (_, gm) = obj.gradient(&xp)?;
            gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect()
        } else {
            gp.iter().zip(g0).map(|(a, b)| (a - b) / step).collect()
        };
        xp[j] = x[j];
        for i in 0..n {
            h[(i, j)] = col[i];
        }
    }
    let sym = (&h + h.transpose()) * 0.5;
    Ok(sym)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    /// Damping exhausted with the gradient already below tolerance.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub status: Status,
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn damped_solve(b: &DMatrix<f64>, g: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let n = g.len();
    let mut m = b.clone();
    for i in 0..n {
        let d = b[(i, i)].abs().max(1e-8);
        m[(i, i)] += lambda * d;
    }
    let chol = m.cholesky()?;
    let step = chol.solve(&DVector::from_column_slice(g));
    step.iter().all(|v| v.is_finite()).then(|| step.as_slice().to_vec())
}

/// Maximizes `obj` from `x0`. Accepted steps never decrease the objective.
pub fn maximize<O: Objective + ?Sized>(
    obj: &O,
    x0: &[f64],
    tol: &Tolerances,
    trace: &mut dyn FnMut(&TraceRecord),
) -> Result<Optimum> {
    let mut x = x0.to_vec();
    let mut newton = false;
    let (mut f, mut g, mut b) = obj.curvature(&x)?;
    let mut lambda = 1e-3;
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    trace(&TraceRecord {
        iteration: 0,
        logpl: f,
        gradient_norm: norm(&g),
        damping: lambda,
    });
    while iterations < tol.max_iterations {
        if last_change <= tol.objective && norm(&g) <= tol.gradient {
            return Ok(Optimum {
                x,
                value: f,
                gradient: g,
                iterations,
                status: Status::Converged,
            });
        }
        iterations += 1;
        let mut accepted = false;
        while lambda < 1e16 {
            let Some(step) = damped_solve(&b, &g, lambda) else {
                lambda = (lambda * 10.0).max(1e-6);
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + s).collect();
            match obj.value(&trial) {
                Ok(ft) if ft.is_finite() && ft >= f => {
                    last_change = ft - f;
                    x = trial;
                    accepted = true;
                    lambda = (lambda * 0.1).max(1e-12);
                    break;
                }
                Ok(_) | Err(Error::Numeric { .. }) | Err(Error::InvalidHazard(_)) => lambda *= 10.0,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            let gn = norm(&g);
            if gn <= tol.gradient * 10.0 {
                return Ok(Optimum {
                    x,
                    value: f,
                    gradient: g,
                    iterations,
                    status: Status::Stalled,
                });
            }
            if !newton {
                // The approximate curvature may be poor far from
                // stationarity; retry with the true Hessian.
                newton = true;
                lambda = 1e-3;
                let (_, gg, bb) = newton_curvature(obj, &x)?;
                g = gg;
                b = bb;
                continue;
            }
            return Err(Error::NonConvergence {
                iterations,
                gradient_norm: gn,
                last_iterate: x,
            });
        }
        if last_change < tol.newton_switch {
            newton = true;
        }
        let (fv, gv, bv) = if newton { newton_curvature(obj, &x)? } else { obj.curvature(&x)? };
        f = fv;
        g = gv;
        b = bv;
        trace(&TraceRecord {
            iteration: iterations,
            logpl: f,
            gradient_norm: norm(&g),
            damping: lambda,
        });
    }
    if last_change <= tol.objective && norm(&g) <= tol.gradient {
        return Ok(Optimum {
            x,
            value: f,
            gradient: g,
            iterations,
            status: Status::Converged,
        });
    }
    Err(Error::NonConvergence {
        iterations,
        gradient_norm: norm(&g),
        last_iterate: x,
    })
}

fn newton_curvature<O: Objective + ?Sized>(obj: &O, x: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
    let (f, g) = obj.gradient(x)?;
    let h = numeric_hessian(obj, x, &g, false)?;
    Ok((f, g, -h))
}

/// Symmetric (pseudo-)inverse. Returns the inverse and whether the
/// pseudo-inverse fallback was needed.
pub fn symmetric_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(chol) = m.clone().cholesky() {
        let inv = chol.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return (symmetrize(&inv), false);
        }
    }
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cutoff = max * 1e-10;
    let n = m.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for k in 0..n {
        let ev = eig.eigenvalues[k];
        if ev > cutoff {
            let v = eig.eigenvectors.column(k);
            inv += (v * v.transpose()) / ev;
        }
    }
    (symmetrize(&inv), true)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Negative Rosenbrock, maximized at (1, 1).
    struct Rosen;

    impl Objective for Rosen {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(-((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)))
        }
        fn gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            let gx = 2.0 * (1.0 - x[0]) + 400.0 * x[0] * (x[1] - x[0] * x[0]);
            let gy = -200.0 * (x[1] - x[0] * x[0]);
            Ok((self.value(x)?, vec![gx, gy]))
        }
    }

    #[test]
    fn maximizes_rosenbrock_monotonically() {
        let mut trace = Vec::new();
        let opt = maximize(&Rosen, &[-1.2, 1.0], &Tolerances::default(), &mut |t| trace.push(*t)).unwrap();
        assert!((opt.x[0] - 1.0).abs() < 1e-5 && (opt.x[1] - 1.0).abs() < 1e-5, "{:?}", opt.x);
        for w in trace.windows(2) {
            assert!(w[1].logpl >= w[0].logpl);
        }
    }

    #[test]
    fn iteration_cap_reports_last_iterate() {
        let tol = Tolerances {
            max_iterations: 2,
            ..Default::default()
        };
        match maximize(&Rosen, &[-1.2, 1.0], &tol, &mut |_| {}) {
            Err(Error::NonConvergence { iterations, last_iterate, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(last_iterate.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pseudo_inverse_on_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (inv, pseudo) = symmetric_inverse(&m);
        assert!(pseudo);
        let back = &m * &inv * &m;
        assert!((back - m).norm() < 1e-10);
        let (inv, pseudo) = symmetric_inverse(&DMatrix::from_diagonal_element(2, 2, 4.0));
        assert!(!pseudo);
        assert!((inv[(0, 0)] - 0.25).abs() < 1e-15);
    }
}
