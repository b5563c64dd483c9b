//! M-spline and I-spline bases on a clamped knot sequence.
//!
//! With `k` the spline order and `B_i` the normalized B-splines on the knot
//! vector `t`, the M-splines are `M_i = k * B_i / (t[i+k] - t[i])`, so each
//! `M_i` is a density on its support. The I-splines are their integrals
//! from the lower boundary; they are evaluated exactly as tail sums of the
//! order `k+1` B-splines on the knot vector padded by one extra boundary
//! knot at each end.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

/// Highest spline order supported by the fixed-size evaluation buffers.
pub const MAX_ORDER: usize = 10;

#[derive(Debug, Clone, Deserialize)]
struct KnotGridRepr {
    boundary_lo: f64,
    boundary_hi: f64,
    interior: Vec<f64>,
    order: usize,
}

/// Boundary and interior knots plus spline order. Boundary knots carry
/// multiplicity `order`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "KnotGridRepr")]
pub struct KnotGrid {
    boundary_lo: f64,
    boundary_hi: f64,
    interior: Vec<f64>,
    order: usize,
    #[serde(skip)]
    knots: Vec<f64>,
    #[serde(skip)]
    padded: Vec<f64>,
}

impl PartialEq for KnotGrid {
    fn eq(&self, other: &Self) -> bool {
        self.boundary_lo == other.boundary_lo
            && self.boundary_hi == other.boundary_hi
            && self.interior == other.interior
            && self.order == other.order
    }
}

impl TryFrom<KnotGridRepr> for KnotGrid {
    type Error = Error;

    fn try_from(r: KnotGridRepr) -> Result<Self> {
        KnotGrid::new(r.boundary_lo, r.boundary_hi, r.interior, r.order)
    }
}

impl KnotGrid {
    pub fn new(boundary_lo: f64, boundary_hi: f64, interior: Vec<f64>, order: usize) -> Result<Self> {
        if !(boundary_lo.is_finite() && boundary_hi.is_finite()) || boundary_lo >= boundary_hi {
            return Err(Error::InvalidGrid(format!(
                "boundaries must be finite with lo < hi (got {boundary_lo}, {boundary_hi})"
            )));
        }
        if order == 0 || order > MAX_ORDER {
            return Err(Error::InvalidGrid(format!(
                "order must lie in 1..={MAX_ORDER}, got {order}"
            )));
        }
        if interior.iter().any(|&x| !(x > boundary_lo && x < boundary_hi)) {
            return Err(Error::InvalidGrid(
                "interior knots must lie strictly inside the boundaries".into(),
            ));
        }
        if interior.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidGrid("interior knots must be nondecreasing".into()));
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * order);
        knots.extend(std::iter::repeat(boundary_lo).take(order));
        knots.extend_from_slice(&interior);
        knots.extend(std::iter::repeat(boundary_hi).take(order));
        let mut padded = Vec::with_capacity(knots.len() + 2);
        padded.push(boundary_lo);
        padded.extend_from_slice(&knots);
        padded.push(boundary_hi);
        Ok(Self {
            boundary_lo,
            boundary_hi,
            interior,
            order,
            knots,
            padded,
        })
    }

    /// `n_interior` equally spaced interior knots between the boundaries.
    pub fn equidistant(boundary_lo: f64, boundary_hi: f64, n_interior: usize, order: usize) -> Result<Self> {
        let step = (boundary_hi - boundary_lo) / (n_interior as f64 + 1.0);
        let interior = (1..=n_interior)
            .map(|i| boundary_lo + step * i as f64)
            .collect();
        Self::new(boundary_lo, boundary_hi, interior, order)
    }

    pub fn boundary_lo(&self) -> f64 {
        self.boundary_lo
    }

    pub fn boundary_hi(&self) -> f64 {
        self.boundary_hi
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_basis(&self) -> usize {
        self.interior.len() + self.order
    }

    /// Full clamped knot vector.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Distinct knot locations, boundaries included.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.interior.len() + 2);
        v.push(self.boundary_lo);
        v.extend_from_slice(&self.interior);
        v.push(self.boundary_hi);
        v.dedup();
        v
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.boundary_lo && t <= self.boundary_hi
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::Domain {
                value: t,
                lo: self.boundary_lo,
                hi: self.boundary_hi,
            })
        }
    }

    /// `(t[i+k] - t[i]) / k`, the factor turning `M_i` back into `B_i`.
    pub fn bspline_scale(&self, i: usize) -> f64 {
        (self.knots[i + self.order] - self.knots[i]) / self.order as f64
    }

    /// Greville abscissae: coefficients `a + b * xi_i` on the B-splines
    /// reproduce the line `a + b * t`.
    pub fn greville(&self) -> Vec<f64> {
        let k = self.order;
        (0..self.num_basis())
            .map(|i| {
                if k == 1 {
                    0.5 * (self.knots[i] + self.knots[i + 1])
                } else {
                    self.knots[i + 1..i + k].iter().sum::<f64>() / (k - 1) as f64
                }
            })
            .collect()
    }

    /// M-spline basis values at `t`.
    pub fn mspline_basis(&self, t: f64) -> Result<Vec<f64>> {
        self.check_domain(t)?;
        let mut out = vec![0.0; self.num_basis()];
        self.mspline_into(t, &mut out);
        Ok(out)
    }

    /// I-spline basis values at `t`.
    pub fn ispline_basis(&self, t: f64) -> Result<Vec<f64>> {
        self.check_domain(t)?;
        let mut out = vec![0.0; self.num_basis()];
        self.ispline_into(t, &mut out);
        Ok(out)
    }

    /// Unchecked M-spline evaluation; `t` is clamped to the boundaries.
    pub fn mspline_into(&self, t: f64, out: &mut [f64]) {
        let t = t.clamp(self.boundary_lo, self.boundary_hi);
        let k = self.order;
        out.fill(0.0);
        let span = find_span(&self.knots, k, t);
        let mut vals = [0.0; MAX_ORDER + 1];
        bspline_nonzero(&self.knots, k, t, span, &mut vals);
        let first = span + 1 - k;
        for (r, v) in vals[..k].iter().enumerate() {
            let i = first + r;
            let width = self.knots[i + k] - self.knots[i];
            if width > 0.0 {
                out[i] = k as f64 * v / width;
            }
        }
    }

    /// Unchecked I-spline evaluation; `t` is clamped to the boundaries.
    pub fn ispline_into(&self, t: f64, out: &mut [f64]) {
        let t = t.clamp(self.boundary_lo, self.boundary_hi);
        let k1 = self.order + 1;
        let span = find_span(&self.padded, k1, t);
        let mut vals = [0.0; MAX_ORDER + 2];
        bspline_nonzero(&self.padded, k1, t, span, &mut vals);
        let first = span + 1 - k1;
        // I_i = sum_{j > i} B'_j where B' are the order k+1 splines on the
        // padded knots.
        let mut suffix = [0.0; MAX_ORDER + 3];
        for r in (0..k1).rev() {
            suffix[r] = suffix[r + 1] + vals[r];
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = if i + 1 < first {
                1.0
            } else if i + 1 > span {
                0.0
            } else {
                suffix[i + 1 - first].min(1.0)
            };
        }
    }

    /// Derivative of order `d` of every M-spline at `t`.
    pub fn mspline_derivative(&self, t: f64, d: usize) -> Result<Vec<f64>> {
        self.check_domain(t)?;
        let b = bspline_derivative_all(&self.knots, self.order, t, d);
        Ok(b.iter()
            .enumerate()
            .map(|(i, v)| {
                let w = self.knots[i + self.order] - self.knots[i];
                if w > 0.0 {
                    self.order as f64 * v / w
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Roughness penalty `P_ij = ∫ M_i''(u) M_j''(u) du` over the grid.
    pub fn penalty_matrix(&self) -> Result<DMatrix<f64>> {
        if self.order < 3 {
            return Err(Error::UnsupportedOrder {
                order: self.order,
                min: 3,
            });
        }
        let n = self.num_basis();
        let mut p = DMatrix::zeros(n, n);
        // Products of second derivatives have degree 2k-6, so k nodes per
        // span integrate them exactly.
        let gl = quadrature::rule(self.order);
        let bps = self.breakpoints();
        for w in bps.windows(2) {
            for (x, wt) in gl.mapped(w[0], w[1]) {
                let m2 = self.mspline_derivative(x, 2)?;
                for i in 0..n {
                    if m2[i] == 0.0 {
                        continue;
                    }
                    for j in i..n {
                        p[(i, j)] += wt * m2[i] * m2[j];
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                p[(i, j)] = p[(j, i)];
            }
        }
        Ok(p)
    }
}

/// Index `mu` with `knots[mu] <= t < knots[mu+1]`; the right boundary maps
/// to the last nonempty span.
fn find_span(knots: &[f64], order: usize, t: f64) -> usize {
    let nb = knots.len() - order;
    let right = knots[nb];
    if t >= right {
        let mut mu = nb - 1;
        while mu > order - 1 && knots[mu] >= right {
            mu -= 1;
        }
        return mu;
    }
    let mu = knots.partition_point(|&x| x <= t).saturating_sub(1);
    mu.clamp(order - 1, nb - 1)
}

/// Nonzero B-spline values `B_{span-order+1..=span}` at `t` (de Boor's
/// triangular scheme).
fn bspline_nonzero(knots: &[f64], order: usize, t: f64, span: usize, out: &mut [f64]) {
    let mut left = [0.0; MAX_ORDER + 2];
    let mut right = [0.0; MAX_ORDER + 2];
    out[0] = 1.0;
    for j in 1..order {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { out[r] / denom } else { 0.0 };
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

fn bspline_all(knots: &[f64], order: usize, t: f64) -> Vec<f64> {
    let nb = knots.len() - order;
    let mut out = vec![0.0; nb];
    let span = find_span(knots, order, t);
    let mut vals = [0.0; MAX_ORDER + 2];
    bspline_nonzero(knots, order, t, span, &mut vals);
    let first = span + 1 - order;
    out[first..first + order].copy_from_slice(&vals[..order]);
    out
}

fn bspline_derivative_all(knots: &[f64], order: usize, t: f64, d: usize) -> Vec<f64> {
    if d == 0 {
        return bspline_all(knots, order, t);
    }
    let nb = knots.len() - order;
    if order == 1 {
        return vec![0.0; nb];
    }
    let lower = bspline_derivative_all(knots, order - 1, t, d - 1);
    let km1 = (order - 1) as f64;
    (0..nb)
        .map(|i| {
            let w1 = knots[i + order - 1] - knots[i];
            let w2 = knots[i + order] - knots[i + 1];
            let a = if w1 > 0.0 { lower[i] / w1 } else { 0.0 };
            let b = if w2 > 0.0 { lower[i + 1] / w2 } else { 0.0 };
            km1 * (a - b)
        })
        .collect()
}
