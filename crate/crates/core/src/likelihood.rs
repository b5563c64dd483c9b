//! Log-likelihood of interval-censored, left-truncated illness-death data.
//!
//! With `S00(s,t) = exp(-A01(s,t) - A02(s,t))` and `S11(s,t) = exp(-A12(s,t))`,
//! and every subject conditioned on being alive and healthy at entry `e`:
//!
//! | pattern | contribution |
//! |---|---|
//! | healthy-censored at `L` | `S00(e,L)` |
//! | healthy-then-dead-conclusive at `D` | `S00(e,D) a02(D)` |
//! | dead-inconclusive | `S00(e,L) [S00(L,D) a02(D) + a12(D) ∫_L^D S00(L,u) a01(u) S11(u,D) du]` |
//! | onset in `(L,R]`, exit `T` | `S00(e,L) ∫_L^R S00(L,u) a01(u) S11(u,T) du [a12(T) if dead]` |
//! | exact onset `x`, exit `T` | `S00(e,x) a01(x) S11(x,T) [a12(T) if dead]` |
//!
//! Gradients are analytic, in natural coordinates (see [`crate::hazard`]).
//! Totals are reduced over fixed-size chunks with a pairwise tree, so the
//! result does not depend on the thread count.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hazard::{Baseline, Transition};
use crate::model::IllnessDeathModel;
use crate::quadrature;
use crate::record::{ObservationPattern, Onset, SubjectRecord};

const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LikelihoodOptions {
    /// Gauss-Legendre nodes per knot span for the onset integrals.
    pub nodes_per_span: usize,
    /// Censor alive undiagnosed subjects at their last contact instead of
    /// their last healthy assessment, integrating over unseen onset.
    pub extend_alive_to_last_contact: bool,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        Self {
            nodes_per_span: 30,
            extend_alive_to_last_contact: false,
        }
    }
}

/// A record reduced to what the likelihood reads, with covariates resolved
/// against the model's covariate order.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub id: String,
    pub pattern: ObservationPattern,
    pub entry: f64,
    pub last_healthy: f64,
    pub onset: Option<Onset>,
    pub death: Option<f64>,
    pub last_alive: f64,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    covariates: Vec<String>,
    records: Vec<PreparedRecord>,
}

impl PreparedData {
    pub fn new(records: &[SubjectRecord], covariates: &[String]) -> Result<Self> {
        let prepared = records
            .iter()
            .map(|r| {
                r.validate()?;
                let z = covariates
                    .iter()
                    .map(|c| {
                        r.covariates.get(c).copied().ok_or_else(|| Error::MissingCovariate {
                            id: r.id.clone(),
                            covariate: c.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PreparedRecord {
                    id: r.id.clone(),
                    pattern: r.pattern(),
                    entry: r.entry_age,
                    last_healthy: r.last_healthy_age,
                    onset: r.onset,
                    death: r.death_age,
                    last_alive: r.last_alive_age,
                    z,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            covariates: covariates.to_vec(),
            records: prepared,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PreparedRecord] {
        &self.records
    }

    pub fn covariates(&self) -> &[String] {
        &self.covariates
    }

    /// Number of records whose observation pattern reveals each transition
    /// type (`[0->1, 0->2, 1->2]`).
    pub fn observed_transitions(&self) -> [usize; 3] {
        let mut n = [0; 3];
        for r in &self.records {
            match r.pattern {
                ObservationPattern::IllCensored => n[0] += 1,
                ObservationPattern::IllThenDead => {
                    n[0] += 1;
                    n[2] += 1;
                }
                ObservationPattern::HealthyThenDeadConclusive | ObservationPattern::DeadInconclusive => n[1] += 1,
                ObservationPattern::HealthyCensored => {}
            }
        }
        n
    }
}

/// What to compute alongside the log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Want {
    Value,
    Gradient,
    /// Gradient plus the sum of outer products of per-subject scores in
    /// optimizer coordinates.
    GradientAndOuter,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    /// Gradient in natural coordinates.
    pub gradient: Option<Vec<f64>>,
    /// Outer-product (BHHH) information in optimizer coordinates.
    pub outer: Option<DMatrix<f64>>,
}

/// Log-likelihood contribution of one record.
pub fn log_likelihood_contribution(rec: &SubjectRecord, model: &IllnessDeathModel) -> Result<f64> {
    let data = PreparedData::new(std::slice::from_ref(rec), &model.covariates)?;
    let ctx = Context::new(model, LikelihoodOptions::default())?;
    let mut work = Work::new(&ctx);
    ctx.record(&data.records[0], &mut work, false)
}

/// Sum of contributions over `records`.
pub fn total_log_likelihood(records: &[SubjectRecord], model: &IllnessDeathModel) -> Result<f64> {
    let data = PreparedData::new(records, &model.covariates)?;
    Ok(evaluate(&data, model, LikelihoodOptions::default(), Want::Value)?.loglik)
}

/// Sequential per-record contributions, in input order.
pub fn contributions(data: &PreparedData, model: &IllnessDeathModel, opts: LikelihoodOptions) -> Result<Vec<f64>> {
    let ctx = Context::new(model, opts)?;
    let mut work = Work::new(&ctx);
    data.records.iter().map(|r| ctx.record(r, &mut work, false)).collect()
}

pub fn evaluate(data: &PreparedData, model: &IllnessDeathModel, opts: LikelihoodOptions, want: Want) -> Result<Evaluation> {
    if data.covariates != model.covariates {
        return Err(Error::Config(format!(
            "data prepared for covariates {:?} but model uses {:?}",
            data.covariates, model.covariates
        )));
    }
    let ctx = Context::new(model, opts)?;
    let p = model.num_params();
    let jac = param_jacobian(model);

    let partials: Vec<Result<Partial>> = data
        .records
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut work = Work::new(&ctx);
            let mut part = Partial::new(p, want);
            for r in chunk {
                let grad_wanted = want != Want::Value;
                let v = ctx.record(r, &mut work, grad_wanted)?;
                part.loglik += v;
                if let Some(g) = part.gradient.as_mut() {
                    for (gi, si) in g.iter_mut().zip(&work.score) {
                        *gi += si;
                    }
                }
                if let Some(o) = part.outer.as_mut() {
                    for (s, j) in work.score.iter_mut().zip(&jac) {
                        *s *= j;
                    }
                    let s = &work.score;
                    for a in 0..p {
                        if s[a] == 0.0 {
                            continue;
                        }
                        for b in a..p {
                            o[(a, b)] += s[a] * s[b];
                        }
                    }
                }
            }
            Ok(part)
        })
        .collect();
    let partials = partials.into_iter().collect::<Result<Vec<_>>>()?;
    let total = tree_reduce(partials, Partial::merge).unwrap_or_else(|| Partial::new(p, want));
    let outer = total.outer.map(|mut o| {
        for a in 0..p {
            for b in 0..a {
                o[(a, b)] = o[(b, a)];
            }
        }
        o
    });
    Ok(Evaluation {
        loglik: total.loglik,
        gradient: total.gradient,
        outer,
    })
}

/// `d natural / d param` for every coordinate of the flat vector.
pub fn param_jacobian(model: &IllnessDeathModel) -> Vec<f64> {
    let mut jac = vec![1.0; model.num_params()];
    for tr in Transition::ALL {
        let b = &model.spec(tr).baseline;
        for (k, idx) in model.baseline_block(tr).enumerate() {
            jac[idx] = b.natural_jacobian(k);
        }
    }
    jac
}

/// Pairwise reduction in a fixed shape determined only by `items.len()`.
pub fn tree_reduce<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

struct Partial {
    loglik: f64,
    gradient: Option<Vec<f64>>,
    outer: Option<DMatrix<f64>>,
}

impl Partial {
    fn new(p: usize, want: Want) -> Self {
        Self {
            loglik: 0.0,
            gradient: (want != Want::Value).then(|| vec![0.0; p]),
            outer: (want == Want::GradientAndOuter).then(|| DMatrix::zeros(p, p)),
        }
    }

    fn merge(mut a: Self, b: Self) -> Self {
        a.loglik += b.loglik;
        if let (Some(ga), Some(gb)) = (a.gradient.as_mut(), b.gradient.as_ref()) {
            for (x, y) in ga.iter_mut().zip(gb) {
                *x += y;
            }
        }
        if let (Some(oa), Some(ob)) = (a.outer.as_mut(), b.outer.as_ref()) {
            *oa += ob;
        }
        a
    }
}

struct Context<'m> {
    base: [&'m Baseline; 3],
    beta: [&'m [f64]; 3],
    nat: [std::ops::Range<usize>; 3],
    betas: [std::ops::Range<usize>; 3],
    n_params: usize,
    breakpoints: Vec<f64>,
    opts: LikelihoodOptions,
    domain_lo: f64,
}

/// `H_h(t)` and its natural gradient for the three transitions.
struct Point {
    val: [f64; 3],
    grad: [Vec<f64>; 3],
}

impl Point {
    fn new(ctx: &Context) -> Self {
        Self {
            val: [0.0; 3],
            grad: std::array::from_fn(|h| vec![0.0; ctx.base[h].num_params()]),
        }
    }
}

struct HazardValue {
    val: f64,
    grad: Vec<f64>,
}

struct Work {
    pe: Point,
    pa: Point,
    pt: Point,
    pu: Point,
    h01: HazardValue,
    h02: HazardValue,
    h12: HazardValue,
    sums: [Vec<f64>; 3],
    s_m: Vec<f64>,
    /// Per-record score, natural coordinates.
    score: Vec<f64>,
    grad_i: Vec<f64>,
    grad_x: Vec<f64>,
}

impl Work {
    fn new(ctx: &Context) -> Self {
        let hv = |h: usize| HazardValue {
            val: 0.0,
            grad: vec![0.0; ctx.base[h].num_params()],
        };
        Self {
            pe: Point::new(ctx),
            pa: Point::new(ctx),
            pt: Point::new(ctx),
            pu: Point::new(ctx),
            h01: hv(0),
            h02: hv(1),
            h12: hv(2),
            sums: std::array::from_fn(|h| vec![0.0; ctx.base[h].num_params()]),
            s_m: vec![0.0; ctx.base[0].num_params()],
            score: vec![0.0; ctx.n_params],
            grad_i: vec![0.0; ctx.n_params],
            grad_x: vec![0.0; ctx.n_params],
        }
    }
}

impl<'m> Context<'m> {
    fn new(model: &'m IllnessDeathModel, opts: LikelihoodOptions) -> Result<Self> {
        if opts.nodes_per_span == 0 {
            return Err(Error::Config("nodes_per_span must be positive".into()));
        }
        let specs = model.specs();
        let breakpoints =
            quadrature::sorted_breakpoints(specs.iter().flat_map(|s| s.baseline.breakpoints()));
        let domain_lo = specs
            .iter()
            .map(|s| s.baseline.domain_lo())
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            base: [&specs[0].baseline, &specs[1].baseline, &specs[2].baseline],
            beta: [&specs[0].beta, &specs[1].beta, &specs[2].beta],
            nat: Transition::ALL.map(|t| model.baseline_block(t)),
            betas: Transition::ALL.map(|t| model.beta_block(t)),
            n_params: model.num_params(),
            breakpoints,
            opts,
            domain_lo,
        })
    }

    fn point(&self, t: f64, p: &mut Point, mask: [bool; 3]) {
        for h in 0..3 {
            if mask[h] {
                p.val[h] = self.base[h].cumulative_point(t, &mut p.grad[h]);
            }
        }
    }

    fn hazard(&self, h: usize, t: f64, out: &mut HazardValue) {
        out.val = self.base[h].hazard_point(t, &mut out.grad);
    }

    fn record(&self, r: &PreparedRecord, w: &mut Work, want_grad: bool) -> Result<f64> {
        if r.entry < self.domain_lo {
            return Err(Error::Numeric {
                id: r.id.clone(),
                detail: format!("entry age {} below model domain {}", r.entry, self.domain_lo),
            });
        }
        let rr: [f64; 3] = std::array::from_fn(|h| {
            self.beta[h].iter().zip(&r.z).map(|(b, x)| b * x).sum::<f64>().exp()
        });
        if want_grad {
            w.score.fill(0.0);
        }
        let value = match r.pattern {
            ObservationPattern::HealthyCensored if self.opts.extend_alive_to_last_contact && r.last_alive > r.last_healthy => {
                self.alive_extended(r, &rr, w, want_grad)?
            }
            ObservationPattern::HealthyCensored => self.log_s00(r, &rr, r.entry, r.last_healthy, w, want_grad, 1.0),
            ObservationPattern::HealthyThenDeadConclusive => {
                let d = r.death.expect("dead pattern has death age");
                let ls = self.log_s00(r, &rr, r.entry, d, w, want_grad, 1.0);
                ls + self.log_hazard(r, &rr, 1, d, w, want_grad, 1.0)?
            }
            ObservationPattern::DeadInconclusive => self.dead_inconclusive(r, &rr, w, want_grad)?,
            ObservationPattern::IllCensored | ObservationPattern::IllThenDead => self.ill(r, &rr, w, want_grad)?,
        };
        if !value.is_finite() {
            return Err(Error::Numeric {
                id: r.id.clone(),
                detail: format!("log-likelihood contribution is {value}"),
            });
        }
        Ok(value)
    }

    /// `log S00(s, t)`; adds `scale * grad` into the record score.
    #[allow(clippy::too_many_arguments)]
    fn log_s00(&self, r: &PreparedRecord, rr: &[f64; 3], s: f64, t: f64, w: &mut Work, want_grad: bool, scale: f64) -> f64 {
        self.point(s, &mut w.pe, [true, true, false]);
        self.point(t, &mut w.pt, [true, true, false]);
        let mut total = 0.0;
        for h in 0..2 {
            let a = rr[h] * (w.pt.val[h] - w.pe.val[h]);
            total -= a;
            if want_grad {
                for (k, idx) in self.nat[h].clone().enumerate() {
                    w.score[idx] -= scale * rr[h] * (w.pt.grad[h][k] - w.pe.grad[h][k]);
                }
                for (j, idx) in self.betas[h].clone().enumerate() {
                    w.score[idx] -= scale * r.z[j] * a;
                }
            }
        }
        total
    }

    #[allow(clippy::too_many_arguments)]
    fn log_hazard(&self, r: &PreparedRecord, rr: &[f64; 3], h: usize, t: f64, w: &mut Work, want_grad: bool, scale: f64) -> Result<f64> {
        let hv = match h {
            0 => &mut w.h01,
            1 => &mut w.h02,
            _ => &mut w.h12,
        };
        self.hazard(h, t, hv);
        if !(hv.val > 0.0) {
            return Err(Error::Numeric {
                id: r.id.clone(),
                detail: format!("intensity {} is {} at age {t}", Transition::ALL[h], hv.val),
            });
        }
        if want_grad {
            for (k, idx) in self.nat[h].clone().enumerate() {
                w.score[idx] += scale * hv.grad[k] / hv.val;
            }
            for (j, idx) in self.betas[h].clone().enumerate() {
                w.score[idx] += scale * r.z[j];
            }
        }
        Ok((hv.val * rr[h]).ln())
    }

    /// `∫_a^b S00(a,u) a01(u) S11(u,T) du` with its gradient in `w.grad_i`.
    /// Expects `w.pa` evaluated at `a` and `w.pt` at `T`.
    fn onset_integral(&self, r: &PreparedRecord, rr: &[f64; 3], a: f64, b: f64, w: &mut Work, want_grad: bool) -> f64 {
        let mut integral = 0.0;
        let (mut ia01, mut ia02, mut ia12) = (0.0, 0.0, 0.0);
        if want_grad {
            for s in w.sums.iter_mut() {
                s.fill(0.0);
            }
            w.s_m.fill(0.0);
        }
        let gl = quadrature::rule(self.opts.nodes_per_span);
        for (lo, hi) in quadrature::segments(a, b, &self.breakpoints) {
            for (u, wt) in gl.mapped(lo, hi) {
                self.point(u, &mut w.pu, [true, true, true]);
                self.hazard(0, u, &mut w.h01);
                let a01 = rr[0] * (w.pu.val[0] - w.pa.val[0]);
                let a02 = rr[1] * (w.pu.val[1] - w.pa.val[1]);
                let a12 = rr[2] * (w.pt.val[2] - w.pu.val[2]);
                let e = (-a01 - a02 - a12).exp();
                let g = e * rr[0] * w.h01.val;
                let wg = wt * g;
                integral += wg;
                if want_grad {
                    ia01 += wg * a01;
                    ia02 += wg * a02;
                    ia12 += wg * a12;
                    for h in 0..3 {
                        for (s, v) in w.sums[h].iter_mut().zip(&w.pu.grad[h]) {
                            *s += wg * v;
                        }
                    }
                    let we = wt * e * rr[0];
                    for (s, v) in w.s_m.iter_mut().zip(&w.h01.grad) {
                        *s += we * v;
                    }
                }
            }
        }
        if want_grad {
            let gi = &mut w.grad_i;
            gi.fill(0.0);
            for (k, idx) in self.nat[0].clone().enumerate() {
                gi[idx] = rr[0] * (integral * w.pa.grad[0][k] - w.sums[0][k]) + w.s_m[k];
            }
            for (k, idx) in self.nat[1].clone().enumerate() {
                gi[idx] = rr[1] * (integral * w.pa.grad[1][k] - w.sums[1][k]);
            }
            for (k, idx) in self.nat[2].clone().enumerate() {
                gi[idx] = rr[2] * (w.sums[2][k] - integral * w.pt.grad[2][k]);
            }
            for (j, idx) in self.betas[0].clone().enumerate() {
                gi[idx] = r.z[j] * (integral - ia01);
            }
            for (j, idx) in self.betas[1].clone().enumerate() {
                gi[idx] = -r.z[j] * ia02;
            }
            for (j, idx) in self.betas[2].clone().enumerate() {
                gi[idx] = -r.z[j] * ia12;
            }
        }
        integral
    }

    fn ill(&self, r: &PreparedRecord, rr: &[f64; 3], w: &mut Work, want_grad: bool) -> Result<f64> {
        let exit = r.death.unwrap_or(r.last_alive);
        let onset = r.onset.expect("ill pattern has onset");
        let mut total;
        match onset {
            Onset::Exact { age } => {
                total = self.log_s00(r, rr, r.entry, age, w, want_grad, 1.0);
                total += self.log_hazard(r, rr, 0, age, w, want_grad, 1.0)?;
                // -A12(age, exit)
                self.point(age, &mut w.pa, [false, false, true]);
                self.point(exit, &mut w.pt, [false, false, true]);
                let a12 = rr[2] * (w.pt.val[2] - w.pa.val[2]);
                total -= a12;
                if want_grad {
                    for (k, idx) in self.nat[2].clone().enumerate() {
                        w.score[idx] -= rr[2] * (w.pt.grad[2][k] - w.pa.grad[2][k]);
                    }
                    for (j, idx) in self.betas[2].clone().enumerate() {
                        w.score[idx] -= r.z[j] * a12;
                    }
                }
            }
            Onset::Interval { lo, hi } => {
                total = self.log_s00(r, rr, r.entry, lo, w, want_grad, 1.0);
                self.point(lo, &mut w.pa, [true, true, false]);
                self.point(exit, &mut w.pt, [false, false, true]);
                let integral = self.onset_integral(r, rr, lo, hi, w, want_grad);
                if !(integral > 0.0) {
                    return Err(Error::Numeric {
                        id: r.id.clone(),
                        detail: format!("onset probability over ({lo}, {hi}] is {integral}"),
                    });
                }
                total += integral.ln();
                if want_grad {
                    for (s, g) in w.score.iter_mut().zip(&w.grad_i) {
                        *s += g / integral;
                    }
                }
            }
        }
        if let Some(d) = r.death {
            total += self.log_hazard(r, rr, 2, d, w, want_grad, 1.0)?;
        }
        Ok(total)
    }

    fn dead_inconclusive(&self, r: &PreparedRecord, rr: &[f64; 3], w: &mut Work, want_grad: bool) -> Result<f64> {
        let l = r.last_healthy;
        let d = r.death.expect("dead pattern has death age");
        let ls = self.log_s00(r, rr, r.entry, l, w, want_grad, 1.0);

        // Direct death term X = S00(L,D) a02(D).
        self.point(l, &mut w.pa, [true, true, false]);
        self.point(d, &mut w.pt, [true, true, true]);
        let a01 = rr[0] * (w.pt.val[0] - w.pa.val[0]);
        let a02 = rr[1] * (w.pt.val[1] - w.pa.val[1]);
        self.hazard(1, d, &mut w.h02);
        let x = (-a01 - a02).exp() * rr[1] * w.h02.val;
        if want_grad {
            let gx = &mut w.grad_x;
            gx.fill(0.0);
            for h in 0..2 {
                let a = if h == 0 { a01 } else { a02 };
                for (k, idx) in self.nat[h].clone().enumerate() {
                    gx[idx] -= x * rr[h] * (w.pt.grad[h][k] - w.pa.grad[h][k]);
                }
                for (j, idx) in self.betas[h].clone().enumerate() {
                    gx[idx] -= x * r.z[j] * a;
                }
            }
            if w.h02.val > 0.0 {
                for (k, idx) in self.nat[1].clone().enumerate() {
                    gx[idx] += x * w.h02.grad[k] / w.h02.val;
                }
            }
            for (j, idx) in self.betas[1].clone().enumerate() {
                gx[idx] += x * r.z[j];
            }
        }

        // Unseen onset term Y = a12(D) ∫_L^D ...
        let integral = if d > l { self.onset_integral(r, rr, l, d, w, want_grad) } else { 0.0 };
        if d <= l && want_grad {
            w.grad_i.fill(0.0);
        }
        self.hazard(2, d, &mut w.h12);
        let a12d = rr[2] * w.h12.val;
        let y = a12d * integral;
        let total = x + y;
        if !(total > 0.0) {
            return Err(Error::Numeric {
                id: r.id.clone(),
                detail: format!("death probability at {d} is {total}"),
            });
        }
        if want_grad {
            // d log(X+Y) = (dX + a12 dI + I da12) / (X+Y)
            let inv = 1.0 / total;
            for idx in 0..self.n_params {
                w.score[idx] += (w.grad_x[idx] + a12d * w.grad_i[idx]) * inv;
            }
            if integral > 0.0 {
                for (k, idx) in self.nat[2].clone().enumerate() {
                    w.score[idx] += rr[2] * w.h12.grad[k] * integral * inv;
                }
                for (j, idx) in self.betas[2].clone().enumerate() {
                    w.score[idx] += y * r.z[j] * inv;
                }
            }
        }
        Ok(ls + total.ln())
    }

    fn alive_extended(&self, r: &PreparedRecord, rr: &[f64; 3], w: &mut Work, want_grad: bool) -> Result<f64> {
        let l = r.last_healthy;
        let c = r.last_alive;
        let ls = self.log_s00(r, rr, r.entry, l, w, want_grad, 1.0);
        self.point(l, &mut w.pa, [true, true, false]);
        self.point(c, &mut w.pt, [true, true, true]);
        let a01 = rr[0] * (w.pt.val[0] - w.pa.val[0]);
        let a02 = rr[1] * (w.pt.val[1] - w.pa.val[1]);
        let x = (-a01 - a02).exp();
        if want_grad {
            let gx = &mut w.grad_x;
            gx.fill(0.0);
            for h in 0..2 {
                let a = if h == 0 { a01 } else { a02 };
                for (k, idx) in self.nat[h].clone().enumerate() {
                    gx[idx] -= x * rr[h] * (w.pt.grad[h][k] - w.pa.grad[h][k]);
                }
                for (j, idx) in self.betas[h].clone().enumerate() {
                    gx[idx] -= x * r.z[j] * a;
                }
            }
        }
        let integral = self.onset_integral(r, rr, l, c, w, want_grad);
        let total = x + integral;
        if want_grad {
            for idx in 0..self.n_params {
                w.score[idx] += (w.grad_x[idx] + w.grad_i[idx]) / total;
            }
        }
        Ok(ls + total.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::KnotGrid;
    use crate::hazard::HazardSpec;

    const A: f64 = 0.04;
    const B: f64 = 0.02;
    const C: f64 = 0.10;

    fn constant_model() -> IllnessDeathModel {
        IllnessDeathModel::new(
            vec![],
            HazardSpec::constant(Transition::HealthyToIll, A, vec![]).unwrap(),
            HazardSpec::constant(Transition::HealthyToDead, B, vec![]).unwrap(),
            HazardSpec::constant(Transition::IllToDead, C, vec![]).unwrap(),
        )
        .unwrap()
    }

    fn spline_model(cov: bool) -> IllnessDeathModel {
        let grid = KnotGrid::equidistant(60.0, 100.0, 4, 4).unwrap();
        let n = grid.num_basis();
        let beta = |v: f64| if cov { vec![v] } else { vec![] };
        let th = |s: f64| (0..n).map(|i| s * (0.8 + 0.1 * i as f64)).collect::<Vec<_>>();
        IllnessDeathModel::new(
            if cov { vec!["x".into()] } else { vec![] },
            HazardSpec::spline(Transition::HealthyToIll, grid.clone(), th(0.5), beta(0.3)).unwrap(),
            HazardSpec::spline(Transition::HealthyToDead, grid.clone(), th(0.4), beta(-0.2)).unwrap(),
            HazardSpec::spline(Transition::IllToDead, grid, th(0.9), beta(0.1)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn healthy_censored_constant_hazards() {
        let rec = SubjectRecord::healthy("a", 60.0, 70.0);
        let v = log_likelihood_contribution(&rec, &constant_model()).unwrap();
        assert!((v - (-(A + B) * 10.0)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn exact_onset_then_death_constant_hazards() {
        let rec = SubjectRecord::healthy("a", 60.0, 60.0)
            .with_exact_onset(65.0)
            .with_death(70.0, false);
        let v = log_likelihood_contribution(&rec, &constant_model()).unwrap();
        let expect = -0.3 + A.ln() - 0.5 + C.ln();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn interval_onset_matches_closed_form() {
        // ∫_L^R e^{-(a+b)(u-L)} a e^{-c(T-u)} du in closed form.
        let (e, l, r, t) = (61.0, 66.0, 69.0, 75.0);
        let rec = SubjectRecord::healthy("a", e, l).with_interval_onset(r).with_death(t, false);
        let v = log_likelihood_contribution(&rec, &constant_model()).unwrap();
        let k = A + B - C;
        let integral = A * (-C * (t - l)).exp() * (1.0 - (-k * (r - l)).exp()) / k;
        let expect = -(A + B) * (l - e) + integral.ln() + C.ln();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn dead_inconclusive_without_illness_reduces_to_direct_death() {
        let m = IllnessDeathModel::new(
            vec![],
            HazardSpec::spline(
                Transition::HealthyToIll,
                KnotGrid::equidistant(60.0, 100.0, 3, 4).unwrap(),
                vec![0.0; 7],
                vec![],
            )
            .unwrap(),
            HazardSpec::constant(Transition::HealthyToDead, B, vec![]).unwrap(),
            HazardSpec::constant(Transition::IllToDead, C, vec![]).unwrap(),
        )
        .unwrap();
        let rec = SubjectRecord::healthy("a", 62.0, 78.0).with_death(85.0, false);
        let v = log_likelihood_contribution(&rec, &m).unwrap();
        let expect = -B * 16.0 - B * 7.0 + B.ln();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn dead_inconclusive_dominates_conclusive() {
        let m = spline_model(false);
        let base = SubjectRecord::healthy("a", 62.0, 70.0);
        let inc = log_likelihood_contribution(&base.clone().with_death(76.0, false), &m).unwrap();
        let con = log_likelihood_contribution(&base.with_death(76.0, true), &m).unwrap();
        // Conclusive: S00(e,D) a02(D); inconclusive adds a nonnegative term.
        assert!(inc >= con);
    }

    #[test]
    fn shrinking_interval_approaches_onset_density() {
        let m = spline_model(false);
        let (e, l, t) = (61.0, 70.0, 80.0);
        let width = 1e-4;
        let rec = SubjectRecord::healthy("a", e, l)
            .with_interval_onset(l + width)
            .with_death(t, false);
        let v = log_likelihood_contribution(&rec, &m).unwrap().exp() / width;
        let p = m.baseline();
        use crate::model::IntensityModel;
        let s00 = (-p.cumulative(Transition::HealthyToIll, e, l) - p.cumulative(Transition::HealthyToDead, e, l)).exp();
        let oracle = s00
            * p.hazard(Transition::HealthyToIll, l)
            * (-p.cumulative(Transition::IllToDead, l, t)).exp()
            * p.hazard(Transition::IllToDead, t);
        assert!(((v - oracle) / oracle).abs() < 1e-3, "{v} vs {oracle}");
    }

    #[test]
    fn inflating_mortality_shrinks_healthy_contribution() {
        let m = spline_model(false);
        let rec = SubjectRecord::healthy("a", 62.0, 74.0);
        let base = log_likelihood_contribution(&rec, &m).unwrap();
        let mut p = m.params();
        for i in m.baseline_block(Transition::HealthyToDead) {
            p[i] *= 1.2;
        }
        let inflated = log_likelihood_contribution(&rec, &m.with_params(&p).unwrap()).unwrap();
        assert!(inflated < base);
        assert!(base < 0.0);
    }

    #[test]
    fn later_entry_increases_healthy_contribution() {
        let m = spline_model(false);
        let mut prev = f64::NEG_INFINITY;
        for e in [60.0, 64.0, 68.0, 71.0, 73.9] {
            let v = log_likelihood_contribution(&SubjectRecord::healthy("a", e, 74.0), &m).unwrap();
            assert!(v > prev);
            prev = v;
        }
        let at_l = log_likelihood_contribution(&SubjectRecord::healthy("a", 74.0, 74.0), &m).unwrap();
        assert_eq!(at_l, 0.0);
    }

    fn mixed_records() -> Vec<SubjectRecord> {
        vec![
            SubjectRecord::healthy("h", 61.0, 72.0).with_covariate("x", 1.0),
            SubjectRecord::healthy("hx", 61.0, 72.0).with_last_alive(77.0).with_covariate("x", 0.5),
            SubjectRecord::healthy("dc", 63.0, 70.0).with_death(74.0, true).with_covariate("x", -1.0),
            SubjectRecord::healthy("di", 60.5, 80.0).with_death(83.5, false).with_covariate("x", 2.0),
            SubjectRecord::healthy("ic", 62.0, 70.0).with_interval_onset(72.5).with_last_alive(79.0).with_covariate("x", 0.0),
            SubjectRecord::healthy("id", 62.0, 84.0).with_interval_onset(88.0).with_death(96.0, false).with_covariate("x", 1.5),
            SubjectRecord::healthy("ex", 60.0, 66.0).with_exact_onset(67.5).with_death(71.0, false).with_covariate("x", -0.5),
            SubjectRecord::healthy("tail", 70.0, 98.0).with_death(103.0, false).with_covariate("x", 0.2),
        ]
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for extend in [false, true] {
            let model = spline_model(true);
            let opts = LikelihoodOptions {
                extend_alive_to_last_contact: extend,
                ..Default::default()
            };
            let recs = mixed_records();
            let data = PreparedData::new(&recs, &model.covariates).unwrap();
            for r in 0..recs.len() {
                let one = PreparedData {
                    covariates: data.covariates.clone(),
                    records: vec![data.records[r].clone()],
                };
                let ev = evaluate(&one, &model, opts, Want::Gradient).unwrap();
                let jac = param_jacobian(&model);
                let g = ev.gradient.unwrap();
                let p = model.params();
                for i in 0..p.len() {
                    let h = 1e-6;
                    let mut up = p.clone();
                    let mut dn = p.clone();
                    up[i] += h;
                    dn[i] -= h;
                    let fu = evaluate(&one, &model.with_params(&up).unwrap(), opts, Want::Value).unwrap().loglik;
                    let fd = evaluate(&one, &model.with_params(&dn).unwrap(), opts, Want::Value).unwrap().loglik;
                    let num = (fu - fd) / (2.0 * h);
                    let ana = g[i] * jac[i];
                    assert!(
                        (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                        "record {} param {i}: analytic {ana} numeric {num}",
                        recs[r].id
                    );
                }
            }
        }
    }

    #[test]
    fn empty_and_single_totals() {
        let m = spline_model(true);
        assert_eq!(total_log_likelihood(&[], &m).unwrap(), 0.0);
        let rec = mixed_records().remove(3);
        let single = total_log_likelihood(std::slice::from_ref(&rec), &m).unwrap();
        assert_eq!(single, log_likelihood_contribution(&rec, &m).unwrap());
    }

    #[test]
    fn missing_covariate_names_the_subject() {
        let m = spline_model(true);
        let rec = SubjectRecord::healthy("nox", 61.0, 70.0);
        match total_log_likelihood(&[rec], &m) {
            Err(Error::MissingCovariate { id, .. }) => assert_eq!(id, "nox"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_onset_intensity_on_exact_onset_is_numeric_error() {
        let grid = KnotGrid::equidistant(60.0, 100.0, 3, 4).unwrap();
        let m = IllnessDeathModel::new(
            vec![],
            HazardSpec::spline(Transition::HealthyToIll, grid, vec![0.0; 7], vec![]).unwrap(),
            HazardSpec::constant(Transition::HealthyToDead, B, vec![]).unwrap(),
            HazardSpec::constant(Transition::IllToDead, C, vec![]).unwrap(),
        )
        .unwrap();
        let rec = SubjectRecord::healthy("zero", 60.0, 65.0).with_exact_onset(66.0);
        match log_likelihood_contribution(&rec, &m) {
            Err(Error::Numeric { id, .. }) => assert_eq!(id, "zero"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tree_reduce_shape() {
        assert_eq!(tree_reduce(Vec::<i32>::new(), |a, b| a + b), None);
        assert_eq!(tree_reduce(vec![1, 2, 3, 4, 5], |a, b| a + b), Some(15));
        let s = tree_reduce(vec!["a", "b", "c"].into_iter().map(String::from).collect(), |a, b| format!("({a}{b})"));
        assert_eq!(s.unwrap(), "((ab)c)");
    }
}
