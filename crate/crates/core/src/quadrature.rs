//! Gauss-Legendre rules and composite integration over breakpoint-split
//! intervals.
//!
//! Nodes are computed by Newton iteration on the Legendre recurrence and
//! cached per order, so repeated calls are cheap.

use std::sync::OnceLock;

const MAX_CACHED_ORDER: usize = 128;

/// An `n`-point Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        let half = n.div_ceil(2);
        for i in 0..half {
            // Tricomi initial guess, refined by Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            weights[i] = w;
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mapped `(node, weight)` pairs for the interval `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let d = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Shared rule of order `n`, built on first use.
pub fn rule(n: usize) -> &'static GaussLegendre {
    static RULES: [OnceLock<GaussLegendre>; MAX_CACHED_ORDER + 1] =
        [const { OnceLock::new() }; MAX_CACHED_ORDER + 1];
    assert!(
        (1..=MAX_CACHED_ORDER).contains(&n),
        "quadrature order {n} not in 1..={MAX_CACHED_ORDER}"
    );
    RULES[n].get_or_init(|| GaussLegendre::new(n))
}

/// Splits `[a, b]` at every breakpoint strictly inside it. `breakpoints`
/// must be sorted ascending.
pub fn segments(a: f64, b: f64, breakpoints: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if b <= a {
        return out;
    }
    let mut lo = a;
    let start = breakpoints.partition_point(|&x| x <= a);
    for &bp in &breakpoints[start..] {
        if bp >= b {
            break;
        }
        out.push((lo, bp));
        lo = bp;
    }
    out.push((lo, b));
    out
}

/// Composite Gauss-Legendre integral of `f` over `[a, b]`, using an
/// `nodes`-point rule on every piece between consecutive breakpoints.
pub fn integrate_composite<F: FnMut(f64) -> f64>(
    a: f64,
    b: f64,
    breakpoints: &[f64],
    nodes: usize,
    mut f: F,
) -> f64 {
    let gl = rule(nodes);
    segments(a, b, breakpoints)
        .into_iter()
        .map(|(lo, hi)| gl.integrate(lo, hi, &mut f))
        .sum()
}

/// Sorted, deduplicated copy of `points`.
pub fn sorted_breakpoints(points: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = points.into_iter().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for n in [1, 2, 5, 30, 60, 64] {
            let s: f64 = rule(n).weights().iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n} sum={s}");
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let gl = rule(4);
        // degree 7 monomial on [0, 2]
        let v = gl.integrate(0.0, 2.0, |x| x.powi(7));
        assert!((v - 2f64.powi(8) / 8.0).abs() < 1e-12);
    }

    #[test]
    fn high_order_rule_integrates_smooth_functions() {
        let v = rule(64).integrate(0.0, std::f64::consts::PI, f64::sin);
        assert!((v - 2.0).abs() < 1e-14);
        let v = rule(30).integrate(-1.0, 3.0, f64::exp);
        assert!((v - (3f64.exp() - (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn nodes_are_symmetric_and_sorted() {
        let gl = rule(30);
        let x = gl.nodes();
        for i in 0..30 {
            assert!((x[i] + x[29 - i]).abs() < 1e-15);
        }
        assert!(x.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn segments_split_at_interior_breakpoints_only() {
        let s = segments(1.0, 4.0, &[0.0, 1.0, 2.0, 3.5, 4.0, 5.0]);
        assert_eq!(s, vec![(1.0, 2.0), (2.0, 3.5), (3.5, 4.0)]);
        assert!(segments(2.0, 2.0, &[1.0]).is_empty());
    }

    #[test]
    fn composite_handles_kinks() {
        let v = integrate_composite(-1.0, 2.0, &[0.0], 3, |x: f64| x.abs());
        assert!((v - 2.5).abs() < 1e-14);
    }
}
