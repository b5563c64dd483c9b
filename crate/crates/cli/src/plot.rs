//! Minimal SVG line charts with shaded confidence bands.

use std::fmt::Write;

use illdeath::probabilities::CurveRow;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// One line with its band.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub ages: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

/// Groups rows of one quantity by stratum and profile, in order of first
/// appearance.
pub fn series_for(rows: &[CurveRow], quantity: &str) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows.iter().filter(|r| r.quantity == quantity) {
        let label = if r.profile == "baseline" {
            r.stratum.clone()
        } else {
            format!("{} / {}", r.stratum, r.profile)
        };
        let s = match out.iter_mut().position(|s| s.label == label) {
            Some(i) => &mut out[i],
            None => {
                out.push(Series {
                    label,
                    ages: vec![],
                    estimate: vec![],
                    lo95: vec![],
                    hi95: vec![],
                });
                out.last_mut().expect("just pushed")
            }
        };
        s.ages.push(r.age);
        s.estimate.push(r.estimate);
        s.lo95.push(r.lo95);
        s.hi95.push(r.hi95);
    }
    out
}

/// Distinct quantities in file order.
pub fn quantities(rows: &[CurveRow]) -> Vec<String> {
    let mut q: Vec<String> = Vec::new();
    for r in rows {
        if !q.contains(&r.quantity) {
            q.push(r.quantity.clone());
        }
    }
    q
}

fn nice_ceiling(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let step = if v <= 0.2 { 0.05 } else { 0.1 };
    ((v / step).ceil() * step).min(1.0).max(step)
}

pub fn render_svg(title: &str, series: &[Series]) -> String {
    let all_ages = series.iter().flat_map(|s| s.ages.iter().copied());
    let (x0, x1) = all_ages.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x0, x1) = if x0.is_finite() && x1 > x0 { (x0, x1) } else { (60.0, 100.0) };
    let ymax = nice_ceiling(series.iter().flat_map(|s| s.hi95.iter().chain(&s.estimate)).fold(0.0f64, |m, v| m.max(*v)));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |a: f64| LEFT + (a - x0) / (x1 - x0) * pw;
    let py = |p: f64| TOP + (1.0 - p / ymax) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title));

    // Axes and ticks.
    let _ = writeln!(
        s,
        r#"<path d="M{:.2},{:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        LEFT,
        TOP,
        TOP + ph,
        LEFT + pw
    );
    let first_tick = (x0 / 5.0).ceil() as i64 * 5;
    let mut a = first_tick as f64;
    while a <= x1 + 1e-9 {
        let x = px(a);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{a}</text>"#, TOP + ph + 19.0);
        a += 5.0;
    }
    for k in 0..=5 {
        let p = ymax * k as f64 / 5.0;
        let y = py(p);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT:.2}" y2="{y:.2}" stroke="black"/>"#, LEFT - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{p:.2}</text>"#, LEFT - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Age (years)</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.2}) rotate(-90)" text-anchor="middle">Probability</text>"#,
        TOP + ph / 2.0
    );

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut band = String::new();
        for (a, v) in ser.ages.iter().zip(&ser.hi95) {
            let _ = write!(band, "{:.2},{:.2} ", px(*a), py(*v));
        }
        for (a, v) in ser.ages.iter().zip(&ser.lo95).rev() {
            let _ = write!(band, "{:.2},{:.2} ", px(*a), py(*v));
        }
        let _ = writeln!(s, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.trim_end());
        let mut line = String::new();
        for (a, v) in ser.ages.iter().zip(&ser.estimate) {
            let _ = write!(line, "{:.2},{:.2} ", px(*a), py(*v));
        }
        let _ = writeln!(s, r#"<polyline class="estimate" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.trim_end());
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 16.0;
        let _ = writeln!(s, r#"<rect x="{lx:.2}" y="{:.2}" width="14" height="10" fill="{color}" fill-opacity="0.2" stroke="{color}"/>"#, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 20.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Width of each band in data units, for checks on rendered series.
pub fn band_widths(series: &Series) -> Vec<f64> {
    series.hi95.iter().zip(&series.lo95).map(|(h, l)| h - l).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(q: &str, stratum: &str, age: f64, est: f64, lo: f64, hi: f64) -> CurveRow {
        CurveRow {
            age,
            estimate: est,
            lo95: lo,
            hi95: hi,
            quantity: q.into(),
            stratum: stratum.into(),
            profile: "baseline".into(),
            conditioning_age: 60.0,
            extrapolated: false,
        }
    }

    #[test]
    fn groups_by_stratum() {
        let rows = vec![
            row("risk", "a", 60.0, 0.0, 0.0, 0.0),
            row("risk", "b", 60.0, 0.0, 0.0, 0.0),
            row("risk", "a", 70.0, 0.2, 0.1, 0.3),
            row("prevalence", "a", 70.0, 0.1, 0.1, 0.1),
        ];
        let s = series_for(&rows, "risk");
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].ages, vec![60.0, 70.0]);
        assert_eq!(quantities(&rows), vec!["risk", "prevalence"]);
    }

    #[test]
    fn one_band_and_line_per_series() {
        let rows = vec![row("risk", "a", 60.0, 0.0, 0.0, 0.0), row("risk", "a", 80.0, 0.3, 0.2, 0.4), row("risk", "b", 80.0, 0.3, 0.2, 0.4)];
        let svg = render_svg("risk", &series_for(&rows, "risk"));
        assert_eq!(svg.matches("class=\"band\"").count(), 2);
        assert_eq!(svg.matches("class=\"estimate\"").count(), 2);
        assert_eq!(svg, render_svg("risk", &series_for(&rows, "risk")));
    }

    #[test]
    fn label_text_is_escaped() {
        let rows = vec![row("risk", "<a&b>", 60.0, 0.0, 0.0, 0.0)];
        let svg = render_svg("risk", &series_for(&rows, "risk"));
        assert!(svg.contains("&lt;a&amp;b&gt;"));
    }
}
