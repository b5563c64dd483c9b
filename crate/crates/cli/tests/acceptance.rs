//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them. Run with
//! `cargo test -p illdeath-cli --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use illdeath::cohort::{build_cohorts, read_exam_rows, status_census, CohortCensus, CohortCounts, CohortRules};
use illdeath::estimation::{fit_with_weights, initial_model, select_smoothing, FitConfig, PenalizedObjective, Smoothing, SmoothingSearch};
use illdeath::likelihood::{LikelihoodOptions, PreparedData};
use illdeath::optimize::Objective;
use illdeath::probabilities::{risk_values, stay_ill, transition_probabilities};
use illdeath::record::SubjectRecord;
use illdeath::simulation::{evaluate_recovery, naive_risk_estimate, simulate_cohort, SimulationConfig};
use illdeath::{FittedModel, HazardSpec, IllnessDeathModel, KnotGrid, PenaltyWeights, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

struct Verdict {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn cli_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn scenario(seed: u64, conclusive_at_death: f64) -> SimulationConfig {
    let mut c: SimulationConfig = serde_json::from_str(&fs::read_to_string(core_fixture("default_scenario.json")).unwrap()).unwrap();
    c.seed = Some(seed);
    c.conclusive_at_death = conclusive_at_death;
    c
}

fn records(config: &SimulationConfig) -> Vec<SubjectRecord> {
    let sim = simulate_cohort(config).unwrap();
    build_cohorts(&sim.rows, &CohortRules::default()).unwrap().records
}

fn spline_config(weights: Option<PenaltyWeights>) -> FitConfig {
    let mut c = FitConfig {
        covariates: vec!["x".into()],
        ..Default::default()
    };
    if let Some(w) = weights {
        c.smoothing = Smoothing::Fixed(w);
    }
    c
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn closed_forms() -> Verdict {
    let (a, b, c) = (0.04, 0.02, 0.10);
    let start = Instant::now();
    let model = IllnessDeathModel::new(
        vec![],
        HazardSpec::constant(Transition::HealthyToIll, a, vec![]).unwrap(),
        HazardSpec::constant(Transition::HealthyToDead, b, vec![]).unwrap(),
        HazardSpec::constant(Transition::IllToDead, c, vec![]).unwrap(),
    )
    .unwrap();
    let m = model.baseline();
    let p = transition_probabilities(&m, 60.0, 70.0).unwrap();
    let risk = risk_values(&m, 60.0, &[70.0]).unwrap()[0];
    let prevalence = p.p01 / (p.p00 + p.p01);
    let elapsed = start.elapsed().as_secs_f64();

    let e06 = (-0.6f64).exp();
    let want_p00 = e06;
    let want_p01 = e06 - (-1.0f64).exp();
    let want_risk = 2.0 / 3.0 * (1.0 - e06);
    let want_prev = want_p01 / (want_p00 + want_p01);
    let errs = [rel(p.p00, want_p00), rel(p.p01, want_p01), rel(risk, want_risk), rel(prevalence, want_prev)];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    Verdict {
        name: "closed-form oracle",
        passed: worst <= 1e-6 && elapsed < 1.0,
        detail: format!(
            "P00={:.4} P01={:.4} risk={:.4} prev={:.4}; max rel err {worst:.2e} (<= 1e-6); {elapsed:.3}s (< 1s)",
            p.p00, p.p01, risk, prevalence
        ),
    }
}

fn conservation(models: &[&FittedModel]) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_sum: f64 = 0.0;
    let mut worst_ck: f64 = 0.0;
    let mut pairs = 0;
    for f in models {
        let m = f.model.baseline();
        for _ in 0..1000 {
            let s: f64 = rng.gen_range(60.0..100.0);
            let t: f64 = rng.gen_range(s..=100.0);
            let p = transition_probabilities(&m, s, t).unwrap();
            worst_sum = worst_sum.max((p.p00 + p.p01 + p.p02 - 1.0).abs());
            pairs += 1;
        }
        for _ in 0..200 {
            let s: f64 = rng.gen_range(60.0..95.0);
            let t: f64 = rng.gen_range(s..100.0);
            let u: f64 = rng.gen_range(t..=100.0);
            let su = transition_probabilities(&m, s, u).unwrap();
            let st = transition_probabilities(&m, s, t).unwrap();
            let tu = transition_probabilities(&m, t, u).unwrap();
            let split = st.p00 * tu.p01 + st.p01 * stay_ill(&m, t, u).unwrap();
            worst_ck = worst_ck.max((su.p01 - split).abs());
        }
    }
    Verdict {
        name: "probability conservation",
        passed: worst_sum <= 1e-8 && worst_ck <= 1e-6,
        detail: format!(
            "{pairs} (s,t) pairs on {} fitted spline models: max |sum-1| {worst_sum:.2e} (<= 1e-8); Chapman-Kolmogorov max {worst_ck:.2e} (<= 1e-6)",
            models.len()
        ),
    }
}

fn gradient_check() -> Verdict {
    let recs = records(&{
        let mut c = scenario(31, 0.25);
        c.n = 500;
        c
    });
    let config = spline_config(None);
    let weights = PenaltyWeights::uniform(1e3);
    let start = Instant::now();
    let data = PreparedData::new(&recs, &config.covariates).unwrap();
    let template = initial_model(&recs, &config).unwrap();
    let obj = PenalizedObjective::new(&data, template.clone(), &weights, LikelihoodOptions::default()).unwrap();
    let x0 = template.params();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x: Vec<f64> = x0.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
        let (_, g) = obj.gradient(&x).unwrap();
        let mut diff = 0.0;
        let mut scale = 0.0;
        let mut y = x.clone();
        for i in 0..x.len() {
            y[i] = x[i] + h;
            let fp = obj.value(&y).unwrap();
            y[i] = x[i] - h;
            let fm = obj.value(&y).unwrap();
            y[i] = x[i];
            let fd = (fp - fm) / (2.0 * h);
            diff += (g[i] - fd).powi(2);
            scale += fd * fd;
        }
        worst = worst.max(diff.sqrt() / scale.sqrt().max(1.0));
    }
    let elapsed = start.elapsed().as_secs_f64();
    Verdict {
        name: "gradient check",
        passed: worst <= 1e-4 && elapsed < 10.0,
        detail: format!("10 random points, {} parameters: max rel err {worst:.2e} (<= 1e-4); {elapsed:.1}s (< 10s)", x0.len()),
    }
}

fn ages() -> Vec<f64> {
    (60..=95).map(f64::from).collect()
}

fn recovery(weights: PenaltyWeights) -> (Verdict, f64) {
    let start = Instant::now();
    let reps = 20;
    let mut maes = Vec::new();
    let mut hr_hits = 0;
    for rep in 0..reps {
        let cfg = scenario(1 + rep, 0.25);
        let fitted = fit_with_weights(&records(&cfg), &spline_config(Some(weights)), &weights, None, &mut |_| {}).unwrap();
        let report = evaluate_recovery(&fitted, &cfg, 60.0, &ages()).unwrap();
        let hr = report
            .hazard_ratios
            .iter()
            .find(|h| h.transition == Transition::HealthyToIll)
            .unwrap()
            .estimated_hr;
        hr_hits += (1.8..=2.2).contains(&hr) as usize;
        maes.push(report.risk.mean_abs);
        eprintln!("recovery rep {rep}: risk MAE {:.4}, HR01 {hr:.3}", report.risk.mean_abs);
    }
    let mean_mae = maes.iter().sum::<f64>() / reps as f64;
    let worst = maes.iter().cloned().fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let verdict = Verdict {
        name: "simulation recovery",
        passed: mean_mae <= 0.03 && hr_hits * 100 >= 95 * reps as usize,
        detail: format!(
            "{reps} reps: mean risk MAE 60-95 {mean_mae:.4} (<= 0.03, worst rep {worst:.4}); HR01 in [1.8, 2.2] in {hr_hits}/{reps} (>= 95%)"
        ),
    };
    (verdict, elapsed)
}

/// Marginal risk by 85 over x ~ N(0,1), averaging the truth over normal
/// quantile midpoints.
fn marginal_truth_at_85(cfg: &SimulationConfig) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let m = 400;
    (0..m)
        .map(|k| {
            let z = normal.inverse_cdf((k as f64 + 0.5) / m as f64);
            risk_values(&cfg.truth_at(&[z]).unwrap(), 60.0, &[85.0]).unwrap()[0]
        })
        .sum::<f64>()
        / m as f64
}

fn mdid(weights: PenaltyWeights) -> Verdict {
    let reps = 50;
    let marginal = marginal_truth_at_85(&scenario(0, 0.0));
    let baseline_truth = risk_values(&scenario(0, 0.0).truth_baseline(), 60.0, &[85.0]).unwrap()[0];
    let mut below = 0;
    let mut signed = Vec::new();
    let mut naive_gap = Vec::new();
    for rep in 0..reps {
        let cfg = scenario(101 + rep, 0.0);
        let recs = records(&cfg);
        let naive = naive_risk_estimate(&recs, 60.0, &[85.0]).unwrap().estimate[0];
        below += (naive < marginal) as usize;
        naive_gap.push(naive - marginal);
        let fitted = fit_with_weights(&recs, &spline_config(Some(weights)), &weights, None, &mut |_| {}).unwrap();
        let est = risk_values(&fitted.model.at(&[0.0]).unwrap(), 60.0, &[85.0]).unwrap()[0];
        signed.push(est - baseline_truth);
        eprintln!("mdid rep {rep}: naive-truth {:+.4}, multistate-truth {:+.4}", naive - marginal, est - baseline_truth);
    }
    let mean_signed = signed.iter().sum::<f64>() / reps as f64;
    let mean_naive = naive_gap.iter().sum::<f64>() / reps as f64;
    Verdict {
        name: "MDID bias demonstration",
        passed: below * 100 >= 90 * reps as usize && mean_signed.abs() <= 0.02,
        detail: format!(
            "{reps} reps at risk(85): naive below truth in {below}/{reps} (>= 90%, mean gap {mean_naive:+.4}); multistate mean signed error {mean_signed:+.4} (within +-0.02)"
        ),
    }
}

fn fixtures() -> Verdict {
    let rules: CohortRules = serde_json::from_str(&fs::read_to_string(core_fixture("cohort_rules.json")).unwrap()).unwrap();
    let (rows, _) = read_exam_rows(fs::File::open(core_fixture("cohort_exams.csv")).unwrap(), &rules).unwrap();
    let build = build_cohorts(&rows, &rules).unwrap();
    let mut flow = Vec::new();
    build.report.write_csv(&mut flow).unwrap();
    let flow_ok = flow == fs::read(core_fixture("expected_flowchart.csv")).unwrap();
    let census = status_census(&build.records, 2015.0, rules.inconclusive_window);
    let mut table = Vec::new();
    census.write_csv(&mut table).unwrap();
    let census_ok = table == fs::read(core_fixture("expected_census.csv")).unwrap();

    let example = CohortCensus {
        horizon_year: 2015.0,
        inconclusive_window: 4.0,
        cohorts: vec![CohortCounts {
            cohort: "example".into(),
            size: 2000,
            counts: [0, 0, 731, 0, 0, 662],
        }],
    };
    let mut text = Vec::new();
    example.write_csv(&mut text).unwrap();
    let text = String::from_utf8(text).unwrap();
    let percent_ok = text.lines().any(|l| l.ends_with(",662,90.6"));
    Verdict {
        name: "flowchart/census fixtures",
        passed: flow_ok && census_ok && percent_ok,
        detail: format!("flowchart matches: {flow_ok}; census matches: {census_ok}; 662/731 rendered as 90.6: {percent_ok}"),
    }
}

fn spline_properties() -> Verdict {
    let grids = [
        KnotGrid::equidistant(60.0, 100.0, 5, 4).unwrap(),
        KnotGrid::new(50.0, 105.0, vec![58.0, 63.5, 70.0, 81.0, 88.0, 97.0], 4).unwrap(),
        KnotGrid::equidistant(60.0, 100.0, 4, 3).unwrap(),
    ];
    let mut unity: f64 = 0.0;
    let mut ends: f64 = 0.0;
    let mut penalty: f64 = 0.0;
    for g in &grids {
        let n = g.num_basis();
        let mut m = vec![0.0; n];
        let mut i = vec![0.0; n];
        let (lo, hi) = (g.boundary_lo(), g.boundary_hi());
        for k in 0..=400 {
            let t = lo + (hi - lo) * k as f64 / 400.0;
            g.mspline_into(t, &mut m);
            let sum: f64 = (0..n).map(|j| m[j] * g.bspline_scale(j)).sum();
            unity = unity.max((sum - 1.0).abs());
        }
        g.ispline_into(lo, &mut i);
        ends = ends.max(i.iter().map(|v| v.abs()).fold(0.0, f64::max));
        g.ispline_into(hi, &mut i);
        ends = ends.max(i.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));

        let p = g.penalty_matrix().unwrap();
        let xi = g.greville();
        let c: Vec<f64> = (0..n).map(|j| (0.01 + 0.003 * (xi[j] - lo)) * g.bspline_scale(j)).collect();
        let mut q = 0.0;
        for a in 0..n {
            for b in 0..n {
                q += c[a] * p[(a, b)] * c[b];
            }
        }
        let size = p.amax() * c.iter().map(|v| v * v).sum::<f64>();
        penalty = penalty.max(q.abs() / size);
    }
    Verdict {
        name: "spline properties",
        passed: unity <= 1e-12 && ends <= 1e-12 && penalty <= 1e-12,
        detail: format!(
            "partition of unity max err {unity:.1e} (<= 1e-12); I-spline endpoint max err {ends:.1e}; penalty on linear intensity {penalty:.1e} (relative)"
        ),
    }
}

fn cli_chain(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    for f in ["simulation.json", "fit.json"] {
        fs::copy(cli_fixture(f), dir.join(f)).map_err(|e| e.to_string())?;
    }
    let steps: [&[&str]; 6] = [
        &["simulate", "--config", "simulation.json", "--out", "sim", "--seed", "11"],
        &["build-cohorts", "--input", "sim/exam_rows.csv", "--out", "cohorts"],
        &["census", "--subjects", "cohorts/subjects.csv", "--out", "census"],
        &["fit", "--subjects", "cohorts/subjects.csv", "--config", "fit.json", "--out", "fit"],
        &["predict", "--fit", "fit/fit.json", "--out", "predict", "--draws", "200", "--seed", "5"],
        &["plot", "--curves", "predict/curves.csv", "--out", "plot"],
    ];
    for args in steps {
        let status = Command::new(env!("CARGO_BIN_EXE_illdeath"))
            .args(args)
            .current_dir(dir)
            .env("SOURCE_DATE_EPOCH", "1700000000")
            .env_remove("RUST_LOG")
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("{} exited with {:?}", args[0], status.code()));
        }
    }
    let mut out = BTreeMap::new();
    for sub in ["sim", "cohorts", "census", "fit", "predict", "plot"] {
        for entry in fs::read_dir(dir.join(sub)).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            let bytes = fs::read(&p).map_err(|e| e.to_string())?;
            out.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), hex::encode(Sha256::digest(bytes)));
        }
    }
    Ok(out)
}

fn cli_reproducible() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    match (cli_chain(a.path()), cli_chain(b.path())) {
        (Ok(x), Ok(y)) => {
            let same = x == y;
            Verdict {
                name: "end-to-end CLI chain",
                passed: same,
                detail: format!("6 commands exit 0 twice; {} output files, byte-identical: {same}", x.len()),
            }
        }
        (Err(e), _) | (_, Err(e)) => Verdict {
            name: "end-to-end CLI chain",
            passed: false,
            detail: e,
        },
    }
}

#[test]
fn acceptance() {
    let suite = Instant::now();
    let mut verdicts = vec![closed_forms()];

    // Smoothing weights are chosen once by cross-validation on a pilot
    // replicate and held fixed across the replications below.
    let pilot_start = Instant::now();
    let pilot = records(&scenario(1000, 0.25));
    let selection = select_smoothing(&pilot, &spline_config(None), &SmoothingSearch::default()).unwrap();
    let weights = selection.weights;
    eprintln!(
        "pilot smoothing weights {:?} from {} fits in {:.0}s",
        weights.as_array(),
        selection.evaluated.len(),
        pilot_start.elapsed().as_secs_f64()
    );

    let small = fit_with_weights(
        &records(&{
            let mut c = scenario(7, 0.25);
            c.n = 400;
            c
        }),
        &spline_config(None),
        &PenaltyWeights::uniform(10.0),
        None,
        &mut |_| {},
    )
    .unwrap();
    verdicts.push(conservation(&[&selection.fitted, &small]));
    verdicts.push(gradient_check());
    let (mut recovery, _) = recovery(weights);
    let mdid = mdid(weights);
    verdicts.push(fixtures());
    verdicts.push(spline_properties());
    verdicts.push(cli_reproducible());

    let total = suite.elapsed().as_secs_f64();
    recovery.passed &= total < 1800.0;
    recovery.detail.push_str(&format!("; full suite {:.1} min (< 30)", total / 60.0));
    verdicts.insert(3, recovery);
    verdicts.insert(4, mdid);

    println!();
    for (i, v) in verdicts.iter().enumerate() {
        println!("[{}] criterion {} {}: {}", if v.passed { "PASS" } else { "FAIL" }, i + 1, v.name, v.detail);
    }
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.passed).map(|v| v.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
