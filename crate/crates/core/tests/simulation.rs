mod common;

use illdeath::cohort::write_exam_rows;
use illdeath::estimation::{Convergence, FittedModel};
use illdeath::optimize::Status;
use illdeath::record::classify_pattern;
use illdeath::simulation::{
    evaluate_recovery, naive_risk_estimate, simulate_cohort, write_truth_csv, ExamScheme, SimulationConfig, TruthHazard,
};
use illdeath::{HazardSpec, IllnessDeathModel, ObservationPattern, PenaltyWeights, SubjectRecord, Transition};

fn outputs(config: &SimulationConfig) -> (Vec<u8>, Vec<u8>) {
    let sim = simulate_cohort(config).unwrap();
    let mut rows = Vec::new();
    write_exam_rows(&mut rows, &sim.rows).unwrap();
    let mut truth = Vec::new();
    write_truth_csv(&mut truth, &sim.truth).unwrap();
    (rows, truth)
}

#[test]
fn same_seed_gives_identical_bytes_on_any_pool() {
    let config = common::default_scenario(500, 42);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| outputs(&config))
    };
    let a = run(1);
    assert_eq!(a, run(3));
    assert_eq!(a, outputs(&config));
    assert_ne!(a, outputs(&common::default_scenario(500, 43)));
}

/// Survival from 60 under the scenario's Weibull intensities, written out
/// directly rather than through the truth types.
fn healthy_survival(t: f64) -> f64 {
    let a = |shape: f64, scale: f64| (t / scale).powf(shape) - (60.0f64 / scale).powf(shape);
    (-a(7.0, 92.0) - a(6.0, 95.0)).exp()
}

#[test]
fn healthy_exit_times_follow_the_truth() {
    let mut config = common::default_scenario(10_000, 8);
    config.covariates.clear();
    config.entry_spread = 0.0;
    let sim = simulate_cohort(&config).unwrap();
    let exits: Vec<f64> = sim.truth.iter().map(|t| t.onset_age.or(t.death_age).unwrap()).collect();
    let n = exits.len() as f64;
    let band = 1.36 / n.sqrt();
    for k in 1..10 {
        let target = 1.0 - k as f64 / 10.0;
        let (mut lo, mut hi) = (60.0, 150.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if healthy_survival(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let decile = 0.5 * (lo + hi);
        let empirical = exits.iter().filter(|&&e| e > decile).count() as f64 / n;
        assert!((empirical - target).abs() <= band, "decile {k}: {empirical} vs {target}");
    }
}

fn inconclusive_fraction(interval: f64) -> f64 {
    let mut config = common::default_scenario(4000, 77);
    config.conclusive_at_death = 0.0;
    config.exams = ExamScheme::Scheduled {
        interval,
        jitter: 0.25,
        miss_prob: 0.1,
    };
    let records = common::records(&config);
    let hits = records
        .iter()
        .filter(|r| classify_pattern(r, r.conclusive_at_death) == ObservationPattern::DeadInconclusive)
        .count();
    hits as f64 / records.len() as f64
}

#[test]
fn wider_exam_spacing_leaves_more_deaths_inconclusive() {
    let rates: Vec<f64> = [1.0, 2.0, 4.0].into_iter().map(inconclusive_fraction).collect();
    assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
}

fn truth_as_model(config: &SimulationConfig) -> IllnessDeathModel {
    let spec = |tr: Transition| {
        let TruthHazard::Weibull { shape, scale, origin } = *config.hazards.get(tr) else {
            panic!("weibull truth expected")
        };
        let beta = config.covariates.iter().map(|c| c.hr[tr.index()].ln()).collect();
        HazardSpec::weibull_from(tr, shape, scale, origin, beta).unwrap()
    };
    IllnessDeathModel::new(
        config.covariate_names(),
        spec(Transition::HealthyToIll),
        spec(Transition::HealthyToDead),
        spec(Transition::IllToDead),
    )
    .unwrap()
}

#[test]
fn recovery_of_the_truth_itself_is_exact() {
    let config = common::default_scenario(10, 1);
    let model = truth_as_model(&config);
    let fitted = FittedModel {
        param_names: model.param_names(),
        model,
        weights: PenaltyWeights::default(),
        logpl: 0.0,
        loglik: 0.0,
        lcv: 0.0,
        effective_df: 0.0,
        covariance: None,
        covariance_status: None,
        convergence: Convergence {
            iterations: 0,
            gradient_norm: 0.0,
            status: Status::Converged,
            gradient_check_error: 0.0,
            gradient_check_passed: true,
        },
        n_subjects: 0,
        observed_transitions: [0; 3],
        weakly_identified: vec![],
    };
    let ages: Vec<f64> = (60..=95).map(f64::from).collect();
    let report = evaluate_recovery(&fitted, &config, 60.0, &ages).unwrap();
    assert!(report.risk.max_abs < 1e-12, "{:?}", report.risk);
    assert!(report.prevalence.max_abs < 1e-12, "{:?}", report.prevalence);
    let hr = &report.hazard_ratios;
    assert_eq!(hr.len(), 3);
    for h in hr {
        assert!((h.true_hr - h.estimated_hr).abs() < 1e-12);
    }

    let fine: Vec<f64> = (0..=70).map(|k| 60.0 + 0.5 * k as f64).collect();
    let refined = evaluate_recovery(&fitted, &config, 60.0, &fine).unwrap();
    assert!(refined.risk.max_abs < 1e-12);
}

#[test]
fn naive_curve_is_zero_when_everyone_leaves_before_onset() {
    let records: Vec<SubjectRecord> = (0..20)
        .map(|i| SubjectRecord::healthy(format!("h{i}"), 60.0 + 0.1 * i as f64, 70.0 + i as f64))
        .collect();
    let t = naive_risk_estimate(&records, 60.0, &[65.0, 80.0, 95.0]).unwrap();
    assert_eq!(t.estimate, vec![0.0; 3]);
}
