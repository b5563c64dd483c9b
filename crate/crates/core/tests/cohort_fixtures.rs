use std::fs;
use std::path::PathBuf;

use illdeath::cohort::{
    build_cohorts, read_exam_rows, status_census, CensusCategory, CohortCensus, CohortCounts, CohortRules, ExclusionStep,
};
use illdeath::record::Onset;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn rules() -> CohortRules {
    serde_json::from_str(&fs::read_to_string(fixture("cohort_rules.json")).unwrap()).unwrap()
}

fn build() -> (illdeath::cohort::CohortBuild, usize) {
    let rules = rules();
    let (rows, rejects) = read_exam_rows(fs::File::open(fixture("cohort_exams.csv")).unwrap(), &rules).unwrap();
    (build_cohorts(&rows, &rules).unwrap(), rejects.len())
}

#[test]
fn flowchart_counts_match_hand_tally() {
    let (b, rejects) = build();
    assert_eq!(rejects, 1);
    let r = &b.report;
    assert_eq!(r.initial, 19);
    for step in ExclusionStep::ALL {
        assert_eq!(r.count(step), 1, "{step}");
    }
    assert_eq!(r.excluded(), 8);
    assert_eq!(r.included(), 11);
    let cohorts: Vec<(&str, usize)> = r.cohorts.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    assert_eq!(cohorts, vec![("1915-1924", 4), ("1925-1934", 3), ("1935-1944", 4)]);

    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap(), fs::read_to_string(fixture("expected_flowchart.csv")).unwrap());
}

#[test]
fn conflicting_subject_is_reported_not_dropped() {
    let (b, _) = build();
    assert_eq!(b.records.len(), 10);
    assert_eq!(b.conflicts.len(), 1);
    assert_eq!(b.conflicts[0].0, "z01");
}

#[test]
fn derived_records_follow_the_rows() {
    let (b, _) = build();
    let get = |id: &str| b.records.iter().find(|r| r.id == id).unwrap();
    let a01 = get("a01");
    assert_eq!(a01.onset, Some(Onset::Interval { lo: 66.0, hi: 70.0 }));
    assert_eq!(a01.death_age, Some(74.0));
    assert_eq!(get("a02").birth_year, Some(1920));
    assert!(get("a02").conclusive_at_death);
    assert_eq!(get("b01").onset, Some(Onset::Exact { age: 74.5 }));
    let c01 = get("c01");
    assert_eq!(c01.birth_year, Some(1936));
    assert!((c01.entry_age - 64.0).abs() < 1e-9);
    assert_eq!(c01.covariates["high_education"], 1.0);
    assert_eq!(get("c02").covariates["high_education"], 0.0);
    assert_eq!(get("a04").covariates["male"], 1.0);
    assert_eq!(get("a04").last_alive_age, 90.0);
}

#[test]
fn census_matches_hand_tally() {
    let (b, _) = build();
    let census = status_census(&b.records, 2015.0, rules().inconclusive_window);
    let counts: Vec<(&str, usize, [usize; 6])> = census.cohorts.iter().map(|c| (c.cohort.as_str(), c.size, c.counts)).collect();
    assert_eq!(
        counts,
        vec![
            ("1915-1924", 4, [1, 0, 1, 1, 1, 1]),
            ("1925-1934", 3, [0, 1, 1, 0, 1, 0]),
            ("1935-1944", 3, [1, 1, 1, 0, 0, 1]),
        ]
    );
    for c in &census.cohorts {
        let partition: usize = CensusCategory::ALL.iter().filter(|k| !k.is_subgroup()).map(|k| c.count(*k)).sum();
        assert_eq!(partition, c.size);
    }
    let mut csv = Vec::new();
    census.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap(), fs::read_to_string(fixture("expected_census.csv")).unwrap());
}

#[test]
fn subgroup_percent_is_relative_to_diagnosed() {
    let c = CohortCounts {
        cohort: "c".into(),
        size: 2000,
        counts: [0, 0, 731, 0, 0, 662],
    };
    let census = CohortCensus {
        horizon_year: 2015.0,
        inconclusive_window: 4.0,
        cohorts: vec![c],
    };
    let mut csv = Vec::new();
    census.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.lines().any(|l| l == "Death after dementia diagnosis*,662,90.6"), "{text}");
    assert!(text.lines().any(|l| l == "Diagnosed dementia,731,36.5"), "{text}");
}
