#![allow(dead_code)]

use std::path::PathBuf;

use illdeath::cohort::{build_cohorts, CohortRules};
use illdeath::record::SubjectRecord;
use illdeath::simulation::{simulate_cohort, SimulationConfig};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Weibull truths, 2-year exams, HR 2 on onset for covariate `x`.
pub fn default_scenario(n: usize, seed: u64) -> SimulationConfig {
    let mut c: SimulationConfig = serde_json::from_str(&std::fs::read_to_string(fixture("default_scenario.json")).unwrap()).unwrap();
    c.n = n;
    c.seed = Some(seed);
    c
}

pub fn records(config: &SimulationConfig) -> Vec<SubjectRecord> {
    let sim = simulate_cohort(config).unwrap();
    let build = build_cohorts(&sim.rows, &CohortRules::default()).unwrap();
    assert!(build.conflicts.is_empty(), "{:?}", build.conflicts);
    build.records
}
