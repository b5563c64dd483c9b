use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use illdeath::cohort::{self, CohortRules};
use illdeath::estimation::{self, FitConfig, FittedModel, GridPoint, Smoothing};
use illdeath::optimize::TraceRecord;
use illdeath::probabilities::{self, ConditionalTableSpec, CurveRequest, Quantity};
use illdeath::record::{read_records_csv, write_records_csv, SubjectRecord};
use illdeath::simulation::{self, SimulationConfig};
use illdeath::Error;
use log::{info, warn};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::json;

use crate::failure::{CmdResult, Failure};
use crate::manifest::{sha256_hex, ManifestBuilder};
use crate::plot;
use crate::{BuildCohortsArgs, CensusArgs, FitArgs, PlotArgs, PredictArgs, SimulateArgs};

pub const EXAM_ROWS_FILE: &str = "exam_rows.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const FIT_FILE: &str = "fit.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONDITIONAL_FILE: &str = "conditional.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Serialized output of the fit command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutput {
    pub config: FitConfig,
    pub stratify_by: Option<String>,
    pub strata: Vec<StratumFit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumFit {
    /// `None` for an unstratified fit.
    pub stratum: Option<String>,
    pub fitted: FittedModel,
}

fn require(path: &Path, hint: &'static str) -> CmdResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::MissingInput {
            path: path.to_path_buf(),
            hint,
        })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CmdResult<(T, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
    let value = serde_json::from_slice(&bytes).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok((value, bytes))
}

/// Parsed optional config plus the hash recorded in the manifest.
fn optional_config<T: DeserializeOwned + Serialize + Default>(path: Option<&Path>) -> CmdResult<(T, String)> {
    match path {
        Some(p) => {
            let (v, bytes) = read_json(p)?;
            Ok((v, sha256_hex(&bytes)))
        }
        None => {
            let v = T::default();
            let bytes = serde_json::to_vec(&v).map_err(|e| Failure::Config(e.to_string()))?;
            Ok((v, sha256_hex(&bytes)))
        }
    }
}

fn settings_hash(settings: &serde_json::Value) -> String {
    sha256_hex(settings.to_string().as_bytes())
}

fn create_out(dir: &Path) -> CmdResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn create(dir: &Path, name: &str) -> CmdResult<BufWriter<File>> {
    let p = dir.join(name);
    File::create(&p).map(BufWriter::new).map_err(|e| Failure::io(&p, e))
}

fn open(path: &Path) -> CmdResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Failure::io(path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> CmdResult<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Failure::io(&p, e))
}

fn to_json_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("settings serialize")
}

pub fn simulate(args: &SimulateArgs) -> CmdResult<()> {
    let (mut config, bytes): (SimulationConfig, _) = read_json(&args.config)?;
    config.seed = Some(args.seed);
    config.validate()?;
    create_out(&args.out)?;
    let mut manifest = ManifestBuilder::new("simulate", sha256_hex(&bytes), to_json_value(&config), Some(args.seed));
    manifest.input(&args.config)?;

    let sim = simulation::simulate_cohort(&config)?;
    cohort::write_exam_rows(create(&args.out, EXAM_ROWS_FILE)?, &sim.rows)?;
    simulation::write_truth_csv(create(&args.out, TRUTH_FILE)?, &sim.truth)?;
    info!("simulated {} subjects, {} exam rows", sim.truth.len(), sim.rows.len());
    manifest.finish(&args.out, &[EXAM_ROWS_FILE.into(), TRUTH_FILE.into()])?;
    Ok(())
}

pub fn build_cohorts(args: &BuildCohortsArgs) -> CmdResult<()> {
    require(&args.input, "supply an exam-row CSV, e.g. from `illdeath simulate`")?;
    let (rules, hash): (CohortRules, _) = optional_config(args.rules.as_deref())?;
    rules.validate()?;
    create_out(&args.out)?;
    let mut manifest = ManifestBuilder::new("build-cohorts", hash, to_json_value(&rules), None);
    manifest.input(&args.input)?;
    if let Some(r) = &args.rules {
        manifest.input(r)?;
    }

    let (rows, rejects) = cohort::read_exam_rows(open(&args.input)?, &rules)?;
    if !rejects.is_empty() {
        warn!("{} malformed rows rejected; see rejects.csv", rejects.len());
    }
    let build = cohort::build_cohorts(&rows, &rules)?;
    if !build.conflicts.is_empty() {
        warn!("{} subjects with conflicting rows left out; see conflicts.csv", build.conflicts.len());
    }
    write_records_csv(create(&args.out, SUBJECTS_FILE)?, &build.records)?;
    build.report.write_csv(create(&args.out, "flowchart.csv")?)?;
    write_text(&args.out, "flowchart.txt", &build.report.render_text())?;
    cohort::write_rejects(create(&args.out, "rejects.csv")?, &rejects)?;
    let mut w = csv::Writer::from_writer(create(&args.out, "conflicts.csv")?);
    w.write_record(["subject_id", "reason"]).map_err(Error::from)?;
    for (id, reason) in &build.conflicts {
        w.write_record([id, reason]).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Failure::Io(e.to_string()))?;
    drop(w);
    manifest.finish(
        &args.out,
        &[
            SUBJECTS_FILE.into(),
            "flowchart.csv".into(),
            "flowchart.txt".into(),
            "rejects.csv".into(),
            "conflicts.csv".into(),
        ],
    )?;
    Ok(())
}

fn read_subjects(path: &Path) -> CmdResult<Vec<SubjectRecord>> {
    require(path, "run `illdeath build-cohorts` first")?;
    Ok(read_records_csv(open(path)?)?)
}

pub fn census(args: &CensusArgs) -> CmdResult<()> {
    let records = read_subjects(&args.subjects)?;
    let (rules, _): (CohortRules, String) = optional_config(args.rules.as_deref())?;
    rules.validate()?;
    let horizon = args
        .horizon_year
        .or(rules.horizon_year)
        .or_else(|| cohort::default_horizon_year(&records))
        .ok_or_else(|| Failure::Config("no horizon year given and none derivable from the records".into()))?;
    let settings = json!({ "horizon_year": horizon, "inconclusive_window": rules.inconclusive_window });
    create_out(&args.out)?;
    let mut manifest = ManifestBuilder::new("census", settings_hash(&settings), settings, None);
    manifest.input(&args.subjects)?;
    if let Some(r) = &args.rules {
        manifest.input(r)?;
    }
    let census = cohort::status_census(&records, horizon, rules.inconclusive_window);
    census.write_csv(create(&args.out, "census.csv")?)?;
    write_text(&args.out, "census.txt", &census.render_text())?;
    manifest.finish(&args.out, &["census.csv".into(), "census.txt".into()])?;
    Ok(())
}

/// Splits records by birth cohort or by the value of a covariate.
fn stratify(records: &[SubjectRecord], by: &str) -> CmdResult<Vec<(String, Vec<SubjectRecord>)>> {
    let mut groups: Vec<(String, Vec<SubjectRecord>)> = Vec::new();
    for r in records {
        let label = if by == "cohort" {
            r.cohort.clone().ok_or_else(|| Failure::Config(format!("subject {} has no birth cohort", r.id)))?
        } else {
            let v = r.covariates.get(by).ok_or_else(|| Failure::Config(format!("subject {} lacks covariate `{by}`", r.id)))?;
            format!("{by}={v}")
        };
        match groups.iter_mut().find(|g| g.0 == label) {
            Some(g) => g.1.push(r.clone()),
            None => groups.push((label, vec![r.clone()])),
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(groups)
}

fn write_smoothing_csv<W: Write>(w: W, rows: &[(Option<String>, GridPoint)]) -> CmdResult<()> {
    let mut out = csv::Writer::from_writer(w);
    let e = |err: csv::Error| Failure::from(Error::from(err));
    out.write_record(["stratum", "kappa01", "kappa02", "kappa12", "lcv", "error"]).map_err(e)?;
    for (stratum, g) in rows {
        let [a, b, c] = g.weights.as_array();
        out.write_record([
            probabilities::stratum_label(stratum.as_deref()),
            a.to_string(),
            b.to_string(),
            c.to_string(),
            g.lcv.map(|v| format!("{v:.6}")).unwrap_or_default(),
            g.error.clone().unwrap_or_default(),
        ])
        .map_err(e)?;
    }
    out.flush().map_err(|err| Failure::Io(err.to_string()))
}

fn write_hazard_ratios_csv<W: Write>(w: W, strata: &[StratumFit]) -> CmdResult<()> {
    let mut out = csv::Writer::from_writer(w);
    let e = |err: csv::Error| Failure::from(Error::from(err));
    out.write_record(["stratum", "transition", "covariate", "beta", "se", "hr", "lo95", "hi95", "display"]).map_err(e)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for s in strata {
        for h in estimation::hazard_ratios(&s.fitted) {
            out.write_record([
                probabilities::stratum_label(s.stratum.as_deref()),
                h.transition.code().to_string(),
                h.covariate.clone(),
                format!("{:.6}", h.beta),
                opt(h.se),
                format!("{:.6}", h.hr),
                opt(h.lo95),
                opt(h.hi95),
                h.display(),
            ])
            .map_err(e)?;
        }
    }
    out.flush().map_err(|err| Failure::Io(err.to_string()))
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    stratum: Option<&'a str>,
    error: String,
    iterations: Option<usize>,
    gradient_norm: Option<f64>,
    last_iterate: Option<&'a [f64]>,
    trace: &'a [TraceRecord],
}

pub fn fit(args: &FitArgs) -> CmdResult<()> {
    let records = read_subjects(&args.subjects)?;
    let (mut config, hash): (FitConfig, _) = optional_config(args.config.as_deref())?;
    if let Some(by) = &args.stratify_by {
        if let Some(pos) = config.covariates.iter().position(|c| c == by) {
            warn!("`{by}` is constant within strata; dropping it from the covariates");
            config.covariates.remove(pos);
        }
    }
    create_out(&args.out)?;
    let settings = json!({ "config": to_json_value(&config), "stratify_by": args.stratify_by });
    let mut manifest = ManifestBuilder::new("fit", hash, settings, None);
    manifest.input(&args.subjects)?;
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }

    let groups: Vec<(Option<String>, Vec<SubjectRecord>)> = match &args.stratify_by {
        Some(by) => stratify(&records, by)?.into_iter().map(|(l, r)| (Some(l), r)).collect(),
        None => vec![(None, records)],
    };
    let mut strata = Vec::new();
    let mut grid_rows = Vec::new();
    for (stratum, recs) in groups {
        info!("fitting {} ({} subjects)", probabilities::stratum_label(stratum.as_deref()), recs.len());
        let mut trace = Vec::new();
        let has_spline = matches!(config.baseline, estimation::BaselineConfig::Spline { .. });
        let result = match &config.smoothing {
            Smoothing::Lcv(search) if has_spline => estimation::select_smoothing(&recs, &config, search).map(|sel| {
                grid_rows.extend(sel.evaluated.iter().cloned().map(|g| (stratum.clone(), g)));
                sel.fitted
            }),
            _ => estimation::fit_traced(&recs, &config, &mut |t| trace.push(*t)),
        };
        let fitted = match result {
            Ok(f) => f,
            Err(e @ (Error::NonConvergence { .. } | Error::SmoothingFailed(_))) => {
                let (iterations, gradient_norm, last_iterate) = match &e {
                    Error::NonConvergence {
                        iterations,
                        gradient_norm,
                        last_iterate,
                    } => (Some(*iterations), Some(*gradient_norm), Some(last_iterate.as_slice())),
                    _ => (None, None, None),
                };
                let diag = Diagnostics {
                    stratum: stratum.as_deref(),
                    error: e.to_string(),
                    iterations,
                    gradient_norm,
                    last_iterate,
                    trace: &trace,
                };
                let path = args.out.join(DIAGNOSTICS_FILE);
                let text = serde_json::to_string_pretty(&diag).map_err(|err| Failure::Io(err.to_string()))?;
                fs::write(&path, text + "\n").map_err(|err| Failure::io(&path, err))?;
                return Err(Failure::NonConvergence {
                    detail: e.to_string(),
                    diagnostics: path,
                });
            }
            Err(e) => return Err(e.into()),
        };
        if !fitted.convergence.gradient_check_passed {
            warn!("gradient check at the optimum failed (error {:.3e})", fitted.convergence.gradient_check_error);
        }
        strata.push(StratumFit { stratum, fitted });
    }
    let output = FitOutput {
        config,
        stratify_by: args.stratify_by.clone(),
        strata,
    };
    let text = serde_json::to_string_pretty(&output).map_err(|e| Failure::Config(format!("cannot serialize fit: {e}")))?;
    write_text(&args.out, FIT_FILE, &(text + "\n"))?;
    write_hazard_ratios_csv(create(&args.out, "hazard_ratios.csv")?, &output.strata)?;
    write_smoothing_csv(create(&args.out, "smoothing.csv")?, &grid_rows)?;
    manifest.finish(&args.out, &[FIT_FILE.into(), "hazard_ratios.csv".into(), "smoothing.csv".into()])?;
    Ok(())
}

/// `start:end:step`, inclusive of `end` up to rounding.
pub fn parse_ages(spec: &str) -> CmdResult<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Config(format!("ages `{spec}` must be start:end:step")))?;
    let [start, end, step] = parts[..] else {
        return Err(Failure::Config(format!("ages `{spec}` must be start:end:step")));
    };
    if !(step > 0.0 && end >= start && start.is_finite() && end.is_finite()) {
        return Err(Failure::Config(format!("ages `{spec}` need step > 0 and end >= start")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

/// `name=value,name=value`.
pub fn parse_profile(spec: &str) -> CmdResult<Vec<(String, f64)>> {
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Failure::Config(format!("profile entry `{pair}` must be name=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Failure::Config(format!("profile value `{v}` is not a number")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

pub fn predict(args: &PredictArgs) -> CmdResult<()> {
    require(&args.fit, "run `illdeath fit` first")?;
    let (output, _): (FitOutput, _) = read_json(&args.fit)?;
    let ages = parse_ages(&args.ages)?;
    let mut profiles = args.profiles.iter().map(|p| parse_profile(p)).collect::<CmdResult<Vec<_>>>()?;
    if profiles.is_empty() {
        profiles.push(Vec::new());
    }
    let bands = args.draws > 0;
    if bands && args.draws < probabilities::MIN_DRAWS {
        return Err(Failure::Config(format!("--draws must be 0 or at least {}", probabilities::MIN_DRAWS)));
    }
    let settings = json!({
        "base_age": args.base_age,
        "ages": ages,
        "profiles": profiles,
        "draws": args.draws,
        "lifetime_age": args.lifetime_age,
        "limit_age": args.limit_age,
    });
    create_out(&args.out)?;
    let mut manifest = ManifestBuilder::new("predict", settings_hash(&settings), settings, bands.then_some(args.seed));
    manifest.input(&args.fit)?;

    let spec = ConditionalTableSpec {
        lifetime_age: args.lifetime_age,
        limit_age: args.limit_age,
        ..ConditionalTableSpec::default()
    };
    let mut curves = Vec::new();
    let mut tables = Vec::new();
    for s in &output.strata {
        for profile in &profiles {
            for q in [Quantity::Prevalence, Quantity::Risk] {
                let mut req = CurveRequest::new(q, args.base_age, ages.clone()).with_profile(profile.clone());
                req.lifetime_age = args.lifetime_age;
                let mut c = if bands {
                    probabilities::confidence_bands(&s.fitted, &req, args.draws, args.seed)?
                } else {
                    probabilities::point_curve(&s.fitted.model, &req)?
                };
                if c.metadata.extrapolated {
                    warn!(
                        "{} curve for {} relies on intensities beyond the spline boundary",
                        q.label(),
                        probabilities::stratum_label(s.stratum.as_deref())
                    );
                }
                c.stratum = s.stratum.clone();
                curves.push(c);
            }
            let mut t = probabilities::conditional_table(&s.fitted, profile, &spec, bands.then_some((args.draws, args.seed)))?;
            t.stratum = s.stratum.clone();
            tables.push(t);
        }
    }
    probabilities::write_curves_csv(create(&args.out, CURVES_FILE)?, &curves)?;
    probabilities::write_conditional_tables_csv(create(&args.out, CONDITIONAL_FILE)?, &tables)?;
    write_hazard_ratios_csv(create(&args.out, "hazard_ratios.csv")?, &output.strata)?;
    manifest.finish(&args.out, &[CURVES_FILE.into(), CONDITIONAL_FILE.into(), "hazard_ratios.csv".into()])?;
    Ok(())
}

pub fn plot(args: &PlotArgs) -> CmdResult<()> {
    require(&args.curves, "run `illdeath predict` first")?;
    let rows = probabilities::read_curves_csv(open(&args.curves)?)?;
    let mut quantities = plot::quantities(&rows);
    if let Some(q) = &args.quantity {
        if !quantities.contains(q) {
            return Err(Failure::Config(format!("quantity `{q}` not in {}; found {:?}", args.curves.display(), quantities)));
        }
        quantities = vec![q.clone()];
    }
    let settings = json!({ "quantity": args.quantity });
    create_out(&args.out)?;
    let mut manifest = ManifestBuilder::new("plot", settings_hash(&settings), settings, None);
    manifest.input(&args.curves)?;
    let mut outputs = Vec::new();
    for q in &quantities {
        let name = format!("{q}.svg");
        let svg = plot::render_svg(q, &plot::series_for(&rows, q));
        write_text(&args.out, &name, &svg)?;
        outputs.push(name);
    }
    manifest.finish(&args.out, &outputs)?;
    Ok(())
}
