use std::path::{Path, PathBuf};

use convexity_lab::linear::{self, CriticalSearchReport, DegeneracyReport, NetMode};
use convexity_lab::loss::{self, LossConfig};
use convexity_lab::net;
use convexity_lab::region::{self, Certificate, CurvatureAudit, IsolationReport, ProbeConfig, RegionSpec};
use convexity_lab::rng;
use convexity_lab::serde_f17;
use convexity_lab::trajectory::{self, FlowConfig, GronwallReport, Interrupted, PercentileStat, SgdConfig, TrajectoryRecord};
use convexity_lab::{Architecture, Params};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::args::{CertifyArgs, FlowArgs, LinearArgs, PlotArgs, SgdArgs};
use crate::inputs;
use crate::plot;
use crate::report::{to_value, RunReport, Status};
use crate::CliError;

pub struct Finished {
    pub report: Value,
    pub status: Status,
}

fn finish<C: Serialize, R: Serialize>(command: &'static str, config: &C, data: Option<inputs::DataSummary>, status: Status, results: R) -> Finished {
    let report = RunReport {
        schema_version: crate::report::SCHEMA_VERSION,
        command,
        config,
        data,
        status,
        results,
    };
    Finished {
        report: to_value(&report),
        status,
    }
}

fn loss_config(lambda: f64) -> Result<LossConfig, CliError> {
    LossConfig::new(lambda).map_err(CliError::from)
}

#[derive(Serialize)]
struct CertifyResults {
    region: net::RegionClass,
    certificate: Certificate,
    #[serde(with = "serde_f17")]
    grad_norm: f64,
    curvature_floor: CurvatureAudit,
    isolation: Option<IsolationReport>,
    isolation_meets_growth: Option<bool>,
}

pub fn certify(a: &CertifyArgs) -> Result<Finished, CliError> {
    if !(a.model.lambda > a.theta && a.theta > 0.0) {
        return Err(CliError::usage(format!(
            "need lambda > theta > 0, got lambda = {}, theta = {}",
            a.model.lambda, a.theta
        )));
    }
    let data = inputs::load(&a.data)?;
    let w = inputs::weights(&a.model, &data)?;
    let d = &data.dataset;
    let spec = RegionSpec::for_data(a.model.lambda, a.theta, w.arch(), d)?;
    let certificate = region::certify(&w, d, &spec)?;
    let region = net::region_classify(&w, d, net::default_boundary_tol(&w))?;
    let grad_norm = loss::gradient(&w, d, &spec.loss_config())?.norm();
    let curvature_floor = region::audit_curvature_floor(&w, d, a.floor_trials, a.model.seed)?;
    let isolation = if grad_norm <= a.critical_tol {
        let probe = ProbeConfig {
            samples: a.probe_samples,
            radius: a.probe_radius,
            seed: a.model.seed,
            grad_tol: a.critical_tol,
        };
        Some(region::isolation_probe(&w, d, &spec, &probe)?)
    } else {
        None
    };
    // Quadratic growth is only promised at certified points.
    let isolation_meets_growth = isolation.as_ref().filter(|_| certificate.certified).map(|r| r.meets_growth(1e-3));
    let failed = !curvature_floor.passed() || isolation_meets_growth == Some(false);
    let status = if failed { Status::PropertyFailure } else { Status::Ok };
    Ok(finish(
        "certify",
        a,
        Some(data.summary),
        status,
        CertifyResults {
            region,
            certificate,
            grad_norm,
            curvature_floor,
            isolation,
            isolation_meets_growth,
        },
    ))
}

#[derive(Serialize)]
pub struct TrialSummary {
    seed: u64,
    #[serde(with = "serde_f17::option")]
    t0: Option<f64>,
    #[serde(with = "serde_f17")]
    t1: f64,
    #[serde(with = "serde_f17")]
    initial_loss: f64,
    #[serde(with = "serde_f17")]
    final_loss: f64,
    #[serde(with = "serde_f17::option")]
    loss_fraction: Option<f64>,
    #[serde(with = "serde_f17::option")]
    percentile: Option<f64>,
    #[serde(with = "serde_f17::option")]
    c: Option<f64>,
    samples: usize,
    boundary_hits: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    gronwall: Option<GronwallReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    csv: Option<PathBuf>,
}

fn summarize(seed: u64, rec: &TrajectoryRecord, p: f64, csv: Option<PathBuf>) -> Result<TrialSummary, CliError> {
    let gronwall = match (rec.step, rec.c) {
        (Some(_), Some(c)) => Some(trajectory::gronwall_check(rec, c)?),
        _ => None,
    };
    Ok(TrialSummary {
        seed,
        t0: rec.t0,
        t1: rec.t1,
        initial_loss: rec.samples[0].loss,
        final_loss: rec.final_loss(),
        loss_fraction: rec.loss_fraction(),
        percentile: trajectory::trial_percentile(rec, p),
        c: rec.c,
        samples: rec.samples.len(),
        boundary_hits: rec.samples.iter().filter(|s| s.boundary_hit).count(),
        gronwall,
        csv,
    })
}

#[derive(Serialize)]
struct Interruption {
    error: String,
    #[serde(with = "serde_f17::option")]
    time: Option<f64>,
    #[serde(with = "serde_f17::option")]
    suggested_step: Option<f64>,
    partial_samples: usize,
}

fn interruption(i: &Interrupted) -> Interruption {
    let (time, suggested_step) = match &i.error {
        convexity_lab::Error::Divergence { time, .. } => (Some(*time), None),
        convexity_lab::Error::NonMonotone { time, suggested_step, .. } => (Some(*time), Some(*suggested_step)),
        _ => (None, None),
    };
    Interruption {
        error: i.error.to_string(),
        time,
        suggested_step,
        partial_samples: i.partial.as_ref().map_or(0, |r| r.samples.len()),
    }
}

fn is_numerical(e: &convexity_lab::Error) -> bool {
    matches!(e, convexity_lab::Error::Divergence { .. } | convexity_lab::Error::NonMonotone { .. })
}

fn write_csv(rec: &TrajectoryRecord, path: &Path) -> Result<(), CliError> {
    rec.write_csv(path).map_err(CliError::from)
}

#[derive(Serialize)]
struct FlowResults {
    #[serde(with = "serde_f17")]
    step: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    trajectory: Option<TrialSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    interrupted: Option<Interruption>,
}

pub fn flow(a: &FlowArgs) -> Result<Finished, CliError> {
    let data = inputs::load(&a.data)?;
    let w = inputs::weights(&a.model, &data)?;
    let cfg = loss_config(a.model.lambda)?;
    let flow = FlowConfig {
        step: a.step,
        horizon: a.horizon,
        log_every: a.log_every,
    };
    match trajectory::gradient_flow(&w, &data.dataset, &cfg, &flow) {
        Ok(rec) => {
            if let Some(p) = &a.csv {
                write_csv(&rec, p)?;
            }
            let summary = summarize(a.model.seed, &rec, a.percentile, a.csv.clone())?;
            let failed = a.strict && summary.gronwall.as_ref().is_some_and(|g| !g.holds);
            let status = if failed { Status::PropertyFailure } else { Status::Ok };
            let step = rec.step.unwrap_or(f64::NAN);
            Ok(finish("flow", a, Some(data.summary), status, FlowResults { step, trajectory: Some(summary), interrupted: None }))
        }
        Err(i) if is_numerical(&i.error) => {
            if let (Some(p), Some(partial)) = (&a.csv, &i.partial) {
                write_csv(partial, p)?;
            }
            let step = i.partial.as_ref().and_then(|r| r.step).unwrap_or(f64::NAN);
            let results = FlowResults {
                step,
                trajectory: None,
                interrupted: Some(interruption(&i)),
            };
            Ok(finish("flow", a, Some(data.summary), Status::Divergence, results))
        }
        Err(i) => Err(i.error.into()),
    }
}

/// `RATE` or `EPOCH:RATE,EPOCH:RATE,...`.
pub fn parse_schedule(s: &str) -> Result<Vec<(usize, f64)>, CliError> {
    let bad = || CliError::usage(format!("bad learning-rate schedule {s:?}"));
    if let Ok(rate) = s.trim().parse::<f64>() {
        return Ok(vec![(0, rate)]);
    }
    s.split(',')
        .map(|part| {
            let (e, r) = part.split_once(':').ok_or_else(bad)?;
            Ok((e.trim().parse().map_err(|_| bad())?, r.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

#[derive(Serialize)]
struct SgdAggregate {
    trials: usize,
    with_t0: usize,
    #[serde(with = "serde_f17::option")]
    loss_fraction_mean: Option<f64>,
    #[serde(with = "serde_f17::option")]
    loss_fraction_std: Option<f64>,
    percentile: PercentileStat,
}

#[derive(Serialize)]
struct SgdResults {
    per_trial: Vec<TrialSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregate: Option<SgdAggregate>,
    interrupted: Vec<(u64, Interruption)>,
}

pub fn sgd(a: &SgdArgs, jobs: usize) -> Result<Finished, CliError> {
    if a.trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let data = inputs::load(&a.data)?;
    let base = inputs::weights(&a.model, &data)?;
    let cfg = loss_config(a.model.lambda)?;
    let schedule = parse_schedule(&a.lr)?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    }
    let seeds: Vec<u64> = (0..a.trials as u64).map(|k| a.model.seed + k).collect();
    let run = |seed: u64| {
        let start = if a.model.weights == "random" {
            Params::he_init(base.arch(), 1.0, &mut rng::stream(seed, 0))
        } else {
            base.clone()
        };
        let sgd = SgdConfig {
            batch_size: a.batch_size,
            epochs: a.epochs,
            schedule: schedule.clone(),
            seed,
            log_every: a.log_every,
        };
        (seed, trajectory::sgd_train(&start, &data.dataset, &cfg, &sgd))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let mut outcomes: Vec<_> = pool.install(|| seeds.par_iter().map(|&s| run(s)).collect());
    outcomes.sort_by_key(|o| o.0);

    let mut per_trial = Vec::new();
    let mut records = Vec::new();
    let mut interrupted = Vec::new();
    for (seed, outcome) in outcomes {
        let csv = a.out_dir.as_ref().map(|d| d.join(format!("trial-{seed}.csv")));
        match outcome {
            Ok(rec) => {
                if let Some(p) = &csv {
                    write_csv(&rec, p)?;
                }
                per_trial.push(summarize(seed, &rec, a.percentile, csv)?);
                records.push(rec);
            }
            Err(i) if is_numerical(&i.error) => {
                if let (Some(p), Some(partial)) = (&csv, &i.partial) {
                    write_csv(partial, p)?;
                }
                interrupted.push((seed, interruption(&i)));
            }
            Err(i) => return Err(i.error.into()),
        }
    }
    let aggregate = if records.is_empty() {
        None
    } else {
        let fractions: Vec<Option<f64>> = records.iter().map(|r| r.loss_fraction()).collect();
        let (mean, std) = trajectory::mean_std(&fractions);
        Some(SgdAggregate {
            trials: records.len(),
            with_t0: records.iter().filter(|r| r.t0.is_some()).count(),
            loss_fraction_mean: mean,
            loss_fraction_std: std,
            percentile: trajectory::percentile_stat(&records, a.percentile)?,
        })
    };
    let status = if interrupted.is_empty() { Status::Ok } else { Status::Divergence };
    Ok(finish(
        "sgd",
        a,
        Some(data.summary),
        status,
        SgdResults {
            per_trial,
            aggregate,
            interrupted,
        },
    ))
}

#[derive(Serialize)]
struct LinearResults {
    search: CriticalSearchReport,
    degeneracy: Vec<(usize, DegeneracyReport)>,
}

pub fn linear_audit(a: &LinearArgs) -> Result<Finished, CliError> {
    let arch: Architecture = a.arch.parse()?;
    if !arch.hidden_widths_exceed_one() {
        return Err(CliError::usage(format!(
            "linear audit needs every hidden width > 1 (the rotation argument requires n_i > 1), got {arch}"
        )));
    }
    let data = inputs::load(&a.data)?;
    let cfg = loss_config(a.lambda)?;
    let angles: Vec<f64> = a
        .angles
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::usage(format!("bad angle {s:?}"))))
        .collect::<Result<_, _>>()?;
    let search = linear::critical_search(&arch, &data.dataset, &cfg, a.starts, a.seed)?;
    let degeneracy = search
        .points
        .iter()
        .filter(|p| p.converged && p.nonzero)
        .map(|p| Ok((p.start, linear::degeneracy_audit(&p.params, &data.dataset, &cfg, &angles, NetMode::Linear)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let failed = !search.passed() || degeneracy.iter().any(|(_, d)| !d.all_hold);
    let status = if failed { Status::PropertyFailure } else { Status::Ok };
    Ok(finish("linear-audit", a, Some(data.summary), status, LinearResults { search, degeneracy }))
}

#[derive(Serialize)]
struct PlotEntry {
    input: PathBuf,
    output: PathBuf,
    #[serde(with = "serde_f17::option")]
    t0: Option<f64>,
    #[serde(with = "serde_f17::option")]
    loss_fraction: Option<f64>,
    clipped: usize,
    #[serde(with = "serde_f17::option")]
    max_plotted: Option<f64>,
}

#[derive(Serialize)]
struct PlotResults {
    series: Vec<PlotEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    histogram: Option<PathBuf>,
    histogram_entries: usize,
}

pub fn plot(a: &PlotArgs) -> Result<Finished, CliError> {
    if !(a.clip.is_finite()) {
        return Err(CliError::usage("--clip must be finite"));
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::usage(format!("{}: {e}", a.out_dir.display())))?;
    let mut series = Vec::new();
    let mut fractions = Vec::new();
    for input in &a.inputs {
        if !input.exists() {
            return Err(CliError::usage(format!("{}: no such file", input.display())));
        }
        let samples = trajectory::read_trajectory_csv(input)?;
        let t0 = trajectory::detect_t0(&samples);
        let loss_fraction = t0.and_then(|t0| {
            let at = samples.iter().find(|s| s.t == t0)?;
            trajectory::fraction(samples[0].loss, at.loss, samples.last()?.loss)
        });
        let stem = input.file_stem().map_or_else(|| "trajectory".into(), |s| s.to_string_lossy().into_owned());
        let p = plot::timeseries(&samples, t0, a.clip, &stem);
        let output = a.out_dir.join(format!("{stem}.svg"));
        std::fs::write(&output, &p.svg).map_err(|e| CliError::usage(format!("{}: {e}", output.display())))?;
        fractions.extend(loss_fraction);
        series.push(PlotEntry {
            input: input.clone(),
            output,
            t0,
            loss_fraction,
            clipped: p.clipped,
            max_plotted: p.max_plotted,
        });
    }
    let histogram = if a.inputs.len() > 1 {
        let out = a.out_dir.join("loss-fractions.svg");
        let svg = plot::histogram(&fractions, a.bins, "loss change fractions");
        std::fs::write(&out, svg).map_err(|e| CliError::usage(format!("{}: {e}", out.display())))?;
        Some(out)
    } else {
        None
    };
    Ok(finish(
        "plot",
        a,
        None,
        Status::Ok,
        PlotResults {
            series,
            histogram,
            histogram_entries: fractions.len(),
        },
    ))
}
