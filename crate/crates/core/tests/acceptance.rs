//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use convexity_lab::data::{self, IdxOptions, TeacherSpec};
use convexity_lab::descent::{self, DescentOptions};
use convexity_lab::fixtures;
use convexity_lab::linear::{self, RotationPlan};
use convexity_lab::loss::{self, LossConfig};
use convexity_lab::net::{self, RegionKind};
use convexity_lab::region::{self, ProbeConfig, RegionSpec};
use convexity_lab::rng::stream;
use convexity_lab::trajectory::{self, FlowConfig, SgdConfig};
use convexity_lab::{Architecture, Dataset, Params};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn random_arch(g: &mut ChaCha8Rng, max_hidden: usize, max_width: usize, min_width: usize) -> Architecture {
    let h = g.random_range(1..=max_hidden);
    let mut w = vec![g.random_range(min_width..=max_width)];
    for _ in 0..h {
        w.push(g.random_range(min_width..=max_width));
    }
    w.push(1);
    Architecture::new(w).unwrap()
}

fn random_dataset(g: &mut ChaCha8Rng, n0: usize, n: usize) -> Dataset {
    let inputs = (0..n).map(|_| (0..n0).map(|_| g.random_range(-1.0..1.0)).collect()).collect();
    let labels = (0..n).map(|_| g.random_range(-1.0..2.0)).collect();
    Dataset::new(inputs, labels).unwrap()
}

fn teacher(arch: &str, n: usize, seed: u64, noise: f64) -> (Params, Dataset) {
    let t = data::gen_teacher(&TeacherSpec {
        arch: arch.parse().unwrap(),
        weight_scale: 1.0,
        noise,
        samples: n,
        seed,
        radius: 1.0,
    })
    .unwrap();
    (t.teacher, t.dataset)
}

/// Central differences of `ℓ_λ` in every coordinate.
fn fd_gradient(w: &Params, d: &Dataset, cfg: &LossConfig) -> Vec<f64> {
    let h = 1e-5 * (1.0 + w.norm());
    let mut flat = w.to_flat();
    let arch = w.arch().clone();
    let f = |v: &[f64]| loss::reg_loss(&Params::from_flat(&arch, v).unwrap(), d, cfg).unwrap();
    (0..flat.len())
        .map(|k| {
            let x = flat[k];
            flat[k] = x + h;
            let up = f(&flat);
            flat[k] = x - h;
            let down = f(&flat);
            flat[k] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn c1_gradient() -> Outcome {
    let mut g = stream(101, 0);
    let mut worst = 0.0f64;
    let mut redraws = 0;
    let mut done = 0;
    while done < 200 {
        let arch = random_arch(&mut g, 3, 8, 1);
        let n = g.random_range(1..=32);
        let d = random_dataset(&mut g, arch.input_dim(), n);
        let w = Params::gaussian(&arch, 0.8, &mut g);
        // Finite differences straddling a kink measure the kink, not the gradient.
        if net::preactivation_margin(&w, &d) < 1e-3 {
            redraws += 1;
            continue;
        }
        let cfg = LossConfig::new(g.random_range(0.0..0.5)).unwrap();
        let an = loss::gradient(&w, &d, &cfg).unwrap().to_flat();
        let fd = fd_gradient(&w, &d, &cfg);
        let err: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        worst = worst.max(err / scale);
        done += 1;
    }
    outcome(worst < 1e-6, format!("200 draws ({redraws} redrawn near kinks), worst relative error {worst:.3e} < 1e-6"))
}

fn c2_curvature_floor() -> Outcome {
    let mut g = stream(202, 0);
    let mut violations = 0;
    let mut pairs = 0;
    let mut worst_slack = f64::INFINITY;
    for ds in 0..20u64 {
        let arch = random_arch(&mut g, 3, 6, 1);
        let n = g.random_range(1..=24);
        let d = random_dataset(&mut g, arch.input_dim(), n);
        for k in 0..50u64 {
            let w = Params::gaussian(&arch, g.random_range(0.2..1.5), &mut g);
            let audit = region::audit_curvature_floor(&w, &d, 10, 1000 * ds + k).unwrap();
            violations += audit.violations;
            pairs += audit.trials;
            worst_slack = worst_slack.min(audit.worst_slack);
        }
    }
    let (w, d) = fixtures::t1();
    let floor = region::curvature_floor(&w, &d, 1.0).unwrap();
    let floor_ok = (floor + 1.0).abs() <= 1e-12;
    outcome(
        violations == 0 && pairs == 10_000 && floor_ok,
        format!("{pairs} pairs over 20 datasets, {violations} violations, min slack {worst_slack:.3e}; fixture floor {floor} (|+1| <= 1e-12: {floor_ok})"),
    )
}

fn c3_certification() -> Outcome {
    let lambda = 0.5;
    let theta = 0.1;
    let mut g = stream(303, 0);
    let mut worst = f64::INFINITY;
    let mut found = 0;
    let mut tried = 0;
    let mut max_m = 0;
    let mut failures = 0;
    for (h, arch) in [(1, "4,6,1"), (2, "4,6,5,1"), (3, "4,5,5,4,1")] {
        let (teacher_w, d) = teacher(arch, 20, 30 + h as u64, 0.0);
        let spec = RegionSpec::for_data(lambda, theta, teacher_w.arch(), &d).unwrap();
        max_m = max_m.max(teacher_w.num_params());
        let mut here = 0;
        while here < 50 {
            tried += 1;
            let dir = convexity_lab::rng::unit_direction(teacher_w.arch(), &mut g);
            let w = teacher_w.plus(10f64.powf(g.random_range(-3.0..0.5)), &dir);
            let m = region::u_membership(&w, &d, &spec).unwrap();
            if !m.in_u {
                continue;
            }
            let cert = region::certify(&w, &d, &spec).unwrap();
            worst = worst.min(cert.min_eig);
            if cert.min_eig < theta - 1e-6 {
                failures += 1;
            }
            here += 1;
            found += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{found} in-U points (50 each for H = 1, 2, 3; {tried} drawn), m <= {max_m}, smallest eigenvalue {worst:.6} >= theta - 1e-6 = {}", theta - 1e-6),
    )
}

fn smooth_point(g: &mut ChaCha8Rng) -> (Params, Dataset) {
    loop {
        let arch = random_arch(g, 3, 5, 1);
        let n = g.random_range(1..=16);
        let d = random_dataset(g, arch.input_dim(), n);
        let w = Params::gaussian(&arch, 0.9, g);
        let class = net::region_classify(&w, &d, net::default_boundary_tol(&w)).unwrap();
        if class.kind == RegionKind::SmoothAnalytic && net::preactivation_margin(&w, &d) > 1e-6 {
            return (w, d);
        }
    }
}

fn c4_subharmonic() -> Outcome {
    let mut g = stream(404, 0);
    let mut negative = 0;
    let mut worst_trace = 0.0f64;
    let mut min_lap = f64::INFINITY;
    for _ in 0..1000 {
        let (w, d) = smooth_point(&mut g);
        let lap = loss::laplacian(&w, &d).unwrap();
        min_lap = min_lap.min(lap);
        if lap < 0.0 {
            negative += 1;
        }
        let hess = loss::full_hessian(&w, &d, &LossConfig::unregularized()).unwrap();
        let n = hess.matrix.rows();
        let trace: f64 = (0..n).map(|k| hess.matrix[(k, k)]).sum();
        worst_trace = worst_trace.max((trace - lap).abs() / lap.abs().max(1.0));
    }
    outcome(
        negative == 0 && worst_trace <= 1e-8,
        format!("1000 smooth points, {negative} negative (min {min_lap:.3e}); worst |tr H - laplacian| / max(1, laplacian) = {worst_trace:.3e} <= 1e-8"),
    )
}

fn c5_two_routes() -> Outcome {
    let mut g = stream(505, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (w, d) = smooth_point(&mut g);
        let cfg = LossConfig::new(g.random_range(0.0..0.5)).unwrap();
        let gs = trajectory::gamma_second(&w, &d, &cfg).unwrap();
        worst = worst.max(gs.rel_discrepancy);
    }
    outcome(worst <= 1e-5, format!("1000 smooth points, worst relative discrepancy {worst:.3e} <= 1e-5"))
}

fn c6_gronwall() -> Outcome {
    let lambda = 1.0;
    let arch: Architecture = "3,4,2,1".parse().unwrap();
    let w0 = Params::gaussian(&arch, 1.0, &mut stream(606, 0));
    let bowl = fixtures::origin_dataset(3, 5, 0.0);
    let cfg = LossConfig::new(lambda).unwrap();
    let flow = FlowConfig {
        step: None,
        horizon: 1.0,
        log_every: 1,
    };
    let rec = trajectory::gradient_flow(&w0, &bowl, &cfg, &flow).unwrap();
    let g0 = rec.samples[0].grad_sq;
    let last = rec.samples.last().unwrap();
    let exact = g0 * (-2.0 * lambda * last.t).exp();
    let bowl_err = (last.grad_sq - exact).abs() / exact;
    let bowl_ok = (last.t - 1.0).abs() < 1e-12 && bowl_err <= 1e-6;

    let (_, d) = teacher("3,4,1", 30, 61, 0.05);
    let student = Params::he_init(&"3,6,1".parse().unwrap(), 1.0, &mut stream(607, 0));
    let cfg = LossConfig::new(0.05).unwrap();
    let flow = FlowConfig {
        step: None,
        horizon: 40.0,
        log_every: 1,
    };
    let rec = trajectory::gradient_flow(&student, &d, &cfg, &flow).unwrap();
    let (t0, c) = (rec.t0, rec.c);
    let teacher_ok = match (t0, c) {
        (Some(_), Some(c)) => {
            let report = trajectory::gronwall_check(&rec, c).unwrap();
            let violations = if report.holds { 0 } else { 1 };
            (report.holds, format!("t0 {:?}, C {c:.6}, {} samples checked, worst ratio {:.12}, violations {violations}", t0, report.checked, report.worst_ratio))
        }
        _ => (false, format!("no certified window (t0 {t0:?})")),
    };
    outcome(
        bowl_ok && teacher_ok.0,
        format!("bowl relative error at t=1 {bowl_err:.3e} <= 1e-6; teacher flow: {}", teacher_ok.1),
    )
}

fn c7_linear() -> Outcome {
    let mut g = stream(707, 0);
    let cfg = LossConfig::new(0.1).unwrap();
    let archs = ["3,2,1", "3,3,2,1", "4,3,1", "2,2,2,1", "3,4,3,1"];
    let mut violations = 0;
    let mut converged = 0;
    let mut nonzero_outside = 0;
    let mut total = 0;
    for k in 0..10u64 {
        let arch: Architecture = archs[k as usize % archs.len()].parse().unwrap();
        let n = g.random_range(5..=20);
        let raw = random_dataset(&mut g, arch.input_dim(), n);
        let v: Vec<f64> = (0..arch.input_dim()).map(|_| g.random_range(-1.5..1.5)).collect();
        let labels = raw.inputs().iter().map(|a| a.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() + 0.05 * g.random_range(-1.0..1.0)).collect();
        let d = data::normalize_radius(&Dataset::new(raw.inputs().to_vec(), labels).unwrap(), 1.0).unwrap();
        let rep = linear::critical_search(&arch, &d, &cfg, 32, 7000 + k).unwrap();
        violations += rep.violations;
        converged += rep.converged;
        total += rep.points.len();
        nonzero_outside += rep.points.iter().filter(|p| p.converged && p.nonzero && !p.in_u_lambda).count();
    }

    let mut worst_rot = 0.0f64;
    for _ in 0..100 {
        let arch = random_arch(&mut g, 3, 5, 2);
        let n = g.random_range(1..=16);
        let d = random_dataset(&mut g, arch.input_dim(), n);
        let w = Params::gaussian(&arch, 1.0, &mut g);
        let layer = g.random_range(0..arch.hidden_layers());
        let n = arch.widths()[layer + 1];
        let r = linear::random_rotation(n, 3 * n, &mut g);
        let plan = RotationPlan::new(layer, r).unwrap();
        let rotated = linear::rotate_weights(&w, &plan).unwrap();
        let before = linear::linear_loss(&w, &d, &cfg).unwrap();
        let after = linear::linear_loss(&rotated, &d, &cfg).unwrap();
        worst_rot = worst_rot.max((after - before).abs() / before.abs());
    }
    outcome(
        violations == 0 && worst_rot <= 1e-10,
        format!(
            "{total} starts over 10 datasets, {converged} converged, {violations} nonzero critical points in U(lambda) ({nonzero_outside} nonzero outside); worst rotation |dl|/l {worst_rot:.3e} <= 1e-10"
        ),
    )
}

fn c8_isolation() -> Outcome {
    let mut certified_points = 0;
    let mut nonzero_points = 0;
    let mut failures = 0;
    let mut worst_ratio = f64::INFINITY;
    let mut candidates = 0;
    for (k, (arch, lambda, theta)) in [("3,4,1", 0.6, 0.1), ("3,4,3,1", 0.4, 0.1), ("2,3,1", 1.0, 0.2), ("3,3,3,1", 0.8, 0.2)]
        .into_iter()
        .enumerate()
    {
        for scale in [0.05, 0.3, 1.0] {
            let (_, raw) = teacher(arch, 15, 80 + k as u64, 0.0);
            let d = Dataset::new(raw.inputs().to_vec(), raw.labels().iter().map(|f| f * scale).collect()).unwrap();
            let arch: Architecture = arch.parse().unwrap();
            let spec = RegionSpec::for_data(lambda, theta, &arch, &d).unwrap();
            let cfg = spec.loss_config();
            for s in 0..6u64 {
                candidates += 1;
                let start = Params::he_init(&arch, 1.0, &mut stream(800 + k as u64, s));
                let out = descent::minimize(
                    |p| (loss::reg_loss(p, &d, &cfg).unwrap(), loss::gradient(p, &d, &cfg).unwrap()),
                    start,
                    DescentOptions::default(),
                );
                let probe = ProbeConfig::new(200, 1e-2, 900 + s).with_start_gradient(out.initial_grad_norm);
                if !out.converged || out.grad_norm > probe.grad_tol {
                    continue;
                }
                let cert = region::certify(&out.params, &d, &spec).unwrap();
                if !cert.certified {
                    continue;
                }
                certified_points += 1;
                if !out.params.is_zero() {
                    nonzero_points += 1;
                }
                let rep = region::isolation_probe(&out.params, &d, &spec, &probe).unwrap();
                worst_ratio = worst_ratio.min(rep.min_increase / rep.growth_floor);
                if !rep.meets_growth(1e-3) {
                    failures += 1;
                }
            }
        }
    }
    outcome(
        certified_points > 0 && failures == 0,
        format!(
            "{certified_points} certified critical points of {candidates} descents ({nonzero_points} nonzero), {failures} failures; worst min increase / (theta/2 rho^2) = {worst_ratio:.6} >= 0.999"
        ),
    )
}

fn c9_mnist() -> Outcome {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data");
    let d = data::load_idx(
        format!("{dir}/mnist1000-images.idx3-ubyte"),
        format!("{dir}/mnist1000-labels.idx1-ubyte"),
        IdxOptions { limit: Some(1000), target_digit: 0 },
    )
    .unwrap();
    let arch: Architecture = "784,32,16,1".parse().unwrap();
    let cfg = LossConfig::new(5e-4).unwrap();
    let mut with_t0 = 0;
    let mut fractions = Vec::new();
    let mut bad_percentile = 0;
    let mut records = Vec::new();
    for seed in 0..20u64 {
        let start = Params::he_init(&arch, 1.0, &mut stream(seed, 1000));
        let sgd = SgdConfig::constant(128, 30, 0.05, seed, 2);
        let rec = trajectory::sgd_train(&start, &d, &cfg, &sgd).unwrap();
        if rec.t0.is_some() {
            with_t0 += 1;
            if !trajectory::trial_percentile(&rec, 10.0).is_some_and(|p| p > 0.0) {
                bad_percentile += 1;
            }
        }
        fractions.push(rec.loss_fraction());
        records.push(rec);
    }
    let (mean, std) = trajectory::mean_std(&fractions);
    let pct = trajectory::percentile_stat(&records, 10.0).unwrap();
    let mean_ok = mean.is_some_and(|m| m >= 0.5);
    outcome(
        with_t0 >= 18 && mean_ok && bad_percentile == 0,
        format!(
            "N = {}, t0 in {with_t0}/20 trials (>= 18), loss fraction {:.3} +- {:.3} (>= 0.5), 10th percentile normalized {:.4} +- {:.4}, nonpositive in {bad_percentile} trials",
            d.len(),
            mean.unwrap_or(f64::NAN),
            std.unwrap_or(f64::NAN),
            pct.mean.unwrap_or(f64::NAN),
            pct.std.unwrap_or(f64::NAN),
        ),
    )
}

fn c10_fraction() -> Outcome {
    let a = trajectory::fraction(1.0, 0.4, 0.2);
    let b = trajectory::fraction(0.7, 0.7, 0.1);
    outcome(
        a == Some(0.25) && b == Some(1.0),
        format!("(1.0, 0.4, 0.2) -> {a:?}; t0 = 0 -> {b:?}"),
    )
}

fn main() -> ExitCode {
    // The harness may pass libtest flags; a filter argument selects criteria by number.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("1 gradient vs finite differences", c1_gradient, Duration::from_secs(30)),
        ("2 curvature floor audit", c2_curvature_floor, Duration::from_secs(60)),
        ("3 strong convexity on U(lambda, theta)", c3_certification, Duration::from_secs(120)),
        ("4 subharmonicity", c4_subharmonic, Duration::MAX),
        ("5 two routes to the second derivative", c5_two_routes, Duration::MAX),
        ("6 gradient decay bound", c6_gronwall, Duration::MAX),
        ("7 linear-network audit", c7_linear, Duration::MAX),
        ("8 isolation probe", c8_isolation, Duration::MAX),
        ("9 MNIST subset SGD", c9_mnist, Duration::from_secs(600)),
        ("10 loss change fraction identity", c10_fraction, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let number = name.split(' ').next().unwrap();
        if !filter.is_empty() && !filter.iter().any(|f| f == number) {
            continue;
        }
        let started = Instant::now();
        let out = run();
        let elapsed = started.elapsed();
        let in_time = elapsed <= budget;
        let passed = out.passed && in_time;
        if !passed {
            failed += 1;
        }
        let budget_note = if budget == Duration::MAX {
            String::new()
        } else {
            format!(" (budget {}s)", budget.as_secs())
        };
        println!(
            "criterion {name}: {} | {} | {:.1}s{budget_note}",
            if passed { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
