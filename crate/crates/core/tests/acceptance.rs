//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p usonic --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use usonic::echo::{simulate_two_way_pair, FrameConfig, NoiseSpec, TwoWayGeometry};
use usonic::experiment::{
    run_oa_experiment, run_velocity_benchmark, ExperimentConfig, SensorSelection, VelocityReport,
};
use usonic::fusion::{is_psd, predict, update, FusionState, ProcessNoise};
use usonic::oa::{speed_for, turn_rate_for, OAConfig, PolicyState};
use usonic::seed::stream;
use usonic::sensors::{covered_range_m, oa_cycle_time, velocity_cycle_time, UltrasonicSensorSpec};
use usonic::signal::OdrDivisor;
use usonic::velocity::{estimate, EstimatorConfig, Method};
use usonic::SPEED_OF_SOUND;

struct Outcome {
    passed: bool,
    detail: String,
}

fn rel(x: f64, target: f64) -> f64 {
    (x - target).abs() / target.abs()
}

fn timing() -> Outcome {
    let c0 = SPEED_OF_SOUND;
    let oa = oa_cycle_time(&UltrasonicSensorSpec::icu30201(OdrDivisor::N4), c0);
    let range = covered_range_m(&UltrasonicSensorSpec::icu30201(OdrDivisor::N4), c0);
    let comm = UltrasonicSensorSpec::icu10201(OdrDivisor::N2).comm_overhead_s;
    let vel_hz = 1.0 / velocity_cycle_time(1.0, c0, comm);
    let checks = [
        ("acoustic", rel(oa.acoustic_s, 27.2e-3) <= 0.03),
        ("total", rel(oa.total_s, 30e-3) <= 0.03),
        ("rate", (oa.rate_hz() - 33.0).abs() <= 1.0),
        ("range", rel(range, 4.66) <= 0.03),
        ("velocity_rate", rel(vel_hz, 66.0) <= 0.03),
    ];
    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome {
        passed: failed.is_empty(),
        detail: format!(
            "acoustic {:.2} ms, total {:.2} ms, {:.1} Hz, range {:.3} m, velocity cycle {:.1} Hz ({:+.1}% vs 66){}",
            oa.acoustic_s * 1e3,
            oa.total_s * 1e3,
            oa.rate_hz(),
            range,
            vel_hz,
            100.0 * (vel_hz / 66.0 - 1.0),
            if failed.is_empty() { String::new() } else { format!("; out of tolerance: {}", failed.join(", ")) }
        ),
    }
}

fn measurement_range() -> Outcome {
    let limit = EstimatorConfig::default().wrap_limit_velocity(175_000.0);
    Outcome {
        passed: (limit - 4.42).abs() < 0.005 && rel(limit, 4.5) <= 0.05,
        detail: format!("wrap limit {limit:.4} m/s, {:.1}% below 4.5", 100.0 * rel(limit, 4.5)),
    }
}

fn pair_frames() -> FrameConfig {
    FrameConfig {
        divisor: OdrDivisor::N4,
        ..FrameConfig::default()
    }
}

fn round_trip() -> Outcome {
    let cfg = pair_frames();
    let approx = EstimatorConfig::default().with_method(Method::Approx);
    let exact = approx.with_method(Method::Exact);
    let mut rng = stream(2024, "acceptance", 3);
    let (mut bad_exact, mut bad_approx) = (0, 0);
    let (mut worst_exact, mut worst_approx) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let v: f64 = rng.random_range(-2.0..=2.0);
        let h: f64 = rng.random_range(0.3..=1.0);
        let g = TwoWayGeometry::level(0.038, h, v).unwrap();
        let (ab, ba) = simulate_two_way_pair(&g, &cfg, &NoiseSpec::noiseless()).unwrap();
        let ex = estimate(&ab, &ba, &exact);
        let ap = estimate(&ab, &ba, &approx);
        let tol = |r: f64| (r * v.abs()).max(0.005);
        if !(ex.valid && (ex.v - v).abs() <= tol(0.02)) {
            bad_exact += 1;
        }
        if !(ap.valid && (ap.v - v).abs() <= tol(0.05)) {
            bad_approx += 1;
        }
        worst_exact = worst_exact.max((ex.v - v).abs() / v.abs().max(0.25));
        worst_approx = worst_approx.max((ap.v - v).abs() / v.abs().max(0.1));
    }
    Outcome {
        passed: bad_exact == 0 && bad_approx == 0,
        detail: format!(
            "exact: {bad_exact}/1000 outside 2% (worst {:.1}%); approx: {bad_approx}/1000 outside 5% (worst {:.2}%)",
            100.0 * worst_exact,
            100.0 * worst_approx
        ),
    }
}

fn height_invariance() -> Outcome {
    let cfg = pair_frames();
    let exact = EstimatorConfig::default().with_method(Method::Exact);
    let approx = exact.with_method(Method::Approx);
    let (mut worst_exact, mut worst_approx) = (0.0f64, 0.0f64);
    for k in -20..=20 {
        let v = k as f64 * 0.1;
        if k == 0 {
            continue;
        }
        let pair = |h: f64| {
            let g = TwoWayGeometry::level(0.038, h, v).unwrap();
            simulate_two_way_pair(&g, &cfg, &NoiseSpec::noiseless()).unwrap()
        };
        let (lo, hi) = (pair(0.3), pair(1.0));
        let diff = |e: &EstimatorConfig| (estimate(&lo.0, &lo.1, e).v - estimate(&hi.0, &hi.1, e).v).abs() / v.abs();
        worst_exact = worst_exact.max(diff(&exact));
        worst_approx = worst_approx.max(diff(&approx));
    }
    Outcome {
        passed: worst_exact < 0.01,
        detail: format!(
            "exact method: max |v(0.3) - v(1.0)| = {:.1}% of v; approx method: {:.3}%",
            100.0 * worst_exact,
            100.0 * worst_approx
        ),
    }
}

fn velocity_reports() -> BTreeMap<&'static str, VelocityReport> {
    ["table", "carpet", "zero_noise"]
        .into_iter()
        .map(|p| {
            let cfg = ExperimentConfig {
                n_runs: 3,
                ..ExperimentConfig::velocity(p)
            };
            (p, run_velocity_benchmark(&cfg).unwrap())
        })
        .collect()
}

fn orderings(reports: &BTreeMap<&str, VelocityReport>) -> Outcome {
    let mse = |p: &str, s: &str| reports[p].mean_mse_of(s).unwrap_or(f64::INFINITY);
    let (tu, to) = (mse("table", "ultrasonic"), mse("table", "optical_flow"));
    let (cu, co) = (mse("carpet", "ultrasonic"), mse("carpet", "optical_flow"));
    let zu = mse("zero_noise", "ultrasonic");
    Outcome {
        passed: 2.0 * tu <= to && 2.0 * co <= cu && zu < 1e-3,
        detail: format!(
            "table US {tu:.4} vs OF {to:.4} ({:.1}x); carpet OF {co:.4} vs US {cu:.4} ({:.1}x); zero-noise US {zu:.2e}",
            to / tu,
            cu / co
        ),
    }
}

fn modality() -> Outcome {
    let run = |sensor| {
        let cfg = ExperimentConfig {
            n_runs: 20,
            ..ExperimentConfig::oa("glass_corridor", sensor)
        };
        run_oa_experiment(&cfg).unwrap()
    };
    let us = run(SensorSelection::Ultrasonic);
    let laser = run(SensorSelection::Laser);
    let causes: Vec<_> = laser.runs.iter().filter_map(|r| r.metrics.crash_cause.as_deref()).collect();
    let all_glass = causes.iter().all(|c| *c == "glass");
    Outcome {
        passed: us.aggregates.success_rate >= 0.9 && laser.aggregates.success_rate <= 0.1 && all_glass,
        detail: format!(
            "ultrasonic success {:.0}%, laser success {:.0}%, laser crash causes {:?}",
            100.0 * us.aggregates.success_rate,
            100.0 * laser.aggregates.success_rate,
            laser.aggregates.crash_causes
        ),
    }
}

fn policy() -> Outcome {
    let cfg = OAConfig::default();
    let ds: Vec<f64> = (0..=500).map(|k| k as f64 * 0.01).collect();
    let monotone = ds.windows(2).all(|w| {
        speed_for(&cfg, Some(w[1])) >= speed_for(&cfg, Some(w[0]))
            && turn_rate_for(&cfg, Some(w[1])) <= turn_rate_for(&cfg, Some(w[0]))
    });

    let mut lock_ok = true;
    let mut redirect_ok = true;
    let mut changes = 0;
    for seed in 0..100u64 {
        // Inside the lock distance the sign never changes.
        let mut p = PolicyState::new(&cfg, stream(seed, "policy", 0));
        let s0 = p.sign();
        let mut t = 0.0;
        while t < 60.0 {
            let c = p.control(&cfg, Some(0.39), t);
            lock_ok &= p.sign() == s0 && (c.yaw_rate == 0.0 || c.yaw_rate.signum() == s0);
            t += 0.0302;
        }
        // Outside it the sign changes only at multiples of the period.
        let mut p = PolicyState::new(&cfg, stream(seed, "policy", 1));
        let mut last = p.sign();
        let dt = 0.0302;
        let mut t = 0.0;
        while t < 60.0 {
            p.control(&cfg, Some(0.8), t);
            if p.sign() != last {
                redirect_ok &= t % cfg.redirect_period_s < dt;
                changes += 1;
                last = p.sign();
            }
            t += dt;
        }
    }
    Outcome {
        passed: monotone && lock_ok && redirect_ok && changes > 0,
        detail: format!(
            "monotone over {} distances: {monotone}; lock held: {lock_ok}; {changes} redirects, all at 10 s multiples: {redirect_ok}",
            ds.len()
        ),
    }
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let oa = ExperimentConfig {
        n_runs: 4,
        max_duration_s: 60.0,
        seed: 11,
        ..ExperimentConfig::oa("office", SensorSelection::Ultrasonic)
    };
    let vel = ExperimentConfig {
        n_runs: 2,
        max_duration_s: 20.0,
        seed: 11,
        ..ExperimentConfig::velocity("table")
    };
    let mut compared = 0;
    let mut differing = Vec::new();
    for (name, cfg) in [("oa", &oa), ("velocity", &vel)] {
        let dirs: Vec<_> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                usonic::experiment::run_experiment(cfg).unwrap().write(dir.path()).unwrap();
                dir
            })
            .collect();
        let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
        compared += a.len();
        if a.keys().ne(b.keys()) {
            differing.push(format!("{name}: file sets differ"));
        }
        for (path, bytes) in &a {
            if b.get(path) != Some(bytes) {
                differing.push(format!("{name}/{}", path.display()));
            }
        }
    }
    Outcome {
        passed: differing.is_empty() && compared > 0,
        detail: if differing.is_empty() {
            format!("{compared} files byte-identical across reruns")
        } else {
            format!("differing: {}", differing.join(", "))
        },
    }
}

fn fusion(reports: &BTreeMap<&str, VelocityReport>) -> Outcome {
    let mut rng = stream(9, "acceptance", 9);
    let q = ProcessNoise::default();
    let mut s = FusionState::default();
    let mut psd = true;
    for _ in 0..100_000 {
        let dt = rng.random_range(1e-4..0.05);
        s = predict(&s, rng.random_range(-5.0..5.0), dt, &q);
        let r = 10f64.powf(rng.random_range(-6.0..1.0));
        s = update(&s, rng.random_range(-3.0..3.0), r, rng.random_bool(0.7));
        psd &= is_psd(&s.covariance);
    }
    let mut lines = Vec::new();
    let mut fused_ok = true;
    for p in ["table", "carpet"] {
        let m = |src: &str| reports[p].mean_mse_of(src).unwrap_or(f64::INFINITY);
        let best = m("ultrasonic").min(m("optical_flow"));
        fused_ok &= m("fused") <= best;
        lines.push(format!("{p} fused {:.5} vs best raw {best:.5}", m("fused")));
    }
    Outcome {
        passed: psd && fused_ok,
        detail: format!("PSD over 1e5 steps: {psd}; {}", lines.join("; ")),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome, Duration, Duration)> = Vec::new();
    let mut timed = |id, name, limit_s: f64, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let out = f();
        results.push((id, name, out, start.elapsed(), Duration::from_secs_f64(limit_s)));
    };
    timed(1, "timing_arithmetic", 1.0, &mut timing);
    timed(2, "measurement_range", 1.0, &mut measurement_range);
    timed(3, "estimator_round_trip", 10.0, &mut round_trip);
    timed(4, "height_invariance", 5.0, &mut height_invariance);
    let mut reports = BTreeMap::new();
    timed(5, "mse_orderings", 30.0, &mut || {
        reports = velocity_reports();
        orderings(&reports)
    });
    timed(6, "oa_modality_comparison", 60.0, &mut modality);
    timed(7, "oa_policy_invariants", 5.0, &mut policy);
    timed(8, "determinism", 60.0, &mut determinism);
    timed(9, "fusion_sanity", 10.0, &mut || fusion(&reports));

    let mut failures = 0;
    for (id, name, out, elapsed, limit) in &results {
        let in_time = elapsed <= limit;
        let passed = out.passed && in_time;
        failures += usize::from(!passed);
        println!(
            "{} {id} {name}: {} [{:.2} s of {:.0} s{}]",
            if passed { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            limit.as_secs_f64(),
            if in_time { "" } else { ", too slow" }
        );
    }
    println!("{} of {} criteria passed", results.len() - failures, results.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
