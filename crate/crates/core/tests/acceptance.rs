//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero when any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use desync_core::analysis::{
    activity_stats, desync_metric, developed_steps, domain_slope, edge_velocity, fit_slopes, iteration_breakdown,
    time_window, wavefront,
};
use desync_core::export::write_trace;
use desync_core::config::TraceFormat;
use desync_core::model::{chebfd_code_balance, predicted_velocity, velocity_from_phase, CHEBFD_CODE_BALANCE_LIMIT};
use desync_core::mpi::Protocol;
use desync_core::{load_config, BandwidthCurve, IntervalKind, SimConfig, Simulation, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn config(name: &str) -> SimConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", &format!("{name}.toml")]
        .iter()
        .collect();
    load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn simulate(cfg: &SimConfig) -> Trace {
    Simulation::new(cfg).and_then(|s| s.run()).expect("simulation")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Random monotone table curve with `cores` points.
fn random_curve(rng: &mut ChaCha8Rng, cores: usize) -> Vec<(usize, f64)> {
    let mut b = 0.0;
    (1..=cores)
        .map(|n| {
            b += rng.random_range(0.0..1.0) * 1e10 * (1.0 / n as f64);
            (n, b.max(1e8))
        })
        .collect()
}

fn c1_lockstep_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let cores = rng.random_range(1..=24usize);
        let threads = rng.random_range(1..=cores);
        let per_domain = rng.random_range(1..=cores / threads);
        let domains = rng.random_range(1..=4usize).max(3 - per_domain.min(2));
        let volume = rng.random_range(1e6..1e9);
        let table = random_curve(&mut rng, cores);
        let rows: Vec<String> = table.iter().map(|(n, b)| format!("[{n}, {b:e}]")).collect();
        let cfg = SimConfig::from_toml_str(&format!(
            "[machine]\ncores_per_domain = {cores}\ndomains_per_node = 2\nbandwidth_table = [{}]\n\
             [processes]\ndomains = {domains}\nper_domain = {per_domain}\nthreads = {threads}\n\
             [workload]\nkind = \"memory_bound\"\nvolume_bytes = {volume}\nsteps = 6\n\
             [comm.pattern]\nboundary = \"periodic\"\n",
            rows.join(", ")
        ))
        .unwrap();
        let curve = BandwidthCurve::from_table(&table).unwrap();
        let n = per_domain * threads;
        let expected = n as f64 * volume / (curve.bandwidth_at(n).unwrap() * threads as f64);
        let trace = simulate(&cfg);
        for r in 0..trace.num_ranks() {
            for i in trace.intervals(r).iter().filter(|i| i.kind == IntervalKind::Compute) {
                worst = worst.max((i.duration() - expected).abs() / expected);
            }
        }
    }
    check(worst <= 1e-12, format!("40 random curves, worst relative error {worst:.2e} (limit 1e-12)"))
}

fn ring_config(d: usize, sigma: u8) -> SimConfig {
    SimConfig::from_toml_str(&format!(
        "[machine]\npreset = \"supermuc-ng-stream-nt\"\n\
         [processes]\ncount = 96\n\
         [workload]\nkind = \"core_bound\"\nduration_s = 0.01\nsteps = 60\n\
         [comm.pattern]\ndistances_up = [{d}]\ndistances_down = [{d}]\nboundary = \"periodic\"\nsigma = {sigma}\n\
         [[inject]]\nrank = 5\nstep = 0\nduration_phases = 25.0\n"
    ))
    .unwrap()
}

fn c2_core_bound_velocity() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for d in 1..=3 {
        for sigma in [1u8, 2] {
            let cfg = ring_config(d, sigma);
            let trace = simulate(&cfg);
            let ev = edge_velocity(&trace, 5, 0, cfg.experiment().unwrap().pattern.boundary).unwrap();
            let v = velocity_from_phase(0.01, 0.0, d as f64, sigma as f64).unwrap();
            let mut worst: f64 = 0.0;
            let mut min_r: f64 = 1.0;
            for dir in [1i8, -1] {
                let Some(b) = ev.branch(dir) else {
                    ok = false;
                    continue;
                };
                for fit in [&b.leading, &b.trailing] {
                    worst = worst.max((fit.slope.abs() - v).abs() / v);
                    min_r = min_r.min(fit.r.abs());
                }
            }
            let meet = ev.meeting_offset.unwrap_or(f64::NAN);
            let good = worst < 0.05 && min_r >= 0.99 && (meet.abs() - 48.0).abs() <= 1.0;
            ok &= good;
            lines.push(format!("d={d} s={sigma}: err {:.1}% |r|>={min_r:.4} meet {meet}", worst * 100.0));
        }
    }
    check(ok, lines.join("; "))
}

/// Longest single wait interval of every rank.
fn longest_wait(trace: &Trace) -> Vec<f64> {
    (0..trace.num_ranks())
        .map(|r| {
            trace
                .intervals(r)
                .iter()
                .filter(|i| i.kind == IntervalKind::Wait)
                .map(|i| i.duration())
                .fold(0.0, f64::max)
        })
        .collect()
}

fn domain_amplitude(trace: &Trace, step: usize, domain: usize) -> f64 {
    let wf = wavefront(trace, step).unwrap();
    let t: Vec<f64> = trace.ranks_on(domain).map(|r| wf.times[r]).collect();
    t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn c3_memory_bound_decay() -> Outcome {
    let mut cfg = config("fig1b");
    // long enough for the idle wave to die out well before the final 20%
    cfg.workload.steps = 200;
    let trace = simulate(&cfg);
    let p = trace.num_ranks();
    let inj = cfg.inject[0].rank;
    let waits = longest_wait(&trace);
    // mean idle-wave height per quarter of the distance range
    let half = p / 2;
    let q = half / 4;
    let quarters: Vec<f64> = (0..4)
        .map(|k| {
            let offs: Vec<usize> = (k * q + 1..=(k + 1) * q).collect();
            let sum: f64 = offs
                .iter()
                .map(|&o| (waits[(inj + o) % p] + waits[(inj + p - o) % p]) / 2.0)
                .sum();
            sum / offs.len() as f64
        })
        .collect();
    let decays = quarters.windows(2).all(|w| w[1] < w[0]);
    let steps = trace.steps();
    let dev = developed_steps(steps);
    let amps: Vec<f64> = dev.clone().map(|s| desync_metric(&trace, s).unwrap()).collect();
    let (lo, hi) = amps.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    let drift = (hi - lo) / hi;
    let inj_domain = trace.rank_domain[inj];
    let per_domain: Vec<f64> = (0..trace.num_domains())
        .filter(|&d| d != inj_domain)
        .map(|d| dev.clone().map(|s| domain_amplitude(&trace, s, d)).fold(f64::INFINITY, f64::min))
        .collect();
    let persists = lo > 0.0 && per_domain.iter().all(|&a| a > 0.0);
    check(
        decays && persists && drift < 0.10,
        format!(
            "wave height by distance quarter {:?} ms; final-20% amplitude {:.4}..{:.4} s (drift {:.1}%); min amplitude on non-injected domains {:?} ms",
            quarters.iter().map(|x| (x * 1e4).round() / 10.0).collect::<Vec<_>>(),
            lo,
            hi,
            drift * 100.0,
            per_domain.iter().map(|x| (x * 1e4).round() / 10.0).collect::<Vec<_>>()
        ),
    )
}

fn c4_saturation_settling() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for name in ["fig4_emmy", "fig4_supermuc", "fig4_slow_triad"] {
        let cfg = config(name);
        let exp = cfg.normalized().unwrap().experiment().unwrap();
        let nsc = exp.domains[0].curve.saturation_point(0.95);
        let trace = simulate(&cfg);
        let window = time_window(&trace, developed_steps(trace.steps())).unwrap();
        let inj_domain = trace.rank_domain[cfg.inject[0].rank];
        let means: Vec<f64> = (0..trace.num_domains())
            .filter(|&d| d != inj_domain)
            .map(|d| activity_stats(&trace, d, window).unwrap().mean)
            .collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let good = (mean - nsc as f64).abs() <= 1.5;
        ok &= good;
        lines.push(format!(
            "{name}: N_sc {nsc}, mean activity {mean:.2} (per domain {:?})",
            means.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
        ));
    }
    check(ok, lines.join("; "))
}

fn c5_slopes() -> Outcome {
    // (a) local slope on the first domain past the injection
    let slope_on = |name: &str| {
        let cfg = config(name);
        let trace = simulate(&cfg);
        let step = trace.steps() - 1;
        let d = trace.rank_domain[cfg.inject[0].rank] + 1;
        domain_slope(&trace, step, d).unwrap().map(|f| f.slope)
    };
    let (a, b) = (slope_on("fig5a"), slope_on("fig5b"));
    let change = match (a, b) {
        (Some(a), Some(b)) => (b - a).abs() / a.abs(),
        _ => f64::INFINITY,
    };
    // (b) two slopes of the asymmetric pattern, measured once the idle wave
    // has annihilated
    let cfg = config("fig5c");
    let trace = simulate(&cfg);
    let step = cfg.output.wavefront_step.unwrap_or(trace.steps() - 1);
    let fits = fit_slopes(&wavefront(&trace, step).unwrap());
    let neg = fits.iter().filter(|f| f.slope < 0.0).map(|f| f.slope.abs()).fold(0.0, f64::max);
    let pos = fits.iter().filter(|f| f.slope > 0.0).map(|f| f.slope).fold(0.0, f64::max);
    let ratio = if neg > 0.0 && pos > 0.0 { pos.max(neg) / pos.min(neg) } else { f64::NAN };
    check(
        change < 0.10 && (ratio - 3.0).abs() <= 0.3,
        format!(
            "(a) slope {:.1} vs {:.1} rank/s, change {:.1}%; (b) step {step} slopes {:?}, ratio {ratio:.2}",
            a.unwrap_or(f64::NAN),
            b.unwrap_or(f64::NAN),
            change * 100.0,
            fits.iter().map(|f| (f.segment, f.slope.round(), (f.r * 1e3).round() / 1e3)).collect::<Vec<_>>()
        ),
    )
}

/// Mean desync over the developed window of the pure-MPI run, and its
/// trace.
fn pure_mpi() -> (SimConfig, Trace) {
    let cfg = config("fig6");
    let trace = simulate(&cfg);
    (cfg, trace)
}

fn mean_desync(trace: &Trace, steps: std::ops::Range<usize>) -> f64 {
    let n = steps.len() as f64;
    steps.map(|s| desync_metric(trace, s).unwrap()).sum::<f64>() / n
}

fn c6_spontaneous_desync(cfg: &SimConfig, trace: &Trace) -> Outcome {
    let steps = trace.steps();
    let dev = developed_steps(steps);
    let plateau = mean_desync(trace, dev.clone());
    let before = mean_desync(trace, dev.start - dev.len()..dev.start);
    let start = desync_metric(trace, 0).unwrap();
    let grows = start < 0.05 * plateau && plateau > 0.0;
    let plateaus = (plateau - before).abs() <= 0.25 * plateau;
    let sync = iteration_breakdown(trace, 0..10).unwrap();
    let late = iteration_breakdown(trace, dev).unwrap();
    let gain = 1.0 - late.total / sync.total;
    check(
        grows && plateaus && (0.02..=0.25).contains(&gain),
        format!(
            "gamma {}, noise {:?} {}; desync {start:.4} -> {plateau:.4} s (previous window {before:.4}); \
             per step {:.2}+{:.2} ms -> {:.2}+{:.2} ms, gain {:.2}%",
            cfg.comm.membw_charge,
            cfg.noise.kind,
            cfg.noise.magnitude,
            sync.compute * 1e3,
            sync.wait * 1e3,
            late.compute * 1e3,
            late.wait * 1e3,
            gain * 100.0
        ),
    )
}

fn c7_hybrid(pure: &Trace) -> Outcome {
    // injected wave with one process per domain
    let cfg = config("fig7a");
    let trace = simulate(&cfg);
    let inj = cfg.inject[0].rank;
    let p = trace.num_ranks();
    let ev = edge_velocity(&trace, inj, 0, cfg.experiment().unwrap().pattern.boundary).unwrap();
    let meet = ev.meeting_offset.unwrap_or(f64::NAN);
    let waits = longest_wait(&trace);
    let along: Vec<f64> = (1..p / 2).map(|o| waits[(inj + o) % p]).collect();
    let undamped = along.iter().all(|&w| (w - along[0]).abs() <= 0.01 * along[0]);
    let annihilates = (meet.abs() - (p / 2) as f64).abs() <= 1.0 && desync_metric(&trace, trace.steps() - 1).unwrap() < 1e-9;

    // noisy hybrid run against the pure-MPI plateau
    let hybrid = simulate(&config("fig7b"));
    let plateau = mean_desync(pure, developed_steps(pure.steps()));
    let limit = 0.05 * plateau;
    let d: Vec<f64> = (0..hybrid.steps()).map(|s| desync_metric(&hybrid, s).unwrap()).collect();
    let mut recovered = true;
    let mut longest = 0usize;
    let mut run = 0usize;
    for &x in &d {
        if x >= limit {
            run += 1;
            longest = longest.max(run);
        } else {
            run = 0;
        }
    }
    if longest > 100 || run > 0 {
        recovered = false;
    }
    let peak = d.iter().cloned().fold(0.0, f64::max);
    check(
        undamped && annihilates && recovered,
        format!(
            "fig7a wave height {:.4}..{:.4} s, meets at offset {meet}; fig7b peak desync {peak:.5} s, \
             limit {limit:.5} s (5% of {plateau:.4}), longest excursion {longest} steps",
            along.iter().cloned().fold(f64::INFINITY, f64::min),
            along.iter().cloned().fold(0.0, f64::max)
        ),
    )
}

fn random_config(rng: &mut ChaCha8Rng) -> SimConfig {
    let cores = rng.random_range(2..=12usize);
    let per_domain = rng.random_range(1..=cores);
    let domains = rng.random_range(1..=3usize).max(3 - per_domain.min(2));
    let p = per_domain * domains;
    let memory = rng.random_bool(0.8);
    let workload = if memory {
        format!("kind = \"memory_bound\"\nvolume_bytes = {}", rng.random_range(1e6..1e8))
    } else {
        format!("kind = \"core_bound\"\nduration_s = {}", rng.random_range(1e-3..1e-2))
    };
    let boundary = if rng.random_bool(0.5) { "open" } else { "periodic" };
    let bytes = [0u64, 1000, 100_000, 1_000_000][rng.random_range(0..4)];
    let sigma = rng.random_range(1..=2u8);
    let up = rng.random_range(1..=2usize).min(p - 1);
    let mut text = format!(
        "[machine]\ncores_per_domain = {cores}\ndomains_per_node = 2\nb1 = {}\nb_sat = {}\n\
         [processes]\ndomains = {domains}\nper_domain = {per_domain}\n\
         [workload]\n{workload}\nsteps = {}\n\
         [comm]\nmembw_charge = {}\n\
         [comm.pattern]\ndistances_up = [{up}]\ndistances_down = [1]\nboundary = \"{boundary}\"\nmessage_bytes = {bytes}\nsigma = {sigma}\n\
         [comm.cost]\nlatency_s = {}\nbandwidth_bytes_per_s = {}\n\
         [noise]\nkind = \"lognormal_multiplicative\"\nmagnitude = {}\nseed = {}\n",
        rng.random_range(2e9..1e10),
        rng.random_range(2e10..6e10),
        rng.random_range(3..12usize),
        [0.0, 0.5, 1.0][rng.random_range(0..3)],
        rng.random_range(0.0..5e-6),
        rng.random_range(1e8..1e10),
        [0.0, 0.02, 0.1][rng.random_range(0..3)],
        rng.random::<u32>()
    );
    if rng.random_bool(0.5) {
        text.push_str(&format!(
            "[[inject]]\nrank = {}\nstep = {}\nduration_phases = {}\n",
            rng.random_range(0..p),
            rng.random_range(0..2usize),
            rng.random_range(0.5..5.0)
        ));
    }
    SimConfig::from_toml_str(&text).unwrap()
}

fn c8_determinism_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_drain = 0.0f64;
    let mut problems = Vec::new();
    for k in 0..100 {
        let cfg = random_config(&mut rng);
        let sim = match Simulation::new(&cfg) {
            Ok(s) => s,
            Err(e) => {
                problems.push(format!("config {k}: {e}"));
                continue;
            }
        };
        let (trace, log) = sim.run_logged().expect("run");
        let (again, _) = sim.run_logged().expect("rerun");
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_trace(&trace, TraceFormat::Jsonl, &mut a).unwrap();
        write_trace(&again, TraceFormat::Jsonl, &mut b).unwrap();
        if a != b || trace != again {
            problems.push(format!("config {k}: traces differ between runs"));
        }
        if let Err(e) = trace.check_invariants() {
            problems.push(format!("config {k}: {e}"));
        }
        for ph in &log.phases {
            worst_drain = worst_drain.max((ph.drained - ph.target).abs() / ph.target.max(1.0));
        }
        if cfg.workload.volume_bytes.is_some() && log.phases.len() != trace.num_ranks() * trace.steps() {
            problems.push(format!("config {k}: {} drained phases", log.phases.len()));
        }
        for m in &log.messages {
            let causal = m.complete + 1e-12 >= m.send_post
                && m.start + 1e-12 >= m.send_post
                && (m.protocol == Protocol::Eager || m.start + 1e-12 >= m.recv_post);
            if !causal {
                problems.push(format!("config {k}: message {}->{} step {} violates causality", m.src, m.dst, m.step));
                break;
            }
        }
    }
    let ok = problems.is_empty() && worst_drain <= 1e-9;
    let mut detail = format!("100 random configs, worst relative drained-bytes error {worst_drain:.2e} (limit 1e-9)");
    if !problems.is_empty() {
        detail.push_str(&format!("; {}", problems.join("; ")));
    }
    check(ok, detail)
}

fn c9_closed_forms() -> Outcome {
    let mut ok = true;
    let cb1 = chebfd_code_balance(1).unwrap();
    ok &= (cb1 - 340.0 / 146.0).abs() <= 1e-15;
    ok &= (chebfd_code_balance(u32::MAX).unwrap() - CHEBFD_CODE_BALANCE_LIMIT).abs() < 1e-6;
    ok &= (CHEBFD_CODE_BALANCE_LIMIT - 80.0 / 146.0).abs() <= 1e-15;
    let curve = BandwidthCurve::analytic(10e9, 40e9, 10).unwrap();
    let base = predicted_velocity(4, 1e8, &curve, 0.002, 1.0, 1.0).unwrap();
    for d in 1..=4 {
        for s in [1.0, 2.0] {
            let v = predicted_velocity(4, 1e8, &curve, 0.002, d as f64, s).unwrap();
            ok &= (v - base * d as f64 * s).abs() <= 1e-12 * v;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let b1 = rng.random_range(1e9..2e10);
        let cores = rng.random_range(1..=32usize);
        let bsat = rng.random_range(b1..b1 * cores as f64 + b1);
        let c = BandwidthCurve::analytic(b1, bsat, cores).unwrap();
        let peak = c.peak();
        let closed = ((0.95 * peak / b1).ceil() as usize).clamp(1, cores);
        ok &= c.saturation_point(0.95) == closed;
    }
    check(
        ok,
        format!(
            "B_c(1) = {cb1:.6} (340/146), limit {CHEBFD_CODE_BALANCE_LIMIT:.6}, velocity linear in d and sigma, 200 analytic N_sc checks"
        ),
    )
}

fn main() {
    let start = Instant::now();
    let (pure_cfg, pure) = pure_mpi();
    let results: Vec<(u32, &str, Outcome)> = std::thread::scope(|s| {
        let pure = &pure;
        let pure_cfg = &pure_cfg;
        let jobs: Vec<(u32, &str, std::thread::ScopedJoinHandle<'_, Outcome>)> = vec![
            (1, "lockstep equivalence", s.spawn(c1_lockstep_equivalence)),
            (2, "core-bound idle-wave velocity", s.spawn(c2_core_bound_velocity)),
            (3, "memory-bound decay and wave persistence", s.spawn(c3_memory_bound_decay)),
            (4, "saturation-point settling", s.spawn(c4_saturation_settling)),
            (5, "slope invariance and 3:1 ratio", s.spawn(c5_slopes)),
            (6, "spontaneous desynchronization", s.spawn(move || c6_spontaneous_desync(pure_cfg, pure))),
            (7, "hybrid suppression", s.spawn(move || c7_hybrid(pure))),
            (8, "determinism and conservation", s.spawn(c8_determinism_conservation)),
            (9, "closed forms", s.spawn(c9_closed_forms)),
        ];
        jobs.into_iter()
            .map(|(n, name, h)| (n, name, h.join().unwrap_or_else(|_| Err("panicked".into()))))
            .collect()
    });
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("criterion {n} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {d}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
