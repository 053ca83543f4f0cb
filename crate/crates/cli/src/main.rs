use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use desync_core::analysis::{analyze, AnalysisReport};
use desync_core::config::TraceFormat;
use desync_core::export::{export_trace, import_trace, TIME_DIGITS};
use desync_core::model::{
    chebfd_code_balance, exec_time, predicted_velocity, BandwidthCurve,
    DEFAULT_SATURATION_FRACTION,
};
use desync_core::render::{render_timeline, RenderOptions};
use desync_core::{load_config, presets, SimConfig, SimError, Simulation, Trace};

#[derive(Parser)]
#[command(name = "desync-sim", version, about = "Simulate idle waves and computational wavefronts in bulk-synchronous MPI programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a config; write trace, report, and timeline.
    Run(RunArgs),
    /// Recompute the report of a trace file.
    Analyze(AnalyzeArgs),
    /// Render a trace file as an SVG timeline.
    Render(RenderArgs),
    /// Evaluate the closed-form models.
    Predict(PredictArgs),
    /// Run a config once per point of a parameter grid.
    Sweep(SweepArgs),
    /// List built-in machine presets.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory (default: `output.dir` or `<config stem>.out`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Trace format, overriding `output.trace_format`.
    #[arg(long, value_parser = parse_format)]
    format: Option<TraceFormat>,
    #[arg(long)]
    no_svg: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    trace: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    wavefront_step: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    trace: PathBuf,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    wavefront_step: Option<usize>,
    /// Time window `start:end` in seconds.
    #[arg(long, value_parser = parse_time_window)]
    time: Option<(f64, f64)>,
    /// Step window `first:last`.
    #[arg(long, value_parser = parse_step_window)]
    steps: Option<(usize, usize)>,
    #[arg(long, default_value_t = 1200.0)]
    width: f64,
    #[arg(long, default_value_t = 6.0)]
    lane_height: f64,
}

#[derive(Args)]
#[group(id = "what", required = true, multiple = false)]
struct PredictWhat {
    /// Phase time n * V / b(n).
    #[arg(long, group = "what")]
    exec_time: bool,
    /// Idle-wave velocity sigma * d / (T_exec + T_comm).
    #[arg(long, group = "what")]
    velocity: bool,
    /// Smallest n reaching `fraction` of the full-domain bandwidth.
    #[arg(long, group = "what")]
    saturation: bool,
    /// Code balance of the blocked Chebyshev filter kernel.
    #[arg(long, group = "what")]
    code_balance: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    what: PredictWhat,
    /// Bytes per process and phase.
    #[arg(long = "V")]
    volume: Option<f64>,
    /// Active cores.
    #[arg(long)]
    n: Option<usize>,
    /// Per-core bandwidth of an analytic curve, bytes/s.
    #[arg(long)]
    b1: Option<f64>,
    /// Saturated bandwidth of an analytic curve, bytes/s.
    #[arg(long)]
    bsat: Option<f64>,
    /// Cores per domain for an analytic curve (default: n).
    #[arg(long)]
    cores: Option<usize>,
    /// Use a built-in machine curve.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    t_comm: f64,
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_SATURATION_FRACTION)]
    fraction: f64,
    /// Block size of the filter kernel.
    #[arg(long)]
    nb: Option<u32>,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    /// `key=a,b,c` with a dotted config key; repeat for a grid.
    #[arg(long, required = true)]
    vary: Vec<String>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<TraceFormat>,
    #[arg(long)]
    no_svg: bool,
}

fn parse_format(s: &str) -> Result<TraceFormat, String> {
    match s {
        "jsonl" => Ok(TraceFormat::Jsonl),
        "csv" => Ok(TraceFormat::Csv),
        _ => Err(format!("unknown format `{s}` (jsonl or csv)")),
    }
}

fn split_pair(s: &str) -> Result<(&str, &str), String> {
    s.split_once(':').ok_or_else(|| format!("expected `a:b`, got `{s}`"))
}

fn parse_time_window(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = split_pair(s)?;
    let a: f64 = a.parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.parse().map_err(|e| format!("{e}"))?;
    if b <= a {
        return Err("window end must exceed its start".into());
    }
    Ok((a, b))
}

fn parse_step_window(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = split_pair(s)?;
    let a: usize = a.parse().map_err(|e| format!("{e}"))?;
    let b: usize = b.parse().map_err(|e| format!("{e}"))?;
    if b < a {
        return Err("last step precedes first".into());
    }
    Ok((a, b))
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Render(a) => cmd_render(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Presets => {
            for name in presets::preset_names() {
                let p = presets::preset(name).expect("built-in");
                println!(
                    "{name}: {} cores/domain, {} domains/node, b(1) = {:.1} GB/s, b(C) = {:.1} GB/s, N_sc = {}",
                    p.cores_per_domain,
                    p.domains_per_node,
                    p.curve.bandwidth_at(1).expect("n = 1") / 1e9,
                    p.curve.peak() / 1e9,
                    p.curve.saturation_point(DEFAULT_SATURATION_FRACTION)
                );
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

/// Runs one config and writes its outputs into `dir`.
fn execute(cfg: &SimConfig, dir: &Path, format: TraceFormat, svg: bool) -> Result<AnalysisReport, Failure> {
    let sim = Simulation::new(cfg).map_err(|e| match e {
        SimError::Config(c) => usage(c),
        other => runtime(other),
    })?;
    let trace = sim.run().map_err(runtime)?.quantized(TIME_DIGITS);
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)?;
    let normalized = sim.config().expect("built from a config");
    fs::write(dir.join("config.toml"), normalized.to_toml_string()).map_err(runtime)?;
    let ext = match format {
        TraceFormat::Jsonl => "jsonl",
        TraceFormat::Csv => "csv",
    };
    export_trace(&trace, format, dir.join(format!("trace.{ext}"))).map_err(runtime)?;
    let report = analyze(&trace, normalized.output.wavefront_step).map_err(runtime)?;
    write_report(&report, &dir.join("report.json")).map_err(runtime)?;
    if svg {
        let opts = RenderOptions {
            wavefront_step: normalized.output.wavefront_step,
            ..RenderOptions::default()
        };
        fs::write(dir.join("timeline.svg"), render_timeline(&trace, &opts)).map_err(runtime)?;
    }
    Ok(report)
}

fn write_report(report: &AnalysisReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn default_out(config: &Path, cfg: &SimConfig) -> PathBuf {
    match &cfg.output.dir {
        Some(d) => PathBuf::from(d),
        None => {
            let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            PathBuf::from(format!("{stem}.out"))
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config).map_err(usage)?;
    let dir = a.out.unwrap_or_else(|| default_out(&a.config, &cfg));
    let format = a.format.unwrap_or(cfg.output.trace_format);
    let report = execute(&cfg, &dir, format, cfg.output.svg && !a.no_svg)?;
    println!(
        "{} ranks, {} steps, makespan {:.6} s, final desync {:.6} s -> {}",
        report.ranks,
        report.steps,
        report.makespan,
        report.wavefront.amplitude,
        dir.display()
    );
    Ok(())
}

fn load_trace(path: &Path) -> Result<Trace, Failure> {
    import_trace(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let trace = load_trace(&a.trace)?;
    let step = a
        .wavefront_step
        .or_else(|| trace.config.as_ref().and_then(|c| c.output.wavefront_step));
    let report = analyze(&trace, step).map_err(runtime)?;
    match a.out {
        Some(p) => write_report(&report, &p).map_err(runtime),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
            Ok(())
        }
    }
}

fn cmd_render(a: RenderArgs) -> Result<(), Failure> {
    let trace = load_trace(&a.trace)?;
    let opts = RenderOptions {
        width: a.width,
        lane_height: a.lane_height,
        time_window: a.time,
        step_window: a.steps,
        wavefront_step: a.wavefront_step,
    };
    let svg = render_timeline(&trace, &opts);
    let out = a.out.unwrap_or_else(|| a.trace.with_extension("svg"));
    fs::write(&out, svg).map_err(runtime)?;
    println!("{}", out.display());
    Ok(())
}

fn predict_curve(a: &PredictArgs) -> Result<BandwidthCurve> {
    if let Some(name) = &a.preset {
        if a.b1.is_some() || a.bsat.is_some() {
            bail!("--preset cannot be combined with --b1/--bsat");
        }
        return presets::preset(name)
            .map(|p| p.curve)
            .ok_or_else(|| anyhow!("unknown preset `{name}`"));
    }
    let (Some(b1), Some(bsat)) = (a.b1, a.bsat) else {
        bail!("a bandwidth curve needs --preset or both --b1 and --bsat");
    };
    let cores = a
        .cores
        .or(a.n)
        .unwrap_or_else(|| (bsat / b1).ceil().max(1.0) as usize);
    Ok(BandwidthCurve::analytic(b1, bsat, cores)?)
}

fn cmd_predict(a: PredictArgs) -> Result<(), Failure> {
    let w = &a.what;
    if w.code_balance {
        let nb = a.nb.ok_or_else(|| usage(anyhow!("--code-balance needs --nb")))?;
        println!("{} B/flop", chebfd_code_balance(nb).map_err(usage)?);
        return Ok(());
    }
    let curve = predict_curve(&a).map_err(usage)?;
    if w.saturation {
        println!("{}", curve.saturation_point(a.fraction));
        return Ok(());
    }
    let n = a.n.ok_or_else(|| usage(anyhow!("--n is required")))?;
    let v = a.volume.ok_or_else(|| usage(anyhow!("--V is required")))?;
    if w.exec_time {
        println!("{} s", exec_time(v, n, &curve).map_err(usage)?);
    } else {
        let vel = predicted_velocity(n, v, &curve, a.t_comm, a.d, a.sigma).map_err(usage)?;
        println!("{vel} ranks/s");
    }
    Ok(())
}

/// Parses a `--vary` value as a TOML scalar, falling back to a string.
fn parse_scalar(s: &str) -> toml::Value {
    let doc = format!("v = {s}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(s.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().ok_or_else(|| anyhow!("empty key"))?;
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` in `{key}` is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn sweep_threads() -> Option<usize> {
    std::env::var("DESYNC_SIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let base = load_config(&a.config).map_err(usage)?;
    let text = fs::read_to_string(&a.config).map_err(usage)?;
    let raw: toml::Table = text.parse().map_err(usage)?;
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for v in &a.vary {
        let (key, values) = v
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--vary expects key=a,b,c, got `{v}`")))?;
        let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
        if values.iter().any(|s| s.is_empty()) {
            return Err(usage(anyhow!("empty value in `{v}`")));
        }
        axes.push((key.trim().to_string(), values));
    }
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let mut configs = Vec::with_capacity(points.len());
    for point in &points {
        let mut t = raw.clone();
        for (k, v) in point {
            set_path(&mut t, k, parse_scalar(v)).map_err(usage)?;
        }
        let text = toml::to_string(&t).map_err(usage)?;
        let cfg = SimConfig::from_toml_str(&text)
            .with_context(|| {
                let label: Vec<String> = point.iter().map(|(k, v)| format!("{k}={v}")).collect();
                format!("sweep point {}", label.join(","))
            })
            .map_err(usage)?;
        configs.push(cfg);
    }
    let root = a.out.unwrap_or_else(|| default_out(&a.config, &base));
    let format = a.format.unwrap_or(base.output.trace_format);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = sweep_threads() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(runtime)?;
    let results: Vec<Result<AnalysisReport, Failure>> = pool.install(|| {
        points
            .par_iter()
            .zip(configs.par_iter())
            .map(|(point, cfg)| {
                let name: Vec<String> = point.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let dir = root.join(name.join(","));
                execute(cfg, &dir, format, cfg.output.svg && !a.no_svg)
            })
            .collect()
    });
    let mut summary = Vec::new();
    for (point, res) in points.iter().zip(results) {
        let report = res?;
        let params: BTreeMap<&str, &str> = point.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        println!(
            "{}: makespan {:.6} s, final desync {:.6} s",
            point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(","),
            report.makespan,
            report.wavefront.amplitude
        );
        summary.push(serde_json::json!({
            "parameters": params,
            "makespan_s": report.makespan,
            "final_desync_s": report.wavefront.amplitude,
            "slopes": report.slopes,
        }));
    }
    fs::create_dir_all(&root).map_err(runtime)?;
    let mut text = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    text.push('\n');
    fs::write(root.join("sweep.json"), text).map_err(runtime)?;
    Ok(())
}
