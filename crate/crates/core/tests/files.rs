use std::path::PathBuf;

use desync_core::analysis::analyze;
use desync_core::config::TraceFormat;
use desync_core::export::{export_trace, import_trace};
use desync_core::{load_config, Simulation};

fn configs() -> Vec<PathBuf> {
    let dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs"].iter().collect();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    paths
}

#[test]
fn shipped_configs_load_and_resolve() {
    let paths = configs();
    assert!(paths.len() >= 9);
    for p in paths {
        let c = load_config(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        c.experiment().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let again = desync_core::SimConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again, c, "{}", p.display());
    }
}

#[test]
fn trace_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = load_config(configs().iter().find(|p| p.ends_with("fig1b.toml")).unwrap()).unwrap();
    c.workload.steps = 12;
    let trace = Simulation::new(&c).unwrap().run().unwrap();
    for format in [TraceFormat::Jsonl, TraceFormat::Csv] {
        let path = dir.path().join(format!("trace.{format:?}"));
        export_trace(&trace, format, &path).unwrap();
        let back = import_trace(&path).unwrap();
        assert_eq!(back.num_ranks(), trace.num_ranks());
        assert_eq!(back.steps(), trace.steps());
        for r in 0..trace.num_ranks() {
            for (a, b) in back.intervals(r).iter().zip(trace.intervals(r)) {
                assert_eq!(a.kind, b.kind);
                assert!((a.end - b.end).abs() <= 1e-8 * b.end.abs().max(1e-9));
            }
        }
        let path2 = dir.path().join("again");
        export_trace(&back, format, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        let (a, b) = (analyze(&back, Some(5)).unwrap(), analyze(&import_trace(&path2).unwrap(), Some(5)).unwrap());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn missing_file_is_an_error() {
    assert!(load_config("/nonexistent/config.toml").is_err());
    assert!(import_trace("/nonexistent/trace.jsonl").is_err());
}
