//! Experiment configuration: TOML loading, validation, and resolution into
//! the concrete machine layout the engine runs on.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    exec_time, BandwidthCurve, Boundary, CommPattern, ContentionDomain, ProcessSpec, WorkloadKind,
    WorkloadSpec, DEFAULT_EAGER_THRESHOLD,
};
use crate::mpi::CommCostModel;
use crate::perturbation::{Injection, InjectionLength, NoiseModel};
use crate::presets;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("oversubscribed: {reason}")]
    Oversubscribed { reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub machine: MachineConfig,
    pub processes: ProcessConfig,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub comm: CommConfig,
    #[serde(default)]
    pub inject: Vec<InjectionConfig>,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cores_per_domain: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains_per_node: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_table: Option<Vec<(usize, f64)>>,
    /// Per-core bandwidth of an analytic curve, bytes/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b1: Option<f64>,
    /// Saturated bandwidth of an analytic curve, bytes/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_sat: Option<f64>,
    /// Machine size; when unset, as many nodes as the process layout needs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProcessConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Number of contention domains to fill; `count = domains * per_domain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_domain: Option<usize>,
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKindName {
    MemoryBound,
    CoreBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub kind: WorkloadKindName,
    /// Bytes per process and step (memory-bound).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_bytes: Option<f64>,
    /// Bytes per step summed over all processes (memory-bound); split evenly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_volume_bytes: Option<f64>,
    /// Seconds per process and step (core-bound).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommConfig {
    #[serde(default)]
    pub pattern: PatternConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default = "default_eager_threshold")]
    pub eager_threshold_bytes: u64,
    #[serde(default)]
    pub membw_charge: f64,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            pattern: PatternConfig::default(),
            cost: CostConfig::default(),
            eager_threshold_bytes: DEFAULT_EAGER_THRESHOLD,
            membw_charge: 0.0,
        }
    }
}

fn default_eager_threshold() -> u64 {
    DEFAULT_EAGER_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConfig {
    #[serde(default = "unit_offsets")]
    pub distances_up: Vec<usize>,
    #[serde(default = "unit_offsets")]
    pub distances_down: Vec<usize>,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub message_bytes: u64,
    #[serde(default = "default_sigma")]
    pub sigma: u8,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            distances_up: unit_offsets(),
            distances_down: unit_offsets(),
            boundary: Boundary::Open,
            message_bytes: 0,
            sigma: 1,
        }
    }
}

fn unit_offsets() -> Vec<usize> {
    vec![1]
}

fn default_sigma() -> u8 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default)]
    pub latency_s: f64,
    #[serde(default = "default_net_bandwidth")]
    pub bandwidth_bytes_per_s: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            latency_s: 0.0,
            bandwidth_bytes_per_s: default_net_bandwidth(),
        }
    }
}

fn default_net_bandwidth() -> f64 {
    1.0e10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    pub rank: usize,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_phases: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    #[default]
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default)]
    pub trace_format: TraceFormat,
    #[serde(default = "yes")]
    pub svg: bool,
    /// Step whose wavefront is overlaid on the SVG timeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavefront_step: Option<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            trace_format: TraceFormat::Jsonl,
            svg: true,
            wavefront_step: None,
        }
    }
}

fn yes() -> bool {
    true
}

/// Fully resolved experiment: concrete domains, placement, and models.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub domains: Vec<ContentionDomain>,
    pub processes: Vec<ProcessSpec>,
    pub workload: WorkloadSpec,
    pub pattern: CommPattern,
    pub cost: CommCostModel,
    pub injections: Vec<Injection>,
    pub noise: NoiseModel,
}

impl Experiment {
    pub fn ranks(&self) -> usize {
        self.processes.len()
    }

    pub fn threads(&self) -> usize {
        self.processes.first().map_or(1, |p| p.threads)
    }

    /// Cores occupied by the processes placed on `domain`.
    pub fn occupied_cores(&self, domain: usize) -> usize {
        self.processes
            .iter()
            .filter(|p| p.domain == domain)
            .map(|p| p.threads)
            .sum()
    }

    /// Unperturbed compute phase of `rank` when its whole domain computes in
    /// lockstep.
    pub fn lockstep_phase(&self, rank: usize) -> f64 {
        let p = &self.processes[rank];
        match self.workload.kind {
            WorkloadKind::CoreBound { seconds } => seconds,
            WorkloadKind::MemoryBound { volume_bytes } => {
                let active = self.occupied_cores(p.domain);
                let curve = &self.domains[p.domain].curve;
                // each process drains b(A) * t / A, so its phase is V * A / (b(A) * t)
                exec_time(volume_bytes, active, curve).expect("validated layout")
                    / p.threads as f64
            }
        }
    }
}

impl SimConfig {
    /// Parses and validates TOML text. The returned config has every default
    /// filled in explicitly.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: SimConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        raw.normalized()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Validates the config and returns it with derived fields made explicit.
    pub fn normalized(&self) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        let machine = cfg.resolve_machine()?;
        let threads = cfg.processes.threads;
        if threads == 0 {
            return Err(invalid("processes.threads", "must be at least 1"));
        }
        let cores = machine.curve.cores();
        let per_domain = match cfg.processes.per_domain {
            Some(0) => return Err(invalid("processes.per_domain", "must be at least 1")),
            Some(n) => n,
            None => (cores / threads).max(1),
        };
        if per_domain * threads > cores {
            return Err(ConfigError::Oversubscribed {
                reason: format!(
                    "{per_domain} processes x {threads} threads per domain exceed {cores} cores per domain"
                ),
            });
        }
        let count = match (cfg.processes.count, cfg.processes.domains) {
            (Some(c), Some(d)) if c != d * per_domain => {
                return Err(invalid(
                    "processes.count",
                    format!("{c} disagrees with domains x per_domain = {}", d * per_domain),
                ))
            }
            (Some(c), _) => c,
            (None, Some(d)) => d * per_domain,
            (None, None) => {
                return Err(invalid("processes.count", "either count or domains must be set"))
            }
        };
        if count == 0 {
            return Err(invalid("processes.count", "must be at least 1"));
        }
        let domains_needed = count.div_ceil(per_domain);
        let nodes_needed = domains_needed.div_ceil(machine.domains_per_node);
        if let Some(nodes) = cfg.machine.nodes {
            let total = nodes * machine.domains_per_node * cores;
            if count * threads > total {
                return Err(ConfigError::Oversubscribed {
                    reason: format!(
                        "{count} processes x {threads} threads need more than the {total} cores of {nodes} nodes"
                    ),
                });
            }
            if nodes_needed > nodes {
                return Err(ConfigError::Oversubscribed {
                    reason: format!(
                        "{per_domain} processes per domain need {nodes_needed} nodes, machine has {nodes}"
                    ),
                });
            }
        }
        cfg.processes.count = Some(count);
        cfg.processes.per_domain = Some(per_domain);
        cfg.processes.domains = Some(domains_needed);

        let w = &mut cfg.workload;
        if w.steps == 0 {
            return Err(invalid("workload.steps", "must be at least 1"));
        }
        match w.kind {
            WorkloadKindName::MemoryBound => {
                if w.duration_s.is_some() {
                    return Err(invalid("workload.duration_s", "not allowed for memory_bound"));
                }
                let v = match (w.volume_bytes, w.total_volume_bytes) {
                    (Some(_), Some(_)) => {
                        return Err(invalid(
                            "workload.volume_bytes",
                            "set either volume_bytes or total_volume_bytes, not both",
                        ))
                    }
                    (Some(v), None) => v,
                    (None, Some(t)) => t / count as f64,
                    (None, None) => {
                        return Err(invalid("workload.volume_bytes", "required for memory_bound"))
                    }
                };
                if !(v.is_finite() && v > 0.0) {
                    return Err(invalid("workload.volume_bytes", "must be positive"));
                }
                w.volume_bytes = Some(v);
                w.total_volume_bytes = None;
            }
            WorkloadKindName::CoreBound => {
                if w.volume_bytes.is_some() || w.total_volume_bytes.is_some() {
                    return Err(invalid("workload.volume_bytes", "not allowed for core_bound"));
                }
                match w.duration_s {
                    Some(d) if d.is_finite() && d > 0.0 => {}
                    Some(_) => return Err(invalid("workload.duration_s", "must be positive")),
                    None => return Err(invalid("workload.duration_s", "required for core_bound")),
                }
            }
        }

        let c = &mut cfg.comm;
        let p = &mut c.pattern;
        p.distances_up.sort_unstable();
        p.distances_up.dedup();
        p.distances_down.sort_unstable();
        p.distances_down.dedup();
        for (field, set) in [
            ("comm.pattern.distances_up", &p.distances_up),
            ("comm.pattern.distances_down", &p.distances_down),
        ] {
            if let Some(&bad) = set.iter().find(|&&d| d == 0 || d >= count) {
                return Err(invalid(field, format!("offset {bad} must satisfy 1 <= d < {count}")));
            }
        }
        if p.sigma != 1 && p.sigma != 2 {
            return Err(invalid("comm.pattern.sigma", "must be 1 or 2"));
        }
        if !(c.cost.latency_s.is_finite() && c.cost.latency_s >= 0.0) {
            return Err(invalid("comm.cost.latency_s", "must be non-negative"));
        }
        if !(c.cost.bandwidth_bytes_per_s > 0.0) {
            return Err(invalid("comm.cost.bandwidth_bytes_per_s", "must be positive"));
        }
        if !(0.0..=1.0).contains(&c.membw_charge) {
            return Err(invalid("comm.membw_charge", "must lie in [0, 1]"));
        }

        for (i, inj) in cfg.inject.iter().enumerate() {
            let field = format!("inject[{i}]");
            match (inj.duration_phases, inj.duration_seconds) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(invalid(
                        &field,
                        "exactly one of duration_phases / duration_seconds is required",
                    ))
                }
                (Some(d), None) | (None, Some(d)) if !(d.is_finite() && d > 0.0) => {
                    return Err(invalid(&field, "duration must be positive"))
                }
                _ => {}
            }
            if inj.rank >= count {
                return Err(invalid(&field, format!("rank {} outside 0..{count}", inj.rank)));
            }
            if inj.step >= cfg.workload.steps {
                return Err(invalid(
                    &field,
                    format!("step {} outside 0..{}", inj.step, cfg.workload.steps),
                ));
            }
        }
        let mut slots = BTreeSet::new();
        for inj in &cfg.inject {
            if !slots.insert((inj.rank, inj.step)) {
                return Err(invalid(
                    "inject",
                    format!("overlapping injections on rank {}, step {}", inj.rank, inj.step),
                ));
            }
        }
        cfg.noise
            .validate()
            .map_err(|e| invalid("noise.magnitude", e.to_string()))?;
        Ok(cfg)
    }

    fn resolve_machine(&mut self) -> Result<ResolvedMachine, ConfigError> {
        let m = &mut self.machine;
        if let Some(name) = &m.preset {
            if m.bandwidth_table.is_some() || m.b1.is_some() || m.b_sat.is_some() {
                return Err(invalid(
                    "machine.preset",
                    "a preset cannot be combined with an inline bandwidth curve",
                ));
            }
            let p = presets::preset(name).ok_or_else(|| {
                invalid(
                    "machine.preset",
                    format!(
                        "unknown preset `{name}` (known: {})",
                        presets::preset_names().collect::<Vec<_>>().join(", ")
                    ),
                )
            })?;
            if let Some(c) = m.cores_per_domain {
                if c != p.cores_per_domain {
                    return Err(invalid(
                        "machine.cores_per_domain",
                        format!("preset `{name}` has {} cores per domain", p.cores_per_domain),
                    ));
                }
            }
            let dpn = m.domains_per_node.unwrap_or(p.domains_per_node);
            if dpn == 0 {
                return Err(invalid("machine.domains_per_node", "must be at least 1"));
            }
            m.cores_per_domain = Some(p.cores_per_domain);
            m.domains_per_node = Some(dpn);
            return Ok(ResolvedMachine {
                curve: p.curve,
                domains_per_node: dpn,
            });
        }
        let curve = match (&m.bandwidth_table, m.b1, m.b_sat) {
            (Some(table), None, None) => BandwidthCurve::from_table(table)
                .map_err(|e| invalid("machine.bandwidth_table", e.to_string()))?,
            (None, Some(b1), Some(bsat)) => {
                let cores = m.cores_per_domain.ok_or_else(|| {
                    invalid("machine.cores_per_domain", "required with an analytic curve")
                })?;
                BandwidthCurve::analytic(b1, bsat, cores)
                    .map_err(|e| invalid("machine.b1", e.to_string()))?
            }
            (None, None, None) => {
                return Err(invalid(
                    "machine",
                    "set `preset`, `bandwidth_table`, or `b1` + `b_sat`",
                ))
            }
            _ => {
                return Err(invalid(
                    "machine.bandwidth_table",
                    "use either a table or b1 + b_sat, not both",
                ))
            }
        };
        if let Some(c) = m.cores_per_domain {
            if c != curve.cores() {
                return Err(invalid(
                    "machine.cores_per_domain",
                    format!("bandwidth table covers {} cores, not {c}", curve.cores()),
                ));
            }
        }
        let dpn = m.domains_per_node.unwrap_or(2);
        if dpn == 0 {
            return Err(invalid("machine.domains_per_node", "must be at least 1"));
        }
        m.cores_per_domain = Some(curve.cores());
        m.domains_per_node = Some(dpn);
        Ok(ResolvedMachine {
            curve,
            domains_per_node: dpn,
        })
    }

    /// Resolves a normalized config into concrete domains and processes.
    pub fn experiment(&self) -> Result<Experiment, ConfigError> {
        let cfg = self.normalized()?;
        let machine = cfg.clone().resolve_machine()?;
        let count = cfg.processes.count.expect("normalized");
        let per_domain = cfg.processes.per_domain.expect("normalized");
        let threads = cfg.processes.threads;
        let n_domains = cfg.processes.domains.expect("normalized");
        let domains = (0..n_domains)
            .map(|id| ContentionDomain {
                id,
                node: id / machine.domains_per_node,
                curve: machine.curve.clone(),
            })
            .collect();
        let processes = (0..count)
            .map(|rank| ProcessSpec {
                rank,
                domain: rank / per_domain,
                threads,
            })
            .collect();
        let kind = match cfg.workload.kind {
            WorkloadKindName::MemoryBound => WorkloadKind::MemoryBound {
                volume_bytes: cfg.workload.volume_bytes.expect("normalized"),
            },
            WorkloadKindName::CoreBound => WorkloadKind::CoreBound {
                seconds: cfg.workload.duration_s.expect("normalized"),
            },
        };
        let pc = &cfg.comm.pattern;
        let pattern = CommPattern {
            distances_up: pc.distances_up.iter().copied().collect(),
            distances_down: pc.distances_down.iter().copied().collect(),
            boundary: pc.boundary,
            message_bytes: pc.message_bytes,
            eager_threshold: cfg.comm.eager_threshold_bytes,
            sigma: pc.sigma,
        };
        let cost = CommCostModel {
            latency: cfg.comm.cost.latency_s,
            bandwidth: cfg.comm.cost.bandwidth_bytes_per_s,
            membw_charge: cfg.comm.membw_charge,
        };
        let injections = cfg
            .inject
            .iter()
            .map(|i| Injection {
                rank: i.rank,
                step: i.step,
                length: match (i.duration_phases, i.duration_seconds) {
                    (Some(p), _) => InjectionLength::Phases(p),
                    (None, Some(s)) => InjectionLength::Seconds(s),
                    (None, None) => unreachable!("validated"),
                },
            })
            .collect();
        Ok(Experiment {
            domains,
            processes,
            workload: WorkloadSpec {
                kind,
                steps: cfg.workload.steps,
            },
            pattern,
            cost,
            injections,
            noise: cfg.noise,
        })
    }
}

struct ResolvedMachine {
    curve: BandwidthCurve,
    domains_per_node: usize,
}

fn parse_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    ConfigError::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

/// Reads, parses, and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<SimConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    SimConfig::from_toml_str(&text)
}
