//! Domain types and closed-form performance models.
//!
//! Everything here is an immutable value once constructed. The engine and the
//! analysis code check their results against the functions in this module.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of the full-domain bandwidth that counts as "saturated".
pub const DEFAULT_SATURATION_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("active core count {n} outside 1..={cores}")]
    CoreCountOutOfRange { n: usize, cores: usize },
    #[error("bandwidth curve is invalid: {0}")]
    InvalidCurve(String),
    #[error("{0}")]
    Domain(String),
}

/// Memory bandwidth of one contention domain as a function of the number of
/// active cores. Only integral core counts are defined.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthCurve {
    cores: usize,
    form: CurveForm,
}

#[derive(Debug, Clone, PartialEq)]
enum CurveForm {
    /// `table[n - 1]` is b(n).
    Table(Vec<f64>),
    Analytic { per_core: f64, saturated: f64 },
}

impl BandwidthCurve {
    /// Builds a tabulated curve. Points must cover n = 1..C densely (any
    /// order), be positive, and be non-decreasing in n.
    pub fn from_table(points: &[(usize, f64)]) -> Result<Self, ModelError> {
        if points.is_empty() {
            return Err(ModelError::InvalidCurve("empty bandwidth table".into()));
        }
        let mut sorted = points.to_vec();
        sorted.sort_by_key(|&(n, _)| n);
        let mut table = Vec::with_capacity(sorted.len());
        for (i, &(n, b)) in sorted.iter().enumerate() {
            if n != i + 1 {
                return Err(ModelError::InvalidCurve(format!(
                    "table must list n = 1..{} exactly once, found n = {n} at position {}",
                    sorted.len(),
                    i + 1
                )));
            }
            if !(b.is_finite() && b > 0.0) {
                return Err(ModelError::InvalidCurve(format!("b({n}) = {b} is not positive")));
            }
            if let Some(&prev) = table.last() {
                if b < prev {
                    return Err(ModelError::InvalidCurve(format!(
                        "b({n}) = {b} is smaller than b({}) = {prev}",
                        n - 1
                    )));
                }
            }
            table.push(b);
        }
        Ok(Self {
            cores: table.len(),
            form: CurveForm::Table(table),
        })
    }

    /// Builds the analytic curve `b(n) = min(n * per_core, saturated)` for a
    /// domain of `cores` cores.
    pub fn analytic(per_core: f64, saturated: f64, cores: usize) -> Result<Self, ModelError> {
        if cores == 0 {
            return Err(ModelError::InvalidCurve("domain must have at least one core".into()));
        }
        if !(per_core.is_finite() && per_core > 0.0 && saturated.is_finite() && saturated > 0.0) {
            return Err(ModelError::InvalidCurve(format!(
                "analytic parameters must be positive (b1 = {per_core}, b_sat = {saturated})"
            )));
        }
        Ok(Self {
            cores,
            form: CurveForm::Analytic {
                per_core,
                saturated,
            },
        })
    }

    pub fn cores(&self) -> usize {
        self.cores
    }

    /// b(n) in bytes/s.
    pub fn bandwidth_at(&self, n: usize) -> Result<f64, ModelError> {
        if n == 0 || n > self.cores {
            return Err(ModelError::CoreCountOutOfRange {
                n,
                cores: self.cores,
            });
        }
        Ok(self.at(n))
    }

    /// Unchecked lookup for callers that already guarantee `1 <= n <= C`.
    pub(crate) fn at(&self, n: usize) -> f64 {
        debug_assert!(n >= 1 && n <= self.cores);
        match &self.form {
            CurveForm::Table(t) => t[n - 1],
            CurveForm::Analytic {
                per_core,
                saturated,
            } => (n as f64 * per_core).min(*saturated),
        }
    }

    /// b(C), the full-domain bandwidth.
    pub fn peak(&self) -> f64 {
        self.at(self.cores)
    }

    /// Smallest n with b(n) >= fraction * b(C).
    pub fn saturation_point(&self, fraction: f64) -> usize {
        let target = fraction * self.peak();
        (1..=self.cores)
            .find(|&n| self.at(n) >= target)
            .unwrap_or(self.cores)
    }

    /// All (n, b(n)) pairs, n = 1..C.
    pub fn points(&self) -> Vec<(usize, f64)> {
        (1..=self.cores).map(|n| (n, self.at(n))).collect()
    }

    /// Analytic parameters, if this curve is analytic.
    pub fn analytic_params(&self) -> Option<(f64, f64)> {
        match self.form {
            CurveForm::Analytic {
                per_core,
                saturated,
            } => Some((per_core, saturated)),
            CurveForm::Table(_) => None,
        }
    }
}

/// Execution time of one phase transferring `volume` bytes per process when
/// `n` processes share the domain in lockstep: `n * V / b(n)`.
pub fn exec_time(volume: f64, n: usize, curve: &BandwidthCurve) -> Result<f64, ModelError> {
    if !(volume > 0.0) {
        return Err(ModelError::Domain(format!("volume must be positive, got {volume}")));
    }
    let b = curve.bandwidth_at(n)?;
    Ok(n as f64 * volume / b)
}

/// Idle-wave edge velocity in ranks/s for a given phase and communication
/// time: `sigma * d / (t_exec + t_comm)`.
pub fn velocity_from_phase(
    t_exec: f64,
    t_comm: f64,
    distance: f64,
    sigma: f64,
) -> Result<f64, ModelError> {
    let denom = t_exec + t_comm;
    if !(denom > 0.0) {
        return Err(ModelError::Domain(format!(
            "phase length t_exec + t_comm = {denom} must be positive"
        )));
    }
    Ok(sigma * distance / denom)
}

/// Local idle-wave velocity in ranks/s with `n` processes executing on the
/// contention domain.
pub fn predicted_velocity(
    n: usize,
    volume: f64,
    curve: &BandwidthCurve,
    t_comm: f64,
    distance: f64,
    sigma: f64,
) -> Result<f64, ModelError> {
    let t_exec = exec_time(volume, n, curve)?;
    velocity_from_phase(t_exec, t_comm, distance, sigma)
}

/// Optimistic code balance of the blocked Chebyshev filter kernel in
/// bytes/flop for block size `n_b`.
pub fn chebfd_code_balance(block_size: u32) -> Result<f64, ModelError> {
    if block_size == 0 {
        return Err(ModelError::Domain("block size must be at least 1".into()));
    }
    Ok((260.0 / block_size as f64 + 80.0) / 146.0)
}

/// Limit of [`chebfd_code_balance`] for infinitely large blocks.
pub const CHEBFD_CODE_BALANCE_LIMIT: f64 = 80.0 / 146.0;

/// One contention domain: a set of cores sharing a memory interface.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentionDomain {
    pub id: usize,
    pub node: usize,
    pub curve: BandwidthCurve,
}

impl ContentionDomain {
    pub fn cores(&self) -> usize {
        self.curve.cores()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessSpec {
    pub rank: usize,
    pub domain: usize,
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WorkloadKind {
    /// Bytes moved through the memory interface per process and step.
    MemoryBound { volume_bytes: f64 },
    /// Seconds of core-local work per process and step.
    CoreBound { seconds: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub steps: usize,
}

impl WorkloadSpec {
    pub fn is_memory_bound(&self) -> bool {
        matches!(self.kind, WorkloadKind::MemoryBound { .. })
    }

    /// Work per step in the workload's own unit (bytes or seconds).
    pub fn work_per_step(&self) -> f64 {
        match self.kind {
            WorkloadKind::MemoryBound { volume_bytes } => volume_bytes,
            WorkloadKind::CoreBound { seconds } => seconds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Open,
    Periodic,
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Boundary::Open => f.write_str("open"),
            Boundary::Periodic => f.write_str("periodic"),
        }
    }
}

/// Default eager/rendezvous switch-over, in bytes.
pub const DEFAULT_EAGER_THRESHOLD: u64 = 256 * 1024;

/// Point-to-point neighbor pattern. Each rank sends to `r + u` for every
/// `u` in `distances_up` and to `r - d` for every `d` in `distances_down`,
/// and receives the mirrored messages.
#[derive(Debug, Clone, PartialEq)]
pub struct CommPattern {
    pub distances_up: BTreeSet<usize>,
    pub distances_down: BTreeSet<usize>,
    pub boundary: Boundary,
    pub message_bytes: u64,
    pub eager_threshold: u64,
    pub sigma: u8,
}

impl CommPattern {
    pub fn next_neighbor(boundary: Boundary) -> Self {
        Self {
            distances_up: BTreeSet::from([1]),
            distances_down: BTreeSet::from([1]),
            boundary,
            message_bytes: 0,
            eager_threshold: DEFAULT_EAGER_THRESHOLD,
            sigma: 1,
        }
    }

    pub fn is_silent(&self) -> bool {
        self.distances_up.is_empty() && self.distances_down.is_empty()
    }

    /// Largest configured offset in either direction.
    pub fn max_distance(&self) -> usize {
        self.distances_up
            .iter()
            .chain(self.distances_down.iter())
            .copied()
            .max()
            .unwrap_or(0)
    }
}

/// A machine description shipped as a data file.
#[derive(Debug, Clone, PartialEq)]
pub struct MachinePreset {
    pub name: String,
    pub cores_per_domain: usize,
    pub domains_per_node: usize,
    pub curve: BandwidthCurve,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const GB: f64 = 1e9;

    fn analytic(b1: f64, bsat: f64, c: usize) -> BandwidthCurve {
        BandwidthCurve::analytic(b1 * GB, bsat * GB, c).unwrap()
    }

    #[test]
    fn analytic_below_and_above_saturation() {
        let c = analytic(10.0, 40.0, 8);
        assert_eq!(c.bandwidth_at(2).unwrap(), 20.0 * GB);
        assert_eq!(c.bandwidth_at(8).unwrap(), 40.0 * GB);
    }

    #[test]
    fn table_lookup_is_exact() {
        let c = BandwidthCurve::from_table(&[(2, 24.0 * GB), (1, 13.0 * GB), (3, 30.0 * GB)]).unwrap();
        assert_eq!(c.bandwidth_at(1).unwrap(), 13.0 * GB);
        assert_eq!(c.cores(), 3);
    }

    #[test]
    fn out_of_range_core_count_is_a_domain_error() {
        let c = analytic(10.0, 40.0, 8);
        assert!(matches!(
            c.bandwidth_at(0),
            Err(ModelError::CoreCountOutOfRange { n: 0, cores: 8 })
        ));
        assert!(c.bandwidth_at(9).is_err());
    }

    #[test]
    fn invalid_tables_are_rejected() {
        assert!(BandwidthCurve::from_table(&[]).is_err());
        assert!(BandwidthCurve::from_table(&[(1, 1.0), (3, 2.0)]).is_err());
        assert!(BandwidthCurve::from_table(&[(1, 2.0), (2, 1.0)]).is_err());
        assert!(BandwidthCurve::from_table(&[(1, 0.0)]).is_err());
        assert!(BandwidthCurve::from_table(&[(1, 1.0), (1, 1.0)]).is_err());
    }

    #[test]
    fn saturation_point_of_analytic_curve() {
        assert_eq!(analytic(10.0, 40.0, 10).saturation_point(0.95), 4);
    }

    #[test]
    fn exec_time_examples() {
        let one = BandwidthCurve::from_table(&[(1, 10.0 * GB)]).unwrap();
        assert_relative_eq!(exec_time(1.0 * GB, 1, &one).unwrap(), 0.1, max_relative = 1e-15);
        assert_relative_eq!(
            exec_time(1.0 * GB, 4, &analytic(10.0, 40.0, 8)).unwrap(),
            0.1,
            max_relative = 1e-15
        );
        assert!(exec_time(0.0, 1, &one).is_err());
    }

    #[test]
    fn exec_time_reproduces_fig1_phase() {
        // 4.8 GB spread over 96 ranks on 4 domains of 24 cores, 11.5 ms phase.
        let v = 4.8 * GB / 96.0;
        let b24 = 24.0 * v / 0.0115;
        let table: Vec<(usize, f64)> = (1..=24).map(|n| (n, b24 * n as f64 / 24.0)).collect();
        let c = BandwidthCurve::from_table(&table).unwrap();
        assert_relative_eq!(b24 / GB, 104.347_826, max_relative = 1e-6);
        assert_relative_eq!(exec_time(v, 24, &c).unwrap(), 0.0115, max_relative = 1e-12);
    }

    #[test]
    fn velocity_examples() {
        assert_relative_eq!(velocity_from_phase(0.01, 0.0, 1.0, 1.0).unwrap(), 100.0);
        assert_relative_eq!(velocity_from_phase(0.01, 0.01, 1.0, 2.0).unwrap(), 100.0);
        let v3 = velocity_from_phase(0.01, 0.002, 3.0, 1.0).unwrap();
        let v1 = velocity_from_phase(0.01, 0.002, 1.0, 1.0).unwrap();
        assert_relative_eq!(v3 / v1, 3.0, max_relative = 1e-15);
        assert!(velocity_from_phase(0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn predicted_velocity_uses_contended_phase() {
        let c = analytic(10.0, 40.0, 8);
        // 8 active: phase = 8 * 1e8 / 4e10 = 0.02 s
        let v = predicted_velocity(8, 1e8, &c, 0.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(v, 50.0, max_relative = 1e-12);
    }

    #[test]
    fn code_balance_values() {
        // (260 + 80) / 146 and (260/32 + 80) / 146 = 88.125 / 146
        assert_relative_eq!(chebfd_code_balance(1).unwrap(), 340.0 / 146.0, max_relative = 1e-15);
        assert_relative_eq!(chebfd_code_balance(1).unwrap(), 2.328_767, max_relative = 1e-6);
        assert_relative_eq!(chebfd_code_balance(32).unwrap(), 88.125 / 146.0, max_relative = 1e-15);
        assert_relative_eq!(chebfd_code_balance(32).unwrap(), 0.603_596, max_relative = 1e-5);
        assert_relative_eq!(
            chebfd_code_balance(u32::MAX).unwrap(),
            CHEBFD_CODE_BALANCE_LIMIT,
            max_relative = 1e-7
        );
        assert!(chebfd_code_balance(0).is_err());
    }

    fn arb_curve() -> impl Strategy<Value = BandwidthCurve> {
        prop::collection::vec(0.0f64..5e9, 1..32).prop_map(|incs| {
            let mut b = 1e8;
            let pts: Vec<(usize, f64)> = incs
                .iter()
                .enumerate()
                .map(|(i, inc)| {
                    b += inc;
                    (i + 1, b)
                })
                .collect();
            BandwidthCurve::from_table(&pts).unwrap()
        })
    }

    proptest! {
        #[test]
        fn bandwidth_is_monotone(curve in arb_curve()) {
            for n in 1..curve.cores() {
                prop_assert!(curve.bandwidth_at(n).unwrap() <= curve.bandwidth_at(n + 1).unwrap());
            }
        }

        #[test]
        fn exec_time_scaling_identity(curve in arb_curve(), v in 1e3f64..1e10) {
            let t1 = exec_time(v, 1, &curve).unwrap();
            let b1 = curve.bandwidth_at(1).unwrap();
            for n in 1..=curve.cores() {
                let bn = curve.bandwidth_at(n).unwrap();
                let lhs = exec_time(v, n, &curve).unwrap();
                let rhs = n as f64 * t1 * (b1 / bn);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs);
            }
        }

        #[test]
        fn velocity_linear_in_distance_and_sigma(
            t_exec in 1e-4f64..1.0, t_comm in 0.0f64..1.0, d in 1.0f64..10.0, s in 0.5f64..4.0, k in 1.0f64..5.0
        ) {
            let base = velocity_from_phase(t_exec, t_comm, d, s).unwrap();
            let scaled_d = velocity_from_phase(t_exec, t_comm, k * d, s).unwrap();
            let scaled_s = velocity_from_phase(t_exec, t_comm, d, k * s).unwrap();
            prop_assert!((scaled_d - k * base).abs() <= 1e-12 * scaled_d);
            prop_assert!((scaled_s - k * base).abs() <= 1e-12 * scaled_s);
            let slower = velocity_from_phase(t_exec, t_comm + 1e-3, d, s).unwrap();
            prop_assert!(slower < base);
        }

        #[test]
        fn saturation_point_closed_form(b1 in 1e8f64..2e10, ratio in 1.0f64..30.0, frac in 0.5f64..1.0) {
            let bsat = b1 * ratio;
            let cores = 32;
            let curve = BandwidthCurve::analytic(b1, bsat, cores).unwrap();
            let peak = curve.peak();
            let closed = ((frac * peak / b1).ceil() as usize).clamp(1, cores);
            // guard against the search and the closed form straddling a float boundary
            let exact = frac * peak / b1;
            prop_assume!((exact - exact.round()).abs() > 1e-9);
            prop_assert_eq!(curve.saturation_point(frac), closed);
        }
    }
}
