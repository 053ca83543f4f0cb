//! One-off idle injections and seeded per-phase noise.
//!
//! Noise draws are counter based: every draw is a pure function of
//! `(seed, rank, step)`, so the order in which the engine processes events
//! never changes the values.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerturbationError {
    #[error("injection on rank {rank}: {reason}")]
    InvalidInjection { rank: usize, reason: String },
    #[error("overlapping injections on rank {rank}, step {step}")]
    Overlap { rank: usize, step: usize },
    #[error("noise magnitude must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
}

/// Length of an injected delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InjectionLength {
    Seconds(f64),
    /// Multiple of the unperturbed compute phase of the target rank.
    Phases(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub rank: usize,
    pub step: usize,
    pub length: InjectionLength,
}

impl Injection {
    pub fn seconds(&self, phase: f64) -> f64 {
        match self.length {
            InjectionLength::Seconds(s) => s,
            InjectionLength::Phases(p) => p * phase,
        }
    }
}

/// Injections resolved to seconds and indexed by `(rank, step)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionSchedule {
    by_slot: BTreeMap<(usize, usize), f64>,
}

impl InjectionSchedule {
    /// Resolves `injections` against the run. `phase_of(rank)` gives the
    /// unperturbed phase length used for phase-relative durations.
    pub fn build(
        injections: &[Injection],
        ranks: usize,
        steps: usize,
        phase_of: impl Fn(usize) -> f64,
    ) -> Result<Self, PerturbationError> {
        let mut by_slot = BTreeMap::new();
        for inj in injections {
            if inj.rank >= ranks {
                return Err(PerturbationError::InvalidInjection {
                    rank: inj.rank,
                    reason: format!("rank outside 0..{ranks}"),
                });
            }
            if inj.step >= steps {
                return Err(PerturbationError::InvalidInjection {
                    rank: inj.rank,
                    reason: format!("step {} outside 0..{steps}", inj.step),
                });
            }
            let secs = inj.seconds(phase_of(inj.rank));
            if !(secs.is_finite() && secs > 0.0) {
                return Err(PerturbationError::InvalidInjection {
                    rank: inj.rank,
                    reason: format!("duration must be positive, got {secs} s"),
                });
            }
            if by_slot.insert((inj.rank, inj.step), secs).is_some() {
                return Err(PerturbationError::Overlap {
                    rank: inj.rank,
                    step: inj.step,
                });
            }
        }
        Ok(Self { by_slot })
    }

    /// Extra idle seconds prepended to the compute phase of `(rank, step)`.
    pub fn apply_injection(&self, rank: usize, step: usize) -> Option<f64> {
        self.by_slot.get(&(rank, step)).copied()
    }

    pub fn len(&self) -> usize {
        self.by_slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Off,
    /// `base * exp(magnitude * z)`, z standard normal.
    LognormalMultiplicative,
    /// `base + x`, x exponential with mean `magnitude` seconds.
    ExponentialAdditive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    #[serde(default)]
    pub kind: NoiseKind,
    #[serde(default)]
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), PerturbationError> {
        if !(self.magnitude.is_finite() && self.magnitude >= 0.0) {
            return Err(PerturbationError::InvalidNoise(self.magnitude));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.kind == NoiseKind::Off || self.magnitude == 0.0
    }

    fn rng(&self, rank: usize, step: usize) -> ChaCha8Rng {
        let key = splitmix64(self.seed ^ splitmix64((rank as u64) << 32 ^ step as u64));
        ChaCha8Rng::seed_from_u64(key)
    }

    /// Multiplicative factor for a lognormal model; 1 otherwise.
    pub fn factor(&self, rank: usize, step: usize) -> f64 {
        match self.kind {
            NoiseKind::LognormalMultiplicative if self.magnitude > 0.0 => {
                let z: f64 = StandardNormal.sample(&mut self.rng(rank, step));
                (self.magnitude * z).exp()
            }
            _ => 1.0,
        }
    }

    /// Additive delay in seconds for an exponential model; 0 otherwise.
    pub fn additive(&self, rank: usize, step: usize) -> f64 {
        match self.kind {
            NoiseKind::ExponentialAdditive if self.magnitude > 0.0 => {
                let x: f64 = Exp1.sample(&mut self.rng(rank, step));
                self.magnitude * x
            }
            _ => 0.0,
        }
    }
}

/// Perturbed length of a phase of nominal length `base` seconds.
pub fn perturb_duration(base: f64, model: &NoiseModel, rank: usize, step: usize) -> f64 {
    match model.kind {
        NoiseKind::Off => base,
        NoiseKind::LognormalMultiplicative => base * model.factor(rank, step),
        NoiseKind::ExponentialAdditive => base + model.additive(rank, step),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lognormal(sigma: f64, seed: u64) -> NoiseModel {
        NoiseModel {
            kind: NoiseKind::LognormalMultiplicative,
            magnitude: sigma,
            seed,
        }
    }

    #[test]
    fn off_and_zero_sigma_leave_base_unchanged() {
        let off = NoiseModel::default();
        assert_eq!(perturb_duration(0.01, &off, 3, 7), 0.01);
        assert_eq!(perturb_duration(0.01, &lognormal(0.0, 9), 3, 7), 0.01);
    }

    #[test]
    fn lognormal_mean_matches_closed_form() {
        // E[exp(s z)] = exp(s^2 / 2); s = 0.1 gives exp(0.005).
        let m = lognormal(0.1, 42);
        let n = 100_000;
        let mean: f64 = (0..n).map(|i| perturb_duration(1.0, &m, i % 97, i / 97)).sum::<f64>() / n as f64;
        let expected = 0.005f64.exp();
        assert!((mean - expected).abs() < 0.01 * expected, "mean {mean}");
    }

    #[test]
    fn exponential_mean_matches_magnitude() {
        let m = NoiseModel {
            kind: NoiseKind::ExponentialAdditive,
            magnitude: 2e-3,
            seed: 5,
        };
        let n = 100_000;
        let mean: f64 = (0..n).map(|i| perturb_duration(0.0, &m, i, 1)).sum::<f64>() / n as f64;
        assert!((mean - 2e-3).abs() < 0.02 * 2e-3, "mean {mean}");
    }

    #[test]
    fn draws_do_not_depend_on_query_order() {
        let m = lognormal(0.3, 11);
        let forward: Vec<f64> = (0..50).map(|s| m.factor(4, s)).collect();
        let backward: Vec<f64> = (0..50).rev().map(|s| m.factor(4, s)).collect();
        let reversed: Vec<f64> = backward.into_iter().rev().collect();
        assert_eq!(forward, reversed);
        assert_ne!(m.factor(4, 0), m.factor(5, 0));
        assert_ne!(m.factor(4, 0), lognormal(0.3, 12).factor(4, 0));
    }

    #[test]
    fn injection_schedule_validation() {
        let inj = |rank, step, len| Injection {
            rank,
            step,
            length: len,
        };
        let ok = InjectionSchedule::build(&[inj(5, 0, InjectionLength::Phases(25.0))], 8, 10, |_| 0.01).unwrap();
        assert!((ok.apply_injection(5, 0).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(ok.apply_injection(5, 1), None);

        let zero = InjectionSchedule::build(&[inj(1, 0, InjectionLength::Seconds(0.0))], 8, 10, |_| 0.01);
        assert!(matches!(zero, Err(PerturbationError::InvalidInjection { .. })));
        let dup = InjectionSchedule::build(
            &[inj(1, 2, InjectionLength::Seconds(1.0)), inj(1, 2, InjectionLength::Phases(1.0))],
            8,
            10,
            |_| 0.01,
        );
        assert_eq!(dup, Err(PerturbationError::Overlap { rank: 1, step: 2 }));
        assert!(InjectionSchedule::build(&[inj(8, 0, InjectionLength::Seconds(1.0))], 8, 10, |_| 0.01).is_err());
        assert!(InjectionSchedule::build(&[inj(0, 10, InjectionLength::Seconds(1.0))], 8, 10, |_| 0.01).is_err());
    }
}
