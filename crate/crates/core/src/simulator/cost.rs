use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulated time in integer nanoseconds, so sums of millisecond costs are
/// exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    /// Rounds to the nearest nanosecond.
    pub fn from_ms(ms: f64) -> SimTime {
        SimTime((ms * 1e6).round() as u64)
    }

    pub fn as_ms(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl Add for SimTime {
    type Output = SimTime;

    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;

    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

/// Milliseconds with exactly six decimals.
impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

/// Per-token durations in milliseconds.
///
/// Only block totals are measured on hardware (1.24 ms fast, 8.02 ms slow);
/// the split into non-MoE, gate and per-expert parts is a configurable
/// default that reproduces both totals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub t_nonmoe_fast: f64,
    pub t_expert_fast: f64,
    pub t_expert_slow: f64,
    pub t_gate: f64,
    pub t_migrate_expert: f64,
    /// One direction; a slow expert pays it twice.
    pub t_activation_xfer: f64,
    pub slow_parallelism: usize,
    /// Prefill work for `n` tokens costs `base * n^exponent`; 1.0 is linear.
    pub prefill_batch_exponent: f64,
}

/// Slow-device non-MoE share implied by the measured slow block total. Never
/// charged, since non-MoE work always runs on the fast device.
pub const SLOW_NONMOE_MS: f64 = 1.62;

/// Longest duration accepted for a single cost, in milliseconds.
const MAX_COST_MS: f64 = 1e9;

pub fn default_cost_model() -> CostModel {
    CostModel {
        t_nonmoe_fast: 0.24,
        t_expert_fast: 0.50,
        t_expert_slow: 3.20,
        t_gate: 0.01,
        t_migrate_expert: 39.87,
        t_activation_xfer: 0.02,
        slow_parallelism: 1,
        prefill_batch_exponent: 1.0,
    }
}

impl Default for CostModel {
    fn default() -> Self {
        default_cost_model()
    }
}

impl CostModel {
    pub fn zero() -> Self {
        CostModel {
            t_nonmoe_fast: 0.0,
            t_expert_fast: 0.0,
            t_expert_slow: 0.0,
            t_gate: 0.0,
            t_migrate_expert: 0.0,
            t_activation_xfer: 0.0,
            slow_parallelism: 1,
            prefill_batch_exponent: 1.0,
        }
    }

    fn durations(&self) -> [(&'static str, f64); 6] {
        [
            ("t_nonmoe_fast", self.t_nonmoe_fast),
            ("t_expert_fast", self.t_expert_fast),
            ("t_expert_slow", self.t_expert_slow),
            ("t_gate", self.t_gate),
            ("t_migrate_expert", self.t_migrate_expert),
            ("t_activation_xfer", self.t_activation_xfer),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.durations() {
            if !(0.0..=MAX_COST_MS).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in [0, {MAX_COST_MS}] ms, got {v}"
                )));
            }
        }
        if self.slow_parallelism == 0 {
            return Err(Error::InvalidConfig("slow_parallelism must be at least 1".into()));
        }
        if !(0.0..=4.0).contains(&self.prefill_batch_exponent) {
            return Err(Error::InvalidConfig(format!(
                "prefill_batch_exponent must be in [0, 4], got {}",
                self.prefill_batch_exponent
            )));
        }
        Ok(())
    }

    pub fn fast_block_ms(&self, k: usize) -> f64 {
        self.t_nonmoe_fast + k as f64 * self.t_expert_fast
    }

    /// Duration of `base_ms` work applied to a batch of `tokens`.
    pub(crate) fn batched(&self, base_ms: f64, tokens: u64) -> SimTime {
        if tokens == 0 {
            return SimTime::ZERO;
        }
        SimTime::from_ms(base_ms * (tokens as f64).powf(self.prefill_batch_exponent))
    }
}
