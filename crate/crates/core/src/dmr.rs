//! Paired cosine schedules over communication rounds.
//!
//! `eps_plus` rises from 0 to 1 and scales class rectification; `eps_minus`
//! falls from 1 to 0 and controls how much of the global backbone a client
//! adopts at a feature-alignment update.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of training still ahead, `(L − l)/L`.
fn remaining(l: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("schedule", "total rounds must be ≥ 1"));
    }
    if l > total {
        return Err(Error::invalid("schedule", format!("round {l} exceeds total {total}")));
    }
    Ok((total - l) as f64 / total as f64)
}

// cos(x·π/2) is evaluated as sin((1 − x)·π/2) so both endpoints come out exact.

/// `1 − cos((l/L)·π/2)`
pub fn eps_plus(l: usize, total: usize) -> Result<f64> {
    Ok(1.0 - eps_minus(l, total)?)
}

/// `cos((l/L)·π/2)`
pub fn eps_minus(l: usize, total: usize) -> Result<f64> {
    Ok((remaining(l, total)? * FRAC_PI_2).sin())
}

/// Schedule values for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub round: usize,
    pub total: usize,
    pub eps_plus: f64,
    pub eps_minus: f64,
}

impl Schedule {
    pub fn at(round: usize, total: usize) -> Result<Self> {
        Ok(Schedule { round, total, eps_plus: eps_plus(round, total)?, eps_minus: eps_minus(round, total)? })
    }

    /// Values used when the rheostat is switched off: rectification at full
    /// strength, feature-alignment blending by divergence alone.
    pub fn disabled(round: usize, total: usize) -> Self {
        Schedule { round, total, eps_plus: 1.0, eps_minus: 0.0 }
    }
}
