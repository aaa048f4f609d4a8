//! Per-round cycle padding: the two constant-time policies and their
//! dispatcher.
//!
//! Padding never changes ciphertext; it only inflates the reported (or, in
//! hardware mode, busy-waited) duration of each round.

use crate::aes::ROUNDS_PER_BLOCK;
use crate::{Error, Result};
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_FIXED_TARGET: u64 = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingPolicy {
    None,
    Fixed { target_cycles: u64 },
    RunningAverage,
}

impl PaddingPolicy {
    pub fn fixed(target_cycles: u64) -> Self {
        PaddingPolicy::Fixed { target_cycles }
    }
}

impl fmt::Display for PaddingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PaddingPolicy::None => write!(f, "none"),
            PaddingPolicy::Fixed { target_cycles } => write!(f, "fixed:{target_cycles}"),
            PaddingPolicy::RunningAverage => write!(f, "avg"),
        }
    }
}

impl FromStr for PaddingPolicy {
    type Err = Error;

    /// `none | fixed:<target> | avg`; bare `fixed` means the default target.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(PaddingPolicy::None),
            "avg" => Ok(PaddingPolicy::RunningAverage),
            "fixed" => Ok(PaddingPolicy::Fixed { target_cycles: DEFAULT_FIXED_TARGET }),
            other => {
                if let Some(raw) = other.strip_prefix("fixed:") {
                    let target_cycles: u64 = raw
                        .parse()
                        .map_err(|e| Error::Config(format!("policy target {raw:?}: {e}")))?;
                    if target_cycles == 0 {
                        return Err(Error::Config("fixed policy target must be > 0".into()));
                    }
                    Ok(PaddingPolicy::Fixed { target_cycles })
                } else {
                    Err(Error::Config(format!(
                        "unknown policy {other:?}, expected none | fixed:<target> | avg"
                    )))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PaddedRound {
    pub raw: u64,
    pub pad: u64,
}

impl PaddedRound {
    pub fn padded(&self) -> u64 {
        self.raw + self.pad
    }
}

pub fn total_padded(rounds: &[PaddedRound]) -> u64 {
    rounds.iter().map(PaddedRound::padded).sum()
}

/// Tops every round up to `target`. Rounds already past the target get no
/// padding (a negative difference pads nothing).
pub fn pad_fixed(rounds: &[u64], target: u64) -> Vec<PaddedRound> {
    rounds
        .iter()
        .map(|&raw| PaddedRound { raw, pad: target.saturating_sub(raw) })
        .collect()
}

/// Tops each round up to the cumulative mean (integer floor) of the raw round
/// costs so far, current round included. Sums accumulate raw values, so the
/// first round is never padded.
pub fn pad_running_average(rounds: &[u64]) -> Vec<PaddedRound> {
    let mut sum = 0u64;
    rounds
        .iter()
        .enumerate()
        .map(|(i, &raw)| {
            sum += raw;
            let avg = sum / (i as u64 + 1);
            PaddedRound { raw, pad: avg.saturating_sub(raw) }
        })
        .collect()
}

/// Applies a policy to the rounds of a packet. The running-average sum is
/// local to one encryption, so it restarts on each 10-round block boundary.
pub fn apply_policy(rounds: &[u64], policy: PaddingPolicy) -> Vec<PaddedRound> {
    match policy {
        PaddingPolicy::None => rounds.iter().map(|&raw| PaddedRound { raw, pad: 0 }).collect(),
        PaddingPolicy::Fixed { target_cycles } => pad_fixed(rounds, target_cycles),
        PaddingPolicy::RunningAverage => rounds
            .chunks(ROUNDS_PER_BLOCK)
            .flat_map(|block| pad_running_average(block))
            .collect(),
    }
}
