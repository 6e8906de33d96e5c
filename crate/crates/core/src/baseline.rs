//! Rule-based link adaptation: an inner loop that maps the reported CQI to an
//! SINR estimate and picks the highest MCS meeting the BLER target, and an
//! outer loop that nudges an SINR offset on every first-transmission ACK/NACK.

use serde::{Deserialize, Serialize};

use crate::env::{Policy, StateVector, StepInfo};
use crate::error::{Error, Result};
use crate::linksim::{bler_from_threshold, LinkModel};
use crate::mcs::NUM_MCS;

pub const DEFAULT_TARGET_BLER: f64 = 0.1;
pub const DEFAULT_STEP_UP_DB: f64 = 0.5;
pub const OFFSET_LIMIT_DB: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OllaState {
    pub offset_db: f64,
    pub step_up_db: f64,
    pub step_down_db: f64,
    pub target_bler: f64,
}

impl OllaState {
    /// The down step is set so that the expected drift is zero when the
    /// observed BLER equals the target: `p·up = (1−p)·down`.
    pub fn new(target_bler: f64, step_up_db: f64) -> Result<Self> {
        if !(target_bler > 0.0 && target_bler < 1.0) {
            return Err(Error::config(format!("target_bler {target_bler} outside (0, 1)")));
        }
        if !(step_up_db > 0.0 && step_up_db.is_finite()) {
            return Err(Error::config(format!("step_up_db must be > 0, got {step_up_db}")));
        }
        Ok(Self {
            offset_db: 0.0,
            step_up_db,
            step_down_db: step_up_db * target_bler / (1.0 - target_bler),
            target_bler,
        })
    }

    /// NACK raises the offset by `step_up`, ACK lowers it by `step_down`.
    pub fn update(self, ack: bool) -> Self {
        let delta = if ack { -self.step_down_db } else { self.step_up_db };
        Self {
            offset_db: (self.offset_db + delta).clamp(-OFFSET_LIMIT_DB, OFFSET_LIMIT_DB),
            ..self
        }
    }
}

impl Default for OllaState {
    fn default() -> Self {
        Self::new(DEFAULT_TARGET_BLER, DEFAULT_STEP_UP_DB).expect("defaults are valid")
    }
}

/// Highest MCS whose BLER at `sinr_est_db − offset_db` stays within
/// `target_bler`; 0 when none does.
pub fn illa_select(sinr_est_db: f64, offset_db: f64, link: &LinkModel, target_bler: f64) -> usize {
    let ladder = link.thresholds().expect("LinkModel gap validated on construction");
    illa_with_ladder(sinr_est_db - offset_db, &ladder, link.bler_slope_per_db, target_bler)
}

fn illa_with_ladder(sinr_db: f64, ladder: &[f64; NUM_MCS], slope: f64, target: f64) -> usize {
    (0..NUM_MCS)
        .rev()
        .find(|&m| bler_from_threshold(ladder[m], sinr_db, slope) <= target)
        .unwrap_or(0)
}

/// ILLA + OLLA as a [`Policy`]. Retransmissions reuse the MCS of the first
/// attempt, as a HARQ process would; only first-attempt feedback moves the offset.
#[derive(Debug, Clone)]
pub struct OllaPolicy {
    pub state: OllaState,
    link: LinkModel,
    ladder: [f64; NUM_MCS],
    packet_mcs: Option<usize>,
}

impl OllaPolicy {
    pub fn new(state: OllaState, link: LinkModel) -> Result<Self> {
        link.validate()?;
        Ok(Self {
            state,
            ladder: link.thresholds()?,
            link,
            packet_mcs: None,
        })
    }

    pub fn link(&self) -> &LinkModel {
        &self.link
    }
}

impl Policy for OllaPolicy {
    fn act(&mut self, state: &StateVector) -> usize {
        let first = state.0[StateVector::ATTEMPT] == 0.0;
        match (first, self.packet_mcs) {
            (false, Some(m)) => m,
            _ => {
                let m = illa_with_ladder(
                    state.sinr_est_db() - self.state.offset_db,
                    &self.ladder,
                    self.link.bler_slope_per_db,
                    self.state.target_bler,
                );
                self.packet_mcs = Some(m);
                m
            }
        }
    }

    fn feedback(&mut self, info: &StepInfo) {
        if info.attempt == 0 {
            self.state = self.state.update(info.success);
        }
    }
}
