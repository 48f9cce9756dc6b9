//! Force-threshold removability classification and the open-loop push
//! primitive with abort on the first over-threshold sample.

use crate::rng::{stream, stream_rng};
use crate::tower::{BlockId, ForceTrace, Stability, TowerError, TowerState, SAMPLE_PERIOD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForceError {
    #[error("force trace is empty")]
    EmptyTrace,
    #[error("no contact: every sample is at the noise floor")]
    NoContact,
    #[error("invalid force configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PushError {
    /// The finger slid off the block face; a minor failure with no effect on the tower.
    #[error("finger slipped off the block (offset {offset:.4} m)")]
    Slip { offset: f64 },
    /// The tower fell during or right after the push.
    #[error("tower collapsed during the push")]
    Collapsed { outcome: Box<PushOutcome> },
    #[error(transparent)]
    Tower(#[from] TowerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    FirstSubspace,
    SecondSubspace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSchedule {
    pub thr_aggressive: f64,
    pub thr_conservative: f64,
    pub phase: Phase,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        ThresholdSchedule {
            thr_aggressive: 0.32,
            thr_conservative: 0.18,
            phase: Phase::FirstSubspace,
        }
    }
}

impl ThresholdSchedule {
    pub fn new(thr_aggressive: f64, thr_conservative: f64) -> Result<Self, ForceError> {
        if !(thr_conservative > 0.0 && thr_conservative < thr_aggressive && thr_aggressive <= 5.0) {
            return Err(ForceError::InvalidConfig(format!(
                "thresholds must satisfy 0 < {thr_conservative} < {thr_aggressive} <= 5"
            )));
        }
        Ok(ThresholdSchedule {
            thr_aggressive,
            thr_conservative,
            phase: Phase::FirstSubspace,
        })
    }

    pub fn active(&self) -> f64 {
        match self.phase {
            Phase::FirstSubspace => self.thr_aggressive,
            Phase::SecondSubspace => self.thr_conservative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceConfig {
    /// Time after contact in which an over-threshold sample means "stuck" (s).
    pub evaluation_window: f64,
    /// m/s
    pub push_speed: f64,
    /// Extra travel beyond the block length (m).
    pub clearance: f64,
    /// Readings at or below this are treated as no contact (N).
    pub noise_floor: f64,
    /// Contact offset above which the finger may slip (m).
    pub slip_offset: f64,
    pub slip_probability: f64,
    /// Disabling the abort is only useful to exercise the collapse rule.
    pub abort_enabled: bool,
}

impl Default for ForceConfig {
    fn default() -> Self {
        ForceConfig {
            evaluation_window: 0.5,
            push_speed: 0.005,
            clearance: 0.01,
            noise_floor: 0.004,
            slip_offset: 0.007,
            slip_probability: 0.5,
            abort_enabled: true,
        }
    }
}

impl ForceConfig {
    pub fn validate(&self) -> Result<(), ForceError> {
        if !(self.evaluation_window > 0.0 && self.push_speed > 0.0 && self.clearance >= 0.0) {
            return Err(ForceError::InvalidConfig("window, speed and clearance must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.slip_probability) || !(self.noise_floor >= 0.0) {
            return Err(ForceError::InvalidConfig("slip probability or noise floor out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Removable,
    Stuck,
}

/// Stuck iff a sample inside the evaluation window reaches `thr`.
pub fn classify_push(trace: &ForceTrace, thr: f64, config: &ForceConfig) -> Result<Classification, ForceError> {
    if trace.is_empty() {
        return Err(ForceError::EmptyTrace);
    }
    let contact = &trace.samples[trace.contact_start.min(trace.len())..];
    if contact.iter().all(|s| s.1 <= config.noise_floor) {
        return Err(ForceError::NoContact);
    }
    let t0 = contact[0].0;
    let stuck = contact
        .iter()
        .take_while(|s| s.0 - t0 < config.evaluation_window - 1e-9)
        .any(|s| s.1 >= thr);
    Ok(if stuck {
        Classification::Stuck
    } else {
        Classification::Removable
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PushKind {
    Extracted,
    /// Threshold reached inside the evaluation window.
    Stuck,
    /// Threshold reached later in the push.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushOutcome {
    pub kind: PushKind,
    pub peak: f64,
    /// Distance the block was pushed (m).
    pub distance: f64,
    pub threshold: f64,
    /// Recorded samples; ends at the abort sample when the push aborted.
    pub trace: ForceTrace,
    /// Index of the first over-threshold sample.
    pub abort_index: Option<usize>,
}

/// Pushes `block` along its long axis, sampling the force at 20 Hz.
///
/// `contact_offset` is the distance of the finger from the face centre
/// reported by the servo. On full travel the block is extracted from the
/// tower; on the first sample at or above `thr` the push stops.
pub fn push_primitive(
    tower: &mut TowerState,
    block: BlockId,
    thr: f64,
    config: &ForceConfig,
    contact_offset: f64,
    seed: u64,
) -> Result<PushOutcome, PushError> {
    if tower.collapsed {
        return Err(TowerError::CollapsedTower.into());
    }
    let mut rng = stream_rng(seed, stream::PUSH);
    if contact_offset > config.slip_offset && rng.random_bool(config.slip_probability) {
        return Err(PushError::Slip { offset: contact_offset });
    }
    let travel = tower.config.block.length + config.clearance;
    let duration = travel / config.push_speed;
    let full = tower.reaction_force_profile(block, config.push_speed, duration, seed)?;
    let first_over = full.samples.iter().position(|s| s.1 >= thr);

    let (kind, trace, abort_index) = match first_over {
        Some(k) if config.abort_enabled => {
            let t = k as f64 * SAMPLE_PERIOD;
            let kind = if t < config.evaluation_window - 1e-9 {
                PushKind::Stuck
            } else {
                PushKind::Aborted
            };
            let trace = ForceTrace {
                samples: full.samples[..=k].to_vec(),
                contact_start: full.contact_start,
            };
            (kind, trace, Some(k))
        }
        _ => (PushKind::Extracted, full, first_over),
    };
    let peak = trace.peak();
    let distance = match kind {
        PushKind::Extracted => travel,
        _ => trace.samples.last().map_or(0.0, |s| s.0) * config.push_speed,
    };
    let outcome = PushOutcome {
        kind,
        peak,
        distance,
        threshold: thr,
        trace,
        abort_index,
    };

    let stability = match kind {
        PushKind::Extracted if first_over.is_some() => tower.record_push(block, peak, thr, false)?,
        PushKind::Extracted => tower.apply_extraction(block)?,
        PushKind::Stuck | PushKind::Aborted => {
            tower.mark_tested(block)?;
            tower.record_push(block, peak, thr, true)?
        }
    };
    match stability {
        Stability::Stable => Ok(outcome),
        Stability::Collapsed => Err(PushError::Collapsed {
            outcome: Box::new(outcome),
        }),
    }
}
