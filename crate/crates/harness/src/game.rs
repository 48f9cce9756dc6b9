//! One semi-autonomous game: select, approach, push, classify, update,
//! with the operator's three interventions (repositioning the arm between
//! sub-spaces, restacking extracted blocks, aborting after a minor failure)
//! applied automatically.

use crate::config::{GameMode, RunConfig};
use crate::{sim_err, HarnessError};
use jenga_core::force::{push_primitive, PushError, PushKind};
use jenga_core::geometry::{JointState, Vec3};
use jenga_core::policy::{init_policy, AttemptOutcome, PolicyError, PolicyState, Selection};
use jenga_core::rng::{mix, stream, stream_rng};
use jenga_core::servo::{home_configuration, place_robot_facing, run_servo, ServoResult, ServoScene, ServoStop};
use jenga_core::tower::{new_tower, BlockId, CollapseCause, TowerState};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    TrackingLost,
    Singularity,
    BadInit,
    Timeout,
    Slip,
    /// A push stopped on a block that carried no load.
    Misclassified,
    Collapse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "result", content = "kind")]
pub enum Outcome {
    ExtractedOk,
    StuckCorrect,
    Error(ErrorKind),
}

impl Outcome {
    pub fn is_success(self) -> bool {
        !matches!(self, Outcome::Error(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub index: usize,
    pub block: BlockId,
    pub level: usize,
    pub slot: usize,
    /// Force threshold in effect (N).
    pub threshold: f64,
    pub outcome: Outcome,
    pub push: Option<PushKind>,
    pub peak_force: Option<f64>,
    pub load_bearing: bool,
    /// Time spent in the visual-servo approach (s).
    pub servo_time_s: f64,
    /// Distance of the finger from the face centre (m).
    pub contact_offset: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Collapse,
    GameOver,
    MaxAttempts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub attempts: usize,
    pub extracted_ok: usize,
    pub stuck_correct: usize,
    pub errors: usize,
    pub errors_by_kind: BTreeMap<ErrorKind, usize>,
    /// Operator moved the arm to the next sub-space.
    pub repositions: usize,
    /// Operator put an extracted block on top.
    pub restacks: usize,
}

impl Totals {
    pub fn from_attempts(attempts: &[AttemptRecord]) -> Self {
        let mut t = Totals::default();
        for a in attempts {
            t.add(a.outcome);
        }
        t
    }

    fn add(&mut self, outcome: Outcome) {
        self.attempts += 1;
        match outcome {
            Outcome::ExtractedOk => self.extracted_ok += 1,
            Outcome::StuckCorrect => self.stuck_correct += 1,
            Outcome::Error(kind) => {
                self.errors += 1;
                *self.errors_by_kind.entry(kind).or_insert(0) += 1;
            }
        }
    }

    pub fn correct(&self) -> usize {
        self.extracted_ok + self.stuck_correct
    }

    pub fn success_fraction(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.correct() as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameLog {
    pub seed: u64,
    pub config_hash: String,
    pub attempts: Vec<AttemptRecord>,
    pub totals: Totals,
    pub end: EndReason,
    pub collapse_cause: Option<CollapseCause>,
    /// The policy began in the upper sub-space.
    pub started_high: bool,
}

impl GameLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("game log serializes")
    }
}

/// Mean approach time of the closed loop from the default start distance.
const FAST_SERVO_TIME_S: f64 = 21.0;

/// Result of one approach before the push.
struct Approach {
    failure: Option<ErrorKind>,
    servo_time_s: f64,
    contact_offset: Option<f64>,
}

/// What one call to [`Game::step`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Attempt(AttemptRecord),
    Reposition,
    Finished(EndReason),
}

/// A game in progress. `step` advances it by one policy decision.
pub struct Game<'a> {
    pub config: &'a RunConfig,
    pub seed: u64,
    pub tower: TowerState,
    pub policy: PolicyState,
    pub log: GameLog,
    home: Option<JointState>,
    decisions: u64,
    finished: bool,
}

impl<'a> Game<'a> {
    pub fn new(config: &'a RunConfig, seed: u64) -> Result<Self, HarnessError> {
        config.validate()?;
        let tower = new_tower(&config.tower, seed).map_err(sim_err)?;
        let policy = init_policy(&tower, &config.policy, seed).map_err(|e| HarnessError::Config(e.to_string()))?;
        let home = match config.game.mode {
            GameMode::Fast => None,
            GameMode::Full => Some(home_configuration(&config.robot.chain).map_err(sim_err)?),
        };
        let log = GameLog {
            seed,
            config_hash: config.hash(),
            attempts: Vec::new(),
            totals: Totals::default(),
            end: EndReason::GameOver,
            collapse_cause: None,
            started_high: policy.started_high,
        };
        Ok(Game {
            config,
            seed,
            tower,
            policy,
            log,
            home,
            decisions: 0,
            finished: false,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn finish(&mut self, reason: EndReason) -> Step {
        self.finished = true;
        self.log.end = reason;
        self.log.collapse_cause = self.tower.collapse_cause;
        Step::Finished(reason)
    }

    pub fn step(&mut self) -> Result<Step, HarnessError> {
        if self.finished {
            return Ok(Step::Finished(self.log.end));
        }
        if self.tower.collapsed {
            return Ok(self.finish(EndReason::Collapse));
        }
        if self.log.attempts.len() >= self.config.game.max_attempts {
            return Ok(self.finish(EndReason::MaxAttempts));
        }
        let decision_seed = mix(self.seed, self.decisions);
        self.decisions += 1;
        let block = match self.policy.select_block(&self.tower, decision_seed).map_err(sim_err)? {
            Selection::GameOver => return Ok(self.finish(EndReason::GameOver)),
            Selection::SwitchSubspace => {
                self.log.totals.repositions += 1;
                return Ok(Step::Reposition);
            }
            Selection::Candidate(id) => id,
        };
        let record = self.attempt(block, decision_seed)?;
        self.log.totals.add(record.outcome);
        self.log.attempts.push(record.clone());
        if self.tower.collapsed {
            self.finished = true;
            self.log.end = EndReason::Collapse;
            self.log.collapse_cause = self.tower.collapse_cause;
        }
        Ok(Step::Attempt(record))
    }

    fn attempt(&mut self, block: BlockId, seed: u64) -> Result<AttemptRecord, HarnessError> {
        let b = &self.tower.blocks[block];
        let mut record = AttemptRecord {
            index: self.log.attempts.len(),
            block,
            level: b.level,
            slot: b.slot,
            threshold: self.policy.current_threshold(),
            outcome: Outcome::ExtractedOk,
            push: None,
            peak_force: None,
            load_bearing: self.tower.is_load_bearing(block).map_err(sim_err)?,
            servo_time_s: 0.0,
            contact_offset: None,
        };
        let approach = self.approach(block, seed)?;
        record.servo_time_s = approach.servo_time_s;
        record.contact_offset = approach.contact_offset;
        if let Some(kind) = approach.failure {
            self.policy.record_outcome(block, AttemptOutcome::MinorFailure).map_err(sim_err)?;
            record.outcome = Outcome::Error(kind);
            return Ok(record);
        }

        let offset = approach.contact_offset.unwrap_or(0.0);
        let thr = record.threshold;
        let outcome = match push_primitive(&mut self.tower, block, thr, &self.config.force, offset, seed) {
            Ok(o) => o,
            Err(PushError::Slip { .. }) => {
                self.policy.record_outcome(block, AttemptOutcome::MinorFailure).map_err(sim_err)?;
                record.outcome = Outcome::Error(ErrorKind::Slip);
                return Ok(record);
            }
            Err(PushError::Collapsed { outcome }) => {
                record.push = Some(outcome.kind);
                record.peak_force = Some(outcome.peak);
                record.outcome = Outcome::Error(ErrorKind::Collapse);
                return Ok(record);
            }
            Err(e) => return Err(sim_err(e)),
        };
        record.push = Some(outcome.kind);
        record.peak_force = Some(outcome.peak);
        record.outcome = match outcome.kind {
            PushKind::Extracted => Outcome::ExtractedOk,
            PushKind::Stuck | PushKind::Aborted if record.load_bearing => Outcome::StuckCorrect,
            PushKind::Stuck | PushKind::Aborted => Outcome::Error(ErrorKind::Misclassified),
        };
        self.policy.record_outcome(block, AttemptOutcome::Push(outcome.kind)).map_err(sim_err)?;
        if outcome.kind == PushKind::Extracted {
            self.tower.place_extracted_on_top(block).map_err(sim_err)?;
            self.log.totals.restacks += 1;
            match self.policy.register_new_level(&self.tower) {
                Ok(_) | Err(PolicyError::IncompleteLevel) => {}
                Err(e) => return Err(sim_err(e)),
            }
        }
        Ok(record)
    }

    fn approach(&self, block: BlockId, seed: u64) -> Result<Approach, HarnessError> {
        let g = &self.config.game;
        let mut rng = stream_rng(seed, stream::FAILURES);
        // Drawn in a fixed order so both modes consume the same numbers.
        let bad_init = rng.random_bool(g.p_bad_init);
        let lost = rng.random_bool(g.p_tracking_loss);
        let singular = rng.random_bool(g.p_singularity_edge) && self.at_workspace_edge(block);
        let injected = if bad_init {
            Some(ErrorKind::BadInit)
        } else if lost {
            Some(ErrorKind::TrackingLost)
        } else if singular {
            Some(ErrorKind::Singularity)
        } else {
            None
        };

        match self.config.game.mode {
            GameMode::Fast => {
                let n = Normal::new(0.0, g.contact_sigma).map_err(sim_err)?;
                let (ex, ey) = (n.sample(&mut rng), n.sample(&mut rng));
                let time = FAST_SERVO_TIME_S * rng.random_range(0.8..1.2);
                Ok(Approach {
                    failure: injected,
                    servo_time_s: if injected.is_some() { time * rng.random_range(0.0..1.0) } else { time },
                    contact_offset: Some(ex.hypot(ey)),
                })
            }
            GameMode::Full => {
                let mut a = self.servo_approach(block, seed)?;
                if a.failure.is_none() {
                    a.failure = injected;
                }
                Ok(a)
            }
        }
    }

    fn at_workspace_edge(&self, block: BlockId) -> bool {
        let levels = self.policy.testable_levels();
        let (Some(&lo), Some(&hi)) = (levels.iter().min(), levels.iter().max()) else {
            return false;
        };
        let level = self.tower.blocks[block].level;
        let m = self.config.game.edge_margin;
        level < lo + m || level + m > hi
    }

    fn servo_approach(&self, block: BlockId, seed: u64) -> Result<Approach, HarnessError> {
        let home = self.home.expect("full mode has a home configuration");
        let r = servo_trial(self.config, &self.tower, block, &home, seed)?;
        let failure = match r.reason {
            ServoStop::Converged => None,
            ServoStop::TrackingLost => Some(ErrorKind::TrackingLost),
            ServoStop::Singularity => Some(ErrorKind::Singularity),
            ServoStop::Timeout => Some(ErrorKind::Timeout),
            ServoStop::InitFailed => Some(ErrorKind::BadInit),
        };
        let offset = r.contact_offset();
        Ok(Approach {
            failure,
            servo_time_s: r.time_s,
            contact_offset: offset.is_finite().then_some(offset),
        })
    }
}

/// One closed-loop approach to `block`: the operator has parked the robot
/// roughly in front of the block (random distance, lateral offset and yaw)
/// and the arm starts from `home`.
pub fn servo_trial(
    cfg: &RunConfig,
    tower: &TowerState,
    block: BlockId,
    home: &JointState,
    seed: u64,
) -> Result<ServoResult, HarnessError> {
    let mut rng = stream_rng(seed, stream::SCENE);
    let g = &cfg.game;
    let distance = g.approach_distance + rng.random_range(-g.approach_spread..=g.approach_spread);
    let offset = Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), 0.0);
    let yaw = rng.random_range(-0.05..0.05);
    let chain = &cfg.robot.chain;
    let base = place_robot_facing(tower, block, chain, home, &cfg.robot.goal, distance, offset, yaw).map_err(sim_err)?;
    let scene = ServoScene {
        tower,
        chain,
        robot_base: base,
        intrinsics: cfg.perception.intrinsics,
        goal: cfg.robot.goal.clone(),
    };
    run_servo(home, block, &scene, &cfg.servo, &cfg.perception.tracking, &cfg.perception.masks, seed).map_err(sim_err)
}

/// Plays one full game.
pub fn run_game(config: &RunConfig, seed: u64) -> Result<GameLog, HarnessError> {
    let mut game = Game::new(config, seed)?;
    while !game.is_finished() {
        game.step()?;
    }
    Ok(game.log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_match_attempts() {
        let cfg = RunConfig::default();
        for seed in 0..20 {
            let log = run_game(&cfg, seed).unwrap();
            assert_eq!(log.totals.attempts, log.attempts.len());
            let t = Totals::from_attempts(&log.attempts);
            assert_eq!((t.extracted_ok, t.stuck_correct, t.errors), (
                log.totals.extracted_ok,
                log.totals.stuck_correct,
                log.totals.errors
            ));
            assert_eq!(t.errors_by_kind, log.totals.errors_by_kind);
            assert_eq!(log.totals.restacks, log.totals.extracted_ok);
        }
    }

    #[test]
    fn same_seed_same_log() {
        let cfg = RunConfig::default();
        assert_eq!(run_game(&cfg, 9).unwrap().to_json(), run_game(&cfg, 9).unwrap().to_json());
        assert_ne!(run_game(&cfg, 9).unwrap().to_json(), run_game(&cfg, 10).unwrap().to_json());
    }

    #[test]
    fn collapse_ends_the_game() {
        let cfg = RunConfig::default();
        for seed in 0..30 {
            let log = run_game(&cfg, seed).unwrap();
            if log.end == EndReason::Collapse {
                assert!(log.collapse_cause.is_some());
                assert_eq!(log.attempts.last().unwrap().outcome, Outcome::Error(ErrorKind::Collapse));
                return;
            }
        }
        panic!("no game collapsed in 30 seeds");
    }
}
