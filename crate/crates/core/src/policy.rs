//! Block-selection policy: the tower is split into sub-spaces of reachable
//! levels, blocks are drawn at random inside the current sub-space, one
//! extraction is allowed per level, and a memory buffer records what was
//! tried.

use crate::force::{Phase, PushKind, ThresholdSchedule};
use crate::rng::{stream, stream_rng};
use crate::tower::{BlockId, BlockStatus, Orientation, TowerState};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("invalid workspace: {0}")]
    InvalidWorkspace(String),
    #[error("tower has collapsed")]
    CollapsedTower,
    #[error("block {0} is not the pending candidate")]
    UnknownBlock(BlockId),
    #[error("no complete new level to register")]
    IncompleteLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartChoice {
    Random,
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub start: StartChoice,
    /// Lowest and highest level the arm can reach.
    pub workspace_min_level: usize,
    pub workspace_max_level: usize,
    /// Levels at the top of the tower that are never selected.
    pub excluded_top_levels: usize,
    pub thr_aggressive: f64,
    pub thr_conservative: f64,
    /// Allow one more attempt on a tested block instead of ending the game,
    /// once the threshold has changed since it was probed.
    pub retry_gate: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            start: StartChoice::Random,
            workspace_min_level: 1,
            workspace_max_level: 14,
            excluded_top_levels: 2,
            thr_aggressive: 0.32,
            thr_conservative: 0.18,
            retry_gate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubspaceKind {
    Low,
    High,
    /// Levels formed by restacking, when the game started from the top.
    Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    pub kind: SubspaceKind,
    pub levels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub status: BlockStatus,
    /// Threshold used on the last attempt (N); 0 before any attempt.
    pub threshold: f64,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    Candidate(BlockId),
    SwitchSubspace,
    GameOver,
}

/// What happened to the last candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttemptOutcome {
    Push(PushKind),
    /// Aborted for a reason unrelated to the block; nothing is recorded.
    MinorFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub config: PolicyConfig,
    /// In visiting order.
    pub subspaces: Vec<Subspace>,
    pub current: usize,
    pub level_extractions: BTreeMap<usize, u32>,
    pub schedule: ThresholdSchedule,
    pub memory: BTreeMap<BlockId, MemoryRecord>,
    pub level_orientation: BTreeMap<usize, Orientation>,
    pub level_blocks: BTreeMap<usize, Vec<BlockId>>,
    pub extra_levels: Vec<usize>,
    pub last_candidate: Option<BlockId>,
    pub started_high: bool,
}

/// Attempts and extractions needed to test every level once: three
/// attempts and one extraction per level.
pub fn minimum_budget(testable_levels: usize) -> (usize, usize) {
    (3 * testable_levels, testable_levels)
}

pub fn init_policy(tower: &TowerState, config: &PolicyConfig, seed: u64) -> Result<PolicyState, PolicyError> {
    let lo = config.workspace_min_level.max(1);
    let hi = config
        .workspace_max_level
        .min(tower.level_count().saturating_sub(config.excluded_top_levels));
    if hi < lo || hi - lo + 1 < 4 {
        return Err(PolicyError::InvalidWorkspace(format!(
            "testable levels {lo}..={hi} cannot form two sub-spaces of at least two levels"
        )));
    }
    if !(config.thr_conservative > 0.0 && config.thr_conservative < config.thr_aggressive) {
        return Err(PolicyError::InvalidWorkspace("thresholds must satisfy 0 < conservative < aggressive".into()));
    }
    let n = hi - lo + 1;
    let split = lo + n.div_ceil(2);
    let low = Subspace {
        kind: SubspaceKind::Low,
        levels: (lo..split).collect(),
    };
    let high = Subspace {
        kind: SubspaceKind::High,
        levels: (split..=hi).collect(),
    };
    let started_high = match config.start {
        StartChoice::High => true,
        StartChoice::Low => false,
        StartChoice::Random => stream_rng(seed, stream::POLICY).random_bool(0.5),
    };
    let subspaces = if started_high {
        vec![
            high,
            low,
            Subspace {
                kind: SubspaceKind::Extra,
                levels: Vec::new(),
            },
        ]
    } else {
        vec![low, high]
    };
    let mut state = PolicyState {
        config: config.clone(),
        subspaces,
        current: 0,
        level_extractions: BTreeMap::new(),
        schedule: ThresholdSchedule {
            thr_aggressive: config.thr_aggressive,
            thr_conservative: config.thr_conservative,
            phase: Phase::FirstSubspace,
        },
        memory: BTreeMap::new(),
        level_orientation: BTreeMap::new(),
        level_blocks: BTreeMap::new(),
        extra_levels: Vec::new(),
        last_candidate: None,
        started_high,
    };
    for level in lo..=hi {
        state.track_level(tower, level);
    }
    Ok(state)
}

impl PolicyState {
    fn track_level(&mut self, tower: &TowerState, level: usize) {
        self.level_extractions.entry(level).or_insert(tower.extracted_count[level - 1]);
        self.level_orientation.insert(level, tower.orientation(level));
        let members = tower.present_in_level(level);
        self.level_blocks.insert(level, members.clone());
        for id in members {
            self.memory.entry(id).or_insert(MemoryRecord {
                status: tower.blocks[id].status,
                threshold: 0.0,
                attempts: 0,
            });
        }
    }

    pub fn current_threshold(&self) -> f64 {
        self.schedule.active()
    }

    pub fn current_subspace(&self) -> &Subspace {
        &self.subspaces[self.current]
    }

    /// All levels the policy may test, in sub-space order.
    pub fn testable_levels(&self) -> Vec<usize> {
        self.subspaces.iter().flat_map(|s| s.levels.iter().copied()).collect()
    }

    /// Attempt and extraction budget for the levels registered so far.
    pub fn budget(&self) -> (usize, usize) {
        minimum_budget(self.testable_levels().len())
    }

    fn candidates(&self, subspace: usize) -> Vec<BlockId> {
        let mut out = Vec::new();
        for &level in &self.subspaces[subspace].levels {
            if self.level_extractions.get(&level).copied().unwrap_or(0) > 0 {
                continue;
            }
            out.extend(self.level_members(level).filter(|id| self.memory[id].status == BlockStatus::Present));
        }
        out
    }

    fn level_members(&self, level: usize) -> impl Iterator<Item = BlockId> + '_ {
        self.level_blocks.get(&level).into_iter().flatten().copied()
    }

    fn retry_candidates(&self) -> Vec<BlockId> {
        let thr = self.current_threshold();
        self.testable_levels()
            .into_iter()
            .filter(|l| self.level_extractions.get(l).copied().unwrap_or(0) == 0)
            .flat_map(|l| self.level_members(l).collect::<Vec<_>>())
            .filter(|id| {
                let r = &self.memory[id];
                r.status == BlockStatus::Tested && r.attempts == 1 && r.threshold != thr
            })
            .collect()
    }

    pub fn select_block(&mut self, tower: &TowerState, seed: u64) -> Result<Selection, PolicyError> {
        if tower.collapsed {
            return Err(PolicyError::CollapsedTower);
        }
        let pool = self.candidates(self.current);
        if !pool.is_empty() {
            let mut rng = stream_rng(seed, stream::POLICY);
            let id = pool[rng.random_range(0..pool.len())];
            self.last_candidate = Some(id);
            return Ok(Selection::Candidate(id));
        }
        if let Some(next) = (self.current + 1..self.subspaces.len()).find(|&s| !self.candidates(s).is_empty()) {
            self.current = next;
            self.schedule.phase = Phase::SecondSubspace;
            self.last_candidate = None;
            return Ok(Selection::SwitchSubspace);
        }
        if self.config.retry_gate {
            let pool = self.retry_candidates();
            if !pool.is_empty() {
                let mut rng = stream_rng(seed, stream::POLICY);
                let id = pool[rng.random_range(0..pool.len())];
                self.last_candidate = Some(id);
                return Ok(Selection::Candidate(id));
            }
        }
        self.last_candidate = None;
        Ok(Selection::GameOver)
    }

    pub fn record_outcome(&mut self, block: BlockId, outcome: AttemptOutcome) -> Result<(), PolicyError> {
        if self.last_candidate != Some(block) {
            return Err(PolicyError::UnknownBlock(block));
        }
        let kind = match outcome {
            AttemptOutcome::MinorFailure => return Ok(()),
            AttemptOutcome::Push(kind) => kind,
        };
        let thr = self.current_threshold();
        let level = self
            .level_blocks
            .iter()
            .find(|(_, ids)| ids.contains(&block))
            .map(|(&l, _)| l)
            .ok_or(PolicyError::UnknownBlock(block))?;
        let rec = self.memory.get_mut(&block).ok_or(PolicyError::UnknownBlock(block))?;
        rec.attempts += 1;
        rec.threshold = thr;
        match kind {
            PushKind::Extracted => {
                rec.status = BlockStatus::Extracted;
                *self.level_extractions.entry(level).or_insert(0) += 1;
            }
            PushKind::Stuck | PushKind::Aborted => rec.status = BlockStatus::Tested,
        }
        self.last_candidate = None;
        Ok(())
    }

    /// Makes the level two below the newest complete level testable.
    /// Returns the registered level.
    pub fn register_new_level(&mut self, tower: &TowerState) -> Result<usize, PolicyError> {
        let top = tower.top_complete_level();
        let level = top.saturating_sub(self.config.excluded_top_levels);
        let highest_known = self.testable_levels().into_iter().max().unwrap_or(0);
        if level <= highest_known || top != tower.level_count() {
            return Err(PolicyError::IncompleteLevel);
        }
        let target = if self.started_high {
            self.subspaces.len() - 1
        } else {
            self.subspaces.iter().position(|s| s.kind == SubspaceKind::High).expect("high sub-space exists")
        };
        self.subspaces[target].levels.push(level);
        self.extra_levels.push(level);
        self.track_level(tower, level);
        Ok(level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tower::{new_tower, TowerConfig};

    fn setup(start: StartChoice) -> (TowerState, PolicyState) {
        let mut tower = new_tower(
            &TowerConfig {
                levels: 16,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        tower.capacity = f64::INFINITY;
        let cfg = PolicyConfig {
            start,
            ..Default::default()
        };
        let policy = init_policy(&tower, &cfg, 1).unwrap();
        (tower, policy)
    }

    fn candidate(p: &mut PolicyState, t: &TowerState, seed: u64) -> BlockId {
        match p.select_block(t, seed).unwrap() {
            Selection::Candidate(id) => id,
            other => panic!("expected a candidate, got {other:?}"),
        }
    }

    #[test]
    fn fourteen_levels_split_evenly() {
        let (_, p) = setup(StartChoice::Low);
        assert_eq!(p.subspaces.len(), 2);
        assert_eq!(p.subspaces[0].levels, (1..=7).collect::<Vec<_>>());
        assert_eq!(p.subspaces[1].levels, (8..=14).collect::<Vec<_>>());
        assert_eq!(p.budget(), (42, 14));
        assert_eq!(minimum_budget(14), (42, 14));
        assert_eq!(p.level_orientation.len(), 14);
    }

    #[test]
    fn starting_high_plans_three_subspaces() {
        let (_, p) = setup(StartChoice::High);
        let kinds: Vec<_> = p.subspaces.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![SubspaceKind::High, SubspaceKind::Low, SubspaceKind::Extra]);
    }

    #[test]
    fn random_start_is_deterministic() {
        let tower = new_tower(&TowerConfig::default(), 5).unwrap();
        let cfg = PolicyConfig::default();
        for seed in 0..10 {
            assert_eq!(init_policy(&tower, &cfg, seed).unwrap(), init_policy(&tower, &cfg, seed).unwrap());
        }
        let highs = (0..200).filter(|&s| init_policy(&tower, &cfg, s).unwrap().started_high).count();
        assert!((60..140).contains(&highs));
    }

    #[test]
    fn small_workspace_is_rejected() {
        let tower = new_tower(&TowerConfig::default(), 5).unwrap();
        let cfg = PolicyConfig {
            workspace_min_level: 5,
            workspace_max_level: 7,
            ..Default::default()
        };
        assert!(matches!(init_policy(&tower, &cfg, 0), Err(PolicyError::InvalidWorkspace(_))));
    }

    #[test]
    fn fresh_selection_comes_from_the_starting_subspace() {
        let (t, mut p) = setup(StartChoice::Low);
        for seed in 0..20 {
            let id = candidate(&mut p, &t, seed);
            assert!(p.subspaces[0].levels.contains(&t.blocks[id].level));
            assert_eq!(t.blocks[id].status, BlockStatus::Present);
        }
    }

    #[test]
    fn extraction_closes_the_level() {
        let (t, mut p) = setup(StartChoice::Low);
        let id = candidate(&mut p, &t, 3);
        let level = t.blocks[id].level;
        p.record_outcome(id, AttemptOutcome::Push(PushKind::Extracted)).unwrap();
        for seed in 0..200 {
            match p.select_block(&t, seed).unwrap() {
                Selection::Candidate(c) => assert_ne!(t.blocks[c].level, level),
                _ => break,
            }
        }
    }

    #[test]
    fn stuck_block_leaves_its_siblings_selectable() {
        let (t, mut p) = setup(StartChoice::Low);
        let id = candidate(&mut p, &t, 3);
        let level = t.blocks[id].level;
        p.record_outcome(id, AttemptOutcome::Push(PushKind::Stuck)).unwrap();
        assert_eq!(p.memory[&id].status, BlockStatus::Tested);
        assert_eq!(p.memory[&id].attempts, 1);
        assert_eq!(p.memory[&id].threshold, 0.32);
        let mut seen_sibling = false;
        for seed in 0..300 {
            let c = candidate(&mut p, &t, seed);
            assert_ne!(c, id);
            seen_sibling |= t.blocks[c].level == level;
        }
        assert!(seen_sibling);
    }

    #[test]
    fn minor_failure_leaves_buffer_untouched() {
        let (t, mut p) = setup(StartChoice::Low);
        let id = candidate(&mut p, &t, 3);
        let before = p.clone();
        p.record_outcome(id, AttemptOutcome::MinorFailure).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn outcome_for_a_foreign_block_is_rejected() {
        let (t, mut p) = setup(StartChoice::Low);
        let id = candidate(&mut p, &t, 3);
        assert_eq!(
            p.record_outcome(id + 1, AttemptOutcome::Push(PushKind::Stuck)),
            Err(PolicyError::UnknownBlock(id + 1))
        );
    }

    #[test]
    fn exhausting_a_subspace_switches_and_lowers_the_threshold() {
        let (t, mut p) = setup(StartChoice::Low);
        assert_eq!(p.current_threshold(), 0.32);
        let mut thresholds = vec![p.current_threshold()];
        let mut switches = 0;
        for seed in 0.. {
            match p.select_block(&t, seed).unwrap() {
                Selection::Candidate(id) => p.record_outcome(id, AttemptOutcome::Push(PushKind::Stuck)).unwrap(),
                Selection::SwitchSubspace => switches += 1,
                Selection::GameOver => break,
            }
            thresholds.push(p.current_threshold());
        }
        assert_eq!(switches, 1);
        assert!(thresholds.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*thresholds.last().unwrap(), 0.18);
        assert!(p.memory.values().all(|r| r.attempts == 1));
    }

    #[test]
    fn new_levels_become_testable_two_below_the_top() {
        let (mut t, mut p) = setup(StartChoice::High);
        assert_eq!(p.register_new_level(&t), Err(PolicyError::IncompleteLevel));
        let mut registered = Vec::new();
        for level in 1..=6 {
            let id = t.layers[level - 1][0].unwrap();
            t.apply_extraction(id).unwrap();
            t.place_extracted_on_top(id).unwrap();
            if t.level_complete(t.level_count()) {
                registered.push(p.register_new_level(&t).unwrap());
                assert_eq!(p.register_new_level(&t), Err(PolicyError::IncompleteLevel));
            } else {
                assert_eq!(p.register_new_level(&t), Err(PolicyError::IncompleteLevel));
            }
        }
        assert_eq!(registered, vec![15, 16]);
        assert_eq!(p.subspaces[2].levels, vec![15, 16]);
        assert_eq!(p.budget(), (48, 16));
    }

    #[test]
    fn low_start_folds_new_levels_into_the_high_subspace() {
        let (mut t, mut p) = setup(StartChoice::Low);
        for level in 1..=3 {
            let id = t.layers[level - 1][0].unwrap();
            t.apply_extraction(id).unwrap();
            t.place_extracted_on_top(id).unwrap();
        }
        assert_eq!(p.register_new_level(&t), Ok(15));
        assert_eq!(p.subspaces.len(), 2);
        assert_eq!(*p.subspaces[1].levels.last().unwrap(), 15);
    }

    #[test]
    fn retry_gate_allows_one_more_attempt_after_the_phase_change() {
        let (t, mut p) = setup(StartChoice::Low);
        p.config.retry_gate = true;
        let mut retried = false;
        for seed in 0..2000 {
            match p.select_block(&t, seed).unwrap() {
                Selection::Candidate(id) => {
                    if p.memory[&id].attempts == 1 {
                        retried = true;
                        assert_eq!(p.memory[&id].threshold, 0.32);
                    }
                    p.record_outcome(id, AttemptOutcome::Push(PushKind::Stuck)).unwrap();
                }
                Selection::SwitchSubspace => {}
                Selection::GameOver => break,
            }
        }
        assert!(retried);
        assert!(p.memory.values().all(|r| r.attempts <= 2));
    }

    #[test]
    fn collapsed_tower_is_rejected() {
        let (mut t, mut p) = setup(StartChoice::Low);
        t.collapsed = true;
        assert_eq!(p.select_block(&t, 0), Err(PolicyError::CollapsedTower));
    }
}
