//! Episode collection: skeleton transform steps, attribute transform steps,
//! then execution in the simulator with the design frozen.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{AttrVector, DesignError, DesignGraph, ATTR_DIM};
use crate::envs::{EnvConfig, EnvError, PlanarSim};
use crate::policy::{ActMode, Action, PolicyError, PolicyInput, StageFlag, StepRef, Transform2ActPolicy};
use crate::util::rng_from;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("invalid episode config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub n_skeleton: usize,
    pub n_attribute: usize,
    pub initial_design: DesignGraph,
    /// `false` in finetune mode: the skeleton of the initial design is kept.
    pub skeleton_stage_enabled: bool,
}

impl EpisodeConfig {
    pub fn new(initial_design: DesignGraph) -> Self {
        Self {
            n_skeleton: 5,
            n_attribute: 1,
            initial_design,
            skeleton_stage_enabled: true,
        }
    }

    /// Attribute finetuning of a fixed skeleton.
    pub fn finetune(initial_design: DesignGraph, n_attribute: usize) -> Self {
        Self {
            n_skeleton: 0,
            n_attribute,
            initial_design,
            skeleton_stage_enabled: false,
        }
    }

    /// Control only: the initial design is used as is.
    pub fn fixed(initial_design: DesignGraph) -> Self {
        Self::finetune(initial_design, 0)
    }

    pub fn validate(&self) -> Result<(), RolloutError> {
        if !self.skeleton_stage_enabled && self.n_skeleton != 0 {
            return Err(RolloutError::Config("skeleton stage disabled but n_skeleton > 0".into()));
        }
        self.initial_design.validate()?;
        Ok(())
    }

    /// Stage of step `t` for an episode that lasts long enough.
    pub fn stage_at(&self, t: usize) -> StageFlag {
        if t < self.n_skeleton {
            StageFlag::SkeletonTransform
        } else if t < self.n_skeleton + self.n_attribute {
            StageFlag::AttributeTransform
        } else {
            StageFlag::Execution
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub stage: StageFlag,
    /// Design the decision was made on.
    pub design: Arc<DesignGraph>,
    /// Environment observation; only in the execution stage.
    pub obs: Option<Vec<f64>>,
    pub action: Action,
    pub reward: f64,
    pub log_prob: f64,
    pub value: f64,
}

impl Transition {
    pub fn input(&self) -> PolicyInput<'_> {
        PolicyInput {
            design: &self.design,
            stage: self.stage,
            obs: self.obs.as_deref(),
        }
    }

    pub fn step_ref(&self) -> StepRef<'_> {
        StepRef {
            input: self.input(),
            action: &self.action,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeEnd {
    /// Termination condition (fall): no bootstrap.
    Terminated,
    /// Horizon reached: bootstrap with the value of the final state.
    Horizon,
    /// Cut at the batch boundary: bootstrap as for the horizon.
    Budget,
    /// Non-finite physics: no bootstrap.
    Failed,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub end: EpisodeEnd,
    /// Value of the state after the last transition (0 unless bootstrapped).
    pub bootstrap: f64,
    /// Design used in the execution stage.
    pub design: Arc<DesignGraph>,
    pub exec_steps: usize,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn stages(&self) -> Vec<StageFlag> {
        self.transitions.iter().map(|t| t.stage).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Memory {
    pub episodes: Vec<Episode>,
    /// Simulated execution steps; transform steps are free.
    pub exec_steps: usize,
}

impl Memory {
    pub fn push(&mut self, ep: Episode) {
        self.exec_steps += ep.exec_steps;
        self.episodes.push(ep);
    }

    pub fn append(&mut self, other: Memory) {
        for ep in other.episodes {
            self.push(ep);
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns of episodes that ended on their own; falls back to all
    /// episodes when every one was cut at the batch boundary.
    pub fn episode_returns(&self) -> Vec<f64> {
        let done: Vec<f64> = self
            .episodes
            .iter()
            .filter(|e| e.end != EpisodeEnd::Budget)
            .map(Episode::total_reward)
            .collect();
        if done.is_empty() {
            self.episodes.iter().map(Episode::total_reward).collect()
        } else {
            done
        }
    }

    /// Execution-stage observations, for normalizer updates.
    pub fn observations(&self) -> impl Iterator<Item = &[f64]> {
        self.transitions().filter_map(|t| t.obs.as_deref())
    }
}

fn attr_deltas(flat: &[f64]) -> Vec<AttrVector> {
    flat.chunks_exact(ATTR_DIM).map(AttrVector::from_slice).collect()
}

/// Run the skeleton and attribute transform steps only.
fn transform_stage(
    policy: &Transform2ActPolicy,
    ep: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
    mode: ActMode,
) -> Result<(Vec<Transition>, Arc<DesignGraph>), RolloutError> {
    let mut transitions = Vec::new();
    let mut design = Arc::new(ep.initial_design.clone());
    for t in 0..ep.n_skeleton + ep.n_attribute {
        let stage = ep.stage_at(t);
        let input = PolicyInput {
            design: &design,
            stage,
            obs: None,
        };
        let (action, log_prob) = policy.act(&input, mode, rng)?;
        let value = policy.value(&input)?;
        let next = match &action {
            Action::Skeleton(a) => design.apply_skeleton_actions(a)?,
            Action::Attribute(a) => design.apply_attribute_actions(&attr_deltas(a))?,
            Action::Execution(_) => unreachable!("transform stage"),
        };
        transitions.push(Transition {
            stage,
            design: design.clone(),
            obs: None,
            action,
            reward: 0.0,
            log_prob,
            value,
        });
        design = Arc::new(next);
    }
    Ok((transitions, design))
}

/// Design produced by the transform stage, without simulating it.
pub fn transformed_design(
    policy: &Transform2ActPolicy,
    ep: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
    mode: ActMode,
) -> Result<DesignGraph, RolloutError> {
    ep.validate()?;
    let (_, d) = transform_stage(policy, ep, rng, mode)?;
    Ok(Arc::unwrap_or_clone(d))
}

/// Run one episode.
///
/// `max_exec_steps` cuts the execution stage early (batch boundary); the
/// cut episode is bootstrapped with the value of its last state.
pub fn collect_episode(
    policy: &Transform2ActPolicy,
    env: &EnvConfig,
    ep: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
    mode: ActMode,
    max_exec_steps: Option<usize>,
) -> Result<Episode, RolloutError> {
    let (mut transitions, design) = transform_stage(policy, ep, rng, mode)?;

    let mut sim = PlanarSim::build(&design, env, 0)?;
    let limit = max_exec_steps.unwrap_or(usize::MAX);
    let mut exec_steps = 0;
    let mut obs = sim.observation();
    let (end, bootstrap) = loop {
        let input = PolicyInput {
            design: &design,
            stage: StageFlag::Execution,
            obs: Some(&obs),
        };
        let (action, log_prob) = policy.act(&input, mode, rng)?;
        let value = policy.value(&input)?;
        let Action::Execution(torques) = &action else {
            unreachable!("execution stage")
        };
        let res = sim.step(torques)?;
        exec_steps += 1;
        transitions.push(Transition {
            stage: StageFlag::Execution,
            design: design.clone(),
            obs: Some(std::mem::take(&mut obs)),
            action,
            reward: res.reward,
            log_prob,
            value,
        });
        if res.failed {
            break (EpisodeEnd::Failed, 0.0);
        }
        if res.terminated {
            break (EpisodeEnd::Terminated, 0.0);
        }
        obs = sim.observation();
        if res.truncated || exec_steps >= limit {
            let v = policy.value(&PolicyInput {
                design: &design,
                stage: StageFlag::Execution,
                obs: Some(&obs),
            })?;
            let end = if res.truncated { EpisodeEnd::Horizon } else { EpisodeEnd::Budget };
            break (end, v);
        }
    };
    Ok(Episode {
        transitions,
        end,
        bootstrap,
        design,
        exec_steps,
    })
}

/// Number of independent collection streams. Fixed, so that results do
/// not depend on how many threads execute them.
pub const DEFAULT_LANES: usize = 4;

/// Collect exactly `batch_size` execution steps.
///
/// The budget is split over `lanes` streams seeded from
/// `(seed, epoch, lane)`. Lanes run in parallel and are merged in lane
/// order, so the result is independent of the worker count.
pub fn collect_batch(
    policy: &Transform2ActPolicy,
    env: &EnvConfig,
    ep: &EpisodeConfig,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    lanes: usize,
) -> Result<Memory, RolloutError> {
    if batch_size == 0 {
        return Err(RolloutError::Config("batch size must be positive".into()));
    }
    ep.validate()?;
    let lanes = lanes.clamp(1, batch_size);
    let shares: Vec<usize> = (0..lanes)
        .map(|l| batch_size / lanes + usize::from(l < batch_size % lanes))
        .collect();
    let parts: Vec<Result<Memory, RolloutError>> = shares
        .par_iter()
        .enumerate()
        .map(|(lane, &share)| {
            let mut rng = rng_from(seed, &[0x524f_4c4c, epoch, lane as u64]);
            let mut mem = Memory::default();
            while mem.exec_steps < share {
                let left = share - mem.exec_steps;
                mem.push(collect_episode(policy, env, ep, &mut rng, ActMode::Sample, Some(left))?);
            }
            Ok(mem)
        })
        .collect();
    let mut out = Memory::default();
    for p in parts {
        out.append(p?);
    }
    Ok(out)
}

/// Deterministic (argmax) evaluation episodes without a step cap.
pub fn evaluate_policy(
    policy: &Transform2ActPolicy,
    env: &EnvConfig,
    ep: &EpisodeConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>, RolloutError> {
    ep.validate()?;
    (0..episodes)
        .map(|i| {
            let mut rng = rng_from(seed, &[0x4556_414c, i as u64]);
            collect_episode(policy, env, ep, &mut rng, ActMode::Argmax, None)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DEFAULT_MAX_JOINTS;
    use crate::envs::EnvKind;
    use crate::policy::PolicyConfig;

    fn setup(horizon: usize) -> (Transform2ActPolicy, EnvConfig, EpisodeConfig) {
        let mut env = EnvConfig::for_kind(EnvKind::Swimmer);
        env.horizon = horizon;
        let policy = Transform2ActPolicy::new(PolicyConfig {
            gnn: vec![8],
            jsmlp: vec![8],
            value_gnn: vec![8],
            value_mlp: vec![8],
            obs_dim: env.obs_dim(),
            ..PolicyConfig::default()
        });
        let d0 = DesignGraph::chain(&[AttrVector::new(0.5, 0.0, 0.0, 0.0); 3], 3, DEFAULT_MAX_JOINTS);
        (policy, env, EpisodeConfig::new(d0))
    }

    #[test]
    fn stage_pattern_and_zero_transform_reward() {
        let (policy, env, ep) = setup(20);
        let mut rng = rng_from(1, &[]);
        let e = collect_episode(&policy, &env, &ep, &mut rng, ActMode::Sample, None).unwrap();
        let stages = e.stages();
        assert!(stages[..5].iter().all(|s| *s == StageFlag::SkeletonTransform));
        assert_eq!(stages[5], StageFlag::AttributeTransform);
        assert!(stages[6..].iter().all(|s| *s == StageFlag::Execution));
        assert_eq!(e.exec_steps, 20);
        assert_eq!(e.end, EpisodeEnd::Horizon);
        assert!(e.transitions[..6].iter().all(|t| t.reward == 0.0 && t.obs.is_none()));
    }

    #[test]
    fn batch_is_exact_and_lane_count_fixed() {
        let (policy, env, ep) = setup(30);
        let m = collect_batch(&policy, &env, &ep, 101, 5, 0, 4).unwrap();
        assert_eq!(m.exec_steps, 101);
        let again = collect_batch(&policy, &env, &ep, 101, 5, 0, 4).unwrap();
        let r1: Vec<f64> = m.transitions().map(|t| t.reward).collect();
        let r2: Vec<f64> = again.transitions().map(|t| t.reward).collect();
        assert_eq!(r1, r2);
    }

    #[test]
    fn finetune_keeps_skeleton() {
        let (policy, env, ep) = setup(5);
        let ft = EpisodeConfig::finetune(ep.initial_design.clone(), 1);
        let mut rng = rng_from(2, &[]);
        let e = collect_episode(&policy, &env, &ft, &mut rng, ActMode::Sample, None).unwrap();
        assert!(e.design.same_skeleton(&ft.initial_design));
        assert!(!e.design.same_structure(&ft.initial_design));
        assert_eq!(e.transitions[0].stage, StageFlag::AttributeTransform);
    }

    #[test]
    fn disabled_skeleton_stage_with_steps_is_rejected() {
        let (_, _, mut ep) = setup(5);
        ep.skeleton_stage_enabled = false;
        assert!(ep.validate().is_err());
    }
}
