//! Joint optimization of agent morphology and control.
//!
//! A single conditional policy first edits an agent's design (skeleton,
//! then joint attributes) over a few reward-free transform steps, then
//! controls the resulting body in a planar physics simulation. All three
//! sub-policies are graph networks over the joint tree and are trained
//! together with PPO.

pub mod baselines;
pub mod design;
pub mod envs;
pub mod experiment;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rollout;
pub mod util;

pub use design::{AttrVector, DesignError, DesignGraph, IndexString, SkeletonAction};
pub use policy::{StageFlag, Transform2ActPolicy};
