//! Planar environments: 2D locomotion, swimmer and gap crosser.
//!
//! Designs are simulated by [`PlanarSim`], a reduced-coordinate articulated
//! body with a floating root, hinge joints, implicit viscous damping and
//! penalty ground contact.

mod body;
pub mod reward;
pub mod terrain;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use body::{PlanarSim, StepResult};
pub use reward::{reward_formula, CTRL_WEIGHT};
pub use terrain::Terrain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "loco2d")]
    Loco2d,
    #[serde(rename = "swimmer")]
    Swimmer,
    #[serde(rename = "gap")]
    Gap,
    /// Reward formula of 3D locomotion only; has no dynamics.
    #[serde(rename = "reward3d-test")]
    Reward3dTest,
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loco2d" => Ok(Self::Loco2d),
            "swimmer" => Ok(Self::Swimmer),
            "gap" => Ok(Self::Gap),
            "reward3d-test" => Ok(Self::Reward3dTest),
            other => Err(EnvError::Config(format!("unknown env {other:?}"))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Loco2d => "loco2d",
            Self::Swimmer => "swimmer",
            Self::Gap => "gap",
            Self::Reward3dTest => "reward3d-test",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("design rejected: {0}")]
    Design(String),
    #[error("expected {expected} actions, got {got}")]
    ActionDim { expected: usize, got: usize },
    #[error("simulation already finished")]
    Finished,
}

/// Linear maps from normalized attributes in `[-1, 1]` to physical values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttrRanges {
    pub bone_length: (f64, f64),
    pub bone_size: (f64, f64),
    pub gear: (f64, f64),
}

impl Default for AttrRanges {
    fn default() -> Self {
        Self {
            bone_length: (0.1, 1.0),
            bone_size: (0.02, 0.12),
            gear: (10.0, 300.0),
        }
    }
}

fn lerp_unit(range: (f64, f64), v: f64) -> f64 {
    let t = (v.clamp(-1.0, 1.0) + 1.0) * 0.5;
    range.0 + t * (range.1 - range.0)
}

impl AttrRanges {
    pub fn radius(&self, bone_size: f64) -> f64 {
        lerp_unit(self.bone_size, bone_size)
    }

    pub fn gear(&self, motor_gear: f64) -> f64 {
        lerp_unit(self.gear, motor_gear)
    }

    /// Bone length and rest direction from the normalized bone vector.
    ///
    /// The norm of `(x, z)`, capped at 1, maps linearly onto the length
    /// range; a near-zero vector points along `+x`.
    pub fn bone(&self, x: f64, z: f64) -> (f64, [f64; 2]) {
        let norm = (x * x + z * z).sqrt();
        let dir = if norm > 1e-9 { [x / norm, z / norm] } else { [1.0, 0.0] };
        let (lo, hi) = self.bone_length;
        (lo + norm.min(1.0) * (hi - lo), dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Seconds per control step.
    pub dt: f64,
    pub substeps: usize,
    pub gravity: f64,
    pub viscosity: f64,
    /// Per unit length drag coefficients, scaled by viscosity.
    pub drag_normal: f64,
    pub drag_tangent: f64,
    pub terrain: Terrain,
    pub max_children: usize,
    pub horizon: usize,
    pub termination_height: Option<f64>,
    pub spawn_height: f64,
    pub density: f64,
    pub armature: f64,
    pub joint_damping: f64,
    pub joint_limit: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub friction: f64,
    pub friction_damping: f64,
    pub ranges: AttrRanges,
}

impl EnvConfig {
    pub fn for_kind(kind: EnvKind) -> Self {
        let base = Self {
            kind,
            dt: 0.008,
            substeps: 4,
            gravity: 9.81,
            viscosity: 0.0,
            drag_normal: 0.0,
            drag_tangent: 0.0,
            terrain: Terrain::Flat,
            max_children: 3,
            horizon: 1000,
            termination_height: Some(0.7),
            spawn_height: 1.4,
            density: 1000.0,
            armature: 0.05,
            joint_damping: 1.0,
            joint_limit: 1.75,
            contact_stiffness: 5.0e4,
            contact_damping: 1.0e3,
            friction: 0.9,
            friction_damping: 2.0e3,
            ranges: AttrRanges::default(),
        };
        match kind {
            EnvKind::Loco2d => base,
            EnvKind::Gap => Self {
                terrain: Terrain::Gaps {
                    height: 0.5,
                    width: 0.96,
                    period: 3.2,
                    gap_start: 1.6,
                },
                termination_height: Some(1.0),
                spawn_height: 1.9,
                ..base
            },
            EnvKind::Swimmer | EnvKind::Reward3dTest => Self {
                dt: 0.04,
                gravity: 0.0,
                viscosity: 0.1,
                drag_normal: 2000.0,
                drag_tangent: 200.0,
                terrain: Terrain::None,
                termination_height: None,
                spawn_height: 0.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if !(self.dt > 0.0) || self.substeps == 0 {
            return bad("dt must be positive and substeps at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.max_children == 0 || self.max_children > 9 {
            return bad("max_children must be in 1..=9");
        }
        Ok(())
    }

    /// Extra observation entries on the root row.
    pub fn root_extras(&self) -> usize {
        match self.kind {
            EnvKind::Swimmer | EnvKind::Reward3dTest => 2,
            EnvKind::Loco2d => 3,
            EnvKind::Gap => 4,
        }
    }

    /// Per-joint observation width: angle, velocity, root extras.
    pub fn obs_dim(&self) -> usize {
        2 + self.root_extras()
    }

    pub fn gap_period(&self) -> Option<f64> {
        match self.terrain {
            Terrain::Gaps { period, .. } => Some(period),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_range_endpoints() {
        let r = AttrRanges::default();
        assert_eq!(r.radius(-1.0), 0.02);
        assert_eq!(r.radius(1.0), 0.12);
        assert_eq!(r.gear(-1.0), 10.0);
        assert_eq!(r.gear(1.0), 300.0);
    }

    #[test]
    fn bone_vector_mapping() {
        let r = AttrRanges::default();
        let (len, dir) = r.bone(0.0, -1.0);
        assert_eq!(len, 1.0);
        assert_eq!(dir, [0.0, -1.0]);
        let (len, dir) = r.bone(0.0, 0.0);
        assert_eq!(len, 0.1);
        assert_eq!(dir, [1.0, 0.0]);
    }

    #[test]
    fn env_keys_parse() {
        for k in ["loco2d", "swimmer", "gap", "reward3d-test"] {
            assert_eq!(k.parse::<EnvKind>().unwrap().to_string(), k);
        }
        assert!("mujoco".parse::<EnvKind>().is_err());
    }

    #[test]
    fn reference_constants() {
        let gap = EnvConfig::for_kind(EnvKind::Gap);
        assert_eq!(gap.termination_height, Some(1.0));
        assert_eq!(gap.gap_period(), Some(3.2));
        assert_eq!(gap.dt, 0.008);
        let loco = EnvConfig::for_kind(EnvKind::Loco2d);
        assert_eq!(loco.termination_height, Some(0.7));
        assert_eq!(EnvConfig::for_kind(EnvKind::Swimmer).viscosity, 0.1);
    }
}
