use super::EnvKind;

/// Control penalty weight for the swimmer and 3D locomotion rewards.
pub const CTRL_WEIGHT: f64 = 0.0001;

/// Per-step reward.
///
/// * 2D locomotion: `|dx| / dt + 1`
/// * gap crosser: `|dx| / dt + 0.1`
/// * swimmer and 3D locomotion: `|dx| / dt - w * (1/J) * sum_u |a_u|^2`
///
/// `actions` holds every control component of every joint; `n_joints` is
/// the total joint count `J`.
pub fn reward_formula(kind: EnvKind, dx: f64, dt: f64, actions: &[f64], n_joints: usize) -> f64 {
    let speed = dx.abs() / dt;
    match kind {
        EnvKind::Loco2d => speed + 1.0,
        EnvKind::Gap => speed + 0.1,
        EnvKind::Swimmer | EnvKind::Reward3dTest => {
            let sq: f64 = actions.iter().map(|a| a * a).sum();
            speed - CTRL_WEIGHT * sq / n_joints.max(1) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loco2d_unit_speed() {
        assert_eq!(reward_formula(EnvKind::Loco2d, 0.008, 0.008, &[0.3], 2), 2.0);
        assert_eq!(reward_formula(EnvKind::Loco2d, -0.008, 0.008, &[], 1), 2.0);
    }

    #[test]
    fn reward3d_zero_actions() {
        assert_eq!(reward_formula(EnvKind::Reward3dTest, 0.04, 0.04, &[0.0, 0.0], 3), 1.0);
    }

    #[test]
    fn gap_crosser() {
        let r = reward_formula(EnvKind::Gap, 0.016, 0.008, &[], 1);
        assert!((r - 2.1).abs() < 1e-15);
    }

    #[test]
    fn swimmer_idle_is_zero() {
        assert_eq!(reward_formula(EnvKind::Swimmer, 0.0, 0.04, &[0.0, 0.0], 3), 0.0);
    }

    #[test]
    fn control_penalty_only() {
        // J = 2, each joint's action has squared norm 1
        let r = reward_formula(EnvKind::Reward3dTest, 0.0, 0.04, &[1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(r, -0.0001);
    }
}
