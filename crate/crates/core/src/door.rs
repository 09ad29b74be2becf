//! Planar door world: handle arc geometry, an impedance-controlled end
//! effector coupled to the handle, effective/harmful force decomposition and
//! semi-implicit time stepping with grasp-loss detection.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::runtime::{EpisodeTrace, Termination};

/// Angular speed below which the hinge may stick.
pub const STICTION_SPEED: f64 = 1e-4;
/// Allowed deviation of a tangent from unit norm before it is rejected.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DoorError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("tangent {0:?} is not unit length")]
    NonUnitTangent(Vec2),
    #[error("step size {given} differs from scene dt {expected}")]
    StepSize { given: f64, expected: f64 },
    #[error("non-finite door state")]
    NonFinite,
}

/// One randomized door-opening scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub hinge_position: Vec2,
    /// Hinge-to-handle distance.
    pub door_radius: f64,
    /// World-frame angle of the handle when the door is closed.
    pub initial_angle: f64,
    /// +1 opens counter-clockwise, -1 clockwise.
    pub opening_sign: f64,
    pub door_inertia: f64,
    pub hinge_damping: f64,
    pub hinge_friction: f64,
    pub controller_stiffness: f64,
    pub controller_damping: f64,
    pub grasp_break_distance: f64,
    pub success_angle: f64,
    pub dt: f64,
    pub episode_time_budget: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DoorError> {
        let bad = |what: &str| Err(DoorError::InvalidScene(what.to_string()));
        let finite = [
            self.hinge_position.x,
            self.hinge_position.y,
            self.door_radius,
            self.initial_angle,
            self.door_inertia,
            self.hinge_damping,
            self.hinge_friction,
            self.controller_stiffness,
            self.controller_damping,
            self.grasp_break_distance,
            self.success_angle,
            self.dt,
            self.episode_time_budget,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite field");
        }
        if self.door_radius <= 0.0 {
            return bad("door_radius must be positive");
        }
        if self.opening_sign != 1.0 && self.opening_sign != -1.0 {
            return bad("opening_sign must be +1 or -1");
        }
        if self.door_inertia <= 0.0 {
            return bad("door_inertia must be positive");
        }
        if self.hinge_damping < 0.0 || self.hinge_friction < 0.0 {
            return bad("hinge damping and friction must be non-negative");
        }
        if self.controller_stiffness <= 0.0 {
            return bad("controller_stiffness must be positive");
        }
        if self.controller_damping < 0.0 {
            return bad("controller_damping must be non-negative");
        }
        if self.grasp_break_distance <= 0.0 {
            return bad("grasp_break_distance must be positive");
        }
        if self.dt <= 0.0 {
            return bad("dt must be positive");
        }
        if !(self.success_angle > 0.0 && self.success_angle < std::f64::consts::PI) {
            return bad("success_angle must lie in (0, pi)");
        }
        Ok(())
    }

    /// Number of physics ticks that fit in the time budget.
    pub fn max_ticks(&self) -> usize {
        (self.episode_time_budget / self.dt + 1e-9).floor() as usize
    }

    fn world_angle(&self, theta: f64) -> f64 {
        self.initial_angle + self.opening_sign * theta
    }
}

/// Opening angle (0 = closed, positive = open) and its rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DoorState {
    pub angle: f64,
    pub angular_velocity: f64,
}

/// Planar force on the handle split along the opening arc.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub raw: Vec2,
    /// Signed tangential component; positive pushes the door open.
    pub effective: f64,
    /// Magnitude of the component orthogonal to the arc.
    pub harmful: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub door_state: DoorState,
    pub force: ForceSample,
    pub ee_position: Vec2,
    pub grasp_intact: bool,
}

pub fn handle_position(scene: &SceneConfig, theta: f64) -> Vec2 {
    scene.hinge_position + Vec2::from_angle(scene.world_angle(theta)) * scene.door_radius
}

/// Unit tangent of the handle arc, oriented toward increasing opening angle.
pub fn handle_tangent(scene: &SceneConfig, theta: f64) -> Vec2 {
    Vec2::from_angle(scene.world_angle(theta)).perp() * scene.opening_sign
}

pub fn decompose_force(force: Vec2, tangent: Vec2) -> Result<ForceSample, DoorError> {
    if (tangent.norm() - 1.0).abs() > UNIT_TOLERANCE {
        return Err(DoorError::NonUnitTangent(tangent));
    }
    let normal = tangent.perp();
    Ok(ForceSample {
        raw: force,
        effective: force.dot(tangent),
        harmful: force.dot(normal).abs(),
    })
}

/// Impedance force of the end effector on the handle.
pub fn impedance_force(
    scene: &SceneConfig,
    state: &DoorState,
    setpoint: Vec2,
    setpoint_velocity: Vec2,
) -> Vec2 {
    let handle = handle_position(scene, state.angle);
    let handle_velocity =
        handle_tangent(scene, state.angle) * (scene.door_radius * state.angular_velocity);
    (setpoint - handle) * scene.controller_stiffness
        + (setpoint_velocity - handle_velocity) * scene.controller_damping
}

/// Advances the door by one tick of length `dt` (which must equal `scene.dt`).
///
/// The reported force is the one applied during this tick, evaluated at the
/// incoming state. Grasp is lost once the disturbed setpoint sits farther
/// than `grasp_break_distance` from the updated handle position.
pub fn step(
    scene: &SceneConfig,
    state: &DoorState,
    command_position: Vec2,
    command_velocity: Vec2,
    disturbance_offset: Vec2,
    dt: f64,
) -> Result<StepResult, DoorError> {
    if dt != scene.dt {
        return Err(DoorError::StepSize {
            given: dt,
            expected: scene.dt,
        });
    }
    let setpoint = command_position + disturbance_offset;
    let raw = impedance_force(scene, state, setpoint, command_velocity);
    let force = decompose_force(raw, handle_tangent(scene, state.angle))?;

    let omega = state.angular_velocity;
    let torque = scene.door_radius * force.effective;
    let drive = torque - scene.hinge_damping * omega;
    let mut new_omega = if omega.abs() < STICTION_SPEED && drive.abs() <= scene.hinge_friction {
        0.0
    } else {
        let direction = if omega.abs() >= STICTION_SPEED {
            omega.signum()
        } else {
            drive.signum()
        };
        let next = omega + dt * (drive - direction * scene.hinge_friction) / scene.door_inertia;
        // Friction brakes the door to rest but cannot reverse it.
        if next * direction < 0.0 && drive * direction > -scene.hinge_friction {
            0.0
        } else {
            next
        }
    };
    let mut new_angle = state.angle + dt * new_omega;
    if new_angle < 0.0 {
        new_angle = 0.0;
        new_omega = new_omega.max(0.0);
    }
    if !new_angle.is_finite() || !new_omega.is_finite() {
        return Err(DoorError::NonFinite);
    }
    let door_state = DoorState {
        angle: new_angle,
        angular_velocity: new_omega,
    };
    let handle = handle_position(scene, new_angle);
    let grasp_intact = (setpoint - handle).norm() <= scene.grasp_break_distance;
    Ok(StepResult {
        door_state,
        force,
        ee_position: if grasp_intact { handle } else { setpoint },
        grasp_intact,
    })
}

/// Ground-truth arc waypoints `k = 1..=horizon` angle steps ahead.
pub fn oracle_plan(scene: &SceneConfig, theta_now: f64, horizon: usize, step: f64) -> Vec<Vec2> {
    (1..=horizon)
        .map(|k| handle_position(scene, theta_now + k as f64 * step))
        .collect()
}

/// The door counts as opened once it reaches `success_angle` while the grasp
/// still holds.
pub fn check_success(trace: &EpisodeTrace, scene: &SceneConfig) -> bool {
    let n = trace.ticks.len();
    trace.ticks.iter().enumerate().any(|(i, tick)| {
        let lost_here = i + 1 == n && trace.termination == Termination::GraspLost;
        !lost_here && tick.angle >= scene.success_angle
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    pub(crate) fn unit_scene() -> SceneConfig {
        SceneConfig {
            hinge_position: Vec2::ZERO,
            door_radius: 1.0,
            initial_angle: 0.0,
            opening_sign: 1.0,
            door_inertia: 5.0,
            hinge_damping: 1.0,
            hinge_friction: 0.5,
            controller_stiffness: 600.0,
            controller_damping: 30.0,
            grasp_break_distance: 0.08,
            success_angle: 30f64.to_radians(),
            dt: 0.01,
            episode_time_budget: 12.0,
            seed: 1,
        }
    }

    fn close(a: Vec2, b: Vec2, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn handle_position_examples() {
        let s = unit_scene();
        assert!(close(handle_position(&s, 0.0), Vec2::new(1.0, 0.0), 1e-15));
        assert!(close(handle_position(&s, FRAC_PI_2), Vec2::new(0.0, 1.0), 1e-15));

        let s = SceneConfig {
            hinge_position: Vec2::new(0.3, -0.2),
            door_radius: 0.8,
            initial_angle: PI,
            opening_sign: -1.0,
            ..unit_scene()
        };
        // Independent evaluation: world angle pi - 0.7.
        let phi = PI - 0.7;
        let expected = Vec2::new(0.3 + 0.8 * phi.cos(), -0.2 + 0.8 * phi.sin());
        assert!(close(handle_position(&s, 0.7), expected, 1e-15));
    }

    #[test]
    fn tangent_examples() {
        let s = unit_scene();
        assert!(close(handle_tangent(&s, 0.0), Vec2::new(0.0, 1.0), 1e-15));
        assert!(close(handle_tangent(&s, FRAC_PI_2), Vec2::new(-1.0, 0.0), 1e-15));
        let flipped = SceneConfig {
            opening_sign: -1.0,
            ..s
        };
        assert!(close(handle_tangent(&flipped, 0.0), Vec2::new(0.0, -1.0), 1e-15));
    }

    #[test]
    fn decomposition_examples() {
        let f = decompose_force(Vec2::new(3.0, 4.0), Vec2::new(1.0, 0.0)).unwrap();
        assert_eq!((f.effective, f.harmful), (3.0, 4.0));
        let f = decompose_force(Vec2::new(5.0, 0.0), Vec2::new(0.0, 1.0)).unwrap();
        assert_eq!((f.effective, f.harmful), (0.0, 5.0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let f = decompose_force(Vec2::new(1.0, 1.0), Vec2::new(h, h)).unwrap();
        assert!((f.effective - 2f64.sqrt()).abs() < 1e-15 && f.harmful < 1e-15);
        assert!(matches!(
            decompose_force(Vec2::new(1.0, 1.0), Vec2::new(1.0, 0.1)),
            Err(DoorError::NonUnitTangent(_))
        ));
    }

    #[test]
    fn equilibrium_holds_still() {
        let s = unit_scene();
        let st = DoorState {
            angle: 0.3,
            angular_velocity: 0.0,
        };
        let h = handle_position(&s, 0.3);
        let r = step(&s, &st, h, Vec2::ZERO, Vec2::ZERO, s.dt).unwrap();
        assert!(r.force.raw.norm() < 1e-12);
        assert_eq!(r.door_state.angle, 0.3);
        assert!(r.grasp_intact);
        assert_eq!(r.ee_position, handle_position(&s, r.door_state.angle));
    }

    #[test]
    fn large_offset_breaks_grasp() {
        let s = unit_scene();
        let st = DoorState::default();
        let far = handle_position(&s, 0.0) + Vec2::new(0.1, 0.0);
        let r = step(&s, &st, far, Vec2::ZERO, Vec2::ZERO, s.dt).unwrap();
        assert!(!r.grasp_intact);
    }

    #[test]
    fn door_stops_at_closed() {
        let s = unit_scene();
        let st = DoorState {
            angle: 0.0,
            angular_velocity: 0.0,
        };
        let pull = handle_position(&s, 0.0) - handle_tangent(&s, 0.0) * 0.05;
        let r = step(&s, &st, pull, Vec2::ZERO, Vec2::ZERO, s.dt).unwrap();
        assert_eq!(r.door_state.angle, 0.0);
        assert_eq!(r.door_state.angular_velocity, 0.0);
    }

    #[test]
    fn wrong_step_size_rejected() {
        let s = unit_scene();
        assert!(matches!(
            step(&s, &DoorState::default(), Vec2::ZERO, Vec2::ZERO, Vec2::ZERO, 0.02),
            Err(DoorError::StepSize { .. })
        ));
    }

    #[test]
    fn stiction_holds_under_small_push() {
        let s = unit_scene();
        let push = handle_position(&s, 0.2) + handle_tangent(&s, 0.2) * 0.0005;
        let st = DoorState {
            angle: 0.2,
            angular_velocity: 0.0,
        };
        // 600 N/m * 0.5 mm * 1 m = 0.3 N m < 0.5 N m friction.
        let r = step(&s, &st, push, Vec2::ZERO, Vec2::ZERO, s.dt).unwrap();
        assert_eq!(r.door_state, st);
    }

    #[test]
    fn oracle_plan_examples() {
        let s = unit_scene();
        let p = oracle_plan(&s, 0.0, 1, FRAC_PI_2);
        assert!(close(p[0], Vec2::new(0.0, 1.0), 1e-15));
        let p = oracle_plan(&s, 0.4, 3, 0.0);
        assert!(p.iter().all(|w| *w == handle_position(&s, 0.4)));
    }

    #[test]
    fn invalid_scenes_rejected() {
        let s = unit_scene();
        assert!(s.validate().is_ok());
        for broken in [
            SceneConfig { door_radius: 0.0, ..s.clone() },
            SceneConfig { door_inertia: -1.0, ..s.clone() },
            SceneConfig { controller_stiffness: 0.0, ..s.clone() },
            SceneConfig { controller_damping: -0.1, ..s.clone() },
            SceneConfig { grasp_break_distance: 0.0, ..s.clone() },
            SceneConfig { dt: 0.0, ..s.clone() },
            SceneConfig { success_angle: PI, ..s.clone() },
            SceneConfig { opening_sign: 0.5, ..s.clone() },
        ] {
            assert!(broken.validate().is_err(), "{broken:?}");
        }
    }
}
