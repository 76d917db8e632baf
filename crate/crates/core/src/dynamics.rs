//! Vehicle kinematics, the IDM car-following model and the head-vehicle
//! disturbance profile.
//!
//! Everything here is a pure function of its arguments; saturation (velocity
//! clamping, CAV acceleration limits) is the caller's business so that these
//! stay exact.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Longitudinal state of a single vehicle. Positions are front-bumper
/// positions in metres along the lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    /// Position (m).
    pub position: f64,
    /// Velocity (m/s).
    pub velocity: f64,
    /// Acceleration (m/s^2).
    pub acceleration: f64,
}

impl KinematicState {
    pub fn new(position: f64, velocity: f64, acceleration: f64) -> Self {
        Self {
            position,
            velocity,
            acceleration,
        }
    }
}

/// IDM parameters for one vehicle class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Maximum acceleration a (m/s^2).
    pub max_accel: f64,
    /// Comfortable deceleration b (m/s^2).
    pub comfort_decel: f64,
    /// Minimum gap s0 (m).
    pub min_gap: f64,
    /// Desired time headway T0 (s).
    pub time_headway: f64,
    /// Desired (free-flow) speed v0 (m/s).
    pub desired_speed: f64,
    /// Vehicle length l (m).
    pub length: f64,
}

impl IdmParams {
    /// Passenger-car calibration used throughout the control experiments.
    pub fn car() -> Self {
        Self {
            max_accel: 1.13,
            comfort_decel: 4.0,
            min_gap: 8.16,
            time_headway: 1.13,
            desired_speed: 35.96,
            length: 4.24,
        }
    }

    /// Truck calibration.
    pub fn truck() -> Self {
        Self {
            max_accel: 1.5,
            comfort_decel: 4.0,
            min_gap: 9.66,
            time_headway: 1.72,
            desired_speed: 54.25,
            length: 11.82,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("max_accel", self.max_accel),
            ("comfort_decel", self.comfort_decel),
            ("min_gap", self.min_gap),
            ("time_headway", self.time_headway),
            ("desired_speed", self.desired_speed),
            ("length", self.length),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CoreError::InvalidParameter(format!(
                    "IDM parameter {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal head-vehicle velocity profile used to excite stop-and-go waves:
/// constant `base_speed` until `onset`, then
/// `base_speed - amplitude * sin(angular_rate * (t - onset))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadProfile {
    pub base_speed: f64,
    pub amplitude: f64,
    pub angular_rate: f64,
    pub onset: f64,
    pub duration: f64,
}

impl Default for LeadProfile {
    fn default() -> Self {
        Self {
            base_speed: 25.0,
            amplitude: 5.0,
            angular_rate: 0.1667,
            onset: 4.8,
            duration: 180.0,
        }
    }
}

impl LeadProfile {
    /// Constant-speed profile (no disturbance).
    pub fn constant(speed: f64, duration: f64) -> Self {
        Self {
            base_speed: speed,
            amplitude: 0.0,
            angular_rate: 0.0,
            onset: 0.0,
            duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitude >= self.base_speed {
            return Err(CoreError::InvalidParameter(format!(
                "lead profile amplitude {} must stay below base speed {}",
                self.amplitude, self.base_speed
            )));
        }
        if self.amplitude < 0.0 || self.base_speed <= 0.0 || self.duration <= 0.0 {
            return Err(CoreError::InvalidParameter(
                "lead profile fields must be non-negative with positive base speed/duration".into(),
            ));
        }
        Ok(())
    }
}

/// Exact one-step triple-integrator update for a jerk-controlled vehicle:
/// p' = p + v dt, v' = v + a dt, a' = a + u dt.
///
/// No clamping happens here; the simulator applies velocity and acceleration
/// saturation at world-advance time.
pub fn step_cav_kinematics(state: KinematicState, jerk: f64, dt: f64) -> KinematicState {
    debug_assert!(dt > 0.0);
    KinematicState {
        position: state.position + state.velocity * dt,
        velocity: state.velocity + state.acceleration * dt,
        acceleration: state.acceleration + jerk * dt,
    }
}

/// IDM acceleration.
///
/// `gap` is the bumper-to-bumper spacing to the predecessor and
/// `approach_rate` is v_self - v_pred (positive while closing in). The
/// desired gap s* is floored at s0 so a strongly opening gap cannot push the
/// dynamic term negative.
pub fn idm_acceleration(
    velocity: f64,
    gap: f64,
    approach_rate: f64,
    params: &IdmParams,
) -> Result<f64> {
    if gap <= 0.0 {
        return Err(CoreError::Collision {
            vehicle: 0,
            time: 0.0,
            gap,
        });
    }
    let s_star = (params.min_gap
        + velocity * params.time_headway
        + velocity * approach_rate / (2.0 * (params.max_accel * params.comfort_decel).sqrt()))
    .max(params.min_gap);
    Ok(params.max_accel
        * (1.0 - (velocity / params.desired_speed).powi(4) - (s_star / gap).powi(2)))
}

/// Gap at which IDM acceleration is exactly zero for a steady speed
/// (`approach_rate` = 0), found by bisection on the IDM formula.
///
/// Used to seed platoons at equilibrium and as an independent oracle in
/// tests.
pub fn idm_equilibrium_gap(velocity: f64, params: &IdmParams) -> f64 {
    // a(v, gap, 0) is monotone increasing in gap, negative at s0 for v > 0
    // and positive for a huge gap as long as v < v0.
    let mut lo = params.min_gap * 0.5;
    let mut hi = 1.0e6;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let a = idm_acceleration(velocity, mid, 0.0, params).expect("positive gap");
        if a > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Head-vehicle velocity at time `t`.
pub fn leading_velocity(t: f64, profile: &LeadProfile) -> Result<f64> {
    if t < 0.0 || t > profile.duration {
        return Err(CoreError::ProfileOutOfRange {
            t,
            duration: profile.duration,
        });
    }
    if t <= profile.onset {
        Ok(profile.base_speed)
    } else {
        Ok(profile.base_speed - profile.amplitude * (profile.angular_rate * (t - profile.onset)).sin())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cav_step_matches_hand_values() {
        let s = step_cav_kinematics(KinematicState::new(0.0, 10.0, 1.0), 0.0, 0.12);
        assert_relative_eq!(s.position, 1.2, epsilon = 1e-12);
        assert_relative_eq!(s.velocity, 10.12, epsilon = 1e-12);
        assert_relative_eq!(s.acceleration, 1.0, epsilon = 1e-12);

        let s = step_cav_kinematics(KinematicState::new(5.0, 0.0, 0.0), 6.0, 0.12);
        assert_relative_eq!(s.position, 5.0, epsilon = 1e-12);
        assert_relative_eq!(s.velocity, 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.acceleration, 0.72, epsilon = 1e-12);
    }

    #[test]
    fn cav_step_repeated_application() {
        // Ten zero-jerk steps at constant speed travel v * 10 dt exactly.
        let mut s = KinematicState::new(0.0, 25.0, 0.0);
        for _ in 0..10 {
            s = step_cav_kinematics(s, 0.0, 0.12);
        }
        assert_relative_eq!(s.position, 30.0, epsilon = 1e-12);
        assert_relative_eq!(s.velocity, 25.0, epsilon = 1e-12);
        assert_relative_eq!(s.acceleration, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cav_step_is_linear() {
        // Stepping a convex combination equals the combination of steps.
        let a = (KinematicState::new(1.0, 2.0, 0.5), 1.5);
        let b = (KinematicState::new(-3.0, 7.0, -0.2), -2.0);
        let lambda = 0.37;
        let mix = KinematicState::new(
            lambda * a.0.position + (1.0 - lambda) * b.0.position,
            lambda * a.0.velocity + (1.0 - lambda) * b.0.velocity,
            lambda * a.0.acceleration + (1.0 - lambda) * b.0.acceleration,
        );
        let mix_jerk = lambda * a.1 + (1.0 - lambda) * b.1;
        let stepped_mix = step_cav_kinematics(mix, mix_jerk, 0.12);
        let sa = step_cav_kinematics(a.0, a.1, 0.12);
        let sb = step_cav_kinematics(b.0, b.1, 0.12);
        assert_relative_eq!(
            stepped_mix.position,
            lambda * sa.position + (1.0 - lambda) * sb.position,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            stepped_mix.velocity,
            lambda * sa.velocity + (1.0 - lambda) * sb.velocity,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            stepped_mix.acceleration,
            lambda * sa.acceleration + (1.0 - lambda) * sb.acceleration,
            epsilon = 1e-12
        );
    }

    #[test]
    fn idm_free_road_limit() {
        // Standing start on an empty road accelerates at just about max_accel.
        let a = idm_acceleration(0.0, 1.0e6, 0.0, &IdmParams::car()).unwrap();
        assert_relative_eq!(a, 1.13, epsilon = 1e-6);
    }

    #[test]
    fn idm_at_desired_speed() {
        let p = IdmParams::car();
        let a = idm_acceleration(p.desired_speed, 1.0e6, 0.0, &p).unwrap();
        assert!(a.abs() < 1e-3, "a = {a}");
    }

    #[test]
    fn idm_equilibrium_gap_balances() {
        let p = IdmParams::car();
        let g = idm_equilibrium_gap(25.0, &p);
        let a = idm_acceleration(25.0, g, 0.0, &p).unwrap();
        assert!(a.abs() < 1e-9, "a = {a} at gap {g}");
        // Closed-form check: s* / sqrt(1 - (v/v0)^4).
        let s_star = p.min_gap + 25.0 * p.time_headway;
        let expected = s_star / (1.0 - (25.0f64 / p.desired_speed).powi(4)).sqrt();
        assert_relative_eq!(g, expected, epsilon = 1e-6);
    }

    #[test]
    fn idm_collision_is_error() {
        assert!(idm_acceleration(10.0, 0.0, 0.0, &IdmParams::car()).is_err());
        assert!(idm_acceleration(10.0, -3.0, 0.0, &IdmParams::car()).is_err());
    }

    #[test]
    fn idm_monotonicity_grids() {
        let p = IdmParams::car();
        for &v in &[0.0, 5.0, 15.0, 25.0, 34.0] {
            // Decreasing in approach rate.
            let mut prev = f64::INFINITY;
            for i in 0..=20 {
                let dv = -5.0 + i as f64 * 0.5;
                let a = idm_acceleration(v, 30.0, dv, &p).unwrap();
                assert!(a <= prev + 1e-12, "v={v} dv={dv}");
                prev = a;
            }
            // Increasing in gap.
            let mut prev = f64::NEG_INFINITY;
            for i in 1..=30 {
                let gap = 2.0 * i as f64;
                let a = idm_acceleration(v, gap, 0.0, &p).unwrap();
                assert!(a >= prev - 1e-12, "v={v} gap={gap}");
                prev = a;
            }
        }
    }

    #[test]
    fn lead_profile_values() {
        let prof = LeadProfile::default();
        assert_relative_eq!(leading_velocity(0.0, &prof).unwrap(), 25.0);
        assert_relative_eq!(leading_velocity(4.8, &prof).unwrap(), 25.0);
        let t_peak = 4.8 + std::f64::consts::FRAC_PI_2 / 0.1667;
        assert_relative_eq!(leading_velocity(t_peak, &prof).unwrap(), 20.0, epsilon = 1e-9);
        assert!(leading_velocity(-0.1, &prof).is_err());
        assert!(leading_velocity(180.1, &prof).is_err());
    }

    #[test]
    fn lead_profile_continuous_and_bounded() {
        let prof = LeadProfile::default();
        let before = leading_velocity(4.8 - 1e-9, &prof).unwrap();
        let after = leading_velocity(4.8 + 1e-9, &prof).unwrap();
        assert!((before - after).abs() < 1e-6);
        let mut t = 0.0;
        while t <= 180.0 {
            let v = leading_velocity(t, &prof).unwrap();
            assert!((20.0..=30.0).contains(&v), "t={t} v={v}");
            t += 0.05;
        }
    }
}
