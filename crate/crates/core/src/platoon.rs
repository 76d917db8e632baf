//! Vehicle rosters and the shared single-lane platoon integrator.
//!
//! Both the synthetic-data generator and the closed-loop simulator advance
//! the world through [`idm_accelerations`] + [`advance_world`], so a run with
//! zero engaged controllers is bit-identical to generated data for the same
//! roster.

use crate::dynamics::{
    idm_acceleration, idm_equilibrium_gap, step_cav_kinematics, IdmParams, KinematicState,
};
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Car,
    Truck,
}

impl VehicleClass {
    pub fn idm(&self) -> IdmParams {
        match self {
            VehicleClass::Car => IdmParams::car(),
            VehicleClass::Truck => IdmParams::truck(),
        }
    }

    pub fn length(&self) -> f64 {
        self.idm().length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleRole {
    /// External head vehicle driving the disturbance profile (index 0).
    Head,
    Cav,
    Hdv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: u64,
    pub role: VehicleRole,
    pub class: VehicleClass,
}

impl VehicleSpec {
    /// Driving parameters when this vehicle is advanced by IDM. CAVs without
    /// an engaged controller fall back to the passenger-car calibration.
    pub fn idm(&self) -> IdmParams {
        match self.role {
            VehicleRole::Cav => IdmParams::car(),
            _ => self.class.idm(),
        }
    }

    pub fn length(&self) -> f64 {
        match self.role {
            VehicleRole::Cav => IdmParams::car().length,
            _ => self.class.length(),
        }
    }
}

/// Ordered roster: index 0 is the external head vehicle, indices 1.. follow
/// it in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonConfig {
    pub vehicles: Vec<VehicleSpec>,
}

impl PlatoonConfig {
    /// Head vehicle plus `followers` HDVs of the given classes, ids 1..=n+1.
    pub fn idm_platoon(classes: &[VehicleClass]) -> Self {
        let mut vehicles = vec![VehicleSpec {
            id: 1,
            role: VehicleRole::Head,
            class: VehicleClass::Car,
        }];
        for (i, &class) in classes.iter().enumerate() {
            vehicles.push(VehicleSpec {
                id: i as u64 + 2,
                role: VehicleRole::Hdv,
                class,
            });
        }
        Self { vehicles }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vehicles.len() < 2 {
            return Err(CoreError::InvalidParameter(
                "platoon needs a head vehicle and at least one follower".into(),
            ));
        }
        if self.vehicles[0].role != VehicleRole::Head {
            return Err(CoreError::InvalidParameter(
                "vehicle 0 must be the head vehicle".into(),
            ));
        }
        if self.vehicles[1..].iter().any(|v| v.role == VehicleRole::Head) {
            return Err(CoreError::InvalidParameter(
                "only vehicle 0 may be the head vehicle".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.vehicles {
            if v.id == 0 || !seen.insert(v.id) {
                return Err(CoreError::InvalidParameter(format!(
                    "vehicle ids must be unique and nonzero, offending id {}",
                    v.id
                )));
            }
        }
        Ok(())
    }

    /// Validation for use as an MPC system roster: the first controlled
    /// vehicle must be a CAV and at least one CAV must be present.
    pub fn validate_for_control(&self) -> Result<()> {
        self.validate()?;
        if self.vehicles[1].role != VehicleRole::Cav {
            return Err(CoreError::InvalidParameter(
                "first vehicle behind the head must be a CAV".into(),
            ));
        }
        Ok(())
    }

    pub fn follower_count(&self) -> usize {
        self.vehicles.len() - 1
    }

    /// Bumper-to-bumper gap of follower `i` (1-based roster index) given the
    /// current states: front-bumper distance minus the predecessor's length.
    pub fn gap(&self, states: &[KinematicState], i: usize) -> f64 {
        states[i - 1].position - states[i].position - self.vehicles[i - 1].length()
    }

    /// All vehicles placed at the IDM equilibrium gap for `speed`, head at
    /// position 0, everyone moving at `speed`.
    pub fn equilibrium_states(&self, speed: f64) -> Vec<KinematicState> {
        let mut states = Vec::with_capacity(self.vehicles.len());
        states.push(KinematicState::new(0.0, speed, 0.0));
        for i in 1..self.vehicles.len() {
            let gap = idm_equilibrium_gap(speed, &self.vehicles[i].idm());
            let pos = states[i - 1].position - gap - self.vehicles[i - 1].length();
            states.push(KinematicState::new(pos, speed, 0.0));
        }
        states
    }
}

/// IDM accelerations for every follower, from the current world state.
/// CAV entries are computed too (car parameters) so unengaged CAVs can fall
/// back on them; engaged controllers overwrite their own entries.
pub fn idm_accelerations(config: &PlatoonConfig, states: &[KinematicState]) -> Result<Vec<f64>> {
    let mut accels = vec![0.0; config.vehicles.len()];
    for i in 1..config.vehicles.len() {
        let gap = config.gap(states, i);
        let approach = states[i].velocity - states[i - 1].velocity;
        accels[i] = idm_acceleration(states[i].velocity, gap, approach, &config.vehicles[i].idm())
            .map_err(|_| CoreError::Collision {
                vehicle: config.vehicles[i].id,
                time: f64::NAN,
                gap,
            })?;
    }
    Ok(accels)
}

/// Advance every vehicle one step: positions integrate the current
/// velocities, follower velocities integrate `accels` (clamped at zero), the
/// head vehicle takes `lead_velocity_next` directly.
pub fn advance_world(
    states: &mut [KinematicState],
    accels: &[f64],
    lead_velocity_next: f64,
    dt: f64,
) {
    for s in states.iter_mut() {
        s.position += s.velocity * dt;
    }
    states[0].velocity = lead_velocity_next;
    states[0].acceleration = 0.0;
    for i in 1..states.len() {
        states[i].velocity = (states[i].velocity + accels[i] * dt).max(0.0);
        states[i].acceleration = accels[i];
    }
}

/// Jerk-driven CAV advance used by the simulator: exact triple-integrator
/// step followed by acceleration saturation.
pub fn advance_cav(state: KinematicState, jerk: f64, dt: f64, a_min: f64, a_max: f64) -> KinematicState {
    let mut next = step_cav_kinematics(state, jerk, dt);
    next.acceleration = next.acceleration.clamp(a_min, a_max);
    next.velocity = next.velocity.max(0.0);
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_platoon_stays_put() {
        let config = PlatoonConfig::idm_platoon(&[
            VehicleClass::Car,
            VehicleClass::Truck,
            VehicleClass::Car,
        ]);
        let mut states = config.equilibrium_states(25.0);
        for _ in 0..100 {
            let accels = idm_accelerations(&config, &states).unwrap();
            advance_world(&mut states, &accels, 25.0, 0.12);
        }
        for s in &states {
            assert!((s.velocity - 25.0).abs() < 1e-6, "v = {}", s.velocity);
        }
    }

    #[test]
    fn roster_validation() {
        let mut config = PlatoonConfig::idm_platoon(&[VehicleClass::Car]);
        assert!(config.validate().is_ok());
        assert!(config.validate_for_control().is_err());
        config.vehicles[1].role = VehicleRole::Cav;
        assert!(config.validate_for_control().is_ok());
        config.vehicles[0].role = VehicleRole::Hdv;
        assert!(config.validate().is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut config = PlatoonConfig::idm_platoon(&[VehicleClass::Car, VehicleClass::Car]);
        config.vehicles[2].id = config.vehicles[1].id;
        assert!(config.validate().is_err());
    }
}
