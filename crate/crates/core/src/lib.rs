//! Learning linear lifted-space (Koopman) models of human car-following
//! behaviour and embedding them in a quadratic-program MPC that commands
//! connected automated vehicles to damp stop-and-go waves, with a closed-loop
//! IDM platoon simulator for validation.

pub mod dataio;
pub mod dynamics;
pub mod edmd;
pub mod error;
pub mod platoon;
pub mod qp;

pub use dynamics::{IdmParams, KinematicState, LeadProfile};
pub use error::{CoreError, Result};
pub use platoon::{PlatoonConfig, VehicleClass, VehicleRole, VehicleSpec};
