//! Ultrasonic two-way-ranging ego-velocity estimation and obstacle avoidance
//! for nano-drones, together with the acoustic and 2-D world simulator used to
//! exercise them.
//!
//! Layering, bottom up:
//!
//! - [`signal`]: baseband IQ frames, magnitude/phase, phase wrapping, ground
//!   peak detection and the line-delimited frame log.
//! - [`echo`]: exact specular two-way geometry (root-finding oracle) and IQ
//!   frame synthesis with surface-roughness and airflow phase noise.
//! - [`velocity`]: phase difference at the magnitude peaks of an A->B / B->A
//!   pulse pair, converted to path difference and then to velocity.
//! - [`sensors`]: parametric ultrasonic, laser ToF and optical-flow models.
//! - [`world`]: 2-D material-tagged scenes, ray casting, kinematics, crashes.
//! - [`oa`]: dynamic-threshold ranging and the reactive avoidance policy.
//! - [`fusion`]: 1-D velocity/accelerometer-bias Kalman filter.
//! - [`experiment`]: seeded experiment orchestration and CSV reports.
//! - [`oracle`]: geometry and pipeline self-checks.

pub mod echo;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod oa;
pub mod oracle;
pub mod seed;
pub mod sensors;
pub mod signal;
pub mod stats;
pub mod velocity;
pub mod world;

pub use error::{Error, Result};

/// Speed of sound in air at 20 °C, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;
