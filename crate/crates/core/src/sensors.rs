//! Parametric sensor models: the two ICU-x0201 ultrasonic variants, the
//! VL53L1 laser ToF, the PMW3901 optical-flow sensor and a simple IMU.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::echo::FrameConfig;
use crate::seed::SimRng;
use crate::signal::{OdrDivisor, N_SAMPLES_MAX};
use crate::world::Material;
use crate::{Error, Result};

/// Sensor pose in the drone body frame (x forward, y left), m / rad.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mount {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UltrasonicSensorSpec {
    pub name: String,
    pub f_op_hz: f64,
    pub divisor: OdrDivisor,
    pub fov_deg: f64,
    /// Rated range, m.
    pub max_range_m: f64,
    /// Upper bound on sensing power, mW.
    pub power_mw: f64,
    /// Sensor communication before readout, s.
    pub comm_overhead_s: f64,
    /// IQ readout over SPI; overlaps the next measurement.
    pub spi_transfer_s: f64,
    /// On-board processing; overlaps the next measurement.
    pub algorithm_s: f64,
    pub mount: Mount,
}

impl UltrasonicSensorSpec {
    /// 50 kHz variant with a 55° horn, used forward-facing for avoidance.
    pub fn icu30201(divisor: OdrDivisor) -> Self {
        Self {
            name: "ICU-30201".into(),
            f_op_hz: 50_000.0,
            divisor,
            fov_deg: 55.0,
            max_range_m: 9.0,
            power_mw: 1.0,
            comm_overhead_s: 3e-3,
            spi_transfer_s: 1.4e-3,
            algorithm_s: 1e-3,
            mount: Mount::default(),
        }
    }

    /// 175 kHz variant, used in pairs facing the ground for velocity.
    pub fn icu10201(divisor: OdrDivisor) -> Self {
        Self {
            name: "ICU-10201".into(),
            f_op_hz: 175_000.0,
            divisor,
            fov_deg: 55.0,
            max_range_m: 1.2,
            power_mw: 1.0,
            comm_overhead_s: 3e-3,
            spi_transfer_s: 1.4e-3,
            algorithm_s: 1e-3,
            mount: Mount::default(),
        }
    }

    pub fn odr_hz(&self) -> f64 {
        self.divisor.odr_hz(self.f_op_hz)
    }

    /// Samples recorded per measurement: the 340-sample limit, shortened so
    /// that the acquisition window never reaches past the rated range.
    pub fn n_samples(&self, c0: f64) -> usize {
        let rated = (2.0 * self.max_range_m / c0 * self.odr_hz()).floor() as usize;
        rated.clamp(1, N_SAMPLES_MAX)
    }

    /// One-way distance covered by the acquisition window, m.
    pub fn acquisition_range_m(&self, c0: f64) -> f64 {
        self.n_samples(c0) as f64 / self.odr_hz() * c0 / 2.0
    }

    /// Distance per sample, m.
    pub fn range_bin_m(&self, c0: f64) -> f64 {
        c0 / (2.0 * self.odr_hz())
    }

    pub fn half_fov_rad(&self) -> f64 {
        0.5 * self.fov_deg.to_radians()
    }

    pub fn frame_config(&self, c0: f64) -> FrameConfig {
        FrameConfig {
            f_op_hz: self.f_op_hz,
            divisor: self.divisor,
            n_samples: self.n_samples(c0),
            ..FrameConfig::default()
        }
    }

    pub fn validate(&self, c0: f64) -> Result<()> {
        if !(self.f_op_hz > 0.0 && self.fov_deg > 0.0 && self.fov_deg < 180.0 && self.max_range_m > 0.0) {
            return Err(Error::InvalidParameter(format!("bad ultrasonic spec {}", self.name)));
        }
        if self.acquisition_range_m(c0) > self.max_range_m + 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "{}: acquisition window exceeds rated range",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserToFSpec {
    pub name: String,
    pub fov_deg: f64,
    pub max_range_m: f64,
    pub power_mw: f64,
    pub rate_hz: f64,
    /// Gaussian range noise, m.
    pub noise_sigma_m: f64,
    pub mount: Mount,
}

impl Default for LaserToFSpec {
    /// VL53L1.
    fn default() -> Self {
        Self {
            name: "VL53L1".into(),
            fov_deg: 27.0,
            max_range_m: 4.0,
            power_mw: 50.0,
            rate_hz: 33.0,
            noise_sigma_m: 0.005,
            mount: Mount::default(),
        }
    }
}

impl LaserToFSpec {
    pub fn half_fov_rad(&self) -> f64 {
        0.5 * self.fov_deg.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpticalFlowSpec {
    pub fps: f64,
    /// Reporting resolution, pixels.
    pub pixel_quantum: f64,
    /// Pixels per radian of apparent ground motion.
    pub focal_scale: f64,
    /// Sensor plus its height-scaling ToF, mW.
    pub power_mw: f64,
    /// Flow noise on a surface with no features, pixels per frame.
    pub noise_px: f64,
    /// Feature density at which tracking reaches full sensitivity.
    pub saturation_density: f64,
}

impl Default for OpticalFlowSpec {
    /// PMW3901: 35 px across a 42° field of view.
    fn default() -> Self {
        Self {
            fps: 124.0,
            pixel_quantum: 0.1,
            focal_scale: 35.0 / 42f64.to_radians(),
            power_mw: 66.0,
            noise_px: 0.15,
            saturation_density: 0.1,
        }
    }
}

impl OpticalFlowSpec {
    /// Fraction of the true flow the tracker reports on a surface with the
    /// given feature density.
    pub fn feature_sensitivity(&self, feature_density: f64) -> f64 {
        (feature_density / self.saturation_density).clamp(0.0, 1.0)
    }

    /// Converts a per-frame flow to velocity at height `h`.
    pub fn flow_to_velocity(&self, pixels: f64, h: f64) -> f64 {
        pixels * h * self.fps / self.focal_scale
    }
}

/// A flow reading, stored as an integer number of quanta so it is an exact
/// multiple of the reporting resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowReading {
    pub counts: i64,
}

impl FlowReading {
    pub fn pixels(self, spec: &OpticalFlowSpec) -> f64 {
        self.counts as f64 * spec.pixel_quantum
    }
}

/// Forward model of one optical-flow frame over ground displacement
/// `true_displacement` at height `h`.
pub fn optical_flow_reading(
    true_displacement: f64,
    h: f64,
    spec: &OpticalFlowSpec,
    surface: &Material,
    rng: &mut SimRng,
) -> FlowReading {
    debug_assert!(h > 0.0);
    let ideal = spec.focal_scale * true_displacement / h;
    let fd = surface.feature_density.clamp(0.0, 1.0);
    let z: f64 = rng.sample(StandardNormal);
    let flow = spec.feature_sensitivity(fd) * ideal + spec.noise_px * (1.0 - fd) * z;
    FlowReading {
        counts: (flow / spec.pixel_quantum).round() as i64,
    }
}

/// Timing of one measurement cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleTiming {
    /// Time the sound needs to cover the acquisition window, s.
    pub acoustic_s: f64,
    pub comm_overhead_s: f64,
    pub total_s: f64,
}

impl CycleTiming {
    pub fn rate_hz(&self) -> f64 {
        1.0 / self.total_s
    }
}

/// Avoidance measurement cycle: acoustic window plus sensor communication.
/// SPI readout and the algorithm run while the next pulse is in flight.
pub fn oa_cycle_time(spec: &UltrasonicSensorSpec, c0: f64) -> CycleTiming {
    let acoustic_s = spec.n_samples(c0) as f64 / spec.odr_hz();
    CycleTiming {
        acoustic_s,
        comm_overhead_s: spec.comm_overhead_s,
        total_s: acoustic_s + spec.comm_overhead_s,
    }
}

/// Distance covered by the avoidance acquisition window, m.
pub fn covered_range_m(spec: &UltrasonicSensorSpec, c0: f64) -> f64 {
    oa_cycle_time(spec, c0).acoustic_s * c0 / 2.0
}

/// Velocity measurement cycle at height `h`: two ground round trips plus
/// communication.
pub fn velocity_cycle_time(h: f64, c0: f64, comm_overhead_s: f64) -> f64 {
    4.0 * h / c0 + comm_overhead_s
}

/// Accelerometer with white noise and a random-walk bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuSpec {
    pub rate_hz: f64,
    /// White noise per sample, m/s^2.
    pub accel_noise_sigma: f64,
    /// Bias random walk, m/s^2 per sqrt(s).
    pub bias_walk_sigma: f64,
    pub initial_bias: f64,
}

impl Default for ImuSpec {
    fn default() -> Self {
        Self {
            rate_hz: 500.0,
            accel_noise_sigma: 0.05,
            bias_walk_sigma: 0.01,
            initial_bias: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Imu {
    spec: ImuSpec,
    bias: f64,
}

impl Imu {
    pub fn new(spec: ImuSpec) -> Self {
        Self {
            bias: spec.initial_bias,
            spec,
        }
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// One accelerometer sample; advances the bias by `dt`.
    pub fn read(&mut self, true_accel: f64, dt: f64, rng: &mut SimRng) -> f64 {
        let walk: f64 = rng.sample(StandardNormal);
        self.bias += self.spec.bias_walk_sigma * dt.sqrt() * walk;
        let white: f64 = rng.sample(StandardNormal);
        true_accel + self.bias + self.spec.accel_noise_sigma * white
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::correlation;
    use crate::SPEED_OF_SOUND;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn oa_cycle_for_icu30201() {
        let spec = UltrasonicSensorSpec::icu30201(OdrDivisor::N4);
        let t = oa_cycle_time(&spec, SPEED_OF_SOUND);
        assert_eq!(spec.n_samples(SPEED_OF_SOUND), 340);
        assert_relative_eq!(t.acoustic_s, 0.0272, max_relative = 1e-12);
        assert_relative_eq!(t.total_s, 0.0302, max_relative = 1e-12);
        assert!((32.0..=34.0).contains(&t.rate_hz()));
        assert!((0.029..=0.031).contains(&t.total_s));
        assert_relative_eq!(covered_range_m(&spec, SPEED_OF_SOUND), 4.6648, epsilon = 1e-9);
        spec.validate(SPEED_OF_SOUND).unwrap();
    }

    #[test]
    fn halving_divisor_halves_range_and_doubles_resolution() {
        let n4 = UltrasonicSensorSpec::icu30201(OdrDivisor::N4);
        let n2 = UltrasonicSensorSpec::icu30201(OdrDivisor::N2);
        assert_relative_eq!(
            covered_range_m(&n2, SPEED_OF_SOUND),
            covered_range_m(&n4, SPEED_OF_SOUND) / 2.0
        );
        assert_relative_eq!(n2.range_bin_m(SPEED_OF_SOUND), n4.range_bin_m(SPEED_OF_SOUND) / 2.0);
    }

    #[test]
    fn icu10201_window_capped_at_rated_range() {
        let n2 = UltrasonicSensorSpec::icu10201(OdrDivisor::N2);
        assert_eq!(n2.n_samples(SPEED_OF_SOUND), 340);
        let n4 = UltrasonicSensorSpec::icu10201(OdrDivisor::N4);
        assert!(n4.n_samples(SPEED_OF_SOUND) < 340);
        assert!(n4.acquisition_range_m(SPEED_OF_SOUND) <= 1.2);
        n4.validate(SPEED_OF_SOUND).unwrap();
        UltrasonicSensorSpec::icu30201(OdrDivisor::N8)
            .validate(SPEED_OF_SOUND)
            .unwrap();
    }

    #[test]
    fn velocity_cycle_examples() {
        let t = velocity_cycle_time(1.0, 343.0, 3e-3);
        assert_relative_eq!(t - 3e-3, 4.0 / 343.0);
        assert_relative_eq!(t, 0.014_662, epsilon = 1e-6);
        assert_relative_eq!(velocity_cycle_time(1e-9, 343.0, 3e-3), 3e-3, epsilon = 1e-9);
        assert_relative_eq!(velocity_cycle_time(0.56, 343.0, 3e-3), 0.009_531, epsilon = 1e-6);
    }

    #[test]
    fn laser_is_narrower() {
        let laser = LaserToFSpec::default();
        let us = UltrasonicSensorSpec::icu30201(OdrDivisor::N4);
        assert!(laser.fov_deg < us.fov_deg);
    }

    fn surface(fd: f64) -> Material {
        Material {
            feature_density: fd,
            ..Material::wall()
        }
    }

    #[test]
    fn zero_displacement_reads_zero_on_rich_surface() {
        let spec = OpticalFlowSpec::default();
        let mut rng = SimRng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(optical_flow_reading(0.0, 0.56, &spec, &surface(1.0), &mut rng).counts, 0);
        }
    }

    #[test]
    fn rich_surface_reads_quantized_ideal_flow() {
        let spec = OpticalFlowSpec::default();
        let mut rng = SimRng::seed_from_u64(1);
        let d = 0.0123;
        let r = optical_flow_reading(d, 0.56, &spec, &surface(1.0), &mut rng);
        let ideal = spec.focal_scale * d / 0.56;
        assert_eq!(r.counts, (ideal / 0.1).round() as i64);
        assert!((r.pixels(&spec) - ideal).abs() <= 0.05 + 1e-12);
    }

    #[test]
    fn featureless_surface_is_uncorrelated() {
        let spec = OpticalFlowSpec::default();
        let mut rng = SimRng::seed_from_u64(11);
        let disp: Vec<f64> = (0..1000).map(|k| 0.01 * ((k as f64) * 0.37).sin()).collect();
        let readings: Vec<f64> = disp
            .iter()
            .map(|&d| optical_flow_reading(d, 0.56, &spec, &surface(0.0), &mut rng).pixels(&spec))
            .collect();
        let r = correlation(&disp, &readings).unwrap_or(0.0);
        assert!(r.abs() < 0.2, "correlation {r}");
    }

    #[test]
    fn flow_velocity_round_trip() {
        let spec = OpticalFlowSpec::default();
        let v = 0.8;
        let px = spec.focal_scale * (v / spec.fps) / 0.56;
        assert_relative_eq!(spec.flow_to_velocity(px, 0.56), v, max_relative = 1e-12);
        // One metre per second at the experiment height is well above one quantum.
        assert!(px > 5.0 * spec.pixel_quantum);
    }

    #[test]
    fn imu_bias_walks() {
        let mut imu = Imu::new(ImuSpec::default());
        let mut rng = SimRng::seed_from_u64(5);
        let start = imu.bias();
        for _ in 0..1000 {
            imu.read(0.0, 0.002, &mut rng);
        }
        assert_ne!(imu.bias(), start);
    }
}
