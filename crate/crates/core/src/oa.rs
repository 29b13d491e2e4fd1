//! Reactive obstacle avoidance: nearest-obstacle distance from a single
//! forward sonar frame and the speed/yaw controller built on it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::SimRng;
use crate::signal::IqFrame;
use crate::stats::mean;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OAConfig {
    pub v_max: f64,
    /// Distance at or below which forward speed is zero, m.
    pub d_stop: f64,
    /// Distance at or above which forward speed is `v_max`, m.
    pub d_free: f64,
    pub yaw_rate_max: f64,
    /// Below this distance the turn direction is frozen, m.
    pub lock_distance: f64,
    pub redirect_period_s: f64,
    /// Threshold height above the noise floor at sample 0, ADC counts.
    pub threshold_floor: f64,
    /// Per-sample decay of the threshold.
    pub threshold_decay: f64,
    /// Samples masked by the transmit ringdown.
    pub ringdown_samples: usize,
    /// Noise floor = mean + k * std of calibration magnitudes.
    pub noise_floor_k: f64,
    pub calibration_frames: usize,
}

impl Default for OAConfig {
    fn default() -> Self {
        Self {
            v_max: 0.5,
            d_stop: 0.3,
            d_free: 1.5,
            yaw_rate_max: 1.5,
            lock_distance: 0.40,
            redirect_period_s: 10.0,
            threshold_floor: 2000.0,
            threshold_decay: 0.02,
            ringdown_samples: 10,
            noise_floor_k: 5.0,
            calibration_frames: 10,
        }
    }
}

impl OAConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.v_max,
            self.yaw_rate_max,
            self.lock_distance,
            self.redirect_period_s,
        ];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Config(
                "v_max, yaw_rate_max, lock_distance and redirect_period_s must be > 0".into(),
            ));
        }
        if !(self.d_stop > 0.0 && self.d_stop < self.d_free && self.d_free.is_finite()) {
            return Err(Error::Config("need 0 < d_stop < d_free".into()));
        }
        if !(self.threshold_floor >= 0.0 && self.threshold_decay >= 0.0 && self.noise_floor_k >= 0.0) {
            return Err(Error::Config("threshold parameters must be >= 0".into()));
        }
        Ok(())
    }
}

/// Magnitude level that noise alone rarely exceeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFloor {
    pub level: f64,
}

impl NoiseFloor {
    pub fn fixed(level: f64) -> Self {
        Self { level }
    }

    /// Calibrates from frames recorded with nothing in view, ignoring the
    /// first `skip` samples of each (ringdown).
    pub fn calibrate(frames: &[IqFrame], k: f64, skip: usize) -> Self {
        let mags: Vec<f64> = frames
            .iter()
            .flat_map(|f| f.samples().iter().skip(skip).map(|s| s.magnitude()))
            .collect();
        let Some(m) = mean(&mags) else {
            return Self::fixed(0.0);
        };
        let var = mags.iter().map(|x| (x - m).powi(2)).sum::<f64>() / mags.len() as f64;
        Self::fixed(m + k * var.sqrt())
    }
}

/// Detection threshold at sample `k`.
pub fn threshold(cfg: &OAConfig, floor: NoiseFloor, k: usize) -> f64 {
    floor.level + cfg.threshold_floor * (1.0 + cfg.threshold_decay).powi(-(k as i32))
}

/// Distance to the closest echo, or `None` if nothing crosses the threshold.
///
/// The first sample above the threshold marks the echo; the range is taken
/// at the top of that echo's rising edge so a wide pulse does not read short.
pub fn nearest_obstacle_distance(frame: &IqFrame, cfg: &OAConfig, floor: NoiseFloor, c0: f64) -> Option<f64> {
    let mags: Vec<f64> = frame.samples().iter().map(|s| s.magnitude()).collect();
    let start = cfg.ringdown_samples.min(mags.len());
    let first = (start..mags.len()).find(|&k| mags[k] > threshold(cfg, floor, k))?;
    let mut k = first;
    while k + 1 < mags.len() && mags[k + 1] > mags[k] {
        k += 1;
    }
    Some(k as f64 / frame.odr_hz() * c0 / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OACommand {
    pub v_forward: f64,
    pub yaw_rate: f64,
}

/// Forward speed for an obstacle at `d` (`None`: nothing in range).
pub fn speed_for(cfg: &OAConfig, d: Option<f64>) -> f64 {
    match d {
        None => cfg.v_max,
        Some(d) => cfg.v_max * ((d - cfg.d_stop) / (cfg.d_free - cfg.d_stop)).clamp(0.0, 1.0),
    }
}

/// Turn-rate magnitude for an obstacle at `d`.
pub fn turn_rate_for(cfg: &OAConfig, d: Option<f64>) -> f64 {
    match d {
        None => 0.0,
        Some(d) => cfg.yaw_rate_max * ((cfg.d_free - d) / (cfg.d_free - cfg.d_stop)).clamp(0.0, 1.0),
    }
}

/// Turn direction and redirection schedule of one flight.
#[derive(Debug, Clone)]
pub struct PolicyState {
    sign: f64,
    next_redirect: f64,
    rng: SimRng,
}

impl PolicyState {
    pub fn new(cfg: &OAConfig, mut rng: SimRng) -> Self {
        let sign = coin(&mut rng);
        Self {
            sign,
            next_redirect: cfg.redirect_period_s,
            rng,
        }
    }

    pub fn sign(&self) -> f64 {
        self.sign
    }

    /// Command for the latest measurement at time `t`. At every multiple of
    /// the redirect period the turn direction is redrawn, unless an obstacle
    /// is inside the lock distance; a skipped redraw waits for the next one.
    pub fn control(&mut self, cfg: &OAConfig, d: Option<f64>, t: f64) -> OACommand {
        if t >= self.next_redirect {
            let locked = d.is_some_and(|d| d < cfg.lock_distance);
            if !locked {
                self.sign = coin(&mut self.rng);
            }
            self.next_redirect = ((t / cfg.redirect_period_s).floor() + 1.0) * cfg.redirect_period_s;
        }
        OACommand {
            v_forward: speed_for(cfg, d),
            yaw_rate: self.sign * turn_rate_for(cfg, d),
        }
    }
}

fn coin(rng: &mut SimRng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echo::{synthesize_frame_with, EchoSpec, FrameConfig, NoiseSpec};
    use crate::seed::stream;
    use crate::signal::OdrDivisor;
    use crate::SPEED_OF_SOUND;
    use rand::SeedableRng;

    fn frame_cfg() -> FrameConfig {
        FrameConfig {
            f_op_hz: 50_000.0,
            divisor: OdrDivisor::N4,
            ringdown_amplitude: 5000.0,
            ringdown_decay_samples: 1.5,
            ..FrameConfig::default()
        }
    }

    fn echo(d: f64, amplitude: f64) -> EchoSpec {
        EchoSpec {
            round_trip_time: 2.0 * d / SPEED_OF_SOUND,
            amplitude,
            carrier_phase: 0.3,
        }
    }

    fn frame(echoes: &[EchoSpec], seed: u64) -> IqFrame {
        let noise = NoiseSpec {
            iq_noise_sigma: 3.0,
            ..NoiseSpec::default()
        };
        let mut rng = SimRng::seed_from_u64(seed);
        synthesize_frame_with(echoes, &frame_cfg(), &noise, 0.0, "fwd", 0.0, &mut rng).unwrap()
    }

    fn floor() -> NoiseFloor {
        let frames: Vec<_> = (0..10).map(|s| frame(&[], 100 + s)).collect();
        NoiseFloor::calibrate(&frames, OAConfig::default().noise_floor_k, OAConfig::default().ringdown_samples)
    }

    #[test]
    fn noise_only_frame_has_no_obstacle() {
        let cfg = OAConfig::default();
        let f = floor();
        assert!(f.level > 0.0);
        for seed in 0..50 {
            assert_eq!(nearest_obstacle_distance(&frame(&[], seed), &cfg, f, SPEED_OF_SOUND), None);
        }
    }

    #[test]
    fn echo_at_two_metres() {
        let cfg = OAConfig::default();
        let bin = SPEED_OF_SOUND / (2.0 * 12_500.0);
        assert!((bin - 0.01372).abs() < 1e-5);
        let d = nearest_obstacle_distance(&frame(&[echo(2.0, 500.0)], 1), &cfg, floor(), SPEED_OF_SOUND).unwrap();
        assert!((d - 2.0).abs() <= bin, "{d}");
    }

    #[test]
    fn first_echo_wins() {
        let cfg = OAConfig::default();
        let two = [echo(1.0, 2000.0), echo(3.0, 2000.0 / 9.0 * 3.0)];
        let d = nearest_obstacle_distance(&frame(&two, 2), &cfg, floor(), SPEED_OF_SOUND).unwrap();
        assert!((d - 1.0).abs() <= 0.0138, "{d}");
    }

    #[test]
    fn threshold_decays_toward_noise_floor() {
        let cfg = OAConfig::default();
        let f = NoiseFloor::fixed(10.0);
        assert_eq!(threshold(&cfg, f, 0), 2010.0);
        assert!(threshold(&cfg, f, 100) < threshold(&cfg, f, 99));
        assert!(threshold(&cfg, f, 339) > 10.0);
    }

    #[test]
    fn control_examples() {
        let cfg = OAConfig::default();
        let mut p = PolicyState::new(&cfg, SimRng::seed_from_u64(0));
        assert_eq!(p.control(&cfg, None, 0.0), OACommand { v_forward: 0.5, yaw_rate: 0.0 });
        let c = p.control(&cfg, Some(0.2), 0.1);
        assert_eq!(c.v_forward, 0.0);
        assert_eq!(c.yaw_rate.abs(), cfg.yaw_rate_max);
        let c = p.control(&cfg, Some(0.3), 0.2);
        assert_eq!(c.v_forward, 0.0);
        let c = p.control(&cfg, Some(1.5), 0.3);
        assert_eq!((c.v_forward, c.yaw_rate), (0.5, 0.0));
    }

    #[test]
    fn lock_holds_through_timer_expiry() {
        let cfg = OAConfig::default();
        for seed in 0..64 {
            let mut p = PolicyState::new(&cfg, stream(seed, "policy", 0));
            let s0 = p.sign();
            let mut t = 0.0;
            while t < 60.0 {
                let c = p.control(&cfg, Some(0.35), t);
                assert_eq!(c.yaw_rate.signum(), s0);
                t += 0.0302;
            }
        }
    }

    #[test]
    fn validate_rejects_inverted_ramp() {
        let cfg = OAConfig {
            d_stop: 2.0,
            ..OAConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(OAConfig::default().validate().is_ok());
    }
}
