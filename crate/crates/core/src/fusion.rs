//! One-dimensional Kalman filter over forward velocity and accelerometer
//! bias, driven by IMU samples and corrected by velocity measurements.

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionState {
    pub v: f64,
    pub accel_bias: f64,
    pub covariance: Matrix2<f64>,
}

impl FusionState {
    pub fn new(v: f64, var_v: f64, var_bias: f64) -> Self {
        Self {
            v,
            accel_bias: 0.0,
            covariance: Matrix2::new(var_v, 0.0, 0.0, var_bias),
        }
    }

    fn x(&self) -> Vector2<f64> {
        Vector2::new(self.v, self.accel_bias)
    }
}

impl Default for FusionState {
    fn default() -> Self {
        Self::new(0.0, 1.0, 0.01)
    }
}

/// Continuous-time process noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessNoise {
    /// Accelerometer white noise, (m/s^2)^2 per Hz.
    pub accel_psd: f64,
    /// Bias random walk, (m/s^2)^2 per s.
    pub bias_psd: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            accel_psd: 0.05 * 0.05 / 500.0,
            bias_psd: 0.01 * 0.01,
        }
    }
}

pub fn predict(s: &FusionState, accel_meas: f64, dt: f64, q: &ProcessNoise) -> FusionState {
    debug_assert!(dt > 0.0);
    let f = Matrix2::new(1.0, -dt, 0.0, 1.0);
    let qd = Matrix2::new(q.accel_psd * dt, 0.0, 0.0, q.bias_psd * dt);
    let p = f * s.covariance * f.transpose() + qd;
    FusionState {
        v: s.v + (accel_meas - s.accel_bias) * dt,
        accel_bias: s.accel_bias,
        covariance: symmetrize(p),
    }
}

/// Scalar velocity update in Joseph form. Invalid measurements leave the
/// state untouched.
pub fn update(s: &FusionState, v_meas: f64, r: f64, valid: bool) -> FusionState {
    if !valid || !v_meas.is_finite() || !(r > 0.0) || r.is_infinite() {
        return *s;
    }
    let h = RowVector2::new(1.0, 0.0);
    let p = s.covariance;
    let innovation_var = (h * p * h.transpose())[(0, 0)] + r;
    let k: Vector2<f64> = p * h.transpose() / innovation_var;
    let x = s.x() + k * (v_meas - s.v);
    let i_kh = Matrix2::identity() - k * h;
    let p = i_kh * p * i_kh.transpose() + k * k.transpose() * r;
    FusionState {
        v: x[0],
        accel_bias: x[1],
        covariance: symmetrize(p),
    }
}

fn symmetrize(p: Matrix2<f64>) -> Matrix2<f64> {
    (p + p.transpose()) * 0.5
}

/// Symmetric with non-negative eigenvalues, up to rounding.
pub fn is_psd(p: &Matrix2<f64>) -> bool {
    let scale = p.abs().max();
    let tol = 1e-9 * scale;
    (p[(0, 1)] - p[(1, 0)]).abs() <= tol
        && p[(0, 0)] >= -tol
        && p[(1, 1)] >= -tol
        && p.determinant() >= -tol * scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SimRng;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_input_keeps_velocity_and_grows_covariance() {
        let s = FusionState::new(0.7, 0.1, 0.01);
        let n = predict(&s, 0.0, 0.01, &ProcessNoise::default());
        assert_eq!(n.v, 0.7);
        assert!(n.covariance.trace() > s.covariance.trace());
    }

    #[test]
    fn integrates_constant_acceleration() {
        let q = ProcessNoise {
            accel_psd: 0.0,
            bias_psd: 0.0,
        };
        let mut s = FusionState::new(0.0, 0.0, 0.0);
        for _ in 0..100 {
            s = predict(&s, 1.0, 0.01, &q);
        }
        assert_relative_eq!(s.v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn update_examples() {
        let s = FusionState::new(0.4, 0.2, 0.01);
        let n = update(&s, 0.4, 0.05, true);
        assert_relative_eq!(n.v, 0.4);
        assert!(n.covariance[(0, 0)] < s.covariance[(0, 0)]);

        let far = update(&s, 3.0, 1e12, true);
        assert_relative_eq!(far.v, 0.4, epsilon = 1e-9);
        assert_relative_eq!(far.covariance[(0, 0)], 0.2, epsilon = 1e-9);

        let skipped = update(&s, 3.0, 0.05, false);
        assert_eq!(skipped, s);
        assert_eq!(update(&s, f64::NAN, 0.05, true), s);
    }

    #[test]
    fn covariance_stays_psd_over_long_random_run() {
        let mut rng = SimRng::seed_from_u64(17);
        let mut s = FusionState::default();
        for _ in 0..100_000 {
            let q = ProcessNoise {
                accel_psd: rng.random_range(0.0..1e-2),
                bias_psd: rng.random_range(0.0..1e-3),
            };
            let dt = rng.random_range(1e-4..0.05);
            s = predict(&s, rng.random_range(-5.0..5.0), dt, &q);
            if rng.random_bool(0.3) {
                let r = 10f64.powf(rng.random_range(-6.0..2.0));
                s = update(&s, rng.random_range(-3.0..3.0), r, rng.random_bool(0.9));
            }
            assert!(is_psd(&s.covariance), "{}", s.covariance);
            assert!(s.v.is_finite());
        }
    }

    #[test]
    fn bias_is_learned_from_velocity_updates() {
        let q = ProcessNoise::default();
        let mut s = FusionState::default();
        let true_bias = 0.3;
        for _ in 0..5000 {
            s = predict(&s, true_bias, 0.002, &q);
            s = update(&s, 0.0, 0.01, true);
        }
        assert!((s.accel_bias - true_bias).abs() < 0.02, "{}", s.accel_bias);
        assert!(s.v.abs() < 0.01);
    }
}
