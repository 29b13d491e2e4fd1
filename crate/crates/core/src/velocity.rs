//! Ego-velocity from the phase difference of an A->B / B->A pulse pair.
//!
//! Pipeline: find the ground echo (magnitude peak) in both frames, take the
//! phase difference there, convert it to a path-length difference with
//! `delta_m = delta_rad * lambda / 2pi`, then to velocity with either
//!
//! - the quadratic `v = (-2a + sqrt(4a^2 + 8 t1 c0 delta_m)) / (4 t1)`
//!   ([`Method::Exact`]), or
//! - the small-displacement form `v = delta_m c0 / (2a)` ([`Method::Approx`]).
//!
//! Sign convention: `delta_rad = phase(received at B) - phase(received at A)`,
//! which makes motion toward sensor A's side (+x) positive.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::signal::{wrap, IqFrame, PeakDetection, PeakSearch};
use crate::{Error, Result, SPEED_OF_SOUND};

/// Sensor separation of the dual ICU-10201 setup, m.
pub const DEFAULT_SEPARATION_M: f64 = 0.038;
/// Estimates faster than this are outliers: the airframe cannot fly faster.
pub const DEFAULT_OUTLIER_SPEED: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Approx,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Approx => "approx",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "approx" => Ok(Self::Approx),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoEcho,
    OverSpeed,
    WrapAmbiguous,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoEcho => "no_echo",
            Self::OverSpeed => "over_speed",
            Self::WrapAmbiguous => "wrap_ambiguous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Sensor separation, m.
    pub a: f64,
    pub c0: f64,
    pub v_outlier_max: f64,
    pub method: Method,
    pub peak: PeakSearch,
    /// Phase differences within this fraction of pi are flagged ambiguous.
    pub wrap_margin: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            a: DEFAULT_SEPARATION_M,
            c0: SPEED_OF_SOUND,
            v_outlier_max: DEFAULT_OUTLIER_SPEED,
            method: Method::Approx,
            peak: PeakSearch::default(),
            wrap_margin: 0.02,
        }
    }
}

impl EstimatorConfig {
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.c0 > 0.0 && self.v_outlier_max > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "estimator needs a, c0, v_outlier_max > 0: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.wrap_margin) {
            return Err(Error::InvalidParameter("wrap_margin must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Velocity per radian of phase difference under the approximation.
    pub fn velocity_per_radian(&self, f_op_hz: f64) -> f64 {
        velocity_approx(delta_m_from_rad(1.0, f_op_hz, self.c0), self)
    }

    /// Largest |v| representable before the phase difference wraps.
    pub fn wrap_limit_velocity(&self, f_op_hz: f64) -> f64 {
        self.velocity_per_radian(f_op_hz) * PI
    }
}

/// Output of one pulse-pair evaluation.
///
/// Rejected estimates keep the raw velocity for diagnostics; a `NoEcho`
/// estimate has NaN in every numeric field it could not compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityEstimate {
    /// Emission time of the A->B pulse, s.
    pub t: f64,
    pub v: f64,
    pub delta_rad: f64,
    pub delta_m: f64,
    /// Round-trip time used in the quadratic, s.
    pub t1: f64,
    pub lambda: f64,
    pub method: Method,
    pub valid: bool,
    pub reject_reason: Option<RejectReason>,
}

/// `wrap(phase_b - phase_a)`.
pub fn phase_difference(peak_a: &PeakDetection, peak_b: &PeakDetection) -> f64 {
    wrap(peak_b.phase - peak_a.phase)
}

pub fn delta_m_from_rad(delta_rad: f64, f_op_hz: f64, c0: f64) -> f64 {
    let lambda = c0 / f_op_hz;
    delta_rad * lambda / TAU
}

fn discriminant(delta_m: f64, t1: f64, cfg: &EstimatorConfig) -> f64 {
    4.0 * cfg.a * cfg.a + 8.0 * t1 * cfg.c0 * delta_m
}

/// Root of `2 t1 v^2 + 2 a v - c0 delta_m = 0` closest to zero (positive
/// square-root branch).
pub fn velocity_exact(delta_m: f64, t1: f64, cfg: &EstimatorConfig) -> Result<f64> {
    if !(t1 > 0.0) {
        return Err(Error::InvalidParameter(format!("t1 must be > 0, got {t1}")));
    }
    let disc = discriminant(delta_m, t1, cfg);
    if disc < 0.0 {
        return Err(Error::NonPhysicalDelta { discriminant: disc });
    }
    Ok((-2.0 * cfg.a + disc.sqrt()) / (4.0 * t1))
}

pub fn velocity_approx(delta_m: f64, cfg: &EstimatorConfig) -> f64 {
    delta_m * cfg.c0 / (2.0 * cfg.a)
}

/// Runs the full pipeline on a pulse pair. `frame_ab` is the frame received
/// at B from A's pulse, `frame_ba` the one received at A. Failures are
/// reported through `valid` / `reject_reason`, never as errors.
pub fn estimate(frame_ab: &IqFrame, frame_ba: &IqFrame, cfg: &EstimatorConfig) -> VelocityEstimate {
    let f_op = frame_ab.f_op_hz();
    let lambda = cfg.c0 / f_op;
    let mut out = VelocityEstimate {
        t: frame_ab.t_emit(),
        v: f64::NAN,
        delta_rad: f64::NAN,
        delta_m: f64::NAN,
        t1: f64::NAN,
        lambda,
        method: cfg.method,
        valid: false,
        reject_reason: Some(RejectReason::NoEcho),
    };
    let (Ok(peak_b), Ok(peak_a)) = (cfg.peak.detect(frame_ab), cfg.peak.detect(frame_ba)) else {
        return out;
    };

    let delta_rad = phase_difference(&peak_a, &peak_b);
    let delta_m = delta_m_from_rad(delta_rad, f_op, cfg.c0);
    let t1 = 0.5 * (peak_a.t_peak + peak_b.t_peak);
    out.delta_rad = delta_rad;
    out.delta_m = delta_m;
    out.t1 = t1;

    let approx = velocity_approx(delta_m, cfg);
    let (v, non_physical) = match cfg.method {
        Method::Approx => (approx, false),
        Method::Exact => match velocity_exact(delta_m, t1, cfg) {
            Ok(v) => (v, false),
            Err(_) => (approx, true),
        },
    };
    out.v = v;

    out.reject_reason = if delta_rad.abs() >= PI * (1.0 - cfg.wrap_margin) {
        Some(RejectReason::WrapAmbiguous)
    } else if non_physical || v.abs() > cfg.v_outlier_max {
        Some(RejectReason::OverSpeed)
    } else {
        None
    };
    out.valid = out.reject_reason.is_none();
    out
}

/// Mean squared error over the valid estimates only.
pub fn velocity_mse(estimates: &[VelocityEstimate], truth: &[f64]) -> Option<f64> {
    assert_eq!(estimates.len(), truth.len(), "velocity_mse: length mismatch");
    let (est, gt): (Vec<f64>, Vec<f64>) = estimates
        .iter()
        .zip(truth)
        .filter(|(e, _)| e.valid)
        .map(|(e, t)| (e.v, *t))
        .unzip();
    crate::stats::mse(&est, &gt)
}

/// One row of a velocity track CSV. Raw ultrasonic estimates fill every
/// column; other streams (ground truth, optical flow, fused) leave the
/// phase-specific columns empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub source: String,
    pub t: f64,
    pub v: f64,
    /// Ground truth at `t`, when known.
    pub v_true: Option<f64>,
    pub delta_rad: Option<f64>,
    pub delta_m: Option<f64>,
    pub t1: Option<f64>,
    pub method: Option<Method>,
    pub valid: bool,
    pub reject_reason: Option<RejectReason>,
}

impl TrackRow {
    pub fn from_estimate(source: &str, e: &VelocityEstimate) -> Self {
        Self {
            source: source.to_owned(),
            t: e.t,
            v: e.v,
            v_true: None,
            delta_rad: Some(e.delta_rad),
            delta_m: Some(e.delta_m),
            t1: Some(e.t1),
            method: Some(e.method),
            valid: e.valid,
            reject_reason: e.reject_reason,
        }
    }

    pub fn sample(source: &str, t: f64, v: f64) -> Self {
        Self {
            source: source.to_owned(),
            t,
            v,
            v_true: None,
            delta_rad: None,
            delta_m: None,
            t1: None,
            method: None,
            valid: true,
            reject_reason: None,
        }
    }

    pub fn with_truth(mut self, v_true: f64) -> Self {
        self.v_true = Some(v_true);
        self
    }
}

pub fn write_track_csv<W: Write>(out: W, rows: &[TrackRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_track_csv<R: std::io::Read>(input: R) -> Result<Vec<TrackRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}
