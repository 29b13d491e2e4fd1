//! Exact two-way ground-reflection geometry and IQ frame synthesis.
//!
//! Coordinates: x along the flight direction, y up, ground at y = 0. Sensor
//! A leads sensor B by `a` along +x. Sound propagates in still air in the
//! ground frame; a pulse is emitted from the sensor's position at emission
//! time and received wherever the other sensor has moved to by then. Both
//! sensors share one time base and emit with zero starting phase.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed::SimRng;
use crate::signal::{wrap, IqFrame, IqSample, OdrDivisor, N_SAMPLES_MAX};
use crate::{Error, Result, SPEED_OF_SOUND};

/// Drone-level geometry of one A->B / B->A pulse sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoWayGeometry {
    /// Sensor separation, m.
    pub a: f64,
    pub h_a: f64,
    pub h_b: f64,
    /// Velocity along +x, m/s. Constant within the sequence.
    pub v: f64,
    pub c0: f64,
}

impl TwoWayGeometry {
    pub fn new(a: f64, h_a: f64, h_b: f64, v: f64, c0: f64) -> Result<Self> {
        let g = Self { a, h_a, h_b, v, c0 };
        g.validate()?;
        Ok(g)
    }

    /// Level flight at height `h` with the default speed of sound.
    pub fn level(a: f64, h: f64, v: f64) -> Result<Self> {
        Self::new(a, h, h, v, SPEED_OF_SOUND)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.a, self.h_a, self.h_b, self.v, self.c0]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("geometry"));
        }
        if !(self.a > 0.0 && self.h_a > 0.0 && self.h_b > 0.0 && self.c0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "geometry needs a, h_a, h_b, c0 > 0: {self:?}"
            )));
        }
        if self.v.abs() >= self.c0 {
            return Err(Error::InvalidParameter(format!(
                "|v| = {} must stay below c0 = {}",
                self.v.abs(),
                self.c0
            )));
        }
        Ok(())
    }
}

/// Exact flight paths of both pulses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoWayPaths {
    /// A -> ground -> B path length, m.
    pub l_ab: f64,
    /// B -> ground -> A path length, m.
    pub l_ba: f64,
    pub t_ab: f64,
    pub t_ba: f64,
    /// Angle at the foot of the similar-triangle construction,
    /// `90° + θ/2` with θ the angle the receiver's displacement subtends at
    /// the reflection point. Largest of the two pulses, degrees.
    pub gamma_deg: f64,
}

impl TwoWayPaths {
    /// `l_ba - l_ab`.
    pub fn delta_m(&self) -> f64 {
        self.l_ba - self.l_ab
    }

    pub fn mean_flight_time(&self) -> f64 {
        0.5 * (self.t_ab + self.t_ba)
    }
}

/// Solves `c0 t = |(x0 + w t, vertical)|` for the flight time `t`.
///
/// The right-hand side minus `c0 t` is convex and strictly decreasing for
/// `|w| < c0`, so Newton's method started at `t = 0` climbs monotonically to
/// the root.
fn solve_flight_time(x0: f64, w: f64, vertical: f64, c0: f64) -> Result<f64> {
    let f = |t: f64| (x0 + w * t).hypot(vertical) - c0 * t;
    let mut t = 0.0_f64;
    for _ in 0..100 {
        let len = (x0 + w * t).hypot(vertical);
        let value = len - c0 * t;
        let slope = (x0 + w * t) * w / len - c0;
        let step = value / slope;
        t -= step;
        if step.abs() <= 1e-16 * t.abs().max(1e-12) {
            break;
        }
    }
    let residual = f(t);
    if !t.is_finite() || residual.abs() > 1e-12 * (c0 * t).max(1e-9) {
        return Err(Error::NonConvergence { residual });
    }
    Ok(t)
}

/// Reflection-point angle for a path from `(emit_x, h_emit)` to a receiver
/// that sat at `rx0` at emission and at `rx1` on reception (height `h_rx`).
fn gamma_deg(emit_x: f64, h_emit: f64, rx0: f64, rx1: f64, h_rx: f64) -> f64 {
    let ground_x = emit_x + (rx1 - emit_x) * h_emit / (h_emit + h_rx);
    let u = (rx0 - ground_x, h_rx);
    let w = (rx1 - ground_x, h_rx);
    let cross = u.0 * w.1 - u.1 * w.0;
    let dot = u.0 * w.0 + u.1 * w.1;
    let theta = cross.abs().atan2(dot);
    90.0 + theta.to_degrees() / 2.0
}

/// Brute-force path lengths and flight times of both pulses by root finding.
pub fn exact_path_lengths(g: &TwoWayGeometry) -> Result<TwoWayPaths> {
    g.validate()?;
    let vertical = g.h_a + g.h_b;
    // A (x = a) -> B (x = 0 + v t)
    let t_ab = solve_flight_time(-g.a, g.v, vertical, g.c0)?;
    // B (x = 0) -> A (x = a + v t)
    let t_ba = solve_flight_time(g.a, g.v, vertical, g.c0)?;
    let gamma_ab = gamma_deg(g.a, g.h_a, 0.0, g.v * t_ab, g.h_b);
    let gamma_ba = gamma_deg(0.0, g.h_b, g.a, g.a + g.v * t_ba, g.h_a);
    Ok(TwoWayPaths {
        l_ab: g.c0 * t_ab,
        l_ba: g.c0 * t_ba,
        t_ab,
        t_ba,
        gamma_deg: gamma_ab.max(gamma_ba),
    })
}

/// One reflected path as seen at a receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoSpec {
    pub round_trip_time: f64,
    pub amplitude: f64,
    pub carrier_phase: f64,
}

/// Disturbances added to synthesized frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Per-component Gaussian IQ noise, ADC counts.
    pub iq_noise_sigma: f64,
    /// Per-echo, per-frame carrier phase jitter from rough-surface scatter.
    pub roughness_phase_sigma: f64,
    /// Stationary standard deviation of the slow airflow phase drift.
    pub airflow_drift_sigma: f64,
    /// Correlation time of the airflow drift, s.
    pub airflow_correlation_s: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            iq_noise_sigma: 0.0,
            roughness_phase_sigma: 0.0,
            airflow_drift_sigma: 0.0,
            airflow_correlation_s: 0.05,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.iq_noise_sigma,
            self.roughness_phase_sigma,
            self.airflow_drift_sigma,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "noise sigmas must be finite and >= 0: {self:?}"
            )));
        }
        if !(self.airflow_correlation_s.is_finite() && self.airflow_correlation_s > 0.0) {
            return Err(Error::InvalidParameter(
                "airflow correlation time must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Acquisition parameters of a synthesized frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    pub f_op_hz: f64,
    pub divisor: OdrDivisor,
    pub n_samples: usize,
    /// Full width of the raised-cosine pulse envelope, samples.
    pub pulse_width_samples: f64,
    /// Initial amplitude of the exponentially decaying transmit ringdown.
    pub ringdown_amplitude: f64,
    pub ringdown_decay_samples: f64,
    /// Amplitude of the ground echo in two-way pair synthesis.
    pub ground_echo_amplitude: f64,
}

impl Default for FrameConfig {
    /// ICU-10201 at its finest resolution.
    fn default() -> Self {
        Self {
            f_op_hz: 175_000.0,
            divisor: OdrDivisor::N2,
            n_samples: N_SAMPLES_MAX,
            pulse_width_samples: 8.0,
            ringdown_amplitude: 0.0,
            ringdown_decay_samples: 2.0,
            ground_echo_amplitude: 1000.0,
        }
    }
}

impl FrameConfig {
    pub fn odr_hz(&self) -> f64 {
        self.divisor.odr_hz(self.f_op_hz)
    }

    pub fn span_s(&self) -> f64 {
        self.n_samples as f64 / self.odr_hz()
    }

    pub fn wavelength(&self, c0: f64) -> f64 {
        c0 / self.f_op_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_op_hz.is_finite() && self.f_op_hz > 0.0) {
            return Err(Error::InvalidParameter("f_op must be > 0".into()));
        }
        if self.n_samples == 0 || self.n_samples > N_SAMPLES_MAX {
            return Err(Error::InvalidParameter(format!(
                "n_samples must be in 1..={N_SAMPLES_MAX}, got {}",
                self.n_samples
            )));
        }
        if !(self.pulse_width_samples > 0.0 && self.ringdown_decay_samples > 0.0) {
            return Err(Error::InvalidParameter(
                "pulse width and ringdown decay must be > 0".into(),
            ));
        }
        if !(self.ringdown_amplitude >= 0.0 && self.ground_echo_amplitude >= 0.0) {
            return Err(Error::InvalidParameter("amplitudes must be >= 0".into()));
        }
        Ok(())
    }
}

fn raised_cosine(offset: f64, width: f64) -> f64 {
    if offset.abs() >= 0.5 * width {
        0.0
    } else {
        0.5 * (1.0 + (TAU * offset / width).cos())
    }
}

fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Synthesizes one frame with an explicit random source and airflow phase.
pub fn synthesize_frame_with(
    echoes: &[EchoSpec],
    cfg: &FrameConfig,
    noise: &NoiseSpec,
    airflow_phase: f64,
    sensor_id: &str,
    t_emit: f64,
    rng: &mut SimRng,
) -> Result<IqFrame> {
    cfg.validate()?;
    noise.validate()?;
    let odr = cfg.odr_hz();
    let span = cfg.span_s();
    for e in echoes {
        if !(e.round_trip_time >= 0.0 && e.round_trip_time * odr < cfg.n_samples as f64) {
            return Err(Error::OutOfRange {
                round_trip_s: e.round_trip_time,
                span_s: span,
            });
        }
        if !(e.amplitude >= 0.0 && e.carrier_phase.is_finite()) {
            return Err(Error::InvalidParameter(format!("bad echo {e:?}")));
        }
    }

    let mut samples = vec![IqSample::default(); cfg.n_samples];
    if cfg.ringdown_amplitude > 0.0 {
        for (k, s) in samples.iter_mut().enumerate() {
            s.i += cfg.ringdown_amplitude * (-(k as f64) / cfg.ringdown_decay_samples).exp();
        }
    }

    let half = 0.5 * cfg.pulse_width_samples;
    for e in echoes {
        let jitter = noise.roughness_phase_sigma * normal(rng);
        let phase = e.carrier_phase + jitter + airflow_phase;
        let center = e.round_trip_time * odr;
        let first = (center - half).floor().max(0.0) as usize;
        let last = ((center + half).ceil() as usize).min(cfg.n_samples - 1);
        for k in first..=last {
            let env = raised_cosine(k as f64 - center, cfg.pulse_width_samples);
            if env > 0.0 {
                samples[k] += IqSample::from_polar(e.amplitude * env, phase);
            }
        }
    }

    if noise.iq_noise_sigma > 0.0 {
        for s in samples.iter_mut() {
            s.i += noise.iq_noise_sigma * normal(rng);
            s.q += noise.iq_noise_sigma * normal(rng);
        }
    }

    IqFrame::new(sensor_id, t_emit, cfg.f_op_hz, odr, samples)
}

/// Synthesizes one frame, seeded from `noise.seed`. The airflow offset is a
/// single draw from the drift's stationary distribution.
pub fn synthesize_frame(echoes: &[EchoSpec], cfg: &FrameConfig, noise: &NoiseSpec) -> Result<IqFrame> {
    let mut rng = SimRng::seed_from_u64(noise.seed);
    let airflow = noise.airflow_drift_sigma * normal(&mut rng);
    synthesize_frame_with(echoes, cfg, noise, airflow, "sim", 0.0, &mut rng)
}

/// First-order low-pass filtered Gaussian phase drift (Ornstein-Uhlenbeck).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirflowDrift {
    sigma: f64,
    correlation_s: f64,
    phase: f64,
    t: f64,
}

impl AirflowDrift {
    /// Starts at time `t` with a draw from the stationary distribution.
    pub fn new(sigma: f64, correlation_s: f64, t: f64, rng: &mut SimRng) -> Self {
        Self {
            sigma,
            correlation_s,
            phase: sigma * normal(rng),
            t,
        }
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    /// Advances to time `t`; earlier times leave the state unchanged.
    pub fn advance_to(&mut self, t: f64, rng: &mut SimRng) -> f64 {
        let dt = t - self.t;
        if dt > 0.0 {
            let rho = (-dt / self.correlation_s).exp();
            self.phase = rho * self.phase + self.sigma * (1.0 - rho * rho).sqrt() * normal(rng);
            self.t = t;
        }
        self.phase
    }
}

/// Identifiers of the receiving sensor in synthesized pairs.
pub const RECEIVER_B: &str = "B";
pub const RECEIVER_A: &str = "A";

/// Produces A->B / B->A frame pairs from exact geometry. The simulator owns
/// one airflow drift process; the B->A pulse is emitted `pulse_gap_s` after
/// the A->B pulse and sees the drift advanced by that gap.
#[derive(Debug, Clone)]
pub struct PairSimulator {
    cfg: FrameConfig,
    noise: NoiseSpec,
    pulse_gap_s: f64,
    rng: SimRng,
    drift: AirflowDrift,
}

impl PairSimulator {
    pub fn new(cfg: FrameConfig, noise: NoiseSpec) -> Result<Self> {
        let rng = SimRng::seed_from_u64(noise.seed);
        Self::with_rng(cfg, noise, rng)
    }

    pub fn with_rng(cfg: FrameConfig, noise: NoiseSpec, mut rng: SimRng) -> Result<Self> {
        cfg.validate()?;
        noise.validate()?;
        let drift = AirflowDrift::new(
            noise.airflow_drift_sigma,
            noise.airflow_correlation_s,
            0.0,
            &mut rng,
        );
        Ok(Self {
            pulse_gap_s: cfg.span_s(),
            cfg,
            noise,
            rng,
            drift,
        })
    }

    /// Overrides the default gap (one frame span).
    pub fn with_pulse_gap(mut self, gap_s: f64) -> Self {
        self.pulse_gap_s = gap_s;
        self
    }

    pub fn frame_config(&self) -> &FrameConfig {
        &self.cfg
    }

    /// Returns `(frame received at B, frame received at A)`.
    pub fn simulate(&mut self, g: &TwoWayGeometry, t_emit: f64) -> Result<(IqFrame, IqFrame)> {
        let paths = exact_path_lengths(g)?;
        let k = TAU * self.cfg.f_op_hz / g.c0;
        let amp = self.cfg.ground_echo_amplitude;

        let drift_ab = self.drift.advance_to(t_emit, &mut self.rng);
        let echo_ab = EchoSpec {
            round_trip_time: paths.t_ab,
            amplitude: amp,
            carrier_phase: wrap(-k * paths.l_ab),
        };
        let frame_ab = synthesize_frame_with(
            &[echo_ab],
            &self.cfg,
            &self.noise,
            drift_ab,
            RECEIVER_B,
            t_emit,
            &mut self.rng,
        )?;

        let t_second = t_emit + self.pulse_gap_s;
        let drift_ba = self.drift.advance_to(t_second, &mut self.rng);
        let echo_ba = EchoSpec {
            round_trip_time: paths.t_ba,
            amplitude: amp,
            carrier_phase: wrap(-k * paths.l_ba),
        };
        let frame_ba = synthesize_frame_with(
            &[echo_ba],
            &self.cfg,
            &self.noise,
            drift_ba,
            RECEIVER_A,
            t_second,
            &mut self.rng,
        )?;
        Ok((frame_ab, frame_ba))
    }
}

/// One noise realization of a single pulse pair.
pub fn simulate_two_way_pair(
    g: &TwoWayGeometry,
    cfg: &FrameConfig,
    noise: &NoiseSpec,
) -> Result<(IqFrame, IqFrame)> {
    PairSimulator::new(*cfg, *noise)?.simulate(g, 0.0)
}

/// Phase of a wave after `path_m` metres, wrapped.
pub fn propagation_phase(path_m: f64, f_op_hz: f64, c0: f64) -> f64 {
    wrap(-TAU * f_op_hz * path_m / c0)
}
