//! Baseband IQ frames and the DSP primitives shared by the ranging and
//! velocity pipelines.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Maximum number of IQ samples an ICU-x0201 records per measurement.
pub const N_SAMPLES_MAX: usize = 340;

/// Default number of leading samples skipped to step over transmit ringdown.
pub const DEFAULT_RINGDOWN_SAMPLES: usize = 20;

/// One in-phase/quadrature pair, in ADC counts. Serialized as `[i, q]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct IqSample {
    pub i: f64,
    pub q: f64,
}

impl IqSample {
    pub const fn new(i: f64, q: f64) -> Self {
        Self { i, q }
    }

    pub fn from_polar(magnitude: f64, phase: f64) -> Self {
        let (s, c) = phase.sin_cos();
        Self::new(magnitude * c, magnitude * s)
    }

    pub fn magnitude(self) -> f64 {
        self.i.hypot(self.q)
    }

    /// Phase in (-pi, pi], `atan2(q, i)`.
    pub fn phase(self) -> f64 {
        let p = self.q.atan2(self.i);
        // atan2 returns -pi for (negative, -0.0); fold onto the closed end.
        if p <= -PI {
            PI
        } else {
            p
        }
    }
}

impl From<[f64; 2]> for IqSample {
    fn from([i, q]: [f64; 2]) -> Self {
        Self { i, q }
    }
}

impl From<IqSample> for [f64; 2] {
    fn from(s: IqSample) -> Self {
        [s.i, s.q]
    }
}

impl std::ops::Add for IqSample {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.i + rhs.i, self.q + rhs.q)
    }
}

impl std::ops::AddAssign for IqSample {
    fn add_assign(&mut self, rhs: Self) {
        self.i += rhs.i;
        self.q += rhs.q;
    }
}

/// Output data rate divisor, `odr = f_op / N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum OdrDivisor {
    N2,
    N4,
    N8,
}

impl OdrDivisor {
    pub const fn value(self) -> u32 {
        match self {
            Self::N2 => 2,
            Self::N4 => 4,
            Self::N8 => 8,
        }
    }

    pub fn odr_hz(self, f_op_hz: f64) -> f64 {
        f_op_hz / f64::from(self.value())
    }
}

impl TryFrom<u32> for OdrDivisor {
    type Error = Error;

    fn try_from(n: u32) -> Result<Self> {
        match n {
            2 => Ok(Self::N2),
            4 => Ok(Self::N4),
            8 => Ok(Self::N8),
            other => Err(Error::InvalidParameter(format!(
                "odr divisor must be 2, 4 or 8, got {other}"
            ))),
        }
    }
}

impl From<OdrDivisor> for u32 {
    fn from(n: OdrDivisor) -> u32 {
        n.value()
    }
}

/// One ultrasonic measurement as delivered by the sensor. Sample `k` was
/// taken `k / odr_hz` seconds after emission at `t_emit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFrame")]
pub struct IqFrame {
    sensor_id: String,
    t_emit: f64,
    f_op_hz: f64,
    odr_hz: f64,
    samples: Vec<IqSample>,
}

#[derive(Deserialize)]
struct RawFrame {
    sensor_id: String,
    t_emit: f64,
    f_op_hz: f64,
    odr_hz: f64,
    samples: Vec<IqSample>,
}

impl TryFrom<RawFrame> for IqFrame {
    type Error = Error;

    fn try_from(r: RawFrame) -> Result<Self> {
        IqFrame::new(r.sensor_id, r.t_emit, r.f_op_hz, r.odr_hz, r.samples)
    }
}

impl IqFrame {
    pub fn new(
        sensor_id: impl Into<String>,
        t_emit: f64,
        f_op_hz: f64,
        odr_hz: f64,
        samples: Vec<IqSample>,
    ) -> Result<Self> {
        if samples.len() > N_SAMPLES_MAX {
            return Err(Error::InvalidFrame(format!(
                "{} samples exceeds the {N_SAMPLES_MAX} sample limit",
                samples.len()
            )));
        }
        if !(f_op_hz.is_finite() && f_op_hz > 0.0 && odr_hz.is_finite() && odr_hz > 0.0) {
            return Err(Error::InvalidFrame(format!(
                "f_op {f_op_hz} Hz / odr {odr_hz} Hz must be positive"
            )));
        }
        let ratio = f_op_hz / odr_hz;
        let divisor_ok = [2.0, 4.0, 8.0]
            .iter()
            .any(|n| ((ratio - n) / n).abs() < 1e-9);
        if !divisor_ok {
            return Err(Error::InvalidFrame(format!(
                "f_op / odr = {ratio} is not one of 2, 4, 8"
            )));
        }
        if !t_emit.is_finite() || samples.iter().any(|s| !(s.i.is_finite() && s.q.is_finite())) {
            return Err(Error::NonFinite("frame"));
        }
        Ok(Self {
            sensor_id: sensor_id.into(),
            t_emit,
            f_op_hz,
            odr_hz,
            samples,
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn t_emit(&self) -> f64 {
        self.t_emit
    }

    pub fn f_op_hz(&self) -> f64 {
        self.f_op_hz
    }

    pub fn odr_hz(&self) -> f64 {
        self.odr_hz
    }

    pub fn samples(&self) -> &[IqSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Time covered by the recorded samples.
    pub fn span_s(&self) -> f64 {
        self.samples.len() as f64 / self.odr_hz
    }
}

/// Per-sample magnitude and phase.
pub fn magnitude_phase(frame: &IqFrame) -> Result<(Vec<f64>, Vec<f64>)> {
    if frame.is_empty() {
        return Err(Error::EmptyFrame);
    }
    Ok(frame
        .samples()
        .iter()
        .map(|s| (s.magnitude(), s.phase()))
        .unzip())
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_phase(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("phase"));
    }
    Ok(wrap(x))
}

pub(crate) fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    let w = if r > PI { r - TAU } else { r };
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Location and phase of the strongest echo in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakDetection {
    pub index: usize,
    /// Round-trip time since emission, seconds.
    pub t_peak: f64,
    pub magnitude: f64,
    /// Phase at the integer peak index, (-pi, pi].
    pub phase: f64,
}

/// Peak search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakSearch {
    /// Leading samples excluded from the search (transmit ringdown).
    pub ringdown_samples: usize,
    /// Refine `t_peak` with a 3-point parabola through the magnitudes.
    pub interpolate: bool,
}

impl Default for PeakSearch {
    fn default() -> Self {
        Self {
            ringdown_samples: DEFAULT_RINGDOWN_SAMPLES,
            interpolate: false,
        }
    }
}

impl PeakSearch {
    pub fn detect(&self, frame: &IqFrame) -> Result<PeakDetection> {
        if frame.is_empty() {
            return Err(Error::EmptyFrame);
        }
        let start = self.ringdown_samples;
        if frame.len() <= start {
            return Err(Error::InvalidFrame(format!(
                "frame of {} samples is inside the {start} sample ringdown window",
                frame.len()
            )));
        }
        let samples = frame.samples();
        // Strict comparison keeps the lowest index on ties.
        let mut index = start;
        let mut best = samples[start].magnitude();
        for (k, s) in samples.iter().enumerate().skip(start + 1) {
            let m = s.magnitude();
            if m > best {
                best = m;
                index = k;
            }
        }
        if best <= 0.0 {
            return Err(Error::NoEcho);
        }

        let mut position = index as f64;
        if self.interpolate && index > start && index + 1 < samples.len() {
            let (l, c, r) = (
                samples[index - 1].magnitude(),
                best,
                samples[index + 1].magnitude(),
            );
            let denom = l - 2.0 * c + r;
            if denom < 0.0 {
                position += (0.5 * (l - r) / denom).clamp(-0.5, 0.5);
            }
        }

        Ok(PeakDetection {
            index,
            t_peak: position / frame.odr_hz(),
            magnitude: best,
            phase: samples[index].phase(),
        })
    }
}

/// Strongest echo after skipping `exclude_ringdown_samples`, without
/// sub-sample refinement.
pub fn detect_ground_peak(frame: &IqFrame, exclude_ringdown_samples: usize) -> Result<PeakDetection> {
    PeakSearch {
        ringdown_samples: exclude_ringdown_samples,
        interpolate: false,
    }
    .detect(frame)
}

/// Writes frames as one JSON object per line.
pub fn write_frame_log<'a, W: Write>(
    mut out: W,
    frames: impl IntoIterator<Item = &'a IqFrame>,
) -> Result<()> {
    for frame in frames {
        serde_json::to_writer(&mut out, frame)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a log written by [`write_frame_log`]. Blank lines are skipped.
pub fn read_frame_log<R: BufRead>(input: R) -> Result<Vec<IqFrame>> {
    let mut frames = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(serde_json::from_str(&line)?);
    }
    Ok(frames)
}
