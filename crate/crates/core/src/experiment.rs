//! Experiment configuration, seeded orchestration of obstacle-avoidance
//! flights and velocity benchmarks, and CSV / summary output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::echo::{NoiseSpec, PairSimulator, TwoWayGeometry, RECEIVER_A, RECEIVER_B};
use crate::fusion::{predict, update, FusionState, ProcessNoise};
use crate::oa::{nearest_obstacle_distance, NoiseFloor, OAConfig, PolicyState};
use crate::seed::{derive_seed, stream, SimRng};
use crate::sensors::{
    oa_cycle_time, optical_flow_reading, velocity_cycle_time, Imu, ImuSpec, LaserToFSpec, OpticalFlowSpec,
    UltrasonicSensorSpec,
};
use crate::signal::{write_frame_log, IqFrame, OdrDivisor};
use crate::stats::{mean, moving_average, mse};
use crate::velocity::{estimate, write_track_csv, EstimatorConfig, TrackRow};
use crate::world::{
    check_crash, sense_laser, sense_ultrasonic, step, DroneState2D, Kinematics, Material, Pose, RunMetrics, Scene,
    SonarModel, World,
};
use crate::{Error, Result, SPEED_OF_SOUND};

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Oa,
    Velocity,
}

/// Sensor under test. Avoidance runs take `ultrasonic` or `laser`; velocity
/// benchmarks always report every raw stream and use this to choose what
/// the filter fuses with the IMU (`fused`: both).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorSelection {
    Ultrasonic,
    Laser,
    OpticalFlow,
    Fused,
}

impl SensorSelection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ultrasonic => "ultrasonic",
            Self::Laser => "laser",
            Self::OpticalFlow => "optical_flow",
            Self::Fused => "fused",
        }
    }
}

impl std::str::FromStr for SensorSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ultrasonic" => Ok(Self::Ultrasonic),
            "laser" => Ok(Self::Laser),
            "optical_flow" => Ok(Self::OpticalFlow),
            "fused" => Ok(Self::Fused),
            _ => Err(Error::Config(format!("unknown sensor {s:?}"))),
        }
    }
}

/// Ground-truth velocity profile of a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Sinusoid {
        amplitude: f64,
        frequency_hz: f64,
    },
    /// Velocity driven by a correlated random acceleration, bounded by
    /// `v_limit`.
    RandomWalk {
        accel_sigma: f64,
        accel_tau_s: f64,
        v_limit: f64,
    },
}

impl Default for Profile {
    fn default() -> Self {
        Self::Sinusoid {
            amplitude: 1.0,
            frequency_hz: 0.2,
        }
    }
}

impl Profile {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Sinusoid {
                amplitude,
                frequency_hz,
            } => amplitude.abs() <= 2.0 && frequency_hz > 0.0,
            Self::RandomWalk {
                accel_sigma,
                accel_tau_s,
                v_limit,
            } => accel_sigma >= 0.0 && accel_tau_s > 0.0 && v_limit > 0.0 && v_limit <= 2.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid profile {self:?} (|v| must stay within 2 m/s)")))
        }
    }

    /// Expected mean of v^2, used to size the optical-flow scale error.
    fn mean_square(&self) -> f64 {
        match *self {
            Self::Sinusoid { amplitude, .. } => 0.5 * amplitude * amplitude,
            Self::RandomWalk { v_limit, .. } => v_limit * v_limit / 3.0,
        }
    }
}

/// Tabulated ground truth on a uniform grid.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub dt: f64,
    pub v: Vec<f64>,
    pub accel: Vec<f64>,
    /// Travelled position.
    pub x: Vec<f64>,
}

impl GroundTruth {
    pub fn generate(profile: &Profile, duration_s: f64, dt: f64, rng: &mut SimRng) -> Self {
        let n = (duration_s / dt).ceil() as usize + 2;
        let (v, accel): (Vec<f64>, Vec<f64>) = match *profile {
            Profile::Sinusoid {
                amplitude,
                frequency_hz,
            } => {
                let w = std::f64::consts::TAU * frequency_hz;
                (0..n)
                    .map(|k| {
                        let t = k as f64 * dt;
                        (amplitude * (w * t).sin(), amplitude * w * (w * t).cos())
                    })
                    .unzip()
            }
            Profile::RandomWalk {
                accel_sigma,
                accel_tau_s,
                v_limit,
            } => {
                let phi = (-dt / accel_tau_s).exp();
                let kick = accel_sigma * (1.0 - phi * phi).sqrt();
                let (mut v, mut a) = (0.0f64, 0.0f64);
                let mut vs = Vec::with_capacity(n);
                let mut accs = Vec::with_capacity(n);
                for _ in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    a = phi * a + kick * z;
                    // Weak pull toward zero keeps the walk off the limits.
                    let mut applied = a - 0.25 * v;
                    if (v + applied * dt).abs() > v_limit {
                        applied = 0.0;
                        a = 0.0;
                    }
                    vs.push(v);
                    accs.push(applied);
                    v += applied * dt;
                }
                (vs, accs)
            }
        };
        let mut x = Vec::with_capacity(n);
        let mut pos = 0.0;
        x.push(pos);
        for k in 1..n {
            pos += 0.5 * (v[k - 1] + v[k]) * dt;
            x.push(pos);
        }
        Self { dt, v, accel, x }
    }

    fn interp(&self, series: &[f64], t: f64) -> f64 {
        let s = (t / self.dt).max(0.0);
        let k = (s.floor() as usize).min(series.len() - 2);
        let f = s - k as f64;
        series[k] + f * (series[k + 1] - series[k])
    }

    pub fn v_at(&self, t: f64) -> f64 {
        self.interp(&self.v, t)
    }

    pub fn accel_at(&self, t: f64) -> f64 {
        self.interp(&self.accel, t)
    }

    pub fn x_at(&self, t: f64) -> f64 {
        self.interp(&self.x, t)
    }
}

/// Surface and noise settings of a velocity benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfacePreset {
    pub feature_density: f64,
    pub roughness_phase_sigma: f64,
    pub iq_noise_sigma: f64,
    pub airflow_drift_sigma: f64,
    pub height_m: f64,
    /// Overrides the optical-flow sensor's noise.
    #[serde(default)]
    pub optical_flow_noise_px: Option<f64>,
    #[serde(default)]
    pub imu_accel_noise_sigma: Option<f64>,
    #[serde(default)]
    pub imu_bias_walk_sigma: Option<f64>,
    #[serde(default)]
    pub imu_initial_bias: Option<f64>,
}

impl SurfacePreset {
    pub fn builtin(name: &str) -> Option<Self> {
        builtin_presets().remove(name)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.feature_density) {
            return Err(Error::Config("feature_density must be in [0, 1]".into()));
        }
        if !(self.height_m > 0.0) {
            return Err(Error::Config("height_m must be > 0".into()));
        }
        self.noise_spec().validate()
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            iq_noise_sigma: self.iq_noise_sigma,
            roughness_phase_sigma: self.roughness_phase_sigma,
            airflow_drift_sigma: self.airflow_drift_sigma,
            ..NoiseSpec::default()
        }
    }

    pub fn surface(&self) -> Material {
        Material {
            name: "floor".into(),
            feature_density: self.feature_density,
            ..Material::carpet()
        }
    }

    pub fn optical_flow_spec(&self, base: OpticalFlowSpec) -> OpticalFlowSpec {
        OpticalFlowSpec {
            noise_px: self.optical_flow_noise_px.unwrap_or(base.noise_px),
            ..base
        }
    }

    pub fn imu_spec(&self, base: ImuSpec) -> ImuSpec {
        ImuSpec {
            accel_noise_sigma: self.imu_accel_noise_sigma.unwrap_or(base.accel_noise_sigma),
            bias_walk_sigma: self.imu_bias_walk_sigma.unwrap_or(base.bias_walk_sigma),
            initial_bias: self.imu_initial_bias.unwrap_or(base.initial_bias),
            ..base
        }
    }
}

pub fn builtin_presets() -> BTreeMap<String, SurfacePreset> {
    toml::from_str(include_str!("../data/presets.toml")).expect("built-in presets parse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Built-in scene name or scene file path.
    pub scenario: String,
    pub sensor: SensorSelection,
    pub n_runs: usize,
    pub seed: u64,
    pub max_duration_s: f64,
    /// Surface preset name for velocity benchmarks.
    pub preset: String,
    pub out_dir: Option<PathBuf>,
    pub c0: f64,
    /// Frames (avoidance, run 0) or pulse pairs (velocity, run 0) to log.
    pub log_frames: usize,
    pub oa: OAConfig,
    pub sonar: SonarModel,
    pub oa_noise: NoiseSpec,
    pub kinematics: Kinematics,
    pub laser: LaserToFSpec,
    pub profile: Profile,
    pub estimator: EstimatorConfig,
    pub optical_flow: OpticalFlowSpec,
    pub imu: ImuSpec,
    /// Trailing window of the smoothed MSE column, samples.
    pub moving_average_window: usize,
    /// Rate of fused and ground-truth track rows, Hz.
    pub fused_output_hz: f64,
    /// Presets defined in the config, added to or replacing built-ins.
    pub presets: BTreeMap<String, SurfacePreset>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Oa,
            scenario: "glass_corridor".into(),
            sensor: SensorSelection::Ultrasonic,
            n_runs: 10,
            seed: 1,
            max_duration_s: 480.0,
            preset: "table".into(),
            out_dir: None,
            c0: SPEED_OF_SOUND,
            log_frames: 0,
            oa: OAConfig::default(),
            sonar: SonarModel::default(),
            oa_noise: NoiseSpec {
                iq_noise_sigma: 3.0,
                ..NoiseSpec::default()
            },
            kinematics: Kinematics::default(),
            laser: LaserToFSpec::default(),
            profile: Profile::default(),
            estimator: EstimatorConfig::default(),
            optical_flow: OpticalFlowSpec::default(),
            imu: ImuSpec::default(),
            moving_average_window: 10,
            fused_output_hz: 100.0,
            presets: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn oa(scenario: &str, sensor: SensorSelection) -> Self {
        Self {
            scenario: scenario.into(),
            sensor,
            ..Self::default()
        }
    }

    pub fn velocity(preset: &str) -> Self {
        Self {
            kind: ExperimentKind::Velocity,
            sensor: SensorSelection::Fused,
            n_runs: 1,
            max_duration_s: 60.0,
            preset: preset.into(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text)?;
        Ok(cfg)
    }

    pub fn resolve_preset(&self) -> Result<SurfacePreset> {
        self.presets
            .get(&self.preset)
            .copied()
            .or_else(|| SurfacePreset::builtin(&self.preset))
            .ok_or_else(|| Error::Config(format!("unknown preset {:?}", self.preset)))
    }

    pub fn ultrasonic_oa_spec(&self) -> UltrasonicSensorSpec {
        UltrasonicSensorSpec::icu30201(OdrDivisor::N4)
    }

    pub fn ultrasonic_velocity_spec(&self) -> UltrasonicSensorSpec {
        UltrasonicSensorSpec::icu10201(OdrDivisor::N2)
    }

    /// Checks everything a run needs, before any run starts.
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be >= 1".into()));
        }
        if !(self.max_duration_s.is_finite() && self.max_duration_s > 0.0) {
            return Err(Error::Config("max_duration_s must be > 0".into()));
        }
        if !(self.c0 > 0.0) {
            return Err(Error::Config("c0 must be > 0".into()));
        }
        match self.kind {
            ExperimentKind::Oa => {
                if !matches!(self.sensor, SensorSelection::Ultrasonic | SensorSelection::Laser) {
                    return Err(Error::Config(format!(
                        "avoidance runs take sensor ultrasonic or laser, not {}",
                        self.sensor.as_str()
                    )));
                }
                Scene::resolve(&self.scenario)?;
                self.oa.validate()?;
                self.oa_noise.validate()?;
                self.ultrasonic_oa_spec().validate(self.c0)?;
                if !(self.laser.rate_hz > 0.0) {
                    return Err(Error::Config("laser rate_hz must be > 0".into()));
                }
            }
            ExperimentKind::Velocity => {
                if self.sensor == SensorSelection::Laser {
                    return Err(Error::Config(
                        "velocity benchmarks take sensor ultrasonic, optical_flow or fused".into(),
                    ));
                }
                let preset = self.resolve_preset()?;
                preset.validate()?;
                self.profile.validate()?;
                self.estimator.validate()?;
                let spec = self.ultrasonic_velocity_spec();
                let reach = spec.acquisition_range_m(self.c0);
                if preset.height_m >= reach {
                    return Err(Error::Config(format!(
                        "height {} m is beyond the {reach:.3} m acquisition window",
                        preset.height_m
                    )));
                }
                if self.moving_average_window == 0 || !(self.fused_output_hz > 0.0) {
                    return Err(Error::Config("moving_average_window and fused_output_hz must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn run_seed(&self, run_id: usize) -> u64 {
        derive_seed(self.seed, "run", run_id as u64)
    }
}

/// Power, rate and range of the sensing configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorMetadata {
    pub sensor: String,
    pub power_mw: f64,
    pub rate_hz: f64,
    pub range_m: f64,
}

/// One control step of an avoidance flight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    /// Forward speed at the measurement.
    pub speed: f64,
    pub d: Option<f64>,
    /// Commanded forward speed.
    pub v_forward: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OaRun {
    pub metrics: RunMetrics,
    pub trace: Vec<TraceRow>,
    pub frames: Vec<IqFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OaAggregates {
    pub n_runs: usize,
    pub n_crashed: usize,
    pub success_rate: f64,
    pub mean_time_s: f64,
    pub mean_distance_m: f64,
    pub crash_causes: BTreeMap<String, usize>,
}

impl OaAggregates {
    pub fn from_runs<'a>(runs: impl IntoIterator<Item = &'a RunMetrics>) -> Self {
        let runs: Vec<&RunMetrics> = runs.into_iter().collect();
        let n = runs.len();
        let mut crash_causes = BTreeMap::new();
        for r in runs.iter().filter(|r| r.crashed) {
            let cause = r.crash_cause.clone().unwrap_or_default();
            *crash_causes.entry(cause).or_insert(0) += 1;
        }
        let n_crashed = crash_causes.values().sum();
        let times: Vec<f64> = runs.iter().map(|r| r.duration_s).collect();
        let dists: Vec<f64> = runs.iter().map(|r| r.distance_m).collect();
        Self {
            n_runs: n,
            n_crashed,
            success_rate: if n == 0 { 0.0 } else { (n - n_crashed) as f64 / n as f64 },
            mean_time_s: mean(&times).unwrap_or(0.0),
            mean_distance_m: mean(&dists).unwrap_or(0.0),
            crash_causes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OaReport {
    pub scenario: String,
    pub sensor: SensorSelection,
    pub seed: u64,
    pub runs: Vec<OaRun>,
    pub aggregates: OaAggregates,
    pub metadata: SensorMetadata,
}

fn oa_metadata(cfg: &ExperimentConfig) -> SensorMetadata {
    match cfg.sensor {
        SensorSelection::Laser => SensorMetadata {
            sensor: cfg.laser.name.clone(),
            power_mw: cfg.laser.power_mw,
            rate_hz: cfg.laser.rate_hz,
            range_m: cfg.laser.max_range_m,
        },
        _ => {
            let spec = cfg.ultrasonic_oa_spec();
            SensorMetadata {
                sensor: spec.name.clone(),
                power_mw: spec.power_mw,
                rate_hz: oa_cycle_time(&spec, cfg.c0).rate_hz(),
                range_m: spec.acquisition_range_m(cfg.c0),
            }
        }
    }
}

/// Physics sub-steps per control step.
const SUBSTEPS: usize = 6;
/// Control steps between stored trajectory poses.
const POSE_EVERY: usize = 10;

/// One avoidance flight in `scene`. Deterministic in `run_seed`.
pub fn simulate_flight(cfg: &ExperimentConfig, scene: &Scene, run_id: usize, run_seed: u64) -> Result<OaRun> {
    let spec = cfg.ultrasonic_oa_spec();
    let dt_ctrl = match cfg.sensor {
        SensorSelection::Laser => 1.0 / cfg.laser.rate_hz,
        _ => oa_cycle_time(&spec, cfg.c0).total_s,
    };
    let dt = dt_ctrl / SUBSTEPS as f64;
    let mut noise_rng = stream(run_seed, "noise", 0);
    let mut policy = PolicyState::new(&cfg.oa, stream(run_seed, "policy", 0));

    let mut state = DroneState2D::at(scene.start.x, scene.start.y, scene.start.yaw);
    let floor = if cfg.sensor == SensorSelection::Ultrasonic {
        let empty = World::default();
        let frames = (0..cfg.oa.calibration_frames)
            .map(|_| sense_ultrasonic(&state, &empty, &spec, &cfg.sonar, &cfg.oa_noise, &mut noise_rng))
            .collect::<Result<Vec<_>>>()?;
        NoiseFloor::calibrate(&frames, cfg.oa.noise_floor_k, cfg.oa.ringdown_samples)
    } else {
        NoiseFloor::fixed(0.0)
    };

    let mut trace = Vec::new();
    let mut trajectory = Vec::new();
    let mut frames = Vec::new();
    let mut distance = 0.0;
    let mut crash = None;
    let mut k = 0usize;
    'flight: while state.t < cfg.max_duration_s {
        let d = match cfg.sensor {
            SensorSelection::Laser => sense_laser(&state, &scene.world, &cfg.laser, &mut noise_rng),
            _ => {
                let frame = sense_ultrasonic(&state, &scene.world, &spec, &cfg.sonar, &cfg.oa_noise, &mut noise_rng)?;
                let d = nearest_obstacle_distance(&frame, &cfg.oa, floor, cfg.c0);
                if run_id == 0 && frames.len() < cfg.log_frames {
                    frames.push(frame);
                }
                d
            }
        };
        let cmd = policy.control(&cfg.oa, d, state.t);
        trace.push(TraceRow {
            t: state.t,
            x: state.x,
            y: state.y,
            yaw: state.yaw,
            speed: state.v_forward,
            d,
            v_forward: cmd.v_forward,
            yaw_rate: cmd.yaw_rate,
        });
        if k % POSE_EVERY == 0 {
            trajectory.push(pose(&state));
        }
        k += 1;
        for _ in 0..SUBSTEPS {
            distance += state.v_forward.abs() * dt;
            state = step(&state, &cmd, dt, &cfg.kinematics);
            if let Some(c) = check_crash(&state, &scene.world, scene.drone_radius) {
                crash = Some(c);
                break 'flight;
            }
        }
    }
    trajectory.push(pose(&state));

    Ok(OaRun {
        metrics: RunMetrics {
            run_id,
            seed: run_seed,
            duration_s: state.t,
            distance_m: distance,
            crashed: crash.is_some(),
            crash_cause: crash.map(|c| c.material),
            trajectory,
        },
        trace,
        frames,
    })
}

fn pose(s: &DroneState2D) -> Pose {
    Pose {
        t: s.t,
        x: s.x,
        y: s.y,
        yaw: s.yaw,
    }
}

/// `n_runs` seeded avoidance flights, run in parallel and reported in order.
pub fn run_oa_experiment(cfg: &ExperimentConfig) -> Result<OaReport> {
    if cfg.kind != ExperimentKind::Oa {
        return Err(Error::Config("not an avoidance experiment".into()));
    }
    cfg.validate()?;
    let scene = Scene::resolve(&cfg.scenario)?;
    let runs = (0..cfg.n_runs)
        .into_par_iter()
        .map(|i| simulate_flight(cfg, &scene, i, cfg.run_seed(i)))
        .collect::<Result<Vec<_>>>()?;
    let aggregates = OaAggregates::from_runs(runs.iter().map(|r| &r.metrics));
    Ok(OaReport {
        scenario: scene.name.clone(),
        sensor: cfg.sensor,
        seed: cfg.seed,
        runs,
        aggregates,
        metadata: oa_metadata(cfg),
    })
}

/// Error statistics of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMse {
    pub run_id: Option<usize>,
    pub source: String,
    pub n_total: usize,
    pub n_valid: usize,
    pub mse: Option<f64>,
    pub mse_moving_average: Option<f64>,
}

/// Raw and smoothed MSE over the valid rows of `source` that carry truth.
pub fn stream_mse(rows: &[TrackRow], source: &str, window: usize, run_id: Option<usize>) -> StreamMse {
    let all: Vec<&TrackRow> = rows.iter().filter(|r| r.source == source).collect();
    let (est, truth): (Vec<f64>, Vec<f64>) = all
        .iter()
        .filter(|r| r.valid)
        .filter_map(|r| r.v_true.map(|t| (r.v, t)))
        .unzip();
    let smoothed = moving_average(&est, window);
    StreamMse {
        run_id,
        source: source.into(),
        n_total: all.len(),
        n_valid: est.len(),
        mse: mse(&est, &truth),
        mse_moving_average: mse(&smoothed, &truth),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityRun {
    pub run_id: usize,
    pub seed: u64,
    pub rows: Vec<TrackRow>,
    pub mse: Vec<StreamMse>,
    pub frames: Vec<IqFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityReport {
    pub preset: String,
    pub fusion_input: SensorSelection,
    pub seed: u64,
    pub runs: Vec<VelocityRun>,
    /// Mean over runs, one row per stream.
    pub mean_mse: Vec<StreamMse>,
    pub metadata: Vec<SensorMetadata>,
}

impl VelocityReport {
    pub fn mean_mse_of(&self, source: &str) -> Option<f64> {
        self.mean_mse.iter().find(|m| m.source == source).and_then(|m| m.mse)
    }
}

pub const STREAMS: [&str; 3] = ["ultrasonic", "optical_flow", "fused"];

/// Measurement variance of the ultrasonic stream implied by the noise model.
pub fn ultrasonic_variance(preset: &SurfacePreset, est: &EstimatorConfig, f_op_hz: f64, amplitude: f64, pulse_gap_s: f64, corr_s: f64) -> f64 {
    let k = est.velocity_per_radian(f_op_hz);
    let rough = 2.0 * preset.roughness_phase_sigma.powi(2);
    let drift = 2.0 * preset.airflow_drift_sigma.powi(2) * (1.0 - (-pulse_gap_s / corr_s).exp());
    let iq = 2.0 * (preset.iq_noise_sigma / amplitude).powi(2);
    k * k * (rough + drift + iq) + 1e-4
}

/// Measurement variance of the optical-flow stream implied by the noise
/// model, including the scale error on feature-poor surfaces.
pub fn optical_flow_variance(preset: &SurfacePreset, spec: &OpticalFlowSpec, h: f64, mean_square_v: f64) -> f64 {
    let per_px = spec.flow_to_velocity(1.0, h);
    let noise = spec.noise_px * (1.0 - preset.feature_density);
    let quant = spec.pixel_quantum.powi(2) / 12.0;
    let scale = (1.0 - spec.feature_sensitivity(preset.feature_density)).powi(2) * mean_square_v;
    per_px * per_px * (noise * noise + quant) + scale + 1e-4
}

struct Measurement {
    t: f64,
    v: f64,
    valid: bool,
    r: f64,
}

/// One velocity benchmark run.
pub fn simulate_velocity_run(cfg: &ExperimentConfig, preset: &SurfacePreset, run_id: usize, run_seed: u64) -> Result<VelocityRun> {
    let h = preset.height_m;
    let c0 = cfg.c0;
    let duration = cfg.max_duration_s;
    let imu_spec = preset.imu_spec(cfg.imu);
    let dt_imu = 1.0 / imu_spec.rate_hz;
    let gt = GroundTruth::generate(&cfg.profile, duration, dt_imu, &mut stream(run_seed, "profile", 0));
    let est_cfg = EstimatorConfig { c0, ..cfg.estimator };

    // Ultrasonic pairs.
    let us_spec = cfg.ultrasonic_velocity_spec();
    let frame_cfg = us_spec.frame_config(c0);
    let noise = preset.noise_spec();
    let mut sim = PairSimulator::with_rng(frame_cfg, noise, stream(run_seed, "ultrasonic", 0))?;
    let gap = frame_cfg.span_s();
    let r_us = ultrasonic_variance(preset, &est_cfg, frame_cfg.f_op_hz, frame_cfg.ground_echo_amplitude, gap, noise.airflow_correlation_s);
    let cycle = velocity_cycle_time(h, c0, us_spec.comm_overhead_s);
    let mut rows = Vec::new();
    let mut frames = Vec::new();
    let mut us_meas = Vec::new();
    let mut m = 0usize;
    loop {
        let t = m as f64 * cycle;
        if t > duration {
            break;
        }
        let v = gt.v_at(t);
        let pitch = (gt.accel_at(t) / GRAVITY).atan();
        let dh = 0.5 * est_cfg.a * pitch.sin();
        let g = TwoWayGeometry::new(est_cfg.a, h - dh, h + dh, v, c0)?;
        let (ab, ba) = sim.simulate(&g, t)?;
        let e = estimate(&ab, &ba, &est_cfg);
        if run_id == 0 && frames.len() < 2 * cfg.log_frames {
            frames.push(ab);
            frames.push(ba);
        }
        rows.push(TrackRow::from_estimate("ultrasonic", &e).with_truth(v));
        us_meas.push(Measurement {
            t,
            v: e.v,
            valid: e.valid,
            r: r_us,
        });
        m += 1;
    }

    // Optical flow, timestamped at the middle of each frame interval.
    let of_spec = preset.optical_flow_spec(cfg.optical_flow);
    let surface = preset.surface();
    let r_of = optical_flow_variance(preset, &of_spec, h, cfg.profile.mean_square());
    let mut of_rng = stream(run_seed, "optical_flow", 0);
    let frame_dt = 1.0 / of_spec.fps;
    let mut of_meas = Vec::new();
    let mut j = 1usize;
    loop {
        let t_end = j as f64 * frame_dt;
        if t_end > duration {
            break;
        }
        let disp = gt.x_at(t_end) - gt.x_at(t_end - frame_dt);
        let reading = optical_flow_reading(disp, h, &of_spec, &surface, &mut of_rng);
        let v = of_spec.flow_to_velocity(reading.pixels(&of_spec), h);
        let t = t_end - 0.5 * frame_dt;
        rows.push(TrackRow::sample("optical_flow", t, v).with_truth(gt.v_at(t)));
        of_meas.push(Measurement {
            t,
            v,
            valid: true,
            r: r_of,
        });
        j += 1;
    }

    let mut meas: Vec<Measurement> = match cfg.sensor {
        SensorSelection::Ultrasonic => us_meas,
        SensorSelection::OpticalFlow => of_meas,
        _ => us_meas.into_iter().chain(of_meas).collect(),
    };
    meas.sort_by(|a, b| a.t.total_cmp(&b.t));

    // IMU-driven filter.
    let q = ProcessNoise {
        accel_psd: imu_spec.accel_noise_sigma.powi(2) * dt_imu + 1e-6,
        bias_psd: imu_spec.bias_walk_sigma.powi(2) + 1e-8,
    };
    let mut imu = Imu::new(imu_spec);
    let mut imu_rng = stream(run_seed, "imu", 0);
    let mut state = FusionState::new(0.0, 1.0, imu_spec.initial_bias.powi(2).max(1e-4));
    let out_every = ((imu_spec.rate_hz / cfg.fused_output_hz).round() as usize).max(1);
    let n_imu = (duration / dt_imu).floor() as usize;
    let mut next = 0usize;
    while next < meas.len() && meas[next].t <= 0.0 {
        state = update(&state, meas[next].v, meas[next].r, meas[next].valid);
        next += 1;
    }
    for k in 1..=n_imu {
        let t = k as f64 * dt_imu;
        let accel = imu.read(gt.accel[k - 1], dt_imu, &mut imu_rng);
        state = predict(&state, accel, dt_imu, &q);
        while next < meas.len() && meas[next].t <= t {
            state = update(&state, meas[next].v, meas[next].r, meas[next].valid);
            next += 1;
        }
        if k % out_every == 0 {
            let truth = gt.v[k];
            rows.push(TrackRow::sample("gt", t, truth).with_truth(truth));
            rows.push(TrackRow::sample("fused", t, state.v).with_truth(truth));
        }
    }

    let mse = STREAMS
        .iter()
        .map(|s| stream_mse(&rows, s, cfg.moving_average_window, Some(run_id)))
        .collect();
    Ok(VelocityRun {
        run_id,
        seed: run_seed,
        rows,
        mse,
        frames,
    })
}

pub fn run_velocity_benchmark(cfg: &ExperimentConfig) -> Result<VelocityReport> {
    if cfg.kind != ExperimentKind::Velocity {
        return Err(Error::Config("not a velocity benchmark".into()));
    }
    cfg.validate()?;
    let preset = cfg.resolve_preset()?;
    let runs = (0..cfg.n_runs)
        .into_par_iter()
        .map(|i| simulate_velocity_run(cfg, &preset, i, cfg.run_seed(i)))
        .collect::<Result<Vec<_>>>()?;

    let mean_mse = STREAMS
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let per_run: Vec<&StreamMse> = runs.iter().map(|r| &r.mse[i]).collect();
            let avg = |f: fn(&StreamMse) -> Option<f64>| {
                let xs: Option<Vec<f64>> = per_run.iter().map(|m| f(m)).collect();
                xs.and_then(|xs| mean(&xs))
            };
            StreamMse {
                run_id: None,
                source: (*s).into(),
                n_total: per_run.iter().map(|m| m.n_total).sum(),
                n_valid: per_run.iter().map(|m| m.n_valid).sum(),
                mse: avg(|m| m.mse),
                mse_moving_average: avg(|m| m.mse_moving_average),
            }
        })
        .collect();

    let us = cfg.ultrasonic_velocity_spec();
    let of = preset.optical_flow_spec(cfg.optical_flow);
    let metadata = vec![
        SensorMetadata {
            sensor: format!("2x {}", us.name),
            power_mw: 2.0 * us.power_mw,
            rate_hz: 1.0 / velocity_cycle_time(preset.height_m, cfg.c0, us.comm_overhead_s),
            range_m: us.acquisition_range_m(cfg.c0),
        },
        SensorMetadata {
            sensor: "PMW3901 + ToF".into(),
            power_mw: of.power_mw,
            rate_hz: of.fps,
            range_m: f64::NAN,
        },
    ];
    Ok(VelocityReport {
        preset: cfg.preset.clone(),
        fusion_input: cfg.sensor,
        seed: cfg.seed,
        runs,
        mean_mse,
        metadata,
    })
}

/// Either kind of experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum BenchmarkReport {
    Oa(OaReport),
    Velocity(VelocityReport),
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<BenchmarkReport> {
    Ok(match cfg.kind {
        ExperimentKind::Oa => BenchmarkReport::Oa(run_oa_experiment(cfg)?),
        ExperimentKind::Velocity => BenchmarkReport::Velocity(run_velocity_benchmark(cfg)?),
    })
}

/// Row of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: usize,
    pub seed: u64,
    pub time_s: f64,
    pub crashed: bool,
    pub crash_cause: Option<String>,
    pub distance_m: f64,
}

impl From<&RunMetrics> for RunRow {
    fn from(m: &RunMetrics) -> Self {
        Self {
            run_id: m.run_id,
            seed: m.seed,
            time_s: m.duration_s,
            crashed: m.crashed,
            crash_cause: m.crash_cause.clone(),
            distance_m: m.distance_m,
        }
    }
}

#[derive(Serialize)]
struct OaSummary<'a> {
    scenario: &'a str,
    sensor: &'a str,
    seed: u64,
    aggregates: &'a OaAggregates,
    metadata: &'a SensorMetadata,
}

#[derive(Serialize)]
struct VelocitySummary<'a> {
    preset: &'a str,
    fusion_input: &'a str,
    seed: u64,
    mse: &'a [StreamMse],
    metadata: &'a [SensorMetadata],
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_rows(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

impl OaReport {
    pub fn summary_text(&self) -> String {
        let a = &self.aggregates;
        let mut s = String::new();
        let _ = writeln!(s, "scenario {}  sensor {}  seed {}", self.scenario, self.sensor.as_str(), self.seed);
        let _ = writeln!(
            s,
            "{} ({:.1} mW, {:.1} Hz, {:.2} m)",
            self.metadata.sensor, self.metadata.power_mw, self.metadata.rate_hz, self.metadata.range_m
        );
        let _ = writeln!(s, "{:>4} {:>10} {:>6} {:>10} {:>10}", "run", "time [s]", "crash", "cause", "dist [m]");
        for r in &self.runs {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:>4} {:>10.1} {:>6} {:>10} {:>10.1}",
                m.run_id,
                m.duration_s,
                if m.crashed { "yes" } else { "no" },
                m.crash_cause.as_deref().unwrap_or("-"),
                m.distance_m
            );
        }
        let _ = writeln!(
            s,
            "mean {:>9.1} {:>6} {:>10} {:>10.1}",
            a.mean_time_s,
            format!("{}/{}", a.n_crashed, a.n_runs),
            "",
            a.mean_distance_m
        );
        let _ = writeln!(s, "success rate {:.0}%", 100.0 * a.success_rate);
        s
    }

    /// Writes `runs.csv`, `summary.json`, `summary.txt` and one trace per run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("traces"))?;
        write_csv(&dir.join("runs.csv"), self.runs.iter().map(|r| RunRow::from(&r.metrics)))?;
        for r in &self.runs {
            let path = dir.join("traces").join(format!("run_{:03}.csv", r.metrics.run_id));
            write_csv(&path, &r.trace)?;
        }
        write_json(
            &dir.join("summary.json"),
            &OaSummary {
                scenario: &self.scenario,
                sensor: self.sensor.as_str(),
                seed: self.seed,
                aggregates: &self.aggregates,
                metadata: &self.metadata,
            },
        )?;
        fs::write(dir.join("summary.txt"), self.summary_text())?;
        if let Some(r) = self.runs.first().filter(|r| !r.frames.is_empty()) {
            write_frame_log(BufWriter::new(File::create(dir.join("frames.jsonl"))?), &r.frames)?;
        }
        Ok(())
    }
}

impl VelocityReport {
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset {}  fusion input {}  seed {}", self.preset, self.fusion_input.as_str(), self.seed);
        for m in &self.metadata {
            let _ = writeln!(s, "{} ({:.1} mW, {:.1} Hz)", m.sensor, m.power_mw, m.rate_hz);
        }
        let _ = writeln!(s, "{:<14} {:>10} {:>12} {:>10}", "stream", "valid", "MSE", "MSE (avg)");
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.5}"));
        for m in &self.mean_mse {
            let _ = writeln!(
                s,
                "{:<14} {:>10} {:>12} {:>10}",
                m.source,
                format!("{}/{}", m.n_valid, m.n_total),
                fmt(m.mse),
                fmt(m.mse_moving_average)
            );
        }
        s
    }

    /// Writes `tracks/run_NNN.csv`, `mse.csv`, `summary.json`, `summary.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("tracks"))?;
        for r in &self.runs {
            let file = File::create(dir.join("tracks").join(format!("run_{:03}.csv", r.run_id)))?;
            write_track_csv(BufWriter::new(file), &r.rows)?;
        }
        write_csv(
            &dir.join("mse.csv"),
            self.runs.iter().flat_map(|r| r.mse.iter()).chain(&self.mean_mse),
        )?;
        write_json(
            &dir.join("summary.json"),
            &VelocitySummary {
                preset: &self.preset,
                fusion_input: self.fusion_input.as_str(),
                seed: self.seed,
                mse: &self.mean_mse,
                metadata: &self.metadata,
            },
        )?;
        fs::write(dir.join("summary.txt"), self.summary_text())?;
        if let Some(r) = self.runs.first().filter(|r| !r.frames.is_empty()) {
            write_frame_log(BufWriter::new(File::create(dir.join("frames.jsonl"))?), &r.frames)?;
        }
        Ok(())
    }
}

impl BenchmarkReport {
    pub fn summary_text(&self) -> String {
        match self {
            Self::Oa(r) => r.summary_text(),
            Self::Velocity(r) => r.summary_text(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        match self {
            Self::Oa(r) => r.write(dir),
            Self::Velocity(r) => r.write(dir),
        }
    }
}

/// Distance read from a single avoidance frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub sensor_id: String,
    pub t: f64,
    pub d: Option<f64>,
}

/// Result of running a frame log through the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub n_frames: usize,
    pub estimates: Vec<TrackRow>,
    pub distances: Vec<DistanceRow>,
}

/// Consecutive frames received at B then A form a velocity pulse pair; any
/// other frame is treated as an avoidance measurement.
pub fn replay_frames(frames: &[IqFrame], cfg: &ExperimentConfig, floor: NoiseFloor) -> ReplayReport {
    let est = EstimatorConfig { c0: cfg.c0, ..cfg.estimator };
    let mut estimates = Vec::new();
    let mut distances = Vec::new();
    let mut k = 0;
    while k < frames.len() {
        let f = &frames[k];
        let pair = frames
            .get(k + 1)
            .filter(|g| f.sensor_id() == RECEIVER_B && g.sensor_id() == RECEIVER_A);
        if let Some(g) = pair {
            estimates.push(TrackRow::from_estimate("ultrasonic", &estimate(f, g, &est)));
            k += 2;
        } else {
            distances.push(DistanceRow {
                sensor_id: f.sensor_id().to_owned(),
                t: f.t_emit(),
                d: nearest_obstacle_distance(f, &cfg.oa, floor, cfg.c0),
            });
            k += 1;
        }
    }
    ReplayReport {
        n_frames: frames.len(),
        estimates,
        distances,
    }
}

impl ReplayReport {
    pub fn summary_text(&self) -> String {
        let valid = self.estimates.iter().filter(|e| e.valid).count();
        format!(
            "{} frames: {} pulse pairs ({valid} valid), {} single frames\n",
            self.n_frames,
            self.estimates.len(),
            self.distances.len()
        )
    }

    /// Writes `estimates.csv` and `distances.csv` when non-empty.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        if !self.estimates.is_empty() {
            write_track_csv(BufWriter::new(File::create(dir.join("estimates.csv"))?), &self.estimates)?;
        }
        if !self.distances.is_empty() {
            write_csv(&dir.join("distances.csv"), &self.distances)?;
        }
        Ok(())
    }
}
