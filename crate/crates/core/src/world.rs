//! Planar scenes with material-tagged obstacles, per-modality range sensing,
//! drone kinematics and crash detection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::echo::{synthesize_frame_with, EchoSpec, FrameConfig, NoiseSpec};
use crate::oa::OACommand;
use crate::seed::SimRng;
use crate::sensors::{LaserToFSpec, Mount, UltrasonicSensorSpec};
use crate::signal::IqFrame;
use crate::{Error, Result, SPEED_OF_SOUND};

/// Default crash radius around the drone centre, m.
pub const DEFAULT_DRONE_RADIUS: f64 = 0.06;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    #[serde(default)]
    pub name: String,
    pub acoustic_reflectivity: f64,
    /// False for surfaces a laser ToF cannot see (glass, black).
    pub optical_tof_visible: bool,
    #[serde(default)]
    pub feature_density: f64,
    /// Soft obstacles return weak echoes, especially off-axis.
    #[serde(default)]
    pub softness: f64,
}

impl Material {
    pub fn wall() -> Self {
        Self {
            name: "wall".into(),
            acoustic_reflectivity: 1.0,
            optical_tof_visible: true,
            feature_density: 0.5,
            softness: 0.0,
        }
    }

    pub fn glass() -> Self {
        Self {
            name: "glass".into(),
            acoustic_reflectivity: 1.0,
            optical_tof_visible: false,
            feature_density: 0.0,
            softness: 0.0,
        }
    }

    pub fn black() -> Self {
        Self {
            name: "black".into(),
            acoustic_reflectivity: 1.0,
            optical_tof_visible: false,
            feature_density: 0.2,
            softness: 0.0,
        }
    }

    /// Upholstered chair.
    pub fn soft() -> Self {
        Self {
            name: "soft".into(),
            acoustic_reflectivity: 0.35,
            optical_tof_visible: true,
            feature_density: 0.6,
            softness: 0.8,
        }
    }

    /// Flat, featureless table top.
    pub fn table() -> Self {
        Self {
            name: "table".into(),
            acoustic_reflectivity: 1.0,
            optical_tof_visible: true,
            feature_density: 0.05,
            softness: 0.0,
        }
    }

    /// Rough, feature-rich carpet.
    pub fn carpet() -> Self {
        Self {
            name: "carpet".into(),
            acoustic_reflectivity: 0.6,
            optical_tof_visible: true,
            feature_density: 0.9,
            softness: 0.3,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        Some(match name {
            "wall" => Self::wall(),
            "glass" => Self::glass(),
            "black" => Self::black(),
            "soft" => Self::soft(),
            "table" => Self::table(),
            "carpet" => Self::carpet(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(self.acoustic_reflectivity) && unit(self.feature_density) && unit(self.softness)) {
            return Err(Error::InvalidParameter(format!(
                "material {:?}: properties must lie in [0, 1]",
                self.name
            )));
        }
        Ok(())
    }
}

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub fn new(a: Point, b: Point) -> Result<Self> {
        let s = Self { a, b };
        if !a.iter().chain(&b).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("segment"));
        }
        if s.length() <= 0.0 {
            return Err(Error::InvalidParameter(format!("degenerate segment {a:?}")));
        }
        Ok(s)
    }

    pub fn length(&self) -> f64 {
        (self.b[0] - self.a[0]).hypot(self.b[1] - self.a[1])
    }

    /// Distance along the ray `origin + t * dir` (unit `dir`) to the
    /// segment, if it is hit.
    pub fn ray_hit(&self, origin: Point, dir: Point) -> Option<f64> {
        let e = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let denom = dir[0] * e[1] - dir[1] * e[0];
        if denom.abs() < 1e-15 {
            return None;
        }
        let w = [self.a[0] - origin[0], self.a[1] - origin[1]];
        let t = (w[0] * e[1] - w[1] * e[0]) / denom;
        let s = (w[0] * dir[1] - w[1] * dir[0]) / denom;
        (t >= 0.0 && (0.0..=1.0).contains(&s)).then_some(t)
    }

    pub fn distance_to(&self, p: Point) -> f64 {
        let e = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let w = [p[0] - self.a[0], p[1] - self.a[1]];
        let len2 = e[0] * e[0] + e[1] * e[1];
        let s = ((w[0] * e[0] + w[1] * e[1]) / len2).clamp(0.0, 1.0);
        (w[0] - s * e[0]).hypot(w[1] - s * e[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub segments: Vec<Segment>,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct World {
    pub obstacles: Vec<Obstacle>,
}

/// First surface along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub obstacle: usize,
    pub segment: usize,
}

impl World {
    /// Nearest hit along a ray among obstacles accepted by `filter`.
    pub fn cast(&self, origin: Point, dir: Point, filter: impl Fn(&Material) -> bool) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for (oi, obstacle) in self.obstacles.iter().enumerate() {
            if !filter(&obstacle.material) {
                continue;
            }
            for (si, seg) in obstacle.segments.iter().enumerate() {
                if let Some(d) = seg.ray_hit(origin, dir) {
                    if best.is_none_or(|b| d < b.distance) {
                        best = Some(RayHit {
                            distance: d,
                            obstacle: oi,
                            segment: si,
                        });
                    }
                }
            }
        }
        best
    }

    /// Closest obstacle to a point: distance and index.
    pub fn nearest(&self, p: Point) -> Option<(f64, usize)> {
        self.obstacles
            .iter()
            .enumerate()
            .flat_map(|(oi, o)| o.segments.iter().map(move |s| (s.distance_to(p), oi)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneState2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v_forward: f64,
    /// Flight height, m.
    pub h: f64,
    pub t: f64,
}

impl DroneState2D {
    pub fn at(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw,
            v_forward: 0.0,
            h: 0.5,
            t: 0.0,
        }
    }

    /// World position and heading of a body-mounted sensor.
    pub fn sensor_pose(&self, mount: &Mount) -> (Point, f64) {
        let (s, c) = self.yaw.sin_cos();
        let p = [
            self.x + c * mount.x - s * mount.y,
            self.y + s * mount.x + c * mount.y,
        ];
        (p, self.yaw + mount.yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Kinematics {
    /// First-order lag of forward speed toward the command, s.
    pub velocity_tau_s: f64,
}

impl Default for Kinematics {
    fn default() -> Self {
        Self { velocity_tau_s: 0.1 }
    }
}

/// Advances the drone by `dt`: position moves with the current forward
/// speed along the current heading, then yaw and speed respond to `cmd`.
pub fn step(state: &DroneState2D, cmd: &OACommand, dt: f64, kin: &Kinematics) -> DroneState2D {
    debug_assert!(dt > 0.0);
    let (s, c) = state.yaw.sin_cos();
    let alpha = if kin.velocity_tau_s > 0.0 {
        1.0 - (-dt / kin.velocity_tau_s).exp()
    } else {
        1.0
    };
    DroneState2D {
        x: state.x + state.v_forward * c * dt,
        y: state.y + state.v_forward * s * dt,
        yaw: state.yaw + cmd.yaw_rate * dt,
        v_forward: state.v_forward + alpha * (cmd.v_forward - state.v_forward),
        h: state.h,
        t: state.t + dt,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crash {
    pub material: String,
    pub distance: f64,
}

/// Crash when an obstacle is strictly closer than `drone_radius`.
pub fn check_crash(state: &DroneState2D, world: &World, drone_radius: f64) -> Option<Crash> {
    let (d, oi) = world.nearest([state.x, state.y])?;
    (d < drone_radius).then(|| Crash {
        material: world.obstacles[oi].material.name.clone(),
        distance: d,
    })
}

/// Acoustic forward model parameters of the avoidance sonar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SonarModel {
    pub c0: f64,
    /// Echo amplitude of a fully reflective surface at 1 m, ADC counts.
    pub amplitude_at_1m: f64,
    pub rays: usize,
    /// Outer fraction of the cone over which soft echoes fade out.
    pub edge_fraction: f64,
    pub ringdown_amplitude: f64,
    pub ringdown_decay_samples: f64,
    pub pulse_width_samples: f64,
}

impl Default for SonarModel {
    fn default() -> Self {
        Self {
            c0: SPEED_OF_SOUND,
            amplitude_at_1m: 2000.0,
            rays: 111,
            edge_fraction: 0.2,
            ringdown_amplitude: 5000.0,
            ringdown_decay_samples: 1.5,
            pulse_width_samples: 8.0,
        }
    }
}

impl SonarModel {
    /// 0 inside the inner cone, rising linearly to 1 at the cone edge.
    pub fn edge_penalty(&self, off_axis: f64, half_fov: f64) -> f64 {
        let inner = half_fov * (1.0 - self.edge_fraction);
        if off_axis.abs() <= inner || self.edge_fraction <= 0.0 {
            0.0
        } else {
            ((off_axis.abs() - inner) / (half_fov - inner)).min(1.0)
        }
    }

    pub fn frame_config(&self, spec: &UltrasonicSensorSpec) -> FrameConfig {
        FrameConfig {
            ringdown_amplitude: self.ringdown_amplitude,
            ringdown_decay_samples: self.ringdown_decay_samples,
            pulse_width_samples: self.pulse_width_samples,
            ..spec.frame_config(self.c0)
        }
    }
}

fn ray_angles(half_fov: f64, rays: usize) -> impl Iterator<Item = f64> {
    let n = rays.max(1);
    (0..n).map(move |k| {
        if n == 1 {
            0.0
        } else {
            -half_fov + 2.0 * half_fov * k as f64 / (n - 1) as f64
        }
    })
}

/// Echoes seen by the forward sonar: one per segment, at the nearest point
/// where the segment is the first surface along some ray of the cone.
pub fn ultrasonic_echoes(
    state: &DroneState2D,
    world: &World,
    spec: &UltrasonicSensorSpec,
    model: &SonarModel,
) -> Vec<EchoSpec> {
    let (origin, heading) = state.sensor_pose(&spec.mount);
    let half = spec.half_fov_rad();
    // (obstacle, segment) -> (distance, off-axis angle)
    let mut nearest: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for off_axis in ray_angles(half, model.rays) {
        let (s, c) = (heading + off_axis).sin_cos();
        if let Some(hit) = world.cast(origin, [c, s], |_| true) {
            let entry = nearest
                .entry((hit.obstacle, hit.segment))
                .or_insert((hit.distance, off_axis));
            if hit.distance < entry.0 {
                *entry = (hit.distance, off_axis);
            }
        }
    }

    let span = model.frame_config(spec).span_s();
    nearest
        .into_iter()
        .filter_map(|((oi, _), (d, off_axis))| {
            let m = &world.obstacles[oi].material;
            let rtt = 2.0 * d / model.c0;
            if rtt >= span || d <= 0.0 {
                return None;
            }
            let gain = m.acoustic_reflectivity * (1.0 - m.softness * model.edge_penalty(off_axis, half));
            let amplitude = model.amplitude_at_1m * gain / (d * d);
            let carrier_phase = crate::echo::propagation_phase(2.0 * d, spec.f_op_hz, model.c0);
            (amplitude > 0.0).then_some(EchoSpec {
                round_trip_time: rtt,
                amplitude,
                carrier_phase,
            })
        })
        .collect()
}

/// Forward model of one avoidance measurement.
pub fn sense_ultrasonic(
    state: &DroneState2D,
    world: &World,
    spec: &UltrasonicSensorSpec,
    model: &SonarModel,
    noise: &NoiseSpec,
    rng: &mut SimRng,
) -> Result<IqFrame> {
    let echoes = ultrasonic_echoes(state, world, spec, model);
    synthesize_frame_with(
        &echoes,
        &model.frame_config(spec),
        noise,
        0.0,
        &spec.name,
        state.t,
        rng,
    )
}

/// Nearest surface the laser can see within its cone, or `None`. Glass and
/// black surfaces do not occlude: the beam passes through them.
pub fn sense_laser(state: &DroneState2D, world: &World, spec: &LaserToFSpec, rng: &mut SimRng) -> Option<f64> {
    let (origin, heading) = state.sensor_pose(&spec.mount);
    let half = spec.half_fov_rad();
    let d = ray_angles(half, 55)
        .filter_map(|off_axis| {
            let (s, c) = (heading + off_axis).sin_cos();
            world.cast(origin, [c, s], |m| m.optical_tof_visible)
        })
        .map(|h| h.distance)
        .min_by(f64::total_cmp)?;
    if d > spec.max_range_m {
        return None;
    }
    let z: f64 = rng.sample(StandardNormal);
    Some((d + spec.noise_sigma_m * z).max(0.0))
}

/// Pose sample on a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Outcome of one flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub distance_m: f64,
    pub crashed: bool,
    pub crash_cause: Option<String>,
    pub trajectory: Vec<Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
}

/// A loaded scene: world plus start pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub world: World,
    pub start: StartPose,
    pub drone_radius: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    name: String,
    #[serde(default)]
    drone_radius: Option<f64>,
    start: StartPose,
    #[serde(default)]
    materials: BTreeMap<String, Material>,
    #[serde(default)]
    obstacles: Vec<ObstacleFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleFile {
    material: String,
    #[serde(default)]
    segments: Vec<[Point; 2]>,
    /// Consecutive points joined into segments.
    #[serde(default)]
    polyline: Vec<Point>,
}

const BUILTIN_SCENES: &[(&str, &str)] = &[
    ("empty", include_str!("../data/scenes/empty.toml")),
    ("glass_corridor", include_str!("../data/scenes/glass_corridor.toml")),
    ("office", include_str!("../data/scenes/office.toml")),
];

impl Scene {
    pub fn parse(text: &str) -> Result<Self> {
        let file: SceneFile = toml::from_str(text)?;
        let mut palette: BTreeMap<String, Material> = ["wall", "glass", "black", "soft", "table", "carpet"]
            .iter()
            .filter_map(|n| Material::builtin(n).map(|m| (n.to_string(), m)))
            .collect();
        for (name, mut m) in file.materials {
            m.name = name.clone();
            m.validate()?;
            palette.insert(name, m);
        }
        let mut obstacles = Vec::new();
        for o in file.obstacles {
            let material = palette
                .get(&o.material)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown material {:?}", o.material)))?;
            let mut segments = Vec::new();
            for [a, b] in o.segments {
                segments.push(Segment::new(a, b)?);
            }
            for pair in o.polyline.windows(2) {
                segments.push(Segment::new(pair[0], pair[1])?);
            }
            if segments.is_empty() {
                return Err(Error::Config(format!("obstacle of {:?} has no segments", o.material)));
            }
            obstacles.push(Obstacle { segments, material });
        }
        let drone_radius = file.drone_radius.unwrap_or(DEFAULT_DRONE_RADIUS);
        if !(drone_radius > 0.0) {
            return Err(Error::Config("drone_radius must be > 0".into()));
        }
        Ok(Self {
            name: file.name,
            world: World { obstacles },
            start: file.start,
            drone_radius,
        })
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_SCENES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text).expect("built-in scene parses"))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_SCENES.iter().map(|(n, _)| *n)
    }

    /// A built-in scene name or a path to a scene file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(scene) = Self::builtin(name_or_path) {
            return Ok(scene);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::Config(format!("scene {name_or_path:?} not found")));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
