use proptest::prelude::*;
use rand::SeedableRng;
use usonic::echo::NoiseSpec;
use usonic::experiment::{simulate_flight, ExperimentConfig, SensorSelection};
use usonic::oa::{nearest_obstacle_distance, NoiseFloor, OAConfig};
use usonic::seed::SimRng;
use usonic::sensors::{LaserToFSpec, UltrasonicSensorSpec};
use usonic::signal::OdrDivisor;
use usonic::world::{
    sense_laser, sense_ultrasonic, ultrasonic_echoes, DroneState2D, Material, Obstacle, Scene, Segment, SonarModel,
    World,
};
use usonic::SPEED_OF_SOUND;

fn panel(centre_angle: f64, d: f64, half_len: f64, material: Material) -> Obstacle {
    let c = [d * centre_angle.cos(), d * centre_angle.sin()];
    let t = [-centre_angle.sin(), centre_angle.cos()];
    Obstacle {
        segments: vec![Segment::new(
            [c[0] - half_len * t[0], c[1] - half_len * t[1]],
            [c[0] + half_len * t[0], c[1] + half_len * t[1]],
        )
        .unwrap()],
        material,
    }
}

#[test]
fn glass_only_scene_is_heard_but_not_seen() {
    let world = World {
        obstacles: vec![panel(0.0, 1.5, 1.0, Material::glass())],
    };
    let state = DroneState2D::at(0.0, 0.0, 0.0);
    let spec = UltrasonicSensorSpec::icu30201(OdrDivisor::N4);
    let noise = NoiseSpec {
        iq_noise_sigma: 3.0,
        ..NoiseSpec::default()
    };
    let mut rng = SimRng::seed_from_u64(1);
    let frame = sense_ultrasonic(&state, &world, &spec, &SonarModel::default(), &noise, &mut rng).unwrap();
    let d = nearest_obstacle_distance(&frame, &OAConfig::default(), NoiseFloor::fixed(20.0), SPEED_OF_SOUND).unwrap();
    assert!((d - 1.5).abs() < 0.02, "{d}");
    assert_eq!(sense_laser(&state, &world, &LaserToFSpec::default(), &mut rng), None);
}

#[test]
fn black_cupboard_hides_from_laser_only() {
    let world = World {
        obstacles: vec![panel(0.0, 1.0, 0.3, Material::black()), panel(0.0, 2.5, 2.0, Material::wall())],
    };
    let state = DroneState2D::at(0.0, 0.0, 0.0);
    let mut rng = SimRng::seed_from_u64(2);
    let laser = sense_laser(&state, &world, &LaserToFSpec::default(), &mut rng).unwrap();
    assert!((laser - 2.5).abs() < 0.03);
    let echoes = ultrasonic_echoes(&state, &world, &UltrasonicSensorSpec::icu30201(OdrDivisor::N4), &SonarModel::default());
    let nearest = echoes.iter().map(|e| e.round_trip_time * SPEED_OF_SOUND / 2.0).fold(f64::INFINITY, f64::min);
    assert!((nearest - 1.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn laser_detections_are_inside_the_sonar_cone(angle in -0.23f64..0.23, d in 0.2f64..3.9, half_len in 0.005f64..0.5) {
        let world = World { obstacles: vec![panel(angle, d, half_len, Material::wall())] };
        let state = DroneState2D::at(0.0, 0.0, 0.0);
        let laser = LaserToFSpec { noise_sigma_m: 0.0, ..LaserToFSpec::default() };
        if let Some(range) = sense_laser(&state, &world, &laser, &mut SimRng::seed_from_u64(0)) {
            let echoes = ultrasonic_echoes(&state, &world, &UltrasonicSensorSpec::icu30201(OdrDivisor::N4), &SonarModel::default());
            prop_assert_eq!(echoes.len(), 1);
            let sonar = echoes[0].round_trip_time * SPEED_OF_SOUND / 2.0;
            prop_assert!(sonar <= range + 1e-9);
        }
    }

    #[test]
    fn flights_are_deterministic_and_bookkept(seed in any::<u64>()) {
        let cfg = ExperimentConfig {
            max_duration_s: 8.0,
            ..ExperimentConfig::oa("office", SensorSelection::Ultrasonic)
        };
        let scene = Scene::builtin("office").unwrap();
        let a = simulate_flight(&cfg, &scene, 0, seed).unwrap();
        let b = simulate_flight(&cfg, &scene, 0, seed).unwrap();
        prop_assert_eq!(&a, &b);
        // Forward speed never goes negative, so distance is the path length
        // of the sub-stepped Euler integration; the control-rate trace
        // under-samples it only slightly.
        let path: f64 = a.trace.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum();
        prop_assert!(path <= a.metrics.distance_m + 1e-9);
        let speed: f64 = a.trace.windows(2).map(|w| 0.5 * (w[0].speed + w[1].speed) * (w[1].t - w[0].t)).sum();
        let tail = a.metrics.duration_s - a.trace.last().unwrap().t;
        let integral = speed + a.trace.last().unwrap().speed * tail;
        prop_assert!((integral - a.metrics.distance_m).abs() <= 0.01 * a.metrics.distance_m + 1e-3,
            "{integral} vs {}", a.metrics.distance_m);
        prop_assert!(a.trace.iter().all(|r| r.v_forward >= 0.0));
    }
}
