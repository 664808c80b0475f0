use nvf_core::control::{
    cross_track_rms, densify, moments, run_hold, run_trajectory, square_spiral, ControllerConfig, TrajectoryRules,
};
use nvf_core::world::DeviceWorld;
use nvf_core::Vec2;

#[test]
fn hold_error_is_stationary() {
    let world = DeviceWorld::default();
    let controller = ControllerConfig::default();
    for seed in 0..5 {
        let out = run_hold(&Vec2::zeros(), 120.0, &world, &controller, seed).unwrap();
        let frames = &out.log.frames[20..];
        let half = frames.len() / 2;
        for axis in 0..2 {
            let first: Vec<f64> = frames[..half].iter().map(|f| f.true_position[axis]).collect();
            let second: Vec<f64> = frames[half..].iter().map(|f| f.true_position[axis]).collect();
            let (_, s1, _) = moments(&first);
            let (_, s2, _) = moments(&second);
            let ratio = (s2 * s2) / (s1 * s1);
            assert!((0.5..=2.0).contains(&ratio), "seed {seed} axis {axis}: variance ratio {ratio}");
        }
    }
}

#[test]
fn hold_distribution_is_symmetric() {
    let world = DeviceWorld::default();
    let controller = ControllerConfig::default();
    let mut skews = Vec::new();
    for seed in 0..10 {
        let out = run_hold(&Vec2::zeros(), 60.0, &world, &controller, 100 + seed).unwrap();
        skews.push(out.stats.skewness_x);
        skews.push(out.stats.skewness_y);
        assert!(out.stats.mean_x.abs() < 30e-9 && out.stats.mean_y.abs() < 30e-9);
    }
    let mean_skew = skews.iter().sum::<f64>() / skews.len() as f64;
    assert!(mean_skew.abs() < 0.15, "{mean_skew}");
}

#[test]
fn without_brownian_motion_error_stays_at_camera_noise() {
    let mut world = DeviceWorld::default();
    world.thermal_noise = false;
    let out = run_hold(&Vec2::zeros(), 30.0, &world, &ControllerConfig::default(), 3).unwrap();
    let settled = &out.log.frames[20..];
    let rms = (settled.iter().map(|f| f.true_position.xy().norm_squared()).sum::<f64>() / settled.len() as f64).sqrt();
    assert!(rms <= world.camera.localization_sigma_m, "true-position rms {rms}");
}

#[test]
fn spiral_is_tracked_within_voltage_limits() {
    let world = DeviceWorld::default();
    let waypoints = densify(&square_spiral(&Vec2::zeros(), 2e-6, 12), 0.5e-6);
    let log = run_trajectory(&waypoints, &TrajectoryRules::default(), &world, &ControllerConfig::default(), 21).unwrap();
    let limit = world.actuator.voltage_limit_v;
    assert!(log.frames.iter().all(|f| f.voltages.iter().all(|v| v.abs() <= limit + 1e-12)));
    let rms = cross_track_rms(&log, &waypoints);
    assert!(rms < 150e-9, "cross-track rms {rms}");
    let end = log.frames.last().unwrap().measured_position.xy();
    assert!((end - waypoints.last().unwrap()).norm() <= TrajectoryRules::default().capture_radius_m);
}

#[test]
fn reversed_path_overlaps_forward_path() {
    let world = DeviceWorld::default();
    let controller = ControllerConfig::default();
    let rules = TrajectoryRules::default();
    let forward = densify(&[Vec2::zeros(), Vec2::new(8e-6, 0.0), Vec2::new(8e-6, 6e-6)], 0.5e-6);
    let mut back = forward.clone();
    back.reverse();
    let mut both = forward.clone();
    both.extend_from_slice(&back[1..]);
    let log = run_trajectory(&both, &rules, &world, &controller, 8).unwrap();
    assert!(cross_track_rms(&log, &forward) < 150e-9);
}

#[test]
fn logs_are_reproducible() {
    let world = DeviceWorld::default();
    let controller = ControllerConfig::default();
    let a = run_hold(&Vec2::new(1e-6, -2e-6), 20.0, &world, &controller, 77).unwrap();
    let b = run_hold(&Vec2::new(1e-6, -2e-6), 20.0, &world, &controller, 77).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let c = run_hold(&Vec2::new(1e-6, -2e-6), 20.0, &world, &controller, 78).unwrap();
    assert_ne!(a.log.to_csv(), c.log.to_csv());
}
