//! Vision-feedback planar position control.
//!
//! Each camera frame the loop measures the bead position, maps the position
//! error through a proportional law to a commanded velocity, converts that
//! to the minimum-norm set of four electrode voltages and holds those
//! voltages (zero-order hold) while the overdamped dynamics run for one frame
//! period.

use std::fmt::Write as _;

use nalgebra::{Matrix2, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_overdamped, Kinetics, ParticleState};
use crate::magnetostatics::{check_non_negative, check_positive};
use crate::world::DeviceWorld;
use crate::{Error, Result, Vec2, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub frame_rate_hz: f64,
    /// Per-axis in-plane localization noise (m).
    pub localization_sigma_m: f64,
    /// Side length of the square field of view centered on the NV (m).
    pub field_of_view_m: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { frame_rate_hz: 10.0, localization_sigma_m: 10e-9, field_of_view_m: 60e-6 }
    }
}

impl CameraModel {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_positive(self.frame_rate_hz, &format!("{prefix}.frame_rate_hz"))?;
        check_non_negative(self.localization_sigma_m, &format!("{prefix}.localization_sigma_m"))?;
        check_positive(self.field_of_view_m, &format!("{prefix}.field_of_view_m"))
    }

    pub fn frame_period(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }

    pub fn in_view(&self, p: &Vec3) -> bool {
        let half = 0.5 * self.field_of_view_m;
        p.x.abs() <= half && p.y.abs() <= half
    }
}

/// Four channel-end electrodes; `gain` maps volts to in-plane flow (m/s/V).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElectrodeActuator {
    /// Rows are the x and y flow responses to V1..V4.
    pub gain_m_per_s_per_v: [[f64; 4]; 2],
    pub voltage_limit_v: f64,
}

impl Default for ElectrodeActuator {
    /// Opposing electrode pairs on the x and y channels, 1 µm/s per volt.
    fn default() -> Self {
        let g = 1e-6;
        Self {
            gain_m_per_s_per_v: [[g, 0.0, -g, 0.0], [0.0, g, 0.0, -g]],
            voltage_limit_v: 10.0,
        }
    }
}

impl ElectrodeActuator {
    pub fn gain(&self) -> SMatrix<f64, 2, 4> {
        let g = &self.gain_m_per_s_per_v;
        SMatrix::<f64, 2, 4>::from_row_slice(&[g[0][0], g[0][1], g[0][2], g[0][3], g[1][0], g[1][1], g[1][2], g[1][3]])
    }

    /// Right pseudo-inverse `Gᵀ(GGᵀ)⁻¹`, or `None` when G is rank deficient.
    pub fn pseudo_inverse(&self) -> Option<SMatrix<f64, 4, 2>> {
        let g = self.gain();
        let ggt: Matrix2<f64> = g * g.transpose();
        let scale = ggt.abs().max();
        if !(scale > 0.0) || ggt.determinant().abs() <= 1e-12 * scale * scale {
            return None;
        }
        ggt.try_inverse().map(|inv| g.transpose() * inv)
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.gain_m_per_s_per_v.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("{prefix}.gain_m_per_s_per_v"), "must be finite"));
        }
        if self.pseudo_inverse().is_none() {
            return Err(Error::config(format!("{prefix}.gain_m_per_s_per_v"), "gain matrix must have rank 2"));
        }
        check_positive(self.voltage_limit_v, &format!("{prefix}.voltage_limit_v"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub proportional_gain_per_s: f64,
    pub max_speed_m_per_s: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { proportional_gain_per_s: 5.0, max_speed_m_per_s: 10e-6 }
    }
}

impl ControllerConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_positive(self.proportional_gain_per_s, &format!("{prefix}.proportional_gain_per_s"))?;
        check_positive(self.max_speed_m_per_s, &format!("{prefix}.max_speed_m_per_s"))
    }

    /// Commanded velocity `K_p·error`, clamped in magnitude to the max speed.
    pub fn commanded_velocity(&self, error: &Vec2) -> Vec2 {
        let v = error * self.proportional_gain_per_s;
        let speed = v.norm();
        if speed > self.max_speed_m_per_s {
            v * (self.max_speed_m_per_s / speed)
        } else {
            v
        }
    }
}

/// Rules for advancing along a waypoint list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryRules {
    /// A waypoint is reached once the measured position is this close.
    pub capture_radius_m: f64,
    /// Time allowed to reach each waypoint (s).
    pub timeout_s: f64,
    /// Hold time at each waypoint after capture (s).
    pub dwell_s: f64,
}

impl Default for TrajectoryRules {
    fn default() -> Self {
        Self { capture_radius_m: 200e-9, timeout_s: 30.0, dwell_s: 0.0 }
    }
}

impl TrajectoryRules {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_positive(self.capture_radius_m, &format!("{prefix}.capture_radius_m"))?;
        check_positive(self.timeout_s, &format!("{prefix}.timeout_s"))?;
        check_non_negative(self.dwell_s, &format!("{prefix}.dwell_s"))
    }
}

/// Camera measurement: true xy plus Gaussian localization noise; z passes through.
pub fn measure_position<R: Rng + ?Sized>(true_pos: &Vec3, camera: &CameraModel, rng: &mut R) -> Vec3 {
    let sigma = camera.localization_sigma_m;
    if sigma == 0.0 {
        return *true_pos;
    }
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    Vec3::new(true_pos.x + sigma * nx, true_pos.y + sigma * ny, true_pos.z)
}

/// Electrode voltages for an in-plane position error (target − measured).
pub fn control_voltages(error: &Vec2, controller: &ControllerConfig, actuator: &ElectrodeActuator) -> [f64; 4] {
    let v_des = controller.commanded_velocity(error);
    let Some(pinv) = actuator.pseudo_inverse() else {
        return [0.0; 4];
    };
    let v = pinv * v_des;
    let limit = actuator.voltage_limit_v;
    [v[0].clamp(-limit, limit), v[1].clamp(-limit, limit), v[2].clamp(-limit, limit), v[3].clamp(-limit, limit)]
}

/// Quasi-static electroosmotic flow `G·V`.
pub fn flow_from_voltages(voltages: &[f64; 4], actuator: &ElectrodeActuator) -> Vec2 {
    actuator.gain() * nalgebra::Vector4::from_column_slice(voltages)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub time: f64,
    pub true_position: Vec3,
    pub measured_position: Vec3,
    pub target: Vec2,
    pub voltages: [f64; 4],
}

/// Per-frame history of a closed-loop run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub frames: Vec<FrameRecord>,
}

impl TrajectoryLog {
    pub const CSV_HEADER: &'static str =
        "time_s,true_x_um,true_y_um,true_z_um,meas_x_um,meas_y_um,tgt_x_um,tgt_y_um,V1,V2,V3,V4";

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 + 128 * self.frames.len());
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for f in &self.frames {
            let um = 1e6;
            let _ = writeln!(
                out,
                "{:.3},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                f.time,
                f.true_position.x * um,
                f.true_position.y * um,
                f.true_position.z * um,
                f.measured_position.x * um,
                f.measured_position.y * um,
                f.target.x * um,
                f.target.y * um,
                f.voltages[0],
                f.voltages[1],
                f.voltages[2],
                f.voltages[3],
            );
        }
        out
    }
}

/// Summary of a hold-in-place run, over the frames after settling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldStats {
    pub std_x: f64,
    pub std_y: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub skewness_x: f64,
    pub skewness_y: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct HoldOutcome {
    pub log: TrajectoryLog,
    pub stats: HoldStats,
}

/// Mean, standard deviation and skewness of a sample.
pub fn moments(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    (mean, m2.sqrt(), skew)
}

impl HoldStats {
    pub fn from_frames(frames: &[FrameRecord]) -> Self {
        let xs: Vec<f64> = frames.iter().map(|f| f.measured_position.x).collect();
        let ys: Vec<f64> = frames.iter().map(|f| f.measured_position.y).collect();
        let (mean_x, std_x, skewness_x) = moments(&xs);
        let (mean_y, std_y, skewness_y) = moments(&ys);
        Self { std_x, std_y, mean_x, mean_y, skewness_x, skewness_y, samples: frames.len() }
    }
}

/// One simulated apparatus under closed-loop control.
///
/// The loop owns its RNG stream; camera noise and Brownian increments are
/// drawn from it in a fixed order, so a seed fully determines the run.
pub struct ClosedLoop<'w> {
    world: &'w DeviceWorld,
    controller: ControllerConfig,
    kinetics: Kinetics,
    state: ParticleState,
    rng: ChaCha8Rng,
    log: TrajectoryLog,
    substeps: usize,
    sub_dt: f64,
}

impl<'w> ClosedLoop<'w> {
    /// Starts the bead at the world's configured particle position.
    pub fn new(world: &'w DeviceWorld, controller: &ControllerConfig, seed: u64) -> Self {
        Self::with_start(world, controller, seed, world.particle.position_m)
    }

    pub fn with_start(world: &'w DeviceWorld, controller: &ControllerConfig, seed: u64, start: Vec3) -> Self {
        let kinetics = world.kinetics();
        let period = world.camera.frame_period();
        let substeps = ((period / world.integrator_dt_s).round() as usize).max(1);
        let mut position = start;
        position.z = position.z.clamp(kinetics.z_min, kinetics.z_max);
        Self {
            world,
            controller: controller.clone(),
            kinetics,
            state: ParticleState { position, time: 0.0 },
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: TrajectoryLog::default(),
            substeps,
            sub_dt: period / substeps as f64,
        }
    }

    pub fn state(&self) -> &ParticleState {
        &self.state
    }

    pub fn log(&self) -> &TrajectoryLog {
        &self.log
    }

    pub fn into_log(self) -> TrajectoryLog {
        self.log
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn world(&self) -> &DeviceWorld {
        self.world
    }

    /// Runs one camera frame toward `target`: measure, control, then
    /// integrate the dynamics over the frame period with the voltages held.
    pub fn frame(&mut self, target: &Vec2) -> Result<&FrameRecord> {
        let world = self.world;
        let measured = measure_position(&self.state.position, &world.camera, &mut self.rng);
        if !world.camera.in_view(&measured) {
            log::warn!("tracking lost at t = {:.1} s", self.state.time);
            return Err(Error::TrackingLost { time: self.state.time, log: Box::new(self.log.clone()) });
        }
        let error = target - measured.xy();
        let voltages = control_voltages(&error, &self.controller, &world.actuator);
        let flow = flow_from_voltages(&voltages, &world.actuator);
        let flow = Vec3::new(flow.x, flow.y, 0.0);
        self.log.frames.push(FrameRecord {
            time: self.state.time,
            true_position: self.state.position,
            measured_position: measured,
            target: *target,
            voltages,
        });
        let t_frame_end = self.state.time + world.camera.frame_period();
        for _ in 0..self.substeps {
            let force = Vec3::new(0.0, 0.0, world.vertical_force(self.state.position.z));
            self.state = step_overdamped(&self.state, &flow, &force, self.sub_dt, &self.kinetics, &mut self.rng);
        }
        // Keep frame timestamps on the exact grid.
        self.state.time = t_frame_end;
        Ok(self.log.frames.last().expect("frame just pushed"))
    }

    /// Holds at `target` for `frames` frames, returning the index range of
    /// the frames recorded.
    pub fn hold(&mut self, target: &Vec2, frames: usize) -> Result<std::ops::Range<usize>> {
        let start = self.log.len();
        for _ in 0..frames {
            self.frame(target)?;
        }
        Ok(start..self.log.len())
    }

    /// Visits each waypoint in turn, advancing once the measured position is
    /// within the capture radius and the dwell time has elapsed.
    pub fn follow(&mut self, waypoints: &[Vec2], rules: &TrajectoryRules) -> Result<()> {
        for (index, wp) in waypoints.iter().enumerate() {
            let started = self.state.time;
            let mut captured_at: Option<f64> = None;
            loop {
                let rec = self.frame(wp)?;
                let (time, dist) = (rec.time, (rec.measured_position.xy() - wp).norm());
                if captured_at.is_none() && dist <= rules.capture_radius_m {
                    captured_at = Some(time);
                }
                if let Some(t) = captured_at {
                    if time - t + 1e-9 >= rules.dwell_s {
                        break;
                    }
                }
                if captured_at.is_none() && time - started >= rules.timeout_s {
                    log::warn!("waypoint {index} not reached within {} s", rules.timeout_s);
                    return Err(Error::WaypointTimeout {
                        index,
                        timeout: rules.timeout_s,
                        log: Box::new(self.log.clone()),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Number of settling frames excluded from hold statistics: five closed-loop
/// time constants, capped at half the run.
pub fn settle_frames(controller: &ControllerConfig, camera: &CameraModel, total: usize) -> usize {
    let settle_s = 5.0 / controller.proportional_gain_per_s;
    ((settle_s * camera.frame_rate_hz).ceil() as usize).min(total / 2)
}

/// Holds the bead at `target` for `duration_s` and reports the position spread.
pub fn run_hold(
    target: &Vec2,
    duration_s: f64,
    world: &DeviceWorld,
    controller: &ControllerConfig,
    seed: u64,
) -> Result<HoldOutcome> {
    let frames = (duration_s * world.camera.frame_rate_hz).round();
    if !(frames >= 10.0) {
        return Err(Error::config("hold.duration_s", format!("must cover at least 10 camera frames (got {duration_s} s)")));
    }
    let frames = frames as usize;
    let mut cl = ClosedLoop::new(world, controller, seed);
    cl.hold(target, frames)?;
    let log = cl.into_log();
    let skip = settle_frames(controller, &world.camera, frames);
    let stats = HoldStats::from_frames(&log.frames[skip..]);
    Ok(HoldOutcome { log, stats })
}

/// Follows `waypoints` from the world's start position.
pub fn run_trajectory(
    waypoints: &[Vec2],
    rules: &TrajectoryRules,
    world: &DeviceWorld,
    controller: &ControllerConfig,
    seed: u64,
) -> Result<TrajectoryLog> {
    let mut cl = ClosedLoop::new(world, controller, seed);
    cl.follow(waypoints, rules)?;
    Ok(cl.into_log())
}

/// Square spiral turning left with leg lengths `pitch, pitch, 2·pitch, 2·pitch, …`.
pub fn square_spiral(center: &Vec2, pitch: f64, legs: usize) -> Vec<Vec2> {
    let dirs = [Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(-1.0, 0.0), Vec2::new(0.0, -1.0)];
    let mut out = Vec::with_capacity(legs + 1);
    let mut p = *center;
    out.push(p);
    for k in 1..=legs {
        let len = pitch * k.div_ceil(2) as f64;
        p += dirs[(k - 1) % 4] * len;
        out.push(p);
    }
    out
}

/// Inserts intermediate waypoints so that no segment exceeds `spacing`.
pub fn densify(waypoints: &[Vec2], spacing: f64) -> Vec<Vec2> {
    let mut out = Vec::new();
    let Some(first) = waypoints.first() else {
        return out;
    };
    out.push(*first);
    for pair in waypoints.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let n = ((b - a).norm() / spacing).ceil().max(1.0) as usize;
        for k in 1..=n {
            out.push(a + (b - a) * (k as f64 / n as f64));
        }
    }
    out
}

pub fn path_length(waypoints: &[Vec2]) -> f64 {
    waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Distance from `p` to the polyline through `path`.
pub fn distance_to_path(p: &Vec2, path: &[Vec2]) -> f64 {
    if path.len() == 1 {
        return (p - path[0]).norm();
    }
    path.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let ab = b - a;
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            (p - (a + ab * t)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// RMS distance of the logged true positions from the polyline `path`.
pub fn cross_track_rms(log: &TrajectoryLog, path: &[Vec2]) -> f64 {
    if log.is_empty() || path.is_empty() {
        return 0.0;
    }
    let sum: f64 = log.frames.iter().map(|f| distance_to_path(&f.true_position.xy(), path).powi(2)).sum();
    (sum / log.len() as f64).sqrt()
}
