//! Synthetic scenes: axis-aligned planar structures, a smooth trajectory
//! through them, ray-cast scans, IMU samples and drifting odometry.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::eval::Trajectory;
use crate::factors::ImuSample;
use crate::geometry::{exp_map, rot_z, PointCloud, Pose, Twist};

/// Standard gravity used by the generator (m/s^2).
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    CubeRoom,
    Corridor,
    LCorridor,
    PlaneOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub position: [f64; 3],
    /// Heading about world z (rad).
    #[serde(default)]
    pub yaw: f64,
    /// Time spent stationary on arrival (s).
    #[serde(default)]
    pub dwell: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarSpec {
    pub channels: usize,
    pub azimuth_steps: usize,
    /// Lowest and highest beam elevation (deg).
    pub elevation_deg: [f64; 2],
    pub min_range: f64,
    pub max_range: f64,
    /// Gaussian range noise (m).
    pub range_noise: f64,
    /// Scan rate (Hz).
    pub rate: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            channels: 32,
            azimuth_steps: 360,
            elevation_deg: [-40.0, 40.0],
            min_range: 0.3,
            max_range: 20.0,
            range_noise: 0.0,
            rate: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuSpec {
    pub rate: f64,
    /// Per-sample white noise (m/s^2, rad/s).
    pub accel_noise: f64,
    pub gyro_noise: f64,
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
}

impl Default for ImuSpec {
    fn default() -> Self {
        Self { rate: 200.0, accel_noise: 0.0, gyro_noise: 0.0, accel_bias: [0.0; 3], gyro_bias: [0.0; 3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometrySpec {
    /// Per-frame relative-motion noise (rad, m).
    pub rotation_noise: f64,
    pub translation_noise: f64,
    /// World-z drift added per frame (m).
    pub z_drift_per_frame: f64,
}

impl Default for OdometrySpec {
    fn default() -> Self {
        Self { rotation_noise: 0.0, translation_noise: 0.0, z_drift_per_frame: 0.0 }
    }
}

fn default_density() -> f64 {
    400.0
}
fn default_speed() -> f64 {
    1.0
}
fn default_wiggle() -> f64 {
    0.1
}
fn default_ramp() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    /// Extent along x, y, z (m). For the L-corridor, x is the leg length
    /// and y the hallway width.
    pub dimensions: [f64; 3],
    /// Map sampling density (points/m^2).
    #[serde(default = "default_density")]
    pub density: f64,
    /// Gaussian noise on map points along the surface normal (m).
    #[serde(default)]
    pub map_noise: f64,
    pub waypoints: Vec<Waypoint>,
    /// Cruise speed between waypoints (m/s).
    #[serde(default = "default_speed")]
    pub speed: f64,
    /// Heading oscillation amplitude while moving (rad).
    #[serde(default = "default_wiggle")]
    pub yaw_wiggle: f64,
    /// Duration of the speed ramps at both ends of every segment (s).
    #[serde(default = "default_ramp")]
    pub ramp: f64,
    #[serde(default)]
    pub lidar: LidarSpec,
    #[serde(default)]
    pub imu: ImuSpec,
    #[serde(default)]
    pub odometry: OdometrySpec,
    pub seed: u64,
}

impl SceneSpec {
    pub fn from_json(bytes: &[u8]) -> Result<Self, PipelineError> {
        let spec: SceneSpec = serde_json::from_slice(bytes).map_err(|e| PipelineError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidSpec(m.to_string()));
        if !self.dimensions.iter().all(|d| d.is_finite() && *d > 0.0) {
            return bad("dimensions must be positive");
        }
        if self.kind == SceneKind::LCorridor && self.dimensions[1] >= self.dimensions[0] {
            return bad("L-corridor width must be smaller than its leg length");
        }
        if !(self.density.is_finite() && self.density > 0.0 && self.density <= 1e5) {
            return bad("density must lie in (0, 1e5] points/m^2");
        }
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return bad("speed must be positive");
        }
        if !(self.ramp.is_finite() && self.ramp > 0.0) {
            return bad("ramp must be positive");
        }
        if self.waypoints.is_empty() {
            return bad("at least one waypoint is required");
        }
        for w in &self.waypoints {
            if !(w.position.iter().all(|v| v.is_finite()) && w.yaw.is_finite() && w.dwell.is_finite() && w.dwell >= 0.0)
            {
                return bad("waypoints must be finite with non-negative dwell");
            }
        }
        let l = &self.lidar;
        if l.channels == 0 || l.azimuth_steps == 0 || l.channels * l.azimuth_steps > 1 << 22 {
            return bad("lidar channels and azimuth steps must be positive and bounded");
        }
        if !(l.min_range >= 0.0 && l.max_range > l.min_range && l.max_range.is_finite()) {
            return bad("lidar range bounds invalid");
        }
        if !(l.rate > 0.0 && l.rate.is_finite() && l.elevation_deg[0] <= l.elevation_deg[1]) {
            return bad("lidar rate or elevation invalid");
        }
        let i = &self.imu;
        if !(i.rate >= 10.0 * l.rate && i.rate.is_finite()) {
            return bad("IMU rate must be at least 10x the scan rate");
        }
        let nonneg = [
            self.map_noise,
            l.range_noise,
            i.accel_noise,
            i.gyro_noise,
            self.odometry.rotation_noise,
            self.odometry.translation_noise,
        ];
        if !nonneg.iter().all(|v| v.is_finite() && *v >= 0.0) || !self.yaw_wiggle.is_finite() {
            return bad("noise levels must be finite and non-negative");
        }
        if !self.odometry.z_drift_per_frame.is_finite() {
            return bad("drift must be finite");
        }
        if self.total_duration() > 3600.0 {
            return bad("trajectory longer than one hour");
        }
        Ok(())
    }

    fn total_duration(&self) -> f64 {
        build_segments(self).last().map(|s| s.t0 + s.duration).unwrap_or(0.0)
    }
}

/// A planar rectangle `origin + a u + b v`, `a, b` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub origin: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Unit normal facing the traversable space.
    pub normal: Vector3<f64>,
}

impl Rect {
    fn new(origin: [f64; 3], u: [f64; 3], v: [f64; 3], normal: [f64; 3]) -> Self {
        Self { origin: origin.into(), u: u.into(), v: v.into(), normal: Vector3::from(normal) }
    }

    pub fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }

    /// Ray parameter of the hit, if any.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.origin - o)) / denom;
        if t <= 0.0 {
            return None;
        }
        let rel = o + d * t - self.origin;
        let a = rel.dot(&self.u) / self.u.norm_squared();
        let b = rel.dot(&self.v) / self.v.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
    }
}

/// Surfaces of the scene, normals facing inward.
pub fn scene_surfaces(kind: SceneKind, dims: [f64; 3]) -> Vec<Rect> {
    let [l, w, h] = dims;
    match kind {
        SceneKind::PlaneOnly => {
            vec![Rect::new([-l / 2.0, -w / 2.0, 0.0], [l, 0.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, 1.0])]
        }
        SceneKind::CubeRoom | SceneKind::Corridor => vec![
            Rect::new([0.0, 0.0, 0.0], [l, 0.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, 1.0]),
            Rect::new([0.0, 0.0, h], [l, 0.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, -1.0]),
            Rect::new([0.0, 0.0, 0.0], [l, 0.0, 0.0], [0.0, 0.0, h], [0.0, 1.0, 0.0]),
            Rect::new([0.0, w, 0.0], [l, 0.0, 0.0], [0.0, 0.0, h], [0.0, -1.0, 0.0]),
            Rect::new([0.0, 0.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, h], [1.0, 0.0, 0.0]),
            Rect::new([l, 0.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, h], [-1.0, 0.0, 0.0]),
        ],
        SceneKind::LCorridor => {
            // leg A along x: [0, l] x [0, w]; leg B along y: [l - w, l] x [0, l]
            let k = l - w;
            vec![
                Rect::new([0.0, 0.0, 0.0], [l, 0.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, 1.0]),
                Rect::new([k, w, 0.0], [w, 0.0, 0.0], [0.0, l - w, 0.0], [0.0, 0.0, 1.0]),
                Rect::new([0.0, 0.0, h], [l, 0.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, -1.0]),
                Rect::new([k, w, h], [w, 0.0, 0.0], [0.0, l - w, 0.0], [0.0, 0.0, -1.0]),
                Rect::new([0.0, 0.0, 0.0], [l, 0.0, 0.0], [0.0, 0.0, h], [0.0, 1.0, 0.0]),
                Rect::new([l, 0.0, 0.0], [0.0, l, 0.0], [0.0, 0.0, h], [-1.0, 0.0, 0.0]),
                Rect::new([0.0, w, 0.0], [k, 0.0, 0.0], [0.0, 0.0, h], [0.0, -1.0, 0.0]),
                Rect::new([k, w, 0.0], [0.0, l - w, 0.0], [0.0, 0.0, h], [1.0, 0.0, 0.0]),
                Rect::new([0.0, 0.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, h], [1.0, 0.0, 0.0]),
                Rect::new([k, l, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], [0.0, -1.0, 0.0]),
            ]
        }
    }
}

/// Samples every surface on a jittered grid at `density` points/m^2, with
/// optional Gaussian offsets along the normal. Returns points with their
/// analytic normals.
pub fn sample_surfaces(surfaces: &[Rect], density: f64, normal_noise: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let spacing = 1.0 / density.sqrt();
    let noise = Normal::new(0.0, normal_noise.max(0.0)).unwrap();
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for r in surfaces {
        let nu = (r.u.norm() / spacing).ceil().max(1.0) as usize;
        let nv = (r.v.norm() / spacing).ceil().max(1.0) as usize;
        for i in 0..nu {
            for j in 0..nv {
                let a = (i as f64 + rng.random::<f64>()) / nu as f64;
                let b = (j as f64 + rng.random::<f64>()) / nv as f64;
                let mut p = r.origin + r.u * a + r.v * b;
                if normal_noise > 0.0 {
                    p += r.normal * noise.sample(rng);
                }
                points.push(p);
                normals.push(r.normal);
            }
        }
    }
    PointCloud::with_normals(points, normals)
}

/// Heading oscillation frequency while moving (Hz).
const WIGGLE_HZ: f64 = 0.5;
/// Cruise heading rate for turning segments (rad/s).
const TURN_RATE: f64 = 0.5;

/// One motion segment (or a dwell when start and end coincide).
#[derive(Debug, Clone, Copy)]
struct Segment {
    t0: f64,
    duration: f64,
    /// Acceleration and deceleration phase length (s).
    ramp: f64,
    p0: Vector3<f64>,
    p1: Vector3<f64>,
    yaw0: f64,
    yaw1: f64,
    /// Heading oscillation cycles; zero while dwelling.
    cycles: f64,
}

impl Segment {
    fn dwell(t0: f64, duration: f64, p: Vector3<f64>, yaw: f64) -> Self {
        Self { t0, duration, ramp: 0.0, p0: p, p1: p, yaw0: yaw, yaw1: yaw, cycles: 0.0 }
    }

    /// Normalized progress in `[0, 1]` with its first two time derivatives:
    /// smooth ramps into and out of a constant-rate cruise.
    fn progress(&self, t: f64) -> (f64, f64, f64) {
        if self.cycles == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let (dur, r) = (self.duration, self.ramp);
        let v = 1.0 / (dur - r);
        let t = (t - self.t0).clamp(0.0, dur);
        let ramp = |u: f64| {
            (v * r * (u.powi(3) - 0.5 * u.powi(4)), v * (3.0 * u * u - 2.0 * u.powi(3)), v * 6.0 * u * (1.0 - u) / r)
        };
        if t < r {
            ramp(t / r)
        } else if t > dur - r {
            let (g, dg, ddg) = ramp((dur - t) / r);
            (1.0 - g, dg, -ddg)
        } else {
            (v * r * 0.5 + v * (t - r), v, 0.0)
        }
    }
}

fn build_segments(spec: &SceneSpec) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut t = 0.0;
    let wp = &spec.waypoints;
    for (i, w) in wp.iter().enumerate() {
        let p: Vector3<f64> = w.position.into();
        if w.dwell > 0.0 {
            segs.push(Segment::dwell(t, w.dwell, p, w.yaw));
            t += w.dwell;
        }
        if let Some(next) = wp.get(i + 1) {
            let q: Vector3<f64> = next.position.into();
            let cruise = ((q - p).norm() / spec.speed).max((next.yaw - w.yaw).abs() / TURN_RATE);
            let duration = (cruise + spec.ramp).max(2.0 * spec.ramp);
            let cycles = (duration * WIGGLE_HZ).round().max(1.0);
            segs.push(Segment { t0: t, duration, ramp: spec.ramp, p0: p, p1: q, yaw0: w.yaw, yaw1: next.yaw, cycles });
            t += duration;
        }
    }
    if segs.is_empty() {
        let w = &wp[0];
        segs.push(Segment::dwell(0.0, 1.0, w.position.into(), w.yaw));
    }
    segs
}

/// Kinematic state of the generator trajectory.
#[derive(Debug, Clone, Copy)]
struct Kinematics {
    pose: Pose,
    /// World-frame acceleration.
    accel: Vector3<f64>,
    yaw_rate: f64,
}

fn evaluate(segs: &[Segment], wiggle: f64, t: f64) -> Kinematics {
    let k = segs.partition_point(|s| s.t0 + s.duration <= t).min(segs.len() - 1);
    let s = &segs[k];
    let (g, dg, ddg) = s.progress(t);
    let (wig, dwig) = if s.cycles > 0.0 {
        // 1 - cos keeps heading and heading rate continuous at both ends
        let w = 2.0 * PI * s.cycles / s.duration;
        let a = w * (t - s.t0).clamp(0.0, s.duration);
        (wiggle * (1.0 - a.cos()), wiggle * w * a.sin())
    } else {
        (0.0, 0.0)
    };
    let d = s.p1 - s.p0;
    Kinematics {
        pose: Pose::new(rot_z(s.yaw0 + g * (s.yaw1 - s.yaw0) + wig), s.p0 + d * g),
        accel: d * ddg,
        yaw_rate: dg * (s.yaw1 - s.yaw0) + dwig,
    }
}

/// A generated sequence with exact ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    /// Prior map source cloud (analytic normals, optional surface noise).
    pub map: PointCloud,
    /// Noise-free reference map.
    pub gt_map: PointCloud,
    pub scans: Vec<(f64, PointCloud)>,
    pub odometry: Trajectory,
    pub imu: Vec<ImuSample>,
    pub ground_truth: Trajectory,
    pub initial_pose: Pose,
    /// `[start, end]` of every dwell (s).
    pub stationary_intervals: Vec<(f64, f64)>,
    pub surfaces: Vec<Rect>,
}

/// Casts one scan from `pose`; points are returned in the sensor frame.
pub fn cast_scan(surfaces: &[Rect], pose: &Pose, lidar: &LidarSpec, rng: &mut ChaCha8Rng) -> PointCloud {
    let noise = Normal::new(0.0, lidar.range_noise.max(0.0)).unwrap();
    let mut pts = Vec::with_capacity(lidar.channels * lidar.azimuth_steps);
    let o = pose.translation;
    for c in 0..lidar.channels {
        let frac = if lidar.channels > 1 { c as f64 / (lidar.channels - 1) as f64 } else { 0.5 };
        let el = (lidar.elevation_deg[0] + frac * (lidar.elevation_deg[1] - lidar.elevation_deg[0])).to_radians();
        for a in 0..lidar.azimuth_steps {
            let az = 2.0 * PI * a as f64 / lidar.azimuth_steps as f64;
            let dir_s = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let dir_w = pose.rotation * dir_s;
            let hit = surfaces.iter().filter_map(|r| r.intersect(&o, &dir_w)).fold(f64::INFINITY, f64::min);
            if hit >= lidar.min_range && hit <= lidar.max_range {
                let range = if lidar.range_noise > 0.0 { hit + noise.sample(rng) } else { hit };
                pts.push(dir_s * range);
            }
        }
    }
    PointCloud::new(pts)
}

/// Generates the full synthetic sequence; reproducible from `spec.seed`.
pub fn synth(spec: &SceneSpec) -> Result<SyntheticSequence, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let surfaces = scene_surfaces(spec.kind, spec.dimensions);
    let gt_map = sample_surfaces(&surfaces, spec.density, 0.0, &mut rng);
    let map = if spec.map_noise > 0.0 {
        let n = Normal::new(0.0, spec.map_noise).unwrap();
        let normals = gt_map.normals.clone().unwrap_or_default();
        let pts = gt_map.points.iter().zip(&normals).map(|(p, nrm)| p + nrm * n.sample(&mut rng)).collect();
        PointCloud::with_normals(pts, normals)
    } else {
        gt_map.clone()
    };

    let segs = build_segments(spec);
    let total = segs.last().map(|s| s.t0 + s.duration).unwrap_or(0.0);
    let stationary_intervals =
        segs.iter().filter(|s| s.cycles == 0.0).map(|s| (s.t0, s.t0 + s.duration)).collect::<Vec<_>>();

    // scans and ground truth
    let dt_scan = 1.0 / spec.lidar.rate;
    let n_scans = (total / dt_scan).floor() as usize + 1;
    let mut scans = Vec::with_capacity(n_scans);
    let mut gt = Vec::with_capacity(n_scans);
    for k in 0..n_scans {
        let t = k as f64 * dt_scan;
        let pose = evaluate(&segs, spec.yaw_wiggle, t).pose;
        scans.push((t, cast_scan(&surfaces, &pose, &spec.lidar, &mut rng)));
        gt.push((t, pose));
    }

    // odometry: noisy relative motions chained from the first GT pose, plus
    // world-z drift growing linearly with the frame index
    let o = &spec.odometry;
    let nr = Normal::new(0.0, o.rotation_noise).unwrap();
    let nt = Normal::new(0.0, o.translation_noise).unwrap();
    let mut chain = gt[0].1;
    let mut odom = Vec::with_capacity(n_scans);
    for k in 0..n_scans {
        if k > 0 {
            let rel = gt[k - 1].1.between(&gt[k].1);
            let noisy = if o.rotation_noise > 0.0 || o.translation_noise > 0.0 {
                let xi = Twist::new(
                    Vector3::new(nr.sample(&mut rng), nr.sample(&mut rng), nr.sample(&mut rng)),
                    Vector3::new(nt.sample(&mut rng), nt.sample(&mut rng), nt.sample(&mut rng)),
                );
                rel.compose(&exp_map(&xi))
            } else {
                rel
            };
            chain = chain.compose(&noisy);
        }
        let mut p = chain;
        p.translation.z += o.z_drift_per_frame * k as f64;
        odom.push((gt[k].0, p));
    }

    // IMU: specific force and body rate sampled from the analytic trajectory
    let i = &spec.imu;
    let na = Normal::new(0.0, i.accel_noise).unwrap();
    let ng = Normal::new(0.0, i.gyro_noise).unwrap();
    let ba: Vector3<f64> = i.accel_bias.into();
    let bg: Vector3<f64> = i.gyro_bias.into();
    let n_imu = (total * i.rate).floor() as usize + 1;
    let mut imu = Vec::with_capacity(n_imu);
    for k in 0..n_imu {
        let t = k as f64 / i.rate;
        let kin = evaluate(&segs, spec.yaw_wiggle, t);
        let f = kin.pose.rotation.transpose() * (kin.accel + Vector3::new(0.0, 0.0, GRAVITY));
        let w = Vector3::new(0.0, 0.0, kin.yaw_rate);
        let noise_a = Vector3::new(na.sample(&mut rng), na.sample(&mut rng), na.sample(&mut rng));
        let noise_g = Vector3::new(ng.sample(&mut rng), ng.sample(&mut rng), ng.sample(&mut rng));
        imu.push(ImuSample::new(t, w + bg + noise_g, f + ba + noise_a));
    }

    let ground_truth = Trajectory::new(gt).map_err(|e| PipelineError::InvalidSpec(e.to_string()))?;
    let odometry = Trajectory::new(odom).map_err(|e| PipelineError::InvalidSpec(e.to_string()))?;
    Ok(SyntheticSequence {
        initial_pose: ground_truth.entries()[0].1,
        map,
        gt_map,
        scans,
        odometry,
        imu,
        ground_truth,
        stationary_intervals,
        surfaces,
    })
}
