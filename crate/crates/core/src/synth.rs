//! Analytic synthetic scenes: exact ray casting, trajectory perturbation and
//! loop candidate generation.
//!
//! Descriptor schema (one record per line, `#` starts a comment):
//!
//! ```text
//! intrinsics fx fy cx cy width height [depth_min depth_max]
//! room   xmin ymin zmin xmax ymax zmax    # box seen from inside
//! box    xmin ymin zmin xmax ymax zmax    # solid box
//! sphere cx cy cz radius
//! plane  nx ny nz d                       # points with n·p = d
//! circle cx cy cz radius count            # outward-looking ring, z up
//! pose   tx ty tz qx qy qz qw             # explicit camera-to-world pose
//! timing t0 dt                            # optional, default 0 and 1/30
//! ```
//!
//! `circle` and `pose` records append to the trajectory in file order.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    fmt_exact, save_depth, save_trajectory, CameraConfig, Frame, FrameSet, Trajectory,
    DEFAULT_DEPTH_MAX, DEFAULT_DEPTH_MIN,
};
use crate::error::{Error, Result};
use crate::geometry::{se3_exp, DepthImage, Intrinsics, Pose};
use crate::loops::LoopCandidate;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box whose inside is free space.
    Room { min: Vector3<f64>, max: Vector3<f64> },
    /// Axis-aligned solid box.
    Box { min: Vector3<f64>, max: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Infinite plane `normal · p = offset`.
    Plane { normal: Vector3<f64>, offset: f64 },
}

fn slab(o: &Vector3<f64>, d: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<f64> {
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let t1 = (min[a] - o[a]) / d[a];
        let t2 = (max[a] - o[a]) / d[a];
        near = near.max(t1.min(t2));
        far = far.min(t1.max(t2));
    }
    if near > far {
        None
    } else if near > 0.0 {
        Some(near)
    } else if far > 0.0 {
        Some(far)
    } else {
        None
    }
}

impl Primitive {
    /// Smallest positive ray parameter at which `o + t·d` meets the surface.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Room { min, max } | Primitive::Box { min, max } => slab(o, d, min, max),
            Primitive::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.norm_squared();
                let b = 2.0 * d.dot(&oc);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let q = -0.5 * (b + b.signum() * disc.sqrt());
                let (mut t0, mut t1) = (q / a, if q != 0.0 { c / q } else { -q / a });
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                [t0, t1].into_iter().find(|&t| t > 0.0)
            }
            Primitive::Plane { normal, offset } => {
                let den = normal.dot(d);
                if den == 0.0 {
                    return None;
                }
                let t = (offset - normal.dot(o)) / den;
                (t > 0.0).then_some(t)
            }
        }
    }

    /// True when `p` lies in the region this primitive marks as occupied.
    pub fn occupies(&self, p: &Vector3<f64>) -> bool {
        let inside = |min: &Vector3<f64>, max: &Vector3<f64>| (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]);
        match self {
            Primitive::Room { min, max } => !inside(min, max),
            Primitive::Box { min, max } => inside(min, max),
            Primitive::Sphere { center, radius } => (p - center).norm() <= *radius,
            Primitive::Plane { .. } => false,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Room { min, max } | Primitive::Box { min, max } => {
                (0..3).all(|a| min[a].is_finite() && max[a].is_finite() && min[a] < max[a])
            }
            Primitive::Sphere { center, radius } => center.iter().all(|v| v.is_finite()) && radius.is_finite() && *radius > 0.0,
            Primitive::Plane { normal, offset } => offset.is_finite() && normal.iter().all(|v| v.is_finite()) && normal.norm() > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("degenerate primitive {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let s = Self { primitives };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidConfig("scene has no primitives".into()));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn is_free(&self, p: &Vector3<f64>) -> bool {
        !self.primitives.iter().any(|s| s.occupies(p))
    }

    /// Nearest hit over all primitives.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|s| s.intersect(o, d))
            .min_by(f64::total_cmp)
    }
}

/// Exact depth image of `scene` seen from `pose`. Rays are scaled so the ray
/// parameter equals camera-frame depth; misses and depths outside the sensor
/// range are invalid.
pub fn raycast_depth(scene: &AnalyticScene, pose: &Pose, k: &Intrinsics) -> DepthImage {
    let r = pose.rotation_matrix();
    let o = pose.translation;
    DepthImage::from_fn(k.width, k.height, |u, v| {
        let d = r * k.ray(u as f64, v as f64);
        scene.intersect(&o, &d).filter(|&z| k.in_depth_range(z))
    })
}

/// Camera-to-world pose on a ring around `center`, looking radially outward
/// with the world z axis pointing up in the image.
pub fn ring_pose(center: &Vector3<f64>, radius: f64, angle: f64) -> Pose {
    let (s, c) = angle.sin_cos();
    let z = Vector3::new(c, s, 0.0);
    let y = Vector3::new(0.0, 0.0, -1.0);
    let x = y.cross(&z);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    Pose::new(
        UnitQuaternion::from_rotation_matrix(&rot),
        center + radius * z,
    )
}

pub fn ring_trajectory(center: &Vector3<f64>, radius: f64, count: usize) -> Vec<Pose> {
    (0..count)
        .map(|i| ring_pose(center, radius, 2.0 * PI * i as f64 / count as f64))
        .collect()
}

pub const DEFAULT_DT: f64 = 1.0 / 30.0;

/// A scene plus the camera that observes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub scene: AnalyticScene,
    pub intrinsics: Intrinsics,
    pub poses: Vec<Pose>,
    pub t0: f64,
    pub dt: f64,
}

impl Fixture {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.intrinsics.validate()?;
        if self.poses.is_empty() {
            return Err(Error::InvalidConfig("fixture has no camera poses".into()));
        }
        if !(self.dt > 0.0) || !self.t0.is_finite() {
            return Err(Error::InvalidConfig("timing needs finite t0 and dt > 0".into()));
        }
        if let Some(i) = self.poses.iter().position(|p| !self.scene.is_free(&p.translation)) {
            return Err(Error::InvalidConfig(format!("camera pose {i} is not in free space")));
        }
        Ok(())
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory::from_poses(self.t0, self.dt, self.poses.iter().copied())
            .expect("fixture timing is strictly increasing")
    }

    /// Noiseless depth frames at the fixture poses, generated in parallel.
    pub fn render_frames(&self) -> FrameSet {
        let traj = self.trajectory();
        let frames = par::map(traj.records(), |r| Frame {
            timestamp: r.timestamp,
            depth: raycast_depth(&self.scene, &r.pose, &self.intrinsics),
            pose: r.pose,
        });
        FrameSet {
            intrinsics: self.intrinsics,
            frames,
        }
    }
}

/// The standard 4 m × 3 m × 2.5 m room with one sphere and one box, observed
/// by 60 outward-looking poses on a 0.6 m ring at 160×120.
pub fn default_fixture() -> Fixture {
    let scene = AnalyticScene {
        primitives: vec![
            Primitive::Room {
                min: Vector3::new(-2.0, -1.5, 0.0),
                max: Vector3::new(2.0, 1.5, 2.5),
            },
            Primitive::Sphere {
                center: Vector3::new(1.2, 0.8, 1.0),
                radius: 0.3,
            },
            Primitive::Box {
                min: Vector3::new(-1.4, -1.1, 0.0),
                max: Vector3::new(-0.9, -0.6, 0.8),
            },
        ],
    };
    let intrinsics = Intrinsics::new(120.0, 120.0, 80.0, 60.0, 160, 120, DEFAULT_DEPTH_MIN, DEFAULT_DEPTH_MAX)
        .expect("default intrinsics are valid");
    Fixture {
        scene,
        intrinsics,
        poses: ring_trajectory(&Vector3::new(0.0, 0.0, 1.25), 0.6, 60),
        t0: 0.0,
        dt: DEFAULT_DT,
    }
}

fn nums(fields: &[&str], want: usize, line: usize, what: &str) -> Result<Vec<f64>> {
    if fields.len() != want {
        return Err(Error::parse(line, format!("{what} expects {want} values, found {}", fields.len())));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| Error::parse(line, format!("non-numeric field {f:?}")))
        })
        .collect()
}

fn count(v: f64, line: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 {
        return Err(Error::parse(line, format!("expected a non-negative integer, found {v}")));
    }
    Ok(v as usize)
}

/// Parses a fixture descriptor and validates it.
pub fn parse_fixture<R: BufRead>(reader: R) -> Result<Fixture> {
    let mut intrinsics = None;
    let mut primitives = Vec::new();
    let mut poses = Vec::new();
    let (mut t0, mut dt) = (0.0, DEFAULT_DT);
    for (idx, line) in reader.lines().enumerate() {
        let n = idx + 1;
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let f: Vec<&str> = body.split_whitespace().collect();
        let rest = &f[1..];
        let v3 = |v: &[f64]| Vector3::new(v[0], v[1], v[2]);
        match f[0] {
            "intrinsics" => {
                let v = if rest.len() == 6 {
                    let mut v = nums(rest, 6, n, "intrinsics")?;
                    v.extend([DEFAULT_DEPTH_MIN, DEFAULT_DEPTH_MAX]);
                    v
                } else {
                    nums(rest, 8, n, "intrinsics")?
                };
                let k = Intrinsics::new(v[0], v[1], v[2], v[3], count(v[4], n)?, count(v[5], n)?, v[6], v[7])
                    .map_err(|e| Error::parse(n, e.to_string()))?;
                intrinsics = Some(k);
            }
            "room" | "box" => {
                let v = nums(rest, 6, n, f[0])?;
                let (min, max) = (v3(&v[..3]), v3(&v[3..]));
                primitives.push(if f[0] == "room" {
                    Primitive::Room { min, max }
                } else {
                    Primitive::Box { min, max }
                });
            }
            "sphere" => {
                let v = nums(rest, 4, n, "sphere")?;
                primitives.push(Primitive::Sphere {
                    center: v3(&v),
                    radius: v[3],
                });
            }
            "plane" => {
                let v = nums(rest, 4, n, "plane")?;
                primitives.push(Primitive::Plane {
                    normal: v3(&v),
                    offset: v[3],
                });
            }
            "circle" => {
                let v = nums(rest, 5, n, "circle")?;
                poses.extend(ring_trajectory(&v3(&v), v[3], count(v[4], n)?));
            }
            "pose" => {
                let v = nums(rest, 7, n, "pose")?;
                poses.push(Pose::from_parts(v3(&v), v[3], v[4], v[5], v[6]).map_err(|e| Error::parse(n, e.to_string()))?);
            }
            "timing" => {
                let v = nums(rest, 2, n, "timing")?;
                (t0, dt) = (v[0], v[1]);
            }
            other => return Err(Error::parse(n, format!("unknown record {other:?}"))),
        }
    }
    let fixture = Fixture {
        scene: AnalyticScene { primitives },
        intrinsics: intrinsics.ok_or_else(|| Error::InvalidConfig("descriptor has no intrinsics line".into()))?,
        poses,
        t0,
        dt,
    };
    fixture.validate()?;
    Ok(fixture)
}

pub fn load_fixture(path: &Path) -> Result<Fixture> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    parse_fixture(std::io::BufReader::new(file))
}

/// Writes a descriptor; poses are listed explicitly.
pub fn write_fixture<W: Write>(fx: &Fixture, mut w: W) -> Result<()> {
    let j = |v: &[f64]| v.iter().map(|x| fmt_exact(*x)).collect::<Vec<_>>().join(" ");
    let k = &fx.intrinsics;
    writeln!(
        w,
        "intrinsics {} {} {} {}",
        j(&[k.fx, k.fy, k.cx, k.cy]),
        k.width,
        k.height,
        j(&[k.depth_min, k.depth_max])
    )?;
    for p in &fx.scene.primitives {
        match p {
            Primitive::Room { min, max } => writeln!(w, "room {} {}", j(min.as_slice()), j(max.as_slice()))?,
            Primitive::Box { min, max } => writeln!(w, "box {} {}", j(min.as_slice()), j(max.as_slice()))?,
            Primitive::Sphere { center, radius } => writeln!(w, "sphere {} {}", j(center.as_slice()), fmt_exact(*radius))?,
            Primitive::Plane { normal, offset } => writeln!(w, "plane {} {}", j(normal.as_slice()), fmt_exact(*offset))?,
        }
    }
    writeln!(w, "timing {}", j(&[fx.t0, fx.dt]))?;
    for p in &fx.poses {
        let q = p.quaternion_xyzw();
        writeln!(w, "pose {} {}", j(p.translation.as_slice()), j(&q))?;
    }
    Ok(())
}

/// Paths of a dataset written by [`materialize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Materialized {
    pub depth_list: PathBuf,
    pub trajectory: PathBuf,
    pub camera: PathBuf,
    pub frames: usize,
}

/// Writes depth PNGs, a depth list, the ground-truth trajectory and the
/// camera config under `out`.
pub fn materialize(fx: &Fixture, out: &Path, depth_scale: f64) -> Result<Materialized> {
    fx.validate()?;
    let depth_dir = out.join("depth");
    fs::create_dir_all(&depth_dir).map_err(|e| Error::file(&depth_dir, e))?;
    let frames = fx.render_frames();
    let names: Vec<String> = (0..frames.len()).map(|i| format!("depth/{i:06}.png")).collect();
    let written: Vec<Result<()>> = par::map_range(frames.len(), |i| {
        save_depth(&frames.frames[i].depth, depth_scale, &out.join(&names[i]))
    });
    written.into_iter().collect::<Result<Vec<_>>>()?;

    let depth_list = out.join("depth.txt");
    let mut list = String::from("# timestamp filename\n");
    for (f, name) in frames.frames.iter().zip(&names) {
        list.push_str(&format!("{} {name}\n", fmt_exact(f.timestamp)));
    }
    fs::write(&depth_list, list).map_err(|e| Error::file(&depth_list, e))?;

    let trajectory = out.join("groundtruth.txt");
    save_trajectory(&fx.trajectory(), &trajectory)?;
    let camera = out.join("camera.toml");
    let cfg = CameraConfig::from_intrinsics(&fx.intrinsics, depth_scale);
    fs::write(&camera, cfg.to_toml()).map_err(|e| Error::file(&camera, e))?;
    let descriptor = out.join("fixture.txt");
    let mut buf = Vec::new();
    write_fixture(fx, &mut buf)?;
    fs::write(&descriptor, buf).map_err(|e| Error::file(&descriptor, e))?;
    Ok(Materialized {
        depth_list,
        trajectory,
        camera,
        frames: frames.len(),
    })
}

/// Pose noise model. Per-pose noise is independent; drift noise accumulates
/// along the trajectory like odometry error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub rotation_std: f64,
    pub translation_std: f64,
    pub drift_rotation_std: f64,
    pub drift_translation_std: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(rotation_std: f64, translation_std: f64, seed: u64) -> Self {
        Self {
            rotation_std,
            translation_std,
            drift_rotation_std: 0.0,
            drift_translation_std: 0.0,
            seed,
        }
    }

    pub fn with_drift(mut self, rotation_std: f64, translation_std: f64) -> Self {
        self.drift_rotation_std = rotation_std;
        self.drift_translation_std = translation_std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = [
            self.rotation_std,
            self.translation_std,
            self.drift_rotation_std,
            self.drift_translation_std,
        ];
        if s.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("noise standard deviations must be finite and >= 0".into()))
        }
    }

    fn is_zero(&self) -> bool {
        self.rotation_std == 0.0
            && self.translation_std == 0.0
            && self.drift_rotation_std == 0.0
            && self.drift_translation_std == 0.0
    }
}

fn sample_tangent(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Vector6<f64> {
    let mut xi = Vector6::zeros();
    // Normal::new only fails for negative or non-finite std, excluded by validate.
    let r = Normal::new(0.0, rot).expect("validated std");
    let t = Normal::new(0.0, trans).expect("validated std");
    for k in 0..3 {
        xi[k] = r.sample(rng);
    }
    for k in 3..6 {
        xi[k] = t.sample(rng);
    }
    xi
}

/// Seeded perturbation. With drift, each pose is re-chained from the true
/// relative motions with accumulated drift, then per-pose noise is applied on
/// the right.
pub fn perturb_trajectory(traj: &Trajectory, spec: &PerturbSpec) -> Result<Trajectory> {
    spec.validate()?;
    if spec.is_zero() {
        return Ok(traj.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let poses = traj.poses();
    let has_drift = spec.drift_rotation_std > 0.0 || spec.drift_translation_std > 0.0;
    let mut out = Vec::with_capacity(poses.len());
    let mut chained = Pose::identity();
    for (i, p) in poses.iter().enumerate() {
        let drift = sample_tangent(&mut rng, spec.drift_rotation_std, spec.drift_translation_std);
        let noise = sample_tangent(&mut rng, spec.rotation_std, spec.translation_std);
        let base = if !has_drift {
            *p
        } else if i == 0 {
            chained = *p;
            chained
        } else {
            chained = chained * (poses[i - 1].inverse() * *p) * se3_exp(&drift);
            chained
        };
        out.push(base * se3_exp(&noise));
    }
    Ok(traj.with_poses(&out))
}

/// How false candidates are corrupted: a translation of at least
/// `translation` metres, or a rotation of at least `rotation` radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub translation: f64,
    pub rotation: f64,
}

/// Draws labelled loop candidates from distinct frame pairs at least
/// `min_gap` frames apart. True candidates carry the exact relative pose
/// from `traj`; false ones are corrupted by 1 to 1.5 times the stated
/// magnitude. Output order is shuffled.
pub fn make_loop_candidates(
    traj: &[Pose],
    n_true: usize,
    n_false: usize,
    corruption: Corruption,
    min_gap: usize,
    seed: u64,
) -> Result<Vec<LoopCandidate>> {
    let gap = min_gap.max(2);
    if n_false > 0 && !(corruption.translation > 0.0 || corruption.rotation > 0.0) {
        return Err(Error::InvalidConfig("false candidates need a positive corruption".into()));
    }
    if corruption.rotation * 1.5 >= PI {
        return Err(Error::InvalidConfig("rotation corruption must stay below 120 degrees".into()));
    }
    let mut pairs = Vec::new();
    for i in 0..traj.len() {
        for j in i + gap..traj.len() {
            pairs.push((i, j));
        }
    }
    let need = n_true + n_false;
    if pairs.len() < need {
        return Err(Error::InvalidConfig(format!(
            "{} poses give {} frame pairs at gap {gap}, {need} candidates requested",
            traj.len(),
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let mut out = Vec::with_capacity(need);
    for (n, &(i, j)) in pairs[..need].iter().enumerate() {
        let exact = traj[i].inverse() * traj[j];
        if n < n_true {
            out.push(LoopCandidate::new(i, j, exact, Some(true)));
            continue;
        }
        let use_translation = match (corruption.translation > 0.0, corruption.rotation > 0.0) {
            (true, true) => rng.random::<bool>(),
            (t, _) => t,
        };
        let scale = 1.0 + rng.random_range(0.0..0.5);
        let dir = loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let mut xi = Vector6::zeros();
        if use_translation {
            xi.fixed_rows_mut::<3>(3).copy_from(&(dir * corruption.translation * scale));
        } else {
            xi.fixed_rows_mut::<3>(0).copy_from(&(dir * corruption.rotation * scale));
        }
        out.push(LoopCandidate::new(i, j, exact * se3_exp(&xi), Some(false)));
    }
    out.shuffle(&mut rng);
    Ok(out)
}
