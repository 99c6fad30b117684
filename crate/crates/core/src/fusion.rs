//! Dense surfel model built from depth frames and camera poses.
//!
//! Each valid pixel becomes an oriented disk in the world frame; disks landing
//! in the same voxel are merged by a confidence-weighted running mean. Merging
//! is serialized in frame order, so the resulting map is deterministic.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;

use crate::dataset::{fmt_exact, FrameSet};
use crate::error::{Error, Result};
use crate::geometry::{backproject, DepthImage, Intrinsics, Pose};
use crate::par;

/// An oriented disk: world-frame position and unit normal, radius in meters,
/// and the number of observations merged into it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
    pub confidence: u32,
}

impl Surfel {
    pub fn transformed(&self, g: &Pose) -> Surfel {
        Surfel {
            position: g.transform_point(&self.position),
            normal: g.transform_vector(&self.normal),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Merge cell edge length in meters; `0` disables merging.
    pub voxel_size: f64,
    /// Neighbor offset (pixels) for central-difference normals.
    pub normal_window: usize,
    /// Only every `stride`-th pixel along each axis is lifted.
    pub stride: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.01,
            normal_window: 1,
            stride: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size >= 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "voxel_size must be finite and non-negative, got {}",
                self.voxel_size
            )));
        }
        if self.stride == 0 || self.normal_window == 0 {
            return Err(Error::InvalidConfig("stride and normal_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// The dense model: surfels in insertion order plus a voxel index.
#[derive(Debug, Clone, Default)]
pub struct SurfelMap {
    surfels: Vec<Surfel>,
    voxel_size: f64,
    index: HashMap<[i64; 3], usize>,
}

impl SurfelMap {
    pub fn new(voxel_size: f64) -> Self {
        Self {
            surfels: Vec::new(),
            voxel_size,
            index: HashMap::new(),
        }
    }

    /// Wraps surfels verbatim (no merging), e.g. a model produced elsewhere.
    pub fn from_surfels(voxel_size: f64, surfels: Vec<Surfel>) -> Self {
        let mut index = HashMap::new();
        if voxel_size > 0.0 {
            for (i, s) in surfels.iter().enumerate() {
                index.entry(voxel_key(&s.position, voxel_size)).or_insert(i);
            }
        }
        Self {
            surfels,
            voxel_size,
            index,
        }
    }

    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.surfels.iter().map(|s| s.position).collect()
    }

    /// Adds a surfel, merging it into the occupant of its voxel if any.
    pub fn insert(&mut self, s: Surfel) {
        if self.voxel_size <= 0.0 {
            self.surfels.push(s);
            return;
        }
        let key = voxel_key(&s.position, self.voxel_size);
        match self.index.get(&key) {
            Some(&i) => merge_into(&mut self.surfels[i], &s),
            None => {
                self.index.insert(key, self.surfels.len());
                self.surfels.push(s);
            }
        }
    }

    pub fn extend(&mut self, surfels: impl IntoIterator<Item = Surfel>) {
        for s in surfels {
            self.insert(s);
        }
    }

    /// Applies a rigid transform to every surfel (no re-merging).
    pub fn transformed(&self, g: &Pose) -> SurfelMap {
        SurfelMap::from_surfels(
            self.voxel_size,
            self.surfels.iter().map(|s| s.transformed(g)).collect(),
        )
    }
}

fn voxel_key(p: &Vector3<f64>, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

fn merge_into(dst: &mut Surfel, src: &Surfel) {
    let c1 = dst.confidence as f64;
    let c2 = src.confidence as f64;
    let total = c1 + c2;
    dst.position = (dst.position * c1 + src.position * c2) / total;
    // keep facing the first observer
    let incoming = if dst.normal.dot(&src.normal) < 0.0 {
        -src.normal
    } else {
        src.normal
    };
    let n = dst.normal * c1 + incoming * c2;
    let norm = n.norm();
    if norm > 1e-12 {
        dst.normal = n / norm;
    }
    dst.radius = dst.radius.max(src.radius);
    dst.confidence += src.confidence;
}

fn lift(d: &DepthImage, k: &Intrinsics, u: isize, v: isize) -> Option<Vector3<f64>> {
    if u < 0 || v < 0 || u as usize >= d.width() || v as usize >= d.height() {
        return None;
    }
    let z = d.get(u as usize, v as usize)?;
    backproject(u as f64, v as f64, z, k).ok()
}

fn axis_difference(
    center: &Vector3<f64>,
    plus: Option<Vector3<f64>>,
    minus: Option<Vector3<f64>>,
) -> Option<Vector3<f64>> {
    match (plus, minus) {
        (Some(p), Some(m)) => Some(p - m),
        (Some(p), None) => Some(p - center),
        (None, Some(m)) => Some(center - m),
        (None, None) => None,
    }
}

/// Lifts every valid (strided) pixel of one frame into a world-frame surfel.
pub fn backproject_frame(
    d: &DepthImage,
    pose: &Pose,
    k: &Intrinsics,
    cfg: &FusionConfig,
) -> Result<Vec<Surfel>> {
    cfg.validate()?;
    if !d.matches(k) {
        return Err(Error::Format(format!(
            "depth image is {}x{}, intrinsics expect {}x{}",
            d.width(),
            d.height(),
            k.width,
            k.height
        )));
    }
    let w = cfg.normal_window as isize;
    let footprint = std::f64::consts::SQRT_2 * cfg.stride as f64 / k.fx;
    let mut out = Vec::new();
    for v in (0..d.height()).step_by(cfg.stride) {
        for u in (0..d.width()).step_by(cfg.stride) {
            let (ui, vi) = (u as isize, v as isize);
            let Some(p) = lift(d, k, ui, vi) else {
                continue;
            };
            let dx = axis_difference(&p, lift(d, k, ui + w, vi), lift(d, k, ui - w, vi));
            let dy = axis_difference(&p, lift(d, k, ui, vi + w), lift(d, k, ui, vi - w));
            let fallback = -p.normalize();
            let mut n = match (dx, dy) {
                (Some(a), Some(b)) => {
                    let c = a.cross(&b);
                    let len = c.norm();
                    if len > 1e-15 {
                        c / len
                    } else {
                        fallback
                    }
                }
                _ => fallback,
            };
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            out.push(Surfel {
                position: pose.transform_point(&p),
                normal: pose.transform_vector(&n),
                radius: p.z * footprint,
                confidence: 1,
            });
        }
    }
    Ok(out)
}

/// Frames lifted concurrently per batch before the serialized merge.
const FUSION_BATCH: usize = 16;

/// Fuses all frames, observed from `poses`, into a voxel-merged surfel map.
pub fn fuse_sequence(frames: &FrameSet, poses: &[Pose], cfg: &FusionConfig) -> Result<SurfelMap> {
    cfg.validate()?;
    if poses.len() != frames.len() {
        return Err(Error::InvalidConfig(format!(
            "{} frames but {} poses",
            frames.len(),
            poses.len()
        )));
    }
    let mut map = SurfelMap::new(cfg.voxel_size);
    if frames.is_empty() {
        log::warn!("fusing an empty frame set");
        return Ok(map);
    }
    let k = frames.intrinsics;
    let idx: Vec<usize> = (0..frames.len()).collect();
    for batch in idx.chunks(FUSION_BATCH) {
        let lifted = par::map(batch, |&i| backproject_frame(&frames.frames[i].depth, &poses[i], &k, cfg));
        for surfels in lifted {
            map.extend(surfels?);
        }
    }
    Ok(map)
}

/// Writes `x y z nx ny nz radius confidence` lines after a `# voxel_size` header.
pub fn write_map<W: Write>(map: &SurfelMap, mut w: W) -> Result<()> {
    writeln!(w, "# voxel_size {}", fmt_exact(map.voxel_size))?;
    writeln!(w, "# x y z nx ny nz radius confidence")?;
    for s in &map.surfels {
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            fmt_exact(s.position.x),
            fmt_exact(s.position.y),
            fmt_exact(s.position.z),
            fmt_exact(s.normal.x),
            fmt_exact(s.normal.y),
            fmt_exact(s.normal.z),
            fmt_exact(s.radius),
            s.confidence
        )?;
    }
    Ok(())
}

/// Reads a map written by [`write_map`] (or produced externally in the same
/// layout). Surfels are kept verbatim; normals are renormalized.
pub fn parse_map<R: BufRead>(reader: R) -> Result<SurfelMap> {
    let mut voxel_size = 0.0;
    let mut surfels = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(c) = t.strip_prefix('#') {
            let mut it = c.split_whitespace();
            if it.next() == Some("voxel_size") {
                let v = it.next().ok_or_else(|| Error::parse(line_no, "missing voxel_size value"))?;
                voxel_size = v
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("bad voxel_size {v:?}")))?;
            }
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() != 8 {
            return Err(Error::parse(line_no, format!("expected 8 fields, found {}", f.len())));
        }
        let mut v = [0.0; 7];
        for (slot, s) in v.iter_mut().zip(&f) {
            *slot = s
                .parse()
                .map_err(|_| Error::parse(line_no, format!("non-numeric field {s:?}")))?;
        }
        let confidence: u32 = f[7]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad confidence {:?}", f[7])))?;
        let normal: Vector3<f64> = Vector3::new(v[3], v[4], v[5]);
        let nn = normal.norm();
        if !(nn > 0.0) || !(v[6] > 0.0) || confidence == 0 {
            return Err(Error::parse(line_no, "surfel needs non-zero normal, radius > 0, confidence >= 1"));
        }
        let normal = if (nn - 1.0).abs() <= 4.0 * f64::EPSILON { normal } else { normal / nn };
        surfels.push(Surfel {
            position: Vector3::new(v[0], v[1], v[2]),
            normal,
            radius: v[6],
            confidence,
        });
    }
    Ok(SurfelMap::from_surfels(voxel_size, surfels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Frame;
    use nalgebra::UnitQuaternion;
    use std::io::Cursor;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100, 0.1, 10.0).unwrap()
    }

    fn plane(z: f64) -> DepthImage {
        DepthImage::from_fn(100, 100, |_, _| Some(z))
    }

    fn frames(imgs: Vec<(DepthImage, Pose)>) -> FrameSet {
        FrameSet {
            intrinsics: k100(),
            frames: imgs
                .into_iter()
                .enumerate()
                .map(|(i, (depth, pose))| Frame {
                    timestamp: i as f64,
                    depth,
                    pose,
                })
                .collect(),
        }
    }

    #[test]
    fn single_pixel() {
        let mut d = DepthImage::invalid(100, 100);
        d.set(50, 50, Some(2.0));
        let s = backproject_frame(&d, &Pose::identity(), &k100(), &FusionConfig::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].position, Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(s[0].normal, Vector3::new(0.0, 0.0, -1.0));
        assert!((s[0].radius - 2.0 / 100.0 * std::f64::consts::SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn invalid_image_is_empty() {
        let s = backproject_frame(&DepthImage::invalid(100, 100), &Pose::identity(), &k100(), &FusionConfig::default())
            .unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn fronto_parallel_normals() {
        let s = backproject_frame(&plane(2.0), &Pose::identity(), &k100(), &FusionConfig::default()).unwrap();
        assert_eq!(s.len(), 100 * 100);
        for x in &s {
            assert!((x.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn stride_scales_radius_and_count() {
        let cfg = FusionConfig {
            stride: 4,
            ..Default::default()
        };
        let s = backproject_frame(&plane(2.0), &Pose::identity(), &k100(), &cfg).unwrap();
        assert_eq!(s.len(), 25 * 25);
        assert!((s[0].radius - 2.0 / 100.0 * std::f64::consts::SQRT_2 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn single_frame_fusion_matches_backprojection() {
        let cfg = FusionConfig::default();
        let f = frames(vec![(plane(2.0), Pose::identity())]);
        let map = fuse_sequence(&f, &f.poses(), &cfg).unwrap();
        let raw = backproject_frame(&f.frames[0].depth, &Pose::identity(), &k100(), &cfg).unwrap();
        let mut expect = SurfelMap::new(cfg.voxel_size);
        expect.extend(raw);
        assert_eq!(map.surfels(), expect.surfels());
    }

    #[test]
    fn repeated_frame_doubles_confidence() {
        let cfg = FusionConfig::default();
        let one = frames(vec![(plane(2.0), Pose::identity())]);
        let two = frames(vec![(plane(2.0), Pose::identity()), (plane(2.0), Pose::identity())]);
        let a = fuse_sequence(&one, &one.poses(), &cfg).unwrap();
        let b = fuse_sequence(&two, &two.poses(), &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.surfels().iter().zip(b.surfels()) {
            assert!((x.position - y.position).norm() < 1e-12);
            assert_eq!(y.confidence, 2 * x.confidence);
        }
    }

    #[test]
    fn in_plane_translation_stays_on_plane() {
        let cfg = FusionConfig::default();
        let f = frames(vec![
            (plane(2.0), Pose::identity()),
            (plane(2.0), Pose::from_translation(0.3, -0.1, 0.0)),
        ]);
        let map = fuse_sequence(&f, &f.poses(), &cfg).unwrap();
        for s in map.surfels() {
            assert!((s.position.z - 2.0).abs() <= cfg.voxel_size);
        }
    }

    #[test]
    fn rigid_equivariance_without_merging() {
        let cfg = FusionConfig {
            voxel_size: 0.0,
            ..Default::default()
        };
        let d = DepthImage::from_fn(100, 100, |u, v| Some(2.0 + 0.01 * u as f64 - 0.005 * v as f64));
        let poses = [Pose::identity(), Pose::from_translation(0.1, 0.0, 0.05)];
        let f = frames(vec![(d.clone(), poses[0]), (d, poses[1])]);
        let g = Pose::new(UnitQuaternion::from_euler_angles(0.4, -0.3, 1.2), Vector3::new(1.0, -2.0, 0.5));
        let moved: Vec<Pose> = poses.iter().map(|p| g * *p).collect();
        let a = fuse_sequence(&f, &moved, &cfg).unwrap();
        let b = fuse_sequence(&f, &poses, &cfg).unwrap().transformed(&g);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.surfels().iter().zip(b.surfels()) {
            assert!((x.position - y.position).norm() < 1e-9);
            assert!((x.normal - y.normal).norm() < 1e-9);
        }
    }

    #[test]
    fn map_grows_monotonically() {
        let cfg = FusionConfig::default();
        let mut prev = 0;
        let mut imgs = Vec::new();
        for i in 0..4 {
            imgs.push((plane(2.0), Pose::from_translation(0.2 * i as f64, 0.0, 0.0)));
            let f = frames(imgs.clone());
            let n = fuse_sequence(&f, &f.poses(), &cfg).unwrap().len();
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn empty_frame_set_gives_empty_map() {
        let f = frames(vec![]);
        assert!(fuse_sequence(&f, &[], &FusionConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn map_text_round_trip() {
        let f = frames(vec![(plane(2.0), Pose::from_translation(0.01, 0.02, 0.0))]);
        let map = fuse_sequence(&f, &f.poses(), &FusionConfig::default()).unwrap();
        let mut a = Vec::new();
        write_map(&map, &mut a).unwrap();
        let back = parse_map(Cursor::new(a.clone())).unwrap();
        assert_eq!(back.surfels(), map.surfels());
        assert_eq!(back.voxel_size(), map.voxel_size());
        let mut b = Vec::new();
        write_map(&back, &mut b).unwrap();
        assert_eq!(a, b);
        assert!(parse_map(Cursor::new("1 2 3\n")).is_err());
    }
}
