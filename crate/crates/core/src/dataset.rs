//! TUM RGB-D style sequence I/O: trajectory text files, 16-bit depth PNGs,
//! timestamp association and per-sequence intrinsics files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthImage, Intrinsics, Pose};
use crate::par;

pub const DEFAULT_MAX_DIFF: f64 = 0.02;
pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;
pub const DEFAULT_DEPTH_MIN: f64 = 0.3;
pub const DEFAULT_DEPTH_MAX: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Time-stamped camera poses with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub fn new(records: Vec<TrajectoryRecord>) -> Result<Self> {
        for (i, w) in records.windows(2).enumerate() {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(Error::parse(
                    i + 2,
                    format!(
                        "timestamps must be strictly increasing ({} after {})",
                        w[1].timestamp, w[0].timestamp
                    ),
                ));
            }
        }
        Ok(Self { records })
    }

    /// Builds a trajectory from poses sampled at `t0 + i * dt`.
    pub fn from_poses(t0: f64, dt: f64, poses: impl IntoIterator<Item = Pose>) -> Result<Self> {
        Self::new(
            poses
                .into_iter()
                .enumerate()
                .map(|(i, pose)| TrajectoryRecord {
                    timestamp: t0 + i as f64 * dt,
                    pose,
                })
                .collect(),
        )
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.timestamp).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.records.iter().map(|r| r.pose).collect()
    }

    /// Same timestamps, poses replaced in order.
    pub fn with_poses(&self, poses: &[Pose]) -> Self {
        assert_eq!(poses.len(), self.records.len(), "pose count mismatch");
        Self {
            records: self
                .records
                .iter()
                .zip(poses)
                .map(|(r, p)| TrajectoryRecord {
                    timestamp: r.timestamp,
                    pose: *p,
                })
                .collect(),
        }
    }

    /// Left-multiplies every pose by `g` (a change of world frame).
    pub fn transformed(&self, g: &Pose) -> Self {
        let poses: Vec<Pose> = self.records.iter().map(|r| g.compose(&r.pose)).collect();
        self.with_poses(&poses)
    }
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::parse(line, format!("non-numeric field {field:?}")))
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines; `#` lines and blank lines are skipped.
pub fn parse_trajectory<R: BufRead>(reader: R) -> Result<Trajectory> {
    let mut records = Vec::new();
    let mut prev: Option<f64> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::parse(
                line_no,
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = parse_f64(f, line_no)?;
        }
        if let Some(p) = prev {
            if !(v[0] > p) {
                return Err(Error::parse(
                    line_no,
                    format!("timestamps must be strictly increasing ({} after {p})", v[0]),
                ));
            }
        }
        prev = Some(v[0]);
        let pose = Pose::from_parts(Vector3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7])
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        records.push(TrajectoryRecord {
            timestamp: v[0],
            pose,
        });
    }
    Ok(Trajectory { records })
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    parse_trajectory(BufReader::new(file))
}

/// Shortest decimal text that parses back to the same `f64`.
pub(crate) fn fmt_exact(x: f64) -> String {
    format!("{x:?}")
}

/// Writes a trajectory in the TUM text format with `qw >= 0`.
///
/// Numbers use the shortest round-trip representation, so parsing the output
/// reproduces every value bit-for-bit.
pub fn write_trajectory<W: Write>(traj: &Trajectory, mut w: W) -> Result<()> {
    writeln!(w, "# timestamp tx ty tz qx qy qz qw")?;
    for r in &traj.records {
        let t = &r.pose.translation;
        let q = r.pose.quaternion_xyzw();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            fmt_exact(r.timestamp),
            fmt_exact(t.x),
            fmt_exact(t.y),
            fmt_exact(t.z),
            fmt_exact(q[0]),
            fmt_exact(q[1]),
            fmt_exact(q[2]),
            fmt_exact(q[3]),
        )?;
    }
    Ok(())
}

pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    write_trajectory(traj, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Greedy mutual-nearest timestamp association.
///
/// Repeatedly takes the globally closest unmatched pair with `|Δt| <= max_diff`;
/// ties go to the lower `a` index, then the lower `b` index. The result is
/// sorted by `a` index.
pub fn associate(a: &[f64], b: &[f64], max_diff: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut start = 0;
    for (i, &ta) in a.iter().enumerate() {
        while start < b.len() && b[start] < ta - max_diff {
            start += 1;
        }
        let mut j = start;
        while j < b.len() && b[j] <= ta + max_diff {
            let d = (ta - b[j]).abs();
            if d <= max_diff {
                candidates.push((d, i, j));
            }
            j += 1;
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// One line of an association list: a timestamp and either a file path or a
/// second timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationEntry {
    pub timestamp: f64,
    pub target: String,
}

/// Parses `t_a path_or_t_b` lines (the TUM `depth.txt` layout).
pub fn parse_association_list<R: BufRead>(reader: R) -> Result<Vec<AssociationEntry>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let (Some(t), Some(target)) = (it.next(), it.next()) else {
            return Err(Error::parse(idx + 1, "expected \"timestamp path_or_timestamp\""));
        };
        out.push(AssociationEntry {
            timestamp: parse_f64(t, idx + 1)?,
            target: target.to_string(),
        });
    }
    Ok(out)
}

/// Converts raw 16-bit depth samples into meters. `0` and out-of-range values are invalid.
pub fn depth_from_raw(raw: &[u16], depth_scale: f64, k: &Intrinsics) -> Result<DepthImage> {
    if raw.len() != k.pixel_count() {
        return Err(Error::Format(format!(
            "expected {}x{} samples, got {}",
            k.width,
            k.height,
            raw.len()
        )));
    }
    let samples = raw
        .iter()
        .map(|&r| {
            if r == 0 {
                None
            } else {
                let m = r as f64 / depth_scale;
                k.in_depth_range(m).then_some(m)
            }
        })
        .collect();
    DepthImage::from_samples(k.width, k.height, samples)
}

/// Inverse of [`depth_from_raw`]: invalid samples encode as `0`.
pub fn depth_to_raw(img: &DepthImage, depth_scale: f64) -> Vec<u16> {
    img.samples()
        .iter()
        .map(|s| match s {
            Some(d) => (d * depth_scale).round().clamp(1.0, u16::MAX as f64) as u16,
            None => 0,
        })
        .collect()
}

/// Reads a 16-bit single-channel PNG into raw samples and its size.
pub fn decode_png16<R: BufRead + Seek>(reader: R) -> Result<(usize, usize, Vec<u16>)> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format(format!(
            "expected 16-bit grayscale PNG, got {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("image too large".into()))?;
    let mut buf = vec![0u8; size];
    reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    let raw = buf[..w * h * 2]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((w, h, raw))
}

pub fn encode_png16<W: Write>(width: usize, height: usize, raw: &[u16], w: W) -> Result<()> {
    let mut encoder = png::Encoder::new(w, width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(e.to_string()))?;
    let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Loads a TUM-encoded depth PNG (`meters = raw / depth_scale`).
pub fn load_depth(path: &Path, depth_scale: f64, k: &Intrinsics) -> Result<DepthImage> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_depth(BufReader::new(file), depth_scale, k)
}

pub fn read_depth<R: BufRead + Seek>(reader: R, depth_scale: f64, k: &Intrinsics) -> Result<DepthImage> {
    let (w, h, raw) = decode_png16(reader)?;
    if w != k.width || h != k.height {
        return Err(Error::Format(format!(
            "image is {w}x{h}, intrinsics expect {}x{}",
            k.width, k.height
        )));
    }
    depth_from_raw(&raw, depth_scale, k)
}

pub fn save_depth(img: &DepthImage, depth_scale: f64, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    encode_png16(img.width(), img.height(), &depth_to_raw(img, depth_scale), &mut w)?;
    w.flush()?;
    Ok(())
}

/// Per-sequence camera description, stored as TOML.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_depth_min")]
    pub depth_min: f64,
    #[serde(default = "default_depth_max")]
    pub depth_max: f64,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
}

fn default_depth_min() -> f64 {
    DEFAULT_DEPTH_MIN
}
fn default_depth_max() -> f64 {
    DEFAULT_DEPTH_MAX
}
fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

impl CameraConfig {
    pub fn from_intrinsics(k: &Intrinsics, depth_scale: f64) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            depth_min: k.depth_min,
            depth_max: k.depth_max,
            depth_scale,
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            self.depth_min,
            self.depth_max,
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: CameraConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(cfg.depth_scale > 0.0) {
            return Err(Error::InvalidConfig("depth_scale must be positive".into()));
        }
        cfg.intrinsics()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("camera config serializes")
    }
}

/// One depth observation with the pose it was taken from.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub depth: DepthImage,
    pub pose: Pose,
}

/// The observation set: depth frames in time order plus shared intrinsics.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    /// Same observations, re-posed.
    pub fn with_poses(&self, poses: &[Pose]) -> FrameSet {
        assert_eq!(poses.len(), self.frames.len(), "pose count mismatch");
        FrameSet {
            intrinsics: self.intrinsics,
            frames: self
                .frames
                .iter()
                .zip(poses)
                .map(|(f, p)| Frame {
                    timestamp: f.timestamp,
                    depth: f.depth.clone(),
                    pose: *p,
                })
                .collect(),
        }
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(
            self.frames
                .iter()
                .map(|f| TrajectoryRecord {
                    timestamp: f.timestamp,
                    pose: f.pose,
                })
                .collect(),
        )
    }
}

/// Loads the depth frames listed in `depth_list` (relative paths resolve
/// against the list's directory) and pairs each with a trajectory pose.
///
/// Frames without a pose within `max_diff` are dropped with a warning.
pub fn load_frame_set(
    depth_list: &Path,
    trajectory: &Trajectory,
    camera: &CameraConfig,
    max_diff: f64,
) -> Result<FrameSet> {
    let k = camera.intrinsics()?;
    let file = File::open(depth_list).map_err(|e| Error::file(depth_list, e))?;
    let entries = parse_association_list(BufReader::new(file))?;
    let base = depth_list.parent().map(Path::to_path_buf).unwrap_or_default();
    let depth_ts: Vec<f64> = entries.iter().map(|e| e.timestamp).collect();
    let pairs = associate(&depth_ts, &trajectory.timestamps(), max_diff);
    if pairs.len() < entries.len() {
        log::warn!(
            "{} of {} depth frames have no pose within {max_diff} s and are skipped",
            entries.len() - pairs.len(),
            entries.len()
        );
    }
    let loaded: Vec<Result<Frame>> = par::map(&pairs, |&(i, j)| {
        let path: PathBuf = base.join(&entries[i].target);
        Ok(Frame {
            timestamp: entries[i].timestamp,
            depth: load_depth(&path, camera.depth_scale, &k)?,
            pose: trajectory.records()[j].pose,
        })
    });
    let frames = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(FrameSet { intrinsics: k, frames })
}

/// Reads a whole file into memory, naming the path on failure.
pub fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .map_err(|e| Error::file(path, e))?
        .read_to_string(&mut s)
        .map_err(|e| Error::file(path, e))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn k_small() -> Intrinsics {
        Intrinsics::new(10.0, 10.0, 2.0, 1.0, 4, 3, 0.3, 10.0).unwrap()
    }

    #[test]
    fn parse_identity_line() {
        let t = parse_trajectory(Cursor::new("0.0 0 0 0 0 0 0 1\n")).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.records()[0].timestamp, 0.0);
        assert_eq!(t.records()[0].pose, Pose::identity());
    }

    #[test]
    fn composed_poses_round_trip_exactly() {
        let step = crate::geometry::se3_exp(&nalgebra::Vector6::new(0.03, -0.02, 0.05, 0.1, 0.2, -0.1));
        let mut p = Pose::identity();
        let poses: Vec<Pose> = (0..500)
            .map(|_| {
                p = p * step;
                p
            })
            .collect();
        let t = Trajectory::from_poses(0.0, 0.1, poses).unwrap();
        let mut out = Vec::new();
        write_trajectory(&t, &mut out).unwrap();
        let back = parse_trajectory(Cursor::new(out)).unwrap();
        for (a, b) in back.records().iter().zip(t.records()) {
            assert_eq!(a.pose.translation, b.pose.translation);
            assert_eq!(a.pose.quaternion_xyzw(), b.pose.quaternion_xyzw());
        }
    }

    #[test]
    fn parse_literal_translation() {
        let t = parse_trajectory(Cursor::new("# header\n1.5 1 2 3 0 0 0 1\n")).unwrap();
        let r = t.records()[0];
        assert_eq!(r.timestamp, 1.5);
        assert_eq!(r.pose.translation, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(r.pose.angle(), 0.0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = parse_trajectory(Cursor::new("1.5 1 2 3 0 0 0\n")).unwrap_err();
        assert!(e.to_string().contains("line 1") && e.to_string().contains("expected 8 fields"), "{e}");
        let e = parse_trajectory(Cursor::new("# c\n1 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n")).unwrap_err();
        assert!(e.to_string().starts_with("line 3"), "{e}");
        let e = parse_trajectory(Cursor::new("1 0 0 x 0 0 0 1\n")).unwrap_err();
        assert!(e.to_string().contains("non-numeric"), "{e}");
    }

    #[test]
    fn serializer_canonicalizes_quaternion_sign() {
        let p = Pose::from_parts(Vector3::zeros(), 0.0, 0.0, 0.6, -0.8).unwrap();
        let t = Trajectory::from_poses(0.0, 1.0, [p]).unwrap();
        let mut out = Vec::new();
        write_trajectory(&t, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with("-0.6 0.8"), "{text}");
    }

    #[test]
    fn associate_examples() {
        assert_eq!(associate(&[1.00, 1.05], &[1.01, 1.06], 0.02), vec![(0, 0), (1, 1)]);
        assert!(associate(&[1.00], &[2.00], 0.02).is_empty());
        assert_eq!(associate(&[1.0, 2.0], &[1.0, 2.0], 1e-6), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn associate_prefers_globally_closest() {
        // b[0] is closer to a[1] than to a[0]; a[0] must then fall back to nothing.
        assert_eq!(associate(&[1.00, 1.015], &[1.014], 0.02), vec![(1, 0)]);
    }

    #[test]
    fn depth_scale_and_range() {
        let k = Intrinsics::new(10.0, 10.0, 1.0, 0.0, 3, 1, 0.3, 10.0).unwrap();
        let d = depth_from_raw(&[10000, 0, 65535], 5000.0, &k).unwrap();
        assert_eq!(d.get(0, 0), Some(2.0));
        assert_eq!(d.get(1, 0), None);
        assert!((65535.0 / 5000.0 - 13.107f64).abs() < 1e-12);
        assert_eq!(d.get(2, 0), None);
    }

    #[test]
    fn png_rejects_wrong_format() {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, 4, 3);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[0u8; 12]).unwrap();
        }
        assert!(matches!(read_depth(Cursor::new(buf), 5000.0, &k_small()), Err(Error::Format(_))));

        let mut buf = Vec::new();
        encode_png16(5, 3, &[1000u16; 15], &mut buf).unwrap();
        assert!(matches!(read_depth(Cursor::new(buf), 5000.0, &k_small()), Err(Error::Format(_))));
    }

    #[test]
    fn png_round_trip_is_bit_exact() {
        let k = k_small();
        let raw: Vec<u16> = vec![0, 1500, 10000, 49999, 2000, 0, 3001, 4000, 5000, 6000, 7000, 8000];
        let mut png1 = Vec::new();
        encode_png16(4, 3, &raw, &mut png1).unwrap();
        let img = read_depth(Cursor::new(png1.clone()), 5000.0, &k).unwrap();
        let raw2 = depth_to_raw(&img, 5000.0);
        assert_eq!(raw, raw2);
        let mut png2 = Vec::new();
        encode_png16(4, 3, &raw2, &mut png2).unwrap();
        assert_eq!(png1, png2);
    }

    #[test]
    fn camera_config_defaults() {
        let c = CameraConfig::parse("fx = 120.0\nfy = 120.0\ncx = 80.0\ncy = 60.0\nwidth = 160\nheight = 120\n").unwrap();
        assert_eq!(c.depth_scale, 5000.0);
        assert_eq!((c.depth_min, c.depth_max), (0.3, 8.0));
        assert!(CameraConfig::parse("fx = -1.0\nfy = 1.0\ncx = 0.0\ncy = 0.0\nwidth = 2\nheight = 2\n").is_err());
        assert_eq!(CameraConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn association_list() {
        let e = parse_association_list(Cursor::new("# depth\n1.0 depth/1.png\n2.0 2.01\n")).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].target, "depth/1.png");
        assert!(parse_association_list(Cursor::new("1.0\n")).is_err());
    }

    fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        prop::collection::vec(
            (0.001f64..2.0, prop::array::uniform3(-10.0f64..10.0), prop::array::uniform4(-1.0f64..1.0)),
            1..20,
        )
        .prop_filter("quaternion", |v| {
            v.iter().all(|(_, _, q)| q.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        })
        .prop_map(|v| {
            let mut t = 1305031102.175304;
            let poses = v
                .into_iter()
                .map(|(dt, tr, q)| {
                    t += dt;
                    TrajectoryRecord {
                        timestamp: t,
                        pose: Pose::from_parts(Vector3::from(tr), q[0], q[1], q[2], q[3]).unwrap(),
                    }
                })
                .collect();
            Trajectory::new(poses).unwrap()
        })
    }

    proptest! {
        #[test]
        fn trajectory_text_round_trip(t in arb_trajectory()) {
            let mut a = Vec::new();
            write_trajectory(&t, &mut a).unwrap();
            let back = parse_trajectory(Cursor::new(a.clone())).unwrap();
            prop_assert_eq!(back.len(), t.len());
            for (x, y) in back.records().iter().zip(t.records()) {
                prop_assert_eq!(x.timestamp, y.timestamp);
                prop_assert_eq!(x.pose.translation, y.pose.translation);
                // q and -q are the same rotation
                prop_assert!(x.pose.rotation.angle_to(&y.pose.rotation) < 1e-9);
            }
            let mut b = Vec::new();
            write_trajectory(&back, &mut b).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn associate_is_unique_and_within_window(
            mut a in prop::collection::vec(0.0f64..10.0, 0..40),
            mut b in prop::collection::vec(0.0f64..10.0, 0..40),
            max_diff in 0.0f64..0.5,
        ) {
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let pairs = associate(&a, &b, max_diff);
            let mut seen_a = std::collections::HashSet::new();
            let mut seen_b = std::collections::HashSet::new();
            for &(i, j) in &pairs {
                prop_assert!(seen_a.insert(i) && seen_b.insert(j));
                prop_assert!((a[i] - b[j]).abs() <= max_diff);
            }
            prop_assert!(pairs.windows(2).all(|w| w[0].0 < w[1].0));
        }

        #[test]
        fn load_depth_never_out_of_range(raw in prop::collection::vec(any::<u16>(), 12)) {
            let k = k_small();
            let d = depth_from_raw(&raw, 5000.0, &k).unwrap();
            prop_assert!(d.samples().iter().flatten().all(|&z| z >= k.depth_min && z <= k.depth_max));
        }
    }

    #[test]
    fn with_poses_keeps_timestamps() {
        let t = Trajectory::from_poses(0.0, 0.5, vec![Pose::identity(); 3]).unwrap();
        let p = Pose::new(UnitQuaternion::from_euler_angles(0.1, 0.0, 0.0), Vector3::x());
        let t2 = t.with_poses(&[p; 3]);
        assert_eq!(t2.timestamps(), vec![0.0, 0.5, 1.0]);
        assert_eq!(t2.poses()[1], p);
    }
}
