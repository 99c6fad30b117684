//! Map quality metrics.
//!
//! The dense map posterior (DMP) scores a surfel model against the depth
//! observations it was built from: each frame is re-rendered from its pose and
//! the squared depth residuals are summed. Under a Gaussian reading model the
//! sum is the negative log-likelihood up to a constant shared by all models
//! scored on the same observations, so two models compare through a
//! log-likelihood ratio. ATE, RPE and SMD are the ground-truth baselines.

use nalgebra::{Matrix3, Vector3};

use crate::dataset::{associate, FrameSet, Trajectory};
use crate::error::{Error, Result};
use crate::fusion::SurfelMap;
use crate::geometry::{DepthImage, Intrinsics, Pose};
use crate::par;
use crate::render::{render_depth, RenderConfig};
use crate::report::{read_csv_table, Report, Table, Value};

/// Gaussian depth-reading noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { sigma: 1.0 }
    }
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmpOptions {
    /// Score every `frame_stride`-th frame.
    pub frame_stride: usize,
    /// Optional cap on `|z - z'|` (meters). Off by default.
    pub residual_cap: Option<f64>,
    pub render: RenderConfig,
}

impl Default for DmpOptions {
    fn default() -> Self {
        Self {
            frame_stride: 1,
            residual_cap: None,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResidual {
    pub index: usize,
    pub timestamp: f64,
    pub sum_sq: f64,
    pub n_valid: usize,
    /// Valid observed pixels in the frame.
    pub n_observed: usize,
    pub coverage: f64,
}

/// DMP result: the raw residual sum (m²) plus counts and coverage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DmpReport {
    pub sum_sq: f64,
    pub n_valid: usize,
    pub n_observed: usize,
    pub mean_sq: f64,
    /// Fraction of observed-valid pixels that also had a valid prediction.
    pub coverage: f64,
    pub frame_stride: usize,
    pub per_frame: Vec<FrameResidual>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn frame_residual(
    index: usize,
    timestamp: f64,
    observed: &DepthImage,
    predicted: &DepthImage,
    cap: Option<f64>,
) -> FrameResidual {
    let mut sum_sq = 0.0;
    let mut n_valid = 0;
    let mut n_observed = 0;
    for (z, zp) in observed.samples().iter().zip(predicted.samples()) {
        let Some(z) = z else { continue };
        n_observed += 1;
        if let Some(zp) = zp {
            let mut r = (z - zp).abs();
            if let Some(c) = cap {
                r = r.min(c);
            }
            sum_sq += r * r;
            n_valid += 1;
        }
    }
    FrameResidual {
        index,
        timestamp,
        sum_sq,
        n_valid,
        n_observed,
        coverage: ratio(n_valid, n_observed),
    }
}

/// Scores `map` against the frames, rendering with [`render_depth`].
pub fn dmp(map: &SurfelMap, frames: &FrameSet, opts: &DmpOptions) -> Result<DmpReport> {
    let cfg = opts.render;
    dmp_with(map, frames, opts, |m, p, k| render_depth(m, p, k, &cfg))
}

/// Scores `map` with a caller-supplied renderer.
pub fn dmp_with<F>(map: &SurfelMap, frames: &FrameSet, opts: &DmpOptions, render: F) -> Result<DmpReport>
where
    F: Fn(&SurfelMap, &Pose, &Intrinsics) -> DepthImage + Sync + Send,
{
    if opts.frame_stride == 0 {
        return Err(Error::InvalidConfig("frame stride must be >= 1".into()));
    }
    if let Some(c) = opts.residual_cap {
        if !(c > 0.0) {
            return Err(Error::InvalidConfig(format!("residual cap must be positive, got {c}")));
        }
    }
    let k = frames.intrinsics;
    let selected: Vec<usize> = (0..frames.len()).step_by(opts.frame_stride).collect();
    let per_frame = par::map(&selected, |&i| {
        let f = &frames.frames[i];
        let predicted = render(map, &f.pose, &k);
        frame_residual(i, f.timestamp, &f.depth, &predicted, opts.residual_cap)
    });
    let mut sum_sq = 0.0;
    let mut n_valid = 0;
    let mut n_observed = 0;
    for f in &per_frame {
        sum_sq += f.sum_sq;
        n_valid += f.n_valid;
        n_observed += f.n_observed;
    }
    if n_valid == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(DmpReport {
        sum_sq,
        n_valid,
        n_observed,
        mean_sq: sum_sq / n_valid as f64,
        coverage: ratio(n_valid, n_observed),
        frame_stride: opts.frame_stride,
        per_frame,
    })
}

fn check_same_observations(a: &DmpReport, b: &DmpReport) -> Result<()> {
    if a.frame_stride != b.frame_stride || a.per_frame.len() != b.per_frame.len() {
        return Err(Error::MismatchedObservations(format!(
            "{} frames at stride {} vs {} frames at stride {}",
            a.per_frame.len(),
            a.frame_stride,
            b.per_frame.len(),
            b.frame_stride
        )));
    }
    for (x, y) in a.per_frame.iter().zip(&b.per_frame) {
        if x.index != y.index || x.timestamp != y.timestamp || x.n_observed != y.n_observed {
            return Err(Error::MismatchedObservations(format!(
                "frame {} (t={}) does not match frame {} (t={})",
                x.index, x.timestamp, y.index, y.timestamp
            )));
        }
    }
    Ok(())
}

/// Log-likelihood ratio of model 1 over model 2, assuming equal priors.
///
/// Positive means model 1 explains the shared observations better.
pub fn llr(r1: &DmpReport, r2: &DmpReport, noise: &NoiseModel) -> Result<f64> {
    check_same_observations(r1, r2)?;
    let s = noise.sigma();
    Ok((r2.sum_sq - r1.sum_sq) / (2.0 * s * s))
}

/// Coverage gap above which two DMP values are flagged as not comparable.
pub const COVERAGE_WARNING_GAP: f64 = 0.05;

/// Warns when two reports cover the observations very differently; DMP
/// ignores pixels the model does not predict, so sparse models can look
/// better than they are.
pub fn coverage_warning(a: &DmpReport, b: &DmpReport) -> Option<String> {
    let gap = (a.coverage - b.coverage).abs();
    (gap > COVERAGE_WARNING_GAP).then(|| {
        format!(
            "coverage differs by {:.1} percentage points ({:.3} vs {:.3}); DMP comparison may be unreliable",
            gap * 100.0,
            a.coverage,
            b.coverage
        )
    })
}

impl Report for DmpReport {
    fn kind(&self) -> &'static str {
        "dmp"
    }

    fn summary(&self) -> Vec<(&'static str, Value)> {
        vec![
            ("sum_sq", self.sum_sq.into()),
            ("n_valid", self.n_valid.into()),
            ("n_observed", self.n_observed.into()),
            ("mean_sq", self.mean_sq.into()),
            ("coverage", self.coverage.into()),
            ("frame_stride", self.frame_stride.into()),
            ("frames", self.per_frame.len().into()),
        ]
    }

    fn table(&self) -> Table {
        let mut rows: Vec<Vec<Value>> = self
            .per_frame
            .iter()
            .map(|f| {
                vec![
                    "frame".into(),
                    f.index.into(),
                    f.timestamp.into(),
                    f.sum_sq.into(),
                    f.n_valid.into(),
                    f.n_observed.into(),
                    (if f.n_valid > 0 { f.sum_sq / f.n_valid as f64 } else { 0.0 }).into(),
                    f.coverage.into(),
                ]
            })
            .collect();
        if !self.per_frame.is_empty() {
            rows.push(vec![
                "total".into(),
                self.frame_stride.into(),
                Value::Empty,
                self.sum_sq.into(),
                self.n_valid.into(),
                self.n_observed.into(),
                self.mean_sq.into(),
                self.coverage.into(),
            ]);
        }
        Table {
            columns: vec!["scope", "frame", "timestamp", "sum_sq", "n_valid", "n_observed", "mean_sq", "coverage"],
            rows,
        }
    }
}

impl DmpReport {
    /// Reads back the CSV form written by [`report::write_report`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, rows) = read_csv_table(text)?;
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::parse(1, format!("missing column {name}")))
        };
        let c = [
            col("scope")?,
            col("frame")?,
            col("timestamp")?,
            col("sum_sq")?,
            col("n_valid")?,
            col("n_observed")?,
            col("mean_sq")?,
            col("coverage")?,
        ];
        let f = |row: &[String], i: usize, line: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| Error::parse(line, format!("bad number {:?}", row[i])))
        };
        let n = |row: &[String], i: usize, line: usize| -> Result<usize> {
            row[i]
                .parse()
                .map_err(|_| Error::parse(line, format!("bad count {:?}", row[i])))
        };
        let mut out = DmpReport::default();
        for (r, row) in rows.iter().enumerate() {
            let line = r + 2;
            match row[c[0]].as_str() {
                "frame" => out.per_frame.push(FrameResidual {
                    index: n(row, c[1], line)?,
                    timestamp: f(row, c[2], line)?,
                    sum_sq: f(row, c[3], line)?,
                    n_valid: n(row, c[4], line)?,
                    n_observed: n(row, c[5], line)?,
                    coverage: f(row, c[7], line)?,
                }),
                "total" => {
                    out.frame_stride = n(row, c[1], line)?;
                    out.sum_sq = f(row, c[3], line)?;
                    out.n_valid = n(row, c[4], line)?;
                    out.n_observed = n(row, c[5], line)?;
                    out.mean_sq = f(row, c[6], line)?;
                    out.coverage = f(row, c[7], line)?;
                }
                other => return Err(Error::parse(line, format!("unknown scope {other:?}"))),
            }
        }
        Ok(out)
    }
}

/// Least-squares rigid fit without degeneracy checks. Always returns a proper
/// rotation; with rank-deficient data the optimum is not unique but the
/// residual is.
fn rigid_fit(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> (Pose, [f64; 3]) {
    let n = source.len() as f64;
    let sc = source.iter().sum::<Vector3<f64>>() / n;
    let tc = target.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - sc) * (t - tc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = nalgebra::UnitQuaternion::from_matrix(&r);
    let translation = tc - rotation * sc;
    let mut sv = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    sv.sort_by(|a, b| b.total_cmp(a));
    (Pose::new(rotation, translation), sv)
}

/// Rigid (no scale) transform `G` minimizing `Σ |G s_i - t_i|²`.
pub fn umeyama_align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Pose> {
    if source.len() != target.len() {
        return Err(Error::InvalidConfig(format!(
            "{} source points but {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::TooFewPairs {
            needed: 3,
            found: source.len(),
        });
    }
    let (pose, sv) = rigid_fit(source, target);
    if !(sv[0] > 1e-18) || sv[1] <= 1e-10 * sv[0] {
        return Err(Error::Degenerate("points are collinear or coincident".into()));
    }
    Ok(pose)
}

/// Position error statistics in meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryError {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub timestamps: Vec<f64>,
    pub residuals: Vec<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl TrajectoryError {
    fn from_residuals(timestamps: Vec<f64>, residuals: Vec<f64>) -> Self {
        let n = residuals.len() as f64;
        let sq: f64 = residuals.iter().map(|r| r * r).sum();
        Self {
            rmse: (sq / n).sqrt(),
            mean: residuals.iter().sum::<f64>() / n,
            median: median(&residuals),
            max: residuals.iter().copied().fold(0.0, f64::max),
            timestamps,
            residuals,
        }
    }
}

impl Report for TrajectoryError {
    fn kind(&self) -> &'static str {
        "trajectory_error"
    }

    fn summary(&self) -> Vec<(&'static str, Value)> {
        vec![
            ("rmse", self.rmse.into()),
            ("mean", self.mean.into()),
            ("median", self.median.into()),
            ("max", self.max.into()),
            ("pairs", self.residuals.len().into()),
        ]
    }

    fn table(&self) -> Table {
        Table {
            columns: vec!["rmse", "mean", "median", "max", "pairs"],
            rows: vec![self.summary().into_iter().map(|(_, v)| v).collect()],
        }
    }
}

/// Absolute trajectory error: positions associated by timestamp, estimate
/// rigidly aligned onto ground truth, per-pair distances.
pub fn ate(est: &Trajectory, gt: &Trajectory, max_diff: f64) -> Result<TrajectoryError> {
    let pairs = associate(&est.timestamps(), &gt.timestamps(), max_diff);
    if pairs.len() < 3 {
        return Err(Error::TooFewPairs {
            needed: 3,
            found: pairs.len(),
        });
    }
    let e = est.records();
    let g = gt.records();
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| e[i].pose.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| g[j].pose.translation).collect();
    let (align, _) = rigid_fit(&src, &dst);
    let residuals = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (align.transform_point(s) - d).norm())
        .collect();
    let ts = pairs.iter().map(|&(_, j)| g[j].timestamp).collect();
    Ok(TrajectoryError::from_residuals(ts, residuals))
}

/// Step between the two poses of a relative-motion comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RpeDelta {
    Frames(usize),
    Seconds(f64),
}

impl Default for RpeDelta {
    fn default() -> Self {
        RpeDelta::Frames(1)
    }
}

/// Relative pose error (translational part) over a fixed frame or time gap.
pub fn rpe(est: &Trajectory, gt: &Trajectory, delta: RpeDelta, max_diff: f64) -> Result<TrajectoryError> {
    let pairs = associate(&est.timestamps(), &gt.timestamps(), max_diff);
    let e = est.records();
    let g = gt.records();
    let steps: Vec<(usize, usize)> = match delta {
        RpeDelta::Frames(0) => return Err(Error::InvalidConfig("RPE delta must be >= 1 frame".into())),
        RpeDelta::Frames(d) => {
            if pairs.len() < d + 1 {
                return Err(Error::TooFewPairs {
                    needed: d + 1,
                    found: pairs.len(),
                });
            }
            (0..pairs.len() - d).map(|i| (i, i + d)).collect()
        }
        RpeDelta::Seconds(s) => {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig("RPE delta must be positive".into()));
            }
            let mut out = Vec::new();
            let mut j = 0;
            for i in 0..pairs.len() {
                j = j.max(i + 1);
                let ti = g[pairs[i].1].timestamp;
                while j < pairs.len() && g[pairs[j].1].timestamp - ti < s {
                    j += 1;
                }
                if j < pairs.len() {
                    out.push((i, j));
                }
            }
            if out.is_empty() {
                return Err(Error::TooFewPairs {
                    needed: 2,
                    found: pairs.len(),
                });
            }
            out
        }
    };
    let mut ts = Vec::with_capacity(steps.len());
    let residuals = steps
        .iter()
        .map(|&(a, b)| {
            let (ea, ga) = pairs[a];
            let (eb, gb) = pairs[b];
            ts.push(g[ga].timestamp);
            let gt_rel = g[ga].pose.inverse() * g[gb].pose;
            let est_rel = e[ea].pose.inverse() * e[eb].pose;
            (gt_rel.inverse() * est_rel).translation.norm()
        })
        .collect();
    Ok(TrajectoryError::from_residuals(ts, residuals))
}

/// Exact nearest-neighbor index over a fixed point set.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    // implicit balanced tree: node = median of a slice, split axis stored per node
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut pts = points.to_vec();
        let mut axes = vec![0u8; pts.len()];
        Self::build(&mut pts, &mut axes);
        Self { points: pts, axes }
    }

    fn build(pts: &mut [Vector3<f64>], axes: &mut [u8]) {
        if pts.len() <= 1 {
            return;
        }
        let mut lo = pts[0];
        let mut hi = pts[0];
        for p in pts.iter() {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let axis = (hi - lo).imax();
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        axes[mid] = axis as u8;
        let (lp, rp) = pts.split_at_mut(mid);
        let (la, ra) = axes.split_at_mut(mid);
        Self::build(lp, la);
        Self::build(&mut rp[1..], &mut ra[1..]);
    }

    /// Squared distance to the nearest indexed point (infinity when empty).
    pub fn nearest_sq(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, q: &Vector3<f64>, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let d = dist_sq(p, q);
        if d < *best {
            *best = d;
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, best);
        if diff * diff <= *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn dist_sq(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Surface distance from reconstructed points to a reference point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistance {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl Report for SurfaceDistance {
    fn kind(&self) -> &'static str {
        "smd"
    }

    fn summary(&self) -> Vec<(&'static str, Value)> {
        vec![
            ("mean", self.mean.into()),
            ("median", self.median.into()),
            ("points", self.count.into()),
        ]
    }

    fn table(&self) -> Table {
        Table {
            columns: vec!["mean", "median", "points"],
            rows: vec![self.summary().into_iter().map(|(_, v)| v).collect()],
        }
    }
}

/// Mean and median nearest-neighbor distance from `reconstructed` to `reference`.
pub fn smd(reconstructed: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<SurfaceDistance> {
    if reconstructed.is_empty() {
        return Err(Error::EmptyInput("reconstructed point set"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference point set"));
    }
    let tree = KdTree::new(reference);
    let d = par::map(reconstructed, |p| tree.nearest_sq(p).sqrt());
    Ok(SurfaceDistance {
        mean: d.iter().sum::<f64>() / d.len() as f64,
        median: median(&d),
        count: d.len(),
    })
}
