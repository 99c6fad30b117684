//! Loop-closure verification by map likelihood.
//!
//! Each candidate is scored on its own: a pose graph of sequential odometry
//! plus the single candidate edge is optimized, the map is re-fused from the
//! optimized poses and the DMP of that map against the observations (seen
//! from the same optimized poses) is the candidate's score. Lower is better.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use nalgebra::Vector3;

use crate::dataset::{fmt_exact, FrameSet};
use crate::error::{Error, Result};
use crate::fusion::{fuse_sequence, FusionConfig};
use crate::geometry::Pose;
use crate::metrics::{dmp, DmpOptions, DmpReport};
use crate::par;
use crate::pose_graph::{optimize, Edge, OptimizeOptions, OptimizeResult, PoseGraph};
use crate::report::{Report, Table, Value};

/// A putative loop edge between frames `i` and `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopCandidate {
    pub i: usize,
    pub j: usize,
    /// Measured pose of frame `j` in the frame of `i`.
    pub measurement: Pose,
    pub label: Option<bool>,
}

impl LoopCandidate {
    pub fn new(i: usize, j: usize, measurement: Pose, label: Option<bool>) -> Self {
        Self {
            i,
            j,
            measurement,
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoopEvalConfig {
    pub fusion: FusionConfig,
    pub dmp: DmpOptions,
    pub optimizer: OptimizeOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopEvaluation {
    /// DMP residual sum (m²) of the re-fused map.
    pub dmp_value: f64,
    pub report: DmpReport,
    pub optimization: OptimizeResult,
}

impl LoopEvaluation {
    pub fn poses(&self) -> &[Pose] {
        &self.optimization.poses
    }
}

fn score(frames: &FrameSet, poses: &[Pose], cfg: &LoopEvalConfig) -> Result<DmpReport> {
    let map = fuse_sequence(frames, poses, &cfg.fusion)?;
    dmp(&map, &frames.with_poses(poses), &cfg.dmp)
}

/// DMP of the map fused from the frames' own poses, with no loop applied.
pub fn baseline(frames: &FrameSet, cfg: &LoopEvalConfig) -> Result<DmpReport> {
    score(frames, &frames.poses(), cfg)
}

/// Optimizes odometry plus this one loop edge, re-fuses and scores.
/// The frames' poses are the base trajectory.
pub fn evaluate_loop(candidate: &LoopCandidate, frames: &FrameSet, cfg: &LoopEvalConfig) -> Result<LoopEvaluation> {
    let n = frames.len();
    if candidate.i == candidate.j {
        return Err(Error::InvalidGraph(format!("loop candidate joins frame {} to itself", candidate.i)));
    }
    if candidate.i >= n || candidate.j >= n {
        return Err(Error::InvalidGraph(format!(
            "loop candidate ({}, {}) references a frame beyond {n}",
            candidate.i, candidate.j
        )));
    }
    let mut graph = PoseGraph::from_odometry(&frames.poses());
    graph
        .edges
        .push(Edge::new(candidate.i, candidate.j, candidate.measurement));
    let optimization = optimize(&graph, &cfg.optimizer)?;
    let report = score(frames, &optimization.poses, cfg)?;
    Ok(LoopEvaluation {
        dmp_value: report.sum_sq,
        report,
        optimization,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedLoop {
    pub candidate: LoopCandidate,
    /// `None` when evaluation failed; such loops rank last.
    pub dmp_value: Option<f64>,
    pub error: Option<String>,
    /// 1-based.
    pub rank: usize,
}

/// Sorts by ascending value, failures last; ties keep input order.
pub fn rank_loops(scored: Vec<(LoopCandidate, Result<f64>)>) -> Result<Vec<RankedLoop>> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("loop candidates"));
    }
    let mut rows: Vec<RankedLoop> = scored
        .into_iter()
        .map(|(candidate, v)| match v {
            Ok(v) if !v.is_nan() => RankedLoop {
                candidate,
                dmp_value: Some(v),
                error: None,
                rank: 0,
            },
            Ok(_) => RankedLoop {
                candidate,
                dmp_value: None,
                error: Some("score is NaN".into()),
                rank: 0,
            },
            Err(e) => RankedLoop {
                candidate,
                dmp_value: None,
                error: Some(e.to_string()),
                rank: 0,
            },
        })
        .collect();
    rows.sort_by(|a, b| match (a.dmp_value, b.dmp_value) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (r, row) in rows.iter_mut().enumerate() {
        row.rank = r + 1;
    }
    Ok(rows)
}

/// Evaluates every candidate in parallel and ranks them.
pub fn evaluate_and_rank(candidates: &[LoopCandidate], frames: &FrameSet, cfg: &LoopEvalConfig) -> Result<Vec<RankedLoop>> {
    let values = par::map(candidates, |c| evaluate_loop(c, frames, cfg).map(|e| e.dmp_value));
    rank_loops(candidates.iter().cloned().zip(values).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall when accepting the top `k` ranked loops, for every k.
pub fn pr_curve(ranked: &[RankedLoop]) -> Result<Vec<PrPoint>> {
    let labels: Vec<bool> = ranked
        .iter()
        .map(|r| {
            r.candidate.label.ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "candidate ({}, {}) has no label; precision-recall needs every label",
                    r.candidate.i, r.candidate.j
                ))
            })
        })
        .collect::<Result<_>>()?;
    let total = labels.iter().filter(|&&l| l).count();
    if total == 0 {
        return Err(Error::Degenerate("no true loops among the labels".into()));
    }
    let mut tp = 0;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(idx, &l)| {
            tp += l as usize;
            PrPoint {
                k: idx + 1,
                precision: tp as f64 / (idx + 1) as f64,
                recall: tp as f64 / total as f64,
            }
        })
        .collect())
}

/// Sum of precision times recall increment, i.e. the mean precision at the
/// ranks where a true loop is accepted.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in curve {
        ap += p.precision * (p.recall - prev);
        prev = p.recall;
    }
    ap
}

fn parse_index(f: &str, line: usize) -> Result<usize> {
    f.parse()
        .map_err(|_| Error::parse(line, format!("bad frame index {f:?}")))
}

/// Parses `i j tx ty tz qx qy qz qw [label]` lines.
pub fn parse_candidates<R: BufRead>(reader: R) -> Result<Vec<LoopCandidate>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let n = idx + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() != 9 && f.len() != 10 {
            return Err(Error::parse(n, format!("expected 9 or 10 fields, found {}", f.len())));
        }
        let i = parse_index(f[0], n)?;
        let j = parse_index(f[1], n)?;
        if i == j {
            return Err(Error::parse(n, "loop candidate joins a frame to itself"));
        }
        let v: Vec<f64> = f[2..9]
            .iter()
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|_| Error::parse(n, format!("non-numeric field {x:?}")))
            })
            .collect::<Result<_>>()?;
        let pose = Pose::from_parts(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6])
            .map_err(|e| Error::parse(n, e.to_string()))?;
        let label = match f.get(9) {
            None => None,
            Some(&"1") => Some(true),
            Some(&"0") => Some(false),
            Some(other) => return Err(Error::parse(n, format!("label must be 1 or 0, found {other:?}"))),
        };
        out.push(LoopCandidate::new(i, j, pose, label));
    }
    Ok(out)
}

pub fn write_candidates<W: Write>(candidates: &[LoopCandidate], mut w: W) -> Result<()> {
    writeln!(w, "# i j tx ty tz qx qy qz qw label")?;
    for c in candidates {
        let t = c.measurement.translation;
        let q = c.measurement.quaternion_xyzw();
        let fields: Vec<String> = [t.x, t.y, t.z, q[0], q[1], q[2], q[3]].iter().map(|v| fmt_exact(*v)).collect();
        write!(w, "{} {} {}", c.i, c.j, fields.join(" "))?;
        if let Some(l) = c.label {
            write!(w, " {}", l as u8)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads unordered frame-index pairs, one `i j` per line.
pub fn parse_covisibility<R: BufRead>(reader: R) -> Result<HashSet<(usize, usize)>> {
    let mut out = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let n = idx + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() != 2 {
            return Err(Error::parse(n, format!("expected 2 fields, found {}", f.len())));
        }
        let (a, b) = (parse_index(f[0], n)?, parse_index(f[1], n)?);
        out.insert((a.min(b), a.max(b)));
    }
    Ok(out)
}

/// Drops candidates whose frame pair is listed as co-visible.
pub fn filter_covisible(candidates: Vec<LoopCandidate>, pairs: &HashSet<(usize, usize)>) -> Vec<LoopCandidate> {
    candidates
        .into_iter()
        .filter(|c| !pairs.contains(&(c.i.min(c.j), c.i.max(c.j))))
        .collect()
}

pub struct RankedLoops<'a>(pub &'a [RankedLoop]);

impl Report for RankedLoops<'_> {
    fn kind(&self) -> &'static str {
        "loop_rank"
    }

    fn summary(&self) -> Vec<(&'static str, Value)> {
        let failed = self.0.iter().filter(|r| r.error.is_some()).count();
        vec![("candidates", self.0.len().into()), ("failed", failed.into())]
    }

    fn table(&self) -> Table {
        Table {
            columns: vec!["rank", "i", "j", "dmp_value", "label", "error"],
            rows: self
                .0
                .iter()
                .map(|r| {
                    vec![
                        r.rank.into(),
                        r.candidate.i.into(),
                        r.candidate.j.into(),
                        r.dmp_value.map_or(Value::Empty, Value::Float),
                        r.candidate.label.map_or(Value::Empty, Value::from),
                        r.error.clone().map_or(Value::Empty, Value::Text),
                    ]
                })
                .collect(),
        }
    }
}

pub struct PrCurve<'a>(pub &'a [PrPoint]);

impl Report for PrCurve<'_> {
    fn kind(&self) -> &'static str {
        "precision_recall"
    }

    fn summary(&self) -> Vec<(&'static str, Value)> {
        vec![("average_precision", average_precision(self.0).into())]
    }

    fn table(&self) -> Table {
        Table {
            columns: vec!["k", "precision", "recall"],
            rows: self
                .0
                .iter()
                .map(|p| vec![p.k.into(), p.precision.into(), p.recall.into()])
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{report_to_string, Format};
    use std::io::Cursor;

    fn cand(label: Option<bool>) -> LoopCandidate {
        LoopCandidate::new(0, 5, Pose::identity(), label)
    }

    fn ranked(labels: &[bool]) -> Vec<RankedLoop> {
        rank_loops(labels.iter().enumerate().map(|(i, &l)| (cand(Some(l)), Ok(i as f64))).collect()).unwrap()
    }

    #[test]
    fn ranking_examples() {
        let one = rank_loops(vec![(cand(None), Ok(3.0))]).unwrap();
        assert_eq!(one[0].rank, 1);
        let scored: Vec<_> = [5.0, 2.0, 9.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| (LoopCandidate::new(i, i + 10, Pose::identity(), None), Ok(v)))
            .collect();
        let r = rank_loops(scored).unwrap();
        assert_eq!(r.iter().map(|x| x.candidate.i).collect::<Vec<_>>(), vec![1, 0, 2]);
        assert_eq!(r.iter().map(|x| x.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        let ties: Vec<_> = (0..5)
            .map(|i| (LoopCandidate::new(i, i + 10, Pose::identity(), None), Ok(1.0)))
            .collect();
        let r = rank_loops(ties).unwrap();
        assert_eq!(r.iter().map(|x| x.candidate.i).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(rank_loops(vec![]).is_err());
    }

    #[test]
    fn failures_rank_last() {
        let r = rank_loops(vec![
            (cand(None), Err(Error::Numerical("boom".into()))),
            (cand(None), Ok(100.0)),
        ])
        .unwrap();
        assert_eq!(r[0].dmp_value, Some(100.0));
        assert!(r[1].error.as_deref().unwrap().contains("boom"));
        assert!(r[1].dmp_value.is_none());
    }

    #[test]
    fn monotone_transform_keeps_order() {
        let vals = [3.0, 0.5, 7.0, 2.0, 2.0, 9.5];
        let order = |f: &dyn Fn(f64) -> f64| {
            let s = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| (LoopCandidate::new(i, i + 10, Pose::identity(), None), Ok(f(v))))
                .collect();
            rank_loops(s).unwrap().iter().map(|r| r.candidate.i).collect::<Vec<_>>()
        };
        assert_eq!(order(&|v| v), order(&|v| (v * 3.0 + 1.0).ln()));
    }

    #[test]
    fn pr_enumeration() {
        let curve = pr_curve(&ranked(&[true, true, false, true])).unwrap();
        let want = [(1, 1.0, 1.0 / 3.0), (2, 1.0, 2.0 / 3.0), (3, 2.0 / 3.0, 2.0 / 3.0), (4, 0.75, 1.0)];
        for (p, (k, pr, rc)) in curve.iter().zip(want) {
            assert_eq!(p.k, k);
            assert!((p.precision - pr).abs() < 1e-15 && (p.recall - rc).abs() < 1e-15);
        }
        // Precision at each true hit: 1, 1, 3/4.
        assert!((average_precision(&curve) - (1.0 + 1.0 + 0.75) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pr_edge_cases() {
        let all = pr_curve(&ranked(&[true; 4])).unwrap();
        assert!(all.iter().all(|p| p.precision == 1.0));
        assert_eq!(average_precision(&all), 1.0);
        assert!(pr_curve(&ranked(&[false, false])).is_err());
        let unlabeled = rank_loops(vec![(cand(None), Ok(1.0))]).unwrap();
        assert!(pr_curve(&unlabeled).is_err());

        let labels = [false, true, true, false, true];
        let tied: Vec<_> = labels.iter().map(|&l| (cand(Some(l)), Ok(4.0))).collect();
        let a = pr_curve(&rank_loops(tied).unwrap()).unwrap();
        assert_eq!(a, pr_curve(&ranked(&labels)).unwrap());
        let last = a.last().unwrap();
        assert_eq!(last.recall, 1.0);
        assert_eq!(last.precision, 3.0 / 5.0);
        assert!(a.windows(2).all(|w| w[1].recall >= w[0].recall));
    }

    #[test]
    fn separated_scores_start_at_full_precision() {
        let curve = pr_curve(&ranked(&[true, true, true, false, false])).unwrap();
        assert!(curve[..3].iter().all(|p| p.precision == 1.0));
        assert_eq!(curve[2].recall, 1.0);
        assert!(curve[3].precision < 1.0);
    }

    #[test]
    fn candidate_file_round_trip() {
        let text = "# header\n0 7 0.1 0 0 0 0 0 1 1\n3 9 0 0 0.5 0 0 0.7071067811865476 0.7071067811865476 0\n2 4 0 0 0 0 0 0 1\n";
        let c = parse_candidates(Cursor::new(text)).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0].label, Some(true));
        assert_eq!(c[1].label, Some(false));
        assert_eq!(c[2].label, None);
        let mut a = Vec::new();
        write_candidates(&c, &mut a).unwrap();
        let back = parse_candidates(Cursor::new(a.clone())).unwrap();
        assert_eq!(back, c);
        assert!(parse_candidates(Cursor::new("1 1 0 0 0 0 0 0 1\n")).is_err());
        assert!(parse_candidates(Cursor::new("1 2 0 0 0 0 0 0 1 2\n")).is_err());
        assert!(parse_candidates(Cursor::new("1 2 0 0 0\n")).is_err());
    }

    #[test]
    fn covisibility_filter() {
        let pairs = parse_covisibility(Cursor::new("# pairs\n7 0\n4 5\n")).unwrap();
        let cands = vec![
            LoopCandidate::new(0, 7, Pose::identity(), None),
            LoopCandidate::new(1, 7, Pose::identity(), None),
        ];
        let kept = filter_covisible(cands, &pairs);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].i, 1);
    }

    #[test]
    fn pr_csv_shape() {
        let curve = pr_curve(&ranked(&[true, false])).unwrap();
        let s = report_to_string(&PrCurve(&curve), Format::Csv, &[]).unwrap();
        assert_eq!(s, "k,precision,recall\n1,1.0,1.0\n2,0.5,1.0\n");
    }
}
