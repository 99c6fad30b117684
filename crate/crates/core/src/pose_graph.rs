//! Small dense SE(3) pose-graph optimizer (Levenberg–Marquardt).
//!
//! Edge residual: `r = log(Z_ij⁻¹ · X_i⁻¹ · X_j)`; nodes update by right
//! multiplication `X ← X · exp(δ)`. The normal equations are solved densely
//! via Cholesky, which is fine for the one-loop graphs this crate builds.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};

use crate::dataset::fmt_exact;
use crate::error::{Error, Result};
use crate::geometry::{se3_exp, se3_log, se3_right_jacobian_inv, Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Measured pose of `to` expressed in the frame of `from`.
    pub measurement: Pose,
    /// 6×6 information matrix in `(ω, ρ)` ordering.
    pub information: Matrix6<f64>,
}

impl Edge {
    pub fn new(from: usize, to: usize, measurement: Pose) -> Self {
        Self {
            from,
            to,
            measurement,
            information: Matrix6::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseGraph {
    pub nodes: Vec<Pose>,
    pub edges: Vec<Edge>,
    pub fixed: BTreeSet<usize>,
}

impl PoseGraph {
    /// A graph over `nodes` with node 0 held fixed.
    pub fn new(nodes: Vec<Pose>) -> Self {
        Self {
            nodes,
            edges: Vec::new(),
            fixed: BTreeSet::from([0]),
        }
    }

    /// Sequential odometry edges measured from consecutive poses.
    pub fn from_odometry(poses: &[Pose]) -> Self {
        let mut g = Self::new(poses.to_vec());
        for i in 1..poses.len() {
            g.edges.push(Edge::new(i - 1, i, poses[i - 1].inverse() * poses[i]));
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixed.is_empty() {
            return Err(Error::InvalidGraph("at least one node must be fixed".into()));
        }
        let n = self.nodes.len();
        if let Some(&f) = self.fixed.iter().find(|&&f| f >= n) {
            return Err(Error::InvalidGraph(format!("fixed node {f} does not exist")));
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.from >= n || e.to >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge {k} ({} -> {}) references a missing node",
                    e.from, e.to
                )));
            }
            let asym = (e.information - e.information.transpose()).amax();
            if asym > 1e-9 * e.information.amax().max(1.0) {
                return Err(Error::InvalidGraph(format!("edge {k}: information matrix not symmetric")));
            }
            if e.information.cholesky().is_none() {
                return Err(Error::InvalidGraph(format!(
                    "edge {k}: information matrix not positive definite"
                )));
            }
        }
        Ok(())
    }

    pub fn chi2(&self) -> Result<f64> {
        chi2_of(&self.nodes, &self.edges)
    }
}

fn residual(nodes: &[Pose], e: &Edge) -> Result<Vector6<f64>> {
    let err = e.measurement.inverse() * nodes[e.from].inverse() * nodes[e.to];
    se3_log(&err)
}

fn chi2_of(nodes: &[Pose], edges: &[Edge]) -> Result<f64> {
    let mut total = 0.0;
    for e in edges {
        let r = residual(nodes, e)?;
        total += (r.transpose() * e.information * r)[(0, 0)];
    }
    Ok(total)
}

/// Residual of one edge at the graph's current node values.
pub fn edge_residual(graph: &PoseGraph, edge: &Edge) -> Result<Vector6<f64>> {
    residual(&graph.nodes, edge)
}

/// Residual plus its Jacobians with respect to right increments of the
/// `from` and `to` nodes.
pub fn edge_jacobians(graph: &PoseGraph, edge: &Edge) -> Result<(Vector6<f64>, Matrix6<f64>, Matrix6<f64>)> {
    linearize(&graph.nodes, edge)
}

fn linearize(nodes: &[Pose], e: &Edge) -> Result<(Vector6<f64>, Matrix6<f64>, Matrix6<f64>)> {
    let r = residual(nodes, e)?;
    let jr_inv = se3_right_jacobian_inv(&r);
    let j_to = jr_inv;
    let j_from = -jr_inv * (nodes[e.to].inverse() * nodes[e.from]).adjoint();
    Ok((r, j_from, j_to))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub max_iters: usize,
    /// Stop once the update norm drops below this.
    pub tol: f64,
    pub initial_lambda: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-8,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    UpdateBelowTolerance,
    NoImprovement,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub poses: Vec<Pose>,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    /// chi² after every accepted step, starting with the initial value.
    pub chi2_history: Vec<f64>,
}

const MAX_REJECTIONS: usize = 12;
const MAX_LAMBDA: f64 = 1e16;

/// Runs Levenberg–Marquardt on the free nodes.
///
/// Damping doubles on a rejected step and halves on an accepted one. chi² is
/// non-increasing over accepted steps by construction.
pub fn optimize(graph: &PoseGraph, opts: &OptimizeOptions) -> Result<OptimizeResult> {
    graph.validate()?;
    let n = graph.nodes.len();
    let mut slot = vec![None; n];
    let mut free = 0;
    for (i, s) in slot.iter_mut().enumerate() {
        if !graph.fixed.contains(&i) {
            *s = Some(free);
            free += 1;
        }
    }
    let mut poses = graph.nodes.clone();
    let initial_chi2 = chi2_of(&poses, &graph.edges)?;
    let mut chi2 = initial_chi2;
    let mut history = vec![chi2];
    let mut lambda = opts.initial_lambda;
    let dim = 6 * free;

    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;
    'outer: while iterations < opts.max_iters {
        iterations += 1;
        if dim == 0 {
            stop = StopReason::UpdateBelowTolerance;
            break;
        }
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for e in &graph.edges {
            let (r, ji, jj) = linearize(&poses, e)?;
            let omega = &e.information;
            let blocks = [(slot[e.from], ji), (slot[e.to], jj)];
            for (sa, ja) in &blocks {
                let Some(a) = sa else { continue };
                let jt_omega = ja.transpose() * omega;
                let g = jt_omega * r;
                for k in 0..6 {
                    b[6 * a + k] += g[k];
                }
                for (sb, jb) in &blocks {
                    let Some(bb) = sb else { continue };
                    let blk = jt_omega * jb;
                    let mut view = h.view_mut((6 * a, 6 * bb), (6, 6));
                    view += blk;
                }
            }
        }

        let mut rejections = 0;
        loop {
            let mut damped = h.clone();
            for d in 0..dim {
                damped[(d, d)] += lambda;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 2.0;
                if lambda > MAX_LAMBDA {
                    return Err(Error::Numerical(
                        "normal equations not positive definite after damping escalation".into(),
                    ));
                }
                continue;
            };
            let delta = chol.solve(&(-&b));
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical("non-finite update".into()));
            }
            if delta.norm() < opts.tol {
                stop = StopReason::UpdateBelowTolerance;
                break 'outer;
            }
            let mut candidate = poses.clone();
            for (i, s) in slot.iter().enumerate() {
                if let Some(a) = s {
                    let step = Vector6::from_iterator(delta.rows(6 * a, 6).iter().copied());
                    candidate[i] = candidate[i] * se3_exp(&step);
                }
            }
            match chi2_of(&candidate, &graph.edges) {
                Ok(c) if c < chi2 => {
                    poses = candidate;
                    chi2 = c;
                    history.push(c);
                    lambda = (lambda * 0.5).max(1e-12);
                    break;
                }
                _ => {
                    lambda *= 2.0;
                    rejections += 1;
                    if rejections > MAX_REJECTIONS || lambda > MAX_LAMBDA {
                        stop = StopReason::NoImprovement;
                        break 'outer;
                    }
                }
            }
        }
    }

    Ok(OptimizeResult {
        poses,
        initial_chi2,
        final_chi2: chi2,
        iterations,
        converged: stop != StopReason::MaxIterations,
        stop,
        chi2_history: history,
    })
}

fn parse_nums(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| Error::parse(line, format!("non-numeric field {f:?}")))
        })
        .collect()
}

fn parse_index(f: &str, line: usize) -> Result<usize> {
    f.parse()
        .map_err(|_| Error::parse(line, format!("bad node index {f:?}")))
}

fn pose_from(v: &[f64], line: usize) -> Result<Pose> {
    Pose::from_parts(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6])
        .map_err(|e| Error::parse(line, e.to_string()))
}

/// Parses `VERTEX`, `EDGE` and `FIX` lines. Information entries on `EDGE`
/// lines are optional (21 upper-triangular values, row-major); absent means
/// identity. Without any `FIX` line node 0 is fixed.
pub fn parse_graph<R: BufRead>(reader: R) -> Result<PoseGraph> {
    let mut vertices: Vec<(usize, Pose)> = Vec::new();
    let mut edges = Vec::new();
    let mut fixed = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        match f[0] {
            "VERTEX" => {
                if f.len() != 9 {
                    return Err(Error::parse(line_no, format!("VERTEX expects 8 values, found {}", f.len() - 1)));
                }
                let id = parse_index(f[1], line_no)?;
                let v = parse_nums(&f[2..], line_no)?;
                vertices.push((id, pose_from(&v, line_no)?));
            }
            "EDGE" => {
                if f.len() != 10 && f.len() != 31 {
                    return Err(Error::parse(
                        line_no,
                        format!("EDGE expects 9 or 30 values, found {}", f.len() - 1),
                    ));
                }
                let from = parse_index(f[1], line_no)?;
                let to = parse_index(f[2], line_no)?;
                let v = parse_nums(&f[3..10], line_no)?;
                let mut edge = Edge::new(from, to, pose_from(&v, line_no)?);
                if f.len() == 31 {
                    let info = parse_nums(&f[10..], line_no)?;
                    let mut m = Matrix6::zeros();
                    let mut k = 0;
                    for r in 0..6 {
                        for c in r..6 {
                            m[(r, c)] = info[k];
                            m[(c, r)] = info[k];
                            k += 1;
                        }
                    }
                    edge.information = m;
                }
                edges.push(edge);
            }
            "FIX" => {
                for idf in &f[1..] {
                    fixed.insert(parse_index(idf, line_no)?);
                }
            }
            other => return Err(Error::parse(line_no, format!("unknown record {other:?}"))),
        }
    }
    vertices.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in vertices.iter().enumerate() {
        if *id != expect {
            return Err(Error::InvalidGraph(format!(
                "vertex ids must be 0..{} without gaps or duplicates",
                vertices.len()
            )));
        }
    }
    if fixed.is_empty() && !vertices.is_empty() {
        fixed.insert(0);
    }
    let graph = PoseGraph {
        nodes: vertices.into_iter().map(|(_, p)| p).collect(),
        edges,
        fixed,
    };
    graph.validate()?;
    Ok(graph)
}

fn pose_fields(p: &Pose) -> String {
    let t = p.translation;
    let q = p.quaternion_xyzw();
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
        .iter()
        .map(|v| fmt_exact(*v))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_graph<W: Write>(graph: &PoseGraph, mut w: W) -> Result<()> {
    for (i, p) in graph.nodes.iter().enumerate() {
        writeln!(w, "VERTEX {i} {}", pose_fields(p))?;
    }
    for e in &graph.edges {
        write!(w, "EDGE {} {} {}", e.from, e.to, pose_fields(&e.measurement))?;
        if e.information != Matrix6::identity() {
            for r in 0..6 {
                for c in r..6 {
                    write!(w, " {}", fmt_exact(e.information[(r, c)]))?;
                }
            }
        }
        writeln!(w)?;
    }
    let fixed: Vec<String> = graph.fixed.iter().map(usize::to_string).collect();
    writeln!(w, "FIX {}", fixed.join(" "))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        se3_exp(&Vector6::new(
            rng.random_range(-rot..rot),
            rng.random_range(-rot..rot),
            rng.random_range(-rot..rot),
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
        ))
    }

    fn fd_jacobians(nodes: &[Pose], e: &Edge, h: f64) -> (Matrix6<f64>, Matrix6<f64>) {
        let mut out = [Matrix6::zeros(), Matrix6::zeros()];
        for (slot, node) in [e.from, e.to].into_iter().enumerate() {
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let mut plus = nodes.to_vec();
                plus[node] = plus[node] * se3_exp(&d);
                let mut minus = nodes.to_vec();
                minus[node] = minus[node] * se3_exp(&(-d));
                let col = (residual(&plus, e).unwrap() - residual(&minus, e).unwrap()) / (2.0 * h);
                out[slot].set_column(k, &col);
            }
        }
        (out[0], out[1])
    }

    #[test]
    fn consistent_edge_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_pose(&mut rng, 1.0, 2.0);
        let b = random_pose(&mut rng, 1.0, 2.0);
        let g = PoseGraph::from_odometry(&[a, b]);
        assert!(edge_residual(&g, &g.edges[0]).unwrap().norm() < 1e-12);
    }

    #[test]
    fn translation_measurement_residual() {
        let mut g = PoseGraph::new(vec![Pose::identity(); 2]);
        g.edges.push(Edge::new(0, 1, Pose::from_translation(0.1, 0.0, 0.0)));
        let r = edge_residual(&g, &g.edges[0]).unwrap();
        assert!((r - Vector6::new(0.0, 0.0, 0.0, -0.1, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let nodes = vec![random_pose(&mut rng, 1.5, 3.0), random_pose(&mut rng, 1.5, 3.0)];
            let z = nodes[0].inverse() * nodes[1] * random_pose(&mut rng, 0.8, 1.0);
            let e = Edge::new(0, 1, z);
            let Ok((_, ji, jj)) = linearize(&nodes, &e) else { continue };
            let (fi, fj) = fd_jacobians(&nodes, &e, 1e-6);
            worst = worst.max((ji - fi).amax()).max((jj - fj).amax());
        }
        assert!(worst < 1e-5, "max |J - J_fd| = {worst}");
    }

    #[test]
    fn consistent_graph_is_already_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses: Vec<Pose> = (0..6).map(|_| random_pose(&mut rng, 1.0, 2.0)).collect();
        let mut g = PoseGraph::from_odometry(&poses);
        g.edges.push(Edge::new(0, 5, poses[0].inverse() * poses[5]));
        let r = optimize(&g, &OptimizeOptions::default()).unwrap();
        assert!(r.converged && r.iterations <= 2);
        assert!(r.final_chi2 < 1e-16);
        assert_eq!(r.poses, poses);
    }

    #[test]
    fn two_parallel_edges_average() {
        let mut g = PoseGraph::new(vec![Pose::identity(), Pose::from_translation(0.5, 0.0, 0.0)]);
        g.edges.push(Edge::new(0, 1, Pose::from_translation(1.0, 0.0, 0.0)));
        g.edges.push(Edge::new(0, 1, Pose::from_translation(0.9, 0.0, 0.0)));
        let r = optimize(&g, &OptimizeOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.poses[1].translation.x - 0.95).abs() < 1e-8, "{}", r.poses[1].translation.x);
        assert!(r.poses[1].translation.yz().norm() < 1e-8 && r.poses[1].angle() < 1e-8);
        assert_eq!(r.poses[0], Pose::identity());
    }

    #[test]
    fn chi2_monotone_and_gauge_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth: Vec<Pose> = (0..10)
            .map(|i| {
                let a = i as f64 * 0.6;
                Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, a), Vector3::new(a.cos(), a.sin(), 0.0))
            })
            .collect();
        let noisy: Vec<Pose> = truth.iter().map(|p| *p * random_pose(&mut rng, 0.05, 0.1)).collect();
        let mut g = PoseGraph::from_odometry(&noisy);
        g.edges.push(Edge::new(0, 9, truth[0].inverse() * truth[9]));
        g.edges.push(Edge::new(2, 7, truth[2].inverse() * truth[7]));
        let r = optimize(&g, &OptimizeOptions::default()).unwrap();
        assert!(r.chi2_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.final_chi2 <= r.initial_chi2);

        let shift = random_pose(&mut rng, 1.0, 2.0);
        let mut g2 = g.clone();
        g2.nodes = g.nodes.iter().map(|p| shift * *p).collect();
        let r2 = optimize(&g2, &OptimizeOptions::default()).unwrap();
        assert!((r.final_chi2 - r2.final_chi2).abs() <= 1e-9 * r.final_chi2.max(1e-12));
    }

    #[test]
    fn invalid_graphs_are_rejected() {
        let mut g = PoseGraph::new(vec![Pose::identity(); 2]);
        g.edges.push(Edge::new(0, 2, Pose::identity()));
        assert!(matches!(optimize(&g, &OptimizeOptions::default()), Err(Error::InvalidGraph(_))));
        let mut g = PoseGraph::new(vec![Pose::identity(); 2]);
        g.fixed.clear();
        assert!(g.validate().is_err());
        let mut g = PoseGraph::new(vec![Pose::identity(); 2]);
        let mut e = Edge::new(0, 1, Pose::identity());
        e.information[(0, 0)] = -1.0;
        g.edges.push(e);
        assert!(g.validate().is_err());
    }

    #[test]
    fn graph_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let poses: Vec<Pose> = (0..4).map(|_| random_pose(&mut rng, 1.0, 2.0)).collect();
        let mut g = PoseGraph::from_odometry(&poses);
        let mut e = Edge::new(0, 3, poses[0].inverse() * poses[3]);
        e.information = Matrix6::from_diagonal(&Vector6::new(4.0, 4.0, 4.0, 1.0, 1.0, 1.0));
        e.information[(0, 5)] = 0.5;
        e.information[(5, 0)] = 0.5;
        g.edges.push(e);
        g.fixed = BTreeSet::from([0, 1]);
        let mut a = Vec::new();
        write_graph(&g, &mut a).unwrap();
        let back = parse_graph(Cursor::new(a.clone())).unwrap();
        assert_eq!(back.edges.len(), g.edges.len());
        assert_eq!(back.fixed, g.fixed);
        assert_eq!(back.edges[3].information, g.edges[3].information);
        let mut b = Vec::new();
        write_graph(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_defaults() {
        let g = parse_graph(Cursor::new(
            "VERTEX 1 1 0 0 0 0 0 1\nVERTEX 0 0 0 0 0 0 0 1\nEDGE 0 1 1 0 0 0 0 0 1\n",
        ))
        .unwrap();
        assert_eq!(g.fixed, BTreeSet::from([0]));
        assert_eq!(g.edges[0].information, Matrix6::identity());
        assert_eq!(g.nodes[1].translation.x, 1.0);
        assert!(parse_graph(Cursor::new("VERTEX 0 0 0 0 0 0 0 1\nVERTEX 2 0 0 0 0 0 0 1\n")).is_err());
        assert!(parse_graph(Cursor::new("EDGE 0 1 1 0 0\n")).is_err());
    }
}
