#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dmp_core::dataset::{load_frame_set, read_trajectory, save_depth, save_trajectory, FrameSet};
use dmp_core::fusion::{fuse_sequence, parse_map, write_map, SurfelMap};
use dmp_core::loops::{
    average_precision, evaluate_and_rank, filter_covisible, parse_candidates, parse_covisibility, pr_curve,
    write_candidates, LoopEvalConfig, PrCurve, RankedLoops,
};
use dmp_core::metrics::{ate, coverage_warning, dmp, llr, rpe, smd, DmpReport, RpeDelta};
use dmp_core::render::render_depth;
use dmp_core::report::{write_report, Format, Provenance, Report, Table, Value};
use dmp_core::synth::{
    default_fixture, load_fixture, make_loop_candidates, materialize, perturb_trajectory, Corruption, PerturbSpec,
};

use config::{require_file, resolve_format, FileConfig, Settings, Tuning};

/// Ground-truth-free map quality evaluation by dense map posterior.
#[derive(Debug, Parser)]
#[command(name = "dmp", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report format: csv or json.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Dataset {
    /// Depth list: "timestamp path" lines, paths relative to the list.
    #[arg(long)]
    depth: PathBuf,
    /// Trajectory in "timestamp tx ty tz qx qy qz qw" format.
    #[arg(long)]
    traj: PathBuf,
    /// Camera TOML (fx, fy, cx, cy, width, height, optional depth settings).
    #[arg(long)]
    camera: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score a map (fused from the frames unless --map is given).
    Dmp {
        #[command(flatten)]
        data: Dataset,
        /// Score this map file instead of fusing one.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Compare against the map fused from this trajectory.
        #[arg(long, conflicts_with = "compare_map")]
        compare_traj: Option<PathBuf>,
        /// Compare against this map file.
        #[arg(long)]
        compare_map: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Absolute trajectory error after rigid alignment.
    Ate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        max_diff: Option<f64>,
    },
    /// Relative pose error over a frame or time offset.
    Rpe {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Offset in frames (or seconds with --seconds).
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        #[arg(long)]
        seconds: bool,
        #[arg(long)]
        max_diff: Option<f64>,
    },
    /// Surface mean distance from a map to a reference map.
    Smd {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Fuse frames into a surfel map file.
    Fuse {
        #[command(flatten)]
        data: Dataset,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Render predicted depth PNGs from a map at trajectory poses.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Only render this trajectory index.
        #[arg(long)]
        index: Option<usize>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Rank loop candidates by the DMP of their single-loop optimized map.
    LoopRank {
        #[command(flatten)]
        data: Dataset,
        /// Candidate file: "i j tx ty tz qx qy qz qw [label]".
        #[arg(long)]
        candidates: PathBuf,
        /// Frame-index pairs to exclude as co-visible.
        #[arg(long)]
        covisibility: Option<PathBuf>,
        /// Also write the precision-recall curve here (needs labels).
        #[arg(long)]
        pr: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Materialize a synthetic dataset.
    Synth {
        /// Fixture descriptor; the built-in default fixture if absent.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Noise seed (default 0, or `seed` from the config file).
        #[arg(long)]
        seed: Option<u64>,
        /// Raw depth units per meter in the PNGs (default 5000).
        #[arg(long)]
        depth_scale: Option<f64>,
        /// Per-pose rotation noise std (rad) for perturbed.txt.
        #[arg(long, default_value_t = 0.0)]
        rot_std: f64,
        /// Per-pose translation noise std (m) for perturbed.txt.
        #[arg(long, default_value_t = 0.0)]
        trans_std: f64,
        /// Per-step rotation drift std (rad), accumulated along the trajectory.
        #[arg(long, default_value_t = 0.0)]
        drift_rot_std: f64,
        /// Per-step translation drift std (m), accumulated along the trajectory.
        #[arg(long, default_value_t = 0.0)]
        drift_trans_std: f64,
        /// Number of true loop candidates written to candidates.txt.
        #[arg(long, default_value_t = 0)]
        true_loops: usize,
        /// Number of corrupted loop candidates written to candidates.txt.
        #[arg(long, default_value_t = 0)]
        false_loops: usize,
        /// Minimum translation corruption of false loops (m).
        #[arg(long, default_value_t = 0.5)]
        corrupt_trans: f64,
        /// Minimum rotation corruption of false loops (degrees).
        #[arg(long, default_value_t = 30.0)]
        corrupt_rot_deg: f64,
        /// Minimum frame-index gap between the two ends of a candidate.
        #[arg(long, default_value_t = 2)]
        min_gap: usize,
    },
}

struct Output {
    path: Option<PathBuf>,
    format: Format,
    provenance: Provenance,
}

impl Output {
    fn emit(&self, report: &dyn Report) -> Result<()> {
        match &self.path {
            Some(p) => {
                let f = File::create(p).with_context(|| format!("{}", p.display()))?;
                let mut w = BufWriter::new(f);
                write_report(report, self.format, &self.provenance, &mut w)?;
                w.flush()?;
            }
            None => {
                let stdout = io::stdout();
                let mut w = stdout.lock();
                write_report(report, self.format, &self.provenance, &mut w)?;
            }
        }
        Ok(())
    }

    fn with(&self, key: &str, value: impl ToString) -> Provenance {
        let mut p = self.provenance.clone();
        p.push((key.to_string(), value.to_string()));
        p
    }
}

fn load_frames(data: &Dataset, s: &Settings) -> Result<FrameSet> {
    require_file(&data.traj)?;
    require_file(&data.camera)?;
    require_file(&data.depth)?;
    let cam = s.camera(&data.camera)?;
    let traj = read_trajectory(&data.traj)?;
    let frames = load_frame_set(&data.depth, &traj, &cam, s.max_diff)?;
    if frames.is_empty() {
        bail!("{}: no depth frame associates with a pose", data.depth.display());
    }
    Ok(frames)
}

fn load_map(path: &Path) -> Result<SurfelMap> {
    require_file(path)?;
    let f = File::open(path).with_context(|| format!("{}", path.display()))?;
    parse_map(BufReader::new(f)).with_context(|| format!("{}", path.display()))
}

fn dataset_provenance(out: &mut Provenance, data: &Dataset) {
    out.push(("depth".into(), data.depth.display().to_string()));
    out.push(("traj".into(), data.traj.display().to_string()));
    out.push(("camera".into(), data.camera.display().to_string()));
}

/// Two-model comparison through the log-likelihood ratio.
struct Comparison<'a> {
    a: &'a DmpReport,
    b: &'a DmpReport,
    llr: f64,
}

impl Report for Comparison<'_> {
    fn kind(&self) -> &'static str {
        "dmp_comparison"
    }

    fn summary(&self) -> Vec<(&'static str, Value)> {
        vec![
            ("sum_sq_a", self.a.sum_sq.into()),
            ("sum_sq_b", self.b.sum_sq.into()),
            ("llr", self.llr.into()),
        ]
    }

    fn table(&self) -> Table {
        let row = |name: &str, r: &DmpReport| {
            vec![
                name.into(),
                r.sum_sq.into(),
                r.n_valid.into(),
                r.mean_sq.into(),
                r.coverage.into(),
            ]
        };
        let mut llr_row = vec!["llr".into(), self.llr.into()];
        llr_row.extend([Value::Empty, Value::Empty, Value::Empty]);
        Table {
            columns: vec!["model", "sum_sq", "n_valid", "mean_sq", "coverage"],
            rows: vec![row("a", self.a), row("b", self.b), llr_row],
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let format = resolve_format(cli.format.as_deref(), &file)?;
    let mut out = Output {
        path: cli.output.clone(),
        format,
        provenance: Vec::new(),
    };
    let prov = |cmd: &str| vec![("command".to_string(), cmd.to_string())];

    match cli.command {
        Command::Dmp {
            data,
            map,
            compare_traj,
            compare_map,
            tuning,
        } => {
            let s = Settings::resolve(&tuning, &file)?;
            let mut p = prov("dmp");
            dataset_provenance(&mut p, &data);
            if let Some(m) = &map {
                p.push(("map".into(), m.display().to_string()));
            }
            s.provenance(&mut p);
            let frames = load_frames(&data, &s)?;
            let model = match &map {
                Some(m) => load_map(m)?,
                None => fuse_sequence(&frames, &frames.poses(), &s.fusion)?,
            };
            let report = dmp(&model, &frames, &s.dmp)?;
            out.provenance = p;
            if compare_traj.is_none() && compare_map.is_none() {
                return out.emit(&report);
            }
            let other = if let Some(t) = &compare_traj {
                require_file(t)?;
                let traj = read_trajectory(t)?;
                let cam = s.camera(&data.camera)?;
                let frames_b = load_frame_set(&data.depth, &traj, &cam, s.max_diff)?;
                let model_b = fuse_sequence(&frames_b, &frames_b.poses(), &s.fusion)?;
                out.provenance = out.with("compare_traj", t.display());
                // Same depth images; each model is scored from its own poses.
                dmp(&model_b, &frames_b, &s.dmp)?
            } else {
                let m = compare_map.as_ref().expect("one comparison source");
                out.provenance = out.with("compare_map", m.display());
                dmp(&load_map(m)?, &frames, &s.dmp)?
            };
            if let Some(w) = coverage_warning(&report, &other) {
                log::warn!("{w}");
            }
            let v = llr(&report, &other, &s.noise)?;
            out.emit(&Comparison {
                a: &report,
                b: &other,
                llr: v,
            })
        }
        Command::Ate { est, gt, max_diff } => {
            require_file(&est)?;
            require_file(&gt)?;
            let md = max_diff.or(file.max_diff).unwrap_or(dmp_core::dataset::DEFAULT_MAX_DIFF);
            let r = ate(&read_trajectory(&est)?, &read_trajectory(&gt)?, md)?;
            let mut p = prov("ate");
            p.extend([
                ("est".into(), est.display().to_string()),
                ("gt".into(), gt.display().to_string()),
                ("max_diff".into(), md.to_string()),
            ]);
            out.provenance = p;
            out.emit(&r)
        }
        Command::Rpe {
            est,
            gt,
            delta,
            seconds,
            max_diff,
        } => {
            require_file(&est)?;
            require_file(&gt)?;
            let md = max_diff.or(file.max_diff).unwrap_or(dmp_core::dataset::DEFAULT_MAX_DIFF);
            let d = if seconds {
                RpeDelta::Seconds(delta)
            } else {
                if delta.fract() != 0.0 || delta < 1.0 {
                    bail!("frame delta must be a positive integer, got {delta}");
                }
                RpeDelta::Frames(delta as usize)
            };
            let r = rpe(&read_trajectory(&est)?, &read_trajectory(&gt)?, d, md)?;
            let mut p = prov("rpe");
            p.extend([
                ("est".into(), est.display().to_string()),
                ("gt".into(), gt.display().to_string()),
                ("delta".into(), format!("{delta}{}", if seconds { "s" } else { "" })),
                ("max_diff".into(), md.to_string()),
            ]);
            out.provenance = p;
            out.emit(&r)
        }
        Command::Smd { map, reference } => {
            let a = load_map(&map)?;
            let b = load_map(&reference)?;
            let r = smd(&a.positions(), &b.positions())?;
            let mut p = prov("smd");
            p.extend([
                ("map".into(), map.display().to_string()),
                ("reference".into(), reference.display().to_string()),
            ]);
            out.provenance = p;
            out.emit(&r)
        }
        Command::Fuse { data, tuning } => {
            let s = Settings::resolve(&tuning, &file)?;
            let frames = load_frames(&data, &s)?;
            let map = fuse_sequence(&frames, &frames.poses(), &s.fusion)?;
            match &cli.output {
                Some(path) => {
                    let f = File::create(path).with_context(|| format!("{}", path.display()))?;
                    let mut w = BufWriter::new(f);
                    write_map(&map, &mut w)?;
                    w.flush()?;
                }
                None => write_map(&map, io::stdout().lock())?,
            }
            log::info!("fused {} frames into {} surfels", frames.len(), map.len());
            Ok(())
        }
        Command::Render {
            map,
            traj,
            camera,
            out: dir,
            index,
            tuning,
        } => {
            let s = Settings::resolve(&tuning, &file)?;
            require_file(&traj)?;
            require_file(&camera)?;
            let model = load_map(&map)?;
            let cam = s.camera(&camera)?;
            let k = cam.intrinsics()?;
            let t = read_trajectory(&traj)?;
            let records = t.records();
            let picked: Vec<usize> = match index {
                Some(i) if i >= records.len() => bail!("index {i} is beyond the {} trajectory poses", records.len()),
                Some(i) => vec![i],
                None => (0..records.len()).collect(),
            };
            fs::create_dir_all(&dir).with_context(|| format!("{}", dir.display()))?;
            let images = dmp_core::par::map(&picked, |&i| render_depth(&model, &records[i].pose, &k, &s.dmp.render));
            let mut list = String::from("# timestamp filename\n");
            for (&i, img) in picked.iter().zip(&images) {
                let name = format!("{i:06}.png");
                save_depth(img, cam.depth_scale, &dir.join(&name))?;
                list.push_str(&format!("{:?} {name}\n", records[i].timestamp));
            }
            let list_path = dir.join("depth.txt");
            fs::write(&list_path, list).with_context(|| format!("{}", list_path.display()))?;
            Ok(())
        }
        Command::LoopRank {
            data,
            candidates,
            covisibility,
            pr,
            tuning,
        } => {
            let s = Settings::resolve(&tuning, &file)?;
            require_file(&candidates)?;
            let f = File::open(&candidates).with_context(|| format!("{}", candidates.display()))?;
            let mut cands = parse_candidates(BufReader::new(f)).with_context(|| format!("{}", candidates.display()))?;
            if cands.is_empty() {
                bail!("{}: no loop candidates", candidates.display());
            }
            if pr.is_some() {
                if let Some(c) = cands.iter().find(|c| c.label.is_none()) {
                    bail!("candidate ({}, {}) has no label; --pr needs every candidate labeled", c.i, c.j);
                }
            }
            let mut p = prov("loop-rank");
            dataset_provenance(&mut p, &data);
            p.push(("candidates".into(), candidates.display().to_string()));
            if let Some(cv) = &covisibility {
                require_file(cv)?;
                let pairs = parse_covisibility(BufReader::new(File::open(cv)?))
                    .with_context(|| format!("{}", cv.display()))?;
                let before = cands.len();
                cands = filter_covisible(cands, &pairs);
                log::info!("co-visibility filter removed {} candidates", before - cands.len());
                p.push(("covisibility".into(), cv.display().to_string()));
                if cands.is_empty() {
                    bail!("every candidate was excluded by the co-visibility list");
                }
            }
            s.provenance(&mut p);
            let frames = load_frames(&data, &s)?;
            let cfg = LoopEvalConfig {
                fusion: s.fusion,
                dmp: s.dmp,
                optimizer: s.optimizer,
            };
            let ranked = evaluate_and_rank(&cands, &frames, &cfg)?;
            for r in ranked.iter().filter(|r| r.error.is_some()) {
                log::warn!(
                    "candidate ({}, {}) failed: {}",
                    r.candidate.i,
                    r.candidate.j,
                    r.error.as_deref().unwrap_or("")
                );
            }
            out.provenance = p;
            out.emit(&RankedLoops(&ranked))?;
            if let Some(pr_path) = pr {
                let curve = pr_curve(&ranked)?;
                log::info!("average precision {}", average_precision(&curve));
                let f = File::create(&pr_path).with_context(|| format!("{}", pr_path.display()))?;
                let mut w = BufWriter::new(f);
                // Plain "k,precision,recall" CSV, no provenance lines.
                write_report(&PrCurve(&curve), Format::Csv, &[], &mut w)?;
                w.flush()?;
            }
            Ok(())
        }
        Command::Synth {
            fixture,
            out: dir,
            seed,
            depth_scale,
            rot_std,
            trans_std,
            drift_rot_std,
            drift_trans_std,
            true_loops,
            false_loops,
            corrupt_trans,
            corrupt_rot_deg,
            min_gap,
        } => {
            let fx = match &fixture {
                Some(path) => {
                    require_file(path)?;
                    load_fixture(path).with_context(|| format!("{}", path.display()))?
                }
                None => default_fixture(),
            };
            let seed = seed.or(file.seed).unwrap_or(0);
            let scale = depth_scale
                .or(file.depth_scale)
                .unwrap_or(dmp_core::dataset::DEFAULT_DEPTH_SCALE);
            let m = materialize(&fx, &dir, scale)?;
            let gt = fx.trajectory();
            let spec = PerturbSpec::new(rot_std, trans_std, seed).with_drift(drift_rot_std, drift_trans_std);
            let perturbed = perturb_trajectory(&gt, &spec)?;
            save_trajectory(&perturbed, &dir.join("perturbed.txt"))?;
            if true_loops + false_loops > 0 {
                let corr = Corruption {
                    translation: corrupt_trans,
                    rotation: corrupt_rot_deg * PI / 180.0,
                };
                let cands = make_loop_candidates(&fx.poses, true_loops, false_loops, corr, min_gap, seed)?;
                let path = dir.join("candidates.txt");
                let mut buf = Vec::new();
                write_candidates(&cands, &mut buf)?;
                fs::write(&path, buf).with_context(|| format!("{}", path.display()))?;
            }
            log::info!("wrote {} frames to {}", m.frames, dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::FAILURE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
