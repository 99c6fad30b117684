//! Run configuration: command-line flags over an optional TOML file over
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

use dmp_core::dataset::{CameraConfig, DEFAULT_MAX_DIFF};
use dmp_core::fusion::FusionConfig;
use dmp_core::metrics::{DmpOptions, NoiseModel};
use dmp_core::pose_graph::OptimizeOptions;
use dmp_core::render::RenderConfig;
use dmp_core::report::{Format, Provenance};

/// Keys accepted in the `--config` file. All optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub depth_scale: Option<f64>,
    pub max_diff: Option<f64>,
    pub seed: Option<u64>,
    pub frame_stride: Option<usize>,
    pub residual_cap: Option<f64>,
    pub sigma: Option<f64>,
    pub voxel_size: Option<f64>,
    pub normal_window: Option<usize>,
    pub pixel_stride: Option<usize>,
    pub min_splat_px: Option<f64>,
    pub backface_culling: Option<bool>,
    pub max_iters: Option<usize>,
    pub tolerance: Option<f64>,
    pub format: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("{}: invalid config", path.display()))
    }
}

/// Tuning flags shared by the commands that fuse, render or score.
#[derive(Debug, Clone, Default, Args)]
pub struct Tuning {
    /// Override the camera file's depth scale (raw units per meter).
    #[arg(long)]
    pub depth_scale: Option<f64>,
    /// Max timestamp gap (s) when associating depth frames with poses.
    #[arg(long)]
    pub max_diff: Option<f64>,
    /// Score every N-th frame.
    #[arg(long)]
    pub frame_stride: Option<usize>,
    /// Cap on the absolute depth residual (m).
    #[arg(long)]
    pub residual_cap: Option<f64>,
    /// Depth noise standard deviation (m) for log-likelihood ratios.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Fusion voxel size (m); 0 disables merging.
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Pixel offset used for normal estimation.
    #[arg(long)]
    pub normal_window: Option<usize>,
    /// Lift every N-th pixel when fusing.
    #[arg(long)]
    pub pixel_stride: Option<usize>,
    /// Minimum splat radius in pixels.
    #[arg(long)]
    pub min_splat_px: Option<f64>,
    /// Disable backface culling when rendering.
    #[arg(long)]
    pub no_culling: bool,
    /// Pose-graph iteration limit.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Pose-graph update-norm tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

/// Effective settings after precedence is applied.
#[derive(Debug, Clone)]
pub struct Settings {
    pub depth_scale: Option<f64>,
    pub max_diff: f64,
    pub dmp: DmpOptions,
    pub noise: NoiseModel,
    pub fusion: FusionConfig,
    pub optimizer: OptimizeOptions,
}

impl Settings {
    pub fn resolve(t: &Tuning, file: &FileConfig) -> Result<Self> {
        let fd = FusionConfig::default();
        let rd = RenderConfig::default();
        let od = OptimizeOptions::default();
        let fusion = FusionConfig {
            voxel_size: t.voxel_size.or(file.voxel_size).unwrap_or(fd.voxel_size),
            normal_window: t.normal_window.or(file.normal_window).unwrap_or(fd.normal_window),
            stride: t.pixel_stride.or(file.pixel_stride).unwrap_or(fd.stride),
        };
        fusion.validate()?;
        let render = RenderConfig {
            min_splat_px: t.min_splat_px.or(file.min_splat_px).unwrap_or(rd.min_splat_px),
            backface_culling: !t.no_culling && file.backface_culling.unwrap_or(rd.backface_culling),
        };
        if !(render.min_splat_px >= 0.0) {
            bail!("min_splat_px must be >= 0");
        }
        let dmp = DmpOptions {
            frame_stride: t.frame_stride.or(file.frame_stride).unwrap_or(1),
            residual_cap: t.residual_cap.or(file.residual_cap),
            render,
        };
        if dmp.frame_stride == 0 {
            bail!("frame_stride must be >= 1");
        }
        if let Some(c) = dmp.residual_cap {
            if !(c > 0.0) {
                bail!("residual_cap must be > 0");
            }
        }
        let max_diff = t.max_diff.or(file.max_diff).unwrap_or(DEFAULT_MAX_DIFF);
        if !(max_diff >= 0.0) {
            bail!("max_diff must be >= 0");
        }
        let depth_scale = t.depth_scale.or(file.depth_scale);
        if let Some(s) = depth_scale {
            if !(s > 0.0) {
                bail!("depth_scale must be > 0");
            }
        }
        let optimizer = OptimizeOptions {
            max_iters: t.max_iters.or(file.max_iters).unwrap_or(od.max_iters),
            tol: t.tolerance.or(file.tolerance).unwrap_or(od.tol),
            ..od
        };
        Ok(Self {
            depth_scale,
            max_diff,
            dmp,
            noise: NoiseModel::new(t.sigma.or(file.sigma).unwrap_or(1.0))?,
            fusion,
            optimizer,
        })
    }

    pub fn camera(&self, path: &Path) -> Result<CameraConfig> {
        let mut cam = CameraConfig::load(path)?;
        if let Some(s) = self.depth_scale {
            cam.depth_scale = s;
        }
        Ok(cam)
    }

    pub fn provenance(&self, out: &mut Provenance) {
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(s) = self.depth_scale {
            put("depth_scale", s.to_string());
        }
        put("max_diff", self.max_diff.to_string());
        put("frame_stride", self.dmp.frame_stride.to_string());
        put(
            "residual_cap",
            self.dmp.residual_cap.map_or("none".into(), |c| c.to_string()),
        );
        put("sigma", self.noise.sigma().to_string());
        put("voxel_size", self.fusion.voxel_size.to_string());
        put("normal_window", self.fusion.normal_window.to_string());
        put("pixel_stride", self.fusion.stride.to_string());
        put("min_splat_px", self.dmp.render.min_splat_px.to_string());
        put("backface_culling", self.dmp.render.backface_culling.to_string());
        put("max_iters", self.optimizer.max_iters.to_string());
        put("tolerance", self.optimizer.tol.to_string());
    }
}

pub fn resolve_format(flag: Option<&str>, file: &FileConfig) -> Result<Format> {
    Ok(flag.or(file.format.as_deref()).unwrap_or("csv").parse()?)
}

pub fn require_file(path: &Path) -> Result<PathBuf> {
    if !path.is_file() {
        bail!("{}: file not found", path.display());
    }
    Ok(path.to_path_buf())
}
