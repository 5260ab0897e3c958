//! Run configuration: JSON schema, defaults, and presets.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use bevfuse_core::geometry::{BevGrid, Camera, CameraRig, DepthBins};
use bevfuse_core::presets;
use bevfuse_core::scene_sim::SceneSpec;
use bevfuse_core::train::{benchmark_scenes, same_ray_benchmark, OptimizerConfig, RunConfig};
use bevfuse_core::view_transform::{EncoderConfig, ModelDims};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimsConfig {
    pub channels: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub trunk_width: usize,
    pub radar_feat: usize,
    pub classes: usize,
    pub column_stride: usize,
}

impl From<DimsConfig> for ModelDims {
    fn from(d: DimsConfig) -> Self {
        ModelDims {
            channels: d.channels,
            n_heads: d.n_heads,
            n_points: d.n_points,
            trunk_width: d.trunk_width,
            radar_feat: d.radar_feat,
            classes: d.classes,
            column_stride: d.column_stride,
        }
    }
}

/// Where the run's scenes come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    /// The canonical two-object depth-ambiguity scene.
    SameRay { d_near: f64, d_far: f64, azimuth: f64 },
    /// Explicit scene specifications.
    Specs(Vec<SceneSpec>),
    /// A named fixed benchmark: "table4" (8 scenes) or "same_ray_bench".
    Benchmark(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileConfig {
    pub cameras: Vec<Camera>,
    pub grid: BevGrid,
    pub bins: DepthBins,
    pub dims: DimsConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub radar_occ_softmax: bool,
    pub optimizer: OptimizerConfig,
    pub scene_source: SceneSource,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: FileConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Desk-scale default: the same-ray scene on the two-camera rig.
    pub fn desk_default() -> Self {
        FileConfig {
            cameras: presets::desk_rig().cameras,
            grid: presets::desk_grid(),
            bins: presets::desk_bins(),
            dims: DimsConfig {
                channels: 16,
                n_heads: 2,
                n_points: 4,
                trunk_width: 16,
                radar_feat: 16,
                classes: 3,
                column_stride: presets::COLUMN_STRIDE,
            },
            encoder: EncoderConfig {
                n_layers: 2,
                use_depth_sca: true,
                use_occupancy_sca: true,
                use_radar_context_sca: true,
                ffn_width: 32,
                fuse_once: false,
                radar_context_bev_splat: false,
                share_attention_params: false,
            },
            radar_occ_softmax: false,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                steps: 300,
                seed: 0,
                weight_decay: 1e-4,
                eval_every: 50,
            },
            scene_source: SceneSource::SameRay { d_near: 8.0, d_far: 16.0, azimuth: 0.0 },
        }
    }

    /// Benchmark default used by `train`/`ablate` when no config is given.
    pub fn bench_default() -> Self {
        FileConfig {
            cameras: presets::bench_rig().cameras,
            grid: presets::bench_grid(),
            bins: presets::bench_bins(),
            dims: DimsConfig {
                channels: 8,
                n_heads: 2,
                n_points: 4,
                trunk_width: 8,
                radar_feat: 8,
                classes: 4,
                column_stride: presets::COLUMN_STRIDE,
            },
            encoder: EncoderConfig {
                n_layers: 1,
                use_depth_sca: true,
                use_occupancy_sca: true,
                use_radar_context_sca: true,
                ffn_width: 16,
                fuse_once: false,
                radar_context_bev_splat: false,
                share_attention_params: false,
            },
            radar_occ_softmax: false,
            optimizer: OptimizerConfig {
                lr: 3e-3,
                steps: 300,
                seed: 0,
                weight_decay: 1e-4,
                eval_every: 50,
            },
            scene_source: SceneSource::Benchmark("table4".into()),
        }
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig { cameras: self.cameras.clone() }
    }

    /// Materialize the scene list.
    pub fn scenes(&self, rig: &CameraRig) -> Result<Vec<SceneSpec>> {
        Ok(match &self.scene_source {
            SceneSource::SameRay { d_near, d_far, azimuth } => {
                vec![bevfuse_core::scene_sim::same_ray_scenario(
                    *d_near, *d_far, *azimuth, rig, &self.bins,
                )?]
            }
            SceneSource::Specs(specs) => {
                if specs.is_empty() {
                    bail!("scene_source.specs is empty");
                }
                specs.clone()
            }
            SceneSource::Benchmark(name) => match name.as_str() {
                "table4" => benchmark_scenes(rig, &self.bins)?,
                "same_ray_bench" => same_ray_benchmark(rig, &self.bins)?,
                other => bail!("unknown benchmark '{other}'"),
            },
        })
    }

    pub fn run_config(&self, seed_override: Option<u64>) -> Result<RunConfig> {
        let rig = self.rig();
        let scenes = self.scenes(&rig)?;
        let mut optimizer = self.optimizer.clone();
        if let Some(seed) = seed_override {
            optimizer.seed = seed;
        }
        let cfg = RunConfig {
            rig,
            grid: self.grid.clone(),
            bins: self.bins.clone(),
            dims: self.dims.clone().into(),
            encoder: self.encoder.clone(),
            radar_occ_softmax: self.radar_occ_softmax,
            optimizer,
            scenes,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Load the config file or fall back to a named default.
pub fn load_or_default(path: Option<&Path>, default: FileConfig) -> Result<FileConfig> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(default),
    }
}
