//! `demo`: generate the configured scene, run the view transform with
//! oracle streams, and dump the staged BEV maps plus scene fixtures.

use anyhow::{bail, Context, Result};
use std::path::{Path, PathBuf};

use bevfuse_core::camera_stream::{ideal_image_outputs, ImageStreamOutput};
use bevfuse_core::params::ParamStore;
use bevfuse_core::radar_stream::{ideal_radar_outputs, voxelize_frustum, RadarStreamOutput};
use bevfuse_core::rng::{Stream, StreamId};
use bevfuse_core::scene_sim::generate_scene;
use bevfuse_core::tape::Tape;
use bevfuse_core::train::RunConfig;
use bevfuse_core::view_transform::{
    cell_feature_norm, compute_refs, encoder_forward, frustum_to_bev_assignments,
    ray_separation_score, BevState, EncoderConfig, EncoderInputs, ModelParams,
};

use crate::config::FileConfig;
use crate::io;

pub struct DemoArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub radar_csv: Option<PathBuf>,
}

pub fn run(args: &DemoArgs) -> Result<()> {
    let file_cfg = crate::config::load_or_default(args.config.as_deref(), FileConfig::desk_default())?;
    let cfg: RunConfig = file_cfg.run_config(args.seed)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let spec = &cfg.scenes[0];
    let data = generate_scene(spec, &cfg.rig, &cfg.grid).map_err(|e| anyhow::anyhow!("{e}"))?;

    // Scene fixtures.
    std::fs::write(
        args.out.join("scene.json"),
        serde_json::to_string_pretty(spec)?,
    )?;
    for (n, img) in data.images.iter().enumerate() {
        io::write_pgm(&args.out.join(format!("cam{n}.pgm")), &io::channel_mean(img))?;
    }
    let cloud = match &args.radar_csv {
        Some(path) => io::read_radar_csv(path)?,
        None => data.accumulated_cloud(),
    };
    io::write_radar_csv(&args.out.join("radar.csv"), &cloud)?;
    io::write_pgm(&args.out.join("gt_bev.pgm"), &data.gt.bev_class)?;

    // Oracle streams.
    let ideal_img = ideal_image_outputs(&data.gt, &cfg.bins, cfg.dims.channels)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let ideal_radar = ideal_radar_outputs(
        &cloud,
        &cfg.rig,
        &cfg.bins,
        cfg.dims.channels,
        cfg.dims.column_stride,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    // Model parameters (untrained, seeded).
    let mut store = ParamStore::new();
    let mut ps = Stream::new(cfg.optimizer.seed, StreamId::Params);
    let model = ModelParams::new(
        &mut store,
        cfg.dims,
        &cfg.encoder,
        &cfg.grid,
        &cfg.bins,
        cfg.radar_occ_softmax,
        &mut ps,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let refs = compute_refs(&cfg.rig, &cfg.grid, &cfg.bins, cfg.dims.column_stride);
    let splat_data = if cfg.encoder.radar_context_bev_splat {
        Some(frustum_to_bev_assignments(&cfg.rig, &cfg.grid, &cfg.bins, cfg.dims.column_stride))
    } else {
        None
    };

    let run_encoder = |enc_cfg: &EncoderConfig| -> Result<(BevState, Tape)> {
        let mut tape = Tape::new();
        let vars = store.leaves(&mut tape);
        let img = ImageStreamOutput {
            context: tape.leaf(ideal_img.context.clone()),
            depth: tape.leaf(ideal_img.depth.clone()),
            occupancy: tape.leaf(ideal_img.occupancy.clone()),
        };
        let radar = RadarStreamOutput {
            r_o: tape.leaf(ideal_radar.r_o.clone()),
            r_c: tape.leaf(ideal_radar.r_c.clone()),
        };
        let inputs = EncoderInputs {
            refs: &refs,
            grid: &cfg.grid,
            bins: &cfg.bins,
            splat: splat_data.as_ref(),
        };
        let state = encoder_forward(&mut tape, &vars, &model, enc_cfg, &img, Some(&radar), &inputs)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok((state, tape))
    };

    let (state, tape) = run_encoder(&cfg.encoder)?;
    let dump = |name: &str, var: Option<bevfuse_core::tape::Var>| -> Result<()> {
        if let Some(v) = var {
            let map = io::bev_norm_map(tape.value(v), cfg.grid.x_cells, cfg.grid.y_cells);
            io::write_pgm(&args.out.join(name), &map)?;
        }
        Ok(())
    };
    dump("b_i.pgm", state.b_i)?;
    dump("b_r.pgm", state.b_r)?;
    dump("b_ir.pgm", Some(state.b_ir))?;
    dump("b_encoded.pgm", Some(state.b_encoded))?;

    // Depth-only comparison on the same parameters.
    let depth_only = EncoderConfig {
        use_occupancy_sca: false,
        use_radar_context_sca: false,
        ..cfg.encoder.clone()
    };
    let (state_a, tape_a) = run_encoder(&depth_only)?;

    let mut metrics = serde_json::Map::new();
    let hit = state.hit_mask.iter().filter(|&&m| m).count();
    metrics.insert("hit_cells".into(), hit.into());
    metrics.insert("miss_cells".into(), (cfg.grid.cells() - hit).into());
    metrics.insert("radar_points".into(), cloud.len().into());
    let dropped: usize = (0..cfg.rig.len())
        .map(|cam| {
            voxelize_frustum(&cloud, &cfg.rig, cam, &cfg.bins, cfg.dims.column_stride).dropped
        })
        .sum();
    metrics.insert("radar_points_dropped_all_cams".into(), dropped.into());

    if spec.objects.len() >= 2 {
        let cell = |k: usize| {
            let o = &spec.objects[k];
            cfg.grid
                .cell_of(o.center[0], o.center[1])
                .map(|(i, j)| cfg.grid.cell_index(i, j))
        };
        if let (Some(a), Some(b)) = (cell(0), cell(1)) {
            let enc_full = tape.value(state.b_encoded);
            let enc_a = tape_a.value(state_a.b_encoded);
            let (score_full, _) = ray_separation_score(enc_full, a, b);
            let (score_depth, _) = ray_separation_score(enc_a, a, b);
            let json_f = |v: f64| serde_json::Number::from_f64(v).map(serde_json::Value::Number);
            if let Some(v) = json_f(score_full) {
                metrics.insert("ray_sep_full".into(), v);
            }
            if let Some(v) = json_f(score_depth) {
                metrics.insert("ray_sep_depth_only".into(), v);
            }
            if let Some(v) = json_f(cell_feature_norm(enc_a, a)) {
                metrics.insert("norm_near_depth_only".into(), v);
            }
            if let Some(v) = json_f(cell_feature_norm(enc_a, b)) {
                metrics.insert("norm_far_depth_only".into(), v);
            }
        }
    }
    let metrics_path = args.out.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
    println!("demo artifacts written to {}", args.out.display());
    Ok(())
}

pub fn out_dir_of(path: &Path) -> &Path {
    path
}

pub fn ensure_scene_has_objects(cfg: &RunConfig) -> Result<()> {
    if cfg.scenes.is_empty() {
        bail!("demo needs at least one scene");
    }
    Ok(())
}
