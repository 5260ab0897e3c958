//! The full gradient-check suite: every differentiable operation plus the
//! complete forward pass, each against central finite differences.
//!
//! Elementary ops must land under 1e-6, the attention kernels under 1e-5,
//! and the full pipeline under 1e-4. The `gradcheck` CLI command prints one
//! line per entry and fails if any entry misses its threshold.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    deform_attn_2d, deform_attn_3d_factored, deform_attn_3d_naive, DeformAttnParams,
    LiftedValueView, QueryRefs2d, QueryRefs3d, DEFAULT_NAIVE_BUDGET,
};
use crate::camera_stream::encode_images;
use crate::error::Result;
use crate::geometry::DepthBins;
use crate::gradcheck::grad_check;
use crate::loss::{depth_loss, occupancy_loss, segmentation_head_and_loss, SegHeadParams};
use crate::mlp::{Activation, MlpParams};
use crate::params::ParamStore;
use crate::presets;
use crate::radar_stream::{encode_pillars, voxelize_frustum, RadarEncoderParams, RadarPoint, RadarPointCloud};
use crate::rng::{Stream, StreamId};
use crate::scene_sim::same_ray_scenario;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{model_forward, prepare_scene, OptimizerConfig, RunConfig};
use crate::view_transform::{compute_refs, EncoderConfig, ModelDims, ModelParams};

pub const ELEMENTARY_TOL: f64 = 1e-6;
pub const KERNEL_TOL: f64 = 1e-5;
pub const PIPELINE_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub checked_entries: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

fn probe_sum(t: &mut Tape, out: Var, probe: Tensor) -> Result<Var> {
    let p = t.leaf(probe);
    let prod = t.mul(out, p)?;
    Ok(t.sum_all(prod))
}

/// Run every check; deterministic in `seed`.
pub fn full_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    let mut push = |entries: &mut Vec<SuiteEntry>,
                    name: &str,
                    tol: f64,
                    rep: crate::gradcheck::GradCheckReport| {
        entries.push(SuiteEntry {
            name: String::from(name),
            max_rel_error: rep.max_rel_error,
            threshold: tol,
            checked_entries: rep.checked_entries,
        });
    };
    let mut s = Stream::new(seed, StreamId::Instances);

    // matmul
    {
        let a = Tensor::rand_uniform(&[5, 7], -1.0, 1.0, &mut s);
        let b = Tensor::rand_uniform(&[7, 3], -1.0, 1.0, &mut s);
        let probe = Tensor::rand_uniform(&[5, 3], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.matmul(vs[0], vs[1])?;
                probe_sum(t, y, probe.clone())
            },
            &[a, b],
            1e-6,
        )?;
        push(&mut entries, "matmul", ELEMENTARY_TOL, rep);
    }
    // softmax
    {
        let x = Tensor::rand_uniform(&[3, 6], -2.0, 2.0, &mut s);
        let probe = Tensor::rand_uniform(&[3, 6], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.softmax(vs[0], 1)?;
                probe_sum(t, y, probe.clone())
            },
            &[x],
            1e-6,
        )?;
        push(&mut entries, "softmax", ELEMENTARY_TOL, rep);
    }
    // elementwise chain: relu(sigmoid(x) * y + x)
    {
        let x = Tensor::rand_uniform(&[24], -2.0, 2.0, &mut s);
        let y = Tensor::rand_uniform(&[24], -2.0, 2.0, &mut s);
        let probe = Tensor::rand_uniform(&[24], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let sg = t.sigmoid(vs[0]);
                let m = t.mul(sg, vs[1])?;
                let a = t.add(m, vs[0])?;
                let r = t.relu(a);
                probe_sum(t, r, probe.clone())
            },
            &[x, y],
            1e-6,
        )?;
        push(&mut entries, "elementwise(relu,sigmoid,add,mul)", ELEMENTARY_TOL, rep);
    }
    // reductions: mean of squared values
    {
        let x = Tensor::rand_uniform(&[3, 5], -2.0, 2.0, &mut s);
        let rep = grad_check(
            &|t: &mut Tape, vs: &[Var]| {
                let sq = t.mul(vs[0], vs[0])?;
                Ok(t.mean_all(sq))
            },
            &[x],
            1e-6,
        )?;
        push(&mut entries, "reductions(sum,mean)", ELEMENTARY_TOL, rep);
    }
    // bilinear sample (map + coordinates)
    {
        let map = Tensor::rand_uniform(&[3, 6, 7], -1.0, 1.0, &mut s);
        let uv = Tensor::new(&[2], vec![2.37, 3.61]).unwrap();
        let probe = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.bilinear_sample(vs[0], vs[1])?;
                probe_sum(t, y, probe.clone())
            },
            &[map, uv],
            1e-6,
        )?;
        push(&mut entries, "bilinear_sample", ELEMENTARY_TOL, rep);
    }
    // trilinear sample
    {
        let map = Tensor::rand_uniform(&[2, 4, 5, 6], -1.0, 1.0, &mut s);
        let udv = Tensor::new(&[3], vec![1.43, 2.29, 1.37]).unwrap();
        let probe = Tensor::rand_uniform(&[2], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.trilinear_sample(vs[0], vs[1])?;
                probe_sum(t, y, probe.clone())
            },
            &[map, udv],
            1e-6,
        )?;
        push(&mut entries, "trilinear_sample", ELEMENTARY_TOL, rep);
    }
    // conv2d_lite
    {
        let map = Tensor::rand_uniform(&[2, 4, 5], -1.0, 1.0, &mut s);
        let kernel = Tensor::rand_uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut s);
        let probe = Tensor::rand_uniform(&[3, 4, 5], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.conv2d_lite(vs[0], vs[1])?;
                probe_sum(t, y, probe.clone())
            },
            &[map, kernel],
            1e-6,
        )?;
        push(&mut entries, "conv2d_lite", ELEMENTARY_TOL, rep);
    }
    // layer norm
    {
        let x = Tensor::rand_uniform(&[4, 6], -2.0, 2.0, &mut s);
        let gamma = Tensor::rand_uniform(&[6], 0.5, 1.5, &mut s);
        let beta = Tensor::rand_uniform(&[6], -0.5, 0.5, &mut s);
        let probe = Tensor::rand_uniform(&[4, 6], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.layer_norm_rows(vs[0], vs[1], vs[2], 1e-6)?;
                probe_sum(t, y, probe.clone())
            },
            &[x, gamma, beta],
            1e-6,
        )?;
        push(&mut entries, "layer_norm", ELEMENTARY_TOL, rep);
    }
    // mlp
    {
        let mut store = ParamStore::new();
        let mut ps = Stream::new(seed ^ 0x11, StreamId::Params);
        let mlp = MlpParams::new(&mut store, "suite_mlp", &[4, 8, 3], Activation::Identity, &mut ps)?;
        let x = Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut s);
        let probe = Tensor::rand_uniform(&[5, 3], -1.0, 1.0, &mut s);
        let mut tensors = store.tensors();
        tensors.push(x);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = mlp.forward(t, &vs[..vs.len() - 1], vs[vs.len() - 1])?;
                probe_sum(t, y, probe.clone())
            },
            &tensors,
            1e-6,
        )?;
        push(&mut entries, "mlp", ELEMENTARY_TOL, rep);
    }
    // losses
    {
        let bins = DepthBins { d_min: 0.5, d_max: 10.5, count: 5 };
        let pred = Tensor::rand_uniform(&[1, 5, 2, 3], 0.05, 0.95, &mut s);
        let depth_img =
            Tensor::new(&[2, 3], vec![2.0, 4.0, f64::INFINITY, 7.0, 9.0, 1.0]).unwrap();
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| depth_loss(t, vs[0], &[depth_img.clone()], &bins),
            &[pred],
            1e-6,
        )?;
        push(&mut entries, "depth_loss", ELEMENTARY_TOL, rep);
    }
    {
        let pred = Tensor::rand_uniform(&[1, 1, 3, 3], 0.1, 0.9, &mut s);
        let mut heat = Tensor::zeros(&[3, 3]);
        heat.data[4] = 1.0;
        heat.data[2] = 0.4;
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| occupancy_loss(t, vs[0], &[heat.clone()]),
            &[pred],
            1e-6,
        )?;
        push(&mut entries, "occupancy_loss", ELEMENTARY_TOL, rep);
    }
    {
        let mut store = ParamStore::new();
        let mut ps = Stream::new(seed ^ 0x13, StreamId::Params);
        let head = SegHeadParams::new(&mut store, 3, 3, &mut ps);
        store.nudge_zeros(0.05, &mut ps);
        let feat = Tensor::rand_uniform(&[3, 3, 4], -1.0, 1.0, &mut s);
        let mut labels = Tensor::zeros(&[3, 4]);
        for (i, v) in labels.data.iter_mut().enumerate() {
            *v = (i % 3) as f64;
        }
        let mut tensors = store.tensors();
        tensors.push(feat);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let (_, loss) = segmentation_head_and_loss(
                    t,
                    &vs[..vs.len() - 1],
                    vs[vs.len() - 1],
                    &labels,
                    &head,
                )?;
                Ok(loss)
            },
            &tensors,
            1e-6,
        )?;
        push(&mut entries, "segmentation_loss", ELEMENTARY_TOL, rep);
    }
    // stream encoders
    {
        let mut store = ParamStore::new();
        let mut ps = Stream::new(seed ^ 0x17, StreamId::Params);
        let params = crate::camera_stream::CameraEncoderParams::new(&mut store, 3, 4, 4, &mut ps);
        store.nudge_zeros(0.05, &mut ps);
        let img = Tensor::rand_uniform(&[3, 5, 6], 0.0, 1.0, &mut s);
        let probe_d = Tensor::rand_uniform(&[1, 4, 5, 6], -1.0, 1.0, &mut s);
        let probe_o = Tensor::rand_uniform(&[1, 1, 5, 6], -1.0, 1.0, &mut s);
        let probe_c = Tensor::rand_uniform(&[1, 4, 5, 6], -1.0, 1.0, &mut s);
        let tensors = store.tensors();
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let out = encode_images(t, vs, &[img.clone()], &params)?;
                let a = probe_sum(t, out.context, probe_c.clone())?;
                let b = probe_sum(t, out.depth, probe_d.clone())?;
                let c = probe_sum(t, out.occupancy, probe_o.clone())?;
                let ab = t.add(a, b)?;
                t.add(ab, c)
            },
            &tensors,
            1e-6,
        )?;
        push(&mut entries, "camera_encoder", ELEMENTARY_TOL, rep);
    }
    {
        let mut store = ParamStore::new();
        let mut ps = Stream::new(seed ^ 0x19, StreamId::Params);
        let params = RadarEncoderParams::new(&mut store, 8, 6, false, &mut ps)?;
        store.nudge_zeros(0.05, &mut ps);
        let rig = presets::micro_rig();
        let bins = DepthBins { d_min: 0.5, d_max: 12.5, count: 4 };
        let cloud = RadarPointCloud {
            points: vec![
                RadarPoint { pos: [5.0, 0.3, 0.5], rcs: 12.0, vel: [2.0, 0.0], sweep: 0 },
                RadarPoint { pos: [7.8, 0.2, 0.9], rcs: 6.0, vel: [-1.0, 0.5], sweep: 1 },
                RadarPoint { pos: [10.0, -2.0, 0.4], rcs: 15.0, vel: [0.0, 1.0], sweep: 3 },
            ],
        };
        let pillars = voxelize_frustum(&cloud, &rig, 0, &bins, 4);
        let tensors = store.tensors();
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let out = encode_pillars(t, vs, &[pillars.clone()], &params)?;
                let a = t.sum_all(out.r_o);
                let b = t.sum_all(out.r_c);
                t.add(a, b)
            },
            &tensors,
            1e-6,
        )?;
        push(&mut entries, "radar_encoder", ELEMENTARY_TOL, rep);
    }
    // attention kernels
    {
        let (c, heads, points) = (4, 2, 2);
        let mut store = ParamStore::new();
        let mut ps = Stream::new(seed ^ 0x23, StreamId::Params);
        let params = DeformAttnParams::new(&mut store, "suite_2d", c, heads, points, 2, &mut ps)?;
        store.nudge_zeros(0.3, &mut ps);
        let value = Tensor::rand_uniform(&[c, 6, 7], -1.0, 1.0, &mut s);
        let queries = Tensor::rand_uniform(&[4, c], -1.0, 1.0, &mut s);
        let refs = QueryRefs2d {
            refs: vec![[1.37, 2.61], [3.23, 1.79], [4.41, 3.57], [2.19, 2.83]],
            visible: vec![true, true, false, true],
        };
        let probe = Tensor::rand_uniform(&[4, c], -1.0, 1.0, &mut s);
        let mut tensors = store.tensors();
        tensors.push(value);
        tensors.push(queries);
        let params2 = params.clone();
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let n = vs.len();
                let av = params2.vars(&vs[..n - 2]);
                let out = deform_attn_2d(t, vs[n - 2], 0, vs[n - 1], &refs, &params2, &av)?;
                probe_sum(t, out, probe.clone())
            },
            &tensors,
            1e-6,
        )?;
        push(&mut entries, "deform_attn_2d", KERNEL_TOL, rep);
    }
    for naive in [false, true] {
        let (c, heads, points) = (4, 2, 2);
        let mut store = ParamStore::new();
        let mut ps = Stream::new(seed ^ 0x29, StreamId::Params);
        let params = DeformAttnParams::new(
            &mut store,
            if naive { "suite_3dn" } else { "suite_3df" },
            c,
            heads,
            points,
            3,
            &mut ps,
        )?;
        store.nudge_zeros(0.3, &mut ps);
        let context = Tensor::rand_uniform(&[1, c, 5, 6], -1.0, 1.0, &mut s);
        let weight = Tensor::rand_uniform(&[1, 4, 5, 6], 0.05, 0.95, &mut s);
        let queries = Tensor::rand_uniform(&[3, c], -1.0, 1.0, &mut s);
        let refs = QueryRefs3d {
            refs: vec![[1.43, 2.29, 1.37], [3.19, 1.61, 2.23], [2.57, 3.07, 0.71]],
            visible: vec![true; 3],
        };
        let probe = Tensor::rand_uniform(&[3, c], -1.0, 1.0, &mut s);
        let mut tensors = store.tensors();
        tensors.push(context);
        tensors.push(weight);
        tensors.push(queries);
        let params2 = params.clone();
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let n = vs.len();
                let av = params2.vars(&vs[..n - 3]);
                let lifted = LiftedValueView { context: vs[n - 3], depth_weight: vs[n - 2] };
                let out = if naive {
                    deform_attn_3d_naive(
                        t,
                        lifted,
                        0,
                        vs[n - 1],
                        &refs,
                        &params2,
                        &av,
                        DEFAULT_NAIVE_BUDGET,
                    )?
                } else {
                    deform_attn_3d_factored(t, lifted, 0, vs[n - 1], &refs, &params2, &av)?
                };
                probe_sum(t, out, probe.clone())
            },
            &tensors,
            1e-6,
        )?;
        push(
            &mut entries,
            if naive { "deform_attn_3d_naive" } else { "deform_attn_3d_factored" },
            KERNEL_TOL,
            rep,
        );
    }
    // full pipeline: config D forward + total loss on the micro scene
    {
        let rig = presets::micro_rig();
        let grid = presets::micro_grid();
        let bins = presets::micro_bins();
        let dims = ModelDims {
            channels: 4,
            n_heads: 2,
            n_points: 2,
            trunk_width: 3,
            radar_feat: 6,
            classes: 3,
            column_stride: 4,
        };
        let encoder = EncoderConfig::ablation('D', 1, 8)?;
        let mut spec = same_ray_scenario(8.0, 16.0, 0.0, &rig, &bins)?;
        spec.returns_per_object = 1;
        let cfg = RunConfig {
            rig,
            grid,
            bins,
            dims,
            encoder: encoder.clone(),
            radar_occ_softmax: false,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                steps: 1,
                seed,
                weight_decay: 0.0,
                eval_every: 1,
            },
            scenes: vec![spec.clone()],
        };
        let mut store = ParamStore::new();
        let mut ps = Stream::new(seed ^ 0x31, StreamId::Params);
        let model =
            ModelParams::new(&mut store, dims, &encoder, &cfg.grid, &cfg.bins, false, &mut ps)?;
        store.nudge_zeros(0.03, &mut ps);
        let refs = compute_refs(&cfg.rig, &cfg.grid, &cfg.bins, dims.column_stride);
        let scene = prepare_scene(&spec, &cfg)?;
        let tensors = store.tensors();
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let out = model_forward(t, vs, &model, &cfg, &scene, &refs, None)?;
                Ok(out.total)
            },
            &tensors,
            1e-6,
        )?;
        push(&mut entries, "full_pipeline_config_d", PIPELINE_TOL, rep);
    }
    Ok(entries)
}
