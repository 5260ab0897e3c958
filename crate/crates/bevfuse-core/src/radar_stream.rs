//! Radar stream: sweep accumulation, frustum voxelization, and the pillar
//! encoder producing frustum occupancy R_O and context R_C.
//!
//! Radar points carry range information the camera cannot recover, so the
//! frustum grid is indexed by (image column, depth bin) with height
//! collapsed; z survives only as a per-point feature.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::geometry::{CameraRig, DepthBins};
use crate::mlp::{Activation, MlpParams};
use crate::params::{ParamRef, ParamStore};
use crate::rng::{Stream, StreamId};
use crate::tape::{BackwardCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

pub const POINT_FEATURES: usize = 7;

/// One radar return in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    pub pos: [f64; 3],
    /// Radar cross section, dBsm.
    pub rcs: f64,
    /// Doppler velocity components, m/s.
    pub vel: [f64; 2],
    /// 0 = current sweep, 1..6 = previous sweeps.
    pub sweep: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RadarPointCloud {
    pub points: Vec<RadarPoint>,
}

impl RadarPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Ego pose at a sweep time, expressed in the current ego frame.
#[derive(Debug, Clone, Copy)]
pub struct EgoPose {
    pub rel_pos: [f64; 2],
    pub rel_yaw: f64,
}

impl EgoPose {
    pub fn identity() -> Self {
        EgoPose { rel_pos: [0.0, 0.0], rel_yaw: 0.0 }
    }
}

/// Transform all sweeps into the current ego frame, keeping sweep indices as
/// features.
pub fn accumulate_sweeps(
    sweeps: &[RadarPointCloud],
    ego_poses: &[EgoPose],
) -> Result<RadarPointCloud> {
    if sweeps.len() > 7 {
        return Err(CoreError::Config {
            detail: format!("at most 7 sweeps supported, got {}", sweeps.len()),
        });
    }
    if ego_poses.len() != sweeps.len() {
        return Err(CoreError::Config {
            detail: format!("{} sweeps but {} ego poses", sweeps.len(), ego_poses.len()),
        });
    }
    let mut out = RadarPointCloud::default();
    for (cloud, pose) in sweeps.iter().zip(ego_poses) {
        let (s, c) = (crate::mathf::sin(pose.rel_yaw), crate::mathf::cos(pose.rel_yaw));
        for p in &cloud.points {
            let x = c * p.pos[0] - s * p.pos[1] + pose.rel_pos[0];
            let y = s * p.pos[0] + c * p.pos[1] + pose.rel_pos[1];
            let vx = c * p.vel[0] - s * p.vel[1];
            let vy = s * p.vel[0] + c * p.vel[1];
            out.points.push(RadarPoint {
                pos: [x, y, p.pos[2]],
                rcs: p.rcs,
                vel: [vx, vy],
                sweep: p.sweep,
            });
        }
    }
    Ok(out)
}

/// One point assigned to a frustum pillar.
#[derive(Debug, Clone, Copy)]
pub struct PillarPoint {
    /// (u offset in column, d offset in bin, z, rcs, vx, vy, sweep)
    pub feat: [f64; POINT_FEATURES],
    pub point_index: usize,
}

/// Frustum voxelization of one camera: (column, depth bin) -> points.
#[derive(Debug, Clone)]
pub struct FrustumPillars {
    pub cols: usize,
    pub bins: usize,
    pub column_stride: usize,
    pub pillars: BTreeMap<(usize, usize), Vec<PillarPoint>>,
    pub placed: usize,
    pub dropped: usize,
}

impl FrustumPillars {
    pub fn total_points(&self) -> usize {
        self.pillars.values().map(|v| v.len()).sum()
    }
}

/// Drop each visible point into exactly one (column, depth-bin) pillar.
/// Height is collapsed; out-of-frustum points are counted, not silently lost.
pub fn voxelize_frustum(
    cloud: &RadarPointCloud,
    rig: &CameraRig,
    cam: usize,
    bins: &DepthBins,
    column_stride: usize,
) -> FrustumPillars {
    let camera = &rig.cameras[cam];
    let (_, w) = camera.hw;
    let cols = w / column_stride;
    let mut out = FrustumPillars {
        cols,
        bins: bins.count,
        column_stride,
        pillars: BTreeMap::new(),
        placed: 0,
        dropped: 0,
    };
    for (idx, p) in cloud.points.iter().enumerate() {
        let pc = camera.ego_to_cam(p.pos);
        let d = pc[2];
        if d <= 1e-9 || !bins.contains(d) {
            out.dropped += 1;
            continue;
        }
        let u = camera.fx * pc[0] / d + camera.cx;
        if !(0.0..=(w - 1) as f64).contains(&u) {
            out.dropped += 1;
            continue;
        }
        let col = ((u / column_stride as f64) as usize).min(cols - 1);
        let bin = bins.bin_of(d);
        let u_off = u / column_stride as f64 - col as f64;
        let d_off = (d - bins.d_min) / bins.width() - bin as f64;
        out.pillars.entry((col, bin)).or_default().push(PillarPoint {
            feat: [u_off, d_off, pc[1], p.rcs, p.vel[0], p.vel[1], p.sweep as f64],
            point_index: idx,
        });
        out.placed += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// pillar encoder ops

struct PillarMaxPoolOp {
    points: Var,
    ranges: Vec<(usize, usize)>,
    feat: usize,
}

impl TapeOp for PillarMaxPoolOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let pv = ctx.value(self.points).data.clone();
        let dp = ctx.grad_mut(self.points);
        for (pi, &(start, end)) in self.ranges.iter().enumerate() {
            for f in 0..self.feat {
                // first-maximum tie rule, matching the forward pass
                let mut best = start;
                let mut bv = pv[start * self.feat + f];
                for r in start + 1..end {
                    let v = pv[r * self.feat + f];
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                dp[best * self.feat + f] += g[pi * self.feat + f];
            }
        }
    }
}

struct ScatterPillarsOp {
    pooled: Var,
    coords: Vec<(usize, usize)>,
    feat: usize,
    bins: usize,
    cols: usize,
}

impl TapeOp for ScatterPillarsOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let dp = ctx.grad_mut(self.pooled);
        let plane = self.bins * self.cols;
        for (pi, &(col, bin)) in self.coords.iter().enumerate() {
            for f in 0..self.feat {
                dp[pi * self.feat + f] += g[f * plane + bin * self.cols + col];
            }
        }
    }
}

impl Tape {
    /// Per-pillar max over contiguous point ranges of a [P, F] tensor.
    fn pillar_max_pool(&mut self, points: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let shape = self.value(points).shape.clone();
        if shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "pillar_max_pool",
                detail: format!("{shape:?}"),
            });
        }
        let feat = shape[1];
        let pv = &self.value(points).data;
        let mut data = vec![0.0; ranges.len() * feat];
        for (pi, &(start, end)) in ranges.iter().enumerate() {
            debug_assert!(end > start);
            for f in 0..feat {
                let mut bv = pv[start * feat + f];
                for r in start + 1..end {
                    bv = bv.max(pv[r * feat + f]);
                }
                data[pi * feat + f] = bv;
            }
        }
        let t = Tensor { shape: vec![ranges.len(), feat], data };
        Ok(self.push_op(
            t,
            Box::new(PillarMaxPoolOp { points, ranges: ranges.to_vec(), feat }),
        ))
    }

    /// Scatter pooled pillar rows [P, F] onto an [F, D, W] plane.
    fn scatter_pillars(
        &mut self,
        pooled: Var,
        coords: &[(usize, usize)],
        bins: usize,
        cols: usize,
    ) -> Result<Var> {
        let shape = self.value(pooled).shape.clone();
        if shape.len() != 2 || shape[0] != coords.len() {
            return Err(CoreError::ShapeMismatch {
                op: "scatter_pillars",
                detail: format!("{shape:?} vs {} coords", coords.len()),
            });
        }
        let feat = shape[1];
        let plane = bins * cols;
        let pv = &self.value(pooled).data;
        let mut data = vec![0.0; feat * plane];
        for (pi, &(col, bin)) in coords.iter().enumerate() {
            for f in 0..feat {
                data[f * plane + bin * cols + col] = pv[pi * feat + f];
            }
        }
        let t = Tensor { shape: vec![feat, bins, cols], data };
        Ok(self.push_op(
            t,
            Box::new(ScatterPillarsOp { pooled, coords: coords.to_vec(), feat, bins, cols }),
        ))
    }
}

// ---------------------------------------------------------------------------
// encoder

/// PointNet-lite + conv stack over the (D, W_cols) plane.
#[derive(Debug, Clone)]
pub struct RadarEncoderParams {
    pub feat: usize,
    pub channels: usize,
    pub point_mlp: MlpParams,
    pub conv1: ParamRef,
    pub conv1_bias: ParamRef,
    pub conv2: ParamRef,
    pub conv2_bias: ParamRef,
    pub ctx_head: ParamRef,
    pub ctx_bias: ParamRef,
    pub occ_head: ParamRef,
    pub occ_bias: ParamRef,
    /// Softmax over depth bins instead of per-cell sigmoid (ablation flag).
    pub occ_softmax: bool,
}

impl RadarEncoderParams {
    pub fn new(
        store: &mut ParamStore,
        feat: usize,
        channels: usize,
        occ_softmax: bool,
        stream: &mut Stream,
    ) -> Result<Self> {
        let point_mlp = MlpParams::new(
            store,
            "radar.point_mlp",
            &[POINT_FEATURES, feat, feat],
            Activation::Relu,
            stream,
        )?;
        Ok(RadarEncoderParams {
            feat,
            channels,
            point_mlp,
            conv1: store.register_uniform("radar.conv1".into(), &[feat, feat, 3, 3], feat * 9, stream),
            conv1_bias: store.register_zeros("radar.conv1_bias".into(), &[feat]),
            conv2: store.register_uniform("radar.conv2".into(), &[feat, feat, 3, 3], feat * 9, stream),
            conv2_bias: store.register_zeros("radar.conv2_bias".into(), &[feat]),
            ctx_head: store.register_uniform(
                "radar.ctx_head".into(),
                &[channels, feat, 3, 3],
                feat * 9,
                stream,
            ),
            ctx_bias: store.register_zeros("radar.ctx_bias".into(), &[channels]),
            occ_head: store.register_uniform(
                "radar.occ_head".into(),
                &[1, feat, 3, 3],
                feat * 9,
                stream,
            ),
            occ_bias: store.register_zeros("radar.occ_bias".into(), &[1]),
            occ_softmax,
        })
    }
}

/// Frustum occupancy R_O [N, D, 1, W] and context R_C [N, C, D, W] on tape.
#[derive(Debug, Clone, Copy)]
pub struct RadarStreamOutput {
    pub r_o: Var,
    pub r_c: Var,
}

/// Normalize raw pillar point features for the MLP.
fn normalize_feat(f: &[f64; POINT_FEATURES]) -> [f64; POINT_FEATURES] {
    [f[0], f[1], f[2] / 3.0, f[3] / 30.0, f[4] / 10.0, f[5] / 10.0, f[6] / 6.0]
}

/// Encode per-camera pillars into R_O and R_C.
///
/// Empty pillars contribute zeros before the conv stack, so with zero biases
/// an empty frustum yields a bias-determined constant occupancy.
pub fn encode_pillars(
    tape: &mut Tape,
    vars: &[Var],
    per_camera: &[FrustumPillars],
    params: &RadarEncoderParams,
) -> Result<RadarStreamOutput> {
    let mut r_o_cams = Vec::new();
    let mut r_c_cams = Vec::new();
    for pillars in per_camera {
        let (d, w) = (pillars.bins, pillars.cols);
        let plane = if pillars.pillars.is_empty() {
            tape.leaf(Tensor::zeros(&[params.feat, d, w]))
        } else {
            let mut rows = Vec::new();
            let mut ranges = Vec::new();
            let mut coords = Vec::new();
            for (&(col, bin), pts) in &pillars.pillars {
                let start = rows.len() / POINT_FEATURES;
                for p in pts {
                    rows.extend_from_slice(&normalize_feat(&p.feat));
                }
                ranges.push((start, rows.len() / POINT_FEATURES));
                coords.push((col, bin));
            }
            let n_pts = rows.len() / POINT_FEATURES;
            let pts = tape.leaf(Tensor::new(&[n_pts, POINT_FEATURES], rows)?);
            let feats = params.point_mlp.forward(tape, vars, pts)?;
            let pooled = tape.pillar_max_pool(feats, &ranges)?;
            tape.scatter_pillars(pooled, &coords, d, w)?
        };
        let h1 = tape.conv2d_lite(plane, params.conv1.var(vars))?;
        let h1 = tape.add_chan_bias(h1, params.conv1_bias.var(vars))?;
        let h1 = tape.relu(h1);
        let h2 = tape.conv2d_lite(h1, params.conv2.var(vars))?;
        let h2 = tape.add_chan_bias(h2, params.conv2_bias.var(vars))?;
        let h2 = tape.relu(h2);
        let ctx = tape.conv2d_lite(h2, params.ctx_head.var(vars))?;
        let ctx = tape.add_chan_bias(ctx, params.ctx_bias.var(vars))?;
        let occ = tape.conv2d_lite(h2, params.occ_head.var(vars))?;
        let occ = tape.add_chan_bias(occ, params.occ_bias.var(vars))?;
        let occ = if params.occ_softmax {
            // [1, D, W]: normalize over depth per column.
            tape.softmax(occ, 1)?
        } else {
            tape.sigmoid(occ)
        };
        let occ = tape.reshape(occ, &[d, 1, w])?;
        r_o_cams.push(occ);
        r_c_cams.push(ctx);
    }
    Ok(RadarStreamOutput {
        r_o: tape.stack(&r_o_cams)?,
        r_c: tape.stack(&r_c_cams)?,
    })
}

/// Idealized radar stream computed straight from the point cloud: occupancy
/// is the pillar indicator, context is a fixed projection of the pooled
/// (rcs, vx, vy) signature. Used by the oracle/demo paths; no learning.
pub struct IdealRadar {
    pub r_o: Tensor,
    pub r_c: Tensor,
}

pub const IDEAL_RADAR_CONTEXT_SCALE: f64 = 2.0;

pub fn ideal_radar_outputs(
    cloud: &RadarPointCloud,
    rig: &CameraRig,
    bins: &DepthBins,
    channels: usize,
    column_stride: usize,
) -> Result<IdealRadar> {
    let n = rig.len();
    let cols = rig.cameras[0].hw.1 / column_stride;
    let mut r_o = Tensor::zeros(&[n, bins.count, 1, cols]);
    let mut r_c = Tensor::zeros(&[n, channels, bins.count, cols]);
    // Fixed projection of the 4-d radar signature into the channel space.
    let mut ps = Stream::new(0xbe5f, StreamId::Probe);
    let proj = Tensor::rand_uniform(&[4, channels], -1.0, 1.0, &mut ps);
    for cam in 0..n {
        let pillars = voxelize_frustum(cloud, rig, cam, bins, column_stride);
        let plane = bins.count * cols;
        for (&(col, bin), pts) in &pillars.pillars {
            r_o.data[cam * plane + bin * cols + col] = 1.0;
            let inv = 1.0 / pts.len() as f64;
            let mut sig = [0.0f64; 4];
            for p in pts {
                sig[0] += p.feat[3] / 30.0 * inv;
                sig[1] += p.feat[4] / 10.0 * inv;
                sig[2] += p.feat[5] / 10.0 * inv;
            }
            sig[3] = 1.0;
            let mut emb = vec![0.0; channels];
            let mut norm = 0.0;
            for (c, e) in emb.iter_mut().enumerate() {
                for (k, s) in sig.iter().enumerate() {
                    *e += s * proj.data[k * channels + c];
                }
                norm += *e * *e;
            }
            let norm = crate::mathf::sqrt(norm).max(1e-9);
            for (c, e) in emb.iter().enumerate() {
                r_c.data[((cam * channels + c) * bins.count + bin) * cols + col] =
                    e / norm * IDEAL_RADAR_CONTEXT_SCALE;
            }
        }
    }
    Ok(IdealRadar { r_o, r_c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_camera, CameraRig};

    fn test_rig() -> CameraRig {
        CameraRig {
            cameras: vec![make_camera(48.0, 48.0, 48.0, 24.0, (48, 96), 0.0, [0.0, 0.0, 1.2])],
        }
    }

    fn bins() -> DepthBins {
        DepthBins { d_min: 0.5, d_max: 40.0, count: 32 }
    }

    fn point(pos: [f64; 3]) -> RadarPoint {
        RadarPoint { pos, rcs: 10.0, vel: [1.0, -0.5], sweep: 0 }
    }

    #[test]
    fn stationary_accumulation_doubles_points() {
        let sweep = RadarPointCloud {
            points: vec![point([5.0, 1.0, 0.5]), point([8.0, -2.0, 0.3])],
        };
        let out = accumulate_sweeps(
            &[sweep.clone(), sweep.clone()],
            &[EgoPose::identity(), EgoPose::identity()],
        )
        .unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.points[0].pos, out.points[2].pos);
    }

    #[test]
    fn forward_ego_motion_shifts_old_points_backward() {
        let sweep = RadarPointCloud { points: vec![point([5.0, 0.0, 0.5])] };
        // Previous sweep taken 1 m behind the current position.
        let out = accumulate_sweeps(
            &[sweep],
            &[EgoPose { rel_pos: [-1.0, 0.0], rel_yaw: 0.0 }],
        )
        .unwrap();
        assert!((out.points[0].pos[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sweeps_give_empty_cloud_and_pose_mismatch_errors() {
        let out = accumulate_sweeps(&[], &[]).unwrap();
        assert!(out.is_empty());
        let r = accumulate_sweeps(&[RadarPointCloud::default()], &[]);
        assert!(matches!(r, Err(CoreError::Config { .. })));
    }

    #[test]
    fn voxelization_bins_and_conserves_points() {
        let rig = test_rig();
        let b = bins();
        let cloud = RadarPointCloud {
            points: vec![
                point([8.0, 0.0, 0.5]),
                point([16.0, 0.0, 0.5]),   // same azimuth, farther
                point([10.0, 3.0, 0.0]),
                point([100.0, 0.0, 0.0]),  // beyond range: dropped
                point([-5.0, 0.0, 0.0]),   // behind: dropped
            ],
        };
        let p = voxelize_frustum(&cloud, &rig, 0, &b, 4);
        assert_eq!(p.placed + p.dropped, cloud.len());
        assert_eq!(p.dropped, 2);
        assert_eq!(p.total_points(), p.placed);

        // First point: principal column, bin floor((8 - 0.5)/Δ).
        let col = (48.0 / 4.0) as usize;
        let bin = b.bin_of(8.0);
        assert!(p.pillars.contains_key(&(col, bin)));
        // Two points on the same ray land in the same column, different bins.
        let far_bin = b.bin_of(16.0);
        assert_ne!(bin, far_bin);
        assert!(p.pillars.contains_key(&(col, far_bin)));
    }

    fn encoder_fixture(occ_softmax: bool) -> (ParamStore, RadarEncoderParams) {
        let mut store = ParamStore::new();
        let mut s = Stream::new(3, StreamId::Params);
        let params = RadarEncoderParams::new(&mut store, 8, 6, occ_softmax, &mut s).unwrap();
        (store, params)
    }

    #[test]
    fn empty_frustum_gives_bias_determined_occupancy() {
        let (store, params) = encoder_fixture(false);
        let rig = test_rig();
        let b = bins();
        let empty = voxelize_frustum(&RadarPointCloud::default(), &rig, 0, &b, 4);
        let mut tape = Tape::new();
        let vars = store.leaves(&mut tape);
        let out = encode_pillars(&mut tape, &vars, &[empty], &params).unwrap();
        // Zero biases + zero plane -> sigmoid(0) = 0.5 everywhere.
        assert_eq!(tape.value(out.r_o).shape, vec![1, 32, 1, 24]);
        for v in &tape.value(out.r_o).data {
            assert_eq!(*v, 0.5);
        }
        for v in &tape.value(out.r_c).data {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn output_shapes_match_contract() {
        let mut store = ParamStore::new();
        let mut s = Stream::new(4, StreamId::Params);
        let params = RadarEncoderParams::new(&mut store, 16, 16, false, &mut s).unwrap();
        let rig = CameraRig {
            cameras: vec![
                make_camera(48.0, 48.0, 48.0, 24.0, (48, 96), 0.0, [0.0, 0.0, 1.2]),
                make_camera(48.0, 48.0, 48.0, 24.0, (48, 96), 1.57, [0.0, 0.0, 1.2]),
            ],
        };
        let b = bins();
        let cloud = RadarPointCloud { points: vec![point([8.0, 0.5, 0.4])] };
        let pillars: Vec<_> =
            (0..2).map(|cam| voxelize_frustum(&cloud, &rig, cam, &b, 4)).collect();
        let mut tape = Tape::new();
        let vars = store.leaves(&mut tape);
        let out = encode_pillars(&mut tape, &vars, &pillars, &params).unwrap();
        assert_eq!(tape.value(out.r_o).shape, vec![2, 32, 1, 24]);
        assert_eq!(tape.value(out.r_c).shape, vec![2, 16, 32, 24]);
        // Occupancy is a probability.
        assert!(tape.value(out.r_o).data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn occupancy_softmax_flag_normalizes_columns() {
        let (store, params) = encoder_fixture(true);
        let rig = test_rig();
        let b = bins();
        let cloud = RadarPointCloud { points: vec![point([8.0, 0.0, 0.5])] };
        let pillars = voxelize_frustum(&cloud, &rig, 0, &b, 4);
        let mut tape = Tape::new();
        let vars = store.leaves(&mut tape);
        let out = encode_pillars(&mut tape, &vars, &[pillars], &params).unwrap();
        let t = tape.value(out.r_o);
        for col in 0..24 {
            let sum: f64 = (0..32).map(|d| t.data[d * 24 + col]).sum();
            assert!((sum - 1.0).abs() < 1e-12, "column {col} sums to {sum}");
        }
    }

    #[test]
    fn pillar_features_are_permutation_invariant() {
        let (store, params) = encoder_fixture(false);
        let rig = test_rig();
        let b = bins();
        let mut pts = vec![
            RadarPoint { pos: [8.0, 0.1, 0.5], rcs: 12.0, vel: [2.0, 0.0], sweep: 0 },
            RadarPoint { pos: [8.1, -0.1, 0.8], rcs: 7.0, vel: [-1.0, 0.5], sweep: 2 },
            RadarPoint { pos: [7.9, 0.0, 0.2], rcs: 20.0, vel: [0.5, -2.0], sweep: 5 },
        ];
        let run = |pts: &[RadarPoint]| {
            let cloud = RadarPointCloud { points: pts.to_vec() };
            let pillars = voxelize_frustum(&cloud, &rig, 0, &b, 4);
            let mut tape = Tape::new();
            let vars = store.leaves(&mut tape);
            let out = encode_pillars(&mut tape, &vars, &[pillars], &params).unwrap();
            (tape.value(out.r_o).clone(), tape.value(out.r_c).clone())
        };
        let (o1, c1) = run(&pts);
        pts.reverse();
        let (o2, c2) = run(&pts);
        assert_eq!(o1, o2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        // Singleton pillars keep the max-pool smooth; the multi-point pool
        // gradient is covered by pool_gradient_with_clear_margins below.
        // Zero biases would park empty plane cells exactly on the ReLU kink,
        // so check at a generic point.
        let (mut store, params) = encoder_fixture(false);
        let mut nudge = Stream::new(77, StreamId::Params);
        store.nudge_zeros(0.05, &mut nudge);
        let rig = test_rig();
        let b = DepthBins { d_min: 0.5, d_max: 12.0, count: 4 };
        let cloud = RadarPointCloud {
            points: vec![
                RadarPoint { pos: [5.0, 0.3, 0.5], rcs: 12.0, vel: [2.0, 0.0], sweep: 0 },
                RadarPoint { pos: [7.8, 0.2, 0.9], rcs: 6.0, vel: [-1.0, 0.5], sweep: 1 },
                RadarPoint { pos: [9.0, -2.0, 0.4], rcs: 15.0, vel: [0.0, 1.0], sweep: 3 },
            ],
        };
        let pillars = voxelize_frustum(&cloud, &rig, 0, &b, 8);
        assert!(pillars.placed == 3);
        assert!(pillars.pillars.values().all(|p| p.len() == 1));
        let tensors = store.tensors();
        let rep = crate::gradcheck::grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let out = encode_pillars(t, vs, &[pillars.clone()], &params)?;
                let a = t.sum_all(out.r_o);
                let bsum = t.sum_all(out.r_c);
                t.add(a, bsum)
            },
            &tensors,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }

    #[test]
    fn pool_gradient_with_clear_margins() {
        // Hand-built features with margins far above the perturbation step.
        let points = Tensor::new(
            &[4, 3],
            vec![1.0, 5.0, -2.0, 3.0, 0.5, -4.0, 2.0, 9.0, 1.0, -1.0, 2.0, 0.5],
        )
        .unwrap();
        let ranges = vec![(0usize, 3usize), (3usize, 4usize)];
        let probe = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.7, 1.1, 0.4, -0.6]).unwrap();
        let rep = crate::gradcheck::grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let pooled = t.pillar_max_pool(vs[0], &ranges)?;
                let p = t.leaf(probe.clone());
                let prod = t.mul(pooled, p)?;
                Ok(t.sum_all(prod))
            },
            &[points],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-9, "err {}", rep.max_rel_error);
    }

    #[test]
    fn ideal_radar_marks_pillar_occupancy() {
        let rig = test_rig();
        let b = bins();
        let cloud = RadarPointCloud {
            points: vec![point([8.0, 0.0, 0.5]), point([16.0, 0.0, 0.5])],
        };
        let ideal = ideal_radar_outputs(&cloud, &rig, &b, 6, 4).unwrap();
        let col = 12;
        let plane = 32 * 24;
        assert_eq!(ideal.r_o.data[b.bin_of(8.0) * 24 + col], 1.0);
        assert_eq!(ideal.r_o.data[b.bin_of(16.0) * 24 + col], 1.0);
        let occupied: f64 = ideal.r_o.data[..plane].iter().sum();
        assert_eq!(occupied, 2.0);
        // Context at the two bins differs (different signatures).
        let c_at = |bin: usize, ch: usize| {
            ideal.r_c.data[(ch * 32 + bin) * 24 + col]
        };
        let mut diff = 0.0;
        for ch in 0..6 {
            diff += (c_at(b.bin_of(8.0), ch) - c_at(b.bin_of(16.0), ch)).abs();
        }
        // Same signature here, so contexts match; mostly checks determinism.
        assert!(diff < 1e-12);
    }
}
