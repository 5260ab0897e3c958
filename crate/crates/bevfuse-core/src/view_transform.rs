//! BEV view transformation: depth-distribution-guided and radar-occupancy-
//! guided spatial cross attention, masked fusion of the two BEV features,
//! radar-context cross attention in the frustum view, and the encoder stack.
//!
//! BEV cells whose pillar is invisible to every camera are frozen through
//! the whole stack: no attention, fusion, FFN, or layer norm touches them,
//! so they stay bit-identical to the initial query.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    deform_attn_2d, deform_attn_3d_factored, multi_camera_aggregate, DeformAttnParams,
    LiftedValueView, QueryRefs2d, QueryRefs3d,
};
use crate::camera_stream::{CameraEncoderParams, ImageStreamOutput};
use crate::error::{CoreError, Result};
use crate::geometry::{
    pillar_reference_points, project_to_image, BevGrid, CameraRig, DepthBins,
};
use crate::loss::SegHeadParams;
use crate::mlp::{Activation, MlpParams};
use crate::params::{ParamRef, ParamStore};
use crate::radar_stream::{RadarEncoderParams, RadarStreamOutput};
use crate::rng::Stream;
use crate::tape::{BackwardCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

/// Encoder layer toggles and sizes.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    pub n_layers: usize,
    /// Depth-distribution-guided attention (the image-only 3D path).
    pub use_depth_sca: bool,
    /// Radar-occupancy-guided attention.
    pub use_occupancy_sca: bool,
    /// Radar-context attention over the frustum feature map.
    pub use_radar_context_sca: bool,
    pub ffn_width: usize,
    /// Fuse the two BEV branches only in the last layer (earlier layers
    /// average them).
    #[cfg_attr(feature = "serde", serde(default))]
    pub fuse_once: bool,
    /// Splat radar context to BEV before attention instead of sampling the
    /// frustum view (the weaker comparison variant).
    #[cfg_attr(feature = "serde", serde(default))]
    pub radar_context_bev_splat: bool,
    /// Share offset/weight projections between the depth and occupancy paths.
    #[cfg_attr(feature = "serde", serde(default))]
    pub share_attention_params: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(CoreError::Config { detail: "need at least 1 encoder layer".into() });
        }
        Ok(())
    }

    /// Ablation rows: A = depth only, B = +occupancy, C = depth+radar
    /// context, D = all.
    pub fn ablation(tag: char, n_layers: usize, ffn_width: usize) -> Result<Self> {
        let (occ, ctx) = match tag {
            'A' => (false, false),
            'B' => (true, false),
            'C' => (false, true),
            'D' => (true, true),
            _ => {
                return Err(CoreError::Config { detail: format!("unknown ablation tag {tag}") })
            }
        };
        Ok(EncoderConfig {
            n_layers,
            use_depth_sca: true,
            use_occupancy_sca: occ,
            use_radar_context_sca: ctx,
            ffn_width,
            fuse_once: false,
            radar_context_bev_splat: false,
            share_attention_params: false,
        })
    }

    pub fn needs_radar(&self) -> bool {
        self.use_occupancy_sca || self.use_radar_context_sca
    }
}

/// Model width settings.
#[derive(Debug, Clone, Copy)]
pub struct ModelDims {
    pub channels: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub trunk_width: usize,
    pub radar_feat: usize,
    pub classes: usize,
    pub column_stride: usize,
}

/// One encoder layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub depth_attn: DeformAttnParams,
    pub occ_attn: DeformAttnParams,
    pub radar_ctx_attn: DeformAttnParams,
    pub fuse: MlpParams,
    pub ffn: MlpParams,
    pub ln1: (ParamRef, ParamRef),
    pub ln2: (ParamRef, ParamRef),
    pub ln3: (ParamRef, ParamRef),
}

/// Every learnable tensor of the full model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub camera: CameraEncoderParams,
    pub radar: RadarEncoderParams,
    pub layers: Vec<LayerParams>,
    pub seg_head: SegHeadParams,
    /// [Q, C] learned positional query init.
    pub query_init: ParamRef,
}

/// Scale of the shared component of the query init; the per-cell positional
/// part is small so untrained queries start nearly identical across cells.
const QUERY_BASE_SCALE: f64 = 0.5;
const QUERY_POS_SCALE: f64 = 0.02;

impl ModelParams {
    pub fn new(
        store: &mut ParamStore,
        dims: ModelDims,
        cfg: &EncoderConfig,
        grid: &BevGrid,
        bins: &DepthBins,
        radar_occ_softmax: bool,
        stream: &mut Stream,
    ) -> Result<Self> {
        cfg.validate()?;
        let camera = CameraEncoderParams::new(
            store,
            dims.trunk_width,
            dims.channels,
            bins.count,
            stream,
        );
        let radar =
            RadarEncoderParams::new(store, dims.radar_feat, dims.channels, radar_occ_softmax, stream)?;
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let depth_attn = DeformAttnParams::new(
                store,
                &format!("layer{l}.depth_attn"),
                dims.channels,
                dims.n_heads,
                dims.n_points,
                3,
                stream,
            )?;
            let occ_attn = if cfg.share_attention_params {
                depth_attn.clone()
            } else {
                DeformAttnParams::new(
                    store,
                    &format!("layer{l}.occ_attn"),
                    dims.channels,
                    dims.n_heads,
                    dims.n_points,
                    3,
                    stream,
                )?
            };
            let radar_ctx_attn = DeformAttnParams::new(
                store,
                &format!("layer{l}.radar_ctx_attn"),
                dims.channels,
                dims.n_heads,
                dims.n_points,
                2,
                stream,
            )?;
            let fuse = MlpParams::averaging_fuse(store, &format!("layer{l}.fuse"), dims.channels);
            let ffn = MlpParams::new(
                store,
                &format!("layer{l}.ffn"),
                &[dims.channels, cfg.ffn_width, dims.channels],
                Activation::Identity,
                stream,
            )?;
            let ln = |store: &mut ParamStore, name: &str| {
                (
                    store.register(format!("layer{l}.{name}.gamma"), Tensor::filled(&[dims.channels], 1.0)),
                    store.register_zeros(format!("layer{l}.{name}.beta"), &[dims.channels]),
                )
            };
            let ln1 = ln(store, "ln1");
            let ln2 = ln(store, "ln2");
            let ln3 = ln(store, "ln3");
            layers.push(LayerParams { depth_attn, occ_attn, radar_ctx_attn, fuse, ffn, ln1, ln2, ln3 });
        }
        let seg_head = SegHeadParams::new(store, dims.channels, dims.classes, stream);

        let cells = grid.cells();
        let mut q0 = Tensor::zeros(&[cells, dims.channels]);
        let mut base_s = stream.fork(q_base_tag());
        let base: Vec<f64> =
            (0..dims.channels).map(|_| base_s.uniform_in(-QUERY_BASE_SCALE, QUERY_BASE_SCALE)).collect();
        let mut pos_s = stream.fork(q_pos_tag());
        for q in 0..cells {
            for c in 0..dims.channels {
                q0.data[q * dims.channels + c] =
                    base[c] + pos_s.uniform_in(-QUERY_POS_SCALE, QUERY_POS_SCALE);
            }
        }
        let query_init = store.register("query_init".to_string(), q0);
        Ok(ModelParams { dims, camera, radar, layers, seg_head, query_init })
    }
}

fn q_base_tag() -> u64 {
    0x51_ba5e
}
fn q_pos_tag() -> u64 {
    0x51_b05
}

/// Projections of every BEV pillar into every camera, plus hit bookkeeping.
#[derive(Debug, Clone)]
pub struct RefSets {
    /// Per camera: (u, v, depth-bin coordinate) of the pillar reference.
    pub image: Vec<QueryRefs3d>,
    /// Per camera: (column, depth-bin coordinate) in the frustum map.
    pub frustum: Vec<QueryRefs2d>,
    pub hit_counts: Vec<usize>,
    pub hit_mask: Vec<bool>,
    pub frustum_counts: Vec<usize>,
}

/// Project pillar anchors and reduce each pillar to one reference per
/// camera (mean of the visible anchors; u and depth are shared along a
/// pillar, v averages).
pub fn compute_refs(
    rig: &CameraRig,
    grid: &BevGrid,
    bins: &DepthBins,
    column_stride: usize,
) -> RefSets {
    let pts = pillar_reference_points(grid);
    let cells = grid.cells();
    let n_z = grid.z_anchors.len();
    let points: Vec<[f64; 3]> = (0..cells * n_z)
        .map(|i| [pts.data[i * 3], pts.data[i * 3 + 1], pts.data[i * 3 + 2]])
        .collect();
    let mut image = Vec::new();
    let mut frustum = Vec::new();
    let mut hit_counts = vec![0usize; cells];
    let mut frustum_counts = vec![0usize; cells];
    for cam in 0..rig.len() {
        let projected = project_to_image(&points, rig, cam);
        let mut refs = QueryRefs3d { refs: vec![[0.0; 3]; cells], visible: vec![false; cells] };
        let mut frefs = QueryRefs2d { refs: vec![[0.0; 2]; cells], visible: vec![false; cells] };
        let (_, w) = rig.cameras[cam].hw;
        for q in 0..cells {
            let mut acc = [0.0f64; 3];
            let mut n_vis = 0usize;
            for a in 0..n_z {
                let pr = &projected[q * n_z + a];
                if pr.visible {
                    acc[0] += pr.u;
                    acc[1] += pr.v;
                    acc[2] += pr.depth;
                    n_vis += 1;
                }
            }
            if n_vis > 0 {
                let inv = 1.0 / n_vis as f64;
                let (u, v, d) = (acc[0] * inv, acc[1] * inv, acc[2] * inv);
                refs.refs[q] = [u, v, bins.continuous_index(d)];
                refs.visible[q] = true;
                hit_counts[q] += 1;
                if bins.contains(d) {
                    frefs.refs[q] = [u / column_stride as f64, bins.continuous_index(d)];
                    frefs.visible[q] = true;
                    frustum_counts[q] += 1;
                }
            } else {
                // The pillar may still cross the frustum (height collapsed).
                let pr = &projected[q * n_z];
                let d = pr.depth;
                if d > crate::geometry::NEAR_CLIP_M && bins.contains(d) {
                    let pc = rig.cameras[cam].ego_to_cam(points[q * n_z]);
                    let u = rig.cameras[cam].fx * pc[0] / pc[2] + rig.cameras[cam].cx;
                    if u >= 0.0 && u <= (w - 1) as f64 {
                        frefs.refs[q] = [u / column_stride as f64, bins.continuous_index(d)];
                        frefs.visible[q] = true;
                        frustum_counts[q] += 1;
                    }
                }
            }
        }
        image.push(refs);
        frustum.push(frefs);
    }
    let hit_mask = hit_counts.iter().map(|&h| h > 0).collect();
    RefSets { image, frustum, hit_counts, hit_mask, frustum_counts }
}

// ---------------------------------------------------------------------------
// tape ops specific to this module

struct OuterOccupancyOp {
    image_occ: Var,
    radar_occ: Var,
    stride: usize,
}

impl TapeOp for OuterOccupancyOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let io = ctx.value(self.image_occ).clone();
        let ro = ctx.value(self.radar_occ).clone();
        let (n, _, h, w) = (io.shape[0], io.shape[1], io.shape[2], io.shape[3]);
        let (d, cols) = (ro.shape[1], ro.shape[3]);
        {
            let dio = ctx.grad_mut(self.image_occ);
            for cam in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let wc = (x / self.stride).min(cols - 1);
                        let mut s = 0.0;
                        for k in 0..d {
                            s += g[((cam * d + k) * h + y) * w + x]
                                * ro.data[(cam * d + k) * cols + wc];
                        }
                        dio[(cam * h + y) * w + x] += s;
                    }
                }
            }
        }
        let dro = ctx.grad_mut(self.radar_occ);
        for cam in 0..n {
            for k in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let wc = (x / self.stride).min(cols - 1);
                        dro[(cam * d + k) * cols + wc] += g[((cam * d + k) * h + y) * w + x]
                            * io.data[(cam * h + y) * w + x];
                    }
                }
            }
        }
    }
}

struct SelectRowsOp {
    on: Var,
    off: Var,
    mask: Vec<bool>,
    cols: usize,
}

impl TapeOp for SelectRowsOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        {
            let don = ctx.grad_mut(self.on);
            for (q, &m) in self.mask.iter().enumerate() {
                if m {
                    for c in 0..self.cols {
                        don[q * self.cols + c] += g[q * self.cols + c];
                    }
                }
            }
        }
        let doff = ctx.grad_mut(self.off);
        for (q, &m) in self.mask.iter().enumerate() {
            if !m {
                for c in 0..self.cols {
                    doff[q * self.cols + c] += g[q * self.cols + c];
                }
            }
        }
    }
}

struct SplatFrustumToBevOp {
    radar_ctx: Var,
    /// (flat source cell per (cam, d, w), destination BEV cell)
    assignments: Vec<(usize, usize)>,
    inv_counts: Vec<f64>,
    channels: usize,
    src_plane: usize,
    cells: usize,
}

impl TapeOp for SplatFrustumToBevOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let n_src = ctx.value(self.radar_ctx).len() / (self.channels * self.src_plane);
        let drc = ctx.grad_mut(self.radar_ctx);
        for &(src, dst) in &self.assignments {
            let cam = src / self.src_plane;
            let off = src % self.src_plane;
            for c in 0..self.channels {
                let _ = n_src;
                drc[(cam * self.channels + c) * self.src_plane + off] +=
                    g[c * self.cells + dst] * self.inv_counts[dst];
            }
        }
    }
}

impl Tape {
    /// O_IR[n,d,h,w] = I_O[n,1,h,w] * R_O[n,d,1,floor(w/stride)].
    pub fn outer_occupancy(&mut self, image_occ: Var, radar_occ: Var, stride: usize) -> Result<Var> {
        let so = self.value(image_occ).shape.clone();
        let sr = self.value(radar_occ).shape.clone();
        if so.len() != 4 || sr.len() != 4 || so[1] != 1 || sr[2] != 1 || so[0] != sr[0] {
            return Err(CoreError::ShapeMismatch {
                op: "outer_occupancy",
                detail: format!("I_O {so:?} vs R_O {sr:?}"),
            });
        }
        let (n, h, w) = (so[0], so[2], so[3]);
        let (d, cols) = (sr[1], sr[3]);
        let io = &self.value(image_occ).data;
        let ro = &self.value(radar_occ).data;
        let mut data = vec![0.0; n * d * h * w];
        for cam in 0..n {
            for k in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let wc = (x / stride).min(cols - 1);
                        data[((cam * d + k) * h + y) * w + x] =
                            io[(cam * h + y) * w + x] * ro[(cam * d + k) * cols + wc];
                    }
                }
            }
        }
        let t = Tensor { shape: vec![n, d, h, w], data };
        Ok(self.push_op(t, Box::new(OuterOccupancyOp { image_occ, radar_occ, stride })))
    }

    /// Rows from `on` where mask is set, rows from `off` elsewhere.
    pub fn select_rows(&mut self, on: Var, off: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.value(on).shape.clone();
        if self.value(off).shape != shape || shape.len() != 2 || shape[0] != mask.len() {
            return Err(CoreError::ShapeMismatch {
                op: "select_rows",
                detail: format!("{shape:?} vs {:?}", self.value(off).shape),
            });
        }
        let cols = shape[1];
        let mut data = self.value(off).data.clone();
        let on_data = &self.value(on).data;
        for (q, &m) in mask.iter().enumerate() {
            if m {
                data[q * cols..(q + 1) * cols].copy_from_slice(&on_data[q * cols..(q + 1) * cols]);
            }
        }
        let t = Tensor { shape, data };
        Ok(self.push_op(t, Box::new(SelectRowsOp { on, off, mask: mask.to_vec(), cols })))
    }
}

// ---------------------------------------------------------------------------
// the four view-transform operations

/// Depth-weighted image attention shared by the depth and occupancy paths.
fn lifted_branch(
    tape: &mut Tape,
    vars: &[Var],
    queries: Var,
    context: Var,
    depth_weight: Var,
    params: &DeformAttnParams,
    refs: &RefSets,
) -> Result<Var> {
    let n_cams = refs.image.len();
    let lifted = LiftedValueView { context, depth_weight };
    let mut outs = Vec::new();
    for cam in 0..n_cams {
        let av = params.vars(vars);
        outs.push(deform_attn_3d_factored(
            tape,
            lifted,
            cam,
            queries,
            &refs.image[cam],
            params,
            &av,
        )?);
    }
    multi_camera_aggregate(tape, &outs, &refs.hit_counts)
}

/// Image-context BEV feature guided by the predicted depth distribution.
pub fn depth_guided_sca(
    tape: &mut Tape,
    vars: &[Var],
    queries: Var,
    img: &ImageStreamOutput,
    params: &DeformAttnParams,
    refs: &RefSets,
) -> Result<Var> {
    lifted_branch(tape, vars, queries, img.context, img.depth, params, refs)
}

/// Image-context BEV feature guided by image ⊗ radar occupancy.
#[allow(clippy::too_many_arguments)]
pub fn occupancy_guided_sca(
    tape: &mut Tape,
    vars: &[Var],
    queries: Var,
    img: &ImageStreamOutput,
    radar: &RadarStreamOutput,
    params: &DeformAttnParams,
    refs: &RefSets,
    bins: &DepthBins,
    column_stride: usize,
) -> Result<Var> {
    let r_o_shape = tape.value(radar.r_o).shape.clone();
    if r_o_shape[1] != bins.count {
        return Err(CoreError::Config {
            detail: format!(
                "radar occupancy has {} bins but projection uses {}",
                r_o_shape[1], bins.count
            ),
        });
    }
    let o_ir = tape.outer_occupancy(img.occupancy, radar.r_o, column_stride)?;
    lifted_branch(tape, vars, queries, img.context, o_ir, params, refs)
}

/// Masked fusion: concatenate the two BEV features and apply the fusion MLP
/// at hit cells; miss cells pass the query through unchanged.
pub fn fuse_bev(
    tape: &mut Tape,
    vars: &[Var],
    b_i: Var,
    b_r: Var,
    query: Var,
    fuse: &MlpParams,
    hit_mask: &[bool],
) -> Result<Var> {
    let cat = tape.concat_cols(b_i, b_r)?;
    let fused = fuse.forward(tape, vars, cat)?;
    tape.select_rows(fused, query, hit_mask)
}

/// Radar-context attention: sample the frustum-view radar context map at the
/// queries' (column, depth) references and add residually.
pub fn radar_context_sca(
    tape: &mut Tape,
    vars: &[Var],
    b_ir: Var,
    radar: &RadarStreamOutput,
    params: &DeformAttnParams,
    refs: &RefSets,
) -> Result<Var> {
    let n_cams = refs.frustum.len();
    let mut outs = Vec::new();
    for cam in 0..n_cams {
        let av = params.vars(vars);
        // R_C is [N, C, D, W]: rows are depth bins, columns are frustum
        // columns, so the 2D sample location is (column, depth).
        outs.push(deform_attn_2d(tape, radar.r_c, cam, b_ir, &refs.frustum[cam], params, &av)?);
    }
    let agg = multi_camera_aggregate(tape, &outs, &refs.frustum_counts)?;
    tape.add(b_ir, agg)
}

/// Precomputed frustum-cell -> BEV-cell assignment for the splat variant.
pub fn frustum_to_bev_assignments(
    rig: &CameraRig,
    grid: &BevGrid,
    bins: &DepthBins,
    column_stride: usize,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let cells = grid.cells();
    let mut assignments = Vec::new();
    let mut counts = vec![0usize; cells];
    for (cam, camera) in rig.cameras.iter().enumerate() {
        let cols = camera.hw.1 / column_stride;
        for d in 0..bins.count {
            for wc in 0..cols {
                let u = (wc as f64 + 0.5) * column_stride as f64;
                let depth = bins.center(d);
                let xc = (u - camera.cx) / camera.fx * depth;
                let p = camera.cam_to_ego([xc, 0.0, depth]);
                if let Some((i, j)) = grid.cell_of(p[0], p[1]) {
                    let src = (cam * bins.count + d) * cols + wc;
                    assignments.push((src, grid.cell_index(i, j)));
                    counts[grid.cell_index(i, j)] += 1;
                }
            }
        }
    }
    let inv = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
    (assignments, inv)
}

/// The BEV-splat comparison variant of radar-context attention.
#[allow(clippy::too_many_arguments)]
pub fn radar_context_sca_bev_splat(
    tape: &mut Tape,
    vars: &[Var],
    b_ir: Var,
    radar: &RadarStreamOutput,
    params: &DeformAttnParams,
    grid: &BevGrid,
    assignments: &[(usize, usize)],
    inv_counts: &[f64],
) -> Result<Var> {
    let rc_shape = tape.value(radar.r_c).shape.clone();
    let (channels, src_plane) = (rc_shape[1], rc_shape[2] * rc_shape[3]);
    let cells = grid.cells();
    // Mean-splat the frustum context into a BEV map.
    let mut data = vec![0.0; channels * cells];
    {
        let rc = &tape.value(radar.r_c).data;
        for &(src, dst) in assignments {
            let cam = src / src_plane;
            let off = src % src_plane;
            for c in 0..channels {
                data[c * cells + dst] +=
                    rc[(cam * channels + c) * src_plane + off] * inv_counts[dst];
            }
        }
    }
    let t = Tensor { shape: vec![channels, grid.x_cells, grid.y_cells], data };
    let bev_map = tape.push_op(
        t,
        Box::new(SplatFrustumToBevOp {
            radar_ctx: radar.r_c,
            assignments: assignments.to_vec(),
            inv_counts: inv_counts.to_vec(),
            channels,
            src_plane,
            cells,
        }),
    );
    // Queries sample the splatted map at their own cell coordinates.
    let refs = QueryRefs2d {
        refs: (0..cells)
            .map(|q| [(q % grid.y_cells) as f64, (q / grid.y_cells) as f64])
            .collect(),
        visible: vec![true; cells],
    };
    let av = params.vars(vars);
    let attn = deform_attn_2d(tape, bev_map, 0, b_ir, &refs, params, &av)?;
    tape.add(b_ir, attn)
}

// ---------------------------------------------------------------------------
// encoder stack

/// Query grid and its staged derivatives for one forward pass.
#[derive(Debug, Clone)]
pub struct BevState {
    /// Initial query B, [Q, C].
    pub b: Var,
    /// Last layer's depth-guided branch output.
    pub b_i: Option<Var>,
    /// Last layer's occupancy-guided branch output.
    pub b_r: Option<Var>,
    /// Last layer's fused feature (query passthrough at miss cells).
    pub b_ir: Var,
    /// Final encoded BEV feature, [Q, C].
    pub b_encoded: Var,
    pub hit_mask: Vec<bool>,
    pub hit_counts: Vec<usize>,
}

/// Supporting inputs the encoder needs besides the streams.
pub struct EncoderInputs<'a> {
    pub refs: &'a RefSets,
    pub grid: &'a BevGrid,
    pub bins: &'a DepthBins,
    /// Only used by the BEV-splat variant.
    pub splat: Option<&'a (Vec<(usize, usize)>, Vec<f64>)>,
}

/// Run the encoder stack. Per layer: [depth ∥ occupancy] attention ->
/// fusion -> radar-context attention -> per-cell FFN, each wrapped in
/// residual + post layer norm at hit cells; miss cells are frozen.
pub fn encoder_forward(
    tape: &mut Tape,
    vars: &[Var],
    model: &ModelParams,
    cfg: &EncoderConfig,
    img: &ImageStreamOutput,
    radar: Option<&RadarStreamOutput>,
    inputs: &EncoderInputs<'_>,
) -> Result<BevState> {
    cfg.validate()?;
    if cfg.needs_radar() && radar.is_none() {
        return Err(CoreError::Config {
            detail: "encoder configuration needs radar features but none were given".to_string(),
        });
    }
    if cfg.n_layers > model.layers.len() {
        return Err(CoreError::Config {
            detail: format!(
                "config wants {} layers, model has {}",
                cfg.n_layers,
                model.layers.len()
            ),
        });
    }
    let refs = inputs.refs;
    let mask = &refs.hit_mask;
    let q0 = model.query_init.var(vars);
    let mut x = q0;
    let mut last_b_i = None;
    let mut last_b_r = None;
    let mut last_b_ir = x;
    for l in 0..cfg.n_layers {
        let lp = &model.layers[l];
        let b_i = if cfg.use_depth_sca {
            Some(depth_guided_sca(tape, vars, x, img, &lp.depth_attn, refs)?)
        } else {
            None
        };
        let b_r = if cfg.use_occupancy_sca {
            Some(occupancy_guided_sca(
                tape,
                vars,
                x,
                img,
                radar.expect("checked above"),
                &lp.occ_attn,
                refs,
                inputs.bins,
                model.dims.column_stride,
            )?)
        } else {
            None
        };
        last_b_i = b_i;
        last_b_r = b_r;
        // Fusion stage.
        let b_ir = match (b_i, b_r) {
            (Some(a), Some(r)) => {
                let fuse_now = !cfg.fuse_once || l + 1 == cfg.n_layers;
                if fuse_now {
                    fuse_bev(tape, vars, a, r, x, &lp.fuse, mask)?
                } else {
                    let sum = tape.add(a, r)?;
                    let avg = tape.scale(sum, 0.5);
                    tape.select_rows(avg, x, mask)?
                }
            }
            (Some(a), None) => tape.select_rows(a, x, mask)?,
            (None, Some(r)) => tape.select_rows(r, x, mask)?,
            (None, None) => x,
        };
        last_b_ir = b_ir;
        // Residual + post-LN around the attention/fusion stage (hit cells).
        let mut xn = if cfg.use_depth_sca || cfg.use_occupancy_sca {
            let res = tape.add(x, b_ir)?;
            let ln = tape.layer_norm_rows(res, lp.ln1.0.var(vars), lp.ln1.1.var(vars), 1e-6)?;
            tape.select_rows(ln, x, mask)?
        } else {
            x
        };
        // Radar-context stage.
        if cfg.use_radar_context_sca {
            let rc = if cfg.radar_context_bev_splat {
                let (assignments, inv) = inputs.splat.ok_or_else(|| CoreError::Config {
                    detail: "BEV-splat variant needs precomputed assignments".to_string(),
                })?;
                radar_context_sca_bev_splat(
                    tape,
                    vars,
                    xn,
                    radar.expect("checked above"),
                    &lp.radar_ctx_attn,
                    inputs.grid,
                    assignments,
                    inv,
                )?
            } else {
                radar_context_sca(
                    tape,
                    vars,
                    xn,
                    radar.expect("checked above"),
                    &lp.radar_ctx_attn,
                    refs,
                )?
            };
            let ln = tape.layer_norm_rows(rc, lp.ln2.0.var(vars), lp.ln2.1.var(vars), 1e-6)?;
            xn = tape.select_rows(ln, xn, mask)?;
        }
        // Per-cell FFN.
        let f = lp.ffn.forward(tape, vars, xn)?;
        let res = tape.add(xn, f)?;
        let ln = tape.layer_norm_rows(res, lp.ln3.0.var(vars), lp.ln3.1.var(vars), 1e-6)?;
        x = tape.select_rows(ln, xn, mask)?;
    }
    Ok(BevState {
        b: q0,
        b_i: last_b_i,
        b_r: last_b_r,
        b_ir: last_b_ir,
        b_encoded: x,
        hit_mask: mask.clone(),
        hit_counts: refs.hit_counts.clone(),
    })
}

/// 1 − cosine similarity between two cells' encoded features; returns
/// (score, zero_norm_flag).
pub fn ray_separation_score(b_encoded: &Tensor, cell_a: usize, cell_b: usize) -> (f64, bool) {
    let c = b_encoded.shape[1];
    let a = &b_encoded.data[cell_a * c..(cell_a + 1) * c];
    let b = &b_encoded.data[cell_b * c..(cell_b + 1) * c];
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..c {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na <= 0.0 || nb <= 0.0 {
        return (0.0, true);
    }
    (1.0 - dot / (crate::mathf::sqrt(na) * crate::mathf::sqrt(nb)), false)
}

/// L2 norm of one cell's feature row.
pub fn cell_feature_norm(b_encoded: &Tensor, cell: usize) -> f64 {
    let c = b_encoded.shape[1];
    let row = &b_encoded.data[cell * c..(cell + 1) * c];
    crate::mathf::sqrt(row.iter().map(|v| v * v).sum::<f64>())
}
