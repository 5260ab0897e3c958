//! Deformable attention kernels.
//!
//! Three kernels share one parameterization: plain 2D deformable attention,
//! depth-weighted 3D attention in a factored form that never materializes the
//! lifted value tensor, and a naive 3D kernel that does materialize it and
//! serves as the correctness oracle for the factored one.
//!
//! The factored kernel exploits that the lifted value is an outer product:
//! X[c,d,y,x] = context[c,y,x] · weight[d,y,x]. Trilinear sampling of X
//! therefore decomposes per bilinear corner (x_i, y_j) into
//! context[c,y_j,x_i] · depth_lerp(weight[:,y_j,x_i]), which costs O(1)
//! extra memory per sample while matching the materialized kernel exactly.
//!
//! Accumulation order is fixed (head-major, point-minor) so results are
//! bit-deterministic; invisible queries produce zero rows.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::ops::{in_range, lerp_cell};
use crate::params::{ParamRef, ParamStore};
use crate::rng::Stream;
use crate::tape::{BackwardCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

/// Default cap on elements the naive kernel may materialize.
pub const DEFAULT_NAIVE_BUDGET: usize = 16 << 20;

/// Learned projections of one deformable attention block.
///
/// Sampling offsets and attention logits start at zero, so an untrained
/// block samples exactly at its reference points with uniform weights.
#[derive(Debug, Clone)]
pub struct DeformAttnParams {
    pub channels: usize,
    pub n_heads: usize,
    pub n_points: usize,
    /// 2 for (du, dv), 3 for (du, dv, dd).
    pub off_dim: usize,
    pub w_offset: ParamRef,
    pub b_offset: ParamRef,
    pub w_attn: ParamRef,
    pub b_attn: ParamRef,
    pub w_value: ParamRef,
    pub w_out: ParamRef,
    pub b_out: ParamRef,
}

impl DeformAttnParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        n_heads: usize,
        n_points: usize,
        off_dim: usize,
        stream: &mut Stream,
    ) -> Result<Self> {
        if channels % n_heads != 0 {
            return Err(CoreError::Config {
                detail: format!("channels {channels} not divisible by heads {n_heads}"),
            });
        }
        if !(off_dim == 2 || off_dim == 3) {
            return Err(CoreError::Config { detail: "off_dim must be 2 or 3".into() });
        }
        let hp = n_heads * n_points;
        Ok(DeformAttnParams {
            channels,
            n_heads,
            n_points,
            off_dim,
            w_offset: store.register_zeros(format!("{name}.w_offset"), &[channels, hp * off_dim]),
            b_offset: store.register_zeros(format!("{name}.b_offset"), &[hp * off_dim]),
            w_attn: store.register_zeros(format!("{name}.w_attn"), &[channels, hp]),
            b_attn: store.register_zeros(format!("{name}.b_attn"), &[hp]),
            w_value: store.register_uniform(
                format!("{name}.w_value"),
                &[channels, channels],
                channels,
                stream,
            ),
            w_out: store.register_uniform(
                format!("{name}.w_out"),
                &[channels, channels],
                channels,
                stream,
            ),
            b_out: store.register_zeros(format!("{name}.b_out"), &[channels]),
        })
    }

    pub fn vars(&self, vars: &[Var]) -> AttnVars {
        AttnVars {
            w_offset: self.w_offset.var(vars),
            b_offset: self.b_offset.var(vars),
            w_attn: self.w_attn.var(vars),
            b_attn: self.b_attn.var(vars),
            w_value: self.w_value.var(vars),
            w_out: self.w_out.var(vars),
            b_out: self.b_out.var(vars),
        }
    }

    pub fn param_names(&self, store: &ParamStore) -> Vec<String> {
        [
            self.w_offset,
            self.b_offset,
            self.w_attn,
            self.b_attn,
            self.w_value,
            self.w_out,
            self.b_out,
        ]
        .iter()
        .map(|r| String::from(store.name(*r)))
        .collect()
    }
}

/// Tape handles of one block's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub w_offset: Var,
    pub b_offset: Var,
    pub w_attn: Var,
    pub b_attn: Var,
    pub w_value: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Per-query 2D reference points in value-map coordinates.
#[derive(Debug, Clone)]
pub struct QueryRefs2d {
    pub refs: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

/// Per-query 3D reference points (u, v, depth-bin coordinate).
#[derive(Debug, Clone)]
pub struct QueryRefs3d {
    pub refs: Vec<[f64; 3]>,
    pub visible: Vec<bool>,
}

/// Context + depth weight pair standing in for the never-materialized lifted
/// value tensor.
#[derive(Debug, Clone, Copy)]
pub struct LiftedValueView {
    /// [N, C, H, W]
    pub context: Var,
    /// [N, D, H, W]
    pub depth_weight: Var,
}

#[derive(Debug, Clone, Copy)]
struct Meta {
    channels: usize,
    n_heads: usize,
    n_points: usize,
    off_dim: usize,
    q: usize,
}

/// Shared per-query head of all kernels: offsets, softmaxed weights.
struct QueryMix {
    offsets: Vec<f64>, // [h*p*off_dim]
    weights: Vec<f64>, // [h*p], softmax over points per head
}

fn query_mix(meta: &Meta, qrow: &[f64], wo: &[f64], bo: &[f64], wa: &[f64], ba: &[f64]) -> QueryMix {
    let hp = meta.n_heads * meta.n_points;
    let od = meta.off_dim;
    let mut offsets = bo.to_vec();
    for (ci, &qv) in qrow.iter().enumerate() {
        if qv == 0.0 {
            continue;
        }
        let row = &wo[ci * hp * od..(ci + 1) * hp * od];
        for k in 0..hp * od {
            offsets[k] += qv * row[k];
        }
    }
    let mut logits = ba.to_vec();
    for (ci, &qv) in qrow.iter().enumerate() {
        if qv == 0.0 {
            continue;
        }
        let row = &wa[ci * hp..(ci + 1) * hp];
        for k in 0..hp {
            logits[k] += qv * row[k];
        }
    }
    let mut weights = vec![0.0; hp];
    for h in 0..meta.n_heads {
        let lane = &logits[h * meta.n_points..(h + 1) * meta.n_points];
        let mx = lane.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (k, &l) in lane.iter().enumerate() {
            let e = crate::mathf::exp(l - mx);
            weights[h * meta.n_points + k] = e;
            sum += e;
        }
        for k in 0..meta.n_points {
            weights[h * meta.n_points + k] /= sum;
        }
    }
    QueryMix { offsets, weights }
}

/// d(logits) from d(weights) through the per-head softmax.
fn softmax_backward_per_head(meta: &Meta, weights: &[f64], d_w: &[f64], d_logits: &mut [f64]) {
    for h in 0..meta.n_heads {
        let base = h * meta.n_points;
        let mut dot = 0.0;
        for k in 0..meta.n_points {
            dot += d_w[base + k] * weights[base + k];
        }
        for k in 0..meta.n_points {
            d_logits[base + k] += weights[base + k] * (d_w[base + k] - dot);
        }
    }
}

/// Per-sample value accessor shared by the kernel forward/backward loops.
trait SampleSpace {
    /// All-channel sample at the (possibly offset) location.
    fn sample(&self, loc: &[f64], out: &mut [f64]);
    /// Scatter d(sample) into value gradients and return d(loc).
    fn scatter(&self, loc: &[f64], d_sample: &[f64], sink: &mut dyn FnMut(usize, f64)) -> Vec<f64>;
}

/// 2D bilinear space over one camera plane of a [C, H, W] / [N, C, H, W] map.
struct Plane2d<'a> {
    data: &'a [f64],
    base: usize,
    h: usize,
    w: usize,
}

impl<'a> SampleSpace for Plane2d<'a> {
    fn sample(&self, loc: &[f64], out: &mut [f64]) {
        let (x0, fx) = lerp_cell(loc[0]);
        let (y0, fy) = lerp_cell(loc[1]);
        for o in out.iter_mut() {
            *o = 0.0;
        }
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            let y = y0 + dy;
            if !in_range(y, self.h) {
                continue;
            }
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let x = x0 + dx;
                if !in_range(x, self.w) {
                    continue;
                }
                let wgt = wy * wx;
                let off = self.base + y as usize * self.w + x as usize;
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += wgt * self.data[off + ch * self.h * self.w];
                }
            }
        }
    }

    fn scatter(&self, loc: &[f64], d_sample: &[f64], sink: &mut dyn FnMut(usize, f64)) -> Vec<f64> {
        let (x0, fx) = lerp_cell(loc[0]);
        let (y0, fy) = lerp_cell(loc[1]);
        let mut d_loc = vec![0.0; 2];
        for (dy, wy, dwy) in [(0isize, 1.0 - fy, -1.0), (1, fy, 1.0)] {
            let y = y0 + dy;
            if !in_range(y, self.h) {
                continue;
            }
            for (dx, wx, dwx) in [(0isize, 1.0 - fx, -1.0), (1, fx, 1.0)] {
                let x = x0 + dx;
                if !in_range(x, self.w) {
                    continue;
                }
                let off = self.base + y as usize * self.w + x as usize;
                for (ch, &g) in d_sample.iter().enumerate() {
                    let idx = off + ch * self.h * self.w;
                    let m = self.data[idx];
                    sink(idx, g * wy * wx);
                    d_loc[0] += g * wy * dwx * m;
                    d_loc[1] += g * dwy * wx * m;
                }
            }
        }
        d_loc
    }
}

/// Factored lifted space over one camera plane: context [C, H, W] with depth
/// weight [D, H, W]; samples are trilinear over the implicit outer product.
struct FactoredLifted<'a> {
    ctx: &'a [f64],
    ctx_base: usize,
    wgt: &'a [f64],
    wgt_base: usize,
    d: usize,
    h: usize,
    w: usize,
}

impl<'a> FactoredLifted<'a> {
    #[inline]
    fn depth_lerp(&self, x: usize, y: usize, z0: isize, fz: f64) -> f64 {
        let mut dw = 0.0;
        let plane = self.h * self.w;
        if in_range(z0, self.d) {
            dw += (1.0 - fz) * self.wgt[self.wgt_base + z0 as usize * plane + y * self.w + x];
        }
        if in_range(z0 + 1, self.d) {
            dw += fz * self.wgt[self.wgt_base + (z0 + 1) as usize * plane + y * self.w + x];
        }
        dw
    }
}

impl<'a> SampleSpace for FactoredLifted<'a> {
    fn sample(&self, loc: &[f64], out: &mut [f64]) {
        let (x0, fx) = lerp_cell(loc[0]);
        let (y0, fy) = lerp_cell(loc[1]);
        let (z0, fz) = lerp_cell(loc[2]);
        for o in out.iter_mut() {
            *o = 0.0;
        }
        let plane = self.h * self.w;
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            let y = y0 + dy;
            if !in_range(y, self.h) {
                continue;
            }
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let x = x0 + dx;
                if !in_range(x, self.w) {
                    continue;
                }
                let dw = self.depth_lerp(x as usize, y as usize, z0, fz);
                let cw = wy * wx * dw;
                if cw == 0.0 {
                    continue;
                }
                let off = self.ctx_base + y as usize * self.w + x as usize;
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += cw * self.ctx[off + ch * plane];
                }
            }
        }
    }

    /// `sink` receives (0, ctx index, grad) and (1, weight index, grad)
    /// encoded as sink(2*idx + which, g): see scatter_encoded below.
    fn scatter(&self, loc: &[f64], d_sample: &[f64], sink: &mut dyn FnMut(usize, f64)) -> Vec<f64> {
        let (x0, fx) = lerp_cell(loc[0]);
        let (y0, fy) = lerp_cell(loc[1]);
        let (z0, fz) = lerp_cell(loc[2]);
        let plane = self.h * self.w;
        let mut d_loc = vec![0.0; 3];
        for (dy, wy, dwy) in [(0isize, 1.0 - fy, -1.0), (1, fy, 1.0)] {
            let y = y0 + dy;
            if !in_range(y, self.h) {
                continue;
            }
            for (dx, wx, dwx) in [(0isize, 1.0 - fx, -1.0), (1, fx, 1.0)] {
                let x = x0 + dx;
                if !in_range(x, self.w) {
                    continue;
                }
                let (xu, yu) = (x as usize, y as usize);
                let dw = self.depth_lerp(xu, yu, z0, fz);
                let cw = wy * wx;
                // dot of d_sample with the context column at this corner
                let off = self.ctx_base + yu * self.w + xu;
                let mut ctx_dot = 0.0;
                for (ch, &g) in d_sample.iter().enumerate() {
                    let m = self.ctx[off + ch * plane];
                    ctx_dot += g * m;
                    // d_context
                    sink(2 * (off + ch * plane), g * cw * dw);
                }
                // d_weight through the depth lerp
                if in_range(z0, self.d) {
                    let widx = self.wgt_base + z0 as usize * plane + yu * self.w + xu;
                    sink(2 * widx + 1, ctx_dot * cw * (1.0 - fz));
                }
                if in_range(z0 + 1, self.d) {
                    let widx = self.wgt_base + (z0 + 1) as usize * plane + yu * self.w + xu;
                    sink(2 * widx + 1, ctx_dot * cw * fz);
                }
                // coordinate grads
                d_loc[0] += ctx_dot * wy * dwx * dw;
                d_loc[1] += ctx_dot * dwy * wx * dw;
                let mut ddz = 0.0;
                if in_range(z0, self.d) {
                    ddz -= self.wgt[self.wgt_base + z0 as usize * plane + yu * self.w + xu];
                }
                if in_range(z0 + 1, self.d) {
                    ddz += self.wgt[self.wgt_base + (z0 + 1) as usize * plane + yu * self.w + xu];
                }
                d_loc[2] += ctx_dot * cw * ddz;
            }
        }
        d_loc
    }
}

/// Trilinear space over an explicitly materialized [C, D, H, W] volume.
struct Volume3d<'a> {
    data: &'a [f64],
    d: usize,
    h: usize,
    w: usize,
}

impl<'a> SampleSpace for Volume3d<'a> {
    fn sample(&self, loc: &[f64], out: &mut [f64]) {
        let (x0, fx) = lerp_cell(loc[0]);
        let (y0, fy) = lerp_cell(loc[1]);
        let (z0, fz) = lerp_cell(loc[2]);
        for o in out.iter_mut() {
            *o = 0.0;
        }
        let vol = self.d * self.h * self.w;
        for (dz, wz) in [(0isize, 1.0 - fz), (1, fz)] {
            let z = z0 + dz;
            if !in_range(z, self.d) {
                continue;
            }
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                let y = y0 + dy;
                if !in_range(y, self.h) {
                    continue;
                }
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let x = x0 + dx;
                    if !in_range(x, self.w) {
                        continue;
                    }
                    let wgt = wz * wy * wx;
                    let off = (z as usize * self.h + y as usize) * self.w + x as usize;
                    for (ch, o) in out.iter_mut().enumerate() {
                        *o += wgt * self.data[off + ch * vol];
                    }
                }
            }
        }
    }

    fn scatter(&self, loc: &[f64], d_sample: &[f64], sink: &mut dyn FnMut(usize, f64)) -> Vec<f64> {
        let (x0, fx) = lerp_cell(loc[0]);
        let (y0, fy) = lerp_cell(loc[1]);
        let (z0, fz) = lerp_cell(loc[2]);
        let vol = self.d * self.h * self.w;
        let mut d_loc = vec![0.0; 3];
        for (dz, wz, dwz) in [(0isize, 1.0 - fz, -1.0), (1, fz, 1.0)] {
            let z = z0 + dz;
            if !in_range(z, self.d) {
                continue;
            }
            for (dy, wy, dwy) in [(0isize, 1.0 - fy, -1.0), (1, fy, 1.0)] {
                let y = y0 + dy;
                if !in_range(y, self.h) {
                    continue;
                }
                for (dx, wx, dwx) in [(0isize, 1.0 - fx, -1.0), (1, fx, 1.0)] {
                    let x = x0 + dx;
                    if !in_range(x, self.w) {
                        continue;
                    }
                    let off = (z as usize * self.h + y as usize) * self.w + x as usize;
                    for (ch, &g) in d_sample.iter().enumerate() {
                        let m = self.data[off + ch * vol];
                        sink(off + ch * vol, g * wz * wy * wx);
                        d_loc[0] += g * wz * wy * dwx * m;
                        d_loc[1] += g * wz * dwy * wx * m;
                        d_loc[2] += g * dwz * wy * wx * m;
                    }
                }
            }
        }
        d_loc
    }
}

/// Kernel forward shared by all value spaces.
#[allow(clippy::too_many_arguments)]
fn kernel_forward(
    meta: &Meta,
    space: &dyn SampleSpace,
    queries: &[f64],
    refs: &[&[f64]],
    visible: &[bool],
    wo: &[f64],
    bo: &[f64],
    wa: &[f64],
    ba: &[f64],
    wv: &[f64],
    wout: &[f64],
    bout: &[f64],
) -> Vec<f64> {
    let c = meta.channels;
    let ch_head = c / meta.n_heads;
    let od = meta.off_dim;
    let mut out = vec![0.0; meta.q * c];
    let mut sample = vec![0.0; c];
    let mut head_out = vec![0.0; c];
    let mut loc = vec![0.0; od];
    for q in 0..meta.q {
        if !visible[q] {
            continue;
        }
        let qrow = &queries[q * c..(q + 1) * c];
        let mix = query_mix(meta, qrow, wo, bo, wa, ba);
        head_out.iter_mut().for_each(|v| *v = 0.0);
        for h in 0..meta.n_heads {
            for p in 0..meta.n_points {
                let k = h * meta.n_points + p;
                for a in 0..od {
                    loc[a] = refs[q][a] + mix.offsets[k * od + a];
                }
                space.sample(&loc, &mut sample);
                // project into this head's slice: (sample . w_value[:, slice])
                let wgt = mix.weights[k];
                for cc in 0..ch_head {
                    let col = h * ch_head + cc;
                    let mut s = 0.0;
                    for ci in 0..c {
                        s += sample[ci] * wv[ci * c + col];
                    }
                    head_out[col] += wgt * s;
                }
            }
        }
        let orow = &mut out[q * c..(q + 1) * c];
        for (ci, &hv) in head_out.iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            let wrow = &wout[ci * c..(ci + 1) * c];
            for j in 0..c {
                orow[j] += hv * wrow[j];
            }
        }
        for j in 0..c {
            orow[j] += bout[j];
        }
    }
    out
}

/// Kernel backward shared by all value spaces. `scatter_value` routes
/// per-element gradients into the right input buffers.
#[allow(clippy::too_many_arguments)]
fn kernel_backward(
    meta: &Meta,
    space: &dyn SampleSpace,
    g_out: &[f64],
    queries: &[f64],
    refs: &[&[f64]],
    visible: &[bool],
    wo: &[f64],
    bo: &[f64],
    wa: &[f64],
    ba: &[f64],
    wv: &[f64],
    wout: &[f64],
    grads: &mut KernelGrads<'_>,
    scatter_value: &mut dyn FnMut(usize, f64),
) {
    let c = meta.channels;
    let ch_head = c / meta.n_heads;
    let od = meta.off_dim;
    let hp = meta.n_heads * meta.n_points;
    let mut sample = vec![0.0; c];
    let mut loc = vec![0.0; od];
    let mut head_out = vec![0.0; c];
    let mut samples = vec![0.0; hp * c];
    let mut proj = vec![0.0; hp * ch_head];
    for q in 0..meta.q {
        if !visible[q] {
            continue;
        }
        let g_row = &g_out[q * c..(q + 1) * c];
        if g_row.iter().all(|&g| g == 0.0) {
            continue;
        }
        let qrow = &queries[q * c..(q + 1) * c];
        let mix = query_mix(meta, qrow, wo, bo, wa, ba);
        // recompute forward intermediates
        head_out.iter_mut().for_each(|v| *v = 0.0);
        for h in 0..meta.n_heads {
            for p in 0..meta.n_points {
                let k = h * meta.n_points + p;
                for a in 0..od {
                    loc[a] = refs[q][a] + mix.offsets[k * od + a];
                }
                space.sample(&loc, &mut sample);
                samples[k * c..(k + 1) * c].copy_from_slice(&sample);
                for cc in 0..ch_head {
                    let col = h * ch_head + cc;
                    let mut s = 0.0;
                    for ci in 0..c {
                        s += sample[ci] * wv[ci * c + col];
                    }
                    proj[k * ch_head + cc] = s;
                    head_out[col] += mix.weights[k] * s;
                }
            }
        }
        // output projection
        if let Some(db) = grads.b_out.as_deref_mut() {
            for j in 0..c {
                db[j] += g_row[j];
            }
        }
        let mut d_head = vec![0.0; c];
        for ci in 0..c {
            let wrow = &wout[ci * c..(ci + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                s += g_row[j] * wrow[j];
            }
            d_head[ci] = s;
        }
        if let Some(dwout) = grads.w_out.as_deref_mut() {
            for ci in 0..c {
                if head_out[ci] == 0.0 {
                    continue;
                }
                let drow = &mut dwout[ci * c..(ci + 1) * c];
                for j in 0..c {
                    drow[j] += head_out[ci] * g_row[j];
                }
            }
        }
        // per-sample chain
        let mut d_weights = vec![0.0; hp];
        let mut d_offsets = vec![0.0; hp * od];
        for h in 0..meta.n_heads {
            for p in 0..meta.n_points {
                let k = h * meta.n_points + p;
                let s_k = &samples[k * c..(k + 1) * c];
                // d w.r.t. the softmaxed weight
                let mut dwk = 0.0;
                for cc in 0..ch_head {
                    dwk += d_head[h * ch_head + cc] * proj[k * ch_head + cc];
                }
                d_weights[k] = dwk;
                // d w.r.t. the projected slice, then the raw sample
                let wgt = mix.weights[k];
                let mut d_sample = vec![0.0; c];
                for cc in 0..ch_head {
                    let col = h * ch_head + cc;
                    let dp = wgt * d_head[col];
                    if dp == 0.0 {
                        continue;
                    }
                    if let Some(dwv) = grads.w_value.as_deref_mut() {
                        for ci in 0..c {
                            dwv[ci * c + col] += s_k[ci] * dp;
                        }
                    }
                    for ci in 0..c {
                        d_sample[ci] += wv[ci * c + col] * dp;
                    }
                }
                for a in 0..od {
                    loc[a] = refs[q][a] + mix.offsets[k * od + a];
                }
                let d_loc = space.scatter(&loc, &d_sample, scatter_value);
                for a in 0..od {
                    d_offsets[k * od + a] += d_loc[a];
                }
            }
        }
        // softmax and linear chains back to the query and projections
        let mut d_logits = vec![0.0; hp];
        softmax_backward_per_head(meta, &mix.weights, &d_weights, &mut d_logits);
        if let Some(dq) = grads.queries.as_deref_mut() {
            let drow = &mut dq[q * c..(q + 1) * c];
            for ci in 0..c {
                let orow = &wo[ci * hp * od..(ci + 1) * hp * od];
                let mut s = 0.0;
                for k in 0..hp * od {
                    s += d_offsets[k] * orow[k];
                }
                let arow = &wa[ci * hp..(ci + 1) * hp];
                for k in 0..hp {
                    s += d_logits[k] * arow[k];
                }
                drow[ci] += s;
            }
        }
        if let Some(dwo) = grads.w_offset.as_deref_mut() {
            for (ci, &qv) in qrow.iter().enumerate() {
                if qv == 0.0 {
                    continue;
                }
                let drow = &mut dwo[ci * hp * od..(ci + 1) * hp * od];
                for k in 0..hp * od {
                    drow[k] += qv * d_offsets[k];
                }
            }
        }
        if let Some(dbo) = grads.b_offset.as_deref_mut() {
            for k in 0..hp * od {
                dbo[k] += d_offsets[k];
            }
        }
        if let Some(dwa) = grads.w_attn.as_deref_mut() {
            for (ci, &qv) in qrow.iter().enumerate() {
                if qv == 0.0 {
                    continue;
                }
                let drow = &mut dwa[ci * hp..(ci + 1) * hp];
                for k in 0..hp {
                    drow[k] += qv * d_logits[k];
                }
            }
        }
        if let Some(dba) = grads.b_attn.as_deref_mut() {
            for k in 0..hp {
                dba[k] += d_logits[k];
            }
        }
    }
}

/// Mutable gradient slices handed to the shared backward.
struct KernelGrads<'a> {
    queries: Option<&'a mut [f64]>,
    w_offset: Option<&'a mut [f64]>,
    b_offset: Option<&'a mut [f64]>,
    w_attn: Option<&'a mut [f64]>,
    b_attn: Option<&'a mut [f64]>,
    w_value: Option<&'a mut [f64]>,
    w_out: Option<&'a mut [f64]>,
    b_out: Option<&'a mut [f64]>,
}

// ---------------------------------------------------------------------------
// Tape ops

struct DeformAttn2dOp {
    value: Var,
    cam: usize,
    queries: Var,
    refs: Vec<[f64; 2]>,
    visible: Vec<bool>,
    vars: AttnVars,
    meta: Meta,
}

fn plane_dims(shape: &[usize]) -> (usize, usize, usize, usize) {
    // ([N], C, H, W) -> (n, c, h, w) with n = 1 for rank 3
    if shape.len() == 4 {
        (shape[0], shape[1], shape[2], shape[3])
    } else {
        (1, shape[0], shape[1], shape[2])
    }
}

impl TapeOp for DeformAttn2dOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let value = ctx.value(self.value).clone();
        let queries = ctx.value(self.queries).clone();
        let wo = ctx.value(self.vars.w_offset).data.clone();
        let bo = ctx.value(self.vars.b_offset).data.clone();
        let wa = ctx.value(self.vars.w_attn).data.clone();
        let ba = ctx.value(self.vars.b_attn).data.clone();
        let wv = ctx.value(self.vars.w_value).data.clone();
        let wout = ctx.value(self.vars.w_out).data.clone();
        let (_, c, h, w) = plane_dims(&value.shape);
        let space = Plane2d { data: &value.data, base: self.cam * c * h * w, h, w };
        let refs: Vec<&[f64]> = self.refs.iter().map(|r| r.as_slice()).collect();

        let mut d_queries = vec![0.0; queries.len()];
        let mut d_wo = vec![0.0; wo.len()];
        let mut d_bo = vec![0.0; bo.len()];
        let mut d_wa = vec![0.0; wa.len()];
        let mut d_ba = vec![0.0; ba.len()];
        let mut d_wv = vec![0.0; wv.len()];
        let mut d_wout = vec![0.0; wout.len()];
        let mut d_bout = vec![0.0; c];
        let mut d_value = vec![0.0; value.len()];
        {
            let mut grads = KernelGrads {
                queries: Some(&mut d_queries),
                w_offset: Some(&mut d_wo),
                b_offset: Some(&mut d_bo),
                w_attn: Some(&mut d_wa),
                b_attn: Some(&mut d_ba),
                w_value: Some(&mut d_wv),
                w_out: Some(&mut d_wout),
                b_out: Some(&mut d_bout),
            };
            let mut scatter = |idx: usize, gv: f64| d_value[idx] += gv;
            kernel_backward(
                &self.meta,
                &space,
                g,
                &queries.data,
                &refs,
                &self.visible,
                &wo,
                &bo,
                &wa,
                &ba,
                &wv,
                &wout,
                &mut grads,
                &mut scatter,
            );
        }
        accumulate(ctx, self.queries, &d_queries);
        accumulate(ctx, self.value, &d_value);
        accumulate(ctx, self.vars.w_offset, &d_wo);
        accumulate(ctx, self.vars.b_offset, &d_bo);
        accumulate(ctx, self.vars.w_attn, &d_wa);
        accumulate(ctx, self.vars.b_attn, &d_ba);
        accumulate(ctx, self.vars.w_value, &d_wv);
        accumulate(ctx, self.vars.w_out, &d_wout);
        accumulate(ctx, self.vars.b_out, &d_bout);
    }
}

fn accumulate(ctx: &mut BackwardCtx<'_>, v: Var, d: &[f64]) {
    let g = ctx.grad_mut(v);
    for (gi, di) in g.iter_mut().zip(d) {
        *gi += di;
    }
}

struct DeformAttn3dFactoredOp {
    lifted: LiftedValueView,
    cam: usize,
    queries: Var,
    refs: Vec<[f64; 3]>,
    visible: Vec<bool>,
    vars: AttnVars,
    meta: Meta,
}

impl TapeOp for DeformAttn3dFactoredOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let context = ctx.value(self.lifted.context).clone();
        let weight = ctx.value(self.lifted.depth_weight).clone();
        let queries = ctx.value(self.queries).clone();
        let wo = ctx.value(self.vars.w_offset).data.clone();
        let bo = ctx.value(self.vars.b_offset).data.clone();
        let wa = ctx.value(self.vars.w_attn).data.clone();
        let ba = ctx.value(self.vars.b_attn).data.clone();
        let wv = ctx.value(self.vars.w_value).data.clone();
        let wout = ctx.value(self.vars.w_out).data.clone();
        let (_, c, h, w) = plane_dims(&context.shape);
        let (_, d, _, _) = plane_dims(&weight.shape);
        let space = FactoredLifted {
            ctx: &context.data,
            ctx_base: self.cam * c * h * w,
            wgt: &weight.data,
            wgt_base: self.cam * d * h * w,
            d,
            h,
            w,
        };
        let refs: Vec<&[f64]> = self.refs.iter().map(|r| r.as_slice()).collect();

        let mut d_queries = vec![0.0; queries.len()];
        let mut d_wo = vec![0.0; wo.len()];
        let mut d_bo = vec![0.0; bo.len()];
        let mut d_wa = vec![0.0; wa.len()];
        let mut d_ba = vec![0.0; ba.len()];
        let mut d_wv = vec![0.0; wv.len()];
        let mut d_wout = vec![0.0; wout.len()];
        let mut d_bout = vec![0.0; c];
        let mut d_ctx = vec![0.0; context.len()];
        let mut d_wgt = vec![0.0; weight.len()];
        {
            let mut grads = KernelGrads {
                queries: Some(&mut d_queries),
                w_offset: Some(&mut d_wo),
                b_offset: Some(&mut d_bo),
                w_attn: Some(&mut d_wa),
                b_attn: Some(&mut d_ba),
                w_value: Some(&mut d_wv),
                w_out: Some(&mut d_wout),
                b_out: Some(&mut d_bout),
            };
            // Encoded routing: even = context index, odd = weight index.
            let mut scatter = |code: usize, gv: f64| {
                if code % 2 == 0 {
                    d_ctx[code / 2] += gv;
                } else {
                    d_wgt[code / 2] += gv;
                }
            };
            kernel_backward(
                &self.meta,
                &space,
                g,
                &queries.data,
                &refs,
                &self.visible,
                &wo,
                &bo,
                &wa,
                &ba,
                &wv,
                &wout,
                &mut grads,
                &mut scatter,
            );
        }
        accumulate(ctx, self.queries, &d_queries);
        accumulate(ctx, self.lifted.context, &d_ctx);
        accumulate(ctx, self.lifted.depth_weight, &d_wgt);
        accumulate(ctx, self.vars.w_offset, &d_wo);
        accumulate(ctx, self.vars.b_offset, &d_bo);
        accumulate(ctx, self.vars.w_attn, &d_wa);
        accumulate(ctx, self.vars.b_attn, &d_ba);
        accumulate(ctx, self.vars.w_value, &d_wv);
        accumulate(ctx, self.vars.w_out, &d_wout);
        accumulate(ctx, self.vars.b_out, &d_bout);
    }
}

struct DeformAttn3dNaiveOp {
    lifted: LiftedValueView,
    cam: usize,
    queries: Var,
    refs: Vec<[f64; 3]>,
    visible: Vec<bool>,
    vars: AttnVars,
    meta: Meta,
}

/// Materialize X[c,d,y,x] = context[c,y,x] * weight[d,y,x] for one camera.
fn materialize_lifted(
    context: &Tensor,
    weight: &Tensor,
    cam: usize,
) -> (Vec<f64>, usize, usize, usize, usize) {
    let (_, c, h, w) = plane_dims(&context.shape);
    let (_, d, _, _) = plane_dims(&weight.shape);
    let plane = h * w;
    let ctx_base = cam * c * plane;
    let wgt_base = cam * d * plane;
    let mut x = vec![0.0; c * d * plane];
    for ch in 0..c {
        for dz in 0..d {
            let xo = (ch * d + dz) * plane;
            let co = ctx_base + ch * plane;
            let wz = wgt_base + dz * plane;
            for p in 0..plane {
                x[xo + p] = context.data[co + p] * weight.data[wz + p];
            }
        }
    }
    (x, c, d, h, w)
}

impl TapeOp for DeformAttn3dNaiveOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let context = ctx.value(self.lifted.context).clone();
        let weight = ctx.value(self.lifted.depth_weight).clone();
        let queries = ctx.value(self.queries).clone();
        let wo = ctx.value(self.vars.w_offset).data.clone();
        let bo = ctx.value(self.vars.b_offset).data.clone();
        let wa = ctx.value(self.vars.w_attn).data.clone();
        let ba = ctx.value(self.vars.b_attn).data.clone();
        let wv = ctx.value(self.vars.w_value).data.clone();
        let wout = ctx.value(self.vars.w_out).data.clone();
        let (x, c, d, h, w) = materialize_lifted(&context, &weight, self.cam);
        let space = Volume3d { data: &x, d, h, w };
        let refs: Vec<&[f64]> = self.refs.iter().map(|r| r.as_slice()).collect();

        let plane = h * w;
        let ctx_base = self.cam * c * plane;
        let wgt_base = self.cam * d * plane;
        let mut d_queries = vec![0.0; queries.len()];
        let mut d_wo = vec![0.0; wo.len()];
        let mut d_bo = vec![0.0; bo.len()];
        let mut d_wa = vec![0.0; wa.len()];
        let mut d_ba = vec![0.0; ba.len()];
        let mut d_wv = vec![0.0; wv.len()];
        let mut d_wout = vec![0.0; wout.len()];
        let mut d_bout = vec![0.0; c];
        let mut d_ctx = vec![0.0; context.len()];
        let mut d_wgt = vec![0.0; weight.len()];
        {
            let mut grads = KernelGrads {
                queries: Some(&mut d_queries),
                w_offset: Some(&mut d_wo),
                b_offset: Some(&mut d_bo),
                w_attn: Some(&mut d_wa),
                b_attn: Some(&mut d_ba),
                w_value: Some(&mut d_wv),
                w_out: Some(&mut d_wout),
                b_out: Some(&mut d_bout),
            };
            // d_X decomposes through the outer product on the fly.
            let mut scatter = |idx: usize, gv: f64| {
                let p = idx % plane;
                let dz = (idx / plane) % d;
                let ch = idx / (d * plane);
                d_ctx[ctx_base + ch * plane + p] += gv * weight.data[wgt_base + dz * plane + p];
                d_wgt[wgt_base + dz * plane + p] += gv * context.data[ctx_base + ch * plane + p];
            };
            kernel_backward(
                &self.meta,
                &space,
                g,
                &queries.data,
                &refs,
                &self.visible,
                &wo,
                &bo,
                &wa,
                &ba,
                &wv,
                &wout,
                &mut grads,
                &mut scatter,
            );
        }
        accumulate(ctx, self.queries, &d_queries);
        accumulate(ctx, self.lifted.context, &d_ctx);
        accumulate(ctx, self.lifted.depth_weight, &d_wgt);
        accumulate(ctx, self.vars.w_offset, &d_wo);
        accumulate(ctx, self.vars.b_offset, &d_bo);
        accumulate(ctx, self.vars.w_attn, &d_wa);
        accumulate(ctx, self.vars.b_attn, &d_ba);
        accumulate(ctx, self.vars.w_value, &d_wv);
        accumulate(ctx, self.vars.w_out, &d_wout);
        accumulate(ctx, self.vars.b_out, &d_bout);
    }
}

struct AggregateCamerasOp {
    inputs: Vec<Var>,
    inv_counts: Vec<f64>,
    cols: usize,
}

impl TapeOp for AggregateCamerasOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        for inp in &self.inputs {
            let d = ctx.grad_mut(*inp);
            for (i, gi) in g.iter().enumerate() {
                d[i] += gi * self.inv_counts[i / self.cols];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// public entry points

fn check_queries(tape: &Tape, queries: Var, refs_len: usize, vis_len: usize) -> Result<Meta> {
    let qs = tape.value(queries).shape.clone();
    if qs.len() != 2 {
        return Err(CoreError::ShapeMismatch {
            op: "deform_attn",
            detail: format!("queries must be [Q, C], got {qs:?}"),
        });
    }
    if refs_len != qs[0] || vis_len != qs[0] {
        return Err(CoreError::ShapeMismatch {
            op: "deform_attn",
            detail: format!("{} refs / {} vis for {} queries", refs_len, vis_len, qs[0]),
        });
    }
    Ok(Meta { channels: qs[1], n_heads: 0, n_points: 0, off_dim: 0, q: qs[0] })
}

fn meta_for(params: &DeformAttnParams, q: usize, channels: usize) -> Result<Meta> {
    if params.channels != channels {
        return Err(CoreError::ShapeMismatch {
            op: "deform_attn",
            detail: format!("params expect C={}, queries have C={}", params.channels, channels),
        });
    }
    Ok(Meta {
        channels,
        n_heads: params.n_heads,
        n_points: params.n_points,
        off_dim: params.off_dim,
        q,
    })
}

/// 2D deformable attention over one camera plane of `value` ([C,H,W] or
/// [N,C,H,W] with `cam` selecting the plane).
pub fn deform_attn_2d(
    tape: &mut Tape,
    value: Var,
    cam: usize,
    queries: Var,
    refs: &QueryRefs2d,
    params: &DeformAttnParams,
    vars: &AttnVars,
) -> Result<Var> {
    let m0 = check_queries(tape, queries, refs.refs.len(), refs.visible.len())?;
    if params.off_dim != 2 {
        return Err(CoreError::Config { detail: "deform_attn_2d needs off_dim = 2".into() });
    }
    let meta = meta_for(params, m0.q, m0.channels)?;
    let vshape = tape.value(value).shape.clone();
    if !(vshape.len() == 3 || vshape.len() == 4) {
        return Err(CoreError::ShapeMismatch {
            op: "deform_attn_2d",
            detail: format!("value {vshape:?}"),
        });
    }
    let (n, c, h, w) = plane_dims(&vshape);
    if cam >= n || c != meta.channels {
        return Err(CoreError::ShapeMismatch {
            op: "deform_attn_2d",
            detail: format!("cam {cam} of {n}, value C={c} vs {}", meta.channels),
        });
    }
    let out = {
        let space =
            Plane2d { data: &tape.value(value).data, base: cam * c * h * w, h, w };
        let refs_sl: Vec<&[f64]> = refs.refs.iter().map(|r| r.as_slice()).collect();
        kernel_forward(
            &meta,
            &space,
            &tape.value(queries).data,
            &refs_sl,
            &refs.visible,
            &tape.value(vars.w_offset).data,
            &tape.value(vars.b_offset).data,
            &tape.value(vars.w_attn).data,
            &tape.value(vars.b_attn).data,
            &tape.value(vars.w_value).data,
            &tape.value(vars.w_out).data,
            &tape.value(vars.b_out).data,
        )
    };
    let t = Tensor { shape: vec![meta.q, meta.channels], data: out };
    Ok(tape.push_op(
        t,
        Box::new(DeformAttn2dOp {
            value,
            cam,
            queries,
            refs: refs.refs.clone(),
            visible: refs.visible.clone(),
            vars: *vars,
            meta,
        }),
    ))
}

fn check_lifted(tape: &Tape, lifted: &LiftedValueView, cam: usize, c_expected: usize) -> Result<()> {
    let cs = tape.value(lifted.context).shape.clone();
    let ws = tape.value(lifted.depth_weight).shape.clone();
    let (nc, c, hc, wc) = plane_dims(&cs);
    let (nw, _, hw_, ww) = plane_dims(&ws);
    if nc != nw || hc != hw_ || wc != ww {
        return Err(CoreError::ShapeMismatch {
            op: "deform_attn_3d",
            detail: format!("context {cs:?} vs depth_weight {ws:?}"),
        });
    }
    if cam >= nc {
        return Err(CoreError::ShapeMismatch {
            op: "deform_attn_3d",
            detail: format!("camera {cam} of {nc}"),
        });
    }
    if c != c_expected {
        return Err(CoreError::ShapeMismatch {
            op: "deform_attn_3d",
            detail: format!("context C={c} vs queries C={c_expected}"),
        });
    }
    Ok(())
}

/// Depth-weighted 3D deformable attention, factored: memory stays
/// O(C·H·W + D·H·W); the lifted tensor is never materialized.
pub fn deform_attn_3d_factored(
    tape: &mut Tape,
    lifted: LiftedValueView,
    cam: usize,
    queries: Var,
    refs: &QueryRefs3d,
    params: &DeformAttnParams,
    vars: &AttnVars,
) -> Result<Var> {
    let m0 = check_queries(tape, queries, refs.refs.len(), refs.visible.len())?;
    if params.off_dim != 3 {
        return Err(CoreError::Config { detail: "deform_attn_3d needs off_dim = 3".into() });
    }
    let meta = meta_for(params, m0.q, m0.channels)?;
    check_lifted(tape, &lifted, cam, meta.channels)?;
    let (_, c, h, w) = plane_dims(&tape.value(lifted.context).shape);
    let (_, d, _, _) = plane_dims(&tape.value(lifted.depth_weight).shape);
    // Workspace: per-sample scratch only, independent of D.
    let ws_bytes = (3 * meta.channels + meta.off_dim) * core::mem::size_of::<f64>();
    tape.stats.factored_workspace_bytes = tape.stats.factored_workspace_bytes.max(ws_bytes);
    let out = {
        let space = FactoredLifted {
            ctx: &tape.value(lifted.context).data,
            ctx_base: cam * c * h * w,
            wgt: &tape.value(lifted.depth_weight).data,
            wgt_base: cam * d * h * w,
            d,
            h,
            w,
        };
        let refs_sl: Vec<&[f64]> = refs.refs.iter().map(|r| r.as_slice()).collect();
        kernel_forward(
            &meta,
            &space,
            &tape.value(queries).data,
            &refs_sl,
            &refs.visible,
            &tape.value(vars.w_offset).data,
            &tape.value(vars.b_offset).data,
            &tape.value(vars.w_attn).data,
            &tape.value(vars.b_attn).data,
            &tape.value(vars.w_value).data,
            &tape.value(vars.w_out).data,
            &tape.value(vars.b_out).data,
        )
    };
    let t = Tensor { shape: vec![meta.q, meta.channels], data: out };
    Ok(tape.push_op(
        t,
        Box::new(DeformAttn3dFactoredOp {
            lifted,
            cam,
            queries,
            refs: refs.refs.clone(),
            visible: refs.visible.clone(),
            vars: *vars,
            meta,
        }),
    ))
}

/// Naive 3D deformable attention: materializes the lifted tensor
/// X = depth_weight ⊗ context and samples it trilinearly. Correctness oracle
/// for the factored kernel.
#[allow(clippy::too_many_arguments)]
pub fn deform_attn_3d_naive(
    tape: &mut Tape,
    lifted: LiftedValueView,
    cam: usize,
    queries: Var,
    refs: &QueryRefs3d,
    params: &DeformAttnParams,
    vars: &AttnVars,
    element_budget: usize,
) -> Result<Var> {
    let m0 = check_queries(tape, queries, refs.refs.len(), refs.visible.len())?;
    if params.off_dim != 3 {
        return Err(CoreError::Config { detail: "deform_attn_3d needs off_dim = 3".into() });
    }
    let meta = meta_for(params, m0.q, m0.channels)?;
    check_lifted(tape, &lifted, cam, meta.channels)?;
    let (_, c, h, w) = plane_dims(&tape.value(lifted.context).shape);
    let (_, d, _, _) = plane_dims(&tape.value(lifted.depth_weight).shape);
    let elements = c * d * h * w;
    if elements > element_budget {
        return Err(CoreError::Resource {
            detail: format!("materializing {elements} elements exceeds budget {element_budget}"),
        });
    }
    let out = {
        let (x, _c, d, h, w) =
            materialize_lifted(tape.value(lifted.context), tape.value(lifted.depth_weight), cam);
        let ws_bytes = x.len() * core::mem::size_of::<f64>();
        tape.stats.naive_workspace_bytes = tape.stats.naive_workspace_bytes.max(ws_bytes);
        let space = Volume3d { data: &x, d, h, w };
        let refs_sl: Vec<&[f64]> = refs.refs.iter().map(|r| r.as_slice()).collect();
        kernel_forward(
            &meta,
            &space,
            &tape.value(queries).data,
            &refs_sl,
            &refs.visible,
            &tape.value(vars.w_offset).data,
            &tape.value(vars.b_offset).data,
            &tape.value(vars.w_attn).data,
            &tape.value(vars.b_attn).data,
            &tape.value(vars.w_value).data,
            &tape.value(vars.w_out).data,
            &tape.value(vars.b_out).data,
        )
    };
    let t = Tensor { shape: vec![meta.q, meta.channels], data: out };
    Ok(tape.push_op(
        t,
        Box::new(DeformAttn3dNaiveOp {
            lifted,
            cam,
            queries,
            refs: refs.refs.clone(),
            visible: refs.visible.clone(),
            vars: *vars,
            meta,
        }),
    ))
}

/// Sum per-camera outputs, normalized per query by max(hit count, 1).
pub fn multi_camera_aggregate(
    tape: &mut Tape,
    per_camera: &[Var],
    hit_counts: &[usize],
) -> Result<Var> {
    if per_camera.is_empty() {
        return Err(CoreError::ShapeMismatch {
            op: "multi_camera_aggregate",
            detail: "no camera outputs".into(),
        });
    }
    let shape = tape.value(per_camera[0]).shape.clone();
    if shape.len() != 2 || shape[0] != hit_counts.len() {
        return Err(CoreError::ShapeMismatch {
            op: "multi_camera_aggregate",
            detail: format!("outputs {shape:?} vs {} hit counts", hit_counts.len()),
        });
    }
    for v in per_camera {
        if tape.value(*v).shape != shape {
            return Err(CoreError::ShapeMismatch {
                op: "multi_camera_aggregate",
                detail: "camera outputs differ in shape".into(),
            });
        }
    }
    let cols = shape[1];
    let inv_counts: Vec<f64> = hit_counts.iter().map(|&h| 1.0 / h.max(1) as f64).collect();
    let mut data = vec![0.0; shape[0] * cols];
    for v in per_camera {
        let src = &tape.value(*v).data;
        for (i, o) in data.iter_mut().enumerate() {
            *o += src[i] * inv_counts[i / cols];
        }
    }
    let t = Tensor { shape, data };
    Ok(tape.push_op(
        t,
        Box::new(AggregateCamerasOp { inputs: per_camera.to_vec(), inv_counts, cols }),
    ))
}
