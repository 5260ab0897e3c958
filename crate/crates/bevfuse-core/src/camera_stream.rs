//! Camera stream: a small shared conv trunk with three heads producing
//! per-camera context I_C, discrete depth distribution I_D (softmax over
//! bins), and occupancy I_O (sigmoid), plus the oracle stream rendered from
//! ground truth.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::geometry::DepthBins;
use crate::params::{ParamRef, ParamStore};
use crate::rng::{Stream, StreamId};
use crate::scene_sim::GroundTruth;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Two conv layers shared, then context / depth / occupancy heads.
#[derive(Debug, Clone)]
pub struct CameraEncoderParams {
    pub trunk_width: usize,
    pub channels: usize,
    pub depth_bins: usize,
    pub trunk1: ParamRef,
    pub trunk1_bias: ParamRef,
    pub trunk2: ParamRef,
    pub trunk2_bias: ParamRef,
    pub ctx_head: ParamRef,
    pub ctx_bias: ParamRef,
    pub depth_head: ParamRef,
    pub depth_bias: ParamRef,
    pub occ_head: ParamRef,
    pub occ_bias: ParamRef,
}

impl CameraEncoderParams {
    pub fn new(
        store: &mut ParamStore,
        trunk_width: usize,
        channels: usize,
        depth_bins: usize,
        stream: &mut Stream,
    ) -> Self {
        let t = trunk_width;
        CameraEncoderParams {
            trunk_width,
            channels,
            depth_bins,
            trunk1: store.register_uniform("camera.trunk1".into(), &[t, 3, 3, 3], 27, stream),
            trunk1_bias: store.register_zeros("camera.trunk1_bias".into(), &[t]),
            trunk2: store.register_uniform("camera.trunk2".into(), &[t, t, 3, 3], t * 9, stream),
            trunk2_bias: store.register_zeros("camera.trunk2_bias".into(), &[t]),
            ctx_head: store.register_uniform(
                "camera.ctx_head".into(),
                &[channels, t, 3, 3],
                t * 9,
                stream,
            ),
            ctx_bias: store.register_zeros("camera.ctx_bias".into(), &[channels]),
            depth_head: store.register_uniform(
                "camera.depth_head".into(),
                &[depth_bins, t, 3, 3],
                t * 9,
                stream,
            ),
            depth_bias: store.register_zeros("camera.depth_bias".into(), &[depth_bins]),
            occ_head: store.register_uniform("camera.occ_head".into(), &[1, t, 3, 3], t * 9, stream),
            occ_bias: store.register_zeros("camera.occ_bias".into(), &[1]),
        }
    }
}

/// Per-camera context, depth distribution, and occupancy on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ImageStreamOutput {
    /// [N, C, H, W]
    pub context: Var,
    /// [N, D, H, W]; sums to 1 over D per pixel.
    pub depth: Var,
    /// [N, 1, H, W]; entries in [0, 1].
    pub occupancy: Var,
}

/// Encode images [3, H, W] per camera into the three streams.
pub fn encode_images(
    tape: &mut Tape,
    vars: &[Var],
    images: &[Tensor],
    params: &CameraEncoderParams,
) -> Result<ImageStreamOutput> {
    if images.is_empty() {
        return Err(CoreError::Config { detail: "no camera images".to_string() });
    }
    let mut ctxs = Vec::new();
    let mut depths = Vec::new();
    let mut occs = Vec::new();
    for img in images {
        img.ensure_finite("encode_images")?;
        if img.rank() != 3 || img.shape[0] != 3 {
            return Err(CoreError::ShapeMismatch {
                op: "encode_images",
                detail: alloc::format!("expected [3, H, W], got {:?}", img.shape),
            });
        }
        let x = tape.leaf(img.clone());
        let h1 = tape.conv2d_lite(x, params.trunk1.var(vars))?;
        let h1 = tape.add_chan_bias(h1, params.trunk1_bias.var(vars))?;
        let h1 = tape.relu(h1);
        let h2 = tape.conv2d_lite(h1, params.trunk2.var(vars))?;
        let h2 = tape.add_chan_bias(h2, params.trunk2_bias.var(vars))?;
        let h2 = tape.relu(h2);
        let ctx = tape.conv2d_lite(h2, params.ctx_head.var(vars))?;
        let ctx = tape.add_chan_bias(ctx, params.ctx_bias.var(vars))?;
        let dep = tape.conv2d_lite(h2, params.depth_head.var(vars))?;
        let dep = tape.add_chan_bias(dep, params.depth_bias.var(vars))?;
        let dep = tape.softmax(dep, 0)?;
        let occ = tape.conv2d_lite(h2, params.occ_head.var(vars))?;
        let occ = tape.add_chan_bias(occ, params.occ_bias.var(vars))?;
        let occ = tape.sigmoid(occ);
        ctxs.push(ctx);
        depths.push(dep);
        occs.push(occ);
    }
    Ok(ImageStreamOutput {
        context: tape.stack(&ctxs)?,
        depth: tape.stack(&depths)?,
        occupancy: tape.stack(&occs)?,
    })
}

/// Oracle image stream as plain tensors.
#[derive(Debug, Clone)]
pub struct IdealImage {
    pub context: Tensor,
    pub depth: Tensor,
    pub occupancy: Tensor,
}

/// Deterministic unit embedding for object `index`; the same in every scene.
pub fn object_embedding(index: usize, channels: usize) -> Vec<f64> {
    let mut s = Stream::new(0x1dea, StreamId::Probe).fork(index as u64);
    let mut v: Vec<f64> = (0..channels).map(|_| s.normal()).collect();
    let norm = crate::mathf::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-9);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Perfect depth/occupancy/context rendered from the simulator's ground
/// truth. Depth is one-hot at the true bin, linearly smoothed over the two
/// adjacent bins; pixels with no surface get the far-clip bin. Only what the
/// camera actually sees is encoded: occluded objects leave no trace here.
pub fn ideal_image_outputs(
    gt: &GroundTruth,
    bins: &DepthBins,
    channels: usize,
) -> Result<IdealImage> {
    let n = gt.depth_images.len();
    if n == 0 {
        return Err(CoreError::Config { detail: "ground truth has no cameras".to_string() });
    }
    let (h, w) = (gt.depth_images[0].shape[0], gt.depth_images[0].shape[1]);
    let d = bins.count;
    let mut context = Tensor::zeros(&[n, channels, h, w]);
    let mut depth = Tensor::zeros(&[n, d, h, w]);
    let mut occupancy = Tensor::zeros(&[n, 1, h, w]);
    let plane = h * w;
    let embeddings: Vec<Vec<f64>> = {
        let max_idx =
            gt.object_index.iter().flat_map(|m| m.iter()).copied().max().unwrap_or(-1);
        (0..=max_idx.max(0) as usize).map(|i| object_embedding(i, channels)).collect()
    };
    for cam in 0..n {
        let dimg = &gt.depth_images[cam];
        let oidx = &gt.object_index[cam];
        for p in 0..plane {
            let dv = dimg.data[p];
            if dv.is_finite() {
                let t = bins.continuous_index(dv).clamp(0.0, (d - 1) as f64);
                let k0 = crate::mathf::floor(t) as usize;
                let frac = t - k0 as f64;
                depth.data[(cam * d + k0) * plane + p] = 1.0 - frac;
                if k0 + 1 < d && frac > 0.0 {
                    depth.data[(cam * d + k0 + 1) * plane + p] = frac;
                }
                occupancy.data[cam * plane + p] = 1.0;
                let obj = oidx[p];
                if obj >= 0 {
                    let emb = &embeddings[obj as usize];
                    for (c, e) in emb.iter().enumerate() {
                        context.data[(cam * channels + c) * plane + p] = *e;
                    }
                }
            } else {
                // Empty sky: far clip.
                depth.data[(cam * d + d - 1) * plane + p] = 1.0;
            }
        }
    }
    Ok(IdealImage { context, depth, occupancy })
}
