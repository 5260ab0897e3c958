//! Losses: depth BCE, Gaussian focal occupancy, and the BEV segmentation
//! cross-entropy proxy task, plus IoU metrics.
//!
//! The total is the plain unit-weight sum of the three parts.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::geometry::DepthBins;
use crate::params::{ParamRef, ParamStore};
use crate::rng::Stream;
use crate::tape::{BackwardCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

const LOG_CLAMP: f64 = 1e-12;

fn safe_ln(x: f64) -> f64 {
    crate::mathf::ln(x.max(LOG_CLAMP))
}

/// Per-part loss values; total is their exact sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub depth: f64,
    pub occupancy: f64,
    pub task: f64,
}

// ---------------------------------------------------------------------------
// depth BCE

struct DepthBceOp {
    pred: Var,
    /// Per element of the [N, H*W] pixel space: target bin or -1 if invalid.
    target_bins: Vec<i32>,
    bins: usize,
    plane: usize,
    n_valid: usize,
}

impl TapeOp for DepthBceOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let pred = ctx.value(self.pred).data.clone();
        let dp = ctx.grad_mut(self.pred);
        let scale = g[0] / self.n_valid.max(1) as f64;
        let d = self.bins;
        for (pix, &tb) in self.target_bins.iter().enumerate() {
            if tb < 0 {
                continue;
            }
            let cam = pix / self.plane;
            let p_off = pix % self.plane;
            for k in 0..d {
                let idx = (cam * d + k) * self.plane + p_off;
                let p = pred[idx];
                if k as i32 == tb {
                    if p > LOG_CLAMP {
                        dp[idx] += scale * (-1.0 / p);
                    }
                } else if 1.0 - p > LOG_CLAMP {
                    dp[idx] += scale * (1.0 / (1.0 - p));
                }
            }
        }
    }
}

/// Per-pixel binary cross-entropy between the depth distribution and the
/// one-hot true-bin target, averaged over pixels with valid depth. Pixels
/// without a surface (or outside the bin range) are excluded, not zeroed.
pub fn depth_loss(
    tape: &mut Tape,
    depth_dist: Var,
    depth_images: &[Tensor],
    bins: &DepthBins,
) -> Result<Var> {
    let shape = tape.value(depth_dist).shape.clone();
    if shape.len() != 4 || shape[0] != depth_images.len() || shape[1] != bins.count {
        return Err(CoreError::ShapeMismatch {
            op: "depth_loss",
            detail: format!("I_D {shape:?} vs {} cameras, D={}", depth_images.len(), bins.count),
        });
    }
    let plane = shape[2] * shape[3];
    let mut target_bins = Vec::with_capacity(shape[0] * plane);
    let mut n_valid = 0usize;
    for dimg in depth_images {
        if dimg.len() != plane {
            return Err(CoreError::ShapeMismatch {
                op: "depth_loss",
                detail: "depth image size mismatch".to_string(),
            });
        }
        for &d in &dimg.data {
            if d.is_finite() && bins.contains(d) {
                target_bins.push(bins.bin_of(d) as i32);
                n_valid += 1;
            } else {
                target_bins.push(-1);
            }
        }
    }
    let pred = &tape.value(depth_dist).data;
    let mut acc = 0.0;
    for (pix, &tb) in target_bins.iter().enumerate() {
        if tb < 0 {
            continue;
        }
        let cam = pix / plane;
        let p_off = pix % plane;
        for k in 0..bins.count {
            let p = pred[(cam * bins.count + k) * plane + p_off];
            if k as i32 == tb {
                acc -= safe_ln(p);
            } else {
                acc -= safe_ln(1.0 - p);
            }
        }
    }
    let value = acc / n_valid.max(1) as f64;
    Ok(tape.push_op(
        Tensor::scalar(value),
        Box::new(DepthBceOp { pred: depth_dist, target_bins, bins: bins.count, plane, n_valid }),
    ))
}

// ---------------------------------------------------------------------------
// Gaussian focal occupancy

const FOCAL_ALPHA: f64 = 2.0;
const FOCAL_BETA: f64 = 4.0;

struct GaussianFocalOp {
    pred: Var,
    heat: Vec<f64>,
    n_pos: usize,
}

impl TapeOp for GaussianFocalOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let pred = ctx.value(self.pred).data.clone();
        let dp = ctx.grad_mut(self.pred);
        let scale = g[0] / self.n_pos.max(1) as f64;
        for (i, (&p, &y)) in pred.iter().zip(&self.heat).enumerate() {
            if y >= 1.0 {
                // d/dp [ (1-p)^2 ln p ]
                let term = -2.0 * (1.0 - p) * safe_ln(p)
                    + if p > LOG_CLAMP { (1.0 - p) * (1.0 - p) / p } else { 0.0 };
                dp[i] += -scale * term;
            } else {
                // d/dp [ (1-y)^4 p^2 ln(1-p) ]
                let w = crate::mathf::pow(1.0 - y, FOCAL_BETA);
                let term = 2.0 * p * safe_ln(1.0 - p)
                    - if 1.0 - p > LOG_CLAMP { p * p / (1.0 - p) } else { 0.0 };
                dp[i] += -scale * w * term;
            }
        }
    }
}

/// CenterNet-style Gaussian focal loss between predicted occupancy and the
/// center heatmap, normalized by the positive count (or 1 if none).
pub fn occupancy_loss(tape: &mut Tape, occupancy: Var, heatmaps: &[Tensor]) -> Result<Var> {
    let shape = tape.value(occupancy).shape.clone();
    if shape.len() != 4 || shape[0] != heatmaps.len() || shape[1] != 1 {
        return Err(CoreError::ShapeMismatch {
            op: "occupancy_loss",
            detail: format!("I_O {shape:?} vs {} heatmaps", heatmaps.len()),
        });
    }
    let plane = shape[2] * shape[3];
    let mut heat = Vec::with_capacity(shape[0] * plane);
    for h in heatmaps {
        if h.len() != plane {
            return Err(CoreError::ShapeMismatch {
                op: "occupancy_loss",
                detail: "heatmap size mismatch".to_string(),
            });
        }
        if h.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::Data { detail: "heatmap outside [0, 1]".to_string() });
        }
        heat.extend_from_slice(&h.data);
    }
    let pred = &tape.value(occupancy).data;
    let mut acc = 0.0;
    let mut n_pos = 0usize;
    for (&p, &y) in pred.iter().zip(&heat) {
        if y >= 1.0 {
            n_pos += 1;
            acc -= crate::mathf::pow(1.0 - p, FOCAL_ALPHA) * safe_ln(p);
        } else {
            acc -= crate::mathf::pow(1.0 - y, FOCAL_BETA)
                * crate::mathf::pow(p, FOCAL_ALPHA)
                * safe_ln(1.0 - p);
        }
    }
    let value = acc / n_pos.max(1) as f64;
    Ok(tape.push_op(Tensor::scalar(value), Box::new(GaussianFocalOp { pred: occupancy, heat, n_pos })))
}

// ---------------------------------------------------------------------------
// segmentation head + cross-entropy

struct SegCrossEntropyOp {
    logits: Var,
    labels: Vec<usize>,
    classes: usize,
}

impl TapeOp for SegCrossEntropyOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let logits = ctx.value(self.logits).data.clone();
        let dl = ctx.grad_mut(self.logits);
        let cells = self.labels.len();
        let scale = g[0] / cells as f64;
        for (cell, &label) in self.labels.iter().enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..self.classes {
                mx = mx.max(logits[k * cells + cell]);
            }
            let mut z = 0.0;
            for k in 0..self.classes {
                z += crate::mathf::exp(logits[k * cells + cell] - mx);
            }
            for k in 0..self.classes {
                let p = crate::mathf::exp(logits[k * cells + cell] - mx) / z;
                let t = if k == label { 1.0 } else { 0.0 };
                dl[k * cells + cell] += scale * (p - t);
            }
        }
    }
}

/// Two conv layers over the encoded BEV, then per-cell softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct SegHeadParams {
    pub classes: usize,
    pub conv1: ParamRef,
    pub conv1_bias: ParamRef,
    pub conv2: ParamRef,
    pub conv2_bias: ParamRef,
}

impl SegHeadParams {
    pub fn new(store: &mut ParamStore, channels: usize, classes: usize, stream: &mut Stream) -> Self {
        SegHeadParams {
            classes,
            conv1: store.register_uniform(
                "seg.conv1".into(),
                &[channels, channels, 3, 3],
                channels * 9,
                stream,
            ),
            conv1_bias: store.register_zeros("seg.conv1_bias".into(), &[channels]),
            conv2: store.register_uniform(
                "seg.conv2".into(),
                &[classes, channels, 3, 3],
                channels * 9,
                stream,
            ),
            conv2_bias: store.register_zeros("seg.conv2_bias".into(), &[classes]),
        }
    }
}

/// Returns (logits [K, X, Y], mean cross-entropy loss).
pub fn segmentation_head_and_loss(
    tape: &mut Tape,
    vars: &[Var],
    bev_feature: Var,
    bev_class: &Tensor,
    head: &SegHeadParams,
) -> Result<(Var, Var)> {
    let shape = tape.value(bev_feature).shape.clone();
    if shape.len() != 3 {
        return Err(CoreError::ShapeMismatch {
            op: "segmentation_head",
            detail: format!("BEV feature {shape:?}"),
        });
    }
    let cells = shape[1] * shape[2];
    if bev_class.len() != cells {
        return Err(CoreError::ShapeMismatch {
            op: "segmentation_head",
            detail: format!("labels {} vs {cells} cells", bev_class.len()),
        });
    }
    let mut labels = Vec::with_capacity(cells);
    for &v in &bev_class.data {
        let label = v as usize;
        if label >= head.classes {
            return Err(CoreError::Data {
                detail: format!("label {label} >= {} classes", head.classes),
            });
        }
        labels.push(label);
    }
    let h1 = tape.conv2d_lite(bev_feature, head.conv1.var(vars))?;
    let h1 = tape.add_chan_bias(h1, head.conv1_bias.var(vars))?;
    let h1 = tape.relu(h1);
    let logits = tape.conv2d_lite(h1, head.conv2.var(vars))?;
    let logits = tape.add_chan_bias(logits, head.conv2_bias.var(vars))?;

    // Stable mean CE over cells.
    let lv = &tape.value(logits).data;
    let k_n = head.classes;
    let mut acc = 0.0;
    for (cell, &label) in labels.iter().enumerate() {
        let mut mx = f64::NEG_INFINITY;
        for k in 0..k_n {
            mx = mx.max(lv[k * cells + cell]);
        }
        let mut z = 0.0;
        for k in 0..k_n {
            z += crate::mathf::exp(lv[k * cells + cell] - mx);
        }
        acc += crate::mathf::ln(z) + mx - lv[label * cells + cell];
    }
    let loss = tape.push_op(
        Tensor::scalar(acc / cells as f64),
        Box::new(SegCrossEntropyOp { logits, labels, classes: k_n }),
    );
    Ok((logits, loss))
}

// ---------------------------------------------------------------------------
// IoU

/// Per-class intersection and union of argmax predictions vs labels.
pub fn iou_counts(pred: &[usize], labels: &[usize], classes: usize) -> Vec<(usize, usize)> {
    let mut counts = vec![(0usize, 0usize); classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if p == y {
            counts[p].0 += 1;
            counts[p].1 += 1;
        } else {
            counts[p].1 += 1;
            counts[y].1 += 1;
        }
    }
    counts
}

/// Mean IoU over object classes (label >= 1) with nonzero union.
pub fn mean_object_iou(counts: &[(usize, usize)]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(i, u) in counts.iter().skip(1) {
        if u > 0 {
            sum += i as f64 / u as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Argmax over the class axis of [K, X, Y] logits.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let k_n = logits.shape[0];
    let cells = logits.len() / k_n;
    (0..cells)
        .map(|cell| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..k_n {
                let v = logits.data[k * cells + cell];
                if v > best.1 {
                    best = (k, v);
                }
            }
            best.0
        })
        .collect()
}

/// Assemble the breakdown from already-evaluated scalars; the tape-level
/// total is their exact sum.
pub fn breakdown(tape: &Tape, depth: Var, occupancy: Var, task: Var, total: Var) -> LossBreakdown {
    LossBreakdown {
        total: tape.scalar_value(total),
        depth: tape.scalar_value(depth),
        occupancy: tape.scalar_value(occupancy),
        task: tape.scalar_value(task),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    #[test]
    fn uniform_depth_distribution_closed_form() {
        let d = 32;
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::filled(&[1, d, 2, 2], 1.0 / d as f64));
        let depth_img = Tensor::filled(&[2, 2], 10.0);
        let bins = DepthBins { d_min: 0.5, d_max: 40.0, count: d };
        let loss = depth_loss(&mut tape, pred, &[depth_img], &bins).unwrap();
        let df = d as f64;
        let want = -((1.0 / df).ln() + (df - 1.0) * ((df - 1.0) / df).ln());
        assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn perfect_depth_prediction_has_near_zero_loss() {
        let d = 8;
        let bins = DepthBins { d_min: 0.5, d_max: 16.5, count: d };
        let mut pred = Tensor::zeros(&[1, d, 1, 2]);
        // Pixel 0 at 5 m; pixel 1 invalid (infinite).
        let k = bins.bin_of(5.0);
        pred.data[k * 2] = 1.0;
        let mut depth_img = Tensor::filled(&[1, 2], f64::INFINITY);
        depth_img.data[0] = 5.0;
        let mut tape = Tape::new();
        let p = tape.leaf(pred);
        let loss = depth_loss(&mut tape, p, &[depth_img], &bins).unwrap();
        assert!(tape.scalar_value(loss).abs() < 1e-9, "{}", tape.scalar_value(loss));
    }

    #[test]
    fn invalid_pixels_are_excluded_not_zero_filled() {
        let d = 4;
        let bins = DepthBins { d_min: 0.5, d_max: 8.5, count: d };
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::filled(&[1, d, 1, 2], 0.25));
        // One valid pixel, one empty: loss equals the single-pixel BCE.
        let mut depth_img = Tensor::filled(&[1, 2], f64::INFINITY);
        depth_img.data[0] = 3.0;
        let loss = depth_loss(&mut tape, pred, &[depth_img], &bins).unwrap();
        let want = -((0.25f64).ln() + 3.0 * (0.75f64).ln());
        assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_gradients_pass_finite_differences() {
        let d = 5;
        let bins = DepthBins { d_min: 0.5, d_max: 10.5, count: d };
        let mut s = Stream::new(3, StreamId::Instances);
        // Interior probabilities away from the clamp.
        let pred = Tensor::rand_uniform(&[1, d, 2, 3], 0.05, 0.95, &mut s);
        let depth_img = Tensor::new(
            &[2, 3],
            vec![2.0, 4.0, f64::INFINITY, 7.0, 9.0, 1.0],
        )
        .unwrap();
        let rep = crate::gradcheck::grad_check(
            &move |t: &mut Tape, vs: &[Var]| depth_loss(t, vs[0], &[depth_img.clone()], &bins),
            &[pred],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }

    #[test]
    fn focal_loss_closed_forms() {
        // Half occupancy on an all-zero heatmap.
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 0.5));
        let heat = Tensor::zeros(&[2, 2]);
        let loss = occupancy_loss(&mut tape, pred, &[heat]).unwrap();
        let per_pixel = 0.25 * -(0.5f64).ln();
        assert!((tape.scalar_value(loss) - 4.0 * per_pixel).abs() < 1e-12);

        // Exact prediction of a 0/1 map.
        let mut heat2 = Tensor::zeros(&[2, 2]);
        heat2.data[1] = 1.0;
        let mut pred2 = Tensor::zeros(&[1, 1, 2, 2]);
        pred2.data[1] = 1.0;
        let p2 = tape.leaf(pred2);
        let loss2 = occupancy_loss(&mut tape, p2, &[heat2]).unwrap();
        assert!(tape.scalar_value(loss2).abs() < 1e-9);
    }

    #[test]
    fn focal_loss_gradients_pass_finite_differences() {
        let mut s = Stream::new(5, StreamId::Instances);
        let pred = Tensor::rand_uniform(&[1, 1, 3, 3], 0.1, 0.9, &mut s);
        let mut heat = Tensor::zeros(&[3, 3]);
        heat.data[4] = 1.0;
        heat.data[1] = 0.6; // soft negative
        let rep = crate::gradcheck::grad_check(
            &move |t: &mut Tape, vs: &[Var]| occupancy_loss(t, vs[0], &[heat.clone()]),
            &[pred],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }

    #[test]
    fn zero_positive_heatmap_normalizes_by_one() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::filled(&[1, 1, 1, 2], 0.5));
        let heat = Tensor::zeros(&[1, 2]);
        let loss = occupancy_loss(&mut tape, pred, &[heat]).unwrap();
        // Two pixels, no normalization by positives.
        assert!((tape.scalar_value(loss) - 2.0 * 0.25 * (2.0f64).ln()).abs() < 1e-12);
    }

    fn seg_fixture(c: usize, k: usize) -> (ParamStore, SegHeadParams) {
        let mut store = ParamStore::new();
        let mut s = Stream::new(7, StreamId::Params);
        let head = SegHeadParams::new(&mut store, c, k, &mut s);
        (store, head)
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        // Zero feature + zero weights -> uniform logits -> loss = ln K.
        let (store, head) = seg_fixture(3, 4);
        let mut store = store;
        *store.tensor_mut(head.conv1) = Tensor::zeros(&[3, 3, 3, 3]);
        *store.tensor_mut(head.conv2) = Tensor::zeros(&[4, 3, 3, 3]);
        let mut tape = Tape::new();
        let vars = store.leaves(&mut tape);
        let feat = tape.leaf(Tensor::zeros(&[3, 4, 4]));
        let labels = Tensor::zeros(&[4, 4]);
        let (_, loss) = segmentation_head_and_loss(&mut tape, &vars, feat, &labels, &head).unwrap();
        assert!((tape.scalar_value(loss) - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn labels_out_of_range_error() {
        let (store, head) = seg_fixture(3, 2);
        let mut tape = Tape::new();
        let vars = store.leaves(&mut tape);
        let feat = tape.leaf(Tensor::zeros(&[3, 2, 2]));
        let labels = Tensor::filled(&[2, 2], 5.0);
        assert!(matches!(
            segmentation_head_and_loss(&mut tape, &vars, feat, &labels, &head),
            Err(CoreError::Data { .. })
        ));
    }

    #[test]
    fn seg_gradients_pass_finite_differences() {
        let (mut store, head) = seg_fixture(3, 3);
        let mut nudge = Stream::new(8, StreamId::Params);
        store.nudge_zeros(0.05, &mut nudge);
        let mut s = Stream::new(9, StreamId::Instances);
        let feat = Tensor::rand_uniform(&[3, 3, 4], -1.0, 1.0, &mut s);
        let mut labels = Tensor::zeros(&[3, 4]);
        for (i, v) in labels.data.iter_mut().enumerate() {
            *v = (i % 3) as f64;
        }
        let mut tensors = store.tensors();
        tensors.push(feat);
        let rep = crate::gradcheck::grad_check(
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
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }

    #[test]
    fn iou_matches_brute_force_sets() {
        let mut s = Stream::new(11, StreamId::Instances);
        let classes = 4;
        let n = 200;
        let pred: Vec<usize> = (0..n).map(|_| s.below(classes)).collect();
        let labels: Vec<usize> = (0..n).map(|_| s.below(classes)).collect();
        let counts = iou_counts(&pred, &labels, classes);
        // Brute force with explicit index sets.
        for k in 0..classes {
            let p_set: Vec<usize> = (0..n).filter(|&i| pred[i] == k).collect();
            let l_set: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            let inter = p_set.iter().filter(|i| l_set.contains(i)).count();
            let union = p_set.len() + l_set.len() - inter;
            assert_eq!(counts[k], (inter, union), "class {k}");
        }
        let mean = mean_object_iou(&counts);
        assert!((0.0..=1.0).contains(&mean));
    }

    #[test]
    fn breakdown_total_is_exact_sum() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.125));
        let b = tape.leaf(Tensor::scalar(2.5));
        let c = tape.leaf(Tensor::scalar(0.0625));
        let ab = tape.add(a, b).unwrap();
        let total = tape.add(ab, c).unwrap();
        let lb = breakdown(&tape, a, b, c, total);
        assert_eq!(lb.total, lb.depth + lb.occupancy + lb.task);
        assert!(lb.total >= 0.0);
    }
}
