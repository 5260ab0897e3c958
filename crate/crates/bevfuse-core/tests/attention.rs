//! Kernel contracts: degenerate cases, factored-vs-materialized equivalence,
//! and finite-difference gradients.

use bevfuse_core::attention::{
    deform_attn_2d, deform_attn_3d_factored, deform_attn_3d_naive, multi_camera_aggregate,
    DeformAttnParams, LiftedValueView, QueryRefs2d, QueryRefs3d, DEFAULT_NAIVE_BUDGET,
};
use bevfuse_core::gradcheck::grad_check;
use bevfuse_core::params::ParamStore;
use bevfuse_core::rng::{Stream, StreamId};
use bevfuse_core::tape::{Tape, Var};
use bevfuse_core::tensor::Tensor;

fn eye(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data[i * n + i] = 1.0;
    }
    t
}

struct Fixture {
    store: ParamStore,
    params: DeformAttnParams,
}

fn fixture(c: usize, heads: usize, points: usize, off_dim: usize, seed: u64) -> Fixture {
    let mut store = ParamStore::new();
    let mut s = Stream::new(seed, StreamId::Params);
    let params =
        DeformAttnParams::new(&mut store, "attn", c, heads, points, off_dim, &mut s).unwrap();
    Fixture { store, params }
}

impl Fixture {
    fn set(&mut self, r: bevfuse_core::params::ParamRef, t: Tensor) {
        *self.store.tensor_mut(r) = t;
    }
}

#[test]
fn degenerate_attention_is_bilinear_sampling() {
    // 1 head, 1 point, zero offsets, identity value/output projections.
    let c = 3;
    let mut fx = fixture(c, 1, 1, 2, 1);
    fx.set(fx.params.w_value, eye(c));
    fx.set(fx.params.w_out, eye(c));

    let mut s = Stream::new(2, StreamId::Instances);
    let value = Tensor::rand_uniform(&[c, 6, 7], -1.0, 1.0, &mut s);
    let queries = Tensor::rand_uniform(&[4, c], -1.0, 1.0, &mut s);
    let refs = QueryRefs2d {
        refs: vec![[1.3, 2.7], [0.4, 4.1], [5.9, 0.2], [3.0, 3.0]],
        visible: vec![true; 4],
    };

    let mut tape = Tape::new();
    let vars = fx.store.leaves(&mut tape);
    let av = fx.params.vars(&vars);
    let v = tape.leaf(value.clone());
    let q = tape.leaf(queries);
    let out = deform_attn_2d(&mut tape, v, 0, q, &refs, &fx.params, &av).unwrap();

    for (qi, r) in refs.refs.iter().enumerate() {
        let uv = tape.leaf(Tensor::new(&[2], vec![r[0], r[1]]).unwrap());
        let expect = tape.bilinear_sample(v, uv).unwrap();
        for ch in 0..c {
            let got = tape.value(out).data[qi * c + ch];
            let want = tape.value(expect).data[ch];
            assert!((got - want).abs() < 1e-12, "query {qi} ch {ch}: {got} vs {want}");
        }
    }
}

#[test]
fn constant_map_gives_constant_output_for_any_offsets() {
    let c = 4;
    let mut fx = fixture(c, 2, 3, 2, 3);
    // Nonzero offsets and non-uniform attention logits.
    let mut s = Stream::new(5, StreamId::Instances);
    fx.set(fx.params.b_offset, Tensor::rand_uniform(&[2 * 3 * 2], -1.5, 1.5, &mut s));
    fx.set(fx.params.b_attn, Tensor::rand_uniform(&[2 * 3], -1.0, 1.0, &mut s));

    let value = Tensor::filled(&[c, 8, 8], 0.75);
    let queries = Tensor::rand_uniform(&[3, c], -1.0, 1.0, &mut s);
    // Interior refs so offset samples stay in bounds.
    let refs = QueryRefs2d {
        refs: vec![[3.2, 3.8], [4.1, 3.1], [3.7, 4.4]],
        visible: vec![true; 3],
    };
    let mut tape = Tape::new();
    let vars = fx.store.leaves(&mut tape);
    let av = fx.params.vars(&vars);
    let v = tape.leaf(value);
    let q = tape.leaf(queries);
    let out = deform_attn_2d(&mut tape, v, 0, q, &refs, &fx.params, &av).unwrap();
    let row0: Vec<f64> = tape.value(out).data[0..c].to_vec();
    for qi in 1..3 {
        for ch in 0..c {
            assert!(
                (tape.value(out).data[qi * c + ch] - row0[ch]).abs() < 1e-12,
                "row {qi} differs"
            );
        }
    }
}

#[test]
fn attention_weights_stay_on_the_simplex() {
    // With unit value map and identity projections, each head slice of the
    // output equals the head's weight sum, so it must be exactly 1.
    let c = 6;
    let mut fx = fixture(c, 3, 4, 2, 7);
    fx.set(fx.params.w_value, eye(c));
    fx.set(fx.params.w_out, eye(c));
    let mut s = Stream::new(11, StreamId::Instances);
    fx.set(fx.params.b_attn, Tensor::rand_uniform(&[3 * 4], -2.0, 2.0, &mut s));
    fx.set(fx.params.w_attn, Tensor::rand_uniform(&[c, 3 * 4], -1.0, 1.0, &mut s));

    let value = Tensor::filled(&[c, 9, 9], 1.0);
    let queries = Tensor::rand_uniform(&[5, c], -1.0, 1.0, &mut s);
    let refs = QueryRefs2d {
        refs: vec![[4.0, 4.0]; 5],
        visible: vec![true; 5],
    };
    let mut tape = Tape::new();
    let vars = fx.store.leaves(&mut tape);
    let av = fx.params.vars(&vars);
    let v = tape.leaf(value);
    let q = tape.leaf(queries);
    let out = deform_attn_2d(&mut tape, v, 0, q, &refs, &fx.params, &av).unwrap();
    for x in &tape.value(out).data {
        assert!((x - 1.0).abs() < 1e-12, "head weight sum drifted: {x}");
    }
}

#[test]
fn uniform_depth_weight_reduces_to_2d_attention() {
    let c = 4;
    let (heads, points) = (2, 2);
    let mut fx3 = fixture(c, heads, points, 3, 9);
    let mut fx2 = fixture(c, heads, points, 2, 9);
    // Share the value/output projections across both kernels.
    let mut s = Stream::new(21, StreamId::Params);
    let wv = Tensor::rand_uniform(&[c, c], -0.5, 0.5, &mut s);
    let wo = Tensor::rand_uniform(&[c, c], -0.5, 0.5, &mut s);
    fx3.set(fx3.params.w_value, wv.clone());
    fx3.set(fx3.params.w_out, wo.clone());
    fx2.set(fx2.params.w_value, wv);
    fx2.set(fx2.params.w_out, wo);

    let mut si = Stream::new(22, StreamId::Instances);
    let context = Tensor::rand_uniform(&[1, c, 6, 8], -1.0, 1.0, &mut si);
    let weight = Tensor::filled(&[1, 5, 6, 8], 1.0);
    let queries = Tensor::rand_uniform(&[6, c], -1.0, 1.0, &mut si);
    let refs3 = QueryRefs3d {
        refs: (0..6).map(|i| [0.7 + i as f64, 1.3 + 0.4 * i as f64, 2.2]).collect(),
        visible: vec![true; 6],
    };
    let refs2 = QueryRefs2d {
        refs: refs3.refs.iter().map(|r| [r[0], r[1]]).collect(),
        visible: vec![true; 6],
    };

    let mut tape = Tape::new();
    let vars3 = fx3.store.leaves(&mut tape);
    let av3 = fx3.params.vars(&vars3);
    let vars2 = fx2.store.leaves(&mut tape);
    let av2 = fx2.params.vars(&vars2);
    let ctx = tape.leaf(context.clone());
    let wgt = tape.leaf(weight);
    let q = tape.leaf(queries);
    let lifted = LiftedValueView { context: ctx, depth_weight: wgt };
    let out3 =
        deform_attn_3d_factored(&mut tape, lifted, 0, q, &refs3, &fx3.params, &av3).unwrap();
    let out2 = deform_attn_2d(&mut tape, ctx, 0, q, &refs2, &fx2.params, &av2).unwrap();
    let diff = tape.value(out3).max_abs_diff(tape.value(out2));
    assert!(diff < 1e-12, "3d with unit weight vs 2d: {diff}");
}

#[test]
fn one_hot_depth_weight_selects_by_bin() {
    let c = 3;
    let mut fx = fixture(c, 1, 1, 3, 13);
    fx.set(fx.params.w_value, eye(c));
    fx.set(fx.params.w_out, eye(c));

    let mut si = Stream::new(31, StreamId::Instances);
    let context = Tensor::rand_uniform(&[1, c, 5, 5], 0.5, 1.5, &mut si);
    let d = 7;
    let k = 3;
    let mut weight = Tensor::zeros(&[1, d, 5, 5]);
    for p in 0..25 {
        weight.data[k * 25 + p] = 1.0;
    }
    let queries = Tensor::rand_uniform(&[2, c], -1.0, 1.0, &mut si);
    let at = |dq: f64| QueryRefs3d {
        refs: vec![[2.0, 2.0, dq], [1.0, 3.0, dq]],
        visible: vec![true; 2],
    };

    let mut tape = Tape::new();
    let vars = fx.store.leaves(&mut tape);
    let av = fx.params.vars(&vars);
    let ctx = tape.leaf(context.clone());
    let wgt = tape.leaf(weight);
    let q = tape.leaf(queries);
    let lifted = LiftedValueView { context: ctx, depth_weight: wgt };

    let hit =
        deform_attn_3d_factored(&mut tape, lifted, 0, q, &at(k as f64), &fx.params, &av).unwrap();
    // Full context at the exact bin.
    assert!((tape.value(hit).data[0] - context.data[2 * 5 + 2]).abs() < 1e-12);
    for off in [-2.0f64, 2.0] {
        let miss = deform_attn_3d_factored(
            &mut tape,
            lifted,
            0,
            q,
            &at(k as f64 + off),
            &fx.params,
            &av,
        )
        .unwrap();
        for x in &tape.value(miss).data {
            assert_eq!(*x, 0.0, "bin {off} away from one-hot must give zero");
        }
    }
}

fn random_instance(seed: u64) -> (Fixture, Tensor, Tensor, Tensor, QueryRefs3d, usize) {
    let mut s = Stream::new(seed, StreamId::Instances);
    let n = 1 + s.below(2);
    let heads = 1 + s.below(2);
    let ch_per = 1 + s.below(4);
    let c = heads * ch_per;
    let points = 1 + s.below(4);
    let d = 2 + s.below(7);
    let h = 2 + s.below(7);
    let w = 2 + s.below(7);
    let q = 1 + s.below(16);
    let cam = s.below(n);

    let mut fx = fixture(c, heads, points, 3, seed ^ 0xabc);
    let hp = heads * points;
    let mut sp = Stream::new(seed ^ 0x77, StreamId::Params);
    fx.set(fx.params.w_offset, Tensor::rand_uniform(&[c, hp * 3], -0.6, 0.6, &mut sp));
    fx.set(fx.params.b_offset, Tensor::rand_uniform(&[hp * 3], -1.0, 1.0, &mut sp));
    fx.set(fx.params.w_attn, Tensor::rand_uniform(&[c, hp], -0.8, 0.8, &mut sp));
    fx.set(fx.params.b_attn, Tensor::rand_uniform(&[hp], -0.5, 0.5, &mut sp));
    fx.set(fx.params.b_out, Tensor::rand_uniform(&[c], -0.3, 0.3, &mut sp));

    let context = Tensor::rand_uniform(&[n, c, h, w], -1.0, 1.0, &mut s);
    let weight = Tensor::rand_uniform(&[n, d, h, w], 0.0, 1.0, &mut s);
    let queries = Tensor::rand_uniform(&[q, c], -1.0, 1.0, &mut s);
    let refs = QueryRefs3d {
        // Include out-of-bounds references to exercise the zero padding.
        refs: (0..q)
            .map(|_| {
                [
                    s.uniform_in(-2.0, w as f64 + 1.0),
                    s.uniform_in(-2.0, h as f64 + 1.0),
                    s.uniform_in(-1.5, d as f64 + 0.5),
                ]
            })
            .collect(),
        visible: (0..q).map(|_| s.uniform() > 0.15).collect(),
    };
    (fx, context, weight, queries, refs, cam)
}

#[test]
fn factored_matches_naive_on_random_instances() {
    let mut worst = 0.0f64;
    for seed in 0..40 {
        let (fx, context, weight, queries, refs, cam) = random_instance(seed);
        let mut tape = Tape::new();
        let vars = fx.store.leaves(&mut tape);
        let av = fx.params.vars(&vars);
        let ctx = tape.leaf(context);
        let wgt = tape.leaf(weight);
        let q = tape.leaf(queries);
        let lifted = LiftedValueView { context: ctx, depth_weight: wgt };
        let fast =
            deform_attn_3d_factored(&mut tape, lifted, cam, q, &refs, &fx.params, &av).unwrap();
        let slow = deform_attn_3d_naive(
            &mut tape,
            lifted,
            cam,
            q,
            &refs,
            &fx.params,
            &av,
            DEFAULT_NAIVE_BUDGET,
        )
        .unwrap();
        worst = worst.max(tape.value(fast).max_abs_diff(tape.value(slow)));
    }
    assert!(worst < 1e-10, "max |factored - naive| = {worst}");
}

#[test]
fn factored_and_naive_agree_on_gradients_too() {
    let (fx, context, weight, queries, refs, cam) = random_instance(123);
    let mut s = Stream::new(99, StreamId::Probe);
    let probe = Tensor::rand_uniform(&[queries.shape[0], queries.shape[1]], -1.0, 1.0, &mut s);

    let run = |naive: bool| -> Vec<Tensor> {
        let mut tape = Tape::new();
        let vars = fx.store.leaves(&mut tape);
        let av = fx.params.vars(&vars);
        let ctx = tape.leaf(context.clone());
        let wgt = tape.leaf(weight.clone());
        let q = tape.leaf(queries.clone());
        let lifted = LiftedValueView { context: ctx, depth_weight: wgt };
        let out = if naive {
            deform_attn_3d_naive(
                &mut tape,
                lifted,
                cam,
                q,
                &refs,
                &fx.params,
                &av,
                DEFAULT_NAIVE_BUDGET,
            )
            .unwrap()
        } else {
            deform_attn_3d_factored(&mut tape, lifted, cam, q, &refs, &fx.params, &av).unwrap()
        };
        let p = tape.leaf(probe.clone());
        let prod = tape.mul(out, p).unwrap();
        let root = tape.sum_all(prod);
        tape.backward(root);
        let mut grads = vec![tape.grad_tensor(ctx), tape.grad_tensor(wgt), tape.grad_tensor(q)];
        for v in &vars {
            grads.push(tape.grad_tensor(*v));
        }
        grads
    };

    let gf = run(false);
    let gn = run(true);
    for (a, b) in gf.iter().zip(&gn) {
        assert!(a.max_abs_diff(b) < 1e-10, "gradient route mismatch: {}", a.max_abs_diff(b));
    }
}

#[test]
fn naive_materialization_shape_budget_and_zero_weight() {
    let (c, d, h, w) = (4, 6, 5, 7);
    let fx = fixture(c, 2, 2, 3, 17);
    let mut s = Stream::new(3, StreamId::Instances);
    let context = Tensor::rand_uniform(&[1, c, h, w], -1.0, 1.0, &mut s);
    let weight = Tensor::zeros(&[1, d, h, w]);
    let queries = Tensor::rand_uniform(&[3, c], -1.0, 1.0, &mut s);
    let refs = QueryRefs3d {
        refs: vec![[2.3, 1.7, 2.5]; 3],
        visible: vec![true; 3],
    };
    let mut tape = Tape::new();
    let vars = fx.store.leaves(&mut tape);
    let av = fx.params.vars(&vars);
    let ctx = tape.leaf(context);
    let wgt = tape.leaf(weight);
    let q = tape.leaf(queries);
    let lifted = LiftedValueView { context: ctx, depth_weight: wgt };

    // Budget too small -> resource error.
    let too_small = deform_attn_3d_naive(&mut tape, lifted, 0, q, &refs, &fx.params, &av, 10);
    assert!(too_small.is_err());

    let out = deform_attn_3d_naive(
        &mut tape,
        lifted,
        0,
        q,
        &refs,
        &fx.params,
        &av,
        DEFAULT_NAIVE_BUDGET,
    )
    .unwrap();
    // X has C*D*H*W elements: (1,4,6,5,7) materializes 840 f64s.
    assert_eq!(tape.stats.naive_workspace_bytes, c * d * h * w * 8);
    // Zero depth weight zeroes the lifted tensor (b_out is zero here).
    for x in &tape.value(out).data {
        assert_eq!(*x, 0.0);
    }
}

#[test]
fn permuting_queries_permutes_outputs() {
    let (fx, context, weight, queries, refs, cam) = random_instance(77);
    let qn = queries.shape[0];
    let c = queries.shape[1];
    let perm: Vec<usize> = (0..qn).rev().collect();
    let mut q2 = Tensor::zeros(&[qn, c]);
    let mut refs2 = QueryRefs3d { refs: vec![[0.0; 3]; qn], visible: vec![false; qn] };
    for (dst, &src) in perm.iter().enumerate() {
        q2.data[dst * c..(dst + 1) * c].copy_from_slice(&queries.data[src * c..(src + 1) * c]);
        refs2.refs[dst] = refs.refs[src];
        refs2.visible[dst] = refs.visible[src];
    }
    let run = |qt: Tensor, r: &QueryRefs3d| -> Tensor {
        let mut tape = Tape::new();
        let vars = fx.store.leaves(&mut tape);
        let av = fx.params.vars(&vars);
        let ctx = tape.leaf(context.clone());
        let wgt = tape.leaf(weight.clone());
        let q = tape.leaf(qt);
        let lifted = LiftedValueView { context: ctx, depth_weight: wgt };
        let out = deform_attn_3d_factored(&mut tape, lifted, cam, q, r, &fx.params, &av).unwrap();
        tape.value(out).clone()
    };
    let base = run(queries.clone(), &refs);
    let permuted = run(q2, &refs2);
    for (dst, &src) in perm.iter().enumerate() {
        for ch in 0..c {
            assert_eq!(permuted.data[dst * c + ch], base.data[src * c + ch]);
        }
    }
}

#[test]
fn aggregate_normalizes_by_hit_count() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]).unwrap());
    let b = tape.leaf(Tensor::new(&[3, 2], vec![0.0, 0.0, 3.0, 4.0, 0.0, 0.0]).unwrap());
    // query 0 visible in cam a only, query 1 in both, query 2 in none.
    let out = multi_camera_aggregate(&mut tape, &[a, b], &[1, 2, 0]).unwrap();
    assert_eq!(tape.value(out).data, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
}

#[test]
fn kernel_gradients_match_finite_differences() {
    // 2D kernel.
    let (c, heads, points) = (4, 2, 2);
    let mut fx = fixture(c, heads, points, 2, 41);
    let hp = heads * points;
    let mut sp = Stream::new(42, StreamId::Params);
    fx.set(fx.params.w_offset, Tensor::rand_uniform(&[c, hp * 2], -0.4, 0.4, &mut sp));
    fx.set(fx.params.b_offset, Tensor::rand_uniform(&[hp * 2], -0.7, 0.7, &mut sp));
    fx.set(fx.params.w_attn, Tensor::rand_uniform(&[c, hp], -0.5, 0.5, &mut sp));
    fx.set(fx.params.b_attn, Tensor::rand_uniform(&[hp], -0.4, 0.4, &mut sp));

    let mut si = Stream::new(43, StreamId::Instances);
    let value = Tensor::rand_uniform(&[c, 6, 7], -1.0, 1.0, &mut si);
    let queries = Tensor::rand_uniform(&[4, c], -1.0, 1.0, &mut si);
    let refs = QueryRefs2d {
        refs: vec![[1.37, 2.61], [3.23, 1.79], [4.41, 3.57], [2.19, 2.83]],
        visible: vec![true, true, false, true],
    };
    let probe = Tensor::rand_uniform(&[4, c], -1.0, 1.0, &mut si);

    let mut tensors = fx.store.tensors();
    tensors.push(value);
    tensors.push(queries);
    let params = fx.params.clone();
    let rep = grad_check(
        &move |t: &mut Tape, vs: &[Var]| {
            let n = vs.len();
            let av = params.vars(&vs[..n - 2]);
            let out = deform_attn_2d(t, vs[n - 2], 0, vs[n - 1], &refs, &params, &av)?;
            let p = t.leaf(probe.clone());
            let prod = t.mul(out, p)?;
            Ok(t.sum_all(prod))
        },
        &tensors,
        1e-6,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-5, "2d kernel grad err {}", rep.max_rel_error);
}

#[test]
fn factored_kernel_gradients_match_finite_differences() {
    let (c, heads, points) = (4, 2, 2);
    let mut fx = fixture(c, heads, points, 3, 51);
    let hp = heads * points;
    let mut sp = Stream::new(52, StreamId::Params);
    fx.set(fx.params.w_offset, Tensor::rand_uniform(&[c, hp * 3], -0.3, 0.3, &mut sp));
    fx.set(fx.params.b_offset, Tensor::rand_uniform(&[hp * 3], -0.6, 0.6, &mut sp));
    fx.set(fx.params.w_attn, Tensor::rand_uniform(&[c, hp], -0.5, 0.5, &mut sp));
    fx.set(fx.params.b_attn, Tensor::rand_uniform(&[hp], -0.4, 0.4, &mut sp));

    let mut si = Stream::new(53, StreamId::Instances);
    let context = Tensor::rand_uniform(&[1, c, 5, 6], -1.0, 1.0, &mut si);
    let weight = Tensor::rand_uniform(&[1, 4, 5, 6], 0.05, 0.95, &mut si);
    let queries = Tensor::rand_uniform(&[3, c], -1.0, 1.0, &mut si);
    let refs = QueryRefs3d {
        refs: vec![[1.43, 2.29, 1.37], [3.19, 1.61, 2.23], [2.57, 3.07, 0.71]],
        visible: vec![true; 3],
    };
    let probe = Tensor::rand_uniform(&[3, c], -1.0, 1.0, &mut si);

    let mut tensors = fx.store.tensors();
    tensors.push(context);
    tensors.push(weight);
    tensors.push(queries);
    let params = fx.params.clone();
    let rep = grad_check(
        &move |t: &mut Tape, vs: &[Var]| {
            let n = vs.len();
            let av = params.vars(&vs[..n - 3]);
            let lifted = LiftedValueView { context: vs[n - 3], depth_weight: vs[n - 2] };
            let out = deform_attn_3d_factored(t, lifted, 0, vs[n - 1], &refs, &params, &av)?;
            let p = t.leaf(probe.clone());
            let prod = t.mul(out, p)?;
            Ok(t.sum_all(prod))
        },
        &tensors,
        1e-6,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-5, "factored kernel grad err {}", rep.max_rel_error);
}
