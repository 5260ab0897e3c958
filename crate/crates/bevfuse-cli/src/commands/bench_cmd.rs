//! `bench`: wall time and peak kernel workspace of the factored vs the
//! materialized 3D attention kernel as the depth-bin count grows.

use anyhow::Result;
use std::path::PathBuf;
use std::time::Instant;

use bevfuse_core::attention::{
    deform_attn_3d_factored, deform_attn_3d_naive, DeformAttnParams, LiftedValueView,
    QueryRefs3d, DEFAULT_NAIVE_BUDGET,
};
use bevfuse_core::params::ParamStore;
use bevfuse_core::rng::{Stream, StreamId};
use bevfuse_core::tape::Tape;
use bevfuse_core::tensor::Tensor;

pub struct BenchArgs {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub depth_bins: Vec<usize>,
    pub repeats: usize,
}

pub struct BenchRow {
    pub depth_bins: usize,
    pub factored_ms: f64,
    pub naive_ms: f64,
    pub factored_peak_bytes: usize,
    pub naive_peak_bytes: usize,
}

/// Forward + backward of both kernels on one random instance per D.
pub fn kernel_scaling(seed: u64, depth_bins: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    let (c, h, w, q, heads, points) = (8usize, 10usize, 12usize, 32usize, 2usize, 4usize);
    let mut rows = Vec::new();
    for &d in depth_bins {
        let mut store = ParamStore::new();
        let mut ps = Stream::new(seed, StreamId::Params);
        let params = DeformAttnParams::new(&mut store, "bench", c, heads, points, 3, &mut ps)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let mut nudge = Stream::new(seed ^ 1, StreamId::Params);
        store.nudge_zeros(0.3, &mut nudge);
        let mut s = Stream::new(seed ^ d as u64, StreamId::Instances);
        let context = Tensor::rand_uniform(&[1, c, h, w], -1.0, 1.0, &mut s);
        let weight = Tensor::rand_uniform(&[1, d, h, w], 0.0, 1.0, &mut s);
        let queries = Tensor::rand_uniform(&[q, c], -1.0, 1.0, &mut s);
        let refs = QueryRefs3d {
            refs: (0..q)
                .map(|_| {
                    [
                        s.uniform_in(0.5, w as f64 - 1.5),
                        s.uniform_in(0.5, h as f64 - 1.5),
                        s.uniform_in(0.0, d as f64 - 1.0),
                    ]
                })
                .collect(),
            visible: vec![true; q],
        };

        let mut run = |naive: bool| -> Result<(f64, usize)> {
            let t0 = Instant::now();
            let mut peak = 0usize;
            for _ in 0..repeats {
                let mut tape = Tape::new();
                let vars = store.leaves(&mut tape);
                let av = params.vars(&vars);
                let ctx = tape.leaf(context.clone());
                let wgt = tape.leaf(weight.clone());
                let qv = tape.leaf(queries.clone());
                let lifted = LiftedValueView { context: ctx, depth_weight: wgt };
                let out = if naive {
                    deform_attn_3d_naive(
                        &mut tape,
                        lifted,
                        0,
                        qv,
                        &refs,
                        &params,
                        &av,
                        DEFAULT_NAIVE_BUDGET,
                    )
                } else {
                    deform_attn_3d_factored(&mut tape, lifted, 0, qv, &refs, &params, &av)
                }
                .map_err(|e| anyhow::anyhow!("{e}"))?;
                let root = tape.sum_all(out);
                tape.backward(root);
                peak = peak.max(if naive {
                    tape.stats.naive_workspace_bytes
                } else {
                    tape.stats.factored_workspace_bytes
                });
            }
            Ok((t0.elapsed().as_secs_f64() * 1e3 / repeats as f64, peak))
        };
        let (factored_ms, factored_peak) = run(false)?;
        let (naive_ms, naive_peak) = run(true)?;
        rows.push(BenchRow {
            depth_bins: d,
            factored_ms,
            naive_ms,
            factored_peak_bytes: factored_peak,
            naive_peak_bytes: naive_peak,
        });
    }
    Ok(rows)
}

pub fn run(args: &BenchArgs) -> Result<()> {
    let rows = kernel_scaling(args.seed, &args.depth_bins, args.repeats)?;
    let mut csv = crate::io::CsvWriter::new();
    csv.row(
        ["D", "factored_ms", "naive_ms", "factored_peak_bytes", "naive_peak_bytes"]
            .map(String::from),
    );
    for r in &rows {
        csv.row([
            r.depth_bins.to_string(),
            format!("{:.3}", r.factored_ms),
            format!("{:.3}", r.naive_ms),
            r.factored_peak_bytes.to_string(),
            r.naive_peak_bytes.to_string(),
        ]);
    }
    csv.print();
    if let Some(path) = &args.out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        csv.write(path)?;
        println!("bench table: {}", path.display());
    }
    Ok(())
}
