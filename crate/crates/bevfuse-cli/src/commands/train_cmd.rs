//! `train`: run the training loop and write metrics CSV + checkpoint.

use anyhow::{Context, Result};
use std::path::PathBuf;

use bevfuse_core::error::CoreError;
use bevfuse_core::train::{train, MetricsRow, TrainResult};

use crate::config::FileConfig;
use crate::io::{fmt_f64, CsvWriter};

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn metrics_csv(rows: &[MetricsRow], classes: usize) -> CsvWriter {
    let mut csv = CsvWriter::new();
    let mut header: Vec<String> = ["step", "loss_total", "loss_depth", "loss_occ", "loss_task"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.push("iou_mean_obj".into());
    for k in 1..classes {
        header.push(format!("iou_class{k}"));
    }
    header.push("ray_sep".into());
    csv.row(header);
    for r in rows {
        let mut fields = vec![
            r.step.to_string(),
            fmt_f64(r.loss.total),
            fmt_f64(r.loss.depth),
            fmt_f64(r.loss.occupancy),
            fmt_f64(r.loss.task),
            fmt_f64(r.iou_mean_obj),
        ];
        for k in 1..classes {
            fields.push(fmt_f64(r.iou_per_class[k]));
        }
        fields.push(fmt_f64(r.ray_sep));
        csv.row(fields);
    }
    csv
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let file_cfg =
        crate::config::load_or_default(args.config.as_deref(), FileConfig::bench_default())?;
    let cfg = file_cfg.run_config(args.seed)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let result: TrainResult = match train(&cfg) {
        Ok(r) => r,
        Err(CoreError::NonFinite { detail, .. }) => {
            // Abort with a diagnostics dump.
            let dump = args.out.join("diagnostics.txt");
            std::fs::write(&dump, format!("training aborted on non-finite loss\n{detail}\n"))?;
            anyhow::bail!("non-finite loss; diagnostics in {}", dump.display());
        }
        Err(e) => return Err(anyhow::anyhow!("{e}")),
    };

    metrics_csv(&result.rows, cfg.dims.classes).write(&args.out.join("metrics.csv"))?;
    crate::io::write_checkpoint(&args.out.join("checkpoint.bevt"), &result.store)?;
    println!(
        "trained {} steps: final loss {:.6}, mean object IoU {:.4}, ray separation {:.4}",
        cfg.optimizer.steps,
        result.rows.last().map(|r| r.loss.total).unwrap_or(f64::NAN),
        result.final_iou,
        result.final_ray_sep
    );
    println!("metrics: {}", args.out.join("metrics.csv").display());
    println!("checkpoint: {}", args.out.join("checkpoint.bevt").display());
    Ok(())
}
