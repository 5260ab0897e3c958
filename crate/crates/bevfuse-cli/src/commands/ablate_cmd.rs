//! `ablate`: the module toggle matrix (rows A-D) plus the frustum-view vs
//! BEV-splat radar-context comparison, over shared seeds and scenes.

use anyhow::{Context, Result};
use std::path::PathBuf;
use std::sync::Mutex;

use bevfuse_core::train::{ablation_run_config, same_ray_benchmark, train, RunConfig};

use crate::config::{FileConfig, SceneSource};
use crate::io::{fmt_f64, CsvWriter};

pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub workers: usize,
}

struct Job {
    benchmark: &'static str,
    config: char,
    variant: &'static str,
    seed: u64,
    run: RunConfig,
}

struct JobResult {
    iou: f64,
    ray_sep: f64,
}

/// Run all jobs on a fixed-size worker pool; results keep job order.
fn run_jobs(jobs: Vec<Job>, workers: usize) -> Result<Vec<(Job, JobResult)>> {
    let n = jobs.len();
    let queue = Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results: Mutex<Vec<Option<(Job, JobResult)>>> =
        Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..workers.max(1) {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let next = queue.lock().unwrap().pop();
                    let Some((idx, job)) = next else { break };
                    let r = train(&job.run).map_err(|e| anyhow::anyhow!("{e}"))?;
                    results.lock().unwrap()[idx] =
                        Some((job, JobResult { iou: r.final_iou, ray_sep: r.final_ray_sep }));
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;
    Ok(results.into_inner().unwrap().into_iter().map(|r| r.expect("job ran")).collect())
}

pub fn run(args: &AblateArgs) -> Result<()> {
    let file_cfg =
        crate::config::load_or_default(args.config.as_deref(), FileConfig::bench_default())?;
    let base = file_cfg.run_config(None)?;

    // The frustum/BEV comparison isolates the radar-context path on the
    // same-ray benchmark (no occupancy guidance, config C).
    let mut same_ray_file = file_cfg.clone();
    same_ray_file.scene_source = SceneSource::Benchmark("same_ray_bench".into());
    let same_ray_base = same_ray_file.run_config(None)?;
    // Make sure the named benchmark resolves even from custom configs.
    let _ = same_ray_benchmark(&same_ray_base.rig, &same_ray_base.bins)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut jobs = Vec::new();
    for &seed in &args.seeds {
        for tag in ['A', 'B', 'C', 'D'] {
            jobs.push(Job {
                benchmark: "table4",
                config: tag,
                variant: "frustum",
                seed,
                run: ablation_run_config(&base, tag, false, seed)
                    .map_err(|e| anyhow::anyhow!("{e}"))?,
            });
        }
        for (variant, splat) in [("frustum", false), ("bev_splat", true)] {
            jobs.push(Job {
                benchmark: "same_ray",
                config: 'C',
                variant,
                seed,
                run: ablation_run_config(&same_ray_base, 'C', splat, seed)
                    .map_err(|e| anyhow::anyhow!("{e}"))?,
            });
        }
    }

    let results = run_jobs(jobs, args.workers)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut csv = CsvWriter::new();
    csv.comment(&format!(
        "seeds: {}",
        args.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
    ));
    csv.comment(&format!(
        "table4 scene seeds: {}",
        base.scenes.iter().map(|s| s.seed.to_string()).collect::<Vec<_>>().join(" ")
    ));
    csv.comment(&format!(
        "same_ray scene seeds: {}",
        same_ray_base.scenes.iter().map(|s| s.seed.to_string()).collect::<Vec<_>>().join(" ")
    ));
    csv.row(["benchmark", "config", "variant", "seed", "iou", "ray_sep"].map(String::from));
    for (job, r) in &results {
        csv.row([
            job.benchmark.to_string(),
            job.config.to_string(),
            job.variant.to_string(),
            job.seed.to_string(),
            fmt_f64(r.iou),
            fmt_f64(r.ray_sep),
        ]);
    }
    csv.write(&args.out.join("ablation.csv"))?;
    csv.print();
    println!("ablation table: {}", args.out.join("ablation.csv").display());
    Ok(())
}
