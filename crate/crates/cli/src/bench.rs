//! The `bench` command: batch-1 latency against batched throughput.

use std::time::Instant;

use facekp::model::{count_params, Workspace};
use facekp::pipeline::Detector;
use facekp::tensor::Tensor;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    /// Per-image milliseconds, one sample per iteration.
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
}

impl Timing {
    fn from_samples(samples_ms: Vec<f64>) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_ms = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Self { samples_ms, median_ms }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub backbone: String,
    pub params: usize,
    pub input: [usize; 2],
    pub batch: usize,
    pub iters: usize,
    pub threads: usize,
    /// One image at a time, buffers allocated per call.
    pub online: Timing,
    /// `batch` images per call sharing buffers; per-image time.
    pub offline: Timing,
}

/// Deterministic textured input so timings do not depend on sparsity.
pub fn bench_image(height: usize, width: usize) -> Tensor {
    Tensor::from_fn(3, height, width, |c, y, x| {
        ((x * 7 + y * 13 + c * 29) % 256) as f32 / 255.0
    })
}

pub fn run_bench(
    det: &Detector,
    height: usize,
    width: usize,
    batch: usize,
    iters: usize,
    threads: usize,
) -> CliResult<BenchReport> {
    if batch == 0 || iters == 0 {
        return Err(CliError::Flag {
            flag: "batch/iters",
            message: "must both be >= 1".into(),
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Flag {
            flag: "threads",
            message: e.to_string(),
        })?;
    let i_max = height.max(width) as f64;
    let single = bench_image(height, width);
    // same content in both modes so decode work matches
    let images = vec![single.clone(); batch];
    // warm-up, also surfaces shape errors before timing
    det.detect(&single, i_max, &mut Workspace::new())?;

    let mut online = Vec::with_capacity(iters);
    let mut offline = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        det.detect(&single, i_max, &mut Workspace::new())?;
        online.push(t.elapsed().as_secs_f64() * 1e3);

        let t = Instant::now();
        let done: facekp::Result<Vec<usize>> = pool.install(|| {
            images
                .par_iter()
                .map_init(Workspace::new, |ws, img| det.detect(img, i_max, ws).map(|d| d.len()))
                .collect()
        });
        done?;
        offline.push(t.elapsed().as_secs_f64() * 1e3 / batch as f64);
    }
    Ok(BenchReport {
        backbone: det.graph.name().to_string(),
        params: count_params(&det.graph),
        input: [height, width],
        batch,
        iters,
        threads,
        online: Timing::from_samples(online),
        offline: Timing::from_samples(offline),
    })
}
