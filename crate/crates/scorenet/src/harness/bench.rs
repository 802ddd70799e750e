//! Wall-clock throughput measurement: repeated single-image inference
//! after a warmup, reported as images per second with a sample standard
//! deviation.

use std::time::Instant;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::infer::{infer_forward, vanilla_infer, VanillaParams};
use crate::model::{ScoreNetConfig, ScoreNetParams};
use crate::numerics::Tensor;

/// One benchmark row. `threads` is the declared worker budget for the
/// run; compute here is sequential, so it is an environment descriptor
/// rather than a parallelism knob.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub model: String,
    pub h: usize,
    pub w: usize,
    pub images_per_sec: f64,
    pub stddev: f64,
    pub threads: usize,
}

pub const BENCH_CSV_HEADER: &str = "model,H,W,images_per_sec,stddev,threads";

impl BenchResult {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{}",
            self.model, self.h, self.w, self.images_per_sec, self.stddev, self.threads
        )
    }
}

/// Times `f` once per iteration and inverts the per-iteration latency.
/// The mean is total-time based; the stddev is the sample standard
/// deviation of the per-iteration rates.
pub fn throughput_bench(
    model: &str,
    h: usize,
    w: usize,
    warmup: usize,
    iters: usize,
    threads: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<BenchResult> {
    if iters == 0 {
        return Err(Error::config("benchmark needs at least one timed iteration"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut rates = Vec::with_capacity(iters);
    let mut total = 0f64;
    for _ in 0..iters {
        let t0 = Instant::now();
        f()?;
        let dt = t0.elapsed().as_secs_f64();
        if dt <= 0.0 {
            return Err(Error::numeric("iteration finished in unmeasurable time"));
        }
        rates.push(1.0 / dt);
        total += dt;
    }
    let mean_rate = iters as f64 / total;
    let stddev = if iters > 1 {
        let mean_of_rates: f64 = rates.iter().sum::<f64>() / iters as f64;
        let var: f64 = rates.iter().map(|r| (r - mean_of_rates).powi(2)).sum::<f64>()
            / (iters - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    Ok(BenchResult {
        model: model.to_string(),
        h,
        w,
        images_per_sec: mean_rate,
        stddev,
        threads,
    })
}

/// Times the two-stage pipeline end to end on one image.
pub fn bench_two_stage(
    image: &Tensor,
    cfg: &ScoreNetConfig,
    params: &ScoreNetParams,
    warmup: usize,
    iters: usize,
    threads: usize,
) -> Result<BenchResult> {
    let (_, h, w) = image.dims3()?;
    throughput_bench("scorenet", h, w, warmup, iters, threads, || {
        infer_forward(image, cfg, params).map(|_| ())
    })
}

/// Times the single-scale full-attention reference on one image.
pub fn bench_vanilla(
    image: &Tensor,
    cfg: &EncoderConfig,
    params: &VanillaParams,
    warmup: usize,
    iters: usize,
    threads: usize,
) -> Result<BenchResult> {
    let (_, h, w) = image.dims3()?;
    throughput_bench("vanilla", h, w, warmup, iters, threads, || {
        vanilla_infer(image, cfg, params).map(|_| ())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn repeated_measurements_agree_within_twenty_percent() {
        let work = || {
            std::thread::sleep(Duration::from_millis(10));
            Ok(())
        };
        let a = throughput_bench("sleepy", 1, 1, 1, 5, 1, work).unwrap();
        let b = throughput_bench("sleepy", 1, 1, 1, 5, 1, work).unwrap();
        let ratio = a.images_per_sec / b.images_per_sec;
        assert!((0.8..=1.25).contains(&ratio), "ratio {ratio}");
        assert!(a.images_per_sec > 50.0 && a.images_per_sec < 110.0);
    }

    #[test]
    fn zero_iterations_is_a_config_error() {
        let err = throughput_bench("x", 1, 1, 0, 0, 1, || Ok(())).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn csv_row_matches_header_shape() {
        let row = BenchResult {
            model: "scorenet".to_string(),
            h: 256,
            w: 256,
            images_per_sec: 12.5,
            stddev: 0.25,
            threads: 1,
        };
        assert_eq!(BENCH_CSV_HEADER.split(',').count(), row.to_csv().split(',').count());
        assert_eq!(row.to_csv(), "scorenet,256,256,12.500000,0.250000,1");
    }

    #[test]
    fn errors_from_the_workload_propagate() {
        let mut calls = 0;
        let err = throughput_bench("x", 1, 1, 0, 3, 1, || {
            calls += 1;
            if calls == 2 {
                Err(Error::numeric("boom"))
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
