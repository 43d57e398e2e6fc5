//! Inference throughput at several batch sizes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    /// Timed forwards per batch size; at least 3.
    pub repeats: usize,
    /// Untimed forwards before timing; at least 1.
    pub warmup: usize,
    /// Square input side.
    pub hw: usize,
    /// Worker threads. With more than one, each batch is split into that
    /// many shards run concurrently.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_sizes: vec![1, 10, 50],
            repeats: 5,
            warmup: 1,
            hw: 32,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub batch: usize,
    /// Always `batch * 1000 / mean_ms`.
    pub img_per_s: f64,
    pub mean_ms: f64,
    /// Sample standard deviation over the repeats.
    pub std_ms: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "batch,img_per_s,mean_ms,std_ms,repeats";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.batch, r.img_per_s, r.mean_ms, r.std_ms, r.repeats
            ));
        }
        s
    }
}

/// Builds a row from raw latencies in milliseconds.
pub fn summarize(batch: usize, samples_ms: &[f64]) -> BenchRow {
    let n = samples_ms.len() as f64;
    let mean_ms = samples_ms.iter().sum::<f64>() / n;
    let var = samples_ms
        .iter()
        .map(|t| (t - mean_ms).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    BenchRow {
        batch,
        img_per_s: batch as f64 * 1000.0 / mean_ms,
        mean_ms,
        std_ms: var.sqrt(),
        repeats: samples_ms.len(),
    }
}

pub fn bench_throughput(model: &Model, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats < 3 || cfg.warmup < 1 {
        return Err(Error::Config(format!(
            "need repeats >= 3 and warmup >= 1, got {} and {}",
            cfg.repeats, cfg.warmup
        )));
    }
    if cfg.batch_sizes.is_empty() || cfg.batch_sizes.contains(&0) || cfg.threads == 0 {
        return Err(Error::Config(
            "batch sizes and thread count must be positive".into(),
        ));
    }
    model.check_input(Shape::new(1, 3, cfg.hw, cfg.hw))?;

    let threads = cfg.threads;
    par::with_threads(threads, || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let unit = Uniform::new(0.0f32, 1.0).expect("valid range");
        let mut rows = Vec::with_capacity(cfg.batch_sizes.len());
        for &batch in &cfg.batch_sizes {
            let shape = Shape::new(batch, 3, cfg.hw, cfg.hw);
            let data = (0..shape.numel()).map(|_| unit.sample(&mut rng)).collect();
            let x = Tensor::from_vec(shape, data)?;
            let run = || model.infer_sharded(&x, threads);
            for _ in 0..cfg.warmup {
                run()?;
            }
            let mut samples = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let t = Instant::now();
                let y = run()?;
                samples.push(t.elapsed().as_secs_f64() * 1000.0);
                std::hint::black_box(y);
            }
            rows.push(summarize(batch, &samples));
        }
        Ok(BenchReport { rows })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let r = summarize(10, &[1.0, 2.0, 3.0]);
        assert_eq!(r.mean_ms, 2.0);
        assert_eq!(r.std_ms, 1.0);
        assert_eq!(r.img_per_s, 10.0 * 1000.0 / 2.0);
        assert_eq!(r.repeats, 3);
    }

    #[test]
    fn csv_schema() {
        let rep = BenchReport {
            rows: vec![summarize(2, &[4.0, 4.0, 4.0])],
        };
        assert_eq!(
            rep.to_csv(),
            "batch,img_per_s,mean_ms,std_ms,repeats\n2,500,4,0,3\n"
        );
    }
}
