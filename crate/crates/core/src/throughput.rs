//! Wall-clock search throughput, counted in template comparisons.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{validation, Result};
use crate::gallery::Gallery;
use crate::template::FixedTemplate;

/// Candidates kept per probe while benchmarking.
pub const BENCH_TOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub gallery_size: usize,
    pub dim: usize,
    pub probes: usize,
    pub repetitions: usize,
    pub threads: usize,
    pub matches_per_sec_1t: f64,
    pub matches_per_sec_mt: f64,
    /// Median single-thread latency of one probe against the whole gallery.
    pub probe_latency_ms: f64,
}

/// Times `repetitions` passes of every query through a full top-k search,
/// first on the calling thread, then spread over `threads` workers.
pub fn benchmark(gallery: &Gallery, queries: &[FixedTemplate], repetitions: usize, threads: usize) -> Result<BenchReport> {
    if queries.is_empty() || repetitions == 0 {
        return Err(validation("benchmark needs at least one query and one repetition"));
    }
    if let Some(q) = queries.iter().find(|q| q.dim() != gallery.dim()) {
        return Err(validation(format!(
            "query dim {} does not match gallery dim {}",
            q.dim(),
            gallery.dim()
        )));
    }
    let threads = threads.max(1);
    let comparisons = (gallery.len() * queries.len() * repetitions) as f64;

    let mut latencies = Vec::with_capacity(queries.len() * repetitions);
    let start = Instant::now();
    for _ in 0..repetitions {
        for q in queries {
            let t0 = Instant::now();
            std::hint::black_box(gallery.search(q, BENCH_TOP_K)?);
            latencies.push(t0.elapsed().as_secs_f64());
        }
    }
    let single = start.elapsed().as_secs_f64();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| validation(format!("cannot start {threads} worker threads: {e}")))?;
    let start = Instant::now();
    pool.install(|| -> Result<()> {
        for _ in 0..repetitions {
            queries
                .par_iter()
                .try_for_each(|q| gallery.search(q, BENCH_TOP_K).map(|r| drop(std::hint::black_box(r))))?;
        }
        Ok(())
    })?;
    let multi = start.elapsed().as_secs_f64();

    latencies.sort_by(f64::total_cmp);
    let median = latencies[latencies.len() / 2];
    Ok(BenchReport {
        gallery_size: gallery.len(),
        dim: gallery.dim(),
        probes: queries.len(),
        repetitions,
        threads,
        matches_per_sec_1t: comparisons / single.max(f64::MIN_POSITIVE),
        matches_per_sec_mt: comparisons / multi.max(f64::MIN_POSITIVE),
        probe_latency_ms: median * 1e3,
    })
}

/// Seconds for one single-threaded pass of `queries` over `gallery`; the
/// best of `trials` runs.
pub fn time_single_pass(gallery: &Gallery, queries: &[FixedTemplate], trials: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..trials.max(1) {
        let start = Instant::now();
        for q in queries {
            std::hint::black_box(gallery.search(q, BENCH_TOP_K)?);
        }
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}
