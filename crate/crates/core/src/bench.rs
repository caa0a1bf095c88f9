//! Per-iteration timing of hard-assignment EM, full-covariance EM and
//! Lloyd's algorithm as the number of agents grows.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::{hard_em_step, player_distributions};
use crate::discovery::em_step_full;
use crate::ingest::{flatten, prepare};
use crate::kmeans::lloyd;
use crate::numeric::linear_fit;
use crate::synth::{generate_formation, sample_dataset};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_values: Vec<usize>,
    pub frames: usize,
    pub reps: usize,
    /// Timed iterations per method in each repetition; the median is reported.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_values: vec![4, 6, 8, 10, 12, 14],
            frames: 1500,
            reps: 3,
            iterations: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub rep: usize,
    pub hard_secs: f64,
    pub soft_secs: f64,
    pub kmeans_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    /// Slopes of `ln t` against `ln N`.
    pub hard_slope: f64,
    pub soft_slope: f64,
    pub kmeans_slope: f64,
    pub slope_difference: f64,
    /// Mean hard / soft time at `N = 10`, when measured.
    pub ratio_at_10: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_median(iterations: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Times one iteration of each method on synthetic data with `N = K` for
/// every `N` in the config. Runs on a single worker thread.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.n_values.is_empty() || cfg.reps == 0 || cfg.frames == 0 {
        return Err(Error::invalid("benchmark needs agent counts, frames and at least one repetition"));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    pool.install(|| {
        let mut rows = Vec::new();
        for &n in &cfg.n_values {
            let t = generate_formation(n, 3.0, (1.0, 1.6), cfg.seed.wrapping_add(n as u64))?;
            for rep in 0..cfg.reps {
                let (raw, _) = sample_dataset(&t, cfg.frames, 0.05, 0.1, cfg.seed.wrapping_add(1000 * rep as u64 + n as u64))?;
                let ds = prepare(&raw, false)?;
                let flat = flatten(&ds);
                let state = player_distributions(&ds)?;
                let formation = state.to_formation();
                let coords: Vec<f64> = flat.points().iter().flat_map(|p| [p[0], p[1]]).collect();
                let init: Vec<f64> = state.means().iter().flat_map(|p| [p[0], p[1]]).collect();

                let hard_secs = time_median(cfg.iterations, || hard_em_step(&ds, &state).map(drop))?;
                let soft_secs = time_median(cfg.iterations, || em_step_full(&formation, &flat).map(drop))?;
                let kmeans_secs = time_median(cfg.iterations, || lloyd(&coords, 2, &init, 1e-300, 1).map(drop))?;
                rows.push(BenchRow {
                    n,
                    rep,
                    hard_secs,
                    soft_secs,
                    kmeans_secs,
                });
            }
        }
        Ok(rows)
    })
}

/// Log-log slopes over the mean time per `N`.
pub fn summarize(rows: &[BenchRow]) -> Result<BenchSummary> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mean_of = |n: usize, f: fn(&BenchRow) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let slope = |f: fn(&BenchRow) -> f64| {
        let y: Vec<f64> = ns.iter().map(|&n| mean_of(n, f).ln()).collect();
        linear_fit(&x, &y)
            .map(|(s, _)| s)
            .ok_or_else(|| Error::invalid("need at least two distinct agent counts to fit a slope"))
    };
    let hard_slope = slope(|r| r.hard_secs)?;
    let soft_slope = slope(|r| r.soft_secs)?;
    let kmeans_slope = slope(|r| r.kmeans_secs)?;
    let ratio_at_10 = ns
        .contains(&10)
        .then(|| mean_of(10, |r| r.hard_secs) / mean_of(10, |r| r.soft_secs));
    Ok(BenchSummary {
        hard_slope,
        soft_slope,
        kmeans_slope,
        slope_difference: hard_slope - soft_slope,
        ratio_at_10,
    })
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
