//! Fit reporting: transition-posterior grids, pairwise latent marginals,
//! calibration metrics against the kink benchmark, and the sampling-cost
//! benchmark behind the complexity claims.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::optim::{init_model, FitConfig, Model};
use crate::posterior::{
    sample_chunked, ChunkScheme, NoiseShape, TrajectoryNoise, VariantId,
};
use crate::sparse_gp::InducingPosterior;
use crate::ssm::{kink, simulate, EmissionModel, ProcessNoise};

/// Transition-posterior moments at one grid point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

/// Marginal posterior moments of the GP transition function over a 1-D grid.
pub fn grid_posterior(
    gp: &InducingPosterior<f64>,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<GridPoint>> {
    assert!(n >= 2);
    let prep = gp.prepare()?;
    (0..n)
        .map(|i| {
            let x = if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            };
            let g = prep.predict_marginal(&[x])?;
            Ok(GridPoint {
                x,
                mean: g.mean[0],
                std: g.diag_vars()[0].sqrt(),
            })
        })
        .collect()
}

/// Sample moments of `(x_t, x_{t+1})` under the fitted posterior.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairMoments {
    pub t: usize,
    pub mean_t: f64,
    pub mean_t1: f64,
    pub c00: f64,
    pub c01: f64,
    pub c11: f64,
}

/// Estimate the pairwise marginals `q(x_t, x_{t+1})` from trajectory samples.
pub fn pairwise_marginals(
    variant: VariantId,
    model: &Model<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PairMoments>> {
    let t_len = model.chain.t_len();
    let prep = model.gp.prepare()?;
    let scheme = ChunkScheme::single(t_len);
    let shape = NoiseShape {
        t_len,
        d: model.chain.state_dim(),
        m: model.gp.num_inducing(),
        dout: model.gp.output_dim(),
        n_chunks: 1,
    };
    let mut sum = vec![[0.0f64; 2]; t_len - 1];
    let mut sq = vec![[0.0f64; 3]; t_len - 1];
    for i in 0..n_samples {
        let noise = TrajectoryNoise::for_sample(variant, shape, seed, 0, i as u64);
        let s = sample_chunked(variant, &model.chain, &prep, &scheme, &noise, false)?;
        let x = s.states();
        for t in 0..t_len - 1 {
            let (a, b) = (x[(t, 0)], x[(t + 1, 0)]);
            sum[t][0] += a;
            sum[t][1] += b;
            sq[t][0] += a * a;
            sq[t][1] += a * b;
            sq[t][2] += b * b;
        }
    }
    let n = n_samples as f64;
    Ok((0..t_len - 1)
        .map(|t| {
            let m0 = sum[t][0] / n;
            let m1 = sum[t][1] / n;
            PairMoments {
                t,
                mean_t: m0,
                mean_t1: m1,
                c00: sq[t][0] / n - m0 * m0,
                c01: sq[t][1] / n - m0 * m1,
                c11: sq[t][2] / n - m1 * m1,
            }
        })
        .collect())
}

/// Calibration of the fitted transition posterior against the kink function.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of grid points whose true transition value lies inside the
    /// 2σ band.
    pub coverage2sigma: f64,
    /// Mean width of the 2σ band (4σ) over the restricted grid.
    pub mean_band_width: f64,
    pub rmse_vs_true: f64,
}

/// Metrics over the grid points falling inside `[lo, hi]` (the data-covered
/// region).
pub fn metrics_vs_kink(grid: &[GridPoint], lo: f64, hi: f64) -> Metrics {
    let pts: Vec<&GridPoint> = grid.iter().filter(|p| p.x >= lo && p.x <= hi).collect();
    assert!(!pts.is_empty(), "no grid points inside [{lo}, {hi}]");
    let mut covered = 0usize;
    let mut band = 0.0;
    let mut sq = 0.0;
    for p in &pts {
        let truth = kink(p.x);
        if (truth - p.mean).abs() <= 2.0 * p.std {
            covered += 1;
        }
        band += 4.0 * p.std;
        sq += (truth - p.mean) * (truth - p.mean);
    }
    let n = pts.len() as f64;
    Metrics {
        coverage2sigma: covered as f64 / n,
        mean_band_width: band / n,
        rmse_vs_true: (sq / n).sqrt(),
    }
}

/// One timing measurement of trajectory sampling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub t_len: usize,
    /// Chunk length, 0 for unchunked sampling.
    pub tau: usize,
    pub median_seconds: f64,
}

/// Median per-trajectory sampling time for each variant and sequence
/// length, plus a chunked run of the non-factorised variant at fixed `tau`.
pub fn run_benchmark(
    variants: &[VariantId],
    t_values: &[usize],
    reps: usize,
    m: usize,
    tau: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &t_len in t_values {
        let q = ProcessNoise::isotropic(1, 0.01);
        let em = EmissionModel::identity(1, 0.1);
        let ds = simulate(|x| vec![kink(x[0])], t_len, &q, &em, seed);

        for &variant in variants {
            let cfg = FitConfig::default();
            let (model, _, _) = init_model(&ds, variant, m, &cfg)?;
            rows.push(time_variant(&model, variant, t_len, None, reps, seed)?);
        }
        if variants.contains(&VariantId::NonFactorised) {
            let cfg = FitConfig {
                tau: Some(tau),
                ..FitConfig::default()
            };
            let (model, _, _) = init_model(&ds, VariantId::NonFactorised, m, &cfg)?;
            rows.push(time_variant(
                &model,
                VariantId::NonFactorised,
                t_len,
                Some(tau),
                reps,
                seed,
            )?);
        }
    }
    Ok(rows)
}

fn time_variant(
    model: &Model<f64>,
    variant: VariantId,
    t_len: usize,
    tau: Option<usize>,
    reps: usize,
    seed: u64,
) -> Result<BenchRow> {
    let prep = model.gp.prepare()?;
    let scheme = &model.scheme;
    let shape = NoiseShape {
        t_len,
        d: 1,
        m: model.gp.num_inducing(),
        dout: 1,
        n_chunks: scheme.n_chunks(),
    };
    let noise = TrajectoryNoise::for_sample(variant, shape, seed, 0, 0);

    // Calibrate an inner repeat count so one rep is long enough to time.
    let probe = Instant::now();
    sample_chunked(variant, &model.chain, &prep, scheme, &noise, false)?;
    let once = probe.elapsed().as_secs_f64();
    let inner = ((2e-3 / once.max(1e-9)) as usize).clamp(1, 2000);

    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..inner {
            let s = sample_chunked(variant, &model.chain, &prep, scheme, &noise, false)?;
            std::hint::black_box(&s.chunks.len());
        }
        times.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BenchRow {
        variant: variant.name().to_string(),
        t_len,
        tau: tau.unwrap_or(0),
        median_seconds: times[times.len() / 2],
    })
}

/// Least-squares slope of `ln(median_seconds)` against `ln(T)`.
pub fn loglog_slope(rows: &[&BenchRow]) -> f64 {
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| (r.t_len as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_seconds.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
