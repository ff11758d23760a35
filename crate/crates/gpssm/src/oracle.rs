//! Brute-force numerical oracles: exact log marginal likelihood at T ≤ 3 in
//! one dimension, and the demonstration that the per-point factorized
//! conditional (FITC-style) loses Markovianity once the inducing outputs are
//! marginalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::LN_2PI;
use crate::kernel::{kern, RbfParams};
use crate::quad::quad_1d;

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + LN_2PI + var.ln())
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    log_normal_pdf(x, mean, var).exp()
}

/// Setup for the tiny-scale exact marginal likelihood.
#[derive(Clone, Debug)]
pub struct OracleConfig {
    pub kernel: RbfParams<f64>,
    pub q: f64,
    pub r: f64,
    /// Absolute tolerance handed to the 1-D quadrature (T = 2).
    pub tol: f64,
    /// Tensor-grid resolution per axis (T = 3).
    pub grid_n: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            kernel: RbfParams::default_init(1),
            q: 0.01,
            r: 0.1,
            tol: 1e-10,
            grid_n: 400,
        }
    }
}

/// Exact `log p(Y)` for the 1-D generative model at T = 2 or T = 3.
///
/// At T = 2 everything but `x₁` marginalizes in closed form:
/// `p(Y) = ∫ N(x₁; 0, 1) N(y₁; x₁, R) N(y₂; 0, k(x₁,x₁) + Q + R) dx₁`.
/// At T = 3 the integral runs over `(x₁, x₂)` on a tensor grid, with the
/// Gaussian chain over `f(x₁)`, `f(x₂) | f(x₁)`, `x₃`, `y₃` marginalized in
/// closed form given the grid point.
pub fn log_marginal_quadrature(cfg: &OracleConfig, y: &[f64]) -> Result<f64> {
    match y.len() {
        2 => log_marginal_t2(cfg, y[0], y[1]),
        3 => Ok(log_marginal_t3(cfg, y, cfg.grid_n)),
        n => Err(Error::DimensionMismatch {
            what: "oracle sequence length",
            expected: 2,
            got: n,
        }),
    }
}

fn x1_range(cfg: &OracleConfig, y1: f64) -> (f64, f64) {
    // Posterior of x1 given y1 under the standard-normal prior.
    let center = y1 / (1.0 + cfg.r);
    let sd = (cfg.r / (1.0 + cfg.r)).sqrt();
    let lo = center.min(0.0) - 10.0 * sd.max(1.0);
    let hi = center.max(0.0) + 10.0 * sd.max(1.0);
    (lo, hi)
}

fn log_marginal_t2(cfg: &OracleConfig, y1: f64, y2: f64) -> Result<f64> {
    let (lo, hi) = x1_range(cfg, y1);
    let integrand = |x1: f64| {
        let kxx = kern(&[x1], &[x1], &cfg.kernel);
        normal_pdf(x1, 0.0, 1.0)
            * normal_pdf(y1, x1, cfg.r)
            * normal_pdf(y2, 0.0, kxx + cfg.q + cfg.r)
    };
    let p = quad_1d(&integrand, lo, hi, cfg.tol)?;
    Ok(p.ln())
}

fn log_marginal_t3(cfg: &OracleConfig, y: &[f64], grid_n: usize) -> f64 {
    let (y1, y2, y3) = (y[0], y[1], y[2]);
    let var0 = kern(&[0.0], &[0.0], &cfg.kernel);

    let (lo1, hi1) = x1_range(cfg, y1);
    // x2 | y2 under its N(0, k + Q) marginal prior.
    let prior2 = var0 + cfg.q;
    let c2 = y2 * prior2 / (prior2 + cfg.r);
    let s2 = (prior2 * cfg.r / (prior2 + cfg.r)).sqrt();
    let lo2 = c2.min(0.0) - 10.0 * s2.max(1.0);
    let hi2 = c2.max(0.0) + 10.0 * s2.max(1.0);

    let log_integrand = |x1: f64, x2: f64| {
        let k11 = kern(&[x1], &[x1], &cfg.kernel);
        let k22 = kern(&[x2], &[x2], &cfg.kernel);
        let k21 = kern(&[x2], &[x1], &cfg.kernel);
        // f(x2) | x2 after conditioning f(x1) on the observed transition.
        let m_f2 = k21 * x2 / (k11 + cfg.q);
        let v_f2 = k22 - k21 * k21 / (k11 + cfg.q);
        log_normal_pdf(x1, 0.0, 1.0)
            + log_normal_pdf(y1, x1, cfg.r)
            + log_normal_pdf(x2, 0.0, k11 + cfg.q)
            + log_normal_pdf(y2, x2, cfg.r)
            + log_normal_pdf(y3, m_f2, v_f2 + cfg.q + cfg.r)
    };

    // Trapezoid tensor grid in log space with max-shift accumulation.
    let h1 = (hi1 - lo1) / (grid_n - 1) as f64;
    let h2 = (hi2 - lo2) / (grid_n - 1) as f64;
    let mut logs = Vec::with_capacity(grid_n * grid_n);
    let mut max_log = f64::NEG_INFINITY;
    for i in 0..grid_n {
        let x1 = lo1 + h1 * i as f64;
        let w1: f64 = if i == 0 || i == grid_n - 1 { 0.5 } else { 1.0 };
        for j in 0..grid_n {
            let x2 = lo2 + h2 * j as f64;
            let w2: f64 = if j == 0 || j == grid_n - 1 { 0.5 } else { 1.0 };
            let l = log_integrand(x1, x2) + (w1 * w2).ln();
            logs.push(l);
            max_log = max_log.max(l);
        }
    }
    let sum: f64 = logs.iter().map(|l| (l - max_log).exp()).sum();
    max_log + sum.ln() + h1.ln() + h2.ln()
}

/// Setup for the non-Markovianity check: one inducing point at `z` with
/// `q(u) = N(mu_u, var_u)`, prior-transition steps driven by the per-point
/// factorized conditionals `p(f(x_t) | u)`.
#[derive(Clone, Debug)]
pub struct NonMarkovSetup {
    pub kernel: RbfParams<f64>,
    pub z: f64,
    pub q: f64,
    pub mu_u: f64,
    pub var_u: f64,
    pub x1_pair: (f64, f64),
    pub x2: f64,
    pub x3_grid: (f64, f64, usize),
    pub tol: f64,
}

impl Default for NonMarkovSetup {
    fn default() -> Self {
        // The two x1 values must sit at different distances from z: a
        // stationary kernel sees x1 only through |x1 - z|, so a symmetric
        // pair like ±1 around z = 0 gives identical conditionals.
        NonMarkovSetup {
            kernel: RbfParams::default_init(1),
            z: 0.0,
            q: 0.05,
            mu_u: 0.0,
            var_u: 1.0,
            x1_pair: (-1.0, 0.0),
            x2: 0.5,
            x3_grid: (-4.0, 4.0, 81),
            tol: 1e-12,
        }
    }
}

/// Result of [`fitc_nonmarkov_check`], serializable for reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonMarkovReport {
    pub x1_pair: (f64, f64),
    pub x2: f64,
    pub var_u: f64,
    /// Conditional densities `q(x₃ | x₂, x₁)` over the grid, one row per
    /// `x₁` value.
    pub densities: Vec<Vec<f64>>,
    pub x3_grid: Vec<f64>,
    pub max_deviation: f64,
    pub argmax_x3: f64,
}

/// Computes `q(x₃ | x₂, x₁)` under the u-marginalized joint at the two
/// `x₁` values and reports the largest pointwise density difference. A
/// strictly positive deviation shows the marginalized chain is not Markov.
pub fn fitc_nonmarkov_check(setup: &NonMarkovSetup) -> Result<NonMarkovReport> {
    let kzz = kern(&[setup.z], &[setup.z], &setup.kernel);
    let proj = |x: f64| kern(&[x], &[setup.z], &setup.kernel) / kzz;
    let cond_var = |x: f64| {
        let kxz = kern(&[x], &[setup.z], &setup.kernel);
        kern(&[x], &[x], &setup.kernel) - kxz * kxz / kzz
    };

    let (lo, hi, n) = setup.x3_grid;
    let x3s: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();

    let conditional = |x1: f64| -> Result<Vec<f64>> {
        let a1 = proj(x1);
        let v1 = cond_var(x1) + setup.q;
        let a2 = proj(setup.x2);
        let v2 = cond_var(setup.x2) + setup.q;

        if setup.var_u < 1e-12 {
            // Point mass: u = mu_u, transitions decouple from x1 exactly.
            return Ok(x3s
                .iter()
                .map(|&x3| normal_pdf(x3, a2 * setup.mu_u, v2))
                .collect());
        }

        // The integrand carries the prior factor N(u; mu_u, var_u), so all
        // its mass lies within the prior's ±12σ; the bounded likelihood
        // factors cannot move it. A wider interval would turn a tight prior
        // into an unresolvable needle for the adaptive rule.
        let sd_u = setup.var_u.sqrt();
        let lo_u = setup.mu_u - 12.0 * sd_u;
        let hi_u = setup.mu_u + 12.0 * sd_u;

        // q(x2 | x1) by quadrature over u.
        let denom = quad_1d(
            &|u: f64| {
                normal_pdf(u, setup.mu_u, setup.var_u) * normal_pdf(setup.x2, a1 * u, v1)
            },
            lo_u,
            hi_u,
            setup.tol,
        )?;

        x3s.iter()
            .map(|&x3| {
                let joint = quad_1d(
                    &|u: f64| {
                        normal_pdf(u, setup.mu_u, setup.var_u)
                            * normal_pdf(setup.x2, a1 * u, v1)
                            * normal_pdf(x3, a2 * u, v2)
                    },
                    lo_u,
                    hi_u,
                    setup.tol,
                )?;
                Ok(joint / denom)
            })
            .collect()
    };

    let da = conditional(setup.x1_pair.0)?;
    let db = conditional(setup.x1_pair.1)?;
    let (mut max_dev, mut argmax) = (0.0f64, x3s[0]);
    for ((a, b), &x3) in da.iter().zip(&db).zip(&x3s) {
        let dev = (a - b).abs();
        if dev > max_dev {
            max_dev = dev;
            argmax = x3;
        }
    }
    Ok(NonMarkovReport {
        x1_pair: setup.x1_pair,
        x2: setup.x2,
        var_u: setup.var_u,
        densities: vec![da, db],
        x3_grid: x3s,
        max_deviation: max_dev,
        argmax_x3: argmax,
    })
}

/// One row of the bound check at T = 2.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundCheckRow {
    pub config_index: usize,
    pub variant: String,
    pub elbo: f64,
    pub stderr: f64,
    pub log_marginal: f64,
    pub violation: bool,
}

/// Bound-check report: for random model and variational configurations at
/// T = 2, `elbo − 3·stderr` must not exceed the quadrature log marginal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub n_configs: usize,
    pub n_samples: usize,
    pub violations: usize,
    pub rows: Vec<BoundCheckRow>,
}

/// Run the T = 2 bound check over `n_configs` random configurations for
/// every posterior variant.
pub fn bound_check(n_configs: usize, n_samples: usize, seed: u64) -> Result<BoundCheckReport> {
    use crate::elbo::elbo;
    use crate::gauss::{chol, PsdMatrix};
    use crate::linalg::Mat;
    use crate::posterior::{prssm_chain, ChainParams, VariantId};
    use crate::sparse_gp::InducingPosterior;
    use crate::ssm::EmissionModel;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut violations = 0usize;
    for config_index in 0..n_configs {
        let cfg = OracleConfig {
            kernel: RbfParams::new(rng.gen_range(0.4..1.5), vec![rng.gen_range(0.6..1.6)])?,
            q: rng.gen_range(0.02..0.3),
            r: rng.gen_range(0.05..0.4),
            ..OracleConfig::default()
        };
        let y_vals = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
        let log_marginal = log_marginal_quadrature(&cfg, &y_vals)?;

        let m = 3;
        let z = Mat::from_fn(m, 1, |i, _| -1.0 + i as f64 + rng.gen_range(-0.1..0.1));
        let mu = Mat::from_fn(m, 1, |_, _| rng.gen_range(-0.5..0.5));
        let b = Mat::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut s = b.matmul(&b.transpose());
        for i in 0..m {
            s[(i, i)] += 0.3;
        }
        let gp = InducingPosterior::new(z, mu, vec![chol(&s)?], cfg.kernel.clone())?;
        let em = EmissionModel::identity(1, cfg.r);
        let q_noise = PsdMatrix::from_diag_vars(&[cfg.q]);
        let y = Mat::from_rows(vec![vec![y_vals[0]], vec![y_vals[1]]]);

        for variant in VariantId::ALL {
            let cp = if variant == VariantId::PrSsm {
                prssm_chain(
                    2,
                    &q_noise,
                    vec![rng.gen_range(-0.3..0.3)],
                    PsdMatrix::from_diag_vars(&[rng.gen_range(0.3..1.5)]),
                )?
            } else {
                ChainParams::new(
                    vec![rng.gen_range(-0.3..0.3)],
                    PsdMatrix::from_diag_vars(&[rng.gen_range(0.3..1.5)]),
                    vec![Mat::from_fn(1, 1, |_, _| rng.gen_range(-0.8..0.8))],
                    vec![vec![rng.gen_range(-0.5..0.5)]],
                    vec![PsdMatrix::from_diag_vars(&[rng.gen_range(0.02..0.4)])],
                    2,
                )?
            };
            let est = elbo(
                variant,
                &cp,
                &gp,
                &em,
                &q_noise,
                &y,
                n_samples,
                None,
                None,
                seed.wrapping_add(1000 + config_index as u64),
                0,
            )?;
            let violation = est.value - 3.0 * est.stderr > log_marginal;
            if violation {
                violations += 1;
            }
            rows.push(BoundCheckRow {
                config_index,
                variant: variant.name().to_string(),
                elbo: est.value,
                stderr: est.stderr,
                log_marginal,
                violation,
            });
        }
    }
    Ok(BoundCheckReport {
        n_configs,
        n_samples,
        violations,
        rows,
    })
}
