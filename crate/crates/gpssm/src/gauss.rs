//! Gaussian primitives: factored covariance matrices, KL divergence, log
//! density and reparameterized transforms. Covariances live exclusively as
//! lower-triangular Cholesky factors; dense inverses are never formed.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::{dot, Scalar};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Variance floor used when assembling diagonal covariances from computed
/// variances that may round slightly negative.
const VAR_FLOOR: f64 = 1e-300;

/// Jitter escalation ladder: relative factors applied to the mean diagonal.
const JITTER_START: f64 = 1e-9;
const JITTER_MAX: f64 = 1e-3;

/// A positive-definite matrix stored by its lower-triangular factor.
#[derive(Clone, Debug)]
pub struct PsdMatrix<S> {
    factor: Mat<S>,
    jitter: f64,
}

impl<S: Scalar> PsdMatrix<S> {
    /// Wrap an existing lower-triangular factor with strictly positive
    /// diagonal. Upper-triangle entries must be zero.
    pub fn from_factor(factor: Mat<S>) -> Result<Self> {
        let n = factor.rows();
        if factor.cols() != n {
            return Err(Error::DimensionMismatch {
                what: "psd factor",
                expected: n,
                got: factor.cols(),
            });
        }
        for i in 0..n {
            if factor[(i, i)].value() <= 0.0 {
                return Err(Error::NotPositiveDefinite {
                    context: "factor diagonal",
                    jitter: 0.0,
                });
            }
            for j in (i + 1)..n {
                if factor[(i, j)].value() != 0.0 {
                    return Err(Error::NotPositiveDefinite {
                        context: "factor not lower triangular",
                        jitter: 0.0,
                    });
                }
            }
        }
        Ok(PsdMatrix { factor, jitter: 0.0 })
    }

    pub fn identity(n: usize) -> Self {
        PsdMatrix {
            factor: Mat::identity(n),
            jitter: 0.0,
        }
    }

    /// Diagonal covariance from per-coordinate variances. Variances are
    /// floored at a tiny positive constant so degenerate (zero-variance)
    /// directions stay representable.
    pub fn from_diag_vars(vars: &[S]) -> Self {
        let mut factor = Mat::zeros(vars.len(), vars.len());
        for (i, v) in vars.iter().enumerate() {
            factor[(i, i)] = v.clamp_min(VAR_FLOOR).sqrt();
        }
        PsdMatrix { factor, jitter: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn factor(&self) -> &Mat<S> {
        &self.factor
    }

    /// Stabilization added to the diagonal when the factor was computed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Rebuild the full matrix `L Lᵀ`.
    pub fn reconstruct(&self) -> Mat<S> {
        let n = self.dim();
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let k_max = i.min(j) + 1;
                let mut acc = S::zero();
                for k in 0..k_max {
                    acc += self.factor[(i, k)] * self.factor[(j, k)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    pub fn logdet(&self) -> S {
        let mut acc = S::zero();
        for i in 0..self.dim() {
            acc += self.factor[(i, i)].ln();
        }
        acc.scale(2.0)
    }

    /// Solve `L x = b`.
    pub fn forward_solve(&self, b: &[S]) -> Vec<S> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        let mut x = vec![S::zero(); n];
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.factor[(i, k)] * x[k];
            }
            x[i] = acc / self.factor[(i, i)];
        }
        x
    }

    /// Solve `Lᵀ x = b`.
    pub fn back_solve(&self, b: &[S]) -> Vec<S> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        let mut x = vec![S::zero(); n];
        for i in (0..n).rev() {
            let mut acc = b[i];
            for k in (i + 1)..n {
                acc -= self.factor[(k, i)] * x[k];
            }
            x[i] = acc / self.factor[(i, i)];
        }
        x
    }

    /// Solve `L Lᵀ x = b`.
    pub fn solve(&self, b: &[S]) -> Vec<S> {
        self.back_solve(&self.forward_solve(b))
    }

    /// Apply `L` to a vector (the reparameterization map without the mean).
    pub fn transform(&self, e: &[S]) -> Vec<S> {
        let n = self.dim();
        debug_assert_eq!(e.len(), n);
        (0..n)
            .map(|i| dot(&self.factor.row(i)[..=i], &e[..=i]))
            .collect()
    }

    /// Apply `Lᵀ` to a vector.
    pub fn transform_t(&self, v: &[S]) -> Vec<S> {
        let n = self.dim();
        debug_assert_eq!(v.len(), n);
        (0..n)
            .map(|i| {
                let mut acc = S::zero();
                for k in i..n {
                    acc += self.factor[(k, i)] * v[k];
                }
                acc
            })
            .collect()
    }

    /// Solve `L X = B` column by column.
    pub fn forward_solve_mat(&self, b: &Mat<S>) -> Mat<S> {
        let mut out = Mat::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let col = self.forward_solve(&b.column(j));
            for i in 0..b.rows() {
                out[(i, j)] = col[i];
            }
        }
        out
    }

    /// `vᵀ (L Lᵀ)⁻¹ v` without forming the inverse.
    pub fn inv_quad(&self, v: &[S]) -> S {
        let w = self.forward_solve(v);
        dot(&w, &w)
    }

    /// Diagonal entries of the inverse, one triangular solve per column.
    pub fn inv_diag(&self) -> Vec<S> {
        let n = self.dim();
        (0..n)
            .map(|d| {
                let mut e = vec![S::zero(); n];
                e[d] = S::one();
                let w = self.solve(&e);
                w[d]
            })
            .collect()
    }
}

/// Mean and covariance of a multivariate Gaussian.
#[derive(Clone, Debug)]
pub struct GaussianMoments<S> {
    pub mean: Vec<S>,
    pub cov: PsdMatrix<S>,
}

impl<S: Scalar> GaussianMoments<S> {
    pub fn new(mean: Vec<S>, cov: PsdMatrix<S>) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                what: "gaussian moments",
                expected: cov.dim(),
                got: mean.len(),
            });
        }
        Ok(GaussianMoments { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianMoments {
            mean: vec![S::zero(); dim],
            cov: PsdMatrix::identity(dim),
        }
    }

    /// Independent coordinates with the given variances.
    pub fn diagonal(mean: Vec<S>, vars: &[S]) -> Self {
        debug_assert_eq!(mean.len(), vars.len());
        GaussianMoments {
            mean,
            cov: PsdMatrix::from_diag_vars(vars),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal variances (squared factor rows).
    pub fn diag_vars(&self) -> Vec<S> {
        let l = self.cov.factor();
        (0..self.dim())
            .map(|i| dot(&l.row(i)[..=i], &l.row(i)[..=i]))
            .collect()
    }
}

/// Factor a symmetric matrix, escalating diagonal jitter when needed.
///
/// Jitter starts at `1e-9 · mean(diag)` and multiplies by 10 up to
/// `1e-3 · mean(diag)`; the first attempt adds none. The applied value is
/// recorded on the result.
pub fn chol<S: Scalar>(matrix: &Mat<S>) -> Result<PsdMatrix<S>> {
    chol_with(matrix, f64::INFINITY)
}

/// Like [`chol`], but escalation also continues while the factor's
/// condition estimate `(max diag L / min diag L)²` exceeds `max_cond`.
/// Gram matrices of dense point sets need this: a barely-successful
/// factorization leaves the inverse so steep that any quadratic form in it
/// is unusable as an optimization objective.
pub fn chol_conditioned<S: Scalar>(matrix: &Mat<S>, max_cond: f64) -> Result<PsdMatrix<S>> {
    chol_with(matrix, max_cond)
}

fn chol_with<S: Scalar>(matrix: &Mat<S>, max_cond: f64) -> Result<PsdMatrix<S>> {
    let n = matrix.rows();
    if matrix.cols() != n {
        return Err(Error::DimensionMismatch {
            what: "chol input",
            expected: n,
            got: matrix.cols(),
        });
    }
    // Probe in plain arithmetic to settle the jitter level, then record the
    // factorization once. Both passes perform identical arithmetic.
    let vals = matrix.values();
    let mean_diag = (0..n).map(|i| vals[(i, i)]).sum::<f64>() / n.max(1) as f64;
    let cond_ok = |l: &Mat<f64>| {
        if !max_cond.is_finite() {
            return true;
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            lo = lo.min(l[(i, i)]);
            hi = hi.max(l[(i, i)]);
        }
        (hi / lo) * (hi / lo) <= max_cond
    };
    let mut jitter = 0.0;
    let mut rel = JITTER_START;
    loop {
        if let Some(l) = chol_f64_attempt(&vals, jitter) {
            if cond_ok(&l) {
                break;
            }
        }
        if rel > JITTER_MAX || mean_diag <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                context: "cholesky",
                jitter,
            });
        }
        jitter = rel * mean_diag;
        rel *= 10.0;
    }
    let factor = chol_generic(matrix, jitter);
    Ok(PsdMatrix { factor, jitter })
}

fn chol_f64_attempt(a: &Mat<f64>, jitter: f64) -> Option<Mat<f64>> {
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[(i, j)];
            if i == j {
                acc += jitter;
            }
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return None;
                }
                l[(i, i)] = acc.sqrt();
            } else {
                l[(i, j)] = acc / l[(j, j)];
            }
        }
    }
    Some(l)
}

fn chol_generic<S: Scalar>(a: &Mat<S>, jitter: f64) -> Mat<S> {
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[(i, j)];
            if i == j && jitter > 0.0 {
                acc += S::from_f64(jitter);
            }
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                debug_assert!(acc.value() > 0.0, "probe accepted a bad pivot");
                l[(i, i)] = acc.sqrt();
            } else {
                l[(i, j)] = acc / l[(j, j)];
            }
        }
    }
    l
}

/// Closed-form KL divergence between two Gaussians, `KL(q ‖ p)`.
pub fn gauss_kl<S: Scalar>(q: &GaussianMoments<S>, p: &GaussianMoments<S>) -> Result<S> {
    let k = q.dim();
    if p.dim() != k {
        return Err(Error::DimensionMismatch {
            what: "gauss_kl",
            expected: k,
            got: p.dim(),
        });
    }
    // tr(Σp⁻¹ Σq) = ‖Lp⁻¹ Lq‖_F²
    let mut trace = S::zero();
    for j in 0..k {
        let col = q.cov.factor().column(j);
        let w = p.cov.forward_solve(&col);
        trace += dot(&w, &w);
    }
    let diff: Vec<S> = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(&mp, &mq)| mp - mq)
        .collect();
    let quad = p.cov.inv_quad(&diff);
    let logdet = p.cov.logdet() - q.cov.logdet();
    Ok((trace + quad - S::from_f64(k as f64) + logdet).scale(0.5))
}

/// Log density of `x` under the Gaussian `g`.
pub fn mvn_logpdf<S: Scalar>(x: &[S], g: &GaussianMoments<S>) -> Result<S> {
    let k = g.dim();
    if x.len() != k {
        return Err(Error::DimensionMismatch {
            what: "mvn_logpdf",
            expected: k,
            got: x.len(),
        });
    }
    let diff: Vec<S> = x.iter().zip(&g.mean).map(|(&a, &m)| a - m).collect();
    let quad = g.cov.inv_quad(&diff);
    Ok(-(quad + g.cov.logdet() + S::from_f64(k as f64 * LN_2PI)).scale(0.5))
}

/// Reparameterized draw: `mean + L · base_noise`. Deterministic in its
/// inputs; all stochasticity enters through the base noise.
pub fn mvn_transform<S: Scalar>(g: &GaussianMoments<S>, base_noise: &[S]) -> Result<Vec<S>> {
    if base_noise.len() != g.dim() {
        return Err(Error::DimensionMismatch {
            what: "mvn_transform",
            expected: g.dim(),
            got: base_noise.len(),
        });
    }
    let scaled = g.cov.transform(base_noise);
    Ok(g.mean
        .iter()
        .zip(&scaled)
        .map(|(&m, &s)| m + s)
        .collect())
}
