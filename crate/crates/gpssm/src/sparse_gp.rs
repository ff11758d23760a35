//! Inducing-point variational GP: marginal and conditional predictive
//! moments, the inducing KL, and the sequential full-GP conditioner used by
//! the non-factorised posterior.

use crate::error::{Error, Result};
use crate::gauss::{chol_conditioned, gauss_kl, GaussianMoments, PsdMatrix};
use crate::kernel::{kern, kern_matrix, kern_vector, RbfParams};
use crate::linalg::Mat;
use crate::scalar::{dot, Scalar};

/// Minimum separation enforced between inducing inputs.
const MIN_SEPARATION: f64 = 1e-6;

/// Relative floor for conditional variances (relative to the prior variance).
const VAR_REL_FLOOR: f64 = 1e-12;

/// Condition cap for the inducing Gram factor. Dense inducing grids produce
/// Gram matrices whose barely-factorizable inverses make every K⁻¹ quadratic
/// form untrainable; jitter escalates until the factor is this tame.
const GRAM_COND_CAP: f64 = 1e4;

/// Variational posterior over inducing outputs: inputs `Z`, per-output means
/// and covariances of `q(u)`, and the shared kernel.
#[derive(Clone, Debug)]
pub struct InducingPosterior<S> {
    z: Mat<S>,
    mu_u: Mat<S>,
    sigma_u: Vec<PsdMatrix<S>>,
    kernel: RbfParams<S>,
}

impl<S: Scalar> InducingPosterior<S> {
    pub fn new(
        mut z: Mat<S>,
        mu_u: Mat<S>,
        sigma_u: Vec<PsdMatrix<S>>,
        kernel: RbfParams<S>,
    ) -> Result<Self> {
        let m = z.rows();
        if kernel.input_dim() != z.cols() {
            return Err(Error::DimensionMismatch {
                what: "inducing input dim vs kernel",
                expected: kernel.input_dim(),
                got: z.cols(),
            });
        }
        if mu_u.rows() != m {
            return Err(Error::DimensionMismatch {
                what: "mu_u rows",
                expected: m,
                got: mu_u.rows(),
            });
        }
        if sigma_u.len() != mu_u.cols() {
            return Err(Error::DimensionMismatch {
                what: "sigma_u count vs output dim",
                expected: mu_u.cols(),
                got: sigma_u.len(),
            });
        }
        for s in &sigma_u {
            if s.dim() != m {
                return Err(Error::DimensionMismatch {
                    what: "sigma_u dim",
                    expected: m,
                    got: s.dim(),
                });
            }
        }
        separate_duplicates(&mut z);
        Ok(InducingPosterior {
            z,
            mu_u,
            sigma_u,
            kernel,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.z.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.mu_u.cols()
    }

    pub fn z(&self) -> &Mat<S> {
        &self.z
    }

    pub fn mu_u(&self) -> &Mat<S> {
        &self.mu_u
    }

    pub fn sigma_u(&self) -> &[PsdMatrix<S>] {
        &self.sigma_u
    }

    pub fn kernel(&self) -> &RbfParams<S> {
        &self.kernel
    }

    /// Factor the inducing Gram matrix once for repeated predictions.
    pub fn prepare(&self) -> Result<PreparedGp<'_, S>> {
        let k_zz = kern_matrix(&self.z, &self.z, &self.kernel);
        let l_zz = chol_conditioned(&k_zz, GRAM_COND_CAP)?;
        let white_mu = l_zz.forward_solve_mat(&self.mu_u);
        Ok(PreparedGp {
            gp: self,
            l_zz,
            white_mu,
        })
    }
}

/// Nudge near-duplicate inducing inputs apart so the Gram matrix stays
/// factorizable. Deterministic: the later point of a close pair moves along
/// the first coordinate.
fn separate_duplicates<S: Scalar>(z: &mut Mat<S>) {
    let m = z.rows();
    let d = z.cols();
    for _ in 0..4 {
        let mut clean = true;
        for i in 0..m {
            for j in (i + 1)..m {
                let mut dist2 = 0.0;
                for k in 0..d {
                    let diff = z[(i, k)].value() - z[(j, k)].value();
                    dist2 += diff * diff;
                }
                if dist2.sqrt() < MIN_SEPARATION {
                    z[(j, 0)] += S::from_f64(MIN_SEPARATION * (1.0 + j as f64));
                    clean = false;
                }
            }
        }
        if clean {
            break;
        }
    }
}

/// An [`InducingPosterior`] with its Gram factor computed.
pub struct PreparedGp<'a, S> {
    gp: &'a InducingPosterior<S>,
    l_zz: PsdMatrix<S>,
    white_mu: Mat<S>,
}

impl<'a, S: Scalar> PreparedGp<'a, S> {
    pub fn gp(&self) -> &'a InducingPosterior<S> {
        self.gp
    }

    pub fn l_zz(&self) -> &PsdMatrix<S> {
        &self.l_zz
    }

    /// Marginal posterior moments of `f(x)` under `q(f)`: mean
    /// `K_xZ K_ZZ⁻¹ μ_u` and variance
    /// `k(x,x) + K_xZ K_ZZ⁻¹ (Σ_u − K_ZZ) K_ZZ⁻¹ K_Zx`, per output.
    pub fn predict_marginal(&self, x: &[S]) -> Result<GaussianMoments<S>> {
        let (a, kxx) = self.whitened_cross(x);
        let nystrom = dot(&a, &a);
        let b = self.l_zz.back_solve(&a);
        let dout = self.gp.output_dim();
        let mut mean = Vec::with_capacity(dout);
        let mut vars = Vec::with_capacity(dout);
        for dim in 0..dout {
            mean.push(dot(&a, &self.white_mu.column(dim)));
            let lb = self.gp.sigma_u[dim].transform_t(&b);
            let var = kxx - nystrom + dot(&lb, &lb);
            vars.push(var.clamp_min(0.0));
        }
        Ok(GaussianMoments::diagonal(mean, &vars))
    }

    /// Conditional moments of `f(x) | u`: mean `K_xZ K_ZZ⁻¹ u`, variance
    /// `k(x,x) − K_xZ K_ZZ⁻¹ K_Zx` (independent of `u`).
    pub fn conditional_given_u(&self, u: &Mat<S>, x: &[S]) -> Result<GaussianMoments<S>> {
        if u.rows() != self.gp.num_inducing() || u.cols() != self.gp.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "conditional_given_u draw shape",
                expected: self.gp.num_inducing() * self.gp.output_dim(),
                got: u.rows() * u.cols(),
            });
        }
        let white_u = self.l_zz.forward_solve_mat(u);
        Ok(self.conditional_from_white(&white_u, x))
    }

    /// Same conditional with `L_ZZ⁻¹ u` precomputed (one solve per step
    /// instead of two plus a matrix solve).
    pub(crate) fn conditional_from_white(&self, white_u: &Mat<S>, x: &[S]) -> GaussianMoments<S> {
        let (a, kxx) = self.whitened_cross(x);
        let var = (kxx - dot(&a, &a)).clamp_min(0.0);
        let dout = self.gp.output_dim();
        let mean: Vec<S> = (0..dout).map(|d| dot(&a, &white_u.column(d))).collect();
        let vars = vec![var; dout];
        GaussianMoments::diagonal(mean, &vars)
    }

    /// `(L_ZZ⁻¹ K_Zx, k(x,x))`.
    fn whitened_cross(&self, x: &[S]) -> (Vec<S>, S) {
        let k_zx = kern_vector(x, &self.gp.z, &self.gp.kernel);
        let a = self.l_zz.forward_solve(&k_zx);
        let kxx = kern(x, x, &self.gp.kernel);
        (a, kxx)
    }

    /// Reparameterized draw from `q(u)`: per-output `μ_u + L_Σ e`.
    pub fn sample_u(&self, base_noise: &Mat<S>) -> Result<Mat<S>> {
        let m = self.gp.num_inducing();
        let dout = self.gp.output_dim();
        if base_noise.rows() != m || base_noise.cols() != dout {
            return Err(Error::DimensionMismatch {
                what: "sample_u noise shape",
                expected: m * dout,
                got: base_noise.rows() * base_noise.cols(),
            });
        }
        let mut u = Mat::zeros(m, dout);
        for d in 0..dout {
            let e = base_noise.column(d);
            let scaled = self.gp.sigma_u[d].transform(&e);
            for i in 0..m {
                u[(i, d)] = self.gp.mu_u[(i, d)] + scaled[i];
            }
        }
        Ok(u)
    }

    /// `KL(q(u) ‖ p(u))` with `p(u) = N(0, K_ZZ)`, summed over outputs.
    pub fn kl_u(&self) -> Result<S> {
        let m = self.gp.num_inducing();
        let prior = GaussianMoments::new(vec![S::zero(); m], self.l_zz.clone())?;
        let mut total = S::zero();
        for d in 0..self.gp.output_dim() {
            let q = GaussianMoments::new(self.gp.mu_u.column(d), self.gp.sigma_u[d].clone())?;
            total += gauss_kl(&q, &prior)?;
        }
        Ok(total)
    }

    /// Seed a sequential conditioner on the inducing sites with values `u`.
    pub fn cond_init(&self, u: &Mat<S>) -> Result<SequentialConditioner<S>> {
        let m = self.gp.num_inducing();
        let dout = self.gp.output_dim();
        if u.rows() != m || u.cols() != dout {
            return Err(Error::DimensionMismatch {
                what: "cond_init draw shape",
                expected: m * dout,
                got: u.rows() * u.cols(),
            });
        }
        let sites: Vec<Vec<S>> = (0..m).map(|i| self.gp.z.row(i).to_vec()).collect();
        let factor_rows: Vec<Vec<S>> = (0..m)
            .map(|i| self.l_zz.factor().row(i)[..=i].to_vec())
            .collect();
        let white_mat = self.l_zz.forward_solve_mat(u);
        let white: Vec<Vec<S>> = (0..m).map(|i| white_mat.row(i).to_vec()).collect();
        let values: Vec<Vec<S>> = (0..m).map(|i| u.row(i).to_vec()).collect();
        Ok(SequentialConditioner {
            kernel: self.gp.kernel.clone(),
            sites,
            factor_rows,
            white,
            values,
            base: m,
            // Condition on the jittered process throughout: the inducing
            // block already carries this nugget, and extensions from a dense
            // near-singular site set need it just as much.
            jitter: self.l_zz.jitter(),
        })
    }
}

/// Growing conditioning set with an incrementally extended triangular factor.
///
/// Holds the exact GP conditional given all `(site, value)` pairs seen so
/// far. Extending by one site costs O(n²) in the current site count, which
/// is what makes full-GP trajectory sampling cubic in the sequence length.
#[derive(Clone, Debug)]
pub struct SequentialConditioner<S> {
    kernel: RbfParams<S>,
    sites: Vec<Vec<S>>,
    /// Row `i` holds the first `i + 1` entries of the factor's row `i`.
    factor_rows: Vec<Vec<S>>,
    /// `L⁻¹ V`, maintained incrementally; one row per site, one column per output.
    white: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    base: usize,
    /// Diagonal nugget inherited from the inducing Gram factorization.
    jitter: f64,
}

impl<S: Scalar> SequentialConditioner<S> {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn values(&self) -> &[Vec<S>] {
        &self.values
    }

    /// Draw `f(x)` from the conditional given all stored pairs, then append
    /// `(x, f(x))` to the conditioning set.
    pub fn extend(&mut self, x: &[S], base_noise: &[f64]) -> Result<Vec<S>> {
        let n = self.sites.len();
        let dout = self.white.first().map_or(base_noise.len(), |w| w.len());
        if base_noise.len() != dout {
            return Err(Error::DimensionMismatch {
                what: "cond_extend noise",
                expected: dout,
                got: base_noise.len(),
            });
        }
        let k_s: Vec<S> = self
            .sites
            .iter()
            .map(|s| kern(x, s, &self.kernel))
            .collect();
        let mut kxx = kern(x, x, &self.kernel);
        if self.jitter > 0.0 {
            kxx += S::from_f64(self.jitter);
        }

        // w = L⁻¹ k against the grown factor.
        let mut w = vec![S::zero(); n];
        for i in 0..n {
            let mut acc = k_s[i];
            for k in 0..i {
                acc -= self.factor_rows[i][k] * w[k];
            }
            w[i] = acc / self.factor_rows[i][i];
        }

        let schur = kxx - dot(&w, &w);
        let kxx_val = kxx.value();
        if schur.value() < -1e-3 * kxx_val {
            return Err(Error::NotPositiveDefinite {
                context: "sequential conditioner schur complement",
                jitter: VAR_REL_FLOOR * kxx_val,
            });
        }
        let s = schur.clamp_min(VAR_REL_FLOOR * kxx_val).sqrt();

        let mut f = Vec::with_capacity(dout);
        let mut white_row = Vec::with_capacity(dout);
        for d in 0..dout {
            let mut mean = S::zero();
            for i in 0..n {
                mean += w[i] * self.white[i][d];
            }
            f.push(mean + s.scale(base_noise[d]));
            // (f - mean) / s simplifies to the base noise exactly.
            white_row.push(S::from_f64(base_noise[d]));
        }

        self.sites.push(x.to_vec());
        let mut row = w;
        row.push(s);
        self.factor_rows.push(row);
        self.white.push(white_row);
        self.values.push(f.clone());
        Ok(f)
    }

    /// Drop everything accumulated after the inducing sites.
    pub fn reset(&mut self) {
        self.sites.truncate(self.base);
        self.factor_rows.truncate(self.base);
        self.white.truncate(self.base);
        self.values.truncate(self.base);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::chol;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    // Small dense helpers on the nalgebra side, independent of the
    // factor-based implementation path.
    fn na_from(m: &Mat<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
    }

    fn random_posterior(seed: u64, m: usize) -> InducingPosterior<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Mat::from_fn(m, 1, |i, _| -1.5 + 1.3 * i as f64 + rng.gen_range(-0.2..0.2));
        let mu = Mat::from_fn(m, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = Mat::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut s = b.matmul(&b.transpose());
        for i in 0..m {
            s[(i, i)] += 0.4;
        }
        let sigma = chol(&s).unwrap();
        let kernel = RbfParams::new(1.0 + rng.gen_range(0.0..1.0), vec![rng.gen_range(0.5..1.5)])
            .unwrap();
        InducingPosterior::new(z, mu, vec![sigma], kernel).unwrap()
    }

    #[test]
    fn prior_recovered_when_sigma_equals_kzz() {
        let z = Mat::from_rows(vec![vec![-1.0], vec![0.0], vec![1.0]]);
        let kernel = RbfParams::new(1.4, vec![0.9]).unwrap();
        let k_zz = kern_matrix(&z, &z, &kernel);
        let sigma = chol(&k_zz).unwrap();
        let gp =
            InducingPosterior::new(z, Mat::zeros(3, 1), vec![sigma], kernel.clone()).unwrap();
        let prep = gp.prepare().unwrap();
        let g = prep.predict_marginal(&[0.37]).unwrap();
        assert!(g.mean[0].abs() < 1e-12);
        assert_relative_eq!(g.diag_vars()[0], 1.4, max_relative = 1e-9);
    }

    #[test]
    fn vanishing_sigma_pins_variance_at_inducing_input() {
        let z = Mat::from_rows(vec![vec![-1.0], vec![0.5]]);
        let kernel = RbfParams::new(1.0, vec![1.0]).unwrap();
        let tiny = PsdMatrix::from_factor(Mat::from_rows(vec![
            vec![1e-7, 0.0],
            vec![0.0, 1e-7],
        ]))
        .unwrap();
        let gp = InducingPosterior::new(z, Mat::zeros(2, 1), vec![tiny], kernel).unwrap();
        let prep = gp.prepare().unwrap();
        let g = prep.predict_marginal(&[0.5]).unwrap();
        assert!(g.diag_vars()[0] < 1e-6, "var = {}", g.diag_vars()[0]);
    }

    #[test]
    fn predict_marginal_matches_dense_caption_formula() {
        let gp = random_posterior(42, 3);
        let prep = gp.prepare().unwrap();
        let x = [0.31];

        let k_zz = na_from(&kern_matrix(gp.z(), gp.z(), gp.kernel()));
        let jitter = prep.l_zz().jitter();
        let k_zz = &k_zz + DMatrix::identity(3, 3) * jitter;
        let k_inv = k_zz.clone().try_inverse().unwrap();
        let k_zx = DVector::from_vec(kern_vector(&x, gp.z(), gp.kernel()));
        let kxx = kern(&x, &x, gp.kernel());
        let sigma = na_from(&gp.sigma_u()[0].reconstruct());
        let mu = DVector::from_vec(gp.mu_u().column(0));

        let mean = k_zx.transpose() * &k_inv * mu;
        let var = kxx
            + (k_zx.transpose() * &k_inv * (sigma - &k_zz) * &k_inv * &k_zx)[(0, 0)];

        let g = prep.predict_marginal(&x).unwrap();
        assert_relative_eq!(g.mean[0], mean[(0, 0)], epsilon = 1e-9);
        assert_relative_eq!(g.diag_vars()[0], var, epsilon = 1e-9);
    }

    #[test]
    fn conditional_at_inducing_site_interpolates() {
        let gp = random_posterior(7, 4);
        let prep = gp.prepare().unwrap();
        let mut u = Mat::zeros(4, 1);
        for i in 0..4 {
            u[(i, 0)] = 0.3 * i as f64 - 0.5;
        }
        let site: Vec<f64> = gp.z().row(2).to_vec();
        let g = prep.conditional_given_u(&u, &site).unwrap();
        assert_relative_eq!(g.mean[0], u[(2, 0)], epsilon = 1e-6);
        assert!(g.diag_vars()[0] < 1e-6);
    }

    #[test]
    fn conditional_far_from_sites_reverts_to_prior() {
        let gp = random_posterior(8, 3);
        let prep = gp.prepare().unwrap();
        let u = Mat::from_fn(3, 1, |i, _| 1.0 + i as f64);
        let g = prep.conditional_given_u(&u, &[250.0]).unwrap();
        assert!(g.mean[0].abs() < 1e-12);
        assert_relative_eq!(g.diag_vars()[0], gp.kernel().variance, max_relative = 1e-12);
    }

    #[test]
    fn conditional_matches_dense_joint_conditioning() {
        let gp = random_posterior(99, 3);
        let prep = gp.prepare().unwrap();
        let x = [0.8];
        let u = Mat::from_fn(3, 1, |i, _| 0.2 * i as f64 - 0.3);

        let k_zz = na_from(&kern_matrix(gp.z(), gp.z(), gp.kernel()))
            + DMatrix::identity(3, 3) * prep.l_zz().jitter();
        let k_inv = k_zz.try_inverse().unwrap();
        let k_zx = DVector::from_vec(kern_vector(&x, gp.z(), gp.kernel()));
        let kxx = kern(&x, &x, gp.kernel());
        let uv = DVector::from_vec(u.column(0));
        let mean = (k_zx.transpose() * &k_inv * uv)[(0, 0)];
        let var = kxx - (k_zx.transpose() * &k_inv * &k_zx)[(0, 0)];

        let g = prep.conditional_given_u(&u, &x).unwrap();
        assert_relative_eq!(g.mean[0], mean, epsilon = 1e-9);
        assert_relative_eq!(g.diag_vars()[0], var, epsilon = 1e-9);
    }

    #[test]
    fn sample_u_zero_noise_is_mean() {
        let gp = random_posterior(3, 3);
        let prep = gp.prepare().unwrap();
        let u = prep.sample_u(&Mat::zeros(3, 1)).unwrap();
        assert_eq!(u.column(0), gp.mu_u().column(0));
    }

    #[test]
    fn sample_u_identity_cov_adds_noise() {
        let z = Mat::from_rows(vec![vec![0.0], vec![1.0]]);
        let kernel = RbfParams::default_init(1);
        let mu = Mat::from_fn(2, 1, |i, _| i as f64);
        let gp = InducingPosterior::new(z, mu, vec![PsdMatrix::identity(2)], kernel).unwrap();
        let prep = gp.prepare().unwrap();
        let noise = Mat::from_fn(2, 1, |i, _| 0.5 - i as f64);
        let u = prep.sample_u(&noise).unwrap();
        assert_eq!(u[(0, 0)], 0.5);
        assert_eq!(u[(1, 0)], 0.5);
    }

    #[test]
    fn sample_u_empirical_covariance_matches() {
        let gp = random_posterior(21, 3);
        let prep = gp.prepare().unwrap();
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mean = [0.0f64; 3];
        let mut cov = [[0.0f64; 3]; 3];
        for _ in 0..n {
            let e = Mat::from_fn(3, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = prep.sample_u(&e).unwrap();
            for i in 0..3 {
                mean[i] += u[(i, 0)];
            }
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] += u[(i, 0)] * u[(j, 0)];
                }
            }
        }
        let target = gp.sigma_u()[0].reconstruct();
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut frob_err = 0.0;
        let mut frob = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let c = cov[i][j] / n as f64 - mean[i] * mean[j];
                let e = c - target[(i, j)];
                frob_err += e * e;
                frob += target[(i, j)] * target[(i, j)];
            }
        }
        assert!(
            frob_err.sqrt() < 0.05 * frob.sqrt(),
            "relative frobenius error {}",
            frob_err.sqrt() / frob.sqrt()
        );
    }

    #[test]
    fn kl_u_zero_when_posterior_is_prior() {
        let z = Mat::from_rows(vec![vec![-0.7], vec![0.0], vec![0.9]]);
        let kernel = RbfParams::new(1.2, vec![0.8]).unwrap();
        let k_zz = kern_matrix(&z, &z, &kernel);
        let sigma = chol(&k_zz).unwrap();
        let gp = InducingPosterior::new(z, Mat::zeros(3, 1), vec![sigma], kernel).unwrap();
        let prep = gp.prepare().unwrap();
        assert_eq!(prep.kl_u().unwrap(), 0.0);
    }

    #[test]
    fn kl_u_one_dimensional_closed_form() {
        let z = Mat::from_rows(vec![vec![0.0]]);
        let kernel = RbfParams::default_init(1);
        let mu = Mat::from_fn(1, 1, |_, _| 1.0);
        let gp = InducingPosterior::new(z, mu, vec![PsdMatrix::identity(1)], kernel).unwrap();
        let prep = gp.prepare().unwrap();
        assert_relative_eq!(prep.kl_u().unwrap(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn kl_u_positive_away_from_prior() {
        let gp = random_posterior(13, 3);
        let prep = gp.prepare().unwrap();
        assert!(prep.kl_u().unwrap() > 0.0);
    }

    #[test]
    fn conditioner_interpolates_at_inducing_site() {
        let gp = random_posterior(31, 3);
        let prep = gp.prepare().unwrap();
        let u = Mat::from_fn(3, 1, |i, _| (i as f64).sin());
        let mut cond = prep.cond_init(&u).unwrap();
        let site: Vec<f64> = gp.z().row(1).to_vec();
        let f = cond.extend(&site, &[0.0]).unwrap();
        assert_relative_eq!(f[0], u[(1, 0)], epsilon = 1e-5);
    }

    #[test]
    fn first_extension_matches_conditional_given_u() {
        let gp = random_posterior(17, 3);
        let prep = gp.prepare().unwrap();
        let u = Mat::from_fn(3, 1, |i, _| 0.4 * i as f64);
        let x = [0.25];
        let noise = [0.7];
        let g = prep.conditional_given_u(&u, &x).unwrap();
        let expect = g.mean[0] + g.diag_vars()[0].sqrt() * noise[0];
        let mut cond = prep.cond_init(&u).unwrap();
        let f = cond.extend(&x, &noise).unwrap();
        assert_relative_eq!(f[0], expect, epsilon = 1e-9);
    }

    #[test]
    fn reset_restores_initial_sites() {
        let gp = random_posterior(55, 3);
        let prep = gp.prepare().unwrap();
        let u = Mat::from_fn(3, 1, |i, _| i as f64 * 0.1);
        let mut cond = prep.cond_init(&u).unwrap();
        let before = cond.clone();
        cond.extend(&[0.3], &[0.2]).unwrap();
        cond.extend(&[0.6], &[-0.4]).unwrap();
        assert_eq!(cond.len(), 5);
        cond.reset();
        assert_eq!(cond.len(), 3);
        // A fresh extension after reset matches one taken before the
        // discarded extensions happened.
        let mut replay = before;
        let a = replay.extend(&[1.1], &[0.9]).unwrap();
        let b = cond.extend(&[1.1], &[0.9]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sequential_draws_match_dense_joint_sampling() {
        // Four sequential extensions at fixed points against one dense
        // joint draw scheme, compared in distribution over many seeds.
        let gp = random_posterior(77, 2);
        let prep = gp.prepare().unwrap();
        let xs = [[-0.6], [0.1], [0.9], [1.7]];
        let n = 100_000usize;

        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut seq_sum = [0.0f64; 4];
        let mut seq_sq = [[0.0f64; 4]; 4];
        for _ in 0..n {
            let e_u = Mat::from_fn(2, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = prep.sample_u(&e_u).unwrap();
            let mut cond = prep.cond_init(&u).unwrap();
            let mut draws = [0.0f64; 4];
            for (i, x) in xs.iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                draws[i] = cond.extend(x, &[e]).unwrap()[0];
            }
            for i in 0..4 {
                seq_sum[i] += draws[i];
                for j in 0..4 {
                    seq_sq[i][j] += draws[i] * draws[j];
                }
            }
        }

        // Dense scheme: f | u ~ N(K_xZ K⁻¹ u, K_xx − K_xZ K⁻¹ K_Zx).
        let x_mat = Mat::from_rows(xs.iter().map(|r| r.to_vec()).collect());
        let k_zz = na_from(&kern_matrix(gp.z(), gp.z(), gp.kernel()))
            + DMatrix::identity(2, 2) * prep.l_zz().jitter();
        let k_xz = na_from(&kern_matrix(&x_mat, gp.z(), gp.kernel()));
        let k_xx = na_from(&kern_matrix(&x_mat, &x_mat, gp.kernel()));
        let k_inv = k_zz.try_inverse().unwrap();
        let proj = &k_xz * &k_inv;
        let cond_cov = &k_xx - &proj * k_xz.transpose();
        let cond_chol = nalgebra::linalg::Cholesky::new(
            cond_cov + DMatrix::identity(4, 4) * 1e-10,
        )
        .unwrap();

        let mut den_sum = [0.0f64; 4];
        let mut den_sq = [[0.0f64; 4]; 4];
        for _ in 0..n {
            let e_u = Mat::from_fn(2, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = prep.sample_u(&e_u).unwrap();
            let uv = DVector::from_vec(u.column(0));
            let mean = &proj * uv;
            let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let draw = &mean + cond_chol.l() * z;
            for i in 0..4 {
                den_sum[i] += draw[i];
                for j in 0..4 {
                    den_sq[i][j] += draw[i] * draw[j];
                }
            }
        }

        for i in 0..4 {
            let m1 = seq_sum[i] / n as f64;
            let m2 = den_sum[i] / n as f64;
            let v1 = seq_sq[i][i] / n as f64 - m1 * m1;
            let v2 = den_sq[i][i] / n as f64 - m2 * m2;
            let se = ((v1 + v2) / n as f64).sqrt();
            assert!(
                (m1 - m2).abs() <= 5.0 * se,
                "mean {i}: {m1} vs {m2}, se {se}"
            );
            // covariance entries, crude standard error
            for j in 0..4 {
                let c1 = seq_sq[i][j] / n as f64 - m1 * (seq_sum[j] / n as f64);
                let c2 = den_sq[i][j] / n as f64 - m2 * (den_sum[j] / n as f64);
                let se_c = ((v1 * (seq_sq[j][j] / n as f64
                    - (seq_sum[j] / n as f64).powi(2))
                    + c1 * c1)
                    / n as f64)
                    .sqrt()
                    * 2.0;
                assert!(
                    (c1 - c2).abs() <= 5.0 * se_c.max(1e-4),
                    "cov {i},{j}: {c1} vs {c2}"
                );
            }
        }
    }

    #[test]
    fn marginalizing_u_reproduces_predict_marginal() {
        let gp = random_posterior(61, 3);
        let prep = gp.prepare().unwrap();
        let x = [0.45];
        let target = prep.predict_marginal(&x).unwrap();
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let e = Mat::from_fn(3, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = prep.sample_u(&e).unwrap();
            let c = prep.conditional_given_u(&u, &x).unwrap();
            let ef: f64 = rng.sample(StandardNormal);
            let f = c.mean[0] + c.diag_vars()[0].sqrt() * ef;
            sum += f;
            sumsq += f * f;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let tvar = target.diag_vars()[0];
        let se_mean = (tvar / n as f64).sqrt();
        assert!(
            (mean - target.mean[0]).abs() <= 5.0 * se_mean,
            "mean {mean} vs {}",
            target.mean[0]
        );
        let se_var = tvar * (2.0 / n as f64).sqrt();
        assert!((var - tvar).abs() <= 5.0 * se_var, "var {var} vs {tvar}");
    }

    #[test]
    fn duplicate_inducing_inputs_get_separated() {
        let z = Mat::from_rows(vec![vec![0.5], vec![0.5], vec![1.0]]);
        let gp = InducingPosterior::new(
            z,
            Mat::zeros(3, 1),
            vec![PsdMatrix::identity(3)],
            RbfParams::default_init(1),
        )
        .unwrap();
        let d = (gp.z()[(0, 0)] - gp.z()[(1, 0)]).abs();
        assert!(d >= MIN_SEPARATION);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn predict_variance_nonnegative(seed in 0u64..100_000, x in -5.0f64..5.0) {
            let gp = random_posterior(seed, 3);
            let prep = gp.prepare().unwrap();
            let g = prep.predict_marginal(&[x]).unwrap();
            proptest::prop_assert!(g.diag_vars()[0] >= 0.0);
        }

        #[test]
        fn conditioning_never_inflates_variance(seed in 0u64..100_000, x in -5.0f64..5.0) {
            let gp = random_posterior(seed, 4);
            let prep = gp.prepare().unwrap();
            let u = Mat::zeros(4, 1);
            let g = prep.conditional_given_u(&u, &[x]).unwrap();
            let kxx = kern(&[x], &[x], gp.kernel());
            proptest::prop_assert!(g.diag_vars()[0] <= kxx + 1e-9);
        }
    }
}
