//! RBF covariance function with per-dimension lengthscales.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// Signal variance and ARD lengthscales of the squared-exponential kernel.
#[derive(Clone, Debug)]
pub struct RbfParams<S> {
    pub variance: S,
    pub lengthscales: Vec<S>,
}

impl<S: Scalar> RbfParams<S> {
    pub fn new(variance: S, lengthscales: Vec<S>) -> Result<Self> {
        if variance.value() <= 0.0 || lengthscales.iter().any(|l| l.value() <= 0.0) {
            return Err(Error::InvalidConfig(
                "kernel variance and lengthscales must be positive".into(),
            ));
        }
        Ok(RbfParams {
            variance,
            lengthscales,
        })
    }

    /// Unit variance and unit lengthscales.
    pub fn default_init(input_dim: usize) -> Self {
        RbfParams {
            variance: S::one(),
            lengthscales: vec![S::one(); input_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// Kernel value between two points.
pub fn kern<S: Scalar>(x: &[S], x2: &[S], p: &RbfParams<S>) -> S {
    debug_assert_eq!(x.len(), p.input_dim());
    debug_assert_eq!(x2.len(), p.input_dim());
    let mut acc = S::zero();
    for d in 0..x.len() {
        let r = (x[d] - x2[d]) / p.lengthscales[d];
        acc += r * r;
    }
    p.variance * (-acc.scale(0.5)).exp()
}

/// Gram block between the rows of `xa` and `xb`.
pub fn kern_matrix<S: Scalar>(xa: &Mat<S>, xb: &Mat<S>, p: &RbfParams<S>) -> Mat<S> {
    Mat::from_fn(xa.rows(), xb.rows(), |i, j| kern(xa.row(i), xb.row(j), p))
}

/// Kernel vector between one point and the rows of `xb`.
pub fn kern_vector<S: Scalar>(x: &[S], xb: &Mat<S>, p: &RbfParams<S>) -> Vec<S> {
    (0..xb.rows()).map(|j| kern(x, xb.row(j), p)).collect()
}

/// Diagonal of `kern_matrix(xa, xa)` without building the matrix.
pub fn kern_diag<S: Scalar>(xa: &Mat<S>, p: &RbfParams<S>) -> Vec<S> {
    (0..xa.rows()).map(|_| p.variance).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::chol;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_1d() -> RbfParams<f64> {
        RbfParams::default_init(1)
    }

    #[test]
    fn zero_distance_gives_variance() {
        let p = RbfParams::new(1.7, vec![0.3, 2.0]).unwrap();
        let x = [0.4, -1.0];
        assert_eq!(kern(&x, &x, &p), 1.7);
    }

    #[test]
    fn unit_distance_closed_form() {
        let p = unit_1d();
        assert_relative_eq!(kern(&[0.0], &[1.0], &p), (-0.5f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn far_separation_decays_to_zero() {
        let p = unit_1d();
        assert!(kern(&[0.0], &[100.0], &p) < 1e-100);
    }

    #[test]
    fn single_point_gram() {
        let p = RbfParams::new(2.5, vec![1.0]).unwrap();
        let x = Mat::from_rows(vec![vec![0.3]]);
        let k = kern_matrix(&x, &x, &p);
        assert_eq!(k.rows(), 1);
        assert_eq!(k[(0, 0)], 2.5);
    }

    #[test]
    fn gram_symmetric_with_matching_diag() {
        let p = RbfParams::new(1.3, vec![0.7]).unwrap();
        let x = Mat::from_rows(vec![vec![-0.5], vec![0.2], vec![1.9]]);
        let k = kern_matrix(&x, &x, &p);
        let diag = kern_diag(&x, &p);
        for i in 0..3 {
            assert_eq!(k[(i, i)], diag[i]);
            for j in 0..3 {
                assert_eq!(k[(i, j)], k[(j, i)]);
            }
        }
    }

    #[test]
    fn three_point_gram_closed_form() {
        let p = unit_1d();
        let x = Mat::from_rows(vec![vec![-1.0], vec![0.0], vec![1.0]]);
        let k = kern_matrix(&x, &x, &p);
        assert_relative_eq!(k[(0, 1)], (-0.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(k[(1, 2)], (-0.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(k[(0, 2)], (-2.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn gram_plus_nugget_is_factoriable_at_n200() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Mat::from_fn(200, 1, |_, _| rng.gen_range(-3.0..3.0));
        let p = unit_1d();
        let mut k = kern_matrix(&x, &x, &p);
        for i in 0..200 {
            k[(i, i)] += 1e-8;
        }
        assert!(chol(&k).is_ok());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn translation_invariance(a in -5.0f64..5.0, b in -5.0f64..5.0, shift in -10.0f64..10.0) {
            let p = RbfParams::new(1.4, vec![0.8]).unwrap();
            let base = kern(&[a], &[b], &p);
            let moved = kern(&[a + shift], &[b + shift], &p);
            proptest::prop_assert!((base - moved).abs() <= 1e-12 * base.max(1e-12));
        }

        #[test]
        fn joint_rescaling_invariance(a in -3.0f64..3.0, b in -3.0f64..3.0, c in 0.1f64..10.0) {
            let p = RbfParams::new(1.0, vec![0.6]).unwrap();
            let scaled = RbfParams::new(1.0, vec![0.6 * c]).unwrap();
            let base = kern(&[a], &[b], &p);
            let moved = kern(&[a * c], &[b * c], &scaled);
            proptest::prop_assert!((base - moved).abs() <= 1e-12);
        }

        #[test]
        fn gram_with_nugget_factorizes(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 2 + (seed % 40) as usize;
            let x = Mat::from_fn(n, 1, |_, _| rng.gen_range(-4.0..4.0));
            let p = RbfParams::new(1.0, vec![1.0]).unwrap();
            let mut k = kern_matrix(&x, &x, &p);
            for i in 0..n {
                k[(i, i)] += 1e-8;
            }
            proptest::prop_assert!(chol(&k).is_ok());
        }
    }
}
