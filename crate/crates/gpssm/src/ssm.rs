//! Generative state-space model, the kink benchmark transition, and
//! synthetic dataset construction with CSV/JSON serialization.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::PsdMatrix;
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// Linear-Gaussian emission `y | x ~ N(C x + d, R)`.
#[derive(Clone, Debug)]
pub struct EmissionModel<S> {
    pub c: Mat<S>,
    pub d: Vec<S>,
    pub r: PsdMatrix<S>,
}

impl<S: Scalar> EmissionModel<S> {
    pub fn new(c: Mat<S>, d: Vec<S>, r: PsdMatrix<S>) -> Result<Self> {
        if d.len() != c.rows() || r.dim() != c.rows() {
            return Err(Error::DimensionMismatch {
                what: "emission model",
                expected: c.rows(),
                got: d.len().max(r.dim()),
            });
        }
        Ok(EmissionModel { c, d, r })
    }

    /// Identity emission in `dim` dimensions with diagonal noise variance `r`.
    pub fn identity(dim: usize, r: f64) -> Self {
        EmissionModel {
            c: Mat::identity(dim),
            d: vec![S::zero(); dim],
            r: PsdMatrix::from_diag_vars(&vec![S::from_f64(r); dim]),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.c.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.cols()
    }

    /// Emission mean `C x + d`.
    pub fn mean(&self, x: &[S]) -> Vec<S> {
        let mut m = self.c.matvec(x);
        for (mi, di) in m.iter_mut().zip(&self.d) {
            *mi += *di;
        }
        m
    }
}

/// Transition noise covariance `Q` of `x' | f, x ~ N(f(x), Q)`.
#[derive(Clone, Debug)]
pub struct ProcessNoise<S> {
    pub q: PsdMatrix<S>,
}

impl<S: Scalar> ProcessNoise<S> {
    pub fn isotropic(dim: usize, var: f64) -> Self {
        ProcessNoise {
            q: PsdMatrix::from_diag_vars(&vec![S::from_f64(var); dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }
}

/// Generation settings recorded next to a synthetic dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub t_len: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

/// Observations, optionally with the latent states that generated them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub y: Mat<f64>,
    pub x_true: Option<Mat<f64>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn t_len(&self) -> usize {
        self.y.rows()
    }

    pub fn obs_dim(&self) -> usize {
        self.y.cols()
    }

    /// Write observations (and latent states when present) as CSV with
    /// header `t,y_0..y_{E-1},x_0..x_{D-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let e = self.obs_dim();
        let d = self.x_true.as_ref().map_or(0, |x| x.cols());
        let mut header = String::from("t");
        for j in 0..e {
            header.push_str(&format!(",y_{j}"));
        }
        for j in 0..d {
            header.push_str(&format!(",x_{j}"));
        }
        writeln!(out, "{header}")?;
        for t in 0..self.t_len() {
            let mut line = t.to_string();
            for j in 0..e {
                line.push_str(&format!(",{}", self.y[(t, j)]));
            }
            if let Some(x) = &self.x_true {
                for j in 0..d {
                    line.push_str(&format!(",{}", x[(t, j)]));
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn write_meta(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Read a dataset written by [`Dataset::write_csv`]; the sidecar is
    /// optional (its absence leaves placeholder metadata).
    pub fn read_csv(csv_path: &Path, meta_path: Option<&Path>) -> Result<Dataset> {
        let file = std::fs::File::open(csv_path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty dataset csv".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let e = cols.iter().filter(|c| c.starts_with("y_")).count();
        let d = cols.iter().filter(|c| c.starts_with("x_")).count();
        if e == 0 {
            return Err(Error::InvalidConfig("dataset csv without y columns".into()));
        }
        let mut y_rows: Vec<Vec<f64>> = Vec::new();
        let mut x_rows: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 1 + e + d {
                return Err(Error::InvalidConfig(format!(
                    "dataset row has {} fields, expected {}",
                    fields.len(),
                    1 + e + d
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad float '{s}' in dataset")))
            };
            y_rows.push(
                fields[1..1 + e]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<_>>()?,
            );
            if d > 0 {
                x_rows.push(
                    fields[1 + e..]
                        .iter()
                        .map(|s| parse(s))
                        .collect::<Result<_>>()?,
                );
            }
        }
        let t_len = y_rows.len();
        let meta = match meta_path {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => DatasetMeta {
                seed: 0,
                t_len,
                q: vec![],
                r: vec![],
            },
        };
        Ok(Dataset {
            y: Mat::from_rows(y_rows),
            x_true: if x_rows.is_empty() {
                None
            } else {
                Some(Mat::from_rows(x_rows))
            },
            meta,
        })
    }
}

/// The 1-D "kink" benchmark transition:
/// `f(x) = 0.8 + (x + 0.2) · (1 − 5 / (1 + e^{−2x}))`.
pub fn kink(x: f64) -> f64 {
    0.8 + (x + 0.2) * (1.0 - 5.0 / (1.0 + (-2.0 * x).exp()))
}

/// Ancestral sampling of the generative model: `x₁ ~ N(0, I)`,
/// `x_{t+1} | x_t ~ N(f(x_t), Q)`, `y_t | x_t ~ N(C x_t + d, R)`.
pub fn simulate<F>(
    f: F,
    t_len: usize,
    q: &ProcessNoise<f64>,
    em: &EmissionModel<f64>,
    seed: u64,
) -> Dataset
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    assert!(t_len >= 2, "need at least two steps");
    let d = q.dim();
    let e = em.obs_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    };

    let mut x = Mat::zeros(t_len, d);
    let mut y = Mat::zeros(t_len, e);
    let mut state = draw(d, &mut rng);
    for t in 0..t_len {
        for j in 0..d {
            x[(t, j)] = state[j];
        }
        let noise = em.r.transform(&draw(e, &mut rng));
        let mean = em.mean(&state);
        for j in 0..e {
            y[(t, j)] = mean[j] + noise[j];
        }
        if t + 1 < t_len {
            let step = q.q.transform(&draw(d, &mut rng));
            let fx = f(&state);
            assert_eq!(fx.len(), d, "transition output dim");
            state = fx.iter().zip(&step).map(|(m, n)| m + n).collect();
        }
    }
    Dataset {
        y,
        x_true: Some(x),
        meta: DatasetMeta {
            seed,
            t_len,
            q: mat_to_rows(&q.q.reconstruct()),
            r: mat_to_rows(&em.r.reconstruct()),
        },
    }
}

fn mat_to_rows(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// The kink experiment dataset: 50 steps of 1-D kink dynamics with process
/// variance 0.01 and emission variance 0.1, identity emission.
pub fn make_kink_dataset(seed: u64) -> Dataset {
    let q = ProcessNoise::isotropic(1, 0.01);
    let em = EmissionModel::identity(1, 0.1);
    let mut ds = simulate(|x| vec![kink(x[0])], 50, &q, &em, seed);
    // Record the requested settings rather than the factor round trip.
    ds.meta.q = vec![vec![0.01]];
    ds.meta.r = vec![vec![0.1]];
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kink_root_of_second_factor() {
        assert_eq!(kink(-0.2), 0.8);
    }

    #[test]
    fn kink_at_zero() {
        // 0.8 + 0.2 · (1 − 5/2) = 0.5
        assert_relative_eq!(kink(0.0), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn kink_at_minus_three() {
        let expect = 0.8 + (-2.8) * (1.0 - 5.0 / (1.0 + 6.0f64.exp()));
        assert_relative_eq!(kink(-3.0), expect, max_relative = 1e-15);
        assert_relative_eq!(kink(-3.0), -1.965383275807113, max_relative = 1e-12);
    }

    #[test]
    fn kink_derivative_bounded_on_plot_range() {
        let n = 4000;
        let h = 1e-6;
        let mut max_slope = 0.0f64;
        for i in 0..=n {
            let x = -3.0 + 4.2 * i as f64 / n as f64;
            let slope = (kink(x + h) - kink(x - h)) / (2.0 * h);
            assert!(slope.is_finite());
            max_slope = max_slope.max(slope.abs());
        }
        assert!(max_slope.is_finite() && max_slope < 20.0);
    }

    #[test]
    fn noiseless_identity_dynamics_keep_first_state() {
        let q = ProcessNoise::isotropic(1, 0.0);
        let em = EmissionModel::identity(1, 0.0);
        let ds = simulate(|x| x.to_vec(), 6, &q, &em, 99);
        let x1 = ds.y[(0, 0)];
        for t in 0..6 {
            assert_eq!(ds.y[(t, 0)], x1);
        }
    }

    #[test]
    fn simulate_output_shapes() {
        let q = ProcessNoise::isotropic(2, 0.1);
        let c = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let em = EmissionModel::new(
            c,
            vec![0.0; 3],
            PsdMatrix::from_diag_vars(&[0.1, 0.1, 0.1]),
        )
        .unwrap();
        let ds = simulate(|x| x.to_vec(), 7, &q, &em, 1);
        assert_eq!(ds.y.rows(), 7);
        assert_eq!(ds.y.cols(), 3);
        let x = ds.x_true.unwrap();
        assert_eq!(x.rows(), 7);
        assert_eq!(x.cols(), 2);
    }

    #[test]
    fn transition_residual_second_moment_matches_q() {
        let q_var = 0.01;
        let q = ProcessNoise::isotropic(1, q_var);
        let em = EmissionModel::identity(1, 0.1);
        let n = 100_001usize;
        let ds = simulate(|x| vec![kink(x[0])], n, &q, &em, 4);
        let x = ds.x_true.unwrap();
        let mut sum_sq = 0.0;
        for t in 0..n - 1 {
            let r = x[(t + 1, 0)] - kink(x[(t, 0)]);
            sum_sq += r * r;
        }
        let est = sum_sq / (n - 1) as f64;
        let se = q_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((est - q_var).abs() <= 5.0 * se, "est {est} vs {q_var}");
    }

    #[test]
    fn kink_dataset_meta_records_paper_noise_levels() {
        let ds = make_kink_dataset(0);
        assert_eq!(ds.meta.t_len, 50);
        assert_eq!(ds.t_len(), 50);
        assert_relative_eq!(ds.meta.q[0][0], 0.01, max_relative = 1e-12);
        assert_relative_eq!(ds.meta.r[0][0], 0.1, max_relative = 1e-12);
    }

    #[test]
    fn kink_dataset_deterministic_in_seed() {
        let a = make_kink_dataset(7);
        let b = make_kink_dataset(7);
        assert_eq!(a.y.max_abs_diff(&b.y), 0.0);
        let c = make_kink_dataset(8);
        assert!(c.y.max_abs_diff(&a.y) > 0.0);
    }

    #[test]
    fn emission_noise_variance_matches_r() {
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for seed in 0..2000u64 {
            let ds = make_kink_dataset(seed);
            let x = ds.x_true.as_ref().unwrap();
            for t in 0..ds.t_len() {
                let r = ds.y[(t, 0)] - x[(t, 0)];
                sum_sq += r * r;
                count += 1;
            }
        }
        let est = sum_sq / count as f64;
        let se = 0.1 * (2.0 / count as f64).sqrt();
        assert!((est - 0.1).abs() <= 5.0 * se, "est {est}");
    }

    #[test]
    fn zero_noise_dataset_iterates_kink_exactly() {
        let q = ProcessNoise::isotropic(1, 0.0);
        let em = EmissionModel::identity(1, 0.0);
        let ds = simulate(|x| vec![kink(x[0])], 20, &q, &em, 12);
        for t in 0..19 {
            assert_eq!(ds.y[(t + 1, 0)], kink(ds.y[(t, 0)]));
        }
    }

    #[test]
    fn csv_roundtrip_preserves_data() {
        let dir = std::env::temp_dir().join("gpssm_ssm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("data.csv");
        let meta = dir.join("data.meta.json");
        let ds = make_kink_dataset(3);
        ds.write_csv(&csv).unwrap();
        ds.write_meta(&meta).unwrap();
        let back = Dataset::read_csv(&csv, Some(&meta)).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(ds.y.max_abs_diff(&back.y), 0.0);
        assert_eq!(
            ds.x_true
                .as_ref()
                .unwrap()
                .max_abs_diff(back.x_true.as_ref().unwrap()),
            0.0
        );
        let header = std::fs::read_to_string(&csv)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        assert_eq!(header, "t,y_0,x_0");
    }
}
