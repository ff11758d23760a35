//! Unconstrained parameter packing, exact gradients of the frozen-noise
//! bound via the reverse-mode tape, a finite-difference oracle, and the
//! stochastic training loop.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::elbo::{elbo_with_noises, trajectory_terms, ElboEstimate, ElboValue};
use crate::error::{Error, Result};
use crate::gauss::{gauss_kl, GaussianMoments, PsdMatrix};
use crate::kernel::RbfParams;
use crate::linalg::{lift_vec, Mat};
use crate::posterior::{
    prssm_chain, uniform_starts, ChainParams, ChunkScheme, NoiseShape, TrajectoryNoise, VariantId,
};
use crate::scalar::Scalar;
use crate::sparse_gp::InducingPosterior;
use crate::ssm::{Dataset, EmissionModel};

/// Fixed number of tape groups per gradient evaluation. Groups partition the
/// Monte Carlo samples deterministically (independent of thread count) so
/// reductions are bit-reproducible.
const GRAD_GROUPS: usize = 4;

fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Dimensions and parameterization choices that determine the flat layout.
#[derive(Clone, Debug)]
pub struct ModelShape {
    pub t_len: usize,
    pub d: usize,
    pub e: usize,
    pub m: usize,
    pub chunk_starts: Vec<usize>,
    /// Diagonal `S_t` (full triangular factor when false).
    pub s_diag: bool,
    /// One `(A, b, S)` shared across steps.
    pub tied: bool,
    /// Prior-transition mode: the `a`/`b`/`s` blocks are absent and the
    /// chain is reconstructed as the prior transition around `Q`.
    pub prssm: bool,
}

#[derive(Clone, Debug)]
struct Block {
    name: &'static str,
    start: usize,
    len: usize,
}

/// Ordered map from named parameter blocks to slices of the flat vector,
/// together with the constraint transforms applied on unpacking.
#[derive(Clone, Debug)]
pub struct Layout {
    pub shape: ModelShape,
    blocks: Vec<Block>,
    total: usize,
}

impl Layout {
    pub fn new(shape: ModelShape) -> Layout {
        let d = shape.d;
        let e = shape.e;
        let m = shape.m;
        let n_ab = if shape.prssm {
            0
        } else if shape.tied {
            1
        } else {
            shape.t_len - 1
        };
        let s_len = if shape.s_diag { d } else { tri_len(d) };
        let n_chunks = shape.chunk_starts.len();

        let mut blocks = Vec::new();
        let mut at = 0usize;
        let mut push = |name: &'static str, len: usize| {
            blocks.push(Block {
                name,
                start: at,
                len,
            });
            at += len;
        };
        push("kernel", 1 + d);
        push("z", m * d);
        push("mu_u", m * d);
        push("sigma_u", d * tri_len(m));
        push("m1", d);
        push("p1", tri_len(d));
        push("a", n_ab * d * d);
        push("b", n_ab * d);
        push("s", n_ab * s_len);
        push("q", tri_len(d));
        push("r", tri_len(e));
        push("chunk_initials", (n_chunks - 1) * (d + tri_len(d)));
        Layout {
            shape,
            blocks,
            total: at,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn block_names(&self) -> Vec<&'static str> {
        self.blocks.iter().map(|b| b.name).collect()
    }

    pub fn block_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.start..b.start + b.len)
    }

    /// Name of the block containing flat coordinate `idx`.
    pub fn block_of(&self, idx: usize) -> &'static str {
        self.blocks
            .iter()
            .find(|b| idx >= b.start && idx < b.start + b.len)
            .map(|b| b.name)
            .unwrap_or("?")
    }
}

/// Parts of the model that are never optimized.
#[derive(Clone, Debug)]
pub struct FixedParts {
    pub c: Mat<f64>,
    pub d: Vec<f64>,
}

/// A full set of model parameters on scalar type `S`.
pub struct Model<S> {
    pub gp: InducingPosterior<S>,
    pub chain: ChainParams<S>,
    pub em: EmissionModel<S>,
    pub q_noise: PsdMatrix<S>,
    pub scheme: ChunkScheme<S>,
}

/// Flat unconstrained parameters plus their layout.
#[derive(Clone, Debug)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub layout: Layout,
}

fn pack_tri(l: &Mat<f64>, out: &mut Vec<f64>) {
    for i in 0..l.rows() {
        for j in 0..=i {
            out.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
    }
}

fn unpack_tri<S: Scalar>(slice: &[S], n: usize) -> Mat<S> {
    let mut l = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = if i == j { slice[k].exp() } else { slice[k] };
            k += 1;
        }
    }
    l
}

/// Serialize model parameters into the unconstrained flat vector.
pub fn pack(model: &Model<f64>, layout: &Layout) -> Vec<f64> {
    let shape = &layout.shape;
    let mut flat = Vec::with_capacity(layout.len());

    let kernel = model.gp.kernel();
    flat.push(kernel.variance.ln());
    for l in &kernel.lengthscales {
        flat.push(l.ln());
    }
    flat.extend_from_slice(model.gp.z().data());
    flat.extend_from_slice(model.gp.mu_u().data());
    for sigma in model.gp.sigma_u() {
        pack_tri(sigma.factor(), &mut flat);
    }
    flat.extend_from_slice(&model.chain.m1);
    pack_tri(model.chain.p1.factor(), &mut flat);
    if !shape.prssm {
        let n_ab = if shape.tied { 1 } else { shape.t_len - 1 };
        for t in 0..n_ab {
            flat.extend_from_slice(model.chain.a_t(t).data());
        }
        for t in 0..n_ab {
            flat.extend_from_slice(model.chain.b_t(t));
        }
        for t in 0..n_ab {
            let f = model.chain.s_t(t).factor();
            if shape.s_diag {
                for i in 0..shape.d {
                    flat.push(f[(i, i)].ln());
                }
            } else {
                pack_tri(f, &mut flat);
            }
        }
    }
    pack_tri(model.q_noise.factor(), &mut flat);
    pack_tri(model.em.r.factor(), &mut flat);
    for init in &model.scheme.initials {
        flat.extend_from_slice(&init.mean);
        pack_tri(init.cov.factor(), &mut flat);
    }
    debug_assert_eq!(flat.len(), layout.len());
    flat
}

/// Rebuild typed model parameters from the flat vector; positives pass
/// through `exp`, covariances through triangular factors with log diagonal.
pub fn unpack<S: Scalar>(flat: &[S], layout: &Layout, fixed: &FixedParts) -> Result<Model<S>> {
    if flat.len() != layout.len() {
        return Err(Error::DimensionMismatch {
            what: "flat parameter vector",
            expected: layout.len(),
            got: flat.len(),
        });
    }
    for (i, v) in flat.iter().enumerate() {
        if !v.value().is_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite parameter entry in block '{}'",
                layout.block_of(i)
            )));
        }
    }
    let shape = &layout.shape;
    let (d, e, m) = (shape.d, shape.e, shape.m);
    let take = |name: &str| &flat[layout.block_range(name).unwrap()];

    let kern_slice = take("kernel");
    let kernel = RbfParams::new(
        kern_slice[0].exp(),
        kern_slice[1..].iter().map(|x| x.exp()).collect(),
    )?;
    let z = Mat::from_vec(m, d, take("z").to_vec());
    let mu_u = Mat::from_vec(m, d, take("mu_u").to_vec());
    let sig_slice = take("sigma_u");
    let per = tri_len(m);
    let sigma_u: Vec<PsdMatrix<S>> = (0..d)
        .map(|j| PsdMatrix::from_factor(unpack_tri(&sig_slice[j * per..(j + 1) * per], m)))
        .collect::<Result<_>>()?;
    let gp = InducingPosterior::new(z, mu_u, sigma_u, kernel)?;

    let m1 = take("m1").to_vec();
    let p1 = PsdMatrix::from_factor(unpack_tri(take("p1"), d))?;
    let q_noise = PsdMatrix::from_factor(unpack_tri(take("q"), d))?;
    let r = PsdMatrix::from_factor(unpack_tri(take("r"), e))?;
    let em = EmissionModel::new(Mat::lift(&fixed.c), lift_vec(&fixed.d), r)?;

    let chain = if shape.prssm {
        prssm_chain(shape.t_len, &q_noise, m1, p1)?
    } else {
        let n_ab = if shape.tied { 1 } else { shape.t_len - 1 };
        let a_slice = take("a");
        let a: Vec<Mat<S>> = (0..n_ab)
            .map(|t| Mat::from_vec(d, d, a_slice[t * d * d..(t + 1) * d * d].to_vec()))
            .collect();
        let b_slice = take("b");
        let b: Vec<Vec<S>> = (0..n_ab)
            .map(|t| b_slice[t * d..(t + 1) * d].to_vec())
            .collect();
        let s_slice = take("s");
        let s_len = if shape.s_diag { d } else { tri_len(d) };
        let s: Vec<PsdMatrix<S>> = (0..n_ab)
            .map(|t| {
                let sl = &s_slice[t * s_len..(t + 1) * s_len];
                let factor = if shape.s_diag {
                    Mat::diag_from(&sl.iter().map(|x| x.exp()).collect::<Vec<_>>())
                } else {
                    unpack_tri(sl, d)
                };
                PsdMatrix::from_factor(factor)
            })
            .collect::<Result<_>>()?;
        ChainParams::new(m1, p1, a, b, s, shape.t_len)?
    };

    let init_slice = take("chunk_initials");
    let per_init = d + tri_len(d);
    let initials: Vec<GaussianMoments<S>> = (0..shape.chunk_starts.len() - 1)
        .map(|j| {
            let sl = &init_slice[j * per_init..(j + 1) * per_init];
            GaussianMoments::new(
                sl[..d].to_vec(),
                PsdMatrix::from_factor(unpack_tri(&sl[d..], d))?,
            )
        })
        .collect::<Result<_>>()?;
    let scheme = ChunkScheme::new(shape.chunk_starts.clone(), shape.t_len, initials)?;

    Ok(Model {
        gp,
        chain,
        em,
        q_noise,
        scheme,
    })
}

/// Frozen-noise evaluation context: the bound becomes a deterministic
/// function of the flat parameters, with exact gradients from the tape and
/// a central-difference oracle to check them against.
pub struct Objective<'a> {
    pub variant: VariantId,
    pub layout: &'a Layout,
    pub fixed: &'a FixedParts,
    pub y: &'a Mat<f64>,
    pub noises: Vec<TrajectoryNoise>,
    pub minibatch: Option<Vec<usize>>,
}

impl Objective<'_> {
    pub fn value(&self, flat: &[f64]) -> Result<ElboEstimate> {
        let model = unpack::<f64>(flat, self.layout, self.fixed)?;
        let prep = model.gp.prepare()?;
        let v = elbo_with_noises(
            self.variant,
            &model.chain,
            &prep,
            &model.em,
            &model.q_noise,
            self.y,
            &model.scheme,
            self.minibatch.as_deref(),
            &self.noises,
        )?;
        Ok(v.estimate())
    }

    /// Central finite difference of the frozen-noise bound along one
    /// coordinate; `h` is relative to the coordinate's magnitude.
    pub fn fd_gradient(&self, flat: &[f64], coordinate: usize, h: f64) -> Result<f64> {
        let step = h * flat[coordinate].abs().max(1.0);
        let mut plus = flat.to_vec();
        plus[coordinate] += step;
        let mut minus = flat.to_vec();
        minus[coordinate] -= step;
        Ok((self.value(&plus)?.value - self.value(&minus)?.value) / (2.0 * step))
    }

    /// Gradient of the two deterministic KL terms alone.
    pub fn kl_gradient(&self, flat: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let leaves = tape.vars(flat);
        let model = unpack(&leaves, self.layout, self.fixed)?;
        let prep = model.gp.prepare()?;
        let kl_u = prep.kl_u()?;
        let kl_x1 = gauss_kl(
            &model.chain.x1_moments(),
            &GaussianMoments::standard(self.layout.shape.d),
        )?;
        let adj = tape.gradient(kl_u + kl_x1);
        Ok(adj[..flat.len()].to_vec())
    }

    /// Exact gradient of the frozen-noise bound, with the matching estimate.
    pub fn gradient(&self, flat: &[f64]) -> Result<(ElboEstimate, Vec<f64>)> {
        let p = flat.len();
        let n_samples = self.noises.len();
        let all: Vec<usize> = (0..self.layout.shape.chunk_starts.len()).collect();
        let subset: &[usize] = self.minibatch.as_deref().unwrap_or(&all);
        let scale = all.len() as f64 / subset.len() as f64;

        // Samples are partitioned into a fixed number of groups; each group
        // records one tape and backpropagates the group's summed terms.
        let group_size = n_samples.div_ceil(GRAD_GROUPS);
        let groups: Vec<&[TrajectoryNoise]> = self.noises.chunks(group_size).collect();

        struct GroupOut {
            terms: Vec<(f64, f64)>,
            grad: Vec<f64>,
        }
        let outs: Result<Vec<GroupOut>> = groups
            .par_iter()
            .map(|group| {
                let tape = Tape::new();
                let leaves = tape.vars(flat);
                let model = unpack(&leaves, self.layout, self.fixed)?;
                let prep = model.gp.prepare()?;
                let mut total = crate::autodiff::Var::constant(0.0);
                let mut terms = Vec::with_capacity(group.len());
                for noise in *group {
                    let (ll, tkl) = trajectory_terms(
                        self.variant,
                        &model.chain,
                        &prep,
                        &model.em,
                        &model.q_noise,
                        self.y,
                        &model.scheme,
                        subset,
                        noise,
                    )?;
                    terms.push((ll.value() * scale, tkl.value() * scale));
                    total = total + (ll - tkl);
                }
                let adj = tape.gradient(total);
                Ok(GroupOut {
                    terms,
                    grad: adj[..p].to_vec(),
                })
            })
            .collect();
        let outs = outs?;

        // KL terms on their own tape (independent of the sample count).
        let kl_tape = Tape::new();
        let leaves = kl_tape.vars(flat);
        let model = unpack(&leaves, self.layout, self.fixed)?;
        let prep = model.gp.prepare()?;
        let kl_u = prep.kl_u()?;
        let kl_x1 = gauss_kl(
            &model.chain.x1_moments(),
            &GaussianMoments::standard(self.layout.shape.d),
        )?;
        let kl_adj = kl_tape.gradient(kl_u + kl_x1);

        let mut grad = vec![0.0; p];
        for out in &outs {
            for (g, o) in grad.iter_mut().zip(&out.grad) {
                *g += o;
            }
        }
        let w = scale / n_samples as f64;
        for (g, k) in grad.iter_mut().zip(&kl_adj[..p]) {
            *g = *g * w - k;
        }
        for (i, g) in grad.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: self.layout.block_of(i).to_string(),
                });
            }
        }

        let mut per_sample = Vec::with_capacity(n_samples);
        let mut ll_sum = 0.0;
        let mut tkl_sum = 0.0;
        for out in &outs {
            for &(ll, tkl) in &out.terms {
                per_sample.push(ll - tkl);
                ll_sum += ll;
                tkl_sum += tkl;
            }
        }
        let value = ElboValue {
            value: 0.0,
            loglik: ll_sum / n_samples as f64,
            kl_u: kl_u.value(),
            kl_x1: kl_x1.value(),
            transition_kl: tkl_sum / n_samples as f64,
            per_sample,
            minibatch_scale: scale,
        };
        Ok((value.estimate(), grad))
    }
}

/// Training-loop configuration.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Chunk length; `None` disables chunking.
    pub tau: Option<usize>,
    /// Number of chunks per minibatch (requires `tau`); drawn without
    /// replacement within an epoch.
    pub minibatch_chunks: Option<usize>,
    /// Parameter blocks held at their initial values.
    pub frozen: Vec<String>,
    pub tied: bool,
    pub s_diag: bool,
    pub optimize_z: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip. The transition-KL gradient at a fresh
    /// initialization can spike by several orders of magnitude and poison
    /// the second-moment accumulators for thousands of iterations.
    pub grad_clip: Option<f64>,
    pub q_init: f64,
    /// Latent dimension; defaults to the observation dimension.
    pub state_dim: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 3000,
            step_size: 1e-2,
            n_samples: 10,
            seed: 0,
            tau: None,
            minibatch_chunks: None,
            frozen: vec![],
            tied: false,
            s_diag: true,
            optimize_z: true,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: Some(100.0),
            q_init: 0.1,
            state_dim: None,
        }
    }
}

/// One training-loop iteration's bookkeeping.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub iter: usize,
    pub estimate: ElboEstimate,
    pub grad_norm: f64,
    pub step_norm: f64,
}

pub struct FitResult {
    pub params: ParamVector,
    pub fixed: FixedParts,
    pub trace: Vec<TraceRow>,
    pub best_iter: usize,
}

impl FitResult {
    pub fn model(&self) -> Result<Model<f64>> {
        unpack(&self.params.flat, &self.params.layout, &self.fixed)
    }

    /// Serialize the trace as CSV.
    pub fn write_trace_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "iter,elbo,loglik,kl_u,kl_x1,trans_kl,stderr,grad_norm")?;
        for row in &self.trace {
            let e = &row.estimate;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                row.iter, e.value, e.loglik, e.kl_u, e.kl_x1, e.transition_kl, e.stderr,
                row.grad_norm
            )?;
        }
        Ok(())
    }
}

/// Pseudo-inverse lift of an observation into state space: solves
/// `(CᵀC) x = Cᵀ(y − d)` (identity when the emission is identity).
fn lift_obs(fixed: &FixedParts, y: &[f64]) -> Vec<f64> {
    let d = fixed.c.cols();
    let resid: Vec<f64> = y.iter().zip(&fixed.d).map(|(yi, di)| yi - di).collect();
    let ct = fixed.c.transpose();
    let rhs = ct.matvec(&resid);
    let mut gram = ct.matmul(&fixed.c);
    for i in 0..d {
        gram[(i, i)] += 1e-12;
    }
    let chol = crate::gauss::chol(&gram).expect("emission gram");
    chol.solve(&rhs)
}

/// Build the initial model for a dataset per the default initialization:
/// unit kernel, inducing inputs spread over the observed range, identity
/// mean function, chain anchored to the observations.
pub fn init_model(
    dataset: &Dataset,
    variant: VariantId,
    m: usize,
    config: &FitConfig,
) -> Result<(Model<f64>, FixedParts, Layout)> {
    let t_len = dataset.t_len();
    let e = dataset.obs_dim();
    let d = config.state_dim.unwrap_or(e);

    let mut c = Mat::zeros(e, d);
    for i in 0..e.min(d) {
        c[(i, i)] = 1.0;
    }
    let fixed = FixedParts {
        c,
        d: vec![0.0; e],
    };

    let r_diag: Vec<f64> = (0..e)
        .map(|j| {
            dataset
                .meta
                .r
                .get(j)
                .and_then(|row| row.get(j))
                .copied()
                .unwrap_or(0.1)
        })
        .collect();

    let chunk_starts = match config.tau {
        Some(tau) => uniform_starts(t_len, tau),
        None => vec![0],
    };
    let shape = ModelShape {
        t_len,
        d,
        e,
        m,
        chunk_starts: chunk_starts.clone(),
        s_diag: config.s_diag,
        tied: config.tied,
        prssm: variant == VariantId::PrSsm,
    };
    let layout = Layout::new(shape);

    // Inducing inputs: equally spaced over the observed range, widened by 1.
    let kernel = RbfParams::default_init(d);
    let mut z = Mat::zeros(m, d);
    for dim in 0..d {
        let col = dim.min(e - 1);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..t_len {
            lo = lo.min(dataset.y[(t, col)]);
            hi = hi.max(dataset.y[(t, col)]);
        }
        for i in 0..m {
            z[(i, dim)] = if m == 1 {
                0.5 * (lo + hi)
            } else {
                (lo - 1.0) + (hi - lo + 2.0) * i as f64 / (m - 1) as f64
            };
        }
    }
    let mu_u = z.clone();
    // q(u) starts at a damped prior covariance; the full prior makes the
    // initial transition-KL gradient spike hard.
    let k_zz = crate::kernel::kern_matrix(&z, &z, &kernel).scale(0.1);
    let sigma_u = vec![crate::gauss::chol_conditioned(&k_zz, 1e4)?; d];
    let gp = InducingPosterior::new(z, mu_u, sigma_u, kernel)?;

    let m1 = lift_obs(&fixed, dataset.y.row(0));
    let p1_diag: Vec<f64> = (0..d).map(|j| r_diag[j.min(e - 1)]).collect();
    let p1 = PsdMatrix::from_diag_vars(&p1_diag);
    let q_noise = PsdMatrix::from_diag_vars(&vec![config.q_init; d]);
    let em = EmissionModel::new(
        Mat::lift(&fixed.c),
        fixed.d.clone(),
        PsdMatrix::from_diag_vars(&r_diag),
    )?;

    let chain = if layout.shape.prssm {
        prssm_chain(t_len, &q_noise, m1.clone(), p1.clone())?
    } else {
        let n_ab = if config.tied { 1 } else { t_len - 1 };
        let a = vec![Mat::zeros(d, d); n_ab];
        let b: Vec<Vec<f64>> = (0..n_ab)
            .map(|t| lift_obs(&fixed, dataset.y.row((t + 1).min(t_len - 1))))
            .collect();
        let s_diag_vals: Vec<f64> = (0..d)
            .map(|j| r_diag[j.min(e - 1)] + config.q_init)
            .collect();
        let s = vec![PsdMatrix::from_diag_vars(&s_diag_vals); n_ab];
        ChainParams::new(m1.clone(), p1.clone(), a, b, s, t_len)?
    };

    let initials: Vec<GaussianMoments<f64>> = chunk_starts[1..]
        .iter()
        .map(|&start| {
            GaussianMoments::new(
                lift_obs(&fixed, dataset.y.row(start)),
                PsdMatrix::from_diag_vars(&p1_diag),
            )
        })
        .collect::<Result<_>>()?;
    let scheme = ChunkScheme::new(chunk_starts, t_len, initials)?;

    Ok((
        Model {
            gp,
            chain,
            em,
            q_noise,
            scheme,
        },
        fixed,
        layout,
    ))
}

/// Stochastic gradient ascent on the bound with adaptive per-coordinate
/// step scaling (bias-corrected first/second moment accumulation). Returns
/// the best-bound parameters and the full per-iteration trace.
pub fn fit(dataset: &Dataset, variant: VariantId, m: usize, config: &FitConfig) -> Result<FitResult> {
    let (model0, fixed, layout) = init_model(dataset, variant, m, config)?;
    let mut flat = pack(&model0, &layout);

    let mut frozen = vec![false; layout.len()];
    let mut frozen_names = config.frozen.clone();
    if !config.optimize_z {
        frozen_names.push("z".into());
    }
    for name in &frozen_names {
        match layout.block_range(name) {
            Some(range) => {
                for f in &mut frozen[range] {
                    *f = true;
                }
            }
            None => {
                return Err(Error::InvalidConfig(format!(
                    "unknown frozen block '{name}'"
                )))
            }
        }
    }

    let shape = NoiseShape {
        t_len: layout.shape.t_len,
        d: layout.shape.d,
        m: layout.shape.m,
        dout: layout.shape.d,
        n_chunks: layout.shape.chunk_starts.len(),
    };
    let n_chunks = layout.shape.chunk_starts.len();
    let minibatch_k = config.minibatch_chunks.filter(|&k| k < n_chunks);
    let mut deck: Vec<usize> = (0..n_chunks).collect();
    let mut deck_pos = deck.len();
    let mut epoch = 0u64;

    let mut adam_m = vec![0.0; layout.len()];
    let mut adam_v = vec![0.0; layout.len()];
    let mut trace: Vec<TraceRow> = Vec::with_capacity(config.iterations);
    let mut best_flat = flat.clone();
    let mut best_value = f64::NEG_INFINITY;
    let mut best_iter = 0usize;
    let mut init_value = None;
    let mut diverged_streak = 0usize;

    for iter in 0..config.iterations {
        let minibatch = minibatch_k.map(|k| {
            let mut sel = Vec::with_capacity(k);
            for _ in 0..k {
                if deck_pos == deck.len() {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(config.seed ^ 0xD1CE ^ epoch.wrapping_mul(31));
                    deck.shuffle(&mut rng);
                    deck_pos = 0;
                    epoch += 1;
                }
                sel.push(deck[deck_pos]);
                deck_pos += 1;
            }
            sel.sort_unstable();
            sel
        });

        let noises: Vec<TrajectoryNoise> = (0..config.n_samples)
            .map(|s| {
                TrajectoryNoise::for_sample(variant, shape, config.seed, iter as u64, s as u64)
            })
            .collect();
        let objective = Objective {
            variant,
            layout: &layout,
            fixed: &fixed,
            y: &dataset.y,
            noises,
            minibatch,
        };
        let (estimate, mut grad) = objective.gradient(&flat)?;

        for (g, &f) in grad.iter_mut().zip(&frozen) {
            if f {
                *g = 0.0;
            }
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(clip) = config.grad_clip {
            if grad_norm > clip {
                let s = clip / grad_norm;
                for g in grad.iter_mut() {
                    *g *= s;
                }
            }
        }

        let t = (iter + 1) as f64;
        let bc1 = 1.0 - config.beta1.powf(t);
        let bc2 = 1.0 - config.beta2.powf(t);
        let mut step_sq = 0.0;
        for i in 0..flat.len() {
            if frozen[i] {
                continue;
            }
            adam_m[i] = config.beta1 * adam_m[i] + (1.0 - config.beta1) * grad[i];
            adam_v[i] = config.beta2 * adam_v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            let step = config.step_size * (adam_m[i] / bc1)
                / ((adam_v[i] / bc2).sqrt() + config.epsilon);
            // ascent
            flat[i] += step;
            step_sq += step * step;
        }

        if estimate.value > best_value {
            best_value = estimate.value;
            best_flat = flat.clone();
            best_iter = iter;
        }
        let init = *init_value.get_or_insert(estimate.value);
        let div_floor = init - 10.0 * init.abs().max(1.0);
        if estimate.value < div_floor {
            diverged_streak += 1;
            if diverged_streak >= 100 {
                return Err(Error::Diverged { iter });
            }
        } else {
            diverged_streak = 0;
        }

        trace.push(TraceRow {
            iter,
            estimate,
            grad_norm,
            step_norm: step_sq.sqrt(),
        });
    }

    Ok(FitResult {
        params: ParamVector {
            flat: best_flat,
            layout,
        },
        fixed,
        trace,
        best_iter,
    })
}
