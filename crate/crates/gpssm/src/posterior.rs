//! The approximate-posterior families over latent trajectories: per-step
//! transition moments, (chunked) trajectory sampling, and the PR-SSM mode
//! whose transitions equal the prior.
//!
//! Every random draw is a deterministic transform of externally supplied
//! base noise, so the sampled objective stays differentiable in the
//! variational parameters.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{chol, mvn_transform, GaussianMoments, PsdMatrix};
use crate::linalg::{lift_vec, Mat};
use crate::scalar::Scalar;
use crate::sparse_gp::PreparedGp;

/// The approximate-posterior families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    FactorisedLinear,
    FactorisedNonlinear,
    UFactorised,
    NonFactorised,
    PrSsm,
}

impl VariantId {
    pub const ALL: [VariantId; 5] = [
        VariantId::FactorisedLinear,
        VariantId::FactorisedNonlinear,
        VariantId::UFactorised,
        VariantId::NonFactorised,
        VariantId::PrSsm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::FactorisedLinear => "factorised_linear",
            VariantId::FactorisedNonlinear => "factorised_nonlinear",
            VariantId::UFactorised => "u_factorised",
            VariantId::NonFactorised => "non_factorised",
            VariantId::PrSsm => "pr_ssm",
        }
    }

    /// Whether trajectories condition on a draw of the inducing outputs.
    pub fn needs_u(self) -> bool {
        matches!(
            self,
            VariantId::UFactorised | VariantId::NonFactorised | VariantId::PrSsm
        )
    }

    /// Whether trajectories draw function values sequentially.
    pub fn needs_f(self) -> bool {
        matches!(self, VariantId::NonFactorised | VariantId::PrSsm)
    }
}

impl std::str::FromStr for VariantId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        VariantId::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}'")))
    }
}

/// Moments of `q(x₁)` plus the per-step free parameters `A_t, b_t, S_t`.
/// In tied mode one `(A, b, S)` triple is shared across all steps.
#[derive(Clone, Debug)]
pub struct ChainParams<S> {
    pub m1: Vec<S>,
    pub p1: PsdMatrix<S>,
    a: Vec<Mat<S>>,
    b: Vec<Vec<S>>,
    s: Vec<PsdMatrix<S>>,
    t_len: usize,
}

impl<S: Scalar> ChainParams<S> {
    pub fn new(
        m1: Vec<S>,
        p1: PsdMatrix<S>,
        a: Vec<Mat<S>>,
        b: Vec<Vec<S>>,
        s: Vec<PsdMatrix<S>>,
        t_len: usize,
    ) -> Result<Self> {
        let expect = t_len - 1;
        let tied = a.len() == 1 && expect != 1;
        if !tied && (a.len() != expect || b.len() != expect || s.len() != expect) {
            return Err(Error::DimensionMismatch {
                what: "chain parameter lists",
                expected: expect,
                got: a.len(),
            });
        }
        if tied && (b.len() != 1 || s.len() != 1) {
            return Err(Error::DimensionMismatch {
                what: "tied chain parameter lists",
                expected: 1,
                got: b.len().max(s.len()),
            });
        }
        if m1.len() != p1.dim() {
            return Err(Error::DimensionMismatch {
                what: "q(x1) moments",
                expected: p1.dim(),
                got: m1.len(),
            });
        }
        Ok(ChainParams {
            m1,
            p1,
            a,
            b,
            s,
            t_len,
        })
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn state_dim(&self) -> usize {
        self.m1.len()
    }

    pub fn tied(&self) -> bool {
        self.a.len() == 1 && self.t_len > 2
    }

    fn idx(&self, t: usize) -> usize {
        debug_assert!(t + 1 < self.t_len);
        if self.a.len() == 1 {
            0
        } else {
            t
        }
    }

    pub fn a_t(&self, t: usize) -> &Mat<S> {
        &self.a[self.idx(t)]
    }

    pub fn b_t(&self, t: usize) -> &[S] {
        &self.b[self.idx(t)]
    }

    pub fn s_t(&self, t: usize) -> &PsdMatrix<S> {
        &self.s[self.idx(t)]
    }

    pub fn x1_moments(&self) -> GaussianMoments<S> {
        GaussianMoments {
            mean: self.m1.clone(),
            cov: self.p1.clone(),
        }
    }
}

/// Chain configuration whose transitions equal the prior: `A = I`, `b = 0`,
/// `S_t = Q` (tied). With [`VariantId::PrSsm`] the per-step transition
/// becomes `N(f(x_t), Q)` and every transition KL term vanishes identically.
pub fn prssm_chain<S: Scalar>(
    t_len: usize,
    q: &PsdMatrix<S>,
    m1: Vec<S>,
    p1: PsdMatrix<S>,
) -> Result<ChainParams<S>> {
    let d = q.dim();
    ChainParams::new(
        m1,
        p1,
        vec![Mat::identity(d)],
        vec![vec![S::zero(); d]],
        vec![q.clone()],
        t_len,
    )
}

/// Partition of `0..T` into chunks with explicit start-of-chunk marginals
/// for every chunk after the first.
#[derive(Clone, Debug)]
pub struct ChunkScheme<S> {
    starts: Vec<usize>,
    t_len: usize,
    pub initials: Vec<GaussianMoments<S>>,
}

impl<S: Scalar> ChunkScheme<S> {
    pub fn new(starts: Vec<usize>, t_len: usize, initials: Vec<GaussianMoments<S>>) -> Result<Self> {
        if starts.first() != Some(&0) {
            return Err(Error::InvalidScheme("first chunk must start at 0".into()));
        }
        if !starts.windows(2).all(|w| w[0] < w[1]) || *starts.last().unwrap() >= t_len {
            return Err(Error::InvalidScheme(
                "chunk starts must be strictly increasing and below T".into(),
            ));
        }
        if initials.len() + 1 != starts.len() {
            return Err(Error::InvalidScheme(format!(
                "{} chunks need {} chunk-initial distributions, got {}",
                starts.len(),
                starts.len() - 1,
                initials.len()
            )));
        }
        Ok(ChunkScheme {
            starts,
            t_len,
            initials,
        })
    }

    /// One chunk covering the whole sequence.
    pub fn single(t_len: usize) -> Self {
        ChunkScheme {
            starts: vec![0],
            t_len,
            initials: vec![],
        }
    }

    pub fn n_chunks(&self) -> usize {
        self.starts.len()
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn range(&self, j: usize) -> (usize, usize) {
        let start = self.starts[j];
        let end = if j + 1 < self.starts.len() {
            self.starts[j + 1]
        } else {
            self.t_len
        };
        (start, end)
    }
}

/// Chunk start indices for chunks of length `tau` (the final chunk absorbs
/// any remainder shorter than `tau`).
pub fn uniform_starts(t_len: usize, tau: usize) -> Vec<usize> {
    assert!(tau >= 1);
    (0..t_len).step_by(tau).collect()
}

/// Shape information needed to generate base noise for one trajectory.
#[derive(Clone, Copy, Debug)]
pub struct NoiseShape {
    pub t_len: usize,
    pub d: usize,
    pub m: usize,
    pub dout: usize,
    pub n_chunks: usize,
}

/// Base noise for one trajectory draw, indexed by absolute time so chunk
/// subsets see identical noise regardless of which other chunks are drawn.
#[derive(Clone, Debug)]
pub struct TrajectoryNoise {
    /// One starting draw per chunk (index 0 seeds `q(x₁)`).
    pub inits: Vec<Vec<f64>>,
    /// Transition noise for `x_{t+1}`, indexed by `t`.
    pub steps: Vec<Vec<f64>>,
    /// Inducing-output noise, when the variant conditions on `u`.
    pub u: Option<Mat<f64>>,
    /// Sequential function-draw noise, indexed by `t`.
    pub f: Option<Vec<Vec<f64>>>,
}

impl TrajectoryNoise {
    pub fn generate(variant: VariantId, shape: NoiseShape, rng: &mut ChaCha8Rng) -> Self {
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.sample(StandardNormal)).collect()
        };
        let inits = (0..shape.n_chunks)
            .map(|_| draw(shape.d, rng))
            .collect();
        let steps = (0..shape.t_len - 1)
            .map(|_| draw(shape.d, rng))
            .collect();
        let u = variant.needs_u().then(|| {
            Mat::from_fn(shape.m, shape.dout, |_, _| rng.sample(StandardNormal))
        });
        let f = variant
            .needs_f()
            .then(|| (0..shape.t_len - 1).map(|_| draw(shape.dout, rng)).collect());
        TrajectoryNoise {
            inits,
            steps,
            u,
            f,
        }
    }

    /// Noise for sample `sample` of round `round` under `seed`; rounds are
    /// optimizer iterations, so every iteration resamples while gradient
    /// checks can freeze a round.
    pub fn for_sample(
        variant: VariantId,
        shape: NoiseShape,
        seed: u64,
        round: u64,
        sample: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, round, sample));
        TrajectoryNoise::generate(variant, shape, &mut rng)
    }

    /// All-zero noise (deterministic rollouts in tests).
    pub fn zeros(variant: VariantId, shape: NoiseShape) -> Self {
        TrajectoryNoise {
            inits: vec![vec![0.0; shape.d]; shape.n_chunks],
            steps: vec![vec![0.0; shape.d]; shape.t_len - 1],
            u: variant.needs_u().then(|| Mat::zeros(shape.m, shape.dout)),
            f: variant
                .needs_f()
                .then(|| vec![vec![0.0; shape.dout]; shape.t_len - 1]),
        }
    }
}

fn mix_seed(seed: u64, round: u64, sample: u64) -> u64 {
    let mut z = seed
        ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ sample.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Context a transition evaluation needs beyond the current state.
pub enum TransitionContext<'a, S> {
    /// Rows 1–2 need nothing extra.
    None,
    /// U-factorised: the trajectory's inducing-output draw.
    U(&'a Mat<S>),
    /// Non-factorised and PR-SSM: the sequentially drawn `f(x_t)`.
    F(&'a [S]),
}

enum StepContext<'a, S> {
    None,
    WhiteU(&'a Mat<S>),
    F(&'a [S]),
}

/// One transition's sampling distribution together with the prior-side
/// moments of `f(x_t)` that the transition KL integrates over.
#[derive(Clone, Debug)]
pub struct StepRecord<S> {
    /// `q(x_{t+1} | ·, x_t)`, the distribution the next state is drawn from
    /// (or the explicit chunk-initial at a chunk boundary).
    pub q_moments: GaussianMoments<S>,
    /// Mean of `f(x_t)` under the variant's conditioning (a point draw for
    /// the non-factorised rows).
    pub p_mean: Vec<S>,
    /// Marginal variance of `f(x_t)` around `p_mean` (zero for point draws).
    pub p_var: Vec<S>,
}

/// Transition moments for `x_{t+1}` under the given variant.
pub fn transition_moments<S: Scalar>(
    variant: VariantId,
    t: usize,
    x_t: &[S],
    cp: &ChainParams<S>,
    gp: &PreparedGp<'_, S>,
    ctx: TransitionContext<'_, S>,
) -> Result<GaussianMoments<S>> {
    let record = match (variant, ctx) {
        (VariantId::UFactorised, TransitionContext::U(u)) => {
            let white = gp.l_zz().forward_solve_mat(u);
            step_distribution(variant, t, x_t, cp, gp, StepContext::WhiteU(&white), true)?
        }
        (VariantId::NonFactorised | VariantId::PrSsm, TransitionContext::F(f)) => {
            step_distribution(variant, t, x_t, cp, gp, StepContext::F(f), true)?
        }
        (VariantId::FactorisedLinear | VariantId::FactorisedNonlinear, TransitionContext::None) => {
            step_distribution(variant, t, x_t, cp, gp, StepContext::None, true)?
        }
        (v, _) => {
            return Err(Error::MissingContext { variant: v.name() });
        }
    };
    Ok(record.q_moments)
}

fn step_distribution<S: Scalar>(
    variant: VariantId,
    t: usize,
    x_t: &[S],
    cp: &ChainParams<S>,
    gp: &PreparedGp<'_, S>,
    ctx: StepContext<'_, S>,
    with_kl: bool,
) -> Result<StepRecord<S>> {
    let d = cp.state_dim();
    let a_t = cp.a_t(t);
    let b_t = cp.b_t(t);
    let s_t = cp.s_t(t);

    let affine = |f_t: &[S]| -> Vec<S> {
        let mut m = a_t.matvec(f_t);
        for (mi, bi) in m.iter_mut().zip(b_t) {
            *mi += *bi;
        }
        m
    };

    match (variant, ctx) {
        (VariantId::FactorisedLinear, StepContext::None) => {
            let mean = affine(x_t);
            let (p_mean, p_var) = if with_kl {
                let g = gp.predict_marginal(x_t)?;
                let v = g.diag_vars();
                (g.mean, v)
            } else {
                (vec![S::zero(); d], vec![S::zero(); d])
            };
            Ok(StepRecord {
                q_moments: GaussianMoments::new(mean, s_t.clone())?,
                p_mean,
                p_var,
            })
        }
        (VariantId::FactorisedNonlinear, StepContext::None) => {
            let g = gp.predict_marginal(x_t)?;
            let p_var = g.diag_vars();
            let mean = affine(&g.mean);
            let cov = inflate_cov(s_t, a_t, &p_var)?;
            Ok(StepRecord {
                q_moments: GaussianMoments::new(mean, cov)?,
                p_mean: g.mean,
                p_var,
            })
        }
        (VariantId::UFactorised, StepContext::WhiteU(white)) => {
            let g = gp.conditional_from_white(white, x_t);
            let p_var = g.diag_vars();
            let mean = affine(&g.mean);
            let cov = inflate_cov(s_t, a_t, &p_var)?;
            Ok(StepRecord {
                q_moments: GaussianMoments::new(mean, cov)?,
                p_mean: g.mean,
                p_var,
            })
        }
        (VariantId::NonFactorised, StepContext::F(f)) => Ok(StepRecord {
            q_moments: GaussianMoments::new(affine(f), s_t.clone())?,
            p_mean: f.to_vec(),
            p_var: vec![S::zero(); d],
        }),
        (VariantId::PrSsm, StepContext::F(f)) => Ok(StepRecord {
            // Prior transition: N(f(x_t), Q); the chain carries Q as S_t.
            q_moments: GaussianMoments::new(f.to_vec(), s_t.clone())?,
            p_mean: f.to_vec(),
            p_var: vec![S::zero(); d],
        }),
        (v, _) => Err(Error::MissingContext { variant: v.name() }),
    }
}

/// `S_t + A_t diag(v) A_tᵀ`.
fn inflate_cov<S: Scalar>(s_t: &PsdMatrix<S>, a_t: &Mat<S>, v: &[S]) -> Result<PsdMatrix<S>> {
    let d = s_t.dim();
    let mut cov = s_t.reconstruct();
    for i in 0..d {
        for j in 0..d {
            let mut acc = S::zero();
            for (k, vk) in v.iter().enumerate() {
                acc += a_t[(i, k)] * *vk * a_t[(j, k)];
            }
            cov[(i, j)] += acc;
        }
    }
    chol(&cov)
}

/// States and transition records for one chunk of a trajectory.
#[derive(Clone, Debug)]
pub struct ChunkSample<S> {
    pub start: usize,
    pub x: Vec<Vec<S>>,
    /// Records for transitions with left endpoint `start + i`; includes the
    /// boundary record (against the next chunk's initial) when the chunk is
    /// not the last and KL context was requested.
    pub steps: Vec<StepRecord<S>>,
}

/// A full trajectory draw.
#[derive(Clone, Debug)]
pub struct TrajectorySample<S> {
    pub chunks: Vec<ChunkSample<S>>,
    pub u_draw: Option<Mat<S>>,
    /// The base noises that produced this sample.
    pub noise: TrajectoryNoise,
}

impl<S: Scalar> TrajectorySample<S> {
    /// Assembled `T × D` state matrix. Requires the sample to cover the full
    /// sequence (all chunks drawn).
    pub fn states(&self) -> Mat<S> {
        let t_len: usize = self.chunks.iter().map(|c| c.x.len()).sum();
        let d = self.chunks[0].x[0].len();
        let mut out = Mat::zeros(t_len, d);
        for chunk in &self.chunks {
            for (i, row) in chunk.x.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out[(chunk.start + i, j)] = *v;
                }
            }
        }
        out
    }

    /// Function values `f(x_t)` entering each transition mean, assembled by
    /// absolute `t`. `None` for the factorised-linear posterior, which never
    /// evaluates the function.
    pub fn f_values(&self, variant: VariantId) -> Option<Mat<S>> {
        if variant == VariantId::FactorisedLinear {
            return None;
        }
        let t_len: usize = self.chunks.iter().map(|c| c.x.len()).sum();
        let d = self.chunks[0].x[0].len();
        let mut out = Mat::zeros(t_len - 1, d);
        for chunk in &self.chunks {
            for (i, rec) in chunk.steps.iter().enumerate() {
                for (j, v) in rec.p_mean.iter().enumerate() {
                    out[(chunk.start + i, j)] = *v;
                }
            }
        }
        Some(out)
    }
}

/// Draw the chunks in `subset` (by index into `scheme`). Each chunk starts
/// from its explicit initial distribution; the full-GP conditioner is reset
/// at every boundary, so a chunk's draw never depends on other chunks.
pub fn sample_chunks<S: Scalar>(
    variant: VariantId,
    cp: &ChainParams<S>,
    gp: &PreparedGp<'_, S>,
    scheme: &ChunkScheme<S>,
    subset: &[usize],
    noise: &TrajectoryNoise,
    with_kl: bool,
) -> Result<(Vec<ChunkSample<S>>, Option<Mat<S>>)> {
    let t_len = cp.t_len();
    if scheme.t_len() != t_len {
        return Err(Error::InvalidScheme(format!(
            "scheme covers {} steps, chain has {}",
            scheme.t_len(),
            t_len
        )));
    }
    if noise.inits.len() != scheme.n_chunks() || noise.steps.len() != t_len - 1 {
        return Err(Error::DimensionMismatch {
            what: "trajectory noise shape",
            expected: scheme.n_chunks(),
            got: noise.inits.len(),
        });
    }

    let u_draw = if variant.needs_u() {
        let e = noise.u.as_ref().ok_or(Error::MissingContext {
            variant: variant.name(),
        })?;
        Some(gp.sample_u(&Mat::lift(e))?)
    } else {
        None
    };
    let white_u = match (variant, &u_draw) {
        (VariantId::UFactorised, Some(u)) => Some(gp.l_zz().forward_solve_mat(u)),
        _ => None,
    };
    let base_cond = if variant.needs_f() {
        let u = u_draw.as_ref().expect("needs_f implies needs_u");
        Some(gp.cond_init(u)?)
    } else {
        None
    };
    let f_noise = noise.f.as_deref();

    let mut out = Vec::with_capacity(subset.len());
    for &j in subset {
        if j >= scheme.n_chunks() {
            return Err(Error::InvalidScheme(format!("chunk index {j} out of range")));
        }
        let (start, end) = scheme.range(j);
        let init = if j == 0 {
            cp.x1_moments()
        } else {
            scheme.initials[j - 1].clone()
        };
        let mut cond = base_cond.clone();

        let mut x: Vec<Vec<S>> = Vec::with_capacity(end - start);
        let mut steps: Vec<StepRecord<S>> = Vec::new();
        x.push(mvn_transform(&init, &lift_vec(&noise.inits[j]))?);

        for t in start..end - 1 {
            let f_draw = match &mut cond {
                Some(c) => Some(c.extend(&x[t - start], &f_noise.unwrap()[t])?),
                None => None,
            };
            let ctx = match (&white_u, &f_draw) {
                (Some(w), _) => StepContext::WhiteU(w),
                (_, Some(f)) => StepContext::F(f),
                _ => StepContext::None,
            };
            let rec = step_distribution(variant, t, &x[t - start], cp, gp, ctx, with_kl)?;
            x.push(mvn_transform(&rec.q_moments, &lift_vec(&noise.steps[t]))?);
            steps.push(rec);
        }

        // Boundary record against the next chunk's explicit initial.
        if with_kl && end < t_len {
            let t = end - 1;
            let x_last = &x[t - start];
            let (p_mean, p_var) = match &mut cond {
                Some(c) => {
                    let f = c.extend(x_last, &f_noise.unwrap()[t])?;
                    let d = f.len();
                    (f, vec![S::zero(); d])
                }
                None => match variant {
                    VariantId::UFactorised => {
                        let g = gp.conditional_from_white(white_u.as_ref().unwrap(), x_last);
                        let v = g.diag_vars();
                        (g.mean, v)
                    }
                    _ => {
                        let g = gp.predict_marginal(x_last)?;
                        let v = g.diag_vars();
                        (g.mean, v)
                    }
                },
            };
            steps.push(StepRecord {
                q_moments: scheme.initials[j].clone(),
                p_mean,
                p_var,
            });
        }

        out.push(ChunkSample { start, x, steps });
    }
    Ok((out, u_draw))
}

/// Draw a full trajectory under the chunk scheme.
pub fn sample_chunked<S: Scalar>(
    variant: VariantId,
    cp: &ChainParams<S>,
    gp: &PreparedGp<'_, S>,
    scheme: &ChunkScheme<S>,
    noise: &TrajectoryNoise,
    with_kl: bool,
) -> Result<TrajectorySample<S>> {
    let all: Vec<usize> = (0..scheme.n_chunks()).collect();
    let (chunks, u_draw) = sample_chunks(variant, cp, gp, scheme, &all, noise, with_kl)?;
    Ok(TrajectorySample {
        chunks,
        u_draw,
        noise: noise.clone(),
    })
}

/// Draw a full unchunked trajectory (a single chunk covering `0..T`).
pub fn sample_trajectory<S: Scalar>(
    variant: VariantId,
    cp: &ChainParams<S>,
    gp: &PreparedGp<'_, S>,
    noise: &TrajectoryNoise,
    with_kl: bool,
) -> Result<TrajectorySample<S>> {
    let scheme = ChunkScheme::single(cp.t_len());
    sample_chunked(variant, cp, gp, &scheme, noise, with_kl)
}
