//! Simulation-based posterior summaries.
//!
//! Draws `θ_G ~ q(θ_G)` and `b̃ᵢ ~ q(b̃ᵢ)`, rebuilds each subject's transform
//! at the drawn `θ_G` and maps `bᵢ = Lᵢ b̃ᵢ + λᵢ`. The marginals of `bᵢ` are
//! therefore not Gaussian in general.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::engine::VariationalState;
use crate::error::{Result, RvbError};
use crate::model::{Dataset, GlobalParams, Priors};
use crate::reparam::{self, TransformMethod};
use crate::scalar::Real;

const DRAW_KEY: u64 = 0x0b5e_77ed_d4a7_0002;
const CHUNK: usize = 128;
const MAX_ATTEMPTS: u64 = 64;

/// One joint draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraw<T> {
    /// `(β, ω)`, or `β` alone when `ω` is fixed.
    pub global: Vec<T>,
    /// `σ_k = sqrt((Ω⁻¹)_kk)`.
    pub sigma: Vec<T>,
    /// Correlations of `Ω⁻¹`, strictly lower triangle in column order.
    pub rho: Vec<T>,
    /// `b̃` for all subjects, subject-major.
    pub b_tilde: Vec<T>,
    /// `b` for all subjects, subject-major.
    pub b: Vec<T>,
}

/// `(σ, ρ)` from a random-effect covariance `Ω⁻¹`.
pub fn scale_params<T: Real>(gp: &GlobalParams<T>) -> (Vec<T>, Vec<T>) {
    let cov = gp.covariance();
    let r = cov.order();
    let sigma: Vec<T> = (0..r).map(|k| cov.get(k, k).sqrt()).collect();
    let mut rho = Vec::with_capacity(r * r.saturating_sub(1) / 2);
    for j in 0..r {
        for i in j + 1..r {
            rho.push(cov.get(i, j) / (sigma[i] * sigma[j]));
        }
    }
    (sigma, rho)
}

fn normals<T: Real>(seed: u64, stream: u64, d: usize) -> Vec<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ DRAW_KEY);
    rng.set_stream(stream);
    (0..d)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        })
        .collect()
}

/// Draw number `k`, resampling on numerical failure. Returns the draw and
/// the number of rejected attempts.
pub fn draw_one<T: Real>(
    data: &Dataset<T>,
    pr: &Priors<T>,
    state: &VariationalState<T>,
    method: TransformMethod,
    seed: u64,
    k: u64,
) -> Result<(PosteriorDraw<T>, usize)> {
    let nr = data.n() * data.r();
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let s = normals::<T>(seed, (k << 6) | attempt, state.dim());
        let theta = state.sample(&s);
        let (b_tilde, theta_g) = theta.split_at(nr);
        let built = GlobalParams::from_flat(theta_g, data.p(), data.r(), pr)
            .and_then(|gp| reparam::transforms(data, &gp, method).map(|t| (gp, t)));
        match built {
            Ok((gp, transforms)) => {
                let mut b = Vec::with_capacity(nr);
                for (i, t) in transforms.iter().enumerate() {
                    b.extend(t.invert(&b_tilde[i * data.r()..(i + 1) * data.r()]));
                }
                let (sigma, rho) = scale_params(&gp);
                let draw = PosteriorDraw { global: theta_g.to_vec(), sigma, rho, b_tilde: b_tilde.to_vec(), b };
                return Ok((draw, attempt as usize));
            }
            Err(e) if e.is_numerical() => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(RvbError::Singular))
}

/// Stores `n_draws` joint draws. Meant for small problems; use
/// [`summarize`] for large ones.
pub fn simulate_b<T: Real>(
    data: &Dataset<T>,
    pr: &Priors<T>,
    state: &VariationalState<T>,
    method: TransformMethod,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<PosteriorDraw<T>>> {
    if n_draws == 0 {
        return Err(RvbError::Config("n_draws must be at least 1".into()));
    }
    (0..n_draws as u64)
        .into_par_iter()
        .map(|k| draw_one(data, pr, state, method, seed, k).map(|(d, _)| d))
        .collect()
}

/// Mean and standard deviation of one quantity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments<T> {
    pub mean: T,
    pub sd: T,
}

/// Running moments with Chan's pairwise merge.
#[derive(Clone, Debug)]
struct Accumulator {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn new(d: usize) -> Self {
        Self { n: 0.0, mean: vec![0.0; d], m2: vec![0.0; d] }
    }

    fn push(&mut self, x: impl Iterator<Item = f64>) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.n;
            *s += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &Self) {
        if other.n == 0.0 {
            return;
        }
        let n = self.n + other.n;
        for k in 0..self.mean.len() {
            let delta = other.mean[k] - self.mean[k];
            self.mean[k] += delta * other.n / n;
            self.m2[k] += other.m2[k] + delta * delta * self.n * other.n / n;
        }
        self.n = n;
    }

    fn moments<T: Real>(&self, range: std::ops::Range<usize>) -> Vec<Moments<T>> {
        let denom = (self.n - 1.0).max(1.0);
        range
            .map(|k| Moments { mean: T::lit(self.mean[k]), sd: T::lit((self.m2[k] / denom).max(0.0).sqrt()) })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary<T> {
    /// `(β, ω)` coordinates in parameter order.
    pub global: Vec<Moments<T>>,
    pub sigma: Vec<Moments<T>>,
    pub rho: Vec<Moments<T>>,
    /// Per subject, `r` entries each.
    pub b: Vec<Vec<Moments<T>>>,
    pub b_tilde: Vec<Vec<Moments<T>>>,
    pub draws: usize,
    pub rejected: usize,
}

impl<T: Real> PosteriorSummary<T> {
    /// Fraction of attempted draws that were rejected.
    pub fn rejection_rate(&self) -> f64 {
        self.rejected as f64 / (self.draws + self.rejected).max(1) as f64
    }
}

/// Streams `n_draws` joint draws into moment summaries. Draws run in
/// parallel; the reduction order is fixed, so results depend only on `seed`.
pub fn summarize<T: Real>(
    data: &Dataset<T>,
    pr: &Priors<T>,
    state: &VariationalState<T>,
    method: TransformMethod,
    n_draws: usize,
    seed: u64,
) -> Result<PosteriorSummary<T>> {
    if n_draws == 0 {
        return Err(RvbError::Config("n_draws must be at least 1".into()));
    }
    let (r, n) = (data.r(), data.n());
    let g = pr.global_dim(data.p(), r);
    let n_rho = r * r.saturating_sub(1) / 2;
    let width = g + r + n_rho + 2 * n * r;
    let chunks: Vec<(Accumulator, usize)> = (0..n_draws.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Accumulator::new(width);
            let mut rejected = 0;
            for k in c * CHUNK..((c + 1) * CHUNK).min(n_draws) {
                let (d, rej) = draw_one(data, pr, state, method, seed, k as u64)?;
                rejected += rej;
                let row = d.global.iter().chain(&d.sigma).chain(&d.rho).chain(&d.b).chain(&d.b_tilde);
                acc.push(row.map(|v| v.to_f64_lossy()));
            }
            Ok((acc, rejected))
        })
        .collect::<Result<_>>()?;
    let mut total = Accumulator::new(width);
    let mut rejected = 0;
    for (acc, rej) in &chunks {
        total.merge(acc);
        rejected += rej;
    }
    let mut at = 0;
    let mut take = |len: usize| {
        let out = total.moments::<T>(at..at + len);
        at += len;
        out
    };
    let global = take(g);
    let sigma = take(r);
    let rho = take(n_rho);
    let b_all = take(n * r);
    let bt_all = take(n * r);
    Ok(PosteriorSummary {
        global,
        sigma,
        rho,
        b: b_all.chunks(r.max(1)).map(|c| c.to_vec()).collect(),
        b_tilde: bt_all.chunks(r.max(1)).map(|c| c.to_vec()).collect(),
        draws: n_draws,
        rejected,
    })
}

/// Accuracy diagnostics against a reference posterior:
/// `r₁ = (mean_va − mean_ref) / sd_va` and `r₂ = sd_ref / sd_va`.
pub fn compare_metrics<T: Real>(
    va_means: &[T],
    va_sds: &[T],
    ref_means: &[T],
    ref_sds: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let n = va_means.len();
    for len in [va_sds.len(), ref_means.len(), ref_sds.len()] {
        if len != n {
            return Err(RvbError::LengthMismatch { expected: n, got: len });
        }
    }
    if let Some(index) = va_sds.iter().position(|&s| !(s > T::zero())) {
        return Err(RvbError::ZeroSd { index });
    }
    let r1 = (0..n).map(|k| (va_means[k] - ref_means[k]) / va_sds[k]).collect();
    let r2 = (0..n).map(|k| ref_sds[k] / va_sds[k]).collect();
    Ok((r1, r2))
}
