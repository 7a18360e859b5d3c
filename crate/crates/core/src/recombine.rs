//! Divide and recombine: fit disjoint groups of subjects independently and
//! combine the Gaussian marginals of the global parameters.
//!
//! With a Gaussian prior `N(μ₀, Σ₀)` on `θ_G` and shard marginals
//! `N(μᵥ, Σᵥ)`, the combined approximation has precision
//! `Σᵥ Σᵥ⁻¹ − (V − 1) Σ₀⁻¹` and mean `Σ (Σᵥ Σᵥ⁻¹ μᵥ − (V − 1) Σ₀⁻¹ μ₀)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::engine::{self, FitConfig, FitResult};
use crate::error::{Result, RvbError};
use crate::matcalc::{spd_inverse, SquareMatrix};
use crate::model::{Dataset, OmegaPrior, Priors};
use crate::scalar::Real;

const PARTITION_KEY: u64 = 0x9a27_1710_0000_0003;

/// Balanced random partition of `0..n` into `v` groups. Group sizes differ
/// by at most one and indices within a group are ascending.
pub fn partition(n: usize, v: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if v == 0 || v > n {
        return Err(RvbError::InvalidV { v, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    if v > 1 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ PARTITION_KEY);
        order.shuffle(&mut rng);
    }
    let (base, extra) = (n / v, n % v);
    let mut out = Vec::with_capacity(v);
    let mut at = 0;
    for k in 0..v {
        let len = base + usize::from(k < extra);
        let mut group = order[at..at + len].to_vec();
        group.sort_unstable();
        out.push(group);
        at += len;
    }
    Ok(out)
}

/// Seed for shard `v`; shard 0 uses the run seed itself.
pub fn shard_seed(seed: u64, v: usize) -> u64 {
    seed.wrapping_add((v as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFactor<T> {
    mean: Vec<T>,
    cov: SquareMatrix<T>,
}

impl<T: Real> GaussianFactor<T> {
    pub fn new(mean: Vec<T>, cov: SquareMatrix<T>) -> Result<Self> {
        if cov.order() != mean.len() {
            return Err(RvbError::LengthMismatch { expected: mean.len(), got: cov.order() });
        }
        spd_inverse(&cov)?;
        Ok(Self { mean, cov: cov.symmetrized() })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn cov(&self) -> &SquareMatrix<T> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// The global-block marginal of a fitted variational posterior.
    pub fn from_fit(fit: &FitResult<T>) -> Result<Self> {
        let (mu, _) = fit.state.global_block();
        Self::new(mu.to_vec(), fit.state.global_cov())
    }

    /// Gaussian prior on `θ_G`: `N(0, σβ²)` on each `β_k` and the normal
    /// prior on `ω`. Wishart priors have no Gaussian form and are rejected.
    pub fn from_prior(pr: &Priors<T>, p: usize) -> Result<Self> {
        let mut mean = vec![T::zero(); p];
        let mut var = vec![pr.sigma_beta2; p];
        match &pr.omega {
            OmegaPrior::Normal { mean: m, sd } => {
                mean.extend_from_slice(m);
                var.extend(m.iter().map(|_| *sd * *sd));
            }
            OmegaPrior::Fixed(_) => {}
            OmegaPrior::Wishart { .. } => {
                return Err(RvbError::Config("sharded fits need a normal prior on omega".into()));
            }
        }
        Self::new(mean, SquareMatrix::from_diag(&var))
    }
}

/// Combines shard marginals under a shared Gaussian prior.
pub fn combine<T: Real>(factors: &[GaussianFactor<T>], prior: &GaussianFactor<T>) -> Result<GaussianFactor<T>> {
    let Some(first) = factors.first() else {
        return Err(RvbError::InvalidV { v: 0, n: 0 });
    };
    if factors.len() == 1 {
        return Ok(first.clone());
    }
    let g = prior.dim();
    if let Some(f) = factors.iter().find(|f| f.dim() != g) {
        return Err(RvbError::LengthMismatch { expected: g, got: f.dim() });
    }
    let extra = T::from_count(factors.len() - 1);
    let (prior_prec, _) = spd_inverse(&prior.cov)?;
    let mut prec = prior_prec.scale(-extra);
    let mut shift: Vec<T> = prior_prec.mul_vec(&prior.mean).into_iter().map(|v| -extra * v).collect();
    for f in factors {
        let (p, _) = spd_inverse(&f.cov)?;
        for (s, v) in shift.iter_mut().zip(p.mul_vec(&f.mean)) {
            *s += v;
        }
        prec = prec.add(&p);
    }
    let (cov, _) = spd_inverse(&prec)?;
    let mean = cov.mul_vec(&shift);
    GaussianFactor::new(mean, cov)
}

/// One group of subjects and its fit.
#[derive(Clone, Debug)]
pub struct Shard<T> {
    pub indices: Vec<usize>,
    pub data: Dataset<T>,
    pub fit: FitResult<T>,
}

#[derive(Clone, Debug)]
pub struct ShardedFit<T> {
    pub shards: Vec<Shard<T>>,
    pub combined: GaussianFactor<T>,
}

impl<T: Real> ShardedFit<T> {
    /// Final ELBO of each shard; the paper-style combination defines no joint bound.
    pub fn shard_elbos(&self) -> Vec<T> {
        self.shards.iter().map(|s| s.fit.elbo).collect()
    }
}

/// Fits `v` shards in parallel and combines their global marginals.
/// `partition_seed` selects the partition; shard `k` fits with
/// [`shard_seed`]`(config.seed, k)`.
pub fn fit_sharded<T: Real>(
    data: &Dataset<T>,
    pr: &Priors<T>,
    config: &FitConfig,
    v: usize,
    partition_seed: u64,
) -> Result<ShardedFit<T>> {
    let prior = GaussianFactor::from_prior(pr, data.p())?;
    let groups = partition(data.n(), v, partition_seed)?;
    let shards: Vec<Shard<T>> = groups
        .into_par_iter()
        .enumerate()
        .map(|(k, indices)| {
            let sub = data.subset(&indices);
            let cfg = FitConfig { seed: shard_seed(config.seed, k), ..config.clone() };
            engine::fit(&sub, pr, &cfg)
                .map(|fit| Shard { indices, data: sub, fit })
                .map_err(|e| RvbError::Shard { index: k, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let factors = shards.iter().map(|s| GaussianFactor::from_fit(&s.fit)).collect::<Result<Vec<_>>>()?;
    let combined = combine(&factors, &prior)?;
    Ok(ShardedFit { shards, combined })
}
