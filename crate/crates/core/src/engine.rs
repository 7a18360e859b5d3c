//! Stochastic variational optimizer over the reparametrized parameters.
//!
//! `q(θ̃) = N(μ, CCᵀ)` with `C` block diagonal: one `r × r` block per subject
//! and one `g × g` block for the global parameters. Diagonals of `C` are
//! optimized on the log scale. Each iteration draws one `s ~ N(0, I)`, forms
//! an unbiased gradient estimate and takes an Adam step.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, RvbError};
use crate::gradients;
use crate::matcalc::{packed_index, tri_len, LowerTriangular, SquareMatrix};
use crate::model::{Dataset, Priors};
use crate::reparam::TransformMethod;
use crate::scalar::Real;

/// Key offset separating the post-fit ELBO samples from the optimization stream.
const ELBO_KEY: u64 = 0x5eed_e1b0_0000_0001;

/// Gradient estimator for `(μ, C)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    L1,
    L2,
    L3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { alpha: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub method: TransformMethod,
    pub seed: u64,
    pub max_iter: usize,
    /// Iterations averaged into one trace point.
    pub window: usize,
    /// Number of trailing window means in the stopping regression.
    pub tau: usize,
    /// When false the fit always runs `max_iter` iterations.
    pub stop_rule: bool,
    pub adam: AdamConfig,
    pub estimator: Estimator,
    /// Fresh samples used for the final ELBO estimate.
    pub elbo_samples: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            method: TransformMethod::Approach2,
            seed: 1,
            max_iter: 200_000,
            window: 1000,
            tau: 5,
            stop_rule: true,
            adam: AdamConfig::default(),
            estimator: Estimator::L2,
            elbo_samples: 1000,
        }
    }
}

impl FitConfig {
    pub fn new(method: TransformMethod, seed: u64) -> Self {
        Self { method, seed, ..Self::default() }
    }
}

/// Mean and block-diagonal Cholesky factor of `q(θ̃)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState<T> {
    mu: Vec<T>,
    /// `n` local blocks of order `r` followed by the global block.
    blocks: Vec<LowerTriangular<T>>,
    offsets: Vec<usize>,
}

impl<T: Real> VariationalState<T> {
    /// `μ = 0`, `C = blockdiag(I_nr, 0.1 I_g)`.
    pub fn initial(n: usize, r: usize, g: usize) -> Self {
        let mut blocks: Vec<_> = (0..n).map(|_| LowerTriangular::identity(r)).collect();
        blocks.push(LowerTriangular::scaled_identity(g, T::lit(0.1)));
        Self::from_parts(vec![T::zero(); n * r + g], blocks).expect("consistent initial state")
    }

    pub fn from_parts(mu: Vec<T>, blocks: Vec<LowerTriangular<T>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        let mut acc = 0;
        for b in &blocks {
            offsets.push(acc);
            acc += b.order();
        }
        offsets.push(acc);
        if acc != mu.len() {
            return Err(RvbError::LengthMismatch { expected: acc, got: mu.len() });
        }
        if blocks.is_empty() {
            return Err(RvbError::InvalidData("variational state needs a global block".into()));
        }
        for b in &blocks {
            if (0..b.order()).any(|i| !(b.diag(i) > T::zero())) {
                return Err(RvbError::InvalidData("factor diagonal must be positive".into()));
            }
        }
        Ok(Self { mu, blocks, offsets })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn blocks(&self) -> &[LowerTriangular<T>] {
        &self.blocks
    }

    pub fn n_local(&self) -> usize {
        self.blocks.len() - 1
    }

    fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    /// `(μ_G, C_G)` for the global block.
    pub fn global_block(&self) -> (&[T], &LowerTriangular<T>) {
        let k = self.blocks.len() - 1;
        (&self.mu[self.block_range(k)], &self.blocks[k])
    }

    /// `C_G C_Gᵀ`.
    pub fn global_cov(&self) -> SquareMatrix<T> {
        self.global_block().1.gram()
    }

    /// `(μᵢ, Cᵢ)` for subject `i`.
    pub fn local_block(&self, i: usize) -> (&[T], &LowerTriangular<T>) {
        (&self.mu[self.block_range(i)], &self.blocks[i])
    }

    /// Marginal standard deviations of every coordinate.
    pub fn marginal_sd(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dim());
        for b in &self.blocks {
            let g = b.gram();
            out.extend(g.diag().into_iter().map(|v| v.sqrt()));
        }
        out
    }

    /// `θ̃ = μ + C s`.
    pub fn sample(&self, s: &[T]) -> Vec<T> {
        let mut out = self.mu.clone();
        for (k, b) in self.blocks.iter().enumerate() {
            let range = self.block_range(k);
            let cs = b.mul_vec(&s[range.clone()]);
            for (o, v) in out[range].iter_mut().zip(cs) {
                *o += v;
            }
        }
        out
    }

    /// `C⁻ᵀ s`.
    pub fn solve_t(&self, s: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dim());
        for (k, b) in self.blocks.iter().enumerate() {
            out.extend(b.solve_t(&s[self.block_range(k)]));
        }
        out
    }

    /// `log q(θ̃)` without the `−(d/2) log 2π` constant.
    pub fn log_q(&self, theta: &[T]) -> T {
        let mut acc = T::zero();
        for (k, b) in self.blocks.iter().enumerate() {
            let range = self.block_range(k);
            let centred: Vec<T> = theta[range.clone()].iter().zip(&self.mu[range]).map(|(&t, &m)| t - m).collect();
            let z = b.solve(&centred);
            acc -= b.log_det() + T::lit(0.5) * z.iter().map(|&v| v * v).sum::<T>();
        }
        acc
    }

    /// Packed `v(C*)` of every block, concatenated.
    fn log_params(&self) -> Vec<T> {
        self.blocks.iter().flat_map(|b| b.to_log_diag()).collect()
    }

    fn set_log_params(&mut self, params: &[T]) {
        let mut at = 0;
        for b in &mut self.blocks {
            let len = tri_len(b.order());
            *b = LowerTriangular::from_log_diag(b.order(), &params[at..at + len]).expect("packed length");
            at += len;
        }
    }

    fn n_c_params(&self) -> usize {
        self.blocks.iter().map(|b| tri_len(b.order())).sum()
    }
}

/// Standard normal draw for iteration `t`, attempt `attempt`.
pub fn standard_normal<T: Real>(seed: u64, stream: u64, d: usize) -> Vec<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..d)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        })
        .collect()
}

/// `(s, θ̃ = μ + C s)`.
pub fn draw_sample<T: Real>(state: &VariationalState<T>, seed: u64, stream: u64) -> (Vec<T>, Vec<T>) {
    let s = standard_normal(seed, stream, state.dim());
    let theta = state.sample(&s);
    (s, theta)
}

/// Gradient estimates `(ĝ_μ, ĝ_v(C))`; the second is packed block by block.
pub fn estimator<T: Real>(state: &VariationalState<T>, s: &[T], grad: &[T], which: Estimator) -> (Vec<T>, Vec<T>) {
    let cts = state.solve_t(s);
    let g_mu: Vec<T> = match which {
        Estimator::L1 => grad.to_vec(),
        Estimator::L2 => grad.iter().zip(&cts).map(|(&g, &c)| g + c).collect(),
        Estimator::L3 => grad.iter().zip(&cts).map(|(&g, &c)| g - c).collect(),
    };
    let mut g_c = Vec::with_capacity(state.n_c_params());
    for (k, b) in state.blocks.iter().enumerate() {
        let range = state.block_range(k);
        let (sb, gb, cb) = (&s[range.clone()], &grad[range.clone()], &cts[range]);
        let r = b.order();
        for j in 0..r {
            for i in j..r {
                let v = match which {
                    Estimator::L1 => gb[i] * sb[j] + if i == j { b.diag(i).recip() } else { T::zero() },
                    Estimator::L2 => (gb[i] + cb[i]) * sb[j],
                    // v{∇ℓ sᵀ − C⁻ᵀ(ssᵀ − I)}; C⁻ᵀ is upper triangular
                    Estimator::L3 => {
                        let id = if i == j { b.diag(i).recip() } else { T::zero() };
                        (gb[i] - cb[i]) * sb[j] + id
                    }
                };
                g_c.push(v);
            }
        }
    }
    (g_mu, g_c)
}

/// Chain rule to the log-diagonal parameters: diagonal entries scaled by `Cᵢᵢ`.
fn to_log_diag_grad<T: Real>(state: &VariationalState<T>, g_c: &mut [T]) {
    let mut at = 0;
    for b in &state.blocks {
        let r = b.order();
        for i in 0..r {
            g_c[at + packed_index(r, i, i)] *= b.diag(i);
        }
        at += tri_len(r);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
    config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0, config }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Ascent step on `params` along `grad`.
    pub fn update(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (alpha, eps) = (T::lit(c.alpha), T::lit(c.eps));
        let t = self.t as i32;
        let corr1 = T::one() - T::lit(c.beta1.powi(t));
        let corr2 = T::one() - T::lit(c.beta2.powi(t));
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = b1 * self.m[k] + (T::one() - b1) * g;
            self.v[k] = b2 * self.v[k] + (T::one() - b2) * g * g;
            let mhat = self.m[k] / corr1;
            let vhat = self.v[k] / corr2;
            params[k] += alpha * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Window means of the single-sample ELBO estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceWindow<T> {
    window: usize,
    tau: usize,
    means: Vec<T>,
    acc: T,
    count: usize,
}

impl<T: Real> TraceWindow<T> {
    pub fn new(window: usize, tau: usize) -> Self {
        Self { window: window.max(1), tau: tau.max(2), means: Vec::new(), acc: T::zero(), count: 0 }
    }

    pub fn from_means(means: Vec<T>, tau: usize) -> Self {
        Self { window: 1000, tau: tau.max(2), means, acc: T::zero(), count: 0 }
    }

    /// Adds one estimate; returns true when a window has just closed.
    pub fn push(&mut self, value: T) -> bool {
        self.acc += value;
        self.count += 1;
        if self.count == self.window {
            self.means.push(self.acc / T::from_count(self.window));
            self.acc = T::zero();
            self.count = 0;
            true
        } else {
            false
        }
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }
}

/// OLS slope of the most recent `min(τ, available)` window means.
pub fn trace_slope<T: Real>(trace: &TraceWindow<T>) -> Option<T> {
    let k = trace.means.len().min(trace.tau);
    if k < 2 {
        return None;
    }
    let ys = &trace.means[trace.means.len() - k..];
    let xbar = T::from_count(k - 1) * T::lit(0.5);
    let ybar = ys.iter().copied().sum::<T>() / T::from_count(k);
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (i, &y) in ys.iter().enumerate() {
        let dx = T::from_count(i) - xbar;
        sxy += dx * (y - ybar);
        sxx += dx * dx;
    }
    Some(sxy / sxx)
}

/// True once the regression slope over recent window means is negative.
pub fn should_stop<T: Real>(trace: &TraceWindow<T>) -> bool {
    matches!(trace_slope(trace), Some(s) if s < T::zero())
}

/// One optimization iteration at index `t`. Returns the single-sample ELBO
/// estimate at the pre-update state.
pub fn step<T: Real>(
    state: &mut VariationalState<T>,
    adam_mu: &mut AdamState<T>,
    adam_c: &mut AdamState<T>,
    data: &Dataset<T>,
    pr: &Priors<T>,
    config: &FitConfig,
    t: usize,
) -> Result<T> {
    let mut last_err = None;
    for attempt in 0..2u64 {
        let (s, theta) = draw_sample(state, config.seed, 2 * t as u64 + attempt);
        match gradients::evaluate(data, pr, config.method, &theta) {
            Ok((ell, grad)) => {
                let elbo = ell - state.log_q(&theta);
                let (g_mu, mut g_c) = estimator(state, &s, &grad, config.estimator);
                to_log_diag_grad(state, &mut g_c);
                adam_mu.update(&mut state.mu, &g_mu);
                let mut params = state.log_params();
                adam_c.update(&mut params, &g_c);
                state.set_log_params(&params);
                debug_assert!(state.blocks.iter().all(|b| (0..b.order()).all(|i| b.diag(i) > T::zero())));
                if state.mu.iter().chain(&params).any(|v| !v.is_finite()) {
                    return Err(RvbError::Diverged { iteration: t, reason: "non-finite variational parameters".into() });
                }
                return Ok(elbo);
            }
            Err(e) if e.is_numerical() => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(RvbError::Diverged {
        iteration: t,
        reason: last_err.map(|e| e.to_string()).unwrap_or_default(),
    })
}

/// Outcome of [`fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult<T> {
    pub state: VariationalState<T>,
    /// ELBO window means in iteration order.
    pub trace: Vec<T>,
    pub iterations: usize,
    pub wall_time: Duration,
    /// ELBO averaged over fresh samples at the final state.
    pub elbo: T,
    /// Monte Carlo standard error of [`elbo`](Self::elbo).
    pub elbo_se: T,
    pub max_iter_reached: bool,
    pub method: TransformMethod,
}

/// Monte Carlo ELBO at `state`: mean and standard error over `samples` draws.
pub fn estimate_elbo<T: Real>(
    state: &VariationalState<T>,
    data: &Dataset<T>,
    pr: &Priors<T>,
    method: TransformMethod,
    seed: u64,
    samples: usize,
) -> Result<(T, T)> {
    let mut values = Vec::with_capacity(samples);
    let key = seed ^ ELBO_KEY;
    let mut k = 0u64;
    let mut failures = 0usize;
    while values.len() < samples {
        let (_, theta) = draw_sample(state, key, k);
        k += 1;
        match gradients::log_joint_at(data, pr, method, &theta) {
            Ok(ell) => values.push(ell - state.log_q(&theta)),
            Err(e) if e.is_numerical() && failures < samples => failures += 1,
            Err(e) => return Err(e),
        }
    }
    let n = T::from_count(samples.max(1));
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (n - T::one()).max(T::one());
    Ok((mean, (var / n).sqrt()))
}

/// Runs the optimizer from the standard initial state.
pub fn fit<T: Real>(data: &Dataset<T>, pr: &Priors<T>, config: &FitConfig) -> Result<FitResult<T>> {
    let g = pr.global_dim(data.p(), data.r());
    let state = VariationalState::initial(data.n(), data.r(), g);
    fit_from(data, pr, config, state)
}

/// Runs the optimizer from a given state.
pub fn fit_from<T: Real>(
    data: &Dataset<T>,
    pr: &Priors<T>,
    config: &FitConfig,
    mut state: VariationalState<T>,
) -> Result<FitResult<T>> {
    if config.max_iter == 0 {
        return Err(RvbError::Config("max_iter must be positive".into()));
    }
    let g = pr.global_dim(data.p(), data.r());
    let expected = data.n() * data.r() + g;
    if state.dim() != expected {
        return Err(RvbError::LengthMismatch { expected, got: state.dim() });
    }
    let start = Instant::now();
    let mut adam_mu = AdamState::new(state.dim(), config.adam);
    let mut adam_c = AdamState::new(state.n_c_params(), config.adam);
    let mut trace = TraceWindow::new(config.window, config.tau);
    let mut iterations = 0;
    let mut stopped = false;
    for t in 0..config.max_iter {
        let elbo = step(&mut state, &mut adam_mu, &mut adam_c, data, pr, config, t)?;
        iterations = t + 1;
        if trace.push(elbo) && config.stop_rule && should_stop(&trace) {
            stopped = true;
            break;
        }
    }
    let (elbo, elbo_se) = estimate_elbo(&state, data, pr, config.method, config.seed, config.elbo_samples.max(2))?;
    Ok(FitResult {
        state,
        trace: trace.means,
        iterations,
        wall_time: start.elapsed(),
        elbo,
        elbo_se,
        max_iter_reached: !stopped && config.stop_rule,
        method: config.method,
    })
}
