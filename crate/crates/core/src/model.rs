//! Two-level GLMM: data container, global parameters, priors and the log
//! joint density.
//!
//! The precision of the random effects is `Ω = W Wᵀ` with `W` lower
//! triangular. The unconstrained parameter `ω` is `v(W*)`, where `W*` is `W`
//! with its diagonal replaced by `log diag(W)`.

use crate::error::{Result, RvbError};
use crate::family::{self, Family, Observation};
use crate::matcalc::{self, halfvec, spd_inverse, tri_len, LowerTriangular, SquareMatrix};
use crate::reparam::LocalTransform;
use crate::scalar::{dot, Real};

/// Observations and designs of one subject. Designs are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject<T> {
    pub y: Vec<T>,
    pub trials: Vec<T>,
    pub x: Vec<T>,
    pub z: Vec<T>,
    eta_hat: Vec<T>,
    h1_hat: Vec<T>,
    h2_hat: Vec<T>,
}

impl<T: Real> Subject<T> {
    /// Builds a subject; `trials` may be empty for families without trial counts.
    pub fn new(y: Vec<T>, trials: Vec<T>, x: Vec<T>, z: Vec<T>) -> Self {
        let trials = if trials.is_empty() { vec![T::one(); y.len()] } else { trials };
        Self { y, trials, x, z, eta_hat: Vec::new(), h1_hat: Vec::new(), h2_hat: Vec::new() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    #[inline]
    pub fn obs(&self, j: usize) -> Observation<T> {
        Observation::with_trials(self.y[j], self.trials[j])
    }

    #[inline]
    pub fn x_row(&self, j: usize, p: usize) -> &[T] {
        &self.x[j * p..(j + 1) * p]
    }

    #[inline]
    pub fn z_row(&self, j: usize, r: usize) -> &[T] {
        &self.z[j * r..(j + 1) * r]
    }

    /// Regularized natural-parameter estimates, one per observation.
    pub fn eta_hat(&self) -> &[T] {
        &self.eta_hat
    }

    /// `h′(η̂)` per observation.
    pub fn h1_hat(&self) -> &[T] {
        &self.h1_hat
    }

    /// `h″(η̂)` per observation.
    pub fn h2_hat(&self) -> &[T] {
        &self.h2_hat
    }

    /// `X β` for this subject.
    pub fn x_beta(&self, beta: &[T]) -> Vec<T> {
        let p = beta.len();
        (0..self.len()).map(|j| dot(self.x_row(j, p), beta)).collect()
    }

    fn prepare(&mut self, family: Family) -> Result<()> {
        self.eta_hat = (0..self.len()).map(|j| family::eta_hat_reg(family, self.obs(j))).collect();
        let mut h1 = Vec::with_capacity(self.len());
        let mut h2 = Vec::with_capacity(self.len());
        for j in 0..self.len() {
            let d = family::derivs(family, self.trials[j], self.eta_hat[j])?;
            h1.push(d.h1);
            h2.push(d.h2);
        }
        self.h1_hat = h1;
        self.h2_hat = h2;
        Ok(())
    }
}

/// Grouped data for a two-level GLMM.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    family: Family,
    p: usize,
    r: usize,
    subjects: Vec<Subject<T>>,
    fixed_names: Vec<String>,
    random_names: Vec<String>,
    group_labels: Vec<String>,
}

impl<T: Real> Dataset<T> {
    /// Validates dimensions and responses and caches the regularized
    /// estimates `η̂`. Names default to `x0, x1, …` and `z0, z1, …`.
    pub fn new(family: Family, p: usize, r: usize, mut subjects: Vec<Subject<T>>) -> Result<Self> {
        if r == 0 {
            return Err(RvbError::InvalidData("at least one random effect is required".into()));
        }
        for (i, s) in subjects.iter_mut().enumerate() {
            let ni = s.len();
            if ni == 0 {
                return Err(RvbError::InvalidData(format!("subject {i} has no observations")));
            }
            if s.trials.len() != ni {
                return Err(RvbError::LengthMismatch { expected: ni, got: s.trials.len() });
            }
            if s.x.len() != ni * p {
                return Err(RvbError::LengthMismatch { expected: ni * p, got: s.x.len() });
            }
            if s.z.len() != ni * r {
                return Err(RvbError::LengthMismatch { expected: ni * r, got: s.z.len() });
            }
            if !s.x.iter().chain(&s.z).all(|v| v.is_finite()) {
                return Err(RvbError::InvalidData(format!("non-finite design entry in subject {i}")));
            }
            if let Some(j) = (0..ni).find(|&j| !family.validate(s.obs(j))) {
                return Err(RvbError::InvalidData(format!(
                    "response {} of subject {i} is outside the {family} support",
                    s.y[j]
                )));
            }
            s.prepare(family)?;
        }
        let n = subjects.len();
        Ok(Self {
            family,
            p,
            r,
            subjects,
            fixed_names: (0..p).map(|k| format!("x{k}")).collect(),
            random_names: (0..r).map(|k| format!("z{k}")).collect(),
            group_labels: (0..n).map(|i| i.to_string()).collect(),
        })
    }

    pub fn with_names(mut self, fixed: Vec<String>, random: Vec<String>) -> Result<Self> {
        if fixed.len() != self.p {
            return Err(RvbError::LengthMismatch { expected: self.p, got: fixed.len() });
        }
        if random.len() != self.r {
            return Err(RvbError::LengthMismatch { expected: self.r, got: random.len() });
        }
        self.fixed_names = fixed;
        self.random_names = random;
        Ok(self)
    }

    pub fn with_group_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.subjects.len() {
            return Err(RvbError::LengthMismatch { expected: self.subjects.len(), got: labels.len() });
        }
        self.group_labels = labels;
        Ok(self)
    }

    #[inline]
    pub fn family(&self) -> Family {
        self.family
    }

    /// Number of fixed effects.
    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of random effects per subject.
    #[inline]
    pub fn r(&self) -> usize {
        self.r
    }

    /// Number of subjects.
    #[inline]
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    #[inline]
    pub fn subject(&self, i: usize) -> &Subject<T> {
        &self.subjects[i]
    }

    pub fn subjects(&self) -> &[Subject<T>] {
        &self.subjects
    }

    pub fn fixed_names(&self) -> &[String] {
        &self.fixed_names
    }

    pub fn random_names(&self) -> &[String] {
        &self.random_names
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    #[cfg(test)]
    pub(crate) fn set_eta_hat(&mut self, i: usize, eta_hat: Vec<T>) {
        let fam = self.family;
        let s = &mut self.subjects[i];
        s.h1_hat = (0..s.len()).map(|j| family::h1(fam, s.trials[j], eta_hat[j]).unwrap()).collect();
        s.h2_hat = (0..s.len()).map(|j| family::h2(fam, s.trials[j], eta_hat[j]).unwrap()).collect();
        s.eta_hat = eta_hat;
    }

    /// The subjects at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            family: self.family,
            p: self.p,
            r: self.r,
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            fixed_names: self.fixed_names.clone(),
            random_names: self.random_names.clone(),
            group_labels: indices.iter().map(|&i| self.group_labels[i].clone()).collect(),
        }
    }
}

/// Global parameters `θ_G = (β, ω)` with the derived `W`, `Ω` and `Ω⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalParams<T> {
    beta: Vec<T>,
    omega: Vec<T>,
    w: LowerTriangular<T>,
    precision: SquareMatrix<T>,
    covariance: SquareMatrix<T>,
}

impl<T: Real> GlobalParams<T> {
    pub fn new(beta: Vec<T>, omega: Vec<T>, r: usize) -> Result<Self> {
        let w = LowerTriangular::from_log_diag(r, &omega)?;
        if !w.is_finite() || (0..r).any(|i| !(w.diag(i) > T::zero())) {
            return Err(RvbError::NotPositiveDefinite { pivot: 0 });
        }
        let winv = w.inverse()?;
        let precision = w.gram();
        // Ω⁻¹ = W⁻ᵀ W⁻¹
        let covariance = SquareMatrix::from_fn(r, |i, j| {
            let mut acc = T::zero();
            for k in i.max(j)..r {
                acc += winv.get(k, i) * winv.get(k, j);
            }
            acc
        });
        Ok(Self { beta, omega, w, precision, covariance })
    }

    /// Splits a flat global vector `(β, ω)`; when `ω` is fixed by the prior
    /// the vector holds `β` only.
    pub fn from_flat(theta_g: &[T], p: usize, r: usize, priors: &Priors<T>) -> Result<Self> {
        let expected = priors.global_dim(p, r);
        if theta_g.len() != expected {
            return Err(RvbError::LengthMismatch { expected, got: theta_g.len() });
        }
        let beta = theta_g[..p].to_vec();
        let omega = match &priors.omega {
            OmegaPrior::Fixed(omega) => omega.clone(),
            _ => theta_g[p..].to_vec(),
        };
        Self::new(beta, omega, r)
    }

    pub fn beta(&self) -> &[T] {
        &self.beta
    }

    pub fn omega(&self) -> &[T] {
        &self.omega
    }

    pub fn w(&self) -> &LowerTriangular<T> {
        &self.w
    }

    /// `Ω`.
    pub fn precision(&self) -> &SquareMatrix<T> {
        &self.precision
    }

    /// `Ω⁻¹`.
    pub fn covariance(&self) -> &SquareMatrix<T> {
        &self.covariance
    }

    pub fn r(&self) -> usize {
        self.w.order()
    }

    /// `log |Ω| = 2 Σ log Wᵢᵢ`.
    pub fn log_det_precision(&self) -> T {
        T::lit(2.0) * self.w.log_det()
    }
}

/// Prior on `ω`.
#[derive(Clone, Debug, PartialEq)]
pub enum OmegaPrior<T> {
    /// Wishart `W(ν, S)` on `Ω`, carried over to `ω` with its Jacobian.
    Wishart { nu: T, s: SquareMatrix<T>, s_inv: SquareMatrix<T> },
    /// Independent `N(mean_k, sd²)` on each coordinate of `ω`.
    Normal { mean: Vec<T>, sd: T },
    /// `ω` known and held fixed; it is not part of the parameter vector.
    Fixed(Vec<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Priors<T> {
    /// Variance of the independent normal prior on each `β_k`.
    pub sigma_beta2: T,
    pub omega: OmegaPrior<T>,
}

impl<T: Real> Priors<T> {
    pub fn wishart(sigma_beta2: T, nu: T, s: SquareMatrix<T>) -> Result<Self> {
        let r = s.order();
        if !(nu > T::from_count(r) - T::one()) {
            return Err(RvbError::Config(format!(
                "Wishart degrees of freedom {nu} must exceed r - 1 = {}",
                r - 1
            )));
        }
        let (s_inv, _) = spd_inverse(&s)?;
        Ok(Self { sigma_beta2, omega: OmegaPrior::Wishart { nu, s: s.symmetrized(), s_inv } })
    }

    pub fn normal_omega(sigma_beta2: T, r: usize, sd: T) -> Self {
        Self { sigma_beta2, omega: OmegaPrior::Normal { mean: vec![T::zero(); tri_len(r)], sd } }
    }

    pub fn fixed_omega(sigma_beta2: T, omega: Vec<T>) -> Self {
        Self { sigma_beta2, omega: OmegaPrior::Fixed(omega) }
    }

    pub fn omega_is_free(&self) -> bool {
        !matches!(self.omega, OmegaPrior::Fixed(_))
    }

    /// Length of the global parameter vector.
    pub fn global_dim(&self, p: usize, r: usize) -> usize {
        if self.omega_is_free() {
            p + tri_len(r)
        } else {
            p
        }
    }

    /// For `r = 1` Wishart priors, the `(shape, rate)` of the implied Gamma
    /// prior on `σ⁻²`.
    pub fn gamma_equivalent(&self) -> Option<(T, T)> {
        match &self.omega {
            OmegaPrior::Wishart { nu, s_inv, .. } if s_inv.order() == 1 => {
                let half = T::lit(0.5);
                Some((half * *nu, half * s_inv.get(0, 0)))
            }
            _ => None,
        }
    }
}

/// Pooled GLM fit (all random effects at zero) by iteratively reweighted
/// least squares. Returns `β̂`.
pub fn fit_pooled_glm<T: Real>(data: &Dataset<T>) -> Result<Vec<T>> {
    const MAX_ITER: usize = 25;
    let p = data.p();
    let fam = data.family();
    let mut beta = vec![T::zero(); p];
    if fam == Family::Poisson {
        if let Some(k) = intercept_column(data) {
            let total: T = data.subjects().iter().flat_map(|s| s.y.iter().copied()).sum();
            let mean = total / T::from_count(data.n_obs());
            beta[k] = (mean + T::lit(0.5)).ln();
        }
    }
    let pooled_loglik = |beta: &[T]| -> Result<T> {
        let mut acc = T::zero();
        for s in data.subjects() {
            for (j, eta) in s.x_beta(beta).into_iter().enumerate() {
                acc += family::loglik(fam, s.obs(j), eta)?;
            }
        }
        Ok(acc)
    };
    let mut ll = pooled_loglik(&beta)?;
    let tol = T::lit(1e-8).max(T::epsilon() * T::lit(16.0));
    for _ in 0..MAX_ITER {
        let mut info = SquareMatrix::zeros(p);
        let mut score = vec![T::zero(); p];
        for s in data.subjects() {
            for (j, eta) in s.x_beta(&beta).into_iter().enumerate() {
                let d = family::derivs(fam, s.trials[j], eta)?;
                let x = s.x_row(j, p);
                info.add_outer(d.h2, x, x);
                for (sc, &xk) in score.iter_mut().zip(x) {
                    *sc += xk * (s.y[j] - d.h1);
                }
            }
        }
        let chol = matcalc::cholesky(&info).map_err(|_| RvbError::RankDeficient)?;
        let step = chol.solve_t(&chol.solve(&score));
        let mut scale = T::one();
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<T> = beta.iter().zip(&step).map(|(&b, &d)| b + scale * d).collect();
            match pooled_loglik(&trial) {
                Ok(v) if v >= ll => {
                    accepted = Some((trial, v));
                    break;
                }
                _ => scale *= T::lit(0.5),
            }
        }
        let Some((next, next_ll)) = accepted else {
            // no ascent direction left: already at the optimum to working precision
            return Ok(beta);
        };
        let change = (next_ll - ll).abs() / (T::one() + next_ll.abs());
        beta = next;
        ll = next_ll;
        if change < tol {
            return Ok(beta);
        }
    }
    Err(RvbError::IrlsDiverged { iterations: MAX_ITER })
}

fn intercept_column<T: Real>(data: &Dataset<T>) -> Option<usize> {
    let p = data.p();
    (0..p).find(|&k| {
        data.subjects().iter().all(|s| (0..s.len()).all(|j| s.x_row(j, p)[k] == T::one()))
    })
}

/// Default conjugate Wishart prior centred on the pooled-GLM information.
///
/// With `M = n⁻¹ Σ Zᵢᵀ Wᵢ(β̂) Zᵢ` the prior is `ν = ρ`, `S = M / ρ`, where
/// `ρ = r` for a single random effect and `r + 1` otherwise.
pub fn default_prior<T: Real>(data: &Dataset<T>, sigma_beta2: T) -> Result<Priors<T>> {
    let beta = fit_pooled_glm(data)?;
    let r = data.r();
    let mut m = SquareMatrix::zeros(r);
    for s in data.subjects() {
        for (j, eta) in s.x_beta(&beta).into_iter().enumerate() {
            let w = family::h2(data.family(), s.trials[j], eta)?;
            let z = s.z_row(j, r);
            m.add_outer(w, z, z);
        }
    }
    let m = m.scale(T::from_count(data.n()).recip());
    let rho = if r == 1 { T::one() } else { T::from_count(r + 1) };
    Priors::wishart(sigma_beta2, rho, m.scale(rho.recip()))
}

/// Log prior density of `ω`, dropping parameter-free constants.
pub fn log_p_omega<T: Real>(gp: &GlobalParams<T>, pr: &Priors<T>) -> T {
    let r = gp.r();
    match &pr.omega {
        OmegaPrior::Wishart { nu, s_inv, .. } => {
            let rr = T::from_count(r);
            let half = T::lit(0.5);
            let mut trace = T::zero();
            for i in 0..r {
                for j in 0..r {
                    trace += s_inv.get(i, j) * gp.precision().get(j, i);
                }
            }
            let mut jac = rr * T::LN_2();
            for i in 0..r {
                jac += T::from_count(r - i + 1) * gp.w().diag(i).ln();
            }
            half * (*nu - rr - T::one()) * gp.log_det_precision() - half * trace + jac
        }
        OmegaPrior::Normal { mean, sd } => {
            let inv = (T::lit(2.0) * *sd * *sd).recip();
            -gp.omega().iter().zip(mean).map(|(&w, &m)| (w - m) * (w - m)).sum::<T>() * inv
        }
        OmegaPrior::Fixed(_) => T::zero(),
    }
}

/// `Σⱼ log p(yᵢⱼ | ηᵢⱼ) − ½ bᵢᵀ Ω bᵢ` for one subject.
pub fn subject_log_density<T: Real>(
    data: &Dataset<T>,
    i: usize,
    gp: &GlobalParams<T>,
    b: &[T],
) -> Result<T> {
    let s = data.subject(i);
    let (p, r) = (data.p(), data.r());
    let mut acc = T::zero();
    for j in 0..s.len() {
        let eta = dot(s.x_row(j, p), gp.beta()) + dot(s.z_row(j, r), b);
        acc += family::loglik(data.family(), s.obs(j), eta)?;
    }
    Ok(acc - T::lit(0.5) * gp.precision().quad_form(b))
}

fn global_log_terms<T: Real>(n: usize, gp: &GlobalParams<T>, pr: &Priors<T>) -> T {
    let half = T::lit(0.5);
    half * T::from_count(n) * gp.log_det_precision() - dot(gp.beta(), gp.beta()) * half / pr.sigma_beta2
        + log_p_omega(gp, pr)
}

/// `log p(y, θ)` with `b` the concatenated random effects `(b₁, …, bₙ)`.
pub fn log_joint<T: Real>(data: &Dataset<T>, gp: &GlobalParams<T>, b: &[T], pr: &Priors<T>) -> Result<T> {
    let r = data.r();
    if b.len() != data.n() * r {
        return Err(RvbError::LengthMismatch { expected: data.n() * r, got: b.len() });
    }
    let mut acc = T::zero();
    for i in 0..data.n() {
        acc += subject_log_density(data, i, gp, &b[i * r..(i + 1) * r])?;
    }
    Ok(acc + global_log_terms(data.n(), gp, pr))
}

/// `log p(y, θ̃) = log p(y, θ) + Σᵢ log |Lᵢ|` with `bᵢ = Lᵢ b̃ᵢ + λᵢ`.
pub fn log_joint_reparam<T: Real>(
    data: &Dataset<T>,
    gp: &GlobalParams<T>,
    b_tilde: &[T],
    transforms: &[LocalTransform<T>],
    pr: &Priors<T>,
) -> Result<T> {
    let r = data.r();
    if b_tilde.len() != data.n() * r {
        return Err(RvbError::LengthMismatch { expected: data.n() * r, got: b_tilde.len() });
    }
    if transforms.len() != data.n() {
        return Err(RvbError::LengthMismatch { expected: data.n(), got: transforms.len() });
    }
    let mut b = Vec::with_capacity(b_tilde.len());
    let mut log_jac = T::zero();
    for (i, t) in transforms.iter().enumerate() {
        b.extend(t.invert(&b_tilde[i * r..(i + 1) * r]));
        log_jac += t.chol().log_det();
    }
    Ok(log_joint(data, gp, &b, pr)? + log_jac)
}

/// `v(diag(u))` with `uᵢ = r − i + 2` (one-based `i`): gradient of the
/// Jacobian term of the induced prior on `ω`.
pub fn jacobian_grad<T: Real>(r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); tri_len(r)];
    for i in 0..r {
        out[matcalc::packed_index(r, i, i)] = T::from_count(r - i + 1);
    }
    out
}

/// Maps a symmetric `G` with `d f = ½ tr(dΩ G)` to `∇_ω f = D^W v(G W)`.
pub fn omega_chain<T: Real>(g: &SquareMatrix<T>, w: &LowerTriangular<T>) -> Vec<T> {
    let r = w.order();
    let gw = SquareMatrix::from_fn(r, |i, j| {
        let mut acc = T::zero();
        for k in j..r {
            acc += g.get(i, k) * w.get(k, j);
        }
        acc
    });
    let scale = matcalc::dweight(w);
    halfvec(&gw).values().iter().zip(scale.values()).map(|(&a, &s)| a * s).collect()
}

/// Gradient of [`log_p_omega`] with respect to `ω`.
pub fn prior_grad_omega<T: Real>(gp: &GlobalParams<T>, pr: &Priors<T>) -> Vec<T> {
    let r = gp.r();
    match &pr.omega {
        OmegaPrior::Wishart { nu, s_inv, .. } => {
            let c = *nu - T::from_count(r) - T::one();
            let g = gp.covariance().scale(c).sub(s_inv);
            let mut out = omega_chain(&g, gp.w());
            for (o, u) in out.iter_mut().zip(jacobian_grad::<T>(r)) {
                *o += u;
            }
            out
        }
        OmegaPrior::Normal { mean, sd } => {
            let inv = (*sd * *sd).recip();
            gp.omega().iter().zip(mean).map(|(&w, &m)| -(w - m) * inv).collect()
        }
        OmegaPrior::Fixed(_) => Vec::new(),
    }
}

/// Gradient of `½ log|Ω| − ½ bᵀ Ω b` with respect to `ω` at fixed `b`:
/// `D^W v(W⁻ᵀ − b bᵀ W)`.
pub fn subject_grad_omega<T: Real>(gp: &GlobalParams<T>, b: &[T]) -> Vec<T> {
    let mut g = gp.covariance().clone();
    g.add_outer(-T::one(), b, b);
    omega_chain(&g, gp.w())
}
