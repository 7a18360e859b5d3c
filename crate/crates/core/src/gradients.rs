//! Analytic gradient of the reparametrized log joint `ℓ(θ̃)`.
//!
//! `θ̃` is laid out as `(b̃₁, …, b̃ₙ, β, ω)`, with `ω` omitted when it is held
//! fixed by the prior. The transforms `(λᵢ, Λᵢ, Lᵢ)` are rebuilt from `θ_G` on
//! every evaluation, so the global gradient includes their dependence on `θ_G`.
//!
//! Per subject, the `ω` part is accumulated as a symmetric matrix `Gᵢ` with
//! `dℓᵢ = ½ tr(dΩ Gᵢ)`; the map to `ω` is applied once after the sum.

use rayon::prelude::*;

use crate::error::{Result, RvbError};
use crate::family;
use crate::matcalc::{LowerTriangular, SquareMatrix};
use crate::model::{self, Dataset, GlobalParams, Priors};
use crate::reparam::{self, LocalTransform, TransformMethod};
use crate::scalar::{dot, Real};

/// Work (observations × random effects) above which subjects are processed
/// on the rayon pool.
const PARALLEL_WORK: usize = 4096;

/// `∇_θ̃ ℓ` split into blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGradient<T> {
    /// `(∇_b̃₁ℓ, …, ∇_b̃ₙℓ)` concatenated.
    pub local: Vec<T>,
    pub beta: Vec<T>,
    /// Empty when `ω` is fixed.
    pub omega: Vec<T>,
}

impl<T: Real> JointGradient<T> {
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.local.len() + self.beta.len() + self.omega.len());
        out.extend_from_slice(&self.local);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.omega);
        out
    }
}

/// `aᵢ = Zᵢᵀ(yᵢ − g(ηᵢ)) − Ωbᵢ` with `ηᵢ = Xᵢβ + Zᵢbᵢ`.
pub fn a_vec<T: Real>(data: &Dataset<T>, i: usize, gp: &GlobalParams<T>, b: &[T]) -> Result<Vec<T>> {
    let s = data.subject(i);
    let (p, r) = (data.p(), data.r());
    let mut a: Vec<T> = gp.precision().mul_vec(b).into_iter().map(|v| -v).collect();
    for j in 0..s.len() {
        let z = s.z_row(j, r);
        let eta = dot(s.x_row(j, p), gp.beta()) + dot(z, b);
        let resid = s.y[j] - family::h1(data.family(), s.trials[j], eta)?;
        for (ak, &zk) in a.iter_mut().zip(z) {
            *ak += zk * resid;
        }
    }
    Ok(a)
}

/// `∇_b̃ᵢℓ = Lᵢᵀaᵢ`.
pub fn grad_local<T: Real>(t: &LocalTransform<T>, a: &[T]) -> Vec<T> {
    t.chol().t_mul_vec(a)
}

/// `B̃ᵢ = B̄ᵢ + B̄ᵢᵀ − dg(Bᵢ)` with `Bᵢ = Lᵢᵀaᵢb̃ᵢᵀ`.
pub fn btilde_mat<T: Real>(t: &LocalTransform<T>, a: &[T], b_tilde: &[T]) -> SquareMatrix<T> {
    let la = grad_local(t, a);
    btilde_from(&la, b_tilde)
}

fn btilde_from<T: Real>(la: &[T], b_tilde: &[T]) -> SquareMatrix<T> {
    let r = la.len();
    SquareMatrix::from_fn(r, |i, j| if i >= j { la[i] * b_tilde[j] } else { la[j] * b_tilde[i] })
}

fn sandwich<T: Real>(l: &LowerTriangular<T>, m: &SquareMatrix<T>) -> SquareMatrix<T> {
    l.sandwich(m).symmetrized()
}

/// `x yᵀ + y xᵀ`.
fn sym_outer<T: Real>(x: &[T], y: &[T]) -> SquareMatrix<T> {
    let r = x.len();
    SquareMatrix::from_fn(r, |i, j| x[i] * y[j] + y[i] * x[j])
}

struct SubjectTerms<T> {
    ell: T,
    local: Vec<T>,
    beta: Vec<T>,
    /// `Gᵢ` without the `Ω⁻¹` term, which is added once for all subjects.
    g: Option<SquareMatrix<T>>,
}

fn subject_terms<T: Real>(
    data: &Dataset<T>,
    i: usize,
    gp: &GlobalParams<T>,
    t: &LocalTransform<T>,
    b_tilde: &[T],
    method: TransformMethod,
    with_omega: bool,
) -> Result<SubjectTerms<T>> {
    let s = data.subject(i);
    let (p, r) = (data.p(), data.r());
    let fam = data.family();
    let b = t.invert(b_tilde);
    let omega_b = gp.precision().mul_vec(&b);

    let mut ell = t.chol().log_det() - T::lit(0.5) * dot(&b, &omega_b);
    let mut a: Vec<T> = omega_b.iter().map(|&v| -v).collect();
    let mut resid = Vec::with_capacity(s.len());
    for j in 0..s.len() {
        let z = s.z_row(j, r);
        let eta = dot(s.x_row(j, p), gp.beta()) + dot(z, &b);
        let d = family::derivs(fam, s.trials[j], eta)?;
        ell += s.y[j] * eta - d.h;
        let e = s.y[j] - d.h1;
        for (ak, &zk) in a.iter_mut().zip(z) {
            *ak += zk * e;
        }
        resid.push(e);
    }

    let local = t.chol().t_mul_vec(&a);
    let bt = btilde_from(&local, b_tilde);
    let lbl = sandwich(t.chol(), &bt);
    let cov = t.cov();

    let mut beta_grad = vec![T::zero(); p];
    let g = match method {
        TransformMethod::Approach1 => {
            let cov_a = cov.mul_vec(&a);
            for j in 0..s.len() {
                let w = resid[j] - s.h2_hat()[j] * dot(s.z_row(j, r), &cov_a);
                for (gk, &xk) in beta_grad.iter_mut().zip(s.x_row(j, p)) {
                    *gk += xk * w;
                }
            }
            with_omega.then(|| {
                let mut g = sym_outer(&cov_a, t.lambda()).add(cov).add(&lbl);
                g.add_outer(T::one(), &b, &b);
                g.scale(-T::one())
            })
        }
        TransformMethod::Approach2 => {
            let mode_eta = t
                .mode_eta()
                .ok_or_else(|| RvbError::InvalidData("approach-2 gradient needs a mode transform".into()))?;
            let pm = cov.add(&lbl);
            let mut c = a.clone();
            let mut alpha = Vec::with_capacity(s.len());
            let mut h2_mode = Vec::with_capacity(s.len());
            for (j, &eta_hat) in mode_eta.iter().enumerate() {
                let z = s.z_row(j, r);
                let d = family::derivs(fam, s.trials[j], eta_hat)?;
                let aj = T::lit(0.5) * d.h3 * pm.quad_form(z);
                for (ck, &zk) in c.iter_mut().zip(z) {
                    *ck -= zk * aj;
                }
                alpha.push(aj);
                h2_mode.push(d.h2);
            }
            let cov_c = cov.mul_vec(&c);
            for j in 0..s.len() {
                let w = resid[j] - alpha[j] - h2_mode[j] * dot(s.z_row(j, r), &cov_c);
                for (gk, &xk) in beta_grad.iter_mut().zip(s.x_row(j, p)) {
                    *gk += xk * w;
                }
            }
            with_omega.then(|| {
                let mut g = sym_outer(&cov_c, t.lambda()).add(&pm);
                g.add_outer(T::one(), &b, &b);
                g.scale(-T::one())
            })
        }
    };
    Ok(SubjectTerms { ell, local, beta: beta_grad, g })
}

fn collect_terms<T: Real>(
    data: &Dataset<T>,
    gp: &GlobalParams<T>,
    transforms: &[LocalTransform<T>],
    b_tilde: &[T],
    method: TransformMethod,
    with_omega: bool,
) -> Result<Vec<SubjectTerms<T>>> {
    let r = data.r();
    if b_tilde.len() != data.n() * r {
        return Err(RvbError::LengthMismatch { expected: data.n() * r, got: b_tilde.len() });
    }
    let one = |i: usize| {
        subject_terms(data, i, gp, &transforms[i], &b_tilde[i * r..(i + 1) * r], method, with_omega)
    };
    if data.n_obs() * r >= PARALLEL_WORK {
        (0..data.n()).into_par_iter().map(one).collect()
    } else {
        (0..data.n()).map(one).collect()
    }
}

/// Sums per-subject terms in subject order and adds the prior pieces.
fn assemble<T: Real>(
    data: &Dataset<T>,
    gp: &GlobalParams<T>,
    pr: &Priors<T>,
    terms: Vec<SubjectTerms<T>>,
) -> (T, JointGradient<T>) {
    let (p, r) = (data.p(), data.r());
    let with_omega = pr.omega_is_free();
    let half = T::lit(0.5);
    let mut ell = half * T::from_count(data.n()) * gp.log_det_precision()
        - half * dot(gp.beta(), gp.beta()) / pr.sigma_beta2
        + model::log_p_omega(gp, pr);
    let mut local = Vec::with_capacity(data.n() * r);
    let mut beta: Vec<T> = gp.beta().iter().map(|&b| -b / pr.sigma_beta2).collect();
    let mut g = gp.covariance().scale(T::from_count(data.n()));
    for t in terms {
        ell += t.ell;
        local.extend(t.local);
        for (acc, v) in beta.iter_mut().zip(t.beta) {
            *acc += v;
        }
        if let Some(gi) = t.g {
            g = g.add(&gi);
        }
    }
    debug_assert_eq!(beta.len(), p);
    let omega = if with_omega {
        let mut out = model::omega_chain(&g.symmetrized(), gp.w());
        for (o, v) in out.iter_mut().zip(model::prior_grad_omega(gp, pr)) {
            *o += v;
        }
        out
    } else {
        Vec::new()
    };
    (ell, JointGradient { local, beta, omega })
}

fn global_only<T: Real>(
    data: &Dataset<T>,
    gp: &GlobalParams<T>,
    transforms: &[LocalTransform<T>],
    b_tilde: &[T],
    pr: &Priors<T>,
    method: TransformMethod,
) -> Result<(Vec<T>, Vec<T>)> {
    let terms = collect_terms(data, gp, transforms, b_tilde, method, pr.omega_is_free())?;
    let (_, grad) = assemble(data, gp, pr, terms);
    Ok((grad.beta, grad.omega))
}

/// `(∇_βℓ, ∇_ωℓ)` for approach-1 transforms built at `gp`.
pub fn grad_global_a1<T: Real>(
    data: &Dataset<T>,
    gp: &GlobalParams<T>,
    transforms: &[LocalTransform<T>],
    b_tilde: &[T],
    pr: &Priors<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    global_only(data, gp, transforms, b_tilde, pr, TransformMethod::Approach1)
}

/// `(∇_βℓ, ∇_ωℓ)` for approach-2 transforms built at `gp`.
pub fn grad_global_a2<T: Real>(
    data: &Dataset<T>,
    gp: &GlobalParams<T>,
    transforms: &[LocalTransform<T>],
    b_tilde: &[T],
    pr: &Priors<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    global_only(data, gp, transforms, b_tilde, pr, TransformMethod::Approach2)
}

fn build_transforms<T: Real>(
    data: &Dataset<T>,
    gp: &GlobalParams<T>,
    method: TransformMethod,
) -> Result<Vec<LocalTransform<T>>> {
    let one = |i: usize| reparam::transform(data, i, gp, method);
    if data.n_obs() * data.r() >= PARALLEL_WORK {
        (0..data.n()).into_par_iter().map(one).collect()
    } else {
        (0..data.n()).map(one).collect()
    }
}

/// Full gradient at `(b̃, θ_G)`, rebuilding the transforms from `gp`.
pub fn grad_full<T: Real>(
    data: &Dataset<T>,
    gp: &GlobalParams<T>,
    b_tilde: &[T],
    method: TransformMethod,
    pr: &Priors<T>,
) -> Result<JointGradient<T>> {
    let transforms = build_transforms(data, gp, method)?;
    let terms = collect_terms(data, gp, &transforms, b_tilde, method, pr.omega_is_free())?;
    Ok(assemble(data, gp, pr, terms).1)
}

fn split<'a, T: Real>(
    data: &Dataset<T>,
    pr: &Priors<T>,
    theta: &'a [T],
) -> Result<(&'a [T], GlobalParams<T>)> {
    let nr = data.n() * data.r();
    let d = nr + pr.global_dim(data.p(), data.r());
    if theta.len() != d {
        return Err(RvbError::LengthMismatch { expected: d, got: theta.len() });
    }
    let gp = GlobalParams::from_flat(&theta[nr..], data.p(), data.r(), pr)?;
    Ok((&theta[..nr], gp))
}

/// `ℓ(θ̃)` and the flat gradient `∇_θ̃ℓ` at a flat `θ̃`.
pub fn evaluate<T: Real>(
    data: &Dataset<T>,
    pr: &Priors<T>,
    method: TransformMethod,
    theta: &[T],
) -> Result<(T, Vec<T>)> {
    let (b_tilde, gp) = split(data, pr, theta)?;
    let transforms = build_transforms(data, &gp, method)?;
    let terms = collect_terms(data, &gp, &transforms, b_tilde, method, pr.omega_is_free())?;
    let (ell, grad) = assemble(data, &gp, pr, terms);
    let flat = grad.to_flat();
    if !ell.is_finite() || flat.iter().any(|v| !v.is_finite()) {
        return Err(RvbError::OverflowGuard { eta: f64::INFINITY });
    }
    Ok((ell, flat))
}

/// `ℓ(θ̃)` alone, computed through [`model::log_joint_reparam`].
pub fn log_joint_at<T: Real>(data: &Dataset<T>, pr: &Priors<T>, method: TransformMethod, theta: &[T]) -> Result<T> {
    let (b_tilde, gp) = split(data, pr, theta)?;
    let transforms = build_transforms(data, &gp, method)?;
    model::log_joint_reparam(data, &gp, b_tilde, &transforms, pr)
}
