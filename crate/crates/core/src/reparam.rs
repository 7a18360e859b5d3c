//! Per-subject affine transforms `b̃ᵢ = Lᵢ⁻¹(bᵢ − λᵢ)` built from Gaussian
//! approximations `N(λᵢ, Λᵢ)` of `p(bᵢ | θ_G, yᵢ)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, RvbError};
use crate::family;
use crate::matcalc::{cholesky, LowerTriangular, SquareMatrix};
use crate::model::{Dataset, GlobalParams};
use crate::scalar::{dot, max_abs, Real};

/// How `(λᵢ, Λᵢ)` are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformMethod {
    /// Second-order expansion of the likelihood about the regularized `η̂`.
    Approach1,
    /// Expansion about the conditional mode found by Newton-Raphson.
    Approach2,
}

impl TransformMethod {
    pub fn tag(self) -> &'static str {
        match self {
            TransformMethod::Approach1 => "a1",
            TransformMethod::Approach2 => "a2",
        }
    }
}

impl fmt::Display for TransformMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TransformMethod {
    type Err = RvbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" | "approach1" | "1" => Ok(TransformMethod::Approach1),
            "a2" | "approach2" | "2" => Ok(TransformMethod::Approach2),
            other => Err(RvbError::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalTransform<T> {
    lambda: Vec<T>,
    cov: SquareMatrix<T>,
    chol: LowerTriangular<T>,
    /// Linear predictor `Xᵢβ + Zᵢb̂ᵢ` at the conditional mode (approach 2).
    mode_eta: Option<Vec<T>>,
}

impl<T: Real> LocalTransform<T> {
    pub fn identity(r: usize) -> Self {
        Self {
            lambda: vec![T::zero(); r],
            cov: SquareMatrix::identity(r),
            chol: LowerTriangular::identity(r),
            mode_eta: None,
        }
    }

    /// Builds a transform directly from `(λ, Λ)`.
    pub fn from_moments(lambda: Vec<T>, cov: SquareMatrix<T>) -> Result<Self> {
        let chol = cholesky(&cov)?;
        Ok(Self { lambda, cov: cov.symmetrized(), chol, mode_eta: None })
    }

    pub fn lambda(&self) -> &[T] {
        &self.lambda
    }

    /// `Λᵢ`.
    pub fn cov(&self) -> &SquareMatrix<T> {
        &self.cov
    }

    /// `Lᵢ`.
    pub fn chol(&self) -> &LowerTriangular<T> {
        &self.chol
    }

    pub fn mode_eta(&self) -> Option<&[T]> {
        self.mode_eta.as_deref()
    }

    /// `b̃ = L⁻¹(b − λ)`.
    pub fn apply(&self, b: &[T]) -> Vec<T> {
        let centred: Vec<T> = b.iter().zip(&self.lambda).map(|(&x, &l)| x - l).collect();
        self.chol.solve(&centred)
    }

    /// `b = L b̃ + λ`.
    pub fn invert(&self, b_tilde: &[T]) -> Vec<T> {
        let mut b = self.chol.mul_vec(b_tilde);
        for (x, &l) in b.iter_mut().zip(&self.lambda) {
            *x += l;
        }
        b
    }
}

/// Inverts `Λ⁻¹` and factorizes the result.
fn from_precision<T: Real>(prec: &SquareMatrix<T>) -> Result<(SquareMatrix<T>, LowerTriangular<T>, LowerTriangular<T>)> {
    let r = prec.order();
    let rf = cholesky(prec)?;
    let rinv = rf.inverse()?;
    let cov = SquareMatrix::from_fn(r, |i, j| {
        let mut acc = T::zero();
        for k in i.max(j)..r {
            acc += rinv.get(k, i) * rinv.get(k, j);
        }
        acc
    });
    let chol = cholesky(&cov)?;
    Ok((cov, chol, rf))
}

/// Approach 1: `Λ = (Ω + ZᵀH(η̂)Z)⁻¹`, `λ = Λ Zᵀ{y − g(η̂) + H(η̂)(η̂ − Xβ)}`.
pub fn transform_a1<T: Real>(data: &Dataset<T>, i: usize, gp: &GlobalParams<T>) -> Result<LocalTransform<T>> {
    let s = data.subject(i);
    let (p, r) = (data.p(), data.r());
    let mut prec = gp.precision().clone();
    let mut rhs = vec![T::zero(); r];
    for j in 0..s.len() {
        let z = s.z_row(j, r);
        let h2 = s.h2_hat()[j];
        prec.add_outer(h2, z, z);
        let xb = dot(s.x_row(j, p), gp.beta());
        let w = s.y[j] - s.h1_hat()[j] + h2 * (s.eta_hat()[j] - xb);
        for (acc, &zk) in rhs.iter_mut().zip(z) {
            *acc += zk * w;
        }
    }
    let (cov, chol, rf) = from_precision(&prec)?;
    let lambda = rf.solve_t(&rf.solve(&rhs));
    Ok(LocalTransform { lambda, cov, chol, mode_eta: None })
}

/// Least-squares start for the mode search: `(ZᵀZ)⁻¹Zᵀ(η̂ − Xβ)`, or zero when
/// the subject has fewer observations than random effects.
pub fn nr_init<T: Real>(data: &Dataset<T>, i: usize, gp: &GlobalParams<T>) -> Vec<T> {
    let s = data.subject(i);
    let (p, r) = (data.p(), data.r());
    if s.len() < r {
        return vec![T::zero(); r];
    }
    let mut ztz = SquareMatrix::zeros(r);
    let mut rhs = vec![T::zero(); r];
    for j in 0..s.len() {
        let z = s.z_row(j, r);
        ztz.add_outer(T::one(), z, z);
        let resid = s.eta_hat()[j] - dot(s.x_row(j, p), gp.beta());
        for (acc, &zk) in rhs.iter_mut().zip(z) {
            *acc += zk * resid;
        }
    }
    let factor = cholesky(&ztz).or_else(|_| {
        let mut ridged = ztz.clone();
        for k in 0..r {
            ridged.add_at(k, k, T::lit(1e-8));
        }
        cholesky(&ridged)
    });
    match factor {
        Ok(f) => f.solve_t(&f.solve(&rhs)),
        Err(_) => vec![T::zero(); r],
    }
}

struct ModeEval<T> {
    objective: T,
    grad: Vec<T>,
    neg_hessian: SquareMatrix<T>,
    eta: Vec<T>,
    /// Largest magnitude among the terms summed into `grad`.
    scale: T,
}

/// `log p(yᵢ | bᵢ, β) − ½ bᵀΩb` with its gradient and negative Hessian.
fn mode_eval<T: Real>(data: &Dataset<T>, i: usize, gp: &GlobalParams<T>, xb: &[T], b: &[T]) -> Result<ModeEval<T>> {
    let s = data.subject(i);
    let r = data.r();
    let omega_b = gp.precision().mul_vec(b);
    let mut objective = -T::lit(0.5) * dot(b, &omega_b);
    let mut grad: Vec<T> = omega_b.iter().map(|&v| -v).collect();
    let mut neg_hessian = gp.precision().clone();
    let mut eta = Vec::with_capacity(s.len());
    let mut mags: Vec<T> = omega_b.iter().map(|v| v.abs()).collect();
    for j in 0..s.len() {
        let z = s.z_row(j, r);
        let e = xb[j] + dot(z, b);
        let d = family::derivs(data.family(), s.trials[j], e)?;
        objective += s.y[j] * e - d.h;
        let resid = s.y[j] - d.h1;
        let mag = s.y[j].abs() + d.h1.abs();
        for ((g, m), &zk) in grad.iter_mut().zip(mags.iter_mut()).zip(z) {
            *g += zk * resid;
            *m += zk.abs() * mag;
        }
        neg_hessian.add_outer(d.h2, z, z);
        eta.push(e);
    }
    let scale = T::one() + max_abs(&mags);
    Ok(ModeEval { objective, grad, neg_hessian, eta, scale })
}

fn mode_tolerance<T: Real>() -> T {
    T::lit(1e-8).max(T::epsilon() * T::lit(64.0))
}

/// Approach 2: `λ = b̂` (conditional mode) and `Λ = (ZᵀH(Xβ + Zb̂)Z + Ω)⁻¹`.
///
/// Newton-Raphson with step halving from [`nr_init`]. Iterates until the
/// stationarity residual is small relative to the size of the terms it sums
/// (`1e-8` in double precision), then takes one more
/// full step to polish `b̂` to working precision.
pub fn transform_a2<T: Real>(data: &Dataset<T>, i: usize, gp: &GlobalParams<T>) -> Result<LocalTransform<T>> {
    const MAX_ITER: usize = 100;
    const MAX_HALVINGS: usize = 20;
    let xb = data.subject(i).x_beta(gp.beta());
    let mut b = nr_init(data, i, gp);
    let mut cur = match mode_eval(data, i, gp, &xb, &b) {
        Ok(e) => e,
        Err(_) => {
            b = vec![T::zero(); data.r()];
            mode_eval(data, i, gp, &xb, &b)?
        }
    };
    let tol = mode_tolerance::<T>();
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let scale = cur.scale;
        if max_abs(&cur.grad) < tol * scale {
            converged = true;
            break;
        }
        let f = cholesky(&cur.neg_hessian).map_err(|_| RvbError::ModeSearchFailed { subject: i })?;
        let step = f.solve_t(&f.solve(&cur.grad));
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<T> = b.iter().zip(&step).map(|(&x, &d)| x + t * d).collect();
            if let Ok(e) = mode_eval(data, i, gp, &xb, &trial) {
                // the gradient norm decides once objective changes fall below rounding
                if e.objective > cur.objective || max_abs(&e.grad) < max_abs(&cur.grad) {
                    b = trial;
                    cur = e;
                    accepted = true;
                    break;
                }
            }
            t *= T::lit(0.5);
        }
        if !accepted {
            // objective flat to rounding: accept only if already near stationarity
            if max_abs(&cur.grad) < tol.sqrt() * scale {
                converged = true;
                break;
            }
            return Err(RvbError::ModeSearchFailed { subject: i });
        }
    }
    if !converged {
        return Err(RvbError::ModeSearchFailed { subject: i });
    }
    // polishing step
    if let Ok(f) = cholesky(&cur.neg_hessian) {
        let step = f.solve_t(&f.solve(&cur.grad));
        let trial: Vec<T> = b.iter().zip(&step).map(|(&x, &d)| x + d).collect();
        if let Ok(e) = mode_eval(data, i, gp, &xb, &trial) {
            if max_abs(&e.grad) <= max_abs(&cur.grad) {
                b = trial;
                cur = e;
            }
        }
    }
    let (cov, chol, _) = from_precision(&cur.neg_hessian)?;
    Ok(LocalTransform { lambda: b, cov, chol, mode_eta: Some(cur.eta) })
}

pub fn transform<T: Real>(
    data: &Dataset<T>,
    i: usize,
    gp: &GlobalParams<T>,
    method: TransformMethod,
) -> Result<LocalTransform<T>> {
    match method {
        TransformMethod::Approach1 => transform_a1(data, i, gp),
        TransformMethod::Approach2 => transform_a2(data, i, gp),
    }
}

/// Transforms for every subject, in subject order.
pub fn transforms<T: Real>(
    data: &Dataset<T>,
    gp: &GlobalParams<T>,
    method: TransformMethod,
) -> Result<Vec<LocalTransform<T>>> {
    (0..data.n()).map(|i| transform(data, i, gp, method)).collect()
}
