#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvb::matcalc::{tri_len, SquareMatrix};
use rvb::model::{Dataset, Priors, Subject};
use rvb::{gradients, Family, TransformMethod};

pub const FAMILIES: [Family; 4] = [Family::Poisson, Family::Binomial, Family::Bernoulli, Family::GaussianUnit];
pub const METHODS: [TransformMethod; 2] = [TransformMethod::Approach1, TransformMethod::Approach2];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dataset(rng: &mut ChaCha8Rng, family: Family, n: usize, p: usize, r: usize) -> Dataset<f64> {
    let subjects = (0..n)
        .map(|_| {
            let ni = rng.random_range(1..6);
            let trials = if family == Family::Binomial { vec![10.0; ni] } else { vec![] };
            let y = (0..ni)
                .map(|_| match family {
                    Family::Poisson => rng.random_range(0..6) as f64,
                    Family::Binomial => rng.random_range(0..=10) as f64,
                    Family::Bernoulli => rng.random_range(0..=1) as f64,
                    Family::GaussianUnit => rng.random_range(-2.0..2.0),
                })
                .collect();
            let x = (0..ni * p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = (0..ni * r).map(|_| rng.random_range(-1.0..1.0)).collect();
            Subject::new(y, trials, x, z)
        })
        .collect();
    Dataset::new(family, p, r, subjects).unwrap()
}

pub fn random_wishart(rng: &mut ChaCha8Rng, r: usize) -> Priors<f64> {
    let a = SquareMatrix::from_fn(r, |_, _| rng.random_range(-0.5..0.5));
    let s = a.matmul(&a.transpose()).add(&SquareMatrix::identity(r));
    Priors::wishart(100.0, r as f64 + rng.random_range(0.5..3.0), s).unwrap()
}

pub fn random_theta(rng: &mut ChaCha8Rng, data: &Dataset<f64>, pr: &Priors<f64>) -> Vec<f64> {
    let d = data.n() * data.r() + pr.global_dim(data.p(), data.r());
    let mut theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    // keep ω moderate so Ω stays well conditioned
    let start = d - if pr.omega_is_free() { tri_len(data.r()) } else { 0 };
    for v in &mut theta[start..] {
        *v *= 0.5;
    }
    theta
}

/// Central finite differences of `ℓ(θ̃)`; transforms are rebuilt at every
/// perturbed point.
pub fn fd_gradient(data: &Dataset<f64>, pr: &Priors<f64>, method: TransformMethod, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[k] += h;
            dn[k] -= h;
            let fu = gradients::log_joint_at(data, pr, method, &up).unwrap();
            let fd = gradients::log_joint_at(data, pr, method, &dn).unwrap();
            (fu - fd) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic.iter().zip(fd).map(|(a, f)| (a - f).abs() / (1.0 + a.abs())).fold(0.0, f64::max)
}

/// Worst relative FD error over `cases` random configurations.
pub fn gradient_suite(family: Family, method: TransformMethod, r: usize, cases: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let data = random_dataset(&mut rng, family, 3, 2, r);
        let pr = random_wishart(&mut rng, r);
        let theta = random_theta(&mut rng, &data, &pr);
        let (_, analytic) = gradients::evaluate(&data, &pr, method, &theta).unwrap();
        let fd = fd_gradient(&data, &pr, method, &theta, 1e-5);
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    worst
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn columns(group: &str, trials: Option<&str>, fixed: &[&str], random: &[&str]) -> rvb::cli::ColumnSpec {
    rvb::cli::ColumnSpec {
        response: "y".into(),
        trials: trials.map(str::to_string),
        group: group.into(),
        fixed: fixed.iter().map(|s| s.to_string()).collect(),
        random: random.iter().map(|s| s.to_string()).collect(),
        intercept: rvb::cli::Intercept::Both,
    }
}

/// Epilepsy counts: model 1 is the random intercept model, model 2 adds a
/// random slope on the visit covariate.
pub fn epilepsy(model: u8) -> Dataset<f64> {
    let spec = match model {
        1 => columns("subject", None, &["base_log", "trt", "base_x_trt", "age_log_c", "v4"], &[]),
        _ => columns("subject", None, &["base_log", "trt", "base_x_trt", "age_log_c", "visit_c"], &["visit_c"]),
    };
    rvb::cli::load_csv(&fixture("epilepsy.csv"), Family::Poisson, &spec).unwrap()
}

pub fn seeds() -> Dataset<f64> {
    let spec = columns("plate", Some("m"), &["seed", "extract"], &[]);
    rvb::cli::load_csv(&fixture("seeds.csv"), Family::Binomial, &spec).unwrap()
}
