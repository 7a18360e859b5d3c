//! Command-line front end: CSV ingestion, simulation of synthetic datasets,
//! fit orchestration and result files.
//!
//! Output files are plain text. Numbers in summaries use nine significant
//! digits; state files store every value in shortest round-trip form so a
//! fitted state can be reloaded bit for bit.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};

use crate::engine::{self, FitConfig, FitResult, VariationalState};
use crate::error::{Result, RvbError};
use crate::family::{self, Family, Observation};
use crate::matcalc::{tri_len, LowerTriangular, SquareMatrix};
use crate::model::{self, Dataset, OmegaPrior, Priors, Subject};
use crate::posterior::{self, Moments, PosteriorSummary};
use crate::recombine::{self, GaussianFactor, ShardedFit};
use crate::reparam::TransformMethod;

const STATE_FORMAT: &str = "rvb-state-1";

#[derive(Parser, Debug)]
#[command(name = "rvb", version, about = "Reparametrized variational Bayes for GLMMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model to a long-format CSV file.
    Fit(RunConfig),
    /// Write a simulated random-intercept dataset.
    Simulate(SimulateArgs),
    /// Combine shard state files into one global posterior.
    Combine(CombineArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Intercept {
    X,
    Z,
    Both,
    None,
}

impl Intercept {
    fn in_x(self) -> bool {
        matches!(self, Intercept::X | Intercept::Both)
    }

    fn in_z(self) -> bool {
        matches!(self, Intercept::Z | Intercept::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PriorMode {
    /// Default conjugate Wishart prior built from a pooled GLM fit.
    Default,
    /// Independent normal priors on the entries of `ω`.
    NormalOmega,
    /// Prior read from `--prior-file`.
    File,
}

/// Column mapping for [`load_csv`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnSpec {
    pub response: String,
    pub trials: Option<String>,
    pub group: String,
    pub fixed: Vec<String>,
    pub random: Vec<String>,
    pub intercept: Intercept,
}

#[derive(Args, Clone, Debug)]
pub struct RunConfig {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub family: Family,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long)]
    pub trials_col: Option<String>,
    #[arg(long)]
    pub group_col: String,
    /// Comma-separated fixed-effect columns.
    #[arg(long, value_delimiter = ',')]
    pub fixed: Vec<String>,
    /// Comma-separated random-effect columns.
    #[arg(long, value_delimiter = ',')]
    pub random: Vec<String>,
    #[arg(long, value_enum, default_value = "both")]
    pub intercept: Intercept,
    #[arg(long, default_value = "a2")]
    pub method: TransformMethod,
    #[arg(long, value_enum, default_value = "default")]
    pub prior: PriorMode,
    #[arg(long)]
    pub prior_file: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    pub sigma_beta2: f64,
    /// Standard deviation of the normal prior on each entry of `ω`.
    #[arg(long, default_value_t = 10.0)]
    pub omega_sd: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    #[arg(long, default_value_t = 200_000)]
    pub max_iter: usize,
    /// Posterior draws for the summaries.
    #[arg(long, default_value_t = 50_000)]
    pub draws: usize,
    #[arg(long)]
    pub out: PathBuf,
}

impl RunConfig {
    pub fn columns(&self) -> ColumnSpec {
        ColumnSpec {
            response: self.response.clone(),
            trials: self.trials_col.clone(),
            group: self.group_col.clone(),
            fixed: self.fixed.clone(),
            random: self.random.clone(),
            intercept: self.intercept,
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub ni: usize,
    /// CSV destination; the generating values go to `<out>.truth`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct CombineArgs {
    /// Shard state files.
    #[arg(long, num_args = 1.., required = true)]
    pub states: Vec<PathBuf>,
    #[arg(long, default_value_t = 50_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit status for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(e: &RvbError) -> i32 {
    match e {
        RvbError::Config(_) | RvbError::InvalidV { .. } => 2,
        RvbError::Parse { .. }
        | RvbError::MissingColumn(_)
        | RvbError::InvalidResponse { .. }
        | RvbError::InvalidData(_)
        | RvbError::RankDeficient
        | RvbError::LengthMismatch { .. }
        | RvbError::Io(_) => 3,
        RvbError::Shard { source, .. } => exit_code(source),
        _ => 4,
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn main_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Fit(cfg) => run(cfg),
        Command::Simulate(args) => {
            let spec = SimSpec { n: args.n, n_i: args.ni, ..args.scenario.spec() };
            let sim = simulate_dataset(&spec, args.seed)?;
            write_simulation(&sim, &args.out)
        }
        Command::Combine(args) => run_combine(args),
    }
}

// ---------------------------------------------------------------- loading

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| RvbError::MissingColumn(name.to_string()))
}

fn parse_field(record: &csv::StringRecord, idx: usize, line: usize, name: &str) -> Result<f64> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| RvbError::Parse {
        line,
        message: format!("column '{name}': cannot read '{raw}' as a number"),
    })
}

/// Reads a long-format CSV file (one row per observation).
pub fn load_csv(path: &Path, family: Family, spec: &ColumnSpec) -> Result<Dataset<f64>> {
    let file = fs::File::open(path).map_err(|e| RvbError::Io(format!("{}: {e}", path.display())))?;
    load_csv_reader(file, family, spec)
}

/// [`load_csv`] over any reader. Rows are grouped by the group column in
/// order of first appearance; groups need not be contiguous.
pub fn load_csv_reader<R: Read>(reader: R, family: Family, spec: &ColumnSpec) -> Result<Dataset<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| RvbError::Parse { line: 1, message: e.to_string() })?.clone();
    let y_col = column(&headers, &spec.response)?;
    let g_col = column(&headers, &spec.group)?;
    let m_col = match (&spec.trials, family) {
        (Some(name), _) => Some(column(&headers, name)?),
        (None, Family::Binomial) => {
            return Err(RvbError::Config("binomial family needs --trials-col".into()));
        }
        (None, _) => None,
    };
    let x_cols = spec.fixed.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>>>()?;
    let z_cols = spec.random.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>>>()?;
    let p = x_cols.len() + usize::from(spec.intercept.in_x());
    let r = z_cols.len() + usize::from(spec.intercept.in_z());
    if r == 0 {
        return Err(RvbError::Config("no random effects: add --random or an intercept in Z".into()));
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            RvbError::Parse { line, message: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let y = parse_field(&record, y_col, line, &spec.response)?;
        let m = match m_col {
            Some(c) => parse_field(&record, c, line, spec.trials.as_deref().unwrap_or_default())?,
            None => 1.0,
        };
        if !family.validate(Observation::with_trials(y, m)) {
            return Err(RvbError::InvalidResponse { family: family.name(), line });
        }
        let mut x = Vec::with_capacity(p);
        if spec.intercept.in_x() {
            x.push(1.0);
        }
        for (&c, name) in x_cols.iter().zip(&spec.fixed) {
            x.push(parse_field(&record, c, line, name)?);
        }
        let mut z = Vec::with_capacity(r);
        if spec.intercept.in_z() {
            z.push(1.0);
        }
        for (&c, name) in z_cols.iter().zip(&spec.random) {
            z.push(parse_field(&record, c, line, name)?);
        }
        let label = record.get(g_col).unwrap_or("").trim().to_string();
        let gi = *groups.entry(label.clone()).or_insert_with(|| {
            order.push(label);
            rows.push(Default::default());
            rows.len() - 1
        });
        let entry = &mut rows[gi];
        entry.0.push(y);
        entry.1.push(m);
        entry.2.extend(x);
        entry.3.extend(z);
    }
    if rows.is_empty() {
        return Err(RvbError::InvalidData("no observations".into()));
    }
    let subjects = rows.into_iter().map(|(y, m, x, z)| Subject::new(y, m, x, z)).collect();
    let names = |intercept: bool, cols: &[String]| {
        let mut out = Vec::new();
        if intercept {
            out.push("(Intercept)".to_string());
        }
        out.extend(cols.iter().cloned());
        out
    };
    Dataset::new(family, p, r, subjects)?
        .with_names(names(spec.intercept.in_x(), &spec.fixed), names(spec.intercept.in_z(), &spec.random))?
        .with_group_labels(order)
}

// ------------------------------------------------------------- simulation

/// Covariate rule for the random-intercept simulations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Covariate {
    /// `x_ij = (j − 4) / 10` with `j` counted from one.
    Linear,
    /// `x_ij ~ Bernoulli(0.5)`.
    Coin,
}

/// Random-intercept model `η_ij = β₀ + β₁ x_ij + b_i`, `b_i ~ N(0, σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimSpec {
    pub family: Family,
    pub n: usize,
    pub n_i: usize,
    pub beta: [f64; 2],
    pub sigma: f64,
    pub covariate: Covariate,
    /// Trials per observation for the binomial family.
    pub trials: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    #[value(name = "poisson-1")]
    Poisson1,
    #[value(name = "poisson-2")]
    Poisson2,
    #[value(name = "bernoulli-1")]
    Bernoulli1,
    #[value(name = "bernoulli-2")]
    Bernoulli2,
    #[value(name = "binomial-1")]
    Binomial1,
    #[value(name = "binomial-2")]
    Binomial2,
}

impl Scenario {
    pub fn spec(self) -> SimSpec {
        let (family, beta, covariate) = match self {
            Scenario::Poisson1 => (Family::Poisson, [-2.5, -2.0], Covariate::Linear),
            Scenario::Poisson2 => (Family::Poisson, [1.5, 0.5], Covariate::Linear),
            Scenario::Bernoulli1 => (Family::Bernoulli, [-2.5, 4.5], Covariate::Coin),
            Scenario::Bernoulli2 => (Family::Bernoulli, [0.0, 1.0], Covariate::Linear),
            Scenario::Binomial1 => (Family::Binomial, [-2.5, 4.5], Covariate::Coin),
            Scenario::Binomial2 => (Family::Binomial, [0.0, 1.0], Covariate::Linear),
        };
        SimSpec { family, n: 500, n_i: 7, beta, sigma: 1.5, covariate, trials: 20 }
    }
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub data: Dataset<f64>,
    pub spec: SimSpec,
    /// Realized random intercepts.
    pub b: Vec<f64>,
}

pub fn simulate_dataset(spec: &SimSpec, seed: u64) -> Result<Simulation> {
    if spec.n == 0 || spec.n_i == 0 || !(spec.sigma > 0.0) {
        return Err(RvbError::Config("simulation needs n, n_i and sigma positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spec.sigma).map_err(|e| RvbError::Config(e.to_string()))?;
    let m = match spec.family {
        Family::Binomial => spec.trials.max(1),
        _ => 1,
    };
    let mut subjects = Vec::with_capacity(spec.n);
    let mut bs = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let b: f64 = normal.sample(&mut rng);
        bs.push(b);
        let (mut y, mut x) = (Vec::with_capacity(spec.n_i), Vec::with_capacity(2 * spec.n_i));
        for j in 0..spec.n_i {
            let xij = match spec.covariate {
                Covariate::Linear => (j as f64 + 1.0 - 4.0) / 10.0,
                Covariate::Coin => f64::from(u8::from(rng.random_bool(0.5))),
            };
            let eta = spec.beta[0] + spec.beta[1] * xij + b;
            let yij = match spec.family {
                Family::Poisson => {
                    let lambda = eta.exp();
                    Poisson::new(lambda).map_err(|e| RvbError::Config(e.to_string()))?.sample(&mut rng)
                }
                Family::Binomial | Family::Bernoulli => {
                    let dist = Binomial::new(m, family::logistic(eta)).map_err(|e| RvbError::Config(e.to_string()))?;
                    dist.sample(&mut rng) as f64
                }
                Family::GaussianUnit => eta + Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng),
            };
            y.push(yij);
            x.extend([1.0, xij]);
        }
        let z = vec![1.0; spec.n_i];
        subjects.push(Subject::new(y, vec![m as f64; spec.n_i], x, z));
    }
    let data = Dataset::new(spec.family, 2, 1, subjects)?
        .with_names(vec!["(Intercept)".into(), "x".into()], vec!["(Intercept)".into()])?;
    Ok(Simulation { data, spec: spec.clone(), b: bs })
}

/// Writes `subject,visit,x,y,m` rows and a `<path>.truth` record.
pub fn write_simulation(sim: &Simulation, path: &Path) -> Result<()> {
    let mut csv = String::from("subject,visit,x,y,m\n");
    for (i, s) in sim.data.subjects().iter().enumerate() {
        for j in 0..s.len() {
            writeln!(csv, "{},{},{},{},{}", i + 1, j + 1, s.x[2 * j + 1], s.y[j], s.trials[j]).expect("string write");
        }
    }
    write_file(path, &csv)?;
    let spec = &sim.spec;
    let mut truth = String::new();
    let mut kv = |k: &str, v: String| writeln!(truth, "{k} = {v}").expect("string write");
    kv("family", spec.family.to_string());
    kv("n", spec.n.to_string());
    kv("n_i", spec.n_i.to_string());
    kv("beta0", format!("{:e}", spec.beta[0]));
    kv("beta1", format!("{:e}", spec.beta[1]));
    kv("sigma", format!("{:e}", spec.sigma));
    kv("covariate", format!("{:?}", spec.covariate).to_lowercase());
    kv("trials", spec.trials.to_string());
    let b: Vec<String> = sim.b.iter().map(|v| format!("{v:e}")).collect();
    kv("b", b.join(","));
    let mut truth_path = path.as_os_str().to_owned();
    truth_path.push(".truth");
    write_file(Path::new(&truth_path), &truth)
}

// ----------------------------------------------------------------- priors

fn read_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| RvbError::Parse { line: k + 1, message: format!("expected 'key = value', got '{line}'") })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_list(value: &str, what: &str) -> Result<Vec<f64>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| RvbError::Config(format!("bad number '{v}' in {what}"))))
        .collect()
}

/// Prior from a key-value file. Recognized keys: `sigma_beta2`; then either
/// `nu` with `s` (row-major `r × r`), `omega_sd`, or a fixed `omega`.
pub fn parse_prior_file(text: &str, r: usize) -> Result<Priors<f64>> {
    let kv: HashMap<String, String> = read_key_values(text)?.into_iter().collect();
    let num = |k: &str| -> Result<Option<f64>> {
        kv.get(k)
            .map(|v| v.parse::<f64>().map_err(|_| RvbError::Config(format!("bad value for {k}: '{v}'"))))
            .transpose()
    };
    let sigma_beta2 = num("sigma_beta2")?.unwrap_or(100.0);
    if !(sigma_beta2 > 0.0) {
        return Err(RvbError::Config("sigma_beta2 must be positive".into()));
    }
    if let Some(nu) = num("nu")? {
        let s = parse_list(kv.get("s").map(String::as_str).unwrap_or(""), "s")?;
        if s.len() != r * r {
            return Err(RvbError::Config(format!("prior scale needs {} entries, got {}", r * r, s.len())));
        }
        let s = SquareMatrix::from_fn(r, |i, j| s[i * r + j]);
        return Priors::wishart(sigma_beta2, nu, s);
    }
    if let Some(sd) = num("omega_sd")? {
        if !(sd > 0.0) {
            return Err(RvbError::Config("omega_sd must be positive".into()));
        }
        return Ok(Priors::normal_omega(sigma_beta2, r, sd));
    }
    if let Some(v) = kv.get("omega") {
        let omega = parse_list(v, "omega")?;
        if omega.len() != tri_len(r) {
            return Err(RvbError::Config(format!("fixed omega needs {} entries", tri_len(r))));
        }
        return Ok(Priors::fixed_omega(sigma_beta2, omega));
    }
    Err(RvbError::Config("prior file needs nu and s, omega_sd, or omega".into()))
}

fn build_prior(cfg: &RunConfig, data: &Dataset<f64>) -> Result<Priors<f64>> {
    if !(cfg.sigma_beta2 > 0.0) {
        return Err(RvbError::Config("sigma_beta2 must be positive".into()));
    }
    match cfg.prior {
        PriorMode::Default => model::default_prior(data, cfg.sigma_beta2),
        PriorMode::NormalOmega => {
            if !(cfg.omega_sd > 0.0) {
                return Err(RvbError::Config("omega_sd must be positive".into()));
            }
            Ok(Priors::normal_omega(cfg.sigma_beta2, data.r(), cfg.omega_sd))
        }
        PriorMode::File => {
            let path = cfg.prior_file.as_ref().ok_or_else(|| RvbError::Config("--prior file needs --prior-file".into()))?;
            let text = fs::read_to_string(path).map_err(|e| RvbError::Config(format!("{}: {e}", path.display())))?;
            parse_prior_file(&text, data.r())
        }
    }
}

// ---------------------------------------------------------------- output

/// Nine significant digits, locale independent.
pub fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RvbError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| RvbError::Io(format!("{}: {e}", path.display())))
}

/// Parameter labels `(β names, ω labels, σ labels, ρ labels)`.
fn labels(data: &Dataset<f64>, pr: &Priors<f64>) -> (Vec<String>, Vec<String>, Vec<String>, Vec<String>) {
    let r = data.r();
    let beta = data.fixed_names().iter().map(|n| format!("beta[{n}]")).collect();
    let mut omega = Vec::new();
    if pr.omega_is_free() {
        for j in 0..r {
            for i in j..r {
                omega.push(format!("omega[{},{}]", i + 1, j + 1));
            }
        }
    }
    let names = data.random_names();
    let sigma = names.iter().map(|n| format!("sigma[{n}]")).collect();
    let mut rho = Vec::new();
    for j in 0..r {
        for i in j + 1..r {
            rho.push(format!("rho[{},{}]", names[i], names[j]));
        }
    }
    (beta, omega, sigma, rho)
}

fn push_moments(out: &mut String, names: &[String], moments: &[Moments<f64>]) {
    for (name, m) in names.iter().zip(moments) {
        writeln!(out, "{name}.mean = {}", fmt9(m.mean)).expect("string write");
        writeln!(out, "{name}.sd = {}", fmt9(m.sd)).expect("string write");
    }
}

/// Summary file text for a single fit.
pub fn summary_text(
    data: &Dataset<f64>,
    pr: &Priors<f64>,
    fit: &FitResult<f64>,
    post: &PosteriorSummary<f64>,
) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
    kv("family", data.family().to_string());
    kv("method", fit.method.tag().to_string());
    kv("subjects", data.n().to_string());
    kv("observations", data.n_obs().to_string());
    kv("iterations", fit.iterations.to_string());
    kv("converged", (!fit.max_iter_reached).to_string());
    kv("elbo", fmt9(fit.elbo));
    kv("elbo_se", fmt9(fit.elbo_se));
    kv("draws", post.draws.to_string());
    kv("rejected_draws", post.rejected.to_string());
    let (beta, omega, sigma, rho) = labels(data, pr);
    let globals: Vec<String> = beta.into_iter().chain(omega).collect();
    push_moments(&mut out, &globals, &post.global);
    push_moments(&mut out, &sigma, &post.sigma);
    push_moments(&mut out, &rho, &post.rho);
    out
}

pub fn trace_text(trace: &[f64]) -> String {
    let mut out = String::from("window,mean_elbo\n");
    for (k, v) in trace.iter().enumerate() {
        writeln!(out, "{},{}", k + 1, fmt9(*v)).expect("string write");
    }
    out
}

/// Per-subject diagnostics: posterior mean and sd of `b̃ᵢ` and `bᵢ`.
pub fn subjects_text(data: &Dataset<f64>, post: &PosteriorSummary<f64>, shard: Option<usize>) -> String {
    let mut out = String::new();
    if shard.is_some() {
        out.push_str("shard,");
    }
    out.push_str("group,effect,b_mean,b_sd,btilde_mean,btilde_sd\n");
    push_subject_rows(&mut out, data, post, shard);
    out
}

fn push_subject_rows(out: &mut String, data: &Dataset<f64>, post: &PosteriorSummary<f64>, shard: Option<usize>) {
    for (i, label) in data.group_labels().iter().enumerate() {
        for (k, name) in data.random_names().iter().enumerate() {
            if let Some(s) = shard {
                write!(out, "{s},").expect("string write");
            }
            let (b, bt) = (post.b[i][k], post.b_tilde[i][k]);
            writeln!(out, "{label},{name},{},{},{},{}", fmt9(b.mean), fmt9(b.sd), fmt9(bt.mean), fmt9(bt.sd))
                .expect("string write");
        }
    }
}

fn prior_header(pr: &Priors<f64>) -> Vec<(String, String)> {
    let mut out = vec![("sigma_beta2".to_string(), format!("{:e}", pr.sigma_beta2))];
    match &pr.omega {
        OmegaPrior::Wishart { nu, s, .. } => {
            out.push(("prior".into(), "wishart".into()));
            out.push(("nu".into(), format!("{nu:e}")));
            let r = s.order();
            let vals: Vec<String> = (0..r * r).map(|k| format!("{:e}", s.get(k / r, k % r))).collect();
            out.push(("s".into(), vals.join(",")));
        }
        OmegaPrior::Normal { mean, sd } => {
            out.push(("prior".into(), "normal-omega".into()));
            out.push(("omega_sd".into(), format!("{sd:e}")));
            let vals: Vec<String> = mean.iter().map(|v| format!("{v:e}")).collect();
            out.push(("omega_mean".into(), vals.join(",")));
        }
        OmegaPrior::Fixed(omega) => {
            out.push(("prior".into(), "fixed".into()));
            let vals: Vec<String> = omega.iter().map(|v| format!("{v:e}")).collect();
            out.push(("omega".into(), vals.join(",")));
        }
    }
    out
}

/// Everything needed to resume simulation or recombination from a fit.
#[derive(Clone, Debug, PartialEq)]
pub struct StateFile {
    pub family: Family,
    pub method: TransformMethod,
    pub p: usize,
    pub r: usize,
    pub priors: Priors<f64>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub state: VariationalState<f64>,
}

impl StateFile {
    pub fn new(data: &Dataset<f64>, pr: &Priors<f64>, method: TransformMethod, state: VariationalState<f64>) -> Self {
        Self {
            family: data.family(),
            method,
            p: data.p(),
            r: data.r(),
            priors: pr.clone(),
            fixed_names: data.fixed_names().to_vec(),
            random_names: data.random_names().to_vec(),
            state,
        }
    }

    /// Key-value header, a `---` line, then `kind,block,index,value` rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &str| writeln!(out, "{k} = {v}").expect("string write");
        kv("format", STATE_FORMAT);
        kv("family", self.family.name());
        kv("method", self.method.tag());
        kv("p", &self.p.to_string());
        kv("r", &self.r.to_string());
        for (k, v) in prior_header(&self.priors) {
            kv(&k, &v);
        }
        kv("fixed_names", &self.fixed_names.join(","));
        kv("random_names", &self.random_names.join(","));
        kv("dim", &self.state.dim().to_string());
        kv("blocks", &self.state.blocks().len().to_string());
        out.push_str("---\nkind,block,index,value\n");
        let mut at = 0;
        for (k, b) in self.state.blocks().iter().enumerate() {
            for i in 0..b.order() {
                writeln!(out, "mu,{k},{i},{:e}", self.state.mu()[at + i]).expect("string write");
            }
            at += b.order();
        }
        for (k, b) in self.state.blocks().iter().enumerate() {
            for (i, v) in b.packed().iter().enumerate() {
                writeln!(out, "c,{k},{i},{v:e}").expect("string write");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (head, body) = text
            .split_once("\n---\n")
            .ok_or_else(|| RvbError::Parse { line: 0, message: "state file lacks the '---' separator".into() })?;
        let kv: HashMap<String, String> = read_key_values(head)?.into_iter().collect();
        let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| RvbError::MissingColumn(k.to_string()));
        if get("format")? != STATE_FORMAT {
            return Err(RvbError::InvalidData("unknown state file format".into()));
        }
        let count = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| RvbError::InvalidData(format!("bad count for {k}")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| RvbError::InvalidData(format!("bad number for {k}")))
        };
        let family: Family = get("family")?.parse()?;
        let method: TransformMethod = get("method")?.parse()?;
        let (p, r) = (count("p")?, count("r")?);
        let sigma_beta2 = float("sigma_beta2")?;
        let priors = match get("prior")? {
            "wishart" => {
                let s = parse_list(get("s")?, "s")?;
                if s.len() != r * r {
                    return Err(RvbError::InvalidData("prior scale has the wrong size".into()));
                }
                Priors::wishart(sigma_beta2, float("nu")?, SquareMatrix::from_fn(r, |i, j| s[i * r + j]))?
            }
            "normal-omega" => Priors {
                sigma_beta2,
                omega: OmegaPrior::Normal { mean: parse_list(get("omega_mean")?, "omega_mean")?, sd: float("omega_sd")? },
            },
            "fixed" => Priors::fixed_omega(sigma_beta2, parse_list(get("omega")?, "omega")?),
            other => return Err(RvbError::InvalidData(format!("unknown prior '{other}'"))),
        };
        let split = |k: &str| -> Result<Vec<String>> {
            Ok(get(k)?.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect())
        };
        let n_blocks = count("blocks")?;
        let mut mu: Vec<Vec<f64>> = vec![Vec::new(); n_blocks];
        let mut c: Vec<Vec<f64>> = vec![Vec::new(); n_blocks];
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        for record in rdr.records() {
            let record = record.map_err(|e| RvbError::Parse { line: 0, message: e.to_string() })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let bad = || RvbError::Parse { line, message: "malformed state row".into() };
            let block: usize = record.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let value: f64 = record.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let target = match record.get(0) {
                Some("mu") => &mut mu,
                Some("c") => &mut c,
                _ => return Err(bad()),
            };
            target.get_mut(block).ok_or_else(bad)?.push(value);
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for (m, packed) in mu.iter().zip(c) {
            blocks.push(LowerTriangular::from_packed(m.len(), packed)?);
        }
        let state = VariationalState::from_parts(mu.concat(), blocks)?;
        if state.dim() != count("dim")? {
            return Err(RvbError::InvalidData("state dimension does not match its header".into()));
        }
        Ok(Self {
            family,
            method,
            p,
            r,
            priors,
            fixed_names: split("fixed_names")?,
            random_names: split("random_names")?,
            state,
        })
    }
}

// -------------------------------------------------------------------- run

fn fit_config(cfg: &RunConfig) -> FitConfig {
    FitConfig { max_iter: cfg.max_iter, ..FitConfig::new(cfg.method, cfg.seed) }
}

/// Runs a fit as described by `cfg` and writes the result files into
/// `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<()> {
    if cfg.shards == 0 {
        return Err(RvbError::InvalidV { v: 0, n: 0 });
    }
    if cfg.draws == 0 {
        return Err(RvbError::Config("--draws must be positive".into()));
    }
    let data = load_csv(&cfg.data, cfg.family, &cfg.columns())?;
    let pr = build_prior(cfg, &data)?;
    if cfg.shards > data.n() {
        return Err(RvbError::InvalidV { v: cfg.shards, n: data.n() });
    }
    let config = fit_config(cfg);
    if cfg.shards == 1 {
        let fit = engine::fit(&data, &pr, &config)?;
        let post = posterior::summarize(&data, &pr, &fit.state, cfg.method, cfg.draws, cfg.seed)?;
        warn_rejections(&post);
        let out = &cfg.out;
        write_file(&out.join("summary.txt"), &summary_text(&data, &pr, &fit, &post))?;
        write_file(&out.join("timing.txt"), &timing_text(&[fit.wall_time.as_secs_f64()]))?;
        write_file(&out.join("trace.csv"), &trace_text(&fit.trace))?;
        write_file(&out.join("subjects.csv"), &subjects_text(&data, &post, None))?;
        let state = StateFile::new(&data, &pr, cfg.method, fit.state);
        write_file(&out.join("state.txt"), &state.to_text())?;
        Ok(())
    } else {
        if matches!(pr.omega, OmegaPrior::Wishart { .. }) {
            return Err(RvbError::Config("sharded fits need --prior normal-omega or a normal prior file".into()));
        }
        let sharded = recombine::fit_sharded(&data, &pr, &config, cfg.shards, cfg.seed)?;
        write_sharded(cfg, &data, &pr, &sharded)
    }
}

fn warn_rejections(post: &PosteriorSummary<f64>) {
    if post.rejection_rate() > 0.01 {
        eprintln!(
            "warning: {} of {} posterior draws were rejected as numerically invalid",
            post.rejected,
            post.draws + post.rejected
        );
    }
}

fn timing_text(seconds: &[f64]) -> String {
    let mut out = String::new();
    for (k, s) in seconds.iter().enumerate() {
        writeln!(out, "wall_time_s[{k}] = {s:.3}").expect("string write");
    }
    out
}

/// `σ` and `ρ` moments under a Gaussian on `θ_G`, by simulation.
pub fn global_scale_moments(
    factor: &GaussianFactor<f64>,
    p: usize,
    r: usize,
    pr: &Priors<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<(Vec<Moments<f64>>, Vec<Moments<f64>>)> {
    let chol = crate::matcalc::cholesky(factor.cov())?;
    let state = VariationalState::from_parts(factor.mean().to_vec(), vec![chol])?;
    let sigma_rho: Vec<(Vec<f64>, Vec<f64>)> = (0..n_draws as u64)
        .map(|k| {
            let s = engine::standard_normal::<f64>(seed ^ 0x51a5, k, state.dim());
            let theta = state.sample(&s);
            let gp = model::GlobalParams::from_flat(&theta, p, r, pr)?;
            Ok(posterior::scale_params(&gp))
        })
        .collect::<Result<_>>()?;
    let moments = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, len: usize| -> Vec<Moments<f64>> {
        (0..len)
            .map(|k| {
                let vals: Vec<f64> = sigma_rho.iter().map(|d| pick(d)[k]).collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                Moments { mean, sd: var.sqrt() }
            })
            .collect()
    };
    Ok((moments(&|d| &d.0, r), moments(&|d| &d.1, r * r.saturating_sub(1) / 2)))
}

fn combined_summary_text(
    data: &Dataset<f64>,
    pr: &Priors<f64>,
    method: TransformMethod,
    combined: &GaussianFactor<f64>,
    shard_elbos: &[f64],
    draws: usize,
    seed: u64,
) -> Result<String> {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
    kv("family", data.family().to_string());
    kv("method", method.tag().to_string());
    kv("shards", shard_elbos.len().to_string());
    for (k, e) in shard_elbos.iter().enumerate() {
        kv(&format!("elbo[shard {k}]"), fmt9(*e));
    }
    kv("draws", draws.to_string());
    let (beta, omega, sigma, rho) = labels(data, pr);
    let globals: Vec<String> = beta.into_iter().chain(omega).collect();
    let moments: Vec<Moments<f64>> = combined
        .mean()
        .iter()
        .zip(combined.cov().diag())
        .map(|(&mean, var)| Moments { mean, sd: var.sqrt() })
        .collect();
    push_moments(&mut out, &globals, &moments);
    let (s, rh) = global_scale_moments(combined, data.p(), data.r(), pr, draws, seed)?;
    push_moments(&mut out, &sigma, &s);
    push_moments(&mut out, &rho, &rh);
    Ok(out)
}

fn write_sharded(cfg: &RunConfig, data: &Dataset<f64>, pr: &Priors<f64>, sharded: &ShardedFit<f64>) -> Result<()> {
    let out = &cfg.out;
    let mut subjects = String::from("shard,group,effect,b_mean,b_sd,btilde_mean,btilde_sd\n");
    let mut times = Vec::new();
    for (k, shard) in sharded.shards.iter().enumerate() {
        let seed = recombine::shard_seed(cfg.seed, k);
        let post = posterior::summarize(&shard.data, pr, &shard.fit.state, cfg.method, cfg.draws, seed)?;
        warn_rejections(&post);
        push_subject_rows(&mut subjects, &shard.data, &post, Some(k));
        write_file(&out.join(format!("trace_shard{k}.csv")), &trace_text(&shard.fit.trace))?;
        let state = StateFile::new(&shard.data, pr, cfg.method, shard.fit.state.clone());
        write_file(&out.join(format!("state_shard{k}.txt")), &state.to_text())?;
        times.push(shard.fit.wall_time.as_secs_f64());
    }
    let summary =
        combined_summary_text(data, pr, cfg.method, &sharded.combined, &sharded.shard_elbos(), cfg.draws, cfg.seed)?;
    write_file(&out.join("summary.txt"), &summary)?;
    write_file(&out.join("timing.txt"), &timing_text(&times))?;
    write_file(&out.join("subjects.csv"), &subjects)
}

/// Offline recombination of shard state files.
pub fn run_combine(args: &CombineArgs) -> Result<()> {
    let states = args
        .states
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| RvbError::Io(format!("{}: {e}", p.display())))?;
            StateFile::from_text(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &states[0];
    if states.iter().any(|s| {
        (s.family, s.method, s.p, s.r, &s.priors, &s.fixed_names) != (first.family, first.method, first.p, first.r, &first.priors, &first.fixed_names)
    }) {
        return Err(RvbError::Config("state files come from different models or priors".into()));
    }
    let factors = states
        .iter()
        .map(|s| {
            let (mu, c) = s.state.global_block();
            GaussianFactor::new(mu.to_vec(), c.gram())
        })
        .collect::<Result<Vec<_>>>()?;
    let prior = GaussianFactor::from_prior(&first.priors, first.p)?;
    let combined = recombine::combine(&factors, &prior)?;
    // names only; the combined summary needs no observations
    let dummy = Dataset::new(
        first.family,
        first.p,
        first.r,
        vec![Subject::new(vec![0.0], vec![1.0], vec![0.0; first.p], vec![0.0; first.r])],
    )?
    .with_names(first.fixed_names.clone(), first.random_names.clone())?;
    let summary = combined_summary_text(&dummy, &first.priors, first.method, &combined, &[], args.draws, args.seed)?;
    write_file(&args.out.join("summary.txt"), &summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeds_spec() -> ColumnSpec {
        ColumnSpec {
            response: "y".into(),
            trials: Some("m".into()),
            group: "plate".into(),
            fixed: vec!["seed".into(), "extract".into()],
            random: vec![],
            intercept: Intercept::Both,
        }
    }

    #[test]
    fn groups_need_not_be_contiguous() {
        let csv = "g,y,x\nb,1,0.5\na,0,1\nb,2,1.5\n";
        let spec = ColumnSpec {
            response: "y".into(),
            trials: None,
            group: "g".into(),
            fixed: vec!["x".into()],
            random: vec![],
            intercept: Intercept::Both,
        };
        let d = load_csv_reader(csv.as_bytes(), Family::Poisson, &spec).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.group_labels(), &["b".to_string(), "a".to_string()]);
        assert_eq!(d.subject(0).y, vec![1.0, 2.0]);
        assert_eq!(d.subject(0).x, vec![1.0, 0.5, 1.0, 1.5]);
        assert_eq!(d.fixed_names(), &["(Intercept)".to_string(), "x".to_string()]);
    }

    #[test]
    fn load_errors() {
        let spec = ColumnSpec {
            response: "y".into(),
            trials: None,
            group: "g".into(),
            fixed: vec![],
            random: vec![],
            intercept: Intercept::Both,
        };
        let bad = load_csv_reader("g,y\n1,2\n1,-1\n".as_bytes(), Family::Poisson, &spec);
        assert!(matches!(bad, Err(RvbError::InvalidResponse { family: "poisson", line: 3 })));
        let bad = load_csv_reader("g,y\n1,abc\n".as_bytes(), Family::Poisson, &spec);
        assert!(matches!(bad, Err(RvbError::Parse { line: 2, .. })));
        let bad = load_csv_reader("g,z\n1,2\n".as_bytes(), Family::Poisson, &spec);
        assert!(matches!(bad, Err(RvbError::MissingColumn(c)) if c == "y"));
        let mut s = seeds_spec();
        s.trials = None;
        let bad = load_csv_reader("plate,y,m,seed,extract\n1,1,2,0,0\n".as_bytes(), Family::Binomial, &s);
        assert!(matches!(bad, Err(RvbError::Config(_))));
    }

    #[test]
    fn prior_file_variants() {
        let pr = parse_prior_file("sigma_beta2 = 50\nnu = 3\ns = 2, 0.1, 0.1, 1\n", 2).unwrap();
        assert_eq!(pr.sigma_beta2, 50.0);
        assert!(matches!(pr.omega, OmegaPrior::Wishart { nu, .. } if nu == 3.0));
        let pr = parse_prior_file("omega_sd = 10\n", 1).unwrap();
        assert!(matches!(pr.omega, OmegaPrior::Normal { sd, .. } if sd == 10.0));
        let pr = parse_prior_file("# known\nomega = 0.5\n", 1).unwrap();
        assert_eq!(pr.omega, OmegaPrior::Fixed(vec![0.5]));
        assert!(parse_prior_file("nu = 3\ns = 1\n", 2).is_err());
        assert!(parse_prior_file("sigma_beta2 = 1\n", 1).is_err());
    }

    #[test]
    fn number_format_is_stable() {
        assert_eq!(fmt9(0.1), "1.00000000e-1");
        assert_eq!(fmt9(-1234.5678912), "-1.23456789e3");
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = Scenario::Binomial1.spec();
        let a = simulate_dataset(&spec, 4).unwrap();
        let b = simulate_dataset(&spec, 4).unwrap();
        assert_eq!(a.data, b.data);
        assert!(a.data.subjects().iter().all(|s| s.trials.iter().all(|&m| m == 20.0)));
        assert_eq!(a.data.n(), 500);
        assert_eq!(a.data.n_obs(), 3500);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&RvbError::Config("x".into())), 2);
        assert_eq!(exit_code(&RvbError::InvalidV { v: 9, n: 3 }), 2);
        assert_eq!(exit_code(&RvbError::InvalidResponse { family: "poisson", line: 2 }), 3);
        assert_eq!(exit_code(&RvbError::Diverged { iteration: 1, reason: String::new() }), 4);
        let shard = RvbError::Shard { index: 1, source: Box::new(RvbError::Diverged { iteration: 1, reason: String::new() }) };
        assert_eq!(exit_code(&shard), 4);
    }
}
