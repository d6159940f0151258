//! Synthetic benchmark harness: true-parameter generators, data simulation,
//! estimation and structure-recovery metrics, the Gaussian closed-form
//! validation suite, a matched-budget Gibbs comparator, and table drivers
//! that orchestrate generate, fit, and score across replications.
//!
//! Every driver is seed-deterministic end to end; rerunning with the same
//! arguments reproduces each number bit for bit. Timing fields are the one
//! exception, and the matched-clock comparison derives its sweep budget from
//! measured time, so only its inputs (not its budget) are reproducible.

use crate::bayes::{self, HmcConfig, PriorSpec};
use crate::boltzmann::{self, Mask, TrainConfig};
use crate::enumeration;
use crate::error::{PegmError, Result};
use crate::importance;
use crate::model::{self, DataMatrix, ModelFamily, ThetaMatrix};
use crate::optimize::{self, FitConfig};
use crate::pseudo;
use crate::rng::{mix, mix2, stream};
use crate::sampler::{self, accept_reject_sample, gibbs_sample, sample_independence};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use std::time::Instant;

pub const GIBBS_BURN_IN: usize = 2000;
pub const GIBBS_THIN: usize = 10;
/// Rejection-sampler budget per requested row before falling back to Gibbs.
const ACCEPT_REJECT_TRIES_PER_ROW: usize = 200;
/// Attempt cap for the covariance-resampling design.
const MIXED_DESIGN_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Setting {
    Ld,
    Hd,
    Uhd,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Ld => "ld",
            Setting::Hd => "hd",
            Setting::Uhd => "uhd",
        }
    }
}

/// One simulation cell: the family, dimensions, and the edge-generation law
/// (each interaction is nonzero with probability `sparsity`, and nonzero
/// entries equal `magnitude`).
#[derive(Clone, Debug, serde::Serialize)]
pub struct SimDesign {
    pub setting: Setting,
    pub family: ModelFamily,
    pub p: usize,
    pub n: usize,
    pub sparsity: f64,
    pub magnitude: f64,
    pub seed: u64,
    pub replications: usize,
}

impl SimDesign {
    /// The standard grid: low-dimensional (p=3, n=100, dense mild edges),
    /// high-dimensional (p=20, n=100, sparse strong edges), and ultra
    /// high-dimensional (p=100, n=2p, sparse strong edges).
    pub fn for_setting(setting: Setting, family: ModelFamily, seed: u64) -> SimDesign {
        let (p, n, sparsity, magnitude) = match setting {
            Setting::Ld => (3, 100, 0.9, -0.8),
            Setting::Hd => (20, 100, 0.05, -3.0),
            Setting::Uhd => (100, 200, 0.05, -3.0),
        };
        SimDesign {
            setting,
            family,
            p,
            n,
            sparsity,
            magnitude,
            seed,
            replications: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(PegmError::contract("sparsity must lie in [0, 1]"));
        }
        if !self.magnitude.is_finite() {
            return Err(PegmError::contract("magnitude must be finite"));
        }
        if self.p < 2 || self.n == 0 || self.replications == 0 {
            return Err(PegmError::contract(
                "need p >= 2, n >= 1, replications >= 1",
            ));
        }
        match self.family {
            ModelFamily::PoissonGm if self.magnitude > 0.0 => Err(PegmError::infeasible(
                "count-family interactions must be nonpositive",
            )),
            ModelFamily::GaussianOracle => Err(PegmError::contract(
                "zero-diagonal designs are not positive definite; use the oracle designs",
            )),
            _ => Ok(()),
        }
    }
}

/// Random true parameter: each interaction independently nonzero with the
/// design's sparsity and equal to its magnitude; diagonal zero. Feasible for
/// both discrete families whenever the magnitude is nonpositive.
pub fn generate_theta0(design: &SimDesign) -> Result<ThetaMatrix> {
    design.validate()?;
    let p = design.p;
    let mut rng = stream(mix(design.seed, 0x7E7A));
    let mut theta = ThetaMatrix::zeros(p);
    for j in 0..p {
        for k in (j + 1)..p {
            if rng.random::<f64>() < design.sparsity {
                theta.set(j, k, design.magnitude);
            }
        }
    }
    Ok(theta)
}

/// Synthetic dataset from the model: the count family first tries the exact
/// rejection sampler (its weights are bounded by one) and falls back to a
/// long-burn-in Gibbs chain only when rejection runs out of tries; everything
/// else goes straight to Gibbs with burn-in 2000 and thinning 10.
pub fn generate_data(
    family: ModelFamily,
    theta0: &ThetaMatrix,
    n: usize,
    seed: u64,
) -> Result<DataMatrix> {
    if family == ModelFamily::PoissonGm {
        let tries = ACCEPT_REJECT_TRIES_PER_ROW.saturating_mul(n.max(1));
        match accept_reject_sample(family, theta0, n, tries, mix(seed, 0xDA7A)) {
            Ok(ar) => return Ok(ar.data),
            Err(PegmError::AcceptRejectExhausted { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    gibbs_sample(family, theta0, n, GIBBS_BURN_IN, GIBBS_THIN, mix(seed, 0xDA7B))
}

/// Matthews correlation between the off-diagonal supports of two parameters,
/// over unordered node pairs. Degenerate confusion tables (any zero marginal)
/// return 0.
pub fn mcc(graph_true: &ThetaMatrix, graph_hat: &ThetaMatrix) -> f64 {
    assert_eq!(
        graph_true.p(),
        graph_hat.p(),
        "mcc compares graphs on the same node set"
    );
    let p = graph_true.p();
    let (mut tp, mut tn, mut fp, mut fne) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for j in 0..p {
        for k in (j + 1)..p {
            let t = graph_true.get(j, k) != 0.0;
            let h = graph_hat.get(j, k) != 0.0;
            match (t, h) {
                (true, true) => tp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fne += 1.0,
            }
        }
    }
    let den = ((tp + fp) * (tp + fne) * (tn + fp) * (tn + fne)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fne) / den
    }
}

fn support_from_edges(p: usize, edges: &[(usize, usize)]) -> ThetaMatrix {
    let mut t = ThetaMatrix::zeros(p);
    for &(j, k) in edges {
        t.set(j, k, 1.0);
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GgmDesign {
    /// Dense precision: covariance with diagonal 2 and uniform(-0.6, 0.6)
    /// off-diagonals, resampled until the precision satisfies the estimator's
    /// second-moment condition.
    MixedCovariance,
    /// Sparse precision: diagonal 3, first off-diagonal band 0.3.
    BandGraph,
}

impl GgmDesign {
    pub fn name(self) -> &'static str {
        match self {
            GgmDesign::MixedCovariance => "mixed-covariance",
            GgmDesign::BandGraph => "band-graph",
        }
    }
}

/// Precision matrix for one oracle design. The band design is deterministic;
/// the mixed design resamples covariances until positive definiteness and the
/// second-moment condition both hold.
pub fn ggm_design_theta(design: GgmDesign, p: usize, seed: u64) -> Result<ThetaMatrix> {
    if p < 2 {
        return Err(PegmError::contract("oracle designs need p >= 2"));
    }
    match design {
        GgmDesign::BandGraph => {
            let mut theta = ThetaMatrix::zeros(p);
            for j in 0..p {
                theta.set(j, j, 3.0);
                if j + 1 < p {
                    theta.set(j, j + 1, 0.3);
                }
            }
            Ok(theta)
        }
        GgmDesign::MixedCovariance => {
            let mut rng = stream(mix(seed, 0x515A));
            for _ in 0..MIXED_DESIGN_ATTEMPTS {
                let mut sigma = nalgebra::DMatrix::from_element(p, p, 0.0);
                for j in 0..p {
                    sigma[(j, j)] = 2.0;
                    for k in (j + 1)..p {
                        let v = rng.random_range(-0.6..0.6);
                        sigma[(j, k)] = v;
                        sigma[(k, j)] = v;
                    }
                }
                let Some(chol) = sigma.clone().cholesky() else {
                    continue;
                };
                let inv = chol.inverse();
                let mut values = Array2::zeros((p, p));
                for j in 0..p {
                    values[[j, j]] = inv[(j, j)];
                    for k in (j + 1)..p {
                        let v = 0.5 * (inv[(j, k)] + inv[(k, j)]);
                        values[[j, k]] = v;
                        values[[k, j]] = v;
                    }
                }
                let theta = ThetaMatrix::new(values)?;
                if model::is_feasible(ModelFamily::GaussianOracle, &theta)
                    && model::variance_condition(ModelFamily::GaussianOracle, &theta, 0.0)
                {
                    return Ok(theta);
                }
            }
            Err(PegmError::domain(
                "no admissible mixed-covariance draw within the attempt budget",
            ))
        }
    }
}

/// One replication of the oracle metrics at one Monte Carlo size.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct GgmRow {
    pub n_mc: usize,
    pub replication: usize,
    /// Squared error of the normalizer-ratio estimate.
    pub se_z: f64,
    /// Frobenius error of the gradient-of-ratio estimate, divided by p^2.
    pub fr_grad_z: f64,
    /// Frobenius error of the gradient-of-log estimate, divided by p^2.
    pub fr_grad_log_z: f64,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct GgmMetrics {
    pub n_mc: usize,
    pub se_z_mean: f64,
    pub se_z_sd: f64,
    pub fr_grad_z_mean: f64,
    pub fr_grad_z_sd: f64,
    pub fr_grad_log_z_mean: f64,
    pub fr_grad_log_z_sd: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GgmReport {
    pub design: String,
    pub p: usize,
    pub replications: usize,
    pub seed: u64,
    pub rows: Vec<GgmRow>,
    pub summaries: Vec<GgmMetrics>,
    pub runtime_ms: u64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let r = values.len();
    let mean = values.iter().sum::<f64>() / r as f64;
    if r < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1) as f64;
    (mean, var.sqrt())
}

fn scaled_frobenius(a: &Array2<f64>, b: &Array2<f64>, p: usize) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    d.sqrt() / (p * p) as f64
}

/// Closed-form validation of the estimators on the Gaussian family: for each
/// Monte Carlo size, R independent batches are scored against the exact
/// normalizer ratio and gradients. The exact references are self-checked
/// (theta times its inverse within 1e-10 of identity) before any estimation.
pub fn ggm_oracle_suite(
    design: GgmDesign,
    p: usize,
    n_list: &[usize],
    replications: usize,
    seed: u64,
) -> Result<GgmReport> {
    if n_list.is_empty() || replications == 0 {
        return Err(PegmError::contract(
            "need at least one Monte Carlo size and one replication",
        ));
    }
    let started = Instant::now();
    let theta = ggm_design_theta(design, p, mix(seed, 0x66D0))?;

    let dense = model::to_nalgebra(&theta);
    let inv = dense
        .clone()
        .try_inverse()
        .ok_or_else(|| PegmError::domain("oracle precision is numerically singular"))?;
    let product = &dense * &inv;
    for j in 0..p {
        for k in 0..p {
            let target = if j == k { 1.0 } else { 0.0 };
            if (product[(j, k)] - target).abs() > 1e-10 {
                return Err(PegmError::domain(
                    "inverse self-check failed beyond 1e-10; refusing to score against it",
                ));
            }
        }
    }

    let family = ModelFamily::GaussianOracle;
    let phi = theta.diag_part();
    let true_ratio =
        (enumeration::gaussian_log_z(&theta)? - enumeration::gaussian_log_z(&phi)?).exp();
    let true_grad_log = enumeration::gaussian_grad_log_z(&theta)?;
    let true_grad_ratio = true_grad_log.mapv(|g| g * true_ratio);

    let mut rows = Vec::with_capacity(n_list.len() * replications);
    let mut summaries = Vec::with_capacity(n_list.len());
    for &n_mc in n_list {
        if n_mc == 0 {
            return Err(PegmError::contract("Monte Carlo sizes must be >= 1"));
        }
        let cell: Vec<Result<GgmRow>> = (0..replications)
            .into_par_iter()
            .map(|rep| {
                let batch = sample_independence(
                    family,
                    &theta,
                    n_mc,
                    mix2(mix(seed, 0x66D1), n_mc as u64, rep as u64),
                )?;
                let est = importance::estimate_grad_log_z(family, &theta, &batch)?;
                Ok(GgmRow {
                    n_mc,
                    replication: rep,
                    se_z: (true_ratio - est.z_ratio) * (true_ratio - est.z_ratio),
                    fr_grad_z: scaled_frobenius(&true_grad_ratio, &est.grad_z_ratio, p),
                    fr_grad_log_z: scaled_frobenius(&true_grad_log, &est.grad_log_z, p),
                })
            })
            .collect();
        let cell: Vec<GgmRow> = cell.into_iter().collect::<Result<_>>()?;
        let (se_z_mean, se_z_sd) = mean_sd(&cell.iter().map(|r| r.se_z).collect::<Vec<_>>());
        let (fr_grad_z_mean, fr_grad_z_sd) =
            mean_sd(&cell.iter().map(|r| r.fr_grad_z).collect::<Vec<_>>());
        let (fr_grad_log_z_mean, fr_grad_log_z_sd) =
            mean_sd(&cell.iter().map(|r| r.fr_grad_log_z).collect::<Vec<_>>());
        summaries.push(GgmMetrics {
            n_mc,
            se_z_mean,
            se_z_sd,
            fr_grad_z_mean,
            fr_grad_z_sd,
            fr_grad_log_z_mean,
            fr_grad_log_z_sd,
        });
        rows.extend(cell);
    }
    Ok(GgmReport {
        design: design.name().to_string(),
        p,
        replications,
        seed,
        rows,
        summaries,
        runtime_ms: started.elapsed().as_millis() as u64,
    })
}

/// Mean gradient statistic over draws from the model itself; the comparator
/// estimate of the log-normalizer gradient.
pub fn gibbs_grad_log_z(
    family: ModelFamily,
    theta: &ThetaMatrix,
    n: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let draws = gibbs_sample(family, theta, n, burn_in, 1, seed)?;
    Ok(importance::sample_grad_log_z(family, &draws))
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct EfficiencyReport {
    pub p: usize,
    pub importance_n: usize,
    pub importance_fr: f64,
    pub importance_ms: u64,
    pub gibbs_rows: usize,
    pub gibbs_burn_in: usize,
    pub gibbs_fr: f64,
    pub gibbs_ms: u64,
}

/// Importance estimator versus a Gibbs-chain comparator at matched wall
/// clock on the band-graph design. The comparator runs against the clock
/// itself: at most a tenth of the importance time goes to burn-in (capped at
/// 200 sweeps), then sweeps accumulate the gradient statistic until the
/// budget is spent, so both pipelines get the same wall time end to end.
pub fn matched_clock_comparison(p: usize, n_imp: usize, seed: u64) -> Result<EfficiencyReport> {
    let family = ModelFamily::GaussianOracle;
    let theta = ggm_design_theta(GgmDesign::BandGraph, p, 0)?;
    let truth = enumeration::gaussian_grad_log_z(&theta)?;

    let started = Instant::now();
    let batch = sample_independence(family, &theta, n_imp, mix(seed, 0x133))?;
    let est = importance::estimate_grad_log_z(family, &theta, &batch)?;
    let t_imp = started.elapsed().as_secs_f64();
    let importance_ms = (t_imp * 1e3) as u64;
    let importance_fr = scaled_frobenius(&truth, &est.grad_log_z, p);

    let gibbs_start = Instant::now();
    let mut chain = sampler::GibbsChain::new(family, &theta, mix(seed, 0x61BC))?;
    let mut burn_in = 0;
    while burn_in < 200 && gibbs_start.elapsed().as_secs_f64() < 0.1 * t_imp {
        chain.sweep()?;
        burn_in += 1;
    }
    let mut acc = Array2::zeros((p, p));
    let mut rows = 0usize;
    loop {
        let x = chain.sweep()?;
        model::accumulate_grad_stats(family, x, 1.0, &mut acc);
        rows += 1;
        if gibbs_start.elapsed().as_secs_f64() >= t_imp {
            break;
        }
    }
    model::mirror_upper(&mut acc);
    acc /= rows as f64;
    let gibbs_ms = gibbs_start.elapsed().as_millis() as u64;
    let gibbs_fr = scaled_frobenius(&truth, &acc, p);

    Ok(EfficiencyReport {
        p,
        importance_n: n_imp,
        importance_fr,
        importance_ms,
        gibbs_rows: rows,
        gibbs_burn_in: burn_in,
        gibbs_fr,
        gibbs_ms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Method {
    /// Monte Carlo maximum likelihood, unpenalized.
    Mle,
    /// Node-wise pseudo-likelihood, unpenalized.
    Mple,
    /// l1-penalized likelihood with stability selection for the graph.
    Pmle,
    /// l1-penalized pseudo-likelihood with stability selection.
    Pmple,
    /// Posterior mean under the Hamiltonian sampler.
    Bayes,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mle => "mle",
            Method::Mple => "mple",
            Method::Pmle => "pmle",
            Method::Pmple => "pmple",
            Method::Bayes => "bayes",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = PegmError;

    fn from_str(s: &str) -> Result<Method> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mle" => Ok(Method::Mle),
            "mple" => Ok(Method::Mple),
            "pmle" => Ok(Method::Pmle),
            "pmple" => Ok(Method::Pmple),
            "bayes" => Ok(Method::Bayes),
            other => Err(PegmError::contract(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub method: String,
    pub frobenius_sq: f64,
    /// Structure score; absent for dense (unpenalized) estimates.
    pub mcc: Option<f64>,
    pub runtime_ms: u64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub frobenius_sq_mean: f64,
    pub frobenius_sq_sd: f64,
    pub mcc_mean: Option<f64>,
    pub mcc_sd: Option<f64>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct MetricsReport {
    pub setting: Setting,
    pub family: String,
    pub p: usize,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub theta0_edges: usize,
    pub rows: Vec<ReplicationRow>,
    pub summaries: Vec<MethodSummary>,
    pub runtime_ms: u64,
}

fn fit_one_method(
    method: Method,
    design: &SimDesign,
    theta0: &ThetaMatrix,
    data: &DataMatrix,
    rep: usize,
) -> Result<ReplicationRow> {
    let family = design.family;
    let rep_seed = mix2(design.seed, 0xF17, rep as u64);
    let started = Instant::now();
    let (frobenius_sq, mcc_value) = match method {
        Method::Mle => {
            // small-p table fits are cheap, so buy enough batch and schedule
            // for the optimizer noise to sit well below the statistical error
            let cfg = FitConfig {
                mc_n: importance::recommended_n(design.p, importance::DEFAULT_BATCH_SCALE)
                    .max(1000),
                seed: rep_seed,
                ..FitConfig::default()
            };
            let fit = optimize::mle_fit(family, data, &cfg)?;
            (theta0.frobenius_dist(&fit.theta_hat).powi(2), None)
        }
        Method::Mple => {
            let fit = pseudo::mple_fit(family, data, 0.0)?;
            (theta0.frobenius_dist(&fit.theta_hat).powi(2), None)
        }
        Method::Bayes => {
            let (prior, n_draws, burn_in) = if design.p <= 5 {
                (PriorSpec::LowDim, 400, 200)
            } else {
                (PriorSpec::laplace_default(), 200, 100)
            };
            let config = HmcConfig {
                seed: rep_seed,
                ..HmcConfig::default()
            };
            let draws = bayes::posterior_sample(family, data, &prior, n_draws, burn_in, &config)?;
            let mean = draws.posterior_mean();
            (theta0.frobenius_dist(&mean).powi(2), None)
        }
        Method::Pmle => {
            let grid = pseudo::default_lambda_grid(family, design.p, design.n);
            let cfg = FitConfig {
                max_iters: 150,
                seed: rep_seed,
                ..FitConfig::default()
            };
            let graph =
                optimize::stability_select(family, data, &grid, optimize::DEFAULT_PI_THR, &cfg)?;
            let support = support_from_edges(design.p, &graph.edges);
            let mid = FitConfig {
                lambda: grid[grid.len() / 2],
                ..cfg.clone()
            };
            let fit = optimize::penalized_fit(family, data, &mid)?;
            (
                theta0.frobenius_dist(&fit.theta_hat).powi(2),
                Some(mcc(theta0, &support)),
            )
        }
        Method::Pmple => {
            let grid = pseudo::default_lambda_grid(family, design.p, design.n);
            let graph =
                pseudo::mple_stability_select(family, data, &grid, optimize::DEFAULT_PI_THR)?;
            let support = support_from_edges(design.p, &graph.edges);
            let fit = pseudo::mple_fit(family, data, grid[grid.len() / 2])?;
            (
                theta0.frobenius_dist(&fit.theta_hat).powi(2),
                Some(mcc(theta0, &support)),
            )
        }
    };
    Ok(ReplicationRow {
        replication: rep,
        method: method.name().to_string(),
        frobenius_sq,
        mcc: mcc_value,
        runtime_ms: started.elapsed().as_millis() as u64,
    })
}

/// Generate, fit, and score one simulation cell. The true parameter is drawn
/// once from the design; each replication draws its own dataset and runs
/// every requested method on it. An empty method list yields an empty report.
/// Ultra high-dimensional cells are refused unless `allow_long` is set.
pub fn run_table1(
    design: &SimDesign,
    methods: &[Method],
    allow_long: bool,
) -> Result<MetricsReport> {
    design.validate()?;
    if design.setting == Setting::Uhd && !allow_long {
        return Err(PegmError::resource(
            "ultra high-dimensional runs take hours; pass allow_long to opt in",
        ));
    }
    let started = Instant::now();
    let theta0 = generate_theta0(design)?;
    let theta0_edges = theta0.edges().len();

    let mut rows: Vec<ReplicationRow> = Vec::new();
    if !methods.is_empty() {
        let rep_rows: Vec<Result<Vec<ReplicationRow>>> = (0..design.replications)
            .into_par_iter()
            .map(|rep| {
                let data = generate_data(
                    design.family,
                    &theta0,
                    design.n,
                    mix2(design.seed, 0xDA7A, rep as u64),
                )?;
                methods
                    .iter()
                    .map(|&m| fit_one_method(m, design, &theta0, &data, rep))
                    .collect()
            })
            .collect();
        for rr in rep_rows {
            rows.extend(rr?);
        }
    }

    let mut summaries = Vec::new();
    for &m in methods {
        let name = m.name();
        let fro: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == name)
            .map(|r| r.frobenius_sq)
            .collect();
        let (frobenius_sq_mean, frobenius_sq_sd) = mean_sd(&fro);
        let mccs: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == name)
            .filter_map(|r| r.mcc)
            .collect();
        let (mcc_mean, mcc_sd) = if mccs.is_empty() {
            (None, None)
        } else {
            let (a, b) = mean_sd(&mccs);
            (Some(a), Some(b))
        };
        summaries.push(MethodSummary {
            method: name.to_string(),
            frobenius_sq_mean,
            frobenius_sq_sd,
            mcc_mean,
            mcc_sd,
        });
    }

    Ok(MetricsReport {
        setting: design.setting,
        family: design.family.name().to_string(),
        p: design.p,
        n: design.n,
        replications: design.replications,
        seed: design.seed,
        theta0_edges,
        rows,
        summaries,
        runtime_ms: started.elapsed().as_millis() as u64,
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BmRow {
    pub replication: usize,
    pub method: String,
    /// Unhalved L1 distance between the true and fitted visible marginals.
    pub tv: f64,
    pub runtime_ms: u64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BmReport {
    pub true_p: usize,
    pub true_m: usize,
    pub fit_m: usize,
    pub n: usize,
    pub replications: usize,
    pub epochs: usize,
    pub cd_k: usize,
    pub seed: u64,
    pub rows: Vec<BmRow>,
    pub fl_tv_mean: f64,
    pub cd_tv_mean: f64,
    pub runtime_ms: u64,
}

/// Random bipartite truth: every admissible entry (biases and
/// visible-hidden interactions) is zero with probability one half and
/// uniform on [-1, 1] otherwise.
pub fn random_rbm_theta(p: usize, m: usize, seed: u64) -> ThetaMatrix {
    let mask = Mask::rbm(p, m);
    let u = p + m;
    let mut rng = stream(mix(seed, 0x7B0));
    let mut theta = ThetaMatrix::zeros(u);
    for j in 0..u {
        for k in j..u {
            if mask.allows(j, k) {
                // both draws happen unconditionally so the stream layout
                // does not depend on earlier coin flips
                let keep = rng.random::<f64>() < 0.5;
                let v = rng.random_range(-1.0..1.0);
                if keep {
                    theta.set(j, k, v);
                }
            }
        }
    }
    theta
}

/// Hidden-unit density estimation: full-likelihood ascent versus k-step
/// contrastive divergence on data from a random bipartite truth, scored by
/// the L1 distance between visible marginals. The truth and the fits may
/// have different hidden counts; both trainers share hyperparameters and
/// the per-replication seed.
#[allow(clippy::too_many_arguments)]
pub fn bm_comparison(
    true_p: usize,
    true_m: usize,
    fit_m: usize,
    n: usize,
    replications: usize,
    epochs: usize,
    cd_k: usize,
    seed: u64,
) -> Result<BmReport> {
    if replications == 0 || n == 0 {
        return Err(PegmError::contract("need n >= 1 and replications >= 1"));
    }
    let started = Instant::now();
    let per_rep: Vec<Result<Vec<BmRow>>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = mix2(seed, 0xB3, rep as u64);
            let theta0 = random_rbm_theta(true_p, true_m, rep_seed);
            let joint = gibbs_sample(
                ModelFamily::Ising,
                &theta0,
                n,
                GIBBS_BURN_IN,
                GIBBS_THIN,
                mix(rep_seed, 0x7B1),
            )?;
            let visible = DataMatrix::new(
                joint.rows().slice(ndarray::s![.., 0..true_p]).to_owned(),
                ModelFamily::Ising,
            )?;
            let cfg = TrainConfig {
                max_epochs: epochs,
                seed: mix(rep_seed, 0x7B2),
                ..TrainConfig::default()
            };
            let mut out = Vec::with_capacity(2);
            let t0 = Instant::now();
            let fl = boltzmann::rbm_fit(&visible, fit_m, &cfg)?;
            let fl_ms = t0.elapsed().as_millis() as u64;
            let t1 = Instant::now();
            let cd = boltzmann::cd_k_fit(&visible, fit_m, cd_k, &cfg)?;
            let cd_ms = t1.elapsed().as_millis() as u64;
            let tv_fl =
                boltzmann::total_variation_exact(&theta0, true_m, &fl.theta, fit_m, true_p)?.l1;
            let tv_cd =
                boltzmann::total_variation_exact(&theta0, true_m, &cd.theta, fit_m, true_p)?.l1;
            out.push(BmRow {
                replication: rep,
                method: "fl".to_string(),
                tv: tv_fl,
                runtime_ms: fl_ms,
            });
            out.push(BmRow {
                replication: rep,
                method: "cd".to_string(),
                tv: tv_cd,
                runtime_ms: cd_ms,
            });
            Ok(out)
        })
        .collect();
    let mut rows = Vec::with_capacity(2 * replications);
    for rr in per_rep {
        rows.extend(rr?);
    }
    let mean_of = |name: &str| {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == name)
            .map(|r| r.tv)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    Ok(BmReport {
        true_p,
        true_m,
        fit_m,
        n,
        replications,
        epochs,
        cd_k,
        seed,
        fl_tv_mean: mean_of("fl"),
        cd_tv_mean: mean_of("cd"),
        rows,
        runtime_ms: started.elapsed().as_millis() as u64,
    })
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct CoverageSummary {
    pub coverage: f64,
    pub avg_width: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CoverageReport {
    pub family: String,
    pub p: usize,
    pub n: usize,
    pub b: usize,
    pub level: f64,
    pub replications: usize,
    pub likelihood: CoverageSummary,
    pub pseudo: CoverageSummary,
    pub runtime_ms: u64,
}

/// Percentile bootstrap for the node-wise pseudo-likelihood fit; resamples
/// that separate (and so have no finite unpenalized optimum) are dropped
/// from the percentile pool.
fn mple_bootstrap_interval(
    family: ModelFamily,
    data: &DataMatrix,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<(ThetaMatrix, ThetaMatrix)> {
    let n = data.n();
    let p = data.p();
    let estimates: Vec<Result<Option<ThetaMatrix>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut idx_rng = stream(mix2(seed, 0xB00B, rep as u64));
            let idx: Vec<usize> = (0..n).map(|_| idx_rng.random_range(0..n)).collect();
            let resample = optimize::select_rows(data, &idx);
            match pseudo::mple_fit(family, &resample, 0.0) {
                Ok(fit) => Ok(Some(fit.theta_hat)),
                Err(PegmError::Separation { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut kept: Vec<ThetaMatrix> = Vec::with_capacity(b);
    for e in estimates {
        if let Some(t) = e? {
            kept.push(t);
        }
    }
    if kept.len() < b / 2 || kept.len() < 2 {
        return Err(PegmError::domain(
            "most bootstrap resamples separated; unpenalized pseudo-likelihood intervals \
             are not identified here",
        ));
    }
    let m = kept.len();
    let q_lo = (1.0 - level) / 2.0;
    let q_hi = (1.0 + level) / 2.0;
    let lo_rank = (q_lo * (m - 1) as f64).floor() as usize;
    let hi_rank = (q_hi * (m - 1) as f64).ceil() as usize;
    let mut lower = ThetaMatrix::zeros(p);
    let mut upper = ThetaMatrix::zeros(p);
    let mut vals = vec![0.0; m];
    for j in 0..p {
        for k in j..p {
            for (r, est) in kept.iter().enumerate() {
                vals[r] = est.get(j, k);
            }
            vals.sort_by(|a, b| a.partial_cmp(b).expect("finite estimates"));
            lower.set(j, k, vals[lo_rank]);
            upper.set(j, k, vals[hi_rank]);
        }
    }
    Ok((lower, upper))
}

/// Interval coverage experiment on a dense true parameter (every interaction
/// equal to -1 for the binary family, -0.5 for counts; diagonal zero): per
/// replication, bootstrap intervals from the likelihood fit and from the
/// pseudo-likelihood fit are scored for coverage of the truth and width,
/// averaged over unique entries.
pub fn coverage_study(
    family: ModelFamily,
    p: usize,
    n: usize,
    b: usize,
    replications: usize,
    level: f64,
    seed: u64,
) -> Result<CoverageReport> {
    let value = match family {
        ModelFamily::Ising => -1.0,
        ModelFamily::PoissonGm => -0.5,
        ModelFamily::GaussianOracle => {
            return Err(PegmError::contract(
                "the coverage protocol targets the discrete families",
            ))
        }
    };
    if replications == 0 {
        return Err(PegmError::contract("replications must be >= 1"));
    }
    let started = Instant::now();
    let mut theta0 = ThetaMatrix::zeros(p);
    for j in 0..p {
        for k in (j + 1)..p {
            theta0.set(j, k, value);
        }
    }
    let unique = (p * (p + 1) / 2) as f64;

    let per_rep: Vec<Result<[f64; 4]>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let data = generate_data(family, &theta0, n, mix2(seed, 0xC0F, rep as u64))?;
            let cfg = FitConfig {
                max_iters: 200,
                seed: mix2(seed, 0xC1F, rep as u64),
                ..FitConfig::default()
            };
            let ci = optimize::bootstrap_ci(family, &data, b, level, &cfg)?;
            let mut covered = 0.0;
            for j in 0..p {
                for k in j..p {
                    if ci.covers(&theta0, j, k) {
                        covered += 1.0;
                    }
                }
            }
            let (lo, hi) =
                mple_bootstrap_interval(family, &data, b, level, mix2(seed, 0xC2F, rep as u64))?;
            let mut m_covered = 0.0;
            let mut m_width = 0.0;
            for j in 0..p {
                for k in j..p {
                    let t = theta0.get(j, k);
                    if t >= lo.get(j, k) && t <= hi.get(j, k) {
                        m_covered += 1.0;
                    }
                    m_width += hi.get(j, k) - lo.get(j, k);
                }
            }
            Ok([
                covered / unique,
                ci.avg_width(),
                m_covered / unique,
                m_width / unique,
            ])
        })
        .collect();
    let per_rep: Vec<[f64; 4]> = per_rep.into_iter().collect::<Result<_>>()?;
    let avg = |i: usize| per_rep.iter().map(|r| r[i]).sum::<f64>() / replications as f64;
    Ok(CoverageReport {
        family: family.name().to_string(),
        p,
        n,
        b,
        level,
        replications,
        likelihood: CoverageSummary {
            coverage: avg(0),
            avg_width: avg(1),
        },
        pseudo: CoverageSummary {
            coverage: avg(2),
            avg_width: avg(3),
        },
        runtime_ms: started.elapsed().as_millis() as u64,
    })
}
