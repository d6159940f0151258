//! Command line front end: sampling, normalizer estimation, likelihood and
//! pseudo-likelihood fitting, posterior sampling, hidden-unit training, and
//! the benchmark drivers. Matrices travel as CSV (data files carry an
//! `x1,...,xp` header, parameter files are headerless and square); results
//! are JSON on stdout unless an output path is given.
//!
//! Every command is deterministic for a fixed `--seed`. Thread count follows
//! RAYON_NUM_THREADS.

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use pegm::bayes::{self, HmcConfig, PriorSpec};
use pegm::bench::{self, GgmDesign, Method, Setting, SimDesign};
use pegm::boltzmann::{self, Mask, MaskSpec, TrainConfig};
use pegm::importance;
use pegm::io;
use pegm::optimize::{self, FitConfig, StepSchedule};
use pegm::pseudo;
use pegm::sampler::{self, GIBBS_DEFAULT_BURN_IN, GIBBS_DEFAULT_THIN};
use pegm::{DataMatrix, ModelFamily, PegmError};
use std::path::{Path, PathBuf};
use std::time::Instant;

type Result<T> = std::result::Result<T, PegmError>;

#[derive(Parser)]
#[command(
    name = "pegm",
    version,
    about = "Pairwise exponential-family graphical models and Boltzmann machines",
    after_help = "Data CSV files carry a single header row x1,...,xp; parameter CSV files \
                  are headerless square matrices. Set RAYON_NUM_THREADS to control parallelism."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FitOpts {
    /// Initial step size.
    #[arg(long, default_value_t = 0.1)]
    gamma0: f64,
    /// Robbins-Monro decay horizon (iterations until the step halves).
    #[arg(long, default_value_t = 100.0)]
    t0: f64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    /// Relative step norm that counts as converged.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Monte Carlo batch size per iteration; 0 picks a size from p.
    #[arg(long, default_value_t = 0)]
    mc_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FitOpts {
    fn config(&self) -> FitConfig {
        FitConfig {
            gamma0: self.gamma0,
            schedule: StepSchedule::RobbinsMonro { t0: self.t0 },
            max_iters: self.max_iters,
            tol: self.tol,
            mc_n: self.mc_n,
            seed: self.seed,
            ..FitConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Initial step size.
    #[arg(long, default_value_t = 0.1)]
    gamma0: f64,
    /// Robbins-Monro decay horizon.
    #[arg(long, default_value_t = 100.0)]
    t0: f64,
    /// Negative-phase batch size at epoch 0; 0 picks a size from p + m.
    #[arg(long, default_value_t = 0)]
    n0: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace the Monte Carlo negative phase with exact enumeration
    /// (small models only).
    #[arg(long)]
    exact: bool,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            gamma0: self.gamma0,
            t0: self.t0,
            n0: self.n0,
            max_epochs: self.epochs,
            seed: self.seed,
            exact: self.exact,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw rows from a model into a data CSV.
    Sample {
        #[arg(long)]
        family: String,
        /// Parameter CSV (headerless, square).
        #[arg(long)]
        theta: PathBuf,
        /// independence, gibbs, or accept-reject.
        #[arg(long, default_value = "gibbs")]
        method: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output data CSV.
        #[arg(long)]
        out: PathBuf,
        /// Gibbs burn-in sweeps.
        #[arg(long, default_value_t = GIBBS_DEFAULT_BURN_IN)]
        burn_in: usize,
        /// Keep every thin-th sweep.
        #[arg(long, default_value_t = GIBBS_DEFAULT_THIN)]
        thin: usize,
        /// Proposal budget for accept-reject; 0 means 200 per requested row.
        #[arg(long, default_value_t = 0)]
        max_tries: usize,
    },
    /// Estimate the normalizer ratio or its gradients at a parameter.
    Estimate {
        #[arg(long)]
        family: String,
        #[arg(long)]
        theta: PathBuf,
        /// Importance sample size.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// z, grad, or gradlogz.
        #[arg(long, default_value = "z")]
        metric: String,
        /// JSON output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Maximum likelihood fit.
    Fit {
        #[arg(long)]
        family: String,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        opts: FitOpts,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the fitted parameter as CSV.
        #[arg(long)]
        theta_out: Option<PathBuf>,
    },
    /// L1-penalized likelihood fit.
    FitL1 {
        #[arg(long)]
        family: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lambda: f64,
        /// Penalize diagonal entries too.
        #[arg(long)]
        penalize_diagonal: bool,
        #[command(flatten)]
        opts: FitOpts,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        theta_out: Option<PathBuf>,
    },
    /// K-fold cross-validation over a penalty grid.
    Cv {
        #[arg(long)]
        family: String,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated penalty values.
        #[arg(long)]
        lambda_grid: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[command(flatten)]
        opts: FitOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Graph estimate by selection frequency across a penalty grid.
    Stability {
        #[arg(long)]
        family: String,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated penalty values; omitted means a default grid.
        #[arg(long)]
        lambda_grid: Option<String>,
        #[arg(long, default_value_t = optimize::DEFAULT_PI_THR)]
        pi_thr: f64,
        #[command(flatten)]
        opts: FitOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Percentile bootstrap intervals around the unpenalized fit.
    Bootstrap {
        #[arg(long)]
        family: String,
        #[arg(long)]
        data: PathBuf,
        /// Bootstrap resamples.
        #[arg(long, default_value_t = 200)]
        b: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[command(flatten)]
        opts: FitOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Node-wise pseudo-likelihood fit, optionally with stability selection.
    Mple {
        #[arg(long)]
        family: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Run stability selection over a penalty grid instead of one fit.
        #[arg(long)]
        stability: bool,
        /// Comma-separated grid for --stability; omitted means a default grid.
        #[arg(long)]
        lambda_grid: Option<String>,
        #[arg(long, default_value_t = optimize::DEFAULT_PI_THR)]
        pi_thr: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        theta_out: Option<PathBuf>,
    },
    /// Posterior sampling with the constrained Hamiltonian kernel.
    Bayes {
        #[arg(long)]
        family: String,
        #[arg(long)]
        data: PathBuf,
        /// lowdim (fixed Gaussian) or laplace (scale-mixture hierarchy).
        #[arg(long, default_value = "lowdim")]
        prior: String,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 500)]
        burn_in: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leapfrog step size.
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 10)]
        leapfrog: usize,
        /// Gradient batch size; 0 picks a size from p.
        #[arg(long, default_value_t = 0)]
        mc_n: usize,
        /// Credible-interval level.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Use enumeration instead of the estimator (binary family, small p).
        #[arg(long)]
        exact_z: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump kept draws (upper-triangle columns) as CSV.
        #[arg(long)]
        draws_out: Option<PathBuf>,
    },
    /// Train a bipartite hidden-unit model by likelihood ascent or CD-k.
    RbmTrain {
        #[arg(long)]
        data: PathBuf,
        /// Hidden unit count.
        #[arg(long)]
        m: usize,
        /// Use k-step contrastive divergence instead of likelihood ascent.
        #[arg(long)]
        cd: Option<usize>,
        #[command(flatten)]
        opts: TrainOpts,
        /// Output model descriptor (JSON; parameter CSV lands beside it).
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Train a hidden-unit model with arbitrary connectivity.
    BmTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        m: usize,
        /// rbm, full, or dbm:<l1,l2,...> (layer sizes, visible first).
        #[arg(long, default_value = "full")]
        mask: String,
        #[command(flatten)]
        opts: TrainOpts,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Score a trained model against a test CSV.
    BmEval {
        /// Model descriptor JSON from rbm-train / bm-train.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Batch size for the marginal-likelihood estimate.
        #[arg(long, default_value_t = 10000)]
        mc_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate marginals by enumeration (small models only).
        #[arg(long)]
        exact: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form validation of the estimators on the Gaussian family.
    BenchGgm {
        /// band or mixed.
        #[arg(long, default_value = "band")]
        design: String,
        #[arg(long, default_value_t = 50)]
        p: usize,
        /// Comma-separated Monte Carlo sizes.
        #[arg(long, default_value = "1000,5000")]
        n_list: String,
        #[arg(long, default_value_t = 100)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Simulation study: generate, fit, and score across replications.
    BenchSim {
        /// ld, hd, or uhd.
        #[arg(long)]
        setting: String,
        /// ising or pgm.
        #[arg(long, default_value = "ising")]
        family: String,
        /// Comma-separated subset of mle,mple,pmle,pmple,bayes.
        #[arg(long, default_value = "mle,mple")]
        methods: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the default replication count.
        #[arg(long)]
        replications: Option<usize>,
        /// Opt in to ultra high-dimensional runs.
        #[arg(long)]
        allow_long: bool,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Likelihood ascent versus contrastive divergence on hidden-unit models.
    BenchBm {
        #[arg(long, default_value_t = 2)]
        true_p: usize,
        #[arg(long, default_value_t = 2)]
        true_m: usize,
        #[arg(long, default_value_t = 4)]
        fit_m: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        replications: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        cd_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Bootstrap interval coverage and width across replications.
    BenchCoverage {
        #[arg(long, default_value = "ising")]
        family: String,
        #[arg(long, default_value_t = 3)]
        p: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        b: usize,
        #[arg(long, default_value_t = 30)]
        replications: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn nested(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| PegmError::contract(format!("`{s}` is not a number")))
        })
        .collect()
}

fn parse_mask_spec(text: &str) -> Result<MaskSpec> {
    match text.trim().to_ascii_lowercase().as_str() {
        "rbm" => Ok(MaskSpec::Rbm),
        "full" => Ok(MaskSpec::Full),
        other => {
            if let Some(layers) = other.strip_prefix("dbm:") {
                let sizes: Result<Vec<usize>> = layers
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| PegmError::contract(format!("`{s}` is not a layer size")))
                    })
                    .collect();
                Ok(MaskSpec::Dbm(sizes?))
            } else {
                Err(PegmError::contract(format!(
                    "unknown mask `{other}`; use rbm, full, or dbm:<l1,l2,...>"
                )))
            }
        }
    }
}

fn emit_json<T: serde::Serialize>(out: &Option<PathBuf>, value: &T) -> Result<()> {
    match out {
        Some(path) => io::write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

/// Randomness provenance carried by every benchmark artifact.
#[derive(serde::Serialize)]
struct Logged<T: serde::Serialize> {
    rng: &'static str,
    version: &'static str,
    #[serde(flatten)]
    report: T,
}

fn logged<T: serde::Serialize>(report: T) -> Logged<T> {
    Logged {
        rng: "chacha8",
        version: env!("CARGO_PKG_VERSION"),
        report,
    }
}

fn write_rows_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Sample {
            family,
            theta,
            method,
            n,
            seed,
            out,
            burn_in,
            thin,
            max_tries,
        } => {
            let family: ModelFamily = family.parse()?;
            let theta = io::read_theta_csv(&theta)?;
            let data = match method.as_str() {
                "independence" => {
                    let batch = sampler::sample_independence(family, &theta, n, seed)?;
                    DataMatrix::new(batch.rows, family)?
                }
                "gibbs" => sampler::gibbs_sample(family, &theta, n, burn_in, thin, seed)?,
                "accept-reject" => {
                    let tries = if max_tries == 0 { 200 * n.max(1) } else { max_tries };
                    let ar = sampler::accept_reject_sample(family, &theta, n, tries, seed)?;
                    log::info!(
                        "accept-reject: rate {:.4} over {} tries",
                        ar.acceptance_rate,
                        ar.tries
                    );
                    ar.data
                }
                other => {
                    return Err(PegmError::contract(format!(
                        "unknown method `{other}`; use independence, gibbs, or accept-reject"
                    )))
                }
            };
            io::write_data_csv(&out, &data)?;
            eprintln!("wrote {} rows to {}", data.n(), out.display());
            Ok(())
        }
        Command::Estimate {
            family,
            theta,
            n,
            seed,
            metric,
            out,
        } => {
            let family: ModelFamily = family.parse()?;
            let theta = io::read_theta_csv(&theta)?;
            let started = Instant::now();
            let batch = sampler::sample_independence(family, &theta, n, seed)?;
            let est = importance::estimate_grad_log_z(family, &theta, &batch)?;
            let runtime_ms = started.elapsed().as_millis() as u64;
            #[derive(serde::Serialize)]
            #[serde(untagged)]
            enum Estimate {
                Scalar(f64),
                Matrix(Vec<Vec<f64>>),
            }
            let estimate = match metric.as_str() {
                "z" => Estimate::Scalar(est.z_ratio),
                "grad" => Estimate::Matrix(nested(&est.grad_z_ratio)),
                "gradlogz" => Estimate::Matrix(nested(&est.grad_log_z)),
                other => {
                    return Err(PegmError::contract(format!(
                        "unknown metric `{other}`; use z, grad, or gradlogz"
                    )))
                }
            };
            #[derive(serde::Serialize)]
            struct Out {
                metric: String,
                estimate: Estimate,
                z_ratio: f64,
                log_z_hat: f64,
                n: usize,
                ess: f64,
                max_weight_share: f64,
                runtime_ms: u64,
            }
            emit_json(
                &out,
                &Out {
                    metric,
                    estimate,
                    z_ratio: est.z_ratio,
                    log_z_hat: est.log_z_hat,
                    n: est.n,
                    ess: est.ess,
                    max_weight_share: est.max_weight_share,
                    runtime_ms,
                },
            )
        }
        Command::Fit {
            family,
            data,
            opts,
            out,
            theta_out,
        } => {
            let family: ModelFamily = family.parse()?;
            let data = io::read_data_csv(&data, family)?;
            let fit = optimize::mle_fit(family, &data, &opts.config())?;
            emit_fit(fit, 0.0, &out, &theta_out)
        }
        Command::FitL1 {
            family,
            data,
            lambda,
            penalize_diagonal,
            opts,
            out,
            theta_out,
        } => {
            let family: ModelFamily = family.parse()?;
            let data = io::read_data_csv(&data, family)?;
            let config = FitConfig {
                lambda,
                penalize_diagonal,
                ..opts.config()
            };
            let fit = optimize::penalized_fit(family, &data, &config)?;
            emit_fit(fit, lambda, &out, &theta_out)
        }
        Command::Cv {
            family,
            data,
            lambda_grid,
            k,
            opts,
            out,
        } => {
            let family: ModelFamily = family.parse()?;
            let data = io::read_data_csv(&data, family)?;
            let grid = parse_f64_list(&lambda_grid)?;
            let cv = optimize::cross_validate(family, &data, &grid, k, &opts.config())?;
            emit_json(&out, &cv)
        }
        Command::Stability {
            family,
            data,
            lambda_grid,
            pi_thr,
            opts,
            out,
        } => {
            let family: ModelFamily = family.parse()?;
            let data = io::read_data_csv(&data, family)?;
            let grid = match &lambda_grid {
                Some(text) => parse_f64_list(text)?,
                None => pseudo::default_lambda_grid(family, data.p(), data.n()),
            };
            let graph = optimize::stability_select(family, &data, &grid, pi_thr, &opts.config())?;
            emit_json(&out, &graph)
        }
        Command::Bootstrap {
            family,
            data,
            b,
            level,
            opts,
            out,
        } => {
            let family: ModelFamily = family.parse()?;
            let data = io::read_data_csv(&data, family)?;
            let ci = optimize::bootstrap_ci(family, &data, b, level, &opts.config())?;
            #[derive(serde::Serialize)]
            struct Out {
                lower: Vec<Vec<f64>>,
                upper: Vec<Vec<f64>>,
                level: f64,
                b: usize,
                avg_width: f64,
            }
            emit_json(
                &out,
                &Out {
                    lower: nested(ci.lower.values()),
                    upper: nested(ci.upper.values()),
                    level: ci.level,
                    b: ci.b,
                    avg_width: ci.avg_width(),
                },
            )
        }
        Command::Mple {
            family,
            data,
            lambda,
            stability,
            lambda_grid,
            pi_thr,
            out,
            theta_out,
        } => {
            let family: ModelFamily = family.parse()?;
            let data = io::read_data_csv(&data, family)?;
            if stability {
                let grid = match &lambda_grid {
                    Some(text) => parse_f64_list(text)?,
                    None => pseudo::default_lambda_grid(family, data.p(), data.n()),
                };
                let graph = pseudo::mple_stability_select(family, &data, &grid, pi_thr)?;
                return emit_json(&out, &graph);
            }
            let fit = pseudo::mple_fit(family, &data, lambda)?;
            if let Some(path) = &theta_out {
                io::write_theta_csv(path, &fit.theta_hat)?;
            }
            #[derive(serde::Serialize)]
            struct Out {
                theta_hat: Vec<Vec<f64>>,
                lambda: f64,
                kkt_residual: f64,
            }
            let kkt = pseudo::kkt_residual(family, &data, &fit, lambda);
            emit_json(
                &out,
                &Out {
                    theta_hat: nested(fit.theta_hat.values()),
                    lambda,
                    kkt_residual: kkt,
                },
            )
        }
        Command::Bayes {
            family,
            data,
            prior,
            draws,
            burn_in,
            seed,
            epsilon,
            leapfrog,
            mc_n,
            level,
            exact_z,
            out,
            draws_out,
        } => {
            let family: ModelFamily = family.parse()?;
            let data = io::read_data_csv(&data, family)?;
            let prior = match prior.as_str() {
                "lowdim" => PriorSpec::LowDim,
                "laplace" => PriorSpec::laplace_default(),
                other => {
                    return Err(PegmError::contract(format!(
                        "unknown prior `{other}`; use lowdim or laplace"
                    )))
                }
            };
            let config = HmcConfig {
                epsilon,
                leapfrog,
                mc_n,
                seed,
                exact_z,
            };
            let posterior = bayes::posterior_sample(family, &data, &prior, draws, burn_in, &config)?;
            let mean = posterior.posterior_mean();
            let (lower, upper) = posterior.entrywise_interval(level);
            if let Some(path) = &draws_out {
                let p = mean.p();
                let mut header = Vec::new();
                for j in 0..p {
                    for k in j..p {
                        header.push(format!("t{j}_{k}"));
                    }
                }
                let mut w = csv::Writer::from_path(path)?;
                w.write_record(&header)?;
                for draw in &posterior.draws {
                    let mut row = Vec::with_capacity(header.len());
                    for j in 0..p {
                        for k in j..p {
                            row.push(format!("{}", draw.get(j, k)));
                        }
                    }
                    w.write_record(&row)?;
                }
                w.flush()?;
            }
            #[derive(serde::Serialize)]
            struct Out {
                posterior_mean: Vec<Vec<f64>>,
                lower: Vec<Vec<f64>>,
                upper: Vec<Vec<f64>>,
                level: f64,
                acceptance_rate: f64,
                epsilon_final: f64,
                kept_draws: usize,
            }
            emit_json(
                &out,
                &Out {
                    posterior_mean: nested(mean.values()),
                    lower: nested(&lower),
                    upper: nested(&upper),
                    level,
                    acceptance_rate: posterior.acceptance_rate,
                    epsilon_final: posterior.epsilon_final,
                    kept_draws: posterior.draws.len(),
                },
            )
        }
        Command::RbmTrain {
            data,
            m,
            cd,
            opts,
            model_out,
        } => {
            let data = io::read_data_csv(&data, ModelFamily::Ising)?;
            let config = opts.config();
            let model = match cd {
                Some(k) => boltzmann::cd_k_fit(&data, m, k, &config)?,
                None => boltzmann::rbm_fit(&data, m, &config)?,
            };
            let csv_path = io::write_model(&model_out, &model)?;
            eprintln!(
                "wrote {} and {}",
                model_out.display(),
                csv_path.display()
            );
            Ok(())
        }
        Command::BmTrain {
            data,
            m,
            mask,
            opts,
            model_out,
        } => {
            let data = io::read_data_csv(&data, ModelFamily::Ising)?;
            let spec = parse_mask_spec(&mask)?;
            let mask = Mask::from_spec(&spec, data.p(), m)?;
            let model = boltzmann::bm_fit(&data, m, mask, &opts.config())?;
            let csv_path = io::write_model(&model_out, &model)?;
            eprintln!(
                "wrote {} and {}",
                model_out.display(),
                csv_path.display()
            );
            Ok(())
        }
        Command::BmEval {
            model,
            data,
            mc_n,
            seed,
            exact,
            out,
        } => {
            let model = io::read_model(&model)?;
            let data = io::read_data_csv(&data, ModelFamily::Ising)?;
            if data.p() != model.p {
                return Err(PegmError::contract(format!(
                    "test data has {} columns, model expects {}",
                    data.p(),
                    model.p
                )));
            }
            let n = data.n();
            if n == 0 {
                return Err(PegmError::contract("test data is empty"));
            }
            let started = Instant::now();
            let mut ll_sum = 0.0;
            let mut probs = Array2::zeros((n, model.p));
            for (i, row) in data.rows().outer_iter().enumerate() {
                let v = row.as_slice().expect("row-major data");
                ll_sum += boltzmann::marginal_log_likelihood(
                    &model,
                    v,
                    mc_n,
                    exact,
                    pegm::rng::mix2(seed, 0xE7A, i as u64),
                )?;
                let rec = boltzmann::reconstruct(&model, v, pegm::rng::mix2(seed, 0x4EC, i as u64))?;
                for (j, q) in rec.into_iter().enumerate() {
                    probs[[i, j]] = q;
                }
            }
            let brier = boltzmann::brier_loss(data.rows(), &probs)?;
            // L1 against the empirical law, when the model enumerates
            let tv_vs_empirical = match boltzmann::visible_log_marginal(
                &model.theta,
                model.p,
                model.m,
            ) {
                Ok(log_marginal) => {
                    let mut counts = vec![0.0f64; 1 << model.p];
                    for row in data.rows().outer_iter() {
                        let mut idx = 0usize;
                        for (j, &x) in row.iter().enumerate() {
                            if x == 1.0 {
                                idx |= 1 << j;
                            }
                        }
                        counts[idx] += 1.0;
                    }
                    Some(
                        log_marginal
                            .iter()
                            .zip(&counts)
                            .map(|(lp, c)| (lp.exp() - c / n as f64).abs())
                            .sum::<f64>(),
                    )
                }
                Err(PegmError::Resource(_)) => None,
                Err(e) => return Err(e),
            };
            #[derive(serde::Serialize)]
            struct Out {
                n: usize,
                marginal_log_likelihood_mean: f64,
                brier: f64,
                tv_vs_empirical: Option<f64>,
                runtime_ms: u64,
            }
            emit_json(
                &out,
                &Out {
                    n,
                    marginal_log_likelihood_mean: ll_sum / n as f64,
                    brier,
                    tv_vs_empirical,
                    runtime_ms: started.elapsed().as_millis() as u64,
                },
            )
        }
        Command::BenchGgm {
            design,
            p,
            n_list,
            r,
            seed,
            out_dir,
        } => {
            let design = match design.as_str() {
                "band" => GgmDesign::BandGraph,
                "mixed" => GgmDesign::MixedCovariance,
                other => {
                    return Err(PegmError::contract(format!(
                        "unknown design `{other}`; use band or mixed"
                    )))
                }
            };
            let sizes: Result<Vec<usize>> = n_list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| PegmError::contract(format!("`{s}` is not a size")))
                })
                .collect();
            let report = bench::ggm_oracle_suite(design, p, &sizes?, r, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            let json_path = out_dir.join(format!("ggm_{}_p{}.json", report.design, p));
            io::write_json(&json_path, &logged(&report))?;
            let csv_path = out_dir.join(format!("ggm_{}_p{}_rows.csv", report.design, p));
            write_rows_csv(
                &csv_path,
                &["n_mc", "replication", "se_z", "fr_grad_z", "fr_grad_log_z"],
                report
                    .rows
                    .iter()
                    .map(|row| {
                        vec![
                            row.n_mc.to_string(),
                            row.replication.to_string(),
                            row.se_z.to_string(),
                            row.fr_grad_z.to_string(),
                            row.fr_grad_log_z.to_string(),
                        ]
                    })
                    .collect(),
            )?;
            for s in &report.summaries {
                println!(
                    "N={}  SE(z) {:.3e}  Fr(grad z) {:.3e}  Fr(grad log z) {:.3e}",
                    s.n_mc, s.se_z_mean, s.fr_grad_z_mean, s.fr_grad_log_z_mean
                );
            }
            eprintln!("wrote {} and {}", json_path.display(), csv_path.display());
            Ok(())
        }
        Command::BenchSim {
            setting,
            family,
            methods,
            seed,
            replications,
            allow_long,
            out_dir,
        } => {
            let setting = match setting.as_str() {
                "ld" => Setting::Ld,
                "hd" => Setting::Hd,
                "uhd" => Setting::Uhd,
                other => {
                    return Err(PegmError::contract(format!(
                        "unknown setting `{other}`; use ld, hd, or uhd"
                    )))
                }
            };
            let family: ModelFamily = family.parse()?;
            let methods: Result<Vec<Method>> =
                methods.split(',').map(|s| s.parse::<Method>()).collect();
            let methods = methods?;
            let mut design = SimDesign::for_setting(setting, family, seed);
            if let Some(r) = replications {
                design.replications = r;
            }
            let report = bench::run_table1(&design, &methods, allow_long)?;
            std::fs::create_dir_all(&out_dir)?;
            let stem = format!("sim_{}_{}", setting.name(), family.name());
            let json_path = out_dir.join(format!("{stem}.json"));
            io::write_json(&json_path, &logged(&report))?;
            let csv_path = out_dir.join(format!("{stem}_rows.csv"));
            write_rows_csv(
                &csv_path,
                &["replication", "method", "frobenius_sq", "mcc", "runtime_ms"],
                report
                    .rows
                    .iter()
                    .map(|row| {
                        vec![
                            row.replication.to_string(),
                            row.method.clone(),
                            row.frobenius_sq.to_string(),
                            opt_str(&row.mcc),
                            row.runtime_ms.to_string(),
                        ]
                    })
                    .collect(),
            )?;
            for s in &report.summaries {
                match (s.mcc_mean, s.mcc_sd) {
                    (Some(m), Some(sd)) => println!(
                        "{:<6} Frobenius^2 {:.3} ({:.3})  MCC {:.3} ({:.3})",
                        s.method, s.frobenius_sq_mean, s.frobenius_sq_sd, m, sd
                    ),
                    _ => println!(
                        "{:<6} Frobenius^2 {:.3} ({:.3})",
                        s.method, s.frobenius_sq_mean, s.frobenius_sq_sd
                    ),
                }
            }
            eprintln!("wrote {} and {}", json_path.display(), csv_path.display());
            Ok(())
        }
        Command::BenchBm {
            true_p,
            true_m,
            fit_m,
            n,
            replications,
            epochs,
            cd_k,
            seed,
            out_dir,
        } => {
            let report =
                bench::bm_comparison(true_p, true_m, fit_m, n, replications, epochs, cd_k, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            let stem = format!("bm_p{true_p}m{true_m}_fit{fit_m}");
            let json_path = out_dir.join(format!("{stem}.json"));
            io::write_json(&json_path, &logged(&report))?;
            let csv_path = out_dir.join(format!("{stem}_rows.csv"));
            write_rows_csv(
                &csv_path,
                &["replication", "method", "tv", "runtime_ms"],
                report
                    .rows
                    .iter()
                    .map(|row| {
                        vec![
                            row.replication.to_string(),
                            row.method.clone(),
                            row.tv.to_string(),
                            row.runtime_ms.to_string(),
                        ]
                    })
                    .collect(),
            )?;
            println!(
                "FL mean TV {:.3}   CD-{} mean TV {:.3}",
                report.fl_tv_mean, cd_k, report.cd_tv_mean
            );
            eprintln!("wrote {} and {}", json_path.display(), csv_path.display());
            Ok(())
        }
        Command::BenchCoverage {
            family,
            p,
            n,
            b,
            replications,
            level,
            seed,
            out_dir,
        } => {
            let family: ModelFamily = family.parse()?;
            let report = bench::coverage_study(family, p, n, b, replications, level, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            let json_path = out_dir.join(format!("coverage_{}_p{}.json", family.name(), p));
            io::write_json(&json_path, &logged(&report))?;
            println!(
                "likelihood: coverage {:.3} width {:.3}   pseudo: coverage {:.3} width {:.3}",
                report.likelihood.coverage,
                report.likelihood.avg_width,
                report.pseudo.coverage,
                report.pseudo.avg_width
            );
            eprintln!("wrote {}", json_path.display());
            Ok(())
        }
    }
}

fn emit_fit(
    fit: optimize::FitResult,
    lambda: f64,
    out: &Option<PathBuf>,
    theta_out: &Option<PathBuf>,
) -> Result<()> {
    if let Some(path) = theta_out {
        io::write_theta_csv(path, &fit.theta_hat)?;
    }
    #[derive(serde::Serialize)]
    struct Diagnostics {
        z_ratio: f64,
        log_z_hat: f64,
        ess: f64,
        n: usize,
        max_weight_share: f64,
    }
    #[derive(serde::Serialize)]
    struct Out {
        theta_hat: Vec<Vec<f64>>,
        lambda: f64,
        iterations: usize,
        converged: bool,
        trace: Vec<optimize::TracePoint>,
        diagnostics: Diagnostics,
    }
    emit_json(
        out,
        &Out {
            theta_hat: nested(fit.theta_hat.values()),
            lambda,
            iterations: fit.iterations,
            converged: fit.converged,
            trace: fit.trace,
            diagnostics: Diagnostics {
                z_ratio: fit.diagnostics.z_ratio,
                log_z_hat: fit.diagnostics.log_z_hat,
                ess: fit.diagnostics.ess,
                n: fit.diagnostics.n,
                max_weight_share: fit.diagnostics.max_weight_share,
            },
        },
    )
}
