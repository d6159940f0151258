//! Posterior sampling over the feasible parameter set: Hamiltonian Monte
//! Carlo on the packed upper triangle with constraint reflection, plus
//! conjugate Gibbs updates for the Laplace scale-mixture latents.
//!
//! The potential is U(theta) = -sum_i log q(x_i; theta) + n log z_hat(theta)
//! - log prior(theta | latents). Both the potential and its gradient are
//! Monte Carlo estimates unless the exact plug-in is enabled, so U is
//! re-estimated independently at the current and proposed states of every
//! transition; the Metropolis correction is therefore approximate, and the
//! exact mode exists to validate the chain on small binary models.

use crate::enumeration;
use crate::error::{PegmError, Result};
use crate::importance::{self, recommended_n};
use crate::model::{self, DataMatrix, ModelFamily, ThetaMatrix, SPD_FLOOR};
use crate::optimize::{independence_init, unique_inner};
use crate::rng::{mix, mix2, stream};
use crate::sampler::sample_independence;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, InverseGaussian, Normal, StandardNormal};

/// Variance of the diffuse normal prior components.
const FLAT_VAR: f64 = 100.0;
/// Rate of the diffuse exponential prior on negated count-model interactions.
const FLAT_EXP_RATE: f64 = 0.01;
/// Magnitude floor protecting the scale update when an interaction is zero.
const RHO_THETA_FLOOR: f64 = 1e-10;
/// Transitions per step-size adaptation window during burn-in.
const ADAPT_WINDOW: usize = 50;
const ADAPT_LOW: f64 = 0.4;
const ADAPT_HIGH: f64 = 0.9;
/// Post-burn-in acceptance below this rate is reported as a failure.
const STALL_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub enum PriorSpec {
    /// Diffuse fixed-scale priors: normal(0, 100) on every unique entry,
    /// except count-model interactions which get an exponential(0.01) on
    /// their negation (support theta_jk <= 0).
    LowDim,
    /// Scale-mixture shrinkage: theta_jk | rho2_jk, lambda ~
    /// normal(0, rho2_jk / lambda) over all unique entries, rho2_jk ~
    /// exponential(1/2), lambda ~ gamma(a, b), truncated to the feasible set.
    HighDimLaplace { a_lambda: f64, b_lambda: f64 },
}

impl PriorSpec {
    pub fn laplace_default() -> Self {
        PriorSpec::HighDimLaplace {
            a_lambda: 1.0,
            b_lambda: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if let PriorSpec::HighDimLaplace { a_lambda, b_lambda } = self {
            if !(a_lambda.is_finite() && *a_lambda > 0.0)
                || !(b_lambda.is_finite() && *b_lambda > 0.0)
            {
                return Err(PegmError::contract(
                    "gamma hyperparameters must be finite and > 0",
                ));
            }
        }
        Ok(())
    }
}

/// Scale-mixture latent state: per-entry variances and the global rate.
#[derive(Clone, Debug)]
pub struct Latents {
    /// Symmetric matrix of rho2 values; unique entries j <= k are the state.
    pub rho2: Array2<f64>,
    pub lambda: f64,
}

impl Latents {
    pub fn init(p: usize, a_lambda: f64, b_lambda: f64) -> Self {
        Latents {
            rho2: Array2::ones((p, p)),
            lambda: a_lambda / b_lambda,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HmcConfig {
    /// Leapfrog step size; 0 gives the identity proposal.
    pub epsilon: f64,
    /// Leapfrog steps per transition.
    pub leapfrog: usize,
    /// Proposal batch size per potential/gradient estimate; 0 picks
    /// 10x the recommended batch for the dimension.
    pub mc_n: usize,
    pub seed: u64,
    /// Replace the estimator with exact enumeration (binary family, p <= 10).
    pub exact_z: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            epsilon: 0.1,
            leapfrog: 10,
            mc_n: 0,
            seed: 0,
            exact_z: false,
        }
    }
}

impl HmcConfig {
    fn validate(&self, family: ModelFamily, p: usize) -> Result<usize> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(PegmError::contract("epsilon must be finite and >= 0"));
        }
        if self.leapfrog == 0 {
            return Err(PegmError::contract("leapfrog step count must be >= 1"));
        }
        if self.exact_z {
            if family != ModelFamily::Ising || p > 10 {
                return Err(PegmError::contract(
                    "exact normalizer plug-in covers the binary family up to p = 10",
                ));
            }
        }
        Ok(if self.mc_n == 0 {
            10 * recommended_n(p, importance::DEFAULT_BATCH_SCALE)
        } else {
            self.mc_n
        })
    }
}

/// One Metropolis-adjusted trajectory.
#[derive(Clone, Debug)]
pub struct Transition {
    pub theta: ThetaMatrix,
    pub accepted: bool,
    /// Estimated potential of the retained state (NaN if the estimate
    /// degenerated and the transition was voided).
    pub potential: f64,
}

#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    pub draws: Vec<ThetaMatrix>,
    /// Scale-mixture traces, one entry per kept draw (empty for fixed priors).
    pub rho2_trace: Vec<Array2<f64>>,
    pub lambda_trace: Vec<f64>,
    /// Post-burn-in acceptance fraction.
    pub acceptance_rate: f64,
    /// Estimated potential at each kept draw.
    pub energy: Vec<f64>,
    /// Step size after burn-in adaptation.
    pub epsilon_final: f64,
}

impl PosteriorDraws {
    pub fn posterior_mean(&self) -> ThetaMatrix {
        let p = self.draws[0].p();
        let mut acc = Array2::zeros((p, p));
        for d in &self.draws {
            acc += d.values();
        }
        acc /= self.draws.len() as f64;
        ThetaMatrix::new(acc).expect("mean of symmetric draws is symmetric")
    }

    /// Entrywise central credible interval at the given level.
    pub fn entrywise_interval(&self, level: f64) -> (Array2<f64>, Array2<f64>) {
        let p = self.draws[0].p();
        let m = self.draws.len();
        let q_lo = (1.0 - level) / 2.0;
        let q_hi = 1.0 - q_lo;
        let mut lower = Array2::zeros((p, p));
        let mut upper = Array2::zeros((p, p));
        let mut buf = vec![0.0; m];
        for j in 0..p {
            for k in j..p {
                for (i, d) in self.draws.iter().enumerate() {
                    buf[i] = d.get(j, k);
                }
                buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let lo = buf[(q_lo * (m - 1) as f64).floor() as usize];
                let hi = buf[(q_hi * (m - 1) as f64).ceil() as usize];
                lower[[j, k]] = lo;
                lower[[k, j]] = lo;
                upper[[j, k]] = hi;
                upper[[k, j]] = hi;
            }
        }
        (lower, upper)
    }
}

pub(crate) fn packed_len(p: usize) -> usize {
    p * (p + 1) / 2
}

fn pack(theta: &ThetaMatrix) -> Vec<f64> {
    let p = theta.p();
    let mut v = Vec::with_capacity(packed_len(p));
    for j in 0..p {
        for k in j..p {
            v.push(theta.get(j, k));
        }
    }
    v
}

fn unpack(p: usize, v: &[f64]) -> ThetaMatrix {
    let mut t = ThetaMatrix::zeros(p);
    let mut i = 0;
    for j in 0..p {
        for k in j..p {
            t.set(j, k, v[i]);
            i += 1;
        }
    }
    t
}

/// Householder reflection of the momentum in the constraint direction.
/// `r` must be unit length; the map is then norm-preserving and involutive.
pub fn reflect(p: &mut [f64], r: &[f64]) {
    let d: f64 = p.iter().zip(r).map(|(a, b)| a * b).sum();
    for (pi, ri) in p.iter_mut().zip(r) {
        *pi -= 2.0 * d * ri;
    }
}

/// Reflection direction at an infeasible candidate, as a unit vector in
/// packed coordinates. `None` means the candidate is feasible; an empty
/// vector is the non-finite fallback (caller flips the momentum outright).
fn constraint_direction(family: ModelFamily, p: usize, v: &[f64]) -> Option<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Some(Vec::new());
    }
    match family {
        ModelFamily::Ising => None,
        ModelFamily::PoissonGm => {
            // active constraint is the largest interaction; ties go to the
            // first unique entry in row-major order
            let mut best: Option<(usize, f64)> = None;
            let mut i = 0;
            for j in 0..p {
                for k in j..p {
                    if k > j {
                        let x = v[i];
                        if best.map_or(true, |(_, bv)| x > bv) {
                            best = Some((i, x));
                        }
                    }
                    i += 1;
                }
            }
            match best {
                Some((idx, val)) if val > 0.0 => {
                    let mut r = vec![0.0; v.len()];
                    r[idx] = 1.0;
                    Some(r)
                }
                _ => None,
            }
        }
        ModelFamily::GaussianOracle => {
            let theta = unpack(p, v);
            let m = nalgebra::DMatrix::from_fn(p, p, |a, b| theta.get(a, b));
            let eig = m.symmetric_eigen();
            let (mut min_i, mut min_v) = (0, eig.eigenvalues[0]);
            for i in 1..p {
                if eig.eigenvalues[i] < min_v {
                    min_v = eig.eigenvalues[i];
                    min_i = i;
                }
            }
            if min_v >= SPD_FLOOR {
                return None;
            }
            // gradient of the smallest eigenvalue in unique coordinates
            let vec = eig.eigenvectors.column(min_i);
            let mut r = Vec::with_capacity(packed_len(p));
            for j in 0..p {
                for k in j..p {
                    if j == k {
                        r.push(vec[j] * vec[j]);
                    } else {
                        r.push(2.0 * vec[j] * vec[k]);
                    }
                }
            }
            let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in &mut r {
                    *x /= norm;
                }
                Some(r)
            } else {
                Some(Vec::new())
            }
        }
    }
}

/// Log prior density and its gradient over the unique entries, in packed
/// order. The scale-mixture form needs latents; fixed priors ignore them.
fn log_prior_and_grad(
    family: ModelFamily,
    prior: &PriorSpec,
    latents: Option<&Latents>,
    theta: &ThetaMatrix,
) -> Result<(f64, Vec<f64>)> {
    let p = theta.p();
    let mut lp = 0.0;
    let mut g = Vec::with_capacity(packed_len(p));
    match prior {
        PriorSpec::LowDim => {
            let norm_const = -0.5 * (2.0 * std::f64::consts::PI * FLAT_VAR).ln();
            for j in 0..p {
                for k in j..p {
                    let x = theta.get(j, k);
                    let off_count = family == ModelFamily::PoissonGm && k > j;
                    if off_count {
                        // -theta_jk is exponential(rate): density rate*e^{rate*theta}
                        lp += FLAT_EXP_RATE.ln() + FLAT_EXP_RATE * x;
                        g.push(FLAT_EXP_RATE);
                    } else {
                        lp += norm_const - x * x / (2.0 * FLAT_VAR);
                        g.push(-x / FLAT_VAR);
                    }
                }
            }
        }
        PriorSpec::HighDimLaplace { .. } => {
            let lat = latents.ok_or_else(|| {
                PegmError::contract("scale-mixture prior needs latent state")
            })?;
            if lat.rho2.dim() != (p, p) {
                return Err(PegmError::contract("latent rho2 has the wrong shape"));
            }
            for j in 0..p {
                for k in j..p {
                    let x = theta.get(j, k);
                    let v = lat.rho2[[j, k]] / lat.lambda;
                    lp += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - x * x / (2.0 * v);
                    g.push(-x / v);
                }
            }
        }
    }
    Ok((lp, g))
}

/// Everything fixed across one transition's potential evaluations.
struct Potential<'a> {
    family: ModelFamily,
    prior: &'a PriorSpec,
    latents: Option<&'a Latents>,
    n: usize,
    /// Mean per-row gradient statistics of the data (zeros when n = 0).
    mean_g: Array2<f64>,
    /// Sum of base-measure terms over all rows.
    sum_base: f64,
    mc_n: usize,
    exact_z: bool,
}

impl Potential<'_> {
    /// Estimated (U, grad U) at theta; packed gradient. Fresh batch per call.
    fn eval(&self, theta: &ThetaMatrix, batch_seed: u64) -> Result<(f64, Vec<f64>)> {
        let p = theta.p();
        let (lp, gp) = log_prior_and_grad(self.family, self.prior, self.latents, theta)?;
        if self.n == 0 {
            let grad = gp.iter().map(|x| -x).collect();
            return Ok((-lp, grad));
        }
        let (log_z, glz) = if self.exact_z {
            enumeration::ising_log_z_and_grad(theta)?
        } else {
            let phi = theta.diag_part();
            let batch = sample_independence(self.family, &phi, self.mc_n, batch_seed)?;
            let est = importance::estimate_grad_log_z(self.family, theta, &batch)?;
            (est.log_z_hat, est.grad_log_z)
        };
        let nf = self.n as f64;
        let loglik = nf * unique_inner(theta, &self.mean_g) + self.sum_base - nf * log_z;
        let u = -loglik - lp;
        let mut grad = Vec::with_capacity(packed_len(p));
        let mut i = 0;
        for j in 0..p {
            for k in j..p {
                grad.push(nf * (glz[[j, k]] - self.mean_g[[j, k]]) - gp[i]);
                i += 1;
            }
        }
        Ok((u, grad))
    }

    /// Degenerate weight estimates void the transition instead of erroring.
    fn eval_or_void(&self, theta: &ThetaMatrix, batch_seed: u64) -> Result<Option<(f64, Vec<f64>)>> {
        match self.eval(theta, batch_seed) {
            Ok(v) => Ok(Some(v)),
            Err(PegmError::WeightDegeneracy { ess, n }) => {
                log::warn!(
                    "potential estimate degenerated (ess {ess:.2} of {n}); transition counted as rejection"
                );
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

fn build_potential<'a>(
    family: ModelFamily,
    prior: &'a PriorSpec,
    latents: Option<&'a Latents>,
    data: &DataMatrix,
    mc_n: usize,
    exact_z: bool,
) -> Potential<'a> {
    let n = data.n();
    let p = data.p();
    let mean_g = if n > 0 {
        importance::sample_grad_log_z(family, data)
    } else {
        Array2::zeros((p, p))
    };
    let sum_base: f64 = data
        .rows()
        .iter()
        .map(|&x| model::base_measure(family, x))
        .sum();
    Potential {
        family,
        prior,
        latents,
        n,
        mean_g,
        sum_base,
        mc_n,
        exact_z,
    }
}

/// One constrained Hamiltonian transition from a feasible state. Momentum is
/// standard normal on the packed upper triangle; a position step that would
/// leave the feasible set is skipped and the momentum reflected in the
/// active constraint's direction. The accept test uses independent potential
/// estimates at both endpoints; a trajectory that returns to the exact
/// starting point reuses the current estimate, so the identity proposal
/// (epsilon = 0) is accepted with probability one.
pub fn hmc_transition(
    family: ModelFamily,
    theta: &ThetaMatrix,
    prior: &PriorSpec,
    latents: Option<&Latents>,
    data: &DataMatrix,
    config: &HmcConfig,
) -> Result<Transition> {
    prior.validate()?;
    let p = theta.p();
    if data.p() != p {
        return Err(PegmError::contract("data and theta dimension mismatch"));
    }
    if !model::is_feasible(family, theta) {
        return Err(PegmError::infeasible("starting state is infeasible"));
    }
    let mc_n = config.validate(family, p)?;
    let pot = build_potential(family, prior, latents, data, mc_n, config.exact_z);
    let seed = config.seed;

    let cur = match pot.eval_or_void(theta, mix(seed, 0x3A1))? {
        Some(v) => v,
        None => {
            return Ok(Transition {
                theta: theta.clone(),
                accepted: false,
                potential: f64::NAN,
            })
        }
    };
    let (u_cur, _) = cur;

    if config.epsilon == 0.0 {
        return Ok(Transition {
            theta: theta.clone(),
            accepted: true,
            potential: u_cur,
        });
    }

    let k = packed_len(p);
    let mut rng = stream(mix(seed, 0x3A0));
    let mut mom: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let k_cur: f64 = 0.5 * mom.iter().map(|x| x * x).sum::<f64>();

    let start = pack(theta);
    let mut pos = start.clone();
    let mut theta_cur = theta.clone();
    let eps = config.epsilon;

    // leapfrog with half-step momentum updates at both ends
    let mut grad = match pot.eval_or_void(&theta_cur, mix2(seed, 0x3A3, 0))? {
        Some((_, g)) => g,
        None => {
            return Ok(Transition {
                theta: theta.clone(),
                accepted: false,
                potential: u_cur,
            })
        }
    };
    for (m, g) in mom.iter_mut().zip(&grad) {
        *m -= 0.5 * eps * g;
    }
    for l in 0..config.leapfrog {
        let cand: Vec<f64> = pos.iter().zip(&mom).map(|(x, m)| x + eps * m).collect();
        match constraint_direction(family, p, &cand) {
            None => {
                pos = cand;
                theta_cur = unpack(p, &pos);
            }
            Some(r) if r.is_empty() => {
                for m in &mut mom {
                    *m = -*m;
                }
            }
            Some(r) => reflect(&mut mom, &r),
        }
        let half = if l + 1 == config.leapfrog { 0.5 } else { 1.0 };
        grad = match pot.eval_or_void(&theta_cur, mix2(seed, 0x3A3, (l + 1) as u64))? {
            Some((_, g)) => g,
            None => {
                return Ok(Transition {
                    theta: theta.clone(),
                    accepted: false,
                    potential: u_cur,
                })
            }
        };
        for (m, g) in mom.iter_mut().zip(&grad) {
            *m -= half * eps * g;
        }
    }

    let unchanged = pos
        .iter()
        .zip(&start)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let u_prop = if unchanged {
        u_cur
    } else {
        match pot.eval_or_void(&theta_cur, mix(seed, 0x3A2))? {
            Some((u, _)) => u,
            None => {
                return Ok(Transition {
                    theta: theta.clone(),
                    accepted: false,
                    potential: u_cur,
                })
            }
        }
    };
    let k_prop: f64 = 0.5 * mom.iter().map(|x| x * x).sum::<f64>();
    let log_ratio = (u_cur + k_cur) - (u_prop + k_prop);
    let u: f64 = rng.random();
    if u.ln() < log_ratio {
        debug_assert!(model::is_feasible(family, &theta_cur));
        Ok(Transition {
            theta: theta_cur,
            accepted: true,
            potential: u_prop,
        })
    } else {
        Ok(Transition {
            theta: theta.clone(),
            accepted: false,
            potential: u_cur,
        })
    }
}

/// Full conditional update of the per-entry scale latents: with
/// theta_jk | rho2_jk, lambda ~ normal(0, rho2_jk/lambda) and
/// rho2_jk ~ exponential(1/2), the precision 1/rho2_jk is inverse-Gaussian
/// with mean 1/(|theta_jk| sqrt(lambda)) and shape 1.
pub fn gibbs_update_rho(theta: &ThetaMatrix, lambda: f64, seed: u64) -> Result<Array2<f64>> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(PegmError::contract("lambda must be finite and > 0"));
    }
    let p = theta.p();
    let mut rng = stream(seed);
    let mut rho2 = Array2::zeros((p, p));
    for j in 0..p {
        for k in j..p {
            let a = theta.get(j, k).abs().max(RHO_THETA_FLOOR);
            let mean = 1.0 / (a * lambda.sqrt());
            let dist = InverseGaussian::new(mean, 1.0).expect("positive parameters");
            let v: f64 = dist.sample(&mut rng).max(f64::MIN_POSITIVE);
            let r = 1.0 / v;
            rho2[[j, k]] = r;
            rho2[[k, j]] = r;
        }
    }
    Ok(rho2)
}

/// Conjugate gamma update of the global rate: shape a + K/2 and rate
/// b + sum_{j<=k} theta_jk^2 / (2 rho2_jk), K the number of unique entries.
pub fn gibbs_update_lambda(
    theta: &ThetaMatrix,
    rho2: &Array2<f64>,
    a_lambda: f64,
    b_lambda: f64,
    seed: u64,
) -> Result<f64> {
    if !(a_lambda > 0.0 && b_lambda > 0.0) {
        return Err(PegmError::contract("gamma hyperparameters must be > 0"));
    }
    let p = theta.p();
    if rho2.dim() != (p, p) {
        return Err(PegmError::contract("rho2 has the wrong shape"));
    }
    let mut rate = b_lambda;
    for j in 0..p {
        for k in j..p {
            let r = rho2[[j, k]];
            if !(r > 0.0) {
                return Err(PegmError::contract("rho2 entries must be > 0"));
            }
            let x = theta.get(j, k);
            rate += x * x / (2.0 * r);
        }
    }
    let shape = a_lambda + packed_len(p) as f64 / 2.0;
    let dist = Gamma::new(shape, 1.0 / rate).expect("positive parameters");
    Ok(dist.sample(&mut stream(seed)))
}

/// Run the sampler: scale latents (when present) and the constrained
/// Hamiltonian kernel alternate each iteration. The step size adapts toward
/// an acceptance band during burn-in only, so the post-burn-in kernel is
/// fixed; a post-burn-in acceptance rate below 5% is an error.
pub fn posterior_sample(
    family: ModelFamily,
    data: &DataMatrix,
    prior: &PriorSpec,
    n_draws: usize,
    burn_in: usize,
    config: &HmcConfig,
) -> Result<PosteriorDraws> {
    prior.validate()?;
    if n_draws == 0 {
        return Err(PegmError::contract("n_draws must be >= 1"));
    }
    let p = data.p();
    config.validate(family, p)?;
    let seed = config.seed;

    let mut theta = if data.n() > 0 {
        independence_init(family, data)?
    } else {
        model::project(family, &ThetaMatrix::zeros(p))
    };
    let mut latents = match prior {
        PriorSpec::HighDimLaplace { a_lambda, b_lambda } => {
            Some(Latents::init(p, *a_lambda, *b_lambda))
        }
        PriorSpec::LowDim => None,
    };

    let mut eps = config.epsilon;
    let mut draws = Vec::with_capacity(n_draws);
    let mut energy = Vec::with_capacity(n_draws);
    let mut rho2_trace = Vec::new();
    let mut lambda_trace = Vec::new();
    let mut window_accepts = 0usize;
    let mut kept_accepts = 0usize;

    for t in 0..(burn_in + n_draws) {
        let ti = t as u64;
        if let (Some(lat), PriorSpec::HighDimLaplace { a_lambda, b_lambda }) =
            (latents.as_mut(), prior)
        {
            lat.rho2 = gibbs_update_rho(&theta, lat.lambda, mix2(seed, 0x17C0, ti))?;
            lat.lambda =
                gibbs_update_lambda(&theta, &lat.rho2, *a_lambda, *b_lambda, mix2(seed, 0x17C1, ti))?;
        }
        let step = HmcConfig {
            epsilon: eps,
            seed: mix2(seed, 0x17C2, ti),
            ..config.clone()
        };
        let tr = hmc_transition(family, &theta, prior, latents.as_ref(), data, &step)?;
        theta = tr.theta;
        if t < burn_in {
            if tr.accepted {
                window_accepts += 1;
            }
            if (t + 1) % ADAPT_WINDOW == 0 {
                let rate = window_accepts as f64 / ADAPT_WINDOW as f64;
                if rate < ADAPT_LOW {
                    eps *= 0.8;
                } else if rate > ADAPT_HIGH {
                    eps *= 1.25;
                }
                window_accepts = 0;
            }
        } else {
            if tr.accepted {
                kept_accepts += 1;
            }
            debug_assert!(model::is_feasible(family, &theta));
            draws.push(theta.clone());
            energy.push(tr.potential);
            if let Some(lat) = latents.as_ref() {
                rho2_trace.push(lat.rho2.clone());
                lambda_trace.push(lat.lambda);
            }
        }
    }

    let acceptance_rate = kept_accepts as f64 / n_draws as f64;
    if acceptance_rate < STALL_FLOOR {
        return Err(PegmError::ChainStalled {
            rate: acceptance_rate,
            floor: STALL_FLOOR,
        });
    }
    Ok(PosteriorDraws {
        draws,
        rho2_trace,
        lambda_trace,
        acceptance_rate,
        energy,
        epsilon_final: eps,
    })
}

/// Random-walk Metropolis reference chain with the exact binary normalizer,
/// for validating the Hamiltonian kernel on small models.
pub fn exact_mh_reference(
    data: &DataMatrix,
    prior: &PriorSpec,
    latents: Option<&Latents>,
    n_draws: usize,
    burn_in: usize,
    step_sd: f64,
    seed: u64,
) -> Result<Vec<ThetaMatrix>> {
    prior.validate()?;
    if !(step_sd.is_finite() && step_sd > 0.0) {
        return Err(PegmError::contract("step_sd must be finite and > 0"));
    }
    let p = data.p();
    if p > 10 {
        return Err(PegmError::contract(
            "exact reference chain covers the binary family up to p = 10",
        ));
    }
    let n = data.n() as f64;
    let mean_g = importance::sample_grad_log_z(ModelFamily::Ising, data);
    let log_post = |theta: &ThetaMatrix| -> Result<f64> {
        let (lp, _) = log_prior_and_grad(ModelFamily::Ising, prior, latents, theta)?;
        let log_z = enumeration::ising_log_z(theta)?;
        Ok(n * unique_inner(theta, &mean_g) - n * log_z + lp)
    };

    let mut theta = if data.n() > 0 {
        independence_init(ModelFamily::Ising, data)?
    } else {
        ThetaMatrix::zeros(p)
    };
    let mut cur = log_post(&theta)?;
    let mut rng = stream(seed);
    let normal = Normal::new(0.0, step_sd).expect("valid step sd");
    let mut out = Vec::with_capacity(n_draws);
    for t in 0..(burn_in + n_draws) {
        let mut v = pack(&theta);
        for x in &mut v {
            *x += normal.sample(&mut rng);
        }
        let cand = unpack(p, &v);
        let lp = log_post(&cand)?;
        let u: f64 = rng.random();
        if u.ln() < lp - cur {
            theta = cand;
            cur = lp;
        }
        if t >= burn_in {
            out.push(theta.clone());
        }
    }
    Ok(out)
}

/// Joint-distribution self-consistency check for the scale-mixture updates.
///
/// Two samplers target the same joint law of (theta, rho2, lambda) with no
/// data: direct draws from the hierarchy, and a chain alternating the two
/// Gibbs updates with a direct normal draw of theta given the latents. If
/// the conditionals are derived correctly the two samples agree on every
/// bounded statistic; each gets a two-sample z-test.
#[derive(Clone, Debug)]
pub struct GewekeReport {
    /// (statistic name, two-sided p-value)
    pub statistics: Vec<(String, f64)>,
    pub min_p: f64,
}

pub fn geweke_joint_test(
    a_lambda: f64,
    b_lambda: f64,
    p: usize,
    kept: usize,
    thin: usize,
    seed: u64,
) -> Result<GewekeReport> {
    if p < 2 {
        return Err(PegmError::contract("joint test needs p >= 2"));
    }
    if kept < 100 || thin == 0 {
        return Err(PegmError::contract("need kept >= 100 and thin >= 1"));
    }
    PriorSpec::HighDimLaplace { a_lambda, b_lambda }.validate()?;
    let k = packed_len(p);

    let draw_theta = |rho2: &Array2<f64>, lambda: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut t = ThetaMatrix::zeros(p);
        for j in 0..p {
            for kk in j..p {
                let sd = (rho2[[j, kk]] / lambda).sqrt();
                let z: f64 = rng.sample(StandardNormal);
                t.set(j, kk, sd * z);
            }
        }
        t
    };

    // bounded functionals of the joint state
    let stats = |t: &ThetaMatrix, rho2: &Array2<f64>, lambda: f64| -> [f64; 5] {
        let t01 = t.get(0, 1);
        let t00 = t.get(0, 0);
        [
            1.0 / (1.0 + lambda),
            (-rho2[[0, 0]] / 2.0).exp(),
            t01.abs().tanh(),
            t00 * t00 / (1.0 + t00 * t00),
            (t01 * (lambda / rho2[[0, 1]]).sqrt()).tanh(),
        ]
    };

    // marginal-conditional: independent draws straight from the hierarchy
    let mut rng = stream(mix(seed, 0x6E3E));
    let gamma = Gamma::new(a_lambda, 1.0 / b_lambda).expect("positive parameters");
    let exp_half = Exp::new(0.5).expect("positive rate");
    let mut mc = vec![[0.0; 5]; kept];
    for row in mc.iter_mut() {
        let lambda: f64 = gamma.sample(&mut rng);
        let mut rho2 = Array2::zeros((p, p));
        for j in 0..p {
            for kk in j..p {
                let v: f64 = exp_half.sample(&mut rng);
                rho2[[j, kk]] = v;
                rho2[[kk, j]] = v;
            }
        }
        let t = draw_theta(&rho2, lambda, &mut rng);
        *row = stats(&t, &rho2, lambda);
    }

    // successive-conditional: the chain under test
    let mut rng = stream(mix(seed, 0x5C5C));
    let mut lambda: f64 = gamma.sample(&mut rng);
    let mut rho2 = Array2::ones((p, p));
    let mut theta = draw_theta(&rho2, lambda, &mut rng);
    let mut sc = vec![[0.0; 5]; kept];
    let warmup = 200;
    let mut kept_i = 0;
    let mut sweep = 0u64;
    while kept_i < kept {
        rho2 = gibbs_update_rho(&theta, lambda, mix2(seed, 0xA110, sweep))?;
        lambda = gibbs_update_lambda(&theta, &rho2, a_lambda, b_lambda, mix2(seed, 0xA111, sweep))?;
        theta = draw_theta(&rho2, lambda, &mut rng);
        sweep += 1;
        if sweep as usize > warmup && (sweep as usize - warmup) % thin == 0 {
            sc[kept_i] = stats(&theta, &rho2, lambda);
            kept_i += 1;
        }
    }

    let names = [
        "rate_shrink",
        "scale_decay",
        "edge_tanh",
        "diag_ratio",
        "standardized_tanh",
    ];
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    use statrs::distribution::ContinuousCDF;
    let mut out = Vec::with_capacity(5);
    let mut min_p = 1.0f64;
    for s in 0..5 {
        let m1: f64 = mc.iter().map(|r| r[s]).sum::<f64>() / kept as f64;
        let m2: f64 = sc.iter().map(|r| r[s]).sum::<f64>() / kept as f64;
        let v1: f64 =
            mc.iter().map(|r| (r[s] - m1).powi(2)).sum::<f64>() / (kept as f64 - 1.0);
        // batch means absorb residual autocorrelation in the chain
        let n_batches = 40;
        let bs = kept / n_batches;
        let bmeans: Vec<f64> = (0..n_batches)
            .map(|b| sc[b * bs..(b + 1) * bs].iter().map(|r| r[s]).sum::<f64>() / bs as f64)
            .collect();
        let bm = bmeans.iter().sum::<f64>() / n_batches as f64;
        let v2_mean = bmeans.iter().map(|x| (x - bm).powi(2)).sum::<f64>()
            / (n_batches as f64 - 1.0)
            / n_batches as f64;
        let se = (v1 / kept as f64 + v2_mean).sqrt();
        let z = (m1 - m2) / se;
        let pval = 2.0 * (1.0 - normal.cdf(z.abs()));
        min_p = min_p.min(pval);
        out.push((names[s].to_string(), pval));
    }
    let _ = k;
    Ok(GewekeReport {
        statistics: out,
        min_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn fd_prior_grad(
        family: ModelFamily,
        prior: &PriorSpec,
        latents: Option<&Latents>,
        theta: &ThetaMatrix,
    ) -> Vec<f64> {
        let h = 1e-6;
        let p = theta.p();
        let mut g = Vec::new();
        for j in 0..p {
            for k in j..p {
                let mut up = theta.clone();
                up.set(j, k, theta.get(j, k) + h);
                let mut dn = theta.clone();
                dn.set(j, k, theta.get(j, k) - h);
                let fu = log_prior_and_grad(family, prior, latents, &up).unwrap().0;
                let fd = log_prior_and_grad(family, prior, latents, &dn).unwrap().0;
                g.push((fu - fd) / (2.0 * h));
            }
        }
        g
    }

    #[test]
    fn prior_gradients_match_finite_differences() {
        let mut t = ThetaMatrix::from_diag(&[0.4, -0.7, 1.1]).unwrap();
        t.set(0, 1, -0.3);
        t.set(1, 2, -0.9);
        let (_, g) = log_prior_and_grad(ModelFamily::Ising, &PriorSpec::LowDim, None, &t).unwrap();
        for (a, b) in g.iter().zip(fd_prior_grad(ModelFamily::Ising, &PriorSpec::LowDim, None, &t))
        {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
        }
        let (_, g) =
            log_prior_and_grad(ModelFamily::PoissonGm, &PriorSpec::LowDim, None, &t).unwrap();
        for (a, b) in g
            .iter()
            .zip(fd_prior_grad(ModelFamily::PoissonGm, &PriorSpec::LowDim, None, &t))
        {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
        }
        let mut lat = Latents::init(3, 1.0, 1.0);
        lat.rho2[[0, 1]] = 0.5;
        lat.rho2[[1, 0]] = 0.5;
        lat.lambda = 2.5;
        let prior = PriorSpec::laplace_default();
        let (_, g) = log_prior_and_grad(ModelFamily::Ising, &prior, Some(&lat), &t).unwrap();
        for (a, b) in g
            .iter()
            .zip(fd_prior_grad(ModelFamily::Ising, &prior, Some(&lat), &t))
        {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn reflection_is_an_isometry() {
        let mut rng = stream(99);
        let mut p: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut r: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut r {
            *x /= norm;
        }
        let before: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        reflect(&mut p, &r);
        let after: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(before, after, epsilon = 1e-12);
    }

    #[test]
    fn count_constraint_ties_pick_the_first_entry() {
        // p=3 packed order: (0,0),(0,1),(0,2),(1,1),(1,2),(2,2)
        let v = vec![0.3, 0.5, 0.5, -0.1, 0.2, 0.0];
        let r = constraint_direction(ModelFamily::PoissonGm, 3, &v).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        // feasible: all interactions <= 0
        let v = vec![0.3, -0.5, 0.0, -0.1, -0.2, 0.4];
        assert!(constraint_direction(ModelFamily::PoissonGm, 3, &v).is_none());
    }

    #[test]
    fn nonfinite_candidate_flips_momentum() {
        let v = vec![f64::INFINITY, 0.0, 0.0];
        let r = constraint_direction(ModelFamily::Ising, 2, &v).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn identity_proposal_always_accepts() {
        let rows = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.0]];
        let data = DataMatrix::new(rows, ModelFamily::Ising).unwrap();
        let theta = ThetaMatrix::from_diag(&[0.2, -0.1]).unwrap();
        let config = HmcConfig {
            epsilon: 0.0,
            mc_n: 50,
            seed: 5,
            ..HmcConfig::default()
        };
        for s in 0..5 {
            let step = HmcConfig {
                seed: s,
                ..config.clone()
            };
            let tr = hmc_transition(
                ModelFamily::Ising,
                &theta,
                &PriorSpec::LowDim,
                None,
                &data,
                &step,
            )
            .unwrap();
            assert!(tr.accepted);
            assert_eq!(tr.theta.values(), theta.values());
        }
    }

    #[test]
    fn scale_update_responds_to_the_global_rate() {
        let mut t = ThetaMatrix::zeros(2);
        t.set(0, 1, 1.0);
        let mean_at = |lambda: f64, seed_base: u64| -> f64 {
            let mut acc = 0.0;
            for r in 0..4000u64 {
                let rho2 = gibbs_update_rho(&t, lambda, mix(seed_base, r)).unwrap();
                acc += rho2[[0, 1]];
            }
            acc / 4000.0
        };
        let low = mean_at(0.1, 11);
        let high = mean_at(10.0, 12);
        // E[rho2] = |theta| sqrt(lambda) + 1 under the conditional
        assert!(high > low + 1.0, "low {low}, high {high}");
        assert_abs_diff_eq!(low, 0.1f64.sqrt() + 1.0, epsilon = 0.2);
        assert_abs_diff_eq!(high, 10.0f64.sqrt() + 1.0, epsilon = 0.4);
    }

    #[test]
    fn scale_update_survives_zero_interactions() {
        let t = ThetaMatrix::zeros(3);
        let rho2 = gibbs_update_rho(&t, 1.0, 5).unwrap();
        for v in rho2.iter() {
            assert!(v.is_finite() && *v > 0.0);
        }
    }

    #[test]
    fn rate_update_concentrates_at_large_shape() {
        let t = ThetaMatrix::zeros(2);
        let rho2 = Array2::ones((2, 2));
        let a = 1e8;
        let b = a / 2.5;
        for seed in [1, 2, 3] {
            let l = gibbs_update_lambda(&t, &rho2, a, b, seed).unwrap();
            assert_abs_diff_eq!(l, 2.5, epsilon = 0.01);
        }
        assert_eq!(
            gibbs_update_lambda(&t, &rho2, a, b, 7).unwrap(),
            gibbs_update_lambda(&t, &rho2, a, b, 7).unwrap()
        );
    }

    #[test]
    fn geweke_joint_test_passes() {
        let report = geweke_joint_test(1.0, 1.0, 2, 4000, 5, 31).unwrap();
        assert!(
            report.min_p > 0.01,
            "statistics {:?}",
            report.statistics
        );
    }

    #[test]
    fn prior_moments_recovered_without_data() {
        let data = DataMatrix::new(Array2::zeros((0, 2)), ModelFamily::Ising).unwrap();
        let out = posterior_sample(
            ModelFamily::Ising,
            &data,
            &PriorSpec::LowDim,
            3000,
            1500,
            &HmcConfig {
                seed: 3,
                ..HmcConfig::default()
            },
        )
        .unwrap();
        assert!(out.epsilon_final > 0.1, "adaptation should grow the step");
        let m = out.posterior_mean();
        let mut var01 = 0.0;
        for d in &out.draws {
            var01 += (d.get(0, 1) - m.get(0, 1)).powi(2);
        }
        var01 /= out.draws.len() as f64;
        for j in 0..2 {
            for k in j..2 {
                assert!(m.get(j, k).abs() < 2.0, "mean {}", m.get(j, k));
            }
        }
        assert!((60.0..150.0).contains(&var01), "variance {var01}");
    }

    #[test]
    fn exact_kernel_matches_exact_reference_chain() {
        let mut t0 = ThetaMatrix::from_diag(&[0.3, -0.4]).unwrap();
        t0.set(0, 1, 0.6);
        let data =
            crate::sampler::gibbs_sample(ModelFamily::Ising, &t0, 60, 300, 3, 41).unwrap();
        let hmc = posterior_sample(
            ModelFamily::Ising,
            &data,
            &PriorSpec::LowDim,
            1500,
            500,
            &HmcConfig {
                exact_z: true,
                seed: 13,
                ..HmcConfig::default()
            },
        )
        .unwrap();
        let mh = exact_mh_reference(&data, &PriorSpec::LowDim, None, 20000, 4000, 0.4, 17)
            .unwrap();
        let batch_se = |vals: &[f64]| -> (f64, f64) {
            let nb = 30;
            let bs = vals.len() / nb;
            let means: Vec<f64> = (0..nb)
                .map(|b| vals[b * bs..(b + 1) * bs].iter().sum::<f64>() / bs as f64)
                .collect();
            let m = means.iter().sum::<f64>() / nb as f64;
            let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nb as f64 - 1.0);
            (m, (v / nb as f64).sqrt())
        };
        for (j, k) in [(0, 0), (0, 1), (1, 1)] {
            let a: Vec<f64> = hmc.draws.iter().map(|d| d.get(j, k)).collect();
            let b: Vec<f64> = mh.iter().map(|d| d.get(j, k)).collect();
            let (ma, sa) = batch_se(&a);
            let (mb, sb) = batch_se(&b);
            let se = (sa * sa + sb * sb).sqrt();
            assert!(
                (ma - mb).abs() <= 3.0 * se,
                "entry ({j},{k}): {ma} vs {mb}, se {se}"
            );
        }
        assert!(hmc.acceptance_rate > 0.4 && hmc.acceptance_rate <= 1.0);
    }

    #[test]
    fn count_chain_stays_feasible_and_is_deterministic() {
        let mut t0 = ThetaMatrix::from_diag(&[0.4, 0.2]).unwrap();
        t0.set(0, 1, -0.3);
        let data =
            crate::sampler::gibbs_sample(ModelFamily::PoissonGm, &t0, 40, 300, 3, 43).unwrap();
        let config = HmcConfig {
            mc_n: 400,
            seed: 19,
            epsilon: 0.02,
            ..HmcConfig::default()
        };
        let run = || {
            posterior_sample(
                ModelFamily::PoissonGm,
                &data,
                &PriorSpec::laplace_default(),
                120,
                150,
                &config,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        for (da, db) in a.draws.iter().zip(&b.draws) {
            assert_eq!(da.values(), db.values());
        }
        for d in &a.draws {
            assert!(model::is_feasible(ModelFamily::PoissonGm, d));
        }
        assert!(!a.lambda_trace.is_empty());
        assert_eq!(a.rho2_trace.len(), a.draws.len());
    }

    #[test]
    fn hopeless_step_size_reports_a_stall() {
        let mut t0 = ThetaMatrix::from_diag(&[0.3, -0.2]).unwrap();
        t0.set(0, 1, 0.5);
        let data =
            crate::sampler::gibbs_sample(ModelFamily::Ising, &t0, 50, 300, 3, 47).unwrap();
        let out = posterior_sample(
            ModelFamily::Ising,
            &data,
            &PriorSpec::LowDim,
            80,
            0,
            &HmcConfig {
                epsilon: 1e4,
                exact_z: true,
                seed: 23,
                ..HmcConfig::default()
            },
        );
        match out {
            Err(PegmError::ChainStalled { rate, .. }) => assert!(rate < 0.05),
            other => panic!("expected a stall, got {other:?}"),
        }
    }
}
