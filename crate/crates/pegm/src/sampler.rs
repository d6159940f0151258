//! Drawing from the models: the independence proposal (exact, column-wise),
//! systematic-scan Gibbs, and exact accept-reject for the discrete families.

use crate::error::{PegmError, Result};
use crate::model::{self, DataMatrix, ModelFamily, ThetaMatrix};
use crate::rng;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

/// Natural parameters above this overflow the count family's rate exp(s).
const PGM_RATE_CAP: f64 = 700.0;

/// Proposal draw from the independence model at phi = diag(theta), bundled
/// with everything the importance estimators need to stay consistent.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub rows: Array2<f64>,
    /// Diagonal parameter the rows were drawn from.
    pub phi: ThetaMatrix,
    pub seed: u64,
}

impl SampleBatch {
    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.rows.ncols()
    }
}

/// Accept-reject output: exact draws plus the observed acceptance rate.
#[derive(Clone, Debug)]
pub struct AcceptReject {
    pub data: DataMatrix,
    pub acceptance_rate: f64,
    pub tries: usize,
}

fn check_diag(family: ModelFamily, theta: &ThetaMatrix) -> Result<()> {
    for j in 0..theta.p() {
        let d = theta.get(j, j);
        match family {
            ModelFamily::Ising => {}
            ModelFamily::PoissonGm => {
                if d > PGM_RATE_CAP {
                    return Err(PegmError::RateOverflow { node: j, value: d });
                }
            }
            ModelFamily::GaussianOracle => {
                if d <= 0.0 {
                    return Err(PegmError::domain(format!(
                        "gaussian independence sampling needs theta_jj > 0, node {j} has {d}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// log z of the independence model at phi = diag(theta), in closed form:
/// binary sum log(1+e^d), count sum e^d, gaussian sum (log(2 pi) - log d)/2.
pub fn log_z_phi(family: ModelFamily, theta: &ThetaMatrix) -> Result<f64> {
    check_diag(family, theta)?;
    let mut s = 0.0;
    for j in 0..theta.p() {
        let d = theta.get(j, j);
        s += match family {
            ModelFamily::Ising => ln_1p_exp(d),
            ModelFamily::PoissonGm => d.exp(),
            ModelFamily::GaussianOracle => {
                0.5 * ((2.0 * std::f64::consts::PI).ln() - d.ln())
            }
        };
    }
    Ok(s)
}

/// log(1 + e^x) without overflow.
pub fn ln_1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// e^x / (1 + e^x) without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn draw_node(family: ModelFamily, natural: f64, rng: &mut impl Rng) -> f64 {
    match family {
        ModelFamily::Ising => f64::from(rng.random::<f64>() < sigmoid(natural)),
        ModelFamily::PoissonGm => {
            let rate = natural.exp();
            if rate == 0.0 {
                0.0
            } else {
                Poisson::new(rate).expect("rate checked positive").sample(rng)
            }
        }
        ModelFamily::GaussianOracle => {
            // natural is the precision here (diagonal entry), mean 0
            Normal::new(0.0, (1.0 / natural).sqrt())
                .expect("positive variance")
                .sample(rng)
        }
    }
}

/// N independent rows from the independence model at diag(theta). Column j is
/// generated on its own seeded stream, so the batch is bit-identical for a
/// fixed seed no matter how many threads fill it.
pub fn sample_independence(
    family: ModelFamily,
    theta: &ThetaMatrix,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    check_diag(family, theta)?;
    let p = theta.p();
    let columns: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut col_rng = rng::column_stream(seed, j);
            let d = theta.get(j, j);
            (0..n)
                .map(|_| match family {
                    ModelFamily::Ising => {
                        f64::from(col_rng.random::<f64>() < sigmoid(d))
                    }
                    ModelFamily::PoissonGm => {
                        let rate = d.exp();
                        if rate == 0.0 {
                            0.0
                        } else {
                            Poisson::new(rate).expect("rate checked").sample(&mut col_rng)
                        }
                    }
                    ModelFamily::GaussianOracle => Normal::new(0.0, (1.0 / d).sqrt())
                        .expect("positive variance")
                        .sample(&mut col_rng),
                })
                .collect()
        })
        .collect();
    let mut rows = Array2::zeros((n, p));
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            rows[[i, j]] = v;
        }
    }
    Ok(SampleBatch {
        rows,
        phi: theta.diag_part(),
        seed,
    })
}

/// One systematic Gibbs sweep in place; errors if a count node's conditional
/// rate overflows.
fn gibbs_sweep(
    family: ModelFamily,
    theta: &ThetaMatrix,
    x: &mut [f64],
    chain_rng: &mut impl Rng,
) -> Result<()> {
    let p = theta.p();
    for j in 0..p {
        let s = model::node_conditional_natural_param(theta, x, j)?;
        x[j] = match family {
            ModelFamily::Ising => f64::from(chain_rng.random::<f64>() < sigmoid(s)),
            ModelFamily::PoissonGm => {
                if s > PGM_RATE_CAP {
                    return Err(PegmError::RateOverflow { node: j, value: s });
                }
                let rate = s.exp();
                if rate == 0.0 {
                    0.0
                } else {
                    Poisson::new(rate).expect("rate checked").sample(chain_rng)
                }
            }
            ModelFamily::GaussianOracle => {
                let prec = theta.get(j, j);
                // s = theta_jj + 2 sum theta_jk x_k, so the conditional mean
                // -(1/theta_jj) sum theta_jk x_k equals -(s - theta_jj)/(2 theta_jj)
                let mean = -(s - prec) / (2.0 * prec);
                Normal::new(mean, (1.0 / prec).sqrt())
                    .expect("positive variance")
                    .sample(chain_rng)
            }
        };
    }
    Ok(())
}

/// A resumable systematic-scan Gibbs chain over a single state vector, for
/// callers that interleave sweeps with their own bookkeeping (time-boxed
/// runs, streaming statistics) instead of materializing a sample matrix.
pub struct GibbsChain {
    family: ModelFamily,
    theta: ThetaMatrix,
    state: Vec<f64>,
    rng: rand_chacha::ChaCha8Rng,
}

impl GibbsChain {
    /// Seeded exactly like `gibbs_sample`: the initial state is one
    /// independence draw, the sweeps run on their own stream.
    pub fn new(family: ModelFamily, theta: &ThetaMatrix, seed: u64) -> Result<Self> {
        if !model::is_feasible(family, theta) {
            return Err(PegmError::infeasible(format!(
                "gibbs sampling requires a feasible parameter for {}",
                family.name()
            )));
        }
        let init = sample_independence(family, theta, 1, rng::mix(seed, 0x1217))?;
        Ok(GibbsChain {
            family,
            theta: theta.clone(),
            state: init.rows.row(0).to_vec(),
            rng: rng::stream(rng::mix(seed, 0xC4A1)),
        })
    }

    /// One full sweep in place; the returned slice is the updated state.
    pub fn sweep(&mut self) -> Result<&[f64]> {
        gibbs_sweep(self.family, &self.theta, &mut self.state, &mut self.rng)?;
        Ok(&self.state)
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }
}

/// Systematic-scan Gibbs chain: initialize from one independence draw, run
/// `burn_in` sweeps, then record every `thin`-th sweep until `n` rows are
/// collected. With burn_in 0 and thin 1 the first row is one sweep from the
/// initial state.
pub fn gibbs_sample(
    family: ModelFamily,
    theta: &ThetaMatrix,
    n: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
) -> Result<DataMatrix> {
    if thin == 0 {
        return Err(PegmError::contract("thin must be >= 1"));
    }
    let mut chain = GibbsChain::new(family, theta, seed)?;
    let p = theta.p();
    let mut rows = Array2::zeros((n, p));
    for _ in 0..burn_in {
        chain.sweep()?;
    }
    for i in 0..n {
        for _ in 0..thin {
            chain.sweep()?;
        }
        for (j, &v) in chain.state().iter().enumerate() {
            rows[[i, j]] = v;
        }
    }
    Ok(DataMatrix::from_rows_unchecked(rows))
}

pub const GIBBS_DEFAULT_BURN_IN: usize = 1000;
pub const GIBBS_DEFAULT_THIN: usize = 5;

/// Log envelope constant: proposals from the independence part accept with
/// probability exp(w - log_b), which is a valid probability because
/// w <= log_b holds by construction of b.
fn log_envelope(family: ModelFamily, theta: &ThetaMatrix) -> Result<f64> {
    match family {
        // interactions are <= 0, so w = 2 sum theta_jk y_j y_k <= 0 = log 1
        ModelFamily::PoissonGm => Ok(0.0),
        // y_j y_k <= 1 and there are < p^2/2 unordered pairs
        ModelFamily::Ising => {
            let p = theta.p();
            let max_off = theta
                .edges()
                .iter()
                .map(|&(_, _, v)| v)
                .fold(0.0f64, f64::max);
            Ok((p * p) as f64 * max_off.max(0.0))
        }
        ModelFamily::GaussianOracle => Err(PegmError::contract(
            "accept-reject has no finite envelope for the gaussian family under an \
             independence proposal",
        )),
    }
}

/// Exact sampler for the discrete families by rejection from the independence
/// part. Errors with the partial result when max_tries runs out.
pub fn accept_reject_sample(
    family: ModelFamily,
    theta: &ThetaMatrix,
    n: usize,
    max_tries: usize,
    seed: u64,
) -> Result<AcceptReject> {
    if !model::is_feasible(family, theta) {
        return Err(PegmError::infeasible(format!(
            "accept_reject_sample requires a feasible parameter for {}",
            family.name()
        )));
    }
    check_diag(family, theta)?;
    let log_b = log_envelope(family, theta)?;
    let p = theta.p();
    let edges = theta.edges();
    let mut draw_rng = rng::stream(rng::mix(seed, 0xACC3));
    let mut accepted: Vec<f64> = Vec::with_capacity(n * p);
    let mut accepted_n = 0usize;
    let mut tries = 0usize;
    let mut row = vec![0.0; p];
    while accepted_n < n && tries < max_tries {
        for (j, v) in row.iter_mut().enumerate() {
            *v = draw_node(family, theta.get(j, j), &mut draw_rng);
        }
        tries += 1;
        let w = model::interaction_log_weight(family, &edges, &row);
        if family == ModelFamily::PoissonGm {
            // nonpositive interactions and nonnegative counts bound w by 0
            assert!(
                w <= 1e-12,
                "count-family importance weight above one: log w = {w}"
            );
        }
        debug_assert!(w <= log_b + 1e-9, "weight exceeds envelope: {w} > {log_b}");
        let r = (w - log_b).exp();
        if draw_rng.random::<f64>() < r {
            accepted.extend_from_slice(&row);
            accepted_n += 1;
        }
    }
    let rate = accepted_n as f64 / tries.max(1) as f64;
    let rows = Array2::from_shape_vec((accepted_n, p), accepted)
        .expect("row-major accepted buffer");
    if accepted_n < n {
        return Err(PegmError::AcceptRejectExhausted {
            tries,
            requested: n,
            accepted_n,
            rate,
            rows,
        });
    }
    Ok(AcceptReject {
        data: DataMatrix::from_rows_unchecked(rows),
        acceptance_rate: rate,
        tries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumeration;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_z_phi_matches_enumeration() {
        let t = ThetaMatrix::from_diag(&[0.4, -0.7, 1.1]).unwrap();
        assert_abs_diff_eq!(
            log_z_phi(ModelFamily::Ising, &t).unwrap(),
            enumeration::ising_log_z(&t).unwrap(),
            epsilon = 1e-12
        );
        let tp = ThetaMatrix::from_diag(&[0.3, -0.2]).unwrap();
        assert_abs_diff_eq!(
            log_z_phi(ModelFamily::PoissonGm, &tp).unwrap(),
            enumeration::pgm_truncated_log_z(&tp, 60).unwrap(),
            epsilon = 1e-9
        );
        let tg = ThetaMatrix::from_diag(&[2.0, 0.5]).unwrap();
        assert_abs_diff_eq!(
            log_z_phi(ModelFamily::GaussianOracle, &tg).unwrap(),
            enumeration::gaussian_log_z(&tg).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_z_phi_ignores_interactions() {
        let mut t = ThetaMatrix::from_diag(&[0.4, -0.7]).unwrap();
        let before = log_z_phi(ModelFamily::Ising, &t).unwrap();
        t.set(0, 1, -0.9);
        assert_eq!(before, log_z_phi(ModelFamily::Ising, &t).unwrap());
    }

    #[test]
    fn gaussian_needs_positive_diagonal() {
        let t = ThetaMatrix::from_diag(&[1.0, -0.5]).unwrap();
        assert!(log_z_phi(ModelFamily::GaussianOracle, &t).is_err());
        assert!(sample_independence(ModelFamily::GaussianOracle, &t, 10, 1).is_err());
    }

    #[test]
    fn independence_means_match_rates() {
        let t = ThetaMatrix::from_diag(&[0.8, -1.0]).unwrap();
        let n = 40_000;
        let b = sample_independence(ModelFamily::Ising, &t, n, 9).unwrap();
        let means = b.rows.mean_axis(ndarray::Axis(0)).unwrap();
        assert_abs_diff_eq!(means[0], sigmoid(0.8), epsilon = 0.01);
        assert_abs_diff_eq!(means[1], sigmoid(-1.0), epsilon = 0.01);

        let b = sample_independence(ModelFamily::PoissonGm, &t, n, 10).unwrap();
        let means = b.rows.mean_axis(ndarray::Axis(0)).unwrap();
        assert_abs_diff_eq!(means[0], 0.8f64.exp(), epsilon = 0.05);
        assert_abs_diff_eq!(means[1], (-1.0f64).exp(), epsilon = 0.02);

        let tg = ThetaMatrix::from_diag(&[4.0, 0.25]).unwrap();
        let b = sample_independence(ModelFamily::GaussianOracle, &tg, n, 11).unwrap();
        let var0 = b.rows.column(0).iter().map(|v| v * v).sum::<f64>() / n as f64;
        let var1 = b.rows.column(1).iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(var0, 0.25, epsilon = 0.01);
        assert_abs_diff_eq!(var1, 4.0, epsilon = 0.15);
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let t = ThetaMatrix::from_diag(&[0.2, 0.2, 0.2]).unwrap();
        let a = sample_independence(ModelFamily::Ising, &t, 100, 5).unwrap();
        let b = sample_independence(ModelFamily::Ising, &t, 100, 5).unwrap();
        let c = sample_independence(ModelFamily::Ising, &t, 100, 6).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn gibbs_matches_independence_when_diagonal() {
        let t = ThetaMatrix::from_diag(&[0.5, -0.5]).unwrap();
        let d = gibbs_sample(ModelFamily::Ising, &t, 4000, 50, 2, 13).unwrap();
        let means = d.means();
        assert_abs_diff_eq!(means[0], sigmoid(0.5), epsilon = 0.03);
        assert_abs_diff_eq!(means[1], sigmoid(-0.5), epsilon = 0.03);
    }

    #[test]
    fn gibbs_tracks_pairwise_dependence() {
        // strong negative interaction suppresses the (1,1) configuration
        let mut t = ThetaMatrix::from_diag(&[1.0, 1.0]).unwrap();
        t.set(0, 1, -2.0);
        let d = gibbs_sample(ModelFamily::Ising, &t, 6000, 200, 3, 29).unwrap();
        let both = d
            .rows()
            .outer_iter()
            .filter(|r| r[0] == 1.0 && r[1] == 1.0)
            .count() as f64
            / d.n() as f64;
        let probs = enumeration::ising_state_log_probs(&t).unwrap();
        let exact = probs[3].exp(); // state 0b11
        assert_abs_diff_eq!(both, exact, epsilon = 0.03);
    }

    #[test]
    fn gibbs_minimal_run_is_one_sweep() {
        let t = ThetaMatrix::from_diag(&[0.0, 0.0]).unwrap();
        let d = gibbs_sample(ModelFamily::Ising, &t, 1, 0, 1, 17).unwrap();
        assert_eq!(d.n(), 1);
    }

    #[test]
    fn gibbs_rejects_infeasible_parameters() {
        let mut t = ThetaMatrix::from_diag(&[0.1, 0.1]).unwrap();
        t.set(0, 1, 0.2);
        assert!(gibbs_sample(ModelFamily::PoissonGm, &t, 10, 0, 1, 3).is_err());
    }

    #[test]
    fn pgm_rate_overflow_names_the_node() {
        let t = ThetaMatrix::from_diag(&[1.0, 800.0]).unwrap();
        match gibbs_sample(ModelFamily::PoissonGm, &t, 1, 0, 1, 3) {
            Err(PegmError::RateOverflow { node, .. }) => assert_eq!(node, 1),
            other => panic!("expected rate overflow, got {other:?}"),
        }
    }

    #[test]
    fn accept_reject_diagonal_has_unit_rate() {
        let t = ThetaMatrix::from_diag(&[0.3, -0.4]).unwrap();
        let out = accept_reject_sample(ModelFamily::Ising, &t, 200, 10_000, 21).unwrap();
        assert_eq!(out.acceptance_rate, 1.0);
        assert_eq!(out.tries, 200);
    }

    #[test]
    fn accept_reject_matches_enumeration() {
        let mut t = ThetaMatrix::from_diag(&[0.4, 0.2]).unwrap();
        t.set(0, 1, -1.0);
        let out = accept_reject_sample(ModelFamily::Ising, &t, 6000, 2_000_000, 33).unwrap();
        let probs = enumeration::ising_state_log_probs(&t).unwrap();
        for s in 0..4usize {
            let freq = out
                .data
                .rows()
                .outer_iter()
                .filter(|r| {
                    r[0] == f64::from(s & 1 == 1) && r[1] == f64::from((s >> 1) & 1 == 1)
                })
                .count() as f64
                / out.data.n() as f64;
            assert_abs_diff_eq!(freq, probs[s].exp(), epsilon = 0.025);
        }
    }

    #[test]
    fn accept_reject_exhaustion_returns_partial_rows() {
        let mut t = ThetaMatrix::from_diag(&[2.0, 2.0]).unwrap();
        t.set(0, 1, -8.0);
        match accept_reject_sample(ModelFamily::PoissonGm, &t, 500, 40, 7) {
            Err(PegmError::AcceptRejectExhausted {
                tries,
                requested,
                accepted_n,
                rows,
                ..
            }) => {
                assert_eq!(tries, 40);
                assert_eq!(requested, 500);
                assert_eq!(rows.nrows(), accepted_n);
                assert!(accepted_n < 500);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn accept_reject_rejects_gaussian() {
        let t = ThetaMatrix::from_diag(&[1.0, 1.0]).unwrap();
        assert!(accept_reject_sample(ModelFamily::GaussianOracle, &t, 10, 100, 1).is_err());
    }
}
