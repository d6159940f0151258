//! Importance-sampled partition-function ratios and their gradients.
//!
//! Proposals come from the model's own independence part phi = diag(theta),
//! whose normalizer is available in closed form. For a batch Y_1..Y_N from
//! phi, the per-row log weight is the interaction energy
//! w_i = log q(Y_i; theta) - log q(Y_i; phi), and
//!
//!   T_N = (1/N) sum_i e^{w_i}            estimates z(theta) / z(phi),
//!   (1/N) sum_i g(Y_i) e^{w_i}           estimates the gradient of the ratio,
//!
//! where g is the per-row gradient statistic matrix. The self-normalized
//! quotient of the two estimates the gradient of log z.

use crate::error::{PegmError, Result};
use crate::model::{self, DataMatrix, ModelFamily, ThetaMatrix};
use crate::sampler::{log_z_phi, SampleBatch};
use ndarray::Array2;
use rayon::prelude::*;

/// Default multiplier for `recommended_n`.
pub const DEFAULT_BATCH_SCALE: f64 = 100.0;

/// ESS below this fraction of N logs a reliability warning.
pub const ESS_WARN_FRACTION: f64 = 0.01;

/// All log weights at or below this underflow e^w to zero.
const DEGENERACY_FLOOR: f64 = -745.0;

/// Rows per parallel accumulation chunk; chunks are combined in index order
/// so results do not depend on thread count.
const CHUNK: usize = 1024;

/// Proposal size that scales linearly with dimension: ceil(c * p).
pub fn recommended_n(p: usize, c: f64) -> usize {
    assert!(c > 0.0 && p > 0, "need c > 0 and p > 0");
    (c * p as f64).ceil() as usize
}

/// Everything one batch says about z(theta)/z(phi) and its gradients.
#[derive(Clone, Debug)]
pub struct EstimatorOutput {
    /// Ratio estimate T_N (> 0).
    pub z_ratio: f64,
    /// Gradient-of-ratio estimate; equals grad_log_z * z_ratio exactly.
    pub grad_z_ratio: Array2<f64>,
    /// Self-normalized gradient-of-log estimate.
    pub grad_log_z: Array2<f64>,
    /// log z(phi) + log T_N.
    pub log_z_hat: f64,
    /// Batch size the estimate used.
    pub n: usize,
    /// Effective sample size (sum w)^2 / sum w^2 of the unnormalized weights.
    pub ess: f64,
    /// Largest normalized weight; near 1 means one row dominates.
    pub max_weight_share: f64,
}

struct WeightStats {
    max: f64,
    /// sum of e^{w - max}
    den: f64,
    ess: f64,
}

fn check_batch(theta: &ThetaMatrix, batch: &SampleBatch) -> Result<()> {
    if batch.phi.p() != theta.p() {
        return Err(PegmError::contract(format!(
            "batch proposal has p = {}, theta has p = {}",
            batch.phi.p(),
            theta.p()
        )));
    }
    if !batch.phi.edges().is_empty() {
        return Err(PegmError::contract(
            "batch proposal must be an independence (diagonal) parameter",
        ));
    }
    for j in 0..theta.p() {
        if batch.phi.get(j, j) != theta.get(j, j) {
            return Err(PegmError::contract(format!(
                "batch proposal diagonal differs from diag(theta) at node {j}: {} vs {}",
                batch.phi.get(j, j),
                theta.get(j, j)
            )));
        }
    }
    if batch.n() == 0 {
        return Err(PegmError::contract("batch is empty"));
    }
    Ok(())
}

/// Per-row log weights. For a feasible count-family parameter every weight is
/// at most one; that bound is asserted per sample.
fn log_weights(family: ModelFamily, theta: &ThetaMatrix, batch: &SampleBatch) -> Vec<f64> {
    let edges = theta.edges();
    let p = batch.p();
    let slice = batch
        .rows
        .as_slice()
        .expect("sample batches are standard layout");
    let assert_bounded = family == ModelFamily::PoissonGm && model::is_feasible(family, theta);
    (0..batch.n())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|i| {
            let w = model::interaction_log_weight(family, &edges, &slice[i * p..(i + 1) * p]);
            if assert_bounded {
                assert!(
                    w <= 1e-12,
                    "count-family importance weight above one: log w = {w}"
                );
            }
            w
        })
        .collect()
}

fn weight_stats(w: &[f64]) -> Result<WeightStats> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut den = 0.0;
    let mut den2 = 0.0;
    for &wi in w {
        let e = (wi - max).exp();
        den += e;
        den2 += e * e;
    }
    let ess = den * den / den2;
    if max <= DEGENERACY_FLOOR {
        return Err(PegmError::WeightDegeneracy { ess, n: w.len() });
    }
    if ess < ESS_WARN_FRACTION * w.len() as f64 {
        log::warn!(
            "effective sample size {ess:.1} of {} below {:.0}%: estimates unreliable",
            w.len(),
            ESS_WARN_FRACTION * 100.0
        );
    }
    Ok(WeightStats { max, den, ess })
}

fn warn_variance_condition(family: ModelFamily, theta: &ThetaMatrix, delta: f64) {
    if !model::variance_condition(family, theta, delta) {
        log::warn!(
            "second-moment condition fails for {} at delta = {delta}: the estimator \
             variance bound does not apply",
            family.name()
        );
    }
}

/// Estimate z(theta) / z(phi) from one proposal batch.
pub fn estimate_z_ratio(
    family: ModelFamily,
    theta: &ThetaMatrix,
    batch: &SampleBatch,
) -> Result<f64> {
    check_batch(theta, batch)?;
    warn_variance_condition(family, theta, 0.0);
    let w = log_weights(family, theta, batch);
    let stats = weight_stats(&w)?;
    Ok((stats.max + (stats.den / batch.n() as f64).ln()).exp())
}

/// Estimate the gradient of z(theta)/z(phi) from one proposal batch.
pub fn estimate_grad_z_ratio(
    family: ModelFamily,
    theta: &ThetaMatrix,
    batch: &SampleBatch,
) -> Result<Array2<f64>> {
    Ok(estimate_grad_log_z(family, theta, batch)?.grad_z_ratio)
}

/// Full estimator output: ratio, both gradients, and weight diagnostics, all
/// from a single weight pass over the batch.
pub fn estimate_grad_log_z(
    family: ModelFamily,
    theta: &ThetaMatrix,
    batch: &SampleBatch,
) -> Result<EstimatorOutput> {
    check_batch(theta, batch)?;
    warn_variance_condition(family, theta, 0.1);
    let n = batch.n();
    let p = batch.p();
    let w = log_weights(family, theta, batch);
    let stats = weight_stats(&w)?;
    let slice = batch
        .rows
        .as_slice()
        .expect("sample batches are standard layout");
    // weighted gradient statistics, fixed-size chunks combined in order
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Array2<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut acc = Array2::zeros((p, p));
            for i in lo..hi {
                let e = (w[i] - stats.max).exp();
                if e > 0.0 {
                    model::accumulate_grad_stats(
                        family,
                        &slice[i * p..(i + 1) * p],
                        e,
                        &mut acc,
                    );
                }
            }
            acc
        })
        .collect();
    let mut num = Array2::zeros((p, p));
    for part in partials {
        num += &part;
    }
    model::mirror_upper(&mut num);
    let grad_log_z = &num / stats.den;
    let z_ratio = (stats.max + (stats.den / n as f64).ln()).exp();
    // defined as the product so the ratio identity holds exactly
    let grad_z_ratio = &grad_log_z * z_ratio;
    let log_z_hat = log_z_phi(family, theta)? + stats.max + (stats.den / n as f64).ln();
    Ok(EstimatorOutput {
        z_ratio,
        grad_z_ratio,
        grad_log_z,
        log_z_hat,
        n,
        ess: stats.ess,
        max_weight_share: 1.0 / stats.den,
    })
}

/// Comparator: gradient of log z from model samples (Gibbs or exact), as the
/// plain average of the gradient statistics.
pub fn sample_grad_log_z(family: ModelFamily, data: &DataMatrix) -> Array2<f64> {
    let p = data.p();
    let mut acc = Array2::zeros((p, p));
    for row in data.rows().outer_iter() {
        model::accumulate_grad_stats(
            family,
            row.as_slice().expect("row-major data"),
            1.0,
            &mut acc,
        );
    }
    model::mirror_upper(&mut acc);
    if data.n() > 0 {
        acc /= data.n() as f64;
    }
    acc
}

/// Self-normalized importance estimate of E[g(X)] under the model at theta,
/// using a batch from its independence part.
pub fn self_normalized_expectation(
    family: ModelFamily,
    theta: &ThetaMatrix,
    g: impl Fn(&[f64]) -> f64,
    batch: &SampleBatch,
) -> Result<f64> {
    check_batch(theta, batch)?;
    let w = log_weights(family, theta, batch);
    let stats = weight_stats(&w)?;
    let p = batch.p();
    let slice = batch.rows.as_slice().expect("standard layout");
    let mut num = 0.0;
    for i in 0..batch.n() {
        let e = (w[i] - stats.max).exp();
        if e > 0.0 {
            num += e * g(&slice[i * p..(i + 1) * p]);
        }
    }
    Ok(num / stats.den)
}

/// First and second conditional moments of a binary model in one weight pass:
/// returns (E[h], E[h h^T]) with E[h_k h_k] = E[h_k] on the diagonal.
/// This is the inner loop of the hidden-unit E-step.
pub(crate) fn binary_moments(
    theta: &ThetaMatrix,
    batch: &SampleBatch,
) -> Result<(Vec<f64>, Array2<f64>)> {
    check_batch(theta, batch)?;
    let w = log_weights(ModelFamily::Ising, theta, batch);
    let stats = weight_stats(&w)?;
    let m = batch.p();
    let slice = batch.rows.as_slice().expect("standard layout");
    let mut first = vec![0.0; m];
    let mut second = Array2::zeros((m, m));
    for i in 0..batch.n() {
        let e = (w[i] - stats.max).exp();
        if e == 0.0 {
            continue;
        }
        let row = &slice[i * m..(i + 1) * m];
        for k in 0..m {
            if row[k] == 1.0 {
                first[k] += e;
                second[[k, k]] += e;
                for k2 in (k + 1)..m {
                    if row[k2] == 1.0 {
                        second[[k, k2]] += e;
                        second[[k2, k]] += e;
                    }
                }
            }
        }
    }
    for v in &mut first {
        *v /= stats.den;
    }
    second /= stats.den;
    Ok((first, second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumeration;
    use crate::sampler::sample_independence;
    use approx::assert_abs_diff_eq;

    fn ising3() -> ThetaMatrix {
        let mut t = ThetaMatrix::from_diag(&[0.3, -0.2, 0.1]).unwrap();
        t.set(0, 1, 0.25);
        t.set(0, 2, -0.15);
        t.set(1, 2, 0.2);
        t
    }

    #[test]
    fn diagonal_theta_gives_unit_ratio_exactly() {
        let t = ThetaMatrix::from_diag(&[0.4, -0.9]).unwrap();
        let batch = sample_independence(ModelFamily::Ising, &t, 512, 3).unwrap();
        let out = estimate_grad_log_z(ModelFamily::Ising, &t, &batch).unwrap();
        assert_eq!(out.z_ratio, 1.0);
        assert_eq!(estimate_z_ratio(ModelFamily::Ising, &t, &batch).unwrap(), 1.0);
        assert_eq!(out.ess, 512.0);
        assert_eq!(out.max_weight_share, 1.0 / 512.0);
    }

    #[test]
    fn ratio_identity_is_exact() {
        let t = ising3();
        let batch = sample_independence(ModelFamily::Ising, &t, 4096, 17).unwrap();
        let out = estimate_grad_log_z(ModelFamily::Ising, &t, &batch).unwrap();
        for (a, b) in out
            .grad_z_ratio
            .iter()
            .zip(out.grad_log_z.iter().map(|g| g * out.z_ratio))
        {
            assert_eq!(*a, b);
        }
        assert!(out.z_ratio > 0.0);
        assert!(out.ess <= out.n as f64 && out.ess >= 1.0);
        assert!(out.max_weight_share > 0.0 && out.max_weight_share <= 1.0);
    }

    #[test]
    fn ising_estimates_match_enumeration() {
        let t = ising3();
        let batch = sample_independence(ModelFamily::Ising, &t, 60_000, 7).unwrap();
        let out = estimate_grad_log_z(ModelFamily::Ising, &t, &batch).unwrap();
        let (log_z, grad) = enumeration::ising_log_z_and_grad(&t).unwrap();
        let log_phi = log_z_phi(ModelFamily::Ising, &t).unwrap();
        let exact_ratio = (log_z - log_phi).exp();
        assert_abs_diff_eq!(out.z_ratio, exact_ratio, epsilon = 0.01 * exact_ratio);
        assert_abs_diff_eq!(out.log_z_hat, log_z, epsilon = 0.01);
        for j in 0..3 {
            for k in 0..3 {
                assert_abs_diff_eq!(out.grad_log_z[[j, k]], grad[[j, k]], epsilon = 0.02);
            }
        }
    }

    #[test]
    fn pgm_estimates_match_truncated_enumeration() {
        let mut t = ThetaMatrix::from_diag(&[0.4, 0.1]).unwrap();
        t.set(0, 1, -0.25);
        let batch = sample_independence(ModelFamily::PoissonGm, &t, 60_000, 29).unwrap();
        let out = estimate_grad_log_z(ModelFamily::PoissonGm, &t, &batch).unwrap();
        let log_z = enumeration::pgm_truncated_log_z(&t, 50).unwrap();
        let grad = enumeration::pgm_truncated_grad(&t, 50).unwrap();
        assert_abs_diff_eq!(out.log_z_hat, log_z, epsilon = 0.01);
        for j in 0..2 {
            for k in 0..2 {
                assert_abs_diff_eq!(out.grad_log_z[[j, k]], grad[[j, k]], epsilon = 0.02);
            }
        }
    }

    #[test]
    fn gaussian_estimates_match_closed_forms() {
        let mut t = ThetaMatrix::from_diag(&[2.0, 1.5, 1.2]).unwrap();
        t.set(0, 1, 0.3);
        t.set(1, 2, -0.25);
        let batch =
            sample_independence(ModelFamily::GaussianOracle, &t, 120_000, 41).unwrap();
        let out = estimate_grad_log_z(ModelFamily::GaussianOracle, &t, &batch).unwrap();
        let log_z = enumeration::gaussian_log_z(&t).unwrap();
        let grad = enumeration::gaussian_grad_log_z(&t).unwrap();
        let exact_ratio =
            (log_z - log_z_phi(ModelFamily::GaussianOracle, &t).unwrap()).exp();
        assert_abs_diff_eq!(out.z_ratio, exact_ratio, epsilon = 0.02 * exact_ratio);
        for j in 0..3 {
            for k in 0..3 {
                assert_abs_diff_eq!(out.grad_log_z[[j, k]], grad[[j, k]], epsilon = 0.02);
            }
        }
    }

    #[test]
    fn proposal_mismatch_is_a_contract_error() {
        let t = ising3();
        let other = ThetaMatrix::from_diag(&[9.0, 9.0, 9.0]).unwrap();
        let batch = sample_independence(ModelFamily::Ising, &other, 100, 3).unwrap();
        assert!(matches!(
            estimate_z_ratio(ModelFamily::Ising, &t, &batch),
            Err(PegmError::Contract(_))
        ));
    }

    #[test]
    fn degenerate_weights_error_out() {
        let mut t = ThetaMatrix::from_diag(&[3.0, 3.0]).unwrap();
        t.set(0, 1, -400.0);
        let batch = sample_independence(ModelFamily::PoissonGm, &t, 200, 5).unwrap();
        match estimate_z_ratio(ModelFamily::PoissonGm, &t, &batch) {
            Err(PegmError::WeightDegeneracy { n, .. }) => assert_eq!(n, 200),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn self_normalized_expectation_matches_enumeration() {
        let t = ising3();
        let batch = sample_independence(ModelFamily::Ising, &t, 60_000, 11).unwrap();
        let est =
            self_normalized_expectation(ModelFamily::Ising, &t, |x| x[0], &batch).unwrap();
        let probs = enumeration::ising_state_log_probs(&t).unwrap();
        let mut exact = 0.0;
        let mut buf = [0.0; 3];
        for (s, lp) in probs.iter().enumerate() {
            enumeration::ising_state(s, &mut buf);
            exact += lp.exp() * buf[0];
        }
        assert_abs_diff_eq!(est, exact, epsilon = 0.02);
    }

    #[test]
    fn binary_moments_match_enumeration() {
        let t = ising3();
        let batch = sample_independence(ModelFamily::Ising, &t, 60_000, 13).unwrap();
        let (first, second) = binary_moments(&t, &batch).unwrap();
        let probs = enumeration::ising_state_log_probs(&t).unwrap();
        let mut exact1 = [0.0; 3];
        let mut exact01 = 0.0;
        let mut buf = [0.0; 3];
        for (s, lp) in probs.iter().enumerate() {
            enumeration::ising_state(s, &mut buf);
            for k in 0..3 {
                exact1[k] += lp.exp() * buf[k];
            }
            exact01 += lp.exp() * buf[0] * buf[1];
        }
        for k in 0..3 {
            assert_abs_diff_eq!(first[k], exact1[k], epsilon = 0.02);
            assert_abs_diff_eq!(second[[k, k]], exact1[k], epsilon = 0.02);
        }
        assert_abs_diff_eq!(second[[0, 1]], exact01, epsilon = 0.02);
    }

    #[test]
    fn recommended_n_scales_with_dimension() {
        assert_eq!(recommended_n(10, DEFAULT_BATCH_SCALE), 1000);
        assert_eq!(recommended_n(3, 33.4), 101);
    }

    #[test]
    fn sample_grad_log_z_is_the_stat_average() {
        let rows = ndarray::array![[1.0, 0.0], [1.0, 1.0]];
        let d = DataMatrix::new(rows, ModelFamily::Ising).unwrap();
        let g = sample_grad_log_z(ModelFamily::Ising, &d);
        assert_eq!(g[[0, 0]], 1.0);
        assert_eq!(g[[1, 1]], 0.5);
        assert_eq!(g[[0, 1]], 1.0); // (0 + 2)/2
    }
}
