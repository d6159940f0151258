//! Exact references: state enumeration for the discrete families on small
//! graphs, closed forms for the Gaussian family. These are the plug-in
//! normalizers for the exact-z modes and the oracles the estimator tests are
//! judged against. Never used inside samplers.

use crate::error::{PegmError, Result};
use crate::model::{self, ModelFamily, ThetaMatrix};
use ndarray::Array2;

/// Enumeration is exponential in p; this cap keeps calls at interactive cost.
pub const MAX_ENUM_NODES: usize = 20;

/// Binary state of index `s` (bit j = node j) written into `buf`.
pub fn ising_state(s: usize, buf: &mut [f64]) {
    for (j, v) in buf.iter_mut().enumerate() {
        *v = f64::from((s >> j) & 1 == 1);
    }
}

fn check_enum_p(p: usize) -> Result<()> {
    if p > MAX_ENUM_NODES {
        return Err(PegmError::resource(format!(
            "enumeration over {p} binary nodes exceeds the cap of {MAX_ENUM_NODES}"
        )));
    }
    Ok(())
}

/// Exact log partition function of a binary model by summing all 2^p states.
pub fn ising_log_z(theta: &ThetaMatrix) -> Result<f64> {
    let p = theta.p();
    check_enum_p(p)?;
    let mut buf = vec![0.0; p];
    let mut max = f64::NEG_INFINITY;
    let mut logs = Vec::with_capacity(1 << p);
    for s in 0..(1usize << p) {
        ising_state(s, &mut buf);
        let lq = model::log_q(ModelFamily::Ising, theta, &buf)?;
        max = max.max(lq);
        logs.push(lq);
    }
    Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// Exact normalized state log probabilities, indexed by the bit pattern.
pub fn ising_state_log_probs(theta: &ThetaMatrix) -> Result<Vec<f64>> {
    let p = theta.p();
    check_enum_p(p)?;
    let log_z = ising_log_z(theta)?;
    let mut buf = vec![0.0; p];
    (0..(1usize << p))
        .map(|s| {
            ising_state(s, &mut buf);
            Ok(model::log_q(ModelFamily::Ising, theta, &buf)? - log_z)
        })
        .collect()
}

/// Exact (log z, gradient of log z) for a binary model; the gradient is the
/// model expectation of the per-row gradient statistics, in the same
/// symmetric-matrix layout.
pub fn ising_log_z_and_grad(theta: &ThetaMatrix) -> Result<(f64, Array2<f64>)> {
    let p = theta.p();
    let log_z = ising_log_z(theta)?;
    let mut grad = Array2::zeros((p, p));
    let mut buf = vec![0.0; p];
    for s in 0..(1usize << p) {
        ising_state(s, &mut buf);
        let w = (model::log_q(ModelFamily::Ising, theta, &buf)? - log_z).exp();
        model::accumulate_grad_stats(ModelFamily::Ising, &buf, w, &mut grad);
    }
    model::mirror_upper(&mut grad);
    Ok((log_z, grad))
}

/// Truncated-support log partition function for the count family on tiny
/// graphs: sums {0..=cap}^p. With interactions <= 0 the tail beyond a cap a
/// few sigma above each node's rate is negligible.
pub fn pgm_truncated_log_z(theta: &ThetaMatrix, cap: u32) -> Result<f64> {
    let p = theta.p();
    let states = (cap as f64 + 1.0).powi(p as i32);
    if states > 2e7 {
        return Err(PegmError::resource(format!(
            "count enumeration of {states:.1e} states exceeds the 2e7 cap"
        )));
    }
    let mut buf = vec![0.0; p];
    let mut logs = Vec::with_capacity(states as usize);
    let mut max = f64::NEG_INFINITY;
    let mut idx = vec![0u32; p];
    loop {
        for j in 0..p {
            buf[j] = f64::from(idx[j]);
        }
        let lq = model::log_q(ModelFamily::PoissonGm, theta, &buf)?;
        max = max.max(lq);
        logs.push(lq);
        // odometer increment
        let mut j = 0;
        loop {
            if j == p {
                let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
                return Ok(max + sum.ln());
            }
            idx[j] += 1;
            if idx[j] <= cap {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Truncated-support expectation of the gradient statistics for the count
/// family (same layout as `ising_log_z_and_grad`).
pub fn pgm_truncated_grad(theta: &ThetaMatrix, cap: u32) -> Result<Array2<f64>> {
    let p = theta.p();
    let log_z = pgm_truncated_log_z(theta, cap)?;
    let mut grad = Array2::zeros((p, p));
    let mut buf = vec![0.0; p];
    let mut idx = vec![0u32; p];
    loop {
        for j in 0..p {
            buf[j] = f64::from(idx[j]);
        }
        let w = (model::log_q(ModelFamily::PoissonGm, theta, &buf)? - log_z).exp();
        model::accumulate_grad_stats(ModelFamily::PoissonGm, &buf, w, &mut grad);
        let mut j = 0;
        loop {
            if j == p {
                model::mirror_upper(&mut grad);
                return Ok(grad);
            }
            idx[j] += 1;
            if idx[j] <= cap {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Closed-form log partition function of the Gaussian family:
/// (p/2) log(2 pi) - (1/2) log det(theta). Requires theta SPD.
pub fn gaussian_log_z(theta: &ThetaMatrix) -> Result<f64> {
    let m = model::to_nalgebra(theta);
    let chol = m.cholesky().ok_or_else(|| {
        PegmError::infeasible("gaussian log z needs a positive definite theta".to_string())
    })?;
    let p = theta.p() as f64;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(0.5 * p * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det)
}

/// Closed-form gradient of the Gaussian log partition function in the module
/// convention: diagonal -1/2 (theta^-1)_jj, off-diagonal -(theta^-1)_jk.
pub fn gaussian_grad_log_z(theta: &ThetaMatrix) -> Result<Array2<f64>> {
    let p = theta.p();
    let m = model::to_nalgebra(theta);
    let chol = m.cholesky().ok_or_else(|| {
        PegmError::infeasible("gaussian gradient needs a positive definite theta".to_string())
    })?;
    let inv = chol.inverse();
    let mut g = Array2::zeros((p, p));
    for j in 0..p {
        g[[j, j]] = -0.5 * inv[(j, j)];
        for k in (j + 1)..p {
            let v = -0.5 * (inv[(j, k)] + inv[(k, j)]);
            g[[j, k]] = v;
            g[[k, j]] = v;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_node_closed_forms() {
        let t = ThetaMatrix::from_diag(&[2.0]).unwrap();
        // binary: log(1 + e^2)
        assert_abs_diff_eq!(
            ising_log_z(&t).unwrap(),
            (1.0 + 2f64.exp()).ln(),
            epsilon = 1e-12
        );
        // count: z = sum e^{2x}/x! = exp(e^2), so log z = e^2
        assert_abs_diff_eq!(
            pgm_truncated_log_z(&t, 60).unwrap(),
            2f64.exp(),
            epsilon = 1e-9
        );
        // gaussian: (1/2) log(2 pi) - (1/2) log 2
        let g = ThetaMatrix::from_diag(&[2.0]).unwrap();
        assert_abs_diff_eq!(
            gaussian_log_z(&g).unwrap(),
            0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 2f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ising_independent_nodes_factorize() {
        let t = ThetaMatrix::from_diag(&[0.3, -1.2, 0.0]).unwrap();
        let expect: f64 = [0.3f64, -1.2, 0.0]
            .iter()
            .map(|&d| (1.0 + d.exp()).ln())
            .sum();
        assert_abs_diff_eq!(ising_log_z(&t).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn ising_grad_matches_finite_differences() {
        let mut t = ThetaMatrix::from_diag(&[0.2, -0.4, 0.1]).unwrap();
        t.set(0, 1, 0.3);
        t.set(1, 2, -0.2);
        let (_, grad) = ising_log_z_and_grad(&t).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            for k in j..3 {
                let mut up = t.clone();
                up.set(j, k, t.get(j, k) + h);
                let mut dn = t.clone();
                dn.set(j, k, t.get(j, k) - h);
                let fd =
                    (ising_log_z(&up).unwrap() - ising_log_z(&dn).unwrap()) / (2.0 * h);
                assert_abs_diff_eq!(grad[[j, k]], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn pgm_grad_matches_finite_differences() {
        let mut t = ThetaMatrix::from_diag(&[0.5, 0.2]).unwrap();
        t.set(0, 1, -0.3);
        let grad = pgm_truncated_grad(&t, 40).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            for k in j..2 {
                let mut up = t.clone();
                up.set(j, k, t.get(j, k) + h);
                let mut dn = t.clone();
                dn.set(j, k, t.get(j, k) - h);
                let fd = (pgm_truncated_log_z(&up, 40).unwrap()
                    - pgm_truncated_log_z(&dn, 40).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(grad[[j, k]], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn gaussian_grad_matches_finite_differences() {
        let mut t = ThetaMatrix::from_diag(&[2.0, 1.5, 1.0]).unwrap();
        t.set(0, 1, 0.4);
        t.set(1, 2, -0.3);
        let grad = gaussian_grad_log_z(&t).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            for k in j..3 {
                let mut up = t.clone();
                up.set(j, k, t.get(j, k) + h);
                let mut dn = t.clone();
                dn.set(j, k, t.get(j, k) - h);
                let fd = (gaussian_log_z(&up).unwrap() - gaussian_log_z(&dn).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(grad[[j, k]], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn enumeration_caps_are_enforced() {
        let big = ThetaMatrix::zeros(MAX_ENUM_NODES + 1);
        assert!(ising_log_z(&big).is_err());
        let t = ThetaMatrix::zeros(6);
        assert!(pgm_truncated_log_z(&t, 300).is_err());
    }
}
