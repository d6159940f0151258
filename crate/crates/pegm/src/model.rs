//! Families, parameters, data containers, and the pieces of the unnormalized
//! density that everything else is built from.
//!
//! A model over p nodes has a symmetric p x p parameter matrix theta: the
//! diagonal drives each node's marginal part, the off-diagonal entries are
//! pairwise interactions. The unnormalized log density of a row x is
//!
//!   log q(x; theta) = sum_j theta_jj T_j(x_j)
//!                   + 2 sum_{j<k} theta_jk x_j x_k
//!                   + sum_j C(x_j)
//!
//! for the Ising and Poisson families (T_j(x) = x, C = 0 resp. -ln x!), and
//! the Gaussian comparison family carries the whole quadratic form with a
//! -1/2 in front: log q = -1/2 (sum_j theta_jj x_j^2 + 2 sum_{j<k} theta_jk x_j x_k).

use crate::error::{PegmError, Result};
use ndarray::{Array1, Array2};
use statrs::function::gamma::ln_gamma;

/// Smallest eigenvalue kept by the Gaussian feasibility projection.
pub const SPD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ModelFamily {
    /// Binary nodes in {0,1}; every symmetric theta is feasible.
    Ising,
    /// Count nodes in {0,1,2,...}; feasible iff all interactions are <= 0.
    PoissonGm,
    /// Real nodes; theta must be symmetric positive definite. Closed forms
    /// exist for everything, so this family is the estimator test bed.
    GaussianOracle,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Ising => "ising",
            ModelFamily::PoissonGm => "poisson",
            ModelFamily::GaussianOracle => "gaussian",
        }
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = PegmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ising" => Ok(ModelFamily::Ising),
            "poisson" | "pgm" => Ok(ModelFamily::PoissonGm),
            "gaussian" | "ggm" => Ok(ModelFamily::GaussianOracle),
            other => Err(PegmError::contract(format!("unknown family '{other}'"))),
        }
    }
}

/// Symmetric p x p parameter matrix. Symmetry is exact (bitwise) and enforced
/// on construction; every mutator writes both (j,k) and (k,j).
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaMatrix {
    values: Array2<f64>,
}

impl ThetaMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c || r == 0 {
            return Err(PegmError::contract(format!(
                "theta must be square with p >= 1, got {r} x {c}"
            )));
        }
        for j in 0..r {
            for k in 0..c {
                let v = values[[j, k]];
                if !v.is_finite() {
                    return Err(PegmError::contract(format!(
                        "theta[{j},{k}] = {v} is not finite"
                    )));
                }
                if k > j && v != values[[k, j]] {
                    return Err(PegmError::contract(format!(
                        "theta not symmetric at ({j},{k}): {v} vs {}",
                        values[[k, j]]
                    )));
                }
            }
        }
        Ok(ThetaMatrix { values })
    }

    pub fn zeros(p: usize) -> Self {
        ThetaMatrix {
            values: Array2::zeros((p, p)),
        }
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let mut m = ThetaMatrix::zeros(diag.len());
        for (j, &v) in diag.iter().enumerate() {
            if !v.is_finite() {
                return Err(PegmError::contract(format!("diag[{j}] = {v} not finite")));
            }
            m.values[[j, j]] = v;
        }
        if diag.is_empty() {
            return Err(PegmError::contract("theta must have p >= 1"));
        }
        Ok(m)
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[[j, k]]
    }

    /// Write one entry, mirroring across the diagonal.
    pub fn set(&mut self, j: usize, k: usize, v: f64) {
        self.values[[j, k]] = v;
        self.values[[k, j]] = v;
    }

    pub fn diag(&self) -> Array1<f64> {
        self.values.diag().to_owned()
    }

    /// Parameter with the same diagonal and zero interactions: the
    /// independence proposal used throughout.
    pub fn diag_part(&self) -> ThetaMatrix {
        let mut m = ThetaMatrix::zeros(self.p());
        for j in 0..self.p() {
            m.values[[j, j]] = self.values[[j, j]];
        }
        m
    }

    /// Nonzero interactions as (j, k, theta_jk) with j < k.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let p = self.p();
        let mut out = Vec::new();
        for j in 0..p {
            for k in (j + 1)..p {
                let v = self.values[[j, k]];
                if v != 0.0 {
                    out.push((j, k, v));
                }
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn frobenius_dist(&self, other: &ThetaMatrix) -> f64 {
        assert_eq!(self.p(), other.p(), "dimension mismatch");
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Entrywise map that preserves symmetry by construction.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ThetaMatrix {
        ThetaMatrix {
            values: self.values.map(|&v| f(v)),
        }
    }
}

/// n x p data matrix, rows are observations. Validation is per family; n = 0
/// is allowed (the Bayes module has a meaningful zero-data limit) and fitters
/// that need data reject it themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    rows: Array2<f64>,
}

impl DataMatrix {
    pub fn new(rows: Array2<f64>, family: ModelFamily) -> Result<Self> {
        if rows.ncols() == 0 {
            return Err(PegmError::contract("data must have p >= 1 columns"));
        }
        for (i, row) in rows.outer_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                validate_value(family, v).map_err(|e| {
                    PegmError::domain(format!("row {i}, column {j}: {e}"))
                })?;
            }
        }
        Ok(DataMatrix { rows })
    }

    /// For sampler output that is valid by construction.
    pub(crate) fn from_rows_unchecked(rows: Array2<f64>) -> Self {
        DataMatrix { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    /// Column means.
    pub fn means(&self) -> Array1<f64> {
        if self.n() == 0 {
            return Array1::zeros(self.p());
        }
        self.rows.mean_axis(ndarray::Axis(0)).unwrap()
    }
}

fn validate_value(family: ModelFamily, v: f64) -> std::result::Result<(), String> {
    match family {
        ModelFamily::Ising => {
            if v == 0.0 || v == 1.0 {
                Ok(())
            } else {
                Err(format!("{v} is not a binary value"))
            }
        }
        ModelFamily::PoissonGm => {
            if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
                Ok(())
            } else {
                Err(format!("{v} is not a nonnegative integer count"))
            }
        }
        ModelFamily::GaussianOracle => {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{v} is not finite"))
            }
        }
    }
}

/// Per-node base measure C(x).
pub fn base_measure(family: ModelFamily, x: f64) -> f64 {
    match family {
        ModelFamily::Ising | ModelFamily::GaussianOracle => 0.0,
        // -ln(x!) keeps the count family normalizable.
        ModelFamily::PoissonGm => -ln_gamma(x + 1.0),
    }
}

/// Unnormalized log density of one row.
pub fn log_q(family: ModelFamily, theta: &ThetaMatrix, x: &[f64]) -> Result<f64> {
    let p = theta.p();
    if x.len() != p {
        return Err(PegmError::contract(format!(
            "x has length {}, theta is {p} x {p}",
            x.len()
        )));
    }
    let mut diag_term = 0.0;
    let mut base = 0.0;
    for j in 0..p {
        let t = match family {
            ModelFamily::Ising | ModelFamily::PoissonGm => x[j],
            ModelFamily::GaussianOracle => x[j] * x[j],
        };
        diag_term += theta.get(j, j) * t;
        base += base_measure(family, x[j]);
    }
    let mut pair_term = 0.0;
    for j in 0..p {
        for k in (j + 1)..p {
            pair_term += theta.get(j, k) * x[j] * x[k];
        }
    }
    let v = match family {
        ModelFamily::Ising | ModelFamily::PoissonGm => diag_term + 2.0 * pair_term + base,
        ModelFamily::GaussianOracle => -0.5 * (diag_term + 2.0 * pair_term),
    };
    if v.is_nan() {
        return Err(PegmError::domain("log q evaluated to NaN".to_string()));
    }
    Ok(v)
}

/// Sufficient-statistic matrix T(x): diagonal T_j (x_j, or x_j^2 for the
/// Gaussian family), off-diagonal x_j x_k in both cells, so that
/// log q = <theta, T>_F + sum_j C(x_j) (Gaussian: -1/2 <theta, T>_F).
pub fn suff_stats(family: ModelFamily, x: &[f64]) -> Array2<f64> {
    let p = x.len();
    let mut t = Array2::zeros((p, p));
    for j in 0..p {
        t[[j, j]] = match family {
            ModelFamily::Ising | ModelFamily::PoissonGm => x[j],
            ModelFamily::GaussianOracle => x[j] * x[j],
        };
        for k in (j + 1)..p {
            let v = x[j] * x[k];
            t[[j, k]] = v;
            t[[k, j]] = v;
        }
    }
    t
}

/// Per-row gradient of log q with respect to the unique entries of theta,
/// laid out as a symmetric matrix. The off-diagonal cells carry the factor
/// from the entry appearing twice in the quadratic form:
/// Ising/Poisson diag x_j, off-diag 2 x_j x_k; Gaussian diag -x_j^2/2,
/// off-diag -x_j x_k.
pub fn grad_stats(family: ModelFamily, x: &[f64]) -> Array2<f64> {
    let p = x.len();
    let mut g = Array2::zeros((p, p));
    accumulate_grad_stats(family, x, 1.0, &mut g);
    mirror_upper(&mut g);
    g
}

/// Hot-path accumulator: adds weight * grad_stats(x) into the diagonal and
/// upper triangle of g, leaving the lower triangle untouched. Callers sum
/// many rows this way and call `mirror_upper` once at the end; the contiguous
/// inner loop is what keeps batch estimation cheap.
pub(crate) fn accumulate_grad_stats(
    family: ModelFamily,
    x: &[f64],
    weight: f64,
    g: &mut Array2<f64>,
) {
    let p = x.len();
    let flat = g.as_slice_mut().expect("statistic matrices are standard layout");
    match family {
        ModelFamily::Ising | ModelFamily::PoissonGm => {
            for j in 0..p {
                let row = &mut flat[j * p..(j + 1) * p];
                row[j] += weight * x[j];
                let wj = 2.0 * weight * x[j];
                if wj != 0.0 {
                    for k in (j + 1)..p {
                        row[k] += wj * x[k];
                    }
                }
            }
        }
        ModelFamily::GaussianOracle => {
            for j in 0..p {
                let row = &mut flat[j * p..(j + 1) * p];
                row[j] += -0.5 * weight * x[j] * x[j];
                let wj = -weight * x[j];
                for k in (j + 1)..p {
                    row[k] += wj * x[k];
                }
            }
        }
    }
}

/// Copy the upper triangle onto the lower one, finishing a matrix built by
/// `accumulate_grad_stats`.
pub(crate) fn mirror_upper(g: &mut Array2<f64>) {
    let p = g.nrows();
    for j in 0..p {
        for k in (j + 1)..p {
            g[[k, j]] = g[[j, k]];
        }
    }
}

/// Importance log weight of one row against the independence proposal at
/// phi = diag(theta): diagonal and base-measure terms cancel in
/// log q(theta) - log q(phi), leaving only the interaction part.
/// Ising/Poisson: 2 sum_{j<k} theta_jk y_j y_k; Gaussian: -sum_{j<k} ...
/// `edges` is theta.edges() precomputed by the caller.
pub(crate) fn interaction_log_weight(
    family: ModelFamily,
    edges: &[(usize, usize, f64)],
    y: &[f64],
) -> f64 {
    let mut s = 0.0;
    for &(j, k, v) in edges {
        s += v * y[j] * y[k];
    }
    match family {
        ModelFamily::Ising | ModelFamily::PoissonGm => 2.0 * s,
        ModelFamily::GaussianOracle => -s,
    }
}

/// Natural parameter of node j's conditional given the rest of the row:
/// theta_jj + 2 sum_{k != j} theta_jk x_k.
pub fn node_conditional_natural_param(
    theta: &ThetaMatrix,
    x: &[f64],
    j: usize,
) -> Result<f64> {
    let p = theta.p();
    if x.len() != p || j >= p {
        return Err(PegmError::contract(format!(
            "node {j} or row length {} out of range for p = {p}",
            x.len()
        )));
    }
    let mut s = theta.get(j, j);
    for k in 0..p {
        if k != j {
            s += 2.0 * theta.get(j, k) * x[k];
        }
    }
    Ok(s)
}

/// Membership in the family's feasible parameter set.
pub fn is_feasible(family: ModelFamily, theta: &ThetaMatrix) -> bool {
    match family {
        ModelFamily::Ising => true,
        ModelFamily::PoissonGm => {
            let p = theta.p();
            (0..p).all(|j| ((j + 1)..p).all(|k| theta.get(j, k) <= 0.0))
        }
        ModelFamily::GaussianOracle => to_nalgebra(theta).cholesky().is_some(),
    }
}

/// Map theta to the feasible set. Identity on feasible input (so the map is
/// exactly idempotent); otherwise Ising is untouched, Poisson interactions
/// are capped at zero, and the Gaussian precision has its eigenvalues clipped
/// from below at SPD_FLOOR.
pub fn project(family: ModelFamily, theta: &ThetaMatrix) -> ThetaMatrix {
    if is_feasible(family, theta) {
        return theta.clone();
    }
    match family {
        ModelFamily::Ising => theta.clone(),
        ModelFamily::PoissonGm => {
            let p = theta.p();
            let mut out = theta.clone();
            for j in 0..p {
                for k in (j + 1)..p {
                    if out.get(j, k) > 0.0 {
                        out.set(j, k, 0.0);
                    }
                }
            }
            out
        }
        ModelFamily::GaussianOracle => {
            let p = theta.p();
            let m = to_nalgebra(theta);
            let eig = m.symmetric_eigen();
            let vals = eig.eigenvalues.map(|v| v.max(SPD_FLOOR));
            let q = eig.eigenvectors;
            let rebuilt = &q * nalgebra::DMatrix::from_diagonal(&vals) * q.transpose();
            let mut values = Array2::zeros((p, p));
            for j in 0..p {
                values[[j, j]] = rebuilt[(j, j)];
                for k in (j + 1)..p {
                    // exact symmetry survives the float round trip
                    let v = 0.5 * (rebuilt[(j, k)] + rebuilt[(k, j)]);
                    values[[j, k]] = v;
                    values[[k, j]] = v;
                }
            }
            ThetaMatrix::new(values).expect("projection output is symmetric and finite")
        }
    }
}

/// Second-moment condition for the importance estimators: the tilted
/// parameter 2(1 + delta) * offdiag(theta) + diag(theta) must stay feasible.
pub fn variance_condition(family: ModelFamily, theta: &ThetaMatrix, delta: f64) -> bool {
    let p = theta.p();
    let mut tilted = theta.diag_part();
    let scale = 2.0 * (1.0 + delta);
    for j in 0..p {
        for k in (j + 1)..p {
            tilted.set(j, k, scale * theta.get(j, k));
        }
    }
    is_feasible(family, &tilted)
}

pub(crate) fn to_nalgebra(theta: &ThetaMatrix) -> nalgebra::DMatrix<f64> {
    let p = theta.p();
    nalgebra::DMatrix::from_fn(p, p, |j, k| theta.get(j, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn theta3() -> ThetaMatrix {
        let mut t = ThetaMatrix::from_diag(&[2f64.ln(), 2f64.ln(), 2f64.ln()]).unwrap();
        for (j, k) in [(0, 1), (0, 2), (1, 2)] {
            t.set(j, k, -0.1);
        }
        t
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(ThetaMatrix::new(Array2::zeros((2, 3))).is_err());
        assert!(ThetaMatrix::new(Array2::zeros((0, 0))).is_err());
        assert!(ThetaMatrix::new(array![[0.0, 1.0], [0.9, 0.0]]).is_err());
        assert!(ThetaMatrix::new(array![[f64::NAN]]).is_err());
        assert!(ThetaMatrix::new(array![[1.0, -0.5], [-0.5, 1.0]]).is_ok());
    }

    #[test]
    fn data_validation_is_per_family() {
        let binary = array![[0.0, 1.0], [1.0, 1.0]];
        assert!(DataMatrix::new(binary.clone(), ModelFamily::Ising).is_ok());
        assert!(DataMatrix::new(array![[0.5, 1.0]], ModelFamily::Ising).is_err());
        assert!(DataMatrix::new(array![[0.0, 7.0]], ModelFamily::PoissonGm).is_ok());
        assert!(DataMatrix::new(array![[-1.0, 2.0]], ModelFamily::PoissonGm).is_err());
        assert!(DataMatrix::new(array![[1.5, 2.0]], ModelFamily::PoissonGm).is_err());
        assert!(DataMatrix::new(array![[f64::INFINITY]], ModelFamily::GaussianOracle).is_err());
        assert!(DataMatrix::new(Array2::zeros((0, 3)), ModelFamily::Ising).is_ok());
    }

    #[test]
    fn poisson_log_q_worked_example() {
        let x = [1.0, 2.0, 3.0];
        let expect = 6.0 * 2f64.ln() + 2.0 * (-0.1) * (1.0 * 2.0 + 1.0 * 3.0 + 2.0 * 3.0)
            - (2f64.ln() + 6f64.ln());
        let got = log_q(ModelFamily::PoissonGm, &theta3(), &x).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn log_q_matches_inner_product_identity() {
        let mut rng = crate::rng::stream(11);
        use rand::Rng;
        for family in [
            ModelFamily::Ising,
            ModelFamily::PoissonGm,
            ModelFamily::GaussianOracle,
        ] {
            for _ in 0..20 {
                let p = 4;
                let mut t = ThetaMatrix::zeros(p);
                for j in 0..p {
                    t.set(j, j, rng.random_range(-1.0..1.0));
                    for k in (j + 1)..p {
                        let v: f64 = rng.random_range(-0.5..0.0);
                        t.set(j, k, v);
                    }
                }
                let x: Vec<f64> = (0..p)
                    .map(|_| match family {
                        ModelFamily::Ising => f64::from(rng.random::<bool>()),
                        ModelFamily::PoissonGm => f64::from(rng.random_range(0u32..6)),
                        ModelFamily::GaussianOracle => rng.random_range(-2.0..2.0),
                    })
                    .collect();
                let s = suff_stats(family, &x);
                let inner: f64 = t
                    .values()
                    .iter()
                    .zip(s.iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let base: f64 = x.iter().map(|&v| base_measure(family, v)).sum();
                let expect = match family {
                    ModelFamily::GaussianOracle => -0.5 * inner,
                    _ => inner + base,
                };
                let got = log_q(family, &t, &x).unwrap();
                assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn grad_stats_convention() {
        let x = [1.0, 3.0];
        let g = grad_stats(ModelFamily::PoissonGm, &x);
        assert_eq!(g[[0, 0]], 1.0);
        assert_eq!(g[[1, 1]], 3.0);
        assert_eq!(g[[0, 1]], 6.0);
        assert_eq!(g[[1, 0]], 6.0);
        let g = grad_stats(ModelFamily::GaussianOracle, &x);
        assert_eq!(g[[0, 0]], -0.5);
        assert_eq!(g[[1, 1]], -4.5);
        assert_eq!(g[[0, 1]], -3.0);
    }

    #[test]
    fn natural_param_sums_neighbors() {
        let t = theta3();
        let x = [0.0, 1.0, 1.0];
        let s = node_conditional_natural_param(&t, &x, 0).unwrap();
        assert_abs_diff_eq!(s, 2f64.ln() + 2.0 * (-0.1) * 2.0, epsilon = 1e-12);
        assert!(node_conditional_natural_param(&t, &x, 3).is_err());
    }

    #[test]
    fn feasibility_per_family() {
        let mut t = ThetaMatrix::from_diag(&[1.0, 1.0]).unwrap();
        t.set(0, 1, 0.3);
        assert!(is_feasible(ModelFamily::Ising, &t));
        assert!(!is_feasible(ModelFamily::PoissonGm, &t));
        assert!(is_feasible(ModelFamily::GaussianOracle, &t));
        t.set(0, 1, -2.0);
        assert!(is_feasible(ModelFamily::PoissonGm, &t));
        assert!(!is_feasible(ModelFamily::GaussianOracle, &t));
    }

    #[test]
    fn projection_is_idempotent_and_feasible() {
        let mut t = ThetaMatrix::from_diag(&[1.0, 1.0, 1.0]).unwrap();
        t.set(0, 1, 0.4);
        t.set(1, 2, -3.0);
        for family in [
            ModelFamily::Ising,
            ModelFamily::PoissonGm,
            ModelFamily::GaussianOracle,
        ] {
            let once = project(family, &t);
            assert!(is_feasible(family, &once), "{family:?} projection infeasible");
            let twice = project(family, &once);
            assert_eq!(once.values(), twice.values(), "{family:?} not idempotent");
        }
        // Poisson projection only caps positive interactions
        let proj = project(ModelFamily::PoissonGm, &t);
        assert_eq!(proj.get(0, 1), 0.0);
        assert_eq!(proj.get(1, 2), -3.0);
    }

    #[test]
    fn gaussian_projection_moves_to_spd() {
        let mut t = ThetaMatrix::from_diag(&[0.5, 0.5]).unwrap();
        t.set(0, 1, 1.0); // eigenvalues -0.5 and 1.5
        let proj = project(ModelFamily::GaussianOracle, &t);
        let m = to_nalgebra(&proj);
        let eig = m.symmetric_eigen();
        for v in eig.eigenvalues.iter() {
            assert!(*v >= SPD_FLOOR * 0.999, "eigenvalue {v} below floor");
        }
    }

    #[test]
    fn variance_condition_tightens_with_delta() {
        // diag 1, offdiag -0.2: 2.2 * 0.2 = 0.44 < 1 keeps diagonal dominance
        let mut t = ThetaMatrix::from_diag(&[1.0, 1.0]).unwrap();
        t.set(0, 1, -0.2);
        assert!(variance_condition(ModelFamily::GaussianOracle, &t, 0.0));
        assert!(variance_condition(ModelFamily::GaussianOracle, &t, 0.1));
        t.set(0, 1, -0.49);
        assert!(variance_condition(ModelFamily::GaussianOracle, &t, 0.0));
        assert!(!variance_condition(ModelFamily::GaussianOracle, &t, 0.1));
    }
}
