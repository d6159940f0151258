//! Randomized checks of the exact (non-statistical) guarantees: unit ratio on
//! diagonal parameters, the count-family weight bound, reflection isometry,
//! projection idempotence, mask invariance, MCC symmetry, and bit-exact seed
//! determinism of the samplers.

use ndarray::Array2;
use pegm::bayes::reflect;
use pegm::{bench, boltzmann, importance, model, sampler};
use pegm::{DataMatrix, ModelFamily, ThetaMatrix};
use proptest::prelude::*;

fn sym_from_upper(p: usize, diag: &[f64], upper: &[f64]) -> ThetaMatrix {
    let mut values = Array2::zeros((p, p));
    let mut it = upper.iter();
    for j in 0..p {
        values[[j, j]] = diag[j];
        for k in (j + 1)..p {
            let v = *it.next().expect("upper triangle sized p*(p-1)/2");
            values[[j, k]] = v;
            values[[k, j]] = v;
        }
    }
    ThetaMatrix::new(values).expect("constructed symmetric and finite")
}

/// Strategy: node count plus matching diagonal and strict-upper buffers.
fn sym_parts(
    p_range: std::ops::Range<usize>,
    diag_range: std::ops::Range<f64>,
    off_range: std::ops::Range<f64>,
) -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    p_range.prop_flat_map(move |p| {
        (
            Just(p),
            prop::collection::vec(diag_range.clone(), p),
            prop::collection::vec(off_range.clone(), p * (p - 1) / 2),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    /// Proposal equals target when theta is diagonal, so every weight is
    /// exactly one and the ratio estimate is exactly one, for every family.
    #[test]
    fn diagonal_theta_estimates_a_unit_ratio(
        (_p, diag, _) in sym_parts(2..6, -1.0..1.0, 0.0..1.0),
        n in 20usize..200,
        seed in 0u64..1000,
    ) {
        for family in [ModelFamily::Ising, ModelFamily::PoissonGm, ModelFamily::GaussianOracle] {
            // The Gaussian needs a positive definite diagonal.
            let d: Vec<f64> = if family == ModelFamily::GaussianOracle {
                diag.iter().map(|v| 0.5 + v.abs()).collect()
            } else {
                diag.clone()
            };
            let theta = ThetaMatrix::from_diag(&d).unwrap();
            let batch = sampler::sample_independence(family, &theta, n, seed).unwrap();
            let est = importance::estimate_grad_log_z(family, &theta, &batch).unwrap();
            prop_assert_eq!(est.z_ratio, 1.0);
            prop_assert_eq!(est.ess, n as f64);
        }
    }

    /// For a feasible count-family parameter the interaction exponent is a sum
    /// of nonpositive terms, so every importance weight is at most one.
    #[test]
    fn count_family_importance_weights_stay_below_one(
        (p, diag, off) in sym_parts(2..6, -0.5..0.5, 0.0..2.0),
        n in 20usize..100,
        seed in 0u64..1000,
    ) {
        let neg: Vec<f64> = off.iter().map(|v| -v).collect();
        let theta = sym_from_upper(p, &diag, &neg);
        prop_assert!(model::is_feasible(ModelFamily::PoissonGm, &theta));

        let batch = sampler::sample_independence(ModelFamily::PoissonGm, &theta, n, seed).unwrap();
        for i in 0..n {
            let row = batch.rows.row(i);
            let mut log_w = 0.0;
            for &(j, k, v) in &theta.edges() {
                log_w += 2.0 * v * row[j] * row[k];
            }
            prop_assert!(log_w <= 0.0, "log weight {} above zero", log_w);
        }
        // The estimator asserts the same bound internally per sample.
        importance::estimate_grad_log_z(ModelFamily::PoissonGm, &theta, &batch).unwrap();
    }

    /// Householder reflection preserves the momentum norm and is an involution.
    #[test]
    fn reflection_preserves_norm_and_is_an_involution(
        momentum in prop::collection::vec(-10.0f64..10.0, 1..20),
        direction in prop::collection::vec(-1.0f64..1.0, 20),
    ) {
        let d = momentum.len();
        let mut r: Vec<f64> = direction[..d].to_vec();
        let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        for x in &mut r {
            *x /= norm;
        }

        let before: f64 = momentum.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut p1 = momentum.clone();
        reflect(&mut p1, &r);
        let after: f64 = p1.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((before - after).abs() <= 1e-12 * before.max(1.0));

        reflect(&mut p1, &r);
        for (orig, twice) in momentum.iter().zip(&p1) {
            prop_assert!((orig - twice).abs() <= 1e-12 * orig.abs().max(1.0));
        }
    }

    /// Projection lands in the feasible set and is exactly idempotent; on
    /// already-feasible input it is the identity.
    #[test]
    fn projection_is_idempotent_and_fixes_feasible_points(
        (p, diag, off) in sym_parts(2..6, 0.1..3.0, -1.0..1.0),
    ) {
        for family in [ModelFamily::Ising, ModelFamily::PoissonGm, ModelFamily::GaussianOracle] {
            let theta = sym_from_upper(p, &diag, &off);
            let once = model::project(family, &theta);
            prop_assert!(model::is_feasible(family, &once));
            let twice = model::project(family, &once);
            prop_assert_eq!(once.values(), twice.values());
            if model::is_feasible(family, &theta) {
                prop_assert_eq!(once.values(), theta.values());
            }
        }
    }

    /// Fitted Boltzmann parameters never touch a masked-out entry, and
    /// applying a mask is exactly idempotent.
    #[test]
    fn masks_are_respected_by_fits_and_idempotent(
        seed in 0u64..500,
        p in 2usize..4,
        m in 1usize..3,
    ) {
        let mask = boltzmann::Mask::rbm(p, m);

        // Idempotence on a dense parameter.
        let dense = sym_from_upper(
            p + m,
            &vec![0.3; p + m],
            &vec![-0.7; (p + m) * (p + m - 1) / 2],
        );
        let once = mask.apply(&dense);
        prop_assert!(mask.is_respected(&once));
        let twice = mask.apply(&once);
        prop_assert_eq!(once.values(), twice.values());

        // A short fit keeps every masked entry at exactly zero.
        let truth = ThetaMatrix::from_diag(&vec![0.2; p]).unwrap();
        let data = sampler::gibbs_sample(ModelFamily::Ising, &truth, 40, 50, 1, seed).unwrap();
        let config = boltzmann::TrainConfig { max_epochs: 3, seed, ..Default::default() };
        let model = boltzmann::rbm_fit(&data, m, &config).unwrap();
        prop_assert!(model.mask.is_respected(&model.theta));
        for j in 0..(p + m) {
            for k in 0..(p + m) {
                if j != k && !model.mask.allows(j, k) {
                    prop_assert_eq!(model.theta.get(j, k), 0.0);
                }
            }
        }
    }

    /// Matthews correlation is symmetric in its arguments.
    #[test]
    fn mcc_is_symmetric(
        (p, diag, off_a) in sym_parts(3..8, 0.0..0.1, -1.0..1.0),
        off_b in prop::collection::vec(-1.0f64..1.0, 7 * 6 / 2),
        cut in 0.0f64..0.9,
    ) {
        // Sparsify by zeroing entries below a threshold so supports differ.
        let a = sym_from_upper(p, &diag, &off_a).map(|v| if v.abs() < cut { 0.0 } else { v });
        let b = sym_from_upper(p, &diag, &off_b[..p * (p - 1) / 2])
            .map(|v| if v.abs() < 1.0 - cut { 0.0 } else { v });
        let ab = bench::mcc(&a, &b);
        let ba = bench::mcc(&b, &a);
        prop_assert_eq!(ab, ba);
        // Self-comparison is perfect unless the confusion matrix degenerates
        // (empty or complete support has a zero denominator, reported as 0).
        let pairs = p * (p - 1) / 2;
        let e = a.edges().len();
        let expected = if e == 0 || e == pairs { 0.0 } else { 1.0 };
        prop_assert_eq!(bench::mcc(&a, &a), expected);
    }

    /// Every sampler reproduces its output bit-exactly from the seed.
    #[test]
    fn samplers_are_bit_deterministic_per_seed(
        seed in 0u64..10_000,
    ) {
        let theta = sym_from_upper(3, &[0.1, -0.2, 0.0], &[-0.4, 0.0, -0.6]);
        for family in [ModelFamily::Ising, ModelFamily::PoissonGm] {
            let a = sampler::sample_independence(family, &theta, 64, seed).unwrap();
            let b = sampler::sample_independence(family, &theta, 64, seed).unwrap();
            prop_assert_eq!(&a.rows, &b.rows);

            let g1 = sampler::gibbs_sample(family, &theta, 32, 20, 2, seed).unwrap();
            let g2 = sampler::gibbs_sample(family, &theta, 32, 20, 2, seed).unwrap();
            prop_assert_eq!(g1.rows(), g2.rows());
        }
        let ar1 = sampler::accept_reject_sample(ModelFamily::PoissonGm, &theta, 16, 20_000, seed).unwrap();
        let ar2 = sampler::accept_reject_sample(ModelFamily::PoissonGm, &theta, 16, 20_000, seed).unwrap();
        prop_assert_eq!(ar1.data.rows(), ar2.data.rows());
        prop_assert_eq!(ar1.tries, ar2.tries);
    }
}

/// Gaussian projection must repair an indefinite matrix into one the
/// feasibility check accepts, even for strongly negative eigenvalues.
#[test]
fn gaussian_projection_repairs_indefinite_matrices() {
    let theta = sym_from_upper(3, &[0.1, 0.1, 0.1], &[2.0, -2.0, 2.0]);
    assert!(!model::is_feasible(ModelFamily::GaussianOracle, &theta));
    let fixed = model::project(ModelFamily::GaussianOracle, &theta);
    assert!(model::is_feasible(ModelFamily::GaussianOracle, &fixed));
    let again = model::project(ModelFamily::GaussianOracle, &fixed);
    assert_eq!(fixed.values(), again.values());
}

/// The data constructor enforces per-family support exactly once at the edge.
#[test]
fn data_validation_is_family_specific() {
    let rows = ndarray::array![[0.0, 1.0], [1.0, 3.0]];
    assert!(DataMatrix::new(rows.clone(), ModelFamily::Ising).is_err());
    assert!(DataMatrix::new(rows.clone(), ModelFamily::PoissonGm).is_ok());
    assert!(DataMatrix::new(rows, ModelFamily::GaussianOracle).is_ok());
}
