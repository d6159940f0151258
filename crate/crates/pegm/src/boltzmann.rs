//! Boltzmann machines as masked binary pairwise models over p visible and m
//! hidden units, trained by Monte Carlo EM with importance-sampled negative
//! phases, plus a contrastive-divergence baseline and evaluation tools
//! (reconstruction, Brier score, marginal likelihood, exact total variation
//! between visible marginals on small models).
//!
//! The joint over (v, h) is the same binary model the rest of the crate
//! uses, interactions entering the density as 2 theta_jk x_j x_k. Hidden
//! conditionals are therefore sigmoids of theta_kk + 2 sum_j theta_jk v_j.

use crate::enumeration::{self, MAX_ENUM_NODES};
use crate::error::{PegmError, Result};
use crate::importance::{self, binary_moments, recommended_n};
use crate::model::{self, DataMatrix, ModelFamily, ThetaMatrix};
use crate::optimize::independence_init;
use crate::rng::{mix, mix2, stream};
use crate::sampler::{sample_independence, sigmoid};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Gibbs sweeps used to draw dependent hidden units during reconstruction.
const BM_RECON_SWEEPS: usize = 50;
/// Probe configurations averaged by the marginal-likelihood estimator.
const MARGINAL_PROBES: usize = 50;
/// Visible/hidden block caps for exact enumeration of visible marginals.
const MAX_TV_BLOCK: usize = 20;
/// Combined state-count guard for exact visible marginals: 2^(p + m) states.
const MAX_TV_LOG2_STATES: u32 = 26;
/// Epochs over which the negative-phase batch size doubles.
const BATCH_GROWTH_EPOCHS: f64 = 50.0;
/// Scale of the random interaction initialization.
const INIT_WEIGHT_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskSpec {
    /// Bipartite: visible-hidden interactions only.
    Rbm,
    /// Every interaction allowed.
    Full,
    /// Layered: interactions between adjacent layers only; layer 0 is the
    /// visible block, the rest are hidden.
    Dbm(Vec<usize>),
}

/// Symmetric adjacency over the p + m units; diagonal always allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    allowed: Array2<bool>,
    pub spec: MaskSpec,
}

impl Mask {
    pub fn rbm(p: usize, m: usize) -> Mask {
        let u = p + m;
        let mut allowed = Array2::from_elem((u, u), false);
        for j in 0..u {
            allowed[[j, j]] = true;
        }
        for j in 0..p {
            for k in p..u {
                allowed[[j, k]] = true;
                allowed[[k, j]] = true;
            }
        }
        Mask {
            allowed,
            spec: MaskSpec::Rbm,
        }
    }

    pub fn full(p: usize, m: usize) -> Mask {
        let u = p + m;
        Mask {
            allowed: Array2::from_elem((u, u), true),
            spec: MaskSpec::Full,
        }
    }

    pub fn dbm(layers: &[usize]) -> Result<Mask> {
        if layers.len() < 2 || layers.iter().any(|&l| l == 0) {
            return Err(PegmError::contract(
                "layered mask needs >= 2 nonempty layers",
            ));
        }
        let u: usize = layers.iter().sum();
        let mut bounds = Vec::with_capacity(layers.len() + 1);
        bounds.push(0);
        for &l in layers {
            bounds.push(bounds.last().unwrap() + l);
        }
        let layer_of = |j: usize| bounds.iter().position(|&b| b > j).unwrap() - 1;
        let mut allowed = Array2::from_elem((u, u), false);
        for j in 0..u {
            allowed[[j, j]] = true;
            for k in (j + 1)..u {
                if layer_of(j).abs_diff(layer_of(k)) == 1 {
                    allowed[[j, k]] = true;
                    allowed[[k, j]] = true;
                }
            }
        }
        Ok(Mask {
            allowed,
            spec: MaskSpec::Dbm(layers.to_vec()),
        })
    }

    pub fn from_spec(spec: &MaskSpec, p: usize, m: usize) -> Result<Mask> {
        match spec {
            MaskSpec::Rbm => Ok(Mask::rbm(p, m)),
            MaskSpec::Full => Ok(Mask::full(p, m)),
            MaskSpec::Dbm(layers) => {
                let mask = Mask::dbm(layers)?;
                if layers[0] != p || mask.units() != p + m {
                    return Err(PegmError::contract(
                        "layer sizes disagree with the visible/hidden split",
                    ));
                }
                Ok(mask)
            }
        }
    }

    pub fn units(&self) -> usize {
        self.allowed.nrows()
    }

    pub fn allows(&self, j: usize, k: usize) -> bool {
        self.allowed[[j, k]]
    }

    /// Zero every disallowed entry, exactly.
    pub fn apply(&self, theta: &ThetaMatrix) -> ThetaMatrix {
        let u = self.units();
        let mut t = ThetaMatrix::zeros(u);
        for j in 0..u {
            for k in j..u {
                if self.allowed[[j, k]] {
                    t.set(j, k, theta.get(j, k));
                }
            }
        }
        t
    }

    pub fn is_respected(&self, theta: &ThetaMatrix) -> bool {
        let u = self.units();
        (0..u).all(|j| (j..u).all(|k| self.allowed[[j, k]] || theta.get(j, k) == 0.0))
    }

    fn is_rbm_shape(&self, p: usize, m: usize) -> bool {
        *self == Mask::rbm(p, m)
    }
}

#[derive(Clone, Debug)]
pub struct BoltzmannModel {
    pub p: usize,
    pub m: usize,
    /// (p+m) x (p+m) joint parameter; visible block first.
    pub theta: ThetaMatrix,
    pub mask: Mask,
}

impl BoltzmannModel {
    pub fn units(&self) -> usize {
        self.p + self.m
    }

    /// Parameter of the hidden block conditioned on a visible row: hidden
    /// biases shift by twice the visible-hidden interactions, hidden-hidden
    /// interactions carry over.
    pub fn conditional_hidden_theta(&self, v: &[f64]) -> ThetaMatrix {
        let (p, m) = (self.p, self.m);
        let mut t = ThetaMatrix::zeros(m);
        for k in 0..m {
            let mut d = self.theta.get(p + k, p + k);
            for j in 0..p {
                d += 2.0 * self.theta.get(j, p + k) * v[j];
            }
            t.set(k, k, d);
            for k2 in (k + 1)..m {
                t.set(k, k2, self.theta.get(p + k, p + k2));
            }
        }
        t
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Base step size of the decaying schedule gamma0 / (1 + t/t0).
    pub gamma0: f64,
    pub t0: f64,
    /// Base negative-phase batch size; 0 picks the recommended size for the
    /// joint dimension. Batches grow linearly so later iterations average
    /// away more estimator noise.
    pub n0: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Replace estimated phases with exact enumeration (tiny models only).
    pub exact: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma0: 0.1,
            t0: 100.0,
            n0: 0,
            max_epochs: 200,
            seed: 0,
            exact: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self, units: usize) -> Result<usize> {
        if !(self.gamma0.is_finite() && self.gamma0 > 0.0) {
            return Err(PegmError::contract("gamma0 must be finite and > 0"));
        }
        if !(self.t0.is_finite() && self.t0 > 0.0) {
            return Err(PegmError::contract("t0 must be finite and > 0"));
        }
        if self.exact && units > MAX_ENUM_NODES {
            return Err(PegmError::contract(
                "exact training enumerates the joint; p + m is too large",
            ));
        }
        Ok(if self.n0 == 0 {
            recommended_n(units, 20.0)
        } else {
            self.n0
        })
    }

    fn step_size(&self, t: usize) -> f64 {
        self.gamma0 / (1.0 + t as f64 / self.t0)
    }

    fn batch_size(&self, n0: usize, t: usize) -> usize {
        (n0 as f64 * (1.0 + t as f64 / BATCH_GROWTH_EPOCHS)).round() as usize
    }
}

fn check_binary(rows: &Array2<f64>) -> Result<()> {
    if rows.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(PegmError::contract("entries must all be 0 or 1"));
    }
    Ok(())
}

fn check_rbm(model: &BoltzmannModel) -> Result<()> {
    if !model.mask.is_rbm_shape(model.p, model.m) {
        return Err(PegmError::contract(
            "operation is defined for the bipartite mask only",
        ));
    }
    Ok(())
}

/// Exact hidden conditional probabilities of a bipartite model:
/// sigma(theta_kk + 2 sum_j theta_jk v_j) per hidden unit.
pub fn rbm_conditional_hidden(model: &BoltzmannModel, v: &[f64]) -> Result<Vec<f64>> {
    check_rbm(model)?;
    if v.len() != model.p {
        return Err(PegmError::contract("visible vector has the wrong length"));
    }
    let (p, m) = (model.p, model.m);
    Ok((0..m)
        .map(|k| {
            let mut d = model.theta.get(p + k, p + k);
            for j in 0..p {
                d += 2.0 * model.theta.get(j, p + k) * v[j];
            }
            sigmoid(d)
        })
        .collect())
}

/// Exact visible conditional probabilities of a bipartite model.
pub fn rbm_conditional_visible(model: &BoltzmannModel, h: &[f64]) -> Result<Vec<f64>> {
    check_rbm(model)?;
    if h.len() != model.m {
        return Err(PegmError::contract("hidden vector has the wrong length"));
    }
    let (p, m) = (model.p, model.m);
    Ok((0..p)
        .map(|j| {
            let mut d = model.theta.get(j, j);
            for k in 0..m {
                d += 2.0 * model.theta.get(j, p + k) * h[k];
            }
            sigmoid(d)
        })
        .collect())
}

/// Starting point shared by all trainers: visible biases at the marginal
/// log-odds (clamped off the boundary), hidden biases zero, and allowed
/// interactions touching the hidden block uniform in [-0.01, 0.01] to break
/// the permutation symmetry between hidden units. Visible-visible
/// interactions start at zero, so with no hidden units the initialization is
/// the fully observed one, bit for bit.
fn init_model(data: &DataMatrix, m: usize, mask: Mask, seed: u64) -> Result<BoltzmannModel> {
    let p = data.p();
    if data.n() == 0 {
        return Err(PegmError::contract("data must have n >= 1 rows"));
    }
    if mask.units() != p + m {
        return Err(PegmError::contract("mask size must equal p + m"));
    }
    let u = p + m;
    let vis = independence_init(ModelFamily::Ising, data)?;
    let mut theta = ThetaMatrix::zeros(u);
    for j in 0..p {
        theta.set(j, j, vis.get(j, j));
    }
    let mut rng = stream(mix(seed, 0x1B17));
    for j in 0..u {
        for k in (j + 1).max(p)..u {
            if mask.allows(j, k) {
                theta.set(
                    j,
                    k,
                    rng.random_range(-INIT_WEIGHT_SCALE..INIT_WEIGHT_SCALE),
                );
            }
        }
    }
    Ok(BoltzmannModel {
        p,
        m,
        theta,
        mask,
    })
}

/// Gradient statistics of rows with hidden units integrated out exactly
/// through the bipartite conditionals: visible biases v_j, hidden biases
/// sigma_k(v), visible-hidden 2 v_j sigma_k(v). Also serves the chain-end
/// negative phase of contrastive divergence.
fn bipartite_phase(model: &BoltzmannModel, rows: &Array2<f64>) -> Result<Array2<f64>> {
    let (p, m) = (model.p, model.m);
    let u = p + m;
    let n = rows.nrows();
    let mut acc = Array2::zeros((u, u));
    for row in rows.outer_iter() {
        let v = row.as_slice().expect("row-major data");
        let probs = rbm_conditional_hidden(model, v)?;
        for j in 0..p {
            acc[[j, j]] += v[j];
            if v[j] != 0.0 {
                for (k, q) in probs.iter().enumerate() {
                    let w = 2.0 * v[j] * q;
                    acc[[j, p + k]] += w;
                    acc[[p + k, j]] += w;
                }
            }
        }
        for (k, q) in probs.iter().enumerate() {
            acc[[p + k, p + k]] += q;
        }
    }
    acc /= n as f64;
    Ok(acc)
}

/// Negative phase: expected gradient statistics under the current model,
/// either estimated on a fresh proposal batch or enumerated exactly.
fn negative_phase(
    model: &BoltzmannModel,
    n_t: usize,
    seed: u64,
    exact: bool,
) -> Result<Array2<f64>> {
    if exact {
        Ok(enumeration::ising_log_z_and_grad(&model.theta)?.1)
    } else {
        let batch = sample_independence(ModelFamily::Ising, &model.theta, n_t, seed)?;
        Ok(importance::estimate_grad_log_z(ModelFamily::Ising, &model.theta, &batch)?.grad_log_z)
    }
}

/// One masked ascent step; disallowed entries stay exactly zero.
fn masked_step(
    model: &BoltzmannModel,
    gamma: f64,
    pos: &Array2<f64>,
    neg: &Array2<f64>,
) -> ThetaMatrix {
    let u = model.units();
    let mut next = ThetaMatrix::zeros(u);
    for j in 0..u {
        for k in j..u {
            if model.mask.allows(j, k) {
                let d = pos[[j, k]] - neg[[j, k]];
                next.set(j, k, model.theta.get(j, k) + gamma * d);
            }
        }
    }
    assert!(model.mask.is_respected(&next), "masked entries drifted");
    next
}

/// Train a bipartite model by stochastic gradient ascent on the visible
/// marginal likelihood: exact positive phase through the hidden
/// conditionals, importance-estimated negative phase on growing batches.
pub fn rbm_fit(data: &DataMatrix, m: usize, config: &TrainConfig) -> Result<BoltzmannModel> {
    check_binary(data.rows())?;
    let p = data.p();
    let n0 = config.validate(p + m)?;
    let mut model = init_model(data, m, Mask::rbm(p, m), config.seed)?;
    for t in 0..config.max_epochs {
        let pos = bipartite_phase(&model, data.rows())?;
        let neg = negative_phase(
            &model,
            config.batch_size(n0, t),
            mix(config.seed, t as u64),
            config.exact,
        )?;
        model.theta = masked_step(&model, config.step_size(t), &pos, &neg);
    }
    Ok(model)
}

/// Contrastive-divergence baseline: chains start at the data rows, alternate
/// the block conditionals k times, and the chain-end rows (with exact hidden
/// conditionals) supply the negative statistics.
pub fn cd_k_fit(
    data: &DataMatrix,
    m: usize,
    k: usize,
    config: &TrainConfig,
) -> Result<BoltzmannModel> {
    check_binary(data.rows())?;
    if k == 0 {
        return Err(PegmError::contract("k must be >= 1"));
    }
    let p = data.p();
    config.validate(p + m)?;
    let mut model = init_model(data, m, Mask::rbm(p, m), config.seed)?;
    let n = data.n();
    for t in 0..config.max_epochs {
        let pos = bipartite_phase(&model, data.rows())?;
        let chain_seed = mix(config.seed, 0xCD00 + t as u64);
        let ends: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(mix2(chain_seed, t as u64, i as u64));
                let mut v: Vec<f64> = data.row(i).to_vec();
                let mut h = vec![0.0; m];
                for _ in 0..k {
                    let hp = rbm_conditional_hidden(&model, &v).expect("bipartite by construction");
                    for (hk, q) in h.iter_mut().zip(&hp) {
                        *hk = f64::from(rng.random::<f64>() < *q);
                    }
                    let vp = rbm_conditional_visible(&model, &h).expect("bipartite");
                    for (vj, q) in v.iter_mut().zip(&vp) {
                        *vj = f64::from(rng.random::<f64>() < *q);
                    }
                }
                v
            })
            .collect();
        let mut end_rows = Array2::zeros((n, p));
        for (i, row) in ends.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                end_rows[[i, j]] = x;
            }
        }
        let neg = bipartite_phase(&model, &end_rows)?;
        model.theta = masked_step(&model, config.step_size(t), &pos, &neg);
    }
    Ok(model)
}

/// Exact conditional hidden moments by enumerating the hidden block.
fn exact_hidden_moments(theta_hv: &ThetaMatrix) -> Result<(Vec<f64>, Array2<f64>)> {
    let m = theta_hv.p();
    if m > MAX_ENUM_NODES {
        return Err(PegmError::resource("hidden block too large to enumerate"));
    }
    let probs = enumeration::ising_state_log_probs(theta_hv)?;
    let mut first = vec![0.0; m];
    let mut second = Array2::zeros((m, m));
    let mut buf = vec![0.0; m];
    for (s, lp) in probs.iter().enumerate() {
        enumeration::ising_state(s, &mut buf);
        let w = lp.exp();
        for k in 0..m {
            if buf[k] == 1.0 {
                first[k] += w;
                second[[k, k]] += w;
                for k2 in (k + 1)..m {
                    if buf[k2] == 1.0 {
                        second[[k, k2]] += w;
                        second[[k2, k]] += w;
                    }
                }
            }
        }
    }
    Ok((first, second))
}

/// Expected complete-data gradient statistics given the visibles: hidden
/// units enter through their conditional first and second moments, computed
/// per distinct visible row.
fn bm_positive_phase(
    model: &BoltzmannModel,
    data: &DataMatrix,
    n_t: usize,
    seed: u64,
    exact: bool,
) -> Result<Array2<f64>> {
    let (p, m) = (model.p, model.m);
    let u = p + m;
    let n = data.n();
    // group duplicate rows; the hidden conditional depends only on the row
    let mut groups: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    for row in data.rows().outer_iter() {
        let key: Vec<u64> = row.iter().map(|x| x.to_bits()).collect();
        *groups.entry(key).or_insert(0) += 1;
    }
    let tasks: Vec<(Vec<f64>, usize)> = groups
        .into_iter()
        .map(|(key, c)| (key.into_iter().map(f64::from_bits).collect(), c))
        .collect();
    let partials: Vec<Result<Array2<f64>>> = tasks
        .par_iter()
        .enumerate()
        .map(|(idx, (v, count))| {
            let theta_hv = model.conditional_hidden_theta(v);
            let (eh, ehh) = if exact {
                exact_hidden_moments(&theta_hv)?
            } else {
                let batch = sample_independence(
                    ModelFamily::Ising,
                    &theta_hv,
                    n_t,
                    mix2(seed, 0xE57, idx as u64),
                )?;
                binary_moments(&theta_hv, &batch)?
            };
            let w = *count as f64;
            let mut acc = Array2::zeros((u, u));
            for j in 0..p {
                acc[[j, j]] += w * v[j];
                for j2 in (j + 1)..p {
                    let x = 2.0 * w * v[j] * v[j2];
                    acc[[j, j2]] += x;
                    acc[[j2, j]] += x;
                }
                if v[j] != 0.0 {
                    for k in 0..m {
                        let x = 2.0 * w * v[j] * eh[k];
                        acc[[j, p + k]] += x;
                        acc[[p + k, j]] += x;
                    }
                }
            }
            for k in 0..m {
                acc[[p + k, p + k]] += w * eh[k];
                for k2 in (k + 1)..m {
                    let x = 2.0 * w * ehh[[k, k2]];
                    acc[[p + k, p + k2]] += x;
                    acc[[p + k2, p + k]] += x;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut pos = Array2::zeros((u, u));
    for part in partials {
        pos += &part?;
    }
    pos /= n as f64;
    Ok(pos)
}

/// Monte Carlo EM for a general masked model: per-row conditional hidden
/// moments form the expected positive phase, the joint negative phase is
/// estimated on growing batches, and each epoch takes one masked ascent
/// step. With m = 0 this is exactly the fully observed likelihood ascent.
pub fn bm_fit(
    data: &DataMatrix,
    m: usize,
    mask: Mask,
    config: &TrainConfig,
) -> Result<BoltzmannModel> {
    check_binary(data.rows())?;
    let p = data.p();
    let n0 = config.validate(p + m)?;
    let mut model = init_model(data, m, mask, config.seed)?;
    let observed = if m == 0 {
        Some(importance::sample_grad_log_z(ModelFamily::Ising, data))
    } else {
        None
    };
    for t in 0..config.max_epochs {
        let n_t = config.batch_size(n0, t);
        let pos = match &observed {
            Some(g) => g.clone(),
            None => bm_positive_phase(&model, data, n_t, mix(config.seed, 0xE000 + t as u64), config.exact)?,
        };
        let neg = negative_phase(&model, n_t, mix(config.seed, t as u64), config.exact)?;
        model.theta = masked_step(&model, config.step_size(t), &pos, &neg);
    }
    Ok(model)
}

/// Reconstruction probabilities for one visible row: draw the hidden units
/// given v (exactly for a bipartite mask, by a short Gibbs pass on the
/// conditional hidden model otherwise), then report each visible unit's
/// conditional probability given the drawn hiddens and the other visibles.
pub fn reconstruct(model: &BoltzmannModel, v: &[f64], seed: u64) -> Result<Vec<f64>> {
    if v.len() != model.p {
        return Err(PegmError::contract("visible vector has the wrong length"));
    }
    if v.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(PegmError::contract("entries must all be 0 or 1"));
    }
    let (p, m) = (model.p, model.m);
    let mut rng = stream(mix(seed, 0x4EC0));
    let mut h = vec![0.0; m];
    if m > 0 {
        if model.mask.is_rbm_shape(p, m) {
            let probs = rbm_conditional_hidden(model, v)?;
            for (hk, q) in h.iter_mut().zip(&probs) {
                *hk = f64::from(rng.random::<f64>() < *q);
            }
        } else {
            let theta_hv = model.conditional_hidden_theta(v);
            for (k, hk) in h.iter_mut().enumerate() {
                *hk = f64::from(rng.random::<f64>() < sigmoid(theta_hv.get(k, k)));
            }
            for _ in 0..BM_RECON_SWEEPS {
                for k in 0..m {
                    let s = model::node_conditional_natural_param(&theta_hv, &h, k)?;
                    h[k] = f64::from(rng.random::<f64>() < sigmoid(s));
                }
            }
        }
    }
    let mut full: Vec<f64> = v.to_vec();
    full.extend_from_slice(&h);
    let mut probs = Vec::with_capacity(p);
    for j in 0..p {
        probs.push(sigmoid(model::node_conditional_natural_param(
            &model.theta,
            &full,
            j,
        )?));
    }
    Ok(probs)
}

/// Mean squared deviation between binary truth and predicted probabilities.
pub fn brier_loss(truth: &Array2<f64>, probs: &Array2<f64>) -> Result<f64> {
    if truth.dim() != probs.dim() {
        return Err(PegmError::contract("shape mismatch"));
    }
    check_binary(truth)?;
    if probs.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
        return Err(PegmError::contract("probabilities must lie in [0, 1]"));
    }
    let n = truth.len();
    if n == 0 {
        return Err(PegmError::contract("empty inputs"));
    }
    Ok(truth
        .iter()
        .zip(probs.iter())
        .map(|(t, q)| (t - q) * (t - q))
        .sum::<f64>()
        / n as f64)
}

/// Log marginal likelihood of one visible row. The identity
/// log p(v) = [log q(v,h) - log z] - [log q(h|v) - log z_cond] holds for any
/// hidden probe h; the estimator averages it over random probes with fresh
/// proposal batches per probe (log-mean-exp), while the exact mode sums the
/// hidden block out directly and uses no probes at all.
pub fn marginal_log_likelihood(
    model: &BoltzmannModel,
    v: &[f64],
    mc_n: usize,
    exact: bool,
    seed: u64,
) -> Result<f64> {
    if v.len() != model.p {
        return Err(PegmError::contract("visible vector has the wrong length"));
    }
    let (p, m) = (model.p, model.m);
    if exact {
        if p + m > MAX_ENUM_NODES {
            return Err(PegmError::resource("joint too large to enumerate"));
        }
        let log_z = enumeration::ising_log_z(&model.theta)?;
        let mut buf = vec![0.0; m];
        let mut terms = Vec::with_capacity(1 << m);
        let mut full: Vec<f64> = v.to_vec();
        full.extend(std::iter::repeat(0.0).take(m));
        for s in 0..(1usize << m) {
            enumeration::ising_state(s, &mut buf);
            full[p..].copy_from_slice(&buf);
            terms.push(model::log_q(ModelFamily::Ising, &model.theta, &full)?);
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
        return Ok(lse - log_z);
    }
    let n = if mc_n == 0 {
        recommended_n(p + m, importance::DEFAULT_BATCH_SCALE)
    } else {
        mc_n
    };
    let theta_hv = model.conditional_hidden_theta(v);
    let mut rng = stream(mix(seed, 0x9B0B));
    let probes = if m == 0 { 1 } else { MARGINAL_PROBES };
    let mut estimates = Vec::with_capacity(probes);
    for i in 0..probes {
        let h: Vec<f64> = (0..m)
            .map(|_| f64::from(rng.random::<f64>() < 0.5))
            .collect();
        let mut full: Vec<f64> = v.to_vec();
        full.extend_from_slice(&h);
        let joint_batch = sample_independence(
            ModelFamily::Ising,
            &model.theta,
            n,
            mix2(seed, 0x9B01, i as u64),
        )?;
        let joint =
            importance::estimate_grad_log_z(ModelFamily::Ising, &model.theta, &joint_batch)?;
        let log_joint = model::log_q(ModelFamily::Ising, &model.theta, &full)? - joint.log_z_hat;
        let log_cond = if m == 0 {
            0.0
        } else {
            let cond_batch = sample_independence(
                ModelFamily::Ising,
                &theta_hv,
                n,
                mix2(seed, 0x9B02, i as u64),
            )?;
            let cond =
                importance::estimate_grad_log_z(ModelFamily::Ising, &theta_hv, &cond_batch)?;
            model::log_q(ModelFamily::Ising, &theta_hv, &h)? - cond.log_z_hat
        };
        estimates.push(log_joint - log_cond);
    }
    let mx = estimates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(mx + (estimates.iter().map(|e| (e - mx).exp()).sum::<f64>() / probes as f64).ln())
}

/// Exact visible marginal as log probabilities over the 2^p states, indexed
/// by bit pattern (bit j is node j), hidden block summed out.
pub fn visible_log_marginal(theta: &ThetaMatrix, p: usize, m: usize) -> Result<Vec<f64>> {
    if theta.p() != p + m {
        return Err(PegmError::contract("theta size must equal p + m"));
    }
    if p > MAX_TV_BLOCK || m > MAX_TV_BLOCK {
        return Err(PegmError::resource(
            "visible or hidden block exceeds the enumeration cap",
        ));
    }
    if (p + m) as u32 > MAX_TV_LOG2_STATES {
        return Err(PegmError::resource("joint state space too large"));
    }
    let mut vbuf = vec![0.0; p];
    let mut hbuf = vec![0.0; m];
    let mut full = vec![0.0; p + m];
    let mut logs = Vec::with_capacity(1 << p);
    for sv in 0..(1usize << p) {
        enumeration::ising_state(sv, &mut vbuf);
        full[..p].copy_from_slice(&vbuf);
        let mut mx = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(1 << m);
        for sh in 0..(1usize << m) {
            enumeration::ising_state(sh, &mut hbuf);
            full[p..].copy_from_slice(&hbuf);
            let lq = model::log_q(ModelFamily::Ising, theta, &full)?;
            mx = mx.max(lq);
            terms.push(lq);
        }
        logs.push(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln());
    }
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = mx + logs.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
    Ok(logs.into_iter().map(|l| l - log_z).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct TvReport {
    /// Sum of absolute visible-probability differences (range [0, 2]).
    pub l1: f64,
    /// Conventional total variation distance: half the l1 value.
    pub tv: f64,
}

/// Exact distance between the visible marginals of two models sharing the
/// visible dimension, by enumerating visibles and summing hidden blocks out.
pub fn total_variation_exact(
    theta_a: &ThetaMatrix,
    m_a: usize,
    theta_b: &ThetaMatrix,
    m_b: usize,
    p: usize,
) -> Result<TvReport> {
    let a = visible_log_marginal(theta_a, p, m_a)?;
    let b = visible_log_marginal(theta_b, p, m_b)?;
    let l1: f64 = a
        .iter()
        .zip(&b)
        .map(|(la, lb)| (la.exp() - lb.exp()).abs())
        .sum();
    Ok(TvReport { l1, tv: l1 / 2.0 })
}

/// Correlated binary patterns: each row thresholds a latent equicorrelated
/// normal vector at zero, giving marginally balanced bits with a common
/// positive dependence.
pub fn probit_patterns(p: usize, n: usize, rho: f64, seed: u64) -> Result<DataMatrix> {
    if !(0.0..1.0).contains(&rho) {
        return Err(PegmError::contract("rho must lie in [0, 1)"));
    }
    if p == 0 {
        return Err(PegmError::contract("p must be >= 1"));
    }
    let mut rng = stream(mix(seed, 0x9801));
    let mut rows = Array2::zeros((n, p));
    let shared = rho.sqrt();
    let own = (1.0 - rho).sqrt();
    for i in 0..n {
        let g0: f64 = rng.sample(rand_distr::StandardNormal);
        for j in 0..p {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            rows[[i, j]] = f64::from(shared * g0 + own * e > 0.0);
        }
    }
    DataMatrix::new(rows, ModelFamily::Ising)
}

/// Exact total visible log-likelihood of binary rows under the model,
/// hidden block summed out (tiny models; the EM ascent oracle).
pub fn visible_log_likelihood_exact(model: &BoltzmannModel, data: &DataMatrix) -> Result<f64> {
    check_binary(data.rows())?;
    let probs = visible_log_marginal(&model.theta, model.p, model.m)?;
    let mut total = 0.0;
    for row in data.rows().outer_iter() {
        let mut idx = 0usize;
        for (j, &x) in row.iter().enumerate() {
            if x == 1.0 {
                idx |= 1 << j;
            }
        }
        total += probs[idx];
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::{mle_fit, FitConfig, StepSchedule};
    use approx::assert_abs_diff_eq;

    fn tiny_rbm(p: usize, m: usize, vals: &[((usize, usize), f64)]) -> BoltzmannModel {
        let mut theta = ThetaMatrix::zeros(p + m);
        for &((j, k), v) in vals {
            theta.set(j, k, v);
        }
        let mask = Mask::rbm(p, m);
        let theta = mask.apply(&theta);
        BoltzmannModel { p, m, theta, mask }
    }

    #[test]
    fn hidden_conditionals_match_joint_enumeration() {
        let model = tiny_rbm(
            2,
            2,
            &[
                ((0, 0), 0.3),
                ((1, 1), -0.2),
                ((2, 2), 0.5),
                ((3, 3), -0.4),
                ((0, 2), 0.7),
                ((0, 3), -0.3),
                ((1, 2), 0.2),
                ((1, 3), 0.6),
            ],
        );
        for sv in 0..4usize {
            let v = [(sv & 1) as f64, ((sv >> 1) & 1) as f64];
            let probs = rbm_conditional_hidden(&model, &v).unwrap();
            // brute-force p(h | v) from the joint
            let mut lqs = Vec::new();
            for sh in 0..4usize {
                let h = [(sh & 1) as f64, ((sh >> 1) & 1) as f64];
                let full = [v[0], v[1], h[0], h[1]];
                lqs.push(model::log_q(ModelFamily::Ising, &model.theta, &full).unwrap());
            }
            let mx = lqs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = lqs.iter().map(|l| (l - mx).exp()).sum();
            for sh in 0..4usize {
                let h = [(sh & 1) as f64, ((sh >> 1) & 1) as f64];
                let brute = (lqs[sh] - mx).exp() / z;
                let product: f64 = (0..2)
                    .map(|k| if h[k] == 1.0 { probs[k] } else { 1.0 - probs[k] })
                    .product();
                assert_abs_diff_eq!(brute, product, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conditionals_center_and_saturate() {
        let model = tiny_rbm(2, 2, &[]);
        let probs = rbm_conditional_hidden(&model, &[1.0, 0.0]).unwrap();
        assert_eq!(probs, vec![0.5, 0.5]);
        let model = tiny_rbm(2, 1, &[((0, 2), 20.0)]);
        let probs = rbm_conditional_hidden(&model, &[1.0, 0.0]).unwrap();
        assert!(probs[0] > 1.0 - 1e-12);
    }

    #[test]
    fn non_bipartite_masks_are_rejected() {
        let model = BoltzmannModel {
            p: 2,
            m: 2,
            theta: ThetaMatrix::zeros(4),
            mask: Mask::full(2, 2),
        };
        assert!(rbm_conditional_hidden(&model, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn layered_mask_allows_adjacent_layers_only() {
        let mask = Mask::dbm(&[2, 2, 1]).unwrap();
        assert!(mask.allows(0, 2) && mask.allows(3, 4));
        assert!(!mask.allows(0, 1) && !mask.allows(0, 4) && !mask.allows(2, 3));
        assert!(Mask::dbm(&[3]).is_err());
        assert!(Mask::from_spec(&MaskSpec::Dbm(vec![2, 2]), 3, 1).is_err());
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let data = probit_patterns(3, 40, 0.4, 5).unwrap();
        let config = TrainConfig {
            max_epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = rbm_fit(&data, 2, &config).unwrap();
        let b = rbm_fit(&data, 2, &config).unwrap();
        assert_eq!(a.theta.values(), b.theta.values());
        let vis = independence_init(ModelFamily::Ising, &data).unwrap();
        for j in 0..3 {
            assert_eq!(a.theta.get(j, j), vis.get(j, j));
        }
        for k in 0..2 {
            assert_eq!(a.theta.get(3 + k, 3 + k), 0.0);
        }
        for j in 0..3 {
            for k in 3..5 {
                assert!(a.theta.get(j, k).abs() <= INIT_WEIGHT_SCALE);
            }
        }
        assert_eq!(a.theta.get(0, 1), 0.0);
        assert_eq!(a.theta.get(3, 4), 0.0);
    }

    #[test]
    fn stochastic_negative_phase_is_unbiased() {
        let model = tiny_rbm(
            2,
            2,
            &[
                ((0, 0), 0.2),
                ((1, 1), -0.3),
                ((2, 2), 0.1),
                ((3, 3), 0.4),
                ((0, 2), 0.5),
                ((1, 3), -0.6),
            ],
        );
        let exact = negative_phase(&model, 0, 0, true).unwrap();
        let reps = 200;
        let n = 2000;
        let mut sums = Array2::zeros((4, 4));
        let mut sq = Array2::zeros((4, 4));
        for r in 0..reps {
            let est = negative_phase(&model, n, mix(91, r as u64), false).unwrap();
            sums += &est;
            sq += &est.mapv(|x| x * x);
        }
        for j in 0..4 {
            for k in j..4 {
                if !model.mask.allows(j, k) {
                    continue;
                }
                let mean = sums[[j, k]] / reps as f64;
                let var = sq[[j, k]] / reps as f64 - mean * mean;
                let se = (var / reps as f64).sqrt();
                assert!(
                    (mean - exact[[j, k]]).abs() <= 3.0 * se + 2e-4,
                    "entry ({j},{k}): mean {mean}, exact {}",
                    exact[[j, k]]
                );
            }
        }
    }

    #[test]
    fn uniform_data_learns_a_near_uniform_marginal() {
        let data = probit_patterns(2, 2000, 0.0, 21).unwrap();
        let config = TrainConfig {
            max_epochs: 150,
            seed: 33,
            ..TrainConfig::default()
        };
        let model = rbm_fit(&data, 2, &config).unwrap();
        let uniform = ThetaMatrix::zeros(2);
        let report =
            total_variation_exact(&model.theta, 2, &uniform, 0, 2).unwrap();
        assert!(report.tv <= 0.1, "tv {}", report.tv);
    }

    #[test]
    fn long_chain_divergence_approaches_full_likelihood_quality() {
        let mut t0 = ThetaMatrix::zeros(4);
        t0.set(0, 0, 0.4);
        t0.set(1, 1, -0.3);
        t0.set(0, 2, 0.8);
        t0.set(1, 3, -0.7);
        t0.set(0, 3, 0.3);
        let mask = Mask::rbm(2, 2);
        let t0 = mask.apply(&t0);
        let joint = crate::sampler::gibbs_sample(ModelFamily::Ising, &t0, 1500, 500, 3, 61)
            .unwrap();
        // keep the visible columns only; the hiddens are the target of the fit
        let visibles = joint.rows().slice(ndarray::s![.., 0..2]).to_owned();
        let data = DataMatrix::new(visibles, ModelFamily::Ising).unwrap();
        let config = TrainConfig {
            max_epochs: 120,
            seed: 7,
            ..TrainConfig::default()
        };
        let fl = rbm_fit(&data, 2, &config).unwrap();
        let cd = cd_k_fit(&data, 2, 20, &config).unwrap();
        let tv_fl = total_variation_exact(&fl.theta, 2, &t0, 2, 2).unwrap().tv;
        let tv_cd = total_variation_exact(&cd.theta, 2, &t0, 2, 2).unwrap().tv;
        assert!(
            (tv_fl - tv_cd).abs() <= 0.05,
            "fl {tv_fl}, cd {tv_cd}"
        );
    }

    #[test]
    fn contrastive_divergence_is_deterministic() {
        let data = probit_patterns(3, 120, 0.5, 77).unwrap();
        let config = TrainConfig {
            max_epochs: 15,
            seed: 13,
            ..TrainConfig::default()
        };
        let a = cd_k_fit(&data, 2, 1, &config).unwrap();
        let b = cd_k_fit(&data, 2, 1, &config).unwrap();
        assert_eq!(a.theta.values(), b.theta.values());
    }

    #[test]
    fn no_hidden_units_reduces_to_the_likelihood_ascent() {
        let data = probit_patterns(2, 300, 0.5, 41).unwrap();
        let train = TrainConfig {
            gamma0: 0.1,
            t0: 100.0,
            n0: 400,
            max_epochs: 1,
            seed: 77,
            exact: false,
        };
        let bm = bm_fit(&data, 0, Mask::full(2, 0), &train).unwrap();
        let fit = mle_fit(
            ModelFamily::Ising,
            &data,
            &FitConfig {
                gamma0: 0.1,
                schedule: StepSchedule::RobbinsMonro { t0: 100.0 },
                max_iters: 1,
                mc_n: 400,
                seed: 77,
                ..FitConfig::default()
            },
        )
        .unwrap();
        assert_eq!(bm.theta.values(), fit.theta_hat.values());
    }

    #[test]
    fn expected_phase_agrees_with_bipartite_phase_in_direction() {
        let data = probit_patterns(2, 200, 0.5, 51).unwrap();
        let model = tiny_rbm(
            2,
            2,
            &[
                ((0, 0), 0.4),
                ((1, 1), -0.5),
                ((2, 2), 0.3),
                ((3, 3), -0.2),
                ((0, 2), 0.6),
                ((0, 3), -0.5),
                ((1, 2), 0.4),
                ((1, 3), 0.7),
            ],
        );
        let pos_exact = bipartite_phase(&model, data.rows()).unwrap();
        let pos_mc = bm_positive_phase(&model, &data, 100_000, 19, false).unwrap();
        let neg = negative_phase(&model, 100_000, 23, false).unwrap();
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for j in 0..4 {
            for k in j..4 {
                if !model.mask.allows(j, k) {
                    continue;
                }
                let a = pos_exact[[j, k]] - neg[[j, k]];
                let b = pos_mc[[j, k]] - neg[[j, k]];
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
        }
        let cosine = dot / (na.sqrt() * nb.sqrt());
        assert!(cosine >= 0.95, "cosine {cosine}");
    }

    #[test]
    fn exact_em_never_decreases_the_likelihood() {
        let data = probit_patterns(2, 300, 0.5, 71).unwrap();
        let lls: Vec<f64> = (0..=25)
            .map(|epochs| {
                let config = TrainConfig {
                    gamma0: 0.02,
                    t0: 1e12,
                    max_epochs: epochs,
                    seed: 5,
                    exact: true,
                    ..TrainConfig::default()
                };
                let model = bm_fit(&data, 2, Mask::full(2, 2), &config).unwrap();
                visible_log_likelihood_exact(&model, &data).unwrap()
            })
            .collect();
        for w in lls.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "dropped from {} to {}", w[0], w[1]);
        }
        assert!(lls[25] > lls[0]);
    }

    #[test]
    fn reconstruction_copies_when_saturated_and_centers_at_zero() {
        // each hidden unit mirrors one visible; biases make zeros copy too
        let model = tiny_rbm(
            2,
            2,
            &[
                ((0, 0), -15.0),
                ((1, 1), -15.0),
                ((2, 2), -15.0),
                ((3, 3), -15.0),
                ((0, 2), 15.0),
                ((1, 3), 15.0),
            ],
        );
        for v in [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]] {
            let probs = reconstruct(&model, &v, 4).unwrap();
            for (q, x) in probs.iter().zip(&v) {
                assert!((q - x).abs() < 1e-5, "probs {probs:?} for {v:?}");
            }
        }
        let flat = tiny_rbm(2, 2, &[]);
        assert_eq!(reconstruct(&flat, &[1.0, 0.0], 9).unwrap(), vec![0.5, 0.5]);
        // dependent hiddens go through the Gibbs path
        let mut theta = ThetaMatrix::zeros(4);
        theta.set(0, 2, 12.0);
        theta.set(1, 3, 12.0);
        theta.set(2, 3, 0.3);
        let bm = BoltzmannModel {
            p: 2,
            m: 2,
            theta,
            mask: Mask::full(2, 2),
        };
        let probs = reconstruct(&bm, &[1.0, 0.0], 11).unwrap();
        assert!(probs[0] > 0.99, "probs {probs:?}");
        assert_eq!(probs, reconstruct(&bm, &[1.0, 0.0], 11).unwrap());
    }

    #[test]
    fn brier_arithmetic() {
        let truth = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(brier_loss(&truth, &truth).unwrap(), 0.0);
        let half = Array2::from_elem((2, 2), 0.5);
        assert_eq!(brier_loss(&truth, &half).unwrap(), 0.25);
        let wrong = truth.mapv(|x| 1.0 - x);
        assert_eq!(brier_loss(&truth, &wrong).unwrap(), 1.0);
        assert!(brier_loss(&truth, &Array2::zeros((1, 2))).is_err());
        assert!(brier_loss(&truth, &Array2::from_elem((2, 2), 1.5)).is_err());
    }

    #[test]
    fn marginal_likelihood_matches_enumeration() {
        let model = tiny_rbm(
            2,
            2,
            &[
                ((0, 0), 0.3),
                ((1, 1), -0.1),
                ((2, 2), 0.2),
                ((3, 3), -0.5),
                ((0, 2), 0.6),
                ((0, 3), -0.4),
                ((1, 2), 0.3),
            ],
        );
        let v = [1.0, 0.0];
        let exact = marginal_log_likelihood(&model, &v, 0, true, 0).unwrap();
        let est = marginal_log_likelihood(&model, &v, 100_000, false, 3).unwrap();
        assert!(
            (est - exact).abs() <= 0.01 * exact.abs().max(1.0),
            "est {est}, exact {exact}"
        );
        // exact mode ignores probe randomness entirely
        let again = marginal_log_likelihood(&model, &v, 0, true, 999).unwrap();
        assert_eq!(exact, again);
    }

    #[test]
    fn total_variation_arithmetic_and_caps() {
        let a = ThetaMatrix::zeros(1);
        let report = total_variation_exact(&a, 0, &a, 0, 1).unwrap();
        assert_eq!(report.l1, 0.0);
        // near point mass at v = 1 against uniform
        let b = ThetaMatrix::from_diag(&[40.0]).unwrap();
        let report = total_variation_exact(&a, 0, &b, 0, 1).unwrap();
        assert_abs_diff_eq!(report.l1, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(report.tv, 0.5, epsilon = 1e-10);
        let big = ThetaMatrix::zeros(21);
        assert!(total_variation_exact(&big, 0, &big, 0, 21).is_err());
    }

    #[test]
    fn probit_patterns_are_balanced_and_correlated() {
        let data = probit_patterns(4, 4000, 0.5, 17).unwrap();
        let means = data.means();
        for m in means.iter() {
            assert_abs_diff_eq!(*m, 0.5, epsilon = 0.05);
        }
        let rows = data.rows();
        let mut cov = 0.0;
        for i in 0..4000 {
            cov += (rows[[i, 0]] - means[0]) * (rows[[i, 1]] - means[1]);
        }
        cov /= 4000.0;
        assert!(cov > 0.05, "cov {cov}");
        let again = probit_patterns(4, 4000, 0.5, 17).unwrap();
        assert_eq!(data.rows(), again.rows());
    }
}
