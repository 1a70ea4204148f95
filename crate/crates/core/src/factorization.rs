//! Soft prompts factorized over shared per-subspace codebooks.
//!
//! The model dimension `d` is split into `K` subspaces of width `t = d / K`.
//! Subspace `k` owns a codebook of `r` codewords; every prompt position mixes
//! those codewords with its own free coefficients. Positions therefore share
//! the `r·d` codebook parameters and only pay `r·K` each for their weights.

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Width of each subspace when `d` is split into `k` equal parts.
pub fn validate_partition(d: usize, k: usize) -> Result<usize> {
    if d == 0 || k == 0 || !d.is_multiple_of(k) {
        return Err(Error::Partition { d, k });
    }
    Ok(d / k)
}

/// `K` tables of `r` codewords, each of width `t`. Stored `[K, r, t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    k: usize,
    r: usize,
    t: usize,
    entries: Vec<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(k: usize, r: usize, t: usize, entries: Vec<T>) -> Result<Self> {
        if k == 0 || t == 0 {
            return Err(Error::Contract(format!("codebook needs K, t >= 1 (K={k}, t={t})")));
        }
        if entries.len() != k * r * t {
            return Err(Error::Contract(format!(
                "codebook K={k} r={r} t={t} needs {} entries, got {}",
                k * r * t,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Self { k, r, t, entries })
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        match *tensor.shape() {
            [k, r, t] => Self::new(k, r, t, tensor.into_data()),
            ref s => Err(Error::Contract(format!("codebook tensor must be [K, r, t], got {s:?}"))),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Model dimension this codebook composes into.
    pub fn d(&self) -> usize {
        self.k * self.t
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn codeword(&self, k: usize, j: usize) -> &[T] {
        let start = (k * self.r + j) * self.t;
        &self.entries[start..start + self.t]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.k, self.r, self.t], self.entries.clone()).expect("shape checked")
    }

    pub fn num_params(&self) -> usize {
        self.entries.len()
    }

    pub fn cast<U: Scalar>(&self) -> Codebook<U> {
        Codebook {
            k: self.k,
            r: self.r,
            t: self.t,
            entries: self.entries.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Per-position, per-subspace mixing coefficients. Stored `[positions, K, r]`.
///
/// Coefficients are unconstrained reals.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<T> {
    positions: usize,
    k: usize,
    r: usize,
    entries: Vec<T>,
}

impl<T: Scalar> WeightSet<T> {
    pub fn new(positions: usize, k: usize, r: usize, entries: Vec<T>) -> Result<Self> {
        if entries.len() != positions * k * r {
            return Err(Error::Contract(format!(
                "weights positions={positions} K={k} r={r} need {} entries, got {}",
                positions * k * r,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight entries".into()));
        }
        Ok(Self { positions, k, r, entries })
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        match *tensor.shape() {
            [p, k, r] => Self::new(p, k, r, tensor.into_data()),
            ref s => Err(Error::Contract(format!("weight tensor must be [positions, K, r], got {s:?}"))),
        }
    }

    /// Position `i` selects codeword `i` in every subspace. Requires `r == positions`.
    pub fn one_hot(positions: usize, k: usize) -> Self {
        let r = positions;
        let mut entries = vec![T::zero(); positions * k * r];
        for i in 0..positions {
            for kk in 0..k {
                entries[(i * k + kk) * r + i] = T::one();
            }
        }
        Self { positions, k, r, entries }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn coefficients(&self, i: usize, k: usize) -> &[T] {
        let start = (i * self.k + k) * self.r;
        &self.entries[start..start + self.r]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.positions, self.k, self.r], self.entries.clone()).expect("shape checked")
    }

    pub fn num_params(&self) -> usize {
        self.entries.len()
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        WeightSet {
            positions: self.positions,
            k: self.k,
            r: self.r,
            entries: self.entries.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// A `positions × d` prompt matrix built from a codebook and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedPrompt<T> {
    positions: usize,
    d: usize,
    values: Vec<T>,
}

impl<T: Scalar> ComposedPrompt<T> {
    pub fn new(positions: usize, d: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != positions * d {
            return Err(Error::Contract(format!(
                "prompt {positions}x{d} needs {} values, got {}",
                positions * d,
                values.len()
            )));
        }
        Ok(Self { positions, d, values })
    }

    pub fn zeros(positions: usize, d: usize) -> Self {
        Self { positions, d, values: vec![T::zero(); positions * d] }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.positions, self.d], self.values.clone()).expect("shape checked")
    }
}

fn check_pair<T: Scalar>(codebook: &Codebook<T>, weights: &WeightSet<T>) -> Result<()> {
    if codebook.k != weights.k || codebook.r != weights.r {
        return Err(Error::Contract(format!(
            "codebook (K={}, r={}) and weights (K={}, r={}) disagree",
            codebook.k, codebook.r, weights.k, weights.r
        )));
    }
    Ok(())
}

/// Builds every sub-prompt as a linear combination of its subspace's codewords.
pub fn compose<T: Scalar>(codebook: &Codebook<T>, weights: &WeightSet<T>) -> Result<ComposedPrompt<T>> {
    check_pair(codebook, weights)?;
    let values =
        compose_raw(&codebook.entries, &weights.entries, weights.positions, codebook.k, codebook.r, codebook.t);
    ComposedPrompt::new(weights.positions, codebook.d(), values)
}

/// Gradients of a loss with respect to the codebook (`[K, r, t]`) and the
/// weights (`[positions, K, r]`), given its gradient `dp` with respect to
/// the composed prompt.
pub fn compose_backward<T: Scalar>(
    codebook: &Codebook<T>,
    weights: &WeightSet<T>,
    dp: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(codebook, weights)?;
    let expected = [weights.positions, codebook.d()];
    if dp.shape() != expected {
        return Err(Error::shape("compose_backward", dp.shape(), &expected));
    }
    let (dc, dw) = compose_backward_raw(
        &codebook.entries,
        &weights.entries,
        dp.data(),
        weights.positions,
        codebook.k,
        codebook.r,
        codebook.t,
    );
    Ok((
        Tensor::new(&[codebook.k, codebook.r, codebook.t], dc)?,
        Tensor::new(&[weights.positions, weights.k, weights.r], dw)?,
    ))
}

pub(crate) fn compose_raw<T: Scalar>(
    codebook: &[T],
    weights: &[T],
    positions: usize,
    k: usize,
    r: usize,
    t: usize,
) -> Vec<T> {
    let d = k * t;
    let mut out = vec![T::zero(); positions * d];
    for i in 0..positions {
        for kk in 0..k {
            let sub = &mut out[i * d + kk * t..i * d + (kk + 1) * t];
            let coeffs = &weights[(i * k + kk) * r..(i * k + kk + 1) * r];
            for (j, &w) in coeffs.iter().enumerate() {
                let word = &codebook[(kk * r + j) * t..(kk * r + j + 1) * t];
                for (o, &c) in sub.iter_mut().zip(word) {
                    *o = *o + w * c;
                }
            }
        }
    }
    out
}

pub(crate) fn compose_backward_raw<T: Scalar>(
    codebook: &[T],
    weights: &[T],
    dp: &[T],
    positions: usize,
    k: usize,
    r: usize,
    t: usize,
) -> (Vec<T>, Vec<T>) {
    let d = k * t;
    let mut dc = vec![T::zero(); k * r * t];
    let mut dw = vec![T::zero(); positions * k * r];
    for i in 0..positions {
        for kk in 0..k {
            let g = &dp[i * d + kk * t..i * d + (kk + 1) * t];
            for j in 0..r {
                let slot = (i * k + kk) * r + j;
                let word = (kk * r + j) * t;
                dw[slot] = crate::tensor::dot(g, &codebook[word..word + t]);
                let w = weights[slot];
                for (c, &gv) in dc[word..word + t].iter_mut().zip(g) {
                    *c = *c + w * gv;
                }
            }
        }
    }
    (dc, dw)
}

/// Trainable parameter count of one factorized prompt: `r·d + r·positions·K`.
pub fn param_count(r: u64, d: u64, positions: u64, k: u64) -> u64 {
    r * d + r * positions * k
}

/// Parameter cap for choosing the codebook size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub budget: u64,
    pub d: u64,
    pub positions: u64,
    #[serde(rename = "K")]
    pub k: u64,
}

impl BudgetSpec {
    pub fn new(budget: u64, d: u64, positions: u64, k: u64) -> Result<Self> {
        if d == 0 || positions == 0 || k == 0 {
            return Err(Error::Config(format!(
                "budget needs d, positions, K >= 1 (d={d}, positions={positions}, K={k})"
            )));
        }
        Ok(Self { budget, d, positions, k })
    }
}

/// Largest `r` whose parameter count fits the budget.
pub fn solve_rank(spec: &BudgetSpec) -> u64 {
    spec.budget / (spec.d + spec.positions * spec.k)
}

/// Number of distinct codeword tuples, `r^K`.
pub fn codeword_capacity(r: u64, k: u32) -> BigUint {
    BigUint::from(r).pow(k)
}

/// Sizes of one factorized prompt component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDims {
    pub positions: usize,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub r: usize,
}

impl PromptDims {
    pub fn t(&self) -> Result<usize> {
        validate_partition(self.d, self.k)
    }

    pub fn param_count(&self) -> u64 {
        param_count(self.r as u64, self.d as u64, self.positions as u64, self.k as u64)
    }
}

/// Scale of random initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    /// Desired standard deviation of composed prompt entries.
    pub target_std: f64,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        Self { target_std: 0.5 }
    }
}

/// Gaussian initialization: codewords ~ N(0, σ²) and weights ~ N(0, 1/r),
/// so each composed entry has variance r · σ² · (1/r) = σ².
pub fn init_random<T: Scalar>(dims: &PromptDims, seed: u64, scale: &ScaleSpec) -> Result<(Codebook<T>, WeightSet<T>)> {
    let t = dims.t()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = scale.target_std;
    let code_dist = Normal::new(0.0, sigma).map_err(|e| Error::Init(e.to_string()))?;
    let w_std = if dims.r == 0 { 0.0 } else { (1.0 / dims.r as f64).sqrt() };
    let weight_dist = Normal::new(0.0, w_std).map_err(|e| Error::Init(e.to_string()))?;
    let entries = (0..dims.k * dims.r * t).map(|_| T::from_f64_lossy(code_dist.sample(&mut rng))).collect();
    let codebook = Codebook::new(dims.k, dims.r, t, entries)?;
    let weights =
        (0..dims.positions * dims.k * dims.r).map(|_| T::from_f64_lossy(weight_dist.sample(&mut rng))).collect();
    let weights = WeightSet::new(dims.positions, dims.k, dims.r, weights)?;
    Ok((codebook, weights))
}

/// Empirical standard deviation of a composed prompt's entries.
pub fn empirical_std<T: Scalar>(prompt: &ComposedPrompt<T>) -> f64 {
    let n = prompt.values.len().max(1) as f64;
    let mean = prompt.values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = prompt.values.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_case() -> (Codebook<f64>, WeightSet<f64>) {
        // C¹ = {[1,0],[0,1]}, C² = {[2,2],[1,-1]}
        let c = Codebook::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 1.0, -1.0]).unwrap();
        let w = WeightSet::new(1, 2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        (c, w)
    }

    #[test]
    fn partitions() {
        assert_eq!(validate_partition(768, 24).unwrap(), 32);
        assert_eq!(validate_partition(768, 1).unwrap(), 768);
        let err = validate_partition(768, 5).unwrap_err().to_string();
        assert!(err.contains("768") && err.contains('5'), "{err}");
    }

    #[test]
    fn single_codeword_is_the_prompt() {
        let c = Codebook::new(1, 1, 3, vec![0.1, -0.2, 0.3]).unwrap();
        let w = WeightSet::new(1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(compose(&c, &w).unwrap().values(), c.entries());
    }

    #[test]
    fn hand_composition() {
        let (c, w) = hand_case();
        assert_eq!(compose(&c, &w).unwrap().values(), &[0.5, 0.5, 2.0, 2.0]);
    }

    #[test]
    fn hand_backward() {
        let (c, w) = hand_case();
        let dp = Tensor::from_f64(&[1, 4], &[1.0; 4]).unwrap();
        let (dc, dw) = compose_backward(&c, &w, &dp).unwrap();
        assert_eq!(dw.data(), &[1.0, 1.0, 4.0, 0.0]);
        assert_eq!(dc.data(), &[0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (c, w) = hand_case();
        let (dc, dw) = compose_backward(&c, &w, &Tensor::zeros(&[1, 4])).unwrap();
        assert!(dc.data().iter().chain(dw.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let (c, w) = hand_case();
        assert!(compose_backward(&c, &w, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn mismatched_pair_rejected() {
        let (c, _) = hand_case();
        let w = WeightSet::new(1, 2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(compose(&c, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn default_length_shape() {
        let dims = PromptDims { positions: 60, d: 768, k: 24, r: 20 };
        let (c, w) = init_random::<f32>(&dims, 1, &ScaleSpec::default()).unwrap();
        let p = compose(&c, &w).unwrap();
        assert_eq!((p.positions(), p.d()), (60, 768));
    }

    #[test]
    fn counts() {
        assert_eq!(param_count(20, 768, 60, 24), 44_160);
        assert_eq!(param_count(24, 768, 256, 2), 30_720);
        assert_eq!(param_count(0, 768, 60, 24), 0);
        assert_eq!(param_count(20, 768, 60, 24) + param_count(24, 768, 256, 2), 74_880);
    }

    #[test]
    fn ranks() {
        let solve = |b, d, p, k| solve_rank(&BudgetSpec::new(b, d, p, k).unwrap());
        assert_eq!(solve(46_080, 768, 60, 24), 20);
        assert_eq!(solve(30_720, 768, 256, 2), 24);
        assert_eq!(solve(500, 768, 60, 24), 0);
    }

    #[test]
    fn capacity() {
        assert_eq!(codeword_capacity(7, 1), BigUint::from(7u32));
        // enumerate all 2³ tuples
        let tuples: Vec<_> = (0..2).flat_map(|a| (0..2).flat_map(move |b| (0..2).map(move |c| (a, b, c)))).collect();
        assert_eq!(codeword_capacity(2, 3), BigUint::from(tuples.len()));
        let expected: BigUint = "16777216000000000000000000000000".parse().unwrap();
        assert_eq!(codeword_capacity(20, 24), expected);
    }

    #[test]
    fn init_is_seeded() {
        let dims = PromptDims { positions: 5, d: 8, k: 2, r: 3 };
        let a = init_random::<f32>(&dims, 9, &ScaleSpec::default()).unwrap();
        let b = init_random::<f32>(&dims, 9, &ScaleSpec::default()).unwrap();
        let c = init_random::<f32>(&dims, 10, &ScaleSpec::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_scale_tracks_target() {
        let scale = ScaleSpec { target_std: 0.3 };
        for (r, seed) in [(1, 0), (4, 1), (20, 2), (64, 3)] {
            let dims = PromptDims { positions: 60, d: 768, k: 24, r };
            let (c, w) = init_random::<f64>(&dims, seed, &scale).unwrap();
            let std = empirical_std(&compose(&c, &w).unwrap());
            assert!(std > 0.15 && std < 0.6, "r={r}: std {std}");
        }
    }

    #[test]
    fn one_hot_weights_reproduce_codewords() {
        let c = Codebook::new(1, 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = compose(&c, &WeightSet::one_hot(3, 1)).unwrap();
        assert_eq!(p.values(), c.entries());
    }
}
