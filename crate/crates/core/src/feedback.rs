//! Feedback of the potential-deletion mask from Bob to Alice.
//!
//! The mask goes through an adjacent-XOR differential (runs of ones become
//! two ones), a pre-shared permutation (to make the source look i.i.d.), and
//! a polar source code: `U = T(v)` is split into the high-entropy part
//! `U^{S^c}`, sent verbatim, and the low-entropy part `U^S`, which the
//! receiver recovers by SC decoding. The encoder replays that decoder and
//! lists the indices `𝒯` where it would err, so decompression is exact for
//! every input.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bits::{BitReader, BitVec, BitWriter};
use crate::error::{Error, Result};
use crate::exec::{map_reduce, trial_rng, Execution};
use crate::polar::{hard_decision, polar_transform, LeafLikelihoods, Memoryless, PolarDimension, ScEngine};

/// Binary entropy in bits, with `h2(0) = h2(1) = 0`.
pub fn h2(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }
}

/// `out_i = mask_i ⊕ mask_{i-1}` with an implicit leading 0.
pub fn differential(mask: &BitVec) -> BitVec {
    let mut prev = 0;
    BitVec::from_bools(mask.iter().map(|b| {
        let o = b ^ prev;
        prev = b;
        o == 1
    }))
}

/// Prefix-XOR scan, the inverse of [`differential`].
pub fn inverse_differential(diff: &BitVec) -> BitVec {
    let mut acc = 0;
    BitVec::from_bools(diff.iter().map(|b| {
        acc ^= b;
        acc == 1
    }))
}

/// Pre-shared permutation of `[0, n)` derived from a seed by Fisher–Yates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskPermutation {
    pub seed: u64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl MaskPermutation {
    pub fn new(seed: u64, n: usize) -> Self {
        MaskPermutation { seed, n }
    }

    pub fn indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        idx
    }
}

/// Forward scatters `v[i]` to position `perm[i]`; inverse gathers it back.
pub fn apply_permutation(v: &BitVec, perm: &MaskPermutation, direction: Direction) -> Result<BitVec> {
    if v.len() != perm.n {
        return Err(Error::Dimension(format!("vector of length {} for permutation of {}", v.len(), perm.n)));
    }
    let idx = perm.indices();
    let mut out = BitVec::zeros(v.len());
    for (i, &p) in idx.iter().enumerate() {
        match direction {
            Direction::Forward => out.set(p, v[i]),
            Direction::Inverse => out.set(i, v[p]),
        }
    }
    Ok(out)
}

/// How the high-entropy set `S^c` is sized from the per-index error
/// estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SizingRule {
    /// Smallest `S^c` (taken in descending error order) whose leftover
    /// estimated error mass is at most `epsilon`.
    Residual(f64),
    /// Put index `i` in `S^c` exactly when sending it (1 bit) is cheaper than
    /// its expected repair cost `bits_per_index · P_e(i)`.
    MinCost { bits_per_index: f64 },
}

impl SizingRule {
    /// Minimises `|S^c| + n·E|𝒯|` for a blocklength `2^n`.
    pub fn min_cost(dim: PolarDimension) -> Self {
        SizingRule::MinCost { bits_per_index: dim.log_n() as f64 }
    }
}

/// Source code for an (approximately) Bernoulli(`p`) binary source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceCodeSpec {
    pub dim: PolarDimension,
    pub p: f64,
    pub error_probs: Vec<f64>,
    /// `S^c`, ascending.
    pub high_entropy: Vec<usize>,
    pub sizing: SizingRule,
    pub trials: u64,
    pub seed: u64,
    is_high: Vec<bool>,
    leaves: LeafLikelihoods,
}

impl SourceCodeSpec {
    pub fn n(&self) -> usize {
        self.dim.len()
    }

    pub fn is_high_entropy(&self, i: usize) -> bool {
        self.is_high[i]
    }

    /// Expected `|𝒯|` under the design source.
    pub fn expected_repairs(&self) -> f64 {
        (0..self.n()).filter(|&i| !self.is_high[i]).map(|i| self.error_probs[i]).sum()
    }
}

/// Genie-aided SC error estimates for an i.i.d. Bernoulli(`p`) source.
pub fn source_error_estimates(
    dim: PolarDimension,
    p: f64,
    trials: u64,
    seed: u64,
    mode: Execution,
) -> Result<Vec<f64>> {
    if !(p > 0.0 && p < 0.5) {
        return Err(Error::Domain(format!("design probability {} outside (0, 1/2)", p)));
    }
    if trials == 0 {
        return Err(Error::Domain("at least one trial is required".into()));
    }
    let n = dim.len();
    let leaves = LeafLikelihoods::bernoulli(n, p)?;
    let errors = map_reduce(
        trials,
        mode,
        vec![0u64; n],
        |t| {
            let mut rng = trial_rng(seed, t);
            let x = BitVec::from_bools((0..n).map(|_| rng.gen_bool(p)));
            let u = polar_transform(&x).expect("power-of-two length");
            let ch = Memoryless(&leaves);
            let mut engine = ScEngine::new(&ch).expect("valid channel");
            let mut errs = vec![0u64; n];
            engine.run(|i, pr| {
                if hard_decision(pr) != u[i] {
                    errs[i] = 1;
                }
                u[i]
            });
            errs
        },
        |mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        },
    );
    Ok(errors.into_iter().map(|e| e as f64 / trials as f64).collect())
}

/// Builds the source code by Monte Carlo; deterministic in its inputs.
pub fn build_source_spec(
    dim: PolarDimension,
    p: f64,
    sizing: SizingRule,
    trials: u64,
    seed: u64,
    mode: Execution,
) -> Result<SourceCodeSpec> {
    match sizing {
        SizingRule::Residual(eps) if eps <= 0.0 || !eps.is_finite() => {
            return Err(Error::Domain(format!("residual target {} must be positive", eps)))
        }
        SizingRule::MinCost { bits_per_index } if bits_per_index <= 0.0 => {
            return Err(Error::Domain("bits per index must be positive".into()))
        }
        _ => {}
    }
    let error_probs = source_error_estimates(dim, p, trials, seed, mode)?;
    Ok(source_spec_from_estimates(dim, p, error_probs, sizing, trials, seed))
}

pub fn source_spec_from_estimates(
    dim: PolarDimension,
    p: f64,
    error_probs: Vec<f64>,
    sizing: SizingRule,
    trials: u64,
    seed: u64,
) -> SourceCodeSpec {
    let n = dim.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| error_probs[b].total_cmp(&error_probs[a]).then(a.cmp(&b)));
    let take = match sizing {
        SizingRule::Residual(eps) => {
            // suffix[k] = error mass left when the first k of `order` are sent
            let mut suffix = vec![0.0; n + 1];
            for k in (0..n).rev() {
                suffix[k] = suffix[k + 1] + error_probs[order[k]];
            }
            (0..=n).find(|&k| suffix[k] <= eps).unwrap_or(n)
        }
        SizingRule::MinCost { bits_per_index } => {
            order.iter().take_while(|&&i| error_probs[i] * bits_per_index > 1.0).count()
        }
    };
    let mut is_high = vec![false; n];
    for &i in &order[..take] {
        is_high[i] = true;
    }
    let high_entropy = (0..n).filter(|&i| is_high[i]).collect();
    SourceCodeSpec {
        dim,
        p,
        error_probs,
        high_entropy,
        sizing,
        trials,
        seed,
        is_high,
        leaves: LeafLikelihoods::bernoulli(n, p).expect("p validated by caller"),
    }
}

/// `{U^{S^c}, 𝒯}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedFeedback {
    /// `U` on `S^c`, ascending index order.
    pub payload: BitVec,
    /// Indices (into `[0, N)`, ascending) where the SC estimate must be flipped.
    pub mismatch: Vec<usize>,
}

impl CompressedFeedback {
    /// `|S^c| + n·|𝒯|`.
    pub fn bit_cost(&self, dim: PolarDimension) -> usize {
        self.payload.len() + dim.log_n() as usize * self.mismatch.len()
    }
}

/// Zero-error polar compression of `v`.
pub fn compress_mask(v: &BitVec, spec: &SourceCodeSpec) -> Result<CompressedFeedback> {
    if v.len() != spec.n() {
        return Err(Error::Dimension(format!("input of length {} for N = {}", v.len(), spec.n())));
    }
    let u = polar_transform(v)?;
    let payload = BitVec::from_bits(spec.high_entropy.iter().map(|&i| u[i]).collect())?;
    let ch = Memoryless(&spec.leaves);
    let mut engine = ScEngine::new(&ch)?;
    let mut mismatch = Vec::new();
    engine.run(|i, p| {
        if !spec.is_high[i] && hard_decision(p) != u[i] {
            mismatch.push(i);
        }
        u[i]
    });
    Ok(CompressedFeedback { payload, mismatch })
}

/// Exact inverse of [`compress_mask`].
pub fn decompress_mask(fb: &CompressedFeedback, spec: &SourceCodeSpec) -> Result<BitVec> {
    if fb.payload.len() != spec.high_entropy.len() {
        return Err(Error::Format(format!(
            "payload of {} bits for |S^c| = {}",
            fb.payload.len(),
            spec.high_entropy.len()
        )));
    }
    let n = spec.n();
    let mut flip = vec![false; n];
    for w in fb.mismatch.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Format("mismatch set is not strictly ascending".into()));
        }
    }
    for &i in &fb.mismatch {
        if i >= n || spec.is_high[i] {
            return Err(Error::Format(format!("mismatch index {} is not in S", i)));
        }
        flip[i] = true;
    }
    let mut payload = fb.payload.iter();
    let ch = Memoryless(&spec.leaves);
    let mut engine = ScEngine::new(&ch)?;
    let u = engine.run(|i, p| {
        if spec.is_high[i] {
            payload.next().expect("payload length checked")
        } else {
            hard_decision(p) ^ u8::from(flip[i])
        }
    });
    polar_transform(&u)
}

/// Differential → permutation → compression.
pub fn encode_mask(mask: &BitVec, perm: &MaskPermutation, spec: &SourceCodeSpec) -> Result<CompressedFeedback> {
    let permuted = apply_permutation(&differential(mask), perm, Direction::Forward)?;
    compress_mask(&permuted, spec)
}

/// Decompression → inverse permutation → prefix-XOR.
pub fn decode_mask(fb: &CompressedFeedback, perm: &MaskPermutation, spec: &SourceCodeSpec) -> Result<BitVec> {
    let permuted = decompress_mask(fb, spec)?;
    Ok(inverse_differential(&apply_permutation(&permuted, perm, Direction::Inverse)?))
}

/// Width of the count field in [`direct_encode`].
pub const DIRECT_COUNT_BITS: u32 = 16;

/// A 16-bit count followed by each index in `index_bits` bits, ascending.
pub fn direct_encode(indices: &[usize], index_bits: u32) -> Result<BitVec> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() >= 1 << DIRECT_COUNT_BITS {
        return Err(Error::Domain(format!("{} indices overflow the count field", sorted.len())));
    }
    let mut w = BitWriter::new();
    w.push_uint(sorted.len() as u64, DIRECT_COUNT_BITS);
    for &i in &sorted {
        if (i as u64) >> index_bits != 0 {
            return Err(Error::Domain(format!("index {} does not fit in {} bits", i, index_bits)));
        }
        w.push_uint(i as u64, index_bits);
    }
    let len = w.bit_len();
    BitVec::from_packed(&w.finish(), len)
}

pub fn direct_decode(bits: &BitVec, index_bits: u32) -> Result<Vec<usize>> {
    let packed = bits.to_packed();
    let mut r = BitReader::new(&packed);
    let count = r.read_uint(DIRECT_COUNT_BITS)? as usize;
    let expected = DIRECT_COUNT_BITS as usize + count * index_bits as usize;
    if bits.len() != expected {
        return Err(Error::Format(format!("direct payload of {} bits, expected {}", bits.len(), expected)));
    }
    (0..count).map(|_| r.read_uint(index_bits).map(|v| v as usize)).collect()
}

/// Closed-form feedback overheads for `d` deletions over `N = 2^n` packages.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct OverheadReport {
    pub n_packages: usize,
    pub d: usize,
    /// `3·d·n`, sending about `3d` indices directly.
    pub direct_bits: f64,
    /// `N·h2(3d/N)`, compressing the mask itself.
    pub mask_entropy_bits: f64,
    /// `N·h2(2d/N)`, compressing the differential mask.
    pub diff_entropy_bits: f64,
}

pub fn overhead_models(n_packages: usize, d: usize, index_bits: u32) -> Result<OverheadReport> {
    if 3 * d >= n_packages && d > 0 {
        return Err(Error::Domain(format!("3d = {} must be below N = {}", 3 * d, n_packages)));
    }
    let nf = n_packages as f64;
    let df = d as f64;
    Ok(OverheadReport {
        n_packages,
        d,
        direct_bits: 3.0 * df * index_bits as f64,
        mask_entropy_bits: nf * h2(3.0 * df / nf),
        diff_entropy_bits: nf * h2(2.0 * df / nf),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(s: &str) -> BitVec {
        s.parse().unwrap()
    }

    #[test]
    fn differential_examples() {
        assert_eq!(differential(&bits("00111000")), bits("00100100"));
        assert_eq!(differential(&BitVec::zeros(8)), BitVec::zeros(8));
        assert_eq!(inverse_differential(&bits("00100100")), bits("00111000"));
        assert_eq!(inverse_differential(&BitVec::zeros(8)), BitVec::zeros(8));
        // a run touching the end leaves a single one
        assert_eq!(differential(&bits("00011")), bits("00010"));
    }

    proptest! {
        #[test]
        fn differential_round_trip(v in proptest::collection::vec(0u8..2, 0..300)) {
            let v = BitVec::from_bits(v).unwrap();
            prop_assert_eq!(inverse_differential(&differential(&v)), v);
        }

        #[test]
        fn permutation_round_trip(v in proptest::collection::vec(0u8..2, 1..300), seed in any::<u64>()) {
            let v = BitVec::from_bits(v).unwrap();
            let perm = MaskPermutation::new(seed, v.len());
            let fwd = apply_permutation(&v, &perm, Direction::Forward).unwrap();
            prop_assert_eq!(fwd.count_ones(), v.count_ones());
            prop_assert_eq!(apply_permutation(&fwd, &perm, Direction::Inverse).unwrap(), v);
        }

        #[test]
        fn direct_round_trip(set in proptest::collection::btree_set(0usize..256, 0..40)) {
            let idx: Vec<usize> = set.into_iter().collect();
            let enc = direct_encode(&idx, 8).unwrap();
            prop_assert_eq!(enc.len(), 16 + 8 * idx.len());
            prop_assert_eq!(direct_decode(&enc, 8).unwrap(), idx);
        }
    }

    #[test]
    fn permutation_is_bijection_and_fixes_zero() {
        let perm = MaskPermutation::new(11, 64);
        let mut idx = perm.indices();
        idx.sort();
        assert_eq!(idx, (0..64).collect::<Vec<_>>());
        assert_eq!(apply_permutation(&BitVec::zeros(64), &perm, Direction::Forward).unwrap(), BitVec::zeros(64));
        assert!(apply_permutation(&BitVec::zeros(63), &perm, Direction::Forward).is_err());
    }

    #[test]
    fn direct_examples() {
        let enc = direct_encode(&[], 8).unwrap();
        assert_eq!(enc, BitVec::zeros(16));
        let enc = direct_encode(&[2, 5], 3).unwrap();
        assert_eq!(enc.to_string(), "0000000000000010010101");
        assert!(direct_encode(&[8], 3).is_err());
    }

    #[test]
    fn overhead_examples() {
        let r = overhead_models(256, 0, 8).unwrap();
        assert_eq!((r.direct_bits, r.mask_entropy_bits, r.diff_entropy_bits), (0.0, 0.0, 0.0));
        // hand evaluation of h2 at 12/256 and 8/256
        let r = overhead_models(256, 4, 8).unwrap();
        assert_eq!(r.direct_bits, 96.0);
        assert!((r.mask_entropy_bits - 69.876).abs() < 0.01, "{}", r.mask_entropy_bits);
        assert!((r.diff_entropy_bits - 51.357).abs() < 0.01, "{}", r.diff_entropy_bits);
        assert!(overhead_models(12, 4, 4).is_err());
    }

    #[test]
    fn overhead_ordering() {
        for log_n in 7..=14u32 {
            let n = 1usize << log_n;
            for d in 1..=n / 8 {
                let r = overhead_models(n, d, log_n).unwrap();
                assert!(r.diff_entropy_bits <= r.mask_entropy_bits);
                assert!(r.mask_entropy_bits <= r.direct_bits, "N={} d={}", n, d);
            }
        }
    }

    fn small_spec() -> SourceCodeSpec {
        let dim = PolarDimension::from_len(64).unwrap();
        build_source_spec(dim, 4.0 / 64.0, SizingRule::Residual(0.05), 2000, 3, Execution::Sequential).unwrap()
    }

    #[test]
    fn zero_input_compresses_to_zero() {
        let spec = small_spec();
        let fb = compress_mask(&BitVec::zeros(64), &spec).unwrap();
        assert!(fb.mismatch.is_empty());
        assert_eq!(fb.payload, BitVec::zeros(spec.high_entropy.len()));
        assert_eq!(decompress_mask(&fb, &spec).unwrap(), BitVec::zeros(64));
    }

    #[test]
    fn dense_inputs_round_trip() {
        let spec = small_spec();
        for v in [BitVec::from_bits(vec![1; 64]).unwrap(), BitVec::from_bools((0..64).map(|i| i % 3 != 0))] {
            let fb = compress_mask(&v, &spec).unwrap();
            assert_eq!(decompress_mask(&fb, &spec).unwrap(), v);
        }
    }

    #[test]
    fn malformed_feedback_is_rejected() {
        let spec = small_spec();
        let fb = compress_mask(&BitVec::zeros(64), &spec).unwrap();
        let high = spec.high_entropy[0];
        let bad = CompressedFeedback { mismatch: vec![high], ..fb.clone() };
        assert!(matches!(decompress_mask(&bad, &spec), Err(Error::Format(_))));
        let short = CompressedFeedback { payload: BitVec::zeros(0), ..fb };
        assert!(decompress_mask(&short, &spec).is_err());
    }

    #[test]
    fn payload_bit_changes_output() {
        let spec = small_spec();
        let v = BitVec::from_bools((0..64).map(|i| i == 5 || i == 40));
        let mut fb = compress_mask(&v, &spec).unwrap();
        fb.payload.flip(0);
        assert_ne!(decompress_mask(&fb, &spec).unwrap(), v);
    }

    #[test]
    fn sizing_rules() {
        let dim = PolarDimension::from_len(64).unwrap();
        assert!(build_source_spec(dim, 0.1, SizingRule::Residual(0.0), 10, 1, Execution::Sequential).is_err());
        assert!(build_source_spec(dim, 0.6, SizingRule::Residual(0.1), 10, 1, Execution::Sequential).is_err());
        let probs: Vec<f64> = (0..64)
            .map(|i| {
                if i < 8 {
                    0.4
                } else if i < 16 {
                    0.1
                } else {
                    0.0
                }
            })
            .collect();
        let s = source_spec_from_estimates(dim, 0.1, probs.clone(), SizingRule::Residual(0.55), 1, 0);
        assert_eq!(s.high_entropy.len(), 11);
        let s = source_spec_from_estimates(dim, 0.1, probs, SizingRule::min_cost(dim), 1, 0);
        assert_eq!(s.high_entropy, (0..8).collect::<Vec<_>>());
        assert!((s.expected_repairs() - 0.8).abs() < 1e-12);
    }
}
