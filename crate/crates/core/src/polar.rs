//! Polar transform and a successive-cancellation scheduler over contiguous
//! codeword blocks.
//!
//! The transform used throughout the crate is Arıkan's `G_N = B · F^{⊗n}`
//! (bit-reversal followed by the Kronecker power of `F = [[1,0],[1,1]]`).
//! With that ordering a codeword splits as `x = [T(u_even ⊕ u_odd), T(u_odd)]`,
//! so each node of the decoding recursion owns a *contiguous* block of the
//! codeword whose two halves are independent sub-codewords. Channels whose
//! likelihood only factorises over contiguous blocks given a small amount of
//! per-block state (the deletion channel) can then be decoded exactly.

use std::collections::BTreeMap;

use crate::bits::BitVec;
use crate::error::{Error, Result};

/// Relative margin under which two likelihoods are considered tied.
/// Ties resolve to 0 so that independent runs of the decoder agree bit-for-bit.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Blocklength `N = 2^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PolarDimension {
    log_n: u32,
}

impl PolarDimension {
    pub fn new(log_n: u32) -> Result<Self> {
        if log_n > 30 {
            return Err(Error::Dimension(format!("log-blocklength {} too large", log_n)));
        }
        Ok(PolarDimension { log_n })
    }

    /// Dimension for a blocklength, which must be a power of two.
    pub fn from_len(len: usize) -> Result<Self> {
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::Dimension(format!("length {} is not a power of two", len)));
        }
        Self::new(len.trailing_zeros())
    }

    pub fn log_n(&self) -> u32 {
        self.log_n
    }

    pub fn len(&self) -> usize {
        1usize << self.log_n
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Index map `i -> reverse of i's n-bit expansion` (0-based). Self-inverse.
pub fn bit_reversal_permutation(log_n: u32) -> Vec<usize> {
    let n = 1usize << log_n;
    (0..n).map(|i| reverse_bits(i, log_n)).collect()
}

fn reverse_bits(i: usize, width: u32) -> usize {
    if width == 0 {
        0
    } else {
        i.reverse_bits() >> (usize::BITS - width)
    }
}

/// `u · F^{⊗n}` over GF(2), in place.
pub fn natural_transform_in_place(v: &mut [u8]) {
    let n = v.len();
    let mut half = 1;
    while half < n {
        for j in 0..n {
            if j & half == 0 {
                v[j] ^= v[j | half];
            }
        }
        half <<= 1;
    }
}

/// `u · B · F^{⊗n}` over GF(2). The transform is an involution.
pub fn polar_transform(u: &BitVec) -> Result<BitVec> {
    let dim = PolarDimension::from_len(u.len())?;
    let rev = bit_reversal_permutation(dim.log_n());
    let mut x: Vec<u8> = rev.iter().map(|&r| u.get(r)).collect();
    natural_transform_in_place(&mut x);
    Ok(BitVec::from_bits(x).expect("transform preserves binary symbols"))
}

/// Per-position likelihood pairs `(p0, p1)` for a memoryless observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafLikelihoods(Vec<[f64; 2]>);

impl LeafLikelihoods {
    pub fn new(pairs: Vec<[f64; 2]>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            let ok = p.iter().all(|v| v.is_finite() && *v >= 0.0) && p[0] + p[1] > 0.0;
            if !ok {
                return Err(Error::Domain(format!("invalid likelihood pair {:?} at {}", p, i)));
            }
        }
        Ok(LeafLikelihoods(pairs))
    }

    /// Point masses on an observed word.
    pub fn point_mass(x: &BitVec) -> Self {
        LeafLikelihoods(x.iter().map(|b| if b == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect())
    }

    /// Observation through a binary symmetric channel with crossover `p`.
    pub fn bsc(y: &BitVec, p: f64) -> Result<Self> {
        Self::new(y.iter().map(|b| if b == 0 { [1.0 - p, p] } else { [p, 1.0 - p] }).collect())
    }

    /// Identical prior `(1 - p, p)` at every position (source coding).
    pub fn bernoulli(len: usize, p: f64) -> Result<Self> {
        Self::new(vec![[1.0 - p, p]; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pairs(&self) -> &[[f64; 2]] {
        &self.0
    }
}

/// Frozen indices (0-based) and their known values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrozenMap(BTreeMap<usize, u8>);

impl FrozenMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I: IntoIterator<Item = (usize, u8)>>(it: I) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, v) in it {
            if v > 1 {
                return Err(Error::Domain(format!("frozen value {} at {} is not binary", v, i)));
            }
            if map.insert(i, v).is_some() {
                return Err(Error::Domain(format!("frozen index {} given twice", i)));
            }
        }
        Ok(FrozenMap(map))
    }

    pub fn get(&self, i: usize) -> Option<u8> {
        self.0.get(&i).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.0.keys().next_back().copied()
    }

    pub fn to_dense(&self, n: usize) -> Vec<Option<u8>> {
        let mut v = vec![None; n];
        for (&i, &b) in &self.0 {
            v[i] = Some(b);
        }
        v
    }
}

/// Argmax with ties (within [`TIE_TOLERANCE`]) resolved to 0.
#[inline]
pub fn hard_decision(p: [f64; 2]) -> u8 {
    u8::from(p[1] > p[0] * (1.0 + TIE_TOLERANCE))
}

/// A channel whose likelihood factorises over contiguous codeword blocks
/// once each block is tagged with a deletion state `(d1, d2)`: `d1`
/// deletions strictly before the block, `d2` inside it.
///
/// Memoryless channels are the special case `deletions() == 0`.
pub trait BlockChannel {
    /// Codeword length `N`.
    fn codeword_len(&self) -> usize;

    /// Total number of deletions `d`; the observation has `N - d` symbols.
    fn deletions(&self) -> usize;

    /// Likelihood pair of a single codeword position in state `(d1, d2)`,
    /// `d2 ∈ {0, 1}`. Only called for admissible states.
    fn leaf(&self, pos: usize, d1: usize, d2: usize) -> [f64; 2];

    /// Prior weight of `dl` deletions in the left half and `dr` in the right
    /// half of a block made of two halves of length `half`.
    fn split_weight(&self, _half: usize, _dl: usize, _dr: usize) -> f64 {
        1.0
    }
}

/// Memoryless channel given by explicit leaf likelihoods.
#[derive(Debug, Clone, Copy)]
pub struct Memoryless<'a>(pub &'a LeafLikelihoods);

impl BlockChannel for Memoryless<'_> {
    fn codeword_len(&self) -> usize {
        self.0.len()
    }

    fn deletions(&self) -> usize {
        0
    }

    fn leaf(&self, pos: usize, _d1: usize, _d2: usize) -> [f64; 2] {
        self.0.pairs()[pos]
    }
}

#[derive(Debug, Clone, Copy)]
enum Step {
    // combine for the first half of a u-block: the XOR of the two children
    Check,
    // second half, given the first half's partial sums
    Variable,
}

/// Successive-cancellation scheduler.
///
/// Messages are kept per level `t` (block length `2^t`), per block, per
/// admissible deletion state. A decision callback receives `(index, pair)`
/// for each `u_i` in order and returns the bit to commit, which lets the same
/// scheduler serve plain decoding, genie-aided Monte Carlo and the
/// decoder-replay of the lossless compressor.
pub struct ScEngine<'c, C: BlockChannel + ?Sized> {
    ch: &'c C,
    log_n: u32,
    n: usize,
    d: usize,
    stride: usize,
    msgs: Vec<Vec<[f64; 2]>>,
    bits: Vec<Vec<u8>>,
    left: Vec<Vec<u8>>,
    // weights[t][dl * stride + dr] for halves of length 2^t
    weights: Vec<Vec<f64>>,
    messages: u64,
}

impl<'c, C: BlockChannel + ?Sized> ScEngine<'c, C> {
    pub fn new(ch: &'c C) -> Result<Self> {
        let n = ch.codeword_len();
        let dim = PolarDimension::from_len(n)?;
        let d = ch.deletions();
        if d > n {
            return Err(Error::Domain(format!("{} deletions exceed blocklength {}", d, n)));
        }
        let log_n = dim.log_n();
        let stride = d + 1;
        let slots = stride * stride;
        let msgs = (0..=log_n).map(|t| vec![[0.0; 2]; (n >> t) * slots]).collect();
        let bits = (0..=log_n).map(|t| vec![0u8; n >> t]).collect();
        let left = (0..=log_n).map(|t| vec![0u8; n >> t]).collect();
        let weights = (0..log_n)
            .map(|t| {
                let half = 1usize << t;
                let mut w = vec![0.0; slots];
                for dl in 0..=d.min(half) {
                    for dr in 0..=(d - dl).min(half) {
                        w[dl * stride + dr] = ch.split_weight(half, dl, dr);
                    }
                }
                w
            })
            .collect();
        Ok(ScEngine { ch, log_n, n, d, stride, msgs, bits, left, weights, messages: 0 })
    }

    /// Number of (block, state) messages combined so far.
    pub fn message_count(&self) -> u64 {
        self.messages
    }

    /// Runs one full decode; returns the committed `u` sequence.
    pub fn run<F>(&mut self, mut decide: F) -> BitVec
    where
        F: FnMut(usize, [f64; 2]) -> u8,
    {
        let stride = self.stride;
        let slots = stride * stride;
        let leaves = &mut self.msgs[0];
        for pos in 0..self.n {
            for d1 in 0..=self.d {
                for d2 in 0..=1 {
                    let adm = d1 + d2 <= self.d && d1 <= pos && self.d - d1 - d2 < self.n - pos;
                    if adm {
                        leaves[pos * slots + d1 * stride + d2] = self.ch.leaf(pos, d1, d2);
                    }
                }
            }
        }
        let mut u = vec![0u8; self.n];
        self.descend(0, 0, &mut u, &mut decide);
        BitVec::from_bits(u).expect("decisions are binary")
    }

    fn descend<F>(&mut self, t: usize, u_off: usize, u: &mut [u8], decide: &mut F)
    where
        F: FnMut(usize, [f64; 2]) -> u8,
    {
        if t == self.log_n as usize {
            let pair = self.msgs[t][self.d];
            let b = decide(u_off, pair) & 1;
            u[u_off] = b;
            self.bits[t][0] = b;
            return;
        }
        let half_count = self.n >> (t + 1);
        self.combine(t, Step::Check);
        self.descend(t + 1, u_off, u, decide);
        self.left[t + 1][..half_count].copy_from_slice(&self.bits[t + 1][..half_count]);
        self.combine(t, Step::Variable);
        self.descend(t + 1, u_off + half_count, u, decide);
        for p in 0..half_count {
            let l = self.left[t + 1][p];
            let r = self.bits[t + 1][p];
            self.bits[t][2 * p] = l ^ r;
            self.bits[t][2 * p + 1] = r;
        }
    }

    /// Builds level `t + 1` messages from level `t`.
    #[allow(clippy::needless_range_loop)]
    fn combine(&mut self, t: usize, step: Step) {
        let stride = self.stride;
        let slots = stride * stride;
        let half = 1usize << t;
        let m = half << 1;
        let parents = self.n >> (t + 1);
        let d = self.d;
        let (lo, hi) = self.msgs.split_at_mut(t + 1);
        let child = &lo[t];
        let out = &mut hi[0];
        let w = &self.weights[t];
        let partial = &self.left[t + 1];
        let mut count = 0u64;
        for p in 0..parents {
            let start = p * m;
            let lbase = 2 * p * slots;
            let rbase = (2 * p + 1) * slots;
            let obase = p * slots;
            let mut max = 0.0f64;
            for d1 in 0..=d.min(start) {
                for d2 in 0..=(d - d1).min(m) {
                    if d - d1 - d2 > self.n - start - m {
                        continue;
                    }
                    let mut acc = [0.0f64; 2];
                    let dl_lo = d2.saturating_sub(half);
                    for dl in dl_lo..=d2.min(half) {
                        let dr = d2 - dl;
                        let wt = w[dl * stride + dr];
                        let a = child[lbase + d1 * stride + dl];
                        let b = child[rbase + (d1 + dl) * stride + dr];
                        match step {
                            Step::Check => {
                                acc[0] += wt * (a[0] * b[0] + a[1] * b[1]);
                                acc[1] += wt * (a[0] * b[1] + a[1] * b[0]);
                            }
                            Step::Variable => {
                                let beta = partial[p] as usize;
                                acc[0] += wt * a[beta] * b[0];
                                acc[1] += wt * a[beta ^ 1] * b[1];
                            }
                        }
                    }
                    out[obase + d1 * stride + d2] = acc;
                    max = max.max(acc[0]).max(acc[1]);
                    count += 1;
                }
            }
            if max > 0.0 && max.is_finite() {
                let inv = 1.0 / max;
                for d1 in 0..=d.min(start) {
                    for d2 in 0..=(d - d1).min(m) {
                        if d - d1 - d2 > self.n - start - m {
                            continue;
                        }
                        let s = &mut out[obase + d1 * stride + d2];
                        s[0] *= inv;
                        s[1] *= inv;
                    }
                }
            }
        }
        self.messages += count;
    }
}

/// SC decoding over memoryless leaves with a frozen map.
///
/// Returns `û`: frozen positions carry their frozen value, every other
/// position is the argmax of the SC marginal given the earlier decisions.
pub fn sc_decode(dim: PolarDimension, leaves: &LeafLikelihoods, frozen: &FrozenMap) -> Result<BitVec> {
    if leaves.len() != dim.len() {
        return Err(Error::Dimension(format!("{} leaf likelihoods for blocklength {}", leaves.len(), dim.len())));
    }
    if frozen.max_index().is_some_and(|i| i >= dim.len()) {
        return Err(Error::Dimension("frozen index outside the blocklength".into()));
    }
    let ch = Memoryless(leaves);
    let dense = frozen.to_dense(dim.len());
    let mut engine = ScEngine::new(&ch)?;
    Ok(engine.run(|i, p| dense[i].unwrap_or_else(|| hard_decision(p))))
}
