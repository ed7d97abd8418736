//! Slepian-Wolf coding over a channel with exactly `d` deletions.
//!
//! Alice sends the values of `U = T(X)` on the frozen set `F_d` (the check
//! bits); Bob runs successive cancellation with one message per admissible
//! deletion state on every contiguous codeword block, which is exactly
//! sequential MAP decoding under a uniform prior on the `C(N, d)` deletion
//! patterns.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;

use crate::bits::BitVec;
use crate::error::{Error, Result};
use crate::exec::{map_reduce, trial_rng, Execution};
use crate::polar::{hard_decision, polar_transform, BlockChannel, PolarDimension, ScEngine};

/// Deletions before (`d1`) and inside (`d2`) a contiguous block.
/// The count after the block is `d - d1 - d2` and is never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeletionState {
    pub d1: usize,
    pub d2: usize,
}

impl DeletionState {
    pub fn after(&self, d: usize) -> Option<usize> {
        d.checked_sub(self.d1 + self.d2)
    }

    /// Whether the state is consistent for block `[start, start + len)` of a
    /// length-`n` codeword with `d` deletions: the received segment
    /// `y[start - d1 .. start - d1 + len - d2)` must lie inside `y`.
    pub fn admissible(&self, n: usize, d: usize, start: usize, len: usize) -> bool {
        self.d1 + self.d2 <= d
            && self.d2 <= len
            && self.d1 <= start
            && start + len <= n
            && d - self.d1 - self.d2 <= n - start - len
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Probability that `dl + dr` uniformly placed deletions inside a block of
/// two halves of length `half` fall `dl` left and `dr` right:
/// `C(half, dl) · C(half, dr) / C(2·half, dl + dr)`.
pub fn node_split_weight(half: usize, dl: usize, dr: usize) -> Result<f64> {
    if dl > half || dr > half {
        return Err(Error::Domain(format!("split ({}, {}) does not fit halves of length {}", dl, dr, half)));
    }
    Ok(binomial(half, dl) * binomial(half, dr) / binomial(2 * half, dl + dr))
}

/// Sorted set of deleted positions (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeletionPattern {
    positions: Vec<usize>,
}

impl DeletionPattern {
    pub fn new(mut positions: Vec<usize>, n: usize) -> Result<Self> {
        positions.sort_unstable();
        if positions.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain("repeated deletion position".into()));
        }
        if positions.last().is_some_and(|&p| p >= n) {
            return Err(Error::Domain(format!("deletion position outside [0, {})", n)));
        }
        Ok(DeletionPattern { positions })
    }

    /// Uniformly random `d`-subset of `[0, n)`.
    pub fn random<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Self {
        let mut positions = sample(rng, n, d).into_vec();
        positions.sort_unstable();
        DeletionPattern { positions }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `x` with the pattern's positions removed.
    pub fn apply<T: Clone>(&self, x: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len().saturating_sub(self.positions.len()));
        let mut next = self.positions.iter().peekable();
        for (i, v) in x.iter().enumerate() {
            if next.peek() == Some(&&i) {
                next.next();
            } else {
                out.push(v.clone());
            }
        }
        out
    }

    pub fn apply_bits(&self, x: &BitVec) -> BitVec {
        BitVec::from_bits(self.apply(x.as_slice())).expect("subsequence of a binary word")
    }
}

/// The deletion channel seen through a received word `y` of length `n - d`.
#[derive(Debug, Clone, Copy)]
pub struct DeletionChannel<'a> {
    y: &'a [u8],
    n: usize,
    d: usize,
}

impl<'a> DeletionChannel<'a> {
    pub fn new(y: &'a BitVec, n: usize, d: usize) -> Result<Self> {
        if d > n || y.len() != n - d {
            return Err(Error::Contract(format!("received length {} does not match N - d = {} - {}", y.len(), n, d)));
        }
        Ok(DeletionChannel { y: y.as_slice(), n, d })
    }
}

impl BlockChannel for DeletionChannel<'_> {
    fn codeword_len(&self) -> usize {
        self.n
    }

    fn deletions(&self) -> usize {
        self.d
    }

    fn leaf(&self, pos: usize, d1: usize, d2: usize) -> [f64; 2] {
        if d2 == 1 {
            // deleted symbol: no evidence either way
            [1.0, 1.0]
        } else if self.y[pos - d1] == 0 {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        }
    }

    fn split_weight(&self, half: usize, dl: usize, dr: usize) -> f64 {
        node_split_weight(half, dl, dr).unwrap_or(0.0)
    }
}

/// Monte Carlo estimates of the per-index SC error probability, plus the
/// parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityTable {
    pub dim: PolarDimension,
    pub d: usize,
    pub trials: u64,
    pub seed: u64,
    /// Error-probability estimate per `u` index, natural index order.
    pub error_probs: Vec<f64>,
}

const PDRT_MAGIC: &[u8; 4] = b"PDRT";
const PDRT_VERSION: u16 = 1;

impl ReliabilityTable {
    /// Serialises as `"PDRT" | u16 version | u32 N | u16 d | u64 trials |
    /// u64 seed | N × f64`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * self.error_probs.len());
        out.extend_from_slice(PDRT_MAGIC);
        out.extend_from_slice(&PDRT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u16).to_le_bytes());
        out.extend_from_slice(&self.trials.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for p in &self.error_probs {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 4 + 2 + 4 + 2 + 8 + 8;
        if bytes.len() < header || &bytes[..4] != PDRT_MAGIC {
            return Err(Error::Format("missing PDRT header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PDRT_VERSION {
            return Err(Error::Format(format!("unsupported PDRT version {}", version)));
        }
        let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let d = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        let trials = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let dim = PolarDimension::from_len(n).map_err(|e| Error::Format(e.to_string()))?;
        if bytes.len() != header + 8 * n {
            return Err(Error::Format(format!("PDRT body holds {} bytes, expected {}", bytes.len() - header, 8 * n)));
        }
        let error_probs = bytes[header..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(ReliabilityTable { dim, d, trials, seed, error_probs })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Cache file name keyed by every construction parameter.
    pub fn cache_file_name(n: usize, d: usize, trials: u64, seed: u64) -> String {
        format!("pdrt_N{}_d{}_t{}_s{}.bin", n, d, trials, seed)
    }
}

/// Loads the table from `cache_dir` when present, otherwise estimates it and
/// stores it there.
pub fn cached_reliabilities(
    cache_dir: Option<&Path>,
    dim: PolarDimension,
    d: usize,
    trials: u64,
    seed: u64,
    mode: Execution,
) -> Result<ReliabilityTable> {
    let path: Option<PathBuf> =
        cache_dir.map(|dir| dir.join(ReliabilityTable::cache_file_name(dim.len(), d, trials, seed)));
    if let Some(p) = &path {
        if let Ok(t) = ReliabilityTable::load(p) {
            return Ok(t);
        }
    }
    let table = mc_estimate_reliabilities(dim, d, trials, seed, mode)?;
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        table.save(p)?;
    }
    Ok(table)
}

/// Genie-aided Monte Carlo estimate of `P(û_i ≠ u_i | u_1^{i-1}, y)` over
/// uniform `X` and uniform deletion patterns. Deterministic given `seed`.
pub fn mc_estimate_reliabilities(
    dim: PolarDimension,
    d: usize,
    trials: u64,
    seed: u64,
    mode: Execution,
) -> Result<ReliabilityTable> {
    let n = dim.len();
    if trials == 0 {
        return Err(Error::Domain("at least one trial is required".into()));
    }
    if d > n {
        return Err(Error::Domain(format!("{} deletions exceed blocklength {}", d, n)));
    }
    let errors = map_reduce(
        trials,
        mode,
        vec![0u64; n],
        |t| {
            let mut rng = trial_rng(seed, t);
            let u = BitVec::from_bools((0..n).map(|_| rng.gen::<bool>()));
            let x = polar_transform(&u).expect("power-of-two length");
            let y = DeletionPattern::random(n, d, &mut rng).apply_bits(&x);
            let ch = DeletionChannel::new(&y, n, d).expect("consistent lengths");
            let mut engine = ScEngine::new(&ch).expect("valid channel");
            let mut errs = vec![0u64; n];
            engine.run(|i, p| {
                if hard_decision(p) != u[i] {
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
    let error_probs = errors.into_iter().map(|e| e as f64 / trials as f64).collect();
    Ok(ReliabilityTable { dim, d, trials, seed, error_probs })
}

/// The `k` indices with the largest error estimate, ties to the smaller
/// index, in that (descending) order.
pub fn select_frozen_set(error_probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > error_probs.len() {
        return Err(Error::Domain(format!("K = {} exceeds N = {}", k, error_probs.len())));
    }
    let mut idx: Vec<usize> = (0..error_probs.len()).collect();
    idx.sort_by(|&a, &b| error_probs[b].total_cmp(&error_probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Everything Alice and Bob share for one `(N, d)`: the reliability
/// estimates, the check-bit count `K` and the frozen set `F_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeletionCodeSpec {
    pub dim: PolarDimension,
    pub d: usize,
    pub reliabilities: Vec<f64>,
    pub k: usize,
    /// `F_d` in descending error-probability order; check bits follow it.
    pub frozen_set: Vec<usize>,
    pub mc_trials: u64,
    pub seed: u64,
    frozen_mask: Vec<bool>,
}

impl DeletionCodeSpec {
    pub fn new(table: &ReliabilityTable, k: usize) -> Result<Self> {
        let frozen_set = select_frozen_set(&table.error_probs, k)?;
        let mut frozen_mask = vec![false; table.dim.len()];
        for &i in &frozen_set {
            frozen_mask[i] = true;
        }
        Ok(DeletionCodeSpec {
            dim: table.dim,
            d: table.d,
            reliabilities: table.error_probs.clone(),
            k,
            frozen_set,
            mc_trials: table.trials,
            seed: table.seed,
            frozen_mask,
        })
    }

    pub fn n(&self) -> usize {
        self.dim.len()
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen_mask[i]
    }

    /// Rate `K / N`.
    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n() as f64
    }
}

/// `U = T(x)` restricted to `F_d`, in `frozen_set` order.
pub fn encode_check_bits(x: &BitVec, spec: &DeletionCodeSpec) -> Result<BitVec> {
    if x.len() != spec.n() {
        return Err(Error::Dimension(format!("column of length {} for N = {}", x.len(), spec.n())));
    }
    let u = polar_transform(x)?;
    Ok(BitVec::from_bits(spec.frozen_set.iter().map(|&i| u[i]).collect()).expect("binary"))
}

/// Output of a deletion decode together with its work counter.
#[derive(Debug, Clone, PartialEq)]
pub struct DeletionDecode {
    pub u: BitVec,
    pub x: BitVec,
    /// Number of (block, state) messages combined.
    pub messages: u64,
}

/// Recovers `x̂` from `y` (length `N - d`) and the check bits on `F_d`.
pub fn deletion_sc_decode(spec: &DeletionCodeSpec, y: &BitVec, check_bits: &BitVec) -> Result<BitVec> {
    deletion_sc_decode_detailed(spec, y, check_bits).map(|r| r.x)
}

pub fn deletion_sc_decode_detailed(spec: &DeletionCodeSpec, y: &BitVec, check_bits: &BitVec) -> Result<DeletionDecode> {
    let n = spec.n();
    if check_bits.len() != spec.frozen_set.len() {
        return Err(Error::Contract(format!(
            "{} check bits for a frozen set of size {}",
            check_bits.len(),
            spec.frozen_set.len()
        )));
    }
    let ch = DeletionChannel::new(y, n, spec.d)?;
    let mut known = vec![None; n];
    for (&i, b) in spec.frozen_set.iter().zip(check_bits.iter()) {
        known[i] = Some(b);
    }
    let mut engine = ScEngine::new(&ch)?;
    let u = engine.run(|i, p| known[i].unwrap_or_else(|| hard_decision(p)));
    let x = polar_transform(&u)?;
    Ok(DeletionDecode { u, x, messages: engine.message_count() })
}

/// Frame-error estimate from simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FerEstimate {
    pub frames: u64,
    pub errors: u64,
}

impl FerEstimate {
    pub fn rate(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.errors as f64 / self.frames as f64
        }
    }
}

/// Simulates full decodes over random `(X, pattern)` and counts frames
/// where `x̂ ≠ x`.
pub fn simulate_fer(spec: &DeletionCodeSpec, trials: u64, seed: u64, mode: Execution) -> FerEstimate {
    let n = spec.n();
    let errors = map_reduce(
        trials,
        mode,
        0u64,
        |t| {
            let mut rng = trial_rng(seed, t);
            let x = BitVec::from_bools((0..n).map(|_| rng.gen::<bool>()));
            let y = DeletionPattern::random(n, spec.d, &mut rng).apply_bits(&x);
            let cb = encode_check_bits(&x, spec).expect("matching length");
            let xh = deletion_sc_decode(spec, &y, &cb).expect("consistent inputs");
            u64::from(xh != x)
        },
        |a, b| a + b,
    );
    FerEstimate { frames: trials, errors }
}

/// Smallest `K` whose simulated FER is at most `target`, found by bisection
/// (FER is treated as non-increasing in `K`). Returns `(K, estimate)`.
pub fn calibrate_k(
    table: &ReliabilityTable,
    target: f64,
    trials: u64,
    seed: u64,
    mode: Execution,
) -> Result<(usize, FerEstimate)> {
    let n = table.dim.len();
    let fer_at = |k: usize| -> Result<FerEstimate> {
        let spec = DeletionCodeSpec::new(table, k)?;
        Ok(simulate_fer(&spec, trials, seed, mode))
    };
    if table.d == 0 {
        return Ok((0, FerEstimate { frames: trials, errors: 0 }));
    }
    let (mut lo, mut hi) = (0usize, n);
    let mut best = FerEstimate { frames: trials, errors: 0 };
    while lo < hi {
        let mid = (lo + hi) / 2;
        let est = fer_at(mid)?;
        if est.rate() <= target {
            hi = mid;
            best = est;
        } else {
            lo = mid + 1;
        }
    }
    if hi == n {
        best = fer_at(n)?;
    }
    Ok((hi, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(dim: PolarDimension, d: usize, probs: Vec<f64>) -> ReliabilityTable {
        ReliabilityTable { dim, d, trials: 1, seed: 0, error_probs: probs }
    }

    #[test]
    fn split_weights() {
        assert_eq!(node_split_weight(1, 0, 0).unwrap(), 1.0);
        assert_eq!(node_split_weight(1, 1, 0).unwrap(), 0.5);
        assert_eq!(node_split_weight(1, 0, 1).unwrap(), 0.5);
        assert!((node_split_weight(2, 1, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(node_split_weight(2, 3, 0).is_err());
        // weights over all splits of a fixed total sum to one
        for half in [1usize, 4, 64] {
            for total in 0..=6usize.min(2 * half) {
                let s: f64 = (0..=total)
                    .filter(|&dl| dl <= half && total - dl <= half)
                    .map(|dl| node_split_weight(half, dl, total - dl).unwrap())
                    .sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_set_selection() {
        assert!(select_frozen_set(&[0.4, 0.0, 0.2, 0.1], 0).unwrap().is_empty());
        assert_eq!(select_frozen_set(&[0.4, 0.0, 0.2, 0.1], 2).unwrap(), vec![0, 2]);
        let mut all = select_frozen_set(&[0.4, 0.0, 0.2, 0.1], 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(select_frozen_set(&[0.1, 0.3, 0.3, 0.0], 2).unwrap(), vec![1, 2]);
        assert!(select_frozen_set(&[0.0; 4], 5).is_err());
    }

    #[test]
    fn zero_deletions_is_noiseless_inversion() {
        let dim = PolarDimension::from_len(64).unwrap();
        let spec = DeletionCodeSpec::new(&table(dim, 0, vec![0.0; 64]), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = BitVec::from_bools((0..64).map(|_| rng.gen::<bool>()));
            assert_eq!(deletion_sc_decode(&spec, &x, &BitVec::zeros(0)).unwrap(), x);
        }
    }

    #[test]
    fn all_frozen_returns_transform_of_check_bits() {
        let dim = PolarDimension::from_len(16).unwrap();
        let spec = DeletionCodeSpec::new(&table(dim, 2, vec![0.5; 16]), 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = BitVec::from_bools((0..16).map(|_| rng.gen::<bool>()));
        let cb = encode_check_bits(&x, &spec).unwrap();
        let junk = BitVec::zeros(14);
        assert_eq!(deletion_sc_decode(&spec, &junk, &cb).unwrap(), x);
    }

    #[test]
    fn check_bits_of_zero_word_are_zero() {
        let dim = PolarDimension::from_len(32).unwrap();
        let spec = DeletionCodeSpec::new(&table(dim, 1, (0..32).map(|i| i as f64 / 32.0).collect()), 9).unwrap();
        assert_eq!(encode_check_bits(&BitVec::zeros(32), &spec).unwrap(), BitVec::zeros(9));
        let empty = DeletionCodeSpec::new(&table(dim, 1, vec![0.0; 32]), 0).unwrap();
        assert!(encode_check_bits(&BitVec::zeros(32), &empty).unwrap().is_empty());
        assert!(encode_check_bits(&BitVec::zeros(16), &spec).is_err());
    }

    #[test]
    fn contract_errors() {
        let dim = PolarDimension::from_len(8).unwrap();
        let spec = DeletionCodeSpec::new(&table(dim, 1, vec![0.1; 8]), 3).unwrap();
        assert!(matches!(deletion_sc_decode(&spec, &BitVec::zeros(8), &BitVec::zeros(3)), Err(Error::Contract(_))));
        assert!(matches!(deletion_sc_decode(&spec, &BitVec::zeros(7), &BitVec::zeros(2)), Err(Error::Contract(_))));
    }

    #[test]
    fn d_zero_reliabilities_vanish() {
        let dim = PolarDimension::from_len(32).unwrap();
        let t = mc_estimate_reliabilities(dim, 0, 50, 1, Execution::Sequential).unwrap();
        assert!(t.error_probs.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn pdrt_round_trip_and_rejects_garbage() {
        let dim = PolarDimension::from_len(4).unwrap();
        let t = ReliabilityTable { dim, d: 1, trials: 10, seed: 7, error_probs: vec![0.5, 0.25, 0.0, 0.125] };
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"PDRT");
        assert_eq!(bytes.len(), 28 + 32);
        assert_eq!(ReliabilityTable::from_bytes(&bytes).unwrap(), t);
        assert!(ReliabilityTable::from_bytes(&bytes[..30]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ReliabilityTable::from_bytes(&bad).is_err());
    }

    #[test]
    fn pattern_apply() {
        let p = DeletionPattern::new(vec![5, 2], 8).unwrap();
        let x: BitVec = "01011010".parse().unwrap();
        assert_eq!(p.apply_bits(&x).to_string(), "011110");
        assert!(DeletionPattern::new(vec![8], 8).is_err());
        assert!(DeletionPattern::new(vec![1, 1], 8).is_err());
    }

    #[test]
    fn state_admissibility() {
        let s = DeletionState { d1: 1, d2: 1 };
        assert!(s.admissible(8, 2, 2, 2));
        assert!(!s.admissible(8, 2, 0, 2));
        assert_eq!(s.after(2), Some(0));
        assert!(!DeletionState { d1: 0, d2: 0 }.admissible(8, 2, 6, 2));
    }
}
