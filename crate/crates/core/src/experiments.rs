//! Monte Carlo statistics behind the published tables.

use std::time::Duration;

use serde::Serialize;

use crate::alignment::{detect_deletions, intersect_masks, Alignment};
use crate::bits::BitVec;
use crate::deletion::DeletionPattern;
use crate::error::{Error, Result};
use crate::exec::{map_reduce, trial_rng, CountStats, Execution};
use crate::feedback::{decode_mask, differential, encode_mask, MaskPermutation, SourceCodeSpec};
use crate::polar::PolarDimension;
use rand::Rng;

/// Mean `d̂` at `N = 256`, `d = 1..=6`.
pub const REFERENCE_D_HAT: [f64; 6] = [2.9985, 5.9593, 8.9893, 11.9026, 14.8974, 17.7470];
/// Mean `d̄` at `N = 256`, `d = 1..=6`.
pub const REFERENCE_D_BAR: [f64; 6] = [1.9927, 3.9389, 5.8482, 7.6799, 9.4958, 11.2399];

/// `(N, d, direct bits, compressed bits)`.
pub const REFERENCE_FEEDBACK_BITS: [(usize, usize, f64, f64); 4] = [
    (256, 8, 189.8272, 101.2584),
    (256, 10, 237.7520, 114.1440),
    (512, 10, 266.5980, 150.6010),
    (1024, 20, 582.9000, 306.0160),
];

/// Expected mask weight per deletion with `c` alignment columns.
pub const MULTI_COLUMN_FACTOR: [(usize, f64); 3] = [(2, 1.7), (3, 1.3), (4, 1.1)];

fn random_bits<R: Rng>(n: usize, rng: &mut R) -> BitVec {
    BitVec::from_bools((0..n).map(|_| rng.gen::<bool>()))
}

/// One uniformly random instance: `c` i.i.d. uniform columns, a uniform
/// `d`-subset deleted from all of them, masks intersected.
pub fn alignment_trial<R: Rng>(n: usize, d: usize, columns: usize, rng: &mut R) -> Result<BitVec> {
    let pattern = DeletionPattern::random(n, d, rng);
    let masks = (0..columns)
        .map(|_| {
            let x = random_bits(n, rng);
            let y = pattern.apply_bits(&x);
            match detect_deletions(&x, &y, d)? {
                Alignment::Mask(m) => Ok(m),
                Alignment::Inconsistent => Err(Error::Contract("a true deletion pattern was rejected".into())),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = intersect_masks(&masks)?;
    debug_assert!(pattern.positions().iter().all(|&p| mask.bits()[p] == 1));
    Ok(mask.bits().clone())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AlignmentStats {
    pub d_hat: CountStats,
    pub d_bar: CountStats,
}

/// Mask weight `d̂` and differential weight `d̄` over `trials` instances.
pub fn alignment_stats(
    n: usize,
    d: usize,
    columns: usize,
    trials: u64,
    seed: u64,
    mode: Execution,
) -> Result<AlignmentStats> {
    if trials == 0 || columns == 0 || d > n {
        return Err(Error::Domain("need trials > 0, columns > 0 and d <= N".into()));
    }
    PolarDimension::from_len(n)?;
    Ok(map_reduce(
        trials,
        mode,
        AlignmentStats::default(),
        |t| {
            let mut rng = trial_rng(seed, t);
            let mask = alignment_trial(n, d, columns, &mut rng).expect("true pattern always aligns");
            AlignmentStats {
                d_hat: CountStats::single(mask.count_ones() as u64),
                d_bar: CountStats::single(differential(&mask).count_ones() as u64),
            }
        },
        |a, b| AlignmentStats { d_hat: a.d_hat.merge(b.d_hat), d_bar: a.d_bar.merge(b.d_bar) },
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FeedbackStats {
    pub d_hat: CountStats,
    /// `n · d̂`.
    pub direct_bits: CountStats,
    /// `|S^c| + n · |𝒯|`.
    pub compressed_bits: CountStats,
    pub mismatches: CountStats,
    pub round_trip_failures: u64,
}

/// Feedback cost of single-column masks under both encodings.
pub fn feedback_stats(
    spec: &SourceCodeSpec,
    d: usize,
    trials: u64,
    seed: u64,
    mode: Execution,
) -> Result<FeedbackStats> {
    if trials == 0 {
        return Err(Error::Domain("at least one trial is required".into()));
    }
    let n = spec.n();
    let nb = spec.dim.log_n() as u64;
    Ok(map_reduce(
        trials,
        mode,
        FeedbackStats::default(),
        |t| {
            let mut rng = trial_rng(seed, t);
            let mask = alignment_trial(n, d, 1, &mut rng).expect("true pattern always aligns");
            let perm = MaskPermutation::new(rng.gen(), n);
            let c = encode_mask(&mask, &perm, spec).expect("dimensions match");
            let ok = decode_mask(&c, &perm, spec).map(|m| m == mask).unwrap_or(false);
            let w = mask.count_ones() as u64;
            FeedbackStats {
                d_hat: CountStats::single(w),
                direct_bits: CountStats::single(nb * w),
                compressed_bits: CountStats::single(c.bit_cost(spec.dim) as u64),
                mismatches: CountStats::single(c.mismatch.len() as u64),
                round_trip_failures: u64::from(!ok),
            }
        },
        |a, b| FeedbackStats {
            d_hat: a.d_hat.merge(b.d_hat),
            direct_bits: a.direct_bits.merge(b.direct_bits),
            compressed_bits: a.compressed_bits.merge(b.compressed_bits),
            mismatches: a.mismatches.merge(b.mismatches),
            round_trip_failures: a.round_trip_failures + b.round_trip_failures,
        },
    ))
}

/// Mean and standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metric {
    pub mean: f64,
    pub stddev: f64,
}

impl From<CountStats> for Metric {
    fn from(s: CountStats) -> Self {
        Metric { mean: s.mean(), stddev: s.stddev() }
    }
}

/// One results record, echoing its configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub table: String,
    pub n: usize,
    pub d: usize,
    pub columns: usize,
    pub trials: u64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_hat: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_bar: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mismatches: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct_bits: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compressed_bits: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
    pub runtime_ms: u128,
}

impl BenchResult {
    pub fn new(table: &str, n: usize, d: usize, columns: usize, trials: u64, seed: u64) -> Self {
        BenchResult {
            table: table.into(),
            n,
            d,
            columns,
            trials,
            seed,
            d_hat: None,
            d_bar: None,
            mismatches: None,
            direct_bits: None,
            compressed_bits: None,
            fer: None,
            success_rate: None,
            reference: None,
            pass: None,
            runtime_ms: 0,
        }
    }

    pub fn with_runtime(mut self, t: Duration) -> Self {
        self.runtime_ms = t.as_millis();
        self
    }

    pub const CSV_HEADER: &'static str =
        "table,n,d,columns,trials,seed,d_hat,d_hat_sd,d_bar,d_bar_sd,direct_bits,compressed_bits,fer,success_rate,reference,pass,runtime_ms";

    pub fn csv_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| format!("{}", x)).unwrap_or_default()
        }
        let m = |v: Option<Metric>| opt(v.map(|m| m.mean));
        let sd = |v: Option<Metric>| opt(v.map(|m| m.stddev));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.table,
            self.n,
            self.d,
            self.columns,
            self.trials,
            self.seed,
            m(self.d_hat),
            sd(self.d_hat),
            m(self.d_bar),
            sd(self.d_bar),
            m(self.direct_bits),
            m(self.compressed_bits),
            opt(self.fer),
            opt(self.success_rate),
            opt(self.reference),
            self.pass.map(|p| p.to_string()).unwrap_or_default(),
            self.runtime_ms
        )
    }
}
