//! Trial execution: independent Monte Carlo trials fanned out over rayon
//! when the `parallel` feature is enabled, or run in a plain loop otherwise.
//!
//! Every trial gets its own ChaCha stream derived from `(seed, trial)`, and
//! reductions are exact (integer counts), so results do not depend on the
//! execution mode or on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How a batch of trials is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    #[default]
    Parallel,
}

/// Deterministic per-trial generator: stream `trial` of the seed's ChaCha8 key.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Maps every trial index through `map` and folds the results with `reduce`.
/// `reduce` must be associative and commutative for mode-independent output.
pub fn map_reduce<T, M, R>(trials: u64, mode: Execution, identity: T, map: M, reduce: R) -> T
where
    T: Send + Sync + Clone,
    M: Fn(u64) -> T + Send + Sync,
    R: Fn(T, T) -> T + Send + Sync,
{
    match mode {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..trials).into_par_iter().map(map).reduce(|| identity.clone(), reduce)
        }
        _ => (0..trials).map(map).fold(identity, reduce),
    }
}

/// Exact integer accumulator for mean / standard deviation of a count metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CountStats {
    pub n: u64,
    pub sum: u64,
    pub sum_sq: u128,
}

impl CountStats {
    pub fn single(v: u64) -> Self {
        CountStats { n: 1, sum: v, sum_sq: (v as u128) * (v as u128) }
    }

    pub fn merge(self, o: Self) -> Self {
        CountStats { n: self.n + o.n, sum: self.sum + o.sum, sum_sq: self.sum_sq + o.sum_sq }
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum as f64 / self.n as f64
        }
    }

    /// Sample standard deviation (n - 1 denominator).
    pub fn stddev(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let mean = self.mean();
        let var = (self.sum_sq as f64 - n * mean * mean) / (n - 1.0);
        var.max(0.0).sqrt()
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.stddev() / (self.n as f64).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn modes_agree() {
        let run = |mode| {
            map_reduce(
                2000,
                mode,
                CountStats::default(),
                |t| CountStats::single(trial_rng(9, t).gen_range(0..100)),
                CountStats::merge,
            )
        };
        assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
    }

    #[test]
    fn count_stats() {
        let s = [2u64, 4, 4, 4, 5, 5, 7, 9]
            .iter()
            .map(|&v| CountStats::single(v))
            .fold(CountStats::default(), CountStats::merge);
        assert_eq!(s.mean(), 5.0);
        assert!((s.stddev() - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }
}
