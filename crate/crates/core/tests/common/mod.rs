//! Independent oracles shared by the integration targets.
#![allow(dead_code)]

use polarsync::deletion::DeletionChannel;
use polarsync::polar::{hard_decision, BlockChannel, ScEngine};
use polarsync::BitVec;

pub fn generator(n: usize) -> Vec<Vec<u8>> {
    let mut g = vec![vec![1u8]];
    while g.len() < n {
        let m = g.len();
        let mut next = vec![vec![0u8; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = g[i][j];
                next[m + i][j] = g[i][j];
                next[m + i][m + j] = g[i][j];
            }
        }
        g = next;
    }
    let bits = n.trailing_zeros();
    let rev = |i: usize| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
    (0..n).map(|i| g[rev(i)].clone()).collect()
}

pub fn encode(g: &[Vec<u8>], u: &[u8]) -> Vec<u8> {
    let n = g.len();
    (0..n).map(|j| (0..n).fold(0, |acc, i| acc ^ (u[i] & g[i][j]))).collect()
}

pub fn subsets(n: usize, d: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == d)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

pub fn delete(x: &[u8], pattern: &[usize]) -> Vec<u8> {
    x.iter().enumerate().filter(|(i, _)| !pattern.contains(i)).map(|(_, &b)| b).collect()
}

/// Likelihood of `y` given `x` under a uniform choice of the deletion pattern.
pub fn deletion_likelihood(x: &[u8], y: &[u8], patterns: &[Vec<usize>]) -> f64 {
    patterns.iter().filter(|p| delete(x, p) == y).count() as f64 / patterns.len() as f64
}

/// Normalised `[P(u_i = 0), P(u_i = 1)]` given the prefix, future bits uniform.
pub fn oracle_pair(g: &[Vec<u8>], prefix: &[u8], lik: &dyn Fn(&[u8]) -> f64) -> [f64; 2] {
    let n = g.len();
    let i = prefix.len();
    let free = n - i - 1;
    let mut out = [0.0; 2];
    for (b, slot) in out.iter_mut().enumerate() {
        for tail in 0u32..1 << free {
            let mut u = prefix.to_vec();
            u.push(b as u8);
            u.extend((0..free).map(|k| (tail >> k & 1) as u8));
            *slot += lik(&encode(g, &u));
        }
    }
    out
}

pub fn normalise(p: [f64; 2]) -> [f64; 2] {
    let s = p[0] + p[1];
    [p[0] / s, p[1] / s]
}

/// Runs the engine and the oracle side by side with frozen bits from `known`.
/// Returns the number of indices where probabilities or decisions differ.
pub fn compare<C: BlockChannel>(ch: &C, g: &[Vec<u8>], known: &[Option<u8>], lik: &dyn Fn(&[u8]) -> f64) -> usize {
    let mut engine = ScEngine::new(ch).unwrap();
    let mut prefix = Vec::new();
    let mut mismatches = 0;
    engine.run(|i, p| {
        let want = oracle_pair(g, &prefix, lik);
        let bit = known[i].unwrap_or_else(|| hard_decision(p));
        let oracle_bit = known[i].unwrap_or_else(|| hard_decision(want));
        if want[0] + want[1] > 0.0 {
            let (a, b) = (normalise(p), normalise(want));
            if (a[0] - b[0]).abs() > 1e-9 || bit != oracle_bit {
                mismatches += 1;
            }
        }
        prefix.push(bit);
        bit
    });
    mismatches
}

pub fn deletion_case(n: usize, d: usize, u: &[u8], pattern: &[usize], known: &[Option<u8>]) -> usize {
    let g = generator(n);
    let x = encode(&g, u);
    let y = BitVec::from_bits(delete(&x, pattern)).unwrap();
    let patterns = subsets(n, d);
    let yv = y.as_slice().to_vec();
    let lik = move |c: &[u8]| deletion_likelihood(c, &yv, &patterns);
    compare(&DeletionChannel::new(&y, n, d).unwrap(), &g, known, &lik)
}

/// Every `d`-subset whose removal from `x` leaves `y`.
pub fn consistent_patterns(x: &[u8], y: &[u8], d: usize) -> Vec<Vec<usize>> {
    subsets(x.len(), d).into_iter().filter(|p| delete(x, p) == y).collect()
}

/// Every `(u, pattern, frozen subset)` at `N = 4`, `d ∈ {1, 2}`.
/// Returns `(cases, mismatching cases)`.
pub fn exhaustive_n4() -> (usize, usize) {
    let n = 4;
    let (mut cases, mut bad) = (0, 0);
    for d in 1..=2 {
        for um in 0u32..16 {
            let u: Vec<u8> = (0..n).map(|k| (um >> k & 1) as u8).collect();
            for pattern in subsets(n, d) {
                for fm in 0u32..16 {
                    let known: Vec<Option<u8>> = (0..n).map(|k| (fm >> k & 1 == 1).then_some(u[k])).collect();
                    cases += 1;
                    bad += usize::from(deletion_case(n, d, &u, &pattern, &known) > 0);
                }
            }
        }
    }
    (cases, bad)
}

/// Random `(u, pattern, frozen subset)` at `N = 8`, `d = 1`.
pub fn random_n8(instances: usize, seed: u64) -> usize {
    use rand::{Rng, SeedableRng};
    let n = 8;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .filter(|_| {
            let u: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let pattern = polarsync::deletion::DeletionPattern::random(n, 1, &mut rng);
            let known: Vec<Option<u8>> = (0..n).map(|k| rng.gen_bool(0.5).then_some(u[k])).collect();
            deletion_case(n, 1, &u, pattern.positions(), &known) > 0
        })
        .count()
}

#[derive(Debug, Default)]
pub struct AlignmentAudit {
    pub instances: usize,
    pub paths: usize,
    pub brute_forced: usize,
    pub truncated: usize,
    pub violations: Vec<String>,
}

/// Random `(x, pattern)` instances checked for soundness (every path
/// regenerates `y`), coverage (true positions lie in the union),
/// completeness against brute force for `N <= 16`, and agreement of the
/// reachability union with the enumerated one.
pub fn audit_alignment(instances: usize, seed: u64) -> AlignmentAudit {
    use polarsync::alignment::{
        build_admissible_table, enumerate_paths, potential_deletions, PathTable, DEFAULT_PATH_CAP,
    };
    use polarsync::deletion::DeletionPattern;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut audit = AlignmentAudit::default();
    for inst in 0..instances {
        let n = [4usize, 8, 16, 32, 64][rng.gen_range(0..5)];
        let d = rng.gen_range(1..=4.min(n - 1));
        let x = BitVec::from_bools((0..n).map(|_| rng.gen::<bool>()));
        let pattern = DeletionPattern::random(n, d, &mut rng);
        let y = pattern.apply_bits(&x);
        let table = build_admissible_table(&x, &y, d).unwrap();
        let e = enumerate_paths(&table, DEFAULT_PATH_CAP);
        audit.instances += 1;
        audit.paths += e.table.count();
        let mut found = BTreeSet::new();
        for path in &e.table.paths {
            let rows = PathTable::deletions_of(path, d);
            if rows.len() != d || delete(x.as_slice(), &rows) != y.as_slice() {
                audit.violations.push(format!("#{}: path {:?} does not regenerate y", inst, path));
            }
            found.insert(rows);
        }
        if pattern.positions().iter().any(|p| e.deletion_rows.binary_search(p).is_err()) {
            audit.violations.push(format!("#{}: true pattern {:?} not covered", inst, pattern.positions()));
        }
        if e.truncated {
            audit.truncated += 1;
            continue;
        }
        if potential_deletions(&table).as_deref() != Some(&e.deletion_rows[..]) {
            audit.violations.push(format!("#{}: reachability union differs from enumeration", inst));
        }
        if n <= 16 {
            audit.brute_forced += 1;
            let all: BTreeSet<Vec<usize>> = consistent_patterns(x.as_slice(), y.as_slice(), d).into_iter().collect();
            if all != found || found.len() != e.table.count() {
                audit.violations.push(format!(
                    "#{}: {} paths, {} consistent patterns",
                    inst,
                    e.table.count(),
                    all.len()
                ));
            }
        }
    }
    audit
}

#[derive(Debug, Default)]
pub struct RoundTripAudit {
    pub trips: usize,
    pub dense: usize,
    pub failures: usize,
}

/// Mask compression round trips over realistic alignment masks and
/// adversarial ones (dense, all ones, alternating, single runs).
pub fn audit_round_trips(trips: usize, seed: u64) -> RoundTripAudit {
    use polarsync::experiments::alignment_trial;
    use polarsync::feedback::{build_source_spec, decode_mask, encode_mask, MaskPermutation, SizingRule};
    use polarsync::{Execution, PolarDimension};
    use rand::{Rng, SeedableRng};

    let specs: Vec<(usize, _)> = [(64usize, 2usize), (256, 4), (256, 8)]
        .iter()
        .map(|&(n, d)| {
            let dim = PolarDimension::from_len(n).unwrap();
            let spec = build_source_spec(
                dim,
                2.0 * d as f64 / n as f64,
                SizingRule::min_cost(dim),
                2000,
                9,
                Execution::default(),
            )
            .unwrap();
            (d, spec)
        })
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut audit = RoundTripAudit::default();
    for t in 0..trips {
        let (d, spec) = &specs[t % specs.len()];
        let n = spec.n();
        let mask = match rng.gen_range(0..8) {
            0 => BitVec::from_bools((0..n).map(|_| rng.gen::<bool>())),
            1 => BitVec::from_bools((0..n).map(|_| rng.gen_bool(0.9))),
            2 => BitVec::from_bools((0..n).map(|i| i % 2 == 0)),
            3 => BitVec::from_bits(vec![1; n]).unwrap(),
            4 => {
                let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
                BitVec::from_bools((0..n).map(|i| i >= a.min(b) && i <= a.max(b)))
            }
            _ => alignment_trial(n, *d, 1, &mut rng).unwrap(),
        };
        if mask.count_ones() > 2 * n / 5 {
            audit.dense += 1;
        }
        let perm = MaskPermutation::new(rng.gen(), n);
        let ok = encode_mask(&mask, &perm, spec)
            .and_then(|c| decode_mask(&c, &perm, spec))
            .map(|m| m == mask)
            .unwrap_or(false);
        audit.trips += 1;
        audit.failures += usize::from(!ok);
    }
    audit
}
