//! Deletion detection by aligning the recovered column `x̂` (length `N`)
//! against the local column `y` (length `N - d`).
//!
//! Row `i` of the admissible table marks which deletion states `(d2, d1)`
//! are consistent at position `i`; column `j = d2·(d+1) + d1` (0-based).
//! A path picks one admissible state per row such that `d1` is carried
//! forward and incremented on every `d2 = 1` row; each complete path is one
//! deletion pattern turning `x` into `y`.

use std::fmt;

use crate::bits::BitVec;
use crate::error::{Error, Result};

/// Default cap on stored paths during enumeration.
pub const DEFAULT_PATH_CAP: usize = 1 << 16;

/// `N × (2d+1)` binary admissibility matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissibleTable {
    n: usize,
    d: usize,
    entries: Vec<u8>,
}

impl AdmissibleTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn width(&self) -> usize {
        2 * self.d + 1
    }

    /// Entry at 0-based row `i`, 0-based column `j`.
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.width() + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        let w = self.width();
        &self.entries[i * w..(i + 1) * w]
    }

    /// `(d2, d1)` encoded by 0-based column `j`.
    pub fn state_of(&self, j: usize) -> (usize, usize) {
        if j <= self.d {
            (0, j)
        } else {
            (1, j - self.d - 1)
        }
    }

    pub fn column_of(&self, d2: usize, d1: usize) -> usize {
        d2 * (self.d + 1) + d1
    }

    // can[i][c]: rows i.. can be completed when entering row i with carried d1 = c
    fn completion(&self) -> Vec<Vec<bool>> {
        let (n, d) = (self.n, self.d);
        let mut can = vec![vec![false; d + 2]; n + 1];
        can[n].iter_mut().for_each(|c| *c = true);
        for i in (0..n).rev() {
            for c in 0..=d {
                let keep = self.get(i, self.column_of(0, c)) == 1 && can[i + 1][c];
                let del = c < d && self.get(i, self.column_of(1, c)) == 1 && can[i + 1][c + 1];
                can[i][c] = keep || del;
            }
        }
        can
    }
}

impl fmt::Display for AdmissibleTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>4} |", "i")?;
        for j in 0..self.width() {
            let (d2, d1) = self.state_of(j);
            write!(f, " ({},{})", d2, d1)?;
        }
        writeln!(f)?;
        for i in 0..self.n {
            write!(f, "{:>4} |", i + 1)?;
            for j in 0..self.width() {
                let (_, d1) = self.state_of(j);
                let cell_width = 4 + digits(d1);
                write!(f, " {:^w$}", self.get(i, j), w = cell_width)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn digits(v: usize) -> usize {
    v.to_string().len()
}

/// Builds the admissible table. Rows and entries follow the usual 1-based
/// convention internally: for `d2 = 0` the entry is `[x_i = y_{i-d1}]` when
/// `i - (N-d) ≤ d1 ≤ i - 1`, for `d2 = 1` it is 1 when
/// `i - (N-d) - 1 ≤ d1 ≤ i - 1`, and 0 otherwise.
pub fn build_admissible_table(x: &BitVec, y: &BitVec, d: usize) -> Result<AdmissibleTable> {
    let n = x.len();
    if d > n || y.len() != n - d {
        return Err(Error::Contract(format!("cannot align {} symbols against {} with {} deletions", n, y.len(), d)));
    }
    let m = (n - d) as isize;
    let w = 2 * d + 1;
    let mut entries = vec![0u8; n * w];
    for i1 in 1..=n as isize {
        let row = (i1 - 1) as usize;
        for j in 0..w {
            let value = if j <= d {
                let d1 = j as isize;
                if d1 > i1 - 1 || d1 < i1 - m {
                    0
                } else {
                    u8::from(x[row] == y[(i1 - d1 - 1) as usize])
                }
            } else {
                let d1 = (j - d - 1) as isize;
                u8::from(!(d1 > i1 - 1 || d1 < i1 - m - 1))
            };
            entries[row * w + j] = value;
        }
    }
    Ok(AdmissibleTable { n, d, entries })
}

/// Enumerated state paths, one 0-based column index per row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PathTable {
    pub paths: Vec<Vec<u16>>,
}

impl PathTable {
    pub fn count(&self) -> usize {
        self.paths.len()
    }

    /// Rows (0-based) where `path` sits in a `d2 = 1` column.
    pub fn deletions_of(path: &[u16], d: usize) -> Vec<usize> {
        path.iter().enumerate().filter(|(_, &j)| j as usize > d).map(|(i, _)| i).collect()
    }
}

impl fmt::Display for PathTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>4} |", "i")?;
        for k in 0..self.paths.len() {
            write!(f, " {:>4}", format!("#{}", k + 1))?;
        }
        writeln!(f)?;
        let rows = self.paths.first().map_or(0, Vec::len);
        for i in 0..rows {
            write!(f, "{:>4} |", i + 1)?;
            for p in &self.paths {
                // 1-based state numbers, as in the usual path-checking layout
                write!(f, " {:>4}", p[i] + 1)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Result of path enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathEnumeration {
    pub table: PathTable,
    /// Union of deletion rows over the stored paths (0-based, ascending).
    pub deletion_rows: Vec<usize>,
    /// Set when the cap stopped the enumeration early.
    pub truncated: bool,
}

/// Depth-first path checking from row 0 with `d1 = 0`, trying admissible
/// states in ascending column order. A state is enterable when its encoded
/// `d1` equals the carried one; `d2 = 1` states increment `d1` for the next
/// row. Branches that cannot reach the last row are pruned, which does not
/// change the set of completed paths. Stops after `cap` paths.
pub fn enumerate_paths(t: &AdmissibleTable, cap: usize) -> PathEnumeration {
    let can = t.completion();
    let mut out = PathEnumeration { table: PathTable::default(), deletion_rows: Vec::new(), truncated: false };
    let mut in_union = vec![false; t.n];
    let mut path = vec![0u16; t.n];
    if t.n > 0 && can[0][0] {
        propagate(t, &can, 0, 0, &mut path, &mut in_union, cap, &mut out);
    }
    out.deletion_rows = (0..t.n).filter(|&i| in_union[i]).collect();
    out
}

#[allow(clippy::too_many_arguments)]
fn propagate(
    t: &AdmissibleTable,
    can: &[Vec<bool>],
    row: usize,
    carried: usize,
    path: &mut Vec<u16>,
    in_union: &mut [bool],
    cap: usize,
    out: &mut PathEnumeration,
) {
    for j in 0..t.width() {
        if out.truncated {
            return;
        }
        if t.get(row, j) == 0 {
            continue;
        }
        let (d2, d1) = t.state_of(j);
        if d1 != carried {
            continue;
        }
        let next = carried + d2;
        if !can[row + 1].get(next).copied().unwrap_or(false) {
            continue;
        }
        path[row] = j as u16;
        if row + 1 == t.n {
            if out.table.paths.len() >= cap {
                out.truncated = true;
                return;
            }
            for i in PathTable::deletions_of(path, t.d) {
                in_union[i] = true;
            }
            out.table.paths.push(path.clone());
        } else {
            propagate(t, can, row + 1, next, path, in_union, cap, out);
        }
    }
}

/// Union of deletion rows over *all* complete paths, computed by forward
/// reachability and backward completion over the table in `O(N·d)`.
/// Returns `None` when no complete path exists (`x̂` inconsistent with `y`).
pub fn potential_deletions(t: &AdmissibleTable) -> Option<Vec<usize>> {
    let (n, d) = (t.n, t.d);
    let can = t.completion();
    if n == 0 || !can[0][0] {
        return None;
    }
    let mut reach = vec![false; d + 1];
    reach[0] = true;
    let mut rows = Vec::new();
    for i in 0..n {
        let mut next = vec![false; d + 1];
        let mut deletable = false;
        for c in 0..=d {
            if !reach[c] {
                continue;
            }
            if t.get(i, t.column_of(0, c)) == 1 && can[i + 1][c] {
                next[c] = true;
            }
            if c < d && t.get(i, t.column_of(1, c)) == 1 && can[i + 1][c + 1] {
                next[c + 1] = true;
                deletable = true;
            }
        }
        if deletable {
            rows.push(i);
        }
        reach = next;
    }
    Some(rows)
}

/// Indicator of potential deletions over `[0, N)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeletionMask {
    bits: BitVec,
}

impl DeletionMask {
    pub fn from_bits(bits: BitVec) -> Self {
        DeletionMask { bits }
    }

    pub fn bits(&self) -> &BitVec {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `d̂`, the number of potential deletions.
    pub fn weight(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits.ones()
    }
}

/// Mask with ones exactly at `indices` (0-based).
pub fn deletion_mask(indices: &[usize], n: usize) -> Result<DeletionMask> {
    let mut bits = BitVec::zeros(n);
    for &i in indices {
        if i >= n {
            return Err(Error::Domain(format!("index {} outside [0, {})", i, n)));
        }
        bits.set(i, 1);
    }
    Ok(DeletionMask { bits })
}

/// Bitwise AND of masks from independent column alignments.
pub fn intersect_masks(masks: &[DeletionMask]) -> Result<DeletionMask> {
    let first = masks.first().ok_or_else(|| Error::Domain("no masks to intersect".into()))?;
    let mut bits = first.bits.clone();
    for m in &masks[1..] {
        if m.len() != bits.len() {
            return Err(Error::Dimension(format!("mask lengths {} and {}", bits.len(), m.len())));
        }
        for i in 0..bits.len() {
            bits.set(i, bits[i] & m.bits[i]);
        }
    }
    Ok(DeletionMask { bits })
}

/// Outcome of aligning one column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Alignment {
    Mask(DeletionMask),
    /// No deletion pattern maps `x̂` onto `y`.
    Inconsistent,
}

/// Aligns `x̂` with `y` and returns the potential-deletion mask.
/// `d = 0` short-circuits to the empty mask without building a table.
pub fn detect_deletions(x: &BitVec, y: &BitVec, d: usize) -> Result<Alignment> {
    if d == 0 {
        if x != y {
            return if x.len() == y.len() {
                Ok(Alignment::Inconsistent)
            } else {
                Err(Error::Contract(format!("lengths {} and {} with no deletions", x.len(), y.len())))
            };
        }
        return Ok(Alignment::Mask(deletion_mask(&[], x.len())?));
    }
    let table = build_admissible_table(x, y, d)?;
    Ok(match potential_deletions(&table) {
        Some(rows) => Alignment::Mask(deletion_mask(&rows, x.len())?),
        None => Alignment::Inconsistent,
    })
}
