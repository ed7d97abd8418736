mod common;

use common::*;
use polarsync::alignment::{build_admissible_table, detect_deletions, enumerate_paths, Alignment};
use polarsync::BitVec;

#[test]
fn random_instances_are_sound_and_complete() {
    let a = audit_alignment(3000, 21);
    assert!(a.violations.is_empty(), "{:?}", &a.violations[..a.violations.len().min(5)]);
    assert!(a.brute_forced > 1000);
    assert_eq!(a.truncated, 0);
}

#[test]
fn alternating_sequence_pins_deletions() {
    // no runs longer than one: every deletion position is identifiable
    let x: BitVec = "0101010101010101".parse().unwrap();
    let y: BitVec = "01010101010101".parse().unwrap();
    let table = build_admissible_table(&x, &y, 2).unwrap();
    let e = enumerate_paths(&table, 1 << 16);
    // deleting any adjacent pair gives the same y
    assert_eq!(e.table.count(), 15);
    assert_eq!(e.deletion_rows.len(), 16);
}

#[test]
fn inconsistent_pair_has_no_mask() {
    let x: BitVec = "0000".parse().unwrap();
    let y: BitVec = "11".parse().unwrap();
    assert_eq!(detect_deletions(&x, &y, 2).unwrap(), Alignment::Inconsistent);
    assert!(detect_deletions(&x, &y, 1).is_err());
}
