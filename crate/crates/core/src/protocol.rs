//! Two-peer reconciliation sessions.
//!
//! Alice holds the complete, chronologically ordered store of `N = 2^n`
//! packages; Bob holds the same store minus `d` packages. The message flow:
//!
//! 1. Bob → Alice: `DelCount { d }`.
//! 2. Alice → Bob: one `CheckBits` per alignment column, with a digest of
//!    the column so Bob can detect a failed decode.
//! 3. Bob decodes and aligns each column, intersects the masks and sends
//!    `Feedback` (direct indices or compressed mask).
//! 4. Alice sends the packages at the masked positions, or for `d = 1` a
//!    single XOR checksum package.
//!
//! On a digest mismatch Bob asks for another column, then for the raw
//! column. Messages travel over an in-process reliable transport; every
//! frame is encoded and re-parsed so the transcript is the exact byte
//! stream.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::alignment::{
    build_admissible_table, detect_deletions, enumerate_paths, intersect_masks, Alignment, DeletionMask,
};
use crate::bits::BitVec;
use crate::deletion::{
    cached_reliabilities, calibrate_k, deletion_sc_decode, encode_check_bits, DeletionCodeSpec, DeletionPattern,
    FerEstimate,
};
use crate::error::{Error, Result};
use crate::exec::{trial_rng, Execution};
use crate::feedback::{build_source_spec, decode_mask, encode_mask, MaskPermutation, SizingRule, SourceCodeSpec};
use crate::polar::PolarDimension;
use crate::wire::{AbortReason, ColumnMode, FeedbackBody, FeedbackFrame, Message, WireContext, WirePackage};

/// A fixed-length binary package with its chronological key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Package {
    pub order_key: u64,
    pub payload: BitVec,
}

impl From<WirePackage> for Package {
    fn from(p: WirePackage) -> Self {
        Package { order_key: p.order_key, payload: p.payload }
    }
}

impl From<&Package> for WirePackage {
    fn from(p: &Package) -> Self {
        WirePackage { order_key: p.order_key, payload: p.payload.clone() }
    }
}

/// Packages sorted by strictly increasing `order_key`, all of length `L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageStore {
    packages: Vec<Package>,
    package_bits: usize,
}

impl PackageStore {
    pub fn new(packages: Vec<Package>, package_bits: usize) -> Result<Self> {
        if let Some(p) = packages.iter().find(|p| p.payload.len() != package_bits) {
            return Err(Error::Contract(format!(
                "package {} has {} bits, store uses {}",
                p.order_key,
                p.payload.len(),
                package_bits
            )));
        }
        if packages.windows(2).any(|w| w[0].order_key >= w[1].order_key) {
            return Err(Error::Contract("packages are not in strictly increasing key order".into()));
        }
        Ok(PackageStore { packages, package_bits })
    }

    pub fn len(&self) -> usize {
        self.packages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packages.is_empty()
    }

    pub fn package_bits(&self) -> usize {
        self.package_bits
    }

    pub fn packages(&self) -> &[Package] {
        &self.packages
    }

    pub fn contains_key(&self, key: u64) -> bool {
        self.packages.binary_search_by_key(&key, |p| p.order_key).is_ok()
    }

    /// Inserts in key order; returns false if the key is already present.
    pub fn insert(&mut self, pkg: Package) -> Result<bool> {
        if pkg.payload.len() != self.package_bits {
            return Err(Error::Contract(format!(
                "package of {} bits in a store of {}",
                pkg.payload.len(),
                self.package_bits
            )));
        }
        match self.packages.binary_search_by_key(&pkg.order_key, |p| p.order_key) {
            Ok(_) => Ok(false),
            Err(pos) => {
                self.packages.insert(pos, pkg);
                Ok(true)
            }
        }
    }

    /// Whether `self` is obtained from `full` by deleting packages.
    pub fn is_subsequence_of(&self, full: &PackageStore) -> bool {
        let mut it = full.packages.iter();
        self.packages.iter().all(|p| it.any(|q| q == p))
    }

    /// SHA-256 over keys and payloads, truncated to 64 bits.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        for p in &self.packages {
            h.update(p.order_key.to_le_bytes());
            h.update(p.payload.to_packed());
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}

/// `d = N - |store|`.
pub fn bob_report_deletions(store: &PackageStore, n: usize) -> Result<usize> {
    n.checked_sub(store.len())
        .ok_or_else(|| Error::Contract(format!("store holds {} packages, more than N = {}", store.len(), n)))
}

/// Bit `col` (0-based) of every package, in store order.
pub fn extract_column(store: &PackageStore, col: usize) -> Result<BitVec> {
    if col >= store.package_bits {
        return Err(Error::Domain(format!("column {} outside a package of {} bits", col, store.package_bits)));
    }
    Ok(BitVec::from_bits(store.packages.iter().map(|p| p.payload[col]).collect()).expect("binary payloads"))
}

/// Digest attached to check bits: SHA-256 of `N` and the packed column,
/// truncated to 64 bits.
pub fn column_digest(x: &BitVec) -> u64 {
    let mut h = Sha256::new();
    h.update((x.len() as u32).to_le_bytes());
    h.update(x.to_packed());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// XOR of the candidate payloads (and of their keys).
pub fn xor_checksum_package(candidates: &[Package]) -> Result<Package> {
    let first = candidates.first().ok_or_else(|| Error::Domain("no candidate packages".into()))?;
    candidates[1..].iter().try_fold(first.clone(), |acc, p| {
        Ok(Package { order_key: acc.order_key ^ p.order_key, payload: acc.payload.xor(&p.payload)? })
    })
}

/// Removes Bob's local copies from the checksum. `local` must hold all of
/// the `candidates` masked packages except exactly one.
pub fn recover_from_checksum(checksum: &Package, local: &[Package], candidates: usize) -> Result<Package> {
    if local.len() + 1 != candidates {
        return Err(Error::Contract(format!(
            "{} local packages for {} candidates; exactly one must be missing",
            local.len(),
            candidates
        )));
    }
    local.iter().try_fold(checksum.clone(), |acc, p| {
        Ok(Package { order_key: acc.order_key ^ p.order_key, payload: acc.payload.xor(&p.payload)? })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeedbackPolicy {
    /// Whichever encoding is smaller on the wire for this session.
    #[default]
    Auto,
    Direct,
    Compressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentMethod {
    /// Exact union over all paths by reachability; never overflows.
    Reachability,
    /// Depth-first path enumeration capped at `cap` paths.
    Enumerate { cap: usize },
}

/// Configuration shared by both peers.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub dim: PolarDimension,
    pub package_bits: usize,
    /// Alignment columns (0-based, distinct).
    pub columns: Vec<usize>,
    /// Deletion codes keyed by `d`.
    pub code_specs: BTreeMap<usize, DeletionCodeSpec>,
    /// Source codes for compressed feedback, keyed by `d`.
    pub source_specs: BTreeMap<usize, SourceCodeSpec>,
    pub feedback: FeedbackPolicy,
    pub permutation_seed: u64,
    /// Use the XOR checksum package when `d = 1`.
    pub checksum_single: bool,
    pub alignment: AlignmentMethod,
}

impl SessionConfig {
    pub fn new(dim: PolarDimension, package_bits: usize) -> Self {
        SessionConfig {
            dim,
            package_bits,
            columns: vec![0],
            code_specs: BTreeMap::new(),
            source_specs: BTreeMap::new(),
            feedback: FeedbackPolicy::Auto,
            permutation_seed: 0,
            checksum_single: true,
            alignment: AlignmentMethod::Reachability,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Contract("at least one alignment column is required".into()));
        }
        let distinct: BTreeSet<_> = self.columns.iter().collect();
        if distinct.len() != self.columns.len() || self.columns.iter().any(|&c| c >= self.package_bits) {
            return Err(Error::Contract("alignment columns must be distinct and inside the package".into()));
        }
        for (&d, s) in &self.code_specs {
            if s.d != d || s.dim != self.dim {
                return Err(Error::Contract(format!("deletion code keyed by d = {} does not match", d)));
            }
        }
        for (&d, s) in &self.source_specs {
            if s.dim != self.dim {
                return Err(Error::Contract(format!("source code for d = {} has the wrong blocklength", d)));
            }
        }
        Ok(())
    }

    fn wire_context(&self, d: Option<usize>) -> WireContext {
        WireContext {
            package_bits: self.package_bits,
            feedback_payload_bits: d.and_then(|d| self.source_specs.get(&d)).map(|s| s.high_entropy.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Alice,
    Bob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    InconsistentStore,
    DecodeError,
    AlignmentOverflow,
    Protocol,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AwaitDelCount,
    AwaitCheckBits,
    AwaitFeedback,
    AwaitPackages,
    Done,
    Failed(FailureReason),
}

impl Phase {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Phase::Done | Phase::Failed(_))
    }

    fn rank(&self) -> u8 {
        match self {
            Phase::AwaitDelCount => 0,
            Phase::AwaitCheckBits => 1,
            Phase::AwaitFeedback => 2,
            Phase::AwaitPackages => 3,
            Phase::Done | Phase::Failed(_) => 4,
        }
    }
}

/// Recoverable events that changed the message flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// A column failed its digest; another column was requested.
    RetryColumn { failed: usize, next: usize },
    /// The raw column was requested after a second failure.
    RawColumn { column: usize },
    /// Path enumeration hit its cap; the exact reachability union was used.
    AlignmentOverflow { column: usize },
    /// No code for this `d`, or Bob is empty: everything was sent.
    FullTransfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackScheme {
    Direct,
    Compressed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub from: Role,
    pub frame: Vec<u8>,
}

/// Per-peer state machine bookkeeping.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub role: Role,
    pub phase: Phase,
    pub sent: Vec<Vec<u8>>,
    pub received: Vec<Vec<u8>>,
}

impl SessionState {
    fn new(role: Role, phase: Phase) -> Self {
        SessionState { role, phase, sent: Vec::new(), received: Vec::new() }
    }

    fn advance(&mut self, next: Phase) -> Result<()> {
        if self.phase.is_terminal() || next.rank() < self.phase.rank() {
            return Err(Error::Contract(format!("{:?} cannot move from {:?} to {:?}", self.role, self.phase, next)));
        }
        self.phase = next;
        Ok(())
    }
}

/// Alice's side of a session.
pub struct Alice<'a> {
    store: &'a PackageStore,
    cfg: &'a SessionConfig,
    pub state: SessionState,
    d: Option<usize>,
}

impl<'a> Alice<'a> {
    pub fn new(store: &'a PackageStore, cfg: &'a SessionConfig) -> Self {
        Alice { store, cfg, state: SessionState::new(Role::Alice, Phase::AwaitDelCount), d: None }
    }

    fn column(&self, col: usize) -> Result<BitVec> {
        extract_column(self.store, col)
    }

    fn check_bits(&self, col: usize, mode: ColumnMode) -> Result<Message> {
        let d = self.d.ok_or_else(|| Error::Contract("check bits before the deletion count".into()))?;
        let x = self.column(col)?;
        let digest = column_digest(&x);
        let bits = match mode {
            ColumnMode::Raw => x,
            ColumnMode::CheckBits => {
                let spec =
                    self.cfg.code_specs.get(&d).ok_or_else(|| Error::Contract(format!("no code for d = {}", d)))?;
                encode_check_bits(&x, spec)?
            }
        };
        Ok(Message::CheckBits { column: col as u16, k: bits.len() as u32, digest, bits })
    }

    fn all_packages(&self) -> Message {
        Message::Packages(self.store.packages().iter().map(WirePackage::from).collect())
    }

    pub fn handle(&mut self, msg: Message) -> Result<Vec<Message>> {
        let n = self.cfg.dim.len();
        match (self.state.phase, msg) {
            (_, Message::Abort(_)) => {
                self.state.phase = Phase::Failed(FailureReason::Aborted);
                Ok(vec![])
            }
            (Phase::AwaitDelCount, Message::DelCount { d }) => {
                let d = d as usize;
                if d > n {
                    self.state.advance(Phase::Failed(FailureReason::InconsistentStore))?;
                    return Ok(vec![Message::Abort(AbortReason::InconsistentStore)]);
                }
                self.d = Some(d);
                if d == 0 {
                    self.state.advance(Phase::Done)?;
                    return Ok(vec![]);
                }
                if d == n || !self.cfg.code_specs.contains_key(&d) {
                    self.state.advance(Phase::Done)?;
                    return Ok(vec![self.all_packages()]);
                }
                let out = self
                    .cfg
                    .columns
                    .iter()
                    .map(|&c| self.check_bits(c, ColumnMode::CheckBits))
                    .collect::<Result<Vec<_>>>()?;
                self.state.advance(Phase::AwaitFeedback)?;
                Ok(out)
            }
            (Phase::AwaitFeedback, Message::ColumnRequest { column, mode }) => {
                Ok(vec![self.check_bits(column as usize, mode)?])
            }
            (Phase::AwaitFeedback, Message::Feedback(frame)) => {
                let d = self.d.expect("set with the deletion count");
                if frame.n != n || frame.d != d {
                    self.state.advance(Phase::Failed(FailureReason::Protocol))?;
                    return Ok(vec![Message::Abort(AbortReason::Protocol)]);
                }
                let indices = match &frame.body {
                    FeedbackBody::Direct(idx) => idx.clone(),
                    FeedbackBody::Compressed(c) => {
                        let spec =
                            self.cfg.source_specs.get(&d).ok_or_else(|| Error::Contract("no source code".into()))?;
                        let perm = MaskPermutation::new(frame.permutation_seed, n);
                        decode_mask(c, &perm, spec)?.ones()
                    }
                };
                let candidates: Vec<Package> = indices
                    .iter()
                    .map(|&i| self.store.packages().get(i).cloned())
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Format("feedback index outside the store".into()))?;
                self.state.advance(Phase::Done)?;
                if d == 1 && self.cfg.checksum_single && !candidates.is_empty() {
                    let c = xor_checksum_package(&candidates)?;
                    Ok(vec![Message::Checksum(WirePackage::from(&c))])
                } else {
                    Ok(vec![Message::Packages(candidates.iter().map(WirePackage::from).collect())])
                }
            }
            (phase, m) => {
                self.state.phase = Phase::Failed(FailureReason::Protocol);
                Err(Error::Contract(format!("Alice received tag {:#04x} in {:?}", m.tag(), phase)))
            }
        }
    }
}

struct ColumnSlot {
    current: usize,
    retried: bool,
    raw_requested: bool,
    mask: Option<DeletionMask>,
}

/// Bob's side of a session.
pub struct Bob<'a> {
    store: PackageStore,
    cfg: &'a SessionConfig,
    pub state: SessionState,
    d: usize,
    slots: Vec<ColumnSlot>,
    used_columns: BTreeSet<usize>,
    pub fallbacks: Vec<Fallback>,
    pub mask: Option<DeletionMask>,
    pub feedback_scheme: Option<FeedbackScheme>,
    /// `n·d̂` for direct feedback, `|S^c| + n·|𝒯|` for compressed.
    pub feedback_model_bits: Option<usize>,
}

impl<'a> Bob<'a> {
    pub fn new(store: PackageStore, cfg: &'a SessionConfig) -> Self {
        Bob {
            store,
            cfg,
            state: SessionState::new(Role::Bob, Phase::AwaitDelCount),
            d: 0,
            slots: Vec::new(),
            used_columns: BTreeSet::new(),
            fallbacks: Vec::new(),
            mask: None,
            feedback_scheme: None,
            feedback_model_bits: None,
        }
    }

    pub fn store(&self) -> &PackageStore {
        &self.store
    }

    pub fn deletions(&self) -> usize {
        self.d
    }

    /// Reports the deletion count and moves to the matching phase.
    pub fn start(&mut self) -> Result<Vec<Message>> {
        let n = self.cfg.dim.len();
        self.d = match bob_report_deletions(&self.store, n) {
            Ok(d) => d,
            Err(e) => {
                self.state.advance(Phase::Failed(FailureReason::InconsistentStore))?;
                return Err(e);
            }
        };
        let msg = Message::DelCount { d: self.d as u32 };
        if self.d == 0 {
            self.state.advance(Phase::Done)?;
        } else if self.d == n || !self.cfg.code_specs.contains_key(&self.d) {
            self.fallbacks.push(Fallback::FullTransfer);
            self.state.advance(Phase::AwaitPackages)?;
        } else {
            self.slots = self
                .cfg
                .columns
                .iter()
                .map(|&c| ColumnSlot { current: c, retried: false, raw_requested: false, mask: None })
                .collect();
            self.used_columns = self.cfg.columns.iter().copied().collect();
            self.state.advance(Phase::AwaitCheckBits)?;
        }
        Ok(vec![msg])
    }

    fn align(&mut self, column: usize, x: &BitVec, y: &BitVec) -> Result<Option<DeletionMask>> {
        match self.cfg.alignment {
            AlignmentMethod::Reachability => {}
            AlignmentMethod::Enumerate { cap } => {
                let table = build_admissible_table(x, y, self.d)?;
                let e = enumerate_paths(&table, cap);
                if !e.truncated {
                    if e.table.count() == 0 {
                        return Ok(None);
                    }
                    return Ok(Some(crate::alignment::deletion_mask(&e.deletion_rows, x.len())?));
                }
                self.fallbacks.push(Fallback::AlignmentOverflow { column });
            }
        }
        Ok(match detect_deletions(x, y, self.d)? {
            Alignment::Mask(m) => Some(m),
            Alignment::Inconsistent => None,
        })
    }

    fn on_check_bits(&mut self, column: usize, digest: u64, bits: BitVec) -> Result<Vec<Message>> {
        let n = self.cfg.dim.len();
        let slot_idx = self
            .slots
            .iter()
            .position(|s| s.current == column && s.mask.is_none())
            .ok_or_else(|| Error::Contract(format!("unexpected check bits for column {}", column)))?;
        let y = extract_column(&self.store, column)?;
        let x_hat = if bits.len() == n && self.slots[slot_idx].raw_requested {
            bits
        } else {
            let spec = &self.cfg.code_specs[&self.d];
            deletion_sc_decode(spec, &y, &bits)?
        };
        let mask = if column_digest(&x_hat) == digest { self.align(column, &x_hat, &y)? } else { None };
        match mask {
            Some(m) => self.slots[slot_idx].mask = Some(m),
            None => {
                let slot = &mut self.slots[slot_idx];
                if slot.raw_requested {
                    self.state.advance(Phase::Failed(FailureReason::DecodeError))?;
                    return Ok(vec![Message::Abort(AbortReason::DecodeFailure)]);
                }
                let next = (0..self.cfg.package_bits).find(|c| !self.used_columns.contains(c));
                return Ok(vec![match (slot.retried, next) {
                    (false, Some(next)) => {
                        slot.retried = true;
                        slot.current = next;
                        self.used_columns.insert(next);
                        self.fallbacks.push(Fallback::RetryColumn { failed: column, next });
                        Message::ColumnRequest { column: next as u16, mode: ColumnMode::CheckBits }
                    }
                    _ => {
                        slot.raw_requested = true;
                        self.fallbacks.push(Fallback::RawColumn { column });
                        Message::ColumnRequest { column: column as u16, mode: ColumnMode::Raw }
                    }
                }]);
            }
        }
        if self.slots.iter().any(|s| s.mask.is_none()) {
            return Ok(vec![]);
        }
        let masks: Vec<DeletionMask> = self.slots.iter().filter_map(|s| s.mask.clone()).collect();
        let mask = intersect_masks(&masks)?;
        let frame = self.feedback_frame(&mask)?;
        self.mask = Some(mask);
        self.state.advance(Phase::AwaitPackages)?;
        Ok(vec![Message::Feedback(frame)])
    }

    fn feedback_frame(&mut self, mask: &DeletionMask) -> Result<FeedbackFrame> {
        let n = self.cfg.dim.len();
        let nb = self.cfg.dim.log_n() as usize;
        let direct = FeedbackFrame { n, d: self.d, permutation_seed: 0, body: FeedbackBody::Direct(mask.indices()) };
        let direct_model = nb * mask.weight();
        let compressed = match (self.cfg.feedback, self.cfg.source_specs.get(&self.d)) {
            (FeedbackPolicy::Direct, _) | (_, None) => None,
            (_, Some(spec)) => {
                let perm = MaskPermutation::new(self.cfg.permutation_seed, n);
                let c = encode_mask(mask.bits(), &perm, spec)?;
                let model = c.bit_cost(self.cfg.dim);
                let frame = FeedbackFrame {
                    n,
                    d: self.d,
                    permutation_seed: self.cfg.permutation_seed,
                    body: FeedbackBody::Compressed(c),
                };
                Some((frame, model))
            }
        };
        let pick_compressed = match (&compressed, self.cfg.feedback) {
            (Some(_), FeedbackPolicy::Compressed) => true,
            (Some((frame, _)), FeedbackPolicy::Auto) => frame.encode()?.len() < direct.encode()?.len(),
            _ => false,
        };
        if pick_compressed {
            let (frame, model) = compressed.expect("checked above");
            self.feedback_scheme = Some(FeedbackScheme::Compressed);
            self.feedback_model_bits = Some(model);
            Ok(frame)
        } else {
            self.feedback_scheme = Some(FeedbackScheme::Direct);
            self.feedback_model_bits = Some(direct_model);
            Ok(direct)
        }
    }

    fn on_checksum(&mut self, checksum: Package) -> Result<()> {
        let mask = self.mask.as_ref().ok_or_else(|| Error::Contract("checksum without a mask".into()))?;
        let idx = mask.indices();
        let (first, last) = match (idx.first(), idx.last()) {
            (Some(&f), Some(&l)) if l + 1 - f == idx.len() => (f, l),
            _ => return Err(Error::Contract("checksum recovery needs a contiguous candidate run".into())),
        };
        // Alice's positions first..=last minus the deleted one are Bob's first..last
        let local = &self.store.packages()[first..last];
        let recovered = recover_from_checksum(&checksum, local, idx.len())?;
        self.store.insert(recovered)?;
        Ok(())
    }

    pub fn handle(&mut self, msg: Message) -> Result<Vec<Message>> {
        match (self.state.phase, msg) {
            (_, Message::Abort(_)) => {
                self.state.phase = Phase::Failed(FailureReason::Aborted);
                Ok(vec![])
            }
            (Phase::AwaitCheckBits, Message::CheckBits { column, digest, bits, .. }) => {
                self.on_check_bits(column as usize, digest, bits)
            }
            (Phase::AwaitPackages, Message::Packages(pkgs)) => {
                for p in pkgs {
                    self.store.insert(p.into())?;
                }
                self.finish()
            }
            (Phase::AwaitPackages, Message::Checksum(c)) => {
                self.on_checksum(c.into())?;
                self.finish()
            }
            (phase, m) => {
                self.state.phase = Phase::Failed(FailureReason::Protocol);
                Err(Error::Contract(format!("Bob received tag {:#04x} in {:?}", m.tag(), phase)))
            }
        }
    }

    fn finish(&mut self) -> Result<Vec<Message>> {
        if self.store.len() == self.cfg.dim.len() {
            self.state.advance(Phase::Done)?;
        } else {
            self.state.advance(Phase::Failed(FailureReason::InconsistentStore))?;
        }
        Ok(vec![])
    }
}

/// Frame bits per protocol phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct PhaseBits {
    pub count: usize,
    pub check_bits: usize,
    pub feedback: usize,
    pub packages: usize,
    pub control: usize,
}

impl PhaseBits {
    pub fn total(&self) -> usize {
        self.count + self.check_bits + self.feedback + self.packages + self.control
    }

    fn add(&mut self, tag: u8, bits: usize) {
        use crate::wire::*;
        match tag {
            TAG_DEL_COUNT => self.count += bits,
            TAG_CHECK_BITS => self.check_bits += bits,
            TAG_FEEDBACK => self.feedback += bits,
            TAG_PACKAGES | TAG_CHECKSUM => self.packages += bits,
            _ => self.control += bits,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconciliationOutcome {
    /// Bob's store equals Alice's after the session.
    pub success: bool,
    pub alice_phase: Phase,
    pub bob_phase: Phase,
    pub d: usize,
    /// Weight of the final (intersected) mask.
    pub d_hat: Option<usize>,
    pub mask: Option<DeletionMask>,
    pub fallbacks: Vec<Fallback>,
    pub feedback_scheme: Option<FeedbackScheme>,
    pub feedback_model_bits: Option<usize>,
    pub bits: PhaseBits,
    /// Packages (or checksum packages) Alice sent.
    pub packages_sent: usize,
    pub transcript: Vec<TranscriptEntry>,
    pub bob_store: PackageStore,
}

/// Runs a full session between the two stores.
pub fn run_session(
    alice_store: &PackageStore,
    bob_store: PackageStore,
    cfg: &SessionConfig,
) -> Result<ReconciliationOutcome> {
    cfg.validate()?;
    if alice_store.len() != cfg.dim.len() || alice_store.package_bits() != cfg.package_bits {
        return Err(Error::Contract("Alice's store does not match the session dimensions".into()));
    }
    let mut alice = Alice::new(alice_store, cfg);
    let mut bob = Bob::new(bob_store, cfg);
    let mut queue: VecDeque<(Role, Message)> = VecDeque::new();
    let mut transcript = Vec::new();
    let mut bits = PhaseBits::default();
    let mut packages_sent = 0;

    let first = match bob.start() {
        Ok(m) => m,
        Err(_) => vec![Message::Abort(AbortReason::InconsistentStore)],
    };
    queue.extend(first.into_iter().map(|m| (Role::Bob, m)));

    while let Some((from, msg)) = queue.pop_front() {
        let frame = msg.encode()?;
        bits.add(msg.tag(), frame.len() * 8);
        match &msg {
            Message::Packages(p) => packages_sent += p.len(),
            Message::Checksum(_) => packages_sent += 1,
            _ => {}
        }
        transcript.push(TranscriptEntry { from, frame: frame.clone() });
        let ctx = cfg.wire_context(Some(bob.deletions()));
        let parsed = Message::decode(&frame, &ctx)?;
        let replies = match from {
            Role::Bob => {
                bob.state.sent.push(frame.clone());
                alice.state.received.push(frame);
                alice.handle(parsed)?
            }
            Role::Alice => {
                alice.state.sent.push(frame.clone());
                bob.state.received.push(frame);
                bob.handle(parsed)?
            }
        };
        let to = match from {
            Role::Bob => Role::Alice,
            Role::Alice => Role::Bob,
        };
        queue.extend(replies.into_iter().map(|m| (to, m)));
    }

    let success = bob.store() == alice_store;
    Ok(ReconciliationOutcome {
        success,
        alice_phase: alice.state.phase,
        bob_phase: bob.state.phase,
        d: bob.deletions(),
        d_hat: bob.mask.as_ref().map(DeletionMask::weight),
        mask: bob.mask.clone(),
        fallbacks: bob.fallbacks.clone(),
        feedback_scheme: bob.feedback_scheme,
        feedback_model_bits: bob.feedback_model_bits,
        bits,
        packages_sent,
        transcript,
        bob_store: bob.store,
    })
}

/// How to build the code specs for one `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provisioning {
    pub reliability_trials: u64,
    pub calibration_trials: u64,
    pub target_fer: f64,
    pub source_trials: u64,
    pub seed: u64,
}

impl Default for Provisioning {
    fn default() -> Self {
        Provisioning {
            reliability_trials: 10_000,
            calibration_trials: 2_000,
            target_fer: 0.01,
            source_trials: 10_000,
            seed: 1,
        }
    }
}

/// Estimates (or loads from `cache_dir`) the reliabilities for `d`, picks
/// the smallest `K` meeting the FER target and builds the feedback source
/// code. Returns the calibrated FER estimate.
pub fn provision(
    cfg: &mut SessionConfig,
    d: usize,
    plan: &Provisioning,
    cache_dir: Option<&Path>,
    mode: Execution,
) -> Result<FerEstimate> {
    let n = cfg.dim.len();
    if d == 0 || d >= n {
        return Err(Error::Domain(format!("no code is needed for d = {} at N = {}", d, n)));
    }
    let table = cached_reliabilities(cache_dir, cfg.dim, d, plan.reliability_trials, plan.seed, mode)?;
    let (k, fer) = calibrate_k(&table, plan.target_fer, plan.calibration_trials, plan.seed ^ 0x5eed, mode)?;
    cfg.code_specs.insert(d, DeletionCodeSpec::new(&table, k)?);
    let p = (2 * d) as f64 / n as f64;
    if p < 0.5 {
        let source = build_source_spec(cfg.dim, p, SizingRule::min_cost(cfg.dim), plan.source_trials, plan.seed, mode)?;
        cfg.source_specs.insert(d, source);
    }
    Ok(fer)
}

/// Synthetic stores: `n` uniformly random packages of `package_bits` bits
/// with increasing keys, and a copy missing a uniformly random `d`-subset.
pub fn synthetic_stores(
    n: usize,
    package_bits: usize,
    d: usize,
    seed: u64,
) -> Result<(PackageStore, PackageStore, DeletionPattern)> {
    if d > n {
        return Err(Error::Domain(format!("{} deletions from {} packages", d, n)));
    }
    let mut rng = trial_rng(seed, 0);
    let mut key = 0u64;
    let packages: Vec<Package> = (0..n)
        .map(|_| {
            key += rng.gen_range(1..1000);
            Package { order_key: key, payload: BitVec::from_bools((0..package_bits).map(|_| rng.gen::<bool>())) }
        })
        .collect();
    let pattern = DeletionPattern::random(n, d, &mut rng);
    let bob = pattern.apply(&packages);
    Ok((PackageStore::new(packages, package_bits)?, PackageStore::new(bob, package_bits)?, pattern))
}

/// The eight-package, two-deletion example: column 0 of Alice's store is
/// `01011010`, Bob misses the third and sixth packages (1-based).
pub fn example_stores() -> (PackageStore, PackageStore) {
    let rows = ["0110", "1011", "0001", "1100", "1111", "0010", "1001", "0100"];
    let packages: Vec<Package> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| Package { order_key: 100 * (i as u64 + 1), payload: r.parse().unwrap() })
        .collect();
    let bob: Vec<Package> =
        packages.iter().enumerate().filter(|(i, _)| *i != 2 && *i != 5).map(|(_, p)| p.clone()).collect();
    (PackageStore::new(packages, 4).unwrap(), PackageStore::new(bob, 4).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deletion::ReliabilityTable;

    fn pkg(key: u64, bits: &str) -> Package {
        Package { order_key: key, payload: bits.parse().unwrap() }
    }

    #[test]
    fn deletion_report() {
        let (alice, bob) = example_stores();
        assert_eq!(bob_report_deletions(&bob, 8).unwrap(), 2);
        assert_eq!(bob_report_deletions(&alice, 8).unwrap(), 0);
        assert_eq!(bob_report_deletions(&PackageStore::new(vec![], 4).unwrap(), 8).unwrap(), 8);
        assert!(bob_report_deletions(&alice, 4).is_err());
    }

    #[test]
    fn columns() {
        let (alice, bob) = example_stores();
        assert_eq!(extract_column(&alice, 0).unwrap().to_string(), "01011010");
        assert_eq!(extract_column(&bob, 0).unwrap().to_string(), "011110");
        let one = PackageStore::new(vec![pkg(1, "10")], 2).unwrap();
        assert_eq!(extract_column(&one, 0).unwrap().to_string(), "1");
        assert!(extract_column(&one, 2).is_err());
    }

    #[test]
    fn store_invariants() {
        assert!(PackageStore::new(vec![pkg(2, "1"), pkg(1, "0")], 1).is_err());
        assert!(PackageStore::new(vec![pkg(1, "1"), pkg(2, "00")], 1).is_err());
        let (alice, bob) = example_stores();
        assert!(bob.is_subsequence_of(&alice));
        assert!(!alice.is_subsequence_of(&bob));
    }

    #[test]
    fn checksum_cancellation() {
        let (p1, p2, p3) = (pkg(1, "1100"), pkg(2, "1010"), pkg(3, "0111"));
        assert_eq!(xor_checksum_package(std::slice::from_ref(&p1)).unwrap(), p1);
        let c = xor_checksum_package(&[p1.clone(), p2.clone(), p3.clone()]).unwrap();
        assert_eq!(recover_from_checksum(&c, &[p1.clone(), p3.clone()], 3).unwrap(), p2);
        assert!(recover_from_checksum(&c, &[p1], 3).is_err());
        assert!(xor_checksum_package(&[]).is_err());
    }

    fn perfect_config(d: usize) -> SessionConfig {
        let dim = PolarDimension::from_len(8).unwrap();
        let mut cfg = SessionConfig::new(dim, 4);
        // K = N: every bit is a check bit, so decoding is exact
        let table = ReliabilityTable { dim, d, trials: 1, seed: 0, error_probs: vec![0.5; 8] };
        cfg.code_specs.insert(d, DeletionCodeSpec::new(&table, 8).unwrap());
        cfg.feedback = FeedbackPolicy::Direct;
        cfg
    }

    #[test]
    fn worked_example_session() {
        let (alice, bob) = example_stores();
        let out = run_session(&alice, bob, &perfect_config(2)).unwrap();
        assert!(out.success);
        assert_eq!(out.mask.unwrap().bits().to_string(), "00100100");
        assert_eq!(out.packages_sent, 2);
        let last = out.transcript.last().unwrap();
        let msg = Message::decode(&last.frame, &WireContext { package_bits: 4, feedback_payload_bits: None }).unwrap();
        match msg {
            Message::Packages(p) => assert_eq!(p.iter().map(|p| p.order_key).collect::<Vec<_>>(), vec![300, 600]),
            other => panic!("unexpected {:?}", other),
        }
        assert_eq!(out.alice_phase, Phase::Done);
        assert_eq!(out.bob_phase, Phase::Done);
    }

    #[test]
    fn no_deletions_is_one_message() {
        let (alice, _) = example_stores();
        let out = run_session(&alice, alice.clone(), &perfect_config(2)).unwrap();
        assert!(out.success);
        assert_eq!(out.transcript.len(), 1);
        assert_eq!(out.bits.total(), out.bits.count);
        assert_eq!(out.d_hat, None);
    }

    #[test]
    fn empty_bob_gets_everything() {
        let (alice, _) = example_stores();
        let out = run_session(&alice, PackageStore::new(vec![], 4).unwrap(), &perfect_config(2)).unwrap();
        assert!(out.success);
        assert_eq!(out.fallbacks, vec![Fallback::FullTransfer]);
        assert_eq!(out.packages_sent, 8);
    }

    #[test]
    fn missing_code_falls_back_to_full_transfer() {
        let (alice, bob) = example_stores();
        let out = run_session(&alice, bob, &perfect_config(3)).unwrap();
        assert!(out.success);
        assert_eq!(out.fallbacks, vec![Fallback::FullTransfer]);
    }

    #[test]
    fn failed_decode_retries_then_goes_raw() {
        let (alice, bob) = example_stores();
        let dim = PolarDimension::from_len(8).unwrap();
        let mut cfg = SessionConfig::new(dim, 4);
        // no check bits at all: decoding almost surely misses the digest
        let table = ReliabilityTable { dim, d: 2, trials: 1, seed: 0, error_probs: vec![0.0; 8] };
        cfg.code_specs.insert(2, DeletionCodeSpec::new(&table, 0).unwrap());
        let out = run_session(&alice, bob, &cfg).unwrap();
        assert!(out.success);
        assert!(matches!(out.fallbacks[0], Fallback::RetryColumn { failed: 0, next: 1 }));
        assert!(out.fallbacks.iter().any(|f| matches!(f, Fallback::RawColumn { .. })) || out.fallbacks.len() == 1);
    }

    #[test]
    fn enumeration_overflow_is_reported() {
        let (alice, bob) = example_stores();
        let mut cfg = perfect_config(2);
        cfg.alignment = AlignmentMethod::Enumerate { cap: 0 };
        let out = run_session(&alice, bob, &cfg).unwrap();
        assert!(out.success);
        assert_eq!(out.fallbacks, vec![Fallback::AlignmentOverflow { column: 0 }]);
    }

    #[test]
    fn single_deletion_uses_checksum() {
        let (alice, mut bob_pkgs, _) = synthetic_stores(8, 6, 0, 3).unwrap();
        let _ = &mut bob_pkgs;
        let bob: Vec<Package> =
            alice.packages().iter().enumerate().filter(|(i, _)| *i != 4).map(|(_, p)| p.clone()).collect();
        let bob = PackageStore::new(bob, 6).unwrap();
        let mut cfg = perfect_config(1);
        cfg.package_bits = 6;
        let out = run_session(&alice, bob, &cfg).unwrap();
        assert!(out.success);
        assert_eq!(out.packages_sent, 1);
        assert_eq!(out.bits.packages, (4 + 1 + 8 + 1) * 8);
    }

    #[test]
    fn phases_only_move_forward() {
        let mut s = SessionState::new(Role::Bob, Phase::AwaitPackages);
        assert!(s.advance(Phase::AwaitCheckBits).is_err());
        s.advance(Phase::Failed(FailureReason::Protocol)).unwrap();
        assert!(s.advance(Phase::Done).is_err());
    }
}
