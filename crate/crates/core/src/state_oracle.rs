//! Executable deque-state rules.
//!
//! An [`AuthState`] is the authoritative view of a deque at one instant: the
//! whole current buffer plus top and bottom, tagged with the era (one era per
//! physical array). A trace is the sequence of authoritative states an
//! execution passes through; [`validate_trace`] checks that every step is one
//! of five permitted transitions and that the top-element preservation
//! property holds between every earlier snapshot and every later state.
//!
//! While the owner is inside `pop` between decrementing the bottom and
//! resolving the pop, the authoritative bottom is the pre-decrement value.
//! [`TraceRecorder`] applies that rule when it converts physical deque state.

use std::fmt;
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Error, Value};

/// Encodes top and non-emptiness in one monotone number: `2t + 1` when
/// `t < b`, `2t` when `t = b`.
pub fn tbs(top: u64, bottom: u64) -> Result<u64, Error> {
    if top == 0 || top > bottom {
        return Err(Error::IndexOrder { top, bottom });
    }
    Ok(2 * top + u64::from(top < bottom))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AuthState {
    pub era: u64,
    pub array_id: u64,
    pub contents: Vec<Value>,
    pub top: u64,
    pub bottom: u64,
}

impl AuthState {
    /// The state of a freshly allocated deque.
    pub fn initial(capacity: usize) -> Self {
        Self { era: 0, array_id: 0, contents: vec![0; capacity], top: 1, bottom: 1 }
    }

    pub fn capacity(&self) -> usize {
        self.contents.len()
    }

    pub fn get(&self, i: u64) -> Value {
        self.contents[(i % self.contents.len() as u64) as usize]
    }

    pub fn top_elem(&self) -> Option<Value> {
        (self.top < self.bottom).then(|| self.get(self.top))
    }

    /// The logical contents, top first.
    pub fn slice(&self) -> Vec<Value> {
        (self.top..self.bottom).map(|i| self.get(i)).collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            era: self.era,
            array_id: self.array_id,
            top: self.top,
            bottom: self.bottom,
            top_elem: self.top_elem(),
        }
    }

    /// `1 <= top <= bottom < top + capacity`.
    pub fn check_invariant(&self) -> Result<(), Violation> {
        let cap = self.contents.len() as u64;
        if cap == 0 || self.top == 0 || self.top > self.bottom || self.bottom >= self.top + cap {
            return Err(Violation::Invariant { top: self.top, bottom: self.bottom, capacity: cap });
        }
        Ok(())
    }

    fn tbs(&self) -> u64 {
        2 * self.top + u64::from(self.top < self.bottom)
    }
}

/// Persistent knowledge of a past state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Snapshot {
    pub era: u64,
    pub array_id: u64,
    pub top: u64,
    pub bottom: u64,
    pub top_elem: Option<Value>,
}

/// Whether `newer` may follow `older`: top never decreases, and while it is
/// unchanged a non-empty deque stays non-empty with the same top element.
pub fn snapshot_valid(older: &Snapshot, newer: &Snapshot) -> bool {
    if older.top > newer.top {
        return false;
    }
    if older.top == newer.top && older.top < older.bottom {
        return newer.top < newer.bottom && older.top_elem == newer.top_elem;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    /// Owner writes the slot at the bottom index.
    WriteArray,
    /// Bottom advances by one; requires `b + 1 < t + capacity`.
    Push,
    /// Bottom retreats by one; requires `t < b - 1`.
    Pop,
    /// Top advances by one; requires `t < b`.
    CasTop,
    /// A new era with a larger array that agrees on `[t, b)`.
    Archive,
}

impl TransitionKind {
    pub fn name(self) -> &'static str {
        match self {
            TransitionKind::WriteArray => "write_array",
            TransitionKind::Push => "push",
            TransitionKind::Pop => "pop",
            TransitionKind::CasTop => "cas_top",
            TransitionKind::Archive => "archive",
        }
    }
}

impl fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace must start with top = bottom = 1, found top {top}, bottom {bottom}")]
    NotInitial { top: u64, bottom: u64 },
    #[error("invariant 1 <= top <= bottom < top + capacity broken: top {top}, bottom {bottom}, capacity {capacity}")]
    Invariant { top: u64, bottom: u64, capacity: u64 },
    #[error("top monotonicity violated: top went from {from} to {to}")]
    TopDecreased { from: u64, to: u64 },
    #[error("tbs monotonicity violated: {from} -> {to}")]
    TbsDecreased { from: u64, to: u64 },
    #[error("archive: era must advance ({from} -> {to})")]
    EraNotAdvanced { from: u64, to: u64 },
    #[error("archive: a new era needs a new array")]
    ArrayReused,
    #[error("archive: capacity shrank from {from} to {to}")]
    ArchiveShrink { from: usize, to: usize },
    #[error("archive: top and bottom must be unchanged")]
    ArchiveIndices,
    #[error("archive: slice [top, bottom) differs at index {index}")]
    ArchiveSlice { index: u64 },
    #[error("array changed within era {era} (array id {from} -> {to})")]
    ArrayChangedWithinEra { era: u64, from: u64, to: u64 },
    #[error("write_array: top and bottom must be unchanged by an array write")]
    WriteFrame,
    #[error("write_array: slot {slot} written, only the bottom slot {bottom_slot} may change")]
    WriteOutsideBottom { slot: usize, bottom_slot: usize },
    #[error("push: requires bottom + 1 < top + capacity (top {top}, bottom {bottom}, capacity {capacity})")]
    PushFull { top: u64, bottom: u64, capacity: u64 },
    #[error("pop: requires top < bottom - 1 (top {top}, bottom {bottom})")]
    PopTooShort { top: u64, bottom: u64 },
    #[error("cas_top: requires top < bottom (top {top}, bottom {bottom})")]
    CasEmpty { top: u64, bottom: u64 },
    #[error("no rule moves top by {top_delta} and bottom by {bottom_delta}")]
    NoRule { top_delta: i128, bottom_delta: i128 },
    #[error("preservation violated against the snapshot at step {since}")]
    Preservation { since: usize },
}

impl Violation {
    /// Short name of the rule or property that failed.
    pub fn rule(&self) -> &'static str {
        use Violation::*;
        match self {
            EmptyTrace | NotInitial { .. } => "initial",
            Invariant { .. } => "invariant",
            TopDecreased { .. } => "top_monotonicity",
            TbsDecreased { .. } => "tbs_monotonicity",
            EraNotAdvanced { .. } | ArrayReused | ArchiveShrink { .. } | ArchiveIndices | ArchiveSlice { .. } => {
                "archive"
            }
            ArrayChangedWithinEra { .. } | NoRule { .. } => "no_rule",
            WriteFrame | WriteOutsideBottom { .. } => "write_array",
            PushFull { .. } => "push",
            PopTooShort { .. } => "pop",
            CasEmpty { .. } => "cas_top",
            Preservation { .. } => "preservation",
        }
    }
}

fn delta(from: u64, to: u64) -> i128 {
    i128::from(to) - i128::from(from)
}

/// Classifies `prev -> next` as exactly one rule, checking the rule's side
/// condition and that nothing else changed.
pub fn transition_check(prev: &AuthState, next: &AuthState) -> Result<TransitionKind, Violation> {
    prev.check_invariant()?;
    if next.top < prev.top {
        return Err(Violation::TopDecreased { from: prev.top, to: next.top });
    }
    let kind = if next.era != prev.era {
        if next.era < prev.era {
            return Err(Violation::EraNotAdvanced { from: prev.era, to: next.era });
        }
        if next.array_id == prev.array_id {
            return Err(Violation::ArrayReused);
        }
        if next.capacity() < prev.capacity() {
            return Err(Violation::ArchiveShrink { from: prev.capacity(), to: next.capacity() });
        }
        if (next.top, next.bottom) != (prev.top, prev.bottom) {
            return Err(Violation::ArchiveIndices);
        }
        if let Some(index) = (prev.top..prev.bottom).find(|&i| prev.get(i) != next.get(i)) {
            return Err(Violation::ArchiveSlice { index });
        }
        TransitionKind::Archive
    } else if next.array_id != prev.array_id || next.capacity() != prev.capacity() {
        return Err(Violation::ArrayChangedWithinEra { era: prev.era, from: prev.array_id, to: next.array_id });
    } else if next.contents != prev.contents {
        if (next.top, next.bottom) != (prev.top, prev.bottom) {
            return Err(Violation::WriteFrame);
        }
        let bottom_slot = (prev.bottom % prev.capacity() as u64) as usize;
        if let Some(slot) = (0..prev.capacity()).find(|&k| k != bottom_slot && prev.contents[k] != next.contents[k]) {
            return Err(Violation::WriteOutsideBottom { slot, bottom_slot });
        }
        TransitionKind::WriteArray
    } else {
        let (t, b, cap) = (prev.top, prev.bottom, prev.capacity() as u64);
        match (delta(t, next.top), delta(b, next.bottom)) {
            // Writing back the value a slot already holds.
            (0, 0) => TransitionKind::WriteArray,
            (0, 1) if b + 1 < t + cap => TransitionKind::Push,
            (0, 1) => return Err(Violation::PushFull { top: t, bottom: b, capacity: cap }),
            (0, -1) if t + 1 < b => TransitionKind::Pop,
            (0, -1) => return Err(Violation::PopTooShort { top: t, bottom: b }),
            (1, 0) if t < b => TransitionKind::CasTop,
            (1, 0) => return Err(Violation::CasEmpty { top: t, bottom: b }),
            (top_delta, bottom_delta) => return Err(Violation::NoRule { top_delta, bottom_delta }),
        }
    };
    next.check_invariant()?;
    Ok(kind)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceFailure {
    /// Index of the offending state.
    pub index: usize,
    pub violation: Violation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceReport {
    /// One entry per accepted step, `kinds[i]` classifying `trace[i] -> trace[i + 1]`.
    pub kinds: Vec<TransitionKind>,
    pub failure: Option<TraceFailure>,
}

impl TraceReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn count(&self, kind: TransitionKind) -> usize {
        self.kinds.iter().filter(|k| **k == kind).count()
    }
}

/// Incremental form of [`validate_trace`], for checkers that grow a trace
/// one state at a time.
#[derive(Debug, Clone)]
pub struct TraceValidator {
    last: AuthState,
    steps: usize,
    /// Earliest non-empty snapshot at the current top, with its step.
    anchor: Option<(usize, Snapshot)>,
}

impl TraceValidator {
    pub fn start(initial: &AuthState) -> Result<Self, Violation> {
        initial.check_invariant()?;
        if (initial.top, initial.bottom) != (1, 1) {
            return Err(Violation::NotInitial { top: initial.top, bottom: initial.bottom });
        }
        Ok(Self { last: initial.clone(), steps: 0, anchor: None })
    }

    pub fn last(&self) -> &AuthState {
        &self.last
    }

    pub fn step(&mut self, next: &AuthState) -> Result<TransitionKind, Violation> {
        let kind = transition_check(&self.last, next)?;
        let (from, to) = (self.last.tbs(), next.tbs());
        if to < from {
            return Err(Violation::TbsDecreased { from, to });
        }
        // Every earlier snapshot at a lower top is trivially satisfied; at the
        // same top the earliest non-empty one subsumes the rest.
        let snap = next.snapshot();
        if self.anchor.is_some_and(|(_, a)| a.top != snap.top) {
            self.anchor = None;
        }
        if let Some((since, anchor)) = self.anchor {
            if !snapshot_valid(&anchor, &snap) {
                return Err(Violation::Preservation { since });
            }
        }
        self.steps += 1;
        if self.anchor.is_none() && snap.top < snap.bottom {
            self.anchor = Some((self.steps, snap));
        }
        self.last = next.clone();
        Ok(kind)
    }
}

/// Checks a whole trace: it starts at `top = bottom = 1`, every step is a
/// permitted transition, tbs never decreases, and every earlier snapshot is
/// valid against every later state.
pub fn validate_trace(trace: &[AuthState]) -> TraceReport {
    let mut report = TraceReport::default();
    let Some(first) = trace.first() else {
        report.failure = Some(TraceFailure { index: 0, violation: Violation::EmptyTrace });
        return report;
    };
    let mut validator = match TraceValidator::start(first) {
        Ok(v) => v,
        Err(violation) => {
            report.failure = Some(TraceFailure { index: 0, violation });
            return report;
        }
    };
    for (index, state) in trace.iter().enumerate().skip(1) {
        match validator.step(state) {
            Ok(kind) => report.kinds.push(kind),
            Err(violation) => {
                report.failure = Some(TraceFailure { index, violation });
                break;
            }
        }
    }
    report
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub era: u64,
    pub arr: u64,
    pub cap: u64,
    pub top: u64,
    pub bot: u64,
    pub write: Option<WriteRecord>,
    pub kind_hint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRecord {
    pub idx: u64,
    pub val: Value,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace file is empty")]
    Empty,
    #[error("record {index}: {source}")]
    Json { index: usize, source: serde_json::Error },
    #[error("record {index}: seq must strictly increase")]
    Seq { index: usize },
    #[error("record {index}: capacity must be at least 1")]
    ZeroCapacity { index: usize },
    #[error("record {index}: capacity changed within era {era}")]
    CapacityChanged { index: usize, era: u64 },
    #[error("state {index}: array changes must be a single slot write or an archive")]
    Unrepresentable { index: usize },
}

/// Rebuilds authoritative states from trace records. Contents start zeroed;
/// a record in a new era starts from a zeroed array holding the previous
/// array's `[top, bottom)` slice; then the record's write, if any, applies.
pub fn states_from_records(records: &[TraceRecord]) -> Result<Vec<AuthState>, TraceError> {
    let mut states: Vec<AuthState> = Vec::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        if r.cap == 0 {
            return Err(TraceError::ZeroCapacity { index });
        }
        if index > 0 && r.seq <= records[index - 1].seq {
            return Err(TraceError::Seq { index });
        }
        let cap = r.cap as usize;
        let mut contents = match states.last() {
            None => vec![0; cap],
            Some(prev) if prev.era == r.era => {
                if prev.capacity() != cap {
                    return Err(TraceError::CapacityChanged { index, era: r.era });
                }
                prev.contents.clone()
            }
            Some(prev) => carried_over(prev, cap, r.top, r.bot),
        };
        if let Some(w) = r.write {
            contents[(w.idx % r.cap) as usize] = w.val;
        }
        states.push(AuthState { era: r.era, array_id: r.arr, contents, top: r.top, bottom: r.bot });
    }
    Ok(states)
}

/// A zeroed array of `cap` slots holding `prev`'s slice `[top, bottom)`.
fn carried_over(prev: &AuthState, cap: usize, top: u64, bottom: u64) -> Vec<Value> {
    let mut fresh = vec![0; cap];
    let len = bottom.saturating_sub(top).min(prev.capacity() as u64);
    for i in top..top + len {
        fresh[(i % cap as u64) as usize] = prev.get(i);
    }
    fresh
}

/// Parses newline-delimited JSON trace records. Blank lines are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<AuthState>, TraceError> {
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let index = records.len();
        let record = serde_json::from_str(line).map_err(|source| TraceError::Json { index, source })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(TraceError::Empty);
    }
    states_from_records(&records)
}

/// Inverse of [`states_from_records`] for traces whose steps are single
/// writes, index moves, or archives.
pub fn records_from_states(states: &[AuthState]) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::with_capacity(states.len());
    for (index, s) in states.iter().enumerate() {
        let (write, hint) = match index.checked_sub(1).map(|i| &states[i]) {
            None => {
                let written: Vec<usize> = (0..s.capacity()).filter(|&k| s.contents[k] != 0).collect();
                match written[..] {
                    [] => (None, Some("init".to_string())),
                    _ => return Err(TraceError::Unrepresentable { index }),
                }
            }
            Some(prev) => {
                let hint = transition_check(prev, s).ok().map(|k| k.name().to_string());
                if prev.era != s.era {
                    if carried_over(prev, s.capacity(), s.top, s.bottom) != s.contents {
                        return Err(TraceError::Unrepresentable { index });
                    }
                    (None, hint)
                } else {
                    let diffs: Vec<usize> =
                        (0..s.capacity().min(prev.capacity())).filter(|&k| prev.contents[k] != s.contents[k]).collect();
                    match diffs[..] {
                        [] => (None, hint),
                        [k] => {
                            let cap = s.capacity() as u64;
                            let idx = if s.bottom % cap == k as u64 { s.bottom } else { k as u64 };
                            (Some(WriteRecord { idx, val: s.contents[k] }), hint)
                        }
                        _ => return Err(TraceError::Unrepresentable { index }),
                    }
                }
            }
        };
        out.push(record(index as u64, s, write, hint));
    }
    Ok(out)
}

fn record(seq: u64, s: &AuthState, write: Option<WriteRecord>, kind_hint: Option<String>) -> TraceRecord {
    TraceRecord {
        seq,
        era: s.era,
        arr: s.array_id,
        cap: s.capacity() as u64,
        top: s.top,
        bot: s.bottom,
        write,
        kind_hint,
    }
}

/// Renders states as trace-file text, one JSON record per line.
pub fn render_trace(states: &[AuthState]) -> Result<String, TraceError> {
    let mut out = String::new();
    for r in records_from_states(states)? {
        out.push_str(&serde_json::to_string(&r).expect("trace records always serialize"));
        out.push('\n');
    }
    Ok(out)
}

/// The physical state of a deque, read while the recorder lock is held.
#[derive(Debug, Clone)]
pub struct PhysicalState {
    pub top: u64,
    pub bottom: u64,
    /// Identity of the current array (its address).
    pub array_key: usize,
    pub contents: Vec<Value>,
}

#[derive(Debug, Default)]
struct RecorderInner {
    states: Vec<AuthState>,
    pop_pending: bool,
    array_key: Option<usize>,
}

/// Collects the authoritative states of an instrumented deque. The deque
/// holds the lock across each shared-memory transition and the matching
/// [`RecorderGuard::observe`], so states appear in the order they took effect.
#[derive(Debug, Default)]
pub struct TraceRecorder {
    inner: Mutex<RecorderInner>,
}

impl TraceRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lock(&self) -> RecorderGuard<'_> {
        RecorderGuard(self.inner.lock().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn states(&self) -> Vec<AuthState> {
        self.lock().0.states.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().0.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct RecorderGuard<'a>(MutexGuard<'a, RecorderInner>);

impl RecorderGuard<'_> {
    /// The owner has decremented bottom at the start of a pop.
    pub fn begin_pop(&mut self) {
        self.0.pop_pending = true;
    }

    /// The owner's pop has committed to a branch or restored bottom.
    pub fn end_pop(&mut self) {
        self.0.pop_pending = false;
    }

    /// Appends the authoritative state for `phys` if it differs from the last.
    pub fn observe(&mut self, phys: PhysicalState) {
        let inner = &mut *self.0;
        let (era, array_id) = match (inner.states.last(), inner.array_key) {
            (Some(last), Some(key)) if key == phys.array_key => (last.era, last.array_id),
            (Some(last), _) => (last.era + 1, last.array_id + 1),
            (None, _) => (0, 0),
        };
        inner.array_key = Some(phys.array_key);
        let state = AuthState {
            era,
            array_id,
            contents: phys.contents,
            top: phys.top,
            bottom: phys.bottom + u64::from(inner.pop_pending),
        };
        if inner.states.last() != Some(&state) {
            inner.states.push(state);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(contents: &[Value], top: u64, bottom: u64) -> AuthState {
        AuthState { era: 0, array_id: 0, contents: contents.to_vec(), top, bottom }
    }

    fn snap(top: u64, bottom: u64, top_elem: Option<Value>) -> Snapshot {
        Snapshot { era: 0, array_id: 0, top, bottom, top_elem }
    }

    #[test]
    fn tbs_values() {
        assert_eq!(tbs(1, 1), Ok(2));
        assert_eq!(tbs(1, 2), Ok(3));
        assert_eq!(tbs(3, 5), Ok(7));
        assert_eq!(tbs(3, 3), Ok(6));
        assert!(tbs(3, 3).unwrap() < tbs(3, 5).unwrap());
        assert_eq!(tbs(4, 3), Err(Error::IndexOrder { top: 4, bottom: 3 }));
    }

    #[test]
    fn snapshot_validity_examples() {
        let v = 42;
        assert!(snapshot_valid(&snap(2, 3, Some(v)), &snap(2, 3, Some(v))));
        assert!(!snapshot_valid(&snap(2, 3, Some(v)), &snap(2, 2, None)));
        assert!(snapshot_valid(&snap(2, 3, Some(v)), &snap(3, 3, None)));
        assert!(!snapshot_valid(&snap(2, 3, Some(v)), &snap(2, 4, Some(v + 1))));
        assert!(!snapshot_valid(&snap(3, 3, None), &snap(2, 3, Some(v))));
    }

    #[test]
    fn classifies_each_rule() {
        let l = [0, 0];
        assert_eq!(transition_check(&state(&l, 1, 1), &state(&l, 1, 2)), Ok(TransitionKind::Push));
        assert_eq!(transition_check(&state(&l, 1, 2), &state(&l, 2, 2)), Ok(TransitionKind::CasTop));
        assert_eq!(transition_check(&state(&[0, 0, 0], 1, 3), &state(&[0, 0, 0], 1, 2)), Ok(TransitionKind::Pop));
        assert_eq!(transition_check(&state(&[0, 0], 1, 1), &state(&[0, 7], 1, 1)), Ok(TransitionKind::WriteArray));
        let old = state(&[0, 5], 1, 2);
        let grown = AuthState { era: 1, array_id: 1, contents: vec![0, 5, 0, 0], top: 1, bottom: 2 };
        assert_eq!(transition_check(&old, &grown), Ok(TransitionKind::Archive));
    }

    #[test]
    fn rejects_side_condition_failures() {
        let l = [0, 0];
        assert!(matches!(transition_check(&state(&l, 1, 2), &state(&l, 1, 3)), Err(Violation::PushFull { .. })));
        assert!(matches!(
            transition_check(&state(&[0, 0, 0], 1, 2), &state(&[0, 0, 0], 1, 1)),
            Err(Violation::PopTooShort { .. })
        ));
        assert!(matches!(transition_check(&state(&l, 1, 1), &state(&l, 2, 2)), Err(Violation::NoRule { .. })));
        assert!(matches!(
            transition_check(&state(&[0; 4], 1, 1), &state(&[0; 4], 1, 3)),
            Err(Violation::NoRule { top_delta: 0, bottom_delta: 2 })
        ));
        assert!(matches!(
            transition_check(&state(&[0; 4], 2, 3), &state(&[0; 4], 1, 3)),
            Err(Violation::TopDecreased { from: 2, to: 1 })
        ));
        assert!(matches!(
            transition_check(&state(&[0; 4], 1, 2), &state(&[9, 0, 0, 0], 1, 2)),
            Err(Violation::WriteOutsideBottom { slot: 0, bottom_slot: 2 })
        ));
        let old = state(&[0, 5], 1, 2);
        let bad = AuthState { era: 1, array_id: 1, contents: vec![0, 6, 0, 0], top: 1, bottom: 2 };
        assert_eq!(transition_check(&old, &bad), Err(Violation::ArchiveSlice { index: 1 }));
        let shrunk = AuthState { era: 1, array_id: 1, contents: vec![5], top: 1, bottom: 2 };
        assert!(matches!(transition_check(&old, &shrunk), Err(Violation::ArchiveShrink { .. })));
    }

    #[test]
    fn trace_of_push_then_steal() {
        let trace = vec![
            state(&[0, 0, 0, 0], 1, 1),
            state(&[0, 7, 0, 0], 1, 1),
            state(&[0, 7, 0, 0], 1, 2),
            state(&[0, 7, 0, 0], 2, 2),
        ];
        let report = validate_trace(&trace);
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.kinds, vec![TransitionKind::WriteArray, TransitionKind::Push, TransitionKind::CasTop]);
    }

    #[test]
    fn trace_must_start_empty_at_one() {
        let report = validate_trace(&[state(&[0, 0], 2, 2)]);
        assert_eq!(report.failure.unwrap().violation, Violation::NotInitial { top: 2, bottom: 2 });
        assert_eq!(validate_trace(&[]).failure.unwrap().violation, Violation::EmptyTrace);
    }

    #[test]
    fn trace_with_bottom_jump_fails_at_that_step() {
        let trace = vec![state(&[0; 4], 1, 1), state(&[0; 4], 1, 2), state(&[0; 4], 1, 4)];
        let report = validate_trace(&trace);
        assert_eq!(report.failure.unwrap().index, 2);
        assert_eq!(report.kinds, vec![TransitionKind::Push]);
    }

    #[test]
    fn file_round_trip_with_archive() {
        let trace = vec![
            state(&[0, 0], 1, 1),
            state(&[0, 7], 1, 1),
            state(&[0, 7], 1, 2),
            AuthState { era: 1, array_id: 1, contents: vec![0, 7, 0, 0], top: 1, bottom: 2 },
            AuthState { era: 1, array_id: 1, contents: vec![0, 7, 8, 0], top: 1, bottom: 2 },
            AuthState { era: 1, array_id: 1, contents: vec![0, 7, 8, 0], top: 1, bottom: 3 },
        ];
        let text = render_trace(&trace).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().nth(1).unwrap().contains(r#""write":{"idx":1,"val":7}"#));
        assert!(text.lines().nth(3).unwrap().contains(r#""kind_hint":"archive""#));
        assert_eq!(parse_trace(&text).unwrap(), trace);
        assert!(validate_trace(&trace).passed());
    }

    #[test]
    fn parse_errors_carry_the_record_index() {
        assert!(matches!(parse_trace(""), Err(TraceError::Empty)));
        let good = r#"{"seq":0,"era":0,"arr":0,"cap":2,"top":1,"bot":1,"write":null,"kind_hint":null}"#;
        let text = format!("{good}\n{{not json}}\n");
        assert!(matches!(parse_trace(&text), Err(TraceError::Json { index: 1, .. })));
        let text = format!("{good}\n{good}\n");
        assert!(matches!(parse_trace(&text), Err(TraceError::Seq { index: 1 })));
    }

    #[test]
    fn recorder_holds_pre_decrement_bottom_while_popping() {
        let rec = TraceRecorder::new();
        let phys = |top, bottom| PhysicalState { top, bottom, array_key: 1, contents: vec![0, 5, 6, 0] };
        let mut g = rec.lock();
        g.observe(phys(1, 3));
        g.begin_pop();
        g.observe(phys(1, 2));
        g.end_pop();
        g.observe(phys(1, 2));
        drop(g);
        let states = rec.states();
        assert_eq!(states.len(), 2);
        assert_eq!((states[1].top, states[1].bottom), (1, 2));
    }

    /// Brute-force form of trace validation over all snapshot pairs.
    fn all_pairs_valid(trace: &[AuthState]) -> bool {
        trace
            .iter()
            .enumerate()
            .all(|(i, older)| trace[i..].iter().all(|newer| snapshot_valid(&older.snapshot(), &newer.snapshot())))
    }

    fn arb_trace() -> impl Strategy<Value = Vec<AuthState>> {
        // Random walks over small states; many are invalid, which is the point.
        prop::collection::vec((0u8..5, 0u64..3), 1..12).prop_map(|steps| {
            let mut s = state(&[0; 3], 1, 1);
            let mut out = vec![s.clone()];
            for (op, v) in steps {
                match op {
                    0 => s.bottom += 1,
                    1 => s.bottom = s.bottom.saturating_sub(1).max(s.top),
                    2 => s.top = (s.top + 1).min(s.bottom),
                    3 => {
                        let k = (s.bottom % 3) as usize;
                        s.contents[k] = v;
                    }
                    _ => {
                        let k = (s.top % 3) as usize;
                        s.contents[k] = v;
                    }
                }
                out.push(s.clone());
            }
            out
        })
    }

    proptest! {
        #[test]
        fn linear_snapshot_check_matches_all_pairs(trace in arb_trace()) {
            // Whenever every step is a permitted transition, the linear check
            // and the quadratic all-pairs check agree.
            let steps_ok = trace.windows(2).all(|w| transition_check(&w[0], &w[1]).is_ok());
            prop_assume!(steps_ok);
            prop_assert_eq!(validate_trace(&trace).passed(), all_pairs_valid(&trace));
        }

        #[test]
        fn rules_never_decrease_tbs(trace in arb_trace()) {
            for w in trace.windows(2) {
                if transition_check(&w[0], &w[1]).is_ok() {
                    prop_assert!(w[0].tbs() <= w[1].tbs());
                }
            }
        }
    }

    #[test]
    fn bottom_write_never_moves_the_top_element() {
        // For every valid (t, b) on small capacities, t and b land on
        // different slots whenever t < b.
        for cap in 1..=6u64 {
            for t in 1..=12 {
                for b in t..t + cap {
                    let mut s = AuthState::initial(cap as usize);
                    s.top = t;
                    s.bottom = b;
                    for (k, slot) in s.contents.iter_mut().enumerate() {
                        *slot = 100 + k as u64;
                    }
                    let before = s.top_elem();
                    let mut written = s.clone();
                    written.contents[(b % cap) as usize] = 999;
                    assert_eq!(written.top_elem(), before, "cap {cap} t {t} b {b}");
                    assert_eq!(transition_check(&s, &written), Ok(TransitionKind::WriteArray));
                }
            }
        }
    }
}
