//! The Chase-Lev deque.
//!
//! Shared state is three atomics: a pointer to the current [`RingBuffer`],
//! `top` and `bottom`. Indices start at 1. The logical contents are the
//! circular slice `[top, bottom)` of the current buffer.
//!
//! [`Owner`] is the only handle that can push, pop, write `bottom` or replace
//! the buffer; there is exactly one per deque. [`Stealer`] handles can be
//! cloned freely and only steal. A lost race is reported as `None`, the same
//! as an empty deque.
//!
//! When a push finds the buffer full it publishes a doubled copy and disposes
//! of the old one according to [`Reclamation`]: either kept until the deque is
//! dropped, or retired to a hazard-pointer [`Domain`] that stealers protect
//! the buffer through.

use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering::SeqCst};
use std::sync::{Arc, Mutex};

use crate::reclamation::{Domain, Shield, DEFAULT_SCAN_THRESHOLD};
use crate::ring_buffer::{LiveCounter, RingBuffer};
use crate::state_oracle::{PhysicalState, RecorderGuard, TraceRecorder};
use crate::{Error, Value};

#[cfg(feature = "fault-injection")]
macro_rules! fault {
    ($f:ident) => {
        Fault::$f
    };
}

#[cfg(not(feature = "fault-injection"))]
macro_rules! fault {
    ($f:ident) => {
        ()
    };
}

/// What happens to a buffer after a grow replaces it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reclamation {
    /// Old buffers live until the deque is dropped.
    #[default]
    KeepAll,
    /// Old buffers are retired to a hazard-pointer domain.
    HazardPointers,
}

/// Seeded bugs for mutation testing.
#[cfg(feature = "fault-injection")]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// `pop` reads top before decrementing bottom.
    PopReadsTopFirst,
    /// `steal` reads the slot after its CAS on top.
    StealReadsAfterCas,
    /// `pop` on a single element returns it without the CAS on top.
    PopSkipsCas,
    /// `push` retires the old buffer before publishing the grown one.
    RetireBeforePublish,
    /// An empty `pop` leaves bottom decremented.
    SkipBottomRestore,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub capacity: usize,
    pub reclamation: Reclamation,
    pub scan_threshold: usize,
    /// Receives one authoritative state per shared-memory transition.
    pub recorder: Option<Arc<TraceRecorder>>,
    #[cfg(feature = "fault-injection")]
    pub fault: Option<Fault>,
}

impl Config {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            reclamation: Reclamation::KeepAll,
            scan_threshold: DEFAULT_SCAN_THRESHOLD,
            recorder: None,
            #[cfg(feature = "fault-injection")]
            fault: None,
        }
    }

    pub fn reclamation(mut self, reclamation: Reclamation) -> Self {
        self.reclamation = reclamation;
        self
    }

    pub fn scan_threshold(mut self, threshold: usize) -> Self {
        self.scan_threshold = threshold;
        self
    }

    pub fn recorder(mut self, recorder: Arc<TraceRecorder>) -> Self {
        self.recorder = Some(recorder);
        self
    }

    #[cfg(feature = "fault-injection")]
    pub fn fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn build(self) -> Result<(Owner, Stealer), Error> {
        let live = LiveCounter::default();
        let buffer = RingBuffer::with_counter(self.capacity, 0, Some(live.clone()))?;
        let domain = match self.reclamation {
            Reclamation::KeepAll => None,
            Reclamation::HazardPointers => Some(Arc::new(Domain::with_threshold(self.scan_threshold))),
        };
        let shared = Arc::new(Shared {
            array: AtomicPtr::new(Box::into_raw(Box::new(buffer))),
            top: AtomicU64::new(1),
            bottom: AtomicU64::new(1),
            domain,
            kept: Mutex::new(Vec::new()),
            live,
            grows: AtomicU64::new(0),
            recorder: self.recorder,
            #[cfg(feature = "fault-injection")]
            fault: self.fault,
        });
        shared.step(|| ());
        let stealer = Stealer::new(shared.clone());
        Ok((Owner { shared }, stealer))
    }
}

/// Creates an empty deque with `capacity` slots, keeping retired buffers.
pub fn new_deque(capacity: usize) -> Result<(Owner, Stealer), Error> {
    Config::new(capacity).build()
}

struct Shared {
    array: AtomicPtr<RingBuffer>,
    top: AtomicU64,
    bottom: AtomicU64,
    domain: Option<Arc<Domain>>,
    /// Replaced buffers in keep-all mode. Only the owner pushes here.
    kept: Mutex<Vec<*mut RingBuffer>>,
    live: LiveCounter,
    grows: AtomicU64,
    recorder: Option<Arc<TraceRecorder>>,
    #[cfg(feature = "fault-injection")]
    fault: Option<Fault>,
}

// SAFETY: the raw pointers in `kept` are owned buffers, touched only by the
// owner and by `drop`.
unsafe impl Send for Shared {}
unsafe impl Sync for Shared {}

impl Shared {
    #[cfg(feature = "fault-injection")]
    fn fault(&self, fault: Fault) -> bool {
        self.fault == Some(fault)
    }

    #[cfg(not(feature = "fault-injection"))]
    #[inline(always)]
    fn fault(&self, _: ()) -> bool {
        false
    }

    fn step<R>(&self, action: impl FnOnce() -> R) -> R {
        self.step_with(action, |_, _| {})
    }

    /// Runs one shared-memory action; when tracing, the action, `hook` and
    /// the resulting observation happen under the recorder lock.
    fn step_with<R>(&self, action: impl FnOnce() -> R, hook: impl FnOnce(&mut RecorderGuard, &R)) -> R {
        match &self.recorder {
            None => action(),
            Some(rec) => {
                let mut guard = rec.lock();
                let r = action();
                hook(&mut guard, &r);
                guard.observe(self.physical());
                r
            }
        }
    }

    fn physical(&self) -> PhysicalState {
        let array = self.array.load(SeqCst);
        PhysicalState {
            top: self.top.load(SeqCst),
            bottom: self.bottom.load(SeqCst),
            array_key: array as usize,
            // SAFETY: the published buffer is never freed while published.
            contents: unsafe { &*array }.to_vec(),
        }
    }

    fn cas_top(&self, t: u64) -> bool {
        self.step(|| self.top.compare_exchange(t, t + 1, SeqCst, SeqCst).is_ok())
    }

    fn size_hint(&self) -> usize {
        let b = self.bottom.load(SeqCst);
        let t = self.top.load(SeqCst);
        b.saturating_sub(t) as usize
    }

    /// Disposes of a buffer that is no longer (or, under a seeded fault, not
    /// yet no longer) published.
    fn retire(&self, old: *mut RingBuffer) {
        match &self.domain {
            Some(domain) => {
                let size = unsafe { &*old }.capacity();
                // SAFETY: `old` came from Box::into_raw and is retired once.
                unsafe { domain.retire(old, size) }
            }
            None => self.kept.lock().unwrap().push(old),
        }
    }
}

impl Drop for Shared {
    fn drop(&mut self) {
        // Every handle is gone, so nothing can reach these buffers.
        unsafe {
            drop(Box::from_raw(*self.array.get_mut()));
            for old in self.kept.get_mut().unwrap().drain(..) {
                drop(Box::from_raw(old));
            }
        }
    }
}

/// Counters exposed for tests and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DequeStats {
    pub grows: u64,
    /// Buffers currently allocated, including retired-but-unfreed ones.
    pub live_arrays: usize,
    pub retired_pending: usize,
    pub freed: usize,
}

/// The result of a steal or pop together with the top index it read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observed {
    pub value: Option<Value>,
    pub top: u64,
}

/// The unique push/pop handle.
pub struct Owner {
    shared: Arc<Shared>,
}

impl Owner {
    /// Appends `v` at the bottom, growing the buffer first if it is full.
    pub fn push(&mut self, v: Value) {
        let s = &*self.shared;
        let b = s.step(|| s.bottom.load(SeqCst));
        let t = s.step(|| s.top.load(SeqCst));
        let circle = s.step(|| s.array.load(SeqCst));
        // SAFETY: only the owner retires buffers, and it has not retired this one.
        let sz = unsafe { &*circle }.capacity() as u64;
        if t + sz <= b + 1 {
            let grown = unsafe { &*circle }.grow(t, b).expect("t <= b < t + sz holds for the owner");
            let grown = Box::into_raw(Box::new(grown));
            if s.fault(fault!(RetireBeforePublish)) {
                s.retire(circle);
                s.step(|| s.array.store(grown, SeqCst));
            } else {
                s.step(|| s.array.store(grown, SeqCst));
                s.retire(circle);
            }
            s.grows.fetch_add(1, SeqCst);
        }
        let circle = s.step(|| s.array.load(SeqCst));
        s.step(|| unsafe { &*circle }.set(b, v));
        s.step(|| s.bottom.store(b + 1, SeqCst));
    }

    /// Removes the bottom element. `None` means empty, or that a stealer won
    /// the race for the last element.
    pub fn pop(&mut self) -> Option<Value> {
        self.pop_observed().value
    }

    pub fn pop_observed(&mut self) -> Observed {
        let s = &*self.shared;
        let b = s.step(|| s.bottom.load(SeqCst)) - 1;
        let circle = s.step(|| s.array.load(SeqCst));
        let t = if s.fault(fault!(PopReadsTopFirst)) {
            let t = s.step(|| s.top.load(SeqCst));
            s.step_with(|| s.bottom.store(b, SeqCst), |g, _| g.begin_pop());
            t
        } else {
            s.step_with(|| s.bottom.store(b, SeqCst), |g, _| g.begin_pop());
            s.step_with(
                || s.top.load(SeqCst),
                |g, &t| {
                    if t < b {
                        g.end_pop()
                    }
                },
            )
        };
        if b < t {
            if !s.fault(fault!(SkipBottomRestore)) {
                s.step_with(|| s.bottom.store(t, SeqCst), |g, _| g.end_pop());
            }
            return Observed { value: None, top: t };
        }
        let v = s.step(|| unsafe { &*circle }.get(b));
        if t < b {
            return Observed { value: Some(v), top: t };
        }
        let ok = s.fault(fault!(PopSkipsCas)) || s.cas_top(t);
        s.step_with(|| s.bottom.store(t + 1, SeqCst), |g, _| g.end_pop());
        Observed { value: ok.then_some(v), top: t }
    }

    /// A stealer sharing this deque.
    pub fn stealer(&self) -> Stealer {
        Stealer::new(self.shared.clone())
    }

    pub fn size_hint(&self) -> usize {
        self.shared.size_hint()
    }

    pub fn capacity(&self) -> usize {
        unsafe { &*self.shared.array.load(SeqCst) }.capacity()
    }

    /// Current `(top, bottom)`.
    pub fn indices(&self) -> (u64, u64) {
        (self.shared.top.load(SeqCst), self.shared.bottom.load(SeqCst))
    }

    pub fn reclamation(&self) -> Reclamation {
        if self.shared.domain.is_some() {
            Reclamation::HazardPointers
        } else {
            Reclamation::KeepAll
        }
    }

    /// Runs a reclamation scan; returns buffers freed (always 0 in keep-all mode).
    pub fn collect(&self) -> usize {
        self.shared.domain.as_ref().map_or(0, |d| d.scan())
    }

    pub fn stats(&self) -> DequeStats {
        let s = &self.shared;
        DequeStats {
            grows: s.grows.load(SeqCst),
            live_arrays: s.live.load(SeqCst),
            retired_pending: s.domain.as_ref().map_or(s.kept.lock().unwrap().len(), |d| d.pending()),
            freed: s.domain.as_ref().map_or(0, |d| d.freed_total()),
        }
    }

    pub fn recorder(&self) -> Option<&Arc<TraceRecorder>> {
        self.shared.recorder.as_ref()
    }
}

/// A steal-only handle. Clone it to get one per thread; in hazard-pointer
/// mode each clone owns its own shield, so a single `Stealer` is not `Sync`.
pub struct Stealer {
    shared: Arc<Shared>,
    shield: Option<Shield>,
}

impl Stealer {
    fn new(shared: Arc<Shared>) -> Self {
        let shield = shared.domain.as_ref().map(|d| d.shield());
        Self { shared, shield }
    }

    /// Takes the top element. `None` means empty or a lost race.
    pub fn steal(&self) -> Option<Value> {
        self.steal_observed().value
    }

    pub fn steal_observed(&self) -> Observed {
        let s = &*self.shared;
        let t = s.step(|| s.top.load(SeqCst));
        let b = s.step(|| s.bottom.load(SeqCst));
        let circle = match &self.shield {
            Some(shield) => s.step(|| shield.protect(&s.array)),
            None => s.step(|| s.array.load(SeqCst)),
        };
        if b <= t {
            self.release();
            return Observed { value: None, top: t };
        }
        // SAFETY: kept-all buffers outlive every handle; otherwise the shield
        // protects `circle` until `release`.
        let buffer = unsafe { &*circle };
        if s.fault(fault!(StealReadsAfterCas)) {
            let ok = s.cas_top(t);
            let v = s.step(|| buffer.get(t));
            self.release();
            return Observed { value: ok.then_some(v), top: t };
        }
        let v = s.step(|| buffer.get(t));
        self.release();
        let ok = s.cas_top(t);
        Observed { value: ok.then_some(v), top: t }
    }

    fn release(&self) {
        if let Some(shield) = &self.shield {
            shield.clear();
        }
    }

    pub fn size_hint(&self) -> usize {
        self.shared.size_hint()
    }
}

impl Clone for Stealer {
    fn clone(&self) -> Self {
        Stealer::new(self.shared.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_oracle::{validate_trace, TransitionKind};
    use std::collections::VecDeque;

    #[test]
    fn new_deque_starts_at_one() {
        let (owner, stealer) = new_deque(8).unwrap();
        assert_eq!(owner.indices(), (1, 1));
        assert_eq!(owner.capacity(), 8);
        assert_eq!(stealer.size_hint(), 0);
        assert!(matches!(new_deque(0), Err(Error::ZeroCapacity)));
    }

    #[test]
    fn first_push_on_capacity_one_grows() {
        let (mut owner, _) = new_deque(1).unwrap();
        owner.push(3);
        assert_eq!(owner.capacity(), 2);
        assert_eq!(owner.stats().grows, 1);
        assert_eq!(owner.pop(), Some(3));
    }

    #[test]
    fn push_writes_slot_then_bottom() {
        let (mut owner, _) = new_deque(4).unwrap();
        owner.push(7);
        assert_eq!(owner.indices(), (1, 2));
        assert_eq!(unsafe { &*owner.shared.array.load(SeqCst) }.get(1), 7);
    }

    #[test]
    fn push_into_full_buffer_grows_and_keeps_contents() {
        let (mut owner, stealer) = new_deque(2).unwrap();
        owner.push(5);
        owner.push(9);
        assert_eq!(owner.capacity(), 4);
        assert_eq!(owner.indices(), (1, 3));
        assert_eq!(unsafe { &*owner.shared.array.load(SeqCst) }.get(2), 9);
        assert_eq!(stealer.steal(), Some(5));
        assert_eq!(stealer.steal(), Some(9));
    }

    #[test]
    fn three_pushes() {
        let (mut owner, stealer) = new_deque(8).unwrap();
        for v in 1..=3 {
            owner.push(v);
        }
        assert_eq!(owner.indices(), (1, 4));
        assert_eq!(stealer.size_hint(), 3);
    }

    #[test]
    fn pop_branches() {
        let (mut owner, _) = new_deque(4).unwrap();
        assert_eq!(owner.pop(), None);
        assert_eq!(owner.indices(), (1, 1));

        owner.push(5);
        owner.push(6);
        assert_eq!(owner.pop(), Some(6));
        assert_eq!(owner.indices(), (1, 2));
        assert_eq!(owner.pop(), Some(5));
        assert_eq!(owner.indices(), (2, 2));
    }

    #[test]
    fn steal_takes_from_top() {
        let (mut owner, stealer) = new_deque(4).unwrap();
        assert_eq!(stealer.steal(), None);
        assert_eq!(owner.indices(), (1, 1));
        owner.push(5);
        owner.push(6);
        assert_eq!(stealer.steal_observed(), Observed { value: Some(5), top: 1 });
        assert_eq!(owner.indices(), (2, 3));
        assert_eq!(owner.pop(), Some(6));
    }

    #[test]
    fn single_thread_lifo_and_fifo_against_vecdeque() {
        let (mut owner, stealer) = new_deque(1).unwrap();
        let mut oracle = VecDeque::new();
        for round in 0..50u64 {
            for k in 0..(round % 7) {
                owner.push(round * 100 + k);
                oracle.push_back(round * 100 + k);
            }
            if round % 2 == 0 {
                assert_eq!(owner.pop(), oracle.pop_back());
            } else {
                assert_eq!(stealer.steal(), oracle.pop_front());
            }
        }
        while let Some(v) = oracle.pop_back() {
            assert_eq!(owner.pop(), Some(v));
        }
        assert_eq!(owner.pop(), None);
    }

    #[test]
    fn hazard_mode_frees_replaced_buffers() {
        let (mut owner, stealer) =
            Config::new(1).reclamation(Reclamation::HazardPointers).scan_threshold(1).build().unwrap();
        for v in 1..=100 {
            owner.push(v);
        }
        assert_eq!(owner.stats().grows, 7);
        owner.collect();
        let stats = owner.stats();
        assert_eq!(stats.live_arrays, 1);
        assert_eq!(stats.freed, 7);
        assert_eq!(stealer.steal(), Some(1));
    }

    #[test]
    fn keep_all_holds_buffers_until_drop() {
        let (mut owner, stealer) = new_deque(1).unwrap();
        for v in 1..=8 {
            owner.push(v);
        }
        let live = owner.shared.live.clone();
        assert_eq!(live.load(SeqCst), 5);
        drop(owner);
        assert_eq!(live.load(SeqCst), 5);
        drop(stealer);
        assert_eq!(live.load(SeqCst), 0);
    }

    #[test]
    fn instrumented_cycle_validates() {
        let rec = Arc::new(TraceRecorder::new());
        let (mut owner, stealer) = Config::new(2).recorder(rec.clone()).build().unwrap();
        owner.push(10);
        owner.push(11);
        owner.push(12);
        assert_eq!(owner.pop(), Some(12));
        assert_eq!(stealer.steal(), Some(10));
        assert_eq!(owner.pop(), Some(11));
        assert_eq!(owner.pop(), None);
        let report = validate_trace(&rec.states());
        assert!(report.passed(), "{report:?}");
        use TransitionKind::*;
        assert_eq!(
            report.kinds,
            vec![WriteArray, Push, Archive, WriteArray, Push, WriteArray, Push, Pop, CasTop, CasTop]
        );
    }
}
