//! Runs one owner and a number of stealers on a real deque.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::SeqCst};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use chaselev::deque::{Config, DequeStats, Fault, Observed, Reclamation};
use chaselev::lincheck::{check_conservation, Event, History, Op, Outcome, ThreadId};
use chaselev::state_oracle::{AuthState, TraceRecorder};
use chaselev::{Error, Value};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Including the owner.
    pub threads: usize,
    pub pushes: u64,
    pub capacity: usize,
    pub seed: u64,
    pub reclamation: Reclamation,
    pub scan_threshold: usize,
    /// Chance that the owner pops after each push.
    pub pop_ratio: f64,
    pub fault: Option<Fault>,
    /// Keep every successful operation for the history and run the checks.
    pub record: bool,
    pub trace: bool,
}

#[derive(Debug, Default)]
pub struct LiveRun {
    pub pushes: u64,
    pub pops: u64,
    pub steals: u64,
    pub failed_steals: u64,
    /// What the owner popped after every other thread stopped, bottom first.
    pub drained: Vec<Value>,
    pub stats: DequeStats,
    pub elapsed: Duration,
    pub history: Option<History>,
    pub trace: Option<Vec<AuthState>>,
    pub violations: Vec<String>,
}

struct Tracker {
    thread: ThreadId,
    clock: Arc<AtomicU64>,
    record: bool,
    events: Vec<Event>,
    last_top: u64,
    violations: Vec<String>,
}

impl Tracker {
    fn new(thread: ThreadId, clock: Arc<AtomicU64>, record: bool) -> Self {
        Self { thread, clock, record, events: Vec::new(), last_top: 0, violations: Vec::new() }
    }

    fn stamp(&self) -> u64 {
        if self.record {
            self.clock.fetch_add(1, SeqCst)
        } else {
            0
        }
    }

    fn push(&mut self, v: Value, invoke: u64) {
        if self.record {
            let response = self.stamp();
            self.events.push(Event { thread: self.thread, op: Op::Push(v), invoke, response, outcome: Outcome::Unit });
        }
    }

    fn take(&mut self, op: Op, seen: Observed, invoke: u64) {
        if !self.record {
            return;
        }
        let response = self.stamp();
        if seen.top < self.last_top && self.violations.len() < 10 {
            self.violations
                .push(format!("thread {} read top {} after reading {}", self.thread, seen.top, self.last_top));
        }
        self.last_top = seen.top;
        if let Some(v) = seen.value {
            self.events.push(Event { thread: self.thread, op, invoke, response, outcome: Outcome::Value(v) });
        }
    }
}

pub fn run(cfg: &LiveConfig) -> Result<LiveRun, Error> {
    let recorder = cfg.trace.then(|| Arc::new(TraceRecorder::new()));
    let mut deque = Config::new(cfg.capacity).reclamation(cfg.reclamation).scan_threshold(cfg.scan_threshold);
    if let Some(r) = &recorder {
        deque = deque.recorder(r.clone());
    }
    if let Some(f) = cfg.fault {
        deque = deque.fault(f);
    }
    let (mut owner, stealer) = deque.build()?;

    let clock = Arc::new(AtomicU64::new(0));
    let done = Arc::new(AtomicBool::new(false));
    let started = Instant::now();
    let workers: Vec<_> = (1..cfg.threads.max(1))
        .map(|id| {
            let stealer = stealer.clone();
            let done = done.clone();
            let mut tracker = Tracker::new(id as ThreadId, clock.clone(), cfg.record);
            thread::spawn(move || {
                let (mut hits, mut misses) = (0u64, 0u64);
                loop {
                    let invoke = tracker.stamp();
                    let seen = stealer.steal_observed();
                    tracker.take(Op::Steal, seen, invoke);
                    if seen.value.is_some() {
                        hits += 1;
                    } else {
                        misses += 1;
                        if done.load(SeqCst) && stealer.size_hint() == 0 {
                            break;
                        }
                        thread::yield_now();
                    }
                }
                (tracker, hits, misses)
            })
        })
        .collect();
    drop(stealer);

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut tracker = Tracker::new(0, clock.clone(), cfg.record);
    let mut out = LiveRun::default();
    // With no stealers the deque must behave exactly like a stack.
    let mut stack: Option<Vec<Value>> = (cfg.threads <= 1 && cfg.record).then(Vec::new);
    for v in 1..=cfg.pushes {
        let invoke = tracker.stamp();
        owner.push(v);
        tracker.push(v, invoke);
        if let Some(s) = &mut stack {
            s.push(v);
        }
        out.pushes += 1;
        // Let stealers in regularly even on a single core.
        if v % 256 == 0 {
            thread::yield_now();
        }
        if rng.gen_bool(cfg.pop_ratio) {
            let invoke = tracker.stamp();
            let seen = owner.pop_observed();
            tracker.take(Op::Pop, seen, invoke);
            if seen.value.is_some() {
                out.pops += 1;
            }
            if let Some(s) = &mut stack {
                let expected = s.pop();
                if seen.value != expected && tracker.violations.len() < 10 {
                    tracker.violations.push(format!("pop returned {:?}, a stack gives {expected:?}", seen.value));
                }
            }
        }
    }
    done.store(true, SeqCst);

    let mut trackers = vec![];
    for w in workers {
        let (t, hits, misses) = w.join().expect("stealer thread panicked");
        out.steals += hits;
        out.failed_steals += misses;
        trackers.push(t);
    }
    // A broken pop can hand out one element forever; every push is
    // accounted for after `pushes` drained values anyway.
    for _ in 0..=cfg.pushes {
        let invoke = tracker.stamp();
        let seen = owner.pop_observed();
        tracker.take(Op::Pop, seen, invoke);
        match seen.value {
            Some(v) => out.drained.push(v),
            None => break,
        }
    }
    out.elapsed = started.elapsed();
    owner.collect();
    out.stats = owner.stats();
    out.trace = recorder.map(|r| r.states());

    trackers.push(tracker);
    if cfg.record {
        let mut events = Vec::new();
        for t in trackers {
            out.violations.extend(t.violations);
            events.extend(t.events);
        }
        events.sort_by_key(|e| e.invoke);
        // The drain is recorded as ordinary pops, so nothing is left over.
        let history = History { events, final_drain: Vec::new() };
        out.violations.extend(conservation_problems(cfg.pushes, &history));
        if !check_conservation(&history) && out.violations.is_empty() {
            out.violations.push("conservation check failed".into());
        }
        if cfg.reclamation == Reclamation::HazardPointers && out.stats.live_arrays != 1 {
            out.violations.push(format!("{} arrays still allocated after the final scan", out.stats.live_arrays));
        }
        out.history = Some(history);
    }
    Ok(out)
}

/// Names values returned more than once, never returned, or never pushed.
fn conservation_problems(pushes: u64, history: &History) -> Vec<String> {
    let mut seen = vec![0u32; pushes as usize + 1];
    let mut problems = Vec::new();
    for e in &history.events {
        if let (Op::Pop | Op::Steal, Outcome::Value(v)) = (e.op, e.outcome) {
            match seen.get_mut(v as usize) {
                Some(n) if v > 0 => *n += 1,
                _ => problems.push(format!("value {v} was returned but never pushed")),
            }
        }
    }
    for (v, &n) in seen.iter().enumerate().skip(1) {
        if n != 1 {
            problems.push(if n == 0 {
                format!("value {v} was lost")
            } else {
                format!("value {v} was returned {n} times")
            });
        }
    }
    problems.truncate(10);
    problems
}
