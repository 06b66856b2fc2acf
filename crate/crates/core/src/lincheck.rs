//! Linearizability checking for deque histories.
//!
//! The sequential model is a list. `push(v)` appends at the bottom, a `pop`
//! returning `v` removes `v` from the bottom, a `steal` returning `v` removes
//! it from the top. A pop or steal returning nothing is always allowed and
//! changes nothing: the deque may report a lost race as empty.
//!
//! [`is_linearizable`] searches for an order of the events that respects
//! real time (an event that responded before another was invoked comes
//! first), is accepted step by step by [`seq_apply`], and ends in a list
//! equal to the history's final drain. The search memoizes on the set of
//! linearized events and the model state. [`Frontier`] answers the same
//! question online, one invocation or response at a time.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::Value;

pub type ThreadId = u32;

/// Largest history `is_linearizable` accepts by default.
pub const DEFAULT_BOUND: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    Push(Value),
    Pop,
    Steal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    /// The result of a push.
    Unit,
    /// A pop or steal that returned nothing.
    Nothing,
    Value(Value),
}

impl From<Option<Value>> for Outcome {
    fn from(v: Option<Value>) -> Self {
        v.map_or(Outcome::Nothing, Outcome::Value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub thread: ThreadId,
    pub op: Op,
    pub invoke: u64,
    pub response: u64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct History {
    pub events: Vec<Event>,
    /// What was left in the deque afterwards, top first.
    pub final_drain: Vec<Value>,
}

/// The abstract deque: a list, top first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SeqModel(pub VecDeque<Value>);

impl SeqModel {
    pub fn from_slice(values: &[Value]) -> Self {
        Self(values.iter().copied().collect())
    }
}

/// Applies one completed operation to the model, or returns `None` when the
/// outcome is impossible from this state.
pub fn seq_apply(model: &SeqModel, op: Op, outcome: Outcome) -> Option<SeqModel> {
    let mut next = model.clone();
    match (op, outcome) {
        (Op::Push(v), Outcome::Unit) => next.0.push_back(v),
        (Op::Pop | Op::Steal, Outcome::Nothing) => {}
        (Op::Pop, Outcome::Value(v)) if model.0.back() == Some(&v) => {
            next.0.pop_back();
        }
        (Op::Steal, Outcome::Value(v)) if model.0.front() == Some(&v) => {
            next.0.pop_front();
        }
        _ => return None,
    }
    Some(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LincheckError {
    #[error("history has {len} events, above the exhaustive bound of {bound}")]
    BoundExceeded { len: usize, bound: usize },
    #[error("event {index}: {reason}")]
    Malformed { index: usize, reason: String },
}

impl History {
    /// Checks stamps are ordered, per-thread events do not overlap, and a
    /// single thread owns every push and pop.
    pub fn check_well_formed(&self) -> Result<(), LincheckError> {
        let malformed = |index, reason: &str| LincheckError::Malformed { index, reason: reason.to_string() };
        let mut owner = None;
        let mut last_response: HashMap<ThreadId, u64> = HashMap::new();
        let mut order: Vec<usize> = (0..self.events.len()).collect();
        order.sort_by_key(|&i| self.events[i].invoke);
        for i in order {
            let e = &self.events[i];
            if e.invoke >= e.response {
                return Err(malformed(i, "invoke must precede response"));
            }
            if matches!(e.op, Op::Push(_) | Op::Pop) {
                match owner {
                    None => owner = Some(e.thread),
                    Some(t) if t != e.thread => return Err(malformed(i, "push and pop come from two threads")),
                    Some(_) => {}
                }
            }
            if last_response.get(&e.thread).is_some_and(|&r| r >= e.invoke) {
                return Err(malformed(i, "overlaps an earlier event of the same thread"));
            }
            last_response.insert(e.thread, e.response);
        }
        Ok(())
    }
}

/// [`is_linearizable_bounded`] with [`DEFAULT_BOUND`].
pub fn is_linearizable(history: &History) -> Result<Option<Vec<usize>>, LincheckError> {
    is_linearizable_bounded(history, DEFAULT_BOUND)
}

/// Returns a witness order (indices into `history.events`) if the history is
/// linearizable, `None` if it is not.
pub fn is_linearizable_bounded(history: &History, bound: usize) -> Result<Option<Vec<usize>>, LincheckError> {
    let len = history.events.len();
    if len > bound.min(64) {
        return Err(LincheckError::BoundExceeded { len, bound: bound.min(64) });
    }
    history.check_well_formed()?;
    let mut search = Search {
        events: &history.events,
        drain: SeqModel::from_slice(&history.final_drain),
        dead: HashSet::new(),
        order: Vec::with_capacity(len),
    };
    let found = search.dfs(0, &SeqModel::default());
    Ok(found.then_some(search.order))
}

struct Search<'a> {
    events: &'a [Event],
    drain: SeqModel,
    dead: HashSet<(u64, SeqModel)>,
    order: Vec<usize>,
}

impl Search<'_> {
    fn dfs(&mut self, done: u64, model: &SeqModel) -> bool {
        if done.count_ones() as usize == self.events.len() {
            return *model == self.drain;
        }
        if self.dead.contains(&(done, model.clone())) {
            return false;
        }
        let pending = || (0..self.events.len()).filter(move |i| done & (1 << i) == 0);
        let earliest_response = pending().map(|i| self.events[i].response).min().unwrap_or(u64::MAX);
        let candidates: Vec<usize> = pending().filter(|&i| self.events[i].invoke < earliest_response).collect();
        for i in candidates {
            let e = self.events[i];
            if let Some(next) = seq_apply(model, e.op, e.outcome) {
                self.order.push(i);
                if self.dfs(done | (1 << i), &next) {
                    return true;
                }
                self.order.pop();
            }
        }
        self.dead.insert((done, model.clone()));
        false
    }
}

/// Pushed values, as a multiset, equal the values returned plus the drain.
pub fn check_conservation(history: &History) -> bool {
    let mut balance: HashMap<Value, i64> = HashMap::new();
    for e in &history.events {
        match (e.op, e.outcome) {
            (Op::Push(v), _) => *balance.entry(v).or_default() += 1,
            (_, Outcome::Value(v)) => *balance.entry(v).or_default() -= 1,
            _ => {}
        }
    }
    for v in &history.final_drain {
        *balance.entry(*v).or_default() -= 1;
    }
    balance.values().all(|&n| n == 0)
}

/// Online linearizability check, fed one invocation or response at a time.
///
/// Holds every way the operations seen so far could have been linearized:
/// a model list plus, for each operation in flight, the result it was
/// linearized with (or `None` if it has not taken effect yet). Two histories
/// with equal frontiers accept exactly the same continuations.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frontier {
    configs: BTreeSet<Config>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Config {
    model: Vec<Value>,
    /// Sorted by thread.
    pending: Vec<(ThreadId, Op, Option<Outcome>)>,
}

impl Config {
    fn linearize(&self, i: usize) -> Vec<Config> {
        let (thread, op, _) = self.pending[i];
        let model = SeqModel::from_slice(&self.model);
        let outcomes = match op {
            Op::Push(_) => vec![Outcome::Unit],
            Op::Pop => vec![Outcome::Nothing, Outcome::from(model.0.back().copied())],
            Op::Steal => vec![Outcome::Nothing, Outcome::from(model.0.front().copied())],
        };
        let mut out = Vec::new();
        for outcome in outcomes {
            if let Some(next) = seq_apply(&model, op, outcome) {
                let mut c = Config { model: next.0.into_iter().collect(), pending: self.pending.clone() };
                c.pending[i] = (thread, op, Some(outcome));
                out.push(c);
            }
        }
        out
    }
}

impl Default for Frontier {
    fn default() -> Self {
        Self::new()
    }
}

impl Frontier {
    pub fn new() -> Self {
        Self { configs: BTreeSet::from([Config { model: Vec::new(), pending: Vec::new() }]) }
    }

    /// `thread` must not already have an operation in flight.
    pub fn invoke(&mut self, thread: ThreadId, op: Op) {
        self.configs = std::mem::take(&mut self.configs)
            .into_iter()
            .map(|mut c| {
                let at = c.pending.partition_point(|p| p.0 < thread);
                debug_assert!(c.pending.get(at).is_none_or(|p| p.0 != thread));
                c.pending.insert(at, (thread, op, None));
                c
            })
            .collect();
    }

    /// Records the response of `thread`'s operation. Returns `false` once no
    /// linearization is left.
    pub fn respond(&mut self, thread: ThreadId, outcome: Outcome) -> bool {
        let mut seen: BTreeSet<Config> = BTreeSet::new();
        let mut work: Vec<Config> = std::mem::take(&mut self.configs).into_iter().collect();
        let mut kept = BTreeSet::new();
        while let Some(c) = work.pop() {
            let Some(at) = c.pending.iter().position(|p| p.0 == thread) else {
                continue;
            };
            let (_, op, linearized) = c.pending[at];
            if let Some(o) = linearized {
                if o == outcome {
                    let mut done = c;
                    done.pending.remove(at);
                    kept.insert(done);
                }
                continue;
            }
            if !seen.insert(c.clone()) {
                continue;
            }
            // It takes effect now, possibly after other operations in
            // flight. Those that would come after it can still be placed
            // there later, so they stay unlinearized.
            if let Some(next) = seq_apply(&SeqModel::from_slice(&c.model), op, outcome) {
                let mut pending = c.pending.clone();
                pending.remove(at);
                kept.insert(Config { model: next.0.into_iter().collect(), pending });
            }
            for i in 0..c.pending.len() {
                if i != at && c.pending[i].2.is_none() {
                    work.extend(c.linearize(i));
                }
            }
        }
        self.configs = kept;
        !self.configs.is_empty()
    }

    /// With nothing in flight: whether some linearization leaves exactly
    /// `drain` (top first).
    pub fn accepts_drain(&self, drain: &[Value]) -> bool {
        self.configs.iter().any(|c| c.pending.is_empty() && c.model == drain)
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Push(v) => write!(f, "push:{v}"),
            Op::Pop => f.write_str("pop"),
            Op::Steal => f.write_str("steal"),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Unit => f.write_str("unit"),
            Outcome::Nothing => f.write_str("none"),
            Outcome::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventLine {
    t: ThreadId,
    op: String,
    arg: Option<Value>,
    inv: u64,
    res: u64,
    out: OutField,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum OutField {
    Value(Value),
    Word(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrainLine {
    drain: Vec<Value>,
}

/// Renders a history as newline-delimited JSON with a trailing drain record.
pub fn render_history(history: &History) -> String {
    let mut out = String::new();
    for e in &history.events {
        let (op, arg) = match e.op {
            Op::Push(v) => ("push", Some(v)),
            Op::Pop => ("pop", None),
            Op::Steal => ("steal", None),
        };
        let outcome = match e.outcome {
            Outcome::Unit => json!("unit"),
            Outcome::Nothing => json!("none"),
            Outcome::Value(v) => json!(v),
        };
        let line = json!({"t": e.thread, "op": op, "arg": arg, "inv": e.invoke, "res": e.response, "out": outcome});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out.push_str(&json!({ "drain": history.final_drain }).to_string());
    out.push('\n');
    out
}

/// Parses the format written by [`render_history`]. Line numbers in errors
/// are 1-based.
pub fn parse_history(text: &str) -> Result<History, HistoryError> {
    let mut history = History::default();
    let mut drained = false;
    for (n, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line = n + 1;
        let format = |reason: &str| HistoryError::Format { line, reason: reason.to_string() };
        if drained {
            return Err(format("records after the drain record"));
        }
        if raw.contains("\"drain\"") {
            let d: DrainLine = serde_json::from_str(raw).map_err(|source| HistoryError::Json { line, source })?;
            history.final_drain = d.drain;
            drained = true;
            continue;
        }
        let e: EventLine = serde_json::from_str(raw).map_err(|source| HistoryError::Json { line, source })?;
        let op = match (e.op.as_str(), e.arg) {
            ("push", Some(v)) => Op::Push(v),
            ("pop", None) => Op::Pop,
            ("steal", None) => Op::Steal,
            _ => return Err(format("op must be push with an arg, or pop/steal without one")),
        };
        let outcome = match e.out {
            OutField::Value(v) => Outcome::Value(v),
            OutField::Word(w) if w == "none" => Outcome::Nothing,
            OutField::Word(w) if w == "unit" => Outcome::Unit,
            OutField::Word(_) => return Err(format("out must be a value, \"none\" or \"unit\"")),
        };
        history.events.push(Event { thread: e.t, op, invoke: e.inv, response: e.res, outcome });
    }
    if !drained {
        return Err(HistoryError::Format { line: text.lines().count(), reason: "missing drain record".into() });
    }
    Ok(history)
}
