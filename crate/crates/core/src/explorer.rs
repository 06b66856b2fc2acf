//! Exhaustive interleaving exploration of a micro-step model of the deque.
//!
//! Each thread runs a list of operations. Every operation is broken into the
//! same statement order as the real `push`, `pop` and `steal`, one shared
//! load, store or CAS per step; pure computation joins the adjacent step.
//! Growing copies the live slice in one step because the new buffer is
//! invisible to other threads until it is published.
//!
//! After every step the model's authoritative state is fed to a
//! [`TraceValidator`], so every explored path is checked against the
//! deque-state rules as it unfolds. At each terminal state the emitted
//! history must be linearizable and conserve elements, and in hazard-pointer
//! mode every replaced buffer must have been freed and never read after
//! being freed.
//!
//! States are deduplicated on everything that can influence the rest of the
//! run. The history so far enters as its [`Frontier`], which accepts the
//! same continuations as the history itself.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::lincheck::{self, Event, Frontier, History, Op, Outcome, ThreadId};
use crate::state_oracle::{AuthState, TraceValidator, Violation};
use crate::Value;

/// Name of the thread that owns the deque in program files.
pub const OWNER: &str = "owner";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Replaced buffers are never freed.
    #[default]
    KeepAll,
    /// Stealers protect the buffer; push retires and scans after a grow.
    Hazard,
}

/// Seeded bugs the model can run with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    PopReadsTopFirst,
    StealReadsAfterCas,
    PopSkipsCas,
    RetireBeforePublish,
}

impl Mutation {
    pub const ALL: [Mutation; 4] = [
        Mutation::PopReadsTopFirst,
        Mutation::StealReadsAfterCas,
        Mutation::PopSkipsCas,
        Mutation::RetireBeforePublish,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    /// Thread names and their operations; index 0 is the owner.
    pub threads: Vec<(String, Vec<Op>)>,
    pub capacity: usize,
    /// Pushed by the owner, alone, before exploration starts.
    pub preload: Vec<Value>,
    pub mode: Mode,
    pub mutation: Option<Mutation>,
}

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("invalid program JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("capacity must be at least 1")]
    ZeroCapacity,
    #[error("thread {thread}: unknown op {op:?} (expected push:<n>, pop or steal)")]
    UnknownOp { thread: String, op: String },
    #[error("thread {thread}: only the owner may push or pop")]
    NotOwner { thread: String },
    #[error("at most 255 threads")]
    TooManyThreads,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgramFile {
    threads: BTreeMap<String, Vec<String>>,
    capacity: usize,
    #[serde(default)]
    preload: Vec<Value>,
    #[serde(default)]
    mode: Mode,
    #[serde(default)]
    mutation: Option<Mutation>,
}

fn parse_op(thread: &str, text: &str) -> Result<Op, ProgramError> {
    let unknown = || ProgramError::UnknownOp { thread: thread.to_string(), op: text.to_string() };
    match text.split_once(':') {
        Some(("push", v)) => v.trim().parse().map(Op::Push).map_err(|_| unknown()),
        None if text == "pop" => Ok(Op::Pop),
        None if text == "steal" => Ok(Op::Steal),
        _ => Err(unknown()),
    }
}

impl Program {
    /// An owner running `owner` and one stealer per entry of `stealers`.
    pub fn new(capacity: usize, owner: Vec<Op>, stealers: Vec<Vec<Op>>) -> Self {
        let mut threads = vec![(OWNER.to_string(), owner)];
        for (i, ops) in stealers.into_iter().enumerate() {
            threads.push((format!("s{}", i + 1), ops));
        }
        Self { threads, capacity, preload: Vec::new(), mode: Mode::KeepAll, mutation: None }
    }

    pub fn with_preload(mut self, preload: Vec<Value>) -> Self {
        self.preload = preload;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_mutation(mut self, mutation: Option<Mutation>) -> Self {
        self.mutation = mutation;
        self
    }

    /// Parses `{"threads": {"owner": ["push:1", "pop"], "s1": ["steal"]}, "capacity": 1}`,
    /// with optional `preload`, `mode` (`keep_all` or `hazard`) and `mutation`.
    pub fn from_json(text: &str) -> Result<Self, ProgramError> {
        let file: ProgramFile = serde_json::from_str(text)?;
        if file.capacity == 0 {
            return Err(ProgramError::ZeroCapacity);
        }
        let mut threads = vec![(OWNER.to_string(), Vec::new())];
        for (name, ops) in file.threads {
            let ops = ops.iter().map(|o| parse_op(&name, o)).collect::<Result<Vec<_>, _>>()?;
            if name == OWNER {
                threads[0].1 = ops;
            } else if ops.iter().any(|o| *o != Op::Steal) {
                return Err(ProgramError::NotOwner { thread: name });
            } else {
                threads.push((name, ops));
            }
        }
        if threads.len() > 255 {
            return Err(ProgramError::TooManyThreads);
        }
        Ok(Self { threads, capacity: file.capacity, preload: file.preload, mode: file.mode, mutation: file.mutation })
    }

    pub fn thread_names(&self) -> Vec<&str> {
        self.threads.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn total_ops(&self) -> usize {
        self.threads.iter().map(|(_, ops)| ops.len()).sum()
    }
}

/// Why an explored path is wrong.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Failure {
    #[error("deque-state rule broken: {0}")]
    Trace(#[from] Violation),
    #[error("history is not linearizable")]
    NotLinearizable,
    #[error("conservation broken: pushed values differ from returned plus drained")]
    Conservation,
    #[error("two CAS operations on top succeeded from {top}")]
    DoubleCas { top: u64 },
    #[error("thread {thread} read buffer {buffer} after it was freed")]
    UseAfterFree { thread: usize, buffer: usize },
    #[error("{count} replaced buffers never freed")]
    Leak { count: usize },
    #[error("online and search linearizability checks disagree (search says {search})")]
    CheckersDisagree { search: bool },
    #[error("lincheck refused the history: {0}")]
    Lincheck(#[from] lincheck::LincheckError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Token {
    Invoke(u8),
    Respond(u8, Outcome),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Pc {
    /// Next step starts a new operation.
    Start,
    Push(u8),
    Pop(u8),
    Steal(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
struct Locals {
    b: u64,
    t: u64,
    circle: usize,
    sz: u64,
    v: Value,
    ok: bool,
    /// Pointer read by the first load of a hazard-pointer protect.
    probe: usize,
    grown: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ThreadState {
    next_op: usize,
    results: Vec<Outcome>,
    pc: Pc,
    locals: Locals,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ModelBuf {
    slots: Vec<Value>,
    freed: bool,
}

impl ModelBuf {
    fn get(&self, i: u64) -> Value {
        self.slots[(i % self.slots.len() as u64) as usize]
    }
}

/// One state of the model. Cloning it forks the execution.
#[derive(Clone)]
pub struct ModelState {
    programs: Arc<Vec<Vec<Op>>>,
    mode: Mode,
    mutation: Option<Mutation>,
    top: u64,
    bottom: u64,
    array: usize,
    bufs: Vec<ModelBuf>,
    hazards: Vec<Option<usize>>,
    retired: Vec<usize>,
    pop_pending: bool,
    threads: Vec<ThreadState>,
    frontier: Frontier,
    cas_successes: Vec<u64>,
    /// The invoke/response order of the first path that reached this
    /// state. Left out of the state key: `frontier` summarizes it.
    history: Vec<Token>,
    validator: TraceValidator,
    /// Kept only when replaying.
    trace: Option<Vec<AuthState>>,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for ModelState {}

impl Hash for ModelState {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state)
    }
}

type Key<'a> = (
    (u64, u64, usize, bool),
    &'a [ModelBuf],
    &'a [Option<usize>],
    &'a [usize],
    &'a [ThreadState],
    &'a Frontier,
    &'a [u64],
);

impl ModelState {
    /// The initial state for `program`, after its preload pushes.
    pub fn new(program: &Program) -> Self {
        let mut programs: Vec<Vec<Op>> = program.threads.iter().map(|(_, ops)| ops.clone()).collect();
        let preload: Vec<Op> = program.preload.iter().map(|v| Op::Push(*v)).collect();
        programs[0].splice(0..0, preload);
        let n = programs.len();
        let initial = AuthState::initial(program.capacity);
        let mut state = Self {
            programs: Arc::new(programs),
            mode: program.mode,
            mutation: program.mutation,
            top: 1,
            bottom: 1,
            array: 0,
            bufs: vec![ModelBuf { slots: vec![0; program.capacity], freed: false }],
            hazards: vec![None; n],
            retired: Vec::new(),
            pop_pending: false,
            threads: vec![ThreadState { next_op: 0, results: Vec::new(), pc: Pc::Start, locals: Locals::default() }; n],
            frontier: Frontier::new(),
            history: Vec::new(),
            cas_successes: Vec::new(),
            validator: TraceValidator::start(&initial).expect("initial state is valid"),
            trace: None,
        };
        for _ in 0..program.preload.len() {
            let op = state.threads[0].next_op;
            while state.threads[0].next_op == op {
                state.step(0).expect("preload pushes run alone");
            }
        }
        state
    }

    fn key(&self) -> Key<'_> {
        (
            (self.top, self.bottom, self.array, self.pop_pending),
            &self.bufs,
            &self.hazards,
            &self.retired,
            &self.threads,
            &self.frontier,
            &self.cas_successes,
        )
    }

    fn fingerprint(&self) -> u128 {
        let mut lo = DefaultHasher::new();
        (0u8, self.key()).hash(&mut lo);
        let mut hi = DefaultHasher::new();
        (1u8, self.key()).hash(&mut hi);
        (u128::from(hi.finish()) << 64) | u128::from(lo.finish())
    }

    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn can_step(&self, tid: usize) -> bool {
        tid < self.threads.len() && self.threads[tid].next_op < self.programs[tid].len()
    }

    pub fn enabled(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.threads.len()).filter(|&t| self.can_step(t))
    }

    pub fn is_terminal(&self) -> bool {
        self.enabled().next().is_none()
    }

    pub fn top(&self) -> u64 {
        self.top
    }

    pub fn bottom(&self) -> u64 {
        self.bottom
    }

    pub fn capacity(&self) -> usize {
        self.bufs[self.array].slots.len()
    }

    /// The logical contents, top first.
    pub fn contents(&self) -> Vec<Value> {
        let buf = &self.bufs[self.array];
        (self.top..self.bottom.max(self.top)).map(|i| buf.get(i)).collect()
    }

    pub fn auth_state(&self) -> AuthState {
        AuthState {
            era: self.array as u64,
            array_id: self.array as u64,
            contents: self.bufs[self.array].slots.clone(),
            top: self.top,
            bottom: self.bottom + u64::from(self.pop_pending),
        }
    }

    /// Results returned so far by thread `tid`.
    pub fn results(&self, tid: usize) -> &[Outcome] {
        &self.threads[tid].results
    }

    /// The emitted history; stamps are positions in the invoke/response
    /// order. Operations still in flight are left out.
    pub fn history(&self) -> History {
        let mut events = Vec::new();
        let mut open: HashMap<u8, (usize, u64)> = HashMap::new();
        let mut started = vec![0usize; self.threads.len()];
        for (pos, token) in self.history.iter().enumerate() {
            match *token {
                Token::Invoke(id) => {
                    let tid = usize::from(id);
                    open.insert(id, (started[tid], pos as u64));
                    started[tid] += 1;
                }
                Token::Respond(id, outcome) => {
                    let (op_index, invoke) = open.remove(&id).expect("response follows invocation");
                    events.push(Event {
                        thread: ThreadId::from(id),
                        op: self.programs[usize::from(id)][op_index],
                        invoke,
                        response: pos as u64,
                        outcome,
                    });
                }
            }
        }
        History { events, final_drain: self.contents() }
    }

    fn read_buf(&self, tid: usize, buffer: usize) -> Result<&ModelBuf, Failure> {
        let buf = &self.bufs[buffer];
        if buf.freed {
            return Err(Failure::UseAfterFree { thread: tid, buffer });
        }
        Ok(buf)
    }

    fn cas_top(&mut self, t: u64) -> Result<bool, Failure> {
        if self.top != t {
            return Ok(false);
        }
        if self.cas_successes.contains(&t) {
            return Err(Failure::DoubleCas { top: t });
        }
        self.cas_successes.push(t);
        self.top = t + 1;
        Ok(true)
    }

    fn retire_and_scan(&mut self, buffer: usize) {
        self.retired.push(buffer);
        let hazards = &self.hazards;
        let bufs = &mut self.bufs;
        self.retired.retain(|&r| {
            if hazards.contains(&Some(r)) {
                true
            } else {
                bufs[r].freed = true;
                false
            }
        });
    }

    fn grow_into_new(&mut self, circle: usize, t: u64, b: u64) -> usize {
        let old = &self.bufs[circle];
        let cap = 2 * old.slots.len();
        let mut slots = vec![0; cap];
        for i in t..b {
            slots[(i % cap as u64) as usize] = old.get(i);
        }
        self.bufs.push(ModelBuf { slots, freed: false });
        self.bufs.len() - 1
    }

    fn respond(&mut self, tid: usize, outcome: Outcome) {
        self.history.push(Token::Respond(tid as u8, outcome));
        self.frontier.respond(tid as ThreadId, outcome);
        let th = &mut self.threads[tid];
        th.next_op += 1;
        th.results.push(outcome);
        th.pc = Pc::Start;
        th.locals = Locals::default();
    }

    /// Executes one micro-step of thread `tid`. Panics if `tid` has no
    /// remaining steps.
    pub fn step(&mut self, tid: usize) -> Result<(), Failure> {
        assert!(self.can_step(tid), "thread {tid} has no remaining steps");
        let op = self.programs[tid][self.threads[tid].next_op];
        let pc = match self.threads[tid].pc {
            Pc::Start => {
                self.history.push(Token::Invoke(tid as u8));
                self.frontier.invoke(tid as ThreadId, op);
                match op {
                    Op::Push(_) => Pc::Push(0),
                    Op::Pop => Pc::Pop(0),
                    Op::Steal => Pc::Steal(0),
                }
            }
            pc => pc,
        };
        match pc {
            Pc::Push(n) => self.step_push(tid, op, n)?,
            Pc::Pop(n) => self.step_pop(tid, n)?,
            Pc::Steal(n) => self.step_steal(tid, n)?,
            Pc::Start => unreachable!(),
        }
        if self.frontier.is_empty() {
            return Err(Failure::NotLinearizable);
        }
        self.observe()
    }

    fn observe(&mut self) -> Result<(), Failure> {
        let last = self.validator.last();
        let unchanged = last.array_id == self.array as u64
            && last.top == self.top
            && last.bottom == self.bottom + u64::from(self.pop_pending)
            && last.contents == self.bufs[self.array].slots;
        if !unchanged {
            let auth = self.auth_state();
            self.validator.step(&auth)?;
            if let Some(trace) = &mut self.trace {
                trace.push(auth);
            }
        }
        Ok(())
    }

    fn step_push(&mut self, tid: usize, op: Op, n: u8) -> Result<(), Failure> {
        let Op::Push(v) = op else { unreachable!() };
        let hazard = self.mode == Mode::Hazard;
        let retire_first = self.mutation == Some(Mutation::RetireBeforePublish);
        let mut l = self.threads[tid].locals;
        let next = match n {
            0 => {
                l.b = self.bottom;
                Pc::Push(1)
            }
            1 => {
                l.t = self.top;
                Pc::Push(2)
            }
            2 => {
                l.circle = self.array;
                l.sz = self.read_buf(tid, l.circle)?.slots.len() as u64;
                if l.t + l.sz <= l.b + 1 {
                    Pc::Push(3)
                } else {
                    Pc::Push(5)
                }
            }
            // Grow. Keep-all publishes in one step; hazard mode publishes and
            // then retires, or the reverse under the seeded bug.
            3 => {
                l.grown = self.grow_into_new(l.circle, l.t, l.b);
                if hazard && retire_first {
                    self.retire_and_scan(l.circle);
                } else {
                    self.array = l.grown;
                }
                if hazard {
                    Pc::Push(4)
                } else {
                    Pc::Push(5)
                }
            }
            4 => {
                if retire_first {
                    self.array = l.grown;
                } else {
                    self.retire_and_scan(l.circle);
                }
                Pc::Push(5)
            }
            5 => {
                l.circle = self.array;
                l.sz = self.read_buf(tid, l.circle)?.slots.len() as u64;
                Pc::Push(6)
            }
            6 => {
                self.read_buf(tid, l.circle)?;
                let slot = (l.b % l.sz) as usize;
                self.bufs[l.circle].slots[slot] = v;
                Pc::Push(7)
            }
            _ => {
                self.bottom = l.b + 1;
                self.respond(tid, Outcome::Unit);
                return Ok(());
            }
        };
        self.threads[tid].locals = l;
        self.threads[tid].pc = next;
        Ok(())
    }

    fn step_pop(&mut self, tid: usize, n: u8) -> Result<(), Failure> {
        let top_first = self.mutation == Some(Mutation::PopReadsTopFirst);
        let mut l = self.threads[tid].locals;
        let next = match n {
            0 => {
                l.b = self.bottom - 1;
                Pc::Pop(1)
            }
            1 => {
                l.circle = self.array;
                l.sz = self.read_buf(tid, l.circle)?.slots.len() as u64;
                Pc::Pop(if top_first { 10 } else { 2 })
            }
            2 => {
                self.bottom = l.b;
                self.pop_pending = true;
                Pc::Pop(3)
            }
            3 => {
                l.t = self.top;
                if l.t < l.b {
                    self.pop_pending = false;
                }
                if l.b < l.t {
                    Pc::Pop(4)
                } else {
                    Pc::Pop(5)
                }
            }
            4 => {
                self.bottom = l.t;
                self.pop_pending = false;
                self.respond(tid, Outcome::Nothing);
                return Ok(());
            }
            5 => {
                l.v = self.read_buf(tid, l.circle)?.get(l.b);
                if l.t < l.b {
                    self.respond(tid, Outcome::Value(l.v));
                    return Ok(());
                }
                Pc::Pop(6)
            }
            6 => {
                l.ok = if self.mutation == Some(Mutation::PopSkipsCas) { true } else { self.cas_top(l.t)? };
                Pc::Pop(7)
            }
            7 => {
                self.bottom = l.t + 1;
                self.pop_pending = false;
                let outcome = if l.ok { Outcome::Value(l.v) } else { Outcome::Nothing };
                self.respond(tid, outcome);
                return Ok(());
            }
            // Seeded bug: top is read before bottom is decremented.
            10 => {
                l.t = self.top;
                Pc::Pop(11)
            }
            11 => {
                self.bottom = l.b;
                self.pop_pending = !(l.t < l.b);
                if l.b < l.t {
                    Pc::Pop(4)
                } else {
                    Pc::Pop(5)
                }
            }
            _ => unreachable!("pop has no step {n}"),
        };
        self.threads[tid].locals = l;
        self.threads[tid].pc = next;
        Ok(())
    }

    fn step_steal(&mut self, tid: usize, n: u8) -> Result<(), Failure> {
        let hazard = self.mode == Mode::Hazard;
        let cas_first = self.mutation == Some(Mutation::StealReadsAfterCas);
        let mut l = self.threads[tid].locals;
        // Steps 2..=4 load the array pointer: one plain load, or protect's
        // load / announce / validating re-load.
        let next = match n {
            0 => {
                l.t = self.top;
                Pc::Steal(1)
            }
            1 => {
                l.b = self.bottom;
                Pc::Steal(2)
            }
            2 => {
                if hazard {
                    l.probe = self.array;
                    Pc::Steal(3)
                } else {
                    l.circle = self.array;
                    if l.b <= l.t {
                        self.respond(tid, Outcome::Nothing);
                        return Ok(());
                    }
                    Pc::Steal(5)
                }
            }
            3 => {
                self.hazards[tid] = Some(l.probe);
                Pc::Steal(4)
            }
            4 => {
                if self.array != l.probe {
                    l.probe = self.array;
                    Pc::Steal(3)
                } else {
                    l.circle = l.probe;
                    if l.b <= l.t {
                        Pc::Steal(9)
                    } else {
                        Pc::Steal(5)
                    }
                }
            }
            5 => {
                if cas_first {
                    l.ok = self.cas_top(l.t)?;
                    Pc::Steal(7)
                } else {
                    l.v = self.read_buf(tid, l.circle)?.get(l.t);
                    Pc::Steal(if hazard { 6 } else { 8 })
                }
            }
            6 => {
                self.hazards[tid] = None;
                Pc::Steal(8)
            }
            // Seeded bug: the slot is read after the CAS.
            7 => {
                l.v = self.read_buf(tid, l.circle)?.get(l.t);
                if hazard {
                    Pc::Steal(10)
                } else {
                    let outcome = if l.ok { Outcome::Value(l.v) } else { Outcome::Nothing };
                    self.respond(tid, outcome);
                    return Ok(());
                }
            }
            8 => {
                let ok = self.cas_top(l.t)?;
                self.respond(tid, if ok { Outcome::Value(l.v) } else { Outcome::Nothing });
                return Ok(());
            }
            9 => {
                self.hazards[tid] = None;
                self.respond(tid, Outcome::Nothing);
                return Ok(());
            }
            10 => {
                self.hazards[tid] = None;
                let outcome = if l.ok { Outcome::Value(l.v) } else { Outcome::Nothing };
                self.respond(tid, outcome);
                return Ok(());
            }
            _ => unreachable!("steal has no step {n}"),
        };
        self.threads[tid].locals = l;
        self.threads[tid].pc = next;
        Ok(())
    }

    /// Checks run once every thread has finished: conservation,
    /// linearizability, and (in hazard mode) that a final scan frees every
    /// replaced buffer.
    fn check_terminal(&self, lin_cache: &mut HashMap<(Vec<Token>, Vec<Value>), bool>) -> Result<(), Failure> {
        let history = self.history();
        if !lincheck::check_conservation(&history) {
            return Err(Failure::Conservation);
        }
        let key = (self.history.clone(), history.final_drain.clone());
        let linearizable = match lin_cache.get(&key) {
            Some(ok) => *ok,
            None => {
                let ok = lincheck::is_linearizable_bounded(&history, 64)?.is_some();
                lin_cache.insert(key, ok);
                ok
            }
        };
        let online = self.frontier.accepts_drain(&history.final_drain);
        if online != linearizable {
            return Err(Failure::CheckersDisagree { search: linearizable });
        }
        if !linearizable {
            return Err(Failure::NotLinearizable);
        }
        if self.mode == Mode::Hazard {
            // Every shield is clear by now, so a final scan frees all retirees.
            let leaked = (0..self.bufs.len())
                .filter(|&i| i != self.array && !self.bufs[i].freed && !self.retired.contains(&i))
                .count();
            if leaked > 0 {
                return Err(Failure::Leak { count: leaked });
            }
        }
        Ok(())
    }

    /// One-line summary of per-thread results and the drain.
    pub fn outcome_key(&self, names: &[&str]) -> String {
        let mut parts = Vec::new();
        for (tid, name) in names.iter().enumerate() {
            let results: Vec<String> = self.results(tid).iter().map(|o| o.to_string()).collect();
            parts.push(format!("{name}=[{}]", results.join(",")));
        }
        let drain: Vec<String> = self.contents().iter().map(|v| v.to_string()).collect();
        parts.push(format!("drain=[{}]", drain.join(",")));
        parts.join(" ")
    }
}

impl fmt::Debug for ModelState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelState")
            .field("top", &self.top)
            .field("bottom", &self.bottom)
            .field("array", &self.array)
            .field("bufs", &self.bufs)
            .field("threads", &self.threads)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_states: usize,
    pub max_depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_states: 20_000_000, max_depth: 1_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Counterexample {
    /// Thread names in the order they stepped.
    pub schedule: Vec<String>,
    pub failure: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    /// Complete schedules from the initial state (counted through the
    /// deduplicated state graph, saturating).
    pub interleavings: u128,
    pub distinct_states: usize,
    /// Outcome summary to the number of distinct terminal states with it.
    pub outcomes: BTreeMap<String, usize>,
    pub all_pass: bool,
    pub complete: bool,
    pub counterexample: Option<Counterexample>,
}

struct Explorer<'a> {
    names: Vec<&'a str>,
    limits: Limits,
    memo: HashMap<u128, u128>,
    entered: usize,
    lin_cache: HashMap<(Vec<Token>, Vec<Value>), bool>,
    outcomes: BTreeMap<String, usize>,
    path: Vec<usize>,
    complete: bool,
    counterexample: Option<Counterexample>,
}

impl Explorer<'_> {
    fn fail(&mut self, failure: Failure) {
        let schedule = self.path.iter().map(|&t| self.names[t].to_string()).collect();
        self.counterexample = Some(Counterexample { schedule, failure: failure.to_string() });
    }

    /// Returns the number of complete schedules below `state`.
    fn visit(&mut self, state: &ModelState) -> u128 {
        if self.counterexample.is_some() {
            return 0;
        }
        let fp = state.fingerprint();
        if let Some(&n) = self.memo.get(&fp) {
            return n;
        }
        if self.entered >= self.limits.max_states || self.path.len() >= self.limits.max_depth {
            self.complete = false;
            return 0;
        }
        self.entered += 1;
        let enabled: Vec<usize> = state.enabled().collect();
        let count = if enabled.is_empty() {
            match state.check_terminal(&mut self.lin_cache) {
                Ok(()) => {
                    *self.outcomes.entry(state.outcome_key(&self.names)).or_default() += 1;
                    1
                }
                Err(f) => {
                    self.fail(f);
                    return 0;
                }
            }
        } else {
            let mut total: u128 = 0;
            for tid in enabled {
                let mut next = state.clone();
                self.path.push(tid);
                match next.step(tid) {
                    Ok(()) => total = total.saturating_add(self.visit(&next)),
                    Err(f) => self.fail(f),
                }
                self.path.pop();
                if self.counterexample.is_some() {
                    return 0;
                }
            }
            total
        };
        self.memo.insert(fp, count);
        count
    }
}

/// Explores every interleaving of `program`, stopping at the first failure.
pub fn explore(program: &Program, limits: Limits) -> Report {
    let initial = ModelState::new(program);
    let mut explorer = Explorer {
        names: program.thread_names(),
        limits,
        memo: HashMap::new(),
        entered: 0,
        lin_cache: HashMap::new(),
        outcomes: BTreeMap::new(),
        path: Vec::new(),
        complete: true,
        counterexample: None,
    };
    let interleavings = explorer.visit(&initial);
    Report {
        interleavings,
        distinct_states: explorer.entered,
        outcomes: explorer.outcomes,
        all_pass: explorer.counterexample.is_none(),
        complete: explorer.complete,
        counterexample: explorer.counterexample,
    }
}

impl Report {
    pub fn to_json(&self) -> Json {
        serde_json::json!({
            "interleavings": self.interleavings.to_string(),
            "distinct_states": self.distinct_states,
            "outcomes": self.outcomes,
            "all_pass": self.all_pass,
            "complete": self.complete,
            "counterexample": self.counterexample,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("step {step}: unknown thread {thread:?}")]
    UnknownThread { step: usize, thread: String },
    #[error("step {step}: thread {thread:?} has no remaining steps")]
    Blocked { step: usize, thread: String },
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub history: History,
    /// Authoritative states in order, starting with the initial state.
    pub trace: Vec<AuthState>,
    /// The failure the schedule ran into, if any; replay stops there.
    pub failure: Option<Failure>,
    pub terminal: bool,
    pub state: ModelState,
}

/// Re-executes `schedule` (thread names) deterministically. Terminal checks
/// run when the schedule finishes every thread.
pub fn replay(program: &Program, schedule: &[String]) -> Result<Replay, ReplayError> {
    let names = program.thread_names();
    let mut initial_program = program.clone();
    initial_program.preload.clear();
    // Preload steps are part of the trace, so run them with tracing on.
    let mut state = ModelState::new(&initial_program);
    state.trace = Some(vec![state.auth_state()]);
    let mut failure = None;
    for v in &program.preload {
        state.programs = {
            let mut p = (*state.programs).clone();
            p[0].insert(state.threads[0].next_op, Op::Push(*v));
            Arc::new(p)
        };
        let op = state.threads[0].next_op;
        while state.threads[0].next_op == op {
            state.step(0).expect("preload pushes run alone");
        }
    }
    for (step, name) in schedule.iter().enumerate() {
        let tid = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ReplayError::UnknownThread { step, thread: name.clone() })?;
        if !state.can_step(tid) {
            return Err(ReplayError::Blocked { step, thread: name.clone() });
        }
        if let Err(f) = state.step(tid) {
            failure = Some(f);
            break;
        }
    }
    let terminal = failure.is_none() && state.is_terminal();
    if terminal {
        failure = state.check_terminal(&mut HashMap::new()).err();
    }
    Ok(Replay { history: state.history(), trace: state.trace.clone().unwrap_or_default(), failure, terminal, state })
}
