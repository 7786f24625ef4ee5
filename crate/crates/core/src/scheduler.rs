//! Master/trader/slave task execution with advertisement and stealing.
//!
//! Traders own disjoint task sets (contiguous runs of the partition tree) and
//! advertise a task on the master's board once its prerequisites are done.
//! Each slave serves one trader and claims that trader's advertised tasks;
//! when its trader has nothing ready it steals from the trader with the most
//! pending work. Payloads move into the claiming slave and results move back,
//! so every piece of data has exactly one writer.
//!
//! [`run`] executes on OS threads and timestamps with the wall clock;
//! [`run_simulated`] replays the same policy single-threaded in virtual
//! time for reproducible measurements.

use crate::partition::{PartitionTree, TaskBlock, TaskSet, WaveRunner};
use crate::lattice::LatticeError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufRead, Write};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;
use thiserror::Error;

pub type TaskId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("no task is runnable but {remaining} remain")]
    DeadlockDetected { remaining: usize },
    #[error("task {id} failed: {message}")]
    TaskFailed { id: TaskId, message: String },
    #[error("invalid role configuration: {0}")]
    InvalidRoles(String),
    #[error("invalid task graph: {0}")]
    InvalidGraph(String),
    #[error("trace spans zero time")]
    ZeroSpan,
    #[error("malformed trace: {0}")]
    BadTrace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub n_traders: usize,
    pub n_slaves: usize,
    /// A trader is robbed only while its pending work exceeds this fraction
    /// of the work assigned to it.
    pub steal_threshold: f64,
}

impl RoleConfig {
    pub fn new(n_slaves: usize, n_traders: usize) -> Result<Self, SchedError> {
        let roles = Self {
            n_traders,
            n_slaves,
            steal_threshold: 0.0,
        };
        roles.validate()?;
        Ok(roles)
    }

    /// One trader per four slaves, rounded up.
    pub fn with_default_traders(n_slaves: usize) -> Result<Self, SchedError> {
        Self::new(n_slaves, n_slaves.div_ceil(4).max(1))
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        if self.n_traders == 0 || self.n_slaves == 0 {
            return Err(SchedError::InvalidRoles("need at least one trader and one slave".into()));
        }
        if self.n_traders > self.n_slaves {
            return Err(SchedError::InvalidRoles(format!(
                "{} traders exceed {} slaves",
                self.n_traders, self.n_slaves
            )));
        }
        if !(self.steal_threshold >= 0.0) {
            return Err(SchedError::InvalidRoles("steal_threshold must be non-negative".into()));
        }
        Ok(())
    }

    pub fn trader_of_slave(&self, slave: usize) -> usize {
        slave % self.n_traders
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskState {
    Pending,
    Advertised,
    Claimed(usize),
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTask {
    pub work: u64,
    /// Prerequisites of this task.
    pub deps: Vec<TaskId>,
    /// Tree node the task belongs to; orders tasks for trader assignment.
    pub node: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub tasks: Vec<GraphTask>,
}

impl TaskGraph {
    pub fn independent(works: &[u64]) -> Self {
        Self {
            tasks: works
                .iter()
                .map(|&work| GraphTask {
                    work,
                    deps: Vec::new(),
                    node: None,
                })
                .collect(),
        }
    }

    /// One independent task per solver task, tagged with its first leaf.
    pub fn from_task_set(set: &TaskSet) -> Self {
        Self {
            tasks: set
                .tasks
                .iter()
                .map(|t| GraphTask {
                    work: t.work_estimate,
                    deps: Vec::new(),
                    node: t.leaves.first().copied(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn add(&mut self, work: u64, deps: Vec<TaskId>, node: Option<usize>) -> TaskId {
        self.tasks.push(GraphTask { work, deps, node });
        self.tasks.len() - 1
    }

    fn validate(&self) -> Result<(), SchedError> {
        for (id, t) in self.tasks.iter().enumerate() {
            if let Some(&d) = t.deps.iter().find(|&&d| d >= self.tasks.len() || d == id) {
                return Err(SchedError::InvalidGraph(format!("task {id} depends on {d}")));
            }
        }
        Ok(())
    }
}

/// Split tasks, in tree order, into `n_traders` contiguous runs minimizing
/// the heaviest run.
///
/// Tree order is the left-to-right position of each task's node, so every
/// run is a contiguous stretch of leaves. The heaviest run is at most
/// `total / n_traders + max task work`.
pub fn assign_to_traders(tree: Option<&PartitionTree>, graph: &TaskGraph, n_traders: usize) -> Vec<Vec<TaskId>> {
    assert!(n_traders >= 1, "need at least one trader");
    let mut order: Vec<TaskId> = (0..graph.len()).collect();
    if let Some(tree) = tree {
        let pos: BTreeMap<usize, usize> = tree.post_order().into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        order.sort_by_key(|&t| (graph.tasks[t].node.map_or(usize::MAX, |n| pos[&n]), t));
    }
    let works: Vec<u64> = order.iter().map(|&t| graph.tasks[t].work).collect();
    let fits = |cap: u64| {
        let mut runs = 1;
        let mut load = 0;
        for &w in &works {
            if load + w > cap {
                runs += 1;
                load = 0;
            }
            load += w;
        }
        runs <= n_traders
    };
    let (mut lo, mut hi) = (
        works.iter().copied().max().unwrap_or(0),
        works.iter().sum::<u64>(),
    );
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    // Greedy fill up to the optimal cap, then hand the remaining traders
    // one task each from the back so no trader idles needlessly.
    let mut out: Vec<Vec<TaskId>> = vec![Vec::new(); n_traders];
    let mut trader = 0;
    let mut load = 0;
    for (k, &t) in order.iter().enumerate() {
        let remaining_tasks = order.len() - k;
        let remaining_traders = n_traders - trader - 1;
        let must_advance = !out[trader].is_empty() && remaining_tasks <= remaining_traders;
        if !out[trader].is_empty() && (load + works[k] > lo || must_advance) && trader + 1 < n_traders {
            trader += 1;
            load = 0;
        }
        out[trader].push(t);
        load += works[k];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Claim,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_us: f64,
    pub slave: usize,
    pub trader: usize,
    pub task: TaskId,
    pub event: EventKind,
}

/// Claim/complete events in the order they happened. Times are
/// microseconds since the start of the run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskTrace {
    pub n_slaves: usize,
    pub n_traders: usize,
    pub span_us: f64,
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceMeta {
    event: String,
    slaves: usize,
    traders: usize,
    t_us: f64,
}

impl TaskTrace {
    /// Busy intervals `(claim, complete, task)` per slave.
    pub fn intervals(&self) -> Vec<Vec<(f64, f64, TaskId)>> {
        let mut open: BTreeMap<(usize, TaskId), f64> = BTreeMap::new();
        let mut out = vec![Vec::new(); self.n_slaves];
        for e in &self.events {
            match e.event {
                EventKind::Claim => {
                    open.insert((e.slave, e.task), e.t_us);
                }
                EventKind::Complete => {
                    if let Some(start) = open.remove(&(e.slave, e.task)) {
                        out[e.slave].push((start, e.t_us, e.task));
                    }
                }
            }
        }
        out
    }

    /// JSON lines: a meta record with the role counts and span, then one
    /// record per event.
    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        let meta = TraceMeta {
            event: "meta".into(),
            slaves: self.n_slaves,
            traders: self.n_traders,
            t_us: self.span_us,
        };
        writeln!(out, "{}", serde_json::to_string(&meta)?)?;
        for e in &self.events {
            writeln!(out, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, SchedError> {
        let mut trace = TaskTrace::default();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| SchedError::BadTrace(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            if n == 0 {
                let meta: TraceMeta =
                    serde_json::from_str(&line).map_err(|e| SchedError::BadTrace(format!("line 1: {e}")))?;
                trace.n_slaves = meta.slaves;
                trace.n_traders = meta.traders;
                trace.span_us = meta.t_us;
                continue;
            }
            let e: TraceEvent =
                serde_json::from_str(&line).map_err(|e| SchedError::BadTrace(format!("line {}: {e}", n + 1)))?;
            if e.slave >= trace.n_slaves {
                return Err(SchedError::BadTrace(format!("slave {} out of range", e.slave)));
            }
            trace.events.push(e);
        }
        Ok(trace)
    }

    /// Violations of "every prerequisite completes before its dependent is
    /// claimed", checked on both event order and timestamps.
    pub fn happens_before_violations(&self, graph: &TaskGraph) -> usize {
        let mut completed: BTreeMap<TaskId, (usize, f64)> = BTreeMap::new();
        let mut violations = 0;
        for (k, e) in self.events.iter().enumerate() {
            match e.event {
                EventKind::Complete => {
                    completed.insert(e.task, (k, e.t_us));
                }
                EventKind::Claim => {
                    for d in &graph.tasks[e.task].deps {
                        match completed.get(d) {
                            Some(&(kd, td)) if kd < k && td <= e.t_us => {}
                            _ => violations += 1,
                        }
                    }
                }
            }
        }
        violations
    }
}

/// Mean over slaves of busy time divided by the span.
pub fn busy_fraction(trace: &TaskTrace) -> Result<f64, SchedError> {
    if !(trace.span_us > 0.0) || trace.n_slaves == 0 {
        return Err(SchedError::ZeroSpan);
    }
    let busy: f64 = trace
        .intervals()
        .iter()
        .map(|lane| lane.iter().map(|(a, b, _)| b - a).sum::<f64>())
        .sum();
    Ok(busy / (trace.n_slaves as f64 * trace.span_us))
}

enum Claim {
    Task { id: TaskId, trader: usize },
    Wait,
    Finished,
    Deadlock(usize),
}

/// Advertisement board and trader queues.
struct Board {
    roles: RoleConfig,
    owner: Vec<usize>,
    state: Vec<TaskState>,
    missing_deps: Vec<usize>,
    dependents: Vec<Vec<TaskId>>,
    work: Vec<u64>,
    queues: Vec<VecDeque<TaskId>>,
    pending_work: Vec<u64>,
    assigned_work: Vec<u64>,
    done: usize,
    in_flight: usize,
    failed: bool,
}

impl Board {
    fn new(graph: &TaskGraph, roles: &RoleConfig, assignment: &[Vec<TaskId>]) -> Self {
        let n = graph.len();
        let mut owner = vec![0; n];
        let mut assigned_work = vec![0; roles.n_traders];
        for (trader, tasks) in assignment.iter().enumerate() {
            for &t in tasks {
                owner[t] = trader;
                assigned_work[trader] += graph.tasks[t].work;
            }
        }
        let mut dependents = vec![Vec::new(); n];
        for (id, t) in graph.tasks.iter().enumerate() {
            for &d in &t.deps {
                dependents[d].push(id);
            }
        }
        let mut board = Self {
            roles: *roles,
            owner,
            state: vec![TaskState::Pending; n],
            missing_deps: graph.tasks.iter().map(|t| t.deps.len()).collect(),
            dependents,
            work: graph.tasks.iter().map(|t| t.work).collect(),
            queues: vec![VecDeque::new(); roles.n_traders],
            pending_work: vec![0; roles.n_traders],
            assigned_work,
            done: 0,
            in_flight: 0,
            failed: false,
        };
        for trader in 0..roles.n_traders {
            for &t in &assignment[trader] {
                if board.missing_deps[t] == 0 {
                    board.advertise(t);
                }
            }
        }
        board
    }

    fn advertise(&mut self, id: TaskId) {
        let trader = self.owner[id];
        self.state[id] = TaskState::Advertised;
        self.queues[trader].push_back(id);
        self.pending_work[trader] += self.work[id];
    }

    fn take(&mut self, trader: usize, slave: usize) -> Claim {
        let id = self.queues[trader].pop_front().expect("queue is nonempty");
        self.pending_work[trader] -= self.work[id];
        self.state[id] = TaskState::Claimed(slave);
        self.in_flight += 1;
        Claim::Task { id, trader }
    }

    fn claim(&mut self, slave: usize) -> Claim {
        if self.done == self.state.len() || self.failed && self.in_flight == 0 {
            return Claim::Finished;
        }
        if !self.failed {
            let own = self.roles.trader_of_slave(slave);
            if !self.queues[own].is_empty() {
                return self.take(own, slave);
            }
            let victim = (0..self.roles.n_traders)
                .filter(|&t| !self.queues[t].is_empty())
                .filter(|&t| {
                    self.pending_work[t] as f64 >= self.roles.steal_threshold * self.assigned_work[t] as f64
                })
                .max_by(|&a, &b| self.pending_work[a].cmp(&self.pending_work[b]).then(b.cmp(&a)));
            if let Some(t) = victim {
                return self.take(t, slave);
            }
        }
        if self.in_flight == 0 {
            return Claim::Deadlock(self.state.len() - self.done);
        }
        Claim::Wait
    }

    fn complete(&mut self, id: TaskId) {
        self.state[id] = TaskState::Done;
        self.done += 1;
        self.in_flight -= 1;
        for k in 0..self.dependents[id].len() {
            let dep = self.dependents[id][k];
            self.missing_deps[dep] -= 1;
            if self.missing_deps[dep] == 0 {
                self.advertise(dep);
            }
        }
    }
}

pub struct RunOutput<R> {
    pub results: Vec<Arc<R>>,
    pub trace: TaskTrace,
}

/// Executor signature: task id, its payload, and its prerequisites' results
/// in `deps` order.
pub trait Executor<P, R>: Fn(TaskId, P, &[Arc<R>]) -> Result<R, String> + Sync {}
impl<P, R, F: Fn(TaskId, P, &[Arc<R>]) -> Result<R, String> + Sync> Executor<P, R> for F {}

struct Shared<P, R> {
    board: Board,
    payloads: Vec<Option<P>>,
    results: Vec<Option<Arc<R>>>,
    events: Vec<TraceEvent>,
    failure: Option<SchedError>,
    last_ns: u128,
}

impl<P, R> Shared<P, R> {
    /// Strictly increasing timestamps so trace order and time order agree.
    fn stamp(&mut self, start: Instant) -> f64 {
        let ns = start.elapsed().as_nanos().max(self.last_ns + 1);
        self.last_ns = ns;
        ns as f64 / 1e3
    }

    fn inputs(&self, graph: &TaskGraph, id: TaskId) -> Vec<Arc<R>> {
        graph.tasks[id]
            .deps
            .iter()
            .map(|&d| Arc::clone(self.results[d].as_ref().expect("prerequisite finished")))
            .collect()
    }
}

fn check_inputs<P>(graph: &TaskGraph, payloads: &[P], roles: &RoleConfig) -> Result<(), SchedError> {
    roles.validate()?;
    graph.validate()?;
    if payloads.len() != graph.len() {
        return Err(SchedError::InvalidGraph(format!(
            "{} payloads for {} tasks",
            payloads.len(),
            graph.len()
        )));
    }
    Ok(())
}

fn collect<R>(results: Vec<Option<Arc<R>>>) -> Vec<Arc<R>> {
    results.into_iter().map(|r| r.expect("every task ran")).collect()
}

/// Execute every task on `roles.n_slaves` threads.
pub fn run<P, R, F>(
    graph: &TaskGraph,
    payloads: Vec<P>,
    roles: &RoleConfig,
    executor: F,
) -> Result<RunOutput<R>, SchedError>
where
    P: Send,
    R: Send + Sync,
    F: Executor<P, R>,
{
    check_inputs(graph, &payloads, roles)?;
    let assignment = assign_to_traders(None, graph, roles.n_traders);
    let start = Instant::now();
    let shared = Mutex::new(Shared {
        board: Board::new(graph, roles, &assignment),
        payloads: payloads.into_iter().map(Some).collect(),
        results: (0..graph.len()).map(|_| None).collect(),
        events: Vec::with_capacity(2 * graph.len()),
        failure: None,
        last_ns: 0,
    });
    let wake = Condvar::new();
    std::thread::scope(|scope| {
        for slave in 0..roles.n_slaves {
            let (shared, wake, executor) = (&shared, &wake, &executor);
            scope.spawn(move || loop {
                let mut guard = shared.lock().expect("board lock");
                let (id, trader) = loop {
                    match guard.board.claim(slave) {
                        Claim::Task { id, trader } => break (id, trader),
                        Claim::Wait => guard = wake.wait(guard).expect("board lock"),
                        Claim::Finished => return,
                        Claim::Deadlock(remaining) => {
                            guard.failure.get_or_insert(SchedError::DeadlockDetected { remaining });
                            guard.board.failed = true;
                            wake.notify_all();
                            return;
                        }
                    }
                };
                let t_us = guard.stamp(start);
                guard.events.push(TraceEvent {
                    t_us,
                    slave,
                    trader,
                    task: id,
                    event: EventKind::Claim,
                });
                let payload = guard.payloads[id].take().expect("payload present");
                let inputs = guard.inputs(graph, id);
                drop(guard);

                let outcome = executor(id, payload, &inputs);

                let mut guard = shared.lock().expect("board lock");
                match outcome {
                    Ok(result) => {
                        guard.results[id] = Some(Arc::new(result));
                        let t_us = guard.stamp(start);
                        guard.events.push(TraceEvent {
                            t_us,
                            slave,
                            trader,
                            task: id,
                            event: EventKind::Complete,
                        });
                        guard.board.complete(id);
                    }
                    Err(message) => {
                        guard.failure.get_or_insert(SchedError::TaskFailed { id, message });
                        guard.board.failed = true;
                        guard.board.in_flight -= 1;
                    }
                }
                wake.notify_all();
            });
        }
    });
    let shared = shared.into_inner().expect("board lock");
    if let Some(err) = shared.failure {
        return Err(err);
    }
    let span_us = shared.events.last().map_or(0.0, |e| e.t_us);
    Ok(RunOutput {
        results: collect(shared.results),
        trace: TaskTrace {
            n_slaves: roles.n_slaves,
            n_traders: roles.n_traders,
            span_us,
            events: shared.events,
        },
    })
}

/// Single-threaded replay of the scheduling policy in virtual time.
///
/// Each task occupies its slave for `cost(id)` microseconds. Idle slaves
/// claim in index order whenever the clock advances; completions at equal
/// times are processed in slave order. Tasks execute in claim order, so the
/// outcome is a pure function of the inputs.
pub fn run_simulated<P, R, F>(
    graph: &TaskGraph,
    payloads: Vec<P>,
    roles: &RoleConfig,
    executor: F,
    cost: impl Fn(TaskId) -> u64,
) -> Result<RunOutput<R>, SchedError>
where
    F: Fn(TaskId, P, &[Arc<R>]) -> Result<R, String>,
{
    check_inputs(graph, &payloads, roles)?;
    let assignment = assign_to_traders(None, graph, roles.n_traders);
    let mut board = Board::new(graph, roles, &assignment);
    let mut payloads: Vec<Option<P>> = payloads.into_iter().map(Some).collect();
    let mut results: Vec<Option<Arc<R>>> = (0..graph.len()).map(|_| None).collect();
    let mut events = Vec::with_capacity(2 * graph.len());
    // (finish time, task, trader) per busy slave.
    let mut running: Vec<Option<(u64, TaskId, usize)>> = vec![None; roles.n_slaves];
    let mut now = 0u64;
    loop {
        for slave in 0..roles.n_slaves {
            if running[slave].is_some() {
                continue;
            }
            match board.claim(slave) {
                Claim::Task { id, trader } => {
                    events.push(TraceEvent {
                        t_us: now as f64,
                        slave,
                        trader,
                        task: id,
                        event: EventKind::Claim,
                    });
                    let inputs: Vec<Arc<R>> = graph.tasks[id]
                        .deps
                        .iter()
                        .map(|&d| Arc::clone(results[d].as_ref().expect("prerequisite finished")))
                        .collect();
                    let payload = payloads[id].take().expect("payload present");
                    let result = executor(id, payload, &inputs)
                        .map_err(|message| SchedError::TaskFailed { id, message })?;
                    results[id] = Some(Arc::new(result));
                    running[slave] = Some((now + cost(id), id, trader));
                }
                Claim::Wait => {}
                Claim::Finished => {}
                Claim::Deadlock(remaining) => return Err(SchedError::DeadlockDetected { remaining }),
            }
        }
        let Some(next) = running.iter().flatten().map(|r| r.0).min() else {
            break;
        };
        now = next;
        for slave in 0..roles.n_slaves {
            if let Some((t, id, trader)) = running[slave] {
                if t == now {
                    events.push(TraceEvent {
                        t_us: now as f64,
                        slave,
                        trader,
                        task: id,
                        event: EventKind::Complete,
                    });
                    board.complete(id);
                    running[slave] = None;
                }
            }
        }
    }
    if board.done < graph.len() {
        return Err(SchedError::DeadlockDetected {
            remaining: graph.len() - board.done,
        });
    }
    Ok(RunOutput {
        results: collect(results),
        trace: TaskTrace {
            n_slaves: roles.n_slaves,
            n_traders: roles.n_traders,
            span_us: now as f64,
            events,
        },
    })
}

/// Runs partitioned-grid step phases as task waves on the scheduler,
/// collecting every wave's trace.
pub struct SchedulerRunner {
    pub roles: RoleConfig,
    pub graph: TaskGraph,
    traces: Mutex<Vec<TaskTrace>>,
}

impl SchedulerRunner {
    pub fn new(roles: RoleConfig, graph: TaskGraph) -> Self {
        Self {
            roles,
            graph,
            traces: Mutex::new(Vec::new()),
        }
    }

    pub fn take_traces(&self) -> Vec<TaskTrace> {
        std::mem::take(&mut self.traces.lock().expect("trace lock"))
    }
}

impl WaveRunner for SchedulerRunner {
    fn run_wave(
        &self,
        blocks: Vec<TaskBlock>,
        work: &(dyn Fn(&mut TaskBlock) -> Result<(), LatticeError> + Sync),
    ) -> Result<Vec<TaskBlock>, LatticeError> {
        let failure = Mutex::new(None);
        let out = run(&self.graph, blocks, &self.roles, |_, mut block: TaskBlock, _: &[Arc<TaskBlock>]| {
            work(&mut block).map_err(|e| {
                let text = e.to_string();
                failure.lock().expect("failure lock").get_or_insert(e);
                text
            })?;
            Ok(block)
        });
        match out {
            Ok(out) => {
                self.traces.lock().expect("trace lock").push(out.trace);
                Ok(out
                    .results
                    .into_iter()
                    .map(|r| Arc::try_unwrap(r).expect("wave results are unshared"))
                    .collect())
            }
            Err(e) => Err(failure
                .into_inner()
                .expect("failure lock")
                .unwrap_or(LatticeError::DegenerateGeometry(e.to_string()))),
        }
    }
}

/// Concatenate wave traces into one timeline, shifting each wave to start
/// where the previous one ended.
pub fn concat_traces(traces: &[TaskTrace]) -> TaskTrace {
    let mut out = TaskTrace {
        n_slaves: traces.first().map_or(0, |t| t.n_slaves),
        n_traders: traces.first().map_or(0, |t| t.n_traders),
        ..TaskTrace::default()
    };
    for t in traces {
        let offset = out.span_us;
        out.events.extend(t.events.iter().map(|e| TraceEvent {
            t_us: e.t_us + offset,
            ..*e
        }));
        out.span_us += t.span_us;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn chain(n: usize) -> TaskGraph {
        let mut g = TaskGraph::default();
        for i in 0..n {
            g.add(1, if i == 0 { vec![] } else { vec![i - 1] }, None);
        }
        g
    }

    fn unit<P>(id: TaskId, _: P, inputs: &[Arc<u64>]) -> Result<u64, String> {
        Ok(id as u64 * 10 + inputs.iter().map(|r| **r).sum::<u64>())
    }

    #[test]
    fn role_validation() {
        assert!(RoleConfig::new(4, 5).is_err());
        assert!(RoleConfig::new(0, 0).is_err());
        assert_eq!(RoleConfig::with_default_traders(9).unwrap().n_traders, 3);
    }

    #[test]
    fn empty_graph() {
        let out = run(&TaskGraph::default(), Vec::<()>::new(), &RoleConfig::new(2, 1).unwrap(), unit).unwrap();
        assert!(out.results.is_empty());
        assert_eq!(out.trace.span_us, 0.0);
        assert_eq!(busy_fraction(&out.trace), Err(SchedError::ZeroSpan));
    }

    #[test]
    fn chain_completes_in_order() {
        let g = chain(3);
        let out = run(&g, vec![(); 3], &RoleConfig::new(3, 2).unwrap(), unit).unwrap();
        let done: Vec<TaskId> = out
            .trace
            .events
            .iter()
            .filter(|e| e.event == EventKind::Complete)
            .map(|e| e.task)
            .collect();
        assert_eq!(done, vec![0, 1, 2]);
        assert_eq!(*out.results[2], 20 + 10);
        assert_eq!(out.trace.happens_before_violations(&g), 0);
    }

    #[test]
    fn cycles_and_failures_are_reported() {
        let mut g = TaskGraph::default();
        g.add(1, vec![1], None);
        g.add(1, vec![0], None);
        let roles = RoleConfig::new(2, 1).unwrap();
        assert!(matches!(run(&g, vec![(); 2], &roles, unit), Err(SchedError::DeadlockDetected { .. })));
        assert!(matches!(
            run_simulated(&g, vec![(); 2], &roles, unit, |_| 1),
            Err(SchedError::DeadlockDetected { .. })
        ));
        let g = TaskGraph::independent(&[1; 8]);
        let err = run(&g, vec![(); 8], &roles, |id, _: (), _: &[Arc<u64>]| {
            if id == 5 {
                Err("boom".to_string())
            } else {
                Ok(id as u64)
            }
        });
        assert!(matches!(err, Err(SchedError::TaskFailed { id: 5, .. })));
    }

    #[test]
    fn busy_fraction_arithmetic() {
        let ev = |t_us, slave, task, event| TraceEvent {
            t_us,
            slave,
            trader: 0,
            task,
            event,
        };
        let trace = TaskTrace {
            n_slaves: 1,
            n_traders: 1,
            span_us: 10.0,
            events: vec![ev(0.0, 0, 0, EventKind::Claim), ev(10.0, 0, 0, EventKind::Complete)],
        };
        assert_eq!(busy_fraction(&trace).unwrap(), 1.0);
        let trace = TaskTrace {
            n_slaves: 2,
            n_traders: 1,
            span_us: 10.0,
            events: vec![ev(0.0, 0, 0, EventKind::Claim), ev(5.0, 0, 0, EventKind::Complete)],
        };
        assert_eq!(busy_fraction(&trace).unwrap(), 0.25);
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let g = TaskGraph::independent(&[1; 6]);
        let out = run(&g, vec![(); 6], &RoleConfig::new(3, 1).unwrap(), unit).unwrap();
        let mut buf = Vec::new();
        out.trace.write_jsonl(&mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        let record: serde_json::Value = serde_json::from_str(first.lines().nth(1).unwrap()).unwrap();
        for key in ["t_us", "slave", "trader", "task", "event"] {
            assert!(record.get(key).is_some(), "missing {key}");
        }
        let back = TaskTrace::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, out.trace);
    }

    #[test]
    fn trader_assignment() {
        let g = TaskGraph::independent(&[5; 4]);
        assert_eq!(assign_to_traders(None, &g, 1), vec![vec![0, 1, 2, 3]]);
        assert_eq!(assign_to_traders(None, &g, 2), vec![vec![0, 1], vec![2, 3]]);
        let g = TaskGraph::independent(&[1, 2]);
        let a = assign_to_traders(None, &g, 3);
        assert_eq!(a.iter().map(Vec::len).sum::<usize>(), 2);
    }

    #[test]
    fn stealing_spreads_one_traders_work() {
        let g = TaskGraph::independent(&[1; 16]);
        let roles = RoleConfig::new(4, 2).unwrap();
        let out = run_simulated(&g, vec![(); 16], &roles, unit, |_| 100).unwrap();
        assert_eq!(busy_fraction(&out.trace).unwrap(), 1.0);
        assert_eq!(out.trace.span_us, 400.0);
    }

    #[test]
    fn threaded_results_match_serial() {
        let g = TaskGraph::independent(&[1; 12]);
        let out = run(&g, (0..12u64).collect(), &RoleConfig::new(4, 1).unwrap(), |_, p: u64, _: &[Arc<u64>]| {
            std::thread::sleep(Duration::from_millis(1));
            Ok(p * p)
        })
        .unwrap();
        let got: Vec<u64> = out.results.iter().map(|r| **r).collect();
        assert_eq!(got, (0..12u64).map(|p| p * p).collect::<Vec<_>>());
        assert!(out.trace.intervals().iter().all(|lane| lane.windows(2).all(|w| w[0].1 <= w[1].0)));
    }
}
