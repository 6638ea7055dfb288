//! Run classification: data races via happens-before vector clocks,
//! deadlocks via wait-for-graph cycles, and heap/assertion faults surfaced
//! by the VM.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::model::{Event, LockKind, Program};
use crate::sched::{ExecObserver, Trace};
use crate::vm::{BlockReason, FaultKind, StepInfo, TaskState, Tid, VmState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BugKind {
    DataRace,
    Deadlock,
    Uaf,
    NullDeref,
    DoubleFree,
    AssertionFailure,
    Livelock,
    ModelError,
}

impl BugKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BugKind::DataRace => "data_race",
            BugKind::Deadlock => "deadlock",
            BugKind::Uaf => "uaf",
            BugKind::NullDeref => "null_deref",
            BugKind::DoubleFree => "double_free",
            BugKind::AssertionFailure => "assertion_failure",
            BugKind::Livelock => "livelock",
            BugKind::ModelError => "model_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    /// Two unordered conflicting accesses; positions are (tid, pc).
    Race {
        obj: String,
        first: (Tid, usize),
        second: (Tid, usize),
    },
    /// VM fault; `event_index` is the per-subset index the faulting event
    /// would have occupied in the trace.
    Fault { event_index: u64, detail: String },
    /// Wait-for cycle, or a total stall without one.
    Deadlock {
        cycle: Option<Vec<Tid>>,
        blocked: Vec<Tid>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugReport {
    pub kind: BugKind,
    pub evidence: Evidence,
}

/// Maps VM fault kinds 1:1 onto bug reports.
pub fn classify_fault(kind: FaultKind, detail: String, event_index: u64) -> BugReport {
    let kind = match kind {
        FaultKind::NullDeref => BugKind::NullDeref,
        FaultKind::Uaf => BugKind::Uaf,
        FaultKind::DoubleFree => BugKind::DoubleFree,
        FaultKind::AssertionFailure => BugKind::AssertionFailure,
        FaultKind::ModelError => BugKind::ModelError,
    };
    BugReport {
        kind,
        evidence: Evidence::Fault {
            event_index,
            detail,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadlockReport {
    pub cycle: Option<Vec<Tid>>,
    pub blocked: Vec<Tid>,
}

impl DeadlockReport {
    pub fn to_bug(&self) -> BugReport {
        BugReport {
            kind: BugKind::Deadlock,
            evidence: Evidence::Deadlock {
                cycle: self.cycle.clone(),
                blocked: self.blocked.clone(),
            },
        }
    }
}

/// Builds the wait-for graph for a stuck subset and looks for a cycle.
/// Called when the enabled set is empty while tasks remain; a stall without
/// a cycle (e.g. a join on a thread that was never spawned) is still
/// reported as a deadlock, distinguished by `cycle == None`.
pub fn check_deadlock(vm: &VmState, subset: usize) -> DeadlockReport {
    let blocked: Vec<Tid> = vm
        .tasks
        .iter()
        .filter(|t| t.subset == subset && matches!(t.state, TaskState::Blocked(_)))
        .map(|t| t.tid)
        .collect();
    let mut edges: HashMap<Tid, Vec<Tid>> = HashMap::new();
    for &t in &blocked {
        let TaskState::Blocked(reason) = vm.tasks[t].state else {
            continue;
        };
        let out: Vec<Tid> = match reason {
            BlockReason::Lock(l) | BlockReason::SpinWait(l) => {
                vm.subsets[subset].locks[l].holders.iter().copied().collect()
            }
            BlockReason::Join(j) => vec![j],
            BlockReason::Barrier(b) => {
                let arrived = vm.subsets[subset]
                    .barriers
                    .get(&b)
                    .map(|s| s.arrived.clone())
                    .unwrap_or_default();
                vm.tasks
                    .iter()
                    .filter(|o| {
                        o.subset == subset
                            && o.tid != t
                            && o.started
                            && o.state != TaskState::Exited
                            && !arrived.contains(&o.tid)
                    })
                    .map(|o| o.tid)
                    .collect()
            }
        };
        edges.insert(t, out);
    }

    // DFS cycle search restricted to blocked tasks.
    fn find_cycle(
        node: Tid,
        edges: &HashMap<Tid, Vec<Tid>>,
        state: &mut HashMap<Tid, u8>, // 1 = on stack, 2 = done
        stack: &mut Vec<Tid>,
    ) -> Option<Vec<Tid>> {
        state.insert(node, 1);
        stack.push(node);
        if let Some(next) = edges.get(&node) {
            for &n in next {
                match state.get(&n).copied().unwrap_or(0) {
                    1 => {
                        let pos = stack.iter().position(|&s| s == n).unwrap();
                        return Some(stack[pos..].to_vec());
                    }
                    0 if edges.contains_key(&n) => {
                        if let Some(c) = find_cycle(n, edges, state, stack) {
                            return Some(c);
                        }
                    }
                    _ => {}
                }
            }
        }
        stack.pop();
        state.insert(node, 2);
        None
    }

    let mut state = HashMap::new();
    let mut cycle = None;
    for &t in &blocked {
        if state.get(&t).copied().unwrap_or(0) == 0 {
            let mut stack = Vec::new();
            if let Some(c) = find_cycle(t, &edges, &mut state, &mut stack) {
                cycle = Some(c);
                break;
            }
        }
    }
    DeadlockReport { cycle, blocked }
}

// ---------------------------------------------------------------------------
// Happens-before race detection
// ---------------------------------------------------------------------------

type Clock = Vec<u64>;

fn join(a: &mut Clock, b: &Clock) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = (*x).max(*y);
    }
}

#[derive(Debug, Clone)]
struct Access {
    tid: Tid,
    pc: usize,
    epoch: u64,
    write: bool,
}

/// Vector-clock state fed one executed event at a time, in trace order.
/// Edges: program order, release->acquire per lock, spawn->first child
/// event, child exit->join, and barrier all-arrivals->all-departures.
#[derive(Clone)]
pub struct VectorClockState {
    clocks: Vec<Clock>,
    lock_clocks: Vec<Clock>,
    /// Per-object full access history; desk-scale traces are small enough
    /// that whole-trace lookback is fine.
    accesses: HashMap<usize, Vec<Access>>,
    races: Vec<BugReport>,
    seen: HashSet<(usize, (Tid, usize), (Tid, usize))>,
}

impl VectorClockState {
    pub fn new(n_tasks: usize, n_locks: usize) -> Self {
        VectorClockState {
            clocks: vec![vec![0; n_tasks]; n_tasks],
            lock_clocks: vec![vec![0; n_tasks]; n_locks],
            accesses: HashMap::new(),
            races: Vec::new(),
            seen: HashSet::new(),
        }
    }

    fn record_access(&mut self, program: &Program, obj: usize, tid: Tid, pc: usize, write: bool) {
        let epoch = self.clocks[tid][tid];
        let history = self.accesses.entry(obj).or_default();
        for prev in history.iter() {
            if prev.tid == tid || !(prev.write || write) {
                continue;
            }
            if self.clocks[tid][prev.tid] >= prev.epoch {
                continue; // ordered by happens-before
            }
            let a = (prev.tid, prev.pc);
            let b = (tid, pc);
            let key = if a <= b { (obj, a, b) } else { (obj, b, a) };
            if self.seen.insert(key) {
                self.races.push(BugReport {
                    kind: BugKind::DataRace,
                    evidence: Evidence::Race {
                        obj: program.object_name(obj).to_string(),
                        first: key.1,
                        second: key.2,
                    },
                });
            }
        }
        history.push(Access {
            tid,
            pc,
            epoch,
            write,
        });
    }

    pub fn observe(&mut self, program: &Program, tid: Tid, event: &Event, info: &StepInfo) {
        self.clocks[tid][tid] += 1;
        match event {
            Event::Acquire { lock, .. } => {
                if program.locks[*lock].kind != LockKind::Rcu {
                    let lc = self.lock_clocks[*lock].clone();
                    join(&mut self.clocks[tid], &lc);
                }
            }
            Event::Release { lock } => {
                if program.locks[*lock].kind != LockKind::Rcu {
                    let tc = self.clocks[tid].clone();
                    join(&mut self.lock_clocks[*lock], &tc);
                }
            }
            Event::Spawn { thread } => {
                let parent = self.clocks[tid].clone();
                join(&mut self.clocks[*thread], &parent);
            }
            Event::Join { thread } => {
                let child = self.clocks[*thread].clone();
                join(&mut self.clocks[tid], &child);
            }
            Event::BarrierWait { .. } => {
                if let Some(parts) = &info.barrier_released {
                    let mut g = vec![0; self.clocks.len()];
                    for &p in parts {
                        join(&mut g, &self.clocks[p]);
                    }
                    for &p in parts {
                        join(&mut self.clocks[p], &g);
                    }
                }
            }
            _ => {}
        }
        if let Some((obj, write)) = event.accessed_obj() {
            self.record_access(program, obj, tid, info.pc, write);
            // A deref also reads the object the pointer resolved to.
            if let Some(target) = info.deref_target {
                self.record_access(program, target, tid, info.pc, false);
            }
        }
    }

    pub fn into_races(self) -> Vec<BugReport> {
        self.races
    }
}

struct RaceObserver<'p> {
    program: &'p Program,
    vc: VectorClockState,
}

impl ExecObserver for RaceObserver<'_> {
    fn on_event(&mut self, tid: Tid, event: &Event, info: &StepInfo, _vm: &VmState) {
        self.vc.observe(self.program, tid, event, info);
    }
}

/// Re-executes the recorded schedule and reports every pair of conflicting,
/// happens-before-unordered accesses, deduplicated by (object, event pair).
/// Works for single-instance traces (tid == thread id).
pub fn check_race(trace: &Trace, program: &Program) -> Vec<BugReport> {
    let mut obs = RaceObserver {
        program,
        vc: VectorClockState::new(program.threads.len(), program.locks.len()),
    };
    // A diverging or hash-mismatched trace cannot be audited; treat as no
    // findings — callers replay-validate traces separately.
    if crate::sched::execute_forced(program, trace, &mut obs).is_err() {
        return Vec::new();
    }
    obs.vc.into_races()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_program;
    use crate::vm::VmState;

    #[test]
    fn classify_maps_kinds() {
        assert_eq!(
            classify_fault(FaultKind::NullDeref, String::new(), 3).kind,
            BugKind::NullDeref
        );
        assert_eq!(
            classify_fault(FaultKind::Uaf, String::new(), 0).kind,
            BugKind::Uaf
        );
        assert_eq!(
            classify_fault(FaultKind::DoubleFree, String::new(), 0).kind,
            BugKind::DoubleFree
        );
    }

    #[test]
    fn abba_cycle_detected() {
        let p = parse_program(
            "lock l1 mutex\nlock l2 mutex\nthread main:\n spawn a\n spawn b\n join a\n join b\n exit\nthread a:\n acquire l1\n acquire l2\n release l2\n release l1\n exit\nthread b:\n acquire l2\n acquire l1\n release l1\n release l2\n exit\n",
        )
        .unwrap();
        let mut vm = VmState::single(&p);
        // Drive by hand into the stuck state.
        vm.tasks[0].state = TaskState::Running;
        vm.step(0); // spawn a
        vm.step(0); // spawn b
        vm.step(0); // join a -> blocks
        vm.tasks[1].state = TaskState::Running;
        vm.step(1); // a acquires l1
        vm.tasks[2].state = TaskState::Running;
        vm.step(2); // b acquires l2
        vm.step(1); // a wants l2 -> blocks
        vm.step(2); // b wants l1 -> blocks
        assert!(vm.enabled_set(0).is_empty());
        let report = check_deadlock(&vm, 0);
        let cycle = report.cycle.expect("expected a cycle");
        assert_eq!(cycle.len(), 2);
        assert!(cycle.contains(&1) && cycle.contains(&2));
    }

    #[test]
    fn join_stall_without_cycle() {
        // Join on a thread that exited? No: join on a thread nobody spawned
        // is a model error, so block main on a barrier that can't fill.
        let p = parse_program(
            "thread main:\n barrier_wait 0 2\n exit\n",
        )
        .unwrap();
        let mut vm = VmState::single(&p);
        vm.tasks[0].state = TaskState::Running;
        vm.step(0);
        assert!(vm.enabled_set(0).is_empty());
        let report = check_deadlock(&vm, 0);
        assert!(report.cycle.is_none());
        assert_eq!(report.blocked, vec![0]);
    }
}
