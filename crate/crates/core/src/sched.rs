//! The serialized scheduling loop.
//!
//! One task runs at a time. At every scheduling decision the loop asks the
//! strategy to update weights, then dispatches the highest-weight enabled
//! task (ties break to the lowest tid). Scheduling points are:
//!
//! * every blocking transition (lock contention, join, barrier, exit);
//! * a Bernoulli-sampled point before each memory/lock event, gated by the
//!   preemption-safety predicate;
//! * the first safe boundary once the dispatch exceeds `slice_events`
//!   weighted event units (PCT change points and busy-wait demotions reuse
//!   this forced-boundary path);
//! * every `yield`, when safe.
//!
//! Runs are recorded as traces (header + interleaved decision/event
//! records) that serialize to JSONL and replay deterministically.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algos::{build_strategy, DecisionCtx, Strategy, StrategyConfig, StrategyKind};
use crate::model::{Event, Program};
use crate::oracles::{check_deadlock, classify_fault, BugReport, DeadlockReport};
use crate::util::{derive_seed, rng_from_seed};
use crate::vm::{safety_ok, StepInfo, StepResult, TaskState, Tid, VmState};

/// Stream tags for deriving independent rng streams from one run seed.
const TAG_STRATEGY: u64 = 1;
const TAG_SAMPLER: u64 = 2;
const TAG_ESTIMATE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedParams {
    /// Bernoulli rate for sampled scheduling points at eligible events.
    pub sample_rate: f64,
    /// Dispatch budget in event units before a forced (safe) preemption.
    pub slice_events: u32,
    /// Per-subset executed-event cap; exceeding it is a livelock verdict.
    pub max_steps: u64,
    /// Starvation-age bound triggering a fairness override, if any.
    pub fairness_bound: Option<u64>,
    /// Consecutive silent steps by one task before it is demoted and a
    /// forced scheduling point is requested (busy-wait breaker).
    pub spin_window: u32,
}

impl Default for SchedParams {
    fn default() -> Self {
        SchedParams {
            sample_rate: 0.1,
            slice_events: 20,
            max_steps: 1_000_000,
            fairness_bound: Some(100_000),
            spin_window: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reason {
    /// Bernoulli draw before an eligible event succeeded.
    Sampled,
    /// The running task blocked or exited.
    Blocked,
    /// Slice expiry or a strategy/spin-window forced boundary.
    Slice,
    /// A yield, or the initial dispatch.
    Spawnwake,
    /// Starvation override picked the oldest waiter instead of the argmax.
    Fairness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    /// Per-subset executed-event count at the moment of the decision.
    pub step: u64,
    pub subset: usize,
    pub tid: Tid,
    pub reason: Reason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tid: Tid,
    pub ev: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obj: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Record {
    Decision(Decision),
    Event(TraceEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    /// sha256 of the canonical program text ('+'-joined for multi-instance).
    pub program: String,
    pub strategy: String,
    pub pct_depth: u32,
    pub seed: u64,
    pub params: SchedParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<Record>,
}

impl Trace {
    pub fn decisions(&self) -> impl Iterator<Item = &Decision> {
        self.records.iter().filter_map(|r| match r {
            Record::Decision(d) => Some(d),
            _ => None,
        })
    }

    pub fn events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.records.iter().filter_map(|r| match r {
            Record::Event(e) => Some(e),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).unwrap();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, serde_json::Error> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TraceHeader = serde_json::from_str(lines.next().unwrap_or(""))?;
        let mut records = Vec::new();
        for line in lines {
            records.push(serde_json::from_str(line)?);
        }
        Ok(Trace { header, records })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    /// All tasks exited; carries the final heap as (name, value, freed).
    Completed { heap: Vec<(String, i64, bool)> },
    Bug(BugReport),
    Deadlock(DeadlockReport),
    /// The per-subset event budget ran out with tasks still runnable.
    Livelock { steps: u64 },
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Completed { .. } => "completed",
            Outcome::Bug(_) => "bug",
            Outcome::Deadlock(_) => "deadlock",
            Outcome::Livelock { .. } => "livelock",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Completed { .. } => 0,
            Outcome::Bug(_) => 10,
            Outcome::Deadlock(_) => 11,
            Outcome::Livelock { .. } => 12,
        }
    }
}

/// Per-subset scheduling state.
struct Engine {
    strategy: Box<dyn Strategy>,
    sample_rng: ChaCha8Rng,
    sample_rate: f64,
    slice_events: u64,
    current: Option<Tid>,
    dispatch_units: u64,
    /// A forced scheduling point (PCT change point or spin-window demotion)
    /// is pending; taken at the next safe boundary.
    forced_due: bool,
    steps: u64,
    last_event: Option<Event>,
    /// Suppresses boundary checks for the first event after a decision so a
    /// decision always makes progress.
    just_decided: bool,
    outcome: Option<Outcome>,
}

fn decide(
    vm: &mut VmState,
    eng: &mut Engine,
    weights: &mut [f64],
    records: &mut Vec<Record>,
    params: &SchedParams,
    subset: usize,
    reason: Reason,
) {
    let enabled_tids = vm.enabled_set(subset);
    if enabled_tids.is_empty() {
        eng.outcome = Some(Outcome::Deadlock(check_deadlock(vm, subset)));
        return;
    }
    if let Some(last_tid) = eng.current {
        let enabled: Vec<(Tid, Option<&Event>)> = enabled_tids
            .iter()
            .map(|&t| (t, vm.current_event(t)))
            .collect();
        let ctx = DecisionCtx {
            last_tid,
            last_event: eng.last_event.as_ref(),
            last_runnable: vm.tasks[last_tid].enabled,
            enabled: &enabled,
        };
        eng.strategy.update_weights(&ctx, weights);
    }
    // Fairness override: any task past the starvation bound preempts the
    // weight order; oldest wins, ties to the lowest tid.
    let mut chosen = None;
    let mut reason = reason;
    if let Some(bound) = params.fairness_bound {
        let starving = enabled_tids
            .iter()
            .copied()
            .filter(|&t| vm.tasks[t].starvation_age > bound)
            .max_by_key(|&t| (vm.tasks[t].starvation_age, std::cmp::Reverse(t)));
        if let Some(t) = starving {
            chosen = Some(t);
            reason = Reason::Fairness;
        }
    }
    let chosen = chosen.unwrap_or_else(|| {
        // Argmax weight; enabled_tids is ascending, strict `>` keeps the
        // lowest tid on ties.
        let mut best = enabled_tids[0];
        for &t in &enabled_tids[1..] {
            if weights[t] > weights[best] {
                best = t;
            }
        }
        best
    });
    for &t in &enabled_tids {
        if t == chosen {
            vm.tasks[t].starvation_age = 0;
        } else {
            vm.tasks[t].starvation_age += 1;
        }
    }
    if let Some(prev) = eng.current {
        if vm.tasks[prev].state == TaskState::Running {
            vm.tasks[prev].state = TaskState::Enqueued;
        }
    }
    vm.tasks[chosen].state = TaskState::Running;
    eng.current = Some(chosen);
    eng.dispatch_units = 0;
    eng.forced_due = false;
    eng.just_decided = true;
    records.push(Record::Decision(Decision {
        step: eng.steps,
        subset,
        tid: chosen,
        reason,
    }));
}

pub(crate) fn trace_event(
    vm: &VmState,
    subset: usize,
    tid: Tid,
    ev: &Event,
    info: &StepInfo,
) -> TraceEvent {
    let p = &vm.subsets[subset].program;
    let (obj, val) = match ev {
        Event::Load { obj, .. }
        | Event::Store { obj, .. }
        | Event::Deref { obj, .. } => (Some(p.object_name(*obj).to_string()), info.value),
        Event::Alloc { obj } | Event::Free { obj } => {
            (Some(p.object_name(*obj).to_string()), None)
        }
        Event::Acquire { lock, .. } | Event::Release { lock } => {
            (Some(p.locks[*lock].name.clone()), None)
        }
        Event::Spawn { thread } | Event::Join { thread } => {
            (Some(p.threads[*thread].name.clone()), None)
        }
        Event::BarrierWait { barrier, .. } => (None, Some(*barrier as i64)),
        Event::Compute { units } => (None, Some(*units as i64)),
        Event::Br { .. } | Event::Assert { .. } => (None, info.value),
        _ => (None, None),
    };
    TraceEvent {
        tid,
        ev: ev.kind_name().to_string(),
        obj,
        val,
    }
}

/// Advances `subset` until it records its next decision or terminates.
/// Returns false once the subset has an outcome.
#[allow(clippy::too_many_arguments)]
fn advance(
    vm: &mut VmState,
    eng: &mut Engine,
    weights: &mut [f64],
    records: &mut Vec<Record>,
    params: &SchedParams,
    subset: usize,
) -> bool {
    loop {
        if eng.outcome.is_some() {
            return false;
        }
        let Some(cur) = eng.current else {
            // Initial dispatch: weights were seeded by on_task_started.
            decide(vm, eng, weights, records, params, subset, Reason::Spawnwake);
            return eng.outcome.is_none();
        };
        if !eng.just_decided {
            let safe = safety_ok(&vm.tasks[cur]);
            if (eng.forced_due || eng.dispatch_units >= eng.slice_events) && safe {
                decide(vm, eng, weights, records, params, subset, Reason::Slice);
                return eng.outcome.is_none();
            }
            let eligible = vm
                .current_event(cur)
                .map(|e| e.sample_eligible())
                .unwrap_or(false);
            if eligible && safe && eng.sample_rate > 0.0 {
                if eng.sample_rng.gen::<f64>() < eng.sample_rate {
                    decide(vm, eng, weights, records, params, subset, Reason::Sampled);
                    return eng.outcome.is_none();
                }
            }
        }
        eng.just_decided = false;
        match vm.step(cur) {
            StepResult::Progressed { event, info } => {
                records.push(Record::Event(trace_event(vm, subset, cur, &event, &info)));
                eng.steps += 1;
                eng.dispatch_units += info.units as u64;
                if let Event::Spawn { thread } = &event {
                    let child = vm.subsets[subset].tids[*thread];
                    eng.strategy.on_task_started(child, weights);
                }
                if eng.strategy.on_event(cur, weights) {
                    eng.forced_due = true;
                }
                if vm.tasks[cur].consecutive_silent_steps >= params.spin_window {
                    eng.forced_due = true;
                    eng.strategy.demote(cur, weights);
                    vm.tasks[cur].consecutive_silent_steps = 0;
                }
                let was_yield = matches!(event, Event::Yield);
                eng.last_event = Some(event);
                if eng.steps >= params.max_steps {
                    eng.outcome = Some(Outcome::Livelock { steps: eng.steps });
                    return false;
                }
                if was_yield && safety_ok(&vm.tasks[cur]) {
                    decide(vm, eng, weights, records, params, subset, Reason::Spawnwake);
                    return eng.outcome.is_none();
                }
            }
            StepResult::NowBlocked(_) => {
                decide(vm, eng, weights, records, params, subset, Reason::Blocked);
                return eng.outcome.is_none();
            }
            StepResult::Exited { .. } => {
                records.push(Record::Event(TraceEvent {
                    tid: cur,
                    ev: "exit".to_string(),
                    obj: None,
                    val: None,
                }));
                eng.steps += 1;
                eng.last_event = Some(Event::Exit);
                if vm.live_task_count(subset) == 0 {
                    eng.outcome = Some(Outcome::Completed {
                        heap: vm.heap_snapshot(subset),
                    });
                    return false;
                }
                decide(vm, eng, weights, records, params, subset, Reason::Blocked);
                return eng.outcome.is_none();
            }
            StepResult::Fault { kind, detail } => {
                eng.outcome = Some(Outcome::Bug(classify_fault(kind, detail, eng.steps)));
                return false;
            }
        }
    }
}

/// Runs one instance per program, each as an isolated scheduling subset,
/// interleaved round-robin one dispatch segment at a time. Each subset has
/// its own strategy and rng streams, so its decision sequence matches a
/// standalone run with the same config.
pub fn run_controlled_multi(
    programs: &[&Program],
    cfgs: &[StrategyConfig],
    params: &SchedParams,
) -> (Trace, Vec<Outcome>) {
    assert_eq!(programs.len(), cfgs.len());
    let mut vm = VmState::load(programs);
    let mut weights = vec![0.0f64; vm.tasks.len()];
    let mut engines: Vec<Engine> = Vec::new();
    for (si, cfg) in cfgs.iter().enumerate() {
        let n = programs[si].threads.len();
        let estimate = if cfg.kind == StrategyKind::Pct {
            estimate_event_count(programs[si], cfg.rng_seed, params)
        } else {
            1
        };
        let mut strategy = build_strategy(
            &StrategyConfig {
                rng_seed: derive_seed(cfg.rng_seed, TAG_STRATEGY),
                ..*cfg
            },
            n,
            estimate,
        );
        let entry = vm.subsets[si].tids[programs[si].entry];
        strategy.on_task_started(entry, &mut weights);
        // The OS-like baseline only reschedules at voluntary points: no
        // sampled preemptions and a wide slice.
        let (rate, slice) = if cfg.kind == StrategyKind::OsLike {
            (0.0, 200)
        } else {
            (params.sample_rate, params.slice_events as u64)
        };
        engines.push(Engine {
            strategy,
            sample_rng: rng_from_seed(derive_seed(cfg.rng_seed, TAG_SAMPLER)),
            sample_rate: rate,
            slice_events: slice,
            current: None,
            dispatch_units: 0,
            forced_due: false,
            steps: 0,
            last_event: None,
            just_decided: false,
            outcome: None,
        });
    }
    let mut records = Vec::new();
    loop {
        let mut active = false;
        for si in 0..engines.len() {
            if engines[si].outcome.is_none() {
                advance(&mut vm, &mut engines[si], &mut weights, &mut records, params, si);
                active = true;
            }
        }
        if !active {
            break;
        }
    }
    let header = TraceHeader {
        program: programs
            .iter()
            .map(|p| p.sha256())
            .collect::<Vec<_>>()
            .join("+"),
        strategy: cfgs
            .iter()
            .map(|c| c.kind.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        pct_depth: cfgs[0].pct_depth,
        seed: cfgs[0].rng_seed,
        params: *params,
    };
    let outcomes = engines.into_iter().map(|e| e.outcome.unwrap()).collect();
    (Trace { header, records }, outcomes)
}

pub fn run_controlled(
    program: &Program,
    cfg: &StrategyConfig,
    params: &SchedParams,
) -> (Trace, Outcome) {
    let (trace, mut outcomes) =
        run_controlled_multi(&[program], std::slice::from_ref(cfg), params);
    (trace, outcomes.pop().unwrap())
}

/// PCT's event-count estimate E: the executed-event count of an RW trial run
/// on a derived seed (at least 1).
pub fn estimate_event_count(program: &Program, seed: u64, params: &SchedParams) -> u64 {
    let cfg = StrategyConfig {
        kind: StrategyKind::Rw,
        pct_depth: 1,
        rng_seed: derive_seed(seed, TAG_ESTIMATE),
    };
    let (trace, _) = run_controlled(program, &cfg, params);
    (trace.events().count() as u64).max(1)
}

// ---------------------------------------------------------------------------
// Forced re-execution: replay, auditing, observer hooks
// ---------------------------------------------------------------------------

pub trait ExecObserver {
    fn on_event(&mut self, _tid: Tid, _event: &Event, _info: &StepInfo, _vm: &VmState) {}
    /// `prev_safety`: the safety predicate of the previously running task at
    /// this boundary, before any state transition; None for the initial
    /// decision.
    fn on_decision(&mut self, _d: &Decision, _prev_safety: Option<bool>) {}
}

pub struct NullObserver;
impl ExecObserver for NullObserver {}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("trace was recorded for program {expected}, not {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("trace diverges at record {record}: {detail}")]
    Divergence { record: usize, detail: String },
}

fn diverge(record: usize, detail: impl Into<String>) -> ReplayError {
    ReplayError::Divergence {
        record,
        detail: detail.into(),
    }
}

/// Re-executes a single-instance trace step by step, verifying each record
/// against the VM, and returns the outcome the original run must have had.
pub fn execute_forced(
    program: &Program,
    trace: &Trace,
    obs: &mut dyn ExecObserver,
) -> Result<Outcome, ReplayError> {
    let hash = program.sha256();
    if trace.header.program != hash {
        return Err(ReplayError::HashMismatch {
            expected: trace.header.program.clone(),
            actual: hash,
        });
    }
    let mut vm = VmState::single(program);
    let mut current: Option<Tid> = None;
    let mut steps = 0u64;
    for (ri, rec) in trace.records.iter().enumerate() {
        match rec {
            Record::Decision(d) => {
                if d.subset != 0 {
                    return Err(diverge(ri, "multi-instance traces cannot be replayed"));
                }
                let prev_safety = current.map(|c| safety_ok(&vm.tasks[c]));
                // A `blocked` decision after a still-running task means the
                // task attempted its next event and blocked (no event record
                // is emitted for the attempt). Reproduce the attempt so
                // waiter lists match the original run.
                if d.reason == Reason::Blocked {
                    if let Some(c) = current {
                        if vm.tasks[c].state == TaskState::Running {
                            match vm.step(c) {
                                StepResult::NowBlocked(_) => {}
                                other => {
                                    return Err(diverge(
                                        ri,
                                        format!("expected task {} to block, got {:?}", c, other),
                                    ))
                                }
                            }
                        }
                    }
                }
                if d.step != steps {
                    return Err(diverge(
                        ri,
                        format!("decision at step {}, trace executed {}", d.step, steps),
                    ));
                }
                if !vm.enabled_set(0).contains(&d.tid) {
                    return Err(diverge(ri, format!("task {} is not enabled", d.tid)));
                }
                obs.on_decision(d, prev_safety);
                if let Some(c) = current {
                    if vm.tasks[c].state == TaskState::Running {
                        vm.tasks[c].state = TaskState::Enqueued;
                    }
                }
                vm.tasks[d.tid].state = TaskState::Running;
                current = Some(d.tid);
            }
            Record::Event(e) => {
                let Some(c) = current else {
                    return Err(diverge(ri, "event before any decision"));
                };
                if e.tid != c {
                    return Err(diverge(
                        ri,
                        format!("event attributed to task {}, but {} is running", e.tid, c),
                    ));
                }
                match vm.step(c) {
                    StepResult::Progressed { event, info } => {
                        if event.kind_name() != e.ev {
                            return Err(diverge(
                                ri,
                                format!("executed `{}`, trace says `{}`", event.kind_name(), e.ev),
                            ));
                        }
                        steps += 1;
                        obs.on_event(c, &event, &info, &vm);
                    }
                    StepResult::Exited { .. } => {
                        if e.ev != "exit" {
                            return Err(diverge(
                                ri,
                                format!("task exited, trace says `{}`", e.ev),
                            ));
                        }
                        steps += 1;
                    }
                    other => {
                        return Err(diverge(
                            ri,
                            format!("expected an executed event, got {:?}", other),
                        ))
                    }
                }
            }
        }
    }
    // End of trace: classify the final state the way the recorder did.
    let nrec = trace.records.len();
    if vm.live_task_count(0) == 0 {
        return Ok(Outcome::Completed {
            heap: vm.heap_snapshot(0),
        });
    }
    if steps >= trace.header.params.max_steps {
        return Ok(Outcome::Livelock { steps });
    }
    if let Some(c) = current {
        if vm.tasks[c].state == TaskState::Running {
            return match vm.step(c) {
                StepResult::Fault { kind, detail } => {
                    Ok(Outcome::Bug(classify_fault(kind, detail, steps)))
                }
                StepResult::NowBlocked(_) => {
                    if vm.enabled_set(0).is_empty() {
                        Ok(Outcome::Deadlock(check_deadlock(&vm, 0)))
                    } else {
                        Err(diverge(nrec, "trace ended with runnable tasks"))
                    }
                }
                _ => Err(diverge(nrec, "trace ended with runnable tasks")),
            };
        }
    }
    if vm.enabled_set(0).is_empty() {
        Ok(Outcome::Deadlock(check_deadlock(&vm, 0)))
    } else {
        Err(diverge(nrec, "trace ended with runnable tasks"))
    }
}

/// Deterministically re-executes a recorded trace and returns its outcome.
pub fn replay(program: &Program, trace: &Trace) -> Result<Outcome, ReplayError> {
    execute_forced(program, trace, &mut NullObserver)
}

struct SafetyAuditor {
    violations: Vec<u64>,
}

impl ExecObserver for SafetyAuditor {
    fn on_decision(&mut self, d: &Decision, prev_safety: Option<bool>) {
        // Voluntary points must be safe; `blocked` is involuntary and
        // `fairness` may override at any boundary kind.
        if matches!(d.reason, Reason::Sampled | Reason::Slice | Reason::Spawnwake)
            && prev_safety == Some(false)
        {
            self.violations.push(d.step);
        }
    }
}

/// Verifies that no voluntary scheduling point in `trace` was taken while
/// the running task's safety predicate was false.
pub fn audit_safety(program: &Program, trace: &Trace) -> Result<(), String> {
    let mut auditor = SafetyAuditor {
        violations: Vec::new(),
    };
    execute_forced(program, trace, &mut auditor).map_err(|e| e.to_string())?;
    if auditor.violations.is_empty() {
        Ok(())
    } else {
        Err(format!(
            "unsafe voluntary scheduling points at steps {:?}",
            auditor.violations
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_program;

    fn cfg(kind: StrategyKind, seed: u64) -> StrategyConfig {
        StrategyConfig::new(kind, seed)
    }

    const RACE_SRC: &str = "object x 0\n\
        thread main:\n spawn a\n spawn b\n join a\n join b\n exit\n\
        thread a:\n barrier_wait 0 2\n store x 1\n exit\n\
        thread b:\n barrier_wait 0 2\n load x r0\n exit\n";

    #[test]
    fn single_thread_events_in_program_order() {
        let p = parse_program(
            "object x 0\nthread main:\n store x 1\n load x r0\n compute 2\n exit\n",
        )
        .unwrap();
        let (trace, outcome) =
            run_controlled(&p, &cfg(StrategyKind::Rw, 7), &SchedParams::default());
        assert!(matches!(outcome, Outcome::Completed { .. }));
        let evs: Vec<&str> = trace.events().map(|e| e.ev.as_str()).collect();
        assert_eq!(evs, vec!["store", "load", "compute", "exit"]);
        assert_eq!(trace.events().count(), 4);
    }

    #[test]
    fn completed_heap_snapshot() {
        let p =
            parse_program("object x 0\nthread main:\n store x 5\n exit\n").unwrap();
        let (_, outcome) =
            run_controlled(&p, &cfg(StrategyKind::Rw, 1), &SchedParams::default());
        match outcome {
            Outcome::Completed { heap } => {
                assert_eq!(heap, vec![("x".to_string(), 5, false)]);
            }
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let p = parse_program(RACE_SRC).unwrap();
        for kind in [
            StrategyKind::Rw,
            StrategyKind::Rp,
            StrategyKind::Pos,
            StrategyKind::Pct,
        ] {
            let (t1, o1) = run_controlled(&p, &cfg(kind, 99), &SchedParams::default());
            let (t2, o2) = run_controlled(&p, &cfg(kind, 99), &SchedParams::default());
            assert_eq!(t1.to_jsonl(), t2.to_jsonl(), "{:?}", kind);
            assert_eq!(o1, o2);
        }
    }

    #[test]
    fn seeds_reach_both_orders() {
        let p = parse_program(RACE_SRC).unwrap();
        let mut store_first = 0;
        let mut load_first = 0;
        for seed in 0..40 {
            let (trace, _) =
                run_controlled(&p, &cfg(StrategyKind::Rw, seed), &SchedParams::default());
            let first = trace
                .events()
                .find(|e| e.ev == "store" || e.ev == "load")
                .unwrap();
            if first.ev == "store" {
                store_first += 1;
            } else {
                load_first += 1;
            }
        }
        assert!(store_first > 0 && load_first > 0);
    }

    #[test]
    fn jsonl_round_trip() {
        let p = parse_program(RACE_SRC).unwrap();
        let (trace, _) =
            run_controlled(&p, &cfg(StrategyKind::Pos, 3), &SchedParams::default());
        let text = trace.to_jsonl();
        let back = Trace::from_jsonl(&text).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn replay_reproduces_outcomes() {
        let srcs = [
            RACE_SRC,
            "object p 2\nobject t 9\nthread main:\n spawn a\n deref p r0\n join a\n exit\nthread a:\n store p 0\n exit\n",
            "lock l1 mutex\nlock l2 mutex\nthread main:\n spawn a\n spawn b\n join a\n join b\n exit\nthread a:\n acquire l1\n acquire l2\n release l2\n release l1\n exit\nthread b:\n acquire l2\n acquire l1\n release l1\n release l2\n exit\n",
        ];
        for src in srcs {
            let p = parse_program(src).unwrap();
            for seed in 0..30 {
                for kind in [StrategyKind::Rw, StrategyKind::Pos, StrategyKind::Pct] {
                    let (trace, outcome) =
                        run_controlled(&p, &cfg(kind, seed), &SchedParams::default());
                    let replayed = replay(&p, &trace).unwrap_or_else(|e| {
                        panic!("{:?} seed {}: {}", kind, seed, e)
                    });
                    assert_eq!(replayed, outcome, "{:?} seed {}", kind, seed);
                }
            }
        }
    }

    #[test]
    fn replay_rejects_wrong_program() {
        let p = parse_program(RACE_SRC).unwrap();
        let other =
            parse_program("object y 0\nthread main:\n store y 1\n exit\n").unwrap();
        let (trace, _) =
            run_controlled(&p, &cfg(StrategyKind::Rw, 5), &SchedParams::default());
        assert!(matches!(
            replay(&other, &trace),
            Err(ReplayError::HashMismatch { .. })
        ));
    }

    #[test]
    fn replay_detects_tampering() {
        let p = parse_program(RACE_SRC).unwrap();
        let (mut trace, _) =
            run_controlled(&p, &cfg(StrategyKind::Rw, 5), &SchedParams::default());
        // Flip the chosen tid of a mid-trace decision to another task.
        let idx = trace
            .records
            .iter()
            .position(|r| matches!(r, Record::Decision(d) if d.step > 2))
            .unwrap();
        if let Record::Decision(d) = &mut trace.records[idx] {
            d.tid = (d.tid + 1) % 3;
        }
        assert!(replay(&p, &trace).is_err());
    }

    #[test]
    fn oslike_takes_no_sampled_points() {
        let p = parse_program(RACE_SRC).unwrap();
        for seed in 0..20 {
            let (trace, _) =
                run_controlled(&p, &cfg(StrategyKind::OsLike, seed), &SchedParams::default());
            assert!(trace.decisions().all(|d| d.reason != Reason::Sampled));
        }
    }

    #[test]
    fn sampled_points_respect_safety() {
        // All memory traffic sits inside a preempt_disable region, so no
        // sampled or slice decision may land there.
        let src = "object x 0\n\
            thread main:\n spawn a\n join a\n exit\n\
            thread a:\n preempt_disable\n store x 1\n load x r0\n store x 2\n load x r1\n preempt_enable\n exit\n";
        let p = parse_program(src).unwrap();
        let params = SchedParams {
            sample_rate: 1.0,
            slice_events: 1,
            ..SchedParams::default()
        };
        for seed in 0..20 {
            let (trace, outcome) = run_controlled(&p, &cfg(StrategyKind::Rw, seed), &params);
            assert!(matches!(outcome, Outcome::Completed { .. }));
            audit_safety(&p, &trace).unwrap();
        }
    }

    #[test]
    fn slice_preempts_long_dispatch() {
        let src = "object x 0\n\
            thread main:\n spawn a\n join a\n exit\n\
            thread a:\n compute 30\n compute 30\n exit\n";
        let p = parse_program(src).unwrap();
        let params = SchedParams {
            sample_rate: 0.0,
            slice_events: 20,
            ..SchedParams::default()
        };
        let (trace, _) = run_controlled(&p, &cfg(StrategyKind::Rw, 1), &params);
        assert!(trace.decisions().any(|d| d.reason == Reason::Slice));
    }

    #[test]
    fn livelock_on_infinite_loop() {
        let src = "object x 0\n\
            thread main:\n label top\n load x r0\n goto top\n";
        let p = parse_program(src).unwrap();
        let params = SchedParams {
            max_steps: 500,
            ..SchedParams::default()
        };
        let (trace, outcome) = run_controlled(&p, &cfg(StrategyKind::Rw, 3), &params);
        assert_eq!(outcome, Outcome::Livelock { steps: 500 });
        assert_eq!(replay(&p, &trace).unwrap(), outcome);
    }

    #[test]
    fn deadlock_outcome_and_replay() {
        let src = "lock l1 mutex\nlock l2 mutex\n\
            thread main:\n spawn a\n spawn b\n join a\n join b\n exit\n\
            thread a:\n acquire l1\n yield\n acquire l2\n release l2\n release l1\n exit\n\
            thread b:\n acquire l2\n yield\n acquire l1\n release l1\n release l2\n exit\n";
        let p = parse_program(src).unwrap();
        let mut saw_deadlock = false;
        for seed in 0..40 {
            let (trace, outcome) =
                run_controlled(&p, &cfg(StrategyKind::Rw, seed), &SchedParams::default());
            if let Outcome::Deadlock(report) = &outcome {
                saw_deadlock = true;
                let cycle = report.cycle.as_ref().expect("cycle");
                assert_eq!(cycle.len(), 2);
                assert_eq!(replay(&p, &trace).unwrap(), outcome);
            }
        }
        assert!(saw_deadlock);
    }

    #[test]
    fn fairness_override_fires() {
        // Two always-runnable spinners under PCT depth 1: static priorities
        // never change, so without fairness the loser starves forever.
        let src = "object x 0\n\
            thread main:\n spawn a\n label top\n load x r0\n yield\n goto top\n\
            thread a:\n label top\n load x r1\n yield\n goto top\n";
        let p = parse_program(src).unwrap();
        let params = SchedParams {
            sample_rate: 0.0,
            fairness_bound: Some(10),
            max_steps: 2_000,
            ..SchedParams::default()
        };
        let c = StrategyConfig {
            kind: StrategyKind::Pct,
            pct_depth: 1,
            rng_seed: 4,
        };
        let (trace, outcome) = run_controlled(&p, &c, &params);
        assert!(matches!(outcome, Outcome::Livelock { .. }));
        assert!(trace.decisions().any(|d| d.reason == Reason::Fairness));
        let scheduled: std::collections::HashSet<Tid> =
            trace.decisions().map(|d| d.tid).collect();
        assert!(scheduled.contains(&0) && scheduled.contains(&1));
    }

    #[test]
    fn spin_window_breaks_busy_wait() {
        // `a` spins on x until main sets it; without demotion a high-priority
        // spinner under PCT would monopolize the subset forever.
        let src = "object x 0\n\
            thread main:\n spawn a\n store x 1\n join a\n exit\n\
            thread a:\n label top\n load x r0\n br r0 == 0 top\n exit\n";
        let p = parse_program(src).unwrap();
        let params = SchedParams {
            sample_rate: 0.0,
            slice_events: 1_000_000,
            spin_window: 16,
            fairness_bound: None,
            max_steps: 100_000,
            ..SchedParams::default()
        };
        let mut completed = 0;
        for seed in 0..20 {
            let c = StrategyConfig {
                kind: StrategyKind::Pct,
                pct_depth: 1,
                rng_seed: seed,
            };
            let (_, outcome) = run_controlled(&p, &c, &params);
            if matches!(outcome, Outcome::Completed { .. }) {
                completed += 1;
            }
        }
        assert_eq!(completed, 20);
    }

    #[test]
    fn multi_instance_projection_matches_single() {
        let p = parse_program(RACE_SRC).unwrap();
        let c0 = cfg(StrategyKind::Rw, 11);
        let c1 = cfg(StrategyKind::Pos, 23);
        let params = SchedParams::default();
        let (multi, outcomes) = run_controlled_multi(&[&p, &p], &[c0, c1], &params);
        let (single0, o0) = run_controlled(&p, &c0, &params);
        let (single1, o1) = run_controlled(&p, &c1, &params);
        assert_eq!(outcomes[0], o0);
        // Subset 1's tids are offset by the thread count of subset 0.
        match (&outcomes[1], &o1) {
            (Outcome::Completed { heap: a }, Outcome::Completed { heap: b }) => {
                assert_eq!(a, b)
            }
            (a, b) => assert_eq!(a.label(), b.label()),
        }
        let proj: Vec<(u64, Tid, Reason)> = multi
            .decisions()
            .filter(|d| d.subset == 0)
            .map(|d| (d.step, d.tid, d.reason))
            .collect();
        let solo: Vec<(u64, Tid, Reason)> = single0
            .decisions()
            .map(|d| (d.step, d.tid, d.reason))
            .collect();
        assert_eq!(proj, solo);
        let proj1: Vec<(u64, Tid, Reason)> = multi
            .decisions()
            .filter(|d| d.subset == 1)
            .map(|d| (d.step, d.tid - 3, d.reason))
            .collect();
        let solo1: Vec<(u64, Tid, Reason)> = single1
            .decisions()
            .map(|d| (d.step, d.tid, d.reason))
            .collect();
        assert_eq!(proj1, solo1);
    }

    #[test]
    fn estimate_counts_events() {
        let p = parse_program(
            "object x 0\nthread main:\n store x 1\n load x r0\n compute 1\n yield\n exit\n",
        )
        .unwrap();
        assert_eq!(
            estimate_event_count(&p, 9, &SchedParams::default()),
            5
        );
    }
}
