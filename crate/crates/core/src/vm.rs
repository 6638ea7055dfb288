//! Event-at-a-time interpreter.
//!
//! A `VmState` owns the heap, lock and per-task state for one or more loaded
//! program instances (scheduling subsets). `step` consumes exactly one event
//! for a chosen task, or records a blocking transition or fault. The
//! scheduler loop is the single owner of a `VmState`; distinct instances
//! share nothing.

use std::collections::BTreeSet;
use std::collections::HashMap;

use crate::model::{AcqMode, Event, Expr, LockKind, Program, ThreadId};

pub type Tid = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockReason {
    /// Waiting for a mutex/rwsem.
    Lock(usize),
    /// Contended spin acquire. Modeled as blocking: in a strictly serialized
    /// executor a true busy spin can never be satisfied by the holder.
    SpinWait(usize),
    Join(Tid),
    Barrier(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Init,
    Enqueued,
    Running,
    Blocked(BlockReason),
    Exited,
}

#[derive(Debug, Clone)]
pub struct TaskContext {
    pub tid: Tid,
    pub subset: usize,
    /// Thread index within the subset's program.
    pub thread: ThreadId,
    pub pc: usize,
    pub registers: HashMap<String, i64>,
    pub state: TaskState,
    pub preempt_count: u32,
    pub irqs_disabled: bool,
    pub rcu_depth: u32,
    pub non_block_count: u32,
    pub weight: f64,
    pub enabled: bool,
    pub started: bool,
    pub starvation_age: u64,
    pub consecutive_silent_steps: u32,
}

impl TaskContext {
    fn new(tid: Tid, subset: usize, thread: ThreadId) -> Self {
        TaskContext {
            tid,
            subset,
            thread,
            pc: 0,
            registers: HashMap::new(),
            state: TaskState::Init,
            preempt_count: 0,
            irqs_disabled: false,
            rcu_depth: 0,
            non_block_count: 0,
            weight: 0.0,
            enabled: false,
            started: false,
            starvation_age: 0,
            consecutive_silent_steps: 0,
        }
    }
}

/// The preemption-safety predicate: voluntary scheduler invocation is only
/// allowed while the running task holds no preemption/irq/rcu/non-block
/// state.
pub fn safety_ok(ctx: &TaskContext) -> bool {
    ctx.state == TaskState::Running
        && ctx.non_block_count == 0
        && ctx.preempt_count == 0
        && !ctx.irqs_disabled
        && ctx.rcu_depth == 0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjCell {
    pub value: i64,
    pub freed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LockState {
    pub holders: BTreeSet<Tid>,
    pub write_held: bool,
    pub waiters: Vec<(Tid, AcqMode)>,
}

#[derive(Debug, Clone, Default)]
pub struct BarrierState {
    pub count: u32,
    pub arrived: BTreeSet<Tid>,
}

#[derive(Debug, Clone)]
pub struct SubsetState {
    pub program: Program,
    pub objects: Vec<ObjCell>,
    pub locks: Vec<LockState>,
    pub barriers: HashMap<u32, BarrierState>,
    /// Global tids of this subset's tasks, indexed by thread id.
    pub tids: Vec<Tid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    NullDeref,
    Uaf,
    DoubleFree,
    AssertionFailure,
    ModelError,
}

/// Extra facts about an executed event, consumed by trace recording and the
/// happens-before observer.
#[derive(Debug, Clone, Default)]
pub struct StepInfo {
    /// Value stored/loaded/asserted, or the branch decision (0/1).
    pub value: Option<i64>,
    /// For `deref`: the object id the pointer cell resolved to.
    pub deref_target: Option<usize>,
    /// Slice units consumed (1 for everything but `compute`).
    pub units: u32,
    pub woken: Vec<Tid>,
    /// Set when this event completed a barrier: every participant tid.
    pub barrier_released: Option<Vec<Tid>>,
    /// pc of the executed event (before the pc advanced).
    pub pc: usize,
}

#[derive(Debug, Clone)]
pub enum StepResult {
    Progressed { event: Event, info: StepInfo },
    NowBlocked(BlockReason),
    Exited { woken: Vec<Tid> },
    Fault { kind: FaultKind, detail: String },
}

#[derive(Debug, Clone)]
pub struct VmState {
    pub subsets: Vec<SubsetState>,
    pub tasks: Vec<TaskContext>,
}

impl VmState {
    /// Loads one instance per program, each in its own scheduling subset.
    pub fn load(programs: &[&Program]) -> VmState {
        let mut tasks = Vec::new();
        let mut subsets = Vec::new();
        for (si, p) in programs.iter().enumerate() {
            let mut tids = Vec::new();
            for thread in 0..p.threads.len() {
                let tid = tasks.len();
                tids.push(tid);
                tasks.push(TaskContext::new(tid, si, thread));
            }
            subsets.push(SubsetState {
                program: (*p).clone(),
                objects: p
                    .objects
                    .iter()
                    .map(|o| ObjCell {
                        value: o.init,
                        freed: false,
                    })
                    .collect(),
                locks: p.locks.iter().map(|_| LockState::default()).collect(),
                barriers: HashMap::new(),
                tids,
            });
        }
        let mut vm = VmState { subsets, tasks };
        for si in 0..vm.subsets.len() {
            let entry = vm.subsets[si].program.entry;
            let tid = vm.subsets[si].tids[entry];
            vm.tasks[tid].started = true;
            vm.tasks[tid].enabled = true;
            vm.tasks[tid].state = TaskState::Enqueued;
        }
        vm
    }

    pub fn single(program: &Program) -> VmState {
        VmState::load(&[program])
    }

    /// Tasks of `subset` that are started and enabled.
    pub fn enabled_set(&self, subset: usize) -> Vec<Tid> {
        self.tasks
            .iter()
            .filter(|t| t.subset == subset && t.started && t.enabled)
            .map(|t| t.tid)
            .collect()
    }

    pub fn live_task_count(&self, subset: usize) -> usize {
        self.tasks
            .iter()
            .filter(|t| t.subset == subset && t.started && t.state != TaskState::Exited)
            .count()
    }

    pub fn current_event(&self, tid: Tid) -> Option<&Event> {
        let t = &self.tasks[tid];
        self.subsets[t.subset].program.threads[t.thread]
            .events
            .get(t.pc)
    }

    fn eval(&self, tid: Tid, e: &Expr) -> i64 {
        let regs = &self.tasks[tid].registers;
        let reg = |name: &str| regs.get(name).copied().unwrap_or(0);
        match e {
            Expr::Const(v) => *v,
            Expr::Reg(r) => reg(r),
            Expr::Bin { reg: r, op, rhs } => {
                let l = reg(r);
                match op {
                    crate::model::BinOp::Add => l.wrapping_add(*rhs),
                    crate::model::BinOp::Eq => (l == *rhs) as i64,
                    crate::model::BinOp::Ne => (l != *rhs) as i64,
                    crate::model::BinOp::Lt => (l < *rhs) as i64,
                }
            }
        }
    }

    fn block(&mut self, tid: Tid, reason: BlockReason) -> StepResult {
        let t = &mut self.tasks[tid];
        t.state = TaskState::Blocked(reason);
        t.enabled = false;
        StepResult::NowBlocked(reason)
    }

    fn wake(&mut self, tid: Tid) {
        let t = &mut self.tasks[tid];
        if matches!(t.state, TaskState::Blocked(_)) {
            t.state = TaskState::Enqueued;
            t.enabled = true;
        }
    }

    fn fault(kind: FaultKind, detail: impl Into<String>) -> StepResult {
        StepResult::Fault {
            kind,
            detail: detail.into(),
        }
    }

    fn exit_task(&mut self, tid: Tid) -> StepResult {
        self.tasks[tid].state = TaskState::Exited;
        self.tasks[tid].enabled = false;
        // Wake joiners.
        let woken: Vec<Tid> = self
            .tasks
            .iter()
            .filter(|t| matches!(t.state, TaskState::Blocked(BlockReason::Join(j)) if j == tid))
            .map(|t| t.tid)
            .collect();
        for w in &woken {
            self.wake(*w);
        }
        StepResult::Exited { woken }
    }

    /// Executes one event for `tid`. The task must be started, enabled and
    /// not exited; the caller marks it Running first.
    pub fn step(&mut self, tid: Tid) -> StepResult {
        debug_assert!(self.tasks[tid].started && self.tasks[tid].enabled);
        let subset = self.tasks[tid].subset;
        let Some(ev) = self.current_event(tid).cloned() else {
            // Falling off the end of the event list is an implicit exit.
            return self.exit_task(tid);
        };
        let mut info = StepInfo {
            units: 1,
            pc: self.tasks[tid].pc,
            ..StepInfo::default()
        };
        let mut next_pc = self.tasks[tid].pc + 1;

        macro_rules! obj_cell {
            ($id:expr) => {{
                let id: usize = $id;
                if id == 0 || id > self.subsets[subset].objects.len() {
                    return Self::fault(
                        FaultKind::ModelError,
                        format!("object id {} out of range", id),
                    );
                }
                &mut self.subsets[subset].objects[id - 1]
            }};
        }

        let result: StepResult = match &ev {
            Event::Load { obj, reg } => {
                let cell = obj_cell!(*obj);
                if cell.freed {
                    return Self::fault(FaultKind::Uaf, format!("load of freed object {}", obj));
                }
                let v = cell.value;
                info.value = Some(v);
                self.tasks[tid].registers.insert(reg.clone(), v);
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Store { obj, src } => {
                let v = self.eval(tid, src);
                let cell = obj_cell!(*obj);
                if cell.freed {
                    return Self::fault(FaultKind::Uaf, format!("store to freed object {}", obj));
                }
                cell.value = v;
                info.value = Some(v);
                self.tasks[tid].consecutive_silent_steps = 0;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Deref { obj, reg } => {
                let cell = obj_cell!(*obj);
                if cell.freed {
                    return Self::fault(FaultKind::Uaf, format!("deref of freed cell {}", obj));
                }
                let ptr = cell.value;
                if ptr == 0 {
                    return Self::fault(
                        FaultKind::NullDeref,
                        format!("null pointer read through object {}", obj),
                    );
                }
                if ptr < 0 || ptr as usize > self.subsets[subset].objects.len() {
                    return Self::fault(
                        FaultKind::ModelError,
                        format!("deref through {} resolves to invalid id {}", obj, ptr),
                    );
                }
                let target = ptr as usize;
                let tcell = &self.subsets[subset].objects[target - 1];
                if tcell.freed {
                    return Self::fault(
                        FaultKind::Uaf,
                        format!("deref of freed object {} through {}", target, obj),
                    );
                }
                let v = tcell.value;
                info.value = Some(v);
                info.deref_target = Some(target);
                self.tasks[tid].registers.insert(reg.clone(), v);
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Alloc { obj } => {
                let cell = obj_cell!(*obj);
                if cell.freed {
                    // Heap lifecycle is monotone within a run: no freed->live.
                    return Self::fault(
                        FaultKind::ModelError,
                        format!("alloc of freed object {}", obj),
                    );
                }
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Free { obj } => {
                let cell = obj_cell!(*obj);
                if cell.freed {
                    return Self::fault(FaultKind::DoubleFree, format!("double free of {}", obj));
                }
                cell.freed = true;
                self.tasks[tid].consecutive_silent_steps = 0;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Acquire { lock, mode } => {
                let kind = self.subsets[subset].program.locks[*lock].kind;
                match kind {
                    LockKind::Rcu => {
                        self.tasks[tid].rcu_depth += 1;
                        self.subsets[subset].locks[*lock].holders.insert(tid);
                        self.tasks[tid].consecutive_silent_steps = 0;
                        self.progress(tid, ev.clone(), next_pc, info)
                    }
                    LockKind::Mutex | LockKind::Spin => {
                        let st = &mut self.subsets[subset].locks[*lock];
                        if st.holders.is_empty() {
                            st.holders.insert(tid);
                            st.write_held = true;
                            st.waiters.retain(|(w, _)| *w != tid);
                            if kind == LockKind::Spin {
                                self.tasks[tid].preempt_count += 1;
                            }
                            self.tasks[tid].consecutive_silent_steps = 0;
                            self.progress(tid, ev.clone(), next_pc, info)
                        } else {
                            if !st.waiters.iter().any(|(w, _)| *w == tid) {
                                st.waiters.push((tid, *mode));
                            }
                            let reason = if kind == LockKind::Spin {
                                BlockReason::SpinWait(*lock)
                            } else {
                                BlockReason::Lock(*lock)
                            };
                            self.block(tid, reason)
                        }
                    }
                    LockKind::Rwsem => {
                        let st = &mut self.subsets[subset].locks[*lock];
                        let want_write = matches!(mode, AcqMode::Excl | AcqMode::Write);
                        let available = if want_write {
                            st.holders.is_empty()
                        } else {
                            !st.write_held
                        };
                        if available {
                            st.holders.insert(tid);
                            st.write_held = want_write;
                            st.waiters.retain(|(w, _)| *w != tid);
                            self.tasks[tid].consecutive_silent_steps = 0;
                            self.progress(tid, ev.clone(), next_pc, info)
                        } else {
                            if !st.waiters.iter().any(|(w, _)| *w == tid) {
                                st.waiters.push((tid, *mode));
                            }
                            self.block(tid, BlockReason::Lock(*lock))
                        }
                    }
                }
            }
            Event::Release { lock } => {
                let kind = self.subsets[subset].program.locks[*lock].kind;
                if kind == LockKind::Rcu {
                    if self.tasks[tid].rcu_depth == 0 {
                        return Self::fault(
                            FaultKind::ModelError,
                            "rcu release without matching acquire",
                        );
                    }
                    self.tasks[tid].rcu_depth -= 1;
                    self.subsets[subset].locks[*lock].holders.remove(&tid);
                    self.tasks[tid].consecutive_silent_steps = 0;
                    return self.progress(tid, ev.clone(), next_pc, info);
                }
                let st = &mut self.subsets[subset].locks[*lock];
                if !st.holders.remove(&tid) {
                    return Self::fault(
                        FaultKind::ModelError,
                        format!("release of lock {} not held by task {}", lock, tid),
                    );
                }
                if st.holders.is_empty() {
                    st.write_held = false;
                }
                if kind == LockKind::Spin {
                    if self.tasks[tid].preempt_count == 0 {
                        return Self::fault(FaultKind::ModelError, "spin release underflow");
                    }
                    self.tasks[tid].preempt_count -= 1;
                }
                // Wake every waiter; the scheduler's next pick decides who
                // actually re-acquires.
                let woken: Vec<Tid> = self.subsets[subset].locks[*lock]
                    .waiters
                    .iter()
                    .map(|(w, _)| *w)
                    .collect();
                for w in &woken {
                    self.wake(*w);
                }
                info.woken = woken;
                self.tasks[tid].consecutive_silent_steps = 0;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::RcuLock => {
                self.tasks[tid].rcu_depth += 1;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::RcuUnlock => {
                if self.tasks[tid].rcu_depth == 0 {
                    return Self::fault(FaultKind::ModelError, "rcu_unlock without rcu_lock");
                }
                self.tasks[tid].rcu_depth -= 1;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::IrqDisable => {
                if self.tasks[tid].irqs_disabled {
                    return Self::fault(FaultKind::ModelError, "nested irq_disable");
                }
                self.tasks[tid].irqs_disabled = true;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::IrqEnable => {
                if !self.tasks[tid].irqs_disabled {
                    return Self::fault(FaultKind::ModelError, "irq_enable while enabled");
                }
                self.tasks[tid].irqs_disabled = false;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::PreemptDisable => {
                self.tasks[tid].preempt_count += 1;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::PreemptEnable => {
                if self.tasks[tid].preempt_count == 0 {
                    return Self::fault(FaultKind::ModelError, "preempt_enable underflow");
                }
                self.tasks[tid].preempt_count -= 1;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::NonBlockEnter => {
                self.tasks[tid].non_block_count += 1;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::NonBlockExit => {
                if self.tasks[tid].non_block_count == 0 {
                    return Self::fault(FaultKind::ModelError, "nonblock_exit underflow");
                }
                self.tasks[tid].non_block_count -= 1;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Spawn { thread } => {
                let child = self.subsets[subset].tids[*thread];
                if self.tasks[child].started {
                    return Self::fault(
                        FaultKind::ModelError,
                        format!("thread {} spawned twice", thread),
                    );
                }
                self.tasks[child].started = true;
                self.tasks[child].enabled = true;
                self.tasks[child].state = TaskState::Enqueued;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Join { thread } => {
                let target = self.subsets[subset].tids[*thread];
                if !self.tasks[target].started {
                    return Self::fault(
                        FaultKind::ModelError,
                        format!("join of never-spawned thread {}", thread),
                    );
                }
                if self.tasks[target].state == TaskState::Exited {
                    self.progress(tid, ev.clone(), next_pc, info)
                } else {
                    self.block(tid, BlockReason::Join(target))
                }
            }
            Event::BarrierWait { barrier, count } => {
                let b = self.subsets[subset]
                    .barriers
                    .entry(*barrier)
                    .or_insert_with(|| BarrierState {
                        count: *count,
                        arrived: BTreeSet::new(),
                    });
                b.arrived.insert(tid);
                if (b.arrived.len() as u32) >= b.count {
                    let participants: Vec<Tid> = b.arrived.iter().copied().collect();
                    b.arrived.clear();
                    // Everyone proceeds past the barrier; waiters skip their
                    // pending barrier_wait on wake.
                    let mut woken = Vec::new();
                    for p in &participants {
                        if *p != tid {
                            self.tasks[*p].pc += 1;
                            self.wake(*p);
                            woken.push(*p);
                        }
                    }
                    info.woken = woken;
                    info.barrier_released = Some(participants);
                    self.progress(tid, ev.clone(), next_pc, info)
                } else {
                    self.block(tid, BlockReason::Barrier(*barrier))
                }
            }
            Event::Yield => self.progress(tid, ev.clone(), next_pc, info),
            Event::Compute { units } => {
                info.units = *units;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Br { cond, target, .. } => {
                let v = self.eval(tid, cond);
                let taken = v != 0;
                info.value = Some(taken as i64);
                if taken {
                    next_pc = *target;
                }
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Goto { target, .. } => {
                next_pc = *target;
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Label { .. } => self.progress(tid, ev.clone(), next_pc, info),
            Event::Assert { cond } => {
                let v = self.eval(tid, cond);
                info.value = Some(v);
                if v == 0 {
                    return Self::fault(FaultKind::AssertionFailure, "assertion failed");
                }
                self.progress(tid, ev.clone(), next_pc, info)
            }
            Event::Exit => self.exit_task(tid),
        };
        result
    }

    fn progress(&mut self, tid: Tid, event: Event, next_pc: usize, info: StepInfo) -> StepResult {
        self.tasks[tid].pc = next_pc;
        // Busy-wait detection: a step that cannot influence other tasks.
        if !matches!(
            event,
            Event::Store { .. }
                | Event::Free { .. }
                | Event::Acquire { .. }
                | Event::Release { .. }
                | Event::Spawn { .. }
                | Event::BarrierWait { .. }
        ) {
            self.tasks[tid].consecutive_silent_steps += 1;
        }
        StepResult::Progressed { event, info }
    }

    /// Cross-checked after every step in debug builds and randomized tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        for t in &self.tasks {
            if t.started {
                let should_be_disabled =
                    matches!(t.state, TaskState::Blocked(_) | TaskState::Exited);
                if t.enabled == should_be_disabled {
                    return Err(format!(
                        "task {}: enabled={} inconsistent with state {:?}",
                        t.tid, t.enabled, t.state
                    ));
                }
            }
        }
        for s in &self.subsets {
            for (i, l) in s.locks.iter().enumerate() {
                match s.program.locks[i].kind {
                    LockKind::Mutex | LockKind::Spin => {
                        if l.holders.len() > 1 {
                            return Err(format!("lock {} has {} holders", i, l.holders.len()));
                        }
                    }
                    LockKind::Rwsem => {
                        if l.write_held && l.holders.len() > 1 {
                            return Err(format!("rwsem {} writer shares with readers", i));
                        }
                    }
                    LockKind::Rcu => {}
                }
            }
        }
        Ok(())
    }

    pub fn heap_snapshot(&self, subset: usize) -> Vec<(String, i64, bool)> {
        self.subsets[subset]
            .objects
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    self.subsets[subset].program.objects[i].name.clone(),
                    c.value,
                    c.freed,
                )
            })
            .collect()
    }
}
