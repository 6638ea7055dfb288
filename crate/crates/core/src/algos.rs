//! Weight-assignment scheduling strategies: RW, RP, POS, PCT, plus the
//! OS-like baseline used for benchmark comparisons.
//!
//! The scheduler always dispatches the enabled task with the highest weight
//! (ties break to the lowest tid). A strategy only decides how weights
//! evolve: RW redraws everything each decision, RP redraws the task that
//! just ran, POS additionally redraws tasks whose next event interferes with
//! the event that just executed, and PCT uses static integer priorities with
//! d-1 sampled change points.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Event;
use crate::util::rng_from_seed;
use crate::vm::Tid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    Rw,
    Rp,
    Pos,
    Pct,
    /// Uniform pick at voluntary points only; stands in for the native OS
    /// scheduler in benchmark comparisons. Weight-wise identical to RW; the
    /// caller disables sampled points and widens the slice.
    OsLike,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Rw => "rw",
            StrategyKind::Rp => "rp",
            StrategyKind::Pos => "pos",
            StrategyKind::Pct => "pct",
            StrategyKind::OsLike => "oslike",
        }
    }

    pub fn parse(s: &str) -> Option<StrategyKind> {
        match s {
            "rw" => Some(StrategyKind::Rw),
            "rp" => Some(StrategyKind::Rp),
            "pos" => Some(StrategyKind::Pos),
            "pct" => Some(StrategyKind::Pct),
            "oslike" => Some(StrategyKind::OsLike),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// PCT depth `d`; ignored by the other strategies.
    pub pct_depth: u32,
    pub rng_seed: u64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, rng_seed: u64) -> Self {
        StrategyConfig {
            kind,
            pct_depth: 3,
            rng_seed,
        }
    }
}

/// Inputs to a weight update at a scheduling decision.
pub struct DecisionCtx<'a> {
    /// Task that ran up to this decision.
    pub last_tid: Tid,
    /// The event it executed last, if any.
    pub last_event: Option<&'a Event>,
    /// Whether that task is still runnable (blocked/exited tasks keep their
    /// weights untouched, mirroring the scheduling loop's classification).
    pub last_runnable: bool,
    /// Enabled tasks of the subset with each task's next event.
    pub enabled: &'a [(Tid, Option<&'a Event>)],
}

pub trait Strategy {
    fn kind(&self) -> StrategyKind;

    /// A task became runnable for the first time.
    fn on_task_started(&mut self, tid: Tid, weights: &mut [f64]);

    /// Weight update at a scheduling decision.
    fn update_weights(&mut self, ctx: &DecisionCtx<'_>, weights: &mut [f64]);

    /// Called once per executed controlled event. Returns true when the
    /// strategy requires a scheduling point now (PCT change point).
    fn on_event(&mut self, _running: Tid, _weights: &mut [f64]) -> bool {
        false
    }

    /// Busy-wait demotion: push the task below every other priority.
    fn demote(&mut self, _tid: Tid, _weights: &mut [f64]) {}
}

/// True iff the two events access the same object with at least one
/// destructive (store/free) access.
pub fn interferes(e1: &Event, e2: &Event) -> bool {
    match (e1.accessed_obj(), e2.accessed_obj()) {
        (Some((o1, w1)), Some((o2, w2))) => o1 == o2 && (w1 || w2),
        _ => false,
    }
}

pub struct RandomWalk {
    rng: ChaCha8Rng,
    kind: StrategyKind,
}

impl RandomWalk {
    pub fn new(seed: u64, kind: StrategyKind) -> Self {
        RandomWalk {
            rng: rng_from_seed(seed),
            kind,
        }
    }
}

impl Strategy for RandomWalk {
    fn kind(&self) -> StrategyKind {
        self.kind
    }

    fn on_task_started(&mut self, tid: Tid, weights: &mut [f64]) {
        weights[tid] = self.rng.gen::<f64>();
    }

    fn update_weights(&mut self, ctx: &DecisionCtx<'_>, weights: &mut [f64]) {
        for &(tid, _) in ctx.enabled {
            weights[tid] = self.rng.gen::<f64>();
        }
    }
}

pub struct RandomPriority {
    rng: ChaCha8Rng,
}

impl RandomPriority {
    pub fn new(seed: u64) -> Self {
        RandomPriority {
            rng: rng_from_seed(seed),
        }
    }
}

impl Strategy for RandomPriority {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Rp
    }

    fn on_task_started(&mut self, tid: Tid, weights: &mut [f64]) {
        weights[tid] = self.rng.gen::<f64>();
    }

    fn update_weights(&mut self, ctx: &DecisionCtx<'_>, weights: &mut [f64]) {
        if ctx.last_runnable {
            weights[ctx.last_tid] = self.rng.gen::<f64>();
        }
    }
}

pub struct PartialOrderSampling {
    rng: ChaCha8Rng,
}

impl PartialOrderSampling {
    pub fn new(seed: u64) -> Self {
        PartialOrderSampling {
            rng: rng_from_seed(seed),
        }
    }
}

impl Strategy for PartialOrderSampling {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Pos
    }

    fn on_task_started(&mut self, tid: Tid, weights: &mut [f64]) {
        weights[tid] = self.rng.gen::<f64>();
    }

    fn update_weights(&mut self, ctx: &DecisionCtx<'_>, weights: &mut [f64]) {
        if !ctx.last_runnable {
            return;
        }
        weights[ctx.last_tid] = self.rng.gen::<f64>();
        let Some(last_ev) = ctx.last_event else {
            return;
        };
        for &(tid, next) in ctx.enabled {
            if tid == ctx.last_tid {
                continue;
            }
            if let Some(next_ev) = next {
                if interferes(last_ev, next_ev) {
                    weights[tid] = self.rng.gen::<f64>();
                }
            }
        }
    }
}

/// PCT state: static priorities in `[d+1, d+n]` plus `d-1` change points
/// sampled without replacement from `[1, E]`, where `E` comes from an RW
/// trial run.
pub struct Pct {
    depth: u32,
    /// Sorted ascending; at the i-th change point (1-based) the running
    /// task's priority drops to i.
    change_points: Vec<u64>,
    next_cp: usize,
    event_counter: u64,
    priorities: Vec<f64>,
    next_priority_slot: usize,
}

impl Pct {
    /// `n_tasks` is the static thread count of the program; `event_estimate`
    /// is E from the trial run.
    pub fn new(n_tasks: usize, event_estimate: u64, depth: u32, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let d = depth.max(1) as u64;
        // Random permutation of [d+1, d+n].
        let mut prios: Vec<f64> = (1..=n_tasks as u64).map(|i| (d + i) as f64).collect();
        for i in (1..prios.len()).rev() {
            let j = rng.gen_range(0..=i);
            prios.swap(i, j);
        }
        // d-1 distinct change points from [1, E]; when E < d-1, take all E.
        let e = event_estimate.max(1);
        let want = ((d - 1) as usize).min(e as usize);
        let mut points: Vec<u64> = Vec::with_capacity(want);
        while points.len() < want {
            let k = rng.gen_range(1..=e);
            if !points.contains(&k) {
                points.push(k);
            }
        }
        points.sort_unstable();
        Pct {
            depth,
            change_points: points,
            next_cp: 0,
            event_counter: 0,
            priorities: prios,
            next_priority_slot: 0,
        }
    }

    pub fn change_points(&self) -> &[u64] {
        &self.change_points
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }
}

impl Strategy for Pct {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Pct
    }

    fn on_task_started(&mut self, tid: Tid, weights: &mut [f64]) {
        // Tasks claim the permuted initial priorities in start order.
        let slot = self.next_priority_slot.min(self.priorities.len() - 1);
        weights[tid] = self.priorities[slot];
        self.next_priority_slot += 1;
    }

    fn update_weights(&mut self, _ctx: &DecisionCtx<'_>, _weights: &mut [f64]) {
        // Priorities are static between change points.
    }

    fn on_event(&mut self, running: Tid, weights: &mut [f64]) -> bool {
        self.event_counter += 1;
        if self.next_cp < self.change_points.len()
            && self.event_counter == self.change_points[self.next_cp]
        {
            self.next_cp += 1;
            // The runner is the current argmax; dropping it to the change
            // point index puts it below every initial priority.
            weights[running] = self.next_cp as f64;
            return true;
        }
        false
    }

    fn demote(&mut self, tid: Tid, weights: &mut [f64]) {
        weights[tid] = 0.0;
    }
}

pub fn build_strategy(
    cfg: &StrategyConfig,
    n_tasks: usize,
    event_estimate: u64,
) -> Box<dyn Strategy> {
    match cfg.kind {
        StrategyKind::Rw => Box::new(RandomWalk::new(cfg.rng_seed, StrategyKind::Rw)),
        StrategyKind::OsLike => Box::new(RandomWalk::new(cfg.rng_seed, StrategyKind::OsLike)),
        StrategyKind::Rp => Box::new(RandomPriority::new(cfg.rng_seed)),
        StrategyKind::Pos => Box::new(PartialOrderSampling::new(cfg.rng_seed)),
        StrategyKind::Pct => Box::new(Pct::new(
            n_tasks,
            event_estimate,
            cfg.pct_depth,
            cfg.rng_seed,
        )),
    }
}
