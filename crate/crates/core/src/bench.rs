//! Planted-bug benchmark catalog plus the brute-force interleaving
//! enumerator used as the independent test oracle.
//!
//! The enumerator runs a DFS that, at every event boundary, tries every
//! enabled task (no sampling, no safety gating), so its output is a strict
//! superset of anything the controlled scheduler can produce. Interleavings
//! are canonicalized by their executed-event sequence.

use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    instantiate_input, parse_call_sequence, parse_program, parse_target_spec, Program,
};
use crate::oracles::{check_deadlock, classify_fault, BugKind, BugReport, VectorClockState};
use crate::sched::{trace_event, Outcome, TraceEvent};
use crate::util::rng_from_seed;
use crate::vm::{StepResult, TaskState, VmState};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnumError {
    #[error("state bound of {0} DFS nodes exceeded")]
    StateBoundExceeded(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interleaving {
    pub events: Vec<TraceEvent>,
    pub outcome: Outcome,
    /// Happens-before races observed along this interleaving (independent
    /// of whether the run also faulted).
    pub races: Vec<BugReport>,
}

impl Interleaving {
    /// Outcome class label: a completed run with races counts as racy.
    pub fn class(&self) -> String {
        match &self.outcome {
            Outcome::Bug(b) => b.kind.as_str().to_string(),
            Outcome::Deadlock(_) => "deadlock".to_string(),
            Outcome::Livelock { .. } => "livelock".to_string(),
            Outcome::Completed { .. } => {
                if self.races.is_empty() {
                    "completed".to_string()
                } else {
                    BugKind::DataRace.as_str().to_string()
                }
            }
        }
    }

    /// Canonical identity of the interleaving.
    pub fn key(&self) -> String {
        serde_json::to_string(&self.events).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub interleavings: Vec<Interleaving>,
    pub class_counts: BTreeMap<String, usize>,
}

impl Enumeration {
    pub fn total(&self) -> usize {
        self.interleavings.len()
    }

    /// Fraction of maximal interleavings that are buggy (any class other
    /// than a clean completion).
    pub fn bug_ratio(&self) -> f64 {
        let buggy = self
            .interleavings
            .iter()
            .filter(|i| i.class() != "completed")
            .count();
        buggy as f64 / self.total().max(1) as f64
    }

    pub fn class_of(&self, key: &str) -> Option<String> {
        self.interleavings
            .iter()
            .find(|i| i.key() == key)
            .map(|i| i.class())
    }

    pub fn keys(&self) -> impl Iterator<Item = String> + '_ {
        self.interleavings.iter().map(|i| i.key())
    }
}

pub const DEFAULT_MAX_STATES: u64 = 2_000_000;

/// Exhaustive DFS over every enabled task at every event boundary.
/// Interleavings are deduplicated by executed-event sequence (a decision
/// that only makes a task block executes no event and collapses onto the
/// branch that never scheduled it there).
pub fn brute_force_interleavings(
    program: &Program,
    max_states: u64,
) -> Result<Enumeration, EnumError> {
    struct Ctx<'p> {
        program: &'p Program,
        max_states: u64,
        visited: u64,
        found: HashMap<String, Interleaving>,
    }

    fn record(ctx: &mut Ctx<'_>, events: &[TraceEvent], outcome: Outcome, vc: &VectorClockState) {
        let il = Interleaving {
            events: events.to_vec(),
            outcome,
            races: vc.clone().into_races(),
        };
        let key = il.key();
        if let Some(prev) = ctx.found.get(&key) {
            // Same event sequence must classify identically.
            debug_assert_eq!(prev.class(), il.class());
        } else {
            ctx.found.insert(key, il);
        }
    }

    fn dfs(
        ctx: &mut Ctx<'_>,
        vm: &VmState,
        vc: &VectorClockState,
        events: &mut Vec<TraceEvent>,
    ) -> Result<(), EnumError> {
        ctx.visited += 1;
        if ctx.visited > ctx.max_states {
            return Err(EnumError::StateBoundExceeded(ctx.max_states));
        }
        if vm.live_task_count(0) == 0 {
            record(
                ctx,
                events,
                Outcome::Completed {
                    heap: vm.heap_snapshot(0),
                },
                vc,
            );
            return Ok(());
        }
        let enabled = vm.enabled_set(0);
        if enabled.is_empty() {
            record(ctx, events, Outcome::Deadlock(check_deadlock(vm, 0)), vc);
            return Ok(());
        }
        for tid in enabled {
            let mut vm2 = vm.clone();
            vm2.tasks[tid].state = TaskState::Running;
            match vm2.step(tid) {
                StepResult::Progressed { event, info } => {
                    let mut vc2 = vc.clone();
                    vc2.observe(ctx.program, tid, &event, &info);
                    events.push(trace_event(&vm2, 0, tid, &event, &info));
                    dfs(ctx, &vm2, &vc2, events)?;
                    events.pop();
                }
                StepResult::Exited { .. } => {
                    events.push(TraceEvent {
                        tid,
                        ev: "exit".to_string(),
                        obj: None,
                        val: None,
                    });
                    dfs(ctx, &vm2, vc, events)?;
                    events.pop();
                }
                StepResult::NowBlocked(_) => {
                    // No event executed; continue from the mutated state.
                    dfs(ctx, &vm2, vc, events)?;
                }
                StepResult::Fault { kind, detail } => {
                    let outcome =
                        Outcome::Bug(classify_fault(kind, detail, events.len() as u64));
                    record(ctx, events, outcome, vc);
                }
            }
        }
        Ok(())
    }

    let vm = VmState::single(program);
    let vc = VectorClockState::new(program.threads.len(), program.locks.len());
    let mut ctx = Ctx {
        program,
        max_states,
        visited: 0,
        found: HashMap::new(),
    };
    dfs(&mut ctx, &vm, &vc, &mut Vec::new())?;
    let mut interleavings: Vec<Interleaving> = ctx.found.into_values().collect();
    interleavings.sort_by(|a, b| a.events.len().cmp(&b.events.len()).then(a.key().cmp(&b.key())));
    let mut class_counts = BTreeMap::new();
    for i in &interleavings {
        *class_counts.entry(i.class()).or_insert(0) += 1;
    }
    Ok(Enumeration {
        interleavings,
        class_counts,
    })
}

// ---------------------------------------------------------------------------
// Benchmark catalog
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq: Option<String>,
    pub kind: BugKind,
    pub ratio: f64,
    pub interleavings: usize,
}

#[derive(Debug, Clone)]
pub struct BenchmarkEntry {
    pub entry: CatalogEntry,
    pub program: Program,
}

pub const RACE1_SRC: &str = include_str!("../../../bench/race1.ccp");
pub const RACE1_ASSERT_SRC: &str = include_str!("../../../bench/race1_assert.ccp");
pub const RACE1_MUTEX_SRC: &str = include_str!("../../../bench/race1_mutex.ccp");
pub const MINI_SRC: &str = include_str!("../../../bench/mini.ccp");
pub const DL1_SRC: &str = include_str!("../../../bench/dl1.ccp");
pub const DL1_ORDERED_SRC: &str = include_str!("../../../bench/dl1_ordered.ccp");
pub const PCT1_SRC: &str = include_str!("../../../bench/pct1.ccp");
pub const PCT2_SRC: &str = include_str!("../../../bench/pct2.ccp");
pub const SPIN3_SRC: &str = include_str!("../../../bench/spin3.ccp");
pub const JFS_TOY_SPEC: &str = include_str!("../../../bench/jfs_toy.cct");
pub const JFS_TOY_SEQ: &str = include_str!("../../../bench/jfs_toy_trigger.seq");
pub const JFS_TOY_UAF_SPEC: &str = include_str!("../../../bench/jfs_toy_uaf.cct");
pub const JFS_TOY_UAF_SEQ: &str = include_str!("../../../bench/jfs_toy_uaf_trigger.seq");
pub const CATALOG_JSONL: &str = include_str!("../../../bench/catalog.jsonl");

fn source_by_file(file: &str, seq: Option<&str>) -> Program {
    match file {
        "race1.ccp" => parse_program(RACE1_SRC).unwrap(),
        "race1_assert.ccp" => parse_program(RACE1_ASSERT_SRC).unwrap(),
        "mini.ccp" => parse_program(MINI_SRC).unwrap(),
        "dl1.ccp" => parse_program(DL1_SRC).unwrap(),
        "pct1.ccp" => parse_program(PCT1_SRC).unwrap(),
        "pct2.ccp" => parse_program(PCT2_SRC).unwrap(),
        "jfs_toy.cct" => {
            let spec = parse_target_spec(JFS_TOY_SPEC).unwrap();
            let s = parse_call_sequence(seq.map(|_| JFS_TOY_SEQ).unwrap()).unwrap();
            instantiate_input(&spec, &s).unwrap()
        }
        "jfs_toy_uaf.cct" => {
            let spec = parse_target_spec(JFS_TOY_UAF_SPEC).unwrap();
            let s = parse_call_sequence(seq.map(|_| JFS_TOY_UAF_SEQ).unwrap()).unwrap();
            instantiate_input(&spec, &s).unwrap()
        }
        other => panic!("unknown benchmark file {}", other),
    }
}

/// The shipped planted-bug benchmarks, with enumerator-verified expected
/// kinds and bug ratios frozen in `bench/catalog.jsonl`.
pub fn planted_targets() -> Vec<BenchmarkEntry> {
    CATALOG_JSONL
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let entry: CatalogEntry = serde_json::from_str(l).unwrap();
            let program = source_by_file(&entry.file, entry.seq.as_deref());
            BenchmarkEntry { entry, program }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Randomized programs with paired counter events (safety-gating tests)
// ---------------------------------------------------------------------------

/// Generates a terminating multi-thread program whose bodies mix memory
/// events with properly paired counter regions (preempt/irq/nonblock/rcu
/// and spin sections). Regions never nest, so programs are deadlock-free by
/// construction and every counter returns to zero.
pub fn random_paired_program(seed: u64) -> Program {
    let mut rng = rng_from_seed(seed);
    let n_workers = rng.gen_range(1..=3usize);
    let n_objects = rng.gen_range(1..=3usize);
    let mut src = String::new();
    for i in 0..n_objects {
        src.push_str(&format!("object o{} 0\n", i));
    }
    src.push_str("lock m0 mutex\nlock s0 spin\n");

    let simple = |rng: &mut rand_chacha::ChaCha8Rng, body: &mut Vec<String>| {
        let obj = rng.gen_range(0..n_objects);
        match rng.gen_range(0..4) {
            0 => body.push(format!("load o{} r0", obj)),
            1 => body.push(format!("store o{} {}", obj, rng.gen_range(0..10))),
            2 => body.push(format!("compute {}", rng.gen_range(1..4))),
            _ => body.push("yield".to_string()),
        }
    };

    let gen_body = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
        let mut body = Vec::new();
        let atoms = rng.gen_range(3..=7);
        // Every generated thread carries at least one gated region.
        let forced_region = rng.gen_range(0..atoms);
        for a in 0..atoms {
            if a == forced_region || rng.gen_bool(0.3) {
                let (open, close) = match rng.gen_range(0..6) {
                    0 => ("preempt_disable".to_string(), "preempt_enable".to_string()),
                    1 => ("irq_disable".to_string(), "irq_enable".to_string()),
                    2 => ("nonblock_enter".to_string(), "nonblock_exit".to_string()),
                    3 => ("rcu_lock".to_string(), "rcu_unlock".to_string()),
                    4 => ("acquire s0".to_string(), "release s0".to_string()),
                    _ => ("acquire m0".to_string(), "release m0".to_string()),
                };
                body.push(open);
                for _ in 0..rng.gen_range(1..=3) {
                    simple(rng, &mut body);
                }
                body.push(close);
            } else {
                simple(rng, &mut body);
            }
        }
        body
    };

    let worker_bodies: Vec<Vec<String>> = (0..n_workers).map(|_| gen_body(&mut rng)).collect();
    let main_body = gen_body(&mut rng);

    src.push_str("thread main:\n");
    for i in 0..n_workers {
        src.push_str(&format!("  spawn w{}\n", i));
    }
    for l in &main_body {
        src.push_str(&format!("  {}\n", l));
    }
    for i in 0..n_workers {
        src.push_str(&format!("  join w{}\n", i));
    }
    src.push_str("  exit\n");
    for (i, body) in worker_bodies.iter().enumerate() {
        src.push_str(&format!("thread w{}:\n", i));
        for l in body {
            src.push_str(&format!("  {}\n", l));
        }
        src.push_str("  exit\n");
    }
    parse_program(&src).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::{StrategyConfig, StrategyKind};
    use crate::sched::{run_controlled, SchedParams};

    #[test]
    fn single_thread_has_one_interleaving() {
        let p = parse_program(
            "object x 0\nthread main:\n store x 1\n load x r0\n exit\n",
        )
        .unwrap();
        let e = brute_force_interleavings(&p, DEFAULT_MAX_STATES).unwrap();
        assert_eq!(e.total(), 1);
        assert_eq!(e.class_counts.get("completed"), Some(&1));
    }

    #[test]
    fn mini_has_three_racy_interleavings() {
        let p = parse_program(MINI_SRC).unwrap();
        let e = brute_force_interleavings(&p, DEFAULT_MAX_STATES).unwrap();
        assert_eq!(e.total(), 3);
        assert_eq!(e.class_counts.get("data_race"), Some(&3));
        assert_eq!(e.bug_ratio(), 1.0);
    }

    #[test]
    fn race1_racing_pair_has_two_orders() {
        let p = parse_program(RACE1_SRC).unwrap();
        let e = brute_force_interleavings(&p, DEFAULT_MAX_STATES).unwrap();
        let mut orders = std::collections::HashSet::new();
        for i in &e.interleavings {
            let pair: Vec<&str> = i
                .events
                .iter()
                .filter(|ev| ev.ev == "store" || ev.ev == "load")
                .map(|ev| ev.ev.as_str())
                .collect();
            orders.insert(pair);
        }
        assert_eq!(orders.len(), 2);
        assert_eq!(e.bug_ratio(), 1.0); // every interleaving races
    }

    #[test]
    fn race1_mutex_never_races() {
        let p = parse_program(RACE1_MUTEX_SRC).unwrap();
        let e = brute_force_interleavings(&p, DEFAULT_MAX_STATES).unwrap();
        assert_eq!(e.bug_ratio(), 0.0);
        assert_eq!(e.class_counts.keys().collect::<Vec<_>>(), vec!["completed"]);
    }

    #[test]
    fn dl1_has_completed_and_deadlock_classes() {
        let p = parse_program(DL1_SRC).unwrap();
        let e = brute_force_interleavings(&p, DEFAULT_MAX_STATES).unwrap();
        assert!(e.class_counts.contains_key("completed"));
        assert!(e.class_counts.contains_key("deadlock"));
        let r = e.bug_ratio();
        assert!(r > 0.0 && r < 1.0);
    }

    #[test]
    fn dl1_ordered_never_deadlocks() {
        let p = parse_program(DL1_ORDERED_SRC).unwrap();
        let e = brute_force_interleavings(&p, DEFAULT_MAX_STATES).unwrap();
        assert!(!e.class_counts.contains_key("deadlock"));
    }

    #[test]
    fn state_bound_enforced() {
        let p = parse_program(DL1_SRC).unwrap();
        assert_eq!(
            brute_force_interleavings(&p, 5),
            Err(EnumError::StateBoundExceeded(5))
        );
    }

    #[test]
    fn catalog_matches_enumerator() {
        for bench in planted_targets() {
            let e = brute_force_interleavings(&bench.program, DEFAULT_MAX_STATES)
                .unwrap_or_else(|err| panic!("{}: {}", bench.entry.name, err));
            let actual = CatalogEntry {
                name: bench.entry.name.clone(),
                file: bench.entry.file.clone(),
                seq: bench.entry.seq.clone(),
                kind: bench.entry.kind,
                ratio: e.bug_ratio(),
                interleavings: e.total(),
            };
            assert!(
                e.class_counts.contains_key(actual.kind.as_str()),
                "{}: expected kind {:?} absent from classes {:?}",
                bench.entry.name,
                bench.entry.kind,
                e.class_counts
            );
            assert!(
                (bench.entry.ratio - actual.ratio).abs() < 1e-9
                    && bench.entry.interleavings == actual.interleavings,
                "catalog stale for {}: should be {}",
                bench.entry.name,
                serde_json::to_string(&actual).unwrap()
            );
            assert!(bench.entry.ratio > 0.0);
        }
    }

    #[test]
    fn jfs_toy_bug_is_rare() {
        let bench = planted_targets()
            .into_iter()
            .find(|b| b.entry.name == "jfs_toy")
            .unwrap();
        assert!(bench.entry.ratio > 0.0 && bench.entry.ratio < 0.5);
        assert_eq!(bench.entry.kind, BugKind::NullDeref);
    }

    #[test]
    fn classification_agrees_with_controlled_runs() {
        let p = parse_program(MINI_SRC).unwrap();
        let e = brute_force_interleavings(&p, DEFAULT_MAX_STATES).unwrap();
        let params = SchedParams {
            sample_rate: 1.0,
            slice_events: 1,
            ..SchedParams::default()
        };
        for seed in 0..50 {
            let (trace, outcome) =
                run_controlled(&p, &StrategyConfig::new(StrategyKind::Rw, seed), &params);
            let key = serde_json::to_string(&trace.events().cloned().collect::<Vec<_>>()).unwrap();
            let class = e
                .class_of(&key)
                .unwrap_or_else(|| panic!("seed {}: infeasible interleaving", seed));
            let races = crate::oracles::check_race(&trace, &p);
            let run_class = match &outcome {
                Outcome::Bug(b) => b.kind.as_str().to_string(),
                Outcome::Deadlock(_) => "deadlock".to_string(),
                Outcome::Livelock { .. } => "livelock".to_string(),
                Outcome::Completed { .. } if !races.is_empty() => "data_race".to_string(),
                Outcome::Completed { .. } => "completed".to_string(),
            };
            assert_eq!(class, run_class, "seed {}", seed);
        }
    }

    #[test]
    fn random_paired_programs_parse_and_terminate() {
        for seed in 0..50 {
            let p = random_paired_program(seed);
            let (trace, outcome) = run_controlled(
                &p,
                &StrategyConfig::new(StrategyKind::Rw, seed),
                &SchedParams::default(),
            );
            assert!(
                matches!(outcome, Outcome::Completed { .. }),
                "seed {}: {:?}",
                seed,
                outcome
            );
            crate::sched::audit_safety(&p, &trace).unwrap();
        }
    }
}

