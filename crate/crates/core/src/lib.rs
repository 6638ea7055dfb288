//! Controlled concurrency testing (CCT) engine.
//!
//! The crate models multi-threaded programs in a small line-oriented DSL,
//! serializes their execution under pluggable randomized scheduling
//! strategies, and classifies the resulting runs with race, deadlock and
//! memory-lifecycle oracles. A two-phase fuzzing loop explores the input
//! space sequentially and then the interleaving space via concurrency
//! mutation. Survival statistics (Kaplan-Meier, log-rank, chi-square)
//! quantify how quickly each strategy reaches a planted bug.

pub mod algos;
pub mod bench;
pub mod fuzz;
pub mod model;
pub mod oracles;
pub mod sched;
pub mod stats;
pub mod util;
pub mod vm;
