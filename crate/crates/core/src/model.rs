//! Program DSL: threads, events, heap objects, locks, plus parameterized
//! targets and call sequences.
//!
//! Programs are line-oriented text (one event per line, `#` comments) stored
//! in `.ccp` files; target specs in `.cct` files. The grammar is documented
//! in `docs/dsl.md`. Object ids are 1-based declaration indices and id 0 is
//! reserved as null, which lets object values double as pointers for the
//! `deref` event.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Object id; 1-based, 0 is the null pointer.
pub type ObjId = usize;
pub type LockId = usize;
/// Index into `Program::threads`.
pub type ThreadId = usize;

pub const NULL_OBJ: ObjId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LockKind {
    Mutex,
    Spin,
    Rwsem,
    Rcu,
}

impl LockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LockKind::Mutex => "mutex",
            LockKind::Spin => "spin",
            LockKind::Rwsem => "rwsem",
            LockKind::Rcu => "rcu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcqMode {
    Excl,
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Eq,
    Ne,
    Lt,
}

impl BinOp {
    pub fn as_str(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
        }
    }
}

/// Integer constant, register, or `reg op const`. Registers are thread-local
/// 64-bit signed integers; reading a never-written register yields 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expr {
    Const(i64),
    Reg(String),
    Bin { reg: String, op: BinOp, rhs: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Load { obj: ObjId, reg: String },
    Store { obj: ObjId, src: Expr },
    Deref { obj: ObjId, reg: String },
    Alloc { obj: ObjId },
    Free { obj: ObjId },
    Acquire { lock: LockId, mode: AcqMode },
    Release { lock: LockId },
    RcuLock,
    RcuUnlock,
    IrqDisable,
    IrqEnable,
    PreemptDisable,
    PreemptEnable,
    NonBlockEnter,
    NonBlockExit,
    Spawn { thread: ThreadId },
    Join { thread: ThreadId },
    BarrierWait { barrier: u32, count: u32 },
    Yield,
    Compute { units: u32 },
    Br { cond: Expr, label: String, target: usize },
    Goto { label: String, target: usize },
    Label { name: String },
    Assert { cond: Expr },
    Exit,
}

impl Event {
    /// Short lowercase kind name used in trace records.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Event::Load { .. } => "load",
            Event::Store { .. } => "store",
            Event::Deref { .. } => "deref",
            Event::Alloc { .. } => "alloc",
            Event::Free { .. } => "free",
            Event::Acquire { .. } => "acquire",
            Event::Release { .. } => "release",
            Event::RcuLock => "rcu_lock",
            Event::RcuUnlock => "rcu_unlock",
            Event::IrqDisable => "irq_disable",
            Event::IrqEnable => "irq_enable",
            Event::PreemptDisable => "preempt_disable",
            Event::PreemptEnable => "preempt_enable",
            Event::NonBlockEnter => "nonblock_enter",
            Event::NonBlockExit => "nonblock_exit",
            Event::Spawn { .. } => "spawn",
            Event::Join { .. } => "join",
            Event::BarrierWait { .. } => "barrier_wait",
            Event::Yield => "yield",
            Event::Compute { .. } => "compute",
            Event::Br { .. } => "br",
            Event::Goto { .. } => "goto",
            Event::Label { .. } => "label",
            Event::Assert { .. } => "assert",
            Event::Exit => "exit",
        }
    }

    /// Memory events participate in interference and race detection.
    pub fn accessed_obj(&self) -> Option<(ObjId, bool)> {
        match self {
            Event::Load { obj, .. } => Some((*obj, false)),
            Event::Deref { obj, .. } => Some((*obj, false)),
            Event::Store { obj, .. } => Some((*obj, true)),
            Event::Free { obj } => Some((*obj, true)),
            _ => None,
        }
    }

    /// Scheduling-point sampling applies before these events.
    pub fn sample_eligible(&self) -> bool {
        matches!(
            self,
            Event::Load { .. }
                | Event::Store { .. }
                | Event::Deref { .. }
                | Event::Free { .. }
                | Event::Acquire { .. }
                | Event::Release { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDecl {
    pub name: String,
    pub init: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockDecl {
    pub name: String,
    pub kind: LockKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadDecl {
    pub name: String,
    pub events: Vec<Event>,
}

/// A modeled concurrent program. Only the entry thread starts running;
/// every other thread must be started with `spawn`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub objects: Vec<ObjectDecl>,
    pub locks: Vec<LockDecl>,
    pub threads: Vec<ThreadDecl>,
    pub entry: ThreadId,
}

impl Program {
    pub fn object_name(&self, id: ObjId) -> &str {
        if id == NULL_OBJ {
            "null"
        } else {
            &self.objects[id - 1].name
        }
    }

    pub fn thread_by_name(&self, name: &str) -> Option<ThreadId> {
        self.threads.iter().position(|t| t.name == name)
    }

    /// Stable content hash of the canonical rendering; keys traces to the
    /// program they were recorded against.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.render().as_bytes());
        hex::encode(h.finalize())
    }

    /// Canonical DSL text. `parse_program(render(p)) == p` for any valid `p`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.objects {
            let _ = writeln!(out, "object {} {}", o.name, o.init);
        }
        for l in &self.locks {
            let _ = writeln!(out, "lock {} {}", l.name, l.kind.as_str());
        }
        let _ = writeln!(out, "entry {}", self.threads[self.entry].name);
        for t in &self.threads {
            let _ = writeln!(out, "thread {}:", t.name);
            for ev in &t.events {
                let _ = writeln!(out, "  {}", self.render_event(ev));
            }
        }
        out
    }

    pub fn render_event(&self, ev: &Event) -> String {
        let obj = |id: &ObjId| self.object_name(*id).to_string();
        let lock = |id: &LockId| self.locks[*id].name.clone();
        match ev {
            Event::Load { obj: o, reg } => format!("load {} {}", obj(o), reg),
            Event::Store { obj: o, src } => format!("store {} {}", obj(o), render_expr(src)),
            Event::Deref { obj: o, reg } => format!("deref {} {}", obj(o), reg),
            Event::Alloc { obj: o } => format!("alloc {}", obj(o)),
            Event::Free { obj: o } => format!("free {}", obj(o)),
            Event::Acquire { lock: l, mode } => match mode {
                AcqMode::Excl => format!("acquire {}", lock(l)),
                AcqMode::Read => format!("acquire {} read", lock(l)),
                AcqMode::Write => format!("acquire {} write", lock(l)),
            },
            Event::Release { lock: l } => format!("release {}", lock(l)),
            Event::RcuLock => "rcu_lock".into(),
            Event::RcuUnlock => "rcu_unlock".into(),
            Event::IrqDisable => "irq_disable".into(),
            Event::IrqEnable => "irq_enable".into(),
            Event::PreemptDisable => "preempt_disable".into(),
            Event::PreemptEnable => "preempt_enable".into(),
            Event::NonBlockEnter => "nonblock_enter".into(),
            Event::NonBlockExit => "nonblock_exit".into(),
            Event::Spawn { thread } => format!("spawn {}", self.threads[*thread].name),
            Event::Join { thread } => format!("join {}", self.threads[*thread].name),
            Event::BarrierWait { barrier, count } => format!("barrier_wait {} {}", barrier, count),
            Event::Yield => "yield".into(),
            Event::Compute { units } => format!("compute {}", units),
            Event::Br { cond, label, .. } => format!("br {} {}", render_expr(cond), label),
            Event::Goto { label, .. } => format!("goto {}", label),
            Event::Label { name } => format!("label {}", name),
            Event::Assert { cond } => format!("assert {}", render_expr(cond)),
            Event::Exit => "exit".into(),
        }
    }
}

fn render_expr(e: &Expr) -> String {
    match e {
        Expr::Const(v) => v.to_string(),
        Expr::Reg(r) => r.clone(),
        Expr::Bin { reg, op, rhs } => format!("{} {} {}", reg, op.as_str(), rhs),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown name `{name}`")]
    UnknownName { line: usize, name: String },
    #[error("line {line}: duplicate name `{name}`")]
    DuplicateName { line: usize, name: String },
    #[error("line {line}: empty range for parameter `{name}`")]
    EmptyRange { line: usize, name: String },
}

fn syntax(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        msg: msg.into(),
    }
}

struct NameEnv {
    objects: HashMap<String, ObjId>,
    locks: HashMap<String, LockId>,
    lock_kinds: Vec<LockKind>,
    threads: HashMap<String, ThreadId>,
}

fn parse_int(tok: &str, line: usize) -> Result<i64, ParseError> {
    tok.parse::<i64>()
        .map_err(|_| syntax(line, format!("expected integer, got `{}`", tok)))
}

fn parse_operand(tok: &str) -> Expr {
    match tok.parse::<i64>() {
        Ok(v) => Expr::Const(v),
        Err(_) => Expr::Reg(tok.to_string()),
    }
}

fn parse_expr(toks: &[&str], line: usize) -> Result<Expr, ParseError> {
    match toks.len() {
        1 => Ok(parse_operand(toks[0])),
        3 => {
            let op = match toks[1] {
                "+" => BinOp::Add,
                "==" => BinOp::Eq,
                "!=" => BinOp::Ne,
                "<" => BinOp::Lt,
                other => return Err(syntax(line, format!("unknown operator `{}`", other))),
            };
            if toks[0].parse::<i64>().is_ok() {
                return Err(syntax(line, "left operand of an expression must be a register"));
            }
            Ok(Expr::Bin {
                reg: toks[0].to_string(),
                op,
                rhs: parse_int(toks[2], line)?,
            })
        }
        _ => Err(syntax(line, "expected `const`, `reg` or `reg op const`")),
    }
}

/// Event line as it appears inside a thread body. Labels are resolved in a
/// second pass once the whole thread has been read.
fn parse_event_line(
    toks: &[&str],
    line: usize,
    env: &NameEnv,
) -> Result<Event, ParseError> {
    let need = |n: usize| -> Result<(), ParseError> {
        if toks.len() != n {
            Err(syntax(line, format!("`{}` takes {} argument(s)", toks[0], n - 1)))
        } else {
            Ok(())
        }
    };
    let obj = |tok: &str| -> Result<ObjId, ParseError> {
        env.objects.get(tok).copied().ok_or(ParseError::UnknownName {
            line,
            name: tok.to_string(),
        })
    };
    let lock = |tok: &str| -> Result<LockId, ParseError> {
        env.locks.get(tok).copied().ok_or(ParseError::UnknownName {
            line,
            name: tok.to_string(),
        })
    };
    let thread = |tok: &str| -> Result<ThreadId, ParseError> {
        env.threads.get(tok).copied().ok_or(ParseError::UnknownName {
            line,
            name: tok.to_string(),
        })
    };
    let ev = match toks[0] {
        "load" => {
            need(3)?;
            Event::Load {
                obj: obj(toks[1])?,
                reg: toks[2].to_string(),
            }
        }
        "store" => {
            if toks.len() < 3 {
                return Err(syntax(line, "`store` takes an object and a source expression"));
            }
            Event::Store {
                obj: obj(toks[1])?,
                src: parse_expr(&toks[2..], line)?,
            }
        }
        "deref" => {
            need(3)?;
            Event::Deref {
                obj: obj(toks[1])?,
                reg: toks[2].to_string(),
            }
        }
        "alloc" => {
            need(2)?;
            Event::Alloc { obj: obj(toks[1])? }
        }
        "free" => {
            need(2)?;
            Event::Free { obj: obj(toks[1])? }
        }
        "acquire" => {
            let l = if toks.len() >= 2 {
                lock(toks[1])?
            } else {
                return Err(syntax(line, "`acquire` takes a lock"));
            };
            let mode = match toks.get(2) {
                None => AcqMode::Excl,
                Some(&"read") => AcqMode::Read,
                Some(&"write") => AcqMode::Write,
                Some(other) => return Err(syntax(line, format!("unknown acquire mode `{}`", other))),
            };
            if mode != AcqMode::Excl && !matches!(env.lock_kinds[l], LockKind::Rwsem) {
                return Err(syntax(line, "read/write acquire is only valid on rwsem locks"));
            }
            Event::Acquire { lock: l, mode }
        }
        "release" => {
            need(2)?;
            Event::Release { lock: lock(toks[1])? }
        }
        "rcu_lock" => {
            need(1)?;
            Event::RcuLock
        }
        "rcu_unlock" => {
            need(1)?;
            Event::RcuUnlock
        }
        "irq_disable" => {
            need(1)?;
            Event::IrqDisable
        }
        "irq_enable" => {
            need(1)?;
            Event::IrqEnable
        }
        "preempt_disable" => {
            need(1)?;
            Event::PreemptDisable
        }
        "preempt_enable" => {
            need(1)?;
            Event::PreemptEnable
        }
        "nonblock_enter" => {
            need(1)?;
            Event::NonBlockEnter
        }
        "nonblock_exit" => {
            need(1)?;
            Event::NonBlockExit
        }
        "spawn" => {
            need(2)?;
            Event::Spawn {
                thread: thread(toks[1])?,
            }
        }
        "join" => {
            need(2)?;
            Event::Join {
                thread: thread(toks[1])?,
            }
        }
        "barrier_wait" => {
            need(3)?;
            Event::BarrierWait {
                barrier: parse_int(toks[1], line)? as u32,
                count: parse_int(toks[2], line)? as u32,
            }
        }
        "yield" => {
            need(1)?;
            Event::Yield
        }
        "compute" => {
            need(2)?;
            let units = parse_int(toks[1], line)?;
            if units < 1 {
                return Err(syntax(line, "`compute` units must be >= 1"));
            }
            Event::Compute { units: units as u32 }
        }
        "br" => {
            if toks.len() < 3 {
                return Err(syntax(line, "`br` takes a condition and a label"));
            }
            Event::Br {
                cond: parse_expr(&toks[1..toks.len() - 1], line)?,
                label: toks[toks.len() - 1].to_string(),
                target: usize::MAX,
            }
        }
        "goto" => {
            need(2)?;
            Event::Goto {
                label: toks[1].to_string(),
                target: usize::MAX,
            }
        }
        "label" => {
            need(2)?;
            Event::Label {
                name: toks[1].to_string(),
            }
        }
        "assert" => {
            if toks.len() < 2 {
                return Err(syntax(line, "`assert` takes a condition"));
            }
            Event::Assert {
                cond: parse_expr(&toks[1..], line)?,
            }
        }
        "exit" => {
            need(1)?;
            Event::Exit
        }
        other => return Err(syntax(line, format!("unknown event `{}`", other))),
    };
    Ok(ev)
}

struct RawLine<'a> {
    num: usize,
    toks: Vec<&'a str>,
}

fn tokenize(text: &str) -> Vec<RawLine<'_>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let noc = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let toks: Vec<&str> = noc.split_whitespace().collect();
            if toks.is_empty() {
                None
            } else {
                Some(RawLine { num: i + 1, toks })
            }
        })
        .collect()
}

/// Parses DSL source into a validated [`Program`].
///
/// The entry thread is named by an `entry NAME` line; absent that, the
/// thread called `main` is the entry.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let lines = tokenize(text);

    // Pass 1: declarations, so events can forward-reference threads.
    let mut objects = Vec::new();
    let mut locks = Vec::new();
    let mut thread_names: Vec<(String, usize)> = Vec::new(); // (name, decl line)
    let mut entry_name: Option<(String, usize)> = None;
    let mut env = NameEnv {
        objects: HashMap::new(),
        locks: HashMap::new(),
        lock_kinds: Vec::new(),
        threads: HashMap::new(),
    };
    let mut all_names: HashSet<String> = HashSet::new();

    for l in &lines {
        match l.toks[0] {
            "object" => {
                if l.toks.len() != 3 {
                    return Err(syntax(l.num, "`object NAME INIT`"));
                }
                let name = l.toks[1].to_string();
                if !all_names.insert(name.clone()) {
                    return Err(ParseError::DuplicateName { line: l.num, name });
                }
                env.objects.insert(name.clone(), objects.len() + 1);
                objects.push(ObjectDecl {
                    name,
                    init: parse_int(l.toks[2], l.num)?,
                });
            }
            "lock" => {
                if l.toks.len() != 3 {
                    return Err(syntax(l.num, "`lock NAME KIND`"));
                }
                let name = l.toks[1].to_string();
                if !all_names.insert(name.clone()) {
                    return Err(ParseError::DuplicateName { line: l.num, name });
                }
                let kind = match l.toks[2] {
                    "mutex" => LockKind::Mutex,
                    "spin" => LockKind::Spin,
                    "rwsem" => LockKind::Rwsem,
                    "rcu" => LockKind::Rcu,
                    other => return Err(syntax(l.num, format!("unknown lock kind `{}`", other))),
                };
                env.locks.insert(name.clone(), locks.len());
                env.lock_kinds.push(kind);
                locks.push(LockDecl { name, kind });
            }
            "thread" => {
                if l.toks.len() != 2 || !l.toks[1].ends_with(':') {
                    return Err(syntax(l.num, "`thread NAME:`"));
                }
                let name = l.toks[1].trim_end_matches(':').to_string();
                if !all_names.insert(name.clone()) {
                    return Err(ParseError::DuplicateName { line: l.num, name });
                }
                env.threads.insert(name.clone(), thread_names.len());
                thread_names.push((name, l.num));
            }
            "entry" => {
                if l.toks.len() != 2 {
                    return Err(syntax(l.num, "`entry NAME`"));
                }
                entry_name = Some((l.toks[1].to_string(), l.num));
            }
            _ => {}
        }
    }

    // Pass 2: thread bodies.
    let mut threads: Vec<ThreadDecl> = thread_names
        .iter()
        .map(|(name, _)| ThreadDecl {
            name: name.clone(),
            events: Vec::new(),
        })
        .collect();
    let mut current: Option<usize> = None;
    let mut body_lines: Vec<Vec<usize>> = vec![Vec::new(); threads.len()];
    for l in &lines {
        match l.toks[0] {
            "object" | "lock" | "entry" => {
                current = None;
            }
            "thread" => {
                let name = l.toks[1].trim_end_matches(':');
                current = Some(env.threads[name]);
            }
            _ => {
                let Some(t) = current else {
                    return Err(syntax(l.num, "event outside of a thread body"));
                };
                let ev = parse_event_line(&l.toks, l.num, &env)?;
                threads[t].events.push(ev);
                body_lines[t].push(l.num);
            }
        }
    }

    // Resolve branch targets to label indices within the same thread.
    for (t, th) in threads.iter_mut().enumerate() {
        let mut labels: HashMap<String, usize> = HashMap::new();
        for (i, ev) in th.events.iter().enumerate() {
            if let Event::Label { name } = ev {
                if labels.insert(name.clone(), i).is_some() {
                    return Err(ParseError::DuplicateName {
                        line: body_lines[t][i],
                        name: name.clone(),
                    });
                }
            }
        }
        for (i, ev) in th.events.iter_mut().enumerate() {
            let (label, target) = match ev {
                Event::Br { label, target, .. } => (label, target),
                Event::Goto { label, target } => (label, target),
                _ => continue,
            };
            match labels.get(label.as_str()) {
                Some(&idx) => *target = idx,
                None => {
                    return Err(ParseError::UnknownName {
                        line: body_lines[t][i],
                        name: label.clone(),
                    })
                }
            }
        }
    }

    if threads.is_empty() {
        return Err(syntax(0, "program declares no threads"));
    }
    let entry = match entry_name {
        Some((name, line)) => match env.threads.get(&name) {
            Some(&t) => t,
            None => return Err(ParseError::UnknownName { line, name }),
        },
        None => match env.threads.get("main") {
            Some(&t) => t,
            None => {
                return Err(syntax(
                    0,
                    "no `entry` line and no thread named `main`",
                ))
            }
        },
    };

    Ok(Program {
        objects,
        locks,
        threads,
        entry,
    })
}

// ---------------------------------------------------------------------------
// Target specs and call sequences
// ---------------------------------------------------------------------------

/// A procedure template. Bodies are kept as raw token lines; parameters are
/// substituted into integer-constant positions (written `$name`) at
/// instantiation time, then the assembled program is parsed as usual.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcDef {
    pub name: String,
    /// `(name, lo, hi)` inclusive integer ranges.
    pub params: Vec<(String, i64, i64)>,
    pub body: Vec<String>,
}

/// Desk-scale analog of a syscall specification: shared preamble plus a set
/// of parameterized procedures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub objects: Vec<ObjectDecl>,
    pub locks: Vec<LockDecl>,
    pub init: Vec<String>,
    pub procs: Vec<ProcDef>,
}

impl TargetSpec {
    pub fn proc_by_name(&self, name: &str) -> Option<(usize, &ProcDef)> {
        self.procs
            .iter()
            .enumerate()
            .find(|(_, p)| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Call {
    pub proc: String,
    pub args: Vec<i64>,
    pub is_async: bool,
}

/// Ordered list of procedure calls; async-flagged entries run in their own
/// barrier-gated threads when instantiated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSequence {
    pub calls: Vec<Call>,
}

impl CallSequence {
    pub fn len(&self) -> usize {
        self.calls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calls.is_empty()
    }

    pub fn async_count(&self) -> usize {
        self.calls.iter().filter(|c| c.is_async).count()
    }

    /// Corpus persistence format: one call per line, args space-separated,
    /// trailing `async` marker for annotated calls.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.calls {
            let _ = write!(out, "{}", c.proc);
            for a in &c.args {
                let _ = write!(out, " {}", a);
            }
            if c.is_async {
                let _ = write!(out, " async");
            }
            let _ = writeln!(out);
        }
        out
    }
}

pub fn parse_call_sequence(text: &str) -> Result<CallSequence, ParseError> {
    let mut calls = Vec::new();
    for l in tokenize(text) {
        let mut toks = l.toks;
        let is_async = toks.last() == Some(&"async");
        if is_async {
            toks.pop();
        }
        let proc = toks[0].to_string();
        let args = toks[1..]
            .iter()
            .map(|t| parse_int(t, l.num))
            .collect::<Result<Vec<_>, _>>()?;
        calls.push(Call {
            proc,
            args,
            is_async,
        });
    }
    Ok(CallSequence { calls })
}

/// Parses a `.cct` target spec.
pub fn parse_target_spec(text: &str) -> Result<TargetSpec, ParseError> {
    let lines = tokenize(text);
    let mut name = String::new();
    let mut objects = Vec::new();
    let mut locks = Vec::new();
    let mut init: Vec<String> = Vec::new();
    let mut procs: Vec<ProcDef> = Vec::new();
    let mut names: HashSet<String> = HashSet::new();

    enum Block {
        None,
        Init,
        Proc,
    }
    let mut block = Block::None;

    for l in &lines {
        match l.toks[0] {
            "target" => {
                if l.toks.len() != 2 {
                    return Err(syntax(l.num, "`target NAME`"));
                }
                name = l.toks[1].to_string();
                block = Block::None;
            }
            "object" => {
                if l.toks.len() != 3 {
                    return Err(syntax(l.num, "`object NAME INIT`"));
                }
                let oname = l.toks[1].to_string();
                if !names.insert(oname.clone()) {
                    return Err(ParseError::DuplicateName {
                        line: l.num,
                        name: oname,
                    });
                }
                objects.push(ObjectDecl {
                    name: oname,
                    init: parse_int(l.toks[2], l.num)?,
                });
                block = Block::None;
            }
            "lock" => {
                if l.toks.len() != 3 {
                    return Err(syntax(l.num, "`lock NAME KIND`"));
                }
                let lname = l.toks[1].to_string();
                if !names.insert(lname.clone()) {
                    return Err(ParseError::DuplicateName {
                        line: l.num,
                        name: lname,
                    });
                }
                let kind = match l.toks[2] {
                    "mutex" => LockKind::Mutex,
                    "spin" => LockKind::Spin,
                    "rwsem" => LockKind::Rwsem,
                    "rcu" => LockKind::Rcu,
                    other => return Err(syntax(l.num, format!("unknown lock kind `{}`", other))),
                };
                locks.push(LockDecl { name: lname, kind });
                block = Block::None;
            }
            "init:" => {
                block = Block::Init;
            }
            "proc" => {
                // proc NAME [param=LO..HI ...]:
                if l.toks.len() < 2 {
                    return Err(syntax(l.num, "`proc NAME [param=LO..HI ...]:`"));
                }
                let mut toks = l.toks.clone();
                let last = toks.last_mut().unwrap();
                if !last.ends_with(':') {
                    return Err(syntax(l.num, "proc header must end with `:`"));
                }
                *last = last.trim_end_matches(':');
                let pname = toks[1].to_string();
                if pname.is_empty() {
                    return Err(syntax(l.num, "proc needs a name"));
                }
                if !names.insert(pname.clone()) {
                    return Err(ParseError::DuplicateName {
                        line: l.num,
                        name: pname,
                    });
                }
                let mut params = Vec::new();
                for p in toks[2..].iter().filter(|t| !t.is_empty()) {
                    let (par, range) = p.split_once('=').ok_or_else(|| {
                        syntax(l.num, format!("bad parameter spec `{}` (want name=LO..HI)", p))
                    })?;
                    let (lo, hi) = range.split_once("..").ok_or_else(|| {
                        syntax(l.num, format!("bad range `{}` (want LO..HI)", range))
                    })?;
                    let lo = parse_int(lo, l.num)?;
                    let hi = parse_int(hi, l.num)?;
                    if hi < lo {
                        return Err(ParseError::EmptyRange {
                            line: l.num,
                            name: par.to_string(),
                        });
                    }
                    params.push((par.to_string(), lo, hi));
                }
                procs.push(ProcDef {
                    name: pname,
                    params,
                    body: Vec::new(),
                });
                block = Block::Proc;
            }
            _ => {
                let rendered = l.toks.join(" ");
                match block {
                    Block::Init => init.push(rendered),
                    Block::Proc => procs.last_mut().unwrap().body.push(rendered),
                    Block::None => {
                        return Err(syntax(l.num, "event line outside of `init:` or `proc`"))
                    }
                }
            }
        }
    }

    if name.is_empty() {
        return Err(syntax(0, "missing `target NAME` line"));
    }
    let spec = TargetSpec {
        name,
        objects,
        locks,
        init,
        procs,
    };
    validate_spec(&spec)?;
    Ok(spec)
}

/// Validates templates by instantiating every procedure once (synchronously)
/// with each parameter at its range minimum.
fn validate_spec(spec: &TargetSpec) -> Result<(), ParseError> {
    let seq = CallSequence {
        calls: spec
            .procs
            .iter()
            .map(|p| Call {
                proc: p.name.clone(),
                args: p.params.iter().map(|&(_, lo, _)| lo).collect(),
                is_async: false,
            })
            .collect(),
    };
    match instantiate_input(spec, &seq) {
        Ok(_) => Ok(()),
        Err(InstantiateError::Parse(e)) => Err(e),
        Err(e) => Err(syntax(0, e.to_string())),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InstantiateError {
    #[error("call {call}: unknown procedure `{proc}`")]
    UnknownProc { call: usize, proc: String },
    #[error("call {call} ({proc}): expected {expected} argument(s), got {got}")]
    ArityMismatch {
        call: usize,
        proc: String,
        expected: usize,
        got: usize,
    },
    #[error("call {call} ({proc}): argument `{param}`={value} outside range {lo}..{hi}")]
    RangeViolation {
        call: usize,
        proc: String,
        param: String,
        value: i64,
        lo: i64,
        hi: i64,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// Validates a call sequence against a spec without instantiating it.
pub fn validate_sequence(spec: &TargetSpec, seq: &CallSequence) -> Result<(), InstantiateError> {
    for (i, call) in seq.calls.iter().enumerate() {
        let Some((_, proc)) = spec.proc_by_name(&call.proc) else {
            return Err(InstantiateError::UnknownProc {
                call: i,
                proc: call.proc.clone(),
            });
        };
        if call.args.len() != proc.params.len() {
            return Err(InstantiateError::ArityMismatch {
                call: i,
                proc: call.proc.clone(),
                expected: proc.params.len(),
                got: call.args.len(),
            });
        }
        for (arg, (pname, lo, hi)) in call.args.iter().zip(&proc.params) {
            if arg < lo || arg > hi {
                return Err(InstantiateError::RangeViolation {
                    call: i,
                    proc: call.proc.clone(),
                    param: pname.clone(),
                    value: *arg,
                    lo: *lo,
                    hi: *hi,
                });
            }
        }
    }
    Ok(())
}

/// Maps an instantiated event back to `(proc index, body event index)`.
/// Init-block and harness events (spawn/join/barrier/exit) map to `None`.
pub type Provenance = HashMap<(ThreadId, usize), (usize, usize)>;

/// Turns a call sequence into a runnable program.
///
/// Synchronous calls are inlined into the entry thread in order. Each
/// async-flagged call becomes a fresh thread gated on a shared barrier
/// (count = number of async calls), spawned at the call's sequence position
/// and joined after the last inlined call. The entry thread itself never
/// waits on the barrier.
pub fn instantiate_input(
    spec: &TargetSpec,
    seq: &CallSequence,
) -> Result<Program, InstantiateError> {
    instantiate_with_provenance(spec, seq).map(|(p, _)| p)
}

pub fn instantiate_with_provenance(
    spec: &TargetSpec,
    seq: &CallSequence,
) -> Result<(Program, Provenance), InstantiateError> {
    validate_sequence(spec, seq)?;

    let async_total = seq.async_count() as u32;
    let mut text = String::new();
    for o in &spec.objects {
        let _ = writeln!(text, "object {} {}", o.name, o.init);
    }
    for l in &spec.locks {
        let _ = writeln!(text, "lock {} {}", l.name, l.kind.as_str());
    }
    let _ = writeln!(text, "entry main");

    // Thread 0 is the entry; async threads follow in call order.
    // prov_lines[t] mirrors the emitted event lines of thread t.
    let mut entry_lines: Vec<String> = Vec::new();
    let mut prov_entry: Vec<Option<(usize, usize)>> = Vec::new();
    let mut async_threads: Vec<(String, Vec<String>, Vec<Option<(usize, usize)>>)> = Vec::new();
    let mut async_names: Vec<String> = Vec::new();

    for line in &spec.init {
        entry_lines.push(line.clone());
        prov_entry.push(None);
    }

    for (i, call) in seq.calls.iter().enumerate() {
        let (proc_idx, proc) = spec.proc_by_name(&call.proc).unwrap();
        let body = substitute_body(proc, &call.args, i);
        if call.is_async {
            let tname = format!("async{}", i);
            let mut lines = vec![format!("barrier_wait 0 {}", async_total)];
            let mut prov: Vec<Option<(usize, usize)>> = vec![None];
            for (j, b) in body.into_iter().enumerate() {
                lines.push(b);
                prov.push(Some((proc_idx, j)));
            }
            lines.push("exit".to_string());
            prov.push(None);
            entry_lines.push(format!("spawn {}", tname));
            prov_entry.push(None);
            async_names.push(tname.clone());
            async_threads.push((tname, lines, prov));
        } else {
            for (j, b) in body.into_iter().enumerate() {
                entry_lines.push(b);
                prov_entry.push(Some((proc_idx, j)));
            }
        }
    }
    for tname in &async_names {
        entry_lines.push(format!("join {}", tname));
        prov_entry.push(None);
    }
    entry_lines.push("exit".to_string());
    prov_entry.push(None);

    let _ = writeln!(text, "thread main:");
    for l in &entry_lines {
        let _ = writeln!(text, "  {}", l);
    }
    for (tname, lines, _) in &async_threads {
        let _ = writeln!(text, "thread {}:", tname);
        for l in lines {
            let _ = writeln!(text, "  {}", l);
        }
    }

    let program = parse_program(&text)?;
    let mut prov: Provenance = HashMap::new();
    for (idx, p) in prov_entry.iter().enumerate() {
        if let Some(pp) = p {
            prov.insert((0, idx), *pp);
        }
    }
    for (ti, (_, _, tprov)) in async_threads.iter().enumerate() {
        for (idx, p) in tprov.iter().enumerate() {
            if let Some(pp) = p {
                prov.insert((ti + 1, idx), *pp);
            }
        }
    }
    Ok((program, prov))
}

/// Substitutes `$param` tokens and prefixes labels with the call index so
/// inlined bodies never collide.
fn substitute_body(proc: &ProcDef, args: &[i64], call_idx: usize) -> Vec<String> {
    let bindings: HashMap<&str, i64> = proc
        .params
        .iter()
        .zip(args)
        .map(|((n, _, _), v)| (n.as_str(), *v))
        .collect();
    proc.body
        .iter()
        .map(|line| {
            let toks: Vec<String> = line
                .split_whitespace()
                .map(|t| {
                    if let Some(p) = t.strip_prefix('$') {
                        match bindings.get(p) {
                            Some(v) => v.to_string(),
                            None => t.to_string(),
                        }
                    } else {
                        t.to_string()
                    }
                })
                .collect();
            // Rewrite label operands of label/br/goto.
            let mut toks = toks;
            match toks[0].as_str() {
                "label" | "goto" => {
                    if toks.len() == 2 {
                        toks[1] = format!("c{}_{}", call_idx, toks[1]);
                    }
                }
                "br" => {
                    if let Some(last) = toks.last_mut() {
                        *last = format!("c{}_{}", call_idx, last);
                    }
                }
                _ => {}
            }
            toks.join(" ")
        })
        .collect()
}
