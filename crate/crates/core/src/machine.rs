//! The step-array abstract machine.
//!
//! Checked programs compile to an array of steps. Each step fuses a maximal
//! run of non-allocating instructions (variable pushes, lets, constructor
//! builds, integer adds) and ends at a control event: constructor dispatch,
//! a call, or a return. Only non-tail calls push a continuation frame, and
//! frames keep just the variables live after the return.
//!
//! Steps are interned globally by content: a step id is derived from a
//! digest over its function's strongly-connected call-graph component, so
//! structurally identical code in different programs (or different versions
//! of one program) shares step ids, and with them any learned rewrite
//! rules. Machine states reify to terms over a fixed vocabulary
//! (state/env-spine/frame constructors plus per-step "program counter"
//! constructors), which is what the rule learner manipulates.

use crate::lang::{Arm, CheckedProgram, Expr, Pos};
use crate::seqterm::{flatten, unflatten, SeqTerm};
use crate::term::{Ctor, CtorTable, Pattern, PatternVar, Rule};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::rc::Rc;

pub type StepId = u32;

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    /// Push a copy of the value at this depth from the top of the env.
    PushVar(u32),
    PushInt(i64),
    /// Pop `argc` values (first pushed = first child), push the node.
    PushCtor(Ctor, u32),
    /// Pop two integers, push their wrapping sum.
    Add(Pos),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepEnd {
    /// Dispatch on the head constructor of the value at `depth`; the chosen
    /// arm's step starts with the children pushed on top.
    Match { depth: u32, arms: Vec<(Ctor, StepId)>, pos: Pos },
    /// Pop `argc` args into a fresh env, save `live` (depths from the top
    /// of the remaining env, deepest first) in a frame returning to `ret`.
    Call { callee: StepId, argc: u32, live: Vec<u32>, ret: StepId, pos: Pos },
    /// Pop `argc` args into a fresh env, reusing the current frame.
    TailCall { callee: StepId, argc: u32, pos: Pos },
    /// Pop the result; restore the top frame, or halt on an empty stack.
    Return,
}

#[derive(Debug, Clone)]
pub struct Step {
    pub instrs: Vec<Instr>,
    pub end: StepEnd,
    pub pos: Pos,
    pub fn_name: String,
    pub local_idx: u32,
}

// ---------------------------------------------------------------------------
// Global step space and the reified-state vocabulary
// ---------------------------------------------------------------------------

/// Fixed constructors of reified machine states.
#[derive(Debug, Clone, Copy)]
pub struct StateVocab {
    /// St(pc, env, kont)
    pub st: Ctor,
    /// EL(value, rest-env); top of the env stack is outermost.
    pub el: Ctor,
    pub en: Ctor,
    /// KF(return-pc, saved-env, rest-kont); top frame outermost.
    pub kf: Ctor,
    pub kd: Ctor,
    /// Control of the final "apply to Done" state.
    pub halt: Ctor,
}

impl StateVocab {
    pub fn intern(table: &mut CtorTable) -> StateVocab {
        StateVocab {
            st: table.intern("·St", 3),
            el: table.intern("·EL", 2),
            en: table.intern("·EN", 0),
            kf: table.intern("·KF", 3),
            kd: table.intern("·KD", 0),
            halt: table.intern("·Halt", 0),
        }
    }
}

#[derive(Debug)]
pub struct StepSpace {
    pub steps: Vec<Step>,
    pub vocab: StateVocab,
    /// Step id -> its program-counter constructor.
    pc_ctor: Vec<Ctor>,
    step_of_code: HashMap<u32, StepId>,
    by_digest: HashMap<[u8; 16], HashMap<String, Vec<StepId>>>,
}

impl StepSpace {
    pub fn new(table: &mut CtorTable) -> StepSpace {
        StepSpace {
            steps: Vec::new(),
            vocab: StateVocab::intern(table),
            pc_ctor: Vec::new(),
            step_of_code: HashMap::new(),
            by_digest: HashMap::new(),
        }
    }

    pub fn pc(&self, id: StepId) -> Ctor {
        self.pc_ctor[id as usize]
    }

    pub fn step_of_pc_code(&self, code: u32) -> Option<StepId> {
        self.step_of_code.get(&code).copied()
    }

    pub fn step(&self, id: StepId) -> &Step {
        &self.steps[id as usize]
    }
}

// ---------------------------------------------------------------------------
// ANF intermediate form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum AAtom {
    Var(String),
    Int(i64),
}

#[derive(Debug, Clone)]
enum AComp {
    Atom(AAtom),
    Add(AAtom, AAtom, Pos),
    Ctor(String, Vec<AAtom>),
    Call(String, Vec<AAtom>, Pos),
}

#[derive(Debug, Clone)]
enum AExpr {
    Let(String, AComp, Box<AExpr>),
    Match(AAtom, Vec<AArm>, Pos),
    Tail(AComp, Pos),
}

#[derive(Debug, Clone)]
struct AArm {
    ctor: String,
    binders: Vec<String>,
    body: AExpr,
}

/// Rename every binder to a unique name so later passes can treat scopes as
/// a flat stack.
fn rename_expr(e: &Expr, scope: &mut Vec<(String, String)>, counter: &mut usize) -> Expr {
    let fresh = |orig: &str, counter: &mut usize| {
        *counter += 1;
        format!("{orig}#{counter}")
    };
    match e {
        Expr::Int(..) => e.clone(),
        Expr::Var(x, pos) => {
            let name = scope
                .iter()
                .rev()
                .find(|(o, _)| o == x)
                .map(|(_, u)| u.clone())
                .unwrap_or_else(|| x.clone());
            Expr::Var(name, *pos)
        }
        Expr::Add(a, b, pos) => Expr::Add(
            Box::new(rename_expr(a, scope, counter)),
            Box::new(rename_expr(b, scope, counter)),
            *pos,
        ),
        Expr::Let(x, bound, body, pos) => {
            let bound = rename_expr(bound, scope, counter);
            let ux = fresh(x, counter);
            scope.push((x.clone(), ux.clone()));
            let body = rename_expr(body, scope, counter);
            scope.pop();
            Expr::Let(ux, Box::new(bound), Box::new(body), *pos)
        }
        Expr::CtorApp(n, args, pos) => Expr::CtorApp(
            n.clone(),
            args.iter().map(|a| rename_expr(a, scope, counter)).collect(),
            *pos,
        ),
        Expr::FnApp(n, args, pos) => Expr::FnApp(
            n.clone(),
            args.iter().map(|a| rename_expr(a, scope, counter)).collect(),
            *pos,
        ),
        Expr::Match(s, arms, pos) => {
            let s = rename_expr(s, scope, counter);
            let arms = arms
                .iter()
                .map(|arm| {
                    let depth = scope.len();
                    let binders: Vec<String> = arm
                        .binders
                        .iter()
                        .map(|b| {
                            let ub = fresh(b, counter);
                            scope.push((b.clone(), ub.clone()));
                            ub
                        })
                        .collect();
                    let body = rename_expr(&arm.body, scope, counter);
                    scope.truncate(depth);
                    Arm { ctor: arm.ctor.clone(), binders, body, pos: arm.pos }
                })
                .collect();
            Expr::Match(Box::new(s), arms, *pos)
        }
    }
}

struct AnfCtx {
    tmp: std::cell::Cell<usize>,
}

impl AnfCtx {
    fn fresh(&self) -> String {
        let n = self.tmp.get() + 1;
        self.tmp.set(n);
        format!("%{n}")
    }
}

fn anf_tail(ctx: &AnfCtx, e: &Expr) -> AExpr {
    match e {
        Expr::Var(x, pos) => AExpr::Tail(AComp::Atom(AAtom::Var(x.clone())), *pos),
        Expr::Int(v, pos) => AExpr::Tail(AComp::Atom(AAtom::Int(*v)), *pos),
        Expr::Add(a, b, pos) => anf_named(ctx, a, &|aa| {
            anf_named(ctx, b, &|ab| AExpr::Tail(AComp::Add(aa.clone(), ab, *pos), *pos))
        }),
        Expr::CtorApp(n, args, pos) => anf_list(ctx, args, Vec::new(), &|atoms| {
            AExpr::Tail(AComp::Ctor(n.clone(), atoms), *pos)
        }),
        Expr::FnApp(n, args, pos) => anf_list(ctx, args, Vec::new(), &|atoms| {
            AExpr::Tail(AComp::Call(n.clone(), atoms, *pos), *pos)
        }),
        Expr::Let(x, bound, body, _) => anf_bind(ctx, x, bound, &|| anf_tail(ctx, body)),
        Expr::Match(s, arms, pos) => anf_named(ctx, s, &|sa| {
            let arms = arms
                .iter()
                .map(|arm| AArm {
                    ctor: arm.ctor.clone(),
                    binders: arm.binders.clone(),
                    body: anf_tail(ctx, &arm.body),
                })
                .collect();
            AExpr::Match(sa, arms, *pos)
        }),
    }
}

/// Evaluate `e` to an atom and continue. The continuation may run once per
/// match arm, duplicating the tail into each arm.
fn anf_named(ctx: &AnfCtx, e: &Expr, k: &dyn Fn(AAtom) -> AExpr) -> AExpr {
    match e {
        Expr::Var(x, _) => k(AAtom::Var(x.clone())),
        Expr::Int(v, _) => k(AAtom::Int(*v)),
        Expr::Add(a, b, pos) => anf_named(ctx, a, &|aa| {
            anf_named(ctx, b, &|ab| {
                let t = ctx.fresh();
                AExpr::Let(
                    t.clone(),
                    AComp::Add(aa.clone(), ab, *pos),
                    Box::new(k(AAtom::Var(t))),
                )
            })
        }),
        Expr::CtorApp(n, args, _) => anf_list(ctx, args, Vec::new(), &|atoms| {
            let t = ctx.fresh();
            AExpr::Let(t.clone(), AComp::Ctor(n.clone(), atoms), Box::new(k(AAtom::Var(t))))
        }),
        Expr::FnApp(n, args, pos) => anf_list(ctx, args, Vec::new(), &|atoms| {
            let t = ctx.fresh();
            AExpr::Let(t.clone(), AComp::Call(n.clone(), atoms, *pos), Box::new(k(AAtom::Var(t))))
        }),
        Expr::Let(x, bound, body, _) => anf_bind(ctx, x, bound, &|| anf_named(ctx, body, k)),
        Expr::Match(s, arms, pos) => anf_named(ctx, s, &|sa| {
            let arms = arms
                .iter()
                .map(|arm| AArm {
                    ctor: arm.ctor.clone(),
                    binders: arm.binders.clone(),
                    body: anf_named(ctx, &arm.body, k),
                })
                .collect();
            AExpr::Match(sa, arms, *pos)
        }),
    }
}

fn anf_list(
    ctx: &AnfCtx,
    args: &[Expr],
    acc: Vec<AAtom>,
    k: &dyn Fn(Vec<AAtom>) -> AExpr,
) -> AExpr {
    match args.split_first() {
        None => k(acc),
        Some((a, rest)) => anf_named(ctx, a, &|aa| {
            let mut acc2 = acc.clone();
            acc2.push(aa);
            anf_list(ctx, rest, acc2, k)
        }),
    }
}

/// `let x = bound in <then()>` where bound keeps its own name.
fn anf_bind(ctx: &AnfCtx, x: &str, bound: &Expr, then: &dyn Fn() -> AExpr) -> AExpr {
    match bound {
        Expr::Var(..) | Expr::Int(..) => anf_named(ctx, bound, &|a| {
            AExpr::Let(x.to_string(), AComp::Atom(a), Box::new(then()))
        }),
        Expr::Add(a, b, pos) => anf_named(ctx, a, &|aa| {
            anf_named(ctx, b, &|ab| {
                AExpr::Let(x.to_string(), AComp::Add(aa.clone(), ab, *pos), Box::new(then()))
            })
        }),
        Expr::CtorApp(n, args, _) => anf_list(ctx, args, Vec::new(), &|atoms| {
            AExpr::Let(x.to_string(), AComp::Ctor(n.clone(), atoms), Box::new(then()))
        }),
        Expr::FnApp(n, args, pos) => anf_list(ctx, args, Vec::new(), &|atoms| {
            AExpr::Let(x.to_string(), AComp::Call(n.clone(), atoms, *pos), Box::new(then()))
        }),
        Expr::Let(y, b2, c2, _) => anf_bind(ctx, y, b2, &|| anf_bind(ctx, x, c2, then)),
        Expr::Match(s, arms, pos) => anf_named(ctx, s, &|sa| {
            let arms = arms
                .iter()
                .map(|arm| AArm {
                    ctor: arm.ctor.clone(),
                    binders: arm.binders.clone(),
                    body: anf_bind(ctx, x, &arm.body, then),
                })
                .collect();
            AExpr::Match(sa, arms, *pos)
        }),
    }
}

fn aexpr_free_vars(e: &AExpr, bound: &mut Vec<String>, out: &mut Vec<String>) {
    let atom = |a: &AAtom, bound: &Vec<String>, out: &mut Vec<String>| {
        if let AAtom::Var(x) = a {
            if !bound.contains(x) && !out.contains(x) {
                out.push(x.clone());
            }
        }
    };
    let comp = |c: &AComp, bound: &Vec<String>, out: &mut Vec<String>| match c {
        AComp::Atom(a) => atom(a, bound, out),
        AComp::Add(a, b, _) => {
            atom(a, bound, out);
            atom(b, bound, out);
        }
        AComp::Ctor(_, args) | AComp::Call(_, args, _) => {
            args.iter().for_each(|a| atom(a, bound, out))
        }
    };
    match e {
        AExpr::Let(x, c, body) => {
            comp(c, bound, out);
            bound.push(x.clone());
            aexpr_free_vars(body, bound, out);
            bound.pop();
        }
        AExpr::Match(s, arms, _) => {
            atom(s, bound, out);
            for arm in arms {
                let depth = bound.len();
                bound.extend(arm.binders.iter().cloned());
                aexpr_free_vars(&arm.body, bound, out);
                bound.truncate(depth);
            }
        }
        AExpr::Tail(c, _) => comp(c, bound, out),
    }
}

// ---------------------------------------------------------------------------
// Step emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum LocalEnd {
    Match { depth: u32, arms: Vec<(String, usize)>, pos: Pos },
    Call { callee: String, argc: u32, live: Vec<u32>, ret: usize, pos: Pos },
    TailCall { callee: String, argc: u32, pos: Pos },
    Return,
}

#[derive(Debug, Clone)]
struct LocalStep {
    instrs: Vec<Instr>,
    end: LocalEnd,
    pos: Pos,
}

struct FnCompiler<'a> {
    prog: &'a CheckedProgram,
    steps: Vec<LocalStep>,
}

impl FnCompiler<'_> {
    /// Compile `e` into a fresh step whose env stack holds `env`.
    fn new_step(&mut self, e: &AExpr, env: &mut Vec<String>) -> usize {
        let idx = self.steps.len();
        self.steps.push(LocalStep { instrs: Vec::new(), end: LocalEnd::Return, pos: Pos::default() });
        let mut instrs = Vec::new();
        self.fill(idx, &mut instrs, e, env);
        idx
    }

    fn depth_of(env: &[String], name: &str) -> u32 {
        let i = env
            .iter()
            .rposition(|n| n == name)
            .unwrap_or_else(|| panic!("unresolved name '{name}'"));
        (env.len() - 1 - i) as u32
    }

    fn push_atom(instrs: &mut Vec<Instr>, env: &mut Vec<String>, a: &AAtom) {
        match a {
            AAtom::Var(x) => {
                instrs.push(Instr::PushVar(Self::depth_of(env, x)));
                env.push("·".into());
            }
            AAtom::Int(v) => {
                instrs.push(Instr::PushInt(*v));
                env.push("·".into());
            }
        }
    }

    /// Emit a non-call computation; leaves one value named `name` on top.
    fn emit_comp(&self, instrs: &mut Vec<Instr>, env: &mut Vec<String>, c: &AComp, name: &str) {
        match c {
            AComp::Atom(a) => Self::push_atom(instrs, env, a),
            AComp::Add(a, b, pos) => {
                Self::push_atom(instrs, env, a);
                Self::push_atom(instrs, env, b);
                instrs.push(Instr::Add(*pos));
                env.pop();
                env.pop();
                env.push("·".into());
            }
            AComp::Ctor(n, args) => {
                for a in args {
                    Self::push_atom(instrs, env, a);
                }
                let meta = &self.prog.ctors[n];
                instrs.push(Instr::PushCtor(meta.ctor, args.len() as u32));
                env.truncate(env.len() - args.len());
                env.push("·".into());
            }
            AComp::Call(..) => unreachable!("calls end a step"),
        }
        *env.last_mut().unwrap() = name.to_string();
    }

    fn fill(&mut self, idx: usize, instrs: &mut Vec<Instr>, e: &AExpr, env: &mut Vec<String>) {
        match e {
            AExpr::Let(x, AComp::Call(callee, args, pos), body) => {
                // live = env slots the continuation still needs
                let mut bound = vec![x.clone()];
                let mut free = Vec::new();
                aexpr_free_vars(body, &mut bound, &mut free);
                let mut live_idx: Vec<usize> = env
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| free.contains(n))
                    .map(|(i, _)| i)
                    .collect();
                live_idx.sort_unstable();
                live_idx.dedup();
                let live: Vec<u32> = live_idx.iter().map(|&i| (env.len() - 1 - i) as u32).collect();
                let mut ret_env: Vec<String> =
                    live_idx.iter().map(|&i| env[i].clone()).collect();
                ret_env.push(x.clone());
                for a in args {
                    Self::push_atom(instrs, env, a);
                }
                let ret = self.new_step(body, &mut ret_env);
                self.steps[idx] = LocalStep {
                    instrs: std::mem::take(instrs),
                    end: LocalEnd::Call {
                        callee: callee.clone(),
                        argc: args.len() as u32,
                        live,
                        ret,
                        pos: *pos,
                    },
                    pos: *pos,
                };
            }
            AExpr::Let(x, c, body) => {
                self.emit_comp(instrs, env, c, x);
                self.fill(idx, instrs, body, env);
            }
            AExpr::Tail(AComp::Call(callee, args, pos), _) => {
                for a in args {
                    Self::push_atom(instrs, env, a);
                }
                self.steps[idx] = LocalStep {
                    instrs: std::mem::take(instrs),
                    end: LocalEnd::TailCall { callee: callee.clone(), argc: args.len() as u32, pos: *pos },
                    pos: *pos,
                };
            }
            AExpr::Tail(c, pos) => {
                self.emit_comp(instrs, env, c, "%ret");
                self.steps[idx] = LocalStep {
                    instrs: std::mem::take(instrs),
                    end: LocalEnd::Return,
                    pos: *pos,
                };
            }
            AExpr::Match(scrutinee, arms, pos) => {
                let depth = match scrutinee {
                    AAtom::Var(x) => Self::depth_of(env, x),
                    AAtom::Int(v) => {
                        // match on a literal: stuck at runtime, still compiled
                        instrs.push(Instr::PushInt(*v));
                        env.push("·".into());
                        0
                    }
                };
                let mut compiled_arms = Vec::new();
                for arm in arms {
                    let mut arm_env = env.clone();
                    arm_env.extend(arm.binders.iter().cloned());
                    let step = self.new_step(&arm.body, &mut arm_env);
                    compiled_arms.push((arm.ctor.clone(), step));
                }
                self.steps[idx] = LocalStep {
                    instrs: std::mem::take(instrs),
                    end: LocalEnd::Match { depth, arms: compiled_arms, pos: *pos },
                    pos: *pos,
                };
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Linking: SCC digests and global interning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CompiledProgram {
    /// Function name -> (entry step, arity).
    pub entries: HashMap<String, (StepId, u32)>,
    /// Data constructor name -> (ctor, arity).
    pub ctors: HashMap<String, (Ctor, u32)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum MachineError {
    #[error("unknown function '{0}'")]
    UnknownFunction(String),
    #[error("function '{name}' takes {expected} arguments, got {got}")]
    ArityMismatch { name: String, expected: u32, got: u32 },
    #[error("malformed state term: {0}")]
    MalformedState(String),
}

pub fn compile(
    prog: &CheckedProgram,
    space: &mut StepSpace,
    table: &mut CtorTable,
) -> CompiledProgram {
    // per-function local compilation
    let mut locals: Vec<(String, u32, Vec<LocalStep>)> = Vec::new();
    for f in &prog.fns {
        let mut counter = 0usize;
        let mut scope: Vec<(String, String)> =
            f.params.iter().map(|p| (p.clone(), p.clone())).collect();
        let renamed = rename_expr(&f.body, &mut scope, &mut counter);
        let ctx = AnfCtx { tmp: std::cell::Cell::new(0) };
        let anf = anf_tail(&ctx, &renamed);
        let mut fc = FnCompiler { prog, steps: Vec::new() };
        let mut env: Vec<String> = f.params.clone();
        fc.new_step(&anf, &mut env);
        locals.push((f.name.clone(), f.params.len() as u32, fc.steps));
    }

    let entries = intern_functions(prog, &locals, space, table);
    CompiledProgram {
        entries,
        ctors: prog.ctors.iter().map(|(n, m)| (n.clone(), (m.ctor, m.arity))).collect(),
        warnings: prog.warnings.clone(),
    }
}

fn callee_names(steps: &[LocalStep]) -> Vec<String> {
    let mut out = Vec::new();
    for s in steps {
        match &s.end {
            LocalEnd::Call { callee, .. } | LocalEnd::TailCall { callee, .. } => {
                if !out.contains(callee) {
                    out.push(callee.clone());
                }
            }
            _ => {}
        }
    }
    out
}

/// Tarjan strongly-connected components over the call graph, returned in
/// reverse topological order (callees before callers).
fn sccs(locals: &[(String, u32, Vec<LocalStep>)]) -> Vec<Vec<usize>> {
    let index_of: HashMap<&str, usize> =
        locals.iter().enumerate().map(|(i, (n, _, _))| (n.as_str(), i)).collect();
    let adj: Vec<Vec<usize>> = locals
        .iter()
        .map(|(_, _, steps)| {
            callee_names(steps).iter().filter_map(|n| index_of.get(n.as_str()).copied()).collect()
        })
        .collect();

    struct T<'a> {
        adj: &'a [Vec<usize>],
        index: Vec<Option<u32>>,
        low: Vec<u32>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: u32,
        out: Vec<Vec<usize>>,
    }
    impl T<'_> {
        fn visit(&mut self, v: usize) {
            self.index[v] = Some(self.next);
            self.low[v] = self.next;
            self.next += 1;
            self.stack.push(v);
            self.on_stack[v] = true;
            for &w in &self.adj[v].clone() {
                if self.index[w].is_none() {
                    self.visit(w);
                    self.low[v] = self.low[v].min(self.low[w]);
                } else if self.on_stack[w] {
                    self.low[v] = self.low[v].min(self.index[w].unwrap());
                }
            }
            if self.low[v] == self.index[v].unwrap() {
                let mut comp = Vec::new();
                loop {
                    let w = self.stack.pop().unwrap();
                    self.on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                self.out.push(comp);
            }
        }
    }
    let n = locals.len();
    let mut t = T {
        adj: &adj,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if t.index[v].is_none() {
            t.visit(v);
        }
    }
    t.out // Tarjan emits components callees-first
}

fn intern_functions(
    prog: &CheckedProgram,
    locals: &[(String, u32, Vec<LocalStep>)],
    space: &mut StepSpace,
    table: &mut CtorTable,
) -> HashMap<String, (StepId, u32)> {
    let mut entries: HashMap<String, (StepId, u32)> = HashMap::new();
    for comp in sccs(locals) {
        let mut members: Vec<usize> = comp;
        members.sort_by(|&a, &b| locals[a].0.cmp(&locals[b].0));
        let ordinal: HashMap<&str, usize> =
            members.iter().enumerate().map(|(o, &i)| (locals[i].0.as_str(), o)).collect();

        // canonical serialization of the component
        let mut bytes: Vec<u8> = Vec::new();
        for &i in &members {
            let (name, arity, steps) = &locals[i];
            write_str(&mut bytes, name);
            bytes.extend(arity.to_le_bytes());
            bytes.extend((steps.len() as u32).to_le_bytes());
            for s in steps {
                bytes.extend((s.instrs.len() as u32).to_le_bytes());
                for ins in &s.instrs {
                    match ins {
                        Instr::PushVar(d) => {
                            bytes.push(0);
                            bytes.extend(d.to_le_bytes());
                        }
                        Instr::PushInt(v) => {
                            bytes.push(1);
                            bytes.extend(v.to_le_bytes());
                        }
                        Instr::PushCtor(c, n) => {
                            bytes.push(2);
                            write_str(&mut bytes, table.name(*c));
                            bytes.extend(n.to_le_bytes());
                        }
                        Instr::Add(_) => bytes.push(3),
                    }
                }
                match &s.end {
                    LocalEnd::Match { depth, arms, .. } => {
                        bytes.push(10);
                        bytes.extend(depth.to_le_bytes());
                        let mut sorted: Vec<_> = arms.clone();
                        sorted.sort();
                        bytes.extend((sorted.len() as u32).to_le_bytes());
                        for (ctor, target) in sorted {
                            write_str(&mut bytes, &ctor);
                            bytes.extend((target as u32).to_le_bytes());
                        }
                    }
                    LocalEnd::Call { callee, argc, live, ret, .. } => {
                        bytes.push(11);
                        write_callee(&mut bytes, callee, &ordinal, &entries, space, table);
                        bytes.extend(argc.to_le_bytes());
                        bytes.extend((live.len() as u32).to_le_bytes());
                        for d in live {
                            bytes.extend(d.to_le_bytes());
                        }
                        bytes.extend((*ret as u32).to_le_bytes());
                    }
                    LocalEnd::TailCall { callee, argc, .. } => {
                        bytes.push(12);
                        write_callee(&mut bytes, callee, &ordinal, &entries, space, table);
                        bytes.extend(argc.to_le_bytes());
                    }
                    LocalEnd::Return => bytes.push(13),
                }
            }
        }
        let full = Sha256::digest(&bytes);
        let mut digest = [0u8; 16];
        digest.copy_from_slice(&full[..16]);

        if let Some(existing) = space.by_digest.get(&digest) {
            for &i in &members {
                let (name, arity, _) = &locals[i];
                entries.insert(name.clone(), (existing[name][0], *arity));
            }
            continue;
        }

        // allocate fresh global step ids for the whole component
        let mut bases: HashMap<&str, StepId> = HashMap::new();
        let mut next = space.steps.len() as StepId;
        for &i in &members {
            bases.insert(locals[i].0.as_str(), next);
            next += locals[i].2.len() as StepId;
        }
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let mut ids_by_fn: HashMap<String, Vec<StepId>> = HashMap::new();
        for &i in &members {
            let (name, arity, steps) = &locals[i];
            let base = bases[name.as_str()];
            entries.insert(name.clone(), (base, *arity));
            let mut ids = Vec::new();
            for (local_idx, s) in steps.iter().enumerate() {
                let id = base + local_idx as StepId;
                ids.push(id);
                let end = match &s.end {
                    LocalEnd::Match { depth, arms, pos } => {
                        let mut resolved: Vec<(Ctor, StepId)> = arms
                            .iter()
                            .map(|(cname, target)| {
                                (prog.ctors[cname].ctor, base + *target as StepId)
                            })
                            .collect();
                        resolved.sort_by_key(|(c, _)| c.0);
                        StepEnd::Match { depth: *depth, arms: resolved, pos: *pos }
                    }
                    LocalEnd::Call { callee, argc, live, ret, pos } => StepEnd::Call {
                        callee: resolve_callee(callee, &bases, &entries),
                        argc: *argc,
                        live: live.clone(),
                        ret: base + *ret as StepId,
                        pos: *pos,
                    },
                    LocalEnd::TailCall { callee, argc, pos } => StepEnd::TailCall {
                        callee: resolve_callee(callee, &bases, &entries),
                        argc: *argc,
                        pos: *pos,
                    },
                    LocalEnd::Return => StepEnd::Return,
                };
                space.steps.push(Step {
                    instrs: s.instrs.clone(),
                    end,
                    pos: s.pos,
                    fn_name: name.clone(),
                    local_idx: local_idx as u32,
                });
                let pc_name = format!("·pc:{name}.{local_idx}@{hex}");
                let pc = table.intern(&pc_name, 0);
                space.pc_ctor.push(pc);
                space.step_of_code.insert(pc.0, id);
            }
            ids_by_fn.insert(name.clone(), ids);
        }
        space.by_digest.insert(digest, ids_by_fn);
    }
    entries
}

fn write_str(bytes: &mut Vec<u8>, s: &str) {
    bytes.extend((s.len() as u32).to_le_bytes());
    bytes.extend(s.as_bytes());
}

fn write_callee(
    bytes: &mut Vec<u8>,
    callee: &str,
    ordinal: &HashMap<&str, usize>,
    entries: &HashMap<String, (StepId, u32)>,
    space: &StepSpace,
    table: &CtorTable,
) {
    if let Some(&o) = ordinal.get(callee) {
        bytes.push(0);
        bytes.extend((o as u32).to_le_bytes());
    } else {
        // external callee: reference its stable pc name
        let (entry, _) = entries[callee];
        bytes.push(1);
        write_str(bytes, table.name(space.pc(entry)));
    }
}

fn resolve_callee(
    callee: &str,
    bases: &HashMap<&str, StepId>,
    entries: &HashMap<String, (StepId, u32)>,
) -> StepId {
    bases.get(callee).copied().unwrap_or_else(|| entries[callee].0)
}

// ---------------------------------------------------------------------------
// Machine state and native execution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Node(Ctor, Rc<[Value]>),
}

impl Value {
    pub fn node(c: Ctor, children: Vec<Value>) -> Value {
        Value::Node(c, children.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub ret: StepId,
    pub saved: Vec<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Step(StepId),
    Halt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    pub control: Control,
    pub env: Vec<Value>,
    pub kont: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StuckInfo {
    pub reason: String,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Running,
    Halted(Value),
    Stuck(StuckInfo),
}

pub fn init_state(
    prog: &CompiledProgram,
    fn_name: &str,
    args: Vec<Value>,
) -> Result<MachineState, MachineError> {
    let (entry, arity) = *prog
        .entries
        .get(fn_name)
        .ok_or_else(|| MachineError::UnknownFunction(fn_name.to_string()))?;
    if arity as usize != args.len() {
        return Err(MachineError::ArityMismatch {
            name: fn_name.to_string(),
            expected: arity,
            got: args.len() as u32,
        });
    }
    Ok(MachineState { control: Control::Step(entry), env: args, kont: Vec::new() })
}

/// Execute one compacted step in place.
pub fn exec_step(space: &StepSpace, st: &mut MachineState) -> StepOutcome {
    let pc = match st.control {
        Control::Step(pc) => pc,
        Control::Halt => return StepOutcome::Halted(st.env[0].clone()),
    };
    let step = &space.steps[pc as usize];
    for ins in &step.instrs {
        match ins {
            Instr::PushVar(d) => {
                let v = st.env[st.env.len() - 1 - *d as usize].clone();
                st.env.push(v);
            }
            Instr::PushInt(v) => st.env.push(Value::Int(*v)),
            Instr::PushCtor(c, n) => {
                let ch = st.env.split_off(st.env.len() - *n as usize);
                st.env.push(Value::Node(*c, ch.into()));
            }
            Instr::Add(pos) => {
                let b = st.env.pop().unwrap();
                let a = st.env.pop().unwrap();
                match (a, b) {
                    (Value::Int(x), Value::Int(y)) => st.env.push(Value::Int(x.wrapping_add(y))),
                    _ => {
                        return StepOutcome::Stuck(StuckInfo {
                            reason: "addition on a non-integer value".into(),
                            pos: *pos,
                        })
                    }
                }
            }
        }
    }
    match &step.end {
        StepEnd::Match { depth, arms, pos } => {
            let v = &st.env[st.env.len() - 1 - *depth as usize];
            match v {
                Value::Node(c, ch) => match arms.binary_search_by_key(&c.0, |(a, _)| a.0) {
                    Ok(i) => {
                        let target = arms[i].1;
                        let ch = ch.clone();
                        st.env.extend(ch.iter().cloned());
                        st.control = Control::Step(target);
                        StepOutcome::Running
                    }
                    Err(_) => StepOutcome::Stuck(StuckInfo {
                        reason: "non-exhaustive match".into(),
                        pos: *pos,
                    }),
                },
                Value::Int(_) => StepOutcome::Stuck(StuckInfo {
                    reason: "match on an integer value".into(),
                    pos: *pos,
                }),
            }
        }
        StepEnd::Call { callee, argc, live, ret, .. } => {
            let args = st.env.split_off(st.env.len() - *argc as usize);
            let mut saved = Vec::with_capacity(live.len());
            for d in live {
                saved.push(st.env[st.env.len() - 1 - *d as usize].clone());
            }
            st.kont.push(Frame { ret: *ret, saved });
            st.env = args;
            st.control = Control::Step(*callee);
            StepOutcome::Running
        }
        StepEnd::TailCall { callee, argc, .. } => {
            let args = st.env.split_off(st.env.len() - *argc as usize);
            st.env = args;
            st.control = Control::Step(*callee);
            StepOutcome::Running
        }
        StepEnd::Return => {
            let v = st.env.pop().expect("return with empty env");
            match st.kont.pop() {
                Some(Frame { ret, mut saved }) => {
                    saved.push(v);
                    st.env = saved;
                    st.control = Control::Step(ret);
                    StepOutcome::Running
                }
                None => {
                    st.env = vec![v.clone()];
                    st.control = Control::Halt;
                    StepOutcome::Halted(v)
                }
            }
        }
    }
}

/// Plain execution without capture. Returns the outcome and step count.
pub fn run_machine(space: &StepSpace, st: &mut MachineState) -> (StepOutcome, u64) {
    let mut steps = 0u64;
    loop {
        match exec_step(space, st) {
            StepOutcome::Running => steps += 1,
            StepOutcome::Halted(v) => return (StepOutcome::Halted(v), steps + 1),
            StepOutcome::Stuck(s) => return (StepOutcome::Stuck(s), steps),
        }
    }
}

// ---------------------------------------------------------------------------
// Reification between machine states and terms
// ---------------------------------------------------------------------------

pub fn value_to_term(v: &Value, table: &mut CtorTable) -> Pattern {
    match v {
        Value::Int(i) => Pattern::leaf(table.intern_int(*i)),
        Value::Node(c, ch) => {
            Pattern::Node(*c, ch.iter().map(|x| value_to_term(x, table)).collect())
        }
    }
}

fn env_to_term(env: &[Value], space: &StepSpace, table: &mut CtorTable) -> Pattern {
    let mut acc = Pattern::leaf(space.vocab.en);
    for v in env {
        acc = Pattern::node(space.vocab.el, vec![value_to_term(v, table), acc]);
    }
    acc
}

/// Reify a machine state as a ground term.
pub fn reify(st: &MachineState, space: &StepSpace, table: &mut CtorTable) -> Pattern {
    let pc = match st.control {
        Control::Step(id) => space.pc(id),
        Control::Halt => space.vocab.halt,
    };
    let mut kont = Pattern::leaf(space.vocab.kd);
    for f in &st.kont {
        kont = Pattern::node(
            space.vocab.kf,
            vec![Pattern::leaf(space.pc(f.ret)), env_to_term(&f.saved, space, table), kont],
        );
    }
    Pattern::node(space.vocab.st, vec![Pattern::leaf(pc), env_to_term(&st.env, space, table), kont])
}

pub fn term_to_value(p: &Pattern, space: &StepSpace, table: &CtorTable) -> Result<Value, MachineError> {
    match p {
        Pattern::Var(_) => Err(MachineError::MalformedState("variable in value".into())),
        Pattern::Node(c, ch) => {
            let v = space.vocab;
            if [v.st, v.el, v.en, v.kf, v.kd, v.halt].contains(c)
                || space.step_of_pc_code(c.0).is_some()
            {
                return Err(MachineError::MalformedState(format!(
                    "machine constructor '{}' in value position",
                    table.name(*c)
                )));
            }
            if let Some(i) = table.info(*c).int_val {
                return Ok(Value::Int(i));
            }
            let ch = ch
                .iter()
                .map(|x| term_to_value(x, space, table))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Value::node(*c, ch))
        }
    }
}

fn term_to_env(p: &Pattern, space: &StepSpace, table: &CtorTable) -> Result<Vec<Value>, MachineError> {
    let mut out = Vec::new();
    let mut cur = p;
    loop {
        match cur {
            Pattern::Node(c, ch) if *c == space.vocab.el => {
                out.push(term_to_value(&ch[0], space, table)?);
                cur = &ch[1];
            }
            Pattern::Node(c, _) if *c == space.vocab.en => {
                out.reverse(); // spine is top-first, env vec is bottom-first
                return Ok(out);
            }
            _ => return Err(MachineError::MalformedState("bad env spine".into())),
        }
    }
}

/// Rebuild a machine state from a well-formed reified state term.
pub fn unreify(p: &Pattern, space: &StepSpace, table: &CtorTable) -> Result<MachineState, MachineError> {
    let Pattern::Node(c, ch) = p else {
        return Err(MachineError::MalformedState("state is a variable".into()));
    };
    if *c != space.vocab.st || ch.len() != 3 {
        return Err(MachineError::MalformedState("root is not a state".into()));
    }
    let control = match &ch[0] {
        Pattern::Node(pc, args) if args.is_empty() => {
            if *pc == space.vocab.halt {
                Control::Halt
            } else {
                Control::Step(space.step_of_pc_code(pc.0).ok_or_else(|| {
                    MachineError::MalformedState("unknown program counter".into())
                })?)
            }
        }
        _ => return Err(MachineError::MalformedState("bad control".into())),
    };
    let env = term_to_env(&ch[1], space, table)?;
    let mut frames_rev = Vec::new();
    let mut cur = &ch[2];
    loop {
        match cur {
            Pattern::Node(c, fch) if *c == space.vocab.kf => {
                let ret = match &fch[0] {
                    Pattern::Node(pc, a) if a.is_empty() => space
                        .step_of_pc_code(pc.0)
                        .ok_or_else(|| MachineError::MalformedState("unknown return pc".into()))?,
                    _ => return Err(MachineError::MalformedState("bad frame pc".into())),
                };
                let saved = term_to_env(&fch[1], space, table)?;
                frames_rev.push(Frame { ret, saved });
                cur = &fch[2];
            }
            Pattern::Node(c, _) if *c == space.vocab.kd => break,
            _ => return Err(MachineError::MalformedState("bad kont spine".into())),
        }
    }
    frames_rev.reverse(); // spine is top-first, kont vec is bottom-first
    Ok(MachineState { control, env, kont: frames_rev })
}

// ---------------------------------------------------------------------------
// Single-step capture on flattened states
// ---------------------------------------------------------------------------

/// A captured atomic step: the rule, where each rule variable sits in the
/// pre-state, and the assembled post-state.
#[derive(Debug, Clone)]
pub struct SeqCapture {
    pub rule: Rule,
    /// Rule variable id -> span in the pre-state sequence.
    pub var_spans: Vec<(u64, usize, usize)>,
    pub next: SeqTerm,
}

#[derive(Debug, Clone)]
pub enum SeqStep {
    Rule(SeqCapture),
    Stuck(StuckInfo),
}

#[derive(Debug, Clone)]
enum CapVal {
    /// Unread pre-state subterm standing for rule variable `var`.
    Slot { var: u64, start: usize, end: usize },
    Node { ctor: Ctor, children: Vec<CapVal> },
}

struct Capture<'a> {
    state: &'a SeqTerm,
    table: &'a mut CtorTable,
    refine: HashMap<u64, CapVal>,
    next_var: u64,
}

impl Capture<'_> {
    fn fresh_slot(&mut self, start: usize, end: usize) -> CapVal {
        let var = self.next_var;
        self.next_var += 1;
        CapVal::Slot { var, start, end }
    }

    fn leaf(&self, c: Ctor) -> CapVal {
        CapVal::Node { ctor: c, children: Vec::new() }
    }

    fn resolve(&self, cv: &CapVal) -> CapVal {
        let mut cur = cv.clone();
        while let CapVal::Slot { var, .. } = cur {
            match self.refine.get(&var) {
                Some(r) => cur = r.clone(),
                None => break,
            }
        }
        cur
    }

    /// Read the head constructor, refining an unread slot into a node over
    /// fresh child slots located with subterm search.
    fn read_head(&mut self, cv: &CapVal) -> (Ctor, Vec<CapVal>) {
        match self.resolve(cv) {
            CapVal::Node { ctor, children } => (ctor, children),
            CapVal::Slot { var, start, end } => {
                let code = self.state.get(start).code;
                let ctor = Ctor(code);
                let arity = self.table.arity(ctor) as usize;
                let mut children = Vec::with_capacity(arity);
                let mut pos = start + 1;
                for _ in 0..arity {
                    let child_end = self
                        .state
                        .find_subterm(pos)
                        .expect("ground state has complete subterms");
                    children.push(self.fresh_slot(pos, child_end));
                    pos = child_end;
                }
                debug_assert_eq!(pos, end);
                self.refine.insert(var, CapVal::Node { ctor, children: children.clone() });
                (ctor, children)
            }
        }
    }

    fn read_int(&mut self, cv: &CapVal) -> Option<i64> {
        let (ctor, _) = self.read_head(cv);
        self.table.info(ctor).int_val
    }

    fn to_pattern(&self, cv: &CapVal, spans: &mut Vec<(u64, usize, usize)>) -> Pattern {
        match cv {
            CapVal::Slot { var, start, end } => match self.refine.get(var) {
                Some(r) => self.to_pattern(&r.clone(), spans),
                None => {
                    if !spans.iter().any(|(v, _, _)| v == var) {
                        spans.push((*var, *start, *end));
                    }
                    Pattern::Var(PatternVar(*var))
                }
            },
            CapVal::Node { ctor, children } => Pattern::Node(
                *ctor,
                children.iter().map(|c| self.to_pattern(c, spans)).collect(),
            ),
        }
    }

    /// Assemble the flattened form of a capture value, sharing unread
    /// pre-state slices.
    fn to_seq(&self, cv: &CapVal, out: &mut Vec<SeqTerm>, buf: &mut Vec<crate::seqterm::Elem>) {
        match cv {
            CapVal::Slot { var, start, end } => match self.refine.get(var) {
                Some(r) => self.to_seq(&r.clone(), out, buf),
                None => {
                    if !buf.is_empty() {
                        out.push(SeqTerm::from_elems(buf));
                        buf.clear();
                    }
                    out.push(self.state.slice(*start, *end));
                }
            },
            CapVal::Node { ctor, children } => {
                buf.push(crate::seqterm::Elem {
                    code: ctor.0,
                    degree: crate::term::degree_of_arity(children.len() as u32),
                });
                for c in children {
                    self.to_seq(c, out, buf);
                }
            }
        }
    }
}

struct CapEnv {
    /// entries[0] is the top of the stack.
    entries: std::collections::VecDeque<CapVal>,
    tail: CapVal,
}

/// Execute the step at the state's control position symbolically, producing
/// the atomic rewrite rule it instantiates plus the successor state.
pub fn capture_step_seq(
    state: &SeqTerm,
    space: &StepSpace,
    table: &mut CtorTable,
) -> Result<SeqStep, MachineError> {
    let vocab = space.vocab;
    let pc_code = state.get(1).code;
    let pc = space
        .step_of_pc_code(pc_code)
        .ok_or_else(|| MachineError::MalformedState("state control is not a step".into()))?;
    let step = &space.steps[pc as usize];

    let env_start = 2usize;
    let env_end = state.find_subterm(env_start).map_err(|e| {
        MachineError::MalformedState(format!("bad env region: {e}"))
    })?;
    let kont_end = state.find_subterm(env_end).map_err(|e| {
        MachineError::MalformedState(format!("bad kont region: {e}"))
    })?;

    let mut cap = Capture { state, table, refine: HashMap::new(), next_var: 0 };
    let lhs_env = cap.fresh_slot(env_start, env_end);
    let lhs_kont = cap.fresh_slot(env_end, kont_end);

    let mut env = CapEnv { entries: std::collections::VecDeque::new(), tail: lhs_env.clone() };
    let mut kont = lhs_kont.clone();

    let ensure_depth = |cap: &mut Capture, env: &mut CapEnv, d: usize| {
        while env.entries.len() <= d {
            let (c, kids) = cap.read_head(&env.tail.clone());
            debug_assert_eq!(c, vocab.el, "env spine shorter than a compiled access");
            let mut kids = kids;
            let rest = kids.pop().unwrap();
            env.entries.push_back(kids.pop().unwrap());
            env.tail = rest;
        }
    };

    for ins in &step.instrs {
        match ins {
            Instr::PushVar(d) => {
                ensure_depth(&mut cap, &mut env, *d as usize);
                let v = env.entries[*d as usize].clone();
                env.entries.push_front(v);
            }
            Instr::PushInt(v) => {
                let c = cap.table.intern_int(*v);
                let leaf = cap.leaf(c);
                env.entries.push_front(leaf);
            }
            Instr::PushCtor(c, n) => {
                let n = *n as usize;
                ensure_depth(&mut cap, &mut env, n.saturating_sub(1));
                // entries[0..n] are the top n, last pushed first
                let mut children: Vec<CapVal> = Vec::with_capacity(n);
                for _ in 0..n {
                    children.push(env.entries.pop_front().unwrap());
                }
                children.reverse();
                env.entries.push_front(CapVal::Node { ctor: *c, children });
            }
            Instr::Add(pos) => {
                ensure_depth(&mut cap, &mut env, 1);
                let b = env.entries.pop_front().unwrap();
                let a = env.entries.pop_front().unwrap();
                let (x, y) = match (cap.read_int(&a), cap.read_int(&b)) {
                    (Some(x), Some(y)) => (x, y),
                    _ => {
                        return Ok(SeqStep::Stuck(StuckInfo {
                            reason: "addition on a non-integer value".into(),
                            pos: *pos,
                        }))
                    }
                };
                let c = cap.table.intern_int(x.wrapping_add(y));
                let leaf = cap.leaf(c);
                env.entries.push_front(leaf);
            }
        }
    }

    // dispatch / control transfer
    let next_pc: Ctor;
    match &step.end {
        StepEnd::Match { depth, arms, pos } => {
            ensure_depth(&mut cap, &mut env, *depth as usize);
            let scrutinee = env.entries[*depth as usize].clone();
            let (c, children) = cap.read_head(&scrutinee);
            if cap.table.info(c).int_val.is_some() {
                return Ok(SeqStep::Stuck(StuckInfo {
                    reason: "match on an integer value".into(),
                    pos: *pos,
                }));
            }
            match arms.binary_search_by_key(&c.0, |(a, _)| a.0) {
                Ok(i) => {
                    next_pc = space.pc(arms[i].1);
                    for ch in children {
                        env.entries.push_front(ch);
                    }
                    // children pushed first-child-deepest: reverse the front
                    let n = cap.table.arity(c) as usize;
                    let mut front: Vec<CapVal> = Vec::with_capacity(n);
                    for _ in 0..n {
                        front.push(env.entries.pop_front().unwrap());
                    }
                    for v in front {
                        env.entries.push_front(v);
                    }
                }
                Err(_) => {
                    return Ok(SeqStep::Stuck(StuckInfo {
                        reason: "non-exhaustive match".into(),
                        pos: *pos,
                    }))
                }
            }
        }
        StepEnd::Call { callee, argc, live, ret, .. } => {
            let argc = *argc as usize;
            if argc > 0 {
                ensure_depth(&mut cap, &mut env, argc - 1);
            }
            let mut args: Vec<CapVal> = Vec::with_capacity(argc);
            for _ in 0..argc {
                args.push(env.entries.pop_front().unwrap());
            }
            args.reverse(); // first pushed = deepest = first param
            if let Some(&deepest) = live.iter().max() {
                ensure_depth(&mut cap, &mut env, deepest as usize);
            }
            // saved env spine, deepest live slot innermost
            let mut saved = cap.leaf(vocab.en);
            let mut live_sorted = live.clone();
            live_sorted.sort_unstable_by(|a, b| b.cmp(a));
            for d in live_sorted {
                saved = CapVal::Node {
                    ctor: vocab.el,
                    children: vec![env.entries[d as usize].clone(), saved],
                };
            }
            kont = CapVal::Node {
                ctor: vocab.kf,
                children: vec![cap.leaf(space.pc(*ret)), saved, kont],
            };
            let mut fresh = std::collections::VecDeque::new();
            for a in args.into_iter().rev() {
                fresh.push_back(a); // args deque: last param on top
            }
            env = CapEnv { entries: fresh, tail: cap.leaf(vocab.en) };
            next_pc = space.pc(*callee);
        }
        StepEnd::TailCall { callee, argc, .. } => {
            let argc = *argc as usize;
            if argc > 0 {
                ensure_depth(&mut cap, &mut env, argc - 1);
            }
            let mut fresh = std::collections::VecDeque::new();
            for _ in 0..argc {
                fresh.push_back(env.entries.pop_front().unwrap());
            }
            env = CapEnv { entries: fresh, tail: cap.leaf(vocab.en) };
            next_pc = space.pc(*callee);
        }
        StepEnd::Return => {
            ensure_depth(&mut cap, &mut env, 0);
            let result = env.entries.pop_front().unwrap();
            let (c, children) = cap.read_head(&kont);
            if c == vocab.kd {
                // apply to Done: the halting state
                next_pc = vocab.halt;
                let mut fresh = std::collections::VecDeque::new();
                fresh.push_back(result);
                env = CapEnv { entries: fresh, tail: cap.leaf(vocab.en) };
                kont = cap.leaf(vocab.kd);
            } else {
                debug_assert_eq!(c, vocab.kf);
                let ret_pc = cap.read_head(&children[0]).0;
                let ret_step = space
                    .step_of_pc_code(ret_pc.0)
                    .ok_or_else(|| MachineError::MalformedState("unknown return pc".into()))?;
                next_pc = space.pc(ret_step);
                let mut fresh = std::collections::VecDeque::new();
                fresh.push_back(result);
                env = CapEnv { entries: fresh, tail: children[1].clone() };
                kont = children[2].clone();
            }
        }
    }

    // Build the rule and the successor sequence.
    let mut spans = Vec::new();
    let lhs = Pattern::node(
        vocab.st,
        vec![
            Pattern::leaf(Ctor(pc_code)),
            cap.to_pattern(&lhs_env, &mut spans),
            cap.to_pattern(&lhs_kont, &mut spans),
        ],
    );
    let rhs_env = {
        let mut acc = env.tail.clone();
        for e in env.entries.iter().rev() {
            acc = CapVal::Node { ctor: vocab.el, children: vec![e.clone(), acc] };
        }
        acc
    };
    let rhs_root =
        CapVal::Node { ctor: vocab.st, children: vec![cap.leaf(next_pc), rhs_env, kont] };
    let mut rhs_spans = Vec::new();
    let rhs = cap.to_pattern(&rhs_root, &mut rhs_spans);

    let mut pieces: Vec<SeqTerm> = Vec::new();
    let mut buf = Vec::new();
    cap.to_seq(&rhs_root, &mut pieces, &mut buf);
    if !buf.is_empty() {
        pieces.push(SeqTerm::from_elems(&buf));
    }
    let mut next = SeqTerm::empty();
    for p in pieces {
        next = SeqTerm::concat(&next, &p);
    }

    let rule = Rule { lhs, rhs, length: 1, level: 0 };
    debug_assert!(rule.is_linear_functional());
    Ok(SeqStep::Rule(SeqCapture { rule, var_spans: spans, next }))
}

/// Capture outcome in the machine-state domain.
#[derive(Debug, Clone)]
pub enum CaptureOutcome {
    Step(MachineState, Rule),
    Halted(Value),
    Stuck(StuckInfo),
}

/// Execute one compacted step, returning the successor plus the atomic rule
/// whose left side abstracts every slot the step did not examine.
pub fn atomic_step_capture(
    st: &MachineState,
    space: &StepSpace,
    table: &mut CtorTable,
) -> Result<CaptureOutcome, MachineError> {
    if st.control == Control::Halt {
        return Ok(CaptureOutcome::Halted(st.env[0].clone()));
    }
    let seq = flatten(&reify(st, space, table));
    match capture_step_seq(&seq, space, table)? {
        SeqStep::Stuck(info) => Ok(CaptureOutcome::Stuck(info)),
        SeqStep::Rule(capture) => {
            let next_term = unflatten(&capture.next, table)
                .map_err(|e| MachineError::MalformedState(e.to_string()))?;
            let next = unreify(&next_term, space, table)?;
            Ok(CaptureOutcome::Step(next, capture.rule))
        }
    }
}

// ---------------------------------------------------------------------------
// Debug dumps
// ---------------------------------------------------------------------------

pub fn dump_steps(prog: &CompiledProgram, space: &StepSpace, table: &CtorTable) -> String {
    use std::fmt::Write;
    let mut fns: Vec<(&String, &(StepId, u32))> = prog.entries.iter().collect();
    fns.sort();
    let mut out = String::new();
    for (name, (entry, arity)) in fns {
        let _ = writeln!(out, "fn {name}/{arity} entry={entry}");
        let mut id = *entry;
        // steps of one function are contiguous from its entry
        while (id as usize) < space.steps.len() {
            let s = &space.steps[id as usize];
            if &s.fn_name != name || (id != *entry && s.local_idx == 0) {
                break;
            }
            let _ = write!(out, "  step {id} [{} fused]:", s.instrs.len());
            for ins in &s.instrs {
                match ins {
                    Instr::PushVar(d) => {
                        let _ = write!(out, " push@{d}");
                    }
                    Instr::PushInt(v) => {
                        let _ = write!(out, " int {v}");
                    }
                    Instr::PushCtor(c, n) => {
                        let _ = write!(out, " mk {}({n})", table.name(*c));
                    }
                    Instr::Add(_) => {
                        let _ = write!(out, " add");
                    }
                }
            }
            match &s.end {
                StepEnd::Match { depth, arms, .. } => {
                    let _ = write!(out, " ; match@{depth} {{");
                    for (c, t) in arms {
                        let _ = write!(out, " {}->{t}", table.name(*c));
                    }
                    let _ = write!(out, " }}");
                }
                StepEnd::Call { callee, argc, live, ret, .. } => {
                    let _ = write!(out, " ; call {callee}/{argc} live={live:?} ret={ret}");
                }
                StepEnd::TailCall { callee, argc, .. } => {
                    let _ = write!(out, " ; tailcall {callee}/{argc}");
                }
                StepEnd::Return => {
                    let _ = write!(out, " ; return");
                }
            }
            let _ = writeln!(out);
            id += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{check_program, parse_program};
    use crate::term::{match_pattern, step as rule_step, CtorTable};

    pub const BITFLIP: &str = "\
data list = Nil | Cons0 list | Cons1 list
fn f l = match l { Nil -> Nil | Cons0 t -> Cons1 (f t) | Cons1 t -> Cons0 (f t) }
";

    fn setup(src: &str) -> (CtorTable, StepSpace, CompiledProgram) {
        let mut table = CtorTable::new();
        let mut space = StepSpace::new(&mut table);
        let defs = parse_program(src).unwrap();
        let checked = check_program(&defs, &mut table).unwrap();
        let prog = compile(&checked, &mut space, &mut table);
        (table, space, prog)
    }

    fn bits_value(prog: &CompiledProgram, bits: &[u8]) -> Value {
        let nil = prog.ctors["Nil"].0;
        let c0 = prog.ctors["Cons0"].0;
        let c1 = prog.ctors["Cons1"].0;
        let mut v = Value::node(nil, vec![]);
        for &b in bits.iter().rev() {
            v = Value::node(if b == 0 { c0 } else { c1 }, vec![v]);
        }
        v
    }

    #[test]
    fn id_is_single_step() {
        let (_, space, prog) = setup("fn id x = x");
        let (entry, arity) = prog.entries["id"];
        assert_eq!(arity, 1);
        let s = space.step(entry);
        assert_eq!(s.instrs, vec![Instr::PushVar(0)]);
        assert!(matches!(s.end, StepEnd::Return));
        // the whole function is one step
        assert_eq!(space.steps.len(), 1);
    }

    #[test]
    fn let_chain_fuses_into_one_step() {
        let src = "fn f x = let a = x + 1 in let b = a + 2 in let c = b + 3 in let d = c + 4 in d + 5";
        let (_, space, prog) = setup(src);
        let (entry, _) = prog.entries["f"];
        assert_eq!(space.steps.len(), 1, "all adds fuse into the entry step");
        assert!(matches!(space.step(entry).end, StepEnd::Return));
        assert_eq!(
            space.step(entry).instrs.iter().filter(|i| matches!(i, Instr::Add(_))).count(),
            5
        );
    }

    #[test]
    fn bitflip_compiles_and_runs() {
        let (_, space, prog) = setup(BITFLIP);
        assert!(space.steps.len() >= 2, "match dispatch plus arm steps");
        let input = bits_value(&prog, &[1, 0, 1]);
        let mut st = init_state(&prog, "f", vec![input]).unwrap();
        let (outcome, steps) = run_machine(&space, &mut st);
        let expect = bits_value(&prog, &[0, 1, 0]);
        assert_eq!(outcome, StepOutcome::Halted(expect));
        assert!(steps > 3);
    }

    #[test]
    fn init_state_errors() {
        let (_, _, prog) = setup(BITFLIP);
        assert!(matches!(
            init_state(&prog, "g", vec![]),
            Err(MachineError::UnknownFunction(_))
        ));
        assert!(matches!(
            init_state(&prog, "f", vec![]),
            Err(MachineError::ArityMismatch { .. })
        ));
    }

    #[test]
    fn reify_unreify_roundtrip() {
        let (mut table, space, prog) = setup(BITFLIP);
        let input = bits_value(&prog, &[1, 0, 1, 1]);
        let mut st = init_state(&prog, "f", vec![input]).unwrap();
        let t = reify(&st, &space, &mut table);
        // Eval-rooted with Done kont
        let shown = t.display(&table);
        assert!(shown.starts_with("·St(·pc:f.0@"));
        assert!(shown.ends_with("·KD)"));
        assert_eq!(unreify(&t, &space, &table).unwrap(), st);
        // a few steps in, frames exist
        for _ in 0..5 {
            assert_eq!(exec_step(&space, &mut st), StepOutcome::Running);
            let t = reify(&st, &space, &mut table);
            assert_eq!(unreify(&t, &space, &table).unwrap(), st);
        }
    }

    #[test]
    fn unreify_rejects_garbage() {
        let (mut table, space, _) = setup(BITFLIP);
        let bad = crate::term::parse_pattern("Cons(1,2)", &mut table).unwrap();
        assert!(matches!(
            unreify(&bad, &space, &table),
            Err(MachineError::MalformedState(_))
        ));
    }

    #[test]
    fn captured_rules_replay_each_step() {
        let (mut table, space, prog) = setup(BITFLIP);
        let input = bits_value(&prog, &[0, 1, 1, 0, 1]);
        let mut st = init_state(&prog, "f", vec![input]).unwrap();
        let mut steps = 0;
        loop {
            let pre = reify(&st, &space, &mut table);
            match atomic_step_capture(&st, &space, &mut table).unwrap() {
                CaptureOutcome::Step(next, rule) => {
                    let post = reify(&next, &space, &mut table);
                    let replayed = rule_step(&rule, &pre).expect("captured rule matches pre-state");
                    assert_eq!(replayed, post, "rule replay mismatch at step {steps}");
                    assert_eq!(rule.length, 1);
                    st = next;
                    steps += 1;
                }
                CaptureOutcome::Halted(v) => {
                    let expect = bits_value(&prog, &[1, 0, 0, 1, 0]);
                    assert_eq!(v, expect);
                    break;
                }
                CaptureOutcome::Stuck(s) => panic!("unexpected stuck: {s:?}"),
            }
        }
        assert!(steps > 10);
    }

    #[test]
    fn capture_matches_native_execution() {
        let (mut table, space, prog) = setup(BITFLIP);
        let input = bits_value(&prog, &[1, 1, 0, 0]);
        let mut native = init_state(&prog, "f", vec![input.clone()]).unwrap();
        let mut captured = init_state(&prog, "f", vec![input]).unwrap();
        let mut native_steps = 0u64;
        let native_result = loop {
            match exec_step(&space, &mut native) {
                StepOutcome::Running => native_steps += 1,
                StepOutcome::Halted(v) => break v,
                StepOutcome::Stuck(s) => panic!("stuck: {s:?}"),
            }
        };
        let mut cap_steps = 0u64;
        let cap_result = loop {
            match atomic_step_capture(&captured, &space, &mut table).unwrap() {
                CaptureOutcome::Step(next, _) => {
                    captured = next;
                    cap_steps += 1;
                }
                CaptureOutcome::Halted(v) => break v,
                CaptureOutcome::Stuck(s) => panic!("stuck: {s:?}"),
            }
        };
        assert_eq!(native_result, cap_result);
        assert_eq!(native_steps + 1, cap_steps, "capture counts the final halt transition");
    }

    #[test]
    fn capture_generalizes_unread_slots() {
        // stepping on a Cons0 head leaves the tail a variable: mutating the
        // tail must not stop the same rule from applying
        let (mut table, space, prog) = setup(BITFLIP);
        let input = bits_value(&prog, &[0, 1, 1]);
        let st = init_state(&prog, "f", vec![input]).unwrap();
        let CaptureOutcome::Step(_, rule) = atomic_step_capture(&st, &space, &mut table).unwrap()
        else {
            panic!("expected step")
        };
        let lhs_shown = rule.lhs.display(&table);
        assert!(lhs_shown.contains("Cons0"), "head constructor read: {lhs_shown}");
        assert!(!lhs_shown.contains("Cons1"), "tail left abstract: {lhs_shown}");
        // different tail, same head
        let other = bits_value(&prog, &[0, 0, 0, 1, 1, 0]);
        let st2 = init_state(&prog, "f", vec![other]).unwrap();
        let pre2 = reify(&st2, &space, &mut table);
        let post2 = rule_step(&rule, &pre2).expect("rule applies to any Cons0-headed list");
        let mut native = st2.clone();
        assert_eq!(exec_step(&space, &mut native), StepOutcome::Running);
        assert_eq!(post2, reify(&native, &space, &mut table));
    }

    #[test]
    fn stuck_on_missing_arm() {
        let src = "\
data list = Nil | Cons0 list | Cons1 list
fn f l = match l { Nil -> Nil | Cons0 t -> Cons1 (f t) }
";
        let (mut table, space, prog) = setup(src);
        let c1 = prog.ctors["Cons1"].0;
        let nil = prog.ctors["Nil"].0;
        let input = Value::node(c1, vec![Value::node(nil, vec![])]);
        let mut st = init_state(&prog, "f", vec![input.clone()]).unwrap();
        let (outcome, _) = run_machine(&space, &mut st);
        assert!(matches!(outcome, StepOutcome::Stuck(ref s) if s.reason.contains("non-exhaustive")));
        // capture agrees
        let st2 = init_state(&prog, "f", vec![input]).unwrap();
        assert!(matches!(
            atomic_step_capture(&st2, &space, &mut table).unwrap(),
            CaptureOutcome::Stuck(_)
        ));
    }

    #[test]
    fn identical_functions_share_steps_across_programs() {
        let mut table = CtorTable::new();
        let mut space = StepSpace::new(&mut table);
        let defs1 = parse_program(BITFLIP).unwrap();
        let checked1 = check_program(&defs1, &mut table).unwrap();
        let prog1 = compile(&checked1, &mut space, &mut table);
        let count_after_first = space.steps.len();

        // same program with different formatting and an extra unused fn
        let src2 = "\
data list = Nil | Cons0 list | Cons1 list
fn f l =
  match l { Nil -> Nil
          | Cons0 t -> Cons1 (f t)
          | Cons1 t -> Cons0 (f t) }
fn extra x = x
";
        let defs2 = parse_program(src2).unwrap();
        let checked2 = check_program(&defs2, &mut table).unwrap();
        let prog2 = compile(&checked2, &mut space, &mut table);
        assert_eq!(prog1.entries["f"].0, prog2.entries["f"].0, "f's steps reused");
        assert_eq!(space.steps.len(), count_after_first + 1, "only 'extra' added");

        // editing f gives it fresh steps
        let src3 = "\
data list = Nil | Cons0 list | Cons1 list
fn f l = match l { Nil -> Nil | Cons0 t -> Cons0 (f t) | Cons1 t -> Cons0 (f t) }
";
        let defs3 = parse_program(src3).unwrap();
        let checked3 = check_program(&defs3, &mut table).unwrap();
        let prog3 = compile(&checked3, &mut space, &mut table);
        assert_ne!(prog1.entries["f"].0, prog3.entries["f"].0);
    }

    #[test]
    fn match_rule_shape_follows_dispatch() {
        let (mut table, space, prog) = setup(BITFLIP);
        let input = bits_value(&prog, &[0]);
        let st = init_state(&prog, "f", vec![input]).unwrap();
        let seq = flatten(&reify(&st, &space, &mut table));
        let SeqStep::Rule(cap) = capture_step_seq(&seq, &space, &mut table).unwrap() else {
            panic!()
        };
        // rule must match the state it came from, binding vars at the spans
        let pre = unflatten(&seq, &table).unwrap();
        let s = match_pattern(&cap.rule.lhs, &pre).unwrap();
        for (var, start, end) in &cap.var_spans {
            let bound = s.get(crate::term::PatternVar(*var)).unwrap();
            assert_eq!(flatten(bound), seq.slice(*start, *end));
        }
        // successor sequence is the flattened successor term
        let applied = rule_step(&cap.rule, &pre).unwrap();
        assert_eq!(flatten(&applied), cap.next);
    }
}
