//! IR-level optimization passes for the rule-based optimizing compiler:
//! constant folding, identity removal, strength reduction, copy
//! propagation and dead-store elimination, iterated to a fixed point.

use std::collections::{HashMap, HashSet};

use super::ir::{b, BinOp, CmpOp, Env, Expr, ShiftOp, SourceTask, Stmt, Var};
use crate::isa::Width;

/// Runs all passes until nothing changes (bounded).
pub fn optimize(task: &SourceTask) -> SourceTask {
    let mut t = task.clone();
    for _ in 0..16 {
        let before = t.clone();
        t.body = simplify_stmts(&t.body, t.width);
        t.ret = simplify(&t.ret, t.width);
        copy_propagate(&mut t);
        dead_store_elim(&mut t);
        if t == before {
            break;
        }
    }
    t
}

fn const_eval(e: &Expr, w: Width) -> Option<i64> {
    let probe = SourceTask {
        seed: 0,
        family: super::ir::Family::Arith,
        width: w,
        memory: false,
        body: vec![],
        ret: e.clone(),
    };
    let mut env = Env {
        vars: [0; 4],
        ptr: 0,
        mem: vec![],
    };
    probe
        .eval(&mut env)
        .ok()
        .map(|v| crate::machine::sext(v, w))
}

fn is_const(e: &Expr, c: i64, w: Width) -> bool {
    matches!(e, Expr::Const(k) if (*k as u64 ^ c as u64) & w.mask() == 0)
}

/// Folding, identities and strength reduction, bottom-up.
pub fn simplify(e: &Expr, w: Width) -> Expr {
    let e = match e {
        Expr::Var(_) | Expr::Const(_) | Expr::Load(_) => return e.clone(),
        Expr::Bin(op, l, r) => Expr::Bin(*op, b(simplify(l, w)), b(simplify(r, w))),
        Expr::Cmp(op, l, r) => Expr::Cmp(*op, b(simplify(l, w)), b(simplify(r, w))),
        Expr::MulC(x, c) => Expr::MulC(b(simplify(x, w)), *c),
        Expr::Shift(op, x, k) => Expr::Shift(*op, b(simplify(x, w)), *k),
        Expr::Neg(x) => Expr::Neg(b(simplify(x, w))),
        Expr::Not(x) => Expr::Not(b(simplify(x, w))),
        Expr::Abs(x) => Expr::Abs(b(simplify(x, w))),
    };
    let all_const = match &e {
        Expr::Bin(_, l, r) | Expr::Cmp(_, l, r) => {
            matches!(**l, Expr::Const(_)) && matches!(**r, Expr::Const(_))
        }
        Expr::MulC(x, _) | Expr::Shift(_, x, _) | Expr::Neg(x) | Expr::Not(x) | Expr::Abs(x) => {
            matches!(**x, Expr::Const(_))
        }
        _ => false,
    };
    if all_const {
        if let Some(v) = const_eval(&e, w) {
            return Expr::Const(v);
        }
    }
    match e {
        Expr::Bin(op, l, r) => {
            let zero_r = is_const(&r, 0, w);
            let zero_l = is_const(&l, 0, w);
            match op {
                BinOp::Add | BinOp::Or | BinOp::Xor if zero_r => *l,
                BinOp::Add | BinOp::Or | BinOp::Xor if zero_l => *r,
                BinOp::Sub if zero_r => *l,
                BinOp::And if zero_r || zero_l => Expr::Const(0),
                BinOp::And if is_const(&r, -1, w) => *l,
                BinOp::And if is_const(&l, -1, w) => *r,
                _ => Expr::Bin(op, l, r),
            }
        }
        Expr::MulC(x, 1) => *x,
        Expr::MulC(_, 0) => Expr::Const(0),
        Expr::MulC(x, -1) => Expr::Neg(x),
        Expr::MulC(x, c) if c > 1 && (c as u64).is_power_of_two() => {
            Expr::Shift(ShiftOp::Shl, x, c.trailing_zeros())
        }
        Expr::Shift(_, x, 0) => *x,
        other => other,
    }
}

fn simplify_stmts(ss: &[Stmt], w: Width) -> Vec<Stmt> {
    let mut out = Vec::new();
    for s in ss {
        match s {
            Stmt::Assign(v, e) => out.push(Stmt::Assign(*v, simplify(e, w))),
            Stmt::Store(d, e) => out.push(Stmt::Store(*d, simplify(e, w))),
            Stmt::Repeat(n, body) => {
                let body = simplify_stmts(body, w);
                if !body.is_empty() {
                    out.push(Stmt::Repeat(*n, body));
                }
            }
            Stmt::If {
                op,
                lhs,
                rhs,
                then,
                els,
            } => {
                let (lhs, rhs) = (simplify(lhs, w), simplify(rhs, w));
                let (then, els) = (simplify_stmts(then, w), simplify_stmts(els, w));
                // statically decided branch
                if let (Expr::Const(l), Expr::Const(r)) = (&lhs, &rhs) {
                    let (l, r) = (*l, *r);
                    let taken = match op {
                        CmpOp::Eq => l == r,
                        CmpOp::Ne => l != r,
                        CmpOp::Lt => l < r,
                        CmpOp::Gt => l > r,
                    };
                    out.extend(if taken { then } else { els });
                } else if then.is_empty() && els.is_empty() {
                    // pure condition, nothing to do
                } else {
                    out.push(Stmt::If {
                        op: *op,
                        lhs,
                        rhs,
                        then,
                        els,
                    });
                }
            }
        }
    }
    out
}

fn substitute(e: &Expr, env: &HashMap<Var, Expr>) -> Expr {
    match e {
        Expr::Var(v) => env.get(v).cloned().unwrap_or_else(|| e.clone()),
        Expr::Const(_) | Expr::Load(_) => e.clone(),
        Expr::Bin(op, l, r) => Expr::Bin(*op, b(substitute(l, env)), b(substitute(r, env))),
        Expr::Cmp(op, l, r) => Expr::Cmp(*op, b(substitute(l, env)), b(substitute(r, env))),
        Expr::MulC(x, c) => Expr::MulC(b(substitute(x, env)), *c),
        Expr::Shift(op, x, k) => Expr::Shift(*op, b(substitute(x, env)), *k),
        Expr::Neg(x) => Expr::Neg(b(substitute(x, env))),
        Expr::Not(x) => Expr::Not(b(substitute(x, env))),
        Expr::Abs(x) => Expr::Abs(b(substitute(x, env))),
    }
}

fn invalidate(env: &mut HashMap<Var, Expr>, assigned: Var) {
    env.retain(|k, v| *k != assigned && !v.reads(assigned));
}

fn copy_prop_block(ss: &mut [Stmt], env: &mut HashMap<Var, Expr>) {
    for s in ss.iter_mut() {
        match s {
            Stmt::Assign(v, e) => {
                *e = substitute(e, env);
                let v = *v;
                invalidate(env, v);
                if matches!(e, Expr::Const(_)) || matches!(e, Expr::Var(w) if *w != v) {
                    env.insert(v, e.clone());
                }
            }
            Stmt::Store(_, e) => *e = substitute(e, env),
            Stmt::If {
                lhs,
                rhs,
                then,
                els,
                ..
            } => {
                *lhs = substitute(lhs, env);
                *rhs = substitute(rhs, env);
                let mut te = env.clone();
                copy_prop_block(then, &mut te);
                let mut ee = env.clone();
                copy_prop_block(els, &mut ee);
                for v in [Var::A, Var::B, Var::X, Var::Y] {
                    if then.iter().chain(els.iter()).any(|s| s.assigns(v)) {
                        invalidate(env, v);
                    }
                }
            }
            Stmt::Repeat(_, body) => {
                for v in [Var::A, Var::B, Var::X, Var::Y] {
                    if body.iter().any(|s| s.assigns(v)) {
                        invalidate(env, v);
                    }
                }
                let mut be = env.clone();
                copy_prop_block(body, &mut be);
            }
        }
    }
}

/// Replaces uses of locals that hold a copy of a variable or a constant.
pub fn copy_propagate(t: &mut SourceTask) {
    let mut env = HashMap::new();
    copy_prop_block(&mut t.body, &mut env);
    t.ret = substitute(&t.ret, &env);
}

fn vars_of(e: &Expr, out: &mut HashSet<Var>) {
    match e {
        Expr::Var(v) => {
            out.insert(*v);
        }
        Expr::Const(_) | Expr::Load(_) => {}
        Expr::Bin(_, l, r) | Expr::Cmp(_, l, r) => {
            vars_of(l, out);
            vars_of(r, out);
        }
        Expr::MulC(x, _) | Expr::Shift(_, x, _) | Expr::Neg(x) | Expr::Not(x) | Expr::Abs(x) => {
            vars_of(x, out)
        }
    }
}

/// Live variables before `ss` given those live after it.
fn live_in(ss: &[Stmt], live_out: &HashSet<Var>) -> HashSet<Var> {
    let mut live = live_out.clone();
    for s in ss.iter().rev() {
        match s {
            Stmt::Assign(v, e) => {
                live.remove(v);
                vars_of(e, &mut live);
            }
            Stmt::Store(_, e) => vars_of(e, &mut live),
            Stmt::If {
                lhs,
                rhs,
                then,
                els,
                ..
            } => {
                let mut l = live_in(then, &live);
                l.extend(live_in(els, &live));
                vars_of(lhs, &mut l);
                vars_of(rhs, &mut l);
                live = l;
            }
            Stmt::Repeat(_, body) => live = loop_live(body, &live),
        }
    }
    live
}

/// Live set at the loop head (and therefore after the body).
fn loop_live(body: &[Stmt], after: &HashSet<Var>) -> HashSet<Var> {
    let mut head = after.clone();
    loop {
        let next: HashSet<Var> = live_in(body, &head).union(after).copied().collect();
        if next == head {
            return head;
        }
        head = next;
    }
}

fn dse_block(ss: &mut Vec<Stmt>, live_out: &HashSet<Var>) {
    let mut live = live_out.clone();
    let mut keep = vec![true; ss.len()];
    for (i, s) in ss.iter_mut().enumerate().rev() {
        match s {
            Stmt::Assign(v, e) => {
                if live.contains(v) {
                    live.remove(v);
                    vars_of(e, &mut live);
                } else {
                    keep[i] = false;
                }
            }
            Stmt::Store(_, e) => vars_of(e, &mut live),
            Stmt::If {
                lhs,
                rhs,
                then,
                els,
                ..
            } => {
                dse_block(then, &live);
                dse_block(els, &live);
                let mut l = live_in(then, &live);
                l.extend(live_in(els, &live));
                vars_of(lhs, &mut l);
                vars_of(rhs, &mut l);
                live = l;
            }
            Stmt::Repeat(_, body) => {
                let head = loop_live(body, &live);
                dse_block(body, &head);
                live = head;
            }
        }
    }
    let mut it = keep.into_iter();
    ss.retain(|_| it.next().unwrap());
}

/// Removes assignments whose value is never read.
pub fn dead_store_elim(t: &mut SourceTask) {
    let mut live = HashSet::new();
    vars_of(&t.ret, &mut live);
    dse_block(&mut t.body, &live);
}

#[cfg(test)]
mod tests {
    use super::super::ir::{bin, Family};
    use super::*;

    fn task(body: Vec<Stmt>, ret: Expr) -> SourceTask {
        SourceTask {
            seed: 0,
            family: Family::Arith,
            width: Width::B32,
            memory: false,
            body,
            ret,
        }
    }

    #[test]
    fn folds_constants() {
        let t = task(vec![], Expr::MulC(b(Expr::Const(3)), 1));
        assert_eq!(optimize(&t).ret, Expr::Const(3));
    }

    #[test]
    fn strength_reduction_and_identities() {
        let a = Expr::Var(Var::A);
        let t = task(vec![], bin(BinOp::Add, Expr::MulC(b(a.clone()), 8), Expr::Const(0)));
        assert_eq!(optimize(&t).ret, Expr::Shift(ShiftOp::Shl, b(a), 3));
    }

    #[test]
    fn copies_and_dead_stores_vanish() {
        let t = task(
            vec![
                Stmt::Assign(Var::X, Expr::Var(Var::A)),
                Stmt::Assign(Var::Y, Expr::Const(7)),
            ],
            bin(BinOp::Add, Expr::Var(Var::X), Expr::Var(Var::B)),
        );
        let o = optimize(&t);
        assert!(o.body.is_empty());
        assert_eq!(o.ret, bin(BinOp::Add, Expr::Var(Var::A), Expr::Var(Var::B)));
    }

    #[test]
    fn loop_carried_values_survive() {
        let x = || Expr::Var(Var::X);
        let t = task(
            vec![
                Stmt::Assign(Var::X, Expr::Var(Var::A)),
                Stmt::Repeat(3, vec![Stmt::Assign(Var::X, bin(BinOp::Add, x(), Expr::Var(Var::B)))]),
            ],
            x(),
        );
        let o = optimize(&t);
        assert_eq!(o.body, t.body);
    }
}
