use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ast::{Cond, Expr, Program, Stmt, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComplexityDescriptor {
    pub ast_depth: u32,
    pub cyclomatic: u32,
    pub loc: u32,
    pub var_count: u32,
}

impl ComplexityDescriptor {
    /// Normalised to `[0, 1]⁴` by fixed bounds (depth/8, cc/8, loc/16, vars/4).
    pub fn normalized(&self) -> [f64; 4] {
        [
            (self.ast_depth as f64 / 8.0).clamp(0.0, 1.0),
            (self.cyclomatic as f64 / 8.0).clamp(0.0, 1.0),
            (self.loc as f64 / 16.0).clamp(0.0, 1.0),
            (self.var_count as f64 / 4.0).clamp(0.0, 1.0),
        ]
    }
}

fn term_depth(t: &Term, d: usize) -> usize {
    match t {
        Term::Paren(e) => expr_depth(e, d + 1),
        _ => d,
    }
}

/// Depth of the deepest node when the expression's root sits at `d`.
fn expr_depth(e: &Expr, d: usize) -> usize {
    match e {
        Expr::Term(t) => term_depth(t, d),
        Expr::Bin(t, _, rest) => term_depth(t, d + 1).max(expr_depth(rest, d + 1)),
    }
}

fn cond_depth(c: &Cond, d: usize) -> usize {
    expr_depth(&c.lhs, d + 1).max(expr_depth(&c.rhs, d + 1))
}

fn block_depth(stmts: &[Stmt], d: usize) -> usize {
    stmts.iter().map(|s| stmt_depth(s, d)).max().unwrap_or(0)
}

fn stmt_depth(s: &Stmt, d: usize) -> usize {
    match s {
        Stmt::Assign(_, e) => expr_depth(e, d + 1),
        Stmt::If {
            cond,
            then_body,
            else_body,
        } => {
            let mut m = cond_depth(cond, d + 1).max(block_depth(then_body, d + 1));
            if let Some(eb) = else_body {
                m = m.max(block_depth(eb, d + 1));
            }
            m.max(d)
        }
        Stmt::Repeat { body, .. } => block_depth(body, d + 1).max(d),
    }
}

/// Maximum node depth with the program root at depth 1; `return x` is 3.
pub fn ast_depth(p: &Program) -> usize {
    let ret = expr_depth(&p.ret, 3);
    ret.max(block_depth(&p.stmts, 2))
}

fn walk(stmts: &[Stmt], branches: &mut u32, count: &mut u32, vars: &mut BTreeSet<u8>) {
    for s in stmts {
        *count += 1;
        match s {
            Stmt::Assign(v, _) => {
                vars.insert(*v);
            }
            Stmt::If {
                then_body,
                else_body,
                ..
            } => {
                *branches += 1;
                walk(then_body, branches, count, vars);
                if let Some(eb) = else_body {
                    walk(eb, branches, count, vars);
                }
            }
            Stmt::Repeat { body, .. } => {
                *branches += 1;
                walk(body, branches, count, vars);
            }
        }
    }
}

pub fn complexity(p: &Program) -> ComplexityDescriptor {
    let (mut branches, mut count) = (0, 0);
    let mut vars = BTreeSet::new();
    walk(&p.stmts, &mut branches, &mut count, &mut vars);
    ComplexityDescriptor {
        ast_depth: ast_depth(p) as u32,
        cyclomatic: 1 + branches,
        loc: count + 1,
        var_count: vars.len() as u32,
    }
}

/// Moves the whole program, return value included, inside `repeat count { .. }`:
/// the result is stored in `target` and returned after the loop.
pub fn wrap_in_repeat(p: &Program, count: u8, target: u8) -> Program {
    let mut body = p.stmts.clone();
    body.push(Stmt::Assign(target, p.ret.clone()));
    Program {
        stmts: vec![Stmt::Repeat { count, body }],
        ret: Expr::Term(Term::Var(target)),
    }
}
