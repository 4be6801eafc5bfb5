//! Fixed production catalog and a top-down derivation driver.
//!
//! A derivation visits nonterminals at a derivation depth: children sit one
//! level below their parent, except the tail of a statement list, which stays
//! at the list's own depth. Once the depth reaches the configured maximum only
//! closing productions remain (empty list, single term, leaf term, assignment).

use serde::{Deserialize, Serialize};

use super::ast::{BinOp, CmpOp, Cond, Expr, Program, Stmt, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonTerminal {
    Prog,
    StmtList,
    Stmt,
    Expr,
    Term,
    Cond,
}

pub const NUM_NONTERMINALS: usize = 6;
pub const DEPTH_BUCKETS: usize = 4;
pub const NUM_CONTEXTS: usize = NUM_NONTERMINALS * DEPTH_BUCKETS;
pub const MAX_PRODUCTIONS: usize = 16;
/// Hard cap on productions per derivation; hitting it is an overflow.
pub const MAX_DERIVATION_STEPS: usize = 512;

impl NonTerminal {
    pub const ALL: [NonTerminal; NUM_NONTERMINALS] = [
        NonTerminal::Prog,
        NonTerminal::StmtList,
        NonTerminal::Stmt,
        NonTerminal::Expr,
        NonTerminal::Term,
        NonTerminal::Cond,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn production_count(self) -> usize {
        match self {
            NonTerminal::Prog => 1,
            NonTerminal::StmtList => 2,
            NonTerminal::Stmt => 14,
            NonTerminal::Expr => 4,
            NonTerminal::Term => 16,
            NonTerminal::Cond => 3,
        }
    }

    /// Productions still allowed at `depth` when the derivation limit is `max_depth`.
    pub fn mask(self, depth: usize, max_depth: usize) -> [bool; MAX_PRODUCTIONS] {
        let mut m = [false; MAX_PRODUCTIONS];
        let closing = depth >= max_depth;
        let n = match (self, closing) {
            (NonTerminal::StmtList, true) | (NonTerminal::Expr, true) => 1,
            (NonTerminal::Stmt, true) => 4,
            (NonTerminal::Term, true) => 15,
            _ => self.production_count(),
        };
        m[..n].fill(true);
        m
    }

    pub fn production_label(self, p: usize) -> String {
        match self {
            NonTerminal::Prog => "StmtList return Expr".into(),
            NonTerminal::StmtList => ["ε", "Stmt ; StmtList"][p].into(),
            NonTerminal::Stmt => match p {
                0..=3 => format!("v{p} = Expr"),
                4 => "if Cond { StmtList }".into(),
                5 => "if Cond { StmtList } else { StmtList }".into(),
                _ => format!("repeat {} {{ StmtList }}", p - 5),
            },
            NonTerminal::Expr => ["Term", "Term + Expr", "Term - Expr", "Term * Expr"][p].into(),
            NonTerminal::Term => match p {
                0..=9 => p.to_string(),
                10 => "x".into(),
                11..=14 => format!("v{}", p - 11),
                _ => "( Expr )".into(),
            },
            NonTerminal::Cond => ["Expr < Expr", "Expr == Expr", "Expr > Expr"][p].into(),
        }
    }
}

pub fn context_index(nt: NonTerminal, depth: usize) -> usize {
    nt.index() * DEPTH_BUCKETS + depth.min(DEPTH_BUCKETS - 1)
}

/// Base logits shaping a moderate program size under a zero adapter.
pub fn default_base_logits() -> Vec<[f64; MAX_PRODUCTIONS]> {
    let spread = |groups: &[(usize, f64)]| {
        let mut row = [0.0; MAX_PRODUCTIONS];
        let mut i = 0;
        for &(count, mass) in groups {
            for _ in 0..count {
                row[i] = (mass / count as f64).ln();
                i += 1;
            }
        }
        row
    };
    vec![
        spread(&[(1, 1.0)]),
        spread(&[(1, 0.55), (1, 0.45)]),
        spread(&[(4, 0.6), (1, 0.1), (1, 0.1), (8, 0.2)]),
        spread(&[(1, 0.6), (3, 0.4)]),
        spread(&[(10, 0.4), (1, 0.3), (4, 0.2), (1, 0.1)]),
        spread(&[(3, 1.0)]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivationOverflow;

/// Chooses a production index for `(nonterminal, depth, mask)`.
pub trait Chooser {
    fn choose(
        &mut self,
        nt: NonTerminal,
        depth: usize,
        mask: &[bool; MAX_PRODUCTIONS],
    ) -> usize;
}

impl<F> Chooser for F
where
    F: FnMut(NonTerminal, usize, &[bool; MAX_PRODUCTIONS]) -> usize,
{
    fn choose(&mut self, nt: NonTerminal, depth: usize, mask: &[bool; MAX_PRODUCTIONS]) -> usize {
        self(nt, depth, mask)
    }
}

struct Deriver<'a, C: Chooser> {
    chooser: &'a mut C,
    max_depth: usize,
    steps: usize,
}

impl<C: Chooser> Deriver<'_, C> {
    fn pick(&mut self, nt: NonTerminal, depth: usize) -> Result<usize, DerivationOverflow> {
        self.steps += 1;
        if self.steps > MAX_DERIVATION_STEPS {
            return Err(DerivationOverflow);
        }
        let mask = nt.mask(depth, self.max_depth);
        let p = self.chooser.choose(nt, depth, &mask);
        assert!(p < MAX_PRODUCTIONS && mask[p], "chooser picked a masked production");
        Ok(p)
    }

    fn program(&mut self) -> Result<Program, DerivationOverflow> {
        self.pick(NonTerminal::Prog, 0)?;
        let stmts = self.stmt_list(1)?;
        let ret = self.expr(1)?;
        Ok(Program { stmts, ret })
    }

    fn stmt_list(&mut self, depth: usize) -> Result<Vec<Stmt>, DerivationOverflow> {
        let mut out = Vec::new();
        while self.pick(NonTerminal::StmtList, depth)? == 1 {
            out.push(self.stmt(depth + 1)?);
        }
        Ok(out)
    }

    fn stmt(&mut self, depth: usize) -> Result<Stmt, DerivationOverflow> {
        let p = self.pick(NonTerminal::Stmt, depth)?;
        Ok(match p {
            0..=3 => Stmt::Assign(p as u8, self.expr(depth + 1)?),
            4 | 5 => {
                let cond = self.cond(depth + 1)?;
                let then_body = self.stmt_list(depth + 1)?;
                let else_body = if p == 5 {
                    Some(self.stmt_list(depth + 1)?)
                } else {
                    None
                };
                Stmt::If {
                    cond,
                    then_body,
                    else_body,
                }
            }
            _ => Stmt::Repeat {
                count: (p - 5) as u8,
                body: self.stmt_list(depth + 1)?,
            },
        })
    }

    fn expr(&mut self, depth: usize) -> Result<Expr, DerivationOverflow> {
        let p = self.pick(NonTerminal::Expr, depth)?;
        let t = self.term(depth + 1)?;
        let op = match p {
            0 => return Ok(Expr::Term(t)),
            1 => BinOp::Add,
            2 => BinOp::Sub,
            _ => BinOp::Mul,
        };
        Ok(Expr::Bin(t, op, Box::new(self.expr(depth + 1)?)))
    }

    fn term(&mut self, depth: usize) -> Result<Term, DerivationOverflow> {
        let p = self.pick(NonTerminal::Term, depth)?;
        Ok(match p {
            0..=9 => Term::Const(p as u8),
            10 => Term::X,
            11..=14 => Term::Var((p - 11) as u8),
            _ => Term::Paren(Box::new(self.expr(depth + 1)?)),
        })
    }

    fn cond(&mut self, depth: usize) -> Result<Cond, DerivationOverflow> {
        let p = self.pick(NonTerminal::Cond, depth)?;
        let lhs = self.expr(depth + 1)?;
        let rhs = self.expr(depth + 1)?;
        let op = [CmpOp::Lt, CmpOp::Eq, CmpOp::Gt][p];
        Ok(Cond { lhs, op, rhs })
    }
}

/// Derives a program top-down, asking `chooser` for every production.
pub fn derive<C: Chooser>(chooser: &mut C, max_depth: usize) -> Result<Program, DerivationOverflow> {
    Deriver {
        chooser,
        max_depth,
        steps: 0,
    }
    .program()
}
