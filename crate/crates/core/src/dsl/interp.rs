use serde::{Deserialize, Serialize};

use super::ast::{BinOp, CmpOp, Cond, Expr, Program, Stmt, Term};

pub const MODULUS: u32 = 64;
pub const INPUT_RANGE: u32 = 16;
pub const OP_BUDGET: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalResult {
    Value(u32),
    BudgetExceeded,
}

impl EvalResult {
    pub fn value(self) -> Option<u32> {
        match self {
            EvalResult::Value(v) => Some(v),
            EvalResult::BudgetExceeded => None,
        }
    }
}

struct OutOfBudget;

/// Every evaluated node costs one operation; each loop iteration costs one more.
struct Machine {
    x: u32,
    vars: [u32; 4],
    ops: u64,
    budget: u64,
}

impl Machine {
    fn tick(&mut self) -> Result<(), OutOfBudget> {
        self.ops += 1;
        if self.ops > self.budget {
            Err(OutOfBudget)
        } else {
            Ok(())
        }
    }

    fn term(&mut self, t: &Term) -> Result<u32, OutOfBudget> {
        self.tick()?;
        Ok(match t {
            Term::Const(c) => *c as u32,
            Term::X => self.x,
            Term::Var(v) => self.vars[*v as usize],
            Term::Paren(e) => self.expr(e)?,
        })
    }

    fn expr(&mut self, e: &Expr) -> Result<u32, OutOfBudget> {
        match e {
            Expr::Term(t) => self.term(t),
            Expr::Bin(t, op, rest) => {
                self.tick()?;
                let a = self.term(t)?;
                let b = self.expr(rest)?;
                Ok(match op {
                    BinOp::Add => (a + b) % MODULUS,
                    BinOp::Sub => (a + MODULUS - b) % MODULUS,
                    BinOp::Mul => (a * b) % MODULUS,
                })
            }
        }
    }

    fn cond(&mut self, c: &Cond) -> Result<bool, OutOfBudget> {
        self.tick()?;
        let a = self.expr(&c.lhs)?;
        let b = self.expr(&c.rhs)?;
        Ok(match c.op {
            CmpOp::Lt => a < b,
            CmpOp::Eq => a == b,
            CmpOp::Gt => a > b,
        })
    }

    fn block(&mut self, stmts: &[Stmt]) -> Result<(), OutOfBudget> {
        for s in stmts {
            self.stmt(s)?;
        }
        Ok(())
    }

    fn stmt(&mut self, s: &Stmt) -> Result<(), OutOfBudget> {
        self.tick()?;
        match s {
            Stmt::Assign(v, e) => {
                self.vars[*v as usize] = self.expr(e)?;
            }
            Stmt::If {
                cond,
                then_body,
                else_body,
            } => {
                if self.cond(cond)? {
                    self.block(then_body)?;
                } else if let Some(eb) = else_body {
                    self.block(eb)?;
                }
            }
            Stmt::Repeat { count, body } => {
                for _ in 0..*count {
                    self.tick()?;
                    self.block(body)?;
                }
            }
        }
        Ok(())
    }
}

pub fn interpret_with_budget(p: &Program, x: u32, budget: u64) -> (EvalResult, u64) {
    let mut m = Machine {
        x: x % MODULUS,
        vars: [0; 4],
        ops: 0,
        budget,
    };
    let r = m.block(&p.stmts).and_then(|_| {
        m.tick()?;
        m.expr(&p.ret)
    });
    match r {
        Ok(v) => (EvalResult::Value(v), m.ops),
        Err(OutOfBudget) => (EvalResult::BudgetExceeded, m.ops),
    }
}

pub fn interpret(p: &Program, x: u32) -> EvalResult {
    interpret_with_budget(p, x, OP_BUDGET).0
}

/// Outputs for every input `0..16`; `None` if any evaluation runs out of budget.
pub fn enumerate_io(p: &Program) -> Option<Vec<(u32, u32)>> {
    (0..INPUT_RANGE)
        .map(|x| interpret(p, x).value().map(|y| (x, y)))
        .collect()
}
