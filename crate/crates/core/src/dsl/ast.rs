use serde::{Deserialize, Serialize};

use super::token::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Eq,
    Gt,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Const(u8),
    X,
    Var(u8),
    Paren(Box<Expr>),
}

/// Right-associative chain: `t op (rest)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expr {
    Term(Term),
    Bin(Term, BinOp, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cond {
    pub lhs: Expr,
    pub op: CmpOp,
    pub rhs: Expr,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stmt {
    Assign(u8, Expr),
    If {
        cond: Cond,
        then_body: Vec<Stmt>,
        else_body: Option<Vec<Stmt>>,
    },
    Repeat {
        count: u8,
        body: Vec<Stmt>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    pub stmts: Vec<Stmt>,
    pub ret: Expr,
}

pub const MAX_REPEAT: u8 = 8;

impl BinOp {
    pub fn token(self) -> Token {
        match self {
            BinOp::Add => Token::Plus,
            BinOp::Sub => Token::Minus,
            BinOp::Mul => Token::Star,
        }
    }
}

impl CmpOp {
    pub fn token(self) -> Token {
        match self {
            CmpOp::Lt => Token::Lt,
            CmpOp::Eq => Token::EqEq,
            CmpOp::Gt => Token::Gt,
        }
    }
}

fn term_tokens(t: &Term, out: &mut Vec<Token>) {
    match t {
        Term::Const(c) => out.push(Token::Digit(*c)),
        Term::X => out.push(Token::X),
        Term::Var(v) => out.push(Token::Var(*v)),
        Term::Paren(e) => {
            out.push(Token::LParen);
            expr_tokens(e, out);
            out.push(Token::RParen);
        }
    }
}

fn expr_tokens(e: &Expr, out: &mut Vec<Token>) {
    match e {
        Expr::Term(t) => term_tokens(t, out),
        Expr::Bin(t, op, rest) => {
            term_tokens(t, out);
            out.push(op.token());
            expr_tokens(rest, out);
        }
    }
}

fn block_tokens(stmts: &[Stmt], out: &mut Vec<Token>) {
    for s in stmts {
        stmt_tokens(s, out);
        out.push(Token::Semi);
    }
}

fn stmt_tokens(s: &Stmt, out: &mut Vec<Token>) {
    match s {
        Stmt::Assign(v, e) => {
            out.push(Token::Var(*v));
            out.push(Token::Assign);
            expr_tokens(e, out);
        }
        Stmt::If {
            cond,
            then_body,
            else_body,
        } => {
            out.push(Token::If);
            expr_tokens(&cond.lhs, out);
            out.push(cond.op.token());
            expr_tokens(&cond.rhs, out);
            out.push(Token::LBrace);
            block_tokens(then_body, out);
            out.push(Token::RBrace);
            if let Some(eb) = else_body {
                out.push(Token::Else);
                out.push(Token::LBrace);
                block_tokens(eb, out);
                out.push(Token::RBrace);
            }
        }
        Stmt::Repeat { count, body } => {
            out.push(Token::Repeat);
            out.push(Token::Digit(*count));
            out.push(Token::LBrace);
            block_tokens(body, out);
            out.push(Token::RBrace);
        }
    }
}

impl Expr {
    pub fn text(&self) -> String {
        let mut t = Vec::new();
        expr_tokens(self, &mut t);
        super::token::join_tokens(&t)
    }
}

impl Program {
    /// Canonical token stream with explicit `;` terminators.
    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::new();
        block_tokens(&self.stmts, &mut out);
        out.push(Token::Return);
        expr_tokens(&self.ret, &mut out);
        out
    }

    /// Single-line form, e.g. `v0 = 3 ; return v0 + x`.
    pub fn compact(&self) -> String {
        super::token::join_tokens(&self.tokens())
    }

    /// File form: one statement per line, two-space indent, no terminators.
    pub fn pretty(&self) -> String {
        let mut lines = Vec::new();
        pretty_block(&self.stmts, 0, &mut lines);
        lines.push(format!("return {}", self.ret.text()));
        lines.join("\n")
    }
}

fn cond_text(c: &Cond) -> String {
    format!("{} {} {}", c.lhs.text(), c.op.token(), c.rhs.text())
}

fn pretty_block(stmts: &[Stmt], indent: usize, lines: &mut Vec<String>) {
    let pad = "  ".repeat(indent);
    for s in stmts {
        match s {
            Stmt::Assign(v, e) => lines.push(format!("{pad}v{v} = {}", e.text())),
            Stmt::If {
                cond,
                then_body,
                else_body,
            } => {
                lines.push(format!("{pad}if {} {{", cond_text(cond)));
                pretty_block(then_body, indent + 1, lines);
                match else_body {
                    Some(eb) => {
                        lines.push(format!("{pad}}} else {{"));
                        pretty_block(eb, indent + 1, lines);
                        lines.push(format!("{pad}}}"));
                    }
                    None => lines.push(format!("{pad}}}")),
                }
            }
            Stmt::Repeat { count, body } => {
                lines.push(format!("{pad}repeat {count} {{"));
                pretty_block(body, indent + 1, lines);
                lines.push(format!("{pad}}}"));
            }
        }
    }
}
