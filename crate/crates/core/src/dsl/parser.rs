//! LL(1) recursive-descent parser.
//!
//! ```text
//! Prog     := StmtList "return" Expr
//! StmtList := ε | Stmt ";" StmtList
//! Stmt     := Var "=" Expr
//!           | "if" Cond "{" StmtList "}" [ "else" "{" StmtList "}" ]
//!           | "repeat" Digit "{" StmtList "}"
//! Expr     := Term [ ("+" | "-" | "*") Expr ]
//! Term     := Digit | "x" | Var | "(" Expr ")"
//! Cond     := Expr ("<" | "==" | ">") Expr
//! ```
//!
//! The token limit bounds recursion; the depth limit is checked on the
//! finished tree with the same measure as [`super::metrics::complexity`].

use thiserror::Error;

use super::ast::{BinOp, CmpOp, Cond, Expr, Program, Stmt, Term, MAX_REPEAT};
use super::metrics::ast_depth;
use super::token::{tokenize, Token};

pub const MAX_DEPTH: usize = 8;
pub const MAX_TOKENS: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty token stream")]
    Empty,
    #[error("{len} tokens exceeds the limit of {MAX_TOKENS}")]
    TooLong { len: usize },
    #[error("ast depth {depth} exceeds the limit of {MAX_DEPTH}")]
    TooDeep { depth: usize },
    #[error("unexpected {found} at token {position}, expected {expected}")]
    Unexpected {
        position: usize,
        found: Token,
        expected: &'static str,
    },
    #[error("unexpected end of input, expected {expected}")]
    UnexpectedEnd { expected: &'static str },
    #[error("repeat count {count} at token {position} outside 0..={MAX_REPEAT}")]
    RepeatCount { position: usize, count: u8 },
    #[error("trailing tokens from position {position}")]
    Trailing { position: usize },
    #[error("lexical error: {0}")]
    Lex(String),
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.pos).copied()
    }

    fn bump(&mut self, expected: &'static str) -> Result<Token, ParseError> {
        let t = self
            .peek()
            .ok_or(ParseError::UnexpectedEnd { expected })?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: Token, expected: &'static str) -> Result<(), ParseError> {
        let position = self.pos;
        let t = self.bump(expected)?;
        if t != want {
            return Err(ParseError::Unexpected {
                position,
                found: t,
                expected,
            });
        }
        Ok(())
    }

    fn program(&mut self) -> Result<Program, ParseError> {
        let stmts = self.stmt_list()?;
        self.expect(Token::Return, "statement or 'return'")?;
        let ret = self.expr()?;
        if self.pos != self.tokens.len() {
            return Err(ParseError::Trailing { position: self.pos });
        }
        Ok(Program { stmts, ret })
    }

    fn stmt_list(&mut self) -> Result<Vec<Stmt>, ParseError> {
        let mut out = Vec::new();
        while matches!(
            self.peek(),
            Some(Token::Var(_) | Token::If | Token::Repeat)
        ) {
            out.push(self.stmt()?);
            self.expect(Token::Semi, "';'")?;
        }
        Ok(out)
    }

    fn block(&mut self) -> Result<Vec<Stmt>, ParseError> {
        self.expect(Token::LBrace, "'{'")?;
        let body = self.stmt_list()?;
        self.expect(Token::RBrace, "statement or '}'")?;
        Ok(body)
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        let position = self.pos;
        match self.bump("statement")? {
            Token::Var(v) => {
                self.expect(Token::Assign, "'='")?;
                Ok(Stmt::Assign(v, self.expr()?))
            }
            Token::If => {
                let cond = self.cond()?;
                let then_body = self.block()?;
                let else_body = if self.peek() == Some(Token::Else) {
                    self.pos += 1;
                    Some(self.block()?)
                } else {
                    None
                };
                Ok(Stmt::If {
                    cond,
                    then_body,
                    else_body,
                })
            }
            Token::Repeat => {
                let cpos = self.pos;
                let count = match self.bump("repeat count")? {
                    Token::Digit(d) if d <= MAX_REPEAT => d,
                    Token::Digit(d) => {
                        return Err(ParseError::RepeatCount {
                            position: cpos,
                            count: d,
                        })
                    }
                    found => {
                        return Err(ParseError::Unexpected {
                            position: cpos,
                            found,
                            expected: "repeat count",
                        })
                    }
                };
                let body = self.block()?;
                Ok(Stmt::Repeat { count, body })
            }
            found => Err(ParseError::Unexpected {
                position,
                found,
                expected: "statement",
            }),
        }
    }

    fn cond(&mut self) -> Result<Cond, ParseError> {
        let lhs = self.expr()?;
        let position = self.pos;
        let op = match self.bump("comparison")? {
            Token::Lt => CmpOp::Lt,
            Token::EqEq => CmpOp::Eq,
            Token::Gt => CmpOp::Gt,
            found => {
                return Err(ParseError::Unexpected {
                    position,
                    found,
                    expected: "comparison",
                })
            }
        };
        let rhs = self.expr()?;
        Ok(Cond { lhs, op, rhs })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let t = self.term()?;
        let op = match self.peek() {
            Some(Token::Plus) => BinOp::Add,
            Some(Token::Minus) => BinOp::Sub,
            Some(Token::Star) => BinOp::Mul,
            _ => return Ok(Expr::Term(t)),
        };
        self.pos += 1;
        Ok(Expr::Bin(t, op, Box::new(self.expr()?)))
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        let position = self.pos;
        match self.bump("term")? {
            Token::Digit(d) => Ok(Term::Const(d)),
            Token::X => Ok(Term::X),
            Token::Var(v) => Ok(Term::Var(v)),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect(Token::RParen, "')'")?;
                Ok(Term::Paren(Box::new(inner)))
            }
            found => Err(ParseError::Unexpected {
                position,
                found,
                expected: "term",
            }),
        }
    }
}

pub fn parse(tokens: &[Token]) -> Result<Program, ParseError> {
    if tokens.is_empty() {
        return Err(ParseError::Empty);
    }
    if tokens.len() > MAX_TOKENS {
        return Err(ParseError::TooLong { len: tokens.len() });
    }
    let program = Parser { tokens, pos: 0 }.program()?;
    let depth = ast_depth(&program);
    if depth > MAX_DEPTH {
        return Err(ParseError::TooDeep { depth });
    }
    Ok(program)
}

pub fn parse_text(text: &str) -> Result<Program, ParseError> {
    let tokens = tokenize(text).map_err(|e| ParseError::Lex(e.to_string()))?;
    parse(&tokens)
}
