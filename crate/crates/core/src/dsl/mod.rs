//! A small total language over integers mod 64: assignments to four
//! variables, `if`/`else`, constant-count `repeat`, and a final `return`.

pub mod ast;
pub mod grammar;
pub mod interp;
pub mod metrics;
pub mod parser;
pub mod token;

pub use ast::{BinOp, CmpOp, Cond, Expr, Program, Stmt, Term};
pub use interp::{enumerate_io, interpret, EvalResult, INPUT_RANGE, MODULUS, OP_BUDGET};
pub use metrics::{complexity, ComplexityDescriptor};
pub use parser::{parse, parse_text, ParseError, MAX_DEPTH, MAX_TOKENS};
pub use token::{tokenize, Token};
