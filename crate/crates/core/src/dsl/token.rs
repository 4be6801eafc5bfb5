use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Return,
    Assign,
    Semi,
    If,
    Else,
    Repeat,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Plus,
    Minus,
    Star,
    Lt,
    EqEq,
    Gt,
    Digit(u8),
    X,
    Var(u8),
}

pub const VOCAB_SIZE: usize = 31;
pub const NUM_VARS: u8 = 4;

impl Token {
    /// Dense index in `0..VOCAB_SIZE`.
    pub fn index(self) -> usize {
        match self {
            Token::Return => 0,
            Token::Assign => 1,
            Token::Semi => 2,
            Token::If => 3,
            Token::Else => 4,
            Token::Repeat => 5,
            Token::LBrace => 6,
            Token::RBrace => 7,
            Token::LParen => 8,
            Token::RParen => 9,
            Token::Plus => 10,
            Token::Minus => 11,
            Token::Star => 12,
            Token::Lt => 13,
            Token::EqEq => 14,
            Token::Gt => 15,
            Token::Digit(d) => 16 + d as usize,
            Token::X => 26,
            Token::Var(v) => 27 + v as usize,
        }
    }

    pub fn from_index(i: usize) -> Option<Token> {
        Some(match i {
            0 => Token::Return,
            1 => Token::Assign,
            2 => Token::Semi,
            3 => Token::If,
            4 => Token::Else,
            5 => Token::Repeat,
            6 => Token::LBrace,
            7 => Token::RBrace,
            8 => Token::LParen,
            9 => Token::RParen,
            10 => Token::Plus,
            11 => Token::Minus,
            12 => Token::Star,
            13 => Token::Lt,
            14 => Token::EqEq,
            15 => Token::Gt,
            16..=25 => Token::Digit((i - 16) as u8),
            26 => Token::X,
            27..=30 => Token::Var((i - 27) as u8),
            _ => return None,
        })
    }

    pub fn from_word(w: &str) -> Option<Token> {
        Some(match w {
            "return" => Token::Return,
            "=" => Token::Assign,
            ";" => Token::Semi,
            "if" => Token::If,
            "else" => Token::Else,
            "repeat" => Token::Repeat,
            "{" => Token::LBrace,
            "}" => Token::RBrace,
            "(" => Token::LParen,
            ")" => Token::RParen,
            "+" => Token::Plus,
            "-" => Token::Minus,
            "*" => Token::Star,
            "<" => Token::Lt,
            "==" => Token::EqEq,
            ">" => Token::Gt,
            "x" => Token::X,
            "v0" => Token::Var(0),
            "v1" => Token::Var(1),
            "v2" => Token::Var(2),
            "v3" => Token::Var(3),
            _ => {
                let mut chars = w.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_digit() => Token::Digit(c as u8 - b'0'),
                    _ => return None,
                }
            }
        })
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Token::Return => "return",
            Token::Assign => "=",
            Token::Semi => ";",
            Token::If => "if",
            Token::Else => "else",
            Token::Repeat => "repeat",
            Token::LBrace => "{",
            Token::RBrace => "}",
            Token::LParen => "(",
            Token::RParen => ")",
            Token::Plus => "+",
            Token::Minus => "-",
            Token::Star => "*",
            Token::Lt => "<",
            Token::EqEq => "==",
            Token::Gt => ">",
            Token::Digit(d) => return write!(f, "{d}"),
            Token::X => "x",
            Token::Var(v) => return write!(f, "v{v}"),
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexError {
    pub position: usize,
    pub word: String,
}

impl fmt::Display for LexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown word {:?} at token {}", self.word, self.position)
    }
}

fn split_words(line: &str) -> Vec<&str> {
    let bytes = line.as_bytes();
    let mut words = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        } else if c.is_ascii_alphanumeric() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
        } else if c == b'=' && bytes.get(i + 1) == Some(&b'=') {
            i += 2;
        } else {
            i += line[i..].chars().next().map_or(1, char::len_utf8);
        }
        words.push(&line[start..i]);
    }
    words
}

/// A line break ends a statement unless the line already ended in `{` or
/// `;`, so the one-statement-per-line file form and the single-line `;` form
/// read the same.
pub fn tokenize(text: &str) -> Result<Vec<Token>, LexError> {
    let mut out = Vec::new();
    let mut pending_break = false;
    for line in text.lines() {
        let words = split_words(line);
        if words.is_empty() {
            continue;
        }
        let first = Token::from_word(words[0]);
        if pending_break
            && !matches!(out.last(), Some(Token::LBrace | Token::Semi) | None)
            && first != Some(Token::Else)
        {
            out.push(Token::Semi);
        }
        for w in words {
            let t = Token::from_word(w).ok_or_else(|| LexError {
                position: out.len(),
                word: w.to_string(),
            })?;
            out.push(t);
        }
        pending_break = true;
    }
    Ok(out)
}

pub fn join_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
