use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stacklang::{Token, INPUT_BOUND};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
        }
    }

    fn token(self) -> Token {
        match self {
            BinOp::Add => Token::ADD,
            BinOp::Sub => Token::SUB,
            BinOp::Mul => Token::MUL,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
        }
    }
}

/// Target function of a problem: an expression tree over `x`, `y`, the
/// constants 0-9 and `+ - *`. A single leaf has depth 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Expr {
    X,
    Y,
    Const(u8),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

pub const MAX_DEPTH: usize = 3;

impl Expr {
    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn eval(&self, x: i64, y: i64) -> i64 {
        match self {
            Expr::X => x,
            Expr::Y => y,
            Expr::Const(c) => *c as i64,
            Expr::Bin(op, a, b) => op.apply(a.eval(x, y), b.eval(x, y)),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Bin(_, a, b) => 1 + a.depth().max(b.depth()),
            _ => 1,
        }
    }

    /// Postfix token sequence without the trailing `end`.
    pub fn postfix(&self) -> Vec<Token> {
        let mut out = Vec::new();
        self.write_postfix(&mut out);
        out
    }

    fn write_postfix(&self, out: &mut Vec<Token>) {
        match self {
            Expr::X => out.push(Token::X),
            Expr::Y => out.push(Token::Y),
            Expr::Const(c) => out.push(Token::digit(*c)),
            Expr::Bin(op, a, b) => {
                a.write_postfix(out);
                b.write_postfix(out);
                out.push(op.token());
            }
        }
    }

    /// Samples by choosing uniformly among the productions allowed at each
    /// node: `x`, `y`, a constant (digit uniform), or one of the three
    /// operators while depth remains.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, max_depth: usize) -> Expr {
        let productions = if max_depth > 1 { 6 } else { 3 };
        match rng.gen_range(0..productions) {
            0 => Expr::X,
            1 => Expr::Y,
            2 => Expr::Const(rng.gen_range(0..10)),
            k => {
                let op = [BinOp::Add, BinOp::Sub, BinOp::Mul][k - 3];
                let a = Expr::sample(rng, max_depth - 1);
                let b = Expr::sample(rng, max_depth - 1);
                Expr::bin(op, a, b)
            }
        }
    }

    /// Values on the full input grid, used to deduplicate by semantics.
    pub fn signature(&self) -> Vec<i64> {
        let mut sig = Vec::with_capacity(((2 * INPUT_BOUND + 1) * (2 * INPUT_BOUND + 1)) as usize);
        for x in -INPUT_BOUND..=INPUT_BOUND {
            for y in -INPUT_BOUND..=INPUT_BOUND {
                sig.push(self.eval(x, y));
            }
        }
        sig
    }

    pub fn parse_postfix(src: &str) -> Result<Expr> {
        let mut stack: Vec<Expr> = Vec::new();
        for word in src.split_whitespace() {
            let node = match word {
                "x" => Expr::X,
                "y" => Expr::Y,
                "+" | "-" | "*" => {
                    let op = match word {
                        "+" => BinOp::Add,
                        "-" => BinOp::Sub,
                        _ => BinOp::Mul,
                    };
                    let b = stack.pop();
                    let a = stack.pop();
                    match (a, b) {
                        (Some(a), Some(b)) => Expr::bin(op, a, b),
                        _ => return Err(Error::validation(format!("malformed target `{src}`"))),
                    }
                }
                d if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() => {
                    Expr::Const(d.as_bytes()[0] - b'0')
                }
                other => return Err(Error::validation(format!("bad target symbol `{other}`"))),
            };
            stack.push(node);
        }
        if stack.len() != 1 {
            return Err(Error::validation(format!("malformed target `{src}`")));
        }
        Ok(stack.pop().unwrap())
    }

    pub fn to_postfix_string(&self) -> String {
        let words: Vec<String> = self.postfix().iter().map(|t| t.surface()).collect();
        words.join(" ")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::X => f.write_str("x"),
            Expr::Y => f.write_str("y"),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

impl From<Expr> for String {
    fn from(e: Expr) -> String {
        e.to_postfix_string()
    }
}

impl TryFrom<String> for Expr {
    type Error = Error;

    fn try_from(s: String) -> Result<Expr> {
        Expr::parse_postfix(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn postfix_round_trip() {
        let e = Expr::bin(
            BinOp::Mul,
            Expr::bin(BinOp::Add, Expr::X, Expr::Const(3)),
            Expr::bin(BinOp::Sub, Expr::Y, Expr::Const(7)),
        );
        assert_eq!(e.to_postfix_string(), "x 3 + y 7 - *");
        assert_eq!(Expr::parse_postfix("x 3 + y 7 - *").unwrap(), e);
        assert_eq!(e.eval(2, 3), 5 * -4);
        assert_eq!(e.depth(), 3);
        assert!(Expr::parse_postfix("x +").is_err());
        assert!(Expr::parse_postfix("x y").is_err());
    }

    #[test]
    fn samples_respect_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let e = Expr::sample(&mut rng, MAX_DEPTH);
            assert!(e.depth() <= MAX_DEPTH);
            assert!(e.postfix().len() <= 7);
        }
    }
}
