//! Exhaustive ground-truth search over compile-valid programs.
//!
//! Programs are enumerated shortest first and, within a length, in
//! lexicographic token-id order. The search runs all hidden tests in lockstep
//! and memoizes completions per `(remaining tokens, live stack window)`: with
//! `r` tokens left before `end`, only the top `r + 1` stack slots can still be
//! read, so deeper slots are dropped from the memo key.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use crate::corpus::Problem;
use crate::error::{Error, Result};
use crate::stacklang::{Program, TestCase, Token, TokenKind, T_MAX, VALUE_BOUND};

type Completions = Rc<Vec<Vec<Token>>>;

struct Search<'a> {
    tests: &'a [TestCase],
    cap: usize,
    memo: HashMap<(usize, u128), Completions>,
}

/// Stack contents of every test, slot-major: `slots[i * n + t]` is stack slot
/// `i` (0 = bottom) for test `t`.
#[derive(Clone)]
struct Lockstep {
    n: usize,
    depth: usize,
    slots: Vec<i64>,
}

impl Lockstep {
    fn top(&self, t: usize) -> i64 {
        self.slots[(self.depth - 1) * self.n + t]
    }

    fn step(&self, tok: Token, tests: &[TestCase]) -> Option<Lockstep> {
        let n = self.n;
        let mut next = self.clone();
        match tok.kind() {
            TokenKind::Digit(_) | TokenKind::VarX | TokenKind::VarY => {
                for test in tests {
                    next.slots.push(match tok.kind() {
                        TokenKind::Digit(d) => d as i64,
                        TokenKind::VarX => test.input.0,
                        _ => test.input.1,
                    });
                }
                next.depth += 1;
            }
            TokenKind::Add | TokenKind::Sub | TokenKind::Mul => {
                if self.depth < 2 {
                    return None;
                }
                let b0 = (self.depth - 1) * n;
                let a0 = (self.depth - 2) * n;
                for t in 0..n {
                    let (a, b) = (self.slots[a0 + t], self.slots[b0 + t]);
                    let v = match tok.kind() {
                        TokenKind::Add => a + b,
                        TokenKind::Sub => a - b,
                        _ => a * b,
                    };
                    if v.abs() > VALUE_BOUND {
                        return None;
                    }
                    next.slots[a0 + t] = v;
                }
                next.slots.truncate(b0);
                next.depth -= 1;
            }
            TokenKind::Dup => {
                if self.depth < 1 {
                    return None;
                }
                let top0 = (self.depth - 1) * n;
                next.slots.extend_from_slice(&self.slots[top0..top0 + n]);
                next.depth += 1;
            }
            TokenKind::Swap => {
                if self.depth < 2 {
                    return None;
                }
                let b0 = (self.depth - 1) * n;
                let a0 = (self.depth - 2) * n;
                for t in 0..n {
                    next.slots.swap(a0 + t, b0 + t);
                }
            }
            _ => return None,
        }
        Some(next)
    }

    fn key(&self, remaining: usize) -> u128 {
        let live = self.depth.min(remaining + 1);
        let window = &self.slots[(self.depth - live) * self.n..];
        let mut h1 = DefaultHasher::new();
        let mut h2 = DefaultHasher::new();
        0xa5u8.hash(&mut h2);
        (live, window).hash(&mut h1);
        (live, window).hash(&mut h2);
        ((h1.finish() as u128) << 64) | h2.finish() as u128
    }
}

impl Search<'_> {
    fn completions(&mut self, state: &Lockstep, remaining: usize) -> Completions {
        if remaining == 0 {
            let ok = state.depth >= 1
                && self
                    .tests
                    .iter()
                    .enumerate()
                    .all(|(t, test)| state.top(t) == test.expected_output);
            return Rc::new(if ok { vec![Vec::new()] } else { Vec::new() });
        }
        let key = (remaining, state.key(remaining));
        if let Some(hit) = self.memo.get(&key) {
            return Rc::clone(hit);
        }
        let mut found = Vec::new();
        'tokens: for tok in Token::actions().filter(|&t| t != Token::END) {
            let Some(next) = state.step(tok, self.tests) else {
                continue;
            };
            for tail in self.completions(&next, remaining - 1).iter() {
                let mut prog = Vec::with_capacity(remaining);
                prog.push(tok);
                prog.extend_from_slice(tail);
                found.push(prog);
                if found.len() >= self.cap {
                    break 'tokens;
                }
            }
        }
        let found = Rc::new(found);
        self.memo.insert(key, Rc::clone(&found));
        found
    }
}

/// Up to `cap` compile-valid programs of length `<= max_len` that pass every
/// hidden test, shortest first with lexicographic tie-break. Returns an empty
/// list when none exist.
pub fn enumerate_ground_truth(problem: &Problem, max_len: usize, cap: usize) -> Result<Vec<Program>> {
    if max_len > T_MAX {
        return Err(Error::config(format!("max_len {max_len} exceeds T_MAX {T_MAX}")));
    }
    if problem.hidden_tests.is_empty() {
        return Err(Error::config(format!("problem {} has no hidden tests", problem.id)));
    }
    let mut search = Search {
        tests: &problem.hidden_tests,
        cap,
        memo: HashMap::new(),
    };
    let start = Lockstep {
        n: problem.hidden_tests.len(),
        depth: 0,
        slots: Vec::new(),
    };
    let mut out = Vec::new();
    for len in 1..=max_len {
        if out.len() >= cap {
            break;
        }
        for body in search.completions(&start, len - 1).iter() {
            if out.len() >= cap {
                break;
            }
            let mut tokens = body.clone();
            tokens.push(Token::END);
            out.push(Program::new(tokens));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::expr::{BinOp, Expr};
    use crate::stacklang::{grade, OutcomeClass};

    fn problem_for(target: Expr) -> Problem {
        let inputs = [(2, 3), (-4, 7), (0, -9), (5, 5), (-1, -2), (9, 1), (-8, 4), (3, -6)];
        let hidden = inputs
            .iter()
            .map(|&(x, y)| TestCase { input: (x, y), expected_output: target.eval(x, y) })
            .collect();
        Problem {
            id: "t".into(),
            example_tests: vec![TestCase { input: (1, 1), expected_output: target.eval(1, 1) }],
            hidden_tests: hidden,
            target,
        }
    }

    /// Independent oracle: every token string of the given length, in
    /// lexicographic order, graded with the interpreter.
    fn brute_force(problem: &Problem, len: usize) -> Vec<Program> {
        let body = len - 1;
        let alphabet: Vec<Token> = Token::actions().filter(|&t| t != Token::END).collect();
        let k = alphabet.len();
        let mut out = Vec::new();
        for code in 0..k.pow(body as u32) {
            let mut digits = vec![0; body];
            let mut c = code;
            for i in (0..body).rev() {
                digits[i] = c % k;
                c /= k;
            }
            let mut tokens: Vec<Token> = digits.iter().map(|&d| alphabet[d]).collect();
            tokens.push(Token::END);
            let p = Program::new(tokens);
            if grade(&p, &problem.hidden_tests).unwrap().class == OutcomeClass::Pass {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn minimal_identity_solution() {
        let p = problem_for(Expr::X);
        let gt = enumerate_ground_truth(&p, 4, 4).unwrap();
        assert_eq!(gt[0], Program::parse("x end").unwrap());
    }

    #[test]
    fn sum_has_exactly_two_shortest_solutions() {
        let p = problem_for(Expr::bin(BinOp::Add, Expr::X, Expr::Y));
        let mut oracle = Vec::new();
        for len in 1..=4 {
            oracle = brute_force(&p, len);
            if !oracle.is_empty() {
                assert_eq!(len, 4);
                break;
            }
        }
        assert_eq!(
            oracle,
            vec![Program::parse("x y + end").unwrap(), Program::parse("y x + end").unwrap()]
        );
        let gt = enumerate_ground_truth(&p, 4, 10).unwrap();
        assert_eq!(gt, oracle);
    }

    #[test]
    fn square_uses_dup() {
        let p = problem_for(Expr::bin(BinOp::Mul, Expr::X, Expr::X));
        let gt = enumerate_ground_truth(&p, 5, 16).unwrap();
        assert!(gt.contains(&Program::parse("x dup * end").unwrap()));
    }

    #[test]
    fn matches_brute_force_up_to_five_tokens() {
        let targets = [
            Expr::bin(BinOp::Sub, Expr::Y, Expr::X),
            Expr::bin(BinOp::Mul, Expr::X, Expr::Const(3)),
            Expr::bin(BinOp::Sub, Expr::bin(BinOp::Mul, Expr::X, Expr::Y), Expr::Const(1)),
            Expr::Const(7),
        ];
        for target in targets {
            let p = problem_for(target.clone());
            let mut oracle = Vec::new();
            for len in 1..=5 {
                oracle.extend(brute_force(&p, len));
            }
            let got = enumerate_ground_truth(&p, 5, usize::MAX).unwrap();
            assert_eq!(got, oracle, "target {target}");
        }
    }

    #[test]
    fn cap_and_bounds() {
        let p = problem_for(Expr::bin(BinOp::Add, Expr::X, Expr::Y));
        assert_eq!(enumerate_ground_truth(&p, 6, 1).unwrap().len(), 1);
        assert!(enumerate_ground_truth(&p, 3, 4).unwrap().is_empty());
        assert!(enumerate_ground_truth(&p, T_MAX + 1, 4).is_err());
    }
}
