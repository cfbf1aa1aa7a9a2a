//! The toy stack-machine language: vocabulary, static checks, execution and
//! unit-test grading.
//!
//! Programs are straight-line token sequences. Digits and variables push a
//! value, binary operators pop `b` then `a` and push `a ∘ b`, `dup` and `swap`
//! shuffle the top of the stack, and `end` halts and returns the stack top.
//!
//! The token id space is split in two regions. Ids `0..NUM_ACTIONS` are the
//! program tokens (the action space of the decoder). The remaining ids only
//! ever appear in prompts, which serialize a problem's example tests.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Problem;
use crate::error::{Error, Result};

/// Total vocabulary size (program region plus prompt region).
pub const VOCAB_SIZE: usize = 32;
/// Number of program-region tokens; these are the decoder's actions.
pub const NUM_ACTIONS: usize = 18;
/// Maximum program length in tokens, `end` included.
pub const T_MAX: usize = 12;
/// Maximum prompt length in tokens.
pub const P_MAX: usize = 48;
/// Any stack value with a larger magnitude is an overflow fault.
pub const VALUE_BOUND: i64 = 1_000_000_000;
/// Inclusive bound on test inputs.
pub const INPUT_BOUND: i64 = 9;

/// Reward per outcome class.
pub const REWARD_PASS: f64 = 1.0;
pub const REWARD_FAIL_TEST: f64 = -0.3;
pub const REWARD_RUNTIME_ERROR: f64 = -0.6;
pub const REWARD_COMPILE_ERROR: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Digit(u8),
    VarX,
    VarY,
    Add,
    Sub,
    Mul,
    Dup,
    Swap,
    End,
    PromptDigit(u8),
    Separator,
    NegMarker,
    IoMarker,
    Pad,
}

/// Index into the fixed vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(u8);

impl Token {
    pub const X: Token = Token(10);
    pub const Y: Token = Token(11);
    pub const ADD: Token = Token(12);
    pub const SUB: Token = Token(13);
    pub const MUL: Token = Token(14);
    pub const DUP: Token = Token(15);
    pub const SWAP: Token = Token(16);
    pub const END: Token = Token(17);
    pub const SEP: Token = Token(28);
    pub const NEG: Token = Token(29);
    pub const IO: Token = Token(30);
    pub const PAD: Token = Token(31);

    pub fn new(id: usize) -> Result<Token> {
        if id < VOCAB_SIZE {
            Ok(Token(id as u8))
        } else {
            Err(Error::validation(format!("token id {id} outside vocabulary")))
        }
    }

    pub fn digit(d: u8) -> Token {
        assert!(d < 10, "digit out of range");
        Token(d)
    }

    pub fn prompt_digit(d: u8) -> Token {
        assert!(d < 10, "digit out of range");
        Token(18 + d)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn kind(self) -> TokenKind {
        match self.0 {
            d @ 0..=9 => TokenKind::Digit(d),
            10 => TokenKind::VarX,
            11 => TokenKind::VarY,
            12 => TokenKind::Add,
            13 => TokenKind::Sub,
            14 => TokenKind::Mul,
            15 => TokenKind::Dup,
            16 => TokenKind::Swap,
            17 => TokenKind::End,
            d @ 18..=27 => TokenKind::PromptDigit(d - 18),
            28 => TokenKind::Separator,
            29 => TokenKind::NegMarker,
            30 => TokenKind::IoMarker,
            _ => TokenKind::Pad,
        }
    }

    pub fn is_program(self) -> bool {
        self.id() < NUM_ACTIONS
    }

    pub fn surface(self) -> String {
        match self.kind() {
            TokenKind::Digit(d) => d.to_string(),
            TokenKind::VarX => "x".into(),
            TokenKind::VarY => "y".into(),
            TokenKind::Add => "+".into(),
            TokenKind::Sub => "-".into(),
            TokenKind::Mul => "*".into(),
            TokenKind::Dup => "dup".into(),
            TokenKind::Swap => "swap".into(),
            TokenKind::End => "end".into(),
            TokenKind::PromptDigit(d) => format!("#{d}"),
            TokenKind::Separator => "|".into(),
            TokenKind::NegMarker => "~".into(),
            TokenKind::IoMarker => ">".into(),
            TokenKind::Pad => "<pad>".into(),
        }
    }

    pub fn from_surface(s: &str) -> Option<Token> {
        (0..VOCAB_SIZE).map(|i| Token(i as u8)).find(|t| t.surface() == s)
    }

    /// All program-region tokens in id order.
    pub fn actions() -> impl Iterator<Item = Token> {
        (0..NUM_ACTIONS).map(|i| Token(i as u8))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: usize,
    pub kind: TokenKind,
    pub surface: String,
}

pub fn vocabulary_table() -> Vec<VocabEntry> {
    (0..VOCAB_SIZE)
        .map(|id| {
            let t = Token(id as u8);
            VocabEntry {
                id,
                kind: t.kind(),
                surface: t.surface(),
            }
        })
        .collect()
}

/// SHA-256 of the canonical vocabulary JSON; every artifact records it.
pub fn vocab_hash() -> String {
    let json = serde_json::to_vec(&vocabulary_table()).expect("vocabulary serializes");
    hex::encode(Sha256::digest(&json))
}

/// A program-region token sequence (not necessarily compile-valid).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Program {
    pub tokens: Vec<Token>,
}

impl Program {
    pub fn new(tokens: Vec<Token>) -> Self {
        Program { tokens }
    }

    /// Parses whitespace-separated surface strings, e.g. `"x y + end"`.
    pub fn parse(src: &str) -> Result<Program> {
        src.split_whitespace()
            .map(|s| {
                Token::from_surface(s)
                    .ok_or_else(|| Error::validation(format!("unknown token `{s}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Program::new)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.tokens.iter().map(|t| t.surface()).collect();
        f.write_str(&parts.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub input: (i64, i64),
    pub expected_output: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum CompileError {
    #[error("missing-end")]
    MissingEnd,
    #[error("end-not-unique-terminal")]
    EndNotUniqueTerminal,
    #[error("prompt-token")]
    PromptToken,
    #[error("too-long")]
    TooLong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum RuntimeError {
    #[error("underflow")]
    Underflow,
    #[error("empty-at-end")]
    EmptyAtEnd,
    #[error("overflow")]
    Overflow,
}

/// Static checks: last token is `end`, `end` occurs once, only program
/// tokens, length within `T_MAX`.
pub fn compile_check(program: &Program) -> std::result::Result<(), CompileError> {
    let toks = &program.tokens;
    if toks.len() > T_MAX {
        return Err(CompileError::TooLong);
    }
    if toks.iter().any(|t| !t.is_program()) {
        return Err(CompileError::PromptToken);
    }
    if toks.last() != Some(&Token::END) {
        return Err(CompileError::MissingEnd);
    }
    if toks.iter().filter(|&&t| t == Token::END).count() != 1 {
        return Err(CompileError::EndNotUniqueTerminal);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub stack: Vec<i64>,
    pub step_budget: usize,
}

impl MachineState {
    pub fn new(step_budget: usize) -> Self {
        MachineState {
            stack: Vec::with_capacity(T_MAX),
            step_budget,
        }
    }

    /// Applies one non-`end` token.
    pub fn apply(&mut self, token: Token, input: (i64, i64)) -> std::result::Result<(), RuntimeError> {
        // Straight-line programs: the budget equals the program length, so it
        // cannot run out before the tokens do.
        self.step_budget = self.step_budget.saturating_sub(1);
        let push = |stack: &mut Vec<i64>, v: i64| {
            if v.abs() > VALUE_BOUND {
                Err(RuntimeError::Overflow)
            } else {
                stack.push(v);
                Ok(())
            }
        };
        match token.kind() {
            TokenKind::Digit(d) => push(&mut self.stack, d as i64),
            TokenKind::VarX => push(&mut self.stack, input.0),
            TokenKind::VarY => push(&mut self.stack, input.1),
            TokenKind::Add | TokenKind::Sub | TokenKind::Mul => {
                let b = self.stack.pop().ok_or(RuntimeError::Underflow)?;
                let a = self.stack.pop().ok_or(RuntimeError::Underflow)?;
                let v = match token.kind() {
                    TokenKind::Add => a + b,
                    TokenKind::Sub => a - b,
                    _ => a * b,
                };
                push(&mut self.stack, v)
            }
            TokenKind::Dup => {
                let top = *self.stack.last().ok_or(RuntimeError::Underflow)?;
                self.stack.push(top);
                Ok(())
            }
            TokenKind::Swap => {
                let n = self.stack.len();
                if n < 2 {
                    return Err(RuntimeError::Underflow);
                }
                self.stack.swap(n - 1, n - 2);
                Ok(())
            }
            // `end` is handled by the caller; prompt tokens never pass
            // compile_check.
            _ => Ok(()),
        }
    }
}

/// Runs a compile-valid program on one input.
pub fn execute(program: &Program, input: (i64, i64)) -> std::result::Result<i64, RuntimeError> {
    let mut state = MachineState::new(program.len());
    for &tok in &program.tokens {
        if tok == Token::END {
            return state.stack.last().copied().ok_or(RuntimeError::EmptyAtEnd);
        }
        state.apply(tok, input)?;
    }
    state.stack.last().copied().ok_or(RuntimeError::EmptyAtEnd)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OutcomeClass {
    Pass,
    FailTest,
    RuntimeError,
    CompileError,
}

impl OutcomeClass {
    pub const ALL: [OutcomeClass; 4] = [
        OutcomeClass::Pass,
        OutcomeClass::FailTest,
        OutcomeClass::RuntimeError,
        OutcomeClass::CompileError,
    ];

    pub fn reward(self) -> f64 {
        match self {
            OutcomeClass::Pass => REWARD_PASS,
            OutcomeClass::FailTest => REWARD_FAIL_TEST,
            OutcomeClass::RuntimeError => REWARD_RUNTIME_ERROR,
            OutcomeClass::CompileError => REWARD_COMPILE_ERROR,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub class: OutcomeClass,
    pub reward: f64,
}

impl Outcome {
    pub fn of(class: OutcomeClass) -> Self {
        Outcome {
            class,
            reward: class.reward(),
        }
    }

    pub fn passed(&self) -> bool {
        self.class == OutcomeClass::Pass
    }
}

/// Grades a program against unit tests.
///
/// A runtime fault on any test dominates a wrong answer on another, so the
/// result does not depend on test order.
pub fn grade(program: &Program, tests: &[TestCase]) -> Result<Outcome> {
    if tests.is_empty() {
        return Err(Error::config("grade called with an empty test list"));
    }
    if compile_check(program).is_err() {
        return Ok(Outcome::of(OutcomeClass::CompileError));
    }
    let mut failed = false;
    for test in tests {
        match execute(program, test.input) {
            Err(_) => return Ok(Outcome::of(OutcomeClass::RuntimeError)),
            Ok(v) if v != test.expected_output => failed = true,
            Ok(_) => {}
        }
    }
    Ok(Outcome::of(if failed {
        OutcomeClass::FailTest
    } else {
        OutcomeClass::Pass
    }))
}

fn push_number(out: &mut Vec<Token>, v: i64) {
    if v < 0 {
        out.push(Token::NEG);
    }
    for ch in v.unsigned_abs().to_string().bytes() {
        out.push(Token::prompt_digit(ch - b'0'));
    }
}

/// Serializes the example tests into prompt tokens.
///
/// Layout: `| > x > y > out | > x > y > out | ...`, numbers as sign-free
/// prompt digits with `~` in front of negatives.
pub fn encode_prompt(problem: &Problem) -> Result<Vec<Token>> {
    if problem.example_tests.is_empty() {
        return Err(Error::config(format!("problem {} has no example tests", problem.id)));
    }
    let mut out = vec![Token::SEP];
    for test in &problem.example_tests {
        for v in [test.input.0, test.input.1, test.expected_output] {
            out.push(Token::IO);
            push_number(&mut out, v);
        }
        out.push(Token::SEP);
    }
    if out.len() > P_MAX {
        return Err(Error::config(format!(
            "prompt for {} has {} tokens, limit is {P_MAX}",
            problem.id,
            out.len()
        )));
    }
    Ok(out)
}
