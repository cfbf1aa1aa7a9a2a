//! Problems, ground-truth programs, the training dataset and its batching.

mod dataset;
mod enumerate;
pub mod expr;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    build_dataset, sample_minibatch, trajectory, Dataset, DatasetConfig, DatasetManifest, Source,
    TrajectoryRecord, Transition,
};
pub use enumerate::enumerate_ground_truth;
pub use expr::{BinOp, Expr};

use crate::error::{Error, Result};
use crate::stacklang::{self, grade, Program, TestCase, Token, INPUT_BOUND, T_MAX};

pub const EXAMPLE_TESTS: usize = 2;
pub const HIDDEN_TESTS: usize = 8;
/// Ground-truth programs kept per problem.
pub const DEFAULT_GT_CAP: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    #[serde(rename = "target_descriptor")]
    pub target: Expr,
    pub example_tests: Vec<TestCase>,
    pub hidden_tests: Vec<TestCase>,
}

impl Problem {
    pub fn from_target(id: impl Into<String>, target: Expr, inputs: &[(i64, i64)]) -> Problem {
        assert!(inputs.len() > EXAMPLE_TESTS, "need example and hidden inputs");
        let case = |&(x, y): &(i64, i64)| TestCase {
            input: (x, y),
            expected_output: target.eval(x, y),
        };
        Problem {
            id: id.into(),
            example_tests: inputs[..EXAMPLE_TESTS].iter().map(case).collect(),
            hidden_tests: inputs[EXAMPLE_TESTS..].iter().map(case).collect(),
            target,
        }
    }

    /// The target compiled to postfix, which always passes its own tests.
    pub fn witness(&self) -> Program {
        let mut tokens = self.target.postfix();
        tokens.push(Token::END);
        Program::new(tokens)
    }

    pub fn prompt(&self) -> Result<Vec<Token>> {
        stacklang::encode_prompt(self)
    }

    pub fn passes_hidden(&self, program: &Program) -> bool {
        grade(program, &self.hidden_tests).map(|o| o.passed()).unwrap_or(false)
    }
}

/// Deterministically generates `count` problems with distinct semantics.
///
/// Targets are drawn with [`Expr::sample`], deduplicated by their values on
/// the whole input grid, and kept only if some program of at most `T_MAX`
/// tokens passes the hidden tests.
pub fn generate_problems(seed: u64, count: usize) -> Result<Vec<Problem>> {
    if count == 0 {
        return Err(Error::config("problem count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<(i64, i64)> = (-INPUT_BOUND..=INPUT_BOUND)
        .flat_map(|x| (-INPUT_BOUND..=INPUT_BOUND).map(move |y| (x, y)))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut draws = 0usize;
    while out.len() < count {
        draws += 1;
        if draws > 1_000_000 {
            return Err(Error::config(format!("could not find {count} distinct targets")));
        }
        let target = Expr::sample(&mut rng, expr::MAX_DEPTH);
        if !seen.insert(target.signature()) {
            continue;
        }
        let inputs: Vec<(i64, i64)> = grid
            .choose_multiple(&mut rng, EXAMPLE_TESTS + HIDDEN_TESTS)
            .copied()
            .collect();
        let problem = Problem::from_target(format!("s{seed}-{:03}", out.len()), target, &inputs);
        let witness = problem.witness();
        if witness.len() > T_MAX || !problem.passes_hidden(&witness) || problem.prompt().is_err() {
            continue;
        }
        out.push(problem);
    }
    Ok(out)
}

/// Shortest ground-truth programs, searched up to the witness length.
pub fn ground_truth(problem: &Problem, cap: usize) -> Result<Vec<Program>> {
    let max_len = problem.witness().len().min(T_MAX);
    enumerate_ground_truth(problem, max_len, cap)
}

pub fn save_problems(problems: &[Problem], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(problems)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_problems(path: &Path) -> Result<Vec<Problem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let problems: Vec<Problem> = serde_json::from_str(&text)?;
    for p in &problems {
        for t in p.example_tests.iter().chain(&p.hidden_tests) {
            if t.expected_output != p.target.eval(t.input.0, t.input.1) {
                return Err(Error::validation(format!(
                    "problem {}: test {:?} disagrees with its target",
                    p.id, t.input
                )));
            }
        }
    }
    Ok(problems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stacklang::{encode_prompt, P_MAX};


    #[test]
    fn generation_is_deterministic_and_solvable() {
        let a = generate_problems(7, 50).unwrap();
        let b = generate_problems(7, 50).unwrap();
        assert_eq!(a, b);
        let mut sigs = HashSet::new();
        for p in &a {
            assert_eq!(p.example_tests.len(), EXAMPLE_TESTS);
            assert_eq!(p.hidden_tests.len(), HIDDEN_TESTS);
            for e in &p.example_tests {
                assert!(p.hidden_tests.iter().all(|h| h.input != e.input));
            }
            assert!(sigs.insert(p.target.signature()));
            let gt = ground_truth(p, 1).unwrap();
            assert!(!gt.is_empty(), "{} has no solution", p.target);
            assert!(gt[0].len() <= p.witness().len());
        }
    }

    #[test]
    fn sum_target_expected_value() {
        let target = Expr::bin(BinOp::Add, Expr::X, Expr::Y);
        let inputs = [(1, 1), (0, 4), (2, 3), (5, -5)];
        let p = Problem::from_target("sum", target, &inputs);
        assert_eq!(p.hidden_tests[0].input, (2, 3));
        assert_eq!(p.hidden_tests[0].expected_output, 5);
    }

    #[test]
    fn prompt_layout() {
        let p = Problem {
            id: "a".into(),
            target: Expr::bin(BinOp::Add, Expr::X, Expr::Y),
            example_tests: vec![TestCase { input: (2, 3), expected_output: 5 }],
            hidden_tests: vec![TestCase { input: (1, 1), expected_output: 2 }],
        };
        let prompt = encode_prompt(&p).unwrap();
        assert_eq!(prompt.len(), 8);
        let surf: Vec<String> = prompt.iter().map(|t| t.surface()).collect();
        assert_eq!(surf.join(" "), "| > #2 > #3 > #5 |");
        assert_eq!(encode_prompt(&p).unwrap(), prompt);
        assert!(prompt.iter().all(|t| !t.is_program()));

        let same = p.clone();
        assert_eq!(encode_prompt(&same).unwrap(), prompt);

        let mut other = p.clone();
        other.example_tests[0].expected_output = 7;
        let changed = encode_prompt(&other).unwrap();
        assert_eq!(changed.len(), prompt.len());
        let diffs: Vec<usize> = (0..prompt.len()).filter(|&i| prompt[i] != changed[i]).collect();
        assert_eq!(diffs, vec![6]);

        let mut neg = p.clone();
        neg.example_tests[0] = TestCase { input: (-2, 13), expected_output: -120 };
        let surf: Vec<String> = encode_prompt(&neg).unwrap().iter().map(|t| t.surface()).collect();
        assert_eq!(surf.join(" "), "| > ~ #2 > #1 #3 > ~ #1 #2 #0 |");
    }

    #[test]
    fn prompt_limits() {
        let many = Problem {
            id: "long".into(),
            target: Expr::X,
            example_tests: vec![TestCase { input: (-9, -9), expected_output: -9 }; 6],
            hidden_tests: vec![],
        };
        assert!(encode_prompt(&many).is_err());
        let none = Problem { example_tests: vec![], ..many };
        assert!(encode_prompt(&none).is_err());
    }

    #[test]
    fn every_generated_prompt_fits() {
        for p in generate_problems(11, 100).unwrap() {
            assert!(p.prompt().unwrap().len() <= P_MAX);
        }
    }
}
