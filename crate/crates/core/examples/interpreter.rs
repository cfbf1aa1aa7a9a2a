//! Runs a few stack programs and grades them against unit tests.
use qsynth::stacklang::{compile_check, execute, grade, Program, TestCase};

fn main() -> qsynth::Result<()> {
    let tests = [
        TestCase { input: (2, 3), expected_output: 10 },
        TestCase { input: (-1, 4), expected_output: 6 },
    ];
    for src in ["x y + 2 * end", "x y + end", "x swap end", "+ end", "x y"] {
        let p = Program::parse(src)?;
        let static_check = compile_check(&p).map_err(|e| format!("{e:?}"));
        let run = execute(&p, (2, 3)).map_err(|e| format!("{e:?}"));
        let outcome = grade(&p, &tests)?;
        println!("{src:<16} check={static_check:?} f(2,3)={run:?} -> {:?} (reward {})", outcome.class, outcome.reward);
    }
    Ok(())
}
