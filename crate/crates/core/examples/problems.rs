//! Generates toy problems, shows their prompts and enumerated ground truth.
use qsynth::corpus::{generate_problems, ground_truth, DEFAULT_GT_CAP};

fn main() -> qsynth::Result<()> {
    let seed = std::env::args().nth(1).map_or(7, |s| s.parse().expect("seed"));
    for p in generate_problems(seed, 8)? {
        let prompt: Vec<String> = p.prompt()?.iter().map(|t| t.surface()).collect();
        let gt: Vec<String> = ground_truth(&p, DEFAULT_GT_CAP)?.iter().map(|g| g.to_string()).collect();
        println!("{}  target {}", p.id, p.target);
        println!("    prompt  {}", prompt.join(" "));
        println!("    gt      {}", gt.join(" | "));
    }
    Ok(())
}
