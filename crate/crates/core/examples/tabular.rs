//! Property checks of the conservative Bellman operator on random MDPs.
use qsynth::tabular::{check_bijection, check_contraction, monte_carlo_oracle};

fn main() -> qsynth::Result<()> {
    for gamma in [0.9, 0.999] {
        let c = check_contraction(1000, 20, 5, gamma, 0);
        println!(
            "contraction γ={gamma}: {} trials, {} violations, max ratio {:.6}, shift witness dev {:.1e}",
            c.trials, c.violations, c.max_ratio, c.shift_witness_dev
        );
    }
    let b = check_bijection(200, 0.999, 1e-10, 0)?;
    println!("bijection: max |r - r'| {:.2e}, min separation {:.3}", b.max_round_trip_err, b.min_separation);
    let o = monte_carlo_oracle(5, 6, 3, 0.9, 20_000, 0)?;
    for case in &o.cases {
        println!("oracle mdp {}: exact {:.4}  mc {:.4} ± {:.4}  z {:+.2}", case.trial, case.exact, case.monte_carlo, case.std_err, case.z);
    }
    Ok(())
}
