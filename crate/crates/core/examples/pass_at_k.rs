//! The unbiased pass@k estimator against brute-force subset counting.
use qsynth::evalkit::{pass_at_k_ratio, pass_at_k_unbiased};

fn main() -> qsynth::Result<()> {
    let n = 10;
    println!("n={n}");
    println!("  c   k=1     k=2     k=5");
    for c in [0, 1, 3, 7] {
        let row: Vec<String> = [1, 2, 5]
            .iter()
            .map(|&k| pass_at_k_unbiased(n, c, k).map(|v| format!("{v:.4}")))
            .collect::<qsynth::Result<_>>()?;
        println!("{c:>3}   {}", row.join("  "));
    }
    let (hit, total) = pass_at_k_ratio(10, 3, 5).expect("fits");
    println!("exact pass@5 with 3 of 10 correct: {hit}/{total}");
    println!("large n falls back to the product form: {:.6}", pass_at_k_unbiased(400, 40, 100)?);
    Ok(())
}
