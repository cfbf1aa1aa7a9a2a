//! Runs the toy pipeline, with both θ ablations, for several seeds and prints
//! one summary line per seed.
use qsynth::cli::pipeline::{run_pipeline, PipelineConfig};
use qsynth::evalkit::Regime;
use qsynth::stacklang::OutcomeClass;

fn main() -> qsynth::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let n: u64 = std::env::args().nth(1).map_or(5, |s| s.parse().expect("seed count"));
    let mut cfg = match std::env::args().nth(2) {
        Some(path) => PipelineConfig::from_json(&std::fs::read_to_string(path).expect("config file"))?,
        None => PipelineConfig::default(),
    };
    if cfg.ablations.is_empty() {
        cfg.ablations = vec![(false, true), (false, false)];
    }
    println!("seed  ckpt  theta  gain   | plain  ranked | R~pass  R~compile | probe full  no-cons  vanilla | secs");
    for seed in 0..n {
        let out = run_pipeline(&cfg.clone().with_seed(seed))?;
        let p = |r| out.report(r).map_or(f64::NAN, |x| x.pass_at_k);
        let mean = |c| out.correlation.mean(c).map_or(f64::NAN, |m| m);
        let ab: Vec<String> = out.ablations.iter().map(|a| format!("{:.2}", a.final_probe_pass1)).collect();
        let secs: f64 = out.seconds.iter().map(|s| s.1).sum();
        println!(
            "{seed:>4}  {:.2}  {:.2}   {:+.2}  | {:.3}  {:.3}  | {:+.3}  {:+.3}    | {:.2}  {}  | {secs:.0}",
            out.ckpt_heldout_pass1,
            out.theta_heldout_pass1,
            out.theta_heldout_pass1 - out.ckpt_heldout_pass1,
            p(Regime::Plain),
            p(Regime::Ranked),
            mean(OutcomeClass::Pass),
            mean(OutcomeClass::CompileError),
            out.theta_final_probe_pass1,
            ab.join("  "),
        );
    }
    Ok(())
}
