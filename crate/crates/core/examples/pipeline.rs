use qsynth::cli::pipeline::{run_pipeline, PipelineConfig};
use qsynth::evalkit::Regime;

fn main() -> qsynth::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let cfg: PipelineConfig = match std::env::args().nth(2) {
        Some(path) => PipelineConfig::from_json(&std::fs::read_to_string(path).expect("config file"))?,
        None => PipelineConfig::default(),
    };
    let out = run_pipeline(&cfg.with_seed(seed))?;
    println!("ckpt floor reached: {}", out.ckpt_floor_reached);
    println!("greedy pass@1 held-out: ckpt {:.3} -> theta {:.3}", out.ckpt_heldout_pass1, out.theta_heldout_pass1);
    println!("train probe: ckpt {:.3} -> theta {:.3}", out.ckpt_train_probe_pass1, out.theta_final_probe_pass1);
    for r in [Regime::Plain, Regime::Ranked, Regime::Filtered, Regime::Oracle] {
        println!("{r:?} pass@1 = {:.3}", out.report(r).unwrap().pass_at_k);
    }
    for (class, s) in &out.correlation.classes {
        println!("{class:?}: n={} mean R~ = {:?}", s.count, s.mean);
    }
    if let Some(a) = &out.artifacts {
        let train: std::collections::HashSet<Vec<i64>> = a.train.iter().map(|p| p.target.signature()).collect();
        let shared: Vec<String> = a.heldout.iter().filter(|p| train.contains(&p.target.signature())).map(|p| p.target.to_string()).collect();
        println!("held-out targets shared with train: {} {:?}", shared.len(), shared);
    }
    for (what, s) in &out.seconds {
        println!("{what}: {s:.1}s");
    }
    Ok(())
}
