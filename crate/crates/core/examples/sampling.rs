//! Nucleus filtering on a fixed score row, then samples from an untrained
//! base model.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qsynth::corpus::generate_problems;
use qsynth::decode::{batch_generate, greedy_decode, nucleus, SamplerConfig};
use qsynth::neural::{init_model, Checkpoint, CheckpointMeta, ModelConfig, Stage};
use qsynth::qcore::QModel;

fn main() -> qsynth::Result<()> {
    let scores: Vec<f64> = [0.5f64, 0.3, 0.15, 0.05].iter().map(|p| p.ln()).collect();
    for (top_p, t) in [(0.8, 1.0), (0.95, 1.0), (0.95, 0.5), (1.0, 2.0)] {
        println!("top_p={top_p} T={t}: {:?}", nucleus(&scores, top_p, t));
    }

    let cfg = ModelConfig::default();
    let net = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let model = QModel::from_checkpoint(&Checkpoint::from_network(CheckpointMeta::new(Stage::Ckpt, 0, cfg), &net))?;
    let problems = generate_problems(0, 2)?;
    for p in &problems {
        println!("{} greedy: {}", p.id, greedy_decode(&model, p)?);
    }
    for c in batch_generate(&model, &problems, 3, &SamplerConfig::default())? {
        println!("{} #{}: {}", c.problem_id, c.sample_idx, c.tokens);
    }
    Ok(())
}
