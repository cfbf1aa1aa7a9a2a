use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsynth::corpus::generate_problems;
use qsynth::decode::{batch_generate, SamplerConfig};
use qsynth::neural::tensor::argmax;
use qsynth::neural::{init_model, CheckpointMeta, ModelConfig, Network, Stage};
use qsynth::qcore::QModel;
use qsynth::rewardmodel::{reward_steps, RewardForm};
use qsynth::trainer::theta_checkpoint;

/// A θ model whose policy has drifted from its reference, so the reference
/// mode and the argmax of `Q_θ` disagree on some states.
fn drifted_theta(seed: u64) -> QModel {
    let cfg = ModelConfig { embed_dim: 16, mlp_dim: 16, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = init_model(&cfg, &mut rng).unwrap();
    let mut policy: Network = reference.clone();
    for name in ["head.logits.w", "head.logits.b", "head.h1.w", "head.h1.b"] {
        for v in &mut policy.params.get_mut(name).unwrap().data {
            *v = (*v + rng.gen_range(-1.0..1.0)) as f32 as f64;
        }
    }
    let mut meta = CheckpointMeta::new(Stage::Theta, 0, cfg);
    meta.alpha = 1.0;
    QModel::from_checkpoint(&theta_checkpoint(meta, &policy, &reference)).unwrap()
}

#[test]
fn exact_form_dominates_and_telescopes() {
    let gamma = 0.9;
    let model = drifted_theta(3);
    let problems = generate_problems(5, 6).unwrap();
    let cands = batch_generate(&model, &problems, 6, &SamplerConfig::default()).unwrap();
    let mut strict = 0;
    for c in &cands {
        let p = problems.iter().find(|p| p.id == c.problem_id).unwrap();
        let approx = reward_steps(&model, p, &c.tokens, gamma, RewardForm::Approximate).unwrap();
        let exact = reward_steps(&model, p, &c.tokens, gamma, RewardForm::Exact).unwrap();

        let mut seq = p.prompt().unwrap();
        let first = seq.len() - 1;
        let n = c.tokens.len();
        seq.extend_from_slice(&c.tokens.tokens[..n - 1]);
        let view = model.view(&seq).unwrap();
        let mut direct = 0.0;
        for t in 0..n {
            let r = first + t;
            let q_sa = view.q.row(r)[c.tokens.tokens[t].id()];
            direct += q_sa;
            if t + 1 < n {
                direct -= gamma * view.q.row(r + 1)[argmax(&view.p_ref(r + 1))];
                // A ≤ 0, so subtracting γ Q(s', â') removes no more than γ V(s').
                assert!(exact[t] >= approx[t] - 1e-12);
                let mode_agrees = argmax(&view.p_ref(r + 1)) == argmax(view.q.row(r + 1));
                if mode_agrees {
                    assert!((exact[t] - approx[t]).abs() < 1e-12);
                } else if exact[t] > approx[t] + 1e-12 {
                    strict += 1;
                }
            } else {
                assert_eq!(exact[t], approx[t]);
            }
        }
        let total: f64 = exact.iter().sum();
        assert!((total - direct).abs() < 1e-9, "{total} vs {direct}");
    }
    assert!(strict > 0, "drifted model never separated the two forms");
}

#[test]
fn scoring_is_read_only_and_deterministic() {
    let model = drifted_theta(8);
    let before = model.param_hash();
    let problems = generate_problems(2, 3).unwrap();
    let cands = batch_generate(&model, &problems, 4, &SamplerConfig { seed: 5, ..SamplerConfig::default() }).unwrap();
    let a = qsynth::rewardmodel::score_candidates(&model, &problems, &cands, 0.999, RewardForm::Approximate).unwrap();
    let b = qsynth::rewardmodel::score_candidates(&model, &problems, &cands, 0.999, RewardForm::Approximate).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.param_hash(), before);
    for s in &a {
        assert!((s.r_tilde - s.r_tilde_steps.iter().sum::<f64>()).abs() < 1e-12);
    }
}
