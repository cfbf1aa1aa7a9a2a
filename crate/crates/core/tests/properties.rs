use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qsynth::corpus::{sample_minibatch, trajectory, Dataset, DatasetManifest, Expr, Problem, Source};
use qsynth::decode::{nucleus, SamplerConfig};
use qsynth::evalkit::{oracle_filtered_pass_at_k, pass_at_k_unbiased, ranked_pass_at_k};
use qsynth::neural::tensor::softmax_row;
use qsynth::neural::{init_model, Checkpoint, CheckpointMeta, ModelConfig, Stage};
use qsynth::qcore::{advantage_from_logits, cap_value, compose_q, policy_from_q};
use qsynth::rewardmodel::ScoredCandidate;
use qsynth::stacklang::{grade, vocab_hash, Outcome, OutcomeClass, Program, TestCase, Token};
use qsynth::tabular::{check_bijection, check_contraction};

fn action() -> impl Strategy<Value = Token> {
    let actions: Vec<Token> = Token::actions().collect();
    prop::sample::select(actions)
}

fn program() -> impl Strategy<Value = Program> {
    prop::collection::vec(action(), 1..14).prop_map(Program::new)
}

fn tests_strategy() -> impl Strategy<Value = Vec<TestCase>> {
    prop::collection::vec(((-9i64..=9, -9i64..=9), -50i64..50), 1..6).prop_map(|v| {
        v.into_iter().map(|(input, expected_output)| TestCase { input, expected_output }).collect()
    })
}

proptest! {
    #[test]
    fn dueling_structure(logits in prop::collection::vec(-50.0f64..50.0, 1..18), raw in -30.0f64..30.0, alpha in 0.1f64..5.0) {
        let a = advantage_from_logits(&logits, alpha);
        prop_assert_eq!(a.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 0.0);
        prop_assert!(a.iter().all(|&x| x <= 0.0));
        let v = cap_value(raw);
        prop_assert!(v <= 1.0 - 2.0 * std::f64::consts::LN_2 + 1e-12);
        let q = compose_q(&a, v);
        prop_assert!(q.iter().all(|&x| x <= 1.0));
        let p = softmax_row(&logits);
        for (x, y) in policy_from_q(&q, alpha).iter().zip(&p) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nucleus_is_a_renormalized_prefix(scores in prop::collection::vec(-10.0f64..10.0, 1..18), top_p in 0.01f64..=1.0, t in 0.05f64..4.0) {
        let kept = nucleus(&scores, top_p, t);
        prop_assert!(!kept.is_empty());
        let total: f64 = kept.iter().map(|k| k.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(kept.windows(2).all(|w| w[0].1 >= w[1].1));
        let full = softmax_row(&scores.iter().map(|s| s / t).collect::<Vec<_>>());
        let mass_before_last: f64 = kept[..kept.len() - 1].iter().map(|k| full[k.0]).sum();
        prop_assert!(mass_before_last < top_p);
    }

    #[test]
    fn pass_at_k_bounded_and_monotone(n in 1usize..60, c_frac in 0.0f64..=1.0, k_frac in 0.0f64..=1.0) {
        let c = (c_frac * n as f64) as usize;
        let k = 1 + ((k_frac * (n - 1) as f64) as usize);
        let v = pass_at_k_unbiased(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        if c < n {
            prop_assert!(pass_at_k_unbiased(n, c + 1, k).unwrap() >= v);
        }
        if k < n {
            prop_assert!(pass_at_k_unbiased(n, c, k + 1).unwrap() >= v);
        }
        prop_assert_eq!(pass_at_k_unbiased(n, 0, k).unwrap(), 0.0);
    }

    #[test]
    fn grading_ignores_test_order(p in program(), tests in tests_strategy()) {
        let forward = grade(&p, &tests).unwrap();
        let mut rev = tests.clone();
        rev.reverse();
        prop_assert_eq!(forward, grade(&p, &rev).unwrap());
        prop_assert_eq!(forward.reward, forward.class.reward());
    }

    #[test]
    fn program_text_round_trips(p in program()) {
        prop_assert_eq!(Program::parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn trajectories_carry_terminal_reward_only(p in program(), tests in tests_strategy()) {
        let outcome = grade(&p, &tests).unwrap();
        let rec = trajectory("q", p.clone(), Source::Generated, outcome);
        prop_assert!(rec.validate().is_ok());
        let total: f64 = rec.per_step.iter().map(|t| t.reward).sum();
        prop_assert_eq!(total, outcome.reward);
        let replay: Vec<Token> = rec.per_step.iter().map(|t| t.action).collect();
        prop_assert_eq!(replay, p.tokens);
    }

    #[test]
    fn minibatch_composition_is_exact(b in 1usize..40, rho in 0.0f64..=1.0, seed in any::<u64>()) {
        let ds = toy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample_minibatch(&ds, b, rho, true, &mut rng).unwrap();
        prop_assert_eq!(idx.len(), b);
        let gt = idx.iter().filter(|&&i| ds.records[i].source == Source::GroundTruth).count();
        prop_assert_eq!(gt, (rho * b as f64).round() as usize);
    }

    #[test]
    fn oracle_dominates_ranked(
        cands in prop::collection::vec(prop::collection::vec((any::<bool>(), -5.0f64..1.0), 4), 1..6),
        m in 1usize..=4,
    ) {
        let problems: Vec<Problem> = (0..cands.len())
            .map(|i| Problem::from_target(format!("p{i}"), Expr::X, &[(1, 2), (3, 4), (5, 6), (-7, 8)]))
            .collect();
        let pass = Program::parse("x end").unwrap();
        let fail = Program::parse("y end").unwrap();
        let mut scored = Vec::new();
        for (p, row) in problems.iter().zip(&cands) {
            for (i, &(ok, r)) in row.iter().enumerate() {
                scored.push(ScoredCandidate {
                    problem_id: p.id.clone(),
                    sample_idx: i,
                    tokens: if ok { pass.clone() } else { fail.clone() },
                    r_tilde_steps: vec![r],
                    r_tilde: r,
                    outcome: Some(Outcome::of(if ok { OutcomeClass::Pass } else { OutcomeClass::FailTest })),
                });
            }
        }
        let ranked = ranked_pass_at_k(&problems, &scored, 1, m).unwrap();
        let oracle = oracle_filtered_pass_at_k(&problems, &scored, 1, m).unwrap();
        for (r, o) in ranked.problems.iter().zip(&oracle.problems) {
            prop_assert!(o.score >= r.score);
        }
    }
}

fn toy_dataset() -> Dataset {
    let pass = Outcome::of(OutcomeClass::Pass);
    let fail = Outcome::of(OutcomeClass::FailTest);
    let mut records = Vec::new();
    for i in 0..3 {
        records.push(trajectory(&format!("p{i}"), Program::parse("x end").unwrap(), Source::GroundTruth, pass));
        for _ in 0..5 {
            records.push(trajectory(&format!("p{i}"), Program::parse("y end").unwrap(), Source::Generated, fail));
        }
    }
    let manifest = DatasetManifest {
        seed: 0,
        m_gen: 5,
        gt_cap: 1,
        sampler: SamplerConfig::default(),
        checkpoint_hash: String::new(),
        vocab_hash: vocab_hash(),
        records: records.len(),
    };
    Dataset::new(records, manifest).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), d in 1usize..4, blocks in 1usize..3) {
        let cfg = ModelConfig { embed_dim: 4 * d, mlp_dim: 8, n_blocks: blocks, ..ModelConfig::default() };
        let net = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let ck = Checkpoint::from_network(CheckpointMeta::new(Stage::Ckpt, seed % 1000, cfg), &net);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.content_hash().unwrap(), ck.content_hash().unwrap());
    }

    #[test]
    fn conservative_operator_contracts(seed in any::<u64>(), gamma in 0.5f64..0.9999) {
        let rep = check_contraction(20, 8, 4, gamma, seed);
        prop_assert!(rep.passed(), "{:?}", (rep.violations, rep.max_ratio, rep.shift_witness_dev));
    }

    #[test]
    fn inverse_operator_recovers_rewards(seed in any::<u64>(), gamma in 0.5f64..0.99) {
        let rep = check_bijection(5, gamma, 1e-10, seed).unwrap();
        prop_assert!(rep.max_round_trip_err < 1e-9);
        prop_assert!(rep.min_separation > 0.0);
    }
}
