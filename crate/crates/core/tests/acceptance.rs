//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line
//! before asserting, so `cargo test --test acceptance -- --nocapture` reads as
//! a checklist.
//!
//! The pipeline criteria share five seeds of the default toy pipeline, run
//! once per test binary.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsynth::cli::pipeline::{run_pipeline, PipelineConfig, PipelineOutcome};
use qsynth::decode::greedy_decode;
use qsynth::evalkit::{pass_at_k_ratio, pass_at_k_unbiased, Regime};
use qsynth::neural::Stage;
use qsynth::qcore::QModel;
use qsynth::stacklang::{OutcomeClass, Token};
use qsynth::tabular::{check_bijection, check_contraction, monte_carlo_oracle};
use qsynth::trainer::{run_theta_stage, MetricsSink, StageConfig};

const SEEDS: u64 = 5;

fn report(n: usize, name: &str, ok: bool, detail: &str) {
    println!("criterion {n:>2} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn runs() -> &'static [PipelineOutcome] {
    static RUNS: OnceLock<Vec<PipelineOutcome>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = PipelineConfig {
            ablations: vec![(false, true), (false, false)],
            ..PipelineConfig::default()
        };
        (0..SEEDS)
            .map(|s| run_pipeline(&cfg.clone().with_seed(s)).expect("pipeline run"))
            .collect()
    })
}

#[test]
fn criterion_01_contraction() {
    let t = Instant::now();
    let reps: Vec<_> = [0.9, 0.999].iter().map(|&g| check_contraction(1000, 20, 5, g, 11)).collect();
    let secs = t.elapsed().as_secs_f64();
    let violations: usize = reps.iter().map(|r| r.violations).sum();
    let dev = reps.iter().map(|r| r.shift_witness_dev).fold(0.0, f64::max);
    let ok = violations == 0 && dev <= 1e-12 && secs < 60.0 && reps.iter().all(|r| r.trials == 1000);
    let detail = format!("2x1000 trials, {violations} violations, shift witness |ratio-γ| {dev:.1e}, {secs:.1}s");
    report(1, "operator contraction", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_02_bijection() {
    let t = Instant::now();
    let rep = check_bijection(500, 0.999, 1e-10, 12).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ok = rep.max_round_trip_err < 1e-9 && rep.failures.is_empty() && secs < 120.0;
    let detail = format!("500 round trips, max |r - r'| = {:.2e}, {secs:.1}s", rep.max_round_trip_err);
    report(2, "inverse bijection", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_03_oracle() {
    let rep = monte_carlo_oracle(20, 10, 3, 0.9, 100_000, 13).unwrap();
    let ok = rep.cases.len() == 20 && rep.max_abs_z <= 3.0;
    let detail = format!("20 MDPs x {} rollouts, max |z| = {:.2}", rep.rollouts, rep.max_abs_z);
    report(3, "Monte-Carlo oracle", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_04_init_fidelity() {
    let a = runs()[0].artifacts.as_ref().unwrap();
    let ckpt = QModel::from_checkpoint(&a.ckpt).unwrap();
    let phi = QModel::from_checkpoint(&a.phi).unwrap();
    assert_eq!(phi.stage(), Stage::Phi);

    // π_φ against p_ckpt on states drawn from dataset trajectories.
    let prompts: std::collections::HashMap<&str, Vec<Token>> =
        a.train.iter().map(|p| (p.id.as_str(), p.prompt().unwrap())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_dev = 0.0f64;
    for _ in 0..100 {
        let rec = &a.dataset.records[rng.gen_range(0..a.dataset.records.len())];
        let t = rng.gen_range(0..rec.tokens.len());
        let mut seq = prompts[rec.problem_id.as_str()].clone();
        seq.extend_from_slice(&rec.tokens.tokens[..t]);
        let last = seq.len() - 1;
        let pi = phi.view(&seq).unwrap().policy(last);
        let p = ckpt.view(&seq).unwrap().p_ref(last);
        for (x, y) in pi.iter().zip(&p) {
            max_dev = max_dev.max((x - y).abs());
        }
    }

    // θ at step 0 through the real trainer.
    let cfg = StageConfig { steps: 0, ..StageConfig::for_stage(Stage::Theta) };
    let theta0 = run_theta_stage(&a.ckpt, Some(&a.phi), &a.dataset, &a.train, &cfg, &mut MetricsSink::memory())
        .unwrap()
        .result
        .checkpoint;
    let theta0 = QModel::from_checkpoint(&theta0).unwrap();
    let mut q_mismatch = 0usize;
    let mut decode_mismatch = 0usize;
    for p in &a.heldout {
        let prog = greedy_decode(&phi, p).unwrap();
        if greedy_decode(&theta0, p).unwrap() != prog {
            decode_mismatch += 1;
        }
        let mut seq = p.prompt().unwrap();
        seq.extend_from_slice(&prog.tokens[..prog.len().saturating_sub(1)]);
        let (qp, qt) = (phi.view(&seq).unwrap().q, theta0.view(&seq).unwrap().q);
        q_mismatch += qp.data.iter().zip(&qt.data).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    }
    let ok = max_dev < 1e-9 && q_mismatch == 0 && decode_mismatch == 0;
    let detail = format!(
        "max |π_φ - p_ckpt| = {max_dev:.1e} over 100 states; Q bit mismatches {q_mismatch}; decode mismatches {decode_mismatch}/{}",
        a.heldout.len()
    );
    report(4, "initialization fidelity", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_05_structure() {
    let mut batches = 0usize;
    let mut violations = 0u64;
    for out in runs() {
        let logged = out.metrics.iter().chain(out.ablations.iter().flat_map(|a| a.metrics.iter()));
        for rec in logged.filter(|r| r.stage != Stage::Ckpt) {
            batches += 1;
            violations += rec.structure.violations();
        }
    }
    let ok = batches > 0 && violations == 0;
    let detail = format!("{batches} logged batches over {SEEDS} seeds, {violations} violations");
    report(5, "structural invariants", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_06_gradcheck() {
    let rep = qsynth::trainer::gradcheck(&Default::default()).unwrap();
    let worst = rep.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let phases: std::collections::BTreeSet<&str> = rep.checks.iter().map(|c| c.phase.as_str()).collect();
    let ok = rep.passed && worst < 1e-4 && phases.len() == 2 && rep.wall_time_s < 300.0;
    let detail = format!("{} checks, worst rel err {worst:.2e}, {:.1}s", rep.checks.len(), rep.wall_time_s);
    report(6, "gradient correctness", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_07_heldout_gain() {
    let mut wins = 0;
    let mut cells = Vec::new();
    let mut slowest = 0.0f64;
    for out in runs() {
        let gain = out.theta_heldout_pass1 - out.ckpt_heldout_pass1;
        wins += usize::from(gain >= 0.05 - 1e-12);
        cells.push(format!("{:.2}->{:.2}", out.ckpt_heldout_pass1, out.theta_heldout_pass1));
        let secs: f64 = out.seconds.iter().filter(|(w, _)| !w.starts_with("ablation")).map(|s| s.1).sum();
        slowest = slowest.max(secs);
    }
    let ok = wins >= 4 && slowest < 1800.0;
    let detail = format!("gain >= 0.05 in {wins}/{SEEDS} seeds [{}], slowest seed {slowest:.0}s", cells.join(" "));
    report(7, "held-out gain over ckpt", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_08_ablations() {
    let mut wins = 0;
    let mut cells = Vec::new();
    for out in runs() {
        let full = out.theta_final_probe_pass1;
        let others: Vec<f64> = out.ablations.iter().map(|a| a.final_probe_pass1).collect();
        assert_eq!(others.len(), 2);
        wins += usize::from(others.iter().all(|&o| full >= o));
        cells.push(format!("{full:.2}/{:.2}/{:.2}", others[0], others[1]));
    }
    let ok = wins >= 4;
    let detail = format!("full >= both ablations in {wins}/{SEEDS} seeds [full/no-cons/vanilla: {}]", cells.join(" "));
    report(8, "ablation ordering", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_09_ranking() {
    let mut ranked_wins = 0;
    let mut ordered = 0;
    let mut cells = Vec::new();
    for out in runs() {
        let plain = out.report(Regime::Plain).unwrap();
        let ranked = out.report(Regime::Ranked).unwrap();
        assert_eq!((plain.m, ranked.m, plain.k), (32, 32, 1));
        ranked_wins += usize::from(ranked.pass_at_k >= plain.pass_at_k);
        let (pass, compile) = (out.correlation.mean(OutcomeClass::Pass), out.correlation.mean(OutcomeClass::CompileError));
        ordered += usize::from(matches!((pass, compile), (Some(p), Some(c)) if p > c));
        cells.push(format!(
            "{:.3}/{:.3} R~ {}/{}",
            ranked.pass_at_k,
            plain.pass_at_k,
            pass.map_or("-".into(), |v| format!("{v:.2}")),
            compile.map_or("-".into(), |v| format!("{v:.2}")),
        ));
    }
    let ok = ranked_wins >= 4 && ordered == SEEDS as usize;
    let detail = format!(
        "ranked >= plain in {ranked_wins}/{SEEDS}, R~(Pass) > R~(CompileError) in {ordered}/{SEEDS} [ranked/plain R~ pass/compile: {}]",
        cells.join("; ")
    );
    report(9, "ranking efficacy", ok, &detail);
    assert!(ok, "{detail}");
}

fn enumerate(n: usize, c: usize, k: usize) -> (u128, u128) {
    let (mut hit, mut total) = (0u128, 0u128);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            total += 1;
            hit += u128::from(mask & ((1u32 << c) - 1) != 0);
        }
    }
    (hit, total)
}

#[test]
fn criterion_10_dominance_and_estimator() {
    let mut dominance_failures = 0;
    let mut problems = 0;
    for out in runs() {
        let ranked = out.report(Regime::Ranked).unwrap();
        let oracle = out.report(Regime::Oracle).unwrap();
        for (r, o) in ranked.problems.iter().zip(&oracle.problems) {
            assert_eq!(r.problem_id, o.problem_id);
            problems += 1;
            dominance_failures += usize::from(o.score < r.score);
        }
    }
    let mut cases = 0;
    let mut mismatches = 0;
    for n in 1..=12 {
        for c in 0..=n {
            for k in 1..=n {
                let exact = enumerate(n, c, k);
                let est = pass_at_k_unbiased(n, c, k).unwrap();
                cases += 1;
                let ratio = pass_at_k_ratio(n as u64, c as u64, k as u64).unwrap();
                mismatches += usize::from(ratio != exact || est != exact.0 as f64 / exact.1 as f64);
            }
        }
    }
    let ok = dominance_failures == 0 && mismatches == 0;
    let detail = format!(
        "oracle < ranked on {dominance_failures}/{problems} problems; estimator mismatches {mismatches}/{cases} (n <= 12)"
    );
    report(10, "dominance and estimator exactness", ok, &detail);
    assert!(ok, "{detail}");
}
