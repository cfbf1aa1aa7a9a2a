//! Base model, φ stage and θ stage on a small corpus, then recovered-reward
//! ranking of θ samples.
use qsynth::corpus::{build_dataset, generate_problems, DatasetConfig};
use qsynth::decode::{batch_generate, SamplerConfig};
use qsynth::neural::Stage;
use qsynth::qcore::QModel;
use qsynth::rewardmodel::{correlation_report, rank_top_k, score_candidates, RewardForm};
use qsynth::trainer::{pretrain_ckpt, run_phi_stage, run_theta_stage, MetricsSink, StageConfig};

fn main() -> qsynth::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let problems = generate_problems(1, 20)?;
    let mut sink = MetricsSink::memory();

    let ckpt_cfg = StageConfig { steps: 600, ..StageConfig::for_stage(Stage::Ckpt) };
    let pre = pretrain_ckpt(&problems, &ckpt_cfg, &mut sink)?;
    println!("ckpt: {} steps, floor reached {}, probes {:?}", pre.result.steps_run, pre.floor_reached, pre.probes);
    let ckpt = pre.result.checkpoint;

    let dataset = build_dataset(&problems, &ckpt, &DatasetConfig { m_gen: 8, ..DatasetConfig::default() })?;
    println!("dataset: {} ground truth, {} generated", dataset.ground_truth.len(), dataset.generated.len());

    let phi_cfg = StageConfig { steps: 400, ..StageConfig::for_stage(Stage::Phi) };
    let phi_run = run_phi_stage(&ckpt, &dataset, &problems, &phi_cfg, &mut sink)?;
    println!("phi: {} steps, final L_V {:.4}", phi_run.result.steps_run, phi_run.final_loss);

    let theta_cfg = StageConfig { steps: 400, probe_every: 100, ..StageConfig::for_stage(Stage::Theta) };
    let theta_run = run_theta_stage(&ckpt, Some(&phi_run.result.checkpoint), &dataset, &problems, &theta_cfg, &mut sink)?;
    println!("theta: initial {:?}", theta_run.initial);
    println!("theta: probes {:?}, structure violations {}", theta_run.probes, theta_run.result.structure.violations());

    let model = QModel::from_checkpoint(&theta_run.result.checkpoint)?;
    let cands = batch_generate(&model, &problems[..5], 8, &SamplerConfig::default())?;
    let scored = score_candidates(&model, &problems, &cands, theta_cfg.gamma, RewardForm::Approximate)?;
    for pid in problems[..5].iter().map(|p| &p.id) {
        let mine: Vec<_> = scored.iter().filter(|s| &s.problem_id == pid).cloned().collect();
        let top = rank_top_k(&mine, 1)?[0];
        println!("{pid}: top R~ {:+.3} {} -> {:?}", top.r_tilde, top.tokens, top.outcome.map(|o| o.class));
    }
    for (class, s) in correlation_report(&scored).classes {
        println!("{class:?}: n={} mean R~ {:?}", s.count, s.mean);
    }
    Ok(())
}
