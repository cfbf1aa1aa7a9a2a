//! One seed of the whole toy experiment, from problem generation to the
//! evaluation reports.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_dataset, generate_problems, Dataset, DatasetConfig, Problem};
use crate::decode::{batch_generate, SamplerConfig};
use crate::error::Result;
use crate::evalkit::{evaluate, EvalReport, Regime};
use crate::neural::{Checkpoint, Stage};
use crate::qcore::QModel;
use crate::rewardmodel::{correlation_report, score_candidates, CorrelationReport, RewardForm, ScoredCandidate};
use crate::trainer::{
    greedy_pass_rate, overlay, pretrain_ckpt, run_phi_stage, run_theta_stage, MetricsRecord, MetricsSink,
    StageConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub train_problems: usize,
    pub heldout_problems: usize,
    pub m_gen: usize,
    pub m_eval: usize,
    pub k: usize,
    pub sampler: SamplerConfig,
    pub ckpt: StageConfig,
    pub phi: StageConfig,
    pub theta: StageConfig,
    /// Extra θ runs as `(use_conservative_operator, use_phi_init)`.
    pub ablations: Vec<(bool, bool)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            train_problems: 50,
            heldout_problems: 50,
            m_gen: 32,
            m_eval: 32,
            k: 1,
            sampler: SamplerConfig::default(),
            ckpt: StageConfig::for_stage(Stage::Ckpt),
            phi: StageConfig::for_stage(Stage::Phi),
            theta: StageConfig::for_stage(Stage::Theta),
            ablations: Vec::new(),
        }
    }
}

impl PipelineConfig {
    /// Parses a JSON config; each stage section falls back to that stage's
    /// own defaults.
    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        let mut over: serde_json::Value = serde_json::from_str(text)?;
        let mut stages = Vec::new();
        for (key, stage) in [("ckpt", Stage::Ckpt), ("phi", Stage::Phi), ("theta", Stage::Theta)] {
            let v = over.as_object_mut().and_then(|o| o.remove(key)).unwrap_or(serde_json::json!({}));
            stages.push(StageConfig::from_value(v, stage)?);
        }
        let mut base = serde_json::to_value(PipelineConfig::default())?;
        overlay(&mut base, over);
        let mut cfg: PipelineConfig = serde_json::from_value(base)?;
        let mut it = stages.into_iter();
        cfg.ckpt = it.next().expect("three stages");
        cfg.phi = it.next().expect("three stages");
        cfg.theta = it.next().expect("three stages");
        Ok(cfg)
    }

    /// Copies `seed` into every stage so that each seed is an independent
    /// replicate.
    pub fn with_seed(mut self, seed: u64) -> PipelineConfig {
        self.seed = seed;
        for (i, s) in [&mut self.ckpt, &mut self.phi, &mut self.theta].into_iter().enumerate() {
            s.seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        }
        self.sampler.seed = seed;
        self
    }
}

pub const HELDOUT_SEED_OFFSET: u64 = 1_000_000;

/// Train and held-out problems drawn independently from the same generator,
/// so either set may contain a target whose semantics also occur in the other.
pub fn split_problems(seed: u64, n_train: usize, n_heldout: usize) -> Result<(Vec<Problem>, Vec<Problem>)> {
    Ok((
        generate_problems(seed, n_train)?,
        generate_problems(seed.wrapping_add(HELDOUT_SEED_OFFSET), n_heldout)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub use_conservative_operator: bool,
    pub use_phi_init: bool,
    pub final_probe_pass1: f64,
    pub probes: Vec<(usize, f64)>,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub seed: u64,
    pub ckpt_floor_reached: bool,
    pub ckpt_train_probe_pass1: f64,
    pub ckpt_heldout_pass1: f64,
    pub theta_heldout_pass1: f64,
    pub theta_final_probe_pass1: f64,
    pub reports: Vec<EvalReport>,
    pub correlation: CorrelationReport,
    pub ablations: Vec<AblationOutcome>,
    pub metrics: Vec<MetricsRecord>,
    pub seconds: Vec<(String, f64)>,
    #[serde(skip)]
    pub artifacts: Option<Artifacts>,
}

#[derive(Clone, Debug)]
pub struct Artifacts {
    pub train: Vec<Problem>,
    pub heldout: Vec<Problem>,
    pub ckpt: Checkpoint,
    pub phi: Checkpoint,
    pub theta: Checkpoint,
    pub dataset: Dataset,
    pub scored: Vec<ScoredCandidate>,
}

impl PipelineOutcome {
    pub fn report(&self, regime: Regime) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.regime == regime)
    }
}

struct Timer(Instant, Vec<(String, f64)>);

impl Timer {
    fn lap(&mut self, what: &str) {
        let now = Instant::now();
        self.1.push((what.to_string(), (now - self.0).as_secs_f64()));
        log::info!("{what}: {:.1}s", (now - self.0).as_secs_f64());
        self.0 = now;
    }
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let mut timer = Timer(Instant::now(), Vec::new());
    let (train, heldout) = split_problems(cfg.seed, cfg.train_problems, cfg.heldout_problems)?;
    timer.lap("problems");

    let mut sink = MetricsSink::memory();
    let pre = pretrain_ckpt(&train, &cfg.ckpt, &mut sink)?;
    let ckpt = pre.result.checkpoint;
    timer.lap("pretrain");

    let ds_cfg = DatasetConfig {
        m_gen: cfg.m_gen,
        sampler: cfg.sampler.clone(),
        seed: cfg.seed,
        ..DatasetConfig::default()
    };
    let dataset = build_dataset(&train, &ckpt, &ds_cfg)?;
    timer.lap("dataset");

    let phi = run_phi_stage(&ckpt, &dataset, &train, &cfg.phi, &mut sink)?.result.checkpoint;
    timer.lap("phi");

    let theta_run = run_theta_stage(&ckpt, Some(&phi), &dataset, &train, &cfg.theta, &mut sink)?;
    let theta = theta_run.result.checkpoint;
    timer.lap("theta");

    let base = QModel::from_checkpoint(&ckpt)?;
    let model = QModel::from_checkpoint(&theta)?;
    let probe_set = &train[..cfg.theta.probe_problems.min(train.len())];
    let ckpt_train_probe_pass1 = greedy_pass_rate(&base, probe_set)?;
    let ckpt_heldout_pass1 = greedy_pass_rate(&base, &heldout)?;
    let theta_heldout_pass1 = greedy_pass_rate(&model, &heldout)?;
    timer.lap("greedy");

    let sampler = SamplerConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cfg.sampler.clone()
    };
    let candidates = batch_generate(&model, &heldout, cfg.m_eval, &sampler)?;
    let scored = score_candidates(&model, &heldout, &candidates, cfg.theta.gamma, RewardForm::Approximate)?;
    let reports = [Regime::Plain, Regime::Ranked, Regime::Filtered, Regime::Oracle]
        .iter()
        .map(|&r| {
            let mut rep = evaluate(r, &heldout, &scored, cfg.k, cfg.m_eval)?;
            rep.temperature = Some(sampler.temperature);
            Ok(rep)
        })
        .collect::<Result<Vec<_>>>()?;
    let correlation = correlation_report(&scored);
    timer.lap("sample+score+eval");

    let mut ablations = Vec::new();
    for &(cons, init) in &cfg.ablations {
        let mut c = cfg.theta.clone();
        c.use_conservative_operator = cons;
        c.use_phi_init = init;
        let mut s = MetricsSink::memory();
        let run = run_theta_stage(&ckpt, Some(&phi), &dataset, &train, &c, &mut s)?;
        ablations.push(AblationOutcome {
            use_conservative_operator: cons,
            use_phi_init: init,
            final_probe_pass1: run.probes.last().map_or(0.0, |p| p.1),
            probes: run.probes,
            metrics: s.records,
        });
        timer.lap(&format!("ablation cons={cons} init={init}"));
    }

    Ok(PipelineOutcome {
        seed: cfg.seed,
        ckpt_floor_reached: pre.floor_reached,
        ckpt_train_probe_pass1,
        ckpt_heldout_pass1,
        theta_heldout_pass1,
        theta_final_probe_pass1: theta_run.probes.last().map_or(0.0, |p| p.1),
        reports,
        correlation,
        ablations,
        metrics: sink.records,
        seconds: timer.1,
        artifacts: Some(Artifacts { train, heldout, ckpt, phi, theta, dataset, scored }),
    })
}
