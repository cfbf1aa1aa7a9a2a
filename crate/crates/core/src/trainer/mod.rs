//! Base-model pre-training, the φ stage and the θ stage.

mod gradcheck;
mod items;
mod phi;
mod pretrain;
mod theta;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, LossCheck};
pub use items::{phi_loss, theta_losses, ThetaLosses};
pub use phi::{run_phi_stage, PhiRun};
pub use pretrain::{pretrain_ckpt, PretrainRun};
pub use items::{CeItem, PhiItem, ThetaItem, ThetaLossConfig};
pub use theta::{run_theta_stage, theta_checkpoint, theta_reference, ThetaRun};

use crate::corpus::Problem;
use crate::decode::greedy_decode;
use crate::error::{Error, Result};
use crate::neural::optim::LrSchedule;
use crate::neural::{Checkpoint, ModelConfig, Stage};
use crate::qcore::{LossBundle, QModel, StructureReport, DEFAULT_ALPHA, DEFAULT_BETA_ADV, DEFAULT_BETA_CE};

pub const DEFAULT_GAMMA: f64 = 0.999;
pub const DEFAULT_RHO_REAL: f64 = 0.5;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.05;
pub const PROBE_EVERY: usize = 200;
pub const PROBE_PROBLEMS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub gamma: f64,
    pub alpha: f64,
    pub rho_real: f64,
    pub beta_adv: f64,
    pub beta_ce: f64,
    pub use_conservative_operator: bool,
    pub use_phi_init: bool,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub log_every: usize,
    pub probe_every: usize,
    pub probe_problems: usize,
    /// Pre-training stops once the probe reaches this greedy pass@1.
    pub pass_floor: f64,
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    pub sample_with_replacement: bool,
    /// Architecture of a freshly initialized base model.
    pub model: ModelConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::for_stage(Stage::Theta)
    }
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> StageConfig {
        let (steps, lr, schedule) = match stage {
            Stage::Ckpt => (3000, 1e-3, LrSchedule::Constant),
            Stage::Phi => (3000, 1e-3, LrSchedule::Constant),
            Stage::Theta => (3000, 3e-4, LrSchedule::LinearDecay),
        };
        StageConfig {
            stage,
            steps,
            batch_size: 16,
            lr,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            schedule,
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            rho_real: DEFAULT_RHO_REAL,
            beta_adv: DEFAULT_BETA_ADV,
            beta_ce: DEFAULT_BETA_CE,
            use_conservative_operator: true,
            use_phi_init: true,
            seed: 0,
            max_grad_norm: Some(1.0),
            log_every: 50,
            probe_every: PROBE_EVERY,
            probe_problems: PROBE_PROBLEMS,
            pass_floor: 0.4,
            early_stop_window: 200,
            early_stop_tol: 1e-5,
            sample_with_replacement: true,
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::config(format!("config is for stage {}, expected {stage}", self.stage)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho_real) {
            return Err(Error::config("rho_real must be in [0, 1]"));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.probe_every == 0 {
            return Err(Error::config("batch_size, log_every and probe_every must be positive"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.beta_adv < 0.0 || self.beta_ce < 0.0 {
            return Err(Error::config("lr must be positive and weights non-negative"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::config("max_grad_norm must be positive"));
            }
        }
        self.model.validate()
    }

    /// Loads a JSON config; missing fields take the stage defaults.
    pub fn from_json(text: &str, stage: Stage) -> Result<StageConfig> {
        StageConfig::from_value(serde_json::from_str(text)?, stage)
    }

    pub fn from_value(over: serde_json::Value, stage: Stage) -> Result<StageConfig> {
        let mut base = serde_json::to_value(StageConfig::for_stage(stage))?;
        overlay(&mut base, over);
        Ok(serde_json::from_value(base)?)
    }
}

/// Recursively replaces the fields of `base` present in `over`.
pub fn overlay(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: Stage,
    pub step: usize,
    pub losses: LossBundle,
    pub grad_norm: f64,
    pub lr: f64,
    pub probe_pass1: Option<f64>,
    pub structure: StructureReport,
    pub wall_time_s: f64,
}

/// Appends metrics as JSONL, flushing after every record.
pub struct MetricsSink {
    out: Option<(BufWriter<File>, std::path::PathBuf)>,
    last_step: Option<(Stage, usize)>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsSink {
    pub fn memory() -> MetricsSink {
        MetricsSink {
            out: None,
            last_step: None,
            records: Vec::new(),
        }
    }

    pub fn file(path: &Path) -> Result<MetricsSink> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsSink {
            out: Some((BufWriter::new(f), path.to_path_buf())),
            last_step: None,
            records: Vec::new(),
        })
    }

    pub fn log(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some((stage, step)) = self.last_step {
            if stage == rec.stage && rec.step <= step {
                return Err(Error::validation(format!("metrics step {} is not after {step}", rec.step)));
            }
        }
        if let Some((w, path)) = &mut self.out {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        self.last_step = Some((rec.stage, rec.step));
        self.records.push(rec);
        Ok(())
    }
}

/// Greedy pass@1 on hidden tests over `problems`.
pub fn greedy_pass_rate(model: &QModel, problems: &[Problem]) -> Result<f64> {
    if problems.is_empty() {
        return Ok(0.0);
    }
    let passed: Vec<bool> = problems
        .par_iter()
        .map(|p| Ok(p.passes_hidden(&greedy_decode(model, p)?)))
        .collect::<Result<_>>()?;
    Ok(passed.iter().filter(|&&b| b).count() as f64 / problems.len() as f64)
}

pub(crate) fn prompts_by_id(problems: &[Problem]) -> Result<HashMap<String, Vec<usize>>> {
    problems
        .iter()
        .map(|p| Ok((p.id.clone(), p.prompt()?.iter().map(|t| t.id()).collect())))
        .collect()
}

/// Refuses a dataset that was not built from `ckpt`.
pub fn check_dataset_chain(ckpt: &Checkpoint, dataset: &crate::corpus::Dataset) -> Result<()> {
    let hash = ckpt.content_hash()?;
    if dataset.manifest.checkpoint_hash != hash {
        return Err(Error::validation(format!(
            "dataset was built from checkpoint {}, not the given one ({hash})",
            dataset.manifest.checkpoint_hash
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(stage: Stage, step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{stage} loss became {value} at step {step}")))
    }
}

/// Everything a stage run produces.
#[derive(Clone, Debug)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub structure: StructureReport,
    pub steps_run: usize,
}

pub(crate) struct Clock(Instant);

impl Clock {
    pub fn start() -> Clock {
        Clock(Instant::now())
    }

    pub fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

pub(crate) struct Updater {
    opt: crate::neural::AdamW,
    cfg: StageConfig,
}

impl Updater {
    pub fn new(cfg: &StageConfig, params: &crate::neural::Params, stage: Stage) -> Result<Updater> {
        let trainable = params.names().filter(|n| stage.trains_param(n)).cloned().collect();
        Ok(Updater {
            opt: crate::neural::AdamW::new(Default::default(), params, trainable)?,
            cfg: cfg.clone(),
        })
    }

    /// Clips, applies one AdamW step and rounds the weights back to `f32`.
    /// Returns the pre-clip gradient norm and the learning rate used.
    pub fn apply(
        &mut self,
        params: &mut crate::neural::Params,
        mut grads: crate::neural::Gradients,
        step: usize,
    ) -> Result<(f64, f64)> {
        let norm = match self.cfg.max_grad_norm {
            Some(c) => crate::neural::optim::clip_grad_norm(&mut grads, c),
            None => crate::neural::optim::grad_norm(&grads),
        };
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm became {norm} at step {step}")));
        }
        let lr = self.cfg.schedule.at(self.cfg.lr, step, self.cfg.steps);
        self.opt.step(params, &grads, lr, self.cfg.weight_decay)?;
        params.round_to_f32();
        Ok((norm, lr))
    }
}

/// Stops when the loss's moving average over `window` steps improves by
/// less than `tol` from one window to the next.
pub(crate) struct Plateau {
    window: usize,
    tol: f64,
    acc: f64,
    n: usize,
    prev: Option<f64>,
}

impl Plateau {
    pub fn new(window: usize, tol: f64) -> Plateau {
        Plateau { window, tol, acc: 0.0, n: 0, prev: None }
    }

    pub fn push(&mut self, loss: f64) -> bool {
        if self.window == 0 {
            return false;
        }
        self.acc += loss;
        self.n += 1;
        if self.n < self.window {
            return false;
        }
        let mean = self.acc / self.n as f64;
        self.acc = 0.0;
        self.n = 0;
        let stop = self.prev.is_some_and(|p| p - mean < self.tol);
        self.prev = Some(mean);
        stop
    }
}
