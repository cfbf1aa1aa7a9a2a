use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::items::{ce_loss, CeItem};
use super::{check_finite, greedy_pass_rate, Clock, MetricsRecord, MetricsSink, StageConfig, StageResult, Updater};
use crate::corpus::{ground_truth, Problem, DEFAULT_GT_CAP};
use crate::error::{Error, Result};
use crate::neural::{init_model, Checkpoint, CheckpointMeta, Graph, Stage};
use crate::qcore::{LossBundle, QModel, StructureReport};

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub result: StageResult,
    /// `(step, greedy pass@1)` for every probe.
    pub probes: Vec<(usize, f64)>,
    pub floor_reached: bool,
}

fn probe(net: &crate::neural::Network, alpha: f64, problems: &[Problem]) -> Result<f64> {
    let model = QModel::Single { stage: Stage::Ckpt, net: net.clone(), alpha };
    greedy_pass_rate(&model, problems)
}

/// Fits a fresh base model with next-token cross-entropy on ground-truth
/// programs, probing greedy pass@1 on the first training problems. Stops
/// early once the probe reaches `cfg.pass_floor`.
pub fn pretrain_ckpt(problems: &[Problem], cfg: &StageConfig, sink: &mut MetricsSink) -> Result<PretrainRun> {
    cfg.validate(Stage::Ckpt)?;
    if problems.is_empty() {
        return Err(Error::config("pre-training needs at least one problem"));
    }
    let per_problem: Vec<Vec<CeItem>> = problems
        .par_iter()
        .map(|p| {
            let prompt: Vec<usize> = p.prompt()?.iter().map(|t| t.id()).collect();
            Ok(ground_truth(p, DEFAULT_GT_CAP)?
                .into_iter()
                .map(|prog| CeItem::new(&prompt, prog.tokens.iter().map(|t| t.id()).collect()))
                .collect())
        })
        .collect::<Result<_>>()?;
    let items: Vec<CeItem> = per_problem.into_iter().flatten().collect();
    let probe_set = &problems[..cfg.probe_problems.min(problems.len())];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = init_model(&cfg.model, &mut rng)?;
    let mut upd = Updater::new(cfg, &net.params, Stage::Ckpt)?;
    let clock = Clock::start();
    let mut probes = Vec::new();
    let mut floor_reached = false;
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let batch: Vec<&CeItem> = (0..cfg.batch_size).map(|_| &items[rng.gen_range(0..items.len())]).collect();
        let mut g = Graph::new();
        let (loss, _) = ce_loss(&mut g, &net, &batch);
        let l_ce = g.value(loss).item();
        check_finite(Stage::Ckpt, step, l_ce)?;
        let grads = g.backward(loss)?;
        let (grad_norm, lr) = upd.apply(&mut net.params, grads, step)?;
        steps_run = step + 1;
        let probe_now = steps_run % cfg.probe_every == 0 || steps_run == cfg.steps;
        let pass = if probe_now { Some(probe(&net, cfg.alpha, probe_set)?) } else { None };
        if let Some(p) = pass {
            probes.push((steps_run, p));
            floor_reached |= p >= cfg.pass_floor;
        }
        if step % cfg.log_every == 0 || pass.is_some() {
            sink.log(MetricsRecord {
                stage: Stage::Ckpt,
                step,
                losses: LossBundle { l_ce, ..Default::default() },
                grad_norm,
                lr,
                probe_pass1: pass,
                structure: StructureReport::default(),
                wall_time_s: clock.secs(),
            })?;
        }
        if floor_reached {
            break;
        }
    }
    let mut meta = CheckpointMeta::new(Stage::Ckpt, steps_run as u64, cfg.model.clone());
    meta.alpha = cfg.alpha;
    meta.floor_reached = Some(floor_reached);
    if !floor_reached {
        let best = probes.iter().map(|p| p.1).fold(0.0, f64::max);
        let msg = format!(
            "probe pass@1 never reached {} within {} steps (best {best:.3})",
            cfg.pass_floor, cfg.steps
        );
        log::warn!("{msg}");
        meta.warnings.push(msg);
    }
    Ok(PretrainRun {
        result: StageResult {
            checkpoint: Checkpoint::from_network(meta, &net),
            metrics: sink.records.clone(),
            structure: StructureReport::default(),
            steps_run,
        },
        probes,
        floor_reached,
    })
}
