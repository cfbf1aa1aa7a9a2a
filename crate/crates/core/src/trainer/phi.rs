use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::items::{phi_loss, PhiItem};
use super::{check_dataset_chain, check_finite, prompts_by_id, Clock, MetricsRecord, MetricsSink, Plateau, StageConfig, StageResult, Updater};
use crate::corpus::{sample_minibatch, Dataset, Problem};
use crate::error::Result;
use crate::neural::{Checkpoint, CheckpointMeta, Graph, Stage};
use crate::qcore::{LossBundle, StructureReport};

#[derive(Clone, Debug)]
pub struct PhiRun {
    pub result: StageResult,
    pub early_stopped: bool,
    /// `L_V` of the last step.
    pub final_loss: f64,
}

/// Fits only the φ head by TD regression with conservative targets. The
/// trunk and logits are the frozen checkpoint, so their contribution is
/// computed once per record.
pub fn run_phi_stage(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    problems: &[Problem],
    cfg: &StageConfig,
    sink: &mut MetricsSink,
) -> Result<PhiRun> {
    cfg.validate(Stage::Phi)?;
    ckpt.require_stage(Stage::Ckpt)?;
    check_dataset_chain(ckpt, dataset)?;
    let mut net = ckpt.network("")?;
    let items = PhiItem::from_records(&net, &prompts_by_id(problems)?, &dataset.records, cfg.alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut upd = Updater::new(cfg, &net.params, Stage::Phi)?;
    let mut plateau = Plateau::new(cfg.early_stop_window, cfg.early_stop_tol);
    let mut structure = StructureReport::default();
    let clock = Clock::start();
    let (mut steps_run, mut final_loss, mut early_stopped) = (0, f64::NAN, false);
    for step in 0..cfg.steps {
        let idx = sample_minibatch(dataset, cfg.batch_size, cfg.rho_real, cfg.sample_with_replacement, &mut rng)?;
        let batch: Vec<&PhiItem> = idx.iter().map(|&i| &items[i]).collect();
        let mut g = Graph::new();
        let (loss, rep) = phi_loss(&mut g, &net, &batch, cfg.gamma);
        let l_v = g.value(loss).item();
        check_finite(Stage::Phi, step, l_v)?;
        structure.merge(&rep);
        let grads = g.backward(loss)?;
        let (grad_norm, lr) = upd.apply(&mut net.params, grads, step)?;
        steps_run = step + 1;
        final_loss = l_v;
        early_stopped = plateau.push(l_v);
        if step % cfg.log_every == 0 || early_stopped || steps_run == cfg.steps {
            sink.log(MetricsRecord {
                stage: Stage::Phi,
                step,
                losses: LossBundle { l_v, ..Default::default() },
                grad_norm,
                lr,
                probe_pass1: None,
                structure: rep,
                wall_time_s: clock.secs(),
            })?;
        }
        if early_stopped {
            break;
        }
    }
    let mut meta = CheckpointMeta::new(Stage::Phi, steps_run as u64, net.config.clone());
    meta.alpha = cfg.alpha;
    meta.notes.insert("dataset_checkpoint_hash".into(), dataset.manifest.checkpoint_hash.clone().into());
    Ok(PhiRun {
        result: StageResult {
            checkpoint: Checkpoint::from_network(meta, &net),
            metrics: sink.records.clone(),
            structure,
            steps_run,
        },
        early_stopped,
        final_loss,
    })
}
