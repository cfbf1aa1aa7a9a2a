use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::items::{theta_losses, ThetaItem, ThetaLossConfig};
use super::{
    check_dataset_chain,
    check_finite, greedy_pass_rate, prompts_by_id, Clock, MetricsRecord, MetricsSink, StageConfig, StageResult,
    Updater,
};
use crate::corpus::{sample_minibatch, Dataset, Problem};
use crate::error::{Error, Result};
use crate::neural::{Checkpoint, CheckpointMeta, Graph, Network, Stage};
use crate::qcore::{LossBundle, QModel, StructureReport, POLICY_PREFIX, REFERENCE_PREFIX};

#[derive(Clone, Debug)]
pub struct ThetaRun {
    pub result: StageResult,
    /// Losses of the first step, before any update.
    pub initial: LossBundle,
    pub probes: Vec<(usize, f64)>,
}

pub fn theta_checkpoint(meta: CheckpointMeta, policy: &Network, reference: &Network) -> Checkpoint {
    let mut tensors = std::collections::BTreeMap::new();
    for (prefix, net) in [(POLICY_PREFIX, policy), (REFERENCE_PREFIX, reference)] {
        for (k, v) in net.params.iter() {
            tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }
    Checkpoint { meta, tensors }
}

/// The network whose φ head and logits the θ stage starts from and
/// bootstraps against.
pub fn theta_reference(ckpt: &Checkpoint, phi: Option<&Checkpoint>, use_phi_init: bool) -> Result<Network> {
    ckpt.require_stage(Stage::Ckpt)?;
    match (use_phi_init, phi) {
        (true, Some(p)) => {
            p.require_stage(Stage::Phi)?;
            p.network("")
        }
        (true, None) => Err(Error::config("use_phi_init needs a phi checkpoint")),
        (false, _) => ckpt.network(""),
    }
}

pub(crate) fn loss_config(cfg: &StageConfig) -> ThetaLossConfig {
    ThetaLossConfig {
        alpha: cfg.alpha,
        gamma: cfg.gamma,
        beta_adv: cfg.beta_adv,
        beta_ce: cfg.beta_ce,
        conservative: cfg.use_conservative_operator,
    }
}

/// Fine-tunes the trunk, logits head and `h1` on
/// `L_Q + β_adv L_adv + β_ce L_ce`, with `h2` and the reference frozen.
pub fn run_theta_stage(
    ckpt: &Checkpoint,
    phi: Option<&Checkpoint>,
    dataset: &Dataset,
    problems: &[Problem],
    cfg: &StageConfig,
    sink: &mut MetricsSink,
) -> Result<ThetaRun> {
    cfg.validate(Stage::Theta)?;
    check_dataset_chain(ckpt, dataset)?;
    if let (true, Some(p)) = (cfg.use_phi_init, phi) {
        let want = ckpt.content_hash()?;
        match p.meta.notes.get("dataset_checkpoint_hash").and_then(|v| v.as_str()) {
            Some(h) if h == want => {}
            other => {
                return Err(Error::validation(format!(
                    "phi checkpoint was trained against checkpoint {}, not the given one ({want})",
                    other.unwrap_or("<unknown>")
                )))
            }
        }
    }
    let reference = theta_reference(ckpt, phi, cfg.use_phi_init)?;
    let mut policy = reference.clone();
    let items = ThetaItem::from_records(&reference, &prompts_by_id(problems)?, &dataset.records)?;
    let probe_set = &problems[..cfg.probe_problems.min(problems.len())];
    let lcfg = loss_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut upd = Updater::new(cfg, &policy.params, Stage::Theta)?;
    let mut structure = StructureReport::default();
    let mut probes = Vec::new();
    let mut initial = LossBundle::default();
    let clock = Clock::start();
    for step in 0..cfg.steps {
        let idx = sample_minibatch(dataset, cfg.batch_size, cfg.rho_real, cfg.sample_with_replacement, &mut rng)?;
        let batch: Vec<&ThetaItem> = idx.iter().map(|&i| &items[i]).collect();
        let mut g = Graph::new();
        let l = theta_losses(&mut g, &policy, &batch, lcfg);
        let losses = LossBundle {
            l_ce: g.value(l.l_ce).item(),
            l_adv: g.value(l.l_adv).item(),
            l_v: 0.0,
            l_q: g.value(l.l_q).item(),
            l_ft: g.value(l.l_ft).item(),
        };
        check_finite(Stage::Theta, step, losses.l_ft)?;
        if step == 0 {
            initial = losses;
        }
        structure.merge(&l.structure);
        let grads = g.backward(l.l_ft)?;
        let (grad_norm, lr) = upd.apply(&mut policy.params, grads, step)?;
        let done = step + 1;
        let pass = if done % cfg.probe_every == 0 || done == cfg.steps {
            let model = QModel::Theta { policy: policy.clone(), reference: reference.clone(), alpha: cfg.alpha };
            let p = greedy_pass_rate(&model, probe_set)?;
            probes.push((done, p));
            Some(p)
        } else {
            None
        };
        if step % cfg.log_every == 0 || pass.is_some() {
            sink.log(MetricsRecord {
                stage: Stage::Theta,
                step,
                losses,
                grad_norm,
                lr,
                probe_pass1: pass,
                structure: l.structure,
                wall_time_s: clock.secs(),
            })?;
        }
    }
    let mut meta = CheckpointMeta::new(Stage::Theta, cfg.steps as u64, policy.config.clone());
    meta.alpha = cfg.alpha;
    meta.notes.insert("use_conservative_operator".into(), cfg.use_conservative_operator.into());
    meta.notes.insert("use_phi_init".into(), cfg.use_phi_init.into());
    Ok(ThetaRun {
        result: StageResult {
            checkpoint: theta_checkpoint(meta, &policy, &reference),
            metrics: sink.records.clone(),
            structure,
            steps_run: cfg.steps,
        },
        initial,
        probes,
    })
}
