//! Central finite-difference check of every training loss against the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::items::{ce_loss, phi_loss, theta_losses, CeItem, PhiItem, ThetaItem};
use super::theta::loss_config;
use super::{
    prompts_by_id, run_phi_stage, run_theta_stage, pretrain_ckpt, Clock, MetricsSink, StageConfig,
};
use crate::corpus::{build_dataset, generate_problems, sample_minibatch, DatasetConfig, Problem};
use crate::error::{Error, Result};
use crate::neural::{init_model, Checkpoint, CheckpointMeta, Gradients, Graph, ModelConfig, Network, Stage, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub problems: usize,
    pub m_gen: usize,
    pub batch_size: usize,
    /// Training steps per stage before the second round of checks.
    pub train_steps: usize,
    pub step: f64,
    /// Step for the base-model cross-entropy, whose embedding coordinates sit
    /// close to the curvature scale of the first layer norm.
    pub ckpt_step: f64,
    pub tolerance: f64,
    /// Smallest denominator of the relative error.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                embed_dim: 8,
                mlp_dim: 8,
                n_blocks: 2,
                ..ModelConfig::default()
            },
            problems: 8,
            m_gen: 2,
            batch_size: 6,
            train_steps: 100,
            step: 1e-4,
            ckpt_step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: String,
    pub phase: String,
    pub step: f64,
    pub coordinates: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    /// Analytic and finite-difference values at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub checks: Vec<LossCheck>,
    pub passed: bool,
    pub wall_time_s: f64,
}

/// Evaluates several losses from one forward pass, plus a fingerprint of the
/// discrete choices made along the way and the stop-gradient values. The
/// second argument replays stop-gradient values from an earlier evaluation,
/// which turns a TD loss into the objective its semi-gradient differentiates.
type Eval<'a> = dyn Fn(&Network, &[Tensor]) -> (Vec<f64>, u64, Vec<Tensor>) + 'a;
type Grad<'a> = dyn Fn(&Network) -> Result<Vec<Gradients>> + 'a;

struct Worst {
    err: f64,
    at: Option<(String, usize)>,
    values: Option<(f64, f64)>,
    kinks: usize,
    coords: usize,
}

fn check_losses(
    net: &Network,
    stage: Stage,
    names: &[&str],
    phase: &str,
    eval: &Eval,
    grad: &Grad,
    step: f64,
    cfg: &GradcheckConfig,
) -> Result<Vec<LossCheck>> {
    let analytic = grad(net)?;
    let (_, sig0, frozen) = eval(net, &[]);
    let mut worst: Vec<Worst> = names.iter().map(|_| Worst { err: 0.0, at: None, values: None, kinks: 0, coords: 0 }).collect();
    let mut probe = net.clone();
    let trainable: Vec<String> = net.params.names().filter(|n| stage.trains_param(n)).cloned().collect();
    for name in &trainable {
        let len = net.params.get(name)?.len();
        for i in 0..len {
            let w = net.params.get(name)?.data[i];
            probe.params.get_mut(name)?.data[i] = w + step;
            let (up, sig_up, _) = eval(&probe, &frozen);
            probe.params.get_mut(name)?.data[i] = w - step;
            let (down, sig_down, _) = eval(&probe, &frozen);
            probe.params.get_mut(name)?.data[i] = w;
            let kink = sig_up != sig0 || sig_down != sig0;
            for (k, wst) in worst.iter_mut().enumerate() {
                wst.coords += 1;
                if kink {
                    wst.kinks += 1;
                    continue;
                }
                let fd = (up[k] - down[k]) / (2.0 * step);
                let an = analytic[k].get(name).map_or(0.0, |g| g.data[i]);
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(cfg.denom_floor);
                if err > wst.err || !err.is_finite() {
                    wst.err = if err.is_finite() { err } else { f64::INFINITY };
                    wst.at = Some((name.clone(), i));
                    wst.values = Some((an, fd));
                }
            }
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| LossCheck {
            loss: n.to_string(),
            phase: phase.to_string(),
            step,
            coordinates: w.coords,
            kinks: w.kinks,
            max_rel_err: w.err,
            worst: w.at,
            worst_values: w.values,
            passed: w.err < cfg.tolerance && w.kinks < w.coords,
        })
        .collect())
}

struct Fixture {
    ce: Vec<CeItem>,
    phi: Vec<PhiItem>,
    theta: Vec<ThetaItem>,
}

fn fixture(
    problems: &[Problem],
    ckpt: &Network,
    reference: &Network,
    batch: &[usize],
    records: &[crate::corpus::TrajectoryRecord],
    alpha: f64,
) -> Result<Fixture> {
    let prompts = prompts_by_id(problems)?;
    let chosen: Vec<_> = batch.iter().map(|&i| records[i].clone()).collect();
    let ce = chosen
        .iter()
        .map(|r| CeItem::new(&prompts[&r.problem_id], r.action_ids()))
        .collect();
    Ok(Fixture {
        ce,
        phi: PhiItem::from_records(ckpt, &prompts, &chosen, alpha)?,
        theta: ThetaItem::from_records(reference, &prompts, &chosen)?,
    })
}

fn run_all(
    fx: &Fixture,
    ckpt: &Network,
    phi: &Network,
    policy: &Network,
    stage_cfg: &StageConfig,
    phase: &str,
    cfg: &GradcheckConfig,
) -> Result<Vec<LossCheck>> {
    let mut out = Vec::new();
    let ce: Vec<&CeItem> = fx.ce.iter().collect();
    let ce_eval = |n: &Network, f: &[Tensor]| {
        let mut g = Graph::with_frozen(f.to_vec());
        let (l, _) = ce_loss(&mut g, n, &ce);
        (vec![g.value(l).item()], g.branch_signature(), g.stop_grad_values())
    };
    let ce_grad = |n: &Network| {
        let mut g = Graph::new();
        let (l, _) = ce_loss(&mut g, n, &ce);
        Ok(vec![g.backward(l)?])
    };
    out.extend(check_losses(ckpt, Stage::Ckpt, &["ckpt_ce"], phase, &ce_eval, &ce_grad, cfg.ckpt_step, cfg)?);

    let pi: Vec<&PhiItem> = fx.phi.iter().collect();
    let gamma = stage_cfg.gamma;
    let v_eval = |n: &Network, f: &[Tensor]| {
        let mut g = Graph::with_frozen(f.to_vec());
        let (l, _) = phi_loss(&mut g, n, &pi, gamma);
        (vec![g.value(l).item()], g.branch_signature(), g.stop_grad_values())
    };
    let v_grad = |n: &Network| {
        let mut g = Graph::new();
        let (l, _) = phi_loss(&mut g, n, &pi, gamma);
        Ok(vec![g.backward(l)?])
    };
    out.extend(check_losses(phi, Stage::Phi, &["l_v"], phase, &v_eval, &v_grad, cfg.step, cfg)?);

    let ti: Vec<&ThetaItem> = fx.theta.iter().collect();
    let lcfg = loss_config(stage_cfg);
    let t_eval = |n: &Network, f: &[Tensor]| {
        let mut g = Graph::with_frozen(f.to_vec());
        let l = theta_losses(&mut g, n, &ti, lcfg);
        let vals = [l.l_q, l.l_adv, l.l_ce, l.l_ft].map(|v| g.value(v).item()).to_vec();
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (g.branch_signature(), &l.boot).hash(&mut h);
        (vals, h.finish(), g.stop_grad_values())
    };
    let t_grad = |n: &Network| {
        let mut g = Graph::new();
        let l = theta_losses(&mut g, n, &ti, lcfg);
        [l.l_q, l.l_adv, l.l_ce, l.l_ft].iter().map(|&v| g.backward(v)).collect()
    };
    out.extend(check_losses(
        policy,
        Stage::Theta,
        &["l_q", "l_adv", "l_ce", "l_ft"],
        phase,
        &t_eval,
        &t_grad,
        cfg.step,
        cfg,
    )?);
    Ok(out)
}

/// Checks the ckpt cross-entropy, `L_V`, `L_Q`, `L_adv`, `L_ce` and `L_ft` at
/// initialization and again after `train_steps` steps of every stage.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0 && cfg.ckpt_step > 0.0) || !(cfg.tolerance > 0.0) || cfg.batch_size == 0 {
        return Err(Error::config("gradcheck step, tolerance and batch size must be positive"));
    }
    let clock = Clock::start();
    let problems = generate_problems(cfg.seed, cfg.problems)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = init_model(&cfg.model, &mut rng)?;
    let base = |stage| {
        let mut s = StageConfig::for_stage(stage);
        s.model = cfg.model.clone();
        s.steps = cfg.train_steps;
        s.batch_size = cfg.batch_size;
        s.seed = cfg.seed;
        s.probe_every = cfg.train_steps.max(1);
        s.early_stop_window = 0;
        s
    };
    let ds_cfg = DatasetConfig {
        m_gen: cfg.m_gen,
        seed: cfg.seed,
        ..DatasetConfig::default()
    };
    let wrap = |net: &Network| Checkpoint::from_network(CheckpointMeta::new(Stage::Ckpt, 0, cfg.model.clone()), net);
    let dataset = build_dataset(&problems, &wrap(&init), &ds_cfg)?;
    let batch = sample_minibatch(&dataset, cfg.batch_size, 0.5, false, &mut rng)?;

    let theta_cfg = base(Stage::Theta);
    let fx = fixture(&problems, &init, &init, &batch, &dataset.records, theta_cfg.alpha)?;
    let mut checks = run_all(&fx, &init, &init, &init, &theta_cfg, "init", cfg)?;

    if cfg.train_steps > 0 {
        let mut sink = MetricsSink::memory();
        let ck = pretrain_ckpt(&problems, &base(Stage::Ckpt), &mut sink)?.result.checkpoint;
        let ckpt_net = ck.network("")?;
        let dataset = build_dataset(&problems, &ck, &ds_cfg)?;
        let phi_ck = run_phi_stage(&ck, &dataset, &problems, &base(Stage::Phi), &mut MetricsSink::memory())?
            .result
            .checkpoint;
        let theta_ck = run_theta_stage(&ck, Some(&phi_ck), &dataset, &problems, &theta_cfg, &mut MetricsSink::memory())?
            .result
            .checkpoint;
        let phi_net = phi_ck.network("")?;
        let policy = theta_ck.network(crate::qcore::POLICY_PREFIX)?;
        let fx = fixture(&problems, &ckpt_net, &phi_net, &batch, &dataset.records, theta_cfg.alpha)?;
        let phase = format!("after_{}", cfg.train_steps);
        checks.extend(run_all(&fx, &ckpt_net, &phi_net, &policy, &theta_cfg, &phase, cfg)?);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport {
        config: cfg.clone(),
        checks,
        passed,
        wall_time_s: clock.secs(),
    })
}
