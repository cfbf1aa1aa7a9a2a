//! Per-trajectory training inputs and the loss graphs built from them.

use std::collections::HashMap;

use crate::corpus::{Source, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::neural::tape::{Graph, Var};
use crate::neural::tensor::{argmax, softmax_row, Tensor};
use crate::neural::{Network, Stage};
use crate::stacklang::Token;
use crate::qcore::{
    add_all, adv_sum, advantage_from_logits, ce_sum, conservative_target, graph_advantage, graph_cap,
    td_sum, StructureReport,
};

/// Model input for a trajectory: the prompt followed by every action but the
/// last, so that rows `prompt_len - 1 ..` are the states `s_0 .. s_{n-1}`.
pub(crate) fn sequence_ids(prompt: &[usize], actions: &[usize]) -> Vec<usize> {
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&actions[..actions.len() - 1]);
    ids
}

fn tokens_of(ids: &[usize]) -> Result<Vec<Token>> {
    ids.iter().map(|&i| Token::new(i)).collect()
}

fn prompt_for<'a>(prompts: &'a HashMap<String, Vec<usize>>, rec: &TrajectoryRecord) -> Result<&'a Vec<usize>> {
    prompts
        .get(&rec.problem_id)
        .ok_or_else(|| Error::validation(format!("dataset references unknown problem {}", rec.problem_id)))
}

#[derive(Clone, Debug)]
pub struct CeItem {
    pub ids: Vec<usize>,
    pub prompt_len: usize,
    pub actions: Vec<usize>,
}

impl CeItem {
    pub fn new(prompt: &[usize], actions: Vec<usize>) -> CeItem {
        CeItem {
            ids: sequence_ids(prompt, &actions),
            prompt_len: prompt.len(),
            actions,
        }
    }
}

/// φ-stage inputs with everything the frozen checkpoint contributes
/// precomputed: final features, advantages and conservative targets.
#[derive(Clone, Debug)]
pub struct PhiItem {
    pub hidden: Tensor,
    pub advantage: Tensor,
    pub boot: Vec<usize>,
    pub actions: Vec<usize>,
    pub reward: f64,
}

impl PhiItem {
    pub fn new(ckpt: &Network, prompt: &[usize], rec: &TrajectoryRecord, alpha: f64) -> Result<PhiItem> {
        let actions = rec.action_ids();
        let n = actions.len();
        let ids = sequence_ids(prompt, &actions);
        let out = ckpt.forward(&tokens_of(&ids)?)?;
        let first = prompt.len() - 1;
        let d = out.hidden.cols;
        let hidden = Tensor::from_vec(n, d, out.hidden.data[first * d..(first + n) * d].to_vec());
        let mut advantage = Tensor::zeros(n, out.logits.cols);
        let mut boot = Vec::with_capacity(n);
        for t in 0..n {
            let row = out.logits.row(first + t);
            advantage.row_mut(t).copy_from_slice(&advantage_from_logits(row, alpha));
            boot.push(conservative_target(&softmax_row(row)));
        }
        Ok(PhiItem {
            hidden,
            advantage,
            boot,
            actions,
            reward: rec.outcome.reward,
        })
    }

    pub fn from_records(
        ckpt: &Network,
        prompts: &HashMap<String, Vec<usize>>,
        records: &[TrajectoryRecord],
        alpha: f64,
    ) -> Result<Vec<PhiItem>> {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|r| PhiItem::new(ckpt, prompt_for(prompts, r)?, r, alpha))
            .collect()
    }
}

/// θ-stage inputs; the frozen reference contributes raw `φ` values and the
/// conservative targets.
#[derive(Clone, Debug)]
pub struct ThetaItem {
    pub ids: Vec<usize>,
    pub prompt_len: usize,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub ground_truth: bool,
    pub raw_phi: Vec<f64>,
    pub boot: Vec<usize>,
}

impl ThetaItem {
    pub fn new(reference: &Network, prompt: &[usize], rec: &TrajectoryRecord) -> Result<ThetaItem> {
        let actions = rec.action_ids();
        let n = actions.len();
        let ids = sequence_ids(prompt, &actions);
        let out = reference.forward(&tokens_of(&ids)?)?;
        let first = prompt.len() - 1;
        let boot = (0..n).map(|t| conservative_target(&softmax_row(out.logits.row(first + t)))).collect();
        Ok(ThetaItem {
            prompt_len: prompt.len(),
            raw_phi: out.v_phi[first..first + n].to_vec(),
            ids,
            actions,
            reward: rec.outcome.reward,
            ground_truth: rec.source == Source::GroundTruth,
            boot,
        })
    }

    pub fn from_records(
        reference: &Network,
        prompts: &HashMap<String, Vec<usize>>,
        records: &[TrajectoryRecord],
    ) -> Result<Vec<ThetaItem>> {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|r| ThetaItem::new(reference, prompt_for(prompts, r)?, r))
            .collect()
    }
}

fn observe_rows(g: &Graph, rep: &mut StructureReport, adv: Var, v: Var, q: Var) {
    let (a, v, q) = (g.value(adv), g.value(v), g.value(q));
    for r in 0..a.rows {
        rep.observe(a.row(r), v.data[r], q.row(r));
    }
}

/// Mean over trajectories of `(1/n) Σ_t δ_t²` for `Q_φ = A_ckpt + V_φ`, with
/// only the φ head on the tape.
pub fn phi_loss(g: &mut Graph, net: &Network, items: &[&PhiItem], gamma: f64) -> (Var, StructureReport) {
    let is_phi = |n: &str| n.starts_with("head.phi");
    let b = net.bind_filtered(g, "", is_phi, is_phi);
    let mut rep = StructureReport::default();
    let mut terms = Vec::with_capacity(items.len());
    for it in items {
        let h = g.constant(it.hidden.clone());
        let raw = net.head(g, &b, h, "phi");
        let v = graph_cap(g, raw);
        let a = g.constant(it.advantage.clone());
        let q = g.add_col(a, v);
        observe_rows(g, &mut rep, a, v, q);
        let td = td_sum(g, q, &it.actions, &it.boot, it.reward, gamma);
        terms.push(g.scale(td, 1.0 / it.actions.len() as f64));
    }
    let total = add_all(g, &terms).expect("non-empty batch");
    (g.scale(total, 1.0 / items.len() as f64), rep)
}

/// Mean next-token cross-entropy over program positions.
pub(crate) fn ce_loss(g: &mut Graph, net: &Network, items: &[&CeItem]) -> (Var, usize) {
    let b = net.bind_filtered(g, "", |n| !n.starts_with("head.") || n.starts_with("head.logits"), |n| {
        Stage::Ckpt.trains_param(n)
    });
    let mut terms = Vec::with_capacity(items.len());
    let mut positions = 0;
    let mut floored = 0;
    for it in items {
        let n = it.actions.len();
        let h = net.trunk(g, &b, &it.ids);
        let hs = g.slice_rows(h, it.prompt_len - 1, n);
        let logits = net.head(g, &b, hs, "logits");
        let (ce, f) = ce_sum(g, logits, &it.actions, 1.0);
        terms.push(ce);
        positions += n;
        floored += f;
    }
    let total = add_all(g, &terms).expect("non-empty batch");
    (g.scale(total, 1.0 / positions as f64), floored)
}

#[derive(Clone, Copy, Debug)]
pub struct ThetaLossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta_adv: f64,
    pub beta_ce: f64,
    pub conservative: bool,
}

pub struct ThetaLosses {
    pub l_q: Var,
    pub l_adv: Var,
    pub l_ce: Var,
    pub l_ft: Var,
    pub structure: StructureReport,
    pub ce_floored: usize,
    /// Bootstrap actions used for every item, for target logging.
    pub boot: Vec<Vec<usize>>,
}

/// `L_Q` over the whole batch and `L_adv`, `L_ce` over its ground-truth part,
/// for `Q_θ = α(ℓ_θ − max ℓ_θ) + cap(raw_φ + h1 − h2)`.
pub fn theta_losses(g: &mut Graph, net: &Network, items: &[&ThetaItem], cfg: ThetaLossConfig) -> ThetaLosses {
    let b = net.bind_filtered(g, "", |n| !n.starts_with("head.phi"), |n| Stage::Theta.trains_param(n));
    let mut rep = StructureReport::default();
    let mut td_terms = Vec::with_capacity(items.len());
    let mut adv_terms = Vec::new();
    let mut ce_terms = Vec::new();
    let mut gt_positions = 0;
    let mut floored = 0;
    let mut boots = Vec::with_capacity(items.len());
    for it in items {
        let n = it.actions.len();
        let h = net.trunk(g, &b, &it.ids);
        let hs = g.slice_rows(h, it.prompt_len - 1, n);
        let logits = net.head(g, &b, hs, "logits");
        let h1 = net.head(g, &b, hs, "h1");
        let h2 = net.head(g, &b, hs, "h2");
        let res = g.sub(h1, h2);
        let raw_phi = g.constant(Tensor::column(it.raw_phi.clone()));
        let raw = g.add(raw_phi, res);
        let v = graph_cap(g, raw);
        let a = graph_advantage(g, logits, cfg.alpha);
        let q = g.add_col(a, v);
        observe_rows(g, &mut rep, a, v, q);
        let boot = if cfg.conservative {
            it.boot.clone()
        } else {
            let qv = g.value(q);
            (0..n).map(|r| argmax(qv.row(r))).collect()
        };
        let td = td_sum(g, q, &it.actions, &boot, it.reward, cfg.gamma);
        td_terms.push(g.scale(td, 1.0 / n as f64));
        boots.push(boot);
        if it.ground_truth {
            adv_terms.push(adv_sum(g, a, &it.actions));
            let (ce, f) = ce_sum(g, q, &it.actions, cfg.alpha);
            ce_terms.push(ce);
            gt_positions += n;
            floored += f;
        }
    }
    let total = add_all(g, &td_terms).expect("non-empty batch");
    let l_q = g.scale(total, 1.0 / items.len() as f64);
    let (l_adv, l_ce) = match (add_all(g, &adv_terms), add_all(g, &ce_terms)) {
        (Some(adv), Some(ce)) => (
            g.scale(adv, 1.0 / adv_terms.len() as f64),
            g.scale(ce, 1.0 / gt_positions as f64),
        ),
        _ => {
            let z = g.constant(Tensor::scalar(0.0));
            (z, z)
        }
    };
    let wa = g.scale(l_adv, cfg.beta_adv);
    let wc = g.scale(l_ce, cfg.beta_ce);
    let l_ft = add_all(g, &[l_q, wa, wc]).expect("three terms");
    ThetaLosses {
        l_q,
        l_adv,
        l_ce,
        l_ft,
        structure: rep,
        ce_floored: floored,
        boot: boots,
    }
}
