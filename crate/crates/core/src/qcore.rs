//! The dueling Q-function built from language-model logits, its policy, the
//! conservative bootstrap target, and every training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::tape::{Graph, Var};
use crate::neural::tensor::{self, Tensor};
use crate::neural::{Checkpoint, Decoder, Network, Stage};
use crate::stacklang::Token;

pub const R_MAX: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA_ADV: f64 = 0.1;
pub const DEFAULT_BETA_CE: f64 = 0.5;
/// Probability floor inside the cross-entropy log.
pub const CE_FLOOR: f64 = 1e-30;

/// `α (ℓ − max ℓ)`: non-positive, with an exact zero at every maximizer.
pub fn advantage_from_logits(logits: &[f64], alpha: f64) -> Vec<f64> {
    let m = logits[tensor::argmax(logits)];
    logits.iter().map(|&l| alpha * (l - m)).collect()
}

/// `R_max − softabs(raw)`.
pub fn cap_value(raw: f64) -> f64 {
    R_MAX - tensor::softabs(raw)
}

pub fn compose_q(advantage: &[f64], v: f64) -> Vec<f64> {
    advantage.iter().map(|a| a + v).collect()
}

/// `softmax(Q / α)`.
pub fn policy_from_q(q: &[f64], alpha: f64) -> Vec<f64> {
    let scaled: Vec<f64> = q.iter().map(|v| v / alpha).collect();
    tensor::softmax_row(&scaled)
}

/// Bootstrap action of the conservative operator: the reference policy's
/// argmax, lowest index on ties.
pub fn conservative_target(p_ref: &[f64]) -> usize {
    tensor::argmax(p_ref)
}

/// Per-state dueling decomposition of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct QView {
    pub alpha: f64,
    pub logits: Tensor,
    pub advantage: Tensor,
    pub value: Vec<f64>,
    pub q: Tensor,
    /// Logits of the frozen reference network, which define `p_ckpt`.
    pub ref_logits: Tensor,
}

impl QView {
    fn build(alpha: f64, logits: Tensor, ref_logits: Tensor, raw_value: Vec<f64>) -> QView {
        let mut advantage = Tensor::zeros(logits.rows, logits.cols);
        let mut q = Tensor::zeros(logits.rows, logits.cols);
        let value: Vec<f64> = raw_value.into_iter().map(cap_value).collect();
        for r in 0..logits.rows {
            let a = advantage_from_logits(logits.row(r), alpha);
            q.row_mut(r).copy_from_slice(&compose_q(&a, value[r]));
            advantage.row_mut(r).copy_from_slice(&a);
        }
        QView {
            alpha,
            logits,
            advantage,
            value,
            q,
            ref_logits,
        }
    }

    pub fn rows(&self) -> usize {
        self.q.rows
    }

    pub fn p_ref(&self, r: usize) -> Vec<f64> {
        tensor::softmax_row(self.ref_logits.row(r))
    }

    pub fn policy(&self, r: usize) -> Vec<f64> {
        policy_from_q(self.q.row(r), self.alpha)
    }

    pub fn structure(&self) -> StructureReport {
        let mut rep = StructureReport::default();
        for r in 0..self.rows() {
            rep.observe(self.advantage.row(r), self.value[r], self.q.row(r));
        }
        rep
    }
}

/// Counts of violations of `max A = 0`, `A ≤ 0`, `V ≤ R_max`, `Q ≤ R_max`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    pub states: u64,
    pub max_advantage_nonzero: u64,
    pub positive_advantage: u64,
    pub value_above_cap: u64,
    pub q_above_cap: u64,
}

impl StructureReport {
    pub fn observe(&mut self, advantage: &[f64], v: f64, q: &[f64]) {
        self.states += 1;
        let amax = advantage.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if amax != 0.0 {
            self.max_advantage_nonzero += 1;
        }
        if advantage.iter().any(|&a| a > 0.0) {
            self.positive_advantage += 1;
        }
        if !(v <= R_MAX) {
            self.value_above_cap += 1;
        }
        if q.iter().any(|&x| !(x <= R_MAX)) {
            self.q_above_cap += 1;
        }
    }

    pub fn merge(&mut self, other: &StructureReport) {
        self.states += other.states;
        self.max_advantage_nonzero += other.max_advantage_nonzero;
        self.positive_advantage += other.positive_advantage;
        self.value_above_cap += other.value_above_cap;
        self.q_above_cap += other.q_above_cap;
    }

    pub fn violations(&self) -> u64 {
        self.max_advantage_nonzero + self.positive_advantage + self.value_above_cap + self.q_above_cap
    }
}

/// A model that can be decoded and scored. The ckpt and phi stages hold one
/// network; theta holds the fine-tuned policy next to the frozen reference
/// (ckpt trunk and logits plus the trained φ head).
#[derive(Clone, Debug)]
pub enum QModel {
    Single { stage: Stage, net: Network, alpha: f64 },
    Theta { policy: Network, reference: Network, alpha: f64 },
}

pub const POLICY_PREFIX: &str = "policy.";
pub const REFERENCE_PREFIX: &str = "reference.";

impl QModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<QModel> {
        let alpha = ck.meta.alpha;
        if !(alpha > 0.0) {
            return Err(Error::config("alpha must be positive"));
        }
        Ok(match ck.meta.stage {
            Stage::Theta => QModel::Theta {
                policy: ck.network(POLICY_PREFIX)?,
                reference: ck.network(REFERENCE_PREFIX)?,
                alpha,
            },
            stage => QModel::Single {
                stage,
                net: ck.network("")?,
                alpha,
            },
        })
    }

    pub fn stage(&self) -> Stage {
        match self {
            QModel::Single { stage, .. } => *stage,
            QModel::Theta { .. } => Stage::Theta,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            QModel::Single { alpha, .. } | QModel::Theta { alpha, .. } => *alpha,
        }
    }

    pub fn reference(&self) -> &Network {
        match self {
            QModel::Single { net, .. } => net,
            QModel::Theta { reference, .. } => reference,
        }
    }

    pub fn param_hash(&self) -> String {
        match self {
            QModel::Single { net, .. } => net.params.hash(),
            QModel::Theta { policy, reference, .. } => {
                format!("{}{}", policy.params.hash(), reference.params.hash())
            }
        }
    }

    /// Dueling view of every position of `tokens`.
    pub fn view(&self, tokens: &[Token]) -> Result<QView> {
        Ok(match self {
            QModel::Single { net, alpha, .. } => {
                let out = net.forward(tokens)?;
                QView::build(*alpha, out.logits.clone(), out.logits, out.v_phi)
            }
            QModel::Theta { policy, reference, alpha } => {
                let pol = policy.forward(tokens)?;
                let rf = reference.forward(tokens)?;
                let raw = residual_raw(&rf.v_phi, &pol.h1, &pol.h2);
                QView::build(*alpha, pol.logits, rf.logits, raw)
            }
        })
    }

    pub fn session(&self) -> Session<'_> {
        let (policy, reference) = match self {
            QModel::Single { net, .. } => (net.decoder(), None),
            QModel::Theta { policy, reference, .. } => (policy.decoder(), Some(reference.decoder())),
        };
        Session {
            model: self,
            policy,
            reference,
        }
    }
}

fn residual_raw(raw_phi: &[f64], h1: &[f64], h2: &[f64]) -> Vec<f64> {
    raw_phi
        .iter()
        .zip(h1.iter().zip(h2))
        .map(|(p, (a, b))| p + (a - b))
        .collect()
}

/// Per-position outputs of incremental decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct StepScores {
    pub logits: Vec<f64>,
    pub q: Vec<f64>,
    pub value: f64,
}

impl StepScores {
    /// Next-token scores used for decoding: logits for a ckpt model, `Q/α`
    /// otherwise.
    pub fn decode_scores(&self, stage: Stage, alpha: f64) -> Vec<f64> {
        match stage {
            Stage::Ckpt => self.logits.clone(),
            _ => self.q.iter().map(|q| q / alpha).collect(),
        }
    }
}

pub struct Session<'a> {
    model: &'a QModel,
    policy: Decoder<'a>,
    reference: Option<Decoder<'a>>,
}

impl Session<'_> {
    pub fn push(&mut self, token: Token) -> Result<StepScores> {
        let h = self.policy.step(token)?;
        let (net, raw) = match (self.model, &mut self.reference) {
            (QModel::Single { net, .. }, _) => (net, net.scalar_head(&h, "phi")?),
            (QModel::Theta { policy, reference, .. }, Some(dec)) => {
                let hr = dec.step(token)?;
                let phi = reference.scalar_head(&hr, "phi")?;
                let res = residual_raw(&[phi], &[policy.scalar_head(&h, "h1")?], &[policy.scalar_head(&h, "h2")?]);
                (policy, res[0])
            }
            _ => unreachable!("theta sessions always carry a reference decoder"),
        };
        let logits = net.logits_head(&h)?;
        let value = cap_value(raw);
        let q = compose_q(&advantage_from_logits(&logits, self.model.alpha()), value);
        Ok(StepScores { logits, q, value })
    }
}

// Graph-level loss pieces. Every function works on one trajectory whose state
// rows `0..n` are aligned with its actions `a_0..a_{n-1}`.

/// `α (ℓ − max ℓ)` on the tape.
pub fn graph_advantage(g: &mut Graph, logits: Var, alpha: f64) -> Var {
    let a = g.sub_row_max(logits);
    g.scale(a, alpha)
}

/// `R_max − softabs(raw)` on the tape.
pub fn graph_cap(g: &mut Graph, raw: Var) -> Var {
    let s = g.softabs(raw);
    let s = g.scale(s, -1.0);
    g.add_const(s, R_MAX)
}

/// Squared TD errors `Σ_t [r_t + γ SG(Q(s_{t+1}, â_{t+1})) − Q(s_t, a_t)]²`
/// with a zero bootstrap after the last action. `boot[t]` is the bootstrap
/// action chosen at state `t`.
pub fn td_sum(g: &mut Graph, q: Var, actions: &[usize], boot: &[usize], reward: f64, gamma: f64) -> Var {
    let n = actions.len();
    let qsa = g.pick(q, actions);
    let qb = g.pick(q, boot);
    let next = g.shift_up(qb);
    let next = g.stop_grad(next);
    let next = g.scale(next, gamma);
    let mut r = vec![0.0; n];
    r[n - 1] = reward;
    let r = g.constant(Tensor::column(r));
    let target = g.add(next, r);
    let delta = g.sub(target, qsa);
    let sq = g.square(delta);
    g.sum(sq)
}

/// `Σ_t |A(s_t, a_t)|`.
pub fn adv_sum(g: &mut Graph, advantage: Var, actions: &[usize]) -> Var {
    let a = g.pick(advantage, actions);
    let a = g.abs(a);
    g.sum(a)
}

/// `Σ_t −log softmax(scores / temperature)[a_t]`, with the probability floored
/// at [`CE_FLOOR`]. Returns the sum and the number of floored positions.
pub fn ce_sum(g: &mut Graph, scores: Var, actions: &[usize], temperature: f64) -> (Var, usize) {
    let s = g.scale(scores, 1.0 / temperature);
    let ls = g.log_softmax(s);
    let lp = g.pick(ls, actions);
    let floor = CE_FLOOR.ln();
    let floored = g.value(lp).data.iter().filter(|&&v| v < floor).count();
    let lp = g.clamp_min(lp, floor);
    let total = g.sum(lp);
    (g.scale(total, -1.0), floored)
}

pub fn add_all(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    let mut it = terms.iter();
    let mut acc = *it.next()?;
    for &t in it {
        acc = g.add(acc, t);
    }
    Some(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_adv: f64,
    pub beta_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_adv: DEFAULT_BETA_ADV,
            beta_ce: DEFAULT_BETA_CE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_adv: f64,
    pub l_v: f64,
    pub l_q: f64,
    pub l_ft: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(advantage_from_logits(&[1.0, 2.0, 3.0], 1.0), vec![-2.0, -1.0, 0.0]);
        assert_eq!(advantage_from_logits(&[5.0, 5.0], 2.0), vec![0.0, 0.0]);
    }

    #[test]
    fn cap_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cap_value(0.0) - (1.0 - 2.0 * ln2)).abs() < 1e-15);
        assert!((cap_value(0.0) + 0.386_294_361_119_890_6).abs() < 1e-12);
        assert_eq!(cap_value(2.5), cap_value(-2.5));
        assert!((cap_value(100.0) - (1.0 - (50.0 + ln2))).abs() < 1e-12);
    }

    #[test]
    fn compose_and_policy() {
        let q = compose_q(&[-2.0, -1.0, 0.0], 0.5);
        assert_eq!(q, vec![-1.5, -0.5, 0.5]);
        let p = policy_from_q(&[0.3, 0.3, 0.3], 1.0);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = policy_from_q(&[0.1, -0.4, 2.0], 0.7);
        let b = policy_from_q(&[5.1, 4.6, 7.0], 0.7);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conservative_target_rules() {
        assert_eq!(conservative_target(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(conservative_target(&[0.25; 4]), 0);
    }

    #[test]
    fn terminal_only_td() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_vec(1, 3, vec![-0.2, -0.5, -0.1]));
        let l = td_sum(&mut g, q, &[2], &[0], -0.3, 0.999);
        assert!((g.value(l).item() - (-0.3f64 + 0.1).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn td_with_zero_gamma_is_regression() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_vec(2, 2, vec![-0.2, -0.5, -0.1, -0.7]));
        let l = td_sum(&mut g, q, &[1, 0], &[0, 0], 1.0, 0.0);
        let want = 0.5f64.powi(2) + (1.0f64 + 0.1).powi(2);
        assert!((g.value(l).item() - want).abs() < 1e-15);
    }

    #[test]
    fn ce_of_uniform_rows() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(3, 18));
        let (l, floored) = ce_sum(&mut g, s, &[0, 4, 17], 1.0);
        assert_eq!(floored, 0);
        assert!((g.value(l).item() / 3.0 - 18f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adv_sum_matches_hand_value() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(3, 2, vec![-0.2, 0.0, 0.0, -0.4, -0.1, 0.0]));
        let l = adv_sum(&mut g, a, &[0, 0, 0]);
        assert!((g.value(l).item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn structure_counts() {
        let mut rep = StructureReport::default();
        rep.observe(&[-1.0, 0.0], -0.4, &[-1.4, -0.4]);
        assert_eq!(rep.violations(), 0);
        rep.observe(&[-1.0, 0.1], 1.2, &[0.2, 1.3]);
        assert_eq!(rep.violations(), 4);
    }
}
