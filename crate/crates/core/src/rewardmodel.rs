//! Reward recovered from a trained Q through the inverse conservative
//! operator, candidate scoring and ranking, and the outcome correlation
//! report.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Problem;
use crate::decode::Candidate;
use crate::error::{Error, Result};
use crate::neural::tensor::argmax;
use crate::qcore::QModel;
use crate::stacklang::{grade, Outcome, OutcomeClass, Program};

pub const HISTOGRAM_BINS: usize = 40;

/// `r̃ = Q(s,a) − γ V(s')`, or `Q(s,a)` at the last step.
pub fn recover_reward_step(q_sa: f64, v_next: f64, gamma: f64, terminal: bool) -> f64 {
    if terminal {
        q_sa
    } else {
        q_sa - gamma * v_next
    }
}

/// `r̃ = Q(s,a) − γ Q(s', argmax p_ckpt(·|s'))`, or `Q(s,a)` at the last step.
pub fn recover_reward_step_exact(q_row_next: &[f64], p_ckpt_row_next: &[f64], q_sa: f64, gamma: f64, terminal: bool) -> f64 {
    if terminal {
        q_sa
    } else {
        q_sa - gamma * q_row_next[argmax(p_ckpt_row_next)]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardForm {
    #[default]
    Approximate,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub problem_id: String,
    pub sample_idx: usize,
    pub tokens: Program,
    pub r_tilde_steps: Vec<f64>,
    #[serde(rename = "R_tilde")]
    pub r_tilde: f64,
    #[serde(default)]
    pub outcome: Option<Outcome>,
}

impl ScoredCandidate {
    pub fn passed(&self) -> bool {
        self.outcome.is_some_and(|o| o.passed())
    }
}

/// Per-step recovered rewards of `program` after `problem`'s prompt, from a
/// single forward pass.
pub fn reward_steps(model: &QModel, problem: &Problem, program: &Program, gamma: f64, form: RewardForm) -> Result<Vec<f64>> {
    let n = program.len();
    if n == 0 {
        return Err(Error::validation("cannot score an empty program"));
    }
    let mut seq = problem.prompt()?;
    let first = seq.len() - 1;
    seq.extend_from_slice(&program.tokens[..n - 1]);
    let view = model.view(&seq)?;
    Ok((0..n)
        .map(|t| {
            let r = first + t;
            let q_sa = view.q.row(r)[program.tokens[t].id()];
            let terminal = t + 1 == n;
            match form {
                RewardForm::Approximate => {
                    recover_reward_step(q_sa, if terminal { 0.0 } else { view.value[r + 1] }, gamma, terminal)
                }
                RewardForm::Exact if terminal => q_sa,
                RewardForm::Exact => {
                    recover_reward_step_exact(view.q.row(r + 1), &view.p_ref(r + 1), q_sa, gamma, false)
                }
            }
        })
        .collect())
}

/// Scores every candidate with `R̃ = Σ_t r̃_t` and grades it on the hidden
/// tests. The model is only read.
pub fn score_candidates(
    model: &QModel,
    problems: &[Problem],
    candidates: &[Candidate],
    gamma: f64,
    form: RewardForm,
) -> Result<Vec<ScoredCandidate>> {
    let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let before = model.param_hash();
    let scored = candidates
        .par_iter()
        .map(|c| {
            let problem = by_id
                .get(c.problem_id.as_str())
                .ok_or_else(|| Error::validation(format!("candidate for unknown problem {}", c.problem_id)))?;
            let steps = reward_steps(model, problem, &c.tokens, gamma, form)?;
            let mut total = 0.0;
            for r in &steps {
                total += r;
            }
            Ok(ScoredCandidate {
                problem_id: c.problem_id.clone(),
                sample_idx: c.sample_idx,
                tokens: c.tokens.clone(),
                r_tilde_steps: steps,
                r_tilde: total,
                outcome: Some(grade(&c.tokens, &problem.hidden_tests)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if model.param_hash() != before {
        return Err(Error::Property("model parameters changed while scoring".into()));
    }
    Ok(scored)
}

/// The `k` highest-`R̃` candidates, ties broken by sample index.
pub fn rank_top_k<'a>(scored: &'a [ScoredCandidate], k: usize) -> Result<Vec<&'a ScoredCandidate>> {
    if k == 0 || k > scored.len() {
        return Err(Error::config(format!("k = {k} must be in 1..={}", scored.len())));
    }
    let mut order: Vec<&ScoredCandidate> = scored.iter().collect();
    order.sort_by(|a, b| b.r_tilde.total_cmp(&a.r_tilde).then(a.sample_idx.cmp(&b.sample_idx)));
    order.truncate(k);
    Ok(order)
}

/// Candidates that pass the problem's example tests.
pub fn filter_by_example_tests(candidates: &[ScoredCandidate], problem: &Problem) -> Vec<ScoredCandidate> {
    candidates
        .iter()
        .filter(|c| grade(&c.tokens, &problem.example_tests).is_ok_and(|o| o.passed()))
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub count: usize,
    pub empty: bool,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub bins: usize,
    /// Observed `R̃` range shared by every histogram.
    pub range: Option<(f64, f64)>,
    pub classes: BTreeMap<OutcomeClass, ClassSummary>,
}

impl CorrelationReport {
    pub fn mean(&self, class: OutcomeClass) -> Option<f64> {
        self.classes.get(&class).and_then(|c| c.mean)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
        h[b.min(bins - 1)] += 1;
    }
    h
}

/// Count, mean, median and a histogram of `R̃` per outcome class. Candidates
/// without an outcome are skipped.
pub fn correlation_report(scored: &[ScoredCandidate]) -> CorrelationReport {
    let mut by_class: BTreeMap<OutcomeClass, Vec<f64>> = OutcomeClass::ALL.iter().map(|&c| (c, Vec::new())).collect();
    for s in scored {
        if let Some(o) = s.outcome {
            by_class.get_mut(&o.class).expect("all classes present").push(s.r_tilde);
        }
    }
    let all: Vec<f64> = by_class.values().flatten().copied().collect();
    let range = all.iter().copied().reduce(f64::min).zip(all.iter().copied().reduce(f64::max));
    let classes = by_class
        .into_iter()
        .map(|(class, v)| {
            let summary = ClassSummary {
                count: v.len(),
                empty: v.is_empty(),
                mean: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
                median: median(&v),
                histogram: match range {
                    Some((lo, hi)) if !v.is_empty() => histogram(&v, lo, hi, HISTOGRAM_BINS),
                    _ => Vec::new(),
                },
            };
            (class, summary)
        })
        .collect();
    CorrelationReport {
        bins: HISTOGRAM_BINS,
        range,
        classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc(idx: usize, r: f64) -> ScoredCandidate {
        ScoredCandidate {
            problem_id: "p".into(),
            sample_idx: idx,
            tokens: Program::new(vec![crate::stacklang::Token::END]),
            r_tilde_steps: vec![r],
            r_tilde: r,
            outcome: None,
        }
    }

    #[test]
    fn step_examples() {
        assert_eq!(recover_reward_step(0.8, 123.0, 0.999, true), 0.8);
        assert!((recover_reward_step(0.5, 0.4, 0.999, false) - 0.1004).abs() < 1e-15);
        assert_eq!(recover_reward_step(0.5, 0.4, 0.0, false), 0.5);
        let q = [0.1, -0.2, 0.3];
        assert_eq!(recover_reward_step_exact(&q, &[0.2, 0.7, 0.1], 1.0, 0.5, false), 1.1);
        assert_eq!(recover_reward_step_exact(&q, &[0.2, 0.7, 0.1], 1.0, 0.5, true), 1.0);
    }

    #[test]
    fn ranking_ties_and_bounds() {
        let s = vec![sc(0, 0.1), sc(1, 0.9), sc(2, 0.5)];
        assert_eq!(rank_top_k(&s, 1).unwrap()[0].sample_idx, 1);
        let idx: Vec<usize> = rank_top_k(&s, 3).unwrap().iter().map(|c| c.sample_idx).collect();
        assert_eq!(idx, vec![1, 2, 0]);
        let eq = vec![sc(2, 0.0), sc(0, 0.0), sc(1, 0.0)];
        let idx: Vec<usize> = rank_top_k(&eq, 2).unwrap().iter().map(|c| c.sample_idx).collect();
        assert_eq!(idx, vec![0, 1]);
        assert!(rank_top_k(&s, 4).is_err());
    }

    #[test]
    fn report_marks_empty_classes() {
        let mut a = sc(0, 1.0);
        a.outcome = Some(Outcome::of(OutcomeClass::Pass));
        let mut b = sc(1, -1.0);
        b.outcome = Some(Outcome::of(OutcomeClass::Pass));
        let rep = correlation_report(&[a.clone(), b.clone()]);
        let pass = &rep.classes[&OutcomeClass::Pass];
        assert_eq!((pass.count, pass.median), (2, Some(0.0)));
        assert_eq!(pass.histogram.iter().sum::<usize>(), 2);
        assert_eq!((pass.histogram[0], pass.histogram[39]), (1, 1));
        assert!(rep.classes[&OutcomeClass::CompileError].empty);
        assert_eq!(rep, correlation_report(&[a, b]));
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<CorrelationReport>(&json).unwrap(), rep);
    }
}
