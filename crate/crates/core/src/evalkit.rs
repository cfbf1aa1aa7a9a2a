//! pass@k in four regimes: the unbiased estimator, `R̃`-ranked top-k,
//! example-test filtered then ranked, and oracle filtered by hidden tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Problem;
use crate::error::{Error, Result};
use crate::rewardmodel::{filter_by_example_tests, rank_top_k, ScoredCandidate};

/// Exact `(subsets of size k with a correct sample, all subsets of size k)`,
/// or `None` when the binomials overflow.
pub fn pass_at_k_ratio(n: u64, c: u64, k: u64) -> Option<(u128, u128)> {
    let total = binomial(n, k)?;
    let failing = binomial(n - c, k)?;
    Some((total - failing, total))
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// `1 − C(n−c, k) / C(n, k)`, as one rounding of the exact ratio when the
/// binomials fit and from the product `Π_{i=n−c+1}^{n} (1 − k/i)` otherwise.
pub fn pass_at_k_unbiased(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n || c > n {
        return Err(Error::config(format!("pass@k needs 1 <= k <= n and c <= n, got n={n} c={c} k={k}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let Some((pass, total)) = pass_at_k_ratio(n as u64, c as u64, k as u64) {
        return Ok(pass as f64 / total as f64);
    }
    let mut prod = 1.0;
    for i in (n - c + 1)..=n {
        prod *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - prod)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Plain,
    Ranked,
    Filtered,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub problem_id: String,
    pub n_generated: usize,
    pub n_passing: usize,
    /// Candidates left after filtering, where the regime filters.
    pub n_survivors: Option<usize>,
    /// Sample indices of the submitted candidates, in rank order.
    pub selected: Vec<usize>,
    /// Hidden-test outcome of each submitted candidate.
    pub selected_pass: Vec<bool>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: Regime,
    pub k: usize,
    pub m: usize,
    pub temperature: Option<f64>,
    pub problems: Vec<ProblemRecord>,
    pub pass_at_k: f64,
}

fn passes(problem: &Problem, c: &ScoredCandidate) -> bool {
    problem.passes_hidden(&c.tokens)
}

/// The first `m` candidates of every problem by sample index.
fn first_m<'a>(problems: &[Problem], scored: &'a [ScoredCandidate], m: usize) -> Result<Vec<Vec<&'a ScoredCandidate>>> {
    let mut by_id: BTreeMap<&str, Vec<&ScoredCandidate>> = BTreeMap::new();
    for s in scored {
        by_id.entry(s.problem_id.as_str()).or_default().push(s);
    }
    problems
        .iter()
        .map(|p| {
            let mut v = by_id.remove(p.id.as_str()).unwrap_or_default();
            v.sort_by_key(|c| c.sample_idx);
            if v.len() < m {
                return Err(Error::config(format!("problem {} has {} candidates, need m = {m}", p.id, v.len())));
            }
            v.truncate(m);
            Ok(v)
        })
        .collect()
}

fn selected_record(problem: &Problem, cands: &[&ScoredCandidate], chosen: &[&ScoredCandidate], survivors: Option<usize>) -> ProblemRecord {
    let selected_pass: Vec<bool> = chosen.iter().map(|c| passes(problem, c)).collect();
    ProblemRecord {
        problem_id: problem.id.clone(),
        n_generated: cands.len(),
        n_passing: cands.iter().filter(|c| passes(problem, c)).count(),
        n_survivors: survivors,
        selected: chosen.iter().map(|c| c.sample_idx).collect(),
        score: if selected_pass.iter().any(|&b| b) { 1.0 } else { 0.0 },
        selected_pass,
    }
}

fn report(regime: Regime, k: usize, m: usize, problems: Vec<ProblemRecord>) -> EvalReport {
    let pass_at_k = if problems.is_empty() {
        0.0
    } else {
        problems.iter().map(|p| p.score).sum::<f64>() / problems.len() as f64
    };
    EvalReport { regime, k, m, temperature: None, problems, pass_at_k }
}

fn check_km(k: usize, m: usize) -> Result<()> {
    if k == 0 || k > m {
        return Err(Error::config(format!("need 1 <= k <= m, got k={k} m={m}")));
    }
    Ok(())
}

/// Unbiased pass@k from the first `m` samples of each problem.
pub fn plain_pass_at_k(problems: &[Problem], scored: &[ScoredCandidate], k: usize, m: usize) -> Result<EvalReport> {
    check_km(k, m)?;
    let groups = first_m(problems, scored, m)?;
    let records = problems
        .iter()
        .zip(&groups)
        .map(|(p, cands)| {
            let c = cands.iter().filter(|s| passes(p, s)).count();
            Ok(ProblemRecord {
                problem_id: p.id.clone(),
                n_generated: cands.len(),
                n_passing: c,
                n_survivors: None,
                selected: Vec::new(),
                selected_pass: Vec::new(),
                score: pass_at_k_unbiased(cands.len(), c, k)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(report(Regime::Plain, k, m, records))
}

/// Submits the top-`k` of the first `m` candidates by `R̃`.
pub fn ranked_pass_at_k(problems: &[Problem], scored: &[ScoredCandidate], k: usize, m: usize) -> Result<EvalReport> {
    check_km(k, m)?;
    let groups = first_m(problems, scored, m)?;
    let records = problems
        .iter()
        .zip(&groups)
        .map(|(p, cands)| {
            let owned: Vec<ScoredCandidate> = cands.iter().map(|&c| c.clone()).collect();
            let top = rank_top_k(&owned, k)?;
            Ok(selected_record(p, cands, &top, None))
        })
        .collect::<Result<_>>()?;
    Ok(report(Regime::Ranked, k, m, records))
}

/// Drops candidates failing the example tests, then ranks the survivors; a
/// problem with fewer than `k` survivors submits all of them.
pub fn filtered_pass_at_k(problems: &[Problem], scored: &[ScoredCandidate], k: usize, m: usize) -> Result<EvalReport> {
    check_km(k, m)?;
    let groups = first_m(problems, scored, m)?;
    let records = problems
        .iter()
        .zip(&groups)
        .map(|(p, cands)| {
            let owned: Vec<ScoredCandidate> = cands.iter().map(|&c| c.clone()).collect();
            let survivors = filter_by_example_tests(&owned, p);
            let top = if survivors.is_empty() {
                Vec::new()
            } else {
                rank_top_k(&survivors, k.min(survivors.len()))?
            };
            Ok(selected_record(p, cands, &top, Some(survivors.len())))
        })
        .collect::<Result<_>>()?;
    Ok(report(Regime::Filtered, k, m, records))
}

/// Filters by the hidden tests themselves: 1 iff some candidate passes.
pub fn oracle_filtered_pass_at_k(problems: &[Problem], scored: &[ScoredCandidate], k: usize, m: usize) -> Result<EvalReport> {
    check_km(k, m)?;
    let groups = first_m(problems, scored, m)?;
    let records = problems
        .iter()
        .zip(&groups)
        .map(|(p, cands)| {
            let survivors: Vec<&ScoredCandidate> = cands.iter().copied().filter(|c| passes(p, c)).collect();
            let chosen: Vec<&ScoredCandidate> = survivors.iter().copied().take(k).collect();
            selected_record(p, cands, &chosen, Some(survivors.len()))
        })
        .collect();
    Ok(report(Regime::Oracle, k, m, records))
}

pub fn evaluate(regime: Regime, problems: &[Problem], scored: &[ScoredCandidate], k: usize, m: usize) -> Result<EvalReport> {
    match regime {
        Regime::Plain => plain_pass_at_k(problems, scored, k, m),
        Regime::Ranked => ranked_pass_at_k(problems, scored, k, m),
        Regime::Filtered => filtered_pass_at_k(problems, scored, k, m),
        Regime::Oracle => oracle_filtered_pass_at_k(problems, scored, k, m),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub regime: Regime,
    pub pass_at_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub k: usize,
    pub rows: Vec<SweepRow>,
    /// `(m, ranked − plain)`
    pub ranked_minus_plain: Vec<(usize, f64)>,
    /// Observed decreases of plain pass@k in `m`; expected to be sampling
    /// noise.
    pub notes: Vec<String>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,regime,pass_at_k\n");
        for r in &self.rows {
            let regime = serde_json::to_value(r.regime).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.m, regime, r.pass_at_k));
        }
        out
    }
}

/// Ranked and plain pass@k for every budget in `m_values`.
pub fn sweep_m(problems: &[Problem], scored: &[ScoredCandidate], k: usize, m_values: &[usize]) -> Result<SweepReport> {
    let mut rows = Vec::new();
    let mut deltas = Vec::new();
    let mut notes = Vec::new();
    let mut prev_plain: Option<(usize, f64)> = None;
    for &m in m_values {
        let plain = plain_pass_at_k(problems, scored, k, m)?.pass_at_k;
        let ranked = ranked_pass_at_k(problems, scored, k, m)?.pass_at_k;
        if let Some((pm, pp)) = prev_plain {
            if m > pm && plain < pp {
                notes.push(format!("plain pass@{k} fell from {pp:.4} at m={pm} to {plain:.4} at m={m}; sampling noise"));
            }
        }
        prev_plain = Some((m, plain));
        rows.push(SweepRow { m, regime: Regime::Plain, pass_at_k: plain });
        rows.push(SweepRow { m, regime: Regime::Ranked, pass_at_k: ranked });
        deltas.push((m, ranked - plain));
    }
    Ok(SweepReport { k, rows, ranked_minus_plain: deltas, notes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_examples() {
        assert_eq!(pass_at_k_unbiased(4, 2, 1).unwrap(), 0.5);
        assert_eq!(pass_at_k_unbiased(10, 0, 3).unwrap(), 0.0);
        assert_eq!(pass_at_k_unbiased(10, 10, 3).unwrap(), 1.0);
        assert_eq!(pass_at_k_unbiased(200, 1, 200).unwrap(), 1.0);
        assert!(pass_at_k_unbiased(3, 1, 4).is_err());
        let big = pass_at_k_unbiased(1000, 10, 100).unwrap();
        assert!(big > 0.0 && big < 1.0);
    }
}
