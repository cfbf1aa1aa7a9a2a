//! Finite MDPs with exact Bellman operators: optimality, conservative and the
//! inverse conservative operator, plus randomized property harnesses and a
//! Monte-Carlo oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::tensor::argmax;

pub const MAX_ITERATIONS: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `p[s][a][s']`
    pub p: Vec<Vec<Vec<f64>>>,
    pub r: Vec<Vec<f64>>,
    pub gamma: f64,
    pub terminal: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub data: Vec<f64>,
}

/// Stochastic reference policy `q(a|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePolicy {
    pub probs: Vec<Vec<f64>>,
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // Exponential spacings give a uniform point on the simplex.
    let v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 || self.p.len() != s || self.r.len() != s || self.terminal.len() != s {
            return Err(Error::Shape("MDP tables do not match its sizes".into()));
        }
        for i in 0..s {
            if self.p[i].len() != a || self.r[i].len() != a {
                return Err(Error::Shape(format!("state {i} has the wrong number of actions")));
            }
            for j in 0..a {
                let row = &self.p[i][j];
                let sum: f64 = row.iter().sum();
                if row.len() != s || (sum - 1.0).abs() > 1e-12 || row.iter().any(|&x| x < 0.0) {
                    return Err(Error::validation(format!("P[{i}][{j}] is not a distribution")));
                }
                if self.terminal[i] && (row[i] != 1.0 || self.r[i][j] != 0.0) {
                    return Err(Error::validation(format!("terminal state {i} must self-loop with reward 0")));
                }
            }
        }
        Ok(())
    }

    /// Random MDP with dense random transitions and rewards in `[-1, 1]`;
    /// each state is terminal with probability `terminal_prob`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64, terminal_prob: f64) -> TabularMdp {
        let terminal: Vec<bool> = (0..n_states).map(|_| rng.gen::<f64>() < terminal_prob).collect();
        let mut p = Vec::with_capacity(n_states);
        let mut r = Vec::with_capacity(n_states);
        for s in 0..n_states {
            if terminal[s] {
                let mut row = vec![0.0; n_states];
                row[s] = 1.0;
                p.push(vec![row; n_actions]);
                r.push(vec![0.0; n_actions]);
            } else {
                p.push((0..n_actions).map(|_| random_simplex(rng, n_states)).collect());
                r.push((0..n_actions).map(|_| rng.gen_range(-1.0..=1.0)).collect());
            }
        }
        TabularMdp { n_states, n_actions, p, r, gamma, terminal }
    }

    pub fn with_rewards(&self, r: Vec<Vec<f64>>) -> TabularMdp {
        let mut m = self.clone();
        m.r = r;
        m
    }
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> QTable {
        QTable { n_states, n_actions, data: vec![0.0; n_states * n_actions] }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, bound: f64) -> QTable {
        QTable {
            n_states,
            n_actions,
            data: (0..n_states * n_actions).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.data[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.data[s * self.n_actions + a] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> QTable {
        QTable { data: self.data.iter().map(|&x| f(x)).collect(), ..*self }
    }

    pub fn sup_dist(&self, other: &QTable) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl ReferencePolicy {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize) -> ReferencePolicy {
        ReferencePolicy { probs: (0..n_states).map(|_| random_simplex(rng, n_actions)).collect() }
    }

    /// Deterministic policy putting all mass on the argmax of each row of `q`.
    pub fn greedy_wrt(q: &QTable) -> ReferencePolicy {
        ReferencePolicy {
            probs: (0..q.n_states)
                .map(|s| {
                    let mut row = vec![0.0; q.n_actions];
                    row[argmax(q.row(s))] = 1.0;
                    row
                })
                .collect(),
        }
    }

    /// The greedified policy `q↑`, lowest index on ties.
    pub fn greedified(&self) -> Vec<usize> {
        self.probs.iter().map(|row| argmax(row)).collect()
    }
}

fn backup(q: &QTable, mdp: &TabularMdp, next_value: &[f64]) -> QTable {
    let mut out = QTable::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut e = 0.0;
            for (sp, &pr) in mdp.p[s][a].iter().enumerate() {
                e += pr * next_value[sp];
            }
            out.set(s, a, mdp.r[s][a] + mdp.gamma * e);
        }
    }
    debug_assert_eq!(q.data.len(), out.data.len());
    out
}

/// `(ℬ* Q)(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) max_a' Q(s',a')`.
pub fn apply_optimality(q: &QTable, mdp: &TabularMdp) -> QTable {
    let v: Vec<f64> = (0..mdp.n_states).map(|s| q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    backup(q, mdp, &v)
}

/// `(ℬ^q Q)(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) Q(s', argmax q(·|s'))`.
pub fn apply_conservative(q: &QTable, mdp: &TabularMdp, policy: &ReferencePolicy) -> QTable {
    let target = policy.greedified();
    let v: Vec<f64> = (0..mdp.n_states).map(|s| q.get(s, target[s])).collect();
    backup(q, mdp, &v)
}

/// `(𝒯^q Q)(s,a) = Q(s,a) − γ Σ_{s'} P(s'|s,a) Q(s', argmax q(·|s'))`.
pub fn apply_inverse(q: &QTable, mdp: &TabularMdp, policy: &ReferencePolicy) -> Vec<Vec<f64>> {
    let target = policy.greedified();
    (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| {
                    let mut e = 0.0;
                    for (sp, &pr) in mdp.p[s][a].iter().enumerate() {
                        e += pr * q.get(sp, target[sp]);
                    }
                    q.get(s, a) - mdp.gamma * e
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub q: QTable,
    pub iterations: usize,
    /// `‖Q_{k+1} − Q_k‖∞` for every iteration.
    pub diffs: Vec<f64>,
}

impl FixedPoint {
    /// Each successive difference is at most `γ` times the previous one,
    /// after `warmup` iterations and up to `slack`.
    pub fn decays_geometrically(&self, gamma: f64, warmup: usize, slack: f64) -> bool {
        self.diffs.windows(2).skip(warmup).all(|w| w[1] <= gamma * w[0] + slack)
    }
}

fn iterate(mdp: &TabularMdp, tol: f64, op: impl Fn(&QTable) -> QTable) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(Error::config("tol must be positive"));
    }
    let stop = tol * (1.0 - mdp.gamma) / mdp.gamma;
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut diffs = Vec::new();
    for it in 1..=MAX_ITERATIONS {
        let next = op(&q);
        let d = next.sup_dist(&q);
        diffs.push(d);
        q = next;
        if d < stop {
            return Ok(FixedPoint { q, iterations: it, diffs });
        }
    }
    Err(Error::Numerical(format!("no fixed point within {MAX_ITERATIONS} iterations at tol {tol}")))
}

/// Iterates `ℬ^q` from zero; the stopping rule bounds the distance to the
/// fixed point `Q^{q↑}` by `tol`.
pub fn fixed_point_conservative(mdp: &TabularMdp, policy: &ReferencePolicy, tol: f64) -> Result<FixedPoint> {
    iterate(mdp, tol, |q| apply_conservative(q, mdp, policy))
}

pub fn fixed_point_optimal(mdp: &TabularMdp, tol: f64) -> Result<FixedPoint> {
    iterate(mdp, tol, |q| apply_optimality(q, mdp))
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(trial as u64 + 1);
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionCounterexample {
    pub trial: usize,
    pub mdp: TabularMdp,
    pub policy: ReferencePolicy,
    pub q1: QTable,
    pub q2: QTable,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub trials: usize,
    pub gamma: f64,
    pub violations: usize,
    pub max_ratio: f64,
    /// Largest `|ratio − γ|` over the constant-shift pairs.
    pub shift_witness_dev: f64,
    pub counterexamples: Vec<ContractionCounterexample>,
}

impl ContractionReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.shift_witness_dev <= 1e-12
    }
}

/// Random MDPs (1..=`max_states` states, 1..=`max_actions` actions), random
/// reference policies and random Q pairs in `[-10, 10]`; checks
/// `‖ℬ^q Q1 − ℬ^q Q2‖∞ ≤ γ‖Q1 − Q2‖∞ + 1e-9` and that a constant shift attains
/// ratio `γ`.
pub fn check_contraction(trials: usize, max_states: usize, max_actions: usize, gamma: f64, seed: u64) -> ContractionReport {
    let results: Vec<(f64, f64, Option<ContractionCounterexample>)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let s = rng.gen_range(1..=max_states);
            let a = rng.gen_range(1..=max_actions);
            let mdp = TabularMdp::random(&mut rng, s, a, gamma, 0.2);
            let policy = ReferencePolicy::random(&mut rng, s, a);
            let q1 = QTable::random(&mut rng, s, a, 10.0);
            let q2 = QTable::random(&mut rng, s, a, 10.0);
            let d_in = q1.sup_dist(&q2);
            let d_out = apply_conservative(&q1, &mdp, &policy).sup_dist(&apply_conservative(&q2, &mdp, &policy));
            let ratio = if d_in > 0.0 { d_out / d_in } else { 0.0 };
            let c = rng.gen_range(0.5..=5.0);
            let shifted = q1.map(|x| x + c);
            let w = apply_conservative(&shifted, &mdp, &policy).sup_dist(&apply_conservative(&q1, &mdp, &policy))
                / shifted.sup_dist(&q1);
            let bad = d_out > gamma * d_in + 1e-9;
            let cx = bad.then(|| ContractionCounterexample { trial: t, mdp, policy, q1, q2, ratio });
            (ratio, (w - gamma).abs(), cx)
        })
        .collect();
    let mut rep = ContractionReport {
        trials,
        gamma,
        violations: 0,
        max_ratio: 0.0,
        shift_witness_dev: 0.0,
        counterexamples: Vec::new(),
    };
    for (ratio, dev, cx) in results {
        rep.max_ratio = rep.max_ratio.max(ratio);
        rep.shift_witness_dev = rep.shift_witness_dev.max(dev);
        if let Some(cx) = cx {
            rep.violations += 1;
            rep.counterexamples.push(cx);
        }
    }
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BijectionCounterexample {
    pub trial: usize,
    pub mdp: TabularMdp,
    pub policy: ReferencePolicy,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BijectionReport {
    pub trials: usize,
    pub gamma: f64,
    pub tol: f64,
    pub max_round_trip_err: f64,
    pub failures: Vec<BijectionCounterexample>,
    /// Smallest observed `‖𝒯Q1 − 𝒯Q2‖∞ / ‖Q1 − Q2‖∞` for distinct random pairs.
    pub min_separation: f64,
    /// Trials whose iterate differences did not shrink by `γ` per step.
    pub non_geometric: usize,
}

impl BijectionReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_round_trip_err < 10.0 * self.tol && self.non_geometric == 0
    }
}

fn sup_dist_table(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Round trips `r → Q = fix(ℬ^q_r) → 𝒯^q Q` on random MDPs.
pub fn check_bijection(trials: usize, gamma: f64, tol: f64, seed: u64) -> Result<BijectionReport> {
    let results: Vec<(f64, f64, bool, Option<BijectionCounterexample>)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let s = rng.gen_range(1..=20);
            let a = rng.gen_range(1..=5);
            let mdp = TabularMdp::random(&mut rng, s, a, gamma, 0.2);
            let policy = ReferencePolicy::random(&mut rng, s, a);
            let fp = fixed_point_conservative(&mdp, &policy, tol)?;
            let back = apply_inverse(&fp.q, &mdp, &policy);
            let err = sup_dist_table(&back, &mdp.r);
            // Rounding in one sweep is a few ulps of the largest entry.
            let scale = fp.q.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let geometric = fp.decays_geometrically(gamma, 5, 16.0 * f64::EPSILON * scale);
            let q1 = QTable::random(&mut rng, s, a, 10.0);
            let q2 = QTable::random(&mut rng, s, a, 10.0);
            let sep = sup_dist_table(&apply_inverse(&q1, &mdp, &policy), &apply_inverse(&q2, &mdp, &policy))
                / q1.sup_dist(&q2).max(f64::MIN_POSITIVE);
            let cx = (err >= 10.0 * tol).then(|| BijectionCounterexample { trial: t, mdp, policy, error: err });
            Ok((err, sep, geometric, cx))
        })
        .collect::<Result<_>>()?;
    let mut rep = BijectionReport {
        trials,
        gamma,
        tol,
        max_round_trip_err: 0.0,
        failures: Vec::new(),
        min_separation: f64::INFINITY,
        non_geometric: 0,
    };
    for (err, sep, geometric, cx) in results {
        rep.max_round_trip_err = rep.max_round_trip_err.max(err);
        rep.min_separation = rep.min_separation.min(sep);
        rep.non_geometric += usize::from(!geometric);
        rep.failures.extend(cx);
    }
    Ok(rep)
}

/// Horizon after which the discounted tail is below `eps · max|r| / (1−γ)`.
pub fn truncation_horizon(gamma: f64, eps: f64) -> usize {
    (eps.ln() / gamma.ln()).ceil() as usize
}

fn sample_next<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Discounted return of one rollout that takes `a` in `s` and then follows
/// `policy`, truncated after `horizon` steps or at a terminal state.
pub fn rollout<R: Rng + ?Sized>(mdp: &TabularMdp, policy: &[usize], s: usize, a: usize, horizon: usize, rng: &mut R) -> f64 {
    let (mut s, mut a) = (s, a);
    let mut g = 0.0;
    let mut disc = 1.0;
    for _ in 0..horizon {
        if mdp.terminal[s] {
            break;
        }
        g += disc * mdp.r[s][a];
        disc *= mdp.gamma;
        s = sample_next(&mdp.p[s][a], rng);
        a = policy[s];
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub trial: usize,
    /// Mean of `Q^{q↑}` over non-terminal `(s,a)` start pairs.
    pub exact: f64,
    pub monte_carlo: f64,
    pub std_err: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub mdps: usize,
    pub rollouts: usize,
    pub horizon: usize,
    pub cases: Vec<OracleCase>,
    pub max_abs_z: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_abs_z <= 3.0
    }
}

/// Compares the conservative fixed point with Monte-Carlo returns of the
/// greedified policy. Start pairs are drawn uniformly from non-terminal
/// `(s,a)`, so each MDP yields one estimate of the mean of `Q^{q↑}`.
pub fn monte_carlo_oracle(mdps: usize, n_states: usize, n_actions: usize, gamma: f64, rollouts: usize, seed: u64) -> Result<OracleReport> {
    let horizon = truncation_horizon(gamma, 1e-12);
    let cases: Vec<OracleCase> = (0..mdps)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let mut mdp = TabularMdp::random(&mut rng, n_states, n_actions, gamma, 0.2);
            if mdp.terminal.iter().all(|&x| x) {
                mdp = TabularMdp::random(&mut rng, n_states, n_actions, gamma, 0.0);
            }
            let policy = ReferencePolicy::random(&mut rng, n_states, n_actions);
            let fp = fixed_point_conservative(&mdp, &policy, 1e-12)?;
            let greedy = policy.greedified();
            let starts: Vec<(usize, usize)> = (0..n_states)
                .filter(|&s| !mdp.terminal[s])
                .flat_map(|s| (0..n_actions).map(move |a| (s, a)))
                .collect();
            let exact = starts.iter().map(|&(s, a)| fp.q.get(s, a)).sum::<f64>() / starts.len() as f64;
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..rollouts {
                let (s, a) = starts[rng.gen_range(0..starts.len())];
                let g = rollout(&mdp, &greedy, s, a, horizon, &mut rng);
                sum += g;
                sq += g * g;
            }
            let n = rollouts as f64;
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0);
            let std_err = (var / n).sqrt();
            Ok(OracleCase { trial: t, exact, monte_carlo: mean, std_err, z: (mean - exact) / std_err })
        })
        .collect::<Result<_>>()?;
    let max_abs_z = cases.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
    Ok(OracleReport { mdps, rollouts, horizon, cases, max_abs_z })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularReport {
    pub contraction: Vec<ContractionReport>,
    pub bijection: BijectionReport,
    pub oracle: Option<OracleReport>,
    pub passed: bool,
}

/// Contraction at `gamma` and `0.999`, the bijection round trip, and
/// optionally the Monte-Carlo oracle.
pub fn verify_tabular(trials: usize, seed: u64, gamma: f64, oracle_rollouts: Option<usize>) -> Result<TabularReport> {
    let mut gammas = vec![gamma];
    if gamma != 0.999 {
        gammas.push(0.999);
    }
    let contraction: Vec<ContractionReport> = gammas.iter().map(|&g| check_contraction(trials, 20, 5, g, seed)).collect();
    let bijection = check_bijection(trials.min(500).max(1), gamma, 1e-10, seed)?;
    let oracle = oracle_rollouts.map(|n| monte_carlo_oracle(20, 10, 3, gamma, n, seed)).transpose()?;
    let passed = contraction.iter().all(ContractionReport::passed)
        && bijection.passed()
        && oracle.as_ref().is_none_or(OracleReport::passed);
    Ok(TabularReport { contraction, bijection, oracle, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state(r: f64, gamma: f64) -> TabularMdp {
        TabularMdp {
            n_states: 1,
            n_actions: 1,
            p: vec![vec![vec![1.0]]],
            r: vec![vec![r]],
            gamma,
            terminal: vec![false],
        }
    }

    #[test]
    fn geometric_series() {
        let mdp = one_state(1.0, 0.5);
        mdp.validate().unwrap();
        let pol = ReferencePolicy { probs: vec![vec![1.0]] };
        let fp = fixed_point_conservative(&mdp, &pol, 1e-12).unwrap();
        assert!((fp.q.get(0, 0) - 2.0).abs() < 1e-12);
        let fo = fixed_point_optimal(&mdp, 1e-12).unwrap();
        assert!((fo.q.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((apply_inverse(&fp.q, &mdp, &pol)[0][0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn zero_mdp_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = TabularMdp::random(&mut rng, 4, 2, 0.9, 0.3);
        let mdp = mdp.with_rewards(vec![vec![0.0; 2]; 4]);
        let z = QTable::zeros(4, 2);
        assert_eq!(apply_optimality(&z, &mdp), z);
        let pol = ReferencePolicy::random(&mut rng, 4, 2);
        assert_eq!(fixed_point_conservative(&mdp, &pol, 1e-10).unwrap().q, z);
        assert!(apply_inverse(&z, &mdp, &pol).iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn validate_rejects_bad_rows() {
        let mut m = one_state(1.0, 0.9);
        m.p[0][0][0] = 0.9;
        assert!(m.validate().is_err());
        let mut m = one_state(1.0, 0.9);
        m.terminal[0] = true;
        assert!(m.validate().is_err());
        assert!(one_state(0.0, 1.0).validate().is_err());
    }
}
