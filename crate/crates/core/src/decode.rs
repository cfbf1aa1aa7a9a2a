//! Greedy decoding and nucleus sampling, with `Q/α` as the score row for
//! value-trained models and raw logits for the base checkpoint.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Problem;
use crate::error::{Error, Result};
use crate::neural::tensor::argmax;
use crate::neural::Stage;
use crate::qcore::QModel;
use crate::stacklang::{Program, Token, T_MAX};

pub const MIN_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_p: 0.95,
            temperature: 1.0,
            max_len: T_MAX,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.max_len == 0 || self.max_len > T_MAX {
            return Err(Error::config(format!("max_len must be in 1..={T_MAX}")));
        }
        Ok(())
    }
}

fn decode_with(model: &QModel, problem: &Problem, max_len: usize, mut choose: impl FnMut(&[f64]) -> usize) -> Result<Program> {
    let prompt = problem.prompt()?;
    let mut session = model.session();
    let mut scores = None;
    for &t in &prompt {
        scores = Some(session.push(t)?);
    }
    let (stage, alpha) = (model.stage(), model.alpha());
    let mut tokens = Vec::with_capacity(max_len);
    loop {
        let row = scores.take().expect("prompt is non-empty").decode_scores(stage, alpha);
        let tok = Token::new(choose(&row))?;
        tokens.push(tok);
        if tok == Token::END || tokens.len() >= max_len {
            break;
        }
        scores = Some(session.push(tok)?);
    }
    Ok(Program::new(tokens))
}

/// Argmax decoding (lowest index on ties) until `end` or `T_MAX` tokens.
pub fn greedy_decode(model: &QModel, problem: &Problem) -> Result<Program> {
    decode_with(model, problem, T_MAX, argmax)
}

/// The renormalized nucleus of `softmax(scores / t)`: the smallest
/// probability-sorted prefix whose mass reaches `top_p`, as
/// `(token index, probability)` pairs in descending order.
pub fn nucleus(scores: &[f64], top_p: f64, temperature: f64) -> Vec<(usize, f64)> {
    let t = temperature.max(MIN_TEMPERATURE);
    let scaled: Vec<f64> = scores.iter().map(|s| s / t).collect();
    let probs = crate::neural::tensor::softmax_row(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push((i, probs[i]));
        mass += probs[i];
        // Slack absorbs rounding in the running sum.
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    kept.into_iter().map(|(i, p)| (i, p / mass)).collect()
}

pub fn draw<R: Rng + ?Sized>(dist: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in dist {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.last().expect("nucleus is never empty").0
}

pub fn nucleus_sample<R: Rng + ?Sized>(model: &QModel, problem: &Problem, cfg: &SamplerConfig, rng: &mut R) -> Result<Program> {
    cfg.validate()?;
    decode_with(model, problem, cfg.max_len, |row| draw(&nucleus(row, cfg.top_p, cfg.temperature), rng))
}

/// Seed of the private stream for one `(problem, sample)` pair.
pub fn derive_seed(base: u64, problem_id: &str, sample_idx: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(problem_id.as_bytes());
    h.update((sample_idx as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn sample_rng(base: u64, problem_id: &str, sample_idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, problem_id, sample_idx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub problem_id: String,
    pub sample_idx: usize,
    pub tokens: Program,
    pub source_stage: Stage,
    pub sampler_cfg: SamplerConfig,
}

/// `m` samples per problem, ordered by `(problem, sample index)`. Each sample
/// draws from its own derived stream, so the result does not depend on how
/// work is scheduled across threads.
pub fn batch_generate(model: &QModel, problems: &[Problem], m: usize, cfg: &SamplerConfig) -> Result<Vec<Candidate>> {
    if m == 0 {
        return Err(Error::config("m must be at least 1"));
    }
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..problems.len()).flat_map(|p| (0..m).map(move |i| (p, i))).collect();
    jobs.par_iter()
        .map(|&(p, i)| {
            let problem = &problems[p];
            let mut rng = sample_rng(cfg.seed, &problem.id, i);
            Ok(Candidate {
                problem_id: problem.id.clone(),
                sample_idx: i,
                tokens: nucleus_sample(model, problem, cfg, &mut rng)?,
                source_stage: model.stage(),
                sampler_cfg: cfg.clone(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON value per line. A malformed final line (an interrupted
/// write) is dropped; a malformed line elsewhere is an error.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i == last => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_boundary() {
        let scores: Vec<f64> = [0.5f64, 0.3, 0.15, 0.05].iter().map(|p| p.ln()).collect();
        let n = nucleus(&scores, 0.8, 1.0);
        assert_eq!(n.len(), 2);
        assert_eq!(n[0].0, 0);
        assert_eq!(n[1].0, 1);
        assert!((n[0].1 - 0.625).abs() < 1e-12);
        assert!((n[1].1 - 0.375).abs() < 1e-12);
        let tiny = nucleus(&scores, 1e-9, 1.0);
        assert_eq!(tiny, vec![(0, 1.0)]);
        assert_eq!(nucleus(&scores, 1.0, 1.0).len(), 4);
    }

    #[test]
    fn seeds_differ_per_sample() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_eq!(derive_seed(3, "p", 7), derive_seed(3, "p", 7));
    }
}
