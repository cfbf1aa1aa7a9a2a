use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ground_truth, Problem, DEFAULT_GT_CAP};
use crate::decode::{batch_generate, read_jsonl, write_jsonl, SamplerConfig};
use crate::error::{Error, Result};
use crate::neural::{Checkpoint, Stage};
use crate::qcore::QModel;
use crate::stacklang::{grade, vocab_hash, Outcome, Program, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    GroundTruth,
    Generated,
}

/// `(s_t, a_t, r_t)`; `state_index` is `t`, the state being the prompt
/// followed by the first `t` program tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state_index: usize,
    pub action: Token,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub problem_id: String,
    pub tokens: Program,
    pub source: Source,
    pub outcome: Outcome,
    pub per_step: Vec<Transition>,
}

/// Expands a graded program into terminal-reward transitions.
pub fn trajectory(problem_id: &str, tokens: Program, source: Source, outcome: Outcome) -> TrajectoryRecord {
    let n = tokens.len();
    let per_step = tokens
        .tokens
        .iter()
        .enumerate()
        .map(|(t, &action)| Transition {
            state_index: t,
            action,
            reward: if t + 1 == n { outcome.reward } else { 0.0 },
            terminal: t + 1 == n,
        })
        .collect();
    TrajectoryRecord {
        problem_id: problem_id.to_string(),
        tokens,
        source,
        outcome,
        per_step,
    }
}

impl TrajectoryRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::validation(format!("record for {}: {why}", self.problem_id)));
        if self.tokens.is_empty() || self.per_step.len() != self.tokens.len() {
            return bad("transitions do not cover the program");
        }
        if Outcome::of(self.outcome.class) != self.outcome {
            return bad("outcome reward does not match its class");
        }
        let last = self.per_step.len() - 1;
        for (t, tr) in self.per_step.iter().enumerate() {
            if tr.state_index != t || tr.action != self.tokens.tokens[t] || tr.terminal != (t == last) {
                return bad("transitions do not replay the program");
            }
            let want = if t == last { self.outcome.reward } else { 0.0 };
            if tr.reward != want {
                return bad("reward is not terminal-only");
            }
        }
        Ok(())
    }

    pub fn action_ids(&self) -> Vec<usize> {
        self.tokens.tokens.iter().map(|t| t.id()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub m_gen: usize,
    pub gt_cap: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            m_gen: 32,
            gt_cap: DEFAULT_GT_CAP,
            sampler: SamplerConfig {
                top_p: 0.95,
                temperature: 1.0,
                ..SamplerConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub m_gen: usize,
    pub gt_cap: usize,
    pub sampler: SamplerConfig,
    pub checkpoint_hash: String,
    pub vocab_hash: String,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<TrajectoryRecord>,
    pub ground_truth: Vec<usize>,
    pub generated: Vec<usize>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn new(records: Vec<TrajectoryRecord>, manifest: DatasetManifest) -> Result<Dataset> {
        let mut gt = Vec::new();
        let mut gen = Vec::new();
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            match r.source {
                Source::GroundTruth => gt.push(i),
                Source::Generated => gen.push(i),
            }
        }
        Ok(Dataset {
            records,
            ground_truth: gt,
            generated: gen,
            manifest,
        })
    }

    pub fn rng_seed(&self) -> u64 {
        self.manifest.seed
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(&self.records, path)?;
        let meta = Dataset::meta_path(path);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&meta, json).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let meta = Dataset::meta_path(path);
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.vocab_hash != vocab_hash() {
            return Err(Error::validation("dataset was built with a different vocabulary"));
        }
        let records: Vec<TrajectoryRecord> = read_jsonl(path)?;
        if records.len() != manifest.records {
            return Err(Error::validation(format!(
                "dataset has {} records, manifest declares {}",
                records.len(),
                manifest.records
            )));
        }
        Dataset::new(records, manifest)
    }
}

/// Ground-truth programs plus `m_gen` samples from the base checkpoint per
/// problem, each graded on the hidden tests.
pub fn build_dataset(problems: &[Problem], checkpoint: &Checkpoint, cfg: &DatasetConfig) -> Result<Dataset> {
    checkpoint.require_stage(Stage::Ckpt)?;
    if cfg.gt_cap == 0 {
        return Err(Error::config("gt_cap must be at least 1"));
    }
    let mut records = Vec::new();
    let gts: Vec<Vec<Program>> = problems
        .par_iter()
        .map(|p| ground_truth(p, cfg.gt_cap))
        .collect::<Result<_>>()?;
    for (p, gt) in problems.iter().zip(gts) {
        if gt.is_empty() {
            return Err(Error::validation(format!("problem {} has no ground-truth program", p.id)));
        }
        for prog in gt {
            let outcome = grade(&prog, &p.hidden_tests)?;
            records.push(trajectory(&p.id, prog, Source::GroundTruth, outcome));
        }
    }
    if cfg.m_gen > 0 {
        let model = QModel::from_checkpoint(checkpoint)?;
        let sampler = SamplerConfig {
            seed: cfg.seed,
            ..cfg.sampler.clone()
        };
        let cands = batch_generate(&model, problems, cfg.m_gen, &sampler)?;
        for (c, p) in cands.into_iter().zip(problems.iter().flat_map(|p| std::iter::repeat(p).take(cfg.m_gen))) {
            let outcome = grade(&c.tokens, &p.hidden_tests)?;
            records.push(trajectory(&p.id, c.tokens, Source::Generated, outcome));
        }
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        m_gen: cfg.m_gen,
        gt_cap: cfg.gt_cap,
        sampler: cfg.sampler.clone(),
        checkpoint_hash: checkpoint.content_hash()?,
        vocab_hash: vocab_hash(),
        records: records.len(),
    };
    Dataset::new(records, manifest)
}

/// Record indices of one batch of `b` trajectories: exactly
/// `round(rho_real · b)` ground-truth trajectories first, then generated ones,
/// each drawn uniformly from its pool.
pub fn sample_minibatch<R: Rng + ?Sized>(
    dataset: &Dataset,
    b: usize,
    rho_real: f64,
    replacement: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rho_real) {
        return Err(Error::config(format!("rho_real must be in [0, 1], got {rho_real}")));
    }
    let n_gt = (rho_real * b as f64).round() as usize;
    let quotas = [(n_gt, &dataset.ground_truth, "ground-truth"), (b - n_gt, &dataset.generated, "generated")];
    let mut out = Vec::with_capacity(b);
    for (quota, pool, what) in quotas {
        if quota == 0 {
            continue;
        }
        if pool.is_empty() {
            return Err(Error::config(format!("batch needs {quota} {what} trajectories but the pool is empty")));
        }
        if replacement {
            out.extend((0..quota).map(|_| pool[rng.gen_range(0..pool.len())]));
        } else {
            if quota > pool.len() {
                return Err(Error::config(format!(
                    "batch needs {quota} {what} trajectories without replacement, pool has {}",
                    pool.len()
                )));
            }
            out.extend(pool.choose_multiple(rng, quota).copied());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stacklang::OutcomeClass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset() -> Dataset {
        let mut records = Vec::new();
        for i in 0..3 {
            let p = Program::parse("x y + end").unwrap();
            records.push(trajectory(&format!("p{i}"), p, Source::GroundTruth, Outcome::of(OutcomeClass::Pass)));
        }
        for i in 0..5 {
            let p = Program::parse("x + end").unwrap();
            records.push(trajectory(&format!("p{i}"), p, Source::Generated, Outcome::of(OutcomeClass::RuntimeError)));
        }
        let manifest = DatasetManifest {
            seed: 0,
            m_gen: 5,
            gt_cap: 1,
            sampler: SamplerConfig::default(),
            checkpoint_hash: String::new(),
            vocab_hash: vocab_hash(),
            records: records.len(),
        };
        Dataset::new(records, manifest).unwrap()
    }

    #[test]
    fn transitions_are_terminal_only() {
        let r = trajectory("a", Program::parse("x y - end").unwrap(), Source::Generated, Outcome::of(OutcomeClass::FailTest));
        r.validate().unwrap();
        let total: f64 = r.per_step.iter().map(|t| t.reward).sum();
        assert_eq!(total, -0.3);
        assert!(r.per_step[3].terminal && !r.per_step[2].terminal);
        let mut broken = r.clone();
        broken.per_step[1].reward = 0.1;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn batch_composition_is_exact() {
        let ds = toy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let b = sample_minibatch(&ds, 8, 0.5, true, &mut rng).unwrap();
            let gt = b.iter().filter(|&&i| ds.records[i].source == Source::GroundTruth).count();
            assert_eq!((gt, b.len()), (4, 8));
        }
        let all = sample_minibatch(&ds, 8, 1.0, true, &mut rng).unwrap();
        assert!(all.iter().all(|&i| ds.records[i].source == Source::GroundTruth));
        assert!(sample_minibatch(&ds, 8, 0.5, false, &mut rng).is_err());
        assert!(sample_minibatch(&ds, 8, 1.5, true, &mut rng).is_err());
        let a = sample_minibatch(&ds, 8, 0.5, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_minibatch(&ds, 8, 0.5, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }
}
