use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::Params;
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay over a fixed set of trainable tensors.
pub struct AdamW {
    cfg: AdamWConfig,
    trainable: Vec<String>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &Params, trainable: Vec<String>) -> Result<AdamW> {
        let mut m = BTreeMap::new();
        for name in &trainable {
            let p = params.get(name)?;
            m.insert(name.clone(), Tensor::zeros(p.rows, p.cols));
        }
        Ok(AdamW {
            cfg,
            trainable,
            v: m.clone(),
            m,
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. A trainable tensor missing from `grads` is treated as
    /// having a zero gradient; a gradient for any other tensor is an error.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        for name in grads.keys() {
            if !self.m.contains_key(name) {
                return Err(Error::Shape(format!("gradient for non-trainable tensor {name}")));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for name in &self.trainable {
            let p = params.get_mut(name)?;
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            let m = self.m.get_mut(name).expect("moment exists");
            let v = self.v.get_mut(name).expect("moment exists");
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data[i]);
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                let w = p.data[i];
                p.data[i] = w - lr * (mhat / (vhat.sqrt() + self.cfg.eps) + weight_decay * w);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &Gradients) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

impl LrSchedule {
    /// Learning rate for 0-based `step` out of `total`.
    pub fn at(self, peak: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => peak,
            LrSchedule::LinearDecay => peak * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> Params {
        Params::from_map(BTreeMap::from([(name.to_string(), Tensor::scalar(v))]))
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = one("w", 0.75);
        let mut opt = AdamW::new(AdamWConfig::default(), &p, vec!["w".into()]).unwrap();
        let grads = Gradients::from([("w".to_string(), Tensor::scalar(0.0))]);
        for _ in 0..10 {
            opt.step(&mut p, &grads, 0.1, 0.0).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.75);
    }

    #[test]
    fn first_step_descends() {
        let mut p = one("w", 1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p, vec!["w".into()]).unwrap();
        let grads = Gradients::from([("w".to_string(), Tensor::scalar(1.0))]);
        opt.step(&mut p, &grads, 0.1, 0.0).unwrap();
        let w = p.get("w").unwrap().item();
        assert!(w < 1.0);
        assert!((w - 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_tensors_untouched() {
        let mut p = Params::from_map(BTreeMap::from([
            ("a".to_string(), Tensor::from_vec(1, 2, vec![0.3, -0.2])),
            ("b".to_string(), Tensor::from_vec(1, 2, vec![1.1, 2.2])),
        ]));
        let before = p.get("b").unwrap().clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p, vec!["a".into()]).unwrap();
        let grads = Gradients::from([("a".to_string(), Tensor::from_vec(1, 2, vec![0.5, -1.0]))]);
        for _ in 0..100 {
            opt.step(&mut p, &grads, 0.01, 0.05).unwrap();
        }
        assert_eq!(p.get("b").unwrap(), &before);
        let bad = Gradients::from([("b".to_string(), Tensor::from_vec(1, 2, vec![1.0, 1.0]))]);
        assert!(opt.step(&mut p, &bad, 0.01, 0.0).is_err());
        let wrong = Gradients::from([("a".to_string(), Tensor::scalar(1.0))]);
        assert!(opt.step(&mut p, &wrong, 0.01, 0.0).is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.at(1e-3, 500, 1000), 1e-3);
        assert_eq!(LrSchedule::LinearDecay.at(1.0, 0, 4), 1.0);
        assert_eq!(LrSchedule::LinearDecay.at(1.0, 3, 4), 0.25);
    }
}
