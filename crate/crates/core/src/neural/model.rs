use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Graph, Var};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};
use crate::stacklang::{Token, NUM_ACTIONS, P_MAX, T_MAX, VOCAB_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ckpt,
    Phi,
    Theta,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ckpt => "ckpt",
            Stage::Phi => "phi",
            Stage::Theta => "theta",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Block,
    LogitsHead,
    PhiHead,
    H1,
    H2,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("tok_emb") || name.starts_with("pos_emb") {
            ParamGroup::Embedding
        } else if name.starts_with("head.logits") {
            ParamGroup::LogitsHead
        } else if name.starts_with("head.phi") {
            ParamGroup::PhiHead
        } else if name.starts_with("head.h1") {
            ParamGroup::H1
        } else if name.starts_with("head.h2") {
            ParamGroup::H2
        } else {
            // blocks.* and the final norm
            ParamGroup::Block
        }
    }
}

impl Stage {
    pub fn trains(self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match self {
            Stage::Ckpt => matches!(group, Embedding | Block | LogitsHead),
            Stage::Phi => group == PhiHead,
            Stage::Theta => matches!(group, Block | LogitsHead | H1),
        }
    }

    pub fn trains_param(self, name: &str) -> bool {
        self.trains(ParamGroup::of(name))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_actions: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub mlp_dim: usize,
    pub context_len: usize,
    pub ln_eps: f64,
    /// Initial bias of the value head φ; its weights start at zero.
    pub phi_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            num_actions: NUM_ACTIONS,
            embed_dim: 32,
            n_blocks: 2,
            mlp_dim: 64,
            context_len: P_MAX + T_MAX,
            ln_eps: 1e-5,
            phi_bias_init: -1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE || self.num_actions != NUM_ACTIONS {
            return Err(Error::config(format!(
                "model vocabulary {}/{} does not match the language ({VOCAB_SIZE}/{NUM_ACTIONS})",
                self.vocab_size, self.num_actions
            )));
        }
        if self.context_len < P_MAX + T_MAX {
            return Err(Error::config(format!(
                "context_len {} is below P_MAX + T_MAX = {}",
                self.context_len,
                P_MAX + T_MAX
            )));
        }
        if self.embed_dim == 0 || self.mlp_dim == 0 || self.n_blocks == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !(self.ln_eps > 0.0) || !self.phi_bias_init.is_finite() {
            return Err(Error::config("ln_eps must be positive and phi_bias_init finite"));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let (d, f) = (self.embed_dim, self.mlp_dim);
        let mut out = vec![
            ("tok_emb".to_string(), (self.vocab_size, d)),
            ("pos_emb".to_string(), (self.context_len, d)),
        ];
        for i in 0..self.n_blocks {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("ln1.g"), (1, d)),
                (p("ln1.b"), (1, d)),
                (p("attn.wq"), (d, d)),
                (p("attn.wk"), (d, d)),
                (p("attn.wv"), (d, d)),
                (p("attn.wo"), (d, d)),
                (p("ln2.g"), (1, d)),
                (p("ln2.b"), (1, d)),
                (p("mlp.w1"), (d, f)),
                (p("mlp.b1"), (1, f)),
                (p("mlp.w2"), (f, d)),
                (p("mlp.b2"), (1, d)),
            ]);
        }
        out.extend([
            ("ln_f.g".to_string(), (1, d)),
            ("ln_f.b".to_string(), (1, d)),
            ("head.logits.w".to_string(), (d, self.num_actions)),
            ("head.logits.b".to_string(), (1, self.num_actions)),
        ]);
        for h in ["phi", "h1", "h2"] {
            out.push((format!("head.{h}.w"), (d, 1)));
            out.push((format!("head.{h}.b"), (1, 1)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Params {
        Params { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Rounds every entry to the nearest `f32` so that checkpoints store
    /// the in-memory values exactly.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub params: Params,
}

/// Parameter leaves of one network inside a graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut {
    /// Final normalized features `[T × d]`.
    pub hidden: Tensor,
    /// `[T × num_actions]`
    pub logits: Tensor,
    pub v_phi: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

pub fn token_ids(tokens: &[Token], config: &ModelConfig) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(Error::Shape("empty token sequence".into()));
    }
    if tokens.len() > config.context_len {
        return Err(Error::Shape(format!(
            "sequence of {} tokens exceeds context_len {}",
            tokens.len(),
            config.context_len
        )));
    }
    tokens
        .iter()
        .map(|t| {
            if t.id() < config.vocab_size {
                Ok(t.id())
            } else {
                Err(Error::validation(format!("token id {} out of range", t.id())))
            }
        })
        .collect()
}

/// Random init: scaled uniform weights, unit norms, zero biases, zero value
/// head weights. Values are rounded to `f32`.
pub fn init_model<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Network> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, (rows, cols)) in config.layout() {
        let leaf = name.rsplit('.').next().unwrap_or("");
        let mut t = Tensor::zeros(rows, cols);
        let bound = match ParamGroup::of(&name) {
            ParamGroup::Embedding => Some(0.1),
            ParamGroup::LogitsHead if leaf == "w" => Some(0.1 / (rows as f64).sqrt()),
            ParamGroup::Block if leaf.starts_with('w') => Some((1.0 / rows as f64).sqrt()),
            _ => None,
        };
        if let Some(b) = bound {
            for v in &mut t.data {
                *v = rng.gen_range(-b..b);
            }
        }
        if leaf == "g" {
            t.data.fill(1.0);
        }
        if name == "head.phi.b" {
            t.data.fill(config.phi_bias_init);
        }
        tensors.insert(name, t);
    }
    let mut params = Params::from_map(tensors);
    params.round_to_f32();
    Ok(Network {
        config: config.clone(),
        params,
    })
}

impl Network {
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Network> {
        config.validate()?;
        for (name, shape) in config.layout() {
            let t = params.get(&name)?;
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if params.as_map().len() != config.layout().len() {
            return Err(Error::Shape("unexpected parameters in checkpoint".into()));
        }
        Ok(Network { config, params })
    }

    /// Adds every parameter to `g` as a leaf; `trainable` decides which ones
    /// receive gradients. Names are prefixed with `prefix`.
    pub fn bind(&self, g: &mut Graph, prefix: &str, trainable: impl Fn(&str) -> bool) -> Bound {
        self.bind_filtered(g, prefix, |_| true, trainable)
    }

    /// Like [`Network::bind`], restricted to the names accepted by `include`.
    pub fn bind_filtered(
        &self,
        g: &mut Graph,
        prefix: &str,
        include: impl Fn(&str) -> bool,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound {
        let vars = self
            .params
            .iter()
            .filter(|(name, _)| include(name))
            .map(|(name, t)| {
                let full = format!("{prefix}{name}");
                let v = g.param(&full, t.clone(), trainable(name));
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Transformer trunk up to the final norm: `[T × d]` features.
    pub fn trunk(&self, g: &mut Graph, b: &Bound, ids: &[usize]) -> Var {
        let c = &self.config;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let te = g.gather(b.get("tok_emb"), ids);
        let pe = g.gather(b.get("pos_emb"), &positions);
        let mut x = g.add(te, pe);
        let scale = 1.0 / (c.embed_dim as f64).sqrt();
        for i in 0..c.n_blocks {
            let p = |s: &str| b.get(&format!("blocks.{i}.{s}"));
            let h = g.layer_norm(x, p("ln1.g"), p("ln1.b"), c.ln_eps);
            let q = g.matmul(h, p("attn.wq"));
            let k = g.matmul(h, p("attn.wk"));
            let v = g.matmul(h, p("attn.wv"));
            let s = g.matmul_bt(q, k);
            let s = g.scale(s, scale);
            let a = g.causal_softmax(s);
            let a = g.matmul(a, v);
            let o = g.matmul(a, p("attn.wo"));
            x = g.add(x, o);
            let h = g.layer_norm(x, p("ln2.g"), p("ln2.b"), c.ln_eps);
            let m = g.matmul(h, p("mlp.w1"));
            let m = g.add_row(m, p("mlp.b1"));
            let m = g.gelu(m);
            let m = g.matmul(m, p("mlp.w2"));
            let m = g.add_row(m, p("mlp.b2"));
            x = g.add(x, m);
        }
        g.layer_norm(x, b.get("ln_f.g"), b.get("ln_f.b"), c.ln_eps)
    }

    /// Linear head `hidden · W + b`; `which` is `logits`, `phi`, `h1` or `h2`.
    pub fn head(&self, g: &mut Graph, b: &Bound, hidden: Var, which: &str) -> Var {
        let y = g.matmul(hidden, b.get(&format!("head.{which}.w")));
        g.add_row(y, b.get(&format!("head.{which}.b")))
    }

    /// Full-sequence forward pass without gradients.
    pub fn forward(&self, tokens: &[Token]) -> Result<ForwardOut> {
        let ids = token_ids(tokens, &self.config)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, "", |_| false);
        let hidden = self.trunk(&mut g, &b, &ids);
        let logits = self.head(&mut g, &b, hidden, "logits");
        let phi = self.head(&mut g, &b, hidden, "phi");
        let h1 = self.head(&mut g, &b, hidden, "h1");
        let h2 = self.head(&mut g, &b, hidden, "h2");
        Ok(ForwardOut {
            hidden: g.value(hidden).clone(),
            logits: g.value(logits).clone(),
            v_phi: g.value(phi).data.clone(),
            h1: g.value(h1).data.clone(),
            h2: g.value(h2).data.clone(),
        })
    }

    /// Evaluates a scalar head on precomputed features.
    pub fn scalar_head(&self, hidden: &[f64], which: &str) -> Result<f64> {
        let w = self.params.get(&format!("head.{which}.w"))?;
        let b = self.params.get(&format!("head.{which}.b"))?;
        let mut out = [0.0];
        tensor::matmul_acc(hidden, &w.data, &mut out, 1, w.rows, 1);
        Ok(out[0] + b.data[0])
    }

    pub fn logits_head(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let w = self.params.get("head.logits.w")?;
        let b = self.params.get("head.logits.b")?;
        let mut out = vec![0.0; w.cols];
        tensor::matmul_acc(hidden, &w.data, &mut out, 1, w.rows, w.cols);
        for (o, bv) in out.iter_mut().zip(&b.data) {
            *o += bv;
        }
        Ok(out)
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            net: self,
            pos: 0,
            keys: vec![Vec::new(); self.config.n_blocks],
            values: vec![Vec::new(); self.config.n_blocks],
        }
    }
}

/// Incremental decoding with a key/value cache. Feeding tokens one at a time
/// reproduces the rows of [`Network::forward`] exactly.
pub struct Decoder<'a> {
    net: &'a Network,
    pos: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl Decoder<'_> {
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consumes one token and returns the final features at its position.
    pub fn step(&mut self, token: Token) -> Result<Vec<f64>> {
        let net = self.net;
        let c = &net.config;
        let id = token_ids(&[token], c)?[0];
        if self.pos >= c.context_len {
            return Err(Error::Shape(format!("decoder exceeded context_len {}", c.context_len)));
        }
        let p = |s: &str| net.params.get(s);
        let d = c.embed_dim;
        let te = p("tok_emb")?.row(id);
        let pe = p("pos_emb")?.row(self.pos);
        let mut x: Vec<f64> = te.iter().zip(pe).map(|(a, b)| a + b).collect();
        let scale = 1.0 / (d as f64).sqrt();
        let linear = |input: &[f64], w: &Tensor| {
            let mut out = vec![0.0; w.cols];
            tensor::matmul_acc(input, &w.data, &mut out, 1, w.rows, w.cols);
            out
        };
        for i in 0..c.n_blocks {
            let name = |s: &str| format!("blocks.{i}.{s}");
            let mut h = vec![0.0; d];
            tensor::layer_norm_row(&x, &p(&name("ln1.g"))?.data, &p(&name("ln1.b"))?.data, c.ln_eps, &mut h);
            let q = linear(&h, p(&name("attn.wq"))?);
            let k = linear(&h, p(&name("attn.wk"))?);
            let v = linear(&h, p(&name("attn.wv"))?);
            self.keys[i].extend_from_slice(&k);
            self.values[i].extend_from_slice(&v);
            let n = self.pos + 1;
            let scores: Vec<f64> = (0..n)
                .map(|j| tensor::dot(&q, &self.keys[i][j * d..(j + 1) * d]) * scale)
                .collect();
            let mut probs = vec![0.0; n];
            tensor::causal_softmax_row(&scores, self.pos, &mut probs);
            let mut a = vec![0.0; d];
            tensor::matmul_acc(&probs, &self.values[i], &mut a, 1, n, d);
            let o = linear(&a, p(&name("attn.wo"))?);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }
            tensor::layer_norm_row(&x, &p(&name("ln2.g"))?.data, &p(&name("ln2.b"))?.data, c.ln_eps, &mut h);
            let mut m = linear(&h, p(&name("mlp.w1"))?);
            for (mv, bv) in m.iter_mut().zip(&p(&name("mlp.b1"))?.data) {
                *mv += bv;
            }
            for mv in &mut m {
                *mv = tensor::gelu(*mv);
            }
            let mut m2 = linear(&m, p(&name("mlp.w2"))?);
            for (mv, bv) in m2.iter_mut().zip(&p(&name("mlp.b2"))?.data) {
                *mv += bv;
            }
            for (xv, mv) in x.iter_mut().zip(&m2) {
                *xv += mv;
            }
        }
        let mut out = vec![0.0; d];
        tensor::layer_norm_row(&x, &p("ln_f.g")?.data, &p("ln_f.b")?.data, c.ln_eps, &mut out);
        self.pos += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            mlp_dim: 16,
            ..ModelConfig::default()
        }
    }

    fn seq(ids: &[u8]) -> Vec<Token> {
        ids.iter().map(|&i| Token::new(i as usize).unwrap()).collect()
    }

    #[test]
    fn init_is_deterministic_and_heads_start_flat() {
        let a = init_model(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_model(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.params.hash(), b.params.hash());
        let out = a.forward(&seq(&[28, 30, 20, 30, 21, 10, 11])).unwrap();
        assert!(out.v_phi.iter().all(|&v| v == small().phi_bias_init));
        assert!(out.h1.iter().zip(&out.h2).all(|(p, q)| p - q == 0.0));
        assert_eq!(out.logits.shape(), (7, NUM_ACTIONS));
    }

    #[test]
    fn causal_and_incremental() {
        let net = init_model(&small(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let tokens = seq(&[28, 30, 20, 30, 21, 28, 10, 11, 12]);
        let full = net.forward(&tokens).unwrap();
        let mut perturbed = tokens.clone();
        perturbed[5] = Token::X;
        let other = net.forward(&perturbed).unwrap();
        for r in 0..5 {
            assert_eq!(full.logits.row(r), other.logits.row(r));
        }
        assert_ne!(full.logits.row(5), other.logits.row(5));

        let mut dec = net.decoder();
        for (r, &t) in tokens.iter().enumerate() {
            let h = dec.step(t).unwrap();
            assert_eq!(h.as_slice(), full.hidden.row(r));
            assert_eq!(net.logits_head(&h).unwrap().as_slice(), full.logits.row(r));
            assert_eq!(net.scalar_head(&h, "phi").unwrap(), full.v_phi[r]);
        }
    }

    #[test]
    fn rejects_bad_sequences() {
        let net = init_model(&small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(net.forward(&[]).is_err());
        let long = vec![Token::X; net.config.context_len + 1];
        assert!(net.forward(&long).is_err());
    }

    #[test]
    fn stage_masks() {
        assert!(Stage::Ckpt.trains_param("tok_emb"));
        assert!(!Stage::Ckpt.trains_param("head.phi.w"));
        assert!(Stage::Phi.trains_param("head.phi.b"));
        assert!(!Stage::Phi.trains_param("blocks.0.attn.wq"));
        assert!(Stage::Theta.trains_param("ln_f.g"));
        assert!(Stage::Theta.trains_param("head.h1.w"));
        assert!(!Stage::Theta.trains_param("head.h2.w"));
        assert!(!Stage::Theta.trains_param("pos_emb"));
        assert!(!Stage::Theta.trains_param("head.phi.w"));
    }
}
