//! Dual-stream syndrome/logical transformer.
//!
//! Shapes inside a forward pass are batched: a batch of `B` syndromes gives a
//! syndrome stream of `B·(m+1)` rows (global token first in every sample) and
//! a logical stream of `B·C` rows.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codes::DecodingProblem;
use crate::diff::{AllowedKeys, Checkpoint, DiffError, Graph, Tensor, Var};
use crate::gf2::BitVector;
use crate::noise::{stream_rng, StreamDomain};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name}: {reason}")]
    Parameter { name: String, reason: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Size hyperparameters independent of the code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Syndrome and logical streams use the same block weights in each layer.
    pub share_weights: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 3,
            heads: 4,
            share_weights: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub m: usize,
    pub n_err: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn for_problem(arch: Architecture, problem: &DecodingProblem) -> Result<Self, ModelError> {
        let c = Self {
            arch,
            m: problem.m(),
            n_err: problem.n_err(),
            n_classes: problem.n_classes(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let a = &self.arch;
        if a.d == 0 || a.heads == 0 || !a.d.is_multiple_of(a.heads) {
            return Err(ModelError::Config(format!("d={} not divisible by heads={}", a.d, a.heads)));
        }
        if self.m == 0 || self.n_err == 0 || self.n_classes < 2 {
            return Err(ModelError::Config("empty problem".into()));
        }
        Ok(())
    }

    pub fn prior_hidden(&self) -> usize {
        4 * self.m
    }
}

/// Parameters of one attention + FFN block for one stream.
pub fn block_param_count(d: usize) -> usize {
    12 * d * d + 9 * d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    prior_w1: usize,
    prior_b1: usize,
    prior_w2: usize,
    prior_b2: usize,
    ws: usize,
    global: usize,
    wl: usize,
    /// `[syndrome, logical]` per layer; equal when weights are shared.
    blocks: Vec<[Block; 2]>,
    final_s: (usize, usize),
    final_l: (usize, usize),
    pool_s: usize,
    out_s: usize,
    pool_l: usize,
    out_l: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Xavier,
}

struct Spec {
    name: String,
    shape: (usize, usize),
    init: Init,
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let d = cfg.arch.d;
    let c = cfg.n_classes;
    let mut specs: Vec<Spec> = Vec::new();
    let mut add = |name: String, shape: (usize, usize), init: Init| {
        specs.push(Spec { name, shape, init });
        specs.len() - 1
    };
    let h = cfg.prior_hidden();
    let prior_w1 = add("prior.w1".into(), (cfg.m, h), Init::Xavier);
    let prior_b1 = add("prior.b1".into(), (1, h), Init::Zeros);
    let prior_w2 = add("prior.w2".into(), (h, c), Init::Zeros);
    let prior_b2 = add("prior.b2".into(), (1, c), Init::Zeros);
    let ws = add("embed.syndrome".into(), (cfg.m, d), Init::Xavier);
    let global = add("embed.global".into(), (1, d), Init::Xavier);
    let wl = add("embed.logical".into(), (c, d), Init::Xavier);
    let mut blocks = Vec::new();
    for l in 0..cfg.arch.layers {
        let mut make = |tag: &str| {
            let p = format!("layer{l}.{tag}");
            Block {
                ln1_g: add(format!("{p}.ln1.gamma"), (1, d), Init::Ones),
                ln1_b: add(format!("{p}.ln1.beta"), (1, d), Init::Zeros),
                wq: add(format!("{p}.attn.wq"), (d, d), Init::Xavier),
                wk: add(format!("{p}.attn.wk"), (d, d), Init::Xavier),
                wv: add(format!("{p}.attn.wv"), (d, d), Init::Xavier),
                wo: add(format!("{p}.attn.wo"), (d, d), Init::Xavier),
                ln2_g: add(format!("{p}.ln2.gamma"), (1, d), Init::Ones),
                ln2_b: add(format!("{p}.ln2.beta"), (1, d), Init::Zeros),
                ff_w1: add(format!("{p}.ffn.w1"), (d, 4 * d), Init::Xavier),
                ff_b1: add(format!("{p}.ffn.b1"), (1, 4 * d), Init::Zeros),
                ff_w2: add(format!("{p}.ffn.w2"), (4 * d, d), Init::Xavier),
                ff_b2: add(format!("{p}.ffn.b2"), (1, d), Init::Zeros),
            }
        };
        if cfg.arch.share_weights {
            let b = make("shared");
            blocks.push([b, b]);
        } else {
            let s = make("syndrome");
            let lg = make("logical");
            blocks.push([s, lg]);
        }
    }
    let final_s = (
        add("final.syndrome.gamma".into(), (1, d), Init::Ones),
        add("final.syndrome.beta".into(), (1, d), Init::Zeros),
    );
    let final_l = (
        add("final.logical.gamma".into(), (1, d), Init::Ones),
        add("final.logical.beta".into(), (1, d), Init::Zeros),
    );
    let pool_s = add("head.syndrome.pool".into(), (d, 1), Init::Xavier);
    let out_s = add("head.syndrome.out".into(), (cfg.n_err, cfg.m), Init::Xavier);
    let pool_l = add("head.logical.pool".into(), (d, 1), Init::Xavier);
    let out_l = add("head.logical.out".into(), (c, c), Init::Xavier);
    let layout = Layout {
        prior_w1,
        prior_b1,
        prior_w2,
        prior_b2,
        ws,
        global,
        wl,
        blocks,
        final_s,
        final_l,
        pool_s,
        out_s,
        pool_l,
        out_l,
    };
    (layout, specs)
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

impl ModelParams {
    /// Xavier-normal matrices, unit layer-norm gains and zero biases.
    /// Tensor `i` draws from init stream `i` of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (i, s) in specs.into_iter().enumerate() {
            let (r, c) = s.shape;
            let t = match s.init {
                Init::Zeros => Tensor::zeros(r, c),
                Init::Ones => Tensor::filled(r, c, 1.0),
                Init::Xavier => {
                    let std = (2.0 / (r + c) as f64).sqrt();
                    let mut rng = stream_rng(seed, StreamDomain::Init, i as u64);
                    let data = (0..r * c).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
                    Tensor::from_vec(r, c, data)?
                }
            };
            names.push(s.name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
            layout,
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Parameters held by the transformer blocks (excluding embeddings,
    /// prior, final norms and heads).
    pub fn block_count(&self) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with("layer"))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Registers every tensor on `g`; trainable when `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>, DiffError> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn to_checkpoint(&self, header: serde_json::Value) -> Checkpoint {
        Checkpoint {
            header,
            tensors: self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect(),
        }
    }

    /// Loads tensors by name into a freshly laid-out parameter set.
    pub fn from_tensors(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self, ModelError> {
        let mut p = Self::init(config, 0)?;
        if tensors.len() != p.names.len() {
            return Err(ModelError::Parameter {
                name: "*".into(),
                reason: format!("expected {} tensors, found {}", p.names.len(), tensors.len()),
            });
        }
        for (name, t) in tensors {
            let slot = p.get_mut(name).ok_or_else(|| ModelError::Parameter {
                name: name.clone(),
                reason: "unknown".into(),
            })?;
            if slot.shape() != t.shape() {
                return Err(ModelError::Parameter {
                    name: name.clone(),
                    reason: format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            if !t.is_finite() {
                return Err(ModelError::Parameter {
                    name: name.clone(),
                    reason: "non-finite".into(),
                });
            }
            *slot = t.clone();
        }
        Ok(p)
    }
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `B x C` prior logits from the MLP.
    pub prior_logits: Var,
    /// `B x C` refined class logits.
    pub class_logits: Var,
    /// `B x n_err` error logits.
    pub error_logits: Var,
    /// Syndrome self-attention node of every layer.
    pub self_attention: Vec<Var>,
}

pub struct LayerOut {
    pub syndrome: Var,
    pub logical: Var,
    pub self_attention: Var,
}

/// The model bound to one decoding problem's attention mask.
#[derive(Clone, Debug)]
pub struct Sltd {
    pub params: ModelParams,
    allowed: AllowedKeys,
}

impl Sltd {
    pub fn new(params: ModelParams, problem: &DecodingProblem) -> Result<Self, ModelError> {
        let mask = problem.attention_mask();
        if mask.size() != params.config.m + 1 {
            return Err(ModelError::Config(format!(
                "mask size {} does not match m={}",
                mask.size(),
                params.config.m
            )));
        }
        Ok(Self {
            params,
            allowed: Arc::new(mask.allowed_lists()),
        })
    }

    /// Uses an explicit allowed-key pattern for the syndrome stream.
    pub fn with_allowed(params: ModelParams, allowed: AllowedKeys) -> Result<Self, ModelError> {
        if allowed.len() != params.config.m + 1 {
            return Err(ModelError::Config("mask size mismatch".into()));
        }
        Ok(Self { params, allowed })
    }

    pub fn allowed(&self) -> &AllowedKeys {
        &self.allowed
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Prior MLP: `gelu(s W1 + b1) W2 + b2`.
    pub fn prior_forward(&self, g: &mut Graph, p: &[Var], s: Var) -> Result<Var, DiffError> {
        let l = &self.params.layout;
        let h = g.matmul(s, p[l.prior_w1])?;
        let h = g.add_row(h, p[l.prior_b1])?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, p[l.prior_w2])?;
        g.add_row(o, p[l.prior_b2])
    }

    /// Syndrome stream `[g; s_i W_S[i]]` and logical stream `ℓ̃_j W_L[j]`.
    pub fn embed(&self, g: &mut Graph, p: &[Var], s: Var, prior: Var) -> Result<(Var, Var), DiffError> {
        let l = &self.params.layout;
        let ts = g.stream_embed(p[l.ws], s, Some(p[l.global]))?;
        let tl = g.stream_embed(p[l.wl], prior, None)?;
        Ok((ts, tl))
    }

    fn ffn(&self, g: &mut Graph, p: &[Var], b: &Block, x: Var) -> Result<Var, DiffError> {
        let y = g.layer_norm(x, p[b.ln2_g], p[b.ln2_b], LN_EPS)?;
        let h = g.matmul(y, p[b.ff_w1])?;
        let h = g.add_row(h, p[b.ff_b1])?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, p[b.ff_w2])?;
        let o = g.add_row(o, p[b.ff_b2])?;
        g.add(x, o)
    }

    /// One layer: masked self-attention on the syndrome stream, logical
    /// cross-attention into the updated syndrome stream, then a FFN per stream.
    pub fn layer_forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        layer: usize,
        ts: Var,
        tl: Var,
        batch: usize,
    ) -> Result<LayerOut, DiffError> {
        let heads = self.params.config.arch.heads;
        let [bs, bl] = self.params.layout.blocks[layer];

        let x = g.layer_norm(ts, p[bs.ln1_g], p[bs.ln1_b], LN_EPS)?;
        let q = g.matmul(x, p[bs.wq])?;
        let k = g.matmul(x, p[bs.wk])?;
        let v = g.matmul(x, p[bs.wv])?;
        let att = g.attention(q, k, v, batch, heads, Some(self.allowed.clone()))?;
        let o = g.matmul(att, p[bs.wo])?;
        let ts = g.add(ts, o)?;

        let y = g.layer_norm(tl, p[bl.ln1_g], p[bl.ln1_b], LN_EPS)?;
        let q = g.matmul(y, p[bl.wq])?;
        let k = g.matmul(ts, p[bl.wk])?;
        let v = g.matmul(ts, p[bl.wv])?;
        let cross = g.attention(q, k, v, batch, heads, None)?;
        let o = g.matmul(cross, p[bl.wo])?;
        let tl = g.add(tl, o)?;

        let ts = self.ffn(g, p, &bs, ts)?;
        let tl = self.ffn(g, p, &bl, tl)?;
        Ok(LayerOut {
            syndrome: ts,
            logical: tl,
            self_attention: att,
        })
    }

    /// Full forward pass on a `B x m` matrix of `±1` syndromes.
    pub fn forward(&self, g: &mut Graph, p: &[Var], syndromes: Var) -> Result<Outputs, DiffError> {
        let cfg = &self.params.config;
        let l = &self.params.layout;
        let (batch, m) = g.shape(syndromes);
        if m != cfg.m {
            return Err(DiffError::ShapeMismatch {
                op: "forward",
                left: (batch, m),
                right: (batch, cfg.m),
            });
        }
        let prior = self.prior_forward(g, p, syndromes)?;
        let (mut ts, mut tl) = self.embed(g, p, syndromes, prior)?;
        let mut self_attention = Vec::with_capacity(cfg.arch.layers);
        for layer in 0..cfg.arch.layers {
            let out = self.layer_forward(g, p, layer, ts, tl, batch)?;
            ts = out.syndrome;
            tl = out.logical;
            self_attention.push(out.self_attention);
        }
        let ts = g.layer_norm(ts, p[l.final_s.0], p[l.final_s.1], LN_EPS)?;
        let tl = g.layer_norm(tl, p[l.final_l.0], p[l.final_l.1], LN_EPS)?;

        let pooled = g.matmul(ts, p[l.pool_s])?;
        let pooled = g.reshape(pooled, batch, m + 1)?;
        let pooled = g.slice_cols(pooled, 1, m + 1)?;
        let error_logits = g.matmul_nt(pooled, p[l.out_s])?;

        let pooled = g.matmul(tl, p[l.pool_l])?;
        let pooled = g.reshape(pooled, batch, cfg.n_classes)?;
        let class_logits = g.matmul_nt(pooled, p[l.out_l])?;
        Ok(Outputs {
            prior_logits: prior,
            class_logits,
            error_logits,
            self_attention,
        })
    }

    /// Inference on a `B x m` syndrome matrix. Returns the tensors and the
    /// forward FLOP count.
    pub fn predict(&self, syndromes: &Tensor) -> Result<Prediction, DiffError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let s = g.constant(syndromes.clone())?;
        let out = self.forward(&mut g, &p, s)?;
        Ok(Prediction {
            prior_logits: g.value(out.prior_logits).clone(),
            class_logits: g.value(out.class_logits).clone(),
            error_logits: g.value(out.error_logits).clone(),
            flops: g.flops(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub prior_logits: Tensor,
    pub class_logits: Tensor,
    pub error_logits: Tensor,
    pub flops: u64,
}

/// Argmax; the lowest index wins ties.
pub fn predict_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// `e_i = 1` iff `logit_i > 0`.
pub fn hard_decision(logits: &[f64]) -> BitVector {
    BitVector::from_bools(logits.iter().map(|&x| x > 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::{Sector, StabilizerCode, SyndromeMask};
    use crate::diff::gradient_check;
    use crate::losses::{combined_loss, logical_supports, LossWeights};
    use crate::noise::{make_batch, NoiseModel, NoiseSpec};

    fn rep3() -> DecodingProblem {
        StabilizerCode::repetition(3).unwrap().sector_problem(Sector::XErrors).unwrap()
    }

    fn tiny_arch() -> Architecture {
        Architecture {
            d: 8,
            layers: 2,
            heads: 2,
            share_weights: true,
        }
    }

    /// Replaces every tensor with draws of scale `scale` so no path is dead.
    fn randomize(p: &mut ModelParams, seed: u64, scale: f64) {
        for (i, t) in p.tensors_mut().iter_mut().enumerate() {
            let mut rng = stream_rng(seed, StreamDomain::Test, i as u64);
            for x in t.data_mut() {
                *x = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    fn syndromes(rows: &[&[f64]]) -> Tensor {
        Tensor::from_vec(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn parameter_count_arithmetic() {
        let problem = StabilizerCode::rotated_surface(3).unwrap().depolarizing_problem().unwrap();
        for d in [8, 32] {
            let mut arch = Architecture { d, layers: 3, heads: 4, share_weights: true };
            let shared = ModelParams::init(ModelConfig::for_problem(arch, &problem).unwrap(), 1).unwrap();
            arch.share_weights = false;
            let split = ModelParams::init(ModelConfig::for_problem(arch, &problem).unwrap(), 1).unwrap();
            assert_eq!(shared.block_count(), 3 * block_param_count(d));
            assert_eq!(split.block_count(), 2 * shared.block_count());
            assert_eq!(split.count() - shared.count(), shared.block_count());
            let (m, c, n) = (8, 4, 18);
            let rest = m * 4 * m + 4 * m + 4 * m * c + c + m * d + d + c * d + 4 * d + 2 * d + n * m + c * c;
            assert_eq!(shared.count(), shared.block_count() + rest);
        }
    }

    #[test]
    fn fresh_model_shapes_and_uniform_prior() {
        let problem = rep3();
        let cfg = ModelConfig::for_problem(tiny_arch(), &problem).unwrap();
        let model = Sltd::new(ModelParams::init(cfg, 3).unwrap(), &problem).unwrap();
        let pred = model.predict(&syndromes(&[&[1.0, -1.0], &[1.0, -1.0], &[-1.0, -1.0]])).unwrap();
        assert!(pred.prior_logits.data().iter().all(|&x| x == 0.0));
        assert!(pred.class_logits.is_finite() && pred.error_logits.is_finite());
        // A zero error head would sit at a stationary point of the parity entropy.
        assert!(pred.error_logits.data().iter().any(|&x| x != 0.0));
        assert_eq!(pred.error_logits.shape(), (3, 3));
        assert_eq!(pred.class_logits.shape(), (3, 2));
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let problem = rep3();
        let cfg = ModelConfig::for_problem(tiny_arch(), &problem).unwrap();
        let mut params = ModelParams::init(cfg, 3).unwrap();
        randomize(&mut params, 4, 0.5);
        let model = Sltd::new(params, &problem).unwrap();
        let pred = model.predict(&syndromes(&[&[1.0, -1.0], &[1.0, -1.0]])).unwrap();
        assert_eq!(pred.class_logits.row(0), pred.class_logits.row(1));
        assert_eq!(pred.error_logits.row(0), pred.error_logits.row(1));
        let again = model.predict(&syndromes(&[&[1.0, -1.0], &[1.0, -1.0]])).unwrap();
        assert_eq!(again.error_logits, pred.error_logits);
    }

    #[test]
    fn embedding_contract() {
        let problem = rep3();
        let cfg = ModelConfig::for_problem(tiny_arch(), &problem).unwrap();
        let model = Sltd::new(ModelParams::init(cfg, 5).unwrap(), &problem).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false).unwrap();
        let s = g.constant(syndromes(&[&[1.0, 1.0], &[-1.0, 1.0]])).unwrap();
        let prior = g.constant(Tensor::zeros(2, 2)).unwrap();
        let (ts, tl) = model.embed(&mut g, &p, s, prior).unwrap();
        let v = g.value(ts);
        assert_eq!(v.row(0), v.row(3));
        assert_eq!(v.row(0), model.params.get("embed.global").unwrap().row(0));
        for (a, b) in v.row(1).iter().zip(v.row(4)) {
            assert_eq!(*a, -b);
        }
        assert_eq!(v.row(2), v.row(5));
        assert!(g.value(tl).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn masked_pairs_get_zero_weight() {
        let problem = StabilizerCode::rotated_surface(3).unwrap().sector_problem(Sector::XErrors).unwrap();
        let m = problem.m();
        let cfg = ModelConfig::for_problem(Architecture { d: 8, layers: 1, heads: 2, share_weights: true }, &problem).unwrap();
        let mut params = ModelParams::init(cfg, 1).unwrap();
        randomize(&mut params, 2, 0.7);
        let mask = SyndromeMask::diagonal(m);
        let model = Sltd::with_allowed(params, Arc::new(mask.allowed_lists())).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false).unwrap();
        let s = g.constant(Tensor::filled(2, m, -1.0)).unwrap();
        let out = model.forward(&mut g, &p, s).unwrap();
        for b in 0..2 {
            for h in 0..2 {
                let w = g.attention_weights(out.self_attention[0], b, h).unwrap();
                for i in 1..=m {
                    for j in 1..=m {
                        if i != j {
                            assert_eq!(w.get(i, j), 0.0);
                        }
                    }
                    assert!(w.get(i, 0) > 0.0 && w.get(i, i) > 0.0);
                    let sum: f64 = w.row(i).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_projections_make_layers_identity() {
        let problem = rep3();
        let cfg = ModelConfig::for_problem(tiny_arch(), &problem).unwrap();
        let mut params = ModelParams::init(cfg, 1).unwrap();
        randomize(&mut params, 9, 0.5);
        let names: Vec<String> = params.names().to_vec();
        for n in names {
            if n.ends_with("attn.wo") || n.ends_with("ffn.w2") || n.ends_with("ffn.b2") {
                params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let model = Sltd::new(params, &problem).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false).unwrap();
        let s = g.constant(syndromes(&[&[1.0, -1.0], &[-1.0, -1.0]])).unwrap();
        let prior = model.prior_forward(&mut g, &p, s).unwrap();
        let (ts, tl) = model.embed(&mut g, &p, s, prior).unwrap();
        for layer in 0..2 {
            let out = model.layer_forward(&mut g, &p, layer, ts, tl, 2).unwrap();
            assert_eq!(g.value(out.syndrome), g.value(ts));
            assert_eq!(g.value(out.logical), g.value(tl));
        }
    }

    #[test]
    fn swapping_tokens_permutes_layer_outputs() {
        let problem = StabilizerCode::rotated_surface(3).unwrap().sector_problem(Sector::ZErrors).unwrap();
        let m = problem.m();
        let cfg = ModelConfig::for_problem(Architecture { d: 8, layers: 1, heads: 2, share_weights: false }, &problem).unwrap();
        let mut params = ModelParams::init(cfg, 1).unwrap();
        randomize(&mut params, 6, 0.6);
        let mask = problem.attention_mask();
        // Find two syndromes that do not interact.
        let (a, b) = (1..=m)
            .flat_map(|i| (i + 1..=m).map(move |j| (i, j)))
            .find(|&(i, j)| !mask.allows(i, j))
            .expect("non-interacting pair");
        let mut perm: Vec<usize> = (0..=m).collect();
        perm.swap(a, b);
        let base = Sltd::new(params.clone(), &problem).unwrap();
        let mut swapped_params = params.clone();
        {
            let ws = swapped_params.get_mut("embed.syndrome").unwrap();
            let (ra, rb) = (ws.row(a - 1).to_vec(), ws.row(b - 1).to_vec());
            ws.row_mut(a - 1).copy_from_slice(&rb);
            ws.row_mut(b - 1).copy_from_slice(&ra);
        }
        let swapped = Sltd::with_allowed(swapped_params, Arc::new(mask.permuted(&perm).allowed_lists())).unwrap();
        let s: Vec<f64> = (0..m).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
        let mut s2 = s.clone();
        s2.swap(a - 1, b - 1);
        let run = |model: &Sltd, s: &[f64]| {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, false).unwrap();
            let sv = g.constant(Tensor::from_vec(1, m, s.to_vec()).unwrap()).unwrap();
            let prior = g.constant(Tensor::from_vec(1, 2, vec![0.3, -0.8]).unwrap()).unwrap();
            let (ts, tl) = model.embed(&mut g, &p, sv, prior).unwrap();
            let out = model.layer_forward(&mut g, &p, 0, ts, tl, 1).unwrap();
            (g.value(out.syndrome).clone(), g.value(out.logical).clone())
        };
        let (ts1, tl1) = run(&base, &s);
        let (ts2, tl2) = run(&swapped, &s2);
        for i in 0..=m {
            for (x, y) in ts1.row(i).iter().zip(ts2.row(perm[i])) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for (x, y) in tl1.data().iter().zip(tl2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn loss_of_model(model: &Sltd, problem: &DecodingProblem, g: &mut Graph, p: &[Var]) -> Result<Var, DiffError> {
        let spec = NoiseSpec::fixed(NoiseModel::Independent, 0.3).unwrap();
        let batch = make_batch(problem, &spec, 3, 11, StreamDomain::Test, 0).unwrap();
        let s = g.constant(Tensor::from_vec(3, problem.m(), batch.syndromes.clone()).unwrap())?;
        let out = model.forward(g, p, s)?;
        let t = combined_loss(
            g,
            out.prior_logits,
            out.class_logits,
            out.error_logits,
            &batch.classes,
            &batch.errors,
            logical_supports(&problem.logicals),
            &LossWeights::default(),
        )?;
        Ok(t.total)
    }

    #[test]
    fn full_model_gradient_check() {
        let problem = rep3();
        let cfg = ModelConfig::for_problem(tiny_arch(), &problem).unwrap();
        let mut params = ModelParams::init(cfg, 1).unwrap();
        randomize(&mut params, 21, 0.5);
        let model = Sltd::new(params.clone(), &problem).unwrap();
        let r = gradient_check(params.tensors(), 1e-5, 1e-6, |g, p| loss_of_model(&model, &problem, g, p)).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?} at {}", params.names()[r.worst.0]);
    }

    #[test]
    fn single_layer_gradient_check() {
        let problem = StabilizerCode::rotated_surface(3).unwrap().sector_problem(Sector::XErrors).unwrap();
        let cfg = ModelConfig::for_problem(Architecture { d: 8, layers: 1, heads: 2, share_weights: false }, &problem).unwrap();
        let mut params = ModelParams::init(cfg, 1).unwrap();
        randomize(&mut params, 5, 0.5);
        let model = Sltd::new(params.clone(), &problem).unwrap();
        let m = problem.m();
        let mut rng = stream_rng(2, StreamDomain::Test, 0);
        let ts0 = Tensor::from_vec(2 * (m + 1), 8, (0..2 * (m + 1) * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let tl0 = Tensor::from_vec(4, 8, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let wts = Tensor::from_vec(2 * (m + 1), 8, (0..2 * (m + 1) * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let wtl = Tensor::from_vec(4, 8, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut all = params.tensors().to_vec();
        all.push(ts0);
        all.push(tl0);
        let n = params.tensors().len();
        let r = gradient_check(&all, 1e-5, 1e-6, |g, p| {
            let out = model.layer_forward(g, &p[..n], 0, p[n], p[n + 1], 2)?;
            let a = g.constant(wts.clone())?;
            let b = g.constant(wtl.clone())?;
            let x = g.mul(out.syndrome, a)?;
            let y = g.mul(out.logical, b)?;
            let x = g.sum(x)?;
            let y = g.sum(y)?;
            g.add(x, y)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn prior_gradient_check() {
        let problem = rep3();
        let cfg = ModelConfig::for_problem(tiny_arch(), &problem).unwrap();
        let mut params = ModelParams::init(cfg, 1).unwrap();
        randomize(&mut params, 3, 0.8);
        let model = Sltd::new(params.clone(), &problem).unwrap();
        let r = gradient_check(params.tensors(), 1e-5, 1e-6, |g, p| {
            let s = g.constant(syndromes(&[&[1.0, -1.0], &[-1.0, -1.0]]))?;
            let prior = model.prior_forward(g, p, s)?;
            g.cross_entropy(prior, &[1, 0])
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn forward_cost_is_linear_in_syndrome_count() {
        let arch = Architecture::default();
        let mut cost = Vec::new();
        for l in [3, 5, 7] {
            let problem = StabilizerCode::rotated_surface(l).unwrap().depolarizing_problem().unwrap();
            let cfg = ModelConfig::for_problem(arch, &problem).unwrap();
            let model = Sltd::new(ModelParams::init(cfg, 1).unwrap(), &problem).unwrap();
            let pred = model.predict(&Tensor::filled(1, problem.m(), 1.0)).unwrap();
            cost.push((problem.m() as f64, pred.flops as f64));
        }
        // Growing m by a factor r may grow the cost by at most 1.2 r.
        for w in cost.windows(2) {
            let (m0, f0) = w[0];
            let (m1, f1) = w[1];
            assert!(f1 > f0);
            assert!(f1 / f0 <= 1.2 * m1 / m0, "{cost:?}");
        }
    }

    #[test]
    fn decision_rules() {
        assert_eq!(predict_class(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(predict_class(&[-1.0, 2.0, 2.0]), 1);
        assert!(hard_decision(&[0.0, 0.0]).is_zero());
        assert_eq!(hard_decision(&[0.1, -0.1, 3.0, 0.0]), BitVector::from_bits(&[1, 0, 1, 0]));
    }

    #[test]
    fn checkpoint_tensors_round_trip() {
        let problem = rep3();
        let cfg = ModelConfig::for_problem(tiny_arch(), &problem).unwrap();
        let params = ModelParams::init(cfg, 8).unwrap();
        let ck = params.to_checkpoint(serde_json::json!({}));
        let back = ModelParams::from_tensors(cfg, &ck.tensors).unwrap();
        assert_eq!(back.tensors(), params.tensors());
        let mut bad = ck.tensors.clone();
        bad[0].1 = Tensor::zeros(1, 1);
        assert!(ModelParams::from_tensors(cfg, &bad).is_err());
    }
}
