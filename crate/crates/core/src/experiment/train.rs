use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig};
use crate::codes::DecodingProblem;
use crate::diff::{cosine_lr, read_checkpoint, write_checkpoint, AdamConfig, AdamState, DiffError, Graph, Tensor};
use crate::losses::{combined_loss, logical_supports, LossWeights};
use crate::model::{predict_class, ModelConfig, ModelError, ModelParams, Sltd};
use crate::noise::{make_batch, Batch, NoiseError, StreamDomain};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: lp={lp} lc={lc} entropy={entropy}")]
    NonFiniteLoss { step: u64, lp: f64, lc: f64, entropy: f64 },
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub lp: f64,
    pub lc: f64,
    pub entropy: f64,
    /// Fraction of the batch whose refined class prediction is right.
    pub class_acc: f64,
    pub prior_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub sector: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub mean: StepStats,
}

fn accuracy(logits: &Tensor, classes: &[usize]) -> f64 {
    let hits = classes
        .iter()
        .enumerate()
        .filter(|(b, &c)| predict_class(logits.row(*b)) == c)
        .count();
    hits as f64 / classes.len() as f64
}

/// One forward/backward pass and Adam update.
pub fn train_step(
    model: &mut Sltd,
    adam: &mut AdamState,
    batch: &Batch,
    supports: &Arc<Vec<Vec<usize>>>,
    weights: &LossWeights,
    lr: f64,
    step: u64,
) -> Result<StepStats, TrainError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true)?;
    let s = g.constant(Tensor::from_vec(batch.len(), batch.m, batch.syndromes.clone())?)?;
    let out = model.forward(&mut g, &p, s)?;
    let terms = combined_loss(
        &mut g,
        out.prior_logits,
        out.class_logits,
        out.error_logits,
        &batch.classes,
        &batch.errors,
        supports.clone(),
        weights,
    )?;
    let val = |v: Option<crate::diff::Var>| v.map_or(0.0, |v| g.value(v).item());
    let stats = StepStats {
        loss: g.value(terms.total).item(),
        lp: val(terms.lp),
        lc: val(terms.lc),
        entropy: val(terms.entropy),
        class_acc: accuracy(g.value(out.class_logits), &batch.classes),
        prior_acc: accuracy(g.value(out.prior_logits), &batch.classes),
    };
    if !stats.loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            lp: stats.lp,
            lc: stats.lc,
            entropy: stats.entropy,
        });
    }
    g.backward(terms.total)?;
    let grads: Vec<Tensor> = p
        .iter()
        .zip(model.params.tensors())
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();
    adam.step(model.params.tensors_mut(), &grads, lr)?;
    Ok(stats)
}

/// Trains one sector model from scratch with the config's schedule.
pub fn train_sector(
    cfg: &ExperimentConfig,
    problem: &DecodingProblem,
    sector: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Sltd, Vec<EpochLog>), TrainError> {
    let mcfg = ModelConfig::for_problem(cfg.arch(), problem)?;
    let params = ModelParams::init(mcfg, cfg.seed.wrapping_add(sector as u64))?;
    let mut model = Sltd::new(params, problem)?;
    let mut adam = AdamState::new(model.params.tensors(), AdamConfig::default());
    let spec = cfg.train_spec();
    let weights = cfg.loss_weights();
    let total = cfg.total_steps();
    let supports = logical_supports(&problem.logicals);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut sum = StepStats::default();
        let mut lr = cfg.lr;
        for _ in 0..cfg.batches_per_epoch {
            let first = ((sector as u64) << 48) + step * cfg.batch_size as u64;
            let batch = make_batch(problem, &spec, cfg.batch_size, cfg.seed, StreamDomain::Training, first)?;
            lr = cosine_lr(cfg.lr, cfg.lr_floor, step, total);
            let st = train_step(&mut model, &mut adam, &batch, &supports, &weights, lr, step)?;
            sum.loss += st.loss;
            sum.lp += st.lp;
            sum.lc += st.lc;
            sum.entropy += st.entropy;
            sum.class_acc += st.class_acc;
            sum.prior_acc += st.prior_acc;
            step += 1;
        }
        let k = cfg.batches_per_epoch as f64;
        let log = EpochLog {
            sector,
            epoch,
            lr,
            mean: StepStats {
                loss: sum.loss / k,
                lp: sum.lp / k,
                lc: sum.lc / k,
                entropy: sum.entropy / k,
                class_acc: sum.class_acc / k,
                prior_acc: sum.prior_acc / k,
            },
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

/// Trained models for every sector of a config.
#[derive(Clone, Debug)]
pub struct TrainedDecoder {
    pub problems: Vec<DecodingProblem>,
    pub models: Vec<Sltd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    code: String,
    family: String,
    distance: usize,
    noise: String,
    sectors: Vec<String>,
    models: Vec<ModelConfig>,
    config_hash: String,
}

impl TrainedDecoder {
    pub fn train(cfg: &ExperimentConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<(Self, Vec<EpochLog>), TrainError> {
        let problems = cfg.problems()?;
        let mut models = Vec::new();
        let mut logs = Vec::new();
        for (i, p) in problems.iter().enumerate() {
            let (m, l) = train_sector(cfg, p, i, &mut on_epoch)?;
            models.push(m);
            logs.extend(l);
        }
        Ok((Self { problems, models }, logs))
    }

    fn header(&self, cfg: &ExperimentConfig) -> Header {
        Header {
            format: "saq-decoder".into(),
            code: self.problems[0].code_name.clone(),
            family: cfg.code.as_str().into(),
            distance: cfg.distance,
            noise: cfg.noise.as_str().into(),
            sectors: self.problems.iter().map(|p| p.sector.as_str().to_string()).collect(),
            models: self.models.iter().map(|m| *m.config()).collect(),
            config_hash: cfg.hash(),
        }
    }

    pub fn save(&self, cfg: &ExperimentConfig, path: &Path) -> Result<(), TrainError> {
        let header = serde_json::to_value(self.header(cfg)).expect("header serializes");
        let mut tensors = Vec::new();
        for (i, m) in self.models.iter().enumerate() {
            for (n, t) in m.params.names().iter().zip(m.params.tensors()) {
                tensors.push((format!("s{i}.{n}"), t.clone()));
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &crate::diff::Checkpoint { header, tensors })?;
        Ok(())
    }

    /// Loads a checkpoint and checks it was trained for this code, noise
    /// model and architecture.
    pub fn load(cfg: &ExperimentConfig, path: &Path) -> Result<Self, TrainError> {
        let ck = read_checkpoint(&mut BufReader::new(File::open(path)?))?;
        let header: Header = serde_json::from_value(ck.header.clone())
            .map_err(|e| TrainError::Mismatch(format!("header: {e}")))?;
        let problems = cfg.problems()?;
        let mismatch = |what: &str| TrainError::Mismatch(what.to_string());
        if header.family != cfg.code.as_str() || header.distance != cfg.distance {
            return Err(mismatch("code"));
        }
        if header.noise != cfg.noise.as_str() || header.sectors.len() != problems.len() {
            return Err(mismatch("noise model"));
        }
        let mut models = Vec::new();
        for (i, p) in problems.iter().enumerate() {
            let mcfg = ModelConfig::for_problem(cfg.arch(), p)?;
            if header.models[i] != mcfg {
                return Err(mismatch("model architecture"));
            }
            let prefix = format!("s{i}.");
            let tensors: Vec<(String, Tensor)> = ck
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|s| (s.to_string(), t.clone())))
                .collect();
            models.push(Sltd::new(ModelParams::from_tensors(mcfg, &tensors)?, p)?);
        }
        Ok(Self { problems, models })
    }
}
