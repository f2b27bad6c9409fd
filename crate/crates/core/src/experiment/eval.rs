use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, DecoderKind, ExperimentConfig};
use super::train::TrainedDecoder;
use crate::codes::DecodingProblem;
use crate::cpnd::{self, CpndContext, CpndError, DescentOptions};
use crate::diff::{DiffError, Tensor};
use crate::model::predict_class;
use crate::noise::{make_batch, NoiseError, NoiseSpec, StreamDomain};
use crate::reference::{
    is_logical_success, osd0_decode, projection_only_decode, ChannelPrior, MlOracle, ReferenceError, ML_MAX_BITS,
};

/// Shots are decoded in fixed chunks so the result never depends on the
/// number of workers.
pub const CHUNK: usize = 256;
pub const WORKERS_ENV: &str = "SAQ_WORKERS";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("decoder {0} needs a trained checkpoint")]
    NoCheckpoint(&'static str),
    #[error("checkpoint has {got} sector models, config needs {expected}")]
    Mismatch { expected: usize, got: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Cpnd(#[from] CpndError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LerRow {
    pub code: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub noise: String,
    pub p: f64,
    pub decoder: String,
    pub shots: u64,
    pub failures: u64,
    pub ler: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "code,L,noise,p,decoder,shots,failures,ler,wilson_lo,wilson_hi,seed";

impl LerRow {
    pub fn is_valid(&self) -> bool {
        self.failures <= self.shots
            && (0.0..=1.0).contains(&self.ler)
            && self.wilson_lo <= self.ler
            && self.ler <= self.wilson_hi
    }
}

/// Wilson score interval at 95%.
pub fn wilson(failures: u64, shots: u64) -> (f64, f64) {
    if shots == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let n = shots as f64;
    let phat = failures as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (phat + z * z / (2.0 * n)) / denom;
    let half = z * (phat * (1.0 - phat) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    // Keep the interval bracketing phat despite rounding at 0 and 1.
    ((centre - half).max(0.0).min(phat), (centre + half).min(1.0).max(phat))
}

pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Counter-stream index of shot `shot` for sector `sector` at grid point `p_idx`.
pub fn shot_index(sector: usize, p_idx: usize, shot: u64) -> u64 {
    ((sector as u64) << 56) | ((p_idx as u64) << 40) | shot
}

struct Setup<'a> {
    cfg: &'a ExperimentConfig,
    problems: Vec<DecodingProblem>,
    contexts: Vec<CpndContext>,
    model: Option<&'a TrainedDecoder>,
    decoders: Vec<DecoderKind>,
}

/// Decodes one chunk of shots at one `p`; returns failure counts per decoder.
fn run_chunk(s: &Setup, p_idx: usize, p: f64, start: u64, size: usize) -> Result<Vec<u64>, EvalError> {
    let mut ok = vec![vec![true; size]; s.decoders.len()];
    for (k, problem) in s.problems.iter().enumerate() {
        let spec = NoiseSpec::fixed(s.cfg.noise, p)?;
        let first = shot_index(k, p_idx, start);
        let batch = make_batch(problem, &spec, size, s.cfg.seed, StreamDomain::Evaluation, first)?;
        let pred = match s.model {
            Some(m) => Some(m.models[k].predict(&Tensor::from_vec(size, batch.m, batch.syndromes.clone())?)?),
            None => None,
        };
        let mut oracle = None;
        let ctx = &s.contexts[k];
        let opts = DescentOptions { multi_pass: s.cfg.multi_pass };
        for i in 0..size {
            let e = &batch.errors[i];
            let syn = batch.syndrome_bits(i);
            for (d, kind) in s.decoders.iter().enumerate() {
                let recovery = match kind {
                    DecoderKind::Ml => {
                        let o = match &mut oracle {
                            Some(o) => o,
                            None => oracle.insert(MlOracle::new(problem, ChannelPrior::for_problem(problem, p))?),
                        };
                        o.decode(&syn)?.representative
                    }
                    _ => {
                        let pr = pred.as_ref().ok_or(EvalError::NoCheckpoint(kind.as_str()))?;
                        let el = pr.error_logits.row(i);
                        let cl = pr.class_logits.row(i);
                        match kind {
                            DecoderKind::Cpnd => cpnd::decode(el, cl, &syn, ctx, opts).recovery,
                            DecoderKind::Projection => projection_only_decode(ctx, el, cl, &syn),
                            DecoderKind::Osd0 => osd0_decode(ctx, el, &ctx.target(&syn, predict_class(cl))),
                            DecoderKind::Ml => unreachable!(),
                        }
                    }
                };
                ok[d][i] &= is_logical_success(problem, e, &recovery);
            }
        }
    }
    Ok(ok.iter().map(|v| v.iter().filter(|&&b| !b).count() as u64).collect())
}

/// Monte-Carlo logical error rates for every `(p, decoder)` of the config.
/// The oracle is skipped when a sector exceeds its size cap.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: Option<&TrainedDecoder>,
    workers: usize,
) -> Result<Vec<LerRow>, EvalError> {
    cfg.validate()?;
    let problems = cfg.problems()?;
    if let Some(m) = model {
        if m.models.len() != problems.len() {
            return Err(EvalError::Mismatch {
                expected: problems.len(),
                got: m.models.len(),
            });
        }
    }
    let ml_ok = problems.iter().all(|p| p.n_err() <= ML_MAX_BITS);
    let decoders: Vec<DecoderKind> = cfg
        .decoders
        .iter()
        .copied()
        .filter(|d| *d != DecoderKind::Ml || ml_ok)
        .collect();
    if model.is_none() {
        if let Some(d) = decoders.iter().find(|d| **d != DecoderKind::Ml) {
            return Err(EvalError::NoCheckpoint(d.as_str()));
        }
    }
    let contexts = problems
        .iter()
        .map(|p| CpndContext::build(p, cfg.basis))
        .collect::<Result<Vec<_>, _>>()?;
    let setup = Setup {
        cfg,
        problems,
        contexts,
        model,
        decoders,
    };
    let shots = cfg.shots as u64;
    let chunks: Vec<(u64, usize)> = (0..shots)
        .step_by(CHUNK)
        .map(|s| (s, CHUNK.min((shots - s) as usize)))
        .collect();
    let workers = workers.max(1).min(chunks.len().max(1));

    let mut rows = Vec::new();
    for (p_idx, &p) in cfg.p_grid.iter().enumerate() {
        let results: Vec<Result<Vec<u64>, EvalError>> = std::thread::scope(|sc| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let setup = &setup;
                    let chunks = &chunks;
                    sc.spawn(move || {
                        chunks
                            .iter()
                            .skip(w)
                            .step_by(workers)
                            .map(|&(start, size)| run_chunk(setup, p_idx, p, start, size))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut failures = vec![0u64; setup.decoders.len()];
        for r in results {
            for (f, x) in failures.iter_mut().zip(r?) {
                *f += x;
            }
        }
        for (kind, &f) in setup.decoders.iter().zip(&failures) {
            let (lo, hi) = wilson(f, shots);
            rows.push(LerRow {
                code: cfg.code.as_str().into(),
                l: cfg.distance,
                noise: cfg.noise.as_str().into(),
                p,
                decoder: kind.as_str().into(),
                shots,
                failures: f,
                ler: f as f64 / shots as f64,
                wilson_lo: lo,
                wilson_hi: hi,
                seed: cfg.seed,
            });
        }
    }
    Ok(rows)
}

/// Metadata comment line written above the CSV header.
pub fn metadata_line(cfg: &ExperimentConfig) -> String {
    format!(
        "# saq version={} schema={} config_hash={} shots={} seed={}",
        env!("CARGO_PKG_VERSION"),
        cfg.schema_version,
        cfg.hash(),
        cfg.shots,
        cfg.seed
    )
}

pub fn write_csv<W: Write>(out: W, cfg: &ExperimentConfig, rows: &[LerRow]) -> Result<(), EvalError> {
    let mut out = out;
    writeln!(out, "{}", metadata_line(cfg))?;
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<LerRow>, EvalError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<LerRow>, _>>()?)
}
