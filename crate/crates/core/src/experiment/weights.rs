use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{metadata_line, shot_index, EvalError, CHUNK};
use super::train::TrainedDecoder;
use crate::codes::DecodingProblem;
use crate::cpnd::{decode_with, CpndContext, DescentOptions};
use crate::diff::Tensor;
use crate::model::{hard_decision, predict_class};
use crate::noise::{make_batch, Batch, NoiseSpec, StreamDomain};
use crate::reference::osd0_decode;

pub const METHODS: [&str; 3] = ["projection", "cpnd", "osd0"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub p: f64,
    pub method: String,
    pub shots: u64,
    pub mean_weight: f64,
    pub std_err: f64,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Soft error estimate without a trained model: the channel log-odds plus a
/// vote for every flagged check touching the bit.
pub fn check_vote_logits(problem: &DecodingProblem, syndrome: &[f64], p: f64) -> Vec<f64> {
    let base = logit(p);
    let beta = 0.75 * base.abs();
    (0..problem.n_err())
        .map(|q| {
            let votes = (0..problem.m())
                .filter(|&i| problem.checks.get(i, q) && syndrome[i] < 0.0)
                .count();
            base + beta * votes as f64
        })
        .collect()
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    fn std_err(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let var = (self.sum_sq - self.sum * self.sum / n) / (n - 1.0);
        (var.max(0.0) / n).sqrt()
    }
}

type Weights3 = [Moments; 3];

#[allow(clippy::too_many_arguments)]
fn chunk_weights(
    cfg: &ExperimentConfig,
    problems: &[DecodingProblem],
    contexts: &[CpndContext],
    model: Option<&TrainedDecoder>,
    p_idx: usize,
    p: f64,
    start: u64,
    size: usize,
) -> Result<Vec<[usize; 3]>, EvalError> {
    let mut totals = vec![[0usize; 3]; size];
    let opts = DescentOptions { multi_pass: cfg.multi_pass };
    for (k, problem) in problems.iter().enumerate() {
        let ctx = &contexts[k];
        let spec = NoiseSpec::fixed(cfg.noise, p)?;
        let batch: Batch = make_batch(problem, &spec, size, cfg.seed, StreamDomain::Evaluation, shot_index(k, p_idx, start))?;
        let pred = match model {
            Some(m) => Some(m.models[k].predict(&Tensor::from_vec(size, batch.m, batch.syndromes.clone())?)?),
            None => None,
        };
        let channel_w = vec![-logit(p); problem.n_err()];
        for (i, total) in totals.iter_mut().enumerate() {
            let syn = batch.syndrome_bits(i);
            let (logits, class, w) = match &pred {
                Some(pr) => {
                    let el = pr.error_logits.row(i).to_vec();
                    let w = crate::cpnd::weights_from_logits(&el);
                    (el, predict_class(pr.class_logits.row(i)), w)
                }
                None => (check_vote_logits(problem, batch.syndrome_row(i), p), batch.classes[i], channel_w.clone()),
            };
            let b = ctx.target(&syn, class);
            let (projected, recovery, _) = decode_with(&hard_decision(&logits), &b, &w, ctx, opts, false);
            let osd = osd0_decode(ctx, &logits, &b);
            total[0] += projected.weight();
            total[1] += recovery.weight();
            total[2] += osd.weight();
        }
    }
    Ok(totals)
}

/// Mean Hamming weight of the projection, CPND and OSD-0 recoveries over
/// the config's shots at each `p`.
///
/// With a model the soft input is its error logits and the target class is
/// its prediction. Without one the soft input is [`check_vote_logits`], the
/// descent weights are the channel log-odds and the target is the true class.
pub fn compare_weights(
    cfg: &ExperimentConfig,
    model: Option<&TrainedDecoder>,
    ps: &[f64],
    workers: usize,
) -> Result<Vec<WeightRow>, EvalError> {
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
    let contexts = problems
        .iter()
        .map(|p| CpndContext::build(p, cfg.basis))
        .collect::<Result<Vec<_>, _>>()?;
    let shots = cfg.shots as u64;
    let chunks: Vec<(u64, usize)> = (0..shots)
        .step_by(CHUNK)
        .map(|s| (s, CHUNK.min((shots - s) as usize)))
        .collect();
    let workers = workers.max(1).min(chunks.len().max(1));
    let mut rows = Vec::new();
    for (p_idx, &p) in ps.iter().enumerate() {
        let parts: Vec<Result<Vec<[usize; 3]>, EvalError>> = std::thread::scope(|sc| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let (problems, contexts, chunks) = (&problems, &contexts, &chunks);
                    sc.spawn(move || {
                        chunks
                            .iter()
                            .skip(w)
                            .step_by(workers)
                            .map(|&(start, size)| chunk_weights(cfg, problems, contexts, model, p_idx, p, start, size))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut acc: Weights3 = Default::default();
        for part in parts {
            let mut local: Weights3 = Default::default();
            for t in part? {
                for (m, &x) in local.iter_mut().zip(&t) {
                    m.push(x as f64);
                }
            }
            for (a, l) in acc.iter_mut().zip(&local) {
                a.merge(l);
            }
        }
        for (name, m) in METHODS.iter().zip(&acc) {
            rows.push(WeightRow {
                p,
                method: (*name).into(),
                shots,
                mean_weight: m.mean(),
                std_err: m.std_err(),
            });
        }
    }
    Ok(rows)
}

pub fn write_weights_csv<W: Write>(out: W, cfg: &ExperimentConfig, rows: &[WeightRow]) -> Result<(), EvalError> {
    let mut out = out;
    writeln!(out, "{}", metadata_line(cfg))?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Ordering violations of projection >= CPND >= OSD-0, with ties allowed
/// within `k` combined standard errors.
pub fn ordering_violations(rows: &[WeightRow], k: f64) -> Vec<String> {
    let mut out = Vec::new();
    let mut ps: Vec<f64> = rows.iter().map(|r| r.p).collect();
    ps.dedup();
    for p in ps {
        let get = |m: &str| rows.iter().find(|r| r.p == p && r.method == m);
        let (Some(proj), Some(cpnd), Some(osd)) = (get("projection"), get("cpnd"), get("osd0")) else {
            continue;
        };
        for (hi, lo) in [(proj, cpnd), (cpnd, osd)] {
            let tol = k * (hi.std_err.powi(2) + lo.std_err.powi(2)).sqrt();
            if hi.mean_weight + tol < lo.mean_weight {
                out.push(format!(
                    "p={p}: {} {:.4} < {} {:.4}",
                    hi.method, hi.mean_weight, lo.method, lo.mean_weight
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::CodeFamily;
    use crate::noise::NoiseModel;

    fn toric(l: usize, shots: usize) -> ExperimentConfig {
        ExperimentConfig {
            code: CodeFamily::Toric,
            distance: l,
            shots,
            ..ExperimentConfig::for_noise(NoiseModel::Independent)
        }
    }

    #[test]
    fn zero_noise_gives_zero_weight() {
        let rows = compare_weights(&toric(3, 100), None, &[0.0], 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.mean_weight == 0.0));
    }

    #[test]
    fn worker_count_does_not_matter() {
        let cfg = toric(3, 600);
        let a = compare_weights(&cfg, None, &[0.1], 1).unwrap();
        let b = compare_weights(&cfg, None, &[0.1], 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn moments_match_direct_formula() {
        let xs = [1.0, 4.0, 2.0, 7.0];
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        let mean = xs.iter().sum::<f64>() / 4.0;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        assert_eq!(m.mean(), mean);
        assert!((m.std_err() - (var / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn check_votes_raise_flagged_bits() {
        let problem = crate::codes::StabilizerCode::repetition(3).unwrap().sector_problem(crate::codes::Sector::XErrors).unwrap();
        let l = check_vote_logits(&problem, &[-1.0, 1.0], 0.1);
        assert!(l[0] > l[2]);
        assert!(l[1] == l[0]);
    }
}
