//! Pauli noise models and batch sampling.
//!
//! Every random draw comes from a ChaCha8 stream keyed by `(seed, domain)`
//! with the sample index as the stream id, so sample `i` is the same no
//! matter which worker produces it or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codes::{DecodingProblem, Sector};
use crate::gf2::BitVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("invalid error probability {0}: must lie in [0, 1)")]
    InvalidProbability(f64),
    #[error("invalid probability range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("{model:?} noise cannot be sampled for a {sector:?} problem")]
    SectorMismatch { model: NoiseModel, sector: Sector },
}

/// Independent streams for unrelated consumers of the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamDomain {
    Training = 1,
    Evaluation = 2,
    Init = 3,
    Test = 4,
}

pub fn stream_rng(seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    /// Bit and phase flips drawn independently with probability `p` each.
    Independent,
    /// `I` with probability `1 - p`, otherwise `X`, `Y`, `Z` with `p/3` each.
    Depolarizing,
}

impl NoiseModel {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseModel::Independent => "independent",
            NoiseModel::Depolarizing => "depolarizing",
        }
    }
}

/// Either a fixed error rate or a range sampled uniformly per sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorRate {
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    pub rate: ErrorRate,
}

impl NoiseSpec {
    pub fn fixed(model: NoiseModel, p: f64) -> Result<Self, NoiseError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NoiseError::InvalidProbability(p));
        }
        Ok(Self {
            model,
            rate: ErrorRate::Fixed(p),
        })
    }

    pub fn range(model: NoiseModel, lo: f64, hi: f64) -> Result<Self, NoiseError> {
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(NoiseError::InvalidRange(lo, hi));
        }
        Ok(Self {
            model,
            rate: ErrorRate::Uniform { lo, hi },
        })
    }

    fn draw_p(&self, rng: &mut impl Rng) -> f64 {
        match self.rate {
            ErrorRate::Fixed(p) => p,
            ErrorRate::Uniform { lo, hi } if lo == hi => lo,
            ErrorRate::Uniform { lo, hi } => rng.gen_range(lo..hi),
        }
    }

    pub fn check_problem(&self, problem: &DecodingProblem) -> Result<(), NoiseError> {
        let ok = match self.model {
            NoiseModel::Independent => problem.sector != Sector::Depolarizing,
            NoiseModel::Depolarizing => problem.sector == Sector::Depolarizing,
        };
        if ok {
            Ok(())
        } else {
            Err(NoiseError::SectorMismatch {
                model: self.model,
                sector: problem.sector,
            })
        }
    }
}

/// Draw one error for `problem` at rate `p`.
///
/// Independent noise flips each error bit with probability `p`. Depolarizing
/// noise works on the symplectic vector `(e_x | e_z)`: per qubit, `X` sets
/// `e_x`, `Z` sets `e_z`, `Y` sets both.
pub fn sample_error(
    problem: &DecodingProblem,
    model: NoiseModel,
    p: f64,
    rng: &mut impl Rng,
) -> BitVector {
    let n_err = problem.n_err();
    let mut e = BitVector::zeros(n_err);
    match model {
        NoiseModel::Independent => {
            for i in 0..n_err {
                if rng.gen::<f64>() < p {
                    e.set(i, true);
                }
            }
        }
        NoiseModel::Depolarizing => {
            let n = n_err / 2;
            for q in 0..n {
                if rng.gen::<f64>() < p {
                    match rng.gen_range(0..3u8) {
                        0 => e.set(q, true),
                        1 => {
                            e.set(q, true);
                            e.set(n + q, true);
                        }
                        _ => e.set(n + q, true),
                    }
                }
            }
        }
    }
    e
}

/// Sampled errors with their `±1` syndromes and logical classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub m: usize,
    /// Row-major `size x m`, entries `1 - 2 s_i`.
    pub syndromes: Vec<f64>,
    pub errors: Vec<BitVector>,
    pub classes: Vec<usize>,
    pub rates: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn syndrome_row(&self, i: usize) -> &[f64] {
        &self.syndromes[i * self.m..(i + 1) * self.m]
    }

    /// Binary syndrome of sample `i`.
    pub fn syndrome_bits(&self, i: usize) -> BitVector {
        BitVector::from_bools(self.syndrome_row(i).iter().map(|&s| s < 0.0))
    }

    pub fn error_matrix(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &self.errors {
            out.extend(e.iter().map(|b| if b { 1.0 } else { 0.0 }));
        }
        out
    }
}

pub fn signed_syndrome(bits: &BitVector) -> Vec<f64> {
    bits.iter().map(|b| if b { -1.0 } else { 1.0 }).collect()
}

/// Samples `first_index .. first_index + size` of the `(seed, domain)` stream.
pub fn make_batch(
    problem: &DecodingProblem,
    spec: &NoiseSpec,
    size: usize,
    seed: u64,
    domain: StreamDomain,
    first_index: u64,
) -> Result<Batch, NoiseError> {
    assert!(size >= 1, "batch size must be positive");
    spec.check_problem(problem)?;
    let m = problem.m();
    let mut batch = Batch {
        m,
        syndromes: Vec::with_capacity(size * m),
        errors: Vec::with_capacity(size),
        classes: Vec::with_capacity(size),
        rates: Vec::with_capacity(size),
    };
    for i in 0..size as u64 {
        let mut rng = stream_rng(seed, domain, first_index + i);
        let p = spec.draw_p(&mut rng);
        let e = sample_error(problem, spec.model, p, &mut rng);
        let s = problem.syndrome(&e).expect("sampled error has n_err bits");
        batch.syndromes.extend(signed_syndrome(&s));
        batch
            .classes
            .push(problem.logical_class(&e).expect("sampled error has n_err bits"));
        batch.errors.push(e);
        batch.rates.push(p);
    }
    Ok(batch)
}
