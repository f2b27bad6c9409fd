use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codes::{CodeFamily, CodeError, DecodingProblem, Sector, StabilizerCode};
use crate::cpnd::BasisMode;
use crate::losses::LossWeights;
use crate::model::Architecture;
use crate::noise::{NoiseModel, NoiseSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Code(#[from] CodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    /// SLTD followed by projection and nullspace descent.
    #[serde(rename = "sltd-cpnd", alias = "cpnd")]
    Cpnd,
    /// SLTD followed by projection only.
    #[serde(rename = "sltd-projection", alias = "projection")]
    Projection,
    /// SLTD error logits fed to OSD-0.
    #[serde(rename = "sltd-osd0", alias = "osd0")]
    Osd0,
    /// Exhaustive coset oracle with the true channel prior.
    #[serde(rename = "ml-oracle", alias = "ml")]
    Ml,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Cpnd => "sltd-cpnd",
            DecoderKind::Projection => "sltd-projection",
            DecoderKind::Osd0 => "sltd-osd0",
            DecoderKind::Ml => "ml-oracle",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>, ConfigError> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "cpnd" | "sltd-cpnd" => Ok(DecoderKind::Cpnd),
                "projection" | "sltd-projection" => Ok(DecoderKind::Projection),
                "osd0" | "sltd-osd0" => Ok(DecoderKind::Osd0),
                "ml" | "ml-oracle" => Ok(DecoderKind::Ml),
                other => Err(ConfigError::Invalid(format!("unknown decoder {other:?}"))),
            })
            .collect()
    }
}

/// Flat key-value experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub code: CodeFamily,
    pub distance: usize,
    pub noise: NoiseModel,
    /// Evaluation error rates.
    pub p_grid: Vec<f64>,
    pub train_p_lo: f64,
    pub train_p_hi: f64,
    pub decoders: Vec<DecoderKind>,
    pub basis: BasisMode,
    pub multi_pass: bool,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub share_weights: bool,
    pub lambda_lp: f64,
    pub lambda_lc: f64,
    pub lambda_entropy: f64,
    pub lr: f64,
    pub lr_floor: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub shots: usize,
    pub seed: u64,
}

pub fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| ((lo + step * i as f64) * 1e6).round() / 1e6).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            code: CodeFamily::RotatedSurface,
            distance: 3,
            noise: NoiseModel::Depolarizing,
            p_grid: grid(0.05, 0.20, 0.01),
            train_p_lo: 0.05,
            train_p_hi: 0.20,
            decoders: vec![DecoderKind::Cpnd, DecoderKind::Projection, DecoderKind::Osd0, DecoderKind::Ml],
            basis: BasisMode::ExactKernel,
            multi_pass: false,
            d: 32,
            layers: 3,
            heads: 4,
            share_weights: true,
            lambda_lp: 0.2,
            lambda_lc: 1.0,
            lambda_entropy: 1.0,
            lr: 1e-3,
            lr_floor: 1e-6,
            epochs: 40,
            batches_per_epoch: 500,
            batch_size: 32,
            shots: 10_000,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for a noise model (grid and training range follow it).
    pub fn for_noise(noise: NoiseModel) -> Self {
        let mut c = Self {
            noise,
            ..Self::default()
        };
        if noise == NoiseModel::Independent {
            c.p_grid = grid(0.01, 0.20, 0.01);
            c.train_p_lo = 0.01;
            c.train_p_hi = 0.20;
        }
        c
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.shots == 0 {
            return bad("shots must be >= 1".into());
        }
        if self.p_grid.is_empty() || self.p_grid.iter().any(|p| !(0.0..1.0).contains(p)) {
            return bad("p_grid values must lie in [0, 1)".into());
        }
        if !(0.0 <= self.train_p_lo && self.train_p_lo <= self.train_p_hi && self.train_p_hi < 1.0) {
            return bad("train_p range must satisfy 0 <= lo <= hi < 1".into());
        }
        if !(self.lr > 0.0 && self.lr_floor > 0.0 && self.lr_floor <= self.lr) {
            return bad("lr and lr_floor must be positive with lr_floor <= lr".into());
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, batches_per_epoch and batch_size must be positive".into());
        }
        if !self.loss_weights().is_valid() {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        self.build_code()?;
        Ok(())
    }

    pub fn build_code(&self) -> Result<StabilizerCode, ConfigError> {
        Ok(self.code.build(self.distance)?)
    }

    pub fn arch(&self) -> Architecture {
        Architecture {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            share_weights: self.share_weights,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lp: self.lambda_lp,
            lc: self.lambda_lc,
            entropy: self.lambda_entropy,
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.batches_per_epoch) as u64
    }

    pub fn train_spec(&self) -> NoiseSpec {
        NoiseSpec::range(self.noise, self.train_p_lo, self.train_p_hi).expect("validated range")
    }

    /// Decoding problems the noise model splits into. Independent noise
    /// decodes each detectable sector on its own; a shot succeeds only if
    /// every sector does.
    pub fn problems(&self) -> Result<Vec<DecodingProblem>, ConfigError> {
        let code = self.build_code()?;
        match self.noise {
            NoiseModel::Depolarizing => Ok(vec![code.depolarizing_problem()?]),
            NoiseModel::Independent => {
                let out: Vec<_> = [Sector::XErrors, Sector::ZErrors]
                    .into_iter()
                    .filter_map(|s| code.sector_problem(s).ok())
                    .collect();
                Ok(out)
            }
        }
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        assert!(text.contains("schema_version = 1"));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert_eq!(c.p_grid.len(), 16);
        assert_eq!(ExperimentConfig::for_noise(NoiseModel::Independent).p_grid.len(), 20);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = ExperimentConfig::from_toml("code = \"toric\"\ndistance = 4\nnoise = \"independent\"\n").unwrap();
        assert_eq!(c.code, CodeFamily::Toric);
        assert_eq!(c.problems().unwrap().len(), 2);
        let rep = ExperimentConfig::from_toml("code = \"repetition\"\nnoise = \"independent\"\n").unwrap();
        assert_eq!(rep.problems().unwrap().len(), 1);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("shots = 0").is_err());
        assert!(ExperimentConfig::from_toml("p_grid = [1.0]").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 9").is_err());
        assert!(ExperimentConfig::from_toml("distance = 4").is_err());
        assert!(ExperimentConfig::from_toml("colour = 1").is_err());
        assert!(ExperimentConfig::from_toml("d = 30").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn decoder_lists() {
        assert_eq!(
            DecoderKind::parse_list("cpnd, ml").unwrap(),
            vec![DecoderKind::Cpnd, DecoderKind::Ml]
        );
        assert!(DecoderKind::parse_list("mwpm").is_err());
    }
}
