//! Training objectives: prior and refined class cross-entropy, and the
//! logical-minimum-entropy loss on residual parities.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Graph, Tensor, Var};
use crate::gf2::{BitMatrix, BitVector};

/// Floor on `1 - Pr(odd parity)` inside the entropy loss.
pub const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lp: f64,
    pub lc: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lp: 0.2,
            lc: 1.0,
            entropy: 1.0,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        [self.lp, self.lc, self.entropy]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of the prior logits against the true classes.
pub fn lp_loss(g: &mut Graph, prior_logits: Var, classes: &[usize]) -> Result<Var, DiffError> {
    g.cross_entropy(prior_logits, classes)
}

/// Cross-entropy of the refined class logits against the true classes.
pub fn lc_loss(g: &mut Graph, class_logits: Var, classes: &[usize]) -> Result<Var, DiffError> {
    g.cross_entropy(class_logits, classes)
}

/// Per-bit probability that the residual `e_true ⊕ e_pred` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualProbs {
    pub q: Vec<f64>,
}

pub fn residual_flip_probs(error_logits: &[f64], e_true: &BitVector) -> ResidualProbs {
    assert_eq!(error_logits.len(), e_true.len());
    let q = error_logits
        .iter()
        .zip(e_true.iter())
        .map(|(&x, t)| sigmoid(if t { -x } else { x }))
        .collect();
    ResidualProbs { q }
}

/// Probability that the XOR of independent Bernoulli(q_j), j in `support`, is 1.
pub fn parity_violation_prob(support: &[usize], q: &ResidualProbs) -> f64 {
    let prod: f64 = support.iter().map(|&j| 1.0 - 2.0 * q.q[j]).product();
    0.5 * (1.0 - prod)
}

pub fn logical_supports(logicals: &BitMatrix) -> Arc<Vec<Vec<usize>>> {
    Arc::new((0..logicals.rows()).map(|i| logicals.row_support(i)).collect())
}

/// Entropy loss of one sample, computed directly.
pub fn entropy_loss_value(error_logits: &[f64], e_true: &BitVector, logicals: &BitMatrix) -> f64 {
    let q = residual_flip_probs(error_logits, e_true);
    let rows = logicals.rows();
    (0..rows)
        .map(|i| {
            let p = parity_violation_prob(&logicals.row_support(i), &q);
            -(1.0 - p).max(ENTROPY_CLAMP).ln()
        })
        .sum::<f64>()
        / rows as f64
}

/// Entropy loss averaged over the batch rows of `error_logits` (`B x n_err`).
pub fn entropy_loss(
    g: &mut Graph,
    error_logits: Var,
    errors: &[BitVector],
    supports: Arc<Vec<Vec<usize>>>,
) -> Result<Var, DiffError> {
    let signs: Vec<f64> = errors
        .iter()
        .flat_map(|e| e.iter().map(|b| if b { -1.0 } else { 1.0 }))
        .collect();
    g.parity_entropy(error_logits, &signs, supports, ENTROPY_CLAMP)
}

/// Largest `|σ(y) - ½(1 + tanh(y/2))|` over `points` evenly spaced `y` in [-30, 30].
pub fn sigmoid_tanh_identity_check(points: usize) -> f64 {
    assert!(points >= 2);
    (0..points)
        .map(|i| {
            let y = -30.0 + 60.0 * i as f64 / (points - 1) as f64;
            (sigmoid(y) - 0.5 * (1.0 + (y / 2.0).tanh())).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub lp: Option<Var>,
    pub lc: Option<Var>,
    pub entropy: Option<Var>,
}

/// `λ_LP·L_LP + λ_LC·L_LC + λ_Ent·L_Ent`; terms with zero weight are skipped.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    g: &mut Graph,
    prior_logits: Var,
    class_logits: Var,
    error_logits: Var,
    classes: &[usize],
    errors: &[BitVector],
    supports: Arc<Vec<Vec<usize>>>,
    weights: &LossWeights,
) -> Result<LossTerms, DiffError> {
    let mut total = g.constant(Tensor::scalar(0.0))?;
    let mut terms = LossTerms {
        total,
        lp: None,
        lc: None,
        entropy: None,
    };
    if weights.lp != 0.0 {
        let l = lp_loss(g, prior_logits, classes)?;
        let s = g.scale(l, weights.lp)?;
        total = g.add(total, s)?;
        terms.lp = Some(l);
    }
    if weights.lc != 0.0 {
        let l = lc_loss(g, class_logits, classes)?;
        let s = g.scale(l, weights.lc)?;
        total = g.add(total, s)?;
        terms.lc = Some(l);
    }
    if weights.entropy != 0.0 {
        let l = entropy_loss(g, error_logits, errors, supports)?;
        let s = g.scale(l, weights.entropy)?;
        total = g.add(total, s)?;
        terms.entropy = Some(l);
    }
    terms.total = total;
    Ok(terms)
}
