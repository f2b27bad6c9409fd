//! Constraint-projected nullspace descent.
//!
//! A soft error estimate is projected onto the affine set of errors with the
//! observed syndrome and the predicted logical class, then improved greedily
//! by adding nullspace generators of the stacked check/logical matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codes::DecodingProblem;
use crate::gf2::{BitMatrix, BitVector, Gf2Error};
use crate::model::{hard_decision, predict_class};

pub const PROB_CLAMP: f64 = 1e-9;
pub const MAX_PASSES: usize = 10;

#[derive(Debug, Error)]
pub enum CpndError {
    #[error("stacked check/logical matrix is rank deficient: {0}")]
    Rank(Gf2Error),
    #[error("stabilizer row {0} is not in the kernel of the stacked matrix")]
    BadGenerator(usize),
    #[error(transparent)]
    Gf2(#[from] Gf2Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMode {
    /// Canonical RREF basis of the exact kernel.
    #[default]
    ExactKernel,
    /// The code's stabilizer generators in error space.
    StabilizerRows,
}

#[derive(Clone, Debug)]
pub struct CpndContext {
    pub h_aug: BitMatrix,
    /// Left inverse: `h_aug · b_inv = I`.
    pub b_inv: BitMatrix,
    pub basis: BitMatrix,
    pub mode: BasisMode,
    pub m: usize,
    pub n_log: usize,
    supports: Vec<Vec<usize>>,
}

impl CpndContext {
    pub fn build(problem: &DecodingProblem, mode: BasisMode) -> Result<Self, CpndError> {
        let h_aug = problem.augmented();
        let b_inv = h_aug.left_inverse().map_err(CpndError::Rank)?;
        let basis = match mode {
            BasisMode::ExactKernel => h_aug.nullspace_basis(),
            BasisMode::StabilizerRows => {
                let rows = problem.stabilizers.clone();
                for (i, v) in rows.row_vectors().iter().enumerate() {
                    if !h_aug.matvec(v)?.is_zero() {
                        return Err(CpndError::BadGenerator(i));
                    }
                }
                rows
            }
        };
        let supports = (0..basis.rows()).map(|i| basis.row_support(i)).collect();
        Ok(Self {
            h_aug,
            b_inv,
            basis,
            mode,
            m: problem.m(),
            n_log: problem.n_log(),
            supports,
        })
    }

    pub fn n_err(&self) -> usize {
        self.h_aug.cols()
    }

    pub fn generators(&self) -> usize {
        self.basis.rows()
    }

    /// `[s; class bits]`.
    pub fn target(&self, syndrome: &BitVector, class: usize) -> BitVector {
        syndrome.concat(&BitVector::from_u64(self.n_log, class as u64))
    }

    pub fn is_feasible(&self, e: &BitVector, b: &BitVector) -> bool {
        self.h_aug.matvec(e).map(|x| &x == b).unwrap_or(false)
    }
}

/// `w_q = -ln(p_q / (1 - p_q))` with `p_q = σ(ê_q)` clamped to `[1e-9, 1 - 1e-9]`.
pub fn weights_from_logits(logits: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .map(|&x| {
            let p = (1.0 / (1.0 + (-x).exp())).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(p / (1.0 - p)).ln()
        })
        .collect()
}

pub fn weighted_cost(e: &BitVector, w: &[f64]) -> f64 {
    e.support().iter().map(|&q| w[q]).sum()
}

/// `e ⊕ B·(b ⊕ H_aug·e)`, which satisfies `H_aug·x = b`.
pub fn project(e_pred: &BitVector, b: &BitVector, ctx: &CpndContext) -> BitVector {
    let mut y = ctx.h_aug.matvec(e_pred).expect("e_pred has n_err bits");
    y.xor_assign(b);
    let fix = ctx.b_inv.matvec(&y).expect("b has m + n_log bits");
    e_pred.xor(&fix)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DescentOptions {
    /// Repeat passes until none is accepted, at most [`MAX_PASSES`].
    pub multi_pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescentTrace {
    pub accepted: Vec<usize>,
    pub passes: usize,
}

/// Greedy pass over the generators in stored order: add generator `j` when
/// `Δ_j = Σ_{q∈χ_j} w_q (1 - 2 e_q) < 0`.
pub fn descend(e: &BitVector, w: &[f64], ctx: &CpndContext, opts: DescentOptions) -> (BitVector, DescentTrace) {
    assert_eq!(w.len(), ctx.n_err());
    let mut sigma: Vec<f64> = e.iter().map(|b| if b { -1.0 } else { 1.0 }).collect();
    let mut out = e.clone();
    let mut trace = DescentTrace::default();
    let max_passes = if opts.multi_pass { MAX_PASSES } else { 1 };
    while trace.passes < max_passes {
        trace.passes += 1;
        let mut any = false;
        for (j, sup) in ctx.supports.iter().enumerate() {
            let delta: f64 = sup.iter().map(|&q| w[q] * sigma[q]).sum();
            if delta < 0.0 {
                for &q in sup {
                    sigma[q] = -sigma[q];
                    out.flip(q);
                }
                trace.accepted.push(j);
                any = true;
                debug_assert_eq!(ctx.h_aug.matvec(&out).unwrap(), ctx.h_aug.matvec(e).unwrap());
            }
        }
        if !any {
            break;
        }
    }
    (out, trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub recovery: BitVector,
    pub class: usize,
    pub projected: BitVector,
    pub projection_cost: f64,
    pub final_cost: f64,
    pub trace: DescentTrace,
}

/// Projection then descent with explicit target and weights.
pub fn decode_with(
    e_pred: &BitVector,
    b: &BitVector,
    w: &[f64],
    ctx: &CpndContext,
    opts: DescentOptions,
    skip_descent: bool,
) -> (BitVector, BitVector, DescentTrace) {
    let projected = project(e_pred, b, ctx);
    let (recovery, trace) = if skip_descent {
        (projected.clone(), DescentTrace::default())
    } else {
        descend(&projected, w, ctx, opts)
    };
    assert!(ctx.is_feasible(&recovery, b), "descent left the feasible set");
    (projected, recovery, trace)
}

/// Full decoder: target class from `argmax ℓ̂`, start from `hard_decision(ê)`,
/// weights from `ê`.
pub fn decode(
    error_logits: &[f64],
    class_logits: &[f64],
    syndrome: &BitVector,
    ctx: &CpndContext,
    opts: DescentOptions,
) -> DecodeResult {
    let class = predict_class(class_logits);
    let b = ctx.target(syndrome, class);
    let w = weights_from_logits(error_logits);
    let (projected, recovery, trace) = decode_with(&hard_decision(error_logits), &b, &w, ctx, opts, false);
    DecodeResult {
        projection_cost: weighted_cost(&projected, &w),
        final_cost: weighted_cost(&recovery, &w),
        recovery,
        class,
        projected,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::{Sector, StabilizerCode};
    use crate::noise::{stream_rng, StreamDomain};
    use rand::Rng;

    fn toric2() -> DecodingProblem {
        StabilizerCode::toric(2).unwrap().sector_problem(Sector::XErrors).unwrap()
    }

    #[test]
    fn context_dimensions() {
        let ctx = CpndContext::build(&toric2(), BasisMode::ExactKernel).unwrap();
        assert_eq!(ctx.generators(), 3);
        let rot = StabilizerCode::rotated_surface(3).unwrap().sector_problem(Sector::XErrors).unwrap();
        let ctx = CpndContext::build(&rot, BasisMode::ExactKernel).unwrap();
        assert_eq!(ctx.generators(), 4);
        assert_eq!(ctx.h_aug.matmul(&ctx.b_inv).unwrap(), BitMatrix::identity(5));
        for v in ctx.basis.row_vectors() {
            assert!(ctx.h_aug.matvec(&v).unwrap().is_zero());
        }
    }

    #[test]
    fn stabilizer_basis_spans_toric_kernel() {
        for l in [2, 3, 4] {
            let p = StabilizerCode::toric(l).unwrap().sector_problem(Sector::ZErrors).unwrap();
            let exact = CpndContext::build(&p, BasisMode::ExactKernel).unwrap();
            let stab = CpndContext::build(&p, BasisMode::StabilizerRows).unwrap();
            assert_eq!(stab.basis.rank(), exact.generators());
            // Same span: stacking adds no rank.
            assert_eq!(stab.basis.vstack(&exact.basis).unwrap().rank(), exact.generators());
        }
    }

    #[test]
    fn weights_are_negated_logits() {
        let w = weights_from_logits(&[0.0, 3.0, -7.5, 40.0, -40.0]);
        assert_eq!(w[0], 0.0);
        assert!((w[1] + 3.0).abs() < 1e-12);
        assert!((w[2] - 7.5).abs() < 1e-9);
        let cap = ((1.0 - PROB_CLAMP) / PROB_CLAMP).ln();
        assert!((w[3] + cap).abs() < 1e-6);
        assert!((w[4] - cap).abs() < 1e-6);
        assert!(w.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn projection_examples() {
        let p = toric2();
        let ctx = CpndContext::build(&p, BasisMode::ExactKernel).unwrap();
        let e = BitVector::from_support(8, &[0, 5]);
        let b = p.augmented().matvec(&e).unwrap();
        assert_eq!(project(&e, &b, &ctx), e);
        let zero = BitVector::zeros(8);
        assert_eq!(project(&zero, &b, &ctx), ctx.b_inv.matvec(&b).unwrap());
        let mut rng = stream_rng(1, StreamDomain::Test, 0);
        for _ in 0..500 {
            let e = BitVector::from_bools((0..8).map(|_| rng.gen_bool(0.5)));
            let b = BitVector::from_bools((0..5).map(|_| rng.gen_bool(0.5)));
            assert!(ctx.is_feasible(&project(&e, &b, &ctx), &b));
        }
    }

    #[test]
    fn positive_weights_from_zero_accept_nothing() {
        let ctx = CpndContext::build(&toric2(), BasisMode::ExactKernel).unwrap();
        let (out, trace) = descend(&BitVector::zeros(8), &[1.0; 8], &ctx, DescentOptions::default());
        assert!(out.is_zero());
        assert!(trace.accepted.is_empty());
    }

    #[test]
    fn weight_one_generator_is_taken() {
        // Checks on bits 0..2 only; bit 3 is a free, invisible coordinate.
        let problem = DecodingProblem::new(
            "toy".into(),
            Sector::XErrors,
            BitMatrix::from_rows(&[vec![1, 1, 0, 0], vec![0, 1, 1, 0]]),
            BitMatrix::from_rows(&[vec![1, 1, 1, 0]]),
            BitMatrix::zeros(0, 4),
        );
        let ctx = CpndContext::build(&problem, BasisMode::ExactKernel).unwrap();
        assert_eq!(ctx.basis, BitMatrix::from_rows(&[vec![0, 0, 0, 1]]));
        let w = [1.0, 1.0, 1.0, -5.0];
        let (out, trace) = descend(&BitVector::zeros(4), &w, &ctx, DescentOptions::default());
        assert_eq!(out, BitVector::from_bits(&[0, 0, 0, 1]));
        assert_eq!(trace.accepted, vec![0]);
    }

    #[test]
    fn tie_is_rejected() {
        let problem = DecodingProblem::new(
            "toy".into(),
            Sector::XErrors,
            BitMatrix::from_rows(&[vec![1, 0]]),
            BitMatrix::zeros(0, 2),
            BitMatrix::zeros(0, 2),
        );
        let ctx = CpndContext::build(&problem, BasisMode::ExactKernel).unwrap();
        let (out, _) = descend(&BitVector::zeros(2), &[1.0, 0.0], &ctx, DescentOptions::default());
        assert!(out.is_zero());
    }

    #[test]
    fn decode_meets_both_constraints_and_lowers_cost() {
        for problem in [
            toric2(),
            StabilizerCode::rotated_surface(3).unwrap().depolarizing_problem().unwrap(),
        ] {
            let n = problem.n_err();
            for mode in [BasisMode::ExactKernel, BasisMode::StabilizerRows] {
                let ctx = CpndContext::build(&problem, mode).unwrap();
                let mut rng = stream_rng(2, StreamDomain::Test, 1);
                for opts in [DescentOptions::default(), DescentOptions { multi_pass: true }] {
                    for _ in 0..300 {
                        let el: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
                        let cl: Vec<f64> = (0..problem.n_classes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let s = BitVector::from_bools((0..problem.m()).map(|_| rng.gen_bool(0.5)));
                        let r = decode(&el, &cl, &s, &ctx, opts);
                        assert_eq!(problem.syndrome(&r.recovery).unwrap(), s);
                        assert_eq!(problem.logical_class(&r.recovery).unwrap(), predict_class(&cl));
                        assert!(r.final_cost <= r.projection_cost);
                        assert!(r.trace.passes <= MAX_PASSES);
                    }
                }
            }
        }
    }

    #[test]
    fn confident_consistent_logits_are_kept() {
        let p = toric2();
        let ctx = CpndContext::build(&p, BasisMode::ExactKernel).unwrap();
        let e = BitVector::from_support(8, &[1, 6]);
        let logits: Vec<f64> = e.iter().map(|b| if b { 20.0 } else { -20.0 }).collect();
        let mut cl = vec![0.0; 4];
        cl[p.logical_class(&e).unwrap()] = 5.0;
        let r = decode(&logits, &cl, &p.syndrome(&e).unwrap(), &ctx, DescentOptions::default());
        assert_eq!(r.recovery, e);
    }

    #[test]
    fn uniform_positive_weights_never_increase_hamming_weight() {
        let p = StabilizerCode::toric(2).unwrap().sector_problem(Sector::ZErrors).unwrap();
        let ctx = CpndContext::build(&p, BasisMode::ExactKernel).unwrap();
        let mut rng = stream_rng(3, StreamDomain::Test, 2);
        let w = vec![2.0; 8];
        for _ in 0..10_000 {
            let e = BitVector::from_bools((0..8).map(|_| rng.gen_bool(0.3)));
            let b = BitVector::from_bools((0..5).map(|_| rng.gen_bool(0.5)));
            let (proj, rec, _) = decode_with(&e, &b, &w, &ctx, DescentOptions::default(), false);
            assert!(rec.weight() <= proj.weight());
        }
    }
}
