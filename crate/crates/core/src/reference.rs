//! Baseline and oracle decoders.

use std::collections::HashMap;

use thiserror::Error;

use crate::codes::{DecodingProblem, Sector};
use crate::cpnd::{decode_with, CpndContext, DescentOptions};
use crate::gf2::{BitMatrix, BitVector, Rref};
use crate::model::{hard_decision, predict_class};

/// Largest error space the ML oracle will enumerate.
pub const ML_MAX_BITS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReferenceError {
    #[error("ML oracle limited to n_err <= {ML_MAX_BITS}, got {0}")]
    TooLarge(usize),
    #[error("syndrome has no solution")]
    Inconsistent,
    #[error("prior does not match the problem: {0}")]
    Prior(String),
}

/// Channel model the oracle scores errors with.
#[derive(Clone, Debug, PartialEq)]
pub enum ChannelPrior {
    /// Flip probability per error bit.
    Independent(Vec<f64>),
    /// Depolarizing probability per qubit over `(e_x | e_z)`.
    Depolarizing(Vec<f64>),
}

impl ChannelPrior {
    pub fn for_problem(problem: &DecodingProblem, p: f64) -> Self {
        match problem.sector {
            Sector::Depolarizing => ChannelPrior::Depolarizing(vec![p; problem.n_err() / 2]),
            _ => ChannelPrior::Independent(vec![p; problem.n_err()]),
        }
    }

    fn check(&self, n_err: usize) -> Result<(), ReferenceError> {
        let (ps, n) = match self {
            ChannelPrior::Independent(p) => (p, n_err),
            ChannelPrior::Depolarizing(p) => (p, n_err / 2),
        };
        if ps.len() != n {
            return Err(ReferenceError::Prior(format!("{} entries, expected {n}", ps.len())));
        }
        if ps.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(ReferenceError::Prior("probability outside [0, 1)".into()));
        }
        Ok(())
    }

    pub fn probability(&self, e: &BitVector) -> f64 {
        match self {
            ChannelPrior::Independent(p) => p
                .iter()
                .enumerate()
                .map(|(i, &pi)| if e.get(i) { pi } else { 1.0 - pi })
                .product(),
            ChannelPrior::Depolarizing(p) => {
                let n = p.len();
                p.iter()
                    .enumerate()
                    .map(|(q, &pq)| {
                        if e.get(q) || e.get(n + q) {
                            pq / 3.0
                        } else {
                            1.0 - pq
                        }
                    })
                    .product()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlResult {
    pub class: usize,
    pub posterior: Vec<f64>,
    /// Most probable single error with the syndrome.
    pub representative: BitVector,
}

/// Exhaustive coset-probability decoder for small problems.
#[derive(Clone, Debug)]
pub struct MlOracle {
    problem: DecodingProblem,
    prior: ChannelPrior,
    rref: Rref,
    kernel: Vec<BitVector>,
    cache: HashMap<Vec<u64>, MlResult>,
}

impl MlOracle {
    pub fn new(problem: &DecodingProblem, prior: ChannelPrior) -> Result<Self, ReferenceError> {
        let n = problem.n_err();
        if n > ML_MAX_BITS {
            return Err(ReferenceError::TooLarge(n));
        }
        prior.check(n)?;
        Ok(Self {
            problem: problem.clone(),
            prior,
            rref: Rref::new(&problem.checks),
            kernel: problem.checks.nullspace_basis().row_vectors(),
            cache: HashMap::new(),
        })
    }

    /// Sums the prior over `offset ⊕ span(ker checks)` per logical class.
    /// Ties go to the lowest class index.
    pub fn decode(&mut self, syndrome: &BitVector) -> Result<MlResult, ReferenceError> {
        if let Some(r) = self.cache.get(syndrome.words()) {
            return Ok(r.clone());
        }
        let offset = self.rref.solve(syndrome).ok_or(ReferenceError::Inconsistent)?;
        let mut posterior = vec![0.0; self.problem.n_classes()];
        let mut e = offset;
        let mut best = (-1.0, e.clone());
        let k = self.kernel.len();
        // Gray-code walk over the kernel span.
        for i in 0u64..(1u64 << k) {
            if i > 0 {
                e.xor_assign(&self.kernel[i.trailing_zeros() as usize]);
            }
            let pr = self.prior.probability(&e);
            posterior[self.problem.logical_class(&e).expect("n_err bits")] += pr;
            if pr > best.0 {
                best = (pr, e.clone());
            }
        }
        let z: f64 = posterior.iter().sum();
        if z > 0.0 {
            posterior.iter_mut().for_each(|x| *x /= z);
        }
        let r = MlResult {
            class: predict_class(&posterior),
            posterior,
            representative: best.1,
        };
        self.cache.insert(syndrome.words().to_vec(), r.clone());
        Ok(r)
    }
}

pub fn ml_oracle_decode(
    problem: &DecodingProblem,
    syndrome: &BitVector,
    prior: &ChannelPrior,
) -> Result<MlResult, ReferenceError> {
    MlOracle::new(problem, prior.clone())?.decode(syndrome)
}

/// Order-0 ordered-statistics decoding on the stacked matrix.
///
/// Columns are ranked by `σ(ê_q)` descending (ties by index); the pivots of
/// the eliminated, reordered matrix form the information set. Other bits keep
/// their hard decision and the pivot bits are solved for.
pub fn osd0_decode(ctx: &CpndContext, error_logits: &[f64], b: &BitVector) -> BitVector {
    let n = ctx.n_err();
    assert_eq!(error_logits.len(), n);
    let mut order: Vec<usize> = (0..n).collect();
    // σ is monotone, so ranking by the logit is the same ranking.
    order.sort_by(|&i, &j| error_logits[j].total_cmp(&error_logits[i]).then(i.cmp(&j)));
    let rows = ctx.h_aug.rows();
    let mut permuted = BitMatrix::zeros(rows, n);
    for (new, &old) in order.iter().enumerate() {
        for r in 0..rows {
            if ctx.h_aug.get(r, old) {
                permuted.set(r, new, true);
            }
        }
    }
    let rref = Rref::new(&permuted);
    let hard = hard_decision(error_logits);
    let mut fixed = BitVector::zeros(n);
    let mut is_pivot = vec![false; n];
    for &p in rref.pivots() {
        is_pivot[p] = true;
    }
    for (new, &old) in order.iter().enumerate() {
        if !is_pivot[new] && hard.get(old) {
            fixed.set(old, true);
        }
    }
    let mut rhs = ctx.h_aug.matvec(&fixed).expect("n_err bits");
    rhs.xor_assign(b);
    let sol = rref.solve(&rhs).expect("stacked matrix has full row rank");
    let mut out = fixed;
    for new in sol.support() {
        out.set(order[new], true);
    }
    out
}

/// CPND with the descent step skipped.
pub fn projection_only_decode(
    ctx: &CpndContext,
    error_logits: &[f64],
    class_logits: &[f64],
    syndrome: &BitVector,
) -> BitVector {
    let b = ctx.target(syndrome, predict_class(class_logits));
    let (_, rec, _) = decode_with(
        &hard_decision(error_logits),
        &b,
        &[],
        ctx,
        DescentOptions::default(),
        true,
    );
    rec
}

/// The residual `e_true ⊕ recovery` is in the trivial logical class.
pub fn is_logical_success(problem: &DecodingProblem, e_true: &BitVector, recovery: &BitVector) -> bool {
    problem
        .logical_class(&e_true.xor(recovery))
        .expect("both vectors have n_err bits")
        == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::StabilizerCode;
    use crate::cpnd::{decode, BasisMode};
    use crate::noise::{make_batch, stream_rng, NoiseModel, NoiseSpec, StreamDomain};
    use rand::Rng;

    fn rep3() -> DecodingProblem {
        StabilizerCode::repetition(3).unwrap().sector_problem(Sector::XErrors).unwrap()
    }

    #[test]
    fn zero_syndrome_gives_trivial_class() {
        for problem in [
            rep3(),
            StabilizerCode::rotated_surface(3).unwrap().depolarizing_problem().unwrap(),
            StabilizerCode::toric(2).unwrap().sector_problem(Sector::XErrors).unwrap(),
        ] {
            let prior = ChannelPrior::for_problem(&problem, 0.1);
            let r = ml_oracle_decode(&problem, &BitVector::zeros(problem.m()), &prior).unwrap();
            assert_eq!(r.class, 0);
            assert!(r.representative.is_zero());
            assert!((r.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// Brute force over all 2^n errors.
    fn brute_posterior(problem: &DecodingProblem, s: &BitVector, prior: &ChannelPrior) -> Vec<f64> {
        let n = problem.n_err();
        let mut post = vec![0.0; problem.n_classes()];
        for x in 0u64..(1 << n) {
            let e = BitVector::from_u64(n, x);
            if &problem.syndrome(&e).unwrap() == s {
                post[problem.logical_class(&e).unwrap()] += prior.probability(&e);
            }
        }
        let z: f64 = post.iter().sum();
        post.iter().map(|p| p / z).collect()
    }

    #[test]
    fn coset_enumeration_matches_brute_force() {
        let problem = StabilizerCode::toric(2).unwrap().depolarizing_problem().unwrap();
        let prior = ChannelPrior::for_problem(&problem, 0.12);
        let mut oracle = MlOracle::new(&problem, prior.clone()).unwrap();
        let mut rng = stream_rng(4, StreamDomain::Test, 0);
        for _ in 0..6 {
            let e = BitVector::from_bools((0..problem.n_err()).map(|_| rng.gen_bool(0.15)));
            let s = problem.syndrome(&e).unwrap();
            let r = oracle.decode(&s).unwrap();
            let brute = brute_posterior(&problem, &s, &prior);
            for (a, b) in r.posterior.iter().zip(&brute) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(problem.syndrome(&r.representative).unwrap(), s);
        }
    }

    #[test]
    fn repetition_oracle_is_majority_vote() {
        let problem = rep3();
        let prior = ChannelPrior::for_problem(&problem, 0.1);
        let mut oracle = MlOracle::new(&problem, prior).unwrap();
        for x in 0u64..8 {
            let e = BitVector::from_u64(3, x);
            let r = oracle.decode(&problem.syndrome(&e).unwrap()).unwrap();
            let majority = e.weight() >= 2;
            assert_eq!(is_logical_success(&problem, &e, &r.representative), !majority);
        }
    }

    #[test]
    fn size_cap() {
        let problem = StabilizerCode::toric(3).unwrap().depolarizing_problem().unwrap();
        let prior = ChannelPrior::for_problem(&problem, 0.1);
        assert_eq!(
            MlOracle::new(&problem, prior).unwrap_err(),
            ReferenceError::TooLarge(36)
        );
    }

    #[test]
    fn osd0_is_feasible_and_deterministic() {
        let problem = StabilizerCode::toric(3).unwrap().sector_problem(Sector::XErrors).unwrap();
        let ctx = CpndContext::build(&problem, BasisMode::ExactKernel).unwrap();
        let mut rng = stream_rng(5, StreamDomain::Test, 0);
        for _ in 0..500 {
            let el: Vec<f64> = (0..problem.n_err()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b = BitVector::from_bools((0..ctx.h_aug.rows()).map(|_| rng.gen_bool(0.5)));
            let e = osd0_decode(&ctx, &el, &b);
            assert!(ctx.is_feasible(&e, &b));
            assert_eq!(osd0_decode(&ctx, &el, &b), e);
        }
        // Uniform logits pick the leading pivot columns.
        let b = BitVector::from_bools((0..ctx.h_aug.rows()).map(|i| i % 2 == 0));
        let uniform = vec![-1.0; problem.n_err()];
        assert_eq!(osd0_decode(&ctx, &uniform, &b), ctx.b_inv.matvec(&b).unwrap());
    }

    #[test]
    fn osd0_keeps_reliable_hard_decisions() {
        let problem = StabilizerCode::toric(3).unwrap().sector_problem(Sector::ZErrors).unwrap();
        let ctx = CpndContext::build(&problem, BasisMode::ExactKernel).unwrap();
        let e = BitVector::from_support(problem.n_err(), &[2, 11]);
        let b = problem.augmented().matvec(&e).unwrap();
        let el: Vec<f64> = e.iter().map(|x| if x { 6.0 } else { -6.0 }).collect();
        assert_eq!(osd0_decode(&ctx, &el, &b), e);
    }

    #[test]
    fn projection_only_matches_cpnd_without_moves() {
        let problem = StabilizerCode::rotated_surface(3).unwrap().sector_problem(Sector::XErrors).unwrap();
        let ctx = CpndContext::build(&problem, BasisMode::ExactKernel).unwrap();
        let mut rng = stream_rng(6, StreamDomain::Test, 0);
        for _ in 0..500 {
            let el: Vec<f64> = (0..problem.n_err()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cl = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let s = BitVector::from_bools((0..problem.m()).map(|_| rng.gen_bool(0.5)));
            let proj = projection_only_decode(&ctx, &el, &cl, &s);
            let full = decode(&el, &cl, &s, &ctx, DescentOptions::default());
            assert_eq!(proj, full.projected);
            if full.trace.accepted.is_empty() {
                assert_eq!(proj, full.recovery);
            }
        }
    }

    #[test]
    fn success_predicate() {
        let problem = StabilizerCode::toric(3).unwrap().sector_problem(Sector::XErrors).unwrap();
        let e = BitVector::from_support(problem.n_err(), &[0, 4, 9]);
        assert!(is_logical_success(&problem, &e, &e));
        for h in problem.stabilizers.row_vectors() {
            assert!(is_logical_success(&problem, &e, &e.xor(&h)));
        }
        // X-type logicals anticommute with the Z-type logical rows read here.
        let code = StabilizerCode::toric(3).unwrap();
        for lx in code.lx.row_vectors() {
            assert!(!is_logical_success(&problem, &e, &e.xor(&lx)));
        }
    }

    #[test]
    fn oracle_beats_cpnd_with_channel_logits() {
        let problem = StabilizerCode::rotated_surface(3).unwrap().sector_problem(Sector::XErrors).unwrap();
        let ctx = CpndContext::build(&problem, BasisMode::ExactKernel).unwrap();
        let p = 0.08;
        let mut oracle = MlOracle::new(&problem, ChannelPrior::for_problem(&problem, p)).unwrap();
        let spec = NoiseSpec::fixed(NoiseModel::Independent, p).unwrap();
        let batch = make_batch(&problem, &spec, 4000, 7, StreamDomain::Test, 0).unwrap();
        let logit = (p / (1.0 - p)).ln();
        let el = vec![logit; problem.n_err()];
        let (mut ml_fail, mut cp_fail) = (0, 0);
        for i in 0..batch.len() {
            let s = batch.syndrome_bits(i);
            let r = oracle.decode(&s).unwrap();
            if r.class != batch.classes[i] {
                ml_fail += 1;
            }
            // Always targets class 0.
            let rec = decode(&el, &[0.0, 0.0], &s, &ctx, DescentOptions::default()).recovery;
            if !is_logical_success(&problem, &batch.errors[i], &rec) {
                cp_fail += 1;
            }
        }
        assert!(ml_fail <= cp_fail, "{ml_fail} vs {cp_fail}");
    }
}
