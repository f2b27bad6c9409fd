//! Invariant suite shared by the `selftest` command and the acceptance tests.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::codes::{DecodingProblem, Sector, StabilizerCode};
use crate::cpnd::{decode, BasisMode, CpndContext, DescentOptions};
use crate::diff::{gradient_check, DiffError, GradReport, Graph, Tensor, Var};
use crate::gf2::{BitMatrix, BitVector};
use crate::losses::{
    combined_loss, entropy_loss, lc_loss, logical_supports, lp_loss, parity_violation_prob, sigmoid_tanh_identity_check,
    LossWeights, ResidualProbs,
};
use crate::model::{Architecture, ModelConfig, ModelParams, Sltd};
use crate::noise::{make_batch, stream_rng, NoiseModel, NoiseSpec, StreamDomain};

pub const GRAD_TOL: f64 = 1e-4;
pub const PARITY_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn outcome(name: &str, start: Instant, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Every binary problem a code supports.
pub fn all_problems(code: &StabilizerCode) -> Vec<DecodingProblem> {
    [
        code.sector_problem(Sector::XErrors),
        code.sector_problem(Sector::ZErrors),
        code.depolarizing_problem(),
    ]
    .into_iter()
    .filter_map(Result::ok)
    .collect()
}

pub fn identity_codes() -> Vec<StabilizerCode> {
    let mut codes = Vec::new();
    for l in [2, 3, 4] {
        codes.push(StabilizerCode::toric(l).expect("toric"));
    }
    for l in [3, 5] {
        codes.push(StabilizerCode::rotated_surface(l).expect("rotated"));
        codes.push(StabilizerCode::repetition(l).expect("repetition"));
    }
    codes
}

/// Commutation, full rank of the stacked checks and logicals, the exact
/// left inverse and the kernel basis, for every code and problem.
pub fn check_algebra() -> CheckOutcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut problems = 0;
    for code in identity_codes() {
        let name = code.name();
        if code.hx.rows() > 0 && !code.hx.matmul(&code.hz.transpose()).expect("same n").is_zero() {
            failures.push(format!("{name}: Hx Hz^T != 0"));
        }
        for p in all_problems(&code) {
            problems += 1;
            let tag = format!("{name}/{}", p.sector.as_str());
            if p.augmented().rank() != p.m() + p.n_log() {
                failures.push(format!("{tag}: stacked rank"));
            }
            for mode in [BasisMode::ExactKernel, BasisMode::StabilizerRows] {
                let ctx = match CpndContext::build(&p, mode) {
                    Ok(c) => c,
                    Err(e) => {
                        failures.push(format!("{tag}: {e}"));
                        continue;
                    }
                };
                let prod = ctx.h_aug.matmul(&ctx.b_inv).expect("shapes");
                if prod != BitMatrix::identity(ctx.h_aug.rows()) {
                    failures.push(format!("{tag}: H_aug B != I"));
                }
                if ctx.basis.row_vectors().iter().any(|v| !ctx.h_aug.matvec(v).expect("n_err").is_zero()) {
                    failures.push(format!("{tag} {mode:?}: generator outside kernel"));
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("{problems} problems")
    } else {
        failures.join("; ")
    };
    outcome("gf2 identities", start, failures.is_empty(), detail)
}

/// `Pr(odd parity)` by summing over all `2^k` outcomes.
pub fn exhaustive_parity(q: &[f64]) -> f64 {
    let k = q.len();
    (0u32..1 << k)
        .filter(|x| x.count_ones() % 2 == 1)
        .map(|x| {
            (0..k)
                .map(|j| if x >> j & 1 == 1 { q[j] } else { 1.0 - q[j] })
                .product::<f64>()
        })
        .sum()
}

pub fn check_parity_oracle(cases: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for c in 0..cases {
        let mut rng = stream_rng(seed, StreamDomain::Test, c as u64);
        let n = 16;
        let k = rng.gen_range(1..=12);
        let mut support: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.gen_range(i..n);
            support.swap(i, j);
        }
        support.truncate(k);
        let q = ResidualProbs {
            q: (0..n).map(|_| rng.gen::<f64>()).collect(),
        };
        let sub: Vec<f64> = support.iter().map(|&j| q.q[j]).collect();
        worst = worst.max((parity_violation_prob(&support, &q) - exhaustive_parity(&sub)).abs());
    }
    let identity = sigmoid_tanh_identity_check(100_001);
    outcome(
        "parity oracle",
        start,
        worst <= PARITY_TOL && identity <= PARITY_TOL,
        format!("{cases} cases, max diff {worst:.2e}, sigmoid-tanh {identity:.2e}"),
    )
}

fn randomize(p: &mut ModelParams, seed: u64, scale: f64) {
    for (i, t) in p.tensors_mut().iter_mut().enumerate() {
        let mut rng = stream_rng(seed, StreamDomain::Test, i as u64);
        for x in t.data_mut() {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn random_tensor(rows: usize, cols: usize, seed: u64, index: u64) -> Tensor {
    let mut rng = stream_rng(seed, StreamDomain::Test, index);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("shape")
}

fn grad_row(name: &str, start: Instant, r: Result<GradReport, DiffError>) -> CheckOutcome {
    match r {
        Ok(r) => outcome(
            name,
            start,
            r.max_rel_error <= GRAD_TOL,
            format!("{} coords, max rel {:.2e}", r.coordinates, r.max_rel_error),
        ),
        Err(e) => outcome(name, start, false, e.to_string()),
    }
}

fn layer_gradient(x: &DecodingProblem, arch: Architecture, eps: f64, floor: f64) -> Result<GradReport, DiffError> {
    let mut params = ModelParams::init(ModelConfig::for_problem(arch, x).expect("config"), 1).expect("init");
    randomize(&mut params, 5, 0.5);
    let model = Sltd::new(params.clone(), x).expect("model");
    // Two samples; x has two logical tokens per sample.
    let (rows, d) = (2 * (x.m() + 1), arch.d);
    let (ws, wl) = (random_tensor(rows, d, 2, 2), random_tensor(4, d, 2, 3));
    let mut all = params.tensors().to_vec();
    all.push(random_tensor(rows, d, 2, 0));
    all.push(random_tensor(4, d, 2, 1));
    let n = params.tensors().len();
    gradient_check(&all, eps, floor, |g, p| {
        let o = model.layer_forward(g, &p[..n], 0, p[n], p[n + 1], 2)?;
        let a = g.constant(ws.clone())?;
        let b = g.constant(wl.clone())?;
        let s = g.mul(o.syndrome, a)?;
        let l = g.mul(o.logical, b)?;
        let s = g.sum(s)?;
        let l = g.sum(l)?;
        g.add(s, l)
    })
}

fn model_gradient(rep: &DecodingProblem, arch: Architecture, eps: f64, floor: f64) -> Result<GradReport, DiffError> {
    let mut params = ModelParams::init(ModelConfig::for_problem(arch, rep).expect("config"), 1).expect("init");
    randomize(&mut params, 21, 0.5);
    let model = Sltd::new(params.clone(), rep).expect("model");
    let spec = NoiseSpec::fixed(NoiseModel::Independent, 0.3).expect("p");
    let batch = make_batch(rep, &spec, 3, 11, StreamDomain::Test, 0).expect("batch");
    let supports = logical_supports(&rep.logicals);
    gradient_check(params.tensors(), eps, floor, |g: &mut Graph, p: &[Var]| {
        let s = g.constant(Tensor::from_vec(3, rep.m(), batch.syndromes.clone())?)?;
        let o = model.forward(g, p, s)?;
        let t = combined_loss(
            g,
            o.prior_logits,
            o.class_logits,
            o.error_logits,
            &batch.classes,
            &batch.errors,
            supports.clone(),
            &LossWeights::default(),
        )?;
        Ok(t.total)
    })
}

/// Finite-difference checks of the three losses, one layer and the tiny model.
pub fn check_gradients() -> Vec<CheckOutcome> {
    let (eps, floor) = (1e-5, 1e-6);
    let mut out = Vec::new();
    let rot = StabilizerCode::rotated_surface(3).expect("rotated").depolarizing_problem().expect("depolarizing");
    let spec = NoiseSpec::fixed(NoiseModel::Depolarizing, 0.15).expect("p");
    let batch = make_batch(&rot, &spec, 4, 3, StreamDomain::Test, 0).expect("batch");

    let start = Instant::now();
    let supports = logical_supports(&rot.logicals);
    let logits = random_tensor(4, rot.n_err(), 1, 0);
    let r = gradient_check(&[logits], eps, floor, |g, p| entropy_loss(g, p[0], &batch.errors, supports.clone()));
    out.push(grad_row("grad entropy loss", start, r));

    let start = Instant::now();
    let cl = random_tensor(4, rot.n_classes(), 1, 1);
    let r = gradient_check(std::slice::from_ref(&cl), eps, floor, |g, p| lp_loss(g, p[0], &batch.classes));
    out.push(grad_row("grad prior CE", start, r));
    let start = Instant::now();
    let r = gradient_check(&[cl], eps, floor, |g, p| lc_loss(g, p[0], &batch.classes));
    out.push(grad_row("grad class CE", start, r));

    let start = Instant::now();
    let x = StabilizerCode::rotated_surface(3).expect("rotated").sector_problem(Sector::XErrors).expect("x");
    let arch = Architecture { d: 8, layers: 1, heads: 2, share_weights: false };
    let r = layer_gradient(&x, arch, eps, floor);
    out.push(grad_row("grad SLTD layer", start, r));

    let start = Instant::now();
    let rep = StabilizerCode::repetition(3).expect("rep").sector_problem(Sector::XErrors).expect("x");
    let arch = Architecture { d: 8, layers: 2, heads: 2, share_weights: true };
    let r = model_gradient(&rep, arch, eps, floor);
    out.push(grad_row("grad tiny model", start, r));
    out
}

/// Random soft inputs through CPND: the output must meet the syndrome and
/// class constraints and never cost more than the projection.
pub fn check_cpnd(instances: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let codes = [
        StabilizerCode::toric(2).expect("toric"),
        StabilizerCode::rotated_surface(3).expect("rotated"),
    ];
    let mut total = 0;
    for (ci, code) in codes.iter().enumerate() {
        let problems = all_problems(code);
        let ctxs: Vec<CpndContext> = problems
            .iter()
            .map(|p| CpndContext::build(p, BasisMode::ExactKernel).expect("context"))
            .collect();
        for i in 0..instances {
            let k = i % problems.len();
            let (p, ctx) = (&problems[k], &ctxs[k]);
            let mut rng = stream_rng(seed, StreamDomain::Test, ((ci as u64) << 32) | i as u64);
            let scale = [0.5, 2.0, 6.0][i % 3];
            let el: Vec<f64> = (0..p.n_err()).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let cl: Vec<f64> = (0..p.n_classes()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let s = BitVector::from_bools((0..p.m()).map(|_| rng.gen::<bool>()));
            let r = decode(&el, &cl, &s, ctx, DescentOptions::default());
            total += 1;
            if p.syndrome(&r.recovery).expect("n_err") != s || p.logical_class(&r.recovery).expect("n_err") != r.class {
                failures.push(format!("{} instance {i}: infeasible", code.name()));
            }
            if r.final_cost > r.projection_cost {
                failures.push(format!("{} instance {i}: cost {} > {}", code.name(), r.final_cost, r.projection_cost));
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("{total} instances")
    } else {
        format!("{} failures, first: {}", failures.len(), failures[0])
    };
    outcome("cpnd contract", start, failures.is_empty(), detail)
}

pub fn run_all() -> Vec<CheckOutcome> {
    let mut out = vec![check_algebra(), check_parity_oracle(1000, 1)];
    out.extend(check_gradients());
    out.push(check_cpnd(10_000, 1));
    out
}

pub fn render(results: &[CheckOutcome]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let _ = writeln!(
            s,
            "{}  {:width$}  {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    s
}
