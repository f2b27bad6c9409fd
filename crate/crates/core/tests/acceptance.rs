//! Runs the eight acceptance criteria and prints one line per criterion.
//! Built with `harness = false`; a failing criterion makes the process exit 1.

use std::time::{Duration, Instant};

use saq_core::codes::CodeFamily;
use saq_core::experiment::config::{DecoderKind, ExperimentConfig};
use saq_core::experiment::eval::{evaluate, write_csv, LerRow};
use saq_core::experiment::selftest::{check_algebra, check_cpnd, check_gradients, check_parity_oracle};
use saq_core::experiment::train::TrainedDecoder;
use saq_core::experiment::weights::{compare_weights, ordering_violations, WeightRow};
use saq_core::noise::NoiseModel;

struct Verdict {
    passed: bool,
    detail: String,
}

fn within(limit: Duration, start: Instant, v: Verdict) -> Verdict {
    let t = start.elapsed();
    if t > limit {
        return Verdict {
            passed: false,
            detail: format!("{} (took {t:.1?}, limit {limit:?})", v.detail),
        };
    }
    Verdict {
        passed: v.passed,
        detail: format!("{} in {t:.1?}", v.detail),
    }
}

fn algebra() -> Verdict {
    let r = check_algebra();
    Verdict { passed: r.passed, detail: r.detail }
}

fn parity() -> Verdict {
    let r = check_parity_oracle(1000, 7);
    Verdict { passed: r.passed, detail: r.detail }
}

fn gradients() -> Verdict {
    let rs = check_gradients();
    let failed: Vec<&str> = rs.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let detail = rs.iter().map(|r| format!("{}: {}", r.name, r.detail)).collect::<Vec<_>>().join(", ");
    Verdict {
        passed: failed.is_empty(),
        detail,
    }
}

fn cpnd_contract() -> Verdict {
    let r = check_cpnd(10_000, 7);
    Verdict { passed: r.passed, detail: r.detail }
}

fn weight_ordering() -> Verdict {
    let cfg = ExperimentConfig {
        code: CodeFamily::Toric,
        distance: 4,
        shots: 10_000,
        ..ExperimentConfig::for_noise(NoiseModel::Independent)
    };
    let ps = [0.05, 0.10, 0.15, 0.20];
    let rows = compare_weights(&cfg, None, &ps, 1).expect("weights");
    let violations = ordering_violations(&rows, 2.0);
    let mean = |p: f64, m: &str| -> f64 {
        rows.iter()
            .find(|r: &&WeightRow| r.p == p && r.method == m)
            .map(|r| r.mean_weight)
            .expect("row")
    };
    let gap = |p: f64| mean(p, "projection") - mean(p, "cpnd");
    let summary = ps
        .iter()
        .map(|&p| format!("p={p}: {:.2}/{:.2}/{:.2}", mean(p, "projection"), mean(p, "cpnd"), mean(p, "osd0")))
        .collect::<Vec<_>>()
        .join(", ");
    let growing = gap(0.20) > gap(0.05);
    Verdict {
        passed: violations.is_empty() && growing,
        detail: format!(
            "{summary}; gap {:.2} -> {:.2}{}",
            gap(0.05),
            gap(0.20),
            if violations.is_empty() { String::new() } else { format!("; {}", violations.join("; ")) }
        ),
    }
}

fn ml_oracle() -> Verdict {
    let ps = vec![0.05, 0.1, 0.2];
    let cfg = ExperimentConfig {
        code: CodeFamily::Repetition,
        distance: 3,
        p_grid: ps.clone(),
        decoders: vec![DecoderKind::Ml],
        shots: 100_000,
        seed: 11,
        ..ExperimentConfig::for_noise(NoiseModel::Independent)
    };
    let rows = evaluate(&cfg, None, 1).expect("oracle");
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &rows {
        let p = r.p;
        let exact = 3.0 * p * p * (1.0 - p) + p * p * p;
        let se = (exact * (1.0 - exact) / r.shots as f64).sqrt();
        let z = (r.ler - exact) / se;
        ok &= z.abs() <= 3.0;
        parts.push(format!("p={p}: {:.5} vs {exact:.5} ({z:+.2} se)", r.ler));
    }
    Verdict {
        passed: ok && rows.len() == 3,
        detail: parts.join(", "),
    }
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig {
        p_grid: vec![0.05, 0.08, 0.11, 0.14, 0.17, 0.20],
        shots: 10_000,
        ..ExperimentConfig::default()
    }
}

fn ler(rows: &[LerRow], p: f64, d: DecoderKind) -> &LerRow {
    rows.iter().find(|r| r.p == p && r.decoder == d.as_str()).expect("row")
}

fn sigma(r: &LerRow) -> f64 {
    (r.ler * (1.0 - r.ler) / r.shots as f64).sqrt()
}

fn end_to_end(dec: &TrainedDecoder, cfg: &ExperimentConfig) -> Verdict {
    let rows = evaluate(cfg, Some(dec), 1).expect("eval");
    let cp = ler(&rows, 0.08, DecoderKind::Cpnd);
    let ml = ler(&rows, 0.08, DecoderKind::Ml);
    let a = cp.ler <= 1.5 * ml.ler;
    let mut b = true;
    for &p in &cfg.p_grid {
        let c = ler(&rows, p, DecoderKind::Cpnd);
        let j = ler(&rows, p, DecoderKind::Projection);
        b &= c.ler <= j.ler + 2.0 * (sigma(c).powi(2) + sigma(j).powi(2)).sqrt();
    }
    Verdict {
        passed: a && b,
        detail: format!(
            "{} Adam steps; (a) p=0.08 cpnd {:.4} vs ml {:.4} (ratio {:.3}) {}; (b) cpnd <= projection at all {} p {}",
            cfg.total_steps(),
            cp.ler,
            ml.ler,
            cp.ler / ml.ler,
            if a { "ok" } else { "FAIL" },
            cfg.p_grid.len(),
            if b { "ok" } else { "FAIL" }
        ),
    }
}

fn determinism(dec: &TrainedDecoder, cfg: &ExperimentConfig) -> Verdict {
    let cfg = ExperimentConfig {
        shots: 1500,
        ..cfg.clone()
    };
    let csv = |workers: usize| {
        let rows = evaluate(&cfg, Some(dec), workers).expect("eval");
        let mut buf = Vec::new();
        write_csv(&mut buf, &cfg, &rows).expect("csv");
        buf
    };
    let runs = [csv(1), csv(1), csv(4), csv(4)];
    let same = runs.iter().all(|r| *r == runs[0]);
    Verdict {
        passed: same,
        detail: format!("{} bytes, runs x workers {{1, 4}} identical: {same}", runs[0].len()),
    }
}

fn main() {
    let mut lines = Vec::new();
    let mut record = |n: usize, name: &str, v: Verdict| {
        let line = format!("criterion {n} {}: {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        println!("{line}");
        lines.push((v.passed, line));
    };

    let t = Instant::now();
    record(1, "algebraic identities", within(Duration::from_secs(5), t, algebra()));
    let t = Instant::now();
    record(2, "parity oracle", within(Duration::from_secs(10), t, parity()));
    let t = Instant::now();
    record(3, "gradient checks", within(Duration::from_secs(120), t, gradients()));
    let t = Instant::now();
    record(4, "cpnd contract", within(Duration::from_secs(60), t, cpnd_contract()));
    let t = Instant::now();
    record(5, "recovery weight ordering", within(Duration::from_secs(600), t, weight_ordering()));
    let t = Instant::now();
    record(6, "ml oracle", within(Duration::from_secs(60), t, ml_oracle()));

    let t = Instant::now();
    let cfg = desk_config();
    let (dec, _) = TrainedDecoder::train(&cfg, |e| {
        if e.epoch % 10 == 9 {
            eprintln!("  epoch {} loss {:.4} class acc {:.3}", e.epoch + 1, e.mean.loss, e.mean.class_acc);
        }
    })
    .expect("training");
    let v = end_to_end(&dec, &cfg);
    record(7, "desk-scale training", within(Duration::from_secs(45 * 60), t, v));
    let t = Instant::now();
    record(8, "determinism", within(Duration::from_secs(600), t, determinism(&dec, &cfg)));

    println!();
    for (_, l) in &lines {
        println!("{l}");
    }
    if lines.iter().any(|(ok, _)| !ok) {
        std::process::exit(1);
    }
}
