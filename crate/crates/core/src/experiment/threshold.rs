use std::collections::BTreeMap;

use super::eval::LerRow;

/// Crossing of the log-LER interpolants of two distances.
#[derive(Clone, Debug, PartialEq)]
pub struct Crossing {
    pub l_small: usize,
    pub l_large: usize,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ThresholdEstimate {
    Found {
        mean: f64,
        /// Half the range of the pairwise crossings.
        spread: f64,
        crossings: Vec<Crossing>,
    },
    NoCrossing,
}

impl std::fmt::Display for ThresholdEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdEstimate::Found { mean, spread, crossings } => {
                writeln!(f, "threshold {mean:.5} +/- {spread:.5}")?;
                for c in crossings {
                    writeln!(f, "  L={} vs L={}: {:.5}", c.l_small, c.l_large, c.p)?;
                }
                Ok(())
            }
            ThresholdEstimate::NoCrossing => writeln!(f, "no crossing in grid"),
        }
    }
}

// Zero failure counts have no logarithm; clamp at half a failure.
fn log_ler(r: &LerRow) -> f64 {
    let floor = 0.5 / r.shots.max(1) as f64;
    r.ler.max(floor).ln()
}

/// First `p` where `a - b` changes sign on the shared grid, linear in
/// `log LER` between grid points.
fn crossing(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    let shared: Vec<(f64, f64)> = a
        .iter()
        .filter_map(|&(p, ya)| b.iter().find(|(q, _)| *q == p).map(|&(_, yb)| (p, ya - yb)))
        .collect();
    for w in shared.windows(2) {
        let ((p0, d0), (p1, d1)) = (w[0], w[1]);
        if d0 == 0.0 && d1 == 0.0 {
            continue;
        }
        if d0 == 0.0 {
            return Some(p0);
        }
        if d0.signum() != d1.signum() {
            return Some(p0 + (p1 - p0) * d0 / (d0 - d1));
        }
    }
    None
}

/// Pairwise crossings between every pair of distances for one decoder.
pub fn estimate_threshold(rows: &[LerRow], decoder: &str) -> ThresholdEstimate {
    let mut curves: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.decoder == decoder) {
        curves.entry(r.l).or_default().push((r.p, log_ler(r)));
    }
    for c in curves.values_mut() {
        c.sort_by(|x, y| x.0.total_cmp(&y.0));
    }
    let ls: Vec<usize> = curves.keys().copied().collect();
    let mut crossings = Vec::new();
    for (i, &a) in ls.iter().enumerate() {
        for &b in &ls[i + 1..] {
            if let Some(p) = crossing(&curves[&a], &curves[&b]) {
                crossings.push(Crossing {
                    l_small: a,
                    l_large: b,
                    p,
                });
            }
        }
    }
    if crossings.is_empty() {
        return ThresholdEstimate::NoCrossing;
    }
    let ps: Vec<f64> = crossings.iter().map(|c| c.p).collect();
    let mean = ps.iter().sum::<f64>() / ps.len() as f64;
    let lo = ps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ThresholdEstimate::Found {
        mean,
        spread: (hi - lo) / 2.0,
        crossings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::grid;

    fn row(l: usize, p: f64, ler: f64) -> LerRow {
        LerRow {
            code: "toric".into(),
            l,
            noise: "independent".into(),
            p,
            decoder: "sltd-cpnd".into(),
            shots: 1_000_000,
            failures: (ler * 1e6).round() as u64,
            ler,
            wilson_lo: ler,
            wilson_hi: ler,
            seed: 1,
        }
    }

    // Scaling-form curves (p / p*)^((L+1)/2) all meet at p*.
    fn synthetic(p_star: f64) -> Vec<LerRow> {
        let mut rows = Vec::new();
        for l in [3, 5, 7] {
            for p in grid(0.05, 0.15, 0.01) {
                rows.push(row(l, p, 0.1 * (p / p_star).powf((l as f64 + 1.0) / 2.0)));
            }
        }
        rows
    }

    #[test]
    fn recovers_constructed_crossing() {
        match estimate_threshold(&synthetic(0.1), "sltd-cpnd") {
            ThresholdEstimate::Found { mean, spread, crossings } => {
                assert_eq!(crossings.len(), 3);
                assert!((mean - 0.1).abs() <= 0.01, "{mean}");
                assert!(spread <= 0.01);
            }
            ThresholdEstimate::NoCrossing => panic!("expected a crossing"),
        }
    }

    #[test]
    fn identical_curves_do_not_cross() {
        let mut rows = Vec::new();
        for l in [3, 5] {
            for p in grid(0.05, 0.15, 0.01) {
                rows.push(row(l, p, p));
            }
        }
        assert_eq!(estimate_threshold(&rows, "sltd-cpnd"), ThresholdEstimate::NoCrossing);
        assert_eq!(estimate_threshold(&synthetic(0.1), "ml-oracle"), ThresholdEstimate::NoCrossing);
    }

    #[test]
    fn separated_curves_do_not_cross() {
        let rows: Vec<LerRow> = synthetic(0.5).into_iter().collect();
        assert_eq!(estimate_threshold(&rows, "sltd-cpnd"), ThresholdEstimate::NoCrossing);
    }
}
