use super::{DiffError, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(param, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares backward-pass gradients of `f` with central differences.
///
/// `f` builds a scalar from the parameter leaves it is given. The relative
/// error of a coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check<F>(params: &[Tensor], eps: f64, floor: f64, f: F) -> Result<GradReport, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let vars = ps
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let root = f(&mut g, &vars)?;
    g.backward(root)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].rows(), params[pi].cols()));
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, j);
            }
        }
    }
    Ok(report)
}
