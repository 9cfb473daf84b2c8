use super::{Graph, NumError, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) where the maximum occurred
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the graph gradient of a scalar function against central finite
/// differences with step `step`, coordinate by coordinate.
///
/// `f` receives a fresh graph and one trainable leaf per entry of `params`
/// and must return the scalar loss node.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, NumError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(g);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for (ci, &an) in grad.iter().enumerate() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (an - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (pi, ci);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
