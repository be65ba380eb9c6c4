use super::{DiffError, Graph, RealArray, Var};

/// Outcome of comparing reverse-mode gradients against finite differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates where forward and backward one-sided differences
    /// disagree, i.e. the loss has a kink there.
    pub nondifferentiable: Vec<usize>,
}

/// Relative error with a unit floor on the denominator, so that tiny
/// gradients are compared in absolute terms.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn eval(
    loss: &impl Fn(&mut Graph, Var) -> Result<Var, DiffError>,
    params: RealArray,
    coord: usize,
) -> Result<f64, DiffError> {
    let mut g = Graph::new();
    let p = g.constant(params);
    let l = loss(&mut g, p).map_err(|e| DiffError::ProbeFailed {
        coordinate: coord,
        reason: e.to_string(),
    })?;
    let v = g.value(l).item();
    if !v.is_finite() {
        return Err(DiffError::NonFiniteProbe { coordinate: coord });
    }
    Ok(v)
}

/// Checks the gradient of a scalar `loss(params)` at `params` against central
/// differences with the given step.
pub fn gradcheck(
    loss: impl Fn(&mut Graph, Var) -> Result<Var, DiffError>,
    params: &RealArray,
    step: f64,
    tol: f64,
) -> Result<GradcheckReport, DiffError> {
    if !(step > 0.0 && tol > 0.0) {
        return Err(DiffError::InvalidArgument("step and tol must be positive"));
    }
    let mut g = Graph::new();
    let p = g.param(params.clone());
    let root = loss(&mut g, p)?;
    let f0 = g.value(root).item();
    if !f0.is_finite() {
        return Err(DiffError::NonFiniteProbe { coordinate: usize::MAX });
    }
    let grads = g.backward(root)?;
    let analytic = grads
        .get(p)
        .map(|a| a.data().to_vec())
        .unwrap_or_else(|| vec![0.0; params.len()]);

    let mut numeric = Vec::with_capacity(params.len());
    let mut nondifferentiable = Vec::new();
    let kink_threshold = step.sqrt();
    for k in 0..params.len() {
        let mut plus = params.clone();
        plus.data_mut()[k] += step;
        let mut minus = params.clone();
        minus.data_mut()[k] -= step;
        let fp = eval(&loss, plus, k)?;
        let fm = eval(&loss, minus, k)?;
        let central = (fp - fm) / (2.0 * step);
        let forward = (fp - f0) / step;
        let backward = (f0 - fm) / step;
        if (forward - backward).abs() > kink_threshold * (1.0 + central.abs()) {
            nondifferentiable.push(k);
        }
        numeric.push(central);
    }

    let (mut worst_index, mut max_rel_error) = (0, 0.0);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = k;
        }
    }
    Ok(GradcheckReport {
        passed: max_rel_error <= tol && nondifferentiable.is_empty(),
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        nondifferentiable,
    })
}
