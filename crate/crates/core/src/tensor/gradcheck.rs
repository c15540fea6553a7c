use super::{Graph, Tensor, TensorError, Var};

const GRAD_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    grad_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several input tensors at once.
///
/// Each coordinate contributes `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
/// The floor keeps coordinates whose true gradient is below the difference
/// quotient's own roundoff (about `1e-16 · |f| / step`) from dominating.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |point: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).map_err(|e| match e {
            TensorError::NumericOverflow { .. } => TensorError::NonFiniteProbe,
            other => other,
        })?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
        }
        if !v.item().is_finite() {
            return Err(TensorError::NonFiniteProbe);
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut point = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            point[k].data_mut()[i] = orig + step;
            let up = eval(&point)?;
            point[k].data_mut()[i] = orig - step;
            let down = eval(&point)?;
            point[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
