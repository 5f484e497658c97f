use super::{Graph, Result, Tensor, TensorError, Var};

/// Compares reverse-mode gradients against central differences.
///
/// `build` maps bound parameters to a scalar loss. Returns the maximum over
/// every parameter entry of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(TensorError::InvalidArgument { op: "grad_check", reason: "step must be positive".into() });
    }
    let eval = |values: &[Tensor], trainable: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (mut g, vars, loss) = eval(params, true)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("bound as trainable")).collect();

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe[pi].data()[j];
            probe[pi].data_mut()[j] = orig + h;
            let (g1, _, l1) = eval(&probe, false)?;
            probe[pi].data_mut()[j] = orig - h;
            let (g2, _, l2) = eval(&probe, false)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (g1.value(l1).item() - g2.value(l2).item()) / (2.0 * h);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
