use super::{no_grad, Result, Tensor};

/// Central-difference gradient check.
///
/// Rebuilds every input as a fresh trainable leaf, backpropagates once for
/// the analytic gradient, then perturbs each coordinate by `±eps`. Returns the
/// worst `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::to_param).collect();
    f(&leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut xs = leaves.clone();
        let mut data = leaves[which].data().to_vec();
        data[coord] += delta;
        xs[which] = Tensor::param(leaves[which].shape(), data)?;
        no_grad(|| f(&xs)).map(|t| t.item())
    };

    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.numel() {
            let numeric = (eval(i, j, eps)? - eval(i, j, -eps)?) / (2.0 * eps);
            let err = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
