use super::Tensor;
use crate::error::Result;

/// Mean squared error and its gradient with respect to `pred`.
///
/// The reduction accumulates in `f64`; the returned gradient is `f32`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    target.expect_shape(pred.shape(), "mse target")?;
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = pred.clone();
    for (g, (&p, &t)) in grad.data_mut().iter_mut().zip(pred.data().iter().zip(target.data())) {
        let diff = p as f64 - t as f64;
        loss += diff * diff;
        *g = (2.0 * diff / n) as f32;
    }
    Ok((loss / n, grad))
}
