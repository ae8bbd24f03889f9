use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes `grad_output` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    grad_output.expect_shape(input.shape(), "relu grad_output")?;
    let mut grad = grad_output.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(grad)
}

fn check_rate(rate: f32) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout. Returns `(output, mask)` where `mask` holds 1 for kept
/// elements and 0 for dropped ones. In inference mode the input passes
/// through, the mask is all ones, and `rng` is not touched.
pub fn dropout(input: &Tensor, rate: f32, rng: &mut Rng, training: bool) -> Result<(Tensor, Tensor)> {
    check_rate(rate)?;
    if !training {
        return Ok((input.clone(), Tensor::filled(input.shape(), 1.0)));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut out = input.clone();
    let mut mask = Tensor::zeros(input.shape());
    for (o, m) in out.data_mut().iter_mut().zip(mask.data_mut()) {
        if rng.next_f64() >= rate as f64 {
            *m = 1.0;
            *o *= scale;
        } else {
            *o = 0.0;
        }
    }
    Ok((out, mask))
}

pub fn dropout_backward(mask: &Tensor, rate: f32, grad_output: &Tensor) -> Result<Tensor> {
    check_rate(rate)?;
    grad_output.expect_shape(mask.shape(), "dropout grad_output")?;
    let scale = 1.0 / (1.0 - rate);
    let mut grad = grad_output.clone();
    for (g, &m) in grad.data_mut().iter_mut().zip(mask.data()) {
        *g = if m != 0.0 { *g * scale } else { 0.0 };
    }
    Ok(grad)
}
