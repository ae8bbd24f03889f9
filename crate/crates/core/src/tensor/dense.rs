use super::Tensor;
use crate::error::{Error, Result};

fn dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    input.expect_rank(1, "fc input")?;
    weights.expect_rank(2, "fc weights")?;
    let (n_out, n_in) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != n_in {
        return Err(Error::Dimension(format!(
            "fc: input shape {:?} does not match weight shape {:?}",
            input.shape(),
            weights.shape()
        )));
    }
    Ok((n_out, n_in))
}

/// `output[j] = bias[j] + Σ_i weights[j, i] · input[i]`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = dims(input, weights)?;
    bias.expect_shape(&[n_out], "fc bias")?;
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(n_in)
        .zip(bias.data())
        .map(|(row, b)| {
            let mut acc = 0.0f32;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            acc + b
        })
        .collect();
    Tensor::new(vec![n_out], out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn fc_backward(input: &Tensor, weights: &Tensor, grad_output: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n_out, n_in) = dims(input, weights)?;
    grad_output.expect_shape(&[n_out], "fc grad_output")?;
    let x = input.data();
    let go = grad_output.data();

    let mut grad_w = vec![0.0f32; n_out * n_in];
    for (row, &g) in grad_w.chunks_exact_mut(n_in).zip(go) {
        for (gw, &v) in row.iter_mut().zip(x) {
            *gw = g * v;
        }
    }
    let mut grad_x = vec![0.0f32; n_in];
    for (row, &g) in weights.data().chunks_exact(n_in).zip(go) {
        for (gx, &w) in grad_x.iter_mut().zip(row) {
            *gx += g * w;
        }
    }
    Ok((
        Tensor::new(vec![n_in], grad_x)?,
        Tensor::new(vec![n_out, n_in], grad_w)?,
        grad_output.clone(),
    ))
}
