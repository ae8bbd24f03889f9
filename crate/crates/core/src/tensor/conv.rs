use super::Tensor;
use crate::error::{Error, Result};

/// Output length of a valid (unpadded) convolution along one axis.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input < kernel {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

fn geometry(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Geometry> {
    input.expect_rank(3, "conv2d input")?;
    kernels.expect_rank(4, "conv2d kernels")?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ks = kernels.shape();
    let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c_in {
        return Err(Error::Dimension(format!(
            "conv2d: input shape {:?} has {c_in} channels but kernel shape {ks:?} expects {kc}",
            input.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Parameter("conv2d: stride must be positive".into()));
    }
    let (Some(oh), Some(ow)) = (conv_output_dim(h, kh, stride), conv_output_dim(w, kw, stride)) else {
        return Err(Error::Dimension(format!(
            "conv2d: input shape {:?} smaller than kernel shape {ks:?}",
            input.shape()
        )));
    };
    Ok(Geometry {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
        stride,
    })
}

/// Valid-padding strided 2-D cross-correlation.
///
/// Each output element accumulates `kernel * input` over `(c_in, ky, kx)` in
/// row-major order starting from zero, then adds the bias.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = geometry(input, kernels, stride)?;
    bias.expect_shape(&[g.c_out], "conv2d bias")?;
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0f32; g.c_out * g.oh * g.ow];
    let plane = g.oh * g.ow;

    for co in 0..g.c_out {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..g.oh {
                        let row = &x_c[(oy * g.stride + ky) * g.w + kx..];
                        let dst = &mut out_c[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            for (d, s) in dst.iter_mut().zip(row) {
                                *d += wv * *s;
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d += wv * row[ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
        let b = bias.data()[co];
        out_c.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Gradients of a scalar loss with respect to the input, kernels and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (gi, gk, gb) = backward_impl(input, kernels, stride, grad_output, true)?;
    Ok((gi.expect("input gradient requested"), gk, gb))
}

/// Like [`conv2d_backward`] but skips the input gradient (first layer).
pub fn conv2d_backward_params(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (_, gk, gb) = backward_impl(input, kernels, stride, grad_output, false)?;
    Ok((gk, gb))
}

fn backward_impl(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    grad_output: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = geometry(input, kernels, stride)?;
    grad_output.expect_shape(&[g.c_out, g.oh, g.ow], "conv2d grad_output")?;
    let x = input.data();
    let k = kernels.data();
    let go = grad_output.data();
    let plane = g.oh * g.ow;

    let mut grad_bias = vec![0.0f32; g.c_out];
    for co in 0..g.c_out {
        grad_bias[co] = go[co * plane..(co + 1) * plane].iter().sum();
    }

    let mut grad_k = vec![0.0f32; k.len()];
    let mut grad_x = if want_input { vec![0.0f32; x.len()] } else { Vec::new() };
    for co in 0..g.c_out {
        let go_c = &go[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = k[widx];
                    let mut acc = 0.0f32;
                    for oy in 0..g.oh {
                        let off = base + (oy * g.stride + ky) * g.w + kx;
                        let go_row = &go_c[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, &gv) in go_row.iter().enumerate() {
                            acc += gv * x[off + ox * g.stride];
                        }
                        if want_input {
                            for (ox, &gv) in go_row.iter().enumerate() {
                                grad_x[off + ox * g.stride] += gv * wv;
                            }
                        }
                    }
                    grad_k[widx] = acc;
                }
            }
        }
    }

    let grad_input = if want_input {
        Some(Tensor::new(input.shape().to_vec(), grad_x)?)
    } else {
        None
    };
    Ok((
        grad_input,
        Tensor::new(kernels.shape().to_vec(), grad_k)?,
        Tensor::new(vec![g.c_out], grad_bias)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_f32(-1.0, 1.0))
    }

    /// Quadruple loop straight from the definition; same summation order.
    fn naive_conv(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let xv = input.data()[(ci * h + oy * stride + ky) * w + ox * stride + kx];
                                let wv = kernels.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                                acc += wv * xv;
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = acc + bias.data()[co];
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_on_ones() {
        let input = Tensor::filled(&[1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let out = conv2d_forward(&input, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn diagonal_kernel_dot_product() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = conv2d_forward(&input, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn strided_matches_naive_bit_exactly() {
        let mut rng = Rng::new(11);
        let input = random(&[1, 7, 9], &mut rng);
        let k = random(&[2, 1, 5, 5], &mut rng);
        let b = random(&[2], &mut rng);
        let out = conv2d_forward(&input, &k, &b, 2).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        assert_eq!(out, naive_conv(&input, &k, &b, 2));
    }

    #[test]
    fn multichannel_matches_naive_bit_exactly() {
        let mut rng = Rng::new(12);
        for stride in 1..=3 {
            let input = random(&[3, 11, 13], &mut rng);
            let k = random(&[4, 3, 3, 3], &mut rng);
            let b = random(&[4], &mut rng);
            assert_eq!(
                conv2d_forward(&input, &k, &b, stride).unwrap(),
                naive_conv(&input, &k, &b, stride)
            );
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let input = Tensor::zeros(&[2, 5, 5]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&input, &k, &Tensor::zeros(&[1]), 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 5, 5]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn too_small_input_rejected() {
        let err = conv2d_forward(
            &Tensor::zeros(&[1, 2, 8]),
            &Tensor::zeros(&[1, 1, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = Rng::new(1);
        let input = random(&[2, 6, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let go = Tensor::zeros(&[3, 2, 2]);
        let (gi, gk, gb) = conv2d_backward(&input, &k, 2, &go).unwrap();
        assert!(gi.data().iter().chain(gk.data()).chain(gb.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_backward_passes_gradient() {
        let mut rng = Rng::new(2);
        let input = random(&[1, 4, 5], &mut rng);
        let k = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let go = random(&[1, 4, 5], &mut rng);
        let (gi, _, gb) = conv2d_backward(&input, &k, 1, &go).unwrap();
        assert_eq!(gi.data(), go.data());
        assert!((gb.data()[0] - go.data().iter().sum::<f32>()).abs() < 1e-6);
    }

    #[test]
    fn grad_output_shape_checked() {
        let err = conv2d_backward(
            &Tensor::zeros(&[1, 5, 5]),
            &Tensor::zeros(&[1, 1, 3, 3]),
            1,
            &Tensor::zeros(&[1, 2, 2]),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn params_only_backward_agrees() {
        let mut rng = Rng::new(3);
        let input = random(&[2, 9, 9], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let go = random(&[3, 4, 4], &mut rng);
        let (_, gk, gb) = conv2d_backward(&input, &k, 2, &go).unwrap();
        let (gk2, gb2) = conv2d_backward_params(&input, &k, 2, &go).unwrap();
        assert_eq!(gk, gk2);
        assert_eq!(gb, gb2);
    }

    #[test]
    fn output_dim_recurrence() {
        assert_eq!(conv_output_dim(102, 5, 2), Some(49));
        assert_eq!(conv_output_dim(4, 5, 1), None);
        assert_eq!(conv_output_dim(5, 5, 3), Some(1));
    }
}
