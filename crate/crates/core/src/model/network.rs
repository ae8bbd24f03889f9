use super::checkpoint::ModelMeta;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, dropout, dropout_backward, fc_backward, fc_forward, relu,
    relu_backward, Tensor,
};

/// Parameters of a [`NetworkSpec`].
///
/// `params` is ordered conv-layer-major (kernels, then bias, shallow to
/// deep) followed by the dense layers (weights, then bias), the last dense
/// layer being the scalar head. This is also the checkpoint weight order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    params: Vec<Tensor>,
    pub meta: ModelMeta,
}

/// Per-sample intermediate values needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub image: Tensor,
    pub conv_pre: Vec<Tensor>,
    pub conv_post: Vec<Tensor>,
    pub fc_inputs: Vec<Tensor>,
    pub fc_pre: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub output: f32,
}

/// Shapes of every parameter tensor in checkpoint order.
pub fn param_shapes(spec: &NetworkSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let mut shapes = Vec::new();
    for (i, layer) in spec.conv_layers.iter().enumerate() {
        let c_in = spec.conv_in_channels(i);
        shapes.push(vec![layer.out_channels, c_in, layer.kernel_size, layer.kernel_size]);
        shapes.push(vec![layer.out_channels]);
    }
    let mut fan_in = spec.flatten_dim()?;
    for &width in spec.fc_layers.iter().chain(std::iter::once(&spec.output_dim)) {
        shapes.push(vec![width, fan_in]);
        shapes.push(vec![width]);
        fan_in = width;
    }
    Ok(shapes)
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

impl Model {
    /// Weights `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`, biases zero.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let shapes = param_shapes(spec)?;
        let params = shapes
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let bound = (6.0 / fan_in(shape) as f64).sqrt() as f32;
                    Tensor::from_fn(shape, |_| rng.uniform_f32(-bound, bound))
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            params,
            meta: ModelMeta::default(),
        })
    }

    /// All-zero parameters.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let params = param_shapes(spec)?.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self {
            spec: spec.clone(),
            params,
            meta: ModelMeta::default(),
        })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor>, meta: ModelMeta) -> Result<Self> {
        let shapes = param_shapes(&spec)?;
        if shapes.len() != params.len() {
            return Err(Error::Spec(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (shape, p)) in shapes.iter().zip(&params).enumerate() {
            if p.shape() != shape.as_slice() {
                return Err(Error::Spec(format!(
                    "parameter {i}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
            if !p.is_finite() {
                return Err(Error::Spec(format!("parameter {i} has non-finite values")));
            }
        }
        Ok(Self { spec, params, meta })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn conv_depth(&self) -> usize {
        self.spec.conv_layers.len()
    }

    /// Number of parameter tensors belonging to the conv stack.
    pub fn conv_param_count(&self) -> usize {
        2 * self.conv_depth()
    }

    pub fn conv_kernel(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer]
    }

    pub fn conv_bias(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer + 1]
    }

    pub fn fc_weight(&self, layer: usize) -> &Tensor {
        &self.params[self.conv_param_count() + 2 * layer]
    }

    pub fn fc_bias(&self, layer: usize) -> &Tensor {
        &self.params[self.conv_param_count() + 2 * layer + 1]
    }

    /// Mutable bias of the scalar head.
    pub fn output_bias_mut(&mut self) -> &mut Tensor {
        let idx = self.params.len() - 1;
        &mut self.params[idx]
    }

    pub fn output_bias(&self) -> f32 {
        self.params[self.params.len() - 1].data()[0]
    }

    pub fn weight_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let expected = self.spec.input_shape();
        if image.shape() != expected {
            return Err(Error::Dimension(format!(
                "image shape {:?} does not match network input {:?}",
                image.shape(),
                expected
            )));
        }
        Ok(())
    }

    /// Post-ReLU feature maps of every conv layer, shallow to deep.
    pub fn conv_activations(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_image(image)?;
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.conv_depth());
        for (i, layer) in self.spec.conv_layers.iter().enumerate() {
            let input = if i == 0 { image } else { &acts[i - 1] };
            let pre = conv2d_forward(input, self.conv_kernel(i), self.conv_bias(i), layer.stride)?;
            acts.push(relu(&pre));
        }
        Ok(acts)
    }

    /// Full forward pass keeping everything the backward pass needs.
    ///
    /// Dropout draws from `rng` only when `training` is set.
    pub fn forward_trace(&self, image: &Tensor, training: bool, rng: &mut Rng) -> Result<ForwardTrace> {
        self.check_image(image)?;
        let depth = self.conv_depth();
        let mut conv_pre = Vec::with_capacity(depth);
        let mut conv_post: Vec<Tensor> = Vec::with_capacity(depth);
        for (i, layer) in self.spec.conv_layers.iter().enumerate() {
            let input = if i == 0 { image } else { &conv_post[i - 1] };
            let pre = conv2d_forward(input, self.conv_kernel(i), self.conv_bias(i), layer.stride)?;
            conv_post.push(relu(&pre));
            conv_pre.push(pre);
        }

        let flat_len = conv_post[depth - 1].len();
        let mut h = conv_post[depth - 1].clone().reshape(vec![flat_len])?;
        let hidden = self.spec.fc_layers.len();
        let mut fc_inputs = Vec::with_capacity(hidden + 1);
        let mut fc_pre = Vec::with_capacity(hidden);
        let mut masks = Vec::with_capacity(hidden);
        for j in 0..hidden {
            let u = fc_forward(&h, self.fc_weight(j), self.fc_bias(j))?;
            let (d, mask) = dropout(&relu(&u), self.spec.dropout_rate, rng, training)?;
            fc_inputs.push(h);
            fc_pre.push(u);
            masks.push(mask);
            h = d;
        }
        let out = fc_forward(&h, self.fc_weight(hidden), self.fc_bias(hidden))?;
        fc_inputs.push(h);
        Ok(ForwardTrace {
            image: image.clone(),
            conv_pre,
            conv_post,
            fc_inputs,
            fc_pre,
            masks,
            output: out.data()[0],
        })
    }

    /// Predicted SWA (degrees) and the post-ReLU conv feature maps.
    pub fn forward(&self, image: &Tensor, training: bool, rng: &mut Rng) -> Result<(f32, Vec<Tensor>)> {
        let trace = self.forward_trace(image, training, rng)?;
        Ok((trace.output, trace.conv_post))
    }

    /// Inference-mode scalar prediction.
    pub fn predict(&self, image: &Tensor) -> Result<f32> {
        // Inference never draws from the generator.
        let mut unused = Rng::new(0);
        Ok(self.forward_trace(image, false, &mut unused)?.output)
    }

    pub fn predict_batch(&self, images: &[Tensor]) -> Result<Vec<f32>> {
        images.iter().map(|img| self.predict(img)).collect()
    }

    /// Gradients of a loss with `d loss / d output = grad_output`, in
    /// parameter order. With `conv_frozen` the conv entries are left `None`.
    pub fn backward(&self, trace: &ForwardTrace, grad_output: f32, conv_frozen: bool) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let hidden = self.spec.fc_layers.len();
        let base = self.conv_param_count();

        let (mut g, gw, gb) = fc_backward(
            &trace.fc_inputs[hidden],
            self.fc_weight(hidden),
            &Tensor::scalar(grad_output),
        )?;
        grads[base + 2 * hidden] = Some(gw);
        grads[base + 2 * hidden + 1] = Some(gb);
        for j in (0..hidden).rev() {
            let gd = dropout_backward(&trace.masks[j], self.spec.dropout_rate, &g)?;
            let gu = relu_backward(&trace.fc_pre[j], &gd)?;
            let (gi, gw, gb) = fc_backward(&trace.fc_inputs[j], self.fc_weight(j), &gu)?;
            grads[base + 2 * j] = Some(gw);
            grads[base + 2 * j + 1] = Some(gb);
            g = gi;
        }
        if conv_frozen {
            return Ok(grads);
        }

        let depth = self.conv_depth();
        let mut g = g.reshape(trace.conv_post[depth - 1].shape().to_vec())?;
        for l in (0..depth).rev() {
            let gz = relu_backward(&trace.conv_pre[l], &g)?;
            let stride = self.spec.conv_layers[l].stride;
            if l == 0 {
                let (gk, gb) = conv2d_backward_params(&trace.image, self.conv_kernel(0), stride, &gz)?;
                grads[0] = Some(gk);
                grads[1] = Some(gb);
            } else {
                let (gi, gk, gb) = conv2d_backward(&trace.conv_post[l - 1], self.conv_kernel(l), stride, &gz)?;
                grads[2 * l] = Some(gk);
                grads[2 * l + 1] = Some(gb);
                g = gi;
            }
        }
        Ok(grads)
    }
}
