//! VisualBackProp saliency maps.
//!
//! Every conv layer's post-ReLU activations are averaged over channels. Starting
//! from the deepest average, the running map is upscaled to the next shallower
//! layer's resolution (transposed convolution with an all-ones kernel of that
//! layer's geometry) and multiplied pointwise with its average. A final upscale
//! through the first layer brings the map to input resolution, where it is
//! divided by its maximum.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{conv_output_dim, Tensor};

/// Input-sized relevance map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("map length matches dims")
    }

    /// Binary 8-bit PGM, pixels quantized as `round(255 * v)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| (255.0 * v).round() as u8));
        out
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Channel mean of a `[C, H, W]` feature stack, as `[1, H, W]`.
pub fn average_feature_maps(activations: &Tensor) -> Result<Tensor> {
    activations.expect_rank(3, "feature maps")?;
    let [c, h, w] = [activations.shape()[0], activations.shape()[1], activations.shape()[2]];
    if c == 0 {
        return Err(Error::Dimension("feature maps have no channels".into()));
    }
    let plane = h * w;
    let data = activations.data();
    let mut out = vec![0.0f32; plane];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&data[ch * plane..(ch + 1) * plane]) {
            *o += v;
        }
    }
    let n = c as f32;
    for o in &mut out {
        *o /= n;
    }
    Tensor::new(vec![1, h, w], out)
}

/// Transposed convolution of a `[1, h, w]` map with an all-ones
/// `kernel_size x kernel_size` kernel, producing `[1, target_h, target_w]`.
///
/// `(h, w)` must be the valid-conv output size of the target under the same
/// kernel and stride.
pub fn upscale_to(map: &Tensor, kernel_size: usize, stride: usize, target_h: usize, target_w: usize) -> Result<Tensor> {
    map.expect_rank(3, "saliency map")?;
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if c != 1 {
        return Err(Error::Dimension(format!("saliency map must have one channel, got {c}")));
    }
    if stride == 0 {
        return Err(Error::Dimension("upscale stride must be positive".into()));
    }
    let expected = (
        conv_output_dim(target_h, kernel_size, stride),
        conv_output_dim(target_w, kernel_size, stride),
    );
    if expected != (Some(h), Some(w)) {
        let show = |d: Option<usize>| d.map_or_else(|| "none".to_string(), |d| d.to_string());
        return Err(Error::Dimension(format!(
            "cannot upscale {h}x{w} to {target_h}x{target_w} with kernel {kernel_size} stride {stride}: expected a {}x{} source",
            show(expected.0),
            show(expected.1)
        )));
    }
    let src = map.data();
    let mut out = vec![0.0f32; target_h * target_w];
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            for ky in 0..kernel_size {
                let row = (y * stride + ky) * target_w + x * stride;
                for o in &mut out[row..row + kernel_size] {
                    *o += v;
                }
            }
        }
    }
    Tensor::new(vec![1, target_h, target_w], out)
}

/// Divides a non-negative `[1, H, W]` map by its maximum; an all-zero map
/// stays all zero.
pub fn normalize_map(map: &Tensor) -> Result<SaliencyMap> {
    map.expect_rank(3, "saliency map")?;
    if map.shape()[0] != 1 {
        return Err(Error::Dimension(format!(
            "saliency map must have one channel, got {}",
            map.shape()[0]
        )));
    }
    if let Some(v) = map.data().iter().find(|&&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Invariant(format!(
            "saliency map holds {v}; expected finite non-negative values"
        )));
    }
    let max = map.max_value();
    let values = if max > 0.0 {
        map.data().iter().map(|&v| v / max).collect()
    } else {
        vec![0.0; map.len()]
    };
    Ok(SaliencyMap {
        height: map.shape()[1],
        width: map.shape()[2],
        values,
    })
}

/// Unnormalized map from the channel averages `A_1..A_L` of a network.
pub fn combine_averages(model: &Model, averages: &[Tensor]) -> Result<Tensor> {
    let spec = model.spec();
    if averages.len() != spec.conv_layers.len() {
        return Err(Error::Dimension(format!(
            "{} averaged maps for {} conv layers",
            averages.len(),
            spec.conv_layers.len()
        )));
    }
    let depth = averages.len();
    let mut m = averages[depth - 1].clone();
    for l in (0..depth - 1).rev() {
        let layer = spec.conv_layers[l + 1];
        let (h, w) = (averages[l].shape()[1], averages[l].shape()[2]);
        m = upscale_to(&m, layer.kernel_size, layer.stride, h, w)?.mul(&averages[l])?;
    }
    let first = spec.conv_layers[0];
    upscale_to(&m, first.kernel_size, first.stride, spec.input_height, spec.input_width)
}

/// Saliency map of `image` under `model` (inference mode).
pub fn visual_backprop(model: &Model, image: &Tensor) -> Result<SaliencyMap> {
    let averages = model
        .conv_activations(image)?
        .iter()
        .map(average_feature_maps)
        .collect::<Result<Vec<_>>>()?;
    normalize_map(&combine_averages(model, &averages)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvLayerSpec, ModelMeta, NetworkSpec};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn average_single_and_pair() {
        let one = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(average_feature_maps(&one).unwrap(), one);
        let two = t(&[2, 1, 3], &[1.0, 1.0, 1.0, 3.0, 3.0, 3.0]);
        assert_eq!(average_feature_maps(&two).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn average_matches_loop() {
        let mut rng = Rng::new(11);
        let x = Tensor::from_fn(&[4, 3, 3], |_| rng.next_f32());
        let avg = average_feature_maps(&x).unwrap();
        for p in 0..9 {
            let mut s = 0.0f32;
            for c in 0..4 {
                s += x.data()[c * 9 + p];
            }
            assert_eq!(avg.data()[p], s / 4.0);
        }
    }

    #[test]
    fn upscale_trivial_cases() {
        let v = upscale_to(&t(&[1, 1, 1], &[0.7]), 2, 1, 2, 2).unwrap();
        assert_eq!(v.data(), &[0.7; 4]);
        let m = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(upscale_to(&m, 1, 1, 2, 3).unwrap(), m);
    }

    #[test]
    fn upscale_matches_scatter_add() {
        let m = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let up = upscale_to(&m, 3, 2, 5, 5).unwrap();
        let mut reference = [[0.0f32; 5]; 5];
        for y in 0..2 {
            for x in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        reference[2 * y + ky][2 * x + kx] += m.data()[y * 2 + x];
                    }
                }
            }
        }
        assert_eq!(up.data(), reference.concat().as_slice());
        assert_eq!(up.data()[2 * 5 + 2], 10.0);
    }

    #[test]
    fn upscale_rejects_bad_geometry() {
        let m = t(&[1, 2, 2], &[1.0; 4]);
        let msg = upscale_to(&m, 3, 2, 8, 5).unwrap_err().to_string();
        assert!(msg.contains("expected a 3x2") && msg.contains("2x2"), "{msg}");
        assert!(matches!(upscale_to(&m, 3, 2, 7, 7), Err(Error::Dimension(_))));
    }

    #[test]
    fn normalize_cases() {
        assert!(normalize_map(&Tensor::zeros(&[1, 2, 2])).unwrap().is_zero());
        assert_eq!(
            normalize_map(&Tensor::filled(&[1, 2, 2], 3.5)).unwrap().values(),
            &[1.0; 4]
        );
        assert_eq!(
            normalize_map(&t(&[1, 1, 3], &[0.0, 2.0, 4.0])).unwrap().values(),
            &[0.0, 0.5, 1.0]
        );
        assert!(matches!(
            normalize_map(&t(&[1, 1, 2], &[1.0, -0.5])),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn pgm_export() {
        let map = normalize_map(&t(&[1, 1, 3], &[0.0, 1.0, 2.0])).unwrap();
        let pgm = map.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 128, 255]);
    }

    fn single_layer_spec() -> NetworkSpec {
        NetworkSpec {
            input_height: 12,
            input_width: 14,
            conv_layers: vec![ConvLayerSpec::new(3, 3, 2)],
            fc_layers: vec![4],
            dropout_rate: 0.0,
            output_dim: 1,
        }
    }

    #[test]
    fn zero_image_gives_zero_map() {
        let spec = NetworkSpec::preset_tiny();
        let mut model = Model::init(&spec, &mut Rng::new(2)).unwrap();
        model.output_bias_mut().data_mut()[0] = 3.0;
        let map = visual_backprop(&model, &Tensor::zeros(&spec.input_shape())).unwrap();
        assert!(map.is_zero());
        assert_eq!((map.height(), map.width()), (34, 96));
    }

    #[test]
    fn single_layer_base_case() {
        let spec = single_layer_spec();
        let model = Model::init(&spec, &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(6);
        let image = Tensor::from_fn(&spec.input_shape(), |_| rng.next_f32());
        let acts = model.conv_activations(&image).unwrap();
        let direct =
            normalize_map(&upscale_to(&average_feature_maps(&acts[0]).unwrap(), 3, 2, 12, 14).unwrap()).unwrap();
        assert_eq!(visual_backprop(&model, &image).unwrap(), direct);
    }

    #[test]
    fn tiny_preset_map_properties() {
        let spec = NetworkSpec::preset_tiny();
        let model = Model::init(&spec, &mut Rng::new(8)).unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..5 {
            let image = Tensor::from_fn(&spec.input_shape(), |_| rng.next_f32());
            let map = visual_backprop(&model, &image).unwrap();
            assert_eq!((map.height(), map.width()), (spec.input_height, spec.input_width));
            assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
            if !map.is_zero() {
                assert_eq!(map.values().iter().cloned().fold(0.0f32, f32::max), 1.0);
            }
        }
    }

    #[test]
    fn positive_rescaling_of_one_layer_is_invisible() {
        let spec = NetworkSpec::preset_tiny();
        let model = Model::init(&spec, &mut Rng::new(8)).unwrap();
        let mut rng = Rng::new(10);
        let image = Tensor::from_fn(&spec.input_shape(), |_| rng.next_f32());
        let averages: Vec<Tensor> = model
            .conv_activations(&image)
            .unwrap()
            .iter()
            .map(|a| average_feature_maps(a).unwrap())
            .collect();
        let base = combine_averages(&model, &averages).unwrap();
        for l in 0..averages.len() {
            let mut scaled = averages.clone();
            scaled[l].scale(4.0);
            let raw = combine_averages(&model, &scaled).unwrap();
            let mut expected = base.clone();
            expected.scale(4.0);
            assert_eq!(raw, expected, "layer {l}");
            assert_eq!(normalize_map(&raw).unwrap(), normalize_map(&base).unwrap());
        }
    }

    /// Single conv layer with non-negative kernels, so clearing pixels can only
    /// lower activations elsewhere.
    fn nonnegative_single_layer(seed: u64) -> Model {
        let spec = single_layer_spec();
        let mut model = Model::init(&spec, &mut Rng::new(seed)).unwrap();
        let mut params = model.params().to_vec();
        for v in params[0].data_mut() {
            *v = v.abs();
        }
        model = Model::from_params(spec, params, ModelMeta::default()).unwrap();
        model
    }

    fn argmax(values: &[f32]) -> usize {
        let mut best = 0;
        for (i, &v) in values.iter().enumerate() {
            if v > values[best] {
                best = i;
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn argmax_ignores_pixels_outside_its_receptive_field(seed in 0u64..1_000, y0 in 0usize..12, x0 in 0usize..14, h in 1usize..12, w in 1usize..14) {
            let model = nonnegative_single_layer(seed);
            let mut rng = Rng::new(seed ^ 0xABCD);
            let image = Tensor::from_fn(&[1, 12, 14], |_| rng.next_f32());
            let map = visual_backprop(&model, &image).unwrap();
            let best = argmax(map.values());
            let (by, bx) = ((best / 14) as isize, (best % 14) as isize);
            let mut cleared = image.clone();
            let mut touched = false;
            for y in y0..(y0 + h).min(12) {
                for x in x0..(x0 + w).min(14) {
                    // Kernel 3: pixels within 2 of the argmax feed the units covering it.
                    if (y as isize - by).abs() > 2 || (x as isize - bx).abs() > 2 {
                        cleared.data_mut()[y * 14 + x] = 0.0;
                        touched = true;
                    }
                }
            }
            prop_assume!(touched);
            let after = visual_backprop(&model, &cleared).unwrap();
            prop_assume!(!after.is_zero());
            prop_assert_eq!(argmax(after.values()), best);
        }
    }
}
