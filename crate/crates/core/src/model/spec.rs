use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_dim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub const fn new(out_channels: usize, kernel_size: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel_size,
            stride,
        }
    }
}

/// Architecture of a PilotNet-style regressor: a stack of valid-padding
/// convolutions (each followed by ReLU), hidden dense layers (ReLU + dropout),
/// and a linear scalar head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub conv_layers: Vec<ConvLayerSpec>,
    pub fc_layers: Vec<usize>,
    pub dropout_rate: f32,
    pub output_dim: usize,
}

impl NetworkSpec {
    /// 102×364 grayscale input, five conv layers, three hidden dense layers.
    ///
    /// Conv widths and dense widths follow the original PilotNet design.
    pub fn preset_full() -> Self {
        Self {
            input_height: 102,
            input_width: 364,
            conv_layers: vec![
                ConvLayerSpec::new(24, 5, 2),
                ConvLayerSpec::new(36, 5, 2),
                ConvLayerSpec::new(48, 5, 2),
                ConvLayerSpec::new(64, 3, 1),
                ConvLayerSpec::new(64, 3, 1),
            ],
            fc_layers: vec![100, 50, 10],
            dropout_rate: 0.5,
            output_dim: 1,
        }
    }

    /// Desk-scale preset used by tests and the default pipeline config.
    pub fn preset_tiny() -> Self {
        Self {
            input_height: 34,
            input_width: 96,
            conv_layers: vec![
                ConvLayerSpec::new(8, 5, 2),
                ConvLayerSpec::new(12, 5, 2),
                ConvLayerSpec::new(16, 3, 1),
            ],
            fc_layers: vec![32, 16],
            dropout_rate: 0.5,
            output_dim: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::preset_full()),
            "tiny" => Ok(Self::preset_tiny()),
            other => Err(Error::Spec(format!("unknown preset {other:?} (expected full or tiny)"))),
        }
    }

    /// `[C, H, W]` of every conv layer's output, shallow to deep.
    pub fn conv_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Spec("input dimensions must be positive".into()));
        }
        if self.conv_layers.is_empty() {
            return Err(Error::Spec("at least one conv layer is required".into()));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut shapes = Vec::with_capacity(self.conv_layers.len());
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if layer.out_channels == 0 || layer.kernel_size == 0 || layer.stride == 0 {
                return Err(Error::Spec(format!(
                    "conv layer {i}: channels, kernel size and stride must be positive ({layer:?})"
                )));
            }
            let (Some(oh), Some(ow)) = (
                conv_output_dim(h, layer.kernel_size, layer.stride),
                conv_output_dim(w, layer.kernel_size, layer.stride),
            ) else {
                return Err(Error::Spec(format!(
                    "conv layer {i}: kernel {k}x{k} does not fit a {h}x{w} input",
                    k = layer.kernel_size
                )));
            };
            shapes.push([layer.out_channels, oh, ow]);
            h = oh;
            w = ow;
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.conv_shapes()?;
        if self.fc_layers.is_empty() {
            return Err(Error::Spec("at least one dense layer is required".into()));
        }
        if let Some(i) = self.fc_layers.iter().position(|&w| w == 0) {
            return Err(Error::Spec(format!("dense layer {i} has zero width")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Spec(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.output_dim != 1 {
            return Err(Error::Spec(format!("output_dim must be 1, got {}", self.output_dim)));
        }
        Ok(())
    }

    /// Width of the flattened deepest feature map.
    pub fn flatten_dim(&self) -> Result<usize> {
        let shapes = self.conv_shapes()?;
        let [c, h, w] = shapes[shapes.len() - 1];
        Ok(c * h * w)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.input_height, self.input_width]
    }

    /// Input channel count of conv layer `index`.
    pub fn conv_in_channels(&self, index: usize) -> usize {
        if index == 0 {
            1
        } else {
            self.conv_layers[index - 1].out_channels
        }
    }

    /// Fails with a spec error naming the first layer where the two conv
    /// stacks (and input dims) differ.
    pub fn check_same_conv_geometry(&self, other: &NetworkSpec) -> Result<()> {
        if (self.input_height, self.input_width) != (other.input_height, other.input_width) {
            return Err(Error::Spec(format!(
                "input dims differ: {}x{} vs {}x{}",
                self.input_height, self.input_width, other.input_height, other.input_width
            )));
        }
        for (i, (a, b)) in self.conv_layers.iter().zip(&other.conv_layers).enumerate() {
            if a != b {
                return Err(Error::Spec(format!("conv layer {i} differs: {a:?} vs {b:?}")));
            }
        }
        if self.conv_layers.len() != other.conv_layers.len() {
            return Err(Error::Spec(format!(
                "conv layer {} differs: stack depths {} vs {}",
                self.conv_layers.len().min(other.conv_layers.len()),
                self.conv_layers.len(),
                other.conv_layers.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_preset_shape_chain() {
        let spec = NetworkSpec::preset_full();
        spec.validate().unwrap();
        assert_eq!((spec.input_height, spec.input_width), (102, 364));
        assert_eq!(spec.conv_layers.len(), 5);
        assert_eq!(spec.fc_layers.len(), 3);
        assert_eq!(spec.output_dim, 1);
        let hw: Vec<(usize, usize)> = spec.conv_shapes().unwrap().iter().map(|s| (s[1], s[2])).collect();
        assert_eq!(hw, vec![(49, 180), (23, 88), (10, 42), (8, 40), (6, 38)]);
    }

    #[test]
    fn tiny_preset_shape_chain() {
        let spec = NetworkSpec::preset_tiny();
        spec.validate().unwrap();
        let hw: Vec<(usize, usize)> = spec.conv_shapes().unwrap().iter().map(|s| (s[1], s[2])).collect();
        assert_eq!(hw, vec![(15, 46), (6, 21), (4, 19)]);
        assert_eq!(spec.flatten_dim().unwrap(), 16 * 4 * 19);
        assert_eq!(spec.flatten_dim().unwrap(), 1216);
    }

    #[test]
    fn invalid_chain_names_layer() {
        let mut spec = NetworkSpec::preset_tiny();
        spec.conv_layers.push(ConvLayerSpec::new(4, 7, 1));
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("conv layer 3"), "{msg}");
        let mut spec = NetworkSpec::preset_tiny();
        spec.fc_layers.clear();
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
        let mut spec = NetworkSpec::preset_tiny();
        spec.output_dim = 2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn geometry_comparison() {
        let a = NetworkSpec::preset_tiny();
        let mut b = a.clone();
        b.fc_layers = vec![7];
        a.check_same_conv_geometry(&b).unwrap();
        b.conv_layers[1].out_channels = 13;
        let msg = a.check_same_conv_geometry(&b).unwrap_err().to_string();
        assert!(msg.contains("conv layer 1"), "{msg}");
    }

    #[test]
    fn json_round_trip() {
        let spec = NetworkSpec::preset_full();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&text).unwrap(), spec);
    }
}
