//! Declarative network descriptions: MeshNet, the comparison 3D U-Net, and
//! their introspection (parameter counts, receptive fields, per-layer shapes).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv::{conv_output_dims, ConvConfig};
use crate::ops::dropout::check_probability;
use crate::ops::Activation;
use crate::volume::Dims;

pub const MESHNET_FEATURES: usize = 21;

/// One convolution together with what follows it inside its block:
/// conv -> [batchnorm] -> activation -> [dropout].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub padding: usize,
    pub activation: Activation,
    pub batchnorm: bool,
    pub dropout: f64,
}

impl ConvLayer {
    pub fn config(&self) -> ConvConfig {
        ConvConfig::new(self.dilation, self.padding)
    }

    pub fn extent(&self) -> [usize; 3] {
        [self.kernel; 3]
    }

    pub fn weight_count(&self) -> usize {
        self.kernel.pow(3) * self.in_channels * self.out_channels
    }

    /// Weights, biases, and batchnorm scale and shift.
    pub fn parameter_count(&self) -> usize {
        let bn = if self.batchnorm { 2 * self.out_channels } else { 0 };
        self.weight_count() + self.out_channels + bn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvLayer),
    /// 2x2x2 max pooling, stride 2.
    MaxPool,
    /// 2x nearest-neighbour upsampling.
    Upsample,
    /// Concatenates the output of layer `source` after the current channels.
    ConcatSkip { source: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// The two published MeshNet configurations, named by subvolume side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeshNetVariant {
    Side64,
    Side68,
}

impl MeshNetVariant {
    pub fn from_side(side: usize) -> Result<Self> {
        match side {
            64 => Ok(Self::Side64),
            68 => Ok(Self::Side68),
            other => Err(Error::InvalidVariant(other)),
        }
    }

    pub fn side(self) -> usize {
        match self {
            Self::Side64 => 64,
            Self::Side68 => 68,
        }
    }

    /// Dilations of the seven 3x3x3 layers; padding equals dilation.
    pub fn dilations(self) -> [usize; 7] {
        match self {
            Self::Side64 => [1, 1, 1, 2, 4, 8, 1],
            Self::Side68 => [1, 1, 2, 4, 8, 16, 1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Side64 => "meshnet-64",
            Self::Side68 => "meshnet-68",
        }
    }
}

fn check_io(input_channels: usize, num_classes: usize) -> Result<()> {
    if input_channels == 0 {
        return Err(Error::field("model.input_channels", "must be >= 1"));
    }
    if !(2..=256).contains(&num_classes) {
        return Err(Error::field("model.num_classes", "must be in 2..=256"));
    }
    Ok(())
}

/// Builds MeshNet for subvolume side 64 or 68.
pub fn build_meshnet(side: usize, input_channels: usize, num_classes: usize, dropout: f64) -> Result<ModelSpec> {
    let variant = MeshNetVariant::from_side(side)?;
    ModelSpec::meshnet(
        variant.name(),
        input_channels,
        num_classes,
        MESHNET_FEATURES,
        &variant.dilations(),
        dropout,
    )
}

/// Builds the 10-block 3D U-Net with its published channel schedule.
pub fn build_unet(input_channels: usize, num_classes: usize) -> Result<ModelSpec> {
    ModelSpec::unet(input_channels, num_classes, 32)
}

impl ModelSpec {
    /// A MeshNet-style chain: one 3x3x3 layer per dilation (padding = dilation,
    /// `width` feature maps, batchnorm, ReLU, dropout) and a 1x1x1 classifier.
    pub fn meshnet(
        name: &str,
        input_channels: usize,
        num_classes: usize,
        width: usize,
        dilations: &[usize],
        dropout: f64,
    ) -> Result<Self> {
        check_io(input_channels, num_classes)?;
        check_probability(dropout)?;
        if width == 0 || dilations.is_empty() || dilations.contains(&0) {
            return Err(Error::InvalidConfig(
                "meshnet needs width >= 1 and at least one dilation >= 1".into(),
            ));
        }
        let mut layers = Vec::with_capacity(dilations.len() + 1);
        let mut cin = input_channels;
        for &d in dilations {
            layers.push(LayerSpec::Conv(ConvLayer {
                kernel: 3,
                in_channels: cin,
                out_channels: width,
                dilation: d,
                padding: d,
                activation: Activation::Relu,
                batchnorm: true,
                dropout,
            }));
            cin = width;
        }
        layers.push(LayerSpec::Conv(ConvLayer {
            kernel: 1,
            in_channels: cin,
            out_channels: num_classes,
            dilation: 1,
            padding: 0,
            activation: Activation::None,
            batchnorm: false,
            dropout: 0.0,
        }));
        let spec = Self {
            name: name.to_string(),
            input_channels,
            num_classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 3D U-Net with base width `base` (32 for the published network): blocks
    /// 1-4 downsample, block 5 is the bottleneck, blocks 6-9 upsample and
    /// concatenate the matching down-block output, block 10 classifies.
    pub fn unet(input_channels: usize, num_classes: usize, base: usize) -> Result<Self> {
        check_io(input_channels, num_classes)?;
        if base == 0 {
            return Err(Error::InvalidConfig("unet base width must be >= 1".into()));
        }
        let conv = |cin: usize, cout: usize, activation: Activation| {
            LayerSpec::Conv(ConvLayer {
                kernel: 3,
                in_channels: cin,
                out_channels: cout,
                dilation: 1,
                padding: 1,
                activation,
                batchnorm: false,
                dropout: 0.0,
            })
        };
        let widths = [base, 2 * base, 4 * base, 8 * base, 16 * base];
        let mut layers = Vec::new();
        let mut down_outputs = Vec::new();
        let mut cin = input_channels;
        for &w in &widths[..4] {
            layers.push(conv(cin, w, Activation::Relu));
            down_outputs.push(layers.len() - 1);
            layers.push(LayerSpec::MaxPool);
            cin = w;
        }
        layers.push(conv(cin, widths[4], Activation::Relu));
        cin = widths[4];
        for level in (0..4).rev() {
            layers.push(LayerSpec::Upsample);
            layers.push(LayerSpec::ConcatSkip {
                source: down_outputs[level],
            });
            let activation = if level == 0 {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            layers.push(conv(cin + widths[level], widths[level], activation));
            cin = widths[level];
        }
        layers.push(LayerSpec::Conv(ConvLayer {
            kernel: 1,
            in_channels: cin,
            out_channels: num_classes,
            dilation: 1,
            padding: 0,
            activation: Activation::None,
            batchnorm: false,
            dropout: 0.0,
        }));
        let spec = Self {
            name: if base == 32 {
                "unet".to_string()
            } else {
                format!("unet-w{base}")
            },
            input_channels,
            num_classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks channel chaining and that the head emits `num_classes` maps.
    pub fn validate(&self) -> Result<()> {
        let mut channels = Vec::with_capacity(self.layers.len());
        let mut current = self.input_channels;
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv(c) => {
                    if c.in_channels != current {
                        return Err(Error::InvalidConfig(format!(
                            "layer {idx}: expects {} input channels, receives {current}",
                            c.in_channels
                        )));
                    }
                    if c.kernel % 2 == 0 || c.dilation == 0 || c.out_channels == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {idx}: needs an odd kernel, dilation >= 1 and outputs"
                        )));
                    }
                    check_probability(c.dropout)?;
                    current = c.out_channels;
                }
                LayerSpec::ConcatSkip { source } => {
                    if *source >= idx {
                        return Err(Error::InvalidConfig(format!(
                            "layer {idx}: skip source {source} is not an earlier layer"
                        )));
                    }
                    current += channels[*source];
                }
                LayerSpec::MaxPool | LayerSpec::Upsample => {}
            }
            channels.push(current);
        }
        match self.layers.last() {
            Some(LayerSpec::Conv(c)) if c.out_channels == self.num_classes => Ok(()),
            _ => Err(Error::InvalidConfig(format!(
                "final layer must be a convolution with {} outputs",
                self.num_classes
            ))),
        }
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            LayerSpec::Conv(c) => Some((i, c)),
            _ => None,
        })
    }

    /// Skip connections as `(source layer, concatenating layer)`.
    pub fn skips(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                LayerSpec::ConcatSkip { source } => Some((*source, i)),
                _ => None,
            })
            .collect()
    }

    /// Learnable parameters: conv weights and biases plus batchnorm scale and
    /// shift. Batchnorm running statistics are state, not parameters.
    pub fn parameter_count(&self) -> usize {
        self.conv_layers().map(|(_, c)| c.parameter_count()).sum()
    }

    /// Receptive field per axis along the main (deepest) path.
    ///
    /// Exact for a plain convolution chain; for networks with skips it is a
    /// lower bound, since skip paths are ignored.
    pub fn receptive_field(&self) -> [usize; 3] {
        let mut field = 1usize;
        let mut jump = 1usize;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv(c) => field += c.dilation * (c.kernel - 1) * jump,
                LayerSpec::MaxPool => {
                    field += jump;
                    jump *= 2;
                }
                LayerSpec::Upsample => jump = (jump / 2).max(1),
                LayerSpec::ConcatSkip { .. } => {}
            }
        }
        [field; 3]
    }

    /// Output spatial dims of every layer for a given input, validating
    /// pooling divisibility and skip alignment.
    pub fn layer_dims(&self, input: Dims) -> Result<Vec<Dims>> {
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut current = input;
        for (idx, layer) in self.layers.iter().enumerate() {
            current = match layer {
                LayerSpec::Conv(c) => conv_output_dims(current, c.extent(), &c.config())?,
                LayerSpec::MaxPool => {
                    if current.iter().any(|d| d % 2 != 0) {
                        return Err(Error::NonDivisibleDims {
                            dims: current,
                            factor: 2,
                        });
                    }
                    current.map(|d| d / 2)
                }
                LayerSpec::Upsample => current.map(|d| d * 2),
                LayerSpec::ConcatSkip { source } => {
                    if dims[*source] != current {
                        return Err(Error::shape(format!(
                            "layer {idx}: skip from layer {source} has dims {:?}, current {current:?}",
                            dims[*source]
                        )));
                    }
                    current
                }
            };
            dims.push(current);
        }
        Ok(dims)
    }

    /// One row per layer: index, kind, kernel, input/output maps, pad, dilation.
    pub fn layer_table(&self) -> String {
        let mut out = format!(
            "{:<6} {:<10} {:<7} {:>6} {:>7} {:>4} {:>4}\n",
            "layer", "kind", "kernel", "input", "output", "pad", "dil"
        );
        let mut channels = Vec::new();
        let mut current = self.input_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            let row = match layer {
                LayerSpec::Conv(c) => {
                    current = c.out_channels;
                    format!(
                        "{:<6} {:<10} {:<7} {:>6} {:>7} {:>4} {:>4}",
                        i + 1,
                        "conv",
                        format!("{}^3", c.kernel),
                        c.in_channels,
                        c.out_channels,
                        c.padding,
                        c.dilation
                    )
                }
                LayerSpec::MaxPool => format!(
                    "{:<6} {:<10} {:<7} {:>6} {:>7} {:>4} {:>4}",
                    i + 1, "maxpool", "2^3", current, current, "-", "-"
                ),
                LayerSpec::Upsample => format!(
                    "{:<6} {:<10} {:<7} {:>6} {:>7} {:>4} {:>4}",
                    i + 1, "upsample", "2^3", current, current, "-", "-"
                ),
                LayerSpec::ConcatSkip { source } => {
                    let before = current;
                    current += channels[*source];
                    format!(
                        "{:<6} {:<10} {:<7} {:>6} {:>7} {:>4} {:>4}",
                        i + 1,
                        format!("concat<{}", source + 1),
                        "-",
                        before,
                        current,
                        "-",
                        "-"
                    )
                }
            };
            channels.push(current);
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

pub fn parameter_count(spec: &ModelSpec) -> usize {
    spec.parameter_count()
}

pub fn receptive_field(spec: &ModelSpec) -> [usize; 3] {
    spec.receptive_field()
}
