//! Segmentation backbone `f[.; theta]` and saliency transformation `g(.; eta)`.

pub mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensorcore::{Graph, Tensor, Var};
use crate::volume::Axis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    /// `2 * sigmoid(x)`: weights in (0, 2), exactly 1 at zero.
    ScaledSigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
    },
    /// Keep every second row and column.
    Downsample,
    /// Nearest-neighbour 2x, restoring the extent seen before the matching downsample.
    Upsample,
}

/// Layer sequence of a fully convolutional network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<Layer>,
    /// Smallest accepted spatial extent.
    pub min_extent: usize,
}

impl Architecture {
    /// 3 -> 8 -> 8 -> down -> 16 -> 16 -> up -> 8 -> 8 -> 1, 3x3 kernels.
    pub fn standard() -> Self {
        let conv = |i, o, a| Layer::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            activation: a,
        };
        use Activation::*;
        Self {
            layers: vec![
                conv(3, 8, Relu),
                conv(8, 8, Relu),
                Layer::Downsample,
                conv(8, 16, Relu),
                conv(16, 16, Relu),
                Layer::Upsample,
                conv(16, 8, Relu),
                conv(8, 8, Relu),
                conv(8, 1, Sigmoid),
            ],
            min_extent: 4,
        }
    }

    /// Three-conv network used for gradient checks on tiny fixtures.
    pub fn tiny() -> Self {
        let conv = |i, o, a| Layer::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            activation: a,
        };
        use Activation::*;
        Self {
            layers: vec![
                conv(3, 4, Relu),
                Layer::Downsample,
                conv(4, 4, Relu),
                Layer::Upsample,
                conv(4, 1, Sigmoid),
            ],
            min_extent: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut channels = 3;
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        let mut last_act = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    activation,
                } => {
                    if in_channels != channels {
                        return Err(invalid!(
                            "layer {i}: expects {in_channels} channels, receives {channels}"
                        ));
                    }
                    if kernel % 2 == 0 || out_channels == 0 {
                        return Err(invalid!(
                            "layer {i}: bad conv {kernel}x{kernel} -> {out_channels}"
                        ));
                    }
                    channels = out_channels;
                    last_act = Some(activation);
                }
                Layer::Downsample => {
                    depth += 1;
                    max_depth = max_depth.max(depth);
                }
                Layer::Upsample => {
                    depth = depth
                        .checked_sub(1)
                        .ok_or_else(|| invalid!("layer {i}: upsample without downsample"))?;
                }
            }
        }
        if depth != 0 {
            return Err(invalid!("unbalanced down/upsampling"));
        }
        if channels != 1 || last_act != Some(Activation::Sigmoid) {
            return Err(invalid!("final layer must be a 1-channel sigmoid conv"));
        }
        if self.min_extent < (1 << max_depth) {
            return Err(invalid!(
                "min_extent {} below 2^{max_depth}",
                self.min_extent
            ));
        }
        Ok(())
    }

    fn conv_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => Some((in_channels, out_channels, kernel)),
                _ => None,
            })
            .collect()
    }
}

/// Kernel and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    /// He-style init: kernel ~ N(0, 2 / fan_in), zero bias.
    fn he(cin: usize, cout: usize, k: usize, rng: &mut SplitMix64) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self {
            kernel: Tensor::from_fn(&[cout, cin, k, k], |_| std * rng.normal()),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

/// Graph handles of a registered parameter set, one `(kernel, bias)` pair per conv.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<(Var, Var)>);

fn register(layers: &[ConvParams], g: &mut Graph, trainable: bool) -> ParamVars {
    ParamVars(
        layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.param(l.kernel.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.kernel.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect(),
    )
}

fn activate(g: &mut Graph, x: Var, a: Activation) -> Var {
    match a {
        Activation::Identity => x,
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::ScaledSigmoid => {
            let s = g.sigmoid(x);
            g.affine(s, 2.0, 0.0)
        }
    }
}

/// Network parameters `theta` together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    arch: Architecture,
    convs: Vec<ConvParams>,
}

impl BackboneParams {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SplitMix64::new(seed);
        let convs = arch
            .conv_shapes()
            .into_iter()
            .map(|(i, o, k)| ConvParams::he(i, o, k, &mut rng))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            convs,
        })
    }

    pub(crate) fn from_parts(arch: Architecture, convs: Vec<ConvParams>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.conv_shapes();
        if shapes.len() != convs.len() {
            return Err(shape_err!(
                "architecture has {} convs, got {}",
                shapes.len(),
                convs.len()
            ));
        }
        for (i, ((cin, cout, k), c)) in shapes.iter().zip(&convs).enumerate() {
            if c.kernel.shape() != [*cout, *cin, *k, *k] || c.bias.shape() != [*cout] {
                return Err(shape_err!(
                    "conv {i}: kernel {:?} / bias {:?} do not match architecture",
                    c.kernel.shape(),
                    c.bias.shape()
                ));
            }
        }
        Ok(Self { arch, convs })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn convs(&self) -> &[ConvParams] {
        &self.convs
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.convs
            .iter()
            .flat_map(|c| [&c.kernel, &c.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.kernel, &mut c.bias])
            .collect()
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        register(&self.convs, g, trainable)
    }

    /// Records the network on `g` for a `[3,H,W]` input, producing `[1,H,W]`.
    pub fn apply(&self, g: &mut Graph, vars: &ParamVars, input: Var) -> Result<Var> {
        let (_, h, w) = g.value(input).chw()?;
        if h < self.arch.min_extent || w < self.arch.min_extent {
            return Err(invalid!(
                "input {h}x{w} smaller than the architecture minimum {}",
                self.arch.min_extent
            ));
        }
        let mut x = input;
        let mut sizes = Vec::new();
        let mut conv_idx = 0;
        for layer in &self.arch.layers {
            x = match *layer {
                Layer::Conv { activation, .. } => {
                    let (k, b) = vars.0[conv_idx];
                    conv_idx += 1;
                    let y = g.conv2d_same(x, k, b)?;
                    activate(g, y, activation)
                }
                Layer::Downsample => {
                    let (_, h, w) = g.value(x).chw()?;
                    sizes.push((h, w));
                    g.downsample2(x)?
                }
                Layer::Upsample => {
                    let (h, w) = sizes.pop().expect("validated architecture");
                    g.upsample2(x, h, w)?
                }
            };
        }
        Ok(x)
    }

    /// Probability map `[1,H,W]` for a `[3,H,W]` image.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let x = g.constant(image.clone());
        let y = self.apply(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

/// Shape of the saliency transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    /// Odd kernel size: 1, 3 or 5.
    pub kernel: usize,
    /// One or two convolutions.
    pub layers: usize,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            kernel: 3,
            layers: 2,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 5].contains(&self.kernel) {
            return Err(invalid!(
                "saliency kernel must be 1, 3 or 5, got {}",
                self.kernel
            ));
        }
        if ![1, 2].contains(&self.layers) {
            return Err(invalid!(
                "saliency layers must be 1 or 2, got {}",
                self.layers
            ));
        }
        Ok(())
    }
}

/// Number of weight maps produced by the saliency transformation; matches
/// the three channels of a slice stack.
pub const SALIENCY_CHANNELS: usize = 3;

/// Transformation parameters `eta`: probability map `[1,H,W]` to weights `[3,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyParams {
    config: SaliencyConfig,
    convs: Vec<ConvParams>,
}

impl SaliencyParams {
    /// The last layer starts at zero, so the initial weighting is exactly 1.
    /// A hidden layer (two-layer variant) is He-initialized; zero there would
    /// leave both layers without gradient.
    pub fn init(config: SaliencyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let c = SALIENCY_CHANNELS;
        let convs = if config.layers == 1 {
            vec![ConvParams::zeros(1, c, k)]
        } else {
            let mut rng = SplitMix64::new(seed);
            vec![
                ConvParams::he(1, c, k, &mut rng),
                ConvParams::zeros(c, c, k),
            ]
        };
        Ok(Self { config, convs })
    }

    pub(crate) fn from_parts(config: SaliencyConfig, convs: Vec<ConvParams>) -> Result<Self> {
        let want = Self::init(config, 0)?;
        if convs.len() != want.convs.len()
            || convs.iter().zip(&want.convs).any(|(a, b)| {
                a.kernel.shape() != b.kernel.shape() || a.bias.shape() != b.bias.shape()
            })
        {
            return Err(shape_err!("saliency tensors do not match {config:?}"));
        }
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> SaliencyConfig {
        self.config
    }

    pub fn convs(&self) -> &[ConvParams] {
        &self.convs
    }

    /// Zero the final layer, making the weighting identically 1.
    pub fn set_identity(&mut self) {
        let last = self.convs.last_mut().expect("at least one layer");
        last.kernel.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.convs
            .iter()
            .flat_map(|c| [&c.kernel, &c.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.kernel, &mut c.bias])
            .collect()
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        register(&self.convs, g, trainable)
    }

    pub fn apply(&self, g: &mut Graph, vars: &ParamVars, prob: Var) -> Result<Var> {
        let c = g.value(prob).shape().first().copied();
        if c != Some(1) || g.value(prob).shape().len() != 3 {
            return Err(shape_err!(
                "saliency input must be [1,H,W], got {:?}",
                g.value(prob).shape()
            ));
        }
        let n = self.convs.len();
        let mut x = prob;
        for (i, &(k, b)) in vars.0.iter().enumerate() {
            let y = g.conv2d_same(x, k, b)?;
            let act = if i + 1 == n {
                Activation::ScaledSigmoid
            } else {
                Activation::Relu
            };
            x = activate(g, y, act);
        }
        Ok(x)
    }

    /// Weight map `[3,H,W]` in (0, 2) for a `[1,H,W]` probability map.
    pub fn forward(&self, prob: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let p = g.constant(prob.clone());
        let y = self.apply(&mut g, &vars, p)?;
        Ok(g.value(y).clone())
    }
}

/// Model configuration shared by the coarse and fine networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub saliency: SaliencyConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::standard(),
            saliency: SaliencyConfig::default(),
        }
    }
}

/// Everything one viewpoint needs: `theta^C`, `theta^F` and `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub viewpoint: Axis,
    pub coarse: BackboneParams,
    pub fine: BackboneParams,
    pub saliency: SaliencyParams,
}

impl ModelBundle {
    pub fn init(viewpoint: Axis, config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            viewpoint,
            coarse: BackboneParams::init(&config.architecture, derive_seed(seed, 1))?,
            fine: BackboneParams::init(&config.architecture, derive_seed(seed, 2))?,
            saliency: SaliencyParams::init(config.saliency, derive_seed(seed, 3))?,
        })
    }

    /// Coarse, then fine, then saliency tensors; the order used by optimizers and gradients.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.coarse.tensors();
        v.extend(self.fine.tensors());
        v.extend(self.saliency.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.coarse.tensors_mut();
        v.extend(self.fine.tensors_mut());
        v.extend(self.saliency.tensors_mut());
        v
    }
}
