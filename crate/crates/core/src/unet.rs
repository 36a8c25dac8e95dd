//! Small encoder-decoder convolutional network.
//!
//! Fixed-depth U-Net: two 3x3 convs per encoder level with 2x average-pool
//! between levels, nearest-neighbor upsampling followed by a conv on the way
//! back up, skip concatenation, leaky-relu activations and a linear 1x1
//! head. Zero padding throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Padding, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel widths per resolution level; length is the depth.
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl UNetConfig {
    pub fn with_default_widths(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, widths: vec![16, 32, 64], leaky_slope: 0.01 }
    }
}

/// One convolution layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// `[out, in, k, k]`
    pub weight: Vec<f64>,
    /// `[out]`
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn he_uniform(in_channels: usize, out_channels: usize, kernel_size: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_channels * kernel_size * kernel_size) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..out_channels * in_channels * kernel_size * kernel_size)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self { in_channels, out_channels, kernel_size, weight, bias: vec![0.0; out_channels] }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// `(in, out, kernel)` of every layer, in forward order.
fn layer_specs(cfg: &UNetConfig) -> Vec<(usize, usize, usize)> {
    let depth = cfg.widths.len();
    let mut specs = Vec::new();
    for level in 0..depth {
        let input = if level == 0 { cfg.in_channels } else { cfg.widths[level - 1] };
        specs.push((input, cfg.widths[level], 3));
        specs.push((cfg.widths[level], cfg.widths[level], 3));
    }
    for level in (0..depth.saturating_sub(1)).rev() {
        specs.push((cfg.widths[level + 1], cfg.widths[level], 3));
        specs.push((2 * cfg.widths[level], cfg.widths[level], 3));
    }
    specs.push((cfg.widths[0], cfg.out_channels, 1));
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub layers: Vec<ConvLayer>,
}

/// Tape handles of one pushed parameter set.
pub struct TapeUNet {
    pub layers: Vec<(TensorId, TensorId)>,
}

impl UNet {
    /// He-uniform weights, zero biases, drawn from a named stream of `seed`.
    pub fn init(cfg: UNetConfig, seed: u64) -> Result<Self> {
        if cfg.widths.is_empty() {
            return Err(Error::InvalidConfig("unet needs at least one level".into()));
        }
        if cfg.in_channels == 0 || cfg.out_channels == 0 {
            return Err(Error::InvalidConfig("unet channel counts must be positive".into()));
        }
        let mut rng = crate::rng::stream(seed, "unet-init");
        let layers = layer_specs(&cfg)
            .into_iter()
            .map(|(i, o, k)| ConvLayer::he_uniform(i, o, k, &mut rng))
            .collect();
        Ok(Self { cfg, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Parameters flattened in fixed layer order: weights then bias per layer.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "unet",
                axis: "flattened parameters",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut pos = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }

    /// Push all layer parameters onto the tape.
    pub fn push_params(&self, tape: &mut Tape, trainable: bool) -> TapeUNet {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = Tensor::new(
                    vec![l.out_channels, l.in_channels, l.kernel_size, l.kernel_size],
                    l.weight.clone(),
                );
                let b = Tensor::new(vec![l.out_channels], l.bias.clone());
                if trainable {
                    (tape.param(w), tape.param(b))
                } else {
                    (tape.constant(w), tape.constant(b))
                }
            })
            .collect();
        TapeUNet { layers }
    }

    fn conv_block(
        &self,
        tape: &mut Tape,
        p: &TapeUNet,
        layer: usize,
        input: TensorId,
    ) -> Result<TensorId> {
        let (w, b) = p.layers[layer];
        let x = tape.conv2d(input, w, Padding::Zero)?;
        let x = tape.add_channel_bias(x, b);
        Ok(tape.leaky_relu(x, self.cfg.leaky_slope))
    }

    /// Forward pass over a `[in_channels, H, W]` tensor. H and W must be
    /// divisible by `2^(depth-1)` and stay at least 3 at the bottleneck.
    pub fn forward(&self, tape: &mut Tape, p: &TapeUNet, input: TensorId) -> Result<TensorId> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "unet forward",
                axis: "in_channels",
                expected: self.cfg.in_channels,
                actual: if shape.len() == 3 { shape[0] } else { 0 },
            });
        }
        let depth = self.cfg.widths.len();
        let down_factor = 1usize << (depth - 1);
        if shape[1] % down_factor != 0 || shape[2] % down_factor != 0 || shape[1] / down_factor < 3 || shape[2] / down_factor < 3 {
            return Err(Error::ShapeMismatch {
                context: "unet forward",
                axis: "spatial (must pool cleanly and keep >= 3 px)",
                expected: down_factor * 3,
                actual: shape[1].min(shape[2]),
            });
        }

        let mut li = 0;
        let mut skips = Vec::new();
        let mut x = input;
        for level in 0..depth {
            x = self.conv_block(tape, p, li, x)?;
            li += 1;
            x = self.conv_block(tape, p, li, x)?;
            li += 1;
            if level < depth - 1 {
                skips.push(x);
                x = tape.avg_pool2(x);
            }
        }
        for level in (0..depth - 1).rev() {
            x = tape.upsample_nearest2(x);
            x = self.conv_block(tape, p, li, x)?;
            li += 1;
            x = tape.concat_channels(&[skips[level], x]);
            x = self.conv_block(tape, p, li, x)?;
            li += 1;
        }
        // linear 1x1 head
        let (w, b) = p.layers[li];
        let x = tape.conv2d(x, w, Padding::Zero)?;
        Ok(tape.add_channel_bias(x, b))
    }
}
