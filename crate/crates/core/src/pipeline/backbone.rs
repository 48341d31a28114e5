//! Small trainable convolutional stack standing in for a full feature
//! extractor: `conv_blocks` blocks of 3x3 stride-2 convolution + ReLU, so an
//! input of side `s` becomes a feature map of side `s / 2^conv_blocks`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::aggregate::FeatureMap;
use crate::datasets::RgbImage;
use crate::error::{Error, Result};

/// One 3x3 stride-2 pad-1 convolution with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out * in * 3 * 3` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvBlock {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvBlock {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    fn w(&self, o: usize, i: usize, dr: usize, dc: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * 3 + dr) * 3 + dc]
    }

    /// Forward pass; returns pre-activation and post-ReLU maps.
    fn forward(&self, input: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        if input.channels() != self.in_channels {
            return Err(Error::invalid(format!(
                "conv block expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        let (w_in, h_in) = (input.width(), input.height());
        if w_in % 2 != 0 || h_in % 2 != 0 {
            return Err(Error::config(format!(
                "stride-2 convolution needs even input sides, got {w_in}x{h_in}"
            )));
        }
        let (w_out, h_out) = (w_in / 2, h_in / 2);
        let mut pre = FeatureMap::zeros(self.out_channels, w_out, h_out);
        let mut post = FeatureMap::zeros(self.out_channels, w_out, h_out);
        for o in 0..self.out_channels {
            for r in 0..h_out {
                for c in 0..w_out {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_channels {
                        let plane = input.channel(i);
                        for dr in 0..3 {
                            let ir = (2 * r + dr) as isize - 1;
                            if ir < 0 || ir >= h_in as isize {
                                continue;
                            }
                            for dc in 0..3 {
                                let ic = (2 * c + dc) as isize - 1;
                                if ic < 0 || ic >= w_in as isize {
                                    continue;
                                }
                                acc += self.w(o, i, dr, dc)
                                    * plane[ir as usize * w_in + ic as usize];
                            }
                        }
                    }
                    pre.set(o, r * w_out + c, acc);
                    post.set(o, r * w_out + c, acc.max(0.0));
                }
            }
        }
        Ok((pre, post))
    }

    /// Backward pass; returns `(grad_input, grad_weight, grad_bias)`.
    fn backward(
        &self,
        input: &FeatureMap,
        pre: &FeatureMap,
        grad_out: &FeatureMap,
    ) -> (FeatureMap, Vec<f64>, Vec<f64>) {
        let (w_in, h_in) = (input.width(), input.height());
        let (w_out, h_out) = (pre.width(), pre.height());
        let mut grad_in = FeatureMap::zeros(self.in_channels, w_in, h_in);
        let mut grad_w = vec![0.0; self.weight.len()];
        let mut grad_b = vec![0.0; self.bias.len()];
        for o in 0..self.out_channels {
            for r in 0..h_out {
                for c in 0..w_out {
                    let node = r * w_out + c;
                    if pre.value(o, node) <= 0.0 {
                        continue;
                    }
                    let g = grad_out.value(o, node);
                    grad_b[o] += g;
                    for i in 0..self.in_channels {
                        for dr in 0..3 {
                            let ir = (2 * r + dr) as isize - 1;
                            if ir < 0 || ir >= h_in as isize {
                                continue;
                            }
                            for dc in 0..3 {
                                let ic = (2 * c + dc) as isize - 1;
                                if ic < 0 || ic >= w_in as isize {
                                    continue;
                                }
                                let in_node = ir as usize * w_in + ic as usize;
                                let widx = ((o * self.in_channels + i) * 3 + dr) * 3 + dc;
                                grad_w[widx] += g * input.value(i, in_node);
                                let cur = grad_in.value(i, in_node);
                                grad_in.set(i, in_node, cur + g * self.weight[widx]);
                            }
                        }
                    }
                }
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

/// The full stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub blocks: Vec<ConvBlock>,
}

/// Per-block intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    inputs: Vec<FeatureMap>,
    preacts: Vec<FeatureMap>,
}

/// Parameter gradients, index-aligned with the blocks.
#[derive(Debug, Clone)]
pub struct BackboneGradients {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl ToyBackbone {
    /// He-style deterministic init: every block maps to `channels` outputs,
    /// the first from the 3 image planes.
    pub fn new(channels: usize, conv_blocks: usize, seed: u64) -> Result<Self> {
        if conv_blocks == 0 {
            return Err(Error::config("backbone needs at least one block"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xbac0);
        let mut blocks = Vec::with_capacity(conv_blocks);
        for b in 0..conv_blocks {
            let in_ch = if b == 0 { 3 } else { channels };
            let mut block = ConvBlock::zeros(in_ch, channels);
            let std = (2.0 / (in_ch as f64 * 9.0)).sqrt();
            let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
            for w in &mut block.weight {
                *w = normal.sample(&mut rng);
            }
            blocks.push(block);
        }
        Ok(ToyBackbone { blocks })
    }

    /// Total spatial downscale factor `2^blocks`.
    pub fn stride(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn zero_gradients(&self) -> BackboneGradients {
        BackboneGradients {
            weight: self.blocks.iter().map(|b| vec![0.0; b.weight.len()]).collect(),
            bias: self.blocks.iter().map(|b| vec![0.0; b.bias.len()]).collect(),
        }
    }

    /// Runs the stack on one image.
    pub fn forward(&self, image: &RgbImage) -> Result<(FeatureMap, BackboneCache)> {
        let stride = self.stride();
        if !image.width.is_multiple_of(stride) || !image.height.is_multiple_of(stride) {
            return Err(Error::config(format!(
                "input {}x{} is not divisible by the backbone stride {stride}",
                image.width, image.height
            )));
        }
        let mut cur = FeatureMap::from_values(3, image.width, image.height, image.data.clone())?;
        let mut cache = BackboneCache {
            inputs: Vec::with_capacity(self.blocks.len()),
            preacts: Vec::with_capacity(self.blocks.len()),
        };
        for block in &self.blocks {
            let (pre, post) = block.forward(&cur)?;
            cache.inputs.push(cur);
            cache.preacts.push(pre);
            cur = post;
        }
        Ok((cur, cache))
    }

    /// Accumulates parameter gradients for one sample into `grads`.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        grad_output: &FeatureMap,
        grads: &mut BackboneGradients,
    ) {
        let mut grad = grad_output.clone();
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let (grad_in, gw, gb) = block.backward(&cache.inputs[b], &cache.preacts[b], &grad);
            for (slot, g) in grads.weight[b].iter_mut().zip(&gw) {
                *slot += g;
            }
            for (slot, g) in grads.bias[b].iter_mut().zip(&gb) {
                *slot += g;
            }
            grad = grad_in;
        }
    }
}
