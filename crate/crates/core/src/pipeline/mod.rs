//! End-to-end model: backbone (trainable conv stack or precomputed feature
//! maps) → aggregation (graph cascade, local averaging, or none) → global
//! average pooling → optional BN neck → linear classifier.
//!
//! The pooled pre-BN embedding feeds the triplet loss; the post-BN embedding
//! is the retrieval feature at inference; the classifier scores feed the
//! class-balanced loss. The classifier carries no bias while the BN neck is
//! active, since the neck's shift absorbs it.

pub mod augment;
pub mod backbone;
pub mod bn;
pub mod checkpoint;
pub mod train;

pub use augment::{augment, horizontal_flip};
pub use backbone::{BackboneGradients, ToyBackbone};
pub use bn::{BnCache, BnNeck};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, EpochLog, Phase, TrainOptions, TrainResult, TrainSchedule};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::aggregate::{
    global_average_pool, lap_backward, lap_forward, lga_cascade_backward, lga_cascade_states,
    FeatureMap,
};
use crate::datasets::RgbImage;
use crate::error::{Error, Result};
use crate::gridgraph::{build_grid_graph, GridGraph};

/// Spatial aggregation applied to the backbone feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Cascaded normalized graph aggregation with ReLU.
    Lga,
    /// Uniform local average pooling, no nonlinearity.
    Lap,
    /// Feed the backbone output straight to pooling.
    None,
}

/// Source of feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    /// Small trainable convolutional stack over images.
    ToyConv,
    /// Feature maps are supplied directly.
    Precomputed,
}

/// Full model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Feature channels `c`.
    pub channels: usize,
    /// Feature grid `(w, h)`.
    pub grid: (usize, usize),
    pub lga_depth: usize,
    pub aggregation: Aggregation,
    pub bn_neck: bool,
    pub num_classes: usize,
    /// Image input size `(w, h)` for the conv backbone.
    pub input_size: (usize, usize),
    /// Stride-2 blocks in the conv backbone (stride = 2^blocks).
    pub conv_blocks: usize,
    pub flip_probability: f64,
    pub erase_probability: f64,
    /// Neighborhood radius of the aggregation graph.
    pub radius: f64,
    /// Apply ReLU after local average pooling. Off by default: pooling is
    /// plain averaging.
    pub lap_relu: bool,
    /// Retrieval uses the post-BN embedding (the default) or the pre-BN one.
    pub retrieval_post_bn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::ToyConv,
            channels: 64,
            grid: (20, 20),
            lga_depth: 2,
            aggregation: Aggregation::Lga,
            bn_neck: true,
            num_classes: 2,
            input_size: (320, 320),
            conv_blocks: 4,
            flip_probability: 0.5,
            erase_probability: 0.5,
            radius: 1.5,
            lap_relu: false,
            retrieval_post_bn: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::config("channels and grid sides must be positive"));
        }
        if self.lga_depth == 0 {
            return Err(Error::config(
                "cascade depth must be at least 1; use aggregation=none to disable",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("classifier needs at least 2 classes"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("graph radius must be positive"));
        }
        for p in [self.flip_probability, self.erase_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("augmentation probabilities must lie in [0, 1]"));
            }
        }
        if self.backbone == BackboneKind::ToyConv {
            if self.conv_blocks == 0 {
                return Err(Error::config("conv backbone needs at least one block"));
            }
            let stride = 1usize << self.conv_blocks;
            if !self.input_size.0.is_multiple_of(stride) || !self.input_size.1.is_multiple_of(stride) {
                return Err(Error::config(format!(
                    "input size {}x{} is not divisible by the backbone stride {stride}",
                    self.input_size.0, self.input_size.1
                )));
            }
            if (self.input_size.0 / stride, self.input_size.1 / stride) != self.grid {
                return Err(Error::config(format!(
                    "backbone output {}x{} does not match the configured grid {}x{}",
                    self.input_size.0 / stride,
                    self.input_size.1 / stride,
                    self.grid.0,
                    self.grid.1
                )));
            }
        }
        Ok(())
    }
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics in the BN neck; caches kept for backward.
    Train,
    /// Running statistics; no caches.
    Infer,
}

/// A batch of inputs matching the configured backbone kind.
#[derive(Debug, Clone, Copy)]
pub enum BatchInput<'a> {
    Features(&'a [FeatureMap]),
    Images(&'a [RgbImage]),
}

impl BatchInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            BatchInput::Features(f) => f.len(),
            BatchInput::Images(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embeddings and classifier scores for one batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub batch: usize,
    /// `B x c` pooled embeddings before the BN neck (triplet-loss input).
    pub pre_bn: Vec<f64>,
    /// `B x c` embeddings after the BN neck (retrieval feature).
    pub post_bn: Vec<f64>,
    /// `B x T` classifier scores.
    pub logits: Vec<f64>,
}

/// Intermediates for the backward pass.
pub struct ForwardCache {
    /// Per sample: the cascade layer inputs (aggregation backward needs them).
    agg_states: Vec<Vec<FeatureMap>>,
    backbone: Option<Vec<backbone::BackboneCache>>,
    bn: Option<BnCache>,
}

/// Parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub fc_weight: Vec<f64>,
    pub fc_bias: Option<Vec<f64>>,
    pub bn_gamma: Option<Vec<f64>>,
    pub bn_shift: Option<Vec<f64>>,
    pub backbone: Option<BackboneGradients>,
}

/// The end-to-end model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub graph: GridGraph,
    pub backbone: Option<ToyBackbone>,
    pub bn: Option<BnNeck>,
    /// `T x c` row-major classifier weight.
    pub fc_weight: Vec<f64>,
    /// Present only when the BN neck is off.
    pub fc_bias: Option<Vec<f64>>,
}

impl Model {
    /// Builds a model with deterministic seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let graph = build_grid_graph(cfg.grid.0, cfg.grid.1, cfg.radius)?;
        let backbone = match cfg.backbone {
            BackboneKind::ToyConv => Some(ToyBackbone::new(cfg.channels, cfg.conv_blocks, seed)?),
            BackboneKind::Precomputed => None,
        };
        let bn = cfg.bn_neck.then(|| BnNeck::new(cfg.channels));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xfc);
        let std = 1.0 / (cfg.channels as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
        let fc_weight = (0..cfg.num_classes * cfg.channels)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let fc_bias = (!cfg.bn_neck).then(|| vec![0.0; cfg.num_classes]);
        Ok(Model {
            cfg,
            graph,
            backbone,
            bn,
            fc_weight,
            fc_bias,
        })
    }

    fn check_feature_shape(&self, map: &FeatureMap, sample: usize) -> Result<()> {
        if map.channels() != self.cfg.channels
            || (map.width(), map.height()) != self.cfg.grid
        {
            return Err(Error::invalid(format!(
                "sample {sample}: feature map {}x{}x{} does not match model {}x{}x{}",
                map.channels(),
                map.width(),
                map.height(),
                self.cfg.channels,
                self.cfg.grid.0,
                self.cfg.grid.1
            )));
        }
        Ok(())
    }

    /// Runs aggregation on one backbone output; returns the intermediate
    /// states with the aggregated map last.
    fn aggregate_one(&self, map: FeatureMap) -> Result<Vec<FeatureMap>> {
        match self.cfg.aggregation {
            Aggregation::Lga => lga_cascade_states(&map, &self.graph, self.cfg.lga_depth),
            Aggregation::Lap => {
                let pre = lap_forward(&map, &self.graph)?;
                if self.cfg.lap_relu {
                    let mut post = pre.clone();
                    for v in post.as_mut_slice() {
                        *v = v.max(0.0);
                    }
                    Ok(vec![map, pre, post])
                } else {
                    Ok(vec![map, pre])
                }
            }
            Aggregation::None => Ok(vec![map]),
        }
    }

    /// Number of trainable scalars. Aggregation contributes none: switching
    /// it on or off never changes the census.
    pub fn num_parameters(&self) -> usize {
        let mut n = self.fc_weight.len();
        if let Some(bias) = &self.fc_bias {
            n += bias.len();
        }
        if let Some(bn) = &self.bn {
            n += bn.gamma.len() + bn.shift.len();
        }
        if let Some(bb) = &self.backbone {
            for block in &bb.blocks {
                n += block.weight.len() + block.bias.len();
            }
        }
        n
    }

    /// Full forward pass over a batch.
    pub fn forward(
        &self,
        input: BatchInput,
        mode: ForwardMode,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        if input.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let b = input.len();
        let c = self.cfg.channels;

        let mut agg_states = Vec::with_capacity(b);
        let mut backbone_caches = Vec::new();
        match (self.cfg.backbone, input) {
            (BackboneKind::Precomputed, BatchInput::Features(maps)) => {
                for (i, map) in maps.iter().enumerate() {
                    self.check_feature_shape(map, i)?;
                    agg_states.push(self.aggregate_one(map.clone())?);
                }
            }
            (BackboneKind::ToyConv, BatchInput::Images(images)) => {
                let bb = self.backbone.as_ref().expect("conv backbone present");
                for (i, img) in images.iter().enumerate() {
                    if (img.width, img.height) != self.cfg.input_size {
                        return Err(Error::invalid(format!(
                            "sample {i}: image {}x{} does not match input size {}x{}",
                            img.width, img.height, self.cfg.input_size.0, self.cfg.input_size.1
                        )));
                    }
                    let (map, cache) = bb.forward(img)?;
                    self.check_feature_shape(&map, i)?;
                    backbone_caches.push(cache);
                    agg_states.push(self.aggregate_one(map)?);
                }
            }
            _ => {
                return Err(Error::invalid(
                    "batch input kind does not match the configured backbone",
                ))
            }
        }

        let mut pre_bn = Vec::with_capacity(b * c);
        for states in &agg_states {
            pre_bn.extend(global_average_pool(states.last().expect("nonempty")));
        }

        let (post_bn, bn_cache) = match (&self.bn, mode) {
            (Some(bn), ForwardMode::Train) => {
                let (y, cache) = bn.forward_train(&pre_bn, b)?;
                (y, Some(cache))
            }
            (Some(bn), ForwardMode::Infer) => (bn.forward_infer(&pre_bn, b)?, None),
            (None, _) => (pre_bn.clone(), None),
        };

        let t = self.cfg.num_classes;
        let mut logits = vec![0.0; b * t];
        for row in 0..b {
            for cls in 0..t {
                let mut acc = self.fc_bias.as_ref().map_or(0.0, |bias| bias[cls]);
                for ch in 0..c {
                    acc += self.fc_weight[cls * c + ch] * post_bn[row * c + ch];
                }
                logits[row * t + cls] = acc;
            }
        }

        Ok((
            ForwardOutput {
                batch: b,
                pre_bn,
                post_bn,
                logits,
            },
            ForwardCache {
                agg_states,
                backbone: (!backbone_caches.is_empty()).then_some(backbone_caches),
                bn: bn_cache,
            },
        ))
    }

    /// Backward pass from loss gradients to parameter gradients.
    ///
    /// `grad_logits` is `B x T` (classifier loss); `grad_pre_bn` is `B x c`
    /// (triplet loss on the pooled pre-BN embedding).
    pub fn backward(
        &self,
        output: &ForwardOutput,
        cache: &ForwardCache,
        grad_logits: &[f64],
        grad_pre_bn: &[f64],
    ) -> Result<Gradients> {
        let b = output.batch;
        let c = self.cfg.channels;
        let t = self.cfg.num_classes;
        if grad_logits.len() != b * t || grad_pre_bn.len() != b * c {
            return Err(Error::invalid("loss gradient shapes do not match the batch"));
        }

        let mut grad_fc = vec![0.0; t * c];
        let mut grad_bias = self.fc_bias.as_ref().map(|_| vec![0.0; t]);
        let mut grad_post = vec![0.0; b * c];
        for row in 0..b {
            for cls in 0..t {
                let g = grad_logits[row * t + cls];
                if let Some(gb) = grad_bias.as_mut() {
                    gb[cls] += g;
                }
                for ch in 0..c {
                    grad_fc[cls * c + ch] += g * output.post_bn[row * c + ch];
                    grad_post[row * c + ch] += g * self.fc_weight[cls * c + ch];
                }
            }
        }

        let (mut grad_pre, bn_gamma, bn_shift) = match &self.bn {
            Some(bn) => {
                let bn_cache = cache.bn.as_ref().ok_or_else(|| {
                    Error::invalid("backward needs a train-mode forward cache")
                })?;
                let (gin, gg, gs) = bn.backward(bn_cache, &grad_post);
                (gin, Some(gg), Some(gs))
            }
            None => (grad_post, None, None),
        };
        for (slot, extra) in grad_pre.iter_mut().zip(grad_pre_bn) {
            *slot += extra;
        }

        // Below the pooled embedding only the backbone holds parameters, so
        // the chain through pooling and aggregation runs per sample only
        // when a backbone is present.
        let nodes = self.cfg.grid.0 * self.cfg.grid.1;
        let mut backbone_grads = self.backbone.as_ref().map(|bb| bb.zero_gradients());
        if let (Some(bb), Some(grads)) = (&self.backbone, backbone_grads.as_mut()) {
            let caches = cache
                .backbone
                .as_ref()
                .ok_or_else(|| Error::invalid("backbone backward needs forward caches"))?;
            for row in 0..b {
                let mut grad_map = FeatureMap::zeros(c, self.cfg.grid.0, self.cfg.grid.1);
                for ch in 0..c {
                    let g = grad_pre[row * c + ch] / nodes as f64;
                    grad_map.channel_mut(ch).fill(g);
                }
                let grad_backbone_out = match self.cfg.aggregation {
                    Aggregation::Lga => {
                        lga_cascade_backward(&cache.agg_states[row], &self.graph, &grad_map)?
                    }
                    Aggregation::Lap => {
                        let mut upstream = grad_map;
                        if self.cfg.lap_relu {
                            let pre = &cache.agg_states[row][1];
                            for (g, &p) in
                                upstream.as_mut_slice().iter_mut().zip(pre.as_slice())
                            {
                                if p <= 0.0 {
                                    *g = 0.0;
                                }
                            }
                        }
                        lap_backward(&self.graph, &upstream)?
                    }
                    Aggregation::None => grad_map,
                };
                bb.backward(&caches[row], &grad_backbone_out, grads);
            }
        }

        Ok(Gradients {
            fc_weight: grad_fc,
            fc_bias: grad_bias,
            bn_gamma,
            bn_shift,
            backbone: backbone_grads,
        })
    }

    /// Inference embeddings for retrieval: post-BN by default, pre-BN when
    /// configured.
    pub fn retrieval_embeddings(&self, input: BatchInput) -> Result<Vec<Vec<f64>>> {
        let (out, _) = self.forward(input, ForwardMode::Infer)?;
        let c = self.cfg.channels;
        let source = if self.cfg.retrieval_post_bn {
            &out.post_bn
        } else {
            &out.pre_bn
        };
        Ok((0..out.batch)
            .map(|row| source[row * c..(row + 1) * c].to_vec())
            .collect())
    }
}
