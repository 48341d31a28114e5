//! Training loop: SGD with momentum over the composite loss, a phase-based
//! learning-rate schedule, and a per-epoch CSV log.
//!
//! The run is a pure function of its seeds: model init, P×K sampling, and
//! per-batch augmentation all draw from fixed ChaCha streams, and every
//! reduction runs in batch order on a single thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::FeatureMap;
use crate::datasets::{DataSet, PayloadData, RgbImage};
use crate::error::{Error, Result};
use crate::losses::{
    class_balanced_loss, softmargin_triplet_loss, total_loss, ClassFrequencyTable,
    EmbeddingBatch, LogitsBatch, Mining,
};
use crate::pipeline::{augment, BackboneKind, BatchInput, ForwardMode, Gradients, Model, ModelConfig};
use crate::sampler::{IdentitySampler, SamplerConfig};

/// One learning-rate phase over an inclusive 1-based epoch range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase {
    /// Linear interpolation from `from` at `start` to `to` at `end`.
    Warmup {
        start: usize,
        end: usize,
        from: f64,
        to: f64,
    },
    Constant {
        start: usize,
        end: usize,
        lr: f64,
    },
}

impl Phase {
    fn range(&self) -> (usize, usize) {
        match *self {
            Phase::Warmup { start, end, .. } | Phase::Constant { start, end, .. } => (start, end),
        }
    }
}

/// Learning-rate schedule plus optimizer constants.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    /// Global multiplier on every phase (0.1 for the low-rate benchmark runs).
    pub lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

impl TrainSchedule {
    /// The reference recipe: warm up 1e-3 to 1e-2 over epochs 1-10, hold
    /// 1e-2 until 39, 1e-3 for 40-69, 1e-4 for 70-120.
    pub fn standard() -> Self {
        TrainSchedule {
            phases: vec![
                Phase::Warmup {
                    start: 1,
                    end: 10,
                    from: 1e-3,
                    to: 1e-2,
                },
                Phase::Constant {
                    start: 11,
                    end: 39,
                    lr: 1e-2,
                },
                Phase::Constant {
                    start: 40,
                    end: 69,
                    lr: 1e-3,
                },
                Phase::Constant {
                    start: 70,
                    end: 120,
                    lr: 1e-4,
                },
            ],
            lr_multiplier: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    /// Learning rate at a 1-based epoch, multiplier applied.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        for phase in &self.phases {
            let (start, end) = phase.range();
            if epoch < start || epoch > end {
                continue;
            }
            let base = match *phase {
                Phase::Constant { lr, .. } => lr,
                Phase::Warmup { start, end, from, to } => {
                    if epoch == start {
                        from
                    } else if epoch == end {
                        to
                    } else {
                        from + (to - from) * (epoch - start) as f64 / (end - start) as f64
                    }
                }
            };
            let lr = base * self.lr_multiplier;
            if !(lr > 0.0) {
                return Err(Error::config(format!(
                    "learning rate must stay positive, got {lr} at epoch {epoch}"
                )));
            }
            return Ok(lr);
        }
        Err(Error::config(format!(
            "schedule does not cover epoch {epoch}"
        )))
    }

    /// Checks the schedule covers every epoch of a run.
    pub fn validate(&self, epochs: usize) -> Result<()> {
        for epoch in 1..=epochs {
            self.lr_at(epoch)?;
        }
        Ok(())
    }
}

/// Knobs of one training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    /// Triplet margin.
    pub margin: f64,
    pub mining: Mining,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            seed: 0,
            margin: 0.0,
            mining: Mining::BatchHard,
        }
    }
}

/// One row of the training CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub cb_loss: f64,
    pub tri_loss: f64,
    pub total_loss: f64,
}

/// Renders the per-epoch log as CSV.
pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,cb_loss,tri_loss,total_loss\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            row.epoch, row.lr, row.cb_loss, row.tri_loss, row.total_loss
        ));
    }
    out
}

/// A trained model plus its epoch log.
pub struct TrainResult {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Sorted distinct manifest labels of the training split; classifier
    /// class `i` corresponds to `train_classes[i]`.
    pub train_classes: Vec<usize>,
}

struct Velocity {
    fc_weight: Vec<f64>,
    fc_bias: Option<Vec<f64>>,
    bn_gamma: Option<Vec<f64>>,
    bn_shift: Option<Vec<f64>>,
    backbone_weight: Vec<Vec<f64>>,
    backbone_bias: Vec<Vec<f64>>,
}

impl Velocity {
    fn zeros(model: &Model) -> Self {
        Velocity {
            fc_weight: vec![0.0; model.fc_weight.len()],
            fc_bias: model.fc_bias.as_ref().map(|b| vec![0.0; b.len()]),
            bn_gamma: model.bn.as_ref().map(|bn| vec![0.0; bn.gamma.len()]),
            bn_shift: model.bn.as_ref().map(|bn| vec![0.0; bn.shift.len()]),
            backbone_weight: model
                .backbone
                .as_ref()
                .map(|bb| bb.blocks.iter().map(|b| vec![0.0; b.weight.len()]).collect())
                .unwrap_or_default(),
            backbone_bias: model
                .backbone
                .as_ref()
                .map(|bb| bb.blocks.iter().map(|b| vec![0.0; b.bias.len()]).collect())
                .unwrap_or_default(),
        }
    }
}

fn sgd_step(
    param: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

fn check_finite(name: &str, values: &[f64], epoch: usize, batch: usize) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "{name} is not finite at epoch {epoch}, batch {batch}"
        )));
    }
    Ok(())
}

/// Gathers the model inputs for one batch of record indices.
fn gather_inputs(
    dataset: &DataSet,
    records: &[usize],
    backbone: BackboneKind,
    aug_rng: Option<&mut ChaCha8Rng>,
    cfg: &ModelConfig,
) -> Result<(Vec<FeatureMap>, Vec<RgbImage>)> {
    match backbone {
        BackboneKind::Precomputed => {
            let mut maps = Vec::with_capacity(records.len());
            for &r in records {
                match &dataset.payloads[r] {
                    PayloadData::Features(m) => maps.push(m.clone()),
                    PayloadData::Image(_) => {
                        return Err(Error::invalid(format!(
                            "record {r} holds an image but the backbone expects features"
                        )))
                    }
                }
            }
            Ok((maps, Vec::new()))
        }
        BackboneKind::ToyConv => {
            let mut images = Vec::with_capacity(records.len());
            let mut rng = aug_rng;
            for &r in records {
                match &dataset.payloads[r] {
                    PayloadData::Image(img) => match rng.as_deref_mut() {
                        Some(rng) => images.push(augment(
                            img,
                            cfg.flip_probability,
                            cfg.erase_probability,
                            rng,
                        )?),
                        None => images.push(img.clone()),
                    },
                    PayloadData::Features(_) => {
                        return Err(Error::invalid(format!(
                            "record {r} holds features but the backbone expects images"
                        )))
                    }
                }
            }
            Ok((Vec::new(), images))
        }
    }
}

/// Trains a model over the manifest's `train` split.
///
/// `freq` must cover exactly the training classes (sorted distinct train
/// labels). Deterministic: identical arguments give bit-identical models.
pub fn train(
    dataset: &DataSet,
    cfg: &ModelConfig,
    schedule: &TrainSchedule,
    sampler_cfg: &SamplerConfig,
    freq: &ClassFrequencyTable,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    cfg.validate()?;
    if opts.epochs == 0 {
        return Err(Error::config("training needs at least one epoch"));
    }
    schedule.validate(opts.epochs)?;

    let train_records = dataset.manifest.train_indices();
    if train_records.is_empty() {
        return Err(Error::config("manifest has no records tagged train"));
    }
    let mut train_classes: Vec<usize> =
        train_records.iter().map(|&r| dataset.manifest.records[r].label).collect();
    train_classes.sort_unstable();
    train_classes.dedup();
    if train_classes.len() != cfg.num_classes {
        return Err(Error::config(format!(
            "manifest has {} training identities but the model expects {}",
            train_classes.len(),
            cfg.num_classes
        )));
    }
    if freq.num_classes() != cfg.num_classes {
        return Err(Error::config(format!(
            "frequency table covers {} classes but the model expects {}",
            freq.num_classes(),
            cfg.num_classes
        )));
    }
    let class_of = |label: usize| -> usize {
        train_classes.binary_search(&label).expect("train label")
    };
    let labels: Vec<usize> = train_records
        .iter()
        .map(|&r| class_of(dataset.manifest.records[r].label))
        .collect();

    let sampler = IdentitySampler::new(&labels, *sampler_cfg)?;
    let batches_per_epoch = sampler.batches_per_epoch();
    if batches_per_epoch == 0 {
        return Err(Error::config(format!(
            "training split of {} samples is smaller than one batch of {}",
            train_records.len(),
            sampler_cfg.batch_size()
        )));
    }

    let mut model = Model::new(cfg.clone(), opts.seed)?;
    let mut velocity = Velocity::zeros(&model);
    let mut log = Vec::with_capacity(opts.epochs);

    for epoch in 1..=opts.epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut cb_sum = 0.0;
        let mut tri_sum = 0.0;
        for batch_idx in 0..batches_per_epoch {
            let global = ((epoch - 1) * batches_per_epoch + batch_idx) as u64;
            let selection = sampler.batch(global);
            let record_ids: Vec<usize> = selection.iter().map(|&s| train_records[s]).collect();
            let batch_classes: Vec<usize> = selection.iter().map(|&s| labels[s]).collect();

            let mut aug_rng = ChaCha8Rng::seed_from_u64(opts.seed);
            aug_rng.set_stream((1 << 40) | global);
            let (maps, images) = gather_inputs(
                dataset,
                &record_ids,
                cfg.backbone,
                Some(&mut aug_rng),
                cfg,
            )?;
            let input = match cfg.backbone {
                BackboneKind::Precomputed => BatchInput::Features(&maps),
                BackboneKind::ToyConv => BatchInput::Images(&images),
            };

            let (out, cache) = model.forward(input, ForwardMode::Train)?;
            check_finite("pre_bn embedding", &out.pre_bn, epoch, batch_idx)?;
            check_finite("logits", &out.logits, epoch, batch_idx)?;

            let logits = LogitsBatch::new(cfg.num_classes, out.logits.clone(), batch_classes.clone())?;
            let (cb, grad_logits) = class_balanced_loss(&logits, freq)?;
            let embeddings =
                EmbeddingBatch::new(cfg.channels, out.pre_bn.clone(), batch_classes)?;
            let (tri, grad_pre) = softmargin_triplet_loss(&embeddings, opts.margin, opts.mining)?;
            let total = total_loss(cb, tri);
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "total loss is not finite at epoch {epoch}, batch {batch_idx} (cb {cb}, tri {tri})"
                )));
            }

            if let Some(bn_cache) = &cache.bn {
                model.bn.as_mut().expect("bn present").update_running(bn_cache);
            }
            let grads = model.backward(&out, &cache, &grad_logits, &grad_pre)?;
            apply_update(&mut model, &mut velocity, &grads, lr, schedule, epoch, batch_idx)?;

            cb_sum += cb;
            tri_sum += tri;
        }
        let n = batches_per_epoch as f64;
        log.push(EpochLog {
            epoch,
            lr,
            cb_loss: cb_sum / n,
            tri_loss: tri_sum / n,
            total_loss: (cb_sum + tri_sum) / n,
        });
    }

    Ok(TrainResult {
        model,
        log,
        train_classes,
    })
}

fn apply_update(
    model: &mut Model,
    velocity: &mut Velocity,
    grads: &Gradients,
    lr: f64,
    schedule: &TrainSchedule,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    let (mu, wd) = (schedule.momentum, schedule.weight_decay);
    check_finite("fc.weight gradient", &grads.fc_weight, epoch, batch)?;
    sgd_step(&mut model.fc_weight, &mut velocity.fc_weight, &grads.fc_weight, lr, mu, wd);
    if let (Some(bias), Some(vel), Some(g)) = (
        model.fc_bias.as_mut(),
        velocity.fc_bias.as_mut(),
        grads.fc_bias.as_ref(),
    ) {
        check_finite("fc.bias gradient", g, epoch, batch)?;
        sgd_step(bias, vel, g, lr, mu, wd);
    }
    if let Some(bn) = model.bn.as_mut() {
        let (gg, gs) = (
            grads.bn_gamma.as_ref().expect("bn gradient"),
            grads.bn_shift.as_ref().expect("bn gradient"),
        );
        check_finite("bn.gamma gradient", gg, epoch, batch)?;
        check_finite("bn.shift gradient", gs, epoch, batch)?;
        sgd_step(
            &mut bn.gamma,
            velocity.bn_gamma.as_mut().expect("bn velocity"),
            gg,
            lr,
            mu,
            wd,
        );
        sgd_step(
            &mut bn.shift,
            velocity.bn_shift.as_mut().expect("bn velocity"),
            gs,
            lr,
            mu,
            wd,
        );
    }
    if let (Some(bb), Some(bg)) = (model.backbone.as_mut(), grads.backbone.as_ref()) {
        for (i, block) in bb.blocks.iter_mut().enumerate() {
            check_finite("backbone weight gradient", &bg.weight[i], epoch, batch)?;
            sgd_step(
                &mut block.weight,
                &mut velocity.backbone_weight[i],
                &bg.weight[i],
                lr,
                mu,
                wd,
            );
            sgd_step(
                &mut block.bias,
                &mut velocity.backbone_bias[i],
                &bg.bias[i],
                lr,
                mu,
                wd,
            );
        }
    }
    Ok(())
}

/// Inference embeddings for a set of records (no augmentation).
pub fn embed_records(model: &Model, dataset: &DataSet, records: &[usize]) -> Result<Vec<Vec<f64>>> {
    if records.is_empty() {
        return Err(Error::invalid("no records to embed"));
    }
    let (maps, images) = gather_inputs(dataset, records, model.cfg.backbone, None, &model.cfg)?;
    let input = match model.cfg.backbone {
        BackboneKind::Precomputed => BatchInput::Features(&maps),
        BackboneKind::ToyConv => BatchInput::Images(&images),
    };
    model.retrieval_embeddings(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, CountDistribution, PayloadKind, SyntheticSpec};
    use crate::pipeline::{save_checkpoint, Aggregation};

    #[test]
    fn standard_schedule_values() {
        let s = TrainSchedule::standard();
        assert_eq!(s.lr_at(1).unwrap(), 1e-3);
        assert!((s.lr_at(5).unwrap() - 5e-3).abs() < 1e-15);
        assert_eq!(s.lr_at(10).unwrap(), 1e-2);
        assert_eq!(s.lr_at(11).unwrap(), 1e-2);
        assert_eq!(s.lr_at(39).unwrap(), 1e-2);
        assert_eq!(s.lr_at(40).unwrap(), 1e-3);
        assert_eq!(s.lr_at(69).unwrap(), 1e-3);
        assert_eq!(s.lr_at(70).unwrap(), 1e-4);
        assert_eq!(s.lr_at(120).unwrap(), 1e-4);
        assert!(s.lr_at(121).is_err());
        assert!(s.validate(120).is_ok());
        assert!(s.validate(121).is_err());

        let low = TrainSchedule {
            lr_multiplier: 0.1,
            ..TrainSchedule::standard()
        };
        assert!((low.lr_at(20).unwrap() - 1e-3).abs() < 1e-15);
    }

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            identities: 2,
            counts: CountDistribution::Uniform { per_identity: 2 },
            payload: PayloadKind::Features {
                channels: 6,
                width: 2,
                height: 2,
            },
            noise_sigma: 0.05,
            separation: 1.0,
            cameras: 2,
            test_per_identity: 0,
            occlusion_probability: 0.0,
            occlusion_strength: 0.0,
            seed: 3,
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneKind::Precomputed,
            channels: 6,
            grid: (2, 2),
            num_classes: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_sampler() -> SamplerConfig {
        SamplerConfig {
            identities_per_batch: 2,
            instances_per_identity: 2,
            seed: 0,
        }
    }

    #[test]
    fn loss_decreases_on_a_separable_set() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let freq = ClassFrequencyTable::new(vec![2, 2], 0.0).unwrap();
        let opts = TrainOptions {
            epochs: 2,
            seed: 1,
            ..TrainOptions::default()
        };
        let result = train(
            &data,
            &tiny_cfg(),
            &TrainSchedule::standard(),
            &tiny_sampler(),
            &freq,
            &opts,
        )
        .unwrap();
        assert_eq!(result.log.len(), 2);
        assert!(
            result.log[1].total_loss < result.log[0].total_loss,
            "{:?}",
            result.log
        );
        let csv = training_log_csv(&result.log);
        assert!(csv.starts_with("epoch,lr,cb_loss,tri_loss,total_loss\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_checkpoints() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let freq = ClassFrequencyTable::new(vec![2, 2], 0.5).unwrap();
        let opts = TrainOptions {
            epochs: 2,
            seed: 9,
            ..TrainOptions::default()
        };
        let run = || {
            train(
                &data,
                &tiny_cfg(),
                &TrainSchedule::standard(),
                &tiny_sampler(),
                &freq,
                &opts,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        save_checkpoint(&a.model, &mut bytes_a).unwrap();
        save_checkpoint(&b.model, &mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);

        let other = train(
            &data,
            &tiny_cfg(),
            &TrainSchedule::standard(),
            &tiny_sampler(),
            &freq,
            &TrainOptions {
                seed: 10,
                ..opts
            },
        )
        .unwrap();
        let mut bytes_c = Vec::new();
        save_checkpoint(&other.model, &mut bytes_c).unwrap();
        assert_ne!(bytes_a, bytes_c);
    }

    #[test]
    fn ablation_with_no_aggregation_and_flat_weights_trains() {
        // The no-aggregation, no-reweighting configuration still runs the
        // same loop; only the forward path and weights change.
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let freq = ClassFrequencyTable::new(vec![2, 2], 0.0).unwrap();
        assert!(freq.weight(0) == 1.0 && freq.weight(1) == 1.0);
        let cfg = ModelConfig {
            aggregation: Aggregation::None,
            ..tiny_cfg()
        };
        let result = train(
            &data,
            &cfg,
            &TrainSchedule::standard(),
            &tiny_sampler(),
            &freq,
            &TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(result.log.len(), 1);
    }

    #[test]
    fn config_errors_are_reported() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let freq = ClassFrequencyTable::new(vec![2, 2], 0.0).unwrap();
        // Wrong class count.
        let cfg = ModelConfig {
            num_classes: 3,
            ..tiny_cfg()
        };
        assert!(train(
            &data,
            &cfg,
            &TrainSchedule::standard(),
            &tiny_sampler(),
            &freq,
            &TrainOptions::default(),
        )
        .is_err());
        // Manifest without a train split.
        let mut untagged = data.clone();
        for r in &mut untagged.manifest.records {
            r.split = None;
        }
        assert!(train(
            &untagged,
            &tiny_cfg(),
            &TrainSchedule::standard(),
            &tiny_sampler(),
            &freq,
            &TrainOptions::default(),
        )
        .is_err());
    }

    #[test]
    fn embeddings_come_from_the_configured_source() {
        let data = generate_synthetic(&tiny_spec()).unwrap();
        let freq = ClassFrequencyTable::new(vec![2, 2], 0.0).unwrap();
        let result = train(
            &data,
            &tiny_cfg(),
            &TrainSchedule::standard(),
            &tiny_sampler(),
            &freq,
            &TrainOptions::default(),
        )
        .unwrap();
        let all: Vec<usize> = (0..data.manifest.len()).collect();
        let post = embed_records(&result.model, &data, &all).unwrap();
        let mut pre_model = result.model.clone();
        pre_model.cfg.retrieval_post_bn = false;
        let pre = embed_records(&pre_model, &data, &all).unwrap();
        assert_eq!(post.len(), pre.len());
        assert_ne!(post, pre);
    }
}
