//! Analytic-gradient verification against central finite differences.
//!
//! Four built-in checks cover the aggregation backward pass, both losses,
//! and the end-to-end composite objective in precomputed mode. Each check
//! draws random instances away from ReLU kinks and mining boundaries and
//! reports the worst relative error it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{lga_backward, lga_forward, FeatureMap};
use crate::error::Result;
use crate::gridgraph::build_grid_graph;
use crate::losses::{
    class_balanced_loss, softmargin_triplet_loss, ClassFrequencyTable, EmbeddingBatch,
    LogitsBatch, Mining,
};
use crate::pipeline::{BackboneKind, BatchInput, ForwardMode, Model, ModelConfig};

/// Default step for central differences at double precision.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass threshold on the max relative error.
pub const DEFAULT_THRESHOLD: f64 = 1e-4;

/// Outcome of one registered check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub instances: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// Central finite differences of a scalar function.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Aggregation backward vs finite differences of the forward pass.
pub fn check_lga_backward(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut rng = rng_for(seed, 100 + inst as u64);
        let (w, h) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let graph = build_grid_graph(w, h, 1.5)?;
        let nodes = w * h;
        let c = rng.random_range(1..=3);
        // Offset away from zero keeps every pre-activation off the kink.
        let values: Vec<f64> = (0..c * nodes)
            .map(|_| rng.random_range(0.2..1.2))
            .collect();
        let input = FeatureMap::from_values(c, w, h, values.clone())?;
        let upstream_values: Vec<f64> = (0..c * nodes)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let upstream = FeatureMap::from_values(c, w, h, upstream_values.clone())?;
        let grad = lga_backward(&input, &graph, &upstream)?;

        let objective = |vals: &[f64]| {
            let m = FeatureMap::from_values(c, w, h, vals.to_vec()).unwrap();
            let out = lga_forward(&m, &graph).unwrap();
            out.as_slice()
                .iter()
                .zip(&upstream_values)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let numeric = central_difference(objective, &values, DEFAULT_STEP);
        worst = worst.max(max_relative_error(grad.as_slice(), &numeric));
    }
    Ok(CheckOutcome {
        name: "lga_backward",
        max_rel_error: worst,
        threshold: DEFAULT_THRESHOLD,
        instances,
    })
}

/// Class-balanced loss gradient vs finite differences.
pub fn check_class_balanced(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut rng = rng_for(seed, 200 + inst as u64);
        let t = rng.random_range(2..=8);
        let b = rng.random_range(1..=6);
        let scores: Vec<f64> = (0..b * t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..t)).collect();
        let counts: Vec<u64> = (0..t).map(|_| rng.random_range(1..=100)).collect();
        let beta = rng.random_range(0.0..0.99);
        let freq = ClassFrequencyTable::new(counts, beta)?;
        let (_, grad) =
            class_balanced_loss(&LogitsBatch::new(t, scores.clone(), labels.clone())?, &freq)?;

        let objective = |vals: &[f64]| {
            let (loss, _) = class_balanced_loss(
                &LogitsBatch::new(t, vals.to_vec(), labels.clone()).unwrap(),
                &freq,
            )
            .unwrap();
            loss
        };
        let numeric = central_difference(objective, &scores, DEFAULT_STEP);
        worst = worst.max(max_relative_error(&grad, &numeric));
    }
    Ok(CheckOutcome {
        name: "class_balanced_loss",
        max_rel_error: worst,
        threshold: DEFAULT_THRESHOLD,
        instances,
    })
}

/// Batch-hard mining is locally stable when the hardest positive and
/// negative of every anchor win by at least `gap` in squared distance.
fn mining_is_stable(embeddings: &[f64], ids: &[usize], dim: usize, gap: f64) -> bool {
    let b = ids.len();
    let d2 = |i: usize, j: usize| -> f64 {
        (0..dim)
            .map(|k| {
                let d = embeddings[i * dim + k] - embeddings[j * dim + k];
                d * d
            })
            .sum()
    };
    for a in 0..b {
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for j in 0..b {
            if j == a {
                continue;
            }
            if ids[j] == ids[a] {
                pos.push(d2(a, j));
            } else {
                neg.push(d2(a, j));
            }
        }
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(|x, y| x.total_cmp(y));
        if pos.len() > 1 && pos[0] - pos[1] < gap {
            return false;
        }
        if neg.len() > 1 && neg[1] - neg[0] < gap {
            return false;
        }
    }
    true
}

/// Triplet loss gradient vs finite differences at mining-stable points.
pub fn check_triplet(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let dim = 6;
    let ids: Vec<usize> = (0..8).map(|i| i / 2).collect();
    let mut inst = 0usize;
    let mut attempt = 0u64;
    while inst < instances {
        attempt += 1;
        let mut rng = rng_for(seed, 300 + attempt);
        let values: Vec<f64> = (0..ids.len() * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        if !mining_is_stable(&values, &ids, dim, 1e-3) {
            continue;
        }
        inst += 1;
        let batch = EmbeddingBatch::new(dim, values.clone(), ids.clone())?;
        let (_, grad) = softmargin_triplet_loss(&batch, 0.0, Mining::BatchHard)?;
        let objective = |vals: &[f64]| {
            let b = EmbeddingBatch::new(dim, vals.to_vec(), ids.clone()).unwrap();
            softmargin_triplet_loss(&b, 0.0, Mining::BatchHard).unwrap().0
        };
        let numeric = central_difference(objective, &values, DEFAULT_STEP);
        worst = worst.max(max_relative_error(&grad, &numeric));
    }
    Ok(CheckOutcome {
        name: "triplet_loss",
        max_rel_error: worst,
        threshold: DEFAULT_THRESHOLD,
        instances,
    })
}

/// End-to-end composite loss: analytic parameter gradients (BN scale/shift
/// and classifier weight) vs finite differences, precomputed mode.
pub fn check_end_to_end(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let cfg = ModelConfig {
        backbone: BackboneKind::Precomputed,
        channels: 5,
        grid: (3, 3),
        lga_depth: 2,
        num_classes: 4,
        ..ModelConfig::default()
    };
    let ids: Vec<usize> = vec![0, 0, 1, 1, 2, 2, 3, 3];
    let mut inst = 0usize;
    let mut attempt = 0u64;
    while inst < instances {
        attempt += 1;
        let mut rng = rng_for(seed, 400 + attempt);
        let model = Model::new(cfg.clone(), rng.random())?;
        let maps: Vec<FeatureMap> = (0..ids.len())
            .map(|_| {
                let values = (0..cfg.channels * 9)
                    .map(|_| rng.random_range(0.2..1.4))
                    .collect();
                FeatureMap::from_values(cfg.channels, 3, 3, values).unwrap()
            })
            .collect();
        let freq = ClassFrequencyTable::new(vec![3, 7, 20, 55], 0.9)?;

        let loss_of = |model: &Model| -> f64 {
            let (out, _) = model
                .forward(BatchInput::Features(&maps), ForwardMode::Train)
                .unwrap();
            let (cb, _) = class_balanced_loss(
                &LogitsBatch::new(cfg.num_classes, out.logits, ids.clone()).unwrap(),
                &freq,
            )
            .unwrap();
            let (tri, _) = softmargin_triplet_loss(
                &EmbeddingBatch::new(cfg.channels, out.pre_bn, ids.clone()).unwrap(),
                0.0,
                Mining::BatchHard,
            )
            .unwrap();
            cb + tri
        };

        // Skip instances where mining could flip under perturbation.
        let (out, cache) = model.forward(BatchInput::Features(&maps), ForwardMode::Train)?;
        if !mining_is_stable(&out.pre_bn, &ids, cfg.channels, 1e-3) {
            continue;
        }
        inst += 1;

        let (cb_loss, grad_logits) = class_balanced_loss(
            &LogitsBatch::new(cfg.num_classes, out.logits.clone(), ids.clone())?,
            &freq,
        )?;
        let _ = cb_loss;
        let (_, grad_pre) = softmargin_triplet_loss(
            &EmbeddingBatch::new(cfg.channels, out.pre_bn.clone(), ids.clone())?,
            0.0,
            Mining::BatchHard,
        )?;
        let grads = model.backward(&out, &cache, &grad_logits, &grad_pre)?;

        // Finite differences over each parameter group.
        let bn = model.bn.as_ref().expect("bn on");
        let groups: Vec<(&str, Vec<f64>, Vec<f64>)> = vec![
            ("bn.gamma", bn.gamma.clone(), grads.bn_gamma.clone().unwrap()),
            ("bn.shift", bn.shift.clone(), grads.bn_shift.clone().unwrap()),
            ("fc.weight", model.fc_weight.clone(), grads.fc_weight.clone()),
        ];
        for (name, values, analytic) in groups {
            let numeric = central_difference(
                |vals: &[f64]| {
                    let mut m = model.clone();
                    match name {
                        "bn.gamma" => m.bn.as_mut().unwrap().gamma = vals.to_vec(),
                        "bn.shift" => m.bn.as_mut().unwrap().shift = vals.to_vec(),
                        "fc.weight" => m.fc_weight = vals.to_vec(),
                        _ => unreachable!(),
                    }
                    loss_of(&m)
                },
                &values,
                DEFAULT_STEP,
            );
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
    }
    Ok(CheckOutcome {
        name: "end_to_end",
        max_rel_error: worst,
        threshold: DEFAULT_THRESHOLD,
        instances,
    })
}

/// Runs every registered check at its standard instance count.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_lga_backward(seed, 100)?,
        check_class_balanced(seed, 100)?,
        check_triplet(seed, 100)?,
        check_end_to_end(seed, 100)?,
    ])
}

/// CSV rendering of check outcomes: `check,max_rel_error,threshold,status`.
pub fn outcomes_csv(outcomes: &[CheckOutcome]) -> String {
    let mut out = String::from("check,max_rel_error,threshold,status\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{:.3e},{:.0e},{}\n",
            o.name,
            o.max_rel_error,
            o.threshold,
            if o.passed() { "pass" } else { "fail" }
        ));
    }
    out
}
