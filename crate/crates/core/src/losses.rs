//! Training losses: class-balanced softmax over identities and soft-margin
//! triplet loss with batch-hard mining. Both return analytic gradients.
//!
//! The class-balanced weight for a class with `n` training samples is
//! `(1 - beta) / (1 - beta^n)`: at `beta = 0` every class weighs 1, and as
//! `beta -> 1` the weighting approaches inverse class frequency.

use crate::error::{Error, Result};

/// Per-class sample counts and the derived class-balanced weights.
#[derive(Debug, Clone)]
pub struct ClassFrequencyTable {
    counts: Vec<u64>,
    beta: f64,
    weights: Vec<f64>,
}

impl ClassFrequencyTable {
    /// Builds the table from per-class counts (class index = position).
    pub fn new(counts: Vec<u64>, beta: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("class frequency table needs at least one class"));
        }
        if counts.contains(&0) {
            return Err(Error::invalid("every class count must be at least 1"));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::invalid(format!(
                "beta must lie in [0, 1), got {beta}"
            )));
        }
        let weights = counts
            .iter()
            .map(|&n| (1.0 - beta) / (1.0 - beta.powi(n as i32)))
            .collect::<Vec<f64>>();
        debug_assert!(weights.iter().all(|w| w.is_finite() && *w > 0.0));
        Ok(ClassFrequencyTable {
            counts,
            beta,
            weights,
        })
    }

    /// Counts labels `0..num_classes` over a label list.
    pub fn from_labels(labels: &[usize], num_classes: usize, beta: f64) -> Result<Self> {
        let mut counts = vec![0u64; num_classes];
        for &y in labels {
            if y >= num_classes {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            counts[y] += 1;
        }
        Self::new(counts, beta)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts[class]
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Class-balanced weight `(1 - beta) / (1 - beta^n)`.
    pub fn weight(&self, class: usize) -> f64 {
        self.weights[class]
    }
}

/// Classifier scores for a batch, row-major `B x T`, with 0-based labels.
#[derive(Debug, Clone)]
pub struct LogitsBatch {
    pub num_classes: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LogitsBatch {
    pub fn new(num_classes: usize, scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if num_classes == 0 || labels.is_empty() || scores.len() != labels.len() * num_classes {
            return Err(Error::invalid(format!(
                "logits shape mismatch: {} scores for {} labels x {} classes",
                scores.len(),
                labels.len(),
                num_classes
            )));
        }
        Ok(LogitsBatch {
            num_classes,
            scores,
            labels,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.scores[b * self.num_classes..(b + 1) * self.num_classes]
    }
}

/// Pooled embeddings with identity (and optionally camera) labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub dim: usize,
    pub embeddings: Vec<f64>,
    pub ids: Vec<usize>,
    pub cams: Option<Vec<u32>>,
}

impl EmbeddingBatch {
    pub fn new(dim: usize, embeddings: Vec<f64>, ids: Vec<usize>) -> Result<Self> {
        if dim == 0 || ids.is_empty() || embeddings.len() != ids.len() * dim {
            return Err(Error::invalid(format!(
                "embedding shape mismatch: {} values for {} ids x dim {}",
                embeddings.len(),
                ids.len(),
                dim
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embeddings contain non-finite values"));
        }
        Ok(EmbeddingBatch {
            dim,
            embeddings,
            ids,
            cams: None,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    pub fn embedding(&self, b: usize) -> &[f64] {
        &self.embeddings[b * self.dim..(b + 1) * self.dim]
    }
}

/// Triplet selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mining {
    /// Per anchor: farthest positive, nearest negative.
    BatchHard,
    /// Mean over every valid (anchor, positive, negative) triplet.
    AllValid,
}

/// Class-balanced softmax loss, mean over the batch.
///
/// Per sample: `-weight(y) * log softmax(z)_y`, with the softmax computed
/// after max subtraction. The gradient with respect to the scores is
/// `weight(y) * (softmax(z) - onehot(y)) / B`.
pub fn class_balanced_loss(
    logits: &LogitsBatch,
    freq: &ClassFrequencyTable,
) -> Result<(f64, Vec<f64>)> {
    let t = logits.num_classes;
    if t < 2 {
        return Err(Error::invalid("class-balanced loss needs at least 2 classes"));
    }
    if freq.num_classes() != t {
        return Err(Error::invalid(format!(
            "frequency table covers {} classes but logits have {}",
            freq.num_classes(),
            t
        )));
    }
    if logits.scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits contain non-finite values"));
    }
    let b = logits.batch_size();
    let mut grad = vec![0.0f64; b * t];
    let mut total = 0.0;
    for i in 0..b {
        let y = logits.labels[i];
        if y >= t {
            return Err(Error::invalid(format!(
                "label {y} out of range for {t} classes (sample {i})"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = max + sum_exp.ln();
        let w = freq.weight(y);
        total += w * (log_sum - row[y]);
        let g = &mut grad[i * t..(i + 1) * t];
        for (c, slot) in g.iter_mut().enumerate() {
            let p = (row[c] - max).exp() / sum_exp;
            *slot = w * (p - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Overflow-safe `log(1 + exp(s))`.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Overflow-safe logistic sigmoid.
fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Soft-margin triplet loss over a batch, mean over anchors (batch-hard) or
/// over all valid triplets.
///
/// Per selected triplet the term is `log(1 + exp(d2_ap - d2_an + margin))`
/// with squared Euclidean distances. Gradients flow through the selected
/// triplets only; the mining choice is treated as constant.
pub fn softmargin_triplet_loss(
    batch: &EmbeddingBatch,
    margin: f64,
    mining: Mining,
) -> Result<(f64, Vec<f64>)> {
    let b = batch.batch_size();
    let c = batch.dim;
    if !margin.is_finite() {
        return Err(Error::invalid("margin must be finite"));
    }

    // Pairwise squared distances, fixed row-major order.
    let mut d2 = vec![0.0f64; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let d = squared_distance(batch.embedding(i), batch.embedding(j));
            d2[i * b + j] = d;
            d2[j * b + i] = d;
        }
    }

    let mut grad = vec![0.0f64; b * c];
    let mut total = 0.0;

    // Adds the gradient of sigma * (d2(a,p) - d2(a,n)) into the grad matrix.
    let add_triplet_grad = |grad: &mut [f64], a: usize, p: usize, n: usize, coef: f64| {
        let (xa, xp, xn) = (batch.embedding(a), batch.embedding(p), batch.embedding(n));
        for k in 0..c {
            let gap = 2.0 * (xa[k] - xp[k]);
            let gan = 2.0 * (xa[k] - xn[k]);
            grad[a * c + k] += coef * (gap - gan);
            grad[p * c + k] -= coef * gap;
            grad[n * c + k] += coef * gan;
        }
    };

    match mining {
        Mining::BatchHard => {
            for a in 0..b {
                let id = batch.ids[a];
                let mut hardest_pos: Option<usize> = None;
                let mut hardest_neg: Option<usize> = None;
                for j in 0..b {
                    if j == a {
                        continue;
                    }
                    if batch.ids[j] == id {
                        if hardest_pos.is_none_or(|p| d2[a * b + j] > d2[a * b + p]) {
                            hardest_pos = Some(j);
                        }
                    } else if hardest_neg.is_none_or(|n| d2[a * b + j] < d2[a * b + n]) {
                        hardest_neg = Some(j);
                    }
                }
                let p = hardest_pos.ok_or_else(|| {
                    Error::invalid(format!(
                        "identity {id} has a single sample in the batch; batch-hard mining needs at least 2"
                    ))
                })?;
                let n = hardest_neg.ok_or_else(|| {
                    Error::invalid(format!("identity {id} has no negative in the batch"))
                })?;
                let s = d2[a * b + p] - d2[a * b + n] + margin;
                total += softplus(s);
                add_triplet_grad(&mut grad, a, p, n, sigmoid(s));
            }
            let scale = 1.0 / b as f64;
            total *= scale;
            for g in &mut grad {
                *g *= scale;
            }
        }
        Mining::AllValid => {
            let mut count = 0usize;
            for a in 0..b {
                for p in 0..b {
                    if p == a || batch.ids[p] != batch.ids[a] {
                        continue;
                    }
                    for n in 0..b {
                        if batch.ids[n] == batch.ids[a] {
                            continue;
                        }
                        let s = d2[a * b + p] - d2[a * b + n] + margin;
                        total += softplus(s);
                        add_triplet_grad(&mut grad, a, p, n, sigmoid(s));
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return Err(Error::invalid(
                    "no valid triplet in batch: need an identity with >= 2 samples and a negative",
                ));
            }
            let scale = 1.0 / count as f64;
            total *= scale;
            for g in &mut grad {
                *g *= scale;
            }
        }
    }
    Ok((total, grad))
}

/// Total training objective: unweighted sum of the two loss terms.
pub fn total_loss(cb: f64, tri: f64) -> f64 {
    cb + tri
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_4: f64 = 1.3862943611198906;
    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn frequency_table_invariants() {
        let t = ClassFrequencyTable::new(vec![1, 5, 50, 500], 0.0).unwrap();
        for c in 0..4 {
            assert_eq!(t.weight(c), 1.0);
        }
        // n = 1 weighs exactly 1 for any beta.
        let t = ClassFrequencyTable::new(vec![1, 50], 0.97).unwrap();
        assert_eq!(t.weight(0), 1.0);
        // Independently recomputed: 0.03 / (1 - 0.97^50).
        assert!((t.weight(1) - 0.03836637879199781).abs() < 1e-12);

        assert!(ClassFrequencyTable::new(vec![], 0.5).is_err());
        assert!(ClassFrequencyTable::new(vec![0, 1], 0.5).is_err());
        assert!(ClassFrequencyTable::new(vec![1], 1.0).is_err());
        assert!(ClassFrequencyTable::new(vec![1], -0.1).is_err());
    }

    #[test]
    fn weights_strictly_decrease_in_count() {
        // Strict decrease where beta^n is still representable away from 0;
        // for huge n the weight saturates at (1 - beta) within f64.
        for beta in [0.5, 0.9, 0.97, 0.999] {
            let t = ClassFrequencyTable::new(vec![1, 2, 3, 5, 8, 13], beta).unwrap();
            for c in 1..6 {
                assert!(
                    t.weight(c) < t.weight(c - 1),
                    "beta {beta}: weight not decreasing at {c}"
                );
            }
        }
        let t = ClassFrequencyTable::new(vec![1, 2, 5, 20, 100, 100000], 0.97).unwrap();
        for c in 1..6 {
            assert!(t.weight(c) <= t.weight(c - 1));
        }
        assert!((t.weight(5) - 0.03).abs() < 1e-12);
    }

    #[test]
    fn near_one_beta_approaches_inverse_frequency() {
        let beta = 1.0 - 1e-9;
        let t = ClassFrequencyTable::new(vec![1, 5, 50, 500], beta).unwrap();
        let ns = [1.0f64, 5.0, 50.0, 500.0];
        for i in 0..4 {
            for j in 0..4 {
                let ratio = t.weight(i) / t.weight(j);
                let target = ns[j] / ns[i];
                assert!(
                    (ratio - target).abs() / target < 1e-6,
                    "ratio {ratio} vs {target}"
                );
            }
        }
    }

    #[test]
    fn cb_loss_uniform_logits() {
        // Uniform scores over 4 classes reduce to ln 4 regardless of label.
        let logits = LogitsBatch::new(4, vec![0.0; 8], vec![0, 3]).unwrap();
        let freq = ClassFrequencyTable::new(vec![3, 3, 3, 3], 0.0).unwrap();
        let (loss, grad) = class_balanced_loss(&logits, &freq).unwrap();
        assert!((loss - LN_4).abs() < 1e-12);
        // Gradient rows: (1/4 - onehot)/B.
        assert!((grad[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((grad[1] - 0.25 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cb_loss_weighting() {
        // A singleton class keeps plain cross-entropy weight.
        let logits = LogitsBatch::new(4, vec![0.0; 4], vec![0]).unwrap();
        let freq = ClassFrequencyTable::new(vec![1, 10, 10, 10], 0.97).unwrap();
        let (loss, _) = class_balanced_loss(&logits, &freq).unwrap();
        assert!((loss - LN_4).abs() < 1e-12);

        // A 50-sample class at beta = 0.97 scales by the recomputed weight.
        let freq = ClassFrequencyTable::new(vec![50, 10, 10, 10], 0.97).unwrap();
        let (loss, _) = class_balanced_loss(&logits, &freq).unwrap();
        assert!((loss - 0.03836637879199781 * LN_4).abs() < 1e-12);
    }

    #[test]
    fn cb_loss_rejects_bad_input() {
        let freq = ClassFrequencyTable::new(vec![1, 1], 0.0).unwrap();
        let logits = LogitsBatch::new(2, vec![0.0, 0.0], vec![5]).unwrap();
        assert!(class_balanced_loss(&logits, &freq).is_err());
        let logits = LogitsBatch::new(2, vec![f64::NAN, 0.0], vec![0]).unwrap();
        assert!(class_balanced_loss(&logits, &freq).is_err());
        // Table size mismatch.
        let freq3 = ClassFrequencyTable::new(vec![1, 1, 1], 0.0).unwrap();
        let logits = LogitsBatch::new(2, vec![0.0, 0.0], vec![0]).unwrap();
        assert!(class_balanced_loss(&logits, &freq3).is_err());
    }

    #[test]
    fn cb_loss_shift_invariance() {
        let mut rng = crate::test_rng(11);
        let t = 5;
        let b = 4;
        let scores: Vec<f64> = (0..b * t)
            .map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0))
            .collect();
        let labels = vec![0, 2, 4, 1];
        let freq = ClassFrequencyTable::new(vec![2, 7, 1, 9, 4], 0.9).unwrap();
        let (base, _) = class_balanced_loss(
            &LogitsBatch::new(t, scores.clone(), labels.clone()).unwrap(),
            &freq,
        )
        .unwrap();
        // Add a different constant to each sample's row.
        let mut shifted = scores;
        for i in 0..b {
            for c in 0..t {
                shifted[i * t + c] += (i as f64 + 1.0) * 3.7;
            }
        }
        let (moved, _) =
            class_balanced_loss(&LogitsBatch::new(t, shifted, labels).unwrap(), &freq).unwrap();
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn cb_loss_gradient_matches_finite_differences() {
        let mut rng = crate::test_rng(23);
        let t = 6;
        let b = 5;
        let scores: Vec<f64> = (0..b * t)
            .map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0))
            .collect();
        let labels: Vec<usize> = (0..b)
            .map(|_| rand::Rng::random_range(&mut rng, 0..t))
            .collect();
        let freq = ClassFrequencyTable::new(vec![1, 3, 9, 27, 81, 243], 0.95).unwrap();
        let (_, grad) = class_balanced_loss(
            &LogitsBatch::new(t, scores.clone(), labels.clone()).unwrap(),
            &freq,
        )
        .unwrap();
        let h = 1e-5;
        for idx in 0..b * t {
            let mut plus = scores.clone();
            plus[idx] += h;
            let mut minus = scores.clone();
            minus[idx] -= h;
            let (lp, _) = class_balanced_loss(
                &LogitsBatch::new(t, plus, labels.clone()).unwrap(),
                &freq,
            )
            .unwrap();
            let (lm, _) = class_balanced_loss(
                &LogitsBatch::new(t, minus, labels.clone()).unwrap(),
                &freq,
            )
            .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-6, "idx {idx}: analytic {} vs fd {fd}", grad[idx]);
        }
    }

    fn two_id_batch(offset: f64) -> EmbeddingBatch {
        // ids 0,0,1,1 in 2D.
        EmbeddingBatch::new(
            2,
            vec![0.0, 0.0, 1.0, 0.0, offset, 1.0, offset + 1.0, 1.0],
            vec![0, 0, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn triplet_equal_distances_gives_ln2() {
        // d2(anchor, positive) = d2(anchor, negative) = 1 for every anchor.
        let batch = two_id_batch(0.0);
        let (loss, _) = softmargin_triplet_loss(&batch, 0.0, Mining::BatchHard).unwrap();
        assert!((loss - LN_2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn triplet_far_negative_underflows_to_zero() {
        // Anchor equals its positive; negative at squared distance 100.
        let batch =
            EmbeddingBatch::new(1, vec![0.0, 0.0, 10.0, 10.0], vec![0, 0, 1, 1]).unwrap();
        let (loss, _) = softmargin_triplet_loss(&batch, 0.0, Mining::BatchHard).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-10, "loss {loss}");
        // And a huge positive gap must not overflow.
        let batch = EmbeddingBatch::new(
            1,
            vec![0.0, 40.0, 0.1, 40.1],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let (loss, grad) = softmargin_triplet_loss(&batch, 0.0, Mining::BatchHard).unwrap();
        assert!(loss.is_finite());
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn triplet_single_sample_identity_is_an_error() {
        let batch = EmbeddingBatch::new(1, vec![0.0, 1.0, 2.0], vec![0, 1, 1]).unwrap();
        let err = softmargin_triplet_loss(&batch, 0.0, Mining::BatchHard).unwrap_err();
        assert!(err.to_string().contains("identity 0"), "{err}");
    }

    #[test]
    fn triplet_rotation_invariance() {
        let mut rng = crate::test_rng(31);
        let c = 4;
        let b = 8;
        let embeddings: Vec<f64> = (0..b * c)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        let ids = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let batch = EmbeddingBatch::new(c, embeddings.clone(), ids.clone()).unwrap();
        let (base, _) = softmargin_triplet_loss(&batch, 0.3, Mining::BatchHard).unwrap();

        // Rigid rotation in the (0,1) plane by 0.7 rad.
        let (cos, sin) = (0.7f64.cos(), 0.7f64.sin());
        let mut rotated = embeddings;
        for i in 0..b {
            let x = rotated[i * c];
            let y = rotated[i * c + 1];
            rotated[i * c] = cos * x - sin * y;
            rotated[i * c + 1] = sin * x + cos * y;
        }
        let batch = EmbeddingBatch::new(c, rotated, ids).unwrap();
        let (turned, _) = softmargin_triplet_loss(&batch, 0.3, Mining::BatchHard).unwrap();
        assert!((base - turned).abs() < 1e-10);
    }

    /// Mining selection is locally stable when the hardest positive/negative
    /// margins exceed `gap` for every anchor.
    fn mining_stable(batch: &EmbeddingBatch, gap: f64) -> bool {
        let b = batch.batch_size();
        for a in 0..b {
            let mut pos: Vec<f64> = Vec::new();
            let mut neg: Vec<f64> = Vec::new();
            for j in 0..b {
                if j == a {
                    continue;
                }
                let d = squared_distance(batch.embedding(a), batch.embedding(j));
                if batch.ids[j] == batch.ids[a] {
                    pos.push(d);
                } else {
                    neg.push(d);
                }
            }
            pos.sort_by(|x, y| y.partial_cmp(x).unwrap());
            neg.sort_by(|x, y| x.partial_cmp(y).unwrap());
            if pos.len() > 1 && pos[0] - pos[1] < gap {
                return false;
            }
            if neg.len() > 1 && neg[1] - neg[0] < gap {
                return false;
            }
        }
        true
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let c = 8;
        let ids: Vec<usize> = (0..12).map(|i| i / 3).collect(); // P=4, K=3
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 5 {
            seed += 1;
            let mut rng = crate::test_rng(seed);
            let values: Vec<f64> = (0..12 * c)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect();
            let batch = EmbeddingBatch::new(c, values.clone(), ids.clone()).unwrap();
            if !mining_stable(&batch, 1e-3) {
                continue;
            }
            for mining in [Mining::BatchHard, Mining::AllValid] {
                let (_, grad) = softmargin_triplet_loss(&batch, 0.0, mining).unwrap();
                let h = 1e-5;
                for idx in (0..12 * c).step_by(7) {
                    let mut plus = values.clone();
                    plus[idx] += h;
                    let mut minus = values.clone();
                    minus[idx] -= h;
                    let (lp, _) = softmargin_triplet_loss(
                        &EmbeddingBatch::new(c, plus, ids.clone()).unwrap(),
                        0.0,
                        mining,
                    )
                    .unwrap();
                    let (lm, _) = softmargin_triplet_loss(
                        &EmbeddingBatch::new(c, minus, ids.clone()).unwrap(),
                        0.0,
                        mining,
                    )
                    .unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let rel = (grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs()).max(1e-6);
                    assert!(
                        rel < 1e-5,
                        "seed {seed} idx {idx}: analytic {} vs fd {fd}",
                        grad[idx]
                    );
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn total_loss_is_plain_sum() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.25, 0.75), 2.0);
    }
}
