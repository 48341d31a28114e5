//! Random-identity P×K batch sampling.
//!
//! Every batch holds exactly P distinct identities with K instances each.
//! Identities are drawn uniformly without replacement per batch, arranged so
//! that every identity appears at least once within each epoch-aligned window
//! of `ceil(num_ids / P)` batches. Identities with fewer than K samples are
//! topped up by drawing with replacement (each available sample still appears
//! at least once).
//!
//! Batches are a pure function of `(seed, batch index)`: all randomness comes
//! from ChaCha streams derived from the batch position, so prefetching or
//! re-running any batch reproduces it bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// P×K sampling parameters.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Identities per batch (P).
    pub identities_per_batch: usize,
    /// Instances per identity (K).
    pub instances_per_identity: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            identities_per_batch: 8,
            instances_per_identity: 6,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.instances_per_identity
    }
}

/// Deterministic P×K sampler over a labeled sample list.
#[derive(Debug, Clone)]
pub struct IdentitySampler {
    cfg: SamplerConfig,
    /// Sample indices per identity, sorted by label then by index.
    groups: Vec<Vec<usize>>,
    total_samples: usize,
}

impl IdentitySampler {
    /// Groups `labels[i]` (the identity of sample `i`) by identity.
    pub fn new(labels: &[usize], cfg: SamplerConfig) -> Result<Self> {
        if cfg.identities_per_batch < 2 || cfg.instances_per_identity < 2 {
            return Err(Error::config(format!(
                "P and K must both be at least 2, got P={} K={}",
                cfg.identities_per_batch, cfg.instances_per_identity
            )));
        }
        let mut by_label = std::collections::BTreeMap::<usize, Vec<usize>>::new();
        for (i, &y) in labels.iter().enumerate() {
            by_label.entry(y).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = by_label.into_values().collect();
        if groups.len() < cfg.identities_per_batch {
            return Err(Error::config(format!(
                "manifest has {} identities but the sampler needs at least P={}",
                groups.len(),
                cfg.identities_per_batch
            )));
        }
        Ok(IdentitySampler {
            cfg,
            groups,
            total_samples: labels.len(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    /// Batches per epoch: `floor(total_samples / (P*K))`.
    pub fn batches_per_epoch(&self) -> usize {
        self.total_samples / self.cfg.batch_size()
    }

    /// Batches needed to cycle once through all identities.
    pub fn round_len(&self) -> usize {
        self.groups.len().div_ceil(self.cfg.identities_per_batch)
    }

    fn stream_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        rng
    }

    /// Identity sequence for one round inside an epoch: a fresh permutation
    /// of all identities, padded to a multiple of P with extra identities
    /// drawn from outside the permutation tail so every chunk stays distinct.
    fn round_identity_seq(&self, epoch: u64, round: u64) -> Vec<usize> {
        let p = self.cfg.identities_per_batch;
        let n = self.groups.len();
        let mut rng = self.stream_rng((epoch << 20) | round);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let rem = n % p;
        if rem != 0 {
            let pad = p - rem;
            let head = n - rem;
            let picks = rand::seq::index::sample(&mut rng, head, pad);
            let extra: Vec<usize> = picks.iter().map(|pos| perm[pos]).collect();
            perm.extend(extra);
        }
        perm
    }

    /// The `batch_index`-th batch: P·K sample indices, grouped by identity.
    pub fn batch(&self, batch_index: u64) -> Vec<usize> {
        let p = self.cfg.identities_per_batch;
        let k = self.cfg.instances_per_identity;
        let epoch_len = self.batches_per_epoch().max(1) as u64;
        let round_len = self.round_len() as u64;

        let epoch = batch_index / epoch_len;
        let in_epoch = batch_index % epoch_len;
        let seq = self.round_identity_seq(epoch, in_epoch / round_len);
        let pos = (in_epoch % round_len) as usize;
        let chosen = &seq[pos * p..(pos + 1) * p];

        let mut rng = self.stream_rng((1 << 63) | batch_index);
        let mut out = Vec::with_capacity(p * k);
        for &ident in chosen {
            let samples = &self.groups[ident];
            if samples.len() >= k {
                let picks = rand::seq::index::sample(&mut rng, samples.len(), k);
                out.extend(picks.iter().map(|pos| samples[pos]));
            } else {
                // Keep every available sample once, then top up with
                // replacement.
                out.extend_from_slice(samples);
                for _ in samples.len()..k {
                    out.push(samples[rng.random_range(0..samples.len())]);
                }
            }
        }
        out
    }
}
