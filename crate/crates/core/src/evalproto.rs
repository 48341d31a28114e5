//! Exact retrieval evaluation: cosine-distance ranking, average precision,
//! CMC, and the three benchmark split protocols.
//!
//! For every probe the (optionally camera-filtered) gallery is ranked by
//! ascending cosine distance with ties broken by ascending gallery index.
//! `AP = sum_r PR(r) * gt(r) / N_gt` over the full ranked list, mAP is the
//! arithmetic mean over queries with at least one relevant gallery item, and
//! `CMC@a` is the fraction of such queries whose first relevant item appears
//! within the top `a` ranks. Queries left without relevant items (for
//! example after same-camera filtering) are skipped and counted, never
//! silently averaged.
//!
//! Split protocols: a fixed probe/gallery split read from manifest tags, a
//! random one-gallery-image-per-identity split, and a random
//! one-probe-image-per-identity split. Random splits are drawn per trial
//! from ChaCha streams, so a report is a pure function of (seed, data).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{write_feature_map, FeatureMap};
use crate::datasets::{ManifestRecord, Split};
use crate::error::{Error, Result};

/// How probe and gallery sets are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    /// Splits read verbatim from the manifest's split tags.
    FixedSplit,
    /// One random gallery image per identity; the rest become probes.
    RandomGalleryPerId,
    /// One random probe image per identity; the rest become gallery.
    RandomProbePerId,
}

/// A full evaluation protocol: split rule, camera filtering, trial count.
#[derive(Debug, Clone, Copy)]
pub struct EvalProtocol {
    pub kind: ProtocolKind,
    /// Discard gallery items captured by the probe's camera.
    pub same_camera_discard: bool,
    pub trials: usize,
    pub seed: u64,
}

impl EvalProtocol {
    pub fn new(
        kind: ProtocolKind,
        same_camera_discard: bool,
        trials: usize,
        seed: u64,
    ) -> Result<Self> {
        if trials == 0 {
            return Err(Error::invalid("protocol needs at least one trial"));
        }
        if kind == ProtocolKind::FixedSplit && trials != 1 {
            return Err(Error::invalid(
                "a fixed split is deterministic; trials must be 1",
            ));
        }
        Ok(EvalProtocol {
            kind,
            same_camera_discard,
            trials,
            seed,
        })
    }

    /// Fixed split with same-camera discard, single trial.
    pub fn veri(seed: u64) -> Self {
        EvalProtocol {
            kind: ProtocolKind::FixedSplit,
            same_camera_discard: true,
            trials: 1,
            seed,
        }
    }

    /// Random gallery image per identity, averaged over `trials`.
    pub fn vehicleid(trials: usize, seed: u64) -> Result<Self> {
        Self::new(ProtocolKind::RandomGalleryPerId, false, trials, seed)
    }

    /// Random probe image per identity, averaged over `trials`.
    pub fn veriwild(trials: usize, seed: u64) -> Result<Self> {
        Self::new(ProtocolKind::RandomProbePerId, false, trials, seed)
    }

    /// Fixed split, no camera filtering.
    pub fn fixed(seed: u64) -> Self {
        EvalProtocol {
            kind: ProtocolKind::FixedSplit,
            same_camera_discard: false,
            trials: 1,
            seed,
        }
    }
}

/// One probe's ranking over its (filtered) gallery.
#[derive(Debug, Clone)]
pub struct RankedList {
    /// Record index of the probe.
    pub query: usize,
    /// Gallery entries ordered by ascending cosine distance; each entry is a
    /// position into the filtered gallery handed to [`cosine_rank`].
    pub ranked: Vec<usize>,
    /// Relevance bit per ranked position.
    pub relevance: Vec<bool>,
}

impl RankedList {
    /// Number of relevant gallery items.
    pub fn num_relevant(&self) -> usize {
        self.relevance.iter().filter(|&&r| r).count()
    }

    /// 1-based rank of the first relevant item, if any.
    pub fn first_relevant_rank(&self) -> Option<usize> {
        self.relevance.iter().position(|&r| r).map(|p| p + 1)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine distance `1 - (a.b)/(|a||b|)`; caller guarantees nonzero norms.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot / (norm(a) * norm(b))
}

/// Ranks gallery vectors by ascending cosine distance to the query; ties
/// break by ascending gallery index.
pub fn cosine_rank(query: &[f64], gallery: &[&[f64]]) -> Result<Vec<usize>> {
    if norm(query) == 0.0 {
        return Err(Error::invalid("query embedding has zero norm"));
    }
    for (i, g) in gallery.iter().enumerate() {
        if norm(g) == 0.0 {
            return Err(Error::invalid(format!(
                "gallery item {i} has zero norm"
            )));
        }
    }
    let mut order: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (cosine_distance(query, g), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().map(|(_, i)| i).collect())
}

/// Average precision over the full ranked list.
pub fn average_precision(list: &RankedList) -> Result<f64> {
    let n_gt = list.num_relevant();
    if n_gt == 0 {
        return Err(Error::Protocol(format!(
            "query {} has no relevant gallery item",
            list.query
        )));
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (pos, &rel) in list.relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(acc / n_gt as f64)
}

/// Mean AP over queries that have at least one relevant item.
pub fn mean_ap(lists: &[RankedList]) -> Result<f64> {
    let aps: Vec<f64> = lists
        .iter()
        .filter(|l| l.num_relevant() > 0)
        .map(average_precision)
        .collect::<Result<_>>()?;
    if aps.is_empty() {
        return Err(Error::Protocol(
            "no query has a relevant gallery item".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Fraction of (unskipped) queries whose first relevant item ranks within
/// the top `alpha`.
pub fn cmc(lists: &[RankedList], alpha: usize) -> Result<f64> {
    if alpha == 0 {
        return Err(Error::invalid("cmc rank must be at least 1"));
    }
    let mut total = 0usize;
    let mut hit = 0usize;
    for list in lists {
        if list.num_relevant() == 0 {
            continue;
        }
        total += 1;
        if list.first_relevant_rank().expect("relevant item present") <= alpha {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::Protocol(
            "no query has a relevant gallery item".into(),
        ));
    }
    Ok(hit as f64 / total as f64)
}

/// Probe/gallery assignment for one trial, as indices into the record slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub probe: Vec<usize>,
    pub gallery: Vec<usize>,
    /// Identities dropped because a random split needs at least 2 samples.
    pub excluded_identities: usize,
}

/// Builds probe and gallery sets for `trial` under the protocol.
pub fn build_protocol_splits(
    records: &[ManifestRecord],
    proto: &EvalProtocol,
    trial: usize,
) -> Result<SplitAssignment> {
    if trial >= proto.trials {
        return Err(Error::invalid(format!(
            "trial {trial} out of range for {} trials",
            proto.trials
        )));
    }
    match proto.kind {
        ProtocolKind::FixedSplit => {
            let probe: Vec<usize> = (0..records.len())
                .filter(|&i| records[i].split == Some(Split::Probe))
                .collect();
            let gallery: Vec<usize> = (0..records.len())
                .filter(|&i| records[i].split == Some(Split::Gallery))
                .collect();
            if probe.is_empty() || gallery.is_empty() {
                return Err(Error::Protocol(
                    "fixed split needs records tagged probe and gallery".into(),
                ));
            }
            Ok(SplitAssignment {
                probe,
                gallery,
                excluded_identities: 0,
            })
        }
        ProtocolKind::RandomGalleryPerId | ProtocolKind::RandomProbePerId => {
            let mut by_label = std::collections::BTreeMap::<usize, Vec<usize>>::new();
            for (i, r) in records.iter().enumerate() {
                by_label.entry(r.label).or_default().push(i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(proto.seed);
            rng.set_stream(trial as u64);
            let mut probe = Vec::new();
            let mut gallery = Vec::new();
            let mut excluded = 0usize;
            for (_, samples) in by_label {
                if samples.len() < 2 {
                    excluded += 1;
                    continue;
                }
                let pick = samples[rng.random_range(0..samples.len())];
                for &s in &samples {
                    let singled_out = s == pick;
                    match (proto.kind, singled_out) {
                        (ProtocolKind::RandomGalleryPerId, true) => gallery.push(s),
                        (ProtocolKind::RandomGalleryPerId, false) => probe.push(s),
                        (ProtocolKind::RandomProbePerId, true) => probe.push(s),
                        (ProtocolKind::RandomProbePerId, false) => gallery.push(s),
                        (ProtocolKind::FixedSplit, _) => unreachable!(),
                    }
                }
            }
            if probe.is_empty() || gallery.is_empty() {
                return Err(Error::Protocol(
                    "random split left an empty probe or gallery set".into(),
                ));
            }
            probe.sort_unstable();
            gallery.sort_unstable();
            Ok(SplitAssignment {
                probe,
                gallery,
                excluded_identities: excluded,
            })
        }
    }
}

/// Metrics of a single trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialMetrics {
    pub mean_ap: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub skipped_queries: usize,
}

/// Per-trial metrics plus their arithmetic average.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub trials: Vec<TrialMetrics>,
}

impl EvalReport {
    pub fn averaged(&self) -> TrialMetrics {
        let n = self.trials.len() as f64;
        TrialMetrics {
            mean_ap: self.trials.iter().map(|t| t.mean_ap).sum::<f64>() / n,
            cmc1: self.trials.iter().map(|t| t.cmc1).sum::<f64>() / n,
            cmc5: self.trials.iter().map(|t| t.cmc5).sum::<f64>() / n,
            skipped_queries: self.trials.iter().map(|t| t.skipped_queries).sum(),
        }
    }

    /// CSV with one row per trial and a final averaged row.
    pub fn to_csv(&self, protocol: &str) -> String {
        let mut out = String::from("protocol,trial,map,cmc1,cmc5,skipped\n");
        for (i, t) in self.trials.iter().enumerate() {
            out.push_str(&format!(
                "{protocol},{},{:.6},{:.6},{:.6},{}\n",
                i + 1,
                t.mean_ap,
                t.cmc1,
                t.cmc5,
                t.skipped_queries
            ));
        }
        let avg = self.averaged();
        out.push_str(&format!(
            "{protocol},avg,{:.6},{:.6},{:.6},{}\n",
            avg.mean_ap, avg.cmc1, avg.cmc5, avg.skipped_queries
        ));
        out
    }
}

/// Dumps embeddings as consecutive feature records of shape `c x 1 x 1`.
pub fn write_embedding_dump<W: Write>(embeddings: &[Vec<f64>], out: &mut W) -> Result<()> {
    for e in embeddings {
        let map = FeatureMap::from_values(e.len(), 1, 1, e.clone())?;
        write_feature_map(&map, out)?;
    }
    Ok(())
}

/// Ranks one probe against a gallery subset and records relevance bits.
fn rank_query(
    records: &[ManifestRecord],
    embeddings: &[Vec<f64>],
    probe: usize,
    gallery: &[usize],
) -> Result<RankedList> {
    let refs: Vec<&[f64]> = gallery.iter().map(|&g| embeddings[g].as_slice()).collect();
    let order = cosine_rank(&embeddings[probe], &refs).map_err(|e| {
        Error::invalid(format!("query {}: {e}", records[probe].id))
    })?;
    let relevance = order
        .iter()
        .map(|&pos| records[gallery[pos]].label == records[probe].label)
        .collect();
    Ok(RankedList {
        query: probe,
        ranked: order,
        relevance,
    })
}

/// Runs the full protocol: splits per trial, per-query ranking with optional
/// same-camera filtering, AP/CMC reduction in ascending query order.
pub fn evaluate(
    records: &[ManifestRecord],
    embeddings: &[Vec<f64>],
    proto: &EvalProtocol,
) -> Result<EvalReport> {
    if records.len() != embeddings.len() {
        return Err(Error::invalid(format!(
            "{} records but {} embeddings",
            records.len(),
            embeddings.len()
        )));
    }
    let mut trials = Vec::with_capacity(proto.trials);
    for trial in 0..proto.trials {
        let split = build_protocol_splits(records, proto, trial)?;
        let mut lists = Vec::new();
        let mut skipped = 0usize;
        for &q in &split.probe {
            let gallery: Vec<usize> = if proto.same_camera_discard {
                split
                    .gallery
                    .iter()
                    .copied()
                    .filter(|&g| records[g].cam != records[q].cam)
                    .collect()
            } else {
                split.gallery.clone()
            };
            let has_match = gallery
                .iter()
                .any(|&g| records[g].label == records[q].label);
            if !has_match {
                skipped += 1;
                continue;
            }
            lists.push(rank_query(records, embeddings, q, &gallery)?);
        }
        if lists.is_empty() {
            return Err(Error::Protocol(format!(
                "trial {trial}: every query was skipped"
            )));
        }
        trials.push(TrialMetrics {
            mean_ap: mean_ap(&lists)?,
            cmc1: cmc(&lists, 1)?,
            cmc5: cmc(&lists, 5)?,
            skipped_queries: skipped,
        });
    }
    Ok(EvalReport { trials })
}
