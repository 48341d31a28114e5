//! Manifest I/O, synthetic dataset generation, and payload loading.
//!
//! A manifest is JSON-lines: one record per line with fields `id`, `label`,
//! `cam`, optional `split` (`train` / `probe` / `gallery`), and `payload`.
//! On load, identity labels are remapped to a contiguous `0..T` range; the
//! mapping back to the original labels is kept on the manifest.
//!
//! Payload locators take three forms, resolved relative to the manifest's
//! directory: `file@offset` (a feature record inside a blob file), a `.lgaf`
//! file (one feature record), or a `.ppm` image.
//!
//! The synthetic generator produces either feature-map payloads (prototype
//! per identity plus Gaussian noise and occasional occluded nodes) or small
//! clutter images with an identity-colored rectangle. Long-tailed identity
//! counts use a Zipf draw so the class-imbalance behavior of the real
//! benchmarks is reproducible at desk scale.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::aggregate::{read_feature_map, write_feature_map, FeatureMap};
use crate::error::{Error, Result};

/// Role of a sample in the benchmark protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Probe,
    Gallery,
}

/// One manifest entry after label remapping.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    /// Contiguous identity index in `0..num_identities`.
    pub label: usize,
    pub cam: u32,
    pub split: Option<Split>,
    pub payload: String,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    label: i64,
    cam: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    payload: String,
}

/// A validated, label-remapped sample list.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Original label for each contiguous index (sorted ascending).
    pub label_map: Vec<i64>,
}

impl Manifest {
    /// Builds a manifest from raw-labeled records, remapping labels.
    fn from_raw(raw: Vec<RawRecord>) -> Result<Self> {
        let mut labels: Vec<i64> = raw.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        let index: BTreeMap<i64, usize> =
            labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let records = raw
            .into_iter()
            .map(|r| ManifestRecord {
                label: index[&r.label],
                id: r.id,
                cam: r.cam,
                split: r.split,
                payload: r.payload,
            })
            .collect();
        Ok(Manifest {
            records,
            label_map: labels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of distinct identities across all splits.
    pub fn num_identities(&self) -> usize {
        self.label_map.len()
    }

    /// Indices of records tagged `train`.
    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_with(|s| s == Some(Split::Train))
    }

    /// Indices of records tagged `probe` or `gallery`.
    pub fn eval_indices(&self) -> Vec<usize> {
        self.indices_with(|s| matches!(s, Some(Split::Probe) | Some(Split::Gallery)))
    }

    fn indices_with(&self, pred: impl Fn(Option<Split>) -> bool) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| pred(r.split).then_some(i))
            .collect()
    }

    /// Writes JSON lines with the original (pre-remap) labels.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for r in &self.records {
            let raw = RawRecord {
                id: r.id.clone(),
                label: self.label_map[r.label],
                cam: r.cam,
                split: r.split,
                payload: r.payload.clone(),
            };
            serde_json::to_writer(&mut out, &raw)
                .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Parses and validates a JSON-lines manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut raw = Vec::new();
    let mut seen_ids = BTreeMap::<String, usize>::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if let Some(&first) = seen_ids.get(&record.id) {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "duplicate sample id {:?} (first seen at line {first})",
                    record.id
                ),
            });
        }
        seen_ids.insert(record.id.clone(), lineno);
        raw.push(record);
    }
    if raw.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} holds no records",
            path.display()
        )));
    }
    Manifest::from_raw(raw)
}

/// A 3-channel image, channel-major with row-major pixels, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn pixel(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.data[ch * self.width * self.height + row * self.width + col]
    }

    pub fn set_pixel(&mut self, ch: usize, row: usize, col: usize, v: f64) {
        self.data[ch * self.width * self.height + row * self.width + col] = v;
    }
}

/// Writes an uncompressed binary PPM (P6, maxval 255).
pub fn write_ppm<W: Write>(img: &RgbImage, out: &mut W) -> std::io::Result<()> {
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    let plane = img.width * img.height;
    let mut row = Vec::with_capacity(3 * plane);
    for px in 0..plane {
        for ch in 0..3 {
            let v = (img.data[ch * plane + px].clamp(0.0, 1.0) * 255.0).round() as u8;
            row.push(v);
        }
    }
    out.write_all(&row)
}

/// Reads a binary PPM written by [`write_ppm`].
pub fn read_ppm<R: Read>(input: &mut R) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let header_err = |msg: &str| Error::Data(format!("ppm: {msg}"));
    if !bytes.starts_with(b"P6") {
        return Err(header_err("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(header_err("truncated header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| header_err("non-ascii header"))?;
        fields.push(
            token
                .parse::<usize>()
                .map_err(|_| header_err("non-numeric header field"))?,
        );
    }
    pos += 1; // single whitespace byte after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(header_err("only maxval 255 supported"));
    }
    let plane = w * h;
    if bytes.len() < pos + 3 * plane {
        return Err(header_err("truncated pixel data"));
    }
    let mut img = RgbImage::zeros(w, h);
    for px in 0..plane {
        for ch in 0..3 {
            img.data[ch * plane + px] = bytes[pos + px * 3 + ch] as f64 / 255.0;
        }
    }
    Ok(img)
}

/// In-memory payload of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum PayloadData {
    Features(FeatureMap),
    Image(RgbImage),
}

/// A manifest together with its loaded payloads (index-aligned).
#[derive(Debug, Clone)]
pub struct DataSet {
    pub manifest: Manifest,
    pub payloads: Vec<PayloadData>,
}

/// Per-identity sample-count model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CountDistribution {
    /// Every identity gets the same number of training samples.
    Uniform { per_identity: usize },
    /// Long-tailed counts: `1 + Zipf(exponent)` truncated at `max_count`.
    Zipf { exponent: f64, max_count: usize },
}

/// What kind of payload the generator emits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PayloadKind {
    Features {
        channels: usize,
        width: usize,
        height: usize,
    },
    Images {
        width: usize,
        height: usize,
    },
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub counts: CountDistribution,
    pub payload: PayloadKind,
    /// Per-cell Gaussian noise added to the identity prototype.
    pub noise_sigma: f64,
    /// Scale of the prototype values; larger separates identities more.
    pub separation: f64,
    pub cameras: usize,
    /// Evaluation samples per identity (1 gallery + rest probes); 0 for a
    /// train-only manifest.
    pub test_per_identity: usize,
    /// Per-cell chance that a feature value is knocked out by a large
    /// negative spike (sparse occlusion-style corruption).
    pub occlusion_probability: f64,
    /// Spike amplitude as a multiple of `separation`.
    pub occlusion_strength: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The desk-scale reference configuration used by the directional
    /// training studies: 50 long-tailed identities over 32x(4x4) features.
    pub fn reference() -> Self {
        SyntheticSpec {
            identities: 50,
            counts: CountDistribution::Zipf {
                exponent: 1.2,
                max_count: 60,
            },
            payload: PayloadKind::Features {
                channels: 32,
                width: 4,
                height: 4,
            },
            noise_sigma: 0.08,
            separation: 1.0,
            cameras: 4,
            test_per_identity: 10,
            occlusion_probability: 0.06,
            occlusion_strength: 12.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.identities == 0 {
            return Err(Error::invalid("synthetic spec needs at least one identity"));
        }
        if self.cameras == 0 {
            return Err(Error::invalid("synthetic spec needs at least one camera"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be nonnegative"));
        }
        if !(self.separation > 0.0) {
            return Err(Error::invalid("separation must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err(Error::invalid("occlusion probability must lie in [0, 1]"));
        }
        match self.counts {
            CountDistribution::Uniform { per_identity } if per_identity == 0 => {
                Err(Error::invalid("per-identity count must be at least 1"))
            }
            CountDistribution::Zipf { exponent, max_count } => {
                if !(exponent > 0.0) || max_count < 1 {
                    Err(Error::invalid("zipf needs exponent > 0 and max_count >= 1"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Deterministically generates a synthetic dataset in memory.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DataSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let counts: Vec<usize> = match spec.counts {
        CountDistribution::Uniform { per_identity } => vec![per_identity; spec.identities],
        CountDistribution::Zipf { exponent, max_count } => {
            let zipf = rand_distr::Zipf::new(max_count as f64, exponent)
                .map_err(|e| Error::invalid(format!("zipf: {e}")))?;
            (0..spec.identities)
                .map(|_| 1 + (zipf.sample(&mut rng) as usize).clamp(1, max_count))
                .collect()
        }
    };

    let profile = shared_profile(spec, &mut rng);
    // The low-count half of the identities forms the rare family.
    let mut count_order: Vec<usize> = (0..spec.identities).collect();
    count_order.sort_by_key(|&i| (counts[i], i));
    let mut rare_family = vec![false; spec.identities];
    for &i in &count_order[..spec.identities / 2] {
        rare_family[i] = true;
    }

    let mut raw = Vec::new();
    let mut payloads = Vec::new();
    let mut sample_seq = 0usize;
    for identity in 0..spec.identities {
        let prototype = identity_prototype(spec, &profile, rare_family[identity], &mut rng);
        let total = counts[identity] + spec.test_per_identity;
        for s in 0..total {
            let split = if s < counts[identity] {
                Split::Train
            } else if s == counts[identity] {
                Split::Gallery
            } else {
                Split::Probe
            };
            raw.push(RawRecord {
                id: format!("s{sample_seq:05}"),
                label: identity as i64,
                cam: (s % spec.cameras) as u32,
                split: Some(split),
                payload: String::new(),
            });
            payloads.push(render_sample(spec, &profile, &prototype, &mut rng)?);
            sample_seq += 1;
        }
    }
    Ok(DataSet {
        manifest: Manifest::from_raw(raw)?,
        payloads,
    })
}

/// Identity-level parameters: flat per-channel levels for feature payloads,
/// or (color, position, size) for image payloads.
enum Prototype {
    Features(Vec<f64>),
    Image {
        color: [f64; 3],
        center: (f64, f64),
        size: f64,
    },
}

/// Channel statistics shared by every identity: a common activation level
/// plus how much identities spread around it and how noisy the channel is.
/// Channels deliberately differ in identity-information content, the way
/// backbone features range from generic to discriminative.
struct ChannelProfile {
    base: Vec<f64>,
    id_spread: Vec<f64>,
    noise_scale: Vec<f64>,
}

/// Scale of an identity's variation in channels belonging to the other
/// frequency family. Rare vehicle types differ from each other in features
/// that common vehicles barely vary in, and vice versa; this couples sample
/// frequency to which channel group carries the identity signal.
const OFF_FAMILY_SPREAD: f64 = 0.05;

fn shared_profile(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> ChannelProfile {
    match spec.payload {
        PayloadKind::Features { channels, .. } => ChannelProfile {
            base: (0..channels).map(|_| rng.random_range(0.4..1.0)).collect(),
            id_spread: (0..channels).map(|_| rng.random_range(0.15..0.4)).collect(),
            noise_scale: (0..channels).map(|_| rng.random_range(0.5..1.5)).collect(),
        },
        PayloadKind::Images { .. } => ChannelProfile {
            base: Vec::new(),
            id_spread: Vec::new(),
            noise_scale: Vec::new(),
        },
    }
}

/// The first half of the channels carries the common-family identity
/// variation, the second half the rare-family variation.
fn channel_serves_rare_family(ch: usize, channels: usize) -> bool {
    2 * ch >= channels
}

fn identity_prototype(
    spec: &SyntheticSpec,
    profile: &ChannelProfile,
    rare_family: bool,
    rng: &mut ChaCha8Rng,
) -> Prototype {
    match spec.payload {
        PayloadKind::Features { channels, .. } => Prototype::Features(
            (0..channels)
                .map(|ch| {
                    let mut spread = profile.id_spread[ch];
                    if channel_serves_rare_family(ch, channels) != rare_family {
                        spread *= OFF_FAMILY_SPREAD;
                    }
                    let offset = if spread > 0.0 {
                        rng.random_range(-spread..spread)
                    } else {
                        0.0
                    };
                    spec.separation * (profile.base[ch] + offset)
                })
                .collect(),
        ),
        PayloadKind::Images { .. } => Prototype::Image {
            color: [
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
            ],
            center: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
            size: rng.random_range(0.3..0.5),
        },
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        rand_distr::Normal::new(0.0, sigma)
            .expect("validated sigma")
            .sample(rng)
    } else {
        0.0
    }
}

fn render_sample(
    spec: &SyntheticSpec,
    profile: &ChannelProfile,
    prototype: &Prototype,
    rng: &mut ChaCha8Rng,
) -> Result<PayloadData> {
    match (spec.payload, prototype) {
        (PayloadKind::Features { channels, width, height }, Prototype::Features(levels)) => {
            let nodes = width * height;
            let mut values = vec![0.0f64; channels * nodes];
            for ch in 0..channels {
                let sigma = spec.noise_sigma * profile.noise_scale[ch];
                for node in 0..nodes {
                    let mut v = levels[ch] + gaussian(rng, sigma);
                    // Sparse activation knockout: a cell occasionally loses
                    // its response under a large negative spike.
                    if spec.occlusion_probability > 0.0
                        && rng.random::<f64>() < spec.occlusion_probability
                    {
                        v -= spec.occlusion_strength
                            * spec.separation
                            * rng.random_range(1.0..2.0);
                    }
                    values[ch * nodes + node] = v;
                }
            }
            Ok(PayloadData::Features(FeatureMap::from_values(
                channels, width, height, values,
            )?))
        }
        (PayloadKind::Images { width, height }, Prototype::Image { color, center, size }) => {
            let mut img = RgbImage::zeros(width, height);
            for v in &mut img.data {
                *v = rng.random_range(0.0..0.5);
            }
            // Identity rectangle with a small per-sample position jitter.
            let jitter = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
            let cx = ((center.0 + jitter.0) * width as f64) as isize;
            let cy = ((center.1 + jitter.1) * height as f64) as isize;
            let half_w = ((size * width as f64) / 2.0).max(1.0) as isize;
            let half_h = ((size * height as f64) / 2.0).max(1.0) as isize;
            for row in (cy - half_h).max(0)..(cy + half_h).min(height as isize) {
                for col in (cx - half_w).max(0)..(cx + half_w).min(width as isize) {
                    for ch in 0..3 {
                        let noisy = color[ch] + gaussian(rng, spec.noise_sigma);
                        img.set_pixel(ch, row as usize, col as usize, noisy.clamp(0.0, 1.0));
                    }
                }
            }
            Ok(PayloadData::Image(img))
        }
        _ => unreachable!("prototype kind always matches payload kind"),
    }
}

impl DataSet {
    /// Writes the payload store and manifest under `dir`; returns the
    /// manifest path. Feature payloads share one blob file addressed by
    /// `features.bin@offset` locators; images become one PPM file each.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = self.manifest.clone();
        let any_features = self
            .payloads
            .iter()
            .any(|p| matches!(p, PayloadData::Features(_)));
        let mut blob = if any_features {
            Some(BufWriter::new(File::create(dir.join("features.bin"))?))
        } else {
            None
        };
        let mut offset = 0u64;
        for (i, payload) in self.payloads.iter().enumerate() {
            match payload {
                PayloadData::Features(map) => {
                    let out = blob.as_mut().expect("blob file open");
                    manifest.records[i].payload = format!("features.bin@{offset}");
                    write_feature_map(map, out)?;
                    offset += 16 + 4 * (map.channels() * map.nodes()) as u64;
                }
                PayloadData::Image(img) => {
                    let name = format!("img{i:05}.ppm");
                    let mut f = BufWriter::new(File::create(dir.join(&name))?);
                    write_ppm(img, &mut f)?;
                    f.flush()?;
                    manifest.records[i].payload = name;
                }
            }
        }
        if let Some(mut b) = blob {
            b.flush()?;
        }
        let manifest_path = dir.join("manifest.jsonl");
        manifest.save(&manifest_path)?;
        Ok(manifest_path)
    }
}

/// Loads a manifest and every payload it references.
pub fn load_dataset(manifest_path: &Path) -> Result<DataSet> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut handles: BTreeMap<String, File> = BTreeMap::new();
    let mut payloads = Vec::with_capacity(manifest.len());
    for record in &manifest.records {
        payloads.push(load_payload(base, &record.payload, &mut handles)?);
    }
    Ok(DataSet { manifest, payloads })
}

fn load_payload(
    base: &Path,
    locator: &str,
    handles: &mut BTreeMap<String, File>,
) -> Result<PayloadData> {
    if let Some((file, off)) = locator.rsplit_once('@') {
        let offset: u64 = off.parse().map_err(|_| {
            Error::Data(format!("bad blob offset in payload locator {locator:?}"))
        })?;
        if !handles.contains_key(file) {
            handles.insert(file.to_string(), File::open(base.join(file))?);
        }
        let handle = handles.get_mut(file).expect("inserted above");
        handle.seek(SeekFrom::Start(offset))?;
        return Ok(PayloadData::Features(read_feature_map(handle)?));
    }
    let path = base.join(locator);
    match path.extension().and_then(|e| e.to_str()) {
        Some("lgaf") => {
            let mut f = File::open(&path)?;
            Ok(PayloadData::Features(read_feature_map(&mut f)?))
        }
        Some("ppm") => {
            let mut f = File::open(&path)?;
            Ok(PayloadData::Image(read_ppm(&mut f)?))
        }
        _ => Err(Error::Data(format!(
            "payload locator {locator:?} is neither a blob reference nor a known file type"
        ))),
    }
}
