//! Run configuration: built-in defaults, overlaid by a plain-text key-value
//! config file, overlaid by command-line flags. The fully resolved
//! configuration is echoed into the run directory before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use reid_core::datasets::{CountDistribution, PayloadKind, SyntheticSpec};
use reid_core::losses::Mining;
use reid_core::pipeline::{Aggregation, BackboneKind, ModelConfig, TrainSchedule};
use reid_core::{Error, Result};

/// Evaluation protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProtocolName {
    /// Fixed split with same-camera gallery discard.
    Veri,
    /// Random gallery image per identity, multi-trial.
    Vehicleid,
    /// Random probe image per identity, multi-trial.
    Veriwild,
    /// Fixed split, no camera filtering.
    Fixed,
}

impl ProtocolName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProtocolName::Veri => "veri",
            ProtocolName::Vehicleid => "vehicleid",
            ProtocolName::Veriwild => "veriwild",
            ProtocolName::Fixed => "fixed",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "veri" => Ok(ProtocolName::Veri),
            "vehicleid" => Ok(ProtocolName::Vehicleid),
            "veriwild" => Ok(ProtocolName::Veriwild),
            "fixed" => Ok(ProtocolName::Fixed),
            other => Err(Error::config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// Synthetic-data settings from the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSettings {
    pub identities: usize,
    pub counts: String,
    pub per_identity: usize,
    pub zipf_exponent: f64,
    pub zipf_max: usize,
    pub payload: String,
    pub channels: usize,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
    pub sigma: f64,
    pub separation: f64,
    pub cameras: usize,
    pub test_per_identity: usize,
    pub occlusion_p: f64,
    pub occlusion_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        SyntheticSettings {
            identities: 50,
            counts: "zipf".into(),
            per_identity: 6,
            zipf_exponent: 1.2,
            zipf_max: 60,
            payload: "features".into(),
            channels: 32,
            grid: (4, 4),
            image_size: (64, 64),
            sigma: 0.08,
            separation: 1.0,
            cameras: 4,
            test_per_identity: 10,
            occlusion_p: 0.06,
            occlusion_strength: 12.0,
            seed: 0,
        }
    }
}

impl SyntheticSettings {
    pub fn to_spec(&self) -> Result<SyntheticSpec> {
        let counts = match self.counts.as_str() {
            "uniform" => CountDistribution::Uniform {
                per_identity: self.per_identity,
            },
            "zipf" => CountDistribution::Zipf {
                exponent: self.zipf_exponent,
                max_count: self.zipf_max,
            },
            other => {
                return Err(Error::config(format!(
                    "synthetic.counts must be uniform or zipf, got {other:?}"
                )))
            }
        };
        let payload = match self.payload.as_str() {
            "features" => PayloadKind::Features {
                channels: self.channels,
                width: self.grid.0,
                height: self.grid.1,
            },
            "images" => PayloadKind::Images {
                width: self.image_size.0,
                height: self.image_size.1,
            },
            other => {
                return Err(Error::config(format!(
                    "synthetic.payload must be features or images, got {other:?}"
                )))
            }
        };
        Ok(SyntheticSpec {
            identities: self.identities,
            counts,
            payload,
            noise_sigma: self.sigma,
            separation: self.separation,
            cameras: self.cameras,
            test_per_identity: self.test_per_identity,
            occlusion_probability: self.occlusion_p,
            occlusion_strength: self.occlusion_strength,
            seed: self.seed,
        })
    }
}

/// Every knob of a run, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_p: usize,
    pub batch_k: usize,

    pub backbone: BackboneKind,
    pub channels: usize,
    pub grid: (usize, usize),
    pub lga_depth: usize,
    pub aggregation: Aggregation,
    pub bn_neck: bool,
    pub input_size: (usize, usize),
    pub conv_blocks: usize,
    pub flip_p: f64,
    pub erase_p: f64,
    pub radius: f64,
    pub lap_relu: bool,
    pub retrieval_post_bn: bool,

    pub beta: f64,
    pub margin: f64,
    pub mining: Mining,
    pub lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,

    pub protocol: ProtocolName,
    pub trials: usize,

    pub ablation: Option<String>,
    pub synthetic: Option<SyntheticSettings>,

    pub bench_grids: Vec<usize>,
    pub bench_depths: Vec<usize>,
    pub bench_channels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            manifest: None,
            out: None,
            seed: 0,
            epochs: 120,
            batch_p: 8,
            batch_k: 6,
            backbone: m.backbone,
            channels: m.channels,
            grid: m.grid,
            lga_depth: m.lga_depth,
            aggregation: m.aggregation,
            bn_neck: m.bn_neck,
            input_size: m.input_size,
            conv_blocks: m.conv_blocks,
            flip_p: m.flip_probability,
            erase_p: m.erase_probability,
            radius: m.radius,
            lap_relu: m.lap_relu,
            retrieval_post_bn: m.retrieval_post_bn,
            beta: 0.97,
            margin: 0.0,
            mining: Mining::BatchHard,
            lr_multiplier: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
            protocol: ProtocolName::Vehicleid,
            trials: 5,
            ablation: None,
            synthetic: None,
            bench_grids: vec![8, 20, 40, 80],
            bench_depths: vec![1, 2, 3, 4, 5],
            bench_channels: 4,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("bad value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!(
            "bad boolean {value:?} for key {key:?}"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|t| parse_as::<usize>(key, t.trim()))
        .collect()
}

impl RunConfig {
    /// Overlays `key = value` lines from a config file. Lines starting with
    /// `#` and blank lines are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "seed" => self.seed = parse_as(key, value)?,
            "epochs" => self.epochs = parse_as(key, value)?,
            "batch.p" => self.batch_p = parse_as(key, value)?,
            "batch.k" => self.batch_k = parse_as(key, value)?,
            "model.backbone" => {
                self.backbone = match value {
                    "precomputed" => BackboneKind::Precomputed,
                    "toyconv" => BackboneKind::ToyConv,
                    _ => {
                        return Err(Error::config(format!(
                            "model.backbone must be precomputed or toyconv, got {value:?}"
                        )))
                    }
                }
            }
            "model.channels" => self.channels = parse_as(key, value)?,
            "model.grid_w" => self.grid.0 = parse_as(key, value)?,
            "model.grid_h" => self.grid.1 = parse_as(key, value)?,
            "model.lga_depth" => self.lga_depth = parse_as(key, value)?,
            "model.aggregation" => {
                self.aggregation = match value {
                    "lga" => Aggregation::Lga,
                    "lap" => Aggregation::Lap,
                    "none" => Aggregation::None,
                    _ => {
                        return Err(Error::config(format!(
                            "model.aggregation must be lga, lap, or none, got {value:?}"
                        )))
                    }
                }
            }
            "model.bn_neck" => self.bn_neck = parse_bool(key, value)?,
            "model.input_w" => self.input_size.0 = parse_as(key, value)?,
            "model.input_h" => self.input_size.1 = parse_as(key, value)?,
            "model.conv_blocks" => self.conv_blocks = parse_as(key, value)?,
            "model.radius" => self.radius = parse_as(key, value)?,
            "model.lap_relu" => self.lap_relu = parse_bool(key, value)?,
            "model.retrieval_post_bn" => self.retrieval_post_bn = parse_bool(key, value)?,
            "augment.flip_p" => self.flip_p = parse_as(key, value)?,
            "augment.erase_p" => self.erase_p = parse_as(key, value)?,
            "loss.beta" => self.beta = parse_as(key, value)?,
            "loss.margin" => self.margin = parse_as(key, value)?,
            "loss.mining" => {
                self.mining = match value {
                    "batch-hard" => Mining::BatchHard,
                    "all-valid" => Mining::AllValid,
                    _ => {
                        return Err(Error::config(format!(
                            "loss.mining must be batch-hard or all-valid, got {value:?}"
                        )))
                    }
                }
            }
            "schedule.lr_multiplier" => self.lr_multiplier = parse_as(key, value)?,
            "schedule.momentum" => self.momentum = parse_as(key, value)?,
            "schedule.weight_decay" => self.weight_decay = parse_as(key, value)?,
            "protocol" => self.protocol = ProtocolName::parse(value)?,
            "trials" => self.trials = parse_as(key, value)?,
            "ablation" => self.ablation = Some(value.to_string()),
            "bench.grids" => self.bench_grids = parse_list(key, value)?,
            "bench.depths" => self.bench_depths = parse_list(key, value)?,
            "bench.channels" => self.bench_channels = parse_as(key, value)?,
            _ if key.starts_with("synthetic.") => {
                let s = self.synthetic.get_or_insert_with(SyntheticSettings::default);
                match key {
                    "synthetic.identities" => s.identities = parse_as(key, value)?,
                    "synthetic.counts" => s.counts = value.to_string(),
                    "synthetic.per_identity" => s.per_identity = parse_as(key, value)?,
                    "synthetic.zipf_exponent" => s.zipf_exponent = parse_as(key, value)?,
                    "synthetic.zipf_max" => s.zipf_max = parse_as(key, value)?,
                    "synthetic.payload" => s.payload = value.to_string(),
                    "synthetic.channels" => s.channels = parse_as(key, value)?,
                    "synthetic.grid_w" => s.grid.0 = parse_as(key, value)?,
                    "synthetic.grid_h" => s.grid.1 = parse_as(key, value)?,
                    "synthetic.image_w" => s.image_size.0 = parse_as(key, value)?,
                    "synthetic.image_h" => s.image_size.1 = parse_as(key, value)?,
                    "synthetic.sigma" => s.sigma = parse_as(key, value)?,
                    "synthetic.separation" => s.separation = parse_as(key, value)?,
                    "synthetic.cameras" => s.cameras = parse_as(key, value)?,
                    "synthetic.test_per_identity" => s.test_per_identity = parse_as(key, value)?,
                    "synthetic.occlusion_p" => s.occlusion_p = parse_as(key, value)?,
                    "synthetic.occlusion_strength" => {
                        s.occlusion_strength = parse_as(key, value)?
                    }
                    "synthetic.seed" => s.seed = parse_as(key, value)?,
                    _ => return Err(Error::config(format!("unknown config key {key:?}"))),
                }
            }
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a Table-5-style ablation name: it pins the augmentation,
    /// BN-neck, aggregation, and reweighting switches.
    pub fn apply_ablation(&mut self) -> Result<()> {
        let Some(name) = self.ablation.clone() else {
            return Ok(());
        };
        let cb_beta = self.beta;
        let lowered = name.to_lowercase();
        let parts: Vec<&str> = lowered.split('+').map(str::trim).collect();
        if parts.first() != Some(&"baseline") {
            return Err(Error::config(format!(
                "ablation name must start with baseline, got {name:?}"
            )));
        }
        self.erase_p = 0.0;
        self.bn_neck = false;
        self.aggregation = Aggregation::None;
        self.beta = 0.0;
        for part in &parts[1..] {
            match *part {
                "re" => self.erase_p = 0.5,
                "bn" => self.bn_neck = true,
                "lap" => self.aggregation = Aggregation::Lap,
                "lga" => self.aggregation = Aggregation::Lga,
                "cb" => self.beta = cb_beta,
                other => {
                    return Err(Error::config(format!(
                        "unknown ablation component {other:?} in {name:?}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Builds the model configuration for `num_classes` training identities.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            channels: self.channels,
            grid: self.grid,
            lga_depth: self.lga_depth,
            aggregation: self.aggregation,
            bn_neck: self.bn_neck,
            num_classes,
            input_size: self.input_size,
            conv_blocks: self.conv_blocks,
            flip_probability: self.flip_p,
            erase_probability: self.erase_p,
            radius: self.radius,
            lap_relu: self.lap_relu,
            retrieval_post_bn: self.retrieval_post_bn,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            lr_multiplier: self.lr_multiplier,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ..TrainSchedule::standard()
        }
    }

    /// Every resolved key, sorted, for the `config.resolved` echo.
    pub fn echo(&self) -> String {
        let mut map = BTreeMap::new();
        let fmt_path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "(none)".into())
        };
        map.insert("manifest", fmt_path(&self.manifest));
        map.insert("out", fmt_path(&self.out));
        map.insert("seed", self.seed.to_string());
        map.insert("epochs", self.epochs.to_string());
        map.insert("batch.p", self.batch_p.to_string());
        map.insert("batch.k", self.batch_k.to_string());
        map.insert(
            "model.backbone",
            match self.backbone {
                BackboneKind::Precomputed => "precomputed".into(),
                BackboneKind::ToyConv => "toyconv".into(),
            },
        );
        map.insert("model.channels", self.channels.to_string());
        map.insert("model.grid_w", self.grid.0.to_string());
        map.insert("model.grid_h", self.grid.1.to_string());
        map.insert("model.lga_depth", self.lga_depth.to_string());
        map.insert(
            "model.aggregation",
            match self.aggregation {
                Aggregation::Lga => "lga".into(),
                Aggregation::Lap => "lap".into(),
                Aggregation::None => "none".into(),
            },
        );
        map.insert("model.bn_neck", self.bn_neck.to_string());
        map.insert("model.input_w", self.input_size.0.to_string());
        map.insert("model.input_h", self.input_size.1.to_string());
        map.insert("model.conv_blocks", self.conv_blocks.to_string());
        map.insert("model.radius", self.radius.to_string());
        map.insert("model.lap_relu", self.lap_relu.to_string());
        map.insert("model.retrieval_post_bn", self.retrieval_post_bn.to_string());
        map.insert("augment.flip_p", self.flip_p.to_string());
        map.insert("augment.erase_p", self.erase_p.to_string());
        map.insert("loss.beta", self.beta.to_string());
        map.insert("loss.margin", self.margin.to_string());
        map.insert(
            "loss.mining",
            match self.mining {
                Mining::BatchHard => "batch-hard".into(),
                Mining::AllValid => "all-valid".into(),
            },
        );
        map.insert("schedule.lr_multiplier", self.lr_multiplier.to_string());
        map.insert("schedule.momentum", self.momentum.to_string());
        map.insert("schedule.weight_decay", self.weight_decay.to_string());
        map.insert("protocol", self.protocol.as_str().into());
        map.insert("trials", self.trials.to_string());
        map.insert(
            "ablation",
            self.ablation.clone().unwrap_or_else(|| "(none)".into()),
        );
        map.insert(
            "bench.grids",
            self.bench_grids
                .iter()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "bench.depths",
            self.bench_depths
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("bench.channels", self.bench_channels.to_string());
        if let Some(s) = &self.synthetic {
            map.insert("synthetic.identities", s.identities.to_string());
            map.insert("synthetic.counts", s.counts.clone());
            map.insert("synthetic.per_identity", s.per_identity.to_string());
            map.insert("synthetic.zipf_exponent", s.zipf_exponent.to_string());
            map.insert("synthetic.zipf_max", s.zipf_max.to_string());
            map.insert("synthetic.payload", s.payload.clone());
            map.insert("synthetic.channels", s.channels.to_string());
            map.insert("synthetic.grid_w", s.grid.0.to_string());
            map.insert("synthetic.grid_h", s.grid.1.to_string());
            map.insert("synthetic.image_w", s.image_size.0.to_string());
            map.insert("synthetic.image_h", s.image_size.1.to_string());
            map.insert("synthetic.sigma", s.sigma.to_string());
            map.insert("synthetic.separation", s.separation.to_string());
            map.insert("synthetic.cameras", s.cameras.to_string());
            map.insert(
                "synthetic.test_per_identity",
                s.test_per_identity.to_string(),
            );
            map.insert("synthetic.occlusion_p", s.occlusion_p.to_string());
            map.insert(
                "synthetic.occlusion_strength",
                s.occlusion_strength.to_string(),
            );
            map.insert("synthetic.seed", s.seed.to_string());
        }
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
