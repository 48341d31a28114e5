//! Versioned binary checkpoints.
//!
//! Layout: magic `LGAC`, little-endian u32 format version, then named
//! blocks. Each block is `u32` name length, UTF-8 name, `u32` rank,
//! `rank` little-endian u32 dims, and the payload as little-endian f32
//! values (`prod(dims)` of them; rank 0 encodes a single scalar).
//!
//! Configuration scalars are stored as rank-0 blocks next to the parameter
//! tensors, so a checkpoint fully reconstructs the model.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::pipeline::backbone::ToyBackbone;
use crate::pipeline::{Aggregation, BackboneKind, Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LGAC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_block<W: Write>(out: &mut W, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = dims.iter().product();
    debug_assert_eq!(expected.max(1), data.len());
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn write_scalar<W: Write>(out: &mut W, name: &str, value: f64) -> Result<()> {
    write_block(out, name, &[], &[value])
}

/// Serializes the model (config + parameters + BN running stats).
pub fn save_checkpoint<W: Write>(model: &Model, out: &mut W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = &model.cfg;
    write_scalar(
        out,
        "cfg.backbone",
        match cfg.backbone {
            BackboneKind::Precomputed => 0.0,
            BackboneKind::ToyConv => 1.0,
        },
    )?;
    write_scalar(out, "cfg.channels", cfg.channels as f64)?;
    write_scalar(out, "cfg.grid_w", cfg.grid.0 as f64)?;
    write_scalar(out, "cfg.grid_h", cfg.grid.1 as f64)?;
    write_scalar(out, "cfg.lga_depth", cfg.lga_depth as f64)?;
    write_scalar(
        out,
        "cfg.aggregation",
        match cfg.aggregation {
            Aggregation::Lga => 0.0,
            Aggregation::Lap => 1.0,
            Aggregation::None => 2.0,
        },
    )?;
    write_scalar(out, "cfg.bn_neck", cfg.bn_neck as u8 as f64)?;
    write_scalar(out, "cfg.num_classes", cfg.num_classes as f64)?;
    write_scalar(out, "cfg.input_w", cfg.input_size.0 as f64)?;
    write_scalar(out, "cfg.input_h", cfg.input_size.1 as f64)?;
    write_scalar(out, "cfg.conv_blocks", cfg.conv_blocks as f64)?;
    write_scalar(out, "cfg.flip_p", cfg.flip_probability)?;
    write_scalar(out, "cfg.erase_p", cfg.erase_probability)?;
    write_scalar(out, "cfg.radius", cfg.radius)?;
    write_scalar(out, "cfg.lap_relu", cfg.lap_relu as u8 as f64)?;
    write_scalar(out, "cfg.retrieval_post_bn", cfg.retrieval_post_bn as u8 as f64)?;

    let (t, c) = (cfg.num_classes, cfg.channels);
    write_block(out, "fc.weight", &[t, c], &model.fc_weight)?;
    if let Some(bias) = &model.fc_bias {
        write_block(out, "fc.bias", &[t], bias)?;
    }
    if let Some(bn) = &model.bn {
        write_block(out, "bn.gamma", &[c], &bn.gamma)?;
        write_block(out, "bn.shift", &[c], &bn.shift)?;
        write_block(out, "bn.running_mean", &[c], &bn.running_mean)?;
        write_block(out, "bn.running_var", &[c], &bn.running_var)?;
    }
    if let Some(bb) = &model.backbone {
        for (i, block) in bb.blocks.iter().enumerate() {
            write_block(
                out,
                &format!("backbone.{i}.weight"),
                &[block.out_channels, block.in_channels, 3, 3],
                &block.weight,
            )?;
            write_block(out, &format!("backbone.{i}.bias"), &[block.out_channels], &block.bias)?;
        }
    }
    Ok(())
}

struct Blocks(BTreeMap<String, (Vec<usize>, Vec<f64>)>);

impl Blocks {
    fn scalar(&self, name: &str) -> Result<f64> {
        let (_, data) = self
            .0
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing block {name:?}")))?;
        Ok(data[0])
    }

    fn tensor(&self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let (got_dims, data) = self
            .0
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing block {name:?}")))?;
        if got_dims != dims {
            return Err(Error::Data(format!(
                "checkpoint block {name:?} has dims {got_dims:?}, expected {dims:?}"
            )));
        }
        Ok(data.clone())
    }
}

fn read_exact_or_data<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|_| Error::Data(format!("checkpoint truncated while reading {what}")))
}

/// Reads a checkpoint back into a model.
pub fn load_checkpoint<R: Read>(input: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    read_exact_or_data(input, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let mut version = [0u8; 4];
    read_exact_or_data(input, &mut version, "version")?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }

    let mut blocks = BTreeMap::new();
    loop {
        let mut len = [0u8; 4];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or_data(input, &mut name, "block name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("checkpoint block name is not UTF-8".into()))?;
        let mut rank = [0u8; 4];
        read_exact_or_data(input, &mut rank, "block rank")?;
        let rank = u32::from_le_bytes(rank) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            read_exact_or_data(input, &mut d, "block dims")?;
            dims.push(u32::from_le_bytes(d) as usize);
        }
        let count: usize = dims.iter().product::<usize>().max(1);
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v = [0u8; 4];
            read_exact_or_data(input, &mut v, "block payload")?;
            data.push(f32::from_le_bytes(v) as f64);
        }
        blocks.insert(name, (dims, data));
    }
    let blocks = Blocks(blocks);

    let cfg = ModelConfig {
        backbone: if blocks.scalar("cfg.backbone")? == 0.0 {
            BackboneKind::Precomputed
        } else {
            BackboneKind::ToyConv
        },
        channels: blocks.scalar("cfg.channels")? as usize,
        grid: (
            blocks.scalar("cfg.grid_w")? as usize,
            blocks.scalar("cfg.grid_h")? as usize,
        ),
        lga_depth: blocks.scalar("cfg.lga_depth")? as usize,
        aggregation: match blocks.scalar("cfg.aggregation")? as u32 {
            0 => Aggregation::Lga,
            1 => Aggregation::Lap,
            2 => Aggregation::None,
            other => {
                return Err(Error::Data(format!(
                    "unknown aggregation code {other} in checkpoint"
                )))
            }
        },
        bn_neck: blocks.scalar("cfg.bn_neck")? != 0.0,
        num_classes: blocks.scalar("cfg.num_classes")? as usize,
        input_size: (
            blocks.scalar("cfg.input_w")? as usize,
            blocks.scalar("cfg.input_h")? as usize,
        ),
        conv_blocks: blocks.scalar("cfg.conv_blocks")? as usize,
        flip_probability: blocks.scalar("cfg.flip_p")?,
        erase_probability: blocks.scalar("cfg.erase_p")?,
        radius: blocks.scalar("cfg.radius")?,
        lap_relu: blocks.scalar("cfg.lap_relu")? != 0.0,
        retrieval_post_bn: blocks.scalar("cfg.retrieval_post_bn")? != 0.0,
    };

    let mut model = Model::new(cfg.clone(), 0)?;
    let (t, c) = (cfg.num_classes, cfg.channels);
    model.fc_weight = blocks.tensor("fc.weight", &[t, c])?;
    if !cfg.bn_neck {
        model.fc_bias = Some(blocks.tensor("fc.bias", &[t])?);
    }
    if cfg.bn_neck {
        let bn = model.bn.as_mut().expect("bn present");
        bn.gamma = blocks.tensor("bn.gamma", &[c])?;
        bn.shift = blocks.tensor("bn.shift", &[c])?;
        bn.running_mean = blocks.tensor("bn.running_mean", &[c])?;
        bn.running_var = blocks.tensor("bn.running_var", &[c])?;
    }
    if cfg.backbone == BackboneKind::ToyConv {
        let bb: &mut ToyBackbone = model.backbone.as_mut().expect("backbone present");
        for (i, block) in bb.blocks.iter_mut().enumerate() {
            block.weight = blocks.tensor(
                &format!("backbone.{i}.weight"),
                &[block.out_channels, block.in_channels, 3, 3],
            )?;
            block.bias = blocks.tensor(&format!("backbone.{i}.bias"), &[block.out_channels])?;
        }
    }
    model.bn_is_consistent()?;
    Ok(model)
}

impl Model {
    fn bn_is_consistent(&self) -> Result<()> {
        if let Some(bn) = &self.bn {
            if bn.running_var.iter().any(|v| *v < 0.0) {
                return Err(Error::Data("checkpoint has negative running variance".into()));
            }
        }
        Ok(())
    }
}
