//! Parameter-free local graph aggregation over feature maps.
//!
//! A [`FeatureMap`] holds `c` channels over the `w*h` nodes of a grid, stored
//! channel-major with row-major node order. The aggregation layer replaces
//! each node value with the normalized weighted sum over its neighborhood
//! (self-loop included) followed by ReLU; it has no trainable parameters.
//! Cascading the layer grows the receptive field by one graph hop per level.
//!
//! Uniform local average pooling (`lap_forward`, no ReLU) is kept as a
//! baseline aggregation, and `global_average_pool` collapses a map to one
//! embedding vector.
//!
//! Propagation is a sparse gather per node; summation order is the sorted
//! neighbor order of the graph, so results are reproducible under any
//! channel- or batch-level parallelism.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::gridgraph::GridGraph;

/// Magic bytes of the feature-map binary format.
pub const FEATURE_MAGIC: &[u8; 4] = b"LGAF";

/// A `c x w x h` block of activations in channel-major, row-major node order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    /// All-zero map.
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        FeatureMap {
            channels,
            width,
            height,
            values: vec![0.0; channels * width * height],
        }
    }

    /// Wraps raw values; rejects length mismatches and non-finite entries.
    pub fn from_values(
        channels: usize,
        width: usize,
        height: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let expect = channels * width * height;
        if values.len() != expect {
            return Err(Error::invalid(format!(
                "feature map {channels}x{width}x{height} needs {expect} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "feature map contains non-finite value at flat index {pos}"
            )));
        }
        Ok(FeatureMap {
            channels,
            width,
            height,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of spatial nodes `w*h`.
    pub fn nodes(&self) -> usize {
        self.width * self.height
    }

    pub fn value(&self, channel: usize, node: usize) -> f64 {
        self.values[channel * self.nodes() + node]
    }

    pub fn set(&mut self, channel: usize, node: usize, value: f64) {
        let k = self.nodes();
        self.values[channel * k + node] = value;
    }

    /// One channel as a node-indexed slice.
    pub fn channel(&self, channel: usize) -> &[f64] {
        let k = self.nodes();
        &self.values[channel * k..(channel + 1) * k]
    }

    pub fn channel_mut(&mut self, channel: usize) -> &mut [f64] {
        let k = self.nodes();
        &mut self.values[channel * k..(channel + 1) * k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels
            && self.width == other.width
            && self.height == other.height
    }
}

fn check_grid(input: &FeatureMap, graph: &GridGraph) -> Result<()> {
    if input.width() != graph.width() || input.height() != graph.height() {
        return Err(Error::invalid(format!(
            "feature map grid {}x{} does not match graph grid {}x{}",
            input.width(),
            input.height(),
            graph.width(),
            graph.height()
        )));
    }
    Ok(())
}

/// One aggregation layer: normalized neighborhood sum followed by ReLU.
///
/// `out[ch][i] = max(0, sum_{j in N(i) ∪ {i}} weight(i,j) * in[ch][j])`.
pub fn lga_forward(input: &FeatureMap, graph: &GridGraph) -> Result<FeatureMap> {
    check_grid(input, graph)?;
    let mut out = FeatureMap::zeros(input.channels(), input.width(), input.height());
    for ch in 0..input.channels() {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for (i, slot) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(j, w) in graph.neighbors(i) {
                acc += w * src[j];
            }
            *slot = acc.max(0.0);
        }
    }
    Ok(out)
}

/// Gradient of [`lga_forward`] with respect to its input.
///
/// The ReLU subgradient at 0 is taken as 0, so the result is
/// `W^T (upstream ⊙ mask)` per channel with `mask = [pre-activation > 0]`.
pub fn lga_backward(
    input: &FeatureMap,
    graph: &GridGraph,
    upstream: &FeatureMap,
) -> Result<FeatureMap> {
    check_grid(input, graph)?;
    if !input.same_shape(upstream) {
        return Err(Error::invalid(format!(
            "upstream gradient shape {}x{}x{} does not match input {}x{}x{}",
            upstream.channels(),
            upstream.width(),
            upstream.height(),
            input.channels(),
            input.width(),
            input.height()
        )));
    }
    let k = input.nodes();
    let mut grad = FeatureMap::zeros(input.channels(), input.width(), input.height());
    let mut masked = vec![0.0f64; k];
    for ch in 0..input.channels() {
        let src = input.channel(ch);
        let up = upstream.channel(ch);
        for i in 0..k {
            let mut acc = 0.0;
            for &(j, w) in graph.neighbors(i) {
                acc += w * src[j];
            }
            masked[i] = if acc > 0.0 { up[i] } else { 0.0 };
        }
        // W is symmetric, so the transposed gather reuses the same lists.
        let dst = grad.channel_mut(ch);
        for (j, slot) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(i, w) in graph.neighbors(j) {
                acc += w * masked[i];
            }
            *slot = acc;
        }
    }
    Ok(grad)
}

/// `depth`-fold composition of [`lga_forward`].
pub fn lga_cascade(input: &FeatureMap, graph: &GridGraph, depth: usize) -> Result<FeatureMap> {
    if depth == 0 {
        return Err(Error::invalid(
            "cascade depth must be at least 1; disable aggregation instead of using depth 0",
        ));
    }
    let mut cur = lga_forward(input, graph)?;
    for _ in 1..depth {
        cur = lga_forward(&cur, graph)?;
    }
    Ok(cur)
}

/// Like [`lga_cascade`] but returns the input of every layer, which the
/// training loop needs to run the backward chain.
pub fn lga_cascade_states(
    input: &FeatureMap,
    graph: &GridGraph,
    depth: usize,
) -> Result<Vec<FeatureMap>> {
    if depth == 0 {
        return Err(Error::invalid(
            "cascade depth must be at least 1; disable aggregation instead of using depth 0",
        ));
    }
    let mut states = Vec::with_capacity(depth + 1);
    states.push(input.clone());
    for level in 0..depth {
        let next = lga_forward(&states[level], graph)?;
        states.push(next);
    }
    Ok(states)
}

/// Backward pass through a cascade given the per-layer inputs from
/// [`lga_cascade_states`] (`states[0..depth]` are layer inputs).
pub fn lga_cascade_backward(
    states: &[FeatureMap],
    graph: &GridGraph,
    upstream: &FeatureMap,
) -> Result<FeatureMap> {
    if states.len() < 2 {
        return Err(Error::invalid("cascade states must hold at least one layer"));
    }
    let depth = states.len() - 1;
    let mut grad = upstream.clone();
    for level in (0..depth).rev() {
        grad = lga_backward(&states[level], graph, &grad)?;
    }
    Ok(grad)
}

/// Uniform neighborhood mean (self-loop included), no nonlinearity.
pub fn lap_forward(input: &FeatureMap, graph: &GridGraph) -> Result<FeatureMap> {
    check_grid(input, graph)?;
    let mut out = FeatureMap::zeros(input.channels(), input.width(), input.height());
    for ch in 0..input.channels() {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for (i, slot) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(j, _) in graph.neighbors(i) {
                acc += src[j];
            }
            *slot = acc / graph.deg(i) as f64;
        }
    }
    Ok(out)
}

/// Gradient of [`lap_forward`] with respect to its input.
pub fn lap_backward(graph: &GridGraph, upstream: &FeatureMap) -> Result<FeatureMap> {
    check_grid(upstream, graph)?;
    let mut grad = FeatureMap::zeros(upstream.channels(), upstream.width(), upstream.height());
    for ch in 0..upstream.channels() {
        let up = upstream.channel(ch);
        let dst = grad.channel_mut(ch);
        for (j, slot) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(i, _) in graph.neighbors(j) {
                acc += up[i] / graph.deg(i) as f64;
            }
            *slot = acc;
        }
    }
    Ok(grad)
}

/// Mean over all spatial nodes, one value per channel.
pub fn global_average_pool(input: &FeatureMap) -> Vec<f64> {
    let k = input.nodes() as f64;
    (0..input.channels())
        .map(|ch| input.channel(ch).iter().sum::<f64>() / k)
        .collect()
}

/// Writes a map in the feature binary format: magic `LGAF`, little-endian
/// u32 `c`, `w`, `h`, then `c*w*h` little-endian f32 values in channel-major,
/// row-major node order.
pub fn write_feature_map<W: Write>(map: &FeatureMap, out: &mut W) -> std::io::Result<()> {
    out.write_all(FEATURE_MAGIC)?;
    for dim in [map.channels(), map.width(), map.height()] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in map.as_slice() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a map written by [`write_feature_map`].
pub fn read_feature_map<R: Read>(input: &mut R) -> Result<FeatureMap> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Data(format!(
            "bad feature-map magic {:?}, expected {:?}",
            magic, FEATURE_MAGIC
        )));
    }
    let mut dims = [0usize; 3];
    for dim in &mut dims {
        let mut buf = [0u8; 4];
        input.read_exact(&mut buf)?;
        *dim = u32::from_le_bytes(buf) as usize;
    }
    let [c, w, h] = dims;
    let mut values = Vec::with_capacity(c * w * h);
    for _ in 0..c * w * h {
        let mut buf = [0u8; 4];
        input.read_exact(&mut buf)?;
        values.push(f32::from_le_bytes(buf) as f64);
    }
    FeatureMap::from_values(c, w, h, values)
}
