//! Spatial neighborhood graph over the node lattice of a feature map.
//!
//! Nodes are the `w*h` positions of a feature map, numbered row-major
//! (`index = row*w + col`). Two distinct nodes are adjacent when the Euclidean
//! distance between their lattice coordinates is strictly below the radius,
//! and every node additionally carries a self-loop. Edge weights follow the
//! symmetric normalization `1/(sqrt(deg(i))*sqrt(deg(j)))`, where `deg` counts
//! neighbors on the self-looped graph, so the dense weight matrix is
//! `D^{-1/2} (A + I) D^{-1/2}`.
//!
//! The graph is immutable after construction and safe to share across threads.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{Error, Result};

/// Position of a node on the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeCoord {
    pub row: usize,
    pub col: usize,
}

/// Immutable neighborhood graph with precomputed normalized weights.
///
/// Adjacency lists are sorted by neighbor index and include the self-loop.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGraph {
    width: usize,
    height: usize,
    radius: f64,
    adjacency: Vec<Vec<(usize, f64)>>,
    degrees: Vec<usize>,
}

/// Builds the neighborhood graph for a `width x height` lattice.
///
/// Deterministic: the same inputs always produce an identical structure.
/// A radius large enough to make the graph complete is allowed.
pub fn build_grid_graph(width: usize, height: usize, radius: f64) -> Result<GridGraph> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "grid dimensions must be positive, got {width}x{height}"
        )));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!(
            "radius must be a positive finite real, got {radius}"
        )));
    }

    let k = width * height;
    let r_sq = radius * radius;
    let reach = radius.ceil() as i64;

    // First pass: neighbor index lists. Scanning row offsets then column
    // offsets in ascending order yields lists already sorted by node index.
    let mut neighbor_ids: Vec<Vec<usize>> = Vec::with_capacity(k);
    for row in 0..height as i64 {
        for col in 0..width as i64 {
            let mut list = Vec::new();
            for dr in -reach..=reach {
                let nr = row + dr;
                if nr < 0 || nr >= height as i64 {
                    continue;
                }
                for dc in -reach..=reach {
                    let nc = col + dc;
                    if nc < 0 || nc >= width as i64 {
                        continue;
                    }
                    let dist_sq = (dr * dr + dc * dc) as f64;
                    if (dr == 0 && dc == 0) || dist_sq < r_sq {
                        list.push((nr as usize) * width + nc as usize);
                    }
                }
            }
            debug_assert!(list.windows(2).all(|p| p[0] < p[1]));
            neighbor_ids.push(list);
        }
    }

    let degrees: Vec<usize> = neighbor_ids.iter().map(Vec::len).collect();

    // Second pass: attach weights. Multiplying sqrt(deg(i))*sqrt(deg(j)) in
    // this fixed form makes weight(i,j) and weight(j,i) bit-identical.
    let adjacency = neighbor_ids
        .iter()
        .enumerate()
        .map(|(i, ids)| {
            let di = (degrees[i] as f64).sqrt();
            ids.iter()
                .map(|&j| {
                    let dj = (degrees[j] as f64).sqrt();
                    (j, 1.0 / (di * dj))
                })
                .collect()
        })
        .collect();

    Ok(GridGraph {
        width,
        height,
        radius,
        adjacency,
        degrees,
    })
}

impl GridGraph {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Number of nodes `k = w*h`.
    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    /// Lattice coordinates of node `i`.
    pub fn coord(&self, index: usize) -> NodeCoord {
        NodeCoord {
            row: index / self.width,
            col: index % self.width,
        }
    }

    /// Row-major node index of a coordinate.
    pub fn index(&self, coord: NodeCoord) -> usize {
        coord.row * self.width + coord.col
    }

    /// Sorted `(neighbor, weight)` list of node `i`, self-loop included.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    /// Degree of node `i` on the self-looped graph.
    pub fn deg(&self, i: usize) -> usize {
        self.degrees[i]
    }

    /// Normalized weight of edge `(i, j)`, or `None` when not adjacent.
    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.adjacency[i]
            .binary_search_by_key(&j, |&(n, _)| n)
            .ok()
            .map(|pos| self.adjacency[i][pos].1)
    }

    /// Shortest-path length between two nodes, ignoring self-loops.
    ///
    /// Returns 0 iff `i == j`. Grid graphs are connected whenever the radius
    /// admits any edge; a disconnected pair reports an error.
    pub fn graph_distance(&self, i: usize, j: usize) -> Result<usize> {
        let k = self.node_count();
        if i >= k || j >= k {
            return Err(Error::invalid(format!(
                "node index out of range: ({i}, {j}) on a graph with {k} nodes"
            )));
        }
        if i == j {
            return Ok(0);
        }
        let mut dist = vec![usize::MAX; k];
        dist[i] = 0;
        let mut queue = VecDeque::from([i]);
        while let Some(cur) = queue.pop_front() {
            for &(nb, _) in &self.adjacency[cur] {
                if nb == cur || dist[nb] != usize::MAX {
                    continue;
                }
                dist[nb] = dist[cur] + 1;
                if nb == j {
                    return Ok(dist[nb]);
                }
                queue.push_back(nb);
            }
        }
        Err(Error::invalid(format!("nodes {i} and {j} are not connected")))
    }

    /// Writes the edge list as `i j weight` lines, weights at 17 significant
    /// digits, rows sorted by `(i, j)`.
    pub fn dump_edges<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for (i, list) in self.adjacency.iter().enumerate() {
            for &(j, w) in list {
                writeln!(out, "{i} {j} {w:.16e}")?;
            }
        }
        Ok(())
    }
}
