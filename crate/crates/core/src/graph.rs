//! Immutable undirected graph in CSR form.
//!
//! Every undirected edge `{i, j}` is materialized as two directed twins
//! `i -> j` and `j -> i`. Directed edges are grouped by source node, and
//! within a group sorted by destination, so `neighbors(i)` is both the
//! outgoing-edge range of `i` and its neighbor list in ascending id order.
//! `reverse(e)` gives the twin of `e`, which is where belief propagation
//! reads the message travelling the opposite way.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    reverse: Arc<[usize]>,
}

impl Graph {
    /// Builds a graph from undirected edges. Duplicates (in either
    /// orientation) are merged; self-loops and out-of-range endpoints are
    /// rejected.
    pub fn new(num_nodes: usize, undirected_edges: &[(usize, usize)]) -> Result<Self> {
        let mut canon = Vec::with_capacity(undirected_edges.len());
        for &(a, b) in undirected_edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::input(format!(
                    "edge ({a}, {b}) has an endpoint outside 0..{num_nodes}"
                )));
            }
            if a == b {
                return Err(Error::input(format!("self-loop on node {a}")));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        canon.dedup();

        let mut directed: Vec<(usize, usize)> = Vec::with_capacity(2 * canon.len());
        for &(a, b) in &canon {
            directed.push((a, b));
            directed.push((b, a));
        }
        directed.sort_unstable();

        let mut offsets = vec![0usize; num_nodes + 1];
        for &(s, _) in &directed {
            offsets[s + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }

        let src: Vec<usize> = directed.iter().map(|&(s, _)| s).collect();
        let dst: Vec<usize> = directed.iter().map(|&(_, d)| d).collect();
        let reverse: Vec<usize> = directed
            .iter()
            .map(|&(s, d)| {
                let range = &dst[offsets[d]..offsets[d + 1]];
                // twin always exists because `directed` is symmetric
                offsets[d] + range.binary_search(&s).expect("missing twin edge")
            })
            .collect();

        Ok(Graph {
            num_nodes,
            offsets,
            src: src.into(),
            dst: dst.into(),
            reverse: reverse.into(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_directed_edges(&self) -> usize {
        self.src.len()
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.src.len() / 2
    }

    pub fn degree(&self, i: usize) -> Result<usize> {
        self.check_node(i)?;
        Ok(self.offsets[i + 1] - self.offsets[i])
    }

    /// `(edge index, neighbor id)` pairs in ascending neighbor order. The
    /// edge index refers to the outgoing edge `i -> neighbor`.
    pub fn neighbors(&self, i: usize) -> Result<Vec<(usize, usize)>> {
        self.check_node(i)?;
        Ok(self.edge_range(i).map(|e| (e, self.dst[e])).collect())
    }

    /// Neighbor ids of `i` without bounds checking beyond slice indexing.
    pub fn neighbor_ids(&self, i: usize) -> &[usize] {
        &self.dst[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn edge_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn edge(&self, e: usize) -> (usize, usize) {
        (self.src[e], self.dst[e])
    }

    pub fn reverse(&self, e: usize) -> usize {
        self.reverse[e]
    }

    pub fn sources(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn destinations(&self) -> &Arc<[usize]> {
        &self.dst
    }

    pub fn reverse_index(&self) -> &Arc<[usize]> {
        &self.reverse
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes)
            .map(|i| self.offsets[i + 1] - self.offsets[i])
            .collect()
    }

    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    /// Each undirected edge once, as `(smaller id, larger id)`, sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        (0..self.src.len())
            .filter(|&e| self.src[e] < self.dst[e])
            .map(|e| (self.src[e], self.dst[e]))
            .collect()
    }

    /// Applies `perm` (old id -> new id) to every node.
    pub fn relabel(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.num_nodes {
            return Err(Error::input("permutation length differs from node count"));
        }
        let edges: Vec<_> = self
            .undirected_edges()
            .into_iter()
            .map(|(a, b)| (perm[a], perm[b]))
            .collect();
        Graph::new(self.num_nodes, &edges)
    }

    fn check_node(&self, i: usize) -> Result<()> {
        if i >= self.num_nodes {
            Err(Error::input(format!(
                "node {i} out of range (graph has {} nodes)",
                self.num_nodes
            )))
        } else {
            Ok(())
        }
    }
}

/// 4-neighbour lattice with node id `r * cols + c`.
pub fn grid_graph(rows: usize, cols: usize) -> Result<Graph> {
    if rows == 0 || cols == 0 {
        return Err(Error::input("grid dimensions must be at least 1"));
    }
    let mut edges = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            if c + 1 < cols {
                edges.push((id, id + 1));
            }
            if r + 1 < rows {
                edges.push((id, id + cols));
            }
        }
    }
    Graph::new(rows * cols, &edges)
}
