//! Directed acyclic neighbor graphs over ordered locations.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::LocationSet;
use crate::knn::GridIndex;

/// Neighbor sets in ordered positions: `neighbors(i) ⊆ {0, …, i−1}`, sorted.
///
/// `ordering()[i]` is the original index of the point at position `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    ordering: Vec<usize>,
    rank: Vec<usize>,
    m: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborGraph {
    /// Graph from explicit neighbor sets (ordered positions).
    pub fn from_sets(ordering: Vec<usize>, sets: Vec<Vec<usize>>) -> Result<Self> {
        let n = ordering.len();
        if sets.len() != n {
            return Err(Error::DimensionMismatch(format!("{} neighbor sets for {n} points", sets.len())));
        }
        let mut rank = vec![usize::MAX; n];
        for (pos, &orig) in ordering.iter().enumerate() {
            if orig >= n || rank[orig] != usize::MAX {
                return Err(Error::InvalidInput("ordering is not a permutation".into()));
            }
            rank[orig] = pos;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        let mut m = 0;
        for (i, mut set) in sets.into_iter().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.last().is_some_and(|&j| j >= i) {
                return Err(Error::InvalidInput(format!("neighbor set {i} refers to a later point")));
            }
            m = m.max(set.len());
            indices.extend(set);
            offsets.push(indices.len());
        }
        Ok(Self { ordering, rank, m, offsets, indices })
    }

    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    /// Largest neighbor-set size.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    /// Inverse permutation: position of original point `i`.
    pub fn rank(&self) -> &[usize] {
        &self.rank
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Total number of directed edges.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Reorders original-order values into ordered positions.
    pub fn to_ordered(&self, v: &[f64]) -> Vec<f64> {
        self.ordering.iter().map(|&o| v[o]).collect()
    }

    /// Maps ordered-position values back to original order.
    pub fn to_original(&self, v: &[f64]) -> Vec<f64> {
        self.rank.iter().map(|&r| v[r]).collect()
    }
}

/// Each point's `m` nearest predecessors in the ordering (exact search;
/// equidistant candidates go to the earlier position).
pub fn build_neighbor_graph(locs: &LocationSet, ordering: Vec<usize>, m: usize) -> Result<NeighborGraph> {
    let n = locs.len();
    if ordering.len() != n {
        return Err(Error::DimensionMismatch(format!("ordering has {} entries for {n} points", ordering.len())));
    }
    if m == 0 || m >= n {
        return Err(Error::InvalidParameter(format!("neighbor count m = {m} must satisfy 1 <= m < n = {n}")));
    }
    let dim = locs.dim();
    let ordered: Vec<f64> = ordering.iter().flat_map(|&o| locs.point(o).iter().copied()).collect();
    let index = GridIndex::new(&ordered, dim);
    let sets: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if m >= i {
                (0..i).collect()
            } else {
                index.nearest_below(&ordered[i * dim..(i + 1) * dim], m, i)
            }
        })
        .collect();
    NeighborGraph::from_sets(ordering, sets)
}
