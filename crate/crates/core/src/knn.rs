//! Exact k-nearest-neighbor search on a uniform grid.
//!
//! Points are bucketed into cubic cells holding about two points each; a
//! query scans square rings of cells outward until the k-th best distance is
//! strictly inside the radius that later rings could reach. Results are
//! ordered by (distance, label), so equidistant candidates resolve to the
//! smaller label.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    label: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.label.cmp(&other.label))
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Static grid index over points labelled `0..n` in insertion order.
#[derive(Debug, Clone)]
pub struct GridIndex {
    dim: usize,
    coords: Vec<f64>,
    origin: [f64; 3],
    cell: f64,
    shape: [usize; 3],
    starts: Vec<usize>,
    members: Vec<u32>,
}

impl GridIndex {
    /// Index over `coords` (row-major, `dim` columns).
    pub fn new(coords: &[f64], dim: usize) -> Self {
        assert!((1..=3).contains(&dim) && coords.len() % dim == 0);
        let n = coords.len() / dim;
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..dim {
            lo[k] = f64::INFINITY;
            hi[k] = f64::NEG_INFINITY;
        }
        for p in coords.chunks_exact(dim) {
            for k in 0..dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extents: Vec<f64> = (0..dim).map(|k| if n > 0 { hi[k] - lo[k] } else { 0.0 }).collect();
        let spread: Vec<f64> = extents.iter().copied().filter(|e| *e > 0.0).collect();
        let target_cells = (n as f64 / 2.0).max(1.0);
        let mut cell = if spread.is_empty() {
            1.0
        } else {
            (spread.iter().product::<f64>() / target_cells).powf(1.0 / spread.len() as f64)
        };
        let cells_for = |cell: f64| -> [usize; 3] {
            let mut s = [1; 3];
            for k in 0..dim {
                s[k] = (extents[k] / cell).floor() as usize + 1;
            }
            s
        };
        // anisotropic clouds can ask for far more cells than points
        while cells_for(cell).iter().product::<usize>() > 4 * n + 64 {
            cell *= 1.5;
        }
        let shape = cells_for(cell);
        let mut origin = [0.0; 3];
        origin[..dim].copy_from_slice(&lo[..dim]);
        let mut index = Self { dim, coords: coords.to_vec(), origin, cell, shape, starts: Vec::new(), members: Vec::new() };

        let total: usize = shape.iter().product();
        let cell_of: Vec<usize> = coords.chunks_exact(dim).map(|p| index.flat(index.cell_coords(p))).collect();
        let mut counts = vec![0usize; total + 1];
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for c in 0..total {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut members = vec![0u32; n];
        for (i, &c) in cell_of.iter().enumerate() {
            members[fill[c]] = i as u32;
            fill[c] += 1;
        }
        index.starts = counts;
        index.members = members;
        index
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, label: usize) -> &[f64] {
        &self.coords[label * self.dim..(label + 1) * self.dim]
    }

    fn cell_coords(&self, p: &[f64]) -> [isize; 3] {
        let mut c = [0isize; 3];
        for k in 0..self.dim {
            let v = ((p[k] - self.origin[k]) / self.cell).floor();
            c[k] = (v.max(0.0) as isize).min(self.shape[k] as isize - 1);
        }
        c
    }

    fn flat(&self, c: [isize; 3]) -> usize {
        (c[0] as usize * self.shape[1] + c[1] as usize) * self.shape[2] + c[2] as usize
    }

    /// The `k` nearest points with label `< limit`, sorted by (distance, label).
    pub fn nearest_below(&self, query: &[f64], k: usize, limit: usize) -> Vec<usize> {
        let eligible = limit.min(self.len());
        let k = k.min(eligible);
        if k == 0 {
            return Vec::new();
        }
        let center = self.cell_coords(query);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let max_ring = (0..self.dim).map(|d| self.shape[d]).max().unwrap_or(1) as isize;
        let visit = |cell: usize, heap: &mut BinaryHeap<Candidate>| {
            for &m in &self.members[self.starts[cell]..self.starts[cell + 1]] {
                let label = m as usize;
                if label >= eligible {
                    continue;
                }
                let cand = Candidate { d2: squared_distance(query, self.point(label)), label };
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(cand);
                }
            }
        };
        for r in 0..=max_ring {
            self.for_ring(center, r, |c| visit(c, &mut heap));
            if heap.len() == k {
                let reach = r as f64 * self.cell;
                if heap.peek().expect("heap is full").d2 < reach * reach {
                    break;
                }
            }
        }
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.label).collect()
    }

    /// The `k` nearest of all indexed points.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<usize> {
        self.nearest_below(query, k, self.len())
    }

    /// Calls `f` on every in-grid cell at Chebyshev distance exactly `r` from `c`.
    fn for_ring(&self, c: [isize; 3], r: isize, mut f: impl FnMut(usize)) {
        let range = |k: usize| -> (isize, isize) {
            if k < self.dim {
                ((c[k] - r).max(0), (c[k] + r).min(self.shape[k] as isize - 1))
            } else {
                (0, 0)
            }
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            for y in y0..=y1 {
                let on_boundary = (x - c[0]).abs() == r || (y - c[1]).abs() == r;
                if on_boundary {
                    for z in z0..=z1 {
                        f(self.flat([x, y, z]));
                    }
                } else if self.dim == 3 {
                    for z in [c[2] - r, c[2] + r] {
                        if z >= z0 && z <= z1 {
                            f(self.flat([x, y, z]));
                        }
                    }
                }
            }
        }
    }
}
