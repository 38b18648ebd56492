//! Compressed sparse row matrices.

use nalgebra::DMatrix;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: Vec<(usize, usize, f64)>) -> Self {
        // bucket by row, then sort each (short) row by column
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in &triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            counts[r + 1] += 1;
        }
        for r in 0..nrows {
            counts[r + 1] += counts[r];
        }
        let mut bucketed = vec![(0usize, 0.0f64); triplets.len()];
        let mut next = counts.clone();
        for (r, c, v) in triplets {
            bucketed[next[r]] = (c, v);
            next[r] += 1;
        }
        let rows: Vec<Vec<(usize, f64)>> = counts
            .par_windows(2)
            .map(|w| {
                let mut row = bucketed[w[0]..w[1]].to_vec();
                row.sort_unstable_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
                for (c, v) in row {
                    match merged.last_mut() {
                        Some(last) if last.0 == c => last.1 += v,
                        _ => merged.push((c, v)),
                    }
                }
                merged
            })
            .collect();
        Self::from_sorted_rows(ncols, rows)
    }

    /// Builds from per-row `(col, value)` lists already sorted by column
    /// without duplicates.
    pub fn from_sorted_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nrows = rows.len();
        let total = rows.iter().map(Vec::len).sum();
        let mut offsets = Vec::with_capacity(nrows + 1);
        offsets.push(0);
        let mut cols = Vec::with_capacity(total);
        let mut vals = Vec::with_capacity(total);
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0), "row not sorted");
            for (c, v) in row {
                assert!(c < ncols, "column {c} outside {ncols}");
                cols.push(c);
                vals.push(v);
            }
            offsets.push(cols.len());
        }
        Self { nrows, ncols, offsets, cols, vals }
    }

    /// `self + s·I` for a square matrix.
    pub fn add_identity(&self, s: f64) -> Self {
        assert_eq!(self.nrows, self.ncols, "add_identity needs a square matrix");
        let rows = (0..self.nrows)
            .map(|i| {
                let (c, v) = self.row(i);
                let mut row: Vec<(usize, f64)> = c.iter().copied().zip(v.iter().copied()).collect();
                match c.binary_search(&i) {
                    Ok(k) => row[k].1 += s,
                    Err(k) => row.insert(k, (i, s)),
                }
                row
            })
            .collect();
        Self::from_sorted_rows(self.ncols, rows)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    /// `out = self · x`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(out.len(), self.nrows);
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let (c, v) = self.row(i);
            *o = c.iter().zip(v).map(|(&j, a)| a * x[j]).sum();
        });
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols))
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().position(|&j| j == i).map_or(0.0, |k| v[k])
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                m[(i, j)] = a;
            }
        }
        m
    }
}
