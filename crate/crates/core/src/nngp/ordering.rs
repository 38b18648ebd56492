//! Orderings of the locations that define the neighbor DAG.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geo::LocationSet;

/// Produces a permutation: `order[k]` is the original index of the k-th point.
pub trait OrderingStrategy: Send + Sync {
    fn order(&self, locs: &LocationSet) -> Vec<usize>;
}

/// Ascending first coordinate, ties broken by the next coordinates; stable.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoordinateOrder;

impl OrderingStrategy for CoordinateOrder {
    fn order(&self, locs: &LocationSet) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..locs.len()).collect();
        idx.sort_by(|&a, &b| {
            let (pa, pb) = (locs.point(a), locs.point(b));
            pa.iter()
                .zip(pb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        idx
    }
}

/// Keeps the input order.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityOrder;

impl OrderingStrategy for IdentityOrder {
    fn order(&self, locs: &LocationSet) -> Vec<usize> {
        (0..locs.len()).collect()
    }
}

/// Uniformly random permutation from a seed.
#[derive(Debug, Clone, Copy)]
pub struct RandomOrder {
    pub seed: u64,
}

impl OrderingStrategy for RandomOrder {
    fn order(&self, locs: &LocationSet) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..locs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        idx
    }
}

pub fn order_locations(locs: &LocationSet, strategy: &dyn OrderingStrategy) -> Vec<usize> {
    strategy.order(locs)
}
