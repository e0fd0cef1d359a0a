//! Traversal orders over the patch grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingKind {
    Raster,
    Spiral,
    Checkerboard,
    /// One permutation drawn from a seed and shared by every image.
    Random,
}

impl OrderingKind {
    pub const ALL: [OrderingKind; 4] = [Self::Raster, Self::Spiral, Self::Checkerboard, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::Raster => "raster",
            Self::Spiral => "spiral",
            Self::Checkerboard => "checkerboard",
            Self::Random => "random",
        }
    }
}

impl std::str::FromStr for OrderingKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::InvalidArgument(format!("unknown ordering {s:?}")))
    }
}

/// Bijection from sequence slots to row-major grid indices: slot `j` holds the
/// patch at grid index `perm[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ordering {
    kind: OrderingKind,
    rows: usize,
    cols: usize,
    perm: Vec<usize>,
    seed: Option<u64>,
}

impl Ordering {
    pub fn new(kind: OrderingKind, rows: usize, cols: usize, seed: Option<u64>) -> Result<Self, DataError> {
        if rows == 0 || cols == 0 {
            return Err(DataError::InvalidArgument("ordering grid must be non-empty".into()));
        }
        let perm = match kind {
            OrderingKind::Raster => (0..rows * cols).collect(),
            OrderingKind::Spiral => spiral(rows, cols),
            OrderingKind::Checkerboard => checkerboard(rows, cols),
            OrderingKind::Random => {
                let seed = seed.ok_or(DataError::MissingSeed)?;
                let mut perm: Vec<usize> = (0..rows * cols).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                perm
            }
        };
        let seed = if kind == OrderingKind::Random { seed } else { None };
        Ok(Self {
            kind,
            rows,
            cols,
            perm,
            seed,
        })
    }

    pub fn kind(&self) -> OrderingKind {
        self.kind
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `(row, col)` of the patch in each slot.
    pub fn grid_positions(&self) -> Vec<(usize, usize)> {
        self.perm.iter().map(|&g| (g / self.cols, g % self.cols)).collect()
    }

    /// Slot that holds each grid index.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (slot, &g) in self.perm.iter().enumerate() {
            inv[g] = slot;
        }
        inv
    }
}

/// Clockwise square spiral from the cell `(ceil(r/2)-1, ceil(c/2)-1)`, moving
/// right, down, left, up with run lengths 1, 1, 2, 2, 3, 3, ... Cells outside
/// the grid are skipped.
fn spiral(rows: usize, cols: usize) -> Vec<usize> {
    let total = rows * cols;
    let mut out = Vec::with_capacity(total);
    let (mut r, mut c) = ((rows.div_ceil(2) - 1) as isize, (cols.div_ceil(2) - 1) as isize);
    let dirs = [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)];
    let visit = |r: isize, c: isize, out: &mut Vec<usize>| {
        if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
            out.push(r as usize * cols + c as usize);
        }
    };
    visit(r, c, &mut out);
    let mut run = 1;
    let mut dir = 0;
    while out.len() < total {
        for _ in 0..2 {
            let (dr, dc) = dirs[dir % 4];
            for _ in 0..run {
                r += dr;
                c += dc;
                visit(r, c, &mut out);
            }
            dir += 1;
        }
        run += 1;
    }
    out
}

/// Cells with even `row + col` in raster order, then the odd ones.
fn checkerboard(rows: usize, cols: usize) -> Vec<usize> {
    let parity = |g: &usize| (g / cols + g % cols) % 2;
    let even = (0..rows * cols).filter(|g| parity(g) == 0);
    let odd = (0..rows * cols).filter(|g| parity(g) == 1);
    even.chain(odd).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_is_identity() {
        let o = Ordering::new(OrderingKind::Raster, 2, 3, None).unwrap();
        assert_eq!(o.perm(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn checkerboard_two_by_two() {
        let o = Ordering::new(OrderingKind::Checkerboard, 2, 2, None).unwrap();
        assert_eq!(o.perm(), &[0, 3, 1, 2]);
    }

    #[test]
    fn spiral_three_by_three_by_hand() {
        // center, then right, down, left, left, up, up, right, right
        let o = Ordering::new(OrderingKind::Spiral, 3, 3, None).unwrap();
        assert_eq!(o.perm(), &[4, 5, 8, 7, 6, 3, 0, 1, 2]);
    }

    #[test]
    fn random_needs_seed_and_is_reproducible() {
        assert!(matches!(
            Ordering::new(OrderingKind::Random, 4, 4, None),
            Err(DataError::MissingSeed)
        ));
        let a = Ordering::new(OrderingKind::Random, 4, 4, Some(7)).unwrap();
        let b = Ordering::new(OrderingKind::Random, 4, 4, Some(7)).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.perm().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
        assert_ne!(
            a.perm(),
            Ordering::new(OrderingKind::Random, 4, 4, Some(8)).unwrap().perm()
        );
    }

    #[test]
    fn inverse_round_trips() {
        let o = Ordering::new(OrderingKind::Spiral, 4, 5, None).unwrap();
        let inv = o.inverse();
        for (slot, &g) in o.perm().iter().enumerate() {
            assert_eq!(inv[g], slot);
        }
    }

    #[test]
    fn names_parse_back() {
        for k in OrderingKind::ALL {
            assert_eq!(k.name().parse::<OrderingKind>().unwrap(), k);
        }
        assert!("zigzag".parse::<OrderingKind>().is_err());
    }
}
