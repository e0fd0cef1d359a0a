//! Fixed 2D sinusoidal position embeddings anchored to grid coordinates.

use crate::model::ModelError;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Embedding table `[rows * cols, d]` indexed by row-major grid index.
///
/// The first `d/2` entries encode the row and the last `d/2` the column. Each
/// half interleaves `sin(p w_i), cos(p w_i)` with `w_i = 10000^(-4i/d)`.
pub fn sinusoidal_pos_embed<T: Scalar>(grid: (usize, usize), d: usize) -> Result<Tensor<T>, ModelError> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(ModelError::InvalidConfig(format!(
            "embedding width {d} is not divisible by 4"
        )));
    }
    let half = d / 2;
    let encode = |pos: usize, out: &mut Vec<T>| {
        for i in 0..half / 2 {
            let w = 10000f64.powf(-(2.0 * i as f64) / half as f64);
            let a = pos as f64 * w;
            out.push(T::lit(a.sin()));
            out.push(T::lit(a.cos()));
        }
    };
    let (rows, cols) = grid;
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            encode(r, &mut data);
            encode(c, &mut data);
        }
    }
    Ok(Tensor::new([rows * cols, d], data).expect("table shape"))
}

/// Embeddings gathered into slot order, `[K, d]`.
pub fn slot_pos_embed<T: Scalar>(
    grid: (usize, usize),
    positions: &[(usize, usize)],
    d: usize,
) -> Result<Tensor<T>, ModelError> {
    let table = sinusoidal_pos_embed::<T>(grid, d)?;
    let mut data = Vec::with_capacity(positions.len() * d);
    for &(r, c) in positions {
        if r >= grid.0 || c >= grid.1 {
            return Err(ModelError::PlanMismatch(format!(
                "grid position ({r}, {c}) outside {grid:?}"
            )));
        }
        let g = r * grid.1 + c;
        data.extend_from_slice(&table.data()[g * d..(g + 1) * d]);
    }
    Ok(Tensor::new([positions.len(), d], data).expect("slot shape"))
}
