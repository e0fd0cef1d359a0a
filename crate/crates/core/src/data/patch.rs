//! Patch decomposition and per-patch target normalization.

use crate::data::image::{Image, CHANNELS};
use crate::data::ordering::Ordering;
use crate::data::DataError;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Default epsilon added to the per-patch variance.
pub const TARGET_NORM_EPS: f64 = 1e-6;

/// A batch of images as ordered, flattened patches.
///
/// Patches are flattened row-major within the patch with interleaved
/// channels, i.e. index `(py * P + px) * 3 + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T> {
    pub patch_size: usize,
    pub grid: (usize, usize),
    /// `[batch, K, patch_dim]` in traversal order.
    pub inputs: Tensor<T>,
    pub raw_targets: Tensor<T>,
    pub norm_targets: Tensor<T>,
    /// `(row, col)` of the patch held by each slot.
    pub grid_positions: Vec<(usize, usize)>,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn batch(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn patch_dim(&self) -> usize {
        self.inputs.shape()[2]
    }

    /// Concatenates single-image sequences that share an ordering.
    pub fn stack(parts: &[PatchSequence<T>]) -> Result<Self, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::InvalidArgument("cannot stack zero sequences".into()))?;
        if parts
            .iter()
            .any(|p| p.grid_positions != first.grid_positions || p.patch_dim() != first.patch_dim())
        {
            return Err(DataError::OrderingMismatch);
        }
        let batch: usize = parts.iter().map(|p| p.batch()).sum();
        let shape = [batch, first.k(), first.patch_dim()];
        let cat = |f: fn(&PatchSequence<T>) -> &Tensor<T>| {
            let data = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
            Tensor::new(shape, data).expect("consistent batch shape")
        };
        Ok(Self {
            patch_size: first.patch_size,
            grid: first.grid,
            inputs: cat(|p| &p.inputs),
            raw_targets: cat(|p| &p.raw_targets),
            norm_targets: cat(|p| &p.norm_targets),
            grid_positions: first.grid_positions.clone(),
        })
    }
}

/// Splits `img` into `P x P` patches and lays them out in `ordering`'s slots.
/// Normalized targets are filled with [`TARGET_NORM_EPS`].
pub fn patchify<T: Scalar>(img: &Image, patch_size: usize, ordering: &Ordering) -> Result<PatchSequence<T>, DataError> {
    let p = patch_size;
    if p == 0 || !img.height().is_multiple_of(p) || !img.width().is_multiple_of(p) {
        return Err(DataError::Divisibility {
            height: img.height(),
            width: img.width(),
            patch: p,
        });
    }
    let grid = (img.height() / p, img.width() / p);
    if ordering.grid() != grid {
        return Err(DataError::OrderingMismatch);
    }
    let patch_dim = p * p * CHANNELS;
    let positions = ordering.grid_positions();
    let mut data = Vec::with_capacity(positions.len() * patch_dim);
    for &(gr, gc) in &positions {
        for py in 0..p {
            for px in 0..p {
                for c in 0..CHANNELS {
                    data.push(T::from_f32_lossy(img.get(gr * p + py, gc * p + px, c)));
                }
            }
        }
    }
    let raw = Tensor::new([1, positions.len(), patch_dim], data).expect("patch layout");
    let mut seq = PatchSequence {
        patch_size: p,
        grid,
        inputs: raw.clone(),
        norm_targets: raw.clone(),
        raw_targets: raw,
        grid_positions: positions,
    };
    seq = normalize_patch_targets(seq, T::lit(TARGET_NORM_EPS))?;
    Ok(seq)
}

/// Patchifies every image with the same ordering and stacks the results.
pub fn patchify_batch<T: Scalar>(
    images: &[Image],
    patch_size: usize,
    ordering: &Ordering,
) -> Result<PatchSequence<T>, DataError> {
    let parts = images
        .iter()
        .map(|img| patchify(img, patch_size, ordering))
        .collect::<Result<Vec<_>, _>>()?;
    PatchSequence::stack(&parts)
}

/// Recomputes `norm_targets` as `(x - mean) / sqrt(var + eps)` per patch, with
/// the population variance.
pub fn normalize_patch_targets<T: Scalar>(mut seq: PatchSequence<T>, eps: T) -> Result<PatchSequence<T>, DataError> {
    let d = seq.raw_targets.last_dim();
    if d < 2 {
        return Err(DataError::InvalidArgument("patch dimension must be at least 2".into()));
    }
    let inv_d = T::one() / T::from_usize_lossy(d);
    let mut out = Vec::with_capacity(seq.raw_targets.len());
    for patch in seq.raw_targets.data().chunks(d) {
        let mean = patch.iter().copied().sum::<T>() * inv_d;
        let var = patch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        out.extend(patch.iter().map(|&v| (v - mean) * inv_std));
    }
    seq.norm_targets = Tensor::new(seq.raw_targets.shape().to_vec(), out).expect("same shape");
    Ok(seq)
}

/// Places the patches of batch element `b` back on the grid.
pub fn unpatchify<T: Scalar>(seq: &PatchSequence<T>, b: usize) -> Result<Image, DataError> {
    let p = seq.patch_size;
    let (rows, cols) = seq.grid;
    let (h, w) = (rows * p, cols * p);
    let d = seq.patch_dim();
    let k = seq.k();
    let src = &seq.raw_targets.data()[b * k * d..(b + 1) * k * d];
    let mut pixels = vec![0f32; h * w * CHANNELS];
    for (slot, &(gr, gc)) in seq.grid_positions.iter().enumerate() {
        let patch = &src[slot * d..(slot + 1) * d];
        for py in 0..p {
            for px in 0..p {
                for c in 0..CHANNELS {
                    let y = gr * p + py;
                    let x = gc * p + px;
                    pixels[(y * w + x) * CHANNELS + c] = patch[(py * p + px) * CHANNELS + c].as_f32();
                }
            }
        }
    }
    Image::new(h, w, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ordering::OrderingKind;

    fn ordering(kind: OrderingKind, r: usize, c: usize) -> Ordering {
        Ordering::new(kind, r, c, Some(1)).unwrap()
    }

    #[test]
    fn raster_slots_follow_grid() {
        let img = Image::from_fn(4, 4, |y, x, _| (y * 4 + x) as f32 / 16.0).unwrap();
        let seq: PatchSequence<f64> = patchify(&img, 2, &ordering(OrderingKind::Raster, 2, 2)).unwrap();
        assert_eq!(seq.grid_positions, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(seq.k(), 4);
        assert_eq!(seq.patch_dim(), 12);
        // first pixel of slot 1 is image pixel (0, 2)
        assert_eq!(seq.inputs.data()[12], 2.0 / 16.0);
    }

    #[test]
    fn constant_image_gives_equal_patches_and_zero_targets() {
        let img = Image::new(4, 4, vec![0.3; 48]).unwrap();
        let seq: PatchSequence<f64> = patchify(&img, 2, &ordering(OrderingKind::Spiral, 2, 2)).unwrap();
        let d = seq.patch_dim();
        let first = &seq.inputs.data()[..d];
        for patch in seq.inputs.data().chunks(d) {
            assert_eq!(patch, first);
        }
        assert!(seq.norm_targets.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flattening_is_row_major_channel_interleaved() {
        let img = Image::from_fn(2, 2, |y, x, c| (y * 6 + x * 3 + c) as f32 / 12.0).unwrap();
        let seq: PatchSequence<f64> = patchify(&img, 2, &ordering(OrderingKind::Raster, 1, 1)).unwrap();
        let expect: Vec<f64> = (0..12).map(|i| f64::from(i as f32 / 12.0)).collect();
        assert_eq!(seq.inputs.data(), &expect[..]);
    }

    #[test]
    fn normalization_of_known_patch() {
        let raw = Tensor::from_f64([1, 1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let seq = PatchSequence {
            patch_size: 1,
            grid: (1, 1),
            inputs: raw.clone(),
            norm_targets: raw.clone(),
            raw_targets: raw,
            grid_positions: vec![(0, 0)],
        };
        let out = normalize_patch_targets(seq, 1e-6).unwrap();
        // mean 2.5, population variance 1.25
        let expect = [-1.5, -0.5, 0.5, 1.5].map(|v: f64| v / (1.25f64 + 1e-6).sqrt());
        for (a, b) in out.norm_targets.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.norm_targets.data()[0] + 1.3416).abs() < 1e-4);
        assert!((out.norm_targets.data()[1] + 0.4472).abs() < 1e-4);
    }

    #[test]
    fn errors_on_bad_geometry() {
        let img = Image::new(5, 4, vec![0.0; 60]).unwrap();
        assert!(matches!(
            patchify::<f32>(&img, 2, &ordering(OrderingKind::Raster, 2, 2)),
            Err(DataError::Divisibility { .. })
        ));
        let img = Image::new(4, 4, vec![0.0; 48]).unwrap();
        assert!(matches!(
            patchify::<f32>(&img, 2, &ordering(OrderingKind::Raster, 4, 1)),
            Err(DataError::OrderingMismatch)
        ));
    }

    #[test]
    fn stack_keeps_order() {
        let a = Image::new(2, 2, vec![0.1; 12]).unwrap();
        let b = Image::new(2, 2, vec![0.9; 12]).unwrap();
        let o = ordering(OrderingKind::Raster, 2, 2);
        let seq: PatchSequence<f32> = patchify_batch(&[a.clone(), b.clone()], 1, &o).unwrap();
        assert_eq!(seq.batch(), 2);
        assert_eq!(unpatchify(&seq, 0).unwrap(), a);
        assert_eq!(unpatchify(&seq, 1).unwrap(), b);
    }
}
