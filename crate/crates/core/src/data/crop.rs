//! Random resized crop with horizontal flip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::{Image, CHANNELS};
use crate::data::DataError;

/// Attempts before falling back to a centered crop.
pub const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub out_size: usize,
    /// Bounds on the crop's fraction of the source area.
    pub scale: (f64, f64),
    /// Bounds on width / height.
    pub ratio: (f64, f64),
    pub flip_prob: f64,
}

impl CropParams {
    /// Pre-training defaults at the given output size.
    pub fn pretrain(out_size: usize) -> Self {
        Self {
            out_size,
            scale: (0.4, 1.0),
            ratio: (0.75, 1.33),
            flip_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.scale;
        let (rlo, rhi) = self.ratio;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(DataError::InvalidArgument(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < low <= high <= 1"
            )));
        }
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(DataError::InvalidArgument(format!(
                "crop ratio range ({rlo}, {rhi}) is empty"
            )));
        }
        if self.out_size == 0 {
            return Err(DataError::InvalidArgument("crop output size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(DataError::InvalidArgument("flip probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Integer crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Set when every random attempt was rejected.
    pub fallback: bool,
}

impl CropBox {
    pub fn area_fraction(&self, src_height: usize, src_width: usize) -> f64 {
        (self.height * self.width) as f64 / (src_height * src_width) as f64
    }
}

/// Draws a crop whose realized area fraction lies in `scale` and whose aspect
/// ratio lies in `ratio`. After [`CROP_ATTEMPTS`] rejections the largest
/// centered crop not exceeding the upper scale bound is used.
pub fn sample_crop_box<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> CropBox {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w == 0 || h == 0 || w > width || h > height {
            continue;
        }
        let frac = (w * h) as f64 / area;
        if frac < scale.0 || frac > scale.1 {
            continue;
        }
        let top = rng.random_range(0..=height - h);
        let left = rng.random_range(0..=width - w);
        return CropBox {
            top,
            left,
            height: h,
            width: w,
            fallback: false,
        };
    }
    center_fallback(height, width, scale, ratio)
}

fn center_fallback(height: usize, width: usize, scale: (f64, f64), ratio: (f64, f64)) -> CropBox {
    let area = (height * width) as f64;
    let aspect = (width as f64 / height as f64).clamp(ratio.0, ratio.1);
    let target = area * scale.1;
    let mut w = ((target * aspect).sqrt().floor() as usize).clamp(1, width);
    let mut h = ((target / aspect).sqrt().floor() as usize).clamp(1, height);
    // shrink until the area bound holds exactly
    while (w * h) as f64 > target && (w > 1 || h > 1) {
        if w >= h && w > 1 {
            w -= 1;
        } else {
            h -= 1;
        }
    }
    CropBox {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
        fallback: true,
    }
}

/// Bilinear resize of the `bbox` region to `out x out` (half-pixel centers).
pub fn resize_region(img: &Image, bbox: &CropBox, out: usize) -> Image {
    let src_coord = |o: usize, src_len: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * src_len as f64 / out as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let mut pixels = Vec::with_capacity(out * out * CHANNELS);
    for oy in 0..out {
        let (y0, y1, fy) = src_coord(oy, bbox.height);
        for ox in 0..out {
            let (x0, x1, fx) = src_coord(ox, bbox.width);
            for c in 0..CHANNELS {
                let p = |y: usize, x: usize| img.get(bbox.top + y, bbox.left + x, c);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out, out, pixels).expect("resampled pixels stay in range")
}

/// Random resized crop followed by a horizontal flip with probability
/// `params.flip_prob`. Returns the image and the crop that produced it.
pub fn random_resized_crop<R: Rng + ?Sized>(
    img: &Image,
    params: &CropParams,
    rng: &mut R,
) -> Result<(Image, CropBox), DataError> {
    params.validate()?;
    let bbox = sample_crop_box(img.height(), img.width(), params.scale, params.ratio, rng);
    let out = resize_region(img, &bbox, params.out_size);
    let flip = rng.random_bool(params.flip_prob);
    Ok((if flip { out.flip_horizontal() } else { out }, bbox))
}

/// Plain resize of the whole image (evaluation path).
pub fn resize_full(img: &Image, out: usize) -> Image {
    let bbox = CropBox {
        top: 0,
        left: 0,
        height: img.height(),
        width: img.width(),
        fallback: false,
    };
    resize_region(img, &bbox, out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gradient_image(side: usize) -> Image {
        Image::from_fn(side, side, |y, x, c| ((y * side + x + c) % 17) as f32 / 16.0).unwrap()
    }

    #[test]
    fn degenerate_range_is_full_resize() {
        let img = gradient_image(16);
        let params = CropParams {
            out_size: 16,
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            flip_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, bbox) = random_resized_crop(&img, &params, &mut rng).unwrap();
        assert_eq!((bbox.height, bbox.width, bbox.top, bbox.left), (16, 16, 0, 0));
        assert_eq!(out, img);
    }

    #[test]
    fn seeded_runs_match() {
        let img = gradient_image(24);
        let params = CropParams::pretrain(16);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..5)
                .map(|_| random_resized_crop(&img, &params, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn realized_area_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let b = sample_crop_box(32, 32, (0.4, 1.0), (0.75, 1.33), &mut rng);
            let f = b.area_fraction(32, 32);
            assert!((0.4..=1.0).contains(&f), "{b:?} -> {f}");
            assert!(b.top + b.height <= 32 && b.left + b.width <= 32);
        }
    }

    #[test]
    fn infeasible_request_falls_back_to_center() {
        // a 1x8 strip cannot host a near-square crop of half its area
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_crop_box(1, 8, (0.5, 0.5), (1.0, 1.0), &mut rng);
        assert!(b.fallback);
        assert!(b.area_fraction(1, 8) <= 0.5);
        assert_eq!(b.height, 1);
    }

    #[test]
    fn invalid_scale_is_rejected() {
        let img = gradient_image(8);
        let mut params = CropParams::pretrain(8);
        params.scale = (0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_resized_crop(&img, &params, &mut rng).is_err());
        params.scale = (0.6, 0.5);
        assert!(random_resized_crop(&img, &params, &mut rng).is_err());
    }

    #[test]
    fn flip_is_applied_about_half_the_time() {
        let img = gradient_image(8);
        let params = CropParams {
            out_size: 8,
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            flip_prob: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let flipped = (0..400)
            .filter(|_| random_resized_crop(&img, &params, &mut rng).unwrap().0 != img)
            .count();
        assert!((150..250).contains(&flipped), "{flipped}");
    }
}
