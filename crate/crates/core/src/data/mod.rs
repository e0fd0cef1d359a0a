//! Image ingestion, augmentation, patch sequences, traversal orders, the
//! synthetic corpus and k-means patch tokens.

mod crop;
mod dataset;
mod image;
mod kmeans;
mod ordering;
mod patch;
mod synthetic;

pub use crop::{random_resized_crop, resize_full, resize_region, sample_crop_box, CropBox, CropParams, CROP_ATTEMPTS};
pub use dataset::{class_count, load_dataset, write_synthetic_dataset, Manifest, ManifestEntry, MANIFEST_NAME};
pub use image::{decode_image, Image, ImageFormat, CHANNELS};
pub use kmeans::{fit_kmeans_tokenizer, tokenize_patches, KMeansFit, PatchTokenizer};
pub use ordering::{Ordering, OrderingKind};
pub use patch::{normalize_patch_targets, patchify, patchify_batch, unpatchify, PatchSequence, TARGET_NORM_EPS};
pub use synthetic::{
    class_texture, generate_synthetic_dataset, split_indices, ClassTexture, LabeledImage, SyntheticSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),
    #[error("pixel {index} outside [0, 1]")]
    InvalidPixel { index: usize },
    #[error("{height}x{width} image is not divisible into {patch}-pixel patches")]
    Divisibility { height: usize, width: usize, patch: usize },
    #[error("ordering grid does not match the patch grid")]
    OrderingMismatch,
    #[error("random ordering requires a seed")]
    MissingSeed,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
