//! k-means codebooks for discrete patch targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::patch::PatchSequence;
use crate::data::DataError;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Codebook of `V` centroids over raw patch vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokenizer<T> {
    codebook: Tensor<T>,
}

/// Result of [`fit_kmeans_tokenizer`].
#[derive(Clone, Debug)]
pub struct KMeansFit<T> {
    pub tokenizer: PatchTokenizer<T>,
    /// Inertia after each assignment step.
    pub inertia: Vec<T>,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid; ties go to the lowest index.
fn nearest<T: Scalar>(point: &[T], codebook: &[T], dim: usize) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in codebook.chunks(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

impl<T: Scalar> PatchTokenizer<T> {
    pub fn from_codebook(codebook: Tensor<T>) -> Result<Self, DataError> {
        if codebook.rank() != 2 || codebook.shape()[0] < 2 || !codebook.is_finite() {
            return Err(DataError::InvalidArgument(
                "codebook must be a finite [V >= 2, dim] matrix".into(),
            ));
        }
        Ok(Self { codebook })
    }

    pub fn vocab(&self) -> usize {
        self.codebook.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codebook.shape()[1]
    }

    pub fn codebook(&self) -> &Tensor<T> {
        &self.codebook
    }

    pub fn encode(&self, point: &[T]) -> Result<usize, DataError> {
        if point.len() != self.dim() {
            return Err(DataError::DimensionMismatch {
                expected: self.dim(),
                got: point.len(),
            });
        }
        Ok(nearest(point, self.codebook.data(), self.dim()).0)
    }
}

/// Lloyd iterations from a seeded k-means++ start. A centroid that loses all
/// its points is moved onto the point farthest from its current centroid.
pub fn fit_kmeans_tokenizer<T: Scalar>(
    points: &Tensor<T>,
    vocab: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeansFit<T>, DataError> {
    if points.rank() != 2 {
        return Err(DataError::InvalidArgument("k-means input must be [N, dim]".into()));
    }
    let (n, dim) = (points.shape()[0], points.shape()[1]);
    if vocab < 2 || n < vocab {
        return Err(DataError::InvalidArgument(format!(
            "need N >= V >= 2, got N={n}, V={vocab}"
        )));
    }
    let data = points.data();
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(chosen[0])).as_f64()).collect();
    while chosen.len() < vocab {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= vocab")
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(row(i), row(next)).as_f64());
        }
    }
    let mut codebook: Vec<T> = chosen.iter().flat_map(|&i| row(i).iter().copied()).collect();

    let mut inertia = Vec::with_capacity(iters + 1);
    let mut assign = vec![0usize; n];
    let mut dists = vec![T::zero(); n];
    for it in 0..=iters {
        for i in 0..n {
            let (j, d) = nearest(row(i), &codebook, dim);
            assign[i] = j;
            dists[i] = d;
        }
        inertia.push(dists.iter().copied().sum());
        if it == iters {
            break;
        }
        let mut sums = vec![T::zero(); vocab * dim];
        let mut counts = vec![0usize; vocab];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..vocab {
            let dst = &mut codebook[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                let inv = T::one() / T::from_usize_lossy(counts[j]);
                for (c, &s) in dst.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| {
                        dists[a]
                            .partial_cmp(&dists[b])
                            .expect("finite distances")
                            .then(b.cmp(&a))
                    })
                    .expect("n >= vocab");
                taken[far] = true;
                dst.copy_from_slice(row(far));
            }
        }
    }
    let codebook = Tensor::new([vocab, dim], codebook).expect("codebook shape");
    Ok(KMeansFit {
        tokenizer: PatchTokenizer::from_codebook(codebook)?,
        inertia,
    })
}

/// Token id of every raw patch, `[batch][K]`.
pub fn tokenize_patches<T: Scalar>(
    tok: &PatchTokenizer<T>,
    seq: &PatchSequence<T>,
) -> Result<Vec<Vec<usize>>, DataError> {
    let d = seq.patch_dim();
    if d != tok.dim() {
        return Err(DataError::DimensionMismatch {
            expected: tok.dim(),
            got: d,
        });
    }
    let k = seq.k();
    seq.raw_targets
        .data()
        .chunks(d * k)
        .map(|img| img.chunks(d).map(|p| tok.encode(p)).collect())
        .collect()
}
