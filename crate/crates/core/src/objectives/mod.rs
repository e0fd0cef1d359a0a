//! Pre-training losses, prefix sampling and chunked loss diagnostics.
//!
//! Autoregressive losses use shifted alignment: the output at slot `k`
//! predicts the target at slot `k + 1`. Per-patch entries are indexed by the
//! target slot, so slot 0 is never predicted, and with prefix length `S`
//! every target slot below `S` is excluded as well.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatchSequence;
use crate::model::{head_graph, trunk_graph, ModelError, ModelState};
use crate::numerics::{AttentionPlan, NumericsError, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence of length {0} is too short for next-patch prediction")]
    TooShort(usize),
    #[error("prefix length {s} outside [1, {max}]")]
    PrefixOutOfRange { s: usize, max: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("mask ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("{k} slots do not split into {chunks} equal chunks")]
    Divisibility { k: usize, chunks: usize },
    #[error("chunk {0} contains no predicted patch")]
    EmptyChunk(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Loss values with the per-patch breakdown; `None` marks excluded slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean over predicted patches.
    pub total: f64,
    /// `[batch][K]` loss by target slot.
    pub per_patch: Vec<Vec<Option<f64>>>,
    pub predicted_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_means: Option<Vec<f64>>,
}

impl LossReport {
    fn from_entries(per_patch: Vec<Vec<Option<f64>>>) -> Self {
        let included: Vec<f64> = per_patch.iter().flatten().flatten().copied().collect();
        let predicted_count = included.len();
        let total = if predicted_count == 0 {
            0.0
        } else {
            included.iter().sum::<f64>() / predicted_count as f64
        };
        Self {
            total,
            per_patch,
            predicted_count,
            chunk_means: None,
        }
    }
}

/// Draws `S` uniformly from `1..=K-1`.
pub fn sample_prefix_length<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<usize, ObjectiveError> {
    if k < 2 {
        return Err(ObjectiveError::TooShort(k));
    }
    Ok(rng.random_range(1..k))
}

/// Expands `prefixes` (one shared or one per batch element) and validates it.
fn prefix_per_batch(prefixes: &[usize], batch: usize, k: usize) -> Result<Vec<usize>, ObjectiveError> {
    if k < 2 {
        return Err(ObjectiveError::TooShort(k));
    }
    let out = match prefixes.len() {
        1 => vec![prefixes[0]; batch],
        n if n == batch => prefixes.to_vec(),
        n => {
            return Err(ObjectiveError::Shape(format!(
                "{n} prefix lengths for a batch of {batch}"
            )))
        }
    };
    if let Some(&s) = out.iter().find(|&&s| s == 0 || s >= k) {
        return Err(ObjectiveError::PrefixOutOfRange { s, max: k - 1 });
    }
    Ok(out)
}

/// `(batch, K, last)` of a rank-3 shape.
fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize), ObjectiveError> {
    match shape {
        &[b, k, d] => Ok((b, k, d)),
        _ => Err(ObjectiveError::Shape(format!(
            "{what} must be [batch, K, dim], got {shape:?}"
        ))),
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize), ObjectiveError> {
    if a.shape() != b.shape() {
        return Err(ObjectiveError::Shape(format!(
            "predictions {:?} vs targets {:?}",
            a.shape(),
            b.shape()
        )));
    }
    dims3(a.shape(), "predictions")
}

fn patch_mse<T: Scalar>(pred: &[T], target: &[T]) -> f64 {
    let d = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let e = p.as_f64() - t.as_f64();
            e * e
        })
        .sum::<f64>()
        / d
}

/// Next-patch pixel regression: squared error averaged over the patch
/// dimension, target slots below `S` excluded, mean over predicted patches.
pub fn ar_pixel_loss<T: Scalar>(
    predictions: &Tensor<T>,
    targets: &Tensor<T>,
    prefixes: &[usize],
) -> Result<LossReport, ObjectiveError> {
    let (batch, k, d) = same_shape(predictions, targets)?;
    let prefixes = prefix_per_batch(prefixes, batch, k)?;
    let (p, t) = (predictions.data(), targets.data());
    let per_patch = (0..batch)
        .map(|b| {
            (0..k)
                .map(|slot| {
                    (slot >= prefixes[b]).then(|| {
                        let src = (b * k + slot - 1) * d;
                        let dst = (b * k + slot) * d;
                        patch_mse(&p[src..src + d], &t[dst..dst + d])
                    })
                })
                .collect()
        })
        .collect();
    Ok(LossReport::from_entries(per_patch))
}

/// Next-token cross-entropy with the same alignment and exclusions as
/// [`ar_pixel_loss`].
pub fn ar_token_loss<T: Scalar>(
    logits: &Tensor<T>,
    tokens: &[Vec<usize>],
    prefixes: &[usize],
) -> Result<LossReport, ObjectiveError> {
    let (batch, k, vocab) = dims3(logits.shape(), "logits")?;
    check_tokens(tokens, batch, k, vocab)?;
    let prefixes = prefix_per_batch(prefixes, batch, k)?;
    let l = logits.data();
    let per_patch = (0..batch)
        .map(|b| {
            (0..k)
                .map(|slot| {
                    (slot >= prefixes[b]).then(|| {
                        let row = &l[(b * k + slot - 1) * vocab..(b * k + slot) * vocab];
                        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                        let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
                        lse - row[tokens[b][slot]].as_f64()
                    })
                })
                .collect()
        })
        .collect();
    Ok(LossReport::from_entries(per_patch))
}

fn check_tokens(tokens: &[Vec<usize>], batch: usize, k: usize, vocab: usize) -> Result<(), ObjectiveError> {
    if tokens.len() != batch || tokens.iter().any(|t| t.len() != k) {
        return Err(ObjectiveError::Shape(format!("token ids must be [{batch}][{k}]")));
    }
    if let Some(&token) = tokens.iter().flatten().find(|&&t| t >= vocab) {
        return Err(ObjectiveError::TokenOutOfRange { token, vocab });
    }
    Ok(())
}

/// Number of masked slots for `ratio`: `round(ratio * K)`.
pub fn mask_count(k: usize, ratio: f64) -> Result<usize, ObjectiveError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ObjectiveError::BadRatio(ratio));
    }
    Ok((ratio * k as f64).round() as usize)
}

/// Uniformly chosen set of exactly `round(ratio * K)` masked slots.
pub fn sample_mask<R: Rng + ?Sized>(k: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>, ObjectiveError> {
    let n = mask_count(k, ratio)?;
    let mut mask = vec![false; k];
    for i in rand::seq::index::sample(rng, k, n) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Unshifted pixel regression over masked slots only.
pub fn masked_pixel_loss<T: Scalar>(
    predictions: &Tensor<T>,
    targets: &Tensor<T>,
    mask: &[Vec<bool>],
) -> Result<LossReport, ObjectiveError> {
    let (batch, k, d) = same_shape(predictions, targets)?;
    if mask.len() != batch || mask.iter().any(|m| m.len() != k) {
        return Err(ObjectiveError::Shape(format!("mask must be [{batch}][{k}]")));
    }
    let (p, t) = (predictions.data(), targets.data());
    let per_patch = (0..batch)
        .map(|b| {
            (0..k)
                .map(|slot| {
                    mask[b][slot].then(|| {
                        let at = (b * k + slot) * d;
                        patch_mse(&p[at..at + d], &t[at..at + d])
                    })
                })
                .collect()
        })
        .collect();
    Ok(LossReport::from_entries(per_patch))
}

/// Mean loss per contiguous chunk of target slots, pooled over the batch.
/// Weighting chunk means by their included counts recovers `report.total`.
pub fn per_chunk_loss(report: &LossReport, chunks: usize) -> Result<Vec<f64>, ObjectiveError> {
    let k = report.per_patch.first().map_or(0, Vec::len);
    if chunks == 0 || k == 0 || !k.is_multiple_of(chunks) {
        return Err(ObjectiveError::Divisibility { k, chunks });
    }
    let width = k / chunks;
    (0..chunks)
        .map(|c| {
            let vals: Vec<f64> = report
                .per_patch
                .iter()
                .flat_map(|row| row[c * width..(c + 1) * width].iter().flatten().copied())
                .collect();
            if vals.is_empty() {
                Err(ObjectiveError::EmptyChunk(c))
            } else {
                Ok(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect()
}

/// Attaches chunk means to a report.
pub fn with_chunks(mut report: LossReport, chunks: usize) -> Result<LossReport, ObjectiveError> {
    report.chunk_means = Some(per_chunk_loss(&report, chunks)?);
    Ok(report)
}

/// Constant `[batch, K - 1]` weights: `1 / count` on included shifted slots.
fn shifted_weights<T: Scalar>(prefixes: &[usize], batch: usize, k: usize) -> (Tensor<T>, usize) {
    let count: usize = prefixes.iter().map(|&s| k - s).sum();
    let w = T::one() / T::from_usize_lossy(count);
    let t = Tensor::from_fn([batch, k - 1], |i| {
        let (b, j) = (i / (k - 1), i % (k - 1));
        if j + 1 >= prefixes[b] {
            w
        } else {
            T::zero()
        }
    });
    (t, count)
}

/// Differentiable form of [`ar_pixel_loss`]; returns the scalar total.
pub fn ar_pixel_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    predictions: Var,
    targets: &Tensor<T>,
    prefixes: &[usize],
) -> Result<Var, ObjectiveError> {
    let (batch, k, d) = dims3(tape.shape(predictions), "predictions")?;
    if targets.shape() != [batch, k, d] {
        return Err(ObjectiveError::Shape(format!(
            "targets {:?} vs predictions {:?}",
            targets.shape(),
            [batch, k, d]
        )));
    }
    let prefixes = prefix_per_batch(prefixes, batch, k)?;
    let shifted: Vec<T> = targets
        .data()
        .chunks(k * d)
        .flat_map(|img| img[d..].iter().copied())
        .collect();
    let target = tape.constant(Tensor::new([batch, k - 1, d], shifted)?);
    let pred = tape.slice(predictions, 1, 0, k - 1)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let per = tape.mean_last(sq)?;
    let (w, _) = shifted_weights::<T>(&prefixes, batch, k);
    let w = tape.constant(w);
    let weighted = tape.mul(per, w)?;
    Ok(tape.sum(weighted)?)
}

/// Differentiable form of [`ar_token_loss`].
pub fn ar_token_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    tokens: &[Vec<usize>],
    prefixes: &[usize],
) -> Result<Var, ObjectiveError> {
    let (batch, k, vocab) = dims3(tape.shape(logits), "logits")?;
    check_tokens(tokens, batch, k, vocab)?;
    let prefixes = prefix_per_batch(prefixes, batch, k)?;
    let shifted = tape.slice(logits, 1, 0, k - 1)?;
    let logp = tape.log_softmax(shifted)?;
    let index = tokens.iter().flat_map(|t| t[1..].iter().copied()).collect();
    let picked = tape.pick(logp, index)?;
    let (w, _) = shifted_weights::<T>(&prefixes, batch, k);
    let w = tape.constant(w.map(|v| -v));
    let weighted = tape.mul(picked, w)?;
    Ok(tape.sum(weighted)?)
}

/// Differentiable form of [`masked_pixel_loss`].
pub fn masked_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    predictions: Var,
    targets: &Tensor<T>,
    mask: &[Vec<bool>],
) -> Result<Var, ObjectiveError> {
    let (batch, k, _) = dims3(tape.shape(predictions), "predictions")?;
    if targets.shape() != tape.shape(predictions) {
        return Err(ObjectiveError::Shape("targets do not match predictions".into()));
    }
    if mask.len() != batch || mask.iter().any(|m| m.len() != k) {
        return Err(ObjectiveError::Shape(format!("mask must be [{batch}][{k}]")));
    }
    let count = mask.iter().flatten().filter(|&&m| m).count();
    if count == 0 {
        return Err(ObjectiveError::BadRatio(0.0));
    }
    let w = T::one() / T::from_usize_lossy(count);
    let flat: Vec<bool> = mask.iter().flatten().copied().collect();
    let weights = Tensor::from_fn([batch, k], |i| if flat[i] { w } else { T::zero() });
    let target = tape.constant(targets.clone());
    let diff = tape.sub(predictions, target)?;
    let sq = tape.mul(diff, diff)?;
    let per = tape.mean_last(sq)?;
    let weights = tape.constant(weights);
    let weighted = tape.mul(per, weights)?;
    Ok(tape.sum(weighted)?)
}

/// Runs the model over `seq` with a sampled mask and a bidirectional plan,
/// scoring normalized-pixel reconstruction of the masked slots.
pub fn masked_modeling_loss<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    seq: &PatchSequence<T>,
    ratio: f64,
    rng: &mut R,
) -> Result<LossReport, ObjectiveError> {
    let (batch, k) = (seq.batch(), seq.k());
    let mask = (0..batch)
        .map(|_| sample_mask(k, ratio, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = [AttentionPlan::bidirectional(k)?];
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, false);
    let g = trunk_graph(
        state,
        &mut tape,
        &bound,
        &seq.inputs,
        &seq.grid_positions,
        Some(&mask),
        &plan,
        &[],
    )?;
    let out = head_graph(state, &mut tape, &bound, g.features, &seq.grid_positions, &plan)?;
    masked_pixel_loss(tape.value(out), &seq.norm_targets, &mask)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn prefix_sampling_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_prefix_length(2, &mut rng).unwrap() == 1));
        assert!(sample_prefix_length(1, &mut rng).is_err());
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            assert_eq!(
                sample_prefix_length(10, &mut a).unwrap(),
                sample_prefix_length(10, &mut b).unwrap()
            );
        }
    }

    #[test]
    fn perfect_prediction_and_boundary() {
        let t = random([2, 5, 3], 1);
        // predictions shifted so output k equals target k+1
        let mut p = t.clone();
        for b in 0..2 {
            for s in 0..4 {
                for j in 0..3 {
                    p.data_mut()[(b * 5 + s) * 3 + j] = t.data()[(b * 5 + s + 1) * 3 + j];
                }
            }
        }
        assert_eq!(ar_pixel_loss(&p, &t, &[1]).unwrap().total, 0.0);
        assert!(ar_pixel_loss(&random([1, 5, 3], 2), &t, &[4]).is_err());
        let r = ar_pixel_loss(&random([2, 5, 3], 2), &t, &[4]).unwrap();
        assert_eq!(r.predicted_count, 2);
        assert!(ar_pixel_loss(&p, &t, &[5]).is_err());
        assert!(ar_pixel_loss(&p, &t, &[0]).is_err());
    }

    #[test]
    fn pixel_loss_matches_scalar_loop() {
        let (b, k, d, s) = (2, 8, 5, 3);
        let p = random([b, k, d], 3);
        let t = random([b, k, d], 4);
        let mut total = 0.0;
        let mut n = 0;
        for bi in 0..b {
            for target in s..k {
                let mut acc = 0.0;
                for j in 0..d {
                    let e = p.data()[(bi * k + target - 1) * d + j] - t.data()[(bi * k + target) * d + j];
                    acc += e * e;
                }
                total += acc / d as f64;
                n += 1;
            }
        }
        let r = ar_pixel_loss(&p, &t, &[s]).unwrap();
        assert!((r.total - total / n as f64).abs() < 1e-10);
        assert_eq!(r.predicted_count, n);
        assert!(r.per_patch.iter().all(|row| row[..s].iter().all(Option::is_none)));
    }

    #[test]
    fn copy_model_scores_consecutive_differences() {
        let t = random([1, 6, 4], 5);
        let r = ar_pixel_loss(&t, &t, &[1]).unwrap();
        let direct: f64 = (1..6)
            .map(|s| {
                (0..4)
                    .map(|j| (t.data()[s * 4 + j] - t.data()[(s - 1) * 4 + j]).powi(2))
                    .sum::<f64>()
                    / 4.0
            })
            .sum::<f64>()
            / 5.0;
        assert!((r.total - direct).abs() < 1e-12);
    }

    #[test]
    fn token_loss_uniform_and_loop() {
        let logits = Tensor::<f64>::zeros([1, 4, 16]);
        let tokens = vec![vec![0, 3, 7, 15]];
        let r = ar_token_loss(&logits, &tokens, &[1]).unwrap();
        assert!((r.total - 16f64.ln()).abs() < 1e-12);

        let logits = random([2, 5, 6], 6);
        let tokens = vec![vec![1, 2, 3, 4, 5], vec![0, 0, 5, 1, 2]];
        let r = ar_token_loss(&logits, &tokens, &[2, 1]).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for (b, s) in [(0usize, 2usize), (1, 1)] {
            for target in s..5 {
                let row: Vec<f64> = (0..6).map(|v| logits.data()[(b * 5 + target - 1) * 6 + v]).collect();
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                total += -(row[tokens[b][target]].exp() / z).ln();
                n += 1;
            }
        }
        assert!((r.total - total / n as f64).abs() < 1e-10);
        assert!(matches!(
            ar_token_loss(&logits, &[vec![9; 5], vec![0; 5]], &[1]),
            Err(ObjectiveError::TokenOutOfRange { token: 9, vocab: 6 })
        ));
    }

    #[test]
    fn token_loss_vanishes_with_margin() {
        let tokens = vec![vec![0, 1, 2]];
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0] {
            let logits = Tensor::from_fn([1, 3, 3], |i| {
                let (slot, v) = (i / 3, i % 3);
                if slot + 1 < 3 && v == tokens[0][slot + 1] {
                    margin
                } else {
                    0.0
                }
            });
            let total = ar_token_loss(&logits, &tokens, &[1]).unwrap().total;
            assert!(total < last);
            last = total;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn mask_counts_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_mask(64, 0.75, &mut rng).unwrap();
        assert_eq!(m.iter().filter(|&&v| v).count(), 48);
        assert_eq!(mask_count(64, 0.5).unwrap(), 32);
        assert!(sample_mask(8, 1.0, &mut rng).is_err());
        assert!(sample_mask(8, 0.0, &mut rng).is_err());
    }

    #[test]
    fn masked_loss_ignores_visible_slots() {
        let t = random([1, 4, 3], 7);
        let mut p = t.clone();
        p.data_mut()[..3].fill(9.0);
        let mask = vec![vec![false, true, false, false]];
        let r = masked_pixel_loss(&p, &t, &mask).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.predicted_count, 1);
    }

    #[test]
    fn chunk_means_partition_total() {
        let p = random([3, 16, 4], 8);
        let t = random([3, 16, 4], 9);
        let r = ar_pixel_loss(&p, &t, &[1]).unwrap();
        let means = per_chunk_loss(&r, 8).unwrap();
        assert_eq!(means.len(), 8);
        // chunk 0 holds only target slot 1 in each image
        let hand: f64 = (0..3).map(|b| r.per_patch[b][1].unwrap()).sum::<f64>() / 3.0;
        assert!((means[0] - hand).abs() < 1e-12);
        let hand: f64 = (0..3)
            .flat_map(|b| [r.per_patch[b][2].unwrap(), r.per_patch[b][3].unwrap()])
            .sum::<f64>()
            / 6.0;
        assert!((means[1] - hand).abs() < 1e-12);
        let weighted = (means[0] * 3.0 + means[1..].iter().sum::<f64>() * 6.0) / 45.0;
        assert!((weighted - r.total).abs() < 1e-6);
        assert!(matches!(
            per_chunk_loss(&r, 5),
            Err(ObjectiveError::Divisibility { .. })
        ));
    }

    #[test]
    fn uniform_losses_give_equal_chunks() {
        let t = Tensor::<f64>::zeros([1, 8, 2]);
        let p = Tensor::<f64>::ones([1, 8, 2]);
        let r = ar_pixel_loss(&p, &t, &[1]).unwrap();
        let means = per_chunk_loss(&r, 4).unwrap();
        assert!(means.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let p = random([2, 6, 3], 10);
        let t = random([2, 6, 3], 11);
        let mut tape = Tape::new();
        let v = tape.param(p.clone());
        let l = ar_pixel_loss_graph(&mut tape, v, &t, &[2, 4]).unwrap();
        let expect = ar_pixel_loss(&p, &t, &[2, 4]).unwrap().total;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        let grads = tape.backward(l).unwrap();
        let g = grads.get(v).unwrap();
        // outputs that feed excluded targets, and the last output, get no gradient
        for (b, s) in [(0usize, 2usize), (1, 4)] {
            for slot in 0..6 {
                let row = &g.data()[(b * 6 + slot) * 3..(b * 6 + slot + 1) * 3];
                let feeds_included = slot + 1 >= s && slot + 1 < 6;
                assert_eq!(row.iter().any(|&x| x != 0.0), feeds_included, "b {b} slot {slot}");
            }
        }

        let tokens = vec![vec![0, 1, 2, 0, 1, 2], vec![2, 2, 1, 1, 0, 0]];
        let mut tape = Tape::new();
        let v = tape.param(p.clone());
        let l = ar_token_loss_graph(&mut tape, v, &tokens, &[1]).unwrap();
        let expect = ar_token_loss(&p, &tokens, &[1]).unwrap().total;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        let mask = vec![vec![true, false, false, true, false, false], vec![false; 6]];
        let mut tape = Tape::new();
        let v = tape.param(p.clone());
        let l = masked_loss_graph(&mut tape, v, &t, &mask).unwrap();
        let expect = masked_pixel_loss(&p, &t, &mask).unwrap().total;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        let g = g.get(v).unwrap();
        for (i, row) in g.data().chunks(3).enumerate() {
            assert_eq!(row.iter().any(|&x| x != 0.0), mask[i / 6][i % 6]);
        }
    }

    #[test]
    fn report_serializes_with_null_exclusions() {
        let r = ar_pixel_loss(&random([1, 3, 2], 1), &random([1, 3, 2], 2), &[1]).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["per_patch"][0][0].is_null());
        assert_eq!(json["predicted_count"], 2);
    }
}
