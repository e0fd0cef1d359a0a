//! The pre-training loop and chunked validation diagnostics.

use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    fit_kmeans_tokenizer, patchify_batch, random_resized_crop, resize_full, split_indices, tokenize_patches,
    CropParams, Image, Ordering, OrderingKind, PatchSequence, PatchTokenizer,
};
use crate::model::{head_graph, init_model, trunk_graph, ModelConfig, ModelError, ModelState, TargetKind};
use crate::numerics::{AttentionPlan, NumericsError, Tape, Tensor, Var};
use crate::objectives::{
    ar_pixel_loss, ar_pixel_loss_graph, ar_token_loss, ar_token_loss_graph, masked_loss_graph, masked_pixel_loss,
    per_chunk_loss, sample_mask, sample_prefix_length, LossReport, ObjectiveError,
};
use crate::trainer::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::trainer::metrics::{ndjson_path, read_metrics, MetricRecord, MetricsWriter};
use crate::trainer::optim::{adamw_step, clip_gradients, lr_schedule, AdamWConfig, OptimizerState, ScheduleConfig};
use crate::trainer::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    /// Next-patch pixel regression.
    ArPixel,
    /// Next-token cross-entropy over a k-means codebook fitted on the
    /// training patches; the vocabulary comes from the model target.
    ArToken { kmeans_iters: usize },
    /// Masked-patch reconstruction with bidirectional attention.
    Masked { ratio: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub ordering: OrderingKind,
    #[serde(default)]
    pub ordering_seed: Option<u64>,
    /// Random resized crop and horizontal flip on training images.
    pub augment: bool,
    pub crop_scale: (f64, f64),
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Sample a prefix length per image; otherwise plain causal attention.
    pub prefix: bool,
    /// Validation period in steps; 0 disables validation.
    pub eval_every: u64,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub chunks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub data: DataConfig,
    pub objective: ObjectiveConfig,
    pub training: TrainingConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.effective_model().validate()?;
        self.schedule.validate()?;
        OptimizerState::<f32>::new(self.optimizer, &Default::default())?;
        let (lo, hi) = self.data.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "crop scale {:?} must satisfy 0 < low <= high <= 1",
                self.data.crop_scale
            ));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.data.val_fraction));
        }
        if self.data.ordering == OrderingKind::Random && self.data.ordering_seed.is_none() {
            return bad("random ordering needs ordering_seed".into());
        }
        let t = &self.training;
        if t.batch_size == 0 || t.clip_norm.is_nan() || t.clip_norm <= 0.0 || t.chunks == 0 {
            return bad("batch_size, clip_norm and chunks must be positive".into());
        }
        let tokens = matches!(self.model.target, TargetKind::Tokens { .. });
        match self.objective {
            ObjectiveConfig::ArToken { kmeans_iters } if !tokens || kmeans_iters == 0 => {
                bad("ar_token needs a tokens target and kmeans_iters >= 1".into())
            }
            ObjectiveConfig::ArPixel | ObjectiveConfig::Masked { .. } if tokens => {
                bad("pixel objectives need a pixel target".into())
            }
            ObjectiveConfig::Masked { ratio } if !(ratio > 0.0 && ratio < 1.0) => {
                bad(format!("mask ratio {ratio} outside (0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// The model config with the mask token switched on for the masked
    /// objective; trunk and head are unchanged.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if matches!(self.objective, ObjectiveConfig::Masked { .. }) {
            m.mask_token = true;
        }
        m
    }

    pub fn ordering(&self) -> Result<Ordering, TrainError> {
        let (r, c) = self.model.grid;
        Ok(Ordering::new(self.data.ordering, r, c, self.data.ordering_seed)?)
    }

    pub fn image_side(&self) -> usize {
        self.model.grid.0 * self.model.patch_size
    }

    /// Deterministic `(train, val)` index split of `n` images.
    pub fn split(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        split_indices(n, self.data.val_fraction, self.training.seed)
    }
}

pub struct PretrainRun<'a> {
    pub config: &'a PretrainConfig,
    pub images: &'a [Image],
    /// Directory for metric files and checkpoints.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    /// Stop once this many steps are complete, as if interrupted.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub state: ModelState<f32>,
    pub optimizer: OptimizerState<f32>,
    pub tokenizer: Option<PatchTokenizer<f32>>,
    /// Every record of the run, including ones before a resume point.
    pub metrics: Vec<MetricRecord>,
    pub step: u64,
    pub flops: f64,
}

impl PretrainOutcome {
    pub fn checkpoint(&self, config: &PretrainConfig) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: self.state.spec(),
                step: self.step,
                optimizer: Some(self.optimizer.config),
                optimizer_step: self.optimizer.step,
                flops: self.flops,
                pretrain: Some(config.clone()),
            },
            state: self.state.clone(),
            optimizer: Some(self.optimizer.clone()),
            tokenizer: self.tokenizer.clone(),
        }
    }
}

fn nonfinite_as_loss(step: u64) -> impl Fn(TrainError) -> TrainError {
    move |e| {
        let nonfinite = matches!(
            &e,
            TrainError::Numerics(NumericsError::NonFinite { .. })
                | TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
                | TrainError::Objective(ObjectiveError::Numerics(NumericsError::NonFinite { .. }))
                | TrainError::Objective(ObjectiveError::Model(ModelError::Numerics(
                    NumericsError::NonFinite { .. }
                )))
        );
        if nonfinite {
            TrainError::NonFiniteLoss { step }
        } else {
            e
        }
    }
}

pub(crate) fn fit_size(img: &Image, side: usize) -> Image {
    if img.height() == side && img.width() == side {
        img.clone()
    } else {
        resize_full(img, side)
    }
}

fn pixel_targets<'a>(cfg: &ModelConfig, seq: &'a PatchSequence<f32>) -> &'a Tensor<f32> {
    match cfg.target {
        TargetKind::Pixels => &seq.raw_targets,
        _ => &seq.norm_targets,
    }
}

/// Per-batch random stream: stream 0 is left to initialization.
fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

fn fit_tokenizer(
    cfg: &PretrainConfig,
    images: &[Image],
    ordering: &Ordering,
    iters: usize,
) -> Result<PatchTokenizer<f32>, TrainError> {
    let TargetKind::Tokens { vocab } = cfg.model.target else {
        unreachable!("validated")
    };
    let side = cfg.image_side();
    let resized: Vec<Image> = images.iter().map(|i| fit_size(i, side)).collect();
    let seq: PatchSequence<f32> = patchify_batch(&resized, cfg.model.patch_size, ordering)?;
    let pd = seq.patch_dim();
    let points = seq.raw_targets.clone().reshaped([seq.batch() * seq.k(), pd])?;
    Ok(fit_kmeans_tokenizer(&points, vocab, iters, cfg.training.seed)?.tokenizer)
}

/// Builds the training loss for one batch on `tape`.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    cfg: &PretrainConfig,
    state: &ModelState<f32>,
    tokenizer: Option<&PatchTokenizer<f32>>,
    tape: &mut Tape<f32>,
    bound: &crate::model::Bound,
    seq: &PatchSequence<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<Var, TrainError> {
    let (b, k) = (seq.batch(), seq.k());
    match cfg.objective {
        ObjectiveConfig::Masked { ratio } => {
            let mask = (0..b)
                .map(|_| sample_mask(k, ratio, rng))
                .collect::<Result<Vec<_>, _>>()?;
            let plan = [AttentionPlan::bidirectional(k)?];
            let g = trunk_graph(
                state,
                tape,
                bound,
                &seq.inputs,
                &seq.grid_positions,
                Some(&mask),
                &plan,
                &[],
            )?;
            let out = head_graph(state, tape, bound, g.features, &seq.grid_positions, &plan)?;
            Ok(masked_loss_graph(tape, out, pixel_targets(&state.config, seq), &mask)?)
        }
        _ => {
            let (plans, prefixes) = if cfg.training.prefix {
                let s = (0..b)
                    .map(|_| sample_prefix_length(k, rng))
                    .collect::<Result<Vec<_>, _>>()?;
                let plans = s
                    .iter()
                    .map(|&s| AttentionPlan::prefix(k, s))
                    .collect::<Result<Vec<_>, _>>()?;
                (plans, s)
            } else {
                (vec![AttentionPlan::causal(k)?], vec![1])
            };
            let g = trunk_graph(state, tape, bound, &seq.inputs, &seq.grid_positions, None, &plans, &[])?;
            let out = head_graph(state, tape, bound, g.features, &seq.grid_positions, &plans)?;
            match tokenizer {
                Some(tok) => {
                    let tokens = tokenize_patches(tok, seq)?;
                    Ok(ar_token_loss_graph(tape, out, &tokens, &prefixes)?)
                }
                None => Ok(ar_pixel_loss_graph(
                    tape,
                    out,
                    pixel_targets(&state.config, seq),
                    &prefixes,
                )?),
            }
        }
    }
}

/// Validation loss in diagnostic mode: causal attention with `S = 1` for the
/// autoregressive objectives, and a fixed seeded mask for the masked one.
fn evaluate(
    cfg: &PretrainConfig,
    state: &ModelState<f32>,
    tokenizer: Option<&PatchTokenizer<f32>>,
    seq: &PatchSequence<f32>,
) -> Result<LossReport, TrainError> {
    let k = seq.k();
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, false);
    match cfg.objective {
        ObjectiveConfig::Masked { ratio } => {
            let mut rng = batch_rng(cfg.training.seed, u64::MAX - 1);
            let mask = (0..seq.batch())
                .map(|_| sample_mask(k, ratio, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let plan = [AttentionPlan::bidirectional(k)?];
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
            Ok(masked_pixel_loss(
                tape.value(out),
                pixel_targets(&state.config, seq),
                &mask,
            )?)
        }
        _ => {
            let plan = [AttentionPlan::causal(k)?];
            let g = trunk_graph(
                state,
                &mut tape,
                &bound,
                &seq.inputs,
                &seq.grid_positions,
                None,
                &plan,
                &[],
            )?;
            let out = head_graph(state, &mut tape, &bound, g.features, &seq.grid_positions, &plan)?;
            match tokenizer {
                Some(tok) => Ok(ar_token_loss(tape.value(out), &tokenize_patches(tok, seq)?, &[1])?),
                None => Ok(ar_pixel_loss(tape.value(out), pixel_targets(&state.config, seq), &[1])?),
            }
        }
    }
}

/// Runs pre-training from scratch or from `run.resume`.
pub fn pretrain_loop(run: PretrainRun<'_>) -> Result<PretrainOutcome, TrainError> {
    let cfg = run.config;
    cfg.validate()?;
    if run.images.len() < 2 {
        return Err(TrainError::InvalidConfig("need at least 2 images".into()));
    }
    let ordering = cfg.ordering()?;
    let side = cfg.image_side();
    let (train_idx, val_idx) = cfg.split(run.images.len());
    let train: Vec<&Image> = train_idx.iter().map(|&i| &run.images[i]).collect();
    let val: Vec<Image> = val_idx.iter().map(|&i| fit_size(&run.images[i], side)).collect();
    let val_seq: PatchSequence<f32> = patchify_batch(&val, cfg.model.patch_size, &ordering)?;

    let (mut state, mut opt, tokenizer, start, mut flops) = match run.resume {
        Some(ck) => {
            if ck.meta.pretrain.as_ref() != Some(cfg) {
                return Err(TrainError::CheckpointMismatch(
                    "checkpoint was written by a different config".into(),
                ));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| TrainError::CheckpointMismatch("checkpoint has no optimizer state".into()))?;
            (ck.state, opt, ck.tokenizer, ck.meta.step, ck.meta.flops)
        }
        None => {
            let state = init_model::<f32>(&cfg.effective_model(), cfg.training.seed)?;
            let opt = OptimizerState::new(cfg.optimizer, &state.params)?;
            let tokenizer = match cfg.objective {
                ObjectiveConfig::ArToken { kmeans_iters } => {
                    let imgs: Vec<Image> = train.iter().map(|&i| i.clone()).collect();
                    Some(fit_tokenizer(cfg, &imgs, &ordering, kmeans_iters)?)
                }
                _ => None,
            };
            (state, opt, tokenizer, 0, 0.0)
        }
    };
    let total = cfg.schedule.total_iters;
    if start > total {
        return Err(TrainError::StepOutOfRange { step: start, total });
    }

    let mut metrics = match run.out_dir {
        Some(dir) if start > 0 && ndjson_path(dir).exists() => {
            let mut prior = read_metrics(&ndjson_path(dir))?;
            prior.retain(|r| r.step <= start);
            prior
        }
        _ => Vec::new(),
    };
    let mut writer = match run.out_dir {
        Some(dir) => Some(MetricsWriter::create(dir, cfg.training.chunks, &metrics)?),
        None => None,
    };
    let trainable = state.params.trainable_numel() as f64;
    let crop = CropParams {
        scale: cfg.data.crop_scale,
        ..CropParams::pretrain(side)
    };
    let clock = Instant::now();
    let stop = run.stop_at.unwrap_or(total).min(total);

    let mut step = start;
    while step < stop {
        let mut rng = batch_rng(cfg.training.seed, step);
        let n = cfg.training.batch_size.min(train.len());
        let picks = sample(&mut rng, train.len(), n).into_vec();
        let mut batch = Vec::with_capacity(n);
        for &i in &picks {
            batch.push(if cfg.data.augment {
                random_resized_crop(train[i], &crop, &mut rng)?.0
            } else {
                fit_size(train[i], side)
            });
        }
        let seq: PatchSequence<f32> = patchify_batch(&batch, cfg.model.patch_size, &ordering)?;

        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape, true);
        let loss = batch_loss(cfg, &state, tokenizer.as_ref(), &mut tape, &bound, &seq, &mut rng)
            .map_err(nonfinite_as_loss(step + 1))?;
        let loss_value = f64::from(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        let mut grads = state.params.collect_grads(&bound, &grads);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { step: step + 1 });
        }
        let grad_norm = clip_gradients(&mut grads, cfg.training.clip_norm);
        let lr = lr_schedule(&cfg.schedule, step + 1)?;
        adamw_step(&mut state.params, &grads, &mut opt, lr)?;
        step += 1;
        flops += 6.0 * trainable * (seq.batch() * seq.k()) as f64;

        let eval_now = cfg.training.eval_every > 0 && (step % cfg.training.eval_every == 0 || step == total);
        let (val_loss, chunks) = if eval_now {
            let report = evaluate(cfg, &state, tokenizer.as_ref(), &val_seq).map_err(nonfinite_as_loss(step))?;
            (Some(report.total), per_chunk_loss(&report, cfg.training.chunks).ok())
        } else {
            (None, None)
        };
        let record = MetricRecord {
            step,
            lr,
            loss: loss_value,
            grad_norm,
            val_loss,
            chunks,
            wallclock_s: clock.elapsed().as_secs_f64(),
            flops,
        };
        if let Some(w) = writer.as_mut() {
            w.append(&record)?;
        }
        metrics.push(record);

        if let Some(dir) = run.out_dir {
            let periodic = cfg.training.checkpoint_every > 0 && step % cfg.training.checkpoint_every == 0;
            if periodic || step == total {
                let outcome = PretrainOutcome {
                    state: state.clone(),
                    optimizer: opt.clone(),
                    tokenizer: tokenizer.clone(),
                    metrics: Vec::new(),
                    step,
                    flops,
                };
                let ck = outcome.checkpoint(cfg);
                if periodic {
                    save_checkpoint(&ck, &dir.join(format!("ckpt_{step:06}.aimc")))?;
                }
                save_checkpoint(&ck, &dir.join("last.aimc"))?;
            }
        }
    }
    Ok(PretrainOutcome {
        state,
        optimizer: opt,
        tokenizer,
        metrics,
        step,
        flops,
    })
}

/// Chunked validation loss of one checkpoint under its own ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkDiagnostics {
    pub ordering: OrderingKind,
    pub total: f64,
    pub predicted_count: usize,
    pub chunk_means: Vec<f64>,
    /// Included patches per chunk, for weighting the means.
    pub chunk_counts: Vec<usize>,
    /// Same measurement on vertically flipped images.
    pub flipped: Option<Vec<f64>>,
}

/// Validation-split chunk losses with prefix sampling disabled.
pub fn chunk_diagnostics(
    config: &PretrainConfig,
    state: &ModelState<f32>,
    tokenizer: Option<&PatchTokenizer<f32>>,
    images: &[Image],
    chunks: usize,
    flip: bool,
) -> Result<ChunkDiagnostics, TrainError> {
    let ordering = config.ordering()?;
    let side = config.image_side();
    let (_, val_idx) = config.split(images.len());
    let val: Vec<Image> = val_idx.iter().map(|&i| fit_size(&images[i], side)).collect();
    let run = |imgs: &[Image]| -> Result<LossReport, TrainError> {
        let seq: PatchSequence<f32> = patchify_batch(imgs, config.model.patch_size, &ordering)?;
        evaluate(config, state, tokenizer, &seq)
    };
    let report = run(&val)?;
    let chunk_means = per_chunk_loss(&report, chunks)?;
    let width = report.per_patch[0].len() / chunks;
    let chunk_counts = (0..chunks)
        .map(|c| {
            report
                .per_patch
                .iter()
                .map(|row| row[c * width..(c + 1) * width].iter().flatten().count())
                .sum()
        })
        .collect();
    let flipped = if flip {
        let flipped: Vec<Image> = val.iter().map(Image::flip_vertical).collect();
        Some(per_chunk_loss(&run(&flipped)?, chunks)?)
    } else {
        None
    };
    Ok(ChunkDiagnostics {
        ordering: config.data.ordering,
        total: report.total,
        predicted_count: report.predicted_count,
        chunk_means,
        chunk_counts,
        flipped,
    })
}
