//! Probe training on frozen trunk features, optionally with LoRA adapters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_count, patchify_batch, LabeledImage, Ordering, PatchSequence};
use crate::model::{attach_lora, trunk_graph, Bound, LoraConfig, ModelState, Probe, ProbeKind};
use crate::numerics::{AttentionPlan, Tape, Tensor, Var};
use crate::trainer::optim::{adamw_step, lr_schedule, AdamWConfig, OptimizerState, ScheduleConfig};
use crate::trainer::pretrain::fit_size;
use crate::trainer::TrainError;

/// Which trunk layer feeds the probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelect {
    Last,
    /// 1-based block index.
    Layer(usize),
    /// Mean of the last `n` block outputs.
    AverageLast(usize),
}

impl LayerSelect {
    fn layers(self, depth: usize) -> Result<Vec<usize>, TrainError> {
        let out = match self {
            Self::Last => vec![depth],
            Self::Layer(l) => vec![l],
            Self::AverageLast(n) if n >= 1 && n <= depth => (depth - n + 1..=depth).collect(),
            Self::AverageLast(n) => {
                return Err(TrainError::InvalidConfig(format!(
                    "cannot average {n} of {depth} layers"
                )))
            }
        };
        if out.iter().any(|&l| l == 0 || l > depth) {
            return Err(TrainError::InvalidConfig(format!("{self:?} outside 1..={depth}")));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub layers: LayerSelect,
    /// Attention-pooling heads; ignored by the linear probe.
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rates swept; the best by validation accuracy is reported.
    pub lrs: Vec<f64>,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

impl ProbeConfig {
    pub fn new(kind: ProbeKind) -> Self {
        Self {
            kind,
            layers: LayerSelect::Last,
            heads: 1,
            epochs: 20,
            batch_size: 32,
            lrs: vec![1e-4, 3e-4, 5e-4, 1e-3, 1.5e-3, 2e-3, 4e-3],
            warmup_epochs: 2,
            optimizer: AdamWConfig::probe(),
            seed: 0,
            lora: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrResult {
    pub lr: f64,
    /// Validation accuracy after each epoch.
    pub curve: Vec<f64>,
    pub val_accuracy: f64,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub layers: LayerSelect,
    pub sweep: Vec<LrResult>,
    pub best_lr: f64,
    pub val_accuracy: f64,
    pub probe_params: usize,
    pub pool_params: usize,
    pub lora_params: usize,
    pub trunk_params: usize,
    /// Trainable parameters over trunk plus probe parameters.
    pub trainable_fraction: f64,
    pub trunk_fingerprint_before: u64,
    pub trunk_fingerprint_after: u64,
}

fn check_labels(images: &[LabeledImage], classes: usize) -> Result<(), TrainError> {
    match images.iter().find(|i| i.label >= classes) {
        Some(i) => Err(TrainError::LabelOutOfRange {
            label: i.label,
            classes,
        }),
        None => Ok(()),
    }
}

fn sequence(
    state: &ModelState<f32>,
    images: &[&LabeledImage],
    ordering: &Ordering,
) -> Result<PatchSequence<f32>, TrainError> {
    let cfg = &state.config;
    let side = cfg.grid.0 * cfg.patch_size;
    let imgs: Vec<_> = images.iter().map(|i| fit_size(&i.image, side)).collect();
    Ok(patchify_batch(&imgs, cfg.patch_size, ordering)?)
}

/// Probe input `[B, K, d]` on `tape`: the selected layers, averaged.
fn feature_graph(
    state: &ModelState<f32>,
    tape: &mut Tape<f32>,
    bound: &Bound,
    seq: &PatchSequence<f32>,
    layers: &[usize],
) -> Result<Var, TrainError> {
    let plan = [AttentionPlan::bidirectional(seq.k())?];
    let g = trunk_graph(
        state,
        tape,
        bound,
        &seq.inputs,
        &seq.grid_positions,
        None,
        &plan,
        layers,
    )?;
    let mut acc = g.layers[0].1;
    for &(_, v) in &g.layers[1..] {
        acc = tape.add(acc, v)?;
    }
    if g.layers.len() > 1 {
        acc = tape.scale(acc, 1.0 / g.layers.len() as f32)?;
    }
    Ok(acc)
}

/// Untracked features for every image, in batches.
fn extract(
    state: &ModelState<f32>,
    images: &[LabeledImage],
    ordering: &Ordering,
    layers: &[usize],
    batch: usize,
) -> Result<Tensor<f32>, TrainError> {
    let mut data = Vec::new();
    let mut k = 0;
    for chunk in images.chunks(batch) {
        let refs: Vec<_> = chunk.iter().collect();
        let seq = sequence(state, &refs, ordering)?;
        k = seq.k();
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape, false);
        let f = feature_graph(state, &mut tape, &bound, &seq, layers)?;
        data.extend_from_slice(tape.value(f).data());
    }
    let d = state.config.width;
    Ok(Tensor::new(vec![images.len(), k, d], data)?)
}

fn rows(features: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let s = features.shape();
    let per = s[1] * s[2];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&features.data()[i * per..(i + 1) * per]);
    }
    Tensor::from_parts(vec![idx.len(), s[1], s[2]], data)
}

fn cross_entropy(tape: &mut Tape<f32>, logits: Var, labels: Vec<usize>) -> Result<Var, TrainError> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -1.0)?)
}

fn accuracy(pred: &[usize], images: &[LabeledImage]) -> f64 {
    let hits = pred.iter().zip(images).filter(|(&p, i)| p == i.label).count();
    hits as f64 / images.len() as f64
}

struct Trial {
    result: LrResult,
    probe_params: usize,
    pool_params: usize,
    lora_params: usize,
    trainable: usize,
    fingerprint_after: u64,
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    state: &ModelState<f32>,
    cfg: &ProbeConfig,
    lr: f64,
    classes: usize,
    layers: &[usize],
    train: &[LabeledImage],
    val: &[LabeledImage],
    ordering: &Ordering,
    cached: Option<(&Tensor<f32>, &Tensor<f32>)>,
) -> Result<Trial, TrainError> {
    let mut state = state.clone();
    if let Some(lora) = &cfg.lora {
        attach_lora(&mut state, lora.clone(), cfg.seed)?;
    }
    let lora_params = if cfg.lora.is_some() {
        state.params.trainable_numel()
    } else {
        0
    };
    let mut probe: Probe<f32> = Probe::new(cfg.kind, state.config.width, cfg.heads, classes, cfg.seed)?;
    let mut probe_opt = OptimizerState::new(cfg.optimizer, &probe.params)?;
    let mut trunk_opt = OptimizerState::new(cfg.optimizer, &state.params)?;

    let batch = cfg.batch_size.min(train.len());
    let per_epoch = train.len().div_ceil(batch) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let schedule = ScheduleConfig {
        peak_lr: lr,
        min_lr: 0.0,
        warmup_iters: (per_epoch * cfg.warmup_epochs as u64).min(total),
        total_iters: total,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut last_loss = f64::NAN;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let mut tape = Tape::new();
            let trunk_bound = state.params.bind(&mut tape, lora_params > 0);
            let features = match cached {
                Some((f, _)) => tape.constant(rows(f, idx)),
                None => {
                    let refs: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
                    let seq = sequence(&state, &refs, ordering)?;
                    feature_graph(&state, &mut tape, &trunk_bound, &seq, layers)?
                }
            };
            let probe_bound = probe.params.bind(&mut tape, true);
            let logits = probe.logits_graph(&mut tape, &probe_bound, features)?;
            let loss = cross_entropy(&mut tape, logits, labels)?;
            last_loss = f64::from(tape.value(loss).item());
            let grads = tape.backward(loss)?;
            step += 1;
            let lr_t = lr_schedule(&schedule, step)?;
            let g = probe.params.collect_grads(&probe_bound, &grads);
            adamw_step(&mut probe.params, &g, &mut probe_opt, lr_t)?;
            if lora_params > 0 {
                let g = state.params.collect_grads(&trunk_bound, &grads);
                adamw_step(&mut state.params, &g, &mut trunk_opt, lr_t)?;
            }
        }
        let val_features = match cached {
            Some((_, v)) => v.clone(),
            None => extract(&state, val, ordering, layers, batch)?,
        };
        curve.push(accuracy(&probe.predict(&val_features)?, val));
    }
    Ok(Trial {
        result: LrResult {
            lr,
            val_accuracy: curve.last().copied().unwrap_or(0.0),
            curve,
            final_train_loss: last_loss,
        },
        probe_params: probe.param_count(),
        pool_params: probe.pool_param_count(),
        lora_params,
        trainable: probe.param_count() + lora_params,
        fingerprint_after: state.trunk_fingerprint(),
    })
}

/// Trains one probe per learning rate on `train` and scores it on `val`.
pub fn probe_train_loop(
    state: &ModelState<f32>,
    cfg: &ProbeConfig,
    train: &[LabeledImage],
    val: &[LabeledImage],
    ordering: &Ordering,
) -> Result<ProbeReport, TrainError> {
    if train.is_empty() || val.is_empty() || cfg.lrs.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig(
            "probe needs data, epochs, a batch size and learning rates".into(),
        ));
    }
    if cfg.lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
        return Err(TrainError::InvalidConfig(
            "probe learning rates must be positive".into(),
        ));
    }
    let classes = class_count(train);
    check_labels(val, classes)?;
    let layers = cfg.layers.layers(state.config.depth)?;
    let before = state.trunk_fingerprint();
    let cache = match cfg.lora {
        None => Some((
            extract(state, train, ordering, &layers, cfg.batch_size)?,
            extract(state, val, ordering, &layers, cfg.batch_size)?,
        )),
        Some(_) => None,
    };
    let cached = cache.as_ref().map(|(t, v)| (t, v));

    let mut trials = Vec::with_capacity(cfg.lrs.len());
    for &lr in &cfg.lrs {
        trials.push(run_trial(
            state, cfg, lr, classes, &layers, train, val, ordering, cached,
        )?);
    }
    let best = trials.iter().enumerate().fold(0, |b, (i, t)| {
        if t.result.val_accuracy > trials[b].result.val_accuracy {
            i
        } else {
            b
        }
    });
    let top = &trials[best];
    let trunk_params = state.param_count();
    Ok(ProbeReport {
        kind: cfg.kind,
        layers: cfg.layers,
        best_lr: top.result.lr,
        val_accuracy: top.result.val_accuracy,
        probe_params: top.probe_params,
        pool_params: top.pool_params,
        lora_params: top.lora_params,
        trunk_params,
        trainable_fraction: top.trainable as f64 / (trunk_params + top.lora_params + top.probe_params) as f64,
        trunk_fingerprint_before: before,
        trunk_fingerprint_after: top.fingerprint_after,
        sweep: trials.into_iter().map(|t| t.result).collect(),
    })
}
