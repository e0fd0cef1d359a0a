use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use serde_json::json;

use aim_core::data::{
    load_dataset, split_indices, write_synthetic_dataset, LabeledImage, Ordering, OrderingKind, SyntheticSpec,
};
use aim_core::model::{LoraConfig, ProbeKind};
use aim_core::trainer::{
    chunk_diagnostics, load_checkpoint, pretrain_loop, probe_train_loop, save_checkpoint, Checkpoint, LayerSelect,
    PretrainConfig, PretrainRun, ProbeConfig, TrainError,
};

use crate::config::RunConfig;
use crate::UsageError;

/// Validation fraction used when a checkpoint carries no pre-training config.
const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProbeArg {
    Linear,
    Attentive,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum LayersArg {
    Last,
    Sweep,
    Avg6,
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn gen_data(classes: usize, per_class: usize, side: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    if classes < 2 {
        return Err(UsageError(format!("--classes must be at least 2, got {classes}")).into());
    }
    if per_class == 0 || side == 0 {
        return Err(UsageError("--per-class and --side must be positive".into()).into());
    }
    let spec = SyntheticSpec {
        classes,
        per_class,
        side,
        seed,
    };
    let manifest = write_synthetic_dataset(&spec, out)?;
    println!(
        "{}",
        json!({ "images": manifest.len(), "classes": classes, "out": out })
    );
    Ok(())
}

pub fn example_config() -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(&RunConfig::example())?);
    Ok(())
}

pub fn pretrain(config: &Path, resume: Option<&Path>, stop_at: Option<u64>) -> anyhow::Result<()> {
    let run = RunConfig::load(config)?;
    let cfg = run.pretrain();
    let (_, labeled) = load_dataset(&run.dataset).with_context(|| format!("loading {}", run.dataset.display()))?;
    let images: Vec<_> = labeled.into_iter().map(|l| l.image).collect();
    let resume = match resume {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let outcome = pretrain_loop(PretrainRun {
        config: &cfg,
        images: &images,
        out_dir: Some(&run.out_dir),
        resume,
        stop_at,
    })?;
    let last = run.out_dir.join("last.aimc");
    save_checkpoint(&outcome.checkpoint(&cfg), &last)?;
    let final_record = outcome.metrics.last();
    let val = outcome.metrics.iter().rev().find_map(|r| r.val_loss);
    println!(
        "{}",
        json!({
            "step": outcome.step,
            "train_loss": final_record.map(|r| r.loss),
            "val_loss": val,
            "flops": final_record.map(|r| r.flops),
            "checkpoint": last,
        })
    );
    Ok(())
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub probe: ProbeArg,
    pub layers: LayersArg,
    pub lora: Option<usize>,
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lrs: Option<Vec<f64>>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// The pre-training split and ordering, or defaults for bare checkpoints.
fn split_and_order(
    ck: &Checkpoint,
    data: Vec<LabeledImage>,
) -> anyhow::Result<(Vec<LabeledImage>, Vec<LabeledImage>, Ordering)> {
    let (train_idx, val_idx, ordering) = match &ck.meta.pretrain {
        Some(p) => {
            let (t, v) = p.split(data.len());
            (t, v, p.ordering()?)
        }
        None => {
            let (r, c) = ck.state.config.grid;
            let (t, v) = split_indices(data.len(), DEFAULT_VAL_FRACTION, 0);
            (t, v, Ordering::new(OrderingKind::Raster, r, c, None)?)
        }
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok((pick(&train_idx), pick(&val_idx), ordering))
}

pub fn probe(args: ProbeArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let (_, data) = load_dataset(&args.dataset).with_context(|| format!("loading {}", args.dataset.display()))?;
    let (train, val, ordering) = split_and_order(&ck, data)?;
    let kind = match args.probe {
        ProbeArg::Linear => ProbeKind::Linear,
        ProbeArg::Attentive => ProbeKind::Attentive,
    };
    let mut cfg = ProbeConfig {
        heads: args.heads,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        lora: args.lora.map(LoraConfig::with_rank),
        ..ProbeConfig::new(kind)
    };
    if let Some(lrs) = args.lrs {
        cfg.lrs = lrs;
    }
    let depth = ck.state.config.depth;
    let selections: Vec<LayerSelect> = match args.layers {
        LayersArg::Last => vec![LayerSelect::Last],
        LayersArg::Avg6 => vec![LayerSelect::AverageLast(depth.min(6))],
        LayersArg::Sweep => (1..=depth).map(LayerSelect::Layer).collect(),
    };
    let mut reports = Vec::with_capacity(selections.len());
    for layers in selections {
        cfg.layers = layers;
        reports.push(probe_train_loop(&ck.state, &cfg, &train, &val, &ordering)?);
    }
    let text = if args.layers == LayersArg::Sweep {
        let entries: Vec<_> = reports
            .iter()
            .map(|r| json!({ "layers": r.layers, "accuracy": r.val_accuracy, "best_lr": r.best_lr }))
            .collect();
        let first = &reports[0];
        json!({
            "probe": first.kind,
            "mode": "sweep",
            "entries": entries,
            "probe_params": first.probe_params,
            "pool_params": first.pool_params,
            "lora_params": first.lora_params,
            "trunk_params": first.trunk_params,
        })
    } else {
        serde_json::to_value(&reports[0])?
    };
    emit(
        args.out.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&text)?),
    )
}

fn pretrain_config(ck: &Checkpoint, path: &Path) -> anyhow::Result<PretrainConfig> {
    ck.meta.pretrain.clone().ok_or_else(|| {
        TrainError::CheckpointMismatch(format!("{} carries no pre-training config", path.display())).into()
    })
}

pub fn diagnose_chunks(
    checkpoints: &[PathBuf],
    dataset: &Path,
    chunks: usize,
    flip: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if chunks == 0 {
        return Err(UsageError("--chunks must be positive".into()).into());
    }
    let (_, data) = load_dataset(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let images: Vec<_> = data.into_iter().map(|l| l.image).collect();
    let mut csv = String::from("checkpoint,ordering,chunk,mean_loss");
    if flip {
        csv.push_str(",flipped_mean_loss");
    }
    csv.push('\n');
    for path in checkpoints {
        let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let cfg = pretrain_config(&ck, path)?;
        let diag = chunk_diagnostics(&cfg, &ck.state, ck.tokenizer.as_ref(), &images, chunks, flip)?;
        let ordering = serde_json::to_value(diag.ordering)?;
        let ordering = ordering.as_str().unwrap_or_default();
        for (c, mean) in diag.chunk_means.iter().enumerate() {
            csv.push_str(&format!("{},{ordering},{c},{mean}", path.display()));
            if let Some(f) = &diag.flipped {
                csv.push_str(&format!(",{}", f[c]));
            }
            csv.push('\n');
        }
    }
    emit(out, &csv)
}
