//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so every verdict is printed even when the test
//! harness would capture output; exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aim_core::data::{
    generate_synthetic_dataset, normalize_patch_targets, patchify_batch, Image, LabeledImage, Ordering, OrderingKind,
    PatchSequence, SyntheticSpec, TARGET_NORM_EPS,
};
use aim_core::model::{
    attach_lora, head_graph, init_model, predict, trunk_graph, Bound, HeadKind, LoraConfig, ModelConfig, ModelState,
    Probe, ProbeKind,
};
use aim_core::numerics::{check_gradients, AttentionPlan, Tape, Tensor};
use aim_core::objectives::{ar_pixel_loss_graph, mask_count, sample_mask};
use aim_core::trainer::{
    chunk_diagnostics, lr_schedule, probe_train_loop, read_checkpoint, read_metrics, write_checkpoint, AdamWConfig,
    DataConfig, MetricRecord, ObjectiveConfig, PretrainConfig, PretrainOutcome, PretrainRun, ProbeConfig,
    ScheduleConfig, TrainingConfig,
};

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_model(width: usize, depth: usize, patch: usize, grid: (usize, usize)) -> ModelConfig {
    let mut m = ModelConfig::new(width, depth, patch, grid);
    m.heads = (width / 16).max(1);
    m.head_kind = HeadKind::Mlp;
    m.head_blocks = 1;
    m.head_width = 4 * width;
    m
}

fn pretrain_config(model: ModelConfig, steps: u64, seed: u64) -> PretrainConfig {
    PretrainConfig {
        model,
        schedule: ScheduleConfig {
            peak_lr: 1e-3,
            min_lr: 1e-5,
            warmup_iters: steps / 10,
            total_iters: steps,
        },
        optimizer: AdamWConfig::pretrain(),
        data: DataConfig {
            ordering: OrderingKind::Raster,
            ordering_seed: None,
            augment: false,
            crop_scale: (0.4, 1.0),
            val_fraction: 0.1,
        },
        objective: ObjectiveConfig::ArPixel,
        training: TrainingConfig {
            batch_size: 32,
            seed,
            clip_norm: 1.0,
            prefix: true,
            eval_every: 0,
            checkpoint_every: 0,
            chunks: 8,
        },
    }
}

fn images(classes: usize, per_class: usize, side: usize, seed: u64) -> Vec<LabeledImage> {
    generate_synthetic_dataset(&SyntheticSpec {
        classes,
        per_class,
        side,
        seed,
    })
    .expect("valid spec")
}

fn run(cfg: &PretrainConfig, imgs: &[Image], stop_at: Option<u64>) -> PretrainOutcome {
    aim_core::trainer::pretrain_loop(PretrainRun {
        config: cfg,
        images: imgs,
        out_dir: None,
        resume: None,
        stop_at,
    })
    .expect("pre-training runs")
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn random_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(
        side,
        side,
        (0..side * side * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

/// 1. Perturbing slot `k` changes trunk output at slot `i` exactly when `i`
///    may attend to `k`.
fn visibility() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pairs = 0;
    for side in [2, 3, 4] {
        let k = side * side;
        let mut cfg = ModelConfig::new(8, 2, 1, (side, side));
        cfg.heads = 2;
        let state: ModelState<f64> = init_model(&cfg, 3).unwrap();
        let positions = Ordering::new(OrderingKind::Raster, side, side, None)
            .unwrap()
            .grid_positions();
        let plans = [
            AttentionPlan::causal(k).unwrap(),
            AttentionPlan::prefix(k, k / 2).unwrap(),
            AttentionPlan::bidirectional(k).unwrap(),
        ];
        let base = random_tensor(&[1, k, 3], &mut rng);
        let trunk = |inputs: &Tensor<f64>, plan: &AttentionPlan| {
            let mut tape = Tape::new();
            let bound = state.params.bind(&mut tape, false);
            let g = trunk_graph(
                &state,
                &mut tape,
                &bound,
                inputs,
                &positions,
                None,
                std::slice::from_ref(plan),
                &[],
            )
            .unwrap();
            tape.value(g.features).clone()
        };
        for plan in &plans {
            let reference = trunk(&base, plan);
            for slot in 0..k {
                let mut perturbed = base.clone();
                for c in 0..3 {
                    perturbed.data_mut()[slot * 3 + c] += 0.5;
                }
                let out = trunk(&perturbed, plan);
                for i in 0..k {
                    let row = |t: &Tensor<f64>| t.data()[i * 8..(i + 1) * 8].to_vec();
                    let changed = row(&out) != row(&reference);
                    if changed != plan.visible(i, slot) {
                        return Err(format!("{:?} K={k}: slot {slot} -> {i} changed={changed}", plan.mode()));
                    }
                    pairs += 1;
                }
            }
        }
    }
    Ok(format!("{pairs} (mode, i, k) pairs agree with the plan"))
}

/// 2. Analytic gradients of the full AR pixel loss against central
///    differences.
fn gradient_oracle() -> Verdict {
    let mut cfg = toy_model(32, 2, 2, (4, 4));
    cfg.heads = 2;
    cfg.head_width = 64;
    let mut state: ModelState<f64> = init_model(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Checked away from the small-weight init, where attention gradients sit
    // at the finite-difference noise floor.
    for p in state.params.iter_mut() {
        let shape = p.value.shape().to_vec();
        let (center, spread) = if shape.len() == 1 {
            (1.0, 0.5)
        } else {
            (0.0, 1.0 / (shape[0] as f64).sqrt())
        };
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = center + spread * rng.random_range(-1.0..1.0));
    }
    let imgs: Vec<Image> = (0..2).map(|_| random_image(8, &mut rng)).collect();
    let ordering = Ordering::new(OrderingKind::Raster, 4, 4, None).unwrap();
    let seq: PatchSequence<f64> = patchify_batch(&imgs, 2, &ordering).unwrap();
    let prefixes = [1, 6];
    let plans = [
        AttentionPlan::prefix(16, 1).unwrap(),
        AttentionPlan::prefix(16, 6).unwrap(),
    ];
    let params: Vec<Tensor<f64>> = state.params.iter().map(|p| p.value.clone()).collect();
    let f = |tape: &mut Tape<f64>, vars: &[aim_core::numerics::Var]| {
        let bound = Bound::from_vars(&state.params, vars.to_vec()).expect("matching handles");
        let fail = |e: aim_core::model::ModelError| match e {
            aim_core::model::ModelError::Numerics(n) => n,
            other => panic!("{other}"),
        };
        let g = trunk_graph(
            &state,
            tape,
            &bound,
            &seq.inputs,
            &seq.grid_positions,
            None,
            &plans,
            &[],
        )
        .map_err(fail)?;
        let out = head_graph(&state, tape, &bound, g.features, &seq.grid_positions, &plans).map_err(fail)?;
        Ok(ar_pixel_loss_graph(tape, out, &seq.norm_targets, &prefixes).expect("valid loss"))
    };
    let report = check_gradients(f, &params, 1e-5, Some(200), 7).map_err(|e| e.to_string())?;
    ensure(
        report.checked == 200 && report.max_rel_error < 1e-5,
        format!(
            "max relative error {:.3e} over {} coordinates",
            report.max_rel_error, report.checked
        ),
    )
}

/// 3. Per-patch normalized targets have zero mean and unit variance.
fn normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let imgs: Vec<Image> = (0..625).map(|_| random_image(16, &mut rng)).collect();
    let ordering = Ordering::new(OrderingKind::Raster, 4, 4, None).unwrap();
    let seq: PatchSequence<f64> = patchify_batch(&imgs, 4, &ordering).unwrap();
    let seq = normalize_patch_targets(seq, TARGET_NORM_EPS).unwrap();
    let d = seq.patch_dim();
    let (mut worst_mean, mut worst_var, mut n) = (0.0f64, 0.0f64, 0);
    for (raw, norm) in seq.raw_targets.data().chunks(d).zip(seq.norm_targets.data().chunks(d)) {
        let mean = |p: &[f64]| p.iter().sum::<f64>() / d as f64;
        let var = |p: &[f64], m: f64| p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let (m_in, m_out) = (mean(raw), mean(norm));
        let (v_in, v_out) = (var(raw, m_in), var(norm, m_out));
        worst_mean = worst_mean.max(m_out.abs());
        worst_var = worst_var.max((v_out * (1.0 + TARGET_NORM_EPS / v_in) - 1.0).abs());
        n += 1;
    }
    ensure(
        n == 10_000 && worst_mean <= 1e-9 && worst_var <= 1e-6,
        format!("{n} patches, max |mean| {worst_mean:.2e}, max variance error {worst_var:.2e}"),
    )
}

/// Walks a clockwise spiral on the unbounded plane, turning whenever the cell
/// to the right of the heading is still free.
fn spiral_oracle(rows: usize, cols: usize) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let (mut r, mut c) = ((rows.div_ceil(2) - 1) as i64, (cols.div_ceil(2) - 1) as i64);
    let dirs = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)];
    let mut dir = 0;
    let mut out = Vec::new();
    let in_grid = |r: i64, c: i64| r >= 0 && c >= 0 && r < rows as i64 && c < cols as i64;
    seen.insert((r, c));
    if in_grid(r, c) {
        out.push(r as usize * cols + c as usize);
    }
    let mut first = true;
    while out.len() < rows * cols {
        if !first {
            let turn = dirs[(dir + 1) % 4];
            if !seen.contains(&(r + turn.0, c + turn.1)) {
                dir = (dir + 1) % 4;
            }
        }
        first = false;
        r += dirs[dir].0;
        c += dirs[dir].1;
        seen.insert((r, c));
        if in_grid(r, c) {
            out.push(r as usize * cols + c as usize);
        }
    }
    out
}

fn checkerboard_oracle(rows: usize, cols: usize) -> Vec<usize> {
    let mut cells: Vec<(usize, usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| ((r + c) % 2, r, c)))
        .collect();
    cells.sort();
    cells.into_iter().map(|(_, r, c)| r * cols + c).collect()
}

/// 4. Every ordering is a bijection; spiral and checkerboard match oracles.
fn orderings() -> Verdict {
    let mut grids = 0;
    for rows in 1..=16 {
        for cols in 1..=16 {
            for kind in [
                OrderingKind::Raster,
                OrderingKind::Spiral,
                OrderingKind::Checkerboard,
                OrderingKind::Random,
            ] {
                let seed = (kind == OrderingKind::Random).then_some(rows as u64 * 31 + cols as u64);
                let o = Ordering::new(kind, rows, cols, seed).map_err(|e| e.to_string())?;
                let mut sorted = o.perm().to_vec();
                sorted.sort_unstable();
                if sorted != (0..rows * cols).collect::<Vec<_>>() {
                    return Err(format!("{kind:?} {rows}x{cols} is not a bijection"));
                }
                let oracle = match kind {
                    OrderingKind::Spiral => Some(spiral_oracle(rows, cols)),
                    OrderingKind::Checkerboard => Some(checkerboard_oracle(rows, cols)),
                    _ => None,
                };
                if oracle.is_some_and(|want| want != o.perm()) {
                    return Err(format!("{kind:?} {rows}x{cols} differs from its oracle"));
                }
            }
            grids += 1;
        }
    }
    Ok(format!("4 patterns on {grids} grids"))
}

/// 5. Attentive pooling owns exactly `2d^2 + d` parameters.
fn probe_count() -> Verdict {
    let mut seen = Vec::new();
    for d in [8, 64, 256] {
        let p: Probe<f32> = Probe::new(ProbeKind::Attentive, d, 1, 4, 0).map_err(|e| e.to_string())?;
        let want = 2 * d * d + d;
        if p.pool_param_count() != want {
            return Err(format!(
                "d={d}: {} pooling parameters, want {want}",
                p.pool_param_count()
            ));
        }
        seen.push(format!("d={d}: {want}"));
    }
    Ok(seen.join(", "))
}

/// 6. LoRA leaves the forward pass unchanged at attach time and never touches
///    the frozen trunk.
fn lora() -> Verdict {
    // Rank-8 adapters on q, v and o add about 4/d of the trunk, so the toy
    // trunk is wide enough for that share to be small.
    let cfg = toy_model(384, 2, 4, (4, 4));
    let base: ModelState<f32> = init_model(&cfg, 9).unwrap();
    let data = images(4, 8, 16, 10);
    let ordering = Ordering::new(OrderingKind::Raster, 4, 4, None).unwrap();
    let imgs: Vec<Image> = data.iter().take(4).map(|l| l.image.clone()).collect();
    let seq: PatchSequence<f32> = patchify_batch(&imgs, 4, &ordering).unwrap();
    let plan = [AttentionPlan::bidirectional(16).unwrap()];
    let mut adapted = base.clone();
    let lora = LoraConfig::default();
    attach_lora(&mut adapted, lora.clone(), 11).unwrap();
    let identical = predict(&base, &seq, &plan).unwrap() == predict(&adapted, &seq, &plan).unwrap();

    // 25 batches of 8 per epoch for 4 epochs.
    let (train, val) = data.split_at(25);
    let train: Vec<LabeledImage> = train.iter().cycle().take(200).cloned().collect();
    let probe = ProbeConfig {
        epochs: 4,
        batch_size: 8,
        lrs: vec![1e-3],
        warmup_epochs: 1,
        lora: Some(lora.clone()),
        ..ProbeConfig::new(ProbeKind::Attentive)
    };
    let report = probe_train_loop(&base, &probe, &train, val, &ordering).map_err(|e| e.to_string())?;
    let steps = 4 * train.len().div_ceil(8);
    let fraction = report.lora_params as f64 / report.trunk_params as f64;
    ensure(
        identical
            && steps == 100
            && report.trunk_fingerprint_before == report.trunk_fingerprint_after
            && report.lora_params == lora.param_count(&cfg)
            && fraction < 0.01,
        format!(
            "identity at attach {identical}, {steps} steps, trunk hash unchanged {}, rank-{} adapters are {:.3}% of \
             the d={} model ({:.2}% trainable counting the probe)",
            report.trunk_fingerprint_before == report.trunk_fingerprint_after,
            lora.rank,
            100.0 * fraction,
            cfg.width,
            100.0 * report.trainable_fraction
        ),
    )
}

/// 7. Warmup end, final step and cosine midpoint.
fn schedule() -> Verdict {
    let cfg = ScheduleConfig {
        peak_lr: 1e-3,
        min_lr: 1e-6,
        warmup_iters: 100,
        total_iters: 1100,
    };
    let lr = |s| lr_schedule(&cfg, s).unwrap();
    let (w, t, m) = (lr(100), lr(1100), lr(600));
    ensure(
        w == 1e-3 && t == 1e-6 && m == (1e-3 + 1e-6) / 2.0,
        format!("lr(warmup)={w:e}, lr(total)={t:e}, lr(mid)={m:e}"),
    )
}

fn smoke_config(steps: u64) -> PretrainConfig {
    let mut cfg = pretrain_config(toy_model(64, 2, 4, (8, 8)), steps, 12);
    cfg.training.eval_every = steps / 5;
    cfg
}

/// 8. A toy model overfits 32 images, deterministically.
fn overfit() -> Verdict {
    let data: Vec<Image> = images(4, 8, 32, 13).into_iter().map(|l| l.image).collect();
    let cfg = smoke_config(300);
    let t = Instant::now();
    let a = run(&cfg, &data, None);
    let secs = t.elapsed().as_secs_f64();
    let b = run(&cfg, &data, None);
    let (first, last) = (a.metrics[0].loss, a.metrics.last().unwrap().loss);
    let deterministic = a.metrics.len() == b.metrics.len()
        && a.metrics.iter().zip(&b.metrics).all(|(x, y)| x.same_values(y))
        && a.state == b.state;
    let vals: Vec<f64> = a.metrics.iter().filter_map(|r| r.val_loss).collect();
    let rises = vals.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(
        last < 0.5 * first && deterministic && vals.len() == 5 && rises <= 1 && secs < 300.0,
        format!(
            "loss {first:.4} -> {last:.4} ({:.1}%), rerun identical {deterministic}, val losses {vals:.4?}, {secs:.1}s per run",
            100.0 * last / first
        ),
    )
}

/// 9. An AR-pre-trained trunk beats a random one under the attentive probe,
///    and attentive pooling beats mean pooling.
///
/// The trunk pre-trains on all 160 images without labels; probes see 4
/// labels per class and are scored on the remaining 144.
fn pretraining_helps() -> Verdict {
    let shots = 4;
    let (mut pre, mut random, mut linear) = (0.0, 0.0, 0.0);
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let data = images(4, 40, 16, 100 + seed);
        let mut cfg = pretrain_config(toy_model(64, 2, 4, (4, 4)), 300, seed);
        cfg.model.head_blocks = 2;
        cfg.training.batch_size = 16;
        cfg.data.augment = true;
        let imgs: Vec<Image> = data.iter().map(|l| l.image.clone()).collect();
        let trained = run(&cfg, &imgs, None).state;
        let untrained: ModelState<f32> = init_model(&cfg.model, 1000 + seed).unwrap();
        let (train, val): (Vec<LabeledImage>, Vec<LabeledImage>) = data
            .iter()
            .enumerate()
            .map(|(i, l)| (i % 40 < shots, l.clone()))
            .fold((Vec::new(), Vec::new()), |(mut t, mut v), (is_train, l)| {
                if is_train {
                    t.push(l)
                } else {
                    v.push(l)
                }
                (t, v)
            });
        let ordering = cfg.ordering().unwrap();
        let mut probe = ProbeConfig {
            epochs: 30,
            batch_size: 16,
            heads: 4,
            seed,
            ..ProbeConfig::new(ProbeKind::Attentive)
        };
        let acc = |state: &ModelState<f32>, probe: &ProbeConfig| {
            probe_train_loop(state, probe, &train, &val, &ordering).map(|r| r.val_accuracy)
        };
        let p = acc(&trained, &probe).map_err(|e| e.to_string())?;
        let r = acc(&untrained, &probe).map_err(|e| e.to_string())?;
        probe.kind = ProbeKind::Linear;
        let l = acc(&trained, &probe).map_err(|e| e.to_string())?;
        rows.push(format!("seed {seed}: {p:.3}/{r:.3}/{l:.3}"));
        pre += p / 3.0;
        random += r / 3.0;
        linear += l / 3.0;
    }
    ensure(
        pre - random >= 0.10 && pre >= linear,
        format!(
            "mean attentive {:.1}% vs random trunk {:.1}% (+{:.1} pts), linear {:.1}% [pre/random/linear {}]",
            100.0 * pre,
            100.0 * random,
            100.0 * (pre - random),
            100.0 * linear,
            rows.join(", ")
        ),
    )
}

/// 10. AR-pixel and masked arms share trunk config, initial trunk weights and
///     data seeds, and emit metric streams of the same shape.
fn objective_parity() -> Verdict {
    let data: Vec<Image> = images(4, 4, 16, 14).into_iter().map(|l| l.image).collect();
    let ar = {
        let mut c = pretrain_config(toy_model(32, 2, 2, (8, 8)), 6, 15);
        c.training.eval_every = 3;
        c.training.batch_size = 4;
        c
    };
    let masked = PretrainConfig {
        objective: ObjectiveConfig::Masked { ratio: 0.75 },
        ..ar.clone()
    };
    let (ma, mm) = (ar.effective_model(), masked.effective_model());
    let same_trunk = ma
        == ModelConfig {
            mask_token: false,
            ..mm.clone()
        };
    let init_a: ModelState<f32> = init_model(&ma, 15).unwrap();
    let init_m: ModelState<f32> = init_model(&mm, 15).unwrap();
    let shared = init_a
        .params
        .iter()
        .all(|p| init_m.params.get(&p.name).ok() == Some(&p.value));
    let same_data = ar.data == masked.data && ar.training == masked.training;

    let dir = tempfile::tempdir().unwrap();
    let mut headers = Vec::new();
    let mut counts = Vec::new();
    for (name, cfg) in [("ar", &ar), ("masked", &masked)] {
        let out = dir.path().join(name);
        aim_core::trainer::pretrain_loop(PretrainRun {
            config: cfg,
            images: &data,
            out_dir: Some(&out),
            resume: None,
            stop_at: None,
        })
        .map_err(|e| e.to_string())?;
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        headers.push(csv.lines().next().unwrap_or_default().to_string());
        counts.push(csv.lines().count());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let want = mask_count(64, 0.75).unwrap();
    let exact =
        want == 48 && (0..100).all(|_| sample_mask(64, 0.75, &mut rng).unwrap().iter().filter(|&&m| m).count() == want);
    ensure(
        same_trunk && shared && same_data && headers[0] == headers[1] && counts[0] == counts[1] && exact,
        format!(
            "trunk config equal {same_trunk}, initial trunk weights equal {shared}, data seeds equal {same_data}, \
             CSV headers equal {}, masked slots {want}/64 exact {exact}",
            headers[0] == headers[1]
        ),
    )
}

/// 11. Chunk means partition the validation loss; one row per chunk per
///     pattern.
fn chunk_report() -> Verdict {
    let data: Vec<Image> = images(4, 10, 16, 17).into_iter().map(|l| l.image).collect();
    let mut rows = 0;
    let mut worst = 0.0f64;
    for kind in [
        OrderingKind::Raster,
        OrderingKind::Spiral,
        OrderingKind::Checkerboard,
        OrderingKind::Random,
    ] {
        let mut cfg = pretrain_config(toy_model(32, 2, 2, (8, 8)), 5, 18);
        cfg.training.batch_size = 8;
        cfg.data.ordering = kind;
        cfg.data.ordering_seed = (kind == OrderingKind::Random).then_some(19);
        let out = run(&cfg, &data, None);
        let d = chunk_diagnostics(&cfg, &out.state, None, &data, 8, true).map_err(|e| e.to_string())?;
        let n: usize = d.chunk_counts.iter().sum();
        let weighted: f64 = d
            .chunk_means
            .iter()
            .zip(&d.chunk_counts)
            .map(|(m, &c)| m * c as f64)
            .sum::<f64>()
            / n as f64;
        worst = worst.max((weighted - d.total).abs());
        if d.chunk_means.len() != 8 || d.flipped.as_ref().map(Vec::len) != Some(8) || n != d.predicted_count {
            return Err(format!("{kind:?}: malformed report"));
        }
        rows += d.chunk_means.len();
    }
    ensure(
        worst <= 1e-6,
        format!("{rows} rows over 4 patterns, partition error {worst:.2e}"),
    )
}

/// 12. Interrupting at any step and resuming reproduces the uninterrupted
///     metric stream and final weights.
fn resume() -> Verdict {
    let data: Vec<Image> = images(2, 6, 8, 20).into_iter().map(|l| l.image).collect();
    let mut cfg = pretrain_config(toy_model(16, 1, 2, (4, 4)), 10, 21);
    cfg.training.batch_size = 4;
    cfg.training.eval_every = 3;
    cfg.data.augment = true;
    let full = run(&cfg, &data, None);
    let same =
        |a: &[MetricRecord], b: &[MetricRecord]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_values(y));
    for t in 1..10 {
        let part = run(&cfg, &data, Some(t));
        let bytes = write_checkpoint(&part.checkpoint(&cfg)).unwrap();
        let resumed = aim_core::trainer::pretrain_loop(PretrainRun {
            config: &cfg,
            images: &data,
            out_dir: None,
            resume: Some(read_checkpoint(&bytes).unwrap()),
            stop_at: None,
        })
        .map_err(|e| e.to_string())?;
        let mut stream = part.metrics.clone();
        stream.extend(resumed.metrics);
        if !same(&stream, &full.metrics) || resumed.state != full.state || resumed.optimizer != full.optimizer {
            return Err(format!("resume at step {t} diverged"));
        }
    }

    // The same through metric files on disk.
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("full"), dir.path().join("split"));
    let with_dir = |out: &std::path::Path, resume, stop_at| {
        aim_core::trainer::pretrain_loop(PretrainRun {
            config: &cfg,
            images: &data,
            out_dir: Some(out),
            resume,
            stop_at,
        })
        .unwrap()
    };
    with_dir(&a, None, None);
    let part = with_dir(&b, None, Some(4));
    with_dir(&b, Some(part.checkpoint(&cfg)), None);
    let csv = |p: &std::path::Path| std::fs::read(p.join("metrics.csv")).unwrap();

    let nd = |p: &std::path::Path| read_metrics(&p.join("metrics.ndjson")).unwrap();
    ensure(
        csv(&a) == csv(&b) && same(&nd(&a), &nd(&b)),
        "resume at every step 1..9 matches the uninterrupted run; on-disk CSV byte-identical".into(),
    )
}

type Check = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Check; 12] = [
        ("visibility exhaustiveness", visibility),
        ("gradient oracle", gradient_oracle),
        ("normalization contract", normalization),
        ("ordering bijectivity and oracles", orderings),
        ("probe parameter count", probe_count),
        ("LoRA identity and freeze", lora),
        ("schedule endpoints", schedule),
        ("overfit smoke test", overfit),
        ("pre-training helps probing", pretraining_helps),
        ("objective-harness parity", objective_parity),
        ("chunk diagnostics", chunk_report),
        ("checkpoint determinism", resume),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS criterion {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
