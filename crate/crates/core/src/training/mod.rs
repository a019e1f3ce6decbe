//! Loss assembly and the optimisation loop.
//!
//! Each utterance draws one masked LM sequence per step; the BERT-CTC term,
//! the transducer term and (optionally) the intermediate CTC term are all
//! computed from the same forward pass.

mod checkpoint;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{ctc_loss_node, transducer_loss_node};
use crate::masking::sample_mask;
use crate::model::{
    add_gradients, audio_encode, concat_net, intermediate_ctc_logprobs, joint_lattice, mlm_embed,
    prediction_net, BindMode, Binder, ModelParams,
};
use crate::numerics::{
    adam_step, AdamConfig, AdamState, Graph, NoamSchedule, Scalar, SeedStream, Tensor,
};
use crate::vocab::{TokenSequence, UnitSystem};

pub use checkpoint::{average_checkpoints, Checkpoint, Manifest};

/// One training or evaluation utterance with targets in both unit systems.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub feats: Tensor<f32>,
    pub lm_target: TokenSequence,
    pub asr_target: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the transducer term; the BERT-CTC term gets `1 − λ`.
    pub lambda: f64,
    pub aux_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: u64,
    pub peak_lr: f64,
    /// Number of best-dev checkpoints averaged into the final model.
    pub average_top: usize,
    /// Stop after the epoch that crosses this wall-clock budget.
    pub max_minutes: f64,
    /// Data augmentation stub; must stay false.
    pub spec_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            aux_weight: 0.3,
            epochs: 12,
            batch_size: 16,
            warmup: 1000,
            peak_lr: 1e-3,
            average_top: 3,
            max_minutes: 30.0,
            spec_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!(
                "train.lambda must lie strictly between 0 and 1, got {}",
                self.lambda
            )));
        }
        if self.aux_weight < 0.0 {
            return Err(Error::Config(
                "train.aux_weight must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.average_top == 0 {
            return Err(Error::Config(
                "train.batch_size, train.epochs and train.average_top must be positive".into(),
            ));
        }
        if self.spec_augment {
            return Err(Error::Config(
                "train.spec_augment is not implemented".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bec: f64,
    pub l_tra: f64,
    pub l_interctc: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub aux_weight: f64,
}

impl LossBreakdown {
    pub fn new(l_bec: f64, l_tra: f64, l_interctc: f64, lambda: f64, aux_weight: f64) -> Self {
        Self {
            l_bec,
            l_tra,
            l_interctc,
            l_total: combine(l_bec, l_tra, l_interctc, lambda, aux_weight),
            lambda,
            aux_weight,
        }
    }
}

/// `(1 − λ)·l_bec + λ·l_tra + aux·l_interctc`, evaluated left to right.
pub fn combine(l_bec: f64, l_tra: f64, l_interctc: f64, lambda: f64, aux_weight: f64) -> f64 {
    (1.0 - lambda) * l_bec + lambda * l_tra + aux_weight * l_interctc
}

/// Which loss terms a forward pass builds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub aux_weight: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lambda: c.lambda,
            aux_weight: c.aux_weight,
        }
    }
}

/// Loss and gradients of one utterance under one masked sequence.
pub struct UtteranceLoss<T> {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Builds the full loss graph for one utterance and returns its value and,
/// unless `mode` is [`BindMode::Eval`], the parameter gradients. `None`
/// means a CTC target cannot be aligned to the frames.
pub fn utterance_loss<T: Scalar>(
    params: &ModelParams<T>,
    feats: &Tensor<T>,
    lm_target: &TokenSequence,
    asr_target: &TokenSequence,
    masked: &TokenSequence,
    weights: LossWeights,
    mode: BindMode,
) -> Result<Option<UtteranceLoss<T>>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, mode);
    let Some((out, terms)) = loss_graph(
        &mut g, &mut b, feats, lm_target, asr_target, masked, weights,
    )?
    else {
        return Ok(None);
    };
    let grads = if mode == BindMode::Eval {
        BTreeMap::new()
    } else {
        b.gradients(&g.backward(out)?)
    };
    Ok(Some(UtteranceLoss {
        breakdown: terms,
        grads,
    }))
}

/// Records the weighted loss on `g`; returns the scalar node and the
/// breakdown of its terms.
pub fn loss_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    b: &mut Binder<'p, T>,
    feats: &Tensor<T>,
    lm_target: &TokenSequence,
    asr_target: &TokenSequence,
    masked: &TokenSequence,
    weights: LossWeights,
) -> Result<Option<(crate::numerics::Var, LossBreakdown)>> {
    if lm_target.unit_system != UnitSystem::Lm || asr_target.unit_system != UnitSystem::Asr {
        return Err(invalid(
            "targets must be LM units and ASR units respectively",
        ));
    }
    let enc = audio_encode(g, b, feats)?;
    let h = mlm_embed(g, b, masked)?;
    let cat = concat_net(g, b, enc.e, h)?;
    let Some(bec) = ctc_loss_node(g, cat.frame_logprobs, &lm_target.ids)? else {
        return Ok(None);
    };
    let q = prediction_net(g, b, &asr_target.ids)?;
    let lattice = joint_lattice(g, b, cat.audio, q)?;
    let Some(tra) = transducer_loss_node(g, lattice, enc.frames, &asr_target.ids)? else {
        return Ok(None);
    };
    let mut terms = vec![
        (bec, T::of(1.0 - weights.lambda)),
        (tra, T::of(weights.lambda)),
    ];
    let mut l_interctc = 0.0;
    if weights.aux_weight > 0.0 {
        let ictc = intermediate_ctc_logprobs(g, b, &enc)?;
        let Some(aux) = ctc_loss_node(g, ictc, &asr_target.ids)? else {
            return Ok(None);
        };
        l_interctc = g.value(aux).data()[0].as_f64();
        terms.push((aux, T::of(weights.aux_weight)));
    }
    let out = g.weighted_sum(&terms)?;
    let scalar = |v| g.value(v).data()[0].as_f64();
    let breakdown = LossBreakdown::new(
        scalar(bec),
        scalar(tra),
        l_interctc,
        weights.lambda,
        weights.aux_weight,
    );
    Ok(Some((out, breakdown)))
}

/// Tag of the per-step mask stream; the utterance position within the batch
/// is appended.
const MASK_TAG: u64 = 0x6d61736b;
const SHUFFLE_TAG: u64 = 0x7368756666;
const DEV_TAG: u64 = 0x646576;

/// One masked LM sequence per utterance, drawn from `stream`.
pub fn sample_masks(
    batch: &[&Example],
    mask_id: u32,
    stream: SeedStream,
) -> Result<Vec<TokenSequence>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = stream.child(i as u64).rng();
            let (ids, _) = sample_mask(&ex.lm_target.ids, mask_id, &mut rng)?;
            Ok(TokenSequence::new(ids, UnitSystem::Lm))
        })
        .collect()
}

/// Mean loss and gradients over a batch, reduced in batch order.
#[derive(Clone, Debug)]
pub struct BatchResult<T> {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Tensor<T>>,
    pub used: usize,
    pub skipped: Vec<String>,
}

pub fn batch_loss(
    params: &ModelParams<f32>,
    batch: &[&Example],
    masks: &[TokenSequence],
    weights: LossWeights,
    mode: BindMode,
) -> Result<BatchResult<f32>> {
    if batch.len() != masks.len() {
        return Err(invalid("one mask sample per utterance is required"));
    }
    let results = batch
        .par_iter()
        .zip(masks.par_iter())
        .map(|(ex, m)| {
            utterance_loss(
                params,
                &ex.feats,
                &ex.lm_target,
                &ex.asr_target,
                m,
                weights,
                mode,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = BTreeMap::new();
    let (mut bec, mut tra, mut aux) = (0.0, 0.0, 0.0);
    let mut used = 0;
    let mut skipped = Vec::new();
    for (ex, r) in batch.iter().zip(results) {
        match r {
            Some(u) => {
                bec += u.breakdown.l_bec;
                tra += u.breakdown.l_tra;
                aux += u.breakdown.l_interctc;
                used += 1;
                add_gradients(&mut grads, u.grads)?;
            }
            None => skipped.push(ex.id.clone()),
        }
    }
    let n = used.max(1) as f64;
    let inv = 1.0 / used.max(1) as f32;
    grads.values_mut().for_each(|g| g.scale_in_place(inv));
    Ok(BatchResult {
        breakdown: LossBreakdown::new(
            bec / n,
            tra / n,
            aux / n,
            weights.lambda,
            weights.aux_weight,
        ),
        grads,
        used,
        skipped,
    })
}

/// Batch mean of the BERT-CTC term alone.
pub fn loss_bec(
    params: &ModelParams<f32>,
    batch: &[&Example],
    masks: &[TokenSequence],
) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for (ex, m) in batch.iter().zip(masks) {
        let mut g = Graph::new();
        let mut b = Binder::new(params, BindMode::Eval);
        let enc = audio_encode(&mut g, &mut b, &ex.feats)?;
        let h = mlm_embed(&mut g, &mut b, m)?;
        let cat = concat_net(&mut g, &mut b, enc.e, h)?;
        if let Some(l) = ctc_loss_node(&mut g, cat.frame_logprobs, &ex.lm_target.ids)? {
            total += g.value(l).data()[0] as f64;
            used += 1;
        }
    }
    Ok(total / used.max(1) as f64)
}

/// Batch mean of the transducer term alone.
pub fn loss_tra(
    params: &ModelParams<f32>,
    batch: &[&Example],
    masks: &[TokenSequence],
) -> Result<f64> {
    let mut total = 0.0;
    for (ex, m) in batch.iter().zip(masks) {
        let mut g = Graph::new();
        let mut b = Binder::new(params, BindMode::Eval);
        let enc = audio_encode(&mut g, &mut b, &ex.feats)?;
        let h = mlm_embed(&mut g, &mut b, m)?;
        let cat = concat_net(&mut g, &mut b, enc.e, h)?;
        let q = prediction_net(&mut g, &mut b, &ex.asr_target.ids)?;
        let lat = joint_lattice(&mut g, &mut b, cat.audio, q)?;
        let l = transducer_loss_node(&mut g, lat, enc.frames, &ex.asr_target.ids)?
            .ok_or_else(|| invalid(format!("{}: transducer target unreachable", ex.id)))?;
        total += g.value(l).data()[0] as f64;
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Mean loss over `examples` with masks fixed by `seed`, in chunks of `batch`.
pub fn dev_loss(
    params: &ModelParams<f32>,
    examples: &[Example],
    mask_id: u32,
    weights: LossWeights,
    seed: u64,
) -> Result<LossBreakdown> {
    let refs: Vec<&Example> = examples.iter().collect();
    let masks = sample_masks(&refs, mask_id, SeedStream::new(seed).child(DEV_TAG))?;
    let r = batch_loss(params, &refs, &masks, weights, BindMode::Eval)?;
    Ok(r.breakdown)
}

/// A record of the training log, one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub l_bec: f64,
    pub l_tra: f64,
    pub l_interctc: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_ms: u64,
    pub skipped: usize,
}

/// Optimiser state carried across steps and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub epoch: usize,
}

impl TrainState {
    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

/// Order of the training set in `epoch` (0-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(
        &mut SeedStream::new(seed)
            .path(&[SHUFFLE_TAG, epoch as u64])
            .rng(),
    );
    order
}

/// One optimiser step on `batch`; the masks come from `(seed, step)`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Example],
    cfg: &TrainConfig,
    mask_id: u32,
    seed: u64,
) -> Result<BatchResult<f32>> {
    let step = state.adam.step + 1;
    let masks = sample_masks(
        batch,
        mask_id,
        SeedStream::new(seed).path(&[MASK_TAG, step]),
    )?;
    let r = batch_loss(&state.params, batch, &masks, cfg.into(), BindMode::Train)?;
    let lr = NoamSchedule {
        peak_lr: cfg.peak_lr,
        warmup: cfg.warmup,
    }
    .lr(step);
    adam_step(
        &mut state.params.tensors,
        &r.grads,
        &mut state.adam,
        &AdamConfig::default(),
        lr,
    )?;
    Ok(r)
}

/// Runs one epoch; returns the mean training breakdown and skipped ids.
pub fn train_epoch(
    state: &mut TrainState,
    train: &[Example],
    cfg: &TrainConfig,
    mask_id: u32,
    seed: u64,
    mut on_step: impl FnMut(u64, &BatchResult<f32>),
) -> Result<(LossBreakdown, Vec<String>)> {
    let order = epoch_order(train.len(), seed, state.epoch);
    let (mut bec, mut tra, mut aux, mut steps) = (0.0, 0.0, 0.0, 0usize);
    let mut skipped = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
        let r = train_step(state, &batch, cfg, mask_id, seed)?;
        on_step(state.adam.step, &r);
        bec += r.breakdown.l_bec;
        tra += r.breakdown.l_tra;
        aux += r.breakdown.l_interctc;
        steps += 1;
        skipped.extend(r.skipped);
    }
    state.epoch += 1;
    let n = steps.max(1) as f64;
    Ok((
        LossBreakdown::new(bec / n, tra / n, aux / n, cfg.lambda, cfg.aux_weight),
        skipped,
    ))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub averaged: PathBuf,
    pub log: PathBuf,
    /// Dev loss before training and after each epoch.
    pub dev_curve: Vec<LossBreakdown>,
    pub skipped: usize,
    pub wall_seconds: f64,
}

/// Trains for `cfg.epochs` (or until the time budget runs out), writing a
/// checkpoint per epoch, `train.log.jsonl`, and `avg.btc` averaged over the
/// best dev checkpoints.
pub fn train(
    mut state: TrainState,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    mask_id: u32,
    seed: u64,
    config_hash: &str,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(invalid("training needs non-empty train and dev sets"));
    }
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train.log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let start = Instant::now();
    let weights = LossWeights::from(cfg);
    let elapsed_ms = |s: &Instant| s.elapsed().as_millis() as u64;

    let mut dev_curve = vec![dev_loss(&state.params, dev, mask_id, weights, seed)?];
    write_record(
        &mut log,
        &state,
        "dev",
        &dev_curve[0],
        0.0,
        elapsed_ms(&start),
        0,
    )?;
    let mut checkpoints = Vec::new();
    let mut scored: Vec<(f64, PathBuf)> = Vec::new();
    let mut skipped_total = 0;
    let schedule = NoamSchedule {
        peak_lr: cfg.peak_lr,
        warmup: cfg.warmup,
    };
    while state.epoch < cfg.epochs {
        let mut step_log = Vec::new();
        let (train_loss, skipped) =
            train_epoch(&mut state, train, cfg, mask_id, seed, |step, r| {
                if step % 25 == 0 {
                    step_log.push((step, r.breakdown, r.skipped.len()));
                }
            })?;
        for (step, b, s) in step_log {
            let rec = LogRecord {
                step,
                epoch: state.epoch,
                split: "train".into(),
                l_bec: b.l_bec,
                l_tra: b.l_tra,
                l_interctc: b.l_interctc,
                l_total: b.l_total,
                lr: schedule.lr(step),
                wall_ms: elapsed_ms(&start),
                skipped: s,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        }
        for id in &skipped {
            log::warn!("skipped {id}: CTC target cannot be aligned");
        }
        skipped_total += skipped.len();
        let d = dev_loss(&state.params, dev, mask_id, weights, seed)?;
        write_record(
            &mut log,
            &state,
            "dev",
            &d,
            schedule.lr(state.step()),
            elapsed_ms(&start),
            skipped.len(),
        )?;
        log::info!(
            "epoch {} step {}: train {:.4} dev {:.4} (bec {:.4} tra {:.4} ictc {:.4})",
            state.epoch,
            state.step(),
            train_loss.l_total,
            d.l_total,
            d.l_bec,
            d.l_tra,
            d.l_interctc
        );
        dev_curve.push(d);
        let path = out_dir.join(format!("epoch{:03}.btc", state.epoch));
        Checkpoint::from_state(&state, seed, config_hash, Some(d.l_total)).save(&path)?;
        scored.push((d.l_total, path.clone()));
        checkpoints.push(path);
        if start.elapsed().as_secs_f64() > cfg.max_minutes * 60.0 {
            log::warn!(
                "time budget of {} minutes reached after epoch {}",
                cfg.max_minutes,
                state.epoch
            );
            break;
        }
    }
    log.flush()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let best: Vec<PathBuf> = scored
        .iter()
        .take(cfg.average_top)
        .map(|(_, p)| p.clone())
        .collect();
    let averaged = out_dir.join("avg.btc");
    average_checkpoints(&best)?.save(&averaged)?;
    Ok(TrainOutcome {
        checkpoints,
        averaged,
        log: log_path,
        dev_curve,
        skipped: skipped_total,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn write_record(
    log: &mut impl Write,
    state: &TrainState,
    split: &str,
    b: &LossBreakdown,
    lr: f64,
    wall_ms: u64,
    skipped: usize,
) -> Result<()> {
    let rec = LogRecord {
        step: state.step(),
        epoch: state.epoch,
        split: split.into(),
        l_bec: b.l_bec,
        l_tra: b.l_tra,
        l_interctc: b.l_interctc,
        l_total: b.l_total,
        lr,
        wall_ms,
        skipped,
    };
    writeln!(log, "{}", serde_json::to_string(&rec)?)?;
    Ok(())
}
