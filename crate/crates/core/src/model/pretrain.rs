//! Masked-LM pretraining of the `mlm.*` tensors on LM-unit text.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{
    adam_step, AdamConfig, AdamState, Graph, NoamSchedule, Scalar, SeedStream, Tensor,
};
use crate::vocab::{TokenSequence, UnitSystem};

use super::nets::{mlm_embed, mlm_logprobs};
use super::{add_gradients, BindMode, Binder, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmConfig {
    pub steps: u64,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub mask_prob: f64,
    /// Sentences held out from the end of the corpus for evaluation.
    pub heldout: usize,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            peak_lr: 1e-3,
            warmup: 400,
            mask_prob: 0.15,
            heldout: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub steps: u64,
    /// Held-out masked-token cross-entropy before and after training (nats).
    pub initial_heldout: f64,
    pub final_heldout: f64,
    /// Cross-entropy of a uniform prediction over the LM units.
    pub uniform: f64,
    /// `(step, mean training loss)` every 100 steps.
    pub curve: Vec<(u64, f64)>,
}

/// Masks each position with probability `p`, at least one position.
pub fn mlm_mask_positions(len: usize, p: f64, rng: &mut crate::numerics::Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..len).filter(|_| rng.random::<f64>() < p).collect();
    if pos.is_empty() && len > 0 {
        pos.push(rng.random_range(0..len));
    }
    pos
}

/// Mean cross-entropy of the original ids at the masked positions, and the
/// gradients of the `mlm.*` tensors when `mode` trains them.
pub fn mlm_loss<T: Scalar>(
    params: &ModelParams<T>,
    seq: &TokenSequence,
    positions: &[usize],
    mask_id: u32,
    mode: BindMode,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    if positions.is_empty() {
        return Err(invalid("no masked positions"));
    }
    let mut masked = seq.clone();
    for &p in positions {
        masked.ids[p] = mask_id;
    }
    let mut g = Graph::new();
    let mut b = Binder::new(params, mode);
    let h = mlm_embed(&mut g, &mut b, &masked)?;
    let lp = mlm_logprobs(&mut g, &mut b, h)?;
    let picked = g.gather(lp, positions)?;
    let classes = params.config.lm_vocab;
    let mut onehot = Tensor::zeros(&[positions.len(), classes]);
    for (r, &p) in positions.iter().enumerate() {
        onehot.row_mut(r)[seq.ids[p] as usize] = T::one();
    }
    let onehot = g.constant(onehot);
    let sel = g.mul(picked, onehot)?;
    let total = g.sum(sel);
    let loss = g.scale(total, T::of(-1.0 / positions.len() as f64));
    let value = g.value(loss).data()[0].as_f64();
    let grads = if mode == BindMode::Eval {
        BTreeMap::new()
    } else {
        b.gradients(&g.backward(loss)?)
    };
    Ok((value, grads))
}

fn heldout_loss(
    params: &ModelParams<f32>,
    heldout: &[TokenSequence],
    cfg: &MlmConfig,
    mask_id: u32,
    seed: u64,
) -> Result<f64> {
    let stream = SeedStream::new(seed).child(0x4e1d);
    let losses = heldout
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream.child(i as u64).rng();
            let pos = mlm_mask_positions(s.len(), cfg.mask_prob, &mut rng);
            mlm_loss(params, s, &pos, mask_id, BindMode::Eval).map(|r| r.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains the masked-LM tensors of `params` in place.
pub fn pretrain_mlm(
    params: &mut ModelParams<f32>,
    corpus: &[TokenSequence],
    mask_id: u32,
    cfg: &MlmConfig,
    seed: u64,
) -> Result<MlmReport> {
    let corpus: Vec<TokenSequence> = corpus.iter().filter(|s| !s.is_empty()).cloned().collect();
    if corpus.iter().any(|s| s.unit_system != UnitSystem::Lm) {
        return Err(invalid("MLM corpus must be in LM units"));
    }
    if corpus.len() <= cfg.heldout || cfg.batch == 0 {
        return Err(invalid(format!(
            "MLM corpus of {} sentences is too small for {} held out",
            corpus.len(),
            cfg.heldout
        )));
    }
    let (train, heldout) = corpus.split_at(corpus.len() - cfg.heldout);
    let initial_heldout = heldout_loss(params, heldout, cfg, mask_id, seed)?;
    let schedule = NoamSchedule {
        peak_lr: cfg.peak_lr,
        warmup: cfg.warmup,
    };
    let adam = AdamConfig::default();
    let mut state = AdamState::default();
    let stream = SeedStream::new(seed).child(0x6d6c6d);
    let mut curve = Vec::new();
    let mut window = 0.0;
    for step in 1..=cfg.steps {
        let step_stream = stream.child(step);
        let mut pick = step_stream.child(u64::MAX).rng();
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| pick.random_range(0..train.len()))
            .collect();
        let frozen: &ModelParams<f32> = params;
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut rng = step_stream.child(j as u64).rng();
                let pos = mlm_mask_positions(train[i].len(), cfg.mask_prob, &mut rng);
                mlm_loss(frozen, &train[i], &pos, mask_id, BindMode::PretrainMlm)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = BTreeMap::new();
        let mut loss = 0.0;
        for (l, g) in results {
            loss += l;
            add_gradients(&mut grads, g)?;
        }
        let inv = 1.0 / cfg.batch as f32;
        grads.values_mut().for_each(|g| g.scale_in_place(inv));
        adam_step(
            &mut params.tensors,
            &grads,
            &mut state,
            &adam,
            schedule.lr(step),
        )?;
        window += loss / cfg.batch as f64;
        if step % 100 == 0 || step == cfg.steps {
            let n = if step % 100 == 0 { 100 } else { step % 100 };
            curve.push((step, window / n as f64));
            log::info!("mlm step {step}: loss {:.4}", window / n as f64);
            window = 0.0;
        }
    }
    let final_heldout = heldout_loss(params, heldout, cfg, mask_id, seed)?;
    Ok(MlmReport {
        steps: cfg.steps,
        initial_heldout,
        final_heldout,
        uniform: (params.config.lm_vocab as f64).ln(),
        curve,
    })
}
