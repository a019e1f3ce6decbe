//! Inference: iterative mask-predict refinement in LM units, then transducer
//! search in ASR units conditioned on the refined hypothesis.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lattice::{
    ctc_best_path, ctc_best_path_scored, transducer_loss, FrameLogProbs, LatticeLogProbs,
    LossStatus,
};
use crate::masking::{mask_count, mask_lowest_confidence};
use crate::model::infer::{
    joint_step, pred_start, pred_step, project_audio, project_pred, PredState,
};
use crate::model::{
    audio_encode, concat_net, intermediate_ctc_logprobs, mlm_embed, BindMode, Binder, ModelParams,
};
use crate::numerics::{log_add, Graph, Scalar, Tensor};
use crate::vocab::{convert_units, TokenSequence, UnitSystem, Vocabulary};

pub const DEFAULT_MAX_SYMBOLS: usize = 5;

/// The two vocabularies a decoder needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub lm: Vocabulary,
    pub asr: Vocabulary,
}

impl Vocabs {
    pub fn mask_id(&self) -> Result<u32> {
        self.lm
            .mask_id()
            .ok_or_else(|| invalid("LM vocabulary has no mask token"))
    }
}

/// Encoder states and the intermediate CTC frame distribution of one input.
#[derive(Clone, Debug)]
pub struct EncodedAudio<T: Scalar> {
    pub e: Tensor<T>,
    pub interctc: Tensor<T>,
}

pub fn encode<T: Scalar>(params: &ModelParams<T>, feats: &Tensor<T>) -> Result<EncodedAudio<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, BindMode::Eval);
    let enc = audio_encode(&mut g, &mut b, feats)?;
    let ictc = intermediate_ctc_logprobs(&mut g, &mut b, &enc)?;
    Ok(EncodedAudio {
        e: g.value(enc.e).clone(),
        interctc: g.value(ictc).clone(),
    })
}

/// Concatenation network on fixed encoder states and a (masked) LM
/// sequence: returns the audio rows and the frame log-probabilities.
pub fn condition<T: Scalar>(
    params: &ModelParams<T>,
    e: &Tensor<T>,
    w: &TokenSequence,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, BindMode::Eval);
    let h = mlm_embed(&mut g, &mut b, w)?;
    let ev = g.constant(e.clone());
    let out = concat_net(&mut g, &mut b, ev, h)?;
    Ok((
        g.value(out.audio).clone(),
        g.value(out.frame_logprobs).clone(),
    ))
}

/// Initial hypothesis length: the greedy intermediate-CTC output in LM
/// units, or `max(1, ⌈T′/4⌉)` when that is empty.
pub fn initial_length<T: Scalar>(enc: &EncodedAudio<T>, vocabs: &Vocabs) -> Result<usize> {
    let lp = FrameLogProbs::from_tensor(&enc.interctc)?;
    let asr = TokenSequence::new(ctc_best_path(&lp), UnitSystem::Asr);
    let n = convert_units(&asr, &vocabs.asr, &vocabs.lm)?.len();
    Ok(if n > 0 {
        n
    } else {
        enc.e.rows().div_ceil(4).max(1)
    })
}

/// One refinement iteration as shown in a decoding trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub text: String,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    /// Positions re-masked for the next iteration.
    pub masked: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct RefinementOutput<T: Scalar> {
    /// Final hypothesis in LM units, free of mask tokens.
    pub hypothesis: TokenSequence,
    /// Audio rows of the concatenation network conditioned on the final
    /// hypothesis.
    pub audio: Tensor<T>,
    pub trace: Vec<IterationRecord>,
}

/// Mask-predict refinement over `k_total` iterations.
pub fn decode_bertctc<T: Scalar>(
    params: &ModelParams<T>,
    vocabs: &Vocabs,
    enc: &EncodedAudio<T>,
    k_total: usize,
) -> Result<RefinementOutput<T>> {
    if k_total == 0 {
        return Err(invalid("K must be at least 1"));
    }
    let mask = vocabs.mask_id()?;
    let mut w = TokenSequence::new(vec![mask; initial_length(enc, vocabs)?], UnitSystem::Lm);
    let mut trace = Vec::with_capacity(k_total);
    let mut hypothesis = TokenSequence::empty(UnitSystem::Lm);
    for k in 1..=k_total {
        let (_, lp) = condition(params, &enc.e, &w)?;
        let scored = ctc_best_path_scored(&without_class(&lp, mask)?);
        let ids: Vec<u32> = scored.iter().map(|s| s.0).collect();
        let scores: Vec<f64> = scored.iter().map(|s| s.1).collect();
        let count = mask_count(ids.len(), k, k_total)?;
        let next = mask_lowest_confidence(&ids, &scores, count, mask)?;
        let current = TokenSequence::new(ids, UnitSystem::Lm);
        trace.push(IterationRecord {
            k,
            text: vocabs.lm.detokenize(&current),
            tokens: current
                .ids
                .iter()
                .map(|&i| vocabs.lm.token(i).unwrap_or("<unk>").to_string())
                .collect(),
            scores,
            masked: next.iter().map(|&i| i == mask).collect(),
        });
        w = if next.is_empty() {
            TokenSequence::new(vec![mask], UnitSystem::Lm)
        } else {
            TokenSequence::new(next, UnitSystem::Lm)
        };
        hypothesis = current;
    }
    // fresh pass on the final hypothesis; an empty one is represented by a
    // single mask token
    let (audio, _) = condition(params, &enc.e, &w)?;
    Ok(RefinementOutput {
        hypothesis,
        audio,
        trace,
    })
}

/// Frame log-probabilities with one class excluded from best-path choice.
fn without_class<T: Scalar>(lp: &Tensor<T>, class: u32) -> Result<FrameLogProbs> {
    let lp = FrameLogProbs::from_tensor(lp)?;
    let (frames, classes) = (lp.frames(), lp.classes());
    let mut data = lp.data().to_vec();
    for t in 0..frames {
        data[t * classes + class as usize] = f64::NEG_INFINITY;
    }
    FrameLogProbs::new(frames, classes, data)
}

/// A transducer output sequence with two scores: the log-probability of the
/// single alignment the search followed, and the exact log-probability of
/// the label sequence summed over all alignments.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub path_score: f64,
    pub log_score: f64,
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Shared per-utterance state of the transducer searches: projected audio
/// rows and a cache of prediction states by prefix.
struct Searcher<'a, T: Scalar> {
    params: &'a ModelParams<T>,
    audio_proj: Tensor<T>,
    states: HashMap<Vec<u32>, (PredState<T>, Tensor<T>)>,
    blank: usize,
    max_symbols: usize,
}

impl<'a, T: Scalar> Searcher<'a, T> {
    fn new(params: &'a ModelParams<T>, audio: &Tensor<T>, max_symbols: usize) -> Result<Self> {
        if max_symbols == 0 {
            return Err(invalid("max_symbols_per_frame must be positive"));
        }
        let mut s = Self {
            params,
            audio_proj: project_audio(params, audio)?,
            states: HashMap::new(),
            blank: params.config.asr_vocab,
            max_symbols,
        };
        let start = pred_start(params)?;
        let proj = project_pred(params, &start)?;
        s.states.insert(Vec::new(), (start, proj));
        Ok(s)
    }

    fn frames(&self) -> usize {
        self.audio_proj.rows()
    }

    fn ensure(&mut self, prefix: &[u32]) -> Result<()> {
        if self.states.contains_key(prefix) {
            return Ok(());
        }
        let (head, last) = prefix.split_at(prefix.len() - 1);
        self.ensure(head)?;
        let state = pred_step(self.params, Some(&self.states[head].0), last[0])?;
        let proj = project_pred(self.params, &state)?;
        self.states.insert(prefix.to_vec(), (state, proj));
        Ok(())
    }

    fn joint(&mut self, t: usize, prefix: &[u32]) -> Result<Vec<f64>> {
        self.ensure(prefix)?;
        joint_step(self.params, self.audio_proj.row(t), &self.states[prefix].1)
    }

    /// Exact `log p(tokens | audio)` over all alignments.
    fn sequence_log_prob(&mut self, tokens: &[u32]) -> Result<f64> {
        let (frames, states) = (self.frames(), tokens.len() + 1);
        let classes = self.blank + 1;
        let mut data = Vec::with_capacity(frames * states * classes);
        let rows: Vec<Vec<f64>> = (0..states)
            .map(|u| -> Result<Vec<f64>> {
                let mut col = Vec::with_capacity(frames * classes);
                for t in 0..frames {
                    col.extend(self.joint(t, &tokens[..u])?);
                }
                Ok(col)
            })
            .collect::<Result<_>>()?;
        for t in 0..frames {
            for row in &rows {
                data.extend_from_slice(&row[t * classes..(t + 1) * classes]);
            }
        }
        let lattice = LatticeLogProbs::new(frames, states, classes, data)?;
        let r = transducer_loss(&lattice, tokens)?;
        Ok(match r.status {
            LossStatus::Ok => -r.nll,
            LossStatus::Infeasible => f64::NEG_INFINITY,
        })
    }

    fn greedy(&mut self) -> Result<(Vec<u32>, f64)> {
        let mut prefix = Vec::new();
        let mut score = 0.0;
        for t in 0..self.frames() {
            let mut emitted = 0;
            loop {
                let lp = self.joint(t, &prefix)?;
                let k = argmax_lowest(&lp);
                if k == self.blank || emitted == self.max_symbols {
                    score += lp[self.blank];
                    break;
                }
                score += lp[k];
                prefix.push(k as u32);
                emitted += 1;
            }
        }
        Ok((prefix, score))
    }

    /// Time-synchronous beam search: at each frame the active hypotheses are
    /// extended by up to `max_symbols` labels, keeping the `width` best
    /// label extensions per step; every hypothesis that emits the frame's
    /// blank joins the next beam, which keeps the `width` best.
    fn beam(&mut self, width: usize) -> Result<Vec<(Vec<u32>, f64)>> {
        let mut beam = Pool::default();
        beam.add(Vec::new(), 0.0);
        for t in 0..self.frames() {
            let mut done = Pool::default();
            let mut active = beam;
            for step in 0..=self.max_symbols {
                let mut next = Pool::default();
                for (prefix, score) in &active.items {
                    let lp = self.joint(t, prefix)?;
                    done.add(prefix.clone(), score + lp[self.blank]);
                    if step < self.max_symbols {
                        for (k, &l) in lp[..self.blank].iter().enumerate() {
                            let mut p = prefix.clone();
                            p.push(k as u32);
                            next.add(p, score + l);
                        }
                    }
                }
                active = next.best(width);
            }
            beam = done.best(width);
        }
        Ok(beam.items)
    }
}

/// Hypotheses keyed by prefix; adding an existing prefix log-adds scores.
#[derive(Default)]
struct Pool {
    items: Vec<(Vec<u32>, f64)>,
    index: HashMap<Vec<u32>, usize>,
}

impl Pool {
    fn add(&mut self, prefix: Vec<u32>, score: f64) {
        match self.index.get(&prefix) {
            Some(&i) => self.items[i].1 = log_add(self.items[i].1, score),
            None => {
                self.index.insert(prefix.clone(), self.items.len());
                self.items.push((prefix, score));
            }
        }
    }

    /// The `n` highest-scoring entries; ties go to the lexicographically
    /// smaller prefix.
    fn best(mut self, n: usize) -> Pool {
        self.items
            .sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        self.items.truncate(n);
        let index = self
            .items
            .iter()
            .enumerate()
            .map(|(i, e)| (e.0.clone(), i))
            .collect();
        Pool {
            items: self.items,
            index,
        }
    }
}

fn asr_seq(ids: Vec<u32>) -> TokenSequence {
    TokenSequence::new(ids, UnitSystem::Asr)
}

/// Greedy transducer decoding: at each frame emit the argmax label until the
/// argmax is blank or `max_symbols` labels were emitted.
pub fn greedy_transducer<T: Scalar>(
    params: &ModelParams<T>,
    audio: &Tensor<T>,
    max_symbols: usize,
) -> Result<Hypothesis> {
    let mut s = Searcher::new(params, audio, max_symbols)?;
    let (tokens, path_score) = s.greedy()?;
    let log_score = s.sequence_log_prob(&tokens)?;
    Ok(Hypothesis {
        tokens: asr_seq(tokens),
        path_score,
        log_score,
    })
}

/// Beam search with prefix merging. The surviving beam and the greedy
/// hypothesis are rescored by their exact sequence probability, and the best
/// of them is returned. Width 1 is greedy decoding.
pub fn beam_search_transducer<T: Scalar>(
    params: &ModelParams<T>,
    audio: &Tensor<T>,
    width: usize,
    max_symbols: usize,
) -> Result<Hypothesis> {
    if width == 0 {
        return Err(invalid("beam width must be at least 1"));
    }
    if width == 1 {
        return greedy_transducer(params, audio, max_symbols);
    }
    let mut s = Searcher::new(params, audio, max_symbols)?;
    let (greedy, greedy_path) = s.greedy()?;
    let mut cands = s.beam(width)?;
    if !cands.iter().any(|c| c.0 == greedy) {
        cands.push((greedy, greedy_path));
    }
    let mut best: Option<Hypothesis> = None;
    for (tokens, path_score) in cands {
        let log_score = s.sequence_log_prob(&tokens)?;
        let better = match &best {
            None => true,
            Some(b) => {
                log_score > b.log_score
                    || (log_score == b.log_score && path_score > b.path_score)
                    || (log_score == b.log_score
                        && path_score == b.path_score
                        && tokens < b.tokens.ids)
            }
        };
        if better {
            best = Some(Hypothesis {
                tokens: asr_seq(tokens),
                path_score,
                log_score,
            });
        }
    }
    Ok(best.expect("beam is never empty"))
}

/// Exact `log p(tokens | audio rows)` under the joint network.
pub fn transducer_log_prob<T: Scalar>(
    params: &ModelParams<T>,
    audio: &Tensor<T>,
    tokens: &[u32],
) -> Result<f64> {
    Searcher::new(params, audio, DEFAULT_MAX_SYMBOLS)?.sequence_log_prob(tokens)
}

#[derive(Clone, Debug)]
pub struct BectraOutput<T: Scalar> {
    pub hypothesis: Hypothesis,
    pub refinement: RefinementOutput<T>,
}

/// Refinement for `k_total` iterations, then beam search of width `width`
/// over the concatenation network conditioned on the refined hypothesis.
pub fn decode_bectra<T: Scalar>(
    params: &ModelParams<T>,
    vocabs: &Vocabs,
    feats: &Tensor<T>,
    k_total: usize,
    width: usize,
    max_symbols: usize,
) -> Result<BectraOutput<T>> {
    let enc = encode(params, feats)?;
    let refinement = decode_bertctc(params, vocabs, &enc, k_total)?;
    let hypothesis = beam_search_transducer(params, &refinement.audio, width, max_symbols)?;
    Ok(BectraOutput {
        hypothesis,
        refinement,
    })
}

#[cfg(test)]
mod tests;
