//! The stages behind the CLI subcommands, over a fixed artifact layout:
//!
//! ```text
//! <out>/data/{train,dev,test}.jsonl, feats.btc, lm_corpus.txt
//! <out>/vocab/{lm,asr}.vocab
//! <out>/mlm.btc, mlm_report.json
//! <out>/train/epochNNN.btc, avg.btc, train.log.jsonl
//! <out>/eval/<split>.<mode>.jsonl, <split>.<mode>.summary.json
//! <out>/bench/tradeoff.csv, tradeoff.meta.json
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{decode_bectra, decode_bertctc, encode, Vocabs};
use crate::error::{invalid, Result};
use crate::model::{pretrain_mlm, MlmReport, ModelConfig, ModelParams};
use crate::numerics::{AdamState, SeedStream};
use crate::training::{train, Checkpoint, Example, TrainOutcome, TrainState};
use crate::vocab::{build_asr_vocab, build_lm_vocab, UnitSystem, Vocabulary};

use super::config::Config;
use super::data::{load_lm_corpus, load_split, Split, Utterance};
use super::metrics::{char_errors, word_errors, EditCounts};

/// Frame shift used as the time base of real-time factors.
pub const FRAME_SHIFT_SECONDS: f64 = 0.01;
const INIT_TAG: u64 = 0x696e6974;

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn lm_vocab(&self) -> PathBuf {
        self.root.join("vocab").join("lm.vocab")
    }
    pub fn asr_vocab(&self) -> PathBuf {
        self.root.join("vocab").join("asr.vocab")
    }
    pub fn mlm(&self) -> PathBuf {
        self.root.join("mlm.btc")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn averaged(&self) -> PathBuf {
        self.train().join("avg.btc")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn bench(&self) -> PathBuf {
        self.root.join("bench")
    }
}

fn header(cfg: &Config) -> Vec<(&'static str, String)> {
    vec![("seed", cfg.seed.to_string()), ("config_hash", cfg.hash())]
}

/// LM vocabulary from the LM corpus, ASR vocabulary from the training
/// transcripts.
pub fn build_vocabs(cfg: &Config, layout: &Layout) -> Result<Vocabs> {
    let lm = build_lm_vocab(&load_lm_corpus(&layout.data())?)?;
    let texts: Vec<String> = load_split(&layout.data(), Split::Train)?
        .into_iter()
        .map(|u| u.text)
        .collect();
    let asr = build_asr_vocab(&texts, cfg.vocab.asr_units)?;
    std::fs::create_dir_all(layout.root.join("vocab"))?;
    lm.save(&layout.lm_vocab(), &header(cfg))?;
    asr.save(&layout.asr_vocab(), &header(cfg))?;
    Ok(Vocabs { lm, asr })
}

pub fn load_vocabs(layout: &Layout) -> Result<Vocabs> {
    let lm = Vocabulary::load(&layout.lm_vocab())?;
    let asr = Vocabulary::load(&layout.asr_vocab())?;
    if lm.unit_system() != UnitSystem::Lm || asr.unit_system() != UnitSystem::Asr {
        return Err(invalid("vocabulary files have the wrong unit systems"));
    }
    Ok(Vocabs { lm, asr })
}

pub fn model_config(cfg: &Config, vocabs: &Vocabs) -> ModelConfig {
    ModelConfig {
        asr_vocab: vocabs.asr.len(),
        lm_vocab: vocabs.lm.len(),
        ..cfg.model.clone()
    }
}

/// Initialises the model from the seed and pretrains its `mlm.*` tensors on
/// the LM corpus; saves the result as the training starting point.
pub fn pretrain(cfg: &Config, layout: &Layout, vocabs: &Vocabs) -> Result<MlmReport> {
    let mc = model_config(cfg, vocabs);
    let mut params = ModelParams::init(&mc, &mut SeedStream::new(cfg.seed).child(INIT_TAG).rng())?;
    let corpus: Vec<_> = load_lm_corpus(&layout.data())?
        .iter()
        .map(|s| vocabs.lm.tokenize(s))
        .collect();
    let report = pretrain_mlm(
        &mut params,
        &corpus,
        vocabs.mask_id()?,
        &cfg.pretrain,
        cfg.seed,
    )?;
    Checkpoint::new(params, cfg.seed, &cfg.hash()).save(&layout.mlm())?;
    std::fs::write(
        layout.root.join("mlm_report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}

pub fn examples(utts: &[Utterance], vocabs: &Vocabs) -> Vec<Example> {
    utts.iter()
        .map(|u| Example {
            id: u.id.clone(),
            feats: u.feats.clone(),
            lm_target: vocabs.lm.tokenize(&u.text),
            asr_target: vocabs.asr.tokenize(&u.text),
        })
        .collect()
}

/// Trains from the pretrained starting point.
pub fn run_training(cfg: &Config, layout: &Layout, vocabs: &Vocabs) -> Result<TrainOutcome> {
    let start = Checkpoint::load(&layout.mlm())?;
    let expected = model_config(cfg, vocabs);
    if start.params.config != expected {
        return Err(invalid(
            "pretrained checkpoint does not match the configured model",
        ));
    }
    let state = TrainState {
        params: start.params,
        adam: AdamState::default(),
        epoch: 0,
    };
    let tr = examples(&load_split(&layout.data(), Split::Train)?, vocabs);
    let dev = examples(&load_split(&layout.data(), Split::Dev)?, vocabs);
    train(
        state,
        &tr,
        &dev,
        &cfg.train,
        vocabs.mask_id()?,
        cfg.seed,
        &cfg.hash(),
        &layout.train(),
    )
}

/// What `evaluate` decodes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DecodeMode {
    /// Refinement only; the LM-unit hypothesis is scored as text.
    Bertctc { iterations: usize },
    /// Refinement then transducer beam search.
    Bectra { iterations: usize, beam: usize },
    /// Refinement then greedy transducer search.
    Greedy { iterations: usize },
}

impl DecodeMode {
    pub fn label(&self) -> String {
        match *self {
            DecodeMode::Bertctc { iterations } => format!("bertctc-k{iterations}"),
            DecodeMode::Bectra { iterations, beam } => format!("bectra-k{iterations}-b{beam}"),
            DecodeMode::Greedy { iterations } => format!("greedy-k{iterations}"),
        }
    }
}

/// Decodes one feature matrix to surface text.
pub fn decode_text(
    params: &ModelParams<f32>,
    vocabs: &Vocabs,
    feats: &crate::numerics::Tensor<f32>,
    mode: DecodeMode,
    max_symbols: usize,
) -> Result<String> {
    match mode {
        DecodeMode::Bertctc { iterations } => {
            let enc = encode(params, feats)?;
            let out = decode_bertctc(params, vocabs, &enc, iterations)?;
            Ok(vocabs.lm.detokenize(&out.hypothesis))
        }
        DecodeMode::Bectra { iterations, beam } => {
            let out = decode_bectra(params, vocabs, feats, iterations, beam, max_symbols)?;
            Ok(vocabs.asr.detokenize(&out.hypothesis.tokens))
        }
        DecodeMode::Greedy { iterations } => {
            let out = decode_bectra(params, vocabs, feats, iterations, 1, max_symbols)?;
            Ok(vocabs.asr.detokenize(&out.hypothesis.tokens))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub word: EditCounts,
    pub char: EditCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: DecodeMode,
    pub utterances: usize,
    pub wer: f64,
    pub cer: f64,
    pub word: EditCounts,
    pub char: EditCounts,
    pub results: Vec<UtteranceResult>,
}

/// Decodes every utterance (in parallel, reduced in input order) and scores
/// the surface text.
pub fn evaluate(
    params: &ModelParams<f32>,
    vocabs: &Vocabs,
    utts: &[Utterance],
    mode: DecodeMode,
    max_symbols: usize,
) -> Result<EvalReport> {
    let results = utts
        .par_iter()
        .map(|u| {
            let hyp = decode_text(params, vocabs, &u.feats, mode, max_symbols)?;
            Ok(UtteranceResult {
                id: u.id.clone(),
                word: word_errors(&hyp, &u.text),
                char: char_errors(&hyp, &u.text),
                reference: u.text.clone(),
                hypothesis: hyp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut word, mut char) = (EditCounts::default(), EditCounts::default());
    for r in &results {
        word.add(&r.word);
        char.add(&r.char);
    }
    Ok(EvalReport {
        mode,
        utterances: results.len(),
        wer: word.rate()?,
        cer: char.rate()?,
        word,
        char,
        results,
    })
}

/// Writes the per-utterance results and a summary next to them.
pub fn write_report(report: &EvalReport, dir: &Path, split: Split) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}.{}", split.name(), report.mode.label());
    let per = dir.join(format!("{stem}.jsonl"));
    let mut w = BufWriter::new(File::create(&per)?);
    for r in &report.results {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    let summary = dir.join(format!("{stem}.summary.json"));
    let s = serde_json::json!({
        "mode": report.mode,
        "split": split.name(),
        "utterances": report.utterances,
        "wer": report.wer,
        "cer": report.cer,
        "word": report.word,
        "char": report.char,
    });
    std::fs::write(&summary, serde_json::to_vec_pretty(&s)?)?;
    Ok((per, summary))
}

/// One cell of the WER/speed grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub k: usize,
    pub b: usize,
    pub wer: f64,
    pub cer: f64,
    /// Median over runs of decode time / audio duration.
    pub rtf_median: f64,
    pub runs: usize,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Error rates and real-time factor for every `(K, B)` pair. Timed runs are
/// sequential on the calling thread; error rates come from the first run.
pub fn bench_tradeoff(
    params: &ModelParams<f32>,
    vocabs: &Vocabs,
    utts: &[Utterance],
    ks: &[usize],
    bs: &[usize],
    repeats: usize,
    max_symbols: usize,
) -> Result<Vec<TradeoffRecord>> {
    if repeats == 0 || utts.is_empty() {
        return Err(invalid(
            "benchmark needs at least one repeat and one utterance",
        ));
    }
    let audio_seconds: f64 = utts
        .iter()
        .map(|u| u.feats.rows() as f64 * FRAME_SHIFT_SECONDS)
        .sum();
    let mut out = Vec::new();
    for &k in ks {
        for &b in bs {
            let mut rtfs = Vec::with_capacity(repeats);
            let (mut word, mut char) = (EditCounts::default(), EditCounts::default());
            for run in 0..repeats {
                let start = Instant::now();
                let mut texts = Vec::with_capacity(utts.len());
                for u in utts {
                    let out = decode_bectra(params, vocabs, &u.feats, k, b, max_symbols)?;
                    texts.push(out.hypothesis.tokens);
                }
                rtfs.push(start.elapsed().as_secs_f64() / audio_seconds);
                if run == 0 {
                    for (u, t) in utts.iter().zip(&texts) {
                        let hyp = vocabs.asr.detokenize(t);
                        word.add(&word_errors(&hyp, &u.text));
                        char.add(&char_errors(&hyp, &u.text));
                    }
                }
            }
            let report = (word.rate()?, char.rate()?);
            log::info!("K={k} B={b}: WER {:.4} CER {:.4}", report.0, report.1);
            out.push(TradeoffRecord {
                k,
                b,
                wer: report.0,
                cer: report.1,
                rtf_median: median(&mut rtfs),
                runs: repeats,
            });
        }
    }
    Ok(out)
}

pub const TRADEOFF_HEADER: &str = "K,B,wer,cer,rtf_median,runs";

pub fn tradeoff_csv(records: &[TradeoffRecord]) -> String {
    let mut s = format!("{TRADEOFF_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.k, r.b, r.wer, r.cer, r.rtf_median, r.runs
        ));
    }
    s
}

/// Plain-text WER table, K down and B across.
pub fn tradeoff_table(records: &[TradeoffRecord]) -> String {
    let mut ks: Vec<usize> = records.iter().map(|r| r.k).collect();
    let mut bs: Vec<usize> = records.iter().map(|r| r.b).collect();
    ks.dedup();
    bs.sort_unstable();
    bs.dedup();
    let mut s = String::from("   K \\ B");
    for b in &bs {
        s.push_str(&format!(" | {b:>16}"));
    }
    s.push('\n');
    for k in &ks {
        s.push_str(&format!("{k:>8}"));
        for b in &bs {
            match records.iter().find(|r| r.k == *k && r.b == *b) {
                Some(r) => s.push_str(&format!(
                    " | {:>6.2}% {:>7.4}x",
                    100.0 * r.wer,
                    r.rtf_median
                )),
                None => s.push_str(&format!(" | {:>16}", "-")),
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_tradeoff(
    records: &[TradeoffRecord],
    cfg: &Config,
    checkpoint: &Path,
    dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("tradeoff.csv");
    std::fs::write(&csv, tradeoff_csv(records))?;
    let meta = serde_json::json!({
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "checkpoint": checkpoint.display().to_string(),
        "frame_shift_seconds": FRAME_SHIFT_SECONDS,
        "threads": 1,
    });
    std::fs::write(
        dir.join("tradeoff.meta.json"),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    Ok(csv)
}
