//! Synthetic corpus: sentences from a small class-bigram grammar rendered as
//! noisy per-character prototype frames, plus a separate LM text corpus over
//! a shifted word inventory.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Rng, SeedStream, StoredTensor, Tensor, TensorFile};

use super::config::DataConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Adv,
}

const CLASSES: [Class; 6] = [
    Class::Det,
    Class::Adj,
    Class::Noun,
    Class::Verb,
    Class::Prep,
    Class::Adv,
];

const WORDS: [(&str, Class); 30] = [
    ("the", Class::Det),
    ("a", Class::Det),
    ("my", Class::Det),
    ("one", Class::Det),
    ("red", Class::Adj),
    ("big", Class::Adj),
    ("old", Class::Adj),
    ("small", Class::Adj),
    ("green", Class::Adj),
    ("quiet", Class::Adj),
    ("cat", Class::Noun),
    ("dog", Class::Noun),
    ("bird", Class::Noun),
    ("fox", Class::Noun),
    ("tree", Class::Noun),
    ("house", Class::Noun),
    ("car", Class::Noun),
    ("boat", Class::Noun),
    ("sees", Class::Verb),
    ("likes", Class::Verb),
    ("finds", Class::Verb),
    ("chases", Class::Verb),
    ("hears", Class::Verb),
    ("meets", Class::Verb),
    ("near", Class::Prep),
    ("under", Class::Prep),
    ("behind", Class::Prep),
    ("today", Class::Adv),
    ("now", Class::Adv),
    ("again", Class::Adv),
];

/// Next-class distribution; `None` ends the sentence.
fn successors(prev: Option<Class>) -> &'static [(Option<Class>, f64)] {
    use Class::*;
    match prev {
        None => &[(Some(Det), 0.8), (Some(Noun), 0.2)],
        Some(Det) => &[(Some(Adj), 0.4), (Some(Noun), 0.6)],
        Some(Adj) => &[(Some(Adj), 0.15), (Some(Noun), 0.85)],
        Some(Noun) => &[
            (Some(Verb), 0.6),
            (Some(Prep), 0.2),
            (Some(Adv), 0.1),
            (None, 0.1),
        ],
        Some(Verb) => &[(Some(Det), 0.7), (Some(Adv), 0.2), (None, 0.1)],
        Some(Prep) => &[(Some(Det), 1.0)],
        Some(Adv) => &[(None, 0.6), (Some(Prep), 0.4)],
    }
}

/// Word pools per class.
#[derive(Clone, Debug)]
pub struct Grammar {
    pools: Vec<Vec<String>>,
}

fn class_index(c: Class) -> usize {
    CLASSES.iter().position(|&x| x == c).unwrap()
}

impl Grammar {
    /// The transcript grammar over the fixed word inventory.
    pub fn transcripts() -> Self {
        let mut pools = vec![Vec::new(); CLASSES.len()];
        for (w, c) in WORDS {
            pools[class_index(c)].push(w.to_string());
        }
        Self { pools }
    }

    /// The LM grammar: a fraction of the transcript words removed (each
    /// class keeps at least one) and invented words added to random classes.
    pub fn lm_slice(drop_fraction: f64, extra_words: usize, rng: &mut Rng) -> Self {
        let base = Self::transcripts();
        let mut all: Vec<&str> = WORDS.iter().map(|w| w.0).collect();
        all.shuffle(rng);
        let target = (WORDS.len() as f64 * drop_fraction).round() as usize;
        let mut pools = base.pools.clone();
        let mut dropped = 0;
        for w in all {
            if dropped == target {
                break;
            }
            let pool = pools.iter_mut().find(|p| p.iter().any(|x| x == w)).unwrap();
            if pool.len() > 1 {
                pool.retain(|x| x != w);
                dropped += 1;
            }
        }
        let mut known: BTreeSet<String> = WORDS.iter().map(|w| w.0.to_string()).collect();
        let mut added = 0;
        while added < extra_words {
            let w = pseudo_word(rng);
            if known.insert(w.clone()) {
                let c = rng.random_range(0..CLASSES.len());
                pools[c].push(w);
                added += 1;
            }
        }
        Self { pools }
    }

    pub fn words(&self) -> BTreeSet<&str> {
        self.pools.iter().flatten().map(String::as_str).collect()
    }

    /// A sentence of `min..=max` words; shorter draws are rejected and longer
    /// ones are cut.
    pub fn sentence(&self, min: usize, max: usize, rng: &mut Rng) -> String {
        loop {
            let mut words = Vec::new();
            let mut prev = None;
            while words.len() < max {
                let next = sample(successors(prev), rng);
                let Some(c) = next else { break };
                let pool = &self.pools[class_index(c)];
                words.push(pool[rng.random_range(0..pool.len())].as_str());
                prev = Some(c);
            }
            if words.len() >= min {
                return words.join(" ");
            }
        }
    }
}

fn sample<T: Copy>(dist: &[(T, f64)], rng: &mut Rng) -> T {
    let mut u: f64 = rng.random();
    for &(x, p) in dist {
        if u < p {
            return x;
        }
        u -= p;
    }
    dist[dist.len() - 1].0
}

fn pseudo_word(rng: &mut Rng) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "pl",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| {
            let o = ONSETS[rng.random_range(0..ONSETS.len())];
            let v = VOWELS[rng.random_range(0..VOWELS.len())];
            format!("{o}{v}")
        })
        .collect()
}

/// Feature prototypes: one row per lowercase letter; silence is the zero
/// vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub letters: Tensor<f64>,
}

impl Prototypes {
    pub fn new(feat_dim: usize, rng: &mut Rng) -> Self {
        let n = Normal::new(0.0, 1.0).unwrap();
        let data = (0..26 * feat_dim).map(|_| n.sample(rng)).collect();
        Self {
            letters: Tensor::matrix(26, feat_dim, data).unwrap(),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.letters.cols()
    }

    /// Prototype row of a frame label; `None` is silence.
    pub fn row(&self, label: Option<char>) -> Vec<f64> {
        match label {
            Some(c) => self.letters.row(c as usize - 'a' as usize).to_vec(),
            None => vec![0.0; self.feat_dim()],
        }
    }

    /// Label of the nearest prototype (silence included).
    pub fn nearest(&self, frame: &[f64]) -> Option<char> {
        let dist = |p: &[f64]| -> f64 { p.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut best = (dist(&vec![0.0; self.feat_dim()]), None);
        for i in 0..26 {
            let d = dist(self.letters.row(i));
            if d < best.0 {
                best = (d, Some((b'a' + i as u8) as char));
            }
        }
        best.1
    }
}

/// A rendered utterance with its frame-level labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub feats: Tensor<f32>,
    /// Source of each frame: a letter or silence.
    pub labels: Vec<Option<char>>,
}

/// Renders `text` (lowercase letters and single spaces): each letter for
/// a uniform number of frames in `min_duration..=max_duration`, silence
/// between words, Gaussian noise on every frame.
pub fn render(
    text: &str,
    protos: &Prototypes,
    cfg: &DataConfig,
    rng: &mut Rng,
) -> Result<Rendering> {
    if text.trim().is_empty() {
        return Err(invalid("cannot render empty text"));
    }
    let mut labels = Vec::new();
    for (i, word) in text.split(' ').enumerate() {
        if i > 0 {
            let n = rng.random_range(cfg.min_silence..=cfg.max_silence);
            labels.extend(std::iter::repeat_n(None, n));
        }
        for c in word.chars() {
            if !c.is_ascii_lowercase() {
                return Err(invalid(format!("cannot render {c:?}")));
            }
            let n = rng.random_range(cfg.min_duration..=cfg.max_duration);
            labels.extend(std::iter::repeat_n(Some(c), n));
        }
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(labels.len() * protos.feat_dim());
    for &l in &labels {
        for x in protos.row(l) {
            data.push((x + noise.sample(rng)) as f32);
        }
    }
    Ok(Rendering {
        feats: Tensor::matrix(labels.len(), protos.feat_dim(), data)?,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown split {s:?}")))
    }
}

/// One line of a split listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub text: String,
    pub frames: usize,
    /// Byte offset of the feature matrix in `feats.btc`.
    pub offset: u64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub feats: Tensor<f32>,
}

pub const FEATS_FILE: &str = "feats.btc";
pub const LM_CORPUS_FILE: &str = "lm_corpus.txt";

pub fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// In-memory dataset as produced by [`generate_corpus`].
#[derive(Clone, Debug)]
pub struct Corpus {
    pub splits: Vec<(Split, Vec<Utterance>)>,
    pub lm_text: Vec<String>,
}

const PROTO_TAG: u64 = 1;
const TEXT_TAG: u64 = 2;
const RENDER_TAG: u64 = 3;
const LM_TAG: u64 = 4;

pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let root = SeedStream::new(seed);
    let protos = Prototypes::new(cfg.feat_dim, &mut root.child(PROTO_TAG).rng());
    let grammar = Grammar::transcripts();
    let mut splits = Vec::new();
    for (s, (split, n)) in [
        (Split::Train, cfg.train),
        (Split::Dev, cfg.dev),
        (Split::Test, cfg.test),
    ]
    .into_iter()
    .enumerate()
    {
        let mut text_rng = root.path(&[TEXT_TAG, s as u64]).rng();
        let mut utts = Vec::with_capacity(n);
        for i in 0..n {
            let text = grammar.sentence(cfg.min_words, cfg.max_words, &mut text_rng);
            let mut r = root.path(&[RENDER_TAG, s as u64, i as u64]).rng();
            let feats = render(&text, &protos, cfg, &mut r)?.feats;
            utts.push(Utterance {
                id: format!("{}-{i:05}", split.name()),
                text,
                feats,
            });
        }
        splits.push((split, utts));
    }
    let mut lm_rng = root.child(LM_TAG).rng();
    let lm_grammar = Grammar::lm_slice(cfg.lm_drop_fraction, cfg.lm_extra_words, &mut lm_rng);
    let lm_text = (0..cfg.lm_sentences)
        .map(|_| lm_grammar.sentence(cfg.min_words, cfg.max_words, &mut lm_rng))
        .collect();
    Ok(Corpus { splits, lm_text })
}

/// Generates the corpus and writes it to `dir`: one listing per split, all
/// features in one container, and the LM text.
pub fn generate_corpus(
    cfg: &DataConfig,
    seed: u64,
    config_hash: &str,
    dir: &Path,
) -> Result<Corpus> {
    let corpus = generate(cfg, seed)?;
    std::fs::create_dir_all(dir)?;
    let mut file = TensorFile::default();
    let meta = serde_json::json!({ "seed": seed, "config_hash": config_hash });
    file.push("meta", StoredTensor::Bytes(serde_json::to_vec(&meta)?));
    for (_, utts) in &corpus.splits {
        for u in utts {
            file.push(u.id.clone(), StoredTensor::F32(u.feats.clone()));
        }
    }
    let offsets = file.save(&dir.join(FEATS_FILE))?;
    let mut k = 1;
    for (split, utts) in &corpus.splits {
        let mut w = BufWriter::new(File::create(split_file(dir, *split))?);
        for u in utts {
            let rec = UtteranceRecord {
                id: u.id.clone(),
                text: u.text.clone(),
                frames: u.feats.rows(),
                offset: offsets[k],
                seed,
                config_hash: config_hash.to_string(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            k += 1;
        }
        w.flush()?;
    }
    let mut w = BufWriter::new(File::create(dir.join(LM_CORPUS_FILE))?);
    writeln!(w, "# seed={seed} config_hash={config_hash}")?;
    for line in &corpus.lm_text {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(corpus)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `bectra gen-data` first".into(),
            },
            _ => Error::Io(e),
        })
}

pub fn load_records(dir: &Path, split: Split) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for line in open(&split_file(dir, split))?.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Utterance>> {
    let feats = dir.join(FEATS_FILE);
    load_records(dir, split)?
        .into_iter()
        .map(|r| {
            let (name, t) = TensorFile::read_entry_at(&feats, r.offset)?;
            if name != r.id {
                return Err(Error::Format(format!(
                    "offset of {} points at {name}",
                    r.id
                )));
            }
            Ok(Utterance {
                id: r.id,
                text: r.text,
                feats: t.to_real()?,
            })
        })
        .collect()
}

pub fn load_lm_corpus(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in open(&dir.join(LM_CORPUS_FILE))?.lines() {
        let line = line?;
        if !line.starts_with('#') && !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}
