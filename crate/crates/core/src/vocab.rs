//! The two unit systems: word-level LM units (with a mask token) and
//! subword ASR units built by greedy pair merging over the ASR transcripts.
//!
//! Both vocabularies reserve the column after their last id for the blank
//! symbol, so a head over `V` has `|V| + 1` outputs with blank last.
//!
//! ASR units mark word starts with `▁`, so `"the cat"` becomes `▁the▁cat`
//! before segmentation. Unknown tokens detokenize to the literal `<unk>`,
//! which is lossy by construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";
pub const WORD_START: char = '▁';

const HEADER_TAG: &str = "#bectra-vocab";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitSystem {
    Lm,
    Asr,
}

impl UnitSystem {
    pub fn name(self) -> &'static str {
        match self {
            UnitSystem::Lm => "lm",
            UnitSystem::Asr => "asr",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(UnitSystem::Lm),
            "asr" => Ok(UnitSystem::Asr),
            other => Err(Error::Format(format!("unknown unit system {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub unit_system: UnitSystem,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, unit_system: UnitSystem) -> Self {
        Self { ids, unit_system }
    }

    pub fn empty(unit_system: UnitSystem) -> Self {
        Self::new(Vec::new(), unit_system)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    unit_system: UnitSystem,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    longest_unit: usize,
}

fn specials(unit_system: UnitSystem) -> Vec<String> {
    let mut s = vec![PAD.to_string(), UNK.to_string()];
    if unit_system == UnitSystem::Lm {
        s.push(MASK.to_string());
    }
    s
}

impl Vocabulary {
    fn from_tokens(unit_system: UnitSystem, tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        let expected = specials(unit_system);
        if tokens.len() < expected.len() || tokens[..expected.len()] != expected[..] {
            return Err(Error::Vocab(format!(
                "{} vocabulary must start with {expected:?}",
                unit_system.name()
            )));
        }
        let longest_unit = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        Ok(Self {
            unit_system,
            tokens,
            index,
            longest_unit,
        })
    }

    pub fn unit_system(&self) -> UnitSystem {
        self.unit_system
    }

    /// `|V|`, not counting the blank column.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_id(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn mask_id(&self) -> Option<u32> {
        (self.unit_system == UnitSystem::Lm).then_some(2)
    }

    pub fn num_specials(&self) -> usize {
        specials(self.unit_system).len()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.num_specials()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_valid(&self, seq: &TokenSequence) -> bool {
        seq.unit_system == self.unit_system && seq.ids.iter().all(|&i| (i as usize) < self.len())
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids = match self.unit_system {
            UnitSystem::Lm => text
                .split_whitespace()
                .map(|w| self.id(w).unwrap_or(self.unk_id()))
                .collect(),
            UnitSystem::Asr => {
                let mut ids = Vec::new();
                for w in text.split_whitespace() {
                    let chars: Vec<char> = std::iter::once(WORD_START).chain(w.chars()).collect();
                    self.segment_into(&chars, &mut ids);
                }
                ids
            }
        };
        TokenSequence::new(ids, self.unit_system)
    }

    /// Greedy longest-match segmentation of one character string.
    pub fn segment(&self, piece: &str) -> Vec<u32> {
        let chars: Vec<char> = piece.chars().collect();
        let mut ids = Vec::new();
        self.segment_into(&chars, &mut ids);
        ids
    }

    fn segment_into(&self, chars: &[char], ids: &mut Vec<u32>) {
        let mut i = 0;
        let mut buf = String::new();
        while i < chars.len() {
            let mut matched = None;
            for len in (1..=self.longest_unit.min(chars.len() - i)).rev() {
                buf.clear();
                buf.extend(&chars[i..i + len]);
                if let Some(id) = self.id(&buf) {
                    if !self.is_special(id) {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    i += len;
                }
                None => {
                    ids.push(self.unk_id());
                    i += 1;
                }
            }
        }
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        let surface = |id: u32| self.token(id).unwrap_or(UNK);
        match self.unit_system {
            UnitSystem::Lm => seq
                .ids
                .iter()
                .map(|&id| surface(id))
                .collect::<Vec<_>>()
                .join(" "),
            UnitSystem::Asr => {
                let mut s = String::new();
                for &id in &seq.ids {
                    s.push_str(surface(id));
                }
                let s = s.replace(WORD_START, " ");
                s.split_whitespace().collect::<Vec<_>>().join(" ")
            }
        }
    }

    pub fn save(&self, path: &Path, extra_header: &[(&str, String)]) -> Result<()> {
        let mut out = String::new();
        let mask = self
            .mask_id()
            .map_or_else(|| "none".to_string(), |m| m.to_string());
        write!(
            out,
            "{HEADER_TAG} unit_system={} size={} blank={} pad={} unk={} mask={mask}",
            self.unit_system.name(),
            self.len(),
            self.blank_id(),
            self.pad_id(),
            self.unk_id(),
        )
        .expect("string write");
        for (k, v) in extra_header {
            write!(out, " {k}={v}").expect("string write");
        }
        out.push('\n');
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}").expect("string write");
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `bectra build-vocab` first".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(Error::Format("missing vocabulary header".into()));
        }
        let kv: BTreeMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
        let unit_system = UnitSystem::parse(
            kv.get("unit_system")
                .ok_or_else(|| Error::Format("header lacks unit_system".into()))?,
        )?;
        let mut tokens = Vec::new();
        for (n, line) in lines.enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("line {}: expected token<TAB>id", n + 2)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad id {id:?}", n + 2)))?;
            if id != tokens.len() {
                return Err(Error::Format(format!("line {}: ids must be dense", n + 2)));
            }
            tokens.push(tok.to_string());
        }
        let vocab = Self::from_tokens(unit_system, tokens)?;
        if let Some(size) = kv.get("size") {
            if size.parse::<usize>().ok() != Some(vocab.len()) {
                return Err(Error::Format(format!(
                    "header size {size} but {} tokens",
                    vocab.len()
                )));
            }
        }
        Ok(vocab)
    }
}

/// Word-level LM vocabulary: specials followed by words in first-seen order.
pub fn build_lm_vocab(corpus: &[String]) -> Result<Vocabulary> {
    let mut tokens = specials(UnitSystem::Lm);
    let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
    for line in corpus {
        for w in line.split_whitespace() {
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
    }
    if tokens.len() == specials(UnitSystem::Lm).len() {
        return Err(Error::Vocab("LM corpus has no words".into()));
    }
    Vocabulary::from_tokens(UnitSystem::Lm, tokens)
}

/// Greedy pair-merge subword vocabulary with `target_size` units (characters
/// plus merges; specials come on top). Merges never cross word boundaries.
/// The most frequent adjacent pair wins; ties go to the lexicographically
/// smallest pair.
pub fn build_asr_vocab(corpus: &[String], target_size: usize) -> Result<Vocabulary> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            let c = counts.entry(w.to_string()).or_insert_with(|| {
                order.push(w.to_string());
                0
            });
            *c += 1;
        }
    }
    if order.is_empty() {
        return Err(Error::Vocab("ASR corpus has no words".into()));
    }
    let mut words: Vec<(Vec<String>, usize)> = order
        .iter()
        .map(|w| {
            let syms = std::iter::once(WORD_START)
                .chain(w.chars())
                .map(String::from)
                .collect();
            (syms, counts[w])
        })
        .collect();
    let charset: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    if target_size < charset.len() {
        return Err(Error::Vocab(format!(
            "target size {target_size} is below the {} distinct characters",
            charset.len()
        )));
    }
    let mut units: Vec<String> = charset.into_iter().collect();
    let mut known: BTreeSet<String> = units.iter().cloned().collect();

    while units.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, n) in &words {
            for p in syms.windows(2) {
                *pairs.entry((&p[0], &p[1])).or_default() += n;
            }
        }
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &n) in &pairs {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((pair, n));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{b}");
        for (syms, _) in &mut words {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(merged.clone()) {
            units.push(merged);
        }
    }

    let mut tokens = specials(UnitSystem::Asr);
    tokens.extend(units);
    Vocabulary::from_tokens(UnitSystem::Asr, tokens)
}

/// Re-expresses `seq` in `to`'s units via surface text.
pub fn convert_units(
    seq: &TokenSequence,
    from: &Vocabulary,
    to: &Vocabulary,
) -> Result<TokenSequence> {
    if seq.unit_system != from.unit_system() {
        return Err(Error::Vocab(format!(
            "sequence is in {} units, source vocabulary is {}",
            seq.unit_system.name(),
            from.unit_system().name()
        )));
    }
    if let Some(mask) = from.mask_id() {
        if seq.ids.contains(&mask) {
            return Err(Error::MaskedConversion);
        }
    }
    Ok(to.tokenize(&from.detokenize(seq)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    fn units(v: &Vocabulary) -> Vec<&str> {
        v.tokens()[v.num_specials()..]
            .iter()
            .map(String::as_str)
            .collect()
    }

    /// Every segmentation of `s` into vocabulary units, by exhaustive search.
    fn all_segmentations(v: &Vocabulary, s: &[char]) -> Vec<Vec<String>> {
        if s.is_empty() {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for len in 1..=s.len() {
            let head: String = s[..len].iter().collect();
            if v.id(&head).is_some_and(|id| !v.is_special(id)) {
                for mut rest in all_segmentations(v, &s[len..]) {
                    rest.insert(0, head.clone());
                    out.push(rest);
                }
            }
        }
        out
    }

    #[test]
    fn single_merge_picks_most_frequent_pair() {
        // "▁aa" twice: pairs (▁,a) and (a,a) both occur twice; (a,a) sorts first
        let v = build_asr_vocab(&corpus(&["aa aa"]), 3).unwrap();
        assert_eq!(units(&v), vec!["a", "▁", "aa"]);
    }

    #[test]
    fn charset_sized_target_gives_characters() {
        let v = build_asr_vocab(&corpus(&["abc cab"]), 4).unwrap();
        assert_eq!(units(&v), vec!["a", "b", "c", "▁"]);
        assert!(build_asr_vocab(&corpus(&["abc cab"]), 3).is_err());
        assert!(build_asr_vocab(&corpus(&[""]), 3).is_err());
    }

    #[test]
    fn greedy_longest_match_agrees_with_exhaustive_choice() {
        let v = build_asr_vocab(&corpus(&["aa aa b"]), 4).unwrap();
        assert!(v.id("aa").is_some());
        let ids = v.segment("aab");
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["aa", "b"]);
        // greedy takes the longest first unit among all valid segmentations
        let chars: Vec<char> = "aab".chars().collect();
        let segs = all_segmentations(&v, &chars);
        let longest_first = segs.iter().max_by_key(|s| s[0].chars().count()).unwrap();
        assert_eq!(longest_first, &vec!["aa".to_string(), "b".to_string()]);
    }

    #[test]
    fn lm_vocab_has_words_and_specials() {
        let v = build_lm_vocab(&corpus(&["the cat"])).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<mask>", "the", "cat"]);
        assert_eq!(v.mask_id(), Some(2));
        assert_eq!(v.blank_id(), 5);
        let seq = v.tokenize("the dog");
        assert_eq!(seq.ids, vec![3, v.unk_id()]);
        assert_eq!(v.detokenize(&seq), "the <unk>");
    }

    #[test]
    fn asr_vocab_has_no_mask() {
        let v = build_asr_vocab(&corpus(&["the cat"]), 8).unwrap();
        assert_eq!(v.mask_id(), None);
        assert!(v.id(MASK).is_none());
    }

    #[test]
    fn empty_text_round_trips() {
        let v = build_asr_vocab(&corpus(&["hello world"]), 12).unwrap();
        let s = v.tokenize("");
        assert!(s.is_empty());
        assert_eq!(v.detokenize(&s), "");
    }

    #[test]
    fn convert_units_between_systems() {
        let text = corpus(&["hello world", "hello there world"]);
        let lm = build_lm_vocab(&text).unwrap();
        let asr = build_asr_vocab(&text, 14).unwrap();
        let w = lm.tokenize("hello world");
        let a = convert_units(&w, &lm, &asr).unwrap();
        assert_eq!(a.unit_system, UnitSystem::Asr);
        assert_ne!(a.len(), w.len());
        assert_eq!(asr.detokenize(&a), "hello world");
        let back = convert_units(&a, &asr, &lm).unwrap();
        assert_eq!(back, w);
        let empty = TokenSequence::empty(UnitSystem::Lm);
        assert!(convert_units(&empty, &lm, &asr).unwrap().is_empty());
        let masked = TokenSequence::new(vec![lm.mask_id().unwrap(), 3], UnitSystem::Lm);
        assert!(matches!(
            convert_units(&masked, &lm, &asr),
            Err(Error::MaskedConversion)
        ));
    }

    #[test]
    fn file_round_trip() {
        let v = build_asr_vocab(&corpus(&["the cat sat on the mat"]), 14).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("asr.vocab");
        v.save(&p, &[("seed", "3".into())]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "#bectra-vocab unit_system=asr size=16 blank=16 pad=0 unk=1 mask=none seed=3\n"
        ));
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert!(Vocabulary::parse("#bectra-vocab unit_system=asr\n<pad>\t0\n<unk>\t2\n").is_err());
    }

    const WORDS: &[&str] = &["the", "cat", "sees", "a", "dog", "tree", "runs", "big"];

    proptest! {
        #[test]
        fn in_vocab_text_round_trips(idx in proptest::collection::vec(0..WORDS.len(), 0..8)) {
            let text: Vec<&str> = idx.iter().map(|&i| WORDS[i]).collect();
            let text = text.join(" ");
            let c = vec![WORDS.join(" ")];
            let lm = build_lm_vocab(&c).unwrap();
            let asr = build_asr_vocab(&c, 24).unwrap();
            prop_assert_eq!(lm.detokenize(&lm.tokenize(&text)), text.clone());
            prop_assert_eq!(asr.detokenize(&asr.tokenize(&text)), text.clone());
            let via = convert_units(&lm.tokenize(&text), &lm, &asr).unwrap();
            prop_assert_eq!(asr.detokenize(&via), asr.detokenize(&asr.tokenize(&text)));
        }
    }
}
