//! Parallel corpora: file ingestion, synthetic tasks, subsetting, batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
pub use crate::model::{BOS, EOS, PAD, UNK};

pub const RESERVED: [&str; 4] = ["<s>", "</s>", "<pad>", "<unk>"];

pub fn tokenize(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Token ↔ id table; ids 0–3 are BOS, EOS, PAD, UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<&str>())
    }
}

impl Vocab {
    /// Reserved ids followed by `tokens` in first-seen order (duplicates and
    /// reserved names skipped).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t);
        }
        for t in tokens {
            v.push(t.as_ref());
        }
        v
    }

    /// Vocabulary of `size` ids whose content tokens are `w4`, `w5`, ...
    pub fn synthetic(size: usize) -> Self {
        Self::from_tokens((4..size).map(|i| format!("w{i}")))
    }

    /// Collects every whitespace token of `lines` in first-seen order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(lines: I) -> Self {
        Self::from_tokens(lines.into_iter().flat_map(tokenize))
    }

    fn push(&mut self, t: &str) {
        if !self.index.contains_key(t) {
            self.index.insert(t.to_string(), self.tokens.len());
            self.tokens.push(t.to_string());
        }
    }

    /// Reads a vocabulary file: one token per line, line number = id. The
    /// first four lines name the reserved ids.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: vocabulary needs at least the 4 reserved lines",
                path.display()
            )));
        }
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in lines.iter().enumerate() {
            let t = line.trim();
            if t.is_empty() || v.index.contains_key(t) {
                return Err(Error::InvalidArgument(format!(
                    "{}: line {} is empty or repeats a token",
                    path.display(),
                    i + 1
                )));
            }
            v.push(t);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        tokenize(line).into_iter().map(|t| self.id(t)).collect()
    }

    /// Joins content tokens, skipping BOS/PAD and stopping at EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&toks)
    }
}

/// One sentence pair; `tgt` starts with BOS and ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Pair {
    pub fn new(src: Vec<usize>, target_content: &[usize]) -> Self {
        let mut tgt = Vec::with_capacity(target_content.len() + 2);
        tgt.push(BOS);
        tgt.extend_from_slice(target_content);
        tgt.push(EOS);
        Self { src, tgt }
    }

    /// Target tokens without BOS/EOS.
    pub fn target_content(&self) -> &[usize] {
        &self.tgt[1..self.tgt.len() - 1]
    }

    /// Batching length: the wider of the source and the decoder input.
    pub fn length(&self) -> usize {
        self.src.len().max(self.tgt.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<Pair>,
    pub provenance: String,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)?;
    let mut lines = Vec::new();
    let mut parts: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if parts.last().is_some_and(|l| l.is_empty()) {
        parts.pop();
    }
    for (i, raw) in parts.into_iter().enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| Error::Encoding {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        lines.push(line.to_string());
    }
    Ok(lines)
}

/// Loads line-aligned UTF-8 files; unknown tokens map to UNK and targets
/// get BOS/EOS.
pub fn load_parallel(src_path: &Path, tgt_path: &Path, vocab: &Vocab) -> Result<ParallelCorpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment {
            src_path: src_path.to_path_buf(),
            tgt_path: tgt_path.to_path_buf(),
            src_lines: src.len(),
            tgt_lines: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let (s_ids, t_ids) = (vocab.encode(s), vocab.encode(t));
        if s_ids.is_empty() {
            return Err(Error::EmptyLine {
                path: src_path.to_path_buf(),
                line: i + 1,
            });
        }
        if t_ids.is_empty() {
            return Err(Error::EmptyLine {
                path: tgt_path.to_path_buf(),
                line: i + 1,
            });
        }
        pairs.push(Pair::new(s_ids, &t_ids));
    }
    Ok(ParallelCorpus {
        pairs,
        provenance: format!("{} | {}", src_path.display(), tgt_path.display()),
    })
}

/// Reads `lang_pair,distance` rows (an optional header is skipped).
pub fn load_distances(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Csv(format!("{}: line {} is not lang_pair,distance", path.display(), i + 1));
        let (name, value) = line.split_once(',').ok_or_else(bad)?;
        match value.trim().parse::<f64>() {
            Ok(d) if d.is_finite() => out.push((name.trim().to_string(), d)),
            _ if i == 0 => continue,
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    LexicalTranslation,
}

/// A synthetic "language pair": a seeded lexicon plus reordering noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: Task,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of source words whose translation is a target-only symbol.
    pub substitution_rate: f64,
    /// Probability of swapping a position with its right neighbour.
    pub reorder_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            vocab_size: 64,
            min_len: 3,
            max_len: 10,
            substitution_rate: 0.0,
            reorder_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

/// Fixed size of synthetic dev and test splits.
pub const HELD_OUT_PAIRS: usize = 1000;

/// Source-to-target word map over content ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    map: HashMap<usize, usize>,
    source_words: Vec<usize>,
}

impl Lexicon {
    pub fn from_map(map: HashMap<usize, usize>) -> Self {
        let mut source_words: Vec<usize> = map.keys().copied().collect();
        source_words.sort_unstable();
        Self { map, source_words }
    }

    pub fn translate(&self, word: usize) -> usize {
        self.map.get(&word).copied().unwrap_or(word)
    }

    pub fn apply(&self, sentence: &[usize]) -> Vec<usize> {
        sentence.iter().map(|&w| self.translate(w)).collect()
    }

    pub fn source_words(&self) -> &[usize] {
        &self.source_words
    }
}

impl SyntheticTaskSpec {
    /// `(s + r) / 2`
    pub fn distance(&self) -> f64 {
        (self.substitution_rate + self.reorder_rate) / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::InvalidArgument(format!(
                "synthetic vocab_size {} is below 8 (ids 0-3 are reserved)",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "sentence length range {}..={} is invalid",
                self.min_len, self.max_len
            )));
        }
        for (name, rate) in [("substitution_rate", self.substitution_rate), ("reorder_rate", self.reorder_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidArgument(format!("{name} {rate} not in [0,1]")));
            }
        }
        if self.task == Task::Copy && (self.substitution_rate != 0.0 || self.reorder_rate != 0.0) {
            return Err(Error::InvalidArgument(
                "the copy task requires substitution_rate = reorder_rate = 0".into(),
            ));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Content ids split into the source lexicon (first half) and
    /// target-only symbols (second half).
    pub fn source_lexicon(&self) -> std::ops::Range<usize> {
        let content = self.vocab_size - 4;
        4..4 + content / 2
    }

    /// The seeded bijection: a fraction `s` of source words map to distinct
    /// target-only symbols, the rest to themselves.
    pub fn lexicon(&self) -> Result<Lexicon> {
        self.validate()?;
        let mut rng = self.rng(0);
        let src = self.source_lexicon();
        let mut words: Vec<usize> = src.clone().collect();
        words.shuffle(&mut rng);
        let mut targets: Vec<usize> = (src.end..self.vocab_size).collect();
        targets.shuffle(&mut rng);
        let substituted = (self.substitution_rate * words.len() as f64).round() as usize;
        let mut map = HashMap::new();
        for (i, &w) in words.iter().enumerate() {
            map.insert(w, if i < substituted { targets[i] } else { w });
        }
        Ok(Lexicon::from_map(map))
    }

    /// Non-overlapping adjacent swaps, each with probability `r`.
    fn reorder(&self, sentence: &mut [usize], rng: &mut ChaCha8Rng) {
        if self.reorder_rate == 0.0 {
            return;
        }
        let mut i = 0;
        while i + 1 < sentence.len() {
            if rng.gen::<f64>() < self.reorder_rate {
                sentence.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
    }

    pub fn generate_split(&self, split: Split, n: usize) -> Result<ParallelCorpus> {
        if n == 0 {
            return Err(Error::EmptyDataset("requested 0 synthetic pairs".into()));
        }
        let lexicon = self.lexicon()?;
        let words = lexicon.source_words().to_vec();
        let mut rng = self.rng(split.stream());
        let pairs = (0..n)
            .map(|_| {
                let len = rng.gen_range(self.min_len as u64..=self.max_len as u64) as usize;
                let src: Vec<usize> = (0..len)
                    .map(|_| words[rng.gen_range(0..words.len() as u64) as usize])
                    .collect();
                let mut tgt = lexicon.apply(&src);
                if self.task == Task::Reverse {
                    tgt.reverse();
                }
                self.reorder(&mut tgt, &mut rng);
                Pair::new(src, &tgt)
            })
            .collect();
        Ok(ParallelCorpus {
            pairs,
            provenance: format!("synthetic {} {split:?} n={n}", self.describe()),
        })
    }

    pub fn describe(&self) -> String {
        let task = match self.task {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::LexicalTranslation => "lexical-translation",
        };
        let mut s = String::new();
        let _ = write!(
            s,
            "{task} V={} len={}..{} s={} r={} seed={}",
            self.vocab_size, self.min_len, self.max_len, self.substitution_rate, self.reorder_rate, self.seed
        );
        s
    }
}

/// The training split of `spec`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, n: usize) -> Result<ParallelCorpus> {
    spec.generate_split(Split::Train, n)
}

/// Indices of a seeded uniform sample without replacement. For a fixed seed
/// the samples of increasing size are nested prefixes of one permutation.
pub fn subset_indices(len: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 || size > len {
        return Err(Error::SubsetSize {
            requested: size,
            available: len,
        });
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(size);
    Ok(idx)
}

pub fn subset(corpus: &ParallelCorpus, size: usize, seed: u64) -> Result<ParallelCorpus> {
    let idx = subset_indices(corpus.len(), size, seed)?;
    Ok(ParallelCorpus {
        pairs: idx.iter().map(|&i| corpus.pairs[i].clone()).collect(),
        provenance: format!("{} subset={size} seed={seed}", corpus.provenance),
    })
}

/// Groups pair indices so that `rows · max length ≤ max_tokens` per batch.
/// Pairs are shuffled, sorted by length (stable), packed greedily, and the
/// batch order is shuffled again.
pub fn plan_batches(pairs: &[Pair], max_tokens: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no pairs to batch".into()));
    }
    if let Some((index, p)) = pairs.iter().enumerate().find(|(_, p)| p.length() > max_tokens) {
        return Err(Error::SentenceTooLong {
            index,
            len: p.length(),
            max_tokens,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| pairs[i].length());
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = width.max(pairs[i].length());
        if !current.is_empty() && w * (current.len() + 1) > max_tokens {
            batches.push(std::mem::take(&mut current));
            width = pairs[i].length();
        } else {
            width = w;
        }
        current.push(i);
    }
    batches.push(current);
    batches.shuffle(&mut rng);
    Ok(batches)
}

pub fn make_batch(pairs: &[Pair], indices: &[usize]) -> Result<Batch> {
    Batch::from_pairs(indices.iter().map(|&i| (pairs[i].src.as_slice(), pairs[i].tgt.as_slice())))
}

pub fn batch_by_tokens(corpus: &ParallelCorpus, max_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    plan_batches(&corpus.pairs, max_tokens, seed)?
        .iter()
        .map(|idx| make_batch(&corpus.pairs, idx))
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn write(dir: &Path, name: &str, body: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn load_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s.txt", b"a b\nc\nd e f\n");
        let t = write(dir.path(), "t.txt", b"x\ny z\nq\n");
        let vocab = Vocab::from_tokens(["a", "b", "c", "x", "y"]);
        let corpus = load_parallel(&s, &t, &vocab).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.pairs[0].src, vec![4, 5]);
        assert_eq!(corpus.pairs[0].tgt, vec![BOS, 7, EOS]);
        // d, e, f, z, q are unknown
        assert_eq!(corpus.pairs[2].src, vec![UNK, UNK, UNK]);
        assert_eq!(corpus.pairs[1].tgt, vec![BOS, 8, UNK, EOS]);
    }

    #[test]
    fn unequal_files_are_misaligned() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s.txt", b"a\nb\nc\n");
        let t = write(dir.path(), "t.txt", b"a\nb\nc\nd\n");
        let err = load_parallel(&s, &t, &Vocab::default()).unwrap_err();
        match err {
            Error::Alignment { src_lines, tgt_lines, .. } => assert_eq!((src_lines, tgt_lines), (3, 4)),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn undecodable_bytes_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s.txt", b"a\n\xff\xfe\n");
        let t = write(dir.path(), "t.txt", b"a\nb\n");
        let err = load_parallel(&s, &t, &Vocab::default()).unwrap_err();
        assert!(matches!(err, Error::Encoding { line: 2, .. }), "{err}");
        let e = write(dir.path(), "e.txt", b"a\n  \n");
        assert!(matches!(load_parallel(&t, &e, &Vocab::default()), Err(Error::EmptyLine { line: 2, .. })));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::build(["the cat", "a cat sat"]);
        assert_eq!(v.len(), 8);
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        assert_eq!(v.id("dog"), UNK);
        assert_eq!(v.decode(&[BOS, v.id("a"), v.id("cat"), EOS, v.id("sat")]), "a cat");
    }

    #[test]
    fn detokenize_inverts_tokenize() {
        let v = Vocab::build(["x y z"]);
        for line in ["x  y\tz", " z x ", "y"] {
            let normalized = detokenize(&tokenize(line));
            assert_eq!(v.decode(&v.encode(line)), normalized);
        }
    }

    #[test]
    fn copy_targets_equal_sources() {
        let spec = SyntheticTaskSpec::default();
        let c = generate_synthetic(&spec, 200).unwrap();
        for p in &c.pairs {
            assert_eq!(p.target_content(), p.src.as_slice());
            assert!(p.src.iter().all(|w| spec.source_lexicon().contains(w)));
        }
    }

    #[test]
    fn hand_bijection() {
        let (a, b, x, y) = (4, 5, 40, 41);
        let lex = Lexicon::from_map(HashMap::from([(a, x), (b, y)]));
        assert_eq!(lex.apply(&[a, b, a]), vec![x, y, x]);
    }

    #[test]
    fn full_substitution_is_a_bijection_onto_target_symbols() {
        let spec = SyntheticTaskSpec {
            task: Task::LexicalTranslation,
            substitution_rate: 1.0,
            vocab_size: 20,
            ..SyntheticTaskSpec::default()
        };
        let lex = spec.lexicon().unwrap();
        let images: HashSet<usize> = lex.source_words().iter().map(|&w| lex.translate(w)).collect();
        assert_eq!(images.len(), lex.source_words().len());
        assert!(images.iter().all(|t| !spec.source_lexicon().contains(t)));
        let c = generate_synthetic(&spec, 50).unwrap();
        for p in &c.pairs {
            assert_eq!(p.target_content(), lex.apply(&p.src).as_slice());
        }
    }

    #[test]
    fn distance_definition() {
        let spec = SyntheticTaskSpec {
            substitution_rate: 0.4,
            reorder_rate: 0.2,
            ..SyntheticTaskSpec::default()
        };
        assert!((spec.distance() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn synthetic_validation() {
        let small = SyntheticTaskSpec {
            vocab_size: 7,
            ..SyntheticTaskSpec::default()
        };
        assert!(generate_synthetic(&small, 5).is_err());
        let noisy_copy = SyntheticTaskSpec {
            reorder_rate: 0.1,
            ..SyntheticTaskSpec::default()
        };
        assert!(generate_synthetic(&noisy_copy, 5).is_err());
        assert!(generate_synthetic(&SyntheticTaskSpec::default(), 0).is_err());
    }

    #[test]
    fn splits_use_disjoint_streams() {
        let spec = SyntheticTaskSpec {
            task: Task::Reverse,
            ..SyntheticTaskSpec::default()
        };
        let train = spec.generate_split(Split::Train, 50).unwrap();
        let dev = spec.generate_split(Split::Dev, 50).unwrap();
        assert_ne!(train.pairs, dev.pairs);
        assert_eq!(train.pairs, generate_synthetic(&spec, 50).unwrap().pairs);
        for p in &train.pairs {
            let mut r = p.src.clone();
            r.reverse();
            assert_eq!(p.target_content(), r.as_slice());
        }
    }

    #[test]
    fn subset_contracts() {
        let c = generate_synthetic(&SyntheticTaskSpec::default(), 300).unwrap();
        let all = subset(&c, 300, 4).unwrap();
        let mut a: Vec<_> = all.pairs.clone();
        let mut b: Vec<_> = c.pairs.clone();
        a.sort_by(|x, y| x.src.cmp(&y.src).then(x.tgt.cmp(&y.tgt)));
        b.sort_by(|x, y| x.src.cmp(&y.src).then(x.tgt.cmp(&y.tgt)));
        assert_eq!(a, b);
        let small = subset_indices(300, 20, 9).unwrap();
        let large = subset_indices(300, 80, 9).unwrap();
        assert_eq!(&large[..20], small.as_slice());
        assert!(matches!(subset(&c, 0, 1), Err(Error::SubsetSize { .. })));
        assert!(matches!(subset(&c, 301, 1), Err(Error::SubsetSize { .. })));
    }

    fn fixed_length_pairs(n: usize, len: usize) -> Vec<Pair> {
        (0..n).map(|i| Pair::new(vec![4 + i % 3; len], &vec![5; len - 1])).collect()
    }

    #[test]
    fn equal_lengths_pack_evenly() {
        let pairs = fixed_length_pairs(20, 10);
        let plan = plan_batches(&pairs, 40, 0).unwrap();
        assert_eq!(plan.len(), 5);
        assert!(plan.iter().all(|b| b.len() == 4));
    }

    #[test]
    fn overlong_sentence_is_named() {
        let mut pairs = fixed_length_pairs(5, 4);
        pairs[3] = Pair::new(vec![4; 12], &[5]);
        assert!(matches!(
            plan_batches(&pairs, 10, 0),
            Err(Error::SentenceTooLong { index: 3, len: 12, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn batches_partition_the_corpus(n in 1usize..120, max_tokens in 12usize..200, seed in any::<u64>()) {
            let spec = SyntheticTaskSpec { seed, ..SyntheticTaskSpec::default() };
            let corpus = generate_synthetic(&spec, n).unwrap();
            let plan = plan_batches(&corpus.pairs, max_tokens, seed).unwrap();
            let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for b in &plan {
                let width = b.iter().map(|&i| corpus.pairs[i].length()).max().unwrap();
                prop_assert!(width * b.len() <= max_tokens);
            }
            prop_assert_eq!(&plan, &plan_batches(&corpus.pairs, max_tokens, seed).unwrap());
            let batches = batch_by_tokens(&corpus, max_tokens, seed).unwrap();
            let rows: usize = batches.iter().map(|b| b.rows).sum();
            prop_assert_eq!(rows, n);
        }

        #[test]
        fn lexical_translation_without_reordering_keeps_length(s in 0.0f64..=1.0, seed in any::<u64>()) {
            let spec = SyntheticTaskSpec {
                task: Task::LexicalTranslation,
                substitution_rate: s,
                seed,
                ..SyntheticTaskSpec::default()
            };
            let c = generate_synthetic(&spec, 40).unwrap();
            for p in &c.pairs {
                prop_assert_eq!(p.target_content().len(), p.src.len());
            }
            prop_assert_eq!(c.pairs, generate_synthetic(&spec, 40).unwrap().pairs);
        }
    }
}
