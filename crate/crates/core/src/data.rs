//! Corpora, vocabularies, BPTT batching and the reverse-copy task.
//!
//! Word-level text is split on whitespace with an `<eos>` token per line.
//! Character-level text is split into Unicode scalar values and byte-level
//! input into raw bytes. Vocabularies are built from the training split in
//! order of first appearance; tokens first seen in validation or test data
//! map to `<unk>`, which is added only when needed.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Word,
    Char,
    Byte,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Word => "word",
            Level::Char => "char",
            Level::Byte => "byte",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Level::Word),
            "char" => Ok(Level::Char),
            "byte" => Ok(Level::Byte),
            other => Err(Error::config("level", format!("expected word, char or byte, got `{other}`"))),
        }
    }
}

/// Splits raw input into token byte strings at the given level.
pub fn tokenize(bytes: &[u8], level: Level) -> Result<Vec<Vec<u8>>> {
    match level {
        Level::Byte => Ok(bytes.iter().map(|&b| vec![b]).collect()),
        Level::Char => {
            let text = std::str::from_utf8(bytes).map_err(|e| Error::Data(format!("input is not UTF-8: {e}")))?;
            Ok(text.chars().map(|c| c.to_string().into_bytes()).collect())
        }
        Level::Word => {
            let text = std::str::from_utf8(bytes).map_err(|e| Error::Data(format!("input is not UTF-8: {e}")))?;
            let mut out = Vec::new();
            for line in text.lines() {
                out.extend(line.split_whitespace().map(|w| w.as_bytes().to_vec()));
                out.push(EOS.as_bytes().to_vec());
            }
            Ok(out)
        }
    }
}

/// Token ↔ id bijection with ids dense in `[0, len)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    level: Level,
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, u32>,
}

impl Vocabulary {
    pub fn new(level: Level) -> Self {
        Vocabulary { level, tokens: Vec::new(), index: HashMap::new() }
    }

    /// Vocabulary of `tokens` in order of first appearance.
    pub fn build<'a>(level: Level, tokens: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut v = Vocabulary::new(level);
        for t in tokens {
            v.insert(t);
        }
        v
    }

    pub fn from_tokens(level: Level, tokens: Vec<Vec<u8>>) -> Result<Self> {
        let mut v = Vocabulary::new(level);
        for t in tokens {
            if v.index.contains_key(&t) {
                return Err(Error::Format(format!("duplicate vocabulary entry {:?}", String::from_utf8_lossy(&t))));
            }
            v.insert(&t);
        }
        Ok(v)
    }

    /// Id of `token`, adding it if new.
    pub fn insert(&mut self, token: &[u8]) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_vec());
        self.index.insert(token.to_vec(), id);
        id
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &[u8]) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn unk(&self) -> Option<u32> {
        self.id(UNK.as_bytes())
    }

    /// Ids of `tokens`; tokens outside the vocabulary become `<unk>`, which
    /// must already exist.
    pub fn encode(&self, tokens: &[Vec<u8>]) -> Result<Vec<u32>> {
        let unk = self.unk();
        tokens
            .iter()
            .map(|t| {
                self.id(t).or(unk).ok_or_else(|| {
                    Error::Data(format!("token {:?} is not in the vocabulary", String::from_utf8_lossy(t)))
                })
            })
            .collect()
    }

    /// Inverse of tokenize-then-encode: words are joined by spaces with
    /// `<eos>` ending lines; characters and bytes are concatenated.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut line_start = true;
        for &id in ids {
            let t = self.token(id).ok_or_else(|| Error::Data(format!("id {id} outside vocabulary of {}", self.len())))?;
            match self.level {
                Level::Word if t == EOS.as_bytes() => {
                    out.push(b'\n');
                    line_start = true;
                }
                Level::Word => {
                    if !line_start {
                        out.push(b' ');
                    }
                    out.extend_from_slice(t);
                    line_start = false;
                }
                _ => out.extend_from_slice(t),
            }
        }
        Ok(out)
    }
}

/// Train, validation and test id streams over one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

impl Corpus {
    /// Builds the vocabulary on `train` and encodes all three splits.
    pub fn from_tokens(level: Level, train: &[Vec<u8>], valid: &[Vec<u8>], test: &[Vec<u8>]) -> Result<Corpus> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".to_string()));
        }
        let mut vocab = Vocabulary::build(level, train.iter().map(Vec::as_slice));
        if valid.iter().chain(test).any(|t| vocab.id(t).is_none()) {
            vocab.insert(UNK.as_bytes());
        }
        Ok(Corpus {
            train: vocab.encode(train)?,
            valid: vocab.encode(valid)?,
            test: vocab.encode(test)?,
            vocab,
        })
    }
}

fn read_nonempty(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    Ok(bytes)
}

/// Loads one file as a single stream with its own vocabulary.
pub fn load_corpus(path: &Path, level: Level) -> Result<(Vec<u32>, Vocabulary)> {
    let tokens = tokenize(&read_nonempty(path)?, level)?;
    let vocab = Vocabulary::build(level, tokens.iter().map(Vec::as_slice));
    Ok((vocab.encode(&tokens)?, vocab))
}

/// Loads separate train, validation and test files.
pub fn load_split_files(train: &Path, valid: &Path, test: &Path, level: Level) -> Result<Corpus> {
    let t = tokenize(&read_nonempty(train)?, level)?;
    let v = tokenize(&read_nonempty(valid)?, level)?;
    let s = tokenize(&read_nonempty(test)?, level)?;
    Corpus::from_tokens(level, &t, &v, &s)
}

/// Sizes of the 90/5/5 split of `len` units: `⌊0.9·len⌋` for training and the
/// rest halved, with any odd unit going to test.
pub fn split_sizes(len: usize) -> (usize, usize, usize) {
    let train = len * 9 / 10;
    let valid = (len - train) / 2;
    (train, valid, len - train - valid)
}

/// Tokenizes one file and splits its tokens 90/5/5 in order. At byte level
/// the split is by bytes.
pub fn load_ninety_five(path: &Path, level: Level) -> Result<Corpus> {
    split_ninety_five(&read_nonempty(path)?, level)
}

pub fn split_ninety_five(bytes: &[u8], level: Level) -> Result<Corpus> {
    let tokens = tokenize(bytes, level)?;
    let (a, b, _) = split_sizes(tokens.len());
    Corpus::from_tokens(level, &tokens[..a], &tokens[a..a + b], &tokens[a + b..])
}

/// One BPTT window, time-major: entry `t·batch + b` belongs to row `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub steps: usize,
    pub batch: usize,
    /// Offset of the first input within each shard.
    pub start: usize,
}

/// A stream arranged as `batch` contiguous shards read in windows of `window` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStream {
    shards: Vec<Vec<u32>>,
    window: usize,
}

/// Splits `stream` into `batch` equal contiguous shards (dropping the
/// remainder) read in windows of at most `window` steps.
pub fn batchify(stream: &[u32], batch: usize, window: usize) -> Result<BatchStream> {
    if batch == 0 || window == 0 {
        return Err(Error::config("batch_size", "batch size and window must be positive"));
    }
    if stream.len() < batch * (window + 1) {
        return Err(Error::Data(format!(
            "stream of {} tokens is too short for {batch} rows of {} tokens",
            stream.len(),
            window + 1
        )));
    }
    let len = stream.len() / batch;
    let shards = stream.chunks_exact(len).take(batch).map(<[u32]>::to_vec).collect();
    Ok(BatchStream { shards, window })
}

impl BatchStream {
    pub fn batch(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_len(&self) -> usize {
        self.shards[0].len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn shard(&self, b: usize) -> &[u32] {
        &self.shards[b]
    }

    /// Number of windows in one pass.
    pub fn window_count(&self) -> usize {
        (self.shard_len() - 1).div_ceil(self.window)
    }

    /// Total number of target tokens in one pass.
    pub fn target_count(&self) -> usize {
        (self.shard_len() - 1) * self.batch()
    }

    /// The window starting at shard offset `start`, of `min(T, len − 1 − start)` steps.
    pub fn window_at(&self, start: usize) -> Option<Window> {
        let len = self.shard_len();
        if start + 1 >= len {
            return None;
        }
        let steps = self.window.min(len - 1 - start);
        let batch = self.batch();
        let mut inputs = Vec::with_capacity(steps * batch);
        let mut targets = Vec::with_capacity(steps * batch);
        for t in start..start + steps {
            for shard in &self.shards {
                inputs.push(shard[t]);
                targets.push(shard[t + 1]);
            }
        }
        Some(Window { inputs, targets, steps, batch, start })
    }

    /// All windows of one pass, in order.
    pub fn windows(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.window_count()).map(move |i| self.window_at(i * self.window).expect("in range"))
    }
}

/// A reverse-copy example: `payload` then the marker in, `payload` reversed out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyExample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

impl CopyExample {
    /// `marker` must lie outside the payload alphabet.
    pub fn new(payload: &[u32], marker: u32) -> Self {
        let mut input = payload.to_vec();
        input.push(marker);
        CopyExample { input, target: payload.iter().rev().copied().collect() }
    }

    pub fn payload(&self) -> &[u32] {
        &self.input[..self.input.len() - 1]
    }
}

/// `count` examples with payload tokens drawn uniformly from `[0, vocab_size)`;
/// the marker is `vocab_size`.
pub fn gen_reverse_copy(count: usize, vocab_size: usize, payload_len: usize, rng: &mut Rng) -> Result<Vec<CopyExample>> {
    if vocab_size == 0 {
        return Err(Error::config("vocab", "must be at least 1"));
    }
    if payload_len == 0 {
        return Err(Error::config("payload_len", "must be at least 1"));
    }
    let marker = vocab_size as u32;
    Ok((0..count)
        .map(|_| {
            let payload: Vec<u32> = (0..payload_len).map(|_| rng.below(vocab_size as u64) as u32).collect();
            CopyExample::new(&payload, marker)
        })
        .collect())
}

/// Training, validation and test copy sets drawn from separate substreams.
#[derive(Clone, Debug, PartialEq)]
pub struct CopySplits {
    pub train: Vec<CopyExample>,
    pub valid: Vec<CopyExample>,
    pub test: Vec<CopyExample>,
}

pub fn copy_splits(
    train: usize,
    eval: usize,
    vocab_size: usize,
    payload_len: usize,
    rng: &Rng,
) -> Result<CopySplits> {
    Ok(CopySplits {
        train: gen_reverse_copy(train, vocab_size, payload_len, &mut rng.substream("copy.train"))?,
        valid: gen_reverse_copy(eval, vocab_size, payload_len, &mut rng.substream("copy.valid"))?,
        test: gen_reverse_copy(eval, vocab_size, payload_len, &mut rng.substream("copy.test"))?,
    })
}

/// One line per example: input ids, `|`, target ids.
pub fn write_copy_examples(examples: &[CopyExample]) -> String {
    let join = |ids: &[u32]| ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    examples.iter().map(|e| format!("{} | {}\n", join(&e.input), join(&e.target))).collect()
}

pub fn parse_copy_examples(text: &str) -> Result<Vec<CopyExample>> {
    let ids = |s: &str, line: usize| -> Result<Vec<u32>> {
        s.split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("line {line}: bad id `{t}`"))))
            .collect()
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (a, b) = l.split_once('|').ok_or_else(|| Error::Format(format!("line {}: missing `|`", i + 1)))?;
            Ok(CopyExample { input: ids(a, i + 1)?, target: ids(b, i + 1)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_word_corpus() {
        let toks = tokenize(b"ab ab\n", Level::Word).unwrap();
        let vocab = Vocabulary::build(Level::Word, toks.iter().map(Vec::as_slice));
        assert_eq!(vocab.tokens(), &[b"ab".to_vec(), EOS.as_bytes().to_vec()]);
        assert_eq!(vocab.encode(&toks).unwrap(), vec![0, 0, 1]);
    }

    #[test]
    fn char_level_ids() {
        let toks = tokenize(b"aba", Level::Char).unwrap();
        let vocab = Vocabulary::build(Level::Char, toks.iter().map(Vec::as_slice));
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.encode(&toks).unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn split_of_a_hundred_units() {
        assert_eq!(split_sizes(100), (90, 5, 5));
        assert_eq!(split_sizes(101), (90, 5, 6));
        let c = split_ninety_five(&[7u8; 100], Level::Byte).unwrap();
        assert_eq!((c.train.len(), c.valid.len(), c.test.len()), (90, 5, 5));
    }

    #[test]
    fn unseen_evaluation_tokens_become_unk() {
        let t = tokenize(b"ab", Level::Char).unwrap();
        let v = tokenize(b"abc", Level::Char).unwrap();
        let c = Corpus::from_tokens(Level::Char, &t, &v, &t).unwrap();
        assert_eq!(c.vocab.len(), 3);
        assert_eq!(c.valid, vec![0, 1, 2]);
        let plain = Corpus::from_tokens(Level::Char, &t, &t, &t).unwrap();
        assert_eq!(plain.vocab.unk(), None);
    }

    #[test]
    fn batchify_by_hand() {
        let s: Vec<u32> = (0..10).collect();
        let b = batchify(&s, 2, 3).unwrap();
        assert_eq!(b.shard_len(), 5);
        let w = b.window_at(0).unwrap();
        assert_eq!(w.inputs, vec![0, 5, 1, 6, 2, 7]);
        assert_eq!(w.targets, vec![1, 6, 2, 7, 3, 8]);
        let last = b.window_at(3).unwrap();
        assert_eq!((last.steps, last.inputs.clone(), last.targets.clone()), (1, vec![3, 8], vec![4, 9]));
        assert_eq!(b.windows().count(), 2);
        assert!(matches!(batchify(&s, 3, 3), Err(Error::Data(_))));
    }

    #[test]
    fn copy_example_shape() {
        let e = CopyExample::new(&[5, 9, 2], 10);
        assert_eq!(e.input, vec![5, 9, 2, 10]);
        assert_eq!(e.target, vec![2, 9, 5]);
        assert_eq!(CopyExample::new(&[4], 10).target, vec![4]);
    }
}
