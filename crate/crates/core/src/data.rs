//! Vocabulary, whitespace tokenization, TSV datasets and synthetic batches.

use std::collections::HashMap;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::model::Batch;
use crate::rng::{self, streams};
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// First id available to real tokens.
pub const FIRST_TOKEN_ID: u32 = 2;

/// Small bundled corpora with the short / medium / long length profiles,
/// plus a plain-text corpus for the n-gram prior.
pub mod bundled {
    pub const TOY_SHORT: &str = include_str!("../data/toy_short.tsv");
    pub const TOY_MEDIUM: &str = include_str!("../data/toy_medium.tsv");
    pub const TOY_LONG: &str = include_str!("../data/toy_long.tsv");
    pub const TOY_PRIOR: &str = include_str!("../data/toy_prior.txt");
}

/// Token ↔ id bijection with `<pad>` = 0 and `<unk>` = 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary holding at most `max_size` ids (reserved ones
    /// included). Tokens are ranked by frequency, ties broken
    /// lexicographically.
    pub fn build<S: AsRef<str>>(lines: &[S], max_size: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in split(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(FIRST_TOKEN_ID as usize);
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(ranked.into_iter().take(room).map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    /// Wraps an explicit id-ordered token list. The first two entries are
    /// taken as the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        if self.index.is_empty() && !self.tokens.is_empty() {
            // deserialized without the index
            return self.tokens.iter().position(|t| t == token).map(|i| i as u32);
        }
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace split, lowercase fold, unknown words to `<unk>`.
    pub fn tokenize(&self, line: &str) -> Vec<u32> {
        split(line).map(|t| self.id(&t).unwrap_or(UNK_ID)).collect()
    }

    /// Space-joined tokens with padding dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn split(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().map(str::to_lowercase)
}

pub fn build_vocab<S: AsRef<str>>(lines: &[S], max_size: usize) -> Result<Vocab> {
    Vocab::build(lines, max_size)
}

pub fn tokenize(vocab: &Vocab, line: &str) -> Vec<u32> {
    vocab.tokenize(line)
}

pub fn detokenize(vocab: &Vocab, ids: &[u32]) -> String {
    vocab.detokenize(ids)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// A recoverable problem with one input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineIssue {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub source: String,
    pub issues: Vec<LineIssue>,
}

impl Dataset {
    /// Parses `label<TAB>text` lines. Lines without a tab, with empty text
    /// or longer than `max_len` are recorded as issues and skipped; a label
    /// that is not a non-negative integer is an error.
    pub fn parse(text: &str, vocab: &Vocab, max_len: Option<usize>, source: &str) -> Result<Self> {
        let mut examples = Vec::new();
        let mut issues = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let Some((label, body)) = raw.split_once('\t') else {
                issues.push(LineIssue { line: line_no, message: "missing tab separator".into() });
                continue;
            };
            let label: usize = label.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("{source}:{line_no}: label {label:?} is not a non-negative integer"))
            })?;
            let tokens = vocab.tokenize(body);
            if tokens.is_empty() {
                issues.push(LineIssue { line: line_no, message: "empty text".into() });
                continue;
            }
            if let Some(max) = max_len.filter(|&m| tokens.len() > m) {
                issues.push(LineIssue {
                    line: line_no,
                    message: format!("{} tokens exceed max length {max}", tokens.len()),
                });
                continue;
            }
            examples.push(Example { tokens, label });
        }
        if examples.is_empty() && issues.is_empty() {
            log::warn!("{source}: no examples");
        }
        for issue in &issues {
            log::debug!("{source}:{}: {}", issue.line, issue.message);
        }
        if !issues.is_empty() {
            log::warn!("{source}: skipped {} line(s), first at line {}", issues.len(), issues[0].line);
        }
        Ok(Dataset { examples, source: source.to_string(), issues })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.examples.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    /// Batch of the examples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut seqs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = self
                .examples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("example index {i} out of range")))?;
            seqs.push(ex.tokens.clone());
            labels.push(ex.label);
        }
        Batch::new(seqs, labels)
    }
}

pub fn load_tsv(path: impl AsRef<Path>, vocab: &Vocab, max_len: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    Dataset::parse(&text, vocab, max_len, &path.display().to_string())
}

/// Reads a one-sentence-per-line corpus, skipping blank lines.
pub fn load_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Text column of `label<TAB>text` lines (or whole lines when untabbed).
pub fn tsv_texts(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_once('\t').map_or(l, |(_, t)| t).to_string())
        .collect()
}

/// Uniform random sequences over the non-reserved ids `2..vocab_size` with
/// uniform labels. With `duplicate`, example 1 repeats example 0.
pub fn synth_batch(
    vocab_size: usize,
    batch_size: usize,
    lengths: RangeInclusive<usize>,
    n_labels: usize,
    seed: u64,
    duplicate: bool,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if vocab_size <= FIRST_TOKEN_ID as usize || n_labels == 0 || lengths.is_empty() || *lengths.start() == 0 {
        return Err(Error::InvalidArgument("synth_batch needs real tokens, labels and positive lengths".into()));
    }
    let mut rng = rng::stream(seed, streams::SYNTH);
    let mut seqs: Vec<Vec<u32>> = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        if duplicate && i == 1 {
            seqs.push(seqs[0].clone());
            labels.push(labels[0]);
            continue;
        }
        let len = rng.random_range(lengths.clone());
        seqs.push((0..len).map(|_| rng.random_range(FIRST_TOKEN_ID..vocab_size as u32)).collect());
        labels.push(rng.random_range(0..n_labels));
    }
    Batch::new(seqs, labels)
}
