//! Wordpiece-style subword vocabulary, longest-match-first segmentation and
//! bag-of-pieces content embeddings.
//!
//! Text is lowercased and split on whitespace before segmentation. A piece
//! that continues a word carries the `##` prefix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const CONTINUATION: &str = "##";
pub const DEFAULT_VOCAB_SIZE: usize = 2048;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("target size {target} is below the {needed} specials and alphabet pieces")]
    TargetTooSmall { target: usize, needed: usize },
    #[error("vocabulary file: {0}")]
    Io(#[from] io::Error),
    #[error("vocabulary file line {line}: {detail}")]
    Format { line: usize, detail: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

fn piece(chars: &[char], start: usize) -> String {
    let body: String = chars.iter().collect();
    if start == 0 {
        body
    } else {
        format!("{CONTINUATION}{body}")
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    /// Greedy frequency-based pair merging over word-internal pieces.
    /// Ties between equally frequent pairs go to the lexicographically
    /// smallest merged piece, so the result depends only on the corpus and
    /// the target size.
    pub fn build<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self, VocabError> {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for w in words(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }

        // Words as sequences of piece strings.
        let mut segmented: Vec<(Vec<String>, u64)> = counts
            .iter()
            .map(|(w, c)| {
                let chars: Vec<char> = w.chars().collect();
                let pieces = (0..chars.len()).map(|i| piece(&chars[i..=i], i)).collect();
                (pieces, *c)
            })
            .collect();

        let alphabet: BTreeSet<String> = segmented
            .iter()
            .flat_map(|(p, _)| p.iter().cloned())
            .collect();
        let needed = SPECIALS.len() + alphabet.len();
        if target_size < needed {
            return Err(VocabError::TargetTooSmall {
                target: target_size,
                needed,
            });
        }

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet.iter().cloned());
        let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

        while tokens.len() < target_size {
            let mut pairs: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (pieces, c) in &segmented {
                for w in pieces.windows(2) {
                    *pairs.entry((w[0].clone(), w[1].clone())).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .map(|((a, b), c)| {
                    let merged = format!("{a}{}", b.trim_start_matches(CONTINUATION));
                    (c, merged, a, b)
                })
                .max_by(|x, y| x.0.cmp(&y.0).then_with(|| y.1.cmp(&x.1)));
            let Some((_, merged, a, b)) = best else { break };
            for (pieces, _) in segmented.iter_mut() {
                let mut out = Vec::with_capacity(pieces.len());
                let mut i = 0;
                while i < pieces.len() {
                    if i + 1 < pieces.len() && pieces[i] == a && pieces[i + 1] == b {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(pieces[i].clone());
                        i += 1;
                    }
                }
                *pieces = out;
            }
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Longest-match-first segmentation. A character that starts no known
    /// piece becomes `[UNK]`; adjacent unknown characters share one `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in words(text) {
            let chars: Vec<char> = w.chars().collect();
            let mut start = 0;
            let mut prev_unk = false;
            while start < chars.len() {
                let found = (start + 1..=chars.len())
                    .rev()
                    .find_map(|end| self.id(&piece(&chars[start..end], start)).map(|id| (id, end)));
                match found {
                    Some((id, end)) => {
                        out.push(id);
                        start = end;
                        prev_unk = false;
                    }
                    None => {
                        if !prev_unk {
                            out.push(UNK);
                        }
                        prev_unk = true;
                        start += 1;
                    }
                }
            }
        }
        out
    }

    /// Piece strings for ids, continuation markers kept.
    pub fn pieces(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().filter_map(|i| self.token(*i)).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads one token per line; the line number is the id.
    pub fn read_from(r: impl BufRead) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if !seen.insert(line.clone()) {
                return Err(VocabError::Format {
                    line: i + 1,
                    detail: format!("duplicate token {line:?}"),
                });
            }
            tokens.push(line);
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(|t| t.as_str()) != Some(*s) {
                return Err(VocabError::Format {
                    line: i + 1,
                    detail: format!("expected special token {s}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let f = fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }
}

/// Sum of the content-matrix rows for `tokens` as a `[1,d]` graph value.
/// The empty sequence gives the zero vector.
pub fn content_embed(g: &mut Graph, matrix: ParamId, tokens: &[u32]) -> Result<Var, TensorError> {
    content_embed_batch(g, matrix, &[tokens])
}

/// One content embedding per token sequence, stacked as `[n,d]`.
pub fn content_embed_batch(
    g: &mut Graph,
    matrix: ParamId,
    sequences: &[&[u32]],
) -> Result<Var, TensorError> {
    let table = g.param(matrix);
    // Sorted ids make the float sum independent of token order.
    let bags: Vec<Vec<usize>> = sequences
        .iter()
        .map(|s| {
            let mut b: Vec<usize> = s.iter().map(|t| *t as usize).collect();
            b.sort_unstable();
            b
        })
        .collect();
    g.embedding_bag(table, &bags)
}

/// Plain-value variant of [`content_embed`].
pub fn content_embed_value(
    store: &ParamStore,
    matrix: ParamId,
    tokens: &[u32],
) -> Result<Vec<f64>, TensorError> {
    let mut g = Graph::inference(store);
    let v = content_embed(&mut g, matrix, tokens)?;
    Ok(g.value(v).data().to_vec())
}
