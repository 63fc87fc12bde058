use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::util::{atomic_write, fnv1a};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token table with reserved ids for padding, unknown, sequence start and
/// sequence end. Built once over all data a run will touch, then frozen:
/// divergences between models are only comparable on a common support.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds from token counts: tokens below `min_count` are dropped,
    /// survivors are ordered by descending count then token text, after the
    /// reserved entries. The ordering is a pure function of the counts, so
    /// the same corpora always produce the same table.
    pub fn build<'a>(tokens: impl Iterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in tokens {
            *counts.entry(tok).or_default() += 1;
        }
        let mut survivors: Vec<(&str, usize)> =
            counts.into_iter().filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(t)).collect();
        survivors.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(survivors.into_iter().map(|(t, _)| t.to_string()));
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, index }
    }

    /// Shared vocabulary over several corpora (inputs and targets both).
    pub fn from_corpora(corpora: &[&Corpus], min_count: usize) -> Self {
        let mut toks: Vec<&str> = Vec::new();
        for corpus in corpora {
            for inst in corpus.instances() {
                toks.extend(inst.input_tokens());
                toks.extend(inst.target_tokens());
            }
        }
        Vocabulary::build(toks.into_iter(), min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token id, `UNK_ID` for anything unseen.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[&str]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Stable content hash, recorded in checkpoints to tie a parameter
    /// block to the vocabulary it was trained with.
    pub fn content_hash(&self) -> u64 {
        let mut buf = Vec::new();
        for t in &self.tokens {
            buf.extend_from_slice(t.as_bytes());
            buf.push(0x1f);
        }
        fnv1a(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&VocabFile { tokens: self.tokens.clone() })?;
        atomic_write(path, json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.tokens.len() < RESERVED.len() || file.tokens[..4] != RESERVED.map(String::from) {
            return Err(Error::Data(format!("{} is not a vocabulary file", path.display())));
        }
        let index = file.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens: file.tokens, index })
    }
}

/// Ordered label set for classification; ids are positions in the sorted
/// label list.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut labels = corpus.labels();
        labels.sort();
        LabelSet { labels }
    }

    pub fn from_labels(mut labels: Vec<String>) -> Self {
        labels.sort();
        labels.dedup();
        LabelSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.labels
            .binary_search_by(|l| l.as_str().cmp(label))
            .map_err(|_| Error::Model(format!("unknown label {label:?}")))
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_stable_and_orders_by_count_then_token() {
        let toks = ["b", "a", "b", "c", "a", "b"];
        let v1 = Vocabulary::build(toks.iter().copied(), 1);
        let v2 = Vocabulary::build(toks.iter().copied(), 1);
        assert_eq!(v1, v2);
        assert_eq!(v1.token(4), "b"); // most frequent first
        assert_eq!(v1.token(5), "a"); // count tie broken by text
        assert_eq!(v1.token(6), "c");
        assert_eq!(v1.id("zzz"), UNK_ID);
    }

    #[test]
    fn min_count_filters() {
        let toks = ["a", "a", "b"];
        let v = Vocabulary::build(toks.iter().copied(), 2);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn save_load_preserves_hash() {
        let v = Vocabulary::build(["x", "y", "x"].iter().copied(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded, v);
        assert_eq!(loaded.content_hash(), v.content_hash());
    }

    #[test]
    fn label_ids_are_sorted_positions() {
        let l = LabelSet::from_labels(vec!["zeta".into(), "alpha".into(), "zeta".into()]);
        assert_eq!(l.len(), 2);
        assert_eq!(l.id("alpha").unwrap(), 0);
        assert_eq!(l.id("zeta").unwrap(), 1);
        assert!(l.id("nope").is_err());
    }
}
