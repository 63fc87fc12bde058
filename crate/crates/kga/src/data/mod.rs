//! Corpus ingestion, synthetic corpus generation, and the forget/retain
//! split machinery.
//!
//! A split is the quadruple (D, D_f, D_n, D_r): full training data, the
//! subset to forget, extra never-trained data with a similar distribution,
//! and the retained remainder. Disjointness is enforced by id on every
//! construction path.

mod jsonl;
mod partition;
mod synth;

pub use jsonl::{load_corpus, save_corpus};
pub use partition::{partition, ForgetSpec, SplitManifest};
pub use synth::{synth_classification, synth_translation, translation_rule, SynthClassCfg, SynthTransCfg};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// What a corpus holds: labeled texts or source–target pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Classification,
    Seq2Seq,
}

/// One example: either (text, label) or (source, target). Token boundaries
/// are whitespace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Labeled { text: String, label: String },
    Pair { source: String, target: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    #[serde(flatten)]
    pub payload: Payload,
}

impl Instance {
    pub fn labeled(id: impl Into<String>, text: impl Into<String>, label: impl Into<String>) -> Self {
        Instance { id: id.into(), payload: Payload::Labeled { text: text.into(), label: label.into() } }
    }

    pub fn pair(id: impl Into<String>, source: impl Into<String>, target: impl Into<String>) -> Self {
        Instance { id: id.into(), payload: Payload::Pair { source: source.into(), target: target.into() } }
    }

    /// Tokens of the classification text, or of the pair source.
    pub fn input_tokens(&self) -> Vec<&str> {
        match &self.payload {
            Payload::Labeled { text, .. } => text.split_whitespace().collect(),
            Payload::Pair { source, .. } => source.split_whitespace().collect(),
        }
    }

    /// Tokens of the pair target; empty for labeled instances.
    pub fn target_tokens(&self) -> Vec<&str> {
        match &self.payload {
            Payload::Pair { target, .. } => target.split_whitespace().collect(),
            Payload::Labeled { .. } => Vec::new(),
        }
    }

    pub fn label(&self) -> Option<&str> {
        match &self.payload {
            Payload::Labeled { label, .. } => Some(label),
            Payload::Pair { .. } => None,
        }
    }
}

/// An ordered, id-indexed collection of instances of one payload kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    kind: CorpusKind,
    instances: Vec<Instance>,
    provenance: String,
}

impl Corpus {
    pub fn new(kind: CorpusKind, instances: Vec<Instance>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::Data(format!("duplicate instance id {:?}", inst.id)));
            }
            let ok = match (&inst.payload, kind) {
                (Payload::Labeled { .. }, CorpusKind::Classification) => true,
                (Payload::Pair { .. }, CorpusKind::Seq2Seq) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Data(format!("instance {:?} does not match corpus kind {kind:?}", inst.id)));
            }
        }
        drop(seen);
        Ok(Corpus { kind, instances, provenance: provenance.into() })
    }

    pub fn kind(&self) -> CorpusKind {
        self.kind
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn get(&self, idx: usize) -> &Instance {
        &self.instances[idx]
    }

    pub fn by_id(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.instances.iter().map(|i| i.id.as_str())
    }

    pub fn id_set(&self) -> HashSet<&str> {
        self.ids().collect()
    }

    /// Distinct labels in first-seen order (classification corpora).
    pub fn labels(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for inst in &self.instances {
            if let Some(l) = inst.label() {
                if seen.insert(l.to_string()) {
                    out.push(l.to_string());
                }
            }
        }
        out
    }

    /// Sub-corpus of the given ids, preserving this corpus's order.
    pub fn subset(&self, ids: &HashSet<&str>, provenance: impl Into<String>) -> Result<Corpus> {
        let instances: Vec<Instance> =
            self.instances.iter().filter(|i| ids.contains(i.id.as_str())).cloned().collect();
        Corpus::new(self.kind, instances, provenance)
    }

    /// Sub-corpus of everything except the given ids, preserving order.
    pub fn without(&self, ids: &HashSet<&str>, provenance: impl Into<String>) -> Result<Corpus> {
        let instances: Vec<Instance> =
            self.instances.iter().filter(|i| !ids.contains(i.id.as_str())).cloned().collect();
        Corpus::new(self.kind, instances, provenance)
    }
}

/// The split quadruple with disjointness guarantees: `forget ⊂ full`,
/// `extra ∩ full = ∅`, `retain = full \ forget`.
#[derive(Clone, Debug)]
pub struct SplitSet {
    pub full: Corpus,
    pub forget: Corpus,
    pub extra: Corpus,
    pub retain: Corpus,
}

impl SplitSet {
    pub fn new(full: Corpus, forget_ids: &HashSet<&str>, extra: Corpus) -> Result<Self> {
        let full_ids = full.id_set();
        if let Some(missing) = forget_ids.iter().find(|id| !full_ids.contains(*id)) {
            return Err(Error::Data(format!("forget id {missing:?} not present in the corpus")));
        }
        if forget_ids.len() >= full.len() {
            return Err(Error::Data("forget selection must be a strict subset of the corpus".into()));
        }
        if let Some(overlap) = extra.ids().find(|id| full_ids.contains(id)) {
            return Err(Error::Data(format!("extra set overlaps the corpus at id {overlap:?}")));
        }
        let forget = full.subset(forget_ids, "forget")?;
        let retain = full.without(forget_ids, "retain")?;
        Ok(SplitSet { full, forget, extra, retain })
    }

    /// Id-set algebra behind the struct invariants, re-checkable at any time.
    pub fn check_invariants(&self) -> Result<()> {
        let full: HashSet<&str> = self.full.id_set();
        let forget: HashSet<&str> = self.forget.id_set();
        let extra: HashSet<&str> = self.extra.id_set();
        let retain: HashSet<&str> = self.retain.id_set();
        if !forget.is_subset(&full) || forget.len() >= full.len() {
            return Err(Error::Data("forget set is not a strict subset of the corpus".into()));
        }
        if !extra.is_disjoint(&full) {
            return Err(Error::Data("extra set overlaps the corpus".into()));
        }
        if !retain.is_disjoint(&forget) {
            return Err(Error::Data("retain and forget sets overlap".into()));
        }
        let union: HashSet<&str> = retain.union(&forget).cloned().collect();
        if union != full {
            return Err(Error::Data("retain ∪ forget does not equal the corpus".into()));
        }
        Ok(())
    }
}

/// Per-instance score lookup used by score-band forget selection.
pub type ScoreMap = HashMap<String, f64>;

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_corpus(n: usize) -> Corpus {
        let instances = (0..n).map(|i| Instance::labeled(format!("i{i}"), format!("w{} w{}", i % 3, i % 5), format!("L{}", i % 2))).collect();
        Corpus::new(CorpusKind::Classification, instances, "test").unwrap()
    }

    #[test]
    fn duplicate_ids_rejected() {
        let instances = vec![Instance::labeled("a", "x", "L0"), Instance::labeled("a", "y", "L1")];
        assert!(Corpus::new(CorpusKind::Classification, instances, "test").is_err());
    }

    #[test]
    fn mixed_payload_rejected() {
        let instances = vec![Instance::labeled("a", "x", "L0"), Instance::pair("b", "x", "y")];
        assert!(Corpus::new(CorpusKind::Classification, instances, "test").is_err());
    }

    #[test]
    fn splitset_invariants_hold() {
        let full = toy_corpus(10);
        let extra = Corpus::new(
            CorpusKind::Classification,
            (0..3).map(|i| Instance::labeled(format!("x{i}"), "w0", "L0")).collect(),
            "extra",
        )
        .unwrap();
        let forget: HashSet<&str> = ["i1", "i4"].into_iter().collect();
        let split = SplitSet::new(full, &forget, extra).unwrap();
        split.check_invariants().unwrap();
        assert_eq!(split.forget.len(), 2);
        assert_eq!(split.retain.len(), 8);
    }

    #[test]
    fn splitset_rejects_overlapping_extra() {
        let full = toy_corpus(4);
        let extra = Corpus::new(
            CorpusKind::Classification,
            vec![Instance::labeled("i2", "w0", "L0")],
            "extra",
        )
        .unwrap();
        let forget: HashSet<&str> = ["i0"].into_iter().collect();
        assert!(SplitSet::new(full, &forget, extra).is_err());
    }

    #[test]
    fn splitset_rejects_forgetting_everything() {
        let full = toy_corpus(3);
        let extra = Corpus::new(CorpusKind::Classification, vec![Instance::labeled("x0", "w", "L0")], "e").unwrap();
        let forget: HashSet<&str> = ["i0", "i1", "i2"].into_iter().collect();
        assert!(SplitSet::new(full, &forget, extra).is_err());
    }
}
