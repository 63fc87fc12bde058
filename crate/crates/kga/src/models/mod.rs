//! Desk-scale text models behind one contract: every model maps an instance
//! to per-position output distributions over a fixed support. A classifier
//! yields one distribution over its labels; a seq2seq model yields one
//! distribution per target position under teacher forcing (gold prefix in,
//! next-token distribution out), including the end-of-sequence position.
//!
//! The contract is what makes unlearning and evaluation architecture
//! agnostic — gap computation, divergence metrics, perplexity and the
//! attack features never look past it.

mod checkpoint;
mod classifier;
mod infer;
mod seq2seq;
mod train;
mod vocab;

pub use checkpoint::{load_model, save_model};
pub use classifier::ClassifierModel;
pub use infer::{beam_generate, beam_over, decode_root, sequence_log_prob, sequence_perplexity, DecodeCursor, Ppl};
pub use seq2seq::{DecodeContext, DecodeState, Seq2SeqFamily, Seq2SeqModel};
pub use train::{
    classification_accuracy, kl_to_target_loss, supervised_loss, train_supervised, TrainConfig, TrainRecord,
};
pub(crate) use train::accumulate_grads;
pub use vocab::{LabelSet, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::gradkit::{forward, Graph, Inputs, NodeId, ParamSet};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Teacher-forced targets longer than this are rejected; the attention
/// family also sizes its position table with it.
pub const POSITION_CAP: usize = 64;

/// Probability vector over a finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Model("empty distribution".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Model("distribution has negative or non-finite mass".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Model(format!("distribution sums to {total}, not 1")));
        }
        Ok(Distribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Distribution { probs: vec![1.0 / n as f64; n] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties resolve to the smaller index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

/// Architecture description, serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Classifier { embed: usize, hidden: usize, labels: Vec<String> },
    Recurrent { embed: usize, hidden: usize },
    SelfAttention { embed: usize, ff: usize },
}

impl ModelSpec {
    pub fn is_classifier(&self) -> bool {
        matches!(self, ModelSpec::Classifier { .. })
    }
}

/// The shared model contract: per-instance output distributions plus the
/// gold ids they are scored against. Models are immutable once trained and
/// safely shareable across concurrent evaluators.
pub trait OutputModel: Send + Sync {
    /// Size of the output support (label count or vocabulary size).
    fn support(&self) -> usize;

    /// Fingerprint of the support (labels and/or vocabulary). Two models can
    /// only be compared when their fingerprints match.
    fn support_fingerprint(&self) -> u64;

    /// One distribution per position: a single one for classifiers, one per
    /// teacher-forced target position (end token included) for seq2seq.
    fn distributions(&self, inst: &Instance) -> Result<Vec<Distribution>>;

    /// Gold indices aligned with [`OutputModel::distributions`].
    fn gold_ids(&self, inst: &Instance) -> Result<Vec<usize>>;
}

/// Models that expose a differentiable forward pass.
pub trait DiffModel: OutputModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Builds the per-position probability matrix `[positions, support]`
    /// for an instance into `graph` and returns its node.
    fn build_prob_matrix(&self, graph: &mut Graph, inst: &Instance) -> Result<NodeId>;
}

/// Shared implementation of [`OutputModel::distributions`] for models that
/// go through the graph: one forward pass, one `Distribution` per row.
pub(crate) fn distributions_via_graph<M: DiffModel>(model: &M, inst: &Instance) -> Result<Vec<Distribution>> {
    let mut graph = Graph::new();
    let probs = model.build_prob_matrix(&mut graph, inst)?;
    let inputs = Inputs::new();
    let eval = forward(&graph, model.params(), &inputs)?;
    let value = eval.value(probs);
    (0..value.rows()).map(|r| Distribution::new(value.row(r).to_vec())).collect()
}

/// A trained model of either task family.
#[derive(Clone, Debug)]
pub enum TextModel {
    Classifier(ClassifierModel),
    Seq2Seq(Seq2SeqModel),
}

impl TextModel {
    /// Fresh random initialization for an architecture.
    pub fn init(spec: &ModelSpec, vocab: Arc<Vocabulary>, seed: u64) -> Result<TextModel> {
        match spec {
            ModelSpec::Classifier { embed, hidden, labels } => Ok(TextModel::Classifier(ClassifierModel::init(
                *embed,
                *hidden,
                LabelSet::from_labels(labels.clone()),
                vocab,
                seed,
            )?)),
            ModelSpec::Recurrent { embed, hidden } => {
                Ok(TextModel::Seq2Seq(Seq2SeqModel::init(Seq2SeqFamily::Recurrent, *embed, *hidden, vocab, seed)?))
            }
            ModelSpec::SelfAttention { embed, ff } => {
                Ok(TextModel::Seq2Seq(Seq2SeqModel::init(Seq2SeqFamily::SelfAttention, *embed, *ff, vocab, seed)?))
            }
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            TextModel::Classifier(m) => m.spec(),
            TextModel::Seq2Seq(m) => m.spec(),
        }
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        match self {
            TextModel::Classifier(m) => m.vocab(),
            TextModel::Seq2Seq(m) => m.vocab(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            TextModel::Classifier(m) => m.seed(),
            TextModel::Seq2Seq(m) => m.seed(),
        }
    }

    pub fn as_seq2seq(&self) -> Result<&Seq2SeqModel> {
        match self {
            TextModel::Seq2Seq(m) => Ok(m),
            TextModel::Classifier(_) => Err(Error::Model("expected a seq2seq model".into())),
        }
    }

    pub fn as_classifier(&self) -> Result<&ClassifierModel> {
        match self {
            TextModel::Classifier(m) => Ok(m),
            TextModel::Seq2Seq(_) => Err(Error::Model("expected a classifier".into())),
        }
    }

    /// Predicted label for a classification instance.
    pub fn predict_label(&self, inst: &Instance) -> Result<String> {
        let m = self.as_classifier()?;
        let dist = m.class_distribution(inst)?;
        Ok(m.labels().label(dist.argmax()).to_string())
    }
}

impl OutputModel for TextModel {
    fn support(&self) -> usize {
        match self {
            TextModel::Classifier(m) => m.support(),
            TextModel::Seq2Seq(m) => m.support(),
        }
    }

    fn support_fingerprint(&self) -> u64 {
        match self {
            TextModel::Classifier(m) => m.support_fingerprint(),
            TextModel::Seq2Seq(m) => m.support_fingerprint(),
        }
    }

    fn distributions(&self, inst: &Instance) -> Result<Vec<Distribution>> {
        match self {
            TextModel::Classifier(m) => m.distributions(inst),
            TextModel::Seq2Seq(m) => m.distributions(inst),
        }
    }

    fn gold_ids(&self, inst: &Instance) -> Result<Vec<usize>> {
        match self {
            TextModel::Classifier(m) => m.gold_ids(inst),
            TextModel::Seq2Seq(m) => m.gold_ids(inst),
        }
    }
}

impl DiffModel for TextModel {
    fn params(&self) -> &ParamSet {
        match self {
            TextModel::Classifier(m) => m.params(),
            TextModel::Seq2Seq(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            TextModel::Classifier(m) => m.params_mut(),
            TextModel::Seq2Seq(m) => m.params_mut(),
        }
    }

    fn build_prob_matrix(&self, graph: &mut Graph, inst: &Instance) -> Result<NodeId> {
        match self {
            TextModel::Classifier(m) => m.build_prob_matrix(graph, inst),
            TextModel::Seq2Seq(m) => m.build_prob_matrix(graph, inst),
        }
    }
}

/// Uniform random init in `±sqrt(1/fan_in)`, deterministic per (seed, name).
pub(crate) fn init_matrix(rows: usize, cols: usize, fan_in: usize, seed: u64, name: &str) -> crate::gradkit::DenseArray {
    use rand::Rng;
    let mut rng = crate::util::stream_rng(seed, "param-init", crate::util::fnv1a(name.as_bytes()));
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    crate::gradkit::DenseArray::new(vec![rows, cols], data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_rejects_bad_mass() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let d = Distribution::new(vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(d.argmax(), 0);
    }

    #[test]
    fn uniform_entropy_is_log_n() {
        let d = Distribution::uniform(8);
        assert!((d.entropy() - (8f64).ln()).abs() < 1e-12);
    }
}
