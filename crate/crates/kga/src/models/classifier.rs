use crate::data::Instance;
use crate::error::{Error, Result};
use crate::gradkit::{DenseArray, Graph, NodeId, ParamSet};
use crate::models::{
    distributions_via_graph, init_matrix, DiffModel, Distribution, LabelSet, ModelSpec, OutputModel, Vocabulary,
    UNK_ID,
};
use crate::util::fnv1a;
use std::sync::Arc;

/// Mean-pooled embedding, one tanh hidden layer, softmax over labels.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    embed: usize,
    hidden: usize,
    labels: LabelSet,
    vocab: Arc<Vocabulary>,
    params: ParamSet,
    seed: u64,
}

impl ClassifierModel {
    pub fn init(embed: usize, hidden: usize, labels: LabelSet, vocab: Arc<Vocabulary>, seed: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Model("classifier needs at least one label".into()));
        }
        if embed == 0 || hidden == 0 {
            return Err(Error::Model("classifier widths must be positive".into()));
        }
        let mut params = ParamSet::new();
        let v = vocab.len();
        let k = labels.len();
        params.insert("embed", init_matrix(v, embed, embed, seed, "embed"));
        params.insert("hidden.w", init_matrix(embed, hidden, embed, seed, "hidden.w"));
        params.insert("hidden.b", DenseArray::zeros(&[1, hidden]));
        params.insert("out.w", init_matrix(hidden, k, hidden, seed, "out.w"));
        params.insert("out.b", DenseArray::zeros(&[1, k]));
        Ok(ClassifierModel { embed, hidden, labels, vocab, params, seed })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::Classifier { embed: self.embed, hidden: self.hidden, labels: self.labels.labels().to_vec() }
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Zeroes the output layer; with it zeroed the model is exactly uniform
    /// over labels regardless of input.
    pub fn zero_output_layer(&mut self) {
        let k = self.labels.len();
        self.params.insert("out.w", DenseArray::zeros(&[self.hidden, k]));
        self.params.insert("out.b", DenseArray::zeros(&[1, k]));
    }

    /// Distribution over labels for one instance. Unknown tokens fall back
    /// to the unknown id; an empty text is treated as a single unknown.
    pub fn class_distribution(&self, inst: &Instance) -> Result<Distribution> {
        let mut dists = self.distributions(inst)?;
        Ok(dists.remove(0))
    }

    fn token_ids(&self, inst: &Instance) -> Vec<usize> {
        let toks = inst.input_tokens();
        if toks.is_empty() {
            return vec![UNK_ID];
        }
        self.vocab.encode(&toks)
    }
}

impl OutputModel for ClassifierModel {
    fn support(&self) -> usize {
        self.labels.len()
    }

    fn support_fingerprint(&self) -> u64 {
        let mut buf = self.vocab.content_hash().to_le_bytes().to_vec();
        for l in self.labels.labels() {
            buf.extend_from_slice(l.as_bytes());
            buf.push(0x1f);
        }
        fnv1a(&buf)
    }

    fn distributions(&self, inst: &Instance) -> Result<Vec<Distribution>> {
        distributions_via_graph(self, inst)
    }

    fn gold_ids(&self, inst: &Instance) -> Result<Vec<usize>> {
        let label = inst
            .label()
            .ok_or_else(|| Error::Model("classifier got a non-classification instance".into()))?;
        Ok(vec![self.labels.id(label)?])
    }
}

impl DiffModel for ClassifierModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn build_prob_matrix(&self, g: &mut Graph, inst: &Instance) -> Result<NodeId> {
        let ids = self.token_ids(inst);
        let embed = g.param("embed", &[self.vocab.len(), self.embed])?;
        let w1 = g.param("hidden.w", &[self.embed, self.hidden])?;
        let b1 = g.param("hidden.b", &[1, self.hidden])?;
        let w2 = g.param("out.w", &[self.hidden, self.labels.len()])?;
        let b2 = g.param("out.b", &[1, self.labels.len()])?;

        let rows = g.row_lookup(embed, ids)?;
        let pooled = g.mean_rows(rows)?;
        let pre = g.matmul(pooled, w1)?;
        let pre_b = g.add(pre, b1)?;
        let h = g.tanh(pre_b);
        let logits = g.matmul(h, w2)?;
        let logits_b = g.add(logits, b2)?;
        g.softmax(logits_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Corpus, CorpusKind};

    fn tiny() -> ClassifierModel {
        let corpus = Corpus::new(
            CorpusKind::Classification,
            vec![
                Instance::labeled("a", "red blue", "L0"),
                Instance::labeled("b", "green red", "L1"),
                Instance::labeled("c", "blue blue", "L2"),
            ],
            "t",
        )
        .unwrap();
        let vocab = Arc::new(Vocabulary::from_corpora(&[&corpus], 1));
        ClassifierModel::init(4, 5, LabelSet::from_corpus(&corpus), vocab, 7).unwrap()
    }

    #[test]
    fn zeroed_output_layer_gives_uniform_distribution() {
        let mut m = tiny();
        m.zero_output_layer();
        let d = m.class_distribution(&Instance::labeled("x", "red green", "L0")).unwrap();
        for &p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_sums_to_one_even_for_unknown_tokens() {
        let m = tiny();
        let d = m.class_distribution(&Instance::labeled("x", "never seen tokens", "L0")).unwrap();
        let total: f64 = d.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let empty = m.class_distribution(&Instance::labeled("y", "", "L0")).unwrap();
        assert_eq!(empty.support(), 3);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = tiny();
        let b = tiny();
        for (name, arr) in a.params().iter() {
            assert_eq!(Some(arr), b.params().get(name), "mismatch in {name}");
        }
    }
}
