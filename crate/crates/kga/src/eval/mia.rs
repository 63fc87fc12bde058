use crate::data::{Corpus, Instance};
use crate::error::{Error, Result};
use crate::gradkit::{adam_step, backward, forward, AdamConfig, AdamState, DenseArray, GradMap, Graph, Inputs, Schedule};
use crate::models::{train_supervised, ModelSpec, OutputModel, TextModel, TrainConfig, Vocabulary};
use crate::models::accumulate_grads;
use crate::util::{derive_seed, stream_rng};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Black-box attack configuration. The attacker sees output distributions
/// only: a shadow model is trained on a fraction of the original training
/// set, an attack classifier learns member/non-member from the shadow's
/// output features, and is then pointed at the target model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaConfig {
    pub shadow_fraction: f64,
    pub shadow_train: TrainConfig,
    pub attack_hidden: usize,
    pub attack_steps: usize,
    pub attack_rate: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for MiaConfig {
    fn default() -> Self {
        MiaConfig {
            shadow_fraction: 0.3,
            shadow_train: TrainConfig::default(),
            attack_hidden: 16,
            attack_steps: 400,
            attack_rate: 5e-3,
            top_k: 5,
            seed: 0,
        }
    }
}

/// Attack results over the evaluation corpora: F1 of the member class and
/// the false-negative rate (missed members).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MiaOutcome {
    pub f1: f64,
    pub fnr: f64,
}

/// Feature vectors with membership labels (1 member, 0 non-member).
#[derive(Clone, Debug)]
pub struct AttackDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Floor on gold log-probabilities so collapsed instances cannot dominate
/// feature standardization: the attack signal lives near zero, and a raw
/// log tail would swamp the standardized scale.
const GOLD_LOGP_FLOOR: f64 = -8.0;

/// Black-box features of one instance under a model: the sorted top-k
/// output probabilities (zero-padded), output entropy, and the gold
/// log-probability, each averaged over positions.
pub fn extract_features(model: &dyn OutputModel, inst: &Instance, top_k: usize) -> Result<Vec<f64>> {
    let dists = model.distributions(inst)?;
    let golds = model.gold_ids(inst)?;
    let mut feats = vec![0.0; top_k + 2];
    for (d, &gold) in dists.iter().zip(&golds) {
        let mut probs = d.probs().to_vec();
        probs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        for k in 0..top_k {
            feats[k] += probs.get(k).copied().unwrap_or(0.0);
        }
        feats[top_k] += d.entropy();
        feats[top_k + 1] += d.probs()[gold].max(1e-300).ln().max(GOLD_LOGP_FLOOR);
    }
    let n = dists.len() as f64;
    for f in feats.iter_mut() {
        *f /= n;
    }
    Ok(feats)
}

/// Features + labels for a member/non-member corpus pair, balanced by
/// seeded subsampling of the larger side.
pub fn build_attack_dataset(
    model: &dyn OutputModel,
    members: &Corpus,
    nonmembers: &Corpus,
    top_k: usize,
    seed: u64,
) -> Result<AttackDataset> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Metric("attack data must contain both classes".into()));
    }
    let take = members.len().min(nonmembers.len());
    let mut rng = stream_rng(seed, "attack-balance", 0);
    let pick = |corpus: &Corpus, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..corpus.len()).collect();
        idx.shuffle(rng);
        idx.truncate(take);
        idx.sort_unstable();
        idx
    };
    let member_idx = pick(members, &mut rng);
    let nonmember_idx = pick(nonmembers, &mut rng);

    let mut features = Vec::with_capacity(2 * take);
    let mut labels = Vec::with_capacity(2 * take);
    for &i in &member_idx {
        features.push(extract_features(model, members.get(i), top_k)?);
        labels.push(1);
    }
    for &i in &nonmember_idx {
        features.push(extract_features(model, nonmembers.get(i), top_k)?);
        labels.push(0);
    }
    Ok(AttackDataset { features, labels })
}

/// Per-dimension standardization statistics fitted on attack-training data.
#[derive(Clone, Debug)]
struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(features: &[Vec<f64>]) -> Standardizer {
        let dim = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for f in features {
            for ((s, &v), &m) in std.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt().max(1e-9);
        }
        Standardizer { mean, std }
    }

    fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.std).map(|((&v, &m), &s)| (v - m) / s).collect()
    }
}

/// Small softmax classifier over standardized feature vectors.
#[derive(Clone, Debug)]
pub struct AttackClassifier {
    params: crate::gradkit::ParamSet,
    standardizer: Standardizer,
    dim: usize,
    hidden: usize,
}

impl AttackClassifier {
    fn loss_graph(&self, g: &mut Graph, x: &[f64], label: usize) -> Result<crate::gradkit::NodeId> {
        let probs = self.prob_graph(g, x)?;
        let mut onehot = vec![0.0; 2];
        onehot[label] = 1.0;
        let mask = g.constant(DenseArray::matrix(1, 2, onehot)?);
        let lp = g.log(probs);
        let picked = g.mul(lp, mask)?;
        let s = g.sum(picked);
        Ok(g.scale(s, -1.0))
    }

    fn prob_graph(&self, g: &mut Graph, x: &[f64]) -> Result<crate::gradkit::NodeId> {
        let input = g.constant(DenseArray::matrix(1, self.dim, x.to_vec())?);
        let w1 = g.param("w1", &[self.dim, self.hidden])?;
        let b1 = g.param("b1", &[1, self.hidden])?;
        let w2 = g.param("w2", &[self.hidden, 2])?;
        let b2 = g.param("b2", &[1, 2])?;
        let h = g.matmul(input, w1)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h);
        let logits = g.matmul(h, w2)?;
        let logits = g.add(logits, b2)?;
        g.softmax(logits)
    }

    /// Probability that the instance behind the (raw, unstandardized)
    /// feature vector is a member.
    pub fn member_probability(&self, raw: &[f64]) -> Result<f64> {
        let x = self.standardizer.apply(raw);
        let mut g = Graph::new();
        let probs = self.prob_graph(&mut g, &x)?;
        let inputs = Inputs::new();
        let eval = forward(&g, &self.params, &inputs)?;
        Ok(eval.value(probs).data()[1])
    }

    pub fn predict_member(&self, raw: &[f64]) -> Result<bool> {
        Ok(self.member_probability(raw)? > 0.5)
    }
}

/// Trains the attack classifier on an attack dataset. Rejects single-class
/// data.
pub fn train_attack_classifier(data: &AttackDataset, cfg: &MiaConfig) -> Result<AttackClassifier> {
    if data.features.is_empty() {
        return Err(Error::Metric("empty attack dataset".into()));
    }
    let classes: std::collections::HashSet<usize> = data.labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Metric("attack data has a single class; the attack is undefined".into()));
    }
    let dim = data.features[0].len();
    let standardizer = Standardizer::fit(&data.features);
    let standardized: Vec<Vec<f64>> = data.features.iter().map(|f| standardizer.apply(f)).collect();

    let mut params = crate::gradkit::ParamSet::new();
    params.insert("w1", crate::models::init_matrix(dim, cfg.attack_hidden, dim, cfg.seed, "attack.w1"));
    params.insert("b1", DenseArray::zeros(&[1, cfg.attack_hidden]));
    params.insert("w2", crate::models::init_matrix(cfg.attack_hidden, 2, cfg.attack_hidden, cfg.seed, "attack.w2"));
    params.insert("b2", DenseArray::zeros(&[1, 2]));
    let mut net = AttackClassifier { params, standardizer, dim, hidden: cfg.attack_hidden };

    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::new(cfg.attack_rate).with_schedule(Schedule::InverseSqrt { warmup: 50 });
    let order: Vec<usize> = (0..standardized.len()).collect();
    let mut rng = stream_rng(cfg.seed, "attack-shuffle", 0);
    let inputs = Inputs::new();
    let batch = 16usize;

    for _ in 0..cfg.attack_steps {
        let mut grads = GradMap::new();
        let mut graph_count = 0;
        for _ in 0..batch {
            if order.is_empty() {
                break;
            }
            let pick = rng.gen_range(0..order.len());
            let idx = order[pick];
            let mut g = Graph::new();
            let loss = net.loss_graph(&mut g, &standardized[idx], data.labels[idx])?;
            let eval = forward(&g, &net.params, &inputs)?;
            let grad = backward(&g, &eval, loss, None)?;
            accumulate_grads(&mut grads, &grad, 1.0 / batch as f64);
            graph_count += 1;
        }
        if graph_count == 0 {
            break;
        }
        adam_step(&mut net.params, &grads, &mut adam, &adam_cfg)?;
    }
    Ok(net)
}

/// The full protocol: shadow training on a seeded fraction of the original
/// training set, attack-classifier training on the shadow's features, and
/// evaluation of the attacker against `target` on disjoint member and
/// non-member corpora. Returns member-class F1 and false-negative rate.
pub fn mia_run(
    target: &dyn OutputModel,
    train_corpus: &Corpus,
    members: &Corpus,
    nonmembers: &Corpus,
    arch: &ModelSpec,
    vocab: &Arc<Vocabulary>,
    cfg: &MiaConfig,
) -> Result<MiaOutcome> {
    if !(cfg.shadow_fraction > 0.0 && cfg.shadow_fraction < 1.0) {
        return Err(Error::Config("shadow fraction must lie in (0, 1)".into()));
    }
    let member_ids: std::collections::HashSet<&str> = members.id_set();
    if nonmembers.ids().any(|id| member_ids.contains(id)) {
        return Err(Error::Metric("member and non-member corpora overlap".into()));
    }

    // shadow split of the original training set
    let mut idx: Vec<usize> = (0..train_corpus.len()).collect();
    let mut rng = stream_rng(cfg.seed, "shadow-split", 0);
    idx.shuffle(&mut rng);
    let cut = ((train_corpus.len() as f64) * cfg.shadow_fraction).floor() as usize;
    if cut == 0 || cut >= train_corpus.len() {
        return Err(Error::Config("shadow fraction leaves an empty side".into()));
    }
    let shadow_member_ids: std::collections::HashSet<&str> =
        idx[..cut].iter().map(|&i| train_corpus.get(i).id.as_str()).collect();
    let shadow_members = train_corpus.subset(&shadow_member_ids, "shadow members")?;
    let shadow_nonmembers = train_corpus.without(&shadow_member_ids, "shadow nonmembers")?;

    let (shadow_model, record) =
        train_supervised(arch, vocab, &shadow_members, &cfg.shadow_train, derive_seed(cfg.seed, "shadow-train", 0))?;
    if record.diverged {
        return Err(Error::Metric("shadow-model training diverged".into()));
    }

    let attack_data =
        build_attack_dataset(&shadow_model as &TextModel, &shadow_members, &shadow_nonmembers, cfg.top_k, cfg.seed)?;
    let attacker = train_attack_classifier(&attack_data, cfg)?;

    evaluate_attack(&attacker, target, members, nonmembers, cfg.top_k)
}

/// F1 / FNR of a trained attacker against a target model.
pub fn evaluate_attack(
    attacker: &AttackClassifier,
    target: &dyn OutputModel,
    members: &Corpus,
    nonmembers: &Corpus,
    top_k: usize,
) -> Result<MiaOutcome> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for inst in members.instances() {
        let raw = extract_features(target, inst, top_k)?;
        if attacker.predict_member(&raw)? {
            tp += 1;
        } else {
            fn_ += 1;
        }
    }
    for inst in nonmembers.instances() {
        let raw = extract_features(target, inst, top_k)?;
        if attacker.predict_member(&raw)? {
            fp += 1;
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let fnr = if tp + fn_ == 0 { 0.0 } else { fn_ as f64 / (tp + fn_) as f64 };
    Ok(MiaOutcome { f1, fnr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_classification, SynthClassCfg};
    use crate::util::derive_seed as ds;

    fn world(seed: u64) -> (Corpus, Corpus, Corpus, ModelSpec, Arc<Vocabulary>) {
        let gen = SynthClassCfg {
            labels: 2,
            per_label: 120,
            vocab: 40,
            cluster_size: 5,
            tokens_per_instance: 6,
            noise: 0.4,
            id_prefix: "d".into(),
        };
        let train = synth_classification(&gen, ds(seed, "train", 0)).unwrap();
        let test = synth_classification(&SynthClassCfg { per_label: 40, id_prefix: "t".into(), ..gen.clone() }, ds(seed, "test", 0)).unwrap();
        let pool = synth_classification(&SynthClassCfg { per_label: 30, id_prefix: "n".into(), ..gen }, ds(seed, "pool", 0)).unwrap();
        let vocab = Arc::new(Vocabulary::from_corpora(&[&train, &pool], 1));
        let spec = ModelSpec::Classifier { embed: 10, hidden: 16, labels: train.labels() };
        (train, test, pool, spec, vocab)
    }

    #[test]
    fn attack_on_the_shadow_model_itself_beats_chance() {
        let (train, test, _pool, spec, vocab) = world(61);
        let train_cfg = TrainConfig { max_steps: 350, rate: 8e-3, ..Default::default() };
        let cfg = MiaConfig { shadow_train: train_cfg, seed: 5, ..Default::default() };

        // members: the 30% shadow slice is unknown here, so approximate the
        // "attack the shadow itself" case by targeting a model trained on
        // the full training set, with the training set as members.
        let (original, _) = train_supervised(&spec, &vocab, &train, &cfg.shadow_train, 99).unwrap();
        let forget_ids: Vec<String> = train.ids().take(60).map(str::to_string).collect();
        let members = train.subset(&forget_ids.iter().map(String::as_str).collect(), "members").unwrap();
        let outcome = mia_run(&original, &train, &members, &test, &spec, &vocab, &cfg).unwrap();
        assert!(outcome.f1 > 0.5, "attack F1 {} not above chance", outcome.f1);
    }

    #[test]
    fn label_permuted_attack_data_scores_near_chance() {
        // Permuted labels carry no signal, so the attacker's measured F1
        // sits at chance. A lightly trained target keeps the features
        // spread out; the chance statistic is averaged over permutations.
        let (train, test, _pool, spec, vocab) = world(62);
        let train_cfg = TrainConfig { max_steps: 40, rate: 8e-3, ..Default::default() };
        let (model, _) = train_supervised(&spec, &vocab, &train, &train_cfg, 7).unwrap();

        let members = train.subset(&train.ids().take(80).collect(), "m").unwrap();
        let cfg = MiaConfig { seed: 3, attack_steps: 1200, attack_hidden: 32, attack_rate: 1e-2, ..Default::default() };
        let mut mean = 0.0;
        let seeds = [77u64, 78, 79, 80, 81];
        for &pseed in &seeds {
            let mut data = build_attack_dataset(&model, &members, &test, 5, 3).unwrap();
            let mut rng = stream_rng(pseed, "permute", 0);
            data.labels.shuffle(&mut rng);
            let attacker = train_attack_classifier(&data, &cfg).unwrap();
            let outcome = evaluate_attack(&attacker, &model, &members, &test, 5).unwrap();
            mean += outcome.f1 / seeds.len() as f64;
        }
        assert!((mean - 0.5).abs() <= 0.1, "permuted-label mean F1 {mean}");
    }

    #[test]
    fn single_class_attack_data_rejected() {
        let data = AttackDataset { features: vec![vec![0.1, 0.2]; 4], labels: vec![1, 1, 1, 1] };
        assert!(train_attack_classifier(&data, &MiaConfig::default()).is_err());
    }

    #[test]
    fn member_and_nonmember_overlap_rejected() {
        let (train, _test, _pool, spec, vocab) = world(63);
        let (model, _) = train_supervised(&spec, &vocab, &train, &TrainConfig { max_steps: 5, ..Default::default() }, 1).unwrap();
        let members = train.subset(&train.ids().take(10).collect(), "m").unwrap();
        let cfg = MiaConfig::default();
        assert!(mia_run(&model, &train, &members, &members, &spec, &vocab, &cfg).is_err());
    }
}
