//! Unlearning methods: knowledge-gap alignment plus the exact baselines
//! (full retraining, sharded retraining) and the random-teacher baseline.
//!
//! The gap between two same-architecture models on a corpus is the mean
//! per-instance KL divergence of their output distributions. Alignment
//! drives the gap between the unlearned model and a forget-set helper
//! toward the gap the original model shows against a fresh-data helper,
//! while distilling the original model on the retained data.

mod badt;
mod kga;
mod sisa;

pub use badt::{badt_unlearn, BadtReport};
pub use kga::{kga_run, kga_unlearn, stopping_sound, KgaReport, KgaRun, Termination};
pub use sisa::{sisa_forget, sisa_train, sisa_train_with_assignment, ShardedModel};

use crate::data::{Corpus, Instance, SplitSet};
use crate::error::{Error, Result};
use crate::models::{train_supervised, ModelSpec, OutputModel, TextModel, TrainConfig, TrainRecord, Vocabulary};
use crate::util::{derive_seed, par_map, stream_rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Hyperparameters for the alignment loop (shared by the random-teacher
/// baseline, which ignores `sigma`).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct UnlearnConfig {
    /// Weight of the retain-distillation loss.
    pub alpha: f64,
    /// Stopping ratio in (0, 1): stop once the current gap falls to
    /// `sigma` times the initial gap.
    pub sigma: f64,
    pub rate: f64,
    pub batch_size: usize,
    pub max_step: usize,
    /// Retain batches folded into each update.
    pub inner_step: usize,
    /// Validation cadence in steps.
    pub valid_step: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            alpha: 0.1,
            sigma: 0.1,
            rate: 5e-5,
            batch_size: 16,
            max_step: 2000,
            inner_step: 1,
            valid_step: 10,
            warmup: 100,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::Config(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_step == 0 || self.inner_step == 0 || self.valid_step == 0 {
            return Err(Error::Config("step limits and batch size must be positive".into()));
        }
        if self.rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Plain (unsmoothed) KL divergence between two probability vectors.
/// Softmax outputs are strictly positive, so the floor on `q` only guards
/// degenerate hand-built inputs.
pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(1e-300).ln()))
        .sum()
}

/// Output-distribution distance between two models on one instance: the KL
/// divergence for classifiers, the mean per-position KL under teacher
/// forcing for generation.
pub fn distribution_distance(a: &dyn OutputModel, b: &dyn OutputModel, inst: &Instance) -> Result<f64> {
    if a.support_fingerprint() != b.support_fingerprint() {
        return Err(Error::Unlearn("models do not share an output support".into()));
    }
    let da = a.distributions(inst)?;
    let db = b.distributions(inst)?;
    if da.len() != db.len() {
        return Err(Error::Unlearn("models disagree on position count".into()));
    }
    let total: f64 = da.iter().zip(&db).map(|(p, q)| kl_raw(p.probs(), q.probs())).sum();
    Ok(total / da.len() as f64)
}

/// Mean of [`distribution_distance`] over a corpus. Instances are evaluated
/// in parallel (capped by `KGA_THREADS`) and reduced in corpus order.
pub fn mean_gap(a: &dyn OutputModel, b: &dyn OutputModel, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Unlearn("cannot compute a gap over an empty corpus".into()));
    }
    let per: Vec<Result<f64>> = par_map(corpus.instances(), |inst| distribution_distance(a, b, inst));
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / corpus.len() as f64)
}

/// Helper-training knobs: plain supervised training plus the optional
/// mix-in of a retain-set fraction, which stabilizes training when the
/// forget or extra set is small.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct HelperConfig {
    pub train: TrainConfig,
    pub augment: bool,
    pub augment_fraction: f64,
}

impl Default for HelperConfig {
    fn default() -> Self {
        HelperConfig { train: TrainConfig::default(), augment: true, augment_fraction: 0.1 }
    }
}

/// The two helper models: one trained on the forget set, one on the extra
/// set, both with the deployed model's architecture.
#[derive(Clone, Debug)]
pub struct Helpers {
    pub forget_model: TextModel,
    pub extra_model: TextModel,
}

fn augmented_corpus(base: &Corpus, retain: &Corpus, fraction: f64, seed: u64, tag: &str) -> Result<Corpus> {
    let take = ((retain.len() as f64) * fraction).floor() as usize;
    if take == 0 {
        return Ok(base.clone());
    }
    let mut idx: Vec<usize> = (0..retain.len()).collect();
    let mut rng = stream_rng(seed, tag, 0);
    idx.shuffle(&mut rng);
    idx.truncate(take);
    idx.sort_unstable();
    let mut instances = base.instances().to_vec();
    instances.extend(idx.into_iter().map(|i| retain.get(i).clone()));
    Corpus::new(base.kind(), instances, format!("{} + retain fraction", base.provenance()))
}

/// Trains the forget-set and extra-set helpers with the same architecture
/// as the deployed model. Deterministic in (inputs, cfg, seed).
pub fn train_helpers(
    split: &SplitSet,
    spec: &ModelSpec,
    vocab: &Arc<Vocabulary>,
    cfg: &HelperConfig,
    seed: u64,
) -> Result<(Helpers, TrainRecord, TrainRecord)> {
    if split.forget.is_empty() {
        return Err(Error::Unlearn("helper training needs a non-empty forget set".into()));
    }
    if split.extra.is_empty() {
        return Err(Error::Unlearn("helper training needs a non-empty extra set".into()));
    }
    let (forget_corpus, extra_corpus) = if cfg.augment {
        (
            augmented_corpus(&split.forget, &split.retain, cfg.augment_fraction, seed, "augment-forget")?,
            augmented_corpus(&split.extra, &split.retain, cfg.augment_fraction, seed, "augment-extra")?,
        )
    } else {
        (split.forget.clone(), split.extra.clone())
    };
    let (forget_model, rec_f) =
        train_supervised(spec, vocab, &forget_corpus, &cfg.train, derive_seed(seed, "helper-forget", 0))?;
    if rec_f.diverged {
        return Err(Error::Unlearn("forget-set helper training diverged".into()));
    }
    let (extra_model, rec_n) =
        train_supervised(spec, vocab, &extra_corpus, &cfg.train, derive_seed(seed, "helper-extra", 0))?;
    if rec_n.diverged {
        return Err(Error::Unlearn("extra-set helper training diverged".into()));
    }
    Ok((Helpers { forget_model, extra_model }, rec_f, rec_n))
}

/// The exactness oracle: fresh training on the retained data only.
pub fn retrain(
    split: &SplitSet,
    spec: &ModelSpec,
    vocab: &Arc<Vocabulary>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TextModel, TrainRecord)> {
    train_supervised(spec, vocab, &split.retain, cfg, seed)
}

/// Bitwise parameter equality between two models.
pub fn params_identical(a: &TextModel, b: &TextModel) -> bool {
    use crate::models::DiffModel;
    if a.params().len() != b.params().len() {
        return false;
    }
    a.params().iter().all(|(name, arr)| match b.params().get(name) {
        Some(other) => {
            arr.shape() == other.shape()
                && arr.data().iter().zip(other.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        None => false,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::data::{partition, synth_classification, ForgetSpec, SynthClassCfg};

    /// Small classification world shared by unlearning tests: corpus, pool,
    /// frozen vocabulary, split, architecture.
    pub fn small_world(
        train_per_label: usize,
        forget: usize,
        seed: u64,
    ) -> (SplitSet, ModelSpec, Arc<Vocabulary>) {
        let gen = SynthClassCfg {
            labels: 2,
            per_label: train_per_label,
            vocab: 40,
            cluster_size: 5,
            tokens_per_instance: 6,
            noise: 0.3,
            id_prefix: "d".into(),
        };
        let corpus = synth_classification(&gen, derive_seed(seed, "corpus", 0)).unwrap();
        let pool_cfg = SynthClassCfg { per_label: forget.max(8), id_prefix: "n".into(), ..gen };
        let pool = synth_classification(&pool_cfg, derive_seed(seed, "pool", 0)).unwrap();
        let split = partition(&corpus, &ForgetSpec::RandomCount { count: forget }, None, &pool, seed).unwrap();
        let vocab = Arc::new(Vocabulary::from_corpora(&[&split.full, &split.extra], 1));
        let spec = ModelSpec::Classifier { embed: 10, hidden: 16, labels: corpus.labels() };
        (split, spec, vocab)
    }
}
