//! Unlearning metrics (symmetric-KL divergence score, perplexity distance,
//! probability-drop share), task metrics (micro-F1, corpus 4-gram score),
//! and the black-box membership-inference attack.
//!
//! Divergence scores between models are always computed per instance over
//! the shared output-distribution contract and averaged in corpus order, so
//! they apply unchanged to classifiers, seq2seq models, and shard
//! aggregates.

mod bleu;
mod mia;

pub use bleu::{bleu4, bleu4_single};
pub use mia::{
    build_attack_dataset, evaluate_attack, extract_features, mia_run, train_attack_classifier, AttackClassifier,
    AttackDataset, MiaConfig, MiaOutcome,
};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::models::{sequence_log_prob, sequence_perplexity, Distribution, OutputModel};
use crate::util::par_map;

/// Uniform mixing weight applied before taking logs: the paper-style
/// symmetric score is infinite on disjoint supports without it.
const SMOOTH_EPS: f64 = 1e-9;

fn smoothed(p: &Distribution) -> Vec<f64> {
    let n = p.support() as f64;
    p.probs().iter().map(|&v| (1.0 - SMOOTH_EPS) * v + SMOOTH_EPS / n).collect()
}

/// KL divergence with uniform smoothing at weight 1e-9.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.support() != q.support() {
        return Err(Error::Metric(format!("support mismatch: {} vs {}", p.support(), q.support())));
    }
    let (ps, qs) = (smoothed(p), smoothed(q));
    Ok(ps.iter().zip(&qs).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi.ln() - qi.ln())).sum())
}

/// Symmetric divergence score: `0.5*KL(p||q) + 0.5*KL(q||p)`. This is the
/// symmetric-KL form (not the midpoint variant), applied as published.
pub fn jsd(p: &Distribution, q: &Distribution) -> Result<f64> {
    Ok(0.5 * kl_divergence(p, q)? + 0.5 * kl_divergence(q, p)?)
}

/// Relative perplexity distance `|x - y| / y` for one instance pair.
pub fn lpd(x: f64, y: f64) -> Result<f64> {
    if y <= 0.0 {
        return Err(Error::Metric(format!("reference perplexity must be positive, got {y}")));
    }
    Ok((x - y).abs() / y)
}

/// Mean over the corpus of the per-instance, per-position symmetric
/// divergence between two models.
pub fn model_jsd(a: &dyn OutputModel, b: &dyn OutputModel, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    if a.support_fingerprint() != b.support_fingerprint() {
        return Err(Error::Metric("models do not share an output support".into()));
    }
    let per: Vec<Result<f64>> = par_map(corpus.instances(), |inst| {
        let da = a.distributions(inst)?;
        let db = b.distributions(inst)?;
        let mut total = 0.0;
        for (p, q) in da.iter().zip(&db) {
            total += jsd(p, q)?;
        }
        Ok(total / da.len() as f64)
    });
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / corpus.len() as f64)
}

/// Mean over the corpus of `lpd(ppl_model, ppl_reference)` per instance.
pub fn model_lpd(model: &dyn OutputModel, reference: &dyn OutputModel, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    let per: Vec<Result<f64>> = par_map(corpus.instances(), |inst| {
        let x = sequence_perplexity(model, inst)?.value;
        let y = sequence_perplexity(reference, inst)?.value;
        lpd(x, y)
    });
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / corpus.len() as f64)
}

/// Corpus-level perplexity: `exp(total NLL / total positions)` over the
/// corpus under teacher forcing.
pub fn corpus_perplexity(model: &dyn OutputModel, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    let per: Vec<Result<(f64, usize, bool)>> = par_map(corpus.instances(), |inst| sequence_log_prob(model, inst));
    let mut nll = 0.0;
    let mut positions = 0usize;
    for r in per {
        let (lp, n, _) = r?;
        nll -= lp;
        positions += n;
    }
    Ok((nll / positions as f64).exp())
}

/// Share (in percent) of instances whose gold-sequence probability is
/// strictly lower under `after` than under `before`.
pub fn pdlp(after: &dyn OutputModel, before: &dyn OutputModel, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    let per: Vec<Result<bool>> = par_map(corpus.instances(), |inst| {
        let (lp_after, _, _) = sequence_log_prob(after, inst)?;
        let (lp_before, _, _) = sequence_log_prob(before, inst)?;
        Ok(lp_after < lp_before)
    });
    let mut dropped = 0usize;
    for r in per {
        if r? {
            dropped += 1;
        }
    }
    Ok(100.0 * dropped as f64 / corpus.len() as f64)
}

/// Micro-averaged F1 over labels. For single-label predictions this equals
/// accuracy.
pub fn micro_f1(predictions: &[String], golds: &[String]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Metric(format!("{} predictions vs {} golds", predictions.len(), golds.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Metric("no predictions".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, g) in predictions.iter().zip(golds) {
        if p == g {
            tp += 1;
        } else {
            fp += 1; // predicted label wrongly
            fn_ += 1; // gold label missed
        }
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero_after_smoothing() {
        let p = dist(&[0.3, 0.7]);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn jsd_is_symmetric_and_matches_hand_value() {
        let p = dist(&[0.9, 0.1]);
        let q = dist(&[0.1, 0.9]);
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        assert_eq!(a, b);
        // 0.8 * ln 9
        assert!((a - 0.8 * 9f64.ln()).abs() < 1e-6, "got {a}");
        assert!(jsd(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn jsd_rejects_support_mismatch() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.2, 0.3, 0.5]);
        assert!(jsd(&p, &q).is_err());
    }

    #[test]
    fn lpd_basics() {
        assert_eq!(lpd(20.0, 20.0).unwrap(), 0.0);
        assert!((lpd(30.0, 20.0).unwrap() - 0.5).abs() < 1e-12);
        // scale invariance
        let c = 7.3;
        assert!((lpd(30.0 * c, 20.0 * c).unwrap() - 0.5).abs() < 1e-12);
        assert!(lpd(1.0, 0.0).is_err());
        assert!(lpd(1.0, -2.0).is_err());
    }

    #[test]
    fn micro_f1_basics() {
        let all = vec!["a".to_string(), "b".into(), "a".into()];
        assert_eq!(micro_f1(&all, &all).unwrap(), 1.0);
        let wrong = vec!["b".to_string(), "a".into(), "b".into()];
        assert_eq!(micro_f1(&wrong, &all).unwrap(), 0.0);
        let two_thirds = vec!["a".to_string(), "b".into(), "b".into()];
        assert!((micro_f1(&two_thirds, &all).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(micro_f1(&all, &all[..2].to_vec()).is_err());
    }

    // Single-label micro-F1 equals accuracy, checked against a hand count.
    #[test]
    fn micro_f1_equals_accuracy_on_single_label_data() {
        let golds: Vec<String> = ["x", "y", "z", "x", "y"].iter().map(|s| s.to_string()).collect();
        let preds: Vec<String> = ["x", "z", "z", "y", "y"].iter().map(|s| s.to_string()).collect();
        let acc = 3.0 / 5.0;
        assert!((micro_f1(&preds, &golds).unwrap() - acc).abs() < 1e-12);
    }
}
