use crate::error::{Error, Result};
use std::collections::HashMap;

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_default() += 1;
        }
    }
    counts
}

/// Corpus-level 4-gram overlap score in `[0, 100]`: clipped modified
/// precisions for orders 1–4 with add-one smoothing on orders 2–4, a
/// brevity penalty against the closest reference length, and geometric
/// averaging. Multiple references per candidate are supported; counts are
/// clipped against the per-reference maximum.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Metric(format!("{} candidates vs {} reference sets", candidates.len(), references.len())));
    }
    if references.iter().any(|refs| refs.is_empty()) {
        return Err(Error::Metric("every candidate needs at least one reference".into()));
    }

    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut candidate_len = 0usize;
    let mut reference_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        candidate_len += cand.len();
        // closest reference length; ties go to the shorter reference
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&rl| ((rl as i64 - cand.len() as i64).abs(), rl))
            .unwrap();
        reference_len += closest;

        for n in 1..=MAX_ORDER {
            let cand_counts = ngram_counts(cand, n);
            if cand_counts.is_empty() {
                continue;
            }
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let slot = max_ref.entry(gram).or_default();
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in cand_counts {
                total[n - 1] += count;
                let clip = max_ref.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }

    if total[0] == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (matched[0] as f64 / total[0] as f64).ln();
    for n in 2..=MAX_ORDER {
        // add-one smoothing keeps short corpora off the zero cliff
        let p = (matched[n - 1] + 1) as f64 / (total[n - 1] + 1) as f64;
        log_sum += p.ln();
    }
    let brevity = if candidate_len < reference_len {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * (log_sum / MAX_ORDER as f64).exp())
}

/// Convenience for the single-reference case.
pub fn bleu4_single(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    let wrapped: Vec<Vec<Vec<String>>> = references.iter().map(|r| vec![r.clone()]).collect();
    bleu4(candidates, &wrapped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn perfect_match_scores_one_hundred() {
        let cands = vec![toks("a b c d e"), toks("x y z w")];
        let refs: Vec<Vec<String>> = cands.clone();
        let score = bleu4_single(&cands, &refs).unwrap();
        assert!((score - 100.0).abs() < 1e-9, "got {score}");
    }

    #[test]
    fn zero_unigram_overlap_scores_zero() {
        let cands = vec![toks("a b c")];
        let refs = vec![toks("x y z")];
        assert_eq!(bleu4_single(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_matches_hand_computation() {
        // candidate "a b c d e" vs reference "a b c d f":
        // p1 = 4/5 unsmoothed; p2 = (3+1)/(4+1); p3 = (2+1)/(3+1);
        // p4 = (1+1)/(2+1); brevity = 1
        let cands = vec![toks("a b c d e")];
        let refs = vec![toks("a b c d f")];
        let expect = 100.0 * (0.8f64 * 0.8 * 0.75 * (2.0 / 3.0)).powf(0.25);
        let got = bleu4_single(&cands, &refs).unwrap();
        assert!((got - expect).abs() < 1e-9, "got {got}, want {expect}");
    }

    #[test]
    fn brevity_penalty_punishes_short_candidates() {
        let cands = vec![toks("a b")];
        let refs = vec![toks("a b c d")];
        let score = bleu4_single(&cands, &refs).unwrap();
        assert!(score < 100.0 * (1.0f64 - 2.0).exp() + 1.0);
        assert!(score > 0.0);
    }

    #[test]
    fn corpus_order_and_reference_order_do_not_matter() {
        let c1 = toks("a b c d");
        let c2 = toks("p q r s t");
        let r1a = toks("a b c x");
        let r1b = toks("a b y d");
        let r2 = toks("p q r s v");
        let forward = bleu4(&[c1.clone(), c2.clone()], &[vec![r1a.clone(), r1b.clone()], vec![r2.clone()]]).unwrap();
        let swapped_corpus = bleu4(&[c2.clone(), c1.clone()], &[vec![r2.clone()], vec![r1a.clone(), r1b.clone()]]).unwrap();
        let swapped_refs = bleu4(&[c1, c2], &[vec![r1b, r1a], vec![r2]]).unwrap();
        assert_eq!(forward, swapped_corpus);
        assert_eq!(forward, swapped_refs);
    }
}
