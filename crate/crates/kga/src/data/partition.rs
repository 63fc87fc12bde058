use crate::data::{Corpus, ScoreMap, SplitSet};
use crate::error::{Error, Result};
use crate::util::stream_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// How the forget set is selected from the training corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForgetSpec {
    /// Explicit id list.
    Ids { ids: Vec<String> },
    /// Seeded uniform sample of the given size.
    RandomCount { count: usize },
    /// Every instance whose target contains the token.
    TokenInTarget { token: String },
    /// Instances are ranked by an externally supplied per-instance score,
    /// split into `bands` equal fragments (band 0 = lowest scores), and
    /// `count` instances are sampled from fragment `band`.
    ScoreBand { band: usize, bands: usize, count: usize },
}

/// Serialized description of a split, sufficient to rebuild it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub forget_ids: Vec<String>,
    pub extra_path: String,
    pub seed: u64,
    pub spec: ForgetSpec,
}

fn select_forget_ids(corpus: &Corpus, spec: &ForgetSpec, scores: Option<&ScoreMap>, seed: u64) -> Result<Vec<String>> {
    match spec {
        ForgetSpec::Ids { ids } => Ok(ids.clone()),
        ForgetSpec::RandomCount { count } => {
            let mut ids: Vec<String> = corpus.ids().map(str::to_string).collect();
            let mut rng = stream_rng(seed, "forget-random", 0);
            ids.shuffle(&mut rng);
            ids.truncate(*count);
            ids.sort();
            Ok(ids)
        }
        ForgetSpec::TokenInTarget { token } => Ok(corpus
            .instances()
            .iter()
            .filter(|i| i.target_tokens().iter().any(|t| t == token))
            .map(|i| i.id.clone())
            .collect()),
        ForgetSpec::ScoreBand { band, bands, count } => {
            if *bands == 0 || band >= bands {
                return Err(Error::Config(format!("score band {band} out of range for {bands} bands")));
            }
            let scores = scores.ok_or_else(|| {
                Error::Data("score-band forget selection needs per-instance scores".into())
            })?;
            let mut ranked: Vec<(&str, f64)> = Vec::with_capacity(corpus.len());
            for inst in corpus.instances() {
                let s = scores
                    .get(&inst.id)
                    .ok_or_else(|| Error::Data(format!("no score for instance {:?}", inst.id)))?;
                ranked.push((inst.id.as_str(), *s));
            }
            // stable rank: score ascending, id as tiebreak
            ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(b.0)));
            let per = ranked.len() / bands;
            if per == 0 {
                return Err(Error::Data(format!("{} instances cannot form {bands} score bands", ranked.len())));
            }
            let start = band * per;
            let end = if *band == bands - 1 { ranked.len() } else { start + per };
            let mut fragment: Vec<String> = ranked[start..end].iter().map(|(id, _)| id.to_string()).collect();
            let mut rng = stream_rng(seed, "forget-band", *band as u64);
            fragment.shuffle(&mut rng);
            fragment.truncate(*count);
            fragment.sort();
            Ok(fragment)
        }
    }
}

/// Builds the split quadruple. The extra set is a seeded sample from
/// `extra_pool` matching the forget-set size (the whole pool when smaller),
/// and must be id-disjoint from the corpus.
pub fn partition(
    corpus: &Corpus,
    spec: &ForgetSpec,
    scores: Option<&ScoreMap>,
    extra_pool: &Corpus,
    seed: u64,
) -> Result<SplitSet> {
    if corpus.kind() != extra_pool.kind() {
        return Err(Error::Data("extra pool kind differs from the corpus".into()));
    }
    let forget_ids = select_forget_ids(corpus, spec, scores, seed)?;
    let forget_set: HashSet<&str> = forget_ids.iter().map(String::as_str).collect();
    if forget_set.len() != forget_ids.len() {
        return Err(Error::Data("forget selection contains duplicate ids".into()));
    }

    let take = forget_ids.len().max(1).min(extra_pool.len());
    let mut pool_ids: Vec<&str> = extra_pool.ids().collect();
    let mut rng = stream_rng(seed, "extra-sample", 0);
    pool_ids.shuffle(&mut rng);
    pool_ids.truncate(take);
    let extra_ids: HashSet<&str> = pool_ids.into_iter().collect();
    let extra = extra_pool.subset(&extra_ids, "extra")?;

    SplitSet::new(corpus.clone(), &forget_set, extra)
}
