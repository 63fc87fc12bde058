use crate::data::{Corpus, Instance};
use crate::error::{Error, Result};
use crate::models::{Distribution, ModelSpec, OutputModel, TextModel, TrainConfig, Vocabulary};
use crate::util::{derive_seed, stream_rng};
use rand::seq::SliceRandom;
use std::collections::HashSet;
use std::sync::Arc;

/// Shard-isolated training: the corpus is partitioned into shards, one
/// model per shard, outputs aggregated by averaging distributions. Deleting
/// data retrains only the affected shards from their recorded seeds, which
/// makes deletion exactly equivalent to from-scratch training without the
/// removed instances.
#[derive(Clone, Debug)]
pub struct ShardedModel {
    /// Instance ids per shard, in corpus order.
    assignment: Vec<Vec<String>>,
    models: Vec<TextModel>,
    shard_seeds: Vec<u64>,
    spec: ModelSpec,
    train_cfg: TrainConfig,
}

impl ShardedModel {
    /// Reassembles a sharded model from persisted parts.
    pub fn from_parts(
        assignment: Vec<Vec<String>>,
        models: Vec<TextModel>,
        shard_seeds: Vec<u64>,
        spec: ModelSpec,
        train_cfg: TrainConfig,
    ) -> Result<Self> {
        if assignment.len() != models.len() || models.len() != shard_seeds.len() || models.is_empty() {
            return Err(Error::Unlearn("inconsistent shard parts".into()));
        }
        Ok(ShardedModel { assignment, models, shard_seeds, spec, train_cfg })
    }

    pub fn shard_count(&self) -> usize {
        self.models.len()
    }

    pub fn assignment(&self) -> &[Vec<String>] {
        &self.assignment
    }

    pub fn shard_model(&self, idx: usize) -> &TextModel {
        &self.models[idx]
    }

    pub fn shard_seeds(&self) -> &[u64] {
        &self.shard_seeds
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn train_cfg(&self) -> &TrainConfig {
        &self.train_cfg
    }
}

fn shard_subcorpus(corpus: &Corpus, ids: &[String]) -> Result<Corpus> {
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    corpus.subset(&wanted, "shard")
}

fn train_shard(
    spec: &ModelSpec,
    vocab: &Arc<Vocabulary>,
    corpus: &Corpus,
    ids: &[String],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TextModel> {
    let shard = shard_subcorpus(corpus, ids)?;
    if shard.is_empty() {
        return Err(Error::Unlearn("a shard became empty; use fewer shards or forget fewer instances".into()));
    }
    let (model, record) = crate::models::train_supervised(spec, vocab, &shard, cfg, seed)?;
    if record.diverged {
        return Err(Error::Unlearn("shard training diverged".into()));
    }
    Ok(model)
}

/// Balanced seeded shard assignment followed by independent per-shard
/// training. Shard sizes differ by at most one.
pub fn sisa_train(
    corpus: &Corpus,
    spec: &ModelSpec,
    vocab: &Arc<Vocabulary>,
    cfg: &TrainConfig,
    shard_count: usize,
    seed: u64,
) -> Result<ShardedModel> {
    if shard_count == 0 {
        return Err(Error::Config("shard count must be at least 1".into()));
    }
    if shard_count > corpus.len() {
        return Err(Error::Config(format!("{shard_count} shards for {} instances", corpus.len())));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = stream_rng(seed, "sisa-assign", 0);
    order.shuffle(&mut rng);
    let mut index_assignment: Vec<Vec<usize>> = vec![Vec::new(); shard_count];
    for (i, idx) in order.into_iter().enumerate() {
        index_assignment[i % shard_count].push(idx);
    }
    let assignment: Vec<Vec<String>> = index_assignment
        .into_iter()
        .map(|mut v| {
            v.sort_unstable(); // corpus order within the shard
            v.into_iter().map(|i| corpus.get(i).id.clone()).collect()
        })
        .collect();
    let shard_seeds: Vec<u64> = (0..shard_count).map(|i| derive_seed(seed, "sisa-shard", i as u64)).collect();

    let mut models = Vec::with_capacity(shard_count);
    for (ids, &shard_seed) in assignment.iter().zip(&shard_seeds) {
        models.push(train_shard(spec, vocab, corpus, ids, cfg, shard_seed)?);
    }
    Ok(ShardedModel { assignment, models, shard_seeds, spec: spec.clone(), train_cfg: *cfg })
}

/// From-scratch sharded training under a FIXED assignment and seed list,
/// with the given ids removed. This is the oracle `sisa_forget` must match
/// bit for bit.
pub fn sisa_train_with_assignment(
    corpus: &Corpus,
    vocab: &Arc<Vocabulary>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    assignment: &[Vec<String>],
    shard_seeds: &[u64],
    drop_ids: &HashSet<String>,
) -> Result<ShardedModel> {
    let mut kept_assignment = Vec::with_capacity(assignment.len());
    let mut models = Vec::with_capacity(assignment.len());
    for (ids, &shard_seed) in assignment.iter().zip(shard_seeds) {
        let kept: Vec<String> = ids.iter().filter(|id| !drop_ids.contains(*id)).cloned().collect();
        models.push(train_shard(spec, vocab, corpus, &kept, cfg, shard_seed)?);
        kept_assignment.push(kept);
    }
    Ok(ShardedModel {
        assignment: kept_assignment,
        models,
        shard_seeds: shard_seeds.to_vec(),
        spec: spec.clone(),
        train_cfg: *cfg,
    })
}

/// Deletes instances by retraining only the shards that contain them; all
/// other shard models are reused untouched.
pub fn sisa_forget(
    sharded: &ShardedModel,
    corpus: &Corpus,
    vocab: &Arc<Vocabulary>,
    forget_ids: &HashSet<String>,
) -> Result<ShardedModel> {
    let known: HashSet<&str> = sharded.assignment.iter().flatten().map(String::as_str).collect();
    if let Some(missing) = forget_ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(Error::Unlearn(format!("cannot forget unknown id {missing:?}")));
    }

    let mut assignment = Vec::with_capacity(sharded.shard_count());
    let mut models = Vec::with_capacity(sharded.shard_count());
    for (shard_idx, ids) in sharded.assignment.iter().enumerate() {
        let affected = ids.iter().any(|id| forget_ids.contains(id));
        if affected {
            let kept: Vec<String> = ids.iter().filter(|id| !forget_ids.contains(*id)).cloned().collect();
            models.push(train_shard(
                &sharded.spec,
                vocab,
                corpus,
                &kept,
                &sharded.train_cfg,
                sharded.shard_seeds[shard_idx],
            )?);
            assignment.push(kept);
        } else {
            models.push(sharded.models[shard_idx].clone());
            assignment.push(ids.clone());
        }
    }
    Ok(ShardedModel {
        assignment,
        models,
        shard_seeds: sharded.shard_seeds.clone(),
        spec: sharded.spec.clone(),
        train_cfg: sharded.train_cfg,
    })
}

struct EnsembleCursor<'a> {
    cursors: Vec<Box<dyn crate::models::DecodeCursor<'a> + 'a>>,
}

impl<'a> crate::models::DecodeCursor<'a> for EnsembleCursor<'a> {
    fn feed(&self, token: usize) -> Result<(Distribution, Box<dyn crate::models::DecodeCursor<'a> + 'a>)> {
        let mut acc: Vec<f64> = Vec::new();
        let mut next = Vec::with_capacity(self.cursors.len());
        for cursor in &self.cursors {
            let (dist, successor) = cursor.feed(token)?;
            if acc.is_empty() {
                acc = dist.probs().to_vec();
            } else {
                for (a, &p) in acc.iter_mut().zip(dist.probs()) {
                    *a += p;
                }
            }
            next.push(successor);
        }
        let n = self.cursors.len() as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
        Ok((Distribution::new(acc)?, Box::new(EnsembleCursor { cursors: next })))
    }
}

impl ShardedModel {
    /// Beam decoding over the shard ensemble: per-step distributions are
    /// averaged across shards, matching the aggregation rule.
    pub fn beam_generate(&self, source_tokens: &[&str], beam_width: usize) -> Result<Vec<String>> {
        let mut cursors = Vec::with_capacity(self.models.len());
        for m in &self.models {
            cursors.push(crate::models::decode_root(m.as_seq2seq()?, source_tokens)?);
        }
        let ids = crate::models::beam_over(Box::new(EnsembleCursor { cursors }), beam_width)?;
        let vocab = self.models[0].vocab();
        Ok(ids.iter().map(|&t| vocab.token(t).to_string()).collect())
    }
}

impl OutputModel for ShardedModel {
    fn support(&self) -> usize {
        self.models[0].support()
    }

    fn support_fingerprint(&self) -> u64 {
        self.models[0].support_fingerprint()
    }

    /// Arithmetic mean of the shard distributions per position; the mean of
    /// probability vectors is again a probability vector.
    fn distributions(&self, inst: &Instance) -> Result<Vec<Distribution>> {
        let mut acc: Vec<Vec<f64>> = Vec::new();
        for model in &self.models {
            let dists = model.distributions(inst)?;
            if acc.is_empty() {
                acc = dists.iter().map(|d| d.probs().to_vec()).collect();
            } else {
                if acc.len() != dists.len() {
                    return Err(Error::Unlearn("shards disagree on position count".into()));
                }
                for (a, d) in acc.iter_mut().zip(&dists) {
                    for (x, &p) in a.iter_mut().zip(d.probs()) {
                        *x += p;
                    }
                }
            }
        }
        let n = self.models.len() as f64;
        acc.into_iter()
            .map(|mut row| {
                for x in row.iter_mut() {
                    *x /= n;
                }
                Distribution::new(row)
            })
            .collect()
    }

    fn gold_ids(&self, inst: &Instance) -> Result<Vec<usize>> {
        self.models[0].gold_ids(inst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unlearn::params_identical;
    use crate::unlearn::test_support::small_world;

    fn quick_cfg() -> TrainConfig {
        TrainConfig { max_steps: 30, rate: 5e-3, batch_size: 8, warmup: 10 }
    }

    #[test]
    fn assignment_is_balanced() {
        let (split, spec, vocab) = small_world(50, 5, 41);
        let sharded = sisa_train(&split.full, &spec, &vocab, &quick_cfg(), 5, 7).unwrap();
        for ids in sharded.assignment() {
            assert_eq!(ids.len(), 20);
        }
    }

    #[test]
    fn aggregated_distribution_sums_to_one() {
        let (split, spec, vocab) = small_world(20, 4, 42);
        let sharded = sisa_train(&split.full, &spec, &vocab, &quick_cfg(), 3, 9).unwrap();
        let d = sharded.distributions(split.full.get(0)).unwrap();
        let total: f64 = d[0].probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_shard_equals_plain_training() {
        let (split, spec, vocab) = small_world(20, 4, 43);
        let sharded = sisa_train(&split.full, &spec, &vocab, &quick_cfg(), 1, 11).unwrap();
        let (plain, _) = crate::models::train_supervised(
            &spec,
            &vocab,
            &split.full,
            &quick_cfg(),
            derive_seed(11, "sisa-shard", 0),
        )
        .unwrap();
        assert!(params_identical(sharded.shard_model(0), &plain));
    }

    #[test]
    fn zero_forget_retrains_nothing() {
        let (split, spec, vocab) = small_world(20, 4, 44);
        let sharded = sisa_train(&split.full, &spec, &vocab, &quick_cfg(), 4, 13).unwrap();
        let after = sisa_forget(&sharded, &split.full, &vocab, &HashSet::new()).unwrap();
        for i in 0..4 {
            assert!(params_identical(sharded.shard_model(i), after.shard_model(i)));
        }
    }

    #[test]
    fn unaffected_shards_are_bit_identical_and_affected_match_oracle() {
        let (split, spec, vocab) = small_world(30, 6, 45);
        let sharded = sisa_train(&split.full, &spec, &vocab, &quick_cfg(), 4, 17).unwrap();

        // forget ids all drawn from shard 2
        let victims: HashSet<String> = sharded.assignment()[2].iter().take(3).cloned().collect();
        let after = sisa_forget(&sharded, &split.full, &vocab, &victims).unwrap();
        for i in [0usize, 1, 3] {
            assert!(params_identical(sharded.shard_model(i), after.shard_model(i)), "shard {i} changed");
        }
        assert!(!params_identical(sharded.shard_model(2), after.shard_model(2)));

        let oracle = sisa_train_with_assignment(
            &split.full,
            &vocab,
            &spec,
            &quick_cfg(),
            sharded.assignment(),
            sharded.shard_seeds(),
            &victims,
        )
        .unwrap();
        for i in 0..4 {
            assert!(params_identical(oracle.shard_model(i), after.shard_model(i)), "oracle mismatch in {i}");
        }
    }

    #[test]
    fn unknown_forget_id_is_rejected() {
        let (split, spec, vocab) = small_world(15, 3, 46);
        let sharded = sisa_train(&split.full, &spec, &vocab, &quick_cfg(), 2, 19).unwrap();
        let bogus: HashSet<String> = ["no-such-id".to_string()].into_iter().collect();
        assert!(sisa_forget(&sharded, &split.full, &vocab, &bogus).is_err());
    }

    #[test]
    fn zero_shards_rejected() {
        let (split, spec, vocab) = small_world(15, 3, 47);
        assert!(sisa_train(&split.full, &spec, &vocab, &quick_cfg(), 0, 1).is_err());
    }
}
