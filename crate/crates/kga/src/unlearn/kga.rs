use crate::data::SplitSet;
use crate::error::{Error, Result};
use crate::gradkit::{
    adam_step, backward, forward, AdamConfig, AdamState, DenseArray, GradMap, Graph, Inputs, Schedule, StepOutcome,
};
use crate::models::{kl_to_target_loss, DiffModel, Distribution, ModelSpec, OutputModel, TextModel, Vocabulary};
use crate::models::accumulate_grads;
use crate::unlearn::{kl_raw, train_helpers, HelperConfig, Helpers, UnlearnConfig};
use crate::util::stream_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// Why an alignment run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// The current gap reached `sigma` times the initial gap.
    GapMet,
    /// The step cap was hit; the best-so-far parameters were returned.
    StepCap,
}

/// Trace of one alignment run. When `termination` is gap-met, `final_gap`
/// is guaranteed to be at most `sigma * initial_gap` exactly as recorded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KgaReport {
    pub initial_gap: f64,
    pub final_gap: f64,
    pub sigma: f64,
    /// `(step, gap)` at every validation point, in step order.
    pub trajectory: Vec<(usize, f64)>,
    pub steps_taken: usize,
    pub termination: Termination,
    #[serde(default)]
    pub skipped_steps: usize,
    /// Volatile; stripped from canonical report bytes.
    #[serde(default)]
    pub wall_seconds: f64,
}

/// Frozen per-instance distributions for one corpus.
struct FrozenDists {
    dists: Vec<Vec<Distribution>>,
}

impl FrozenDists {
    fn compute(model: &TextModel, corpus: &crate::data::Corpus) -> Result<Self> {
        let dists = crate::util::par_map(corpus.instances(), |inst| model.distributions(inst))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(FrozenDists { dists })
    }
}

/// Lazily filled distribution cache for the retain corpus.
struct LazyDists {
    slots: Vec<Option<Vec<Distribution>>>,
}

impl LazyDists {
    fn new(n: usize) -> Self {
        LazyDists { slots: (0..n).map(|_| None).collect() }
    }

    fn get(&mut self, model: &TextModel, corpus: &crate::data::Corpus, idx: usize) -> Result<&Vec<Distribution>> {
        if self.slots[idx].is_none() {
            self.slots[idx] = Some(model.distributions(corpus.get(idx))?);
        }
        Ok(self.slots[idx].as_ref().unwrap())
    }
}

/// Mean gap between a live model and frozen distributions over a corpus.
fn gap_to_frozen(model: &TextModel, corpus: &crate::data::Corpus, frozen: &FrozenDists) -> Result<f64> {
    let pairs: Vec<(usize, &crate::data::Instance)> = corpus.instances().iter().enumerate().collect();
    let per: Vec<Result<f64>> = crate::util::par_map(&pairs, |(idx, inst)| {
        let live = model.distributions(inst)?;
        let target = &frozen.dists[*idx];
        let total: f64 = live.iter().zip(target).map(|(p, q)| kl_raw(p.probs(), q.probs())).sum();
        Ok(total / live.len() as f64)
    });
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / corpus.len() as f64)
}

/// Knowledge-gap alignment. Starting from a copy of the deployed model,
///every step samples forget/extra instance pairs, drives the per-pair gap
/// `KL(A*‖A_f)` toward the frozen reference gap `KL(A_D‖A_n)`, mixes in
/// `alpha` times the retain-distillation loss, and stops once the mean gap
/// over the forget set is within `sigma` of the initial gap. The deployed
/// model and both helpers are read-only throughout.
pub fn kga_unlearn(
    deployed: &TextModel,
    helpers: &Helpers,
    split: &SplitSet,
    cfg: &UnlearnConfig,
) -> Result<(TextModel, KgaReport)> {
    cfg.validate()?;
    split.check_invariants()?;
    if split.forget.is_empty() || split.extra.is_empty() {
        return Err(Error::Unlearn("alignment needs non-empty forget and extra sets".into()));
    }
    let fp = deployed.support_fingerprint();
    if helpers.forget_model.support_fingerprint() != fp || helpers.extra_model.support_fingerprint() != fp {
        return Err(Error::Unlearn("deployed and helper models do not share an output support".into()));
    }

    let start = Instant::now();
    let mut a_star = deployed.clone();

    // Frozen references. The extra-side gap term is fixed for the whole run.
    let af_on_forget = FrozenDists::compute(&helpers.forget_model, &split.forget)?;
    let ad_on_extra = FrozenDists::compute(deployed, &split.extra)?;
    let an_on_extra = FrozenDists::compute(&helpers.extra_model, &split.extra)?;
    let mut ad_on_retain = LazyDists::new(split.retain.len());

    // Per-extra-instance reference distances KL(A_D ‖ A_n), and their mean.
    let extra_refs: Vec<f64> = ad_on_extra
        .dists
        .iter()
        .zip(&an_on_extra.dists)
        .map(|(ps, qs)| {
            let total: f64 = ps.iter().zip(qs).map(|(p, q)| kl_raw(p.probs(), q.probs())).sum();
            total / ps.len() as f64
        })
        .collect();
    let gap_extra: f64 = extra_refs.iter().sum::<f64>() / extra_refs.len() as f64;

    let gap_forget_initial = gap_to_frozen(deployed, &split.forget, &af_on_forget)?;
    let initial_gap = (gap_extra - gap_forget_initial).abs();
    let threshold = cfg.sigma * initial_gap;

    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::new(cfg.rate).with_schedule(Schedule::InverseSqrt { warmup: cfg.warmup });
    let mut pair_rng = stream_rng(cfg.seed, "kga-pairs", 0);
    let mut retain_rng = stream_rng(cfg.seed, "kga-retain", 0);
    let inputs = Inputs::new();

    let mut trajectory: Vec<(usize, f64)> = Vec::new();
    let mut best: Option<(f64, TextModel)> = None;
    let mut termination = Termination::StepCap;
    let mut final_gap = initial_gap;
    let mut steps_taken = 0;

    'outer: for step in 1..=cfg.max_step {
        let mut grads = GradMap::new();
        let mut loss_total = 0.0;

        // alignment term over sampled (forget, extra) pairs
        let pair_scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let y = pair_rng.gen_range(0..split.forget.len());
            let z = pair_rng.gen_range(0..split.extra.len());
            let mut graph = Graph::new();
            let kl = kl_to_target_loss(&a_star, &mut graph, split.forget.get(y), &af_on_forget.dists[y])?;
            let reference = graph.constant(DenseArray::scalar(extra_refs[z]));
            let diff = graph.sub(kl, reference)?;
            let loss = graph.abs(diff);
            let eval = forward(&graph, a_star.params(), &inputs)?;
            loss_total += eval.value(loss).scalar_value() * pair_scale;
            let g = backward(&graph, &eval, loss, None)?;
            accumulate_grads(&mut grads, &g, pair_scale);
        }

        // retain-distillation term
        let retain_scale = cfg.alpha / (cfg.batch_size * cfg.inner_step) as f64;
        if cfg.alpha > 0.0 && !split.retain.is_empty() {
            for _ in 0..cfg.inner_step {
                for _ in 0..cfg.batch_size {
                    let x = retain_rng.gen_range(0..split.retain.len());
                    let targets = ad_on_retain.get(deployed, &split.retain, x)?.clone();
                    let mut graph = Graph::new();
                    let loss = kl_to_target_loss(&a_star, &mut graph, split.retain.get(x), &targets)?;
                    let eval = forward(&graph, a_star.params(), &inputs)?;
                    loss_total += eval.value(loss).scalar_value() * retain_scale;
                    let g = backward(&graph, &eval, loss, None)?;
                    accumulate_grads(&mut grads, &g, retain_scale);
                }
            }
        }

        if !loss_total.is_finite() {
            return Err(Error::Unlearn(format!("non-finite unlearning loss at step {step}")));
        }
        match adam_step(a_star.params_mut(), &grads, &mut adam, &adam_cfg)? {
            StepOutcome::Applied => steps_taken = step,
            StepOutcome::SkippedNonFinite => continue,
        }

        if step % cfg.valid_step == 0 {
            let gap_forget = gap_to_frozen(&a_star, &split.forget, &af_on_forget)?;
            let current = (gap_extra - gap_forget).abs();
            trajectory.push((step, current));
            if best.as_ref().map_or(true, |(b, _)| current < *b) {
                best = Some((current, a_star.clone()));
            }
            if current <= threshold {
                termination = Termination::GapMet;
                final_gap = current;
                break 'outer;
            }
        }
    }

    if termination == Termination::StepCap {
        // make sure the cap case has at least one measurement, then return
        // the best state seen
        if trajectory.is_empty() {
            let gap_forget = gap_to_frozen(&a_star, &split.forget, &af_on_forget)?;
            let current = (gap_extra - gap_forget).abs();
            trajectory.push((steps_taken, current));
            best = Some((current, a_star.clone()));
        }
        let (gap, model) = best.expect("at least one validation recorded");
        final_gap = gap;
        a_star = model;
    }

    let report = KgaReport {
        initial_gap,
        final_gap,
        sigma: cfg.sigma,
        trajectory,
        steps_taken,
        termination,
        skipped_steps: adam.skipped_count(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((a_star, report))
}

/// Everything a full alignment run produces, with the helper-training cost
/// broken out (helpers are part of the method's bill).
pub struct KgaRun {
    pub model: TextModel,
    pub report: KgaReport,
    pub helpers: Helpers,
    pub helper_seconds: f64,
    pub total_seconds: f64,
}

/// Helper training followed by alignment, timed end to end.
pub fn kga_run(
    deployed: &TextModel,
    split: &SplitSet,
    spec: &ModelSpec,
    vocab: &Arc<Vocabulary>,
    helper_cfg: &HelperConfig,
    cfg: &UnlearnConfig,
) -> Result<KgaRun> {
    let start = Instant::now();
    let (helpers, _, _) = train_helpers(split, spec, vocab, helper_cfg, cfg.seed)?;
    let helper_seconds = start.elapsed().as_secs_f64();
    let (model, report) = kga_unlearn(deployed, &helpers, split, cfg)?;
    Ok(KgaRun { model, report, helpers, helper_seconds, total_seconds: start.elapsed().as_secs_f64() })
}

/// Re-checkable stopping-soundness assertion over a report alone.
pub fn stopping_sound(report: &KgaReport) -> bool {
    match report.termination {
        Termination::GapMet => report.final_gap <= report.sigma * report.initial_gap,
        Termination::StepCap => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{train_supervised, TrainConfig};
    use crate::unlearn::test_support::small_world;
    use crate::unlearn::{mean_gap as corpus_gap, params_identical};

    fn trained_world(seed: u64) -> (TextModel, Helpers, SplitSet, ModelSpec, Arc<Vocabulary>) {
        let (split, spec, vocab) = small_world(60, 10, seed);
        let train_cfg = TrainConfig { max_steps: 220, rate: 6e-3, ..Default::default() };
        let (deployed, _) = train_supervised(&spec, &vocab, &split.full, &train_cfg, seed ^ 0xA5).unwrap();
        let helper_cfg = HelperConfig {
            train: TrainConfig { max_steps: 120, rate: 6e-3, ..Default::default() },
            ..Default::default()
        };
        let (helpers, _, _) = train_helpers(&split, &spec, &vocab, &helper_cfg, seed ^ 0x5A).unwrap();
        (deployed, helpers, split, spec, vocab)
    }

    #[test]
    fn loose_sigma_terminates_at_first_validation() {
        let (deployed, real_helpers, split, _, _) = trained_world(31);
        // With the forget helper equal to the deployed model the initial
        // forget-side gap is exactly zero, so the initial gap equals the
        // extra-side reference and any movement puts the current gap below
        // a near-one sigma at the first validation.
        let helpers = Helpers { forget_model: deployed.clone(), extra_model: real_helpers.extra_model.clone() };
        let cfg = UnlearnConfig {
            sigma: 0.999,
            rate: 5e-3,
            warmup: 1,
            max_step: 50,
            valid_step: 10,
            seed: 1,
            ..Default::default()
        };
        let (_, report) = kga_unlearn(&deployed, &helpers, &split, &cfg).unwrap();
        assert_eq!(report.termination, Termination::GapMet);
        assert_eq!(report.trajectory.len(), 1);
        assert_eq!(report.trajectory[0].0, 10);
        assert!(stopping_sound(&report));
    }

    #[test]
    fn gap_met_implies_threshold_satisfied() {
        let (deployed, helpers, split, _, _) = trained_world(32);
        let cfg = UnlearnConfig { sigma: 0.5, rate: 2e-3, max_step: 400, valid_step: 10, seed: 2, ..Default::default() };
        let (_, report) = kga_unlearn(&deployed, &helpers, &split, &cfg).unwrap();
        if report.termination == Termination::GapMet {
            assert!(report.final_gap <= report.sigma * report.initial_gap);
        }
        assert!(stopping_sound(&report));
        // trajectory is recorded in step order
        assert!(report.trajectory.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn frozen_models_are_untouched_and_report_matches_recomputation() {
        let (deployed, helpers, split, _, _) = trained_world(33);
        let before_d = deployed.clone();
        let before_f = helpers.forget_model.clone();
        let before_n = helpers.extra_model.clone();
        let cfg = UnlearnConfig { sigma: 0.4, rate: 2e-3, max_step: 300, valid_step: 10, seed: 3, ..Default::default() };
        let (a_star, report) = kga_unlearn(&deployed, &helpers, &split, &cfg).unwrap();
        assert!(params_identical(&deployed, &before_d));
        assert!(params_identical(&helpers.forget_model, &before_f));
        assert!(params_identical(&helpers.extra_model, &before_n));

        // recompute the reported final gap from scratch
        let gap_extra = corpus_gap(&deployed, &helpers.extra_model, &split.extra).unwrap();
        let gap_forget = corpus_gap(&a_star, &helpers.forget_model, &split.forget).unwrap();
        let recomputed = (gap_extra - gap_forget).abs();
        assert!((recomputed - report.final_gap).abs() < 1e-9, "{recomputed} vs {}", report.final_gap);
    }

    #[test]
    fn alignment_run_is_deterministic() {
        let (deployed, helpers, split, _, _) = trained_world(34);
        let cfg = UnlearnConfig { sigma: 0.3, rate: 2e-3, max_step: 120, valid_step: 10, seed: 4, ..Default::default() };
        let (a1, r1) = kga_unlearn(&deployed, &helpers, &split, &cfg).unwrap();
        let (a2, r2) = kga_unlearn(&deployed, &helpers, &split, &cfg).unwrap();
        assert!(params_identical(&a1, &a2));
        assert_eq!(r1.trajectory, r2.trajectory);
    }
}
