use crate::data::SplitSet;
use crate::error::{Error, Result};
use crate::gradkit::{adam_step, backward, forward, AdamConfig, AdamState, GradMap, Graph, Inputs, Schedule, StepOutcome};
use crate::models::{kl_to_target_loss, DiffModel, Distribution, OutputModel, TextModel};
use crate::models::accumulate_grads;
use crate::unlearn::{kl_raw, UnlearnConfig};
use crate::util::{derive_seed, stream_rng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// Trace of a random-teacher run: the mean KL from the student to the
/// frozen random teacher over the forget set, at every validation point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BadtReport {
    pub teacher_kl_trajectory: Vec<(usize, f64)>,
    pub steps_taken: usize,
    /// Volatile; stripped from canonical report bytes.
    #[serde(default)]
    pub wall_seconds: f64,
}

/// Random-teacher unlearning: push the model's forget-set outputs toward a
/// frozen randomly initialized model of the same architecture, while
/// distilling the deployed model on the retained data. Runs for the full
/// step budget (`sigma` is unused — there is no gap to close).
pub fn badt_unlearn(deployed: &TextModel, split: &SplitSet, cfg: &UnlearnConfig) -> Result<(TextModel, BadtReport)> {
    cfg.validate()?;
    if split.forget.is_empty() {
        return Err(Error::Unlearn("random-teacher unlearning needs a non-empty forget set".into()));
    }
    let start = Instant::now();
    let teacher = TextModel::init(&deployed.spec(), Arc::clone(deployed.vocab()), derive_seed(cfg.seed, "badt-teacher", 0))?;
    let mut student = deployed.clone();

    // frozen targets
    let teacher_on_forget: Vec<Vec<Distribution>> =
        split.forget.instances().iter().map(|i| teacher.distributions(i)).collect::<Result<_>>()?;
    let mut deployed_on_retain: Vec<Option<Vec<Distribution>>> = vec![None; split.retain.len()];

    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::new(cfg.rate).with_schedule(Schedule::InverseSqrt { warmup: cfg.warmup });
    let mut forget_rng = stream_rng(cfg.seed, "badt-forget", 0);
    let mut retain_rng = stream_rng(cfg.seed, "badt-retain", 0);
    let inputs = Inputs::new();

    let mut trajectory = Vec::new();
    let mut steps_taken = 0;

    for step in 1..=cfg.max_step {
        let mut grads = GradMap::new();
        let mut loss_total = 0.0;

        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let y = forget_rng.gen_range(0..split.forget.len());
            let mut graph = Graph::new();
            let loss = kl_to_target_loss(&student, &mut graph, split.forget.get(y), &teacher_on_forget[y])?;
            let eval = forward(&graph, student.params(), &inputs)?;
            loss_total += eval.value(loss).scalar_value() * scale;
            let g = backward(&graph, &eval, loss, None)?;
            accumulate_grads(&mut grads, &g, scale);
        }

        if cfg.alpha > 0.0 && !split.retain.is_empty() {
            let retain_scale = cfg.alpha / (cfg.batch_size * cfg.inner_step) as f64;
            for _ in 0..cfg.inner_step {
                for _ in 0..cfg.batch_size {
                    let x = retain_rng.gen_range(0..split.retain.len());
                    if deployed_on_retain[x].is_none() {
                        deployed_on_retain[x] = Some(deployed.distributions(split.retain.get(x))?);
                    }
                    let targets = deployed_on_retain[x].as_ref().unwrap().clone();
                    let mut graph = Graph::new();
                    let loss = kl_to_target_loss(&student, &mut graph, split.retain.get(x), &targets)?;
                    let eval = forward(&graph, student.params(), &inputs)?;
                    loss_total += eval.value(loss).scalar_value() * retain_scale;
                    let g = backward(&graph, &eval, loss, None)?;
                    accumulate_grads(&mut grads, &g, retain_scale);
                }
            }
        }

        if !loss_total.is_finite() {
            return Err(Error::Unlearn(format!("non-finite loss at step {step}")));
        }
        match adam_step(student.params_mut(), &grads, &mut adam, &adam_cfg)? {
            StepOutcome::Applied => steps_taken = step,
            StepOutcome::SkippedNonFinite => continue,
        }

        if step % cfg.valid_step == 0 {
            let mut total = 0.0;
            for (idx, inst) in split.forget.instances().iter().enumerate() {
                let live = student.distributions(inst)?;
                let kl: f64 =
                    live.iter().zip(&teacher_on_forget[idx]).map(|(p, q)| kl_raw(p.probs(), q.probs())).sum::<f64>()
                        / live.len() as f64;
                total += kl;
            }
            trajectory.push((step, total / split.forget.len() as f64));
        }
    }

    let report =
        BadtReport { teacher_kl_trajectory: trajectory, steps_taken, wall_seconds: start.elapsed().as_secs_f64() };
    Ok((student, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitSet;
    use crate::models::{train_supervised, TrainConfig};
    use crate::unlearn::test_support::small_world;

    #[test]
    fn kl_to_random_teacher_decreases_monotonically_when_forgetting_everything() {
        // alpha = 0 and forget = (almost) the whole corpus: the student just
        // distills the random teacher, so the measured KL must fall.
        let (split, spec, vocab) = small_world(30, 5, 51);
        let all_but_one: std::collections::HashSet<&str> =
            split.full.ids().skip(1).collect();
        let split = SplitSet::new(split.full.clone(), &all_but_one, split.extra.clone()).unwrap();
        let train_cfg = TrainConfig { max_steps: 100, rate: 6e-3, ..Default::default() };
        let (deployed, _) = train_supervised(&spec, &vocab, &split.full, &train_cfg, 5).unwrap();
        let cfg = UnlearnConfig { alpha: 0.0, rate: 3e-3, max_step: 60, valid_step: 10, seed: 6, ..Default::default() };
        let (_, report) = badt_unlearn(&deployed, &split, &cfg).unwrap();
        assert_eq!(report.teacher_kl_trajectory.len(), 6);
        for w in report.teacher_kl_trajectory.windows(2) {
            assert!(w[1].1 < w[0].1 + 1e-12, "KL rose from {} to {}", w[0].1, w[1].1);
        }
    }
}
