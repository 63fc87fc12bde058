use crate::error::{Error, Result};
use crate::gradkit::array::DenseArray;
use crate::gradkit::graph::{GradMap, ParamSet};
use std::collections::BTreeMap;

/// Learning-rate schedule applied as a multiplier on the base rate.
#[derive(Clone, Copy, Debug)]
pub enum Schedule {
    Constant,
    /// Linear ramp over `warmup` steps, then decay proportional to
    /// `1/sqrt(step)`, scaled so the multiplier is exactly 1 at `warmup`:
    /// `min(t/w, 1) · sqrt(w / max(t, w))`.
    InverseSqrt { warmup: usize },
}

impl Schedule {
    pub fn multiplier(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::InverseSqrt { warmup } => {
                let w = warmup.max(1) as f64;
                let t = step.max(1) as f64;
                (t / w).min(1.0) * (w / t.max(w)).sqrt()
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub base_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: Schedule,
}

impl AdamConfig {
    pub fn new(base_rate: f64) -> Self {
        AdamConfig {
            base_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule: Schedule::InverseSqrt { warmup: 100 },
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }
}

/// First/second-moment accumulators per parameter plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    first: BTreeMap<String, DenseArray>,
    second: BTreeMap<String, DenseArray>,
    step: usize,
    skipped: usize,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Number of updates skipped because of non-finite gradients.
    pub fn skipped_count(&self) -> usize {
        self.skipped
    }
}

/// Whether an [`adam_step`] applied its update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A non-finite gradient was seen; nothing was mutated except the skip
    /// counter.
    SkippedNonFinite,
}

/// One Adam update with bias correction. Gradients missing from `grads` are
/// treated as zero (moments still decay). Any non-finite gradient entry
/// skips the whole step and flags it.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradMap,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return Err(Error::Shape {
                    context: "adam_step".into(),
                    message: format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                })
            }
            None => return Err(Error::Graph(format!("gradient for unknown parameter {name}"))),
        }
        if !g.all_finite() {
            state.skipped += 1;
            return Ok(StepOutcome::SkippedNonFinite);
        }
    }

    let t = state.step + 1;
    let rate = cfg.base_rate * cfg.schedule.multiplier(t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    for (name, value) in params.iter_mut() {
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| DenseArray::zeros(value.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| DenseArray::zeros(value.shape()));
        debug_assert_eq!(m.shape(), value.shape());
        let zero;
        let g = match grads.get(name) {
            Some(g) => g.data(),
            None => {
                zero = vec![0.0; value.len()];
                &zero
            }
        };
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), value.data_mut());
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    state.step = t;
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", DenseArray::scalar(v));
        p
    }

    fn scalar_grads(g: f64) -> GradMap {
        let mut m = GradMap::new();
        m.insert("x".into(), DenseArray::scalar(g));
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged_and_decays_moments() {
        let mut params = scalar_params(1.5);
        let mut state = AdamState::new();
        let cfg = AdamConfig::new(0.1).with_schedule(Schedule::Constant);
        // seed a nonzero first moment
        adam_step(&mut params, &scalar_grads(1.0), &mut state, &cfg).unwrap();
        let m_before = state.first["x"].data()[0];
        let p_before = params.get("x").unwrap().data()[0];
        adam_step(&mut params, &scalar_grads(0.0), &mut state, &cfg).unwrap();
        let m_after = state.first["x"].data()[0];
        assert!(m_after.abs() < m_before.abs());
        // m_hat is nonzero after one zero-grad step, so the parameter still moves;
        // with a zero gradient from the start it must not move at all.
        let _ = p_before;
        let mut fresh = scalar_params(2.0);
        let mut fresh_state = AdamState::new();
        adam_step(&mut fresh, &scalar_grads(0.0), &mut fresh_state, &cfg).unwrap();
        assert_eq!(fresh.get("x").unwrap().data()[0], 2.0);
        assert_eq!(fresh_state.step_count(), 1);
    }

    #[test]
    fn unit_gradient_without_momentum_moves_by_rate_over_one_plus_eps() {
        // β1 = β2 = 0: m = g, v = g², update = rate · 1/(1+ε)
        let mut params = scalar_params(0.0);
        let mut state = AdamState::new();
        let cfg = AdamConfig {
            base_rate: 0.5,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 1e-8,
            schedule: Schedule::Constant,
        };
        let expect_delta = 0.5 / (1.0 + 1e-8);
        adam_step(&mut params, &scalar_grads(1.0), &mut state, &cfg).unwrap();
        assert!((params.get("x").unwrap().data()[0] + expect_delta).abs() < 1e-15);
        adam_step(&mut params, &scalar_grads(1.0), &mut state, &cfg).unwrap();
        assert!((params.get("x").unwrap().data()[0] + 2.0 * expect_delta).abs() < 1e-15);
    }

    // Independent scalar Adam for cross-checking the composite update.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: usize,
    }

    impl ScalarAdam {
        fn step(&mut self, x: &mut f64, g: f64, rate: f64, b1: f64, b2: f64, eps: f64) {
            self.t += 1;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let mh = self.m / (1.0 - b1.powi(self.t as i32));
            let vh = self.v / (1.0 - b2.powi(self.t as i32));
            *x -= rate * mh / (vh.sqrt() + eps);
        }
    }

    #[test]
    fn two_steps_match_independent_scalar_reimplementation() {
        let mut params = scalar_params(0.7);
        let mut state = AdamState::new();
        let cfg = AdamConfig::new(0.05).with_schedule(Schedule::Constant);

        let mut oracle_x = 0.7;
        let mut oracle = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
        for &g in &[0.3, -1.1] {
            adam_step(&mut params, &scalar_grads(g), &mut state, &cfg).unwrap();
            oracle.step(&mut oracle_x, g, 0.05, 0.9, 0.999, 1e-8);
        }
        let got = params.get("x").unwrap().data()[0];
        assert!((got - oracle_x).abs() < 1e-15, "{got} vs {oracle_x}");
    }

    #[test]
    fn non_finite_gradient_skips_step_and_flags() {
        let mut params = scalar_params(1.0);
        let mut state = AdamState::new();
        let cfg = AdamConfig::new(0.1);
        let out = adam_step(&mut params, &scalar_grads(f64::NAN), &mut state, &cfg).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(params.get("x").unwrap().data()[0], 1.0);
        assert_eq!(state.step_count(), 0);
        assert_eq!(state.skipped_count(), 1);
    }

    #[test]
    fn inverse_sqrt_schedule_ramps_then_decays() {
        let s = Schedule::InverseSqrt { warmup: 100 };
        assert!((s.multiplier(1) - 0.01).abs() < 1e-12);
        assert!((s.multiplier(50) - 0.5).abs() < 1e-12);
        assert!((s.multiplier(100) - 1.0).abs() < 1e-12);
        assert!((s.multiplier(400) - 0.5).abs() < 1e-12);
        // monotone non-increasing after warmup
        assert!(s.multiplier(101) <= 1.0);
        assert!(s.multiplier(200) > s.multiplier(300));
    }
}
