use crate::data::ForgetSpec;
use crate::error::{Error, Result};
use crate::eval::MiaConfig;
use crate::harness::config::{DataConfig, ExperimentConfig, Method, MetricsConfig, ModelConfig, SynthSizes, TaskKind};
use crate::models::TrainConfig;
use crate::unlearn::{HelperConfig, UnlearnConfig};
use std::path::PathBuf;

/// One sweep point: a label for plots plus a full experiment config.
#[derive(Clone, Debug)]
pub struct Preset {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Typed overrides a caller may apply to every preset config.
#[derive(Clone, Debug, Default)]
pub struct PresetOverrides {
    pub forget_token: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    /// Forget-set sizes for the removal sweep.
    pub removal_counts: Option<Vec<usize>>,
}

fn synth_translation_sizes() -> SynthSizes {
    SynthSizes {
        labels: None,
        per_label: None,
        test_per_label: None,
        extra_per_label: None,
        tokens_per_instance: None,
        cluster_size: None,
        noise: None,
        count: Some(3000),
        test_count: Some(300),
        extra_count: Some(300),
        min_len: Some(3),
        max_len: Some(10),
        swap_pairs: Some(true),
        vocab: Some(50),
    }
}

fn base_translation(out: PathBuf, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskKind::Translation,
        data: DataConfig::Synth { synth: synth_translation_sizes() },
        forget: ForgetSpec::RandomCount { count: 100 },
        model: ModelConfig { arch: "recurrent".into(), embed: 16, hidden: 32 },
        train: TrainConfig { batch_size: 16, rate: 2e-2, warmup: 50, max_steps: 1500 },
        helper: HelperConfig {
            train: TrainConfig { batch_size: 16, rate: 2e-2, warmup: 30, max_steps: 500 },
            augment: true,
            augment_fraction: 0.1,
        },
        unlearn: UnlearnConfig {
            alpha: 0.1,
            sigma: 0.1,
            rate: 2e-3,
            batch_size: 16,
            max_step: 1000,
            inner_step: 1,
            valid_step: 10,
            warmup: 50,
            seed: 0,
        },
        method: Method::Kga,
        shards: 5,
        metrics: MetricsConfig { mia: false, beam_width: 1, generation_sample: 150 },
        mia: MiaConfig::default(),
        out_dir: out,
        seeds,
    }
}

/// The built-in experiment families.
///
/// - `removal-sweep`: forget-set sizes over a growing schedule
/// - `difficulty-sweep`: five score bands of the training set, one config
///   per band (the bands partition the ranked corpus)
/// - `lexical-removal`: forget every instance whose target contains a token
/// - `basemodel-sweep`: recurrent vs self-attention architectures
pub fn preset(name: &str, overrides: &PresetOverrides) -> Result<Vec<Preset>> {
    let seeds = overrides.seeds.clone().unwrap_or_else(|| vec![1]);
    let out_root = overrides.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let mut presets = match name {
        "removal-sweep" => {
            let counts = overrides.removal_counts.clone().unwrap_or_else(|| vec![10, 50, 100, 200]);
            if counts.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("removal counts must strictly increase".into()));
            }
            counts
                .into_iter()
                .map(|count| {
                    let mut config = base_translation(out_root.join(format!("removal-{count}")), seeds.clone());
                    config.forget = ForgetSpec::RandomCount { count };
                    Preset { label: format!("removal-{count}"), config }
                })
                .collect()
        }
        "difficulty-sweep" => (0..5)
            .map(|band| {
                let mut config = base_translation(out_root.join(format!("band-{}", band + 1)), seeds.clone());
                config.forget = ForgetSpec::ScoreBand { band, bands: 5, count: 50 };
                Preset { label: format!("R{}", band + 1), config }
            })
            .collect(),
        "lexical-removal" => {
            let token = overrides.forget_token.clone().unwrap_or_else(|| "t7".to_string());
            let mut config = base_translation(out_root.clone(), seeds);
            config.forget = ForgetSpec::TokenInTarget { token: token.clone() };
            vec![Preset { label: format!("lexical-{token}"), config }]
        }
        "basemodel-sweep" => ["recurrent", "attention"]
            .into_iter()
            .map(|arch| {
                let mut config = base_translation(out_root.join(arch), seeds.clone());
                config.model = ModelConfig { arch: arch.into(), embed: 16, hidden: 32 };
                Preset { label: arch.to_string(), config }
            })
            .collect(),
        other => return Err(Error::Config(format!("unknown preset {other:?}"))),
    };
    for p in presets.iter_mut() {
        p.config.validate()?;
    }
    Ok(presets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removal_sweep_sizes_strictly_increase() {
        let presets = preset("removal-sweep", &PresetOverrides::default()).unwrap();
        assert_eq!(presets.len(), 4);
        let counts: Vec<usize> = presets
            .iter()
            .map(|p| match &p.config.forget {
                ForgetSpec::RandomCount { count } => *count,
                other => panic!("unexpected spec {other:?}"),
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
        let bad = PresetOverrides { removal_counts: Some(vec![50, 50]), ..Default::default() };
        assert!(preset("removal-sweep", &bad).is_err());
    }

    #[test]
    fn difficulty_sweep_produces_five_band_configs() {
        let presets = preset("difficulty-sweep", &PresetOverrides::default()).unwrap();
        assert_eq!(presets.len(), 5);
        for (i, p) in presets.iter().enumerate() {
            match &p.config.forget {
                ForgetSpec::ScoreBand { band, bands, .. } => {
                    assert_eq!(*band, i);
                    assert_eq!(*bands, 5);
                }
                other => panic!("unexpected spec {other:?}"),
            }
        }
    }

    #[test]
    fn lexical_removal_takes_the_token_argument() {
        let ov = PresetOverrides { forget_token: Some("t03".into()), ..Default::default() };
        let presets = preset("lexical-removal", &ov).unwrap();
        assert_eq!(presets.len(), 1);
        assert_eq!(presets[0].config.forget, ForgetSpec::TokenInTarget { token: "t03".into() });
    }

    #[test]
    fn basemodel_sweep_covers_both_families() {
        let presets = preset("basemodel-sweep", &PresetOverrides::default()).unwrap();
        let archs: Vec<&str> = presets.iter().map(|p| p.config.model.arch.as_str()).collect();
        assert_eq!(archs, vec!["recurrent", "attention"]);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(preset("nope", &PresetOverrides::default()).is_err());
    }
}
