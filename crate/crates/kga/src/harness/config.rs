use crate::data::ForgetSpec;
use crate::error::{Error, Result};
use crate::eval::MiaConfig;
use crate::models::TrainConfig;
use crate::unlearn::{HelperConfig, UnlearnConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Translation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Kga,
    Retrain,
    Sisa,
    Badt,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "kga" => Ok(Method::Kga),
            "retrain" => Ok(Method::Retrain),
            "sisa" => Ok(Method::Sisa),
            "badt" => Ok(Method::Badt),
            other => Err(Error::Config(format!("unknown method {other:?} (want kga|retrain|sisa|badt)"))),
        }
    }
}

/// Where corpora come from: the built-in generators or JSONL files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synth {
        #[serde(flatten)]
        synth: SynthSizes,
    },
    Files {
        train_path: PathBuf,
        test_path: PathBuf,
        extra_path: PathBuf,
    },
}

/// Generator sizes for one experiment; the train/test/extra corpora share
/// every distribution knob and differ only in size and id prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSizes {
    // classification knobs
    pub labels: Option<usize>,
    pub per_label: Option<usize>,
    pub test_per_label: Option<usize>,
    pub extra_per_label: Option<usize>,
    pub tokens_per_instance: Option<usize>,
    pub cluster_size: Option<usize>,
    pub noise: Option<f64>,
    // translation knobs
    pub count: Option<usize>,
    pub test_count: Option<usize>,
    pub extra_count: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub swap_pairs: Option<bool>,
    // shared
    pub vocab: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// classifier | recurrent | attention
    pub arch: String,
    pub embed: usize,
    /// Hidden width (feed-forward width for the attention family).
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Run the membership-inference attack as part of evaluation.
    pub mia: bool,
    /// Beam width for generation metrics (and score-band ranking).
    pub beam_width: usize,
    /// Instances to decode for corpus generation metrics (caps BLEU cost).
    pub generation_sample: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { mia: false, beam_width: 1, generation_sample: 200 }
    }
}

/// Fully resolved experiment description: every stage reads only this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub data: DataConfig,
    pub forget: ForgetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub helper: HelperConfig,
    pub unlearn: UnlearnConfig,
    pub method: Method,
    /// Shard count when `method` is sharded retraining.
    pub shards: usize,
    pub metrics: MetricsConfig,
    pub mia: MiaConfig,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        self.unlearn.validate()?;
        if self.method == Method::Sisa && self.shards == 0 {
            return Err(Error::Config("sisa needs a positive shard count".into()));
        }
        let arch_ok = matches!(self.model.arch.as_str(), "classifier" | "recurrent" | "attention");
        if !arch_ok {
            return Err(Error::Config(format!("unknown arch {:?}", self.model.arch)));
        }
        match (self.task, self.model.arch.as_str()) {
            (TaskKind::Classification, "classifier") => {}
            (TaskKind::Translation, "recurrent" | "attention") => {}
            (task, arch) => return Err(Error::Config(format!("arch {arch:?} does not fit task {task:?}"))),
        }
        if let DataConfig::Files { train_path, test_path, extra_path } = &self.data {
            for p in [train_path, test_path, extra_path] {
                if !p.exists() {
                    return Err(Error::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

// ----- file format -----
// One TOML table per module with flat keys; every CLI flag overrides its
// config key.

#[derive(Deserialize, Default)]
struct RawFile {
    experiment: Option<RawExperiment>,
    data: Option<toml::Table>,
    split: Option<RawSplit>,
    model: Option<RawModel>,
    train: Option<RawTrain>,
    helper: Option<RawHelper>,
    unlearn: Option<RawUnlearn>,
    metrics: Option<RawMetrics>,
    mia: Option<RawMia>,
}

#[derive(Deserialize, Default)]
struct RawExperiment {
    task: Option<String>,
    method: Option<String>,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
}

#[derive(Deserialize, Default)]
struct RawSplit {
    forget: Option<String>,
    count: Option<usize>,
    ids: Option<Vec<String>>,
    token: Option<String>,
    band: Option<usize>,
    bands: Option<usize>,
}

#[derive(Deserialize, Default)]
struct RawModel {
    arch: Option<String>,
    embed: Option<usize>,
    hidden: Option<usize>,
}

#[derive(Deserialize, Default)]
struct RawTrain {
    batch_size: Option<usize>,
    rate: Option<f64>,
    warmup: Option<usize>,
    max_steps: Option<usize>,
}

#[derive(Deserialize, Default)]
struct RawHelper {
    batch_size: Option<usize>,
    rate: Option<f64>,
    warmup: Option<usize>,
    max_steps: Option<usize>,
    augment: Option<bool>,
    augment_fraction: Option<f64>,
}

#[derive(Deserialize, Default)]
struct RawUnlearn {
    alpha: Option<f64>,
    sigma: Option<f64>,
    rate: Option<f64>,
    batch_size: Option<usize>,
    max_step: Option<usize>,
    inner_step: Option<usize>,
    valid_step: Option<usize>,
    warmup: Option<usize>,
    shards: Option<usize>,
}

#[derive(Deserialize, Default)]
struct RawMetrics {
    mia: Option<bool>,
    beam_width: Option<usize>,
    generation_sample: Option<usize>,
}

#[derive(Deserialize, Default)]
struct RawMia {
    shadow_fraction: Option<f64>,
    attack_hidden: Option<usize>,
    attack_steps: Option<usize>,
    attack_rate: Option<f64>,
    top_k: Option<usize>,
}

fn table_get<T: serde::de::DeserializeOwned>(table: &toml::Table, key: &str) -> Result<Option<T>> {
    match table.get(key) {
        None => Ok(None),
        Some(v) => v
            .clone()
            .try_into()
            .map(Some)
            .map_err(|e| Error::Config(format!("bad value for data.{key}: {e}"))),
    }
}

fn parse_data(task: TaskKind, table: Option<&toml::Table>) -> Result<DataConfig> {
    let empty = toml::Table::new();
    let t = table.unwrap_or(&empty);
    let source: String = table_get(t, "source")?.unwrap_or_else(|| "synth".to_string());
    match source.as_str() {
        "files" => {
            let need = |key: &str| -> Result<PathBuf> {
                table_get::<PathBuf>(t, key)?.ok_or_else(|| Error::Config(format!("data.{key} is required with source = \"files\"")))
            };
            Ok(DataConfig::Files { train_path: need("train_path")?, test_path: need("test_path")?, extra_path: need("extra_path")? })
        }
        "synth" => {
            let synth = SynthSizes {
                labels: table_get(t, "labels")?,
                per_label: table_get(t, "per_label")?,
                test_per_label: table_get(t, "test_per_label")?,
                extra_per_label: table_get(t, "extra_per_label")?,
                tokens_per_instance: table_get(t, "tokens_per_instance")?,
                cluster_size: table_get(t, "cluster_size")?,
                noise: table_get(t, "noise")?,
                count: table_get(t, "count")?,
                test_count: table_get(t, "test_count")?,
                extra_count: table_get(t, "extra_count")?,
                min_len: table_get(t, "min_len")?,
                max_len: table_get(t, "max_len")?,
                swap_pairs: table_get(t, "swap_pairs")?,
                vocab: table_get(t, "vocab")?,
            };
            let _ = task;
            Ok(DataConfig::Synth { synth })
        }
        other => Err(Error::Config(format!("unknown data source {other:?}"))),
    }
}

fn parse_forget(raw: Option<RawSplit>) -> Result<ForgetSpec> {
    let raw = raw.unwrap_or_default();
    let kind = raw.forget.unwrap_or_else(|| "random".to_string());
    match kind.as_str() {
        "random" => Ok(ForgetSpec::RandomCount { count: raw.count.unwrap_or(100) }),
        "ids" => Ok(ForgetSpec::Ids { ids: raw.ids.unwrap_or_default() }),
        "token" => {
            let token = raw.token.ok_or_else(|| Error::Config("split.token is required with forget = \"token\"".into()))?;
            Ok(ForgetSpec::TokenInTarget { token })
        }
        "band" => Ok(ForgetSpec::ScoreBand {
            band: raw.band.unwrap_or(0),
            bands: raw.bands.unwrap_or(5),
            count: raw.count.unwrap_or(50),
        }),
        other => Err(Error::Config(format!("unknown forget kind {other:?}"))),
    }
}

/// Command-line values that override their config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub forget_count: Option<usize>,
    pub forget_token: Option<String>,
    pub out_dir: Option<PathBuf>,
}

/// Parses a config file and applies CLI overrides.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let raw: RawFile = toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    let exp = raw.experiment.unwrap_or_default();

    let task = match exp.task.as_deref() {
        Some("classification") | None => TaskKind::Classification,
        Some("translation") => TaskKind::Translation,
        Some(other) => return Err(Error::Config(format!("unknown task {other:?}"))),
    };
    let data = parse_data(task, raw.data.as_ref())?;
    let mut forget = parse_forget(raw.split)?;

    let m = raw.model.unwrap_or_default();
    let default_arch = match task {
        TaskKind::Classification => "classifier",
        TaskKind::Translation => "recurrent",
    };
    let model = ModelConfig {
        arch: m.arch.unwrap_or_else(|| default_arch.to_string()),
        embed: m.embed.unwrap_or(16),
        hidden: m.hidden.unwrap_or(32),
    };

    let t = raw.train.unwrap_or_default();
    let train = TrainConfig {
        batch_size: t.batch_size.unwrap_or(16),
        rate: t.rate.unwrap_or(5e-3),
        warmup: t.warmup.unwrap_or(50),
        max_steps: t.max_steps.unwrap_or(600),
    };

    let h = raw.helper.unwrap_or_default();
    let helper = HelperConfig {
        train: TrainConfig {
            batch_size: h.batch_size.unwrap_or(train.batch_size),
            rate: h.rate.unwrap_or(train.rate),
            warmup: h.warmup.unwrap_or(train.warmup),
            max_steps: h.max_steps.unwrap_or(train.max_steps / 2),
        },
        augment: h.augment.unwrap_or(true),
        augment_fraction: h.augment_fraction.unwrap_or(0.1),
    };

    let u = raw.unlearn.unwrap_or_default();
    let unlearn = UnlearnConfig {
        alpha: u.alpha.unwrap_or(0.1),
        sigma: u.sigma.unwrap_or(0.1),
        rate: u.rate.unwrap_or(5e-5),
        batch_size: u.batch_size.unwrap_or(16),
        max_step: u.max_step.unwrap_or(2000),
        inner_step: u.inner_step.unwrap_or(1),
        valid_step: u.valid_step.unwrap_or(10),
        warmup: u.warmup.unwrap_or(100),
        seed: 0, // overwritten per run seed
    };

    let me = raw.metrics.unwrap_or_default();
    let metrics = MetricsConfig {
        mia: me.mia.unwrap_or(false),
        beam_width: me.beam_width.unwrap_or(1),
        generation_sample: me.generation_sample.unwrap_or(200),
    };

    let mi = raw.mia.unwrap_or_default();
    let mia = MiaConfig {
        shadow_fraction: mi.shadow_fraction.unwrap_or(0.3),
        shadow_train: train,
        attack_hidden: mi.attack_hidden.unwrap_or(16),
        attack_steps: mi.attack_steps.unwrap_or(400),
        attack_rate: mi.attack_rate.unwrap_or(5e-3),
        top_k: mi.top_k.unwrap_or(5),
        seed: 0,
    };

    let mut method = match exp.method.as_deref() {
        Some(s) => s.parse()?,
        None => Method::Kga,
    };
    let mut out_dir = exp.out.unwrap_or_else(|| PathBuf::from("runs/experiment"));
    let mut seeds = exp.seeds.unwrap_or_else(|| vec![1]);

    // CLI overrides
    if let Some(s) = overrides.seed {
        seeds = vec![s];
    }
    if let Some(m) = overrides.method {
        method = m;
    }
    if let Some(count) = overrides.forget_count {
        forget = match forget {
            ForgetSpec::ScoreBand { band, bands, .. } => ForgetSpec::ScoreBand { band, bands, count },
            _ => ForgetSpec::RandomCount { count },
        };
    }
    if let Some(tok) = &overrides.forget_token {
        forget = ForgetSpec::TokenInTarget { token: tok.clone() };
    }
    if let Some(dir) = &overrides.out_dir {
        out_dir = dir.clone();
    }

    let config = ExperimentConfig {
        task,
        data,
        forget,
        model,
        train,
        helper,
        unlearn,
        method,
        shards: u.shards.unwrap_or(5),
        metrics,
        mia,
        out_dir,
        seeds,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[experiment]
task = "classification"
method = "kga"
seeds = [1, 2]
out = "runs/demo"

[data]
source = "synth"
labels = 2
per_label = 50

[split]
forget = "random"
count = 10

[model]
embed = 8
hidden = 12

[train]
max_steps = 100
rate = 0.005

[unlearn]
sigma = 0.2
shards = 3
"#;

    #[test]
    fn parses_and_applies_defaults() {
        let cfg = parse_config(SAMPLE, &Overrides::default()).unwrap();
        assert_eq!(cfg.task, TaskKind::Classification);
        assert_eq!(cfg.method, Method::Kga);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.forget, ForgetSpec::RandomCount { count: 10 });
        assert_eq!(cfg.unlearn.sigma, 0.2);
        assert_eq!(cfg.unlearn.alpha, 0.1);
        assert_eq!(cfg.shards, 3);
        assert_eq!(cfg.model.arch, "classifier");
    }

    #[test]
    fn cli_flags_override_config_keys() {
        let ov = Overrides {
            seed: Some(9),
            method: Some(Method::Badt),
            forget_count: Some(33),
            forget_token: None,
            out_dir: Some(PathBuf::from("elsewhere")),
        };
        let cfg = parse_config(SAMPLE, &ov).unwrap();
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.method, Method::Badt);
        assert_eq!(cfg.forget, ForgetSpec::RandomCount { count: 33 });
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(parse_config("[experiment]\ntask = \"poetry\"\n", &Overrides::default()).is_err());
        assert!(parse_config("[unlearn]\nsigma = 2.0\n", &Overrides::default()).is_err());
        let err = parse_config("not toml at all [", &Overrides::default()).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn translation_task_defaults_to_recurrent_arch() {
        let cfg = parse_config("[experiment]\ntask = \"translation\"\n", &Overrides::default()).unwrap();
        assert_eq!(cfg.model.arch, "recurrent");
    }
}
