use crate::data::{
    load_corpus, partition, save_corpus, synth_classification, synth_translation, Corpus, CorpusKind, ForgetSpec,
    ScoreMap, SplitManifest, SplitSet, SynthClassCfg, SynthTransCfg,
};
use crate::error::{Error, Result};
use crate::eval::{
    bleu4_single, build_attack_dataset, corpus_perplexity, evaluate_attack, micro_f1, model_jsd, model_lpd, pdlp,
    train_attack_classifier, AttackClassifier, MiaConfig,
};
use crate::harness::config::{DataConfig, ExperimentConfig, Method, TaskKind};
use crate::harness::report::{
    emit_report, MetricsReport, ModelRole, ReportBundle, ReportFormat, SeedOutcome, SeedRow, SplitMetrics,
};
use crate::models::{
    beam_generate, load_model, save_model, train_supervised, ModelSpec, OutputModel, TextModel, Vocabulary,
};
use crate::unlearn::{
    badt_unlearn, kga_run, retrain, sisa_forget, sisa_train, BadtReport, KgaReport, ShardedModel, UnlearnConfig,
};
use crate::util::{atomic_write, derive_seed, stream_rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Train/test/extra corpora for one seed.
pub struct Corpora {
    pub train: Corpus,
    pub test: Corpus,
    pub extra_pool: Corpus,
}

/// Builds (or loads) the corpora for a seed. Synthetic corpora share all
/// distribution knobs and differ only in size, id prefix, and stream.
pub fn build_corpora(config: &ExperimentConfig, seed: u64) -> Result<Corpora> {
    match (&config.data, config.task) {
        (DataConfig::Files { train_path, test_path, extra_path }, task) => {
            let kind = match task {
                TaskKind::Classification => CorpusKind::Classification,
                TaskKind::Translation => CorpusKind::Seq2Seq,
            };
            Ok(Corpora {
                train: load_corpus(train_path, kind)?,
                test: load_corpus(test_path, kind)?,
                extra_pool: load_corpus(extra_path, kind)?,
            })
        }
        (DataConfig::Synth { synth }, TaskKind::Classification) => {
            let base = SynthClassCfg {
                labels: synth.labels.unwrap_or(4),
                per_label: synth.per_label.unwrap_or(1250),
                vocab: synth.vocab.unwrap_or(120),
                tokens_per_instance: synth.tokens_per_instance.unwrap_or(8),
                cluster_size: synth.cluster_size.unwrap_or(6),
                noise: synth.noise.unwrap_or(0.5),
                id_prefix: "d".into(),
            };
            let test_cfg = SynthClassCfg {
                per_label: synth.test_per_label.unwrap_or(base.per_label / 5),
                id_prefix: "t".into(),
                ..base.clone()
            };
            let extra_cfg = SynthClassCfg {
                per_label: synth.extra_per_label.unwrap_or(50),
                id_prefix: "n".into(),
                ..base.clone()
            };
            Ok(Corpora {
                train: synth_classification(&base, derive_seed(seed, "data-train", 0))?,
                test: synth_classification(&test_cfg, derive_seed(seed, "data-test", 0))?,
                extra_pool: synth_classification(&extra_cfg, derive_seed(seed, "data-extra", 0))?,
            })
        }
        (DataConfig::Synth { synth }, TaskKind::Translation) => {
            let base = SynthTransCfg {
                vocab: synth.vocab.unwrap_or(50),
                count: synth.count.unwrap_or(3000),
                min_len: synth.min_len.unwrap_or(3),
                max_len: synth.max_len.unwrap_or(10),
                swap_pairs: synth.swap_pairs.unwrap_or(true),
                id_prefix: "d".into(),
            };
            let test_cfg =
                SynthTransCfg { count: synth.test_count.unwrap_or(base.count / 10), id_prefix: "t".into(), ..base.clone() };
            let extra_cfg =
                SynthTransCfg { count: synth.extra_count.unwrap_or(300), id_prefix: "n".into(), ..base.clone() };
            Ok(Corpora {
                train: synth_translation(&base, derive_seed(seed, "data-train", 0))?,
                test: synth_translation(&test_cfg, derive_seed(seed, "data-test", 0))?,
                extra_pool: synth_translation(&extra_cfg, derive_seed(seed, "data-extra", 0))?,
            })
        }
    }
}

/// Architecture for the configured model over a concrete corpus.
pub fn resolve_arch(config: &ExperimentConfig, train: &Corpus) -> Result<ModelSpec> {
    match config.model.arch.as_str() {
        "classifier" => {
            let mut labels = train.labels();
            labels.sort();
            Ok(ModelSpec::Classifier { embed: config.model.embed, hidden: config.model.hidden, labels })
        }
        "recurrent" => Ok(ModelSpec::Recurrent { embed: config.model.embed, hidden: config.model.hidden }),
        "attention" => Ok(ModelSpec::SelfAttention { embed: config.model.embed, ff: config.model.hidden }),
        other => Err(Error::Config(format!("unknown arch {other:?}"))),
    }
}

/// Either a plain model or a shard ensemble in the unlearned slot.
pub enum UnlearnedModel {
    Plain(TextModel),
    Sharded(ShardedModel),
}

impl UnlearnedModel {
    pub fn as_output(&self) -> &dyn OutputModel {
        match self {
            UnlearnedModel::Plain(m) => m,
            UnlearnedModel::Sharded(m) => m,
        }
    }
}

/// Per-instance generation scores of a model over a corpus (used by the
/// score-band forget selection).
pub fn generation_scores(model: &TextModel, corpus: &Corpus, beam_width: usize) -> Result<ScoreMap> {
    let seq = model.as_seq2seq()?;
    let mut scores = ScoreMap::new();
    for inst in corpus.instances() {
        let cand = beam_generate(seq, &inst.input_tokens(), beam_width)?;
        let reference: Vec<String> = inst.target_tokens().iter().map(|s| s.to_string()).collect();
        let value = bleu4_single(&[cand], &[reference])?;
        scores.insert(inst.id.clone(), value);
    }
    Ok(scores)
}

fn generation_slice(corpus: &Corpus, cap: usize) -> Result<Corpus> {
    if corpus.len() <= cap {
        return Ok(corpus.clone());
    }
    let keep: HashSet<&str> = corpus.instances().iter().take(cap).map(|i| i.id.as_str()).collect();
    corpus.subset(&keep, "generation sample")
}

enum BeamSource<'a> {
    Plain(&'a TextModel),
    Sharded(&'a ShardedModel),
}

impl BeamSource<'_> {
    fn generate(&self, source: &[&str], width: usize) -> Result<Vec<String>> {
        match self {
            BeamSource::Plain(m) => beam_generate(m.as_seq2seq()?, source, width),
            BeamSource::Sharded(m) => m.beam_generate(source, width),
        }
    }
}

fn split_metrics(
    model: &dyn OutputModel,
    beam: &BeamSource,
    original: &dyn OutputModel,
    oracle: &dyn OutputModel,
    corpus: &Corpus,
    task: TaskKind,
    beam_width: usize,
    generation_cap: usize,
) -> Result<SplitMetrics> {
    let mut out = SplitMetrics::default();
    match task {
        TaskKind::Classification => {
            out.task_metric = "micro_f1".into();
            let mut preds = Vec::with_capacity(corpus.len());
            let mut golds = Vec::with_capacity(corpus.len());
            for inst in corpus.instances() {
                let dists = model.distributions(inst)?;
                let gold = model.gold_ids(inst)?;
                preds.push(dists[0].argmax().to_string());
                golds.push(gold[0].to_string());
            }
            out.task_value = micro_f1(&preds, &golds)?;
        }
        TaskKind::Translation => {
            out.task_metric = "bleu4".into();
            let sample = generation_slice(corpus, generation_cap)?;
            let mut cands = Vec::with_capacity(sample.len());
            let mut refs = Vec::with_capacity(sample.len());
            for inst in sample.instances() {
                cands.push(beam.generate(&inst.input_tokens(), beam_width)?);
                refs.push(inst.target_tokens().iter().map(|s| s.to_string()).collect::<Vec<String>>());
            }
            out.task_value = bleu4_single(&cands, &refs)?;
            out.perplexity = Some(corpus_perplexity(model, corpus)?);
        }
    }
    out.jsd_to_retrain = Some(model_jsd(model, oracle, corpus)?);
    out.lpd_to_retrain = Some(model_lpd(model, oracle, corpus)?);
    out.pdlp_vs_original = Some(pdlp(model, original, corpus)?);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_role(
    model: &dyn OutputModel,
    beam: &BeamSource,
    original: &dyn OutputModel,
    oracle: &dyn OutputModel,
    test: &Corpus,
    forget: &Corpus,
    config: &ExperimentConfig,
    attacker: Option<(&AttackClassifier, &Corpus, &Corpus)>,
) -> Result<MetricsReport> {
    let mut report = MetricsReport {
        test: split_metrics(
            model,
            beam,
            original,
            oracle,
            test,
            config.task,
            config.metrics.beam_width,
            config.metrics.generation_sample,
        )?,
        forget: split_metrics(
            model,
            beam,
            original,
            oracle,
            forget,
            config.task,
            config.metrics.beam_width,
            config.metrics.generation_sample,
        )?,
    };
    if let Some((attacker, members, nonmembers)) = attacker {
        let outcome = evaluate_attack(attacker, model, members, nonmembers, config.mia.top_k)?;
        report.forget.set_attack(outcome);
    }
    Ok(report)
}

/// Everything one seed produced, before reduction into the report bundle.
pub struct SeedArtifacts {
    pub vocab: Arc<Vocabulary>,
    pub arch: ModelSpec,
    pub corpora: Corpora,
    pub split: SplitSet,
    pub original: TextModel,
    pub oracle: TextModel,
    pub unlearned: UnlearnedModel,
    pub kga: Option<KgaReport>,
    pub badt: Option<BadtReport>,
    pub reports: BTreeMap<ModelRole, MetricsReport>,
    pub timings: BTreeMap<String, f64>,
}

fn time<T>(timings: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
    Ok(out)
}

/// Runs the full pipeline for one seed: corpora → vocabulary → original
/// model → (scores) → split → retraining oracle → configured method →
/// metrics.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let mut timings = BTreeMap::new();

    let corpora = time(&mut timings, "data", || build_corpora(config, derive_seed(seed, "data", 0)))?;
    let vocab = Arc::new(Vocabulary::from_corpora(&[&corpora.train, &corpora.extra_pool], 1));
    let arch = resolve_arch(config, &corpora.train)?;

    let original = time(&mut timings, "train_original", || {
        let (model, record) =
            train_supervised(&arch, &vocab, &corpora.train, &config.train, derive_seed(seed, "train", 0))?;
        if record.diverged {
            return Err(Error::Model("original training diverged".into()));
        }
        Ok(model)
    })?;

    let scores = match &config.forget {
        ForgetSpec::ScoreBand { .. } => Some(time(&mut timings, "score_ranking", || {
            generation_scores(&original, &corpora.train, config.metrics.beam_width)
        })?),
        _ => None,
    };
    let split = partition(&corpora.train, &config.forget, scores.as_ref(), &corpora.extra_pool, derive_seed(seed, "split", 0))?;

    let oracle = time(&mut timings, "retrain_oracle", || {
        let (model, record) = retrain(&split, &arch, &vocab, &config.train, derive_seed(seed, "retrain", 0))?;
        if record.diverged {
            return Err(Error::Model("oracle retraining diverged".into()));
        }
        Ok(model)
    })?;

    let mut kga_report = None;
    let mut badt_report = None;
    let unlearn_cfg = UnlearnConfig { seed: derive_seed(seed, "unlearn", 0), ..config.unlearn };
    let unlearned = match config.method {
        Method::Kga => {
            let run = time(&mut timings, "unlearn", || {
                kga_run(&original, &split, &arch, &vocab, &config.helper, &unlearn_cfg)
            })?;
            timings.insert("unlearn_helpers".into(), run.helper_seconds);
            kga_report = Some(run.report.clone());
            UnlearnedModel::Plain(run.model)
        }
        Method::Retrain => {
            timings.insert("unlearn".into(), *timings.get("retrain_oracle").unwrap_or(&0.0));
            UnlearnedModel::Plain(oracle.clone())
        }
        Method::Badt => {
            let (model, report) = time(&mut timings, "unlearn", || badt_unlearn(&original, &split, &unlearn_cfg))?;
            badt_report = Some(report);
            UnlearnedModel::Plain(model)
        }
        Method::Sisa => {
            let sharded = time(&mut timings, "sisa_initial_train", || {
                sisa_train(&split.full, &arch, &vocab, &config.train, config.shards, derive_seed(seed, "sisa", 0))
            })?;
            let forget_ids: HashSet<String> = split.forget.ids().map(str::to_string).collect();
            let after =
                time(&mut timings, "unlearn", || sisa_forget(&sharded, &split.full, &vocab, &forget_ids))?;
            UnlearnedModel::Sharded(after)
        }
    };

    // membership-inference attacker, shared across roles
    let attacker_parts: Option<(AttackClassifier, Corpus)> = if config.metrics.mia {
        Some(time(&mut timings, "mia_setup", || {
            let mia_cfg = MiaConfig { seed: derive_seed(seed, "mia", 0), ..config.mia.clone() };
            let attacker = build_attacker(&corpora.train, &arch, &vocab, &mia_cfg)?;
            let nonmembers = attack_nonmembers(&corpora.test, split.forget.len(), derive_seed(seed, "mia-eval", 0))?;
            Ok((attacker, nonmembers))
        })?)
    } else {
        None
    };

    let reports = time(&mut timings, "evaluate", || {
        let mut reports = BTreeMap::new();
        for role in [ModelRole::Original, ModelRole::Unlearned, ModelRole::Retrain] {
            let (model, beam): (&dyn OutputModel, BeamSource) = match (role, &unlearned) {
                (ModelRole::Original, _) => (&original, BeamSource::Plain(&original)),
                (ModelRole::Retrain, _) => (&oracle, BeamSource::Plain(&oracle)),
                (ModelRole::Unlearned, UnlearnedModel::Plain(m)) => (m, BeamSource::Plain(m)),
                (ModelRole::Unlearned, UnlearnedModel::Sharded(m)) => (m, BeamSource::Sharded(m)),
            };
            let attacker = attacker_parts.as_ref().map(|(a, nonmembers)| (a, &split.forget, nonmembers));
            let report = evaluate_role(model, &beam, &original, &oracle, &corpora.test, &split.forget, config, attacker)?;
            reports.insert(role, report);
        }
        Ok(reports)
    })?;

    Ok(SeedArtifacts {
        vocab,
        arch,
        corpora,
        split,
        original,
        oracle,
        unlearned,
        kga: kga_report,
        badt: badt_report,
        reports,
        timings,
    })
}

/// Shadow-model training plus attack-classifier training (the expensive,
/// target-independent part of the attack).
pub fn build_attacker(
    train_corpus: &Corpus,
    arch: &ModelSpec,
    vocab: &Arc<Vocabulary>,
    cfg: &MiaConfig,
) -> Result<AttackClassifier> {
    let mut idx: Vec<usize> = (0..train_corpus.len()).collect();
    let mut rng = stream_rng(cfg.seed, "shadow-split", 0);
    idx.shuffle(&mut rng);
    let cut = ((train_corpus.len() as f64) * cfg.shadow_fraction).floor() as usize;
    if cut == 0 || cut >= train_corpus.len() {
        return Err(Error::Config("shadow fraction leaves an empty side".into()));
    }
    let shadow_ids: HashSet<&str> = idx[..cut].iter().map(|&i| train_corpus.get(i).id.as_str()).collect();
    let shadow_members = train_corpus.subset(&shadow_ids, "shadow members")?;
    let shadow_nonmembers = train_corpus.without(&shadow_ids, "shadow nonmembers")?;
    let (shadow, record) =
        train_supervised(arch, vocab, &shadow_members, &cfg.shadow_train, derive_seed(cfg.seed, "shadow-train", 0))?;
    if record.diverged {
        return Err(Error::Metric("shadow-model training diverged".into()));
    }
    let data = build_attack_dataset(&shadow, &shadow_members, &shadow_nonmembers, cfg.top_k, cfg.seed)?;
    train_attack_classifier(&data, cfg)
}

/// Seeded nonmember sample for attack evaluation, size-matched to the
/// member corpus.
pub fn attack_nonmembers(test: &Corpus, member_count: usize, seed: u64) -> Result<Corpus> {
    let take = member_count.min(test.len()).max(1);
    let mut idx: Vec<usize> = (0..test.len()).collect();
    let mut rng = stream_rng(seed, "attack-nonmembers", 0);
    idx.shuffle(&mut rng);
    idx.truncate(take);
    let keep: HashSet<&str> = idx.iter().map(|&i| test.get(i).id.as_str()).collect();
    test.subset(&keep, "attack nonmembers")
}

// ----- persistence -----

#[derive(Serialize, Deserialize)]
struct ShardManifest {
    assignment: Vec<Vec<String>>,
    shard_seeds: Vec<u64>,
    spec: ModelSpec,
    train_cfg: crate::models::TrainConfig,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Writes every artifact a seed produced: corpora, vocabulary, split
/// manifest, checkpoints, and method reports.
pub fn persist_seed(config: &ExperimentConfig, seed: u64, artifacts: &SeedArtifacts) -> Result<()> {
    let dir = seed_dir(&config.out_dir, seed);
    std::fs::create_dir_all(&dir)?;
    save_corpus(&artifacts.corpora.train, &dir.join("train.jsonl"))?;
    save_corpus(&artifacts.corpora.test, &dir.join("test.jsonl"))?;
    save_corpus(&artifacts.split.extra, &dir.join("extra.jsonl"))?;
    artifacts.vocab.save(&dir.join("vocab.json"))?;

    let manifest = SplitManifest {
        forget_ids: artifacts.split.forget.ids().map(str::to_string).collect(),
        extra_path: "extra.jsonl".into(),
        seed,
        spec: config.forget.clone(),
    };
    atomic_write(&dir.join("split.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    save_model(&artifacts.original, &dir.join("original.kgac"))?;
    save_model(&artifacts.oracle, &dir.join("retrain.kgac"))?;
    match &artifacts.unlearned {
        UnlearnedModel::Plain(model) => save_model(model, &dir.join("unlearned.kgac"))?,
        UnlearnedModel::Sharded(sharded) => {
            let sisa_dir = dir.join("sisa");
            std::fs::create_dir_all(&sisa_dir)?;
            let manifest = ShardManifest {
                assignment: sharded.assignment().to_vec(),
                shard_seeds: sharded.shard_seeds().to_vec(),
                spec: sharded.spec().clone(),
                train_cfg: *sharded.train_cfg(),
            };
            atomic_write(&sisa_dir.join("assignment.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
            for i in 0..sharded.shard_count() {
                save_model(sharded.shard_model(i), &sisa_dir.join(format!("shard-{i}.kgac")))?;
            }
        }
    }
    if let Some(report) = &artifacts.kga {
        atomic_write(&dir.join("kga_report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    }
    if let Some(report) = &artifacts.badt {
        atomic_write(&dir.join("badt_report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    }
    Ok(())
}

/// Loads what [`persist_seed`] wrote, rebuilding the split and models.
pub struct LoadedSeed {
    pub vocab: Arc<Vocabulary>,
    pub split: SplitSet,
    pub test: Corpus,
    pub original: TextModel,
    pub oracle: TextModel,
    pub unlearned: UnlearnedModel,
    pub kga: Option<KgaReport>,
    pub badt: Option<BadtReport>,
}

pub fn load_seed(config: &ExperimentConfig, seed: u64) -> Result<LoadedSeed> {
    let dir = seed_dir(&config.out_dir, seed);
    let kind = match config.task {
        TaskKind::Classification => CorpusKind::Classification,
        TaskKind::Translation => CorpusKind::Seq2Seq,
    };
    let train = load_corpus(&dir.join("train.jsonl"), kind)?;
    let test = load_corpus(&dir.join("test.jsonl"), kind)?;
    let extra = load_corpus(&dir.join("extra.jsonl"), kind)?;
    let vocab = Arc::new(Vocabulary::load(&dir.join("vocab.json"))?);
    let manifest: SplitManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("split.json"))?)?;
    let forget_ids: HashSet<&str> = manifest.forget_ids.iter().map(String::as_str).collect();
    let split = SplitSet::new(train, &forget_ids, extra)?;

    let original = load_model(&dir.join("original.kgac"), Arc::clone(&vocab))?;
    let oracle = load_model(&dir.join("retrain.kgac"), Arc::clone(&vocab))?;
    let unlearned = if dir.join("unlearned.kgac").exists() {
        UnlearnedModel::Plain(load_model(&dir.join("unlearned.kgac"), Arc::clone(&vocab))?)
    } else {
        let sisa_dir = dir.join("sisa");
        let manifest: ShardManifest =
            serde_json::from_str(&std::fs::read_to_string(sisa_dir.join("assignment.json"))?)?;
        let mut models = Vec::with_capacity(manifest.shard_seeds.len());
        for i in 0..manifest.shard_seeds.len() {
            models.push(load_model(&sisa_dir.join(format!("shard-{i}.kgac")), Arc::clone(&vocab))?);
        }
        UnlearnedModel::Sharded(ShardedModel::from_parts(
            manifest.assignment,
            models,
            manifest.shard_seeds,
            manifest.spec,
            manifest.train_cfg,
        )?)
    };
    let kga = match std::fs::read_to_string(dir.join("kga_report.json")) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let badt = match std::fs::read_to_string(dir.join("badt_report.json")) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    Ok(LoadedSeed { vocab, split, test, original, oracle, unlearned, kga, badt })
}

/// Runs every configured seed, persisting artifacts and recording failures
/// per seed without aborting the rest, then writes the report files.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportBundle> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let row = match run_seed(config, seed) {
            Ok(artifacts) => {
                persist_seed(config, seed, &artifacts)?;
                SeedRow {
                    seed,
                    outcome: SeedOutcome::Ok {
                        reports: artifacts.reports,
                        kga: artifacts.kga,
                        badt: artifacts.badt,
                    },
                    timings: artifacts.timings,
                }
            }
            Err(err) => SeedRow {
                seed,
                outcome: SeedOutcome::Error { message: err.to_string() },
                timings: BTreeMap::new(),
            },
        };
        rows.push(row);
    }
    let bundle = ReportBundle { config: config.clone(), rows };
    emit_report(&bundle, &[ReportFormat::Json, ReportFormat::Csv, ReportFormat::Plot], &config.out_dir)?;
    Ok(bundle)
}

/// Recomputes all metrics from persisted artifacts (no training), writing a
/// fresh report. `stage re-run` counterpart of [`run_experiment`].
pub fn evaluate_run(config: &ExperimentConfig) -> Result<ReportBundle> {
    let mut rows = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let row = match evaluate_seed(config, seed) {
            Ok((reports, kga, badt)) => SeedRow {
                seed,
                outcome: SeedOutcome::Ok { reports, kga, badt },
                timings: BTreeMap::new(),
            },
            Err(err) => SeedRow { seed, outcome: SeedOutcome::Error { message: err.to_string() }, timings: BTreeMap::new() },
        };
        rows.push(row);
    }
    let bundle = ReportBundle { config: config.clone(), rows };
    emit_report(&bundle, &[ReportFormat::Json, ReportFormat::Csv, ReportFormat::Plot], &config.out_dir)?;
    Ok(bundle)
}

type SeedReports = (BTreeMap<ModelRole, MetricsReport>, Option<KgaReport>, Option<BadtReport>);

fn evaluate_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedReports> {
    let loaded = load_seed(config, seed)?;
    let attacker_parts = if config.metrics.mia {
        let mia_cfg = MiaConfig { seed: derive_seed(seed, "mia", 0), ..config.mia.clone() };
        let arch = loaded.original.spec();
        let attacker = build_attacker(&loaded.split.full, &arch, &loaded.vocab, &mia_cfg)?;
        let nonmembers = attack_nonmembers(&loaded.test, loaded.split.forget.len(), derive_seed(seed, "mia-eval", 0))?;
        Some((attacker, nonmembers))
    } else {
        None
    };
    let mut reports = BTreeMap::new();
    for role in [ModelRole::Original, ModelRole::Unlearned, ModelRole::Retrain] {
        let (model, beam): (&dyn OutputModel, BeamSource) = match (role, &loaded.unlearned) {
            (ModelRole::Original, _) => (&loaded.original, BeamSource::Plain(&loaded.original)),
            (ModelRole::Retrain, _) => (&loaded.oracle, BeamSource::Plain(&loaded.oracle)),
            (ModelRole::Unlearned, UnlearnedModel::Plain(m)) => (m, BeamSource::Plain(m)),
            (ModelRole::Unlearned, UnlearnedModel::Sharded(m)) => (m, BeamSource::Sharded(m)),
        };
        let attacker = attacker_parts.as_ref().map(|(a, nonmembers)| (a, &loaded.split.forget, nonmembers));
        let report = evaluate_role(
            model,
            &beam,
            &loaded.original,
            &loaded.oracle,
            &loaded.test,
            &loaded.split.forget,
            config,
            attacker,
        )?;
        reports.insert(role, report);
    }
    Ok((reports, loaded.kga, loaded.badt))
}

/// Runs the attack against persisted models only, returning one row per
/// role. Used by the attack subcommand.
pub fn mia_over_run(config: &ExperimentConfig) -> Result<BTreeMap<u64, BTreeMap<ModelRole, crate::eval::MiaOutcome>>> {
    let mut out = BTreeMap::new();
    for &seed in &config.seeds {
        let loaded = load_seed(config, seed)?;
        let mia_cfg = MiaConfig { seed: derive_seed(seed, "mia", 0), ..config.mia.clone() };
        let arch = loaded.original.spec();
        let attacker = build_attacker(&loaded.split.full, &arch, &loaded.vocab, &mia_cfg)?;
        let nonmembers = attack_nonmembers(&loaded.test, loaded.split.forget.len(), derive_seed(seed, "mia-eval", 0))?;
        let mut per_role = BTreeMap::new();
        for role in [ModelRole::Original, ModelRole::Unlearned, ModelRole::Retrain] {
            let model: &dyn OutputModel = match (role, &loaded.unlearned) {
                (ModelRole::Original, _) => &loaded.original,
                (ModelRole::Retrain, _) => &loaded.oracle,
                (ModelRole::Unlearned, UnlearnedModel::Plain(m)) => m,
                (ModelRole::Unlearned, UnlearnedModel::Sharded(m)) => m,
            };
            let outcome = evaluate_attack(&attacker, model, &loaded.split.forget, &nonmembers, mia_cfg.top_k)?;
            per_role.insert(role, outcome);
        }
        let dir = seed_dir(&config.out_dir, seed);
        atomic_write(&dir.join("mia.json"), serde_json::to_string_pretty(&per_role)?.as_bytes())?;
        out.insert(seed, per_role);
    }
    Ok(out)
}
