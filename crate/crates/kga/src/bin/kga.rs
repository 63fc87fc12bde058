use clap::{Args, Parser, Subcommand};
use kga::data::{save_corpus, synth_classification, synth_translation, SynthClassCfg, SynthTransCfg};
use kga::harness::{
    build_corpora, emit_report, emit_sweep, evaluate_run, load_config, mia_over_run, preset, resolve_arch,
    run_experiment, Overrides, PresetOverrides, ReportBundle, ReportFormat, SeedOutcome,
};
use kga::models::{save_model, train_supervised, Vocabulary};
use kga::util::derive_seed;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

/// Machine-unlearning experiment runner.
#[derive(Parser)]
#[command(name = "kga", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonFlags {
    /// Experiment config file (TOML, one section per module).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Unlearning method: kga | retrain | sisa | badt.
    #[arg(long, value_name = "METHOD")]
    method: Option<String>,
    /// Forget-set size (random selection).
    #[arg(long, value_name = "N")]
    forget_count: Option<usize>,
    /// Forget every instance whose target contains this token.
    #[arg(long, value_name = "TOK")]
    forget_token: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic corpora as JSONL files.
    GenData {
        /// classification | translation
        #[arg(long, default_value = "classification")]
        task: String,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the original model and write its checkpoint.
    Train(CommonFlags),
    /// Full pipeline: train, split, retrain oracle, unlearn, evaluate.
    Unlearn(CommonFlags),
    /// Recompute metrics from a previous run's artifacts.
    Evaluate(CommonFlags),
    /// Run the membership-inference attack against a previous run.
    Mia(CommonFlags),
    /// Re-emit report files from a previous run.
    Report {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Comma-separated: json,csv,plot
        #[arg(long, default_value = "json,csv,plot")]
        format: String,
    },
    /// Materialize (and optionally run) a named experiment preset.
    Preset {
        /// removal-sweep | difficulty-sweep | lexical-removal | basemodel-sweep
        name: String,
        #[arg(long, value_name = "TOK")]
        forget_token: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Execute the preset configs instead of only printing them.
        #[arg(long)]
        run: bool,
    },
}

fn overrides(flags: &CommonFlags) -> kga::Result<Overrides> {
    Ok(Overrides {
        seed: flags.seed,
        method: flags.method.as_deref().map(str::parse).transpose()?,
        forget_count: flags.forget_count,
        forget_token: flags.forget_token.clone(),
        out_dir: flags.out.clone(),
    })
}

fn config_from(flags: &CommonFlags) -> kga::Result<kga::harness::ExperimentConfig> {
    let path = flags
        .config
        .clone()
        .ok_or_else(|| kga::Error::Config("--config PATH is required for this command".into()))?;
    load_config(&path, &overrides(flags)?)
}

fn print_bundle_summary(bundle: &ReportBundle) {
    for row in &bundle.rows {
        match &row.outcome {
            SeedOutcome::Ok { reports, kga, .. } => {
                for (role, report) in reports {
                    println!(
                        "seed {} {:<9} test {}={:.4}  forget {}={:.4}",
                        row.seed,
                        role.name(),
                        report.test.task_metric,
                        report.test.task_value,
                        report.forget.task_metric,
                        report.forget.task_value,
                    );
                }
                if let Some(k) = kga {
                    println!(
                        "seed {} alignment: gap {:.6} -> {:.6} after {} steps ({:?})",
                        row.seed, k.initial_gap, k.final_gap, k.steps_taken, k.termination
                    );
                }
            }
            SeedOutcome::Error { message } => println!("seed {} FAILED: {message}", row.seed),
        }
    }
}

fn gen_data(task: &str, out: &PathBuf, seed: u64) -> kga::Result<()> {
    std::fs::create_dir_all(out)?;
    match task {
        "classification" => {
            let base = SynthClassCfg::default();
            let test = SynthClassCfg { per_label: base.per_label / 5, id_prefix: "t".into(), ..base.clone() };
            let extra = SynthClassCfg { per_label: 50, id_prefix: "n".into(), ..base.clone() };
            save_corpus(&synth_classification(&base, derive_seed(seed, "data-train", 0))?, &out.join("train.jsonl"))?;
            save_corpus(&synth_classification(&test, derive_seed(seed, "data-test", 0))?, &out.join("test.jsonl"))?;
            save_corpus(&synth_classification(&extra, derive_seed(seed, "data-extra", 0))?, &out.join("extra.jsonl"))?;
        }
        "translation" => {
            let base = SynthTransCfg::default();
            let test = SynthTransCfg { count: base.count / 10, id_prefix: "t".into(), ..base.clone() };
            let extra = SynthTransCfg { count: 300, id_prefix: "n".into(), ..base.clone() };
            save_corpus(&synth_translation(&base, derive_seed(seed, "data-train", 0))?, &out.join("train.jsonl"))?;
            save_corpus(&synth_translation(&test, derive_seed(seed, "data-test", 0))?, &out.join("test.jsonl"))?;
            save_corpus(&synth_translation(&extra, derive_seed(seed, "data-extra", 0))?, &out.join("extra.jsonl"))?;
        }
        other => return Err(kga::Error::Config(format!("unknown task {other:?}"))),
    }
    println!("wrote train/test/extra corpora under {}", out.display());
    Ok(())
}

fn run(command: Command) -> kga::Result<()> {
    match command {
        Command::GenData { task, out, seed } => gen_data(&task, &out, seed)?,
        Command::Train(flags) => {
            let config = config_from(&flags)?;
            for &seed in &config.seeds {
                let corpora = build_corpora(&config, derive_seed(seed, "data", 0))?;
                let vocab = Arc::new(Vocabulary::from_corpora(&[&corpora.train, &corpora.extra_pool], 1));
                let arch = resolve_arch(&config, &corpora.train)?;
                let (model, record) =
                    train_supervised(&arch, &vocab, &corpora.train, &config.train, derive_seed(seed, "train", 0))?;
                let dir = config.out_dir.join(format!("seed-{seed}"));
                std::fs::create_dir_all(&dir)?;
                vocab.save(&dir.join("vocab.json"))?;
                save_model(&model, &dir.join("original.kgac"))?;
                println!(
                    "seed {seed}: trained {} steps, final loss {:.4}, checkpoint {}",
                    record.steps,
                    record.losses.last().copied().unwrap_or(f64::NAN),
                    dir.join("original.kgac").display()
                );
            }
        }
        Command::Unlearn(flags) => {
            let config = config_from(&flags)?;
            let bundle = run_experiment(&config)?;
            print_bundle_summary(&bundle);
            println!("report written to {}", config.out_dir.join("report.json").display());
        }
        Command::Evaluate(flags) => {
            let config = config_from(&flags)?;
            let bundle = evaluate_run(&config)?;
            print_bundle_summary(&bundle);
        }
        Command::Mia(flags) => {
            let config = config_from(&flags)?;
            let results = mia_over_run(&config)?;
            for (seed, per_role) in results {
                for (role, outcome) in per_role {
                    println!("seed {seed} {:<9} attack F1 {:.3} FNR {:.3}", role.name(), outcome.f1, outcome.fnr);
                }
            }
        }
        Command::Report { out, format } => {
            let text = std::fs::read_to_string(out.join("report.json"))
                .map_err(|e| kga::Error::Config(format!("no report.json under {}: {e}", out.display())))?;
            let bundle: ReportBundle = serde_json::from_str(&text)?;
            let formats = format
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<kga::Result<Vec<ReportFormat>>>()?;
            let written = emit_report(&bundle, &formats, &out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::Preset { name, forget_token, out, seed, run } => {
            let ov = PresetOverrides {
                forget_token,
                out_dir: out,
                seeds: seed.map(|s| vec![s]),
                removal_counts: None,
            };
            let presets = preset(&name, &ov)?;
            let mut labeled = Vec::new();
            for p in &presets {
                println!("preset {}: out={}", p.label, p.config.out_dir.display());
                std::fs::create_dir_all(&p.config.out_dir)?;
                let json = serde_json::to_string_pretty(&p.config)?;
                kga::util::atomic_write(&p.config.out_dir.join("config.json"), json.as_bytes())?;
                if run {
                    let bundle = run_experiment(&p.config)?;
                    print_bundle_summary(&bundle);
                    labeled.push((p.label.clone(), bundle));
                }
            }
            if run && labeled.len() > 1 {
                let root = presets[0].config.out_dir.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
                let path = emit_sweep(&labeled, &root)?;
                println!("sweep series written to {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version requests are successes; everything else is a
            // configuration error
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
