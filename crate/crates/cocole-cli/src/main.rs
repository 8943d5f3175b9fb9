//! End-to-end command-line workflow:
//! gen-data → build-cache → gen-prompts → train → eval / infer / report,
//! plus gradcheck and selftest for the verification suites.
//!
//! Every command reads and writes JSON artifacts under the config's
//! out_dir; failures print a machine-readable error JSON to stderr and
//! exit nonzero.

mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use cocole_core::cache::HandcraftedCache;
use cocole_core::checks;
use cocole_core::dataset::{synth_dataset, FewShotDataset};
use cocole_core::encoders::Encoders;
use cocole_core::error::{Error, Result};
use cocole_core::lexicon::ConceptLexicon;
use cocole_core::objectives::Temperature;
use cocole_core::promptgen::{generator_from_env, TemplateGenerator};
use cocole_core::promptset::HandcraftedPromptSet;
use cocole_core::report::{render, summarize};
use cocole_core::trainer::{
    classify, evaluate, read_metrics, train, write_metrics, EvalRecord, MetricsLine,
    TrainCheckpoint,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cocole", about = "Conceptual codebook training on synthetic few-shot data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic few-shot dataset with its base/novel split.
    GenData(CommonArgs),
    /// Build the handcrafted concept cache from the training images.
    BuildCache(CommonArgs),
    /// Generate per-class concept prompts and their frozen text features.
    GenPrompts(CommonArgs),
    /// Train the codebook; writes checkpoint.json and metrics.jsonl.
    Train(TrainArgs),
    /// Evaluate a checkpoint: base accuracy, novel accuracy, harmonic mean.
    Eval(EvalArgs),
    /// Classify one image file (JSON array of input values).
    Infer(InferArgs),
    /// Finite-difference gradient checks, one line per op/loss.
    Gradcheck(SeedArgs),
    /// Run the finite-difference, retrieval-oracle, and frozenness suites.
    Selftest(SeedArgs),
    /// Summarize one or more metrics logs (ablation table for several).
    Report(ReportArgs),
    /// Export the frozen encoder weights as JSON.
    ExportWeights(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the run-config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Drop the consistency loss from the objective.
    #[arg(long)]
    no_lcc: bool,
    /// Drop the orthogonality loss from the objective.
    #[arg(long)]
    no_lor: bool,
    /// Drop the key-matching loss from the objective.
    #[arg(long)]
    no_lma: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Row label recorded with the result.
    #[arg(long, default_value = "eval")]
    label: String,
    /// Append the result to metrics.jsonl as well.
    #[arg(long)]
    append_metrics: bool,
}

#[derive(clap::Args)]
struct InferArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// JSON file holding one input vector.
    #[arg(long)]
    image: PathBuf,
}

#[derive(clap::Args)]
struct SeedArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// One or more metrics logs; each becomes a table row.
    #[arg(long, required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match &e {
                Error::MissingArtifact { .. } => "missing_artifact",
                Error::Config(_) => "config",
                Error::Corrupt { .. } => "corrupt",
                Error::Version { .. } => "version",
                _ => "error",
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": kind })
            );
            ExitCode::FAILURE
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(args) => {
            let cfg = load_config(&args)?;
            let encoders = Encoders::new(cfg.train.encoder_config())?;
            let ds = synth_dataset(&encoders, &cfg.data, cfg.train.seed)?;
            ds.save(&cfg.dataset_path())?;
            println!(
                "{}",
                serde_json::json!({
                    "dataset": cfg.dataset_path(),
                    "classes": ds.num_classes(),
                    "train_images": ds.train.len(),
                    "test_images": ds.test.len(),
                })
            );
            Ok(())
        }
        Command::BuildCache(args) => {
            let cfg = load_config(&args)?;
            let encoders = Encoders::new(cfg.train.encoder_config())?;
            let ds = FewShotDataset::load(&cfg.dataset_path())?;
            let lexicon = ConceptLexicon::builtin();
            let images: Vec<Vec<f64>> = ds.train.iter().map(|i| i.input.clone()).collect();
            let cache = cocole_core::cache::build_cache(
                &encoders,
                &lexicon,
                &images,
                &cfg.train.cache_options(),
            )?;
            cache.save(&cfg.cache_path())?;
            println!(
                "{}",
                serde_json::json!({ "cache": cfg.cache_path(), "pairs": cache.pairs.len() })
            );
            Ok(())
        }
        Command::GenPrompts(args) => {
            let cfg = load_config(&args)?;
            let encoders = Encoders::new(cfg.train.encoder_config())?;
            let ds = FewShotDataset::load(&cfg.dataset_path())?;
            let cache = HandcraftedCache::load(&cfg.cache_path())?;
            let generator = generator_from_env()?;
            let fallback = TemplateGenerator::default();
            let set = cocole_core::promptset::build_prompt_set(
                &encoders,
                &cache,
                &ds,
                cfg.train.k2,
                generator.as_ref(),
                &fallback,
            )?;
            set.save(&cfg.prompts_path())?;
            println!(
                "{}",
                serde_json::json!({ "prompts": cfg.prompts_path(), "classes": set.len() })
            );
            Ok(())
        }
        Command::Train(args) => {
            let mut cfg = load_config(&args.common)?;
            if args.no_lcc {
                cfg.train.loss_cc = false;
            }
            if args.no_lor {
                cfg.train.loss_or = false;
            }
            if args.no_lma {
                cfg.train.loss_ma = false;
            }
            let encoders = Encoders::new(cfg.train.encoder_config())?;
            let ds = FewShotDataset::load(&cfg.dataset_path())?;
            // the cache is a train prerequisite even though the loop only
            // consumes the prompt set built from it
            let _cache = HandcraftedCache::load(&cfg.cache_path())?;
            let prompts = HandcraftedPromptSet::load(&cfg.prompts_path())?;
            let out = train(&encoders, &ds, &prompts, &cfg.train)?;
            TrainCheckpoint::new(&out, &cfg.train).save(&cfg.checkpoint_path())?;
            write_metrics(&cfg.metrics_path(), &out.metrics)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": cfg.checkpoint_path(),
                    "metrics": cfg.metrics_path(),
                    "steps": out.steps,
                    "train_accuracy": out.train_accuracy,
                })
            );
            Ok(())
        }
        Command::Eval(args) => {
            let cfg = load_config(&args.common)?;
            let ckpt = TrainCheckpoint::load(&cfg.checkpoint_path())?;
            let encoders = Encoders::new(ckpt.config.encoder_config())?;
            let ds = FewShotDataset::load(&cfg.dataset_path())?;
            let codebook = ckpt.codebook()?;
            let tau = Temperature::new(ckpt.config.tau)?;
            let report = evaluate(&encoders, &codebook, &ds, ckpt.config.k3, tau)?;
            let record = EvalRecord {
                label: args.label.clone(),
                base_acc: report.base_acc,
                novel_acc: report.novel_acc,
                hm: report.hm,
            };
            std::fs::write(&cfg.eval_path(), serde_json::to_string_pretty(&report)?)?;
            if args.append_metrics {
                let mut lines = read_metrics(&cfg.metrics_path())?;
                lines.push(MetricsLine::Eval(record));
                write_metrics(&cfg.metrics_path(), &lines)?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "base_acc": report.base_acc,
                    "novel_acc": report.novel_acc,
                    "hm": report.hm,
                })
            );
            Ok(())
        }
        Command::Infer(args) => {
            let cfg = load_config(&args.common)?;
            let ckpt = TrainCheckpoint::load(&cfg.checkpoint_path())?;
            let encoders = Encoders::new(ckpt.config.encoder_config())?;
            let ds = FewShotDataset::load(&cfg.dataset_path())?;
            let codebook = ckpt.codebook()?;
            let input: Vec<f64> = serde_json::from_str(
                &std::fs::read_to_string(&args.image).map_err(|_| Error::MissingArtifact {
                    what: format!("image file at {}", args.image.display()),
                    hint: "provide a JSON array of input values".into(),
                })?,
            )?;
            let class_names: Vec<String> =
                ds.classes.iter().map(|c| c.name.clone()).collect();
            let tau = Temperature::new(ckpt.config.tau)?;
            let pred =
                classify(&encoders, &codebook, &input, &class_names, ckpt.config.k3, tau)?;
            let probs: Vec<serde_json::Value> = class_names
                .iter()
                .zip(&pred.probabilities)
                .map(|(n, p)| serde_json::json!([n, p]))
                .collect();
            println!(
                "{}",
                serde_json::json!({
                    "predicted": class_names[pred.class_index],
                    "probabilities": probs,
                    "selected_indices": pred.selected,
                })
            );
            Ok(())
        }
        Command::Gradcheck(args) => {
            let results = checks::gradient_checks(args.seed)?;
            let mut all_ok = true;
            for c in &results {
                println!("{}: {} ({})", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
                all_ok &= c.passed;
            }
            if all_ok {
                Ok(())
            } else {
                Err(Error::Contract("gradient checks failed".into()))
            }
        }
        Command::Selftest(args) => {
            let suites = checks::run_all(args.seed)?;
            let mut all_ok = true;
            for (suite, results) in &suites {
                let ok = results.iter().all(|c| c.passed);
                println!("{suite}: {}", if ok { "PASS" } else { "FAIL" });
                for c in results {
                    println!("  {}: {} ({})", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
                }
                all_ok &= ok;
            }
            if all_ok {
                Ok(())
            } else {
                Err(Error::Contract("selftest failed".into()))
            }
        }
        Command::Report(args) => {
            let mut reports = Vec::new();
            for path in &args.metrics {
                let lines = read_metrics(path)?;
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| path.display().to_string());
                reports.push(summarize(&label, &lines)?);
            }
            print!("{}", render(&reports));
            Ok(())
        }
        Command::ExportWeights(args) => {
            let cfg = load_config(&args)?;
            let encoders = Encoders::new(cfg.train.encoder_config())?;
            let weights = encoders.export_weights();
            std::fs::write(&cfg.weights_path(), serde_json::to_string_pretty(&weights)?)?;
            println!("{}", serde_json::json!({ "weights": cfg.weights_path() }));
            Ok(())
        }
    }
}
