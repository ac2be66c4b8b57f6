//! Command-line surface for the fault simulator and the diagnosis pipeline.
//!
//! External reasoner configuration comes from environment variables:
//! `TOPOEVO_REASONER_ENDPOINT` (http URL; unset = deterministic planner),
//! `TOPOEVO_REASONER_MODEL`, and `TOPOEVO_REASONER_TOKEN`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use topoevo::graph::{build_graph, TopologySpec};
use topoevo::harness::{
    compare_codebooks, config_hash, create_run_dir, diagnose_incident, entity_labels, evolve,
    load_pipeline, run_ablation, run_evaluation, run_sensitivity, save_pipeline, train_pipeline,
    write_ablation_csv, write_evaluation_json, write_rounds_csv, write_sensitivity_csv,
    PipelineConfig, TrainedPipeline,
};
use topoevo::het::{Outcome, ReasonerBackend, ReasonerConfig};
use topoevo::lexicon::{build_lexicon, Provenance};
use topoevo::memory::{MemoryConfig, MemoryStore};
use topoevo::sim::{load_dataset, load_incident, make_dataset, save_dataset, FaultType, SimConfig};
use topoevo::vq::fit_codebook;

#[derive(Parser)]
#[command(
    name = "topoevo",
    about = "Microservice fault simulation and topology-aware root cause analysis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file with the full pipeline hyperparameter schema.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override localizer training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override codebook size.
    #[arg(long)]
    vq_k: Option<usize>,
    /// Disable contrastive alignment pretraining.
    #[arg(long)]
    no_moma: bool,
    /// Disable quantized symptom tokens (raw per-entity summaries instead).
    #[arg(long)]
    no_vq: bool,
    /// Disable hypothesis verification (localizer ranking is final).
    #[arg(long)]
    no_het: bool,
    /// Disable memory and test-time adaptation.
    #[arg(long)]
    no_sem: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg: PipelineConfig = match &self.config {
            Some(path) => {
                let f = std::fs::File::open(path)
                    .map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
                serde_json::from_reader(std::io::BufReader::new(f))
                    .map_err(|e| CliError::new("config", e.to_string()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.train_epochs = epochs;
        }
        if let Some(k) = self.vq_k {
            cfg.vq_k = k;
        }
        cfg.ablation.moma &= !self.no_moma;
        cfg.ablation.vq &= !self.no_vq;
        cfg.ablation.het &= !self.no_het;
        cfg.ablation.sem &= !self.no_sem;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled incident dataset from a topology spec.
    Simulate {
        /// Topology spec JSON: services/replicas, nodes, call pairs.
        #[arg(long)]
        spec: PathBuf,
        /// Number of incidents.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full pipeline on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Base directory; a run subdirectory keyed by config hash is created.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Refit the codebook and symptom lexicon on a trained model.
    BuildLexicon {
        #[arg(long)]
        data: PathBuf,
        /// Directory produced by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Codebook size.
        #[arg(long)]
        k: Option<usize>,
        /// Output lexicon JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnose one incident file and write the report.
    Diagnose {
        /// Incident JSONL produced by `simulate`.
        #[arg(long)]
        incident: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Optional memory file for retrieval priors.
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate localization/classification/faithfulness on a dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every component ablation.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sweep codebook sizes and report accuracy/vocabulary quality/usage.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated codebook sizes.
        #[arg(long, default_value = "32,64,128,256,512")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream incidents for several rounds with memory + adaptation.
    Evolve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        /// Memory file; loaded if present, written back after the run.
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct CliError {
    stage: &'static str,
    message: String,
}

impl CliError {
    fn new(stage: &'static str, message: String) -> Self {
        Self { stage, message }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{\"error\":{{\"stage\":{:?},\"message\":{:?}}}}}", self.stage, self.message)
    }
}

fn ctx<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::new(stage, e.to_string())
}

fn reasoner_backend() -> ReasonerBackend {
    match std::env::var("TOPOEVO_REASONER_ENDPOINT") {
        Ok(endpoint) if !endpoint.is_empty() => {
            let mut cfg = ReasonerConfig {
                endpoint,
                ..ReasonerConfig::default()
            };
            if let Ok(model) = std::env::var("TOPOEVO_REASONER_MODEL") {
                cfg.model = model;
            }
            if let Ok(token) = std::env::var("TOPOEVO_REASONER_TOKEN") {
                cfg.auth_token = Some(token);
            }
            ReasonerBackend::External(cfg)
        }
        _ => ReasonerBackend::Deterministic,
    }
}

fn load_model(dir: &Path) -> Result<TrainedPipeline, CliError> {
    load_pipeline(dir).map_err(ctx("load-model"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { spec, n, seed, out } => {
            let f = std::fs::File::open(&spec)
                .map_err(|e| CliError::new("simulate", format!("{}: {e}", spec.display())))?;
            let topo: TopologySpec = serde_json::from_reader(std::io::BufReader::new(f))
                .map_err(ctx("simulate"))?;
            let g = build_graph(&topo, seed).map_err(ctx("simulate"))?;
            let cfg = SimConfig::default();
            let incidents =
                make_dataset(&g, n, &FaultType::ALL, seed, &cfg).map_err(ctx("simulate"))?;
            save_dataset(&incidents, seed, &FaultType::ALL, &cfg, &out)
                .map_err(ctx("simulate"))?;
            println!("wrote {} incidents to {}", incidents.len(), out.display());
        }
        Command::Train { data, out, config } => {
            let cfg = config.resolve()?;
            let incidents = load_dataset(&data).map_err(ctx("train"))?;
            let run = create_run_dir(&out, &cfg).map_err(ctx("train"))?;
            let pipeline = train_pipeline(&incidents, &cfg).map_err(ctx("train"))?;
            save_pipeline(&pipeline, &run.path).map_err(ctx("train"))?;
            println!(
                "trained on {} incidents; model in {} (config hash {})",
                incidents.len(),
                run.path.display(),
                run.config_hash
            );
        }
        Command::BuildLexicon {
            data,
            model,
            k,
            out,
        } => {
            let pipeline = load_model(&model)?;
            let incidents = load_dataset(&data).map_err(ctx("build-lexicon"))?;
            let k = k.unwrap_or(pipeline.cfg.vq_k);
            let examples = topoevo::harness::make_examples(
                &incidents,
                &pipeline.miner,
                &pipeline.stats,
                &pipeline.cfg.encoder,
            )
            .map_err(ctx("build-lexicon"))?;
            let states = topoevo::harness::collect_states(&pipeline, &examples)
                .map_err(ctx("build-lexicon"))?;
            let (codebook, report) = fit_codebook(
                &states,
                k.min(states.len()),
                pipeline.cfg.vq_epochs,
                pipeline.cfg.vq_beta,
                pipeline.cfg.seed,
            );
            let mut offset = 0usize;
            let mut assignments = Vec::new();
            for incident in &incidents {
                let n = incident.graph.len();
                assignments.push(
                    codebook
                        .assign_batch(&states[offset..offset + n].to_vec())
                        .map_err(ctx("build-lexicon"))?,
                );
                offset += n;
            }
            let provenance = Provenance {
                dataset_hash: config_hash(&pipeline.cfg),
                codebook_hash: format!("k{k}"),
            };
            let lexicon =
                build_lexicon(&incidents, &assignments, &codebook, &pipeline.miner, provenance)
                    .map_err(ctx("build-lexicon"))?;
            lexicon.save(&out).map_err(ctx("build-lexicon"))?;
            let quality = topoevo::lexicon::vocab_quality(
                &assignments.concat(),
                &entity_labels(&incidents),
                &states,
            );
            println!(
                "lexicon with {} tokens written to {} (fit iterations {}, purity {:.3}, nmi {:.3})",
                lexicon.tokens.iter().filter(|t| t.used).count(),
                out.display(),
                report.error_history.len(),
                quality.purity,
                quality.nmi
            );
        }
        Command::Diagnose {
            incident,
            model,
            memory,
            out,
        } => {
            let pipeline = load_model(&model)?;
            let incident = load_incident(&incident).map_err(ctx("diagnose"))?;
            let store = match &memory {
                Some(path) if path.exists() => {
                    Some(MemoryStore::load(path).map_err(ctx("diagnose"))?)
                }
                _ => None,
            };
            let backend = reasoner_backend();
            let outcome = diagnose_incident(
                &pipeline,
                &incident,
                &backend,
                store.as_ref().map(|s| (s, 0.0)),
            )
            .map_err(ctx("diagnose"))?;
            let run = create_run_dir(&out, &pipeline.cfg).map_err(ctx("diagnose"))?;
            let report_path = run.path.join("report.json");
            let f = std::fs::File::create(&report_path).map_err(ctx("diagnose"))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(f), &outcome.report)
                .map_err(ctx("diagnose"))?;
            println!("report: {}", report_path.display());
            println!(
                "root: {} fault: {} ({})",
                outcome.report.root,
                outcome.report.fault_type,
                if outcome.report.verified {
                    "verified"
                } else {
                    "unverified fallback"
                }
            );
            for v in &outcome.report.hypotheses {
                if v.outcome == Outcome::Accepted {
                    println!(
                        "  accepted: {} / {} via {}",
                        v.hypothesis.root,
                        v.hypothesis.fault_type.name(),
                        v.hypothesis.route.join(" -> ")
                    );
                }
            }
            for a in &outcome.report.alternatives {
                println!(
                    "  rejected: {} / {} — {}",
                    a.root, a.fault_type, a.reason
                );
            }
        }
        Command::Evaluate { data, model, out } => {
            let pipeline = load_model(&model)?;
            let incidents = load_dataset(&data).map_err(ctx("evaluate"))?;
            let backend = reasoner_backend();
            let summary = run_evaluation(&pipeline, &incidents, &backend, None)
                .map_err(ctx("evaluate"))?;
            let run = create_run_dir(&out, &pipeline.cfg).map_err(ctx("evaluate"))?;
            write_evaluation_json(&summary, &run.path.join("evaluation.json"))
                .map_err(ctx("evaluate"))?;
            println!(
                "acc@1 {:.3} acc@3 {:.3} acc@5 {:.3} mrr {:.3} micro-f1 {:.3} macro-f1 {:.3} faithfulness {:.3} random-baseline {:.3}",
                summary.localization.acc_at_1,
                summary.localization.acc_at_3,
                summary.localization.acc_at_5,
                summary.localization.mrr,
                summary.classification.micro_f1,
                summary.classification.macro_f1,
                summary.mean_faithfulness,
                summary.random_baseline_acc1
            );
            println!("details: {}", run.path.join("evaluation.json").display());
        }
        Command::Ablate {
            train,
            eval,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let train_set = load_dataset(&train).map_err(ctx("ablate"))?;
            let eval_set = load_dataset(&eval).map_err(ctx("ablate"))?;
            let backend = reasoner_backend();
            let rows = run_ablation(&train_set, &eval_set, &cfg, &backend).map_err(ctx("ablate"))?;
            let run = create_run_dir(&out, &cfg).map_err(ctx("ablate"))?;
            let csv = run.path.join("ablation.csv");
            write_ablation_csv(&rows, &csv).map_err(ctx("ablate"))?;
            println!("setting        acc@1  acc@3  acc@5  mrr    random amp-acc@1");
            for r in &rows {
                println!(
                    "{:<14} {:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {}",
                    r.setting,
                    r.acc_at_1,
                    r.acc_at_3,
                    r.acc_at_5,
                    r.mrr,
                    r.random_baseline_acc1,
                    r.amp_acc_at_1
                        .map_or("-".to_string(), |v| format!("{v:.3}"))
                );
            }
            println!("csv: {}", csv.display());
        }
        Command::Sweep {
            train,
            eval,
            model,
            grid,
            out,
        } => {
            let pipeline = load_model(&model)?;
            let train_set = load_dataset(&train).map_err(ctx("sweep"))?;
            let eval_set = load_dataset(&eval).map_err(ctx("sweep"))?;
            let grid: Vec<usize> = grid
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(ctx("sweep"))?;
            let backend = reasoner_backend();
            let rows = run_sensitivity(&pipeline, &train_set, &eval_set, &grid, &backend)
                .map_err(ctx("sweep"))?;
            let run = create_run_dir(&out, &pipeline.cfg).map_err(ctx("sweep"))?;
            let csv = run.path.join("sensitivity.csv");
            write_sensitivity_csv(&rows, &csv).map_err(ctx("sweep"))?;
            let comparison = compare_codebooks(
                &pipeline,
                &train_set,
                pipeline.cfg.vq_k,
                pipeline.cfg.seed,
            )
            .map_err(ctx("sweep"))?;
            let f = std::fs::File::create(run.path.join("codebook-comparison.json"))
                .map_err(ctx("sweep"))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(f), &comparison)
                .map_err(ctx("sweep"))?;
            for r in &rows {
                println!(
                    "k={:<4} acc@1 {:.3} purity {:.3} nmi {:.3} mean-usage {:.1}",
                    r.k, r.acc_at_1, r.purity, r.nmi, r.mean_usage
                );
            }
            println!("csv: {}", csv.display());
        }
        Command::Evolve {
            data,
            model,
            rounds,
            memory,
            out,
        } => {
            let mut pipeline = load_model(&model)?;
            let incidents = load_dataset(&data).map_err(ctx("evolve"))?;
            let mut store = if memory.exists() {
                MemoryStore::load(&memory).map_err(ctx("evolve"))?
            } else {
                MemoryStore::new(pipeline.cfg.seed, MemoryConfig::default())
            };
            let backend = reasoner_backend();
            let history = evolve(&mut pipeline, &incidents, rounds, &mut store, &backend)
                .map_err(ctx("evolve"))?;
            store.save(&memory).map_err(ctx("evolve"))?;
            let run = create_run_dir(&out, &pipeline.cfg).map_err(ctx("evolve"))?;
            let csv = run.path.join("rounds.csv");
            write_rounds_csv(&history, &csv).map_err(ctx("evolve"))?;
            save_pipeline(&pipeline, &run.path).map_err(ctx("evolve"))?;
            for r in &history {
                println!(
                    "round {} acc@1 {:.3} tta-steps {} memory {}",
                    r.round, r.acc_at_1, r.tta_steps, r.memory_size
                );
            }
            println!("memory: {}  csv: {}", memory.display(), csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with code 2 and usage text on unknown subcommands/flags
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
