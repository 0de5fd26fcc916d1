use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use m2m_core::config::{BackendKind, Condition, PipelineConfig};
use m2m_core::corpus::{load_emotion_dataset, Split};
use m2m_core::emotion::{
    evaluate_backend, finetune_dataset, load_checkpoint, open_image, save_checkpoint, DualEncoder, EmotionBackend,
    EmotionPrediction, TrainingConfig,
};
use m2m_core::evaluation::{evaluate, load_responses, MissingPolicy, Study, StudyDesign};
use m2m_core::orchestrator::{ingest, Backends, Orchestrator, RunManifest, RunReport};

#[derive(Parser)]
#[command(name = "m2m", version, about = "Generate page-synchronised music for manga books")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Dirs {
    /// Directory holding ingested books.
    #[arg(long, default_value = "library")]
    library: PathBuf,
    /// Directory holding run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Copy a book from an annotated dataset into the library.
    Ingest {
        /// Dataset root with annotations/, dialog/ and images/.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        book: String,
        #[arg(long, default_value = "library")]
        library: PathBuf,
    },
    /// Run (or resume) a condition over a book.
    Run(RunArgs),
    /// Replace one artifact's payload; downstream artifacts become stale.
    Override {
        #[arg(long)]
        run: String,
        #[arg(long)]
        artifact: String,
        /// JSON payload file, or `-` for stdin.
        #[arg(long)]
        payload: PathBuf,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
    /// Regenerate every stale, pending or failed artifact of a run.
    Rerun {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Config file supplying backend settings; the run's own snapshot otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Show the status of every artifact of a run.
    Status {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
    /// Repeated-measures ANOVA over survey responses.
    Evaluate {
        /// CSV with participant_id,stimulus_id,condition,metric,score.
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, value_enum, default_value_t = StudyArg::WithinScene)]
        study: StudyArg,
        #[arg(long, value_enum, default_value_t = PolicyArg::Strict)]
        missing: PolicyArg,
        /// Override the design's participant count.
        #[arg(long)]
        participants: Option<usize>,
        /// Override the design's scene count.
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Serve run directories over HTTP for review.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
    },
    /// Print the default configuration as TOML.
    Config,
    /// Face emotion classifier tools.
    #[command(subcommand)]
    Emotion(EmotionCommand),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    book: String,
    #[arg(long, value_enum, default_value_t = ConditionArg::M2m)]
    condition: ConditionArg,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    dirs: Dirs,
    /// Run id; derived from book, condition and config when omitted.
    #[arg(long)]
    run_id: Option<String>,
    /// Inclusive page window, e.g. `4-7`.
    #[arg(long)]
    pages: Option<String>,
    /// Continue with independent stages after a failure.
    #[arg(long)]
    keep_going: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum EmotionCommand {
    /// Fine-tune the encoder on a labelled face dataset and save a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with training settings.
        #[arg(long)]
        training: Option<PathBuf>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a checkpoint (or the untrained encoder) on a dataset split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Classify one face image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditionArg {
    M2m,
    Baseline,
    Random,
}

impl From<ConditionArg> for Condition {
    fn from(c: ConditionArg) -> Self {
        match c {
            ConditionArg::M2m => Condition::M2m,
            ConditionArg::Baseline => Condition::Baseline,
            ConditionArg::Random => Condition::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Live,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Live => BackendKind::Live,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    WithinScene,
    BetweenScenes,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Strict,
    Listwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn parse_window(text: &str) -> Result<(usize, usize)> {
    let (a, b) = text.split_once('-').unwrap_or((text, text));
    let first = a.trim().parse().with_context(|| format!("bad page window {text:?}"))?;
    let last = b.trim().parse().with_context(|| format!("bad page window {text:?}"))?;
    Ok((first, last))
}

fn print_manifest(m: &RunManifest) {
    println!("run {} ({} on {}, pages {:?})", m.run_id, m.condition, m.book_id, m.pages);
    for s in &m.stages {
        let flag = if s.overridden { " [overridden]" } else { "" };
        let err = s.error.as_deref().map(|e| format!(": {e}")).unwrap_or_default();
        println!("  {:<24} {:<8}{flag}{err}", s.artifact_id, format!("{:?}", s.status).to_lowercase());
    }
    if let Some(f) = &m.final_audio {
        println!("final audio: {f}");
    }
}

fn report_run(orch: &Orchestrator, report: &RunReport, json: bool) -> Result<ExitCode> {
    if json {
        println!("{}", serde_json::to_string_pretty(report)?);
    } else {
        print_manifest(&report.manifest);
        println!(
            "executed {} artifacts, {} backend calls; run directory {}",
            report.executed.len(),
            report.backend_calls,
            orch.store(&report.manifest.run_id).dir().display()
        );
        if !report.removed.is_empty() {
            println!("removed {:?}", report.removed);
        }
    }
    if report.failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed: {}", report.failed.join(", "));
        Ok(ExitCode::from(2))
    }
}

fn emotion_encoder(checkpoint: Option<&Path>, config: &PipelineConfig) -> Result<DualEncoder> {
    Ok(match checkpoint {
        Some(dir) => load_checkpoint(dir)?.0,
        None => {
            let e = &config.emotion;
            DualEncoder::base(e.labels.clone(), &e.prompt_template, e.shape.clone(), e.seed)
        }
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest { dataset, book, library } => {
            let b = ingest(&dataset, &book, &library)?;
            println!(
                "ingested {} ({} pages, {} lines) into {}",
                b.book_id,
                b.page_count(),
                b.dialogue.len(),
                library.join(&b.book_id).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(args) => {
            let mut config = load_config(args.config.as_deref())?;
            if let Some(b) = args.backend {
                config.backend = b.into();
            }
            if let Some(p) = &args.pages {
                config.page_window = Some(parse_window(p)?);
            }
            if let Some(w) = args.workers {
                config.workers = w;
            }
            config.keep_going |= args.keep_going;
            config.validate()?;
            let orch = Orchestrator::new(&args.dirs.runs, Backends::from_config(&config)?);
            let report = orch.run(&args.dirs.library, &args.book, args.condition.into(), &config, args.run_id.as_deref())?;
            report_run(&orch, &report, args.json)
        }
        Command::Override { run, artifact, payload, runs } => {
            let text = if payload == Path::new("-") {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s)?;
                s
            } else {
                std::fs::read_to_string(&payload).with_context(|| format!("reading {}", payload.display()))?
            };
            let value: serde_json::Value = serde_json::from_str(&text).context("payload is not JSON")?;
            let store = m2m_core::orchestrator::RunStore::new(runs.join(&run));
            let config = store.read_manifest()?.config;
            let orch = Orchestrator::new(&runs, Backends::from_config(&config)?);
            let manifest = orch.override_artifact(&run, &artifact, value)?;
            print_manifest(&manifest);
            Ok(ExitCode::SUCCESS)
        }
        Command::Rerun { run, runs, config, json } => {
            let config = match config {
                Some(p) => load_config(Some(&p))?,
                None => m2m_core::orchestrator::RunStore::new(runs.join(&run)).read_manifest()?.config,
            };
            let orch = Orchestrator::new(&runs, Backends::from_config(&config)?);
            let report = orch.rerun(&run)?;
            report_run(&orch, &report, json)
        }
        Command::Status { run, runs } => {
            let manifest = m2m_core::orchestrator::RunStore::new(runs.join(&run)).read_manifest()?;
            print_manifest(&manifest);
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            responses,
            study,
            missing,
            participants,
            scenes,
            json,
        } => {
            let data = load_responses(&responses)?;
            let mut design = StudyDesign::for_study(match study {
                StudyArg::WithinScene => Study::WithinScene,
                StudyArg::BetweenScenes => Study::BetweenScenes,
            });
            if let Some(n) = participants {
                design.n_participants = n;
            }
            if let Some(n) = scenes {
                design.n_scenes = n;
            }
            let policy = match missing {
                PolicyArg::Strict => MissingPolicy::Strict,
                PolicyArg::Listwise => MissingPolicy::Listwise,
            };
            let report = evaluate(&data, &design, policy)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve {
            port,
            host,
            runs,
            config,
            backend,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(b) = backend {
                config.backend = b.into();
            }
            if !runs.is_dir() {
                bail!("run root {} does not exist", runs.display());
            }
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
            let orch = Arc::new(Orchestrator::new(&runs, Backends::from_config(&config)?));
            let rt = tokio::runtime::Runtime::new()?;
            println!("serving {} on http://{addr}/api/runs", runs.display());
            rt.block_on(m2m_server::serve(orch, addr))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Config => {
            print!("{}", PipelineConfig::default().to_toml_string());
            Ok(ExitCode::SUCCESS)
        }
        Command::Emotion(cmd) => emotion(cmd),
    }
}

fn emotion(cmd: EmotionCommand) -> Result<ExitCode> {
    match cmd {
        EmotionCommand::Train {
            dataset,
            out,
            training,
            learning_rate,
            epochs,
            config,
        } => {
            let config = load_config(config.as_deref())?;
            let mut tc: TrainingConfig = match training {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml_training(&text)?
                }
                None => TrainingConfig::default(),
            };
            if let Some(lr) = learning_rate {
                tc.learning_rate = lr;
            }
            if let Some(n) = epochs {
                tc.epochs = n;
            }
            let data = load_emotion_dataset(&dataset)?;
            let e = &config.emotion;
            let base = DualEncoder::base(data.labels.clone(), &e.prompt_template, e.shape.clone(), e.seed);
            let (encoder, log, report) = finetune_dataset(&dataset, &data, base, &tc)?;
            for epoch in &log.epochs {
                println!("epoch {:>3}  train loss {:.4}", epoch.epoch, epoch.train_loss);
            }
            print!("{}", report.table());
            save_checkpoint(&out, &encoder, Some(&tc), Some(&log), Some(&report))?;
            println!("checkpoint written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        EmotionCommand::Eval {
            dataset,
            checkpoint,
            split,
            config,
            json,
        } => {
            let config = load_config(config.as_deref())?;
            let data = load_emotion_dataset(&dataset)?;
            // an untrained encoder scores the dataset's own label set
            let encoder = match &checkpoint {
                Some(dir) => load_checkpoint(dir)?.0,
                None => {
                    let e = &config.emotion;
                    DualEncoder::base(data.labels.clone(), &e.prompt_template, e.shape.clone(), e.seed)
                }
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let report = evaluate_backend(&encoder, &dataset, &data.split(split))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
            Ok(ExitCode::SUCCESS)
        }
        EmotionCommand::Predict { image, checkpoint, config } => {
            let config = load_config(config.as_deref())?;
            let encoder = emotion_encoder(checkpoint.as_deref(), &config)?;
            let img = open_image(&image)?;
            let pred = EmotionPrediction::new(
                &image.to_string_lossy(),
                None,
                encoder.labels(),
                &encoder.probabilities(&img)?,
            )?;
            println!("{}", serde_json::to_string_pretty(&pred)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn toml_training(text: &str) -> Result<TrainingConfig> {
    let tc: TrainingConfig = toml::from_str(text).context("training settings")?;
    tc.validate()?;
    Ok(tc)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
