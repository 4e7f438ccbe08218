use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use topiclabel_core::gateway::{Gateway, GatewayConfig, LlmClient, MockLlm};
use topiclabel_core::metrics::{HashEmbedder, RemoteEmbedder, TokenEmbedder};
use topiclabel_core::pipeline::{render_report, EmbedderKind, Pipeline, PipelineConfig};

mod server;

#[derive(Debug, Parser)]
#[command(name = "topiclabel", version, about = "Topic modeling and LLM topic labeling pipeline")]
struct Cli {
    /// Pipeline configuration (TOML). Relative paths inside it resolve
    /// against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Answer prompts with the deterministic offline mock.
    #[arg(long, global = true)]
    mock_llm: bool,

    /// Log gateway requests and responses to <out>/trace.jsonl.
    #[arg(long, global = true)]
    trace: bool,

    /// Chat-completion endpoint root, e.g. http://localhost:8000/v1.
    #[arg(long, global = true, env = "TOPICTAG_BASE_URL")]
    base_url: Option<String>,

    /// Model id sent to the endpoint and used to key evaluations.
    #[arg(long, global = true)]
    model: Option<String>,

    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read the corpus and write corpus.jsonl.
    Ingest,
    /// Build TF-IDF, select the rank and factorize.
    Factorize,
    /// Write per-topic feature bundles and the train/test split.
    Clusters,
    /// Label every topic with one fixed prompt configuration.
    Label {
        /// Template id; overrides the configuration.
        #[arg(long)]
        template: Option<String>,
    },
    /// Search prompt configurations on the train topics.
    Optimize {
        /// Study budget; overrides the configuration.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Label and score the held-out topics with the best configuration.
    Evaluate,
    /// Serve the rating API and annotator UI.
    RateServe {
        #[arg(long)]
        bind: Option<String>,
        /// Show ground truth next to candidate labels.
        #[arg(long)]
        reveal: bool,
        /// Rating scale, 3 or 5.
        #[arg(long)]
        scale: Option<u8>,
        /// Built annotator UI bundle.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Write report.json and report.txt.
    Report,
    /// Run every stage from ingest to report.
    Run {
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut config: PipelineConfig =
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            config.resolve_paths(base);
            config
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(model) = &cli.model {
        config.gateway.model = model.clone();
    }
    if let Some(url) = &cli.base_url {
        config.gateway.base_url = Some(url.clone());
    }
    if cli.mock_llm {
        config.gateway.mock = true;
    }
    if let Command::Optimize { trials: Some(n) } | Command::Run { trials: Some(n) } = &cli.command {
        config.search.n_trials = *n;
    }
    if let Command::Label { template: Some(t) } = &cli.command {
        config.label.template = t.clone();
    }
    Ok(config)
}

fn gateway(cli: &Cli, config: &PipelineConfig) -> Result<Arc<Gateway>> {
    let g = &config.gateway;
    let Some(base_url) = &g.base_url else {
        bail!("no endpoint configured; pass --base-url or use --mock-llm for offline runs");
    };
    let gateway_config = GatewayConfig {
        max_attempts: g.max_attempts,
        backoff_base: Duration::from_millis(g.backoff_ms),
        max_in_flight: g.max_in_flight,
        timeout: Duration::from_secs(g.timeout_secs),
        forward_seed: g.forward_seed,
        trace_path: cli.trace.then(|| cli.out.join("trace.jsonl")),
        ..GatewayConfig::from_env(base_url.clone())
    };
    Ok(Arc::new(Gateway::with_http(gateway_config)?))
}

fn pipeline(cli: &Cli, config: PipelineConfig) -> Result<Pipeline> {
    // Stages before labeling and the report never call the model.
    let calls_model = matches!(
        cli.command,
        Command::Label { .. } | Command::Optimize { .. } | Command::Evaluate | Command::Run { .. }
    );
    let needs_llm = calls_model && (!config.gateway.mock || config.metrics.embedder == EmbedderKind::Remote);
    let remote = if needs_llm { Some(gateway(cli, &config)?) } else { None };
    let llm: Arc<dyn LlmClient> = match (&remote, config.gateway.mock) {
        (Some(g), false) => g.clone(),
        _ => Arc::new(MockLlm),
    };
    let embedder: Arc<dyn TokenEmbedder> = match (config.metrics.embedder, &remote) {
        (EmbedderKind::Remote, Some(g)) => Arc::new(RemoteEmbedder::new(g.clone(), config.metrics.embed_model.clone())),
        _ => Arc::new(HashEmbedder { dim: config.metrics.embed_dim }),
    };
    Ok(Pipeline::new(config, &cli.out, llm, embedder)?)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;

    if let Command::RateServe { bind, reveal, scale, static_dir } = &cli.command {
        let settings = server::ServeSettings {
            dir: cli.out.clone(),
            bind: bind.clone().unwrap_or_else(|| config.rating.bind.clone()),
            scale: scale.unwrap_or(config.rating.scale),
            reveal: *reveal || config.rating.reveal,
            static_dir: static_dir.clone().or(config.paths.static_dir.clone()),
        };
        return server::serve(settings);
    }

    let p = pipeline(&cli, config)?;
    match &cli.command {
        Command::Ingest => {
            let bundle = p.ingest()?;
            println!("{} documents -> {}", bundle.len(), p.path(topiclabel_core::pipeline::CORPUS).display());
        }
        Command::Factorize => {
            let (f, report) = p.factorize()?;
            println!("chosen k = {} (relative error {:.4})", report.chosen_k, f.relative_error);
        }
        Command::Clusters => {
            let set = p.clusters()?;
            println!(
                "{} topics; train {:?}, test {:?}",
                set.clusters.len(),
                set.split.train,
                set.split.test
            );
        }
        Command::Label { .. } => {
            for l in p.label(&p.config.label.clone())? {
                println!("topic {:>3}: {} [{:?}]", l.topic_id, l.label, l.extraction);
            }
        }
        Command::Optimize { .. } => {
            let result = p.optimize()?;
            println!(
                "{} trials; best trial {} objective {:.4}",
                result.history.len(),
                result.best.trial_id,
                result.best.objective.unwrap_or(f64::NAN)
            );
        }
        Command::Evaluate => {
            let e = p.evaluate()?;
            for s in &e.scores {
                println!(
                    "topic {:>3}: {:?} vs {:?}  bleu {:.3} rouge-l {:.3} bertscore {:.3}",
                    s.topic_id, s.candidate, s.reference, s.bleu, s.rouge_l.f, s.bertscore.f
                );
            }
        }
        Command::Report => {
            print!("{}", render_report(&p.report()?));
        }
        Command::Run { .. } => {
            print!("{}", render_report(&p.run_all()?));
        }
        Command::RateServe { .. } => unreachable!("handled above"),
    }
    Ok(())
}
