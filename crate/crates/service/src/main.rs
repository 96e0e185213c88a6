use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use veil_core::engine::Engine;
use veil_core::llm::templates::PROXY_PREDICT;
use veil_core::llm::{Gateway, ScriptEntry};
use veil_core::profile::{Impression, Item};
use veil_eval::proxy::derive_rng;
use veil_eval::report::{accuracy_table, write_results, AccuracyRow};
use veil_eval::{bucket_users, load_mind, run_cohorts, run_proxy, Method, PlantedConfig, PlantedWorld, ProxyConfig};
use veil_service::config::{bundled_stub, BackendKind, Config};
use veil_service::{server, Service};

#[derive(Parser)]
#[command(name = "veil", version, about = "Self-hosted filter for discomforting recommendations")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true, env = "VEIL_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve,
    /// Offline evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Ingest impressions from a JSON-lines file.
    Ingest {
        #[arg(long)]
        file: PathBuf,
    },
    /// Filter a feed with the active rules.
    Filter {
        /// JSON file holding `{"items": [...]}` or a bare array.
        #[arg(long)]
        feed: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Manage filtering rules.
    #[command(subcommand)]
    Rules(RulesCommand),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Preference-proxy accuracy of the profile and its ablations.
    Proxy(ProxyArgs),
}

#[derive(Subcommand)]
enum RulesCommand {
    List,
    Add { text: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalBackend {
    /// Scripted replies with uniform predictions; for the MIND dataset only.
    Stub,
    /// The configured chat-completion server.
    Http,
}

#[derive(Args)]
struct ProxyArgs {
    /// MIND-format dataset directory with news.tsv and behaviors.tsv.
    #[arg(long, conflicts_with = "planted", required_unless_present = "planted")]
    dataset: Option<PathBuf>,
    /// Use the planted-preference simulator with this many trials per user.
    #[arg(long)]
    planted: Option<usize>,
    /// Simulated users for --planted.
    #[arg(long, default_value_t = 1)]
    users: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Methods to run; all by default.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long, value_enum, default_value = "stub")]
    backend: EvalBackend,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clicks to collect per activity bucket.
    #[arg(long, default_value_t = veil_eval::cohort::DEFAULT_CLICK_QUOTA)]
    quota: usize,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Trace output (JSON lines); a CSV table is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeedFile {
    Wrapped { items: Vec<Item> },
    Bare(Vec<Item>),
}

fn open_engine(config: &Config) -> Result<Engine> {
    let gateway = config.gateway.build()?;
    let dir = config.data_dir.as_ref().context("data_dir is not set (config file or VEIL_DATA_DIR)")?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(Engine::open(dir, gateway, config.clock(), config.engine_config())?)
}

fn serve(config: &Config) -> Result<()> {
    // The HTTP backend owns a blocking client, which must be built outside the async runtime.
    let engine = open_engine(config)?;
    let service = Arc::new(Service::new(engine).with_token(config.token.clone()));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.bind).await?;
        log::info!("listening on {}", listener.local_addr()?);
        server::serve(listener, service).await
    })?;
    Ok(())
}

fn ingest(config: &Config, file: &Path) -> Result<()> {
    let mut engine = open_engine(config)?;
    let reader = BufReader::new(File::open(file).with_context(|| format!("opening {}", file.display()))?);
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let imp: Impression = serde_json::from_str(&line).with_context(|| format!("{}:{}", file.display(), n + 1))?;
        let out = engine.ingest_impression(&imp)?;
        println!("{}", serde_json::to_string(&out)?);
    }
    Ok(())
}

fn filter(config: &Config, feed: &Path, out: Option<&Path>) -> Result<()> {
    let mut engine = open_engine(config)?;
    let text = std::fs::read_to_string(feed).with_context(|| format!("reading {}", feed.display()))?;
    let items = match serde_json::from_str(&text)? {
        FeedFile::Wrapped { items } | FeedFile::Bare(items) => items,
    };
    let result = engine.filter_feed(&items)?;
    let body = serde_json::to_string_pretty(&serde_json::json!({
        "kept": result.kept,
        "filtered": result.outcome.records,
        "unavailable": result.outcome.unavailable,
    }))?;
    match out {
        Some(path) => std::fs::write(path, body)?,
        None => println!("{body}"),
    }
    Ok(())
}

fn rules(config: &Config, command: RulesCommand) -> Result<()> {
    let mut engine = open_engine(config)?;
    match command {
        RulesCommand::List => {
            for rule in engine.state().rules.all() {
                println!("{}\t{}\t{}", rule.id, if rule.active { "active" } else { "inactive" }, rule.text);
            }
        }
        RulesCommand::Add { text } => println!("{}", serde_json::to_string(&engine.create_rule(&text)?)?),
    }
    Ok(())
}

fn print_table(rows: &[AccuracyRow]) {
    println!("method\tbucket\tusers\ttrials\tcorrect\tflagged\taccuracy");
    for r in rows {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.4}",
            r.method, r.bucket, r.users, r.trials, r.correct, r.flagged, r.accuracy
        );
    }
}

fn eval_proxy(config: &Config, args: ProxyArgs) -> Result<()> {
    if args.k < 2 {
        bail!("k must be at least 2");
    }
    let methods = if args.method.is_empty() { Method::ALL.to_vec() } else { args.method.clone() };
    let proxy =
        ProxyConfig { k: args.k, seed: args.seed, platform: config.engine.platform.clone(), workers: args.workers };
    let http = || -> Result<Gateway> {
        let mut section = config.gateway.clone();
        section.backend = BackendKind::Http;
        Ok(section.build()?)
    };
    let traces = match (args.planted, &args.dataset) {
        (Some(trials), _) => {
            let world = PlantedWorld::generate(&PlantedConfig {
                slate_size: args.k + 2,
                seed: args.seed,
                ..PlantedConfig::default()
            });
            let gateway = match args.backend {
                EvalBackend::Stub => Gateway::new(world.backend(args.seed)),
                EvalBackend::Http => http()?,
            };
            let mut traces = Vec::new();
            for &method in &methods {
                for u in 0..args.users {
                    let user = format!("S{}", u + 1);
                    let imps = world.impressions(&user, trials, &mut derive_rng(args.seed, &["planted", &user]));
                    let refs: Vec<_> = imps.iter().collect();
                    traces.push(run_proxy(&user, &refs, method, &gateway, &proxy));
                }
            }
            traces
        }
        (None, Some(dir)) => {
            let dataset = load_mind(dir)?;
            let gateway = match args.backend {
                EvalBackend::Stub => {
                    let predictions = (0..args.k).map(|i| format!("{{\"index\": {i}}}"));
                    Gateway::new(
                        bundled_stub(args.seed)?.with_script(PROXY_PREDICT.id, vec![ScriptEntry::one_of(predictions)]),
                    )
                }
                EvalBackend::Http => http()?,
            };
            let cohorts = bucket_users(&dataset, args.quota, &mut derive_rng(args.seed, &["cohorts"]));
            for c in cohorts.iter().filter(|c| c.shortfall) {
                log::warn!("bucket {} has {} clicks, short of the quota {}", c.bucket, c.clicks, args.quota);
            }
            run_cohorts(&dataset, &cohorts, &methods, &gateway, &proxy)
        }
        (None, None) => bail!("either --dataset or --planted is required"),
    };
    let rows = match &args.out {
        Some(path) => write_results(path, &traces)?,
        None => accuracy_table(&traces),
    };
    print_table(&rows);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Serve => serve(&config),
        Command::Eval(EvalCommand::Proxy(args)) => eval_proxy(&config, args),
        Command::Ingest { file } => ingest(&config, &file),
        Command::Filter { feed, out } => filter(&config, &feed, out.as_deref()),
        Command::Rules(command) => rules(&config, command),
    }
}
