use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fedchat_core::fedsim::{AdapterMode, QuantBits, RunConfig, TransportMode};
use fedchat_core::metrics::format_table;
use fedchat_service::commands::{self, ask_once};
use fedchat_service::{router, AppState, AskStatus, ServiceConfig};
use tracing::{error, info};

#[derive(Parser)]
#[command(name = "fedchat", version, about = "Federated context chatbot")]
struct Cli {
    /// Config file (default: $FEDCHAT_CONFIG, then ./fedchat.toml)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Lora,
    Prefix,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Full,
    Diff,
    Adapters,
}

#[derive(Subcommand)]
enum Command {
    /// Add the documents under DIR to the corpus store
    Ingest { dir: PathBuf },
    /// Run a federated training simulation and write the model and history
    Train {
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Local steps per round
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_enum)]
        transport: Option<Transport>,
        /// Quantize uplinks to this many bits (8)
        #[arg(long)]
        quant_bits: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training documents (default: the corpus store)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Base run settings as TOML; flags override it
        #[arg(long)]
        run_config: Option<PathBuf>,
        /// Model output (default: model_path from the config)
        #[arg(long)]
        out: Option<PathBuf>,
        /// History CSV output (default: history_path from the config)
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a model on held-out text
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        pairs: usize,
    },
    /// Build the embedding index for the corpus store
    Index,
    /// Serve the HTTP API
    Serve,
    /// Answer one question and print the sources
    Ask {
        question: String,
        #[arg(long)]
        context: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = ServiceConfig::discover(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { dir } => {
            let s = commands::ingest_dir(&config, &dir)?;
            println!(
                "documents added: {}\nblocks added: {}\ntotal blocks: {}",
                s.documents_added, s.blocks_added, s.total_blocks
            );
        }
        Command::Train {
            clients,
            rounds,
            steps,
            lr,
            mode,
            transport,
            quant_bits,
            seed,
            data,
            run_config,
            out,
            history,
        } => {
            let mut run = match run_config {
                Some(p) => RunConfig::from_toml(
                    &std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => RunConfig::default(),
            };
            if let Some(v) = clients {
                run.round.num_clients = v;
            }
            if let Some(v) = rounds {
                run.round.rounds = v;
            }
            if let Some(v) = steps {
                run.round.local_steps = v;
            }
            if let Some(v) = lr {
                run.round.lr = v;
            }
            if let Some(v) = seed {
                run.seed = v;
            }
            if let Some(m) = mode {
                run.adapter = match m {
                    Mode::Lora => AdapterMode::Lora,
                    Mode::Prefix => AdapterMode::Prefix,
                    Mode::Full => AdapterMode::None,
                };
            }
            if let Some(t) = transport {
                run.round.transport_mode = match t {
                    Transport::Full => TransportMode::Full,
                    Transport::Diff => TransportMode::Diff,
                    Transport::Adapters => TransportMode::AdaptersOnly,
                };
            }
            if let Some(b) = quant_bits {
                run.round.quant_bits = QuantBits::Bits(b);
            }
            let texts = commands::training_texts(&config, data.as_deref())?;
            let model_out = out.unwrap_or_else(|| config.model_path.clone());
            let history_out = history.unwrap_or_else(|| config.history_path.clone());
            commands::train(&run, &texts, &model_out, &history_out, |row| {
                info!(round = row.round, client = %row.client_id, loss = row.loss, "evaluated");
            })?;
            println!("model: {}\nhistory: {}", model_out.display(), history_out.display());
        }
        Command::Eval { model, data, pairs } => {
            let texts = commands::training_texts(&config, data.as_deref())?;
            let s = commands::evaluate(&model, &texts, pairs)?;
            println!("loss: {:.6}", s.loss);
            print!("{}", format_table(&[(model.display().to_string(), s.metrics)]));
        }
        Command::Index => {
            let n = commands::build_store_index(&config)?;
            println!("indexed {n} blocks into {}", config.index_path.display());
        }
        Command::Serve => serve(config)?,
        Command::Ask { question, context, k } => {
            let r = ask_once(&config, &question, context.as_deref(), k)?;
            match r.status {
                AskStatus::Ok => {
                    println!("{}", r.answer);
                    println!("sources:");
                    for s in &r.sources {
                        println!("  {} {:.4} {}", s.block_id, s.score, s.header);
                    }
                }
                AskStatus::NoContext => println!("no relevant context found"),
            }
        }
    }
    Ok(())
}

fn serve(config: ServiceConfig) -> Result<()> {
    let addr: SocketAddr = std::net::ToSocketAddrs::to_socket_addrs(&config.listen_addr)
        .with_context(|| format!("resolving {}", config.listen_addr))?
        .next()
        .with_context(|| format!("{} resolves to no address", config.listen_addr))?;
    let state = Arc::new(AppState::from_config(config)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        info!(%addr, "listening");
        let loader = state.clone();
        tokio::task::spawn_blocking(move || {
            if let Err(e) = loader.load_store() {
                error!("loading the corpus store failed: {e}");
                std::process::exit(1);
            }
        });
        let app = router(state);
        if let Err(e) = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
        {
            bail!("server error: {e}");
        }
        Ok(())
    })
}
