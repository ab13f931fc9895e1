use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use g4r_core::gateway::mock::EchoProvider;
use g4r_core::gateway::{ApiKey, CompletionProvider, OpenAiClient, DEFAULT_BASE_URL, DEFAULT_MODEL_ID};
use g4r_core::{ChatEngine, EngineSettings, PartialSettings, Store};
use g4r_server::config::DEFAULT_GUEST_CREATE_LIMIT;
use g4r_server::sim::{parse_scripts, run_script, verify_capture};
use g4r_server::tools::{merge_files, pivot_file};
use g4r_server::{serve, AppState, ServerConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "g4r", version, about = "Chat interfaces for survey studies, with transcript capture and export")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Join a message download onto survey responses by g4r_pid.
    Merge(MergeArgs),
    /// Turn a message download into one row per participant.
    Pivot(PivotArgs),
    /// Drive scripted participants through a running service and check the download.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "G4R_BIND_ADDR", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, env = "G4R_DB_PATH", default_value = "g4r.db")]
    db_path: PathBuf,
    /// Key used for interfaces that do not bring their own.
    #[arg(long, env = "G4R_DEFAULT_API_KEY", hide_env_values = true)]
    default_api_key: Option<String>,
    /// Base URL of an OpenAI-compatible chat completions API.
    #[arg(long, env = "G4R_UPSTREAM_URL", default_value = DEFAULT_BASE_URL)]
    upstream_url: String,
    #[arg(long, env = "G4R_MODEL_ID", default_value = DEFAULT_MODEL_ID)]
    model_id: String,
    /// Seconds to wait for the upstream API.
    #[arg(long, env = "G4R_UPSTREAM_TIMEOUT", default_value_t = 60)]
    upstream_timeout: u64,
    /// Public base URL for snippets and preview links; derived from the Host header when unset.
    #[arg(long, env = "G4R_PUBLIC_URL")]
    public_url: Option<String>,
    /// Guest interface creations per client address per day; 0 disables the limit.
    #[arg(long, env = "G4R_GUEST_CREATE_LIMIT", default_value_t = DEFAULT_GUEST_CREATE_LIMIT)]
    guest_create_limit: u32,
    /// Trust X-Forwarded-For and X-Forwarded-Proto from a reverse proxy.
    #[arg(long, env = "G4R_TRUST_PROXY")]
    trust_proxy: bool,
    /// Directory with the built widget and console (index.html, assets/).
    #[arg(long, env = "G4R_WEB_DIR")]
    web_dir: Option<PathBuf>,
    /// Answer with "echo: <message>" instead of calling the upstream API.
    #[arg(long, env = "G4R_ECHO_PROVIDER")]
    echo_provider: bool,
    /// Keep model replies verbatim even when they repeat the system prompt,
    /// prepend/append text or API key.
    #[arg(long, env = "G4R_KEEP_RAW_REPLIES")]
    keep_raw_replies: bool,
}

#[derive(Args)]
struct MergeArgs {
    /// Message CSV downloaded from the service.
    #[arg(long)]
    messages: PathBuf,
    /// Survey CSV with a g4r_pid column.
    #[arg(long)]
    survey: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to list transcript participants missing from the survey.
    #[arg(long)]
    unmatched: Option<PathBuf>,
    /// Extra header rows under the survey header (Qualtrics exports have 2).
    #[arg(long, default_value_t = 0)]
    skip_rows: usize,
}

#[derive(Args)]
struct PivotArgs {
    #[arg(long)]
    messages: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Script CSV: participant_id,message[,expected_cap_at].
    #[arg(long)]
    scripts: PathBuf,
    #[arg(long)]
    base_url: String,
    #[arg(long, default_value_t = 10)]
    concurrency: usize,
    /// max_messages for the interface the simulation creates.
    #[arg(long)]
    max_messages: Option<i64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    match cli.command {
        Command::Serve(args) => report(run_serve(args)),
        Command::Merge(args) => match merge_files(
            &args.messages,
            &args.survey,
            &args.out,
            args.unmatched.as_deref(),
            args.skip_rows,
        ) {
            Ok(summary) => {
                println!(
                    "merged {} survey rows ({} with messages, {} message column pairs) into {}",
                    summary.survey_rows,
                    summary.matched_rows,
                    summary.width,
                    args.out.display()
                );
                if !summary.unmatched.is_empty() {
                    eprintln!(
                        "{} participant(s) with messages have no survey row:",
                        summary.unmatched.len()
                    );
                    for (pid, n) in &summary.unmatched {
                        eprintln!("  {pid} ({n} exchanges)");
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code())
            }
        },
        Command::Pivot(args) => match pivot_file(&args.messages, &args.out) {
            Ok(summary) => {
                println!(
                    "wrote {} participants with {} message column pairs to {}",
                    summary.participants,
                    summary.width,
                    args.out.display()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code())
            }
        },
        Command::Simulate(args) => match run_simulate(args) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
    }
}

fn report(result: anyhow::Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")
}

fn run_serve(args: ServeArgs) -> anyhow::Result<()> {
    let store = Arc::new(
        Store::open(&args.db_path).with_context(|| format!("opening {}", args.db_path.display()))?,
    );
    let (provider, default_key): (Arc<dyn CompletionProvider>, _) = if args.echo_provider {
        tracing::warn!("using the echo provider; no upstream API will be called");
        (
            Arc::new(EchoProvider),
            ApiKey::new(args.default_api_key.unwrap_or_else(|| "echo".into())),
        )
    } else {
        let client = OpenAiClient::new(&args.upstream_url, Duration::from_secs(args.upstream_timeout))
            .context("configuring upstream client")?;
        (Arc::new(client), args.default_api_key.and_then(ApiKey::new))
    };
    if default_key.is_none() {
        tracing::warn!("no default API key; interfaces without their own key cannot chat");
    }
    let mut engine_settings = EngineSettings::new(args.model_id, default_key);
    engine_settings.redact_replies = !args.keep_raw_replies;
    let engine = Arc::new(ChatEngine::new(store, provider, engine_settings));
    let config = ServerConfig {
        public_url: args.public_url,
        guest_create_limit: args.guest_create_limit,
        trust_proxy: args.trust_proxy,
        web_dir: args.web_dir,
        ..ServerConfig::default()
    };
    let state = Arc::new(AppState::new(engine, config));

    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await
        .context("serving")
    })
}

fn run_simulate(args: SimulateArgs) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(&args.scripts)
        .with_context(|| format!("reading {}", args.scripts.display()))?;
    let scripts = parse_scripts(text.as_bytes())?;
    let partial = PartialSettings {
        max_messages: args.max_messages,
        ..Default::default()
    };
    runtime()?.block_on(async move {
        let (report, client) = run_script(&args.base_url, &scripts, partial, args.concurrency).await?;
        let csv = client.download_csv(report.interface.interface_id.as_str()).await?;
        println!(
            "{} participants, {} successful exchanges in {:.2?} (interface {})",
            report.scripts.len(),
            report.successful_exchanges(),
            report.elapsed,
            report.interface.interface_id
        );
        match verify_capture(&report, &csv) {
            Ok(()) => {
                println!("capture verified: every exchange present once, in order");
                Ok(ExitCode::SUCCESS)
            }
            Err(discrepancies) => {
                println!("{} discrepancies:", discrepancies.len());
                for d in &discrepancies {
                    println!("  {d}");
                }
                Ok(ExitCode::FAILURE)
            }
        }
    })
}
