use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use timbre_core::config::RunConfig;
use timbre_service::{router, AppState};

#[derive(Parser)]
#[command(name = "timbre-service", version, about = "HTTP inference service")]
struct Args {
    #[arg(long, env = "TIMBRE_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides service.bind.
    #[arg(long)]
    bind: Option<String>,
}

#[tokio::main]
async fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let mut cfg = match RunConfig::load(args.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return std::process::ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(bind) = args.bind {
        cfg.service.bind = bind;
    }
    let addr: SocketAddr = match cfg.service.bind.parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: service.bind {:?}: {e}", cfg.service.bind);
            return std::process::ExitCode::from(2);
        }
    };
    let state = AppState::new(cfg);
    // Listen right away; requests get 503 until the checkpoints are in memory.
    tokio::spawn(state.clone().load_models());
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: bind {addr}: {e}");
            return std::process::ExitCode::from(4);
        }
    };
    tracing::info!(%addr, "listening");
    if let Err(e) = axum::serve(listener, router(state)).await {
        eprintln!("error: {e}");
        return std::process::ExitCode::from(4);
    }
    std::process::ExitCode::SUCCESS
}
