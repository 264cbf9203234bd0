use std::io::IsTerminal;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use e2t_client::{Client, ClientError, RunRequest};
use e2t_core::cetmae::Preset;
use e2t_core::pipeline::{GradcheckReport, Overrides};
use e2t_core::ErrorKind;
use serde_json::Value;
use tracing_subscriber::EnvFilter;

/// Exit status when the client cannot reach or understand the service.
const EXIT_UNAVAILABLE: u8 = 69;

#[derive(Parser)]
#[command(name = "e2t", version, about = "EEG-text pretraining and EEG-to-text decoding")]
struct Cli {
    /// Use a running service instead of an in-process one.
    #[arg(long, global = true, value_name = "URL")]
    server: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (manifest, feature files, vocabulary).
    GenData(RunArgs),
    /// Text-encoder warm-up followed by masked-autoencoder pretraining.
    Pretrain(RunArgs),
    /// Fine-tune the decoder on top of the pretrained EEG modules.
    Finetune(RunArgs),
    /// Decode the test split and write score reports.
    Eval(RunArgs),
    /// Finite-difference check of every differentiable op and the full loss.
    Gradcheck(RunArgs),
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration, merged over the preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed for data, splits, initialization and training.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Model and training scale: desk or paper.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Output root; each command reads and writes its own subdirectory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn fail(kind: ErrorKind, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(kind.exit_code() as u8)
}

fn init_logging() -> Result<(), String> {
    let level = std::env::var("E2T_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        return Err(format!("E2T_LOG_LEVEL must be error, info or debug, got {level:?}"));
    }
    let filter = EnvFilter::new(format!("warn,e2t_core={level},e2t_service={level},e2t={level}"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    Ok(())
}

fn request(args: &RunArgs) -> Result<RunRequest, (ErrorKind, String)> {
    let config = match &args.config {
        None => Value::Null,
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| (ErrorKind::Config, format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| (ErrorKind::Config, format!("{}: {e}", p.display())))?
        }
    };
    let preset = match &args.preset {
        None => None,
        Some(s) => Some(s.parse::<Preset>().map_err(|e| (ErrorKind::Config, e.to_string()))?),
    };
    Ok(RunRequest {
        config,
        overrides: Overrides {
            preset,
            seed: args.seed,
            out_dir: args.out.clone(),
        },
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(m) = init_logging() {
        return fail(ErrorKind::Config, m);
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    rt.block_on(run(cli))
}

async fn run(cli: Cli) -> ExitCode {
    let (name, args) = match &cli.command {
        Cmd::Serve { addr } => {
            let listener = match tokio::net::TcpListener::bind(addr).await {
                Ok(l) => l,
                Err(e) => return fail(ErrorKind::Io, format!("bind {addr}: {e}")),
            };
            tracing::info!(addr = %listener.local_addr().map(|a| a.to_string()).unwrap_or_default(), "serving");
            return match e2t_service::serve(listener).await {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(ErrorKind::Io, e),
            };
        }
        Cmd::GenData(a) => ("gen-data", a),
        Cmd::Pretrain(a) => ("pretrain", a),
        Cmd::Finetune(a) => ("finetune", a),
        Cmd::Eval(a) => ("eval", a),
        Cmd::Gradcheck(a) => ("gradcheck", a),
    };
    let req = match request(args) {
        Ok(r) => r,
        Err((kind, m)) => return fail(kind, m),
    };
    let (client, _server) = match &cli.server {
        Some(url) => (Client::new(url), None),
        None => match e2t_service::spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await {
            Ok((addr, handle)) => (Client::new(&format!("http://{addr}")), Some(handle)),
            Err(e) => return fail(ErrorKind::Io, format!("in-process server: {e}")),
        },
    };
    match client.run(name, &req).await {
        Ok(out) if name == "gradcheck" => {
            let report: GradcheckReport = match serde_json::from_value(out) {
                Ok(r) => r,
                Err(e) => return fail(ErrorKind::Contract, e),
            };
            print!("{}", report.table());
            if report.pass {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: gradient check failed");
                ExitCode::from(ErrorKind::Numeric.exit_code() as u8)
            }
        }
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
            ExitCode::SUCCESS
        }
        Err(ClientError::Remote(body)) => {
            eprintln!("error: {}", body.message);
            ExitCode::from(body.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_UNAVAILABLE)
        }
    }
}
