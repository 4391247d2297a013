use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use peertest_core::Role;
use peertest_server::{Platform, Server, ServerConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "peertest-server",
    version,
    about = "Peer-testing platform service"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the service until SIGINT or SIGTERM.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Creates a teacher account; prints the password when none is given.
    AddTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        username: String,
        #[arg(long)]
        display_name: String,
        #[arg(long)]
        password: Option<String>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve { config } => {
            let server = Server::start(ServerConfig::load(&config)?)?;
            let runtime = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()?;
            runtime.block_on(wait_for_signal())?;
            tracing::info!("shutting down; in-flight runs finish, queued runs persist");
            server.shutdown()
        }
        Command::AddTeacher {
            config,
            username,
            display_name,
            password,
        } => {
            let platform = Platform::new(ServerConfig::load(&config)?)?;
            let generated = password.is_none();
            let password = password.unwrap_or_else(peertest_server::auth::generate_password);
            let user = platform
                .create_user(&username, &display_name, Role::Teacher, None, &password)
                .map_err(|e| anyhow::anyhow!(e.body.message))?;
            println!("created teacher {} ({})", user.username, user.user_id);
            if generated {
                println!("password: {password}");
            }
            Ok(())
        }
    }
}

async fn wait_for_signal() -> anyhow::Result<()> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate())?;
    tokio::select! {
        r = tokio::signal::ctrl_c() => r?,
        _ = term.recv() => {}
    }
    Ok(())
}
