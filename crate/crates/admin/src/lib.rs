//! Teacher command-line tool. Every command is a plain client of the
//! service's `/api/v1` endpoints.

pub mod client;
pub mod manifest;
pub mod roster;

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use client::Client;
use manifest::{encode_query, string_field, CourseworkManifest};

#[derive(Debug, thiserror::Error)]
pub enum AdminError {
    #[error("{0}")]
    Validation(String),
    #[error("roster line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    /// The service understood the request and refused it.
    #[error("{code}: {message}")]
    Rejected { code: String, message: String },
    #[error("not authorized: {0}")]
    Auth(String),
    #[error("cannot reach the service: {0}")]
    Transport(String),
}

impl AdminError {
    /// 1 for bad input, 2 for authentication and transport failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            AdminError::Validation(_)
            | AdminError::MalformedRow { .. }
            | AdminError::Rejected { .. } => 1,
            AdminError::Auth(_) | AdminError::Transport(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "peertest-admin",
    version,
    about = "Coursework setup and export for teachers"
)]
pub struct Cli {
    /// Base URL of the service.
    #[arg(long, global = true, default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// File holding the session token written by `login`.
    #[arg(long, global = true, default_value = ".peertest-token")]
    pub token_file: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Logs in and stores the session token.
    Login {
        #[arg(long)]
        username: String,
        /// Read from standard input when omitted.
        #[arg(long)]
        password: Option<String>,
    },
    /// Creates or updates a coursework from a manifest.
    Setup { manifest: PathBuf },
    /// Enrolls the students listed in a roster CSV.
    Roster {
        #[arg(long)]
        coursework: String,
        csv: PathBuf,
    },
    /// Forms, amends and shows peer groups.
    #[command(subcommand)]
    Groups(GroupsCommand),
    /// Shows or advances the coursework stage.
    #[command(subcommand)]
    Stage(StageCommand),
    /// Writes the activity log as TSV, for one student or the whole coursework.
    ExportLog {
        #[arg(long)]
        coursework: String,
        #[arg(long)]
        student: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Writes every feedback discussion as text.
    ExportThreads {
        #[arg(long)]
        coursework: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum GroupsCommand {
    /// Forms groups from the current enrollment.
    Form {
        #[arg(long)]
        coursework: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        group_size: usize,
    },
    /// Moves one student into another group.
    Amend {
        #[arg(long)]
        coursework: String,
        #[arg(long)]
        student: String,
        #[arg(long)]
        group: String,
    },
    /// Replaces the grouping with a table previously printed by `show`.
    Import {
        #[arg(long)]
        coursework: String,
        table: PathBuf,
    },
    /// Prints the grouping table, one group per line.
    Show {
        #[arg(long)]
        coursework: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum StageCommand {
    /// Moves the coursework to its next stage.
    Advance {
        #[arg(long)]
        coursework: String,
    },
    /// Prints the current stage.
    Show {
        #[arg(long)]
        coursework: String,
    },
}

/// Runs one command; results go to `out`, warnings to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), AdminError> {
    if let Command::Login { username, password } = &cli.command {
        let password = match password {
            Some(p) => p.clone(),
            None => read_password()?,
        };
        let mut client = Client::new(&cli.server, None)?;
        let token = client.login(username, &password)?;
        write_token(&cli.token_file, &token)?;
        return emit(
            out,
            &format!(
                "logged in as {username}; token saved to {}\n",
                cli.token_file.display()
            ),
        );
    }
    let client = Client::new(&cli.server, Some(read_token(&cli.token_file)?))?;
    match cli.command {
        Command::Login { .. } => unreachable!("handled above"),
        Command::Setup { manifest } => {
            let m = CourseworkManifest::load(&manifest)?;
            let applied = manifest::apply(&client, &m)?;
            let verb = if applied.created {
                "created"
            } else {
                "updated"
            };
            let uploads = if applied.uploaded.is_empty() {
                "no material changed".to_owned()
            } else {
                format!("uploaded {}", applied.uploaded.join(", "))
            };
            emit(
                out,
                &format!("{verb} coursework {} ({uploads})\n", applied.coursework_id),
            )
        }
        Command::Roster { coursework, csv } => {
            let roster = roster::read(&csv)?;
            for w in &roster.warnings {
                emit(err, &format!("warning: {w}\n"))?;
            }
            let id = resolve(&client, &coursework)?;
            let enrolled = roster::import(&client, &id, &roster)?;
            for e in &enrolled {
                let note = match (&e.initial_password, e.already_enrolled) {
                    (_, true) => "already enrolled".to_owned(),
                    (Some(pw), false) => format!("new account, password {pw}"),
                    (None, false) => "enrolled".to_owned(),
                };
                emit(out, &format!("{}\t{}\t{note}\n", e.username, e.pseudonym))?;
            }
            emit(out, &format!("{} students enrolled\n", enrolled.len()))
        }
        Command::Groups(g) => groups(&client, g, out),
        Command::Stage(StageCommand::Advance { coursework }) => {
            let id = resolve(&client, &coursework)?;
            let cw: Value = client.post(&format!("/courseworks/{id}/advance"), &json!({}))?;
            emit(out, &stage_line(&cw))
        }
        Command::Stage(StageCommand::Show { coursework }) => {
            let id = resolve(&client, &coursework)?;
            let cw: Value = client.get(&format!("/courseworks/{id}"))?;
            emit(out, &stage_line(&cw))
        }
        Command::ExportLog {
            coursework,
            student,
            output,
        } => {
            let id = resolve(&client, &coursework)?;
            let path = match student {
                Some(s) => format!("/courseworks/{id}/log/{}?format=tsv", encode_query(&s)),
                None => format!("/courseworks/{id}/log?format=tsv"),
            };
            deliver(out, output.as_deref(), &client.get_text(&path)?)
        }
        Command::ExportThreads { coursework, output } => {
            let id = resolve(&client, &coursework)?;
            deliver(
                out,
                output.as_deref(),
                &client.get_text(&format!("/courseworks/{id}/threads?format=text"))?,
            )
        }
    }
}

fn groups(client: &Client, cmd: GroupsCommand, out: &mut dyn Write) -> Result<(), AdminError> {
    let (coursework, request) = match cmd {
        GroupsCommand::Show { coursework } => {
            let id = resolve(client, &coursework)?;
            let view: Value = client.get(&format!("/courseworks/{id}/groups"))?;
            return emit(out, &grouping_text(&view));
        }
        GroupsCommand::Form {
            coursework,
            seed,
            group_size,
        } => (
            coursework,
            json!({"mode": "form", "seed": seed, "group_size": group_size}),
        ),
        GroupsCommand::Amend {
            coursework,
            student,
            group,
        } => (
            coursework,
            json!({"mode": "amend", "student": student, "group": group}),
        ),
        GroupsCommand::Import { coursework, table } => {
            let text = std::fs::read_to_string(&table)
                .map_err(|e| AdminError::Validation(format!("{}: {e}", table.display())))?;
            (coursework, json!({"mode": "import", "table": text}))
        }
    };
    let id = resolve(client, &coursework)?;
    let view: Value = client.put(&format!("/courseworks/{id}/groups"), &request)?;
    emit(out, &grouping_text(&view))
}

fn grouping_text(view: &Value) -> String {
    let mut text = view["table"].as_str().unwrap_or("").to_owned();
    if let Some(ungrouped) = view["ungrouped"].as_array().filter(|u| !u.is_empty()) {
        text.push_str(&format!("# {} students not yet grouped\n", ungrouped.len()));
    }
    if let Some(small) = view["undersized"].as_array().filter(|u| !u.is_empty()) {
        let ids: Vec<&str> = small.iter().filter_map(Value::as_str).collect();
        text.push_str(&format!("# undersized: {}\n", ids.join(", ")));
    }
    text
}

fn stage_line(cw: &Value) -> String {
    format!(
        "{}: stage {} ({})\n",
        cw["title"].as_str().unwrap_or("?"),
        cw["stage"],
        cw["stage_name"].as_str().unwrap_or("?")
    )
}

/// Accepts a coursework id or an exact title.
pub fn resolve(client: &Client, coursework: &str) -> Result<String, AdminError> {
    let by_title: Vec<Value> =
        client.get(&format!("/courseworks?title={}", encode_query(coursework)))?;
    match by_title.as_slice() {
        [one] => return string_field(one, "coursework_id"),
        [] => {}
        many => {
            return Err(AdminError::Validation(format!(
                "{} courseworks are titled {coursework:?}; pass the id instead",
                many.len()
            )))
        }
    }
    let cw: Value = client.get(&format!("/courseworks/{}", encode_query(coursework)))?;
    string_field(&cw, "coursework_id")
}

fn deliver(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<(), AdminError> {
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| AdminError::Validation(format!("{}: {e}", p.display()))),
        None => emit(out, text),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), AdminError> {
    out.write_all(text.as_bytes())
        .map_err(|e| AdminError::Transport(format!("cannot write output: {e}")))
}

fn read_password() -> Result<String, AdminError> {
    let mut line = String::new();
    io::stdin()
        .read_line(&mut line)
        .map_err(|e| AdminError::Validation(format!("cannot read password: {e}")))?;
    Ok(line.trim_end_matches(['\r', '\n']).to_owned())
}

fn read_token(path: &Path) -> Result<String, AdminError> {
    let token = std::fs::read_to_string(path).map_err(|_| {
        AdminError::Auth(format!(
            "no session token at {}; run `peertest-admin login` first",
            path.display()
        ))
    })?;
    Ok(token.trim().to_owned())
}

fn write_token(path: &Path, token: &str) -> Result<(), AdminError> {
    use std::os::unix::fs::OpenOptionsExt;
    let fail =
        |e: io::Error| AdminError::Validation(format!("cannot write {}: {e}", path.display()));
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .mode(0o600)
        .open(path)
        .map_err(fail)?;
    f.write_all(token.as_bytes()).map_err(fail)
}
