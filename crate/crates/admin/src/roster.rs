//! Roster CSV: `username,display_name[,campus]`, one student per row. A
//! header row starting with `username` is skipped.

use std::collections::HashMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::client::Client;
use crate::AdminError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RosterRow {
    pub line: u64,
    pub username: String,
    pub display_name: String,
    pub campus: Option<String>,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct Roster {
    pub rows: Vec<RosterRow>,
    pub warnings: Vec<String>,
}

pub fn read(path: &Path) -> Result<Roster, AdminError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        AdminError::Validation(format!("cannot read roster {}: {e}", path.display()))
    })?;
    parse(&text)
}

/// Parses a roster, keeping the first row for each username.
pub fn parse(text: &str) -> Result<Roster, AdminError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut roster = Roster::default();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AdminError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if i == 0
            && record
                .get(0)
                .is_some_and(|f| f.eq_ignore_ascii_case("username"))
        {
            continue;
        }
        if record.iter().all(str::is_empty) {
            continue;
        }
        let malformed = |reason: &str| AdminError::MalformedRow {
            line,
            reason: reason.to_owned(),
        };
        if record.len() > 3 {
            return Err(malformed("expected at most 3 columns"));
        }
        let username = record.get(0).unwrap_or("");
        let display_name = record.get(1).unwrap_or("");
        if username.is_empty() {
            return Err(malformed("empty username"));
        }
        if display_name.is_empty() {
            return Err(malformed("empty display name"));
        }
        if let Some(first) = seen.get(username) {
            roster.warnings.push(format!(
                "line {line}: duplicate username {username} (first on line {first}); skipped"
            ));
            continue;
        }
        seen.insert(username.to_owned(), line);
        roster.rows.push(RosterRow {
            line,
            username: username.to_owned(),
            display_name: display_name.to_owned(),
            campus: record.get(2).filter(|c| !c.is_empty()).map(str::to_owned),
        });
    }
    Ok(roster)
}

/// One enrolled student; `initial_password` is set for accounts the
/// service created with a generated password.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enrolled {
    pub username: String,
    pub pseudonym: String,
    pub already_enrolled: bool,
    pub initial_password: Option<String>,
}

pub fn import(
    client: &Client,
    coursework: &str,
    roster: &Roster,
) -> Result<Vec<Enrolled>, AdminError> {
    roster
        .rows
        .iter()
        .map(|row| {
            let body = json!({
                "username": row.username,
                "display_name": row.display_name,
                "campus": row.campus,
            });
            let r: Value = client.post(&format!("/courseworks/{coursework}/enroll"), &body)?;
            Ok(Enrolled {
                username: r["username"].as_str().unwrap_or(&row.username).to_owned(),
                pseudonym: r["pseudonym"].as_str().unwrap_or("").to_owned(),
                already_enrolled: r["already_enrolled"].as_bool().unwrap_or(false),
                initial_password: r["initial_password"].as_str().map(str::to_owned),
            })
        })
        .collect()
}
