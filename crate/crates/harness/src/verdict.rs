use peertest_core::{Outcome, Verdict};

use crate::profile::VerdictParser;

/// What a finished run left behind for verdict parsing.
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    /// `None` when the process was killed by a signal.
    pub exit_code: Option<i32>,
    pub output: String,
    /// Contents of XML report files, in path order.
    pub reports: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse failure: {0}")]
pub struct ParseFailure(pub String);

pub fn parse_verdicts(
    parser: VerdictParser,
    artifacts: &RunArtifacts,
) -> Result<Vec<Verdict>, ParseFailure> {
    match parser {
        VerdictParser::ExitCodeOnly => {
            let outcome = if artifacts.exit_code == Some(0) {
                Outcome::Pass
            } else {
                Outcome::Fail
            };
            Ok(vec![Verdict::new("suite", outcome)])
        }
        VerdictParser::TapLikeLines => parse_tap_like(&artifacts.output),
        VerdictParser::XmlReport => {
            if artifacts.reports.is_empty() {
                parse_xml(&[artifacts.output.as_str()])
            } else {
                let docs: Vec<&str> = artifacts.reports.iter().map(String::as_str).collect();
                parse_xml(&docs)
            }
        }
    }
}

/// `ok <name>`, `not ok <name>` and `error <name>` lines; everything else is
/// commentary.
pub fn parse_tap_like(output: &str) -> Result<Vec<Verdict>, ParseFailure> {
    let mut verdicts = Vec::new();
    for line in output.lines() {
        let line = line.trim_end_matches('\r');
        let parsed = if let Some(name) = line.strip_prefix("not ok ") {
            Some((name, Outcome::Fail))
        } else if let Some(name) = line.strip_prefix("ok ") {
            Some((name, Outcome::Pass))
        } else {
            line.strip_prefix("error ")
                .map(|name| (name, Outcome::Error))
        };
        if let Some((name, outcome)) = parsed {
            let name = name.trim();
            if !name.is_empty() {
                verdicts.push(Verdict::new(name, outcome));
            }
        }
    }
    if verdicts.is_empty() {
        return Err(ParseFailure(
            "no `ok`/`not ok`/`error` result lines in output".into(),
        ));
    }
    Ok(verdicts)
}

/// JUnit-style XML: each `testcase` is one verdict, failed by a `failure`
/// child and errored by an `error` child. Skipped cases are left out.
pub fn parse_xml(docs: &[&str]) -> Result<Vec<Verdict>, ParseFailure> {
    let mut verdicts = Vec::new();
    for text in docs {
        let Some(start) = text.find('<') else {
            continue;
        };
        let doc = roxmltree::Document::parse(&text[start..])
            .map_err(|e| ParseFailure(format!("malformed XML report: {e}")))?;
        for case in doc.descendants().filter(|n| n.has_tag_name("testcase")) {
            let name = case.attribute("name").unwrap_or("unnamed");
            let name = match case.attribute("classname").filter(|c| !c.is_empty()) {
                Some(class) => format!("{class}.{name}"),
                None => name.to_owned(),
            };
            let mut outcome = Some(Outcome::Pass);
            for child in case.children().filter(|c| c.is_element()) {
                match child.tag_name().name() {
                    "error" => outcome = Some(Outcome::Error),
                    "failure" if outcome != Some(Outcome::Error) => outcome = Some(Outcome::Fail),
                    "skipped" => outcome = None,
                    _ => {}
                }
            }
            if let Some(outcome) = outcome {
                verdicts.push(Verdict::new(name, outcome));
            }
        }
    }
    if verdicts.is_empty() {
        return Err(ParseFailure("no testcase elements in XML report".into()));
    }
    Ok(verdicts)
}
