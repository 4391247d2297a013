//! Runner profiles: how to compile and run a test suite for one language.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const PLACEHOLDERS: [&str; 3] = ["{solution_dir}", "{tests_dir}", "{work_dir}"];

/// `run_step` value selecting the built-in line-script interpreter.
pub const BUILTIN_LINE_SCRIPT: &str = "builtin:line-script";
pub const LINE_SCRIPT_PROFILE_ID: &str = "line-script";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictParser {
    ExitCodeOnly,
    TapLikeLines,
    XmlReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    pub wall_seconds: u64,
    pub cpu_seconds: u64,
    pub memory_bytes: u64,
    pub output_bytes: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            wall_seconds: 10,
            cpu_seconds: 10,
            memory_bytes: 256 * 1024 * 1024,
            output_bytes: 64 * 1024,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.wall_seconds == 0
            || self.cpu_seconds == 0
            || self.memory_bytes == 0
            || self.output_bytes == 0
        {
            return Err(HarnessError::Profile(
                "all limits must be strictly positive".into(),
            ));
        }
        if self.wall_seconds < self.cpu_seconds {
            return Err(HarnessError::Profile(format!(
                "wall_seconds ({}) must be at least cpu_seconds ({})",
                self.wall_seconds, self.cpu_seconds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerProfile {
    pub profile_id: String,
    pub language_label: String,
    #[serde(default)]
    pub compile_steps: Vec<String>,
    pub run_step: String,
    pub verdict_parser: VerdictParser,
    #[serde(default)]
    pub limits: Limits,
}

impl RunnerProfile {
    /// The interpreter that ships with the platform; needs nothing beyond a
    /// POSIX shell.
    pub fn line_script() -> Self {
        Self {
            profile_id: LINE_SCRIPT_PROFILE_ID.into(),
            language_label: "line-script (POSIX sh solutions)".into(),
            compile_steps: Vec::new(),
            run_step: BUILTIN_LINE_SCRIPT.into(),
            verdict_parser: VerdictParser::TapLikeLines,
            limits: Limits::default(),
        }
    }

    pub fn is_line_script(&self) -> bool {
        self.run_step.trim() == BUILTIN_LINE_SCRIPT
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.profile_id.trim().is_empty() {
            return Err(HarnessError::Profile("profile_id is empty".into()));
        }
        self.limits.validate()?;
        if self.is_line_script() {
            if !self.compile_steps.is_empty() || self.verdict_parser != VerdictParser::TapLikeLines
            {
                return Err(HarnessError::Profile(format!(
                    "{BUILTIN_LINE_SCRIPT} takes no compile steps and reports tap_like_lines"
                )));
            }
            return Ok(());
        }
        for template in self
            .compile_steps
            .iter()
            .chain(std::iter::once(&self.run_step))
        {
            check_template(template)?;
        }
        Ok(())
    }
}

fn check_template(template: &str) -> Result<(), HarnessError> {
    let words = shlex::split(template)
        .ok_or_else(|| HarnessError::Profile(format!("unbalanced quotes in `{template}`")))?;
    if words.is_empty() {
        return Err(HarnessError::Profile("empty command template".into()));
    }
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let tail = &rest[start..];
        let Some(end) = tail.find('}') else { break };
        let token = &tail[..=end];
        if !PLACEHOLDERS.contains(&token) {
            return Err(HarnessError::Profile(format!(
                "undeclared placeholder {token} in `{template}`"
            )));
        }
        rest = &tail[end + 1..];
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Dirs {
    pub solution_dir: PathBuf,
    pub tests_dir: PathBuf,
    pub work_dir: PathBuf,
}

/// Splits a command template into argv and substitutes placeholders in
/// each word. Templates are validated first, so this only fails on quoting.
pub fn expand(template: &str, dirs: &Dirs) -> Result<Vec<String>, HarnessError> {
    let words = shlex::split(template)
        .ok_or_else(|| HarnessError::Profile(format!("unbalanced quotes in `{template}`")))?;
    let sub = |p: &Path| p.to_string_lossy().into_owned();
    Ok(words
        .into_iter()
        .map(|w| {
            w.replace("{solution_dir}", &sub(&dirs.solution_dir))
                .replace("{tests_dir}", &sub(&dirs.tests_dir))
                .replace("{work_dir}", &sub(&dirs.work_dir))
        })
        .collect())
}

/// File form of a profile; `limits` may be left to the deployment default.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileEntry {
    profile_id: String,
    language_label: String,
    #[serde(default)]
    compile_steps: Vec<String>,
    run_step: String,
    verdict_parser: VerdictParser,
    limits: Option<Limits>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProfileFile {
    Many { profile: Vec<ProfileEntry> },
    One(ProfileEntry),
}

pub fn parse_profiles(text: &str) -> Result<Vec<RunnerProfile>, HarnessError> {
    parse_profiles_with(text, Limits::default())
}

/// Like [`parse_profiles`], filling absent `[limits]` tables with `defaults`.
pub fn parse_profiles_with(
    text: &str,
    defaults: Limits,
) -> Result<Vec<RunnerProfile>, HarnessError> {
    let parsed: ProfileFile =
        toml::from_str(text).map_err(|e| HarnessError::Profile(e.to_string()))?;
    let entries = match parsed {
        ProfileFile::Many { profile } => profile,
        ProfileFile::One(p) => vec![p],
    };
    let profiles: Vec<RunnerProfile> = entries
        .into_iter()
        .map(|e| RunnerProfile {
            profile_id: e.profile_id,
            language_label: e.language_label,
            compile_steps: e.compile_steps,
            run_step: e.run_step,
            verdict_parser: e.verdict_parser,
            limits: e.limits.unwrap_or(defaults),
        })
        .collect();
    for p in &profiles {
        p.validate()
            .map_err(|e| HarnessError::Profile(format!("profile `{}`: {e}", p.profile_id)))?;
    }
    Ok(profiles)
}

/// Loads a profile file holding either one profile at top level or a
/// `[[profile]]` array.
pub fn load_profiles(path: &Path, defaults: Limits) -> Result<Vec<RunnerProfile>, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Profile(format!("{}: {e}", path.display())))?;
    parse_profiles_with(&text, defaults)
        .map_err(|e| HarnessError::Profile(format!("{}: {e}", path.display())))
}
