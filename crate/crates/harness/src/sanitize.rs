//! Output sanitization: hides where a run executed on the host, nothing else.

use std::path::{Path, PathBuf};

pub const RUN_TOKEN: &str = "<run>";

/// Replaces host path prefixes with [`RUN_TOKEN`].
///
/// A prefix matches wherever it occurs as long as the next character does not
/// continue a path component, so `/tmp/x` matches `/tmp` but `/tmpfoo` does
/// not. Longer prefixes are replaced first.
#[derive(Debug, Clone)]
pub struct Sanitizer {
    prefixes: Vec<String>,
}

fn continues_component(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '.' | '_' | '-')
}

impl Sanitizer {
    pub fn new<I, P>(paths: I) -> Self
    where
        I: IntoIterator<Item = P>,
        P: AsRef<Path>,
    {
        let mut prefixes: Vec<String> = Vec::new();
        for p in paths {
            let p = p.as_ref();
            let mut variants = vec![p.to_path_buf()];
            if let Ok(c) = p.canonicalize() {
                variants.push(c);
            }
            for v in variants {
                let s = v.to_string_lossy().trim_end_matches('/').to_string();
                // Never "/" itself, and nothing that could overlap the token.
                if s.len() > 1
                    && s.starts_with('/')
                    && !s.contains(['<', '>'])
                    && !prefixes.contains(&s)
                {
                    prefixes.push(s);
                }
            }
        }
        prefixes.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Self { prefixes }
    }

    /// The work directory of a run plus host temp locations.
    pub fn for_run(sandbox_root: &Path, extra: &[PathBuf]) -> Self {
        let mut paths = vec![sandbox_root.to_path_buf()];
        paths.extend(extra.iter().cloned());
        paths.push(std::env::temp_dir());
        Self::new(paths)
    }

    pub fn prefixes(&self) -> &[String] {
        &self.prefixes
    }

    pub fn apply(&self, text: &str) -> String {
        let mut out = text.to_owned();
        for prefix in &self.prefixes {
            if out.contains(prefix.as_str()) {
                out = replace_bounded(&out, prefix);
            }
        }
        out
    }
}

fn replace_bounded(text: &str, prefix: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(prefix) {
        let after = &rest[pos + prefix.len()..];
        out.push_str(&rest[..pos]);
        if after.chars().next().is_some_and(continues_component) {
            out.push_str(prefix);
        } else {
            out.push_str(RUN_TOKEN);
        }
        rest = after;
    }
    out.push_str(rest);
    out
}

/// Sanitizes `raw` for a run executed under `sandbox_root`.
pub fn sanitize_output(raw: &str, sandbox_root: &Path) -> String {
    Sanitizer::for_run(sandbox_root, &[]).apply(raw)
}
