//! Shared config plumbing: the `key=value` format used by geometry and
//! latency override files, and the error type for every config surface.

use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("line {line}: invalid value for `{key}`: {message}")]
    Invalid {
        line: usize,
        key: String,
        message: String,
    },
    #[error("line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid timing: {0}")]
    Timing(String),
    #[error("{0}")]
    Parse(String),
}

/// Parse `key=value` lines; `#` starts a comment. Values keep their 1-based
/// line number for error reporting.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, (usize, String)>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: body.to_string(),
            });
        };
        let key = k.trim().to_string();
        if out.contains_key(&key) {
            return Err(ConfigError::Duplicate { line, key });
        }
        out.insert(key, (line, v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let kv = parse_kv("# header\n\nl2_ways = 16 # trailing\nslices=20\n").unwrap();
        assert_eq!(kv["l2_ways"], (3, "16".to_string()));
        assert_eq!(kv["slices"].1, "20");
    }

    #[test]
    fn rejects_garbage_and_duplicates() {
        assert!(matches!(
            parse_kv("a=1\nnonsense\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            parse_kv("a=1\na=2\n"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }
}
