//! Access control lists in a minimal mosquitto-compatible format.
//!
//! ```text
//! # comment lines start with '#'
//! user alice
//! topic write sensors/ecg/alice
//! topic read alerts/#
//!
//! user monitor
//! topic readwrite sensors/#
//! ```
//!
//! A `user <client_id>` line opens a stanza; each following `topic
//! [read|write|readwrite] <pattern>` line attaches to it. A pattern is a
//! literal topic path, optionally ending in a full-segment `#` wildcard
//! that matches any suffix (including the empty one). When the
//! permission word is omitted, `readwrite` is assumed, as in mosquitto.
//! Absence of a matching entry means deny.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::protocol::{ClientId, TopicName};

#[derive(Debug, Error)]
pub enum AclError {
    #[error("acl parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("acl file error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Permission {
    Read,
    Write,
    ReadWrite,
}

impl Permission {
    fn covers(self, action: Action) -> bool {
        matches!(
            (self, action),
            (Permission::Read, Action::Read)
                | (Permission::Write, Action::Write)
                | (Permission::ReadWrite, _)
        )
    }
}

#[derive(Debug, Clone)]
struct Entry {
    pattern: String,
    permission: Permission,
}

/// Per-client topic permissions; default-deny.
#[derive(Debug, Clone, Default)]
pub struct AclTable {
    entries: HashMap<String, Vec<Entry>>,
}

impl AclTable {
    /// Parse the line format above. Later stanzas for the same client
    /// append to the earlier ones.
    pub fn parse(text: &str) -> Result<Self, AclError> {
        let mut table = AclTable::default();
        let mut current_user: Option<String> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut words = line.split_whitespace();
            match words.next() {
                Some("user") => {
                    let name = words.next().ok_or_else(|| AclError::Parse {
                        line: line_no,
                        reason: "user line without a client id".into(),
                    })?;
                    if words.next().is_some() {
                        return Err(AclError::Parse {
                            line: line_no,
                            reason: "trailing tokens after client id".into(),
                        });
                    }
                    let id = ClientId::new(name).map_err(|e| AclError::Parse {
                        line: line_no,
                        reason: e.to_string(),
                    })?;
                    current_user = Some(id.as_str().to_string());
                    table.entries.entry(id.as_str().to_string()).or_default();
                }
                Some("topic") => {
                    let user = current_user.as_ref().ok_or_else(|| AclError::Parse {
                        line: line_no,
                        reason: "topic line before any user line".into(),
                    })?;
                    let first = words.next().ok_or_else(|| AclError::Parse {
                        line: line_no,
                        reason: "topic line without a pattern".into(),
                    })?;
                    let (permission, pattern) = match first {
                        "read" => (Permission::Read, words.next()),
                        "write" => (Permission::Write, words.next()),
                        "readwrite" => (Permission::ReadWrite, words.next()),
                        pattern => (Permission::ReadWrite, Some(pattern)),
                    };
                    let pattern = pattern.ok_or_else(|| AclError::Parse {
                        line: line_no,
                        reason: "topic line without a pattern".into(),
                    })?;
                    if words.next().is_some() {
                        return Err(AclError::Parse {
                            line: line_no,
                            reason: "trailing tokens after pattern".into(),
                        });
                    }
                    validate_pattern(pattern).map_err(|reason| AclError::Parse {
                        line: line_no,
                        reason,
                    })?;
                    table
                        .entries
                        .get_mut(user)
                        .expect("stanza user was inserted")
                        .push(Entry {
                            pattern: pattern.to_string(),
                            permission,
                        });
                }
                Some(other) => {
                    return Err(AclError::Parse {
                        line: line_no,
                        reason: format!("unknown directive `{other}`"),
                    });
                }
                None => unreachable!("blank lines are skipped"),
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, AclError> {
        AclTable::parse(&std::fs::read_to_string(path)?)
    }

    /// True when at least one stanza exists for this client, regardless
    /// of its patterns; used to gate the handshake.
    pub fn knows_client(&self, id: &ClientId) -> bool {
        self.entries.contains_key(id.as_str())
    }

    /// Allow iff some entry for the client matches the topic with a
    /// permission covering the action. Total function: unknown clients
    /// and unmatched topics are simply denied.
    pub fn authorize(&self, id: &ClientId, topic: &TopicName, action: Action) -> bool {
        self.entries
            .get(id.as_str())
            .map(|entries| {
                entries.iter().any(|entry| {
                    entry.permission.covers(action) && pattern_matches(&entry.pattern, topic.as_str())
                })
            })
            .unwrap_or(false)
    }
}

fn validate_pattern(pattern: &str) -> Result<(), String> {
    if pattern.is_empty() {
        return Err("empty pattern".into());
    }
    let segments: Vec<&str> = pattern.split('/').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err("pattern has an empty segment".into());
        }
        if seg.contains('#') && (*seg != "#" || i != segments.len() - 1) {
            return Err("`#` is only valid as the final full segment".into());
        }
    }
    Ok(())
}

/// `a/b/#` matches `a/b` and any topic under it; otherwise comparison is
/// segment-exact.
fn pattern_matches(pattern: &str, topic: &str) -> bool {
    match pattern.strip_suffix("#") {
        Some(prefix) => {
            let prefix = prefix.strip_suffix('/').unwrap_or(prefix);
            if prefix.is_empty() {
                // Pattern was a bare `#`.
                return true;
            }
            topic == prefix || topic.strip_prefix(prefix).is_some_and(|r| r.starts_with('/'))
        }
        None => pattern == topic,
    }
}
