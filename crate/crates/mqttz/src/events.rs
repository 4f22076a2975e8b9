//! Structured event log: one `key=value` record per line for
//! handshakes, authorization denials, missing-key skips and unseal
//! alarms. Operators tail it; tests read it back through the memory
//! sink.

use std::fmt::Write as _;
use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

enum Sink {
    Stderr,
    Discard,
    Memory(Arc<Mutex<Vec<String>>>),
    File(Mutex<std::fs::File>),
}

/// Cheaply cloneable handle to the broker's event stream.
#[derive(Clone)]
pub struct EventLog(Arc<Sink>);

impl EventLog {
    pub fn stderr() -> Self {
        EventLog(Arc::new(Sink::Stderr))
    }

    /// Swallow all events; used by benchmark runs that do not want log
    /// traffic in the measured path.
    pub fn discard() -> Self {
        EventLog(Arc::new(Sink::Discard))
    }

    /// Keep events in memory and hand back a reader for assertions.
    pub fn memory() -> (Self, Arc<Mutex<Vec<String>>>) {
        let lines = Arc::new(Mutex::new(Vec::new()));
        (EventLog(Arc::new(Sink::Memory(lines.clone()))), lines)
    }

    pub fn file(path: &std::path::Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(EventLog(Arc::new(Sink::File(Mutex::new(f)))))
    }

    /// Emit one record. `fields` are appended as `key=value` pairs;
    /// values with spaces are not escaped, so keep them token-shaped.
    pub fn emit(&self, event: &str, fields: &[(&str, &str)]) {
        let ts_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let mut line = format!("ts_ms={ts_ms} event={event}");
        for (k, v) in fields {
            let _ = write!(line, " {k}={v}");
        }
        match &*self.0 {
            Sink::Stderr => eprintln!("{line}"),
            Sink::Discard => {}
            Sink::Memory(lines) => lines.lock().expect("event log lock").push(line),
            Sink::File(f) => {
                let mut f = f.lock().expect("event log lock");
                let _ = writeln!(f, "{line}");
            }
        }
    }
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("EventLog(..)")
    }
}

/// Captures copies of every buffer a code path handles, for isolation
/// audits. Production configs leave it unset; the cost of an unset tap
/// is one `Option` check.
#[derive(Clone, Default)]
pub struct BufferTap(Arc<Mutex<Vec<Vec<u8>>>>);

impl BufferTap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, bytes: &[u8]) {
        self.0.lock().expect("tap lock").push(bytes.to_vec());
    }

    pub fn buffer_count(&self) -> usize {
        self.0.lock().expect("tap lock").len()
    }

    /// True when any recorded buffer contains `needle` as a contiguous
    /// byte subsequence.
    pub fn contains_subsequence(&self, needle: &[u8]) -> bool {
        let buffers = self.0.lock().expect("tap lock");
        buffers
            .iter()
            .any(|buf| buf.windows(needle.len()).any(|w| w == needle))
    }
}

impl std::fmt::Debug for BufferTap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BufferTap({} buffers)", self.buffer_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_sink_records_lines() {
        let (log, lines) = EventLog::memory();
        log.emit("auth_deny", &[("client", "bob"), ("topic", "x/y")]);
        let lines = lines.lock().unwrap();
        assert_eq!(lines.len(), 1);
        assert!(lines[0].contains("event=auth_deny"));
        assert!(lines[0].contains("client=bob"));
        assert!(lines[0].contains("topic=x/y"));
    }
}
