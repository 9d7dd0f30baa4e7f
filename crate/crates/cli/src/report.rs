//! Structured diagnostics on stderr and atomic artifact writes.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde::Serialize;

/// One `key=value` diagnostic line; values with spaces or quotes are quoted.
pub struct Line {
    text: String,
}

impl Line {
    pub fn new(level: &str, event: &str) -> Self {
        Self {
            text: format!("conlq level={level} event={event}"),
        }
    }

    pub fn field(mut self, key: &str, value: impl ToString) -> Self {
        let value = value.to_string();
        if value.is_empty() || value.contains(|c: char| c.is_whitespace() || c == '"' || c == '=') {
            let escaped = value.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n");
            let _ = write!(self.text, " {key}=\"{escaped}\"");
        } else {
            let _ = write!(self.text, " {key}={value}");
        }
        self
    }

    pub fn emit(self) {
        let _ = writeln!(io::stderr().lock(), "{}", self.text);
    }
}

/// Routes `log` records from the solver crate into the same line format.
struct StderrLogger;

impl Log for StderrLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Info
    }

    fn log(&self, record: &Record) {
        if self.enabled(record.metadata()) {
            Line::new(&record.level().as_str().to_lowercase(), "log")
                .field("target", record.target())
                .field("message", record.args())
                .emit();
        }
    }

    fn flush(&self) {}
}

pub fn install_logger() {
    static LOGGER: StderrLogger = StderrLogger;
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(LevelFilter::Info);
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> io::Result<PathBuf> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents.as_bytes())?;
        file.sync_all()?;
    }
    fs::rename(&tmp, &target).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(target)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> io::Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    write_atomic(dir, name, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotes_values_with_spaces() {
        let line = Line::new("error", "validation").field("assumption", "assumption-2 (Q psd)").field("grid_index", 3);
        assert_eq!(
            line.text,
            "conlq level=error event=validation assumption=\"assumption-2 (Q psd)\" grid_index=3"
        );
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(dir.path(), "a.csv", "x\n1\n").unwrap();
        write_atomic(dir.path(), "a.csv", "x\n2\n").unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("a.csv")]);
        assert_eq!(fs::read_to_string(dir.path().join("a.csv")).unwrap(), "x\n2\n");
    }
}
