//! Append-only JSON-lines episode logs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LogError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    /// Environment steps taken so far, including this episode.
    pub steps: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub score: f64,
    pub length: usize,
    pub task: String,
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Training episodes completed when the evaluation ran.
    pub episode: u64,
    pub steps: u64,
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    pub mode: String,
    pub task: String,
    pub variant: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Episode(EpisodeRecord),
    Eval(EvalRecord),
}

impl LogRecord {
    pub fn episode(&self) -> u64 {
        match self {
            Self::Episode(r) => r.episode,
            Self::Eval(r) => r.episode,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Parses a log, checking that episode indices never decrease.
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, LogError> {
    let mut out: Vec<LogRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| LogError::Parse { line: i + 1, message };
        let rec: LogRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if let Some(prev) = out.last() {
            if rec.episode() < prev.episode() {
                return Err(err(format!("episode {} after {}", rec.episode(), prev.episode())));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, LogError> {
    let text = std::fs::read_to_string(path).map_err(|e| LogError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_log(&text)
}

/// Single writer that flushes after every record.
pub struct LogWriter {
    out: BufWriter<File>,
    path: String,
}

impl LogWriter {
    fn open(path: &Path, append: bool) -> Result<Self, LogError> {
        let io = |e: std::io::Error| LogError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.display().to_string(),
        })
    }

    pub fn create(path: &Path) -> Result<Self, LogError> {
        Self::open(path, false)
    }

    pub fn append(path: &Path) -> Result<Self, LogError> {
        Self::open(path, true)
    }

    pub fn write(&mut self, rec: &LogRecord) -> Result<(), LogError> {
        let io = |e: std::io::Error| LogError::Io {
            path: self.path.clone(),
            message: e.to_string(),
        };
        writeln!(self.out, "{}", rec.to_line()).map_err(io)?;
        self.out.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(i: u64) -> LogRecord {
        LogRecord::Episode(EpisodeRecord {
            episode: i,
            steps: 10 * i,
            ret: 0.5,
            score: 0.5,
            length: 10,
            task: "unstack".into(),
            variant: "training".into(),
            atoms: None,
            rules: None,
        })
    }

    #[test]
    fn lines_round_trip() {
        let text: String = (1..4).map(|i| episode(i).to_line() + "\n").collect();
        assert!(text.starts_with(r#"{"kind":"episode","episode":1,"steps":10,"return":0.5"#));
        assert_eq!(parse_log(&text).unwrap(), vec![episode(1), episode(2), episode(3)]);
    }

    #[test]
    fn errors_name_the_line() {
        let text = format!("{}\n{}\n", episode(2).to_line(), episode(1).to_line());
        assert!(matches!(parse_log(&text), Err(LogError::Parse { line: 2, .. })));
        assert!(matches!(parse_log("\n{oops"), Err(LogError::Parse { line: 2, .. })));
    }
}
