//! Labelled review records and their on-disk formats.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Negative, Label::Neutral, Label::Positive];
    pub const NAMES: [&'static str; 3] = ["negative", "neutral", "positive"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Exact, case-sensitive match on the lowercase names.
impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| format!("unknown label {s:?} (expected one of negative, neutral, positive)"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: Label,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: Label) -> Self {
        Self { text: text.into(), label }
    }
}

pub type LabeledDataset = Vec<LabeledExample>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// `.csv` means CSV; anything else is treated as JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

pub fn ingest(path: impl AsRef<Path>, format: DataFormat) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let data = match format {
        DataFormat::Jsonl => parse_jsonl(&text)?,
        DataFormat::Csv => parse_csv(&text)?,
    };
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("no records in {}", path.as_ref().display())));
    }
    Ok(data)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    text: String,
    label: String,
}

fn record(text: String, label: &str, line: usize) -> Result<LabeledExample> {
    let label = label.parse().map_err(|message| Error::Parse { line, message })?;
    Ok(LabeledExample { text, label })
}

/// One `{"text": ..., "label": ...}` object per line; blank lines skipped.
pub fn parse_jsonl(text: &str) -> Result<LabeledDataset> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(record(raw.text, &raw.label, i + 1)?);
    }
    Ok(out)
}

/// CSV with a `text,label` header row.
pub fn parse_csv(text: &str) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if headers.iter().collect::<Vec<_>>() != ["text", "label"] {
        return Err(Error::Parse { line: 1, message: format!("expected header text,label, got {headers:?}") });
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != 2 {
            return Err(Error::Parse { line, message: format!("expected 2 fields, got {}", row.len()) });
        }
        out.push(record(row[0].to_string(), &row[1], line)?);
    }
    Ok(out)
}

pub fn to_jsonl(data: &[LabeledExample]) -> String {
    let mut s = String::new();
    for ex in data {
        s.push_str(&serde_json::to_string(ex).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn to_csv(data: &[LabeledExample]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["text", "label"]).map_err(std::io::Error::other)?;
    for ex in data {
        w.write_record([ex.text.as_str(), ex.label.name()]).map_err(std::io::Error::other)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

pub fn write(path: impl AsRef<Path>, data: &[LabeledExample], format: DataFormat) -> Result<()> {
    let body = match format {
        DataFormat::Jsonl => to_jsonl(data),
        DataFormat::Csv => to_csv(data)?,
    };
    std::fs::write(path, body)?;
    Ok(())
}
