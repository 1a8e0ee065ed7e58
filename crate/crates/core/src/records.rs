//! Line-delimited record files.
//!
//! Every record file starts with a header object that pins the format
//! version, the NLE code table and the replace-all sentinels:
//!
//! ```text
//! {"format":"nlekit","format_version":1,"kind":"spans","nle_codes":{"URL":1,...},"sentinels":{"URL":"<URL>",...},"ignore_index":-100}
//! ```
//!
//! Input documents are either JSON objects with a `text` field (optional
//! `id`, `tokens`, `nle_labels`) or plain-text lines, one document per line.

use std::io::{self, BufRead, Write};

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::align::{Token, TokenNleLabels};
use crate::masking::IGNORE_INDEX;
use crate::nle::NleType;

pub const FORMAT_NAME: &str = "nlekit";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: invalid JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Field { line: usize, message: String },
    #[error("record file has format version {found}, expected {expected}")]
    FormatVersion { found: u64, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// JSON lines if the first record line starts with `{`, plain text otherwise.
    Auto,
    Jsonl,
    Text,
}

pub fn header(kind: &str) -> Value {
    let codes: Map<String, Value> = NleType::ALL
        .iter()
        .map(|t| (t.name().to_string(), Value::from(t.code())))
        .collect();
    let sentinels: Map<String, Value> = NleType::ALL
        .iter()
        .map(|t| (t.name().to_string(), Value::from(t.sentinel())))
        .collect();
    serde_json::json!({
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "nle_codes": codes,
        "sentinels": sentinels,
        "ignore_index": IGNORE_INDEX,
    })
}

/// Returns `Some(version)` if `v` is a format header.
fn header_version(v: &Value) -> Option<u64> {
    let obj = v.as_object()?;
    if obj.get("format")?.as_str()? != FORMAT_NAME {
        return None;
    }
    Some(obj.get("format_version").and_then(Value::as_u64).unwrap_or(0))
}

/// One input document. `raw` keeps every field of a JSON record in order.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDoc {
    pub line: usize,
    pub id: String,
    pub text: String,
    pub tokens: Option<Vec<Token>>,
    pub nle_labels: Option<TokenNleLabels>,
    pub raw: Map<String, Value>,
}

/// Streaming reader over a document file; holds one line in memory at a time.
pub struct DocReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    format: InputFormat,
    expected_version: u32,
    index: usize,
    pending: Option<String>,
}

impl<R: BufRead> DocReader<R> {
    pub fn new(reader: R, format: InputFormat, expected_version: u32) -> Self {
        DocReader {
            lines: reader.lines(),
            line_no: 0,
            format,
            expected_version,
            index: 0,
            pending: None,
        }
    }

    /// Resolved format; stays `Auto` until the first document has been read.
    pub fn format(&self) -> InputFormat {
        self.format
    }

    fn next_line(&mut self) -> Option<io::Result<String>> {
        if let Some(p) = self.pending.take() {
            return Some(Ok(p));
        }
        self.line_no += 1;
        self.lines.next()
    }

    fn parse_json(&self, line: &str) -> Result<InputDoc, RecordError> {
        let line_no = self.line_no;
        let value: Value = serde_json::from_str(line).map_err(|source| RecordError::Json { line: line_no, source })?;
        let field = |message: String| RecordError::Field { line: line_no, message };
        let Value::Object(raw) = value else {
            return Err(field("record is not a JSON object".into()));
        };
        let text = match raw.get("text") {
            Some(Value::String(s)) => s.clone(),
            _ => return Err(field("missing string field `text`".into())),
        };
        let id = match raw.get("id") {
            None | Some(Value::Null) => self.index.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(v @ Value::Number(_)) => v.to_string(),
            Some(_) => return Err(field("`id` must be a string or number".into())),
        };
        let tokens = match raw.get("tokens") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value::<Vec<Token>>(v.clone())
                    .map_err(|e| field(format!("bad `tokens`: {e}")))?,
            ),
        };
        let nle_labels = match raw.get("nle_labels") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let l: Vec<u8> = serde_json::from_value(v.clone()).map_err(|e| field(format!("bad `nle_labels`: {e}")))?;
                if l.iter().any(|&c| c > 7) {
                    return Err(field("`nle_labels` values must be in 0..=7".into()));
                }
                Some(TokenNleLabels(l))
            }
        };
        Ok(InputDoc {
            line: line_no,
            id,
            text,
            tokens,
            nle_labels,
            raw,
        })
    }
}

impl<R: BufRead> Iterator for DocReader<R> {
    type Item = Result<InputDoc, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.next_line()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if self.format == InputFormat::Auto {
                if line.trim().is_empty() {
                    continue;
                }
                if line.trim_start().starts_with('{') {
                    if let Ok(v) = serde_json::from_str::<Value>(&line) {
                        if let Some(found) = header_version(&v) {
                            if found != u64::from(self.expected_version) {
                                return Some(Err(RecordError::FormatVersion { found, expected: self.expected_version }));
                            }
                            continue;
                        }
                    }
                    self.format = InputFormat::Jsonl;
                } else {
                    self.format = InputFormat::Text;
                }
                self.pending = Some(line);
                continue;
            }
            let doc = match self.format {
                InputFormat::Jsonl => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    if self.index == 0 {
                        if let Ok(v) = serde_json::from_str::<Value>(&line) {
                            if let Some(found) = header_version(&v) {
                                if found != u64::from(self.expected_version) {
                                    return Some(Err(RecordError::FormatVersion { found, expected: self.expected_version }));
                                }
                                continue;
                            }
                        }
                    }
                    self.parse_json(&line)
                }
                _ => Ok(InputDoc {
                    line: self.line_no,
                    id: self.line_no.to_string(),
                    raw: Map::from_iter([
                        ("id".to_string(), Value::from(self.line_no.to_string())),
                        ("text".to_string(), Value::from(line.clone())),
                    ]),
                    text: line,
                    tokens: None,
                    nle_labels: None,
                }),
            };
            self.index += 1;
            return Some(doc);
        }
    }
}

/// Reads arbitrary JSON-line records of type `T`, skipping and checking a header.
pub fn read_records<T, R>(reader: R, expected_version: u32) -> impl Iterator<Item = Result<T, RecordError>>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    let mut first = true;
    reader.lines().enumerate().filter_map(move |(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(e.into())),
        };
        if line.trim().is_empty() {
            return None;
        }
        let value: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(source) => return Some(Err(RecordError::Json { line: i + 1, source })),
        };
        if std::mem::take(&mut first) {
            if let Some(found) = header_version(&value) {
                if found != u64::from(expected_version) {
                    return Some(Err(RecordError::FormatVersion { found, expected: expected_version }));
                }
                return None;
            }
        }
        Some(serde_json::from_value(value).map_err(|source| RecordError::Json { line: i + 1, source }))
    })
}

pub struct RecordWriter<W: Write> {
    out: W,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut out: W, kind: &str) -> io::Result<Self> {
        serde_json::to_writer(&mut out, &header(kind))?;
        out.write_all(b"\n")?;
        Ok(RecordWriter { out })
    }

    /// No header; for plain-text outputs.
    pub fn bare(out: W) -> Self {
        RecordWriter { out }
    }

    pub fn write<T: Serialize>(&mut self, rec: &T) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")
    }

    pub fn write_line(&mut self, line: &str) -> io::Result<()> {
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
