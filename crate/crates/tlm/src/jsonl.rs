//! Line-delimited JSON corpora: one object per line with keys `id?`,
//! `instruction?`, `input`, `output?`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;
use tlm_core::corpus::Record;

use crate::error::{Result, TlmError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedLine {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub records: Vec<Record>,
    pub skipped: Vec<SkippedLine>,
}

fn optional_string(obj: &serde_json::Map<String, Value>, key: &str) -> std::result::Result<Option<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("\"{key}\" is not a string")),
    }
}

fn parse_line(text: &str, line: usize) -> std::result::Result<Record, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
    let Value::Object(obj) = value else {
        return Err("not a JSON object".into());
    };
    let input = optional_string(&obj, "input")?.ok_or("missing \"input\"")?;
    Ok(Record {
        id: optional_string(&obj, "id")?.unwrap_or_else(|| format!("line-{line}")),
        instruction: optional_string(&obj, "instruction")?,
        input,
        output: optional_string(&obj, "output")?.unwrap_or_default(),
    })
}

/// Parses a corpus; bad lines are skipped and reported, blank lines ignored.
pub fn parse_jsonl(text: &str) -> LoadedCorpus {
    let mut out = LoadedCorpus::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, i + 1) {
            Ok(r) => out.records.push(r),
            Err(reason) => out.skipped.push(SkippedLine { line: i + 1, reason }),
        }
    }
    out
}

pub fn load_jsonl(path: &Path) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| TlmError::io(path, e))?;
    Ok(parse_jsonl(&text))
}

/// Canonical serialization: fixed key order, one record per line.
pub fn to_jsonl(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(records: &[Record], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| TlmError::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(|e| TlmError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tlm_core::corpus::{generate_domain_corpus, DomainSpec};

    #[test]
    fn empty_input_gives_no_records() {
        assert_eq!(parse_jsonl(""), LoadedCorpus::default());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let recs = generate_domain_corpus(&DomainSpec::target_qa(3), 100).unwrap();
        let text = to_jsonl(&recs);
        let back = parse_jsonl(&text);
        assert!(back.skipped.is_empty());
        assert_eq!(back.records, recs);
        assert_eq!(to_jsonl(&back.records), text);
    }

    #[test]
    fn bad_lines_are_skipped_with_line_numbers() {
        let text = "{\"input\":\"a\"}\n{\"output\":\"x\"}\n\nnot json\n{\"input\":\"b\",\"instruction\":\"do\"}\n";
        let c = parse_jsonl(text);
        assert_eq!(c.records.len(), 2);
        assert_eq!(c.records[0].id, "line-1");
        assert_eq!(c.records[1].instruction.as_deref(), Some("do"));
        let lines: Vec<usize> = c.skipped.iter().map(|s| s.line).collect();
        assert_eq!(lines, vec![2, 4]);
        assert!(c.skipped[0].reason.contains("input"));
    }
}
