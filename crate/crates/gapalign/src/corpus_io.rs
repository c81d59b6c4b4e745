//! Line-delimited JSON I/O for corpus and SFT records, plus the
//! reservoir sampler used to subset the pre-training corpus.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One pre-training document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

impl TextRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        TextRecord {
            id: id.into(),
            text: text.into(),
            meta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidRecord("empty id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(Error::InvalidRecord(format!("record {}: empty text", self.id)));
        }
        Ok(())
    }
}

/// Provenance of an instruction pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    OriginalSft,
    Rewritten,
}

/// One instruction-response pair, either from the original SFT dataset or
/// rewritten from a corpus record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub id: String,
    pub instruction: String,
    pub response: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_id: Option<String>,
}

impl InstructionPair {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.is_empty() || self.response.is_empty() {
            return Err(Error::InvalidRecord(format!(
                "pair {}: empty instruction or response",
                self.id
            )));
        }
        match (self.source, &self.origin_id) {
            (Source::Rewritten, None) => Err(Error::InvalidRecord(format!(
                "pair {}: rewritten without origin_id",
                self.id
            ))),
            (Source::OriginalSft, Some(_)) => Err(Error::InvalidRecord(format!(
                "pair {}: original_sft with origin_id",
                self.id
            ))),
            _ => Ok(()),
        }
    }
}

/// Maps dataset-specific field names onto the record types. Corpus files
/// name their text field differently across datasets, and SFT files use
/// e.g. "instruction"/"response" or "query"/"answer".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaMap {
    pub text_field: String,
    pub instruction_field: String,
    pub response_field: String,
}

impl Default for SchemaMap {
    fn default() -> Self {
        SchemaMap {
            text_field: "text".into(),
            instruction_field: "instruction".into(),
            response_field: "response".into(),
        }
    }
}

impl SchemaMap {
    pub fn validate(&self) -> Result<()> {
        if self.text_field.is_empty()
            || self.instruction_field.is_empty()
            || self.response_field.is_empty()
        {
            return Err(Error::Config("SchemaMap fields must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Corpus,
    Sft,
}

/// Streaming JSONL reader. Malformed lines and lines missing the mapped
/// fields are skipped and counted; if more than half the lines of a
/// non-empty file are skipped the stream ends with a
/// [`Error::SchemaMismatch`], which usually means the wrong [`SchemaMap`].
pub struct RecordStream<T> {
    lines: std::io::Lines<BufReader<File>>,
    schema: SchemaMap,
    path: PathBuf,
    file_stem: String,
    line_no: usize,
    total: usize,
    skipped: usize,
    done: bool,
    parse: fn(&serde_json::Value, &SchemaMap) -> Option<T>,
    synth_id: fn(&mut T, String) -> bool,
}

impl<T> RecordStream<T> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn total_lines(&self) -> usize {
        self.total
    }

    fn finish_check(&mut self) -> Option<Result<T>> {
        self.done = true;
        if self.total > 0 && self.skipped * 2 > self.total {
            return Some(Err(Error::SchemaMismatch {
                path: self.path.clone(),
                skipped: self.skipped,
                total: self.total,
            }));
        }
        None
    }
}

impl<T> Iterator for RecordStream<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Result<T>> {
        if self.done {
            return None;
        }
        loop {
            let line = match self.lines.next() {
                None => return self.finish_check(),
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
                Some(Ok(line)) => line,
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            self.total += 1;
            let value: serde_json::Value = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(e) => {
                    self.skipped += 1;
                    log::warn!("{}:{}: skipping malformed JSON: {e}", self.path.display(), self.line_no);
                    continue;
                }
            };
            match (self.parse)(&value, &self.schema) {
                Some(mut rec) => {
                    (self.synth_id)(&mut rec, format!("{}#{}", self.file_stem, self.line_no));
                    return Some(Ok(rec));
                }
                None => {
                    self.skipped += 1;
                    log::warn!(
                        "{}:{}: skipping record missing mapped fields",
                        self.path.display(),
                        self.line_no
                    );
                }
            }
        }
    }
}

fn json_str(v: &serde_json::Value, key: &str) -> Option<String> {
    v.get(key).and_then(|s| s.as_str()).map(|s| s.to_string())
}

fn parse_corpus(v: &serde_json::Value, schema: &SchemaMap) -> Option<TextRecord> {
    let text = json_str(v, &schema.text_field)?;
    if text.trim().is_empty() {
        return None;
    }
    let meta = v.get("meta").and_then(|m| m.as_object()).map(|m| {
        m.iter()
            .filter_map(|(k, val)| val.as_str().map(|s| (k.clone(), s.to_string())))
            .collect()
    });
    Some(TextRecord {
        id: json_str(v, "id").unwrap_or_default(),
        text,
        meta,
    })
}

fn parse_sft(v: &serde_json::Value, schema: &SchemaMap) -> Option<InstructionPair> {
    let instruction = json_str(v, &schema.instruction_field)?;
    let response = json_str(v, &schema.response_field)?;
    if instruction.is_empty() || response.is_empty() {
        return None;
    }
    let source = match v.get("source").and_then(|s| s.as_str()) {
        Some("rewritten") => Source::Rewritten,
        _ => Source::OriginalSft,
    };
    Some(InstructionPair {
        id: json_str(v, "id").unwrap_or_default(),
        instruction,
        response,
        source,
        origin_id: json_str(v, "origin_id"),
    })
}

fn open_stream<T>(
    path: &Path,
    schema: &SchemaMap,
    parse: fn(&serde_json::Value, &SchemaMap) -> Option<T>,
    synth_id: fn(&mut T, String) -> bool,
) -> Result<RecordStream<T>> {
    schema.validate()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(RecordStream {
        lines: BufReader::new(file).lines(),
        schema: schema.clone(),
        path: path.to_path_buf(),
        file_stem,
        line_no: 0,
        total: 0,
        skipped: 0,
        done: false,
        parse,
        synth_id,
    })
}

/// Open a corpus JSONL file as a lazy stream of [`TextRecord`]s.
/// Records with no `id` field get a synthetic `<filename>#<line>` id.
pub fn open_corpus_stream(path: &Path, schema: &SchemaMap) -> Result<RecordStream<TextRecord>> {
    open_stream(path, schema, parse_corpus, |r, synth| {
        if r.id.is_empty() {
            r.id = synth;
            true
        } else {
            false
        }
    })
}

/// Open an SFT JSONL file as a lazy stream of [`InstructionPair`]s.
pub fn open_sft_stream(path: &Path, schema: &SchemaMap) -> Result<RecordStream<InstructionPair>> {
    open_stream(path, schema, parse_sft, |r, synth| {
        if r.id.is_empty() {
            r.id = synth;
            true
        } else {
            false
        }
    })
}

/// One-pass uniform sample of `k` items from a stream of unknown length.
///
/// The first `k` items fill the reservoir; item `i > k` replaces slot `j`
/// when the uniform draw `j = 1 + (next_u64 mod i)` satisfies `j <= k`.
/// Deterministic given `(seed, stream order, k)`.
pub fn reservoir_sample<T>(
    stream: impl Iterator<Item = Result<T>>,
    k: usize,
    seed: u64,
) -> Result<Vec<T>> {
    if k == 0 {
        return Err(Error::Precondition("reservoir size k must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<T> = Vec::with_capacity(k);
    for (idx, item) in stream.enumerate() {
        let item = item?;
        let i = (idx + 1) as u64;
        if reservoir.len() < k {
            reservoir.push(item);
        } else {
            let j = 1 + rng.next_u64() % i;
            if j <= k as u64 {
                reservoir[(j - 1) as usize] = item;
            }
        }
    }
    Ok(reservoir)
}

/// Write records as JSONL with a fixed key order. Deterministic: the same
/// records always produce byte-identical files. On write failure the
/// partial file is removed.
pub fn write_records<T: Serialize>(records: &[T], path: &Path) -> Result<usize> {
    let inner = || -> std::io::Result<usize> {
        let mut file = std::io::BufWriter::new(File::create(path)?);
        for rec in records {
            let line = serde_json::to_string(rec)?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
        Ok(records.len())
    };
    match inner() {
        Ok(n) => Ok(n),
        Err(e) => {
            let _ = std::fs::remove_file(path);
            Err(Error::io(path, e))
        }
    }
}

/// Concatenate instruction and response into the single text that gets
/// embedded, instruction first, separated by one newline.
pub fn sft_to_text(pair: &InstructionPair) -> Result<String> {
    pair.validate()?;
    Ok(format!("{}\n{}", pair.instruction, pair.response))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn corpus_stream_reads_text_field() {
        let f = write_lines(&[r##"{"text":"# A marble dropped from a bridge strikes the water"}"##]);
        let schema = SchemaMap::default();
        let recs: Vec<_> = open_corpus_stream(f.path(), &schema)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].text.starts_with("# A marble dropped"));
        // synthetic id carries filename and line number
        assert!(recs[0].id.ends_with("#1"));
    }

    #[test]
    fn empty_file_yields_empty_stream() {
        let f = write_lines(&[]);
        let recs: Vec<_> = open_corpus_stream(f.path(), &SchemaMap::default())
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn malformed_lines_are_skipped_and_counted() {
        let f = write_lines(&[
            r#"{"text":"a"}"#,
            r#"{"text":"b"}"#,
            "not json at all",
            r#"{"text":"c"}"#,
        ]);
        let mut stream = open_corpus_stream(f.path(), &SchemaMap::default()).unwrap();
        let mut recs = Vec::new();
        for item in &mut stream {
            recs.push(item.unwrap());
        }
        assert_eq!(recs.len(), 3);
        assert_eq!(stream.skipped(), 1);
    }

    #[test]
    fn majority_skipped_is_fatal() {
        let f = write_lines(&["junk", "junk", r#"{"text":"a"}"#]);
        let stream = open_corpus_stream(f.path(), &SchemaMap::default()).unwrap();
        let result: Result<Vec<_>> = stream.collect();
        assert!(matches!(result, Err(Error::SchemaMismatch { skipped: 2, total: 3, .. })));
    }

    #[test]
    fn sft_stream_with_custom_fields() {
        let f = write_lines(&[r#"{"query":"What is 2+2?","answer":"4"}"#]);
        let schema = SchemaMap {
            instruction_field: "query".into(),
            response_field: "answer".into(),
            ..SchemaMap::default()
        };
        let recs: Vec<_> = open_sft_stream(f.path(), &schema)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].instruction, "What is 2+2?");
        assert_eq!(recs[0].source, Source::OriginalSft);
    }

    #[test]
    fn reservoir_shorter_stream_returns_all_in_order() {
        let items: Vec<Result<u32>> = (0..3).map(Ok).collect();
        let out = reservoir_sample(items.into_iter(), 5, 42).unwrap();
        assert_eq!(out, vec![0, 1, 2]);
    }

    #[test]
    fn reservoir_exact_size_boundary() {
        let items: Vec<Result<u32>> = (0..10).map(Ok).collect();
        let out = reservoir_sample(items.into_iter(), 10, 7).unwrap();
        assert_eq!(out, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn reservoir_k_zero_is_an_error() {
        let items: Vec<Result<u32>> = vec![Ok(1)];
        assert!(reservoir_sample(items.into_iter(), 0, 1).is_err());
    }

    #[test]
    fn reservoir_is_deterministic() {
        let a = reservoir_sample((0..100u32).map(Ok), 10, 99).unwrap();
        let b = reservoir_sample((0..100u32).map(Ok), 10, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        let records = vec![
            TextRecord::new("a", "first text"),
            TextRecord::new("b", "second text"),
        ];
        let n = write_records(&records, &path).unwrap();
        assert_eq!(n, 2);
        let back: Vec<_> = open_corpus_stream(&path, &SchemaMap::default())
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn write_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        let records = vec![
            InstructionPair {
                id: "1".into(),
                instruction: "Q".into(),
                response: "A".into(),
                source: Source::Rewritten,
                origin_id: Some("x".into()),
            },
            InstructionPair {
                id: "2".into(),
                instruction: "Q2".into(),
                response: "A2".into(),
                source: Source::OriginalSft,
                origin_id: None,
            },
        ];
        write_records(&records, &p1).unwrap();
        write_records(&records, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_write_gives_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let n = write_records::<TextRecord>(&[], &path).unwrap();
        assert_eq!(n, 0);
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
    }

    #[test]
    fn sft_to_text_joins_with_single_newline() {
        let pair = InstructionPair {
            id: "1".into(),
            instruction: "What is 2+2?".into(),
            response: "4".into(),
            source: Source::OriginalSft,
            origin_id: None,
        };
        assert_eq!(sft_to_text(&pair).unwrap(), "What is 2+2?\n4");
    }

    #[test]
    fn sft_to_text_rejects_empty_response() {
        let pair = InstructionPair {
            id: "1".into(),
            instruction: "a".into(),
            response: "".into(),
            source: Source::OriginalSft,
            origin_id: None,
        };
        assert!(sft_to_text(&pair).is_err());
    }
}
