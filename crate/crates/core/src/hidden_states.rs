//! Layered hidden-state records, the HSD dump format, and the text formats
//! for relevance judgments, training examples and positive pairs.
//!
//! HSD layout (little endian):
//!
//! ```text
//! "HSD1" | d_model u32 | layer_count u32 | layer_index u32 * layer_count | record_count u64
//! record*: id_len u16 | id utf8 | n u32 | mask u8 * n | layer_count * (n * d_model f32)
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const HSD_MAGIC: &[u8; 4] = b"HSD1";

/// Token hidden states of one sequence at a subset of backbone layers.
///
/// Layer 0 is the embedding output; layer `l > 0` is the output of block `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredStates {
    pub sequence_id: String,
    pub d_model: usize,
    pub layer_indices: Vec<u32>,
    /// One `n × d_model` row-major matrix per entry of `layer_indices`.
    pub states: Vec<Vec<f32>>,
    /// `true` marks a real token, `false` padding.
    pub attention_mask: Vec<bool>,
}

impl LayeredStates {
    pub fn token_count(&self) -> usize {
        self.attention_mask.len()
    }

    pub fn position_of(&self, layer: u32) -> Option<usize> {
        self.layer_indices.binary_search(&layer).ok()
    }

    pub fn layer(&self, layer: u32) -> Option<&[f32]> {
        self.position_of(layer).map(|p| self.states[p].as_slice())
    }

    /// The stored layer as an `n × d` matrix in `f64`.
    pub fn layer_mat(&self, layer: u32) -> Result<Mat> {
        let data = self.layer(layer).ok_or_else(|| {
            Error::Data(format!(
                "sequence {:?} has no stored layer {layer} (stored: {:?})",
                self.sequence_id, self.layer_indices
            ))
        })?;
        Ok(Mat::from_f32(self.token_count(), self.d_model, data))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.token_count();
        if self.sequence_id.is_empty() {
            return Err(Error::Format("empty sequence id".into()));
        }
        if n == 0 {
            return Err(Error::Format(format!(
                "sequence {:?} has no tokens",
                self.sequence_id
            )));
        }
        if !self.attention_mask.iter().any(|&m| m) {
            return Err(Error::Format(format!(
                "sequence {:?} is fully masked",
                self.sequence_id
            )));
        }
        if self.d_model == 0 {
            return Err(Error::Format("d_model must be positive".into()));
        }
        if self.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format(format!(
                "layer indices must be unique and ascending, got {:?}",
                self.layer_indices
            )));
        }
        if self.states.len() != self.layer_indices.len() {
            return Err(Error::Format(format!(
                "sequence {:?}: {} layer matrices for {} layer indices",
                self.sequence_id,
                self.states.len(),
                self.layer_indices.len()
            )));
        }
        for (l, s) in self.layer_indices.iter().zip(&self.states) {
            if s.len() != n * self.d_model {
                return Err(Error::Format(format!(
                    "sequence {:?} layer {l}: expected {}x{} values, found {}",
                    self.sequence_id,
                    n,
                    self.d_model,
                    s.len()
                )));
            }
        }
        Ok(())
    }
}

fn dump_header(records: &[LayeredStates]) -> Result<(usize, Vec<u32>)> {
    let Some(first) = records.first() else {
        return Ok((0, Vec::new()));
    };
    for r in records {
        r.validate()?;
        if r.d_model != first.d_model {
            return Err(Error::Format(format!(
                "mixed dimensions in dump: {:?} has d_model {} but {:?} has {}",
                first.sequence_id, first.d_model, r.sequence_id, r.d_model
            )));
        }
        if r.layer_indices != first.layer_indices {
            return Err(Error::Format(format!(
                "mixed layer sets in dump: {:?} vs {:?}",
                first.layer_indices, r.layer_indices
            )));
        }
    }
    Ok((first.d_model, first.layer_indices.clone()))
}

/// Serializes records into HSD bytes.
pub fn encode_dump(records: &[LayeredStates]) -> Result<Vec<u8>> {
    let (d_model, layers) = dump_header(records)?;
    let mut out = Vec::new();
    out.extend_from_slice(HSD_MAGIC);
    out.extend_from_slice(&(d_model as u32).to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in &layers {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        let id = r.sequence_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| {
            Error::Format(format!("sequence id longer than 65535 bytes: {:?}", r.sequence_id))
        })?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(r.token_count() as u32).to_le_bytes());
        out.extend(r.attention_mask.iter().map(|&m| m as u8));
        for s in &r.states {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes records to `path`, returning the number of bytes written.
pub fn write_dump(records: &[LayeredStates], path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_dump(records)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("unexpected end of {}", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| {
            Error::Format(format!("unexpected end of {}", self.what))
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f64_vec(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| {
            Error::Format(format!("unexpected end of {}", self.what))
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn string(&mut self, len: usize) -> Result<String> {
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("invalid UTF-8 in {}", self.what)))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses HSD bytes. Every record is validated.
pub fn decode_dump(bytes: &[u8]) -> Result<Vec<LayeredStates>> {
    if bytes.len() < 4 || &bytes[..4] != HSD_MAGIC {
        return Err(Error::Format("not an HSD file".into()));
    }
    let mut r = ByteReader::new(&bytes[4..], "dump");
    let d_model = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count.min(1 << 16));
    for _ in 0..layer_count {
        layers.push(r.u32()?);
    }
    let record_count = r.u64()?;
    let mut records = Vec::new();
    for _ in 0..record_count {
        let id_len = r.u16()? as usize;
        let sequence_id = r.string(id_len)?;
        let n = r.u32()? as usize;
        let mask_bytes = r.take(n)?;
        let mut attention_mask = Vec::with_capacity(n);
        for &b in mask_bytes {
            attention_mask.push(match b {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::Format(format!(
                        "sequence {sequence_id:?}: mask byte {other} is not 0 or 1"
                    )))
                }
            });
        }
        let mut states = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            states.push(r.f32_vec(n * d_model)?);
        }
        let rec = LayeredStates {
            sequence_id,
            d_model,
            layer_indices: layers.clone(),
            states,
            attention_mask,
        };
        rec.validate()?;
        records.push(rec);
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after last dump record".into()));
    }
    Ok(records)
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Vec<LayeredStates>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes)
}

/// Relevance judgments: query id → passage id → grade.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels(BTreeMap<String, BTreeMap<String, u32>>);

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment, returning the previous grade if the pair was
    /// already judged.
    pub fn insert(&mut self, query_id: &str, passage_id: &str, grade: u32) -> Option<u32> {
        self.0
            .entry(query_id.to_string())
            .or_default()
            .insert(passage_id.to_string(), grade)
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.0.get(query_id)
    }

    pub fn grade(&self, query_id: &str, passage_id: &str) -> u32 {
        self.0
            .get(query_id)
            .and_then(|m| m.get(passage_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, u32>)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of (query, passage) judgments.
    pub fn judgment_count(&self) -> usize {
        self.0.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (q, m) in &self.0 {
            for (p, g) in m {
                s.push_str(&format!("{q}\t{p}\t{g}\n"));
            }
        }
        s
    }
}

/// Parses `query_id \t passage_id \t grade` lines. Blank lines are skipped;
/// a duplicate pair keeps the last grade and logs a warning.
pub fn parse_qrels_tsv(text: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::Format(format!(
                "qrels line {line_no}: expected 3 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let (q, p) = (cols[0].trim(), cols[1].trim());
        if q.is_empty() || p.is_empty() {
            return Err(Error::Format(format!("qrels line {line_no}: empty id")));
        }
        let grade: u32 = cols[2].trim().parse().map_err(|_| {
            Error::Format(format!(
                "qrels line {line_no}: grade {:?} is not a non-negative integer",
                cols[2]
            ))
        })?;
        if let Some(prev) = qrels.insert(q, p, grade) {
            log::warn!(
                "qrels line {line_no}: duplicate judgment ({q}, {p}); grade {prev} replaced by {grade}"
            );
        }
    }
    Ok(qrels)
}

pub fn read_qrels_tsv(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels_tsv(&text)
}

/// One contrastive training unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub query_id: String,
    pub positive_ids: Vec<String>,
    #[serde(default)]
    pub negative_ids: Vec<String>,
}

impl TrainExample {
    pub fn validate(&self) -> Result<()> {
        if self.query_id.is_empty() {
            return Err(Error::Format("training example with empty query id".into()));
        }
        if self.positive_ids.is_empty() {
            return Err(Error::Format(format!(
                "training example {:?} has no positives",
                self.query_id
            )));
        }
        let pos: HashSet<&str> = self.positive_ids.iter().map(String::as_str).collect();
        if let Some(both) = self.negative_ids.iter().find(|n| pos.contains(n.as_str())) {
            return Err(Error::Format(format!(
                "training example {:?}: {both:?} is both positive and negative",
                self.query_id
            )));
        }
        Ok(())
    }
}

/// Reads a JSONL file into values of `T`, one per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}: line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Format(format!("serializing JSONL: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_train_examples(path: impl AsRef<Path>) -> Result<Vec<TrainExample>> {
    let examples: Vec<TrainExample> = read_jsonl(path)?;
    for e in &examples {
        e.validate()?;
    }
    Ok(examples)
}

/// A `{id, text}` JSONL line. Synthetic tasks also carry the raw token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
}

/// Parses `query_id \t passage_id` positive pairs.
pub fn parse_pairs_tsv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next()) {
            (Some(q), Some(p)) if !q.trim().is_empty() && !p.trim().is_empty() => {
                pairs.push((q.trim().to_string(), p.trim().to_string()))
            }
            _ => {
                return Err(Error::Format(format!(
                    "pairs line {}: expected query_id<TAB>passage_id",
                    i + 1
                )))
            }
        }
    }
    Ok(pairs)
}

pub fn read_pairs_tsv(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs_tsv(&text)
}

pub fn write_text(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
