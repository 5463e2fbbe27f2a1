//! Contextual grounding records and their on-disk store.
//!
//! A grounding keeps a flagged passage together with its mean surprisal, the
//! drop ratio between its first and last thirds, the positions of its
//! highest-surprisal tokens and a source window centred on the strongest run
//! of those peaks. Records are appended to a JSONL log and indexed in memory.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::textstat::mean;

pub type Metadata = BTreeMap<String, String>;

pub const DEFAULT_SOURCE_WINDOW: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PassageRef {
    pub doc_id: String,
    pub passage_index: usize,
}

impl PassageRef {
    pub fn new(doc_id: impl Into<String>, passage_index: usize) -> Self {
        Self {
            doc_id: doc_id.into(),
            passage_index,
        }
    }
}

impl std::fmt::Display for PassageRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.passage_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    #[serde(flatten)]
    pub passage_ref: PassageRef,
    pub passage_text: String,
    pub surprisal: f64,
    pub drop_ratio: f64,
    #[serde(rename = "peaks")]
    pub peak_positions: Vec<usize>,
    pub source_window: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<Metadata>,
}

impl Grounding {
    /// Passage text with any provenance metadata prepended.
    pub fn contextual_text(&self) -> String {
        with_metadata(self.metadata.as_ref(), &self.passage_text)
    }

    pub fn contextual_source_window(&self) -> String {
        with_metadata(self.metadata.as_ref(), &self.source_window)
    }
}

pub fn metadata_line(metadata: Option<&Metadata>) -> String {
    match metadata {
        Some(m) if !m.is_empty() => {
            let fields: Vec<String> = m.iter().map(|(k, v)| format!("{k}: {v}")).collect();
            format!("[{}]", fields.join("; "))
        }
        _ => String::new(),
    }
}

pub fn with_metadata(metadata: Option<&Metadata>, text: &str) -> String {
    let line = metadata_line(metadata);
    if line.is_empty() {
        text.to_string()
    } else {
        format!("{line}\n{text}")
    }
}

/// A passage's tokens as byte spans into the document text.
#[derive(Debug, Clone, Copy)]
pub struct PassageTokens<'a> {
    pub text: &'a str,
    pub offsets: &'a [Range<usize>],
}

impl PassageTokens<'_> {
    /// Text covered by tokens `range`, widened to UTF-8 boundaries.
    fn slice(&self, range: Range<usize>) -> &str {
        let mut start = self.offsets[range.start].start;
        let mut end = self.offsets[range.end - 1].end.min(self.text.len());
        while start > 0 && !self.text.is_char_boundary(start) {
            start -= 1;
        }
        while end < self.text.len() && !self.text.is_char_boundary(end) {
            end += 1;
        }
        &self.text[start..end]
    }
}

/// Thirds sized `n/3`, `n - 2(n/3)`, `n/3`: the remainder goes to the middle.
pub fn thirds(n: usize) -> [Range<usize>; 3] {
    let edge = n / 3;
    [0..edge, edge..n - edge, n - edge..n]
}

/// `(mean(first third) - mean(last third)) / mean(first third)`, or 0 when the
/// first-third mean is not positive.
pub fn drop_ratio(surprisals: &[f64]) -> Result<f64> {
    if surprisals.len() < 3 {
        return Err(Error::PassageTooShort(surprisals.len()));
    }
    let [first, _, last] = thirds(surprisals.len());
    let head = mean(&surprisals[first]).unwrap_or(0.0);
    let tail = mean(&surprisals[last]).unwrap_or(0.0);
    if head > 0.0 {
        Ok((head - tail) / head)
    } else {
        Ok(0.0)
    }
}

/// Indices of the `ceil(n / 10)` highest-surprisal tokens, ascending. Ties
/// prefer the earlier token.
pub fn peak_positions(surprisals: &[f64]) -> Vec<usize> {
    let n = surprisals.len();
    if n == 0 {
        return Vec::new();
    }
    let take = n.div_ceil(10);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| surprisals[b].total_cmp(&surprisals[a]).then(a.cmp(&b)));
    let mut peaks: Vec<usize> = order.into_iter().take(take).collect();
    peaks.sort_unstable();
    peaks
}

/// Token range of at most `width` tokens centred on the peak run with the
/// largest total surprisal.
pub fn source_window_range(surprisals: &[f64], peaks: &[usize], width: usize) -> Range<usize> {
    let n = surprisals.len();
    if n <= width || peaks.is_empty() {
        return 0..n;
    }
    let width = width.max(1);
    let mut best: Option<(f64, Range<usize>)> = None;
    let mut i = 0;
    while i < peaks.len() {
        let mut j = i;
        while j + 1 < peaks.len() && peaks[j + 1] == peaks[j] + 1 {
            j += 1;
        }
        let run = peaks[i]..peaks[j] + 1;
        let total: f64 = surprisals[run.clone()].iter().sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, run));
        }
        i = j + 1;
    }
    let run = best.map(|(_, r)| r).unwrap_or(0..1);
    let centre = (run.start + run.end) / 2;
    let start = centre.saturating_sub(width / 2).min(n - width);
    start..start + width
}

pub fn build_grounding(
    passage_ref: PassageRef,
    tokens: PassageTokens<'_>,
    surprisals: &[f64],
    metadata: Option<Metadata>,
    source_window_tokens: usize,
) -> Result<Grounding> {
    let n = surprisals.len();
    if n < 3 || tokens.offsets.len() < 3 {
        return Err(Error::PassageTooShort(n.min(tokens.offsets.len())));
    }
    if tokens.offsets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: tokens.offsets.len(),
            got: n,
        });
    }
    let peaks = peak_positions(surprisals);
    let window = source_window_range(surprisals, &peaks, source_window_tokens);
    Ok(Grounding {
        passage_ref,
        passage_text: tokens.slice(0..n).to_string(),
        surprisal: mean(surprisals).unwrap_or(0.0),
        drop_ratio: drop_ratio(surprisals)?,
        peak_positions: peaks,
        source_window: tokens.slice(window).to_string(),
        metadata,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub id: String,
    #[serde(flatten)]
    pub grounding: Grounding,
    pub embedding: Vec<f64>,
}

pub fn record_id(passage_ref: &PassageRef) -> String {
    let mut h = Sha256::new();
    h.update(passage_ref.doc_id.as_bytes());
    h.update([0u8]);
    h.update(passage_ref.passage_index.to_le_bytes());
    let digest = h.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("g-{hex}")
}

/// Append-only grounding store. Writes go through `&mut self`; lookups and
/// retrieval only need `&self`.
#[derive(Debug, Default)]
pub struct GroundingStore {
    path: Option<PathBuf>,
    records: Vec<GroundingRecord>,
    by_ref: HashMap<PassageRef, usize>,
    dim: Option<usize>,
}

impl GroundingStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the JSONL log at `path` and rebuilds the index. A
    /// torn final line left by an interrupted append is ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self {
            path: Some(path.clone()),
            ..Self::default()
        };
        if !path.exists() {
            return Ok(store);
        }
        let file = File::open(&path).map_err(|source| Error::Storage {
            path: path.clone(),
            source,
        })?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()?;
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<GroundingRecord>(line) {
                Ok(rec) => store.index(rec),
                Err(e) if i == last => {
                    tracing::warn!(path = %path.display(), "ignoring torn trailing record: {e}");
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(store)
    }

    fn index(&mut self, rec: GroundingRecord) {
        self.dim.get_or_insert(rec.embedding.len());
        match self.by_ref.get(&rec.grounding.passage_ref) {
            Some(&i) => self.records[i] = rec,
            None => {
                self.by_ref
                    .insert(rec.grounding.passage_ref.clone(), self.records.len());
                self.records.push(rec);
            }
        }
    }

    /// Persists `grounding`; storing the same passage again returns the
    /// existing id without writing.
    pub fn insert(&mut self, grounding: Grounding, embedding: Vec<f64>) -> Result<String> {
        if let Some(&i) = self.by_ref.get(&grounding.passage_ref) {
            return Ok(self.records[i].id.clone());
        }
        if let Some(dim) = self.dim {
            if embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: embedding.len(),
                });
            }
        }
        let rec = GroundingRecord {
            id: record_id(&grounding.passage_ref),
            grounding,
            embedding,
        };
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            append_atomically(path, line.as_bytes())?;
        }
        let id = rec.id.clone();
        self.index(rec);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<&GroundingRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn get_by_ref(&self, passage_ref: &PassageRef) -> Option<&GroundingRecord> {
        self.by_ref.get(passage_ref).map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[GroundingRecord] {
        &self.records
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// The `top_k` records by descending cosine similarity to `query`, ties
    /// broken by record id.
    pub fn retrieve_similar(
        &self,
        query: &[f64],
        top_k: usize,
    ) -> Result<Vec<(f64, &GroundingRecord)>> {
        if self.records.is_empty() {
            return Err(Error::EmptyInput("grounding store is empty"));
        }
        let dim = self.dim.unwrap_or(query.len());
        if query.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: query.len(),
            });
        }
        let mut scored: Vec<(f64, &GroundingRecord)> = self
            .records
            .iter()
            .map(|r| (cosine_similarity(query, &r.embedding), r))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        scored.truncate(top_k);
        Ok(scored)
    }
}

fn append_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let storage = |source| Error::Storage {
        path: path.to_path_buf(),
        source,
    };
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(storage)?;
    let before = file.metadata().map_err(storage)?.len();
    if let Err(source) = file.write_all(bytes).and_then(|_| file.flush()) {
        let _ = file.set_len(before);
        return Err(storage(source));
    }
    Ok(())
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}
