//! Synthetic corpora and the packing pipeline that turns records into
//! fixed-length training sequences.
//!
//! Records are token lists with document boundaries and role spans (prompt /
//! completion). Four reserved ids — PAD=0, BOS=1, EOS=2, SEP=3 — frame every
//! document; all synthetic "words" are single tokens above the reserved
//! range. Packing concatenates whole documents into rows of a fixed length,
//! never truncating mid-document: a document longer than the row is dropped
//! and counted.

mod gen;

pub use gen::{
    gen_ar_examples, gen_instruct_pairs, gen_markov_corpus, gen_markov_corpus_in, gen_niah,
    ArParams, InstructBatch, InstructTemplate, MarkovChain, NeedleKind, CONTINUE_MARKER,
    COPY_MARKER, NEEDLE_MARK_A, NEEDLE_MARK_B, NEEDLE_PAYLOAD_HI, NEEDLE_PAYLOAD_LO, NEEDLE_QUERY,
    PROSE_HI, REVERSE_MARKER,
};

use crate::util::fnv1a64;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
/// First token id free for synthetic content.
pub const RESERVED: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("model evaluation: {0}")]
    Model(#[from] crate::tensor::TensorError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prompt,
    Completion,
}

/// Half-open token span with a role, serialized as `[start, end, role]`.
pub type Span = (usize, usize, Role);

/// One unit of training data: a token sequence holding one or more whole
/// documents (`bounds` are the document start offsets, always beginning with
/// 0) plus role spans used for loss masking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tokens: Vec<usize>,
    pub bounds: Vec<usize>,
    pub spans: Vec<Span>,
}

impl DatasetRecord {
    /// Single-document record.
    pub fn doc(tokens: Vec<usize>, spans: Vec<Span>) -> Self {
        DatasetRecord {
            tokens,
            bounds: vec![0],
            spans,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.tokens.is_empty() {
            return invalid("empty token list");
        }
        if self.bounds.first() != Some(&0) {
            return invalid("bounds must start at 0");
        }
        for w in self.bounds.windows(2) {
            if w[1] <= w[0] {
                return invalid("bounds must be strictly increasing");
            }
        }
        if let Some(&last) = self.bounds.last() {
            if last >= self.tokens.len() {
                return invalid(format!(
                    "bound {last} beyond record of {} tokens",
                    self.tokens.len()
                ));
            }
        }
        let mut spans = self.spans.clone();
        spans.sort_by_key(|s| s.0);
        for (s, e, _) in &spans {
            if s >= e || *e > self.tokens.len() {
                return invalid(format!("span [{s}, {e}) out of range"));
            }
        }
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return invalid(format!("spans {:?} and {:?} overlap", w[0], w[1]));
            }
        }
        Ok(())
    }

    /// Split a multi-document record into per-document records, rebasing
    /// spans. Errors if a span crosses a document boundary.
    pub fn split_docs(&self) -> Result<Vec<DatasetRecord>, DataError> {
        if self.bounds == [0] {
            return Ok(vec![self.clone()]);
        }
        let mut out = Vec::with_capacity(self.bounds.len());
        for (i, &start) in self.bounds.iter().enumerate() {
            let end = self
                .bounds
                .get(i + 1)
                .copied()
                .unwrap_or(self.tokens.len());
            let mut spans = Vec::new();
            for &(s, e, role) in &self.spans {
                if s >= start && e <= end {
                    spans.push((s - start, e - start, role));
                } else if s < end && e > start {
                    return invalid(format!(
                        "span [{s}, {e}) crosses document boundary at {end}"
                    ));
                }
            }
            out.push(DatasetRecord::doc(self.tokens[start..end].to_vec(), spans));
        }
        Ok(out)
    }
}

// -- packing -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every non-padding token is a loss target.
    Full,
    /// Only tokens inside completion spans are loss targets.
    CompletionOnly,
    /// Per document: completion-only when the document has a completion span,
    /// full otherwise. For mixed streams (corpus plus chat pairs) where a
    /// single mode would either train on prompts or silently skip every
    /// span-less document.
    SpanOrFull,
}

/// One packed row: `tokens.len() == seq_len`, PAD-filled after the content,
/// `segs` holding the document start offsets (the padding tail is its own
/// segment so it cannot attend into real documents), and a per-position loss
/// mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSeq {
    pub tokens: Vec<usize>,
    pub segs: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

/// A group of packed rows processed together by the training loop.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub seqs: Vec<PackedSeq>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PackStats {
    pub rows: usize,
    pub packed_tokens: usize,
    pub pad_tokens: usize,
    pub dropped_records: usize,
    pub dropped_tokens: usize,
}

/// Pack records into fixed-length rows. Documents are kept whole: a record
/// with several documents is split at its boundaries first, and any single
/// document longer than `seq_len` is dropped and counted.
pub fn pack_sequences(
    records: &[DatasetRecord],
    seq_len: usize,
    mask: MaskMode,
) -> Result<(Vec<PackedSeq>, PackStats), DataError> {
    if seq_len == 0 {
        return invalid("seq_len must be positive");
    }
    let mut stats = PackStats::default();
    let mut rows: Vec<PackedSeq> = Vec::new();

    let mut tokens = Vec::with_capacity(seq_len);
    let mut segs = vec![0usize];
    let mut loss = Vec::with_capacity(seq_len);

    let mut flush = |tokens: &mut Vec<usize>, segs: &mut Vec<usize>, loss: &mut Vec<bool>| {
        if tokens.is_empty() {
            return;
        }
        let fill = tokens.len();
        if fill < seq_len {
            segs.push(fill); // isolate the padding tail
            tokens.resize(seq_len, PAD);
            loss.resize(seq_len, false);
            stats.pad_tokens += seq_len - fill;
        }
        stats.rows += 1;
        stats.packed_tokens += fill;
        rows.push(PackedSeq {
            tokens: std::mem::take(tokens),
            segs: std::mem::replace(segs, vec![0]),
            loss_mask: std::mem::take(loss),
        });
    };

    for rec in records {
        rec.validate()?;
        for doc in rec.split_docs()? {
            let n = doc.tokens.len();
            if n > seq_len {
                stats.dropped_records += 1;
                stats.dropped_tokens += n;
                continue;
            }
            if tokens.len() + n > seq_len {
                flush(&mut tokens, &mut segs, &mut loss);
            }
            let base = tokens.len();
            if base > 0 {
                segs.push(base);
            }
            tokens.extend_from_slice(&doc.tokens);
            let has_completion = doc.spans.iter().any(|&(_, _, r)| r == Role::Completion);
            match mask {
                MaskMode::Full => loss.extend(std::iter::repeat(true).take(n)),
                MaskMode::SpanOrFull if !has_completion => {
                    loss.extend(std::iter::repeat(true).take(n))
                }
                MaskMode::CompletionOnly | MaskMode::SpanOrFull => {
                    let mut m = vec![false; n];
                    for &(s, e, role) in &doc.spans {
                        if role == Role::Completion {
                            for b in &mut m[s..e] {
                                *b = true;
                            }
                        }
                    }
                    loss.extend_from_slice(&m);
                }
            }
        }
    }
    flush(&mut tokens, &mut segs, &mut loss);
    Ok((rows, stats))
}

/// Group rows into batches of at most `batch` rows.
pub fn to_batches(rows: Vec<PackedSeq>, batch: usize) -> Vec<PackedBatch> {
    assert!(batch > 0, "batch size must be positive");
    let mut out = Vec::with_capacity(rows.len().div_ceil(batch));
    let mut it = rows.into_iter().peekable();
    while it.peek().is_some() {
        out.push(PackedBatch {
            seqs: it.by_ref().take(batch).collect(),
        });
    }
    out
}

// -- mixing and splitting --------------------------------------------------------

/// Mixing proportions over a list of datasets, normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub ratios: Vec<f64>,
}

impl MixSpec {
    pub fn new(raw: &[f64]) -> Result<Self, DataError> {
        if raw.is_empty() || raw.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return invalid("ratios must be non-negative and finite");
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return invalid("ratios must not all be zero");
        }
        let ratios: Vec<f64> = raw.iter().map(|r| r / total).collect();
        debug_assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Ok(MixSpec { ratios })
    }
}

/// Seeded categorical interleaving of several record streams. Stops when the
/// drawn stream is exhausted, so long-run proportions match the spec.
pub fn mix_datasets(
    datasets: Vec<Vec<DatasetRecord>>,
    spec: &MixSpec,
    seed: u64,
) -> Result<Vec<DatasetRecord>, DataError> {
    if datasets.len() != spec.ratios.len() {
        return invalid(format!(
            "{} datasets for {} ratios",
            datasets.len(),
            spec.ratios.len()
        ));
    }
    let mut rng = crate::util::Rng64::seed_from(seed);
    let mut queues: Vec<std::collections::VecDeque<DatasetRecord>> =
        datasets.into_iter().map(Into::into).collect();
    let total: usize = queues.iter().map(|q| q.len()).sum();
    let mut out = Vec::with_capacity(total);
    loop {
        let pick = rng.pick_weighted(&spec.ratios);
        match queues[pick].pop_front() {
            Some(r) => out.push(r),
            None => break,
        }
    }
    Ok(out)
}

/// Deterministic held-out split: a record lands in the held-out set when the
/// seeded hash of its tokens falls below `frac`. Membership depends only on
/// (salt, tokens), not on position in the list.
pub fn heldout_split(
    records: Vec<DatasetRecord>,
    frac: f64,
    salt: u64,
) -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
    assert!((0.0..=1.0).contains(&frac), "frac must be in [0, 1]");
    let cut = (frac * 1_000_000.0).round() as u64;
    let mut train = Vec::new();
    let mut held = Vec::new();
    for r in records {
        let mut bytes = Vec::with_capacity(8 + r.tokens.len() * 8);
        bytes.extend_from_slice(&salt.to_le_bytes());
        for &t in &r.tokens {
            bytes.extend_from_slice(&(t as u64).to_le_bytes());
        }
        if fnv1a64(&bytes) % 1_000_000 < cut {
            held.push(r);
        } else {
            train.push(r);
        }
    }
    (train, held)
}

// -- dataset files ----------------------------------------------------------------

/// Write records as line-delimited JSON objects.
pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| DataError::Format(e.to_string()))?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Read and validate line-delimited records.
pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>, DataError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::Format(format!("line {}: {e}", i + 1)))?;
        rec.validate()
            .map_err(|e| DataError::Format(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
