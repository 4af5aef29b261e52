//! Seeded generators for the four synthetic data families: Markov "prose",
//! associative-recall examples, needle-in-a-haystack probes, and
//! teacher-answered instruction pairs.
//!
//! Token-range plan under the 512-token desk vocabulary: Markov content and
//! task payloads live in [4, 400); needle payloads in [400, 500); needle
//! markers are 500–502 and instruction-template markers 503–505, so
//! retrieval targets cannot collide with haystack text by construction.

use super::{DataError, DatasetRecord, Role, Span, BOS, EOS, RESERVED, SEP};
use crate::model::{generate, Decode, Model};
use crate::tensor::Real;
use crate::util::{fnv1a64, Rng64};

fn invalid<T>(msg: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Invalid(msg.into()))
}

// -- Markov corpus ---------------------------------------------------------------

/// A sparse fixed-topology Markov chain over a token range. Transition rows
/// are derived lazily from (seed, state) hashes, so the chain is a pure
/// function of its seed and needs no table.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub lo: usize,
    pub hi: usize,
    pub order: usize,
    pub branch: usize,
    seed: u64,
}

impl MarkovChain {
    pub fn new(seed: u64, order: usize, lo: usize, hi: usize) -> Result<Self, DataError> {
        if !(order == 1 || order == 2) {
            return invalid(format!("order must be 1 or 2, got {order}"));
        }
        if lo < RESERVED || hi <= lo {
            return invalid(format!("token range [{lo}, {hi}) must sit above the reserved ids"));
        }
        Ok(MarkovChain {
            lo,
            hi,
            order,
            branch: 6.min(hi - lo),
            seed,
        })
    }

    /// The transition row for a state: successor tokens and their
    /// probabilities. Deterministic in (chain seed, state).
    pub fn successors(&self, state: &[usize]) -> (Vec<usize>, Vec<f64>) {
        debug_assert_eq!(state.len(), self.order);
        let mut bytes = Vec::with_capacity(8 * (state.len() + 1));
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        for &s in state {
            bytes.extend_from_slice(&(s as u64).to_le_bytes());
        }
        let mut r = Rng64::seed_from(fnv1a64(&bytes));
        let span = self.hi - self.lo;
        let mut toks = Vec::with_capacity(self.branch);
        while toks.len() < self.branch {
            let t = self.lo + r.below(span);
            if !toks.contains(&t) {
                toks.push(t);
            }
        }
        // weights bounded away from zero so every edge is actually walked
        let raw: Vec<f64> = (0..self.branch).map(|_| 0.25 + r.uniform()).collect();
        let total: f64 = raw.iter().sum();
        (toks, raw.iter().map(|w| w / total).collect())
    }

    fn step(&self, state: &[usize], rng: &mut Rng64) -> usize {
        let (toks, probs) = self.successors(state);
        toks[rng.pick_weighted(&probs)]
    }
}

/// Geometric document length, shifted and capped so documents always fit a
/// packing row.
fn doc_len(rng: &mut Rng64) -> usize {
    let p = 1.0 / 44.0;
    let u = rng.uniform();
    let g = ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize;
    (4 + g).min(120)
}

/// Markov documents over an explicit token range; the range form exists so
/// two corpora can be made token-disjoint (domain-balance experiments).
/// Generates whole documents until at least `n_tokens` total tokens.
pub fn gen_markov_corpus_in(
    seed: u64,
    n_tokens: usize,
    order: usize,
    lo: usize,
    hi: usize,
) -> Result<Vec<DatasetRecord>, DataError> {
    let chain = MarkovChain::new(seed, order, lo, hi)?;
    let mut rng = Rng64::seed_from(seed);
    let mut out = Vec::new();
    let mut total = 0usize;
    while total < n_tokens {
        let len = doc_len(&mut rng);
        let mut words = Vec::with_capacity(len);
        for _ in 0..order {
            words.push(lo + rng.below(hi - lo));
        }
        while words.len() < len {
            let state = &words[words.len() - order..];
            let next = chain.step(state, &mut rng);
            words.push(next);
        }
        let mut tokens = Vec::with_capacity(len + 2);
        tokens.push(BOS);
        tokens.extend_from_slice(&words);
        tokens.push(EOS);
        total += tokens.len();
        out.push(DatasetRecord::doc(tokens, Vec::new()));
    }
    Ok(out)
}

/// Markov documents over [RESERVED, vocab).
pub fn gen_markov_corpus(
    seed: u64,
    n_tokens: usize,
    order: usize,
    vocab: usize,
) -> Result<Vec<DatasetRecord>, DataError> {
    gen_markov_corpus_in(seed, n_tokens, order, RESERVED, vocab)
}

// -- associative recall ------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ArParams {
    pub n_pairs: usize,
    pub n_examples: usize,
    pub key_space: usize,
    pub value_space: usize,
}

/// Key–value recall: each record lists `n_pairs` shuffled pairs, then asks
/// for one key's value. Keys are distinct within a record (collisions are
/// resampled away); the keys range is [RESERVED, RESERVED+key_space) and the
/// value range sits directly above it.
pub fn gen_ar_examples(p: ArParams, seed: u64) -> Result<Vec<DatasetRecord>, DataError> {
    if p.n_pairs == 0 {
        return invalid("need at least one pair");
    }
    if p.key_space < p.n_pairs {
        return invalid(format!(
            "key space {} cannot hold {} distinct keys",
            p.key_space, p.n_pairs
        ));
    }
    if p.value_space == 0 {
        return invalid("empty value space");
    }
    let key_lo = RESERVED;
    let val_lo = RESERVED + p.key_space;
    let mut rng = Rng64::seed_from(seed);
    let mut out = Vec::with_capacity(p.n_examples);
    for _ in 0..p.n_examples {
        let mut keys: Vec<usize> = Vec::with_capacity(p.n_pairs);
        while keys.len() < p.n_pairs {
            let k = key_lo + rng.below(p.key_space);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let vals: Vec<usize> = (0..p.n_pairs)
            .map(|_| val_lo + rng.below(p.value_space))
            .collect();
        let q = rng.below(p.n_pairs);
        let n = p.n_pairs;
        let mut tokens = Vec::with_capacity(2 * n + 5);
        tokens.push(BOS);
        for i in 0..n {
            tokens.push(keys[i]);
            tokens.push(vals[i]);
        }
        tokens.push(keys[q]);
        tokens.push(SEP);
        tokens.push(vals[q]);
        tokens.push(EOS);
        let spans: Vec<Span> = vec![
            (1, 2 * n + 2, Role::Prompt),
            (2 * n + 3, 2 * n + 5, Role::Completion),
        ];
        let rec = DatasetRecord::doc(tokens, spans);
        debug_assert!(rec.validate().is_ok());
        out.push(rec);
    }
    Ok(out)
}

// -- needle in a haystack -------------------------------------------------------------

/// Needle payload digits live in [400, 500); marker ids 500–502.
pub const NEEDLE_PAYLOAD_LO: usize = 400;
pub const NEEDLE_PAYLOAD_HI: usize = 500;
pub const NEEDLE_MARK_A: usize = 500;
pub const NEEDLE_MARK_B: usize = 501;
pub const NEEDLE_QUERY: usize = 502;
/// Markov prose for haystacks stays below the payload range.
pub const PROSE_HI: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeedleKind {
    /// single-token payload inside a repeated filler sentence
    RepeatedHaystackNumber,
    /// single-token payload inside Markov prose
    ProseNumber,
    /// four-token payload inside Markov prose
    ProseUuid,
}

/// One retrieval probe of exactly `context_len` tokens: haystack with the
/// needle `[MARK_A, MARK_B, payload…]` inserted at a seeded offset, then the
/// query marker, SEP, and the payload as the completion.
pub fn gen_niah(
    context_len: usize,
    kind: NeedleKind,
    seed: u64,
) -> Result<DatasetRecord, DataError> {
    let payload_len = match kind {
        NeedleKind::RepeatedHaystackNumber | NeedleKind::ProseNumber => 1,
        NeedleKind::ProseUuid => 4,
    };
    let needle_len = 2 + payload_len;
    // BOS + query + SEP + answer payload + EOS
    let frame = 4 + payload_len;
    let min_len = frame + needle_len;
    if context_len < min_len {
        return invalid(format!(
            "context_len {context_len} below the minimum {min_len} for {kind:?}"
        ));
    }
    let hay_len = context_len - frame - needle_len;
    let mut rng = Rng64::seed_from(seed);
    let payload: Vec<usize> = (0..payload_len)
        .map(|_| NEEDLE_PAYLOAD_LO + rng.below(NEEDLE_PAYLOAD_HI - NEEDLE_PAYLOAD_LO))
        .collect();

    let hay: Vec<usize> = match kind {
        NeedleKind::RepeatedHaystackNumber => {
            let sentence = [310, 311, 312, 313, 314, 315];
            (0..hay_len).map(|i| sentence[i % sentence.len()]).collect()
        }
        NeedleKind::ProseNumber | NeedleKind::ProseUuid => {
            let chain = MarkovChain::new(seed ^ 0x9e37_79b9_7f4a_7c15, 1, RESERVED, PROSE_HI)?;
            let mut words = Vec::with_capacity(hay_len);
            if hay_len > 0 {
                words.push(RESERVED + rng.below(PROSE_HI - RESERVED));
            }
            while words.len() < hay_len {
                let next = chain.step(&words[words.len() - 1..], &mut rng);
                words.push(next);
            }
            words
        }
    };

    let insert_at = rng.below(hay_len + 1);
    let mut tokens = Vec::with_capacity(context_len);
    tokens.push(BOS);
    tokens.extend_from_slice(&hay[..insert_at]);
    tokens.push(NEEDLE_MARK_A);
    tokens.push(NEEDLE_MARK_B);
    tokens.extend_from_slice(&payload);
    tokens.extend_from_slice(&hay[insert_at..]);
    tokens.push(NEEDLE_QUERY);
    let sep_at = tokens.len();
    tokens.push(SEP);
    tokens.extend_from_slice(&payload);
    tokens.push(EOS);
    debug_assert_eq!(tokens.len(), context_len);

    let spans: Vec<Span> = vec![
        (1, sep_at, Role::Prompt),
        (sep_at + 1, tokens.len(), Role::Completion),
    ];
    let rec = DatasetRecord::doc(tokens, spans);
    debug_assert!(rec.validate().is_ok());
    Ok(rec)
}

// -- instruction pairs ------------------------------------------------------------------

pub const COPY_MARKER: usize = 503;
pub const REVERSE_MARKER: usize = 504;
pub const CONTINUE_MARKER: usize = 505;
const MAX_COMPLETION: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstructTemplate {
    /// repeat a short token sequence
    Copy,
    /// emit a short token sequence reversed
    Reverse,
    /// answer a 3-pair recall query
    ArQuery,
    /// continue a Markov prefix
    Continue,
}

#[derive(Debug, Clone)]
pub struct InstructBatch {
    pub records: Vec<DatasetRecord>,
    /// index into the template list used for each record
    pub template_ids: Vec<usize>,
    /// prompts whose teacher answer was empty (first token EOS)
    pub dropped_empty: usize,
}

/// Templated prompts answered by the teacher's own greedy continuation,
/// truncated at its first EOS. Records use the chat frame
/// `BOS prompt SEP completion EOS`; the completion span covers the answer
/// and the closing EOS.
pub fn gen_instruct_pairs<F: Real>(
    teacher: &Model<F>,
    templates: &[InstructTemplate],
    n: usize,
    seed: u64,
) -> Result<InstructBatch, DataError> {
    if templates.is_empty() {
        return invalid("no templates given");
    }
    if teacher.config.vocab_size <= CONTINUE_MARKER {
        return invalid(format!(
            "teacher vocabulary {} too small for the template markers",
            teacher.config.vocab_size
        ));
    }
    let mut rng = Rng64::seed_from(seed);
    let chain = MarkovChain::new(seed ^ 0x5851_f42d_4c95_7f2d, 1, RESERVED, PROSE_HI)?;
    let mut records = Vec::with_capacity(n);
    let mut template_ids = Vec::with_capacity(n);
    let mut dropped_empty = 0usize;

    for i in 0..n {
        let tid = i % templates.len();
        let prompt: Vec<usize> = match templates[tid] {
            InstructTemplate::Copy | InstructTemplate::Reverse => {
                let marker = if templates[tid] == InstructTemplate::Copy {
                    COPY_MARKER
                } else {
                    REVERSE_MARKER
                };
                let m = 3 + rng.below(6);
                let mut p = Vec::with_capacity(m + 1);
                p.push(marker);
                for _ in 0..m {
                    p.push(RESERVED + rng.below(296));
                }
                p
            }
            InstructTemplate::ArQuery => {
                let mut keys: Vec<usize> = Vec::with_capacity(3);
                while keys.len() < 3 {
                    let k = RESERVED + rng.below(200);
                    if !keys.contains(&k) {
                        keys.push(k);
                    }
                }
                let vals: Vec<usize> = (0..3).map(|_| 204 + rng.below(100)).collect();
                let q = rng.below(3);
                let mut p = Vec::with_capacity(7);
                for j in 0..3 {
                    p.push(keys[j]);
                    p.push(vals[j]);
                }
                p.push(keys[q]);
                p
            }
            InstructTemplate::Continue => {
                let m = 8 + rng.below(8);
                let mut words = vec![RESERVED + rng.below(PROSE_HI - RESERVED)];
                while words.len() < m {
                    let next = chain.step(&words[words.len() - 1..], &mut rng);
                    words.push(next);
                }
                let mut p = Vec::with_capacity(m + 1);
                p.push(CONTINUE_MARKER);
                p.extend_from_slice(&words);
                p
            }
        };

        let mut feed = Vec::with_capacity(prompt.len() + 2);
        feed.push(BOS);
        feed.extend_from_slice(&prompt);
        feed.push(SEP);
        let raw = generate(teacher, &feed, MAX_COMPLETION, &Decode::Greedy)?;
        let completion: Vec<usize> = raw.iter().copied().take_while(|&t| t != EOS).collect();
        if completion.is_empty() {
            dropped_empty += 1;
            continue;
        }
        let sep_at = feed.len() - 1;
        let mut tokens = feed;
        tokens.extend_from_slice(&completion);
        tokens.push(EOS);
        let spans: Vec<Span> = vec![
            (1, sep_at, Role::Prompt),
            (sep_at + 1, tokens.len(), Role::Completion),
        ];
        let rec = DatasetRecord::doc(tokens, spans);
        debug_assert!(rec.validate().is_ok());
        records.push(rec);
        template_ids.push(tid);
    }
    Ok(InstructBatch {
        records,
        template_ids,
        dropped_empty,
    })
}
