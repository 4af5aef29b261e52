//! Dual-protocol evaluation and the teacher–student gap report.
//!
//! Every task family is scored two ways over the same underlying problems:
//! by log-likelihood ranking (the model picks the candidate completion it
//! assigns the highest probability) and by autoregressive generation (the
//! model must produce the answer token by token and the output is parsed).
//! The two protocols can disagree badly — a student can rank answers almost
//! as well as its teacher while losing far more accuracy when it has to
//! produce them, because generation compounds per-step errors and ranking
//! never leaves the reference path. [`gap_report`] measures both gaps side
//! by side and reports how far they spread apart.
//!
//! Scoring is decode-free for ranking and perplexity, and seed-deterministic
//! for generation; tasks are independent and run under a parallel map whose
//! results keep task order, so outcomes are identical at any thread count.

mod report;
mod suite;

pub use report::{
    gap_report, read_report, render_table, write_report, EvalReport, FamilyReport, ProtocolPair,
};
pub use suite::{
    ar_family, instruct_family, niah_family, read_gen_tasks, read_mcq_tasks, write_gen_tasks,
    write_mcq_tasks, EvalSuite, TaskFamily,
};

use crate::data::{DatasetRecord, Role, EOS, SEP};
use crate::mixers::ScanMode;
use crate::model::{generate, Decode, Model};
use crate::tensor::{Real, TensorError};
use crate::util::fnv1a64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("bad task: {0}")]
    Task(String),
    #[error("empty evaluation scope: {0}")]
    EmptyScope(String),
    #[error("model evaluation: {0}")]
    Tensor(#[from] TensorError),
    #[error("task file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("task file format: {0}")]
    Format(String),
}

fn bad_task<T>(msg: impl Into<String>) -> Result<T, EvalError> {
    Err(EvalError::Task(msg.into()))
}

// -- tasks -------------------------------------------------------------------

/// Multiple-choice task: candidate completions ranked by their total
/// log-probability conditioned on the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQTask {
    pub prompt: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gold: usize,
}

impl MCQTask {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.prompt.is_empty() {
            return bad_task("mcq prompt is empty");
        }
        if self.candidates.len() < 2 {
            return bad_task(format!(
                "mcq needs at least 2 candidates, got {}",
                self.candidates.len()
            ));
        }
        if self.candidates.iter().any(|c| c.is_empty()) {
            return bad_task("mcq candidate is empty");
        }
        let distinct: std::collections::BTreeSet<&[usize]> =
            self.candidates.iter().map(|c| c.as_slice()).collect();
        if distinct.len() != self.candidates.len() {
            return bad_task("mcq candidates are not distinct");
        }
        if self.gold >= self.candidates.len() {
            return bad_task(format!(
                "gold index {} out of range for {} candidates",
                self.gold,
                self.candidates.len()
            ));
        }
        Ok(())
    }
}

/// How the answer is pulled out of a generated continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerParser {
    /// The answer is the whole output, truncated at the first EOS.
    ExactMatch,
    /// The answer sits in a `SEP … EOS` window: tokens strictly between the
    /// first SEP of prompt + output and the first EOS after it. With the
    /// standard chat frame the SEP is the prompt's final token, so this
    /// reads the model's answer up to its first EOS; both markers must be
    /// present or the parse fails.
    FirstAnswerSpan,
}

/// Generation task: the model continues the prompt and the parsed answer
/// must equal `reference` exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenTask {
    pub prompt: Vec<usize>,
    pub reference: Vec<usize>,
    pub parser: AnswerParser,
}

impl GenTask {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.prompt.is_empty() {
            return bad_task("generation prompt is empty");
        }
        if self.reference.is_empty() {
            return bad_task("generation reference is empty");
        }
        Ok(())
    }
}

/// Extract the answer from `generated` (the tokens after `prompt`). `None`
/// is a parse failure — the expected frame never appeared in the output.
pub fn parse_answer(
    parser: AnswerParser,
    prompt: &[usize],
    generated: &[usize],
) -> Option<Vec<usize>> {
    match parser {
        AnswerParser::ExactMatch => {
            let end = generated
                .iter()
                .position(|&t| t == EOS)
                .unwrap_or(generated.len());
            Some(generated[..end].to_vec())
        }
        AnswerParser::FirstAnswerSpan => {
            let full: Vec<usize> = prompt.iter().chain(generated).copied().collect();
            let sep = full.iter().position(|&t| t == SEP)?;
            let eos = sep + 1 + full[sep + 1..].iter().position(|&t| t == EOS)?;
            Some(full[sep + 1..eos].to_vec())
        }
    }
}

// -- sharing a model across the task pool --------------------------------------

/// Read-only model handle for the parallel task map.
///
/// Tensors are thread-safe only while they carry no autograd node (the tape
/// handle is deliberately single-threaded). An evaluation model is plain
/// data; the constructor enforces that, after which every shared field is
/// immutable `Arc`-backed storage and concurrent reads are sound.
pub(crate) struct SyncModel<'a, F: Real>(&'a Model<F>);

unsafe impl<F: Real> Send for SyncModel<'_, F> {}
unsafe impl<F: Real> Sync for SyncModel<'_, F> {}

impl<'a, F: Real> SyncModel<'a, F> {
    pub(crate) fn new(m: &'a Model<F>) -> Result<Self, EvalError> {
        let mut tracked = false;
        m.visit(&mut |_, t| tracked |= t.is_tracked());
        if tracked {
            return bad_task("model carries gradient-tape state; evaluate a detached model");
        }
        Ok(SyncModel(m))
    }

    pub(crate) fn get(&self) -> &'a Model<F> {
        self.0
    }
}

/// Parallel map over independent tasks; results come back in task order, so
/// downstream folds are deterministic at any thread count.
pub(crate) fn par_map<F, T, R, G>(
    model: &Model<F>,
    items: &[T],
    f: G,
) -> Result<Vec<R>, EvalError>
where
    F: Real,
    T: Sync,
    R: Send,
    G: Fn(&Model<F>, usize, &T) -> R + Sync,
{
    let shared = SyncModel::new(model)?;
    Ok(items
        .par_iter()
        .enumerate()
        .map(|(i, t)| f(shared.get(), i, t))
        .collect())
}

fn check_vocab<'a, F: Real>(
    model: &Model<F>,
    what: &str,
    tokens: impl IntoIterator<Item = &'a usize>,
) -> Result<(), EvalError> {
    let v = model.config.vocab_size;
    for &t in tokens {
        if t >= v {
            return bad_task(format!("{what} holds token {t} outside vocabulary {v}"));
        }
    }
    Ok(())
}

/// log P(tok) for one raw logits row, computed in f64 with the usual
/// max-shifted log-sum-exp.
pub(crate) fn row_log_prob<F: Real>(row: &[F], tok: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in row {
        let v = x.to_f64();
        if v > m {
            m = v;
        }
    }
    let mut s = 0.0;
    for &x in row {
        s += (x.to_f64() - m).exp();
    }
    row[tok].to_f64() - m - s.ln()
}

// -- protocol 1: log-likelihood ranking ----------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqOutcome {
    pub accuracy: f64,
    pub correct: usize,
    /// tasks whose top score was shared by several candidates (all scored
    /// incorrect — ranking must be decisive)
    pub ties: usize,
    pub n: usize,
}

/// Total candidate-token log-probability under the model, one value per
/// candidate, in candidate order. This is the raw (un-normalized) quantity
/// the ranking protocol argmaxes over.
pub fn mcq_candidate_logliks<F: Real>(
    model: &Model<F>,
    task: &MCQTask,
    scan: ScanMode,
) -> Result<Vec<f64>, EvalError> {
    task.validate()?;
    check_vocab(
        model,
        "mcq task",
        task.prompt.iter().chain(task.candidates.iter().flatten()),
    )?;
    Ok(candidate_logliks(model, task, scan)?)
}

fn candidate_logliks<F: Real>(
    model: &Model<F>,
    task: &MCQTask,
    scan: ScanMode,
) -> Result<Vec<f64>, TensorError> {
    let p = task.prompt.len();
    let v = model.config.vocab_size;
    let mut out = Vec::with_capacity(task.candidates.len());
    for cand in &task.candidates {
        let mut toks = Vec::with_capacity(p + cand.len());
        toks.extend_from_slice(&task.prompt);
        toks.extend_from_slice(cand);
        let logits = model.forward(&toks, &[0], scan)?;
        let data = logits.data();
        let mut lp = 0.0;
        for (j, &ct) in cand.iter().enumerate() {
            lp += row_log_prob(&data[(p - 1 + j) * v..(p + j) * v], ct);
        }
        out.push(lp);
    }
    Ok(out)
}

/// Rank candidates by conditional log-likelihood and compare the winner to
/// the gold index. `length_norm` divides each candidate's total by its token
/// count before ranking. A shared maximum counts as incorrect: ranking is
/// only credited when it is decisive.
pub fn eval_mcq_loglik<F: Real>(
    model: &Model<F>,
    tasks: &[MCQTask],
    length_norm: bool,
    scan: ScanMode,
) -> Result<McqOutcome, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyScope("no mcq tasks".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        t.validate()
            .map_err(|e| EvalError::Task(format!("task {i}: {e}")))?;
        check_vocab(
            model,
            "mcq task",
            t.prompt.iter().chain(t.candidates.iter().flatten()),
        )?;
    }
    let per: Vec<Result<(bool, bool), TensorError>> =
        par_map(model, tasks, |m, _, t| -> Result<_, TensorError> {
            let ll = candidate_logliks(m, t, scan)?;
            let score = |i: usize| {
                if length_norm {
                    ll[i] / t.candidates[i].len() as f64
                } else {
                    ll[i]
                }
            };
            let mut best = 0usize;
            let mut tied = false;
            for i in 1..ll.len() {
                if score(i) > score(best) {
                    best = i;
                    tied = false;
                } else if score(i) == score(best) {
                    tied = true;
                }
            }
            Ok((best == t.gold && !tied, tied))
        })?;
    let mut correct = 0;
    let mut ties = 0;
    for r in per {
        let (ok, tie) = r?;
        correct += ok as usize;
        ties += tie as usize;
    }
    Ok(McqOutcome {
        accuracy: correct as f64 / tasks.len() as f64,
        correct,
        ties,
        n: tasks.len(),
    })
}

// -- protocol 2: autoregressive generation --------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOutcome {
    /// mean accuracy over the evaluation seeds
    pub accuracy: f64,
    pub per_seed: Vec<f64>,
    /// outputs where the expected frame never appeared, totalled across all
    /// seed rounds (each also counts as incorrect)
    pub parser_failures: usize,
    pub n: usize,
}

fn with_seed(decode: &Decode, seed: u64) -> Decode {
    match *decode {
        Decode::Greedy => Decode::Greedy,
        Decode::Sample {
            temperature,
            top_p,
            top_k,
            ..
        } => Decode::Sample {
            temperature,
            top_p,
            top_k,
            seed,
        },
    }
}

/// Per-task sampling seed: tasks must not share one random stream or a
/// single draw pattern would correlate every task in a round.
fn task_seed(seed: u64, idx: usize) -> u64 {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..].copy_from_slice(&(idx as u64).to_le_bytes());
    fnv1a64(&bytes)
}

/// Generate up to `max_new` tokens per task, parse the answer, and require
/// an exact match against the reference. Accuracy is averaged over `seeds`
/// (which reseed sampling; greedy decoding is seed-free, so one round is
/// computed and replicated).
pub fn eval_generation<F: Real>(
    model: &Model<F>,
    tasks: &[GenTask],
    decode: &Decode,
    max_new: usize,
    seeds: &[u64],
) -> Result<GenOutcome, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyScope("no generation tasks".into()));
    }
    if seeds.is_empty() {
        return Err(EvalError::EmptyScope("no evaluation seeds".into()));
    }
    if max_new == 0 {
        return bad_task("max_new must be at least 1");
    }
    for (i, t) in tasks.iter().enumerate() {
        t.validate()
            .map_err(|e| EvalError::Task(format!("task {i}: {e}")))?;
        check_vocab(model, "generation task", t.prompt.iter())?;
    }

    let run_round = |round_seed: u64| -> Result<(f64, usize), EvalError> {
        let per: Vec<Result<(bool, bool), TensorError>> =
            par_map(model, tasks, |m, i, t| -> Result<_, TensorError> {
                let d = with_seed(decode, task_seed(round_seed, i));
                let out = generate(m, &t.prompt, max_new, &d)?;
                Ok(match parse_answer(t.parser, &t.prompt, &out) {
                    Some(ans) => (ans == t.reference, false),
                    None => (false, true),
                })
            })?;
        let mut correct = 0;
        let mut failures = 0;
        for r in per {
            let (ok, failed) = r?;
            correct += ok as usize;
            failures += failed as usize;
        }
        Ok((correct as f64 / tasks.len() as f64, failures))
    };

    let (per_seed, parser_failures) = if *decode == Decode::Greedy {
        let (acc, failures) = run_round(0)?;
        (vec![acc; seeds.len()], failures * seeds.len())
    } else {
        let mut accs = Vec::with_capacity(seeds.len());
        let mut failures = 0;
        for &s in seeds {
            let (acc, f) = run_round(s)?;
            accs.push(acc);
            failures += f;
        }
        (accs, failures)
    };
    let accuracy = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(GenOutcome {
        accuracy,
        per_seed,
        parser_failures,
        n: tasks.len(),
    })
}

// -- perplexity ------------------------------------------------------------------

/// Which predicted tokens enter the perplexity average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplScope {
    /// every token with in-document context (document-start tokens have
    /// none and are skipped)
    AllTokens,
    /// only tokens inside completion spans
    AnswerTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplOutcome {
    pub ppl: f64,
    pub mean_nll: f64,
    pub tokens: usize,
}

/// exp of the mean negative log-likelihood over the corpus, restricted to
/// `scope`. Each record runs as its own sequence with its document bounds
/// as attention segments.
pub fn eval_perplexity<F: Real>(
    model: &Model<F>,
    corpus: &[DatasetRecord],
    scope: PplScope,
    scan: ScanMode,
) -> Result<PplOutcome, EvalError> {
    for (i, rec) in corpus.iter().enumerate() {
        rec.validate()
            .map_err(|e| EvalError::Task(format!("record {i}: {e}")))?;
        check_vocab(model, "corpus record", rec.tokens.iter())?;
    }
    let per: Vec<Result<(f64, usize), TensorError>> =
        par_map(model, corpus, |m, _, rec| record_nll(m, rec, scope, scan))?;
    let mut total = 0.0;
    let mut n = 0usize;
    for r in per {
        let (nll, k) = r?;
        total += nll;
        n += k;
    }
    if n == 0 {
        return Err(EvalError::EmptyScope(match scope {
            PplScope::AllTokens => "corpus has no scoreable tokens".into(),
            PplScope::AnswerTokens => "corpus has no completion-span tokens".into(),
        }));
    }
    let mean_nll = total / n as f64;
    Ok(PplOutcome {
        ppl: mean_nll.exp(),
        mean_nll,
        tokens: n,
    })
}

fn record_nll<F: Real>(
    model: &Model<F>,
    rec: &DatasetRecord,
    scope: PplScope,
    scan: ScanMode,
) -> Result<(f64, usize), TensorError> {
    let logits = model.forward(&rec.tokens, &rec.bounds, scan)?;
    let v = model.config.vocab_size;
    let data = logits.data();
    let mut keep = vec![matches!(scope, PplScope::AllTokens); rec.tokens.len()];
    if scope == PplScope::AnswerTokens {
        for &(s, e, role) in &rec.spans {
            if role == Role::Completion {
                for k in keep.iter_mut().take(e).skip(s) {
                    *k = true;
                }
            }
        }
    }
    let mut nll = 0.0;
    let mut n = 0usize;
    for p in 1..rec.tokens.len() {
        // a document's first token has no context; its logits row belongs
        // to the previous document
        if rec.bounds.binary_search(&p).is_ok() || !keep[p] {
            continue;
        }
        nll -= row_log_prob(&data[(p - 1) * v..p * v], rec.tokens[p]);
        n += 1;
    }
    Ok((nll, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BOS, RESERVED};

    #[test]
    fn span_parser_reads_between_the_frame_markers() {
        // chat frame: the prompt ends with SEP, the model answers then stops
        let prompt = [BOS, 10, 11, SEP];
        let gen = [20, 21, EOS, 9, 9];
        assert_eq!(
            parse_answer(AnswerParser::FirstAnswerSpan, &prompt, &gen),
            Some(vec![20, 21])
        );
        // model that emits the frame itself
        let bare = [BOS, 10, 11];
        let gen2 = [SEP, 30, EOS];
        assert_eq!(
            parse_answer(AnswerParser::FirstAnswerSpan, &bare, &gen2),
            Some(vec![30])
        );
        // missing markers fail the parse
        assert_eq!(parse_answer(AnswerParser::FirstAnswerSpan, &bare, &[5, 6]), None);
        assert_eq!(
            parse_answer(AnswerParser::FirstAnswerSpan, &prompt, &[20, 21]),
            None
        );
        // empty answer parses as empty (incorrect, but not a parse failure)
        assert_eq!(
            parse_answer(AnswerParser::FirstAnswerSpan, &prompt, &[EOS]),
            Some(vec![])
        );
    }

    #[test]
    fn exact_parser_truncates_at_eos_or_takes_everything() {
        assert_eq!(
            parse_answer(AnswerParser::ExactMatch, &[BOS], &[7, 8, EOS, 9]),
            Some(vec![7, 8])
        );
        assert_eq!(
            parse_answer(AnswerParser::ExactMatch, &[BOS], &[7, 8, 9]),
            Some(vec![7, 8, 9])
        );
    }

    #[test]
    fn task_validation_catches_the_malformed_shapes() {
        let ok = MCQTask {
            prompt: vec![BOS, 5],
            candidates: vec![vec![7], vec![8]],
            gold: 1,
        };
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.gold = 2;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.candidates = vec![vec![7], vec![7]];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.candidates = vec![vec![7]];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.candidates = vec![vec![7], vec![]];
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.prompt = vec![];
        assert!(bad.validate().is_err());

        let gt = GenTask {
            prompt: vec![BOS, RESERVED],
            reference: vec![],
            parser: AnswerParser::FirstAnswerSpan,
        };
        assert!(gt.validate().is_err());
    }

    #[test]
    fn row_log_probs_are_shift_invariant_and_normalized() {
        let row = [0.5f64, -1.0, 2.0, 0.0];
        let shifted: Vec<f64> = row.iter().map(|x| x + 3.25).collect();
        let mut total = 0.0;
        for t in 0..row.len() {
            let a = row_log_prob(&row, t);
            let b = row_log_prob(&shifted, t);
            assert!((a - b).abs() < 1e-12, "shift changed log prob: {a} vs {b}");
            total += a.exp();
        }
        assert!((total - 1.0).abs() < 1e-12, "probabilities sum to {total}");
    }

    #[test]
    fn per_task_seeds_differ_across_tasks_and_rounds() {
        assert_ne!(task_seed(1, 0), task_seed(1, 1));
        assert_ne!(task_seed(1, 0), task_seed(2, 0));
        assert_eq!(task_seed(3, 7), task_seed(3, 7));
    }
}
