//! Benchmark suites: the same synthetic problems rendered as ranking tasks
//! and as generation tasks, plus the line-format task files.
//!
//! Builders wrap the dataset generators. Each produces one [`TaskFamily`]
//! whose MCQ and generation lists cover the same underlying documents: the
//! generation reference is the document's completion (without the closing
//! EOS), and the MCQ gold candidate is that same completion ranked against
//! sampled distractors.

use super::{AnswerParser, EvalError, GenTask, MCQTask};
use crate::data::{
    gen_ar_examples, gen_instruct_pairs, gen_niah, ArParams, DataError, DatasetRecord,
    InstructTemplate, NeedleKind, Role, Span, BOS, EOS, NEEDLE_PAYLOAD_HI, NEEDLE_PAYLOAD_LO,
    PROSE_HI, RESERVED, SEP,
};
use crate::mixers::ScanMode;
use crate::model::{Decode, Model};
use crate::tensor::Real;
use crate::util::Rng64;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One benchmark family: the same problems under both protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    pub name: String,
    pub mcq: Vec<MCQTask>,
    pub gen: Vec<GenTask>,
}

/// A set of families plus the evaluation knobs shared across them.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub families: Vec<TaskFamily>,
    pub decode: Decode,
    pub seeds: Vec<u64>,
    pub max_new: usize,
    pub length_norm: bool,
    pub scan: ScanMode,
}

impl EvalSuite {
    /// Greedy decoding, seeds {1, 2, 3}, answers up to 24 tokens, raw
    /// (un-normalized) candidate scores.
    pub fn new(families: Vec<TaskFamily>) -> Self {
        EvalSuite {
            families,
            decode: Decode::Greedy,
            seeds: vec![1, 2, 3],
            max_new: 24,
            length_norm: false,
            scan: ScanMode::Chunked(64),
        }
    }
}

/// Split a single-document chat-framed record into the evaluation prompt
/// (everything before the completion span, so it ends at the frame's SEP)
/// and the reference answer (the completion without its closing EOS).
fn split_record(rec: &DatasetRecord) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if rec.bounds != [0] {
        return Err(EvalError::Task(
            "evaluation records must hold a single document".into(),
        ));
    }
    let (start, end) = rec
        .spans
        .iter()
        .find(|s| s.2 == Role::Completion)
        .map(|&(s, e, _)| (s, e))
        .ok_or_else(|| EvalError::Task("record has no completion span".into()))?;
    let prompt = rec.tokens[..start].to_vec();
    let mut reference = rec.tokens[start..end].to_vec();
    if reference.last() == Some(&EOS) {
        reference.pop();
    }
    if prompt.is_empty() || reference.is_empty() {
        return Err(EvalError::Task("degenerate prompt or completion".into()));
    }
    Ok((prompt, reference))
}

/// Gold candidate plus sampled distinct distractors, shuffled; returns the
/// candidate list and the gold's position in it.
fn fill_candidates(
    gold: &[usize],
    n_candidates: usize,
    rng: &mut Rng64,
    mut draw: impl FnMut(&mut Rng64) -> Vec<usize>,
) -> Result<(Vec<Vec<usize>>, usize), EvalError> {
    if n_candidates < 2 {
        return Err(EvalError::Task("need at least 2 candidates".into()));
    }
    let mut cands = vec![gold.to_vec()];
    let mut tries = 0usize;
    while cands.len() < n_candidates {
        let c = draw(rng);
        if !cands.contains(&c) {
            cands.push(c);
        }
        tries += 1;
        if tries > 200 * n_candidates {
            return Err(EvalError::Task(format!(
                "could not draw {n_candidates} distinct candidates"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n_candidates).collect();
    rng.shuffle(&mut order);
    let gold_at = order.iter().position(|&i| i == 0).expect("gold in order");
    let cands: Vec<Vec<usize>> = order.into_iter().map(|i| cands[i].clone()).collect();
    Ok((cands, gold_at))
}

fn family_from_records(
    name: &str,
    records: &[DatasetRecord],
    parser: AnswerParser,
    n_candidates: usize,
    rng: &mut Rng64,
    mut draw: impl FnMut(&[usize], &mut Rng64) -> Vec<usize>,
) -> Result<TaskFamily, EvalError> {
    let mut mcq = Vec::with_capacity(records.len());
    let mut gen = Vec::with_capacity(records.len());
    for rec in records {
        let (prompt, reference) = split_record(rec)?;
        let (candidates, gold) =
            fill_candidates(&reference, n_candidates, rng, |r| draw(&reference, r))?;
        let task = MCQTask {
            prompt: prompt.clone(),
            candidates,
            gold,
        };
        task.validate()?;
        mcq.push(task);
        gen.push(GenTask {
            prompt,
            reference,
            parser,
        });
    }
    Ok(TaskFamily {
        name: name.into(),
        mcq,
        gen,
    })
}

/// Key–value recall rendered both ways: distractors are other values from
/// the same value range.
pub fn ar_family(p: ArParams, n_candidates: usize, seed: u64) -> Result<TaskFamily, EvalError> {
    if p.value_space < n_candidates {
        return Err(EvalError::Task(format!(
            "value space {} cannot fill {} distinct candidates",
            p.value_space, n_candidates
        )));
    }
    let records = gen_ar_examples(p, seed)?;
    let val_lo = RESERVED + p.key_space;
    let mut rng = Rng64::substream(seed, "ar_family");
    family_from_records(
        "ar",
        &records,
        AnswerParser::FirstAnswerSpan,
        n_candidates,
        &mut rng,
        |_, r| vec![val_lo + r.below(p.value_space)],
    )
}

/// Retrieval from a long context: distractors are other payloads of the
/// same length.
pub fn niah_family(
    n: usize,
    context_len: usize,
    kind: NeedleKind,
    n_candidates: usize,
    seed: u64,
) -> Result<TaskFamily, EvalError> {
    let mut seeder = Rng64::substream(seed, "niah_records");
    let records: Vec<DatasetRecord> = (0..n)
        .map(|_| gen_niah(context_len, kind, seeder.next_u64()))
        .collect::<Result<_, _>>()?;
    let span = NEEDLE_PAYLOAD_HI - NEEDLE_PAYLOAD_LO;
    let mut rng = Rng64::substream(seed, "niah_family");
    family_from_records(
        "niah",
        &records,
        AnswerParser::FirstAnswerSpan,
        n_candidates,
        &mut rng,
        |gold, r| {
            gold.iter()
                .map(|_| NEEDLE_PAYLOAD_LO + r.below(span))
                .collect()
        },
    )
}

/// Templated instructions answered by the teacher's own greedy
/// continuations; distractors perturb one answer position. Under greedy
/// decoding the teacher reproduces its own references exactly.
pub fn instruct_family<F: Real>(
    teacher: &Model<F>,
    templates: &[InstructTemplate],
    n: usize,
    n_candidates: usize,
    seed: u64,
) -> Result<TaskFamily, EvalError> {
    let batch = gen_instruct_pairs(teacher, templates, n, seed)?;
    let mut rng = Rng64::substream(seed, "instruct_family");
    family_from_records(
        "instruct",
        &batch.records,
        AnswerParser::FirstAnswerSpan,
        n_candidates,
        &mut rng,
        |gold, r| {
            let mut c = gold.to_vec();
            let at = r.below(c.len());
            loop {
                let t = RESERVED + r.below(PROSE_HI - RESERVED);
                if t != c[at] {
                    c[at] = t;
                    break;
                }
            }
            c
        },
    )
}

// -- task files --------------------------------------------------------------------

/// One task per line in the dataset record shape (tokens / bounds / spans,
/// with the completion span framing the gold answer) plus the task fields.
#[derive(Serialize, Deserialize)]
struct TaskLine {
    tokens: Vec<usize>,
    bounds: Vec<usize>,
    spans: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parser: Option<AnswerParser>,
}

fn frame_line(prompt: &[usize], answer: &[usize]) -> TaskLine {
    let p = prompt.len();
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(answer);
    tokens.push(EOS);
    let ps = usize::from(prompt.first() == Some(&BOS));
    let pe = if prompt.last() == Some(&SEP) { p - 1 } else { p };
    let mut spans: Vec<Span> = Vec::with_capacity(2);
    if ps < pe {
        spans.push((ps, pe, Role::Prompt));
    }
    spans.push((p, tokens.len(), Role::Completion));
    TaskLine {
        tokens,
        bounds: vec![0],
        spans,
        candidates: None,
        gold: None,
        parser: None,
    }
}

fn write_lines(path: &Path, lines: &[TaskLine]) -> Result<(), EvalError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut w, line).map_err(|e| EvalError::Format(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<TaskLine>, EvalError> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tl: TaskLine = serde_json::from_str(&line)
            .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?;
        let rec = DatasetRecord {
            tokens: tl.tokens.clone(),
            bounds: tl.bounds.clone(),
            spans: tl.spans.clone(),
        };
        rec.validate()
            .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?;
        out.push(tl);
    }
    Ok(out)
}

pub fn write_mcq_tasks(path: &Path, tasks: &[MCQTask]) -> Result<(), EvalError> {
    let lines: Vec<TaskLine> = tasks
        .iter()
        .map(|t| {
            let mut line = frame_line(&t.prompt, &t.candidates[t.gold]);
            line.candidates = Some(t.candidates.clone());
            line.gold = Some(t.gold);
            line
        })
        .collect();
    write_lines(path, &lines)
}

pub fn read_mcq_tasks(path: &Path) -> Result<Vec<MCQTask>, EvalError> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, tl)| {
            let rec = DatasetRecord {
                tokens: tl.tokens,
                bounds: tl.bounds,
                spans: tl.spans,
            };
            let (prompt, _) = split_record(&rec)
                .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?;
            let (candidates, gold) = match (tl.candidates, tl.gold) {
                (Some(c), Some(g)) => (c, g),
                _ => {
                    return Err(EvalError::Format(format!(
                        "line {}: mcq task needs candidates and gold",
                        i + 1
                    )))
                }
            };
            let task = MCQTask {
                prompt,
                candidates,
                gold,
            };
            task.validate()
                .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?;
            Ok(task)
        })
        .collect()
}

pub fn write_gen_tasks(path: &Path, tasks: &[GenTask]) -> Result<(), EvalError> {
    let lines: Vec<TaskLine> = tasks
        .iter()
        .map(|t| {
            let mut line = frame_line(&t.prompt, &t.reference);
            line.parser = Some(t.parser);
            line
        })
        .collect();
    write_lines(path, &lines)
}

/// Missing `parser` fields default to the chat-frame span parser.
pub fn read_gen_tasks(path: &Path) -> Result<Vec<GenTask>, EvalError> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, tl)| {
            let rec = DatasetRecord {
                tokens: tl.tokens,
                bounds: tl.bounds,
                spans: tl.spans,
            };
            let (prompt, reference) = split_record(&rec)
                .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?;
            let task = GenTask {
                prompt,
                reference,
                parser: tl.parser.unwrap_or(AnswerParser::FirstAnswerSpan),
            };
            task.validate()
                .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?;
            Ok(task)
        })
        .collect()
}

impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        EvalError::Task(format!("task construction: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar_tasks_frame_the_query_and_hide_the_gold() {
        let p = ArParams {
            n_pairs: 3,
            n_examples: 20,
            key_space: 12,
            value_space: 12,
        };
        let fam = ar_family(p, 4, 99).unwrap();
        assert_eq!(fam.mcq.len(), 20);
        assert_eq!(fam.gen.len(), 20);
        let mut gold_positions = [0usize; 4];
        for (m, g) in fam.mcq.iter().zip(&fam.gen) {
            assert_eq!(m.prompt, g.prompt);
            assert_eq!(m.prompt.last(), Some(&SEP));
            assert_eq!(m.prompt.first(), Some(&BOS));
            assert_eq!(m.candidates[m.gold], g.reference);
            assert_eq!(g.reference.len(), 1, "ar answers are single values");
            m.validate().unwrap();
            gold_positions[m.gold] += 1;
        }
        // the shuffle should not pin gold to one slot
        assert!(
            gold_positions.iter().filter(|&&c| c > 0).count() > 1,
            "gold always landed at the same index: {gold_positions:?}"
        );
    }

    #[test]
    fn niah_distractors_share_the_payload_shape() {
        let fam = niah_family(6, 64, NeedleKind::ProseUuid, 3, 5).unwrap();
        for m in &fam.mcq {
            for c in &m.candidates {
                assert_eq!(c.len(), 4);
                assert!(c
                    .iter()
                    .all(|&t| (NEEDLE_PAYLOAD_LO..NEEDLE_PAYLOAD_HI).contains(&t)));
            }
        }
    }

    #[test]
    fn task_files_round_trip_both_shapes() {
        let p = ArParams {
            n_pairs: 2,
            n_examples: 8,
            key_space: 8,
            value_space: 8,
        };
        let fam = ar_family(p, 3, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("tasks.mcq.jsonl");
        let gpath = dir.path().join("tasks.gen.jsonl");
        write_mcq_tasks(&mpath, &fam.mcq).unwrap();
        write_gen_tasks(&gpath, &fam.gen).unwrap();
        assert_eq!(read_mcq_tasks(&mpath).unwrap(), fam.mcq);
        assert_eq!(read_gen_tasks(&gpath).unwrap(), fam.gen);
    }

    #[test]
    fn malformed_task_lines_are_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"tokens\":[1,5,3,6,2],\"bounds\":[0],\"spans\":[[3,5,\"completion\"]]}\n",
        )
        .unwrap();
        // a gen task parses (parser defaults), but as mcq it lacks fields
        assert!(read_gen_tasks(&path).is_ok());
        let err = read_mcq_tasks(&path).unwrap_err();
        assert!(
            format!("{err}").contains("line 1"),
            "error should name the line: {err}"
        );
    }
}
