//! The teacher–student gap report: both protocols, both models, every task
//! family, and the spread between the two gaps.

use super::suite::{EvalSuite, TaskFamily};
use super::{eval_generation, eval_mcq_loglik, EvalError};
use crate::model::Model;
use crate::tensor::Real;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One protocol's accuracies for the model pair. `gap` is teacher − student:
/// positive means the student lost ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPair {
    pub teacher: f64,
    pub student: f64,
    pub gap: f64,
}

impl ProtocolPair {
    fn new(teacher: f64, student: f64) -> Self {
        ProtocolPair {
            teacher,
            student,
            gap: teacher - student,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: String,
    pub n_mcq: usize,
    pub n_gen: usize,
    pub loglik: ProtocolPair,
    pub generation: ProtocolPair,
    /// generation gap minus log-likelihood gap: how much more the student
    /// loses when it must produce the answer instead of ranking it
    pub gap_spread: f64,
    pub teacher_parser_failures: usize,
    pub student_parser_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub families: Vec<FamilyReport>,
    /// unweighted means across families
    pub mean_loglik_gap: f64,
    pub mean_generation_gap: f64,
    pub mean_gap_spread: f64,
}

/// Run both protocols for both models on every family of the suite.
pub fn gap_report<F: Real>(
    teacher: &Model<F>,
    student: &Model<F>,
    suite: &EvalSuite,
) -> Result<EvalReport, EvalError> {
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(EvalError::Task(format!(
            "teacher vocabulary {} and student vocabulary {} differ",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    if suite.families.is_empty() {
        return Err(EvalError::EmptyScope("suite has no task families".into()));
    }
    let mut families = Vec::with_capacity(suite.families.len());
    for fam in &suite.families {
        families.push(family_report(teacher, student, fam, suite)?);
    }
    let k = families.len() as f64;
    let mean_loglik_gap = families.iter().map(|f| f.loglik.gap).sum::<f64>() / k;
    let mean_generation_gap = families.iter().map(|f| f.generation.gap).sum::<f64>() / k;
    let mean_gap_spread = families.iter().map(|f| f.gap_spread).sum::<f64>() / k;
    Ok(EvalReport {
        families,
        mean_loglik_gap,
        mean_generation_gap,
        mean_gap_spread,
    })
}

fn family_report<F: Real>(
    teacher: &Model<F>,
    student: &Model<F>,
    fam: &TaskFamily,
    suite: &EvalSuite,
) -> Result<FamilyReport, EvalError> {
    let wrap = |e: EvalError| EvalError::Task(format!("family {}: {e}", fam.name));
    if fam.mcq.is_empty() || fam.gen.is_empty() {
        return Err(wrap(EvalError::EmptyScope(
            "needs tasks under both protocols".into(),
        )));
    }
    let t_mcq = eval_mcq_loglik(teacher, &fam.mcq, suite.length_norm, suite.scan).map_err(wrap)?;
    let s_mcq = eval_mcq_loglik(student, &fam.mcq, suite.length_norm, suite.scan).map_err(wrap)?;
    let t_gen = eval_generation(teacher, &fam.gen, &suite.decode, suite.max_new, &suite.seeds)
        .map_err(wrap)?;
    let s_gen = eval_generation(student, &fam.gen, &suite.decode, suite.max_new, &suite.seeds)
        .map_err(wrap)?;
    let loglik = ProtocolPair::new(t_mcq.accuracy, s_mcq.accuracy);
    let generation = ProtocolPair::new(t_gen.accuracy, s_gen.accuracy);
    Ok(FamilyReport {
        family: fam.name.clone(),
        n_mcq: fam.mcq.len(),
        n_gen: fam.gen.len(),
        loglik,
        generation,
        gap_spread: generation.gap - loglik.gap,
        teacher_parser_failures: t_gen.parser_failures,
        student_parser_failures: s_gen.parser_failures,
    })
}

// -- serialization ---------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    mean_loglik_gap: f64,
    mean_generation_gap: f64,
    mean_gap_spread: f64,
}

/// One JSON line per family followed by one summary line.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for fam in &report.families {
        serde_json::to_writer(&mut w, fam).map_err(|e| EvalError::Format(e.to_string()))?;
        writeln!(w)?;
    }
    let summary = SummaryLine {
        mean_loglik_gap: report.mean_loglik_gap,
        mean_generation_gap: report.mean_generation_gap,
        mean_gap_spread: report.mean_gap_spread,
    };
    serde_json::to_writer(&mut w, &summary).map_err(|e| EvalError::Format(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut families = Vec::new();
    let mut summary: Option<SummaryLine> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(EvalError::Format(format!(
                "line {}: content after the summary line",
                i + 1
            )));
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?;
        if value.get("family").is_some() {
            families.push(
                serde_json::from_value(value)
                    .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?,
            );
        } else {
            summary = Some(
                serde_json::from_value(value)
                    .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?,
            );
        }
    }
    let summary = summary.ok_or_else(|| EvalError::Format("missing summary line".into()))?;
    Ok(EvalReport {
        families,
        mean_loglik_gap: summary.mean_loglik_gap,
        mean_generation_gap: summary.mean_generation_gap,
        mean_gap_spread: summary.mean_gap_spread,
    })
}

/// Fixed-width table of the report, one family per row plus the mean row.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let pp = |x: f64| format!("{:+.1}", x * 100.0);
    out.push_str(&format!(
        "{:<12} {:>6} {:>6} | {:>8} {:>8} {:>7} | {:>8} {:>8} {:>7} | {:>7}\n",
        "family",
        "n_mcq",
        "n_gen",
        "ll T",
        "ll S",
        "gap pp",
        "gen T",
        "gen S",
        "gap pp",
        "spread"
    ));
    let width = 12 + 1 + 6 + 1 + 6 + 3 + 8 + 1 + 8 + 1 + 7 + 3 + 8 + 1 + 8 + 1 + 7 + 3 + 7;
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for f in &report.families {
        out.push_str(&format!(
            "{:<12} {:>6} {:>6} | {:>8.3} {:>8.3} {:>7} | {:>8.3} {:>8.3} {:>7} | {:>7}\n",
            f.family,
            f.n_mcq,
            f.n_gen,
            f.loglik.teacher,
            f.loglik.student,
            pp(f.loglik.gap),
            f.generation.teacher,
            f.generation.student,
            pp(f.generation.gap),
            pp(f.gap_spread),
        ));
    }
    out.push_str(&"-".repeat(width));
    out.push('\n');
    out.push_str(&format!(
        "{:<12} {:>6} {:>6} | {:>8} {:>8} {:>7} | {:>8} {:>8} {:>7} | {:>7}\n",
        "mean",
        "",
        "",
        "",
        "",
        pp(report.mean_loglik_gap),
        "",
        "",
        pp(report.mean_generation_gap),
        pp(report.mean_gap_spread),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> EvalReport {
        let fam = FamilyReport {
            family: "ar".into(),
            n_mcq: 10,
            n_gen: 10,
            loglik: ProtocolPair::new(0.9, 0.85),
            generation: ProtocolPair::new(0.88, 0.5),
            gap_spread: (0.88 - 0.5) - (0.9 - 0.85),
            teacher_parser_failures: 0,
            student_parser_failures: 3,
        };
        EvalReport {
            mean_loglik_gap: fam.loglik.gap,
            mean_generation_gap: fam.generation.gap,
            mean_gap_spread: fam.gap_spread,
            families: vec![fam],
        }
    }

    #[test]
    fn reports_round_trip_through_the_line_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        let report = sample_report();
        write_report(&path, &report).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn the_table_lists_every_family_and_the_mean() {
        let table = render_table(&sample_report());
        assert!(table.contains("ar"), "missing family row:\n{table}");
        assert!(table.contains("mean"), "missing mean row:\n{table}");
        // generation gap is 38pp, spread 33pp
        assert!(table.contains("+38.0"), "missing generation gap:\n{table}");
        assert!(table.contains("+33.0"), "missing spread:\n{table}");
    }
}
