//! The five selection strategies. Beam add grows layouts from the empty
//! set, beam replace shrinks from the full set, greedy ranks layers by their
//! solo scores, uniform ignores the models entirely, and greedy-aggregate
//! replaces splice perplexity with held-out KL after a short burst of KD per
//! candidate. All of them share the same tie-break and the same
//! score-in-parallel / prune-at-the-barrier round shape.

use super::{
    bad_config, score_many, splice_hybrid, SelectError, SelectSuite, SelectionScore, TraceRow,
    TraceSink,
};
use crate::data::{MaskMode, PackedSeq};
use crate::distill::{
    batch_loss, eval_heldout, run_stage, LossKind, LrSchedule, StageConfig, StageKind,
};
use crate::eval::SyncModel;
use crate::mixers::ScanMode;
use crate::model::{HybridLayout, Mixer, Model};
use crate::tensor::Real;
use crate::util::fnv1a64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One search round's survivors: layouts with their scores, sorted ascending
/// by aggregate, never more than `width` of them.
#[derive(Debug, Clone)]
pub struct BeamState {
    pub beam: Vec<(Vec<usize>, SelectionScore)>,
    pub width: usize,
    pub round: usize,
}

impl BeamState {
    fn assert_invariants(&self) {
        debug_assert!(self.beam.len() <= self.width);
        debug_assert!(self
            .beam
            .windows(2)
            .all(|w| w[0].1.aggregate() <= w[1].1.aggregate()));
    }
}

/// Indices a splice search may toggle: attention in the teacher, linear in
/// the student. The canonical setup (all-attention teacher, fully-linear
/// student) makes this every layer; anything else is probably a mistake, so
/// a student that already holds attention somewhere is rejected.
fn candidate_pool<F: Real>(teacher: &Model<F>, student: &Model<F>) -> Result<Vec<usize>, SelectError> {
    let mut pool = Vec::new();
    for (i, (tb, sb)) in teacher.blocks.iter().zip(&student.blocks).enumerate() {
        if !matches!(tb.mixer, Mixer::Attention(_)) {
            return bad_config(format!("teacher layer {i} is not attention"));
        }
        if !matches!(sb.mixer, Mixer::Linear(_)) {
            return bad_config(format!(
                "student layer {i} is attention; selection expects the fully-linear student"
            ));
        }
        pool.push(i);
    }
    Ok(pool)
}

struct Cand {
    layout: Vec<usize>,
    /// lowest index whose addition (or removal) produced this layout
    tie_idx: usize,
    score: SelectionScore,
}

/// The one ordering every strategy uses: aggregate ascending, then the
/// lowest toggled index, then the layout itself. Total and deterministic.
fn sort_candidates(cands: &mut [Cand]) {
    cands.sort_by(|a, b| {
        a.score
            .aggregate()
            .total_cmp(&b.score.aggregate())
            .then(a.tie_idx.cmp(&b.tie_idx))
            .then(a.layout.cmp(&b.layout))
    });
}

fn scored_candidates<F: Real>(
    teacher: &Model<F>,
    student: &Model<F>,
    suite: &SelectSuite,
    proposals: BTreeMap<Vec<usize>, usize>,
) -> Result<Vec<Cand>, SelectError> {
    let layouts: Vec<Vec<usize>> = proposals.keys().cloned().collect();
    let tie: Vec<usize> = proposals.values().copied().collect();
    let scores = score_many(teacher, student, &layouts, suite)?;
    let mut cands: Vec<Cand> = layouts
        .into_iter()
        .zip(tie)
        .zip(scores)
        .map(|((layout, tie_idx), score)| Cand {
            layout,
            tie_idx,
            score,
        })
        .collect();
    sort_candidates(&mut cands);
    Ok(cands)
}

fn trace_round(
    sink: &mut TraceSink,
    round: usize,
    cands: &[Cand],
    width: usize,
) -> Result<(), SelectError> {
    for (rank, c) in cands.iter().enumerate() {
        sink.line(&TraceRow::new(round, &c.layout, &c.score, rank < width))?;
    }
    Ok(())
}

/// Grow a layout one attention layer per round. Each round extends every
/// surviving layout by every unused index, scores all the extensions, and
/// keeps the best `width`. With `width` at least the number of reachable
/// layouts this is exhaustive search over size-k subsets.
pub fn beam_search_add<F: Real>(
    teacher: &Model<F>,
    student: &Model<F>,
    suite: &SelectSuite,
    k: usize,
    width: usize,
    trace: Option<&Path>,
) -> Result<HybridLayout, SelectError> {
    let pool = candidate_pool(teacher, student)?;
    let n_layers = student.config.n_layers;
    if k > pool.len() {
        return bad_config(format!("budget {k} exceeds the {} candidate layers", pool.len()));
    }
    if width == 0 {
        return bad_config("beam width must be at least 1");
    }
    let mut sink = TraceSink::open(trace)?;

    let empty_score = super::score_layout(teacher, student, &[], suite)?;
    sink.line(&TraceRow::new(0, &[], &empty_score, true))?;
    let mut state = BeamState {
        beam: vec![(Vec::new(), empty_score)],
        width,
        round: 0,
    };

    for round in 1..=k {
        let mut proposals: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for (layout, _) in &state.beam {
            for &i in &pool {
                if layout.binary_search(&i).is_ok() {
                    continue;
                }
                let mut next = layout.clone();
                let at = next.binary_search(&i).unwrap_err();
                next.insert(at, i);
                let entry = proposals.entry(next).or_insert(i);
                *entry = (*entry).min(i);
            }
        }
        let cands = scored_candidates(teacher, student, suite, proposals)?;
        trace_round(&mut sink, round, &cands, width)?;
        state = BeamState {
            beam: cands
                .into_iter()
                .take(width)
                .map(|c| (c.layout, c.score))
                .collect(),
            width,
            round,
        };
        state.assert_invariants();
    }

    sink.finish()?;
    let (best, _) = state.beam.into_iter().next().expect("beam never empties");
    Ok(HybridLayout::new(best, n_layers)?)
}

/// The mirror image: start from the full layout and retire one attention
/// layer per round until `k` remain, keeping the `width` least-damaged
/// layouts each round. `k = n` keeps everything and runs no rounds.
pub fn beam_search_replace<F: Real>(
    teacher: &Model<F>,
    student: &Model<F>,
    suite: &SelectSuite,
    k: usize,
    width: usize,
    trace: Option<&Path>,
) -> Result<HybridLayout, SelectError> {
    let pool = candidate_pool(teacher, student)?;
    let n_layers = student.config.n_layers;
    if k > pool.len() {
        return bad_config(format!("budget {k} exceeds the {} candidate layers", pool.len()));
    }
    if width == 0 {
        return bad_config("beam width must be at least 1");
    }
    let mut sink = TraceSink::open(trace)?;

    let full_score = super::score_layout(teacher, student, &pool, suite)?;
    sink.line(&TraceRow::new(0, &pool, &full_score, true))?;
    let mut state = BeamState {
        beam: vec![(pool.clone(), full_score)],
        width,
        round: 0,
    };

    let rounds = pool.len() - k;
    for round in 1..=rounds {
        let mut proposals: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for (layout, _) in &state.beam {
            for &gone in layout {
                let next: Vec<usize> = layout.iter().copied().filter(|&j| j != gone).collect();
                let entry = proposals.entry(next).or_insert(gone);
                *entry = (*entry).min(gone);
            }
        }
        let cands = scored_candidates(teacher, student, suite, proposals)?;
        trace_round(&mut sink, round, &cands, width)?;
        state = BeamState {
            beam: cands
                .into_iter()
                .take(width)
                .map(|c| (c.layout, c.score))
                .collect(),
            width,
            round,
        };
        state.assert_invariants();
    }

    sink.finish()?;
    let (best, _) = state.beam.into_iter().next().expect("beam never empties");
    Ok(HybridLayout::new(best, n_layers)?)
}

/// Rank layers by their solo splice scores and take the top k. One scoring
/// pass over n single-layer layouts — cheap, but blind to interactions
/// between layers (two individually-strong layers can be redundant).
pub fn greedy_select<F: Real>(
    teacher: &Model<F>,
    student: &Model<F>,
    suite: &SelectSuite,
    k: usize,
    trace: Option<&Path>,
) -> Result<HybridLayout, SelectError> {
    let pool = candidate_pool(teacher, student)?;
    let n_layers = student.config.n_layers;
    if k > pool.len() {
        return bad_config(format!("budget {k} exceeds the {} candidate layers", pool.len()));
    }
    let mut sink = TraceSink::open(trace)?;

    let proposals: BTreeMap<Vec<usize>, usize> = pool.iter().map(|&i| (vec![i], i)).collect();
    let cands = scored_candidates(teacher, student, suite, proposals)?;
    trace_round(&mut sink, 1, &cands, k)?;
    sink.finish()?;

    let mut chosen: Vec<usize> = cands.iter().take(k).map(|c| c.layout[0]).collect();
    chosen.sort_unstable();
    Ok(HybridLayout::new(chosen, n_layers)?)
}

/// Evenly spaced layers: index floor(i·n/k) for i in 0..k. Needs no models
/// and no data; the baseline every informed strategy has to beat.
pub fn uniform_select(n_layers: usize, k: usize) -> Result<HybridLayout, SelectError> {
    if k == 0 || k > n_layers {
        return bad_config(format!("uniform selection needs 1 ≤ k ≤ {n_layers}, got {k}"));
    }
    let indices: Vec<usize> = (0..k).map(|i| i * n_layers / k).collect();
    Ok(HybridLayout::new(indices, n_layers)?)
}

/// Knobs for [`greedy_aggregate`]. `micro_budget` is the number of KD tokens
/// spent adapting each candidate hybrid before its KL is read; zero skips
/// training entirely and scores the bare splice. `total_budget` caps the
/// cumulative KD tokens across the whole search — when the next round cannot
/// be paid for in full, the search stops and returns what it has.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateParams {
    pub k: usize,
    pub micro_budget: usize,
    pub total_budget: Option<usize>,
    pub seq_len: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub seed: u64,
    pub scan: ScanMode,
}

impl AggregateParams {
    pub fn desk(k: usize, seed: u64) -> AggregateParams {
        AggregateParams {
            k,
            micro_budget: 8192,
            total_budget: None,
            seq_len: 128,
            batch_size: 4,
            max_lr: 3e-4,
            seed,
            scan: ScanMode::Chunked(64),
        }
    }

    /// The short Stage-3-shaped KD run each candidate gets. Attention stays
    /// frozen (the layout is being judged, not finetuned) and the held-out
    /// loss is plain KL against the teacher, so `exit_heldout` is exactly
    /// the selection metric.
    fn micro_cfg(&self, round: usize) -> StageConfig {
        let mut seed_bytes = [0u8; 16];
        seed_bytes[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed_bytes[8..].copy_from_slice(&(round as u64).to_le_bytes());
        StageConfig {
            stage: StageKind::S3a,
            token_budget: self.micro_budget,
            seq_len: self.seq_len,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                max_lr: self.max_lr,
                warmup_frac: 0.1,
                decay_frac: 0.1,
                min_lr_ratio: 0.02,
            },
            loss: LossKind::Kl,
            kd_temperature: 1.0,
            top_k: None,
            mask_mode: MaskMode::Full,
            freeze_attention: true,
            seed: fnv1a64(&seed_bytes),
            heldout_interval: 1_000_000,
            scan: self.scan,
        }
    }
}

/// What the KL-driven greedy search found. `kl_per_round[0]` is the
/// unspliced student's held-out KL; each later entry is the incumbent's KL
/// after one more layer was added. `exhausted` means the token purse ran dry
/// before `k` layers were placed — the layout is best-so-far, shorter than
/// asked, and the caller should surface a warning.
#[derive(Debug, Clone)]
pub struct AggregateOutcome {
    pub layout: HybridLayout,
    pub kl_per_round: Vec<f64>,
    pub exhausted: bool,
    pub tokens_spent: usize,
}

/// Trace row for the KL-driven search: candidates carry a KL, not the three
/// perplexities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateTraceRow {
    pub round: usize,
    pub layout: Vec<usize>,
    pub heldout_kl: f64,
    pub trained_tokens: usize,
    pub kept: bool,
}

/// Greedy addition scored by held-out KL against the teacher, with each
/// candidate micro-distilled first (Stage-3-style KD, `micro_budget` tokens,
/// trained weights discarded after scoring — only the layout survives).
/// Micro-distilling before scoring answers "how good could this layout get"
/// rather than "how good is the bare splice", which deliberately favors
/// layouts that adapt well over layouts that merely start well.
pub fn greedy_aggregate<F: Real>(
    teacher: &Model<F>,
    student: &Model<F>,
    train: &[PackedSeq],
    heldout: &[PackedSeq],
    params: &AggregateParams,
    trace: Option<&Path>,
) -> Result<AggregateOutcome, SelectError> {
    let pool = candidate_pool(teacher, student)?;
    let n_layers = student.config.n_layers;
    if params.k > pool.len() {
        return bad_config(format!(
            "budget {} exceeds the {} candidate layers",
            params.k,
            pool.len()
        ));
    }
    if heldout.is_empty() {
        return bad_config("greedy_aggregate needs a non-empty held-out set for KL scoring");
    }
    if params.micro_budget > 0 && train.is_empty() {
        return bad_config("micro-distillation needs training sequences");
    }
    let mut sink = TraceSink::open(trace)?;
    let eval_cfg = params.micro_cfg(0);

    let base = splice_hybrid(teacher, student, &[])?;
    let base_kl = kl_against(teacher, &base, heldout, &eval_cfg)?;
    sink.line(&AggregateTraceRow {
        round: 0,
        layout: vec![],
        heldout_kl: base_kl,
        trained_tokens: 0,
        kept: true,
    })?;

    let mut chosen: Vec<usize> = Vec::new();
    let mut kl_per_round = vec![base_kl];
    let mut tokens_spent = 0usize;
    let mut exhausted = false;

    for round in 1..=params.k {
        let free: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|i| chosen.binary_search(i).is_err())
            .collect();
        let round_cost = free.len() * params.micro_budget;
        if let Some(cap) = params.total_budget {
            if tokens_spent + round_cost > cap {
                exhausted = true;
                break;
            }
        }

        let cfg = params.micro_cfg(round);
        let t_shared = SyncModel::new(teacher)?;
        let s_shared = SyncModel::new(student)?;
        let scored: Vec<(usize, f64, usize)> = free
            .par_iter()
            .map(|&idx| -> Result<(usize, f64, usize), SelectError> {
                let mut layout = chosen.clone();
                let at = layout.binary_search(&idx).unwrap_err();
                layout.insert(at, idx);
                let hybrid = splice_hybrid(t_shared.get(), s_shared.get(), &layout)?;
                if params.micro_budget == 0 {
                    return Ok((idx, kl_against(t_shared.get(), &hybrid, heldout, &cfg)?, 0));
                }
                let (_trained, report) =
                    run_stage(t_shared.get(), hybrid, train, heldout, &cfg, None)
                        .map_err(SelectError::Distill)?;
                let kl = report.exit_heldout.ok_or_else(|| {
                    SelectError::Config("micro-distill produced no held-out score".into())
                })?;
                Ok((idx, kl, report.tokens))
            })
            .collect::<Result<Vec<_>, _>>()?;

        // round barrier: all candidates scored before anything is compared
        let (best_idx, best_kl, _) = scored
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("pool not yet exhausted");
        for &(idx, kl, spent) in &scored {
            let mut layout = chosen.clone();
            let at = layout.binary_search(&idx).unwrap_err();
            layout.insert(at, idx);
            sink.line(&AggregateTraceRow {
                round,
                layout,
                heldout_kl: kl,
                trained_tokens: spent,
                kept: idx == best_idx,
            })?;
            tokens_spent += spent;
        }

        let at = chosen.binary_search(&best_idx).unwrap_err();
        chosen.insert(at, best_idx);
        kl_per_round.push(best_kl);
    }

    sink.finish()?;
    Ok(AggregateOutcome {
        layout: HybridLayout::new(chosen, n_layers)?,
        kl_per_round,
        exhausted,
        tokens_spent,
    })
}

/// The KL read used everywhere in this search: the same position-weighted
/// mean the training loop reports, so a micro-distilled candidate's
/// `exit_heldout` and a splice-only candidate's score are the same metric.
fn kl_against<F: Real>(
    teacher: &Model<F>,
    model: &Model<F>,
    heldout: &[PackedSeq],
    cfg: &StageConfig,
) -> Result<f64, SelectError> {
    eval_heldout(Some(teacher), model, heldout, cfg)
        .map_err(SelectError::Tensor)?
        .ok_or_else(|| SelectError::Config("held-out set selects zero loss positions".into()))
}

/// Mean KL against the teacher over a held-out set for an arbitrary model —
/// the metric greedy_aggregate optimizes, exposed for reporting.
pub fn heldout_kl<F: Real>(
    teacher: &Model<F>,
    model: &Model<F>,
    heldout: &[PackedSeq],
    scan: ScanMode,
) -> Result<f64, SelectError> {
    if heldout.is_empty() {
        return bad_config("held-out set is empty");
    }
    let cfg = StageConfig {
        stage: StageKind::S3a,
        token_budget: 0,
        seq_len: 1,
        batch_size: 1,
        schedule: LrSchedule {
            max_lr: 0.0,
            warmup_frac: 0.0,
            decay_frac: 0.0,
            min_lr_ratio: 1.0,
        },
        loss: LossKind::Kl,
        kd_temperature: 1.0,
        top_k: None,
        mask_mode: MaskMode::Full,
        freeze_attention: true,
        seed: 0,
        heldout_interval: 1,
        scan,
    };
    let refs: Vec<&PackedSeq> = heldout.iter().collect();
    let (loss, count) = batch_loss(Some(teacher), model, &refs, &cfg).map_err(SelectError::Tensor)?;
    if count == 0 {
        return bad_config("held-out set selects zero loss positions");
    }
    Ok(loss.item().to_f64())
}
