//! The stage engine: freezing rules, the step loop, held-out tracking with
//! rollback, metric logging, and the pipeline driver that chains stages.
//!
//! Freezing is structural. Each step rebuilds the student with only the
//! trainable parameters attached to the tape as leaves; everything else is
//! passed through untouched, so a frozen tensor cannot receive a gradient or
//! an update even in principle. The before/after checksums in the stage
//! report are a second, bit-level line of defense.
//!
//! What each stage may touch:
//! - stage 1: the Q and K projections of the replaced mixers, nothing else
//!   (their conv kernels included in "nothing else");
//! - stage 2: every parameter of the replaced mixers; block norms stay
//!   frozen. Under the block-output loss the replaced blocks' MLPs join,
//!   since that target gives them a gradient path;
//! - stage 3 (all variants): everything except the input embeddings and —
//!   unless the ablation flag is set — the kept attention mixers. With tied
//!   embeddings the output head is frozen along with them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::losses::{alignment_loss, kd_loss, loss_rows, sft_loss, AlignTarget, LossOut};
use super::optim::{AdamW, OptimConfig, ParamUpdate};
use super::{LossKind, MetricRow, StageConfig, StageKind, StageReport};
use crate::data::PackedSeq;
use crate::model::{save_checkpoint, CheckpointError, Mixer, Model};
use crate::tensor::{Real, Tape, Tensor, TensorError};
use crate::util::Rng64;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("stage config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics encode: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Parameter names a stage is allowed to update, per the rules above.
pub fn trainable_set<F: Real>(student: &Model<F>, cfg: &StageConfig) -> BTreeSet<String> {
    let linear: Vec<bool> = student
        .blocks
        .iter()
        .map(|b| matches!(b.mixer, Mixer::Linear(_)))
        .collect();
    let mlp_active = matches!(cfg.loss, LossKind::L2Block);
    let mut names = BTreeSet::new();
    student.visit(&mut |name, _| {
        if stage_trains(name, &linear, cfg.stage, mlp_active, cfg.freeze_attention) {
            names.insert(name.to_string());
        }
    });
    names
}

/// Split `blocks.{i}.{rest}` into block index and tail.
fn block_part(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("blocks.")?;
    let dot = rest.find('.')?;
    let idx: usize = rest[..dot].parse().ok()?;
    Some((idx, &rest[dot + 1..]))
}

fn stage_trains(
    name: &str,
    linear: &[bool],
    stage: StageKind,
    mlp_active: bool,
    freeze_attention: bool,
) -> bool {
    match stage {
        StageKind::Pretrain => true,
        StageKind::S1 => matches!(
            block_part(name),
            Some((i, "mixer.w_q" | "mixer.w_k")) if linear[i]
        ),
        StageKind::S2 => match block_part(name) {
            Some((i, rest)) if linear[i] => {
                rest.starts_with("mixer.") || (mlp_active && rest.starts_with("mlp."))
            }
            _ => false,
        },
        StageKind::S3a | StageKind::S3b | StageKind::S3Combined => {
            if name == "embed" {
                return false;
            }
            match block_part(name) {
                Some((i, rest)) if freeze_attention && !linear[i] => !rest.starts_with("mixer."),
                _ => true,
            }
        }
    }
}

/// FNV-1a over the f64 widenings of a tensor's elements. Widening is exact
/// for both training dtypes, so checksum equality is bit equality.
fn checksum<F: Real>(data: &[F]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in data {
        for b in v.to_f64().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn frozen_checksums<F: Real>(
    model: &Model<F>,
    trainable: &BTreeSet<String>,
) -> BTreeMap<String, u64> {
    let mut sums = BTreeMap::new();
    model.visit(&mut |name, t| {
        if !trainable.contains(name) {
            sums.insert(name.to_string(), checksum(t.data()));
        }
    });
    sums
}

/// Endless sampler over row indices: a full shuffled pass, reshuffle, repeat.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng64,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Batcher {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: 0,
            rng: Rng64::seed_from(seed),
        };
        b.rng.shuffle(&mut b.order);
        b
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Loss of one batch under the stage's configured loss, as a
/// position-weighted mean: Σ per-seq loss · count / Σ count. The second
/// return is Σ count; zero means the masks selected nothing anywhere.
pub(crate) fn batch_loss<F: Real>(
    teacher: Option<&Model<F>>,
    student: &Model<F>,
    batch: &[&PackedSeq],
    cfg: &StageConfig,
) -> Result<(Tensor<F>, usize), TensorError> {
    let mut acc: Option<Tensor<F>> = None;
    let mut total = 0usize;
    for seq in batch {
        let out = seq_loss(teacher, student, seq, cfg)?;
        if out.count > 0 {
            let w = out.loss.scale(F::from_f64(out.count as f64))?;
            acc = Some(match acc {
                Some(a) => a.add(&w)?,
                None => w,
            });
            total += out.count;
        }
    }
    match acc {
        Some(a) => Ok((a.scale(F::from_f64(1.0 / total as f64))?, total)),
        None => Ok((Tensor::zeros(&[1]), 0)),
    }
}

fn seq_loss<F: Real>(
    teacher: Option<&Model<F>>,
    student: &Model<F>,
    seq: &PackedSeq,
    cfg: &StageConfig,
) -> Result<LossOut<F>, TensorError> {
    let need_teacher = || {
        TensorError::Contract {
            op: "seq_loss",
            detail: "this loss needs a teacher model".into(),
        }
    };
    match cfg.loss {
        LossKind::L2Mixer | LossKind::L2Block => {
            let target = match cfg.loss {
                LossKind::L2Mixer => AlignTarget::MixerOut,
                _ => AlignTarget::BlockOut,
            };
            let t = teacher.ok_or_else(need_teacher)?;
            alignment_loss(t, student, &seq.tokens, &seq.segs, target, cfg.scan)
        }
        LossKind::Kl | LossKind::Ce | LossKind::KlCe { .. } => {
            let (rows, labels) = loss_rows(seq);
            if rows.is_empty() {
                return Ok(LossOut {
                    loss: Tensor::zeros(&[1]),
                    count: 0,
                });
            }
            let t_len = seq.tokens.len();
            let mut mask = vec![false; t_len];
            let mut full_labels = vec![0usize; t_len];
            for (&r, &l) in rows.iter().zip(&labels) {
                mask[r] = true;
                full_labels[r] = l;
            }
            let s_logits = student.forward(&seq.tokens, &seq.segs, cfg.scan)?;
            match cfg.loss {
                LossKind::Ce => sft_loss(&s_logits, &full_labels, &mask),
                LossKind::Kl => {
                    let t = teacher.ok_or_else(need_teacher)?;
                    let t_logits = t.forward(&seq.tokens, &seq.segs, cfg.scan)?;
                    kd_loss(
                        &t_logits,
                        &s_logits,
                        &mask,
                        cfg.kd_temperature,
                        cfg.top_k,
                        0.0,
                        None,
                    )
                }
                LossKind::KlCe { alpha_ce } => {
                    let t = teacher.ok_or_else(need_teacher)?;
                    let t_logits = t.forward(&seq.tokens, &seq.segs, cfg.scan)?;
                    kd_loss(
                        &t_logits,
                        &s_logits,
                        &mask,
                        cfg.kd_temperature,
                        cfg.top_k,
                        alpha_ce,
                        Some(&full_labels),
                    )
                }
                _ => unreachable!("outer match"),
            }
        }
    }
}

pub(crate) fn eval_heldout<F: Real>(
    teacher: Option<&Model<F>>,
    student: &Model<F>,
    heldout: &[PackedSeq],
    cfg: &StageConfig,
) -> Result<Option<f64>, TensorError> {
    if heldout.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&PackedSeq> = heldout.iter().collect();
    let (loss, count) = batch_loss(teacher, student, &refs, cfg)?;
    Ok((count > 0).then(|| loss.item().to_f64()))
}

/// Run one distillation stage: teacher fixed, student trained under the
/// stage's freezing rules, fresh optimizer state. Returns the trained student
/// and a report with metric rows, held-out losses at entry and exit, and the
/// frozen-set checksums. A non-finite training loss rolls the student back to
/// the last held-out snapshot and marks the report `aborted` instead of
/// propagating garbage.
pub fn run_stage<F: Real>(
    teacher: &Model<F>,
    student: Model<F>,
    train: &[PackedSeq],
    heldout: &[PackedSeq],
    cfg: &StageConfig,
    out_dir: Option<&Path>,
) -> Result<(Model<F>, StageReport), DistillError> {
    if cfg.stage == StageKind::Pretrain {
        return Err(DistillError::Config(
            "pretraining runs through train_lm, not a distillation stage".into(),
        ));
    }
    run_loop(Some(teacher), student, train, heldout, cfg, out_dir)
}

/// Plain language-model training (how teachers are made): hard-label CE,
/// every parameter trainable, same loop and logging as the stages.
pub fn train_lm<F: Real>(
    student: Model<F>,
    train: &[PackedSeq],
    heldout: &[PackedSeq],
    cfg: &StageConfig,
    out_dir: Option<&Path>,
) -> Result<(Model<F>, StageReport), DistillError> {
    if cfg.stage != StageKind::Pretrain || !matches!(cfg.loss, LossKind::Ce) {
        return Err(DistillError::Config(
            "train_lm is the pretraining entry point (stage pretrain, CE loss)".into(),
        ));
    }
    run_loop(None, student, train, heldout, cfg, out_dir)
}

/// Stage-1 wrapper: per-layer alignment with only Q/K open.
pub fn stage1_align<F: Real>(
    teacher: &Model<F>,
    student: Model<F>,
    train: &[PackedSeq],
    heldout: &[PackedSeq],
    cfg: &StageConfig,
    out_dir: Option<&Path>,
) -> Result<(Model<F>, StageReport), DistillError> {
    if cfg.stage != StageKind::S1 {
        return Err(DistillError::Config(format!(
            "stage1_align got a {} config",
            cfg.stage.label()
        )));
    }
    run_stage(teacher, student, train, heldout, cfg, out_dir)
}

/// Stage-2 wrapper: same targets, all mixer parameters open.
pub fn stage2_align<F: Real>(
    teacher: &Model<F>,
    student: Model<F>,
    train: &[PackedSeq],
    heldout: &[PackedSeq],
    cfg: &StageConfig,
    out_dir: Option<&Path>,
) -> Result<(Model<F>, StageReport), DistillError> {
    if cfg.stage != StageKind::S2 {
        return Err(DistillError::Config(format!(
            "stage2_align got a {} config",
            cfg.stage.label()
        )));
    }
    run_stage(teacher, student, train, heldout, cfg, out_dir)
}

fn run_loop<F: Real>(
    teacher: Option<&Model<F>>,
    mut student: Model<F>,
    train: &[PackedSeq],
    heldout: &[PackedSeq],
    cfg: &StageConfig,
    out_dir: Option<&Path>,
) -> Result<(Model<F>, StageReport), DistillError> {
    cfg.validate().map_err(DistillError::Config)?;
    if train.is_empty() {
        return Err(DistillError::Config("no training rows".into()));
    }
    if let Some(t) = teacher {
        if t.config.vocab_size != student.config.vocab_size {
            return Err(DistillError::Config(format!(
                "teacher vocabulary {} vs student {}",
                t.config.vocab_size, student.config.vocab_size
            )));
        }
    }
    let trainable = trainable_set(&student, cfg);
    if trainable.is_empty() {
        return Err(DistillError::Config(
            "the freezing rules left nothing trainable".into(),
        ));
    }
    let frozen_before = frozen_checksums(&student, &trainable);

    let total_steps = cfg.steps();
    let mut optim = AdamW::new(OptimConfig::default());
    let mut batcher = Batcher::new(train.len(), cfg.seed);
    let mut rows_out: Vec<MetricRow> = Vec::new();
    let mut empty_mask_batches = 0usize;
    let mut aborted = false;
    let mut completed = 0usize;

    let entry_heldout = eval_heldout(teacher, &student, heldout, cfg)?;
    let mut last_good = student.clone();

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("stage_{}_metrics.jsonl", cfg.stage.label()));
            Some(std::io::BufWriter::new(std::fs::File::create(path)?))
        }
        None => None,
    };

    for step in 0..total_steps {
        // lr for the (step+1)-th update, so the run actually touches both the
        // warmup start and the decay floor
        let lr = cfg.schedule.at(step + 1, total_steps);
        let batch: Vec<&PackedSeq> = (0..cfg.batch_size)
            .map(|_| &train[batcher.next()])
            .collect();

        let tape: Tape<F> = Tape::new();
        let mut leaves: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        let tracked = student.map(&mut |name, t| {
            if trainable.contains(name) {
                let leaf = tape.leaf(t);
                leaves.insert(name.to_string(), leaf.clone());
                leaf
            } else {
                t.clone()
            }
        });

        let (loss, count) = batch_loss(teacher, &tracked, &batch, cfg)?;
        if count == 0 {
            empty_mask_batches += 1;
            completed += 1;
            continue;
        }
        let loss_val = loss.item().to_f64();
        if !loss_val.is_finite() {
            student = last_good;
            aborted = true;
            break;
        }

        let mut grads = tape.backward(&loss)?;
        let mut owned: Vec<(String, Vec<F>, bool)> = Vec::with_capacity(leaves.len());
        for (name, leaf) in &leaves {
            let g = grads.take_or_zeros(leaf);
            owned.push((name.clone(), g, leaf.shape().len() >= 2));
        }
        let updates: Vec<ParamUpdate<'_, F>> = owned
            .iter()
            .zip(leaves.values())
            .map(|((name, g, decay), leaf)| ParamUpdate {
                name,
                value: leaf.data(),
                grad: g,
                decay: *decay,
            })
            .collect();
        let (new_vals, _grad_norm) = optim.step(lr, &updates);
        let mut fresh: BTreeMap<&str, Vec<F>> = owned
            .iter()
            .map(|(n, ..)| n.as_str())
            .zip(new_vals)
            .collect();
        student = student.map(&mut |name, t| match fresh.remove(name) {
            Some(v) => Tensor::from_vec(v, t.shape()).expect("update preserves shape"),
            None => t.clone(),
        });
        completed += 1;

        if (step + 1) % cfg.heldout_interval == 0 || step + 1 == total_steps {
            let h = eval_heldout(teacher, &student, heldout, cfg)?;
            if h.map_or(true, f64::is_finite) {
                last_good = student.clone();
            }
            let row = MetricRow {
                step: step + 1,
                lr,
                train_loss: loss_val,
                heldout_loss: h,
            };
            if let Some(f) = metrics_file.as_mut() {
                serde_json::to_writer(&mut *f, &row)?;
                writeln!(f)?;
            }
            rows_out.push(row);
        }
    }
    if let Some(mut f) = metrics_file {
        f.flush()?;
    }

    let exit_heldout = match rows_out.last().and_then(|r| r.heldout_loss) {
        Some(h) if !aborted => Some(h),
        _ => eval_heldout(teacher, &student, heldout, cfg)?,
    };
    let frozen_after = frozen_checksums(&student, &trainable);
    let report = StageReport {
        stage: cfg.stage,
        steps: completed,
        tokens: completed * cfg.batch_size * cfg.seq_len,
        rows: rows_out,
        entry_heldout,
        exit_heldout,
        frozen_before,
        frozen_after,
        empty_mask_batches,
        aborted,
    };
    if !report.frozen_intact() {
        return Err(DistillError::Config(
            "a frozen parameter changed during the stage".into(),
        ));
    }
    Ok((student, report))
}

/// One pipeline entry: a stage plus the data it trains and validates on.
pub struct StagePlan<'a> {
    pub cfg: StageConfig,
    pub train: &'a [PackedSeq],
    pub heldout: &'a [PackedSeq],
}

#[derive(Debug)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    /// checkpoints written after each stage, in order (empty without out_dir)
    pub checkpoints: Vec<PathBuf>,
}

/// Chain stages in their canonical order — 1, 2, then either 3a (optionally
/// followed by 3b) or the combined stage 3 — allowing stages to be skipped
/// but never reordered or repeated. Optimizer state is per stage (each
/// `run_stage` starts fresh), and with an output directory the student is
/// checkpointed after every stage. Concrete in `f32`, the training dtype.
pub fn run_pipeline(
    teacher: &Model<f32>,
    student: Model<f32>,
    plan: &[StagePlan<'_>],
    out_dir: Option<&Path>,
) -> Result<(Model<f32>, PipelineReport), DistillError> {
    if plan.is_empty() {
        return Err(DistillError::Config("empty stage plan".into()));
    }
    let mut last_rank = -1i32;
    let mut combined = false;
    let mut split = false;
    for p in plan {
        let rank = match p.cfg.stage {
            StageKind::Pretrain => {
                return Err(DistillError::Config(
                    "pretraining is not a pipeline stage".into(),
                ))
            }
            StageKind::S1 => 0,
            StageKind::S2 => 1,
            StageKind::S3a => {
                split = true;
                2
            }
            StageKind::S3b => {
                split = true;
                3
            }
            StageKind::S3Combined => {
                combined = true;
                2
            }
        };
        if rank <= last_rank {
            return Err(DistillError::Config(format!(
                "stage {} is out of order",
                p.cfg.stage.label()
            )));
        }
        last_rank = rank;
    }
    if combined && split {
        return Err(DistillError::Config(
            "the combined stage 3 cannot mix with the split stages".into(),
        ));
    }

    let mut model = student;
    let mut stages = Vec::new();
    let mut checkpoints = Vec::new();
    for p in plan {
        let (next, report) = run_stage(teacher, model, p.train, p.heldout, &p.cfg, out_dir)?;
        model = next;
        if let Some(dir) = out_dir {
            let path = dir.join(format!("student_after_{}.ckpt", p.cfg.stage.label()));
            save_checkpoint(&model, p.cfg.stage.label(), p.cfg.seed, &path)?;
            checkpoints.push(path);
        }
        let stop = report.aborted;
        stages.push(report);
        if stop {
            break;
        }
    }
    Ok((model, PipelineReport {
        stages,
        checkpoints,
    }))
}
