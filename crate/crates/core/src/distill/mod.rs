//! The multi-stage distillation pipeline.
//!
//! Stage 1 aligns each replaced mixer to its teacher attention layer under
//! teacher forcing, training only the Q/K projections. Stage 2 keeps the same
//! per-layer targets but opens up every mixer parameter at a reduced learning
//! rate. Stage 3a distills end-to-end on corpus data with forward KL; Stage 3b
//! continues on instruction data under completion-only masking, with the
//! attention layers and embeddings frozen. A combined 3a+3b mode interleaves
//! both datasets instead.
//!
//! Training is plain single-threaded SGD-style stepping: each step maps the
//! student's trainable parameters onto tape leaves, forwards, backs up, and
//! rebuilds the student from the updated buffers. Frozen parameters are never
//! leaves — they physically cannot receive gradients — and every stage also
//! checksums the frozen set before and after as a second line of defense.

mod losses;
mod optim;
mod trainer;

pub use losses::{alignment_loss, kd_loss, loss_rows, sft_loss, AlignTarget, LossOut};
pub(crate) use trainer::{batch_loss, eval_heldout};
pub use optim::{AdamW, OptimConfig, ParamUpdate};
pub use trainer::{
    run_pipeline, run_stage, stage1_align, stage2_align, trainable_set, train_lm, DistillError,
    PipelineReport, StagePlan,
};

use crate::data::MaskMode;
use crate::mixers::ScanMode;
use serde::{Deserialize, Serialize};

/// Learning-rate shape: linear warmup to `max_lr`, a constant plateau, then
/// linear decay to `min_lr_ratio · max_lr` at the final step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
    pub min_lr_ratio: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), String> {
        let ok_frac = |f: f64| (0.0..=1.0).contains(&f);
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(format!("max_lr {} must be positive", self.max_lr));
        }
        if !ok_frac(self.warmup_frac) || !ok_frac(self.decay_frac) || !ok_frac(self.min_lr_ratio) {
            return Err("schedule fractions must lie in [0, 1]".into());
        }
        if self.warmup_frac + self.decay_frac > 1.0 {
            return Err("warmup + decay cannot exceed the whole run".into());
        }
        Ok(())
    }

    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        wsd_schedule(
            step,
            total_steps,
            self.max_lr,
            self.warmup_frac,
            self.decay_frac,
            self.min_lr_ratio,
        )
    }
}

/// Warmup–stable–decay schedule value at `step` of `total_steps`. Continuous
/// and piecewise-linear: 0 at step 0, `max_lr` across the plateau,
/// `min_ratio · max_lr` at the last step (when a decay phase exists).
pub fn wsd_schedule(
    step: usize,
    total_steps: usize,
    max_lr: f64,
    warmup_frac: f64,
    decay_frac: f64,
    min_ratio: f64,
) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let total = total_steps as f64;
    let s = (step as f64).min(total);
    let warmup = warmup_frac * total;
    let decay_start = total - decay_frac * total;
    if s < warmup {
        max_lr * s / warmup
    } else if s <= decay_start || decay_frac == 0.0 {
        max_lr
    } else {
        let floor = min_ratio * max_lr;
        max_lr - (max_lr - floor) * (s - decay_start) / (total - decay_start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// teacher LM pretraining (not a distillation stage; rejected in plans)
    Pretrain,
    S1,
    S2,
    S3a,
    S3b,
    S3Combined,
}

impl StageKind {
    pub fn label(&self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::S1 => "s1",
            StageKind::S2 => "s2",
            StageKind::S3a => "s3a",
            StageKind::S3b => "s3b",
            StageKind::S3Combined => "s3_combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// L2 on the mixer sub-block output (pre-residual) — the per-layer
    /// alignment target of stages 1 and 2.
    L2Mixer,
    /// L2 on the full block output (mixer residual + MLP path) — the recorded
    /// alternative reading of the stage-2 target.
    L2Block,
    /// forward KL(teacher ‖ student) at the configured temperature
    Kl,
    /// hard-label cross-entropy (teacher pretraining, SFT ablation)
    Ce,
    /// KL plus `alpha_ce` × hard-label cross-entropy
    KlCe { alpha_ce: f64 },
}

/// Everything one stage needs to run. `desk_*` constructors carry the
/// desk-scale defaults (budget ratios 1:1:8:8 over 9M distillation tokens).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageKind,
    pub token_budget: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub loss: LossKind,
    pub kd_temperature: f64,
    pub top_k: Option<usize>,
    pub mask_mode: MaskMode,
    /// S3 default: attention mixers stay frozen. `false` is the ablation
    /// (negative control for the freezing contract).
    pub freeze_attention: bool,
    pub seed: u64,
    /// steps between held-out evaluations (also checkpoint granularity for
    /// the non-finite-loss rollback)
    pub heldout_interval: usize,
    pub scan: ScanMode,
}

impl StageConfig {
    pub fn desk(stage: StageKind, seed: u64) -> StageConfig {
        let schedule = |max_lr: f64| LrSchedule {
            max_lr,
            warmup_frac: 0.1,
            decay_frac: 0.1,
            min_lr_ratio: 0.02,
        };
        let base = StageConfig {
            stage,
            token_budget: 500_000,
            seq_len: 256,
            batch_size: 8,
            schedule: schedule(5e-4),
            loss: LossKind::Kl,
            kd_temperature: 1.0,
            top_k: None,
            mask_mode: MaskMode::Full,
            freeze_attention: true,
            seed,
            heldout_interval: 50,
            scan: ScanMode::Chunked(64),
        };
        match stage {
            StageKind::Pretrain => StageConfig {
                token_budget: 2_000_000,
                loss: LossKind::Ce,
                schedule: schedule(1.5e-3),
                ..base
            },
            StageKind::S1 => StageConfig {
                loss: LossKind::L2Mixer,
                schedule: schedule(1e-3),
                ..base
            },
            StageKind::S2 => StageConfig {
                loss: LossKind::L2Mixer,
                schedule: schedule(1e-4),
                ..base
            },
            StageKind::S3a => StageConfig {
                token_budget: 4_000_000,
                schedule: schedule(3e-4),
                ..base
            },
            StageKind::S3b => StageConfig {
                token_budget: 4_000_000,
                mask_mode: MaskMode::CompletionOnly,
                schedule: schedule(1e-4),
                ..base
            },
            StageKind::S3Combined => StageConfig {
                token_budget: 8_000_000,
                mask_mode: MaskMode::SpanOrFull,
                schedule: schedule(3e-4),
                ..base
            },
        }
    }

    pub fn steps(&self) -> usize {
        (self.token_budget / (self.batch_size * self.seq_len)).max(1)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.schedule.validate()?;
        if self.seq_len == 0 || self.batch_size == 0 || self.token_budget == 0 {
            return Err("token budget, seq_len, and batch size must be positive".into());
        }
        if self.kd_temperature <= 0.0 || !self.kd_temperature.is_finite() {
            return Err(format!("temperature {} must be positive", self.kd_temperature));
        }
        if self.top_k == Some(0) {
            return Err("top_k of 0 is meaningless; omit it instead".into());
        }
        if self.heldout_interval == 0 {
            return Err("heldout_interval must be positive".into());
        }
        match (self.stage, self.loss) {
            (StageKind::S1 | StageKind::S2, LossKind::L2Mixer | LossKind::L2Block) => {}
            (StageKind::S1 | StageKind::S2, _) => {
                return Err("alignment stages use the L2 losses".into())
            }
            (StageKind::S3a | StageKind::S3b | StageKind::S3Combined, LossKind::L2Mixer)
            | (StageKind::S3a | StageKind::S3b | StageKind::S3Combined, LossKind::L2Block) => {
                return Err("end-to-end stages use KL/CE losses".into())
            }
            _ => {}
        }
        Ok(())
    }
}

/// One line of the stage metric file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageKind,
    pub steps: usize,
    pub tokens: usize,
    pub rows: Vec<MetricRow>,
    pub entry_heldout: Option<f64>,
    pub exit_heldout: Option<f64>,
    /// fnv-1a over the parameter bits of every frozen tensor, before/after
    pub frozen_before: std::collections::BTreeMap<String, u64>,
    pub frozen_after: std::collections::BTreeMap<String, u64>,
    /// batches whose loss mask selected nothing (warned, skipped)
    pub empty_mask_batches: usize,
    /// true when a non-finite loss rolled the stage back to its last good
    /// snapshot
    pub aborted: bool,
}

impl StageReport {
    pub fn frozen_intact(&self) -> bool {
        self.frozen_before == self.frozen_after
    }
}
