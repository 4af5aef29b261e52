//! Sequence-mixing layers.
//!
//! Four linear recurrences over a matrix-valued state S ∈ R^{d_k×d_v}, from
//! weakest to strongest gating (each is the previous one plus one mechanism):
//!
//! 1. linear attention:  S_t = S_{t−1} + k_t v_tᵀ
//! 2. delta rule:        S_t = (I − β_t k_t k_tᵀ) S_{t−1} + β_t k_t v_tᵀ
//! 3. gated delta (GDN): S_t = α_t (I − β_t k_t k_tᵀ) S_{t−1} + β_t k_t v_tᵀ
//! 4. channel-gated KDA: S_t = (I − β_t k_t k_tᵀ) Diag(α_t) S_{t−1} + β_t k_t v_tᵀ
//!
//! with readout o_t = S_tᵀ q_t in all cases. [`step`] implements these one
//! token at a time (the semantic reference), [`scan`] runs the KDA recurrence
//! over whole sequences on the autodiff tape — sequentially or chunk-parallel
//! via a WY-style within-chunk factorization. [`layer`] wraps the scan into a
//! full mixer block (projections, short conv, QK normalization, output gate),
//! and [`attention`] provides the softmax-attention layer used by the teacher
//! (GQA, RoPE, per-head QK RMSNorm, causal + document masking).
//!
//! Document boundaries are passed everywhere as `segs`: sorted start offsets
//! of each document in the packed sequence, `segs[0] == 0`. Recurrent state,
//! convolution windows, attention masks, and rotary positions all reset at
//! segment starts, so outputs after a boundary are a pure function of tokens
//! after that boundary.

pub mod attention;
pub mod conv;
pub mod layer;
pub mod rope;
pub mod scan;
pub mod step;

pub use attention::AttnLayer;
pub use conv::short_conv;
pub use layer::{gate_identity_bias, GateActivation, KdaLayer, MixerKind};
pub use rope::rope;
pub use scan::{additive_scan, kda_scan, ScanDims, ScanMode};
pub use step::{
    delta_rule_step, gdn_step, kda_step, linear_attention_step, RecurrentState,
};

/// Validate that `segs` is a well-formed segment-start list for length `t`.
pub(crate) fn check_segs(op: &'static str, segs: &[usize], t: usize) -> crate::tensor::Result<()> {
    use crate::tensor::TensorError;
    if segs.is_empty() || segs[0] != 0 {
        return Err(TensorError::Contract {
            op,
            detail: "segment starts must begin with 0".into(),
        });
    }
    for w in segs.windows(2) {
        if w[1] <= w[0] {
            return Err(TensorError::Contract {
                op,
                detail: "segment starts must be strictly increasing".into(),
            });
        }
    }
    if let Some(&last) = segs.last() {
        if last >= t && t > 0 {
            return Err(TensorError::Contract {
                op,
                detail: format!("segment start {last} beyond sequence length {t}"),
            });
        }
    }
    Ok(())
}

/// Iterate (start, end) pairs for each segment of a length-`t` sequence.
pub(crate) fn seg_ranges(segs: &[usize], t: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    segs.iter()
        .enumerate()
        .map(move |(i, &s)| (s, segs.get(i + 1).copied().unwrap_or(t)))
}
