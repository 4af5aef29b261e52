//! gdlab: a desk-scale laboratory for cross-architecture distillation.
//!
//! The lab trains a tiny softmax-attention teacher on synthetic corpora, then
//! distills it into students whose layers are either kept as attention or
//! replaced by linear-recurrence mixers (channel-gated delta rule and its
//! reductions). Everything runs on CPU in minutes and is deterministic given a
//! root seed, so the interesting claims — alignment-stage monotonicity, layer
//! selection, likelihood-vs-generation evaluation gaps, cache/latency scaling —
//! can be exercised as ordinary tests.
//!
//! Module map:
//! - [`tensor`]: minimal dense tensors + reverse-mode tape (f32 train, f64 verify)
//! - [`mixers`]: the four linear recurrences, chunked evaluation, short conv,
//!   softmax attention with GQA/RoPE/QK-norm
//! - [`model`]: teacher/student assembly, init rules, checkpoints, generation
//! - [`data`]: synthetic corpora and tasks, packing with cross-document masking
//! - [`distill`]: alignment stages, KD/SFT losses, schedules, the full pipeline
//! - [`select`]: attention-layer placement search (uniform/greedy/beam/aggregate)
//! - [`eval`]: log-likelihood vs generation protocols and the gap report
//! - [`profile`]: cache memory model and prefill/decode timing
//! - [`cli`]: command-line orchestration

pub mod data;
pub mod distill;
pub mod eval;
pub mod mixers;
pub mod model;
pub mod select;
pub mod tensor;
pub mod util;
