//! The complete linear-mixer block: projections → short conv → QK norm →
//! recurrence → output gate → output projection. One struct covers the four
//! recurrence styles; `kind` picks how (and whether) α and β are produced.

use crate::mixers::conv::{identity_kernel, short_conv};
use crate::mixers::scan::{additive_scan, kda_scan, ScanDims, ScanMode};
use crate::tensor::{Real, Result, Tensor, TensorError};
use crate::util::Rng64;
use serde::{Deserialize, Serialize};

/// What sits in a block's mixer slot. `Attention` is handled by
/// [`AttnLayer`](crate::mixers::AttnLayer); the other four are [`KdaLayer`]
/// variants differing in their gates:
/// Kda — per-channel decay α, write strength β;
/// Gdn — one scalar decay per head, write strength β;
/// Delta — no decay, write strength β;
/// LinearAttn — plain additive state, no gates at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Attention,
    Kda,
    Gdn,
    Delta,
    LinearAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    Silu,
    Sigmoid,
}

/// Bias b with silu(b) = 1, so a zero-weight SiLU gate starts as an identity
/// multiplier. Solved by Newton iteration; the residual |silu(b) − 1| is
/// below 1e-12.
pub fn gate_identity_bias() -> f64 {
    let mut b = 1.2f64;
    for _ in 0..60 {
        let s = 1.0 / (1.0 + (-b).exp());
        let f = b * s - 1.0;
        let df = s * (1.0 + b * (1.0 - s));
        b -= f / df;
    }
    b
}

/// One linear-recurrence mixer layer. Weight matrices are stored [in, out] so
/// the forward pass is a plain row-major matmul. β is one scalar per KV head
/// per token; α is one value per key channel (Kda) or per head (Gdn). Both
/// come from the raw layer input (not the conv-processed streams). Query
/// heads share KV-head state in groups of n_q/n_kv.
#[derive(Debug, Clone)]
pub struct KdaLayer<F: Real> {
    pub kind: MixerKind,
    pub w_q: Tensor<F>,    // [d_model, n_q·d_head]
    pub w_k: Tensor<F>,    // [d_model, n_kv·d_head]
    pub w_v: Tensor<F>,    // [d_model, n_kv·d_head]
    pub w_o: Tensor<F>,    // [n_q·d_head, d_model]
    pub conv_q: Tensor<F>, // [conv_width, n_q·d_head]
    pub conv_k: Tensor<F>, // [conv_width, n_kv·d_head]
    pub conv_v: Tensor<F>, // [conv_width, n_kv·d_head]
    /// [d_model, n_kv] + [n_kv]; absent for LinearAttn (β ≡ 1)
    pub w_beta: Option<Tensor<F>>,
    pub b_beta: Option<Tensor<F>>,
    /// Kda: [d_model, n_kv·d_head] + [n_kv·d_head]; Gdn: [d_model, n_kv] +
    /// [n_kv]; absent for Delta and LinearAttn (α ≡ 1)
    pub w_alpha: Option<Tensor<F>>,
    pub b_alpha: Option<Tensor<F>>,
    pub w_gate: Tensor<F>, // [d_model, n_q·d_head]
    pub b_gate: Tensor<F>, // [n_q·d_head]
    /// per-head RMSNorm weight [d_head] applied to o before W_o, if present
    pub post_norm: Option<Tensor<F>>,
    pub gate_activation: GateActivation,
    /// L2-normalize q and k per head before the recurrence (unit keys make
    /// β=1 an exact overwrite)
    pub qk_norm: bool,
    pub n_q: usize,
    pub n_kv: usize,
    pub d_head: usize,
}

pub const CONV_WIDTH: usize = 4;

impl<F: Real> KdaLayer<F> {
    /// Fresh layer: small random projections, identity conv kernels,
    /// identity-multiplier gate (zero weights, solved bias), slow-decay α
    /// bias (+4 → α ≈ 0.982 per step), β bias 0 (β = 0.5).
    pub fn fresh(
        d_model: usize,
        n_q: usize,
        n_kv: usize,
        d_head: usize,
        kind: MixerKind,
        gate_activation: GateActivation,
        qk_norm: bool,
        use_post_norm: bool,
        rng: &mut Rng64,
    ) -> Self {
        assert!(kind != MixerKind::Attention, "attention is not a KdaLayer");
        let init = |rng: &mut Rng64, rows: usize, cols: usize| {
            let std = 0.02;
            Tensor::from_vec(
                (0..rows * cols).map(|_| F::from_f64(rng.normal() * std)).collect(),
                &[rows, cols],
            )
            .expect("consistent shape")
        };
        let gate_bias = match gate_activation {
            GateActivation::Silu => gate_identity_bias(),
            // sigmoid has no exact identity multiplier; start near pass-through
            GateActivation::Sigmoid => 4.0,
        };
        let alpha_width = match kind {
            MixerKind::Kda => Some(n_kv * d_head),
            MixerKind::Gdn => Some(n_kv),
            _ => None,
        };
        let has_beta = kind != MixerKind::LinearAttn;
        KdaLayer {
            kind,
            w_q: init(rng, d_model, n_q * d_head),
            w_k: init(rng, d_model, n_kv * d_head),
            w_v: init(rng, d_model, n_kv * d_head),
            w_o: init(rng, n_q * d_head, d_model),
            conv_q: identity_kernel(CONV_WIDTH, n_q * d_head),
            conv_k: identity_kernel(CONV_WIDTH, n_kv * d_head),
            conv_v: identity_kernel(CONV_WIDTH, n_kv * d_head),
            w_beta: has_beta.then(|| Tensor::zeros(&[d_model, n_kv])),
            b_beta: has_beta.then(|| Tensor::zeros(&[n_kv])),
            w_alpha: alpha_width.map(|w| Tensor::zeros(&[d_model, w])),
            b_alpha: alpha_width.map(|w| {
                Tensor::from_vec(vec![F::from_f64(4.0); w], &[w]).expect("consistent shape")
            }),
            w_gate: Tensor::zeros(&[d_model, n_q * d_head]),
            b_gate: Tensor::from_vec(vec![F::from_f64(gate_bias); n_q * d_head], &[n_q * d_head])
                .expect("consistent shape"),
            post_norm: use_post_norm.then(|| {
                Tensor::from_vec(vec![F::ONE; d_head], &[d_head]).expect("consistent shape")
            }),
            gate_activation,
            qk_norm,
            n_q,
            n_kv,
            d_head,
        }
    }

    pub fn dims(&self) -> ScanDims {
        ScanDims {
            n_q: self.n_q,
            n_kv: self.n_kv,
            d_k: self.d_head,
            d_v: self.d_head,
        }
    }

    /// Full mixer forward over a packed sequence x: [T, d_model].
    pub fn forward(&self, x: &Tensor<F>, segs: &[usize], mode: ScanMode) -> Result<Tensor<F>> {
        let (t_len, _) = x.dims2("kda_layer")?;
        let q = short_conv(&x.matmul(&self.w_q)?, &self.conv_q, segs)?;
        let k = short_conv(&x.matmul(&self.w_k)?, &self.conv_k, segs)?;
        let v = short_conv(&x.matmul(&self.w_v)?, &self.conv_v, segs)?;
        if !(q.is_all_finite() && k.is_all_finite() && v.is_all_finite()) {
            return Err(TensorError::NonFinite { op: "kda_layer conv" });
        }
        let (q, k) = if self.qk_norm {
            (q.l2_normalize_groups(self.d_head)?, k.l2_normalize_groups(self.d_head)?)
        } else {
            (q, k)
        };
        let o = if self.kind == MixerKind::LinearAttn {
            additive_scan(&q, &k, &v, segs, self.dims(), mode)?
        } else {
            let beta = match (&self.w_beta, &self.b_beta) {
                (Some(w), Some(b)) => x.matmul(w)?.add_bias(b)?.sigmoid()?,
                _ => Tensor::from_vec(vec![F::ONE; t_len * self.n_kv], &[t_len, self.n_kv])?,
            };
            let alpha = match (self.kind, &self.w_alpha, &self.b_alpha) {
                (MixerKind::Kda, Some(w), Some(b)) => x.matmul(w)?.add_bias(b)?.sigmoid()?,
                (MixerKind::Gdn, Some(w), Some(b)) => {
                    x.matmul(w)?.add_bias(b)?.sigmoid()?.repeat_each_col(self.d_head)?
                }
                // Delta: no decay
                _ => Tensor::from_vec(
                    vec![F::ONE; t_len * self.n_kv * self.d_head],
                    &[t_len, self.n_kv * self.d_head],
                )?,
            };
            kda_scan(&q, &k, &v, &alpha, &beta, segs, self.dims(), mode)?
        };
        let gate_pre = x.matmul(&self.w_gate)?.add_bias(&self.b_gate)?;
        let gate = match self.gate_activation {
            GateActivation::Silu => gate_pre.silu()?,
            GateActivation::Sigmoid => gate_pre.sigmoid()?,
        };
        let o = gate.mul(&o)?;
        let o = match &self.post_norm {
            Some(w) => o.rmsnorm_groups(w, self.d_head, F::from_f64(1e-6))?,
            None => o,
        };
        let y = o.matmul(&self.w_o)?;
        if !y.is_all_finite() {
            return Err(TensorError::NonFinite { op: "kda_layer output" });
        }
        Ok(y)
    }

    /// Visit every parameter tensor with a stable name.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&str, &'a Tensor<F>)) {
        f("w_q", &self.w_q);
        f("w_k", &self.w_k);
        f("w_v", &self.w_v);
        f("w_o", &self.w_o);
        f("conv_q", &self.conv_q);
        f("conv_k", &self.conv_k);
        f("conv_v", &self.conv_v);
        if let Some(w) = &self.w_beta {
            f("w_beta", w);
        }
        if let Some(b) = &self.b_beta {
            f("b_beta", b);
        }
        if let Some(w) = &self.w_alpha {
            f("w_alpha", w);
        }
        if let Some(b) = &self.b_alpha {
            f("b_alpha", b);
        }
        f("w_gate", &self.w_gate);
        f("b_gate", &self.b_gate);
        if let Some(w) = &self.post_norm {
            f("post_norm", w);
        }
    }

    /// Rebuild the layer with every parameter mapped through `f` (used to
    /// attach tape leaves to the trainable subset).
    pub fn map(&self, f: &mut impl FnMut(&str, &Tensor<F>) -> Tensor<F>) -> Self {
        KdaLayer {
            kind: self.kind,
            w_q: f("w_q", &self.w_q),
            w_k: f("w_k", &self.w_k),
            w_v: f("w_v", &self.w_v),
            w_o: f("w_o", &self.w_o),
            conv_q: f("conv_q", &self.conv_q),
            conv_k: f("conv_k", &self.conv_k),
            conv_v: f("conv_v", &self.conv_v),
            w_beta: self.w_beta.as_ref().map(|w| f("w_beta", w)),
            b_beta: self.b_beta.as_ref().map(|b| f("b_beta", b)),
            w_alpha: self.w_alpha.as_ref().map(|w| f("w_alpha", w)),
            b_alpha: self.b_alpha.as_ref().map(|b| f("b_alpha", b)),
            w_gate: f("w_gate", &self.w_gate),
            b_gate: f("b_gate", &self.b_gate),
            post_norm: self.post_norm.as_ref().map(|w| f("post_norm", w)),
            gate_activation: self.gate_activation,
            qk_norm: self.qk_norm,
            n_q: self.n_q,
            n_kv: self.n_kv,
            d_head: self.d_head,
        }
    }
}
