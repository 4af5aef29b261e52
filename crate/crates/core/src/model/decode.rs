//! Incremental token-at-a-time inference.
//!
//! The decode path recomputes exactly what the batched forward pass would,
//! in the same floating-point operation order, so cached decoding matches
//! re-running the full forward at every step bit for bit. Attention layers
//! cache normalized+rotated keys and raw values; linear layers carry their
//! matrix state plus short rings of the last few pre-conv projections.
//! A decode session covers a single document: positions, state, and caches
//! all start at zero.

use super::{Mixer, Model};
use crate::mixers::layer::CONV_WIDTH;
use crate::mixers::scan::update_state;
use crate::mixers::{AttnLayer, GateActivation, KdaLayer, MixerKind, RecurrentState};
use crate::tensor::{Real, Result, TensorError};
use crate::util::Rng64;

/// Token selection rule for `generate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    /// Highest logit, first index on ties.
    Greedy,
    /// Softmax at `temperature`, restricted to the `top_k` most likely
    /// tokens (0 = no limit) and then to the smallest set with cumulative
    /// probability ≥ `top_p`. `temperature` of 0 degenerates to greedy.
    Sample {
        temperature: f64,
        top_p: f64,
        top_k: usize,
        seed: u64,
    },
}

impl Decode {
    fn rng(&self) -> Rng64 {
        match self {
            Decode::Greedy => Rng64::seed_from(0),
            Decode::Sample { seed, .. } => Rng64::seed_from(*seed),
        }
    }
}

/// Fixed-width circular buffer of the most recent projection rows, indexed
/// by absolute position.
struct Ring<F> {
    width: usize,
    dim: usize,
    buf: Vec<F>,
}

impl<F: Real> Ring<F> {
    fn new(width: usize, dim: usize) -> Self {
        Ring {
            width,
            dim,
            buf: vec![F::ZERO; width * dim],
        }
    }

    fn push(&mut self, pos: usize, x: &[F]) {
        let s = (pos % self.width) * self.dim;
        self.buf[s..s + self.dim].copy_from_slice(x);
    }

    fn get(&self, pos: usize) -> &[F] {
        let s = (pos % self.width) * self.dim;
        &self.buf[s..s + self.dim]
    }
}

enum LayerState<F: Real> {
    Attn {
        /// normalized+rotated keys, one [n_kv·d_head] row per position
        keys: Vec<F>,
        /// raw values, same layout
        vals: Vec<F>,
    },
    Linear {
        state: RecurrentState<F>,
        ring_q: Ring<F>,
        ring_k: Ring<F>,
        ring_v: Ring<F>,
    },
}

/// Incremental inference state for one document.
pub struct DecodeState<F: Real> {
    layers: Vec<LayerState<F>>,
    pos: usize,
}

// -- row-level kernels, mirroring the tensor ops' accumulation orders -------

/// out += x · W for W stored [k, n] row-major (same loop order as the
/// batched matmul's row pass: k outer, n inner).
fn matvec_acc<F: Real>(x: &[F], w: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(w.len(), x.len() * n);
    for (kk, &xv) in x.iter().enumerate() {
        let wrow = &w[kk * n..(kk + 1) * n];
        for j in 0..n {
            out[j] += xv * wrow[j];
        }
    }
}

fn rms_row<F: Real>(x: &[F], w: &[F], eps: F, out: &mut [F]) {
    let mut ss = F::ZERO;
    for &v in x {
        ss += v * v;
    }
    let gn = F::from_f64(x.len() as f64);
    let inv = F::ONE / (ss / gn + eps).sqrt();
    for ((y, &v), &wv) in out.iter_mut().zip(x).zip(w) {
        *y = v * inv * wv;
    }
}

fn l2_row<F: Real>(x: &mut [F]) {
    let eps = F::from_f64(1e-12);
    let mut ss = F::ZERO;
    for &v in x.iter() {
        ss += v * v;
    }
    let inv = F::ONE / (ss + eps).sqrt();
    for v in x.iter_mut() {
        *v = *v * inv;
    }
}

fn rope_row<F: Real>(row: &mut [F], pos: usize, theta: f64) {
    let d = row.len();
    let half = d / 2;
    for i in 0..half {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let ang = pos as f64 * freq;
        let (c, s) = (F::from_f64(ang.cos()), F::from_f64(ang.sin()));
        let a = row[i];
        let b = row[half + i];
        row[i] = a * c - b * s;
        row[half + i] = a * s + b * c;
    }
}

/// Convolution output at `pos` from a ring of raw projections: kernel row j
/// weighs the input at pos + j − (width−1), zero before the document start.
fn conv_row<F: Real>(ring: &Ring<F>, kernel: &[F], pos: usize, out: &mut [F]) {
    let w = CONV_WIDTH;
    let d = ring.dim;
    for j in 0..w {
        let src = pos + j + 1;
        if src < w {
            continue; // before the document start: zero padding
        }
        let src = src - w;
        let xrow = ring.get(src);
        let krow = &kernel[j * d..(j + 1) * d];
        for c in 0..d {
            out[c] += krow[c] * xrow[c];
        }
    }
}

fn attn_step<F: Real>(
    a: &AttnLayer<F>,
    keys: &mut Vec<F>,
    vals: &mut Vec<F>,
    h: &[F],
    pos: usize,
    out: &mut [F],
) -> Result<()> {
    let d = a.d_head;
    let share = a.n_q / a.n_kv;
    let qw = a.n_q * d;
    let kw = a.n_kv * d;
    let eps = F::from_f64(1e-6);
    let scale = F::from_f64(1.0 / (d as f64).sqrt());

    let mut q_all = vec![F::ZERO; qw];
    matvec_acc(h, a.w_q.data(), qw, &mut q_all);
    let mut k_all = vec![F::ZERO; kw];
    matvec_acc(h, a.w_k.data(), kw, &mut k_all);
    let mut v_all = vec![F::ZERO; kw];
    matvec_acc(h, a.w_v.data(), kw, &mut v_all);

    // cache this position's normalized+rotated keys and raw values
    let mut k_row = vec![F::ZERO; kw];
    for g in 0..a.n_kv {
        let kg = &mut k_row[g * d..(g + 1) * d];
        rms_row(&k_all[g * d..(g + 1) * d], a.k_norm.data(), eps, kg);
        rope_row(kg, pos, a.rope_theta);
    }
    keys.extend_from_slice(&k_row);
    vals.extend_from_slice(&v_all);

    let lo_base = match a.window {
        Some(w) => (pos + 1).saturating_sub(w),
        None => 0,
    };
    let mut concat = vec![F::ZERO; qw];
    let mut scores = Vec::with_capacity(pos + 1 - lo_base);
    for hq in 0..a.n_q {
        let g = hq / share;
        let mut q = vec![F::ZERO; d];
        rms_row(&q_all[hq * d..(hq + 1) * d], a.q_norm.data(), eps, &mut q);
        rope_row(&mut q, pos, a.rope_theta);

        scores.clear();
        for p in lo_base..=pos {
            let krow = &keys[p * kw + g * d..p * kw + (g + 1) * d];
            let mut acc = F::ZERO;
            for i in 0..d {
                acc += q[i] * krow[i];
            }
            scores.push(acc * scale);
        }
        let mut m = scores[0];
        for &v in scores.iter() {
            m = m.maxv(v);
        }
        let mut sum = F::ZERO;
        for v in scores.iter_mut() {
            let e = (*v - m).exp();
            *v = e;
            sum += e;
        }
        let orow = &mut concat[hq * d..(hq + 1) * d];
        for (i, p) in (lo_base..=pos).enumerate() {
            let prob = scores[i] / sum;
            let vrow = &vals[p * kw + g * d..p * kw + (g + 1) * d];
            for j in 0..d {
                orow[j] += prob * vrow[j];
            }
        }
    }
    matvec_acc(&concat, a.w_o.data(), out.len(), out);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: "attention output" });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn linear_step<F: Real>(
    l: &KdaLayer<F>,
    state: &mut RecurrentState<F>,
    ring_q: &mut Ring<F>,
    ring_k: &mut Ring<F>,
    ring_v: &mut Ring<F>,
    h: &[F],
    pos: usize,
    out: &mut [F],
) -> Result<()> {
    let d = l.d_head;
    let share = l.n_q / l.n_kv;
    let qw = l.n_q * d;
    let kw = l.n_kv * d;

    let mut q_pre = vec![F::ZERO; qw];
    matvec_acc(h, l.w_q.data(), qw, &mut q_pre);
    ring_q.push(pos, &q_pre);
    let mut q = vec![F::ZERO; qw];
    conv_row(ring_q, l.conv_q.data(), pos, &mut q);

    let mut k_pre = vec![F::ZERO; kw];
    matvec_acc(h, l.w_k.data(), kw, &mut k_pre);
    ring_k.push(pos, &k_pre);
    let mut k = vec![F::ZERO; kw];
    conv_row(ring_k, l.conv_k.data(), pos, &mut k);

    let mut v_pre = vec![F::ZERO; kw];
    matvec_acc(h, l.w_v.data(), kw, &mut v_pre);
    ring_v.push(pos, &v_pre);
    let mut v = vec![F::ZERO; kw];
    conv_row(ring_v, l.conv_v.data(), pos, &mut v);

    if !(q.iter().chain(&k).chain(&v).all(|x| x.is_finite())) {
        return Err(TensorError::NonFinite { op: "kda_layer conv" });
    }
    if l.qk_norm {
        for hq in 0..l.n_q {
            l2_row(&mut q[hq * d..(hq + 1) * d]);
        }
        for g in 0..l.n_kv {
            l2_row(&mut k[g * d..(g + 1) * d]);
        }
    }

    let beta: Vec<F> = match (&l.w_beta, &l.b_beta) {
        (Some(w), Some(b)) => {
            let mut pre = vec![F::ZERO; l.n_kv];
            matvec_acc(h, w.data(), l.n_kv, &mut pre);
            pre.iter()
                .zip(b.data())
                .map(|(&x, &bv)| (x + bv).sigmoid())
                .collect()
        }
        _ => vec![F::ONE; l.n_kv],
    };
    let alpha: Vec<F> = match (l.kind, &l.w_alpha, &l.b_alpha) {
        (MixerKind::Kda, Some(w), Some(b)) => {
            let mut pre = vec![F::ZERO; kw];
            matvec_acc(h, w.data(), kw, &mut pre);
            pre.iter()
                .zip(b.data())
                .map(|(&x, &bv)| (x + bv).sigmoid())
                .collect()
        }
        (MixerKind::Gdn, Some(w), Some(b)) => {
            let mut pre = vec![F::ZERO; l.n_kv];
            matvec_acc(h, w.data(), l.n_kv, &mut pre);
            let per_head: Vec<F> = pre
                .iter()
                .zip(b.data())
                .map(|(&x, &bv)| (x + bv).sigmoid())
                .collect();
            let mut rep = vec![F::ZERO; kw];
            for g in 0..l.n_kv {
                for m in 0..d {
                    rep[g * d + m] = per_head[g];
                }
            }
            rep
        }
        _ => vec![F::ONE; kw],
    };

    let mut o = vec![F::ZERO; qw];
    for g in 0..l.n_kv {
        let kg = &k[g * d..(g + 1) * d];
        let vg = &v[g * d..(g + 1) * d];
        let s = state.head_mut(g);
        if l.kind == MixerKind::LinearAttn {
            for i in 0..d {
                let ki = kg[i];
                let row = &mut s[i * d..(i + 1) * d];
                for (e, &vj) in row.iter_mut().zip(vg) {
                    *e += ki * vj;
                }
            }
        } else {
            update_state(s, d, d, kg, vg, &alpha[g * d..(g + 1) * d], beta[g]);
        }
        let s = state.head(g);
        for sub in 0..share {
            let hq = g * share + sub;
            let qrow = &q[hq * d..(hq + 1) * d];
            let orow = &mut o[hq * d..(hq + 1) * d];
            for i in 0..d {
                let qi = qrow[i];
                let srow = &s[i * d..(i + 1) * d];
                for (ov, &e) in orow.iter_mut().zip(srow) {
                    *ov += qi * e;
                }
            }
        }
    }

    let mut gate = vec![F::ZERO; qw];
    matvec_acc(h, l.w_gate.data(), qw, &mut gate);
    for (g, &b) in gate.iter_mut().zip(l.b_gate.data()) {
        let x = *g + b;
        *g = match l.gate_activation {
            GateActivation::Silu => x * x.sigmoid(),
            GateActivation::Sigmoid => x.sigmoid(),
        };
    }
    for (ov, &g) in o.iter_mut().zip(&gate) {
        *ov = g * *ov;
    }
    if let Some(w) = &l.post_norm {
        let eps = F::from_f64(1e-6);
        let mut normed = vec![F::ZERO; qw];
        for hq in 0..l.n_q {
            rms_row(&o[hq * d..(hq + 1) * d], w.data(), eps, &mut normed[hq * d..(hq + 1) * d]);
        }
        o = normed;
    }
    matvec_acc(&o, l.w_o.data(), out.len(), out);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: "kda_layer output" });
    }
    Ok(())
}

impl<F: Real> DecodeState<F> {
    pub fn new(model: &Model<F>) -> Result<DecodeState<F>> {
        model.config.validate()?;
        let layers = model
            .blocks
            .iter()
            .map(|b| match &b.mixer {
                Mixer::Attention(_) => LayerState::Attn {
                    keys: Vec::new(),
                    vals: Vec::new(),
                },
                Mixer::Linear(l) => LayerState::Linear {
                    state: RecurrentState::zeros(l.n_kv, l.d_head, l.d_head),
                    ring_q: Ring::new(CONV_WIDTH, l.n_q * l.d_head),
                    ring_k: Ring::new(CONV_WIDTH, l.n_kv * l.d_head),
                    ring_v: Ring::new(CONV_WIDTH, l.n_kv * l.d_head),
                },
            })
            .collect();
        Ok(DecodeState { layers, pos: 0 })
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Total bytes of cached inference state. Attention contributions grow
    /// with the sequence; linear contributions do not.
    pub fn byte_size(&self) -> usize {
        let es = std::mem::size_of::<F>();
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::Attn { keys, vals } => (keys.len() + vals.len()) * es,
                LayerState::Linear {
                    state,
                    ring_q,
                    ring_k,
                    ring_v,
                } => {
                    state.byte_size(es)
                        + (ring_q.buf.len() + ring_k.buf.len() + ring_v.buf.len()) * es
                }
            })
            .sum()
    }

    /// Bytes held by the grow-with-length attention caches alone.
    pub fn kv_cache_bytes(&self) -> usize {
        let es = std::mem::size_of::<F>();
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::Attn { keys, vals } => (keys.len() + vals.len()) * es,
                LayerState::Linear { .. } => 0,
            })
            .sum()
    }

    /// Feed one token; returns the next-token logits row.
    pub fn step(&mut self, model: &Model<F>, token: usize) -> Result<Vec<F>> {
        if self.layers.len() != model.blocks.len() {
            return Err(TensorError::Contract {
                op: "decode_step",
                detail: "state built for a different model".into(),
            });
        }
        let cfg = &model.config;
        let d = cfg.d_model;
        if token >= cfg.vocab_size {
            return Err(TensorError::Domain {
                op: "decode_step",
                detail: format!("id {token} out of vocabulary {}", cfg.vocab_size),
            });
        }
        let eps = F::from_f64(cfg.rmsnorm_eps);
        let mut x = model.embed.data()[token * d..(token + 1) * d].to_vec();
        let mut h = vec![F::ZERO; d];
        let mut m = vec![F::ZERO; d];
        for (block, lstate) in model.blocks.iter().zip(&mut self.layers) {
            rms_row(&x, block.mixer_norm.data(), eps, &mut h);
            m.fill(F::ZERO);
            match (&block.mixer, lstate) {
                (Mixer::Attention(a), LayerState::Attn { keys, vals }) => {
                    attn_step(a, keys, vals, &h, self.pos, &mut m)?
                }
                (
                    Mixer::Linear(l),
                    LayerState::Linear {
                        state,
                        ring_q,
                        ring_k,
                        ring_v,
                    },
                ) => linear_step(l, state, ring_q, ring_k, ring_v, &h, self.pos, &mut m)?,
                _ => {
                    return Err(TensorError::Contract {
                        op: "decode_step",
                        detail: "state built for a different model".into(),
                    })
                }
            }
            for (xv, &mv) in x.iter_mut().zip(&m) {
                *xv = *xv + mv;
            }
            rms_row(&x, block.mlp_norm.data(), eps, &mut h);
            // SwiGLU row: down(silu(h·gate) ⊙ (h·up))
            let mlp_dim = cfg.mlp_dim;
            let mut g = vec![F::ZERO; mlp_dim];
            matvec_acc(&h, block.mlp.w_gate.data(), mlp_dim, &mut g);
            let mut u = vec![F::ZERO; mlp_dim];
            matvec_acc(&h, block.mlp.w_up.data(), mlp_dim, &mut u);
            for (gv, &uv) in g.iter_mut().zip(&u) {
                let x = *gv;
                *gv = x * x.sigmoid() * uv;
            }
            m.fill(F::ZERO);
            matvec_acc(&g, block.mlp.w_down.data(), d, &mut m);
            for (xv, &mv) in x.iter_mut().zip(&m) {
                *xv = *xv + mv;
            }
        }
        rms_row(&x, model.final_norm.data(), eps, &mut h);
        let vocab = cfg.vocab_size;
        let mut logits = vec![F::ZERO; vocab];
        match &model.head {
            Some(w) => matvec_acc(&h, w.data(), vocab, &mut logits),
            None => {
                // h · embedᵀ, dot per vocabulary row
                let e = model.embed.data();
                for (j, lv) in logits.iter_mut().enumerate() {
                    let erow = &e[j * d..(j + 1) * d];
                    let mut acc = F::ZERO;
                    for kk in 0..d {
                        acc += h[kk] * erow[kk];
                    }
                    *lv += acc;
                }
            }
        }
        self.pos += 1;
        Ok(logits)
    }
}

fn argmax<F: Real>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn choose<F: Real>(logits: &[F], decode: &Decode, rng: &mut Rng64) -> usize {
    match *decode {
        Decode::Greedy => argmax(logits),
        Decode::Sample {
            temperature,
            top_p,
            top_k,
            ..
        } => {
            if temperature <= 0.0 {
                return argmax(logits);
            }
            let z: Vec<f64> = logits.iter().map(|v| v.to_f64()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // (index, unnormalized probability), most likely first
            let mut items: Vec<(usize, f64)> = z
                .iter()
                .enumerate()
                .map(|(i, &v)| (i, ((v - m) / temperature).exp()))
                .collect();
            items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            if top_k > 0 && top_k < items.len() {
                items.truncate(top_k);
            }
            if top_p < 1.0 {
                let total: f64 = items.iter().map(|(_, p)| p).sum();
                let mut cum = 0.0;
                let mut keep = items.len();
                for (i, (_, p)) in items.iter().enumerate() {
                    cum += p;
                    if cum >= top_p * total {
                        keep = i + 1;
                        break;
                    }
                }
                items.truncate(keep);
            }
            let total: f64 = items.iter().map(|(_, p)| p).sum();
            let u = rng.uniform() * total;
            let mut cum = 0.0;
            for &(i, p) in &items {
                cum += p;
                if u < cum {
                    return i;
                }
            }
            items.last().expect("non-empty after truncation").0
        }
    }
}

/// Autoregressive continuation: feed the prompt, then sample `max_new`
/// tokens under the given rule. Returns only the new tokens.
pub fn generate<F: Real>(
    model: &Model<F>,
    prompt: &[usize],
    max_new: usize,
    decode: &Decode,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(TensorError::Contract {
            op: "generate",
            detail: "prompt must be non-empty".into(),
        });
    }
    let mut st = DecodeState::new(model)?;
    let mut logits = Vec::new();
    for &t in prompt {
        logits = st.step(model, t)?;
    }
    let mut rng = decode.rng();
    let mut out = Vec::with_capacity(max_new);
    while out.len() < max_new {
        let next = choose(&logits, decode, &mut rng);
        out.push(next);
        if out.len() == max_new {
            break;
        }
        logits = st.step(model, next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_keeps_the_last_width_rows() {
        let mut r: Ring<f64> = Ring::new(3, 2);
        for pos in 0..7 {
            r.push(pos, &[pos as f64, -(pos as f64)]);
        }
        assert_eq!(r.get(6), &[6.0, -6.0]);
        assert_eq!(r.get(5), &[5.0, -5.0]);
        assert_eq!(r.get(4), &[4.0, -4.0]);
    }

    #[test]
    fn greedy_takes_first_max_on_ties() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn zero_temperature_sampling_is_greedy() {
        let logits = [0.1f64, 2.5, -1.0];
        let d = Decode::Sample {
            temperature: 0.0,
            top_p: 0.8,
            top_k: 2,
            seed: 7,
        };
        let mut rng = d.rng();
        assert_eq!(choose(&logits, &d, &mut rng), 1);
    }

    #[test]
    fn top_k_one_always_picks_the_mode() {
        let logits = [0.3f64, 0.1, 1.7, 0.2];
        let d = Decode::Sample {
            temperature: 1.0,
            top_p: 1.0,
            top_k: 1,
            seed: 3,
        };
        let mut rng = d.rng();
        for _ in 0..50 {
            assert_eq!(choose(&logits, &d, &mut rng), 2);
        }
    }

    #[test]
    fn top_p_cuts_the_tail() {
        // probs ∝ (0.6, 0.3, 0.1): top_p = 0.65 keeps {0, 1} (cum 0.6 < 0.65
        // after one item, 0.9 ≥ 0.65 after two)
        let logits = [0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()];
        let d = Decode::Sample {
            temperature: 1.0,
            top_p: 0.65,
            top_k: 0,
            seed: 11,
        };
        let mut rng = d.rng();
        for _ in 0..200 {
            let c = choose(&logits, &d, &mut rng);
            assert!(c == 0 || c == 1, "sampled outside the nucleus: {c}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let logits = [0.0f64, 0.1, 0.2, -0.3, 1.0];
        let d = Decode::Sample {
            temperature: 0.9,
            top_p: 0.95,
            top_k: 4,
            seed: 21,
        };
        let mut a = d.rng();
        let mut b = d.rng();
        for _ in 0..32 {
            assert_eq!(choose(&logits, &d, &mut a), choose(&logits, &d, &mut b));
        }
    }
}
