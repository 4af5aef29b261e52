//! Sequence-level KDA recurrence as one autodiff node.
//!
//! Forward evaluates S_t = (I − β_t k_t k_tᵀ) Diag(α_t) S_{t−1} + β_t k_t v_tᵀ,
//! o_t = S_tᵀ q_t per KV head (query heads share their KV head's state),
//! either token-by-token or chunk-parallel. The chunked path factors each
//! chunk against its entering state S₀: with Γ_t the inclusive cumulative
//! decay and Γ_(i,t] the decay strictly after i,
//!
//!   S_t = Diag(Γ_t) S₀ + Σ_{i≤t} Diag(Γ_(i,t]) k_i u_iᵀ
//!   u_t = β_t v_t − β_t S₀ᵀ(Γ_t ⊙ k_t) − Σ_{i<t} a_kk[t,i] u_i
//!   a_kk[t,i] = β_t · k_tᵀ(Γ_(i,t] ⊙ k_i)
//!   o_t = S₀ᵀ(Γ_t ⊙ q_t) + Σ_{i≤t} (Γ_(i,t] ⊙ k_i)ᵀq_t · u_i
//!
//! (derivable by induction on t; the u recursion is forward substitution
//! against a unit lower-triangular system). Decay ratios are built as direct
//! running products of α, never as quotients, so chunked and sequential
//! results agree to ~1e-10 in f64.
//!
//! Backward ignores the forward mode: it recomputes the state trajectory
//! token-by-token from the saved inputs and runs the adjoint recurrence in
//! reverse, carrying S̄:
//!
//!   q̄_t += S_t ō_t,   S̄ += q_t ō_tᵀ            (readout, per query head)
//!   with W = Diag(α_t) S_{t−1}:
//!   v̄_t  = β_t · S̄ᵀk_t
//!   β̄_t  = (S̄ᵀk_t)·(v_t − Wᵀk_t)
//!   k̄_t  = β_t [ S̄ v_t − S̄ (Wᵀk_t) − W (S̄ᵀk_t) ]
//!   W̄    = S̄ − β_t k_t (k_tᵀ S̄)
//!   ᾱ_tc = Σ_j W̄_cj S_{t−1,cj},   S̄ ← Diag(α_t) W̄

use crate::mixers::{check_segs, seg_ranges};
use crate::tensor::tape::{common_tape, GradStore};
use crate::tensor::{Real, Result, Tensor, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// Token-by-token; the semantic reference.
    Sequential,
    /// Chunk-parallel with the given chunk length; the performance path.
    Chunked(usize),
}

/// Head bookkeeping for one scan call. Query heads must be a multiple of KV
/// heads; query head h reads the state of KV head h / (n_q/n_kv).
#[derive(Debug, Clone, Copy)]
pub struct ScanDims {
    pub n_q: usize,
    pub n_kv: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl ScanDims {
    fn check(&self, op: &'static str) -> Result<usize> {
        if self.n_kv == 0 || self.n_q % self.n_kv != 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(TensorError::Contract {
                op,
                detail: format!(
                    "bad head layout: {} query / {} kv heads, d_k {}, d_v {}",
                    self.n_q, self.n_kv, self.d_k, self.d_v
                ),
            });
        }
        Ok(self.n_q / self.n_kv)
    }
}

struct ScanView<'a, F> {
    q: &'a [F],
    k: &'a [F],
    v: &'a [F],
    alpha: &'a [F],
    beta: &'a [F],
    dims: ScanDims,
    share: usize, // query heads per kv head
}

impl<'a, F: Real> ScanView<'a, F> {
    fn q_at(&self, t: usize, h: usize) -> &'a [F] {
        let w = self.dims.n_q * self.dims.d_k;
        &self.q[t * w + h * self.dims.d_k..t * w + (h + 1) * self.dims.d_k]
    }
    fn k_at(&self, t: usize, g: usize) -> &'a [F] {
        let w = self.dims.n_kv * self.dims.d_k;
        &self.k[t * w + g * self.dims.d_k..t * w + (g + 1) * self.dims.d_k]
    }
    fn v_at(&self, t: usize, g: usize) -> &'a [F] {
        let w = self.dims.n_kv * self.dims.d_v;
        &self.v[t * w + g * self.dims.d_v..t * w + (g + 1) * self.dims.d_v]
    }
    fn alpha_at(&self, t: usize, g: usize) -> &'a [F] {
        let w = self.dims.n_kv * self.dims.d_k;
        &self.alpha[t * w + g * self.dims.d_k..t * w + (g + 1) * self.dims.d_k]
    }
    fn beta_at(&self, t: usize, g: usize) -> F {
        self.beta[t * self.dims.n_kv + g]
    }
}

/// In-place KDA state update; returns nothing, state becomes S_t.
pub(crate) fn update_state<F: Real>(s: &mut [F], d_k: usize, d_v: usize, k: &[F], v: &[F], alpha: &[F], beta: F) {
    for i in 0..d_k {
        let a = alpha[i];
        for e in s[i * d_v..(i + 1) * d_v].iter_mut() {
            *e *= a;
        }
    }
    let mut ks = vec![F::ZERO; d_v];
    for i in 0..d_k {
        let ki = k[i];
        let row = &s[i * d_v..(i + 1) * d_v];
        for (acc, &e) in ks.iter_mut().zip(row) {
            *acc += ki * e;
        }
    }
    for i in 0..d_k {
        let bki = beta * k[i];
        let row = &mut s[i * d_v..(i + 1) * d_v];
        for (e, (&vj, &ksj)) in row.iter_mut().zip(v.iter().zip(&ks)) {
            *e += bki * (vj - ksj);
        }
    }
}

fn forward_sequential<F: Real>(view: &ScanView<F>, segs: &[usize], t_len: usize, out: &mut [F]) {
    let ScanDims { d_k, d_v, n_kv, n_q } = view.dims;
    let ow = n_q * d_v;
    let mut s = vec![F::ZERO; d_k * d_v];
    for g in 0..n_kv {
        for (a, b) in seg_ranges(segs, t_len) {
            s.fill(F::ZERO);
            for t in a..b {
                update_state(&mut s, d_k, d_v, view.k_at(t, g), view.v_at(t, g), view.alpha_at(t, g), view.beta_at(t, g));
                for sub in 0..view.share {
                    let h = g * view.share + sub;
                    let q = view.q_at(t, h);
                    let orow = &mut out[t * ow + h * d_v..t * ow + (h + 1) * d_v];
                    for i in 0..d_k {
                        let qi = q[i];
                        let srow = &s[i * d_v..(i + 1) * d_v];
                        for (o, &e) in orow.iter_mut().zip(srow) {
                            *o += qi * e;
                        }
                    }
                }
            }
        }
    }
}

fn forward_chunked<F: Real>(
    view: &ScanView<F>,
    segs: &[usize],
    t_len: usize,
    chunk: usize,
    out: &mut [F],
) {
    let ScanDims { d_k, d_v, n_kv, n_q } = view.dims;
    let ow = n_q * d_v;
    let share = view.share;
    let mut s0 = vec![F::ZERO; d_k * d_v];
    let mut s1 = vec![F::ZERO; d_k * d_v];
    for g in 0..n_kv {
        for (a, b) in seg_ranges(segs, t_len) {
            s0.fill(F::ZERO);
            let mut c0 = a;
            while c0 < b {
                let c = (b - c0).min(chunk);
                // inclusive cumulative decay Γ_t, local index t in 0..c
                let mut gamma = vec![F::ZERO; c * d_k];
                for t in 0..c {
                    let al = view.alpha_at(c0 + t, g);
                    if t == 0 {
                        gamma[..d_k].copy_from_slice(al);
                    } else {
                        for i in 0..d_k {
                            gamma[t * d_k + i] = gamma[(t - 1) * d_k + i] * al[i];
                        }
                    }
                }
                // pairwise decay-weighted inner products via running products
                // a_kk[t][i] (i<t) and a_qk[h][t][i] (i<=t)
                let mut a_kk = vec![F::ZERO; c * c];
                let mut a_qk = vec![F::ZERO; share * c * c];
                let mut rvec = vec![F::ZERO; d_k];
                for i in 0..c {
                    rvec.copy_from_slice(view.k_at(c0 + i, g));
                    for sub in 0..share {
                        let q = view.q_at(c0 + i, g * share + sub);
                        let mut acc = F::ZERO;
                        for x in 0..d_k {
                            acc += q[x] * rvec[x];
                        }
                        a_qk[sub * c * c + i * c + i] = acc;
                    }
                    for t in i + 1..c {
                        let al = view.alpha_at(c0 + t, g);
                        for x in 0..d_k {
                            rvec[x] *= al[x];
                        }
                        let kt = view.k_at(c0 + t, g);
                        let mut acc = F::ZERO;
                        for x in 0..d_k {
                            acc += kt[x] * rvec[x];
                        }
                        a_kk[t * c + i] = view.beta_at(c0 + t, g) * acc;
                        for sub in 0..share {
                            let q = view.q_at(c0 + t, g * share + sub);
                            let mut acc = F::ZERO;
                            for x in 0..d_k {
                                acc += q[x] * rvec[x];
                            }
                            a_qk[sub * c * c + t * c + i] = acc;
                        }
                    }
                }
                // forward substitution for the pseudo-values u_t
                let mut u = vec![F::ZERO; c * d_v];
                for t in 0..c {
                    let beta = view.beta_at(c0 + t, g);
                    let kt = view.k_at(c0 + t, g);
                    let vt = view.v_at(c0 + t, g);
                    let gt = &gamma[t * d_k..(t + 1) * d_k];
                    let (done, rest) = u.split_at_mut(t * d_v);
                    let ut = &mut rest[..d_v];
                    // β v − β S₀ᵀ(Γ_t ⊙ k_t)
                    for j in 0..d_v {
                        ut[j] = beta * vt[j];
                    }
                    for i in 0..d_k {
                        let w = beta * gt[i] * kt[i];
                        let srow = &s0[i * d_v..(i + 1) * d_v];
                        for j in 0..d_v {
                            ut[j] -= w * srow[j];
                        }
                    }
                    for i in 0..t {
                        let aki = a_kk[t * c + i];
                        let ui = &done[i * d_v..(i + 1) * d_v];
                        for j in 0..d_v {
                            ut[j] -= aki * ui[j];
                        }
                    }
                }
                // outputs
                for t in 0..c {
                    let gt = &gamma[t * d_k..(t + 1) * d_k];
                    for sub in 0..share {
                        let h = g * share + sub;
                        let q = view.q_at(c0 + t, h);
                        let orow =
                            &mut out[(c0 + t) * ow + h * d_v..(c0 + t) * ow + (h + 1) * d_v];
                        for i in 0..d_k {
                            let w = gt[i] * q[i];
                            let srow = &s0[i * d_v..(i + 1) * d_v];
                            for j in 0..d_v {
                                orow[j] += w * srow[j];
                            }
                        }
                        for i in 0..=t {
                            let aqi = a_qk[sub * c * c + t * c + i];
                            let ui = &u[i * d_v..(i + 1) * d_v];
                            for j in 0..d_v {
                                orow[j] += aqi * ui[j];
                            }
                        }
                    }
                }
                // carry state: S_C = Diag(Γ_{C−1}) S₀ + Σ_i Diag(Γ_(i,C−1]) k_i u_iᵀ
                s1.fill(F::ZERO);
                let mut gtail = vec![F::ONE; d_k];
                for i in (0..c).rev() {
                    let ki = view.k_at(c0 + i, g);
                    let ui = &u[i * d_v..(i + 1) * d_v];
                    for x in 0..d_k {
                        let w = gtail[x] * ki[x];
                        let row = &mut s1[x * d_v..(x + 1) * d_v];
                        for j in 0..d_v {
                            row[j] += w * ui[j];
                        }
                    }
                    let al = view.alpha_at(c0 + i, g);
                    for x in 0..d_k {
                        gtail[x] *= al[x];
                    }
                }
                for x in 0..d_k {
                    let w = gtail[x];
                    let dst = &mut s1[x * d_v..(x + 1) * d_v];
                    let src = &s0[x * d_v..(x + 1) * d_v];
                    for j in 0..d_v {
                        dst[j] += w * src[j];
                    }
                }
                std::mem::swap(&mut s0, &mut s1);
                c0 += c;
            }
        }
    }
}

struct ScanGrads<'a, F> {
    q: Option<&'a mut [F]>,
    k: Option<&'a mut [F]>,
    v: Option<&'a mut [F]>,
    alpha: Option<&'a mut [F]>,
    beta: Option<&'a mut [F]>,
}

fn backward_scan<F: Real>(
    view: &ScanView<F>,
    segs: &[usize],
    t_len: usize,
    up: &[F],
    grads: &mut ScanGrads<F>,
) {
    let ScanDims { d_k, d_v, n_kv, n_q } = view.dims;
    let ow = n_q * d_v;
    let qw = n_q * d_k;
    let akw = n_kv * d_k;
    let vw = n_kv * d_v;
    let share = view.share;
    let slab = d_k * d_v;
    let mut sbar = vec![F::ZERO; slab];
    let mut wbuf = vec![F::ZERO; slab];
    let mut ksbar = vec![F::ZERO; d_v];
    let mut wk = vec![F::ZERO; d_v];
    for g in 0..n_kv {
        for (a, b) in seg_ranges(segs, t_len) {
            let seg = b - a;
            // recompute the trajectory: states[l] = S after l tokens
            let mut states = vec![F::ZERO; (seg + 1) * slab];
            for t in a..b {
                let l = t - a;
                let (prev, next) = states.split_at_mut((l + 1) * slab);
                let cur = &mut next[..slab];
                cur.copy_from_slice(&prev[l * slab..]);
                update_state(cur, d_k, d_v, view.k_at(t, g), view.v_at(t, g), view.alpha_at(t, g), view.beta_at(t, g));
            }
            sbar.fill(F::ZERO);
            for t in (a..b).rev() {
                let l = t - a;
                let s_t = &states[(l + 1) * slab..(l + 2) * slab];
                let s_prev = &states[l * slab..(l + 1) * slab];
                // readout adjoint per query head
                for sub in 0..share {
                    let h = g * share + sub;
                    let ob = &up[t * ow + h * d_v..t * ow + (h + 1) * d_v];
                    let qv = view.q_at(t, h);
                    if let Some(qg) = grads.q.as_deref_mut() {
                        let qrow = &mut qg[t * qw + h * d_k..t * qw + (h + 1) * d_k];
                        for i in 0..d_k {
                            let srow = &s_t[i * d_v..(i + 1) * d_v];
                            let mut acc = F::ZERO;
                            for j in 0..d_v {
                                acc += srow[j] * ob[j];
                            }
                            qrow[i] += acc;
                        }
                    }
                    for i in 0..d_k {
                        let qi = qv[i];
                        let row = &mut sbar[i * d_v..(i + 1) * d_v];
                        for j in 0..d_v {
                            row[j] += qi * ob[j];
                        }
                    }
                }
                let kv = view.k_at(t, g);
                let vv = view.v_at(t, g);
                let al = view.alpha_at(t, g);
                let beta = view.beta_at(t, g);
                // W = Diag(α) S_{t−1}
                for i in 0..d_k {
                    let ai = al[i];
                    for j in 0..d_v {
                        wbuf[i * d_v + j] = ai * s_prev[i * d_v + j];
                    }
                }
                // S̄ᵀk and Wᵀk
                ksbar.fill(F::ZERO);
                wk.fill(F::ZERO);
                for i in 0..d_k {
                    let ki = kv[i];
                    for j in 0..d_v {
                        ksbar[j] += ki * sbar[i * d_v + j];
                        wk[j] += ki * wbuf[i * d_v + j];
                    }
                }
                if let Some(vg) = grads.v.as_deref_mut() {
                    let vrow = &mut vg[t * vw + g * d_v..t * vw + (g + 1) * d_v];
                    for j in 0..d_v {
                        vrow[j] += beta * ksbar[j];
                    }
                }
                if let Some(bg) = grads.beta.as_deref_mut() {
                    let mut acc = F::ZERO;
                    for j in 0..d_v {
                        acc += ksbar[j] * (vv[j] - wk[j]);
                    }
                    bg[t * n_kv + g] += acc;
                }
                if let Some(kg) = grads.k.as_deref_mut() {
                    let krow = &mut kg[t * akw + g * d_k..t * akw + (g + 1) * d_k];
                    for i in 0..d_k {
                        let sb = &sbar[i * d_v..(i + 1) * d_v];
                        let wb = &wbuf[i * d_v..(i + 1) * d_v];
                        let mut acc = F::ZERO;
                        for j in 0..d_v {
                            // S̄v − S̄(Wᵀk) − W(S̄ᵀk), row i
                            acc += sb[j] * (vv[j] - wk[j]) - wb[j] * ksbar[j];
                        }
                        krow[i] += beta * acc;
                    }
                }
                // W̄ = S̄ − βk(kᵀS̄); ᾱ_i = Σ_j W̄_ij S_{t−1,ij}; S̄ ← Diag(α)W̄
                for i in 0..d_k {
                    let bki = beta * kv[i];
                    let ai = al[i];
                    let mut aacc = F::ZERO;
                    let sb = &mut sbar[i * d_v..(i + 1) * d_v];
                    let sp = &s_prev[i * d_v..(i + 1) * d_v];
                    for j in 0..d_v {
                        let wbar = sb[j] - bki * ksbar[j];
                        aacc += wbar * sp[j];
                        sb[j] = ai * wbar;
                    }
                    if let Some(ag) = grads.alpha.as_deref_mut() {
                        ag[t * akw + g * d_k + i] += aacc;
                    }
                }
            }
        }
    }
}

/// Run the KDA recurrence over a packed sequence for all heads.
///
/// `q`: [T, n_q·d_k], `k`: [T, n_kv·d_k], `v`: [T, n_kv·d_v],
/// `alpha`: [T, n_kv·d_k] in (0,1), `beta`: [T, n_kv] in (0,1);
/// returns o: [T, n_q·d_v]. State starts at zero and resets at each
/// segment start.
pub fn kda_scan<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    alpha: &Tensor<F>,
    beta: &Tensor<F>,
    segs: &[usize],
    dims: ScanDims,
    mode: ScanMode,
) -> Result<Tensor<F>> {
    let share = dims.check("kda_scan")?;
    let (t_len, qw) = q.dims2("kda_scan")?;
    check_segs("kda_scan", segs, t_len)?;
    let expect = [
        (qw, dims.n_q * dims.d_k, "q"),
        (k.dims2("kda_scan")?.1, dims.n_kv * dims.d_k, "k"),
        (v.dims2("kda_scan")?.1, dims.n_kv * dims.d_v, "v"),
        (alpha.dims2("kda_scan")?.1, dims.n_kv * dims.d_k, "alpha"),
        (beta.dims2("kda_scan")?.1, dims.n_kv, "beta"),
    ];
    for (got, want, name) in expect {
        if got != want {
            return Err(TensorError::Contract {
                op: "kda_scan",
                detail: format!("{name} width {got}, expected {want}"),
            });
        }
    }
    for other in [k, v, alpha, beta] {
        if other.dims2("kda_scan")?.0 != t_len {
            return Err(TensorError::Contract {
                op: "kda_scan",
                detail: "inputs disagree on sequence length".into(),
            });
        }
    }
    if let ScanMode::Chunked(c) = mode {
        if c == 0 {
            return Err(TensorError::Contract {
                op: "kda_scan",
                detail: "chunk size must be at least 1".into(),
            });
        }
    }

    let view = ScanView {
        q: q.data(),
        k: k.data(),
        v: v.data(),
        alpha: alpha.data(),
        beta: beta.data(),
        dims,
        share,
    };
    let mut out = vec![F::ZERO; t_len * dims.n_q * dims.d_v];
    match mode {
        ScanMode::Sequential => forward_sequential(&view, segs, t_len, &mut out),
        ScanMode::Chunked(c) => forward_chunked(&view, segs, t_len, c, &mut out),
    }
    let out = Tensor::from_vec(out, &[t_len, dims.n_q * dims.d_v])?;
    if !out.is_all_finite() {
        return Err(TensorError::NonFinite { op: "kda_scan" });
    }

    let Some(tape) = common_tape("kda_scan", &[q, k, v, alpha, beta])? else {
        return Ok(out);
    };
    let ids = [q.node_id(), k.node_id(), v.node_id(), alpha.node_id(), beta.node_id()];
    let saved = (q.shared(), k.shared(), v.shared(), alpha.shared(), beta.shared());
    let segs_owned: Vec<usize> = segs.to_vec();
    let back = move |up: &[F], store: &mut GradStore<F>| {
        let view = ScanView {
            q: &saved.0,
            k: &saved.1,
            v: &saved.2,
            alpha: &saved.3,
            beta: &saved.4,
            dims,
            share,
        };
        // each tracked input gets its own scratch accumulator, written back
        // afterwards; inputs may alias the same slot only if the caller fed
        // the same tensor twice, which the layer never does
        let mut bufs: Vec<Option<Vec<F>>> = vec![None; 5];
        let lens = [
            saved.0.len(),
            saved.1.len(),
            saved.2.len(),
            saved.3.len(),
            saved.4.len(),
        ];
        for (slot, (&id, &len)) in bufs.iter_mut().zip(ids.iter().zip(&lens)) {
            if id.is_some() {
                *slot = Some(vec![F::ZERO; len]);
            }
        }
        {
            let mut split = bufs.iter_mut();
            let mut grads = ScanGrads {
                q: split.next().unwrap().as_deref_mut(),
                k: split.next().unwrap().as_deref_mut(),
                v: split.next().unwrap().as_deref_mut(),
                alpha: split.next().unwrap().as_deref_mut(),
                beta: split.next().unwrap().as_deref_mut(),
            };
            backward_scan(&view, &segs_owned, up.len() / (dims.n_q * dims.d_v), up, &mut grads);
        }
        for (buf, &id) in bufs.iter().zip(&ids) {
            if let (Some(buf), Some(id)) = (buf, id) {
                let slot = store.slot(id);
                for (g, &d) in slot.iter_mut().zip(buf) {
                    *g += d;
                }
            }
        }
    };
    let id = tape.push(out.len(), Some(Box::new(back)));
    Ok(out.with_node(tape, id))
}

fn additive_forward_sequential<F: Real>(
    view: &ScanView<F>,
    segs: &[usize],
    t_len: usize,
    out: &mut [F],
) {
    let ScanDims { d_k, d_v, n_kv, n_q } = view.dims;
    let ow = n_q * d_v;
    let mut s = vec![F::ZERO; d_k * d_v];
    for g in 0..n_kv {
        for (a, b) in seg_ranges(segs, t_len) {
            s.fill(F::ZERO);
            for t in a..b {
                let kt = view.k_at(t, g);
                let vt = view.v_at(t, g);
                for i in 0..d_k {
                    let ki = kt[i];
                    let row = &mut s[i * d_v..(i + 1) * d_v];
                    for (e, &vj) in row.iter_mut().zip(vt) {
                        *e += ki * vj;
                    }
                }
                for sub in 0..view.share {
                    let h = g * view.share + sub;
                    let q = view.q_at(t, h);
                    let orow = &mut out[t * ow + h * d_v..t * ow + (h + 1) * d_v];
                    for i in 0..d_k {
                        let qi = q[i];
                        let srow = &s[i * d_v..(i + 1) * d_v];
                        for (o, &e) in orow.iter_mut().zip(srow) {
                            *o += qi * e;
                        }
                    }
                }
            }
        }
    }
}

fn additive_forward_chunked<F: Real>(
    view: &ScanView<F>,
    segs: &[usize],
    t_len: usize,
    chunk: usize,
    out: &mut [F],
) {
    let ScanDims { d_k, d_v, n_kv, n_q } = view.dims;
    let ow = n_q * d_v;
    let share = view.share;
    let mut s = vec![F::ZERO; d_k * d_v];
    for g in 0..n_kv {
        for (a, b) in seg_ranges(segs, t_len) {
            s.fill(F::ZERO);
            let mut c0 = a;
            while c0 < b {
                let c = (b - c0).min(chunk);
                // o_t = S₀ᵀq_t + Σ_{i≤t} (k_iᵀq_t) v_i within the chunk
                for t in 0..c {
                    for sub in 0..share {
                        let h = g * share + sub;
                        let q = view.q_at(c0 + t, h);
                        let orow =
                            &mut out[(c0 + t) * ow + h * d_v..(c0 + t) * ow + (h + 1) * d_v];
                        for i in 0..d_k {
                            let qi = q[i];
                            let srow = &s[i * d_v..(i + 1) * d_v];
                            for (o, &e) in orow.iter_mut().zip(srow) {
                                *o += qi * e;
                            }
                        }
                        for i in 0..=t {
                            let ki = view.k_at(c0 + i, g);
                            let mut kq = F::ZERO;
                            for x in 0..d_k {
                                kq += ki[x] * q[x];
                            }
                            let vi = view.v_at(c0 + i, g);
                            for (o, &vj) in orow.iter_mut().zip(vi) {
                                *o += kq * vj;
                            }
                        }
                    }
                }
                for t in 0..c {
                    let kt = view.k_at(c0 + t, g);
                    let vt = view.v_at(c0 + t, g);
                    for i in 0..d_k {
                        let ki = kt[i];
                        let row = &mut s[i * d_v..(i + 1) * d_v];
                        for (e, &vj) in row.iter_mut().zip(vt) {
                            *e += ki * vj;
                        }
                    }
                }
                c0 += c;
            }
        }
    }
}

fn additive_backward<F: Real>(
    view: &ScanView<F>,
    segs: &[usize],
    t_len: usize,
    up: &[F],
    grads: &mut ScanGrads<F>,
) {
    let ScanDims { d_k, d_v, n_kv, n_q } = view.dims;
    let ow = n_q * d_v;
    let qw = n_q * d_k;
    let akw = n_kv * d_k;
    let vw = n_kv * d_v;
    let share = view.share;
    let slab = d_k * d_v;
    let mut sbar = vec![F::ZERO; slab];
    for g in 0..n_kv {
        for (a, b) in seg_ranges(segs, t_len) {
            let seg = b - a;
            let mut states = vec![F::ZERO; (seg + 1) * slab];
            for t in a..b {
                let l = t - a;
                let (prev, next) = states.split_at_mut((l + 1) * slab);
                let cur = &mut next[..slab];
                cur.copy_from_slice(&prev[l * slab..]);
                let kt = view.k_at(t, g);
                let vt = view.v_at(t, g);
                for i in 0..d_k {
                    let ki = kt[i];
                    let row = &mut cur[i * d_v..(i + 1) * d_v];
                    for (e, &vj) in row.iter_mut().zip(vt) {
                        *e += ki * vj;
                    }
                }
            }
            sbar.fill(F::ZERO);
            for t in (a..b).rev() {
                let l = t - a;
                let s_t = &states[(l + 1) * slab..(l + 2) * slab];
                for sub in 0..share {
                    let h = g * share + sub;
                    let ob = &up[t * ow + h * d_v..t * ow + (h + 1) * d_v];
                    let qv = view.q_at(t, h);
                    if let Some(qg) = grads.q.as_deref_mut() {
                        let qrow = &mut qg[t * qw + h * d_k..t * qw + (h + 1) * d_k];
                        for i in 0..d_k {
                            let srow = &s_t[i * d_v..(i + 1) * d_v];
                            let mut acc = F::ZERO;
                            for j in 0..d_v {
                                acc += srow[j] * ob[j];
                            }
                            qrow[i] += acc;
                        }
                    }
                    for i in 0..d_k {
                        let qi = qv[i];
                        let row = &mut sbar[i * d_v..(i + 1) * d_v];
                        for j in 0..d_v {
                            row[j] += qi * ob[j];
                        }
                    }
                }
                // S_t = S_{t−1} + k_t v_tᵀ: k̄ = S̄v, v̄ = S̄ᵀk, S̄ unchanged
                let kv = view.k_at(t, g);
                let vv = view.v_at(t, g);
                if let Some(kg) = grads.k.as_deref_mut() {
                    let krow = &mut kg[t * akw + g * d_k..t * akw + (g + 1) * d_k];
                    for i in 0..d_k {
                        let sb = &sbar[i * d_v..(i + 1) * d_v];
                        let mut acc = F::ZERO;
                        for j in 0..d_v {
                            acc += sb[j] * vv[j];
                        }
                        krow[i] += acc;
                    }
                }
                if let Some(vg) = grads.v.as_deref_mut() {
                    let vrow = &mut vg[t * vw + g * d_v..t * vw + (g + 1) * d_v];
                    for i in 0..d_k {
                        let ki = kv[i];
                        let sb = &sbar[i * d_v..(i + 1) * d_v];
                        for j in 0..d_v {
                            vrow[j] += ki * sb[j];
                        }
                    }
                }
            }
        }
    }
}

/// Vanilla linear attention over a packed sequence: S_t = S_{t−1} + k_t v_tᵀ,
/// o_t = S_tᵀ q_t. Same head layout and segment semantics as [`kda_scan`];
/// no decay and no removal term, so there is nothing to gate.
pub fn additive_scan<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    segs: &[usize],
    dims: ScanDims,
    mode: ScanMode,
) -> Result<Tensor<F>> {
    let share = dims.check("additive_scan")?;
    let (t_len, qw) = q.dims2("additive_scan")?;
    check_segs("additive_scan", segs, t_len)?;
    let expect = [
        (qw, dims.n_q * dims.d_k, "q"),
        (k.dims2("additive_scan")?.1, dims.n_kv * dims.d_k, "k"),
        (v.dims2("additive_scan")?.1, dims.n_kv * dims.d_v, "v"),
    ];
    for (got, want, name) in expect {
        if got != want {
            return Err(TensorError::Contract {
                op: "additive_scan",
                detail: format!("{name} width {got}, expected {want}"),
            });
        }
    }
    for other in [k, v] {
        if other.dims2("additive_scan")?.0 != t_len {
            return Err(TensorError::Contract {
                op: "additive_scan",
                detail: "inputs disagree on sequence length".into(),
            });
        }
    }
    if let ScanMode::Chunked(c) = mode {
        if c == 0 {
            return Err(TensorError::Contract {
                op: "additive_scan",
                detail: "chunk size must be at least 1".into(),
            });
        }
    }

    let empty: [F; 0] = [];
    let view = ScanView {
        q: q.data(),
        k: k.data(),
        v: v.data(),
        alpha: &empty,
        beta: &empty,
        dims,
        share,
    };
    let mut out = vec![F::ZERO; t_len * dims.n_q * dims.d_v];
    match mode {
        ScanMode::Sequential => additive_forward_sequential(&view, segs, t_len, &mut out),
        ScanMode::Chunked(c) => additive_forward_chunked(&view, segs, t_len, c, &mut out),
    }
    let out = Tensor::from_vec(out, &[t_len, dims.n_q * dims.d_v])?;
    if !out.is_all_finite() {
        return Err(TensorError::NonFinite { op: "additive_scan" });
    }

    let Some(tape) = common_tape("additive_scan", &[q, k, v])? else {
        return Ok(out);
    };
    let ids = [q.node_id(), k.node_id(), v.node_id()];
    let saved = (q.shared(), k.shared(), v.shared());
    let segs_owned: Vec<usize> = segs.to_vec();
    let back = move |up: &[F], store: &mut GradStore<F>| {
        let empty: [F; 0] = [];
        let view = ScanView {
            q: &saved.0,
            k: &saved.1,
            v: &saved.2,
            alpha: &empty,
            beta: &empty,
            dims,
            share,
        };
        let mut bufs: Vec<Option<Vec<F>>> = vec![None; 3];
        let lens = [saved.0.len(), saved.1.len(), saved.2.len()];
        for (slot, (&id, &len)) in bufs.iter_mut().zip(ids.iter().zip(&lens)) {
            if id.is_some() {
                *slot = Some(vec![F::ZERO; len]);
            }
        }
        {
            let mut split = bufs.iter_mut();
            let mut grads = ScanGrads {
                q: split.next().unwrap().as_deref_mut(),
                k: split.next().unwrap().as_deref_mut(),
                v: split.next().unwrap().as_deref_mut(),
                alpha: None,
                beta: None,
            };
            additive_backward(&view, &segs_owned, up.len() / (dims.n_q * dims.d_v), up, &mut grads);
        }
        for (buf, &id) in bufs.iter().zip(&ids) {
            if let (Some(buf), Some(id)) = (buf, id) {
                let slot = store.slot(id);
                for (g, &d) in slot.iter_mut().zip(buf) {
                    *g += d;
                }
            }
        }
    };
    let id = tape.push(out.len(), Some(Box::new(back)));
    Ok(out.with_node(tape, id))
}
