//! Per-token reference steps for the four linear recurrences.
//!
//! These work on one head's state at a time, stored row-major as
//! `s[d_k * d_v]` with `s[i*d_v + j] = S[i][j]`. They are the semantic
//! ground truth the sequence-level scan is tested against, and the numeric
//! path used by the decode-time inference session.

use crate::tensor::{Real, Result, TensorError};

/// Matrix-valued recurrent memory, one S ∈ R^{d_k×d_v} slab per head.
#[derive(Debug, Clone)]
pub struct RecurrentState<F> {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    s: Vec<F>,
}

impl<F: Real> RecurrentState<F> {
    pub fn zeros(heads: usize, d_k: usize, d_v: usize) -> Self {
        RecurrentState {
            heads,
            d_k,
            d_v,
            s: vec![F::ZERO; heads * d_k * d_v],
        }
    }

    pub fn head(&self, h: usize) -> &[F] {
        let n = self.d_k * self.d_v;
        &self.s[h * n..(h + 1) * n]
    }

    pub fn head_mut(&mut self, h: usize) -> &mut [F] {
        let n = self.d_k * self.d_v;
        &mut self.s[h * n..(h + 1) * n]
    }

    /// Reset every head to zero (document boundary).
    pub fn reset(&mut self) {
        self.s.fill(F::ZERO);
    }

    pub fn is_finite(&self) -> bool {
        self.s.iter().all(|v| v.is_finite())
    }

    /// Bytes this state would occupy at the given element width; the
    /// profiler's "constant memory during decode" number.
    pub fn byte_size(&self, elem_bytes: usize) -> usize {
        self.s.len() * elem_bytes
    }
}

fn check_dims<F>(op: &'static str, s: &[F], d_k: usize, d_v: usize, k: &[F], v: &[F], q: &[F]) -> Result<()> {
    if s.len() != d_k * d_v || k.len() != d_k || q.len() != d_k || v.len() != d_v {
        return Err(TensorError::Contract {
            op,
            detail: format!(
                "state {} for d_k {d_k} d_v {d_v}, k {}, v {}, q {}",
                s.len(),
                k.len(),
                v.len(),
                q.len()
            ),
        });
    }
    Ok(())
}

fn readout<F: Real>(s: &[F], d_k: usize, d_v: usize, q: &[F], o: &mut [F]) {
    o.fill(F::ZERO);
    for i in 0..d_k {
        let qi = q[i];
        let row = &s[i * d_v..(i + 1) * d_v];
        for j in 0..d_v {
            o[j] += qi * row[j];
        }
    }
}

/// Eq-1 step: S ← S + k vᵀ, o = Sᵀ q. No forgetting — writes accumulate.
pub fn linear_attention_step<F: Real>(
    s: &mut [F],
    d_k: usize,
    d_v: usize,
    k: &[F],
    v: &[F],
    q: &[F],
    o: &mut [F],
) -> Result<()> {
    check_dims("linear_attention_step", s, d_k, d_v, k, v, q)?;
    for i in 0..d_k {
        let ki = k[i];
        let row = &mut s[i * d_v..(i + 1) * d_v];
        for j in 0..d_v {
            row[j] += ki * v[j];
        }
    }
    readout(s, d_k, d_v, q, o);
    Ok(())
}

/// Eq-2 step: S ← (I − β k kᵀ) S + β k vᵀ. With unit k and β=1 this replaces
/// the value stored under k exactly.
pub fn delta_rule_step<F: Real>(
    s: &mut [F],
    d_k: usize,
    d_v: usize,
    k: &[F],
    v: &[F],
    q: &[F],
    beta: F,
    o: &mut [F],
) -> Result<()> {
    check_dims("delta_rule_step", s, d_k, d_v, k, v, q)?;
    // kᵀS, the value currently stored under key k
    let mut ks = vec![F::ZERO; d_v];
    for i in 0..d_k {
        let ki = k[i];
        let row = &s[i * d_v..(i + 1) * d_v];
        for j in 0..d_v {
            ks[j] += ki * row[j];
        }
    }
    // rank-1 correction toward v
    for i in 0..d_k {
        let bki = beta * k[i];
        let row = &mut s[i * d_v..(i + 1) * d_v];
        for j in 0..d_v {
            row[j] += bki * (v[j] - ks[j]);
        }
    }
    readout(s, d_k, d_v, q, o);
    Ok(())
}

/// Eq-3 step: S ← α (I − β k kᵀ) S + β k vᵀ — scalar decay then delta update.
pub fn gdn_step<F: Real>(
    s: &mut [F],
    d_k: usize,
    d_v: usize,
    k: &[F],
    v: &[F],
    q: &[F],
    beta: F,
    alpha: F,
    o: &mut [F],
) -> Result<()> {
    check_dims("gdn_step", s, d_k, d_v, k, v, q)?;
    // α commutes with the projection, so decay first then reuse the delta step
    for e in s.iter_mut() {
        *e *= alpha;
    }
    delta_rule_step(s, d_k, d_v, k, v, q, beta, o)
}

/// Eq-4 step: S ← (I − β k kᵀ) Diag(α) S + β k vᵀ — per-channel decay of the
/// key dimension, applied before the delta projection (literal equation
/// order).
pub fn kda_step<F: Real>(
    s: &mut [F],
    d_k: usize,
    d_v: usize,
    k: &[F],
    v: &[F],
    q: &[F],
    beta: F,
    alpha: &[F],
    o: &mut [F],
) -> Result<()> {
    check_dims("kda_step", s, d_k, d_v, k, v, q)?;
    if alpha.len() != d_k {
        return Err(TensorError::Contract {
            op: "kda_step",
            detail: format!("alpha length {} != d_k {d_k}", alpha.len()),
        });
    }
    for i in 0..d_k {
        let a = alpha[i];
        let row = &mut s[i * d_v..(i + 1) * d_v];
        for e in row.iter_mut() {
            *e *= a;
        }
    }
    delta_rule_step(s, d_k, d_v, k, v, q, beta, o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_write_single_read() {
        let mut s = vec![0.0f64; 4];
        let mut o = vec![0.0f64; 2];
        linear_attention_step(&mut s, 2, 2, &[1.0, 0.0], &[2.0, 3.0], &[1.0, 0.0], &mut o)
            .unwrap();
        assert_eq!(o, vec![2.0, 3.0]);
    }

    #[test]
    fn linear_attention_accumulates() {
        // same key twice: readout is v1 + v2 (no forgetting)
        let mut s = vec![0.0f64; 4];
        let mut o = vec![0.0f64; 2];
        let k = [0.0, 1.0];
        linear_attention_step(&mut s, 2, 2, &k, &[1.0, -1.0], &k, &mut o).unwrap();
        linear_attention_step(&mut s, 2, 2, &k, &[0.5, 2.0], &k, &mut o).unwrap();
        assert_eq!(o, vec![1.5, 1.0]);
    }

    #[test]
    fn delta_rule_overwrites_at_beta_one() {
        let mut s = vec![0.0f64; 6];
        let mut o = vec![0.0f64; 3];
        let k = [0.6, 0.8]; // unit norm
        delta_rule_step(&mut s, 2, 3, &k, &[1.0, 2.0, 3.0], &k, 1.0, &mut o).unwrap();
        delta_rule_step(&mut s, 2, 3, &k, &[-7.0, 0.5, 4.0], &k, 1.0, &mut o).unwrap();
        for (got, want) in o.iter().zip(&[-7.0, 0.5, 4.0]) {
            assert!((got - want).abs() < 1e-12, "overwrite must be exact");
        }
    }

    #[test]
    fn delta_rule_beta_zero_is_identity_on_state() {
        let mut s = vec![1.0f64, 2.0, 3.0, 4.0];
        let before = s.clone();
        let mut o = vec![0.0f64; 2];
        delta_rule_step(&mut s, 2, 2, &[0.3, 0.7], &[5.0, 6.0], &[1.0, 1.0], 0.0, &mut o)
            .unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn gdn_alpha_zero_wipes_memory() {
        let mut s = vec![9.0f64, -3.0, 4.0, 7.0];
        let mut o = vec![0.0f64; 2];
        let (k, v) = ([1.0, 0.0], [2.0, 5.0]);
        gdn_step(&mut s, 2, 2, &k, &v, &k, 0.5, 0.0, &mut o).unwrap();
        // S' = β k vᵀ regardless of the prior state
        assert_eq!(s, vec![1.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn kda_zero_state_write() {
        let mut s = vec![0.0f64; 4];
        let mut o = vec![0.0f64; 2];
        kda_step(&mut s, 2, 2, &[1.0, 0.0], &[2.0, 3.0], &[1.0, 0.0], 1.0, &[0.3, 0.9], &mut o)
            .unwrap();
        assert_eq!(s, vec![2.0, 3.0, 0.0, 0.0]);
        assert_eq!(o, vec![2.0, 3.0]);
    }

    #[test]
    fn state_heads_are_independent() {
        let mut st = RecurrentState::<f64>::zeros(2, 2, 2);
        let mut o = vec![0.0f64; 2];
        let (k, v) = ([1.0, 0.0], [4.0, 5.0]);
        linear_attention_step(st.head_mut(0), 2, 2, &k, &v, &k, &mut o).unwrap();
        assert!(st.head(1).iter().all(|&x| x == 0.0));
        assert!(st.is_finite());
        assert_eq!(st.byte_size(4), 2 * 2 * 2 * 4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = vec![0.0f64; 4];
        let mut o = vec![0.0f64; 2];
        let err = linear_attention_step(&mut s, 2, 2, &[1.0], &[1.0, 1.0], &[1.0, 1.0], &mut o);
        assert!(err.is_err());
    }
}
