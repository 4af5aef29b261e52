//! Causal softmax attention with GQA, RoPE, and per-head QK RMSNorm.

use crate::mixers::rope::{rope, segment_positions};
use crate::mixers::{check_segs, seg_ranges};
use crate::tensor::ops::concat_cols;
use crate::tensor::{Real, Result, Tensor, TensorError};
use crate::util::Rng64;

/// One attention layer. Norm weights are per-head-dim vectors shared across
/// heads (Qwen-style QK norm, applied before RoPE). `window` optionally
/// limits each query to the last `window` keys of its document — None means
/// full causal attention.
#[derive(Debug, Clone)]
pub struct AttnLayer<F: Real> {
    pub w_q: Tensor<F>,    // [d_model, n_q·d_head]
    pub w_k: Tensor<F>,    // [d_model, n_kv·d_head]
    pub w_v: Tensor<F>,    // [d_model, n_kv·d_head]
    pub w_o: Tensor<F>,    // [n_q·d_head, d_model]
    pub q_norm: Tensor<F>, // [d_head]
    pub k_norm: Tensor<F>, // [d_head]
    pub rope_theta: f64,
    pub n_q: usize,
    pub n_kv: usize,
    pub d_head: usize,
    pub window: Option<usize>,
}

impl<F: Real> AttnLayer<F> {
    pub fn fresh(
        d_model: usize,
        n_q: usize,
        n_kv: usize,
        d_head: usize,
        rope_theta: f64,
        rng: &mut Rng64,
    ) -> Self {
        let init = |rng: &mut Rng64, rows: usize, cols: usize| {
            Tensor::from_vec(
                (0..rows * cols).map(|_| F::from_f64(rng.normal() * 0.02)).collect(),
                &[rows, cols],
            )
            .expect("consistent shape")
        };
        AttnLayer {
            w_q: init(rng, d_model, n_q * d_head),
            w_k: init(rng, d_model, n_kv * d_head),
            w_v: init(rng, d_model, n_kv * d_head),
            w_o: init(rng, n_q * d_head, d_model),
            q_norm: Tensor::from_vec(vec![F::ONE; d_head], &[d_head]).expect("shape"),
            k_norm: Tensor::from_vec(vec![F::ONE; d_head], &[d_head]).expect("shape"),
            rope_theta,
            n_q,
            n_kv,
            d_head,
            window: None,
        }
    }

    /// Additive mask: 0 where query t may attend key i (same document, i ≤ t,
    /// within the window), −1e30 elsewhere.
    fn build_mask(&self, segs: &[usize], t_len: usize) -> Tensor<F> {
        let neg = F::from_f64(-1e30);
        let mut m = vec![neg; t_len * t_len];
        for (a, b) in seg_ranges(segs, t_len) {
            for t in a..b {
                let lo = match self.window {
                    Some(w) => t.saturating_sub(w - 1).max(a),
                    None => a,
                };
                for i in lo..=t {
                    m[t * t_len + i] = F::ZERO;
                }
            }
        }
        Tensor::from_vec(m, &[t_len, t_len]).expect("consistent shape")
    }

    pub fn forward(&self, x: &Tensor<F>, segs: &[usize]) -> Result<Tensor<F>> {
        let (t_len, _) = x.dims2("attention")?;
        check_segs("attention", segs, t_len)?;
        if self.n_kv == 0 || self.n_q % self.n_kv != 0 {
            return Err(TensorError::Contract {
                op: "attention",
                detail: format!("{} query heads not a multiple of {} kv heads", self.n_q, self.n_kv),
            });
        }
        let share = self.n_q / self.n_kv;
        let d = self.d_head;
        let positions = segment_positions(segs, t_len);
        let mask = self.build_mask(segs, t_len);
        let scale = F::from_f64(1.0 / (d as f64).sqrt());

        let q_all = x.matmul(&self.w_q)?;
        let k_all = x.matmul(&self.w_k)?;
        let v_all = x.matmul(&self.w_v)?;
        let eps = F::from_f64(1e-6);

        // per-KV-head attention, each serving `share` query heads
        let mut head_outs: Vec<Tensor<F>> = Vec::with_capacity(self.n_q);
        for g in 0..self.n_kv {
            let k = k_all.slice_cols(g * d, d)?.rmsnorm_groups(&self.k_norm, d, eps)?;
            let k = rope(&k, &positions, self.rope_theta)?;
            let v = v_all.slice_cols(g * d, d)?;
            for sub in 0..share {
                let h = g * share + sub;
                let q = q_all.slice_cols(h * d, d)?.rmsnorm_groups(&self.q_norm, d, eps)?;
                let q = rope(&q, &positions, self.rope_theta)?;
                let scores = q.matmul_nt(&k)?.scale(scale)?.add(&mask)?;
                let probs = scores.softmax(F::ONE)?;
                head_outs.push(probs.matmul(&v)?);
            }
        }
        let refs: Vec<&Tensor<F>> = head_outs.iter().collect();
        let o = concat_cols(&refs)?;
        let y = o.matmul(&self.w_o)?;
        if !y.is_all_finite() {
            return Err(TensorError::NonFinite { op: "attention output" });
        }
        Ok(y)
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&str, &'a Tensor<F>)) {
        f("w_q", &self.w_q);
        f("w_k", &self.w_k);
        f("w_v", &self.w_v);
        f("w_o", &self.w_o);
        f("q_norm", &self.q_norm);
        f("k_norm", &self.k_norm);
    }

    pub fn map(&self, f: &mut impl FnMut(&str, &Tensor<F>) -> Tensor<F>) -> Self {
        AttnLayer {
            w_q: f("w_q", &self.w_q),
            w_k: f("w_k", &self.w_k),
            w_v: f("w_v", &self.w_v),
            w_o: f("w_o", &self.w_o),
            q_norm: f("q_norm", &self.q_norm),
            k_norm: f("k_norm", &self.k_norm),
            rope_theta: self.rope_theta,
            n_q: self.n_q,
            n_kv: self.n_kv,
            d_head: self.d_head,
            window: self.window,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_layer(rng: &mut Rng64, d_model: usize, n_q: usize, n_kv: usize, d: usize) -> AttnLayer<f64> {
        let mut layer = AttnLayer::fresh(d_model, n_q, n_kv, d, 1e4, rng);
        layer = layer.map(&mut |_, t| {
            Tensor::from_vec(t.data().iter().map(|_| rng.normal() * 0.4).collect(), t.shape())
                .unwrap()
        });
        layer
    }

    #[test]
    fn single_token_attends_only_to_itself() {
        let mut rng = Rng64::seed_from(41);
        let layer = dense_layer(&mut rng, 6, 2, 1, 4);
        let x = Tensor::from_vec((0..6).map(|_| rng.normal()).collect(), &[1, 6]).unwrap();
        let y = layer.forward(&x, &[0]).unwrap();
        // with one key the softmax weight is 1: output = concat_h(v) · W_o
        let v = x.matmul(&layer.w_v).unwrap();
        let o = concat_cols(&[&v, &v]).unwrap(); // both query heads share kv head 0
        let want = o.matmul(&layer.w_o).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_document_mask_isolates_documents() {
        let mut rng = Rng64::seed_from(42);
        let layer = dense_layer(&mut rng, 6, 2, 2, 4);
        let t_len = 9;
        let a: Vec<f64> = (0..t_len * 6).map(|_| rng.normal()).collect();
        let mut b = a.clone();
        for v in b[..5 * 6].iter_mut() {
            *v = rng.normal();
        }
        let segs = [0usize, 5];
        let ya = layer.forward(&Tensor::from_vec(a, &[t_len, 6]).unwrap(), &segs).unwrap();
        let yb = layer.forward(&Tensor::from_vec(b, &[t_len, 6]).unwrap(), &segs).unwrap();
        assert_eq!(&ya.data()[5 * 6..], &yb.data()[5 * 6..]);
    }

    #[test]
    fn window_limits_the_receptive_field() {
        let mut rng = Rng64::seed_from(43);
        let mut layer = dense_layer(&mut rng, 6, 2, 1, 4);
        layer.window = Some(2);
        let t_len = 8;
        let a: Vec<f64> = (0..t_len * 6).map(|_| rng.normal()).collect();
        // perturb tokens more than 2 positions before the last one
        let mut b = a.clone();
        for v in b[..5 * 6].iter_mut() {
            *v = rng.normal();
        }
        let ya = layer.forward(&Tensor::from_vec(a, &[t_len, 6]).unwrap(), &[0]).unwrap();
        let yb = layer.forward(&Tensor::from_vec(b, &[t_len, 6]).unwrap(), &[0]).unwrap();
        // token 7 sees keys 6..=7 only, both unperturbed
        assert_eq!(&ya.data()[7 * 6..], &yb.data()[7 * 6..]);
    }
}
