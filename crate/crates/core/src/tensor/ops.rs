//! Tensor operations and their backward rules.
//!
//! Shape conventions: matrices are `[rows, cols]` row-major; rank-1 tensors
//! act as a single row where a matrix is expected. Row-structured ops
//! (softmax, norms) work on the last axis. Group variants (`rmsnorm_groups`,
//! `l2_normalize_groups`) treat each row as consecutive groups of `group`
//! elements — per-head norms use `group = head_dim`, the plain layer norm uses
//! `group = row width`.

use std::sync::Arc;

use super::tape::{common_tape, GradStore};
use super::{Real, Result, Tensor, TensorError};

// ---------------------------------------------------------------------------
// raw matmul kernels (shared by forward and backward paths)
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] @ b[k,n]
pub fn mm_nn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]ᵀ
pub fn mm_nt_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::ZERO;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ @ b[m,n]
pub fn mm_tn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers for the elementwise family
// ---------------------------------------------------------------------------

enum Pairing {
    Same,
    ScalarLhs,
    ScalarRhs,
}

fn pair_shapes<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<Pairing> {
    if a.shape() == b.shape() {
        Ok(Pairing::Same)
    } else if a.len() == 1 {
        Ok(Pairing::ScalarLhs)
    } else if b.len() == 1 {
        Ok(Pairing::ScalarRhs)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

impl<F: Real> Tensor<F> {
    // -- binary elementwise ------------------------------------------------

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let pairing = pair_shapes("add", self, other)?;
        let (data, shape): (Vec<F>, Vec<usize>) = match pairing {
            Pairing::Same => (
                self.data()
                    .iter()
                    .zip(other.data())
                    .map(|(&x, &y)| x + y)
                    .collect(),
                self.shape().to_vec(),
            ),
            Pairing::ScalarLhs => {
                let s = self.data()[0];
                (
                    other.data().iter().map(|&y| s + y).collect(),
                    other.shape().to_vec(),
                )
            }
            Pairing::ScalarRhs => {
                let s = other.data()[0];
                (
                    self.data().iter().map(|&x| x + s).collect(),
                    self.shape().to_vec(),
                )
            }
        };
        let out = Tensor::from_vec(data, &shape)?;
        let Some(tape) = common_tape("add", &[self, other])? else {
            return Ok(out);
        };
        let a_id = self.node_id();
        let b_id = other.node_id();
        let a_scalar = self.len() == 1;
        let b_scalar = other.len() == 1;
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ia) = a_id {
                let slot = store.slot(ia);
                if a_scalar && up.len() > 1 {
                    let mut acc = F::ZERO;
                    for &u in up {
                        acc += u;
                    }
                    slot[0] += acc;
                } else {
                    for (g, &u) in slot.iter_mut().zip(up) {
                        *g += u;
                    }
                }
            }
            if let Some(ib) = b_id {
                let slot = store.slot(ib);
                if b_scalar && up.len() > 1 {
                    let mut acc = F::ZERO;
                    for &u in up {
                        acc += u;
                    }
                    slot[0] += acc;
                } else {
                    for (g, &u) in slot.iter_mut().zip(up) {
                        *g += u;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.add(&other.neg()?)
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let pairing = pair_shapes("mul", self, other)?;
        let (data, shape): (Vec<F>, Vec<usize>) = match pairing {
            Pairing::Same => (
                self.data()
                    .iter()
                    .zip(other.data())
                    .map(|(&x, &y)| x * y)
                    .collect(),
                self.shape().to_vec(),
            ),
            Pairing::ScalarLhs => {
                let s = self.data()[0];
                (
                    other.data().iter().map(|&y| s * y).collect(),
                    other.shape().to_vec(),
                )
            }
            Pairing::ScalarRhs => {
                let s = other.data()[0];
                (
                    self.data().iter().map(|&x| x * s).collect(),
                    self.shape().to_vec(),
                )
            }
        };
        let out = Tensor::from_vec(data, &shape)?;
        let Some(tape) = common_tape("mul", &[self, other])? else {
            return Ok(out);
        };
        let a_id = self.node_id();
        let b_id = other.node_id();
        let a_data = self.shared();
        let b_data = other.shared();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ia) = a_id {
                let slot = store.slot(ia);
                if a_data.len() == 1 && up.len() > 1 {
                    let mut acc = F::ZERO;
                    for (&u, &y) in up.iter().zip(b_data.iter()) {
                        acc += u * y;
                    }
                    slot[0] += acc;
                } else if b_data.len() == 1 {
                    let s = b_data[0];
                    for (g, &u) in slot.iter_mut().zip(up) {
                        *g += u * s;
                    }
                } else {
                    for ((g, &u), &y) in slot.iter_mut().zip(up).zip(b_data.iter()) {
                        *g += u * y;
                    }
                }
            }
            if let Some(ib) = b_id {
                let slot = store.slot(ib);
                if b_data.len() == 1 && up.len() > 1 {
                    let mut acc = F::ZERO;
                    for (&u, &x) in up.iter().zip(a_data.iter()) {
                        acc += u * x;
                    }
                    slot[0] += acc;
                } else if a_data.len() == 1 {
                    let s = a_data[0];
                    for (g, &u) in slot.iter_mut().zip(up) {
                        *g += u * s;
                    }
                } else {
                    for ((g, &u), &x) in slot.iter_mut().zip(up).zip(a_data.iter()) {
                        *g += u * x;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    // -- unary elementwise -------------------------------------------------

    pub fn neg(&self) -> Result<Tensor<F>> {
        let data: Vec<F> = self.data().iter().map(|&x| -x).collect();
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("neg", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for (g, &u) in slot.iter_mut().zip(up) {
                    *g += -u;
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    pub fn scale(&self, c: F) -> Result<Tensor<F>> {
        let data: Vec<F> = self.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("scale", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for (g, &u) in slot.iter_mut().zip(up) {
                    *g += u * c;
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    pub fn add_scalar(&self, c: F) -> Result<Tensor<F>> {
        self.add(&Tensor::scalar(c))
    }

    pub fn exp(&self) -> Result<Tensor<F>> {
        let data: Vec<F> = self.data().iter().map(|&x| x.exp()).collect();
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("exp", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let y_data = out.shared();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for ((g, &u), &y) in slot.iter_mut().zip(up).zip(y_data.iter()) {
                    *g += u * y;
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    pub fn ln(&self) -> Result<Tensor<F>> {
        if let Some(bad) = self.data().iter().find(|x| **x <= F::ZERO) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("log of non-positive value {bad:?}"),
            });
        }
        let data: Vec<F> = self.data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("log", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let x_data = self.shared();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for ((g, &u), &x) in slot.iter_mut().zip(up).zip(x_data.iter()) {
                    *g += u / x;
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    pub fn sigmoid(&self) -> Result<Tensor<F>> {
        let data: Vec<F> = self.data().iter().map(|&x| x.sigmoid()).collect();
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("sigmoid", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let y_data = out.shared();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for ((g, &u), &y) in slot.iter_mut().zip(up).zip(y_data.iter()) {
                    *g += u * y * (F::ONE - y);
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// silu(x) = x · sigmoid(x)
    pub fn silu(&self) -> Result<Tensor<F>> {
        let data: Vec<F> = self.data().iter().map(|&x| x * x.sigmoid()).collect();
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("silu", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let x_data = self.shared();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for ((g, &u), &x) in slot.iter_mut().zip(up).zip(x_data.iter()) {
                    let s = x.sigmoid();
                    *g += u * (s + x * s * (F::ONE - s));
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    // -- matmul family -----------------------------------------------------

    /// [m,k] @ [k,n] -> [m,n]
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut data = vec![F::ZERO; m * n];
        mm_nn_acc(self.data(), other.data(), m, k, n, &mut data);
        let out = Tensor::from_vec(data, &[m, n])?;
        let Some(tape) = common_tape("matmul", &[self, other])? else {
            return Ok(out);
        };
        let a_id = self.node_id();
        let b_id = other.node_id();
        let a_data = self.shared();
        let b_data = other.shared();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ia) = a_id {
                // dA = dC @ Bᵀ
                mm_nt_acc(up, &b_data, m, n, k, store.slot(ia));
            }
            if let Some(ib) = b_id {
                // dB = Aᵀ @ dC
                mm_tn_acc(&a_data, up, m, k, n, store.slot(ib));
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// [m,k] @ [n,k]ᵀ -> [m,n]. Saves the transpose copy that tied logits
    /// heads and attention scores would otherwise need.
    pub fn matmul_nt(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut data = vec![F::ZERO; m * n];
        mm_nt_acc(self.data(), other.data(), m, k, n, &mut data);
        let out = Tensor::from_vec(data, &[m, n])?;
        let Some(tape) = common_tape("matmul_nt", &[self, other])? else {
            return Ok(out);
        };
        let a_id = self.node_id();
        let b_id = other.node_id();
        let a_data = self.shared();
        let b_data = other.shared();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ia) = a_id {
                // dA = dC @ B
                mm_nn_acc(up, &b_data, m, n, k, store.slot(ia));
            }
            if let Some(ib) = b_id {
                // dB = dCᵀ @ A
                mm_tn_acc(up, &a_data, m, n, k, store.slot(ib));
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (m, n) = self.dims2("transpose")?;
        let src = self.data();
        let mut data = vec![F::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::from_vec(data, &[n, m])?;
        let Some(tape) = common_tape("transpose", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for j in 0..n {
                    for i in 0..m {
                        slot[i * n + j] += up[j * m + i];
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    // -- row-structured ops --------------------------------------------------

    /// Softmax over the last axis with temperature. Max-subtracted.
    pub fn softmax(&self, temperature: F) -> Result<Tensor<F>> {
        if temperature <= F::ZERO {
            return Err(TensorError::Domain {
                op: "softmax",
                detail: format!("temperature must be positive, got {temperature:?}"),
            });
        }
        let n = *self.shape().last().ok_or(TensorError::BadShape {
            op: "softmax",
            shape: vec![],
            detail: "rank-0 input".into(),
        })?;
        let rows = self.len() / n;
        let x = self.data();
        let mut data = vec![F::ZERO; self.len()];
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            let yr = &mut data[r * n..(r + 1) * n];
            let mut m = xr[0];
            for &v in xr.iter() {
                m = m.maxv(v);
            }
            let mut sum = F::ZERO;
            for (y, &v) in yr.iter_mut().zip(xr) {
                let e = ((v - m) / temperature).exp();
                *y = e;
                sum += e;
            }
            for y in yr.iter_mut() {
                *y = *y / sum;
            }
        }
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("softmax", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let y_data = out.shared();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for r in 0..rows {
                    let yr = &y_data[r * n..(r + 1) * n];
                    let ur = &up[r * n..(r + 1) * n];
                    let mut dot = F::ZERO;
                    for (&u, &y) in ur.iter().zip(yr) {
                        dot += u * y;
                    }
                    let gr = &mut slot[r * n..(r + 1) * n];
                    for ((g, &u), &y) in gr.iter_mut().zip(ur).zip(yr) {
                        *g += y * (u - dot) / temperature;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// log(softmax(x/τ)) over the last axis, computed stably.
    pub fn log_softmax(&self, temperature: F) -> Result<Tensor<F>> {
        if temperature <= F::ZERO {
            return Err(TensorError::Domain {
                op: "log_softmax",
                detail: format!("temperature must be positive, got {temperature:?}"),
            });
        }
        let n = *self.shape().last().ok_or(TensorError::BadShape {
            op: "log_softmax",
            shape: vec![],
            detail: "rank-0 input".into(),
        })?;
        let rows = self.len() / n;
        let x = self.data();
        let mut data = vec![F::ZERO; self.len()];
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            let yr = &mut data[r * n..(r + 1) * n];
            let mut m = xr[0];
            for &v in xr.iter() {
                m = m.maxv(v);
            }
            let mut sum = F::ZERO;
            for (y, &v) in yr.iter_mut().zip(xr) {
                let z = (v - m) / temperature;
                *y = z;
                sum += z.exp();
            }
            let lse = sum.ln();
            for y in yr.iter_mut() {
                *y = *y - lse;
            }
        }
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("log_softmax", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let z_data = out.shared();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for r in 0..rows {
                    let zr = &z_data[r * n..(r + 1) * n];
                    let ur = &up[r * n..(r + 1) * n];
                    let mut usum = F::ZERO;
                    for &u in ur {
                        usum += u;
                    }
                    let gr = &mut slot[r * n..(r + 1) * n];
                    for ((g, &u), &z) in gr.iter_mut().zip(ur).zip(zr) {
                        *g += (u - z.exp() * usum) / temperature;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// RMSNorm over groups of `group` elements per row; `weight` has length
    /// `group` and is shared across groups and rows:
    /// y = x · (mean(x²) + eps)^(-1/2) · w
    pub fn rmsnorm_groups(&self, weight: &Tensor<F>, group: usize, eps: F) -> Result<Tensor<F>> {
        if eps <= F::ZERO {
            return Err(TensorError::Domain {
                op: "rmsnorm",
                detail: "eps must be positive".into(),
            });
        }
        let d = *self.shape().last().unwrap_or(&0);
        if group == 0 || d % group != 0 || weight.len() != group {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let groups_total = self.len() / group;
        let x = self.data();
        let w = weight.data();
        let mut data = vec![F::ZERO; self.len()];
        let mut invs = vec![F::ZERO; groups_total];
        let gn = F::from_f64(group as f64);
        for gi in 0..groups_total {
            let xr = &x[gi * group..(gi + 1) * group];
            let mut ss = F::ZERO;
            for &v in xr {
                ss += v * v;
            }
            let inv = F::ONE / (ss / gn + eps).sqrt();
            invs[gi] = inv;
            let yr = &mut data[gi * group..(gi + 1) * group];
            for ((y, &v), &wv) in yr.iter_mut().zip(xr).zip(w) {
                *y = v * inv * wv;
            }
        }
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("rmsnorm", &[self, weight])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let w_id = weight.node_id();
        let x_data = self.shared();
        let w_data = weight.shared();
        let invs = Arc::new(invs);
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for gi in 0..groups_total {
                    let inv = invs[gi];
                    let xr = &x_data[gi * group..(gi + 1) * group];
                    let ur = &up[gi * group..(gi + 1) * group];
                    // g = up ⊙ w ; dx = inv·g − x · inv³/n · (g·x)
                    let mut gdotx = F::ZERO;
                    for ((&u, &wv), &xv) in ur.iter().zip(w_data.iter()).zip(xr) {
                        gdotx += u * wv * xv;
                    }
                    let coef = inv * inv * inv / gn * gdotx;
                    let gr = &mut slot[gi * group..(gi + 1) * group];
                    for ((g, (&u, &wv)), &xv) in
                        gr.iter_mut().zip(ur.iter().zip(w_data.iter())).zip(xr)
                    {
                        *g += inv * u * wv - xv * coef;
                    }
                }
            }
            if let Some(iw) = w_id {
                let slot = store.slot(iw);
                for gi in 0..groups_total {
                    let inv = invs[gi];
                    let xr = &x_data[gi * group..(gi + 1) * group];
                    let ur = &up[gi * group..(gi + 1) * group];
                    for ((g, &u), &xv) in slot.iter_mut().zip(ur).zip(xr) {
                        *g += u * xv * inv;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// Plain RMSNorm over the whole last axis.
    pub fn rmsnorm(&self, weight: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let d = *self.shape().last().unwrap_or(&0);
        self.rmsnorm_groups(weight, d, eps)
    }

    /// L2 normalization over groups of `group` elements per row, with the
    /// zero vector as a fixed point: y = x / sqrt(‖x‖² + 1e-12).
    pub fn l2_normalize_groups(&self, group: usize) -> Result<Tensor<F>> {
        let d = *self.shape().last().unwrap_or(&0);
        if group == 0 || d % group != 0 {
            return Err(TensorError::BadShape {
                op: "l2_normalize",
                shape: self.shape().to_vec(),
                detail: format!("last axis {d} not divisible by group {group}"),
            });
        }
        let eps = F::from_f64(1e-12);
        let groups_total = self.len() / group;
        let x = self.data();
        let mut data = vec![F::ZERO; self.len()];
        let mut invs = vec![F::ZERO; groups_total];
        for gi in 0..groups_total {
            let xr = &x[gi * group..(gi + 1) * group];
            let mut ss = F::ZERO;
            for &v in xr {
                ss += v * v;
            }
            let inv = F::ONE / (ss + eps).sqrt();
            invs[gi] = inv;
            let yr = &mut data[gi * group..(gi + 1) * group];
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = v * inv;
            }
        }
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("l2_normalize", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let x_data = self.shared();
        let invs = Arc::new(invs);
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for gi in 0..groups_total {
                    let inv = invs[gi];
                    let xr = &x_data[gi * group..(gi + 1) * group];
                    let ur = &up[gi * group..(gi + 1) * group];
                    let mut udotx = F::ZERO;
                    for (&u, &xv) in ur.iter().zip(xr) {
                        udotx += u * xv;
                    }
                    let coef = inv * inv * inv * udotx;
                    let gr = &mut slot[gi * group..(gi + 1) * group];
                    for ((g, &u), &xv) in gr.iter_mut().zip(ur).zip(xr) {
                        *g += inv * u - xv * coef;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// Whole-row L2 normalization.
    pub fn l2_normalize(&self) -> Result<Tensor<F>> {
        let d = *self.shape().last().unwrap_or(&0);
        self.l2_normalize_groups(d)
    }

    /// Add a [cols] bias to every row of a [rows, cols] tensor.
    pub fn add_bias(&self, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let (rows, cols) = self.dims2("add_bias")?;
        if bias.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for r in 0..rows {
            for (v, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *v += bv;
            }
        }
        let out = Tensor::from_vec(data, self.shape())?;
        let Some(tape) = common_tape("add_bias", &[self, bias])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let b_id = bias.node_id();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for (g, &u) in slot.iter_mut().zip(up) {
                    *g += u;
                }
            }
            if let Some(ib) = b_id {
                let slot = store.slot(ib);
                for r in 0..rows {
                    for (g, &u) in slot.iter_mut().zip(&up[r * cols..(r + 1) * cols]) {
                        *g += u;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    // -- gather / scatter family --------------------------------------------

    /// Row lookup: out[i] = table[ids[i]]. Ids are data, not differentiable.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor<F>> {
        let (v, d) = self.dims2("embed")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Domain {
                op: "embed",
                detail: format!("id {bad} out of vocabulary {v}"),
            });
        }
        let src = self.data();
        let mut data = vec![F::ZERO; ids.len() * d];
        for (t, &i) in ids.iter().enumerate() {
            data[t * d..(t + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(data, &[ids.len(), d])?;
        let Some(tape) = common_tape("embed", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let ids: Arc<Vec<usize>> = Arc::new(ids.to_vec());
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for (t, &i) in ids.iter().enumerate() {
                    for (g, &u) in slot[i * d..(i + 1) * d].iter_mut().zip(&up[t * d..(t + 1) * d])
                    {
                        *g += u;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// Select whole rows by index (duplicates allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<F>> {
        let (rows, cols) = self.dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                detail: format!("row {bad} out of range {rows}"),
            });
        }
        let src = self.data();
        let mut data = vec![F::ZERO; idx.len() * cols];
        for (t, &i) in idx.iter().enumerate() {
            data[t * cols..(t + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_vec(data, &[idx.len(), cols])?;
        let Some(tape) = common_tape("gather_rows", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let idx: Arc<Vec<usize>> = Arc::new(idx.to_vec());
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for (t, &i) in idx.iter().enumerate() {
                    for (g, &u) in slot[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&up[t * cols..(t + 1) * cols])
                    {
                        *g += u;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// One element per row: out[i] = x[i, cols[i]].
    pub fn pick_cols(&self, cols: &[usize]) -> Result<Tensor<F>> {
        let (rows, width) = self.dims2("pick_cols")?;
        if cols.len() != rows {
            return Err(TensorError::Contract {
                op: "pick_cols",
                detail: format!("{} indices for {} rows", cols.len(), rows),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(TensorError::Domain {
                op: "pick_cols",
                detail: format!("column {bad} out of range {width}"),
            });
        }
        let src = self.data();
        let data: Vec<F> = cols.iter().enumerate().map(|(i, &c)| src[i * width + c]).collect();
        let out = Tensor::from_vec(data, &[rows])?;
        let Some(tape) = common_tape("pick_cols", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let cols: Arc<Vec<usize>> = Arc::new(cols.to_vec());
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for (i, &c) in cols.iter().enumerate() {
                    slot[i * width + c] += up[i];
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// Repeat every column `times` times consecutively:
    /// out[r, c·times + m] = in[r, c], so [rows, cols] → [rows, cols·times].
    pub fn repeat_each_col(&self, times: usize) -> Result<Tensor<F>> {
        let (rows, cols) = self.dims2("repeat_each_col")?;
        if times == 0 {
            return Err(TensorError::Contract {
                op: "repeat_each_col",
                detail: "repeat count must be at least 1".into(),
            });
        }
        let src = self.data();
        let mut data = vec![F::ZERO; rows * cols * times];
        for r in 0..rows {
            for c in 0..cols {
                let v = src[r * cols + c];
                let at = (r * cols + c) * times;
                data[at..at + times].fill(v);
            }
        }
        let out = Tensor::from_vec(data, &[rows, cols * times])?;
        let Some(tape) = common_tape("repeat_each_col", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for r in 0..rows {
                    for c in 0..cols {
                        let at = (r * cols + c) * times;
                        let mut acc = F::ZERO;
                        for &u in &up[at..at + times] {
                            acc += u;
                        }
                        slot[r * cols + c] += acc;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    /// Columns [start, start+len) of every row.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<F>> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start + len > cols {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                shape: self.shape().to_vec(),
                detail: format!("slice {start}..{} out of {cols} columns", start + len),
            });
        }
        let src = self.data();
        let mut data = vec![F::ZERO; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::from_vec(data, &[rows, len])?;
        let Some(tape) = common_tape("slice_cols", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                for r in 0..rows {
                    for (g, &u) in slot[r * cols + start..r * cols + start + len]
                        .iter_mut()
                        .zip(&up[r * len..(r + 1) * len])
                    {
                        *g += u;
                    }
                }
            }
        };
        let id = tape.push(out.len(), Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    pub fn sum_all(&self) -> Result<Tensor<F>> {
        let mut acc = F::ZERO;
        for &v in self.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        let Some(tape) = common_tape("sum_all", &[self])? else {
            return Ok(out);
        };
        let x_id = self.node_id();
        let len = self.len();
        let back = move |up: &[F], store: &mut GradStore<F>| {
            if let Some(ix) = x_id {
                let slot = store.slot(ix);
                let u = up[0];
                for g in slot.iter_mut().take(len) {
                    *g += u;
                }
            }
        };
        let id = tape.push(1, Some(Box::new(back)));
        Ok(out.with_node(tape, id))
    }

    pub fn mean_all(&self) -> Result<Tensor<F>> {
        let n = self.len();
        if n == 0 {
            return Err(TensorError::Contract {
                op: "mean_all",
                detail: "empty tensor".into(),
            });
        }
        self.sum_all()?.scale(F::ONE / F::from_f64(n as f64))
    }
}

/// Concatenate along columns; all parts must have the same row count.
pub fn concat_cols<F: Real>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(TensorError::Contract {
            op: "concat_cols",
            detail: "no parts".into(),
        });
    }
    let (rows, _) = parts[0].dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0usize;
    for p in parts {
        let (r, c) = p.dims2("concat_cols")?;
        if r != rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(c);
        total += c;
    }
    let mut data = vec![F::ZERO; rows * total];
    let mut offset = 0usize;
    for (p, &w) in parts.iter().zip(&widths) {
        let src = p.data();
        for r in 0..rows {
            data[r * total + offset..r * total + offset + w]
                .copy_from_slice(&src[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    let out = Tensor::from_vec(data, &[rows, total])?;
    let Some(tape) = common_tape("concat_cols", &parts.to_vec())? else {
        return Ok(out);
    };
    let ids: Vec<Option<usize>> = parts.iter().map(|p| p.node_id()).collect();
    let widths_c = widths.clone();
    let back = move |up: &[F], store: &mut GradStore<F>| {
        let mut offset = 0usize;
        for (id, &w) in ids.iter().zip(&widths_c) {
            if let Some(ix) = *id {
                let slot = store.slot(ix);
                for r in 0..rows {
                    for (g, &u) in slot[r * w..(r + 1) * w]
                        .iter_mut()
                        .zip(&up[r * total + offset..r * total + offset + w])
                    {
                        *g += u;
                    }
                }
            }
            offset += w;
        }
    };
    let id = tape.push(out.len(), Some(Box::new(back)));
    Ok(out.with_node(tape, id))
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn matmul_identity() {
        let i3 = Tensor::<f64>::from_vec(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        )
        .unwrap();
        let x = Tensor::from_vec((0..9).map(|v| v as f64 * 0.7 - 2.0).collect(), &[3, 3]).unwrap();
        let y = i3.matmul(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let x = Tensor::from_vec((0..12).map(|v| v as f64).collect(), &[3, 4]).unwrap();
        let y = z.matmul(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 4]);
    }

    #[test]
    fn softmax_uniform_rows() {
        for c in [-3.0, 0.0, 11.5] {
            let x = Tensor::<f64>::from_vec(vec![c, c, c], &[3]).unwrap();
            let y = x.softmax(1.0).unwrap();
            for &v in y.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_two_logit_value() {
        let x = Tensor::<f64>::from_vec(vec![0.0, 3.0f64.ln()], &[2]).unwrap();
        let y = x.softmax(1.0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_high_temperature_flattens() {
        let x = Tensor::<f64>::from_vec(vec![0.0, 10.0], &[2]).unwrap();
        let y = x.softmax(1000.0).unwrap();
        assert!(y.data()[1] - y.data()[0] < 1e-2);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let x = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        let y = x.l2_normalize().unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-9);
        assert!((y.data()[1] - 0.8).abs() < 1e-9);
        // zero vector is a fixed point
        let z = Tensor::<f64>::zeros(&[2]).l2_normalize().unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert!((grads.get(&x).unwrap()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn repeat_each_col_forward_and_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap());
        let y = x.repeat_each_col(3).unwrap();
        assert_eq!(y.shape(), &[2, 6]);
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0, 4.0, 4.0]);
        // weight the copies differently so the reduction is visible
        let w = Tensor::from_vec(vec![1.0, 2.0, 4.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.0, 1.0, 0.0], &[2, 6]).unwrap();
        let loss = y.mul(&w).unwrap().sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[7.0, 3.0, 1.5, 1.0]);
    }

    #[test]
    fn exp_log_inverse_pair() {
        for v in [0.5, 1.0, 3.0] {
            let x = Tensor::<f64>::scalar(v);
            let y = x.ln().unwrap().exp().unwrap();
            assert!((y.item() - v).abs() < 1e-7);
        }
        assert!(Tensor::<f64>::scalar(0.0).ln().is_err());
        assert!(Tensor::<f64>::scalar(-1.0).ln().is_err());
    }
}
