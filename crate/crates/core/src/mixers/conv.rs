//! Causal depthwise short convolution with document-boundary resets.

use crate::mixers::{check_segs, seg_ranges};
use crate::tensor::tape::{common_tape, GradStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// y[t,c] = Σ_j kernel[j,c] · x[t+j−(w−1), c], zero-padded on the left and at
/// segment starts. The last kernel row multiplies the current token, so an
/// identity-initialized kernel (last row ones, rest zero) passes the input
/// through unchanged. `segs` lists document start offsets (`&[0]` for a
/// single document).
pub fn short_conv<F: Real>(x: &Tensor<F>, kernel: &Tensor<F>, segs: &[usize]) -> Result<Tensor<F>> {
    let (t_len, d) = x.dims2("short_conv")?;
    let (w, dk) = kernel.dims2("short_conv")?;
    if dk != d || w == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "short_conv",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    check_segs("short_conv", segs, t_len)?;

    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![F::ZERO; t_len * d];
    for (s, e) in seg_ranges(segs, t_len) {
        for t in s..e {
            let orow = &mut out[t * d..(t + 1) * d];
            for j in 0..w {
                let src = t + j + 1;
                if src < w + s {
                    continue; // before the segment start: zero padding
                }
                let src = src - w; // = t + j − (w−1)
                let xrow = &xd[src * d..(src + 1) * d];
                let krow = &kd[j * d..(j + 1) * d];
                for c in 0..d {
                    orow[c] += krow[c] * xrow[c];
                }
            }
        }
    }
    let out = Tensor::from_vec(out, &[t_len, d])?;

    let Some(tape) = common_tape("short_conv", &[x, kernel])? else {
        return Ok(out);
    };
    let x_id = x.node_id();
    let k_id = kernel.node_id();
    let x_data = x.shared();
    let k_data = kernel.shared();
    let segs_owned: Vec<usize> = segs.to_vec();
    let back = move |up: &[F], store: &mut GradStore<F>| {
        if let Some(ix) = x_id {
            let slot = store.slot(ix);
            for (s, e) in seg_ranges(&segs_owned, t_len) {
                for t in s..e {
                    let urow = &up[t * d..(t + 1) * d];
                    for j in 0..w {
                        let src = t + j + 1;
                        if src < w + s {
                            continue;
                        }
                        let src = src - w;
                        let krow = &k_data[j * d..(j + 1) * d];
                        let grow = &mut slot[src * d..(src + 1) * d];
                        for c in 0..d {
                            grow[c] += krow[c] * urow[c];
                        }
                    }
                }
            }
        }
        if let Some(ik) = k_id {
            let slot = store.slot(ik);
            for (s, e) in seg_ranges(&segs_owned, t_len) {
                for t in s..e {
                    let urow = &up[t * d..(t + 1) * d];
                    for j in 0..w {
                        let src = t + j + 1;
                        if src < w + s {
                            continue;
                        }
                        let src = src - w;
                        let xrow = &x_data[src * d..(src + 1) * d];
                        let grow = &mut slot[j * d..(j + 1) * d];
                        for c in 0..d {
                            grow[c] += xrow[c] * urow[c];
                        }
                    }
                }
            }
        }
    };
    let id = tape.push(out.len(), Some(Box::new(back)));
    Ok(out.with_node(tape, id))
}

/// Kernel that reproduces the input exactly: last row ones, rest zero.
pub fn identity_kernel<F: Real>(width: usize, d: usize) -> Tensor<F> {
    let mut data = vec![F::ZERO; width * d];
    for c in 0..d {
        data[(width - 1) * d + c] = F::ONE;
    }
    Tensor::from_vec(data, &[width, d]).expect("shape is consistent by construction")
}
