//! Rotary position embedding for one attention head.

use crate::tensor::tape::{common_tape, GradStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Rotate half-split pairs (x[i], x[i+d/2]) of each row by pos·θ^(−2i/d).
/// `positions` are per-row rotary positions (restarting at document starts);
/// angles are computed in f64 regardless of F so large positions stay
/// accurate.
pub fn rope<F: Real>(x: &Tensor<F>, positions: &[usize], theta: f64) -> Result<Tensor<F>> {
    let (t_len, d) = x.dims2("rope")?;
    if d % 2 != 0 {
        return Err(TensorError::BadShape {
            op: "rope",
            shape: x.shape().to_vec(),
            detail: "head dim must be even".into(),
        });
    }
    if positions.len() != t_len {
        return Err(TensorError::Contract {
            op: "rope",
            detail: format!("{} positions for {} rows", positions.len(), t_len),
        });
    }
    if theta <= 0.0 {
        return Err(TensorError::Domain {
            op: "rope",
            detail: format!("theta must be positive, got {theta}"),
        });
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| theta.powf(-2.0 * i as f64 / d as f64))
        .collect();
    // cos/sin per (row, pair), shared by forward and backward
    let mut cs = vec![(F::ZERO, F::ZERO); t_len * half];
    for (t, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let ang = pos as f64 * freqs[i];
            cs[t * half + i] = (F::from_f64(ang.cos()), F::from_f64(ang.sin()));
        }
    }

    let xd = x.data();
    let mut out = vec![F::ZERO; t_len * d];
    for t in 0..t_len {
        for i in 0..half {
            let (c, s) = cs[t * half + i];
            let a = xd[t * d + i];
            let b = xd[t * d + half + i];
            out[t * d + i] = a * c - b * s;
            out[t * d + half + i] = a * s + b * c;
        }
    }
    let out = Tensor::from_vec(out, &[t_len, d])?;

    let Some(tape) = common_tape("rope", &[x])? else {
        return Ok(out);
    };
    let x_id = x.node_id();
    let back = move |up: &[F], store: &mut GradStore<F>| {
        if let Some(ix) = x_id {
            let slot = store.slot(ix);
            // inverse rotation (transpose)
            for t in 0..t_len {
                for i in 0..half {
                    let (c, s) = cs[t * half + i];
                    let ua = up[t * d + i];
                    let ub = up[t * d + half + i];
                    slot[t * d + i] += ua * c + ub * s;
                    slot[t * d + half + i] += -ua * s + ub * c;
                }
            }
        }
    };
    let id = tape.push(out.len(), Some(Box::new(back)));
    Ok(out.with_node(tape, id))
}

/// Rotary positions restarting at each segment start.
pub fn segment_positions(segs: &[usize], t_len: usize) -> Vec<usize> {
    let mut pos = Vec::with_capacity(t_len);
    for (s, e) in crate::mixers::seg_ranges(segs, t_len) {
        pos.extend(0..e - s);
    }
    pos
}
