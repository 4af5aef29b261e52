//! Distillation losses: forward KL with optional top-K teacher truncation and
//! CE mixing, hard-label cross-entropy, and the per-layer L2 alignment losses
//! under teacher forcing.
//!
//! Convention shared by every token-level loss here: the model's logits row
//! `p` predicts token `p+1`, so a loss target at position `p` reads logits
//! row `p − 1`. Positions whose target is a document start are excluded — the
//! previous document's last token carries no information about the next
//! document, and training on that pair would just teach the packing order.

use crate::data::{PackedSeq, PAD};
use crate::mixers::ScanMode;
use crate::model::{Mixer, Model};
use crate::tensor::ops::concat_cols;
use crate::tensor::{Real, Result, Tensor, TensorError};

/// A loss value plus how many positions it averaged over. Zero positions
/// yields a zero constant — callers count those as warnings.
pub struct LossOut<F: Real> {
    pub loss: Tensor<F>,
    pub count: usize,
}

fn contract(op: &'static str, detail: String) -> TensorError {
    TensorError::Contract { op, detail }
}

/// Target rows for a packed sequence: `(logit_rows, labels)` where
/// `logit_rows[i]` is the row whose prediction is scored against
/// `labels[i]`. Applies the shift, the loss mask, the document-start
/// exclusion, and the padding guard.
pub fn loss_rows(seq: &PackedSeq) -> (Vec<usize>, Vec<usize>) {
    let t = seq.tokens.len();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for p in 1..t {
        if !seq.loss_mask[p] || seq.tokens[p] == PAD {
            continue;
        }
        if seq.segs.binary_search(&p).is_ok() {
            continue; // target opens a new document
        }
        rows.push(p - 1);
        labels.push(seq.tokens[p]);
    }
    (rows, labels)
}

fn masked_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

/// Per-row top-k column indices of a probability matrix, ties broken by
/// lower column index. Returned as k column vectors (one per rank).
fn topk_columns<F: Real>(probs: &Tensor<F>, k: usize) -> Vec<Vec<usize>> {
    let (rows, cols) = probs.dims2("topk_columns").expect("2-d probs");
    let data = probs.data();
    let mut by_rank: Vec<Vec<usize>> = vec![Vec::with_capacity(rows); k];
    let mut idx: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        idx.clear();
        idx.extend(0..cols);
        idx.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        for (rank, slot) in by_rank.iter_mut().enumerate() {
            slot.push(idx[rank]);
        }
    }
    by_rank
}

/// Forward KL(teacher ‖ student) at `temperature`, averaged over masked rows,
/// with optional top-k truncation of the teacher distribution and an optional
/// `alpha_ce`-weighted hard-label cross-entropy term.
///
/// The teacher side is always treated as a constant. With `top_k`, the
/// teacher's k most probable tokens are kept and renormalized while the
/// student term stays a full-vocabulary log-softmax gathered at that support,
/// so the student remains normalized. The loss is not scaled by τ².
pub fn kd_loss<F: Real>(
    teacher_logits: &Tensor<F>,
    student_logits: &Tensor<F>,
    loss_mask: &[bool],
    temperature: f64,
    top_k: Option<usize>,
    alpha_ce: f64,
    labels: Option<&[usize]>,
) -> Result<LossOut<F>> {
    let (n, vocab) = student_logits.dims2("kd_loss")?;
    if teacher_logits.shape() != student_logits.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "kd_loss",
            lhs: teacher_logits.shape().to_vec(),
            rhs: student_logits.shape().to_vec(),
        });
    }
    if loss_mask.len() != n {
        return Err(contract(
            "kd_loss",
            format!("mask of {} entries for {} rows", loss_mask.len(), n),
        ));
    }
    if !(temperature > 0.0) {
        return Err(contract(
            "kd_loss",
            format!("temperature {temperature} must be positive"),
        ));
    }
    if alpha_ce > 0.0 && labels.is_none() {
        return Err(contract(
            "kd_loss",
            "alpha_ce > 0 needs hard labels".into(),
        ));
    }

    let sel = masked_rows(loss_mask);
    if sel.is_empty() {
        return Ok(LossOut {
            loss: Tensor::zeros(&[1]),
            count: 0,
        });
    }
    let all = sel.len() == n;
    let t_sel = if all {
        teacher_logits.detach()
    } else {
        teacher_logits.detach().gather_rows(&sel)?
    };
    let s_sel = if all {
        student_logits.clone()
    } else {
        student_logits.gather_rows(&sel)?
    };
    let m = sel.len();
    let tau = F::from_f64(temperature);
    let inv_m = F::from_f64(1.0 / m as f64);

    let ls = s_sel.log_softmax(tau)?;
    let mut loss = match top_k {
        Some(k) if k < vocab => {
            let pt = t_sel.softmax(tau)?;
            let support = topk_columns(&pt, k);
            // teacher mass on the support, renormalized (plain arithmetic —
            // the teacher is a constant)
            let ptd = pt.data();
            let mut phat = vec![F::ZERO; m * k];
            for r in 0..m {
                let mut z = F::ZERO;
                for cols in &support {
                    z += ptd[r * vocab + cols[r]];
                }
                for (j, cols) in support.iter().enumerate() {
                    phat[r * k + j] = ptd[r * vocab + cols[r]] / z;
                }
            }
            let phat = Tensor::from_vec(phat, &[m, k])?;
            let lhat = phat.ln()?;
            let gathered: Vec<Tensor<F>> = support
                .iter()
                .map(|cols| ls.pick_cols(cols)?.reshape(&[m, 1]))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor<F>> = gathered.iter().collect();
            let ls_sup = concat_cols(&refs)?;
            phat.mul(&lhat.sub(&ls_sup)?)?.sum_all()?.scale(inv_m)?
        }
        _ => {
            let lt = t_sel.log_softmax(tau)?;
            let pt = lt.exp()?;
            pt.mul(&lt.sub(&ls)?)?.sum_all()?.scale(inv_m)?
        }
    };

    if alpha_ce > 0.0 {
        let labels = labels.expect("checked above");
        if labels.len() != n {
            return Err(contract(
                "kd_loss",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        let picked: Vec<usize> = sel.iter().map(|&r| labels[r]).collect();
        let ls1 = s_sel.log_softmax(F::ONE)?;
        let ce = ls1.pick_cols(&picked)?.mean_all()?.neg()?;
        loss = loss.add(&ce.scale(F::from_f64(alpha_ce))?)?;
    }
    Ok(LossOut { loss, count: m })
}

/// Masked mean cross-entropy against hard labels.
pub fn sft_loss<F: Real>(
    student_logits: &Tensor<F>,
    labels: &[usize],
    loss_mask: &[bool],
) -> Result<LossOut<F>> {
    let (n, _) = student_logits.dims2("sft_loss")?;
    if labels.len() != n || loss_mask.len() != n {
        return Err(contract(
            "sft_loss",
            format!(
                "{} labels and {} mask entries for {} rows",
                labels.len(),
                loss_mask.len(),
                n
            ),
        ));
    }
    let sel = masked_rows(loss_mask);
    if sel.is_empty() {
        return Ok(LossOut {
            loss: Tensor::zeros(&[1]),
            count: 0,
        });
    }
    let s_sel = student_logits.gather_rows(&sel)?;
    let picked: Vec<usize> = sel.iter().map(|&r| labels[r]).collect();
    let loss = s_sel
        .log_softmax(F::ONE)?
        .pick_cols(&picked)?
        .mean_all()?
        .neg()?;
    Ok(LossOut {
        loss,
        count: sel.len(),
    })
}

/// Which teacher activation a replaced layer is trained to match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignTarget {
    /// the mixer sub-block output, before its residual addition (the default
    /// reading of the stage-2 target)
    MixerOut,
    /// the full block output after the MLP residual (the recorded
    /// alternative; gives the block's MLP a gradient path)
    BlockOut,
}

/// Per-layer alignment loss under teacher forcing: the teacher runs the
/// sequence once; every replaced (linear) student layer is fed the teacher's
/// hidden state entering that block and trained to match the chosen target by
/// mean squared error. Kept attention layers are skipped — with identical
/// weights and identical inputs their loss is structurally zero. Returns the
/// mean over replaced layers and how many layers contributed.
///
/// Padding positions participate: both models see the same padded stream, so
/// the target there is as well-defined as anywhere else.
pub fn alignment_loss<F: Real>(
    teacher: &Model<F>,
    student: &Model<F>,
    tokens: &[usize],
    segs: &[usize],
    target: AlignTarget,
    scan: ScanMode,
) -> Result<LossOut<F>> {
    if teacher.config.n_layers != student.config.n_layers {
        return Err(contract(
            "alignment_loss",
            format!(
                "teacher has {} layers, student {}",
                teacher.config.n_layers, student.config.n_layers
            ),
        ));
    }
    let eps = F::from_f64(student.config.rmsnorm_eps);
    let (_, traces) = teacher.forward_traced(tokens, segs, scan)?;
    let embedded = teacher.embed.embed(tokens)?;

    let mut total: Option<Tensor<F>> = None;
    let mut count = 0usize;
    for (l, block) in student.blocks.iter().enumerate() {
        let mixer = match &block.mixer {
            Mixer::Linear(m) => m,
            Mixer::Attention(_) => continue,
        };
        let x_in = if l == 0 {
            &embedded
        } else {
            &traces[l - 1].block_out
        };
        let normed = x_in.rmsnorm(&block.mixer_norm, eps)?;
        let m = mixer.forward(&normed, segs, scan)?;
        let (pred, want) = match target {
            AlignTarget::MixerOut => (m, &traces[l].mixer_out),
            AlignTarget::BlockOut => {
                let x1 = x_in.add(&m)?;
                let h2 = x1.rmsnorm(&block.mlp_norm, eps)?;
                let f = block.mlp.forward(&h2)?;
                (x1.add(&f)?, &traces[l].block_out)
            }
        };
        let diff = pred.sub(&want.detach())?;
        let l2 = diff.mul(&diff)?.mean_all()?;
        total = Some(match total {
            Some(t) => t.add(&l2)?,
            None => l2,
        });
        count += 1;
    }
    match total {
        Some(t) => Ok(LossOut {
            loss: t.scale(F::from_f64(1.0 / count as f64))?,
            count,
        }),
        None => Ok(LossOut {
            loss: Tensor::zeros(&[1]),
            count: 0,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MaskMode, Role};

    fn t2(data: Vec<f64>, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(data, &[rows, cols]).unwrap()
    }

    #[test]
    fn two_logit_kl_matches_the_hand_sum() {
        // teacher [0, ln 3] → p = (1/4, 3/4); student uniform → q = (1/2, 1/2)
        let teacher = t2(vec![0.0, 3.0f64.ln()], 1, 2);
        let student = t2(vec![0.0, 0.0], 1, 2);
        let out = kd_loss(&teacher, &student, &[true], 1.0, None, 0.0, None).unwrap();
        let expect = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((out.loss.item() - expect).abs() < 1e-12);
        assert!((out.loss.item() - 0.1308).abs() < 1e-3);
    }

    #[test]
    fn kl_is_zero_at_equality_and_positive_off_it() {
        let a = t2(vec![0.3, -1.0, 2.0, 0.0, 0.1, -0.4], 2, 3);
        let same = kd_loss(&a, &a, &[true, true], 1.0, None, 0.0, None).unwrap();
        assert!(same.loss.item().abs() < 1e-14);
        let b = t2(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, 3);
        let off = kd_loss(&a, &b, &[true, true], 1.0, None, 0.0, None).unwrap();
        assert!(off.loss.item() > 1e-3);
    }

    #[test]
    fn top_k_at_full_vocab_equals_full_kl() {
        let teacher = t2(vec![1.0, -0.5, 0.2, 2.0, 0.0, -1.0, 0.5, 0.1], 2, 4);
        let student = t2(vec![0.1, 0.4, -0.2, 0.0, 1.0, 0.3, -0.5, 0.2], 2, 4);
        let mask = [true, true];
        let full = kd_loss(&teacher, &student, &mask, 1.0, None, 0.0, None).unwrap();
        let k4 = kd_loss(&teacher, &student, &mask, 1.0, Some(4), 0.0, None).unwrap();
        assert!((full.loss.item() - k4.loss.item()).abs() < 1e-7);
        // truncation always keeps the teacher argmax: k=1 loss is the
        // student's NLL of the teacher's argmax
        let k1 = kd_loss(&teacher, &student, &mask, 1.0, Some(1), 0.0, None).unwrap();
        let ls = student.log_softmax(1.0).unwrap();
        let nll = -(ls.data()[3] + ls.data()[4 + 2]) / 2.0; // argmax cols 3 and 2
        assert!((k1.loss.item() - nll).abs() < 1e-12);
    }

    #[test]
    fn sft_equals_kd_with_a_one_hot_teacher() {
        let student = t2(vec![0.2, -0.1, 0.7, 0.4, 0.0, -0.3], 2, 3);
        let labels = [2usize, 0];
        let mask = [true, true];
        let sft = sft_loss(&student, &labels, &mask).unwrap();
        // a teacher with a huge margin on the label is one-hot to f64
        let mut hot = vec![0.0; 6];
        hot[2] = 50.0;
        hot[3] = 50.0;
        let teacher = t2(hot, 2, 3);
        let kd = kd_loss(&teacher, &student, &mask, 1.0, None, 0.0, None).unwrap();
        assert!((sft.loss.item() - kd.loss.item()).abs() < 1e-6);
    }

    #[test]
    fn masking_is_a_weighted_mean_over_positions() {
        let teacher = t2(vec![1.0, 0.0, 0.5, -0.2, 0.0, 2.0], 3, 2);
        let student = t2(vec![0.0, 0.3, 1.0, 0.0, -0.5, 0.5], 3, 2);
        let mask = [true, false, true];
        let batch = kd_loss(&teacher, &student, &mask, 1.0, None, 0.0, None).unwrap();
        assert_eq!(batch.count, 2);
        let mut acc = 0.0;
        for r in [0usize, 2] {
            let one_mask: Vec<bool> = (0..3).map(|i| i == r).collect();
            let one = kd_loss(&teacher, &student, &one_mask, 1.0, None, 0.0, None).unwrap();
            acc += one.loss.item();
        }
        assert!((batch.loss.item() - acc / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_zero_with_a_zero_count() {
        let a = t2(vec![0.0, 1.0], 1, 2);
        let out = kd_loss(&a, &a, &[false], 1.0, None, 0.0, None).unwrap();
        assert_eq!(out.count, 0);
        assert_eq!(out.loss.item(), 0.0);
        let s = sft_loss(&a, &[1], &[false]).unwrap();
        assert_eq!(s.count, 0);
    }

    #[test]
    fn ce_mix_adds_exactly_alpha_times_the_label_nll(){
        let teacher = t2(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let student = t2(vec![0.4, 0.1, -0.2, 0.3], 2, 2);
        let labels = [0usize, 1];
        let mask = [true, true];
        let plain = kd_loss(&teacher, &student, &mask, 1.0, None, 0.0, None).unwrap();
        let mixed =
            kd_loss(&teacher, &student, &mask, 1.0, None, 0.7, Some(&labels)).unwrap();
        let ce = sft_loss(&student, &labels, &mask).unwrap();
        assert!(
            (mixed.loss.item() - (plain.loss.item() + 0.7 * ce.loss.item())).abs() < 1e-12
        );
    }

    #[test]
    fn loss_rows_shift_and_skip_document_starts() {
        use crate::data::{pack_sequences, DatasetRecord};
        let records = vec![
            DatasetRecord::doc(vec![1, 10, 11, 2], vec![]),
            DatasetRecord::doc(vec![1, 12, 2], vec![]),
        ];
        let (rows, _) = pack_sequences(&records, 8, MaskMode::Full).unwrap();
        let seq = &rows[0]; // [1,10,11,2,1,12,2,PAD], segs [0,4,7]
        let (logit_rows, labels) = loss_rows(seq);
        // targets: 10,11,2 (from rows 0,1,2) and 12,2 (from rows 4,5);
        // position 4 (BOS of doc 2) and the pad are excluded
        assert_eq!(logit_rows, vec![0, 1, 2, 4, 5]);
        assert_eq!(labels, vec![10, 11, 2, 12, 2]);
    }

    #[test]
    fn completion_only_rows_cover_the_completion_exactly() {
        use crate::data::{pack_sequences, DatasetRecord};
        let rec = DatasetRecord::doc(
            vec![1, 20, 21, 3, 30, 31, 2],
            vec![(1, 3, Role::Prompt), (4, 7, Role::Completion)],
        );
        let (rows, _) = pack_sequences(&[rec], 8, MaskMode::CompletionOnly).unwrap();
        let (logit_rows, labels) = loss_rows(&rows[0]);
        // completion tokens 30,31,2 at positions 4,5,6 → logits rows 3,4,5
        assert_eq!(logit_rows, vec![3, 4, 5]);
        assert_eq!(labels, vec![30, 31, 2]);
    }
}
