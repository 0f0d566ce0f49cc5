//! Loss heads: mean softmax cross-entropy and raw output sum.

use ndarray::{Array2, ArrayD};

use super::dual::{Dual, Scalar};

pub struct SoftmaxCe<F: Scalar> {
    pub loss: F,
    pub loss_t: Option<F>,
    /// Gradient of the mean loss w.r.t. the logits.
    pub grad: Dual<F>,
    /// Softmax probabilities (N x C).
    pub probs: Array2<F>,
}

/// Mean cross-entropy over the batch, with tangent propagation.
pub fn softmax_cross_entropy<F: Scalar>(logits: &Dual<F>, labels: &[usize]) -> SoftmaxCe<F> {
    let (z, zt) = logits.view2();
    let (n, c) = z.dim();
    assert_eq!(n, labels.len(), "labels/batch length mismatch");
    let inv_n = F::from_f64(1.0 / n as f64);
    let mut probs = Array2::<F>::zeros((n, c));
    let mut loss = F::zero();
    for i in 0..n {
        let row = z.row(i);
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut denom = F::zero();
        for j in 0..c {
            let e = (row[j] - m).exp();
            probs[(i, j)] = e;
            denom = denom + e;
        }
        for j in 0..c {
            probs[(i, j)] = probs[(i, j)] / denom;
        }
        loss = loss - (probs[(i, labels[i])]).ln();
    }
    loss = loss * inv_n;

    let mut grad_v = probs.clone();
    for i in 0..n {
        grad_v[(i, labels[i])] = grad_v[(i, labels[i])] - F::one();
    }
    grad_v.mapv_inplace(|g| g * inv_n);

    let (loss_t, grad_t) = match zt {
        Some(zt) => {
            let mut lt = F::zero();
            let mut gt = Array2::<F>::zeros((n, c));
            for i in 0..n {
                let mut dot = F::zero();
                for j in 0..c {
                    dot = dot + probs[(i, j)] * zt[(i, j)];
                }
                lt = lt + dot - zt[(i, labels[i])];
                // tangent of softmax: p .* (zdot - sum(p .* zdot))
                for j in 0..c {
                    gt[(i, j)] = probs[(i, j)] * (zt[(i, j)] - dot) * inv_n;
                }
            }
            (Some(lt * inv_n), Some(gt.into_dyn()))
        }
        None => (None, None),
    };

    SoftmaxCe {
        loss,
        loss_t,
        grad: Dual {
            v: grad_v.into_dyn(),
            t: grad_t,
        },
        probs,
    }
}

/// Sum of all outputs (used for per-sample critic gradients): the backward
/// seed is all-ones with zero tangent.
pub fn sum_outputs<F: Scalar>(out: &Dual<F>) -> (F, Option<F>, Dual<F>) {
    let s = out.v.sum();
    let st = out.t.as_ref().map(|t| t.sum());
    let seed = Dual {
        v: ArrayD::from_elem(out.v.raw_dim(), F::one()),
        t: out.t.as_ref().map(|t| ArrayD::zeros(t.raw_dim())),
    };
    (s, st, seed)
}
