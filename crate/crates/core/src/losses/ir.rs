use super::{check_tau, IrBatch, IrGrads, LossResult};
use crate::error::{Error, Result};
use crate::linalg::{accumulate_cosine_grad, cosine_matrix, Matrix};
use crate::scalar::Scalar;

/// Multi-positive InfoNCE with hard negatives over a gathered batch.
///
/// For anchor `i` and each of its positives `c`, the denominator holds the
/// positive itself, the positives of every *other* anchor, and the hard
/// negatives of *all* anchors. The anchor's own remaining positives are not
/// in the denominator. The loss is the mean of the `N * K+` terms.
pub fn ir_infonce_multi<T: Scalar>(
    batch: &IrBatch<T>,
    tau: T,
) -> Result<LossResult<T, IrGrads<T>>> {
    check_tau(tau, "tau")?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch("retrieval batch has no rows".into()));
    }
    let kp = batch.k_pos();
    let kn = batch.k_neg();
    let inv_tau = T::one() / tau;
    let cos_pos = cosine_matrix(batch.queries(), batch.positives())?;
    let cos_neg = if kn > 0 {
        cosine_matrix(batch.queries(), batch.negatives())?
    } else {
        Matrix::zeros(n, 0)
    };

    // d value / d logit, accumulated per (anchor, column)
    let mut coef_pos = Matrix::<T>::zeros(n, n * kp);
    let mut coef_neg = Matrix::<T>::zeros(n, n * kn);
    let mut total = T::zero();
    let mut denoms = vec![T::zero(); kp];

    for i in 0..n {
        let own = i * kp..(i + 1) * kp;
        let shared = (0..n * kp)
            .filter(|col| !own.contains(col))
            .map(|col| cos_pos[(i, col)] * inv_tau)
            .chain((0..n * kn).map(|col| cos_neg[(i, col)] * inv_tau));
        let (mut shared_max, mut count) = (T::neg_infinity(), 0usize);
        for x in shared.clone() {
            shared_max = shared_max.max(x);
            count += 1;
        }
        let shared_sum = if count == 0 {
            T::zero()
        } else {
            shared.map(|x| (x - shared_max).exp()).sum::<T>()
        };

        for (c, col) in own.clone().enumerate() {
            let s = cos_pos[(i, col)] * inv_tau;
            let denom = if count == 0 {
                s
            } else {
                let m = s.max(shared_max);
                m + ((s - m).exp() + shared_sum * (shared_max - m).exp()).ln()
            };
            denoms[c] = denom;
            total += denom - s;
            coef_pos[(i, col)] += (s - denom).exp() - T::one();
        }
        if count > 0 {
            for col in (0..n * kp).filter(|col| !own.contains(col)) {
                let x = cos_pos[(i, col)] * inv_tau;
                coef_pos[(i, col)] += denoms.iter().map(|&d| (x - d).exp()).sum::<T>();
            }
            for col in 0..n * kn {
                let x = cos_neg[(i, col)] * inv_tau;
                coef_neg[(i, col)] += denoms.iter().map(|&d| (x - d).exp()).sum::<T>();
            }
        }
    }

    let scale = T::one() / T::from_usize_lossy(n * kp);
    let d = batch.queries().cols();
    let mut grads = IrGrads {
        queries: Matrix::zeros(n, d),
        positives: Matrix::zeros(n * kp, d),
        negatives: Matrix::zeros(n * kn, d),
    };
    let mut gq = vec![T::zero(); d];
    for i in 0..n {
        gq.iter_mut().for_each(|g| *g = T::zero());
        let q = batch.queries().row(i);
        for col in 0..n * kp {
            let up = coef_pos[(i, col)] * inv_tau * scale;
            accumulate_cosine_grad(
                q,
                batch.positives().row(col),
                up,
                &mut gq,
                grads.positives.row_mut(col),
            );
        }
        for col in 0..n * kn {
            let up = coef_neg[(i, col)] * inv_tau * scale;
            accumulate_cosine_grad(
                q,
                batch.negatives().row(col),
                up,
                &mut gq,
                grads.negatives.row_mut(col),
            );
        }
        grads.queries.row_mut(i).copy_from_slice(&gq);
    }

    Ok(LossResult::new(total * scale, grads))
}
