use super::{check_tau, LossResult, PairGrads};
use crate::error::{Error, Result};
use crate::linalg::{accumulate_cosine_grad, cosine_matrix, Matrix};
use crate::scalar::Scalar;

/// In-batch InfoNCE over text pairs with a label filter on the numerator.
///
/// Row `i` contributes `-log softmax_j(cos(l_i, r_j) / tau)[i]` only when
/// `labels[i] >= threshold`; every right-hand text still serves as an
/// in-batch negative for the surviving rows. The value is the mean over
/// surviving rows, and zero (with zero gradients) when none survive.
fn thresholded_infonce<T: Scalar>(
    left: &Matrix<T>,
    right: &Matrix<T>,
    labels: &[T],
    threshold: T,
    tau: T,
) -> Result<LossResult<T, PairGrads<T>>> {
    check_tau(tau, "tau")?;
    let n = left.rows();
    if right.rows() != n || labels.len() != n || left.cols() != right.cols() {
        return Err(Error::Contract(format!(
            "pair batch shapes disagree: left {:?}, right {:?}, {} labels",
            left.shape(),
            right.shape(),
            labels.len()
        )));
    }
    let d = left.cols();
    let mut grads = PairGrads::zeros(n, d);
    let survivors: Vec<usize> = (0..n).filter(|&i| labels[i] >= threshold).collect();
    if survivors.is_empty() {
        log::debug!("InfoNCE: all {n} rows below threshold {threshold}; loss is zero");
        return Ok(LossResult::new(T::zero(), grads));
    }
    let cos = cosine_matrix(left, right)?;
    let inv_tau = T::one() / tau;
    let scale = T::one() / T::from_usize_lossy(survivors.len());
    let mut value = T::zero();
    let mut row = vec![T::zero(); n];
    let mut g_left = vec![T::zero(); d];
    for &i in &survivors {
        let mut m = T::neg_infinity();
        for j in 0..n {
            row[j] = cos[(i, j)] * inv_tau;
            m = m.max(row[j]);
        }
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
        value += lse - row[i];
        g_left.iter_mut().for_each(|g| *g = T::zero());
        for j in 0..n {
            let mut c = (row[j] - lse).exp();
            if j == i {
                c -= T::one();
            }
            accumulate_cosine_grad(
                left.row(i),
                right.row(j),
                c * inv_tau * scale,
                &mut g_left,
                grads.right.row_mut(j),
            );
        }
        grads.left.row_mut(i).copy_from_slice(&g_left);
    }
    Ok(LossResult::new(value * scale, grads))
}

/// Auxiliary InfoNCE on intermediate-layer pair embeddings.
pub fn mid_nce_loss<T: Scalar>(
    left_mid: &Matrix<T>,
    right_mid: &Matrix<T>,
    labels: &[T],
    threshold: T,
    tau: T,
) -> Result<LossResult<T, PairGrads<T>>> {
    thresholded_infonce(left_mid, right_mid, labels, threshold, tau)
}

/// The InfoNCE baseline: same objective on final-layer pair embeddings.
pub fn infonce_baseline<T: Scalar>(
    left: &Matrix<T>,
    right: &Matrix<T>,
    labels: &[T],
    threshold: T,
    tau: T,
) -> Result<LossResult<T, PairGrads<T>>> {
    thresholded_infonce(left, right, labels, threshold, tau)
}
