use super::softmax::{average_ranks, log_softmax_temp, log_sum_exp};
use super::{check_tau, LossResult, ScoredPairBatch, PRO_TIE_EPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `1 - r` where `r` is the Pearson correlation of predictions and labels.
pub fn pearson_loss<T: Scalar>(batch: &ScoredPairBatch<'_, T>) -> Result<LossResult<T, Vec<T>>> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::Degenerate(
            "Pearson loss needs at least two pairs".into(),
        ));
    }
    let x = batch.predicted();
    let y = batch.labels();
    let nf = T::from_usize_lossy(n);
    let mx = x.iter().copied().sum::<T>() / nf;
    let my = y.iter().copied().sum::<T>() / nf;
    let dx: Vec<T> = x.iter().map(|&v| v - mx).collect();
    let dy: Vec<T> = y.iter().map(|&v| v - my).collect();
    let sxx: T = dx.iter().map(|&v| v * v).sum();
    let syy: T = dy.iter().map(|&v| v * v).sum();
    let sxy: T = dx.iter().zip(&dy).map(|(&a, &b)| a * b).sum();
    if sxx <= T::zero() {
        return Err(Error::Degenerate("predictions have zero variance".into()));
    }
    if syy <= T::zero() {
        return Err(Error::Degenerate("labels have zero variance".into()));
    }
    let denom = (sxx * syy).sqrt();
    let r = sxy / denom;
    // centering terms cancel because sum(dx) = sum(dy) = 0
    let grads = dx
        .iter()
        .zip(&dy)
        .map(|(&a, &b)| -(b / denom - r * a / sxx))
        .collect();
    Ok(LossResult::new(T::one() - r, grads))
}

/// Rank-normalized targets `((N - 1) - r_i) / (N - 1)` with tie-averaged
/// descending ranks `r_i`.
pub fn rank_targets<T: Scalar>(labels: &[T]) -> Result<Vec<T>> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Degenerate(
            "rank targets need at least two labels (division by N - 1)".into(),
        ));
    }
    let top = T::from_usize_lossy(n - 1);
    Ok(average_ranks(labels)
        .into_iter()
        .map(|r| (top - r) / top)
        .collect())
}

fn kl_to_target<T: Scalar>(target_scores: &[T], predicted: &[T], tau: T) -> LossResult<T, Vec<T>> {
    let log_p = log_softmax_temp(target_scores, tau);
    let log_q = log_softmax_temp(predicted, tau);
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(predicted.len());
    for (&lp, &lq) in log_p.iter().zip(&log_q) {
        let p = lp.exp();
        if p > T::zero() {
            value += p * (lp - lq);
        }
        grads.push((lq.exp() - p) / tau);
    }
    // KL is non-negative; clip summation round-off
    LossResult::new(value.max(T::zero()), grads)
}

/// KL divergence from the softmax of rank-normalized targets to the
/// softmax of predictions. Targets carry no gradient.
pub fn rank_kl_loss<T: Scalar>(
    batch: &ScoredPairBatch<'_, T>,
    tau: T,
) -> Result<LossResult<T, Vec<T>>> {
    check_tau(tau, "tau")?;
    let targets = rank_targets(batch.labels())?;
    Ok(kl_to_target(&targets, batch.predicted(), tau))
}

/// KL divergence from the softmax of raw labels to the softmax of
/// predictions. Sensitive to the label distribution within a batch; kept
/// as the reference the rank-normalized variant improves on.
pub fn softmax_kl_loss<T: Scalar>(
    batch: &ScoredPairBatch<'_, T>,
    tau: T,
) -> Result<LossResult<T, Vec<T>>> {
    check_tau(tau, "tau")?;
    Ok(kl_to_target(batch.labels(), batch.predicted(), tau))
}

/// Preference-ranking loss.
///
/// Items are sorted by label, descending. Each anchor `i` but the last forms
/// a softmax over itself and every later item `j` with a strictly smaller
/// label, where item `j` is scaled by `tau / (y_i - y_j)` and the anchor by
/// the smallest of those scales (its largest label gap). Label gaps under
/// [`PRO_TIE_EPS`] are ties and drop out; an anchor left alone contributes
/// zero. The loss is the sum of anchor cross-entropies over `N - 1`.
pub fn pro_loss<T: Scalar>(
    batch: &ScoredPairBatch<'_, T>,
    tau: T,
) -> Result<LossResult<T, Vec<T>>> {
    check_tau(tau, "tau")?;
    let n = batch.len();
    let mut grads = vec![T::zero(); n];
    if n < 2 {
        return Ok(LossResult::new(T::zero(), grads));
    }
    let y = batch.labels();
    let yhat = batch.predicted();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[b].partial_cmp(&y[a]).unwrap_or(std::cmp::Ordering::Equal));
    let tie = T::lit(PRO_TIE_EPS);

    let mut total = T::zero();
    let mut partners: Vec<(usize, T)> = Vec::with_capacity(n);
    let mut logits: Vec<T> = Vec::with_capacity(n);
    for (pos, &i) in order.iter().enumerate().take(n - 1) {
        partners.clear();
        for &j in &order[pos + 1..] {
            let gap = y[i] - y[j];
            if gap >= tie {
                partners.push((j, tau / gap));
            }
        }
        if partners.is_empty() {
            continue;
        }
        let t_anchor = partners.iter().map(|p| p.1).fold(T::infinity(), T::min);
        logits.clear();
        logits.push(yhat[i] / t_anchor);
        logits.extend(partners.iter().map(|&(j, t)| yhat[j] / t));
        let lse = log_sum_exp(&logits);
        total += lse - logits[0];
        grads[i] += ((logits[0] - lse).exp() - T::one()) / t_anchor;
        for (&(j, t), &l) in partners.iter().zip(&logits[1..]) {
            grads[j] += (l - lse).exp() / t;
        }
    }
    let scale = T::one() / T::from_usize_lossy(n - 1);
    grads.iter_mut().for_each(|g| *g *= scale);
    Ok(LossResult::new(total * scale, grads))
}
