use crate::scalar::Scalar;

/// `log(sum(exp(xs)))`, computed with max-subtraction. Empty input gives
/// negative infinity.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Log-probabilities of a temperature softmax.
pub fn log_softmax_temp<T: Scalar>(scores: &[T], tau: T) -> Vec<T> {
    let scaled: Vec<T> = scores.iter().map(|&s| s / tau).collect();
    let lse = log_sum_exp(&scaled);
    scaled.into_iter().map(|s| s - lse).collect()
}

/// Temperature softmax `exp(s_i / tau) / sum_j exp(s_j / tau)`.
pub fn softmax_temp<T: Scalar>(scores: &[T], tau: T) -> Vec<T> {
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = scores.iter().map(|&s| ((s - m) / tau).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Descending-order ranks in `[0, n - 1]`; tied values share the mean of
/// the positions they span.
pub fn average_ranks<T: Scalar>(values: &[T]) -> Vec<T> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![T::zero(); n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = T::from_usize_lossy(start + end - 1) / T::lit(2.0);
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}
