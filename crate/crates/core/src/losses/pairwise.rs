use super::{check_tau, LossResult, ScoredPairBatch};
use crate::error::Result;
use crate::scalar::Scalar;

/// CoSENT: `log(1 + sum_{y_i > y_j} exp((yhat_j - yhat_i) / tau))`.
pub fn cosent_loss<T: Scalar>(
    batch: &ScoredPairBatch<'_, T>,
    tau: T,
) -> Result<LossResult<T, Vec<T>>> {
    check_tau(tau, "tau")?;
    let y = batch.labels();
    let p = batch.predicted();
    let n = batch.len();
    let mut pairs: Vec<(usize, usize, T)> = Vec::new();
    let mut m = T::zero(); // the implicit exp(0) term
    for i in 0..n {
        for j in 0..n {
            if y[i] > y[j] {
                let z = (p[j] - p[i]) / tau;
                m = m.max(z);
                pairs.push((i, j, z));
            }
        }
    }
    let mut grads = vec![T::zero(); n];
    if pairs.is_empty() {
        return Ok(LossResult::new(T::zero(), grads));
    }
    let sum = (-m).exp() + pairs.iter().map(|&(_, _, z)| (z - m).exp()).sum::<T>();
    let lse = m + sum.ln();
    for &(i, j, z) in &pairs {
        let w = (z - lse).exp() / tau;
        grads[j] += w;
        grads[i] -= w;
    }
    Ok(LossResult::new(lse, grads))
}

/// RankNet: `sum_{y_i > y_j} log(1 + exp(yhat_j - yhat_i))`.
pub fn ranknet_loss<T: Scalar>(batch: &ScoredPairBatch<'_, T>) -> Result<LossResult<T, Vec<T>>> {
    let y = batch.labels();
    let p = batch.predicted();
    let n = batch.len();
    let mut value = T::zero();
    let mut grads = vec![T::zero(); n];
    for i in 0..n {
        for j in 0..n {
            if y[i] > y[j] {
                let z = p[j] - p[i];
                value += softplus(z);
                let s = sigmoid(z);
                grads[j] += s;
                grads[i] -= s;
            }
        }
    }
    Ok(LossResult::new(value, grads))
}

fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
