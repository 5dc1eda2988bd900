use super::{
    mid_nce_loss, pearson_loss, pro_loss, rank_kl_loss, LossResult, PairGrads, ScoredPairBatch,
    StsLossWeights,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Gradients of the combined similarity loss.
#[derive(Debug, Clone, PartialEq)]
pub struct StsGrads<T> {
    /// With respect to the final-layer predicted similarities.
    pub predicted: Vec<T>,
    /// With respect to the intermediate-layer pair embeddings; `None` when
    /// the intermediate term has zero weight.
    pub mid: Option<PairGrads<T>>,
}

/// `alpha * Pearson + beta * RankKL + gamma * PRO + lambda * MidNCE`.
///
/// Components with zero weight are skipped entirely, so their
/// preconditions do not apply. `mid` carries the intermediate-layer
/// `(left, right)` embeddings and is required only when `lambda > 0`.
pub fn sts_combined<T: Scalar>(
    batch: &ScoredPairBatch<'_, T>,
    mid: Option<(&Matrix<T>, &Matrix<T>)>,
    w: &StsLossWeights<T>,
) -> Result<LossResult<T, StsGrads<T>>> {
    w.validate()?;
    let n = batch.len();
    let mut value = T::zero();
    let mut predicted = vec![T::zero(); n];
    let mut components = Vec::with_capacity(4);

    let mut add = |name: &'static str, weight: T, r: LossResult<T, Vec<T>>| {
        value += weight * r.value;
        for (g, d) in predicted.iter_mut().zip(&r.grads) {
            *g += weight * *d;
        }
        components.push((name, r.value));
    };
    if w.alpha > T::zero() {
        add("pearson", w.alpha, pearson_loss(batch)?);
    }
    if w.beta > T::zero() {
        add("rank_kl", w.beta, rank_kl_loss(batch, w.tau_rankkl)?);
    }
    if w.gamma > T::zero() {
        add("pro", w.gamma, pro_loss(batch, w.tau_pro)?);
    }

    let mut mid_grads = None;
    if w.lambda > T::zero() {
        let (left, right) = mid.ok_or_else(|| {
            Error::Contract("intermediate embeddings required when lambda > 0".into())
        })?;
        if left.rows() != n {
            return Err(Error::Contract(format!(
                "{} intermediate rows for {n} scored pairs",
                left.rows()
            )));
        }
        let r = mid_nce_loss(
            left,
            right,
            batch.labels(),
            w.midnce_threshold,
            w.tau_midnce,
        )?;
        value += w.lambda * r.value;
        components.push(("mid_nce", r.value));
        let mut g = r.grads;
        g.left
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v *= w.lambda);
        g.right
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v *= w.lambda);
        mid_grads = Some(g);
    }

    Ok(LossResult {
        value,
        grads: StsGrads {
            predicted,
            mid: mid_grads,
        },
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_only_matches_pearson_loss() {
        let p = [0.1, 0.4, 0.9, 0.3];
        let y = [0.0, 0.5, 1.0, 0.25];
        let b = ScoredPairBatch::new(&p, &y).unwrap();
        let w = StsLossWeights::only(1.0, 0.0, 0.0, 0.0);
        let c = sts_combined(&b, None, &w).unwrap();
        let direct = pearson_loss(&b).unwrap();
        assert_eq!(c.value, direct.value);
        assert_eq!(c.grads.predicted, direct.grads);
        assert!(c.grads.mid.is_none());
    }

    #[test]
    fn zero_weight_components_do_not_raise() {
        // constant labels break Pearson, but beta-only never evaluates it
        let p = [0.1, 0.4];
        let y = [0.5, 0.5];
        let b = ScoredPairBatch::new(&p, &y).unwrap();
        let w = StsLossWeights::only(0.0, 2.0, 0.0, 0.0);
        let c = sts_combined(&b, None, &w).unwrap();
        let direct = rank_kl_loss(&b, w.tau_rankkl).unwrap();
        assert_eq!(c.value, 2.0 * direct.value);
        let w = StsLossWeights::only(1.0, 0.0, 0.0, 0.0);
        assert!(sts_combined(&b, None, &w).is_err());
    }

    #[test]
    fn missing_intermediate_embeddings() {
        let p = [0.1, 0.4];
        let y = [0.0, 1.0];
        let b = ScoredPairBatch::new(&p, &y).unwrap();
        let w = StsLossWeights::<f64>::default();
        assert!(matches!(
            sts_combined(&b, None, &w),
            Err(Error::Contract(_))
        ));
    }
}
