//! Training objectives with hand-derived gradients.
//!
//! Retrieval batches use a multi-positive contrastive loss with hard
//! negatives pooled over every gathered row. Similarity batches use a
//! weighted sum of a Pearson loss, a rank-normalized KL loss, a
//! preference-ranking (PRO) loss and an intermediate-layer InfoNCE term.
//! InfoNCE, CoSENT and RankNet are provided as baselines.
//!
//! Every loss returns its value together with the gradient with respect to
//! each differentiable input; nothing here depends on an autodiff engine.

mod contrastive;
mod ir;
mod listwise;
mod pairwise;
mod softmax;
mod sts;

pub use contrastive::{infonce_baseline, mid_nce_loss};
pub use ir::ir_infonce_multi;
pub use listwise::{pearson_loss, pro_loss, rank_kl_loss, rank_targets, softmax_kl_loss};
pub use pairwise::{cosent_loss, ranknet_loss};
pub use softmax::{average_ranks, log_softmax_temp, log_sum_exp, softmax_temp};
pub use sts::{sts_combined, StsGrads};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Label gap below which two similarity labels count as tied in the PRO loss.
pub const PRO_TIE_EPS: f64 = 1e-6;

/// Loss value plus gradients shaped like the differentiable inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T, G> {
    pub value: T,
    pub grads: G,
    /// Named unweighted sub-terms, for logging; empty for single losses.
    pub components: Vec<(&'static str, T)>,
}

impl<T, G> LossResult<T, G> {
    pub(crate) fn new(value: T, grads: G) -> Self {
        Self {
            value,
            grads,
            components: Vec::new(),
        }
    }
}

/// Predicted similarities and their gold labels, index-aligned.
#[derive(Debug, Clone, Copy)]
pub struct ScoredPairBatch<'a, T> {
    predicted: &'a [T],
    labels: &'a [T],
}

impl<'a, T: Scalar> ScoredPairBatch<'a, T> {
    pub fn new(predicted: &'a [T], labels: &'a [T]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        if predicted.is_empty() {
            return Err(Error::EmptyBatch("scored pair batch has no rows".into()));
        }
        if predicted.iter().chain(labels).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scored pair batch".into()));
        }
        Ok(Self { predicted, labels })
    }

    pub fn predicted(&self) -> &'a [T] {
        self.predicted
    }

    pub fn labels(&self) -> &'a [T] {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

/// Gathered retrieval batch. Positives of row `i` occupy rows
/// `i * k_pos .. (i + 1) * k_pos` of `positives`; negatives likewise.
#[derive(Debug, Clone, PartialEq)]
pub struct IrBatch<T> {
    queries: Matrix<T>,
    positives: Matrix<T>,
    negatives: Matrix<T>,
    k_pos: usize,
    k_neg: usize,
    device_of: Vec<usize>,
}

impl<T: Scalar> IrBatch<T> {
    pub fn new(
        queries: Matrix<T>,
        positives: Matrix<T>,
        negatives: Matrix<T>,
        k_pos: usize,
        k_neg: usize,
        device_of: Vec<usize>,
    ) -> Result<Self> {
        let n = queries.rows();
        if k_pos == 0 {
            return Err(Error::Contract("K+ must be at least 1".into()));
        }
        if positives.rows() != n * k_pos {
            return Err(Error::Contract(format!(
                "expected {} positive rows, got {}",
                n * k_pos,
                positives.rows()
            )));
        }
        if negatives.rows() != n * k_neg {
            return Err(Error::Contract(format!(
                "expected {} negative rows, got {}",
                n * k_neg,
                negatives.rows()
            )));
        }
        let d = queries.cols();
        if (positives.rows() > 0 && positives.cols() != d)
            || (negatives.rows() > 0 && negatives.cols() != d)
        {
            return Err(Error::Contract("embedding widths differ".into()));
        }
        if device_of.len() != n {
            return Err(Error::Contract(format!(
                "device map has {} entries for {n} rows",
                device_of.len()
            )));
        }
        if !(queries.is_finite() && positives.is_finite() && negatives.is_finite()) {
            return Err(Error::NonFinite("retrieval batch embeddings".into()));
        }
        Ok(Self {
            queries,
            positives,
            negatives,
            k_pos,
            k_neg,
            device_of,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.rows() == 0
    }

    pub fn queries(&self) -> &Matrix<T> {
        &self.queries
    }

    pub fn positives(&self) -> &Matrix<T> {
        &self.positives
    }

    pub fn negatives(&self) -> &Matrix<T> {
        &self.negatives
    }

    pub fn k_pos(&self) -> usize {
        self.k_pos
    }

    pub fn k_neg(&self) -> usize {
        self.k_neg
    }

    pub fn device_of(&self) -> &[usize] {
        &self.device_of
    }
}

/// Gradients of a retrieval loss, shaped like [`IrBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct IrGrads<T> {
    pub queries: Matrix<T>,
    pub positives: Matrix<T>,
    pub negatives: Matrix<T>,
}

/// Gradients with respect to the two sides of a batch of text pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrads<T> {
    pub left: Matrix<T>,
    pub right: Matrix<T>,
}

impl<T: Scalar> PairGrads<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            left: Matrix::zeros(rows, cols),
            right: Matrix::zeros(rows, cols),
        }
    }
}

/// Weights and temperatures of the combined similarity objective, plus the
/// retrieval temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StsLossWeights<T = f64> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    pub lambda: T,
    pub tau_rankkl: T,
    pub tau_pro: T,
    pub tau_midnce: T,
    pub tau_ir: T,
    pub midnce_threshold: T,
}

impl<T: Scalar> Default for StsLossWeights<T> {
    fn default() -> Self {
        Self {
            alpha: T::one(),
            beta: T::one(),
            gamma: T::one(),
            lambda: T::lit(0.1),
            tau_rankkl: T::lit(0.05),
            tau_pro: T::one(),
            tau_midnce: T::lit(0.05),
            tau_ir: T::lit(0.05),
            midnce_threshold: T::lit(0.5),
        }
    }
}

impl<T: Scalar> StsLossWeights<T> {
    /// Only the given component weights set; temperatures at their defaults.
    pub fn only(alpha: T, beta: T, gamma: T, lambda: T) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            lambda,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ];
        for (name, w) in weights {
            if !(w >= T::zero()) || !w.is_finite() {
                v.push(format!(
                    "{name} must be a non-negative finite weight, got {w}"
                ));
            }
        }
        if weights.iter().all(|(_, w)| *w <= T::zero()) {
            v.push("at least one of alpha, beta, gamma, lambda must be positive".into());
        }
        for (name, t) in [
            ("tau_rankkl", self.tau_rankkl),
            ("tau_pro", self.tau_pro),
            ("tau_midnce", self.tau_midnce),
            ("tau_ir", self.tau_ir),
        ] {
            if !(t > T::zero()) || !t.is_finite() {
                v.push(format!("{name} must be positive, got {t}"));
            }
        }
        if !(self.midnce_threshold >= T::zero() && self.midnce_threshold <= T::one()) {
            v.push(format!(
                "midnce_threshold must lie in [0, 1], got {}",
                self.midnce_threshold
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

pub(crate) fn check_tau<T: Scalar>(tau: T, name: &str) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{name} must be positive, got {tau}"
        )))
    }
}
