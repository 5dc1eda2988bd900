//! Embedding-space diagnostics over token-embedding matrices: mean pairwise
//! token cosine, numerical rank, condition number and singular-value
//! entropy.

use serde::Serialize;

use crate::corpus::TaskKind;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::linalg::{cosine, singular_values, Matrix};
use crate::metrics::prepare;
use crate::scalar::Scalar;
use crate::Matrix as Matrix64;

/// Mean cosine over ordered pairs of distinct rows.
pub fn tok_sim<T: Scalar>(x: &Matrix<T>) -> Result<T> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "token similarity needs two rows, got {n}"
        )));
    }
    let mut sum = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            sum += cosine(x.row(i), x.row(j))?;
        }
    }
    Ok(T::lit(2.0) * sum / T::from_usize_lossy(n * (n - 1)))
}

fn tolerance<T: Scalar>(x: &Matrix<T>, sigma_max: T) -> T {
    T::from_usize_lossy(x.rows().max(x.cols())) * T::epsilon() * sigma_max
}

/// Singular values above `max(n, d) * eps * sigma_max`.
pub fn numerical_rank<T: Scalar>(x: &Matrix<T>) -> usize {
    let sv = singular_values(x);
    let Some(&top) = sv.first() else {
        return 0;
    };
    let tol = tolerance(x, top);
    sv.iter().filter(|&&s| s > tol).count()
}

/// `sigma_max / sigma_min` over `min(n, d)` singular values; infinite when
/// the smallest is at or below the rank tolerance.
pub fn condition_number<T: Scalar>(x: &Matrix<T>) -> T {
    let sv = singular_values(x);
    let (Some(&top), Some(&bottom)) = (sv.first(), sv.last()) else {
        return T::infinity();
    };
    if top <= T::zero() || bottom <= tolerance(x, top) {
        return T::infinity();
    }
    top / bottom
}

/// Entropy (nats) of `p_i = sigma_i^2 / sum sigma_j^2`.
pub fn svd_entropy<T: Scalar>(x: &Matrix<T>) -> Result<T> {
    let sv = singular_values(x);
    let total: T = sv.iter().map(|&s| s * s).sum();
    if !(total > T::zero()) {
        return Err(Error::Degenerate("entropy of an all-zero matrix".into()));
    }
    Ok(sv
        .iter()
        .map(|&s| s * s / total)
        .filter(|&p| p > T::zero())
        .map(|p| -p * p.ln())
        .sum())
}

/// All four diagnostics of one matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometryReport {
    pub tok_sim: f64,
    pub rank: f64,
    /// `f64::INFINITY` marks a numerically singular matrix.
    pub condition_number: f64,
    pub svd_entropy: f64,
}

pub fn diagnose_matrix(x: &Matrix64) -> Result<GeometryReport> {
    Ok(GeometryReport {
        tok_sim: tok_sim(x)?,
        rank: numerical_rank(x) as f64,
        condition_number: condition_number(x),
        svd_entropy: svd_entropy(x)?,
    })
}

/// Corpus average of per-text reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusGeometry {
    pub mean: GeometryReport,
    pub texts: usize,
    /// Texts with fewer than two unmasked tokens.
    pub skipped: usize,
    /// Texts whose condition number was infinite (excluded from its mean).
    pub singular: usize,
}

/// Scores every text's final-layer token matrix and averages. Condition
/// numbers are averaged over the non-singular texts only.
pub fn diagnose_corpus(
    encoder: &Encoder,
    texts: &[&str],
    task: TaskKind,
) -> Result<CorpusGeometry> {
    let mut sums = [0.0f64; 4];
    let (mut used, mut skipped, mut singular) = (0usize, 0usize, 0usize);
    for text in texts {
        let prepared = prepare(text, task)?;
        if prepared.mask.iter().filter(|&&m| m).count() < 2 {
            skipped += 1;
            continue;
        }
        let r = diagnose_matrix(&encoder.token_matrix(&prepared)?)?;
        sums[0] += r.tok_sim;
        sums[1] += r.rank;
        if r.condition_number.is_finite() {
            sums[2] += r.condition_number;
        } else {
            singular += 1;
        }
        sums[3] += r.svd_entropy;
        used += 1;
    }
    if skipped > 0 {
        log::info!("geometry: skipped {skipped} texts with fewer than two tokens");
    }
    if used == 0 {
        return Err(Error::EmptyBatch("no text has two or more tokens".into()));
    }
    let n = used as f64;
    let finite = used - singular;
    Ok(CorpusGeometry {
        mean: GeometryReport {
            tok_sim: sums[0] / n,
            rank: sums[1] / n,
            condition_number: if finite > 0 {
                sums[2] / finite as f64
            } else {
                f64::INFINITY
            },
            svd_entropy: sums[3] / n,
        },
        texts: used,
        skipped,
        singular,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_metrics() {
        let i = Matrix::<f64>::identity(3);
        assert_eq!(tok_sim(&i).unwrap(), 0.0);
        assert_eq!(numerical_rank(&i), 3);
        assert!((condition_number(&i) - 1.0).abs() < 1e-12);
        assert!((svd_entropy(&i).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn diag_condition() {
        let d = Matrix::from_rows(&[[10.0f64, 0.0], [0.0, 1.0]]).unwrap();
        assert!((condition_number(&d) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one() {
        let m = Matrix::from_rows(&[[1.0f64, 2.0], [2.0, 4.0], [-1.0, -2.0]]).unwrap();
        assert_eq!(numerical_rank(&m), 1);
        assert!(svd_entropy(&m).unwrap().abs() < 1e-12);
        assert!(condition_number(&m).is_infinite());
        assert!((tok_sim(&m).unwrap() - (1.0 - 1.0 - 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_entropy_is_degenerate() {
        assert!(svd_entropy(&Matrix::<f64>::zeros(2, 2)).is_err());
    }
}
