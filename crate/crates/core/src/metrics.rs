//! Retrieval and similarity metrics, and evaluation drivers.

use std::collections::HashMap;

use crate::corpus::{
    tokenize, PlantedModel, TaskKind, UnifiedRecord, IR_PREFIX_TOKEN, STS_PREFIX_TOKEN,
};
use crate::encoder::{Encoder, TokenizedText};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::losses::average_ranks;
use crate::scalar::Scalar;
use crate::Matrix;

fn dcg<T: Scalar>(rels: &[T], k: usize) -> T {
    rels.iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| r / T::from_usize_lossy(i + 2).log2())
        .sum()
}

/// nDCG@k of a model ranking. `ranked` lists relevances in model order;
/// `ideal_pool` holds every relevance of the query. An ideal DCG of zero
/// yields zero.
pub fn ndcg_at_k<T: Scalar>(ranked: &[T], ideal_pool: &[T], k: usize) -> Result<T> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if ranked
        .iter()
        .chain(ideal_pool)
        .any(|r| !(*r >= T::zero()) || !r.is_finite())
    {
        return Err(Error::Contract(
            "relevances must be finite and non-negative".into(),
        ));
    }
    let mut ideal = ideal_pool.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let idcg = dcg(&ideal, k);
    if idcg <= T::zero() {
        return Ok(T::zero());
    }
    Ok(dcg(ranked, k) / idcg)
}

/// Pearson correlation; errors on fewer than two points or a constant side.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "{} vs {} values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Contract(
            "correlation needs at least two points".into(),
        ));
    }
    let n = T::from_usize_lossy(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return Err(Error::Degenerate("correlation of a constant list".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt()))
        .max(-T::one())
        .min(T::one()))
}

/// Spearman's rho as the Pearson correlation of tie-averaged ranks.
pub fn spearman<T: Scalar>(predicted: &[T], labels: &[T]) -> Result<T> {
    if predicted.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    if predicted.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    pearson(&average_ranks(predicted), &average_ranks(labels))
}

/// Anything that maps texts to embedding rows.
pub trait TextEncoder {
    fn embed_texts(&self, texts: &[&str], task: TaskKind) -> Result<Matrix>;
}

fn prefix(task: TaskKind) -> u32 {
    match task {
        TaskKind::Ir => IR_PREFIX_TOKEN,
        TaskKind::Sts => STS_PREFIX_TOKEN,
    }
}

/// Tokenizes with the masked task-prefix token.
pub fn prepare(text: &str, task: TaskKind) -> Result<TokenizedText> {
    Ok(TokenizedText::with_prefix(prefix(task), &tokenize(text)?))
}

impl TextEncoder for Encoder {
    fn embed_texts(&self, texts: &[&str], task: TaskKind) -> Result<Matrix> {
        let prepared = texts
            .iter()
            .map(|t| prepare(t, task))
            .collect::<Result<Vec<_>>>()?;
        self.embed(&prepared)
    }
}

/// The planted topic histogram as an encoder: the ceiling on synthetic data.
impl TextEncoder for PlantedModel {
    fn embed_texts(&self, texts: &[&str], _task: TaskKind) -> Result<Matrix> {
        let rows = texts
            .iter()
            .map(|t| self.oracle_embedding(t))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrEvaluation {
    pub mean_ndcg: f64,
    pub per_query: Vec<f64>,
}

/// Mean nDCG@k. The candidate pool is every document listed by any record;
/// a query's relevances are its listed positives (graded when scores are
/// given, else 1) and zero elsewhere. Ranking is by cosine, ties broken by
/// ascending pool index.
pub fn evaluate_ir(
    encoder: &impl TextEncoder,
    records: &[UnifiedRecord],
    k: usize,
) -> Result<IrEvaluation> {
    if records.is_empty() {
        return Err(Error::EmptyBatch(
            "retrieval evaluation corpus is empty".into(),
        ));
    }
    let mut pool: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        if r.task != TaskKind::Ir {
            return Err(Error::Validation(
                "retrieval evaluation given a non-IR record".into(),
            ));
        }
        for d in r.positives.iter().chain(&r.negatives) {
            index.entry(d.as_str()).or_insert_with(|| {
                pool.push(d.as_str());
                pool.len() - 1
            });
        }
    }
    let queries: Vec<&str> = records.iter().map(|r| r.query.as_str()).collect();
    let q = encoder.embed_texts(&queries, TaskKind::Ir)?;
    let docs = encoder.embed_texts(&pool, TaskKind::Ir)?;
    let mut per_query = Vec::with_capacity(records.len());
    for (qi, r) in records.iter().enumerate() {
        let mut rel = vec![0.0; pool.len()];
        for (j, d) in r.positives.iter().enumerate() {
            rel[index[d.as_str()]] = r.positive_scores.get(j).copied().unwrap_or(1.0);
        }
        if rel.iter().all(|&x| x == 0.0) {
            return Err(Error::Validation(format!(
                "query {qi} has no relevant document"
            )));
        }
        let scores = (0..pool.len())
            .map(|d| cosine(q.row(qi), docs.row(d)))
            .collect::<Result<Vec<f64>>>()?;
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let ranked: Vec<f64> = order.iter().map(|&d| rel[d]).collect();
        per_query.push(ndcg_at_k(&ranked, &rel, k)?);
    }
    let mean_ndcg = per_query.iter().sum::<f64>() / per_query.len() as f64;
    Ok(IrEvaluation {
        mean_ndcg,
        per_query,
    })
}

/// Cosine predictions for similarity records, in record order.
pub fn sts_predictions(encoder: &impl TextEncoder, records: &[UnifiedRecord]) -> Result<Vec<f64>> {
    let mut left = Vec::with_capacity(records.len());
    let mut right = Vec::with_capacity(records.len());
    for r in records {
        if r.task != TaskKind::Sts || r.positives.len() != 1 {
            return Err(Error::Validation(
                "similarity evaluation needs STS records".into(),
            ));
        }
        left.push(r.query.as_str());
        right.push(r.positives[0].as_str());
    }
    let a = encoder.embed_texts(&left, TaskKind::Sts)?;
    let b = encoder.embed_texts(&right, TaskKind::Sts)?;
    (0..records.len())
        .map(|i| cosine(a.row(i), b.row(i)))
        .collect()
}

/// Spearman x 100 between cosine predictions and labels.
pub fn evaluate_sts(encoder: &impl TextEncoder, records: &[UnifiedRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyBatch(
            "similarity evaluation corpus is empty".into(),
        ));
    }
    let pred = sts_predictions(encoder, records)?;
    let labels: Vec<f64> = records
        .iter()
        .map(|r| r.sts_label().expect("checked STS"))
        .collect();
    Ok(100.0 * spearman(&pred, &labels)?)
}

/// Per-dataset scores on the 0..100 scale and their averages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSummary {
    /// `(dataset, nDCG@10 x 100)`.
    pub ir: Vec<(String, f64)>,
    /// `(dataset, Spearman x 100)`.
    pub sts: Vec<(String, f64)>,
}

impl EvalSummary {
    fn mean(v: &[(String, f64)]) -> Option<f64> {
        (!v.is_empty()).then(|| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64)
    }

    pub fn avg_ir(&self) -> Option<f64> {
        Self::mean(&self.ir)
    }

    pub fn avg_sts(&self) -> Option<f64> {
        Self::mean(&self.sts)
    }

    /// Mean of the two task averages, or the one present.
    pub fn avg(&self) -> Option<f64> {
        match (self.avg_ir(), self.avg_sts()) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            (a, b) => a.or(b),
        }
    }
}

/// Evaluates named datasets of either task at nDCG@10 / Spearman.
pub fn evaluate_datasets(
    encoder: &impl TextEncoder,
    datasets: &[(String, TaskKind, &[UnifiedRecord])],
) -> Result<EvalSummary> {
    let mut s = EvalSummary::default();
    for (name, task, records) in datasets {
        match task {
            TaskKind::Ir => s.ir.push((
                name.clone(),
                100.0 * evaluate_ir(encoder, records, 10)?.mean_ndcg,
            )),
            TaskKind::Sts => s.sts.push((name.clone(), evaluate_sts(encoder, records)?)),
        }
    }
    Ok(s)
}
