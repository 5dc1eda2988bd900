//! Checkpoint merging: weighted soups, delta-guided per-layer fusion of a
//! retrieval soup with a similarity soup, and spherical interpolation.
//!
//! Parameters are grouped into layers by name: `embed.*` forms the `embed`
//! layer and `layer.<i>.*` forms `layer.<i>`. Any other name is grouped by
//! its first dotted component.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Tensor};
use crate::corpus::TaskKind;
use crate::error::{Error, Result};

/// Layer a parameter belongs to, ordered embedding first, then by index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerLabel {
    Embed,
    Layer(usize),
    Other(String),
}

impl LayerLabel {
    pub fn of(name: &str) -> Self {
        let mut parts = name.split('.');
        let head = parts.next().unwrap_or_default();
        match head {
            "embed" => LayerLabel::Embed,
            "layer" => match parts.next().and_then(|i| i.parse().ok()) {
                Some(i) => LayerLabel::Layer(i),
                None => LayerLabel::Other(head.to_string()),
            },
            other => LayerLabel::Other(other.to_string()),
        }
    }
}

impl fmt::Display for LayerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerLabel::Embed => f.write_str("embed"),
            LayerLabel::Layer(i) => write!(f, "layer.{i}"),
            LayerLabel::Other(s) => f.write_str(s),
        }
    }
}

/// Per-layer L2 norm of the deviation from a base checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeltaProfile {
    pub layers: BTreeMap<LayerLabel, f64>,
}

pub fn delta_profile(tuned: &Checkpoint, base: &Checkpoint) -> Result<DeltaProfile> {
    tuned.check_compatible(base)?;
    let mut sq: BTreeMap<LayerLabel, f64> = BTreeMap::new();
    for (name, t) in tuned.iter() {
        let b = base.get(name).expect("compatible checkpoints share names");
        let s: f64 = t
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        *sq.entry(LayerLabel::of(name)).or_default() += s;
    }
    Ok(DeltaProfile {
        layers: sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect(),
    })
}

fn map_tensors(
    first: &Checkpoint,
    mut f: impl FnMut(&str, usize) -> Result<f64>,
) -> Result<Checkpoint> {
    let mut out = Checkpoint::new(first.meta.clone());
    for (name, t) in first.iter() {
        let data = (0..t.len())
            .map(|i| f(name, i))
            .collect::<Result<Vec<f64>>>()?;
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Weighted sum of one element across inputs; equal inputs return that
/// value exactly, so merging identical checkpoints is bitwise the identity.
fn combine(terms: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let mut it = terms.clone().map(|t| t.1);
    let first = it.next().unwrap_or(0.0);
    if it.all(|v| v.to_bits() == first.to_bits()) {
        return first;
    }
    terms.map(|(w, v)| w * v).sum()
}

/// Weighted parameter average. Metadata is taken from the first
/// checkpoint, with `extra.merge` recording the operation.
pub fn soup(checkpoints: &[&Checkpoint], weights: &[f64]) -> Result<Checkpoint> {
    if checkpoints.is_empty() {
        return Err(Error::Contract("soup of no checkpoints".into()));
    }
    if checkpoints.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} checkpoints with {} weights",
            checkpoints.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Contract(format!(
            "soup weights must be non-negative: {weights:?}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "soup weights sum to {total}, not 1"
        )));
    }
    for c in &checkpoints[1..] {
        checkpoints[0].check_compatible(c)?;
    }
    let mut out = map_tensors(checkpoints[0], |name, i| {
        Ok(combine(checkpoints.iter().zip(weights).map(|(c, &w)| {
            (w, c.get(name).expect("compatible").data()[i])
        })))
    })?;
    out.meta
        .extra
        .insert("merge".into(), format!("soup of {}", checkpoints.len()));
    Ok(out)
}

/// Uniform-weight soup.
pub fn uniform_soup(checkpoints: &[&Checkpoint]) -> Result<Checkpoint> {
    let w = vec![1.0 / checkpoints.len().max(1) as f64; checkpoints.len()];
    soup(checkpoints, &w)
}

/// How deltas are scaled before the per-layer softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaScaling {
    /// Z-score over all layers of both profiles jointly.
    #[default]
    Standardized,
    /// Raw L2 norms.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// `(w_ir, w_sts)` per layer.
    pub layers: BTreeMap<LayerLabel, (f64, f64)>,
    pub tau: f64,
}

pub fn layer_weights(
    delta_ir: &DeltaProfile,
    delta_sts: &DeltaProfile,
    tau: f64,
    scaling: DeltaScaling,
) -> Result<FusionWeights> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Contract(format!(
            "fusion temperature must be positive, got {tau}"
        )));
    }
    if !delta_ir.layers.keys().eq(delta_sts.layers.keys()) {
        return Err(Error::Contract(
            "delta profiles cover different layers".into(),
        ));
    }
    let (shift, scale) = match scaling {
        DeltaScaling::Raw => (0.0, 1.0),
        DeltaScaling::Standardized => {
            let all: Vec<f64> = delta_ir
                .layers
                .values()
                .chain(delta_sts.layers.values())
                .copied()
                .collect();
            let n = all.len().max(1) as f64;
            let mean = all.iter().sum::<f64>() / n;
            let sd = (all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        }
    };
    let layers = delta_ir
        .layers
        .iter()
        .map(|(label, &di)| {
            let ds = delta_sts.layers[label];
            let zi = (di - shift) / scale;
            let zs = (ds - shift) / scale;
            // two-way softmax in logistic form
            let w_ir = 1.0 / (1.0 + ((zs - zi) / tau).exp());
            (label.clone(), (w_ir, 1.0 - w_ir))
        })
        .collect();
    Ok(FusionWeights { layers, tau })
}

/// Per-layer convex combination of the two soups.
pub fn hierarchical_fuse(
    soup_ir: &Checkpoint,
    soup_sts: &Checkpoint,
    weights: &FusionWeights,
) -> Result<Checkpoint> {
    soup_ir.check_compatible(soup_sts)?;
    let mut per_name: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for name in soup_ir.names() {
        let label = LayerLabel::of(name);
        let w = weights
            .layers
            .get(&label)
            .ok_or_else(|| Error::Contract(format!("no fusion weight for layer {label}")))?;
        per_name.insert(name, *w);
    }
    let mut out = map_tensors(soup_ir, |name, i| {
        let (wi, ws) = per_name[name];
        Ok(combine(
            [
                (wi, soup_ir.get(name).expect("compatible").data()[i]),
                (ws, soup_sts.get(name).expect("compatible").data()[i]),
            ]
            .into_iter(),
        ))
    })?;
    out.meta
        .extra
        .insert("merge".into(), format!("hierarchical tau={}", weights.tau));
    Ok(out)
}

/// Angle below which slerp falls back to linear interpolation.
pub const SLERP_LINEAR_ANGLE: f64 = 1e-6;

/// Per-layer spherical interpolation of the flattened layer vectors.
pub fn slerp(a: &Checkpoint, b: &Checkpoint, t: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!(
            "slerp t must lie in [0, 1], got {t}"
        )));
    }
    a.check_compatible(b)?;
    let mut dots: BTreeMap<LayerLabel, (f64, f64, f64)> = BTreeMap::new();
    for (name, ta) in a.iter() {
        let tb = b.get(name).expect("compatible");
        let e = dots.entry(LayerLabel::of(name)).or_default();
        for (x, y) in ta.data().iter().zip(tb.data()) {
            e.0 += x * y;
            e.1 += x * x;
            e.2 += y * y;
        }
    }
    let mut coef: BTreeMap<LayerLabel, (f64, f64)> = BTreeMap::new();
    for (label, (ab, aa, bb)) in dots {
        let (na, nb) = (aa.sqrt(), bb.sqrt());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate(format!("layer {label} has zero norm")));
        }
        let omega = (ab / (na * nb)).clamp(-1.0, 1.0).acos();
        let c = if t == 0.0 {
            (1.0, 0.0)
        } else if t == 1.0 {
            (0.0, 1.0)
        } else if omega < SLERP_LINEAR_ANGLE {
            (1.0 - t, t)
        } else {
            let s = omega.sin();
            (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s)
        };
        coef.insert(label, c);
    }
    let mut out = map_tensors(a, |name, i| {
        let (ca, cb) = coef[&LayerLabel::of(name)];
        Ok(combine(
            [
                (ca, a.get(name).expect("compatible").data()[i]),
                (cb, b.get(name).expect("compatible").data()[i]),
            ]
            .into_iter(),
        ))
    })?;
    out.meta
        .extra
        .insert("merge".into(), format!("slerp t={t}"));
    Ok(out)
}

/// Dev-set scores of a candidate soup member.
#[derive(Debug, Clone, PartialEq)]
pub struct SoupCandidate {
    pub name: String,
    /// Mean nDCG@10 x 100.
    pub ir_score: f64,
    /// Spearman x 100.
    pub sts_score: f64,
}

impl SoupCandidate {
    pub fn score(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Ir => self.ir_score,
            TaskKind::Sts => self.sts_score,
        }
    }
}

/// Soup membership: candidates that excel at `task` (score at least
/// `min_task`) or are balanced (both scores at least `min_both`).
/// Returns indices in input order.
pub fn select_soup_members(
    candidates: &[SoupCandidate],
    task: TaskKind,
    min_task: f64,
    min_both: f64,
) -> Vec<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            c.score(task) >= min_task || (c.ir_score >= min_both && c.sts_score >= min_both)
        })
        .map(|(i, _)| i)
        .collect()
}
