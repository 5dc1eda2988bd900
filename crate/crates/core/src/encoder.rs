//! Toy text encoder: token embeddings, a stack of per-token affine + tanh
//! layers, and masked pooling, with hand-written backpropagation.
//!
//! Layers act on each token independently, so a batch is evaluated once
//! per distinct token id and pooled per text afterwards. Backward mirrors
//! that: pooled upstream gradients are scattered onto the distinct tokens
//! and pushed through the stack once per token.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Tensor};
use crate::error::{Error, Result};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average over unmasked positions.
    Mean,
    /// The first unmasked position.
    FirstToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layer_count: usize,
    pub pooling: Pooling,
    /// 1-based layer whose pooled output is the intermediate embedding;
    /// `None` means `ceil(layer_count / 2)`.
    pub mid_layer_index: Option<usize>,
    /// Adds the layer input to its output (`h + tanh(hW + b)`).
    pub residual: bool,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            dim: 32,
            layer_count: 2,
            pooling: Pooling::Mean,
            mid_layer_index: None,
            residual: true,
            init_seed: 0,
            init_scale: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn mid_layer(&self) -> usize {
        self.mid_layer_index.unwrap_or(self.layer_count.div_ceil(2))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.vocab_size == 0 {
            v.push("vocab_size must be positive".to_string());
        }
        if self.dim == 0 {
            v.push("dim must be positive".to_string());
        }
        if self.layer_count == 0 {
            v.push("layer_count must be at least 1".to_string());
        }
        let m = self.mid_layer();
        if m < 1 || m > self.layer_count {
            v.push(format!(
                "mid_layer_index must lie in [1, {}], got {m}",
                self.layer_count
            ));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            v.push(format!(
                "init_scale must be positive, got {}",
                self.init_scale
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

/// Token ids and an attention mask (`true` = position is used).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenizedText {
    pub fn plain(tokens: Vec<u32>) -> Self {
        let mask = vec![true; tokens.len()];
        Self { tokens, mask }
    }

    /// Prepends a task-prefix token that is masked out.
    pub fn with_prefix(prefix: u32, tokens: &[u32]) -> Self {
        let mut t = Vec::with_capacity(tokens.len() + 1);
        t.push(prefix);
        t.extend_from_slice(tokens);
        let mut mask = vec![true; t.len()];
        mask[0] = false;
        Self { tokens: t, mask }
    }
}

/// Encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    /// `embed.weight`, vocab x dim.
    pub embed: Matrix,
    /// `layer.<i>.weight`, dim x dim, applied as `h W`.
    pub weights: Vec<Matrix>,
    /// `layer.<i>.bias`.
    pub biases: Vec<Vec<f64>>,
}

impl EncoderState {
    /// Seeded uniform initialization in `(-init_scale, init_scale)`.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let s = config.init_scale;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-s..s)).collect() };
        let d = config.dim;
        let embed = Matrix::from_vec(config.vocab_size, d, draw(config.vocab_size * d))?;
        let mut weights = Vec::with_capacity(config.layer_count);
        let mut biases = Vec::with_capacity(config.layer_count);
        for _ in 0..config.layer_count {
            weights.push(Matrix::from_vec(d, d, draw(d * d))?);
            biases.push(draw(d));
        }
        Ok(Self {
            embed,
            weights,
            biases,
        })
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.dim;
        Self {
            embed: Matrix::zeros(config.vocab_size, d),
            weights: vec![Matrix::zeros(d, d); config.layer_count],
            biases: vec![vec![0.0; d]; config.layer_count],
        }
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut n = vec!["embed.weight".to_string()];
        for i in 1..=self.weights.len() {
            n.push(format!("layer.{i}.weight"));
            n.push(format!("layer.{i}.bias"));
        }
        n
    }

    /// Flat parameter slices, in [`names`](Self::names) order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut s = vec![self.embed.as_slice()];
        for (w, b) in self.weights.iter().zip(&self.biases) {
            s.push(w.as_slice());
            s.push(b.as_slice());
        }
        s
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = vec![self.embed.as_mut_slice()];
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            s.push(w.as_mut_slice());
            s.push(b.as_mut_slice());
        }
        s
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let mut ckpt = Checkpoint::new(meta);
        ckpt.insert(
            "embed.weight",
            Tensor::new(
                vec![self.embed.rows(), self.embed.cols()],
                self.embed.as_slice().to_vec(),
            )
            .expect("shape matches data"),
        );
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            ckpt.insert(
                &format!("layer.{}.weight", i + 1),
                Tensor::new(vec![w.rows(), w.cols()], w.as_slice().to_vec())
                    .expect("shape matches data"),
            );
            ckpt.insert(
                &format!("layer.{}.bias", i + 1),
                Tensor::new(vec![b.len()], b.clone()).expect("shape matches data"),
            );
        }
        ckpt
    }

    /// Rebuilds the state, checking every tensor's shape against `config`.
    pub fn from_checkpoint(config: &EncoderConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = ckpt
                .get(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape {
                return Err(Error::Contract(format!(
                    "{name} has shape {:?}, encoder expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.data().to_vec())
        };
        let embed = Matrix::from_vec(
            config.vocab_size,
            d,
            fetch("embed.weight", &[config.vocab_size, d])?,
        )?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 1..=config.layer_count {
            weights.push(Matrix::from_vec(
                d,
                d,
                fetch(&format!("layer.{i}.weight"), &[d, d])?,
            )?);
            biases.push(fetch(&format!("layer.{i}.bias"), &[d])?);
        }
        let expected = 1 + 2 * config.layer_count;
        if ckpt.len() != expected {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, encoder expects {expected}",
                ckpt.len()
            )));
        }
        Ok(Self {
            embed,
            weights,
            biases,
        })
    }
}

/// Parameter gradients; embedding rows are kept sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed_rows: BTreeMap<u32, Vec<f64>>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.dim;
        Self {
            embed_rows: BTreeMap::new(),
            weights: vec![Matrix::zeros(d, d); config.layer_count],
            biases: vec![vec![0.0; d]; config.layer_count],
        }
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if other.weights.len() != self.weights.len() {
            return Err(Error::Contract("gradient layer counts differ".into()));
        }
        for (t, row) in &other.embed_rows {
            let dst = self
                .embed_rows
                .entry(*t)
                .or_insert_with(|| vec![0.0; row.len()]);
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.as_mut_slice()
                .iter_mut()
                .zip(b.as_slice())
                .for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.embed_rows.values_mut() {
            row.iter_mut().for_each(|v| *v *= factor);
        }
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Dense form shaped like [`EncoderState`].
    pub fn to_dense(&self, config: &EncoderConfig) -> EncoderState {
        let mut s = EncoderState::zeros(config);
        for (t, row) in &self.embed_rows {
            s.embed.row_mut(*t as usize).copy_from_slice(row);
        }
        s.weights.clone_from(&self.weights);
        s.biases.clone_from(&self.biases);
        s
    }

    /// Name of the first parameter holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        for (t, row) in &self.embed_rows {
            if row.iter().any(|v| !v.is_finite()) {
                return Some(format!("embed.weight[{t}]"));
            }
        }
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if !w.is_finite() {
                return Some(format!("layer.{}.weight", i + 1));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Some(format!("layer.{}.bias", i + 1));
            }
        }
        None
    }

    pub fn is_zero(&self) -> bool {
        self.embed_rows.values().flatten().all(|&v| v == 0.0)
            && self
                .weights
                .iter()
                .all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.biases.iter().flatten().all(|&v| v == 0.0)
    }
}

/// Per-token activations of one batch, enough to run backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<u32>,
    /// `acts[l]` is the U x dim output of layer `l`; `acts[0]` the embeddings.
    acts: Vec<Matrix>,
    /// `tanhs[l - 1]` holds `tanh(acts[l-1] W_l + b_l)`.
    tanhs: Vec<Matrix>,
    /// Per text: `(distinct token slot, pooling weight)`.
    pools: Vec<Vec<(usize, f64)>>,
    dim: usize,
    layer_count: usize,
    mid_layer: usize,
}

impl ForwardCache {
    pub fn text_count(&self) -> usize {
        self.pools.len()
    }
}

/// Pooled final and intermediate embeddings of a batch, one row per text.
#[derive(Debug, Clone)]
pub struct BatchEncoding {
    pub final_emb: Matrix,
    pub mid_emb: Matrix,
    pub cache: ForwardCache,
}

/// Single-text result of [`Encoder::encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    pub final_emb: Vec<f64>,
    pub mid_emb: Vec<f64>,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub state: EncoderState,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let state = EncoderState::init(&config)?;
        Ok(Self { config, state })
    }

    pub fn with_state(config: EncoderConfig, state: EncoderState) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let ok = state.embed.shape() == (config.vocab_size, d)
            && state.weights.len() == config.layer_count
            && state.biases.len() == config.layer_count
            && state.weights.iter().all(|w| w.shape() == (d, d))
            && state.biases.iter().all(|b| b.len() == d);
        if !ok {
            return Err(Error::Contract(
                "encoder state does not match its config".into(),
            ));
        }
        Ok(Self { config, state })
    }

    fn pooling_weights(&self, text: &TokenizedText) -> Result<Vec<(u32, f64)>> {
        if text.mask.len() != text.tokens.len() {
            return Err(Error::Contract(format!(
                "mask of length {} for {} tokens",
                text.mask.len(),
                text.tokens.len()
            )));
        }
        let used: Vec<u32> = text
            .tokens
            .iter()
            .zip(&text.mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        if used.is_empty() {
            return Err(Error::Degenerate("every position is masked".into()));
        }
        if let Some(&t) = used.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Range(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(match self.config.pooling {
            Pooling::FirstToken => vec![(used[0], 1.0)],
            Pooling::Mean => {
                let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
                for t in &used {
                    *counts.entry(*t).or_default() += 1;
                }
                let n = used.len() as f64;
                counts.into_iter().map(|(t, c)| (t, c as f64 / n)).collect()
            }
        })
    }

    /// Runs the layer stack over the given distinct tokens.
    fn forward_tokens(&self, tokens: &[u32]) -> (Vec<Matrix>, Vec<Matrix>) {
        let d = self.config.dim;
        let u = tokens.len();
        let mut a0 = Matrix::zeros(u, d);
        for (i, &t) in tokens.iter().enumerate() {
            a0.row_mut(i)
                .copy_from_slice(self.state.embed.row(t as usize));
        }
        let mut acts = vec![a0];
        let mut tanhs = Vec::with_capacity(self.config.layer_count);
        for (w, b) in self.state.weights.iter().zip(&self.state.biases) {
            let prev = acts.last().expect("input layer present");
            let mut th = Matrix::zeros(u, d);
            let mut out = Matrix::zeros(u, d);
            for i in 0..u {
                let x = prev.row(i);
                let z = th.row_mut(i);
                z.copy_from_slice(b);
                for (k, &xk) in x.iter().enumerate() {
                    if xk != 0.0 {
                        for (zj, wkj) in z.iter_mut().zip(w.row(k)) {
                            *zj += xk * wkj;
                        }
                    }
                }
                z.iter_mut().for_each(|v| *v = v.tanh());
                let o = out.row_mut(i);
                o.copy_from_slice(th.row(i));
                if self.config.residual {
                    o.iter_mut().zip(x).for_each(|(a, b)| *a += b);
                }
            }
            tanhs.push(th);
            acts.push(out);
        }
        (acts, tanhs)
    }

    pub fn encode_batch(&self, texts: &[TokenizedText]) -> Result<BatchEncoding> {
        let d = self.config.dim;
        let per_text: Vec<Vec<(u32, f64)>> = texts
            .iter()
            .map(|t| self.pooling_weights(t))
            .collect::<Result<_>>()?;
        let mut slot: BTreeMap<u32, usize> = BTreeMap::new();
        for p in &per_text {
            for (t, _) in p {
                slot.insert(*t, 0);
            }
        }
        let tokens: Vec<u32> = slot.keys().copied().collect();
        for (i, s) in slot.values_mut().enumerate() {
            *s = i;
        }
        let (acts, tanhs) = self.forward_tokens(&tokens);
        let pools: Vec<Vec<(usize, f64)>> = per_text
            .iter()
            .map(|p| p.iter().map(|(t, w)| (slot[t], *w)).collect())
            .collect();
        let mid_layer = self.config.mid_layer();
        let pool = |layer: &Matrix| {
            let mut m = Matrix::zeros(pools.len(), d);
            for (r, p) in pools.iter().enumerate() {
                let row = m.row_mut(r);
                for &(s, w) in p {
                    row.iter_mut()
                        .zip(layer.row(s))
                        .for_each(|(a, b)| *a += w * b);
                }
            }
            m
        };
        let final_emb = pool(&acts[self.config.layer_count]);
        let mid_emb = pool(&acts[mid_layer]);
        Ok(BatchEncoding {
            final_emb,
            mid_emb,
            cache: ForwardCache {
                tokens,
                acts,
                tanhs,
                pools,
                dim: d,
                layer_count: self.config.layer_count,
                mid_layer,
            },
        })
    }

    pub fn encode(&self, text: &TokenizedText) -> Result<Encoded> {
        let b = self.encode_batch(std::slice::from_ref(text))?;
        Ok(Encoded {
            final_emb: b.final_emb.row(0).to_vec(),
            mid_emb: b.mid_emb.row(0).to_vec(),
            cache: b.cache,
        })
    }

    /// Final-layer embeddings of a batch, without keeping the cache.
    pub fn embed(&self, texts: &[TokenizedText]) -> Result<Matrix> {
        Ok(self.encode_batch(texts)?.final_emb)
    }

    /// Final-layer token embeddings of one text, one row per unmasked
    /// position, before pooling.
    pub fn token_matrix(&self, text: &TokenizedText) -> Result<Matrix> {
        self.pooling_weights(text)?;
        let used: Vec<u32> = text
            .tokens
            .iter()
            .zip(&text.mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        let (acts, _) = self.forward_tokens(&used);
        Ok(acts.into_iter().last().expect("final layer present"))
    }

    /// Gradients of a loss given its gradients with respect to the pooled
    /// final and (optionally) intermediate embeddings.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_final: &Matrix,
        d_mid: Option<&Matrix>,
    ) -> Result<Gradients> {
        let d = cache.dim;
        let n = cache.pools.len();
        if cache.layer_count != self.config.layer_count || d != self.config.dim {
            return Err(Error::Contract(
                "cache comes from a different encoder shape".into(),
            ));
        }
        if d_final.shape() != (n, d) {
            return Err(Error::Contract(format!(
                "final-embedding gradient has shape {:?}, expected ({n}, {d})",
                d_final.shape()
            )));
        }
        if let Some(m) = d_mid {
            if m.shape() != (n, d) {
                return Err(Error::Contract(format!(
                    "intermediate gradient has shape {:?}, expected ({n}, {d})",
                    m.shape()
                )));
            }
        }
        let u = cache.tokens.len();
        let scatter = |g: &Matrix| {
            let mut out = Matrix::zeros(u, d);
            for (r, p) in cache.pools.iter().enumerate() {
                for &(s, w) in p {
                    out.row_mut(s)
                        .iter_mut()
                        .zip(g.row(r))
                        .for_each(|(a, b)| *a += w * b);
                }
            }
            out
        };
        let mut grads = Gradients::zeros(&self.config);
        let mut dh = scatter(d_final);
        let mid = d_mid.map(scatter);
        for l in (1..=cache.layer_count).rev() {
            if l == cache.mid_layer {
                if let Some(m) = &mid {
                    dh.as_mut_slice()
                        .iter_mut()
                        .zip(m.as_slice())
                        .for_each(|(a, b)| *a += b);
                }
            }
            let th = &cache.tanhs[l - 1];
            let x = &cache.acts[l - 1];
            let w = &self.state.weights[l - 1];
            let gw = &mut grads.weights[l - 1];
            let gb = &mut grads.biases[l - 1];
            let mut dx = Matrix::zeros(u, d);
            let mut dz = vec![0.0; d];
            for i in 0..u {
                let dhi = dh.row(i);
                for j in 0..d {
                    let t = th.row(i)[j];
                    dz[j] = dhi[j] * (1.0 - t * t);
                }
                gb.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
                let xi = x.row(i);
                let dxi = dx.row_mut(i);
                for k in 0..d {
                    let xk = xi[k];
                    let wk = w.row(k);
                    let mut acc = 0.0;
                    let gwk = &mut gw.as_mut_slice()[k * d..(k + 1) * d];
                    for j in 0..d {
                        gwk[j] += xk * dz[j];
                        acc += wk[j] * dz[j];
                    }
                    dxi[k] = acc;
                }
                if self.config.residual {
                    dxi.iter_mut().zip(dhi).for_each(|(a, b)| *a += b);
                }
            }
            dh = dx;
        }
        for (i, &t) in cache.tokens.iter().enumerate() {
            grads.embed_rows.insert(t, dh.row(i).to_vec());
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            v.push(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("eps must be positive, got {}", self.eps));
        }
        v
    }
}

/// Adaptive-moment optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: EncoderState,
    v: EncoderState,
}

impl Adam {
    pub fn new(config: AdamConfig, encoder: &EncoderConfig) -> Self {
        Self {
            config,
            step: 0,
            m: EncoderState::zeros(encoder),
            v: EncoderState::zeros(encoder),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; a non-finite gradient aborts before any
    /// parameter changes.
    pub fn step(&mut self, encoder: &mut Encoder, grads: &Gradients) -> Result<()> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {name} at optimizer step {}",
                self.step + 1
            )));
        }
        if grads.weights.len() != encoder.config.layer_count {
            return Err(Error::Contract(
                "gradient layer count does not match the encoder".into(),
            ));
        }
        if let Some((&t, _)) = grads.embed_rows.iter().next_back() {
            if t as usize >= encoder.config.vocab_size {
                return Err(Error::Contract(format!(
                    "gradient for token {t} outside vocabulary"
                )));
            }
        }
        let dense = grads.to_dense(&encoder.config);
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let params = encoder.state.slices_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(dense.slices()) {
            if p.len() != g.len() {
                return Err(Error::Contract(
                    "gradient shape does not match parameters".into(),
                ));
            }
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize, residual: bool) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 10,
            dim: 4,
            layer_count: layers,
            residual,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn zero_affine_single_token_gives_tanh_bias() {
        let cfg = tiny(1, false);
        let mut enc = Encoder::new(cfg).unwrap();
        enc.state.weights[0] = Matrix::zeros(4, 4);
        enc.state.biases[0] = vec![0.5, -1.0, 0.0, 2.0];
        let out = enc.encode(&TokenizedText::plain(vec![3])).unwrap();
        let want: Vec<f64> = enc.state.biases[0].iter().map(|b| b.tanh()).collect();
        assert_eq!(out.final_emb, want);
    }

    #[test]
    fn mean_pooling_is_idempotent_under_duplication() {
        let enc = Encoder::new(tiny(2, true)).unwrap();
        let a = enc
            .encode(&TokenizedText::plain(vec![4, 7]))
            .unwrap()
            .final_emb;
        let b = enc
            .encode(&TokenizedText::plain(vec![4, 7, 4, 7]))
            .unwrap()
            .final_emb;
        assert_eq!(a, b);
    }

    #[test]
    fn all_masked_is_degenerate() {
        let enc = Encoder::new(tiny(1, true)).unwrap();
        let t = TokenizedText {
            tokens: vec![1, 2],
            mask: vec![false, false],
        };
        assert!(matches!(enc.encode(&t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn first_token_skips_masked_prefix() {
        let cfg = EncoderConfig {
            pooling: Pooling::FirstToken,
            ..tiny(2, true)
        };
        let enc = Encoder::new(cfg).unwrap();
        let a = enc
            .encode(&TokenizedText::with_prefix(0, &[5, 6]))
            .unwrap()
            .final_emb;
        let b = enc
            .encode(&TokenizedText::plain(vec![5]))
            .unwrap()
            .final_emb;
        assert_eq!(a, b);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let cfg = tiny(2, true);
        let mut enc = Encoder::new(cfg.clone()).unwrap();
        let before = enc.state.clone();
        let mut opt = Adam::new(AdamConfig::default(), &cfg);
        opt.step(&mut enc, &Gradients::zeros(&cfg)).unwrap();
        assert_eq!(enc.state, before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let cfg = tiny(1, true);
        let mut enc = Encoder::new(cfg.clone()).unwrap();
        let mut g = Gradients::zeros(&cfg);
        g.biases[0][2] = f64::NAN;
        let mut opt = Adam::new(AdamConfig::default(), &cfg);
        let err = opt.step(&mut enc, &g).unwrap_err();
        assert!(err.to_string().contains("layer.1.bias"));
    }
}
