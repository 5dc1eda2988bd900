//! Planted-topic synthetic corpora.
//!
//! The vocabulary is partitioned into reserved prefix tokens, a shared
//! background pool, one pool per topic group, and for each topic two
//! private "core" pools: a document register used by retrieval queries and
//! documents, and a sentence register used by similarity pairs. Topics in
//! the same group share their group pool, which makes siblings the nearest
//! neighbours of each other and the natural source of hard negatives.
//!
//! Retrieval relevance is topic identity. A similarity pair `(x1, x2)` is
//! built from a topic `a` and a mixing level `s`: `x1` is drawn from `a`,
//! `x2` splits its core positions between `a` and a second topic `b` in
//! the exact proportion `s`, and the label is `s` itself, quantized onto
//! `sts_score_levels` evenly spaced values.

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{detokenize, tokenize, TaskKind, UnifiedRecord};
use crate::error::{Error, Result};

/// Token ids reserved for the task prefixes.
pub const IR_PREFIX_TOKEN: u32 = 0;
pub const STS_PREFIX_TOKEN: u32 = 1;
const RESERVED_TOKENS: u32 = 2;

const BACKGROUND_FRACTION: f64 = 0.05;
const GROUP_FRACTION: f64 = 0.10;

// Similarity texts mix sentence-register core tokens with background.
const STS_CORE_P: f64 = 0.85;
const STS_MIN_CORE: usize = 5;

const MAX_UNIQUE_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub topic_count: usize,
    pub vocab_size: usize,
    /// Inclusive token-count range of retrieval documents.
    pub doc_length_range: (usize, usize),
    pub query_length_range: (usize, usize),
    /// Inclusive token-count range of each side of a similarity pair.
    pub sts_length_range: (usize, usize),
    pub sts_score_levels: usize,
    /// Probability that a retrieval token comes from its topic's core pool.
    pub ir_core_share: f64,
    /// Probability that a retrieval token comes from its group pool.
    pub ir_group_share: f64,
    /// Training records generated for each task.
    pub records_per_task: usize,
    pub topics_per_group: usize,
    pub max_positives: usize,
    pub max_hard_negatives: usize,
    pub eval_queries_per_topic: usize,
    pub eval_docs_per_topic: usize,
    pub eval_sts_records: usize,
    pub dev_queries_per_topic: usize,
    pub dev_sts_records: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topic_count: 32,
            vocab_size: 2000,
            doc_length_range: (12, 24),
            query_length_range: (3, 5),
            sts_length_range: (8, 14),
            sts_score_levels: 5,
            ir_core_share: 0.2,
            ir_group_share: 0.5,
            records_per_task: 8000,
            topics_per_group: 4,
            max_positives: 4,
            max_hard_negatives: 2,
            eval_queries_per_topic: 4,
            eval_docs_per_topic: 4,
            eval_sts_records: 1000,
            dev_queries_per_topic: 2,
            dev_sts_records: 500,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Lists every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.topic_count < 2 {
            v.push("topic_count must be at least 2".to_string());
        }
        if self.topics_per_group == 0 {
            v.push("topics_per_group must be positive".to_string());
        }
        if self.sts_score_levels < 2 {
            v.push("sts_score_levels must be at least 2".to_string());
        }
        let (c, g) = (self.ir_core_share, self.ir_group_share);
        if !(c > 0.0 && g >= 0.0 && c + g <= 1.0) {
            v.push(format!(
                "ir_core_share must be positive and ir_core_share + ir_group_share at most 1, got {c} and {g}"
            ));
        }
        if self.records_per_task == 0 {
            v.push("records_per_task must be positive".to_string());
        }
        for (name, (lo, hi)) in [
            ("doc_length_range", self.doc_length_range),
            ("query_length_range", self.query_length_range),
            ("sts_length_range", self.sts_length_range),
        ] {
            if lo < 1 || lo > hi {
                v.push(format!(
                    "{name} must satisfy 1 <= min <= max, got ({lo}, {hi})"
                ));
            }
        }
        if self.sts_length_range.0 < STS_MIN_CORE + 1 {
            v.push(format!(
                "sts_length_range minimum must be at least {}",
                STS_MIN_CORE + 1
            ));
        }
        if self.max_positives == 0 {
            v.push("max_positives must be positive".to_string());
        }
        if self.max_hard_negatives == 0 {
            v.push("max_hard_negatives must be positive".to_string());
        }
        if self.eval_queries_per_topic == 0 || self.eval_docs_per_topic == 0 {
            v.push("eval_queries_per_topic and eval_docs_per_topic must be positive".to_string());
        }
        if self.dev_queries_per_topic == 0 {
            v.push("dev_queries_per_topic must be positive".to_string());
        }
        if self.eval_sts_records < 2 || self.dev_sts_records < 2 {
            v.push("eval_sts_records and dev_sts_records must be at least 2".to_string());
        }
        if self.topic_count >= 2 && self.topics_per_group > 0 {
            let layout = VocabLayout::plan(self);
            if let Err(e) = layout {
                v.push(e.to_string());
            }
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

    fn group_count(&self) -> usize {
        self.topic_count.div_ceil(self.topics_per_group)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct VocabLayout {
    background: Range<u32>,
    groups: Vec<Range<u32>>,
    doc_core: Vec<Range<u32>>,
    sentence_core: Vec<Range<u32>>,
}

impl VocabLayout {
    fn plan(config: &SynthConfig) -> Result<Self> {
        let usable = config.vocab_size.saturating_sub(RESERVED_TOKENS as usize);
        let background = ((usable as f64 * BACKGROUND_FRACTION) as usize).max(1);
        let group_count = config.group_count();
        let per_group = ((usable as f64 * GROUP_FRACTION) as usize / group_count).max(1);
        let remaining = usable.saturating_sub(background + per_group * group_count);
        let per_register = remaining / (2 * config.topic_count);
        if per_register < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves {per_register} core tokens per topic register; need at least 4",
                config.vocab_size
            )));
        }
        let mut next = RESERVED_TOKENS;
        let mut take = |n: usize| {
            let r = next..next + n as u32;
            next += n as u32;
            r
        };
        let background = take(background);
        let groups = (0..group_count).map(|_| take(per_group)).collect();
        let doc_core = (0..config.topic_count)
            .map(|_| take(per_register))
            .collect();
        let sentence_core = (0..config.topic_count)
            .map(|_| take(per_register))
            .collect();
        Ok(Self {
            background,
            groups,
            doc_core,
            sentence_core,
        })
    }
}

/// What a token id stands for in the planted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Prefix,
    Background,
    Group(usize),
    DocumentCore(usize),
    SentenceCore(usize),
    /// Beyond the planned layout (unused ids at the end of the vocabulary).
    Unused,
}

/// The latent structure behind a synthetic corpus.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    config: SynthConfig,
    layout: VocabLayout,
    nearest: Vec<Vec<usize>>,
}

impl PlantedModel {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let layout = VocabLayout::plan(config)?;
        let mut model = Self {
            config: config.clone(),
            layout,
            nearest: Vec::new(),
        };
        model.nearest = (0..config.topic_count)
            .map(|k| model.compute_nearest(k))
            .collect();
        Ok(model)
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn topic_count(&self) -> usize {
        self.config.topic_count
    }

    pub fn group_of(&self, topic: usize) -> usize {
        topic / self.config.topics_per_group
    }

    pub fn role(&self, token: u32) -> TokenRole {
        let l = &self.layout;
        if token < RESERVED_TOKENS {
            return TokenRole::Prefix;
        }
        if l.background.contains(&token) {
            return TokenRole::Background;
        }
        if let Some(g) = l.groups.iter().position(|r| r.contains(&token)) {
            return TokenRole::Group(g);
        }
        if let Some(k) = l.doc_core.iter().position(|r| r.contains(&token)) {
            return TokenRole::DocumentCore(k);
        }
        if let Some(k) = l.sentence_core.iter().position(|r| r.contains(&token)) {
            return TokenRole::SentenceCore(k);
        }
        TokenRole::Unused
    }

    /// Dense latent token distribution of a topic's retrieval texts.
    pub fn ir_distribution(&self, topic: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.config.vocab_size];
        let mut spread = |r: &Range<u32>, mass: f64| {
            let w = mass / r.len() as f64;
            for t in r.clone() {
                p[t as usize] += w;
            }
        };
        let (c, g) = (self.config.ir_core_share, self.config.ir_group_share);
        spread(&self.layout.doc_core[topic], c);
        spread(&self.layout.groups[self.group_of(topic)], g);
        spread(&self.layout.background, 1.0 - c - g);
        p
    }

    fn compute_nearest(&self, topic: usize) -> Vec<usize> {
        let base = self.ir_distribution(topic);
        let overlaps: Vec<(usize, f64)> = (0..self.config.topic_count)
            .filter(|&j| j != topic)
            .map(|j| {
                let other = self.ir_distribution(j);
                let ov = base.iter().zip(&other).map(|(a, b)| a.min(*b)).sum::<f64>();
                (j, ov)
            })
            .collect();
        let best = overlaps
            .iter()
            .map(|o| o.1)
            .fold(f64::NEG_INFINITY, f64::max);
        overlaps
            .into_iter()
            .filter(|o| (o.1 - best).abs() < 1e-12)
            .map(|o| o.0)
            .collect()
    }

    /// Topics whose latent distribution overlaps `topic`'s the most.
    pub fn nearest_topics(&self, topic: usize) -> &[usize] {
        &self.nearest[topic]
    }

    fn pick(rng: &mut ChaCha8Rng, r: &Range<u32>) -> u32 {
        rng.gen_range(r.clone())
    }

    fn ir_text(&self, rng: &mut ChaCha8Rng, topic: usize, len: usize) -> Vec<u32> {
        let l = &self.layout;
        let (c, g) = (self.config.ir_core_share, self.config.ir_group_share);
        let mut toks: Vec<u32> = (0..len)
            .map(|_| {
                let u: f64 = rng.gen();
                if u < c {
                    Self::pick(rng, &l.doc_core[topic])
                } else if u < c + g {
                    Self::pick(rng, &l.groups[self.group_of(topic)])
                } else {
                    Self::pick(rng, &l.background)
                }
            })
            .collect();
        if !toks.iter().any(|t| l.doc_core[topic].contains(t)) {
            toks[0] = Self::pick(rng, &l.doc_core[topic]);
        }
        toks
    }

    /// A sentence whose core positions are split between `a` (fraction `s`)
    /// and `b`.
    fn sts_text(&self, rng: &mut ChaCha8Rng, a: usize, b: usize, s: f64, len: usize) -> Vec<u32> {
        let l = &self.layout;
        let mut core = (0..len).filter(|_| rng.gen::<f64>() < STS_CORE_P).count();
        core = core.clamp(STS_MIN_CORE, len);
        // snap to a multiple of the level count so every label is realized exactly
        let step = self.config.sts_score_levels - 1;
        if step <= len {
            core = (core - core % step).max(step);
        }
        let from_a = (s * core as f64).round() as usize;
        let mut toks = Vec::with_capacity(len);
        for i in 0..core {
            let topic = if i < from_a { a } else { b };
            toks.push(Self::pick(rng, &l.sentence_core[topic]));
        }
        for _ in core..len {
            toks.push(Self::pick(rng, &l.background));
        }
        toks.shuffle(rng);
        toks
    }

    fn length(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
        rng.gen_range(lo..=hi)
    }

    fn hard_negative_topic(&self, rng: &mut ChaCha8Rng, topic: usize) -> usize {
        *self.nearest[topic]
            .choose(rng)
            .expect("at least two topics")
    }

    fn sts_partner(&self, rng: &mut ChaCha8Rng, a: usize) -> usize {
        let siblings = &self.nearest[a];
        if rng.gen_bool(0.5) {
            *siblings.choose(rng).expect("at least two topics")
        } else {
            loop {
                let b = rng.gen_range(0..self.config.topic_count);
                if b != a {
                    return b;
                }
            }
        }
    }

    /// Topic histogram over core tokens (both registers): the planted
    /// oracle representation of a text.
    pub fn oracle_embedding(&self, text: &str) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.config.topic_count];
        for t in tokenize(text)? {
            match self.role(t) {
                TokenRole::DocumentCore(k) | TokenRole::SentenceCore(k) => h[k] += 1.0,
                _ => {}
            }
        }
        Ok(h)
    }

    /// Topic owning the most core tokens of `text` (lowest id on ties).
    pub fn dominant_topic(&self, text: &str) -> Result<Option<usize>> {
        let h = self.oracle_embedding(text)?;
        let best = h.iter().copied().fold(0.0, f64::max);
        Ok(if best > 0.0 {
            h.iter().position(|&x| x == best)
        } else {
            None
        })
    }
}

/// Generated datasets: train, dev (model selection), and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub ir_train: Vec<UnifiedRecord>,
    pub sts_train: Vec<UnifiedRecord>,
    pub ir_dev: Vec<UnifiedRecord>,
    pub sts_dev: Vec<UnifiedRecord>,
    pub ir_test: Vec<UnifiedRecord>,
    pub sts_test: Vec<UnifiedRecord>,
}

struct UniqueTexts {
    seen: HashSet<String>,
}

impl UniqueTexts {
    /// Draws until the text is new to the corpus.
    fn draw(&mut self, mut gen: impl FnMut() -> Vec<u32>) -> Result<String> {
        for _ in 0..MAX_UNIQUE_ATTEMPTS {
            let s = detokenize(&gen());
            if self.seen.insert(s.clone()) {
                return Ok(s);
            }
        }
        Err(Error::Config(
            "could not draw a text disjoint from earlier splits; increase lengths or vocab".into(),
        ))
    }
}

/// Generates the planted corpus; deterministic in `config.seed`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(PlantedModel, SynthCorpus)> {
    let model = PlantedModel::new(config)?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);

    let ir_train = (0..c.records_per_task)
        .map(|_| {
            let topic = rng.gen_range(0..c.topic_count);
            let qlen = PlantedModel::length(&mut rng, c.query_length_range);
            let query = detokenize(&model.ir_text(&mut rng, topic, qlen));
            let n_pos = rng.gen_range(1..=c.max_positives);
            let n_neg = rng.gen_range(1..=c.max_hard_negatives);
            let positives = (0..n_pos)
                .map(|_| {
                    let len = PlantedModel::length(&mut rng, c.doc_length_range);
                    detokenize(&model.ir_text(&mut rng, topic, len))
                })
                .collect();
            let negatives = (0..n_neg)
                .map(|_| {
                    let neg_topic = model.hard_negative_topic(&mut rng, topic);
                    let len = PlantedModel::length(&mut rng, c.doc_length_range);
                    detokenize(&model.ir_text(&mut rng, neg_topic, len))
                })
                .collect();
            UnifiedRecord::ir(query, positives, negatives)
        })
        .collect::<Vec<_>>();

    let sts_train = sts_records(&model, &mut rng, c.records_per_task, None)?;

    let mut unique = UniqueTexts {
        seen: ir_train
            .iter()
            .flat_map(|r| {
                std::iter::once(&r.query)
                    .chain(&r.positives)
                    .chain(&r.negatives)
            })
            .chain(
                sts_train
                    .iter()
                    .flat_map(|r| std::iter::once(&r.query).chain(&r.positives)),
            )
            .cloned()
            .collect(),
    };

    let ir_dev = ir_eval_records(&model, &mut rng, &mut unique, c.dev_queries_per_topic)?;
    let sts_dev = sts_records(&model, &mut rng, c.dev_sts_records, Some(&mut unique))?;
    let ir_test = ir_eval_records(&model, &mut rng, &mut unique, c.eval_queries_per_topic)?;
    let sts_test = sts_records(&model, &mut rng, c.eval_sts_records, Some(&mut unique))?;

    Ok((
        model,
        SynthCorpus {
            ir_train,
            sts_train,
            ir_dev,
            sts_dev,
            ir_test,
            sts_test,
        },
    ))
}

/// Evaluation records: every query lists all same-topic documents of the
/// split's pool as positives, and the nearest topic's documents as
/// negatives.
fn ir_eval_records(
    model: &PlantedModel,
    rng: &mut ChaCha8Rng,
    unique: &mut UniqueTexts,
    queries_per_topic: usize,
) -> Result<Vec<UnifiedRecord>> {
    let c = &model.config;
    let mut docs: Vec<Vec<String>> = Vec::with_capacity(c.topic_count);
    for topic in 0..c.topic_count {
        let mut pool = Vec::with_capacity(c.eval_docs_per_topic);
        for _ in 0..c.eval_docs_per_topic {
            pool.push(unique.draw(|| {
                let len = PlantedModel::length(rng, c.doc_length_range);
                model.ir_text(rng, topic, len)
            })?);
        }
        docs.push(pool);
    }
    let mut records = Vec::with_capacity(c.topic_count * queries_per_topic);
    for topic in 0..c.topic_count {
        for _ in 0..queries_per_topic {
            let query = unique.draw(|| {
                let len = PlantedModel::length(rng, c.query_length_range);
                model.ir_text(rng, topic, len)
            })?;
            let neg_topic = model.hard_negative_topic(rng, topic);
            records.push(UnifiedRecord::ir(
                query,
                docs[topic].clone(),
                docs[neg_topic].clone(),
            ));
        }
    }
    records.shuffle(rng);
    Ok(records)
}

fn sts_records(
    model: &PlantedModel,
    rng: &mut ChaCha8Rng,
    count: usize,
    mut unique: Option<&mut UniqueTexts>,
) -> Result<Vec<UnifiedRecord>> {
    let c = &model.config;
    let top = c.sts_score_levels - 1;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        // levels cycle so every level is equally represented
        let level = i % c.sts_score_levels;
        let s = level as f64 / top as f64;
        let a = rng.gen_range(0..c.topic_count);
        let b = model.sts_partner(rng, a);
        let make = |rng: &mut ChaCha8Rng, topic_a: usize, topic_b: usize, share: f64| {
            let len = PlantedModel::length(rng, c.sts_length_range);
            model.sts_text(rng, topic_a, topic_b, share, len)
        };
        let (x1, x2) = match unique.as_deref_mut() {
            Some(u) => (
                u.draw(|| make(rng, a, a, 1.0))?,
                u.draw(|| make(rng, a, b, s))?,
            ),
            None => (
                detokenize(&make(rng, a, a, 1.0)),
                detokenize(&make(rng, a, b, s)),
            ),
        };
        records.push(UnifiedRecord {
            task: TaskKind::Sts,
            query: x1,
            positives: vec![x2],
            negatives: Vec::new(),
            positive_scores: vec![s],
            negative_scores: Vec::new(),
        });
    }
    records.shuffle(rng);
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            records_per_task: 300,
            eval_sts_records: 100,
            dev_sts_records: 50,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn siblings_are_nearest_topics() {
        let m = PlantedModel::new(&SynthConfig::default()).unwrap();
        assert_eq!(m.nearest_topics(0), &[1, 2, 3]);
        assert_eq!(m.nearest_topics(5), &[4, 6, 7]);
    }

    #[test]
    fn roles_partition_the_vocabulary() {
        let m = PlantedModel::new(&SynthConfig::default()).unwrap();
        assert_eq!(m.role(0), TokenRole::Prefix);
        assert_eq!(m.role(2), TokenRole::Background);
        let mut doc = 0;
        let mut sent = 0;
        for t in 0..2000 {
            match m.role(t) {
                TokenRole::DocumentCore(_) => doc += 1,
                TokenRole::SentenceCore(_) => sent += 1,
                _ => {}
            }
        }
        assert_eq!(doc, sent);
        assert!(doc >= 32 * 4);
    }

    #[test]
    fn generated_records_validate_and_levels_are_exact() {
        let (_, corpus) = generate_synthetic(&small()).unwrap();
        for r in corpus
            .ir_train
            .iter()
            .chain(&corpus.sts_train)
            .chain(&corpus.ir_test)
        {
            r.validate().unwrap();
        }
        let levels: std::collections::BTreeSet<u64> = corpus
            .sts_train
            .iter()
            .map(|r| r.sts_label().unwrap().to_bits())
            .collect();
        assert_eq!(levels.len(), 5);
        for r in &corpus.ir_train {
            assert!((1..=4).contains(&r.positives.len()));
            assert!(!r.negatives.is_empty());
        }
    }

    #[test]
    fn rejects_tiny_vocabulary() {
        let c = SynthConfig {
            vocab_size: 100,
            ..SynthConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = SynthConfig {
            sts_score_levels: 1,
            ..SynthConfig::default()
        };
        assert!(c
            .violations()
            .iter()
            .any(|v| v.contains("sts_score_levels")));
    }
}
