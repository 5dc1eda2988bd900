//! Training driver: walks an iteration plan, routes each device batch to
//! its task's loss, backpropagates through the encoder and takes an Adam
//! step.
//!
//! Retrieval shards are gathered across devices in device order into one
//! contrastive batch. Similarity shards are scored per device and the
//! device losses are averaged. In Mixed mode the retrieval devices of a
//! step gather among themselves and the step loss is the mean over all
//! devices.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::corpus::{Dataset, TaskKind, UnifiedRecord};
use crate::encoder::{Adam, AdamConfig, Encoder, EncoderConfig, TokenizedText};
use crate::error::{Error, Result};
use crate::linalg::accumulate_cosine_grad;
use crate::losses::{
    cosent_loss, infonce_baseline, ir_infonce_multi, sts_combined, IrBatch, ScoredPairBatch,
    StsLossWeights,
};
use crate::metrics::{evaluate_datasets, prepare, EvalSummary};
use crate::sampler::{dataset_specs, DeviceBatch, IterationPlan, Planner, SamplerConfig, StepTask};
use crate::Matrix;

/// Which objectives a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Multi-positive InfoNCE for retrieval, the combined listwise
    /// objective for similarity.
    Joint,
    /// InfoNCE for both tasks; similarity labels only filter positives.
    InfonceOnly,
    /// CoSENT for both tasks; retrieval positives are labeled 1 and
    /// negatives 0.
    CosentOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub losses: StsLossWeights,
    /// Positives per retrieval query.
    pub k_pos: usize,
    /// Hard negatives per retrieval query.
    pub k_neg: usize,
    /// Temperature of the CoSENT and InfoNCE baselines.
    pub baseline_tau: f64,
    pub optimizer: AdamConfig,
    pub total_steps: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            sampler: SamplerConfig::default(),
            losses: StsLossWeights::default(),
            k_pos: 1,
            k_neg: 1,
            baseline_tau: 0.05,
            optimizer: AdamConfig::default(),
            total_steps: 2000,
            eval_every: 200,
            checkpoint_every: 200,
            loss_mode: LossMode::Joint,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Sets the run seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sampler.seed = seed;
        self.encoder.init_seed = seed;
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(
            self.encoder
                .violations()
                .into_iter()
                .map(|e| format!("encoder: {e}")),
        );
        v.extend(
            self.sampler
                .violations()
                .into_iter()
                .map(|e| format!("sampler: {e}")),
        );
        v.extend(
            self.losses
                .violations()
                .into_iter()
                .map(|e| format!("losses: {e}")),
        );
        v.extend(
            self.optimizer
                .violations()
                .into_iter()
                .map(|e| format!("optimizer: {e}")),
        );
        if self.k_pos == 0 {
            v.push("k_pos must be at least 1".to_string());
        }
        if !(self.baseline_tau > 0.0) {
            v.push(format!(
                "baseline_tau must be positive, got {}",
                self.baseline_tau
            ));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            v.push("eval_every and checkpoint_every must be at least 1".to_string());
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

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A named evaluation dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub task: TaskKind,
    pub records: Vec<UnifiedRecord>,
}

impl From<Dataset> for EvalSet {
    fn from(d: Dataset) -> Self {
        Self {
            name: d.name,
            task: d.task,
            records: d.records,
        }
    }
}

pub fn evaluate_sets(encoder: &Encoder, sets: &[EvalSet]) -> Result<EvalSummary> {
    let views: Vec<(String, TaskKind, &[UnifiedRecord])> = sets
        .iter()
        .map(|s| (s.name.clone(), s.task, s.records.as_slice()))
        .collect();
    evaluate_datasets(encoder, &views)
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Step {
        step: usize,
        task: StepTask,
        /// Dataset name per device.
        datasets: Vec<String>,
        loss: f64,
        components: BTreeMap<String, f64>,
        lr: f64,
        /// Tasks whose losses contributed gradient to this update.
        grad_tasks: Vec<TaskKind>,
        skipped_shards: usize,
    },
    Eval {
        step: usize,
        split: String,
        ir: BTreeMap<String, f64>,
        sts: BTreeMap<String, f64>,
        avg_ir: Option<f64>,
        avg_sts: Option<f64>,
        avg: Option<f64>,
    },
}

impl LogLine {
    fn eval(step: usize, split: &str, s: &EvalSummary) -> Self {
        LogLine::Eval {
            step,
            split: split.to_string(),
            ir: s.ir.iter().cloned().collect(),
            sts: s.sts.iter().cloned().collect(),
            avg_ir: s.avg_ir(),
            avg_sts: s.avg_sts(),
            avg: s.avg(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub initial: Checkpoint,
    /// Weights at the best dev-Avg evaluation.
    pub best: Encoder,
    pub best_step: usize,
    pub final_encoder: Encoder,
    /// Periodic checkpoints with their dev summaries.
    pub checkpoints: Vec<(usize, Checkpoint, EvalSummary)>,
    pub dev_history: Vec<(usize, EvalSummary)>,
    /// Test-split scores of `best`.
    pub test: EvalSummary,
    pub log: Vec<LogLine>,
}

impl TrainRun {
    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for l in &self.log {
            s.push_str(&l.to_json());
            s.push('\n');
        }
        s
    }

    pub fn meta(&self, step: usize) -> CheckpointMeta {
        meta_for(&self.config, step)
    }
}

fn meta_for(config: &TrainConfig, step: usize) -> CheckpointMeta {
    CheckpointMeta {
        config_hash: config.hash(),
        step: step as u64,
        seed: config.seed,
        extra: BTreeMap::new(),
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x005E_ED0F_57E9;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `k` items from `pool`: a random subset when the pool is large enough,
/// otherwise a shuffled cycle through it.
fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [String], k: usize) -> Vec<&'a str> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    (0..k).map(|i| pool[idx[i % idx.len()]].as_str()).collect()
}

/// Texts of one step, encoded together.
struct StepTexts {
    texts: Vec<TokenizedText>,
}

impl StepTexts {
    fn add(&mut self, text: &str, task: TaskKind) -> Result<usize> {
        self.texts.push(prepare(text, task)?);
        Ok(self.texts.len() - 1)
    }
}

#[derive(Default)]
struct IrGroup {
    queries: Vec<usize>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
    device_of: Vec<usize>,
}

impl IrGroup {
    /// Splits a gathered group into one group per device.
    fn per_device(self, k_pos: usize, k_neg: usize) -> Vec<IrGroup> {
        let mut out: BTreeMap<usize, IrGroup> = BTreeMap::new();
        let k_neg = if self.negatives.is_empty() { 0 } else { k_neg };
        for (i, &dev) in self.device_of.iter().enumerate() {
            let g = out.entry(dev).or_default();
            g.queries.push(self.queries[i]);
            g.device_of.push(dev);
            g.positives
                .extend_from_slice(&self.positives[i * k_pos..(i + 1) * k_pos]);
            g.negatives
                .extend_from_slice(&self.negatives[i * k_neg..(i + 1) * k_neg]);
        }
        out.into_values().collect()
    }
}

struct StsShard {
    left: Vec<usize>,
    right: Vec<usize>,
    labels: Vec<f64>,
}

fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

fn scatter_rows(dst: &mut Matrix, rows: &[usize], src: &Matrix, scale: f64) {
    for (i, &r) in rows.iter().enumerate() {
        dst.row_mut(r)
            .iter_mut()
            .zip(src.row(i))
            .for_each(|(a, b)| *a += scale * b);
    }
}

/// Per-step outcome, before the optimizer update.
pub struct StepOutcome {
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub grad_tasks: Vec<TaskKind>,
    pub skipped_shards: usize,
    pub grads: crate::encoder::Gradients,
}

/// Loss and gradients of one planned iteration.
pub fn step_gradients(
    encoder: &Encoder,
    config: &TrainConfig,
    datasets: &[Dataset],
    plan: &IterationPlan,
) -> Result<StepOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(config.seed, plan.step));
    let mut texts = StepTexts { texts: Vec::new() };
    let devices = plan.batches.len().max(1) as f64;

    let ir_devices: Vec<&DeviceBatch> = plan
        .batches
        .iter()
        .filter(|b| b.task == TaskKind::Ir)
        .collect();
    let sts_devices: Vec<&DeviceBatch> = plan
        .batches
        .iter()
        .filter(|b| b.task == TaskKind::Sts)
        .collect();

    let mut ir = IrGroup {
        queries: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
        device_of: Vec::new(),
    };
    for b in &ir_devices {
        let ds = &datasets[b.dataset_id];
        for &ri in &b.record_indices {
            let r = &ds.records[ri];
            ir.queries.push(texts.add(&r.query, TaskKind::Ir)?);
            ir.device_of.push(b.device_id);
            for p in pick(&mut rng, &r.positives, config.k_pos) {
                let i = texts.add(p, TaskKind::Ir)?;
                ir.positives.push(i);
            }
            if config.k_neg > 0 {
                let negs: Vec<String> = if r.negatives.is_empty() {
                    // stand-in negatives: positives of other records
                    (0..config.k_neg)
                        .map(|_| {
                            let other = &ds.records[rng.gen_range(0..ds.records.len())];
                            other.positives[rng.gen_range(0..other.positives.len())].clone()
                        })
                        .collect()
                } else {
                    pick(&mut rng, &r.negatives, config.k_neg)
                        .into_iter()
                        .map(str::to_string)
                        .collect()
                };
                for n in &negs {
                    let i = texts.add(n, TaskKind::Ir)?;
                    ir.negatives.push(i);
                }
            }
        }
    }

    let mut shards = Vec::new();
    for b in &sts_devices {
        let ds = &datasets[b.dataset_id];
        let mut s = StsShard {
            left: Vec::new(),
            right: Vec::new(),
            labels: Vec::new(),
        };
        for &ri in &b.record_indices {
            let r = &ds.records[ri];
            s.left.push(texts.add(&r.query, TaskKind::Sts)?);
            s.right.push(texts.add(&r.positives[0], TaskKind::Sts)?);
            s.labels.push(
                r.sts_label()
                    .ok_or_else(|| Error::Validation("STS record without label".into()))?,
            );
        }
        shards.push(s);
    }

    let enc = encoder.encode_batch(&texts.texts)?;
    let d = encoder.config.dim;
    let mut d_final = Matrix::zeros(texts.texts.len(), d);
    let mut d_mid = Matrix::zeros(texts.texts.len(), d);
    let mut loss = 0.0;
    let mut components: BTreeMap<String, f64> = BTreeMap::new();
    let mut grad_tasks = Vec::new();
    let mut skipped = 0usize;

    if !ir.queries.is_empty() {
        let groups = if plan.cross_device_negatives {
            vec![ir]
        } else {
            ir.per_device(config.k_pos, config.k_neg)
        };
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for ir in &groups {
            // share of the step's devices scored by this group
            let weight = ir
                .device_of
                .iter()
                .collect::<std::collections::BTreeSet<_>>()
                .len() as f64
                / devices;
            let q = gather_rows(&enc.final_emb, &ir.queries);
            let p = gather_rows(&enc.final_emb, &ir.positives);
            match config.loss_mode {
                LossMode::Joint | LossMode::InfonceOnly => {
                    let n = gather_rows(&enc.final_emb, &ir.negatives);
                    let k_neg = if ir.negatives.is_empty() {
                        0
                    } else {
                        config.k_neg
                    };
                    let batch = IrBatch::new(q, p, n, config.k_pos, k_neg, ir.device_of.clone())?;
                    let r = ir_infonce_multi(&batch, config.losses.tau_ir)?;
                    loss += weight * r.value;
                    *sums.entry("ir_infonce".into()).or_default() += r.value;
                    scatter_rows(&mut d_final, &ir.queries, &r.grads.queries, weight);
                    scatter_rows(&mut d_final, &ir.positives, &r.grads.positives, weight);
                    scatter_rows(&mut d_final, &ir.negatives, &r.grads.negatives, weight);
                }
                LossMode::CosentOnly => {
                    // (query, document) pairs over the gathered pool
                    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
                    for (qi, &qrow) in ir.queries.iter().enumerate() {
                        for j in 0..config.k_pos {
                            pairs.push((qrow, ir.positives[qi * config.k_pos + j], 1.0));
                        }
                        for j in 0..config
                            .k_neg
                            .min(ir.negatives.len() / ir.queries.len().max(1))
                        {
                            pairs.push((qrow, ir.negatives[qi * config.k_neg + j], 0.0));
                        }
                    }
                    let (value, _) = cosent_on_pairs(
                        &enc.final_emb,
                        &pairs,
                        config.baseline_tau,
                        weight,
                        &mut d_final,
                    )?;
                    loss += weight * value;
                    *sums.entry("ir_cosent".into()).or_default() += value;
                }
            }
        }
        for (k, v) in sums {
            components.insert(k, v / groups.len() as f64);
        }
        grad_tasks.push(TaskKind::Ir);
    }

    if !shards.is_empty() {
        let mut used = Vec::new();
        for s in &shards {
            let constant = s.labels.iter().all(|&y| y == s.labels[0]);
            let needs_variation = config.loss_mode == LossMode::Joint && config.losses.alpha > 0.0;
            if s.labels.len() < 2 || (constant && needs_variation) {
                skipped += 1;
                log::debug!(
                    "step {}: skipping a similarity shard of {} rows",
                    plan.step,
                    s.labels.len()
                );
                continue;
            }
            used.push(s);
        }
        let weight = 1.0 / devices;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for s in &used {
            let left = gather_rows(&enc.final_emb, &s.left);
            let right = gather_rows(&enc.final_emb, &s.right);
            match config.loss_mode {
                LossMode::Joint => {
                    let pairs: Vec<(usize, usize, f64)> = s
                        .left
                        .iter()
                        .zip(&s.right)
                        .zip(&s.labels)
                        .map(|((&a, &b), &y)| (a, b, y))
                        .collect();
                    let pred: Vec<f64> = pairs
                        .iter()
                        .map(|&(a, b, _)| {
                            crate::linalg::cosine(enc.final_emb.row(a), enc.final_emb.row(b))
                        })
                        .collect::<Result<_>>()?;
                    let batch = ScoredPairBatch::new(&pred, &s.labels)?;
                    let lm = gather_rows(&enc.mid_emb, &s.left);
                    let rm = gather_rows(&enc.mid_emb, &s.right);
                    let r = sts_combined(&batch, Some((&lm, &rm)), &config.losses)?;
                    loss += weight * r.value;
                    for (name, v) in &r.components {
                        *sums.entry(format!("sts_{name}")).or_default() += v;
                    }
                    for (i, &(a, b, _)) in pairs.iter().enumerate() {
                        let (ga, gb) = split_rows(&mut d_final, a, b);
                        accumulate_cosine_grad(
                            enc.final_emb.row(a),
                            enc.final_emb.row(b),
                            weight * r.grads.predicted[i],
                            ga,
                            gb,
                        );
                    }
                    if let Some(m) = &r.grads.mid {
                        scatter_rows(&mut d_mid, &s.left, &m.left, weight);
                        scatter_rows(&mut d_mid, &s.right, &m.right, weight);
                    }
                }
                LossMode::InfonceOnly => {
                    let r = infonce_baseline(
                        &left,
                        &right,
                        &s.labels,
                        config.losses.midnce_threshold,
                        config.baseline_tau,
                    )?;
                    loss += weight * r.value;
                    *sums.entry("sts_infonce".into()).or_default() += r.value;
                    scatter_rows(&mut d_final, &s.left, &r.grads.left, weight);
                    scatter_rows(&mut d_final, &s.right, &r.grads.right, weight);
                }
                LossMode::CosentOnly => {
                    let pairs: Vec<(usize, usize, f64)> = s
                        .left
                        .iter()
                        .zip(&s.right)
                        .zip(&s.labels)
                        .map(|((&a, &b), &y)| (a, b, y))
                        .collect();
                    let (value, _) = cosent_on_pairs(
                        &enc.final_emb,
                        &pairs,
                        config.baseline_tau,
                        weight,
                        &mut d_final,
                    )?;
                    loss += weight * value;
                    *sums.entry("sts_cosent".into()).or_default() += value;
                }
            }
        }
        if !used.is_empty() {
            for (k, v) in sums {
                components.insert(k, v / used.len() as f64);
            }
            grad_tasks.push(TaskKind::Sts);
        }
    }

    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} at step {} ({} task, components {components:?})",
            plan.step, plan.task
        )));
    }
    let grads = encoder.backward(&enc.cache, &d_final, Some(&d_mid))?;
    Ok(StepOutcome {
        loss,
        components,
        grad_tasks,
        skipped_shards: skipped,
        grads,
    })
}

/// Two distinct mutable rows, or the same row twice for a self-pair.
fn split_rows(m: &mut Matrix, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b, "pair rows are distinct texts");
    let d = m.cols();
    let data = m.as_mut_slice();
    if a < b {
        let (lo, hi) = data.split_at_mut(b * d);
        (&mut lo[a * d..(a + 1) * d], &mut hi[..d])
    } else {
        let (lo, hi) = data.split_at_mut(a * d);
        let (hb, ha) = (&mut lo[b * d..(b + 1) * d], &mut hi[..d]);
        (ha, hb)
    }
}

/// CoSENT over `(left row, right row, label)` pairs of `emb`; gradients
/// scaled by `weight` are added into `grad`.
fn cosent_on_pairs(
    emb: &Matrix,
    pairs: &[(usize, usize, f64)],
    tau: f64,
    weight: f64,
    grad: &mut Matrix,
) -> Result<(f64, Vec<f64>)> {
    let pred: Vec<f64> = pairs
        .iter()
        .map(|&(a, b, _)| crate::linalg::cosine(emb.row(a), emb.row(b)))
        .collect::<Result<_>>()?;
    let labels: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let r = cosent_loss(&ScoredPairBatch::new(&pred, &labels)?, tau)?;
    for (i, &(a, b, _)) in pairs.iter().enumerate() {
        let (ga, gb) = split_rows(grad, a, b);
        accumulate_cosine_grad(emb.row(a), emb.row(b), weight * r.grads[i], ga, gb);
    }
    Ok((r.value, pred))
}

/// Trains from the seeded initialization. `dev` drives checkpoint
/// selection; `test` is scored once with the selected weights.
pub fn train(
    config: &TrainConfig,
    datasets: &[Dataset],
    dev: &[EvalSet],
    test: &[EvalSet],
) -> Result<TrainRun> {
    config.validate()?;
    let encoder = Encoder::new(config.encoder.clone())?;
    train_from(config, encoder, datasets, dev, test)
}

pub fn train_from(
    config: &TrainConfig,
    mut encoder: Encoder,
    datasets: &[Dataset],
    dev: &[EvalSet],
    test: &[EvalSet],
) -> Result<TrainRun> {
    config.validate()?;
    if encoder.config != config.encoder {
        return Err(Error::Contract(
            "starting encoder does not match the configured encoder".into(),
        ));
    }
    for ds in datasets {
        if ds.task == TaskKind::Ir && ds.records.iter().any(|r| r.positives.is_empty()) {
            return Err(Error::Validation(format!(
                "{}: IR record without positives",
                ds.name
            )));
        }
    }
    let specs = dataset_specs(datasets);
    let mut planner = Planner::new(&specs, &config.sampler)?;
    let mut adam = Adam::new(config.optimizer, &config.encoder);
    let initial = encoder.state.to_checkpoint(meta_for(config, 0));
    let mut log = Vec::new();
    let mut dev_history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, usize, Encoder)> = None;

    for _ in 0..config.total_steps {
        let plan = planner.next_plan();
        let out = step_gradients(&encoder, config, datasets, &plan)?;
        adam.step(&mut encoder, &out.grads).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!(
                "{m}; step loss {} components {:?}",
                out.loss, out.components
            )),
            other => other,
        })?;
        let step = plan.step + 1;
        log.push(LogLine::Step {
            step,
            task: plan.task,
            datasets: plan
                .batches
                .iter()
                .map(|b| datasets[b.dataset_id].name.clone())
                .collect(),
            loss: out.loss,
            components: out.components,
            lr: config.optimizer.lr,
            grad_tasks: out.grad_tasks,
            skipped_shards: out.skipped_shards,
        });
        let eval_now = step % config.eval_every == 0 || step == config.total_steps;
        if eval_now && !dev.is_empty() {
            let summary = evaluate_sets(&encoder, dev)?;
            log.push(LogLine::eval(step, "dev", &summary));
            let avg = summary.avg().unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|b| avg > b.0) {
                best = Some((avg, step, encoder.clone()));
            }
            if step % config.checkpoint_every == 0 || step == config.total_steps {
                checkpoints.push((
                    step,
                    encoder.state.to_checkpoint(meta_for(config, step)),
                    summary.clone(),
                ));
            }
            dev_history.push((step, summary));
        } else if step % config.checkpoint_every == 0 {
            checkpoints.push((
                step,
                encoder.state.to_checkpoint(meta_for(config, step)),
                EvalSummary::default(),
            ));
        }
    }

    let (best_step, best_encoder) = match best {
        Some((_, s, e)) => (s, e),
        None => (config.total_steps, encoder.clone()),
    };
    let test_summary = if test.is_empty() {
        EvalSummary::default()
    } else {
        evaluate_sets(&best_encoder, test)?
    };
    log.push(LogLine::eval(best_step, "test", &test_summary));
    Ok(TrainRun {
        config: config.clone(),
        initial,
        best: best_encoder,
        best_step,
        final_encoder: encoder,
        checkpoints,
        dev_history,
        test: test_summary,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rows_both_orders() {
        let mut m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let (a, b) = split_rows(&mut m, 2, 0);
        assert_eq!((a[0], b[0]), (5.0, 1.0));
        let (a, b) = split_rows(&mut m, 0, 1);
        assert_eq!((a[1], b[1]), (2.0, 4.0));
    }

    #[test]
    fn seed_override_reaches_every_component() {
        let c = TrainConfig::default().with_seed(42);
        assert_eq!((c.seed, c.sampler.seed, c.encoder.init_seed), (42, 42, 42));
        assert_ne!(c.hash(), TrainConfig::default().hash());
    }
}
