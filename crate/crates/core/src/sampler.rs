//! Iteration planning over virtual devices.
//!
//! In [`SamplerMode::Joint`] every device of an iteration receives a
//! disjoint shard of the same dataset, so a retrieval step can pool all
//! shards as one contrastive batch. [`SamplerMode::Mixed`] lets each device
//! pick its own task and dataset, which mixes task gradients within a step.
//!
//! Records are consumed without replacement within an epoch of each
//! dataset. When the rest of an epoch cannot fill every shard, the final
//! draw splits what remains as evenly as possible instead of padding.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::report::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// One dataset per iteration across all devices.
    Joint,
    /// Each device draws its own task and dataset.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub device_count: usize,
    pub batch_size_ir: usize,
    pub batch_size_sts: usize,
    /// `(IR updates, STS updates)` per schedule period. A zero entry
    /// disables that task.
    pub task_ratio: (u32, u32),
    pub mode: SamplerMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            device_count: 4,
            batch_size_ir: 2,
            batch_size_sts: 32,
            task_ratio: (1, 1),
            mode: SamplerMode::Joint,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Ir => self.batch_size_ir,
            TaskKind::Sts => self.batch_size_sts,
        }
    }

    fn weight(&self, task: TaskKind) -> u64 {
        match task {
            TaskKind::Ir => self.task_ratio.0 as u64,
            TaskKind::Sts => self.task_ratio.1 as u64,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.device_count == 0 {
            v.push("device_count must be at least 1".to_string());
        }
        if self.batch_size_ir == 0 || self.batch_size_sts == 0 {
            v.push("batch sizes must be at least 1".to_string());
        }
        if self.task_ratio == (0, 0) {
            v.push("task_ratio must enable at least one task".to_string());
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

/// Size and task of a dataset, all the planner needs to know.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: TaskKind,
    pub len: usize,
}

impl From<&Dataset> for DatasetSpec {
    fn from(d: &Dataset) -> Self {
        Self {
            task: d.task,
            len: d.len(),
        }
    }
}

pub fn dataset_specs(datasets: &[Dataset]) -> Vec<DatasetSpec> {
    datasets.iter().map(DatasetSpec::from).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceBatch {
    pub device_id: usize,
    pub dataset_id: usize,
    pub task: TaskKind,
    pub record_indices: Vec<usize>,
}

/// Task of an iteration: a single kind, or several in Mixed mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepTask {
    #[serde(rename = "IR")]
    Ir,
    #[serde(rename = "STS")]
    Sts,
    #[serde(rename = "mixed")]
    Mixed,
}

impl From<TaskKind> for StepTask {
    fn from(t: TaskKind) -> Self {
        match t {
            TaskKind::Ir => StepTask::Ir,
            TaskKind::Sts => StepTask::Sts,
        }
    }
}

impl StepTask {
    pub fn single(self) -> Option<TaskKind> {
        match self {
            StepTask::Ir => Some(TaskKind::Ir),
            StepTask::Sts => Some(TaskKind::Sts),
            StepTask::Mixed => None,
        }
    }
}

impl fmt::Display for StepTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepTask::Ir => "IR",
            StepTask::Sts => "STS",
            StepTask::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub step: usize,
    pub task: StepTask,
    /// One entry per device, in device order.
    pub batches: Vec<DeviceBatch>,
    /// Retrieval shards share in-batch negatives across devices. Only
    /// single-task retrieval iterations gather; mixed iterations score each
    /// device on its own shard.
    pub cross_device_negatives: bool,
}

/// Interleaves tasks so that counts track the ratio: the next task is the
/// one with the smallest `(count + 1) / weight`, retrieval first on ties.
#[derive(Debug, Clone)]
struct TaskSchedule {
    weights: [u64; 2],
    counts: [u64; 2],
}

impl TaskSchedule {
    fn new(config: &SamplerConfig) -> Self {
        Self {
            weights: [config.weight(TaskKind::Ir), config.weight(TaskKind::Sts)],
            counts: [0, 0],
        }
    }

    fn next(&mut self) -> TaskKind {
        let [wi, ws] = self.weights;
        let [ci, cs] = self.counts;
        let ir = if ws == 0 {
            true
        } else if wi == 0 {
            false
        } else {
            (ci + 1) * ws <= (cs + 1) * wi
        };
        if ir {
            self.counts[0] += 1;
            TaskKind::Ir
        } else {
            self.counts[1] += 1;
            TaskKind::Sts
        }
    }
}

/// Smooth weighted round robin over a task's datasets, weighted by size.
#[derive(Debug, Clone)]
struct DatasetRotation {
    members: Vec<(usize, i64)>,
    current: Vec<i64>,
    total: i64,
}

impl DatasetRotation {
    fn new(members: Vec<(usize, i64)>) -> Self {
        let total = members.iter().map(|m| m.1).sum();
        Self {
            current: vec![0; members.len()],
            members,
            total,
        }
    }

    fn next(&mut self) -> usize {
        let mut best = 0;
        for (i, (_, w)) in self.members.iter().enumerate() {
            self.current[i] += w;
            if self.current[i] > self.current[best] {
                best = i;
            }
        }
        self.current[best] -= self.total;
        self.members[best].0
    }
}

#[derive(Debug, Clone)]
struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

fn mix_seed(seed: u64, dataset: usize, epoch: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        ^ (dataset as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lazily generates the iteration sequence; `build_plan` collects it.
#[derive(Debug, Clone)]
pub struct Planner {
    config: SamplerConfig,
    specs: Vec<DatasetSpec>,
    schedule: TaskSchedule,
    rotations: BTreeMap<TaskKind, DatasetRotation>,
    cursors: Vec<EpochCursor>,
    step: usize,
}

impl Planner {
    pub fn new(datasets: &[DatasetSpec], config: &SamplerConfig) -> Result<Self> {
        config.validate()?;
        if datasets.is_empty() {
            return Err(Error::Config("no datasets to sample from".into()));
        }
        let mut rotations = BTreeMap::new();
        for task in TaskKind::ALL {
            let members: Vec<(usize, i64)> = datasets
                .iter()
                .enumerate()
                .filter(|(_, d)| d.task == task && d.len > 0)
                .map(|(i, d)| (i, d.len as i64))
                .collect();
            if config.weight(task) > 0 {
                if members.is_empty() {
                    return Err(Error::Config(format!(
                        "task_ratio schedules {task} steps but no non-empty {task} dataset is present"
                    )));
                }
                rotations.insert(task, DatasetRotation::new(members));
            }
        }
        let mut planner = Self {
            config: config.clone(),
            specs: datasets.to_vec(),
            schedule: TaskSchedule::new(config),
            rotations,
            cursors: Vec::with_capacity(datasets.len()),
            step: 0,
        };
        planner.cursors = (0..datasets.len())
            .map(|i| planner.fresh_epoch(i, 0))
            .collect();
        Ok(planner)
    }

    fn fresh_epoch(&self, dataset: usize, epoch: u64) -> EpochCursor {
        let mut order: Vec<usize> = (0..self.specs[dataset].len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, dataset, epoch));
        order.shuffle(&mut rng);
        EpochCursor {
            order,
            pos: 0,
            epoch,
        }
    }

    /// Draws shards for `shards` devices from one dataset. A draw never
    /// crosses an epoch boundary.
    fn draw(&mut self, dataset: usize, shards: usize, batch: usize) -> Vec<Vec<usize>> {
        if self.cursors[dataset].pos == self.cursors[dataset].order.len() {
            let next = self.cursors[dataset].epoch + 1;
            self.cursors[dataset] = self.fresh_epoch(dataset, next);
        }
        let cur = &mut self.cursors[dataset];
        let remaining = cur.order.len() - cur.pos;
        let sizes: Vec<usize> = if remaining >= shards * batch {
            vec![batch; shards]
        } else {
            (0..shards)
                .map(|i| remaining / shards + usize::from(i < remaining % shards))
                .collect()
        };
        sizes
            .into_iter()
            .map(|n| {
                let s = cur.order[cur.pos..cur.pos + n].to_vec();
                cur.pos += n;
                s
            })
            .collect()
    }

    fn next_dataset(&mut self, task: TaskKind) -> usize {
        self.rotations
            .get_mut(&task)
            .expect("rotation exists for every scheduled task")
            .next()
    }

    pub fn next_plan(&mut self) -> IterationPlan {
        let d = self.config.device_count;
        let step = self.step;
        self.step += 1;
        match self.config.mode {
            SamplerMode::Joint => {
                let task = self.schedule.next();
                let dataset = self.next_dataset(task);
                let shards = self.draw(dataset, d, self.config.batch_size(task));
                IterationPlan {
                    step,
                    task: task.into(),
                    batches: shards
                        .into_iter()
                        .enumerate()
                        .map(|(device_id, record_indices)| DeviceBatch {
                            device_id,
                            dataset_id: dataset,
                            task,
                            record_indices,
                        })
                        .collect(),
                    cross_device_negatives: task == TaskKind::Ir,
                }
            }
            SamplerMode::Mixed => {
                let picks: Vec<(TaskKind, usize)> = (0..d)
                    .map(|_| {
                        let task = self.schedule.next();
                        (task, self.next_dataset(task))
                    })
                    .collect();
                let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (device, &(_, ds)) in picks.iter().enumerate() {
                    groups.entry(ds).or_default().push(device);
                }
                let mut slots: Vec<Vec<usize>> = vec![Vec::new(); d];
                for (ds, devices) in groups {
                    let batch = self.config.batch_size(self.specs[ds].task);
                    for (device, shard) in devices.iter().zip(self.draw(ds, devices.len(), batch)) {
                        slots[*device] = shard;
                    }
                }
                let first = picks[0].0;
                let task = if picks.iter().all(|p| p.0 == first) {
                    first.into()
                } else {
                    StepTask::Mixed
                };
                IterationPlan {
                    step,
                    task,
                    batches: picks
                        .into_iter()
                        .zip(slots)
                        .enumerate()
                        .map(
                            |(device_id, ((task, dataset_id), record_indices))| DeviceBatch {
                                device_id,
                                dataset_id,
                                task,
                                record_indices,
                            },
                        )
                        .collect(),
                    cross_device_negatives: false,
                }
            }
        }
    }
}

impl Iterator for Planner {
    type Item = IterationPlan;

    fn next(&mut self) -> Option<IterationPlan> {
        Some(self.next_plan())
    }
}

/// Plans the first `total_steps` iterations; deterministic in the config.
pub fn build_plan(
    datasets: &[DatasetSpec],
    config: &SamplerConfig,
    total_steps: usize,
) -> Result<Vec<IterationPlan>> {
    Ok(Planner::new(datasets, config)?.take(total_steps).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Wrong device count, device order, unknown dataset, or task mismatch.
    Shape,
    SameDataset,
    Disjointness,
    BatchSize,
    Repeat,
    Ratio,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::Shape => "shape",
            ViolationKind::SameDataset => "same-dataset",
            ViolationKind::Disjointness => "disjointness",
            ViolationKind::BatchSize => "batch-size",
            ViolationKind::Repeat => "epoch-repeat",
            ViolationKind::Ratio => "ratio",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanReport {
    pub steps: usize,
    pub ir_units: u64,
    pub sts_units: u64,
    pub violations: Vec<Violation>,
}

impl PlanReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    /// Per-kind violation counts as an aligned text table.
    /// Violation counts per check.
    pub fn table(&self) -> Table {
        let mut t = Table::new(["check", "violations"]);
        for kind in [
            ViolationKind::Shape,
            ViolationKind::SameDataset,
            ViolationKind::Disjointness,
            ViolationKind::BatchSize,
            ViolationKind::Repeat,
            ViolationKind::Ratio,
        ] {
            t.push([kind.to_string(), self.count(kind).to_string()]);
        }
        t
    }

    /// Summary line, count table, and the first 20 violations.
    pub fn render(&self) -> String {
        let mut out = format!(
            "steps {}  IR units {}  STS units {}\n{}",
            self.steps,
            self.ir_units,
            self.sts_units,
            self.table().render_text()
        );
        for v in self.violations.iter().take(20) {
            match v.step {
                Some(s) => out.push_str(&format!("step {s}: {}: {}\n", v.kind, v.message)),
                None => out.push_str(&format!("{}: {}\n", v.kind, v.message)),
            }
        }
        out
    }
}

/// Verifies a plan against the sampler guarantees. Ratio counts are per
/// step in Joint mode and per device slot in Mixed mode.
pub fn check_plan(
    plan: &[IterationPlan],
    datasets: &[DatasetSpec],
    config: &SamplerConfig,
) -> PlanReport {
    let mut report = PlanReport {
        steps: plan.len(),
        ..PlanReport::default()
    };
    let mut seen: Vec<Vec<bool>> = datasets.iter().map(|d| vec![false; d.len]).collect();
    let mut seen_count = vec![0usize; datasets.len()];
    let push = |report: &mut PlanReport, step, kind, message: String| {
        report.violations.push(Violation {
            step: Some(step),
            kind,
            message,
        })
    };

    for it in plan {
        let s = it.step;
        if it.batches.len() != config.device_count {
            push(
                &mut report,
                s,
                ViolationKind::Shape,
                format!(
                    "{} device batches for {} devices",
                    it.batches.len(),
                    config.device_count
                ),
            );
        }
        if config.mode == SamplerMode::Joint {
            let ids: std::collections::BTreeSet<usize> =
                it.batches.iter().map(|b| b.dataset_id).collect();
            if ids.len() > 1 {
                push(
                    &mut report,
                    s,
                    ViolationKind::SameDataset,
                    format!("devices draw from datasets {ids:?}"),
                );
            }
            match it.task.single() {
                Some(TaskKind::Ir) => report.ir_units += 1,
                Some(TaskKind::Sts) => report.sts_units += 1,
                None => push(
                    &mut report,
                    s,
                    ViolationKind::SameDataset,
                    "mixed-task iteration in joint mode".into(),
                ),
            }
        }

        let mut in_step: BTreeMap<usize, Vec<(usize, &DeviceBatch)>> = BTreeMap::new();
        for (pos, b) in it.batches.iter().enumerate() {
            if b.device_id != pos {
                push(
                    &mut report,
                    s,
                    ViolationKind::Shape,
                    format!("batch {pos} carries device id {}", b.device_id),
                );
            }
            let Some(spec) = datasets.get(b.dataset_id) else {
                push(
                    &mut report,
                    s,
                    ViolationKind::Shape,
                    format!("unknown dataset {}", b.dataset_id),
                );
                continue;
            };
            if spec.task != b.task {
                push(
                    &mut report,
                    s,
                    ViolationKind::Shape,
                    format!(
                        "device {} runs {} on a {} dataset",
                        b.device_id, b.task, spec.task
                    ),
                );
            }
            if config.mode == SamplerMode::Mixed {
                match b.task {
                    TaskKind::Ir => report.ir_units += 1,
                    TaskKind::Sts => report.sts_units += 1,
                }
            }
            in_step.entry(b.dataset_id).or_default().push((pos, b));
        }

        for (ds, batches) in in_step {
            let len = datasets[ds].len;
            let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
            for &(_, b) in &batches {
                for &i in &b.record_indices {
                    if i >= len {
                        push(
                            &mut report,
                            s,
                            ViolationKind::Shape,
                            format!("index {i} out of range for dataset {ds} of {len} records"),
                        );
                        continue;
                    }
                    match owner.insert(i, b.device_id) {
                        Some(prev) if prev != b.device_id => push(
                            &mut report,
                            s,
                            ViolationKind::Disjointness,
                            format!(
                                "record {i} of dataset {ds} on devices {prev} and {}",
                                b.device_id
                            ),
                        ),
                        Some(_) => push(
                            &mut report,
                            s,
                            ViolationKind::Repeat,
                            format!("record {i} of dataset {ds} twice in one shard"),
                        ),
                        None => {}
                    }
                }
            }
            for &i in owner.keys() {
                if seen[ds][i] {
                    push(
                        &mut report,
                        s,
                        ViolationKind::Repeat,
                        format!("record {i} of dataset {ds} repeated within an epoch"),
                    );
                } else {
                    seen[ds][i] = true;
                    seen_count[ds] += 1;
                }
            }
            let completes_epoch = len > 0 && seen_count[ds] == len;
            for &(_, b) in &batches {
                let want = config.batch_size(b.task);
                let n = b.record_indices.len();
                if n > want || (n < want && !completes_epoch) {
                    push(
                        &mut report,
                        s,
                        ViolationKind::BatchSize,
                        format!(
                            "device {} has {n} records, batch size is {want}",
                            b.device_id
                        ),
                    );
                }
            }
            if completes_epoch {
                seen[ds].iter_mut().for_each(|x| *x = false);
                seen_count[ds] = 0;
            }
        }
    }

    let (ri, rs) = (config.task_ratio.0 as i128, config.task_ratio.1 as i128);
    let skew = report.ir_units as i128 * rs - report.sts_units as i128 * ri;
    if skew.abs() > ri.max(rs) {
        report.violations.push(Violation {
            step: None,
            kind: ViolationKind::Ratio,
            message: format!(
                "{} IR and {} STS units do not follow ratio {ri}:{rs}",
                report.ir_units, report.sts_units
            ),
        });
    }
    report
}
