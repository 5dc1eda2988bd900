//! The comparison grid: the joint recipe against single-loss baselines, the
//! mixed-task sampler and single-task specialists, plus a fused model built
//! from the joint run's checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Dataset, Manifest, Split, SynthCorpus, TaskKind};
use crate::encoder::{Encoder, EncoderState};
use crate::error::{Error, Result};
use crate::fusion::{
    delta_profile, hierarchical_fuse, layer_weights, uniform_soup, DeltaProfile, DeltaScaling,
};
use crate::geometry::{diagnose_corpus, CorpusGeometry};
use crate::metrics::EvalSummary;
use crate::report::{fmt_score, Table};
use crate::sampler::SamplerMode;
use crate::trainer::{evaluate_sets, train, EvalSet, LossMode, TrainConfig, TrainRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Joint,
    InfonceOnly,
    CosentOnly,
    Mixed,
    IrOnly,
    StsOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Joint,
        Variant::InfonceOnly,
        Variant::CosentOnly,
        Variant::Mixed,
        Variant::IrOnly,
        Variant::StsOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Joint => "Joint",
            Variant::InfonceOnly => "InfoNCE-only",
            Variant::CosentOnly => "CoSENT-only",
            Variant::Mixed => "Mixed",
            Variant::IrOnly => "IR-only",
            Variant::StsOnly => "STS-only",
        }
    }

    /// File-name form.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Joint => "joint",
            Variant::InfonceOnly => "infonce_only",
            Variant::CosentOnly => "cosent_only",
            Variant::Mixed => "mixed",
            Variant::IrOnly => "ir_only",
            Variant::StsOnly => "sts_only",
        }
    }

    /// The base configuration adapted to this variant.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Joint => c.loss_mode = LossMode::Joint,
            Variant::InfonceOnly => c.loss_mode = LossMode::InfonceOnly,
            Variant::CosentOnly => c.loss_mode = LossMode::CosentOnly,
            Variant::Mixed => {
                c.loss_mode = LossMode::Joint;
                c.sampler.mode = SamplerMode::Mixed;
            }
            Variant::IrOnly => {
                c.loss_mode = LossMode::Joint;
                c.sampler.task_ratio = (1, 0);
            }
            Variant::StsOnly => {
                c.loss_mode = LossMode::Joint;
                c.sampler.task_ratio = (0, 1);
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == s || v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown grid variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridData {
    pub train: Vec<Dataset>,
    pub dev: Vec<EvalSet>,
    pub test: Vec<EvalSet>,
}

impl GridData {
    /// One training dataset per task plus matching dev and test sets.
    pub fn from_synthetic(corpus: &SynthCorpus) -> Result<Self> {
        let set = |name: &str, task, records: &Vec<_>| EvalSet {
            name: name.to_string(),
            task,
            records: records.clone(),
        };
        Ok(Self {
            train: vec![
                Dataset::new("synth-ir", TaskKind::Ir, corpus.ir_train.clone())?,
                Dataset::new("synth-sts", TaskKind::Sts, corpus.sts_train.clone())?,
            ],
            dev: vec![
                set("synth-ir", TaskKind::Ir, &corpus.ir_dev),
                set("synth-sts", TaskKind::Sts, &corpus.sts_dev),
            ],
            test: vec![
                set("synth-ir", TaskKind::Ir, &corpus.ir_test),
                set("synth-sts", TaskKind::Sts, &corpus.sts_test),
            ],
        })
    }
}

impl GridData {
    /// Train, dev and test datasets listed by a manifest. Every split must
    /// be present.
    pub fn from_manifest(manifest: &Manifest, base_dir: &Path) -> Result<Self> {
        let train = manifest.load_split(base_dir, Split::Train)?;
        let dev: Vec<EvalSet> = manifest
            .load_split(base_dir, Split::Dev)?
            .into_iter()
            .map(Into::into)
            .collect();
        let test: Vec<EvalSet> = manifest
            .load_split(base_dir, Split::Test)?
            .into_iter()
            .map(Into::into)
            .collect();
        for (split, empty) in [
            ("train", train.is_empty()),
            ("dev", dev.is_empty()),
            ("test", test.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("manifest lists no {split} datasets")));
            }
        }
        Ok(Self { train, dev, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionOptions {
    pub enabled: bool,
    pub tau: f64,
    pub scaling: DeltaScaling,
    /// Checkpoints within this many dev points of the best score on a task
    /// join that task's soup.
    pub soup_margin: f64,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 1.0,
            scaling: DeltaScaling::Standardized,
            soup_margin: 1.0,
        }
    }
}

impl FusionOptions {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            v.push(format!("tau must be positive and finite, got {}", self.tau));
        }
        if !(self.soup_margin >= 0.0) {
            v.push(format!(
                "soup_margin must be non-negative, got {}",
                self.soup_margin
            ));
        }
        v
    }
}

/// Result of one grid cell; failures are kept as messages.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub variant: Variant,
    pub run: std::result::Result<TrainRun, String>,
}

#[derive(Debug, Clone)]
pub struct FusedModel {
    pub encoder: Encoder,
    pub ir_members: Vec<usize>,
    pub sts_members: Vec<usize>,
    pub delta_ir: DeltaProfile,
    pub delta_sts: DeltaProfile,
    pub test: EvalSummary,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    pub fused: Option<std::result::Result<FusedModel, String>>,
}

impl GridOutcome {
    pub fn run(&self, v: Variant) -> Option<&TrainRun> {
        self.cells
            .iter()
            .find(|c| c.variant == v)
            .and_then(|c| c.run.as_ref().ok())
    }

    /// Test summary of a successful cell.
    pub fn test(&self, v: Variant) -> Option<&EvalSummary> {
        self.run(v).map(|r| &r.test)
    }
}

/// Trains every requested variant from the same initialization. A failing
/// cell is recorded and the grid continues.
pub fn run_experiment_grid(
    base: &TrainConfig,
    variants: &[Variant],
    data: &GridData,
    fusion: &FusionOptions,
) -> GridOutcome {
    let mut cells = Vec::new();
    for &v in variants {
        log::info!("grid: training {v}");
        let run =
            train(&v.apply(base), &data.train, &data.dev, &data.test).map_err(|e| e.to_string());
        if let Err(e) = &run {
            log::warn!("grid: {v} failed: {e}");
        }
        cells.push(GridCell { variant: v, run });
    }
    let mut outcome = GridOutcome { cells, fused: None };
    if fusion.enabled {
        if let (Some(j), Some(i), Some(s)) = (
            outcome.run(Variant::Joint),
            outcome.run(Variant::IrOnly),
            outcome.run(Variant::StsOnly),
        ) {
            outcome.fused = Some(fuse_joint(j, i, s, data, fusion).map_err(|e| e.to_string()));
        }
    }
    outcome
}

fn near_best(
    candidates: &[(usize, Checkpoint, EvalSummary)],
    score: impl Fn(&EvalSummary) -> Option<f64>,
    margin: f64,
) -> Vec<usize> {
    let best = candidates
        .iter()
        .filter_map(|c| score(&c.2))
        .fold(f64::NEG_INFINITY, f64::max);
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| score(&c.2).is_some_and(|s| s >= best - margin))
        .map(|(i, _)| i)
        .collect()
}

/// Hierarchical fusion of the joint run's IR-leaning and STS-leaning
/// checkpoint soups, weighted per layer by the specialists' deltas.
pub fn fuse_joint(
    joint: &TrainRun,
    ir_probe: &TrainRun,
    sts_probe: &TrainRun,
    data: &GridData,
    opts: &FusionOptions,
) -> Result<FusedModel> {
    let cands = &joint.checkpoints;
    let ir_members = near_best(cands, |s| s.avg_ir(), opts.soup_margin);
    let sts_members = near_best(cands, |s| s.avg_sts(), opts.soup_margin);
    if ir_members.is_empty() || sts_members.is_empty() {
        return Err(Error::Config(
            "fusion needs evaluated checkpoints from the joint run".into(),
        ));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| &cands[i].1).collect::<Vec<_>>();
    let soup_ir = uniform_soup(&pick(&ir_members))?;
    let soup_sts = uniform_soup(&pick(&sts_members))?;
    let base = &joint.initial;
    let delta_ir = delta_profile(
        &ir_probe
            .best
            .state
            .to_checkpoint(ir_probe.meta(ir_probe.best_step)),
        base,
    )?;
    let delta_sts = delta_profile(
        &sts_probe
            .best
            .state
            .to_checkpoint(sts_probe.meta(sts_probe.best_step)),
        base,
    )?;
    let weights = layer_weights(&delta_ir, &delta_sts, opts.tau, opts.scaling)?;
    let fused = hierarchical_fuse(&soup_ir, &soup_sts, &weights)?;
    let cfg = joint.config.encoder.clone();
    let encoder = Encoder::with_state(cfg.clone(), EncoderState::from_checkpoint(&cfg, &fused)?)?;
    let test = evaluate_sets(&encoder, &data.test)?;
    Ok(FusedModel {
        encoder,
        ir_members: ir_members.iter().map(|&i| cands[i].0).collect(),
        sts_members: sts_members.iter().map(|&i| cands[i].0).collect(),
        delta_ir,
        delta_sts,
        test,
    })
}

/// Method, Avg IR, Avg STS, Avg on the test split.
pub fn grid_table(outcome: &GridOutcome) -> Table {
    let mut t = Table::new(["Method", "Avg IR", "Avg STS", "Avg", "Best step"]);
    for c in &outcome.cells {
        match &c.run {
            Ok(r) => t.push([
                c.variant.label().to_string(),
                fmt_score(r.test.avg_ir()),
                fmt_score(r.test.avg_sts()),
                fmt_score(r.test.avg()),
                r.best_step.to_string(),
            ]),
            Err(e) => t.push([
                c.variant.label().to_string(),
                "error".into(),
                "error".into(),
                "error".into(),
                e.clone(),
            ]),
        }
    }
    match &outcome.fused {
        Some(Ok(f)) => t.push([
            "Joint + fusion".to_string(),
            fmt_score(f.test.avg_ir()),
            fmt_score(f.test.avg_sts()),
            fmt_score(f.test.avg()),
            "-".to_string(),
        ]),
        Some(Err(e)) => t.push([
            "Joint + fusion".to_string(),
            "error".into(),
            "error".into(),
            "error".into(),
            e.clone(),
        ]),
        None => {}
    }
    t
}

/// Per-dataset test scores of every successful cell and the fused model.
pub fn detail_table(outcome: &GridOutcome) -> Table {
    let mut rows: Vec<(String, &EvalSummary)> = outcome
        .cells
        .iter()
        .filter_map(|c| {
            c.run
                .as_ref()
                .ok()
                .map(|r| (c.variant.label().to_string(), &r.test))
        })
        .collect();
    if let Some(Ok(f)) = &outcome.fused {
        rows.push(("Joint + fusion".to_string(), &f.test));
    }
    score_table(&rows)
}

/// One row per model: per-dataset scores, then Avg IR, Avg STS and Avg.
pub fn score_table(rows: &[(String, &EvalSummary)]) -> Table {
    let mut names: Vec<String> = Vec::new();
    for (_, s) in rows {
        for (n, _) in s.ir.iter().chain(&s.sts) {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }
    let mut t = Table::new(
        std::iter::once("Method".to_string())
            .chain(names.iter().cloned())
            .chain(["Avg IR", "Avg STS", "Avg"].map(String::from)),
    );
    for (label, s) in rows {
        let scores: BTreeMap<&str, f64> =
            s.ir.iter()
                .chain(&s.sts)
                .map(|(n, v)| (n.as_str(), *v))
                .collect();
        t.push(
            std::iter::once(label.clone())
                .chain(
                    names
                        .iter()
                        .map(|n| fmt_score(scores.get(n.as_str()).copied())),
                )
                .chain([
                    fmt_score(s.avg_ir()),
                    fmt_score(s.avg_sts()),
                    fmt_score(s.avg()),
                ]),
        );
    }
    t
}

/// Per-layer deviation of the two specialists from the shared start.
pub fn delta_table(ir: &DeltaProfile, sts: &DeltaProfile) -> Table {
    let mut t = Table::new(["layer", "delta_ir", "delta_sts"]);
    for (label, di) in &ir.layers {
        let ds = sts.layers.get(label).copied().unwrap_or(f64::NAN);
        t.push([label.to_string(), format!("{di:.6}"), format!("{ds:.6}")]);
    }
    t
}

pub fn specialist_deltas(outcome: &GridOutcome) -> Option<Result<(DeltaProfile, DeltaProfile)>> {
    let ir = outcome.run(Variant::IrOnly)?;
    let sts = outcome.run(Variant::StsOnly)?;
    Some((|| {
        let di = delta_profile(
            &ir.best.state.to_checkpoint(ir.meta(ir.best_step)),
            &ir.initial,
        )?;
        let ds = delta_profile(
            &sts.best.state.to_checkpoint(sts.meta(sts.best_step)),
            &sts.initial,
        )?;
        Ok((di, ds))
    })())
}

fn set_texts(set: &EvalSet) -> Vec<&str> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for r in &set.records {
        for t in std::iter::once(&r.query)
            .chain(&r.positives)
            .chain(&r.negatives)
        {
            if seen.insert(t.as_str()) {
                out.push(t.as_str());
            }
        }
    }
    out
}

pub fn geometry_header() -> Table {
    Table::new([
        "method",
        "dataset",
        "tok_sim",
        "rank",
        "condition_number",
        "svd_entropy",
        "texts",
        "singular",
    ])
}

/// Appends one row per evaluation set.
pub fn geometry_rows(
    table: &mut Table,
    method: &str,
    encoder: &Encoder,
    sets: &[EvalSet],
) -> Result<()> {
    for set in sets {
        let texts = set_texts(set);
        let g: CorpusGeometry = diagnose_corpus(encoder, &texts, set.task)?;
        table.push([
            method.to_string(),
            set.name.clone(),
            format!("{:.6}", g.mean.tok_sim),
            format!("{:.4}", g.mean.rank),
            if g.mean.condition_number.is_finite() {
                format!("{:.4}", g.mean.condition_number)
            } else {
                "inf".to_string()
            },
            format!("{:.6}", g.mean.svd_entropy),
            g.texts.to_string(),
            g.singular.to_string(),
        ]);
    }
    Ok(())
}

/// Writes `<stem>.txt` and `<stem>.csv` under `dir`.
pub fn write_table(dir: &Path, stem: &str, t: &Table) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}.txt")), t.render_text())?;
    std::fs::write(dir.join(format!("{stem}.csv")), t.to_csv()?)?;
    Ok(())
}

/// Writes tables, logs and checkpoints under `dir`:
///
/// ```text
/// grid.{txt,csv}        Avg IR / Avg STS / Avg per method
/// detail.{txt,csv}      per-dataset test scores
/// deltas.{txt,csv}      per-layer specialist deltas
/// geometry.{txt,csv}    embedding diagnostics on the test split
/// logs/<method>.jsonl   training logs
/// checkpoints/<method>/{init,best,step_<n>}.ckpt
/// checkpoints/fused.ckpt
/// ```
pub fn write_grid(outcome: &GridOutcome, data: &GridData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("logs"))?;
    write_table(dir, "grid", &grid_table(outcome))?;
    write_table(dir, "detail", &detail_table(outcome))?;
    if let Some(d) = specialist_deltas(outcome) {
        let (di, ds) = d?;
        write_table(dir, "deltas", &delta_table(&di, &ds))?;
    }
    let mut geo = geometry_header();
    let mut init_done = false;
    for c in &outcome.cells {
        let Ok(run) = &c.run else { continue };
        let slug = c.variant.slug();
        std::fs::write(
            dir.join("logs").join(format!("{slug}.jsonl")),
            run.log_jsonl(),
        )?;
        let ck = dir.join("checkpoints").join(slug);
        std::fs::create_dir_all(&ck)?;
        run.initial.save(&ck.join("init.ckpt"))?;
        run.best
            .state
            .to_checkpoint(run.meta(run.best_step))
            .save(&ck.join("best.ckpt"))?;
        for (step, ckpt, _) in &run.checkpoints {
            ckpt.save(&ck.join(format!("step_{step}.ckpt")))?;
        }
        if !init_done {
            let cfg = run.config.encoder.clone();
            let init = Encoder::with_state(
                cfg.clone(),
                EncoderState::from_checkpoint(&cfg, &run.initial)?,
            )?;
            geometry_rows(&mut geo, "Initial", &init, &data.test)?;
            init_done = true;
        }
        geometry_rows(&mut geo, c.variant.label(), &run.best, &data.test)?;
    }
    if let Some(Ok(f)) = &outcome.fused {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let mut meta = outcome
            .run(Variant::Joint)
            .map(|r| r.meta(0))
            .unwrap_or_default();
        meta.extra
            .insert("ir_members".into(), format!("{:?}", f.ir_members));
        meta.extra
            .insert("sts_members".into(), format!("{:?}", f.sts_members));
        f.encoder
            .state
            .to_checkpoint(meta)
            .save(&dir.join("checkpoints").join("fused.ckpt"))?;
        geometry_rows(&mut geo, "Joint + fusion", &f.encoder, &data.test)?;
    }
    write_table(dir, "geometry", &geo)?;
    Ok(())
}
