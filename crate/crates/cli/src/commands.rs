//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use tandem::checkpoint::{Checkpoint, CheckpointMeta};
use tandem::corpus::{generate_synthetic, write_jsonl, Manifest, ManifestEntry, Split, TaskKind};
use tandem::encoder::{Encoder, EncoderState};
use tandem::fusion::{
    delta_profile, hierarchical_fuse, layer_weights, slerp, uniform_soup, DeltaScaling,
};
use tandem::grid::{
    geometry_header, geometry_rows, grid_table, run_experiment_grid, score_table, write_grid,
    write_table,
};
use tandem::report::Table;
use tandem::sampler::{build_plan, check_plan, dataset_specs};
use tandem::trainer::{evaluate_sets, EvalSet};

use crate::config::RunConfig;
use crate::{CliError, FuseMode, SplitArg};

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string(cfg)
        .map_err(|e| CliError::Core(tandem::Error::Config(format!("serializing config: {e}"))))?;
    std::fs::write(dir.join("config.resolved.toml"), text)?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| cfg.output.dir.join("data"));
    std::fs::create_dir_all(&dir)?;
    let (_, corpus) = generate_synthetic(&cfg.synth)?;
    let files = [
        (
            "synth-ir",
            TaskKind::Ir,
            Split::Train,
            "ir_train.jsonl",
            &corpus.ir_train,
        ),
        (
            "synth-sts",
            TaskKind::Sts,
            Split::Train,
            "sts_train.jsonl",
            &corpus.sts_train,
        ),
        (
            "synth-ir",
            TaskKind::Ir,
            Split::Dev,
            "ir_dev.jsonl",
            &corpus.ir_dev,
        ),
        (
            "synth-sts",
            TaskKind::Sts,
            Split::Dev,
            "sts_dev.jsonl",
            &corpus.sts_dev,
        ),
        (
            "synth-ir",
            TaskKind::Ir,
            Split::Test,
            "ir_test.jsonl",
            &corpus.ir_test,
        ),
        (
            "synth-sts",
            TaskKind::Sts,
            Split::Test,
            "sts_test.jsonl",
            &corpus.sts_test,
        ),
    ];
    let mut table = Table::new(["file", "task", "split", "records"]);
    let mut datasets = Vec::new();
    for (name, task, split, file, records) in files {
        write_jsonl(&dir.join(file), records)?;
        table.push([
            file.to_string(),
            task.to_string(),
            format!("{split:?}").to_lowercase(),
            records.len().to_string(),
        ]);
        datasets.push(ManifestEntry {
            name: name.to_string(),
            path: PathBuf::from(file),
            task,
            split,
        });
    }
    Manifest {
        batch_size_ir: cfg.train.sampler.batch_size_ir,
        batch_size_sts: cfg.train.sampler.batch_size_sts,
        datasets,
    }
    .save(&dir.join("manifest.json"))?;
    print!("{}", table.render_text());
    println!("manifest: {}", dir.join("manifest.json").display());
    Ok(())
}

pub fn plan(mut cfg: RunConfig, steps: usize, out: Option<PathBuf>) -> Result<(), CliError> {
    let data = cfg.load_data()?;
    let specs = dataset_specs(&data.train);
    let plan = build_plan(&specs, &cfg.train.sampler, steps)?;
    let mut lines = String::new();
    for p in &plan {
        lines.push_str(&serde_json::to_string(p).map_err(tandem::Error::from)?);
        lines.push('\n');
    }
    let report = check_plan(&plan, &specs, &cfg.train.sampler);
    match &out {
        Some(path) => {
            std::fs::write(path, &lines)?;
            print!("{}", report.render());
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plan");
            let dir = path.parent().unwrap_or(Path::new("."));
            write_table(dir, &format!("{stem}_check"), &report.table())?;
        }
        None => {
            std::io::stdout().write_all(lines.as_bytes())?;
            eprint!("{}", report.render());
        }
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(CliError::PlanViolations(report.violations.len()))
    }
}

pub fn train(mut cfg: RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| cfg.output.dir.join("train"));
    let data = cfg.load_data()?;
    let run = tandem::trainer::train(&cfg.train, &data.train, &data.dev, &data.test)?;
    let ck = dir.join("checkpoints");
    std::fs::create_dir_all(&ck)?;
    write_resolved(&cfg, &dir)?;
    std::fs::write(dir.join("log.jsonl"), run.log_jsonl())?;
    run.initial.save(&ck.join("init.ckpt"))?;
    run.best
        .state
        .to_checkpoint(run.meta(run.best_step))
        .save(&ck.join("best.ckpt"))?;
    run.final_encoder
        .state
        .to_checkpoint(run.meta(cfg.train.total_steps))
        .save(&ck.join("final.ckpt"))?;
    for (step, c, _) in &run.checkpoints {
        c.save(&ck.join(format!("step_{step}.ckpt")))?;
    }
    let table = score_table(&[(format!("best (step {})", run.best_step), &run.test)]);
    write_table(&dir, "eval", &table)?;
    print!("{}", table.render_text());
    Ok(())
}

fn load_encoder(cfg: &RunConfig, path: &Path) -> Result<Encoder, CliError> {
    let ckpt = Checkpoint::load(path)?;
    let state = EncoderState::from_checkpoint(&cfg.train.encoder, &ckpt)?;
    Ok(Encoder::with_state(cfg.train.encoder.clone(), state)?)
}

fn split_sets(data: tandem::grid::GridData, split: SplitArg) -> Vec<EvalSet> {
    match split {
        SplitArg::Dev => data.dev,
        SplitArg::Test => data.test,
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn eval(
    mut cfg: RunConfig,
    checkpoint: &Path,
    split: SplitArg,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let sets = split_sets(cfg.load_data()?, split);
    let encoder = load_encoder(&cfg, checkpoint)?;
    let summary = evaluate_sets(&encoder, &sets)?;
    let table = score_table(&[(stem(checkpoint), &summary)]);
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        write_table(&dir, "eval", &table)?;
    }
    print!("{}", table.render_text());
    Ok(())
}

pub struct FuseArgs {
    pub base: Option<PathBuf>,
    pub ir_soup: Vec<PathBuf>,
    pub sts_soup: Vec<PathBuf>,
    pub ir_probe: Option<PathBuf>,
    pub sts_probe: Option<PathBuf>,
    pub tau: f64,
    pub raw_deltas: bool,
    pub mode: FuseMode,
    pub t: f64,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Checkpoint>, CliError> {
    paths.iter().map(|p| Ok(Checkpoint::load(p)?)).collect()
}

fn list(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn fuse(a: FuseArgs) -> Result<(), CliError> {
    let mut bad = Vec::new();
    if !(a.tau > 0.0 && a.tau.is_finite()) {
        bad.push(format!("--tau must be positive and finite, got {}", a.tau));
    }
    if !(0.0..=1.0).contains(&a.t) {
        bad.push(format!("--t must lie in [0, 1], got {}", a.t));
    }
    if a.mode == FuseMode::Hierarchical && a.base.is_none() {
        bad.push("--mode hierarchical needs --base".to_string());
    }
    if !bad.is_empty() {
        return Err(CliError::Config(bad));
    }
    let ir = load_all(&a.ir_soup)?;
    let sts = load_all(&a.sts_soup)?;
    let soup_ir = uniform_soup(&ir.iter().collect::<Vec<_>>())?;
    let soup_sts = uniform_soup(&sts.iter().collect::<Vec<_>>())?;
    let mut meta = CheckpointMeta {
        config_hash: ir[0].meta.config_hash.clone(),
        step: 0,
        seed: a.seed.unwrap_or(ir[0].meta.seed),
        extra: Default::default(),
    };
    meta.extra.insert("ir_soup".into(), list(&a.ir_soup));
    meta.extra.insert("sts_soup".into(), list(&a.sts_soup));
    let mut fused = match a.mode {
        FuseMode::Soup => {
            let all: Vec<&Checkpoint> = ir.iter().chain(&sts).collect();
            meta.extra.insert("mode".into(), "soup".into());
            uniform_soup(&all)?
        }
        FuseMode::Slerp => {
            meta.extra.insert("mode".into(), "slerp".into());
            meta.extra.insert("t".into(), a.t.to_string());
            slerp(&soup_ir, &soup_sts, a.t)?
        }
        FuseMode::Hierarchical => {
            let base = Checkpoint::load(a.base.as_deref().expect("checked above"))?;
            let probe = |p: &Option<PathBuf>, soup: &Checkpoint| -> Result<Checkpoint, CliError> {
                match p {
                    Some(path) => Ok(Checkpoint::load(path)?),
                    None => Ok(soup.clone()),
                }
            };
            let delta_ir = delta_profile(&probe(&a.ir_probe, &soup_ir)?, &base)?;
            let delta_sts = delta_profile(&probe(&a.sts_probe, &soup_sts)?, &base)?;
            let scaling = if a.raw_deltas {
                DeltaScaling::Raw
            } else {
                DeltaScaling::Standardized
            };
            let weights = layer_weights(&delta_ir, &delta_sts, a.tau, scaling)?;
            let mut table = Table::new(["layer", "delta_ir", "delta_sts", "w_ir", "w_sts"]);
            for (label, &(wi, ws)) in &weights.layers {
                table.push([
                    label.to_string(),
                    format!("{:.6}", delta_ir.layers[label]),
                    format!("{:.6}", delta_sts.layers[label]),
                    format!("{wi:.6}"),
                    format!("{ws:.6}"),
                ]);
            }
            let dir = a.out.parent().unwrap_or(Path::new("."));
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
            write_table(dir, &format!("{}_weights", stem(&a.out)), &table)?;
            print!("{}", table.render_text());
            meta.extra.insert("mode".into(), "hierarchical".into());
            meta.extra.insert("tau".into(), a.tau.to_string());
            hierarchical_fuse(&soup_ir, &soup_sts, &weights)?
        }
    };
    fused.meta = meta;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    fused.save(&a.out)?;
    println!("fused checkpoint: {}", a.out.display());
    Ok(())
}

pub fn diagnose(
    mut cfg: RunConfig,
    checkpoints: &[String],
    split: SplitArg,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    let sets = split_sets(cfg.load_data()?, split);
    let mut table = geometry_header();
    if checkpoints.is_empty() {
        let encoder = Encoder::new(cfg.train.encoder.clone())?;
        geometry_rows(&mut table, "Initial", &encoder, &sets)?;
    }
    for spec in checkpoints {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => (stem(Path::new(spec)), PathBuf::from(spec)),
        };
        let encoder = load_encoder(&cfg, &path)?;
        geometry_rows(&mut table, &label, &encoder, &sets)?;
    }
    std::fs::create_dir_all(&dir)?;
    write_table(&dir, "geometry", &table)?;
    print!("{}", table.render_text());
    Ok(())
}

pub fn grid(mut cfg: RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| cfg.output.dir.join("grid"));
    let data = cfg.load_data()?;
    let outcome = run_experiment_grid(&cfg.train, &cfg.grid.variants, &data, &cfg.fusion);
    std::fs::create_dir_all(&dir)?;
    write_resolved(&cfg, &dir)?;
    write_grid(&outcome, &data, &dir)?;
    print!("{}", grid_table(&outcome).render_text());
    let failed: Vec<String> = outcome
        .cells
        .iter()
        .filter_map(|c| c.run.as_ref().err().map(|e| format!("{}: {e}", c.variant)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Core(tandem::Error::Config(format!(
            "grid cells failed: {}",
            failed.join("; ")
        ))))
    }
}
