//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use tandem::checkpoint::{Checkpoint, CheckpointMeta, Tensor};
use tandem::corpus::{generate_synthetic, SynthConfig, TaskKind};
use tandem::encoder::EncoderConfig;
use tandem::fusion::{
    hierarchical_fuse, layer_weights, slerp, uniform_soup, DeltaProfile, DeltaScaling, LayerLabel,
};
use tandem::geometry::{condition_number, numerical_rank, svd_entropy, tok_sim};
use tandem::grid::{
    geometry_header, geometry_rows, run_experiment_grid, write_grid, write_table, FusionOptions,
    GridData, Variant,
};
use tandem::linalg::Matrix;
use tandem::losses::softmax_temp;
use tandem::metrics::{ndcg_at_k, spearman};
use tandem::sampler::{build_plan, check_plan, DatasetSpec, SamplerConfig};
use tandem::trainer::TrainConfig;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let suite = common::gradient_suite(100);
    let secs = start.elapsed().as_secs_f64();
    let worst = suite
        .iter()
        .fold(("", 0.0f64), |w, &(n, e)| if e > w.1 { (n, e) } else { w });
    for (name, err) in &suite {
        ensure(*err < 1e-4, format!("{name}: max rel err {err:.3e}"))?;
    }
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} losses x 100 instances, worst {:.2e} ({}), {secs:.1}s",
        suite.len(),
        worst.1,
        worst.0
    ))
}

fn softmax_examples() -> Outcome {
    let cases = [
        ([0.9f64, 0.88, 0.2], [0.5496f64, 0.4499, 0.0005]),
        ([0.6, 0.2, 0.1], [0.9756, 0.0179, 0.0066]),
    ];
    let mut worst = 0.0f64;
    for (scores, want) in cases {
        let p = softmax_temp(&scores, 0.1);
        for (a, b) in p.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
        ensure(worst <= 5e-4, format!("{p:?} vs {want:?}"))?;
    }
    Ok(format!("max abs deviation {worst:.1e}"))
}

fn metric_oracles() -> Outcome {
    let mut r = common::rng(2024);
    let mut lists = 0;
    for n in 1..=8 {
        for levels in [2, 4] {
            for _ in 0..20 {
                let rel: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64).collect();
                for k in 1..=n {
                    let got = ndcg_at_k(&rel, &rel, k).map_err(|e| e.to_string())?;
                    let want = common::oracle_ndcg(&rel, k);
                    ensure((got - want).abs() <= 1e-12, format!("ndcg {rel:?} k={k}"))?;
                }
                lists += 1;
            }
        }
    }
    for _ in 0..500 {
        let n = r.gen_range(3..=12);
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(0..4) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| r.gen_range(0..5) as f64 / 4.0).collect();
        let want = common::oracle_spearman(&x, &y);
        if let Ok(got) = spearman(&x, &y) {
            ensure((got - want).abs() <= 1e-12, format!("spearman {x:?} {y:?}"))?;
        }
    }
    for _ in 0..500 {
        let n = r.gen_range(2..=20);
        let x: Vec<f64> = (0..n).map(|_| r.gen()).collect();
        let y: Vec<f64> = (0..n).map(|_| r.gen()).collect();
        let (rx, ry) = (common::oracle_ranks(&x), common::oracle_ranks(&y));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        let nf = n as f64;
        let want = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        let got = spearman(&x, &y).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-12, "tie-free closed form")?;
    }
    Ok(format!(
        "{lists} nDCG lists, 500 tied and 500 tie-free Spearman cases"
    ))
}

fn sampler_plan() -> Outcome {
    let cfg = SamplerConfig {
        device_count: 4,
        batch_size_ir: 4,
        batch_size_sts: 16,
        ..SamplerConfig::default()
    };
    let data = [
        DatasetSpec {
            task: TaskKind::Ir,
            len: 500,
        },
        DatasetSpec {
            task: TaskKind::Ir,
            len: 137,
        },
        DatasetSpec {
            task: TaskKind::Sts,
            len: 800,
        },
        DatasetSpec {
            task: TaskKind::Sts,
            len: 333,
        },
    ];
    let start = Instant::now();
    let plan = build_plan(&data, &cfg, 10_000).map_err(|e| e.to_string())?;
    let report = check_plan(&plan, &data, &cfg);
    let secs = start.elapsed().as_secs_f64();
    ensure(report.is_clean(), report.render())?;
    let skew = report.ir_units.abs_diff(report.sts_units);
    ensure(
        skew <= 1,
        format!("IR {} vs STS {}", report.ir_units, report.sts_units),
    )?;
    ensure(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "10000 steps, 0 violations, {} IR / {} STS, {secs:.2}s",
        report.ir_units, report.sts_units
    ))
}

fn random_checkpoint(r: &mut impl Rng) -> Checkpoint {
    let mut c = Checkpoint::new(CheckpointMeta::default());
    for (name, n) in [
        ("embed.weight", 12),
        ("layer.0.weight", 9),
        ("layer.0.bias", 3),
        ("layer.1.weight", 9),
    ] {
        let data = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        c.insert(name, Tensor::new(vec![n], data).expect("shape matches"));
    }
    c
}

fn bits(c: &Checkpoint) -> Vec<u64> {
    c.iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn fusion_algebra() -> Outcome {
    let mut r = common::rng(55);
    let labels = [
        LayerLabel::Embed,
        LayerLabel::Layer(0),
        LayerLabel::Layer(1),
    ];
    let profile = |v: [f64; 3]| DeltaProfile {
        layers: labels.iter().cloned().zip(v).collect(),
    };
    let err = |e: tandem::Error| e.to_string();
    for _ in 0..200 {
        let di = profile([
            r.gen_range(0.0..3.0),
            r.gen_range(0.0..3.0),
            r.gen_range(0.0..3.0),
        ]);
        let ds = profile([
            r.gen_range(0.0..3.0),
            r.gen_range(0.0..3.0),
            r.gen_range(0.0..3.0),
        ]);
        let tau = r.gen_range(0.05..5.0);
        for scaling in [DeltaScaling::Standardized, DeltaScaling::Raw] {
            let w = layer_weights(&di, &ds, tau, scaling).map_err(err)?;
            for (wi, ws) in w.layers.values() {
                ensure((wi + ws - 1.0).abs() <= 1e-15, "weights do not sum to 1")?;
            }
        }
    }
    let same = profile([0.7, 1.3, 0.2]);
    for scaling in [DeltaScaling::Standardized, DeltaScaling::Raw] {
        let w = layer_weights(&same, &same, 1.0, scaling).map_err(err)?;
        ensure(
            w.layers.values().all(|&p| p == (0.5, 0.5)),
            "equal deltas not 0.5/0.5",
        )?;
    }

    let (a, b) = (random_checkpoint(&mut r), random_checkpoint(&mut r));
    let w = layer_weights(
        &profile([0.1, 2.0, 0.5]),
        &profile([1.5, 0.3, 0.9]),
        1e9,
        DeltaScaling::Standardized,
    )
    .map_err(err)?;
    let fused = hierarchical_fuse(&a, &b, &w).map_err(err)?;
    let soup = uniform_soup(&[&a, &b]).map_err(err)?;
    let mut gap = 0.0f64;
    for ((_, x), (_, y)) in fused.iter().zip(soup.iter()) {
        for (p, q) in x.data().iter().zip(y.data()) {
            gap = gap.max((p - q).abs());
        }
    }
    ensure(
        gap <= 1e-8,
        format!("tau=1e9 fuse differs from soup by {gap:e}"),
    )?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("a.ckpt");
    a.save(&path).map_err(err)?;
    let loaded = Checkpoint::load(&path).map_err(err)?;
    let w = layer_weights(
        &profile([0.4, 1.1, 0.6]),
        &profile([0.9, 0.2, 0.3]),
        0.7,
        DeltaScaling::Standardized,
    )
    .map_err(err)?;
    for merged in [
        uniform_soup(&[&loaded, &loaded, &loaded]).map_err(err)?,
        hierarchical_fuse(&loaded, &loaded, &w).map_err(err)?,
        slerp(&loaded, &loaded, 0.3).map_err(err)?,
    ] {
        ensure(
            bits(&merged) == bits(&a),
            "fusing identical checkpoints is not the identity",
        )?;
    }
    ensure(
        bits(&slerp(&a, &b, 0.0).map_err(err)?) == bits(&a),
        "slerp t=0",
    )?;
    ensure(
        bits(&slerp(&a, &b, 1.0).map_err(err)?) == bits(&b),
        "slerp t=1",
    )?;
    Ok(format!(
        "sum-to-one on 400 weight sets, tau=1e9 gap {gap:.1e}, identity and endpoints bitwise"
    ))
}

fn grid_experiment() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig::default();
    let (_, corpus) = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let data = GridData::from_synthetic(&corpus).map_err(|e| e.to_string())?;
    let outcome = run_experiment_grid(
        &TrainConfig::default(),
        &Variant::ALL,
        &data,
        &FusionOptions::default(),
    );
    let secs = start.elapsed().as_secs_f64();
    for cell in &outcome.cells {
        if let Err(e) = &cell.run {
            return Err(format!("{} failed: {e}", cell.variant));
        }
    }
    let get = |v| outcome.test(v).expect("cell succeeded");
    let (joint, infonce, cosent, mixed, ir_only, sts_only) = (
        get(Variant::Joint),
        get(Variant::InfonceOnly),
        get(Variant::CosentOnly),
        get(Variant::Mixed),
        get(Variant::IrOnly),
        get(Variant::StsOnly),
    );
    let f = |x: Option<f64>| x.unwrap_or(f64::NAN);
    let (j_ir, j_sts, j_avg) = (f(joint.avg_ir()), f(joint.avg_sts()), f(joint.avg()));
    let mut fails = Vec::new();
    if !(j_sts >= 85.0 && j_ir >= 85.0) {
        fails.push(format!("(a) Joint STS {j_sts:.2}, nDCG@10 x100 {j_ir:.2}"));
    }
    if !(j_sts >= f(infonce.avg_sts()) + 3.0 && j_ir >= f(cosent.avg_ir()) + 3.0) {
        fails.push(format!(
            "(b) Joint STS {j_sts:.2} vs InfoNCE-only {:.2}; Joint IR {j_ir:.2} vs CoSENT-only {:.2}",
            f(infonce.avg_sts()),
            f(cosent.avg_ir())
        ));
    }
    if !(j_avg > f(mixed.avg())) {
        fails.push(format!(
            "(c) Joint Avg {j_avg:.2} vs Mixed {:.2}",
            f(mixed.avg())
        ));
    }
    if !(f(ir_only.avg()) < j_avg && f(sts_only.avg()) < j_avg) {
        fails.push(format!(
            "(d) IR-only {:.2}, STS-only {:.2} vs Joint {j_avg:.2}",
            f(ir_only.avg()),
            f(sts_only.avg())
        ));
    }
    if secs > 300.0 {
        fails.push(format!("took {secs:.0}s"));
    }
    if !fails.is_empty() {
        return Err(fails.join("; "));
    }
    Ok(format!(
        "Joint IR {j_ir:.2} STS {j_sts:.2} Avg {j_avg:.2}; InfoNCE STS {:.2}; CoSENT IR {:.2}; Mixed {:.2}; IR-only {:.2}; STS-only {:.2}; {secs:.0}s",
        f(infonce.avg_sts()),
        f(cosent.avg_ir()),
        f(mixed.avg()),
        f(ir_only.avg()),
        f(sts_only.avg())
    ))
}

fn geometry_checks() -> Outcome {
    for n in 2..=8 {
        let x = Matrix::<f64>::identity(n);
        let ts = tok_sim(&x).map_err(|e| e.to_string())?;
        let h = svd_entropy(&x).map_err(|e| e.to_string())?;
        ensure(ts.abs() <= 1e-9, format!("identity {n}: tok_sim {ts}"))?;
        ensure(numerical_rank(&x) == n, format!("identity {n}: rank"))?;
        ensure(
            (condition_number(&x) - 1.0).abs() <= 1e-9,
            format!("identity {n}: kappa"),
        )?;
        ensure(
            (h - (n as f64).ln()).abs() <= 1e-9,
            format!("identity {n}: entropy {h}"),
        )?;
    }
    let mut r = common::rng(77);
    let u: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let outer = Matrix::from_vec(
        6,
        4,
        u.iter()
            .flat_map(|a| v.iter().map(move |b| a * b))
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    ensure(numerical_rank(&outer) == 1, "rank-1 rank")?;
    ensure(
        svd_entropy(&outer).map_err(|e| e.to_string())?.abs() <= 1e-9,
        "rank-1 entropy",
    )?;
    for _ in 0..100 {
        let rows = r.gen_range(2..=8);
        let cols = r.gen_range(2..=8);
        let x = common::uniform_matrix(&mut r, rows, cols);
        let y = x.scaled(10f64.powf(r.gen_range(-3.0..3.0)));
        let (k1, k2) = (condition_number(&x), condition_number(&y));
        ensure(
            (k1 - k2).abs() <= 1e-9 * k1,
            "condition number not scale invariant",
        )?;
        let (h1, h2) = (svd_entropy(&x).unwrap(), svd_entropy(&y).unwrap());
        ensure((h1 - h2).abs() <= 1e-9, "entropy not scale invariant")?;
    }

    let synth = SynthConfig {
        topic_count: 8,
        vocab_size: 300,
        records_per_task: 100,
        eval_sts_records: 100,
        ..SynthConfig::default()
    };
    let (_, corpus) = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let data = GridData::from_synthetic(&corpus).map_err(|e| e.to_string())?;
    let encoder = tandem::encoder::Encoder::new(EncoderConfig {
        vocab_size: 300,
        ..EncoderConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let mut table = geometry_header();
    geometry_rows(&mut table, "Initial", &encoder, &data.test).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_table(dir.path(), "geometry", &table).map_err(|e| e.to_string())?;
    let csv =
        std::fs::read_to_string(dir.path().join("geometry.csv")).map_err(|e| e.to_string())?;
    ensure(
        csv.lines().count() == 3
            && csv.starts_with("method,dataset,tok_sim,rank,condition_number,svd_entropy"),
        format!("unexpected CSV:\n{csv}"),
    )?;
    Ok("identity, rank-1, 100 scaled matrices, eval-split CSV with 2 rows".to_string())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let synth = SynthConfig {
        topic_count: 8,
        vocab_size: 400,
        records_per_task: 400,
        eval_sts_records: 200,
        dev_sts_records: 100,
        ..SynthConfig::default()
    };
    let base = TrainConfig {
        encoder: EncoderConfig {
            vocab_size: 400,
            dim: 16,
            ..EncoderConfig::default()
        },
        total_steps: 150,
        eval_every: 50,
        checkpoint_every: 50,
        ..TrainConfig::default()
    };
    let run = |dir: &Path| -> Result<(), String> {
        let (_, corpus) = generate_synthetic(&synth).map_err(|e| e.to_string())?;
        let data = GridData::from_synthetic(&corpus).map_err(|e| e.to_string())?;
        let outcome = run_experiment_grid(&base, &Variant::ALL, &data, &FusionOptions::default());
        write_grid(&outcome, &data, dir).map_err(|e| e.to_string())
    };
    let (a, b) = (
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    );
    run(a.path())?;
    run(b.path())?;
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    ensure(fa == fb, "different file sets")?;
    let mut bytes = 0usize;
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    for f in &fa {
        let (x, y) = (
            std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?,
            std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?,
        );
        ensure(x == y, format!("{} differs", f.display()))?;
        bytes += x.len();
        let ext = f
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_default();
        *kinds.entry(ext).or_default() += 1;
    }
    ensure(
        kinds.get("ckpt").copied().unwrap_or(0) > 0,
        "no checkpoints written",
    )?;
    ensure(
        kinds.get("jsonl").copied().unwrap_or(0) > 0,
        "no logs written",
    )?;
    Ok(format!(
        "{} files ({bytes} bytes) identical: {kinds:?}",
        fa.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("finite-difference gradients", gradients),
        ("temperature softmax examples", softmax_examples),
        ("metric oracles", metric_oracles),
        ("10k-step sampler plan", sampler_plan),
        ("fusion algebra", fusion_algebra),
        ("synthetic grid trends", grid_experiment),
        ("geometry diagnostics", geometry_checks),
        ("grid reproducibility", reproducibility),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let result = std::panic::catch_unwind(check)
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        match result {
            Ok(detail) => println!("criterion {id} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
