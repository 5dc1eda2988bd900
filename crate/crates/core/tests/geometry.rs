mod common;

use common::{rng, uniform_matrix};
use rand::Rng;
use tandem::corpus::{generate_synthetic, SynthConfig, TaskKind};
use tandem::encoder::{Encoder, EncoderConfig};
use tandem::geometry::{condition_number, diagnose_corpus, numerical_rank, svd_entropy, tok_sim};
use tandem::grid::{geometry_header, geometry_rows, GridData};
use tandem::linalg::Matrix;
use tandem::Error;

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
fn oracle_singular_values(x: &Matrix<f64>) -> Vec<f64> {
    let m = if x.cols() <= x.rows() {
        x.clone()
    } else {
        x.transpose()
    };
    let k = m.cols();
    let gram = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| (0..m.rows()).map(|r| m.row(r)[i] * m.row(r)[j]).sum())
                .collect()
        })
        .collect();
    symmetric_eigenvalues(gram)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect()
}

/// Rank by Gaussian elimination with partial pivoting.
fn oracle_rank(x: &Matrix<f64>, tol: f64) -> usize {
    let mut a: Vec<Vec<f64>> = x.iter_rows().map(|r| r.to_vec()).collect();
    let (rows, cols) = x.shape();
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())) else {
            break;
        };
        if a[p][c].abs() <= tol {
            continue;
        }
        a.swap(rank, p);
        for r in rank + 1..rows {
            let f = a[r][c] / a[rank][c];
            for k in c..cols {
                a[r][k] -= f * a[rank][k];
            }
        }
        rank += 1;
    }
    rank
}

fn low_rank(r: &mut impl Rng, rows: usize, cols: usize, rank: usize) -> Matrix<f64> {
    let mut rr = common::rng(r.gen());
    let a = uniform_matrix(&mut rr, rows, rank);
    let b = uniform_matrix(&mut rr, rank, cols);
    let data = (0..rows)
        .flat_map(|i| {
            let (a, b) = (&a, &b);
            (0..cols).map(move |j| (0..rank).map(|k| a.row(i)[k] * b.row(k)[j]).sum())
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

#[test]
fn identity_matrix_diagnostics() {
    for n in 2..=8 {
        let x = Matrix::<f64>::identity(n);
        assert!(tok_sim(&x).unwrap().abs() < 1e-9);
        assert_eq!(numerical_rank(&x), n);
        assert!((condition_number(&x) - 1.0).abs() < 1e-9);
        assert!((svd_entropy(&x).unwrap() - (n as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn rank_one_matrix_diagnostics() {
    let mut r = rng(1);
    for _ in 0..20 {
        let x = low_rank(&mut r, 6, 4, 1);
        assert_eq!(numerical_rank(&x), 1);
        assert!(svd_entropy(&x).unwrap().abs() < 1e-9);
        assert!(condition_number(&x).is_infinite());
    }
}

#[test]
fn tok_sim_matches_direct_summation() {
    let mut r = rng(2);
    for _ in 0..50 {
        let x = uniform_matrix(&mut r, 5, 4);
        let mut sum = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    let (u, v) = (x.row(i), x.row(j));
                    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    sum += dot / (nu * nv);
                }
            }
        }
        assert!((tok_sim(&x).unwrap() - sum / 20.0).abs() < 1e-12);
    }
    assert!(matches!(
        tok_sim(&Matrix::<f64>::identity(1)),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn tok_sim_ignores_row_scaling() {
    let mut r = rng(3);
    for _ in 0..50 {
        let x = uniform_matrix(&mut r, 6, 5);
        let mut y = x.clone();
        for i in 0..6 {
            let c = r.gen_range(0.01..100.0);
            y.row_mut(i).iter_mut().for_each(|v| *v *= c);
        }
        assert!((tok_sim(&x).unwrap() - tok_sim(&y).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn rank_matches_pivoted_elimination() {
    let mut r = rng(4);
    for _ in 0..50 {
        let x = uniform_matrix(&mut r, 6, 4);
        assert_eq!(numerical_rank(&x), 4);
        assert_eq!(oracle_rank(&x, 1e-10), 4);
        for k in 1..=3 {
            let y = low_rank(&mut r, 6, 4, k);
            assert_eq!(numerical_rank(&y), k);
            assert_eq!(oracle_rank(&y, 1e-10), k);
            assert_eq!(numerical_rank(&y.transpose()), k);
        }
    }
}

#[test]
fn condition_number_and_entropy_match_svd_oracle() {
    let mut r = rng(5);
    for _ in 0..50 {
        let rows = r.gen_range(2..=8);
        let cols = r.gen_range(2..=8);
        let x = uniform_matrix(&mut r, rows, cols);
        let sv = oracle_singular_values(&x);
        let kappa = sv[0] / sv[sv.len() - 1];
        let got = condition_number(&x);
        assert!((got - kappa).abs() / kappa < 1e-10, "{got} vs {kappa}");
        let total: f64 = sv.iter().map(|s| s * s).sum();
        let h: f64 = sv
            .iter()
            .map(|s| s * s / total)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        assert!((svd_entropy(&x).unwrap() - h).abs() < 1e-10);
    }
}

#[test]
fn entropy_is_bounded_by_log_rank() {
    let mut r = rng(6);
    for _ in 0..100 {
        let rows = r.gen_range(2..=9);
        let cols = r.gen_range(2..=9);
        let k = r.gen_range(1..=rows.min(cols));
        let x = low_rank(&mut r, rows, cols, k);
        let rank = numerical_rank(&x);
        assert!(svd_entropy(&x).unwrap() <= (rank as f64).ln() + 1e-9);
    }
}

#[test]
fn condition_number_and_entropy_ignore_global_scale() {
    let mut r = rng(7);
    for _ in 0..100 {
        let rows = r.gen_range(2..=8);
        let cols = r.gen_range(2..=8);
        let x = uniform_matrix(&mut r, rows, cols);
        let c = 10f64.powf(r.gen_range(-3.0..3.0));
        let y = x.scaled(c);
        let (k1, k2) = (condition_number(&x), condition_number(&y));
        assert!((k1 - k2).abs() / k1 < 1e-9);
        assert!((svd_entropy(&x).unwrap() - svd_entropy(&y).unwrap()).abs() < 1e-9);
        assert_eq!(numerical_rank(&x), numerical_rank(&y));
    }
}

#[test]
fn f32_diagnostics_track_f64() {
    let mut r = rng(8);
    for _ in 0..20 {
        let x = uniform_matrix(&mut r, 6, 4);
        let x32 = Matrix::<f32>::from_vec(6, 4, x.as_slice().iter().map(|&v| v as f32).collect())
            .unwrap();
        assert_eq!(numerical_rank(&x32), 4);
        assert!((svd_entropy(&x32).unwrap() as f64 - svd_entropy(&x).unwrap()).abs() < 1e-4);
        assert!((tok_sim(&x32).unwrap() as f64 - tok_sim(&x).unwrap()).abs() < 1e-5);
    }
}

#[test]
fn corpus_diagnostics_on_the_synthetic_eval_split() {
    let synth = SynthConfig {
        topic_count: 8,
        vocab_size: 300,
        records_per_task: 50,
        eval_sts_records: 40,
        dev_sts_records: 20,
        ..SynthConfig::default()
    };
    let (_, corpus) = generate_synthetic(&synth).unwrap();
    let encoder = Encoder::new(EncoderConfig {
        vocab_size: 300,
        dim: 8,
        ..EncoderConfig::default()
    })
    .unwrap();
    let texts: Vec<&str> = corpus.sts_test.iter().map(|r| r.query.as_str()).collect();
    let g = diagnose_corpus(&encoder, &texts, TaskKind::Sts).unwrap();
    assert_eq!(g.texts, texts.len());
    assert!(g.mean.tok_sim.is_finite() && g.mean.tok_sim.abs() <= 1.0);
    assert!(g.mean.rank >= 1.0 && g.mean.rank <= 8.0);
    assert!(g.mean.svd_entropy >= 0.0 && g.mean.svd_entropy <= 8f64.ln() + 1e-9);

    let data = GridData::from_synthetic(&corpus).unwrap();
    let mut table = geometry_header();
    geometry_rows(&mut table, "Initial", &encoder, &data.test).unwrap();
    let csv = table.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("method,dataset,tok_sim,rank"));
    assert!(lines[1].starts_with("Initial,synth-ir,"));
    assert!(lines[2].starts_with("Initial,synth-sts,"));

    assert!(matches!(
        diagnose_corpus(&encoder, &["17"], TaskKind::Sts),
        Err(Error::EmptyBatch(_))
    ));
}
