//! Shared test helpers: a central-difference gradient oracle and seeded
//! random instances for every loss.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tandem::linalg::Matrix;
use tandem::losses::{
    cosent_loss, infonce_baseline, ir_infonce_multi, mid_nce_loss, pearson_loss, pro_loss,
    rank_kl_loss, ranknet_loss, softmax_kl_loss, sts_combined, IrBatch, ScoredPairBatch,
    StsLossWeights,
};

pub const FD_STEP: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Five-point central difference of `f` along coordinate `i`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut at = |offset: f64| {
        p[i] = x[i] + offset;
        f(&p)
    };
    let (u1, d1, u2, d2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
    (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * h)
}

/// Largest relative error between `grad` and central differences of `f`.
pub fn fd_max_rel_err(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    assert_eq!(x.len(), grad.len());
    (0..x.len())
        .map(|i| rel_err(grad[i], central_difference(f, x, i, FD_STEP)))
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Labels on a five-level grid, so ties occur; never all equal.
pub fn graded_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
        if y.iter().any(|&v| v != y[0]) {
            return y;
        }
    }
}

pub fn predictions(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn split(x: &[f64], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut at = 0;
    for &s in sizes {
        out.push(x[at..at + s].to_vec());
        at += s;
    }
    out
}

type Case = fn(u64) -> f64;

fn scored_case(seed: u64, loss: &dyn Fn(&ScoredPairBatch<'_, f64>) -> (f64, Vec<f64>)) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(2..=8);
    let y = graded_labels(&mut r, n);
    let p = predictions(&mut r, n);
    let (_, g) = loss(&ScoredPairBatch::new(&p, &y).unwrap());
    let f = |x: &[f64]| loss(&ScoredPairBatch::new(x, &y).unwrap()).0;
    fd_max_rel_err(&f, &p, &g)
}

fn case_pearson(seed: u64) -> f64 {
    scored_case(seed, &|b| {
        let r = pearson_loss(b).unwrap();
        (r.value, r.grads)
    })
}

fn case_rank_kl(seed: u64) -> f64 {
    scored_case(seed, &|b| {
        let r = rank_kl_loss(b, 0.05).unwrap();
        (r.value, r.grads)
    })
}

fn case_softmax_kl(seed: u64) -> f64 {
    scored_case(seed, &|b| {
        let r = softmax_kl_loss(b, 0.1).unwrap();
        (r.value, r.grads)
    })
}

fn case_pro(seed: u64) -> f64 {
    scored_case(seed, &|b| {
        let r = pro_loss(b, 1.0).unwrap();
        (r.value, r.grads)
    })
}

fn case_cosent(seed: u64) -> f64 {
    scored_case(seed, &|b| {
        let r = cosent_loss(b, 0.05).unwrap();
        (r.value, r.grads)
    })
}

fn case_ranknet(seed: u64) -> f64 {
    scored_case(seed, &|b| {
        let r = ranknet_loss(b).unwrap();
        (r.value, r.grads)
    })
}

fn pair_case(
    seed: u64,
    loss: &dyn Fn(&Matrix<f64>, &Matrix<f64>, &[f64]) -> (f64, Vec<f64>, Vec<f64>),
) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(2..=8);
    let d = r.gen_range(2..=16);
    let y = graded_labels(&mut r, n);
    let a = uniform_matrix(&mut r, n, d);
    let b = uniform_matrix(&mut r, n, d);
    let (_, ga, gb) = loss(&a, &b, &y);
    let x: Vec<f64> = a.as_slice().iter().chain(b.as_slice()).copied().collect();
    let grad: Vec<f64> = ga.into_iter().chain(gb).collect();
    let f = |x: &[f64]| {
        let parts = split(x, &[n * d, n * d]);
        let a = Matrix::from_vec(n, d, parts[0].clone()).unwrap();
        let b = Matrix::from_vec(n, d, parts[1].clone()).unwrap();
        loss(&a, &b, &y).0
    };
    fd_max_rel_err(&f, &x, &grad)
}

fn case_mid_nce(seed: u64) -> f64 {
    pair_case(seed, &|a, b, y| {
        let r = mid_nce_loss(a, b, y, 0.5, 0.05).unwrap();
        (r.value, r.grads.left.into_vec(), r.grads.right.into_vec())
    })
}

fn case_infonce_baseline(seed: u64) -> f64 {
    pair_case(seed, &|a, b, y| {
        let r = infonce_baseline(a, b, y, 0.25, 0.05).unwrap();
        (r.value, r.grads.left.into_vec(), r.grads.right.into_vec())
    })
}

fn case_ir_infonce_multi(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..=8);
    let d = r.gen_range(2..=16);
    let kp = r.gen_range(1..=3);
    let kn = r.gen_range(0..=2);
    let q = uniform_matrix(&mut r, n, d);
    let p = uniform_matrix(&mut r, n * kp, d);
    let ng = uniform_matrix(&mut r, n * kn, d);
    let eval = |q: Matrix<f64>, p: Matrix<f64>, ng: Matrix<f64>| {
        ir_infonce_multi(&IrBatch::new(q, p, ng, kp, kn, vec![0; n]).unwrap(), 0.05).unwrap()
    };
    let res = eval(q.clone(), p.clone(), ng.clone());
    let x: Vec<f64> = q
        .as_slice()
        .iter()
        .chain(p.as_slice())
        .chain(ng.as_slice())
        .copied()
        .collect();
    let grad: Vec<f64> = res
        .grads
        .queries
        .as_slice()
        .iter()
        .chain(res.grads.positives.as_slice())
        .chain(res.grads.negatives.as_slice())
        .copied()
        .collect();
    let sizes = [n * d, n * kp * d, n * kn * d];
    let f = |x: &[f64]| {
        let parts = split(x, &sizes);
        eval(
            Matrix::from_vec(n, d, parts[0].clone()).unwrap(),
            Matrix::from_vec(n * kp, d, parts[1].clone()).unwrap(),
            Matrix::from_vec(n * kn, d, parts[2].clone()).unwrap(),
        )
        .value
    };
    fd_max_rel_err(&f, &x, &grad)
}

fn case_sts_combined(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(2..=8);
    let d = r.gen_range(2..=16);
    let y = graded_labels(&mut r, n);
    let p = predictions(&mut r, n);
    let a = uniform_matrix(&mut r, n, d);
    let b = uniform_matrix(&mut r, n, d);
    let w = StsLossWeights {
        alpha: 1.0,
        beta: 0.7,
        gamma: 0.5,
        lambda: 0.3,
        ..StsLossWeights::default()
    };
    let res = sts_combined(&ScoredPairBatch::new(&p, &y).unwrap(), Some((&a, &b)), &w).unwrap();
    let mid = res.grads.mid.unwrap();
    let x: Vec<f64> = p
        .iter()
        .chain(a.as_slice())
        .chain(b.as_slice())
        .copied()
        .collect();
    let grad: Vec<f64> = res
        .grads
        .predicted
        .iter()
        .chain(mid.left.as_slice())
        .chain(mid.right.as_slice())
        .copied()
        .collect();
    let f = |x: &[f64]| {
        let parts = split(x, &[n, n * d, n * d]);
        let a = Matrix::from_vec(n, d, parts[1].clone()).unwrap();
        let b = Matrix::from_vec(n, d, parts[2].clone()).unwrap();
        sts_combined(
            &ScoredPairBatch::new(&parts[0], &y).unwrap(),
            Some((&a, &b)),
            &w,
        )
        .unwrap()
        .value
    };
    fd_max_rel_err(&f, &x, &grad)
}

/// Every loss with a hand-derived gradient, by name.
pub const GRADIENT_CASES: [(&str, Case); 10] = [
    ("ir_infonce_multi", case_ir_infonce_multi),
    ("pearson", case_pearson),
    ("rank_kl", case_rank_kl),
    ("softmax_kl", case_softmax_kl),
    ("pro", case_pro),
    ("mid_nce", case_mid_nce),
    ("infonce_baseline", case_infonce_baseline),
    ("cosent", case_cosent),
    ("ranknet", case_ranknet),
    ("sts_combined", case_sts_combined),
];

/// Worst relative error per loss over `instances` seeds.
pub fn gradient_suite(instances: u64) -> Vec<(&'static str, f64)> {
    GRADIENT_CASES
        .iter()
        .map(|&(name, case)| {
            let worst = (0..instances)
                .map(|s| case(s.wrapping_mul(0x9E37_79B9) ^ name.len() as u64))
                .fold(0.0f64, f64::max);
            (name, worst)
        })
        .collect()
}

/// Every permutation of `items` (Heap's algorithm).
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    fn heap<T: Clone>(k: usize, a: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k - 1 {
            heap(k - 1, a, out);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
        heap(k - 1, a, out);
    }
    let mut a = items.to_vec();
    let mut out = Vec::new();
    heap(a.len(), &mut a, &mut out);
    out
}

fn oracle_dcg(order: &[f64], k: usize) -> f64 {
    let mut s = 0.0;
    for (pos, rel) in order.iter().enumerate() {
        if pos < k {
            s += rel / ((pos + 2) as f64).ln() * std::f64::consts::LN_2;
        }
    }
    s
}

/// nDCG@k with the ideal found by trying every ordering of the pool.
pub fn oracle_ndcg(ranked: &[f64], k: usize) -> f64 {
    let ideal = permutations(ranked)
        .iter()
        .map(|p| oracle_dcg(p, k))
        .fold(0.0, f64::max);
    if ideal == 0.0 {
        0.0
    } else {
        oracle_dcg(ranked, k) / ideal
    }
}

/// 1-based ranks by counting; tied values share the mean of their places.
pub fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation from pairwise differences, without centering.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    sxy / (sxx * syy).sqrt()
}

pub fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    oracle_pearson(&oracle_ranks(x), &oracle_ranks(y))
}
