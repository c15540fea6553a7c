mod common;

use che_core::metrics::{acc_at_k, cross_predictability, evaluate, ndcg_at_k, welch_t_test, Scorer};
use che_core::{PatientRecord, Result};
use common::{naive_acc, naive_ndcg, random_record, rng};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_instance(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, Vec<usize>, usize) {
    let m = r.gen_range(1..=40);
    // A coarse score grid forces frequent ties.
    let levels = r.gen_range(1..=6);
    let scores = (0..m).map(|_| r.gen_range(0..levels) as f64).collect();
    let t = r.gen_range(1..=m);
    let truth = sample(r, m, t).into_vec();
    let k = r.gen_range(1..=m + 5);
    (scores, truth, k)
}

#[test]
fn match_naive_evaluator_exactly() {
    let mut r = rng(31);
    for _ in 0..10_000 {
        let (scores, truth, k) = random_instance(&mut r);
        assert_eq!(acc_at_k(&scores, &truth, k).unwrap(), naive_acc(&scores, &truth, k));
        assert_eq!(ndcg_at_k(&scores, &truth, k).unwrap(), naive_ndcg(&scores, &truth, k));
    }
}

#[test]
fn worked_examples() {
    let mut scores = vec![0.0; 12];
    scores[4] = 3.0;
    scores[9] = 2.0;
    assert!((acc_at_k(&scores, &[4, 9, 11], 10).unwrap() - 2.0 / 3.0).abs() < 1e-6);
    let scores = [0.2, 0.7, 0.1];
    assert!((ndcg_at_k(&scores, &[0], 2).unwrap() - 0.630930).abs() < 1e-6);
}

#[test]
fn invariant_under_monotone_transform() {
    let mut r = rng(32);
    for _ in 0..2000 {
        let (scores, truth, k) = random_instance(&mut r);
        let t: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() * 7.0 - 2.0).collect();
        assert_eq!(acc_at_k(&scores, &truth, k).unwrap(), acc_at_k(&t, &truth, k).unwrap());
        assert_eq!(ndcg_at_k(&scores, &truth, k).unwrap(), ndcg_at_k(&t, &truth, k).unwrap());
    }
}

#[test]
fn ndcg_is_one_exactly_when_ideal() {
    let mut r = rng(33);
    for _ in 0..5000 {
        let (scores, truth, k) = random_instance(&mut r);
        let v = ndcg_at_k(&scores, &truth, k).unwrap();
        assert!(v <= 1.0 + 1e-15);
        let top = che_core::metrics::rank_codes(&scores);
        let ideal = top.iter().take(k.min(truth.len())).all(|c| truth.contains(c));
        assert_eq!(ideal, (v - 1.0).abs() < 1e-12, "scores {scores:?} truth {truth:?} k {k}");
    }
}

/// Scores derived from the record contents, so every point gets a distinct ranking.
struct Hashy;

impl Scorer for Hashy {
    fn scores(&self, record: &PatientRecord, prefix: usize) -> Result<Vec<f64>> {
        let seed = record.visits[..prefix].iter().flat_map(|v| v.dx.iter().chain(&v.px)).fold(prefix as u64, |a, &c| {
            a.wrapping_mul(6364136223846793005).wrapping_add(c as u64 + 1)
        });
        Ok((0..9u64).map(|c| ((seed ^ c.wrapping_mul(0x9E37)) % 5) as f64).collect())
    }
}

struct Perfect;

impl Scorer for Perfect {
    fn scores(&self, record: &PatientRecord, prefix: usize) -> Result<Vec<f64>> {
        let mut s = vec![0.0; 9];
        record.visits[prefix].dx.iter().for_each(|&c| s[c] = 1.0);
        Ok(s)
    }
}

#[test]
fn evaluate_matches_pointwise_oracle_and_concatenates() {
    let mut r = rng(34);
    let a: Vec<PatientRecord> = (0..15).map(|_| { let n = r.gen_range(2..6); random_record(&mut r, 9, 5, n) }).collect();
    let b: Vec<PatientRecord> = (0..7).map(|_| { let n = r.gen_range(2..6); random_record(&mut r, 9, 5, n) }).collect();
    let ks = [3, 5];
    let ea = evaluate(&Hashy, &a, &ks).unwrap();
    let eb = evaluate(&Hashy, &b, &ks).unwrap();
    let all: Vec<PatientRecord> = a.iter().chain(&b).cloned().collect();
    let eab = evaluate(&Hashy, &all, &ks).unwrap();

    let mut ndcg = [0.0; 2];
    let mut points = 0;
    for rec in &a {
        for j in 1..rec.len() {
            let s = Hashy.scores(rec, j).unwrap();
            for (i, &k) in ks.iter().enumerate() {
                ndcg[i] += naive_ndcg(&s, &rec.visits[j].dx, k);
            }
            points += 1;
        }
    }
    assert_eq!(ea.points, points);
    for i in 0..2 {
        assert!((ea.ndcg[i] - ndcg[i] / points as f64).abs() < 1e-12);
    }

    let (na, nb) = (ea.points as f64, eb.points as f64);
    for i in 0..2 {
        assert!((eab.ndcg[i] - (na * ea.ndcg[i] + nb * eb.ndcg[i]) / (na + nb)).abs() < 1e-12);
        assert!((eab.acc[i] - (na * ea.acc[i] + nb * eb.acc[i]) / (na + nb)).abs() < 1e-12);
    }

    let perfect = evaluate(&Perfect, &all, &ks).unwrap();
    assert!(perfect.ndcg.iter().chain(&perfect.acc).all(|&v| v == 1.0));

    let one = vec![random_record(&mut r, 9, 5, 2)];
    let e = evaluate(&Hashy, &one, &[4]).unwrap();
    let s = Hashy.scores(&one[0], 1).unwrap();
    assert_eq!(e.points, 1);
    assert_eq!(e.acc[0], naive_acc(&s, &one[0].visits[1].dx, 4));
}

#[test]
fn welch_matches_reference_values() {
    // Two-sided p-values from an independent statistics package.
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[0.2648, 0.2701, 0.2633, 0.2690, 0.2655], &[0.2756, 0.2801, 0.2749, 0.2790, 0.2770], 0.00021995316337365713),
        (&[1.0, 2.0, 3.0, 4.0], &[2.5, 3.5, 4.5, 6.0, 7.0, 8.0], 0.03417648807790187),
        (&[0.31, 0.29, 0.35], &[0.30, 0.28, 0.33, 0.36, 0.27], 0.7344888094461726),
    ];
    for (a, b, p) in cases {
        let got = welch_t_test(a, b).unwrap();
        assert!((got - p).abs() < 1e-4, "{got} vs {p}");
        assert_eq!(got, welch_t_test(b, a).unwrap());
    }
    let z = [0.0; 5];
    let o = [1.0, 1.0 + 1e-9, 1.0 - 1e-9, 1.0 + 2e-9, 1.0];
    assert!(welch_t_test(&z, &o).unwrap() < 1e-6);
    assert_eq!(welch_t_test(&o, &o).unwrap(), 1.0);
}

/// Weighted ridge with an unpenalised intercept column, solved by Gaussian
/// elimination on the full normal equations.
fn ridge_oracle(y: &[Vec<f64>], x: &[Vec<f64>], w: &[f64]) -> f64 {
    let mean_w = w.iter().sum::<f64>() / w.len() as f64;
    let p = x[0].len() + 1;
    let q = y[0].len();
    let mut a = vec![vec![0.0; p + q]; p];
    for ((xr, yr), wi) in x.iter().zip(y).zip(w) {
        let wi = wi / mean_w;
        let row: Vec<f64> = std::iter::once(1.0).chain(xr.iter().copied()).collect();
        for i in 0..p {
            for j in 0..p {
                a[i][j] += wi * row[i] * row[j];
            }
            for c in 0..q {
                a[i][p + c] += wi * row[i] * yr[c];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate().skip(1) {
        row[i] += 1e-3;
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for i in 0..p {
            if i != col {
                let f = a[i][col] / a[col][col];
                for j in col..p + q {
                    a[i][j] -= f * a[col][j];
                }
            }
        }
    }
    let beta: Vec<Vec<f64>> = (0..p).map(|i| (0..q).map(|c| a[i][p + c] / a[i][i]).collect()).collect();
    let (mut rss, mut tss) = (0.0, 0.0);
    let wsum: f64 = w.iter().sum();
    for c in 0..q {
        let my = y.iter().zip(w).map(|(r, wi)| wi * r[c]).sum::<f64>() / wsum;
        for ((xr, yr), wi) in x.iter().zip(y).zip(w) {
            let pred = beta[0][c] + xr.iter().enumerate().map(|(i, v)| v * beta[i + 1][c]).sum::<f64>();
            rss += wi * (yr[c] - pred).powi(2);
            tss += wi * (yr[c] - my).powi(2);
        }
    }
    (1.0 - rss / tss).clamp(-1.0, 1.0)
}

#[test]
fn cross_predictability_matches_ridge_oracle() {
    let mut r = rng(35);
    for _ in 0..50 {
        let n = r.gen_range(10..80);
        let (dx, dy) = (r.gen_range(1..6), r.gen_range(1..6));
        let mix: Vec<Vec<f64>> = (0..dx).map(|_| (0..dy).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..dx).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|xr| {
                (0..dy)
                    .map(|c| {
                        let e: f64 = StandardNormal.sample(&mut r);
                        (0..dx).map(|a| xr[a] * mix[a][c]).sum::<f64>() + 0.7 * e
                    })
                    .collect()
            })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..20.0)).collect();
        let got = cross_predictability(&y, &x, &w).unwrap();
        let want = ridge_oracle(&y, &x, &w);
        assert!(!got.degenerate);
        assert!((got.r2 - want).abs() < 1e-9, "{} vs {want}", got.r2);
    }
}
