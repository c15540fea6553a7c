//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod checks;

use che_core::data::{PatientRecord, Visit};
use che_core::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, lo, hi)).unwrap()
}

pub fn random_record(rng: &mut ChaCha8Rng, m: usize, n: usize, visits: usize) -> PatientRecord {
    let visits = (0..visits)
        .map(|_| {
            let kd = rng.gen_range(1..=3.min(m));
            let kp = rng.gen_range(1..=3.min(n));
            Visit::new(sample(rng, m, kd).into_vec(), sample(rng, n, kp).into_vec())
        })
        .collect();
    PatientRecord { id: format!("r{}", rng.gen::<u32>()), env: "test".into(), visits }
}

/// Position of `code` in the ranking: the number of codes that beat it, where a
/// code beats another on a higher score or an equal score and lower index.
fn position(scores: &[f64], code: usize) -> usize {
    (0..scores.len())
        .filter(|&c| scores[c] > scores[code] || (scores[c] == scores[code] && c < code))
        .count()
}

pub fn naive_acc(scores: &[f64], truth: &[usize], k: usize) -> f64 {
    let hits = truth.iter().filter(|&&c| position(scores, c) < k).count();
    hits as f64 / k.min(truth.len()) as f64
}

pub fn naive_ndcg(scores: &[f64], truth: &[usize], k: usize) -> f64 {
    // Summed in rank order so the float result is comparable bit for bit.
    let mut ranks: Vec<usize> = truth.iter().map(|&c| position(scores, c) + 1).filter(|&p| p <= k).collect();
    ranks.sort_unstable();
    let mut dcg = 0.0;
    for p in ranks {
        dcg += 1.0 / ((p + 1) as f64).log2();
    }
    let mut idcg = 0.0;
    for p in 1..=k.min(truth.len()) {
        idcg += 1.0 / ((p + 1) as f64).log2();
    }
    dcg / idcg
}

/// `Tr(K_d J K_p J) / (r-1)^2` with explicit matrices and triple loops.
pub fn brute_hsic(x: &[f64], y: &[f64], sx: f64, sy: f64) -> f64 {
    let r = x.len();
    let kern = |v: &[f64], s: f64| -> Vec<Vec<f64>> {
        (0..r).map(|a| (0..r).map(|b| (-(v[a] - v[b]).powi(2) / (s * s)).exp()).collect()).collect()
    };
    let j: Vec<Vec<f64>> =
        (0..r).map(|a| (0..r).map(|b| if a == b { 1.0 } else { 0.0 } - 1.0 / r as f64).collect()).collect();
    let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let mut c = vec![vec![0.0; r]; r];
        for i in 0..r {
            for k in 0..r {
                for l in 0..r {
                    c[i][l] += a[i][k] * b[k][l];
                }
            }
        }
        c
    };
    let kd = kern(x, sx);
    let kp = kern(y, sy);
    let prod = mul(&mul(&mul(&kd, &j), &kp), &j);
    (0..r).map(|i| prod[i][i]).sum::<f64>() / ((r - 1) * (r - 1)) as f64
}

/// Median of pairwise squared differences, square-rooted; 1 for a zero median.
pub fn brute_median_sigma(v: &[f64]) -> f64 {
    let mut d = Vec::new();
    for a in 0..v.len() {
        for b in a + 1..v.len() {
            d.push((v[a] - v[b]).powi(2));
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if med > 0.0 {
        med.sqrt()
    } else {
        1.0
    }
}
