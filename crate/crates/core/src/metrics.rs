//! Ranking metrics, cross-seed significance tests and the cross-predictability probe.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::PatientRecord;
use crate::encoders::Model;
use crate::error::{Error, Result};

/// Code indices ordered by descending score; equal scores keep ascending index.
pub fn rank_codes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check(truth: &[usize], k: usize) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Empty("truth code set"));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    Ok(())
}

fn hits<'a>(ranking: &'a [usize], truth: &'a [usize], k: usize) -> impl Iterator<Item = (usize, bool)> + 'a {
    ranking.iter().take(k).enumerate().map(move |(pos, c)| (pos, truth.contains(c)))
}

/// `|top-k ∩ truth| / min(k, |truth|)`.
pub fn acc_at_k(scores: &[f64], truth: &[usize], k: usize) -> Result<f64> {
    check(truth, k)?;
    Ok(acc_from_ranking(&rank_codes(scores), truth, k))
}

/// Binary-relevance NDCG with `1/log2(p+1)` discount and an ideal DCG over
/// `min(k, |truth|)` hits.
pub fn ndcg_at_k(scores: &[f64], truth: &[usize], k: usize) -> Result<f64> {
    check(truth, k)?;
    Ok(ndcg_from_ranking(&rank_codes(scores), truth, k))
}

fn acc_from_ranking(ranking: &[usize], truth: &[usize], k: usize) -> f64 {
    let found = hits(ranking, truth, k).filter(|(_, h)| *h).count();
    found as f64 / k.min(truth.len()) as f64
}

fn discount(pos: usize) -> f64 {
    1.0 / ((pos + 2) as f64).log2()
}

fn ndcg_from_ranking(ranking: &[usize], truth: &[usize], k: usize) -> f64 {
    let dcg: f64 = hits(ranking, truth, k).filter(|(_, h)| *h).map(|(p, _)| discount(p)).sum();
    let idcg: f64 = (0..k.min(truth.len())).map(discount).sum();
    dcg / idcg
}

/// Anything that produces one score per diagnosis code for a prediction point.
pub trait Scorer {
    fn scores(&self, record: &PatientRecord, prefix: usize) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn scores(&self, record: &PatientRecord, prefix: usize) -> Result<Vec<f64>> {
        self.logits_point(record, prefix)
    }
}

/// Mean metrics over every prediction point of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ks: Vec<usize>,
    pub ndcg: Vec<f64>,
    pub acc: Vec<f64>,
    pub points: usize,
}

impl EvalResult {
    /// `NDCG@k...` then `ACC@k...`, the column order of the result tables.
    pub fn named(&self) -> Vec<(String, f64)> {
        let n = self.ks.iter().zip(&self.ndcg).map(|(k, v)| (format!("NDCG@{k}"), *v));
        let a = self.ks.iter().zip(&self.acc).map(|(k, v)| (format!("ACC@{k}"), *v));
        n.chain(a).collect()
    }

    /// Unweighted mean over all metric columns.
    pub fn average(&self) -> f64 {
        let all: Vec<f64> = self.ndcg.iter().chain(&self.acc).copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, records: &[PatientRecord], ks: &[usize]) -> Result<EvalResult> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig(format!("invalid cutoffs {ks:?}")));
    }
    let mut ndcg = vec![0.0; ks.len()];
    let mut acc = vec![0.0; ks.len()];
    let mut points = 0usize;
    for r in records {
        for prefix in 1..r.len() {
            let truth = &r.visits[prefix].dx;
            if truth.is_empty() {
                return Err(Error::Empty("truth code set"));
            }
            let ranking = rank_codes(&scorer.scores(r, prefix)?);
            for (i, &k) in ks.iter().enumerate() {
                ndcg[i] += ndcg_from_ranking(&ranking, truth, k);
                acc[i] += acc_from_ranking(&ranking, truth, k);
            }
            points += 1;
        }
    }
    if points == 0 {
        return Err(Error::Empty("split has no prediction points"));
    }
    let n = points as f64;
    ndcg.iter_mut().chain(acc.iter_mut()).for_each(|v| *v /= n);
    Ok(EvalResult { ks: ks.to_vec(), ndcg, acc, points })
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.len() < 2 {
        return (v.first().copied().unwrap_or(f64::NAN), f64::NAN);
    }
    let (m, var) = mean_var(v);
    (m, var.sqrt())
}

/// Two-sided Welch t-test p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "t-test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let sa = va / a.len() as f64;
    let sb = vb / b.len() as f64;
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidConfig(format!("t distribution: {e}")))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predictability {
    pub r2: f64,
    pub degenerate: bool,
}

const RIDGE: f64 = 1e-3;

/// Weighted R² of a ridge regression (with intercept) predicting each `e_d`
/// from the paired `e_p`. Weights are rescaled to mean 1 first.
pub fn cross_predictability(e_d: &[Vec<f64>], e_p: &[Vec<f64>], weights: &[f64]) -> Result<Predictability> {
    let n = e_d.len();
    if n < 10 || e_p.len() != n || weights.len() != n {
        return Err(Error::InvalidConfig(format!(
            "cross_predictability needs >= 10 aligned pairs, got {n}/{}/{}",
            e_p.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidConfig("weights must be positive".into()));
    }
    // Mean-1 weights keep the fixed ridge penalty on the scale of an unweighted fit.
    let wmean_raw = weights.iter().sum::<f64>() / n as f64;
    let weights: Vec<f64> = weights.iter().map(|w| w / wmean_raw).collect();
    let weights = weights.as_slice();
    let dx = e_p[0].len();
    let dy = e_d[0].len();
    let wsum: f64 = weights.iter().sum();
    let wmean = |rows: &[Vec<f64>], dim: usize| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for (row, w) in rows.iter().zip(weights) {
            for (mi, v) in m.iter_mut().zip(row) {
                *mi += w * v;
            }
        }
        m.iter_mut().for_each(|v| *v /= wsum);
        m
    };
    let mx = wmean(e_p, dx);
    let my = wmean(e_d, dy);

    if e_p.iter().all(|row| row == &e_p[0]) {
        return Ok(Predictability { r2: 0.0, degenerate: true });
    }

    // Normal equations on centred data: (XᵀWX + λI) B = XᵀWY.
    let mut gram = vec![0.0; dx * dx];
    let mut cross = vec![0.0; dx * dy];
    for ((x, y), &w) in e_p.iter().zip(e_d).zip(weights) {
        for a in 0..dx {
            let xa = w * (x[a] - mx[a]);
            for b in 0..dx {
                gram[a * dx + b] += xa * (x[b] - mx[b]);
            }
            for c in 0..dy {
                cross[a * dy + c] += xa * (y[c] - my[c]);
            }
        }
    }
    for a in 0..dx {
        gram[a * dx + a] += RIDGE;
    }
    let coef = cholesky_solve(&gram, dx, &cross, dy)?;

    let mut rss = 0.0;
    let mut tss = 0.0;
    for ((x, y), &w) in e_p.iter().zip(e_d).zip(weights) {
        for c in 0..dy {
            let pred: f64 = my[c] + (0..dx).map(|a| (x[a] - mx[a]) * coef[a * dy + c]).sum::<f64>();
            rss += w * (y[c] - pred).powi(2);
            tss += w * (y[c] - my[c]).powi(2);
        }
    }
    if tss == 0.0 {
        return Ok(Predictability { r2: 0.0, degenerate: true });
    }
    Ok(Predictability { r2: (1.0 - rss / tss).clamp(-1.0, 1.0), degenerate: false })
}

/// Solves `A X = B` for symmetric positive-definite `A` (`n×n`), `B` (`n×m`).
fn cholesky_solve(a: &[f64], n: usize, b: &[f64], m: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return Err(Error::InvalidConfig("normal equations are not positive definite".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut x = b.to_vec();
    for c in 0..m {
        for i in 0..n {
            let s: f64 = x[i * m + c] - (0..i).map(|k| l[i * n + k] * x[k * m + c]).sum::<f64>();
            x[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = x[i * m + c] - ((i + 1)..n).map(|k| l[k * n + i] * x[k * m + c]).sum::<f64>();
            x[i * m + c] = s / l[i * n + i];
        }
    }
    Ok(x)
}
