//! Per-prediction-point sample weights.

use std::collections::{BTreeMap, HashMap};

use crate::data::PredictionPoint;
use crate::error::{Error, Result};

pub const WEIGHT_MIN: f64 = 0.05;
pub const WEIGHT_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeightTable {
    points: Vec<PredictionPoint>,
    values: Vec<f64>,
    index: HashMap<PredictionPoint, usize>,
}

impl SampleWeightTable {
    /// All weights one.
    pub fn ones(points: Vec<PredictionPoint>) -> Self {
        let values = vec![1.0; points.len()];
        Self::from_parts(points, values).expect("ones are valid weights")
    }

    pub fn from_parts(points: Vec<PredictionPoint>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::InvalidConfig(format!("{} points but {} weights", points.len(), values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidConfig(format!("weights must be positive and finite, found {v}")));
        }
        let index: HashMap<_, _> = points.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        if index.len() != points.len() {
            return Err(Error::InvalidConfig("duplicate prediction point in weight table".into()));
        }
        Ok(Self { points, values, index })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn points(&self) -> &[PredictionPoint] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, point: PredictionPoint) -> Option<f64> {
        self.index.get(&point).map(|&i| self.values[i])
    }

    pub fn set_values(&mut self, values: Vec<f64>) {
        assert_eq!(values.len(), self.values.len());
        self.values = values;
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Clip to `[WEIGHT_MIN, WEIGHT_MAX]` and rescale to mean one.
    pub fn normalize(&mut self) {
        clip_and_normalize(&mut self.values, WEIGHT_MIN, WEIGHT_MAX);
    }

    /// `"(i,j)" -> weight`, with `i` the patient index within the split.
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.points.iter().zip(&self.values).map(|(p, w)| (format!("({},{})", p.patient, p.prefix), *w)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, f64>) -> Result<Self> {
        let mut entries = Vec::with_capacity(map.len());
        for (k, v) in map {
            let inner = k
                .strip_prefix('(')
                .and_then(|s| s.strip_suffix(')'))
                .ok_or_else(|| Error::InvalidConfig(format!("bad weight key `{k}`")))?;
            let (i, j) = inner.split_once(',').ok_or_else(|| Error::InvalidConfig(format!("bad weight key `{k}`")))?;
            let parse =
                |s: &str| s.trim().parse::<usize>().map_err(|e| Error::InvalidConfig(format!("bad weight key `{k}`: {e}")));
            entries.push((PredictionPoint { patient: parse(i)?, prefix: parse(j)? }, *v));
        }
        entries.sort_by_key(|(p, _)| *p);
        let (points, values) = entries.into_iter().unzip();
        Self::from_parts(points, values)
    }
}

/// Scales positive `values` by the constant `c` for which
/// `mean(clamp(c * v, lo, hi)) == 1`, then clamps. `lo <= 1 <= hi` is required.
pub fn clip_and_normalize(values: &mut [f64], lo: f64, hi: f64) {
    let n = values.len();
    if n == 0 {
        return;
    }
    debug_assert!(lo <= 1.0 && hi >= 1.0);
    for v in values.iter_mut() {
        if !(*v > 0.0) || !v.is_finite() {
            *v = if v.is_finite() { lo } else { hi };
        }
    }
    if values.iter().all(|&v| (lo..=hi).contains(&v)) && values.iter().sum::<f64>() == n as f64 {
        return;
    }
    let vmin = values.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = values.iter().copied().fold(0.0, f64::max);
    let mean_at = |c: f64| values.iter().map(|&v| (c * v).clamp(lo, hi)).sum::<f64>() / n as f64;
    let (mut a, mut b) = ((lo / vmax).ln(), (hi / vmin).ln());
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mean_at(mid.exp()) < 1.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let c = (0.5 * (a + b)).exp();
    let scaled: Vec<f64> = values.iter().map(|&v| c * v).collect();
    let fixed: f64 = scaled.iter().filter(|&&x| x <= lo || x >= hi).map(|&x| x.clamp(lo, hi)).sum();
    let free: f64 = scaled.iter().filter(|&&x| x > lo && x < hi).sum();
    let s = if free > 0.0 { (n as f64 - fixed) / free } else { 1.0 };
    for (v, x) in values.iter_mut().zip(scaled) {
        *v = if x > lo && x < hi { (x * s).clamp(lo, hi) } else { x.clamp(lo, hi) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(n: usize) -> Vec<PredictionPoint> {
        (0..n).map(|i| PredictionPoint { patient: i, prefix: 1 }).collect()
    }

    #[test]
    fn ones_stay_ones() {
        let mut t = SampleWeightTable::ones(pts(49));
        t.normalize();
        assert!(t.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_entry_is_pinned() {
        let mut t = SampleWeightTable::from_parts(pts(1), vec![7.3]).unwrap();
        t.normalize();
        assert!((t.values()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scale_invariant() {
        let mut a = vec![0.3, 2.0, 5.0, 0.01, 1.0];
        let mut b: Vec<f64> = a.iter().map(|v| v * 2.0).collect();
        clip_and_normalize(&mut a, WEIGHT_MIN, WEIGHT_MAX);
        clip_and_normalize(&mut b, WEIGHT_MIN, WEIGHT_MAX);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn map_round_trip() {
        let t = SampleWeightTable::from_parts(
            vec![PredictionPoint { patient: 0, prefix: 1 }, PredictionPoint { patient: 12, prefix: 2 }],
            vec![0.5, 1.5],
        )
        .unwrap();
        let m = t.to_map();
        assert_eq!(m["(12,2)"], 1.5);
        assert_eq!(SampleWeightTable::from_map(&m).unwrap(), t);
        assert!(SampleWeightTable::from_parts(pts(2), vec![1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn normalized_weights_respect_bounds(raw in proptest::collection::vec(1e-6f64..1e6, 1..200)) {
            let mut v = raw.clone();
            clip_and_normalize(&mut v, WEIGHT_MIN, WEIGHT_MAX);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9, "mean {}", mean);
            prop_assert!(v.iter().all(|&x| (WEIGHT_MIN..=WEIGHT_MAX).contains(&x)));
            // order preserved
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if raw[i] < raw[j] {
                        prop_assert!(v[i] <= v[j]);
                    }
                }
            }
        }
    }
}
