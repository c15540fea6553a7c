//! Patient records, vocabularies and prediction points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes of the diagnosis (`m`) and procedure (`n`) code vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeVocab {
    pub m: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub px_labels: Option<Vec<String>>,
}

impl CodeVocab {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidConfig(format!("vocabulary sizes must be positive (M={m}, N={n})")));
        }
        Ok(Self { m, n, dx_labels: None, px_labels: None })
    }
}

/// One admission: sorted, de-duplicated diagnosis and procedure code sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub dx: Vec<usize>,
    pub px: Vec<usize>,
}

impl Visit {
    pub fn new(mut dx: Vec<usize>, mut px: Vec<usize>) -> Self {
        dx.sort_unstable();
        dx.dedup();
        px.sort_unstable();
        px.dedup();
        Self { dx, px }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub env: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    /// Number of visits `t`.
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    /// Number of prediction points, `t - 1`.
    pub fn prediction_points(&self) -> usize {
        self.visits.len().saturating_sub(1)
    }

    pub fn validate(&self, vocab: &CodeVocab) -> Result<()> {
        if self.visits.len() < 3 {
            return Err(Error::InvalidRecord(format!(
                "patient {} has {} visits, at least 3 are required",
                self.id,
                self.visits.len()
            )));
        }
        for (j, v) in self.visits.iter().enumerate() {
            if v.dx.is_empty() || v.px.is_empty() {
                return Err(Error::InvalidRecord(format!("patient {} visit {} has an empty code set", self.id, j + 1)));
            }
            if let Some(&c) = v.dx.iter().find(|&&c| c >= vocab.m) {
                return Err(Error::InvalidRecord(format!(
                    "patient {} visit {}: diagnosis code {c} outside vocabulary of size {}",
                    self.id,
                    j + 1,
                    vocab.m
                )));
            }
            if let Some(&c) = v.px.iter().find(|&&c| c >= vocab.n) {
                return Err(Error::InvalidRecord(format!(
                    "patient {} visit {}: procedure code {c} outside vocabulary of size {}",
                    self.id,
                    j + 1,
                    vocab.n
                )));
            }
        }
        Ok(())
    }
}

/// A (patient, prefix length) pair: inputs are visits `1..=prefix`, the target
/// is the diagnosis set of visit `prefix + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PredictionPoint {
    pub patient: usize,
    pub prefix: usize,
}

/// Every prediction point of `records`, patient-major, prefix ascending.
pub fn prediction_points(records: &[PatientRecord]) -> Vec<PredictionPoint> {
    records
        .iter()
        .enumerate()
        .flat_map(|(patient, r)| (1..r.len()).map(move |prefix| PredictionPoint { patient, prefix }))
        .collect()
}

/// Multi-hot encoding of a code set.
pub fn multi_hot(codes: &[usize], size: usize) -> Vec<f64> {
    let mut v = vec![0.0; size];
    for &c in codes {
        v[c] = 1.0;
    }
    v
}
