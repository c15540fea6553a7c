//! Per-visit gradient attributions of a predicted diagnosis logit to the
//! diagnosis and procedure streams.

use serde::{Deserialize, Serialize};

use crate::data::{PatientRecord, PredictionPoint};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitContribution {
    /// One-based visit index.
    pub visit: usize,
    pub dx: f64,
    pub px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub patient: String,
    pub prefix: usize,
    pub target: usize,
    pub visits: Vec<VisitContribution>,
}

impl AttributionReport {
    pub fn dx_mass(&self) -> f64 {
        self.visits.iter().map(|v| v.dx.abs()).sum()
    }

    pub fn px_mass(&self) -> f64 {
        self.visits.iter().map(|v| v.px.abs()).sum()
    }

    /// Rows `visit,dx,px`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("visit,dx,px\n");
        for v in &self.visits {
            s.push_str(&format!("{},{},{}\n", v.visit, v.dx, v.px));
        }
        s
    }
}

fn contributions(g: &Graph, grads: &crate::tensor::Gradients, visits: &[Var]) -> Vec<f64> {
    visits
        .iter()
        .map(|&v| g.value(v).data().iter().zip(grads.get(v).data()).map(|(e, d)| e * d).sum())
        .collect()
}

/// Inner product of `d logit_target / d e_{j'}` with `e_{j'}` for every visit
/// embedding `e_{j'}`, `j' <= prefix`, of both streams.
pub fn feature_contribution(model: &Model, record: &PatientRecord, prefix: usize, target: usize) -> Result<AttributionReport> {
    if target >= model.dims.m {
        return Err(Error::InvalidConfig(format!("target code {target} outside 0..{}", model.dims.m)));
    }
    if prefix == 0 || prefix >= record.len() {
        return Err(Error::InvalidRecord(format!(
            "prefix length {prefix} outside 1..{} for patient {}",
            record.len(),
            record.id
        )));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let fw = model.forward(&mut g, &bound, record, prefix, None)?;
    let logit = g.slice(fw.logits, target, 1)?;
    let grads = g.backward(logit)?;
    let dx = contributions(&g, &grads, &fw.dx_visits);
    let px = contributions(&g, &grads, &fw.px_visits);
    let visits = dx
        .into_iter()
        .zip(px)
        .enumerate()
        .map(|(k, (dx, px))| VisitContribution { visit: k + 1, dx, px })
        .collect::<Vec<_>>();
    if visits.iter().any(|v| !(v.dx.is_finite() && v.px.is_finite())) {
        return Err(Error::InvalidRecord(format!("non-finite attribution for patient {}", record.id)));
    }
    Ok(AttributionReport { patient: record.id.clone(), prefix, target, visits })
}

/// The top-ranked true next-visit code, or the first true code if none is
/// ranked above the rest.
fn default_target(model: &Model, record: &PatientRecord, prefix: usize) -> Result<usize> {
    let logits = model.logits_point(record, prefix)?;
    let truth = &record.visits[prefix].dx;
    Ok(*truth
        .iter()
        .max_by(|&&a, &&b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .expect("validated records have non-empty visits"))
}

/// Reports for every prediction point, each targeting its highest-scored true code.
pub fn attribute_split(model: &Model, records: &[PatientRecord]) -> Result<Vec<AttributionReport>> {
    let mut out = Vec::new();
    for r in records {
        for prefix in 1..r.len() {
            let target = default_target(model, r, prefix)?;
            out.push(feature_contribution(model, r, prefix, target)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    /// Mean over points of `sum |dx| / sum (|dx| + |px|)`.
    pub dx_share: f64,
    pub points: usize,
    /// Points with zero total mass, left out of the mean.
    pub skipped: usize,
}

pub fn summarize(reports: &[AttributionReport]) -> AttributionSummary {
    let mut total = 0.0;
    let mut used = 0;
    for r in reports {
        let (d, p) = (r.dx_mass(), r.px_mass());
        if d + p > 0.0 {
            total += d / (d + p);
            used += 1;
        }
    }
    AttributionSummary {
        dx_share: if used > 0 { total / used as f64 } else { f64::NAN },
        points: used,
        skipped: reports.len() - used,
    }
}

/// Diagnosis-stream share of attribution mass over `records`.
pub fn attribution_summary(model: &Model, records: &[PatientRecord]) -> Result<AttributionSummary> {
    Ok(summarize(&attribute_split(model, records)?))
}

/// Attribution for selected points only.
pub fn attribute_points(model: &Model, records: &[PatientRecord], points: &[PredictionPoint]) -> Result<Vec<AttributionReport>> {
    points
        .iter()
        .map(|p| {
            let r = records.get(p.patient).ok_or_else(|| Error::InvalidRecord(format!("no patient {}", p.patient)))?;
            let target = default_target(model, r, p.prefix)?;
            feature_contribution(model, r, p.prefix, target)
        })
        .collect()
}
