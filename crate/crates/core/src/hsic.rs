//! Dimension-wise HSIC between a pair of embeddings.
//!
//! For one prediction point the `r` coordinates of `E_D` and `E_P` are the
//! kernel sample axis: `K_d[a][b] = exp(-(e_d[a] - e_d[b])^2 / sigma^2)` and
//! likewise `K_p`, so both kernel matrices are `r×r` and
//!
//! ```text
//! HSIC_local = Tr(K_d J K_p J) / (r - 1)^2,   J = I - (1/r) 11^T
//! ```
//!
//! The weighted form scales both vectors by the sample weight before the
//! kernel. Bandwidths are always derived from the unweighted vectors, so the
//! weight moves the points relative to a fixed kernel scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPolicy {
    Fixed(f64),
    MedianHeuristic,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        SigmaPolicy::MedianHeuristic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsicConfig {
    pub sigma: SigmaPolicy,
    pub r: usize,
}

impl HsicConfig {
    pub fn new(sigma: SigmaPolicy, r: usize) -> Result<Self> {
        let cfg = Self { sigma, r };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 2 {
            return Err(Error::InvalidConfig(format!("HSIC needs r >= 2, got {}", self.r)));
        }
        if let SigmaPolicy::Fixed(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("fixed sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Bandwidth for the (unweighted) vector `v`.
    pub fn sigma_for(&self, v: &[f64]) -> f64 {
        match self.sigma {
            SigmaPolicy::Fixed(s) => s,
            SigmaPolicy::MedianHeuristic => median_sigma(v),
        }
    }
}

/// `sigma` such that `sigma^2` is the median pairwise squared distance between
/// coordinates of `v`; 1 when that median is zero.
pub fn median_sigma(v: &[f64]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(v.len() * v.len().saturating_sub(1) / 2);
    for a in 0..v.len() {
        for b in (a + 1)..v.len() {
            let diff = v[a] - v[b];
            d.push(diff * diff);
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let k = d.len();
    let median = if k % 2 == 1 { d[k / 2] } else { 0.5 * (d[k / 2 - 1] + d[k / 2]) };
    if median > 0.0 {
        median.sqrt()
    } else {
        1.0
    }
}

pub fn rbf_kernel_matrix(v: &[f64], sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("RBF bandwidth must be positive, got {sigma}")));
    }
    let r = v.len();
    let inv = 1.0 / (sigma * sigma);
    let mut data = vec![1.0; r * r];
    for a in 0..r {
        for b in (a + 1)..r {
            let diff = v[a] - v[b];
            let k = (-diff * diff * inv).exp();
            data[a * r + b] = k;
            data[b * r + a] = k;
        }
    }
    Ok(Tensor::matrix(r, r, data)?)
}

/// `I - (1/r)·ones`.
pub fn centering_matrix(r: usize) -> Result<Tensor> {
    if r < 2 {
        return Err(Error::InvalidConfig(format!("centering matrix needs r >= 2, got {r}")));
    }
    let off = -1.0 / r as f64;
    let mut data = vec![off; r * r];
    for i in 0..r {
        data[i * r + i] += 1.0;
    }
    Ok(Tensor::matrix(r, r, data)?)
}

/// Double-centres `k` in place: `J K J`.
fn double_center(k: &mut [f64], r: usize) {
    let mut row_mean = vec![0.0; r];
    let mut total = 0.0;
    for a in 0..r {
        let s: f64 = k[a * r..(a + 1) * r].iter().sum();
        row_mean[a] = s / r as f64;
        total += s;
    }
    let grand = total / (r * r) as f64;
    // K is symmetric, so column means equal row means.
    for a in 0..r {
        for b in 0..r {
            k[a * r + b] += grand - row_mean[a] - row_mean[b];
        }
    }
}

/// `HSIC_local` for explicit bandwidths. `O(r^2)` via
/// `Tr(K_d J K_p J) = sum(JK_dJ ⊙ JK_pJ)`; centring both factors keeps
/// near-constant kernels from cancelling catastrophically.
pub fn hsic_local_with_sigma(e_d: &[f64], e_p: &[f64], sigma_d: f64, sigma_p: f64) -> Result<f64> {
    if e_d.len() != e_p.len() {
        return Err(Error::InvalidConfig(format!(
            "embedding lengths differ: {} vs {}",
            e_d.len(),
            e_p.len()
        )));
    }
    let r = e_d.len();
    if r < 2 {
        return Err(Error::InvalidConfig(format!("HSIC needs r >= 2, got {r}")));
    }
    let kd = rbf_kernel_matrix(e_d, sigma_d)?;
    let kp = rbf_kernel_matrix(e_p, sigma_p)?;
    let mut cd = kd.into_data();
    let mut cp = kp.into_data();
    double_center(&mut cd, r);
    double_center(&mut cp, r);
    let tr: f64 = cd.iter().zip(&cp).map(|(a, b)| a * b).sum();
    let denom = ((r - 1) * (r - 1)) as f64;
    Ok(tr / denom)
}

pub fn hsic_local(e_d: &[f64], e_p: &[f64], config: &HsicConfig) -> Result<f64> {
    config.validate()?;
    hsic_local_with_sigma(e_d, e_p, config.sigma_for(e_d), config.sigma_for(e_p))
}

/// `HSIC_local(w·e_d, w·e_p)` with bandwidths taken from the unweighted vectors.
pub fn hsic_local_weighted(e_d: &[f64], e_p: &[f64], weight: f64, config: &HsicConfig) -> Result<f64> {
    config.validate()?;
    let sd = config.sigma_for(e_d);
    let sp = config.sigma_for(e_p);
    let wd: Vec<f64> = e_d.iter().map(|x| x * weight).collect();
    let wp: Vec<f64> = e_p.iter().map(|x| x * weight).collect();
    hsic_local_with_sigma(&wd, &wp, sd, sp)
}

/// One embedding pair and its sample weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPair {
    pub e_d: Vec<f64>,
    pub e_p: Vec<f64>,
    pub weight: f64,
}

/// Mean of the weighted local HSIC over all pairs.
pub fn hsic_aggregate(pairs: &[WeightedPair], config: &HsicConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("hsic_aggregate needs at least one pair"));
    }
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        if !(p.weight > 0.0) {
            return Err(Error::InvalidConfig(format!("pair {i} has non-positive weight {}", p.weight)));
        }
        total += hsic_local_weighted(&p.e_d, &p.e_p, p.weight, config)?;
    }
    Ok(total / pairs.len() as f64)
}

/// In-graph `HSIC_local` for given bandwidths, built from the naive
/// `Tr(K_d J · K_p J)` products so it is differentiable in both inputs.
pub fn hsic_local_graph(g: &mut Graph, e_d: Var, e_p: Var, sigma_d: f64, sigma_p: f64) -> Result<Var> {
    let r = g.shape(e_d)[0];
    if g.shape(e_d) != g.shape(e_p) || r < 2 {
        return Err(Error::InvalidConfig(format!(
            "HSIC inputs must be equal-length vectors with r >= 2, got {:?} and {:?}",
            g.shape(e_d),
            g.shape(e_p)
        )));
    }
    let j = g.constant(centering_matrix(r)?);
    let kernel = |g: &mut Graph, v: Var, sigma: f64| -> Result<Var> {
        let d = g.pairwise_sq_dist(v)?;
        let s = g.scale(d, -1.0 / (sigma * sigma))?;
        Ok(g.exp(s)?)
    };
    let kd = kernel(g, e_d, sigma_d)?;
    let kp = kernel(g, e_p, sigma_p)?;
    let kdj = g.matmul(kd, j)?;
    let kpj = g.matmul(kp, j)?;
    let prod = g.matmul(kdj, kpj)?;
    let tr = g.trace(prod)?;
    Ok(g.scale(tr, 1.0 / ((r - 1) * (r - 1)) as f64)?)
}

/// Value and derivative of `HSIC_local(w·e_d, w·e_p)` with respect to `w`.
pub fn hsic_weight_gradient(e_d: &[f64], e_p: &[f64], weight: f64, config: &HsicConfig) -> Result<(f64, f64)> {
    config.validate()?;
    let sd = config.sigma_for(e_d);
    let sp = config.sigma_for(e_p);
    let mut g = Graph::new();
    let w = g.param(Tensor::scalar(weight));
    let d = g.constant(Tensor::vector(e_d.to_vec()));
    let p = g.constant(Tensor::vector(e_p.to_vec()));
    let wd = g.mul(w, d)?;
    let wp = g.mul(w, p)?;
    let h = hsic_local_graph(&mut g, wd, wp, sd, sp)?;
    let grads = g.backward(h)?;
    Ok((g.value(h).item(), grads.get(w).item()))
}
