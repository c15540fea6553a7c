//! Alternating optimisation: a weighted cross-entropy pass over the encoder and
//! predictor with the sample weights frozen, then an HSIC pass over the sample
//! weights with the model frozen, with early stopping on validation NDCG@10.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{multi_hot, prediction_points, PatientRecord, PredictionPoint};
use crate::encoders::{Dropout, Model};
use crate::error::{Error, Result};
use crate::hsic::{hsic_local_weighted, hsic_weight_gradient, HsicConfig, SigmaPolicy};
use crate::metrics::evaluate;
use crate::synth::splitmix64;
use crate::tensor::{Adam, Graph, TensorError};
use crate::weights::SampleWeightTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    Pw,
    Che,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Pw => "pw",
            Method::Che => "che",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Method::Base),
            "pw" => Ok(Method::Pw),
            "che" => Ok(Method::Che),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}` (expected base|pw|che)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// HSIC coefficient on the weight objective.
    pub epsilon: f64,
    pub model_lr: f64,
    pub weight_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub r: usize,
    pub dropout: f64,
    pub sigma: SigmaPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            model_lr: 1e-2,
            weight_lr: 10.0,
            batch_size: 32,
            max_epochs: 60,
            patience: 20,
            r: 16,
            dropout: 0.1,
            sigma: SigmaPolicy::MedianHeuristic,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            errors.push(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        for (name, v) in [("model_lr", self.model_lr), ("weight_lr", self.weight_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("{name} must be positive, got {v}"));
            }
        }
        if self.batch_size == 0 {
            errors.push("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            errors.push("max_epochs must be positive".into());
        }
        if self.patience == 0 {
            errors.push("patience must be at least 1".into());
        }
        if self.r < 2 {
            errors.push(format!("r must be at least 2, got {}", self.r));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let SigmaPolicy::Fixed(s) = self.sigma {
            if !(s > 0.0) {
                errors.push(format!("fixed sigma must be positive, got {s}"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors.join("; ")))
        }
    }

    pub fn hsic(&self) -> HsicConfig {
        HsicConfig { sigma: self.sigma, r: self.r }
    }

    pub fn model_seed(&self) -> u64 {
        splitmix64(self.seed ^ 0x1417)
    }

    fn data_seed(&self) -> u64 {
        splitmix64(self.seed ^ 0xDA7A)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_weighted_loss: f64,
    pub mean_hsic: f64,
    pub val_ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epochs: usize,
    /// Epoch whose parameters were returned (0 if no epoch improved on -inf,
    /// which cannot happen for a finite metric).
    pub best_epoch: usize,
    pub best_validation: f64,
    /// Mean weighted HSIC of the initial model under the initial weights.
    pub hsic_initial: f64,
    pub curve: Vec<EpochRecord>,
}

impl TrainState {
    pub fn hsic_at_best(&self) -> f64 {
        self.curve[self.best_epoch - 1].mean_hsic
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,mean_weighted_loss,mean_hsic,val_ndcg10\n");
        for r in &self.curve {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.mean_weighted_loss, r.mean_hsic, r.val_ndcg10));
        }
        out
    }
}

/// How sample weights evolve during [`fit`].
#[derive(Debug, Clone)]
pub enum WeightMode {
    /// All ones, never updated.
    Uniform,
    /// Precomputed weights, never updated (permutation weighting).
    Fixed(SampleWeightTable),
    /// Updated after every loss epoch by the HSIC objective.
    Hsic,
}

fn logit_range(g: &Graph, logits: crate::tensor::Var) -> (f64, f64) {
    let v = g.value(logits).data();
    (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// One shuffled pass of minibatch updates on `sum(w * L) / |batch|`. Weights are read only.
pub fn weighted_loss_epoch(
    model: &mut Model,
    optimizer: &mut Adam,
    train: &[PatientRecord],
    weights: &SampleWeightTable,
    batch_size: usize,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Empty("training prediction points"));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.shuffle(rng);
    let m = model.dims.m;
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let mut terms = Vec::with_capacity(batch.len());
        for &idx in batch {
            let point = weights.points()[idx];
            let w = weights.values()[idx];
            let record = &train[point.patient];
            let mut drop = Dropout { rate: dropout, rng: &mut *rng };
            let fw = model
                .forward(&mut g, &bound, record, point.prefix, Some(&mut drop))
                .map_err(|e| non_finite(e, point, None))?;
            let target = multi_hot(&record.visits[point.prefix].dx, m);
            let loss = g
                .bce_with_logits(fw.logits, &target)
                .map_err(|e| non_finite(e.into(), point, Some(logit_range(&g, fw.logits))))?;
            total += w * g.value(loss).item();
            terms.push(if w == 1.0 { loss } else { g.scale(loss, w)? });
        }
        let stacked = g.concat(&terms)?;
        let sum = g.sum(stacked)?;
        let root = g.scale(sum, 1.0 / batch.len() as f64)?;
        let grads = g.backward(root)?;
        optimizer.step(&mut model.params, &bound.gradients(&grads))?;
    }
    Ok(total / weights.len() as f64)
}

fn non_finite(e: Error, point: PredictionPoint, range: Option<(f64, f64)>) -> Error {
    match e {
        Error::Tensor(TensorError::NumericOverflow { .. }) => {
            let (logit_min, logit_max) = range.unwrap_or((f64::NAN, f64::NAN));
            Error::NonFiniteLoss { patient: point.patient, prefix: point.prefix, logit_min, logit_max }
        }
        other => other,
    }
}

/// Stream embeddings of every weighted point under a frozen model.
pub fn embed_points(model: &Model, train: &[PatientRecord], points: &[PredictionPoint]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    points.iter().map(|p| model.embed_point(&train[p.patient], p.prefix)).collect()
}

pub fn mean_weighted_hsic(
    embeddings: &[(Vec<f64>, Vec<f64>)],
    weights: &[f64],
    config: &HsicConfig,
) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::Empty("hsic over no points"));
    }
    let mut total = 0.0;
    for ((d, p), &w) in embeddings.iter().zip(weights) {
        total += hsic_local_weighted(d, p, w, config)?;
    }
    Ok(total / embeddings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightUpdate {
    /// Mean weighted HSIC before the step.
    pub hsic_before: f64,
    /// Mean weighted HSIC after step, clipping and renormalisation.
    pub hsic_after: f64,
    pub skipped: usize,
}

/// One gradient step on `epsilon * HSIC_local(w e_d, w e_p)` per point with
/// respect to that point's weight only, then clip and renormalise.
pub fn weight_update_epoch(
    model: &Model,
    train: &[PatientRecord],
    weights: &mut SampleWeightTable,
    epsilon: f64,
    weight_lr: f64,
    hsic: &HsicConfig,
) -> Result<WeightUpdate> {
    let embeddings = embed_points(model, train, weights.points())?;
    weight_step(&embeddings, weights, epsilon, weight_lr, hsic)
}

/// [`weight_update_epoch`] on precomputed embeddings.
pub fn weight_step(
    embeddings: &[(Vec<f64>, Vec<f64>)],
    weights: &mut SampleWeightTable,
    epsilon: f64,
    weight_lr: f64,
    hsic: &HsicConfig,
) -> Result<WeightUpdate> {
    let mut values = weights.values().to_vec();
    let mut before = 0.0;
    let mut skipped = 0;
    for (i, (d, p)) in embeddings.iter().enumerate() {
        let (h, grad) = hsic_weight_gradient(d, p, values[i], hsic)?;
        before += h;
        if !grad.is_finite() {
            warn!("non-finite HSIC gradient at {:?}; weight left unchanged", weights.points()[i]);
            skipped += 1;
            continue;
        }
        if epsilon != 0.0 {
            values[i] -= weight_lr * epsilon * grad;
        }
    }
    weights.set_values(values);
    weights.normalize();
    let after = mean_weighted_hsic(embeddings, weights.values(), hsic)?;
    Ok(WeightUpdate { hsic_before: before / embeddings.len() as f64, hsic_after: after, skipped })
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    pub state: TrainState,
    pub weights: SampleWeightTable,
}

/// Trains `model` on `train`, selecting the epoch with the best validation NDCG@10.
pub fn fit(
    mut model: Model,
    train: &[PatientRecord],
    val: &[PatientRecord],
    config: &TrainConfig,
    mode: WeightMode,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty"));
    }
    let points = prediction_points(train);
    let mut weights = match mode {
        WeightMode::Fixed(ref t) => {
            if t.points() != points.as_slice() {
                return Err(Error::InvalidConfig("fixed weight table does not cover the training split".into()));
            }
            t.clone()
        }
        _ => SampleWeightTable::ones(points),
    };
    let hsic = config.hsic();
    let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed());
    let mut optimizer = Adam::new(config.model_lr);

    let hsic_initial = mean_weighted_hsic(&embed_points(&model, train, weights.points())?, weights.values(), &hsic)?;
    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    let mut curve = Vec::new();
    for epoch in 1..=config.max_epochs {
        let loss = weighted_loss_epoch(&mut model, &mut optimizer, train, &weights, config.batch_size, config.dropout, &mut rng)?;
        let embeddings = embed_points(&model, train, weights.points())?;
        let mean_hsic = match mode {
            WeightMode::Hsic => weight_step(&embeddings, &mut weights, config.epsilon, config.weight_lr, &hsic)?.hsic_after,
            _ => mean_weighted_hsic(&embeddings, weights.values(), &hsic)?,
        };
        let val_ndcg10 = evaluate(&model, val, &[10])?.ndcg[0];
        debug!("epoch {epoch}: loss {loss:.5} hsic {mean_hsic:.3e} val NDCG@10 {val_ndcg10:.4}");
        curve.push(EpochRecord { epoch, mean_weighted_loss: loss, mean_hsic, val_ndcg10 });
        if val_ndcg10 > best.0 {
            best = (val_ndcg10, epoch, model.clone());
        }
        if epoch - best.1 >= config.patience {
            break;
        }
    }
    let (best_validation, best_epoch, best_model) = best;
    Ok(FitResult {
        model: best_model,
        state: TrainState { epochs: curve.len(), best_epoch, best_validation, hsic_initial, curve },
        weights,
    })
}
