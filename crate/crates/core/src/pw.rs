//! Permutation weighting: a discriminator separates observed `(D, P)` prefixes
//! from prefixes whose procedure stream was taken from another patient, and its
//! odds reweight the training points toward the product of the two marginals.

use std::collections::{BTreeMap, HashMap, HashSet};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{prediction_points, PatientRecord, PredictionPoint, Visit};
use crate::encoders::{Model, Stream};
use crate::error::{Error, Result};
use crate::synth::splitmix64;
use crate::tensor::{sigmoid, Adam, Graph, Tensor};
use crate::trainer::{fit, FitResult, TrainConfig, WeightMode};
use crate::weights::SampleWeightTable;

pub const DEFAULT_MULTIPLIER: usize = 10;
const MAX_RESAMPLES: usize = 20;

/// A constructed prefix: the diagnosis visits of `dx`, and the procedure visits
/// of `px` taken in `px_order`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub dx: PredictionPoint,
    pub px: PredictionPoint,
    pub px_order: Vec<usize>,
    /// Equal to an observed pair after all resampling attempts.
    pub collision: bool,
    /// Built by reordering the point's own procedure visits because no other
    /// prefix of the same length exists.
    pub fallback: bool,
}

impl NegativeSample {
    pub fn materialize(&self, records: &[PatientRecord]) -> PatientRecord {
        let d = &records[self.dx.patient];
        let p = &records[self.px.patient];
        let visits = (0..self.dx.prefix)
            .map(|k| Visit { dx: d.visits[k].dx.clone(), px: p.visits[self.px_order[k]].px.clone() })
            .collect();
        PatientRecord { id: format!("neg:{}:{}", d.id, p.id), env: d.env.clone(), visits }
    }
}

type PairKey = (Vec<Vec<usize>>, Vec<Vec<usize>>);

fn observed_key(r: &PatientRecord, prefix: usize) -> PairKey {
    let v = &r.visits[..prefix];
    (v.iter().map(|x| x.dx.clone()).collect(), v.iter().map(|x| x.px.clone()).collect())
}

fn candidate_key(records: &[PatientRecord], dx: PredictionPoint, px: PredictionPoint, order: &[usize]) -> PairKey {
    let d = &records[dx.patient].visits;
    let p = &records[px.patient].visits;
    (
        (0..dx.prefix).map(|k| d[k].dx.clone()).collect(),
        order.iter().map(|&k| p[k].px.clone()).collect(),
    )
}

/// `multiplier` negatives per training prediction point, in point order.
pub fn generate_negatives(records: &[PatientRecord], multiplier: usize, seed: u64) -> Result<Vec<NegativeSample>> {
    let points = prediction_points(records);
    if points.is_empty() {
        return Err(Error::Empty("no prediction points to permute"));
    }
    let observed: HashSet<PairKey> = points.iter().map(|p| observed_key(&records[p.patient], p.prefix)).collect();
    let mut by_len: BTreeMap<usize, Vec<PredictionPoint>> = BTreeMap::new();
    for p in &points {
        by_len.entry(p.prefix).or_default().push(*p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x9E6A));
    let mut out = Vec::with_capacity(points.len() * multiplier);
    let mut fallbacks = 0usize;
    for &pos in &points {
        let peers = &by_len[&pos.prefix];
        let identity: Vec<usize> = (0..pos.prefix).collect();
        for _ in 0..multiplier {
            let mut attempt = 0;
            loop {
                let (px, order, fallback) = if peers.len() > 1 {
                    let mut other = pos;
                    while other == pos {
                        other = peers[rng.gen_range(0..peers.len())];
                    }
                    (other, identity.clone(), false)
                } else {
                    let mut order = identity.clone();
                    order.shuffle(&mut rng);
                    (pos, order, true)
                };
                attempt += 1;
                let collision = observed.contains(&candidate_key(records, pos, px, &order));
                if !collision || attempt > MAX_RESAMPLES {
                    fallbacks += fallback as usize;
                    out.push(NegativeSample { dx: pos, px, px_order: order, collision, fallback });
                    break;
                }
            }
        }
    }
    if fallbacks > 0 {
        info!("{fallbacks} negatives built by within-record procedure reordering (no equal-length peer)");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    pub multiplier: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self { multiplier: DEFAULT_MULTIPLIER, epochs: 30, patience: 8, lr: 3e-2, batch_size: 64, holdout: 0.1, seed: 0 }
    }
}

impl PropensityConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.epochs == 0 {
            errors.push("pw.epochs must be positive".to_string());
        }
        if self.patience == 0 {
            errors.push("pw.patience must be positive".to_string());
        }
        if !(self.lr > 0.0) {
            errors.push(format!("pw.lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errors.push("pw.batch_size must be positive".to_string());
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            errors.push(format!("pw.holdout must lie in (0, 1), got {}", self.holdout));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors.join("; ")))
        }
    }
}

/// Base encoder plus a logistic head on `[E_D, E_P, E_D ⊙ E_P]`, scoring
/// P(observed). A head linear in `[E_D, E_P]` alone gives a logit additive in
/// the two streams, which cannot tell a joint from the product of its
/// marginals; the elementwise product supplies the interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityClassifier {
    pub encoder: Model,
    pub head: BTreeMap<String, Tensor>,
    pub holdout_auc: f64,
}

impl PropensityClassifier {
    pub fn new(encoder: Model, seed: u64) -> Self {
        let r = encoder.dims.r;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / ((3 * r) as f64).sqrt();
        let w = (0..3 * r).map(|_| rng.gen_range(-bound..bound)).collect();
        let mut head = BTreeMap::new();
        head.insert("head.weight".to_string(), Tensor::vector(w));
        head.insert("head.bias".to_string(), Tensor::vector(vec![0.0]));
        Self { encoder, head, holdout_auc: f64::NAN }
    }

    fn logit(
        &self,
        g: &mut Graph,
        enc: &crate::encoders::Bound,
        head: &BTreeMap<String, crate::tensor::Var>,
        record: &PatientRecord,
        prefix: usize,
    ) -> Result<crate::tensor::Var> {
        let d = self.encoder.encode_stream(g, enc, record, prefix, Stream::Dx)?;
        let p = self.encoder.encode_stream(g, enc, record, prefix, Stream::Px)?;
        let inter = g.mul(d.output, p.output)?;
        let joint = g.concat(&[d.output, p.output, inter])?;
        let prod = g.mul(joint, head["head.weight"])?;
        let s = g.sum(prod)?;
        Ok(g.add(s, head["head.bias"])?)
    }

    /// P(observed) for the prefix `1..=prefix` of `record`.
    pub fn probability(&self, record: &PatientRecord, prefix: usize) -> Result<f64> {
        let mut g = Graph::new();
        let enc = self.encoder.bind_frozen(&mut g);
        let head: BTreeMap<_, _> = self.head.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect();
        let z = self.logit(&mut g, &enc, &head, record, prefix)?;
        Ok(sigmoid(g.value(z).item()))
    }
}

struct Example {
    record: PatientRecord,
    prefix: usize,
    label: f64,
}

/// Mann-Whitney AUC with tied scores counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return f64::NAN;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

fn mean_bce(clf: &PropensityClassifier, set: &[&Example]) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(set.len());
    for ex in set {
        let p = clf.probability(&ex.record, ex.prefix)?.clamp(1e-12, 1.0 - 1e-12);
        loss -= ex.label * p.ln() + (1.0 - ex.label) * (1.0 - p).ln();
        probs.push(p);
    }
    Ok((loss / set.len() as f64, probs))
}

/// Trains the discriminator on observed prefixes (label 1) and `negatives`
/// (label 0), early-stopping on the held-out log loss.
pub fn fit_propensity(
    init: Model,
    records: &[PatientRecord],
    negatives: &[NegativeSample],
    config: &PropensityConfig,
) -> Result<PropensityClassifier> {
    config.validate()?;
    let positives = prediction_points(records);
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("propensity training needs positives and negatives"));
    }
    let mut pool: Vec<Example> = positives
        .iter()
        .map(|p| Example { record: records[p.patient].clone(), prefix: p.prefix, label: 1.0 })
        .chain(negatives.iter().map(|n| Example { record: n.materialize(records), prefix: n.dx.prefix, label: 0.0 }))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x960E));
    pool.shuffle(&mut rng);
    let n_hold = ((pool.len() as f64 * config.holdout).round() as usize).clamp(1, pool.len() - 1);
    let (hold, train) = pool.split_at(n_hold);
    let hold: Vec<&Example> = hold.iter().collect();

    let mut clf = PropensityClassifier::new(init, splitmix64(config.seed ^ 0x4EAD));
    let mut enc_opt = Adam::new(config.lr);
    let mut head_opt = Adam::new(config.lr);
    let mut best = (mean_bce(&clf, &hold)?.0, clf.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let enc = clf.encoder.bind(&mut g);
            let head: BTreeMap<_, _> = clf.head.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &train[i];
                let z = clf.logit(&mut g, &enc, &head, &ex.record, ex.prefix)?;
                terms.push(g.bce_with_logits(z, &[ex.label])?);
            }
            let stacked = g.concat(&terms)?;
            let loss = g.mean(stacked)?;
            let grads = g.backward(loss)?;
            enc_opt.step(&mut clf.encoder.params, &enc.gradients(&grads))?;
            let head_grads = head.iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect();
            head_opt.step(&mut clf.head, &head_grads)?;
        }
        let (loss, _) = mean_bce(&clf, &hold)?;
        info!("propensity epoch {epoch}: holdout log loss {loss:.5}");
        if loss < best.0 {
            best = (loss, clf.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let mut clf = best.1;
    let (_, probs) = mean_bce(&clf, &hold)?;
    let labels: Vec<bool> = hold.iter().map(|e| e.label == 1.0).collect();
    clf.holdout_auc = auc(&probs, &labels);
    if !(clf.holdout_auc >= 0.5) {
        warn!("propensity holdout AUC {:.4} is below 0.5; weights will be close to uniform", clf.holdout_auc);
    }
    Ok(clf)
}

/// Importance weights `(1 - p) / p` for `p = P(observed)`, clipped and
/// normalised to mean one.
pub fn pw_weights(clf: &PropensityClassifier, records: &[PatientRecord]) -> Result<SampleWeightTable> {
    let points = prediction_points(records);
    let raw = points
        .iter()
        .map(|p| {
            let prob = clf.probability(&records[p.patient], p.prefix)?.clamp(1e-12, 1.0 - 1e-12);
            Ok((1.0 - prob) / prob)
        })
        .collect::<Result<Vec<_>>>()?;
    weights_from_odds(points, raw)
}

pub fn weights_from_odds(points: Vec<PredictionPoint>, odds: Vec<f64>) -> Result<SampleWeightTable> {
    let mut t = SampleWeightTable::from_parts(points, odds)?;
    t.normalize();
    Ok(t)
}

#[derive(Debug, Clone)]
pub struct PwResult {
    pub fit: FitResult,
    pub holdout_auc: f64,
    pub negatives: usize,
    pub collisions: usize,
    pub fallbacks: usize,
}

/// Fits the discriminator on `train`, then trains `model` with the fixed weights.
pub fn fit_pw(
    model: Model,
    train: &[PatientRecord],
    val: &[PatientRecord],
    config: &TrainConfig,
    pw: &PropensityConfig,
) -> Result<PwResult> {
    config.validate()?;
    pw.validate()?;
    let negatives = generate_negatives(train, pw.multiplier, pw.seed)?;
    let clf = fit_propensity(model.clone(), train, &negatives, pw)?;
    let weights = pw_weights(&clf, train)?;
    let fit = fit(model, train, val, config, WeightMode::Fixed(weights))?;
    Ok(PwResult {
        fit,
        holdout_auc: clf.holdout_auc,
        negatives: negatives.len(),
        collisions: negatives.iter().filter(|n| n.collision).count(),
        fallbacks: negatives.iter().filter(|n| n.fallback).count(),
    })
}

/// Negative counts per prefix length; used for audit dumps.
pub fn length_histogram(negatives: &[NegativeSample]) -> HashMap<usize, usize> {
    let mut h = HashMap::new();
    for n in negatives {
        *h.entry(n.dx.prefix).or_insert(0) += 1;
    }
    h
}
