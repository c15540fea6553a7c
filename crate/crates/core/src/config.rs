//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, keys are dotted
//! (`train.epsilon`, `gen.train_env.rho`). Unknown keys are rejected. The
//! snapshot written by [`RunConfig::to_text`] parses back to an equal config.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::ModelKind;
use crate::error::{Error, Result};
use crate::hsic::SigmaPolicy;
use crate::pw::PropensityConfig;
use crate::synth::GeneratorConfig;
use crate::trainer::{Method, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    /// 0.75/0.1/0.15 patient split of the training-environment cohort.
    Random,
    /// Training environment split 0.7/0.3 into train/val; test environment is the test set.
    Env,
}

impl FromStr for SplitProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitProtocol::Random),
            "env" => Ok(SplitProtocol::Env),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}` (expected random|env)"))),
        }
    }
}

impl Display for SplitProtocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitProtocol::Random => "random",
            SplitProtocol::Env => "env",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// CHE coefficients; the best by mean validation NDCG@10 is reported.
    pub epsilon: Vec<f64>,
    pub model_lr: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Base, Method::Pw, Method::Che],
            seeds: (0..5).collect(),
            epsilon: vec![0.1, 0.3, 1.0, 3.0, 10.0],
            model_lr: vec![1e-2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub pw: PropensityConfig,
    pub method: Method,
    pub model: ModelKind,
    pub split: SplitProtocol,
    pub split_seed: u64,
    pub ks: Vec<usize>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            pw: PropensityConfig::default(),
            method: Method::Che,
            model: ModelKind::Lstm,
            split: SplitProtocol::Env,
            split_seed: 0,
            ks: vec![10, 20],
            sweep: SweepConfig::default(),
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("{key}: cannot parse `{value}`: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if let Some((a, b)) = value.split_once("..") {
        // Integer ranges only: `0..5`.
        let lo: i64 = parse_one(key, a.trim())?;
        let hi: i64 = parse_one(key, b.trim())?;
        return (lo..hi).map(|i| parse_one(key, &i.to_string())).collect();
    }
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(format!("{key}: empty list"));
    }
    items.into_iter().map(|s| parse_one(key, s)).collect()
}

fn sigma_text(s: SigmaPolicy) -> String {
    match s {
        SigmaPolicy::MedianHeuristic => "median".into(),
        SigmaPolicy::Fixed(v) => v.to_string(),
    }
}

impl RunConfig {
    /// Every key with its current value, in snapshot order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.generator;
        let t = &self.train;
        let p = &self.pw;
        vec![
            ("gen.patients", g.patients.to_string()),
            ("gen.M", g.m.to_string()),
            ("gen.N", g.n.to_string()),
            ("gen.S", g.s.to_string()),
            ("gen.mean_visits", g.mean_visits.to_string()),
            ("gen.max_visits", g.max_visits.to_string()),
            ("gen.mean_codes", g.mean_codes.to_string()),
            ("gen.stickiness", g.stickiness.to_string()),
            ("gen.emission_purity", g.emission_purity.to_string()),
            ("gen.effect_scale", g.effect_scale.to_string()),
            ("gen.train_env.name", g.train_env.name.clone()),
            ("gen.train_env.rho", g.train_env.rho.to_string()),
            ("gen.test_env.name", g.test_env.name.clone()),
            ("gen.test_env.rho", g.test_env.rho.to_string()),
            ("gen.seed", g.seed.to_string()),
            ("train.epsilon", t.epsilon.to_string()),
            ("train.model_lr", t.model_lr.to_string()),
            ("train.weight_lr", t.weight_lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.r", t.r.to_string()),
            ("train.dropout", t.dropout.to_string()),
            ("train.seed", t.seed.to_string()),
            ("hsic.sigma", sigma_text(t.sigma)),
            ("pw.multiplier", p.multiplier.to_string()),
            ("pw.epochs", p.epochs.to_string()),
            ("pw.patience", p.patience.to_string()),
            ("pw.lr", p.lr.to_string()),
            ("pw.batch_size", p.batch_size.to_string()),
            ("pw.holdout", p.holdout.to_string()),
            ("pw.seed", p.seed.to_string()),
            ("run.method", self.method.to_string()),
            ("run.model", self.model.to_string()),
            ("run.split", self.split.to_string()),
            ("run.split_seed", self.split_seed.to_string()),
            ("run.ks", list(&self.ks)),
            ("sweep.methods", list(&self.sweep.methods)),
            ("sweep.seeds", list(&self.sweep.seeds)),
            ("sweep.epsilon", list(&self.sweep.epsilon)),
            ("sweep.model_lr", list(&self.sweep.model_lr)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    fn assign(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let g = &mut self.generator;
        let t = &mut self.train;
        let p = &mut self.pw;
        match key {
            "gen.patients" => g.patients = parse_one(key, value)?,
            "gen.M" => g.m = parse_one(key, value)?,
            "gen.N" => g.n = parse_one(key, value)?,
            "gen.S" => g.s = parse_one(key, value)?,
            "gen.mean_visits" => g.mean_visits = parse_one(key, value)?,
            "gen.max_visits" => g.max_visits = parse_one(key, value)?,
            "gen.mean_codes" => g.mean_codes = parse_one(key, value)?,
            "gen.stickiness" => g.stickiness = parse_one(key, value)?,
            "gen.emission_purity" => g.emission_purity = parse_one(key, value)?,
            "gen.effect_scale" => g.effect_scale = parse_one(key, value)?,
            "gen.train_env.name" => g.train_env.name = value.to_string(),
            "gen.train_env.rho" => g.train_env.rho = parse_one(key, value)?,
            "gen.test_env.name" => g.test_env.name = value.to_string(),
            "gen.test_env.rho" => g.test_env.rho = parse_one(key, value)?,
            "gen.seed" => g.seed = parse_one(key, value)?,
            "train.epsilon" => t.epsilon = parse_one(key, value)?,
            "train.model_lr" => t.model_lr = parse_one(key, value)?,
            "train.weight_lr" => t.weight_lr = parse_one(key, value)?,
            "train.batch_size" => t.batch_size = parse_one(key, value)?,
            "train.max_epochs" => t.max_epochs = parse_one(key, value)?,
            "train.patience" => t.patience = parse_one(key, value)?,
            "train.r" => t.r = parse_one(key, value)?,
            "train.dropout" => t.dropout = parse_one(key, value)?,
            "train.seed" => t.seed = parse_one(key, value)?,
            "hsic.sigma" => {
                t.sigma = if value == "median" { SigmaPolicy::MedianHeuristic } else { SigmaPolicy::Fixed(parse_one(key, value)?) }
            }
            "pw.multiplier" => p.multiplier = parse_one(key, value)?,
            "pw.epochs" => p.epochs = parse_one(key, value)?,
            "pw.patience" => p.patience = parse_one(key, value)?,
            "pw.lr" => p.lr = parse_one(key, value)?,
            "pw.batch_size" => p.batch_size = parse_one(key, value)?,
            "pw.holdout" => p.holdout = parse_one(key, value)?,
            "pw.seed" => p.seed = parse_one(key, value)?,
            "run.method" => self.method = parse_one(key, value)?,
            "run.model" => self.model = parse_one(key, value)?,
            "run.split" => self.split = parse_one(key, value)?,
            "run.split_seed" => self.split_seed = parse_one(key, value)?,
            "run.ks" => self.ks = parse_list(key, value)?,
            "sweep.methods" => self.sweep.methods = parse_list(key, value)?,
            "sweep.seeds" => self.sweep.seeds = parse_list(key, value)?,
            "sweep.epsilon" => self.sweep.epsilon = parse_list(key, value)?,
            "sweep.model_lr" => self.sweep.model_lr = parse_list(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies `(key, value)` pairs, collecting every failure into one error.
    pub fn apply<'a, I: IntoIterator<Item = (&'a str, &'a str)>>(&mut self, pairs: I) -> Result<()> {
        let errors: Vec<String> = pairs.into_iter().filter_map(|(k, v)| self.assign(k.trim(), v.trim()).err()).collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors.join("; ")))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply([(key, value)])
    }

    /// Parses `text` on top of the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        let mut errors = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k.trim(), v.trim())),
                None => errors.push(format!("line {}: expected `key = value`, got `{line}`", n + 1)),
            }
        }
        if let Err(Error::InvalidConfig(e)) = self.apply(pairs) {
            errors.push(e);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors.join("; ")))
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Snapshot text; one line per key.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks every section, reporting all failures together.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                errors.push(match e {
                    Error::InvalidConfig(s) => s,
                    other => other.to_string(),
                });
            }
        };
        push(self.generator.validate());
        push(self.train.validate());
        push(self.pw.validate());
        if self.ks.is_empty() || self.ks.contains(&0) {
            push(Err(Error::InvalidConfig(format!("run.ks must be positive cutoffs, got {:?}", self.ks))));
        }
        if self.sweep.methods.is_empty() || self.sweep.seeds.is_empty() {
            push(Err(Error::InvalidConfig("sweep.methods and sweep.seeds must be non-empty".into())));
        }
        if self.sweep.epsilon.iter().any(|e| !(*e >= 0.0)) || self.sweep.epsilon.is_empty() {
            push(Err(Error::InvalidConfig("sweep.epsilon must be a non-empty list of values >= 0".into())));
        }
        if self.sweep.model_lr.iter().any(|e| !(*e > 0.0)) || self.sweep.model_lr.is_empty() {
            push(Err(Error::InvalidConfig("sweep.model_lr must be a non-empty list of positive values".into())));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors.join("; ")))
        }
    }
}
