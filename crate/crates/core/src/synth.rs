//! Synthetic EHR cohorts with a known causal structure.
//!
//! A latent health state walks a sticky Markov chain. Each visit emits
//! diagnosis codes from the current state. Procedures follow the canonical
//! policy of each diagnosis with probability `rho` (the environment's
//! confounding strength) and are uniform otherwise. Administered procedures
//! shift the log-odds of the next latent state by their treatment effects,
//! which are all zero in the spurious-only benchmark.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{CodeVocab, PatientRecord, Visit};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// splitmix64 finaliser, used to derive independent per-stream seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub name: String,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub patients: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "S")]
    pub s: usize,
    /// Mean visits per patient; every patient has at least 3.
    pub mean_visits: f64,
    pub max_visits: usize,
    /// Mean diagnosis codes per visit; at least 1.
    pub mean_codes: f64,
    /// Probability of staying in the current latent state.
    pub stickiness: f64,
    /// Share of emission mass on a state's own diagnosis codes.
    pub emission_purity: f64,
    /// Magnitude of the procedure → next-state log-odds effects. Zero gives
    /// the spurious-only benchmark.
    pub effect_scale: f64,
    pub train_env: Environment,
    pub test_env: Environment,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            patients: 500,
            m: 100,
            n: 40,
            s: 12,
            mean_visits: 4.0,
            max_visits: 12,
            mean_codes: 5.0,
            stickiness: 0.6,
            emission_purity: 0.8,
            effect_scale: 0.0,
            train_env: Environment { name: "medicare".into(), rho: 0.95 },
            test_env: Environment { name: "private".into(), rho: 0.2 },
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patients == 0 || self.m == 0 || self.n == 0 || self.s == 0 {
            return bad(format!(
                "counts must be positive (patients={}, M={}, N={}, S={})",
                self.patients, self.m, self.n, self.s
            ));
        }
        if self.m < self.s {
            return bad(format!("M ({}) must be at least S ({})", self.m, self.s));
        }
        if self.n < self.s {
            return bad(format!("N ({}) must be at least S ({})", self.n, self.s));
        }
        if !(self.mean_visits >= 3.0) || self.max_visits < 3 {
            return bad(format!("visit counts must allow at least 3 visits (mean {})", self.mean_visits));
        }
        if !(self.mean_codes >= 1.0) {
            return bad(format!("mean codes per visit must be >= 1, got {}", self.mean_codes));
        }
        for (name, v) in [("stickiness", self.stickiness), ("emission_purity", self.emission_purity)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for env in [&self.train_env, &self.test_env] {
            if !(0.0..=1.0).contains(&env.rho) {
                return bad(format!("rho for `{}` must lie in [0, 1], got {}", env.name, env.rho));
            }
        }
        if !self.effect_scale.is_finite() {
            return bad("effect_scale must be finite".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> CodeVocab {
        CodeVocab { m: self.m, n: self.n, dx_labels: None, px_labels: None }
    }
}

/// Ground truth behind a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalSpec {
    pub states: usize,
    /// `S×S`, row-stochastic.
    pub transition: Vec<Vec<f64>>,
    /// `S×M`, row-stochastic.
    pub emission: Vec<Vec<f64>>,
    /// Home state of every diagnosis code.
    pub dx_state: Vec<usize>,
    /// Canonical procedure of every diagnosis code.
    pub policy: Vec<usize>,
    /// `N×S` additive log-odds shift of the next latent state per procedure.
    pub effects: Vec<Vec<f64>>,
    /// Confounding strength per environment name.
    pub rho: BTreeMap<String, f64>,
}

impl CausalSpec {
    pub fn build(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x5EED_CA05));
        let (m, n, s) = (config.m, config.n, config.s);

        let transition = (0..s)
            .map(|a| {
                let mut row: Vec<f64> = (0..s).map(|b| if a == b { 0.0 } else { rng.gen::<f64>() + 0.05 }).collect();
                let rest: f64 = row.iter().sum();
                for (b, v) in row.iter_mut().enumerate() {
                    *v = if a == b { config.stickiness } else { (1.0 - config.stickiness) * *v / rest };
                }
                if s == 1 {
                    row[0] = 1.0;
                }
                row
            })
            .collect();

        let mut codes: Vec<usize> = (0..m).collect();
        codes.shuffle(&mut rng);
        let mut dx_state = vec![0; m];
        for (i, &c) in codes.iter().enumerate() {
            dx_state[c] = i % s;
        }
        let emission = (0..s)
            .map(|st| {
                let home: Vec<usize> = (0..m).filter(|&c| dx_state[c] == st).collect();
                let raw: Vec<f64> = home.iter().map(|_| 0.5 + rng.gen::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                let mut row = vec![(1.0 - config.emission_purity) / m as f64; m];
                for (&c, w) in home.iter().zip(&raw) {
                    row[c] += config.emission_purity * w / total;
                }
                row
            })
            .collect();

        // Procedures are partitioned across states; a diagnosis' canonical
        // procedure is drawn from its home state's group.
        let mut pcodes: Vec<usize> = (0..n).collect();
        pcodes.shuffle(&mut rng);
        let mut groups = vec![Vec::new(); s];
        for (i, &p) in pcodes.iter().enumerate() {
            groups[i % s].push(p);
        }
        let policy = (0..m).map(|c| *groups[dx_state[c]].choose(&mut rng).expect("N >= S")).collect();

        let effects = (0..n)
            .map(|_| {
                let target = rng.gen_range(0..s);
                (0..s).map(|st| if st == target { config.effect_scale } else { 0.0 }).collect()
            })
            .collect();

        let rho = [&config.train_env, &config.test_env].iter().map(|e| (e.name.clone(), e.rho)).collect();
        Ok(Self { states: s, transition, emission, dx_state, policy, effects, rho })
    }

    fn next_state(&self, rng: &mut impl Rng, state: usize, px: &[usize]) -> usize {
        let row = &self.transition[state];
        let shifted: Vec<f64> = (0..self.states)
            .map(|b| {
                let shift: f64 = px.iter().map(|&q| self.effects[q][b]).sum();
                row[b] * shift.exp()
            })
            .collect();
        sample_index(rng, &shifted)
    }
}

fn sample_index(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Draws `k` distinct indices with probability proportional to `weights`.
fn sample_distinct(rng: &mut impl Rng, weights: &[f64], k: usize) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(w.iter().filter(|x| **x > 0.0).count()) {
        let i = sample_index(rng, &w);
        out.push(i);
        w[i] = 0.0;
    }
    out
}

/// A generated environment cohort with its hidden state paths.
#[derive(Debug, Clone)]
pub struct GeneratedCohort {
    pub records: Vec<PatientRecord>,
    pub latent: Vec<Vec<usize>>,
    pub spec: CausalSpec,
}

pub fn generate_cohort(config: &GeneratorConfig, environment: &Environment) -> Result<GeneratedCohort> {
    let spec = CausalSpec::build(config)?;
    if !(0.0..=1.0).contains(&environment.rho) {
        return Err(Error::InvalidConfig(format!("rho must lie in [0, 1], got {}", environment.rho)));
    }
    let visit_extra = Poisson::new(config.mean_visits - 3.0).ok();
    let code_extra = Poisson::new(config.mean_codes - 1.0).ok();
    let env_seed = splitmix64(config.seed ^ fnv1a(&environment.name));
    let mut records = Vec::with_capacity(config.patients);
    let mut latent = Vec::with_capacity(config.patients);
    for i in 0..config.patients {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(env_seed.wrapping_add(i as u64)));
        let extra = visit_extra.map_or(0, |p| p.sample(&mut rng) as usize);
        let t = (3 + extra).min(config.max_visits);
        let mut state = rng.gen_range(0..spec.states);
        let mut visits = Vec::with_capacity(t);
        let mut path = Vec::with_capacity(t);
        for _ in 0..t {
            path.push(state);
            let k = 1 + code_extra.map_or(0, |p| p.sample(&mut rng) as usize);
            let dx = sample_distinct(&mut rng, &spec.emission[state], k.min(config.m));
            let px: Vec<usize> = dx
                .iter()
                .map(|&c| if rng.gen::<f64>() < environment.rho { spec.policy[c] } else { rng.gen_range(0..config.n) })
                .collect();
            let visit = Visit::new(dx, px);
            state = spec.next_state(&mut rng, state, &visit.px);
            visits.push(visit);
        }
        records.push(PatientRecord { id: format!("{}-{i:05}", environment.name), env: environment.name.clone(), visits });
        latent.push(path);
    }
    Ok(GeneratedCohort { records, latent, spec })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<PatientRecord>,
    pub val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

fn shuffled(records: &[PatientRecord], seed: u64) -> Vec<PatientRecord> {
    let mut out = records.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5B11)));
    out
}

/// Patient-level 0.75 / 0.1 / 0.15 partition, floors for validation and test,
/// remainder to training.
pub fn split_random(cohort: &[PatientRecord], seed: u64) -> Result<Split> {
    if cohort.len() < 20 {
        return Err(Error::InvalidConfig(format!("random split needs >= 20 patients, got {}", cohort.len())));
    }
    let n = cohort.len();
    let n_val = n * 10 / 100;
    let n_test = n * 15 / 100;
    let mut all = shuffled(cohort, seed);
    let test = all.split_off(n - n_test);
    let val = all.split_off(n - n_test - n_val);
    Ok(Split { train: all, val, test })
}

/// Training environment split 0.7 / 0.3 into train / validation; the whole
/// test environment becomes the test set.
pub fn split_by_environment(train_env: &[PatientRecord], test_env: &[PatientRecord], seed: u64) -> Result<Split> {
    if train_env.is_empty() || test_env.is_empty() {
        return Err(Error::Empty("environment cohort"));
    }
    let n = train_env.len();
    let n_val = n * 30 / 100;
    let mut all = shuffled(train_env, seed);
    let val = all.split_off(n - n_val);
    Ok(Split { train: all, val, test: test_env.to_vec() })
}

/// Sidecar stored next to a cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMeta {
    pub format_version: u32,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub causal_spec: Option<CausalSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub meta: CohortMeta,
    pub records: Vec<PatientRecord>,
}

impl Cohort {
    pub fn vocab(&self) -> CodeVocab {
        CodeVocab { m: self.meta.m, n: self.meta.n, dx_labels: None, px_labels: None }
    }
}

/// `dir/name.jsonl` → `dir/name.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn save_cohort(path: &Path, cohort: &Cohort) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in &cohort.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = meta_path(path);
    std::fs::write(&meta, crate::checkpoint::to_canonical_json(&cohort.meta)?).map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let meta_file = meta_path(path);
    let meta_text = std::fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta: CohortMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Parse { path: meta_file.clone(), line: e.line(), message: e.to_string() })?;
    let vocab = CodeVocab::new(meta.m, meta.n)?;
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let normalized = PatientRecord {
            visits: rec.visits.iter().map(|v| Visit::new(v.dx.clone(), v.px.clone())).collect(),
            ..rec
        };
        normalized.validate(&vocab).map_err(|e| parse_err(e.to_string()))?;
        records.push(normalized);
    }
    Ok(Cohort { meta, records })
}
