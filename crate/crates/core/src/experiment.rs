//! Drivers shared by the command-line tool and the acceptance tests: building
//! benchmarks, training one method, and aggregating runs into a report.

use std::collections::BTreeMap;
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::config::SplitProtocol;
use crate::data::PatientRecord;
use crate::encoders::{Dims, Model, ModelKind};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mean_std, welch_t_test, EvalResult};
use crate::pw::{fit_pw, PropensityConfig};
use crate::synth::{generate_cohort, split_by_environment, split_random, CausalSpec, GeneratorConfig, Split};
use crate::trainer::{fit, Method, TrainConfig, TrainState, WeightMode};
use crate::weights::SampleWeightTable;

/// Splits plus the ground truth they were generated from.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub split: Split,
    pub dims_m: usize,
    pub dims_n: usize,
    pub spec: Option<CausalSpec>,
}

impl Benchmark {
    pub fn dims(&self, r: usize) -> Dims {
        Dims { m: self.dims_m, n: self.dims_n, r }
    }
}

/// Generates both environment cohorts and splits them by `protocol`. The random
/// protocol uses the training environment only.
pub fn synthetic_benchmark(config: &GeneratorConfig, protocol: SplitProtocol, split_seed: u64) -> Result<Benchmark> {
    config.validate()?;
    let train_env = generate_cohort(config, &config.train_env)?;
    let split = match protocol {
        SplitProtocol::Random => split_random(&train_env.records, split_seed)?,
        SplitProtocol::Env => {
            let test_env = generate_cohort(config, &config.test_env)?;
            split_by_environment(&train_env.records, &test_env.records, split_seed)?
        }
    };
    Ok(Benchmark { split, dims_m: config.m, dims_n: config.n, spec: Some(train_env.spec) })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub model: Model,
    pub state: TrainState,
    pub weights: SampleWeightTable,
    pub test: EvalResult,
    pub holdout_auc: Option<f64>,
}

/// Trains `method` from a fresh model seeded by `train.seed`, then evaluates on the test split.
pub fn run_method(
    method: Method,
    kind: ModelKind,
    bench: &Benchmark,
    train: &TrainConfig,
    pw: &PropensityConfig,
    ks: &[usize],
) -> Result<RunOutcome> {
    let model = Model::new(kind, bench.dims(train.r), train.model_seed())?;
    let split = &bench.split;
    let (fit, holdout_auc) = match method {
        Method::Base => (fit(model, &split.train, &split.val, train, WeightMode::Uniform)?, None),
        Method::Che => (fit(model, &split.train, &split.val, train, WeightMode::Hsic)?, None),
        Method::Pw => {
            let pw = PropensityConfig { seed: train.seed, ..pw.clone() };
            let res = fit_pw(model, &split.train, &split.val, train, &pw)?;
            (res.fit, Some(res.holdout_auc))
        }
    };
    let test = evaluate(&fit.model, &split.test, ks)?;
    Ok(RunOutcome { method, seed: train.seed, model: fit.model, state: fit.state, weights: fit.weights, test, holdout_auc })
}

/// Runs `tasks` on up to `jobs` threads, returning results in task order.
pub fn run_parallel<T, F>(jobs: usize, tasks: Vec<F>) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let n = tasks.len();
    let queue = Mutex::new(tasks.into_iter().enumerate().collect::<Vec<_>>());
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(n.max(1)) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").pop();
                let Some((i, task)) = next else { break };
                let out = task();
                results.lock().expect("results lock")[i] = Some(out);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every task ran")).collect()
}

/// Relative increase `(new - base) / base`.
pub fn improvement(base: f64, new: f64) -> f64 {
    (new - base) / base
}

/// `x` rounded to `digits` significant figures, in plain decimal notation.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new digit (9.9996 -> 10.000).
    let carried = s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > digits && decimals > 0;
    if carried {
        format!("{x:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    /// `values[s][m]`: seed `s`, metric `m`.
    pub values: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
    /// Mean over seeds of the cross-metric average.
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovRow {
    pub baseline: String,
    pub method: String,
    /// Per metric, then the average column last.
    pub relative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<String>,
    pub approaches: Vec<ApproachSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tests: Option<Vec<PairTest>>,
    pub improv: Vec<ImprovRow>,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    /// Aggregates `(approach, seed, result)` triples. Approaches keep first-seen
    /// order; the first one is the baseline for the improvement rows.
    pub fn from_runs(runs: &[(String, u64, EvalResult)]) -> Result<Self> {
        let Some(first) = runs.first() else {
            return Err(Error::Empty("no completed runs to aggregate"));
        };
        let metrics: Vec<String> = first.2.named().into_iter().map(|(k, _)| k).collect();
        let mut order: Vec<String> = Vec::new();
        let mut grouped: BTreeMap<String, Vec<(u64, Vec<f64>)>> = BTreeMap::new();
        for (name, seed, res) in runs {
            let named = res.named();
            if named.iter().map(|(k, _)| k).ne(metrics.iter()) {
                return Err(Error::InvalidConfig("runs were evaluated with different cutoffs".into()));
            }
            if !grouped.contains_key(name) {
                order.push(name.clone());
            }
            grouped.entry(name.clone()).or_default().push((*seed, named.into_iter().map(|(_, v)| v).collect()));
        }
        let mut warnings = Vec::new();
        let approaches: Vec<ApproachSummary> = order
            .iter()
            .map(|name| {
                let rows = &grouped[name];
                let column = |m: usize| rows.iter().map(|(_, v)| v[m]).collect::<Vec<_>>();
                let stats: Vec<(f64, f64)> = (0..metrics.len()).map(|m| mean_std(&column(m))).collect();
                let averages: Vec<f64> = rows.iter().map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64).collect();
                ApproachSummary {
                    name: name.clone(),
                    seeds: rows.iter().map(|(s, _)| *s).collect(),
                    values: rows.iter().map(|(_, v)| v.clone()).collect(),
                    mean: stats.iter().map(|s| s.0).collect(),
                    std: (rows.len() >= 2).then(|| stats.iter().map(|s| s.1).collect()),
                    average: averages.iter().sum::<f64>() / averages.len() as f64,
                }
            })
            .collect();
        let enough = approaches.iter().all(|a| a.values.len() >= 2);
        let tests = if enough {
            let mut tests = Vec::new();
            for i in 0..approaches.len() {
                for j in i + 1..approaches.len() {
                    for (m, metric) in metrics.iter().enumerate() {
                        let col = |a: &ApproachSummary| a.values.iter().map(|v| v[m]).collect::<Vec<_>>();
                        tests.push(PairTest {
                            a: approaches[i].name.clone(),
                            b: approaches[j].name.clone(),
                            metric: metric.clone(),
                            p_value: welch_t_test(&col(&approaches[i]), &col(&approaches[j]))?,
                        });
                    }
                }
            }
            Some(tests)
        } else {
            let msg = "fewer than 2 seeds for some approach; t-tests omitted".to_string();
            warn!("{msg}");
            warnings.push(msg);
            None
        };
        let base = &approaches[0];
        let improv = approaches[1..]
            .iter()
            .map(|a| ImprovRow {
                baseline: base.name.clone(),
                method: a.name.clone(),
                relative: a
                    .mean
                    .iter()
                    .zip(&base.mean)
                    .map(|(n, b)| improvement(*b, *n))
                    .chain(std::iter::once(improvement(base.average, a.average)))
                    .collect(),
            })
            .collect();
        Ok(Self { metrics, approaches, tests, improv, warnings, metadata: BTreeMap::new() })
    }

    pub fn approach(&self, name: &str) -> Option<&ApproachSummary> {
        self.approaches.iter().find(|a| a.name == name)
    }

    pub fn p_value(&self, a: &str, b: &str, metric: &str) -> Option<f64> {
        self.tests.as_ref()?.iter().find_map(|t| {
            let pair = (t.a == a && t.b == b) || (t.a == b && t.b == a);
            (pair && t.metric == metric).then_some(t.p_value)
        })
    }

    pub fn to_json(&self) -> Result<String> {
        crate::checkpoint::to_canonical_json(self)
    }

    /// Table layout: one row per approach with metric columns and `Average`,
    /// then one `Improv` row per non-baseline approach, all to 4 significant figures.
    pub fn to_csv(&self) -> String {
        let mut out = format!("approach,{},Average\n", self.metrics.join(","));
        for a in &self.approaches {
            let cells: Vec<String> = a.mean.iter().chain(std::iter::once(&a.average)).map(|v| format_sig(*v, 4)).collect();
            out.push_str(&format!("{},{}\n", a.name, cells.join(",")));
        }
        for row in &self.improv {
            let cells: Vec<String> = row.relative.iter().map(|v| format!("{}%", format_sig(100.0 * v, 4))).collect();
            out.push_str(&format!("Improv ({} vs {}),{}\n", row.method, row.baseline, cells.join(",")));
        }
        out
    }
}

/// Display name of `method` on top of `kind`, e.g. `che+lstm`.
pub fn approach_name(method: Method, kind: ModelKind) -> String {
    match method {
        Method::Base => kind.to_string(),
        other => format!("{other}+{kind}"),
    }
}

/// Records of the test split, or the validation split when `which == "val"`.
pub fn pick_split<'a>(split: &'a Split, which: &str) -> Result<&'a [PatientRecord]> {
    match which {
        "train" => Ok(&split.train),
        "val" => Ok(&split.val),
        "test" => Ok(&split.test),
        other => Err(Error::InvalidConfig(format!("unknown split part `{other}` (expected train|val|test)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_matches_published_entry() {
        let v = improvement(0.2648, 0.2756);
        assert_eq!(format!("{}%", format_sig(100.0 * v, 4)), "4.079%");
    }

    #[test]
    fn significant_figures() {
        assert_eq!(format_sig(0.123456, 4), "0.1235");
        assert_eq!(format_sig(1.0, 4), "1.000");
        assert_eq!(format_sig(9.99996, 4), "10.00");
        assert_eq!(format_sig(-0.00012344, 4), "-0.0001234");
        assert_eq!(format_sig(12345.6, 4), "12346");
    }

    fn res(v: f64) -> EvalResult {
        EvalResult { ks: vec![10, 20], ndcg: vec![v, v], acc: vec![v, v], points: 1 }
    }

    #[test]
    fn two_methods_five_seeds() {
        let mut runs = Vec::new();
        for s in 0..5 {
            runs.push(("lstm".to_string(), s, res(0.2 + 0.001 * s as f64)));
            runs.push(("che+lstm".to_string(), s, res(0.3 + 0.001 * s as f64)));
        }
        let rep = MetricsReport::from_runs(&runs).unwrap();
        assert_eq!(rep.approaches.len(), 2);
        assert_eq!(rep.approaches[0].values.len(), 5);
        assert!(rep.p_value("lstm", "che+lstm", "NDCG@10").unwrap() < 1e-6);
        assert!((rep.improv[0].relative[0] - 0.1 / 0.202).abs() < 1e-12);
        let csv = rep.to_csv();
        assert!(csv.starts_with("approach,NDCG@10,NDCG@20,ACC@10,ACC@20,Average\n"));
        assert!(csv.contains("Improv (che+lstm vs lstm)"));
    }

    #[test]
    fn single_seed_omits_tests() {
        let rep = MetricsReport::from_runs(&[("lstm".into(), 0, res(0.2)), ("che+lstm".into(), 0, res(0.25))]).unwrap();
        assert!(rep.tests.is_none() && !rep.warnings.is_empty());
        assert!(rep.approaches[0].std.is_none());
    }

    #[test]
    fn parallel_preserves_order() {
        let tasks: Vec<_> = (0..7).map(|i| move || i * i).collect();
        assert_eq!(run_parallel(3, tasks), vec![0, 1, 4, 9, 16, 25, 36]);
    }
}
