//! Shared fixtures for the criterion benches.

use che_core::config::SplitProtocol;
use che_core::experiment::{synthetic_benchmark, Benchmark};
use che_core::GeneratorConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` pairs of uniform `r`-vectors standing in for stream embeddings.
pub fn embedding_pairs(n: usize, r: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = || (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    (0..n).map(|_| (v(), v())).collect()
}

/// Environment-split benchmark with `patients` per cohort and default vocabularies.
pub fn benchmark(patients: usize) -> Benchmark {
    let cfg = GeneratorConfig { patients, ..Default::default() };
    synthetic_benchmark(&cfg, SplitProtocol::Env, 0).expect("default generator config is valid")
}
