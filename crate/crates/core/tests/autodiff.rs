mod common;

use che_core::encoders::{Dims, Model, ModelKind};
use common::checks::{check_hsic, check_model, check_op, ALL_OPS, INSTANCES, MODEL_KINDS, TOL};
use common::{random_record, rng};
use rand::Rng;

#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng(11);
    for kind in ALL_OPS {
        for _ in 0..INSTANCES {
            let err = check_op(kind, &mut r);
            assert!(err < TOL, "{kind:?}: relative error {err}");
        }
    }
}

#[test]
fn composed_hsic_matches_finite_differences() {
    let mut r = rng(12);
    for _ in 0..INSTANCES {
        let err = check_hsic(&mut r);
        assert!(err < TOL, "relative error {err}");
    }
}

#[test]
fn full_model_loss_matches_finite_differences() {
    let mut r = rng(13);
    for i in 0..INSTANCES {
        let kind = MODEL_KINDS[i % MODEL_KINDS.len()];
        let err = check_model(kind, &mut r);
        assert!(err < TOL, "{kind:?}: relative error {err}");
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Step-by-step LSTM recurrence in plain arithmetic, gate order i, f, g, o.
fn lstm_oracle(model: &Model, record: &che_core::PatientRecord, prefix: usize) -> Vec<f64> {
    let r = model.dims.r;
    let emb = model.param("dx.embedding");
    let wi = model.param("dx.lstm.w_input");
    let wh = model.param("dx.lstm.w_hidden");
    let b = model.param("dx.lstm.bias").data();
    let mut h = vec![0.0; r];
    let mut c = vec![0.0; r];
    for v in &record.visits[..prefix] {
        let mut x = vec![0.0; r];
        for &code in &v.dx {
            for k in 0..r {
                x[k] += emb.at(code, k) / v.dx.len() as f64;
            }
        }
        let z: Vec<f64> = (0..4 * r)
            .map(|row| b[row] + (0..r).map(|k| wi.at(row, k) * x[k] + wh.at(row, k) * h[k]).sum::<f64>())
            .collect();
        for k in 0..r {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[r + k]);
            let g = z[2 * r + k].tanh();
            let o = sigmoid(z[3 * r + k]);
            c[k] = f * c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
    }
    h
}

#[test]
fn lstm_matches_recurrence_oracle() {
    let mut r = rng(14);
    for _ in 0..10 {
        let dims = Dims { m: 7, n: 5, r: 4 };
        let model = Model::new(ModelKind::Lstm, dims, r.gen()).unwrap();
        let record = random_record(&mut r, dims.m, dims.n, 3);
        let (e_d, _) = model.embed_point(&record, 3).unwrap();
        for (a, b) in e_d.iter().zip(lstm_oracle(&model, &record, 3)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
