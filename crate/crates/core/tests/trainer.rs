use che_core::data::{multi_hot, prediction_points};
use che_core::encoders::prediction_loss;
use che_core::metrics::evaluate;
use che_core::synth::{generate_cohort, split_random, splitmix64};
use che_core::tensor::Adam;
use che_core::trainer::{fit, weight_step, weight_update_epoch, weighted_loss_epoch, WeightMode};
use che_core::weights::{WEIGHT_MAX, WEIGHT_MIN};
use che_core::{
    Checkpoint, Dims, Error, GeneratorConfig, Graph, HsicConfig, Model, ModelKind, PatientRecord, SampleWeightTable,
    SigmaPolicy, Split, TrainConfig, Visit,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_split(patients: usize, seed: u64) -> (Split, Dims) {
    let cfg = GeneratorConfig { patients, m: 12, n: 8, s: 4, mean_codes: 2.0, seed, ..Default::default() };
    let c = generate_cohort(&cfg, &cfg.train_env).unwrap();
    (split_random(&c.records, seed).unwrap(), Dims { m: 12, n: 8, r: 6 })
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig { max_epochs: 4, patience: 4, r: 6, batch_size: 8, seed, ..Default::default() }
}

fn checkpoint(model: &Model) -> String {
    Checkpoint::from_model(model, 0).to_json().unwrap()
}

#[test]
fn unit_weights_reproduce_plain_training() {
    let (split, dims) = toy_split(40, 1);
    let cfg = quick(3);
    let model = Model::new(ModelKind::Lstm, dims, cfg.model_seed()).unwrap();
    let plain = fit(model.clone(), &split.train, &split.val, &cfg, WeightMode::Uniform).unwrap();
    let ones = SampleWeightTable::ones(prediction_points(&split.train));
    let fixed = fit(model.clone(), &split.train, &split.val, &cfg, WeightMode::Fixed(ones)).unwrap();
    let che0 = fit(model, &split.train, &split.val, &TrainConfig { epsilon: 0.0, ..cfg }, WeightMode::Hsic).unwrap();
    assert_eq!(checkpoint(&plain.model), checkpoint(&fixed.model));
    assert_eq!(checkpoint(&plain.model), checkpoint(&che0.model));
    assert_eq!(plain.state.curve, che0.state.curve);
    assert!(che0.weights.values().iter().all(|&w| w == 1.0));
}

fn one_point_record() -> PatientRecord {
    PatientRecord {
        id: "p".into(),
        env: "e".into(),
        visits: vec![Visit::new(vec![0, 3], vec![1]), Visit::new(vec![2], vec![0, 4])],
    }
}

#[test]
fn doubled_weight_doubles_gradient() {
    let dims = Dims { m: 5, n: 5, r: 4 };
    let train = vec![one_point_record()];
    let points = prediction_points(&train);
    let first_moment = |w: f64| {
        let mut model = Model::new(ModelKind::ReverseAttention, dims, 9).unwrap();
        let mut opt = Adam::new(1e-2);
        let table = SampleWeightTable::from_parts(points.clone(), vec![w]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        weighted_loss_epoch(&mut model, &mut opt, &train, &table, 1, 0.0, &mut rng).unwrap();
        // After one Adam step the first moment is (1 - beta1) * gradient.
        model.params.keys().flat_map(|k| opt.state(k).unwrap().first.clone()).collect::<Vec<f64>>()
    };
    let g1 = first_moment(1.0);
    let g2 = first_moment(2.0);
    assert!(g1.iter().any(|&g| g != 0.0));
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn epoch_loss_matches_replay() {
    let (split, dims) = toy_split(30, 2);
    let train = &split.train;
    let points = prediction_points(train);
    let mut wr = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<f64> = points.iter().map(|_| wr.gen_range(0.2..3.0)).collect();
    let table = SampleWeightTable::from_parts(points.clone(), values.clone()).unwrap();
    let batch = 7;

    let mut model = Model::new(ModelKind::BiAttention, dims, 4).unwrap();
    let mut opt = Adam::new(1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let loss = weighted_loss_epoch(&mut model, &mut opt, train, &table, batch, 0.0, &mut rng).unwrap();

    // Replay: same shuffle, per-sample losses from the plain-arithmetic path,
    // updates from a freshly assembled batch graph.
    let mut replay = Model::new(ModelKind::BiAttention, dims, 4).unwrap();
    let mut ropt = Adam::new(1e-2);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
    let mut total = 0.0;
    for chunk in order.chunks(batch) {
        let mut g = Graph::new();
        let bound = replay.bind(&mut g);
        let mut terms = Vec::new();
        for &i in chunk {
            let p = points[i];
            let rec = &train[p.patient];
            let target = multi_hot(&rec.visits[p.prefix].dx, dims.m);
            total += values[i] * prediction_loss(&replay.predict_point(rec, p.prefix).unwrap(), &target).unwrap();
            let fw = replay.forward(&mut g, &bound, rec, p.prefix, None).unwrap();
            let l = g.bce_with_logits(fw.logits, &target).unwrap();
            terms.push(g.scale(l, values[i]).unwrap());
        }
        let stacked = g.concat(&terms).unwrap();
        let sum = g.sum(stacked).unwrap();
        let root = g.scale(sum, 1.0 / chunk.len() as f64).unwrap();
        let grads = g.backward(root).unwrap();
        ropt.step(&mut replay.params, &bound.gradients(&grads)).unwrap();
    }
    let expected = total / points.len() as f64;
    assert!((loss - expected).abs() < 1e-9 * expected, "{loss} vs {expected}");
    for (name, t) in &model.params {
        let d = t.data().iter().zip(replay.param(name).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "{name}: {d}");
    }
}

#[test]
fn patience_one_returns_first_epoch() {
    let (split, dims) = toy_split(30, 3);
    // Every code is a truth code, so validation NDCG@10 is 1.0 for any model.
    let all: Vec<usize> = (0..dims.m).collect();
    let val = vec![PatientRecord {
        id: "v".into(),
        env: "e".into(),
        visits: vec![Visit::new(all.clone(), vec![0]), Visit::new(all, vec![1])],
    }];
    let cfg = TrainConfig { patience: 1, max_epochs: 10, ..quick(1) };
    let model = Model::new(ModelKind::Lstm, dims, cfg.model_seed()).unwrap();
    let res = fit(model.clone(), &split.train, &val, &cfg, WeightMode::Uniform).unwrap();
    assert_eq!((res.state.best_epoch, res.state.epochs), (1, 2));
    let one = fit(model, &split.train, &val, &TrainConfig { max_epochs: 1, ..cfg }, WeightMode::Uniform).unwrap();
    assert_eq!(checkpoint(&res.model), checkpoint(&one.model));
}

#[test]
fn weight_table_stays_bounded_with_unit_mean() {
    let (split, dims) = toy_split(40, 4);
    let model = Model::new(ModelKind::Lstm, dims, 2).unwrap();
    let hsic = HsicConfig::new(SigmaPolicy::MedianHeuristic, dims.r).unwrap();
    let mut table = SampleWeightTable::ones(prediction_points(&split.train));
    for eps in [0.1, 10.0, 1e3, 1e5, 1e7] {
        weight_update_epoch(&model, &split.train, &mut table, eps, 10.0, &hsic).unwrap();
        assert!(table.min() >= WEIGHT_MIN && table.max() <= WEIGHT_MAX, "{} {}", table.min(), table.max());
        assert!((table.mean() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn degenerate_weight_steps() {
    let hsic = HsicConfig::new(SigmaPolicy::MedianHeuristic, 4).unwrap();
    let pts = |n: usize| (0..n).map(|i| che_core::PredictionPoint { patient: i, prefix: 1 }).collect::<Vec<_>>();
    let varied = vec![0.3, -1.2, 0.8, 2.0];

    // epsilon = 0 leaves all-ones untouched.
    let emb = vec![(varied.clone(), vec![1.0, 0.2, -0.5, 0.1]); 3];
    let mut t = SampleWeightTable::ones(pts(3));
    weight_step(&emb, &mut t, 0.0, 10.0, &hsic).unwrap();
    assert!(t.values().iter().all(|&w| w == 1.0));

    // Constant diagnosis embeddings give a zero gradient, so nothing moves.
    let flat = vec![(vec![0.7; 4], varied.clone()); 3];
    let mut t = SampleWeightTable::from_parts(pts(3), vec![0.5, 1.0, 1.5]).unwrap();
    weight_step(&flat, &mut t, 100.0, 10.0, &hsic).unwrap();
    assert_eq!(t.values(), &[0.5, 1.0, 1.5]);

    // A single-entry table is pinned at 1 by the mean constraint.
    let mut t = SampleWeightTable::ones(pts(1));
    weight_step(&emb[..1], &mut t, 1e4, 10.0, &hsic).unwrap();
    assert_eq!(t.values(), &[1.0]);
}

#[test]
fn weight_step_usually_lowers_hsic() {
    let (split, dims) = toy_split(60, 5);
    let mut improved = 0;
    let mut total = 0;
    for seed in 0..3 {
        let cfg = TrainConfig { r: dims.r, ..Default::default() };
        let mut model = Model::new(ModelKind::Lstm, dims, splitmix64(seed)).unwrap();
        let mut opt = Adam::new(cfg.model_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = SampleWeightTable::ones(prediction_points(&split.train));
        for _ in 0..10 {
            weighted_loss_epoch(&mut model, &mut opt, &split.train, &table, cfg.batch_size, cfg.dropout, &mut rng).unwrap();
            let u = weight_update_epoch(&model, &split.train, &mut table, cfg.epsilon, cfg.weight_lr, &cfg.hsic()).unwrap();
            improved += usize::from(u.hsic_after <= u.hsic_before);
            total += 1;
        }
    }
    assert!(improved * 10 >= total * 9, "{improved}/{total}");
}

#[test]
fn validation_score_is_the_unweighted_score_of_the_returned_model() {
    let (split, dims) = toy_split(40, 6);
    let cfg = TrainConfig { epsilon: 1.0, ..quick(2) };
    let model = Model::new(ModelKind::Lstm, dims, cfg.model_seed()).unwrap();
    let res = fit(model, &split.train, &split.val, &cfg, WeightMode::Hsic).unwrap();
    assert!(res.weights.values().iter().any(|&w| (w - 1.0).abs() > 1e-3));
    assert_eq!(res.state.best_validation, evaluate(&res.model, &split.val, &[10]).unwrap().ndcg[0]);
    assert_eq!(res.state.curve.len(), res.state.epochs);
    assert!(res.state.best_epoch <= res.state.epochs);
}

#[test]
fn empty_splits_and_bad_tables_rejected() {
    let (split, dims) = toy_split(30, 7);
    let cfg = quick(0);
    let model = Model::new(ModelKind::Lstm, dims, 1).unwrap();
    assert!(matches!(fit(model.clone(), &[], &split.val, &cfg, WeightMode::Uniform), Err(Error::Empty(_))));
    assert!(matches!(fit(model.clone(), &split.train, &[], &cfg, WeightMode::Uniform), Err(Error::Empty(_))));
    let short = SampleWeightTable::ones(prediction_points(&split.train[1..]));
    assert!(fit(model, &split.train, &split.val, &cfg, WeightMode::Fixed(short)).is_err());
}

#[test]
fn non_finite_loss_names_the_sample() {
    let dims = Dims { m: 5, n: 5, r: 4 };
    let train = vec![one_point_record()];
    let mut model = Model::new(ModelKind::Lstm, dims, 1).unwrap();
    let bias = model.params.keys().find(|k| k.ends_with("bias") && k.starts_with("head")).cloned();
    let name = bias.unwrap_or_else(|| model.params.keys().last().unwrap().clone());
    model.param_mut(&name).data_mut().iter_mut().for_each(|v| *v = f64::INFINITY);
    let table = SampleWeightTable::ones(prediction_points(&train));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = weighted_loss_epoch(&mut model, &mut Adam::new(1e-2), &train, &table, 1, 0.0, &mut rng).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { patient: 0, prefix: 1, .. }), "{err:?}");
}

#[test]
fn strong_weighting_cuts_toy_hsic() {
    let cfg = GeneratorConfig { patients: 50, m: 20, n: 20, ..Default::default() };
    let c = generate_cohort(&cfg, &cfg.train_env).unwrap();
    let split = split_random(&c.records, 0).unwrap();
    let dims = Dims { m: 20, n: 20, r: 16 };
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let train = TrainConfig { epsilon: 10.0, seed, ..Default::default() };
        let model = Model::new(ModelKind::Lstm, dims, train.model_seed()).unwrap();
        let res = fit(model, &split.train, &split.val, &train, WeightMode::Hsic).unwrap();
        ratios.push(res.state.curve.last().unwrap().mean_hsic / res.state.hsic_initial);
    }
    // Measured at the last epoch: on this tiny validation split the best epoch
    // often comes before the table has moved. A mean-1 table clipped at 20 holds
    // at most 0.95/19.95 of its points at the cap, where local HSIC saturates
    // near 1/(r-1); that caps the reduction near 0.12x here, so the bar sits above it.
    let reduced = ratios.iter().filter(|&&r| r < 0.25).count();
    assert!(reduced >= 4, "{ratios:?}");
}
