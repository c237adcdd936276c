//! Loss, optimizer and training-loop behaviour.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rupformer_core::kpi::{make_samples, Features, Normalizer, TrainingSample};
use rupformer_core::loss::{mean_pinball, total_loss, total_loss_value, LossWeights};
use rupformer_core::model::{DecoderOutput, Hyperparams, ModelInput, Mode, RupFormer};
use rupformer_core::optim::{clip_gradients, Adam, AdamConfig};
use rupformer_core::synth::{default_profiles, generate};
use rupformer_core::tape::Tape;
use rupformer_core::tensor::{ParamStore, Tensor};
use rupformer_core::time::Timestamp;
use rupformer_core::train::{evaluate_loss, train, train_step};
use rupformer_core::TrainConfig;

const WEIGHTS: LossWeights = LossWeights { alpha: 0.9, beta: 1.2 };
const QUANTILES: [f32; 3] = [0.1, 0.5, 0.9];

fn samples(days: usize, seed: u64) -> Vec<TrainingSample> {
    let profiles = default_profiles(2, seed).unwrap();
    let series = generate(&profiles, Timestamp::from_civil(2024, 1, 1, 0, 0, 0), days, seed).unwrap();
    let norm = Normalizer::fit(&series).unwrap();
    make_samples(&series, &norm, 4, 2, 1).unwrap()
}

#[test]
fn toy_total_loss_by_hand() {
    // det 0.5 vs 0.3 everywhere: mse 0.04
    // residual 0.6 vs quantiles (0.4, 0.5, 0.7): 0.1*0.2 + 0.5*0.1 + 0.1*0.1 = 0.08
    // 0.9 * 0.04 + 1.2 * 0.08 = 0.132
    let mut head = vec![0.5f32; 8];
    head.extend([0.4, 0.5, 0.7]);
    let mut target = [0.3f32; 9];
    target[8] = 0.6;

    let mut tape = Tape::new();
    let h = tape.constant(Tensor::from_vec(&[1, 11], head.clone()).unwrap());
    let loss = total_loss(&mut tape, h, &[target], &QUANTILES, WEIGHTS).unwrap();
    assert!((tape.value(loss)[0] - 0.132).abs() < 1e-6);

    let out = DecoderOutput {
        det: Tensor::from_vec(&[1, 8], head[..8].to_vec()).unwrap(),
        quantiles: Tensor::from_vec(&[1, 3], head[8..].to_vec()).unwrap(),
    };
    assert!((total_loss_value(&out, &[target], &QUANTILES, WEIGHTS).unwrap() - 0.132).abs() < 1e-6);
}

#[test]
fn loss_is_zero_only_for_exact_predictions() {
    let target: Features = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.35];
    let exact = DecoderOutput {
        det: Tensor::from_vec(&[1, 8], target[..8].to_vec()).unwrap(),
        quantiles: Tensor::from_vec(&[1, 3], vec![0.35; 3]).unwrap(),
    };
    assert_eq!(total_loss_value(&exact, &[target], &QUANTILES, WEIGHTS).unwrap(), 0.0);
    let mut off = exact.clone();
    off.quantiles.data_mut()[0] = 0.30;
    assert!(total_loss_value(&off, &[target], &QUANTILES, WEIGHTS).unwrap() > 0.0);
}

/// Empirical q-quantile as the minimizer of the mean pinball loss over a fine grid.
fn grid_quantile(sample: &[f64], q: f64) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=2000 {
        let c = i as f64 / 2000.0;
        let l = mean_pinball(sample, &vec![c; sample.len()], q).unwrap();
        if l < best.0 {
            best = (l, c);
        }
    }
    best.1
}

/// Order-statistic quantile, for cross-checking the grid search.
fn sorted_quantile(sample: &[f64], q: f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    s[((q * s.len() as f64).ceil() as usize).saturating_sub(1)]
}

#[test]
fn constant_quantile_head_converges_to_empirical_quantiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // skewed sample on [0, 1]
    let sample: Vec<f64> = (0..400).map(|_| rng.random::<f64>().powi(2)).collect();
    let targets: Vec<Features> = sample
        .iter()
        .map(|&y| {
            let mut t = [0.0f32; 9];
            t[8] = y as f32;
            t
        })
        .collect();

    let mut store = ParamStore::new();
    let id = store.insert("head", Tensor::full(&[1, 11], 0.5).into_param());
    let mut adam = Adam::new(AdamConfig::with_lr(5e-3, 0.0), &store);
    let ones = Tensor::full(&[sample.len(), 1], 1.0);
    for _ in 0..3000 {
        store.zero_grads();
        let grads = {
            let mut tape = Tape::new();
            let c = tape.param(&store, id);
            let o = tape.constant(ones.clone());
            let head = tape.matmul(o, c).unwrap();
            let loss = total_loss(&mut tape, head, &targets, &QUANTILES, WEIGHTS).unwrap();
            tape.backward(loss).unwrap()
        };
        store.accumulate(&grads);
        adam.step(&mut store).unwrap();
    }
    let learned = store.get(id).data()[8..].to_vec();
    for (i, &q) in QUANTILES.iter().enumerate() {
        let q = f64::from(q);
        let grid = grid_quantile(&sample, q);
        assert!((grid - sorted_quantile(&sample, q)).abs() < 0.01);
        let c = f64::from(learned[i]);
        assert!((c - grid).abs() <= 0.02, "q={q}: learned {c}, empirical {grid}");
    }
}

#[test]
fn adam_minimizes_a_parabola() {
    let mut store = ParamStore::new();
    let id = store.insert("x", Tensor::scalar(0.0).into_param());
    let mut adam = Adam::new(AdamConfig::with_lr(0.05, 0.0), &store);
    for _ in 0..1000 {
        store.zero_grads();
        let grads = {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let three = tape.constant(Tensor::scalar(3.0));
            let d = tape.sub(x, three).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap()
        };
        store.accumulate(&grads);
        adam.step(&mut store).unwrap();
    }
    assert!((store.get(id).data()[0] - 3.0).abs() < 1e-2);
}

fn sample_loss(model: &RupFormer, sample: &TrainingSample, cfg: &TrainConfig) -> f64 {
    evaluate_loss(model, std::slice::from_ref(sample), cfg).unwrap()
}

fn gradient_step(model: &mut RupFormer, sample: &TrainingSample, cfg: &TrainConfig) {
    let grads = {
        let input = ModelInput::teacher_forced(&[sample]);
        let mut tape = Tape::new();
        let head = model.forward(&mut tape, &input, &mut Mode::Eval).unwrap();
        let q = model.hyperparams().quantiles.clone();
        let loss = total_loss(&mut tape, head, &sample.decoder_targets, &q, cfg.loss_weights()).unwrap();
        tape.backward(loss).unwrap()
    };
    model.params_mut().zero_grads();
    model.params_mut().accumulate(&grads);
    for t in model.params_mut().tensors_mut() {
        let g = t.grad().unwrap().to_vec();
        t.data_mut().iter_mut().zip(g).for_each(|(p, g)| *p -= cfg.lr * g);
    }
}

/// Counts seeds for which one update on a single sample lowers its loss.
fn descending_seeds(lr: f32, update: impl Fn(&mut RupFormer, &TrainingSample, &TrainConfig, u64)) -> usize {
    let pool = samples(3, 5);
    let hp = Hyperparams { dropout: 0.0, ..Hyperparams::default() };
    let cfg = TrainConfig { lr, weight_decay: 0.0, ..TrainConfig::default() };
    (0..100u64)
        .filter(|&seed| {
            let sample = &pool[(seed as usize * 37) % pool.len()];
            let mut model = RupFormer::new(hp.clone(), seed).unwrap();
            let before = sample_loss(&model, sample, &cfg);
            update(&mut model, sample, &cfg, seed);
            sample_loss(&model, sample, &cfg) < before
        })
        .count()
}

#[test]
fn one_small_gradient_step_lowers_the_sample_loss() {
    let n = descending_seeds(1e-3, |model, sample, cfg, _| gradient_step(model, sample, cfg));
    assert!(n >= 95, "{n}/100");
}

#[test]
fn one_adam_step_at_the_reference_rate_lowers_the_sample_loss() {
    // Adam's first step moves every weight by about lr regardless of gradient
    // size, so "small" has to be judged at the reference rate.
    let n = descending_seeds(1e-4, |model, sample, cfg, seed| {
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr, 0.0), model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train_step(model, &mut adam, &[sample], cfg, &mut rng).unwrap();
    });
    assert!(n >= 95, "{n}/100");
}

#[test]
fn training_loss_falls_on_a_small_set() {
    let pool = samples(2, 9);
    let train_set: Vec<TrainingSample> = pool.iter().step_by(5).take(50).cloned().collect();
    let val_set: Vec<TrainingSample> = pool.iter().skip(2).step_by(5).take(20).cloned().collect();
    assert_eq!(train_set.len(), 50);
    let cfg = TrainConfig { epochs: 20, batch_size: 10, patience: 100, seed: 3, ..TrainConfig::default() };
    let out = train(&train_set, &val_set, Hyperparams::default(), &cfg, &mut |_| {}).unwrap();
    assert_eq!(out.history.len(), 20);
    let (first, last) = (out.history[0].train_loss, out.history[19].train_loss);
    assert!(last <= 0.8 * first, "epoch 1 {first}, epoch 20 {last}");
}

#[test]
fn best_validation_parameters_are_restored() {
    let pool = samples(2, 4);
    let train_set: Vec<TrainingSample> = pool.iter().step_by(3).take(60).cloned().collect();
    let val_set: Vec<TrainingSample> = pool.iter().skip(1).step_by(7).take(20).cloned().collect();
    let cfg = TrainConfig { epochs: 12, batch_size: 16, lr: 3e-3, patience: 3, seed: 1, ..TrainConfig::default() };
    let out = train(&train_set, &val_set, Hyperparams::default(), &cfg, &mut |_| {}).unwrap();
    let best = out
        .history
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .unwrap();
    assert_eq!(out.best_epoch, best.epoch);
    assert_eq!(out.best_val_loss, best.val_loss);
    assert_eq!(evaluate_loss(&out.model, &val_set, &cfg).unwrap(), best.val_loss);
    let last = out.history.last().unwrap();
    assert!(last.stopped || last.epoch == cfg.epochs);
}

#[test]
fn training_is_reproducible() {
    let pool = samples(1, 2);
    let (train_set, val_set) = pool.split_at(40);
    let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 17, ..TrainConfig::default() };
    let run = || {
        let out = train(train_set, &val_set[..10], Hyperparams::default(), &cfg, &mut |_| {}).unwrap();
        out.model.params().iter().flat_map(|(_, _, t)| t.data().to_vec()).collect::<Vec<f32>>()
    };
    let a = run();
    assert!(a.iter().zip(run()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn empty_splits_are_rejected() {
    let pool = samples(1, 2);
    let cfg = TrainConfig::default();
    assert!(train(&[], &pool, Hyperparams::default(), &cfg, &mut |_| {}).is_err());
    assert!(train(&pool, &[], Hyperparams::default(), &cfg, &mut |_| {}).is_err());
}

proptest! {
    #[test]
    fn clipping_never_increases_the_norm(grads in proptest::collection::vec(-10.0f32..10.0, 1..20), max in 0.01f64..5.0) {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::zeros(&[grads.len()]).into_param());
        store.get_mut(id).grad_mut().unwrap().copy_from_slice(&grads);
        let before = store.grad_norm();
        clip_gradients(&mut store, max);
        let after = store.grad_norm();
        prop_assert!(after <= before + 1e-9);
        prop_assert!(after <= max * (1.0 + 1e-6));
    }
}
