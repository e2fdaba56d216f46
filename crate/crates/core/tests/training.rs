mod common;

use candle_core::{DType, Device, Tensor};
use slotphys::params::ParamStore;
use slotphys::rollout::{load_checkpoint, RolloutModel, Variant};
use slotphys::savi::Savi;
use slotphys::scene::generate_sample;
use slotphys::training::{
    collate, encode_sample, make_training_example, objective, prediction_loss, train_predictor,
    EncodedVideo, LossSpec, TrainConfig, TrainingExample,
};
use slotphys::Error;

fn frozen_encoder() -> Savi {
    Savi::new(common::tiny_encoder("f64"), ParamStore::seeded(3), &Device::Cpu)
        .unwrap()
        .frozen()
        .unwrap()
}

fn encoded(n: u64, frames: usize, keep_flow: bool) -> Vec<EncodedVideo> {
    let enc = frozen_encoder();
    let g = common::tiny_generator(frames);
    (0..n)
        .map(|i| encode_sample(&enc, &generate_sample(i, &g).unwrap(), keep_flow).unwrap())
        .collect()
}

fn examples(n: u64) -> Vec<TrainingExample> {
    encoded(n, 5, false).iter().map(|v| v.example(3, 2).unwrap()).collect()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn small_train(max_steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        lr: 1e-3,
        max_steps,
        eval_every: 2,
        patience: 3,
        seed: 5,
        ..TrainConfig::desk()
    }
}

#[test]
fn example_layout_matches_protocol() {
    let enc = frozen_encoder();
    let sample = generate_sample(0, &common::tiny_generator(20)).unwrap();
    let ex = make_training_example(&sample, &enc, 6, 12).unwrap();
    assert_eq!(ex.context.dims()[0], 6);
    assert_eq!(ex.targets.dims()[0], 12);
    assert_eq!(ex.gt_state, sample.state_rows(5));
    assert_eq!(ex.target_states[0], sample.state_rows(6));
    let again = make_training_example(&sample, &enc, 6, 12).unwrap();
    assert_eq!(flat(&ex.context), flat(&again.context));
    assert_eq!(flat(&ex.targets), flat(&again.targets));

    let short = generate_sample(0, &common::tiny_generator(17)).unwrap();
    assert!(matches!(
        make_training_example(&short, &enc, 6, 12),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn unfrozen_encoder_is_refused() {
    let enc = Savi::new(common::tiny_encoder("f64"), ParamStore::seeded(3), &Device::Cpu).unwrap();
    let sample = generate_sample(0, &common::tiny_generator(5)).unwrap();
    assert!(encode_sample(&enc, &sample, false).is_err());
}

#[test]
fn prediction_loss_closed_forms_and_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let v: Vec<f64> = (0..2 * 12 * 4 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..v.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let a = Tensor::from_vec(v.clone(), (2, 12, 4, 8), &Device::Cpu).unwrap();
    let b = Tensor::from_vec(w.clone(), (2, 12, 4, 8), &Device::Cpu).unwrap();
    let l = |x: &Tensor, y: &Tensor| prediction_loss(x, y).unwrap().to_scalar::<f64>().unwrap();
    assert_eq!(l(&a, &a), 0.0);
    let eps = 0.01;
    assert!((l(&a, &(&a + eps).unwrap()) - eps * eps).abs() < 1e-15);
    let mut oracle = 0.0;
    for i in 0..v.len() {
        oracle += (v[i] - w[i]).powi(2);
    }
    oracle /= v.len() as f64;
    assert!((l(&a, &b) - oracle).abs() < 1e-12);
    assert!(prediction_loss(&a, &a.narrow(1, 0, 11).unwrap()).is_err());
}

#[test]
fn objective_has_a_single_latent_term_by_default() {
    let enc = frozen_encoder();
    let model = RolloutModel::new(common::tiny_rollout(Variant::Ours), ParamStore::seeded(1), &Device::Cpu).unwrap();
    let ex: Vec<_> = encoded(2, 5, true).iter().map(|v| v.example(3, 2).unwrap()).collect();
    let refs: Vec<_> = ex.iter().collect();
    let batch = collate(&refs, 4, &Device::Cpu).unwrap();
    let (_, terms) = objective(&model, &enc, &batch, &LossSpec::default()).unwrap();
    assert_eq!(terms, vec!["latent_mse"]);
    let spec = LossSpec { decoded_flow_weight: 0.5 };
    let (_, terms) = objective(&model, &enc, &batch, &spec).unwrap();
    assert_eq!(terms, vec!["latent_mse", "decoded_flow_mse"]);
}

#[test]
fn training_keeps_backbone_and_is_deterministic() {
    let enc = frozen_encoder();
    let hash = enc.store().hash().unwrap();
    let train = examples(4);
    let val = examples(2);
    let cfg = common::tiny_rollout(Variant::Ours);
    let dir = tempfile::tempdir().unwrap();
    let a = train_predictor(&train, &val, &enc, &cfg, &small_train(6), Some(dir.path())).unwrap();
    let b = train_predictor(&train, &val, &enc, &cfg, &small_train(6), None).unwrap();
    assert_eq!(enc.store().hash().unwrap(), hash);
    assert_eq!(a.summary.encoder_hash.as_deref(), Some(hash.as_str()));
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.curve.iter().filter(|r| r.val_loss.is_some()).count(), 3);
    for row in &a.curve {
        assert!(row.train_loss.is_finite());
    }
    let loaded = load_checkpoint(a.checkpoint.as_ref().unwrap(), &Device::Cpu).unwrap();
    assert_eq!(loaded.store().hash().unwrap(), a.model.store().hash().unwrap());
    assert!(dir.path().join("curve.csv").exists());
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_checkpoint() {
    let enc = frozen_encoder();
    let mut train = examples(4);
    let val = examples(2);
    let nan = (train[3].targets.ones_like().unwrap() * f64::NAN).unwrap();
    train[3].targets = nan;
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        eval_every: 1,
        ..small_train(50)
    };
    let err = train_predictor(&train, &val, &enc, &common::tiny_rollout(Variant::Ours), &cfg, Some(dir.path()))
        .unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert!(dir.path().join("curve.csv").exists());
    let curve = slotphys::optim::read_curve_csv(&dir.path().join("curve.csv")).unwrap();
    assert!(!curve.is_empty());
    assert!(load_checkpoint(&dir.path().join("model"), &Device::Cpu).is_ok());
}
