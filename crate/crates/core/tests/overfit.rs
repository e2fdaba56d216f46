use std::time::Instant;

use candle_core::Device;
use slotphys::optim::Adam;
use slotphys::params::ParamStore;
use slotphys::rollout::{RolloutConfig, RolloutModel, Variant};
use slotphys::savi::{EncoderConfig, Savi};
use slotphys::scene::{generate_sample, GeneratorParams};
use slotphys::training::{collate, encode_sample, objective, LossSpec, TrainConfig};

/// Fixed-batch overfitting at desk width: the latent loss must fall at least
/// tenfold within 500 steps. Takes about half an hour on one CPU core.
#[test]
#[ignore = "slow: run with `cargo test -p slotphys --test overfit -- --ignored`"]
fn ours_overfits_one_batch() {
    let device = Device::Cpu;
    let enc = Savi::new(EncoderConfig::desk(), ParamStore::seeded(0), &device)
        .unwrap()
        .frozen()
        .unwrap();
    let gen = GeneratorParams { frames: 18, ..GeneratorParams::desk() };
    let examples: Vec<_> = (0..4)
        .map(|i| {
            encode_sample(&enc, &generate_sample(i, &gen).unwrap(), false)
                .unwrap()
                .example(6, 12)
                .unwrap()
        })
        .collect();
    let refs: Vec<_> = examples.iter().collect();
    let batch = collate(&refs, 6, &device).unwrap();
    let train = TrainConfig::desk();
    let model = RolloutModel::new(
        RolloutConfig::for_variant(Variant::Ours, 64),
        ParamStore::seeded(train.seed),
        &device,
    )
    .unwrap();
    let mut adam = Adam::new(model.store().vars(), train.lr, train.grad_clip_norm).unwrap();
    let t0 = Instant::now();
    let mut first = None;
    let mut last = 0.0;
    for step in 0..500 {
        let (loss, _) = objective(&model, &enc, &batch, &LossSpec::default()).unwrap();
        let s = adam.step(&loss).unwrap();
        first.get_or_insert(s.loss);
        last = s.loss;
        if step % 50 == 0 {
            eprintln!("step {step} loss {:.4} grad norm {:.3} ({:?})", s.loss, s.grad_norm, t0.elapsed());
        }
    }
    let first = first.unwrap();
    eprintln!("loss {first:.4} -> {last:.4}");
    assert!(last * 10.0 <= first, "loss {first} -> {last}");
}
