mod common;

use candle_core::{DType, Device, Tensor};
use slotphys::optim::{Adam, OptimConfig};
use slotphys::params::ParamStore;
use slotphys::savi::{
    flow_loss, load_frozen, masks_to_segmentation, save_checkpoint, train_savi, FlowWindows, Savi,
};
use slotphys::scene::generate_sample;
use slotphys::Error;

fn model(dtype: &str, seed: u64) -> Savi {
    Savi::new(common::tiny_encoder(dtype), ParamStore::seeded(seed), &Device::Cpu).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    t.to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap()
}

fn random_frames(b: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..b * 3 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (b, 3, 16, 16), &Device::Cpu).unwrap()
}

const BOXES: [[f64; 4]; 4] = [
    [0.1, 0.1, 0.3, 0.3],
    [0.5, 0.2, 0.9, 0.6],
    [0.0, 0.6, 0.2, 0.9],
    [0.4, 0.4, 0.6, 0.5],
];

#[test]
fn full_box_set_has_no_null_slots() {
    let m = model("f64", 1);
    let s = rows(&m.init_slots_from_bboxes(&[BOXES.to_vec()]).unwrap());
    for i in 0..4 {
        for j in (i + 1)..4 {
            assert_ne!(s[0][i], s[0][j]);
        }
    }
}

#[test]
fn surplus_slots_share_null_embedding() {
    let m = model("f64", 1);
    let s = rows(&m.init_slots_from_bboxes(&[BOXES[..2].to_vec()]).unwrap());
    assert_eq!(s[0][2], s[0][3]);
    assert_ne!(s[0][1], s[0][2]);
}

#[test]
fn box_permutation_permutes_slots() {
    let m = model("f64", 1);
    let a = rows(&m.init_slots_from_bboxes(&[BOXES[..3].to_vec()]).unwrap());
    let b = rows(
        &m.init_slots_from_bboxes(&[vec![BOXES[2], BOXES[0], BOXES[1]]])
            .unwrap(),
    );
    assert_eq!(a[0][0], b[0][1]);
    assert_eq!(a[0][1], b[0][2]);
    assert_eq!(a[0][2], b[0][0]);
}

#[test]
fn too_many_boxes_is_capacity_error() {
    let m = model("f64", 1);
    let mut boxes = BOXES.to_vec();
    boxes.push([0.0, 0.0, 0.1, 0.1]);
    assert!(matches!(
        m.init_slots_from_bboxes(&[boxes]),
        Err(Error::Capacity { objects: 5, slots: 4 })
    ));
}

#[test]
fn encode_shapes_normalization_and_purity() {
    let m = model("f64", 2);
    let prior = m.init_slots_from_bboxes(&[BOXES[..2].to_vec(), BOXES[1..].to_vec()]).unwrap();
    let frames = random_frames(2, 3);
    let a = m.encode_frame(&frames, &prior).unwrap();
    let b = m.encode_frame(&frames, &prior).unwrap();
    assert_eq!(a.slots.dims(), &[2, 4, 8]);
    assert_eq!(a.next_prior.dims(), &[2, 4, 8]);
    assert_eq!(a.attention.dims(), &[2, 4, 256]);
    let sums = a.attention.sum(1).unwrap().to_vec2::<f64>().unwrap();
    for v in sums.iter().flatten() {
        assert!((v - 1.0).abs() < 1e-12);
    }
    assert_eq!(rows(&a.slots), rows(&b.slots));
    assert_eq!(rows(&a.next_prior), rows(&b.next_prior));
}

#[test]
fn wrong_frame_shape_is_rejected() {
    let m = model("f64", 2);
    let prior = m.init_slots_from_bboxes(&[vec![]]).unwrap();
    let frame = Tensor::zeros((1, 3, 8, 16), DType::F64, &Device::Cpu).unwrap();
    assert!(matches!(m.encode_frame(&frame, &prior), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn decoder_masks_partition_unity() {
    let m = model("f32", 4);
    let slots = Tensor::randn(0f32, 1.0, (3, 4, 8), &Device::Cpu).unwrap();
    let d = m.decode_slots(&slots).unwrap();
    assert_eq!(d.flow.dims(), &[3, 16, 16, 2]);
    assert_eq!(d.masks.dims(), &[3, 4, 16, 16]);
    let sums: Vec<f32> = d.masks.sum(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert!(sums.iter().all(|v| (v - 1.0).abs() <= 1e-6));
}

#[test]
fn equal_slots_give_uniform_masks() {
    let m = model("f64", 4);
    let one = Tensor::randn(0f64, 1.0, (1, 1, 8), &Device::Cpu).unwrap();
    let slots = one.broadcast_as((1, 4, 8)).unwrap().contiguous().unwrap();
    let masks: Vec<f64> = m.decode_slots(&slots).unwrap().masks.flatten_all().unwrap().to_vec1().unwrap();
    assert!(masks.iter().all(|v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn segmentation_matches_max_scan() {
    let m = model("f64", 5);
    let slots = Tensor::randn(0f64, 1.0, (2, 4, 8), &Device::Cpu).unwrap();
    let masks = m.decode_slots(&slots).unwrap().masks;
    let seg = m.segmentation_from_slots(&slots).unwrap();
    let mv: Vec<f64> = masks.flatten_all().unwrap().to_vec1().unwrap();
    for b in 0..2 {
        for y in 0..16 {
            for x in 0..16 {
                let mut best = 0;
                for s in 1..4 {
                    if mv[((b * 4 + s) * 16 + y) * 16 + x] > mv[((b * 4 + best) * 16 + y) * 16 + x] {
                        best = s;
                    }
                }
                assert_eq!(seg[[b, y, x]] as usize, best);
                assert!(seg[[b, y, x]] < 4);
            }
        }
    }
}

#[test]
fn one_hot_masks_reproduce_partition() {
    let labels = [0u32, 2, 1, 1, 3, 0, 2, 2, 1];
    let mut data = vec![0f64; 4 * 9];
    for (p, &l) in labels.iter().enumerate() {
        data[l as usize * 9 + p] = 1.0;
    }
    let masks = Tensor::from_vec(data, (1, 4, 3, 3), &Device::Cpu).unwrap();
    let seg = masks_to_segmentation(&masks).unwrap();
    let got: Vec<u32> = seg.iter().map(|&v| v as u32).collect();
    assert_eq!(got, labels);
}

fn windows(dtype: &str, n: usize) -> FlowWindows {
    let g = common::tiny_generator(3);
    let samples: Vec<_> = (0..n as u64).map(|i| generate_sample(i, &g).unwrap()).collect();
    FlowWindows::from_samples(&samples, &common::tiny_encoder(dtype), &Device::Cpu).unwrap()
}

fn loss_value(m: &Savi, w: &FlowWindows) -> f64 {
    let (f, fl, b) = w.batch(&[0, 1]).unwrap();
    flow_loss(m, &f, &fl, &b).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

#[test]
fn one_small_step_decreases_batch_loss() {
    let m = model("f64", 6);
    let w = windows("f64", 2);
    let before = loss_value(&m, &w);
    let mut opt = Adam::new(m.store().vars(), 1e-4, 0.05).unwrap();
    let (f, fl, b) = w.batch(&[0, 1]).unwrap();
    let stats = opt.step(&flow_loss(&m, &f, &fl, &b).unwrap()).unwrap();
    assert!(stats.clipped_norm <= 0.05 + 1e-12);
    assert!(loss_value(&m, &w) < before);
}

#[test]
fn flow_loss_gradient_matches_finite_differences() {
    let m = model("f64", 7);
    let w = windows("f64", 2);
    let (f, fl, b) = w.batch(&[0, 1]).unwrap();
    let grads = flow_loss(&m, &f, &fl, &b).unwrap().backward().unwrap();
    let probes = ["sa.q.weight", "enc.conv0.weight", "dec.out.bias", "init.bbox.weight", "pred.gru.hidden.weight"];
    let h = 1e-5;
    for name in probes {
        let var = m.store().var(name).unwrap();
        let original = var.as_tensor().copy().unwrap();
        let flat: Vec<f64> = original.flatten_all().unwrap().to_vec1().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let idx = flat.len() / 3;
        let eval = |delta: f64| {
            let mut v = flat.clone();
            v[idx] += delta;
            var.set(&Tensor::from_vec(v, original.shape(), &Device::Cpu).unwrap()).unwrap();
            loss_value(&m, &w)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        var.set(&original).unwrap();
        let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
        assert!(rel < 1e-3, "{name}: autodiff {} vs fd {fd} (rel {rel})", g[idx]);
    }
}

#[test]
fn training_returns_frozen_best_model_and_checkpoint_round_trips() {
    let m = model("f32", 8);
    let train = windows("f32", 3);
    let val = windows("f32", 2);
    let optim = OptimConfig {
        batch_size: 2,
        max_steps: 4,
        eval_every: 2,
        lr: 1e-3,
        ..OptimConfig::desk()
    };
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    let (frozen, report) = train_savi(&m, &train, &val, &optim, Some(&curve)).unwrap();
    assert!(frozen.is_frozen());
    assert!(frozen.store().vars().is_empty());
    assert_eq!(report.curve.len(), 4);
    assert!(report.curve.iter().filter(|r| r.val_loss.is_some()).count() == 2);
    assert!(curve.exists());

    let ckpt = dir.path().join("savi");
    let meta = save_checkpoint(&frozen, Some(&optim), Some(&report), &ckpt).unwrap();
    let loaded = load_frozen(&ckpt, &Device::Cpu).unwrap();
    assert_eq!(loaded.store().hash().unwrap(), meta.param_hash);
    assert!(loaded.is_frozen());
}
