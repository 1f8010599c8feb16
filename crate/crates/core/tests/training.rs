mod common;

use collab_core::collab::{CollabConfig, DualBranchModel, WiringMode, RGB_PREFIX};
use collab_core::diffusion::{make_schedule, ScheduleKind};
use collab_core::nets::UNet;
use collab_core::tensor::Ctx;
use collab_core::training::{joint_loss, train_collab, LoopConfig, PbrCodec, TrainData};
use collab_core::{ParamStore, Rng, Tensor};

fn data() -> TrainData<f32> {
    let tmp = tempfile::tempdir().unwrap();
    let ds = common::tiny_dataset(tmp.path());
    let recs: Vec<_> = ds.records.iter().collect();
    TrainData::from_records(&recs, &PbrCodec::Pixel).unwrap()
}

fn fresh_base(rng: &mut Rng) -> ParamStore<f32> {
    let mut base = ParamStore::new();
    UNet::new(&common::tiny_unet(), RGB_PREFIX, &mut base, rng).unwrap();
    base
}

fn model(wiring: WiringMode, rng: &mut Rng) -> DualBranchModel<f32> {
    let base = fresh_base(rng);
    let config = CollabConfig {
        wiring,
        ..Default::default()
    };
    DualBranchModel::new(&common::tiny_unet(), &base, &config, rng).unwrap()
}

#[test]
fn loss_at_init_is_two_unit_mse_terms() {
    let data = data();
    let mut rng = Rng::new(1);
    let m = model(WiringMode::Bidirectional, &mut rng);
    let schedule = make_schedule(ScheduleKind::Linear, 64, false).unwrap();
    let mut total = 0.0;
    for _ in 0..100 {
        let batch = data.sample(4, &mut rng).unwrap();
        let mut cx = Ctx::new(&m.store);
        let l = joint_loss(&m, &mut cx, &batch, &schedule, &mut rng).unwrap();
        total += cx.value(l.total).item() as f64;
    }
    let mean = total / 100.0;
    assert!((mean - 2.0).abs() < 0.4, "mean initial loss {mean}");
}

fn rgb_loss_grad_norm(m: &DualBranchModel<f32>, data: &TrainData<f32>, rng: &mut Rng) -> f64 {
    let schedule = make_schedule(ScheduleKind::Linear, 16, true).unwrap();
    let batch = data.sample(2, rng).unwrap();
    let mut cx = Ctx::new(&m.store);
    let l = joint_loss(m, &mut cx, &batch, &schedule, rng).unwrap();
    let g = cx.backward(l.rgb).unwrap();
    cx.param_grads(&g)
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|&v| (v as f64).abs())
        .sum()
}

#[test]
fn one_way_rgb_loss_sends_no_gradient_to_trainable_params() {
    let data = data();
    let mut rng = Rng::new(2);
    for (wiring, expect_zero) in [(WiringMode::OneWay, true), (WiringMode::Bidirectional, false)] {
        let mut m = model(wiring, &mut rng);
        for (_, p) in m.store.iter_mut() {
            if p.value.data().iter().all(|&v| v == 0.0) {
                p.value = Tensor::randn(p.value.shape(), 0.1, &mut rng);
            }
        }
        let norm = rgb_loss_grad_norm(&m, &data, &mut rng);
        assert_eq!(norm == 0.0, expect_zero, "{wiring:?}: {norm}");
    }
}

#[test]
fn training_moves_only_trainable_params() {
    let data = data();
    let mut rng = Rng::new(3);
    let mut m = model(WiringMode::Bidirectional, &mut rng);
    let before = m.store.clone();
    let hash = m.frozen_hash();
    let schedule = make_schedule(ScheduleKind::Linear, 16, true).unwrap();
    let lc = LoopConfig {
        steps: 20,
        batch_size: 2,
        lr: 1e-3,
        ..Default::default()
    };
    let mut seen = Vec::new();
    let logs = train_collab(&mut m, &data, &lc, &schedule, 3, &mut |log, store| {
        seen.push(store.frozen_hash());
        assert_eq!(log.frozen_hash, hash);
        Ok(())
    })
    .unwrap();
    assert_eq!(logs.len(), 20);
    assert!(seen.iter().all(|h| *h == hash));
    for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
        let moved = !a.value.bitwise_eq(&b.value);
        if a.name.starts_with(RGB_PREFIX) {
            assert!(!moved, "{} moved", a.name);
        }
        if a.name.starts_with("comm.") && a.name.ends_with(".w") {
            assert!(moved, "{} received no update", a.name);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = data();
    let run = || {
        let mut rng = Rng::new(4);
        let mut m = model(WiringMode::Clockwise, &mut rng);
        let schedule = make_schedule(ScheduleKind::Linear, 16, true).unwrap();
        let lc = LoopConfig {
            steps: 5,
            batch_size: 2,
            ..Default::default()
        };
        let logs = train_collab(&mut m, &data, &lc, &schedule, 9, &mut |_, _| Ok(())).unwrap();
        (logs, m.store)
    };
    let (l1, s1) = run();
    let (l2, s2) = run();
    assert_eq!(l1, l2);
    for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
        assert!(a.value.bitwise_eq(&b.value));
    }
}
