mod common;

use collab_core::collab::{CollabConfig, CommVariant, DualBranchModel, WiringMode, RGB_PREFIX};
use collab_core::nets::{Prompt, UNet};
use collab_core::tensor::Ctx;
use collab_core::{ParamStore, Rng, Tensor};
use proptest::prelude::*;

struct Fixture {
    net: UNet,
    base: ParamStore<f32>,
    models: Vec<DualBranchModel<f32>>,
}

fn fixture() -> Fixture {
    let mut rng = Rng::new(21);
    let mut base = ParamStore::new();
    let net = UNet::new(&common::tiny_unet(), RGB_PREFIX, &mut base, &mut rng).unwrap();
    for (_, p) in base.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value = Tensor::randn(p.value.shape(), 0.2, &mut rng);
        }
    }
    let mut models = Vec::new();
    for wiring in [WiringMode::Bidirectional, WiringMode::OneWay, WiringMode::Clockwise] {
        for comm in [CommVariant::LinearZero, CommVariant::Mlp4, CommVariant::GlobalAttention] {
            let config = CollabConfig {
                wiring,
                comm,
                pbr_prompt_attention: comm == CommVariant::Mlp4,
                ..Default::default()
            };
            models.push(DualBranchModel::new(&common::tiny_unet(), &base, &config, &mut rng).unwrap());
        }
    }
    Fixture { net, base, models }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fresh_model_reproduces_the_base(seed in any::<u64>(), t in 1usize..=64, which in 0usize..9, word in 0usize..4) {
        thread_local!(static FIX: Fixture = fixture());
        FIX.with(|f| {
            let mut rng = Rng::new(seed);
            let zr = Tensor::<f32>::randn(&[1, 3, 16, 16], 1.0, &mut rng);
            let zp = Tensor::<f32>::randn(&[1, 8, 16, 16], 1.0, &mut rng);
            let cond = Tensor::<f32>::randn(&[1, 4, 16, 16], 1.0, &mut rng);
            let tokens = [[word, 4 + word, 9 + word]];
            let m = &f.models[which];
            let mut cx = Ctx::new(&m.store);
            let (a, b, c) = (cx.input(zr.clone()), cx.input(zp), cx.input(cond));
            let (pr, pp) = m.dual_forward(&mut cx, a, b, c, &[t], &tokens).unwrap();
            prop_assert_eq!(cx.value(pp).shape(), &[1, 8, 16, 16]);
            let dual = cx.value(pr).clone();
            let mut cx = Ctx::new(&f.base);
            let x = cx.input(zr);
            let alone = f.net.predict(&mut cx, x, &[t], Some(Prompt::Tokens(&tokens))).unwrap();
            prop_assert!(dual.bitwise_eq(cx.value(alone)));
            Ok(())
        })?;
    }
}

#[test]
fn every_variant_has_frozen_rgb_and_trainable_rest() {
    let f = fixture();
    for m in &f.models {
        for (_, p) in m.store.iter() {
            assert_eq!(p.trainable, !p.name.starts_with(RGB_PREFIX), "{}", p.name);
        }
        assert_eq!(m.comm.len(), m.rgb.sites().len());
    }
}
