//! Gradient checks over every block type, shared by the command line and the
//! test suites.

use crate::collab::{CommLayer, CommVariant};
use crate::error::Result;
use crate::nets::{Attention, Conv, Init, Norm, Prompt, ResBlock, UNet, UNetConfig};
use crate::rng::Rng;
use crate::tensor::{grad_check_params, Ctx, GradCheckOptions, ParamStore, Tensor, Var};
use crate::vae::{Vae, VaeConfig};

pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckResult {
    pub block: String,
    pub error: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.error < GRADCHECK_TOL
    }
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        max_coords_per_leaf: Some(4),
        seed,
        ..Default::default()
    }
}

fn square_mean(cx: &mut Ctx<'_, f64>, y: Var) -> Result<Var> {
    let y2 = cx.mul(y, y)?;
    Ok(cx.mean(y2))
}

/// Randomizes zero-initialized weights so no gradient path is trivially zero.
fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for (_, p) in store.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value = Tensor::randn(p.value.shape(), 0.3, rng);
        }
    }
}

/// Runs every check in 64-bit arithmetic.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let rng = Rng::new(seed);
    let mut out = Vec::new();
    let mut push = |block: &str, error: f64| {
        out.push(GradCheckResult {
            block: block.to_string(),
            error,
        })
    };
    let mut r = rng.fork_named("inputs");
    let x = Tensor::<f64>::randn(&[2, 4, 4, 4], 1.0, &mut r);

    let mut store = ParamStore::new();
    let conv = Conv::new(&mut store, "conv", 4, 6, 3, 2, Init::Fan, &mut r);
    randomize(&mut store, &mut r);
    push(
        "conv",
        grad_check_params(
            &store,
            |cx| {
                let xv = cx.input(x.clone());
                let y = conv.forward(cx, xv)?;
                square_mean(cx, y)
            },
            &opts(seed),
        )?,
    );

    for (name, groups) in [("group_norm", Some(2)), ("layer_norm", None)] {
        let mut store = ParamStore::new();
        let norm = Norm::new(&mut store, name, 4, groups);
        for (_, p) in store.iter_mut() {
            p.value = Tensor::randn(p.value.shape(), 1.0, &mut r);
        }
        let w = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r);
        push(
            name,
            grad_check_params(
                &store,
                |cx| {
                    let xv = cx.input(x.clone());
                    let y = norm.forward(cx, xv)?;
                    let wv = cx.input(w.clone());
                    let y = cx.mul(y, wv)?;
                    Ok(cx.mean(y))
                },
                &opts(seed),
            )?,
        );
    }

    let mut store = ParamStore::new();
    let block = ResBlock::new(&mut store, "res", 4, 8, 4, 2, &mut r);
    let e = Tensor::randn(&[2, 4, 1, 1], 1.0, &mut r);
    push(
        "resblock",
        grad_check_params(
            &store,
            |cx| {
                let (xv, ev) = (cx.input(x.clone()), cx.input(e.clone()));
                let y = block.forward(cx, xv, ev)?;
                square_mean(cx, y)
            },
            &opts(seed),
        )?,
    );

    let mut store = ParamStore::new();
    let sa = Attention::new(&mut store, "sa", 4, None, 2, Init::Fan, &mut r);
    let ca = Attention::new(&mut store, "ca", 4, Some(5), 2, Init::Fan, &mut r);
    let ctx = Tensor::randn(&[2, 5, 3, 1], 1.0, &mut r);
    push(
        "self_attention",
        grad_check_params(
            &store,
            |cx| {
                let xv = cx.input(x.clone());
                let y = sa.forward(cx, xv, None)?;
                square_mean(cx, y)
            },
            &opts(seed),
        )?,
    );
    push(
        "cross_attention",
        grad_check_params(
            &store,
            |cx| {
                let (xv, cv) = (cx.input(x.clone()), cx.input(ctx.clone()));
                let y = ca.forward(cx, xv, Some(cv))?;
                square_mean(cx, y)
            },
            &opts(seed),
        )?,
    );

    for (name, variant) in [
        ("comm_linear_zero", CommVariant::LinearZero),
        ("comm_mlp4", CommVariant::Mlp4),
        ("comm_global_attention", CommVariant::GlobalAttention),
    ] {
        let mut store = ParamStore::new();
        let layer = CommLayer::new(&mut store, "comm", variant, 4, 4, 4, &mut r);
        randomize(&mut store, &mut r);
        let b = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r);
        push(
            name,
            grad_check_params(
                &store,
                |cx| {
                    let (xv, bv) = (cx.input(x.clone()), cx.input(b.clone()));
                    let (dr, dp) = layer.forward(cx, xv, bv)?;
                    let (a, b) = (square_mean(cx, dr)?, square_mean(cx, dp)?);
                    cx.add(a, b)
                },
                &opts(seed),
            )?,
        );
    }

    let vcfg = VaeConfig {
        in_channels: 2,
        latent_channels: 2,
        factor: 2,
        width: 4,
        groups: 2,
        kl_weight: 0.1,
    };
    let vae = Vae::<f64>::new(&vcfg, &mut r)?;
    let xi = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut r);
    let noise_seed = r.next_u64();
    push(
        "vae",
        grad_check_params(
            &vae.store,
            |cx| {
                let xv = cx.input(xi.clone());
                Ok(vae.loss(cx, xv, &mut Rng::new(noise_seed))?.total)
            },
            &opts(seed),
        )?,
    );

    let ucfg = UNetConfig {
        in_channels: 2,
        out_channels: 2,
        base_width: 4,
        channel_mults: vec![1, 2],
        attention_levels: vec![true, true],
        groups: 2,
        head_dim: 4,
        embed_width: 4,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let net = UNet::new(&ucfg, "", &mut store, &mut r)?;
    randomize(&mut store, &mut r);
    let xu = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut r);
    push(
        "unet_2_level_8x8",
        grad_check_params(
            &store,
            |cx| {
                let xv = cx.input(xu.clone());
                let y = net.predict(cx, xv, &[7], Some(Prompt::Tokens(&[[1, 5, 9]])))?;
                square_mean(cx, y)
            },
            &GradCheckOptions {
                max_coords_per_leaf: Some(2),
                seed,
                ..Default::default()
            },
        )?,
    );
    Ok(out)
}
