//! Optimization loops for the base network, the joint model, the
//! fine-tuning baselines and the autoencoders.

mod config;
mod data;
pub mod pipeline;

use serde::{Deserialize, Serialize};

use crate::collab::{DualBranchModel, FinetuneModel, RGB_PREFIX};
use crate::diffusion::{convert_parameterization, ddpm_step, q_sample, target, DiffusionSchedule, StepNoise};
use crate::error::{Error, Result};
use crate::nets::{Prompt, UNet, UNetConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Ctx, ParamId, ParamStore, Tensor, Var};
use crate::vae::Vae;

pub use config::{
    apply_override, resolve_key, DiffusionConfig, EvalConfig, ExperimentConfig, InterpConfig, InterpKind, LoopConfig,
    MetricKind, ModelKind, SampleConfig, DESK_LR, REFERENCE_BATCH,
};
pub use data::{Batch, PbrCodec, TrainData};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub loss_rgb: f64,
    pub loss_pbr: f64,
    pub lr: f64,
    pub frozen_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
}

/// Result of one forward/backward pass.
pub struct StepOutput<S> {
    pub loss: f64,
    pub loss_rgb: f64,
    pub loss_pbr: f64,
    pub recon: Option<f64>,
    pub kl: Option<f64>,
    pub grads: Vec<(ParamId, Vec<S>)>,
}

/// Per-step callback; sees the log line and the updated parameters.
pub type StepSink<'a, S> = dyn FnMut(&StepLog, &ParamStore<S>) -> Result<()> + 'a;

/// Runs `cfg.steps` Adam steps. Each step calls `step` for the loss and
/// gradients; a non-finite loss or gradient stops the run.
pub fn optimize<S: Scalar, F>(
    store: &mut ParamStore<S>,
    cfg: &LoopConfig,
    seed: u64,
    rng: &mut Rng,
    mut step: F,
    sink: &mut StepSink<'_, S>,
) -> Result<Vec<StepLog>>
where
    F: FnMut(&ParamStore<S>, &mut Rng) -> Result<StepOutput<S>>,
{
    cfg.validate("loop")?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        store,
    );
    let mut logs = Vec::with_capacity(cfg.steps);
    for i in 0..cfg.steps {
        let out = step(store, rng)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged {
                step: i,
                seed,
                what: format!("loss {}", out.loss),
            });
        }
        adam.step(store, &out.grads).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged { step: i, seed, what },
            e => e,
        })?;
        let log = StepLog {
            step: i,
            loss: out.loss,
            loss_rgb: out.loss_rgb,
            loss_pbr: out.loss_pbr,
            lr: cfg.lr,
            frozen_hash: store.frozen_hash(),
            recon: out.recon,
            kl: out.kl,
        };
        sink(&log, store)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Uniform timesteps in `1..=T`.
pub fn draw_timesteps(n: usize, schedule: &DiffusionSchedule, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| 1 + rng.below(schedule.steps())).collect()
}

/// Noisy input and regression target for one chain.
pub fn noised<S: Scalar>(
    x0: &Tensor<S>,
    ts: &[usize],
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    Ok((q_sample(x0, ts, &eps, schedule)?, target(x0, ts, &eps, schedule)?))
}

#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub rgb: Var,
    pub pbr: Var,
}

/// `MSE(pred_rgb, target_rgb) + MSE(pred_pbr, target_pbr)` at a shared
/// per-item timestep with independent noise per chain.
pub fn joint_loss<S: Scalar>(
    model: &DualBranchModel<S>,
    cx: &mut Ctx<'_, S>,
    batch: &Batch<S>,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<JointLoss> {
    let ts = draw_timesteps(batch.tokens.len(), schedule, rng);
    let (zr, tr) = noised(&batch.rgb, &ts, schedule, rng)?;
    let (zp, tp) = noised(&batch.pbr, &ts, schedule, rng)?;
    let (zr, zp, c) = (cx.input(zr), cx.input(zp), cx.input(batch.cond.clone()));
    let (pr, pp) = model.dual_forward(cx, zr, zp, c, &ts, &batch.tokens)?;
    let (tr, tp) = (cx.input(tr), cx.input(tp));
    let rgb = cx.mse(pr, tr)?;
    let pbr = cx.mse(pp, tp)?;
    Ok(JointLoss {
        total: cx.add(rgb, pbr)?,
        rgb,
        pbr,
    })
}

fn finish_step<S: Scalar>(cx: &Ctx<'_, S>, total: Var, rgb: f64, pbr: f64) -> Result<StepOutput<S>> {
    let loss = cx.value(total).item().as_f64();
    let grads = if loss.is_finite() {
        let g = cx.backward(total)?;
        cx.param_grads(&g)
    } else {
        Vec::new()
    };
    Ok(StepOutput {
        loss,
        loss_rgb: rgb,
        loss_pbr: pbr,
        recon: None,
        kl: None,
        grads,
    })
}

/// Trains an RGB-only UNet on rendered images and prompts, stored under
/// the `rgb.` prefix.
pub fn pretrain_rgb_base<S: Scalar>(
    config: &UNetConfig,
    data: &TrainData<S>,
    cfg: &LoopConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
    sink: &mut StepSink<'_, S>,
) -> Result<(UNet, ParamStore<S>, Vec<StepLog>)> {
    if config.in_channels != 3 || config.out_channels != 3 || !config.cross_attention {
        return Err(Error::Config(
            "base network must map RGB to RGB with prompt attention".into(),
        ));
    }
    let root = Rng::new(seed).fork_named("pretrain");
    let mut store = ParamStore::new();
    let net = UNet::new(config, RGB_PREFIX, &mut store, &mut root.fork_named("init"))?;
    let mut rng = root.fork_named("steps");
    let logs = optimize(
        &mut store,
        cfg,
        seed,
        &mut rng,
        |store, rng| {
            let batch = data.sample(cfg.batch_size, rng)?;
            let ts = draw_timesteps(batch.tokens.len(), schedule, rng);
            let (z, t) = noised(&batch.rgb, &ts, schedule, rng)?;
            let mut cx = Ctx::new(store);
            let zv = cx.input(z);
            let pred = net.predict(&mut cx, zv, &ts, Some(Prompt::Tokens(&batch.tokens)))?;
            let tv = cx.input(t);
            let loss = cx.mse(pred, tv)?;
            let l = cx.value(loss).item().as_f64();
            finish_step(&cx, loss, l, 0.0)
        },
        sink,
    )?;
    Ok((net, store, logs))
}

/// Trains the PBR branch and communication layers; the base stays frozen.
pub fn train_collab<S: Scalar>(
    model: &mut DualBranchModel<S>,
    data: &TrainData<S>,
    cfg: &LoopConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
    sink: &mut StepSink<'_, S>,
) -> Result<Vec<StepLog>> {
    let mut rng = Rng::new(seed).fork_named("collab");
    let mut store = std::mem::take(&mut model.store);
    let result = optimize(
        &mut store,
        cfg,
        seed,
        &mut rng,
        |store, rng| {
            let batch = data.sample(cfg.batch_size, rng)?;
            let mut cx = Ctx::new(store);
            let l = joint_loss(model, &mut cx, &batch, schedule, rng)?;
            let (r, p) = (cx.value(l.rgb).item().as_f64(), cx.value(l.pbr).item().as_f64());
            finish_step(&cx, l.total, r, p)
        },
        sink,
    );
    model.store = store;
    result
}

/// Input of the fine-tuning baseline: noisy PBR, optional noisy RGB, then
/// conditioning.
fn finetune_input<S: Scalar>(
    cx: &mut Ctx<'_, S>,
    zp: Tensor<S>,
    zr: Option<Tensor<S>>,
    cond: &Tensor<S>,
) -> Result<Var> {
    let mut parts = vec![cx.input(zp)];
    if let Some(zr) = zr {
        parts.push(cx.input(zr));
    }
    parts.push(cx.input(cond.clone()));
    cx.concat1(&parts)
}

pub fn train_finetune<S: Scalar>(
    model: &mut FinetuneModel<S>,
    data: &TrainData<S>,
    cfg: &LoopConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
    sink: &mut StepSink<'_, S>,
) -> Result<Vec<StepLog>> {
    if data.pbr.shape()[2..] != data.rgb.shape()[2..] {
        return Err(Error::Config("fine-tuning baselines run in pixel space only".into()));
    }
    let mut rng = Rng::new(seed).fork_named("finetune");
    let mut store = std::mem::take(&mut model.store);
    let (net, with_rgb) = (&model.net, model.with_rgb_output);
    let pc = data.pbr.shape()[1];
    let result = optimize(
        &mut store,
        cfg,
        seed,
        &mut rng,
        |store, rng| {
            let batch = data.sample(cfg.batch_size, rng)?;
            let ts = draw_timesteps(batch.tokens.len(), schedule, rng);
            let (zp, tp) = noised(&batch.pbr, &ts, schedule, rng)?;
            let rgb = if with_rgb {
                Some(noised(&batch.rgb, &ts, schedule, rng)?)
            } else {
                None
            };
            let mut cx = Ctx::new(store);
            let (zr, tr) = match rgb {
                Some((z, t)) => (Some(z), Some(t)),
                None => (None, None),
            };
            let x = finetune_input(&mut cx, zp, zr, &batch.cond)?;
            let pred = net.predict(&mut cx, x, &ts, Some(Prompt::Tokens(&batch.tokens)))?;
            let pp = cx.narrow1(pred, 0, pc)?;
            let tpv = cx.input(tp);
            let lp = cx.mse(pp, tpv)?;
            let (total, lr) = match tr {
                Some(tr) => {
                    let pr = cx.narrow1(pred, pc, 3)?;
                    let trv = cx.input(tr);
                    let lr = cx.mse(pr, trv)?;
                    (cx.add(lp, lr)?, cx.value(lr).item().as_f64())
                }
                None => (lp, 0.0),
            };
            let p = cx.value(lp).item().as_f64();
            finish_step(&cx, total, lr, p)
        },
        sink,
    );
    model.store = store;
    result
}

/// Trains an autoencoder on `(M, C, H, W)` images.
pub fn train_vae<S: Scalar>(
    vae: &mut Vae<S>,
    images: &Tensor<S>,
    cfg: &LoopConfig,
    seed: u64,
    sink: &mut StepSink<'_, S>,
) -> Result<Vec<StepLog>> {
    let m = images.shape()[0];
    if m == 0 {
        return Err(Error::invalid("no images"));
    }
    let mut rng = Rng::new(seed).fork_named("vae");
    let shadow = vae.clone();
    let mut store = std::mem::take(&mut vae.store);
    let result = optimize(
        &mut store,
        cfg,
        seed,
        &mut rng,
        |store, rng| {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(m)).collect();
            let x = images.gather0(&idx)?;
            let mut cx = Ctx::new(store);
            let xv = cx.input(x);
            let l = shadow.loss(&mut cx, xv, rng)?;
            let mut out = finish_step(&cx, l.total, 0.0, 0.0)?;
            out.recon = Some(cx.value(l.recon).item().as_f64());
            out.kl = Some(cx.value(l.kl).item().as_f64());
            Ok(out)
        },
        sink,
    );
    vae.store = store;
    result
}

/// Ancestral sampling of the base network alone; returns signed images.
pub fn sample_base<S: Scalar>(
    net: &UNet,
    store: &ParamStore<S>,
    tokens: &[[usize; 3]],
    resolution: usize,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    let mut z = Tensor::randn(&[tokens.len(), 3, resolution, resolution], 1.0, rng);
    for t in (1..=schedule.steps()).rev() {
        let pred = {
            let mut cx = Ctx::new(store);
            let zv = cx.input(z.clone());
            let p = net.predict(&mut cx, zv, &[t], Some(Prompt::Tokens(tokens)))?;
            cx.value(p).clone()
        };
        z = ddpm_step(&pred, &z, t, schedule, StepNoise::Fresh(rng))?;
    }
    Ok(z)
}

/// Ancestral sampling of a fine-tuning baseline; returns signed PBR and,
/// when the model has an RGB head, signed RGB.
pub fn sample_finetune<S: Scalar>(
    model: &FinetuneModel<S>,
    cond: &Tensor<S>,
    tokens: &[[usize; 3]],
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
    let s = cond.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let pc = crate::shading::PBR_CHANNELS;
    let mut zp = Tensor::randn(&[n, pc, h, w], 1.0, rng);
    let mut zr = model.with_rgb_output.then(|| Tensor::randn(&[n, 3, h, w], 1.0, rng));
    for t in (1..=schedule.steps()).rev() {
        let pred = {
            let mut cx = Ctx::new(&model.store);
            let x = finetune_input(&mut cx, zp.clone(), zr.clone(), cond)?;
            let p = model.net.predict(&mut cx, x, &[t], Some(Prompt::Tokens(tokens)))?;
            cx.value(p).clone()
        };
        zp = ddpm_step(&pred.narrow1(0, pc)?, &zp, t, schedule, StepNoise::Fresh(rng))?;
        if let Some(z) = zr.as_mut() {
            *z = ddpm_step(&pred.narrow1(pc, 3)?, z, t, schedule, StepNoise::Fresh(rng))?;
        }
    }
    Ok((zp, zr))
}

/// `x0` estimate from a prediction, for diagnostics.
pub fn x0_estimate<S: Scalar>(
    pred: &Tensor<S>,
    z_t: &Tensor<S>,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<S>> {
    convert_parameterization(
        pred,
        z_t,
        &[t],
        schedule,
        schedule.parameterization,
        crate::diffusion::Prediction::Sample,
    )
}

/// Mean of `logs[range].loss`.
pub fn mean_loss(logs: &[StepLog], range: std::ops::Range<usize>) -> f64 {
    let slice = &logs[range.start.min(logs.len())..range.end.min(logs.len())];
    slice.iter().map(|l| l.loss).sum::<f64>() / slice.len().max(1) as f64
}
