//! Ancestral sampling of both chains at a shared timestep.

use super::{DualBranchModel, JointPrompt, COND_CHANNELS};
use crate::diffusion::{convert_parameterization, ddpm_step, posterior_step, DiffusionSchedule, Prediction, StepNoise};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shading::{PbrStack, PBR_CHANNELS};
use crate::tensor::{Ctx, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleOptions {
    /// Number of initial reverse steps whose RGB `x0` estimate is multiplied
    /// by the foreground mask.
    pub mask_projection_steps: usize,
}

/// Final states of both chains in model space (signed RGB, PBR signed
/// stack or latent).
#[derive(Clone, Debug)]
pub struct JointSample<S> {
    pub rgb: Tensor<S>,
    pub pbr: Tensor<S>,
    pub masked_steps: usize,
}

/// `m (x + 1) - 1`: masks an image in `[-1, 1]` towards black.
fn project_to_mask<S: Scalar>(x0: &mut Tensor<S>, cond: &Tensor<S>) {
    let s = x0.shape().to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mask = cond.data();
    for i in 0..n {
        let m = &mask[(i * COND_CHANNELS + 3) * hw..(i * COND_CHANNELS + 4) * hw];
        for ch in 0..c {
            let plane = &mut x0.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            for (v, &mv) in plane.iter_mut().zip(m) {
                *v = mv * (*v + S::one()) - S::one();
            }
        }
    }
}

pub fn sample_joint_raw<S: Scalar>(
    model: &DualBranchModel<S>,
    cond: &Tensor<S>,
    tokens: &[[usize; 3]],
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
    options: SampleOptions,
) -> Result<JointSample<S>> {
    let (z_rgb, z_pbr) = initial_noise(model, cond, rng)?;
    sample_joint_from(
        model,
        cond,
        JointPrompt::Tokens(tokens),
        z_rgb,
        z_pbr,
        schedule,
        rng,
        options,
    )
}

/// Standard normal starting states for both chains.
pub fn initial_noise<S: Scalar>(
    model: &DualBranchModel<S>,
    cond: &Tensor<S>,
    rng: &mut Rng,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let s = cond.shape();
    if s.len() != 4 || s[1] != COND_CHANNELS {
        return Err(Error::shape("sample_joint condition", &[0, COND_CHANNELS, 0, 0], s));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let f = model.config.factor();
    if h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!("resolution {h}x{w} not divisible by {f}")));
    }
    let z_rgb = Tensor::randn(&[n, 3, h, w], 1.0, rng);
    let z_pbr = Tensor::randn(&[n, model.config.pbr_channels(), h / f, w / f], 1.0, rng);
    Ok((z_rgb, z_pbr))
}

/// Runs both reverse chains from the given starting states.
#[allow(clippy::too_many_arguments)]
pub fn sample_joint_from<S: Scalar>(
    model: &DualBranchModel<S>,
    cond: &Tensor<S>,
    prompt: JointPrompt<'_>,
    mut z_rgb: Tensor<S>,
    mut z_pbr: Tensor<S>,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
    options: SampleOptions,
) -> Result<JointSample<S>> {
    let steps = schedule.steps();
    if options.mask_projection_steps > steps {
        return Err(Error::invalid(format!(
            "mask_projection_steps {} exceeds {steps} steps",
            options.mask_projection_steps
        )));
    }
    let s = cond.shape();
    if s.len() != 4 || s[1] != COND_CHANNELS || s[0] != prompt.len() {
        return Err(Error::shape(
            "sample_joint condition",
            &[prompt.len(), COND_CHANNELS],
            s,
        ));
    }
    let mut masked = 0;
    for (k, t) in (1..=steps).rev().enumerate() {
        let (pr, pp) = {
            let mut cx = Ctx::new(&model.store);
            let (a, b, c) = (cx.input(z_rgb.clone()), cx.input(z_pbr.clone()), cx.input(cond.clone()));
            let (pr, pp) = model.dual_forward_with(&mut cx, a, b, c, &[t], prompt)?;
            (cx.value(pr).clone(), cx.value(pp).clone())
        };
        if !pr.all_finite() || !pp.all_finite() {
            return Err(Error::NonFinite(format!("sampler prediction at t = {t}")));
        }
        let mut x0 = convert_parameterization(
            &pr,
            &z_rgb,
            &[t],
            schedule,
            schedule.parameterization,
            Prediction::Sample,
        )?;
        if k < options.mask_projection_steps {
            project_to_mask(&mut x0, cond);
            masked += 1;
        }
        z_rgb = posterior_step(&x0, &z_rgb, t, schedule, StepNoise::Fresh(rng))?;
        z_pbr = ddpm_step(&pp, &z_pbr, t, schedule, StepNoise::Fresh(rng))?;
    }
    Ok(JointSample {
        rgb: z_rgb,
        pbr: z_pbr,
        masked_steps: masked,
    })
}

/// Samples and maps to images: RGB clamped to `[0, 1]`, PBR projected onto
/// valid ranges with unit foreground bumps. Latent chains need `decode`,
/// which must return signed `(N, 8, H, W)` stacks.
#[allow(clippy::type_complexity)]
pub fn sample_joint<S: Scalar>(
    model: &DualBranchModel<S>,
    cond: &Tensor<S>,
    tokens: &[[usize; 3]],
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
    options: SampleOptions,
    decode: Option<&dyn Fn(&Tensor<S>) -> Result<Tensor<S>>>,
) -> Result<(Vec<Raster>, Vec<PbrStack>)> {
    let out = sample_joint_raw(model, cond, tokens, schedule, rng, options)?;
    to_images(model, cond, &out, decode)
}

/// Maps a raw joint sample to images as [`sample_joint`] does.
#[allow(clippy::type_complexity)]
pub fn to_images<S: Scalar>(
    model: &DualBranchModel<S>,
    cond: &Tensor<S>,
    out: &JointSample<S>,
    decode: Option<&dyn Fn(&Tensor<S>) -> Result<Tensor<S>>>,
) -> Result<(Vec<Raster>, Vec<PbrStack>)> {
    let pbr = match decode {
        Some(d) => d(&out.pbr)?,
        None if model.config.factor() == 1 && model.config.pbr_channels() == PBR_CHANNELS => out.pbr.clone(),
        None => return Err(Error::invalid("latent PBR chain needs a decoder")),
    };
    let n = cond.shape()[0];
    let mut rgbs = Vec::with_capacity(n);
    let mut stacks = Vec::with_capacity(n);
    for i in 0..n {
        let mut rgb = Raster::from_tensor(&out.rgb, i)?;
        rgb.data
            .iter_mut()
            .for_each(|v| *v = ((*v + 1.0) * 0.5).clamp(0.0, 1.0));
        rgbs.push(rgb);
        let c = Raster::from_tensor(cond, i)?;
        stacks.push(PbrStack::from_signed(&Raster::from_tensor(&pbr, i)?, c.plane(3))?);
    }
    Ok((rgbs, stacks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::{CollabConfig, RGB_PREFIX};
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::nets::{UNet, UNetConfig};
    use crate::tensor::ParamStore;

    fn model(config: &CollabConfig) -> DualBranchModel<f32> {
        let cfg = UNetConfig {
            channel_mults: vec![1, 2],
            attention_levels: vec![false, true],
            ..Default::default()
        };
        let mut params = ParamStore::new();
        let mut rng = Rng::new(1);
        UNet::new(&cfg, RGB_PREFIX, &mut params, &mut rng).unwrap();
        for (_, p) in params.iter_mut() {
            p.value = Tensor::randn(p.value.shape(), 0.2, &mut rng);
        }
        DualBranchModel::new(&cfg, &params, config, &mut rng).unwrap()
    }

    fn cond(mask: f32) -> Tensor<f32> {
        let mut c = Tensor::randn(&[2, 4, 8, 8], 0.5, &mut Rng::new(9));
        for i in 0..2 {
            c.data_mut()[(i * 4 + 3) * 64..(i * 4 + 4) * 64].fill(mask);
        }
        c
    }

    #[test]
    fn full_projection_with_empty_mask_gives_black() {
        let m = model(&CollabConfig::default());
        let s = make_schedule(ScheduleKind::Linear, 2, true).unwrap();
        let tokens = [[0, 4, 8], [1, 5, 9]];
        let opts = SampleOptions {
            mask_projection_steps: 2,
        };
        let (rgb, pbr) = sample_joint(&m, &cond(0.0), &tokens, &s, &mut Rng::new(3), opts, None).unwrap();
        assert!(rgb.iter().all(|r| r.data.iter().all(|&v| v == 0.0)));
        for p in &pbr {
            p.validate(&[0.0; 64]).unwrap();
        }
    }

    #[test]
    fn sampling_is_deterministic_and_mask_free_at_zero() {
        // One-way wiring keeps the RGB chain away from the PBR input, so
        // with k = 0 nothing on the RGB side can see the mask.
        let m = model(&CollabConfig {
            wiring: crate::collab::WiringMode::OneWay,
            ..Default::default()
        });
        let s = make_schedule(ScheduleKind::Linear, 4, true).unwrap();
        let tokens = [[0, 4, 8], [1, 5, 9]];
        let run = |mask: f32, k| {
            let opts = SampleOptions {
                mask_projection_steps: k,
            };
            sample_joint_raw(&m, &cond(mask), &tokens, &s, &mut Rng::new(3), opts).unwrap()
        };
        let a = run(0.0, 0);
        let b = run(1.0, 0);
        assert_eq!(a.masked_steps, 0);
        assert!(a.rgb.bitwise_eq(&b.rgb));
        let a2 = run(0.0, 0);
        assert!(a.rgb.bitwise_eq(&a2.rgb) && a.pbr.bitwise_eq(&a2.pbr));
        let c = run(0.0, 3);
        assert_eq!(c.masked_steps, 3);
        assert!(!c.rgb.bitwise_eq(&a.rgb));
        let too_many = SampleOptions {
            mask_projection_steps: 5,
        };
        assert!(sample_joint_raw(&m, &cond(1.0), &tokens, &s, &mut Rng::new(3), too_many).is_err());
    }
}
