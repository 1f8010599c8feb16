//! A frozen RGB UNet and a trainable PBR UNet run side by side, exchanging
//! residual deltas after every self-attention site.

mod comm;
mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Prompt, UNet, UNetConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shading::{BUMP, METALLIC, PBR_CHANNELS, ROUGHNESS};
use crate::tensor::{Ctx, ParamStore, Tensor, Var};

pub use comm::{CommLayer, CommVariant, WiringMode, MLP_HIDDEN_LAYERS};
pub use sample::{
    initial_noise, sample_joint, sample_joint_from, sample_joint_raw, to_images, JointSample, SampleOptions,
};

/// Conditioning channels appended to the PBR input: normals then mask.
pub const COND_CHANNELS: usize = 4;
pub const RGB_PREFIX: &str = "rgb.";
pub const PBR_PREFIX: &str = "pbr.";
pub const COMM_PREFIX: &str = "comm.";

/// Where the PBR chain runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PbrSpace {
    Pixel,
    /// Latents of a VAE trained on 8-channel stacks.
    PbrVae,
    /// Three RGB-VAE latents of the stack's triplets, concatenated.
    RgbVaeTriplets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollabConfig {
    pub wiring: WiringMode,
    pub comm: CommVariant,
    pub pbr_prompt_attention: bool,
    pub pbr_space: PbrSpace,
    /// Channels of one VAE latent; unused in pixel space.
    pub latent_channels: usize,
    /// VAE downsampling factor; unused in pixel space.
    pub latent_factor: usize,
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            wiring: WiringMode::Bidirectional,
            comm: CommVariant::LinearZero,
            pbr_prompt_attention: false,
            pbr_space: PbrSpace::Pixel,
            latent_channels: 14,
            latent_factor: 4,
        }
    }
}

impl CollabConfig {
    pub fn pbr_channels(&self) -> usize {
        match self.pbr_space {
            PbrSpace::Pixel => PBR_CHANNELS,
            PbrSpace::PbrVae => self.latent_channels,
            PbrSpace::RgbVaeTriplets => 3 * self.latent_channels,
        }
    }

    pub fn factor(&self) -> usize {
        match self.pbr_space {
            PbrSpace::Pixel => 1,
            _ => self.latent_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pbr_space != PbrSpace::Pixel {
            if self.latent_channels == 0 {
                return Err(Error::Config("latent_channels must be positive".into()));
            }
            if !matches!(self.latent_factor, 2 | 4) {
                return Err(Error::Config(format!(
                    "latent_factor {} not in {{2, 4}}",
                    self.latent_factor
                )));
            }
        }
        Ok(())
    }

    pub fn pbr_unet(&self, base: &UNetConfig) -> UNetConfig {
        UNetConfig {
            in_channels: self.pbr_channels() + COND_CHANNELS,
            out_channels: self.pbr_channels(),
            cross_attention: self.pbr_prompt_attention,
            ..base.clone()
        }
    }
}

/// Prompt of a joint forward pass: token triples, or a blend
/// `(1 - lambda) e(a) + lambda e(b)` that each branch forms in its own
/// embedding table.
#[derive(Clone, Copy, Debug)]
pub enum JointPrompt<'a> {
    Tokens(&'a [[usize; 3]]),
    Blend {
        a: &'a [[usize; 3]],
        b: &'a [[usize; 3]],
        lambda: f64,
    },
}

enum BranchPrompt<'a, S> {
    Tokens(&'a [[usize; 3]]),
    Embedded(Tensor<S>),
}

impl<S: Scalar> BranchPrompt<'_, S> {
    fn as_prompt(&self) -> Prompt<'_, S> {
        match self {
            Self::Tokens(t) => Prompt::Tokens(t),
            Self::Embedded(e) => Prompt::Embedded(e),
        }
    }
}

impl<'a> JointPrompt<'a> {
    pub fn len(&self) -> usize {
        match self {
            Self::Tokens(t) => t.len(),
            Self::Blend { a, .. } => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn embed<S: Scalar>(&self, net: &UNet, cx: &mut Ctx<'_, S>) -> Result<BranchPrompt<'a, S>> {
        match *self {
            Self::Tokens(t) => Ok(BranchPrompt::Tokens(t)),
            Self::Blend { a, b, lambda } => {
                if a.len() != b.len() {
                    return Err(Error::invalid("blended prompts differ in batch size"));
                }
                let ea = net.embed_tokens(cx, a)?;
                let eb = net.embed_tokens(cx, b)?;
                let (ea, eb) = (cx.value(ea).clone(), cx.value(eb).clone());
                Ok(BranchPrompt::Embedded(crate::metrics::interp_prompt(&ea, &eb, lambda)?))
            }
        }
    }
}

/// Frozen `rgb.*` parameters, trainable `pbr.*` and `comm.*` parameters, all
/// in one store.
#[derive(Clone, Debug)]
pub struct DualBranchModel<S> {
    pub base: UNetConfig,
    pub config: CollabConfig,
    pub rgb: UNet,
    pub pbr: UNet,
    pub comm: Vec<CommLayer>,
    pub store: ParamStore<S>,
}

impl<S: Scalar> DualBranchModel<S> {
    /// Builds the model around base weights stored under `rgb.`. PBR layers
    /// whose shapes match the base start from the base weights; the rest and
    /// all communication layers start fresh.
    pub fn new(base: &UNetConfig, base_params: &ParamStore<S>, config: &CollabConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if base.in_channels != 3 || base.out_channels != 3 {
            return Err(Error::Config("base network must map RGB to RGB".into()));
        }
        let mut store = ParamStore::new();
        let rgb = UNet::new(base, RGB_PREFIX, &mut store, rng)?;
        let n_rgb = store.len();
        if store.copy_matching(base_params, |n| n.to_string()) != n_rgb {
            return Err(Error::Corrupt("base parameters do not match the base config".into()));
        }
        let pbr = UNet::new(&config.pbr_unet(base), PBR_PREFIX, &mut store, rng)?;
        store.copy_matching(base_params, |n| n.replacen(PBR_PREFIX, RGB_PREFIX, 1));
        if rgb.sites().len() != pbr.sites().len() {
            return Err(Error::invalid(format!(
                "branches have {} and {} sites",
                rgb.sites().len(),
                pbr.sites().len()
            )));
        }
        let comm = rgb
            .sites()
            .iter()
            .zip(pbr.sites())
            .enumerate()
            .map(|(i, (a, b))| {
                CommLayer::new(
                    &mut store,
                    &format!("{COMM_PREFIX}{i}"),
                    config.comm,
                    a.channels,
                    b.channels,
                    base.head_dim,
                    rng,
                )
            })
            .collect();
        store.set_all_trainable(true);
        store.set_trainable_prefix(RGB_PREFIX, false);
        Ok(Self {
            base: base.clone(),
            config: config.clone(),
            rgb,
            pbr,
            comm,
            store,
        })
    }

    /// Runs both branches in lockstep. `z_rgb` is `(N, 3, H, W)`, `cond` is
    /// `(N, 4, H, W)`, `z_pbr` is at `H / factor`.
    pub fn dual_forward(
        &self,
        cx: &mut Ctx<'_, S>,
        z_rgb: Var,
        z_pbr: Var,
        cond: Var,
        ts: &[usize],
        tokens: &[[usize; 3]],
    ) -> Result<(Var, Var)> {
        self.dual_forward_with(cx, z_rgb, z_pbr, cond, ts, JointPrompt::Tokens(tokens))
    }

    /// [`Self::dual_forward`] with a possibly blended prompt.
    pub fn dual_forward_with(
        &self,
        cx: &mut Ctx<'_, S>,
        z_rgb: Var,
        z_pbr: Var,
        cond: Var,
        ts: &[usize],
        prompt: JointPrompt<'_>,
    ) -> Result<(Var, Var)> {
        let f = self.config.factor();
        let (sr, sp, sc) = (
            cx.shape(z_rgb).to_vec(),
            cx.shape(z_pbr).to_vec(),
            cx.shape(cond).to_vec(),
        );
        if sr.len() != 4 || sp.len() != 4 || sc.len() != 4 || sc[1] != COND_CHANNELS || sc[2..] != sr[2..] {
            return Err(Error::shape("dual_forward condition", &sr, &sc));
        }
        if sp[0] != sr[0] || sp[2] * f != sr[2] || sp[3] * f != sr[3] {
            return Err(Error::shape("dual_forward latents", &sr, &sp));
        }
        let cond = self.downsample(cx, cond)?;
        let x_pbr = cx.concat1(&[z_pbr, cond])?;
        let e_rgb = prompt.embed(&self.rgb, cx)?;
        let mut run_r = self.rgb.begin(cx, z_rgb, ts, Some(e_rgb.as_prompt()))?;
        let e_pbr = match self.config.pbr_prompt_attention {
            true => Some(prompt.embed(&self.pbr, cx)?),
            false => None,
        };
        let mut run_p = self.pbr.begin(cx, x_pbr, ts, e_pbr.as_ref().map(|e| e.as_prompt()))?;
        loop {
            match (self.rgb.advance(cx, &mut run_r)?, self.pbr.advance(cx, &mut run_p)?) {
                (None, None) => break,
                (Some((i, hr)), Some((j, hp))) if i == j => {
                    let hr_small = self.downsample(cx, hr)?;
                    let (dr, dp) = self.comm[i].forward(cx, hr_small, hp)?;
                    let (to_rgb, to_pbr) = self.config.wiring.routes(self.rgb.sites()[i].kind);
                    if to_rgb {
                        let dr = self.upsample(cx, dr)?;
                        self.rgb.inject(cx, &mut run_r, i, dr)?;
                    }
                    if to_pbr {
                        self.pbr.inject(cx, &mut run_p, j, dp)?;
                    }
                }
                _ => return Err(Error::invalid("branch site sequences diverged")),
            }
        }
        Ok((self.rgb.finish(cx, run_r)?, self.pbr.finish(cx, run_p)?))
    }

    fn downsample(&self, cx: &mut Ctx<'_, S>, mut x: Var) -> Result<Var> {
        let mut f = self.config.factor();
        while f > 1 {
            x = cx.avg_pool2(x)?;
            f /= 2;
        }
        Ok(x)
    }

    fn upsample(&self, cx: &mut Ctx<'_, S>, mut x: Var) -> Result<Var> {
        let mut f = self.config.factor();
        while f > 1 {
            x = cx.upsample2(x)?;
            f /= 2;
        }
        Ok(x)
    }

    /// The base network alone.
    pub fn rgb_only(&self, cx: &mut Ctx<'_, S>, z_rgb: Var, ts: &[usize], tokens: &[[usize; 3]]) -> Result<Var> {
        self.rgb.predict(cx, z_rgb, ts, Some(Prompt::Tokens(tokens)))
    }

    pub fn frozen_hash(&self) -> String {
        self.store.frozen_hash()
    }
}

/// Single-network baseline: the base UNet with its first and last layers
/// widened to PBR (+ RGB) plus conditioning.
#[derive(Clone, Debug)]
pub struct FinetuneModel<S> {
    pub config: UNetConfig,
    pub with_rgb_output: bool,
    pub net: UNet,
    pub store: ParamStore<S>,
}

pub const FINETUNE_PREFIX: &str = "ft.";

pub fn build_finetune_baseline<S: Scalar>(
    base: &UNetConfig,
    base_params: &ParamStore<S>,
    with_rgb_output: bool,
    rng: &mut Rng,
) -> Result<FinetuneModel<S>> {
    let extra = if with_rgb_output { 3 } else { 0 };
    let config = UNetConfig {
        in_channels: PBR_CHANNELS + extra + COND_CHANNELS,
        out_channels: PBR_CHANNELS + extra,
        ..base.clone()
    };
    let mut store = ParamStore::new();
    let net = UNet::new(&config, FINETUNE_PREFIX, &mut store, rng)?;
    store.copy_matching(base_params, |n| n.replacen(FINETUNE_PREFIX, RGB_PREFIX, 1));
    store.set_all_trainable(true);
    Ok(FinetuneModel {
        config,
        with_rgb_output,
        net,
        store,
    })
}

/// Splits `(N, 8, H, W)` stacks into albedo, `(metallic, roughness, 0)` and
/// bump images.
pub fn stack_to_triplets<S: Scalar>(stack: &Tensor<S>) -> Result<[Tensor<S>; 3]> {
    let s = stack.shape();
    if s.len() != 4 || s[1] != PBR_CHANNELS {
        return Err(Error::shape("stack_to_triplets", &[0, PBR_CHANNELS, 0, 0], s));
    }
    let zero = Tensor::zeros(&[s[0], 1, s[2], s[3]]);
    let mr = Tensor::concat1(&[&stack.narrow1(METALLIC, 1)?, &stack.narrow1(ROUGHNESS, 1)?, &zero])?;
    Ok([stack.narrow1(0, 3)?, mr, stack.narrow1(BUMP, 3)?])
}

/// Inverse of [`stack_to_triplets`]; the zero channel is dropped.
pub fn triplets_to_stack<S: Scalar>(t: &[Tensor<S>; 3]) -> Result<Tensor<S>> {
    let m = t[1].narrow1(0, 1)?;
    let r = t[1].narrow1(1, 1)?;
    Tensor::concat1(&[&t[0], &r, &m, &t[2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_base() -> UNetConfig {
        UNetConfig {
            base_width: 8,
            channel_mults: vec![1, 2],
            attention_levels: vec![true, true],
            ..Default::default()
        }
    }

    fn base_params(cfg: &UNetConfig, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        UNet::new(cfg, RGB_PREFIX, &mut store, &mut rng).unwrap();
        for (_, p) in store.iter_mut() {
            if p.name.contains("out.conv") {
                p.value = Tensor::randn(p.value.shape(), 0.1, &mut rng);
            }
        }
        store
    }

    #[test]
    fn triplets_roundtrip_losslessly() {
        let mut rng = Rng::new(3);
        let stack = Tensor::<f32>::randn(&[2, 8, 4, 4], 1.0, &mut rng);
        let t = stack_to_triplets(&stack).unwrap();
        assert!(t[2].bitwise_eq(&stack.narrow1(BUMP, 3).unwrap()));
        assert!(t[1].narrow1(2, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(t[1]
            .narrow1(0, 1)
            .unwrap()
            .bitwise_eq(&stack.narrow1(METALLIC, 1).unwrap()));
        assert!(triplets_to_stack(&t).unwrap().bitwise_eq(&stack));
    }

    #[test]
    fn finetune_channels() {
        let cfg = tiny_base();
        let params = base_params(&cfg, 1);
        let with = build_finetune_baseline(&cfg, &params, true, &mut Rng::new(2)).unwrap();
        assert_eq!((with.config.in_channels, with.config.out_channels), (15, 11));
        let without = build_finetune_baseline(&cfg, &params, false, &mut Rng::new(2)).unwrap();
        assert_eq!((without.config.in_channels, without.config.out_channels), (12, 8));
        assert!(without.store.iter().all(|(_, p)| p.trainable));
        // Inner layers come from the base.
        let a = without.store.id("ft.mid.res0.conv1.w").unwrap();
        let b = params.id("rgb.mid.res0.conv1.w").unwrap();
        assert!(without.store.get(a).value.bitwise_eq(&params.get(b).value));
    }

    #[test]
    fn model_layout() {
        let cfg = tiny_base();
        let params = base_params(&cfg, 1);
        let model = DualBranchModel::new(&cfg, &params, &CollabConfig::default(), &mut Rng::new(4)).unwrap();
        assert_eq!(model.comm.len(), model.rgb.sites().len());
        for (_, p) in model.store.iter() {
            assert_eq!(p.trainable, !p.name.starts_with(RGB_PREFIX), "{}", p.name);
        }
        assert!(model.pbr.prompt_table().is_none());
        let a = model.store.id("pbr.enc1.attn.q.w").unwrap();
        let b = params.id("rgb.enc1.attn.q.w").unwrap();
        assert!(model.store.get(a).value.bitwise_eq(&params.get(b).value));
        let mut wrong = tiny_base();
        wrong.base_width = 16;
        wrong.groups = 8;
        assert!(DualBranchModel::new(&wrong, &params, &CollabConfig::default(), &mut Rng::new(4)).is_err());
    }

    #[test]
    fn latent_space_forward_shapes() {
        let cfg = UNetConfig {
            channel_mults: vec![1, 2],
            attention_levels: vec![true, true],
            ..Default::default()
        };
        let params = base_params(&cfg, 1);
        let config = CollabConfig {
            pbr_space: PbrSpace::PbrVae,
            latent_channels: 14,
            latent_factor: 4,
            ..Default::default()
        };
        let model = DualBranchModel::new(&cfg, &params, &config, &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(6);
        let mut cx = Ctx::new(&model.store);
        let zr = cx.input(Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng));
        let zp = cx.input(Tensor::randn(&[1, 14, 4, 4], 1.0, &mut rng));
        let c = cx.input(Tensor::randn(&[1, 4, 16, 16], 1.0, &mut rng));
        let (pr, pp) = model.dual_forward(&mut cx, zr, zp, c, &[3], &[[0, 4, 8]]).unwrap();
        assert_eq!(cx.shape(pr), &[1, 3, 16, 16]);
        assert_eq!(cx.shape(pp), &[1, 14, 4, 4]);
        let bad = cx.input(Tensor::randn(&[1, 14, 8, 8], 1.0, &mut rng));
        assert!(model.dual_forward(&mut cx, zr, bad, c, &[3], &[[0, 4, 8]]).is_err());
    }
}
