//! Small convolutional VAE for pixel stacks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Conv, Init, Norm};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Ctx, ParamStore, Tensor, Var};

pub const PBR_LATENT_CHANNELS: usize = 14;
pub const RGB_LATENT_CHANNELS: usize = 4;
pub const VAE_PREFIX: &str = "vae.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub factor: usize,
    pub kl_weight: f64,
    pub width: usize,
    pub groups: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            in_channels: crate::shading::PBR_CHANNELS,
            latent_channels: PBR_LATENT_CHANNELS,
            factor: 4,
            kl_weight: 1e-4,
            width: 16,
            groups: 8,
        }
    }
}

impl VaeConfig {
    /// Configuration for the RGB autoencoder applied to triplets.
    pub fn rgb() -> Self {
        Self {
            in_channels: 3,
            latent_channels: RGB_LATENT_CHANNELS,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("vae channels must be positive".into()));
        }
        if !matches!(self.factor, 2 | 4) {
            return Err(Error::Config(format!("vae factor {} not in {{2, 4}}", self.factor)));
        }
        if self.width == 0 || self.groups == 0 || self.width % self.groups != 0 {
            return Err(Error::Config(format!(
                "vae width {} not divisible by {} groups",
                self.width, self.groups
            )));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }
}

/// Conv, group norm, SiLU.
#[derive(Clone, Debug)]
struct Block {
    conv: Conv,
    norm: Norm,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            conv: Conv::new(store, name, cin, cout, 3, stride, Init::Fan, rng),
            norm: Norm::new(store, &format!("{name}.norm"), cout, Some(groups)),
        }
    }

    fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let h = self.conv.forward(cx, x)?;
        let h = self.norm.forward(cx, h)?;
        Ok(cx.silu(h))
    }
}

#[derive(Clone, Debug)]
pub struct Vae<S> {
    pub config: VaeConfig,
    pub store: ParamStore<S>,
    encoder: Vec<Block>,
    to_moments: Conv,
    decoder_in: Block,
    decoder: Vec<Block>,
    to_image: Conv,
}

impl<S: Scalar> Vae<S> {
    pub fn new(config: &VaeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (w, g) = (config.width, config.groups);
        let mut store = ParamStore::new();
        let name = |s: String| format!("{VAE_PREFIX}{s}");
        let mut encoder = vec![Block::new(
            &mut store,
            &name("enc.in".into()),
            config.in_channels,
            w,
            1,
            g,
            rng,
        )];
        for i in 0..config.stages() {
            encoder.push(Block::new(&mut store, &name(format!("enc.down{i}")), w, w, 2, g, rng));
            encoder.push(Block::new(&mut store, &name(format!("enc.mix{i}")), w, w, 1, g, rng));
        }
        let to_moments = Conv::new(
            &mut store,
            &name("enc.moments".into()),
            w,
            2 * config.latent_channels,
            3,
            1,
            Init::Fan,
            rng,
        );
        let decoder_in = Block::new(&mut store, &name("dec.in".into()), config.latent_channels, w, 1, g, rng);
        let mut decoder = Vec::new();
        for i in 0..config.stages() {
            decoder.push(Block::new(&mut store, &name(format!("dec.up{i}")), w, w, 1, g, rng));
            decoder.push(Block::new(&mut store, &name(format!("dec.mix{i}")), w, w, 1, g, rng));
        }
        let to_image = Conv::new(
            &mut store,
            &name("dec.out".into()),
            w,
            config.in_channels,
            3,
            1,
            Init::Fan,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            to_moments,
            decoder_in,
            decoder,
            to_image,
        })
    }

    /// `(mean, logvar)`, each `(N, L, H/f, W/f)`.
    pub fn encode(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<(Var, Var)> {
        let s = cx.shape(x).to_vec();
        let f = self.config.factor;
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape("vae encode", &[0, self.config.in_channels, 0, 0], &s));
        }
        if s[2] % f != 0 || s[3] % f != 0 {
            return Err(Error::invalid(format!(
                "resolution {}x{} not divisible by {f}",
                s[2], s[3]
            )));
        }
        let mut h = x;
        for b in &self.encoder {
            h = b.forward(cx, h)?;
        }
        let m = self.to_moments.forward(cx, h)?;
        let l = self.config.latent_channels;
        Ok((cx.narrow1(m, 0, l)?, cx.narrow1(m, l, l)?))
    }

    pub fn decode(&self, cx: &mut Ctx<'_, S>, z: Var) -> Result<Var> {
        let s = cx.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.config.latent_channels {
            return Err(Error::shape("vae decode", &[0, self.config.latent_channels, 0, 0], &s));
        }
        let mut h = self.decoder_in.forward(cx, z)?;
        for pair in self.decoder.chunks(2) {
            h = cx.upsample2(h)?;
            h = pair[0].forward(cx, h)?;
            h = pair[1].forward(cx, h)?;
        }
        self.to_image.forward(cx, h)
    }

    /// Encodes to the posterior mean and decodes, outside any graph the
    /// caller keeps.
    pub fn reconstruct(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let z = self.encode_mean(x)?;
        self.decode_tensor(&z)
    }

    pub fn encode_mean(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut cx = Ctx::new(&self.store);
        let xv = cx.input(x.clone());
        let (m, _) = self.encode(&mut cx, xv)?;
        Ok(cx.value(m).clone())
    }

    pub fn decode_tensor(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        let mut cx = Ctx::new(&self.store);
        let zv = cx.input(z.clone());
        let y = self.decode(&mut cx, zv)?;
        Ok(cx.value(y).clone())
    }

    /// Loss of one batch with fresh reparameterization noise.
    pub fn loss(&self, cx: &mut Ctx<'_, S>, x: Var, rng: &mut Rng) -> Result<VaeLoss> {
        let (mean, logvar) = self.encode(cx, x)?;
        let eps = Tensor::randn(cx.shape(mean), 1.0, rng);
        let eps = cx.input(eps);
        let z = reparameterize(cx, mean, logvar, eps)?;
        let recon = self.decode(cx, z)?;
        vae_loss(cx, x, recon, mean, logvar, self.config.kl_weight)
    }
}

/// `mean + exp(logvar / 2) * eps`.
pub fn reparameterize<S: Scalar>(cx: &mut Ctx<'_, S>, mean: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = cx.scale(logvar, S::lit(0.5));
    let std = cx.exp(half);
    let noise = cx.mul(std, eps)?;
    cx.add(mean, noise)
}

/// Mean over elements of `KL(N(mean, exp(logvar)) || N(0, 1))`.
pub fn kl_term<S: Scalar>(cx: &mut Ctx<'_, S>, mean: Var, logvar: Var) -> Result<Var> {
    let m2 = cx.mul(mean, mean)?;
    let var = cx.exp(logvar);
    let a = cx.add(m2, var)?;
    let b = cx.sub(a, logvar)?;
    let c = cx.add_scalar(b, -S::one());
    let k = cx.mean(c);
    Ok(cx.scale(k, S::lit(0.5)))
}

#[derive(Clone, Copy, Debug)]
pub struct VaeLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Reconstruction MSE plus `kl_weight` times the mean KL.
pub fn vae_loss<S: Scalar>(
    cx: &mut Ctx<'_, S>,
    image: Var,
    recon: Var,
    mean: Var,
    logvar: Var,
    kl_weight: f64,
) -> Result<VaeLoss> {
    let r = cx.mse(recon, image)?;
    let kl = kl_term(cx, mean, logvar)?;
    let wkl = cx.scale(kl, S::lit(kl_weight));
    let total = cx.add(r, wkl)?;
    Ok(VaeLoss { total, recon: r, kl })
}
