//! A small UNet laid out as a flat program so a forward pass can pause after
//! every self-attention site.

use super::layers::{Attention, Conv, Init, Norm, ResBlock};
use super::{timestep_embedding, Prompt, UNetConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Ctx, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteKind {
    Encoder,
    Mid,
    Decoder,
}

/// A self-attention site: where hidden states are tapped and deltas land.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteInfo {
    pub kind: SiteKind,
    pub level: usize,
    pub channels: usize,
    /// Spatial downsampling relative to the input.
    pub stride: usize,
    pub name: String,
}

#[derive(Clone, Debug)]
enum Step {
    Res(ResBlock),
    SelfAttn(Attention, usize),
    CrossAttn(Attention),
    PushSkip,
    Down(Conv),
    PopConcat,
    Up(Conv),
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub prefix: String,
    conv_in: Conv,
    temb1: Conv,
    temb2: Conv,
    prompt_table: Option<ParamId>,
    steps: Vec<Step>,
    out_norm: Norm,
    conv_out: Conv,
    sites: Vec<SiteInfo>,
}

/// Paused state of a forward pass.
pub struct Run {
    h: Var,
    skips: Vec<Var>,
    temb: Var,
    context: Option<Var>,
    pc: usize,
    next_site: usize,
    batch: usize,
    height: usize,
    width: usize,
}

impl UNet {
    /// Registers all parameters under `prefix` (e.g. `"rgb."`).
    pub fn new<S: Scalar>(config: &UNetConfig, prefix: &str, store: &mut ParamStore<S>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let name = |s: &str| format!("{prefix}{s}");
        let widths: Vec<usize> = c.channel_mults.iter().map(|m| m * c.base_width).collect();
        let te = c.temb_width();
        let groups = c.groups;
        let ctx_width = c.cross_attention.then_some(c.embed_width);
        let mut steps = Vec::new();
        let mut sites = Vec::new();
        let attn_block = |store: &mut ParamStore<S>,
                          rng: &mut Rng,
                          steps: &mut Vec<Step>,
                          sites: &mut Vec<SiteInfo>,
                          tag: String,
                          kind,
                          level,
                          ch| {
            let id = sites.len();
            steps.push(Step::SelfAttn(
                Attention::new(store, &format!("{tag}.attn"), ch, None, c.head_dim, Init::Fan, rng),
                id,
            ));
            sites.push(SiteInfo {
                kind,
                level,
                channels: ch,
                stride: 1 << level,
                name: tag.clone(),
            });
            if let Some(e) = ctx_width {
                steps.push(Step::CrossAttn(Attention::new(
                    store,
                    &format!("{tag}.xattn"),
                    ch,
                    Some(e),
                    c.head_dim,
                    Init::Fan,
                    rng,
                )));
            }
        };

        let conv_in = Conv::new(store, &name("conv_in"), c.in_channels, widths[0], 3, 1, Init::Fan, rng);
        let temb1 = Conv::pointwise(store, &name("temb.fc1"), c.base_width, te, Init::Fan, rng);
        let temb2 = Conv::pointwise(store, &name("temb.fc2"), te, te, Init::Fan, rng);
        let prompt_table = c.cross_attention.then(|| {
            let t = Tensor::randn(
                &[c.embed_width, c.vocab_size, 1, 1],
                1.0,
                &mut rng.fork_named(&name("prompt")),
            );
            store.add(name("prompt.table"), t, true)
        });

        let levels = widths.len();
        let mut ch = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            let tag = name(&format!("enc{l}"));
            steps.push(Step::Res(ResBlock::new(
                store,
                &format!("{tag}.res"),
                ch,
                w,
                te,
                groups,
                rng,
            )));
            ch = w;
            if c.attention_levels[l] {
                attn_block(
                    store,
                    rng,
                    &mut steps,
                    &mut sites,
                    tag.clone(),
                    SiteKind::Encoder,
                    l,
                    ch,
                );
            }
            steps.push(Step::PushSkip);
            if l + 1 < levels {
                steps.push(Step::Down(Conv::new(
                    store,
                    &format!("{tag}.down"),
                    ch,
                    ch,
                    3,
                    2,
                    Init::Fan,
                    rng,
                )));
            }
        }
        let tag = name("mid");
        steps.push(Step::Res(ResBlock::new(
            store,
            &format!("{tag}.res0"),
            ch,
            ch,
            te,
            groups,
            rng,
        )));
        if c.mid_attention {
            attn_block(
                store,
                rng,
                &mut steps,
                &mut sites,
                tag.clone(),
                SiteKind::Mid,
                levels - 1,
                ch,
            );
        }
        steps.push(Step::Res(ResBlock::new(
            store,
            &format!("{tag}.res1"),
            ch,
            ch,
            te,
            groups,
            rng,
        )));
        for l in (0..levels).rev() {
            let tag = name(&format!("dec{l}"));
            steps.push(Step::PopConcat);
            steps.push(Step::Res(ResBlock::new(
                store,
                &format!("{tag}.res"),
                ch + widths[l],
                widths[l],
                te,
                groups,
                rng,
            )));
            ch = widths[l];
            if c.attention_levels[l] {
                attn_block(
                    store,
                    rng,
                    &mut steps,
                    &mut sites,
                    tag.clone(),
                    SiteKind::Decoder,
                    l,
                    ch,
                );
            }
            if l > 0 {
                steps.push(Step::Up(Conv::new(
                    store,
                    &format!("{tag}.up"),
                    ch,
                    ch,
                    3,
                    1,
                    Init::Fan,
                    rng,
                )));
            }
        }
        let out_norm = Norm::new(store, &name("out.norm"), ch, Some(groups));
        let conv_out = Conv::new(store, &name("out.conv"), ch, c.out_channels, 3, 1, Init::Zero, rng);
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            conv_in,
            temb1,
            temb2,
            prompt_table,
            steps,
            out_norm,
            conv_out,
            sites,
        })
    }

    /// Sites in execution order: encoder (shallow to deep), mid, decoder.
    pub fn sites(&self) -> &[SiteInfo] {
        &self.sites
    }

    pub fn prompt_table(&self) -> Option<ParamId> {
        self.prompt_table
    }

    /// `(N, E, 3, 1)` embedding of token triples.
    pub fn embed_tokens<S: Scalar>(&self, cx: &mut Ctx<'_, S>, tokens: &[[usize; 3]]) -> Result<Var> {
        let table = self
            .prompt_table
            .ok_or_else(|| Error::invalid("network has no prompt embedding"))?;
        let v = self.config.vocab_size;
        let mut onehot = Tensor::<S>::zeros(&[tokens.len(), v, 3, 1]);
        for (i, tri) in tokens.iter().enumerate() {
            for (j, &tok) in tri.iter().enumerate() {
                if tok >= v {
                    return Err(Error::invalid(format!("prompt token {tok} outside vocabulary of {v}")));
                }
                onehot.data_mut()[(i * v + tok) * 3 + j] = S::one();
            }
        }
        let x = cx.input(onehot);
        let w = cx.p(table);
        cx.conv2d(x, w, 1, 0)
    }

    /// Starts a forward pass on `x` `(N, C_in, H, W)` at per-item timesteps.
    pub fn begin<S: Scalar>(
        &self,
        cx: &mut Ctx<'_, S>,
        x: Var,
        ts: &[usize],
        prompt: Option<Prompt<'_, S>>,
    ) -> Result<Run> {
        let shape = cx.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape("unet input", &[0, self.config.in_channels, 0, 0], &shape));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let div = 1 << (self.config.channel_mults.len() - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!("resolution {h}x{w} not divisible by {div}")));
        }
        if ts.len() != n && ts.len() != 1 {
            return Err(Error::shape("unet timesteps", &[n], &[ts.len()]));
        }
        let d = self.config.base_width;
        let mut emb = Vec::with_capacity(n * d);
        for i in 0..n {
            let t = if ts.len() == 1 { ts[0] } else { ts[i] };
            emb.extend(timestep_embedding(t as f64, d)?.into_iter().map(S::lit));
        }
        let e = cx.input(Tensor::new(&[n, d, 1, 1], emb)?);
        let e = self.temb1.forward(cx, e)?;
        let e = cx.silu(e);
        let e = self.temb2.forward(cx, e)?;
        let temb = cx.silu(e);
        let context = match (self.config.cross_attention, prompt) {
            (false, _) => None,
            (true, None) => return Err(Error::invalid("prompt required by cross-attention")),
            (true, Some(Prompt::Tokens(tokens))) => {
                if tokens.len() != n {
                    return Err(Error::shape("prompt batch", &[n], &[tokens.len()]));
                }
                Some(self.embed_tokens(cx, tokens)?)
            }
            (true, Some(Prompt::Embedded(t))) => {
                let want = [n, self.config.embed_width, 3, 1];
                if t.shape() != want {
                    return Err(Error::shape("prompt embedding", &want, t.shape()));
                }
                Some(cx.input(t.clone()))
            }
        };
        let h0 = self.conv_in.forward(cx, x)?;
        Ok(Run {
            h: h0,
            skips: Vec::new(),
            temb,
            context,
            pc: 0,
            next_site: 0,
            batch: n,
            height: h,
            width: w,
        })
    }

    /// Runs until the next site and returns its index and post-attention
    /// hidden state, or `None` once no sites remain.
    pub fn advance<S: Scalar>(&self, cx: &mut Ctx<'_, S>, run: &mut Run) -> Result<Option<(usize, Var)>> {
        while run.pc < self.steps.len() {
            let step = &self.steps[run.pc];
            run.pc += 1;
            match step {
                Step::Res(b) => run.h = b.forward(cx, run.h, run.temb)?,
                Step::SelfAttn(a, site) => {
                    run.h = a.forward(cx, run.h, None)?;
                    run.next_site = site + 1;
                    return Ok(Some((*site, run.h)));
                }
                Step::CrossAttn(a) => run.h = a.forward(cx, run.h, run.context)?,
                Step::PushSkip => run.skips.push(run.h),
                Step::Down(c) => run.h = c.forward(cx, run.h)?,
                Step::PopConcat => {
                    let s = run.skips.pop().expect("balanced skips");
                    run.h = cx.concat1(&[run.h, s])?;
                }
                Step::Up(c) => {
                    let u = cx.upsample2(run.h)?;
                    run.h = c.forward(cx, u)?;
                }
            }
        }
        Ok(None)
    }

    /// Expected hidden-state shape at `site` for this run.
    pub fn site_shape(&self, run: &Run, site: usize) -> [usize; 4] {
        let s = &self.sites[site];
        [run.batch, s.channels, run.height / s.stride, run.width / s.stride]
    }

    /// Adds `delta` to the hidden state of the site just returned by
    /// [`Self::advance`].
    pub fn inject<S: Scalar>(&self, cx: &mut Ctx<'_, S>, run: &mut Run, site: usize, delta: Var) -> Result<()> {
        if site + 1 != run.next_site {
            return Err(Error::invalid(format!("delta for site {site} arrived out of order")));
        }
        let want = self.site_shape(run, site);
        if cx.shape(delta) != want {
            return Err(Error::TapShape {
                site,
                expected: want.to_vec(),
                got: cx.shape(delta).to_vec(),
            });
        }
        run.h = cx.add(run.h, delta)?;
        Ok(())
    }

    /// Runs all remaining steps and the output head.
    pub fn finish<S: Scalar>(&self, cx: &mut Ctx<'_, S>, mut run: Run) -> Result<Var> {
        while self.advance(cx, &mut run)?.is_some() {}
        let h = self.out_norm.forward(cx, run.h)?;
        let h = cx.silu(h);
        self.conv_out.forward(cx, h)
    }

    /// Full pass. With `taps_in`, delta `k` is added at site `k`. Returns the
    /// prediction and the hidden state at every site (before its delta).
    pub fn forward<S: Scalar>(
        &self,
        cx: &mut Ctx<'_, S>,
        x: Var,
        ts: &[usize],
        prompt: Option<Prompt<'_, S>>,
        taps_in: Option<&[Var]>,
    ) -> Result<(Var, Vec<Var>)> {
        if let Some(d) = taps_in {
            if d.len() != self.sites.len() {
                return Err(Error::shape("unet taps", &[self.sites.len()], &[d.len()]));
            }
        }
        let mut run = self.begin(cx, x, ts, prompt)?;
        let mut taps = Vec::with_capacity(self.sites.len());
        while let Some((site, h)) = self.advance(cx, &mut run)? {
            taps.push(h);
            if let Some(d) = taps_in {
                self.inject(cx, &mut run, site, d[site])?;
            }
        }
        let out = self.finish(cx, run)?;
        Ok((out, taps))
    }

    /// Forward pass returning only the prediction.
    pub fn predict<S: Scalar>(
        &self,
        cx: &mut Ctx<'_, S>,
        x: Var,
        ts: &[usize],
        prompt: Option<Prompt<'_, S>>,
    ) -> Result<Var> {
        Ok(self.forward(cx, x, ts, prompt, None)?.0)
    }
}
