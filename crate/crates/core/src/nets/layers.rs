//! Parameterized building blocks. Each block owns parameter ids in a shared
//! [`ParamStore`] and runs on a [`Ctx`].

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Ctx, ParamId, ParamStore, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Weights `N(0, 1/fan_in)`, zero bias.
    Fan,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let shape = [cout, cin, k, k];
        let w = match init {
            Init::Fan => Tensor::randn(&shape, (1.0 / (cin * k * k) as f64).sqrt(), &mut rng.fork_named(name)),
            Init::Zero => Tensor::zeros(&shape),
        };
        Self {
            w: store.add(format!("{name}.w"), w, true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true),
            stride,
            pad: k / 2,
        }
    }

    pub fn pointwise<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        Self::new(store, name, cin, cout, 1, 1, init, rng)
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        let y = cx.conv2d(x, w, self.stride, self.pad)?;
        cx.bias_add(y, b)
    }
}

/// Group norm over `(C/groups, H, W)` blocks, or layer norm over channels when
/// `groups` is `None`.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: Option<usize>,
}

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize, groups: Option<usize>) -> Self {
        Self {
            gamma: store.add(format!("{name}.g"), Tensor::full(&[c], S::one()), true),
            beta: store.add(format!("{name}.b"), Tensor::zeros(&[c]), true),
            groups,
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        match self.groups {
            Some(k) => cx.group_norm(x, g, b, k, NORM_EPS),
            None => cx.layer_norm(x, g, b, NORM_EPS),
        }
    }
}

/// Pre-activation residual block with an additive timestep projection.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv,
    pub temb: Conv,
    pub norm2: Norm,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), cin, Some(groups)),
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, Init::Fan, rng),
            temb: Conv::pointwise(store, &format!("{name}.temb"), temb, cout, Init::Fan, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), cout, Some(groups)),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, Init::Fan, rng),
            skip: (cin != cout).then(|| Conv::pointwise(store, &format!("{name}.skip"), cin, cout, Init::Fan, rng)),
        }
    }

    /// `temb` is the activated embedding, `(N, E, 1, 1)`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let h = cx.silu(h);
        let h = self.conv1.forward(cx, h)?;
        let e = self.temb.forward(cx, temb)?;
        let h = cx.add_nc(h, e)?;
        let h = self.norm2.forward(cx, h)?;
        let h = cx.silu(h);
        let h = self.conv2.forward(cx, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(cx, x)?,
            None => x,
        };
        cx.add(skip, h)
    }
}

/// Multi-head dot-product attention with a pre-norm and residual output.
/// Without a context it attends over its own positions; with one, queries
/// come from the image and keys/values from the `(N, E, L, 1)` context.
#[derive(Clone, Debug)]
pub struct Attention {
    pub norm: Norm,
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub out: Conv,
    pub heads: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
        context: Option<usize>,
        head_dim: usize,
        out_init: Init,
        rng: &mut Rng,
    ) -> Self {
        let kv_in = context.unwrap_or(c);
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), c, None),
            q: Conv::pointwise(store, &format!("{name}.q"), c, c, Init::Fan, rng),
            k: Conv::pointwise(store, &format!("{name}.k"), kv_in, c, Init::Fan, rng),
            v: Conv::pointwise(store, &format!("{name}.v"), kv_in, c, Init::Fan, rng),
            out: Conv::pointwise(store, &format!("{name}.out"), c, c, out_init, rng),
            heads: (c / head_dim.max(1)).max(1),
        }
    }

    /// Attention output before the residual add.
    pub fn attend<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var, context: Option<Var>) -> Result<Var> {
        let shape = cx.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let l: usize = shape[2..].iter().product();
        if c % self.heads != 0 {
            return Err(Error::shape("attention heads", &shape, &[self.heads]));
        }
        let d = c / self.heads;
        let xn = self.norm.forward(cx, x)?;
        let kv_src = context.unwrap_or(xn);
        let lk: usize = cx.shape(kv_src)[2..].iter().product();
        let q = self.q.forward(cx, xn)?;
        let k = self.k.forward(cx, kv_src)?;
        let v = self.v.forward(cx, kv_src)?;
        let q = cx.reshape(q, &[n * self.heads, d, l])?;
        let k = cx.reshape(k, &[n * self.heads, d, lk])?;
        let v = cx.reshape(v, &[n * self.heads, d, lk])?;
        let scores = cx.bmm(q, k, true, false)?;
        let scores = cx.scale(scores, S::lit(1.0 / (d as f64).sqrt()));
        let attn = cx.softmax_last(scores)?;
        let o = cx.bmm(v, attn, false, true)?;
        let o = cx.reshape(o, &shape)?;
        self.out.forward(cx, o)
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var, context: Option<Var>) -> Result<Var> {
        let o = self.attend(cx, x, context)?;
        cx.add(x, o)
    }
}
