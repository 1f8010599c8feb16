//! Per-site communication layers and the wiring rules that route their
//! outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Attention, Conv, Init, Norm, SiteKind};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Ctx, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommVariant {
    /// One zero-initialized 1x1 convolution.
    LinearZero,
    /// Four hidden per-pixel layers with layer norm, zero-initialized output.
    Mlp4,
    /// Attention over all positions of the joined states, zero-initialized
    /// output projection.
    GlobalAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WiringMode {
    Bidirectional,
    /// RGB to PBR only.
    OneWay,
    /// RGB to PBR at encoder and middle sites, PBR to RGB at decoder sites.
    Clockwise,
}

impl WiringMode {
    /// Whether a site of `kind` delivers `(to_rgb, to_pbr)`.
    pub fn routes(self, kind: SiteKind) -> (bool, bool) {
        match (self, kind) {
            (WiringMode::Bidirectional, _) => (true, true),
            (WiringMode::OneWay, _) => (false, true),
            (WiringMode::Clockwise, SiteKind::Decoder) => (true, false),
            (WiringMode::Clockwise, _) => (false, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WiringMode::Bidirectional => "bidirectional",
            WiringMode::OneWay => "one_way",
            WiringMode::Clockwise => "clockwise",
        }
    }
}

pub const MLP_HIDDEN_LAYERS: usize = 4;

#[derive(Clone, Debug)]
enum Body {
    Linear(Conv),
    Mlp { hidden: Vec<(Conv, Norm)>, out: Conv },
    Attention(Attention),
}

/// Maps the channel concatenation `[h_rgb, h_pbr]` to a delta for each
/// branch.
#[derive(Clone, Debug)]
pub struct CommLayer {
    pub variant: CommVariant,
    pub c_rgb: usize,
    pub c_pbr: usize,
    body: Body,
}

impl CommLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        variant: CommVariant,
        c_rgb: usize,
        c_pbr: usize,
        head_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let c = c_rgb + c_pbr;
        let body = match variant {
            CommVariant::LinearZero => Body::Linear(Conv::pointwise(store, name, c, c, Init::Zero, rng)),
            CommVariant::Mlp4 => Body::Mlp {
                hidden: (0..MLP_HIDDEN_LAYERS)
                    .map(|i| {
                        let tag = format!("{name}.h{i}");
                        (
                            Conv::pointwise(store, &tag, c, c, Init::Fan, rng),
                            Norm::new(store, &format!("{tag}.norm"), c, None),
                        )
                    })
                    .collect(),
                out: Conv::pointwise(store, &format!("{name}.out"), c, c, Init::Zero, rng),
            },
            CommVariant::GlobalAttention => {
                Body::Attention(Attention::new(store, name, c, None, head_dim, Init::Zero, rng))
            }
        };
        Self {
            variant,
            c_rgb,
            c_pbr,
            body,
        }
    }

    /// Returns `(delta_rgb, delta_pbr)`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, h_rgb: Var, h_pbr: Var) -> Result<(Var, Var)> {
        let (sr, sp) = (cx.shape(h_rgb).to_vec(), cx.shape(h_pbr).to_vec());
        if sr[1] != self.c_rgb || sp[1] != self.c_pbr || sr[0] != sp[0] || sr[2..] != sp[2..] {
            return Err(Error::shape("comm layer", &sr, &sp));
        }
        let x = cx.concat1(&[h_rgb, h_pbr])?;
        let y = match &self.body {
            Body::Linear(conv) => conv.forward(cx, x)?,
            Body::Mlp { hidden, out } => {
                let mut h = x;
                for (lin, norm) in hidden {
                    h = lin.forward(cx, h)?;
                    h = norm.forward(cx, h)?;
                    h = cx.silu(h);
                }
                out.forward(cx, h)?
            }
            Body::Attention(attn) => attn.attend(cx, x, None)?,
        };
        Ok((cx.narrow1(y, 0, self.c_rgb)?, cx.narrow1(y, self.c_rgb, self.c_pbr)?))
    }
}
