use super::conv::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    /// `x[a, c, ..] + b[c]`
    BiasAdd(Var, Var),
    /// `x[n, c, ..] + e[n, c]`
    AddNc(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    /// Batched `op(a) * op(b)` over 3-D operands.
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(S, S)>,
    },
    /// Normalisation over axis 1 of an `(A, C, B..)` tensor.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(S, S)>,
    },
    Silu(Var),
    Relu(Var),
    Exp(Var),
    SoftmaxLast(Var),
    Reshape(Var),
    Concat1(Vec<Var>),
    Narrow1 {
        x: Var,
        start: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// A recording of tensor operations; values are computed eagerly and the tape
/// is replayed in reverse by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<Tensor<S>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    pub fn get_raw(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Splits a shape into `(outer, channels, inner)` around axis 1.
fn split_axis1(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

fn silu<S: Scalar>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is wanted.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (outer, c, inner) =
            split_axis1(tx.shape()).ok_or_else(|| Error::shape("bias_add", tx.shape(), tb.shape()))?;
        if tb.numel() != c {
            return Err(Error::shape("bias_add", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for a in 0..outer {
            for (ci, &bv) in tb.data().iter().enumerate() {
                let base = (a * c + ci) * inner;
                out[base..base + inner].iter_mut().for_each(|o| *o += bv);
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(t, Op::BiasAdd(x, b), ng))
    }

    pub fn add_nc(&mut self, x: Var, e: Var) -> Result<Var> {
        let (tx, te) = (self.value(x), self.value(e));
        let (outer, c, inner) =
            split_axis1(tx.shape()).ok_or_else(|| Error::shape("add_nc", tx.shape(), te.shape()))?;
        if te.numel() != outer * c || te.shape()[0] != outer {
            return Err(Error::shape("add_nc", tx.shape(), te.shape()));
        }
        let mut out = tx.data().to_vec();
        for (oc, &ev) in te.data().iter().enumerate() {
            out[oc * inner..(oc + 1) * inner].iter_mut().for_each(|o| *o += ev);
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x, e]);
        Ok(self.push(t, Op::AddNc(x, e), ng))
    }

    /// 2-D convolution; `w` is `(C_out, C_in, k, k)`. No bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(tx.shape(), tw.shape(), stride, pad)
            .ok_or_else(|| Error::shape("conv2d", tx.shape(), tw.shape()))?;
        let data = conv::forward(&geom, tx.data(), tw.data());
        let t = Tensor::new(&[geom.n, geom.cout, geom.ho, geom.wo], data)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, ng))
    }

    /// Batched matrix product of `(B, r, c)` operands, optionally transposing
    /// either side.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        let (sa, sb) = (xa.shape(), xb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape("bmm", sa, sb));
        }
        let batch = sa[0];
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            let am = &xa.data()[i * m * k..(i + 1) * m * k];
            let bm = &xb.data()[i * k * n..(i + 1) * k * n];
            S::gemm(
                m,
                k,
                n,
                S::one(),
                am,
                mat_strides(sa[1], sa[2], ta),
                bm,
                mat_strides(sb[1], sb[2], tb),
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Bmm { a, b, ta, tb }, ng))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false, false)?;
        let sc = self.shape(c).to_vec();
        self.reshape(c, &[sc[1], sc[2]])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (outer, c, inner) =
            split_axis1(tx.shape()).ok_or_else(|| Error::shape("group_norm", tx.shape(), &[groups]))?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", tx.shape(), &[groups]));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("group_norm", tx.shape(), self.value(gamma).shape()));
        }
        let cg = c / groups;
        let len = cg * inner;
        let mut stats = Vec::with_capacity(outer * groups);
        let mut out = vec![S::zero(); tx.numel()];
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        for a in 0..outer {
            for g in 0..groups {
                let base = (a * c + g * cg) * inner;
                let seg = &tx.data()[base..base + len];
                let (mean, rstd) = moments(seg, eps);
                stats.push((mean, rstd));
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    for i in 0..inner {
                        let j = cc * inner + i;
                        out[base + j] = (seg[j] - mean) * rstd * gd[ch] + bd[ch];
                    }
                }
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            ng,
        ))
    }

    /// Layer normalisation over axis 1 (channels), per remaining position.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (outer, c, inner) = split_axis1(tx.shape()).ok_or_else(|| Error::shape("layer_norm", tx.shape(), &[]))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm", tx.shape(), self.value(gamma).shape()));
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![S::zero(); tx.numel()];
        let mut stats = Vec::with_capacity(outer * inner);
        let inv_c = S::lit(1.0 / c as f64);
        for a in 0..outer {
            let blk = &tx.data()[a * c * inner..(a + 1) * c * inner];
            for i in 0..inner {
                let mut mean = S::zero();
                for ci in 0..c {
                    mean += blk[ci * inner + i];
                }
                mean *= inv_c;
                let mut var = S::zero();
                for ci in 0..c {
                    let d = blk[ci * inner + i] - mean;
                    var += d * d;
                }
                let rstd = S::one() / (var * inv_c + S::lit(eps)).sqrt();
                stats.push((mean, rstd));
                for ci in 0..c {
                    out[(a * c + ci) * inner + i] = (blk[ci * inner + i] - mean) * rstd * gd[ci] + bd[ci];
                }
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, stats }, ng))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(silu);
        let ng = self.ng(&[x]);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(S::zero()));
        let ng = self.ng(&[x]);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        let ng = self.ng(&[x]);
        self.push(v, Op::Exp(x), ng)
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", tx.shape(), &[]))?;
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SoftmaxLast(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn concat1(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<S>> = xs.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::concat1(&parts)?;
        let ng = self.ng(xs);
        Ok(self.push(t, Op::Concat1(xs.to_vec()), ng))
    }

    pub fn narrow1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).narrow1(start, len)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Narrow1 { x, start }, ng))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2", s, &[2, 2]));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let q = S::lit(0.25);
        let mut out = vec![S::zero(); nc * ho * wo];
        for p in 0..nc {
            let src = &tx.data()[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * ho + y) * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::AvgPool2(x), ng))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample2", s, &[]));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![S::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = tx.data()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Upsample2(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(t, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(&[x]);
        self.push(t, Op::Mean(x), ng)
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        let d = *s.last().ok_or_else(|| Error::shape("mean_last", s, &[]))?;
        let inv = S::lit(1.0 / d as f64);
        let data: Vec<S> = tx
            .data()
            .chunks(d)
            .map(|r| r.iter().copied().sum::<S>() * inv)
            .collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::MeanLast(x), ng))
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<S>> {
        let ov = self.value(out);
        if ov.numel() != 1 {
            return Err(Error::NonScalar(ov.shape().to_vec()));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[out.0] = Some(vec![S::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = accumulator(nodes, grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = accumulator(nodes, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = accumulator(nodes, grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(d) = accumulator(nodes, grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = accumulator(nodes, grads, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = accumulator(nodes, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = accumulator(nodes, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::BiasAdd(x, b) => {
                if let Some(d) = accumulator(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                let (outer, c, inner) = split_axis1(node.value.shape()).expect("checked");
                if let Some(d) = accumulator(nodes, grads, *b) {
                    for a in 0..outer {
                        for (ci, dv) in d.iter_mut().enumerate().take(c) {
                            let base = (a * c + ci) * inner;
                            *dv += g[base..base + inner].iter().copied().sum::<S>();
                        }
                    }
                }
            }
            Op::AddNc(x, e) => {
                if let Some(d) = accumulator(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                let (_, _, inner) = split_axis1(node.value.shape()).expect("checked");
                if let Some(d) = accumulator(nodes, grads, *e) {
                    for (oc, dv) in d.iter_mut().enumerate() {
                        *dv += g[oc * inner..(oc + 1) * inner].iter().copied().sum::<S>();
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (vx, vw) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                let (want_x, want_w) = (wants(x), wants(w));
                // Borrow the two gradient buffers disjointly.
                let mut dx = if want_x {
                    Some(grads[x.0].take().unwrap_or_else(|| vec![S::zero(); vx.len()]))
                } else {
                    None
                };
                let mut dw = if want_w && x != w {
                    Some(grads[w.0].take().unwrap_or_else(|| vec![S::zero(); vw.len()]))
                } else {
                    None
                };
                conv::backward(geom, vx, vw, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (xa, xb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb) = (xa.shape(), xb.shape());
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let batch = sa[0];
                let g_str = (n as isize, 1);
                let gt_str = (1, n as isize);
                if let Some(da) = accumulator(nodes, grads, *a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bm = &xb.data()[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        let bst = mat_strides(sb[1], sb[2], *tb);
                        if !*ta {
                            // dA (m x k) += G (m x n) * Bop^T (n x k)
                            S::gemm(
                                m,
                                n,
                                k,
                                S::one(),
                                gi,
                                g_str,
                                bm,
                                (bst.1, bst.0),
                                S::one(),
                                dai,
                                (k as isize, 1),
                            );
                        } else {
                            // dA stored (k x m) += Bop (k x n) * G^T (n x m)
                            S::gemm(k, n, m, S::one(), bm, bst, gi, gt_str, S::one(), dai, (m as isize, 1));
                        }
                    }
                }
                if let Some(db) = accumulator(nodes, grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let am = &xa.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        let ast = mat_strides(sa[1], sa[2], *ta);
                        if !*tb {
                            // dB (k x n) += Aop^T (k x m) * G (m x n)
                            S::gemm(
                                k,
                                m,
                                n,
                                S::one(),
                                am,
                                (ast.1, ast.0),
                                gi,
                                g_str,
                                S::one(),
                                dbi,
                                (n as isize, 1),
                            );
                        } else {
                            // dB stored (n x k) += G^T (n x m) * Aop (m x k)
                            S::gemm(n, m, k, S::one(), gi, gt_str, am, ast, S::one(), dbi, (k as isize, 1));
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let vx = &nodes[x.0].value;
                let (outer, c, inner) = split_axis1(vx.shape()).expect("checked");
                let cg = c / groups;
                let gd = nodes[gamma.0].value.data().to_vec();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx = wants(x).then(|| vec![S::zero(); vx.numel()]);
                let len = cg * inner;
                let inv_len = S::lit(1.0 / len as f64);
                for a in 0..outer {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[a * groups + gi];
                        let base = (a * c + gi * cg) * inner;
                        let mut sum_dxh = S::zero();
                        let mut sum_dxh_xh = S::zero();
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for i in 0..inner {
                                let j = base + cc * inner + i;
                                let xh = (vx.data()[j] - mean) * rstd;
                                dgamma[ch] += g[j] * xh;
                                dbeta[ch] += g[j];
                                let dxh = g[j] * gd[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let m1 = sum_dxh * inv_len;
                            let m2 = sum_dxh_xh * inv_len;
                            for cc in 0..cg {
                                let ch = gi * cg + cc;
                                for i in 0..inner {
                                    let j = base + cc * inner + i;
                                    let xh = (vx.data()[j] - mean) * rstd;
                                    dx[j] += rstd * (g[j] * gd[ch] - m1 - xh * m2);
                                }
                            }
                        }
                    }
                }
                self.finish_norm(grads, *x, *gamma, *beta, dx, dgamma, dbeta);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let vx = &nodes[x.0].value;
                let (outer, c, inner) = split_axis1(vx.shape()).expect("checked");
                let gd = nodes[gamma.0].value.data().to_vec();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx = wants(x).then(|| vec![S::zero(); vx.numel()]);
                let inv_c = S::lit(1.0 / c as f64);
                for a in 0..outer {
                    for i in 0..inner {
                        let (mean, rstd) = stats[a * inner + i];
                        let mut sum_dxh = S::zero();
                        let mut sum_dxh_xh = S::zero();
                        for ci in 0..c {
                            let j = (a * c + ci) * inner + i;
                            let xh = (vx.data()[j] - mean) * rstd;
                            dgamma[ci] += g[j] * xh;
                            dbeta[ci] += g[j];
                            let dxh = g[j] * gd[ci];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let m1 = sum_dxh * inv_c;
                            let m2 = sum_dxh_xh * inv_c;
                            for ci in 0..c {
                                let j = (a * c + ci) * inner + i;
                                let xh = (vx.data()[j] - mean) * rstd;
                                dx[j] += rstd * (g[j] * gd[ci] - m1 - xh * m2);
                            }
                        }
                    }
                }
                self.finish_norm(grads, *x, *gamma, *beta, dx, dgamma, dbeta);
            }
            Op::Silu(x) => {
                let vx = nodes[x.0].value.data();
                if let Some(d) = accumulator(nodes, grads, *x) {
                    for ((d, &g), &a) in d.iter_mut().zip(g).zip(vx) {
                        let s = sigmoid(a);
                        *d += g * s * (S::one() + a * (S::one() - s));
                    }
                }
            }
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                if let Some(d) = accumulator(nodes, grads, *x) {
                    for ((d, &g), &a) in d.iter_mut().zip(g).zip(vx) {
                        if a > S::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                if let Some(d) = accumulator(nodes, grads, *x) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                }
            }
            Op::SoftmaxLast(x) => {
                let y = node.value.data();
                let dlen = *node.value.shape().last().expect("checked");
                if let Some(d) = accumulator(nodes, grads, *x) {
                    for ((drow, grow), yrow) in d.chunks_mut(dlen).zip(g.chunks(dlen)).zip(y.chunks(dlen)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Concat1(xs) => {
                let (outer, _, inner) = split_axis1(node.value.shape()).expect("checked");
                let ctot = node.value.shape()[1];
                let mut off = 0;
                for v in xs {
                    let cv = nodes[v.0].value.shape()[1];
                    if let Some(d) = accumulator(nodes, grads, *v) {
                        for a in 0..outer {
                            let src = &g[(a * ctot + off) * inner..(a * ctot + off + cv) * inner];
                            let dst = &mut d[a * cv * inner..(a + 1) * cv * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    off += cv;
                }
            }
            Op::Narrow1 { x, start } => {
                let (outer, len, inner) = split_axis1(node.value.shape()).expect("checked");
                let c = nodes[x.0].value.shape()[1];
                if let Some(d) = accumulator(nodes, grads, *x) {
                    for a in 0..outer {
                        let dst = &mut d[(a * c + start) * inner..(a * c + start + len) * inner];
                        let src = &g[a * len * inner..(a + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::AvgPool2(x) => {
                let s = nodes[x.0].value.shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let q = S::lit(0.25);
                if let Some(d) = accumulator(nodes, grads, *x) {
                    for p in 0..nc {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gv = g[(p * ho + y) * wo + xx] * q;
                                let i = p * h * w + 2 * y * w + 2 * xx;
                                d[i] += gv;
                                d[i + 1] += gv;
                                d[i + w] += gv;
                                d[i + w + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = nodes[x.0].value.shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(d) = accumulator(nodes, grads, *x) {
                    for p in 0..nc {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = accumulator(nodes, grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                let gv = g[0] / S::lit(n as f64);
                if let Some(d) = accumulator(nodes, grads, *x) {
                    d.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::MeanLast(x) => {
                let dlen = *nodes[x.0].value.shape().last().expect("checked");
                let inv = S::lit(1.0 / dlen as f64);
                if let Some(d) = accumulator(nodes, grads, *x) {
                    for (row, &gv) in d.chunks_mut(dlen).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv * inv);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_norm(
        &self,
        grads: &mut [Option<Vec<S>>],
        x: Var,
        gamma: Var,
        beta: Var,
        dx: Option<Vec<S>>,
        dgamma: Vec<S>,
        dbeta: Vec<S>,
    ) {
        let mut add = |v: Var, d: Vec<S>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                None => grads[v.0] = Some(d),
            }
        };
        if let Some(dx) = dx {
            add(x, dx);
        }
        add(gamma, dgamma);
        add(beta, dbeta);
    }
}

/// Row/column strides of a stored `rows x cols` row-major matrix, optionally
/// viewed transposed.
fn mat_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    let _ = rows;
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn moments<S: Scalar>(seg: &[S], eps: f64) -> (S, S) {
    let inv = S::lit(1.0 / seg.len() as f64);
    let mean = seg.iter().copied().sum::<S>() * inv;
    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv;
    (mean, S::one() / (var + S::lit(eps)).sqrt())
}

fn accumulator<'g, S: Scalar>(nodes: &[Node<S>], grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{grad_check, GradCheckOptions};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn square_value_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn product_gradients_swap_operands() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[2.0]));
        let y = g.leaf(t(&[1], &[5.0]));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn elementwise_product() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let y = g.input(t(&[2], &[3.0, 4.0]));
        let z = g.mul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[3.0, 8.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 4], &[0.3, -1.2, 2.0, 0.1]));
        let s = g.softmax_last(x).unwrap();
        let y = g.sum(s);
        assert!((g.value(y).item() - 1.0).abs() < 1e-12);
        let grads = g.backward(y).unwrap();
        for v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn identity_kernel_convolution_is_identity() {
        let mut rng = Rng::new(9);
        let img = Tensor::<f64>::randn(&[2, 1, 5, 6], 1.0, &mut rng);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let mut g = Graph::new();
        let x = g.input(img.clone());
        let w = g.input(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"),
            "{err}"
        );
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2]));
        let b = g.scale(a, 2.0);
        assert!(matches!(g.backward(b), Err(Error::NonScalar(_))));
    }

    /// Weighted sum with fixed random weights so every output element matters.
    fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = Rng::new(seed);
        let w = Tensor::randn(g.shape(y), 1.0, &mut rng);
        let w = g.input(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    fn check_op(shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
        for trial in 0..10u64 {
            let mut rng = Rng::new(100 + trial);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            let err = grad_check(
                |g, vs| {
                    let y = f(g, vs)?;
                    probe(g, y, trial)
                },
                &inputs,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(err < 1e-5, "trial {trial}: grad error {err}");
        }
    }

    #[test]
    fn gradcheck_elementwise() {
        check_op(&[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]));
        check_op(&[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1]));
        check_op(&[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]));
        check_op(&[&[4]], |g, v| Ok(g.scale(v[0], -1.7)));
        check_op(&[&[4]], |g, v| Ok(g.add_scalar(v[0], 0.3)));
        check_op(&[&[5]], |g, v| Ok(g.silu(v[0])));
        check_op(&[&[5]], |g, v| Ok(g.exp(v[0])));
    }

    #[test]
    fn gradcheck_broadcasts() {
        check_op(&[&[2, 3, 2, 2], &[3]], |g, v| g.bias_add(v[0], v[1]));
        check_op(&[&[2, 3, 2, 2], &[2, 3, 1, 1]], |g, v| g.add_nc(v[0], v[1]));
    }

    #[test]
    fn gradcheck_conv() {
        check_op(&[&[2, 2, 5, 5], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], 1, 1));
        check_op(&[&[1, 2, 6, 6], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], 2, 1));
        check_op(&[&[2, 3, 2, 3], &[2, 3, 1, 1]], |g, v| g.conv2d(v[0], v[1], 1, 0));
    }

    #[test]
    fn gradcheck_bmm_all_transposes() {
        for ta in [false, true] {
            for tb in [false, true] {
                let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
                let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
                check_op(&[sa, sb], |g, v| g.bmm(v[0], v[1], ta, tb));
            }
        }
        check_op(&[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    }

    #[test]
    fn gradcheck_normalisation() {
        check_op(&[&[2, 4, 3, 3], &[4], &[4]], |g, v| {
            g.group_norm(v[0], v[1], v[2], 2, 1e-5)
        });
        check_op(&[&[2, 4, 5], &[4], &[4]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        check_op(&[&[3, 4], &[4], &[4]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn gradcheck_structural() {
        check_op(&[&[2, 3, 4]], |g, v| g.softmax_last(v[0]));
        check_op(&[&[2, 3, 4]], |g, v| g.reshape(v[0], &[6, 4]));
        check_op(&[&[2, 1, 2, 2], &[2, 3, 2, 2]], |g, v| g.concat1(&[v[0], v[1]]));
        check_op(&[&[2, 5, 3]], |g, v| g.narrow1(v[0], 1, 3));
        check_op(&[&[1, 2, 4, 4]], |g, v| g.avg_pool2(v[0]));
        check_op(&[&[1, 2, 2, 3]], |g, v| g.upsample2(v[0]));
        check_op(&[&[2, 3, 4]], |g, v| g.mean_last(v[0]));
        check_op(&[&[2, 3]], |g, v| Ok(g.mean(v[0])));
        check_op(&[&[2, 3], &[2, 3]], |g, v| g.mse(v[0], v[1]));
    }

    #[test]
    fn reused_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[1.5]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        let grads = g.backward(z).unwrap();
        assert!((grads.get(x).unwrap().item() - 6.0).abs() < 1e-12);
    }
}
