//! Distribution distances over embeddings of 3-channel composites, and the
//! interpolation helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Conv, Init};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shading::{ALBEDO, BUMP, METALLIC, PBR_CHANNELS, ROUGHNESS};
use crate::tensor::{Ctx, ParamStore, Tensor};
use crate::training::MetricKind;

/// Luma weights for grayscale albedo.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// The mixed triplets scored besides the per-channel images.
pub const TRIPLETS: [&str; 3] = [
    "grayscale albedo, roughness, metallic",
    "roughness, metallic, normal XY norm",
    "grayscale albedo, normal X, normal Y",
];

pub const CHANNEL_NAMES: [&str; PBR_CHANNELS] = [
    "albedo R",
    "albedo G",
    "albedo B",
    "roughness",
    "metallic",
    "normal X",
    "normal Y",
    "normal Z",
];

const EIGEN_EPS: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 10_000;
/// Relative size of a negative eigenvalue still treated as rounding.
const PSD_TOL: f64 = 1e-8;

/// Maps `(N, 3, H, W)` images to one vector each.
pub trait Embedder {
    fn embed(&self, images: &Tensor<f64>) -> Result<Vec<Vec<f64>>>;
}

/// Fixed random conv net: three conv/ReLU stages with pooling between,
/// then per-channel spatial mean and standard deviation.
#[derive(Clone, Debug)]
pub struct ConvBackbone {
    store: ParamStore<f64>,
    convs: Vec<Conv>,
}

impl ConvBackbone {
    pub fn new(seed: u64, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        let mut rng = Rng::new(seed).fork_named("backbone");
        let mut store = ParamStore::new();
        let dims = [3, width, 2 * width, 2 * width];
        let convs = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Conv::new(&mut store, &format!("bb{i}"), d[0], d[1], 3, 1, Init::Fan, &mut rng))
            .collect();
        store.set_all_trainable(false);
        Ok(Self { store, convs })
    }

    pub fn dim(&self) -> usize {
        2 * self.store.get(self.convs.last().expect("layers").w).value.shape()[0]
    }
}

impl Embedder for ConvBackbone {
    fn embed(&self, images: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("backbone", &[0, 3, 0, 0], s));
        }
        let mut cx = Ctx::new(&self.store);
        let mut h = cx.input(images.clone());
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&mut cx, h)?;
            h = cx.relu(h);
            let hs = cx.shape(h);
            if i + 1 < self.convs.len() && hs[2] % 2 == 0 && hs[3] % 2 == 0 {
                h = cx.avg_pool2(h)?;
            }
        }
        let out = cx.value(h);
        let os = out.shape();
        let (n, c, hw) = (os[0], os[1], os[2] * os[3]);
        let mut vecs = Vec::with_capacity(n);
        for i in 0..n {
            let mut v = Vec::with_capacity(2 * c);
            let mut sd = Vec::with_capacity(c);
            for ch in 0..c {
                let p = &out.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let m = p.iter().sum::<f64>() / hw as f64;
                let var = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / hw as f64;
                v.push(m);
                sd.push(var.sqrt());
            }
            v.extend(sd);
            vecs.push(v);
        }
        Ok(vecs)
    }
}

/// Mean and covariance of a sample of vectors.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Unbiased covariance; needs at least two vectors.
    pub fn from_samples(xs: &[Vec<f64>]) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::invalid(format!(
                "gaussian fit needs 2 samples, got {}",
                xs.len()
            )));
        }
        let d = xs[0].len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(Error::invalid("samples of unequal dimension"));
        }
        let n = xs.len();
        let mut mean = DVector::zeros(d);
        for x in xs {
            mean += DVector::from_column_slice(x);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for x in xs {
            let c = DVector::from_column_slice(x) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov, count: n })
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let s = Self { mean, cov, count };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.shape() != (d, d) {
            return Err(Error::shape(
                "gaussian stats",
                &[d, d],
                &[self.cov.nrows(), self.cov.ncols()],
            ));
        }
        let scale = self.cov.amax().max(1.0);
        if (&self.cov - self.cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let eig = sym_eigen(self.cov.clone())?;
        if eig.eigenvalues.iter().any(|&l| l < -1e-8 * scale) {
            return Err(Error::invalid("covariance is not positive semidefinite"));
        }
        Ok(())
    }
}

fn sym_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, EIGEN_EPS, EIGEN_MAX_ITER).ok_or(Error::SqrtNoConvergence)
}

/// Square root of a symmetric PSD matrix; small negative eigenvalues are
/// clamped to zero, larger ones are an error.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.amax().max(1.0);
    let eig = sym_eigen(sym)?;
    let mut roots = Vec::with_capacity(eig.eigenvalues.len());
    for &l in eig.eigenvalues.iter() {
        if l < -PSD_TOL * scale {
            return Err(Error::invalid(format!("matrix has eigenvalue {l} below zero")));
        }
        roots.push(l.max(0.0).sqrt());
    }
    let d = DMatrix::from_diagonal(&DVector::from_vec(roots.clone()));
    Ok((&eig.eigenvectors * d * eig.eigenvectors.transpose(), roots))
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the trace of the
/// root taken as `Tr((A S2 A)^(1/2))` for `A = S1^(1/2)`.
pub fn frechet(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape("frechet", &[a.mean.len()], &[b.mean.len()]));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let (root_a, _) = psd_sqrt(&a.cov)?;
    let inner = &root_a * &b.cov * &root_a;
    let (_, roots) = psd_sqrt(&inner)?;
    let tr = a.cov.trace() + b.cov.trace() - 2.0 * roots.iter().sum::<f64>();
    Ok((diff + tr).max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel of width
/// `bandwidth`.
pub fn mmd_rbf(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(format!("bandwidth {bandwidth} must be positive")));
    }
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("mmd needs non-empty samples"));
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let mean_k = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let mut s = 0.0;
        for a in p {
            for b in q {
                s += (-sq_dist(a, b) * g).exp();
            }
        }
        s / (p.len() * q.len()) as f64
    };
    Ok((mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)).max(0.0))
}

/// Median of the pairwise distances over the pooled sample; 1 when all
/// points coincide.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq_dist(all[i], all[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    match d.get(d.len() / 2) {
        Some(&m) if m > 0.0 => m,
        _ => 1.0,
    }
}

/// Distance between two embedding samples.
pub fn distance(kind: MetricKind, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    match kind {
        MetricKind::Frechet => frechet(&GaussianStats::from_samples(a)?, &GaussianStats::from_samples(b)?),
        MetricKind::Mmd => mmd_rbf(a, b, median_bandwidth(a, b)),
    }
}

/// The 3-channel composites of `(N, 8, H, W)` stacks in `[0, 1]` material
/// and unit-bump form: one per channel (replicated), then [`TRIPLETS`].
pub fn composites(stacks: &Tensor<f64>) -> Result<Vec<(String, Tensor<f64>)>> {
    let s = stacks.shape();
    if s.len() != 4 || s[1] != PBR_CHANNELS {
        return Err(Error::shape("composites", &[0, PBR_CHANNELS, 0, 0], s));
    }
    let (n, hw) = (s[0], s[2] * s[3]);
    let plane = |i: usize, c: usize| &stacks.data()[(i * PBR_CHANNELS + c) * hw..(i * PBR_CHANNELS + c + 1) * hw];
    let build = |f: &dyn Fn(usize) -> [Vec<f64>; 3]| -> Result<Tensor<f64>> {
        let mut data = Vec::with_capacity(n * 3 * hw);
        for i in 0..n {
            for p in f(i) {
                data.extend(p);
            }
        }
        Tensor::new(&[n, 3, s[2], s[3]], data)
    };
    let gray = |i: usize| -> Vec<f64> {
        (0..hw)
            .map(|k| (0..3).map(|c| LUMA[c] * plane(i, ALBEDO + c)[k]).sum())
            .collect()
    };
    let mut out = Vec::new();
    for (c, name) in CHANNEL_NAMES.iter().enumerate() {
        out.push((
            name.to_string(),
            build(&|i| {
                let p = plane(i, c).to_vec();
                [p.clone(), p.clone(), p]
            })?,
        ));
    }
    let r = |i: usize| plane(i, ROUGHNESS).to_vec();
    let m = |i: usize| plane(i, METALLIC).to_vec();
    let nx = |i: usize| plane(i, BUMP).to_vec();
    let ny = |i: usize| plane(i, BUMP + 1).to_vec();
    let nxy = |i: usize| -> Vec<f64> { nx(i).iter().zip(ny(i)).map(|(a, b)| a.hypot(b)).collect() };
    out.push((TRIPLETS[0].into(), build(&|i| [gray(i), r(i), m(i)])?));
    out.push((TRIPLETS[1].into(), build(&|i| [r(i), m(i), nxy(i)])?));
    out.push((TRIPLETS[2].into(), build(&|i| [gray(i), nx(i), ny(i)])?));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletScore {
    pub metric: MetricKind,
    pub mean: f64,
    pub breakdown: Vec<(String, f64)>,
}

/// Scores every composite of `a` against the same composite of `b` and
/// averages.
pub fn pbr_triplet_score(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    metric: MetricKind,
    backbone: &dyn Embedder,
) -> Result<TripletScore> {
    if a.shape().first() == Some(&0) || b.shape().first() == Some(&0) || a.numel() == 0 || b.numel() == 0 {
        return Err(Error::invalid("triplet score of an empty set"));
    }
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape("pbr_triplet_score", a.shape(), b.shape()));
    }
    let (ca, cb) = (composites(a)?, composites(b)?);
    let mut breakdown = Vec::with_capacity(ca.len());
    for ((name, x), (_, y)) in ca.iter().zip(&cb) {
        let (ex, ey) = (backbone.embed(x)?, backbone.embed(y)?);
        breakdown.push((name.clone(), distance(metric, &ex, &ey)?));
    }
    let mean = breakdown.iter().map(|(_, v)| v).sum::<f64>() / breakdown.len() as f64;
    Ok(TripletScore {
        metric,
        mean,
        breakdown,
    })
}

/// `(1 - lambda) e0 + lambda e1`, shifted and scaled to empirical mean 0
/// and (population) standard deviation 1.
pub fn interp_noise<S: Scalar>(e0: &Tensor<S>, e1: &Tensor<S>, lambda: f64) -> Result<Tensor<S>> {
    check_lambda(lambda)?;
    if e0.shape() != e1.shape() {
        return Err(Error::shape("interp_noise", e0.shape(), e1.shape()));
    }
    let blend: Vec<f64> = e0
        .data()
        .iter()
        .zip(e1.data())
        .map(|(a, b)| (1.0 - lambda) * a.as_f64() + lambda * b.as_f64())
        .collect();
    let n = blend.len() as f64;
    let mean = blend.iter().sum::<f64>() / n;
    let var = blend.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Degenerate("interpolated noise has zero variance"));
    }
    let sd = var.sqrt();
    Tensor::new(e0.shape(), blend.into_iter().map(|v| S::lit((v - mean) / sd)).collect())
}

/// Linear blend of two embeddings.
pub fn interp_prompt<S: Scalar>(e0: &Tensor<S>, e1: &Tensor<S>, lambda: f64) -> Result<Tensor<S>> {
    check_lambda(lambda)?;
    if e0.shape() != e1.shape() {
        return Err(Error::shape("interp_prompt", e0.shape(), e1.shape()));
    }
    let l = S::lit(lambda);
    Tensor::new(
        e0.shape(),
        e0.data()
            .iter()
            .zip(e1.data())
            .map(|(&a, &b)| a + l * (b - a))
            .collect(),
    )
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(format!("blend weight {lambda} outside [0, 1]")))
    }
}

/// Peak signal-to-noise ratio in dB for values spanning `peak`.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats1(mu: f64, var: f64) -> GaussianStats {
        GaussianStats::new(DVector::from_vec(vec![mu]), DMatrix::from_vec(1, 1, vec![var]), 2).unwrap()
    }

    #[test]
    fn frechet_closed_forms() {
        assert!((frechet(&stats1(0.0, 1.0), &stats1(1.0, 4.0)).unwrap() - 2.0).abs() < 1e-12);
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let (m1, m2) = (rng.normal(), rng.normal());
            let (v1, v2) = (rng.uniform_range(0.01, 5.0), rng.uniform_range(0.01, 5.0));
            let want = (m1 - m2).powi(2) + (v1.sqrt() - v2.sqrt()).powi(2);
            let got = frechet(&stats1(m1, v1), &stats1(m2, v2)).unwrap();
            assert!((got - want).abs() < 1e-9, "{got} {want}");
            let back = frechet(&stats1(m2, v2), &stats1(m1, v1)).unwrap();
            assert!((got - back).abs() < 1e-9);
        }
        let xs: Vec<Vec<f64>> = (0..20).map(|_| rng.normals(4)).collect();
        let s = GaussianStats::from_samples(&xs).unwrap();
        assert!(frechet(&s, &s).unwrap().abs() < 1e-9);
        let mut shifted = s.clone();
        shifted.mean[0] += 3.0;
        shifted.mean[2] -= 4.0;
        assert!((frechet(&s, &shifted).unwrap() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_covariances_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianStats::new(DVector::zeros(2), bad, 2).is_err());
        assert!(GaussianStats::from_samples(&[vec![1.0]]).is_err());
    }

    #[test]
    fn mmd_properties() {
        let d: f64 = 1.7;
        let sigma = 0.9;
        let got = mmd_rbf(&[vec![0.0, 0.0]], &[vec![d, 0.0]], sigma).unwrap();
        assert!((got - (2.0 - 2.0 * (-d * d / (2.0 * sigma * sigma)).exp())).abs() < 1e-12);
        assert_eq!(mmd_rbf(&[vec![1.0]], &[vec![1.0]], 1.0).unwrap(), 0.0);
        assert!(mmd_rbf(&[vec![1.0]], &[vec![1.0]], 0.0).is_err());
        let mut rng = Rng::new(2);
        let xs: Vec<Vec<f64>> = (0..30).map(|_| rng.normals(3)).collect();
        assert!(mmd_rbf(&xs, &xs, 1.0).unwrap() < 1e-12);
        let moved = |off: f64| {
            xs.iter()
                .map(|x| x.iter().map(|v| v + off).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        let ys: Vec<Vec<f64>> = (0..30).map(|_| rng.normals(3)).collect();
        let scores: Vec<f64> = [4.0, 2.0, 0.5]
            .iter()
            .map(|&o| mmd_rbf(&ys, &moved(o), 1.5).unwrap())
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    struct Constant;
    impl Embedder for Constant {
        fn embed(&self, images: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![0.5, -1.0]; images.shape()[0]])
        }
    }

    fn stacks(seed: u64, n: usize) -> Tensor<f64> {
        Tensor::uniform(&[n, 8, 8, 8], 0.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn triplet_score_layout_and_zero_cases() {
        assert_eq!(TRIPLETS[0], "grayscale albedo, roughness, metallic");
        assert_eq!(TRIPLETS[1], "roughness, metallic, normal XY norm");
        assert_eq!(TRIPLETS[2], "grayscale albedo, normal X, normal Y");
        let a = stacks(1, 6);
        let bb = ConvBackbone::new(3, 8).unwrap();
        let s = pbr_triplet_score(&a, &a, MetricKind::Frechet, &bb).unwrap();
        assert_eq!(s.breakdown.len(), PBR_CHANNELS + 3);
        assert!(s.mean.abs() < 1e-9, "{}", s.mean);
        let c = pbr_triplet_score(&a, &stacks(2, 5), MetricKind::Frechet, &Constant).unwrap();
        assert_eq!(c.mean, 0.0);
        let m = pbr_triplet_score(&a, &a, MetricKind::Mmd, &bb).unwrap();
        assert!(m.mean.abs() < 1e-12);
        assert!(pbr_triplet_score(&a, &Tensor::zeros(&[0, 8, 8, 8]), MetricKind::Frechet, &bb).is_err());
    }

    #[test]
    fn composites_follow_definitions() {
        let a = stacks(4, 1);
        let c = composites(&a).unwrap();
        let hw = 64;
        let k = 10;
        let ch = |i: usize| a.data()[i * hw + k];
        let gray = 0.2126 * ch(0) + 0.7152 * ch(1) + 0.0722 * ch(2);
        let t2 = &c[PBR_CHANNELS + 1].1;
        assert!((t2.data()[2 * hw + k] - ch(5).hypot(ch(6))).abs() < 1e-15);
        let t3 = &c[PBR_CHANNELS + 2].1;
        assert!((t3.data()[k] - gray).abs() < 1e-15);
        assert_eq!(c[3].1.data()[hw + k], ch(3));
    }

    #[test]
    fn noise_interpolation_normalizes() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let a = Tensor::<f64>::randn(&[1, 3, 8, 8], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[1, 3, 8, 8], 1.0, &mut rng);
            let out = interp_noise(&a, &b, rng.uniform()).unwrap();
            let n = out.numel() as f64;
            let m = out.data().iter().sum::<f64>() / n;
            let sd = (out.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
        }
        let z = Tensor::<f64>::zeros(&[4]);
        assert!(interp_noise(&z, &z, 0.5).is_err());
        assert!(interp_noise(&z, &z, 1.5).is_err());
    }

    #[test]
    fn prompt_interpolation_endpoints() {
        let mut rng = Rng::new(6);
        let a = Tensor::<f64>::randn(&[1, 4, 3, 1], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[1, 4, 3, 1], 1.0, &mut rng);
        assert!(interp_prompt(&a, &b, 0.0).unwrap().bitwise_eq(&a));
        assert!(interp_prompt(&a, &b, 1.0).unwrap().max_abs_diff(&b) < 1e-15);
        let mid = interp_prompt(&a, &b, 0.5).unwrap();
        for ((m, x), y) in mid.data().iter().zip(a.data()).zip(b.data()) {
            assert!((m - 0.5 * (x + y)).abs() < 1e-15);
        }
    }

    #[test]
    fn psnr_of_known_error() {
        let a = Tensor::<f64>::zeros(&[4]);
        let b = Tensor::<f64>::full(&[4], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
    }
}
