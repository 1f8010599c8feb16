//! Acceptance criteria 1 to 10, one PASS/FAIL line each.
//!
//! `ACCEPTANCE_ONLY=2,5` runs a subset. `ACCEPTANCE_ABLATION_STEPS` sets the
//! training steps of each ablation run (default: the desk run's).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use collab_core::checks::{gradcheck_suite, GRADCHECK_TOL};
use collab_core::collab::{CollabConfig, CommVariant, DualBranchModel, WiringMode, RGB_PREFIX};
use collab_core::dataset::{Dataset, DatasetConfig};
use collab_core::diffusion::{ddpm_step, make_schedule, q_sample, Prediction, ScheduleKind, StepNoise};
use collab_core::geometry::{
    frame_image, radial_z_tangent, render_screen_normals, Camera, Surface, SurfaceKind, Vec3, Vec3d,
};
use collab_core::metrics::{
    frechet, interp_noise, median_bandwidth, mmd_rbf, pbr_triplet_score, ConvBackbone, GaussianStats, TRIPLETS,
};
use collab_core::nets::{Prompt, UNet, UNetConfig};
use collab_core::raster::{save_png, Raster};
use collab_core::shading::{apply_bump, brdf_eval, render, render_radiance, shade_texel, LightRig, PbrStack, Texel};
use collab_core::training::pipeline::{
    eval_inputs, eval_stage, interp_stage, pretrain_stage, sample_grid, stacks_tensor, train_stage, vae_summary,
    Generated, Trained,
};
use collab_core::training::{
    mean_loss, pretrain_rgb_base, train_collab, ExperimentConfig, InterpKind, LoopConfig, MetricKind, PbrCodec,
    StepLog, TrainData,
};
use collab_core::vae::{Vae, VaeConfig};
use collab_core::{ParamStore, Rng, Tensor};
use nalgebra::{DMatrix, DVector};

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn artifacts() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact dir");
    dir
}

fn randomize_zeros(store: &mut ParamStore<f32>, rng: &mut Rng) {
    for (_, p) in store.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value = Tensor::randn(p.value.shape(), 0.2, rng);
        }
    }
}

fn c1() -> Outcome {
    let t = Instant::now();
    let results = gradcheck_suite(1).map_err(err)?;
    let elapsed = t.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.error.total_cmp(&b.error))
        .expect("checks");
    let ok = results.iter().all(|r| r.passed()) && elapsed < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "{} blocks, worst {} {:.2e} (tol {GRADCHECK_TOL:e}), {:.1}s",
            results.len(),
            worst.block,
            worst.error,
            elapsed.as_secs_f64()
        ),
    ))
}

fn c2() -> Outcome {
    let cfg = UNetConfig::default();
    let mut rng = Rng::new(2);
    let mut base = ParamStore::<f32>::new();
    let net = UNet::new(&cfg, RGB_PREFIX, &mut base, &mut rng).map_err(err)?;
    randomize_zeros(&mut base, &mut rng);
    let mut cases = 0;
    let mut variants: Vec<(WiringMode, CommVariant)> =
        [WiringMode::Bidirectional, WiringMode::OneWay, WiringMode::Clockwise]
            .map(|w| (w, CommVariant::LinearZero))
            .to_vec();
    variants.push((WiringMode::Bidirectional, CommVariant::Mlp4));
    variants.push((WiringMode::Bidirectional, CommVariant::GlobalAttention));
    for (wiring, comm) in variants {
        let config = CollabConfig {
            wiring,
            comm,
            ..Default::default()
        };
        let model = DualBranchModel::new(&cfg, &base, &config, &mut rng).map_err(err)?;
        for _ in 0..20 {
            let zr = Tensor::<f32>::randn(&[2, 3, 16, 16], 1.0, &mut rng);
            let zp = Tensor::<f32>::randn(&[2, 8, 16, 16], 1.0, &mut rng);
            let cond = Tensor::<f32>::randn(&[2, 4, 16, 16], 1.0, &mut rng);
            let ts = [1 + rng.below(64), 1 + rng.below(64)];
            let tokens = [[rng.below(4), 4 + rng.below(5), 9 + rng.below(5)]; 2];
            let dual = {
                let mut cx = collab_core::tensor::Ctx::new(&model.store);
                let (a, b, c) = (cx.input(zr.clone()), cx.input(zp), cx.input(cond));
                let (pr, _) = model.dual_forward(&mut cx, a, b, c, &ts, &tokens).map_err(err)?;
                cx.value(pr).clone()
            };
            let alone = {
                let mut cx = collab_core::tensor::Ctx::new(&base);
                let a = cx.input(zr);
                let p = net
                    .predict(&mut cx, a, &ts, Some(Prompt::Tokens(&tokens)))
                    .map_err(err)?;
                cx.value(p).clone()
            };
            if !dual.bitwise_eq(&alone) {
                return Ok((
                    false,
                    format!("{wiring:?}/{comm:?} differs from the base on case {cases}"),
                ));
            }
            cases += 1;
        }
    }
    Ok((
        true,
        format!("{cases} inputs bitwise equal over 3 wirings and 3 layer types"),
    ))
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        channel_mults: vec![1, 2],
        attention_levels: vec![false, true],
        ..Default::default()
    }
}

fn tiny_data(ds_root: &Path) -> Result<(Dataset, TrainData<f32>), String> {
    let cfg = DatasetConfig {
        objects: 4,
        views: 4,
        resolution: 16,
        seed: 3,
        holdout_fraction: 0.25,
    };
    let ds = Dataset::generate(&cfg, ds_root).map_err(err)?;
    let recs: Vec<_> = ds.train_indices().into_iter().map(|i| &ds.records[i]).collect();
    let data = TrainData::from_records(&recs, &PbrCodec::Pixel).map_err(err)?;
    Ok((ds, data))
}

fn rgb_of(
    model: &DualBranchModel<f32>,
    zr: &Tensor<f32>,
    zp: &Tensor<f32>,
    cond: &Tensor<f32>,
    t: usize,
) -> Result<Tensor<f32>, String> {
    let mut cx = collab_core::tensor::Ctx::new(&model.store);
    let (a, b, c) = (cx.input(zr.clone()), cx.input(zp.clone()), cx.input(cond.clone()));
    let (pr, _) = model.dual_forward(&mut cx, a, b, c, &[t], &[[0, 4, 9]]).map_err(err)?;
    Ok(cx.value(pr).clone())
}

fn c3() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let (_, data) = tiny_data(tmp.path())?;
    let cfg = tiny_unet();
    let schedule = make_schedule(ScheduleKind::Linear, 16, true).map_err(err)?;
    let mut rng = Rng::new(3);
    let mut base = ParamStore::<f32>::new();
    UNet::new(&cfg, RGB_PREFIX, &mut base, &mut rng).map_err(err)?;
    randomize_zeros(&mut base, &mut rng);
    let lc = LoopConfig {
        steps: 200,
        batch_size: 4,
        lr: 1e-3,
        ..Default::default()
    };
    let mut detail = Vec::new();
    let mut ok = true;
    for wiring in [WiringMode::Bidirectional, WiringMode::OneWay] {
        let config = CollabConfig {
            wiring,
            ..Default::default()
        };
        let mut model = DualBranchModel::new(&cfg, &base, &config, &mut rng).map_err(err)?;
        let ckpt0 = collab_core::checkpoint::Checkpoint {
            config: serde_json::Value::Null,
            params: model.store.clone(),
        }
        .to_bytes()
        .map_err(err)?;
        let hash0 = collab_core::checkpoint::Checkpoint::<f32>::from_bytes(&ckpt0)
            .map_err(err)?
            .params
            .frozen_hash();
        let logs = train_collab(&mut model, &data, &lc, &schedule, 3, &mut |_, _| Ok(())).map_err(err)?;
        let same_hash = model.frozen_hash() == hash0 && logs.iter().all(|l| l.frozen_hash == hash0);
        let comm_moved = model
            .store
            .iter()
            .any(|(_, p)| p.name.starts_with("comm.") && p.value.data().iter().any(|&v| v != 0.0));
        ok &= same_hash && comm_moved && logs.len() == 200;
        detail.push(format!(
            "{}: hash {}",
            wiring.name(),
            if same_hash { "equal" } else { "CHANGED" }
        ));
        // Perturbing the PBR input and the condition must leave the RGB
        // prediction untouched in one-way mode, and change it otherwise.
        let mut changed = 0;
        for k in 0..20 {
            let zr = Tensor::<f32>::randn(&[1, 3, 16, 16], 1.0, &mut rng);
            let zp = Tensor::<f32>::randn(&[1, 8, 16, 16], 1.0, &mut rng);
            let cond = Tensor::<f32>::randn(&[1, 4, 16, 16], 1.0, &mut rng);
            let zp2 = zp.map(|v| v + 0.5);
            let cond2 = cond.map(|v| -v);
            let t = 1 + k * 3 % 16;
            let a = rgb_of(&model, &zr, &zp, &cond, t)?;
            let b = rgb_of(&model, &zr, &zp2, &cond2, t)?;
            changed += usize::from(!a.bitwise_eq(&b));
        }
        match wiring {
            WiringMode::OneWay => {
                ok &= changed == 0;
                detail.push(format!("one_way RGB changed on {changed}/20 perturbations"));
            }
            _ => detail.push(format!("bidirectional RGB changed on {changed}/20 (control)")),
        }
    }
    Ok((ok, format!("200 steps each; {}", detail.join("; "))))
}

fn c4() -> Outcome {
    let s = make_schedule(ScheduleKind::Linear, 64, true).map_err(err)?;
    let mut acc = 1.0;
    let mut prod_err: f64 = 0.0;
    for t in 1..=s.steps() {
        acc *= s.alpha(t);
        prod_err = prod_err.max((acc - s.alpha_bar(t)).abs());
    }
    let terminal_zero = s.alpha_bar(s.steps()) == 0.0;

    let mut rng = Rng::new(4);
    let n = 100_000;
    let x0 = 0.7;
    let mut q_err: f64 = 0.0;
    for t in [8, 32, 56] {
        let z0 = Tensor::<f64>::full(&[n, 1], x0);
        let eps = Tensor::<f64>::randn(&[n, 1], 1.0, &mut rng);
        let zt = q_sample(&z0, &[t], &eps, &s).map_err(err)?;
        let m = zt.data().iter().sum::<f64>() / n as f64;
        let sd = (zt.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let (mu, sigma) = (s.alpha_bar(t).sqrt() * x0, (1.0 - s.alpha_bar(t)).sqrt());
        q_err = q_err
            .max((m - mu).abs() / mu.abs().max(sigma))
            .max((sd - sigma).abs() / sigma);
    }

    // Oracle reverse chains: epsilon on a schedule with nonzero terminal
    // alpha_bar, v on the zero-terminal default.
    let mut recon_err: f64 = 0.0;
    for (zero_terminal, kind) in [(false, Prediction::Epsilon), (true, Prediction::V)] {
        let s = make_schedule(ScheduleKind::Linear, 64, zero_terminal).map_err(err)?;
        if s.parameterization != kind {
            return Ok((false, format!("unexpected parameterization {:?}", s.parameterization)));
        }
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 0.5, &mut rng);
        let mut z = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        for t in (1..=s.steps()).rev() {
            let ab = s.alpha_bar(t);
            let pred: Vec<f64> = z
                .data()
                .iter()
                .zip(x.data())
                .map(|(&zt, &x0)| {
                    let eps = (zt - ab.sqrt() * x0) / (1.0 - ab).sqrt();
                    match kind {
                        Prediction::V => ab.sqrt() * eps - (1.0 - ab).sqrt() * x0,
                        _ => eps,
                    }
                })
                .collect();
            let pred = Tensor::new(z.shape(), pred).map_err(err)?;
            z = ddpm_step(&pred, &z, t, &s, StepNoise::Fresh(&mut rng)).map_err(err)?;
        }
        recon_err = recon_err.max(z.max_abs_diff(&x));
    }
    let ok = prod_err < 1e-12 && terminal_zero && q_err < 0.02 && recon_err < 1e-4;
    Ok((
        ok,
        format!(
            "cumprod err {prod_err:.1e}, terminal alpha_bar zero: {terminal_zero}, q_sample rel err {:.2}%, oracle reconstruction err {recon_err:.1e}",
            100.0 * q_err
        ),
    ))
}

fn unit(rng: &mut Rng) -> Vec3d {
    loop {
        if let Some(v) = Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalized() {
            return v;
        }
    }
}

/// Independent evaluation of the radial tangent: `t = normalize(r - (r.n) n)`
/// with `r = (-p_y, p_x, 0)`, `b = n x t`.
fn frame_oracle(p: [f64; 3], n: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let r = [-p[1], p[0], 0.0];
    let rn = r[0] * n[0] + r[1] * n[1];
    let t = [r[0] - rn * n[0], r[1] - rn * n[1], -rn * n[2]];
    let len = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
    let t = t.map(|v| v / len);
    let b = [
        n[1] * t[2] - n[2] * t[1],
        n[2] * t[0] - n[0] * t[2],
        n[0] * t[1] - n[1] * t[0],
    ];
    (t, b)
}

fn c5() -> Outcome {
    let mut rng = Rng::new(5);
    let (mut ortho, mut det, mut oracle): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..10_000 {
        let p = Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 2.0;
        let n = unit(&mut rng);
        let f = radial_z_tangent(p, n).map_err(err)?;
        if f.degenerate {
            continue;
        }
        ortho = ortho.max(f.orthonormality_error());
        det = det.max((f.det() - 1.0).abs());
        let (t, b) = frame_oracle(p.to_array(), n.to_array());
        oracle = oracle
            .max(f.t.max_abs_diff(Vec3::new(t[0], t[1], t[2])))
            .max(f.b.max_abs_diff(Vec3::new(b[0], b[1], b[2])));
    }
    let v = Vec3::new;
    let e1 = radial_z_tangent(v(1.0, 0.0, 0.0), v(1.0, 0.0, 0.0)).map_err(err)?;
    let e2 = radial_z_tangent(v(1.0, 0.0, 0.0), v(0.0, 0.0, 1.0)).map_err(err)?;
    let hand = e1.t == v(0.0, 1.0, 0.0)
        && e1.b == v(0.0, 0.0, 1.0)
        && e1.n == v(1.0, 0.0, 0.0)
        && e2.t == v(0.0, 1.0, 0.0)
        && e2.b == v(-1.0, 0.0, 0.0)
        && e2.n == v(0.0, 0.0, 1.0);
    let ok = ortho < 1e-6 && det < 1e-6 && oracle < 1e-6 && hand;
    Ok((
        ok,
        format!("10^4 frames: orthonormality {ortho:.1e}, |det-1| {det:.1e}, oracle {oracle:.1e}; hand examples exact: {hand}"),
    ))
}

/// Scalar reference of the reflectance model, written out term by term.
fn brdf_oracle(albedo: [f64; 3], rough: f64, metal: f64, n: Vec3d, v: Vec3d, l: Vec3d) -> [f64; 3] {
    let pi = std::f64::consts::PI;
    let nl = n.dot(l);
    if nl <= 0.0 {
        return [0.0; 3];
    }
    let nv = n.dot(v).max(1e-4);
    let hv = v + l;
    let h = hv * (1.0 / hv.norm());
    let nh = n.dot(h).max(0.0);
    let vh = v.dot(h).max(0.0);
    let alpha = (rough * rough).max(1e-3);
    let a2 = alpha * alpha;
    let dd = nh * nh * (a2 - 1.0) + 1.0;
    let ndf = a2 / (pi * dd * dd);
    let lambda_v = (nv * nv + a2 * (1.0 - nv * nv)).sqrt();
    let lambda_l = (nl * nl + a2 * (1.0 - nl * nl)).sqrt();
    let vis = 2.0 * nv * nl / (nl * lambda_v + nv * lambda_l);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let f0 = 0.04 * (1.0 - metal) + albedo[c] * metal;
        let fresnel = f0 + (1.0 - f0) * (1.0 - vh).powi(5);
        out[c] = (1.0 - metal) * albedo[c] / pi + ndf * vis * fresnel / (4.0 * nv * nl).max(1e-4);
    }
    out
}

fn c6() -> Outcome {
    let cam = Camera::new(
        Vec3::new(0.0, -3.0, 0.6),
        Vec3::zero(),
        Vec3::new(0.0, 0.0, 1.0),
        0.8,
        24,
        24,
    )
    .map_err(err)?;
    let surface = Surface::new(SurfaceKind::Sphere { radius: 1.0 });
    let frames = frame_image(Some(&surface), &cam)
        .and_then(|f| f.to_view(&cam))
        .map_err(err)?;
    let mask = render_screen_normals(Some(&surface), &cam).map_err(err)?.mask;
    let mut rng = Rng::new(6);
    let mut pbr = PbrStack::zeros(24, 24);
    for (i, &m) in mask.iter().enumerate() {
        let t = match m > 0.5 {
            true => Texel::flat(
                [rng.uniform(), rng.uniform(), rng.uniform()],
                0.2 + 0.8 * rng.uniform(),
                rng.uniform(),
            ),
            false => Texel::flat([0.0; 3], 0.0, 0.0),
        };
        pbr.set_texel(i, &t);
    }
    let dark = render(&pbr, &frames, &mask, &LightRig::dark()).map_err(err)?;
    let black = dark.data.iter().all(|&v| v == 0.0);

    let rig = LightRig::default().scaled(0.3);
    let img = render_radiance(&pbr, &frames, &mask, &rig).map_err(err)?;
    let mut bump_err: f64 = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m < 0.5 {
            continue;
        }
        let f = frames.frames[i].ok_or("foreground pixel without frame")?;
        let direct = shade_texel(&pbr.texel(i), f.n, &rig);
        for c in 0..3 {
            bump_err = bump_err.max((img.get(c, i) as f64 - direct[c]).abs());
        }
    }

    let mut recip: f64 = 0.0;
    let mut golden: f64 = 0.0;
    let mut pairs = 0;
    while pairs < 1000 {
        let n = unit(&mut rng);
        let mut v = unit(&mut rng);
        let mut l = unit(&mut rng);
        if v.dot(n) < 0.0 {
            v = -v;
        }
        if l.dot(n) < 0.0 {
            l = -l;
        }
        // The cosine floor only engages at grazing angles and is one-sided.
        if v.dot(n) < 1e-2 || l.dot(n) < 1e-2 {
            continue;
        }
        pairs += 1;
        let a = [rng.uniform(), rng.uniform(), rng.uniform()];
        let (r, m) = (rng.uniform(), rng.uniform());
        let f1 = brdf_eval(a, r, m, n, v, l);
        let f2 = brdf_eval(a, r, m, n, l, v);
        let o = brdf_oracle(a, r, m, n, v, l);
        for c in 0..3 {
            recip = recip.max((f1[c] - f2[c]).abs() / f1[c].abs().max(1.0));
            golden = golden.max((f1[c] - o[c]).abs() / o[c].abs().max(1.0));
        }
    }
    // One full pixel: ambient plus the key light along the view direction.
    let t = Texel::flat([0.8, 0.5, 0.2], 0.6, 0.3);
    let f = radial_z_tangent(Vec3::new(0.4, 0.1, 0.2), Vec3::new(0.0, 0.6, 0.8)).map_err(err)?;
    let ns = apply_bump(&f, Vec3::new(0.0, 0.0, 1.0)).map_err(err)?;
    let rig = LightRig::default();
    let got = shade_texel(&t, ns, &rig);
    let (vdir, light) = (Vec3::new(0.0, 0.0, 1.0), &rig.lights[0]);
    let o = brdf_oracle(t.albedo, t.roughness, t.metallic, ns, vdir, light.direction);
    let cos = ns.dot(light.direction).max(0.0);
    for c in 0..3 {
        let expect = rig.ambient[c] * t.albedo[c] + o[c] * light.intensity[c] * cos;
        golden = golden.max((got[c] - expect).abs());
    }
    let ok = black && bump_err < 1e-6 && recip < 1e-6 && golden < 1e-6;
    Ok((
        ok,
        format!("dark rig black: {black}; identity bump err {bump_err:.1e}; reciprocity {recip:.1e} over 10^3; oracle golden {golden:.1e}"),
    ))
}

fn c7() -> Outcome {
    let mut rng = Rng::new(7);
    let mut closed: f64 = 0.0;
    for _ in 0..100 {
        let (m1, m2) = (rng.normal() * 3.0, rng.normal() * 3.0);
        let (s1, s2) = (0.1 + 2.0 * rng.uniform(), 0.1 + 2.0 * rng.uniform());
        let g =
            |m: f64, s: f64| GaussianStats::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, s * s), 10);
        let d = frechet(&g(m1, s1).map_err(err)?, &g(m2, s2).map_err(err)?).map_err(err)?;
        closed = closed.max((d - ((m1 - m2).powi(2) + (s1 - s2).powi(2))).abs());
    }
    let xs: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
    let ys: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.normal() + 0.3).collect()).collect();
    let a = GaussianStats::from_samples(&xs).map_err(err)?;
    let self_dist = frechet(&a, &a).map_err(err)?;
    let bw = median_bandwidth(&xs, &ys);
    let mmd_xy = mmd_rbf(&xs, &ys, bw).map_err(err)?;
    let mmd_xx = mmd_rbf(&xs, &xs, bw).map_err(err)?;
    let expected = [
        "grayscale albedo, roughness, metallic",
        "roughness, metallic, normal XY norm",
        "grayscale albedo, normal X, normal Y",
    ];
    let triplets = TRIPLETS == expected;
    let tmp = tempfile::tempdir().map_err(err)?;
    let (ds, _) = tiny_data(tmp.path())?;
    let stacks: Vec<PbrStack> = ds.records.iter().map(|r| r.pbr.clone()).collect();
    let st = stacks_tensor(&stacks).map_err(err)?;
    let backbone = ConvBackbone::new(7, 16).map_err(err)?;
    let score = pbr_triplet_score(&st, &st, MetricKind::Frechet, &backbone).map_err(err)?;
    let ok = closed < 1e-9
        && self_dist.abs() < 1e-9
        && mmd_xy >= 0.0
        && mmd_xx == 0.0
        && triplets
        && score.mean.abs() < 1e-9;
    Ok((
        ok,
        format!(
            "1-D closed form err {closed:.1e}; frechet(A,A) {self_dist:.1e}; mmd {mmd_xy:.3} >= 0, mmd(A,A) {mmd_xx}; triplets verbatim: {triplets}; triplet score(A,A) {:.1e} over {} parts",
            score.mean,
            score.breakdown.len()
        ),
    ))
}

/// Everything the desk-scale criteria share.
struct Desk {
    cfg: ExperimentConfig,
    ds: Dataset,
    base: ParamStore<f32>,
    pre_logs: Vec<StepLog>,
    trained: Trained,
    logs: Vec<StepLog>,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn desk() -> Result<Desk, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = ExperimentConfig::default();
    let ds = Dataset::generate(&cfg.data, dir.path()).map_err(err)?;
    let t = Instant::now();
    let (base, pre_logs) = pretrain_stage(&cfg, &ds, None).map_err(err)?;
    let (trained, logs) = train_stage(&cfg, &ds, &base, None, None).map_err(err)?;
    Ok(Desk {
        elapsed: t.elapsed(),
        cfg,
        ds,
        base,
        pre_logs,
        trained,
        logs,
        _dir: dir,
    })
}

fn bitwise_logs(a: &[StepLog], b: &[StepLog]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.loss.to_bits() == y.loss.to_bits() && x.frozen_hash == y.frozen_hash)
}

fn c8(desk: &Desk) -> Outcome {
    let cfg = &desk.cfg;
    let n = desk.logs.len();
    let first = mean_loss(&desk.logs, 0..100);
    let last = mean_loss(&desk.logs, n.saturating_sub(100)..n);
    let ratio = last / first;
    let (report, rgbs, stacks, conds) = eval_stage(&desk.trained, &desk.ds).map_err(err)?;
    save_png(
        &sample_grid(&conds[..8], &stacks[..8], &rgbs[..8]).map_err(err)?,
        &artifacts().join("desk_samples.png"),
    )
    .map_err(err)?;

    // Determinism: a shorter rerun reproduces the logged prefix, and two
    // sampling runs from one seed agree bitwise.
    let k = 20;
    let schedule = cfg.diffusion.schedule().map_err(err)?;
    let recs: Vec<_> = desk
        .ds
        .train_indices()
        .into_iter()
        .map(|i| &desk.ds.records[i])
        .collect();
    let data = TrainData::<f32>::from_records(&recs, &PbrCodec::Pixel).map_err(err)?;
    let short = LoopConfig {
        steps: k,
        ..cfg.pretrain.clone()
    };
    let (_, _, pre) =
        pretrain_rgb_base(&cfg.unet, &data, &short, &schedule, cfg.run_seed, &mut |_, _| Ok(())).map_err(err)?;
    let mut short_cfg = cfg.clone();
    short_cfg.train.steps = k;
    let (_, col) = train_stage(&short_cfg, &desk.ds, &desk.base, None, None).map_err(err)?;
    let (cond, tokens, _, _) = eval_inputs(&desk.ds, 2).map_err(err)?;
    let draw = || -> Result<Generated, String> {
        let mut rng = Rng::new(99);
        desk.trained
            .generate(&cond, &tokens, &schedule, &mut rng, Default::default())
            .map_err(err)
    };
    let (g1, g2) = (draw()?, draw()?);
    let same_samples = g1.stacks.iter().zip(&g2.stacks).all(|(a, b)| a.raster == b.raster)
        && g1.rgbs.iter().zip(&g2.rgbs).all(|(a, b)| a == b);
    let deterministic = bitwise_logs(&pre, &desk.pre_logs[..k]) && bitwise_logs(&col, &desk.logs[..k]) && same_samples;

    let ok = desk.elapsed < Duration::from_secs(3600) && ratio < 0.6 && report.stacks_valid && deterministic;
    Ok((
        ok,
        format!(
            "{} objects x {} views at {}px; {} + {} steps in {:.1} min; joint loss {first:.4} -> {last:.4} (ratio {ratio:.3}); {} sampled stacks valid: {}; deterministic: {deterministic}",
            cfg.data.objects,
            cfg.data.views,
            cfg.data.resolution,
            desk.pre_logs.len(),
            n,
            desk.elapsed.as_secs_f64() / 60.0,
            report.samples,
            report.stacks_valid
        ),
    ))
}

/// Samples per ablation evaluation: four per held-out view.
const ABLATION_EVAL_SAMPLES: usize = 64;

fn ablation_steps(desk: &Desk) -> usize {
    std::env::var("ACCEPTANCE_ABLATION_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(desk.cfg.train.steps)
}

fn c9(desk: &Desk) -> Outcome {
    let steps = ablation_steps(desk);
    let seeds = [0, 1, 2].map(|k| desk.cfg.run_seed + k);
    let mut wins = 0;
    let mut clockwise_better = 0;
    let mut lines = Vec::new();
    for &seed in &seeds {
        let score = |wiring: WiringMode| -> Result<f64, String> {
            let mut cfg = desk.cfg.clone();
            cfg.run_seed = seed;
            cfg.train.steps = steps;
            cfg.collab.wiring = wiring;
            let mut trained = match cfg == desk.cfg {
                true => desk.trained.clone(),
                false => train_stage(&cfg, &desk.ds, &desk.base, None, None).map_err(err)?.0,
            };
            trained.config.eval.samples = ABLATION_EVAL_SAMPLES;
            Ok(eval_stage(&trained, &desk.ds).map_err(err)?.0.score.mean)
        };
        let (bi, one, cw) = (
            score(WiringMode::Bidirectional)?,
            score(WiringMode::OneWay)?,
            score(WiringMode::Clockwise)?,
        );
        wins += usize::from(bi < one);
        clockwise_better += usize::from(cw < bi);
        lines.push(format!("seed {seed}: bi {bi:.4} one_way {one:.4} clockwise {cw:.4}"));
    }

    let recs = |idx: Vec<usize>| -> Vec<_> { idx.into_iter().map(|i| &desk.ds.records[i]).collect() };
    let train = recs(desk.ds.train_indices());
    let vae_steps = desk.cfg.vae_train.steps;
    let mut vae_wins = 0;
    for &seed in &seeds {
        let psnr = |vcfg: VaeConfig| -> Result<f64, String> {
            let images = collab_core::training::pipeline::vae_images(&vcfg, &train).map_err(err)?;
            let mut vae = Vae::<f32>::new(&vcfg, &mut Rng::new(seed).fork_named("vae-init")).map_err(err)?;
            collab_core::training::train_vae(&mut vae, &images, &desk.cfg.vae_train, seed, &mut |_, _| Ok(()))
                .map_err(err)?;
            Ok(vae_summary(&vae, &train).map_err(err)?.stack_psnr)
        };
        let (p, r) = (psnr(VaeConfig::default())?, psnr(VaeConfig::rgb())?);
        vae_wins += usize::from(p > r);
        lines.push(format!("seed {seed}: PBR VAE {p:.2} dB, RGB VAE on triplets {r:.2} dB"));
    }
    let ok = wins >= 2 && vae_wins == seeds.len();
    Ok((
        ok,
        format!(
            "(a) bidirectional beats one_way in {wins}/3 seeds ({steps} steps, {ABLATION_EVAL_SAMPLES} samples each); (b) PBR VAE wins {vae_wins}/3 ({vae_steps} steps); clockwise below bidirectional in {clockwise_better}/3 (reported only). {}",
            lines.join("; ")
        ),
    ))
}

fn c10(desk: &Desk) -> Outcome {
    let mut rng = Rng::new(10);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shape = [1 + rng.below(3), 1 + rng.below(8), 2 + rng.below(15), 2 + rng.below(15)];
        let e0 = Tensor::<f64>::randn(&shape, 1.0 + rng.uniform(), &mut rng);
        let shift = rng.normal();
        let e1 = Tensor::<f64>::randn(&shape, 1.0, &mut rng).map(|v| v + shift);
        let lambda = rng.uniform();
        let x = interp_noise(&e0, &e1, lambda).map_err(err)?;
        let n = x.numel() as f64;
        let m = x.data().iter().sum::<f64>() / n;
        let sd = (x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        worst = worst.max(m.abs()).max((sd - 1.0).abs());
    }
    // The model samples in f32, so its starting noise is held to f32 accuracy.
    let mut model_noise: f64 = 0.0;
    let mut written = Vec::new();
    for kind in [InterpKind::Noise, InterpKind::Prompt] {
        let mut trained = desk.trained.clone();
        trained.config.interp.kind = kind;
        let points = interp_stage(&trained, &desk.ds).map_err(err)?;
        let cond = desk.ds.records[desk.ds.eval_indices()[0]].condition();
        let conds: Vec<Raster> = points.iter().map(|_| cond.clone()).collect();
        let stacks: Vec<PbrStack> = points.iter().map(|p| p.stack.clone()).collect();
        let rgbs: Vec<Raster> = points.iter().map(|p| p.rgb.clone()).collect();
        let path = artifacts().join(format!("interp_{kind:?}.png").to_lowercase());
        save_png(&sample_grid(&conds, &stacks, &rgbs).map_err(err)?, &path).map_err(err)?;
        if kind == InterpKind::Noise {
            for p in &points {
                model_noise = model_noise
                    .max(p.noise_stats.0.abs())
                    .max((p.noise_stats.1 - 1.0).abs());
            }
        }
        written.push(path.display().to_string());
    }
    Ok((
        worst < 1e-6 && model_noise < 1e-5,
        format!(
            "100 blends, worst mean/std deviation {worst:.1e}; model start noise {model_noise:.1e}; grids {}",
            written.join(", ")
        ),
    ))
}

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (ok, detail) = match result {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {n:>2}: {}  {detail} [{:.1}s]",
        if ok { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    ok
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut all = true;
    let light: [(usize, fn() -> Outcome); 7] = [(1, c1), (2, c2), (3, c3), (4, c4), (5, c5), (6, c6), (7, c7)];
    for (n, f) in light {
        if wanted(n) {
            all &= run(n, f);
        }
    }
    if [8, 9, 10].into_iter().any(wanted) {
        let t = Instant::now();
        match catch_unwind(desk) {
            Ok(Ok(d)) => {
                println!(
                    "desk run: pretrain and collab training took {:.1} min",
                    t.elapsed().as_secs_f64() / 60.0
                );
                let heavy: [(usize, fn(&Desk) -> Outcome); 3] = [(8, c8), (9, c9), (10, c10)];
                for (n, f) in heavy {
                    if wanted(n) {
                        all &= run(n, || f(&d));
                    }
                }
            }
            failure => {
                let why = match failure {
                    Ok(Err(e)) => e,
                    _ => "panicked".to_string(),
                };
                for n in [8, 9, 10].into_iter().filter(|&n| wanted(n)) {
                    println!("criterion {n:>2}: FAIL  desk run failed: {why}");
                }
                all = false;
            }
        }
    }
    if !all {
        std::process::exit(1);
    }
}
