//! Run directories and the end-to-end stages shared by the command line and
//! the acceptance suite.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    pretrain_rgb_base, sample_finetune, train_collab, train_finetune, train_vae, ExperimentConfig, ModelKind, PbrCodec,
    StepLog, TrainData,
};
use crate::checkpoint::Checkpoint;
use crate::collab::{
    build_finetune_baseline, sample_joint_raw, to_images, CollabConfig, CommVariant, DualBranchModel, FinetuneModel,
    PbrSpace, SampleOptions, WiringMode,
};
use crate::dataset::{Dataset, SampleRecord};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::metrics::{pbr_triplet_score, psnr, ConvBackbone, TripletScore};
use crate::raster::{grid, Raster};
use crate::rng::Rng;
use crate::shading::{PbrStack, BUMP, METALLIC, ROUGHNESS};
use crate::tensor::{ParamStore, Tensor};
use crate::vae::{Vae, VaeConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.jsonl";
pub const CKPT_DIR: &str = "ckpt";
pub const SAMPLES_DIR: &str = "samples";
pub const REPORT_FILE: &str = "report.json";

/// Largest batch pushed through a sampler at once.
const SAMPLE_CHUNK: usize = 8;

/// Layout: `config.toml`, `log.jsonl`, `ckpt/`, `samples/`, `report.json`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    /// Print a loss line to stderr every 100 steps.
    pub progress: bool,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join(CKPT_DIR))?;
        std::fs::create_dir_all(root.join(SAMPLES_DIR))?;
        Ok(Self {
            root: root.to_path_buf(),
            progress: false,
        })
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        std::fs::write(self.root.join(CONFIG_FILE), cfg.to_toml()?)?;
        Ok(())
    }

    /// Appends one JSON line to the log.
    pub fn log<T: Serialize>(&self, entry: &T) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join(LOG_FILE))?;
        writeln!(f, "{}", serde_json::to_string(entry)?)?;
        Ok(())
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.root.join(CKPT_DIR).join(name)
    }

    pub fn sample(&self, name: &str) -> PathBuf {
        self.root.join(SAMPLES_DIR).join(name)
    }

    pub fn write_report<T: Serialize>(&self, report: &T) -> Result<()> {
        std::fs::write(self.root.join(REPORT_FILE), serde_json::to_string_pretty(report)?)?;
        Ok(())
    }
}

/// JSON header stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `base`, `vae`, `collab`, `finetune` or `finetune_rgb`.
    pub kind: String,
    pub step: usize,
    pub frozen_hash: String,
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub vae: Option<VaeConfig>,
}

impl CheckpointMeta {
    pub fn of(ck: &Checkpoint<f32>) -> Result<Self> {
        serde_json::from_value(ck.config.clone()).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))
    }
}

pub fn make_checkpoint(
    store: &ParamStore<f32>,
    kind: &str,
    step: usize,
    cfg: &ExperimentConfig,
    vae: Option<&VaeConfig>,
) -> Result<Checkpoint<f32>> {
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        step,
        frozen_hash: store.frozen_hash(),
        experiment: cfg.clone(),
        vae: vae.cloned(),
    };
    Ok(Checkpoint {
        config: serde_json::to_value(meta)?,
        params: store.clone(),
    })
}

pub fn load_checkpoint(path: &Path, kind: &str) -> Result<(Checkpoint<f32>, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta = CheckpointMeta::of(&ck)?;
    if meta.kind != kind && !(kind == "model" && ["collab", "finetune", "finetune_rgb"].contains(&meta.kind.as_str())) {
        return Err(Error::Corrupt(format!(
            "{} holds a {} checkpoint, expected {kind}",
            path.display(),
            meta.kind
        )));
    }
    Ok((ck, meta))
}

/// Loads a dataset and checks it against the configured resolution.
pub fn load_dataset(cfg: &ExperimentConfig, root: &Path) -> Result<Dataset> {
    let ds = Dataset::load(root)?;
    if ds.resolution() != cfg.data.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match data.resolution {}",
            ds.resolution(),
            cfg.data.resolution
        )));
    }
    Ok(ds)
}

fn records<'a>(ds: &'a Dataset, idx: &[usize]) -> Vec<&'a SampleRecord> {
    idx.iter().map(|&i| &ds.records[i]).collect()
}

/// Writes the log line and periodic checkpoints of one loop.
fn sink_for<'a>(
    run: Option<&'a RunDir>,
    cfg: &'a ExperimentConfig,
    kind: &'a str,
    prefix: &'a str,
    every: usize,
    vae: Option<&'a VaeConfig>,
) -> impl FnMut(&StepLog, &ParamStore<f32>) -> Result<()> + 'a {
    move |log, store| {
        if let Some(run) = run {
            run.log(log)?;
            if run.progress && (log.step + 1) % 100 == 0 {
                eprintln!("{kind} step {:>6}  loss {:.4}", log.step + 1, log.loss);
            }
            if every > 0 && (log.step + 1) % every == 0 {
                make_checkpoint(store, kind, log.step + 1, cfg, vae)?
                    .save(&run.ckpt(&format!("{prefix}_{:06}.pbrw", log.step + 1)))?;
            }
        }
        Ok(())
    }
}

/// Trains the RGB base; writes `ckpt/base.pbrw`.
pub fn pretrain_stage(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    run: Option<&RunDir>,
) -> Result<(ParamStore<f32>, Vec<StepLog>)> {
    let schedule = cfg.diffusion.schedule()?;
    let data = TrainData::<f32>::from_records(&records(ds, &ds.train_indices()), &PbrCodec::Pixel)?;
    let mut sink = sink_for(run, cfg, "base", "base", cfg.pretrain.checkpoint_every, None);
    let (_, mut store, logs) = pretrain_rgb_base(&cfg.unet, &data, &cfg.pretrain, &schedule, cfg.run_seed, &mut sink)?;
    store.set_all_trainable(false);
    if let Some(run) = run {
        make_checkpoint(&store, "base", cfg.pretrain.steps, cfg, None)?.save(&run.ckpt("base.pbrw"))?;
    }
    Ok((store, logs))
}

/// Signed training images for the autoencoder: PBR stacks for 8 input
/// channels, rendered RGB for 3.
pub fn vae_images(cfg: &VaeConfig, recs: &[&SampleRecord]) -> Result<Tensor<f32>> {
    let data = TrainData::<f32>::from_records(recs, &PbrCodec::Pixel)?;
    match cfg.in_channels {
        8 => Ok(data.pbr),
        3 => Ok(data.rgb),
        c => Err(Error::Config(format!("vae.in_channels must be 8 or 3, got {c}"))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeSummary {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub train_psnr: f64,
    /// PSNR of the PBR stacks through this autoencoder: directly for a PBR
    /// autoencoder, via triplets for an RGB one.
    pub stack_psnr: f64,
}

/// Trains an autoencoder; writes `ckpt/vae.pbrw`.
pub fn vae_stage(cfg: &ExperimentConfig, ds: &Dataset, run: Option<&RunDir>) -> Result<(Vae<f32>, VaeSummary)> {
    let recs = records(ds, &ds.train_indices());
    let images = vae_images(&cfg.vae, &recs)?;
    let mut vae = Vae::new(&cfg.vae, &mut Rng::new(cfg.run_seed).fork_named("vae-init"))?;
    let mut sink = sink_for(run, cfg, "vae", "vae", cfg.vae_train.checkpoint_every, Some(&cfg.vae));
    train_vae(&mut vae, &images, &cfg.vae_train, cfg.run_seed, &mut sink)?;
    let summary = vae_summary(&vae, &recs)?;
    if let Some(run) = run {
        make_checkpoint(&vae.store, "vae", cfg.vae_train.steps, cfg, Some(&cfg.vae))?.save(&run.ckpt("vae.pbrw"))?;
        run.log(&summary)?;
    }
    Ok((vae, summary))
}

/// Reconstruction quality in signed space (peak-to-peak 2).
pub fn vae_summary(vae: &Vae<f32>, recs: &[&SampleRecord]) -> Result<VaeSummary> {
    let images = vae_images(&vae.config, recs)?;
    let recon = chunked(&images, |x| vae.reconstruct(x))?;
    let stacks = vae_images(&VaeConfig::default(), recs)?;
    let codec = match vae.config.in_channels {
        8 => PbrCodec::PbrVae(vae.clone()),
        _ => PbrCodec::RgbTriplets(vae.clone()),
    };
    let stack_recon = chunked(&stacks, |x| codec.roundtrip(x))?;
    Ok(VaeSummary {
        in_channels: vae.config.in_channels,
        latent_channels: vae.config.latent_channels,
        train_psnr: psnr(&images, &recon, 2.0)?,
        stack_psnr: psnr(&stacks, &stack_recon, 2.0)?,
    })
}

fn chunked(x: &Tensor<f32>, f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    let mut s = 0;
    while s < n {
        let len = 32.min(n - s);
        parts.push(f(&x.slice0(s, len)?)?);
        s += len;
    }
    Tensor::stack0(&parts)
}

pub fn load_vae(ck: &Checkpoint<f32>, meta: &CheckpointMeta) -> Result<Vae<f32>> {
    let cfg = meta
        .vae
        .clone()
        .ok_or_else(|| Error::Corrupt("checkpoint lacks a vae config".into()))?;
    let mut vae = Vae::new(&cfg, &mut Rng::new(0))?;
    vae.store.load_from(&ck.params)?;
    Ok(vae)
}

#[derive(Clone, Debug)]
pub enum Model {
    Collab(DualBranchModel<f32>),
    Finetune(FinetuneModel<f32>),
}

/// A trained PBR generator with the codec its chain runs in.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub codec: PbrCodec<f32>,
    pub config: ExperimentConfig,
}

fn kind_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Collab => "collab",
        ModelKind::Finetune => "finetune",
        ModelKind::FinetuneRgb => "finetune_rgb",
    }
}

impl Trained {
    pub fn store(&self) -> &ParamStore<f32> {
        match &self.model {
            Model::Collab(m) => &m.store,
            Model::Finetune(m) => &m.store,
        }
    }

    fn vae(&self) -> Option<&Vae<f32>> {
        match &self.codec {
            PbrCodec::Pixel => None,
            PbrCodec::PbrVae(v) | PbrCodec::RgbTriplets(v) => Some(v),
        }
    }

    /// Model parameters plus, for latent chains, the frozen autoencoder.
    pub fn to_checkpoint(&self, step: usize) -> Result<Checkpoint<f32>> {
        let mut store = self.store().clone();
        if let Some(v) = self.vae() {
            for (_, p) in v.store.iter() {
                store.add(p.name.clone(), p.value.clone(), false);
            }
        }
        make_checkpoint(
            &store,
            kind_name(self.config.model),
            step,
            &self.config,
            self.vae().map(|v| &v.config),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self> {
        let meta = CheckpointMeta::of(ck)?;
        let cfg = meta.experiment.clone();
        let codec = match cfg.collab.pbr_space {
            PbrSpace::Pixel => PbrCodec::Pixel,
            PbrSpace::PbrVae => PbrCodec::PbrVae(load_vae(ck, &meta)?),
            PbrSpace::RgbVaeTriplets => PbrCodec::RgbTriplets(load_vae(ck, &meta)?),
        };
        let mut rng = Rng::new(0);
        let model = match cfg.model {
            ModelKind::Collab => {
                let mut m = DualBranchModel::new(&cfg.unet, &ck.params, &cfg.collab, &mut rng)?;
                m.store.load_from(&ck.params)?;
                Model::Collab(m)
            }
            kind => {
                let mut m = build_finetune_baseline(&cfg.unet, &ck.params, kind == ModelKind::FinetuneRgb, &mut rng)?;
                m.store.load_from(&ck.params)?;
                Model::Finetune(m)
            }
        };
        Ok(Self {
            model,
            codec,
            config: cfg,
        })
    }

    /// Samples for the given conditions. RGB images are black when the
    /// model has no RGB output.
    pub fn generate(
        &self,
        cond: &Tensor<f32>,
        tokens: &[[usize; 3]],
        schedule: &DiffusionSchedule,
        rng: &mut Rng,
        options: SampleOptions,
    ) -> Result<Generated> {
        let n = tokens.len();
        let mut out = Generated {
            rgbs: Vec::with_capacity(n),
            stacks: Vec::with_capacity(n),
            masked_steps: 0,
        };
        let mut s = 0;
        while s < n {
            let len = SAMPLE_CHUNK.min(n - s);
            let c = cond.slice0(s, len)?;
            let tk = &tokens[s..s + len];
            match &self.model {
                Model::Collab(m) => {
                    let decode = |z: &Tensor<f32>| self.codec.decode(z);
                    let d: Option<&dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>>> =
                        if matches!(self.codec, PbrCodec::Pixel) {
                            None
                        } else {
                            Some(&decode)
                        };
                    let raw = sample_joint_raw(m, &c, tk, schedule, rng, options)?;
                    let (r, p) = to_images(m, &c, &raw, d)?;
                    out.masked_steps = raw.masked_steps;
                    out.rgbs.extend(r);
                    out.stacks.extend(p);
                }
                Model::Finetune(m) => {
                    let (p, r) = sample_finetune(m, &c, tk, schedule, rng)?;
                    for i in 0..len {
                        let mask = Raster::from_tensor(&c, i)?;
                        out.stacks
                            .push(PbrStack::from_signed(&Raster::from_tensor(&p, i)?, mask.plane(3))?);
                        let img = match &r {
                            Some(r) => {
                                let mut img = Raster::from_tensor(r, i)?;
                                img.data
                                    .iter_mut()
                                    .for_each(|v| *v = ((*v + 1.0) * 0.5).clamp(0.0, 1.0));
                                img
                            }
                            None => Raster::zeros(3, mask.height, mask.width),
                        };
                        out.rgbs.push(img);
                    }
                }
            }
            s += len;
        }
        Ok(out)
    }

    pub fn describe(&self) -> ModelTag {
        ModelTag {
            model: self.config.model,
            wiring: self.config.collab.wiring,
            comm: self.config.collab.comm,
            pbr_prompt_attention: self.config.collab.pbr_prompt_attention,
            pbr_space: self.config.collab.pbr_space,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub rgbs: Vec<Raster>,
    pub stacks: Vec<PbrStack>,
    /// Reverse steps whose RGB estimate was projected onto the mask; always
    /// zero for fine-tuned baselines.
    pub masked_steps: usize,
}

/// Identifies the ablation a report belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTag {
    pub model: ModelKind,
    pub wiring: WiringMode,
    pub comm: CommVariant,
    pub pbr_prompt_attention: bool,
    pub pbr_space: PbrSpace,
}

fn codec_for(cfg: &CollabConfig, vae: Option<&Vae<f32>>) -> Result<PbrCodec<f32>> {
    let need = |want_in: usize| -> Result<Vae<f32>> {
        let v = vae.ok_or_else(|| Error::Config("latent pbr_space needs a trained autoencoder".into()))?;
        if v.config.in_channels != want_in
            || v.config.latent_channels != cfg.latent_channels
            || v.config.factor != cfg.latent_factor
        {
            return Err(Error::Config(format!(
                "autoencoder ({} -> {} channels, factor {}) does not match collab latent settings",
                v.config.in_channels, v.config.latent_channels, v.config.factor
            )));
        }
        Ok(v.clone())
    };
    Ok(match cfg.pbr_space {
        PbrSpace::Pixel => PbrCodec::Pixel,
        PbrSpace::PbrVae => PbrCodec::PbrVae(need(8)?),
        PbrSpace::RgbVaeTriplets => PbrCodec::RgbTriplets(need(3)?),
    })
}

/// Trains the configured PBR model on the nested `train.data_fraction`
/// subset; writes `ckpt/model_000000.pbrw` before the first step, periodic
/// checkpoints and `ckpt/model.pbrw`.
pub fn train_stage(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    base: &ParamStore<f32>,
    vae: Option<&Vae<f32>>,
    run: Option<&RunDir>,
) -> Result<(Trained, Vec<StepLog>)> {
    let schedule = cfg.diffusion.schedule()?;
    let codec = codec_for(&cfg.collab, vae)?;
    let recs = records(ds, &ds.train_subset(cfg.train.data_fraction)?);
    let data = TrainData::from_records(&recs, &codec)?;
    let mut rng = Rng::new(cfg.run_seed).fork_named("model-init");
    let vae_cfg = vae.map(|v| v.config.clone());
    let kind = kind_name(cfg.model);
    let mut trained = Trained {
        model: match cfg.model {
            ModelKind::Collab => Model::Collab(DualBranchModel::new(&cfg.unet, base, &cfg.collab, &mut rng)?),
            k => Model::Finetune(build_finetune_baseline(
                &cfg.unet,
                base,
                k == ModelKind::FinetuneRgb,
                &mut rng,
            )?),
        },
        codec,
        config: cfg.clone(),
    };
    if let Some(run) = run {
        trained.to_checkpoint(0)?.save(&run.ckpt("model_000000.pbrw"))?;
    }
    let mut sink = sink_for(run, cfg, kind, "model", cfg.train.checkpoint_every, vae_cfg.as_ref());
    let logs = match &mut trained.model {
        Model::Collab(m) => train_collab(m, &data, &cfg.train, &schedule, cfg.run_seed, &mut sink)?,
        Model::Finetune(m) => train_finetune(m, &data, &cfg.train, &schedule, cfg.run_seed, &mut sink)?,
    };
    if let Some(run) = run {
        trained.to_checkpoint(cfg.train.steps)?.save(&run.ckpt("model.pbrw"))?;
    }
    Ok((trained, logs))
}

/// Conditions, prompts and reference stacks of the first `n` held-out
/// records, cycling through them again when `n` exceeds their count.
pub fn eval_inputs(ds: &Dataset, n: usize) -> Result<(Tensor<f32>, Vec<[usize; 3]>, Vec<PbrStack>, Vec<Raster>)> {
    let idx: Vec<usize> = ds.eval_indices().into_iter().cycle().take(n).collect();
    if idx.is_empty() {
        return Err(Error::invalid("no held-out records"));
    }
    let recs = records(ds, &idx);
    let conds: Vec<Raster> = recs.iter().map(|r| r.condition()).collect();
    Ok((
        Raster::batch(&conds.iter().collect::<Vec<_>>())?,
        recs.iter().map(|r| r.meta.prompt).collect(),
        recs.iter().map(|r| r.pbr.clone()).collect(),
        conds,
    ))
}

pub fn stacks_tensor(stacks: &[PbrStack]) -> Result<Tensor<f64>> {
    Raster::batch(&stacks.iter().map(|s| &s.raster).collect::<Vec<_>>())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: ModelTag,
    pub samples: usize,
    pub mask_projection_steps: usize,
    pub score: TripletScore,
    /// Every generated stack passed the stack invariants.
    pub stacks_valid: bool,
    pub config: ExperimentConfig,
}

/// Generates one sample per held-out view and scores it against the
/// rendered stacks.
pub fn eval_stage(trained: &Trained, ds: &Dataset) -> Result<(EvalReport, Vec<Raster>, Vec<PbrStack>, Vec<Raster>)> {
    let cfg = &trained.config;
    let schedule = cfg.diffusion.schedule()?;
    let (cond, tokens, reference, conds) = eval_inputs(ds, cfg.eval.samples)?;
    let mut rng = Rng::new(cfg.run_seed).fork_named("eval");
    let options = SampleOptions {
        mask_projection_steps: cfg.sample.mask_projection_steps,
    };
    let Generated {
        rgbs,
        stacks,
        masked_steps,
    } = trained.generate(&cond, &tokens, &schedule, &mut rng, options)?;
    let valid = stacks.iter().zip(&conds).all(|(s, c)| s.validate(c.plane(3)).is_ok());
    let backbone = ConvBackbone::new(cfg.eval.backbone_seed, cfg.eval.backbone_width)?;
    let unique = reference.len().min(ds.eval_indices().len());
    let score = pbr_triplet_score(
        &stacks_tensor(&stacks)?,
        &stacks_tensor(&reference[..unique])?,
        cfg.eval.metric,
        &backbone,
    )?;
    let report = EvalReport {
        tag: trained.describe(),
        samples: stacks.len(),
        mask_projection_steps: masked_steps,
        score,
        stacks_valid: valid,
        config: cfg.clone(),
    };
    Ok((report, rgbs, stacks, conds))
}

fn to_display(r: &Raster, signed: bool) -> Raster {
    let mut out = if r.channels == 1 {
        Raster::concat(&[r, r, r]).expect("same size")
    } else {
        r.clone()
    };
    if signed {
        out.data.iter_mut().for_each(|v| *v = (*v + 1.0) * 0.5);
    }
    out
}

/// One column per sample; rows are normals, albedo, roughness, metallic,
/// bump and RGB.
pub fn sample_grid(conds: &[Raster], stacks: &[PbrStack], rgbs: &[Raster]) -> Result<Raster> {
    let n = stacks.len();
    if conds.len() != n || rgbs.len() != n || n == 0 {
        return Err(Error::invalid("sample grid needs matching non-empty columns"));
    }
    let mut tiles = Vec::with_capacity(6 * n);
    let rows: [&dyn Fn(usize) -> Raster; 6] = [
        &|i| to_display(&conds[i].channels_range(0, 3), true),
        &|i| stacks[i].raster.channels_range(0, 3),
        &|i| to_display(&stacks[i].raster.channels_range(ROUGHNESS, 1), false),
        &|i| to_display(&stacks[i].raster.channels_range(METALLIC, 1), false),
        &|i| to_display(&stacks[i].raster.channels_range(BUMP, 3), true),
        &|i| rgbs[i].clone(),
    ];
    for row in rows {
        for i in 0..n {
            tiles.push(row(i));
        }
    }
    grid(&tiles, n)
}

/// One point of an interpolation sweep.
#[derive(Clone, Debug)]
pub struct InterpPoint {
    pub lambda: f64,
    pub rgb: Raster,
    pub stack: PbrStack,
    /// Mean and standard deviation of the blended starting noise.
    pub noise_stats: (f64, f64),
}

fn moments(t: &Tensor<f32>) -> (f64, f64) {
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sweeps `lambda` over `points` values in `[0, 1]` for the first held-out
/// view. Noise sweeps blend two starting states; prompt sweeps blend the
/// prompt of that view with the prompt of the next held-out object. Every
/// point reuses the same per-step noise.
pub fn interp_stage(trained: &Trained, ds: &Dataset) -> Result<Vec<InterpPoint>> {
    let cfg = &trained.config;
    let Model::Collab(model) = &trained.model else {
        return Err(Error::Config("interpolation needs a collaborative model".into()));
    };
    if cfg.interp.points < 2 {
        return Err(Error::Config("interp.points must be at least 2".into()));
    }
    let schedule = cfg.diffusion.schedule()?;
    let idx = ds.eval_indices();
    let first = idx.first().ok_or_else(|| Error::invalid("no held-out records"))?;
    let rec = &ds.records[*first];
    let other = idx
        .iter()
        .map(|&i| &ds.records[i])
        .chain(&ds.records)
        .find(|r| r.meta.prompt != rec.meta.prompt)
        .unwrap_or(rec);
    let cond: Tensor<f32> = Raster::batch(&[&rec.condition()])?;
    let (a, b) = ([rec.meta.prompt], [other.meta.prompt]);
    let root = Rng::new(cfg.run_seed).fork_named("interp");
    let noise0 = crate::collab::initial_noise(model, &cond, &mut root.fork_named("noise0"))?;
    let noise1 = crate::collab::initial_noise(model, &cond, &mut root.fork_named("noise1"))?;
    let decode = |z: &Tensor<f32>| trained.codec.decode(z);
    let d: Option<&dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>>> = if matches!(trained.codec, PbrCodec::Pixel) {
        None
    } else {
        Some(&decode)
    };
    let options = SampleOptions {
        mask_projection_steps: cfg.sample.mask_projection_steps,
    };
    let mut out = Vec::with_capacity(cfg.interp.points);
    for k in 0..cfg.interp.points {
        let lambda = k as f64 / (cfg.interp.points - 1) as f64;
        let (zr, zp, prompt) = match cfg.interp.kind {
            super::InterpKind::Noise => (
                crate::metrics::interp_noise(&noise0.0, &noise1.0, lambda)?,
                crate::metrics::interp_noise(&noise0.1, &noise1.1, lambda)?,
                crate::collab::JointPrompt::Tokens(&a),
            ),
            super::InterpKind::Prompt => (
                noise0.0.clone(),
                noise0.1.clone(),
                crate::collab::JointPrompt::Blend { a: &a, b: &b, lambda },
            ),
        };
        let noise_stats = moments(&zr);
        let mut rng = root.fork_named("steps");
        let raw = crate::collab::sample_joint_from(model, &cond, prompt, zr, zp, &schedule, &mut rng, options)?;
        let (mut rgbs, mut stacks) = crate::collab::to_images(model, &cond, &raw, d)?;
        out.push(InterpPoint {
            lambda,
            rgb: rgbs.remove(0),
            stack: stacks.remove(0),
            noise_stats,
        });
    }
    Ok(out)
}
