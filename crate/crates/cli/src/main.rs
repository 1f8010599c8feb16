use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collab_core::checks::gradcheck_suite;
use collab_core::collab::{PbrSpace, SampleOptions};
use collab_core::dataset::Dataset;
use collab_core::raster::save_png;
use collab_core::training::pipeline::{
    eval_inputs, eval_stage, interp_stage, load_checkpoint, load_dataset, load_vae, pretrain_stage, sample_grid,
    train_stage, vae_stage, Generated, RunDir, Trained, REPORT_FILE,
};
use collab_core::training::{ExperimentConfig, InterpKind};
use collab_core::{Error, Rng};

/// Exit codes, also listed in the README.
mod exit {
    pub const GENERIC: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const MISSING_DATASET: u8 = 4;
    pub const CORRUPT_CHECKPOINT: u8 = 5;
    pub const DIVERGED: u8 = 6;
    pub const GRADCHECK: u8 = 7;
    pub const IO: u8 = 8;
}

#[derive(Parser)]
#[command(
    name = "collab",
    version,
    about = "Jointly denoised RGB and PBR diffusion at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults apply to every key it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides. Keys are dotted paths or unique leaf names.
    #[arg(long = "set", num_args = 1.., value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory; defaults to `runs/<command>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Run seed (`run_seed`); for gen-data, the dataset seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the RGB base network.
    PretrainRgb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train an autoencoder for latent PBR chains.
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the PBR model around a frozen base.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Base checkpoint from pretrain-rgb.
        #[arg(long)]
        base: PathBuf,
        /// Autoencoder checkpoint from train-vae, for latent PBR chains.
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Write a sample grid for held-out conditions.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Score samples against held-out PBR stacks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Sweep a noise or prompt blend and write one grid column per weight.
    Interp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Check analytic gradients of every block type.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Core(Error),
    GradCheck(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::UnknownKey(_) | Error::Config(_) => exit::CONFIG,
        Error::MissingDataset(_) => exit::MISSING_DATASET,
        Error::BadMagic { .. } | Error::Version(_) | Error::Truncated { .. } | Error::Corrupt(_) => {
            exit::CORRUPT_CHECKPOINT
        }
        Error::Diverged { .. } => exit::DIVERGED,
        Error::Io(_) | Error::Image(_) => exit::IO,
        _ => exit::GENERIC,
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code_of(&e))
        }
        Err(Failure::GradCheck(n)) => {
            eprintln!("error: {n} gradient checks failed");
            ExitCode::from(exit::GRADCHECK)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenData { common, data } => gen_data(&common, &data),
        Command::PretrainRgb { common, data } => pretrain(&common, &data),
        Command::TrainVae { common, data } => train_vae(&common, &data),
        Command::Train {
            common,
            data,
            base,
            vae,
        } => train(&common, &data, &base, vae.as_deref()),
        Command::Sample { common, data, model } => sample(&common, &data, &model),
        Command::Eval { common, data, model } => eval(&common, &data, &model),
        Command::Interp { common, data, model } => interp(&common, &data, &model),
        Command::Gradcheck { common } => gradcheck(&common),
    }
}

fn config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &common.set)?;
    if let Some(s) = common.seed {
        cfg.run_seed = s;
    }
    Ok(cfg)
}

fn run_dir(common: &Common, name: &str, cfg: &ExperimentConfig) -> Result<RunDir, Error> {
    let root = common.run_dir.clone().unwrap_or_else(|| Path::new("runs").join(name));
    let mut run = RunDir::create(&root)?;
    run.progress = true;
    run.write_config(cfg)?;
    Ok(run)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value"));
}

fn gen_data(common: &Common, data: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &common.set)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let run = run_dir(common, "gen-data", &cfg)?;
    let ds = Dataset::generate(&cfg.data, data)?;
    let summary = serde_json::json!({
        "dataset": data,
        "objects": ds.manifest.objects.len(),
        "records": ds.records.len(),
        "train_records": ds.train_indices().len(),
        "eval_records": ds.eval_indices().len(),
        "resolution": ds.resolution(),
    });
    run.log(&summary)?;
    print_json(&summary);
    Ok(())
}

fn pretrain(common: &Common, data: &Path) -> Outcome {
    let cfg = config(common)?;
    let ds = load_dataset(&cfg, data)?;
    let run = run_dir(common, "pretrain-rgb", &cfg)?;
    let (_, logs) = pretrain_stage(&cfg, &ds, Some(&run))?;
    let last = logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
    println!(
        "base checkpoint {} (final loss {last:.4})",
        run.ckpt("base.pbrw").display()
    );
    Ok(())
}

fn train_vae(common: &Common, data: &Path) -> Outcome {
    let cfg = config(common)?;
    let ds = load_dataset(&cfg, data)?;
    let run = run_dir(common, "train-vae", &cfg)?;
    let (_, summary) = vae_stage(&cfg, &ds, Some(&run))?;
    print_json(&serde_json::to_value(&summary).map_err(Error::from)?);
    println!("autoencoder checkpoint {}", run.ckpt("vae.pbrw").display());
    Ok(())
}

fn train(common: &Common, data: &Path, base: &Path, vae: Option<&Path>) -> Outcome {
    let cfg = config(common)?;
    let ds = load_dataset(&cfg, data)?;
    let (base_ck, base_meta) = load_checkpoint(base, "base")?;
    if base_meta.experiment.unet != cfg.unet {
        return Err(Error::Config("unet settings differ from the base checkpoint".into()).into());
    }
    let vae = match (vae, cfg.collab.pbr_space) {
        (Some(p), _) => {
            let (ck, meta) = load_checkpoint(p, "vae")?;
            Some(load_vae(&ck, &meta)?)
        }
        (None, PbrSpace::Pixel) => None,
        (None, _) => return Err(Error::Config("latent pbr_space needs --vae".into()).into()),
    };
    let run = run_dir(common, "train", &cfg)?;
    let (trained, logs) = train_stage(&cfg, &ds, &base_ck.params, vae.as_ref(), Some(&run))?;
    let last = logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
    println!(
        "model checkpoint {} ({:?}, final loss {last:.4})",
        run.ckpt("model.pbrw").display(),
        trained.describe()
    );
    Ok(())
}

/// Loads a model checkpoint. The checkpoint's experiment is the base config;
/// a `--config` file contributes its sample, eval and interp sections, then
/// `--set` and `--seed` apply.
fn load_model(common: &Common, path: &Path) -> Result<Trained, Error> {
    let (ck, _) = load_checkpoint(path, "model")?;
    let mut trained = Trained::from_checkpoint(&ck)?;
    let mut cfg = trained.config.clone();
    if let Some(file) = &common.config {
        let f = ExperimentConfig::load(Some(file), &[])?;
        cfg.sample = f.sample;
        cfg.eval = f.eval;
        cfg.interp = f.interp;
    }
    cfg = cfg.with_overrides(&common.set)?;
    if let Some(s) = common.seed {
        cfg.run_seed = s;
    }
    let old = &trained.config;
    if (&cfg.unet, &cfg.model, &cfg.collab, &cfg.diffusion) != (&old.unet, &old.model, &old.collab, &old.diffusion) {
        return Err(Error::Config(
            "architecture and diffusion keys are fixed by the checkpoint".into(),
        ));
    }
    trained.config = cfg;
    Ok(trained)
}

fn sample(common: &Common, data: &Path, model: &Path) -> Outcome {
    let trained = load_model(common, model)?;
    let cfg = trained.config.clone();
    let ds = load_dataset(&cfg, data)?;
    let run = run_dir(common, "sample", &cfg)?;
    let (cond, tokens, _, conds) = eval_inputs(&ds, cfg.sample.count)?;
    let options = SampleOptions {
        mask_projection_steps: cfg.sample.mask_projection_steps,
    };
    let mut rng = Rng::new(cfg.run_seed).fork_named("sample");
    let Generated {
        rgbs,
        stacks,
        masked_steps,
    } = trained.generate(&cond, &tokens, &cfg.diffusion.schedule()?, &mut rng, options)?;
    let path = run.sample("grid.png");
    save_png(&sample_grid(&conds, &stacks, &rgbs)?, &path)?;
    let entry = serde_json::json!({
        "samples": stacks.len(),
        "mask_projection_steps": cfg.sample.mask_projection_steps,
        "masked_steps": masked_steps,
        "grid": path,
    });
    run.log(&entry)?;
    print_json(&entry);
    Ok(())
}

fn eval(common: &Common, data: &Path, model: &Path) -> Outcome {
    let trained = load_model(common, model)?;
    let ds = load_dataset(&trained.config, data)?;
    let run = run_dir(common, "eval", &trained.config)?;
    let (report, rgbs, stacks, conds) = eval_stage(&trained, &ds)?;
    run.write_report(&report)?;
    save_png(&sample_grid(&conds, &stacks, &rgbs)?, &run.sample("eval.png"))?;
    print_json(&serde_json::json!({
        "tag": report.tag,
        "metric": report.score.metric,
        "score": report.score.mean,
        "stacks_valid": report.stacks_valid,
        "report": run.root.join(REPORT_FILE),
    }));
    Ok(())
}

fn interp(common: &Common, data: &Path, model: &Path) -> Outcome {
    let trained = load_model(common, model)?;
    let ds = load_dataset(&trained.config, data)?;
    let run = run_dir(common, "interp", &trained.config)?;
    let points = interp_stage(&trained, &ds)?;
    let conds: Vec<_> = points
        .iter()
        .map(|_| ds.records[ds.eval_indices()[0]].condition())
        .collect();
    let stacks: Vec<_> = points.iter().map(|p| p.stack.clone()).collect();
    let rgbs: Vec<_> = points.iter().map(|p| p.rgb.clone()).collect();
    let name = match trained.config.interp.kind {
        InterpKind::Noise => "interp_noise.png",
        InterpKind::Prompt => "interp_prompt.png",
    };
    save_png(&sample_grid(&conds, &stacks, &rgbs)?, &run.sample(name))?;
    for p in &points {
        run.log(&serde_json::json!({
            "lambda": p.lambda,
            "noise_mean": p.noise_stats.0,
            "noise_std": p.noise_stats.1,
        }))?;
        println!(
            "lambda {:.3}  noise mean {:+.2e}  std {:.6}",
            p.lambda, p.noise_stats.0, p.noise_stats.1
        );
    }
    println!("grid {}", run.sample(name).display());
    Ok(())
}

fn gradcheck(common: &Common) -> Outcome {
    let cfg = config(common)?;
    let run = run_dir(common, "gradcheck", &cfg)?;
    let results = gradcheck_suite(cfg.run_seed)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:.3e} {verdict}", r.block, r.error);
        run.log(r)?;
        failed += usize::from(!r.passed());
    }
    run.write_report(&results)?;
    if failed > 0 {
        return Err(Failure::GradCheck(failed));
    }
    Ok(())
}
