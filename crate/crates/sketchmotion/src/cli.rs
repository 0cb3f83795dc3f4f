//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sketchmotion_core::pipeline::sampling_schedule;
use sketchmotion_core::training::content_id;
use sketchmotion_core::{
    animate, ddim_invert, eval_identity, eval_motion, extrapolate, null_text_refine, postprocess,
    train_base, train_lora, AnimationRequest, AnimationResult, Denoiser, DenoiserWeights,
    DiffusionSchedule, LoraAdapter, LoraConfig, Motion, Prompt, SamplerConfig, Shape, Tensor,
    TrainConfig, TrainReport,
};

use crate::checkpoint;
use crate::config;
use crate::dataset;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::pgm;

#[derive(Debug, Parser)]
#[command(
    name = "sketchmotion",
    version,
    about = "Animate 16x16 sketches with a small video denoiser"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Procedural clip corpus.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train a base checkpoint from scratch.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = TrainConfig::default().lr)]
        lr: f32,
        #[arg(long, default_value_t = TrainConfig::default().batch)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit LoRA adapters on the attention projections of a frozen base.
    TrainLora {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Only use clips with this motion.
        #[arg(long)]
        motion: Option<Motion>,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 2500)]
        iters: usize,
        #[arg(long, default_value_t = LoraConfig::default().lr)]
        lr: f32,
        #[arg(long, default_value_t = LoraConfig::default().batch)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Animate a sketch.
    Animate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        shape: Shape,
        #[arg(long)]
        motion: Motion,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chain animations, each starting from the previous final frame.
    Extrapolate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        sketch: PathBuf,
        /// Comma-separated `shape:motion` list.
        #[arg(long)]
        prompts: String,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert a sketch and report reconstruction error.
    Invert {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        refine: bool,
        #[arg(long, default_value_t = 10)]
        refine_iters: usize,
        #[arg(long, default_value_t = 0.5)]
        refine_step: f32,
        #[arg(long, default_value_t = SamplerConfig::default().steps)]
        steps: usize,
    },
    /// Identity and motion scores of a frame directory.
    Eval {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        sketch: PathBuf,
    },
    /// Rerun the animation a manifest describes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetAction {
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        seeds: u64,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub adapters: Option<PathBuf>,
}

/// Sampler flags; unset flags fall back to the config file, then to the
/// built-in defaults.
#[derive(Debug, Args, Default)]
pub struct SamplerArgs {
    /// Flat key=value file of sampler settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub tau1: Option<usize>,
    #[arg(long)]
    pub tau2: Option<usize>,
    #[arg(long)]
    pub align_iters: Option<usize>,
    #[arg(long)]
    pub align_step: Option<f32>,
    #[arg(long)]
    pub refine_iters: Option<usize>,
    #[arg(long)]
    pub refine_step: Option<f32>,
    /// Drop temporal composition.
    #[arg(long)]
    pub word_mode: bool,
    #[arg(long)]
    pub no_align: bool,
    #[arg(long)]
    pub no_compose: bool,
}

impl SamplerArgs {
    pub fn resolve(&self) -> Result<SamplerConfig> {
        let mut cfg = SamplerConfig::default();
        if let Some(path) = &self.config {
            config::apply(
                &mut cfg,
                &fs::read_to_string(path).map_err(Error::io(path))?,
            )?;
        }
        macro_rules! take {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        take!(
            lambda,
            seed,
            frames,
            steps,
            tau1,
            tau2,
            align_iters,
            align_step,
            refine_iters,
            refine_step
        );
        if self.word_mode {
            cfg.word_mode = true;
        }
        if self.no_align {
            cfg.align = false;
        }
        if self.no_compose {
            cfg.compose = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset {
            action: DatasetAction::Gen { out, seeds },
        } => {
            let clips = dataset::generate(&out, seeds)?;
            println!("wrote {} clips to {}", clips.len(), out.display());
            Ok(())
        }
        Command::TrainBase {
            data,
            epochs,
            lr,
            batch,
            seed,
            out,
        } => {
            let clips = dataset::read(&data)?;
            let cfg = TrainConfig {
                epochs,
                lr,
                batch,
                seed,
                ..TrainConfig::default()
            };
            let schedule = DiffusionSchedule::default();
            let (weights, report) = train_base(&schedule, &clips, &cfg)?;
            checkpoint::save_weights(&out, &weights)?;
            write_report(&out, &report)
        }
        Command::TrainLora {
            base,
            data,
            motion,
            rank,
            iters,
            lr,
            batch,
            seed,
            out,
        } => {
            let weights = checkpoint::load_weights(&base)?;
            let mut clips = dataset::read(&data)?;
            if let Some(m) = motion {
                clips.retain(|c| c.motion == m);
                if clips.is_empty() {
                    return Err(Error::Usage(format!(
                        "no `{m}` clips in {}",
                        data.display()
                    )));
                }
            }
            let cfg = LoraConfig {
                rank,
                iters,
                lr,
                batch,
                seed,
                ..LoraConfig::default()
            };
            let schedule =
                sampling_schedule(weights.config().train_steps, SamplerConfig::default().steps)?;
            let (adapters, report) = train_lora(&schedule, &weights, &clips, &cfg)?;
            checkpoint::save_adapters(&out, &adapters)?;
            write_report(&out, &report)
        }
        Command::Animate {
            model,
            sketch,
            shape,
            motion,
            sampler,
            out,
        } => {
            let loaded = LoadedModel::load(&model.checkpoint, model.adapters.as_deref())?;
            let image = read_sketch(&sketch)?;
            let manifest = Manifest {
                prompt: Prompt::new(shape, motion),
                config: sampler.resolve()?,
                sketch: sketch.display().to_string(),
                checkpoint: model.checkpoint.display().to_string(),
                checkpoint_id: loaded.checkpoint_id.clone(),
                adapters: model.adapters.as_ref().map(|p| p.display().to_string()),
                adapters_id: loaded.adapters_id.clone(),
                frame_files: Vec::new(),
                diagnostics: Vec::new(),
            };
            render_animation(&loaded, &image, manifest, &out).map(drop)
        }
        Command::Replay { manifest, out } => {
            let m = Manifest::read(&manifest)?;
            let loaded = LoadedModel::load(
                Path::new(&m.checkpoint),
                m.adapters.as_deref().map(Path::new),
            )?;
            if loaded.checkpoint_id != m.checkpoint_id || loaded.adapters_id != m.adapters_id {
                return Err(Error::Usage(format!(
                    "{} no longer matches the recorded checkpoint",
                    m.checkpoint
                )));
            }
            let image = read_sketch(Path::new(&m.sketch))?;
            render_animation(&loaded, &image, m, &out).map(drop)
        }
        Command::Extrapolate {
            model,
            sketch,
            prompts,
            sampler,
            out,
        } => {
            let loaded = LoadedModel::load(&model.checkpoint, model.adapters.as_deref())?;
            let image = read_sketch(&sketch)?;
            let prompts = parse_prompts(&prompts)?;
            let cfg = sampler.resolve()?;
            let result = extrapolate(&loaded.denoiser()?, &image, &prompts, &cfg)?;
            write_frames(&out, &result.frames)?;
            pgm::write(
                &out.join("contact.pgm"),
                &pgm::contact_sheet(&result.frames)?,
            )?;
            println!("frames={}", result.frames.shape()[0]);
            println!("identity={}", eval_identity(&result.frames, &image)?);
            if result.frames.shape()[0] > 1 {
                println!("motion={}", eval_motion(&result.frames)?);
            }
            Ok(())
        }
        Command::Invert {
            model,
            sketch,
            refine,
            refine_iters,
            refine_step,
            steps,
        } => {
            let loaded = LoadedModel::load(&model.checkpoint, model.adapters.as_deref())?;
            let image = read_sketch(&sketch)?;
            let den = loaded.denoiser()?;
            let schedule = sampling_schedule(den.config().train_steps, steps)?;
            let [h, w, c] = den.config().frame_shape();
            let x0 = image.reshape(&[1, h, w, c])?;
            let traj = ddim_invert(&den, &schedule, &x0)?;
            let iters = if refine { refine_iters } else { 0 };
            let r = null_text_refine(&den, &schedule, &traj, iters, refine_step)?;
            println!("error_before={}", r.error_before);
            if refine {
                println!("error_after={}", r.error_after);
            }
            Ok(())
        }
        Command::Eval { frames, sketch } => {
            let image = read_sketch(&sketch)?;
            let video = read_frames(&frames)?;
            println!("identity={}", eval_identity(&video, &image)?);
            println!("motion={}", motion_or_zero(&video)?);
            Ok(())
        }
    }
}

/// Loaded base weights and optional adapters with their content ids.
pub struct LoadedModel {
    pub weights: DenoiserWeights,
    pub adapters: Vec<LoraAdapter>,
    pub checkpoint_id: String,
    pub adapters_id: Option<String>,
}

impl LoadedModel {
    pub fn load(checkpoint: &Path, adapters: Option<&Path>) -> Result<Self> {
        let weights = checkpoint::load_weights(checkpoint)?;
        let checkpoint_id = content_id(weights.named());
        let (adapters, adapters_id) = match adapters {
            Some(p) => {
                let a = checkpoint::load_adapters(p)?;
                let id = content_id(&checkpoint::adapter_tensors(&a));
                (a, Some(id))
            }
            None => (Vec::new(), None),
        };
        Ok(Self {
            weights,
            adapters,
            checkpoint_id,
            adapters_id,
        })
    }

    pub fn denoiser(&self) -> Result<Denoiser<'_>> {
        Ok(Denoiser::new(&self.weights, &self.adapters)?)
    }
}

fn motion_or_zero(frames: &Tensor) -> Result<f32> {
    if frames.shape()[0] < 2 {
        return Ok(0.0);
    }
    Ok(eval_motion(frames)?)
}

fn read_sketch(path: &Path) -> Result<Tensor> {
    pgm::read(path)
}

pub fn parse_prompts(list: &str) -> Result<Vec<Prompt>> {
    let prompts = list
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<Prompt>()
                .map_err(|e| Error::Usage(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if prompts.is_empty() {
        return Err(Error::Usage("no prompts given".into()));
    }
    Ok(prompts)
}

/// Write `frame_NN.pgm` files into `dir`; returns their names.
pub fn write_frames(dir: &Path, frames: &Tensor) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut names = Vec::new();
    for i in 0..frames.shape()[0] {
        let name = dataset::frame_name(i);
        pgm::write(&dir.join(&name), &frames.slice_outer(i, 1)?)?;
        names.push(name);
    }
    Ok(names)
}

/// Read `frame_NN.pgm` files from `dir` into `[M, H, W, 1]`.
pub fn read_frames(dir: &Path) -> Result<Tensor> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(dataset::frame_name(frames.len()));
        if !path.exists() {
            break;
        }
        let f = pgm::read(&path)?;
        let s = f.shape().to_vec();
        frames.push(f.reshape(&[1, s[0], s[1], s[2]])?);
    }
    if frames.is_empty() {
        return Err(Error::Io {
            path: dir.join(dataset::frame_name(0)),
            source: std::io::ErrorKind::NotFound.into(),
        });
    }
    let refs: Vec<&Tensor> = frames.iter().collect();
    Ok(Tensor::concat_outer(&refs)?)
}

/// Run one animation and write frames, raw frames, a contact sheet and the
/// manifest into `out`.
pub fn render_animation(
    model: &LoadedModel,
    sketch: &Tensor,
    mut manifest: Manifest,
    out: &Path,
) -> Result<AnimationResult> {
    let req = AnimationRequest {
        sketch: sketch.clone(),
        prompt: manifest.prompt,
        config: manifest.config.clone(),
    };
    let result = animate(&model.denoiser()?, &req)?;
    let frames = postprocess(&result.frames);
    manifest.frame_files = write_frames(out, &frames)?;
    write_frames(&out.join("raw"), &result.frames)?;
    pgm::write(&out.join("contact.pgm"), &pgm::contact_sheet(&frames)?)?;
    let identity = eval_identity(&frames, sketch)?;
    let motion = motion_or_zero(&frames)?;
    manifest.diagnostics = diagnostics(&result, identity, motion);
    manifest.write(&out.join("manifest.txt"))?;
    println!("identity={identity}");
    println!("motion={motion}");
    Ok(result)
}

fn diagnostics(result: &AnimationResult, identity: f32, motion: f32) -> Vec<(String, String)> {
    let mut d = vec![
        ("identity".to_owned(), identity.to_string()),
        ("motion".to_owned(), motion.to_string()),
        (
            "inversion_error".to_owned(),
            result.inversion_error.to_string(),
        ),
    ];
    if let Some(e) = result.refined_error {
        d.push(("refined_error".to_owned(), e.to_string()));
    }
    let aligned: Vec<_> = result
        .steps
        .iter()
        .filter(|s| !s.align_losses.is_empty())
        .collect();
    d.push(("aligned_steps".to_owned(), aligned.len().to_string()));
    if !aligned.is_empty() {
        let first: f32 =
            aligned.iter().map(|s| s.align_losses[0]).sum::<f32>() / aligned.len() as f32;
        let last: f32 = aligned
            .iter()
            .map(|s| *s.align_losses.last().expect("non-empty"))
            .sum::<f32>()
            / aligned.len() as f32;
        d.push(("align_loss_initial".to_owned(), first.to_string()));
        d.push(("align_loss_final".to_owned(), last.to_string()));
    }
    let composed: Vec<String> = result
        .steps
        .iter()
        .filter_map(|s| s.n.map(|n| format!("{}:{n}", s.level)))
        .collect();
    d.push(("composed".to_owned(), composed.join(" ")));
    d
}

fn write_report(out: &Path, report: &TrainReport) -> Result<()> {
    let mut text = String::new();
    for (i, l) in report.epoch_losses.iter().enumerate() {
        text.push_str(&format!("epoch_{i}={l}\n"));
    }
    text.push_str(&format!("initial_loss={}\n", report.initial_loss));
    text.push_str(&format!("final_loss={}\n", report.final_loss));
    text.push_str(&format!("updates={}\n", report.updates));
    text.push_str(&format!("checkpoint_id={}\n", report.checkpoint_id));
    let mut path = out.as_os_str().to_owned();
    path.push(".report.txt");
    let path = PathBuf::from(path);
    fs::write(&path, &text).map_err(Error::io(&path))?;
    print!("{text}");
    Ok(())
}
