//! The `fvdm` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fvdm_core::diffusion::{sample, SamplerConfig, VideoTensor};
use fvdm_core::eval::frechet_toy;
use fvdm_core::models::Denoiser;
use fvdm_core::tasks::{self, TaskKind, TaskSpec};
use fvdm_core::training::{StepRecord, Trainer};
use fvdm_core::RngStream;

use crate::config::{parse_sampler_kind, sampler_kind_name, RunConfig, TaskDocument};
use crate::error::{FvdmError, Result};
use crate::io::{self, ModelCheckpoint};
use crate::oracle::{self, OracleCase, MIN_ORACLE_SAMPLES};

#[derive(Debug, Parser)]
#[command(name = "fvdm", version, about = "Frame-aware video diffusion at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser from a TOML run config.
    Train(TrainArgs),
    /// Sample clips from a checkpoint for one task.
    Sample(SampleArgs),
    /// Check the samplers against an analytic Gaussian score.
    OracleCheck(OracleArgs),
    /// Toy Fréchet distance between two directories of f64 clips.
    Eval(EvalArgs),
    /// Write synthetic clips to a directory.
    Dataset(DatasetArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.total_steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Sampling options left unset fall back to the `[sampler]` and `[task]`
/// sections of `--config`, then to built-in defaults.
#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run config supplying sampler and task defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// standard, i2v, interpolate, extend, frame, next or progressive.
    #[arg(long)]
    pub task: Option<String>,
    /// Read the whole task from a TOML task document instead.
    #[arg(long, conflicts_with = "task")]
    pub task_file: Option<PathBuf>,
    /// Frames per clip [default: 8].
    #[arg(long)]
    pub frames: Option<usize>,
    /// Sampler steps [default: 50].
    #[arg(long)]
    pub steps: Option<usize>,
    /// ddim or ddpm [default: ddim].
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Conditioning image (first frame of the file) for i2v and frame.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// First frame of this file starts an interpolation.
    #[arg(long)]
    pub first: Option<PathBuf>,
    /// Last frame of this file ends an interpolation.
    #[arg(long)]
    pub last: Option<PathBuf>,
    /// Previous clip for extend and next.
    #[arg(long)]
    pub prev: Option<PathBuf>,
    /// Frames shared with --prev when extending [default: 2].
    #[arg(long)]
    pub overlap: Option<usize>,
    /// 1-based frame held fixed by the frame task [default: 1].
    #[arg(long)]
    pub index: Option<usize>,
    /// Progressive slope [default: 0.2].
    #[arg(long)]
    pub slope: Option<f64>,
}

/// [`SampleArgs`] with every default applied.
struct SampleOptions {
    task: String,
    frames: usize,
    steps: usize,
    sampler: String,
    overlap: usize,
    index: usize,
    slope: f64,
}

impl SampleOptions {
    fn resolve(a: &SampleArgs) -> Result<Self> {
        let cfg = match &a.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        Ok(Self {
            task: a.task.clone().unwrap_or(cfg.task.kind),
            frames: a.frames.unwrap_or(cfg.task.frames),
            steps: a.steps.unwrap_or(cfg.sampler.steps),
            sampler: a.sampler.clone().unwrap_or(cfg.sampler.kind),
            overlap: a.overlap.unwrap_or(cfg.task.overlap),
            index: a.index.unwrap_or(cfg.task.index),
            slope: a.slope.unwrap_or(cfg.task.slope),
        })
    }
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// unconditional, i2v, interpolate or extend.
    #[arg(long, default_value = "unconditional")]
    pub case: String,
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value = "ddpm")]
    pub sampler: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report to `<out>/oracle_<case>.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub gen: PathBuf,
    /// Directory for `frechet.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Run config whose `[dataset]` section is used; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `dataset.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of clips to write (defaults to `dataset.count`).
    #[arg(long)]
    pub count: Option<usize>,
    /// Index of the first clip written.
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::OracleCheck(a) => cmd_oracle_check(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Dataset(a) => cmd_dataset(&a),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FvdmError::io(path, e))?;
    RunConfig::from_toml(&text)
}

/// Stream that seeds the model initialisation.
const INIT_STREAM: u64 = 0x1417;

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    let cfg = cfg.resolved()?;
    io::write_bytes(&a.out.join("config.resolved.toml"), cfg.to_toml().as_bytes())?;

    let schedule = cfg.schedule()?;
    let spec = cfg.dataset_spec()?;
    let tc = cfg.train_config()?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = ModelCheckpoint::load(p)?;
            if ck.state.model.config().frame_dim != spec.frame_dim() {
                return Err(FvdmError::Usage(format!(
                    "{}: checkpoint frame size does not match the dataset",
                    p.display()
                )));
            }
            Trainer::resume(ck.state, tc.clone(), schedule)?
        }
        None => {
            let model = Denoiser::init(cfg.denoiser(spec.frame_dim())?, &mut RngStream::new(cfg.seed, INIT_STREAM))?;
            Trainer::new(model, tc.clone(), schedule)?
        }
    };
    let geometry = spec.image_geometry();
    let checkpoint = |t: &Trainer, path: &Path| {
        ModelCheckpoint {
            state: t.state().clone(),
            schedule,
            geometry,
        }
        .save(path)
    };

    let mut trace: Vec<StepRecord> = Vec::new();
    let interval = tc.checkpoint_interval;
    let result = trainer.run(&spec, |rec, t| {
        trace.push(rec.clone());
        let done = rec.step + 1;
        if interval > 0 && done % interval == 0 && done < tc.total_steps {
            checkpoint(t, &a.out.join(format!("checkpoint_{done:06}.fvdm")))
                .map_err(|e| fvdm_core::Error::InvalidArgument(e.to_string()))?;
        }
        Ok(())
    });
    io::write_bytes(&a.out.join("loss.csv"), io::loss_csv(&trace).as_bytes())?;
    result?;
    checkpoint(&trainer, &a.out.join("checkpoint.fvdm"))?;
    let last = trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "steps={} final_loss={last} checkpoint={}",
        trainer.state().step,
        a.out.join("checkpoint.fvdm").display()
    );
    Ok(())
}

fn require<'p>(path: &'p Option<PathBuf>, flag: &str, task: &str) -> Result<&'p Path> {
    path.as_deref()
        .ok_or_else(|| FvdmError::Usage(format!("--task {task} needs --{flag}")))
}

fn build_task(a: &SampleArgs, o: &SampleOptions, ck: &ModelCheckpoint) -> Result<TaskSpec> {
    let schedule = &ck.schedule;
    let d = ck.state.model.config().frame_dim;
    let g = ck.geometry;
    if let Some(p) = &a.task_file {
        let text = std::fs::read_to_string(p).map_err(|e| FvdmError::io(p, e))?;
        let task = TaskDocument::from_toml(&text)?.to_task(schedule)?;
        if task.frame_dim() != d {
            return Err(FvdmError::Usage("task frame size does not match the checkpoint".into()));
        }
        return Ok(task.with_geometry(g));
    }
    let kind = TaskKind::from_name(&o.task).ok_or_else(|| FvdmError::Usage(format!("unknown task {:?}", o.task)))?;
    let (n, k) = (o.frames, o.steps);
    let name = kind.name();
    let read = |p: &Path| -> Result<VideoTensor> {
        let clip = io::read_clip(p, g)?;
        if clip.frame_dim() != d {
            return Err(FvdmError::Usage(format!(
                "{}: frames have {} values, model expects {d}",
                p.display(),
                clip.frame_dim()
            )));
        }
        Ok(clip)
    };
    let unexpected = |flag: &str, given: bool| -> Result<()> {
        if given {
            Err(FvdmError::Usage(format!("--task {name} does not take --{flag}")))
        } else {
            Ok(())
        }
    };
    let takes = |image: bool, ends: bool, prev: bool| -> Result<()> {
        unexpected("image", !image && a.image.is_some())?;
        unexpected("first", !ends && a.first.is_some())?;
        unexpected("last", !ends && a.last.is_some())?;
        unexpected("prev", !prev && a.prev.is_some())
    };
    let task = match kind {
        TaskKind::Standard => {
            takes(false, false, false)?;
            tasks::standard(n, d, k, schedule)?
        }
        TaskKind::Progressive => {
            takes(false, false, false)?;
            tasks::progressive(n, d, k, o.slope, schedule)?
        }
        TaskKind::Image2Video | TaskKind::ConditionOnFrame => {
            takes(true, false, false)?;
            let img = read(require(&a.image, "image", name)?)?;
            if kind == TaskKind::Image2Video {
                tasks::image2video(img.frame(0), n, k, schedule)?
            } else {
                tasks::condition_on_frame(img.frame(0), o.index, n, k, schedule)?
            }
        }
        TaskKind::Interpolate => {
            takes(false, true, false)?;
            let first = read(require(&a.first, "first", name)?)?;
            let last = read(require(&a.last, "last", name)?)?;
            tasks::interpolate(first.frame(0), last.frame(last.n_frames() - 1), n, k, schedule)?
        }
        TaskKind::Extend | TaskKind::NextFrame => {
            takes(false, false, true)?;
            let prev = read(require(&a.prev, "prev", name)?)?;
            if kind == TaskKind::Extend {
                tasks::extend(&prev, o.overlap, n, k, schedule)?
            } else {
                tasks::next_frame(&prev, n, k, schedule)?
            }
        }
    };
    Ok(task.with_geometry(g))
}

pub fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let o = SampleOptions::resolve(a)?;
    let kind = parse_sampler_kind(&o.sampler)
        .ok_or_else(|| FvdmError::Usage(format!("--sampler must be ddim or ddpm, got {:?}", o.sampler)))?;
    if a.count == 0 {
        return Err(FvdmError::Usage("--count must be at least 1".into()));
    }
    let ck = ModelCheckpoint::load(&a.ckpt)?;
    let task = build_task(a, &o, &ck)?;
    let cfg = SamplerConfig::new(kind, task.steps())?;
    let model = &ck.state.model;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "checkpoint = {:?}", a.ckpt.display().to_string());
    let _ = writeln!(manifest, "task = {:?}", task.kind().name());
    let _ = writeln!(manifest, "frames = {}", task.n_frames());
    let _ = writeln!(manifest, "steps = {}", task.steps());
    let _ = writeln!(manifest, "sampler = {:?}", sampler_kind_name(kind));
    let _ = writeln!(manifest, "seed = {}", a.seed);
    let _ = writeln!(manifest, "count = {}", a.count);
    let _ = writeln!(manifest, "task_file = \"task.toml\"");
    let mut files = Vec::new();
    for k in 0..a.count {
        let stream_id = RngStream::derive_id(&[2, k as u64]);
        let cfg = SamplerConfig { stream_id, ..cfg };
        let mut rng = RngStream::new(a.seed, cfg.stream_id);
        let mut clip = sample(model, &task, &cfg, &ck.schedule, &mut rng)?;
        clip.set_geometry(ck.geometry);
        for p in io::write_clip(&a.out, &format!("sample_{k:03}"), &clip)? {
            files.push(p.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    let _ = writeln!(manifest, "files = {files:?}");
    io::write_bytes(&a.out.join("task.toml"), TaskDocument::from_task(&task).to_toml().as_bytes())?;
    io::write_bytes(&a.out.join("manifest.toml"), manifest.as_bytes())?;
    println!("wrote {} clip(s) to {}", a.count, a.out.display());
    Ok(())
}

pub fn cmd_oracle_check(a: &OracleArgs) -> Result<()> {
    let case = OracleCase::from_name(&a.case).ok_or_else(|| {
        FvdmError::Usage(format!("--case must be unconditional, i2v, interpolate or extend, got {:?}", a.case))
    })?;
    let kind = parse_sampler_kind(&a.sampler)
        .ok_or_else(|| FvdmError::Usage(format!("--sampler must be ddim or ddpm, got {:?}", a.sampler)))?;
    if a.samples < MIN_ORACLE_SAMPLES {
        eprintln!(
            "warning: {} samples is too few; Monte-Carlo error would dominate the tolerances (need {MIN_ORACLE_SAMPLES})",
            a.samples
        );
    }
    let outcome = oracle::run_oracle(case, a.samples, a.steps, kind, a.seed)?;
    let line = outcome.summary();
    println!("{line}");
    if let Some(dir) = &a.out {
        io::write_bytes(&dir.join(format!("oracle_{}.txt", case.name())), format!("{line}\n").as_bytes())?;
    }
    if outcome.passed() {
        Ok(())
    } else {
        Err(FvdmError::ToleranceFailed(format!("oracle check failed: {line}")))
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let real = io::read_clip_dir(&a.real)?;
    let gen = io::read_clip_dir(&a.gen)?;
    if (real[0].n_frames(), real[0].frame_dim()) != (gen[0].n_frames(), gen[0].frame_dim()) {
        return Err(FvdmError::Usage(format!(
            "clip shapes differ: {}x{} vs {}x{}",
            real[0].n_frames(),
            real[0].frame_dim(),
            gen[0].n_frames(),
            gen[0].frame_dim()
        )));
    }
    let r = frechet_toy(&real, &gen)?;
    println!(
        "frechet_distance={} feature_dim={} real_samples={} gen_samples={}",
        r.distance, r.feature_dim, r.samples_a, r.samples_b
    );
    let csv = format!(
        "frechet_distance,raw_distance,feature_dim,real_samples,gen_samples\n{},{},{},{},{}\n",
        r.distance, r.raw_distance, r.feature_dim, r.samples_a, r.samples_b
    );
    io::write_bytes(&a.out.join("frechet.csv"), csv.as_bytes())
}

pub fn cmd_dataset(a: &DatasetArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    let count = a.count.unwrap_or(cfg.dataset.count);
    cfg.dataset.count = cfg.dataset.count.max(a.offset + count);
    let cfg = cfg.resolved()?;
    let spec = cfg.dataset_spec()?;
    io::write_dataset(&a.out, &spec, a.offset, count)?;
    let manifest = format!(
        "first = {}\ncount = {count}\n\n{}",
        a.offset,
        toml::to_string(&toml::Table::from_iter([(
            "dataset".to_string(),
            toml::Value::try_from(&cfg.dataset).expect("dataset section serialises"),
        )]))
        .expect("manifest serialises")
    );
    io::write_bytes(&a.out.join("manifest.toml"), manifest.as_bytes())?;
    println!("wrote {count} clip(s) to {}", a.out.display());
    Ok(())
}
