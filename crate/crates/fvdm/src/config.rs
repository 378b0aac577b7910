//! Run configuration and task documents in TOML.
//!
//! Every section and field is optional; missing values take the defaults
//! shown by [`RunConfig::default`]. [`RunConfig::resolved`] expands every
//! default so the written copy fully describes the run.

use serde::{Deserialize, Serialize};

use fvdm_core::data::{DatasetKind, DatasetSpec};
use fvdm_core::diffusion::{Geometry, SamplerConfig, SamplerKind};
use fvdm_core::models::DenoiserConfig;
use fvdm_core::schedule::{NoiseSchedule, PtssConfig};
use fvdm_core::tasks::{TaskKind, TaskSpec};
use fvdm_core::training::{TrainConfig, Weighting};

use crate::error::{FvdmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub ptss: PtssSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub dataset: DatasetSection,
    pub sampler: SamplerSection,
    pub task: TaskSection,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
    pub t_min: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        Self {
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            horizon: s.horizon,
            t_min: s.t_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtssSection {
    pub p: f64,
}

impl Default for PtssSection {
    fn default() -> Self {
        Self {
            p: PtssConfig::default().p(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `toy-S`, `toy-B` or `custom`.
    pub preset: String,
    pub embed_dim: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy-S".into(),
            embed_dim: None,
            n_layers: None,
            n_heads: None,
            mlp_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `uniform-eps` or `sigma2-score`.
    pub weighting: String,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub checkpoint_interval: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weighting: t.weighting.as_str().into(),
            grad_clip: t.grad_clip.unwrap_or(0.0),
            checkpoint_interval: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// `bouncing_ball`, `moving_bar` or `gaussian_ar1`.
    pub kind: String,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    pub radius: Option<f64>,
    pub speed: Option<f64>,
    pub bar_width: usize,
    pub velocity: i64,
    pub rho: f64,
    pub variance: f64,
    pub frame_dim: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: "bouncing_ball".into(),
            n_frames: 8,
            height: 16,
            width: 16,
            count: 1024,
            seed: 0,
            radius: None,
            speed: None,
            bar_width: 3,
            velocity: 1,
            rho: 0.9,
            variance: 1.0,
            frame_dim: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// `ddim` (deterministic) or `ddpm` (ancestral).
    pub kind: String,
    pub steps: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: "ddim".into(),
            steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: String,
    pub frames: usize,
    pub overlap: usize,
    /// 1-based frame for the `frame` task.
    pub index: usize,
    pub slope: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: "standard".into(),
            frames: 8,
            overlap: 2,
            index: 1,
            slope: fvdm_core::tasks::PROGRESSIVE_SLOPE,
        }
    }
}

fn field_err(field: &str, e: impl std::fmt::Display) -> FvdmError {
    FvdmError::Config(format!("{field}: {e}"))
}

pub fn parse_sampler_kind(name: &str) -> Option<SamplerKind> {
    match name {
        "ddim" => Some(SamplerKind::Deterministic),
        "ddpm" => Some(SamplerKind::Ancestral),
        _ => None,
    }
}

pub fn sampler_kind_name(kind: SamplerKind) -> &'static str {
    match kind {
        SamplerKind::Deterministic => "ddim",
        SamplerKind::Ancestral => "ddpm",
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FvdmError::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Validates every section and fills optional values from the presets.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        self.schedule()?;
        PtssConfig::new(self.ptss.p).map_err(|e| field_err("ptss.p", e))?;
        let frame_dim = self.dataset_spec()?.frame_dim();
        let m = self.denoiser(frame_dim)?;
        out.model.embed_dim = Some(m.embed_dim);
        out.model.n_layers = Some(m.n_layers);
        out.model.n_heads = Some(m.n_heads);
        out.model.mlp_ratio = Some(m.mlp_ratio);
        self.train_config()?;
        if let DatasetKind::BouncingBall { radius, speed } = self.dataset_spec()?.kind {
            out.dataset.radius = Some(radius);
            out.dataset.speed = Some(speed);
        }
        self.sampler()?;
        TaskKind::from_name(&self.task.kind)
            .ok_or_else(|| field_err("task.kind", format!("unknown task {:?}", self.task.kind)))?;
        Ok(out)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::new(s.beta_min, s.beta_max, s.horizon, s.t_min).map_err(|e| field_err("schedule", e))
    }

    pub fn denoiser(&self, frame_dim: usize) -> Result<DenoiserConfig> {
        let m = &self.model;
        let base = match m.preset.as_str() {
            "custom" => DenoiserConfig::new(
                frame_dim,
                m.embed_dim.unwrap_or(32),
                m.n_layers.unwrap_or(2),
                m.n_heads.unwrap_or(2),
                m.mlp_ratio.unwrap_or(4),
            ),
            name => DenoiserConfig::preset(name, frame_dim),
        }
        .map_err(|e| field_err("model.preset", e))?;
        let cfg = DenoiserConfig {
            embed_dim: m.embed_dim.unwrap_or(base.embed_dim),
            n_layers: m.n_layers.unwrap_or(base.n_layers),
            n_heads: m.n_heads.unwrap_or(base.n_heads),
            mlp_ratio: m.mlp_ratio.unwrap_or(base.mlp_ratio),
            ..base
        };
        cfg.validate().map_err(|e| field_err("model", e))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let weighting = Weighting::from_name(&t.weighting)
            .ok_or_else(|| field_err("train.weighting", format!("unknown mode {:?}", t.weighting)))?;
        let cfg = TrainConfig {
            ptss: PtssConfig::new(self.ptss.p).map_err(|e| field_err("ptss.p", e))?,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weighting,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            checkpoint_interval: t.checkpoint_interval,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| field_err("train", e))?;
        Ok(cfg)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let d = &self.dataset;
        let size = d.height.min(d.width) as f64;
        let kind = match d.kind.as_str() {
            "bouncing_ball" => DatasetKind::BouncingBall {
                radius: d.radius.unwrap_or(size / 6.0),
                speed: d.speed.unwrap_or(size / 10.0),
            },
            "moving_bar" => DatasetKind::MovingBar {
                width: d.bar_width,
                velocity: d.velocity,
            },
            "gaussian_ar1" => DatasetKind::GaussianAr1 {
                rho: d.rho,
                variance: d.variance,
                frame_dim: d.frame_dim,
            },
            other => return Err(field_err("dataset.kind", format!("unknown dataset {other:?}"))),
        };
        let spec = DatasetSpec {
            kind,
            n_frames: d.n_frames,
            geometry: Geometry::gray(d.height, d.width),
            count: d.count,
            seed: d.seed,
        };
        spec.validate().map_err(|e| field_err("dataset", e))?;
        Ok(spec)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let kind = parse_sampler_kind(&self.sampler.kind)
            .ok_or_else(|| field_err("sampler.kind", format!("expected ddim or ddpm, got {:?}", self.sampler.kind)))?;
        SamplerConfig::new(kind, self.sampler.steps).map_err(|e| field_err("sampler.steps", e))
    }
}

/// TOML form of a [`TaskSpec`]. Frame numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDocument {
    pub kind: String,
    pub frame_dim: usize,
    pub frozen: Vec<usize>,
    pub conditioning: Vec<Vec<f64>>,
    pub trajectories: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<[usize; 3]>,
}

impl TaskDocument {
    pub fn from_task(task: &TaskSpec) -> Self {
        Self {
            kind: task.kind().name().into(),
            frame_dim: task.frame_dim(),
            frozen: task.frozen().iter().map(|f| f + 1).collect(),
            conditioning: task.conditioning().to_vec(),
            trajectories: task.trajectories().to_vec(),
            geometry: task.geometry().map(|g| [g.height, g.width, g.channels]),
        }
    }

    pub fn to_task(&self, schedule: &NoiseSchedule) -> Result<TaskSpec> {
        let kind = TaskKind::from_name(&self.kind)
            .ok_or_else(|| field_err("kind", format!("unknown task {:?}", self.kind)))?;
        if self.frozen.contains(&0) {
            return Err(field_err("frozen", "frame numbers start at 1"));
        }
        let frozen = self.frozen.iter().map(|f| f - 1).collect();
        let task = TaskSpec::from_parts(
            kind,
            self.frame_dim,
            frozen,
            self.conditioning.clone(),
            self.trajectories.clone(),
            schedule,
        )?;
        let geometry = self.geometry.map(|[height, width, channels]| Geometry {
            height,
            width,
            channels,
        });
        Ok(task.with_geometry(geometry))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("task serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FvdmError::Config(e.to_string()))
    }
}
