//! Sampler checks against an AR(1) Gaussian law whose score is known in
//! closed form.

use fvdm_core::data::{ar1_law, DatasetSpec};
use fvdm_core::diffusion::{sample, SamplerConfig, SamplerKind, VideoTensor};
use fvdm_core::eval::{moment_check_frames, MomentReport};
use fvdm_core::models::{CachedGaussianScore, GaussianVideoModel};
use fvdm_core::schedule::NoiseSchedule;
use fvdm_core::tasks::{self, TaskSpec};
use fvdm_core::RngStream;

use crate::error::{FvdmError, Result};

pub const ORACLE_FRAMES: usize = 4;
pub const ORACLE_FRAME_DIM: usize = 2;
pub const ORACLE_RHO: f64 = 0.9;
pub const EXTEND_OVERLAP: usize = 2;
/// Below this many samples Monte-Carlo error swamps the tolerances.
pub const MIN_ORACLE_SAMPLES: usize = 1000;
pub const MEAN_TOL: f64 = 0.05;
pub const COV_TOL_ANCESTRAL: f64 = 0.15;
pub const COV_TOL_DETERMINISTIC: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleCase {
    Unconditional,
    Image2Video,
    Interpolate,
    Extend,
}

impl OracleCase {
    pub const ALL: [Self; 4] = [Self::Unconditional, Self::Image2Video, Self::Interpolate, Self::Extend];

    pub fn name(self) -> &'static str {
        match self {
            Self::Unconditional => "unconditional",
            Self::Image2Video => "i2v",
            Self::Interpolate => "interpolate",
            Self::Extend => "extend",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// The AR(1) law used by every case.
pub fn oracle_law() -> GaussianVideoModel {
    ar1_law(&DatasetSpec::gaussian_ar1(ORACLE_FRAMES, ORACLE_FRAME_DIM, ORACLE_RHO, 1, 0))
        .expect("valid AR(1) law")
}

/// The task for `case` and the analytic law of its free frames.
pub fn oracle_task(
    case: OracleCase,
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(TaskSpec, GaussianVideoModel)> {
    let law = oracle_law();
    let mut rng = RngStream::new(seed, RngStream::derive_id(&[0xC0, 0]));
    let reference = law.sample(&mut rng)?;
    let n = ORACLE_FRAMES;
    let task = match case {
        OracleCase::Unconditional => tasks::standard(n, ORACLE_FRAME_DIM, steps, schedule)?,
        OracleCase::Image2Video => tasks::image2video(reference.frame(0), n, steps, schedule)?,
        OracleCase::Interpolate => {
            tasks::interpolate(reference.frame(0), reference.frame(n - 1), n, steps, schedule)?
        }
        OracleCase::Extend => tasks::extend(&reference, EXTEND_OVERLAP, n, steps, schedule)?,
    };
    let target = if task.frozen().is_empty() {
        law
    } else {
        law.condition(task.frozen(), task.conditioning())?
    };
    Ok((task, target))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub case: OracleCase,
    pub kind: SamplerKind,
    pub steps: usize,
    pub report: MomentReport,
    pub mean_tol: f64,
    pub cov_tol: f64,
    /// Every frozen frame of every sample equals its conditioning bit for bit.
    pub frozen_exact: bool,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.report.within(self.mean_tol, self.cov_tol) && self.frozen_exact
    }

    pub fn summary(&self) -> String {
        format!(
            "case={} sampler={} steps={} samples={} mean_abs_error={:.6} cov_rel_error={:.6} mean_tol={} cov_tol={} frozen_exact={} status={}",
            self.case.name(),
            crate::config::sampler_kind_name(self.kind),
            self.steps,
            self.report.samples,
            self.report.mean_abs_error,
            self.report.cov_rel_error,
            self.mean_tol,
            self.cov_tol,
            self.frozen_exact,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

/// Draws `samples` clips with the analytic score and compares the free
/// frames with their exact law.
pub fn run_oracle(
    case: OracleCase,
    samples: usize,
    steps: usize,
    kind: SamplerKind,
    seed: u64,
) -> Result<OracleOutcome> {
    if samples < MIN_ORACLE_SAMPLES {
        return Err(FvdmError::Core(fvdm_core::Error::InsufficientSamples {
            needed: MIN_ORACLE_SAMPLES,
            got: samples,
        }));
    }
    let schedule = NoiseSchedule::default();
    let (task, target) = oracle_task(case, steps, &schedule, seed)?;
    let law = oracle_law();
    let score = CachedGaussianScore::new(&law, schedule);
    let cfg = SamplerConfig::new(kind, steps)?;
    let draws = (0..samples)
        .map(|k| {
            let mut rng = RngStream::new(seed, RngStream::derive_id(&[1, k as u64]));
            sample(&score, &task, &cfg, &schedule, &mut rng)
        })
        .collect::<fvdm_core::Result<Vec<VideoTensor>>>()?;
    let frozen_exact = draws.iter().all(|x| {
        task.frozen()
            .iter()
            .all(|&f| bits(x.frame(f)) == bits(task.conditioning_frame(f)))
    });
    let free: Vec<usize> = (0..task.n_frames()).filter(|&i| !task.is_frozen(i)).collect();
    let report = moment_check_frames(&draws, &free, &target)?;
    Ok(OracleOutcome {
        case,
        kind,
        steps,
        report,
        mean_tol: MEAN_TOL,
        cov_tol: match kind {
            SamplerKind::Ancestral => COV_TOL_ANCESTRAL,
            SamplerKind::Deterministic => COV_TOL_DETERMINISTIC,
        },
        frozen_exact,
    })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
