//! Variance-preserving noise schedule, vectorized timesteps and
//! probabilistic timestep sampling (PTSS).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::RngStream;
use crate::{Error, Result};

/// Linear-β variance-preserving schedule on `[0, horizon]`.
///
/// Per frame the forward SDE is `dx = -½β(t)x dt + √β(t) dw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
    /// Smallest time used for training draws and the last non-zero grid point.
    pub t_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
            t_min: 1e-3,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64, t_min: f64) -> Result<Self> {
        let s = Self {
            beta_min,
            beta_max,
            horizon,
            t_min,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_min.is_finite()
            && self.beta_max.is_finite()
            && self.beta_min >= 0.0
            && self.beta_max >= self.beta_min
            && self.horizon > 0.0
            && self.horizon.is_finite()
            && self.t_min > 0.0
            && self.t_min < self.horizon;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid noise schedule {self:?}")))
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon,
            })
        }
    }

    /// Instantaneous rate β(t).
    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon)
    }

    /// `B(t) = ∫₀ᵗ β(s) ds`.
    pub fn accumulated_beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.horizon)
    }

    /// `(mean_coef, std)` of `x_t | x_0 ~ N(mean_coef·x_0, std²·I)`.
    pub fn marginal_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        let b = self.accumulated_beta(t)?;
        Ok((math::exp(-0.5 * b), math::sqrt(-math::expm1(-b))))
    }

    /// Sampling grid `[T, t_{K-1}, …, t_1, 0]`: uniform on `(t_min, T]`
    /// followed by a final step to exactly zero.
    pub fn time_grid(&self, steps: usize) -> Result<Vec<f64>> {
        if steps < 1 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        let span = self.horizon - self.t_min;
        let mut grid = Vec::with_capacity(steps + 1);
        grid.push(self.horizon);
        for k in (1..steps).rev() {
            grid.push(self.t_min + span * k as f64 / steps as f64);
        }
        grid.push(0.0);
        Ok(grid)
    }
}

/// Vectorized timestep variable: one diffusion time per frame.
///
/// A time of exactly zero marks a frozen (clean, conditioning) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Vtv {
    times: Vec<f64>,
}

impl Vtv {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("empty timestep vector".into()));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid timesteps {times:?}")));
        }
        Ok(Self { times })
    }

    /// `t·1` over `n` frames.
    pub fn broadcast(t: f64, n: usize) -> Result<Self> {
        Self::new(vec![t; n])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn is_frozen(&self, frame: usize) -> bool {
        self.times[frame] == 0.0
    }

    pub fn is_constant(&self) -> bool {
        self.times.windows(2).all(|w| w[0] == w[1])
    }

    /// Copy with `frames` pinned to zero.
    pub fn with_frozen(&self, frames: &[usize]) -> Self {
        let mut times = self.times.clone();
        for &f in frames {
            times[f] = 0.0;
        }
        Self { times }
    }

    /// Applies a permutation: output frame `i` takes input frame `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            times: perm.iter().map(|&p| self.times[p]).collect(),
        }
    }
}

/// Probabilistic timestep sampling: with probability `p` each frame gets
/// its own time, otherwise one time is shared by all frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtssConfig {
    p: f64,
}

impl Default for PtssConfig {
    fn default() -> Self {
        Self { p: 0.2 }
    }
}

impl PtssConfig {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("PTSS probability {p} not in [0, 1]")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// Which PTSS branch produced a [`Vtv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtssBranch {
    Shared,
    PerFrame,
}

impl PtssBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            PtssBranch::Shared => "shared",
            PtssBranch::PerFrame => "per_frame",
        }
    }
}

/// Draws a training [`Vtv`]. Entries are Uniform(t_min, T) and never zero.
/// Per-frame draws are i.i.d., so collisions are possible.
pub fn ptss_sample(
    cfg: &PtssConfig,
    schedule: &NoiseSchedule,
    n_frames: usize,
    rng: &mut RngStream,
) -> Result<(Vtv, PtssBranch)> {
    if n_frames < 1 {
        return Err(Error::InvalidArgument("PTSS needs at least one frame".into()));
    }
    let (lo, hi) = (schedule.t_min, schedule.horizon);
    let per_frame = cfg.p > 0.0 && rng.uniform() < cfg.p;
    if per_frame {
        let times = (0..n_frames).map(|_| rng.uniform_range(lo, hi)).collect();
        Ok((Vtv { times }, PtssBranch::PerFrame))
    } else {
        let t = rng.uniform_range(lo, hi);
        Ok((Vtv { times: vec![t; n_frames] }, PtssBranch::Shared))
    }
}
