//! Zero-shot task builders: which frames are frozen, what they hold, and
//! the time trajectory every frame follows during sampling.
//!
//! Frame indices are 0-based in code. Trajectories are stored explicitly as
//! `K + 1` descending time points per frame.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{Geometry, VideoTensor};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Standard,
    Image2Video,
    Interpolate,
    Extend,
    ConditionOnFrame,
    NextFrame,
    Progressive,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Standard => "standard",
            TaskKind::Image2Video => "i2v",
            TaskKind::Interpolate => "interpolate",
            TaskKind::Extend => "extend",
            TaskKind::ConditionOnFrame => "frame",
            TaskKind::NextFrame => "next",
            TaskKind::Progressive => "progressive",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "standard" => TaskKind::Standard,
            "i2v" | "image2video" => TaskKind::Image2Video,
            "interpolate" => TaskKind::Interpolate,
            "extend" => TaskKind::Extend,
            "frame" | "condition_on_frame" => TaskKind::ConditionOnFrame,
            "next" | "next_frame" => TaskKind::NextFrame,
            "progressive" => TaskKind::Progressive,
            _ => return None,
        })
    }
}

/// A validated sampling task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    kind: TaskKind,
    frame_dim: usize,
    frozen: Vec<usize>,
    conditioning: Vec<Vec<f64>>,
    trajectories: Vec<Vec<f64>>,
    geometry: Option<Geometry>,
}

impl TaskSpec {
    /// Builds and validates a task from explicit parts. `conditioning[k]`
    /// is the content of frame `frozen[k]`.
    pub fn from_parts(
        kind: TaskKind,
        frame_dim: usize,
        frozen: Vec<usize>,
        conditioning: Vec<Vec<f64>>,
        trajectories: Vec<Vec<f64>>,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        let task = Self {
            kind,
            frame_dim,
            frozen,
            conditioning,
            trajectories,
            geometry: None,
        };
        task.validate(schedule)?;
        Ok(task)
    }

    pub fn with_geometry(mut self, geometry: Option<Geometry>) -> Self {
        self.geometry = geometry.filter(|g| g.frame_dim() == self.frame_dim);
        self
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn n_frames(&self) -> usize {
        self.trajectories.len()
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn steps(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.len().saturating_sub(1))
    }

    pub fn frozen(&self) -> &[usize] {
        &self.frozen
    }

    pub fn is_frozen(&self, frame: usize) -> bool {
        self.frozen.contains(&frame)
    }

    pub fn conditioning(&self) -> &[Vec<f64>] {
        &self.conditioning
    }

    /// Content of a frozen frame. Panics if `frame` is not frozen.
    pub fn conditioning_frame(&self, frame: usize) -> &[f64] {
        let k = self
            .frozen
            .iter()
            .position(|&f| f == frame)
            .expect("conditioning_frame called on a non-frozen frame");
        &self.conditioning[k]
    }

    pub fn trajectories(&self) -> &[Vec<f64>] {
        &self.trajectories
    }

    pub fn geometry(&self) -> Option<Geometry> {
        self.geometry
    }

    /// The time of every frame at trajectory index `step` (0 = start).
    pub fn times_at(&self, step: usize) -> Vec<f64> {
        self.trajectories.iter().map(|t| t[step]).collect()
    }

    /// Frozen trajectories are identically zero, the others are
    /// non-increasing from a time in `(0, T]` down to exactly 0, and
    /// conditioning content exists exactly for the frozen frames.
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTask(msg));
        let n = self.trajectories.len();
        if n == 0 || self.frame_dim == 0 {
            return bad("task has no frames".into());
        }
        let len = self.trajectories[0].len();
        if len < 2 {
            return bad("trajectories need at least one step".into());
        }
        if self.frozen.len() != self.conditioning.len() {
            return bad(format!(
                "{} frozen frames but {} conditioning frames",
                self.frozen.len(),
                self.conditioning.len()
            ));
        }
        if self.frozen.windows(2).any(|w| w[0] >= w[1]) {
            return bad("frozen set must be sorted and unique".into());
        }
        if let Some(&f) = self.frozen.iter().find(|&&f| f >= n) {
            return bad(format!("frozen frame {f} out of range for {n} frames"));
        }
        for c in &self.conditioning {
            if c.len() != self.frame_dim || c.iter().any(|v| !v.is_finite()) {
                return bad(format!(
                    "conditioning frame of length {} for frame_dim {}",
                    c.len(),
                    self.frame_dim
                ));
            }
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.len() != len {
                return bad(format!("frame {i} trajectory has {} points, expected {len}", traj.len()));
            }
            if self.is_frozen(i) {
                if traj.iter().any(|&t| t != 0.0) {
                    return bad(format!("frozen frame {i} has a non-zero trajectory"));
                }
                continue;
            }
            let start = traj[0];
            if !(start > 0.0 && start <= schedule.horizon) {
                return bad(format!("frame {i} starts at {start}, outside (0, T]"));
            }
            if traj[len - 1] != 0.0 {
                return bad(format!("frame {i} does not end at 0"));
            }
            if traj.windows(2).any(|w| !(w[1] <= w[0]) || w[1] < 0.0) {
                return bad(format!("frame {i} trajectory is not non-increasing"));
            }
        }
        Ok(())
    }
}

fn check_counts(n_frames: usize, steps: usize) -> Result<()> {
    if n_frames < 1 || steps < 1 {
        return Err(Error::InvalidTask(format!(
            "need at least one frame and one step (got N={n_frames}, K={steps})"
        )));
    }
    Ok(())
}

fn build(
    kind: TaskKind,
    n_frames: usize,
    frame_dim: usize,
    steps: usize,
    frozen: Vec<(usize, Vec<f64>)>,
    schedule: &NoiseSchedule,
) -> Result<TaskSpec> {
    check_counts(n_frames, steps)?;
    let grid = schedule.time_grid(steps)?;
    let mut frozen = frozen;
    frozen.sort_by_key(|(i, _)| *i);
    let trajectories = (0..n_frames)
        .map(|i| {
            if frozen.iter().any(|(f, _)| *f == i) {
                vec![0.0; steps + 1]
            } else {
                grid.clone()
            }
        })
        .collect();
    let (idx, content): (Vec<usize>, Vec<Vec<f64>>) = frozen.into_iter().unzip();
    TaskSpec::from_parts(kind, frame_dim, idx, content, trajectories, schedule)
}

/// Unconditional generation: every frame follows the same grid.
pub fn standard(
    n_frames: usize,
    frame_dim: usize,
    steps: usize,
    schedule: &NoiseSchedule,
) -> Result<TaskSpec> {
    build(TaskKind::Standard, n_frames, frame_dim, steps, Vec::new(), schedule)
}

/// First frame frozen to `image`.
pub fn image2video(
    image: &[f64],
    n_frames: usize,
    steps: usize,
    schedule: &NoiseSchedule,
) -> Result<TaskSpec> {
    let mut t = condition_on_frame(image, 1, n_frames, steps, schedule)?;
    t.kind = TaskKind::Image2Video;
    Ok(t)
}

/// First and last frames frozen.
pub fn interpolate(
    first: &[f64],
    last: &[f64],
    n_frames: usize,
    steps: usize,
    schedule: &NoiseSchedule,
) -> Result<TaskSpec> {
    if n_frames < 3 {
        return Err(Error::InvalidTask(format!("interpolation needs N >= 3, got {n_frames}")));
    }
    if first.len() != last.len() {
        return Err(Error::InvalidTask("endpoint frames differ in size".into()));
    }
    build(
        TaskKind::Interpolate,
        n_frames,
        first.len(),
        steps,
        vec![(0, first.to_vec()), (n_frames - 1, last.to_vec())],
        schedule,
    )
}

/// First `overlap` frames frozen to the last `overlap` frames of `prev`.
pub fn extend(
    prev: &VideoTensor,
    overlap: usize,
    n_frames: usize,
    steps: usize,
    schedule: &NoiseSchedule,
) -> Result<TaskSpec> {
    if overlap < 1 || overlap >= n_frames {
        return Err(Error::InvalidTask(format!(
            "overlap must satisfy 1 <= M < N (M={overlap}, N={n_frames})"
        )));
    }
    if prev.n_frames() < overlap {
        return Err(Error::InvalidTask(format!(
            "previous clip has {} frames, need {overlap}",
            prev.n_frames()
        )));
    }
    let tail = prev.n_frames() - overlap;
    let frozen = (0..overlap).map(|i| (i, prev.frame(tail + i).to_vec())).collect();
    Ok(build(TaskKind::Extend, n_frames, prev.frame_dim(), steps, frozen, schedule)?
        .with_geometry(prev.geometry()))
}

/// Frame `h` (1-based) frozen to `frame`.
pub fn condition_on_frame(
    frame: &[f64],
    h: usize,
    n_frames: usize,
    steps: usize,
    schedule: &NoiseSchedule,
) -> Result<TaskSpec> {
    if h < 1 || h > n_frames {
        return Err(Error::InvalidTask(format!("frame index {h} outside 1..={n_frames}")));
    }
    build(
        TaskKind::ConditionOnFrame,
        n_frames,
        frame.len(),
        steps,
        vec![(h - 1, frame.to_vec())],
        schedule,
    )
}

/// All but the last frame frozen to the last `N − 1` frames of `prev`.
pub fn next_frame(
    prev: &VideoTensor,
    n_frames: usize,
    steps: usize,
    schedule: &NoiseSchedule,
) -> Result<TaskSpec> {
    if n_frames < 2 {
        return Err(Error::InvalidTask("next-frame prediction needs N >= 2".into()));
    }
    let mut t = extend(prev, n_frames - 1, n_frames, steps, schedule)?;
    t.kind = TaskKind::NextFrame;
    Ok(t)
}

/// Default slope of the progressive schedule.
pub const PROGRESSIVE_SLOPE: f64 = 0.2;

/// No frozen frames; frame `i` (1-based) follows `min(slope·i·t, t)`.
pub fn progressive(
    n_frames: usize,
    frame_dim: usize,
    steps: usize,
    slope: f64,
    schedule: &NoiseSchedule,
) -> Result<TaskSpec> {
    check_counts(n_frames, steps)?;
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(Error::InvalidTask(format!("slope must be positive, got {slope}")));
    }
    let grid = schedule.time_grid(steps)?;
    let trajectories = (1..=n_frames)
        .map(|i| grid.iter().map(|&t| f64::min(slope * i as f64 * t, t)).collect())
        .collect();
    TaskSpec::from_parts(
        TaskKind::Progressive,
        frame_dim,
        Vec::new(),
        Vec::new(),
        trajectories,
        schedule,
    )
}

/// Generates a long sequence clip by clip: the first clip comes from
/// `first`, each later clip from an [`extend`] task over the previous one,
/// contributing `clip_len − overlap` new frames. Stops at `total_frames`.
pub fn extend_chain<F>(
    first: VideoTensor,
    overlap: usize,
    clip_len: usize,
    steps: usize,
    total_frames: usize,
    schedule: &NoiseSchedule,
    mut generate: F,
) -> Result<VideoTensor>
where
    F: FnMut(usize, &TaskSpec) -> Result<VideoTensor>,
{
    if first.n_frames() != clip_len {
        return Err(Error::InvalidTask(format!(
            "first clip has {} frames, expected {clip_len}",
            first.n_frames()
        )));
    }
    let d = first.frame_dim();
    let geometry = first.geometry();
    let mut frames: Vec<Vec<f64>> = first.frames().map(<[f64]>::to_vec).collect();
    let mut prev = first;
    let mut clip_index = 1;
    while frames.len() < total_frames {
        let task = extend(&prev, overlap, clip_len, steps, schedule)?;
        let clip = generate(clip_index, &task)?;
        if clip.n_frames() != clip_len || clip.frame_dim() != d {
            return Err(Error::Shape("generated clip has the wrong shape".into()));
        }
        frames.extend(clip.frames().skip(overlap).map(<[f64]>::to_vec));
        prev = clip;
        clip_index += 1;
    }
    frames.truncate(total_frames);
    let mut out = VideoTensor::from_frames(&frames)?;
    out.set_geometry(geometry);
    Ok(out)
}
