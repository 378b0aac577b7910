//! Reading and writing clips, checkpoints, datasets and loss traces.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fvdm_core::data::{self, DatasetSpec};
use fvdm_core::diffusion::{Geometry, VideoTensor};
use fvdm_core::schedule::NoiseSchedule;
use fvdm_core::training::{decode_checkpoint, encode_checkpoint, StepRecord, TrainState};
use fvdm_core::Tensor;

use crate::error::{FvdmError, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FvdmError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FvdmError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| FvdmError::io(path, e))
}

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    write_bytes(path, &encode_checkpoint(entries))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(decode_checkpoint(&read_bytes(path)?)?)
}

/// A training state plus what sampling needs to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub state: TrainState,
    pub schedule: NoiseSchedule,
    pub geometry: Option<Geometry>,
}

const META_SCHEDULE: &str = "meta.schedule";
const META_GEOMETRY: &str = "meta.geometry";

impl ModelCheckpoint {
    /// Schedule and geometry go first as two extra metadata entries; a
    /// missing geometry is written as `[0, 0, 0]`.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let s = &self.schedule;
        let g = self
            .geometry
            .map_or([0.0; 3], |g| [g.height as f64, g.width as f64, g.channels as f64]);
        let mut out = vec![
            (
                META_SCHEDULE.to_string(),
                Tensor::new(vec![4], vec![s.beta_min, s.beta_max, s.horizon, s.t_min]).expect("finite"),
            ),
            (META_GEOMETRY.to_string(), Tensor::new(vec![3], g.to_vec()).expect("finite")),
        ];
        out.extend(self.state.to_entries());
        out
    }

    pub fn from_entries(mut entries: Vec<(String, Tensor)>) -> Result<Self> {
        let bad = || FvdmError::Core(fvdm_core::Error::Checkpoint("missing model metadata".into()));
        if entries.len() < 2 || entries[0].0 != META_SCHEDULE || entries[1].0 != META_GEOMETRY {
            return Err(bad());
        }
        let rest = entries.split_off(2);
        let s = entries[0].1.data();
        let g = entries[1].1.data();
        if s.len() != 4 || g.len() != 3 {
            return Err(bad());
        }
        let schedule = NoiseSchedule::new(s[0], s[1], s[2], s[3])?;
        let geometry = (g[0] > 0.0).then(|| Geometry {
            height: g[0] as usize,
            width: g[1] as usize,
            channels: g[2] as usize,
        });
        Ok(Self {
            state: TrainState::from_entries(rest, None)?,
            schedule,
            geometry,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(load_checkpoint(path)?)
    }
}

/// Reads a clip from `.pgm` (strip of `frame_width`-wide frames) or f64_raw.
pub fn read_clip(path: &Path, geometry: Option<Geometry>) -> Result<VideoTensor> {
    let bytes = read_bytes(path)?;
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let clip = data::pgm_to_clip(&bytes, geometry.map(|g| g.width))?;
        if let Some(g) = geometry {
            if clip.frame_dim() != g.frame_dim() {
                return Err(FvdmError::Usage(format!(
                    "{}: frames are {} pixels, model expects {}x{}",
                    path.display(),
                    clip.frame_dim(),
                    g.height,
                    g.width
                )));
            }
        }
        Ok(clip)
    } else {
        let mut clip = data::decode_f64_raw(&bytes)?;
        clip.set_geometry(geometry);
        Ok(clip)
    }
}

/// Writes `<stem>.f64` and, when the clip has image geometry, `<stem>.pgm`.
pub fn write_clip(dir: &Path, stem: &str, clip: &VideoTensor) -> Result<Vec<PathBuf>> {
    let raw = dir.join(format!("{stem}.f64"));
    write_bytes(&raw, &data::encode_f64_raw(clip))?;
    let mut written = vec![raw];
    if clip.geometry().is_some() {
        let pgm = dir.join(format!("{stem}.pgm"));
        write_bytes(&pgm, &data::encode_pgm_strip(&clip.clamped_for_export())?)?;
        written.push(pgm);
    }
    Ok(written)
}

/// All `*.f64` clips in `dir`, in file-name order.
pub fn read_clip_dir(dir: &Path) -> Result<Vec<VideoTensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| FvdmError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "f64"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(FvdmError::Usage(format!("{}: no .f64 clips found", dir.display())));
    }
    let clips = paths
        .iter()
        .map(|p| read_clip(p, None))
        .collect::<Result<Vec<_>>>()?;
    let shape = (clips[0].n_frames(), clips[0].frame_dim());
    if let Some(p) = paths
        .iter()
        .zip(&clips)
        .find(|(_, c)| (c.n_frames(), c.frame_dim()) != shape)
        .map(|(p, _)| p)
    {
        return Err(FvdmError::Usage(format!(
            "{}: clip shape differs from {}x{}",
            p.display(),
            shape.0,
            shape.1
        )));
    }
    Ok(clips)
}

/// Writes `count` clips starting at `first` as `clip_XXXXX` files.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, first: usize, count: usize) -> Result<()> {
    for k in first..first + count {
        let clip = data::generate(spec, k)?;
        write_clip(dir, &format!("clip_{k:05}"), &clip)?;
    }
    Ok(())
}

pub fn loss_csv(trace: &[StepRecord]) -> String {
    let mut s = String::from("step,loss,grad_norm,ptss_branch\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.grad_norm, r.ptss_branch.as_str());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use fvdm_core::models::{Denoiser, DenoiserConfig};
    use fvdm_core::training::TrainConfig;
    use fvdm_core::RngStream;

    #[test]
    fn model_checkpoint_round_trip() {
        let cfg = DenoiserConfig::new(4, 8, 1, 2, 2).unwrap();
        let model = Denoiser::init(cfg, &mut RngStream::new(1, 0)).unwrap();
        let ck = ModelCheckpoint {
            state: TrainState::new(model, &TrainConfig::default()).unwrap(),
            schedule: NoiseSchedule::default(),
            geometry: Some(Geometry::gray(2, 2)),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.fvdm");
        ck.save(&p).unwrap();
        let back = ModelCheckpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let q = dir.path().join("b.fvdm");
        back.save(&q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn clip_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec::bouncing_ball(3, 8, 4, 2);
        write_dataset(dir.path(), &spec, 0, 4).unwrap();
        let clips = read_clip_dir(dir.path()).unwrap();
        assert_eq!(clips.len(), 4);
        assert_eq!(clips[2].as_slice(), data::generate(&spec, 2).unwrap().as_slice());
        let pgm = read_clip(&dir.path().join("clip_00001.pgm"), Some(Geometry::gray(8, 8))).unwrap();
        assert_eq!(pgm.n_frames(), 3);
        let empty = tempfile::tempdir().unwrap();
        assert_eq!(read_clip_dir(empty.path()).unwrap_err().exit_code(), 2);
    }
}
