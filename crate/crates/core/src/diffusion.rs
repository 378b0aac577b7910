//! Per-frame forward perturbation and vectorized reverse samplers.
//!
//! Every step works frame by frame with that frame's own `(τ, τ')` pair.
//! A frame whose time does not change across a step is returned untouched,
//! which is what keeps frozen (τ = 0) conditioning frames bit-exact.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::models::ScoreFunction;
use crate::rng::RngStream;
use crate::schedule::{NoiseSchedule, Vtv};
use crate::tasks::TaskSpec;
use crate::{Error, Result, Tensor};

/// Image layout of a frame, `height * width * channels == frame_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn gray(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 1,
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// An `N × d` clip: one flattened frame per row.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Tensor,
    geometry: Option<Geometry>,
}

impl VideoTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims2()?;
        Ok(Self {
            data,
            geometry: None,
        })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(frames)?)
    }

    pub fn from_flat(n_frames: usize, frame_dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![n_frames, frame_dim], data)?)
    }

    pub fn zeros(n_frames: usize, frame_dim: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[n_frames, frame_dim])?)
    }

    pub fn with_geometry(mut self, geometry: Geometry) -> Result<Self> {
        if geometry.frame_dim() != self.frame_dim() {
            return Err(Error::Shape(format!(
                "geometry {geometry:?} does not match frame_dim {}",
                self.frame_dim()
            )));
        }
        self.geometry = Some(geometry);
        Ok(self)
    }

    pub fn set_geometry(&mut self, geometry: Option<Geometry>) {
        self.geometry = geometry.filter(|g| g.frame_dim() == self.frame_dim());
    }

    pub fn geometry(&self) -> Option<Geometry> {
        self.geometry
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frame_dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.data()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_frames()).map(move |i| self.frame(i))
    }

    pub(crate) fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.frame_dim();
        &mut self.data.data_mut()[i * d..(i + 1) * d]
    }

    /// Replaces one frame.
    pub fn set_frame(&mut self, i: usize, values: &[f64]) -> Result<()> {
        if i >= self.n_frames() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.n_frames(),
            });
        }
        if values.len() != self.frame_dim() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "frame of length {} for frame_dim {}",
                values.len(),
                self.frame_dim()
            )));
        }
        self.frame_mut(i).copy_from_slice(values);
        Ok(())
    }

    /// Frames `start..end` as a new clip (geometry kept).
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            data: self.data.slice_rows(start, end)?,
            geometry: self.geometry,
        })
    }

    /// Output frame `i` is input frame `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let frames: Vec<Vec<f64>> = perm.iter().map(|&p| self.frame(p).to_vec()).collect();
        let mut out = Self::from_frames(&frames)?;
        out.geometry = self.geometry;
        Ok(out)
    }

    /// Copy with values clamped to `[-3, 3]`, applied only on export.
    pub fn clamped_for_export(&self) -> Self {
        Self {
            data: Tensor::from_parts(
                self.data.shape().to_vec(),
                self.data.data().iter().map(|v| v.clamp(-3.0, 3.0)).collect(),
            ),
            geometry: self.geometry,
        }
    }

    fn check_tau(&self, tau: &Vtv) -> Result<()> {
        if tau.len() != self.n_frames() {
            return Err(Error::Shape(format!(
                "timestep vector of length {} for {} frames",
                tau.len(),
                self.n_frames()
            )));
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::Shape(format!(
                "clip shapes {:?} vs {:?}",
                self.data.shape(),
                other.data.shape()
            )));
        }
        Ok(())
    }
}

/// Reverse sampler flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// DDPM-style posterior sampling with fresh noise every step.
    Ancestral,
    /// DDIM with η = 0.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub stream_id: u64,
    /// Pin frozen frames to their conditioning content. Turning this off
    /// is only meaningful as a negative control for conditioning tests.
    pub clamp_frozen: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Deterministic,
            steps: 50,
            stream_id: 0,
            clamp_frozen: true,
        }
    }
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidArgument("sampler needs at least one step".into()));
        }
        Ok(Self {
            kind,
            steps,
            ..Self::default()
        })
    }
}

/// Noises each frame to its own time:
/// `xt⁽ⁱ⁾ = mean_coef(τᵢ)·x0⁽ⁱ⁾ + std(τᵢ)·ε⁽ⁱ⁾`. Returns `(xt, ε)`.
pub fn perturb(
    x0: &VideoTensor,
    tau: &Vtv,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<(VideoTensor, VideoTensor)> {
    x0.check_tau(tau)?;
    let (n, d) = (x0.n_frames(), x0.frame_dim());
    let eps = rng.gaussian(&[n, d])?;
    let mut xt = x0.clone();
    for i in 0..n {
        let (m, s) = schedule.marginal_coeffs(tau.times()[i])?;
        let e = eps.row(i);
        for (x, &z) in xt.frame_mut(i).iter_mut().zip(e) {
            *x = m * *x + s * z;
        }
    }
    let eps = VideoTensor {
        data: eps,
        geometry: x0.geometry,
    };
    Ok((xt, eps))
}

/// Largest step accepted by [`simulate_forward_sde`].
pub const MAX_SDE_STEP: f64 = 1e-3;

/// Euler–Maruyama integration of the per-frame forward SDE, each frame on
/// its own clock from 0 to `tau_end[i]`.
pub fn simulate_forward_sde(
    x0: &VideoTensor,
    tau_end: &Vtv,
    schedule: &NoiseSchedule,
    step_size: f64,
    rng: &mut RngStream,
) -> Result<VideoTensor> {
    x0.check_tau(tau_end)?;
    if !(step_size > 0.0 && step_size <= MAX_SDE_STEP) {
        return Err(Error::InvalidArgument(format!(
            "SDE step {step_size} must be in (0, {MAX_SDE_STEP}]"
        )));
    }
    let d = x0.frame_dim();
    let mut x = x0.clone();
    let mut z = vec![0.0; d];
    for i in 0..x0.n_frames() {
        let end = tau_end.times()[i];
        schedule.beta(end)?;
        if end == 0.0 {
            continue;
        }
        let steps = libm::ceil(end / step_size - 1e-9).max(1.0) as usize;
        let dt = end / steps as f64;
        let sqrt_dt = math::sqrt(dt);
        let frame = x.frame_mut(i);
        for k in 0..steps {
            let b = schedule.beta(k as f64 * dt)?;
            let diffusion = math::sqrt(b) * sqrt_dt;
            rng.fill_gaussian(&mut z);
            for (v, &w) in frame.iter_mut().zip(&z) {
                *v += -0.5 * b * *v * dt + diffusion * w;
            }
        }
    }
    Ok(x)
}

fn check_step_args(
    x: &VideoTensor,
    tau: &Vtv,
    tau_next: &Vtv,
    eps_hat: &VideoTensor,
) -> Result<()> {
    x.check_tau(tau)?;
    x.check_tau(tau_next)?;
    x.check_same_shape(eps_hat)?;
    for (i, (&t, &tn)) in tau.times().iter().zip(tau_next.times()).enumerate() {
        if tn > t {
            return Err(Error::InvalidArgument(format!(
                "frame {i}: next time {tn} exceeds current time {t}"
            )));
        }
    }
    Ok(())
}

/// Deterministic (DDIM, η = 0) update applied per frame:
/// `x̂₀ = (x − std(τ)ε̂)/mean_coef(τ)`, `x' = mean_coef(τ')x̂₀ + std(τ')ε̂`.
pub fn ddim_step(
    x: &VideoTensor,
    tau: &Vtv,
    tau_next: &Vtv,
    eps_hat: &VideoTensor,
    schedule: &NoiseSchedule,
) -> Result<VideoTensor> {
    check_step_args(x, tau, tau_next, eps_hat)?;
    let mut out = x.clone();
    for i in 0..x.n_frames() {
        let (t, tn) = (tau.times()[i], tau_next.times()[i]);
        if t == tn {
            continue;
        }
        let (m, s) = schedule.marginal_coeffs(t)?;
        let (mn, sn) = schedule.marginal_coeffs(tn)?;
        if m <= 0.0 {
            return Err(Error::NonFinite(format!("mean coefficient underflow at τ={t}")));
        }
        let e = eps_hat.frame(i);
        for (v, &eh) in out.frame_mut(i).iter_mut().zip(e) {
            let x0_hat = (*v - s * eh) / m;
            *v = mn * x0_hat + sn * eh;
        }
    }
    out.data.ensure_finite("ddim_step")?;
    Ok(out)
}

/// Ancestral (DDPM posterior) update per frame with `ᾱ = mean_coef²`:
/// `β_k = 1 − ᾱ(τ)/ᾱ(τ')`,
/// `x' = (x − β_k/√(1−ᾱ(τ))·ε̂)/√(1−β_k) + √β̃·z`,
/// `β̃ = β_k(1−ᾱ(τ'))/(1−ᾱ(τ))`. Noise is drawn, in frame order, only for
/// frames that move to a non-zero time.
pub fn ancestral_step(
    x: &VideoTensor,
    tau: &Vtv,
    tau_next: &Vtv,
    eps_hat: &VideoTensor,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<VideoTensor> {
    check_step_args(x, tau, tau_next, eps_hat)?;
    let d = x.frame_dim();
    let noisy: Vec<usize> = (0..x.n_frames())
        .filter(|&i| tau.times()[i] > tau_next.times()[i] && tau_next.times()[i] > 0.0)
        .collect();
    let mut z = vec![0.0; noisy.len() * d];
    rng.fill_gaussian(&mut z);
    let mut out = x.clone();
    let mut next_noise = 0;
    for i in 0..x.n_frames() {
        let (t, tn) = (tau.times()[i], tau_next.times()[i]);
        if t == tn {
            continue;
        }
        let (m, s) = schedule.marginal_coeffs(t)?;
        let (mn, sn) = schedule.marginal_coeffs(tn)?;
        if m <= 0.0 {
            return Err(Error::NonFinite(format!("mean coefficient underflow at τ={t}")));
        }
        let alpha_bar = m * m;
        let alpha_bar_next = mn * mn;
        let beta_k = 1.0 - alpha_bar / alpha_bar_next;
        let eps_coef = beta_k / s;
        let inv_sqrt_alpha = 1.0 / math::sqrt(1.0 - beta_k);
        let e = eps_hat.frame(i);
        let frame = out.frame_mut(i);
        for (v, &eh) in frame.iter_mut().zip(e) {
            *v = (*v - eps_coef * eh) * inv_sqrt_alpha;
        }
        if tn > 0.0 {
            let post_std = math::sqrt(beta_k * (sn * sn) / (s * s));
            let zf = &z[next_noise * d..(next_noise + 1) * d];
            next_noise += 1;
            for (v, &w) in frame.iter_mut().zip(zf) {
                *v += post_std * w;
            }
        }
    }
    out.data.ensure_finite("ancestral_step")?;
    Ok(out)
}

/// Runs the reverse process along the per-frame trajectories of `task`.
///
/// Non-frozen frames start from standard normal noise (drawn in frame
/// order). Frozen frames hold their conditioning content with τ pinned to 0
/// before every score evaluation and are re-clamped after every step.
pub fn sample<S: ScoreFunction + ?Sized>(
    score: &S,
    task: &TaskSpec,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<VideoTensor> {
    task.validate(schedule)?;
    if cfg.steps != task.steps() {
        return Err(Error::InvalidTask(format!(
            "sampler configured for {} steps but task trajectories have {}",
            cfg.steps,
            task.steps()
        )));
    }
    let (n, d) = (task.n_frames(), task.frame_dim());
    let frozen: Vec<usize> = if cfg.clamp_frozen {
        task.frozen().to_vec()
    } else {
        Vec::new()
    };
    let free: Vec<usize> = (0..n).filter(|i| !frozen.contains(i)).collect();
    let mut x = VideoTensor::zeros(n, d)?;
    x.set_geometry(task.geometry());
    let mut init = vec![0.0; free.len() * d];
    rng.fill_gaussian(&mut init);
    for (k, &i) in free.iter().enumerate() {
        x.frame_mut(i).copy_from_slice(&init[k * d..(k + 1) * d]);
    }
    let clamp = |x: &mut VideoTensor| {
        for &i in &frozen {
            x.frame_mut(i).copy_from_slice(task.conditioning_frame(i));
        }
    };
    clamp(&mut x);
    for step in 0..cfg.steps {
        let tau = Vtv::new(task.times_at(step))?.with_frozen(&frozen);
        let tau_next = Vtv::new(task.times_at(step + 1))?.with_frozen(&frozen);
        let eps_hat = score.eps(&x, &tau)?;
        x.check_same_shape(&eps_hat)?;
        if eps_hat.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged { step });
        }
        x = match cfg.kind {
            SamplerKind::Deterministic => ddim_step(&x, &tau, &tau_next, &eps_hat, schedule),
            SamplerKind::Ancestral => ancestral_step(&x, &tau, &tau_next, &eps_hat, schedule, rng),
        }
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::SamplerDiverged { step },
            other => other,
        })?;
        clamp(&mut x);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn clip(seed: u64, n: usize, d: usize) -> VideoTensor {
        VideoTensor::new(RngStream::new(seed, 0).gaussian(&[n, d]).unwrap()).unwrap()
    }

    #[test]
    fn perturb_at_zero_is_identity() {
        let x0 = clip(1, 3, 4);
        let tau = Vtv::broadcast(0.0, 3).unwrap();
        let (xt, eps) = perturb(&x0, &tau, &schedule(), &mut RngStream::new(2, 0)).unwrap();
        assert_eq!(xt, x0);
        assert_eq!(eps.n_frames(), 3);
    }

    #[test]
    fn perturb_length_mismatch() {
        let x0 = clip(1, 3, 4);
        let tau = Vtv::broadcast(0.5, 2).unwrap();
        assert!(perturb(&x0, &tau, &schedule(), &mut RngStream::new(2, 0)).is_err());
    }

    #[test]
    fn perturb_mixed_times() {
        let x0 = VideoTensor::from_frames(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        let tau = Vtv::new(vec![0.0, 0.5]).unwrap();
        let (xt, eps) = perturb(&x0, &tau, &schedule(), &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(xt.frame(0), x0.frame(0));
        let (m, s) = schedule().marginal_coeffs(0.5).unwrap();
        for j in 0..2 {
            let want = m * x0.frame(1)[j] + s * eps.frame(1)[j];
            assert_eq!(xt.frame(1)[j], want);
        }
        assert!((m - 0.281_18).abs() < 1e-5);
    }

    #[test]
    fn perturb_at_horizon_preserves_variance() {
        let x0 = VideoTensor::zeros(2, 1).unwrap();
        let tau = Vtv::broadcast(1.0, 2).unwrap();
        let s = schedule();
        let mut rng = RngStream::new(4, 0);
        let mut vals = [Vec::new(), Vec::new()];
        for _ in 0..10_000 {
            let (xt, _) = perturb(&x0, &tau, &s, &mut rng).unwrap();
            vals[0].push(xt.frame(0)[0]);
            vals[1].push(xt.frame(1)[0]);
        }
        let want = s.marginal_coeffs(1.0).unwrap().1;
        for v in &vals {
            let n = v.len() as f64;
            let var = v.iter().map(|x| x * x).sum::<f64>() / n;
            assert!((var.sqrt() / want - 1.0).abs() < 0.01, "{}", var.sqrt());
            assert!((var - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn sde_zero_horizon_returns_input() {
        let x0 = clip(5, 2, 3);
        let tau = Vtv::broadcast(0.0, 2).unwrap();
        let out = simulate_forward_sde(&x0, &tau, &schedule(), 1e-3, &mut RngStream::new(0, 0))
            .unwrap();
        assert_eq!(out, x0);
        assert!(
            simulate_forward_sde(&x0, &tau, &schedule(), 1e-2, &mut RngStream::new(0, 0)).is_err()
        );
    }

    #[test]
    fn sde_two_clocks_match_their_own_marginals() {
        let s = schedule();
        let x0 = VideoTensor::from_frames(&[vec![10.0; 4], vec![10.0; 4]]).unwrap();
        let tau = Vtv::new(vec![0.25, 0.75]).unwrap();
        let mut stats = [(0.0, 0.0), (0.0, 0.0)];
        let paths = 4000;
        for p in 0..paths {
            let mut rng = RngStream::new(6, p);
            let x = simulate_forward_sde(&x0, &tau, &s, 1e-3, &mut rng).unwrap();
            for (f, st) in stats.iter_mut().enumerate() {
                for &v in x.frame(f) {
                    st.0 += v;
                    st.1 += v * v;
                }
            }
        }
        let n = (paths * 4) as f64;
        for (f, &(sum, sq)) in stats.iter().enumerate() {
            let mean = sum / n;
            let var = sq / n - mean * mean;
            let (m, sd) = s.marginal_coeffs(tau.times()[f]).unwrap();
            assert!((mean / (10.0 * m) - 1.0).abs() < 0.01, "frame {f}: {mean}");
            assert!((var.sqrt() / sd - 1.0).abs() < 0.02, "frame {f}: {var}");
        }
    }

    #[test]
    fn ddim_identity_when_time_does_not_move() {
        let x = clip(7, 3, 2);
        let e = clip(8, 3, 2);
        let tau = Vtv::new(vec![0.3, 0.6, 0.9]).unwrap();
        assert_eq!(ddim_step(&x, &tau, &tau, &e, &schedule()).unwrap(), x);
        let mut rng = RngStream::new(0, 0);
        assert_eq!(
            ancestral_step(&x, &tau, &tau, &e, &schedule(), &mut rng).unwrap(),
            x
        );
    }

    #[test]
    fn ddim_recovers_clean_clip_from_true_noise() {
        let s = schedule();
        let x0 = clip(9, 4, 3);
        let tau = Vtv::new(vec![0.1, 0.4, 0.7, 1.0]).unwrap();
        let (xt, eps) = perturb(&x0, &tau, &s, &mut RngStream::new(10, 0)).unwrap();
        let zero = Vtv::broadcast(0.0, 4).unwrap();
        let rec = ddim_step(&xt, &tau, &zero, &eps, &s).unwrap();
        for (a, b) in rec.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        let rec = ancestral_step(&xt, &tau, &zero, &eps, &s, &mut RngStream::new(0, 0)).unwrap();
        for (a, b) in rec.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn frozen_frame_ignores_garbage_prediction() {
        let s = schedule();
        let x = clip(11, 2, 3);
        let garbage = VideoTensor::from_frames(&[vec![1e6; 3], vec![0.1; 3]]).unwrap();
        let tau = Vtv::new(vec![0.0, 0.5]).unwrap();
        let next = Vtv::new(vec![0.0, 0.25]).unwrap();
        let out = ddim_step(&x, &tau, &next, &garbage, &s).unwrap();
        assert_eq!(out.frame(0), x.frame(0));
        let out = ancestral_step(&x, &tau, &next, &garbage, &s, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(out.frame(0), x.frame(0));
    }

    #[test]
    fn step_rejects_time_going_up() {
        let x = clip(12, 1, 2);
        let tau = Vtv::new(vec![0.2]).unwrap();
        let next = Vtv::new(vec![0.4]).unwrap();
        assert!(ddim_step(&x, &tau, &next, &x, &schedule()).is_err());
    }

    #[test]
    fn sample_is_reproducible_and_aborts_on_nan() {
        let s = schedule();
        let task = tasks::standard(3, 2, 10, &s).unwrap();
        let cfg = SamplerConfig::new(SamplerKind::Ancestral, 10).unwrap();
        let score = |x: &VideoTensor, _: &Vtv| -> Result<VideoTensor> {
            VideoTensor::new(x.tensor().scale(0.5)?)
        };
        let a = sample(&score, &task, &cfg, &s, &mut RngStream::new(1, 0)).unwrap();
        let b = sample(&score, &task, &cfg, &s, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(a, b);

        let bad = |x: &VideoTensor, tau: &Vtv| -> Result<VideoTensor> {
            if tau.times()[0] < 0.5 {
                let mut t = x.clone();
                t.frame_mut(0)[0] = f64::NAN;
                Ok(t)
            } else {
                Ok(x.clone())
            }
        };
        let err = sample(&bad, &task, &cfg, &s, &mut RngStream::new(1, 0)).unwrap_err();
        assert!(matches!(err, Error::SamplerDiverged { step: 6 }), "{err:?}");
    }

    #[test]
    fn sample_step_count_must_match_task() {
        let s = schedule();
        let task = tasks::standard(2, 2, 10, &s).unwrap();
        let cfg = SamplerConfig::new(SamplerKind::Deterministic, 5).unwrap();
        let score = |x: &VideoTensor, _: &Vtv| -> Result<VideoTensor> { Ok(x.clone()) };
        assert!(sample(&score, &task, &cfg, &s, &mut RngStream::new(1, 0)).is_err());
    }
}
