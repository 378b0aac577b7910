//! Sample-quality checks: moments against a known Gaussian law, a small
//! Fréchet distance between clip sets, and conditioning fidelity.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::VideoTensor;
use crate::linalg;
use crate::math;
use crate::models::GaussianVideoModel;
use crate::tasks::TaskSpec;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentReport {
    /// Largest absolute deviation of any coordinate of the empirical mean.
    pub mean_abs_error: f64,
    /// `‖Ĉ - C‖_F / ‖C‖_F`.
    pub cov_rel_error: f64,
    pub samples: usize,
}

impl MomentReport {
    pub fn within(&self, mean_tol: f64, cov_tol: f64) -> bool {
        self.mean_abs_error < mean_tol && self.cov_rel_error < cov_tol
    }
}

/// Empirical mean and unbiased covariance of row vectors.
pub fn mean_and_cov(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Tensor)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("samples have different sizes".into()));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    let mut c = vec![0.0; d];
    for r in rows {
        for ((ci, v), m) in c.iter_mut().zip(r).zip(&mean) {
            *ci = v - m;
        }
        for i in 0..d {
            let ci = c[i];
            let row = &mut cov[i * d..(i + 1) * d];
            for (o, cj) in row.iter_mut().zip(&c) {
                *o += ci * cj;
            }
        }
    }
    for v in &mut cov {
        *v /= (n - 1) as f64;
    }
    Ok((mean, Tensor::new(vec![d, d], cov)?))
}

/// Compares flattened samples with `law`.
pub fn moment_check(samples: &[VideoTensor], law: &GaussianVideoModel) -> Result<MomentReport> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.as_slice().to_vec()).collect();
    moment_check_rows(&rows, law)
}

/// [`moment_check`] restricted to `frames` of every sample, e.g. the free
/// frames of a conditional task compared against the conditional law.
pub fn moment_check_frames(
    samples: &[VideoTensor],
    frames: &[usize],
    law: &GaussianVideoModel,
) -> Result<MomentReport> {
    let rows = samples
        .iter()
        .map(|s| {
            let mut r = Vec::with_capacity(frames.len() * s.frame_dim());
            for &f in frames {
                if f >= s.n_frames() {
                    return Err(Error::IndexOutOfRange {
                        index: f,
                        len: s.n_frames(),
                    });
                }
                r.extend_from_slice(s.frame(f));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    moment_check_rows(&rows, law)
}

fn moment_check_rows(rows: &[Vec<f64>], law: &GaussianVideoModel) -> Result<MomentReport> {
    if let Some(r) = rows.first() {
        if r.len() != law.dim() {
            return Err(Error::Shape(format!(
                "samples have {} coordinates, law has {}",
                r.len(),
                law.dim()
            )));
        }
    }
    let (mean, cov) = mean_and_cov(rows)?;
    let mean_abs_error = mean
        .iter()
        .zip(law.mean())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let cov_rel_error = cov.sub(law.cov())?.frobenius() / law.cov().frobenius();
    Ok(MomentReport {
        mean_abs_error,
        cov_rel_error,
        samples: rows.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetReport {
    /// Squared distance, clamped at 0.
    pub distance: f64,
    /// Value before clamping, for diagnostics.
    pub raw_distance: f64,
    pub feature_dim: usize,
    pub samples_a: usize,
    pub samples_b: usize,
}

/// Clips with at most this many values are compared on raw pixels.
pub const MAX_RAW_FEATURES: usize = 256;

/// Feature vector of one clip: the flattened clip when `N·d ≤ 256`,
/// otherwise per-frame mean and std followed by the norms of the
/// differences between consecutive frames.
pub fn clip_features(x: &VideoTensor) -> Vec<f64> {
    let (n, d) = (x.n_frames(), x.frame_dim());
    if n * d <= MAX_RAW_FEATURES {
        return x.as_slice().to_vec();
    }
    let mut f = Vec::with_capacity(3 * n - 1);
    for frame in x.frames() {
        let m = frame.iter().sum::<f64>() / d as f64;
        let var = frame.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        f.push(m);
        f.push(math::sqrt(var));
    }
    for i in 1..n {
        let diff: f64 = x
            .frame(i)
            .iter()
            .zip(x.frame(i - 1))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        f.push(math::sqrt(diff));
    }
    f
}

/// Fréchet distance between Gaussian fits of the two sets' clip features:
/// `|μ₁-μ₂|² + tr(C₁ + C₂ - 2(C₁^½ C₂ C₁^½)^½)`.
pub fn frechet_toy(set_a: &[VideoTensor], set_b: &[VideoTensor]) -> Result<FrechetReport> {
    let (Some(a0), Some(b0)) = (set_a.first(), set_b.first()) else {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: set_a.len().min(set_b.len()),
        });
    };
    let shape = (a0.n_frames(), a0.frame_dim());
    if set_a
        .iter()
        .chain(set_b)
        .any(|x| (x.n_frames(), x.frame_dim()) != shape)
        || (b0.n_frames(), b0.frame_dim()) != shape
    {
        return Err(Error::Shape("clip sets have different shapes".into()));
    }
    let fa: Vec<Vec<f64>> = set_a.iter().map(clip_features).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(clip_features).collect();
    let dim = fa[0].len();
    let needed = dim + 1;
    let got = set_a.len().min(set_b.len());
    if got < needed {
        return Err(Error::InsufficientSamples { needed, got });
    }
    let (ma, ca) = mean_and_cov(&fa)?;
    let (mb, cb) = mean_and_cov(&fb)?;
    let mean_term: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr = |c: &Tensor| (0..dim).map(|i| c.get2(i, i)).sum::<f64>();
    let sa = linalg::sym_apply(&ca, |v| math::sqrt(v.max(0.0)))?;
    let m = sa.matmul(&cb)?.matmul(&sa)?;
    let m = symmetrize(&m)?;
    let (vals, _) = linalg::sym_eigen(&m)?;
    let tr_sqrt: f64 = vals.data().iter().map(|&v| math::sqrt(v.max(0.0))).sum();
    let raw = mean_term + tr(&ca) + tr(&cb) - 2.0 * tr_sqrt;
    Ok(FrechetReport {
        distance: raw.max(0.0),
        raw_distance: raw,
        feature_dim: dim,
        samples_a: set_a.len(),
        samples_b: set_b.len(),
    })
}

fn symmetrize(m: &Tensor) -> Result<Tensor> {
    let t = m.transpose()?;
    m.add(&t)?.scale(0.5)
}

/// Mean squared difference between each frozen frame of `generated` and
/// its conditioning content, in frozen-frame order.
pub fn conditioning_mse(generated: &VideoTensor, task: &TaskSpec) -> Result<Vec<f64>> {
    if task.frozen().is_empty() {
        return Err(Error::InvalidTask("task has no frozen frames".into()));
    }
    if generated.n_frames() != task.n_frames() || generated.frame_dim() != task.frame_dim() {
        return Err(Error::Shape("generated clip does not match the task".into()));
    }
    Ok(task
        .frozen()
        .iter()
        .map(|&f| {
            let c = task.conditioning_frame(f);
            let g = generated.frame(f);
            g.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c.len() as f64
        })
        .collect())
}

/// Mean squared error over the non-frozen frames against a reference clip.
pub fn free_frame_mse(generated: &VideoTensor, reference: &VideoTensor, task: &TaskSpec) -> Result<f64> {
    if generated.as_slice().len() != reference.as_slice().len()
        || generated.n_frames() != task.n_frames()
    {
        return Err(Error::Shape("clips do not match the task".into()));
    }
    let free: Vec<usize> = (0..task.n_frames()).filter(|&i| !task.is_frozen(i)).collect();
    if free.is_empty() {
        return Err(Error::InvalidTask("task has no free frames".into()));
    }
    let mut acc = 0.0;
    for &f in &free {
        acc += generated
            .frame(f)
            .iter()
            .zip(reference.frame(f))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(acc / (free.len() * task.frame_dim()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample, SamplerConfig, SamplerKind};
    use crate::models::GaussianScore;
    use crate::schedule::NoiseSchedule;
    use crate::{tasks, RngStream};

    fn points(rows: &[&[f64]]) -> Vec<VideoTensor> {
        rows.iter()
            .map(|r| VideoTensor::from_flat(1, r.len(), r.to_vec()).unwrap())
            .collect()
    }

    #[test]
    fn frechet_unit_shift_in_1d() {
        let a = points(&[&[-1.0], &[1.0], &[-1.0], &[1.0]]);
        let b = points(&[&[0.0], &[2.0], &[0.0], &[2.0]]);
        let r = frechet_toy(&a, &b).unwrap();
        assert!((r.distance - 1.0).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn frechet_scaled_isotropic_2d() {
        let c = math::sqrt(1.5);
        let a = points(&[&[c, 0.0], &[-c, 0.0], &[0.0, c], &[0.0, -c]]);
        let b: Vec<VideoTensor> = a
            .iter()
            .map(|x| VideoTensor::new(x.tensor().scale(2.0).unwrap()).unwrap())
            .collect();
        let r = frechet_toy(&a, &b).unwrap();
        assert!((r.distance - 2.0).abs() < 1e-10, "{r:?}");
        let back = frechet_toy(&b, &a).unwrap();
        assert!((r.distance - back.distance).abs() < 1e-9);
    }

    #[test]
    fn frechet_identical_and_symmetric() {
        let mut rng = RngStream::new(1, 0);
        let a: Vec<VideoTensor> = (0..60)
            .map(|_| VideoTensor::new(rng.gaussian(&[2, 3]).unwrap()).unwrap())
            .collect();
        let b: Vec<VideoTensor> = (0..60)
            .map(|_| VideoTensor::new(rng.gaussian(&[2, 3]).unwrap().scale(1.5).unwrap()).unwrap())
            .collect();
        assert!(frechet_toy(&a, &a).unwrap().distance < 1e-6);
        let ab = frechet_toy(&a, &b).unwrap().distance;
        let ba = frechet_toy(&b, &a).unwrap().distance;
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab > 0.1);
        assert!(matches!(
            frechet_toy(&a[..5], &b).unwrap_err(),
            Error::InsufficientSamples { needed: 7, got: 5 }
        ));
    }

    #[test]
    fn summary_features_for_large_clips() {
        let x = VideoTensor::zeros(4, 100).unwrap();
        assert_eq!(clip_features(&x).len(), 11);
        let y = VideoTensor::zeros(2, 100).unwrap();
        assert_eq!(clip_features(&y).len(), 200);
    }

    fn ar1(n: usize, d: usize, rho: f64) -> GaussianVideoModel {
        crate::data::ar1_law(&crate::data::DatasetSpec::gaussian_ar1(n, d, rho, 1, 0)).unwrap()
    }

    #[test]
    fn moments_of_exact_draws() {
        let law = ar1(3, 2, 0.7);
        let mut rng = RngStream::new(2, 0);
        let s: Vec<VideoTensor> = (0..10_000).map(|_| law.sample(&mut rng).unwrap()).collect();
        let r = moment_check(&s, &law).unwrap();
        assert!(r.within(0.05, 0.1), "{r:?}");
        let at_mean = vec![VideoTensor::zeros(3, 2).unwrap(); 4];
        let r = moment_check(&at_mean, &law).unwrap();
        assert!((r.cov_rel_error - 1.0).abs() < 1e-15);
        assert!(moment_check(&vec![VideoTensor::zeros(2, 2).unwrap(); 3], &law).is_err());
        assert!(moment_check(&s[..1], &law).is_err());
    }

    #[test]
    fn conditioning_mse_and_negative_control() {
        let s = NoiseSchedule::default();
        let law = ar1(3, 1, 0.9);
        let score = GaussianScore {
            model: &law,
            schedule: s,
        };
        let task = tasks::image2video(&[0.5], 3, 20, &s).unwrap();
        let cfg = SamplerConfig::new(SamplerKind::Deterministic, 20).unwrap();
        let out = sample(&score, &task, &cfg, &s, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(conditioning_mse(&out, &task).unwrap(), vec![0.0]);

        let unclamped = SamplerConfig {
            clamp_frozen: false,
            ..cfg
        };
        let out = sample(&score, &task, &unclamped, &s, &mut RngStream::new(3, 0)).unwrap();
        assert!(conditioning_mse(&out, &task).unwrap()[0] > 0.0);

        let std_task = tasks::standard(3, 1, 20, &s).unwrap();
        assert!(conditioning_mse(&out, &std_task).is_err());
    }
}
