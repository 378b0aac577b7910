//! Synthetic clips: small rendered videos for training and a Gaussian AR(1)
//! process whose law is known exactly. Also the byte encodings for clips.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{Geometry, VideoTensor};
use crate::models::GaussianVideoModel;
use crate::training::Dataset;
use crate::{math, Error, Result, RngStream, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// A disc bouncing off the walls. `radius` and `speed` in pixels.
    BouncingBall { radius: f64, speed: f64 },
    /// A vertical bar of `width` columns moving `velocity` columns per frame,
    /// wrapping around.
    MovingBar { width: usize, velocity: i64 },
    /// `x⁽ⁱ⁺¹⁾ = ρx⁽ⁱ⁾ + √(v(1-ρ²))·z` with stationary marginal `N(0, vI)`.
    GaussianAr1 { rho: f64, variance: f64, frame_dim: usize },
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::BouncingBall { .. } => "bouncing_ball",
            Self::MovingBar { .. } => "moving_bar",
            Self::GaussianAr1 { .. } => "gaussian_ar1",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_frames: usize,
    /// Frame layout for the image kinds; ignored by `gaussian_ar1`.
    pub geometry: Geometry,
    pub count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn bouncing_ball(n_frames: usize, size: usize, count: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::BouncingBall {
                radius: size as f64 / 6.0,
                speed: size as f64 / 10.0,
            },
            n_frames,
            geometry: Geometry::gray(size, size),
            count,
            seed,
        }
    }

    pub fn gaussian_ar1(n_frames: usize, frame_dim: usize, rho: f64, count: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::GaussianAr1 {
                rho,
                variance: 1.0,
                frame_dim,
            },
            n_frames,
            geometry: Geometry::gray(1, frame_dim),
            count,
            seed,
        }
    }

    pub fn frame_dim(&self) -> usize {
        match self.kind {
            DatasetKind::GaussianAr1 { frame_dim, .. } => frame_dim,
            _ => self.geometry.frame_dim(),
        }
    }

    /// Image layout of generated clips, `None` for the Gaussian kind.
    pub fn image_geometry(&self) -> Option<Geometry> {
        match self.kind {
            DatasetKind::GaussianAr1 { .. } => None,
            _ => Some(self.geometry),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_frames < 1 || self.count < 1 {
            return bad("dataset needs at least one frame and one clip".into());
        }
        match self.kind {
            DatasetKind::BouncingBall { radius, speed } => {
                let (h, w) = (self.geometry.height as f64, self.geometry.width as f64);
                if self.geometry.channels != 1 {
                    return bad("bouncing_ball renders single-channel frames".into());
                }
                if !(radius > 0.0 && 2.0 * radius < h.min(w)) || !(speed >= 0.0 && speed.is_finite()) {
                    return bad(format!("ball radius {radius} / speed {speed} do not fit {h}x{w}"));
                }
            }
            DatasetKind::MovingBar { width, .. } => {
                if self.geometry.channels != 1 || width == 0 || width >= self.geometry.width {
                    return bad(format!("bar width {width} must be in 1..{}", self.geometry.width));
                }
            }
            DatasetKind::GaussianAr1 {
                rho,
                variance,
                frame_dim,
            } => {
                if !(rho.abs() < 1.0) {
                    return bad(format!("AR(1) coefficient {rho} must satisfy |rho| < 1"));
                }
                if !(variance > 0.0 && variance.is_finite()) || frame_dim == 0 {
                    return bad("AR(1) variance and frame_dim must be positive".into());
                }
            }
        }
        Ok(())
    }

    fn stream(&self, index: usize) -> RngStream {
        RngStream::new(self.seed, RngStream::derive_id(&[0xDA7A, index as u64]))
    }
}

/// Clip `index` of the dataset; a pure function of `(seed, index)`.
pub fn generate(spec: &DatasetSpec, index: usize) -> Result<VideoTensor> {
    spec.validate()?;
    if index >= spec.count {
        return Err(Error::IndexOutOfRange {
            index,
            len: spec.count,
        });
    }
    let mut rng = spec.stream(index);
    let n = spec.n_frames;
    match spec.kind {
        DatasetKind::BouncingBall { radius, speed } => {
            let g = spec.geometry;
            let (h, w) = (g.height as f64, g.width as f64);
            let mut cx = rng.uniform_range(radius, w - radius);
            let mut cy = rng.uniform_range(radius, h - radius);
            let angle = rng.uniform_range(0.0, 2.0 * core::f64::consts::PI);
            let mut vx = speed * math::cos(angle);
            let mut vy = speed * math::sin(angle);
            let mut data = Vec::with_capacity(n * g.frame_dim());
            for _ in 0..n {
                render_disc(&mut data, g, cx, cy, radius);
                (cx, vx) = reflect(cx + vx, vx, radius, w - radius);
                (cy, vy) = reflect(cy + vy, vy, radius, h - radius);
            }
            VideoTensor::from_flat(n, g.frame_dim(), data)?.with_geometry(g)
        }
        DatasetKind::MovingBar { width, velocity } => {
            let g = spec.geometry;
            let cols = g.width as i64;
            let start = rng.below(g.width as u64) as i64;
            let mut data = Vec::with_capacity(n * g.frame_dim());
            for i in 0..n as i64 {
                let left = (start + velocity * i).rem_euclid(cols);
                for _ in 0..g.height {
                    for c in 0..cols {
                        let inside = (c - left).rem_euclid(cols) < width as i64;
                        data.push(if inside { 1.0 } else { -1.0 });
                    }
                }
            }
            VideoTensor::from_flat(n, g.frame_dim(), data)?.with_geometry(g)
        }
        DatasetKind::GaussianAr1 {
            rho,
            variance,
            frame_dim,
        } => {
            let sd = math::sqrt(variance);
            let innov = math::sqrt(variance * (1.0 - rho * rho));
            let mut z = vec![0.0; n * frame_dim];
            rng.fill_gaussian(&mut z);
            let mut data = vec![0.0; n * frame_dim];
            for j in 0..frame_dim {
                data[j] = sd * z[j];
            }
            for i in 1..n {
                for j in 0..frame_dim {
                    data[i * frame_dim + j] =
                        rho * data[(i - 1) * frame_dim + j] + innov * z[i * frame_dim + j];
                }
            }
            VideoTensor::from_flat(n, frame_dim, data)
        }
    }
}

/// Mirrors a coordinate back inside `[lo, hi]`, flipping the velocity.
fn reflect(mut p: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    for _ in 0..8 {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            break;
        }
    }
    (p.clamp(lo, hi), v)
}

/// Subpixel samples per axis used for antialiased coverage.
const SUPERSAMPLE: usize = 4;

fn render_disc(out: &mut Vec<f64>, g: Geometry, cx: f64, cy: f64, r: f64) {
    let r2 = r * r;
    let step = 1.0 / SUPERSAMPLE as f64;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..g.height {
        for x in 0..g.width {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                let py = y as f64 + (sy as f64 + 0.5) * step - cy;
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step - cx;
                    if px * px + py * py <= r2 {
                        hits += 1;
                    }
                }
            }
            out.push(2.0 * hits as f64 / total - 1.0);
        }
    }
}

/// The exact law [`generate`] samples for `gaussian_ar1`:
/// zero mean, `C[(i,a),(j,b)] = v·ρ^|i-j|·[a = b]`.
pub fn ar1_law(spec: &DatasetSpec) -> Result<GaussianVideoModel> {
    let DatasetKind::GaussianAr1 {
        rho,
        variance,
        frame_dim: d,
    } = spec.kind
    else {
        return Err(Error::InvalidArgument(format!(
            "ar1_law needs a gaussian_ar1 dataset, got {}",
            spec.kind.name()
        )));
    };
    spec.validate()?;
    let n = spec.n_frames;
    let m = n * d;
    let mut c = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            let v = variance * math::powi(rho, i.abs_diff(j) as u64);
            for a in 0..d {
                c[(i * d + a) * m + j * d + a] = v;
            }
        }
    }
    GaussianVideoModel::new(n, d, vec![0.0; m], Tensor::new(vec![m, m], c)?)
}

impl Dataset for DatasetSpec {
    fn len(&self) -> usize {
        self.count
    }
    fn clip(&self, index: usize) -> Result<VideoTensor> {
        generate(self, index)
    }
}

/// Maps `[-1, 1]` to `0..=255`, clamping outside values.
pub fn to_gray_byte(v: f64) -> u8 {
    let b = (v.clamp(-1.0, 1.0) + 1.0) * 127.5;
    // round half up; b is within [0, 255]
    let r = (b + 0.5) as u32;
    r.min(255) as u8
}

pub fn from_gray_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Binary P5 image with frames tiled left to right.
pub fn encode_pgm_strip(x: &VideoTensor) -> Result<Vec<u8>> {
    let g = x
        .geometry()
        .ok_or_else(|| Error::InvalidArgument("clip has no image geometry".into()))?;
    if g.channels != 1 {
        return Err(Error::InvalidArgument("PGM export needs single-channel frames".into()));
    }
    let n = x.n_frames();
    let width = g.width * n;
    let mut out = format!("P5\n{width} {}\n255\n", g.height).into_bytes();
    for row in 0..g.height {
        for f in 0..n {
            let frame = x.frame(f);
            out.extend(frame[row * g.width..(row + 1) * g.width].iter().map(|&v| to_gray_byte(v)));
        }
    }
    Ok(out)
}

/// A decoded P5 image: `(width, height, pixels)` in row-major order.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::InvalidArgument(format!("PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(core::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary P5 file"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w.checked_mul(h).ok_or_else(|| bad("size overflow"))?;
    if bytes.len() < pos + n {
        return Err(bad("truncated raster"));
    }
    Ok((w, h, bytes[pos..pos + n].to_vec()))
}

/// Splits a P5 strip of `frame_width`-wide frames back into a clip.
pub fn pgm_to_clip(bytes: &[u8], frame_width: Option<usize>) -> Result<VideoTensor> {
    let (w, h, px) = decode_pgm(bytes)?;
    let fw = frame_width.unwrap_or(w);
    if fw == 0 || w % fw != 0 {
        return Err(Error::Shape(format!("strip width {w} is not a multiple of {fw}")));
    }
    let n = w / fw;
    let mut data = Vec::with_capacity(w * h);
    for f in 0..n {
        for row in 0..h {
            data.extend(px[row * w + f * fw..row * w + (f + 1) * fw].iter().map(|&b| from_gray_byte(b)));
        }
    }
    VideoTensor::from_flat(n, fw * h, data)?.with_geometry(Geometry::gray(h, fw))
}

/// Header `(N, d)` as u64 LE followed by the row-major f64 LE values.
pub fn encode_f64_raw(x: &VideoTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * x.as_slice().len());
    out.extend_from_slice(&(x.n_frames() as u64).to_le_bytes());
    out.extend_from_slice(&(x.frame_dim() as u64).to_le_bytes());
    for v in x.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64_raw(bytes: &[u8]) -> Result<VideoTensor> {
    let bad = |m: String| Error::InvalidArgument(format!("f64_raw: {m}"));
    if bytes.len() < 16 {
        return Err(bad("missing header".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let d = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| bad("size overflow".into()))?;
    if expected != bytes.len() as u64 {
        return Err(bad(format!("expected {expected} bytes for {n}x{d}, found {}", bytes.len())));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    VideoTensor::from_flat(n as usize, d as usize, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_ball_repeats() {
        let mut spec = DatasetSpec::bouncing_ball(5, 16, 3, 1);
        spec.kind = DatasetKind::BouncingBall {
            radius: 3.0,
            speed: 0.0,
        };
        let x = generate(&spec, 2).unwrap();
        for i in 1..5 {
            assert_eq!(x.frame(i), x.frame(0));
        }
    }

    #[test]
    fn ball_stays_in_range_and_moves() {
        let spec = DatasetSpec::bouncing_ball(32, 16, 4, 2);
        for k in 0..4 {
            let x = generate(&spec, k).unwrap();
            assert!(x.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(x.frame(0) != x.frame(1));
            // disc area stays constant up to antialiasing
            let area = |f: &[f64]| f.iter().map(|v| (v + 1.0) / 2.0).sum::<f64>();
            let a0 = area(x.frame(0));
            for i in 0..32 {
                assert!((area(x.frame(i)) - a0).abs() < 1.5);
            }
        }
        assert_eq!(generate(&spec, 1).unwrap(), generate(&spec, 1).unwrap());
        assert!(generate(&spec, 4).is_err());
    }

    #[test]
    fn bar_wraps_periodically() {
        let spec = DatasetSpec {
            kind: DatasetKind::MovingBar {
                width: 3,
                velocity: 2,
            },
            n_frames: 10,
            geometry: Geometry::gray(4, 8),
            count: 2,
            seed: 3,
        };
        let x = generate(&spec, 0).unwrap();
        // 8 columns, 2 per frame: period 4
        for i in 0..6 {
            assert_eq!(x.frame(i), x.frame(i + 4));
        }
        assert!(x.frame(0) != x.frame(1));
        let full = DatasetSpec {
            kind: DatasetKind::MovingBar {
                width: 3,
                velocity: 8,
            },
            ..spec
        };
        let y = generate(&full, 1).unwrap();
        assert_eq!(y.frame(0), y.frame(1));
    }

    #[test]
    fn ar1_empirical_covariance() {
        let spec = DatasetSpec::gaussian_ar1(4, 1, 0.9, 10_000, 4);
        let mut acc = 0.0;
        for k in 0..spec.count {
            let x = generate(&spec, k).unwrap();
            acc += x.frame(0)[0] * x.frame(2)[0];
        }
        let c = acc / spec.count as f64;
        assert!((c - 0.81).abs() < 0.05 * 0.81, "{c}");
    }

    #[test]
    fn ar1_law_cases() {
        let mut spec = DatasetSpec::gaussian_ar1(2, 1, 0.5, 10, 0);
        spec.kind = DatasetKind::GaussianAr1 {
            rho: 0.5,
            variance: 2.0,
            frame_dim: 1,
        };
        let law = ar1_law(&spec).unwrap();
        assert_eq!(law.cov().data(), &[2.0, 1.0, 1.0, 2.0]);

        let iid = ar1_law(&DatasetSpec::gaussian_ar1(3, 2, 0.0, 10, 0)).unwrap();
        assert_eq!(iid.cov(), &Tensor::eye(6).unwrap());

        assert!(ar1_law(&DatasetSpec::gaussian_ar1(3, 2, 1.0, 10, 0)).is_err());
        assert!(ar1_law(&DatasetSpec::bouncing_ball(3, 16, 10, 0)).is_err());
    }

    #[test]
    fn pgm_strip_layout() {
        let x = VideoTensor::from_flat(8, 256, vec![-1.0; 8 * 256])
            .unwrap()
            .with_geometry(Geometry::gray(16, 16))
            .unwrap();
        let bytes = encode_pgm_strip(&x).unwrap();
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (128, 16));
        assert!(px.iter().all(|&b| b == 0));
        assert!(encode_pgm_strip(&VideoTensor::zeros(2, 3).unwrap()).is_err());
    }

    #[test]
    fn pgm_round_trip_on_byte_grid() {
        let spec = DatasetSpec::bouncing_ball(3, 8, 1, 5);
        let x = generate(&spec, 0).unwrap();
        let y = pgm_to_clip(&encode_pgm_strip(&x).unwrap(), Some(8)).unwrap();
        assert_eq!(y.n_frames(), 3);
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        let z = pgm_to_clip(&encode_pgm_strip(&y).unwrap(), Some(8)).unwrap();
        assert_eq!(y, z);
        assert_eq!(to_gray_byte(1.0), 255);
        assert_eq!(to_gray_byte(-1.0), 0);
    }

    #[test]
    fn f64_raw_round_trip() {
        let x = VideoTensor::new(RngStream::new(1, 0).gaussian(&[3, 5]).unwrap()).unwrap();
        let bytes = encode_f64_raw(&x);
        assert_eq!(bytes.len(), 16 + 15 * 8);
        assert_eq!(decode_f64_raw(&bytes).unwrap(), x);
        assert!(decode_f64_raw(&bytes[..bytes.len() - 1]).is_err());
    }
}
