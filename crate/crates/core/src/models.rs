//! Noise predictors behind one contract: the trainable frame-aware
//! transformer and the closed-form Gaussian score oracle.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::autodiff::{NodeId, Tape};
use crate::diffusion::VideoTensor;
use crate::linalg::{self, Cholesky};
use crate::math;
use crate::rng::RngStream;
use crate::schedule::{NoiseSchedule, Vtv};
use crate::{Error, Result, Tensor};

/// Predicts the injected noise ε̂ for every frame of a noisy clip.
///
/// The score of frame `i` is `-ε̂⁽ⁱ⁾ / std(τᵢ)`.
pub trait ScoreFunction {
    fn eps(&self, x: &VideoTensor, tau: &Vtv) -> Result<VideoTensor>;
}

impl<F> ScoreFunction for F
where
    F: Fn(&VideoTensor, &Vtv) -> Result<VideoTensor>,
{
    fn eps(&self, x: &VideoTensor, tau: &Vtv) -> Result<VideoTensor> {
        self(x, tau)
    }
}

/// Diffusion times are scaled by this before the sinusoidal encoding so
/// `[0, 1]` covers the usual `[0, 1000]` index range.
pub const TIME_EMBED_SCALE: f64 = 1000.0;

/// Sinusoidal encoding of every frame's time: an `N × D` matrix with
/// `(i, 2k) = sin(1000τᵢ·ω_k)`, `(i, 2k+1) = cos(1000τᵢ·ω_k)`,
/// `ω_k = 10000^(-2k/D)`.
pub fn embed_timesteps(tau: &Vtv, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} must be even")));
    }
    let n = tau.len();
    let mut out = vec![0.0; n * dim];
    for (i, &t) in tau.times().iter().enumerate() {
        let arg = t * TIME_EMBED_SCALE;
        for k in 0..dim / 2 {
            let omega = math::pow(10_000.0, -(2.0 * k as f64) / dim as f64);
            out[i * dim + 2 * k] = math::sin(arg * omega);
            out[i * dim + 2 * k + 1] = math::cos(arg * omega);
        }
    }
    Tensor::new(vec![n, dim], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub frame_dim: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub preset: String,
}

impl DenoiserConfig {
    pub fn new(
        frame_dim: usize,
        embed_dim: usize,
        n_layers: usize,
        n_heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let cfg = Self {
            frame_dim,
            embed_dim,
            n_layers,
            n_heads,
            mlp_ratio,
            preset: "custom".into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `toy-S` (D=32, L=2, H=2) or `toy-B` (D=64, L=4, H=4), MLP ratio 4.
    pub fn preset(name: &str, frame_dim: usize) -> Result<Self> {
        let (d, l, h) = match name {
            "toy-S" => (32, 2, 2),
            "toy-B" => (64, 4, 4),
            _ => return Err(Error::InvalidArgument(format!("unknown model preset {name:?}"))),
        };
        let mut cfg = Self::new(frame_dim, d, l, h, 4)?;
        cfg.preset = name.to_string();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.frame_dim >= 1
            && self.embed_dim >= 2
            && self.embed_dim.is_multiple_of(2)
            && self.n_heads >= 1
            && self.embed_dim.is_multiple_of(self.n_heads)
            && self.mlp_ratio >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid denoiser config {self:?}")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zero,
    FanIn(usize),
}

const MODULATIONS: [&str; 6] = ["shift1", "scale1", "gate1", "shift2", "scale2", "gate2"];

fn param_specs(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, e) = (cfg.frame_dim, cfg.embed_dim);
    let hd = cfg.head_dim();
    let hidden = e * cfg.mlp_ratio;
    let mut specs = vec![
        ("embed.w".into(), vec![d, e], Init::FanIn(d)),
        ("embed.b".into(), vec![1, e], Init::Zero),
        ("temb.w1".into(), vec![e, e], Init::FanIn(e)),
        ("temb.b1".into(), vec![1, e], Init::Zero),
        ("temb.w2".into(), vec![e, e], Init::FanIn(e)),
        ("temb.b2".into(), vec![1, e], Init::Zero),
    ];
    for l in 0..cfg.n_layers {
        for m in MODULATIONS {
            specs.push((format!("blocks.{l}.ada.{m}.w"), vec![e, e], Init::Zero));
            specs.push((format!("blocks.{l}.ada.{m}.b"), vec![1, e], Init::Zero));
        }
        for h in 0..cfg.n_heads {
            for proj in ["q", "k", "v"] {
                specs.push((format!("blocks.{l}.attn.{proj}.{h}"), vec![e, hd], Init::FanIn(e)));
            }
            specs.push((format!("blocks.{l}.attn.o.{h}"), vec![hd, e], Init::FanIn(e)));
        }
        specs.push((format!("blocks.{l}.attn.o.b"), vec![1, e], Init::Zero));
        specs.push((format!("blocks.{l}.mlp.w1"), vec![e, hidden], Init::FanIn(e)));
        specs.push((format!("blocks.{l}.mlp.b1"), vec![1, hidden], Init::Zero));
        specs.push((format!("blocks.{l}.mlp.w2"), vec![hidden, e], Init::FanIn(hidden)));
        specs.push((format!("blocks.{l}.mlp.b2"), vec![1, e], Init::Zero));
    }
    for m in ["shift", "scale"] {
        specs.push((format!("final.{m}.w"), vec![e, e], Init::Zero));
        specs.push((format!("final.{m}.b"), vec![1, e], Init::Zero));
    }
    specs.push(("final.out.w".into(), vec![e, d], Init::FanIn(e)));
    specs.push(("final.out.b".into(), vec![1, d], Init::Zero));
    specs.push(("final.skip.w".into(), vec![e, 1], Init::Zero));
    specs.push(("final.skip.b".into(), vec![1, 1], Init::Zero));
    specs
}

struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> NodeId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }
}

/// Intermediate nodes exposed for inspection.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: NodeId,
    /// Per block: the gated attention and gated MLP residual updates.
    pub residuals: Vec<(NodeId, NodeId)>,
}

/// Frame-aware transformer predicting ε.
///
/// Frames are tokens. Each frame's time goes through a sinusoidal
/// embedding and a two-layer MLP to give a per-frame condition vector,
/// which drives shift/scale/gate modulations (adaLN-Zero) of temporal
/// self-attention and MLP blocks. Block modulations start at zero, so
/// every block is the identity at initialisation.
///
/// The output adds `a(cᵢ)·xᵢ` to the final projection, with the scalar
/// gain `a` read off the condition vector and zero at init. Without it ε̂
/// would have rank at most D per frame and could not cancel noise in the
/// remaining `d − D` directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: Vec<(String, Tensor)>,
}

impl Denoiser {
    pub fn init(cfg: DenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let params = param_specs(&cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zero => vec![0.0; n],
                    Init::FanIn(fan) => {
                        let bound = 1.0 / math::sqrt(fan as f64);
                        (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
                    }
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, params })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_params(cfg: DenoiserConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pname, t)) in specs.iter().zip(&params) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_param_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Shape("parameter count mismatch".into()));
        }
        for ((_, slot), t) in self.params.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape("parameter shape mismatch".into()));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Mutable access by name, for tests and tooling.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Registers every parameter on a fresh tape, in model order.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.params.iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    fn modulate(tape: &mut Tape, x: NodeId, shift: NodeId, scale: NodeId) -> Result<NodeId> {
        let n = tape.layer_norm(x)?;
        let scaled = tape.mul(n, scale)?;
        let s = tape.add(n, scaled)?;
        tape.add(s, shift)
    }

    /// Records the forward pass on `tape`. `params` must come from [`bind`](Self::bind).
    pub fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId, tau: &Vtv) -> Result<NodeId> {
        Ok(self.forward_traced(tape, params, x, tau)?.output)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        x: NodeId,
        tau: &Vtv,
    ) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        if params.len() != self.params.len() {
            return Err(Error::Shape("parameter ids do not match the model".into()));
        }
        let (n, d) = tape.value(x)?.dims2()?;
        if d != cfg.frame_dim || tau.len() != n {
            return Err(Error::Shape(format!(
                "input {n}x{d} with {} timesteps for frame_dim {}",
                tau.len(),
                cfg.frame_dim
            )));
        }
        let mut p = Cursor { ids: params, pos: 0 };

        let (w, b) = (p.next(), p.next());
        let mut h = tape.linear(x, w, b)?;

        let emb = tape.input(embed_timesteps(tau, cfg.embed_dim)?);
        let (w1, b1, w2, b2) = (p.next(), p.next(), p.next(), p.next());
        let c = tape.linear(emb, w1, b1)?;
        let c = tape.silu(c)?;
        let c = tape.linear(c, w2, b2)?;
        let c_act = tape.silu(c)?;

        let scale_attn = 1.0 / math::sqrt(cfg.head_dim() as f64);
        let mut residuals = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut m = [c_act; 6];
            for slot in &mut m {
                let (w, b) = (p.next(), p.next());
                *slot = tape.linear(c_act, w, b)?;
            }
            let [shift1, scale1, gate1, shift2, scale2, gate2] = m;

            let a = Self::modulate(tape, h, shift1, scale1)?;
            let mut attn: Option<NodeId> = None;
            for _ in 0..cfg.n_heads {
                let (wq, wk, wv, wo) = (p.next(), p.next(), p.next(), p.next());
                let q = tape.matmul(a, wq)?;
                let k = tape.matmul(a, wk)?;
                let v = tape.matmul(a, wv)?;
                let kt = tape.transpose(k)?;
                let s = tape.matmul(q, kt)?;
                let s = tape.scale(s, scale_attn)?;
                let s = tape.softmax(s)?;
                let o = tape.matmul(s, v)?;
                let o = tape.matmul(o, wo)?;
                attn = Some(match attn {
                    Some(acc) => tape.add(acc, o)?,
                    None => o,
                });
            }
            let ob = p.next();
            let ob = tape.broadcast_rows(ob, n)?;
            let attn = tape.add(attn.expect("n_heads >= 1"), ob)?;
            let attn_res = tape.mul(gate1, attn)?;
            h = tape.add(h, attn_res)?;

            let mm = Self::modulate(tape, h, shift2, scale2)?;
            let (w1, b1, w2, b2) = (p.next(), p.next(), p.next(), p.next());
            let f = tape.linear(mm, w1, b1)?;
            let f = tape.silu(f)?;
            let f = tape.linear(f, w2, b2)?;
            let mlp_res = tape.mul(gate2, f)?;
            h = tape.add(h, mlp_res)?;
            residuals.push((attn_res, mlp_res));
        }

        let (sw, sb, cw, cb) = (p.next(), p.next(), p.next(), p.next());
        let shift = tape.linear(c_act, sw, sb)?;
        let scale = tape.linear(c_act, cw, cb)?;
        let f = Self::modulate(tape, h, shift, scale)?;
        let (w, b) = (p.next(), p.next());
        let out = tape.linear(f, w, b)?;
        // per-frame gain on the noisy input: a full-rank path past the
        // D-wide bottleneck
        let (kw, kb) = (p.next(), p.next());
        let gain = tape.linear(c_act, kw, kb)?;
        let ones = tape.input(Tensor::ones(&[1, d])?);
        let gain = tape.matmul(gain, ones)?;
        let skip = tape.mul(gain, x)?;
        let output = tape.add(out, skip)?;
        debug_assert_eq!(p.pos, params.len());
        Ok(ForwardTrace { output, residuals })
    }
}

impl ScoreFunction for Denoiser {
    fn eps(&self, x: &VideoTensor, tau: &Vtv) -> Result<VideoTensor> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape)?;
        let xn = tape.input(x.tensor().clone());
        let out = self.forward(&mut tape, &ids, xn, tau)?;
        let mut v = VideoTensor::new(tape.value(out)?.clone())?;
        v.set_geometry(x.geometry());
        Ok(v)
    }
}

/// A Gaussian law over flattened clips (frame-major, `N·d` coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVideoModel {
    n_frames: usize,
    frame_dim: usize,
    mean: Vec<f64>,
    cov: Tensor,
}

impl GaussianVideoModel {
    pub fn new(n_frames: usize, frame_dim: usize, mean: Vec<f64>, cov: Tensor) -> Result<Self> {
        let n = n_frames * frame_dim;
        if n == 0 || mean.len() != n || cov.shape() != [n, n] {
            return Err(Error::Shape(format!(
                "law over {n_frames}x{frame_dim} needs a {n}-vector and {n}x{n} covariance"
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("law mean".into()));
        }
        let (vals, _) = linalg::sym_eigen(&cov)?;
        if vals.data()[0] <= 1e-8 {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self {
            n_frames,
            frame_dim,
            mean,
            cov,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor {
        &self.cov
    }

    /// One exact draw.
    pub fn sample(&self, rng: &mut RngStream) -> Result<VideoTensor> {
        let ch = Cholesky::new(&self.cov)?;
        let z = rng.gaussian_vec(self.dim());
        let x: Vec<f64> = ch
            .lower_mul(&z)
            .iter()
            .zip(&self.mean)
            .map(|(a, m)| a + m)
            .collect();
        VideoTensor::from_flat(self.n_frames, self.frame_dim, x)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Shape("log_density input size".into()));
        }
        let ch = Cholesky::new(&self.cov)?;
        let r: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let sol = ch.solve(&r);
        let quad: f64 = r.iter().zip(&sol).map(|(a, b)| a * b).sum();
        let n = self.dim() as f64;
        Ok(-0.5 * (quad + ch.log_det() + n * math::ln(2.0 * core::f64::consts::PI)))
    }

    fn coords(&self, frames: &[usize]) -> Vec<usize> {
        frames
            .iter()
            .flat_map(|&f| (f * self.frame_dim)..((f + 1) * self.frame_dim))
            .collect()
    }

    /// Law of the frames not in `frozen` given the frozen frames' values
    /// (`values[k]` belongs to `frozen[k]`).
    pub fn condition(&self, frozen: &[usize], values: &[Vec<f64>]) -> Result<Self> {
        if frozen.len() != values.len() || frozen.iter().any(|&f| f >= self.n_frames) {
            return Err(Error::Shape("conditioning frames".into()));
        }
        let free: Vec<usize> = (0..self.n_frames).filter(|f| !frozen.contains(f)).collect();
        if free.is_empty() {
            return Err(Error::InvalidArgument("all frames are frozen".into()));
        }
        let fc = self.coords(frozen);
        let uc = self.coords(&free);
        let observed: Vec<f64> = values.iter().flatten().copied().collect();
        let (mean, cov) = conditional_gaussian(
            &uc,
            &fc,
            &observed,
            |i| self.mean[i],
            |i, j| self.cov.get2(i, j),
        )?;
        let n = uc.len();
        Self::new(free.len(), self.frame_dim, mean, Tensor::new(vec![n, n], cov)?)
    }

    /// Law of the diffused clip when frame `i` is at time `tau[i]`:
    /// `N(A m, A C A + S²)` with per-frame `A = mean_coef`, `S = std`.
    pub fn diffused(&self, schedule: &NoiseSchedule, tau: &Vtv) -> Result<Self> {
        let (a, s) = self.coef_vectors(schedule, tau)?;
        let n = self.dim();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] = a[i] * a[j] * self.cov.get2(i, j);
            }
            cov[i * n + i] += s[i] * s[i];
        }
        let mean = self.mean.iter().zip(&a).map(|(m, c)| m * c).collect();
        Self::new(self.n_frames, self.frame_dim, mean, Tensor::new(vec![n, n], cov)?)
    }

    fn coef_vectors(&self, schedule: &NoiseSchedule, tau: &Vtv) -> Result<(Vec<f64>, Vec<f64>)> {
        if tau.len() != self.n_frames {
            return Err(Error::Shape("timestep vector length".into()));
        }
        let mut a = Vec::with_capacity(self.dim());
        let mut s = Vec::with_capacity(self.dim());
        for &t in tau.times() {
            let (m, sd) = schedule.marginal_coeffs(t)?;
            a.extend(core::iter::repeat_n(m, self.frame_dim));
            s.extend(core::iter::repeat_n(sd, self.frame_dim));
        }
        Ok((a, s))
    }
}

/// Mean and covariance of coordinates `u` given coordinates `f` observed at
/// `observed`, for a joint Gaussian described by `mean`/`cov` accessors.
fn conditional_gaussian(
    u: &[usize],
    f: &[usize],
    observed: &[f64],
    mean: impl Fn(usize) -> f64,
    cov: impl Fn(usize, usize) -> f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (nu, nf) = (u.len(), f.len());
    let mut mu: Vec<f64> = u.iter().map(|&i| mean(i)).collect();
    let mut sigma = vec![0.0; nu * nu];
    for (a, &i) in u.iter().enumerate() {
        for (b, &j) in u.iter().enumerate() {
            sigma[a * nu + b] = cov(i, j);
        }
    }
    if nf > 0 {
        let mut sff = vec![0.0; nf * nf];
        for (a, &i) in f.iter().enumerate() {
            for (b, &j) in f.iter().enumerate() {
                sff[a * nf + b] = cov(i, j);
            }
        }
        let ch = Cholesky::from_slice(nf, &sff)?;
        let resid: Vec<f64> = f.iter().zip(observed).map(|(&i, &x)| x - mean(i)).collect();
        let w = ch.solve(&resid);
        // columns of Σ_FF⁻¹ Σ_FU
        let mut gain = vec![0.0; nf * nu];
        for (b, &j) in u.iter().enumerate() {
            let col: Vec<f64> = f.iter().map(|&i| cov(i, j)).collect();
            let sol = ch.solve(&col);
            for a in 0..nf {
                gain[a * nu + b] = sol[a];
            }
        }
        for (a, &i) in u.iter().enumerate() {
            mu[a] += f.iter().zip(&w).map(|(&k, wk)| cov(i, k) * wk).sum::<f64>();
            for b in 0..nu {
                let corr: f64 = f
                    .iter()
                    .enumerate()
                    .map(|(c, &k)| cov(i, k) * gain[c * nu + b])
                    .sum();
                sigma[a * nu + b] -= corr;
            }
        }
        // restore exact symmetry
        for a in 0..nu {
            for b in (a + 1)..nu {
                let avg = 0.5 * (sigma[a * nu + b] + sigma[b * nu + a]);
                sigma[a * nu + b] = avg;
                sigma[b * nu + a] = avg;
            }
        }
    }
    Ok((mu, sigma))
}

/// Exact ε̂ for Gaussian data: frames with τ = 0 are treated as observed
/// clean values, the rest get `-std(τᵢ)` times the conditional score of
/// the diffused law. Frozen rows are zero.
pub fn oracle_eps(
    model: &GaussianVideoModel,
    schedule: &NoiseSchedule,
    x: &VideoTensor,
    tau: &Vtv,
) -> Result<VideoTensor> {
    if x.n_frames() != model.n_frames || x.frame_dim() != model.frame_dim {
        return Err(Error::Shape("clip does not match the Gaussian law".into()));
    }
    let (a, s) = model.coef_vectors(schedule, tau)?;
    let d = model.frame_dim;
    let frozen: Vec<usize> = (0..model.n_frames).filter(|&i| tau.is_frozen(i)).collect();
    let free: Vec<usize> = (0..model.n_frames).filter(|&i| !tau.is_frozen(i)).collect();
    let mut out = VideoTensor::zeros(model.n_frames, d)?;
    out.set_geometry(x.geometry());
    if free.is_empty() {
        return Ok(out);
    }
    let fc = model.coords(&frozen);
    let uc = model.coords(&free);
    let flat = x.as_slice();
    let observed: Vec<f64> = fc.iter().map(|&i| flat[i]).collect();
    let (mu, sigma) = conditional_gaussian(
        &uc,
        &fc,
        &observed,
        |i| a[i] * model.mean[i],
        |i, j| {
            let c = a[i] * a[j] * model.cov.get2(i, j);
            if i == j {
                c + s[i] * s[i]
            } else {
                c
            }
        },
    )?;
    let ch = Cholesky::from_slice(uc.len(), &sigma)?;
    let resid: Vec<f64> = uc.iter().zip(&mu).map(|(&i, m)| flat[i] - m).collect();
    // score = -Σ⁻¹ r, ε̂ = -std · score = std · Σ⁻¹ r
    let sol = ch.solve(&resid);
    for (k, &i) in uc.iter().enumerate() {
        let (frame, col) = (i / d, i % d);
        out.frame_mut(frame)[col] = s[i] * sol[k];
    }
    Ok(out)
}

/// [`oracle_eps`] packaged as a [`ScoreFunction`].
#[derive(Debug, Clone)]
pub struct GaussianScore<'a> {
    pub model: &'a GaussianVideoModel,
    pub schedule: NoiseSchedule,
}

impl ScoreFunction for GaussianScore<'_> {
    fn eps(&self, x: &VideoTensor, tau: &Vtv) -> Result<VideoTensor> {
        oracle_eps(self.model, &self.schedule, x, tau)
    }
}

/// [`GaussianScore`] that memoises, per distinct τ, the affine map
/// `x ↦ A x + c` the oracle computes (it is linear in `x`).
///
/// Sampling many trajectories over one time grid then costs a
/// matrix-vector product per step instead of a fresh factorisation.
#[derive(Debug)]
pub struct CachedGaussianScore<'a> {
    inner: GaussianScore<'a>,
    cache: RefCell<BTreeMap<Vec<u64>, Rc<(Tensor, Vec<f64>)>>>,
}

impl<'a> CachedGaussianScore<'a> {
    pub fn new(model: &'a GaussianVideoModel, schedule: NoiseSchedule) -> Self {
        Self {
            inner: GaussianScore { model, schedule },
            cache: RefCell::new(BTreeMap::new()),
        }
    }

    fn affine(&self, tau: &Vtv) -> Result<Rc<(Tensor, Vec<f64>)>> {
        let key: Vec<u64> = tau.times().iter().map(|t| t.to_bits()).collect();
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let model = self.inner.model;
        let (nf, d) = (model.n_frames, model.frame_dim);
        let n = model.dim();
        let mut probe = VideoTensor::zeros(nf, d)?;
        let c = self.inner.eps(&probe, tau)?.as_slice().to_vec();
        let mut a = vec![0.0; n * n];
        for j in 0..n {
            probe.frame_mut(j / d)[j % d] = 1.0;
            let col = self.inner.eps(&probe, tau)?;
            probe.frame_mut(j / d)[j % d] = 0.0;
            for i in 0..n {
                a[i * n + j] = col.as_slice()[i] - c[i];
            }
        }
        let entry = Rc::new((Tensor::new(vec![n, n], a)?, c));
        self.cache.borrow_mut().insert(key, entry.clone());
        Ok(entry)
    }
}

impl ScoreFunction for CachedGaussianScore<'_> {
    fn eps(&self, x: &VideoTensor, tau: &Vtv) -> Result<VideoTensor> {
        let model = self.inner.model;
        if x.n_frames() != model.n_frames || x.frame_dim() != model.frame_dim {
            return Err(Error::Shape("clip does not match the Gaussian law".into()));
        }
        let map = self.affine(tau)?;
        let (a, c) = (&map.0, &map.1);
        let n = c.len();
        let xs = x.as_slice();
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let row = &a.data()[i * n..(i + 1) * n];
                c[i] + row.iter().zip(xs).map(|(p, q)| p * q).sum::<f64>()
            })
            .collect();
        let mut v = VideoTensor::from_flat(model.n_frames, model.frame_dim, out)?;
        v.set_geometry(x.geometry());
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn cached_oracle_matches_direct() {
        let s = NoiseSchedule::default();
        let law = GaussianVideoModel::new(3, 2, vec![0.1, -0.2, 0.0, 0.3, 0.5, -0.1], ar1_cov(3, 2, 0.8))
            .unwrap();
        let cached = CachedGaussianScore::new(&law, s);
        let mut rng = RngStream::new(21, 0);
        for tau in [vec![0.3, 0.3, 0.3], vec![0.0, 0.5, 0.9], vec![0.0, 0.2, 0.0]] {
            let tau = Vtv::new(tau).unwrap();
            for _ in 0..3 {
                let x = VideoTensor::new(rng.gaussian(&[3, 2]).unwrap()).unwrap();
                let a = oracle_eps(&law, &s, &x, &tau).unwrap();
                let b = cached.eps(&x, &tau).unwrap();
                for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    fn ar1_cov(n: usize, d: usize, rho: f64) -> Tensor {
        let m = n * d;
        let mut c = vec![0.0; m * m];
        for i in 0..n {
            for j in 0..n {
                for a in 0..d {
                    c[(i * d + a) * m + j * d + a] = rho.powi((i as i32 - j as i32).abs());
                }
            }
        }
        Tensor::new(vec![m, m], c).unwrap()
    }

    #[test]
    fn embedding_rows() {
        let tau = Vtv::new(vec![0.0, 0.4, 0.4]).unwrap();
        let e = embed_timesteps(&tau, 8).unwrap();
        assert_eq!(e.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(e.row(1), e.row(2));
        assert!(embed_timesteps(&tau, 7).is_err());
        let a = embed_timesteps(&Vtv::new(vec![0.3]).unwrap(), 32).unwrap();
        let b = embed_timesteps(&Vtv::new(vec![0.3 + 1e-6]).unwrap(), 32).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn presets() {
        let s = DenoiserConfig::preset("toy-S", 3).unwrap();
        assert_eq!((s.embed_dim, s.n_layers, s.n_heads, s.mlp_ratio), (32, 2, 2, 4));
        let b = DenoiserConfig::preset("toy-B", 3).unwrap();
        assert_eq!((b.embed_dim, b.n_layers, b.n_heads), (64, 4, 4));
        assert!(DenoiserConfig::preset("toy-XL", 3).is_err());
        assert!(DenoiserConfig::new(3, 30, 1, 4, 4).is_err());
    }

    fn small_model(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig::new(3, 8, 2, 2, 2).unwrap();
        Denoiser::init(cfg, &mut RngStream::new(seed, 0)).unwrap()
    }

    fn randomize_gates(m: &mut Denoiser, seed: u64) {
        let mut rng = RngStream::new(seed, 1);
        let names: Vec<String> = m
            .params()
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| n.contains(".ada.") || n.starts_with("final.s"))
            .collect();
        for n in names {
            let t = m.param_mut(&n).unwrap();
            let fresh = rng.gaussian(t.shape()).unwrap().scale(0.3).unwrap();
            *t = fresh;
        }
    }

    #[test]
    fn identity_at_init() {
        let m = small_model(1);
        let x = RngStream::new(2, 0).gaussian(&[4, 3]).unwrap();
        let tau = Vtv::new(vec![0.1, 0.5, 0.9, 0.0]).unwrap();
        let mut tape = Tape::new();
        let ids = m.bind(&mut tape).unwrap();
        let xn = tape.input(x.clone());
        let trace = m.forward_traced(&mut tape, &ids, xn, &tau).unwrap();
        for (a, b) in &trace.residuals {
            assert_eq!(tape.value(*a).unwrap().max_abs(), 0.0);
            assert_eq!(tape.value(*b).unwrap().max_abs(), 0.0);
        }
        // gate-stripped reference: final layer applied to the embedded input
        let p = |name: &str| m.params().iter().find(|(n, _)| n == name).unwrap().1.clone();
        let mut t2 = Tape::new();
        let xi = t2.input(x);
        let w = t2.input(p("embed.w"));
        let b = t2.input(p("embed.b"));
        let h = t2.linear(xi, w, b).unwrap();
        let ln = t2.layer_norm(h).unwrap();
        let w = t2.input(p("final.out.w"));
        let b = t2.input(p("final.out.b"));
        let out = t2.linear(ln, w, b).unwrap();
        assert_eq!(tape.value(trace.output).unwrap(), t2.value(out).unwrap());
    }

    #[test]
    fn permutation_equivariance() {
        let mut m = small_model(3);
        randomize_gates(&mut m, 4);
        let x = VideoTensor::new(RngStream::new(5, 0).gaussian(&[5, 3]).unwrap()).unwrap();
        let tau = Vtv::new(vec![0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let out = m.eps(&x, &tau).unwrap();
        let out_p = m.eps(&x.permuted(&perm).unwrap(), &tau.permuted(&perm)).unwrap();
        let expect = out.permuted(&perm).unwrap();
        for (a, b) in out_p.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_changes_output() {
        let mut m = small_model(6);
        randomize_gates(&mut m, 7);
        let x = VideoTensor::new(RngStream::new(8, 0).gaussian(&[3, 3]).unwrap()).unwrap();
        let a = m.eps(&x, &Vtv::new(vec![0.2, 0.5, 0.8]).unwrap()).unwrap();
        let b = m.eps(&x, &Vtv::new(vec![0.2, 0.6, 0.8]).unwrap()).unwrap();
        let row_diff: f64 = a.frame(1).iter().zip(b.frame(1)).map(|(p, q)| (p - q).abs()).sum();
        assert!(row_diff > 0.0);
    }

    #[test]
    fn mse_gradient_through_model() {
        let mut m = small_model(9);
        randomize_gates(&mut m, 10);
        let x = RngStream::new(11, 0).gaussian(&[2, 3]).unwrap();
        let target = RngStream::new(12, 0).gaussian(&[2, 3]).unwrap();
        let tau = Vtv::new(vec![0.3, 0.6]).unwrap();
        let model = m.clone();
        let report = grad_check(
            |tape, p| {
                let xn = tape.input(x.clone());
                let out = model.forward(tape, p, xn, &tau)?;
                let t = tape.input(target.clone());
                let diff = tape.sub(out, t)?;
                let sq = tape.mul(diff, diff)?;
                tape.mean(sq)
            },
            &m.param_tensors(),
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn from_params_checks_layout() {
        let m = small_model(1);
        let again = Denoiser::from_params(m.config().clone(), m.params().to_vec()).unwrap();
        assert_eq!(again, m);
        let mut broken = m.params().to_vec();
        broken.pop();
        assert!(Denoiser::from_params(m.config().clone(), broken).is_err());
    }

    #[test]
    fn oracle_isotropic_case() {
        let s = NoiseSchedule::default();
        let law = GaussianVideoModel::new(2, 2, vec![0.0; 4], Tensor::eye(4).unwrap()).unwrap();
        let x = VideoTensor::from_frames(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap();
        let tau = Vtv::new(vec![0.2, 0.7]).unwrap();
        let eps = oracle_eps(&law, &s, &x, &tau).unwrap();
        for i in 0..2 {
            let sd = s.marginal_coeffs(tau.times()[i]).unwrap().1;
            for j in 0..2 {
                assert!((eps.frame(i)[j] - sd * x.frame(i)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_all_frozen_is_zero() {
        let s = NoiseSchedule::default();
        let law = GaussianVideoModel::new(2, 1, vec![0.0; 2], ar1_cov(2, 1, 0.5)).unwrap();
        let x = VideoTensor::from_frames(&[vec![0.3], vec![2.0]]).unwrap();
        let eps = oracle_eps(&law, &s, &x, &Vtv::broadcast(0.0, 2).unwrap()).unwrap();
        assert_eq!(eps.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn oracle_conditional_matches_log_density_gradient() {
        // N=2, d=1, ρ=0.9, frame 1 clean, frame 2 at τ=0.5
        let s = NoiseSchedule::default();
        let rho = 0.9;
        let law = GaussianVideoModel::new(2, 1, vec![0.0; 2], ar1_cov(2, 1, rho)).unwrap();
        let (a, sd) = s.marginal_coeffs(0.5).unwrap();
        let (x1, x2) = (0.7, -0.4);
        // joint density of (clean x1, diffused x2), written out by hand
        let logp = |y2: f64| {
            let (c11, c12, c22) = (1.0, a * rho, a * a + sd * sd);
            let det = c11 * c22 - c12 * c12;
            let q = (c22 * x1 * x1 - 2.0 * c12 * x1 * y2 + c11 * y2 * y2) / det;
            -0.5 * q
        };
        let h = 1e-5;
        let score = (logp(x2 + h) - logp(x2 - h)) / (2.0 * h);
        let x = VideoTensor::from_frames(&[vec![x1], vec![x2]]).unwrap();
        let eps = oracle_eps(&law, &s, &x, &Vtv::new(vec![0.0, 0.5]).unwrap()).unwrap();
        assert!((eps.frame(1)[0] - (-sd * score)).abs() < 1e-6);
        assert_eq!(eps.frame(0)[0], 0.0);
    }

    #[test]
    fn oracle_unconditional_matches_density_gradient() {
        let s = NoiseSchedule::default();
        let mut rng = RngStream::new(13, 0);
        for _ in 0..5 {
            let b = rng.gaussian(&[4, 4]).unwrap();
            let cov = b
                .matmul(&b.transpose().unwrap())
                .unwrap()
                .add(&Tensor::eye(4).unwrap().scale(0.5).unwrap())
                .unwrap();
            let mean = rng.gaussian_vec(4);
            let law = GaussianVideoModel::new(2, 2, mean, cov).unwrap();
            let tau = Vtv::new(vec![rng.uniform_range(0.01, 1.0), rng.uniform_range(0.01, 1.0)])
                .unwrap();
            let x = VideoTensor::new(rng.gaussian(&[2, 2]).unwrap()).unwrap();
            let eps = oracle_eps(&law, &s, &x, &tau).unwrap();
            let diffused = law.diffused(&s, &tau).unwrap();
            let h = 1e-5;
            for k in 0..4 {
                let mut xp = x.as_slice().to_vec();
                let mut xm = xp.clone();
                xp[k] += h;
                xm[k] -= h;
                let g = (diffused.log_density(&xp).unwrap() - diffused.log_density(&xm).unwrap())
                    / (2.0 * h);
                let sd = s.marginal_coeffs(tau.times()[k / 2]).unwrap().1;
                let score = -eps.as_slice()[k] / sd;
                assert!((score - g).abs() < 1e-8, "{score} vs {g}");
            }
        }
    }

    #[test]
    fn law_rejects_singular_cov() {
        let c = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(GaussianVideoModel::new(2, 1, vec![0.0; 2], c).is_err());
    }

    #[test]
    fn conditioning_ar1_on_previous_frame() {
        let law = GaussianVideoModel::new(3, 1, vec![0.0; 3], ar1_cov(3, 1, 0.8)).unwrap();
        let c = law.condition(&[1], &[vec![2.0]]).unwrap();
        // frames 0 and 2 given frame 1: mean 0.8·2, variance 1 - 0.64, independent
        assert!((c.mean()[0] - 1.6).abs() < 1e-12);
        assert!((c.mean()[1] - 1.6).abs() < 1e-12);
        assert!((c.cov().get2(0, 0) - 0.36).abs() < 1e-12);
        assert!(c.cov().get2(0, 1).abs() < 1e-12);
    }
}
