//! ε-matching objective with probabilistic timestep sampling, Adam, the
//! training loop and the checkpoint byte format.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{NodeId, Tape};
use crate::diffusion::{perturb, VideoTensor};
use crate::models::{Denoiser, DenoiserConfig};
use crate::schedule::{ptss_sample, NoiseSchedule, PtssBranch, PtssConfig, Vtv};
use crate::{math, Error, Result, RngStream, Tensor};

/// A network that records its ε prediction on a tape.
pub trait NoisePredictor {
    fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId, tau: &Vtv) -> Result<NodeId>;
}

impl NoisePredictor for Denoiser {
    fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId, tau: &Vtv) -> Result<NodeId> {
        Denoiser::forward(self, tape, params, x, tau)
    }
}

/// How per-frame errors are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Plain mean squared ε error.
    #[default]
    UniformEps,
    /// `σ²`-weighted error in score space. Algebraically identical to
    /// [`Weighting::UniformEps`]; kept as a cross-check.
    Sigma2Score,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::UniformEps => "uniform-eps",
            Self::Sigma2Score => "sigma2-score",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "uniform-eps" => Some(Self::UniformEps),
            "sigma2-score" => Some(Self::Sigma2Score),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub ptss: PtssConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weighting: Weighting,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Steps between checkpoints; 0 means only at the end.
    pub checkpoint_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ptss: PtssConfig::default(),
            batch_size: 8,
            total_steps: 2000,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weighting: Weighting::UniformEps,
            grad_clip: Some(1.0),
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.total_steps < 1 {
            return bad("total_steps must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam eps must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        PtssConfig::new(self.ptss.p())?;
        Ok(())
    }
}

/// One loss term recorded on a tape.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub node: NodeId,
    pub tau: Vtv,
    pub branch: PtssBranch,
}

/// Draws τ by PTSS, noises `x0`, runs the network and records the weighted
/// mean squared ε error.
#[allow(clippy::too_many_arguments)]
pub fn loss<M: NoisePredictor + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &[NodeId],
    x0: &VideoTensor,
    schedule: &NoiseSchedule,
    ptss: &PtssConfig,
    weighting: Weighting,
    rng: &mut RngStream,
) -> Result<LossTerm> {
    let (tau, branch) = ptss_sample(ptss, schedule, x0.n_frames(), rng)?;
    let node = loss_at(model, tape, params, x0, &tau, schedule, weighting, rng)?;
    Ok(LossTerm { node, tau, branch })
}

/// [`loss`] at a fixed `tau`.
#[allow(clippy::too_many_arguments)]
pub fn loss_at<M: NoisePredictor + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &[NodeId],
    x0: &VideoTensor,
    tau: &Vtv,
    schedule: &NoiseSchedule,
    weighting: Weighting,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let non_finite = |e: Error| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss {
            tau: tau.times().to_vec(),
        },
        other => other,
    };
    let (xt, eps) = perturb(x0, tau, schedule, rng)?;
    let x = tape.input(xt.into_tensor());
    let out = model.forward(tape, params, x, tau).map_err(non_finite)?;
    let target = tape.input(eps.into_tensor());
    let diff = tape.sub(out, target).map_err(non_finite)?;
    let node = match weighting {
        Weighting::UniformEps => {
            let sq = tape.mul(diff, diff).map_err(non_finite)?;
            tape.mean(sq).map_err(non_finite)?
        }
        Weighting::Sigma2Score => {
            // score error (ε - ε̂)/σ, weighted by σ²
            let d = x0.frame_dim();
            let mut inv = Vec::with_capacity(tau.len() * d);
            let mut var = Vec::with_capacity(tau.len() * d);
            for &t in tau.times() {
                let s = schedule.marginal_coeffs(t)?.1;
                inv.extend(core::iter::repeat_n(1.0 / s, d));
                var.extend(core::iter::repeat_n(s * s, d));
            }
            let inv = tape.input(Tensor::new(vec![tau.len(), d], inv).map_err(non_finite)?);
            let var = tape.input(Tensor::new(vec![tau.len(), d], var)?);
            let score_err = tape.mul(diff, inv).map_err(non_finite)?;
            let sq = tape.mul(score_err, score_err).map_err(non_finite)?;
            let w = tape.mul(sq, var).map_err(non_finite)?;
            tape.mean(w).map_err(non_finite)?
        }
    };
    Ok(node)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor]) -> Result<Self> {
        let zeros = params
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - math::powi(self.beta1, self.t);
        let c2 = 1.0 - math::powi(self.beta2, self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::Shape("gradient shape mismatch".into()));
            }
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(md).zip(vd) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= self.lr * mh / (math::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}

/// Source of training clips.
pub trait Dataset {
    fn len(&self) -> usize;
    fn clip(&self, index: usize) -> Result<VideoTensor>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for [VideoTensor] {
    fn len(&self) -> usize {
        <[VideoTensor]>::len(self)
    }
    fn clip(&self, index: usize) -> Result<VideoTensor> {
        self.get(index).cloned().ok_or(Error::IndexOutOfRange {
            index,
            len: <[VideoTensor]>::len(self),
        })
    }
}

impl Dataset for Vec<VideoTensor> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn clip(&self, index: usize) -> Result<VideoTensor> {
        self.as_slice().clip(index)
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// `per_frame` when any batch element took the per-frame PTSS branch.
    pub ptss_branch: PtssBranch,
    pub clipped: bool,
}

/// Loss above `DIVERGENCE_FACTOR × initial` for `DIVERGENCE_PATIENCE`
/// consecutive steps aborts training.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: u64 = 100;

/// Everything needed to continue training bit-identically.
///
/// Noise and batch indices are drawn from streams derived from
/// `(seed, step, batch element)`, so the step counter is the only RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Denoiser,
    pub adam: Adam,
    pub step: u64,
    pub seed: u64,
    pub initial_loss: Option<f64>,
    pub above_count: u64,
}

impl TrainState {
    pub fn new(model: Denoiser, cfg: &TrainConfig) -> Result<Self> {
        let adam = Adam::new(
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            &model.param_tensors(),
        )?;
        Ok(Self {
            model,
            adam,
            step: 0,
            seed: cfg.seed,
            initial_loss: None,
            above_count: 0,
        })
    }

    /// Flattens the state into named tensors for the checkpoint file.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let c = self.model.config();
        let mut out = Vec::new();
        let meta = |v: Vec<f64>| Tensor::from_parts(vec![v.len()], v);
        out.push((
            "meta.model".into(),
            meta(vec![
                c.frame_dim as f64,
                c.embed_dim as f64,
                c.n_layers as f64,
                c.n_heads as f64,
                c.mlp_ratio as f64,
            ]),
        ));
        out.push((
            "meta.train".into(),
            meta(vec![
                self.step as f64,
                (self.seed >> 32) as f64,
                (self.seed & 0xFFFF_FFFF) as f64,
                self.adam.t as f64,
                self.initial_loss.unwrap_or(-1.0),
                self.above_count as f64,
                self.adam.lr,
                self.adam.beta1,
                self.adam.beta2,
                self.adam.eps,
            ]),
        ));
        for (i, (name, p)) in self.model.params().iter().enumerate() {
            out.push((format!("param.{name}"), p.clone()));
            out.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            out.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        out
    }

    /// Inverse of [`to_entries`](Self::to_entries). The preset name is not
    /// stored; pass it through `preset` if known.
    pub fn from_entries(entries: Vec<(String, Tensor)>, preset: Option<&str>) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut it = entries.into_iter();
        let (n0, model_meta) = it.next().ok_or_else(|| bad("empty checkpoint"))?;
        let (n1, train_meta) = it.next().ok_or_else(|| bad("missing training metadata"))?;
        if n0 != "meta.model" || model_meta.len() != 5 || n1 != "meta.train" || train_meta.len() != 10
        {
            return Err(bad("unexpected metadata entries"));
        }
        let mm: Vec<usize> = model_meta.data().iter().map(|&v| v as usize).collect();
        let mut cfg = DenoiserConfig::new(mm[0], mm[1], mm[2], mm[3], mm[4])?;
        if let Some(p) = preset {
            cfg.preset = p.to_string();
        }
        let tm = train_meta.data();
        let rest: Vec<(String, Tensor)> = it.collect();
        if !rest.len().is_multiple_of(3) {
            return Err(bad("parameter entries are not in (param, m, v) triples"));
        }
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for chunk in rest.chunks(3) {
            let name = chunk[0]
                .0
                .strip_prefix("param.")
                .ok_or_else(|| bad("expected a param entry"))?;
            if chunk[1].0 != format!("adam.m.{name}") || chunk[2].0 != format!("adam.v.{name}") {
                return Err(bad("optimizer entries out of order"));
            }
            params.push((name.to_string(), chunk[0].1.clone()));
            m.push(chunk[1].1.clone());
            v.push(chunk[2].1.clone());
        }
        let model = Denoiser::from_params(cfg, params)?;
        Ok(Self {
            model,
            adam: Adam {
                lr: tm[6],
                beta1: tm[7],
                beta2: tm[8],
                eps: tm[9],
                m,
                v,
                t: tm[3] as u64,
            },
            step: tm[0] as u64,
            seed: ((tm[1] as u64) << 32) | tm[2] as u64,
            initial_loss: (tm[4] >= 0.0).then_some(tm[4]),
            above_count: tm[5] as u64,
        })
    }
}

/// Stream used for batch element `b` of step `step`.
pub fn batch_stream(seed: u64, step: u64, b: u64) -> RngStream {
    RngStream::new(seed, RngStream::derive_id(&[step, b]))
}

/// Single-threaded trainer over a [`Denoiser`].
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    state: TrainState,
}

impl Trainer {
    pub fn new(model: Denoiser, cfg: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        let state = TrainState::new(model, &cfg)?;
        Ok(Self {
            cfg,
            schedule,
            state,
        })
    }

    /// Continues from a saved state. Optimizer hyper-parameters come from `cfg`.
    pub fn resume(mut state: TrainState, cfg: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        state.adam.lr = cfg.learning_rate;
        state.adam.beta1 = cfg.beta1;
        state.adam.beta2 = cfg.beta2;
        state.adam.eps = cfg.adam_eps;
        state.seed = cfg.seed;
        Ok(Self {
            cfg,
            schedule,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn model(&self) -> &Denoiser {
        &self.state.model
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.total_steps
    }

    /// Batch loss and parameter gradients at the current step, without updating.
    pub fn batch_gradients<D: Dataset + ?Sized>(
        &self,
        data: &D,
    ) -> Result<(f64, Vec<Tensor>, PtssBranch)> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let model = &self.state.model;
        let mut tape = Tape::new();
        let ids = model.bind(&mut tape)?;
        let mut terms = Vec::with_capacity(self.cfg.batch_size);
        let mut branch = PtssBranch::Shared;
        for b in 0..self.cfg.batch_size {
            let mut rng = batch_stream(self.state.seed, self.state.step, b as u64);
            let idx = rng.below(data.len() as u64) as usize;
            let x0 = data.clip(idx)?;
            let term = loss(
                model,
                &mut tape,
                &ids,
                &x0,
                &self.schedule,
                &self.cfg.ptss,
                self.cfg.weighting,
                &mut rng,
            )?;
            if term.branch == PtssBranch::PerFrame {
                branch = PtssBranch::PerFrame;
            }
            terms.push(term);
        }
        let mut total = terms[0].node;
        for t in &terms[1..] {
            total = tape.add(total, t.node)?;
        }
        let total = tape.scale(total, 1.0 / self.cfg.batch_size as f64)?;
        let value = tape.value(total)?.item()?;
        tape.backward(total)?;
        let grads = ids
            .iter()
            .zip(model.params())
            .map(|(&id, (_, p))| match tape.grad(id)? {
                Some(g) => Ok(g.clone()),
                None => Tensor::zeros(p.shape()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, grads, branch))
    }

    /// One optimizer step.
    pub fn step<D: Dataset + ?Sized>(&mut self, data: &D) -> Result<StepRecord> {
        let (loss, mut grads, branch) = self.batch_gradients(data)?;
        let grad_norm = math::sqrt(
            grads
                .iter()
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum(),
        );
        let mut clipped = false;
        if let Some(c) = self.cfg.grad_clip {
            if grad_norm > c {
                let f = c / grad_norm;
                for g in &mut grads {
                    for v in g.data_mut() {
                        *v *= f;
                    }
                }
                clipped = true;
            }
        }
        let mut params = self.state.model.param_tensors();
        self.state.adam.step(&mut params, &grads)?;
        for p in &params {
            p.ensure_finite("parameter update")?;
        }
        self.state.model.set_param_tensors(params)?;

        let step = self.state.step;
        self.state.step += 1;
        let initial = *self.state.initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.state.above_count += 1;
            if self.state.above_count >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    loss,
                    initial,
                });
            }
        } else {
            self.state.above_count = 0;
        }
        Ok(StepRecord {
            step,
            loss,
            grad_norm,
            ptss_branch: branch,
            clipped,
        })
    }

    /// Steps until `total_steps`, calling `on_step` after each one.
    pub fn run<D, F>(&mut self, data: &D, mut on_step: F) -> Result<()>
    where
        D: Dataset + ?Sized,
        F: FnMut(&StepRecord, &Self) -> Result<()>,
    {
        while !self.is_done() {
            let rec = self.step(data)?;
            on_step(&rec, self)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final state with the full loss trace.
pub fn train<D: Dataset + ?Sized>(
    model: Denoiser,
    cfg: TrainConfig,
    data: &D,
    schedule: NoiseSchedule,
) -> Result<(TrainState, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(model, cfg, schedule)?;
    let mut trace = Vec::new();
    trainer.run(data, |r, _| {
        trace.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.into_state(), trace))
}

/// Exponential moving average of a loss trace (`alpha` weight on the new value).
pub fn smoothed(trace: &[StepRecord], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = None;
    for r in trace {
        let v = match acc {
            None => r.loss,
            Some(a) => alpha * r.loss + (1.0 - alpha) * a,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"FVDM1\n";

/// Encodes named tensors: magic, entry count, then for each entry the name
/// length, name bytes, rank, extents and values. Integers are u64 LE,
/// values f64 LE.
pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let size: usize = entries
        .iter()
        .map(|(n, t)| 16 + n.len() + 8 * t.rank() + 8 * t.len())
        .sum();
    let mut out = Vec::with_capacity(14 + size);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > remaining) {
            return Err(Error::Checkpoint(format!("length {n} overflows the file")));
        }
        Ok(n as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let count = r.len(16)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.len(1)?;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.len(8)?;
        let mut shape = Vec::with_capacity(rank);
        let mut n: u64 = 1;
        for _ in 0..rank {
            let e = r.u64()?;
            n = n
                .checked_mul(e)
                .ok_or_else(|| Error::Checkpoint(format!("extent overflow in {name}")))?;
            shape.push(e as usize);
        }
        if n.checked_mul(8).is_none_or(|b| b > (bytes.len() - r.pos) as u64) {
            return Err(Error::Checkpoint(format!("extent overflow in {name}")));
        }
        let raw = r.take(n as usize * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::VideoTensor;

    struct Zeros;
    impl NoisePredictor for Zeros {
        fn forward(&self, tape: &mut Tape, _: &[NodeId], x: NodeId, _: &Vtv) -> Result<NodeId> {
            let shape = tape.value(x)?.shape().to_vec();
            Ok(tape.input(Tensor::zeros(&shape)?))
        }
    }

    /// Recovers the true ε from the noisy input using the known clean clip.
    struct Oracle {
        x0: VideoTensor,
        schedule: NoiseSchedule,
    }
    impl NoisePredictor for Oracle {
        fn forward(&self, tape: &mut Tape, _: &[NodeId], x: NodeId, tau: &Vtv) -> Result<NodeId> {
            let xt = tape.value(x)?.clone();
            let d = self.x0.frame_dim();
            let mut out = vec![0.0; xt.len()];
            for (i, &t) in tau.times().iter().enumerate() {
                let (m, s) = self.schedule.marginal_coeffs(t)?;
                for j in 0..d {
                    out[i * d + j] = (xt.data()[i * d + j] - m * self.x0.frame(i)[j]) / s;
                }
            }
            Ok(tape.input(Tensor::new(xt.shape().to_vec(), out)?))
        }
    }

    fn clip(seed: u64) -> VideoTensor {
        VideoTensor::new(RngStream::new(seed, 9).gaussian(&[4, 3]).unwrap()).unwrap()
    }

    #[test]
    fn true_eps_gives_zero_loss() {
        let s = NoiseSchedule::default();
        let x0 = clip(1);
        let model = Oracle {
            x0: x0.clone(),
            schedule: s,
        };
        let mut tape = Tape::new();
        let mut rng = RngStream::new(2, 0);
        let t = loss(&model, &mut tape, &[], &x0, &s, &PtssConfig::default(), Weighting::UniformEps, &mut rng)
            .unwrap();
        assert!(tape.value(t.node).unwrap().item().unwrap() < 1e-20);
    }

    #[test]
    fn zero_prediction_loss_is_one() {
        let s = NoiseSchedule::default();
        let x0 = clip(3);
        let mut rng = RngStream::new(4, 0);
        let mut acc = 0.0;
        let n = 1000;
        for _ in 0..n {
            let mut tape = Tape::new();
            let t = loss(&Zeros, &mut tape, &[], &x0, &s, &PtssConfig::default(), Weighting::UniformEps, &mut rng)
                .unwrap();
            acc += tape.value(t.node).unwrap().item().unwrap();
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.03);
    }

    #[test]
    fn weightings_agree() {
        let s = NoiseSchedule::default();
        let cfg = DenoiserConfig::new(3, 8, 1, 2, 2).unwrap();
        let model = Denoiser::init(cfg, &mut RngStream::new(5, 0)).unwrap();
        for k in 0..20 {
            let x0 = clip(10 + k);
            let tau = Vtv::new(vec![0.01, 0.3, 0.7, 1.0]).unwrap();
            let mut values = [0.0; 2];
            for (slot, w) in values.iter_mut().zip([Weighting::UniformEps, Weighting::Sigma2Score]) {
                let mut tape = Tape::new();
                let ids = model.bind(&mut tape).unwrap();
                let mut rng = RngStream::new(k, 1);
                let node = loss_at(&model, &mut tape, &ids, &x0, &tau, &s, w, &mut rng).unwrap();
                *slot = tape.value(node).unwrap().item().unwrap();
            }
            assert!((values[0] - values[1]).abs() < 1e-12, "{values:?}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let p = vec![RngStream::new(1, 0).gaussian(&[3, 2]).unwrap()];
        let mut params = p.clone();
        let mut adam = Adam::new(3e-4, 0.9, 0.999, 1e-8, &params).unwrap();
        adam.step(&mut params, &[Tensor::zeros(&[3, 2]).unwrap()]).unwrap();
        assert_eq!(params, p);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()];
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, &params).unwrap();
        adam.step(&mut params, &[Tensor::new(vec![2], vec![2.0, -0.5]).unwrap()]).unwrap();
        assert!((params[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((params[0].data()[1] - 1.1).abs() < 1e-7);
    }

    fn tiny_setup(seed: u64, steps: u64) -> (Trainer, Vec<VideoTensor>) {
        let cfg = DenoiserConfig::new(3, 8, 1, 2, 2).unwrap();
        let model = Denoiser::init(cfg, &mut RngStream::new(seed, 0)).unwrap();
        let tc = TrainConfig {
            batch_size: 2,
            total_steps: steps,
            seed,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let data = vec![clip(100), clip(101)];
        (Trainer::new(model, tc, NoiseSchedule::default()).unwrap(), data)
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (a, data) = tiny_setup(7, 15);
        let (b, _) = tiny_setup(7, 15);
        let (sa, ta) = train(a.model().clone(), a.config().clone(), &data, NoiseSchedule::default()).unwrap();
        let (sb, tb) = train(b.model().clone(), b.config().clone(), &data, NoiseSchedule::default()).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(sa, sb);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut full, data) = tiny_setup(8, 20);
        let mut trace = Vec::new();
        full.run(&data, |r, _| {
            trace.push(r.loss);
            Ok(())
        })
        .unwrap();

        let (mut first, _) = tiny_setup(8, 20);
        for _ in 0..10 {
            first.step(&data).unwrap();
        }
        let bytes = encode_checkpoint(&first.state().to_entries());
        let state = TrainState::from_entries(decode_checkpoint(&bytes).unwrap(), None).unwrap();
        assert_eq!(&state, first.state());
        let mut resumed = Trainer::resume(state, first.config().clone(), NoiseSchedule::default()).unwrap();
        let mut tail = Vec::new();
        resumed
            .run(&data, |r, _| {
                tail.push(r.loss);
                Ok(())
            })
            .unwrap();
        assert_eq!(tail.len(), 10);
        for (a, b) in trace[10..].iter().zip(&tail) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn divergence_is_detected() {
        let (mut t, data) = tiny_setup(9, 1000);
        t.step(&data).unwrap();
        t.state.initial_loss = Some(1e-6);
        let err = t.run(&data, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 100, .. }), "{err:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let entries = vec![
            ("a".to_string(), Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap()),
            ("scalar".to_string(), Tensor::scalar(4.25).unwrap()),
        ];
        let bytes = encode_checkpoint(&entries);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, entries);
        assert_eq!(encode_checkpoint(&back), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_checkpoint(&bad).unwrap_err(), Error::Checkpoint("bad magic".into()));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut huge = bytes.clone();
        // first extent of entry "a"
        let off = 6 + 8 + 8 + 1 + 8;
        huge[off..off + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge).is_err());
    }

    #[test]
    fn memorizes_two_clips() {
        let cfg = DenoiserConfig::new(3, 16, 1, 2, 2).unwrap();
        let model = Denoiser::init(cfg, &mut RngStream::new(11, 0)).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            total_steps: 600,
            learning_rate: 3e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let data = vec![clip(200), clip(201)];
        let (_, trace) = train(model, tc, &data, NoiseSchedule::default()).unwrap();
        let s = smoothed(&trace, 0.02);
        assert!(s[s.len() - 1] < 0.5 * s[20], "{} vs {}", s[s.len() - 1], s[20]);
    }
}
