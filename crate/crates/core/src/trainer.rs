//! End-to-end optimization of the transceiver pair: batching, SNR and
//! channel sampling strategies, the no-precoding ablation path, and
//! checkpointing.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::channel::{
    build_heatmap, snr_to_sigma2, uncoded_heatmap, ChannelError, ChannelRealization, Heatmap, MimoChainMap, SvdMode,
};
use crate::datasets::{fnv1a, Image, ImageSet};
use crate::mimolin::sample_channel;
use crate::numerics::{adam_step, AdamState, Graph, NumericsError, Tensor};
use crate::par::{map_indexed, ExecMode};
use crate::rng::stream;
use crate::vitcodec::{
    bind_params, concat_heatmap, decoder_graph, encoder_graph, patchify, ViTConfig, ViTParams, VitError,
};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MJSCCKP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}; offending batch reproducible from seed {seed}")]
    NonFiniteLoss { step: u64, seed: u64, checkpoint: Option<PathBuf> },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bandwidth ratio: {0}")]
    BadRatio(String),
    #[error("snr strategy: {0}")]
    BadSnr(String),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Bandwidth ratio R = k/n as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self, TrainError> {
        if num == 0 || den == 0 {
            return Err(TrainError::BadRatio("numerator and denominator must be positive".into()));
        }
        Ok(Ratio { num, den })
    }

    /// Parses "1/24" or a plain decimal like "0.25".
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        if let Some((a, b)) = text.split_once('/') {
            let num = a.trim().parse::<u32>().map_err(|e| TrainError::BadRatio(format!("{text}: {e}")))?;
            let den = b.trim().parse::<u32>().map_err(|e| TrainError::BadRatio(format!("{text}: {e}")))?;
            Ratio::new(num, den)
        } else {
            let v = text.trim().parse::<f64>().map_err(|e| TrainError::BadRatio(format!("{text}: {e}")))?;
            if !(v > 0.0 && v <= 16.0) {
                return Err(TrainError::BadRatio(format!("{text}: out of range")));
            }
            // denominator 10^4 keeps common decimals exact
            Ratio::new((v * 10_000.0).round() as u32, 10_000)
        }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Channel uses for n source symbols: k = round(R·n).
    pub fn channel_uses(&self, n_source: usize) -> usize {
        (self.value() * n_source as f64).round() as usize
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Training-time SNR sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrStrategy {
    Fixed(f64),
    /// Uniform in [lo, hi) dB, drawn per sample.
    Uniform(f64, f64),
}

impl SnrStrategy {
    /// Parses "fixed:5" or "uniform:0:22".
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            ["fixed", v] => {
                let mu = v.parse::<f64>().map_err(|e| TrainError::BadSnr(format!("{text}: {e}")))?;
                Ok(SnrStrategy::Fixed(mu))
            }
            ["uniform", lo, hi] => {
                let lo = lo.parse::<f64>().map_err(|e| TrainError::BadSnr(format!("{text}: {e}")))?;
                let hi = hi.parse::<f64>().map_err(|e| TrainError::BadSnr(format!("{text}: {e}")))?;
                if lo >= hi || !lo.is_finite() || !hi.is_finite() {
                    return Err(TrainError::BadSnr(format!("{text}: lower bound must be below upper")));
                }
                Ok(SnrStrategy::Uniform(lo, hi))
            }
            _ => Err(TrainError::BadSnr(format!("{text}: expected fixed:<db> or uniform:<lo>:<hi>"))),
        }
    }
}

impl std::fmt::Display for SnrStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SnrStrategy::Fixed(mu) => write!(f, "fixed:{mu}"),
            SnrStrategy::Uniform(lo, hi) => write!(f, "uniform:{lo}:{hi}"),
        }
    }
}

/// One training SNR draw in dB.
pub fn sample_train_snr<R: Rng>(strategy: SnrStrategy, rng: &mut R) -> f64 {
    match strategy {
        SnrStrategy::Fixed(mu) => mu,
        SnrStrategy::Uniform(lo, hi) => rng.gen_range(lo..hi),
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub vit: ViTConfig,
    pub ratio: Ratio,
    pub snr: SnrStrategy,
    pub svd_mode: SvdMode,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub ps: f64,
    pub sigma_h2: f64,
    pub sing_floor: f64,
    /// Invoke the progress callback every this many steps (0 = never).
    pub eval_every: u64,
    /// Global-norm gradient clip; deep fades make the equalized inputs
    /// heavy-tailed, and clipping keeps rare huge batches from dominating
    /// the optimizer state. None = off.
    pub grad_clip: Option<f64>,
    pub checkpoint_path: Option<PathBuf>,
    pub exec: ExecMode,
}

impl TrainConfig {
    /// Canonical digest of everything that affects the run, stored in
    /// checkpoints so resumes can detect config drift.
    pub fn digest(&self) -> u64 {
        let v = &self.vit;
        let text = format!(
            "p={} d={} layers={} heads={} m={} k={} h={} w={} attn={:?} R={} snr={} svd={:?} batch={} lr={} steps={} seed={} ps={} sigma_h2={} floor={}",
            v.p, v.d, v.layers, v.heads, v.m, v.k, v.h, v.w, v.attn_scale,
            self.ratio, self.snr, self.svd_mode, self.batch_size, self.lr,
            self.steps, self.seed, self.ps, self.sigma_h2, self.sing_floor,
        );
        fnv1a(text.as_bytes())
    }
}

/// Plain MSE between two images (mean over all pixel/channel entries).
pub fn mse_loss(a: &Image, b: &Image) -> Result<f64, TrainError> {
    if a.h != b.h || a.w != b.w {
        return Err(TrainError::Vit(VitError::Config(format!(
            "mse_loss on {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        ))));
    }
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Forward + backward for one image under one channel draw; returns the loss
/// and the flat gradient list in `ViTParams::named` order.
fn image_pass(
    params: &ViTParams,
    cfg: &TrainConfig,
    img: &Image,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let vit = &cfg.vit;
    // Draw order is fixed: SNR, then H, then the noise inside the chain map.
    let mu_db = sample_train_snr(cfg.snr, rng);
    let sigma_w2 = snr_to_sigma2(mu_db, vit.m);
    let h = sample_channel(rng, vit.m, cfg.sigma_h2);
    let ch = ChannelRealization::new(h, sigma_w2)?;
    let heat: Heatmap = match cfg.svd_mode {
        SvdMode::With => build_heatmap(&ch, vit.k, vit.l, cfg.sing_floor)?,
        SvdMode::Without => uncoded_heatmap(sigma_w2, vit.m, vit.k, vit.l)?,
    };
    let chain = MimoChainMap::new(&ch, vit.k, cfg.sing_floor, cfg.svd_mode, rng);

    let seq = patchify(img, vit.p)?;
    let mut g = Graph::new(ExecMode::Sequential);
    let bound = bind_params(&mut g, params);
    let s_in = g.leaf(&concat_heatmap(&seq, &heat));
    let enc = encoder_graph(&mut g, &bound, s_in, vit, cfg.ps)?;
    let received = g.affine(enc.x, Box::new(chain));
    let heat_id = g.leaf_data(heat.rows, heat.cols, heat.values().to_vec(), false);
    let out_seq = decoder_graph(&mut g, &bound, received, heat_id, vit)?;
    let loss = g.mse(out_seq, seq.data())?;
    let loss_val = g.scalar(loss);
    if !loss_val.is_finite() {
        // caller maps this to the abort path with step context
        return Err(TrainError::NonFiniteLoss { step: 0, seed: cfg.seed, checkpoint: None });
    }
    g.backward(loss)?;
    let grads = bound
        .flat
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(id).len()])
        })
        .collect();
    Ok((loss_val, grads))
}

/// One optimization step over a batch: per-image losses and gradients are
/// computed on independent RNG streams (parallelizable, merged by index),
/// averaged, and applied with a single Adam update. Returns the batch loss.
pub fn train_step(
    params: &mut ViTParams,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    images: &ImageSet,
    step: u64,
) -> Result<f64, TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut batch_rng = stream(cfg.seed, &[0xba7c4, step]);
    let indices: Vec<usize> = (0..cfg.batch_size).map(|_| batch_rng.gen_range(0..images.len())).collect();

    let results = map_indexed(cfg.exec, indices.len(), |slot| {
        let mut rng = stream(cfg.seed, &[0x117a9e, step, slot as u64]);
        image_pass(params, cfg, &images.images[indices[slot]], &mut rng)
    });

    let mut loss_sum = 0.0;
    let mut grad_sum: Option<Vec<Vec<f64>>> = None;
    for res in results {
        let (loss, grads) = res.map_err(|e| match e {
            TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { step, seed: cfg.seed, checkpoint: None },
            other => other,
        })?;
        loss_sum += loss;
        match grad_sum.as_mut() {
            None => grad_sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
    let scale = 1.0 / indices.len() as f64;
    let mut grads = grad_sum.expect("non-empty batch");
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > clip {
            let shrink = clip / norm;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= shrink;
                }
            }
        }
    }
    let mut tensors: Vec<&mut Tensor> = params.named_mut().into_iter().map(|(_, t)| t).collect();
    adam_step(&mut tensors, &grads, opt)?;
    Ok(loss_sum * scale)
}

/// Progress callback: (step, batch loss, current params).
pub type ProgressFn<'a> = &'a mut dyn FnMut(u64, f64, &ViTParams);

/// Runs steps `start_step..cfg.steps`, returning the per-step loss trace.
/// On a non-finite loss the current (pre-step) state is checkpointed next to
/// `cfg.checkpoint_path` and the error carries the offending step.
pub fn train_loop(
    params: &mut ViTParams,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    images: &ImageSet,
    start_step: u64,
    mut progress: Option<ProgressFn>,
) -> Result<Vec<f64>, TrainError> {
    let mut trace = Vec::new();
    for step in start_step..cfg.steps {
        match train_step(params, opt, cfg, images, step) {
            Ok(loss) => {
                trace.push(loss);
                if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                    if let Some(cb) = progress.as_mut() {
                        cb(step + 1, loss, params);
                    }
                }
            }
            Err(TrainError::NonFiniteLoss { step, seed, .. }) => {
                let ckpt = cfg.checkpoint_path.as_ref().map(|p| {
                    let mut abort = p.clone();
                    abort.set_extension("abort.ckpt");
                    abort
                });
                if let Some(path) = &ckpt {
                    // params are still the pre-step values here
                    let _ = save_checkpoint(path, params, opt, cfg.digest(), step, cfg.seed);
                }
                return Err(TrainError::NonFiniteLoss { step, seed, checkpoint: ckpt });
            }
            Err(other) => return Err(other),
        }
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {what}")]
    Corrupt { what: String },
    #[error("array {name}: shape {found:?} does not match config shape {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint is missing array {name}")]
    MissingArray { name: String },
}

/// Deserialized checkpoint contents.
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: u64,
    pub steps_done: u64,
    pub seed: u64,
    pub params: ViTParams,
    pub opt: AdamState,
}

fn put_f64_array(buf: &mut Vec<u8>, name: &str, dims: &[u64], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(0u8); // dtype f64
    buf.push(dims.len() as u8);
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_u64_array(buf: &mut Vec<u8>, name: &str, data: &[u64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(1u8); // dtype u64
    buf.push(1u8);
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes a versioned binary checkpoint atomically (temp file + rename).
pub fn save_checkpoint(
    path: &Path,
    params: &ViTParams,
    opt: &AdamState,
    config_digest: u64,
    steps_done: u64,
    seed: u64,
) -> Result<(), CheckpointError> {
    let named = params.named();
    let mut body = Vec::new();
    let n_arrays = named.len() * 3 + 3; // params + adam m/v + hyper + step + seed
    body.extend_from_slice(&(n_arrays as u32).to_le_bytes());
    for (i, (name, t)) in named.iter().enumerate() {
        let dims: Vec<u64> = t.shape().iter().map(|&d| d as u64).collect();
        put_f64_array(&mut body, name, &dims, t.data());
        let (m, v) = opt.moments(i);
        put_f64_array(&mut body, &format!("adam.m.{name}"), &[m.len() as u64], m);
        put_f64_array(&mut body, &format!("adam.v.{name}"), &[v.len() as u64], v);
    }
    put_f64_array(&mut body, "adam.hyper", &[4], &[opt.lr, opt.beta1, opt.beta2, opt.eps]);
    put_u64_array(&mut body, "adam.step", &[opt.step_count]);
    put_u64_array(&mut body, "train.seed", &[seed]);

    let mut file = Vec::with_capacity(body.len() + 32);
    file.extend_from_slice(CHECKPOINT_MAGIC);
    file.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    file.extend_from_slice(&config_digest.to_le_bytes());
    file.extend_from_slice(&steps_done.to_le_bytes());
    file.extend_from_slice(&body);

    let io_err = |source: std::io::Error| CheckpointError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&file).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt { what: format!("truncated while reading {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint into the parameter layout implied by `cfg`. Every
/// array is matched by name and shape; digest comparison is left to the
/// caller (the stored digest is returned).
pub fn load_checkpoint(path: &Path, cfg: &ViTConfig) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let config_digest = cur.u64("config digest")?;
    let steps_done = cur.u64("step count")?;
    let n_arrays = cur.u32("array count")? as usize;

    let mut f64_arrays: std::collections::HashMap<String, (Vec<u64>, Vec<f64>)> = std::collections::HashMap::new();
    let mut u64_arrays: std::collections::HashMap<String, Vec<u64>> = std::collections::HashMap::new();
    for _ in 0..n_arrays {
        let name_len = cur.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Corrupt { what: format!("implausible name length {name_len}") });
        }
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Corrupt { what: "array name is not utf8".into() })?;
        let dtype = cur.take(1, "dtype")?[0];
        let ndim = cur.take(1, "ndim")?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64("dims")?);
        }
        let count: u64 = dims.iter().product();
        match dtype {
            0 => {
                let raw = cur.take(count as usize * 8, &format!("data of {name}"))?;
                let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                f64_arrays.insert(name, (dims, vals));
            }
            1 => {
                let raw = cur.take(count as usize * 8, &format!("data of {name}"))?;
                let vals = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
                u64_arrays.insert(name, vals);
            }
            other => return Err(CheckpointError::Corrupt { what: format!("unknown dtype tag {other}") }),
        }
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Corrupt { what: format!("{} trailing bytes", bytes.len() - cur.pos) });
    }

    let mut params = ViTParams::init(cfg, 0);
    let hyper = f64_arrays
        .get("adam.hyper")
        .ok_or_else(|| CheckpointError::MissingArray { name: "adam.hyper".into() })?
        .1
        .clone();
    if hyper.len() != 4 {
        return Err(CheckpointError::Corrupt { what: "adam.hyper must have 4 entries".into() });
    }
    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamState::new(hyper[0], &sizes);
    opt.beta1 = hyper[1];
    opt.beta2 = hyper[2];
    opt.eps = hyper[3];
    opt.step_count = u64_arrays
        .get("adam.step")
        .and_then(|v| v.first().copied())
        .ok_or_else(|| CheckpointError::MissingArray { name: "adam.step".into() })?;
    let seed = u64_arrays
        .get("train.seed")
        .and_then(|v| v.first().copied())
        .ok_or_else(|| CheckpointError::MissingArray { name: "train.seed".into() })?;

    for (i, (name, t)) in params.named_mut().into_iter().enumerate() {
        let (dims, vals) = f64_arrays
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingArray { name: name.clone() })?;
        let found: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        if found != t.shape() {
            return Err(CheckpointError::ShapeMismatch { name, expected: t.shape().to_vec(), found });
        }
        t.data_mut().copy_from_slice(vals);
        for (tag, slot) in [("m", 0usize), ("v", 1)] {
            let key = format!("adam.{tag}.{name}");
            let (_, mv) = f64_arrays.get(&key).ok_or_else(|| CheckpointError::MissingArray { name: key.clone() })?;
            if mv.len() != t.numel() {
                return Err(CheckpointError::ShapeMismatch {
                    name: key,
                    expected: vec![t.numel()],
                    found: vec![mv.len()],
                });
            }
            let (m, v) = opt.moments_mut(i);
            if slot == 0 {
                m.copy_from_slice(mv);
            } else {
                v.copy_from_slice(mv);
            }
        }
    }

    Ok(Checkpoint { version, config_digest, steps_done, seed, params, opt })
}

/// Convenience: reads only the header of a checkpoint file.
pub fn read_checkpoint_header(path: &Path) -> Result<(u32, u64, u64), CheckpointError> {
    let mut f = std::fs::File::open(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let mut head = [0u8; 28];
    f.read_exact(&mut head)
        .map_err(|_| CheckpointError::Corrupt { what: "file shorter than header".into() })?;
    if &head[0..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let digest = u64::from_le_bytes(head[12..20].try_into().unwrap());
    let steps = u64::from_le_bytes(head[20..28].try_into().unwrap());
    Ok((version, digest, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synthetic_set, SyntheticKind};
    use crate::numerics::{grad_check, GradCheckSpec};
    use crate::vitcodec::AttnScale;

    fn toy_train_cfg(seed: u64, steps: u64, snr: SnrStrategy) -> TrainConfig {
        let vit = ViTConfig::new(4, 32, 2, 4, 2, 8, 8, 8, AttnScale::ModelDim).unwrap();
        TrainConfig {
            vit,
            ratio: Ratio::new(1, 24).unwrap(),
            snr,
            svd_mode: SvdMode::With,
            batch_size: 4,
            lr: 1e-3,
            steps,
            seed,
            ps: 1.0,
            sigma_h2: 1.0,
            sing_floor: crate::channel::DEFAULT_SING_FLOOR,
            eval_every: 0,
            grad_clip: None,
            checkpoint_path: None,
            exec: ExecMode::Sequential,
        }
    }

    #[test]
    fn ratio_parsing() {
        let r = Ratio::parse("1/24").unwrap();
        assert_eq!((r.num, r.den), (1, 24));
        assert_eq!(r.channel_uses(3 * 32 * 32), 128);
        assert_eq!(Ratio::parse("1/12").unwrap().channel_uses(3072), 256);
        assert_eq!(Ratio::parse("1/6").unwrap().channel_uses(3072), 512);
        assert!(Ratio::parse("0/5").is_err());
        assert!(Ratio::parse("abc").is_err());
        assert_eq!(Ratio::parse("0.5").unwrap().value(), 0.5);
    }

    #[test]
    fn snr_strategy_parsing() {
        assert_eq!(SnrStrategy::parse("fixed:5").unwrap(), SnrStrategy::Fixed(5.0));
        assert_eq!(SnrStrategy::parse("uniform:0:22").unwrap(), SnrStrategy::Uniform(0.0, 22.0));
        assert!(SnrStrategy::parse("uniform:22:0").is_err());
        assert!(SnrStrategy::parse("nope").is_err());
    }

    #[test]
    fn snr_sampling_statistics() {
        let mut rng = stream(1, &[1]);
        assert_eq!(sample_train_snr(SnrStrategy::Fixed(5.0), &mut rng), 5.0);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mu = sample_train_snr(SnrStrategy::Uniform(0.0, 22.0), &mut rng);
            assert!((0.0..22.0).contains(&mu));
            acc += mu;
        }
        let mean = acc / n as f64;
        assert!((mean - 11.0).abs() < 0.2, "mean {mean}");
    }

    #[test]
    fn mse_loss_values_and_gradient() {
        let a = Image::constant(4, 4, 0.0);
        let b = Image::constant(4, 4, 0.1);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!((mse_loss(&a, &b).unwrap() - 0.01).abs() < 1e-15);

        // graph gradient 2(pred-target)/n against tight finite differences
        let pred = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.7, 0.1, 0.0, -0.5]).unwrap();
        let err = grad_check(
            &[pred],
            |g, ids| g.mse(ids[0], &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5]),
            &GradCheckSpec { h: 1e-5, samples_per_param: 6, seed: 0 },
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn zero_lr_freezes_loss_trace() {
        let images = synthetic_set(SyntheticKind::Gradients, 8, 8, 8, 5);
        let mut cfg = toy_train_cfg(7, 5, SnrStrategy::Fixed(10.0));
        cfg.lr = 0.0;
        let mut params = ViTParams::init(&cfg.vit, 7);
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        let mut opt = AdamState::new(cfg.lr, &sizes);
        let trace = train_loop(&mut params, &mut opt, &cfg, &images, 0, None).unwrap();
        // params never move, but each step redraws channel/noise, so compare
        // against a second run instead of within the trace
        let mut params2 = ViTParams::init(&cfg.vit, 7);
        let mut opt2 = AdamState::new(cfg.lr, &sizes);
        let trace2 = train_loop(&mut params2, &mut opt2, &cfg, &images, 0, None).unwrap();
        assert_eq!(trace, trace2);
        assert_eq!(params.named()[0].1.data(), params2.named()[0].1.data());
    }

    #[test]
    fn fixed_seed_traces_are_bit_identical() {
        let images = synthetic_set(SyntheticKind::Gradients, 8, 8, 8, 6);
        let run = || {
            let cfg = toy_train_cfg(11, 4, SnrStrategy::Uniform(0.0, 22.0));
            let mut params = ViTParams::init(&cfg.vit, 11);
            let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
            let mut opt = AdamState::new(cfg.lr, &sizes);
            train_loop(&mut params, &mut opt, &cfg, &images, 0, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn parallel_and_sequential_steps_agree() {
        let images = synthetic_set(SyntheticKind::Gradients, 8, 8, 8, 8);
        let mut cfg = toy_train_cfg(13, 3, SnrStrategy::Fixed(10.0));
        let run = |cfg: &TrainConfig| {
            let mut params = ViTParams::init(&cfg.vit, 13);
            let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
            let mut opt = AdamState::new(cfg.lr, &sizes);
            let trace = train_loop(&mut params, &mut opt, cfg, &images, 0, None).unwrap();
            (trace, params.named()[0].1.data().to_vec())
        };
        let (trace_seq, w_seq) = run(&cfg);
        cfg.exec = ExecMode::Parallel;
        let (trace_par, w_par) = run(&cfg);
        assert!(trace_seq.iter().zip(&trace_par).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(w_seq.iter().zip(&w_par).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn toy_training_halves_noiseless_loss() {
        // spec-scale toy run: 64 images, 200 steps, effectively noiseless
        // channel via very high fixed SNR
        for seed in [1u64, 2, 3] {
            let images = synthetic_set(SyntheticKind::Gradients, 64, 8, 8, 100 + seed);
            let mut cfg = toy_train_cfg(seed, 200, SnrStrategy::Fixed(300.0));
            cfg.batch_size = 8;
            cfg.lr = 2e-3;
            let mut params = ViTParams::init(&cfg.vit, seed);
            let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
            let mut opt = AdamState::new(cfg.lr, &sizes);
            let trace = train_loop(&mut params, &mut opt, &cfg, &images, 0, None).unwrap();
            let initial = trace[0];
            let final_loss = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
            assert!(
                final_loss <= 0.5 * initial,
                "seed {seed}: initial {initial}, final {final_loss}"
            );
        }
    }

    #[test]
    fn non_finite_params_abort_with_step() {
        let images = synthetic_set(SyntheticKind::Gradients, 4, 8, 8, 9);
        let cfg = toy_train_cfg(15, 2, SnrStrategy::Fixed(10.0));
        let mut params = ViTParams::init(&cfg.vit, 15);
        params.encoder.w0.data_mut()[0] = f64::NAN;
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        let mut opt = AdamState::new(cfg.lr, &sizes);
        let err = train_loop(&mut params, &mut opt, &cfg, &images, 0, None).unwrap_err();
        // NaN weights surface as a non-finite activation or loss
        match err {
            TrainError::NonFiniteLoss { .. } | TrainError::Vit(VitError::NonFinite { .. }) => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = toy_train_cfg(21, 3, SnrStrategy::Fixed(10.0));
        let images = synthetic_set(SyntheticKind::Gradients, 4, 8, 8, 21);
        let mut params = ViTParams::init(&cfg.vit, 21);
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        let mut opt = AdamState::new(cfg.lr, &sizes);
        train_loop(&mut params, &mut opt, &cfg, &images, 0, None).unwrap();

        let dir = std::env::temp_dir().join(format!("mjscc-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        save_checkpoint(&path, &params, &opt, cfg.digest(), 3, cfg.seed).unwrap();
        let loaded = load_checkpoint(&path, &cfg.vit).unwrap();
        assert_eq!(loaded.config_digest, cfg.digest());
        assert_eq!(loaded.steps_done, 3);
        assert_eq!(loaded.opt, opt);
        for ((_, a), (_, b)) in params.named().iter().zip(loaded.params.named().iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_checkpoint_is_corrupt_error() {
        let cfg = toy_train_cfg(22, 1, SnrStrategy::Fixed(10.0));
        let params = ViTParams::init(&cfg.vit, 22);
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        let opt = AdamState::new(cfg.lr, &sizes);
        let dir = std::env::temp_dir().join(format!("mjscc-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        save_checkpoint(&path, &params, &opt, cfg.digest(), 1, cfg.seed).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path, &cfg.vit), Err(CheckpointError::Corrupt { .. })));

        // version bump
        let mut bad = bytes.clone();
        bad[8] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path, &cfg.vit), Err(CheckpointError::Version { .. })));

        // bad magic
        let mut bad2 = bytes.clone();
        bad2[0] = b'X';
        std::fs::write(&path, &bad2).unwrap();
        assert!(matches!(load_checkpoint(&path, &cfg.vit), Err(CheckpointError::BadMagic)));

        // shape mismatch against a different config
        std::fs::write(&path, &bytes).unwrap();
        let other_cfg = ViTConfig::new(4, 16, 2, 4, 2, 8, 8, 8, AttnScale::ModelDim).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &other_cfg),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn resume_reproduces_uninterrupted_trace() {
        let images = synthetic_set(SyntheticKind::Gradients, 8, 8, 8, 30);
        let cfg = toy_train_cfg(31, 8, SnrStrategy::Uniform(0.0, 22.0));

        // uninterrupted
        let mut p_full = ViTParams::init(&cfg.vit, 31);
        let sizes: Vec<usize> = p_full.named().iter().map(|(_, t)| t.numel()).collect();
        let mut o_full = AdamState::new(cfg.lr, &sizes);
        let full_trace = train_loop(&mut p_full, &mut o_full, &cfg, &images, 0, None).unwrap();

        // interrupted at step 4, checkpointed, resumed
        let mut p_half = ViTParams::init(&cfg.vit, 31);
        let mut o_half = AdamState::new(cfg.lr, &sizes);
        let mut cfg_half = cfg.clone();
        cfg_half.steps = 4;
        let mut trace = train_loop(&mut p_half, &mut o_half, &cfg_half, &images, 0, None).unwrap();
        let dir = std::env::temp_dir().join(format!("mjscc-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("resume.ckpt");
        save_checkpoint(&path, &p_half, &o_half, cfg.digest(), 4, cfg.seed).unwrap();

        let loaded = load_checkpoint(&path, &cfg.vit).unwrap();
        let mut p_res = loaded.params;
        let mut o_res = loaded.opt;
        let tail = train_loop(&mut p_res, &mut o_res, &cfg, &images, loaded.steps_done, None).unwrap();
        trace.extend(tail);

        assert_eq!(full_trace.len(), trace.len());
        assert!(full_trace.iter().zip(&trace).all(|(a, b)| a.to_bits() == b.to_bits()));
        for ((_, a), (_, b)) in p_full.named().iter().zip(p_res.named().iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn adam_touches_exactly_nonzero_grad_params() {
        // one step changes every parameter with nonzero gradient and no
        // parameter with zero gradient
        let mut a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_grad();
        let before_a = a.data().to_vec();
        let before_b = b.data().to_vec();
        let mut st = AdamState::new(0.01, &[2, 2]);
        adam_step(&mut [&mut a, &mut b], &[vec![0.5, 0.0], vec![0.0, 0.0]], &mut st).unwrap();
        assert_ne!(a.data()[0], before_a[0]);
        assert_eq!(a.data()[1], before_a[1]);
        assert_eq!(b.data(), &before_b[..]);
    }
}
