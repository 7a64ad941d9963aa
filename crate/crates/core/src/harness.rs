//! Evaluation and experiment sweeps: the PSNR metric, SNR/bandwidth grids,
//! ablation comparisons, and result emission as CSV/JSON plus per-scheme
//! series files for plotting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{separation_transmit, BaselineError, CodecAdapter};
use crate::channel::{
    apply_channel, build_heatmap, equalize, precode, snr_to_sigma2, uncoded_heatmap, ChannelError,
    ChannelRealization, SvdMode,
};
use crate::datasets::{Image, ImageSet};
use crate::mimolin::sample_channel;
use crate::par::{map_indexed, ExecMode};
use crate::rng::stream;
use crate::trainer::{load_checkpoint, CheckpointError, Ratio, TrainError};
use crate::vitcodec::{decoder_forward, encoder_forward, patchify, ViTConfig, ViTParams, VitError};

/// Sentinel for a zero-MSE reconstruction; any computed PSNR is capped here.
pub const PSNR_SATURATED_DB: f64 = 200.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("psnr: image shapes differ ({0}x{1} vs {2}x{3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("sweep: missing checkpoints: {0:?}")]
    MissingCheckpoints(Vec<PathBuf>),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Peak signal-to-noise ratio in dB with peak 1.0 (images live in [0,1]).
pub fn psnr(reference: &Image, reconstruction: &Image) -> Result<f64, HarnessError> {
    if reference.h != reconstruction.h || reference.w != reconstruction.w {
        return Err(HarnessError::ShapeMismatch(
            reference.h,
            reference.w,
            reconstruction.h,
            reconstruction.w,
        ));
    }
    let n = reference.data().len() as f64;
    let mse: f64 = reference
        .data()
        .iter()
        .zip(reconstruction.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_SATURATED_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_SATURATED_DB))
}

/// One grid cell's worth of evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub scheme: String,
    #[serde(rename = "R")]
    pub ratio: String,
    pub snr_test_db: f64,
    pub psnr_mean_db: f64,
    pub psnr_std_db: f64,
    pub n_images: usize,
    pub n_draws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub mu_db: f64,
    pub draws_per_image: usize,
    pub seed: u64,
    pub svd_mode: SvdMode,
    pub sigma_h2: f64,
    pub ps: f64,
    pub sing_floor: f64,
    pub exec: ExecMode,
}

impl EvalSettings {
    pub fn new(mu_db: f64, seed: u64) -> Self {
        EvalSettings {
            mu_db,
            draws_per_image: 1,
            seed,
            svd_mode: SvdMode::With,
            sigma_h2: 1.0,
            ps: 1.0,
            sing_floor: crate::channel::DEFAULT_SING_FLOOR,
            exec: ExecMode::default(),
        }
    }
}

/// Full-chain reconstruction of one image under one independent channel
/// draw. H is redrawn per call from `rng` (block fading).
pub fn transmit_once<R: rand::Rng>(
    img: &Image,
    params: &ViTParams,
    vit: &ViTConfig,
    set: &EvalSettings,
    rng: &mut R,
) -> Result<Image, HarnessError> {
    let sigma_w2 = snr_to_sigma2(set.mu_db, vit.m);
    let h = sample_channel(rng, vit.m, set.sigma_h2);
    let ch = ChannelRealization::new(h, sigma_w2)?;
    let seq = patchify(img, vit.p)?;
    match set.svd_mode {
        SvdMode::With => {
            let heat = build_heatmap(&ch, vit.k, vit.l, set.sing_floor)?;
            let x = encoder_forward(&seq, &heat, params, vit, set.ps)?;
            let xp = precode(&x, &ch.svd.v)?;
            let y = apply_channel(&xp, &ch, rng)?;
            let xr = equalize(&y, &ch, set.sing_floor)?;
            Ok(decoder_forward(&xr, &heat, params, vit)?)
        }
        SvdMode::Without => {
            let heat = uncoded_heatmap(sigma_w2, vit.m, vit.k, vit.l)?;
            let x = encoder_forward(&seq, &heat, params, vit, set.ps)?;
            let y = apply_channel(&x, &ch, rng)?;
            Ok(decoder_forward(&y, &heat, params, vit)?)
        }
    }
}

/// Per-(image, draw) PSNR samples, index-ordered and independent of the
/// execution mode.
pub fn evaluate_samples(
    params: &ViTParams,
    vit: &ViTConfig,
    images: &ImageSet,
    set: &EvalSettings,
) -> Result<Vec<f64>, HarnessError> {
    let n = images.len() * set.draws_per_image;
    let results = map_indexed(set.exec, n, |idx| {
        let img_idx = idx / set.draws_per_image;
        let draw = idx % set.draws_per_image;
        let mut rng = stream(set.seed, &[0xe7a1, img_idx as u64, draw as u64]);
        let img = &images.images[img_idx];
        transmit_once(img, params, vit, set, &mut rng).and_then(|out| psnr(img, &out))
    });
    results.into_iter().collect()
}

/// Mean/std PSNR over every image and channel draw.
pub fn evaluate(
    params: &ViTParams,
    vit: &ViTConfig,
    images: &ImageSet,
    set: &EvalSettings,
    scheme: &str,
    ratio: Ratio,
) -> Result<EvalRecord, HarnessError> {
    let samples = evaluate_samples(params, vit, images, set)?;
    let (mean, std) = mean_std(&samples);
    Ok(EvalRecord {
        scheme: scheme.to_string(),
        ratio: ratio.to_string(),
        snr_test_db: set.mu_db,
        psnr_mean_db: mean,
        psnr_std_db: std,
        n_images: images.len(),
        n_draws: set.draws_per_image,
        seed: set.seed,
    })
}

/// Separation-baseline record over the same grid interface.
pub fn evaluate_separation(
    images: &ImageSet,
    m: usize,
    k: usize,
    codec: &mut dyn CodecAdapter,
    set: &EvalSettings,
    ratio: Ratio,
) -> Result<EvalRecord, HarnessError> {
    let sigma_w2 = snr_to_sigma2(set.mu_db, m);
    let mut samples = Vec::with_capacity(images.len() * set.draws_per_image);
    for (i, img) in images.images.iter().enumerate() {
        for draw in 0..set.draws_per_image {
            let mut rng = stream(set.seed, &[0x5e9a, i as u64, draw as u64]);
            let h = sample_channel(&mut rng, m, set.sigma_h2);
            let ch = ChannelRealization::new(h, sigma_w2)?;
            let (out, _info) = separation_transmit(img, &ch, k, set.ps, codec)?;
            samples.push(psnr(img, &out)?);
        }
    }
    let (mean, std) = mean_std(&samples);
    Ok(EvalRecord {
        scheme: "separation".to_string(),
        ratio: ratio.to_string(),
        snr_test_db: set.mu_db,
        psnr_mean_db: mean,
        psnr_std_db: std,
        n_images: images.len(),
        n_draws: set.draws_per_image,
        seed: set.seed,
    })
}

pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Canonical checkpoint file name for a grid cell. Fixed-SNR models are per
/// (R, μ); universal models are per R; the separation scheme has none.
pub fn checkpoint_name(scheme: &str, ratio: Ratio, mu_db: Option<f64>) -> Option<String> {
    let r = format!("R{}-{}", ratio.num, ratio.den);
    match (scheme, mu_db) {
        ("separation", _) => None,
        ("vit", Some(mu)) => Some(format!("vit_{r}_snr{}.ckpt", format_mu(mu))),
        ("vit-universal", _) => Some(format!("vit-universal_{r}.ckpt")),
        ("vit-universal-no-svd", _) => Some(format!("vit-universal-no-svd_{r}.ckpt")),
        _ => None,
    }
}

fn format_mu(mu: f64) -> String {
    if (mu - mu.round()).abs() < 1e-9 {
        format!("{}", mu.round() as i64)
    } else {
        format!("{mu:.2}").replace('.', "p")
    }
}

#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub schemes: Vec<String>,
    pub ratios: Vec<Ratio>,
    pub mus: Vec<f64>,
    pub checkpoint_dir: PathBuf,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub records: Vec<EvalRecord>,
    pub missing: Vec<PathBuf>,
}

/// Evaluates every (scheme, R, μ) cell of the grid. Missing checkpoints are
/// collected rather than fatal; the caller decides the exit status.
pub fn run_sweep(
    grid: &SweepGrid,
    images: &ImageSet,
    base: &EvalSettings,
    vit_for_ratio: &dyn Fn(Ratio) -> Result<ViTConfig, VitError>,
    codec: &mut dyn CodecAdapter,
) -> Result<SweepOutcome, HarnessError> {
    let mut records = Vec::new();
    let mut missing = Vec::new();
    for scheme in &grid.schemes {
        for &ratio in &grid.ratios {
            let vit = vit_for_ratio(ratio)?;
            for &mu in &grid.mus {
                let mut set = *base;
                set.mu_db = mu;
                if scheme == "separation" {
                    records.push(evaluate_separation(images, vit.m, vit.k, codec, &set, ratio)?);
                    continue;
                }
                set.svd_mode = if scheme == "vit-universal-no-svd" { SvdMode::Without } else { SvdMode::With };
                let name = checkpoint_name(scheme, ratio, Some(mu))
                    .expect("learned schemes have checkpoint names");
                let path = grid.checkpoint_dir.join(name);
                if !path.exists() {
                    missing.push(path);
                    continue;
                }
                let ckpt = load_checkpoint(&path, &vit)?;
                records.push(evaluate(&ckpt.params, &vit, images, &set, scheme, ratio)?);
            }
        }
    }
    Ok(SweepOutcome { records, missing })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str = "scheme,R,snr_test_db,psnr_mean_db,psnr_std_db,n_images,n_draws,seed";

/// Fixed-schema CSV; float formatting is pinned so identical records yield
/// identical bytes.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{:.2},{:.6},{:.6},{},{},{}\n",
            r.scheme, r.ratio, r.snr_test_db, r.psnr_mean_db, r.psnr_std_db, r.n_images, r.n_draws, r.seed
        ));
    }
    out
}

pub fn write_csv(path: &Path, records: &[EvalRecord]) -> Result<(), HarnessError> {
    std::fs::write(path, records_to_csv(records))
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

/// JSON mirror of the CSV rows.
pub fn write_json(path: &Path, records: &[EvalRecord]) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Serialize)]
struct Series<'a> {
    scheme: &'a str,
    #[serde(rename = "R")]
    ratio: &'a str,
    points: Vec<(f64, f64)>,
}

/// Plot-data file: one (μ, PSNR) series per (scheme, R), sorted.
pub fn write_series(path: &Path, records: &[EvalRecord]) -> Result<(), HarnessError> {
    let mut keys: Vec<(String, String)> = records.iter().map(|r| (r.scheme.clone(), r.ratio.clone())).collect();
    keys.sort();
    keys.dedup();
    let series: Vec<Series> = keys
        .iter()
        .map(|(scheme, ratio)| {
            let mut points: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| &r.scheme == scheme && &r.ratio == ratio)
                .map(|r| (r.snr_test_db, r.psnr_mean_db))
                .collect();
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            Series { scheme, ratio, points }
        })
        .collect();
    let text = serde_json::to_string_pretty(&series).expect("series serialize");
    std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}
