//! Flat key-value config files with `[section]` headers, resolved against
//! documented defaults. Resolution is total: every effective key, default or
//! not, lands in the resolved map that the run manifest records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mimo_jscc::channel::SvdMode;
use mimo_jscc::datasets::{load_raw_batch, synthetic_set, ImageSet, SyntheticKind};
use mimo_jscc::par::ExecMode;
use mimo_jscc::trainer::{Ratio, SnrStrategy, TrainConfig};
use mimo_jscc::vitcodec::{AttnScale, ViTConfig};

/// Config or usage problem; maps to exit code 2 with the offending field.
#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error at `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

/// Parsed key-value store, keys namespaced `section.key`.
#[derive(Debug, Default, Clone)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                err(&format!("{source}:{}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            values.insert(full, value.trim().to_string());
        }
        Ok(KvConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(&path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }
}

/// One resolved value plus the fully-resolved map for the manifest.
pub struct Resolver<'a> {
    cfg: &'a KvConfig,
    pub resolved: BTreeMap<String, String>,
}

impl<'a> Resolver<'a> {
    pub fn new(cfg: &'a KvConfig) -> Self {
        Resolver { cfg, resolved: BTreeMap::new() }
    }

    pub fn str(&mut self, key: &str, default: &str) -> String {
        let v = self.cfg.get(key).unwrap_or(default).to_string();
        self.resolved.insert(key.to_string(), v.clone());
        v
    }

    pub fn parse<T: std::str::FromStr>(&mut self, key: &str, default: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(key, default);
        raw.parse::<T>().map_err(|e| err(key, format!("cannot parse `{raw}`: {e}")))
    }
}

/// Everything a training run needs, resolved.
pub struct TrainSpec {
    pub train: TrainConfig,
    pub dataset: String,
    pub name: String,
    pub resolved: BTreeMap<String, String>,
}

/// (p, d, layers, heads, m, h, w, attention scale)
pub type ModelDims = (usize, usize, usize, usize, usize, usize, usize, AttnScale);

pub fn resolve_model(r: &mut Resolver) -> Result<ModelDims, ConfigError> {
    let p: usize = r.parse("model.p", "8")?;
    let d: usize = r.parse("model.d", "256")?;
    let layers: usize = r.parse("model.layers", "8")?;
    let heads: usize = r.parse("model.heads", "8")?;
    let m: usize = r.parse("model.m", "2")?;
    let h: usize = r.parse("model.h", "32")?;
    let w: usize = r.parse("model.w", "32")?;
    let attn = match r.str("model.attn_scale", "model_dim").as_str() {
        "model_dim" => AttnScale::ModelDim,
        "head_dim" => AttnScale::HeadDim,
        other => return Err(err("model.attn_scale", format!("expected model_dim or head_dim, got `{other}`"))),
    };
    Ok((p, d, layers, heads, m, h, w, attn))
}

pub fn resolve_train(cfg: &KvConfig, sequential: bool) -> Result<TrainSpec, ConfigError> {
    let mut r = Resolver::new(cfg);
    let (p, d, layers, heads, m, h, w, attn) = resolve_model(&mut r)?;

    let ratio_text = r.str("train.R", "1/24");
    let ratio = Ratio::parse(&ratio_text).map_err(|e| err("train.R", e.to_string()))?;
    let k = ratio.channel_uses(3 * h * w);
    r.resolved.insert("model.k".into(), k.to_string());
    let vit = ViTConfig::new(p, d, layers, heads, m, k, h, w, attn).map_err(|e| err("model", e.to_string()))?;

    let snr_text = r.str("train.snr", "uniform:0:22");
    let snr = SnrStrategy::parse(&snr_text).map_err(|e| err("train.snr", e.to_string()))?;
    let svd_mode = match r.str("train.svd", "with").as_str() {
        "with" => SvdMode::With,
        "without" => SvdMode::Without,
        other => return Err(err("train.svd", format!("expected with or without, got `{other}`"))),
    };
    let batch_size: usize = r.parse("train.batch_size", "8")?;
    let lr: f64 = r.parse("train.lr", "5e-5")?;
    let steps: u64 = r.parse("train.steps", "1000")?;
    let seed: u64 = r.parse("train.seed", "0")?;
    let ps: f64 = r.parse("train.ps", "1.0")?;
    let sigma_h2: f64 = r.parse("train.sigma_h2", "1.0")?;
    let sing_floor: f64 = r.parse("train.sing_floor", "1e-6")?;
    let eval_every: u64 = r.parse("train.eval_every", "100")?;
    let grad_clip_text = r.str("train.grad_clip", "none");
    let grad_clip = match grad_clip_text.as_str() {
        "none" => None,
        text => Some(text.parse::<f64>().map_err(|e| err("train.grad_clip", format!("cannot parse `{text}`: {e}")))?),
    };
    if batch_size == 0 {
        return Err(err("train.batch_size", "must be positive"));
    }

    let dataset = r.str("data.dataset", "synthetic:gradients:64x8x8:seed7");
    let name = r.str("run.name", "train");
    let exec = if sequential { ExecMode::Sequential } else { ExecMode::default() };
    r.resolved.insert("run.sequential".into(), sequential.to_string());

    Ok(TrainSpec {
        train: TrainConfig {
            vit,
            ratio,
            snr,
            svd_mode,
            batch_size,
            lr,
            steps,
            seed,
            ps,
            sigma_h2,
            sing_floor,
            eval_every,
            grad_clip,
            checkpoint_path: None,
            exec,
        },
        dataset,
        name,
        resolved: r.resolved,
    })
}

/// `synthetic:<kind>:<n>x<h>x<w>:seed<s>` or `raw:<path>`; checkers takes a
/// cell size suffix, e.g. `synthetic:checkers4:...`.
pub fn load_dataset(spec: &str) -> Result<ImageSet, ConfigError> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["synthetic", kind, dims, seed] => {
            let dim_parts: Vec<&str> = dims.split('x').collect();
            if dim_parts.len() != 3 {
                return Err(err("data.dataset", format!("expected <n>x<h>x<w>, got `{dims}`")));
            }
            let n: usize = dim_parts[0].parse().map_err(|_| err("data.dataset", "bad image count"))?;
            let h: usize = dim_parts[1].parse().map_err(|_| err("data.dataset", "bad height"))?;
            let w: usize = dim_parts[2].parse().map_err(|_| err("data.dataset", "bad width"))?;
            let seed: u64 = seed
                .strip_prefix("seed")
                .unwrap_or(seed)
                .parse()
                .map_err(|_| err("data.dataset", "bad seed"))?;
            let kind = if *kind == "gradients" {
                SyntheticKind::Gradients
            } else if *kind == "noise" {
                SyntheticKind::Noise
            } else if let Some(cell) = kind.strip_prefix("checkers") {
                let cell: usize = if cell.is_empty() { 4 } else { cell.parse().map_err(|_| err("data.dataset", "bad checkers cell"))? };
                SyntheticKind::Checkers { cell }
            } else {
                return Err(err("data.dataset", format!("unknown synthetic kind `{kind}`")));
            };
            Ok(synthetic_set(kind, n, h, w, seed))
        }
        ["raw", path] => load_raw_batch(Path::new(path)).map_err(|e| err("data.dataset", e.to_string())),
        _ => Err(err(
            "data.dataset",
            format!("expected synthetic:<kind>:<n>x<h>x<w>:seed<s> or raw:<path>, got `{spec}`"),
        )),
    }
}

/// Output root: --out flag, else MIMO_JSCC_OUT, else ./runs.
pub fn output_root(flag: Option<&PathBuf>) -> PathBuf {
    flag.cloned()
        .or_else(|| std::env::var_os("MIMO_JSCC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Comma-separated f64 list.
pub fn parse_f64_list(field: &str, text: &str) -> Result<Vec<f64>, ConfigError> {
    let vals: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let vals = vals.map_err(|e| err(field, format!("cannot parse `{text}`: {e}")))?;
    if vals.is_empty() {
        return Err(err(field, "list is empty"));
    }
    Ok(vals)
}
