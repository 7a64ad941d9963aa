//! Command-line driver: train, eval, sweep, ablate, baseline, selfcheck.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{load_dataset, output_root, parse_f64_list, resolve_model, resolve_train, ConfigError, KvConfig, Resolver};
use manifest::RunManifest;
use mimo_jscc::baseline::{read_ppm, write_ppm, CodecAdapter, MockCodec, SubprocessCodec};
use mimo_jscc::channel::SvdMode;
use mimo_jscc::harness::{
    evaluate, evaluate_samples, evaluate_separation, mean_std, run_sweep, write_csv, write_json, write_series,
    EvalSettings, SweepGrid,
};
use mimo_jscc::numerics::AdamState;
use mimo_jscc::par::ExecMode;
use mimo_jscc::trainer::{load_checkpoint, save_checkpoint, train_loop, Ratio, TrainError};
use mimo_jscc::vitcodec::{ViTConfig, ViTParams};

#[derive(Parser)]
#[command(name = "mimo-jscc", version, about = "Image transmission over MIMO fading channels: learned transceiver and separation baseline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a transceiver pair and write a checkpoint plus manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a list of test SNRs.
    Eval(EvalArgs),
    /// Evaluate a (scheme, R, SNR) grid from checkpoints on disk.
    Sweep(GridArgs),
    /// Paired with/without-precoding comparison over a grid.
    Ablate(GridArgs),
    /// Separation baseline over a list of test SNRs.
    Baseline(BaselineArgs),
    /// Run the fast invariant suite.
    Selfcheck,
    /// Quantization codec over the subprocess contract: encode.
    #[command(hide = true)]
    CodecEncode { input: PathBuf, quality: u32, output: PathBuf },
    /// Quantization codec over the subprocess contract: decode.
    #[command(hide = true)]
    CodecDecode { input: PathBuf, output: PathBuf },
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (flat key = value with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $MIMO_JSCC_OUT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force single-threaded execution.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// fixed:<db> or uniform:<lo>:<hi>
    #[arg(long)]
    snr: Option<String>,
    /// Bandwidth ratio, e.g. 1/24.
    #[arg(long, short = 'R')]
    ratio: Option<String>,
    /// with | without (precoding/equalization path)
    #[arg(long)]
    svd: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Run name (checkpoint/manifest file stem).
    #[arg(long)]
    name: Option<String>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated test SNRs in dB.
    #[arg(long, default_value = "1,5,10,15,19")]
    snrs: String,
    #[arg(long, default_value_t = 1)]
    draws: usize,
    #[arg(long, default_value = "vit")]
    scheme: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, short = 'R')]
    ratio: Option<String>,
    #[arg(long)]
    svd: Option<String>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated schemes (sweep only; ablate fixes the pair).
    #[arg(long)]
    schemes: Option<String>,
    /// Comma-separated bandwidth ratios, e.g. 1/24,1/12.
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    snrs: Option<String>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "1,5,10,15,19")]
    snrs: String,
    #[arg(long, short = 'R')]
    ratio: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    draws: usize,
    /// mock | subprocess
    #[arg(long, default_value = "mock")]
    codec: String,
    #[arg(long)]
    codec_enc: Option<PathBuf>,
    #[arg(long)]
    codec_dec: Option<PathBuf>,
    /// quality search range for the subprocess codec
    #[arg(long, default_value = "1:8")]
    quality_range: String,
}

enum CliFailure {
    Config(String),
    Numeric(String),
    MissingArtifact(String),
    Io(String),
}

impl CliFailure {
    fn exit(&self) -> ExitCode {
        match self {
            CliFailure::Config(_) => ExitCode::from(2),
            CliFailure::Numeric(_) => ExitCode::from(3),
            CliFailure::MissingArtifact(_) => ExitCode::from(4),
            CliFailure::Io(_) => ExitCode::from(1),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliFailure::Config(m) | CliFailure::Numeric(m) | CliFailure::MissingArtifact(m) | CliFailure::Io(m) => m,
        }
    }
}

impl From<ConfigError> for CliFailure {
    fn from(e: ConfigError) -> Self {
        CliFailure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_grid(args, false),
        Command::Ablate(args) => cmd_grid(args, true),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Selfcheck => cmd_selfcheck(),
        Command::CodecEncode { input, quality, output } => cmd_codec_encode(&input, quality, &output),
        Command::CodecDecode { input, output } => cmd_codec_decode(&input, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit()
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<KvConfig, CliFailure> {
    match &common.config {
        Some(path) => Ok(KvConfig::load(path)?),
        None => Ok(KvConfig::default()),
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn cmd_train(args: TrainArgs) -> Result<(), CliFailure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(v) = args.steps {
        cfg.set("train.steps", v.to_string());
    }
    if let Some(v) = args.lr {
        cfg.set("train.lr", v.to_string());
    }
    if let Some(v) = args.batch_size {
        cfg.set("train.batch_size", v.to_string());
    }
    if let Some(v) = args.seed {
        cfg.set("train.seed", v.to_string());
    }
    if let Some(v) = &args.snr {
        cfg.set("train.snr", v);
    }
    if let Some(v) = &args.ratio {
        cfg.set("train.R", v);
    }
    if let Some(v) = &args.svd {
        cfg.set("train.svd", v);
    }
    if let Some(v) = &args.dataset {
        cfg.set("data.dataset", v);
    }
    if let Some(v) = args.eval_every {
        cfg.set("train.eval_every", v.to_string());
    }
    if let Some(v) = &args.name {
        cfg.set("run.name", v);
    }

    let mut spec = resolve_train(&cfg, args.common.sequential)?;
    let images = load_dataset(&spec.dataset)?;
    if images.is_empty() {
        return Err(CliFailure::Config("dataset is empty".into()));
    }

    let out_dir = output_root(args.common.out.as_ref());
    std::fs::create_dir_all(&out_dir).map_err(|e| CliFailure::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let ckpt_path = out_dir.join(format!("{}.ckpt", spec.name));
    let manifest_path = out_dir.join(format!("{}.manifest.json", spec.name));
    spec.train.checkpoint_path = Some(ckpt_path.clone());

    let mut manifest = RunManifest::start(command_line(), spec.resolved.clone(), vec![spec.train.seed]);

    let (mut params, mut opt, start_step) = match &args.resume {
        None => {
            let params = ViTParams::init(&spec.train.vit, spec.train.seed);
            let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
            let opt = AdamState::new(spec.train.lr, &sizes);
            (params, opt, 0)
        }
        Some(path) => {
            if !path.exists() {
                return Err(CliFailure::MissingArtifact(format!("checkpoint {} not found", path.display())));
            }
            let ckpt = load_checkpoint(path, &spec.train.vit)
                .map_err(|e| CliFailure::Numeric(format!("cannot load checkpoint: {e}")))?;
            if ckpt.config_digest != spec.train.digest() {
                return Err(CliFailure::Config(format!(
                    "checkpoint config digest {:016x} does not match resolved config {:016x}",
                    ckpt.config_digest,
                    spec.train.digest()
                )));
            }
            println!("resuming from step {}", ckpt.steps_done);
            (ckpt.params, ckpt.opt, ckpt.steps_done)
        }
    };

    let vit = spec.train.vit.clone();
    let eval_seed = spec.train.seed ^ 0x5eed;
    let eval_images = mimo_jscc::datasets::ImageSet {
        images: images.images.iter().take(8).cloned().collect(),
        source: images.source.clone(),
        checksum: 0,
    };
    let mut progress = |step: u64, loss: f64, params: &ViTParams| {
        let mut set = EvalSettings::new(10.0, eval_seed);
        set.exec = ExecMode::Sequential;
        match evaluate_samples(params, &vit, &eval_images, &set) {
            Ok(samples) => {
                let (mean, _) = mean_std(&samples);
                println!("step {step} loss {loss:.6} eval_psnr_db {mean:.2}");
            }
            Err(e) => println!("step {step} loss {loss:.6} eval_error {e}"),
        }
    };

    let outcome = train_loop(&mut params, &mut opt, &spec.train, &images, start_step, Some(&mut progress));
    match outcome {
        Ok(trace) => {
            if let Some(last) = trace.last() {
                println!("final step {} loss {last:.6}", spec.train.steps);
            }
            save_checkpoint(&ckpt_path, &params, &opt, spec.train.digest(), spec.train.steps, spec.train.seed)
                .map_err(|e| CliFailure::Io(e.to_string()))?;
            manifest.add_output(&ckpt_path);
            manifest.finish(&manifest_path).map_err(|e| CliFailure::Io(e.to_string()))?;
            println!("checkpoint {}", ckpt_path.display());
            println!("manifest {}", manifest_path.display());
            Ok(())
        }
        Err(TrainError::NonFiniteLoss { step, seed, checkpoint }) => {
            let mut msg = format!("non-finite loss at step {step} (seed {seed})");
            if let Some(p) = checkpoint {
                msg.push_str(&format!("; pre-step state saved to {}", p.display()));
            }
            Err(CliFailure::Numeric(msg))
        }
        Err(e) => Err(CliFailure::Numeric(e.to_string())),
    }
}

fn resolve_eval_settings(args: &EvalArgs, cfg: &KvConfig) -> Result<(ViTConfig, Ratio, BTreeMap<String, String>), CliFailure> {
    let mut cfg = cfg.clone();
    if let Some(v) = &args.ratio {
        cfg.set("train.R", v);
    }
    let mut r = Resolver::new(&cfg);
    let (p, d, layers, heads, m, h, w, attn) = resolve_model(&mut r)?;
    let ratio_text = r.str("train.R", "1/24");
    let ratio = Ratio::parse(&ratio_text).map_err(|e| CliFailure::Config(e.to_string()))?;
    let k = ratio.channel_uses(3 * h * w);
    let vit = ViTConfig::new(p, d, layers, heads, m, k, h, w, attn)
        .map_err(|e| CliFailure::Config(e.to_string()))?;
    Ok((vit, ratio, r.resolved))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliFailure> {
    let cfg = load_config(&args.common)?;
    let (vit, ratio, mut resolved) = resolve_eval_settings(&args, &cfg)?;
    if !args.checkpoint.exists() {
        return Err(CliFailure::MissingArtifact(format!("checkpoint {} not found", args.checkpoint.display())));
    }
    let ckpt = load_checkpoint(&args.checkpoint, &vit)
        .map_err(|e| CliFailure::Numeric(format!("cannot load checkpoint: {e}")))?;

    let dataset_spec = args
        .dataset
        .clone()
        .or_else(|| cfg.get("data.dataset").map(String::from))
        .unwrap_or_else(|| "synthetic:gradients:64x8x8:seed7".into());
    let images = load_dataset(&dataset_spec)?;
    let snrs = parse_f64_list("snrs", &args.snrs)?;
    let seed = args.seed.unwrap_or(0);
    let svd_mode = match args.svd.as_deref().unwrap_or("with") {
        "with" => SvdMode::With,
        "without" => SvdMode::Without,
        other => return Err(CliFailure::Config(format!("--svd expects with or without, got `{other}`"))),
    };
    resolved.insert("eval.dataset".into(), dataset_spec);
    resolved.insert("eval.snrs".into(), args.snrs.clone());
    resolved.insert("eval.draws".into(), args.draws.to_string());
    resolved.insert("eval.seed".into(), seed.to_string());
    resolved.insert("eval.scheme".into(), args.scheme.clone());

    let mut records = Vec::new();
    for &mu in &snrs {
        let mut set = EvalSettings::new(mu, seed);
        set.draws_per_image = args.draws;
        set.svd_mode = svd_mode;
        if args.common.sequential {
            set.exec = ExecMode::Sequential;
        }
        let rec = evaluate(&ckpt.params, &vit, &images, &set, &args.scheme, ratio)
            .map_err(|e| CliFailure::Numeric(e.to_string()))?;
        println!(
            "scheme {} R {} snr {:.1} dB: psnr {:.2} ± {:.2} dB",
            rec.scheme, rec.ratio, rec.snr_test_db, rec.psnr_mean_db, rec.psnr_std_db
        );
        records.push(rec);
    }

    let out_dir = output_root(args.common.out.as_ref());
    std::fs::create_dir_all(&out_dir).map_err(|e| CliFailure::Io(e.to_string()))?;
    let csv = out_dir.join("eval.csv");
    let json = out_dir.join("eval.json");
    write_csv(&csv, &records).map_err(|e| CliFailure::Io(e.to_string()))?;
    write_json(&json, &records).map_err(|e| CliFailure::Io(e.to_string()))?;
    let mut manifest = RunManifest::start(command_line(), resolved, vec![seed]);
    manifest.add_output(&csv);
    manifest.add_output(&json);
    manifest
        .finish(&out_dir.join("eval.manifest.json"))
        .map_err(|e| CliFailure::Io(e.to_string()))?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_grid(args: GridArgs, ablate: bool) -> Result<(), CliFailure> {
    let cfg = load_config(&args.common)?;
    let mut r = Resolver::new(&cfg);
    let (p, d, layers, heads, m, h, w, attn) = resolve_model(&mut r)?;

    let schemes: Vec<String> = if ablate {
        vec!["vit-universal".into(), "vit-universal-no-svd".into()]
    } else {
        let text = args
            .schemes
            .clone()
            .or_else(|| cfg.get("sweep.schemes").map(String::from))
            .unwrap_or_default();
        text.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    };
    let ratio_text = args
        .ratios
        .clone()
        .or_else(|| cfg.get("sweep.ratios").map(String::from))
        .unwrap_or_default();
    let ratios: Result<Vec<Ratio>, _> = ratio_text
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(Ratio::parse)
        .collect();
    let ratios = ratios.map_err(|e| CliFailure::Config(e.to_string()))?;
    let snr_text = args
        .snrs
        .clone()
        .or_else(|| cfg.get("sweep.snrs").map(String::from))
        .unwrap_or_default();
    let mus = if snr_text.trim().is_empty() { Vec::new() } else { parse_f64_list("snrs", &snr_text)? };

    if schemes.is_empty() || ratios.is_empty() || mus.is_empty() {
        return Err(CliFailure::Config(
            "empty grid: need at least one scheme, one ratio, and one snr".into(),
        ));
    }

    let checkpoint_dir = args
        .checkpoint_dir
        .clone()
        .or_else(|| cfg.get("sweep.checkpoint_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let dataset_spec = args
        .dataset
        .clone()
        .or_else(|| cfg.get("data.dataset").map(String::from))
        .unwrap_or_else(|| "synthetic:gradients:64x8x8:seed7".into());
    let images = load_dataset(&dataset_spec)?;
    let seed = args.seed.unwrap_or(0);

    let mut set = EvalSettings::new(0.0, seed);
    set.draws_per_image = args.draws.unwrap_or(1);
    if args.common.sequential {
        set.exec = ExecMode::Sequential;
    }

    let grid = SweepGrid { schemes: schemes.clone(), ratios: ratios.clone(), mus: mus.clone(), checkpoint_dir };
    let mut codec = MockCodec;
    let outcome = run_sweep(
        &grid,
        &images,
        &set,
        &|ratio| ViTConfig::new(p, d, layers, heads, m, ratio.channel_uses(3 * h * w), h, w, attn),
        &mut codec,
    )
    .map_err(|e| CliFailure::Numeric(e.to_string()))?;

    let out_dir = output_root(args.common.out.as_ref());
    std::fs::create_dir_all(&out_dir).map_err(|e| CliFailure::Io(e.to_string()))?;
    let stem = if ablate { "ablate" } else { "sweep" };
    let csv = out_dir.join(format!("{stem}.csv"));
    write_csv(&csv, &outcome.records).map_err(|e| CliFailure::Io(e.to_string()))?;
    write_json(&out_dir.join(format!("{stem}.json")), &outcome.records).map_err(|e| CliFailure::Io(e.to_string()))?;
    write_series(&out_dir.join(format!("{stem}.series.json")), &outcome.records)
        .map_err(|e| CliFailure::Io(e.to_string()))?;

    let mut resolved = r.resolved;
    resolved.insert("sweep.schemes".into(), schemes.join(","));
    resolved.insert(
        "sweep.ratios".into(),
        ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","),
    );
    resolved.insert(
        "sweep.snrs".into(),
        mus.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
    );
    resolved.insert("sweep.dataset".into(), dataset_spec);
    let mut manifest = RunManifest::start(command_line(), resolved, vec![seed]);
    manifest.add_output(&csv);
    manifest
        .finish(&out_dir.join(format!("{stem}.manifest.json")))
        .map_err(|e| CliFailure::Io(e.to_string()))?;

    for rec in &outcome.records {
        println!(
            "{},{},{:.1},{:.2}",
            rec.scheme, rec.ratio, rec.snr_test_db, rec.psnr_mean_db
        );
    }
    println!("wrote {}", csv.display());

    if !outcome.missing.is_empty() {
        for path in &outcome.missing {
            eprintln!("missing checkpoint: {}", path.display());
        }
        return Err(CliFailure::MissingArtifact(format!(
            "{} grid cell(s) skipped for missing checkpoints",
            outcome.missing.len()
        )));
    }
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<(), CliFailure> {
    let cfg = load_config(&args.common)?;
    let mut r = Resolver::new(&cfg);
    let (_p, _d, _layers, _heads, m, h, w, _attn) = resolve_model(&mut r)?;
    let ratio_text = args.ratio.clone().unwrap_or_else(|| r.str("train.R", "1/24"));
    let ratio = Ratio::parse(&ratio_text).map_err(|e| CliFailure::Config(e.to_string()))?;
    let k = ratio.channel_uses(3 * h * w);

    let dataset_spec = args
        .dataset
        .clone()
        .or_else(|| cfg.get("data.dataset").map(String::from))
        .unwrap_or_else(|| "synthetic:gradients:64x8x8:seed7".into());
    let images = load_dataset(&dataset_spec)?;
    let snrs = parse_f64_list("snrs", &args.snrs)?;
    let seed = args.seed.unwrap_or(0);

    let mut codec: Box<dyn CodecAdapter> = match args.codec.as_str() {
        "mock" => Box::new(MockCodec),
        "subprocess" => {
            let enc = args.codec_enc.clone().ok_or_else(|| CliFailure::Config("--codec-enc required for subprocess codec".into()))?;
            let dec = args.codec_dec.clone().ok_or_else(|| CliFailure::Config("--codec-dec required for subprocess codec".into()))?;
            for path in [&enc, &dec] {
                if !path.exists() {
                    return Err(CliFailure::MissingArtifact(format!("codec binary {} not found", path.display())));
                }
            }
            let (lo, hi) = args
                .quality_range
                .split_once(':')
                .and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<u32>().ok()?)))
                .ok_or_else(|| CliFailure::Config(format!("bad --quality-range `{}`", args.quality_range)))?;
            Box::new(SubprocessCodec::new(enc, dec, lo, hi).map_err(|e| CliFailure::Io(e.to_string()))?)
        }
        other => return Err(CliFailure::Config(format!("--codec expects mock or subprocess, got `{other}`"))),
    };

    let mut records = Vec::new();
    for &mu in &snrs {
        let mut set = EvalSettings::new(mu, seed);
        set.draws_per_image = args.draws;
        let rec = evaluate_separation(&images, m, k, codec.as_mut(), &set, ratio)
            .map_err(|e| CliFailure::Numeric(e.to_string()))?;
        println!(
            "separation R {} snr {:.1} dB: psnr {:.2} ± {:.2} dB",
            rec.ratio, rec.snr_test_db, rec.psnr_mean_db, rec.psnr_std_db
        );
        records.push(rec);
    }

    let out_dir = output_root(args.common.out.as_ref());
    std::fs::create_dir_all(&out_dir).map_err(|e| CliFailure::Io(e.to_string()))?;
    let csv = out_dir.join("baseline.csv");
    write_csv(&csv, &records).map_err(|e| CliFailure::Io(e.to_string()))?;
    write_json(&out_dir.join("baseline.json"), &records).map_err(|e| CliFailure::Io(e.to_string()))?;
    let mut resolved = r.resolved;
    resolved.insert("baseline.snrs".into(), args.snrs.clone());
    resolved.insert("baseline.dataset".into(), dataset_spec);
    resolved.insert("baseline.codec".into(), args.codec.clone());
    resolved.insert("baseline.R".into(), ratio.to_string());
    let mut manifest = RunManifest::start(command_line(), resolved, vec![seed]);
    manifest.add_output(&csv);
    manifest
        .finish(&out_dir.join("baseline.manifest.json"))
        .map_err(|e| CliFailure::Io(e.to_string()))?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_selfcheck() -> Result<(), CliFailure> {
    let started = std::time::Instant::now();
    let results = mimo_jscc::selfcheck::run_all();
    let mut failed = 0usize;
    for r in &results {
        if r.passed {
            println!("[PASS] {} ({} ms)", r.name, r.millis);
        } else {
            failed += 1;
            println!("[FAIL] {} ({} ms): {}", r.name, r.millis, r.detail);
        }
    }
    println!(
        "selfcheck: {} checks, {} passed, {} failed in {:.1} s",
        results.len(),
        results.len() - failed,
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliFailure::Numeric(format!("{failed} selfcheck(s) failed")));
    }
    Ok(())
}

fn cmd_codec_encode(input: &PathBuf, quality: u32, output: &PathBuf) -> Result<(), CliFailure> {
    let bytes = std::fs::read(input).map_err(|e| CliFailure::Io(format!("{}: {e}", input.display())))?;
    let img = read_ppm(&bytes).map_err(|e| CliFailure::Config(e.to_string()))?;
    let q = quality.clamp(1, 8) as usize;
    // budget sized exactly for q bits per value
    let budget = 9 + (img.h * img.w * 3 * q).div_ceil(8);
    let mut codec = MockCodec;
    let encoded = codec.encode(&img, budget).map_err(|e| CliFailure::Numeric(e.to_string()))?;
    std::fs::write(output, encoded).map_err(|e| CliFailure::Io(e.to_string()))?;
    Ok(())
}

fn cmd_codec_decode(input: &PathBuf, output: &PathBuf) -> Result<(), CliFailure> {
    let bytes = std::fs::read(input).map_err(|e| CliFailure::Io(format!("{}: {e}", input.display())))?;
    let mut codec = MockCodec;
    let img = codec.decode(&bytes).map_err(|e| CliFailure::Numeric(e.to_string()))?;
    std::fs::write(output, write_ppm(&img)).map_err(|e| CliFailure::Io(e.to_string()))?;
    Ok(())
}
