//! Fast invariant suite behind the `selfcheck` command: gradient checks,
//! SVD round trips, channel algebra, heatmap statistics, the water-filling
//! oracle, full-scale shape assertions, and a seeded golden forward value
//! that pins the numerics of the first verified build.

use num_complex::Complex64;
use rand::Rng;

use crate::baseline::{capacity, waterfill, PowerAllocation};
use crate::channel::{
    apply_channel, build_heatmap, equalize, precode, ChannelRealization, DEFAULT_SING_FLOOR,
};
use crate::datasets::{synthetic_set, SyntheticKind};
use crate::mimolin::{sample_channel, svd, CMatrix};
use crate::numerics::{adam_step, grad_check, AdamState, GradCheckSpec, Tensor};
use crate::rng::stream;
use crate::vitcodec::{encoder_forward, patchify, AttnScale, ViTConfig, ViTParams};

/// Outcome of one named invariant check.
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Failure detail: observed vs expected.
    pub detail: String,
    pub millis: u128,
}

type CheckFn = fn() -> Result<(), String>;

fn toy_cfg() -> ViTConfig {
    ViTConfig::new(4, 32, 2, 4, 2, 8, 8, 8, AttnScale::ModelDim).unwrap()
}

fn check_gelu() -> Result<(), String> {
    let cases = [(0.0, 0.0, 1e-12), (10.0, 10.0, 1e-6), (1.0, 0.841345, 1e-5)];
    for (x, expected, tol) in cases {
        let got = crate::numerics::gelu_scalar(x);
        if (got - expected).abs() > tol {
            return Err(format!("gelu({x}) observed {got}, expected {expected} ± {tol}"));
        }
    }
    Ok(())
}

fn check_softmax() -> Result<(), String> {
    use crate::numerics::Graph;
    use crate::par::ExecMode;
    let mut g = Graph::new(ExecMode::Sequential);
    let x = g.leaf_data(3, 3, vec![0.0, 0.0, 0.0, 0.0, 3f64.ln(), 0.0, 1000.0, 1001.0, 999.0], false);
    let y = g.softmax_rows(x);
    let v = g.value(y);
    for row in 0..3 {
        let sum: f64 = v[row * 3..(row + 1) * 3].iter().sum();
        if (sum - 1.0).abs() > 1e-6 || v.iter().any(|x| !x.is_finite()) {
            return Err(format!("row {row} sums to {sum}, expected 1 ± 1e-6"));
        }
    }
    if (v[0] - 1.0 / 3.0).abs() > 1e-12 {
        return Err(format!("uniform row observed {}, expected 1/3", v[0]));
    }
    Ok(())
}

fn check_layernorm() -> Result<(), String> {
    use crate::numerics::Graph;
    use crate::par::ExecMode;
    let mut g = Graph::new(ExecMode::Sequential);
    let mut rng = stream(17, &[0x11]);
    let data: Vec<f64> = (0..8 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let x = g.leaf_data(8, 16, data, false);
    let gain = g.leaf_data(1, 16, vec![1.0; 16], false);
    let bias = g.leaf_data(1, 16, vec![0.0; 16], false);
    let y = g.layer_norm(x, gain, bias, 1e-10).map_err(|e| e.to_string())?;
    let v = g.value(y);
    for row in 0..8 {
        let r = &v[row * 16..(row + 1) * 16];
        let mean = r.iter().sum::<f64>() / 16.0;
        let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0;
        if mean.abs() > 1e-6 {
            return Err(format!("row {row} mean {mean}, expected 0 ± 1e-6"));
        }
        if (var - 1.0).abs() > 1e-4 {
            return Err(format!("row {row} variance {var}, expected 1 ± 1e-4"));
        }
    }
    Ok(())
}

fn check_matmul() -> Result<(), String> {
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let c = crate::numerics::matmul(&a, &b).map_err(|e| e.to_string())?;
    if c.data() != [3.0, 7.0] {
        return Err(format!("observed {:?}, expected [3, 7]", c.data()));
    }
    Ok(())
}

fn check_grad_matmul() -> Result<(), String> {
    let mut rng = stream(23, &[0x5eed]);
    let a = Tensor::new(vec![4, 5], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let b = Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let err = grad_check(
        &[a, b],
        |g, ids| {
            let c = g.matmul(ids[0], ids[1])?;
            Ok(g.sum_all(c))
        },
        &GradCheckSpec::default(),
    )
    .map_err(|e| e.to_string())?;
    if err > 1e-4 {
        return Err(format!("max relative error {err}, expected ≤ 1e-4"));
    }
    Ok(())
}

fn check_grad_full_chain() -> Result<(), String> {
    use crate::channel::{MimoChainMap, SvdMode};
    use crate::vitcodec::{concat_heatmap, decoder_graph, encoder_graph};

    let cfg = toy_cfg();
    let params = ViTParams::init(&cfg, 42);
    let img = synthetic_set(SyntheticKind::Gradients, 1, 8, 8, 43).images.remove(0);
    let seq = patchify(&img, cfg.p).map_err(|e| e.to_string())?;
    let h = sample_channel(&mut stream(44, &[0]), cfg.m, 1.0);
    let ch = ChannelRealization::new(h, 0.25).map_err(|e| e.to_string())?;
    let heat = build_heatmap(&ch, cfg.k, cfg.l, DEFAULT_SING_FLOOR).map_err(|e| e.to_string())?;

    let tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let cfg2 = cfg.clone();
    let err = grad_check(
        &tensors,
        move |g, ids| {
            let bound = crate::vitcodec::rebind_params(g, ids, &cfg2);
            let s_in = g.leaf(&concat_heatmap(&seq, &heat));
            let nodes = encoder_graph(g, &bound, s_in, &cfg2, 1.0).map_err(crate::vitcodec::VitError::into_numerics)?;
            let chain = MimoChainMap::noiseless(&ch, cfg2.k, DEFAULT_SING_FLOOR, SvdMode::With);
            let received = g.affine(nodes.x, Box::new(chain));
            let heat_id = g.leaf_data(heat.rows, heat.cols, heat.values().to_vec(), false);
            let out = decoder_graph(g, &bound, received, heat_id, &cfg2).map_err(crate::vitcodec::VitError::into_numerics)?;
            g.mse(out, seq.data())
        },
        &GradCheckSpec { samples_per_param: 2, ..Default::default() },
    )
    .map_err(|e| e.to_string())?;
    if err > 1e-3 {
        return Err(format!("max relative error {err}, expected ≤ 1e-3"));
    }
    Ok(())
}

fn check_svd_roundtrip() -> Result<(), String> {
    for seed in 0..100 {
        let h = sample_channel(&mut stream(seed, &[0x5dd]), 2, 1.0);
        let f = svd(&h).map_err(|e| e.to_string())?;
        let recon = f.reconstruct().sub(&h).unwrap().frobenius_norm();
        let limit = 1e-10 * h.frobenius_norm().max(1.0);
        if recon > limit {
            return Err(format!("seed {seed}: reconstruction error {recon}, expected ≤ {limit}"));
        }
        if f.unitarity_defect() > 1e-10 {
            return Err(format!("seed {seed}: unitarity defect {}, expected ≤ 1e-10", f.unitarity_defect()));
        }
        if f.singular.windows(2).any(|w| w[0] < w[1]) {
            return Err(format!("seed {seed}: singular values not descending: {:?}", f.singular));
        }
    }
    Ok(())
}

fn check_svd_known() -> Result<(), String> {
    let f = svd(&CMatrix::identity(2)).map_err(|e| e.to_string())?;
    if (f.singular[0] - 1.0).abs() > 1e-12 || (f.singular[1] - 1.0).abs() > 1e-12 {
        return Err(format!("identity singular values {:?}, expected (1, 1)", f.singular));
    }
    let h = CMatrix::from_rows(&[
        vec![Complex64::new(0.0, 0.0), Complex64::new(2.0, 0.0)],
        vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
    ]);
    let f = svd(&h).map_err(|e| e.to_string())?;
    if (f.singular[0] - 2.0).abs() > 1e-12 || (f.singular[1] - 1.0).abs() > 1e-12 {
        return Err(format!("permuted diagonal singular values {:?}, expected (2, 1)", f.singular));
    }
    Ok(())
}

fn check_noiseless_roundtrip() -> Result<(), String> {
    for seed in 0..50 {
        let h = sample_channel(&mut stream(seed, &[0xa11]), 2, 1.0);
        let ch = ChannelRealization { sigma_w2: 1e-300, ..ChannelRealization::new(h, 1.0).unwrap() };
        let mut rng = stream(seed, &[0xa12]);
        let z: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = crate::channel::unpack_real(&z, 2, 8).unwrap();
        let xp = precode(&x, &ch.svd.v).unwrap();
        let y = ch.h.mul(&xp).unwrap();
        let xr = equalize(&y, &ch, DEFAULT_SING_FLOOR).unwrap();
        let err = xr.sub(&x).unwrap().frobenius_norm();
        if err > 1e-8 {
            return Err(format!("seed {seed}: round-trip error {err}, expected ≤ 1e-8"));
        }
    }
    Ok(())
}

fn check_power_constraint() -> Result<(), String> {
    let cfg = toy_cfg();
    let params = ViTParams::init(&cfg, 7);
    for seed in 0..10 {
        let img = synthetic_set(SyntheticKind::Noise, 1, 8, 8, 200 + seed).images.remove(0);
        let seq = patchify(&img, cfg.p).unwrap();
        let h = sample_channel(&mut stream(seed, &[0x9]), cfg.m, 1.0);
        let ch = ChannelRealization::new(h, 0.5).unwrap();
        let heat = build_heatmap(&ch, cfg.k, cfg.l, DEFAULT_SING_FLOOR).unwrap();
        let x = encoder_forward(&seq, &heat, &params, &cfg, 1.0).map_err(|e| e.to_string())?;
        let mean_power = x.frobenius_norm().powi(2) / (cfg.m * cfg.k) as f64;
        if (mean_power - 1.0).abs() > 1e-6 {
            return Err(format!("seed {seed}: mean symbol power {mean_power}, expected 1 ± 1e-6"));
        }
    }
    Ok(())
}

fn check_heatmap_variance() -> Result<(), String> {
    for seed in 0..2 {
        let h = sample_channel(&mut stream(500 + seed, &[0x1f]), 2, 1.0);
        let ch = ChannelRealization::new(h, 0.6).unwrap();
        let k = 4;
        let heat = build_heatmap(&ch, k, 4, DEFAULT_SING_FLOOR).unwrap();
        let x = CMatrix::zeros(2, k);
        let mut rng = stream(600 + seed, &[0x2f]);
        let draws = 25_000;
        let mut acc = [0.0f64; 2];
        for _ in 0..draws {
            let y = apply_channel(&x, &ch, &mut rng).unwrap();
            let xr = equalize(&y, &ch, DEFAULT_SING_FLOOR).unwrap();
            for i in 0..2 {
                for j in 0..k {
                    acc[i] += xr[(i, j)].re * xr[(i, j)].re;
                }
            }
        }
        for (i, total) in acc.iter().enumerate() {
            let var = total / (draws * k) as f64;
            let expected = heat.values()[i * 2 * k];
            let rel = (var - expected).abs() / expected;
            if rel > 0.02 {
                return Err(format!(
                    "seed {seed} row {i}: empirical variance {var}, heatmap {expected} (rel {rel:.4}, limit 0.02)"
                ));
            }
        }
    }
    Ok(())
}

fn check_waterfill_oracle() -> Result<(), String> {
    for seed in 0..100 {
        let h = sample_channel(&mut stream(seed, &[0x3f]), 2, 1.0);
        let f = svd(&h).unwrap();
        let sigma = 0.5;
        let alloc = waterfill(&f.singular, sigma, 2.0).map_err(|e| e.to_string())?;
        let c = capacity(&f.singular, &alloc, sigma);
        let mut brute = 0.0f64;
        let points = 10_000;
        for i in 0..=points {
            let p1 = 2.0 * i as f64 / points as f64;
            let a = PowerAllocation { weights: vec![p1.sqrt(), (2.0 - p1).sqrt()] };
            brute = brute.max(capacity(&f.singular, &a, sigma));
        }
        if c < brute - 1e-9 || (c - brute).abs() > 1e-3 {
            return Err(format!("seed {seed}: waterfill capacity {c}, grid oracle {brute}"));
        }
    }
    Ok(())
}

fn check_waterfill_kkt() -> Result<(), String> {
    for seed in 0..100 {
        let h = sample_channel(&mut stream(seed, &[0x4f]), 2, 1.0);
        let f = svd(&h).unwrap();
        let sigma = 0.8;
        let alloc = waterfill(&f.singular, sigma, 2.0).map_err(|e| e.to_string())?;
        let powers = alloc.powers();
        let spent: f64 = powers.iter().sum();
        if (spent - 2.0).abs() > 1e-9 {
            return Err(format!("seed {seed}: power spent {spent}, expected 2 ± 1e-9"));
        }
        let levels: Vec<f64> = powers
            .iter()
            .zip(&f.singular)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, s)| p + sigma / (s * s))
            .collect();
        for w in levels.windows(2) {
            if (w[0] - w[1]).abs() > 1e-9 {
                return Err(format!("seed {seed}: water levels differ: {levels:?}"));
            }
        }
    }
    Ok(())
}

fn check_adam_first_step() -> Result<(), String> {
    let mut p = Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap().with_grad();
    let before = p.data().to_vec();
    let mut st = AdamState::new(0.01, &[3]);
    adam_step(&mut [&mut p], &[vec![4.0, -0.003, 1e-6]], &mut st).map_err(|e| e.to_string())?;
    for (i, (w0, w1)) in before.iter().zip(p.data()).enumerate() {
        let step = (w1 - w0).abs();
        if step > 0.01 * (1.0 + 1e-6) {
            return Err(format!("coordinate {i}: step {step}, expected ≤ lr = 0.01"));
        }
    }
    Ok(())
}

fn check_reference_shapes() -> Result<(), String> {
    // 32×32×3 source, p=8 grid → 64×48 sequence; R ∈ {1/24, 1/12, 1/6} → k ∈
    // {128, 256, 512} and latent widths {8, 16, 32} with M=2, l=64.
    let img = crate::datasets::Image::constant(32, 32, 0.1);
    let seq = patchify(&img, 8).map_err(|e| e.to_string())?;
    if seq.shape() != [64, 48] {
        return Err(format!("patch sequence shape {:?}, expected [64, 48]", seq.shape()));
    }
    let n = 3 * 32 * 32;
    for (num, den, expect_k, expect_cols) in [(1u32, 24u32, 128usize, 8usize), (1, 12, 256, 16), (1, 6, 512, 32)] {
        let r = crate::trainer::Ratio::new(num, den).unwrap();
        let k = r.channel_uses(n);
        if k != expect_k {
            return Err(format!("R={num}/{den}: k = {k}, expected {expect_k}"));
        }
        let cfg = ViTConfig::new(8, 256, 8, 8, 2, k, 32, 32, AttnScale::ModelDim).map_err(|e| e.to_string())?;
        if cfg.seq_cols != expect_cols {
            return Err(format!("R={num}/{den}: latent width {}, expected {expect_cols}", cfg.seq_cols));
        }
    }
    Ok(())
}

/// Frozen outputs of a seeded toy encoder forward (first verified build).
/// Catches silent numeric drift that pointwise invariants miss, e.g. a
/// changed attention temperature.
const GOLDEN_X: [(usize, usize, f64, f64); 2] = [
    (0, 0, -0.5631746843154855, -0.8218661570887974),
    (1, 3, -0.6028874345227944, -0.9872373170035138),
];
const GOLDEN_FROB: f64 = 4.0;

fn check_golden_forward() -> Result<(), String> {
    let cfg = toy_cfg();
    let params = ViTParams::init(&cfg, 42);
    let img = synthetic_set(SyntheticKind::Gradients, 1, 8, 8, 43).images.remove(0);
    let seq = patchify(&img, cfg.p).unwrap();
    let h = sample_channel(&mut stream(44, &[0]), cfg.m, 1.0);
    let ch = ChannelRealization::new(h, 0.5).unwrap();
    let heat = build_heatmap(&ch, cfg.k, cfg.l, DEFAULT_SING_FLOOR).unwrap();
    let x = encoder_forward(&seq, &heat, &params, &cfg, 1.0).map_err(|e| e.to_string())?;
    for (i, j, re, im) in GOLDEN_X {
        let got = x[(i, j)];
        if (got.re - re).abs() > 1e-9 || (got.im - im).abs() > 1e-9 {
            return Err(format!("X[({i},{j})] observed {got}, expected {re}+{im}i ± 1e-9"));
        }
    }
    let frob = x.frobenius_norm();
    if (frob - GOLDEN_FROB).abs() > 1e-9 {
        return Err(format!("‖X‖_F observed {frob}, expected {GOLDEN_FROB} ± 1e-9"));
    }
    Ok(())
}

const CHECKS: &[(&str, CheckFn)] = &[
    ("gelu-values", check_gelu),
    ("softmax-row-sums", check_softmax),
    ("layernorm-statistics", check_layernorm),
    ("matmul-examples", check_matmul),
    ("grad-matmul-fd", check_grad_matmul),
    ("grad-full-chain-fd", check_grad_full_chain),
    ("svd-roundtrip-100", check_svd_roundtrip),
    ("svd-known-matrices", check_svd_known),
    ("noiseless-roundtrip", check_noiseless_roundtrip),
    ("power-constraint", check_power_constraint),
    ("heatmap-mc-variance", check_heatmap_variance),
    ("waterfill-grid-oracle", check_waterfill_oracle),
    ("waterfill-kkt", check_waterfill_kkt),
    ("adam-first-step", check_adam_first_step),
    ("reference-config-shapes", check_reference_shapes),
    ("golden-encoder-forward", check_golden_forward),
];

/// Runs every named check, timing each.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let start = std::time::Instant::now();
            let outcome = f();
            CheckResult {
                name,
                passed: outcome.is_ok(),
                detail: outcome.err().unwrap_or_default(),
                millis: start.elapsed().as_millis(),
            }
        })
        .collect()
}

pub fn n_checks() -> usize {
    CHECKS.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_at_least_ten_named_checks() {
        assert!(n_checks() >= 10, "only {} checks", n_checks());
    }

    #[test]
    fn fresh_build_passes_every_check() {
        for r in run_all() {
            assert!(r.passed, "{} failed: {}", r.name, r.detail);
        }
    }

    #[test]
    fn golden_catches_attention_scale_fault() {
        // same weights, flipped attention temperature: invariants like the
        // power constraint still hold, but the golden forward must differ
        let mut cfg = toy_cfg();
        cfg.attn_scale = AttnScale::HeadDim;
        let params = ViTParams::init(&cfg, 42);
        let img = synthetic_set(SyntheticKind::Gradients, 1, 8, 8, 43).images.remove(0);
        let seq = patchify(&img, cfg.p).unwrap();
        let h = sample_channel(&mut stream(44, &[0]), cfg.m, 1.0);
        let ch = ChannelRealization::new(h, 0.5).unwrap();
        let heat = build_heatmap(&ch, cfg.k, cfg.l, DEFAULT_SING_FLOOR).unwrap();
        let x = encoder_forward(&seq, &heat, &params, &cfg, 1.0).unwrap();
        // power constraint still satisfied under the fault
        let mean_power = x.frobenius_norm().powi(2) / (cfg.m * cfg.k) as f64;
        assert!((mean_power - 1.0).abs() < 1e-6);
        // but the frozen entries move
        let (i, j, re, im) = GOLDEN_X[0];
        let drift = (x[(i, j)].re - re).abs() + (x[(i, j)].im - im).abs();
        assert!(drift > 1e-6, "fault not visible in golden values (drift {drift})");
    }
}
