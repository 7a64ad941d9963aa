//! Separation benchmark: water-filling power allocation over the SVD
//! subchannels, the resulting capacity bit budget, and a source-codec
//! adapter that spends it. Transport at capacity is assumed error-free, so
//! the benchmark upper-bounds any practical separate design.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::Command;

use thiserror::Error;

use crate::channel::ChannelRealization;
use crate::datasets::Image;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("degenerate channel: every subchannel gain is zero")]
    DegenerateChannel,
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("byte budget {budget} is below the codec minimum {min}")]
    BudgetTooSmall { budget: usize, min: usize },
    #[error("malformed codec payload: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("codec subprocess {cmd} failed with status {status}: {stderr}")]
    Subprocess { cmd: String, status: i32, stderr: String },
}

/// Diagonal power weights λ_i (amplitudes; powers are λ_i²).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    pub weights: Vec<f64>,
}

impl PowerAllocation {
    pub fn powers(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w * w).collect()
    }
}

/// Water-filling over parallel subchannels with gains s_i²/σ_w²: powers
/// λ_i² = max(0, ν − σ_w²/s_i²) with the water level ν chosen so the total
/// power budget is spent exactly.
pub fn waterfill(singular: &[f64], sigma_w2: f64, p_total: f64) -> Result<PowerAllocation, BaselineError> {
    assert!(p_total > 0.0 && sigma_w2 > 0.0);
    let m = singular.len();
    let inv_gain: Vec<f64> = singular
        .iter()
        .map(|&s| if s > 0.0 { sigma_w2 / (s * s) } else { f64::INFINITY })
        .collect();
    let usable = inv_gain.iter().filter(|v| v.is_finite()).count();
    if usable == 0 {
        return Err(BaselineError::DegenerateChannel);
    }
    // singular values are descending, so inverse gains ascend: candidate
    // active sets are prefixes.
    let mut weights = vec![0.0; m];
    for active in (1..=usable).rev() {
        let level = (p_total + inv_gain[..active].iter().sum::<f64>()) / active as f64;
        if level > inv_gain[active - 1] {
            for i in 0..active {
                weights[i] = (level - inv_gain[i]).sqrt();
            }
            return Ok(PowerAllocation { weights });
        }
    }
    unreachable!("active = 1 always admits a positive water level");
}

/// Capacity in bits per channel use: Σ log2(1 + λ_i² s_i² / σ_w²).
pub fn capacity(singular: &[f64], alloc: &PowerAllocation, sigma_w2: f64) -> f64 {
    singular
        .iter()
        .zip(&alloc.weights)
        .map(|(&s, &w)| (1.0 + w * w * s * s / sigma_w2).log2())
        .sum()
}

// ---------------------------------------------------------------------------
// Codec adapters
// ---------------------------------------------------------------------------

/// Byte-budgeted image codec. `encode` must never exceed the budget and must
/// not be called with a budget below `min_bytes`.
pub trait CodecAdapter {
    /// Smallest payload this codec can produce for an h×w image.
    fn min_bytes(&self, h: usize, w: usize) -> usize;
    fn encode(&mut self, img: &Image, byte_budget: usize) -> Result<Vec<u8>, CodecError>;
    fn decode(&mut self, bytes: &[u8]) -> Result<Image, CodecError>;
    /// Zero-information reconstruction used when the budget is below
    /// `min_bytes`.
    fn minimum_reconstruction(&self, h: usize, w: usize) -> Image {
        Image::constant(h, w, 0.5)
    }
}

const MOCK_MAGIC: &[u8; 4] = b"MQC1";
const MOCK_HEADER: usize = 9;

/// Built-in quantization codec: keeps the top q bits of every pixel value,
/// with q chosen as large as the budget allows. Distortion is monotone
/// non-increasing in the budget.
#[derive(Debug, Default, Clone)]
pub struct MockCodec;

impl MockCodec {
    fn payload_bytes(h: usize, w: usize, q: usize) -> usize {
        MOCK_HEADER + (h * w * 3 * q).div_ceil(8)
    }
}

impl CodecAdapter for MockCodec {
    fn min_bytes(&self, h: usize, w: usize) -> usize {
        Self::payload_bytes(h, w, 1)
    }

    fn encode(&mut self, img: &Image, byte_budget: usize) -> Result<Vec<u8>, CodecError> {
        let (h, w) = (img.h, img.w);
        let q = (1..=8usize)
            .rev()
            .find(|&q| Self::payload_bytes(h, w, q) <= byte_budget)
            .ok_or(CodecError::BudgetTooSmall { budget: byte_budget, min: self.min_bytes(h, w) })?;
        let mut out = Vec::with_capacity(Self::payload_bytes(h, w, q));
        out.extend_from_slice(MOCK_MAGIC);
        out.extend_from_slice(&(h as u16).to_le_bytes());
        out.extend_from_slice(&(w as u16).to_le_bytes());
        out.push(q as u8);
        let levels = (1u32 << q) - 1;
        let mut acc: u32 = 0;
        let mut nbits = 0usize;
        for &v in img.data() {
            let code = (v.clamp(0.0, 1.0) * levels as f64).round() as u32;
            acc = (acc << q) | code;
            nbits += q;
            while nbits >= 8 {
                out.push((acc >> (nbits - 8)) as u8);
                nbits -= 8;
            }
        }
        if nbits > 0 {
            out.push(((acc << (8 - nbits)) & 0xff) as u8);
        }
        debug_assert!(out.len() <= byte_budget);
        Ok(out)
    }

    fn decode(&mut self, bytes: &[u8]) -> Result<Image, CodecError> {
        if bytes.len() < MOCK_HEADER || &bytes[..4] != MOCK_MAGIC {
            return Err(CodecError::Malformed("missing mock codec header".into()));
        }
        let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let q = bytes[8] as usize;
        if !(1..=8).contains(&q) {
            return Err(CodecError::Malformed(format!("bad bit depth {q}")));
        }
        let n = h * w * 3;
        let need = (n * q).div_ceil(8);
        if bytes.len() < MOCK_HEADER + need {
            return Err(CodecError::Malformed("payload shorter than declared".into()));
        }
        let levels = ((1u32 << q) - 1) as f64;
        let payload = &bytes[MOCK_HEADER..];
        let mut data = Vec::with_capacity(n);
        let mut acc: u32 = 0;
        let mut nbits = 0usize;
        let mut byte_idx = 0usize;
        for _ in 0..n {
            while nbits < q {
                acc = (acc << 8) | payload[byte_idx] as u32;
                byte_idx += 1;
                nbits += 8;
            }
            let code = (acc >> (nbits - q)) & ((1 << q) - 1);
            nbits -= q;
            data.push(code as f64 / levels);
        }
        Ok(Image::new(h, w, data))
    }
}

// ---------------------------------------------------------------------------
// PPM exchange format
// ---------------------------------------------------------------------------

/// Binary P6 PPM with 8-bit samples.
pub fn write_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    for &v in img.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}

pub fn read_ppm(bytes: &[u8]) -> Result<Image, CodecError> {
    let mut pos = 0usize;
    let mut token = || -> Result<String, CodecError> {
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
            return Err(CodecError::Malformed("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(CodecError::Malformed("not a P6 ppm".into()));
    }
    let w: usize = token()?.parse().map_err(|_| CodecError::Malformed("bad width".into()))?;
    let h: usize = token()?.parse().map_err(|_| CodecError::Malformed("bad height".into()))?;
    let maxval: usize = token()?.parse().map_err(|_| CodecError::Malformed("bad maxval".into()))?;
    if maxval != 255 {
        return Err(CodecError::Malformed(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let n = h * w * 3;
    if bytes.len() < pos + n {
        return Err(CodecError::Malformed("truncated ppm payload".into()));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::new(h, w, data))
}

/// External codec driven over a subprocess boundary. The encoder binary is
/// invoked as `enc <input.ppm> <quality> <output>`, the decoder as
/// `dec <input> <output.ppm>`; raw images are exchanged as 8-bit PPM.
pub struct SubprocessCodec {
    pub encoder_cmd: PathBuf,
    pub decoder_cmd: PathBuf,
    pub quality_min: u32,
    pub quality_max: u32,
    workdir: PathBuf,
    calls: u64,
}

impl SubprocessCodec {
    pub fn new(encoder_cmd: PathBuf, decoder_cmd: PathBuf, quality_min: u32, quality_max: u32) -> std::io::Result<Self> {
        let workdir = std::env::temp_dir().join(format!("mjscc-codec-{}", std::process::id()));
        std::fs::create_dir_all(&workdir)?;
        Ok(SubprocessCodec { encoder_cmd, decoder_cmd, quality_min, quality_max, workdir, calls: 0 })
    }

    fn run(cmd: &PathBuf, args: &[&str]) -> Result<(), CodecError> {
        let out = Command::new(cmd).args(args).output()?;
        if !out.status.success() {
            return Err(CodecError::Subprocess {
                cmd: cmd.display().to_string(),
                status: out.status.code().unwrap_or(-1),
                stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
            });
        }
        Ok(())
    }

    fn encode_at(&mut self, img: &Image, quality: u32) -> Result<Vec<u8>, CodecError> {
        self.calls += 1;
        let input = self.workdir.join(format!("in-{}.ppm", self.calls));
        let output = self.workdir.join(format!("enc-{}.bin", self.calls));
        std::fs::File::create(&input)?.write_all(&write_ppm(img))?;
        let q = quality.to_string();
        Self::run(
            &self.encoder_cmd.clone(),
            &[input.to_str().unwrap(), &q, output.to_str().unwrap()],
        )?;
        let bytes = std::fs::read(&output)?;
        let _ = std::fs::remove_file(&input);
        let _ = std::fs::remove_file(&output);
        Ok(bytes)
    }
}

impl CodecAdapter for SubprocessCodec {
    fn min_bytes(&self, _h: usize, _w: usize) -> usize {
        // unknown a priori; separation_transmit probes via encode
        1
    }

    /// Binary search over the quality integer (at most 12 probes) for the
    /// largest output not exceeding the budget.
    fn encode(&mut self, img: &Image, byte_budget: usize) -> Result<Vec<u8>, CodecError> {
        let (mut lo, mut hi) = (self.quality_min, self.quality_max);
        let mut best: Option<Vec<u8>> = None;
        for _ in 0..12 {
            if lo > hi {
                break;
            }
            let mid = lo + (hi - lo) / 2;
            let bytes = self.encode_at(img, mid)?;
            if bytes.len() <= byte_budget {
                best = Some(bytes);
                if mid == hi {
                    break;
                }
                lo = mid + 1;
            } else {
                if mid == lo {
                    break;
                }
                hi = mid - 1;
            }
        }
        best.ok_or(CodecError::BudgetTooSmall { budget: byte_budget, min: 0 })
    }

    fn decode(&mut self, bytes: &[u8]) -> Result<Image, CodecError> {
        self.calls += 1;
        let input = self.workdir.join(format!("dec-{}.bin", self.calls));
        let output = self.workdir.join(format!("out-{}.ppm", self.calls));
        std::fs::write(&input, bytes)?;
        Self::run(&self.decoder_cmd.clone(), &[input.to_str().unwrap(), output.to_str().unwrap()])?;
        let ppm = std::fs::read(&output)?;
        let _ = std::fs::remove_file(&input);
        let _ = std::fs::remove_file(&output);
        read_ppm(&ppm)
    }
}

// ---------------------------------------------------------------------------
// Separation pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationInfo {
    pub capacity_bits_per_use: f64,
    pub bit_budget: u64,
    pub byte_budget: usize,
    pub bytes_used: usize,
    /// Budget fell below the codec minimum; reconstruction carries no
    /// source information.
    pub below_minimum: bool,
}

/// Source → capacity-budgeted codec → reconstruction for one channel
/// realization. Transport is idealized: the budget floor(k·C) bits is
/// delivered error-free.
pub fn separation_transmit(
    img: &Image,
    ch: &ChannelRealization,
    k: usize,
    ps: f64,
    codec: &mut dyn CodecAdapter,
) -> Result<(Image, SeparationInfo), BaselineError> {
    let p_total = ch.m as f64 * ps;
    let alloc = waterfill(&ch.svd.singular, ch.sigma_w2, p_total)?;
    let cap = capacity(&ch.svd.singular, &alloc, ch.sigma_w2);
    let bit_budget = (k as f64 * cap).floor() as u64;
    let byte_budget = (bit_budget / 8) as usize;
    let min = codec.min_bytes(img.h, img.w);
    if byte_budget < min {
        let info = SeparationInfo {
            capacity_bits_per_use: cap,
            bit_budget,
            byte_budget,
            bytes_used: 0,
            below_minimum: true,
        };
        return Ok((codec.minimum_reconstruction(img.h, img.w), info));
    }
    let encoded = codec.encode(img, byte_budget)?;
    assert!(encoded.len() <= byte_budget, "codec exceeded its budget");
    let decoded = codec.decode(&encoded)?;
    let info = SeparationInfo {
        capacity_bits_per_use: cap,
        bit_budget,
        byte_budget,
        bytes_used: encoded.len(),
        below_minimum: false,
    };
    Ok((decoded, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::snr_to_sigma2;
    use crate::datasets::{synthetic_set, SyntheticKind};
    use crate::mimolin::sample_channel;
    use crate::rng::stream;
    use proptest::{prop_assert, proptest};

    #[test]
    fn waterfill_symmetric_channels() {
        let alloc = waterfill(&[1.0, 1.0], 1.0, 2.0).unwrap();
        let p = alloc.powers();
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn waterfill_dead_subchannel_gets_nothing() {
        let alloc = waterfill(&[1.0, 0.0], 1.0, 2.0).unwrap();
        let p = alloc.powers();
        assert!((p[0] - 2.0).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
        assert!(matches!(waterfill(&[0.0, 0.0], 1.0, 2.0), Err(BaselineError::DegenerateChannel)));
    }

    fn grid_search_capacity(s: &[f64], sigma_w2: f64, p_total: f64, points: usize) -> f64 {
        // 2-subchannel brute force over the power split
        let mut best = 0.0f64;
        for i in 0..=points {
            let p1 = p_total * i as f64 / points as f64;
            let p2 = p_total - p1;
            let alloc = PowerAllocation { weights: vec![p1.sqrt(), p2.sqrt()] };
            best = best.max(capacity(s, &alloc, sigma_w2));
        }
        best
    }

    #[test]
    fn waterfill_matches_grid_search() {
        let alloc = waterfill(&[2.0, 0.5], 1.0, 2.0).unwrap();
        let c = capacity(&[2.0, 0.5], &alloc, 1.0);
        let brute = grid_search_capacity(&[2.0, 0.5], 1.0, 2.0, 10_000);
        assert!(c >= brute - 1e-9, "waterfill {c} below grid {brute}");
        assert!((c - brute).abs() <= 1e-3, "gap {}", (c - brute).abs());
    }

    #[test]
    fn capacity_known_values() {
        let alloc = PowerAllocation { weights: vec![1.0, 1.0] };
        assert!((capacity(&[1.0, 1.0], &alloc, 1.0) - 2.0).abs() < 1e-12);
        let zero = PowerAllocation { weights: vec![0.0, 0.0] };
        assert_eq!(capacity(&[1.0, 1.0], &zero, 1.0), 0.0);
    }

    #[test]
    fn waterfill_beats_equal_allocation() {
        for seed in 0..100 {
            let h = sample_channel(&mut stream(seed, &[0xa110c]), 2, 1.0);
            let f = crate::mimolin::svd(&h).unwrap();
            let sigma = 0.5;
            let alloc = waterfill(&f.singular, sigma, 2.0).unwrap();
            let equal = PowerAllocation { weights: vec![1.0, 1.0] };
            let cw = capacity(&f.singular, &alloc, sigma);
            let ce = capacity(&f.singular, &equal, sigma);
            assert!(cw >= ce - 1e-12, "seed {seed}: {cw} < {ce}");
        }
    }

    #[test]
    fn waterfill_kkt_conditions() {
        for seed in 0..100 {
            let h = sample_channel(&mut stream(seed, &[0x22f1]), 2, 1.0);
            let f = crate::mimolin::svd(&h).unwrap();
            let sigma = 0.7;
            let p_total = 2.0;
            let alloc = waterfill(&f.singular, sigma, p_total).unwrap();
            let powers = alloc.powers();
            // power conservation
            let spent: f64 = powers.iter().sum();
            assert!((spent - p_total).abs() < 1e-9, "seed {seed}: spent {spent}");
            // active subchannels share the water level; inactive sit above it
            let levels: Vec<f64> = powers
                .iter()
                .zip(&f.singular)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, s)| p + sigma / (s * s))
                .collect();
            for w in levels.windows(2) {
                assert!((w[0] - w[1]).abs() < 1e-9, "seed {seed}: levels {levels:?}");
            }
            let level = levels[0];
            for (p, s) in powers.iter().zip(&f.singular) {
                if *p == 0.0 && *s > 0.0 {
                    assert!(sigma / (s * s) >= level - 1e-9);
                }
            }
        }
    }

    #[test]
    fn mock_codec_respects_budget_and_roundtrips() {
        let mut codec = MockCodec;
        let img = synthetic_set(SyntheticKind::Noise, 1, 8, 8, 1).images.remove(0);
        for budget in [33, 60, 100, 160, 250] {
            let bytes = codec.encode(&img, budget).unwrap();
            assert!(bytes.len() <= budget, "budget {budget}: got {}", bytes.len());
            let back = codec.decode(&bytes).unwrap();
            assert_eq!((back.h, back.w), (8, 8));
        }
        let min = codec.min_bytes(8, 8);
        assert!(matches!(
            codec.encode(&img, min - 1),
            Err(CodecError::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn mock_codec_is_lossless_at_8_bits_for_8bit_sources() {
        let mut codec = MockCodec;
        // values on the /255 grid, as produced by the raw loader
        let mut img = Image::constant(4, 4, 0.0);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        let bytes = codec.encode(&img, 10_000).unwrap();
        let back = codec.decode(&bytes).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mock_codec_distortion_monotone_in_budget() {
        let mut codec = MockCodec;
        let img = synthetic_set(SyntheticKind::Gradients, 1, 8, 8, 3).images.remove(0);
        let mut last_mse = f64::INFINITY;
        for q in 1..=8usize {
            let budget = MockCodec::payload_bytes(8, 8, q);
            let bytes = codec.encode(&img, budget).unwrap();
            let back = codec.decode(&bytes).unwrap();
            let mse: f64 = img
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / img.data().len() as f64;
            assert!(mse <= last_mse + 1e-12, "q={q}: mse {mse} > {last_mse}");
            last_mse = mse;
        }
    }

    #[test]
    fn separation_lossless_when_capacity_is_huge() {
        // near-zero noise → enormous budget → q=8 → exact for /255 sources
        let h = crate::mimolin::CMatrix::identity(2);
        let ch = ChannelRealization::new(h, 1e-12).unwrap();
        let mut img = Image::constant(8, 8, 0.0);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 13) % 256) as f64 / 255.0;
        }
        let mut codec = MockCodec;
        let (out, info) = separation_transmit(&img, &ch, 128, 1.0, &mut codec).unwrap();
        assert!(!info.below_minimum);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separation_flags_budget_below_minimum() {
        let h = crate::mimolin::CMatrix::identity(2);
        let ch = ChannelRealization::new(h, 1e6).unwrap(); // abysmal SNR
        let img = synthetic_set(SyntheticKind::Gradients, 1, 8, 8, 4).images.remove(0);
        let mut codec = MockCodec;
        let (out, info) = separation_transmit(&img, &ch, 8, 1.0, &mut codec).unwrap();
        assert!(info.below_minimum);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn separation_psnr_monotone_in_snr() {
        // paired channel draws per image across the SNR grid
        let images = synthetic_set(SyntheticKind::Gradients, 20, 8, 8, 5);
        let mut codec = MockCodec;
        let mut last_mean = f64::NEG_INFINITY;
        for mu in [1.0, 5.0, 10.0, 15.0, 19.0] {
            let sigma = snr_to_sigma2(mu, 2);
            let mut acc = 0.0;
            for (i, img) in images.images.iter().enumerate() {
                let h = sample_channel(&mut stream(99, &[0x5e9a, i as u64]), 2, 1.0);
                let ch = ChannelRealization::new(h, sigma).unwrap();
                let (out, info) = separation_transmit(img, &ch, 128, 1.0, &mut codec).unwrap();
                assert!(info.bytes_used <= info.byte_budget);
                acc += crate::harness::psnr(img, &out).unwrap();
            }
            let mean = acc / images.len() as f64;
            assert!(mean >= last_mean - 1e-12, "mu {mu}: mean {mean} < {last_mean}");
            last_mean = mean;
        }
    }

    #[test]
    fn ppm_roundtrip() {
        let img = synthetic_set(SyntheticKind::Noise, 1, 5, 7, 6).images.remove(0);
        let bytes = write_ppm(&img);
        let back = read_ppm(&bytes).unwrap();
        assert_eq!((back.h, back.w), (5, 7));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn waterfill_conserves_power(
            s1 in 0.05f64..4.0,
            s2 in 0.05f64..4.0,
            sigma in 0.01f64..4.0,
            p_total in 0.1f64..8.0,
        ) {
            let (hi, lo) = if s1 >= s2 { (s1, s2) } else { (s2, s1) };
            let alloc = waterfill(&[hi, lo], sigma, p_total).unwrap();
            let spent: f64 = alloc.powers().iter().sum();
            prop_assert!((spent - p_total).abs() < 1e-9);
        }
    }
}
