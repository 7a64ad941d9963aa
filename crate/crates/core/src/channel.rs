//! The transmission chain: power constraint, SVD precoding, channel
//! application, equalization, noise-heatmap construction, and SNR
//! bookkeeping.
//!
//! Real/complex packing convention, relied on bit-exactly by the encoder,
//! the heatmap, and the decoder: the 2Mk real values are laid out
//! antenna-major, and within each antenna's run of 2k values consecutive
//! pairs (2j, 2j+1) are the (re, im) parts of symbol j. Flattening the
//! encoder's l×(2Mk/l) output row-major yields exactly this layout, and the
//! heatmap uses the same one.

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::mimolin::{pinv_diag, svd, CMatrix, MimolinError, SvdFactors};
use crate::numerics::AffineMap;
use crate::rng::gaussian;

/// Default clamp threshold for near-zero singular values. Keeps the
/// equalized noise power and the heatmap bounded on nearly singular fades.
pub const DEFAULT_SING_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("power_normalize: input is all zero")]
    ZeroInput,
    #[error("2Mk = {two_mk} is not divisible by sequence length l = {l}")]
    Divisibility { two_mk: usize, l: usize },
    #[error("expected {expected} packed reals, got {got}")]
    PackedLength { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] MimolinError),
}

/// One fading block: the gain matrix, its SVD, and the noise variance that
/// applies while it holds.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub h: CMatrix,
    pub svd: SvdFactors,
    pub sigma_w2: f64,
    pub m: usize,
}

impl ChannelRealization {
    pub fn new(h: CMatrix, sigma_w2: f64) -> Result<Self, ChannelError> {
        assert!(sigma_w2.is_finite() && sigma_w2 > 0.0, "sigma_w2 must be positive");
        let m = h.rows;
        let factors = svd(&h)?;
        Ok(ChannelRealization { h, svd: factors, sigma_w2, m })
    }
}

/// Per-symbol effective noise powers, shaped l × (2Mk/l) to align with the
/// packed transceiver sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Noise variance for an average received SNR of `mu_db`: σ_w² = M / 10^(μ/10).
pub fn snr_to_sigma2(mu_db: f64, m: usize) -> f64 {
    assert!(m >= 1);
    m as f64 / 10f64.powf(mu_db / 10.0)
}

/// Inverse of [`snr_to_sigma2`].
pub fn sigma2_to_snr_db(sigma_w2: f64, m: usize) -> f64 {
    10.0 * (m as f64 / sigma_w2).log10()
}

/// Packs a complex M×k matrix into 2Mk reals (see module docs for layout).
pub fn pack_complex(x: &CMatrix) -> Vec<f64> {
    let (m, k) = (x.rows, x.cols);
    let mut out = vec![0.0; 2 * m * k];
    for i in 0..m {
        for j in 0..k {
            out[i * 2 * k + 2 * j] = x[(i, j)].re;
            out[i * 2 * k + 2 * j + 1] = x[(i, j)].im;
        }
    }
    out
}

/// Inverse of [`pack_complex`].
pub fn unpack_real(z: &[f64], m: usize, k: usize) -> Result<CMatrix, ChannelError> {
    if z.len() != 2 * m * k {
        return Err(ChannelError::PackedLength { expected: 2 * m * k, got: z.len() });
    }
    let mut x = CMatrix::zeros(m, k);
    for i in 0..m {
        for j in 0..k {
            x[(i, j)] = Complex64::new(z[i * 2 * k + 2 * j], z[i * 2 * k + 2 * j + 1]);
        }
    }
    Ok(x)
}

/// Packs a real vector of length 2Mk into complex symbols scaled so the
/// power constraint holds with equality: (1/(Mk)) ‖X‖_F² = Ps.
pub fn power_normalize(z: &[f64], m: usize, k: usize, ps: f64) -> Result<CMatrix, ChannelError> {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return Err(ChannelError::ZeroInput);
    }
    let scale = ((m * k) as f64 * ps / sq).sqrt();
    let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
    unpack_real(&scaled, m, k)
}

/// V · X: rotates the transmit streams onto the channel's right singular
/// basis. Norm-preserving since V is unitary.
pub fn precode(x: &CMatrix, v: &CMatrix) -> Result<CMatrix, ChannelError> {
    Ok(v.mul(x)?)
}

/// Y = H·Xp + W with i.i.d. complex Gaussian noise of variance σ_w² per
/// entry (σ_w²/2 per real component).
pub fn apply_channel<R: Rng>(xp: &CMatrix, ch: &ChannelRealization, rng: &mut R) -> Result<CMatrix, ChannelError> {
    let mut y = ch.h.mul(xp)?;
    let comp_std = (ch.sigma_w2 / 2.0).sqrt();
    for i in 0..y.rows {
        for j in 0..y.cols {
            let re = gaussian(rng) * comp_std;
            let im = gaussian(rng) * comp_std;
            y[(i, j)] += Complex64::new(re, im);
        }
    }
    Ok(y)
}

/// X′ = diag(pinv(s)) · U^H · Y. Rows whose singular value fell below the
/// floor come out zero.
pub fn equalize(y: &CMatrix, ch: &ChannelRealization, floor: f64) -> Result<CMatrix, ChannelError> {
    let pinv = pinv_diag(&ch.svd.singular, floor);
    let uh_y = ch.svd.u.hermitian().mul(y)?;
    Ok(uh_y.scale_rows(&pinv))
}

/// Per-antenna effective noise power p_i = σ_w² / max(s_i, floor)², halved
/// across the real/imaginary components and laid out in the packed order,
/// reshaped to l × (2Mk/l).
pub fn build_heatmap(ch: &ChannelRealization, k: usize, l: usize, floor: f64) -> Result<Heatmap, ChannelError> {
    let two_mk = 2 * ch.m * k;
    if !two_mk.is_multiple_of(l) {
        return Err(ChannelError::Divisibility { two_mk, l });
    }
    let cols = two_mk / l;
    let mut values = vec![0.0; two_mk];
    for i in 0..ch.m {
        let s = ch.svd.singular[i].max(floor);
        let p_half = ch.sigma_w2 / (s * s) / 2.0;
        values[i * 2 * k..(i + 1) * 2 * k].iter_mut().for_each(|v| *v = p_half);
    }
    Ok(Heatmap { rows: l, cols, values })
}

/// Heatmap for the unprecoded path: every packed component faces the raw
/// noise power σ_w²/2.
pub fn uncoded_heatmap(sigma_w2: f64, m: usize, k: usize, l: usize) -> Result<Heatmap, ChannelError> {
    let two_mk = 2 * m * k;
    if !two_mk.is_multiple_of(l) {
        return Err(ChannelError::Divisibility { two_mk, l });
    }
    Ok(Heatmap { rows: l, cols: two_mk / l, values: vec![sigma_w2 / 2.0; two_mk] })
}

/// Whether the transceivers run on the SVD-parallelized channel or the raw
/// one (the ablation path).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMode {
    With,
    Without,
}

/// Differentiable transmit→receive chain on packed reals, pluggable into the
/// graph as an affine op: the channel is linear in the input symbols for a
/// fixed realization and noise draw, and its adjoint is the reversed chain
/// of conjugate transposes.
pub struct MimoChainMap {
    ch: ChannelRealization,
    noise: CMatrix,
    pinv: Vec<f64>,
    mode: SvdMode,
    k: usize,
}

impl MimoChainMap {
    /// Draws the additive noise now; the resulting map is deterministic.
    pub fn new<R: Rng>(ch: &ChannelRealization, k: usize, floor: f64, mode: SvdMode, rng: &mut R) -> Self {
        let comp_std = (ch.sigma_w2 / 2.0).sqrt();
        let mut noise = CMatrix::zeros(ch.m, k);
        for i in 0..ch.m {
            for j in 0..k {
                let re = gaussian(rng) * comp_std;
                let im = gaussian(rng) * comp_std;
                noise[(i, j)] = Complex64::new(re, im);
            }
        }
        let pinv = pinv_diag(&ch.svd.singular, floor);
        MimoChainMap { ch: ch.clone(), noise, pinv, mode, k }
    }

    /// Noiseless variant (used by gradient checks and algebra tests).
    pub fn noiseless(ch: &ChannelRealization, k: usize, floor: f64, mode: SvdMode) -> Self {
        let pinv = pinv_diag(&ch.svd.singular, floor);
        MimoChainMap { ch: ch.clone(), noise: CMatrix::zeros(ch.m, k), pinv, mode, k }
    }
}

impl AffineMap for MimoChainMap {
    fn out_dims(&self, in_dims: (usize, usize)) -> (usize, usize) {
        in_dims
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let x = unpack_real(z, self.ch.m, self.k).expect("packed length");
        let out = match self.mode {
            SvdMode::With => {
                let xp = self.ch.svd.v.mul(&x).unwrap();
                let y = self.ch.h.mul(&xp).unwrap().add(&self.noise).unwrap();
                self.ch.svd.u.hermitian().mul(&y).unwrap().scale_rows(&self.pinv)
            }
            SvdMode::Without => self.ch.h.mul(&x).unwrap().add(&self.noise).unwrap(),
        };
        pack_complex(&out)
    }

    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let gm = unpack_real(g, self.ch.m, self.k).expect("packed length");
        let out = match self.mode {
            SvdMode::With => {
                // (D U^H H V)^H = V^H H^H U D
                let ud = self.ch.svd.u.mul(&CMatrix::identity(self.ch.m).scale_rows(&self.pinv)).unwrap();
                let t = self.ch.h.hermitian().mul(&ud.mul(&gm).unwrap()).unwrap();
                self.ch.svd.v.hermitian().mul(&t).unwrap()
            }
            SvdMode::Without => self.ch.h.hermitian().mul(&gm).unwrap(),
        };
        pack_complex(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimolin::sample_channel;
    use crate::rng::stream;
    use proptest::{prop_assert_eq, proptest};

    fn realization(seed: u64, m: usize, sigma_w2: f64) -> ChannelRealization {
        let h = sample_channel(&mut stream(seed, &[0xc4a2]), m, 1.0);
        ChannelRealization::new(h, sigma_w2).unwrap()
    }

    fn random_packed(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = stream(seed, &[0x9ac3]);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn snr_conversions() {
        assert!((snr_to_sigma2(0.0, 2) - 2.0).abs() < 1e-12);
        let mu = 10.0 * 2f64.log10(); // 10^(mu/10) = 2
        assert!((snr_to_sigma2(mu, 2) - 1.0).abs() < 1e-12);
        let s2 = 0.37;
        assert!((snr_to_sigma2(sigma2_to_snr_db(s2, 4), 4) - s2).abs() < 1e-12);
    }

    #[test]
    fn power_normalize_hits_constraint_exactly() {
        let z = random_packed(1, 2 * 2 * 128);
        let x = power_normalize(&z, 2, 128, 1.0).unwrap();
        let frob2 = x.frobenius_norm().powi(2);
        assert!((frob2 - 256.0).abs() < 1e-9, "‖X‖² = {frob2}");
    }

    #[test]
    fn power_normalize_is_idempotent_on_normalized_input() {
        let z = random_packed(2, 2 * 2 * 8);
        let x1 = power_normalize(&z, 2, 8, 1.0).unwrap();
        let z1 = pack_complex(&x1);
        let x2 = power_normalize(&z1, 2, 8, 1.0).unwrap();
        for (a, b) in x1.data().iter().zip(x2.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn power_normalize_single_entry() {
        let mut z = vec![0.0; 2 * 2 * 4];
        z[0] = 0.3;
        let x = power_normalize(&z, 2, 4, 1.0).unwrap();
        let expected = ((2 * 4) as f64).sqrt();
        assert!((x[(0, 0)].re - expected).abs() < 1e-12);
        assert!(matches!(power_normalize(&[0.0; 16], 2, 4, 1.0), Err(ChannelError::ZeroInput)));
    }

    #[test]
    fn precode_identity_and_norm() {
        let ch = realization(3, 2, 1.0);
        let x = unpack_real(&random_packed(4, 2 * 2 * 16), 2, 16).unwrap();
        let eye = CMatrix::identity(2);
        let same = precode(&x, &eye).unwrap();
        assert_eq!(same.data(), x.data());
        let vx = precode(&x, &ch.svd.v).unwrap();
        assert!((vx.frobenius_norm() - x.frobenius_norm()).abs() < 1e-9);
    }

    #[test]
    fn noiseless_round_trip_is_identity() {
        for seed in 0..100 {
            let h = sample_channel(&mut stream(seed, &[0xe2e]), 2, 1.0);
            let ch = ChannelRealization { sigma_w2: 1e-300, ..ChannelRealization::new(h, 1.0).unwrap() };
            let x = unpack_real(&random_packed(seed + 500, 2 * 2 * 8), 2, 8).unwrap();
            let xp = precode(&x, &ch.svd.v).unwrap();
            let y = ch.h.mul(&xp).unwrap(); // no noise
            let xr = equalize(&y, &ch, DEFAULT_SING_FLOOR).unwrap();
            let err = xr.sub(&x).unwrap().frobenius_norm();
            assert!(err < 1e-8, "seed {seed}: err {err}");
        }
    }

    #[test]
    fn apply_channel_noise_statistics() {
        let h = CMatrix::identity(2);
        let ch = ChannelRealization::new(h, 0.49).unwrap();
        let x = CMatrix::zeros(2, 8);
        let mut rng = stream(8, &[0x40]);
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..7000 {
            let y = apply_channel(&x, &ch, &mut rng).unwrap();
            for v in y.data() {
                acc += v.norm_sqr();
                count += 1;
            }
        }
        let var = acc / count as f64;
        assert!((var - 0.49).abs() / 0.49 < 0.02, "var {var}");
    }

    #[test]
    fn apply_channel_same_seed_same_noise() {
        let ch = realization(9, 2, 0.5);
        let x = unpack_real(&random_packed(10, 2 * 2 * 4), 2, 4).unwrap();
        let y1 = apply_channel(&x, &ch, &mut stream(11, &[7])).unwrap();
        let y2 = apply_channel(&x, &ch, &mut stream(11, &[7])).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn equalized_noise_variance_per_row() {
        // X = 0, s = (2, 1), σ_w² = 1 → row variances (0.25, 1.0).
        let u = CMatrix::identity(2);
        let v = CMatrix::identity(2);
        let h = CMatrix::from_rows(&[
            vec![Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)],
            vec![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
        ]);
        let ch = ChannelRealization {
            h: h.clone(),
            svd: SvdFactors { u, singular: vec![2.0, 1.0], v },
            sigma_w2: 1.0,
            m: 2,
        };
        let x = CMatrix::zeros(2, 10);
        let mut rng = stream(12, &[0x0a]);
        let mut acc = [0.0f64; 2];
        let mut n = 0usize;
        for _ in 0..10_000 {
            let y = apply_channel(&x, &ch, &mut rng).unwrap();
            let xr = equalize(&y, &ch, DEFAULT_SING_FLOOR).unwrap();
            for j in 0..10 {
                acc[0] += xr[(0, j)].norm_sqr();
                acc[1] += xr[(1, j)].norm_sqr();
            }
            n += 10;
        }
        let v0 = acc[0] / n as f64;
        let v1 = acc[1] / n as f64;
        assert!((v0 - 0.25).abs() / 0.25 < 0.02, "row 0 var {v0}");
        assert!((v1 - 1.0).abs() < 0.02, "row 1 var {v1}");
    }

    #[test]
    fn equalize_zeroes_clamped_rows() {
        let u = CMatrix::identity(2);
        let v = CMatrix::identity(2);
        let h = CMatrix::from_rows(&[
            vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            vec![Complex64::new(0.0, 0.0), Complex64::new(1e-9, 0.0)],
        ]);
        let ch = ChannelRealization {
            h,
            svd: SvdFactors { u, singular: vec![1.0, 1e-9], v },
            sigma_w2: 1e-12,
            m: 2,
        };
        let x = unpack_real(&random_packed(13, 8), 2, 2).unwrap();
        let y = ch.h.mul(&x).unwrap();
        let xr = equalize(&y, &ch, 1e-6).unwrap();
        for j in 0..2 {
            assert_eq!(xr[(1, j)], Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn heatmap_values_and_layout() {
        let u = CMatrix::identity(2);
        let v = CMatrix::identity(2);
        let h = CMatrix::identity(2);
        let ch = ChannelRealization {
            h,
            svd: SvdFactors { u, singular: vec![2.0, 1.0], v },
            sigma_w2: 1.0,
            m: 2,
        };
        let heat = build_heatmap(&ch, 128, 64, DEFAULT_SING_FLOOR).unwrap();
        assert_eq!((heat.rows, heat.cols), (64, 8));
        let n_low = heat.values().iter().filter(|&&x| (x - 0.125).abs() < 1e-12).count();
        let n_high = heat.values().iter().filter(|&&x| (x - 0.5).abs() < 1e-12).count();
        assert_eq!(n_low, 256);
        assert_eq!(n_high, 256);
        // antenna 0 occupies the first 2k entries
        assert!(heat.values()[..256].iter().all(|&x| (x - 0.125).abs() < 1e-12));
    }

    #[test]
    fn heatmap_uniform_and_linear_in_sigma() {
        let u = CMatrix::identity(2);
        let v = CMatrix::identity(2);
        let ch = ChannelRealization {
            h: CMatrix::identity(2),
            svd: SvdFactors { u, singular: vec![1.0, 1.0], v },
            sigma_w2: 2.0,
            m: 2,
        };
        let heat = build_heatmap(&ch, 8, 8, DEFAULT_SING_FLOOR).unwrap();
        assert!(heat.values().iter().all(|&x| (x - 1.0).abs() < 1e-12));
        let ch2 = ChannelRealization { sigma_w2: 4.0, ..ch };
        let heat2 = build_heatmap(&ch2, 8, 8, DEFAULT_SING_FLOOR).unwrap();
        for (a, b) in heat.values().iter().zip(heat2.values()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_divisibility_error() {
        let ch = realization(20, 2, 1.0);
        assert!(matches!(
            build_heatmap(&ch, 5, 64, DEFAULT_SING_FLOOR),
            Err(ChannelError::Divisibility { .. })
        ));
    }

    #[test]
    fn heatmap_matches_equalized_noise_variance() {
        // Empirical per-coordinate variance of Re/Im of the equalized noise
        // vs heatmap entries, 1e5 draws per antenna row.
        for seed in 0..3 {
            let ch = realization(40 + seed, 2, 0.8);
            let k = 4;
            let heat = build_heatmap(&ch, k, 4, DEFAULT_SING_FLOOR).unwrap();
            let x = CMatrix::zeros(2, k);
            let mut rng = stream(100 + seed, &[0xbeef]);
            let draws = 25_000; // k=4 columns each, so 1e5 samples per row
            let mut acc_re = [0.0f64; 2];
            let mut acc_im = [0.0f64; 2];
            for _ in 0..draws {
                let y = apply_channel(&x, &ch, &mut rng).unwrap();
                let xr = equalize(&y, &ch, DEFAULT_SING_FLOOR).unwrap();
                for i in 0..2 {
                    for j in 0..k {
                        acc_re[i] += xr[(i, j)].re * xr[(i, j)].re;
                        acc_im[i] += xr[(i, j)].im * xr[(i, j)].im;
                    }
                }
            }
            for i in 0..2 {
                let var_re = acc_re[i] / (draws * k) as f64;
                let var_im = acc_im[i] / (draws * k) as f64;
                let expected = heat.values()[i * 2 * k];
                assert!((var_re - expected).abs() / expected < 0.02, "row {i} re var {var_re} vs {expected}");
                assert!((var_im - expected).abs() / expected < 0.02, "row {i} im var {var_im} vs {expected}");
            }
        }
    }

    #[test]
    fn chain_map_matches_explicit_chain() {
        let ch = realization(60, 2, 0.3);
        let k = 8;
        let z = random_packed(61, 2 * 2 * k);
        let mut rng1 = stream(62, &[1]);
        let map = MimoChainMap::new(&ch, k, DEFAULT_SING_FLOOR, SvdMode::With, &mut rng1);
        let out = map.apply(&z);

        let x = unpack_real(&z, 2, k).unwrap();
        let xp = precode(&x, &ch.svd.v).unwrap();
        let mut rng2 = stream(62, &[1]);
        let y = apply_channel(&xp, &ch, &mut rng2).unwrap();
        let xr = equalize(&y, &ch, DEFAULT_SING_FLOOR).unwrap();
        let expected = pack_complex(&xr);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(vals in proptest::collection::vec(-1e3f64..1e3, 16)) {
            let x = unpack_real(&vals, 2, 4).unwrap();
            let packed = pack_complex(&x);
            prop_assert_eq!(packed, vals);
        }
    }
}
