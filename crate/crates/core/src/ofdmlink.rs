//! The non-learned parts of the link: 4-QAM mapping, unitary IFFT/FFT,
//! cyclic prefix, AWGN / flat Rayleigh channels and zero-forcing equalization.
//!
//! The Rayleigh channel is flat per subcarrier: every subcarrier of every OFDM
//! symbol gets an independent `CN(0, 1)` gain, applied to the post-FFT bins.
//! With a cyclic prefix at least as long as the channel memory this is the
//! same as a cyclic convolution in time.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this gain magnitude a subcarrier is treated as lost by the equalizer.
pub const SINGULAR_GAIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Qam4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfdmConfig {
    pub n_subcarriers: usize,
    pub cp_len: usize,
    pub modulation: Modulation,
    /// Baseband sample rate in Hz; only used for latency budgeting.
    pub sample_rate: u64,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        OfdmConfig {
            n_subcarriers: 16,
            cp_len: 4,
            modulation: Modulation::Qam4,
            sample_rate: 1_000_000,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.n_subcarriers.is_power_of_two() {
            return Err(Error::NonPowerOfTwo(self.n_subcarriers));
        }
        if self.cp_len >= self.n_subcarriers {
            return Err(Error::CpTooLong {
                cp_len: self.cp_len,
                len: self.n_subcarriers,
            });
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// Samples per OFDM symbol on the wire, prefix included.
    pub fn symbol_samples(&self) -> usize {
        self.n_subcarriers + self.cp_len
    }

    /// Information bits carried per block (2 bits per 4-QAM symbol).
    pub fn bits_per_block(&self) -> usize {
        2 * self.n_subcarriers
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(Error::InvalidConfig(format!("unknown channel kind `{other}`"))),
        }
    }
}

/// Per-subcarrier gains and the SNR of one channel use. `snr_db` may be
/// `+inf` for a noiseless channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub gains: Vec<Complex64>,
    pub snr_db: f64,
}

impl ChannelRealization {
    pub fn draw<R: Rng + ?Sized>(kind: ChannelKind, n: usize, snr_db: f64, rng: &mut R) -> Self {
        let gains = match kind {
            ChannelKind::Awgn => vec![Complex64::new(1.0, 0.0); n],
            ChannelKind::Rayleigh => (0..n).map(|_| complex_gaussian(rng, 1.0)).collect(),
        };
        ChannelRealization { gains, snr_db }
    }

    pub fn identity(n: usize) -> Self {
        ChannelRealization {
            gains: vec![Complex64::new(1.0, 0.0); n],
            snr_db: f64::INFINITY,
        }
    }

    /// Complex noise variance per sample for unit signal power.
    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.snr_db)
    }
}

pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Circularly-symmetric Gaussian with `E|z|^2 = variance`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Gray-mapped 4-QAM: per axis, bit 0 maps to `+1/sqrt(2)`, bit 1 to `-1/sqrt(2)`.
/// Bits are read in pairs `(b_I, b_Q)`.
pub fn qam4_modulate(bits: &[u8]) -> Result<Vec<Complex64>> {
    if !bits.len().is_multiple_of(2) {
        return Err(Error::OddLengthInput(bits.len()));
    }
    let level = |b: u8| if b == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    Ok(bits
        .chunks_exact(2)
        .map(|p| Complex64::new(level(p[0]), level(p[1])))
        .collect())
}

/// Minimum-distance 4-QAM decisions (per-axis sign).
pub fn qam4_demodulate(symbols: &[Complex64]) -> Vec<u8> {
    symbols
        .iter()
        .flat_map(|s| [u8::from(s.re < 0.0), u8::from(s.im < 0.0)])
        .collect()
}

/// Unitary FFT/IFFT pair of one size (`1/sqrt(N)` both ways).
#[derive(Clone)]
pub struct Transform {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl fmt::Debug for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transform").field("n", &self.n).finish()
    }
}

impl Transform {
    pub fn new(n: usize) -> Result<Self> {
        if !n.is_power_of_two() {
            return Err(Error::NonPowerOfTwo(n));
        }
        let mut planner = FftPlanner::new();
        Ok(Transform {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            scale: 1.0 / (n as f64).sqrt(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn fft_in_place(&self, x: &mut [Complex64]) -> Result<()> {
        self.run(&self.forward, x)
    }

    pub fn ifft_in_place(&self, x: &mut [Complex64]) -> Result<()> {
        self.run(&self.inverse, x)
    }

    fn run(&self, plan: &Arc<dyn Fft<f64>>, x: &mut [Complex64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                actual: x.len(),
            });
        }
        plan.process(x);
        for v in x.iter_mut() {
            *v *= self.scale;
        }
        Ok(())
    }
}

pub fn fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out = x.to_vec();
    Transform::new(x.len())?.fft_in_place(&mut out)?;
    Ok(out)
}

pub fn ifft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out = x.to_vec();
    Transform::new(x.len())?.ifft_in_place(&mut out)?;
    Ok(out)
}

pub fn add_cp(x: &[Complex64], cp_len: usize) -> Result<Vec<Complex64>> {
    if cp_len >= x.len() {
        return Err(Error::CpTooLong { cp_len, len: x.len() });
    }
    let mut out = Vec::with_capacity(x.len() + cp_len);
    out.extend_from_slice(&x[x.len() - cp_len..]);
    out.extend_from_slice(x);
    Ok(out)
}

pub fn remove_cp(y: &[Complex64], cp_len: usize) -> Result<Vec<Complex64>> {
    if cp_len >= y.len() {
        return Err(Error::CpTooLong { cp_len, len: y.len() });
    }
    Ok(y[cp_len..].to_vec())
}

/// `y_k = H_k x_k + e_k` with `e_k ~ CN(0, 10^(-snr/10))`.
pub fn apply_channel<R: Rng + ?Sized>(
    freq_symbols: &[Complex64],
    realization: &ChannelRealization,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    if freq_symbols.len() != realization.gains.len() {
        return Err(Error::LengthMismatch {
            expected: realization.gains.len(),
            actual: freq_symbols.len(),
        });
    }
    let noise = draw_noise(realization, rng);
    apply_channel_with_noise(freq_symbols, realization, &noise)
}

/// Noise samples for one use of `realization`; all zeros when noiseless.
pub fn draw_noise<R: Rng + ?Sized>(realization: &ChannelRealization, rng: &mut R) -> Vec<Complex64> {
    let var = realization.noise_variance();
    if var > 0.0 {
        (0..realization.gains.len())
            .map(|_| complex_gaussian(rng, var))
            .collect()
    } else {
        vec![Complex64::new(0.0, 0.0); realization.gains.len()]
    }
}

/// `y_k = H_k x_k + noise_k` with a pre-drawn noise vector.
pub fn apply_channel_with_noise(
    freq_symbols: &[Complex64],
    realization: &ChannelRealization,
    noise: &[Complex64],
) -> Result<Vec<Complex64>> {
    let n = realization.gains.len();
    if freq_symbols.len() != n || noise.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: if freq_symbols.len() != n {
                freq_symbols.len()
            } else {
                noise.len()
            },
        });
    }
    Ok(freq_symbols
        .iter()
        .zip(&realization.gains)
        .zip(noise)
        .map(|((&x, &h), &e)| h * x + e)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Equalized {
    pub symbols: Vec<Complex64>,
    /// Subcarriers whose gain fell below [`SINGULAR_GAIN`]; their symbols are zeroed.
    pub singular: Vec<usize>,
}

pub fn equalize_zf(y: &[Complex64], gains: &[Complex64]) -> Result<Equalized> {
    if y.len() != gains.len() {
        return Err(Error::LengthMismatch {
            expected: gains.len(),
            actual: y.len(),
        });
    }
    let mut singular = Vec::new();
    let symbols = y
        .iter()
        .zip(gains)
        .enumerate()
        .map(|(k, (&v, &h))| {
            if h.norm() < SINGULAR_GAIN {
                singular.push(k);
                Complex64::new(0.0, 0.0)
            } else {
                v / h
            }
        })
        .collect();
    Ok(Equalized { symbols, singular })
}

/// Interleaves complex samples as `[re0, im0, re1, im1, ...]`.
pub fn to_reals(symbols: &[Complex64]) -> Vec<f64> {
    symbols.iter().flat_map(|s| [s.re, s.im]).collect()
}

pub fn from_reals(reals: &[f64]) -> Result<Vec<Complex64>> {
    if !reals.len().is_multiple_of(2) {
        return Err(Error::OddLengthInput(reals.len()));
    }
    Ok(reals.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect())
}

/// Frequency-domain symbols through IFFT, prefix insertion, prefix removal
/// and FFT, one OFDM symbol of `n_subcarriers` bins at a time. This is the
/// wire path on either side of the channel.
#[derive(Clone, Debug)]
pub struct OfdmModem {
    config: OfdmConfig,
    transform: Transform,
}

impl OfdmModem {
    pub fn new(config: &OfdmConfig) -> Result<Self> {
        config.validate()?;
        Ok(OfdmModem {
            transform: Transform::new(config.n_subcarriers)?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &OfdmConfig {
        &self.config
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let n = self.config.n_subcarriers;
        if len == 0 || !len.is_multiple_of(n) {
            return Err(Error::LengthMismatch {
                expected: n * len.div_ceil(n).max(1),
                actual: len,
            });
        }
        Ok(())
    }

    /// Frequency bins to time-domain samples with prefixes.
    pub fn transmit(&self, freq: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(freq.len())?;
        let n = self.config.n_subcarriers;
        let mut out = Vec::with_capacity(freq.len() / n * self.config.symbol_samples());
        for chunk in freq.chunks_exact(n) {
            let mut time = chunk.to_vec();
            self.transform.ifft_in_place(&mut time)?;
            out.extend(add_cp(&time, self.config.cp_len)?);
        }
        Ok(out)
    }

    /// Time-domain samples with prefixes back to frequency bins.
    pub fn receive(&self, time: &[Complex64]) -> Result<Vec<Complex64>> {
        let m = self.config.symbol_samples();
        if time.is_empty() || !time.len().is_multiple_of(m) {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: time.len(),
            });
        }
        let mut out = Vec::with_capacity(time.len() / m * self.config.n_subcarriers);
        for chunk in time.chunks_exact(m) {
            let mut freq = remove_cp(chunk, self.config.cp_len)?;
            self.transform.fft_in_place(&mut freq)?;
            out.extend(freq);
        }
        Ok(out)
    }

    /// Adjoint of `receive(transmit(.))` applied to a frequency-domain
    /// gradient, so backpropagation passes through the wire path exactly.
    pub fn wire_adjoint(&self, grad: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(grad.len())?;
        let n = self.config.n_subcarriers;
        let cp = self.config.cp_len;
        let mut out = Vec::with_capacity(grad.len());
        for chunk in grad.chunks_exact(n) {
            // adjoint of the unitary FFT is the IFFT and vice versa
            let mut time = chunk.to_vec();
            self.transform.ifft_in_place(&mut time)?;
            // remove_cp drops the prefix: its adjoint pads zeros there; the
            // prefix copies the tail, so add_cp's adjoint folds those zeros
            // back onto the tail, leaving `time` unchanged
            let mut padded = vec![Complex64::new(0.0, 0.0); cp];
            padded.extend_from_slice(&time);
            let mut folded = padded[cp..].to_vec();
            for i in 0..cp {
                folded[n - cp + i] += padded[i];
            }
            self.transform.fft_in_place(&mut folded)?;
            out.extend(folded);
        }
        Ok(out)
    }
}
