//! Encoder `f` and decoder `g` around the OFDM channel, trained end to end.
//!
//! Transmit chain for one block: bits → 4-QAM → encoder → power
//! normalization → IFFT + CP → channel → CP removal + FFT → (ZF) → decoder →
//! 4-QAM decisions. Complex signals enter and leave the networks as
//! interleaved `[re, im]` pairs, so `N` subcarriers are `2N` reals.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::QFormat;
use crate::neuralnet::{optimizer_step, Activation, FcNet, FixedNet, Gradients, OptimizerState, TrainConfig};
use crate::ofdmlink::{
    self, apply_channel_with_noise, draw_noise, equalize_zf, ChannelKind, ChannelRealization, OfdmConfig, OfdmModem,
    SINGULAR_GAIN,
};

/// Network size knobs: total weight layers of encoder + decoder and the
/// uniform hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub hidden_width: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            n_layers: 5,
            hidden_width: 512,
        }
    }
}

impl ModelShape {
    /// Weight layers given to the encoder; the decoder takes the rest
    /// (the extra one when the total is odd).
    pub fn encoder_layers(&self) -> usize {
        self.n_layers / 2
    }

    pub fn decoder_layers(&self) -> usize {
        self.n_layers - self.encoder_layers()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub channel: ChannelKind,
    /// Zero-forcing equalization in front of the decoder.
    pub equalize: bool,
}

impl LinkConfig {
    /// Equalization on, the default for every channel kind.
    pub fn new(channel: ChannelKind) -> Self {
        LinkConfig {
            channel,
            equalize: true,
        }
    }
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig::new(ChannelKind::Rayleigh)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel {
    pub encoder: FcNet,
    pub decoder: FcNet,
    pub ofdm: OfdmConfig,
    pub rate: f64,
    /// Channel and receiver setup the decoder was trained for.
    pub link: LinkConfig,
    pub trained_with: Option<TrainConfig>,
}

/// Reals at the encoder output for `n_subcarriers` information symbols at
/// code rate `rate`. The coded symbols must fill whole OFDM symbols.
pub fn coded_len(ofdm: &OfdmConfig, rate: f64) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("code rate {rate} outside (0, 1]")));
    }
    let info = 2 * ofdm.n_subcarriers;
    let coded = (info as f64 / rate).round() as usize;
    if ((coded as f64) * rate - info as f64).abs() > 1e-9 || !coded.is_multiple_of(info) {
        return Err(Error::InvalidConfig(format!(
            "code rate {rate} does not map {info} reals onto whole OFDM symbols"
        )));
    }
    Ok(coded)
}

impl AutoencoderModel {
    pub fn init(ofdm: &OfdmConfig, rate: f64, shape: ModelShape, link: LinkConfig, seed: u64) -> Result<Self> {
        ofdm.validate()?;
        if shape.n_layers < 2 || shape.hidden_width == 0 {
            return Err(Error::InvalidConfig(
                "need at least 2 layers and a non-zero hidden width".into(),
            ));
        }
        let info = 2 * ofdm.n_subcarriers;
        let coded = coded_len(ofdm, rate)?;
        let dims = |from: usize, to: usize, layers: usize| {
            let mut d = vec![from];
            d.extend(std::iter::repeat_n(shape.hidden_width, layers - 1));
            d.push(to);
            d
        };
        let enc_layers = shape.encoder_layers();
        let dec_layers = shape.decoder_layers();
        let encoder = FcNet::init_he(
            &dims(info, coded, enc_layers),
            &Activation::plan(enc_layers),
            crate::seed::child_seed(seed, crate::seed::INIT, 0),
        )?;
        let decoder = FcNet::init_he(
            &dims(coded, info, dec_layers),
            &Activation::plan(dec_layers),
            crate::seed::child_seed(seed, crate::seed::INIT, 1),
        )?;
        Ok(AutoencoderModel {
            encoder,
            decoder,
            ofdm: ofdm.clone(),
            rate,
            link,
            trained_with: None,
        })
    }

    /// Checks that encoder and decoder chain with the OFDM configuration.
    pub fn validate(&self) -> Result<()> {
        self.ofdm.validate()?;
        let info = 2 * self.ofdm.n_subcarriers;
        let coded = coded_len(&self.ofdm, self.rate)?;
        let check = |expected: usize, actual: usize| {
            if expected != actual {
                Err(Error::DimensionMismatch { expected, actual })
            } else {
                Ok(())
            }
        };
        check(info, self.encoder.input_dim())?;
        check(coded, self.encoder.output_dim())?;
        check(coded, self.decoder.input_dim())?;
        check(info, self.decoder.output_dim())
    }

    pub fn info_len(&self) -> usize {
        2 * self.ofdm.n_subcarriers
    }

    pub fn coded_len(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn shape(&self) -> ModelShape {
        let hidden = |net: &FcNet| {
            let d = net.dims();
            d[1..d.len() - 1].iter().copied().max().unwrap_or(0)
        };
        let hidden_width = hidden(&self.encoder).max(hidden(&self.decoder));
        ModelShape {
            n_layers: self.encoder.depth() + self.decoder.depth(),
            hidden_width,
        }
    }

    /// Every weight layer, encoder first.
    pub fn layer_count(&self) -> usize {
        self.encoder.depth() + self.decoder.depth()
    }
}

/// Scales one block to unit average power per complex sample.
fn normalize_power(z: &[f64]) -> (Vec<f64>, f64) {
    let m = z.len() as f64 / 2.0;
    let energy: f64 = z.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return (z.to_vec(), energy);
    }
    let c = (m / energy).sqrt();
    (z.iter().map(|v| v * c).collect(), energy)
}

/// Gradient of [`normalize_power`]: `c (g - z (z·g) / S)`.
fn normalize_power_adjoint(z: &[f64], energy: f64, grad: &[f64]) -> Vec<f64> {
    if energy == 0.0 {
        return grad.to_vec();
    }
    let m = z.len() as f64 / 2.0;
    let c = (m / energy).sqrt();
    let zg: f64 = z.iter().zip(grad).map(|(a, b)| a * b).sum();
    z.iter()
        .zip(grad)
        .map(|(&zi, &gi)| c * (gi - zi * zg / energy))
        .collect()
}

/// Encoder forward pass plus power normalization.
pub fn encode(model: &AutoencoderModel, r: &[f64]) -> Result<Vec<f64>> {
    let trace = model.encoder.forward_float(r)?;
    Ok(normalize_power(trace.output()).0)
}

pub fn decode(model: &AutoencoderModel, y: &[f64]) -> Result<Vec<f64>> {
    Ok(model.decoder.forward_float(y)?.output().to_vec())
}

/// Mean squared error over elements.
pub fn loss(r: &[f64], r_hat: &[f64]) -> Result<f64> {
    if r.len() != r_hat.len() {
        return Err(Error::LengthMismatch {
            expected: r.len(),
            actual: r_hat.len(),
        });
    }
    if r.is_empty() {
        return Ok(0.0);
    }
    Ok(r.iter().zip(r_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r.len() as f64)
}

pub fn random_bits<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

/// One channel use per block: gains and pre-drawn noise.
#[derive(Clone, Debug)]
pub struct ChannelDraw {
    pub realization: ChannelRealization,
    pub noise: Vec<Complex64>,
}

impl ChannelDraw {
    pub fn draw<R: Rng + ?Sized>(kind: ChannelKind, n: usize, snr_db: f64, rng: &mut R) -> Self {
        let realization = ChannelRealization::draw(kind, n, snr_db, rng);
        let noise = draw_noise(&realization, rng);
        ChannelDraw { realization, noise }
    }
}

/// Frequency-domain receive side shared by every engine: channel, optional
/// ZF. Returns the decoder input and the indices of lost subcarriers.
pub(crate) fn through_channel(
    modem: &OfdmModem,
    tx: &[Complex64],
    draw: &ChannelDraw,
    equalize: bool,
) -> Result<(Vec<Complex64>, Vec<usize>)> {
    let wire = modem.transmit(tx)?;
    let freq = modem.receive(&wire)?;
    let y = apply_channel_with_noise(&freq, &draw.realization, &draw.noise)?;
    if equalize {
        let eq = equalize_zf(&y, &draw.realization.gains)?;
        Ok((eq.symbols, eq.singular))
    } else {
        Ok((y, Vec::new()))
    }
}

/// A mini-batch of information blocks with their channel draws.
#[derive(Clone, Debug)]
pub struct LinkBatch {
    /// `[batch × 2N]` transmitted 4-QAM symbols as reals.
    pub symbols: Array2<f64>,
    pub draws: Vec<ChannelDraw>,
}

impl LinkBatch {
    pub fn draw<R: Rng + ?Sized>(
        model: &AutoencoderModel,
        batch: usize,
        kind: ChannelKind,
        snr_db: [f64; 2],
        rng: &mut R,
    ) -> Result<Self> {
        let info = model.info_len();
        let coded_symbols = model.coded_len() / 2;
        let mut symbols = Array2::zeros((batch, info));
        let mut draws = Vec::with_capacity(batch);
        for mut row in symbols.rows_mut() {
            let bits = random_bits(info, rng);
            let reals = ofdmlink::to_reals(&ofdmlink::qam4_modulate(&bits)?);
            row.assign(&ndarray::ArrayView1::from(&reals));
            let snr = if snr_db[0] == snr_db[1] {
                snr_db[0]
            } else {
                rng.random_range(snr_db[0]..=snr_db[1])
            };
            draws.push(ChannelDraw::draw(kind, coded_symbols, snr, rng));
        }
        Ok(LinkBatch { symbols, draws })
    }
}

/// Loss and gradients of one batch through the full chain.
pub struct BatchOutcome {
    pub loss: f64,
    pub encoder: Gradients,
    pub decoder: Gradients,
}

/// Forward and backward pass of `batch`. The channel is a fixed linear map
/// plus fixed noise per sample, so gradients flow through it to the encoder.
pub fn batch_gradients(model: &AutoencoderModel, batch: &LinkBatch) -> Result<BatchOutcome> {
    let modem = OfdmModem::new(&model.ofdm)?;
    let n = batch.symbols.nrows();
    let coded = model.coded_len();
    let enc = model.encoder.forward_batch(batch.symbols.view())?;
    let mut dec_in = Array2::zeros((n, coded));
    let mut energies = Vec::with_capacity(n);
    for (i, z) in enc.output().rows().into_iter().enumerate() {
        let z = z.to_vec();
        let (s, energy) = normalize_power(&z);
        energies.push(energy);
        let tx = ofdmlink::from_reals(&s)?;
        let (rx, _) = through_channel(&modem, &tx, &batch.draws[i], model.link.equalize)?;
        dec_in
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&ofdmlink::to_reals(&rx)));
    }
    let dec = model.decoder.forward_batch(dec_in.view())?;
    let diff = dec.output() - &batch.symbols;
    let count = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    let d_out = diff * (2.0 / count);
    let (decoder, d_in) = model.decoder.backward_batch(&dec, &d_out)?;

    let mut d_enc = Array2::zeros((n, coded));
    for (i, g) in d_in.rows().into_iter().enumerate() {
        let gains = &batch.draws[i].realization.gains;
        let g = ofdmlink::from_reals(&g.to_vec())?;
        // ZF then channel: y = H x + e, x̂ = y / H; the real-linear adjoint of
        // multiplication by a is multiplication by conj(a)
        let g_freq: Vec<Complex64> = g
            .iter()
            .zip(gains)
            .map(|(&g, &h)| {
                let g = if model.link.equalize {
                    if h.norm() < SINGULAR_GAIN {
                        Complex64::new(0.0, 0.0)
                    } else {
                        g / h.conj()
                    }
                } else {
                    g
                };
                g * h.conj()
            })
            .collect();
        let g_tx = modem.wire_adjoint(&g_freq)?;
        let z = enc.output().row(i).to_vec();
        let g_z = normalize_power_adjoint(&z, energies[i], &ofdmlink::to_reals(&g_tx));
        d_enc.row_mut(i).assign(&ndarray::ArrayView1::from(&g_z));
    }
    let (encoder, _) = model.encoder.backward_batch(&enc, &d_enc)?;
    Ok(BatchOutcome { loss, encoder, decoder })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of every epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains encoder and decoder jointly with the channel in the loop. Channel
/// gains, noise and SNR are redrawn for every sample.
pub fn train<R: Rng + ?Sized>(
    model: &mut AutoencoderModel,
    cfg: &TrainConfig,
    link: LinkConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.validate()?;
    model.link = link;
    let mut enc_state = OptimizerState::new(&model.encoder);
    let mut dec_state = OptimizerState::new(&model.decoder);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let batch = LinkBatch::draw(model, cfg.batch_size, link.channel, cfg.snr_db, rng)?;
            let out = batch_gradients(model, &batch)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: out.loss,
                });
            }
            total += out.loss;
            optimizer_step(&mut model.encoder, &out.encoder, &mut enc_state, cfg)?;
            optimizer_step(&mut model.decoder, &out.decoder, &mut dec_state, cfg)?;
        }
        epoch_loss.push(total / cfg.batches_per_epoch as f64);
    }
    calibrate_ranges(model, cfg.snr_db, rng)?;
    model.trained_with = Some(cfg.clone());
    Ok(TrainReport { epoch_loss })
}

const CALIBRATION_BLOCKS: usize = 1024;

/// Magnitude that the [`CALIBRATION_QUANTILE`] of every hidden activation is
/// mapped to; leaves headroom inside a 3-integer-bit format.
pub const CALIBRATION_PEAK: f64 = 2.0;
/// Quantile of |activation| mapped onto [`CALIBRATION_PEAK`].
pub const CALIBRATION_QUANTILE: f64 = 0.999;

/// Moves activation ranges without changing the float model, so that a
/// fixed-point copy neither saturates nor wastes precision:
///
/// - the encoder output is scaled to unit mean power per complex sample
///   (power normalization cancels the scale);
/// - every hidden layer is scaled so that the given quantile of its
///   |activation| sits at [`CALIBRATION_PEAK`], with the next layer
///   compensating (see [`FcNet::rescale_hidden`]).
///
/// Statistics come from `CALIBRATION_BLOCKS` random blocks sent over the
/// model's channel at SNRs drawn from `snr_db`.
pub fn calibrate_ranges<R: Rng + ?Sized>(model: &mut AutoencoderModel, snr_db: [f64; 2], rng: &mut R) -> Result<()> {
    let batch = LinkBatch::draw(model, CALIBRATION_BLOCKS, model.link.channel, snr_db, rng)?;
    balance_hidden(&mut model.encoder, batch.symbols.view())?;

    let out = model.encoder.forward_batch(batch.symbols.view())?;
    let out = out.output();
    let power = out.iter().map(|v| v * v).sum::<f64>() / (out.len() as f64 / 2.0);
    if power > 0.0 && power.is_finite() {
        let c = power.sqrt().recip();
        let last = model.encoder.layers_mut().last_mut().expect("encoder has layers");
        last.weights *= c;
        last.bias *= c;
    }

    let coded = encode_batch(model, batch.symbols.view())?;
    let modem = OfdmModem::new(&model.ofdm)?;
    let mut received = Array2::zeros(coded.raw_dim());
    for ((z, mut y), draw) in coded.rows().into_iter().zip(received.rows_mut()).zip(&batch.draws) {
        let tx = ofdmlink::from_reals(&z.to_vec())?;
        let (rx, _) = through_channel(&modem, &tx, draw, model.link.equalize)?;
        y.assign(&ndarray::ArrayView1::from(&ofdmlink::to_reals(&rx)));
    }
    balance_hidden(&mut model.decoder, received.view())
}

fn balance_hidden(net: &mut FcNet, inputs: ArrayView2<f64>) -> Result<()> {
    let trace = net.forward_batch(inputs)?;
    for l in 0..net.depth() - 1 {
        let mut mags: Vec<f64> = trace.acts[l + 1].iter().map(|v| v.abs()).collect();
        let k = ((mags.len() - 1) as f64 * CALIBRATION_QUANTILE) as usize;
        let (_, q, _) = mags.select_nth_unstable_by(k, f64::total_cmp);
        let q = *q;
        if q > 0.0 && q.is_finite() {
            net.rescale_hidden(l, CALIBRATION_PEAK / q)?;
        }
    }
    Ok(())
}

/// Encoder and decoder on the fixed-point datapath.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedAutoencoder {
    pub encoder: FixedNet,
    pub decoder: FixedNet,
    pub ofdm: OfdmConfig,
    pub rate: f64,
    pub link: LinkConfig,
}

impl FixedAutoencoder {
    /// `model` must already be on `q`'s grid (see
    /// [`crate::paramdelivery::quantize_model`]).
    pub fn from_grid(model: &AutoencoderModel, q: QFormat) -> Result<Self> {
        Ok(FixedAutoencoder {
            encoder: FixedNet::from_grid(&model.encoder, q)?,
            decoder: FixedNet::from_grid(&model.decoder, q)?,
            ofdm: model.ofdm.clone(),
            rate: model.rate,
            link: model.link,
        })
    }

    pub fn format(&self) -> QFormat {
        self.encoder.format()
    }
}

/// Numeric engine of the learned blocks.
#[derive(Clone, Copy, Debug)]
pub enum Engine<'a> {
    Float(&'a AutoencoderModel),
    Fixed(&'a FixedAutoencoder),
    /// No learned blocks: 4-QAM straight onto the subcarriers. Reference mode.
    Uncoded {
        ofdm: &'a OfdmConfig,
        equalize: bool,
    },
}

impl Engine<'_> {
    pub fn ofdm(&self) -> &OfdmConfig {
        match self {
            Engine::Float(m) => &m.ofdm,
            Engine::Fixed(m) => &m.ofdm,
            Engine::Uncoded { ofdm, .. } => ofdm,
        }
    }

    /// Complex channel uses per block.
    pub fn channel_uses(&self) -> usize {
        match self {
            Engine::Float(m) => m.coded_len() / 2,
            Engine::Fixed(m) => m.encoder.output_dim() / 2,
            Engine::Uncoded { ofdm, .. } => ofdm.n_subcarriers,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Engine::Float(_) => "float".into(),
            Engine::Fixed(m) => format!("fixed({})", m.format()),
            Engine::Uncoded { .. } => "uncoded".into(),
        }
    }

    fn equalize(&self) -> bool {
        match self {
            Engine::Float(m) => m.link.equalize,
            Engine::Fixed(m) => m.link.equalize,
            Engine::Uncoded { equalize, .. } => *equalize,
        }
    }
}

/// Intermediate signals of one block. Fixed-point layer outputs are
/// dequantized.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkTaps {
    pub encoder_layers: Vec<Vec<f64>>,
    /// Power-normalized frequency-domain symbols handed to the IFFT.
    pub tx: Vec<Complex64>,
    /// Decoder input after the channel (and ZF when enabled).
    pub rx: Vec<Complex64>,
    pub decoder_layers: Vec<Vec<f64>>,
    /// Decoded information symbols.
    pub decoded: Vec<Complex64>,
    pub singular: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkOutput {
    pub bits: Vec<u8>,
    pub taps: LinkTaps,
}

/// Full transmit/receive chain for one block of `2N` bits with a fresh noise
/// draw.
pub fn end_to_end<R: Rng + ?Sized>(
    engine: Engine<'_>,
    bits: &[u8],
    realization: &ChannelRealization,
    rng: &mut R,
) -> Result<LinkOutput> {
    let draw = ChannelDraw {
        noise: draw_noise(realization, rng),
        realization: realization.clone(),
    };
    end_to_end_with(engine, bits, &draw, None)
}

/// [`end_to_end`] with a pre-drawn channel use and an optional cached modem.
pub fn end_to_end_with(
    engine: Engine<'_>,
    bits: &[u8],
    draw: &ChannelDraw,
    modem: Option<&OfdmModem>,
) -> Result<LinkOutput> {
    let owned;
    let modem = match modem {
        Some(m) => m,
        None => {
            owned = OfdmModem::new(engine.ofdm())?;
            &owned
        }
    };
    let expected = engine.ofdm().bits_per_block();
    if bits.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: bits.len(),
        });
    }
    if draw.realization.gains.len() != engine.channel_uses() {
        return Err(Error::LengthMismatch {
            expected: engine.channel_uses(),
            actual: draw.realization.gains.len(),
        });
    }
    let symbols = ofdmlink::qam4_modulate(bits)?;
    let r = ofdmlink::to_reals(&symbols);

    let encoder_layers = match engine {
        Engine::Float(m) => m.encoder.forward_float(&r)?.per_layer,
        Engine::Fixed(m) => m
            .encoder
            .forward_fixed(&r)?
            .per_layer
            .iter()
            .map(|t| t.to_reals())
            .collect(),
        Engine::Uncoded { .. } => Vec::new(),
    };
    let tx = match encoder_layers.last() {
        Some(z) => ofdmlink::from_reals(&normalize_power(z).0)?,
        None => symbols,
    };
    let (rx, singular) = through_channel(modem, &tx, draw, engine.equalize())?;
    let y = ofdmlink::to_reals(&rx);
    let decoder_layers = match engine {
        Engine::Float(m) => m.decoder.forward_float(&y)?.per_layer,
        Engine::Fixed(m) => m
            .decoder
            .forward_fixed(&y)?
            .per_layer
            .iter()
            .map(|t| t.to_reals())
            .collect(),
        Engine::Uncoded { .. } => Vec::new(),
    };
    let decoded = match decoder_layers.last() {
        Some(out) => ofdmlink::from_reals(out)?,
        None => rx.clone(),
    };
    Ok(LinkOutput {
        bits: ofdmlink::qam4_demodulate(&decoded),
        taps: LinkTaps {
            encoder_layers,
            tx,
            rx,
            decoder_layers,
            decoded,
            singular,
        },
    })
}

/// Batch form of [`encode`]; rows are blocks.
pub fn encode_batch(model: &AutoencoderModel, r: ArrayView2<f64>) -> Result<Array2<f64>> {
    let trace = model.encoder.forward_batch(r)?;
    let mut out = trace.output().clone();
    for mut row in out.rows_mut() {
        let (s, _) = normalize_power(&row.to_vec());
        row.assign(&ndarray::ArrayView1::from(&s));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::OptimizerKind;
    use crate::seed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> AutoencoderModel {
        let ofdm = OfdmConfig {
            n_subcarriers: 4,
            cp_len: 1,
            ..OfdmConfig::default()
        };
        let shape = ModelShape {
            n_layers: 4,
            hidden_width: 8,
        };
        AutoencoderModel::init(&ofdm, 1.0, shape, LinkConfig::new(ChannelKind::Rayleigh), seed).unwrap()
    }

    fn qam_block(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        ofdmlink::to_reals(&ofdmlink::qam4_modulate(&random_bits(2 * n, rng)).unwrap())
    }

    #[test]
    fn layer_split() {
        let s = ModelShape {
            n_layers: 5,
            hidden_width: 512,
        };
        assert_eq!((s.encoder_layers(), s.decoder_layers()), (2, 3));
        let m = AutoencoderModel::init(&OfdmConfig::default(), 1.0, s, LinkConfig::default(), 1).unwrap();
        assert_eq!(m.encoder.dims(), vec![32, 512, 32]);
        assert_eq!(m.decoder.dims(), vec![32, 512, 512, 32]);
        assert_eq!(m.shape(), s);
        let two = ModelShape {
            n_layers: 2,
            hidden_width: 512,
        };
        let m = AutoencoderModel::init(&OfdmConfig::default(), 1.0, two, LinkConfig::default(), 1).unwrap();
        assert_eq!(m.encoder.dims(), vec![32, 32]);
        assert_eq!(m.decoder.dims(), vec![32, 32]);
    }

    #[test]
    fn code_rate_sets_encoded_length() {
        let ofdm = OfdmConfig::default();
        assert_eq!(coded_len(&ofdm, 1.0).unwrap(), 32);
        assert_eq!(coded_len(&ofdm, 0.5).unwrap(), 64);
        assert!(coded_len(&ofdm, 2.0 / 3.0).is_err());
        assert!(coded_len(&ofdm, 0.0).is_err());
        let shape = ModelShape {
            n_layers: 3,
            hidden_width: 16,
        };
        let m = AutoencoderModel::init(&ofdm, 0.5, shape, LinkConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = encode(&m, &qam_block(&mut rng, 16)).unwrap();
        assert_eq!(z.len(), 64);
        assert_eq!(z.len() as f64 * 0.5, 32.0);
        assert_eq!(decode(&m, &z).unwrap().len(), 32);
    }

    #[test]
    fn encoder_output_has_unit_power() {
        let m = AutoencoderModel::init(
            &OfdmConfig::default(),
            1.0,
            ModelShape {
                n_layers: 5,
                hidden_width: 64,
            },
            LinkConfig::default(),
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<f64> = (0..20).flat_map(|_| qam_block(&mut rng, 16)).collect();
        let batch = Array2::from_shape_vec((20, 32), rows).unwrap();
        let z = encode_batch(&m, batch.view()).unwrap();
        let mean_power = z.iter().map(|v| v * v).sum::<f64>() / (z.len() as f64 / 2.0);
        assert!((mean_power - 1.0).abs() <= 1e-6);
        for row in z.rows() {
            let p = row.iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((p - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn decode_shapes_and_zero_input() {
        let m = AutoencoderModel::init(
            &OfdmConfig::default(),
            1.0,
            ModelShape {
                n_layers: 3,
                hidden_width: 32,
            },
            LinkConfig::default(),
            4,
        )
        .unwrap();
        let out = decode(&m, &[0.0; 32]).unwrap();
        assert_eq!(out.len(), 32);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(decode(&m, &[0.0; 31]).is_err());
        assert!(encode(&m, &[0.0; 30]).is_err());
        // an all-zero encoder output stays finite through normalization
        assert_eq!(normalize_power(&[0.0; 4]).0, vec![0.0; 4]);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn batch_loss(model: &AutoencoderModel, batch: &LinkBatch) -> f64 {
        batch_gradients(model, batch).unwrap().loss
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let model = tiny(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = LinkBatch::draw(&model, 3, ChannelKind::Rayleigh, [10.0, 10.0], &mut rng).unwrap();
        let grads = batch_gradients(&model, &batch).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for l in 0..model.encoder.depth() {
            let (rows, cols) = model.encoder.layers()[l].weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = model.clone();
                    plus.encoder.layers_mut()[l].weights[[r, c]] += h;
                    let mut minus = model.clone();
                    minus.encoder.layers_mut()[l].weights[[r, c]] -= h;
                    let numeric = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * h);
                    let g = grads.encoder.layers[l].weights[[r, c]];
                    let err = (numeric - g).abs() / (numeric.abs() + g.abs()).max(1e-6);
                    worst = worst.max(err);
                }
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn unequalized_gradient_matches_finite_differences() {
        let mut model = tiny(6);
        model.link.equalize = false;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = LinkBatch::draw(&model, 2, ChannelKind::Rayleigh, [15.0, 15.0], &mut rng).unwrap();
        let grads = batch_gradients(&model, &batch).unwrap();
        let h = 1e-5;
        let mut plus = model.clone();
        plus.encoder.layers_mut()[0].bias[3] += h;
        let mut minus = model.clone();
        minus.encoder.layers_mut()[0].bias[3] -= h;
        let numeric = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * h);
        let g = grads.encoder.layers[0].bias[3];
        assert!((numeric - g).abs() <= 1e-3 * numeric.abs().max(1e-6));
    }

    fn quick_cfg(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 32,
            epochs,
            batches_per_epoch: 20,
            optimizer: OptimizerKind::Adam,
            seed,
            snr_db: [20.0, 20.0],
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let run = || {
            let mut m = tiny(7);
            let mut rng = seed::stream(3, seed::TRAIN, 0);
            let report = train(&mut m, &quick_cfg(3, 10), LinkConfig::new(ChannelKind::Awgn), &mut rng).unwrap();
            (m, report)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epoch_loss.len(), 10);
        assert!(ra.epoch_loss[9] < ra.epoch_loss[0], "{:?}", ra.epoch_loss);
        assert!(a.trained_with.is_some());
    }

    #[test]
    fn trained_model_reconstructs_noiseless() {
        let ofdm = OfdmConfig {
            n_subcarriers: 4,
            cp_len: 1,
            ..OfdmConfig::default()
        };
        let shape = ModelShape {
            n_layers: 3,
            hidden_width: 32,
        };
        let link = LinkConfig::new(ChannelKind::Awgn);
        let mut m = AutoencoderModel::init(&ofdm, 1.0, shape, link, 8).unwrap();
        let mut rng = seed::stream(8, seed::TRAIN, 0);
        train(&mut m, &quick_cfg(8, 150), link, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let mut total = 0.0;
        for _ in 0..100 {
            let r = qam_block(&mut rng, 4);
            let out = decode(&m, &encode(&m, &r).unwrap()).unwrap();
            total += loss(&r, &out).unwrap();
        }
        assert!(total / 100.0 < 1e-2, "mse {}", total / 100.0);
        for _ in 0..100 {
            let bits = random_bits(8, &mut rng);
            let out = end_to_end(Engine::Float(&m), &bits, &ChannelRealization::identity(4), &mut rng).unwrap();
            assert_eq!(out.bits, bits);
        }
    }

    #[test]
    fn end_to_end_taps_and_errors() {
        let m = tiny(9);
        let q = QFormat::new(16, 3).unwrap();
        let qm = crate::paramdelivery::quantize_model(&m, q).unwrap();
        let fixed = FixedAutoencoder::from_grid(&qm.model, q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bits = random_bits(8, &mut rng);
        let real = ChannelRealization::identity(4);
        for engine in [Engine::Float(&m), Engine::Fixed(&fixed)] {
            let out = end_to_end(engine, &bits, &real, &mut rng).unwrap();
            assert_eq!(out.taps.encoder_layers.len(), 2);
            assert_eq!(out.taps.decoder_layers.len(), 2);
            assert_eq!(out.bits.len(), 8);
        }
        assert!(end_to_end(Engine::Float(&m), &bits[..6], &real, &mut rng).is_err());
        assert!(end_to_end(Engine::Float(&m), &bits, &ChannelRealization::identity(3), &mut rng).is_err());
        let ofdm = m.ofdm.clone();
        let out = end_to_end(
            Engine::Uncoded {
                ofdm: &ofdm,
                equalize: true,
            },
            &bits,
            &real,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.bits, bits);
    }

    #[test]
    fn untrained_and_trained_encoders_differ() {
        let m = tiny(10);
        let mut t = m.clone();
        let mut rng = seed::stream(10, seed::TRAIN, 0);
        train(&mut t, &quick_cfg(10, 1), LinkConfig::new(ChannelKind::Awgn), &mut rng).unwrap();
        let r = qam_block(&mut rng, 4);
        assert_ne!(encode(&m, &r).unwrap(), encode(&t, &r).unwrap());
    }

    #[test]
    fn constant_snr_range_is_valid() {
        let mut m = tiny(11);
        let mut rng = seed::stream(11, seed::TRAIN, 0);
        let cfg = TrainConfig {
            snr_db: [12.0, 12.0],
            ..quick_cfg(11, 2)
        };
        assert!(train(&mut m, &cfg, LinkConfig::new(ChannelKind::Rayleigh), &mut rng).is_ok());
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny(12);
        let mut rng = seed::stream(12, seed::TRAIN, 0);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            optimizer: OptimizerKind::Sgd,
            ..quick_cfg(12, 5)
        };
        assert!(matches!(
            train(&mut m, &cfg, LinkConfig::new(ChannelKind::Awgn), &mut rng),
            Err(Error::Divergence { .. }) | Err(Error::InvalidParameters(_))
        ));
    }
}
