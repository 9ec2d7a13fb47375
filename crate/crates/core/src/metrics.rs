//! Measurements of the fixed-point datapath: relative RMS and EVM, per-layer
//! implementation error, Monte-Carlo BER, structure sweeps and the per-layer
//! latency budget.
//!
//! Error percentages are *relative*: RMS of the difference divided by RMS of
//! the float reference. Per-layer figures pool every sample before the ratio
//! is taken.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{
    encode_batch, end_to_end_with, random_bits, through_channel, train, AutoencoderModel, ChannelDraw, Engine,
    LinkConfig, ModelShape,
};
use crate::error::{Error, Result};
use crate::fixedpoint::QFormat;
use crate::neuralnet::TrainConfig;
use crate::ofdmlink::{self, ChannelKind, OfdmConfig, OfdmModem};
use crate::paramdelivery::quantize_model;
use crate::seed;

/// `100 · rms(test − ref) / rms(ref)`.
pub fn relative_rms(reference: &[f64], test: &[f64]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            actual: test.len(),
        });
    }
    let (err, sig) = reference
        .iter()
        .zip(test)
        .fold((0.0, 0.0), |(e, s), (r, t)| (e + (t - r) * (t - r), s + r * r));
    ratio_pct(err, sig)
}

/// Error vector magnitude in percent.
pub fn evm(reference: &[Complex64], test: &[Complex64]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            actual: test.len(),
        });
    }
    let (err, sig) = reference
        .iter()
        .zip(test)
        .fold((0.0, 0.0), |(e, s), (r, t)| (e + (t - r).norm_sqr(), s + r.norm_sqr()));
    ratio_pct(err, sig)
}

fn ratio_pct(err: f64, sig: f64) -> Result<f64> {
    if sig == 0.0 || !sig.is_finite() {
        return Err(Error::ZeroReference);
    }
    Ok(100.0 * (err / sig).sqrt())
}

/// Short name for a model's structure, e.g. `L5W512`.
pub fn model_descriptor(model: &AutoencoderModel) -> String {
    let s = model.shape();
    format!("L{}W{}", s.n_layers, s.hidden_width)
}

/// Channel the layer-error probe blocks travel through.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub channel: ChannelKind,
    pub snr_db: f64,
}

pub const DEFAULT_PROBE_SNR_DB: f64 = 30.0;
/// Implementation error is measured on in-range inputs by default. Under
/// Rayleigh fading with ZF, a few deep-fade subcarriers push decoder inputs
/// far past any fixed-point range and dominate the pooled RMS.
pub const DEFAULT_PROBE_CHANNEL: ChannelKind = ChannelKind::Awgn;

impl Default for Probe {
    fn default() -> Self {
        Probe {
            channel: DEFAULT_PROBE_CHANNEL,
            snr_db: DEFAULT_PROBE_SNR_DB,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerErrorReport {
    pub model_id: String,
    pub format: QFormat,
    /// Relative RMS error (%) of every weight layer, encoder first.
    pub rel_rms_pct: Vec<f64>,
    /// EVM of the decoded symbols, fixed against float.
    pub decoder_evm_pct: f64,
    pub n_samples: usize,
    pub probe: Probe,
    /// Parameters clipped while quantizing.
    pub saturations: usize,
    /// Decoder input samples outside the format's range.
    pub input_clips: usize,
}

impl LayerErrorReport {
    pub fn first(&self) -> f64 {
        self.rel_rms_pct[0]
    }

    pub fn last(&self) -> f64 {
        self.rel_rms_pct[self.rel_rms_pct.len() - 1]
    }
}

/// [`layer_error_report_with`] with the default [`Probe`].
pub fn layer_error_report<R: Rng + ?Sized>(
    model: &AutoencoderModel,
    q: QFormat,
    n_samples: usize,
    rng: &mut R,
) -> Result<LayerErrorReport> {
    layer_error_report_with(model, q, n_samples, Probe::default(), rng)
}

/// Sends `n_samples` random blocks through the float model and its `q`
/// quantized twin. Both see the same bits, channel gains and noise; each
/// datapath feeds its own decoder, so encoder error propagates to the decoder
/// as it would on hardware.
pub fn layer_error_report_with<R: Rng + ?Sized>(
    model: &AutoencoderModel,
    q: QFormat,
    n_samples: usize,
    probe: Probe,
    rng: &mut R,
) -> Result<LayerErrorReport> {
    if n_samples == 0 {
        return Err(Error::InvalidParameters("n_samples must be positive".into()));
    }
    let quantized = quantize_model(model, q)?;
    let fixed = quantized.fixed()?;
    let modem = OfdmModem::new(&model.ofdm)?;
    let layers = model.layer_count();
    let mut err = vec![0.0; layers];
    let mut sig = vec![0.0; layers];
    let (mut evm_err, mut evm_sig) = (0.0, 0.0);
    let mut input_clips = 0;
    let uses = model.coded_len() / 2;
    for _ in 0..n_samples {
        let bits = random_bits(model.info_len(), rng);
        let draw = ChannelDraw::draw(probe.channel, uses, probe.snr_db, rng);
        let a = end_to_end_with(Engine::Float(model), &bits, &draw, Some(&modem))?;
        let b = end_to_end_with(Engine::Fixed(&fixed), &bits, &draw, Some(&modem))?;
        let fa = a.taps.encoder_layers.iter().chain(&a.taps.decoder_layers);
        let fb = b.taps.encoder_layers.iter().chain(&b.taps.decoder_layers);
        for (l, (x, y)) in fa.zip(fb).enumerate() {
            for (u, v) in x.iter().zip(y) {
                err[l] += (v - u) * (v - u);
                sig[l] += u * u;
            }
        }
        input_clips += a
            .taps
            .rx
            .iter()
            .flat_map(|z| [z.re, z.im])
            .filter(|v| *v < q.min_value() || *v > q.max_value())
            .count();
        for (u, v) in a.taps.decoded.iter().zip(&b.taps.decoded) {
            evm_err += (v - u).norm_sqr();
            evm_sig += u.norm_sqr();
        }
    }
    let rel_rms_pct = err
        .iter()
        .zip(&sig)
        .map(|(&e, &s)| ratio_pct(e, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerErrorReport {
        model_id: model_descriptor(model),
        format: q,
        rel_rms_pct,
        decoder_evm_pct: ratio_pct(evm_err, evm_sig)?,
        n_samples,
        probe,
        saturations: quantized.saturations,
        input_clips,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BerPoint {
    pub snr_db: f64,
    pub ber: f64,
    pub bits: u64,
    pub errors: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BerCurve {
    pub engine: String,
    pub channel: ChannelKind,
    pub points: Vec<BerPoint>,
}

pub const MIN_BITS_FLOOR: u64 = 10_000;
/// A point stops early once this many errors are seen (and `min_bits` met).
pub const TARGET_ERRORS: u64 = 100;
const CHUNK_BLOCKS: u64 = 256;

/// Monte-Carlo BER at each SNR. Every point runs at least `min_bits` and stops
/// at [`TARGET_ERRORS`] errors or `max_bits`, checked per chunk of blocks.
pub fn ber_sweep<R: Rng + ?Sized>(
    engine: Engine<'_>,
    channel: ChannelKind,
    snr_db: &[f64],
    min_bits: u64,
    max_bits: u64,
    rng: &mut R,
) -> Result<BerCurve> {
    if min_bits < MIN_BITS_FLOOR {
        return Err(Error::InvalidParameters(format!(
            "min_bits must be at least {MIN_BITS_FLOOR}, got {min_bits}"
        )));
    }
    if max_bits < min_bits {
        return Err(Error::InvalidParameters("max_bits is below min_bits".into()));
    }
    if snr_db.is_empty() || snr_db.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameters("need at least one SNR point".into()));
    }
    let modem = OfdmModem::new(engine.ofdm())?;
    let per_block = engine.ofdm().bits_per_block() as u64;
    let uses = engine.channel_uses();
    let mut points = Vec::with_capacity(snr_db.len());
    for &snr in snr_db {
        let (mut bits, mut errors) = (0u64, 0u64);
        while bits < min_bits || (errors < TARGET_ERRORS && bits < max_bits) {
            let room = max_bits.saturating_sub(bits).div_ceil(per_block);
            let n = room.clamp(1, CHUNK_BLOCKS) as usize;
            let tx: Vec<Vec<u8>> = (0..n).map(|_| random_bits(per_block as usize, rng)).collect();
            let draws: Vec<ChannelDraw> = (0..n).map(|_| ChannelDraw::draw(channel, uses, snr, rng)).collect();
            let rx = decide_blocks(engine, &modem, &tx, &draws)?;
            for (a, b) in tx.iter().zip(&rx) {
                errors += a.iter().zip(b).filter(|(x, y)| x != y).count() as u64;
            }
            bits += n as u64 * per_block;
        }
        points.push(BerPoint {
            snr_db: snr,
            ber: errors as f64 / bits as f64,
            bits,
            errors,
        });
    }
    Ok(BerCurve {
        engine: engine.label(),
        channel,
        points,
    })
}

/// Decided bits of a group of blocks. The float engine runs as a batch.
fn decide_blocks(engine: Engine<'_>, modem: &OfdmModem, tx: &[Vec<u8>], draws: &[ChannelDraw]) -> Result<Vec<Vec<u8>>> {
    let Engine::Float(model) = engine else {
        return tx
            .iter()
            .zip(draws)
            .map(|(bits, draw)| Ok(end_to_end_with(engine, bits, draw, Some(modem))?.bits))
            .collect();
    };
    let info = model.info_len();
    let mut symbols = Array2::zeros((tx.len(), info));
    for (mut row, bits) in symbols.rows_mut().into_iter().zip(tx) {
        let reals = ofdmlink::to_reals(&ofdmlink::qam4_modulate(bits)?);
        row.assign(&ArrayView1::from(&reals));
    }
    let coded = encode_batch(model, symbols.view())?;
    let mut received = Array2::zeros(coded.raw_dim());
    for ((z, mut y), draw) in coded.rows().into_iter().zip(received.rows_mut()).zip(draws) {
        let tx = ofdmlink::from_reals(&z.to_vec())?;
        let (rx, _) = through_channel(modem, &tx, draw, model.link.equalize)?;
        y.assign(&ArrayView1::from(&ofdmlink::to_reals(&rx)));
    }
    let trace = model.decoder.forward_batch(received.view())?;
    trace
        .output()
        .rows()
        .into_iter()
        .map(|r| Ok(ofdmlink::qam4_demodulate(&ofdmlink::from_reals(&r.to_vec())?)))
        .collect()
}

/// Processing-array parameters of the latency model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    /// MAC units working in parallel on one layer.
    pub parallel_macs: u64,
    pub pipeline_depth: u64,
    pub clock_hz: u64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            parallel_macs: 512,
            pipeline_depth: 4,
            clock_hz: 100_000_000,
        }
    }
}

/// Encoder and decoder layers of the default 5-layer, 512-node model, chained.
pub const DEFAULT_LATENCY_DIMS: [usize; 6] = [32, 512, 32, 512, 512, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLatency {
    pub layer_idx: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub macs: u64,
    pub cycles: u64,
    pub time_us: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyEstimate {
    pub config: LatencyConfig,
    pub layers: Vec<LayerLatency>,
    /// Samples per OFDM symbol including the cyclic prefix.
    pub symbol_samples: u64,
    pub sample_rate: u64,
    pub budget_us: f64,
}

impl LatencyEstimate {
    pub fn pass(&self) -> bool {
        self.layers.iter().all(|l| l.pass)
    }
}

/// Cycles per layer are `ceil(in·out / P) + D`. A layer passes when it
/// finishes within one OFDM symbol; the comparison is exact in integers.
pub fn estimate_latency(dims: &[usize], cfg: &LatencyConfig, ofdm: &OfdmConfig) -> Result<LatencyEstimate> {
    if cfg.parallel_macs == 0 || cfg.clock_hz == 0 {
        return Err(Error::InvalidParameters(
            "parallel_macs and clock_hz must be positive".into(),
        ));
    }
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidParameters(
            "need at least two non-zero layer dimensions".into(),
        ));
    }
    if ofdm.sample_rate == 0 {
        return Err(Error::InvalidParameters("sample_rate must be positive".into()));
    }
    let symbol_samples = ofdm.symbol_samples() as u64;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, d)| {
            let macs = d[0] as u64 * d[1] as u64;
            let cycles = macs.div_ceil(cfg.parallel_macs) + cfg.pipeline_depth;
            let pass = u128::from(cycles) * u128::from(ofdm.sample_rate)
                < u128::from(symbol_samples) * u128::from(cfg.clock_hz);
            LayerLatency {
                layer_idx: i,
                in_dim: d[0],
                out_dim: d[1],
                macs,
                cycles,
                time_us: cycles as f64 * 1e6 / cfg.clock_hz as f64,
                pass,
            }
        })
        .collect();
    Ok(LatencyEstimate {
        config: *cfg,
        layers,
        symbol_samples,
        sample_rate: ofdm.sample_rate,
        budget_us: symbol_samples as f64 * 1e6 / ofdm.sample_rate as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BitWidth,
    HiddenNodes,
    NLayers,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::BitWidth => "bit_width",
            SweepAxis::HiddenNodes => "hidden_nodes",
            SweepAxis::NLayers => "n_layers",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bit_width" => Ok(SweepAxis::BitWidth),
            "hidden_nodes" => Ok(SweepAxis::HiddenNodes),
            "n_layers" => Ok(SweepAxis::NLayers),
            other => Err(Error::InvalidConfig(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Which engine the reference-SNR BER of a sweep row uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BerEngine {
    Float,
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub ofdm: OfdmConfig,
    pub rate: f64,
    /// Structure of the swept models; the swept field is overridden.
    pub shape: ModelShape,
    pub link: LinkConfig,
    pub train: TrainConfig,
    /// Q-format of the fixed counterpart; for the bit-width axis only its
    /// integer bits are kept.
    pub format: QFormat,
    pub n_samples: usize,
    pub ref_snr_db: f64,
    /// Channel of the layer-error probe; BER uses `link.channel`.
    pub probe_channel: ChannelKind,
    pub ber_engine: BerEngine,
    pub ber_min_bits: u64,
    pub ber_max_bits: u64,
    /// Already-trained model for a bit-width sweep; trained per seed if unset.
    pub model: Option<AutoencoderModel>,
    pub output: Option<PathBuf>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one value".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
        }
        if self.model.is_some() && self.axis != SweepAxis::BitWidth {
            return Err(Error::InvalidConfig(
                "a pre-trained model only fits a bit_width sweep".into(),
            ));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub seed: u64,
    pub layer_rms_pct: Vec<f64>,
    pub final_rms_pct: f64,
    pub ber_ref: f64,
}

/// Initializes and trains one model; the seed drives both initialization and
/// the training stream.
pub fn train_seeded(
    ofdm: &OfdmConfig,
    rate: f64,
    shape: ModelShape,
    link: LinkConfig,
    train_cfg: &TrainConfig,
    seed_value: u64,
) -> Result<AutoencoderModel> {
    let mut model = AutoencoderModel::init(ofdm, rate, shape, link, seed_value)?;
    let cfg = TrainConfig {
        seed: seed_value,
        ..train_cfg.clone()
    };
    let mut rng = seed::stream(seed_value, seed::TRAIN, 0);
    train(&mut model, &cfg, link, &mut rng)?;
    Ok(model)
}

/// [`run_sweep_with`] that also writes `spec.output` as `sweep.csv`, flushing
/// each row as it completes.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let Some(path) = &spec.output else {
        return run_sweep_with(spec, |_| Ok(()));
    };
    let mut out = SweepWriter::create(path)?;
    run_sweep_with(spec, |row| out.push(row))
}

/// Trains (or reuses) one model per (value, seed), quantizes it and records
/// per-layer error and BER at the reference SNR. Rows come in value-major
/// order; every row draws its probes from streams keyed by its seed only, so
/// rows of one seed share inputs.
pub fn run_sweep_with(spec: &SweepSpec, mut on_row: impl FnMut(&SweepRow) -> Result<()>) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len() * spec.seeds.len());
    let mut shared: Vec<Option<AutoencoderModel>> = vec![None; spec.seeds.len()];
    for &value in &spec.values {
        for (si, &seed_value) in spec.seeds.iter().enumerate() {
            let mut shape = spec.shape;
            let mut format = spec.format;
            match spec.axis {
                SweepAxis::BitWidth => format = QFormat::new(value as u32, spec.format.int_bits())?,
                SweepAxis::HiddenNodes => shape.hidden_width = value,
                SweepAxis::NLayers => shape.n_layers = value,
            }
            let fresh;
            let model = if spec.axis == SweepAxis::BitWidth {
                if shared[si].is_none() {
                    shared[si] = Some(match &spec.model {
                        Some(m) => m.clone(),
                        None => train_seeded(&spec.ofdm, spec.rate, shape, spec.link, &spec.train, seed_value)?,
                    });
                }
                shared[si].as_ref().expect("model set above")
            } else {
                fresh = train_seeded(&spec.ofdm, spec.rate, shape, spec.link, &spec.train, seed_value)?;
                &fresh
            };
            let mut rng = seed::stream(seed_value, seed::EVAL, 0);
            let report = layer_error_report_with(
                model,
                format,
                spec.n_samples,
                Probe {
                    channel: spec.probe_channel,
                    snr_db: spec.ref_snr_db,
                },
                &mut rng,
            )?;
            let mut rng = seed::stream(seed_value, seed::BER, 0);
            let curve = match spec.ber_engine {
                BerEngine::Float => ber_sweep(
                    Engine::Float(model),
                    spec.link.channel,
                    &[spec.ref_snr_db],
                    spec.ber_min_bits,
                    spec.ber_max_bits,
                    &mut rng,
                )?,
                BerEngine::Fixed => {
                    let fixed = quantize_model(model, format)?.fixed()?;
                    ber_sweep(
                        Engine::Fixed(&fixed),
                        spec.link.channel,
                        &[spec.ref_snr_db],
                        spec.ber_min_bits,
                        spec.ber_max_bits,
                        &mut rng,
                    )?
                }
            };
            let row = SweepRow {
                axis: spec.axis,
                value,
                seed: seed_value,
                final_rms_pct: report.last(),
                layer_rms_pct: report.rel_rms_pct,
                ber_ref: curve.points[0].ber,
            };
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerErrorRecord {
    pub model_id: String,
    pub bit_width: u32,
    pub layer_idx: usize,
    pub rel_rms_pct: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerRecord {
    pub model_id: String,
    pub engine: String,
    pub channel: String,
    pub snr_db: f64,
    pub ber: f64,
    pub bits: u64,
    pub errors: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: SweepAxis,
    pub value: usize,
    pub seed: u64,
    pub final_rms_pct: f64,
    pub ber_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub layer_idx: usize,
    pub macs: u64,
    pub cycles: u64,
    pub time_us: f64,
    pub budget_us: f64,
    pub pass: bool,
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_all<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = writer(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes any of the record types above as CSV with a header row.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_all(path, records)
}

pub fn layer_error_records(report: &LayerErrorReport) -> impl Iterator<Item = LayerErrorRecord> + '_ {
    report.rel_rms_pct.iter().enumerate().map(|(i, &v)| LayerErrorRecord {
        model_id: report.model_id.clone(),
        bit_width: report.format.total_bits(),
        layer_idx: i,
        rel_rms_pct: v,
        n_samples: report.n_samples,
    })
}

pub fn write_layer_error_csv(path: &Path, reports: &[LayerErrorReport]) -> Result<()> {
    write_all(path, reports.iter().flat_map(layer_error_records))
}

pub fn write_ber_csv(path: &Path, model_id: &str, curves: &[BerCurve]) -> Result<()> {
    write_all(
        path,
        curves.iter().flat_map(|c| {
            c.points.iter().map(move |p| BerRecord {
                model_id: model_id.to_string(),
                engine: c.engine.clone(),
                channel: c.channel.to_string(),
                snr_db: p.snr_db,
                ber: p.ber,
                bits: p.bits,
                errors: p.errors,
            })
        }),
    )
}

pub fn write_latency_csv(path: &Path, estimate: &LatencyEstimate) -> Result<()> {
    write_all(
        path,
        estimate.layers.iter().map(|l| LatencyRecord {
            layer_idx: l.layer_idx,
            macs: l.macs,
            cycles: l.cycles,
            time_us: l.time_us,
            budget_us: estimate.budget_us,
            pass: l.pass,
        }),
    )
}

impl From<&SweepRow> for SweepRecord {
    fn from(r: &SweepRow) -> Self {
        SweepRecord {
            axis: r.axis,
            value: r.value,
            seed: r.seed,
            final_rms_pct: r.final_rms_pct,
            ber_ref: r.ber_ref,
        }
    }
}

/// Incremental `sweep.csv` writer; each row is flushed to disk.
pub struct SweepWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl SweepWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(SweepWriter {
            path: path.to_path_buf(),
            inner: writer(path)?,
        })
    }

    pub fn push(&mut self, row: &SweepRow) -> Result<()> {
        self.inner.serialize(SweepRecord::from(row))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_all(path, rows.iter().map(SweepRecord::from))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for r in csv::Reader::from_reader(file).deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

/// One line of an aggregated per-figure table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureRecord {
    pub value: usize,
    pub seeds: usize,
    pub mean_final_rms_pct: f64,
    pub min_final_rms_pct: f64,
    pub max_final_rms_pct: f64,
    pub mean_ber_ref: f64,
}

/// Groups sweep records of one axis by value, ascending.
pub fn aggregate_sweep(records: &[SweepRecord], axis: SweepAxis) -> Vec<FigureRecord> {
    let mut groups: std::collections::BTreeMap<usize, Vec<&SweepRecord>> = Default::default();
    for r in records.iter().filter(|r| r.axis == axis) {
        groups.entry(r.value).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(value, g)| {
            let n = g.len() as f64;
            let rms = g.iter().map(|r| r.final_rms_pct);
            FigureRecord {
                value,
                seeds: g.len(),
                mean_final_rms_pct: rms.clone().sum::<f64>() / n,
                min_final_rms_pct: rms.clone().fold(f64::INFINITY, f64::min),
                max_final_rms_pct: rms.fold(f64::NEG_INFINITY, f64::max),
                mean_ber_ref: g.iter().map(|r| r.ber_ref).sum::<f64>() / n,
            }
        })
        .collect()
}

pub fn write_figure_csv(path: &Path, rows: &[FigureRecord]) -> Result<()> {
    write_all(path, rows.iter())
}

/// Writes a short text line; used by the CLI for human-readable summaries.
pub fn write_line(out: &mut impl Write, line: &str) -> std::io::Result<()> {
    writeln!(out, "{line}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::OptimizerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relative_rms_examples() {
        let r = vec![1.0; 10];
        assert_eq!(relative_rms(&r, &r).unwrap(), 0.0);
        let t = vec![1.01; 10];
        assert!((relative_rms(&r, &t).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(relative_rms(&[0.0; 4], &[1.0; 4]), Err(Error::ZeroReference)));
        assert!(relative_rms(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn evm_examples() {
        let r: Vec<Complex64> = (0..8).map(|i| Complex64::new(i as f64, 1.0 - i as f64)).collect();
        assert_eq!(evm(&r, &r).unwrap(), 0.0);
        let t: Vec<Complex64> = r.iter().map(|z| z * 1.01).collect();
        assert!((evm(&r, &t).unwrap() - 1.0).abs() < 1e-9);
        assert!(evm(&[Complex64::new(0.0, 0.0)], &[Complex64::new(1.0, 0.0)]).is_err());
    }

    #[test]
    fn metrics_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t: Vec<f64> = r.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            let c = rng.random_range(0.01..100.0);
            let rs: Vec<f64> = r.iter().map(|v| v * c).collect();
            let ts: Vec<f64> = t.iter().map(|v| v * c).collect();
            let a = relative_rms(&r, &t).unwrap();
            assert!((a - relative_rms(&rs, &ts).unwrap()).abs() <= 1e-9 * a.max(1.0));
            let rc = ofdmlink::from_reals(&r).unwrap();
            let tc = ofdmlink::from_reals(&t).unwrap();
            let rcs: Vec<Complex64> = rc.iter().map(|z| z * c).collect();
            let tcs: Vec<Complex64> = tc.iter().map(|z| z * c).collect();
            let e = evm(&rc, &tc).unwrap();
            assert!((e - evm(&rcs, &tcs).unwrap()).abs() <= 1e-9 * e.max(1.0));
        }
    }

    #[test]
    fn latency_examples() {
        let ofdm = OfdmConfig::default();
        let cfg = LatencyConfig::default();
        let est = estimate_latency(&[512, 512], &cfg, &ofdm).unwrap();
        assert_eq!(est.layers[0].macs, 262_144);
        assert_eq!(est.layers[0].cycles, 516);
        assert!((est.layers[0].time_us - 5.16).abs() < 1e-12);
        assert_eq!(est.budget_us, 20.0);
        assert!(est.pass());

        let slow = LatencyConfig {
            parallel_macs: 1,
            ..cfg
        };
        let est = estimate_latency(&[512, 512], &slow, &ofdm).unwrap();
        assert_eq!(est.layers[0].cycles, 262_148);
        assert!((est.layers[0].time_us - 2621.48).abs() < 1e-9);
        assert!(!est.pass());

        let est = estimate_latency(&DEFAULT_LATENCY_DIMS, &cfg, &ofdm).unwrap();
        assert_eq!(est.layers.len(), 5);
        assert!(est.pass());
        assert!(estimate_latency(
            &[512, 512],
            &LatencyConfig {
                parallel_macs: 0,
                ..cfg
            },
            &ofdm
        )
        .is_err());
        assert!(estimate_latency(&[512, 512], &LatencyConfig { clock_hz: 0, ..cfg }, &ofdm).is_err());
    }

    #[test]
    fn latency_boundary_is_strict() {
        // exactly one symbol of cycles does not pass
        let ofdm = OfdmConfig::default();
        let cfg = LatencyConfig {
            parallel_macs: 1,
            pipeline_depth: 0,
            clock_hz: 100_000_000,
        };
        let est = estimate_latency(&[1000, 2], &cfg, &ofdm).unwrap();
        assert_eq!(est.layers[0].cycles, 2000);
        assert!(!est.layers[0].pass);
        let est = estimate_latency(&[1999, 1], &cfg, &ofdm).unwrap();
        assert!(est.layers[0].pass);
    }

    fn tiny_trained(seed_value: u64) -> AutoencoderModel {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 32,
            epochs: 30,
            batches_per_epoch: 100,
            optimizer: OptimizerKind::Adam,
            seed: seed_value,
            snr_db: [15.0, 25.0],
        };
        train_seeded(
            &OfdmConfig::default(),
            1.0,
            ModelShape {
                n_layers: 3,
                hidden_width: 64,
            },
            LinkConfig::new(ChannelKind::Awgn),
            &cfg,
            seed_value,
        )
        .unwrap()
    }

    #[test]
    fn layer_report_shape_and_precision_limit() {
        let m = tiny_trained(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = layer_error_report(&m, QFormat::new(32, 3).unwrap(), 200, &mut rng).unwrap();
        assert_eq!(r.rel_rms_pct.len(), 3);
        assert!(r.rel_rms_pct.iter().all(|&v| (0.0..1e-3).contains(&v)), "{r:?}");
        assert_eq!(r.n_samples, 200);
    }

    #[test]
    fn wider_formats_never_do_worse() {
        let m = tiny_trained(2);
        let probe = Probe {
            channel: ChannelKind::Awgn,
            snr_db: 20.0,
        };
        let mut prev: Option<LayerErrorReport> = None;
        for bits in [8, 16, 24, 32] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let r = layer_error_report_with(&m, QFormat::new(bits, 3).unwrap(), 300, probe, &mut rng).unwrap();
            if let Some(p) = &prev {
                for (a, b) in r.rel_rms_pct.iter().zip(&p.rel_rms_pct) {
                    assert!(a <= b, "{bits}: {:?} vs {:?}", r.rel_rms_pct, p.rel_rms_pct);
                }
            }
            prev = Some(r);
        }
    }

    #[test]
    fn ber_sweep_contracts() {
        let m = tiny_trained(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let curve = ber_sweep(
            Engine::Float(&m),
            ChannelKind::Awgn,
            &[f64::INFINITY],
            10_000,
            20_000,
            &mut rng,
        )
        .unwrap();
        assert_eq!(curve.points[0].errors, 0);
        assert!(curve.points[0].bits >= 10_000);

        let run = |seed_value| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
            ber_sweep(
                Engine::Float(&m),
                ChannelKind::Awgn,
                &[0.0, 5.0, 10.0],
                10_000,
                50_000,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(9);
        assert_eq!(a, run(9));
        for p in &a.points {
            assert!((0.0..=1.0).contains(&p.ber));
            assert!(p.bits >= 10_000 && p.bits <= 50_000 + 256 * 32);
        }
        for w in a.points.windows(2) {
            let sigma = |p: &BerPoint| (p.ber.max(1e-6) * (1.0 - p.ber) / p.bits as f64).sqrt();
            assert!(w[1].ber <= w[0].ber + 2.0 * (sigma(&w[0]) + sigma(&w[1])));
        }
        assert!(ber_sweep(Engine::Float(&m), ChannelKind::Awgn, &[0.0], 100, 1000, &mut rng).is_err());
        assert!(ber_sweep(Engine::Float(&m), ChannelKind::Awgn, &[], 10_000, 10_000, &mut rng).is_err());
    }

    #[test]
    fn float_batch_path_matches_per_block() {
        let m = tiny_trained(4);
        let modem = OfdmModem::new(&m.ofdm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tx: Vec<Vec<u8>> = (0..40).map(|_| random_bits(32, &mut rng)).collect();
        let draws: Vec<ChannelDraw> = (0..40)
            .map(|_| ChannelDraw::draw(ChannelKind::Awgn, 16, 3.0, &mut rng))
            .collect();
        let batch = decide_blocks(Engine::Float(&m), &modem, &tx, &draws).unwrap();
        for ((bits, draw), got) in tx.iter().zip(&draws).zip(&batch) {
            let single = end_to_end_with(Engine::Float(&m), bits, draw, Some(&modem)).unwrap();
            assert_eq!(&single.bits, got);
        }
    }

    fn sweep_spec(axis: SweepAxis, values: Vec<usize>) -> SweepSpec {
        SweepSpec {
            axis,
            values,
            seeds: vec![1],
            ofdm: OfdmConfig::default(),
            rate: 1.0,
            shape: ModelShape {
                n_layers: 3,
                hidden_width: 16,
            },
            link: LinkConfig::new(ChannelKind::Awgn),
            probe_channel: ChannelKind::Awgn,
            train: TrainConfig {
                epochs: 1,
                batches_per_epoch: 20,
                batch_size: 16,
                ..TrainConfig::default()
            },
            format: QFormat::new(16, 3).unwrap(),
            n_samples: 100,
            ref_snr_db: 20.0,
            ber_engine: BerEngine::Fixed,
            ber_min_bits: 10_000,
            ber_max_bits: 10_000,
            model: None,
            output: None,
        }
    }

    #[test]
    fn bit_width_sweep_rows_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = sweep_spec(SweepAxis::BitWidth, vec![8, 16, 24]);
        spec.output = Some(dir.path().join("sweep.csv"));
        let rows = run_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].final_rms_pct > rows[1].final_rms_pct);
        assert!(rows[1].final_rms_pct > rows[2].final_rms_pct);
        let back = read_sweep_csv(spec.output.as_ref().unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1], SweepRecord::from(&rows[1]));
        let text = std::fs::read_to_string(spec.output.as_ref().unwrap()).unwrap();
        assert!(text.starts_with("axis,value,seed,final_rms_pct,ber_ref\nbit_width,8,1,"));
        let fig = aggregate_sweep(&back, SweepAxis::BitWidth);
        assert_eq!(fig.len(), 3);
        assert!(aggregate_sweep(&back, SweepAxis::NLayers).is_empty());
    }

    #[test]
    fn sweep_spec_validation() {
        let mut spec = sweep_spec(SweepAxis::NLayers, vec![]);
        assert!(run_sweep(&spec).is_err());
        spec.values = vec![2];
        spec.seeds.clear();
        assert!(run_sweep(&spec).is_err());
        assert!("depth".parse::<SweepAxis>().is_err());
        assert_eq!("hidden_nodes".parse::<SweepAxis>().unwrap(), SweepAxis::HiddenNodes);
    }

    #[test]
    fn csv_column_orders() {
        let dir = tempfile::tempdir().unwrap();
        let est = estimate_latency(&[32, 512], &LatencyConfig::default(), &OfdmConfig::default()).unwrap();
        let p = dir.path().join("latency.csv");
        write_latency_csv(&p, &est).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "layer_idx,macs,cycles,time_us,budget_us,pass"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("0,16384,36,"));

        let curve = BerCurve {
            engine: "float".into(),
            channel: ChannelKind::Rayleigh,
            points: vec![BerPoint {
                snr_db: 30.0,
                ber: 0.001,
                bits: 100_000,
                errors: 100,
            }],
        };
        let p = dir.path().join("ber.csv");
        write_ber_csv(&p, "L5W512", &[curve]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "model_id,engine,channel,snr_db,ber,bits,errors\nL5W512,float,rayleigh,30.0,0.001,100000,100\n"
        );

        let report = LayerErrorReport {
            model_id: "L3W16".into(),
            format: QFormat::new(16, 3).unwrap(),
            rel_rms_pct: vec![0.1, 0.2],
            decoder_evm_pct: 0.2,
            n_samples: 10,
            probe: Probe {
                channel: ChannelKind::Awgn,
                snr_db: 30.0,
            },
            saturations: 0,
            input_clips: 0,
        };
        let p = dir.path().join("layer_error.csv");
        write_layer_error_csv(&p, &[report]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "model_id,bit_width,layer_idx,rel_rms_pct,n_samples\nL3W16,16,0,0.1,10\nL3W16,16,1,0.2,10\n"
        );
    }
}
