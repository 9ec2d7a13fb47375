//! TOML run configuration. Every section is optional; unknown keys are
//! rejected so typos surface instead of silently falling back to defaults.

use std::path::{Path, PathBuf};

use fxlink::autoencoder::{LinkConfig, ModelShape};
use fxlink::metrics::{
    BerEngine, LatencyConfig, SweepAxis, DEFAULT_LATENCY_DIMS, DEFAULT_PROBE_CHANNEL, DEFAULT_PROBE_SNR_DB,
};
use fxlink::neuralnet::{OptimizerKind, TrainConfig};
use fxlink::ofdmlink::{ChannelKind, OfdmConfig};
use serde::Deserialize;

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub ofdm: OfdmConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub quantize: QuantizeSection,
    pub simulate: SimulateSection,
    pub sweep: Option<SweepSection>,
    pub latency: LatencySection,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub hidden_width: usize,
    pub code_rate: f64,
    pub channel: ChannelKind,
    pub equalize: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let shape = ModelShape::default();
        ModelSection {
            n_layers: shape.n_layers,
            hidden_width: shape.hidden_width,
            code_rate: 1.0,
            channel: ChannelKind::Rayleigh,
            equalize: true,
        }
    }
}

impl ModelSection {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            n_layers: self.n_layers,
            hidden_width: self.hidden_width,
        }
    }

    pub fn link(&self) -> LinkConfig {
        LinkConfig {
            channel: self.channel,
            equalize: self.equalize,
        }
    }
}

/// [`TrainConfig`] without the seed, which comes from the top level.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub optimizer: OptimizerKind,
    pub snr_db: [f64; 2],
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            batches_per_epoch: t.batches_per_epoch,
            optimizer: t.optimizer,
            snr_db: t.snr_db,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            batches_per_epoch: self.batches_per_epoch,
            optimizer: self.optimizer,
            seed,
            snr_db: self.snr_db,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeSection {
    pub total_bits: u32,
    pub int_bits: u32,
}

impl Default for QuantizeSection {
    fn default() -> Self {
        QuantizeSection {
            total_bits: 16,
            int_bits: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub min_bits: u64,
    pub max_bits: u64,
    pub layer_error_samples: usize,
    pub probe_channel: ChannelKind,
    pub probe_snr_db: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            min_bits: 100_000,
            max_bits: 1_000_000,
            layer_error_samples: 10_000,
            probe_channel: DEFAULT_PROBE_CHANNEL,
            probe_snr_db: DEFAULT_PROBE_SNR_DB,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_ref_snr")]
    pub ref_snr_db: f64,
    #[serde(default = "default_probe_channel")]
    pub probe_channel: ChannelKind,
    #[serde(default = "default_ber_engine")]
    pub ber_engine: BerEngine,
    #[serde(default = "default_ber_bits")]
    pub ber_min_bits: u64,
    #[serde(default = "default_ber_bits")]
    pub ber_max_bits: u64,
    /// Pre-trained artifact for a bit-width sweep, relative to the config file.
    pub artifact: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_samples() -> usize {
    10_000
}

fn default_ref_snr() -> f64 {
    30.0
}

fn default_probe_channel() -> ChannelKind {
    DEFAULT_PROBE_CHANNEL
}

fn default_ber_engine() -> BerEngine {
    BerEngine::Fixed
}

fn default_ber_bits() -> u64 {
    100_000
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencySection {
    pub dims: Vec<usize>,
    pub parallel_macs: u64,
    pub pipeline_depth: u64,
    pub clock_hz: u64,
}

impl Default for LatencySection {
    fn default() -> Self {
        let c = LatencyConfig::default();
        LatencySection {
            dims: DEFAULT_LATENCY_DIMS.to_vec(),
            parallel_macs: c.parallel_macs,
            pipeline_depth: c.pipeline_depth,
            clock_hz: c.clock_hz,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Loads `path`, resolving relative paths inside it against its directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(s) = cfg.sweep.as_mut() {
            if let Some(a) = s.artifact.as_mut() {
                if a.is_relative() {
                    *a = base.join(&*a);
                }
            }
        }
        if let Some(out) = cfg.output_dir.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }
}
