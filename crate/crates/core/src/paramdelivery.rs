//! Parameter delivery: the file that carries a trained encoder/decoder pair
//! from the learning center to an endpoint, and post-training quantization.
//!
//! Layout (see `FORMAT.md`): the magic `FXLINK1\n`, a `key = value` text
//! header ending at the first blank line, the parameters as little-endian
//! `f64` (encoder then decoder; per layer, weights row-major then biases),
//! and a trailing SHA-256 of everything before it.
//!
//! Parameters are always stored as full `f64`, so one artifact serves every
//! bit width. A `qformat` header entry marks an artifact whose parameters have
//! been snapped to that grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AutoencoderModel, FixedAutoencoder, LinkConfig};
use crate::error::{Error, Result};
use crate::fixedpoint::QFormat;
use crate::neuralnet::{Activation, DenseLayer, FcNet, OptimizerKind, TrainConfig};
use crate::ofdmlink::{ChannelKind, Modulation, OfdmConfig};

pub const MAGIC: &[u8] = b"FXLINK1\n";
pub const FORMAT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactHeader {
    pub version: u32,
    pub encoder_dims: Vec<usize>,
    pub encoder_activations: Vec<Activation>,
    pub decoder_dims: Vec<usize>,
    pub decoder_activations: Vec<Activation>,
    pub code_rate: f64,
    pub ofdm: OfdmConfig,
    pub link: LinkConfig,
    pub training: Option<TrainConfig>,
    pub qformat: Option<QFormat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub header: ArtifactHeader,
    pub payload: Vec<f64>,
    /// Whether the trailing hash matched when the artifact was read.
    pub checksum_ok: bool,
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn expected_params(dims: &[usize]) -> usize {
    dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum()
}

impl ModelArtifact {
    pub fn from_model(model: &AutoencoderModel, qformat: Option<QFormat>) -> Self {
        let header = ArtifactHeader {
            version: FORMAT_VERSION,
            encoder_dims: model.encoder.dims(),
            encoder_activations: model.encoder.activations(),
            decoder_dims: model.decoder.dims(),
            decoder_activations: model.decoder.activations(),
            code_rate: model.rate,
            ofdm: model.ofdm.clone(),
            link: model.link,
            training: model.trained_with.clone(),
            qformat,
        };
        let payload = model.encoder.parameters().chain(model.decoder.parameters()).collect();
        ModelArtifact {
            header,
            payload,
            checksum_ok: true,
        }
    }

    fn header_text(&self) -> String {
        let h = &self.header;
        let acts = |a: &[Activation]| a.iter().map(Activation::name).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        // writing to a String cannot fail
        let _ = writeln!(s, "version = {}", h.version);
        let _ = writeln!(s, "encoder_dims = {}", join(&h.encoder_dims));
        let _ = writeln!(s, "encoder_activations = {}", acts(&h.encoder_activations));
        let _ = writeln!(s, "decoder_dims = {}", join(&h.decoder_dims));
        let _ = writeln!(s, "decoder_activations = {}", acts(&h.decoder_activations));
        let _ = writeln!(s, "code_rate = {}", h.code_rate);
        let _ = writeln!(s, "n_subcarriers = {}", h.ofdm.n_subcarriers);
        let _ = writeln!(s, "cp_len = {}", h.ofdm.cp_len);
        let _ = writeln!(s, "modulation = qam4");
        let _ = writeln!(s, "sample_rate = {}", h.ofdm.sample_rate);
        let _ = writeln!(s, "channel = {}", h.link.channel);
        let _ = writeln!(s, "equalize = {}", h.link.equalize);
        if let Some(t) = &h.training {
            let optimizer = match t.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            };
            let _ = writeln!(s, "train.learning_rate = {}", t.learning_rate);
            let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
            let _ = writeln!(s, "train.epochs = {}", t.epochs);
            let _ = writeln!(s, "train.batches_per_epoch = {}", t.batches_per_epoch);
            let _ = writeln!(s, "train.optimizer = {optimizer}");
            let _ = writeln!(s, "train.seed = {}", t.seed);
            let _ = writeln!(s, "train.snr_db = {},{}", t.snr_db[0], t.snr_db[1]);
        }
        if let Some(q) = &h.qformat {
            let _ = writeln!(s, "qformat = {},{}", q.total_bits(), q.int_bits());
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MAGIC.len() + 1024 + 8 * self.payload.len() + HASH_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(self.header_text().as_bytes());
        out.push(b'\n');
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        out
    }

    /// Parses an artifact. A hash mismatch is recorded in `checksum_ok`, not
    /// raised; syntax and version problems are errors.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let malformed = |m: &str| Error::MalformedArtifact(m.to_string());
        if bytes.len() < MAGIC.len() + HASH_LEN || !bytes.starts_with(MAGIC) {
            return Err(malformed("missing FXLINK1 magic"));
        }
        let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
        let checksum_ok = Sha256::digest(body).as_slice() == hash;

        let rest = &body[MAGIC.len()..];
        let end = rest
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| malformed("header is not terminated by a blank line"))?;
        let text = std::str::from_utf8(&rest[..end + 1]).map_err(|_| malformed("header is not UTF-8"))?;
        let payload_bytes = &rest[end + 2..];
        if payload_bytes.len() % 8 != 0 {
            return Err(malformed("payload is not a whole number of f64 values"));
        }
        let payload = payload_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let header = parse_header(text)?;
        Ok(ModelArtifact {
            header,
            payload,
            checksum_ok,
        })
    }

    /// Rebuilds the model; fails if the header dimensions do not account for
    /// the payload exactly.
    pub fn to_model(&self) -> Result<AutoencoderModel> {
        let h = &self.header;
        let enc_len = expected_params(&h.encoder_dims);
        let dec_len = expected_params(&h.decoder_dims);
        if enc_len + dec_len != self.payload.len() {
            return Err(Error::MalformedArtifact(format!(
                "header dimensions need {} values, payload holds {}",
                enc_len + dec_len,
                self.payload.len()
            )));
        }
        let encoder = build_net(&h.encoder_dims, &h.encoder_activations, &self.payload[..enc_len])?;
        let decoder = build_net(&h.decoder_dims, &h.decoder_activations, &self.payload[enc_len..])?;
        let model = AutoencoderModel {
            encoder,
            decoder,
            ofdm: h.ofdm.clone(),
            rate: h.code_rate,
            link: h.link,
            trained_with: h.training.clone(),
        };
        model.validate()?;
        Ok(model)
    }
}

fn build_net(dims: &[usize], activations: &[Activation], values: &[f64]) -> Result<FcNet> {
    if dims.len() < 2 {
        return Err(Error::EmptyDims);
    }
    if activations.len() != dims.len() - 1 {
        return Err(Error::MalformedArtifact(
            "activation count does not match the layer count".into(),
        ));
    }
    let mut at = 0;
    let mut layers = Vec::with_capacity(activations.len());
    for (d, &act) in dims.windows(2).zip(activations) {
        let (fan_in, fan_out) = (d[0], d[1]);
        let w = &values[at..at + fan_in * fan_out];
        at += fan_in * fan_out;
        let b = &values[at..at + fan_out];
        at += fan_out;
        let weights =
            Array2::from_shape_vec((fan_out, fan_in), w.to_vec()).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        layers.push(DenseLayer::new(weights, Array1::from(b.to_vec()), act)?);
    }
    FcNet::new(layers)
}

fn parse_header(text: &str) -> Result<ArtifactHeader> {
    let malformed = |m: String| Error::MalformedArtifact(m);
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("header line without `=`: {line:?}")))?;
        if fields.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(malformed(format!("duplicate header key `{}`", k.trim())));
        }
    }
    fn take_from(fields: &mut std::collections::BTreeMap<String, String>, key: &str) -> Result<String> {
        fields
            .remove(key)
            .ok_or_else(|| Error::MalformedArtifact(format!("missing header key `{key}`")))
    }
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::MalformedArtifact(format!("bad value for `{key}`: {v:?}")))
    }
    fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
        v.split(',').map(|p| num(key, p.trim())).collect()
    }
    fn activations(key: &str, v: &str) -> Result<Vec<Activation>> {
        v.split(',')
            .map(|p| {
                Activation::from_name(p.trim())
                    .ok_or_else(|| Error::MalformedArtifact(format!("bad activation in `{key}`: {p:?}")))
            })
            .collect()
    }

    let version = take_from(&mut fields, "version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::VersionUnsupported(version));
    }
    let encoder_dims = list("encoder_dims", &take_from(&mut fields, "encoder_dims")?)?;
    let encoder_activations = activations("encoder_activations", &take_from(&mut fields, "encoder_activations")?)?;
    let decoder_dims = list("decoder_dims", &take_from(&mut fields, "decoder_dims")?)?;
    let decoder_activations = activations("decoder_activations", &take_from(&mut fields, "decoder_activations")?)?;
    let code_rate = num("code_rate", &take_from(&mut fields, "code_rate")?)?;
    let n_subcarriers = num("n_subcarriers", &take_from(&mut fields, "n_subcarriers")?)?;
    let cp_len = num("cp_len", &take_from(&mut fields, "cp_len")?)?;
    let modulation = take_from(&mut fields, "modulation")?;
    if modulation != "qam4" {
        return Err(malformed(format!("unsupported modulation `{modulation}`")));
    }
    let sample_rate = num("sample_rate", &take_from(&mut fields, "sample_rate")?)?;
    let channel: ChannelKind = take_from(&mut fields, "channel")?
        .parse()
        .map_err(|e: Error| malformed(e.to_string()))?;
    let equalize = num("equalize", &take_from(&mut fields, "equalize")?)?;

    let training = if fields.contains_key("train.seed") {
        let optimizer = match take_from(&mut fields, "train.optimizer")?.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(malformed(format!("unknown optimizer `{other}`"))),
        };
        let snr: Vec<f64> = list("train.snr_db", &take_from(&mut fields, "train.snr_db")?)?;
        if snr.len() != 2 {
            return Err(malformed("train.snr_db needs two values".into()));
        }
        Some(TrainConfig {
            learning_rate: num("train.learning_rate", &take_from(&mut fields, "train.learning_rate")?)?,
            batch_size: num("train.batch_size", &take_from(&mut fields, "train.batch_size")?)?,
            epochs: num("train.epochs", &take_from(&mut fields, "train.epochs")?)?,
            batches_per_epoch: num(
                "train.batches_per_epoch",
                &take_from(&mut fields, "train.batches_per_epoch")?,
            )?,
            optimizer,
            seed: num("train.seed", &take_from(&mut fields, "train.seed")?)?,
            snr_db: [snr[0], snr[1]],
        })
    } else {
        None
    };
    let qformat = match fields.remove("qformat") {
        Some(v) => {
            let bits: Vec<u32> = list("qformat", &v)?;
            if bits.len() != 2 {
                return Err(malformed("qformat needs total and integer bits".into()));
            }
            Some(QFormat::new(bits[0], bits[1])?)
        }
        None => None,
    };
    if let Some(key) = fields.keys().next() {
        return Err(malformed(format!("unknown header key `{key}`")));
    }
    Ok(ArtifactHeader {
        version: FORMAT_VERSION,
        encoder_dims,
        encoder_activations,
        decoder_dims,
        decoder_activations,
        code_rate,
        ofdm: OfdmConfig {
            n_subcarriers,
            cp_len,
            modulation: Modulation::Qam4,
            sample_rate,
        },
        link: LinkConfig { channel, equalize },
        training,
        qformat,
    })
}

pub fn save_model(model: &AutoencoderModel, qformat: Option<QFormat>, path: &Path) -> Result<()> {
    let bytes = ModelArtifact::from_model(model, qformat).to_bytes();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an artifact without judging its checksum; see [`verify`].
pub fn read_artifact(path: &Path) -> Result<ModelArtifact> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelArtifact::parse(&bytes)
}

/// Reads, checks the hash and rebuilds the model.
pub fn load_model(path: &Path) -> Result<(AutoencoderModel, Option<QFormat>)> {
    let artifact = read_artifact(path)?;
    if !artifact.checksum_ok {
        return Err(Error::ChecksumMismatch(path.to_path_buf()));
    }
    Ok((artifact.to_model()?, artifact.header.qformat))
}

/// A model whose every parameter sits on `format`'s grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub model: AutoencoderModel,
    pub format: QFormat,
    /// Parameters clipped to the ends of the representable range.
    pub saturations: usize,
}

impl QuantizedModel {
    pub fn fixed(&self) -> Result<FixedAutoencoder> {
        FixedAutoencoder::from_grid(&self.model, self.format)
    }
}

pub fn quantize_model(model: &AutoencoderModel, q: QFormat) -> Result<QuantizedModel> {
    let mut out = model.clone();
    let mut saturations = 0;
    let mut failure = None;
    let mut snap = |w: f64| match q.quantize_raw(w) {
        Ok((raw, saturated)) => {
            saturations += usize::from(saturated);
            q.raw_to_real(raw)
        }
        Err(e) => {
            failure.get_or_insert(e);
            w
        }
    };
    out.encoder.map_parameters(&mut snap);
    out.decoder.map_parameters(&mut snap);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(QuantizedModel {
        model: out,
        format: q,
        saturations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub checksum_ok: bool,
    pub dimensions_ok: bool,
    /// `None` when the artifact carries no Q-format.
    pub grid_violations: Option<usize>,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checksum_ok && self.dimensions_ok && self.grid_violations.unwrap_or(0) == 0
    }
}

pub fn verify(artifact: &ModelArtifact) -> VerifyReport {
    let mut problems = Vec::new();
    if !artifact.checksum_ok {
        problems.push("checksum mismatch".to_string());
    }
    let dimensions_ok = match artifact.to_model() {
        Ok(_) => true,
        Err(e) => {
            problems.push(format!("dimension check failed: {e}"));
            false
        }
    };
    let grid_violations = artifact.header.qformat.map(|q| {
        let n = artifact.payload.iter().filter(|&&w| !q.is_on_grid(w)).count();
        if n > 0 {
            problems.push(format!("{n} parameters off the {q} grid"));
        }
        n
    });
    VerifyReport {
        checksum_ok: artifact.checksum_ok,
        dimensions_ok,
        grid_violations,
        problems,
    }
}
