//! `fxlink`: train, quantize, simulate, sweep, latency and report.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fxlink::autoencoder::{train, AutoencoderModel, Engine};
use fxlink::metrics::{self, LatencyConfig, Probe, SweepAxis, SweepSpec, SweepWriter};
use fxlink::ofdmlink::{ChannelKind, OfdmConfig};
use fxlink::paramdelivery::{self, load_model, quantize_model, read_artifact, save_model};
use fxlink::{seed, QFormat};

use config::RunConfig;

const OUT_ENV: &str = "FXLINK_OUT";

#[derive(Parser, Debug)]
#[command(name = "fxlink", version, about = "Fixed-point autoencoder OFDM link toolkit")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides FXLINK_OUT and the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write model.fxl and loss.csv.
    Train {
        /// TOML run configuration; defaults apply without one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Quantize an artifact's parameters to a Q-format.
    Quantize {
        artifact: PathBuf,
        /// Total bits including sign.
        #[arg(long, default_value_t = 16)]
        bits: u32,
        /// Integer bits excluding sign.
        #[arg(long, default_value_t = 3)]
        int_bits: u32,
    },
    /// BER sweep and per-layer error report of an artifact.
    Simulate {
        artifact: PathBuf,
        #[arg(long, value_enum, default_value_t = EngineArg::Fixed)]
        engine: EngineArg,
        #[arg(long, default_value = "rayleigh")]
        channel: ChannelKind,
        /// Comma-separated SNR points in dB (`inf` for noiseless).
        #[arg(long)]
        snr: String,
        /// Minimum simulated bits per SNR point.
        #[arg(long)]
        bits_min: Option<u64>,
        /// Cap on simulated bits per SNR point.
        #[arg(long)]
        bits_max: Option<u64>,
        /// Q-format bits; defaults to the artifact's format, else 16.
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        int_bits: Option<u32>,
        /// Blocks for the per-layer error report.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Structure sweep from the [sweep] section of a config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-layer latency against the OFDM symbol duration.
    Latency {
        /// Comma-separated layer dimensions.
        #[arg(long)]
        dims: Option<String>,
        /// Parallel MAC units.
        #[arg(long = "P")]
        parallel: Option<u64>,
        /// Pipeline depth in cycles.
        #[arg(long = "D")]
        depth: Option<u64>,
        /// Clock in Hz.
        #[arg(long)]
        clk: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Aggregate sweep CSVs of a directory into fig5/fig6a/fig6b tables.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Float,
    Fixed,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<fxlink::Error> for Failure {
    fn from(e: fxlink::Error) -> Self {
        use fxlink::Error as E;
        match e {
            E::InvalidBitAllocation { .. } | E::InvalidConfig(_) | E::InvalidParameters(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

struct Context {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Context {
    fn new(cli_seed: Option<u64>, cli_out: Option<PathBuf>, config: Option<&Path>) -> CliResult<Self> {
        let cfg = match config {
            Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
            None => RunConfig::default(),
        };
        let seed = cli_seed.or(cfg.seed).unwrap_or(1);
        let out = cli_out
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
        Ok(Context { cfg, seed, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { config } => {
            let ctx = Context::new(cli.seed, cli.out, config.as_deref())?;
            cmd_train(&ctx)
        }
        Command::Quantize {
            artifact,
            bits,
            int_bits,
        } => {
            let q = QFormat::new(bits, int_bits)?;
            let ctx = Context::new(cli.seed, cli.out, None)?;
            cmd_quantize(&ctx, &artifact, q)
        }
        Command::Simulate {
            artifact,
            engine,
            channel,
            snr,
            bits_min,
            bits_max,
            bits,
            int_bits,
            samples,
            config,
        } => {
            let snr = parse_list::<f64>(&snr, "--snr")?;
            let ctx = Context::new(cli.seed, cli.out, config.as_deref())?;
            let sim = &ctx.cfg.simulate;
            let opts = SimOptions {
                engine,
                channel,
                snr,
                min_bits: bits_min.unwrap_or(sim.min_bits),
                max_bits: bits_max.unwrap_or(sim.max_bits.max(bits_min.unwrap_or(0))),
                bits,
                int_bits,
                samples: samples.unwrap_or(sim.layer_error_samples),
            };
            cmd_simulate(&ctx, &artifact, &opts)
        }
        Command::Sweep { config } => {
            let ctx = Context::new(cli.seed, cli.out, Some(&config))?;
            cmd_sweep(&ctx)
        }
        Command::Latency {
            dims,
            parallel,
            depth,
            clk,
            config,
        } => {
            let ctx = Context::new(cli.seed, cli.out, config.as_deref())?;
            let l = &ctx.cfg.latency;
            let dims = match dims {
                Some(d) => parse_list::<usize>(&d, "--dims")?,
                None => l.dims.clone(),
            };
            let cfg = LatencyConfig {
                parallel_macs: parallel.unwrap_or(l.parallel_macs),
                pipeline_depth: depth.unwrap_or(l.pipeline_depth),
                clock_hz: clk.unwrap_or(l.clock_hz),
            };
            cmd_latency(&ctx, &dims, &cfg)
        }
        Command::Report { dir } => {
            let ctx = Context::new(cli.seed, cli.out, None)?;
            cmd_report(&ctx, &dir)
        }
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, flag: &str) -> CliResult<Vec<T>> {
    let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Failure::Usage(format!("{flag} needs at least one value")));
    }
    items
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| Failure::Usage(format!("{flag}: cannot parse {s:?}")))
        })
        .collect()
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn cmd_train(ctx: &Context) -> CliResult {
    let cfg = &ctx.cfg;
    let train_cfg = cfg.train.to_config(ctx.seed);
    train_cfg.validate()?;
    let link = cfg.model.link();
    let mut model = AutoencoderModel::init(&cfg.ofdm, cfg.model.code_rate, cfg.model.shape(), link, ctx.seed)?;
    let mut rng = seed::stream(ctx.seed, seed::TRAIN, 0);
    let report = train(&mut model, &train_cfg, link, &mut rng)?;

    let model_path = ctx.path("model.fxl");
    save_model(&model, None, &model_path)?;
    let loss_path = ctx.path("loss.csv");
    let mut text = String::from("epoch,loss\n");
    for (i, l) in report.epoch_loss.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    fs::write(&loss_path, text).map_err(|e| io_failure(&loss_path, e))?;
    println!(
        "trained {} ({} parameters), final loss {:.6}",
        metrics::model_descriptor(&model),
        model.encoder.parameter_count() + model.decoder.parameter_count(),
        report.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    println!("wrote {} and {}", model_path.display(), loss_path.display());
    Ok(())
}

fn cmd_quantize(ctx: &Context, artifact: &Path, q: QFormat) -> CliResult {
    let (model, _) = load_model(artifact)?;
    let qm = quantize_model(&model, q)?;
    let name = format!("model_q{}_{}.fxl", q.total_bits(), q.int_bits());
    let path = ctx.path(&name);
    save_model(&qm.model, Some(q), &path)?;
    let report = paramdelivery::verify(&read_artifact(&path)?);
    println!("format {q}");
    println!("saturations {}", qm.saturations);
    println!(
        "grid check {}",
        if report.grid_violations == Some(0) {
            "pass"
        } else {
            "fail"
        }
    );
    println!("wrote {}", path.display());
    if !report.passed() {
        return Err(Failure::Runtime(report.problems.join("; ")));
    }
    Ok(())
}

struct SimOptions {
    engine: EngineArg,
    channel: ChannelKind,
    snr: Vec<f64>,
    min_bits: u64,
    max_bits: u64,
    bits: Option<u32>,
    int_bits: Option<u32>,
    samples: usize,
}

fn cmd_simulate(ctx: &Context, artifact: &Path, opts: &SimOptions) -> CliResult {
    let (model, stored) = load_model(artifact)?;
    let q = match (opts.bits, opts.int_bits, stored) {
        (None, None, Some(q)) => q,
        (b, i, _) => QFormat::new(b.unwrap_or(16), i.unwrap_or(3))?,
    };
    let model_id = metrics::model_descriptor(&model);
    let mut rng = seed::stream(ctx.seed, seed::BER, 0);
    let curve = match opts.engine {
        EngineArg::Float => metrics::ber_sweep(
            Engine::Float(&model),
            opts.channel,
            &opts.snr,
            opts.min_bits,
            opts.max_bits,
            &mut rng,
        )?,
        EngineArg::Fixed => {
            let fixed = quantize_model(&model, q)?.fixed()?;
            metrics::ber_sweep(
                Engine::Fixed(&fixed),
                opts.channel,
                &opts.snr,
                opts.min_bits,
                opts.max_bits,
                &mut rng,
            )?
        }
    };
    let ber_path = ctx.path("ber.csv");
    metrics::write_ber_csv(&ber_path, &model_id, std::slice::from_ref(&curve))?;

    let mut rng = seed::stream(ctx.seed, seed::EVAL, 0);
    let probe = Probe {
        channel: ctx.cfg.simulate.probe_channel,
        snr_db: ctx.cfg.simulate.probe_snr_db,
    };
    let report = metrics::layer_error_report_with(&model, q, opts.samples, probe, &mut rng)?;
    let layer_path = ctx.path("layer_error.csv");
    metrics::write_layer_error_csv(&layer_path, std::slice::from_ref(&report))?;

    println!("model {model_id}, engine {}, channel {}", curve.engine, curve.channel);
    for p in &curve.points {
        println!(
            "snr {:>6} dB  ber {:.3e}  ({} errors / {} bits)",
            p.snr_db, p.ber, p.errors, p.bits
        );
    }
    let layers: Vec<String> = report.rel_rms_pct.iter().map(|v| format!("{v:.4}")).collect();
    println!("layer rel. RMS at {q} (%): {}", layers.join(" "));
    println!("decoder EVM at {q}: {:.4}%", report.decoder_evm_pct);
    println!(
        "probe {} at {} dB, decoder inputs outside {q}: {}",
        report.probe.channel.name(),
        report.probe.snr_db,
        report.input_clips
    );
    println!("wrote {} and {}", ber_path.display(), layer_path.display());
    Ok(())
}

fn cmd_sweep(ctx: &Context) -> CliResult {
    let cfg = &ctx.cfg;
    let Some(s) = &cfg.sweep else {
        return Err(Failure::Usage("config has no [sweep] section".into()));
    };
    let model = match &s.artifact {
        Some(p) => Some(load_model(p)?.0),
        None => None,
    };
    let seeds = if s.seeds.is_empty() {
        vec![ctx.seed]
    } else {
        s.seeds.clone()
    };
    let spec = SweepSpec {
        axis: s.axis,
        values: s.values.clone(),
        seeds,
        ofdm: cfg.ofdm.clone(),
        rate: cfg.model.code_rate,
        shape: cfg.model.shape(),
        link: cfg.model.link(),
        train: cfg.train.to_config(ctx.seed),
        format: QFormat::new(cfg.quantize.total_bits, cfg.quantize.int_bits)?,
        n_samples: s.n_samples,
        ref_snr_db: s.ref_snr_db,
        probe_channel: s.probe_channel,
        ber_engine: s.ber_engine,
        ber_min_bits: s.ber_min_bits,
        ber_max_bits: s.ber_max_bits.max(s.ber_min_bits),
        model,
        output: None,
    };
    spec.validate()?;
    let sweep_path = ctx.path("sweep.csv");
    let mut writer = SweepWriter::create(&sweep_path)?;
    let rows = metrics::run_sweep_with(&spec, |row| {
        println!(
            "{}={} seed={} final rel. RMS {:.4}% ber {:.3e}",
            row.axis.name(),
            row.value,
            row.seed,
            row.final_rms_pct,
            row.ber_ref
        );
        writer.push(row)
    })?;
    let layer_path = ctx.path("layer_error.csv");
    let records: Vec<metrics::LayerErrorRecord> = rows
        .iter()
        .flat_map(|r| {
            let bit_width = match r.axis {
                SweepAxis::BitWidth => r.value as u32,
                _ => spec.format.total_bits(),
            };
            let id = format!("{}={}/seed={}", r.axis.name(), r.value, r.seed);
            r.layer_rms_pct
                .iter()
                .enumerate()
                .map(move |(i, &v)| metrics::LayerErrorRecord {
                    model_id: id.clone(),
                    bit_width,
                    layer_idx: i,
                    rel_rms_pct: v,
                    n_samples: spec.n_samples,
                })
        })
        .collect();
    metrics::write_records(&layer_path, &records)?;
    println!("wrote {} and {}", sweep_path.display(), layer_path.display());
    Ok(())
}

fn cmd_latency(ctx: &Context, dims: &[usize], cfg: &LatencyConfig) -> CliResult {
    let ofdm: &OfdmConfig = &ctx.cfg.ofdm;
    let est = metrics::estimate_latency(dims, cfg, ofdm)?;
    let path = ctx.path("latency.csv");
    metrics::write_latency_csv(&path, &est)?;
    println!(
        "P={} D={} clock={} Hz, symbol {} samples at {} Hz = {} us",
        cfg.parallel_macs, cfg.pipeline_depth, cfg.clock_hz, est.symbol_samples, est.sample_rate, est.budget_us
    );
    for l in &est.layers {
        println!(
            "layer {} {}x{}: {} MACs, {} cycles, {} us  {}",
            l.layer_idx,
            l.in_dim,
            l.out_dim,
            l.macs,
            l.cycles,
            l.time_us,
            if l.pass { "pass" } else { "FAIL" }
        );
    }
    println!("overall {}", if est.pass() { "pass" } else { "FAIL" });
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_report(ctx: &Context, dir: &Path) -> CliResult {
    let entries = fs::read_dir(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut records = Vec::new();
    for f in &files {
        // only files with the sweep schema take part
        if let Ok(rows) = metrics::read_sweep_csv(f) {
            records.extend(rows);
        }
    }
    if records.is_empty() {
        return Err(Failure::Usage(format!("no sweep rows found in {}", dir.display())));
    }
    for (axis, name) in [
        (SweepAxis::BitWidth, "fig5.csv"),
        (SweepAxis::HiddenNodes, "fig6a.csv"),
        (SweepAxis::NLayers, "fig6b.csv"),
    ] {
        let table = metrics::aggregate_sweep(&records, axis);
        if table.is_empty() {
            continue;
        }
        let path = ctx.path(name);
        metrics::write_figure_csv(&path, &table)?;
        println!("wrote {} ({} rows)", path.display(), table.len());
    }
    Ok(())
}
