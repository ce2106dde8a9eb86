//! Batch front door for degradekit-core. Six subcommands cover the full
//! workflow: synthesize a scene, degrade it into an observed pair, estimate
//! the degradation responses, score a reconstruction, fuse a pair, and check
//! the training gradient. Every run that writes artifacts also writes a
//! manifest with content hashes so results stay attributable.

mod manifest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use degradekit_core::{
    add_gaussian_noise, average_kernel, cnmf_fuse, compute_report, degrade_scene,
    finite_difference_check, gaussian_kernel, gradcheck_instance, read_cube, read_kernel_csv,
    read_srf_csv, synth_scene, train, write_cube, write_estimation_json, write_kernel_csv,
    write_metrics_json, write_srf_csv, BandMask, BoundaryMode, CnmfConfig, CubeDtype, Error,
    Geometry, HyperConfig, Kernel, MetricReportDoc, ObservedPair, Result, SceneSpec,
};
use serde::Deserialize;
use serde_json::json;

use manifest::Manifest;

/// The interface fixes no smoothness flag; this gives gently varying
/// abundance maps at desk scales.
const SYNTH_SMOOTHNESS: f64 = 3.0;

/// Fixed noise seeds keep repeated degrade invocations byte-identical.
const HSI_NOISE_SEED: u64 = 101;
const MSI_NOISE_SEED: u64 = 202;

#[derive(Parser)]
#[command(
    name = "degradekit",
    version,
    about = "Synthesize, degrade, estimate, score, and fuse hyperspectral-multispectral image pairs"
)]
struct Cli {
    /// JSON file overriding estimate/fuse hyperparameter defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a smooth linear-mixture scene cube.
    Synth {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        bands: usize,
        /// Number of endmembers mixed into the scene.
        #[arg(long)]
        endmembers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade a scene into a registered low-resolution pair.
    Degrade {
        /// Scene cube to degrade.
        #[arg(long = "in", value_name = "CUBE")]
        input: PathBuf,
        /// Blur kernel: "gaussian:SIZE:SIGMA" or "average:SIZE".
        #[arg(long, value_name = "SPEC")]
        kernel: String,
        /// Spatial decimation factor.
        #[arg(long)]
        ratio: usize,
        /// Spectral response CSV, one row per source band.
        #[arg(long, value_name = "CSV")]
        srf: PathBuf,
        /// symmetric-reflect, replicate-edge, or zero-pad [default: symmetric-reflect]
        #[arg(long)]
        boundary: Option<String>,
        /// Decimation anchor within each block [default: ratio/2]
        #[arg(long)]
        offset: Option<usize>,
        /// Add white Gaussian noise at this SNR to both outputs.
        #[arg(long, value_name = "DB")]
        noise_snr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly estimate the spectral response and blur kernel of a pair.
    Estimate {
        #[arg(long, value_name = "CUBE")]
        hsi: PathBuf,
        #[arg(long, value_name = "CUBE")]
        msi: PathBuf,
        /// Spatial resolution ratio between the two cubes.
        #[arg(long)]
        ratio: usize,
        /// Joint training iterations [default: 500]
        #[arg(long)]
        iters: Option<usize>,
        /// Response pretraining iterations [default: 1000]
        #[arg(long)]
        pretrain: Option<usize>,
        /// Kernel smoothness weight [default: 1e-7]
        #[arg(long)]
        lambda: Option<f64>,
        /// Initial learning rate [default: 0.1]
        #[arg(long)]
        lr0: Option<f64>,
        /// Iterations per learning-rate decay interval [default: 250]
        #[arg(long)]
        decay_step: Option<usize>,
        /// Learning-rate decay factor per interval [default: 0.99]
        #[arg(long)]
        decay_rate: Option<f64>,
        /// CSV with one "start,end" row of supported source bands per output band.
        #[arg(long, value_name = "CSV")]
        band_mask: Option<PathBuf>,
        /// Parameter initialization seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a test cube against a reference with the full metric suite.
    Metrics {
        #[arg(long = "ref", value_name = "CUBE")]
        reference: PathBuf,
        #[arg(long, value_name = "CUBE")]
        test: PathBuf,
        /// Peak signal value [default: max of the reference]
        #[arg(long)]
        peak: Option<f64>,
        /// Pixel-size ratio in the ergas term [default: 1]
        #[arg(long)]
        scale_ratio: Option<f64>,
        /// Output directory; without it the report prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse a pair into a high-resolution cube with given responses.
    Fuse {
        #[arg(long, value_name = "CUBE")]
        hsi: PathBuf,
        #[arg(long, value_name = "CUBE")]
        msi: PathBuf,
        #[arg(long, value_name = "CSV")]
        srf: PathBuf,
        #[arg(long, value_name = "CSV")]
        psf: PathBuf,
        #[arg(long)]
        ratio: usize,
        /// Endmember count of the factorization [default: 4]
        #[arg(long)]
        endmembers: Option<usize>,
        /// Factor initialization seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the analytic training gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Low-resolution cube height.
        #[arg(long, default_value_t = 12)]
        height: usize,
        /// Low-resolution cube width.
        #[arg(long, default_value_t = 12)]
        width: usize,
        /// Source band count.
        #[arg(long, default_value_t = 6)]
        bands: usize,
        /// Output band count of the spectral response.
        #[arg(long, default_value_t = 3)]
        msi_bands: usize,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
    },
}

// --- logging --------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

struct Logger {
    level: LogLevel,
}

impl Logger {
    fn from_env() -> Result<Logger> {
        let level = match std::env::var("DEGRADEKIT_LOG") {
            Err(_) => LogLevel::Info,
            Ok(value) => match value.as_str() {
                "quiet" => LogLevel::Quiet,
                "info" => LogLevel::Info,
                "debug" => LogLevel::Debug,
                other => {
                    return Err(Error::Invalid(format!(
                        "DEGRADEKIT_LOG = '{other}' (expected quiet, info, or debug)"
                    )))
                }
            },
        };
        Ok(Logger { level })
    }

    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= LogLevel::Info {
            eprintln!("degradekit: {}", msg.as_ref());
        }
    }

    fn debug(&self, msg: impl AsRef<str>) {
        if self.level >= LogLevel::Debug {
            eprintln!("degradekit[debug]: {}", msg.as_ref());
        }
    }
}

// --- config file ----------------------------------------------------------------

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    estimate: Option<EstimateOverrides>,
    fuse: Option<FuseOverrides>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EstimateOverrides {
    lambda: Option<f64>,
    iterations: Option<usize>,
    pretrain_iterations: Option<usize>,
    lr0: Option<f64>,
    decay_step: Option<usize>,
    decay_rate: Option<f64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adam_eps: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FuseOverrides {
    endmembers: Option<usize>,
    outer_iterations: Option<usize>,
    inner_iterations: Option<usize>,
    epsilon: Option<f64>,
    seed: Option<u64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        detail: e.to_string(),
    })
}

// --- flag parsing helpers ---------------------------------------------------------

/// Kernel grammar: "gaussian:SIZE:SIGMA" or "average:SIZE".
fn parse_kernel(spec: &str) -> Result<Kernel> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = |what: &str, field: &str| {
        Error::Invalid(format!("kernel spec '{spec}': {what} '{field}' is not a number"))
    };
    match parts.as_slice() {
        ["gaussian", size, sigma] => {
            let size: usize = size.parse().map_err(|_| bad("size", size))?;
            let sigma: f64 = sigma.parse().map_err(|_| bad("sigma", sigma))?;
            gaussian_kernel(size, sigma)
        }
        ["average", size] => {
            let size: usize = size.parse().map_err(|_| bad("size", size))?;
            average_kernel(size)
        }
        _ => Err(Error::Invalid(format!(
            "kernel spec '{spec}' (expected gaussian:SIZE:SIGMA or average:SIZE)"
        ))),
    }
}

/// One "start,end" row of inclusive source-band indices per output band.
fn read_band_mask(path: &Path) -> Result<BandMask> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    let mut ranges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("row of {} fields at line {}, expected start,end", fields.len(), i + 1),
            });
        }
        let parse = |field: &str| -> Result<usize> {
            field.trim().parse().map_err(|_| Error::Format {
                path: path.into(),
                detail: format!("unparsable band index '{}' at line {}", field.trim(), i + 1),
            })
        };
        ranges.push((parse(fields[0])?, parse(fields[1])?));
    }
    if ranges.is_empty() {
        return Err(Error::Format {
            path: path.into(),
            detail: "band mask has no rows".into(),
        });
    }
    BandMask::from_ranges(&ranges)
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.into(),
        source,
    })
}

/// stdout may be a pipe the reader already closed (metrics | head); that is
/// normal completion, not a failure.
fn print_stdout(text: std::fmt::Arguments) -> Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(source) => Err(Error::Io {
            path: "<stdout>".into(),
            source,
        }),
        Ok(()) => Ok(()),
    }
}

// --- subcommands ------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    height: usize,
    width: usize,
    bands: usize,
    endmembers: usize,
    seed: u64,
    out: &Path,
    logger: &Logger,
) -> Result<()> {
    let spec = SceneSpec {
        height,
        width,
        bands,
        endmember_count: endmembers,
        smoothness: SYNTH_SMOOTHNESS,
        seed,
    };
    let scene = synth_scene(&spec)?;
    create_out_dir(out)?;
    let scene_path = out.join("scene.cube");
    write_cube(&scene_path, &scene, CubeDtype::F64)?;
    logger.info(format!("wrote {}", scene_path.display()));

    let mut manifest = Manifest::new(
        "synth",
        json!({
            "height": height,
            "width": width,
            "bands": bands,
            "endmembers": endmembers,
            "smoothness": SYNTH_SMOOTHNESS,
            "seed": seed,
        }),
    );
    manifest.record_output("scene", &scene_path)?;
    let path = manifest.write(out)?;
    logger.info(format!("wrote {}", path.display()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_degrade(
    input: &Path,
    kernel_spec: &str,
    ratio: usize,
    srf_path: &Path,
    boundary: Option<&str>,
    offset: Option<usize>,
    noise_snr: Option<f64>,
    out: &Path,
    logger: &Logger,
) -> Result<()> {
    // Flag values are checked before any file is touched.
    let kernel = parse_kernel(kernel_spec)?;
    let boundary: BoundaryMode = match boundary {
        Some(s) => s.parse()?,
        None => BoundaryMode::default(),
    };
    if ratio == 0 {
        return Err(Error::Invalid("ratio must be positive".into()));
    }
    let geometry = Geometry {
        ratio,
        boundary,
        offset: offset.unwrap_or(ratio / 2),
    };
    geometry.validate()?;

    let scene = read_cube(input)?;
    let srf = read_srf_csv(srf_path)?;
    let pair = degrade_scene(&scene, &kernel, &srf, &geometry)?;
    let (hsi, msi) = match noise_snr {
        Some(snr) => (
            add_gaussian_noise(pair.hsi(), snr, HSI_NOISE_SEED)?,
            add_gaussian_noise(pair.msi(), snr, MSI_NOISE_SEED)?,
        ),
        None => (pair.hsi().clone(), pair.msi().clone()),
    };

    create_out_dir(out)?;
    let hsi_path = out.join("hsi.cube");
    let msi_path = out.join("msi.cube");
    write_cube(&hsi_path, &hsi, CubeDtype::F64)?;
    logger.info(format!("wrote {}", hsi_path.display()));
    write_cube(&msi_path, &msi, CubeDtype::F64)?;
    logger.info(format!("wrote {}", msi_path.display()));

    let mut manifest = Manifest::new(
        "degrade",
        json!({
            "kernel": kernel_spec,
            "ratio": ratio,
            "boundary": boundary.name(),
            "offset": geometry.offset,
            "noise_snr": noise_snr,
        }),
    );
    manifest.record_input("scene", input)?;
    manifest.record_input("srf", srf_path)?;
    manifest.record_output("hsi", &hsi_path)?;
    manifest.record_output("msi", &msi_path)?;
    let path = manifest.write(out)?;
    logger.info(format!("wrote {}", path.display()));
    Ok(())
}

struct EstimateFlags {
    iters: Option<usize>,
    pretrain: Option<usize>,
    lambda: Option<f64>,
    lr0: Option<f64>,
    decay_step: Option<usize>,
    decay_rate: Option<f64>,
    seed: Option<u64>,
}

/// Defaults, then the config file, then explicit flags.
fn merge_estimate_config(file: &FileConfig, flags: &EstimateFlags) -> HyperConfig {
    let mut config = HyperConfig::default();
    if let Some(o) = &file.estimate {
        if let Some(v) = o.lambda {
            config.lambda = v;
        }
        if let Some(v) = o.iterations {
            config.iterations = v;
        }
        if let Some(v) = o.pretrain_iterations {
            config.pretrain_iterations = v;
        }
        if let Some(v) = o.lr0 {
            config.lr0 = v;
        }
        if let Some(v) = o.decay_step {
            config.decay_step = v;
        }
        if let Some(v) = o.decay_rate {
            config.decay_rate = v;
        }
        if let Some(v) = o.adam_beta1 {
            config.adam_beta1 = v;
        }
        if let Some(v) = o.adam_beta2 {
            config.adam_beta2 = v;
        }
        if let Some(v) = o.adam_eps {
            config.adam_eps = v;
        }
        if let Some(v) = o.seed {
            config.seed = v;
        }
    }
    if let Some(v) = flags.iters {
        config.iterations = v;
    }
    if let Some(v) = flags.pretrain {
        config.pretrain_iterations = v;
    }
    if let Some(v) = flags.lambda {
        config.lambda = v;
    }
    if let Some(v) = flags.lr0 {
        config.lr0 = v;
    }
    if let Some(v) = flags.decay_step {
        config.decay_step = v;
    }
    if let Some(v) = flags.decay_rate {
        config.decay_rate = v;
    }
    if let Some(v) = flags.seed {
        config.seed = v;
    }
    config
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    hsi_path: &Path,
    msi_path: &Path,
    ratio: usize,
    flags: &EstimateFlags,
    band_mask: Option<&Path>,
    out: &Path,
    file_config: &FileConfig,
    logger: &Logger,
) -> Result<()> {
    let config = merge_estimate_config(file_config, flags);
    config.validate()?;
    let mask = band_mask.map(read_band_mask).transpose()?;

    let hsi = read_cube(hsi_path)?;
    let msi = read_cube(msi_path)?;
    let pair = ObservedPair::new(hsi, msi, ratio)?;
    let geometry = Geometry::centered(ratio);
    logger.debug(format!(
        "training: {} iterations after {} pretraining, lr0 {}, decay {}/{}, lambda {}, seed {}",
        config.iterations,
        config.pretrain_iterations,
        config.lr0,
        config.decay_rate,
        config.decay_step,
        config.lambda,
        config.seed
    ));
    let result = train(&pair, &config, &geometry, mask.as_ref())?;
    let last = result.loss_trace.last().expect("trace is never empty");
    logger.debug(format!(
        "final loss {:.6e} (data {:.6e}, smoothness {:.6e})",
        last.total, last.data_mse, last.tv
    ));

    create_out_dir(out)?;
    let srf_path = out.join("srf.csv");
    let psf_path = out.join("psf.csv");
    let result_path = out.join("result.json");
    write_srf_csv(&srf_path, &result.srf)?;
    logger.info(format!("wrote {}", srf_path.display()));
    write_kernel_csv(&psf_path, &result.psf)?;
    logger.info(format!("wrote {}", psf_path.display()));
    write_estimation_json(&result_path, &result)?;
    logger.info(format!("wrote {}", result_path.display()));

    let mut manifest = Manifest::new(
        "estimate",
        json!({
            "ratio": ratio,
            "lambda": config.lambda,
            "iterations": config.iterations,
            "pretrain_iterations": config.pretrain_iterations,
            "lr0": config.lr0,
            "decay_step": config.decay_step,
            "decay_rate": config.decay_rate,
            "adam_beta1": config.adam_beta1,
            "adam_beta2": config.adam_beta2,
            "adam_eps": config.adam_eps,
            "seed": config.seed,
        }),
    );
    manifest.record_input("hsi", hsi_path)?;
    manifest.record_input("msi", msi_path)?;
    if let Some(p) = band_mask {
        manifest.record_input("band_mask", p)?;
    }
    manifest.record_output("srf", &srf_path)?;
    manifest.record_output("psf", &psf_path)?;
    manifest.record_output("result", &result_path)?;
    let path = manifest.write(out)?;
    logger.info(format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_metrics(
    ref_path: &Path,
    test_path: &Path,
    peak: Option<f64>,
    scale_ratio: Option<f64>,
    out: Option<&Path>,
    logger: &Logger,
) -> Result<()> {
    let scale_ratio = scale_ratio.unwrap_or(1.0);
    let reference = read_cube(ref_path)?;
    let test = read_cube(test_path)?;
    let report = compute_report(&reference, &test, peak, scale_ratio)?;
    logger.debug(report.to_table());

    match out {
        None => {
            let doc = MetricReportDoc::from_report(&report);
            let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format {
                path: "<stdout>".into(),
                detail: format!("report serialization failed: {e}"),
            })?;
            print_stdout(format_args!("{text}"))?;
        }
        Some(dir) => {
            create_out_dir(dir)?;
            let report_path = dir.join("metrics.json");
            write_metrics_json(&report_path, &report)?;
            logger.info(format!("wrote {}", report_path.display()));

            let mut manifest = Manifest::new(
                "metrics",
                json!({ "peak": peak, "scale_ratio": scale_ratio }),
            );
            manifest.record_input("reference", ref_path)?;
            manifest.record_input("test", test_path)?;
            manifest.record_output("report", &report_path)?;
            let path = manifest.write(dir)?;
            logger.info(format!("wrote {}", path.display()));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fuse(
    hsi_path: &Path,
    msi_path: &Path,
    srf_path: &Path,
    psf_path: &Path,
    ratio: usize,
    endmembers: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    file_config: &FileConfig,
    logger: &Logger,
) -> Result<()> {
    let mut config = CnmfConfig::default();
    if let Some(o) = &file_config.fuse {
        if let Some(v) = o.endmembers {
            config.endmembers = v;
        }
        if let Some(v) = o.outer_iterations {
            config.outer_iterations = v;
        }
        if let Some(v) = o.inner_iterations {
            config.inner_iterations = v;
        }
        if let Some(v) = o.epsilon {
            config.epsilon = v;
        }
        if let Some(v) = o.seed {
            config.seed = v;
        }
    }
    if let Some(v) = endmembers {
        config.endmembers = v;
    }
    if let Some(v) = seed {
        config.seed = v;
    }
    config.validate()?;

    let hsi = read_cube(hsi_path)?;
    let msi = read_cube(msi_path)?;
    let srf = read_srf_csv(srf_path)?;
    let psf = read_kernel_csv(psf_path)?;
    let pair = ObservedPair::new(hsi, msi, ratio)?;
    let geometry = Geometry::centered(ratio);
    logger.debug(format!(
        "fusing: {} endmembers, {}x{} alternation steps, seed {}",
        config.endmembers, config.outer_iterations, config.inner_iterations, config.seed
    ));
    let fused = cnmf_fuse(&pair, &srf, &psf, &config, &geometry)?;

    create_out_dir(out)?;
    let fused_path = out.join("fused.cube");
    write_cube(&fused_path, &fused, CubeDtype::F64)?;
    logger.info(format!("wrote {}", fused_path.display()));

    let mut manifest = Manifest::new(
        "fuse",
        json!({
            "ratio": ratio,
            "endmembers": config.endmembers,
            "outer_iterations": config.outer_iterations,
            "inner_iterations": config.inner_iterations,
            "epsilon": config.epsilon,
            "seed": config.seed,
        }),
    );
    manifest.record_input("hsi", hsi_path)?;
    manifest.record_input("msi", msi_path)?;
    manifest.record_input("srf", srf_path)?;
    manifest.record_input("psf", psf_path)?;
    manifest.record_output("fused", &fused_path)?;
    let path = manifest.write(out)?;
    logger.info(format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_gradcheck(
    seed: u64,
    height: usize,
    width: usize,
    bands: usize,
    msi_bands: usize,
    ratio: usize,
) -> Result<i32> {
    let (pair, params, geometry) = gradcheck_instance(height, width, bands, msi_bands, ratio, seed)?;
    let check = finite_difference_check(&pair, &params, &HyperConfig::default(), &geometry, None, 1e-6)?;
    print_stdout(format_args!(
        "max relative error {:.6e} over {} parameters (worst at {})",
        check.max_rel_error, check.checked, check.worst_parameter
    ))?;
    Ok(if check.max_rel_error <= 1e-5 { 0 } else { 1 })
}

// --- dispatch ---------------------------------------------------------------------

fn run(cli: Cli, logger: &Logger) -> Result<i32> {
    let file_config = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            height,
            width,
            bands,
            endmembers,
            seed,
            out,
        } => cmd_synth(height, width, bands, endmembers, seed, &out, logger)?,
        Command::Degrade {
            input,
            kernel,
            ratio,
            srf,
            boundary,
            offset,
            noise_snr,
            out,
        } => cmd_degrade(
            &input,
            &kernel,
            ratio,
            &srf,
            boundary.as_deref(),
            offset,
            noise_snr,
            &out,
            logger,
        )?,
        Command::Estimate {
            hsi,
            msi,
            ratio,
            iters,
            pretrain,
            lambda,
            lr0,
            decay_step,
            decay_rate,
            band_mask,
            seed,
            out,
        } => {
            let flags = EstimateFlags {
                iters,
                pretrain,
                lambda,
                lr0,
                decay_step,
                decay_rate,
                seed,
            };
            cmd_estimate(
                &hsi,
                &msi,
                ratio,
                &flags,
                band_mask.as_deref(),
                &out,
                &file_config,
                logger,
            )?
        }
        Command::Metrics {
            reference,
            test,
            peak,
            scale_ratio,
            out,
        } => cmd_metrics(&reference, &test, peak, scale_ratio, out.as_deref(), logger)?,
        Command::Fuse {
            hsi,
            msi,
            srf,
            psf,
            ratio,
            endmembers,
            seed,
            out,
        } => cmd_fuse(
            &hsi,
            &msi,
            &srf,
            &psf,
            ratio,
            endmembers,
            seed,
            &out,
            &file_config,
            logger,
        )?,
        Command::Gradcheck {
            seed,
            height,
            width,
            bands,
            msi_bands,
            ratio,
        } => return cmd_gradcheck(seed, height, width, bands, msi_bands, ratio),
    }
    Ok(0)
}

/// Validation problems exit 2, runtime failures exit 1, matching clap's own
/// usage-error convention.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Invalid(_) | Error::Shape(_) => 2,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::Io { .. } | Error::Format { .. } => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    let logger = match Logger::from_env() {
        Ok(l) => l,
        Err(e) => {
            eprintln!("degradekit: {e}");
            std::process::exit(2);
        }
    };
    match run(cli, &logger) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("degradekit: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
