//! Bit-exact file formats: a binary cube container, full-precision CSV for
//! kernels and response matrices, and a versioned JSON envelope for
//! estimation results and metric reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::{HyperCube, Kernel, Matrix, SrfMatrix};
use crate::error::{Error, Result};
use crate::estimator::{EstimationResult, HyperConfig, TraceEntry};
use crate::metrics::MetricReport;

/// Version tag written into every JSON document.
pub const FORMAT_VERSION: &str = "degradekit-1";

/// Leading bytes of every cube file.
pub const CUBE_MAGIC: &[u8; 8] = b"HSICUBE1";

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn format_error(path: &Path, detail: String) -> Error {
    Error::Format { path: path.to_path_buf(), detail }
}

// --- binary cubes -----------------------------------------------------------

/// Cube payload encodings. The header stores the numeric tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CubeDtype {
    F32,
    F64,
}

impl CubeDtype {
    pub fn tag(self) -> u32 {
        match self {
            CubeDtype::F32 => 1,
            CubeDtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(CubeDtype::F32),
            2 => Some(CubeDtype::F64),
            _ => None,
        }
    }

    pub fn value_size(self) -> usize {
        match self {
            CubeDtype::F32 => 4,
            CubeDtype::F64 => 8,
        }
    }
}

/// Writes magic, four little-endian u32 dims (height, width, bands, dtype),
/// then the values little-endian in band-sequential order. Reading a dtype-2
/// file back reproduces the cube bit for bit; dtype 1 narrows to f32 and
/// rejects values whose magnitude overflows it.
pub fn write_cube(path: impl AsRef<Path>, cube: &HyperCube, dtype: CubeDtype) -> Result<()> {
    let path = path.as_ref();
    let (height, width, bands) = cube.dims();
    let mut buf = Vec::with_capacity(24 + cube.data().len() * dtype.value_size());
    buf.extend_from_slice(CUBE_MAGIC);
    for dim in [height, width, bands] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::Invalid(format!("dimension {dim} does not fit the 32-bit header")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    buf.extend_from_slice(&dtype.tag().to_le_bytes());
    match dtype {
        CubeDtype::F32 => {
            for &v in cube.data() {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::Invalid(format!(
                        "value {v:e} does not fit a 32-bit float"
                    )));
                }
                buf.extend_from_slice(&narrow.to_le_bytes());
            }
        }
        CubeDtype::F64 => {
            for &v in cube.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, &buf).map_err(|e| io_error(path, e))
}

fn header_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("offset checked"))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    if bytes.len() < 24 {
        return Err(format_error(
            path,
            format!("header needs 24 bytes, file ends at byte {}", bytes.len()),
        ));
    }
    if &bytes[0..8] != CUBE_MAGIC {
        return Err(format_error(
            path,
            format!(
                "bad magic {:?} at byte 0, expected {:?}",
                String::from_utf8_lossy(&bytes[0..8]),
                String::from_utf8_lossy(CUBE_MAGIC)
            ),
        ));
    }
    let height = header_u32(&bytes, 8) as usize;
    let width = header_u32(&bytes, 12) as usize;
    let bands = header_u32(&bytes, 16) as usize;
    if height == 0 || width == 0 || bands == 0 {
        return Err(format_error(
            path,
            format!("zero dimension {height}x{width}x{bands} in header at byte 8"),
        ));
    }
    let tag = header_u32(&bytes, 20);
    let dtype = CubeDtype::from_tag(tag)
        .ok_or_else(|| format_error(path, format!("unknown dtype {tag} at byte 20")))?;
    let count = height * width * bands;
    let expected = 24 + count * dtype.value_size();
    if bytes.len() != expected {
        return Err(format_error(
            path,
            format!(
                "payload ends at byte {}, header promises {expected} bytes ({height}x{width}x{bands} dtype {tag})",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(count);
    match dtype {
        CubeDtype::F32 => {
            for chunk in bytes[24..].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().expect("chunk is 4 bytes")) as f64);
            }
        }
        CubeDtype::F64 => {
            for chunk in bytes[24..].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().expect("chunk is 8 bytes")));
            }
        }
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_error(
            path,
            format!("non-finite value at byte {}", 24 + pos * dtype.value_size()),
        ));
    }
    HyperCube::new(height, width, bands, data)
}

// --- CSV matrices -----------------------------------------------------------

/// One row per line, comma-separated, 17 significant digits so every finite
/// double survives the roundtrip.
pub fn write_matrix_csv(path: impl AsRef<Path>, matrix: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for i in 0..matrix.rows() {
        for (j, v) in matrix.row(i).iter().enumerate() {
            if j > 0 {
                text.push(',');
            }
            text.push_str(&format!("{v:.16e}"));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        let mut count = 0;
        for field in line.split(',') {
            let value: f64 = field.trim().parse().map_err(|_| {
                format_error(path, format!("unparsable field '{field}' at line {line_no}"))
            })?;
            if !value.is_finite() {
                return Err(format_error(
                    path,
                    format!("non-finite field '{field}' at line {line_no}"),
                ));
            }
            data.push(value);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(format_error(
                    path,
                    format!("row of {count} fields at line {line_no}, previous rows had {c}"),
                ));
            }
            Some(_) => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| format_error(path, "file holds no rows".into()))?;
    Matrix::new(rows, cols, data)
}

/// Kernel as a size x size CSV grid.
pub fn write_kernel_csv(path: impl AsRef<Path>, kernel: &Kernel) -> Result<()> {
    let n = kernel.size();
    let matrix = Matrix::new(n, n, kernel.weights().to_vec())?;
    write_matrix_csv(path, &matrix)
}

pub fn read_kernel_csv(path: impl AsRef<Path>) -> Result<Kernel> {
    let path = path.as_ref();
    let matrix = read_matrix_csv(path)?;
    if matrix.rows() != matrix.cols() {
        return Err(format_error(
            path,
            format!("kernel must be square, got {}x{}", matrix.rows(), matrix.cols()),
        ));
    }
    Kernel::new(matrix.rows(), matrix.data().to_vec())
}

/// Response matrix as a rows-by-columns = input-bands-by-output-bands grid.
pub fn write_srf_csv(path: impl AsRef<Path>, srf: &SrfMatrix) -> Result<()> {
    write_matrix_csv(path, srf.weights())
}

pub fn read_srf_csv(path: impl AsRef<Path>) -> Result<SrfMatrix> {
    SrfMatrix::new(read_matrix_csv(path)?)
}

// --- JSON documents ---------------------------------------------------------

// Serde mirrors keep the core types serialization-free; struct field order is
// the stable on-disk field order.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDoc {
    fn from_matrix(m: &Matrix) -> Self {
        MatrixDoc { rows: m.rows(), cols: m.cols(), data: m.data().to_vec() }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    pub lambda: f64,
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub lr0: f64,
    pub decay_step: usize,
    pub decay_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl ConfigDoc {
    fn from_config(c: &HyperConfig) -> Self {
        ConfigDoc {
            lambda: c.lambda,
            iterations: c.iterations,
            pretrain_iterations: c.pretrain_iterations,
            lr0: c.lr0,
            decay_step: c.decay_step,
            decay_rate: c.decay_rate,
            adam_beta1: c.adam_beta1,
            adam_beta2: c.adam_beta2,
            adam_eps: c.adam_eps,
            seed: c.seed,
        }
    }

    fn to_config(&self) -> HyperConfig {
        HyperConfig {
            lambda: self.lambda,
            iterations: self.iterations,
            pretrain_iterations: self.pretrain_iterations,
            lr0: self.lr0,
            decay_step: self.decay_step,
            decay_rate: self.decay_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntryDoc {
    pub iteration: usize,
    pub data_mse: f64,
    pub tv: f64,
    pub total: f64,
}

/// On-disk form of an estimation run: version tag, kind tag, config echo,
/// then the learned factors and the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationDoc {
    pub format_version: String,
    pub kind: String,
    pub config: ConfigDoc,
    pub srf: MatrixDoc,
    pub psf: MatrixDoc,
    pub loss_trace: Vec<TraceEntryDoc>,
}

pub const ESTIMATION_KIND: &str = "estimation_result";
pub const METRICS_KIND: &str = "metric_report";

impl EstimationDoc {
    pub fn from_result(result: &EstimationResult) -> Self {
        let n = result.psf.size();
        EstimationDoc {
            format_version: FORMAT_VERSION.into(),
            kind: ESTIMATION_KIND.into(),
            config: ConfigDoc::from_config(&result.config),
            srf: MatrixDoc::from_matrix(result.srf.weights()),
            psf: MatrixDoc {
                rows: n,
                cols: n,
                data: result.psf.weights().to_vec(),
            },
            loss_trace: result
                .loss_trace
                .iter()
                .map(|t| TraceEntryDoc {
                    iteration: t.iteration,
                    data_mse: t.data_mse,
                    tv: t.tv,
                    total: t.total,
                })
                .collect(),
        }
    }

    pub fn to_result(&self) -> Result<EstimationResult> {
        if self.psf.rows != self.psf.cols {
            return Err(Error::Shape(format!(
                "psf must be square, got {}x{}",
                self.psf.rows, self.psf.cols
            )));
        }
        Ok(EstimationResult {
            srf: SrfMatrix::new(self.srf.to_matrix()?)?,
            psf: Kernel::new(self.psf.rows, self.psf.data.clone())?,
            loss_trace: self
                .loss_trace
                .iter()
                .map(|t| TraceEntry {
                    iteration: t.iteration,
                    data_mse: t.data_mse,
                    tv: t.tv,
                    total: t.total,
                })
                .collect(),
            config: self.config.to_config(),
        })
    }
}

// PSNR is the one metric that can be legitimately infinite (identical
// inputs), and JSON has no literal for it.
mod psnr_field {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Field {
            Number(f64),
            Text(String),
        }
        match Field::deserialize(d)? {
            Field::Number(v) => Ok(v),
            Field::Text(ref t) if t == "inf" => Ok(f64::INFINITY),
            Field::Text(t) => Err(D::Error::custom(format!("expected a number or \"inf\", got \"{t}\""))),
        }
    }
}

mod psnr_vec_field {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Field {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let items: Vec<Field> = v
            .iter()
            .map(|x| if x.is_infinite() { Field::Text("inf".into()) } else { Field::Number(*x) })
            .collect();
        items.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        Vec::<Field>::deserialize(d)?
            .into_iter()
            .map(|f| match f {
                Field::Number(v) => Ok(v),
                Field::Text(ref t) if t == "inf" => Ok(f64::INFINITY),
                Field::Text(t) => {
                    Err(D::Error::custom(format!("expected a number or \"inf\", got \"{t}\"")))
                }
            })
            .collect()
    }
}

/// On-disk form of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReportDoc {
    pub format_version: String,
    pub kind: String,
    #[serde(with = "psnr_field")]
    pub psnr: f64,
    pub ssim: f64,
    pub ergas: f64,
    pub sam: f64,
    pub sid: f64,
    #[serde(with = "psnr_vec_field")]
    pub psnr_per_band: Vec<f64>,
    pub ssim_per_band: Vec<f64>,
}

impl MetricReportDoc {
    pub fn from_report(report: &MetricReport) -> Self {
        MetricReportDoc {
            format_version: FORMAT_VERSION.into(),
            kind: METRICS_KIND.into(),
            psnr: report.psnr,
            ssim: report.ssim,
            ergas: report.ergas,
            sam: report.sam,
            sid: report.sid,
            psnr_per_band: report.psnr_per_band.clone(),
            ssim_per_band: report.ssim_per_band.clone(),
        }
    }

    pub fn to_report(&self) -> MetricReport {
        MetricReport {
            psnr: self.psnr,
            ssim: self.ssim,
            ergas: self.ergas,
            sam: self.sam,
            sid: self.sid,
            psnr_per_band: self.psnr_per_band.clone(),
            ssim_per_band: self.ssim_per_band.clone(),
        }
    }
}

fn check_envelope(path: &Path, version: &str, kind: &str, expected_kind: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(format_error(
            path,
            format!("format version '{version}', this build reads '{FORMAT_VERSION}'"),
        ));
    }
    if kind != expected_kind {
        return Err(format_error(path, format!("kind '{kind}', expected '{expected_kind}'")));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)
        .map_err(|e| format_error(path, format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_error(path, e.to_string()))
}

pub fn write_estimation_json(path: impl AsRef<Path>, result: &EstimationResult) -> Result<()> {
    write_json(path.as_ref(), &EstimationDoc::from_result(result))
}

pub fn read_estimation_json(path: impl AsRef<Path>) -> Result<EstimationResult> {
    let path = path.as_ref();
    let doc: EstimationDoc = read_json(path)?;
    check_envelope(path, &doc.format_version, &doc.kind, ESTIMATION_KIND)?;
    doc.to_result()
}

pub fn write_metrics_json(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    write_json(path.as_ref(), &MetricReportDoc::from_report(report))
}

pub fn read_metrics_json(path: impl AsRef<Path>) -> Result<MetricReport> {
    let path = path.as_ref();
    let doc: MetricReportDoc = read_json(path)?;
    check_envelope(path, &doc.format_version, &doc.kind, METRICS_KIND)?;
    Ok(doc.to_report())
}
