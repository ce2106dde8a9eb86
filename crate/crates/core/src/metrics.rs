//! Quantitative comparison metrics for image cubes and flattened vectors:
//! PSNR, SSIM, ERGAS, SAM, and SID, plus a combined report.
//!
//! Definitions are pinned here so numbers are reproducible: SSIM uses a 7x7
//! uniform window over fully interior positions with biased moments, SAM is
//! reported in degrees, SID normalizes spectra after adding 1e-12, and PSNR
//! defaults its peak to the maximum of the reference cube.

use crate::cube::{frobenius_mse, HyperCube};
use crate::error::{Error, Result};

const SSIM_WINDOW: usize = 7;
const SID_EPSILON: f64 = 1e-12;

fn check_dims(reference: &HyperCube, test: &HyperCube) -> Result<()> {
    if reference.dims() != test.dims() {
        return Err(Error::Shape(format!(
            "metric over {:?} vs {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    Ok(())
}

fn resolve_peak(reference: &HyperCube, peak: Option<f64>) -> Result<f64> {
    let p = match peak {
        Some(p) => p,
        None => reference.data().iter().cloned().fold(f64::MIN, f64::max),
    };
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Invalid(format!("peak must be positive and finite, got {p}")));
    }
    Ok(p)
}

/// Peak signal-to-noise ratio in dB: 10 log10(peak^2 / MSE); +inf when the
/// cubes are identical. `peak` defaults to the maximum of the reference.
pub fn psnr(reference: &HyperCube, test: &HyperCube, peak: Option<f64>) -> Result<f64> {
    check_dims(reference, test)?;
    let p = resolve_peak(reference, peak)?;
    let mse = frobenius_mse(reference, test)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (p * p / mse).log10())
}

/// Per-band PSNR under one shared peak.
pub fn psnr_per_band(
    reference: &HyperCube,
    test: &HyperCube,
    peak: Option<f64>,
) -> Result<Vec<f64>> {
    check_dims(reference, test)?;
    let p = resolve_peak(reference, peak)?;
    let mut out = Vec::with_capacity(reference.bands());
    for k in 0..reference.bands() {
        let mut acc = 0.0;
        for (a, b) in reference.band(k).iter().zip(test.band(k)) {
            let d = a - b;
            acc += d * d;
        }
        let mse = acc / reference.band(k).len() as f64;
        out.push(if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (p * p / mse).log10()
        });
    }
    Ok(out)
}

fn ssim_band(x: &[f64], y: &[f64], height: usize, width: usize, peak: f64) -> f64 {
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for h0 in 0..=height - SSIM_WINDOW {
        for w0 in 0..=width - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dh in 0..SSIM_WINDOW {
                for dw in 0..SSIM_WINDOW {
                    let a = x[(h0 + dh) * width + (w0 + dw)];
                    let b = y[(h0 + dh) * width + (w0 + dw)];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let mx = sx / n;
            let my = sy / n;
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cxy = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    total / windows as f64
}

/// Per-band structural similarity, averaged over valid 7x7 window positions.
pub fn ssim_per_band(
    reference: &HyperCube,
    test: &HyperCube,
    peak: Option<f64>,
) -> Result<Vec<f64>> {
    check_dims(reference, test)?;
    let p = resolve_peak(reference, peak)?;
    let (height, width, bands) = reference.dims();
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs each band at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}"
        )));
    }
    Ok((0..bands)
        .map(|k| ssim_band(reference.band(k), test.band(k), height, width, p))
        .collect())
}

/// Mean structural similarity over all bands; exactly 1 for identical cubes.
pub fn ssim(reference: &HyperCube, test: &HyperCube, peak: Option<f64>) -> Result<f64> {
    let per_band = ssim_per_band(reference, test, peak)?;
    Ok(per_band.iter().sum::<f64>() / per_band.len() as f64)
}

/// Relative global dimensionless error of synthesis:
/// 100 * scale_ratio * sqrt(mean_k(RMSE_k^2 / mu_k^2)) with mu_k the
/// reference band mean. Use scale_ratio 1 for same-resolution comparisons and
/// 1/r when the test was fused up from resolution ratio r.
pub fn ergas(reference: &HyperCube, test: &HyperCube, scale_ratio: f64) -> Result<f64> {
    check_dims(reference, test)?;
    if !(scale_ratio > 0.0) || !scale_ratio.is_finite() {
        return Err(Error::Invalid(format!(
            "scale ratio must be positive and finite, got {scale_ratio}"
        )));
    }
    let bands = reference.bands();
    let plane = reference.band(0).len() as f64;
    let mut acc = 0.0;
    for k in 0..bands {
        let mean = reference.band(k).iter().sum::<f64>() / plane;
        if mean == 0.0 {
            return Err(Error::Invalid(format!("reference band {k} has zero mean")));
        }
        let mut sq = 0.0;
        for (a, b) in reference.band(k).iter().zip(test.band(k)) {
            let d = a - b;
            sq += d * d;
        }
        acc += (sq / plane) / (mean * mean);
    }
    Ok(100.0 * scale_ratio * (acc / bands as f64).sqrt())
}

// Angle between two spectra with the cosine clamped to [-1, 1]; cosines
// within 4 ulps of 1 snap to a zero angle so parallel spectra measure
// exactly 0 despite dot/norm rounding.
fn spectral_angle(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    let cos = (dot / (norm_a * norm_b)).clamp(-1.0, 1.0);
    if 1.0 - cos <= 4.0 * f64::EPSILON {
        return 0.0;
    }
    cos.acos()
}

/// Spectral angle mapper: mean over pixels of the angle between reference
/// and test spectra, in degrees. Zero-norm pixels are skipped; if every
/// pixel is zero-norm the comparison is rejected.
pub fn sam(reference: &HyperCube, test: &HyperCube) -> Result<f64> {
    check_dims(reference, test)?;
    let (height, width, bands) = reference.dims();
    let mut total = 0.0;
    let mut used = 0usize;
    for h in 0..height {
        for w in 0..width {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..bands {
                let a = reference.get(h, w, k);
                let b = test.get(h, w, k);
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            total += spectral_angle(dot, na.sqrt(), nb.sqrt());
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Invalid("every pixel has a zero-norm spectrum".into()));
    }
    Ok((total / used as f64).to_degrees())
}

/// Spectral information divergence: per pixel, both spectra are shifted by
/// `epsilon` (default 1e-12), normalized to probability vectors, and compared
/// with symmetric KL divergence; the result is the mean over pixels.
pub fn sid(reference: &HyperCube, test: &HyperCube, epsilon: Option<f64>) -> Result<f64> {
    check_dims(reference, test)?;
    let eps = epsilon.unwrap_or(SID_EPSILON);
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Invalid(format!(
            "sid epsilon must be positive and finite, got {eps}"
        )));
    }
    if let Some(v) = reference.data().iter().chain(test.data()).find(|v| **v < 0.0) {
        return Err(Error::Invalid(format!(
            "sid requires nonnegative spectra, found {v}"
        )));
    }
    let (height, width, bands) = reference.dims();
    let mut total = 0.0;
    let mut p = vec![0.0; bands];
    let mut q = vec![0.0; bands];
    for h in 0..height {
        for w in 0..width {
            let (mut sp, mut sq) = (0.0, 0.0);
            for k in 0..bands {
                p[k] = reference.get(h, w, k) + eps;
                q[k] = test.get(h, w, k) + eps;
                sp += p[k];
                sq += q[k];
            }
            let mut div = 0.0;
            for k in 0..bands {
                let pk = p[k] / sp;
                let qk = q[k] / sq;
                div += pk * (pk / qk).ln() + qk * (qk / pk).ln();
            }
            total += div;
        }
    }
    Ok(total / (height * width) as f64)
}

/// RMSE and SAM angle (degrees) between two flattened vectors, for comparing
/// estimated kernels or response columns against their references.
pub fn vector_metrics(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vector metrics over lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Invalid("vector metrics need at least one entry".into()));
    }
    let (mut sq, mut dot, mut na, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        sq += d * d;
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("vector metrics reject zero-norm inputs".into()));
    }
    let rmse = (sq / a.len() as f64).sqrt();
    Ok((rmse, spectral_angle(dot, na.sqrt(), nb.sqrt()).to_degrees()))
}

/// All five cube metrics from one pass, plus per-band PSNR/SSIM breakdowns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ergas: f64,
    pub sam: f64,
    pub sid: f64,
    pub psnr_per_band: Vec<f64>,
    pub ssim_per_band: Vec<f64>,
}

impl MetricReport {
    /// Aligned two-column text rendering for console output.
    pub fn to_table(&self) -> String {
        format!(
            "PSNR   {:>12.4} dB\nSSIM   {:>12.6}\nERGAS  {:>12.6}\nSAM    {:>12.6} deg\nSID    {:>12.6e}\n",
            self.psnr, self.ssim, self.ergas, self.sam, self.sid
        )
    }
}

/// Evaluates the full metric suite of one reference/test pair.
pub fn compute_report(
    reference: &HyperCube,
    test: &HyperCube,
    peak: Option<f64>,
    scale_ratio: f64,
) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(reference, test, peak)?,
        ssim: ssim(reference, test, peak)?,
        ergas: ergas(reference, test, scale_ratio)?,
        sam: sam(reference, test)?,
        sid: sid(reference, test, None)?,
        psnr_per_band: psnr_per_band(reference, test, peak)?,
        ssim_per_band: ssim_per_band(reference, test, peak)?,
    })
}
