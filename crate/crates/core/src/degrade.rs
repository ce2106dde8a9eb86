//! Forward degradation model and synthetic data generators.
//!
//! A high-resolution scene Z turns into an observed pair: the low-resolution
//! hyperspectral image X = decimate(Z blurred by a kernel) and the
//! high-resolution multispectral image Y = Z projected through a spectral
//! response matrix. Generators for scenes, kernels, and response profiles
//! produce desk-scale test beds for the estimator and the fusion baseline.

use crate::cube::{
    conv2d_bandwise, downsample, mode3_product, BoundaryMode, HyperCube, Kernel, Matrix, SrfMatrix,
};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;

// --- observed geometry -------------------------------------------------------

/// Spatial degradation geometry: decimation ratio, boundary rule for the
/// blur, and the decimation phase (which sample of each ratio x ratio block
/// survives).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub ratio: usize,
    pub boundary: BoundaryMode,
    pub offset: usize,
}

impl Geometry {
    /// Center-of-block decimation with the default boundary rule.
    pub fn centered(ratio: usize) -> Self {
        Self {
            ratio,
            boundary: BoundaryMode::default(),
            offset: ratio / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 {
            return Err(Error::Invalid("geometry ratio must be positive".into()));
        }
        if self.offset >= self.ratio {
            return Err(Error::Invalid(format!(
                "geometry offset {} must lie in [0, {})",
                self.offset, self.ratio
            )));
        }
        Ok(())
    }
}

/// A co-registered low-resolution hyperspectral / high-resolution
/// multispectral pair observed from one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPair {
    hsi: HyperCube,
    msi: HyperCube,
    ratio: usize,
}

impl ObservedPair {
    /// Requires msi dims = ratio * hsi dims and hsi.bands > msi.bands >= 1.
    pub fn new(hsi: HyperCube, msi: HyperCube, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Invalid("pair ratio must be positive".into()));
        }
        if msi.height() != ratio * hsi.height() || msi.width() != ratio * hsi.width() {
            return Err(Error::Shape(format!(
                "msi {}x{} is not {ratio}x the hsi {}x{}",
                msi.height(),
                msi.width(),
                hsi.height(),
                hsi.width()
            )));
        }
        if hsi.bands() <= msi.bands() {
            return Err(Error::Invalid(format!(
                "hsi must have more bands than msi, got {} vs {}",
                hsi.bands(),
                msi.bands()
            )));
        }
        Ok(Self { hsi, msi, ratio })
    }

    pub fn hsi(&self) -> &HyperCube {
        &self.hsi
    }

    pub fn msi(&self) -> &HyperCube {
        &self.msi
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn into_parts(self) -> (HyperCube, HyperCube, usize) {
        (self.hsi, self.msi, self.ratio)
    }
}

// --- degradation operators ----------------------------------------------------

/// Blur every band with `kernel`, then decimate by `ratio` at `offset`.
pub fn spatial_degrade(
    cube: &HyperCube,
    kernel: &Kernel,
    ratio: usize,
    boundary: BoundaryMode,
    offset: usize,
) -> Result<HyperCube> {
    downsample(&conv2d_bandwise(cube, kernel, boundary)?, ratio, offset)
}

/// Project every pixel spectrum through the response matrix: output band j
/// is the srf-column-j weighted sum of input bands.
pub fn spectral_degrade(cube: &HyperCube, srf: &SrfMatrix) -> Result<HyperCube> {
    if srf.input_bands() != cube.bands() {
        return Err(Error::Shape(format!(
            "srf expects {} input bands, cube has {}",
            srf.input_bands(),
            cube.bands()
        )));
    }
    mode3_product(cube, &srf.weights().transposed())
}

/// Apply both degradations to one scene and package the result.
pub fn degrade_scene(
    scene: &HyperCube,
    kernel: &Kernel,
    srf: &SrfMatrix,
    geometry: &Geometry,
) -> Result<ObservedPair> {
    geometry.validate()?;
    let hsi = spatial_degrade(scene, kernel, geometry.ratio, geometry.boundary, geometry.offset)?;
    let msi = spectral_degrade(scene, srf)?;
    ObservedPair::new(hsi, msi, geometry.ratio)
}

// --- kernel generators ----------------------------------------------------------

/// Isotropic Gaussian kernel centered at ((size-1)/2, (size-1)/2),
/// normalized to sum 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel> {
    if size == 0 {
        return Err(Error::Invalid("kernel size must be positive".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            weights.push((-(dy * dy + dx * dx) * inv).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Kernel::new(size, weights)
}

/// Uniform kernel with every entry 1/size^2.
pub fn average_kernel(size: usize) -> Result<Kernel> {
    if size == 0 {
        return Err(Error::Invalid("kernel size must be positive".into()));
    }
    Kernel::uniform(size)
}

// --- spectral response generators ------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrfKind {
    /// Smooth Gaussian response curves.
    GaussianBumps,
    /// Flat-top rectangular response bands.
    BoxBands,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overlap {
    /// Adjacent curves share a substantial part of their support.
    Full,
    /// Curve supports are disjoint (tails only through the floor term).
    Limited,
}

/// Parametric description of a synthetic spectral response.
#[derive(Debug, Clone, PartialEq)]
pub struct SrfProfile {
    pub kind: SrfKind,
    /// One curve center per output band, in source-band units, within [0, B).
    pub centers: Vec<f64>,
    /// Curve width per output band: the box width, or the Gaussian sigma.
    pub widths: Vec<f64>,
    pub overlap: Overlap,
    /// Nonnegative value added to every entry (models nonzero tailing).
    pub floor: f64,
}

impl SrfProfile {
    /// Curves spread uniformly over `input_bands`, with widths chosen so the
    /// overlap regime holds: full overlap makes adjacent supports share well
    /// over 20% of their extent, limited overlap keeps supports disjoint.
    pub fn evenly_spaced(
        kind: SrfKind,
        input_bands: usize,
        output_bands: usize,
        overlap: Overlap,
        floor: f64,
    ) -> Result<SrfProfile> {
        if output_bands == 0 || output_bands >= input_bands {
            return Err(Error::Invalid(format!(
                "need 1 <= output bands < input bands, got {output_bands} vs {input_bands}"
            )));
        }
        let spacing = input_bands as f64 / output_bands as f64;
        let centers: Vec<f64> = (0..output_bands)
            .map(|j| (j as f64 + 0.5) * spacing - 0.5)
            .collect();
        let width = match (kind, overlap) {
            (SrfKind::BoxBands, Overlap::Limited) => spacing,
            (SrfKind::BoxBands, Overlap::Full) => 1.5 * spacing,
            (SrfKind::GaussianBumps, Overlap::Limited) => spacing / 6.0,
            (SrfKind::GaussianBumps, Overlap::Full) => 0.4 * spacing,
        };
        Ok(SrfProfile {
            kind,
            centers,
            widths: vec![width; output_bands],
            overlap,
            floor,
        })
    }
}

/// Half-width of the region a curve meaningfully occupies, for the
/// limited-overlap disjointness check.
fn support_half_width(kind: SrfKind, width: f64) -> f64 {
    match kind {
        SrfKind::BoxBands => width / 2.0,
        SrfKind::GaussianBumps => 3.0 * width,
    }
}

/// Builds a response matrix from a profile. The seed shapes per-band
/// amplitudes of gaussian-bumps profiles; box-bands profiles are fully
/// determined by the profile itself.
pub fn synth_srf(
    input_bands: usize,
    output_bands: usize,
    profile: &SrfProfile,
    seed: u64,
) -> Result<SrfMatrix> {
    if output_bands == 0 || output_bands >= input_bands {
        return Err(Error::Invalid(format!(
            "need 1 <= output bands < input bands, got {output_bands} vs {input_bands}"
        )));
    }
    if profile.centers.len() != output_bands || profile.widths.len() != output_bands {
        return Err(Error::Invalid(format!(
            "profile describes {} curves, requested {output_bands}",
            profile.centers.len()
        )));
    }
    if profile.floor < 0.0 || !profile.floor.is_finite() {
        return Err(Error::Invalid("profile floor must be nonnegative".into()));
    }
    for (j, (&c, &w)) in profile.centers.iter().zip(&profile.widths).enumerate() {
        if !(c >= 0.0 && c < input_bands as f64) {
            return Err(Error::Invalid(format!(
                "curve {j} center {c} lies outside [0, {input_bands})"
            )));
        }
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::Invalid(format!("curve {j} width must be positive, got {w}")));
        }
    }
    if profile.overlap == Overlap::Limited {
        let mut order: Vec<usize> = (0..output_bands).collect();
        order.sort_by(|&a, &b| profile.centers[a].total_cmp(&profile.centers[b]));
        for pair in order.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let hi = profile.centers[a] + support_half_width(profile.kind, profile.widths[a]);
            let lo = profile.centers[b] - support_half_width(profile.kind, profile.widths[b]);
            if hi > lo + 1e-9 {
                return Err(Error::Invalid(format!(
                    "limited-overlap curves {a} and {b} intersect ({hi} > {lo})"
                )));
            }
        }
    }

    let mut rng = Xoshiro256::seed_from(seed);
    let amplitudes: Vec<f64> = match profile.kind {
        SrfKind::BoxBands => vec![1.0; output_bands],
        SrfKind::GaussianBumps => (0..output_bands)
            .map(|_| 0.9 + 0.2 * rng.next_f64())
            .collect(),
    };
    let weights = Matrix::from_fn(input_bands, output_bands, |k, j| {
        let d = k as f64 - profile.centers[j];
        let curve = match profile.kind {
            SrfKind::BoxBands => {
                if d.abs() < profile.widths[j] / 2.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SrfKind::GaussianBumps => {
                let s = profile.widths[j];
                (-d * d / (2.0 * s * s)).exp()
            }
        };
        amplitudes[j] * curve + profile.floor
    })?;
    SrfMatrix::new(weights)
}

// --- scene generation ---------------------------------------------------------------

/// Parameters for a synthetic ground-truth scene built from a linear
/// mixture of a few endmember spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub endmember_count: usize,
    /// Spectral correlation length of the endmember curves, in bands.
    pub smoothness: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Invalid("scene dims must be positive".into()));
        }
        if self.endmember_count == 0 {
            return Err(Error::Invalid("endmember count must be at least 1".into()));
        }
        if !(self.smoothness >= 0.0) || !self.smoothness.is_finite() {
            return Err(Error::Invalid("smoothness must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A generated scene together with the ground-truth factors that built it.
#[derive(Debug, Clone)]
pub struct SceneComponents {
    /// height x width x p cube of per-pixel mixing weights (sum 1 per pixel).
    pub abundances: HyperCube,
    /// bands x p endmember spectra, scaled consistently with the scene.
    pub endmembers: Matrix,
    /// The mixed scene, scaled into [0, 1] with maximum exactly 1.
    pub scene: HyperCube,
}

/// Moving-average smoothing with edge reflection, window = 2*half+1.
fn smooth_series(values: &[f64], half: usize) -> Vec<f64> {
    if half == 0 {
        return values.to_vec();
    }
    let n = values.len() as i64;
    let norm = 1.0 / (2 * half + 1) as f64;
    (0..values.len())
        .map(|i| {
            let mut acc = 0.0;
            for d in -(half as i64)..=(half as i64) {
                let mut idx = i as i64 + d;
                loop {
                    if idx < 0 {
                        idx = -idx - 1;
                    } else if idx >= n {
                        idx = 2 * n - 1 - idx;
                    } else {
                        break;
                    }
                }
                acc += values[idx as usize];
            }
            acc * norm
        })
        .collect()
}

/// Generates the scene plus the abundance/endmember factors behind it.
pub fn synth_scene_components(spec: &SceneSpec) -> Result<SceneComponents> {
    spec.validate()?;
    let p = spec.endmember_count;
    let mut rng = Xoshiro256::seed_from(spec.seed);

    // Endmember spectra: spectrally low-pass filtered uniform noise, kept
    // away from zero so every mixture is strictly positive.
    let half = (spec.smoothness.round() as usize) / 2;
    let mut endmember_cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    for _ in 0..p {
        let raw: Vec<f64> = (0..spec.bands).map(|_| rng.next_f64()).collect();
        let smooth = smooth_series(&raw, half);
        endmember_cols.push(smooth.iter().map(|v| 0.05 + 0.95 * v).collect());
    }

    // Abundance maps: spatially low-pass filtered uniform noise, contrast
    // sharpened by a twelfth power, then normalized to sum 1 per pixel. The
    // sharpening carves near-pure regions with crisp transitions; without
    // it every pixel is close to the mean spectrum and the bands become so
    // collinear that downstream estimation problems are badly conditioned.
    let noise = HyperCube::from_fn(spec.height, spec.width, p, |_, _, _| rng.next_f64())?;
    let blurred = if spec.height.min(spec.width) >= 3 {
        let k = Kernel::uniform(3)?;
        conv2d_bandwise(&noise, &k, BoundaryMode::SymmetricReflect)?
    } else {
        noise
    };
    let abundances = HyperCube::from_fn(spec.height, spec.width, p, |h, w, q| {
        let total: f64 = (0..p).map(|t| blurred.get(h, w, t).powi(12)).sum();
        blurred.get(h, w, q).powi(12) / total
    })?;

    // Mix, then scale the whole scene so its maximum is exactly 1.
    let mixed = HyperCube::from_fn(spec.height, spec.width, spec.bands, |h, w, k| {
        (0..p).map(|q| abundances.get(h, w, q) * endmember_cols[q][k]).sum()
    })?;
    let peak = mixed.data().iter().cloned().fold(f64::MIN, f64::max);
    let scene = HyperCube::from_fn(spec.height, spec.width, spec.bands, |h, w, k| {
        mixed.get(h, w, k) / peak
    })?;
    let endmembers = Matrix::from_fn(spec.bands, p, |k, q| endmember_cols[q][k] / peak)?;

    Ok(SceneComponents {
        abundances,
        endmembers,
        scene,
    })
}

/// Generates a smooth nonnegative scene in [0, 1]; see SceneSpec.
pub fn synth_scene(spec: &SceneSpec) -> Result<HyperCube> {
    Ok(synth_scene_components(spec)?.scene)
}

/// Adds white Gaussian noise sized so that 10*log10(signal power / noise
/// power) equals `snr_db` in expectation.
pub fn add_gaussian_noise(cube: &HyperCube, snr_db: f64, seed: u64) -> Result<HyperCube> {
    if !snr_db.is_finite() {
        return Err(Error::Invalid("snr must be finite".into()));
    }
    let n = cube.data().len() as f64;
    let signal_power = cube.data().iter().map(|v| v * v).sum::<f64>() / n;
    let sigma = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = Xoshiro256::seed_from(seed);
    let data = cube.data().iter().map(|v| v + sigma * rng.next_normal()).collect();
    HyperCube::new(cube.height(), cube.width(), cube.bands(), data)
}
